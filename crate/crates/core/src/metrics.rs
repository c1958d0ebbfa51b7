//! Perplexity metrics: generic teacher-forced perplexity, longitudinal
//! imputation perplexity (lpl) and cross-modality imputation perplexity (mpl),
//! with median-across-patients aggregation.
//!
//! lpl and mpl share one scoring path ([`modality_nll`]); they differ only in
//! the prompt layout that supplies the context.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{build_crossmodal_prompt, build_longitudinal_prompt, longitudinal_answer, GrammarError, PromptLayout, TargetSpec, TokenId, TokenSequence, Vocabulary};
use crate::model::{token_logprobs, token_logprobs_within, ConditionalLm, ModelError};
use crate::records::{CodeId, Corpus, EventCode, ModalityId, PatientRecord};
use crate::stats::{bootstrap_median_half_width, median};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("perplexity of an empty sequence")]
    EmptySequence,
    #[error("record {record} has no events of modality {modality}")]
    NoEventsOfModality { record: String, modality: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

/// Which context the codes of one (visit, modality) slot are scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    /// Prior visits only; the decoder opens the visit and then the modality.
    Longitudinal,
    /// Prior visits plus the other modalities of the same visit (cloze slot).
    CrossModal,
}

/// Prompt whose decoder prefix ends right before the first code of `k` in visit `t`.
pub fn slot_layout(vocab: &Vocabulary, record: &PatientRecord, t: usize, k: ModalityId, context: Context) -> Result<PromptLayout, GrammarError> {
    let history = &record.visits[..t];
    match context {
        Context::Longitudinal => {
            let base = build_longitudinal_prompt(vocab, history)?;
            let mut prefix = base.decoder_prefix.into_ids();
            prefix.push(vocab.open(k));
            Ok(PromptLayout { encoder: base.encoder, target: TargetSpec::Modality { visit: t, modality: k }, decoder_prefix: TokenSequence::new(vocab, prefix)? })
        }
        Context::CrossModal => build_crossmodal_prompt(vocab, history, &record.visits[t], k),
    }
}

/// Summed NLL of `codes` under `layout`, with each step's distribution
/// renormalized over the codes of modality `k`.
pub fn modality_nll<M: ConditionalLm + ?Sized>(model: &M, layout: &PromptLayout, record: &PatientRecord, k: ModalityId, codes: &[CodeId]) -> Result<f64, MetricsError> {
    let vocab = model.vocab();
    let target = codes.iter().map(|&code| vocab.code_token(EventCode { modality: k, code })).collect::<Result<Vec<_>, _>>()?;
    let lp = token_logprobs_within(model, layout, &record.baseline, &target, vocab.code_range(k))?;
    Ok(-lp.iter().sum::<f64>())
}

/// Per-visit `(NLL sum, code count)` for modality `k`, skipping visits without it.
fn slot_nlls<M: ConditionalLm + ?Sized>(model: &M, record: &PatientRecord, k: ModalityId, context: Context) -> Result<Vec<(f64, usize)>, MetricsError> {
    let vocab = model.vocab();
    let mut out = Vec::new();
    for (t, visit) in record.visits.iter().enumerate() {
        let codes = visit.codes(k);
        if codes.is_empty() {
            continue;
        }
        let layout = slot_layout(vocab, record, t, k, context)?;
        out.push((modality_nll(model, &layout, record, k, codes)?, codes.len()));
    }
    if out.is_empty() {
        return Err(MetricsError::NoEventsOfModality { record: record.id.clone(), modality: vocab.token_str(vocab.open(k)).unwrap_or("?").to_string() });
    }
    Ok(out)
}

/// Teacher-forced perplexity of `target` after `layout`'s prefix, over the full vocabulary.
pub fn ppl<M: ConditionalLm + ?Sized>(model: &M, layout: &PromptLayout, record: &PatientRecord, target: &[TokenId]) -> Result<f64, MetricsError> {
    if target.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let lp = token_logprobs(model, layout, &record.baseline, target)?;
    Ok((-lp.iter().sum::<f64>() / lp.len() as f64).exp())
}

/// Token perplexity of the whole record under next-visit prediction: every
/// visit's answer tokens (codes, delimiters and the continuation token).
pub fn record_ppl<M: ConditionalLm + ?Sized>(model: &M, record: &PatientRecord) -> Result<f64, MetricsError> {
    let vocab = model.vocab();
    let (mut nll, mut n) = (0.0, 0usize);
    for t in 0..record.visits.len() {
        let layout = build_longitudinal_prompt(vocab, &record.visits[..t])?;
        let answer = longitudinal_answer(vocab, &record.visits[t], t + 1 < record.visits.len())?;
        nll -= token_logprobs(model, &layout, &record.baseline, &answer)?.iter().sum::<f64>();
        n += answer.len();
    }
    if n == 0 {
        return Err(MetricsError::EmptySequence);
    }
    Ok((nll / n as f64).exp())
}

/// Longitudinal imputation perplexity: per-token over all codes of `k` in
/// the record, each visit conditioned on the prior visits only.
pub fn lpl<M: ConditionalLm + ?Sized>(model: &M, record: &PatientRecord, k: ModalityId) -> Result<f64, MetricsError> {
    let slots = slot_nlls(model, record, k, Context::Longitudinal)?;
    let nll: f64 = slots.iter().map(|s| s.0).sum();
    let n: usize = slots.iter().map(|s| s.1).sum();
    Ok((nll / n as f64).exp())
}

/// Cross-modality imputation perplexity for modality `k`: the per-visit mean
/// code NLL, averaged over the visits containing `k`.
pub fn mpl<M: ConditionalLm + ?Sized>(model: &M, record: &PatientRecord, k: ModalityId) -> Result<f64, MetricsError> {
    let slots = slot_nlls(model, record, k, Context::CrossModal)?;
    let mean = slots.iter().map(|(nll, l)| nll / *l as f64).sum::<f64>() / slots.len() as f64;
    Ok(mean.exp())
}

/// Single-number mpl: per visit, the mean over its present modalities of the
/// per-code NLL; then averaged over visits.
pub fn mpl_combined<M: ConditionalLm + ?Sized>(model: &M, record: &PatientRecord) -> Result<f64, MetricsError> {
    let vocab = model.vocab();
    let mut per_visit = Vec::new();
    for (t, visit) in record.visits.iter().enumerate() {
        let mut terms = Vec::new();
        for (k, codes) in visit.iter() {
            let layout = slot_layout(vocab, record, t, k, Context::CrossModal)?;
            terms.push(modality_nll(model, &layout, record, k, codes)? / codes.len() as f64);
        }
        if !terms.is_empty() {
            per_visit.push(terms.iter().sum::<f64>() / terms.len() as f64);
        }
    }
    if per_visit.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    Ok((per_visit.iter().sum::<f64>() / per_visit.len() as f64).exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotMetrics {
    pub lpl: Option<f64>,
    pub mpl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub id: String,
    /// Keyed by modality name; modalities absent from the record are omitted.
    pub modalities: BTreeMap<String, SlotMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Lpl,
    Mpl,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Lpl => "lpl",
            Metric::Mpl => "mpl",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub modality: String,
    pub metric: Metric,
    pub n_patients: usize,
    pub median: f64,
    /// Half-width of the bootstrap 95% interval of the median.
    pub ci95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub modalities: Vec<String>,
    pub aggregate: Vec<Aggregate>,
    pub patients: Vec<PatientMetrics>,
}

impl PerplexityReport {
    pub fn get(&self, modality: &str, metric: Metric) -> Option<&Aggregate> {
        self.aggregate.iter().find(|a| a.modality == modality && a.metric == metric)
    }

    /// One row per report: `label` then `median ± ci95` per modality × metric.
    pub fn table_tsv(rows: &[(&str, &PerplexityReport)]) -> String {
        let mut out = String::from("model");
        let Some((_, first)) = rows.first() else { return out + "\n" };
        for m in &first.modalities {
            for metric in [Metric::Lpl, Metric::Mpl] {
                out.push_str(&format!("\t{m}_{}", metric.name()));
            }
        }
        out.push('\n');
        for (label, report) in rows {
            out.push_str(label);
            for m in &first.modalities {
                for metric in [Metric::Lpl, Metric::Mpl] {
                    match report.get(m, metric) {
                        Some(a) => out.push_str(&format!("\t{:.4} ± {:.4}", a.median, a.ci95)),
                        None => out.push_str("\tNA"),
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// lpl and mpl of every patient and modality, aggregated by the median with
/// a bootstrap interval (`BOOTSTRAP_RESAMPLES` resamples seeded by `seed`).
pub fn evaluate_corpus<M: ConditionalLm + ?Sized>(model: &M, corpus: &Corpus, seed: u64) -> Result<PerplexityReport, MetricsError> {
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let schema = corpus.schema();
    let names: Vec<String> = schema.modalities.iter().map(|m| m.name.clone()).collect();
    let patients: Vec<PatientMetrics> = corpus
        .records()
        .par_iter()
        .map(|r| {
            let mut modalities = BTreeMap::new();
            for k in schema.modality_ids() {
                if r.visits.iter().any(|v| v.has(k)) {
                    modalities.insert(names[k.0].clone(), SlotMetrics { lpl: Some(lpl(model, r, k)?), mpl: Some(mpl(model, r, k)?) });
                }
            }
            Ok(PatientMetrics { id: r.id.clone(), modalities })
        })
        .collect::<Result<_, MetricsError>>()?;
    let mut aggregate = Vec::new();
    for name in &names {
        for metric in [Metric::Lpl, Metric::Mpl] {
            let values: Vec<f64> = patients
                .iter()
                .filter_map(|p| p.modalities.get(name))
                .filter_map(|s| match metric {
                    Metric::Lpl => s.lpl,
                    Metric::Mpl => s.mpl,
                })
                .collect();
            if values.is_empty() {
                continue;
            }
            aggregate.push(Aggregate {
                modality: name.clone(),
                metric,
                n_patients: values.len(),
                median: median(&values),
                ci95: bootstrap_median_half_width(&values, BOOTSTRAP_RESAMPLES, seed),
            });
        }
    }
    Ok(PerplexityReport { modalities: names, aggregate, patients })
}
