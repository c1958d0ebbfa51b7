//! Privacy adversaries: membership inference through a shadow model trained
//! on synthetic records, and attribute inference by comparing an imputer's
//! log-probability of a hidden code with a prior model's.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{build_crossmodal_prompt, TokenId};
use crate::metrics::{lpl, mpl, record_ppl, MetricsError};
use crate::model::{train, ConditionalLm, ModelConfig, ModelError, ModelParams, Selection, TrainConfig};
use crate::records::{CodeId, Corpus, EventCode, ModalityId, PatientRecord, Visit};
use crate::rng::{derive_indexed, derive_seed};
use crate::scalar::log_sum_exp;
use crate::stats::rank_auc;
use crate::tensor::{AdamW, AdamWConfig, Graph, Matrix, ParamSet};

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("in-set has {left} records but out-set has {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("membership labels must contain both classes")]
    DegenerateLabels,
    #[error("delta grid is empty")]
    EmptyGrid,
    #[error("delta grid must be sorted ascending")]
    UnsortedGrid,
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("schema mismatch between attack corpora")]
    SchemaMismatch,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Desk-scale model and schedule used for every model an adversary trains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackModelConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Records of the training corpus used for checkpoint selection.
    pub val_records: usize,
}

impl Default for AttackModelConfig {
    fn default() -> Self {
        Self { model: ModelConfig::default(), train: TrainConfig { selection: Selection::Last, ..TrainConfig::default() }, val_records: 50 }
    }
}

fn fit(corpus: &Corpus, cfg: &AttackModelConfig, seed: u64, task_mix: Option<f64>) -> Result<ModelParams<f32>, PrivacyError> {
    let val = corpus.select(&(0..cfg.val_records.min(corpus.len())).collect::<Vec<_>>());
    let train_cfg = TrainConfig { seed, task_mix: task_mix.unwrap_or(cfg.train.task_mix), ..cfg.train.clone() };
    Ok(train::<f32>(corpus, &val, &cfg.model, &train_cfg)?.model)
}

/// Shadow model: same architecture, trained only on next-visit prediction
/// over the synthetic corpus.
pub fn train_shadow(synthetic: &Corpus, cfg: &AttackModelConfig) -> Result<ModelParams<f32>, PrivacyError> {
    fit(synthetic, cfg, derive_seed(cfg.train.seed, "shadow"), Some(1.0))
}

/// `n` records of `corpus` drawn uniformly without replacement.
pub fn sample_subset(corpus: &Corpus, n: usize, seed: u64) -> Corpus {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    corpus.select(&idx)
}

/// Names of the columns produced by [`mi_features`], for a schema's modalities.
pub fn mi_feature_names(modalities: &[String]) -> Vec<String> {
    let mut out: Vec<String> = modalities.iter().flat_map(|m| [format!("log_lpl_{m}"), format!("log_mpl_{m}")]).collect();
    out.push("log_ppl".into());
    out.push("n_events".into());
    out
}

/// Log-perplexity features of one record under `model`. A modality the
/// record lacks contributes the log of its vocabulary size, the uniform value.
pub fn mi_features<M: ConditionalLm + ?Sized>(model: &M, record: &PatientRecord) -> Result<Vec<f64>, PrivacyError> {
    let vocab = model.vocab();
    let mut out = Vec::with_capacity(2 * vocab.k() + 2);
    for k in (0..vocab.k()).map(ModalityId) {
        if record.visits.iter().any(|v| v.has(k)) {
            out.push(lpl(model, record, k)?.ln());
            out.push(mpl(model, record, k)?.ln());
        } else {
            let uniform = (vocab.modality_size(k) as f64).ln();
            out.extend([uniform, uniform]);
        }
    }
    out.push(record_ppl(model, record)?.ln());
    out.push(record.num_events() as f64);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiDataset {
    pub ids: Vec<String>,
    pub features: Vec<Vec<f64>>,
    /// `true` for records of the in-set.
    pub labels: Vec<bool>,
}

fn features_of<M: ConditionalLm + ?Sized>(model: &M, corpus: &Corpus) -> Result<Vec<Vec<f64>>, PrivacyError> {
    corpus.records().par_iter().map(|r| mi_features(model, r)).collect()
}

/// Shadow-model features for `in_set` (label 1) followed by `out_set` (label 0).
pub fn build_mi_dataset<M: ConditionalLm + ?Sized>(shadow: &M, in_set: &Corpus, out_set: &Corpus) -> Result<MiDataset, PrivacyError> {
    if in_set.len() != out_set.len() {
        return Err(PrivacyError::SizeMismatch { left: in_set.len(), right: out_set.len() });
    }
    let mut features = features_of(shadow, in_set)?;
    features.extend(features_of(shadow, out_set)?);
    let ids = in_set.records().iter().chain(out_set.records()).map(|r| r.id.clone()).collect();
    let labels = (0..in_set.len() * 2).map(|i| i < in_set.len()).collect();
    Ok(MiDataset { ids, features, labels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MiClassifierConfig {
    fn default() -> Self {
        Self { hidden: 16, epochs: 300, learning_rate: 1e-2, seed: 0 }
    }
}

/// Three-layer feed-forward membership classifier on standardized features.
#[derive(Clone, Debug)]
pub struct MiClassifier {
    mean: Vec<f64>,
    std: Vec<f64>,
    params: ParamSet<f64>,
}

impl MiClassifier {
    fn standardized(&self, rows: &[Vec<f64>]) -> Matrix<f64> {
        let d = self.mean.len();
        let data = rows.iter().flat_map(|r| (0..d).map(move |j| (r[j] - self.mean[j]) / self.std[j])).collect();
        Matrix::from_vec(rows.len(), d, data)
    }

    fn logits(&self, g: &mut Graph<f64>, x: Matrix<f64>) -> crate::tensor::Var {
        let mut h = g.constant(x);
        let names = ["l1", "l2", "l3"];
        for (i, name) in names.iter().enumerate() {
            let w = g.param(self.params.find(&format!("{name}.w")).unwrap());
            let b = g.param(self.params.find(&format!("{name}.b")).unwrap());
            h = g.linear(h, w, b);
            if i + 1 < names.len() {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn train(data: &MiDataset, cfg: &MiClassifierConfig) -> Result<Self, PrivacyError> {
        if data.labels.iter().all(|&l| l) || data.labels.iter().all(|&l| !l) {
            return Err(PrivacyError::DegenerateLabels);
        }
        let d = data.features[0].len();
        let n = data.features.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| data.features.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..d)
            .map(|j| {
                let v = data.features.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-12 { v.sqrt() } else { 1.0 }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let h = cfg.hidden;
        for (name, rows, cols) in [("l1", d, h), ("l2", h, h), ("l3", h, 1)] {
            params.add_normal(format!("{name}.w"), rows, cols, (2.0 / rows as f64).sqrt(), &mut rng);
            params.add(format!("{name}.b"), Matrix::zeros(1, cols));
        }
        let mut clf = Self { mean, std, params };
        let x = clf.standardized(&data.features);
        let y = Matrix::from_vec(data.labels.len(), 1, data.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect());
        let mut opt = AdamW::new(&clf.params, AdamWConfig { clip_norm: None, ..AdamWConfig::default() });
        for _ in 0..cfg.epochs {
            let grads = {
                let mut g = Graph::new(&clf.params);
                let z = clf.logits(&mut g, x.clone());
                let loss = g.bce_with_logits(z, y.clone());
                let loss = g.scale(loss, 1.0 / n);
                g.backward(loss)
            };
            opt.update(&mut clf.params, &grads, cfg.learning_rate);
        }
        Ok(clf)
    }

    /// Membership probability per feature row.
    pub fn score(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        if rows.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new(&self.params);
        let z = self.logits(&mut g, self.standardized(rows));
        g.value(z).data().iter().map(|&z| crate::tensor::sigmoid(z)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipAttackResult {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    /// `true` for members (records of the generator's training set).
    pub labels: Vec<bool>,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub roc: Vec<(f64, f64)>,
    pub auc: f64,
}

impl MembershipAttackResult {
    pub fn from_scores(ids: Vec<String>, scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, PrivacyError> {
        let pos = labels.iter().filter(|&&l| l).count();
        let neg = labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(PrivacyError::DegenerateLabels);
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut roc = vec![(0.0, 0.0)];
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < order.len() {
            let s = scores[order[i]];
            while i < order.len() && scores[order[i]] == s {
                if labels[order[i]] {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            roc.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        }
        let auc = rank_auc(&scores, &labels);
        Ok(Self { ids, scores, labels, roc, auc })
    }

    /// Area under the ROC polyline.
    pub fn trapezoid_auc(&self) -> f64 {
        self.roc.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
    }

    pub fn roc_tsv(&self) -> String {
        let mut out = String::from("fpr\ttpr\n");
        for (f, t) in &self.roc {
            out.push_str(&format!("{f}\t{t}\n"));
        }
        out
    }
}

/// Trains the membership classifier on `dataset` and scores the members
/// (`members`, label 1) and non-members (`nonmembers`, label 0) through the
/// shadow model's features.
pub fn run_membership_attack<M: ConditionalLm + ?Sized>(
    shadow: &M,
    dataset: &MiDataset,
    members: &Corpus,
    nonmembers: &Corpus,
    cfg: &MiClassifierConfig,
) -> Result<MembershipAttackResult, PrivacyError> {
    let clf = MiClassifier::train(dataset, cfg)?;
    let mut rows = features_of(shadow, members)?;
    rows.extend(features_of(shadow, nonmembers)?);
    let ids = members.records().iter().chain(nonmembers.records()).map(|r| r.id.clone()).collect();
    let labels = (0..members.len() + nonmembers.len()).map(|i| i < members.len()).collect();
    MembershipAttackResult::from_scores(ids, clf.score(&rows), labels)
}

/// One (visit, modality) slot of an attacked record: the codes the adversary
/// sees, plus the candidates it must decide on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackCell {
    pub record: usize,
    pub visit: usize,
    pub modality: ModalityId,
    pub hidden: Vec<CodeId>,
    /// Codes absent from the slot, sampled to match `hidden` in number.
    pub decoys: Vec<CodeId>,
}

/// Hides `ceil(hide_fraction · l)` codes of every nonempty slot.
pub fn attack_cells(corpus: &Corpus, hide_fraction: f64, seed: u64) -> Vec<AttackCell> {
    let schema = corpus.schema();
    let mut cells = Vec::new();
    for (i, r) in corpus.records().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(seed, i as u64));
        for (t, v) in r.visits.iter().enumerate() {
            for (k, codes) in v.iter() {
                let n_hide = ((hide_fraction * codes.len() as f64).ceil() as usize).min(codes.len());
                if n_hide == 0 {
                    continue;
                }
                let hidden: Vec<CodeId> = codes.choose_multiple(&mut rng, n_hide).copied().collect();
                let absent: Vec<CodeId> = (0..schema.vocab_size(k) as u32).map(CodeId).filter(|c| !codes.contains(c)).collect();
                let decoys = absent.choose_multiple(&mut rng, n_hide.min(absent.len())).copied().collect();
                cells.push(AttackCell { record: i, visit: t, modality: k, hidden, decoys });
            }
        }
    }
    cells
}

/// The record as the adversary sees it for `cell`: later visits dropped,
/// hidden codes removed from the attacked visit.
fn masked_view(record: &PatientRecord, cell: &AttackCell) -> (Vec<Visit>, Visit) {
    let mut current = record.visits[cell.visit].clone();
    let kept: Vec<CodeId> = current.codes(cell.modality).iter().copied().filter(|c| !cell.hidden.contains(c)).collect();
    current.set(cell.modality, kept);
    (record.visits[..cell.visit].to_vec(), current)
}

/// Log-probability, renormalized over modality `k`, that each candidate is the
/// next code of the slot given the visible codes.
pub fn slot_logprobs<M: ConditionalLm + ?Sized>(model: &M, history: &[Visit], current: &Visit, k: ModalityId, baseline: &crate::records::BaselineFeatures, candidates: &[CodeId]) -> Result<Vec<f64>, PrivacyError> {
    let vocab = model.vocab();
    let layout = build_crossmodal_prompt(vocab, history, current, k).map_err(ModelError::from)?;
    let encoded = model.encode(layout.encoder.ids(), baseline)?;
    let mut decoder = layout.decoder_prefix.into_ids();
    for &code in current.codes(k) {
        decoder.push(vocab.code_token(EventCode { modality: k, code }).map_err(ModelError::from)?);
    }
    let row = model.last_logprobs(&encoded, &decoder)?;
    let range = vocab.code_range(k);
    let lse = log_sum_exp(row[range.start as usize..range.end as usize].iter().copied());
    candidates
        .iter()
        .map(|&code| {
            let t: TokenId = vocab.code_token(EventCode { modality: k, code }).map_err(ModelError::from)?;
            Ok(row[t as usize] - lse)
        })
        .collect()
}

/// `log P̂(v) − log P0(v)` for the hidden codes and for the decoys.
pub fn attribute_scores<A: ConditionalLm + ?Sized, P: ConditionalLm + ?Sized>(imputer: &A, prior: &P, targets: &Corpus, cells: &[AttackCell]) -> Result<(Vec<f64>, Vec<f64>), PrivacyError> {
    let per_cell: Vec<(Vec<f64>, Vec<f64>)> = cells
        .par_iter()
        .map(|cell| {
            let record = &targets.records()[cell.record];
            let (history, current) = masked_view(record, cell);
            let candidates: Vec<CodeId> = cell.hidden.iter().chain(&cell.decoys).copied().collect();
            let a = slot_logprobs(imputer, &history, &current, cell.modality, &record.baseline, &candidates)?;
            let p = slot_logprobs(prior, &history, &current, cell.modality, &record.baseline, &candidates)?;
            let scores: Vec<f64> = a.iter().zip(&p).map(|(a, p)| if a == p { 0.0 } else { a - p }).collect();
            let (pos, neg) = scores.split_at(cell.hidden.len());
            Ok((pos.to_vec(), neg.to_vec()))
        })
        .collect::<Result<_, PrivacyError>>()?;
    let pos = per_cell.iter().flat_map(|c| c.0.iter().copied()).collect();
    let neg = per_cell.iter().flat_map(|c| c.1.iter().copied()).collect();
    Ok((pos, neg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub delta: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Rates of the rule "present iff score ≥ δ" at each δ of an ascending grid.
pub fn evaluate_attribute_scores(positives: &[f64], negatives: &[f64], deltas: &[f64]) -> Result<Vec<RatePoint>, PrivacyError> {
    check_grid(deltas)?;
    let rate = |s: &[f64], d: f64| if s.is_empty() { 0.0 } else { s.iter().filter(|&&x| x >= d).count() as f64 / s.len() as f64 };
    Ok(deltas.iter().map(|&delta| RatePoint { delta, tpr: rate(positives, delta), fpr: rate(negatives, delta) }).collect())
}

fn check_grid(deltas: &[f64]) -> Result<(), PrivacyError> {
    if deltas.is_empty() {
        return Err(PrivacyError::EmptyGrid);
    }
    if deltas.iter().any(|d| d.is_nan()) || deltas.windows(2).any(|w| w[0] > w[1]) {
        return Err(PrivacyError::UnsortedGrid);
    }
    Ok(())
}

/// `-∞`, `lo, lo + step, …, hi`, `+∞`.
pub fn delta_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    let mut out = vec![f64::NEG_INFINITY];
    out.extend((0..=n).map(|i| lo + i as f64 * step));
    out.push(f64::INFINITY);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeAttackResult {
    pub deltas: Vec<f64>,
    /// Imputer trained on the synthetic corpus.
    pub treatment: Vec<RatePoint>,
    /// Imputer trained on the real held-out corpus.
    pub control: Vec<RatePoint>,
    pub n_hidden: usize,
    pub n_decoys: usize,
}

impl AttributeAttackResult {
    pub fn sweep_tsv(&self) -> String {
        let mut out = String::from("delta\ttreatment_tpr\ttreatment_fpr\tcontrol_tpr\tcontrol_fpr\n");
        for (t, c) in self.treatment.iter().zip(&self.control) {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", t.delta, t.tpr, t.fpr, c.tpr, c.fpr));
        }
        out
    }
}

/// Attack with already trained models: `targets` are the records whose
/// hidden codes the adversary tries to recover.
pub fn attribute_attack_with<A, C, P>(imputer: &A, control: &C, prior: &P, targets: &Corpus, deltas: &[f64], hide_fraction: f64, seed: u64) -> Result<AttributeAttackResult, PrivacyError>
where
    A: ConditionalLm + ?Sized,
    C: ConditionalLm + ?Sized,
    P: ConditionalLm + ?Sized,
{
    check_grid(deltas)?;
    if !(0.0..=1.0).contains(&hide_fraction) {
        return Err(PrivacyError::InvalidConfig(format!("hide_fraction {hide_fraction} outside [0, 1]")));
    }
    let cells = attack_cells(targets, hide_fraction, seed);
    let (tp, tn) = attribute_scores(imputer, prior, targets, &cells)?;
    let (cp, cn) = attribute_scores(control, prior, targets, &cells)?;
    Ok(AttributeAttackResult {
        deltas: deltas.to_vec(),
        treatment: evaluate_attribute_scores(&tp, &tn, deltas)?,
        control: evaluate_attribute_scores(&cp, &cn, deltas)?,
        n_hidden: tp.len(),
        n_decoys: tn.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeAttackConfig {
    pub models: AttackModelConfig,
    pub hide_fraction: f64,
    pub seed: u64,
}

impl Default for AttributeAttackConfig {
    fn default() -> Self {
        Self { models: AttackModelConfig::default(), hide_fraction: 0.2, seed: 0 }
    }
}

/// Trains the imputer on `synthetic`, the prior on `train_real` and the
/// control imputer on `test_real`, then attacks the records of `train_real`.
pub fn run_attribute_attack(synthetic: &Corpus, train_real: &Corpus, test_real: &Corpus, deltas: &[f64], cfg: &AttributeAttackConfig) -> Result<AttributeAttackResult, PrivacyError> {
    check_grid(deltas)?;
    let hash = synthetic.schema().hash();
    if train_real.schema().hash() != hash || test_real.schema().hash() != hash {
        return Err(PrivacyError::SchemaMismatch);
    }
    let imputer = fit(synthetic, &cfg.models, derive_seed(cfg.seed, "ai-imputer"), None)?;
    let prior = fit(train_real, &cfg.models, derive_seed(cfg.seed, "ai-prior"), None)?;
    let control = fit(test_real, &cfg.models, derive_seed(cfg.seed, "ai-control"), None)?;
    attribute_attack_with(&imputer, &control, &prior, train_real, deltas, cfg.hide_fraction, derive_seed(cfg.seed, "ai-cells"))
}

/// Scores drawn for a null membership test: both classes from one distribution.
pub fn null_scores<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (Vec<f64>, Vec<bool>) {
    (0..n).map(|i| (rng.random::<f64>(), i % 2 == 0)).unzip()
}
