//! Inference-time synthesis: next-visit and cross-modal imputation,
//! generation from scratch and record completion.
//!
//! Decoding is grammar-constrained: at every step the model distribution is
//! restricted to the tokens that keep the stream parseable, so generated
//! records never need repair.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{build_crossmodal_prompt, serialize_visits, GrammarError, TokenId, TokenKind, Vocabulary, BOS, EOS, VISIT_CLOSE, VISIT_OPEN};
use crate::model::{ConditionalLm, ModelError};
use crate::records::{BaselineFeatures, CodeId, Corpus, EventCode, ModalityId, PatientRecord, Visit};
use crate::rng::derive_indexed;
use crate::scalar::log_sum_exp;

/// Attempts to replace a duplicate code before the modality is closed.
pub const DUPLICATE_RETRIES: usize = 10;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("probabilities sum to {0}, expected 1")]
    NotADistribution(f64),
    #[error("filtering left no token with nonzero probability")]
    EmptySupport,
    #[error("completion policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopK,
    Nucleus,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub beam_width: usize,
    pub max_codes_per_modality: usize,
    pub max_visits: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { strategy: Strategy::TopK, temperature: 1.0, top_k: 20, top_p: 0.9, beam_width: 4, max_codes_per_modality: 20, max_visits: 20, seed: 0 }
    }
}

impl GenerationConfig {
    pub fn greedy() -> Self {
        Self { strategy: Strategy::Greedy, ..Self::default() }
    }

    /// Plain ancestral sampling (nucleus with p = 1, τ = 1).
    pub fn unfiltered() -> Self {
        Self { strategy: Strategy::Nucleus, top_p: 1.0, temperature: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        let bad = |m: &str| Err(GenerateError::InvalidConfig(m.into()));
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.beam_width == 0 {
            return bad("beam_width must be at least 1");
        }
        if self.max_codes_per_modality == 0 || self.max_visits == 0 {
            return bad("max_codes_per_modality and max_visits must be at least 1");
        }
        Ok(())
    }
}

fn check_distribution(dist: &[f64]) -> Result<f64, GenerateError> {
    let total: f64 = dist.iter().sum();
    if dist.is_empty() || dist.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(GenerateError::NotADistribution(total));
    }
    Ok(total)
}

fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best
}

fn tempered(dist: &[f64], tau: f64) -> Vec<f64> {
    if tau == 1.0 {
        return dist.to_vec();
    }
    let logs: Vec<f64> = dist.iter().map(|&p| if p > 0.0 { p.ln() / tau } else { f64::NEG_INFINITY }).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    logs.iter().map(|&l| (l - max).exp()).collect()
}

/// Indices by decreasing probability, lower index first on ties.
fn ranked(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    idx
}

/// The normalized distribution `sample_next` actually draws from.
pub fn filter_distribution(dist: &[f64], config: &GenerationConfig) -> Result<Vec<f64>, GenerateError> {
    check_distribution(dist)?;
    let mut out = vec![0.0; dist.len()];
    match config.strategy {
        Strategy::Greedy | Strategy::Beam => {
            out[argmax(dist)] = 1.0;
            return Ok(out);
        }
        Strategy::TopK => {
            let p = tempered(dist, config.temperature);
            for i in ranked(&p).into_iter().take(config.top_k) {
                out[i] = p[i];
            }
        }
        Strategy::Nucleus => {
            let p = tempered(dist, config.temperature);
            if config.top_p >= 1.0 {
                out = p;
            } else {
                let target = config.top_p * p.iter().sum::<f64>();
                let mut cum = 0.0;
                for i in ranked(&p) {
                    if cum >= target || p[i] == 0.0 {
                        break;
                    }
                    out[i] = p[i];
                    cum += p[i];
                }
            }
        }
    }
    let total: f64 = out.iter().sum();
    if !(total > 0.0) {
        return Err(GenerateError::EmptySupport);
    }
    out.iter_mut().for_each(|x| *x /= total);
    Ok(out)
}

/// Draws one index from `dist` under the configured strategy.
pub fn sample_next<R: Rng + ?Sized>(dist: &[f64], config: &GenerationConfig, rng: &mut R) -> Result<usize, GenerateError> {
    let filtered = filter_distribution(dist, config)?;
    let support: Vec<usize> = (0..filtered.len()).filter(|&i| filtered[i] > 0.0).collect();
    match support.as_slice() {
        [] => Err(GenerateError::EmptySupport),
        [only] => Ok(*only),
        _ => {
            let u = rng.random::<f64>();
            let mut cum = 0.0;
            for &i in &support {
                cum += filtered[i];
                if u < cum {
                    return Ok(i);
                }
            }
            Ok(*support.last().unwrap())
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct SlotState {
    blocks: Vec<(ModalityId, Vec<CodeId>)>,
    current: Option<(ModalityId, Vec<CodeId>)>,
    visit_closed: bool,
    /// Set once the token after `</v>` is chosen: `true` for `</s>`.
    ends_record: Option<bool>,
    truncated: bool,
}

impl SlotState {
    fn in_modality(k: ModalityId, prefix: Vec<CodeId>) -> Self {
        Self { current: Some((k, prefix)), ..Self::default() }
    }

    fn used(&self, k: ModalityId) -> bool {
        self.blocks.iter().any(|(m, _)| *m == k) || self.current.as_ref().is_some_and(|(m, _)| *m == k)
    }

    fn legal(&self, vocab: &Vocabulary, max_codes: usize) -> Vec<TokenId> {
        if self.visit_closed {
            return vec![VISIT_OPEN, EOS];
        }
        match &self.current {
            Some((k, codes)) if codes.len() >= max_codes => vec![vocab.close(*k)],
            Some((k, codes)) => {
                let mut out: Vec<TokenId> = vocab.code_range(*k).collect();
                if !codes.is_empty() {
                    out.push(vocab.close(*k));
                }
                out
            }
            None => {
                let mut out: Vec<TokenId> = (0..vocab.k()).map(ModalityId).filter(|&k| !self.used(k)).map(|k| vocab.open(k)).collect();
                if !self.blocks.is_empty() {
                    out.push(VISIT_CLOSE);
                }
                out
            }
        }
    }

    fn is_duplicate(&self, vocab: &Vocabulary, token: TokenId) -> bool {
        match (vocab.kind(token), &self.current) {
            (Some(TokenKind::Code(e)), Some((_, codes))) => codes.contains(&e.code),
            _ => false,
        }
    }

    /// Token to emit instead of a duplicate code: the modality close.
    fn close_token(&self, vocab: &Vocabulary) -> Option<TokenId> {
        self.current.as_ref().filter(|(_, c)| !c.is_empty()).map(|(k, _)| vocab.close(*k))
    }

    fn push(&mut self, vocab: &Vocabulary, token: TokenId, max_codes: usize) {
        match vocab.kind(token) {
            Some(TokenKind::ModalityOpen(k)) => self.current = Some((k, Vec::new())),
            Some(TokenKind::Code(e)) => {
                let (_, codes) = self.current.as_mut().expect("code outside a modality block");
                codes.push(e.code);
                if codes.len() >= max_codes {
                    self.truncated = true;
                }
            }
            Some(TokenKind::ModalityClose(_)) => {
                let block = self.current.take().expect("close without open");
                self.blocks.push(block);
            }
            Some(TokenKind::VisitClose) => self.visit_closed = true,
            Some(TokenKind::VisitOpen) => self.ends_record = Some(false),
            Some(TokenKind::Eos) => self.ends_record = Some(true),
            _ => unreachable!("illegal token {token} reached the decoder state"),
        }
    }

    fn visit(&self) -> Visit {
        let mut v = Visit::new();
        for (k, codes) in &self.blocks {
            v.set(*k, codes.clone());
        }
        v
    }
}

/// Model distribution renormalized over `legal` (zero elsewhere).
fn constrained<M: ConditionalLm + ?Sized>(model: &M, encoded: &M::Encoded, decoder: &[TokenId], legal: &[TokenId]) -> Result<Vec<f64>, GenerateError> {
    let row = model.last_logprobs(encoded, decoder)?;
    let lse = log_sum_exp(legal.iter().map(|&t| row[t as usize]));
    let mut dist = vec![0.0; row.len()];
    if lse.is_finite() {
        for &t in legal {
            dist[t as usize] = (row[t as usize] - lse).exp();
        }
        let total: f64 = dist.iter().sum();
        dist.iter_mut().for_each(|x| *x /= total);
    } else {
        // Every legal token has zero model probability; fall back to uniform.
        for &t in legal {
            dist[t as usize] = 1.0 / legal.len() as f64;
        }
    }
    Ok(dist)
}

fn decode_sampled<M: ConditionalLm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    encoded: &M::Encoded,
    decoder: &mut Vec<TokenId>,
    state: &mut SlotState,
    config: &GenerationConfig,
    rng: &mut R,
    done: fn(&SlotState) -> bool,
) -> Result<(), GenerateError> {
    let vocab = model.vocab();
    let greedy = matches!(config.strategy, Strategy::Greedy | Strategy::Beam);
    while !done(state) {
        let legal = state.legal(vocab, config.max_codes_per_modality);
        let dist = constrained(model, encoded, decoder, &legal)?;
        let mut token = sample_next(&dist, config, rng)? as TokenId;
        if state.is_duplicate(vocab, token) {
            let mut retries = if greedy { 0 } else { DUPLICATE_RETRIES };
            while retries > 0 && state.is_duplicate(vocab, token) {
                token = sample_next(&dist, config, rng)? as TokenId;
                retries -= 1;
            }
            if state.is_duplicate(vocab, token) {
                token = state.close_token(vocab).expect("duplicate implies a nonempty block");
            }
        }
        decoder.push(token);
        state.push(vocab, token, config.max_codes_per_modality);
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct Beam {
    decoder: Vec<TokenId>,
    state: SlotState,
    score: f64,
}

/// Finished beams, best first. A duplicate code expands to the modality close
/// with the duplicate's score, so width 1 reproduces greedy decoding.
fn beam_search<M: ConditionalLm + ?Sized>(
    model: &M,
    encoded: &M::Encoded,
    decoder: Vec<TokenId>,
    state: SlotState,
    config: &GenerationConfig,
    done: fn(&SlotState) -> bool,
) -> Result<Vec<Beam>, GenerateError> {
    let vocab = model.vocab();
    let width = config.beam_width;
    let mut live = vec![Beam { decoder, state, score: 0.0 }];
    let mut finished: Vec<Beam> = Vec::new();
    while !live.is_empty() && finished.len() < width {
        let mut pool: Vec<(f64, TokenId, usize, TokenId)> = Vec::new();
        for (b, beam) in live.iter().enumerate() {
            let legal = beam.state.legal(vocab, config.max_codes_per_modality);
            let dist = constrained(model, encoded, &beam.decoder, &legal)?;
            let mut seen = BTreeSet::new();
            let mut cands: Vec<(f64, TokenId)> = legal.iter().map(|&t| (beam.score + dist[t as usize].ln(), t)).collect();
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (score, t) in cands {
                let emitted = if beam.state.is_duplicate(vocab, t) { beam.state.close_token(vocab).unwrap() } else { t };
                if seen.insert(emitted) {
                    pool.push((score, t, b, emitted));
                }
            }
        }
        pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
        let mut next = Vec::new();
        for (score, _, b, emitted) in pool.into_iter().take(width - finished.len()) {
            let mut beam = Beam { decoder: live[b].decoder.clone(), state: live[b].state.clone(), score };
            beam.decoder.push(emitted);
            beam.state.push(vocab, emitted, config.max_codes_per_modality);
            if done(&beam.state) {
                finished.push(beam);
            } else {
                next.push(beam);
            }
        }
        live = next;
    }
    finished.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(finished)
}

fn decode<M: ConditionalLm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    encoded: &M::Encoded,
    decoder: Vec<TokenId>,
    state: SlotState,
    config: &GenerationConfig,
    rng: &mut R,
    done: fn(&SlotState) -> bool,
) -> Result<SlotState, GenerateError> {
    config.validate()?;
    if config.strategy == Strategy::Beam {
        let beams = beam_search(model, encoded, decoder, state, config, done)?;
        return Ok(beams.into_iter().next().expect("beam search always finishes a beam").state);
    }
    let (mut decoder, mut state) = (decoder, state);
    decode_sampled(model, encoded, &mut decoder, &mut state, config, rng, done)?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputedVisit {
    pub visit: Visit,
    /// A modality hit `max_codes_per_modality` and was closed by force.
    pub truncated: bool,
}

fn visit_done(s: &SlotState) -> bool {
    s.visit_closed
}

fn record_step_done(s: &SlotState) -> bool {
    s.ends_record.is_some()
}

fn modality_done(s: &SlotState) -> bool {
    s.current.is_none()
}

fn warn_truncated(what: &str) {
    log::warn!("{what} reached max_codes_per_modality and was truncated");
}

/// Decodes the visit following `history` from the longitudinal prompt.
pub fn impute_next_visit<M: ConditionalLm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    history: &[Visit],
    baseline: &BaselineFeatures,
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<ImputedVisit, GenerateError> {
    let encoder = serialize_visits(model.vocab(), history)?;
    let encoded = model.encode(encoder.ids(), baseline)?;
    let state = decode(model, &encoded, vec![BOS, VISIT_OPEN], SlotState::default(), config, rng, visit_done)?;
    if state.truncated {
        warn_truncated("imputed visit");
    }
    Ok(ImputedVisit { visit: state.visit(), truncated: state.truncated })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputedCodes {
    /// Newly decoded codes, excluding those of `current` that were kept.
    pub codes: Vec<CodeId>,
    pub truncated: bool,
}

/// Decodes the codes of modality `k` for `current` from the cloze prompt.
/// Codes `current` already holds for `k` are forced as the start of the
/// answer, so only the remainder is imputed.
pub fn impute_modality<M: ConditionalLm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    history: &[Visit],
    current: &Visit,
    k: ModalityId,
    baseline: &BaselineFeatures,
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<ImputedCodes, GenerateError> {
    let vocab = model.vocab();
    let layout = build_crossmodal_prompt(vocab, history, current, k)?;
    let encoded = model.encode(layout.encoder.ids(), baseline)?;
    let kept = current.codes(k).to_vec();
    let mut decoder = layout.decoder_prefix.into_ids();
    for &code in &kept {
        decoder.push(vocab.code_token(EventCode { modality: k, code })?);
    }
    let cap = config.max_codes_per_modality.max(kept.len() + 1);
    let config = GenerationConfig { max_codes_per_modality: cap, ..config.clone() };
    let state = decode(model, &encoded, decoder, SlotState::in_modality(k, kept.clone()), &config, rng, modality_done)?;
    let (_, codes) = state.blocks.into_iter().next().expect("modality block closed");
    if state.truncated {
        warn_truncated("imputed modality");
    }
    Ok(ImputedCodes { codes: codes[kept.len()..].to_vec(), truncated: state.truncated })
}

/// Distinct code sets reachable by beam search for the next visit, best first.
pub fn beam_candidates<M: ConditionalLm + ?Sized>(model: &M, history: &[Visit], baseline: &BaselineFeatures, config: &GenerationConfig) -> Result<Vec<(Visit, f64)>, GenerateError> {
    config.validate()?;
    let encoder = serialize_visits(model.vocab(), history)?;
    let encoded = model.encode(encoder.ids(), baseline)?;
    let beams = beam_search(model, &encoded, vec![BOS, VISIT_OPEN], SlotState::default(), config, visit_done)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for beam in beams {
        let visit = beam.state.visit();
        let key: Vec<(ModalityId, Vec<CodeId>)> = visit
            .iter()
            .map(|(k, c)| {
                let mut c = c.to_vec();
                c.sort_unstable();
                (k, c)
            })
            .collect();
        if seen.insert(key) {
            out.push((visit, beam.score));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedRecord {
    pub record: PatientRecord,
    /// Some modality was force-closed, or `max_visits` cut the record short.
    pub truncated: bool,
}

/// Generates a record from scratch by repeated next-visit imputation until
/// the model emits `</s>` or `max_visits` is reached.
pub fn generate_record<M: ConditionalLm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    id: String,
    baseline: &BaselineFeatures,
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<GeneratedRecord, GenerateError> {
    let vocab = model.vocab();
    let mut visits: Vec<Visit> = Vec::new();
    let mut truncated = false;
    loop {
        let encoder = serialize_visits(vocab, &visits)?;
        let encoded = model.encode(encoder.ids(), baseline)?;
        let state = decode(model, &encoded, vec![BOS, VISIT_OPEN], SlotState::default(), config, rng, record_step_done)?;
        truncated |= state.truncated;
        visits.push(state.visit());
        if state.ends_record == Some(true) {
            break;
        }
        if visits.len() >= config.max_visits {
            truncated = true;
            break;
        }
    }
    Ok(GeneratedRecord { record: PatientRecord { id, baseline: baseline.clone(), visits }, truncated })
}

/// Baselines drawn uniformly with replacement from `source`.
pub fn sample_baselines<R: Rng + ?Sized>(source: &Corpus, n: usize, rng: &mut R) -> Vec<BaselineFeatures> {
    let records = source.records();
    (0..n).map(|_| records[rng.random_range(0..records.len())].baseline.clone()).collect()
}

/// Generates one record per baseline in parallel. Record `i` is named
/// `{prefix}{i}` and uses its own RNG stream derived from `config.seed`.
pub fn generate_cohort<M: ConditionalLm + ?Sized>(model: &M, baselines: &[BaselineFeatures], prefix: &str, config: &GenerationConfig) -> Result<Vec<GeneratedRecord>, GenerateError> {
    config.validate()?;
    baselines
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(config.seed, i as u64));
            generate_record(model, format!("{prefix}{i}"), b, config, &mut rng)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionAction {
    KeepAll,
    RemoveAll,
    /// Remove `round(fraction · l)` codes at random, always keeping one.
    RemoveRandom(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAction {
    pub visit: usize,
    pub modality: ModalityId,
    pub action: CompletionAction,
}

/// What to do with each (visit, modality) cell of a record being completed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionPolicy {
    pub default: CompletionAction,
    #[serde(default)]
    pub cells: Vec<CellAction>,
}

impl CompletionPolicy {
    pub fn uniform(action: CompletionAction) -> Self {
        Self { default: action, cells: Vec::new() }
    }

    pub fn keep_all() -> Self {
        Self::uniform(CompletionAction::KeepAll)
    }

    pub fn action(&self, visit: usize, modality: ModalityId) -> CompletionAction {
        self.cells.iter().rev().find(|c| c.visit == visit && c.modality == modality).map_or(self.default, |c| c.action)
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        for a in std::iter::once(&self.default).chain(self.cells.iter().map(|c| &c.action)) {
            if let CompletionAction::RemoveRandom(f) = a {
                if !(0.0..=1.0).contains(f) {
                    return Err(GenerateError::InvalidPolicy(format!("fraction {f} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImputedEvent {
    pub visit: usize,
    pub modality: ModalityId,
    pub code: CodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub record: PatientRecord,
    /// Events produced by the model rather than copied from the input.
    pub imputed: Vec<ImputedEvent>,
    pub truncated: bool,
}

/// Scans `real` in time order, removing events per `policy` and re-imputing
/// each emptied or thinned slot from the kept events and the already
/// completed visits.
pub fn complete_record<M: ConditionalLm + ?Sized, R: Rng + ?Sized>(
    model: &M,
    real: &PatientRecord,
    policy: &CompletionPolicy,
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<Completion, GenerateError> {
    policy.validate()?;
    let mut done: Vec<Visit> = Vec::with_capacity(real.visits.len());
    let mut imputed = Vec::new();
    let mut truncated = false;
    for (t, original) in real.visits.iter().enumerate() {
        let mut visit = original.clone();
        let present: Vec<ModalityId> = original.modalities().collect();
        for k in present {
            let codes = original.codes(k);
            let kept: Vec<CodeId> = match policy.action(t, k) {
                CompletionAction::KeepAll => continue,
                CompletionAction::RemoveAll => Vec::new(),
                CompletionAction::RemoveRandom(f) => {
                    let remove = ((f * codes.len() as f64).round() as usize).min(codes.len() - 1);
                    if remove == 0 {
                        continue;
                    }
                    let mut drop: Vec<usize> = (0..codes.len()).collect();
                    drop.shuffle(rng);
                    drop.truncate(remove);
                    codes.iter().enumerate().filter(|(i, _)| !drop.contains(i)).map(|(_, &c)| c).collect()
                }
            };
            visit.set(k, kept.clone());
            let out = impute_modality(model, &done, &visit, k, &real.baseline, config, rng)?;
            truncated |= out.truncated;
            imputed.extend(out.codes.iter().map(|&code| ImputedEvent { visit: t, modality: k, code }));
            visit.set(k, kept.into_iter().chain(out.codes).collect());
        }
        done.push(visit);
    }
    Ok(Completion { record: PatientRecord { id: real.id.clone(), baseline: real.baseline.clone(), visits: done }, imputed, truncated })
}
