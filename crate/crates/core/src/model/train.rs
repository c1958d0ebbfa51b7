use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams, NumericNorm};
use crate::corruption::{corrupt, CorruptionConfig};
use crate::grammar::{
    build_crossmodal_prompt, cloze_answer, longitudinal_answer, serialize_visits, TokenId, Vocabulary, BOS, EOS, VISIT_CLOSE, VISIT_OPEN,
};
use crate::records::{Corpus, ModalityId, PatientRecord, Visit};
use crate::rng::{derive_indexed, derive_seed};
use crate::scalar::Scalar;
use crate::tensor::{AdamW, AdamWConfig, Gradients, Graph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Predict visit `t` from visits `..t`.
    Longitudinal,
    /// Predict modality `k` of visit `t` from the rest of the visit and its history.
    CrossModal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep the epoch with the lowest validation perplexity.
    ValPerplexity,
    /// Keep the final parameters.
    Last,
}

/// Learning rate after warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Linear from `learning_rate` down to zero at the final step.
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_decay: LrDecay,
    /// Defaults to one pass over the training records per epoch.
    pub steps_per_epoch: Option<usize>,
    pub corruption: CorruptionConfig,
    pub seed: u64,
    /// Probability of drawing a longitudinal example; the rest are cross-modal.
    pub task_mix: f64,
    pub clip_norm: Option<f64>,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 10,
            warmup_epochs: 1,
            lr_decay: LrDecay::Linear,
            steps_per_epoch: None,
            corruption: CorruptionConfig::default(),
            seed: 0,
            task_mix: 0.5,
            clip_norm: Some(1.0),
            selection: Selection::ValPerplexity,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay = {} must be non-negative", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == Some(0) {
            return bad("batch_size, epochs and steps_per_epoch must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.task_mix) {
            return bad(format!("task_mix = {} is outside [0, 1]", self.task_mix));
        }
        self.corruption.validate().map_err(|e| ModelError::InvalidConfig(e.to_string()))
    }
}

fn learning_rate_at(config: &TrainConfig, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return config.learning_rate * (step + 1) as f64 / warmup as f64;
    }
    match config.lr_decay {
        LrDecay::Constant => config.learning_rate,
        LrDecay::Linear => config.learning_rate * (total - step) as f64 / (total - warmup) as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_ppl: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: ModelParams<T>,
    pub log: Vec<EpochLog>,
    /// Mean per-token training NLL of every optimizer step.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// One teacher-forced example: `targets[i]` is the token that should follow
/// `decoder[..=i]`, or `None` outside the answer slot.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub task: Task,
    pub encoder: Vec<TokenId>,
    pub decoder: Vec<TokenId>,
    pub targets: Vec<Option<usize>>,
}

impl TrainingExample {
    pub fn answer_len(&self) -> usize {
        self.targets.iter().flatten().count()
    }

    fn new(task: Task, encoder: Vec<TokenId>, prefix: &[TokenId], answer: &[TokenId]) -> Self {
        let mut decoder = prefix.to_vec();
        decoder.extend_from_slice(&answer[..answer.len() - 1]);
        let mut targets = vec![None; prefix.len() - 1];
        targets.extend(answer.iter().map(|&t| Some(t as usize)));
        Self { task, encoder, decoder, targets }
    }
}

/// Permutes modality blocks and/or codes of a target visit, mirroring the
/// encoder-side shuffles so the decoder does not learn a fixed order.
fn shuffled_visit_body(vocab: &Vocabulary, visit: &Visit, cfg: &CorruptionConfig, rng: &mut impl Rng) -> Result<Vec<TokenId>, ModelError> {
    let mut blocks: Vec<(ModalityId, Vec<crate::records::CodeId>)> = visit.iter().filter(|(_, c)| !c.is_empty()).map(|(k, c)| (k, c.to_vec())).collect();
    if cfg.enable_modality_permute {
        blocks.shuffle(rng);
    }
    let mut out = Vec::new();
    for (k, mut codes) in blocks {
        if cfg.enable_span_shuffle {
            codes.shuffle(rng);
        }
        out.push(vocab.open(k));
        let answer = cloze_answer(vocab, &codes, k)?;
        out.extend(answer);
    }
    Ok(out)
}

/// Builds one (possibly corrupted) training example for `record` at visit `t`.
/// `k` is required for [`Task::CrossModal`].
pub fn build_example(
    vocab: &Vocabulary,
    record: &PatientRecord,
    task: Task,
    t: usize,
    k: Option<ModalityId>,
    cfg: &CorruptionConfig,
    rng: &mut impl Rng,
) -> Result<TrainingExample, ModelError> {
    let visits = &record.visits;
    match task {
        Task::Longitudinal => {
            let encoder = serialize_visits(vocab, &visits[..t])?;
            let encoder = corrupt(vocab, &encoder, cfg, rng).into_ids();
            let mut answer = shuffled_visit_body(vocab, &visits[t], cfg, rng)?;
            answer.push(VISIT_CLOSE);
            answer.push(if t + 1 < visits.len() { VISIT_OPEN } else { EOS });
            Ok(TrainingExample::new(task, encoder, &[BOS, VISIT_OPEN], &answer))
        }
        Task::CrossModal => {
            let k = k.ok_or_else(|| ModelError::InvalidConfig("cross-modal example needs a modality".into()))?;
            let layout = build_crossmodal_prompt(vocab, &visits[..t], &visits[t], k)?;
            let encoder = corrupt(vocab, &layout.encoder, cfg, rng).into_ids();
            let mut codes = visits[t].codes(k).to_vec();
            if cfg.enable_span_shuffle {
                codes.shuffle(rng);
            }
            let answer = cloze_answer(vocab, &codes, k)?;
            Ok(TrainingExample::new(task, encoder, layout.decoder_prefix.ids(), &answer))
        }
    }
}

/// Uncorrupted examples for every visit (longitudinal) and every present
/// modality of every visit (cross-modal) of `record`, in canonical order.
fn evaluation_examples(vocab: &Vocabulary, record: &PatientRecord) -> Result<Vec<TrainingExample>, ModelError> {
    let mut out = Vec::new();
    for t in 0..record.visits.len() {
        let encoder = serialize_visits(vocab, &record.visits[..t])?.into_ids();
        let answer = longitudinal_answer(vocab, &record.visits[t], t + 1 < record.visits.len())?;
        out.push(TrainingExample::new(Task::Longitudinal, encoder, &[BOS, VISIT_OPEN], &answer));
        for k in record.visits[t].modalities() {
            let layout = build_crossmodal_prompt(vocab, &record.visits[..t], &record.visits[t], k)?;
            let answer = cloze_answer(vocab, record.visits[t].codes(k), k)?;
            out.push(TrainingExample::new(Task::CrossModal, layout.encoder.into_ids(), layout.decoder_prefix.ids(), &answer));
        }
    }
    Ok(out)
}

fn example_nll<T: Scalar>(model: &ModelParams<T>, ex: &TrainingExample, record: &PatientRecord) -> Result<f64, ModelError> {
    let encoded = model.encode_input(&ex.encoder, &record.baseline)?;
    let lp = model.decode_logprobs(&encoded, &ex.decoder)?;
    Ok(ex.targets.iter().enumerate().filter_map(|(i, t)| t.map(|t| -lp[(i, t)].as_f64())).sum())
}

/// Token-level perplexity of `corpus` over all longitudinal and cross-modal
/// answer slots, without corruption. `None` for an empty corpus.
pub fn validation_perplexity<T: Scalar>(model: &ModelParams<T>, corpus: &Corpus) -> Result<Option<f64>, ModelError> {
    if corpus.is_empty() {
        return Ok(None);
    }
    let vocab = model.vocab();
    let per_record: Vec<(f64, usize)> = corpus
        .records()
        .par_iter()
        .map(|r| {
            let mut nll = 0.0;
            let mut n = 0;
            for ex in evaluation_examples(vocab, r)? {
                nll += example_nll(model, &ex, r)?;
                n += ex.answer_len();
            }
            Ok((nll, n))
        })
        .collect::<Result<_, ModelError>>()?;
    let (nll, n) = per_record.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    Ok(Some((nll / n as f64).exp()))
}

struct Draw {
    record: usize,
    task: Task,
    t: usize,
    k: Option<ModalityId>,
    seed: u64,
}

fn draw_batch(corpus: &Corpus, cfg: &TrainConfig, step: usize) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(derive_seed(cfg.seed, "train-batches"), step as u64));
    (0..cfg.batch_size)
        .map(|_| {
            let record = rng.random_range(0..corpus.len());
            let visits = &corpus.records()[record].visits;
            let t = rng.random_range(0..visits.len());
            let present: Vec<ModalityId> = visits[t].modalities().collect();
            let longitudinal = present.is_empty() || rng.random_bool(cfg.task_mix);
            let (task, k) = if longitudinal { (Task::Longitudinal, None) } else { (Task::CrossModal, Some(present[rng.random_range(0..present.len())])) };
            Draw { record, task, t, k, seed: rng.random() }
        })
        .collect()
}

/// Trains a freshly initialized model; the initialization seed derives from `config.seed`.
pub fn train<T: Scalar>(train_set: &Corpus, val: &Corpus, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome<T>, ModelError> {
    let model = ModelParams::new(model_config.clone(), train_set.schema_arc().clone(), NumericNorm::from_corpus(train_set), derive_seed(config.seed, "init"))?;
    train_from(model, train_set, val, config)
}

/// Continues training `model`. Batches are assembled in parallel but reduced
/// in a fixed order, so results are identical for a fixed seed.
pub fn train_from<T: Scalar>(mut model: ModelParams<T>, train_set: &Corpus, val: &Corpus, config: &TrainConfig) -> Result<TrainOutcome<T>, ModelError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let hash = model.schema_hash();
    for c in [train_set, val] {
        if c.schema().hash() != hash {
            return Err(ModelError::SchemaMismatch { model: hash, data: c.schema().hash() });
        }
    }
    let steps_per_epoch = config.steps_per_epoch.unwrap_or_else(|| train_set.len().div_ceil(config.batch_size));
    let warmup = config.warmup_epochs * steps_per_epoch;
    let total_steps = config.epochs * steps_per_epoch;
    let mut opt = AdamW::new(model.params(), AdamWConfig { weight_decay: config.weight_decay, clip_norm: config.clip_norm, ..AdamWConfig::default() });
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, crate::tensor::ParamSet<T>)> = None;
    let vocab = model.vocab().clone();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        let mut lr = config.learning_rate;
        for _ in 0..steps_per_epoch {
            lr = learning_rate_at(config, step, warmup, total_steps);
            let draws = draw_batch(train_set, config, step);
            let results: Vec<(Gradients<T>, f64, usize)> = draws
                .par_iter()
                .map(|d| {
                    let record = &train_set.records()[d.record];
                    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
                    let ex = build_example(&vocab, record, d.task, d.t, d.k, &config.corruption, &mut rng)?;
                    let mut g = Graph::new(model.params());
                    let loss = model.g_loss(&mut g, &ex.encoder, &ex.decoder, &ex.targets, &record.baseline)?;
                    let nll = g.value(loss)[(0, 0)].as_f64();
                    Ok((g.backward(loss), nll, ex.answer_len()))
                })
                .collect::<Result<_, ModelError>>()?;
            let tokens: usize = results.iter().map(|r| r.2).sum();
            let nll: f64 = results.iter().map(|r| r.1).sum();
            let loss = nll / tokens as f64;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { step, detail: format!("batch NLL {nll} over {tokens} tokens") });
            }
            let mut grads = Gradients::empty(model.params().len());
            for (g, _, _) in &results {
                grads.merge(g);
            }
            grads.scale(T::one() / T::of(tokens as f64));
            opt.update(model.params_mut(), &grads, lr);
            if !model.params().all_finite() {
                return Err(ModelError::NonFiniteLoss { step, detail: "parameters became non-finite after the update".into() });
            }
            step_losses.push(loss);
            epoch_loss += loss;
            step += 1;
        }
        let val_ppl = validation_perplexity(&model, val)?;
        let entry = EpochLog { epoch, step, train_loss: epoch_loss / steps_per_epoch as f64, val_ppl, lr };
        log::info!("epoch {epoch}: train_loss {:.4} val_ppl {:?}", entry.train_loss, entry.val_ppl);
        log.push(entry);
        if config.selection == Selection::ValPerplexity {
            if let Some(ppl) = val_ppl {
                if best.as_ref().is_none_or(|(b, _, _)| ppl < *b) {
                    best = Some((ppl, epoch, model.params().clone()));
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            *model.params_mut() = params;
            epoch
        }
        None => config.epochs,
    };
    Ok(TrainOutcome { model, log, step_losses, best_epoch })
}
