//! Downstream utility: a recurrent next-visit diagnosis predictor trained on
//! real, synthetic or mixed corpora and scored by recall@k on real test data.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::{generate_cohort, sample_baselines, GenerateError, GenerationConfig};
use crate::model::ConditionalLm;
use crate::records::{Corpus, ModalityId, PatientRecord, RecordsError, Schema, Visit};
use crate::rng::{derive_indexed, derive_seed, rng_for};
use crate::scalar::Scalar;
use crate::stats::{bootstrap_half_width, mean};
use crate::tensor::{AdamW, AdamWConfig, Gradients, Graph, Matrix, ParamSet, Var};

#[derive(Debug, Error)]
pub enum UtilityError {
    #[error("no patient has two or more visits to learn transitions from")]
    InsufficientHistory,
    #[error("invalid utility config: {0}")]
    InvalidConfig(String),
    #[error("{0} test records leaked into arm {1}")]
    TestLeak(usize, String),
    #[error("non-finite predictor loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Records(#[from] RecordsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub embedding: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Modality whose next-visit codes are predicted.
    pub target: ModalityId,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { embedding: 32, hidden: 64, epochs: 20, batch_size: 32, learning_rate: 1e-2, target: ModalityId(0), seed: 0 }
    }
}

impl PredictorConfig {
    pub fn validate(&self, schema: &Schema) -> Result<(), UtilityError> {
        if self.embedding == 0 || self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(UtilityError::InvalidConfig("embedding, hidden, epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(UtilityError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.target.0 >= schema.k() {
            return Err(UtilityError::InvalidConfig(format!("target modality {} outside schema", self.target.0)));
        }
        Ok(())
    }
}

/// Scores every code of the target modality for the visit after `history`.
pub trait NextVisitScorer: Sync {
    fn scores(&self, history: &[Visit]) -> Vec<f64>;
}

/// LSTM over multi-hot visit embeddings with a sigmoid output per target code.
#[derive(Clone, Debug)]
pub struct Predictor<T> {
    params: ParamSet<T>,
    /// First global input index of each modality.
    offsets: Vec<usize>,
    target: ModalityId,
    hidden: usize,
}

#[derive(Clone, Debug)]
pub struct TrainedPredictor<T> {
    pub predictor: Predictor<T>,
    /// Mean per-transition loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl<T: Scalar> Predictor<T> {
    fn new(schema: &Schema, cfg: &PredictorConfig) -> Self {
        let mut offsets = Vec::with_capacity(schema.k());
        let mut total = 0;
        for k in schema.modality_ids() {
            offsets.push(total);
            total += schema.vocab_size(k);
        }
        let (e, h) = (cfg.embedding, cfg.hidden);
        let out = schema.vocab_size(cfg.target);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "predictor-init"));
        let mut params = ParamSet::new();
        params.add_normal("emb", total, e, 1.0 / (e as f64).sqrt(), &mut rng);
        params.add_normal("w_x", e, 4 * h, 1.0 / (e as f64).sqrt(), &mut rng);
        params.add_normal("w_h", h, 4 * h, 1.0 / (h as f64).sqrt(), &mut rng);
        // Forget-gate bias starts at 1.
        let mut b = Matrix::zeros(1, 4 * h);
        for j in h..2 * h {
            b[(0, j)] = T::one();
        }
        params.add("b", b);
        params.add_normal("w_out", h, out, 1.0 / (h as f64).sqrt(), &mut rng);
        params.add("b_out", Matrix::zeros(1, out));
        Self { params, offsets, target: cfg.target, hidden: h }
    }

    fn p(&self, g: &mut Graph<T>, name: &str) -> Var {
        g.param(self.params.find(name).expect("predictor parameter"))
    }

    /// Hidden state after each visit.
    fn g_states(&self, g: &mut Graph<T>, visits: &[Visit]) -> Vec<Var> {
        let h = self.hidden;
        let (emb, w_x, w_h, b) = (self.p(g, "emb"), self.p(g, "w_x"), self.p(g, "w_h"), self.p(g, "b"));
        let mut state = g.constant(Matrix::zeros(1, h));
        let mut cell = g.constant(Matrix::zeros(1, h));
        let mut out = Vec::with_capacity(visits.len());
        for v in visits {
            let ids: Vec<usize> = v.events().map(|e| self.offsets[e.modality.0] + e.code.0 as usize).collect();
            let rows = g.gather(emb, &ids);
            let x = g.sum_rows(rows);
            let gx = g.matmul(x, w_x);
            let gh = g.matmul(state, w_h);
            let z = g.add(gx, gh);
            let z = g.add(z, b);
            let slice = |g: &mut Graph<T>, i: usize| g.slice_cols(z, i * h, h);
            let (zi, zf, zg, zo) = (slice(g, 0), slice(g, 1), slice(g, 2), slice(g, 3));
            let (i, f, c_hat, o) = (g.sigmoid(zi), g.sigmoid(zf), g.tanh(zg), g.sigmoid(zo));
            let keep = g.mul(f, cell);
            let write = g.mul(i, c_hat);
            cell = g.add(keep, write);
            let squashed = g.tanh(cell);
            state = g.mul(o, squashed);
            out.push(state);
        }
        out
    }

    fn g_logits(&self, g: &mut Graph<T>, state: Var) -> Var {
        let (w, b) = (self.p(g, "w_out"), self.p(g, "b_out"));
        g.linear(state, w, b)
    }

    /// Summed BCE over all transitions of `record`, with the transition count.
    fn g_record_loss(&self, g: &mut Graph<T>, record: &PatientRecord) -> (Option<Var>, usize) {
        let n_out = self.params.get(self.params.find("b_out").unwrap()).cols();
        let states = self.g_states(g, &record.visits[..record.visits.len() - 1]);
        let mut terms = Vec::new();
        for (t, &s) in states.iter().enumerate() {
            let mut y = Matrix::zeros(1, n_out);
            for c in record.visits[t + 1].codes(self.target) {
                y[(0, c.0 as usize)] = T::one();
            }
            let z = self.g_logits(g, s);
            terms.push(g.bce_with_logits(z, y));
        }
        let n = terms.len();
        let total = terms.into_iter().reduce(|a, b| g.add(a, b));
        (total, n)
    }

    /// Probability of each target code appearing in the visit after `history`.
    pub fn predict(&self, history: &[Visit]) -> Vec<f64> {
        let mut g = Graph::new(&self.params);
        let n_out = self.params.get(self.params.find("b_out").unwrap()).cols();
        let Some(&last) = self.g_states(&mut g, history).last() else { return vec![0.5; n_out] };
        let z = self.g_logits(&mut g, last);
        g.value(z).data().iter().map(|&z| crate::tensor::sigmoid(z).as_f64()).collect()
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }
}

impl<T: Scalar> NextVisitScorer for Predictor<T> {
    fn scores(&self, history: &[Visit]) -> Vec<f64> {
        self.predict(history)
    }
}

/// Trains a predictor with multilabel cross-entropy on every visit transition.
pub fn train_predictor<T: Scalar>(corpus: &Corpus, cfg: &PredictorConfig) -> Result<TrainedPredictor<T>, UtilityError> {
    cfg.validate(corpus.schema())?;
    let usable: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.records()[i].visits.len() >= 2).collect();
    if usable.is_empty() {
        return Err(UtilityError::InsufficientHistory);
    }
    let mut model = Predictor::<T>::new(corpus.schema(), cfg);
    let mut opt = AdamW::new(&model.params, AdamWConfig { clip_norm: Some(5.0), ..AdamWConfig::default() });
    let mut rng = rng_for(cfg.seed, "predictor-batches");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(Gradients<T>, f64, usize)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new(&model.params);
                    let (loss, n) = model.g_record_loss(&mut g, &corpus.records()[i]);
                    let loss = loss.expect("usable records have a transition");
                    (g.backward(loss), g.value(loss)[(0, 0)].as_f64(), n)
                })
                .collect();
            let n: usize = results.iter().map(|r| r.2).sum();
            let mut grads = Gradients::empty(model.params.len());
            for (g, l, _) in &results {
                grads.merge(g);
                total += l;
            }
            count += n;
            grads.scale(T::one() / T::of(n as f64));
            opt.update(&mut model.params, &grads, cfg.learning_rate);
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(UtilityError::NonFiniteLoss(epoch));
        }
        epoch_losses.push(loss);
    }
    Ok(TrainedPredictor { predictor: model, epoch_losses })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtK {
    pub k: usize,
    pub recall: f64,
    /// Half-width of the bootstrap 95% interval over transitions.
    pub ci95: f64,
    pub n_transitions: usize,
}

/// Recall of one ranking: `|top-k ∩ truth| / |truth|`.
pub fn recall_of(scores: &[f64], truth: &BTreeSet<usize>, k: usize) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let hits = idx.iter().take(k).filter(|i| truth.contains(i)).count();
    hits as f64 / truth.len() as f64
}

/// Per-transition recall@k for each `k`, over every visit of `test` (after
/// the first) that contains the target modality.
pub fn transition_recalls<S: NextVisitScorer + ?Sized>(scorer: &S, test: &Corpus, target: ModalityId, ks: &[usize]) -> Vec<Vec<f64>> {
    let cases: Vec<(&PatientRecord, usize)> = test.records().iter().flat_map(|r| (1..r.visits.len()).filter(move |&t| r.visits[t].has(target)).map(move |t| (r, t))).collect();
    let per_case: Vec<Vec<f64>> = cases
        .par_iter()
        .map(|(r, t)| {
            let scores = scorer.scores(&r.visits[..*t]);
            let truth: BTreeSet<usize> = r.visits[*t].codes(target).iter().map(|c| c.0 as usize).collect();
            ks.iter().map(|&k| recall_of(&scores, &truth, k)).collect()
        })
        .collect();
    (0..ks.len()).map(|j| per_case.iter().map(|c| c[j]).collect()).collect()
}

pub fn recall_at_k<S: NextVisitScorer + ?Sized>(scorer: &S, test: &Corpus, target: ModalityId, ks: &[usize], resamples: usize, seed: u64) -> Vec<RecallAtK> {
    transition_recalls(scorer, test, target, ks)
        .into_iter()
        .zip(ks)
        .map(|(values, &k)| RecallAtK {
            k,
            recall: if values.is_empty() { 0.0 } else { mean(&values) },
            ci95: bootstrap_half_width(&values, resamples, derive_seed(seed, &format!("recall@{k}")), mean),
            n_transitions: values.len(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub n_syn: usize,
    pub n_real: usize,
}

impl Arm {
    pub fn label(&self) -> String {
        match (self.n_syn, self.n_real) {
            (s, 0) => format!("syn-{s}"),
            (0, r) => format!("real-{r}"),
            (s, r) => format!("real-{r}+syn-{s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UtilityConfig {
    pub predictor: PredictorConfig,
    pub generation: GenerationConfig,
    pub ks: Vec<usize>,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        Self { predictor: PredictorConfig::default(), generation: GenerationConfig::default(), ks: vec![10, 20], bootstrap_resamples: 1000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityResult {
    pub arm: String,
    pub n_syn: usize,
    pub n_real: usize,
    pub n_train: usize,
    pub recall: Vec<RecallAtK>,
}

impl UtilityResult {
    pub fn table_tsv(results: &[UtilityResult]) -> String {
        let ks: Vec<usize> = results.first().map(|r| r.recall.iter().map(|x| x.k).collect()).unwrap_or_default();
        let mut out = String::from("arm\tn_syn\tn_real\tn_train");
        for k in &ks {
            out.push_str(&format!("\trecall@{k}\tci95@{k}"));
        }
        out.push('\n');
        for r in results {
            out.push_str(&format!("{}\t{}\t{}\t{}", r.arm, r.n_syn, r.n_real, r.n_train));
            for x in &r.recall {
                out.push_str(&format!("\t{:.6}\t{:.6}", x.recall, x.ci95));
            }
            out.push('\n');
        }
        out
    }
}

/// Predictor seed of arm `index`.
pub fn arm_seed(seed: u64, index: usize) -> u64 {
    derive_indexed(derive_seed(seed, "arm"), index as u64)
}

/// Trains and scores one predictor on an explicit training corpus.
pub fn evaluate_arm(train: &Corpus, test: &Corpus, arm: Arm, predictor_seed: u64, cfg: &UtilityConfig) -> Result<UtilityResult, UtilityError> {
    let test_ids = test.ids();
    let leaked = train.ids().intersection(&test_ids).count();
    if leaked > 0 {
        return Err(UtilityError::TestLeak(leaked, arm.label()));
    }
    let pcfg = PredictorConfig { seed: predictor_seed, ..cfg.predictor.clone() };
    let trained = train_predictor::<f32>(train, &pcfg)?;
    let recall = recall_at_k(&trained.predictor, test, pcfg.target, &cfg.ks, cfg.bootstrap_resamples, predictor_seed);
    Ok(UtilityResult { arm: arm.label(), n_syn: arm.n_syn, n_real: arm.n_real, n_train: train.len(), recall })
}

/// Generates the largest synthetic cohort any arm needs once; arm `i` uses
/// its first `n_syn` records plus the first `n_real` records of `real_train`.
pub fn run_utility_suite<M: ConditionalLm + ?Sized>(model: &M, real_train: &Corpus, real_test: &Corpus, arms: &[Arm], cfg: &UtilityConfig) -> Result<Vec<UtilityResult>, UtilityError> {
    if cfg.ks.is_empty() || cfg.ks.contains(&0) {
        return Err(UtilityError::InvalidConfig("ks must be nonempty and positive".into()));
    }
    if let Some(a) = arms.iter().find(|a| a.n_real > real_train.len() || a.n_syn + a.n_real == 0) {
        return Err(UtilityError::InvalidConfig(format!("arm {} needs {} real records, {} available", a.label(), a.n_real, real_train.len())));
    }
    let max_syn = arms.iter().map(|a| a.n_syn).max().unwrap_or(0);
    let synthetic = if max_syn > 0 {
        let baselines = sample_baselines(real_train, max_syn, &mut rng_for(cfg.seed, "utility-baselines"));
        let gen = GenerationConfig { seed: derive_seed(cfg.seed, "utility-generate"), ..cfg.generation.clone() };
        let records = generate_cohort(model, &baselines, "syn", &gen)?.into_iter().map(|g| g.record).collect();
        Corpus::new(real_train.schema_arc().clone(), records)?
    } else {
        Corpus::new(real_train.schema_arc().clone(), Vec::new())?
    };
    arms.iter()
        .enumerate()
        .map(|(i, &arm)| {
            let syn = synthetic.select(&(0..arm.n_syn).collect::<Vec<_>>());
            let real = real_train.select(&(0..arm.n_real).collect::<Vec<_>>());
            let train = real.concat(&syn)?;
            evaluate_arm(&train, real_test, arm, arm_seed(cfg.seed, i), cfg)
        })
        .collect()
}
