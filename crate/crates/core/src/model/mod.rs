//! Prompt-conditioned encoder-decoder transformer.
//!
//! Baseline features enter only through four featurizers (categorical and
//! numerical, one pair per side) whose outputs are prepended as extra rows to
//! the token embeddings. Encoder and decoder share the token embedding table,
//! which is also the (tied) output projection.

mod checkpoint;
mod lm;
mod train;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use lm::{token_logprobs, token_logprobs_within, ConditionalLm, FnLm, UniformLm};
pub use train::{build_example, train, train_from, validation_perplexity, EpochLog, LrDecay, Selection, Task, TrainConfig, TrainOutcome, TrainingExample};

use crate::grammar::{GrammarError, TokenId, Vocabulary};
use crate::records::{BaselineFeatures, Corpus, Schema};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Matrix, ParamId, ParamSet, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),
    #[error("unknown token id {0}")]
    UnknownToken(TokenId),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("schema hash mismatch: model {model}, data {data}")]
    SchemaMismatch { model: String, data: String },
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Layers per stack (encoder and decoder each).
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Rows produced by each prompt featurizer.
    pub n_prompt_tokens: usize,
    /// Hidden width `d0` of the featurizers.
    pub d_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 128, n_layers: 2, n_heads: 4, d_ff: 256, n_prompt_tokens: 1, d_hidden: 128 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_prompt_tokens == 0 || self.d_hidden == 0 {
            return bad("all sizes must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Encoder,
    Decoder,
}

/// Per-feature mean and standard deviation of the raw numerical baseline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NumericNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NumericNorm {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let m = corpus.schema().m_u;
        let n = corpus.len().max(1) as f64;
        let mut mean = vec![0.0; m];
        for r in corpus.records() {
            for (a, x) in mean.iter_mut().zip(&r.baseline.numerical) {
                *a += x / n;
            }
        }
        let mut var = vec![0.0; m];
        for r in corpus.records() {
            for ((v, x), mu) in var.iter_mut().zip(&r.baseline.numerical).zip(&mean) {
                *v += (x - mu) * (x - mu) / n;
            }
        }
        let std = var.into_iter().map(|v: f64| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn identity(m_u: usize) -> Self {
        Self { mean: vec![0.0; m_u], std: vec![1.0; m_u] }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect()
    }
}

/// The affine maps `E = (x·W0 + b)·W1` of one featurizer.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptFeaturizerParams<T> {
    pub w0: Matrix<T>,
    pub b: Matrix<T>,
    pub w1: Matrix<T>,
}

impl<T: Scalar> PromptFeaturizerParams<T> {
    /// `n_prompt × d_model` block for the feature vector `x`.
    pub fn embed(&self, x: &[T], n_prompt: usize) -> Result<Matrix<T>, ModelError> {
        if x.len() != self.w0.rows() {
            return Err(ModelError::DimensionMismatch(format!("featurizer expects {} features, got {}", self.w0.rows(), x.len())));
        }
        let mut h = Matrix::from_vec(1, x.len(), x.to_vec()).matmul(&self.w0);
        h.add_assign(&self.b);
        let e = h.matmul(&self.w1);
        let cols = e.cols() / n_prompt;
        Ok(e.reshaped(n_prompt, cols))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct FeatIds {
    w0: ParamId,
    b: ParamId,
    w1: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LnIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct EncLayer {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug, PartialEq)]
struct DecLayer {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross: AttnIds,
    ln3: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok: ParamId,
    out_bias: ParamId,
    /// Indexed `[side][kind]` with kind 0 = categorical, 1 = numerical.
    feats: [[Option<FeatIds>; 2]; 2],
    enc: Vec<EncLayer>,
    enc_ln: LnIds,
    dec: Vec<DecLayer>,
    dec_ln: LnIds,
}

struct Init<'a, T> {
    params: &'a mut ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.params.add_normal(name, rows, cols, 1.0 / (rows as f64).sqrt(), &mut self.rng)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.params.add(name, Matrix::zeros(rows, cols))
    }

    fn ln(&mut self, name: &str, d: usize) -> LnIds {
        LnIds { g: self.params.add(format!("{name}.g"), Matrix::filled(1, d, T::one())), b: self.zeros(format!("{name}.b"), 1, d) }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.weight(format!("{name}.wq"), d, d),
            bq: self.zeros(format!("{name}.bq"), 1, d),
            wk: self.weight(format!("{name}.wk"), d, d),
            bk: self.zeros(format!("{name}.bk"), 1, d),
            wv: self.weight(format!("{name}.wv"), d, d),
            bv: self.zeros(format!("{name}.bv"), 1, d),
            wo: self.weight(format!("{name}.wo"), d, d),
            bo: self.zeros(format!("{name}.bo"), 1, d),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, ff: usize) -> FfnIds {
        FfnIds {
            w1: self.weight(format!("{name}.w1"), d, ff),
            b1: self.zeros(format!("{name}.b1"), 1, ff),
            w2: self.weight(format!("{name}.w2"), ff, d),
            b2: self.zeros(format!("{name}.b2"), 1, d),
        }
    }
}

/// Weights, vocabulary and feature normalization of one trained or fresh model.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    config: ModelConfig,
    schema: Arc<Schema>,
    vocab: Arc<Vocabulary>,
    norm: NumericNorm,
    params: ParamSet<T>,
    layout: Layout,
}

fn sinusoid<T: Scalar>(len: usize, d: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            m[(pos, i)] = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

fn check_finite<T: Scalar>(m: &Matrix<T>, what: &str) -> Result<(), ModelError> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(ModelError::NumericOverflow(format!("non-finite values in {what}")))
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh random initialization.
    pub fn new(config: ModelConfig, schema: Arc<Schema>, norm: NumericNorm, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if norm.mean.len() != schema.m_u || norm.std.len() != schema.m_u {
            return Err(ModelError::DimensionMismatch(format!("normalization has {} features, schema has m_u = {}", norm.mean.len(), schema.m_u)));
        }
        let vocab = Arc::new(Vocabulary::from_schema(&schema));
        let d = config.d_model;
        let mut params = ParamSet::new();
        let mut init = Init { params: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let tok = init.params.add_normal("tok_emb", vocab.len(), d, 1.0, &mut init.rng);
        let out_bias = init.zeros("out_bias".into(), 1, vocab.len());
        let mut feats = [[None; 2]; 2];
        for (s, side) in ["enc", "dec"].iter().enumerate() {
            for (kind, (name, m)) in [("cat", schema.m_c), ("num", schema.m_u)].into_iter().enumerate() {
                if m == 0 {
                    continue;
                }
                let base = format!("{side}.prompt_{name}");
                feats[s][kind] = Some(FeatIds {
                    w0: init.weight(format!("{base}.w0"), m, config.d_hidden),
                    b: init.zeros(format!("{base}.b"), 1, config.d_hidden),
                    w1: init.weight(format!("{base}.w1"), config.d_hidden, config.n_prompt_tokens * d),
                });
            }
        }
        let enc = (0..config.n_layers)
            .map(|l| EncLayer {
                ln1: init.ln(&format!("enc.{l}.ln1"), d),
                attn: init.attn(&format!("enc.{l}.attn"), d),
                ln2: init.ln(&format!("enc.{l}.ln2"), d),
                ffn: init.ffn(&format!("enc.{l}.ffn"), d, config.d_ff),
            })
            .collect();
        let enc_ln = init.ln("enc.ln", d);
        let dec = (0..config.n_layers)
            .map(|l| DecLayer {
                ln1: init.ln(&format!("dec.{l}.ln1"), d),
                self_attn: init.attn(&format!("dec.{l}.self"), d),
                ln2: init.ln(&format!("dec.{l}.ln2"), d),
                cross: init.attn(&format!("dec.{l}.cross"), d),
                ln3: init.ln(&format!("dec.{l}.ln3"), d),
                ffn: init.ffn(&format!("dec.{l}.ffn"), d, config.d_ff),
            })
            .collect();
        let dec_ln = init.ln("dec.ln", d);
        let layout = Layout { tok, out_bias, feats, enc, enc_ln, dec, dec_ln };
        Ok(Self { config, schema, vocab, norm, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn schema_hash(&self) -> String {
        self.schema.hash()
    }

    pub fn numeric_norm(&self) -> &NumericNorm {
        &self.norm
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut params = ParamSet::new();
        for id in self.params.ids() {
            params.add(self.params.name(id), self.params.get(id).cast());
        }
        ModelParams { config: self.config.clone(), schema: self.schema.clone(), vocab: self.vocab.clone(), norm: self.norm.clone(), params, layout: self.layout.clone() }
    }

    /// Number of prompt rows prepended on each side.
    pub fn prompt_rows(&self) -> usize {
        self.layout.feats[0].iter().flatten().count() * self.config.n_prompt_tokens
    }

    fn side_index(side: Side) -> usize {
        match side {
            Side::Encoder => 0,
            Side::Decoder => 1,
        }
    }

    /// Copies of one featurizer's weights; `numerical` selects the numerical one.
    pub fn featurizer(&self, side: Side, numerical: bool) -> Option<PromptFeaturizerParams<T>> {
        self.layout.feats[Self::side_index(side)][usize::from(numerical)].map(|f| PromptFeaturizerParams {
            w0: self.params.get(f.w0).clone(),
            b: self.params.get(f.b).clone(),
            w1: self.params.get(f.w1).clone(),
        })
    }

    /// Overwrites every featurizer weight with zero.
    pub fn zero_featurizers(&mut self) {
        for f in self.layout.feats.iter().flatten().flatten() {
            for id in [f.w0, f.b, f.w1] {
                self.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    /// Feature vectors fed to the featurizers: categorical as-is, numerical normalized.
    fn feature_inputs(&self, baseline: &BaselineFeatures) -> Result<[Vec<T>; 2], ModelError> {
        if baseline.categorical.len() != self.schema.m_c || baseline.numerical.len() != self.schema.m_u {
            return Err(ModelError::DimensionMismatch(format!(
                "baseline has {} categorical and {} numerical features, schema expects {} and {}",
                baseline.categorical.len(),
                baseline.numerical.len(),
                self.schema.m_c,
                self.schema.m_u
            )));
        }
        Ok([
            baseline.categorical.iter().map(|&c| T::of(f64::from(c))).collect(),
            self.norm.apply(&baseline.numerical).into_iter().map(T::of).collect(),
        ])
    }

    /// `[E_cat; E_num]` for one side, `prompt_rows() × d_model`.
    pub fn featurize_prompt(&self, baseline: &BaselineFeatures, side: Side) -> Result<Matrix<T>, ModelError> {
        let inputs = self.feature_inputs(baseline)?;
        let mut data = Vec::new();
        for (kind, x) in inputs.iter().enumerate() {
            if let Some(f) = self.featurizer(side, kind == 1) {
                data.extend(f.embed(x, self.config.n_prompt_tokens)?.into_data());
            }
        }
        Ok(Matrix::from_vec(self.prompt_rows(), self.config.d_model, data))
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab.len()) {
            Some(&t) => Err(ModelError::UnknownToken(t)),
            None => Ok(()),
        }
    }

    /// Prompt rows followed by token embeddings plus sinusoidal positions.
    pub fn embed_inputs(&self, tokens: &[TokenId], baseline: &BaselineFeatures, side: Side) -> Result<Matrix<T>, ModelError> {
        self.check_tokens(tokens)?;
        let mut g = Graph::new(&self.params);
        let inputs = self.feature_inputs(baseline)?;
        let v = self.g_embed(&mut g, tokens, &inputs, side);
        Ok(g.value(v).clone())
    }

    fn g_lin(g: &mut Graph<T>, x: Var, w: ParamId, b: ParamId) -> Var {
        let (w, b) = (g.param(w), g.param(b));
        g.linear(x, w, b)
    }

    fn g_ln(g: &mut Graph<T>, x: Var, ln: LnIds) -> Var {
        let (gain, bias) = (g.param(ln.g), g.param(ln.b));
        g.layer_norm(x, gain, bias)
    }

    fn g_attn(&self, g: &mut Graph<T>, ids: &AttnIds, xq: Var, xkv: Var, causal: bool) -> Var {
        let q = Self::g_lin(g, xq, ids.wq, ids.bq);
        let k = Self::g_lin(g, xkv, ids.wk, ids.bk);
        let v = Self::g_lin(g, xkv, ids.wv, ids.bv);
        let a = g.attention(q, k, v, self.config.n_heads, causal);
        Self::g_lin(g, a, ids.wo, ids.bo)
    }

    fn g_ffn(g: &mut Graph<T>, ids: &FfnIds, x: Var) -> Var {
        let h = Self::g_lin(g, x, ids.w1, ids.b1);
        let h = g.gelu(h);
        Self::g_lin(g, h, ids.w2, ids.b2)
    }

    fn g_prompt(&self, g: &mut Graph<T>, inputs: &[Vec<T>; 2], side: Side) -> Vec<Var> {
        let d = self.config.d_model;
        let n = self.config.n_prompt_tokens;
        let mut rows = Vec::new();
        for (kind, x) in inputs.iter().enumerate() {
            let Some(f) = self.layout.feats[Self::side_index(side)][kind] else { continue };
            let x = g.constant(Matrix::from_vec(1, x.len(), x.clone()));
            let h = Self::g_lin(g, x, f.w0, f.b);
            let w1 = g.param(f.w1);
            let e = g.matmul(h, w1);
            rows.push(g.reshape(e, n, d));
        }
        rows
    }

    fn g_embed(&self, g: &mut Graph<T>, tokens: &[TokenId], inputs: &[Vec<T>; 2], side: Side) -> Var {
        let mut parts = self.g_prompt(g, inputs, side);
        if !tokens.is_empty() {
            let table = g.param(self.layout.tok);
            let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
            let e = g.gather(table, &ids);
            let pos = g.constant(sinusoid(tokens.len(), self.config.d_model));
            parts.push(g.add(e, pos));
        }
        g.concat_rows(&parts)
    }

    fn g_encode(&self, g: &mut Graph<T>, x: Var) -> Var {
        let mut h = x;
        for layer in &self.layout.enc {
            let n = Self::g_ln(g, h, layer.ln1);
            let a = self.g_attn(g, &layer.attn, n, n, false);
            h = g.add(h, a);
            let n = Self::g_ln(g, h, layer.ln2);
            let f = Self::g_ffn(g, &layer.ffn, n);
            h = g.add(h, f);
        }
        Self::g_ln(g, h, self.layout.enc_ln)
    }

    /// Output logits for the token rows of the decoder input (prompt rows dropped).
    fn g_decode_logits(&self, g: &mut Graph<T>, memory: Var, x: Var) -> Var {
        let mut h = x;
        for layer in &self.layout.dec {
            let n = Self::g_ln(g, h, layer.ln1);
            let a = self.g_attn(g, &layer.self_attn, n, n, true);
            h = g.add(h, a);
            let n = Self::g_ln(g, h, layer.ln2);
            let c = self.g_attn(g, &layer.cross, n, memory, false);
            h = g.add(h, c);
            let n = Self::g_ln(g, h, layer.ln3);
            let f = Self::g_ffn(g, &layer.ffn, n);
            h = g.add(h, f);
        }
        let h = Self::g_ln(g, h, self.layout.dec_ln);
        let p = self.prompt_rows();
        let rows = g.shape(h).0;
        let token_rows: Vec<usize> = (p..rows).collect();
        let h = g.gather(h, &token_rows);
        let table = g.param(self.layout.tok);
        let logits = g.matmul_bt(h, table);
        let logits = g.scale(logits, T::one() / T::of(self.config.d_model as f64).sqrt());
        let bias = g.param(self.layout.out_bias);
        g.add_row(logits, bias)
    }

    /// Next-token distributions for every decoder token row, given already
    /// embedded inputs (as produced by [`Self::embed_inputs`]).
    pub fn forward(&self, encoder_input: &Matrix<T>, decoder_input: &Matrix<T>) -> Result<Matrix<T>, ModelError> {
        let d = self.config.d_model;
        if encoder_input.cols() != d || decoder_input.cols() != d {
            return Err(ModelError::DimensionMismatch(format!("inputs must have {d} columns")));
        }
        if decoder_input.rows() <= self.prompt_rows() {
            return Err(ModelError::DimensionMismatch("decoder input has no token rows".into()));
        }
        let mut g = Graph::new(&self.params);
        let x = g.constant(encoder_input.clone());
        let memory = self.g_encode(&mut g, x);
        let y = g.constant(decoder_input.clone());
        let logits = self.g_decode_logits(&mut g, memory, y);
        let lp = g.log_softmax(logits);
        let probs = g.value(lp).map(T::exp);
        check_finite(&probs, "output distribution")?;
        Ok(probs)
    }

    /// Encoder output for `tokens` plus the decoder-side prompt block.
    pub fn encode_input(&self, tokens: &[TokenId], baseline: &BaselineFeatures) -> Result<Encoded<T>, ModelError> {
        self.check_tokens(tokens)?;
        let inputs = self.feature_inputs(baseline)?;
        let mut g = Graph::new(&self.params);
        let x = self.g_embed(&mut g, tokens, &inputs, Side::Encoder);
        let memory = self.g_encode(&mut g, x);
        let memory = g.value(memory).clone();
        check_finite(&memory, "encoder output")?;
        Ok(Encoded { memory, inputs })
    }

    /// Log-probabilities (rows = decoder positions) of the next token.
    pub fn decode_logprobs(&self, encoded: &Encoded<T>, decoder: &[TokenId]) -> Result<Matrix<T>, ModelError> {
        self.check_tokens(decoder)?;
        if decoder.is_empty() {
            return Err(ModelError::DimensionMismatch("empty decoder input".into()));
        }
        let mut g = Graph::new(&self.params);
        let memory = g.constant(encoded.memory.clone());
        let y = self.g_embed(&mut g, decoder, &encoded.inputs, Side::Decoder);
        let logits = self.g_decode_logits(&mut g, memory, y);
        let lp = g.log_softmax(logits);
        let out = g.value(lp).clone();
        check_finite(&out, "decoder log-probabilities")?;
        Ok(out)
    }

    /// Summed teacher-forced NLL of `targets` on a graph, for training.
    ///
    /// `targets[i]` is the token that should follow `decoder[..=i]`; `None`
    /// positions contribute nothing.
    pub fn g_loss(&self, g: &mut Graph<T>, encoder: &[TokenId], decoder: &[TokenId], targets: &[Option<usize>], baseline: &BaselineFeatures) -> Result<Var, ModelError> {
        self.check_tokens(encoder)?;
        self.check_tokens(decoder)?;
        let inputs = self.feature_inputs(baseline)?;
        let x = self.g_embed(g, encoder, &inputs, Side::Encoder);
        let memory = self.g_encode(g, x);
        let y = self.g_embed(g, decoder, &inputs, Side::Decoder);
        let logits = self.g_decode_logits(g, memory, y);
        let lp = g.log_softmax(logits);
        Ok(g.pick_nll(lp, targets))
    }

    pub(crate) fn from_parts(config: ModelConfig, schema: Arc<Schema>, norm: NumericNorm, named: &std::collections::BTreeMap<String, Matrix<T>>) -> Result<Self, ModelError> {
        let mut model = Self::new(config, schema, norm, 0)?;
        model.params.load_named(named).map_err(ModelError::Checkpoint)?;
        Ok(model)
    }
}

/// Encoder memory plus the baseline inputs needed by the decoder prompts.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    memory: Matrix<T>,
    inputs: [Vec<T>; 2],
}

#[cfg(test)]
mod tests;
