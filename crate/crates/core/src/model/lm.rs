use std::ops::Range;
use std::sync::Arc;

use super::{Encoded, ModelError, ModelParams};
use crate::grammar::{PromptLayout, TokenId, Vocabulary};
use crate::records::BaselineFeatures;
use crate::scalar::{log_sum_exp, Scalar};
use crate::tensor::Matrix;

/// Anything that yields next-token log-probabilities for a decoder prefix
/// given an encoder sequence and baseline features.
pub trait ConditionalLm: Sync {
    type Encoded: Send + Sync;

    fn vocab(&self) -> &Vocabulary;

    fn encode(&self, encoder: &[TokenId], baseline: &BaselineFeatures) -> Result<Self::Encoded, ModelError>;

    /// Row `i` is the log-distribution of the token following `decoder[..=i]`.
    fn next_logprobs(&self, encoded: &Self::Encoded, decoder: &[TokenId]) -> Result<Matrix<f64>, ModelError>;

    fn last_logprobs(&self, encoded: &Self::Encoded, decoder: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        let m = self.next_logprobs(encoded, decoder)?;
        Ok(m.row(m.rows() - 1).to_vec())
    }
}

impl<T: Scalar> ConditionalLm for ModelParams<T> {
    type Encoded = Encoded<T>;

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn encode(&self, encoder: &[TokenId], baseline: &BaselineFeatures) -> Result<Encoded<T>, ModelError> {
        self.encode_input(encoder, baseline)
    }

    fn next_logprobs(&self, encoded: &Encoded<T>, decoder: &[TokenId]) -> Result<Matrix<f64>, ModelError> {
        Ok(self.decode_logprobs(encoded, decoder)?.cast())
    }
}

/// Uniform over a fixed support, regardless of context.
#[derive(Clone, Debug)]
pub struct UniformLm {
    vocab: Arc<Vocabulary>,
    row: Vec<f64>,
}

impl UniformLm {
    /// Uniform over every token of the vocabulary.
    pub fn new(vocab: Arc<Vocabulary>) -> Self {
        let all: Vec<TokenId> = (0..vocab.len() as TokenId).collect();
        Self::over(vocab, &all)
    }

    /// Uniform over every code token, zero on structural tokens.
    pub fn codes(vocab: Arc<Vocabulary>) -> Self {
        let codes: Vec<TokenId> = (0..vocab.k()).flat_map(|k| vocab.code_range(crate::records::ModalityId(k))).collect();
        Self::over(vocab, &codes)
    }

    pub fn over(vocab: Arc<Vocabulary>, support: &[TokenId]) -> Self {
        let lp = -(support.len() as f64).ln();
        let mut row = vec![f64::NEG_INFINITY; vocab.len()];
        for &t in support {
            row[t as usize] = lp;
        }
        Self { vocab, row }
    }
}

impl ConditionalLm for UniformLm {
    type Encoded = ();

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn encode(&self, _: &[TokenId], _: &BaselineFeatures) -> Result<(), ModelError> {
        Ok(())
    }

    fn next_logprobs(&self, _: &(), decoder: &[TokenId]) -> Result<Matrix<f64>, ModelError> {
        let data = (0..decoder.len()).flat_map(|_| self.row.iter().copied()).collect();
        Ok(Matrix::from_vec(decoder.len(), self.row.len(), data))
    }
}

/// Stub model defined by a closure returning next-token probabilities for
/// `(baseline, encoder, decoder prefix)`.
pub struct FnLm<F> {
    vocab: Arc<Vocabulary>,
    f: F,
}

impl<F> FnLm<F>
where
    F: Fn(&BaselineFeatures, &[TokenId], &[TokenId]) -> Vec<f64> + Sync,
{
    pub fn new(vocab: Arc<Vocabulary>, f: F) -> Self {
        Self { vocab, f }
    }
}

impl<F> ConditionalLm for FnLm<F>
where
    F: Fn(&BaselineFeatures, &[TokenId], &[TokenId]) -> Vec<f64> + Sync,
{
    type Encoded = (BaselineFeatures, Vec<TokenId>);

    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn encode(&self, encoder: &[TokenId], baseline: &BaselineFeatures) -> Result<Self::Encoded, ModelError> {
        Ok((baseline.clone(), encoder.to_vec()))
    }

    fn next_logprobs(&self, (baseline, encoder): &Self::Encoded, decoder: &[TokenId]) -> Result<Matrix<f64>, ModelError> {
        let v = self.vocab.len();
        let mut data = Vec::with_capacity(decoder.len() * v);
        for i in 0..decoder.len() {
            let p = (self.f)(baseline, encoder, &decoder[..=i]);
            if p.len() != v {
                return Err(ModelError::DimensionMismatch(format!("stub returned {} probabilities for {v} tokens", p.len())));
            }
            data.extend(p.into_iter().map(f64::ln));
        }
        Ok(Matrix::from_vec(decoder.len(), v, data))
    }
}

fn teacher_forced<M: ConditionalLm + ?Sized>(model: &M, layout: &PromptLayout, baseline: &BaselineFeatures, target: &[TokenId]) -> Result<Option<(Matrix<f64>, usize)>, ModelError> {
    let v = model.vocab().len();
    if let Some(&t) = target.iter().find(|&&t| t as usize >= v) {
        return Err(ModelError::UnknownToken(t));
    }
    if target.is_empty() {
        return Ok(None);
    }
    let prefix = layout.decoder_prefix.ids();
    let mut decoder = prefix.to_vec();
    decoder.extend_from_slice(&target[..target.len() - 1]);
    let encoded = model.encode(layout.encoder.ids(), baseline)?;
    Ok(Some((model.next_logprobs(&encoded, &decoder)?, prefix.len() - 1)))
}

/// Teacher-forced `log p(target_i | prefix, target_<i)` over the full vocabulary.
pub fn token_logprobs<M: ConditionalLm + ?Sized>(model: &M, layout: &PromptLayout, baseline: &BaselineFeatures, target: &[TokenId]) -> Result<Vec<f64>, ModelError> {
    let Some((rows, offset)) = teacher_forced(model, layout, baseline, target)? else { return Ok(Vec::new()) };
    Ok(target.iter().enumerate().map(|(i, &t)| rows[(offset + i, t as usize)]).collect())
}

/// As [`token_logprobs`], with each distribution renormalized over `support`.
pub fn token_logprobs_within<M: ConditionalLm + ?Sized>(
    model: &M,
    layout: &PromptLayout,
    baseline: &BaselineFeatures,
    target: &[TokenId],
    support: Range<TokenId>,
) -> Result<Vec<f64>, ModelError> {
    let Some((rows, offset)) = teacher_forced(model, layout, baseline, target)? else { return Ok(Vec::new()) };
    let (lo, hi) = (support.start as usize, support.end as usize);
    Ok(target
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = rows.row(offset + i);
            row[t as usize] - log_sum_exp(row[lo..hi].iter().copied())
        })
        .collect())
}
