//! Denoising perturbations applied to encoder token sequences during training.
//!
//! Only code tokens are ever removed or replaced; `<s>`, `<v>`, modality
//! markers and existing `<mask>` slots pass through unchanged, so every output
//! still parses.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{TokenId, TokenKind, TokenSequence, Vocabulary, MASK};
use crate::records::ModalityId;

#[derive(Debug, Error, PartialEq)]
pub enum CorruptionError {
    #[error("invalid corruption config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    /// Per code token.
    pub p_mask: f64,
    /// Per code token that was not masked.
    pub p_delete: f64,
    /// Per modality span: chance of replacing a Poisson-length run with one `<mask>`.
    pub p_infill: f64,
    pub infill_lambda: f64,
    pub enable_span_shuffle: bool,
    pub enable_modality_permute: bool,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self { p_mask: 0.15, p_delete: 0.10, p_infill: 0.10, infill_lambda: 3.0, enable_span_shuffle: true, enable_modality_permute: true, seed: 0 }
    }
}

impl CorruptionConfig {
    /// No perturbation at all.
    pub fn identity() -> Self {
        Self { p_mask: 0.0, p_delete: 0.0, p_infill: 0.0, enable_span_shuffle: false, enable_modality_permute: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CorruptionError> {
        for (name, p) in [("p_mask", self.p_mask), ("p_delete", self.p_delete), ("p_infill", self.p_infill)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CorruptionError::InvalidConfig(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if !(self.infill_lambda > 0.0 && self.infill_lambda.is_finite()) {
            return Err(CorruptionError::InvalidConfig(format!("infill_lambda = {} must be positive", self.infill_lambda)));
        }
        Ok(())
    }
}

/// What the random draws of one [`corrupt_traced`] call were.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorruptionTrace {
    /// Applied infill length for every span that was selected for infilling,
    /// after truncation to the span's code count (0 means no-op).
    pub infill_lengths: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionStats {
    pub n_masked: usize,
    pub n_deleted: usize,
    pub n_infilled_spans: usize,
}

struct Block {
    open: TokenId,
    body: Vec<TokenId>,
    close: TokenId,
}

enum Segment {
    Token(TokenId),
    Visit { open: TokenId, blocks: Vec<Block>, close: TokenId },
}

/// Splits a well-formed sequence into top-level tokens and visits of blocks.
fn segments(tokens: &TokenSequence) -> Vec<Segment> {
    let mut out = Vec::new();
    let ids = tokens.ids();
    let spans = tokens.spans();
    let mut i = 0;
    while i < ids.len() {
        if spans[i].kind != TokenKind::VisitOpen {
            out.push(Segment::Token(ids[i]));
            i += 1;
            continue;
        }
        let open = ids[i];
        i += 1;
        let mut blocks = Vec::new();
        while i < ids.len() && matches!(spans[i].kind, TokenKind::ModalityOpen(_)) {
            let block_open = ids[i];
            i += 1;
            let mut body = Vec::new();
            while i < ids.len() && !matches!(spans[i].kind, TokenKind::ModalityClose(_)) {
                body.push(ids[i]);
                i += 1;
            }
            blocks.push(Block { open: block_open, body, close: ids[i] });
            i += 1;
        }
        out.push(Segment::Visit { open, blocks, close: ids[i] });
        i += 1;
    }
    out
}

fn is_code(vocab: &Vocabulary, id: TokenId) -> bool {
    matches!(vocab.kind(id), Some(TokenKind::Code(_)))
}

/// Applies q(X) with the given RNG. See [`corrupt_traced`] for the order of steps.
pub fn corrupt(vocab: &Vocabulary, tokens: &TokenSequence, config: &CorruptionConfig, rng: &mut impl Rng) -> TokenSequence {
    corrupt_traced(vocab, tokens, config, rng).0
}

/// Steps, per visit: permute modality blocks, shuffle codes within each block,
/// infill at most one run per block, then mask or delete individual codes.
/// Blocks holding a `<mask>` slot are left intact apart from being permuted.
pub fn corrupt_traced(vocab: &Vocabulary, tokens: &TokenSequence, config: &CorruptionConfig, rng: &mut impl Rng) -> (TokenSequence, CorruptionTrace) {
    let poisson = Poisson::new(config.infill_lambda).expect("validated infill_lambda");
    let mut trace = CorruptionTrace::default();
    let mut out = Vec::with_capacity(tokens.len());
    for segment in segments(tokens) {
        let (open, mut blocks, close) = match segment {
            Segment::Token(id) => {
                out.push(id);
                continue;
            }
            Segment::Visit { open, blocks, close } => (open, blocks, close),
        };
        if config.enable_modality_permute {
            blocks.shuffle(rng);
        }
        out.push(open);
        for mut block in blocks {
            out.push(block.open);
            let is_slot = block.body.iter().any(|&t| !is_code(vocab, t));
            if !is_slot {
                if config.enable_span_shuffle {
                    block.body.shuffle(rng);
                }
                let mut body: Vec<TokenId> = block.body;
                if config.p_infill > 0.0 && rng.random_bool(config.p_infill) {
                    let draw = poisson.sample(rng) as usize;
                    let len = draw.min(body.len());
                    trace.infill_lengths.push(len);
                    if len > 0 {
                        let start = rng.random_range(0..=body.len() - len);
                        body.splice(start..start + len, [MASK]);
                    }
                }
                for t in body {
                    if t == MASK {
                        out.push(t);
                    } else if config.p_mask > 0.0 && rng.random_bool(config.p_mask) {
                        out.push(MASK);
                    } else if config.p_delete > 0.0 && rng.random_bool(config.p_delete) {
                        continue;
                    } else {
                        out.push(t);
                    }
                }
            } else {
                out.extend(block.body);
            }
            out.push(block.close);
        }
        out.push(close);
    }
    (TokenSequence::new(vocab, out).expect("corruption keeps ids in the vocabulary"), trace)
}

type SpanKey = (usize, ModalityId);

fn span_contents(tokens: &TokenSequence) -> BTreeMap<SpanKey, (Vec<TokenId>, usize)> {
    let mut map: BTreeMap<SpanKey, (Vec<TokenId>, usize)> = BTreeMap::new();
    for (&id, span) in tokens.ids().iter().zip(tokens.spans()) {
        let (Some(visit), Some(k)) = (span.visit, span.modality) else { continue };
        let entry = map.entry((visit, k)).or_default();
        match span.kind {
            TokenKind::Code(_) => entry.0.push(id),
            TokenKind::Mask => entry.1 += 1,
            _ => {}
        }
    }
    map
}

/// Counts masks, deletions and infilled runs by aligning each
/// (visit, modality) span of `after` against `before`.
///
/// Within a span, surviving codes are anchors. Each gap between anchors with
/// `r` missing codes and `m` masks counts as `r` deletions when `m = 0`, as
/// `m` masks when `r = m`, and as `m - 1` masks plus one infilled run when
/// `r > m` (first such gap per span; later surplus counts as deletions). If
/// the surviving codes were reordered the whole span is one gap.
pub fn corruption_stats(before: &TokenSequence, after: &TokenSequence) -> CorruptionStats {
    let before_spans = span_contents(before);
    let mut stats = CorruptionStats::default();
    for (key, (after_codes, after_masks)) in span_contents(after) {
        let Some((before_codes, before_masks)) = before_spans.get(&key) else { continue };
        let new_masks = after_masks.saturating_sub(*before_masks);
        let positions: Option<Vec<usize>> = after_codes.iter().map(|c| before_codes.iter().position(|b| b == c)).collect();
        let ordered = positions.as_ref().is_some_and(|p| p.windows(2).all(|w| w[0] < w[1]));
        let gaps: Vec<(usize, usize)> = if ordered && new_masks > 0 {
            gap_profile(before, after, key, before_codes)
        } else {
            vec![(before_codes.len() - after_codes.len(), new_masks)]
        };
        let mut infilled = false;
        for (missing, masks) in gaps {
            if masks == 0 {
                stats.n_deleted += missing;
            } else if missing <= masks {
                stats.n_masked += missing;
            } else if !infilled {
                infilled = true;
                stats.n_masked += masks - 1;
                stats.n_infilled_spans += 1;
            } else {
                stats.n_masked += masks;
                stats.n_deleted += missing - masks;
            }
        }
    }
    stats
}

/// (missing codes, masks) for each gap between surviving codes of one span.
fn gap_profile(before: &TokenSequence, after: &TokenSequence, key: SpanKey, before_codes: &[TokenId]) -> Vec<(usize, usize)> {
    let before_masked = span_items(before, key).iter().filter(|&&t| t == MASK).count();
    let items = span_items(after, key);
    let mut gaps = Vec::new();
    let (mut prev, mut masks) = (0usize, 0usize);
    let mut skip_masks = before_masked;
    for t in items {
        if t == MASK {
            if skip_masks > 0 {
                skip_masks -= 1;
            } else {
                masks += 1;
            }
            continue;
        }
        let pos = before_codes.iter().position(|&b| b == t).expect("ordered anchors exist in before");
        gaps.push((pos - prev, masks));
        prev = pos + 1;
        masks = 0;
    }
    gaps.push((before_codes.len() - prev, masks));
    gaps
}

fn span_items(tokens: &TokenSequence, key: SpanKey) -> Vec<TokenId> {
    tokens
        .ids()
        .iter()
        .zip(tokens.spans())
        .filter(|(_, s)| s.visit == Some(key.0) && s.modality == Some(key.1) && matches!(s.kind, TokenKind::Code(_) | TokenKind::Mask))
        .map(|(&id, _)| id)
        .collect()
}
