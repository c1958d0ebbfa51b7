//! Record <-> token grammar and the two prompt layouts.
//!
//! A record serializes as `<s> ( <v> ( <mod> code* </mod> )* </v> )* </s>`.
//! Token ids are laid out as six fixed specials, then an opener/closer pair per
//! modality, then every modality's codes in one contiguous range each.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{BaselineFeatures, CodeId, EventCode, ModalityId, PatientRecord, Schema, Visit};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const MASK: TokenId = 3;
pub const VISIT_OPEN: TokenId = 4;
pub const VISIT_CLOSE: TokenId = 5;
const N_FIXED: u32 = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrammarError {
    #[error("unknown token id {id} at position {position}")]
    UnknownToken { position: usize, id: TokenId },
    #[error("unknown code {code} in modality {modality}")]
    UnknownCode { modality: usize, code: u32 },
    #[error("unknown token string {0:?}")]
    UnknownTokenString(String),
    #[error("grammar violation at position {position}: {detail}")]
    Violation { position: usize, detail: String },
    #[error("unknown modality {0}")]
    UnknownModality(usize),
    #[error("vocabulary does not match schema: {0}")]
    VocabularyMismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Mask,
    VisitOpen,
    VisitClose,
    ModalityOpen(ModalityId),
    ModalityClose(ModalityId),
    Code(EventCode),
}

impl TokenKind {
    pub fn is_special(self) -> bool {
        !matches!(self, TokenKind::Code(_))
    }
}

/// Dense token-id table derived from a schema.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    /// `code_start[k]..code_start[k + 1]` are the code ids of modality `k`.
    code_start: Vec<u32>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn from_schema(schema: &Schema) -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<s>", "</s>", "<mask>", "<v>", "</v>"].iter().map(|s| s.to_string()).collect();
        for m in &schema.modalities {
            tokens.push(format!("<{}>", m.name));
            tokens.push(format!("</{}>", m.name));
        }
        let mut code_start = Vec::with_capacity(schema.k() + 1);
        for m in &schema.modalities {
            code_start.push(tokens.len() as u32);
            tokens.extend(m.vocabulary.iter().map(|c| format!("{}:{c}", m.name)));
        }
        code_start.push(tokens.len() as u32);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        Self { tokens, code_start, index }
    }

    /// Rebuilds the table for `schema` and checks it against a stored token list.
    pub fn from_tokens(schema: &Schema, tokens: &[String]) -> Result<Self, GrammarError> {
        let vocab = Self::from_schema(schema);
        if vocab.tokens != tokens {
            let at = vocab.tokens.iter().zip(tokens).position(|(a, b)| a != b).unwrap_or(vocab.tokens.len().min(tokens.len()));
            return Err(GrammarError::VocabularyMismatch(format!("first difference at id {at}")));
        }
        Ok(vocab)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn k(&self) -> usize {
        self.code_start.len() - 1
    }

    pub fn open(&self, k: ModalityId) -> TokenId {
        N_FIXED + 2 * k.0 as u32
    }

    pub fn close(&self, k: ModalityId) -> TokenId {
        N_FIXED + 2 * k.0 as u32 + 1
    }

    pub fn code_range(&self, k: ModalityId) -> Range<TokenId> {
        self.code_start[k.0]..self.code_start[k.0 + 1]
    }

    pub fn modality_size(&self, k: ModalityId) -> usize {
        let r = self.code_range(k);
        (r.end - r.start) as usize
    }

    pub fn code_token(&self, event: EventCode) -> Result<TokenId, GrammarError> {
        if event.modality.0 >= self.k() {
            return Err(GrammarError::UnknownModality(event.modality.0));
        }
        let r = self.code_range(event.modality);
        let id = r.start + event.code.0;
        if id >= r.end {
            return Err(GrammarError::UnknownCode { modality: event.modality.0, code: event.code.0 });
        }
        Ok(id)
    }

    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        Some(match id {
            PAD => TokenKind::Pad,
            BOS => TokenKind::Bos,
            EOS => TokenKind::Eos,
            MASK => TokenKind::Mask,
            VISIT_OPEN => TokenKind::VisitOpen,
            VISIT_CLOSE => TokenKind::VisitClose,
            _ if id < self.code_start[0] => {
                let k = ModalityId(((id - N_FIXED) / 2) as usize);
                if (id - N_FIXED) % 2 == 0 {
                    TokenKind::ModalityOpen(k)
                } else {
                    TokenKind::ModalityClose(k)
                }
            }
            _ if (id as usize) < self.tokens.len() => {
                let k = self.code_start.partition_point(|&s| s <= id) - 1;
                TokenKind::Code(EventCode { modality: ModalityId(k), code: CodeId(id - self.code_start[k]) })
            }
            _ => return None,
        })
    }

    pub fn token_str(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Result<TokenId, GrammarError> {
        self.index.get(token).copied().ok_or_else(|| GrammarError::UnknownTokenString(token.to_string()))
    }

    /// Parses a whitespace-separated token string such as `<s> <v> </v> </s>`.
    pub fn encode_str(&self, text: &str) -> Result<Vec<TokenId>, GrammarError> {
        text.split_whitespace().map(|t| self.id_of(t)).collect()
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token_str(i).unwrap_or("<?>")).collect::<Vec<_>>().join(" ")
    }
}

/// Structural annotation of one token position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    /// Index of the enclosing visit, counting `<v>` openers from 0.
    pub visit: Option<usize>,
    /// Enclosing modality block, including its own markers.
    pub modality: Option<ModalityId>,
    pub kind: TokenKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    spans: Vec<Span>,
}

impl TokenSequence {
    /// Checks every id is in the vocabulary and derives the span annotations.
    /// Partial sequences (decoder prefixes) are accepted; use [`parse`] for
    /// full grammar validation.
    pub fn new(vocab: &Vocabulary, ids: Vec<TokenId>) -> Result<Self, GrammarError> {
        let spans = annotate(vocab, &ids)?;
        Ok(Self { ids, spans })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.ids
    }
}

pub fn annotate(vocab: &Vocabulary, ids: &[TokenId]) -> Result<Vec<Span>, GrammarError> {
    let mut visit: Option<usize> = None;
    let mut n_visits = 0;
    let mut in_visit = false;
    let mut modality: Option<ModalityId> = None;
    ids.iter()
        .enumerate()
        .map(|(position, &id)| {
            let kind = vocab.kind(id).ok_or(GrammarError::UnknownToken { position, id })?;
            let span = match kind {
                TokenKind::VisitOpen => {
                    visit = Some(n_visits);
                    n_visits += 1;
                    in_visit = true;
                    Span { visit, modality: None, kind }
                }
                TokenKind::VisitClose => {
                    let s = Span { visit, modality: None, kind };
                    in_visit = false;
                    s
                }
                TokenKind::ModalityOpen(k) => {
                    modality = Some(k);
                    Span { visit: visit.filter(|_| in_visit), modality, kind }
                }
                TokenKind::ModalityClose(k) => {
                    modality = None;
                    Span { visit: visit.filter(|_| in_visit), modality: Some(k), kind }
                }
                TokenKind::Code(e) => Span { visit: visit.filter(|_| in_visit), modality: Some(e.modality), kind },
                _ => Span { visit: visit.filter(|_| in_visit), modality: modality.filter(|_| kind == TokenKind::Mask), kind },
            };
            Ok(span)
        })
        .collect()
}

/// Tokens of one visit: `<v> (<k> codes </k>)* </v>` in schema order, empty
/// modalities omitted.
pub fn visit_tokens(vocab: &Vocabulary, visit: &Visit) -> Result<Vec<TokenId>, GrammarError> {
    let mut out = vec![VISIT_OPEN];
    push_visit_body(vocab, visit, None, &mut out)?;
    out.push(VISIT_CLOSE);
    Ok(out)
}

fn push_visit_body(vocab: &Vocabulary, visit: &Visit, skip: Option<ModalityId>, out: &mut Vec<TokenId>) -> Result<(), GrammarError> {
    for (k, codes) in visit.iter() {
        if codes.is_empty() || Some(k) == skip {
            continue;
        }
        out.push(vocab.open(k));
        for &code in codes {
            out.push(vocab.code_token(EventCode { modality: k, code })?);
        }
        out.push(vocab.close(k));
    }
    Ok(())
}

fn history_tokens(vocab: &Vocabulary, visits: &[Visit], out: &mut Vec<TokenId>) -> Result<(), GrammarError> {
    for v in visits {
        out.extend(visit_tokens(vocab, v)?);
    }
    Ok(())
}

pub fn serialize_visits(vocab: &Vocabulary, visits: &[Visit]) -> Result<TokenSequence, GrammarError> {
    let mut ids = vec![BOS];
    history_tokens(vocab, visits, &mut ids)?;
    ids.push(EOS);
    TokenSequence::new(vocab, ids)
}

pub fn serialize(vocab: &Vocabulary, record: &PatientRecord) -> Result<TokenSequence, GrammarError> {
    serialize_visits(vocab, &record.visits)
}

#[derive(Clone, Copy, PartialEq)]
enum State {
    Start,
    Top,
    Visit,
    Modality(ModalityId),
    Done,
}

/// Inverse of [`serialize_visits`]. `<mask>` inside a modality block is
/// skipped so that corrupted encoder inputs also parse.
pub fn parse(vocab: &Vocabulary, ids: &[TokenId]) -> Result<Vec<Visit>, GrammarError> {
    let violation = |position: usize, detail: String| GrammarError::Violation { position, detail };
    let mut visits = Vec::new();
    let mut current = Visit::new();
    let mut seen_modalities: BTreeSet<ModalityId> = BTreeSet::new();
    let mut codes: Vec<CodeId> = Vec::new();
    let mut state = State::Start;
    for (position, &id) in ids.iter().enumerate() {
        let kind = vocab.kind(id).ok_or(GrammarError::UnknownToken { position, id })?;
        let found = vocab.token_str(id).unwrap_or_default();
        state = match (state, kind) {
            (State::Start, TokenKind::Bos) => State::Top,
            (State::Start, _) => return Err(violation(position, format!("expected <s>, found {found}"))),
            (State::Top, TokenKind::VisitOpen) => {
                current = Visit::new();
                seen_modalities.clear();
                State::Visit
            }
            (State::Top, TokenKind::Eos) => State::Done,
            (State::Top, _) => return Err(violation(position, format!("expected <v> or </s>, found {found}"))),
            (State::Visit, TokenKind::ModalityOpen(k)) => {
                if !seen_modalities.insert(k) {
                    return Err(violation(position, format!("modality block {found} repeated within a visit")));
                }
                codes.clear();
                State::Modality(k)
            }
            (State::Visit, TokenKind::VisitClose) => {
                visits.push(std::mem::take(&mut current));
                State::Top
            }
            (State::Visit, _) => return Err(violation(position, format!("expected a modality opener or </v>, found {found}"))),
            (State::Modality(k), TokenKind::Code(e)) if e.modality == k => {
                if codes.contains(&e.code) {
                    return Err(violation(position, format!("duplicate code {found}")));
                }
                codes.push(e.code);
                State::Modality(k)
            }
            (State::Modality(k), TokenKind::Mask) => State::Modality(k),
            (State::Modality(k), TokenKind::ModalityClose(c)) if c == k => {
                current.set(k, std::mem::take(&mut codes));
                State::Visit
            }
            (State::Modality(k), _) => {
                return Err(violation(position, format!("expected a {} code or its closer, found {found}", vocab.token_str(vocab.open(k)).unwrap_or_default())))
            }
            (State::Done, _) => return Err(violation(position, format!("token {found} after </s>"))),
        };
    }
    if state != State::Done {
        return Err(violation(ids.len(), "sequence ends before </s>".into()));
    }
    Ok(visits)
}

pub fn parse_record(vocab: &Vocabulary, ids: &[TokenId], id: String, baseline: BaselineFeatures) -> Result<PatientRecord, GrammarError> {
    Ok(PatientRecord { id, baseline, visits: parse(vocab, ids)? })
}

/// Which slot `[Z]` of a layout the answer fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetSpec {
    /// The visit with this index (0-based) following the encoded history.
    NextVisit { visit: usize },
    /// Modality `modality` of visit `visit`.
    Modality { visit: usize, modality: ModalityId },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptLayout {
    pub encoder: TokenSequence,
    pub target: TargetSpec,
    pub decoder_prefix: TokenSequence,
}

/// Prefix layout: the encoder holds the history, the decoder opens the next visit.
pub fn build_longitudinal_prompt(vocab: &Vocabulary, history: &[Visit]) -> Result<PromptLayout, GrammarError> {
    Ok(PromptLayout {
        encoder: serialize_visits(vocab, history)?,
        target: TargetSpec::NextVisit { visit: history.len() },
        decoder_prefix: TokenSequence::new(vocab, vec![BOS, VISIT_OPEN])?,
    })
}

/// Cloze layout: the encoder holds the history plus the current visit without
/// modality `k`, whose block is replaced by `<k> <mask> </k>` at the end of the
/// visit. The decoder opens modality `k`.
pub fn build_crossmodal_prompt(vocab: &Vocabulary, history: &[Visit], current: &Visit, k: ModalityId) -> Result<PromptLayout, GrammarError> {
    if k.0 >= vocab.k() {
        return Err(GrammarError::UnknownModality(k.0));
    }
    let mut ids = vec![BOS];
    history_tokens(vocab, history, &mut ids)?;
    ids.push(VISIT_OPEN);
    push_visit_body(vocab, current, Some(k), &mut ids)?;
    ids.extend([vocab.open(k), MASK, vocab.close(k), VISIT_CLOSE, EOS]);
    Ok(PromptLayout {
        encoder: TokenSequence::new(vocab, ids)?,
        target: TargetSpec::Modality { visit: history.len(), modality: k },
        decoder_prefix: TokenSequence::new(vocab, vec![BOS, vocab.open(k)])?,
    })
}

/// Decoder answer for a prefix layout: the visit body, `</v>`, then `<v>` if
/// another visit follows or `</s>` if the record ends.
pub fn longitudinal_answer(vocab: &Vocabulary, visit: &Visit, more_follow: bool) -> Result<Vec<TokenId>, GrammarError> {
    let mut out = Vec::new();
    push_visit_body(vocab, visit, None, &mut out)?;
    out.push(VISIT_CLOSE);
    out.push(if more_follow { VISIT_OPEN } else { EOS });
    Ok(out)
}

/// Decoder answer for a cloze layout: the codes then `</k>`.
pub fn cloze_answer(vocab: &Vocabulary, codes: &[CodeId], k: ModalityId) -> Result<Vec<TokenId>, GrammarError> {
    let mut out = codes.iter().map(|&code| vocab.code_token(EventCode { modality: k, code })).collect::<Result<Vec<_>, _>>()?;
    out.push(vocab.close(k));
    Ok(out)
}

impl fmt::Display for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetSpec::NextVisit { visit } => write!(f, "visit {visit}"),
            TargetSpec::Modality { visit, modality } => write!(f, "modality {} of visit {visit}", modality.0),
        }
    }
}
