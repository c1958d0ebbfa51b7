//! Multimodal longitudinal patient records: data model, corpus ingestion,
//! deterministic splitting and summary statistics.

mod io;
pub mod oracle;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use io::{load_corpus, load_schema, read_corpus, write_corpus, write_schema};
pub use oracle::{generate_oracle_corpus, BaselineEffect, CouplingTable, OracleModality, OracleSpec};

#[derive(Debug, Error)]
pub enum RecordsError {
    #[error("line {line}: unknown {modality} code {code:?}")]
    UnknownCode { line: usize, modality: String, code: String },
    #[error("line {line}: schema mismatch: {detail}")]
    SchemaMismatch { line: usize, detail: String },
    #[error("line {line}: malformed record: {detail}")]
    MalformedLine { line: usize, detail: String },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("split fractions {fractions:?} leave an empty partition for {n} records")]
    DegenerateFraction { fractions: [f64; 3], n: usize },
    #[error("invalid oracle spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Position of a modality in the corpus schema.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalityId(pub usize);

/// Index of a code within its modality's vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CodeId(pub u32);

/// A code together with the modality it belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EventCode {
    pub modality: ModalityId,
    pub code: CodeId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySchema {
    pub name: String,
    pub vocabulary: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalField {
    pub name: String,
    pub cardinality: usize,
}

/// Modalities with their code vocabularies plus baseline-feature widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub modalities: Vec<ModalitySchema>,
    pub m_c: usize,
    pub m_u: usize,
    #[serde(default)]
    pub categorical_fields: Vec<CategoricalField>,
    #[serde(default)]
    pub numerical_fields: Vec<String>,
}

impl Schema {
    pub fn new(modalities: Vec<ModalitySchema>, m_c: usize, m_u: usize) -> Result<Self, RecordsError> {
        let schema = Self { modalities, m_c, m_u, categorical_fields: Vec::new(), numerical_fields: Vec::new() };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), RecordsError> {
        if self.modalities.is_empty() {
            return Err(RecordsError::InvalidSchema("at least one modality is required".into()));
        }
        let mut names = HashSet::new();
        for m in &self.modalities {
            if m.name.is_empty() || !m.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(RecordsError::InvalidSchema(format!("modality name {:?} must be non-empty [A-Za-z0-9_]", m.name)));
            }
            if !names.insert(m.name.as_str()) {
                return Err(RecordsError::InvalidSchema(format!("duplicate modality {:?}", m.name)));
            }
            if m.vocabulary.is_empty() {
                return Err(RecordsError::InvalidSchema(format!("modality {:?} has an empty vocabulary", m.name)));
            }
            let mut codes = HashSet::new();
            for c in &m.vocabulary {
                if c.is_empty() || c.chars().any(char::is_whitespace) {
                    return Err(RecordsError::InvalidSchema(format!("code {c:?} in {:?} is empty or contains whitespace", m.name)));
                }
                if !codes.insert(c.as_str()) {
                    return Err(RecordsError::InvalidSchema(format!("duplicate code {c:?} in {:?}", m.name)));
                }
            }
        }
        if !self.categorical_fields.is_empty() {
            let total: usize = self.categorical_fields.iter().map(|f| f.cardinality).sum();
            if total != self.m_c {
                return Err(RecordsError::InvalidSchema(format!("categorical cardinalities sum to {total}, m_c is {}", self.m_c)));
            }
        }
        if !self.numerical_fields.is_empty() && self.numerical_fields.len() != self.m_u {
            return Err(RecordsError::InvalidSchema(format!("{} numerical field names for m_u = {}", self.numerical_fields.len(), self.m_u)));
        }
        Ok(())
    }

    /// Number of modalities, K.
    pub fn k(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality_ids(&self) -> impl Iterator<Item = ModalityId> {
        (0..self.modalities.len()).map(ModalityId)
    }

    pub fn modality(&self, name: &str) -> Option<ModalityId> {
        self.modalities.iter().position(|m| m.name == name).map(ModalityId)
    }

    pub fn modality_name(&self, id: ModalityId) -> &str {
        &self.modalities[id.0].name
    }

    pub fn vocab_size(&self, id: ModalityId) -> usize {
        self.modalities[id.0].vocabulary.len()
    }

    pub fn code_name(&self, event: EventCode) -> &str {
        &self.modalities[event.modality.0].vocabulary[event.code.0 as usize]
    }

    pub fn code_id(&self, modality: ModalityId, code: &str) -> Option<CodeId> {
        self.modalities[modality.0].vocabulary.iter().position(|c| c == code).map(|i| CodeId(i as u32))
    }

    /// Total number of codes across all modalities.
    pub fn total_codes(&self) -> usize {
        self.modalities.iter().map(|m| m.vocabulary.len()).sum()
    }

    /// Stable content hash used to bind checkpoints to a schema.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Events of one admission, keyed by modality. Empty modalities are not stored.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Visit {
    events: BTreeMap<ModalityId, Vec<CodeId>>,
}

impl Visit {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the codes of `modality`; an empty list removes the modality.
    pub fn set(&mut self, modality: ModalityId, codes: Vec<CodeId>) {
        if codes.is_empty() {
            self.events.remove(&modality);
        } else {
            self.events.insert(modality, codes);
        }
    }

    pub fn with(mut self, modality: ModalityId, codes: Vec<CodeId>) -> Self {
        self.set(modality, codes);
        self
    }

    pub fn remove(&mut self, modality: ModalityId) -> Option<Vec<CodeId>> {
        self.events.remove(&modality)
    }

    pub fn codes(&self, modality: ModalityId) -> &[CodeId] {
        self.events.get(&modality).map_or(&[], Vec::as_slice)
    }

    pub fn has(&self, modality: ModalityId) -> bool {
        self.events.contains_key(&modality)
    }

    /// Present modalities in schema order.
    pub fn modalities(&self) -> impl Iterator<Item = ModalityId> + '_ {
        self.events.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ModalityId, &[CodeId])> {
        self.events.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn events(&self) -> impl Iterator<Item = EventCode> + '_ {
        self.iter().flat_map(|(modality, codes)| codes.iter().map(move |&code| EventCode { modality, code }))
    }

    pub fn num_events(&self) -> usize {
        self.events.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Checks duplicate-freeness and vocabulary membership.
    pub fn validate(&self, schema: &Schema) -> Result<(), String> {
        for (&k, codes) in &self.events {
            if k.0 >= schema.k() {
                return Err(format!("modality index {} outside schema", k.0));
            }
            let mut seen = HashSet::new();
            for c in codes {
                if c.0 as usize >= schema.vocab_size(k) {
                    return Err(format!("code index {} outside {} vocabulary", c.0, schema.modality_name(k)));
                }
                if !seen.insert(*c) {
                    return Err(format!("duplicate {} code {}", schema.modality_name(k), schema.code_name(EventCode { modality: k, code: *c })));
                }
            }
        }
        Ok(())
    }
}

/// Demographic covariates attached to a patient.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineFeatures {
    /// Multi-hot class indicators, length `m_c`, entries 0 or 1.
    pub categorical: Vec<u8>,
    /// Raw numerical covariates, length `m_u`.
    pub numerical: Vec<f64>,
}

impl BaselineFeatures {
    pub fn new(categorical: Vec<u8>, numerical: Vec<f64>) -> Self {
        Self { categorical, numerical }
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), String> {
        if self.categorical.len() != schema.m_c {
            return Err(format!("categorical length {} != m_c {}", self.categorical.len(), schema.m_c));
        }
        if self.numerical.len() != schema.m_u {
            return Err(format!("numerical length {} != m_u {}", self.numerical.len(), schema.m_u));
        }
        if self.categorical.iter().any(|&c| c > 1) {
            return Err("categorical entries must be 0 or 1".into());
        }
        if self.numerical.iter().any(|x| !x.is_finite()) {
            return Err("numerical entries must be finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub baseline: BaselineFeatures,
    /// Admissions in temporal order.
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn num_events(&self) -> usize {
        self.visits.iter().map(Visit::num_events).sum()
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), String> {
        if self.visits.is_empty() {
            return Err("a record needs at least one visit".into());
        }
        self.baseline.validate(schema)?;
        for (t, v) in self.visits.iter().enumerate() {
            v.validate(schema).map_err(|e| format!("visit {t}: {e}"))?;
        }
        Ok(())
    }
}

/// Records sharing one schema. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    schema: Arc<Schema>,
    records: Vec<PatientRecord>,
}

impl Corpus {
    /// Validates every record against `schema` and checks id uniqueness.
    pub fn new(schema: Arc<Schema>, records: Vec<PatientRecord>) -> Result<Self, RecordsError> {
        schema.validate()?;
        let mut ids = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            r.validate(&schema).map_err(|detail| RecordsError::SchemaMismatch { line: i + 1, detail: format!("record {:?}: {detail}", r.id) })?;
            if !ids.insert(r.id.as_str()) {
                return Err(RecordsError::SchemaMismatch { line: i + 1, detail: format!("duplicate record id {:?}", r.id) });
            }
        }
        Ok(Self { schema, records })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn schema_arc(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }

    /// Subset by record index, preserving the given order.
    pub fn select(&self, indices: &[usize]) -> Corpus {
        Corpus { schema: self.schema.clone(), records: indices.iter().map(|&i| self.records[i].clone()).collect() }
    }

    /// Concatenation of two corpora with the same schema.
    pub fn concat(&self, other: &Corpus) -> Result<Corpus, RecordsError> {
        if self.schema != other.schema {
            return Err(RecordsError::SchemaMismatch { line: 0, detail: "cannot concatenate corpora with different schemas".into() });
        }
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Corpus::new(self.schema.clone(), records)
    }
}

/// Sizes produced by [`split_corpus`] for `n` records: validation and test
/// get `floor(fraction * n)`, train takes the remainder.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3], RecordsError> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !f.is_finite() || *f <= 0.0) || (total - 1.0).abs() > 1e-6 {
        return Err(RecordsError::DegenerateFraction { fractions, n });
    }
    // Relative slack so that fractions written as count/n land on the count.
    let floor = |f: f64| ((f * n as f64) * (1.0 + 1e-12)).floor() as usize;
    let val = floor(fractions[1]);
    let test = floor(fractions[2]);
    let train = n.checked_sub(val + test).unwrap_or(0);
    if train == 0 || val == 0 || test == 0 {
        return Err(RecordsError::DegenerateFraction { fractions, n });
    }
    Ok([train, val, test])
}

/// Seeded disjoint train/validation/test partition. Records keep their
/// original relative order within each split.
pub fn split_corpus(corpus: &Corpus, fractions: [f64; 3], seed: u64) -> Result<(Corpus, Corpus, Corpus), RecordsError> {
    let [n_train, n_val, _] = split_sizes(corpus.len(), fractions)?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((corpus.select(&train), corpus.select(&val), corpus.select(&test)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityUsage {
    pub name: String,
    pub vocab_size: usize,
    pub distinct_codes_used: usize,
    pub events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub patients: usize,
    pub visits: usize,
    pub events: usize,
    /// `events / patients` rounded to the nearest integer.
    pub events_per_patient: usize,
    pub modalities: Vec<ModalityUsage>,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "patients\t{}", self.patients)?;
        writeln!(f, "visits\t{}", self.visits)?;
        writeln!(f, "events\t{}", self.events)?;
        writeln!(f, "events_per_patient\t{}", self.events_per_patient)?;
        for m in &self.modalities {
            writeln!(f, "{}\tvocab={}\tused={}\tevents={}", m.name, m.vocab_size, m.distinct_codes_used, m.events)?;
        }
        Ok(())
    }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let schema = corpus.schema();
    let mut used: Vec<HashSet<CodeId>> = vec![HashSet::new(); schema.k()];
    let mut per_modality = vec![0usize; schema.k()];
    let mut visits = 0;
    let mut events = 0;
    for r in corpus.records() {
        visits += r.visits.len();
        for v in &r.visits {
            for (k, codes) in v.iter() {
                per_modality[k.0] += codes.len();
                events += codes.len();
                used[k.0].extend(codes.iter().copied());
            }
        }
    }
    let patients = corpus.len();
    let events_per_patient = if patients == 0 { 0 } else { (events as f64 / patients as f64).round() as usize };
    CorpusStats {
        patients,
        visits,
        events,
        events_per_patient,
        modalities: schema
            .modality_ids()
            .map(|k| ModalityUsage {
                name: schema.modality_name(k).to_string(),
                vocab_size: schema.vocab_size(k),
                distinct_codes_used: used[k.0].len(),
                events: per_modality[k.0],
            })
            .collect(),
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// dx: D1..D4, med: M1..M3, lab: L1..L3; one categorical and one numerical feature.
    pub fn small_schema() -> Arc<Schema> {
        let m = |name: &str, codes: &[&str]| ModalitySchema { name: name.into(), vocabulary: codes.iter().map(|c| c.to_string()).collect() };
        Arc::new(
            Schema::new(vec![m("dx", &["D1", "D2", "D3", "D4"]), m("med", &["M1", "M2", "M3"]), m("lab", &["L1", "L2", "L3"])], 1, 1)
                .unwrap(),
        )
    }

    pub fn record(id: &str, visits: Vec<Visit>) -> PatientRecord {
        PatientRecord { id: id.into(), baseline: BaselineFeatures::new(vec![0], vec![0.0]), visits }
    }

    pub fn visit(parts: &[(usize, &[u32])]) -> Visit {
        let mut v = Visit::new();
        for &(k, codes) in parts {
            v.set(ModalityId(k), codes.iter().map(|&c| CodeId(c)).collect());
        }
        v
    }
}
