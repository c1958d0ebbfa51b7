//! Synthetic record process with closed-form conditionals.
//!
//! Every visit carries exactly one code of the primary modality (index 0),
//! drawn from a first-order Markov chain whose start distribution may depend
//! on categorical baseline features. Every other modality is coupled to the
//! visit's primary code: with probability `presence` the modality appears and
//! `draws` codes are sampled (with replacement, then deduplicated) from the
//! coupling row of the primary code.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BaselineFeatures, CodeId, Corpus, EventCode, ModalityId, ModalitySchema, PatientRecord, RecordsError, Schema, Visit};

const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleModality {
    pub name: String,
    pub vocab_size: usize,
    /// Codes are named `{prefix}{index}`.
    pub prefix: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingTable {
    pub modality: usize,
    pub presence: f64,
    pub draws: usize,
    /// One categorical row per primary code over this modality's vocabulary.
    pub rows: Vec<Vec<f64>>,
}

/// Replaces the first-visit distribution when `categorical[feature] == 1`.
/// The first matching effect in list order wins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineEffect {
    pub feature: usize,
    pub initial: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub modalities: Vec<OracleModality>,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    #[serde(default)]
    pub couplings: Vec<CouplingTable>,
    #[serde(default)]
    pub baseline_effects: Vec<BaselineEffect>,
    /// `visit_counts[i]` is the probability of a record with `i + 1` visits.
    pub visit_counts: Vec<f64>,
    #[serde(default)]
    pub m_c: usize,
    #[serde(default)]
    pub m_u: usize,
    #[serde(default)]
    pub seed: u64,
}

fn check_row(row: &[f64], len: usize, what: &str) -> Result<(), RecordsError> {
    if row.len() != len {
        return Err(RecordsError::InvalidSpec(format!("{what}: expected {len} entries, found {}", row.len())));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(RecordsError::InvalidSpec(format!("{what}: entries must be finite and non-negative")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(RecordsError::InvalidSpec(format!("{what}: sums to {total}, not 1")));
    }
    Ok(())
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding slack: fall back to the last index with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl OracleSpec {
    pub fn validate(&self) -> Result<(), RecordsError> {
        if self.modalities.is_empty() {
            return Err(RecordsError::InvalidSpec("no modalities".into()));
        }
        if self.modalities.iter().any(|m| m.vocab_size == 0) {
            return Err(RecordsError::InvalidSpec("empty modality vocabulary".into()));
        }
        let n = self.modalities[0].vocab_size;
        check_row(&self.initial, n, "initial")?;
        if self.transition.len() != n {
            return Err(RecordsError::InvalidSpec(format!("transition needs {n} rows")));
        }
        for (i, row) in self.transition.iter().enumerate() {
            check_row(row, n, &format!("transition row {i}"))?;
        }
        let mut seen = BTreeSet::new();
        for c in &self.couplings {
            if c.modality == 0 || c.modality >= self.modalities.len() {
                return Err(RecordsError::InvalidSpec(format!("coupling targets invalid modality {}", c.modality)));
            }
            if !seen.insert(c.modality) {
                return Err(RecordsError::InvalidSpec(format!("modality {} coupled twice", c.modality)));
            }
            if !(0.0..=1.0).contains(&c.presence) || c.draws == 0 {
                return Err(RecordsError::InvalidSpec(format!("coupling {}: presence in [0,1] and draws >= 1 required", c.modality)));
            }
            if c.rows.len() != n {
                return Err(RecordsError::InvalidSpec(format!("coupling {} needs {n} rows", c.modality)));
            }
            let width = self.modalities[c.modality].vocab_size;
            for (i, row) in c.rows.iter().enumerate() {
                check_row(row, width, &format!("coupling {} row {i}", c.modality))?;
            }
        }
        for e in &self.baseline_effects {
            if e.feature >= self.m_c {
                return Err(RecordsError::InvalidSpec(format!("effect on categorical feature {} but m_c = {}", e.feature, self.m_c)));
            }
            check_row(&e.initial, n, &format!("effect of feature {}", e.feature))?;
        }
        check_row(&self.visit_counts, self.visit_counts.len(), "visit_counts")?;
        if self.visit_counts.is_empty() {
            return Err(RecordsError::InvalidSpec("visit_counts is empty".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema {
            modalities: self
                .modalities
                .iter()
                .map(|m| ModalitySchema { name: m.name.clone(), vocabulary: (0..m.vocab_size).map(|i| format!("{}{i}", m.prefix)).collect() })
                .collect(),
            m_c: self.m_c,
            m_u: self.m_u,
            categorical_fields: Vec::new(),
            numerical_fields: Vec::new(),
        }
    }

    fn coupling(&self, modality: ModalityId) -> Option<&CouplingTable> {
        self.couplings.iter().find(|c| c.modality == modality.0)
    }

    pub fn initial_distribution(&self, baseline: &BaselineFeatures) -> &[f64] {
        self.baseline_effects
            .iter()
            .find(|e| baseline.categorical.get(e.feature) == Some(&1))
            .map_or(&self.initial, |e| &e.initial)
    }

    /// Primary code of a visit; every oracle visit has exactly one.
    pub fn primary_code(visit: &Visit) -> Option<CodeId> {
        visit.codes(ModalityId(0)).first().copied()
    }

    /// Distribution of the next visit's primary code.
    pub fn next_primary_distribution(&self, baseline: &BaselineFeatures, history: &[Visit]) -> Vec<f64> {
        match history.last().and_then(Self::primary_code) {
            Some(prev) => self.transition[prev.0 as usize].clone(),
            None => self.initial_distribution(baseline).to_vec(),
        }
    }

    /// Probability that `event` is present in a visit whose primary code is `primary`.
    pub fn coupled_probability(&self, primary: CodeId, event: EventCode) -> f64 {
        if event.modality.0 == 0 {
            return if event.code == primary { 1.0 } else { 0.0 };
        }
        match self.coupling(event.modality) {
            Some(c) => {
                let q = c.rows[primary.0 as usize][event.code.0 as usize];
                c.presence * (1.0 - (1.0 - q).powi(c.draws as i32))
            }
            None => 0.0,
        }
    }

    /// Probability that `event` appears in the visit following `history`.
    pub fn event_probability(&self, baseline: &BaselineFeatures, history: &[Visit], event: EventCode) -> f64 {
        let next = self.next_primary_distribution(baseline, history);
        next.iter()
            .enumerate()
            .map(|(s, &p)| if p == 0.0 { 0.0 } else { p * self.coupled_probability(CodeId(s as u32), event) })
            .sum()
    }

    /// Successor of a deterministic chain state, if the row is a point mass.
    pub fn deterministic_successor(&self, code: CodeId) -> Option<CodeId> {
        let row = &self.transition[code.0 as usize];
        row.iter().position(|&p| (p - 1.0).abs() <= ROW_TOLERANCE).map(|i| CodeId(i as u32))
    }

    fn sample_baseline(&self, rng: &mut impl Rng) -> BaselineFeatures {
        let normal = Normal::new(50.0, 10.0).expect("valid normal");
        BaselineFeatures {
            categorical: (0..self.m_c).map(|_| u8::from(rng.random_bool(0.5))).collect(),
            numerical: (0..self.m_u).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn sample_visit(&self, primary: CodeId, rng: &mut impl Rng) -> Visit {
        let mut visit = Visit::new().with(ModalityId(0), vec![primary]);
        for k in 1..self.modalities.len() {
            let Some(c) = self.coupling(ModalityId(k)) else { continue };
            if !rng.random_bool(c.presence) {
                continue;
            }
            let row = &c.rows[primary.0 as usize];
            let codes: BTreeSet<u32> = (0..c.draws).map(|_| sample_categorical(row, rng) as u32).collect();
            visit.set(ModalityId(k), codes.into_iter().map(CodeId).collect());
        }
        visit
    }

    pub fn sample_record(&self, id: String, rng: &mut impl Rng) -> PatientRecord {
        let baseline = self.sample_baseline(rng);
        self.sample_record_with(id, baseline, rng)
    }

    pub fn sample_record_with(&self, id: String, baseline: BaselineFeatures, rng: &mut impl Rng) -> PatientRecord {
        let n_visits = sample_categorical(&self.visit_counts, rng) + 1;
        let mut visits: Vec<Visit> = Vec::with_capacity(n_visits);
        for _ in 0..n_visits {
            let dist = self.next_primary_distribution(&baseline, &visits);
            let primary = CodeId(sample_categorical(&dist, rng) as u32);
            visits.push(self.sample_visit(primary, rng));
        }
        PatientRecord { id, baseline, visits }
    }

    /// Single-modality chain of `n` codes where each code has exactly one
    /// successor (a random cyclic permutation); 2 to 6 visits per record.
    pub fn deterministic_chain(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC4A1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut transition = vec![vec![0.0; n]; n];
        for i in 0..n {
            transition[order[i]][order[(i + 1) % n]] = 1.0;
        }
        Self {
            modalities: vec![OracleModality { name: "dx".into(), vocab_size: n, prefix: "D".into() }],
            initial: vec![1.0 / n as f64; n],
            transition,
            couplings: Vec::new(),
            baseline_effects: Vec::new(),
            visit_counts: vec![0.0, 0.2, 0.2, 0.2, 0.2, 0.2],
            m_c: 0,
            m_u: 0,
            seed,
        }
    }

    /// Single modality with uniform start and transition distributions.
    pub fn uniform(n: usize, seed: u64) -> Self {
        Self {
            modalities: vec![OracleModality { name: "dx".into(), vocab_size: n, prefix: "D".into() }],
            initial: vec![1.0 / n as f64; n],
            transition: vec![vec![1.0 / n as f64; n]; n],
            couplings: Vec::new(),
            baseline_effects: Vec::new(),
            visit_counts: vec![0.5, 0.5],
            m_c: 0,
            m_u: 0,
            seed,
        }
    }

    /// Diagnosis chain with a lab modality whose code follows the visit's
    /// diagnosis with probability `strength`; other lab codes share the rest.
    ///
    /// Transitions put 0.4 on a fixed successor and spread 0.6 uniformly, so
    /// the next diagnosis is only partly predictable from history.
    pub fn coupled(n_dx: usize, n_lab: usize, strength: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_0B1E);
        let mut order: Vec<usize> = (0..n_dx).collect();
        order.shuffle(&mut rng);
        let mut transition = vec![vec![0.6 / n_dx as f64; n_dx]; n_dx];
        for i in 0..n_dx {
            transition[order[i]][order[(i + 1) % n_dx]] += 0.4;
        }
        let rest = if n_lab > 1 { (1.0 - strength) / (n_lab - 1) as f64 } else { 0.0 };
        let rows = (0..n_dx)
            .map(|s| (0..n_lab).map(|l| if l == s % n_lab { if n_lab > 1 { strength } else { 1.0 } } else { rest }).collect())
            .collect();
        Self {
            modalities: vec![
                OracleModality { name: "dx".into(), vocab_size: n_dx, prefix: "D".into() },
                OracleModality { name: "lab".into(), vocab_size: n_lab, prefix: "L".into() },
            ],
            initial: vec![1.0 / n_dx as f64; n_dx],
            transition,
            couplings: vec![CouplingTable { modality: 1, presence: 1.0, draws: 1, rows }],
            baseline_effects: Vec::new(),
            visit_counts: vec![0.0, 0.25, 0.25, 0.25, 0.25],
            m_c: 0,
            m_u: 0,
            seed,
        }
    }

    /// Four-modality process with demographic effects, used by the CLI and
    /// the end-to-end tests. Categorical feature 0 moves first visits onto the
    /// lower half of the diagnosis vocabulary; otherwise they start in the
    /// upper half.
    pub fn demo(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD3_70);
        let sizes = [("dx", 24usize, "D"), ("med", 16, "M"), ("proc", 12, "P"), ("lab", 16, "L")];
        let n = sizes[0].1;
        let mut transition = vec![vec![0.0; n]; n];
        for (i, row) in transition.iter_mut().enumerate() {
            row[(i + 1) % n] += 0.5;
            let mut others: Vec<usize> = (0..n).filter(|&j| j != (i + 1) % n).collect();
            others.shuffle(&mut rng);
            for &j in &others[..3] {
                row[j] += 0.5 / 3.0;
            }
        }
        let half = n / 2;
        let upper = (0..n).map(|i| if i >= half { 1.0 / (n - half) as f64 } else { 0.0 }).collect();
        let lower = (0..n).map(|i| if i < half { 1.0 / half as f64 } else { 0.0 }).collect();
        let couplings = [(1usize, 0.8, 2usize), (2, 0.5, 1), (3, 0.9, 3)]
            .into_iter()
            .map(|(k, presence, draws)| {
                let width = sizes[k].1;
                let rows = (0..n)
                    .map(|s| {
                        let mut row = vec![0.3 / width as f64; width];
                        row[(s * 7 + k) % width] += 0.7;
                        row
                    })
                    .collect();
                CouplingTable { modality: k, presence, draws, rows }
            })
            .collect();
        Self {
            modalities: sizes.iter().map(|&(name, vocab_size, prefix)| OracleModality { name: name.into(), vocab_size, prefix: prefix.into() }).collect(),
            initial: upper,
            transition,
            couplings,
            baseline_effects: vec![BaselineEffect { feature: 0, initial: lower }],
            visit_counts: vec![0.2, 0.3, 0.3, 0.2],
            m_c: 2,
            m_u: 1,
            seed,
        }
    }
}

/// Draws `n_patients` i.i.d. records (ids `o0`, `o1`, ...) seeded by `spec.seed`.
pub fn generate_oracle_corpus(spec: &OracleSpec, n_patients: usize) -> Result<Corpus, RecordsError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let records = (0..n_patients).map(|i| spec.sample_record(format!("o{i}"), &mut rng)).collect();
    Corpus::new(Arc::new(spec.schema()), records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::corpus_stats;

    #[test]
    fn presets_are_valid() {
        for spec in [OracleSpec::deterministic_chain(50, 1), OracleSpec::uniform(50, 1), OracleSpec::coupled(10, 10, 0.9, 1), OracleSpec::demo(1)] {
            spec.validate().unwrap();
        }
    }

    #[test]
    fn non_normalized_row_is_invalid() {
        let mut spec = OracleSpec::uniform(4, 0);
        spec.transition[2][0] += 1e-6;
        assert!(matches!(spec.validate(), Err(RecordsError::InvalidSpec(_))));
    }

    #[test]
    fn deterministic_chain_records_follow_the_chain() {
        let spec = OracleSpec::deterministic_chain(50, 9);
        let c = generate_oracle_corpus(&spec, 300).unwrap();
        for r in c.records() {
            for w in r.visits.windows(2) {
                let a = OracleSpec::primary_code(&w[0]).unwrap();
                let b = OracleSpec::primary_code(&w[1]).unwrap();
                assert_eq!(spec.deterministic_successor(a), Some(b));
            }
        }
    }

    #[test]
    fn uniform_next_event_frequencies_within_three_sigma() {
        let n = 50;
        let spec = OracleSpec::uniform(n, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let history = vec![Visit::new().with(ModalityId(0), vec![CodeId(3)])];
        let baseline = BaselineFeatures::default();
        let draws = 10_000;
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            let dist = spec.next_primary_distribution(&baseline, &history);
            counts[sample_categorical(&dist, &mut rng)] += 1;
        }
        let p = 1.0 / n as f64;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        for c in counts {
            assert!((c as f64 / draws as f64 - p).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn coupling_co_occurrence_rate() {
        // FEVER = D0, TEMP = L0 with strength 0.9.
        let spec = OracleSpec::coupled(10, 10, 0.9, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let trials = 10_000;
        let temp = EventCode { modality: ModalityId(1), code: CodeId(0) };
        let hits = (0..trials).filter(|_| spec.sample_visit(CodeId(0), &mut rng).codes(temp.modality).contains(&temp.code)).count();
        assert!((hits as f64 / trials as f64 - 0.9).abs() <= 0.02);
        assert!((spec.coupled_probability(CodeId(0), temp) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn empirical_event_frequencies_track_oracle_probabilities() {
        let spec = OracleSpec::demo(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let history = vec![spec.sample_visit(CodeId(5), &mut rng)];
        let baseline = BaselineFeatures::new(vec![0, 0], vec![50.0]);
        let n = 20_000;
        let events: Vec<EventCode> = (1..4).flat_map(|k| (0..3).map(move |c| EventCode { modality: ModalityId(k), code: CodeId(c) })).collect();
        let mut hits = vec![0usize; events.len()];
        for _ in 0..n {
            let dist = spec.next_primary_distribution(&baseline, &history);
            let v = spec.sample_visit(CodeId(sample_categorical(&dist, &mut rng) as u32), &mut rng);
            for (h, e) in hits.iter_mut().zip(&events) {
                *h += usize::from(v.codes(e.modality).contains(&e.code));
            }
        }
        for (h, e) in hits.iter().zip(&events) {
            let p = spec.event_probability(&baseline, &history, *e);
            let tol = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
            assert!((*h as f64 / n as f64 - p).abs() <= tol.max(1e-12), "{e:?}: {} vs {p}", *h as f64 / n as f64);
        }
    }

    #[test]
    fn stats_match_brute_force_tally() {
        let c = generate_oracle_corpus(&OracleSpec::demo(3), 100).unwrap();
        let s = corpus_stats(&c);
        let mut visits = 0;
        let mut events = 0;
        for r in c.records() {
            for v in &r.visits {
                visits += 1;
                for k in 0..4 {
                    events += v.codes(ModalityId(k)).len();
                }
            }
        }
        assert_eq!((s.patients, s.visits, s.events), (100, visits, events));
    }

    #[test]
    fn baseline_effect_switches_start_distribution() {
        let spec = OracleSpec::demo(0);
        let on = BaselineFeatures::new(vec![1, 0], vec![40.0]);
        let off = BaselineFeatures::new(vec![0, 1], vec![40.0]);
        assert!(spec.initial_distribution(&on)[0] > 0.0);
        assert_eq!(spec.initial_distribution(&off)[0], 0.0);
    }
}
