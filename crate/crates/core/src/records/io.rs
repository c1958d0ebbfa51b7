//! Line-delimited JSON corpus files and JSON schema files.
//!
//! One record per line:
//! `{"id":"p1","baseline":{"categorical":[0,1],"numerical":[63.5]},"visits":[{"dx":["D1"],"lab":["L2"]}]}`

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use serde_json::{json, Map, Value};

use super::{BaselineFeatures, CodeId, Corpus, ModalitySchema, PatientRecord, RecordsError, Schema, Visit};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBaseline {
    #[serde(default)]
    categorical: Vec<i64>,
    #[serde(default)]
    numerical: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    baseline: RawBaseline,
    visits: Vec<BTreeMap<String, Vec<String>>>,
}

fn io_err(path: &Path, source: std::io::Error) -> RecordsError {
    RecordsError::Io { path: path.display().to_string(), source }
}

pub fn load_schema(path: impl AsRef<Path>) -> Result<Schema, RecordsError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let schema: Schema = serde_json::from_str(&text).map_err(|e| RecordsError::InvalidSchema(format!("{}: {e}", path.display())))?;
    schema.validate()?;
    Ok(schema)
}

pub fn write_schema(path: impl AsRef<Path>, schema: &Schema) -> Result<(), RecordsError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(schema).expect("schema serializes");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Reads a corpus file. Without a schema, one is inferred from the data:
/// modalities and codes in order of first appearance, feature widths from
/// the first record.
pub fn load_corpus(path: impl AsRef<Path>, schema: Option<&Schema>) -> Result<Corpus, RecordsError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    read_corpus(BufReader::new(file), schema)
}

pub fn read_corpus(reader: impl BufRead, schema: Option<&Schema>) -> Result<Corpus, RecordsError> {
    let mut raw = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| RecordsError::MalformedLine { line: line_no, detail: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(&line).map_err(|e| RecordsError::MalformedLine { line: line_no, detail: e.to_string() })?;
        raw.push((line_no, rec));
    }
    let schema = match schema {
        Some(s) => {
            s.validate()?;
            s.clone()
        }
        None => infer_schema(&raw)?,
    };
    let lookup: Vec<HashMap<&str, CodeId>> = schema
        .modalities
        .iter()
        .map(|m| m.vocabulary.iter().enumerate().map(|(i, c)| (c.as_str(), CodeId(i as u32))).collect())
        .collect();

    let mut records = Vec::with_capacity(raw.len());
    for (line, rec) in raw {
        if rec.visits.is_empty() {
            return Err(RecordsError::MalformedLine { line, detail: format!("record {:?} has no visits", rec.id) });
        }
        let categorical = rec
            .baseline
            .categorical
            .iter()
            .map(|&c| match c {
                0 | 1 => Ok(c as u8),
                other => Err(RecordsError::SchemaMismatch { line, detail: format!("categorical entry {other} is not 0/1") }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if categorical.len() != schema.m_c || rec.baseline.numerical.len() != schema.m_u {
            return Err(RecordsError::SchemaMismatch {
                line,
                detail: format!(
                    "baseline widths ({}, {}) differ from schema ({}, {})",
                    categorical.len(),
                    rec.baseline.numerical.len(),
                    schema.m_c,
                    schema.m_u
                ),
            });
        }
        let mut visits = Vec::with_capacity(rec.visits.len());
        for raw_visit in rec.visits {
            let mut visit = Visit::new();
            for (name, codes) in raw_visit {
                let k = schema
                    .modality(&name)
                    .ok_or_else(|| RecordsError::SchemaMismatch { line, detail: format!("unknown modality {name:?}") })?;
                let mut ids = Vec::with_capacity(codes.len());
                for code in codes {
                    let id = *lookup[k.0]
                        .get(code.as_str())
                        .ok_or_else(|| RecordsError::UnknownCode { line, modality: name.clone(), code: code.clone() })?;
                    if ids.contains(&id) {
                        return Err(RecordsError::SchemaMismatch { line, detail: format!("duplicate {name} code {code:?} within a visit") });
                    }
                    ids.push(id);
                }
                visit.set(k, ids);
            }
            visits.push(visit);
        }
        let record = PatientRecord { id: rec.id, baseline: BaselineFeatures { categorical, numerical: rec.baseline.numerical }, visits };
        record.baseline.validate(&schema).map_err(|detail| RecordsError::SchemaMismatch { line, detail })?;
        records.push(record);
    }
    Corpus::new(Arc::new(schema), records)
}

fn infer_schema(raw: &[(usize, RawRecord)]) -> Result<Schema, RecordsError> {
    let mut modalities: Vec<ModalitySchema> = Vec::new();
    for (_, rec) in raw {
        for visit in &rec.visits {
            for (name, codes) in visit {
                let idx = match modalities.iter().position(|m| &m.name == name) {
                    Some(i) => i,
                    None => {
                        modalities.push(ModalitySchema { name: name.clone(), vocabulary: Vec::new() });
                        modalities.len() - 1
                    }
                };
                for c in codes {
                    if !modalities[idx].vocabulary.contains(c) {
                        modalities[idx].vocabulary.push(c.clone());
                    }
                }
            }
        }
    }
    modalities.retain(|m| !m.vocabulary.is_empty());
    let (m_c, m_u) = raw.first().map_or((0, 0), |(_, r)| (r.baseline.categorical.len(), r.baseline.numerical.len()));
    Schema::new(modalities, m_c, m_u)
}

/// Serializes one record; modalities are emitted in schema order.
pub(crate) fn record_to_json(schema: &Schema, record: &PatientRecord) -> Value {
    let visits: Vec<Value> = record
        .visits
        .iter()
        .map(|v| {
            let mut obj = Map::new();
            for (k, codes) in v.iter() {
                let names: Vec<Value> = codes
                    .iter()
                    .map(|&c| Value::String(schema.modalities[k.0].vocabulary[c.0 as usize].clone()))
                    .collect();
                obj.insert(schema.modality_name(k).to_string(), Value::Array(names));
            }
            Value::Object(obj)
        })
        .collect();
    json!({
        "id": record.id,
        "baseline": {
            "categorical": record.baseline.categorical,
            "numerical": record.baseline.numerical,
        },
        "visits": visits,
    })
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<(), RecordsError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in corpus.records() {
        let line = serde_json::to_string(&record_to_json(corpus.schema(), r)).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::fixtures::*;
    use crate::records::ModalityId;
    use proptest::prelude::*;

    fn parse(text: &str, schema: Option<&Schema>) -> Result<Corpus, RecordsError> {
        read_corpus(text.as_bytes(), schema)
    }

    #[test]
    fn minimal_one_line_file() {
        let c = parse(r#"{"id":"a","baseline":{"categorical":[1],"numerical":[2.5]},"visits":[{"dx":["D1"]}]}"#, Some(&small_schema())).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.records()[0].visits.len(), 1);
    }

    #[test]
    fn unknown_code_is_named() {
        let err = parse(r#"{"id":"a","baseline":{"categorical":[1],"numerical":[2.5]},"visits":[{"dx":["D999"]}]}"#, Some(&small_schema()))
            .unwrap_err();
        match err {
            RecordsError::UnknownCode { code, line, .. } => {
                assert_eq!(code, "D999");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"baseline\":{\"categorical\":[1],\"numerical\":[0]},\"visits\":[{\"dx\":[\"D1\"]}]}\n{not json";
        match parse(text, Some(&small_schema())).unwrap_err() {
            RecordsError::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn wrong_baseline_width_is_schema_mismatch() {
        let err = parse(r#"{"id":"a","baseline":{"categorical":[1,0],"numerical":[0]},"visits":[{"dx":["D1"]}]}"#, Some(&small_schema()));
        assert!(matches!(err, Err(RecordsError::SchemaMismatch { line: 1, .. })));
    }

    #[test]
    fn duplicate_ids_and_codes_are_rejected() {
        let dup_code = r#"{"id":"a","baseline":{"categorical":[1],"numerical":[0]},"visits":[{"dx":["D1","D1"]}]}"#;
        assert!(matches!(parse(dup_code, Some(&small_schema())), Err(RecordsError::SchemaMismatch { .. })));
        let line = r#"{"id":"a","baseline":{"categorical":[1],"numerical":[0]},"visits":[{"dx":["D1"]}]}"#;
        assert!(parse(&format!("{line}\n{line}"), Some(&small_schema())).is_err());
    }

    #[test]
    fn empty_modality_list_is_dropped() {
        let c = parse(r#"{"id":"a","baseline":{"categorical":[0],"numerical":[0]},"visits":[{"dx":["D1"],"med":[]}]}"#, Some(&small_schema()))
            .unwrap();
        assert!(!c.records()[0].visits[0].has(ModalityId(1)));
    }

    #[test]
    fn schema_is_inferred_when_absent() {
        let c = parse(r#"{"id":"a","baseline":{"categorical":[],"numerical":[]},"visits":[{"lab":["X","Y"]},{"dx":["Z"]}]}"#, None).unwrap();
        assert_eq!(c.schema().modalities[0].name, "lab");
        assert_eq!(c.schema().modalities[1].vocabulary, vec!["Z".to_string()]);
    }

    fn arb_record(i: usize) -> impl Strategy<Value = PatientRecord> {
        let visit = proptest::collection::vec(proptest::sample::subsequence(vec![0u32, 1, 2], 0..=3), 3).prop_map(|mods| {
            let mut v = Visit::new();
            for (k, codes) in mods.into_iter().enumerate() {
                v.set(ModalityId(k), codes.into_iter().map(CodeId).collect());
            }
            if v.is_empty() {
                v.set(ModalityId(0), vec![CodeId(3)]);
            }
            v
        });
        (proptest::collection::vec(visit, 1..5), 0u8..2, -1e6f64..1e6).prop_map(move |(visits, c, x)| PatientRecord {
            id: format!("r{i}"),
            baseline: BaselineFeatures::new(vec![c], vec![x]),
            visits,
        })
    }

    proptest! {
        #[test]
        fn write_then_load_is_identity(records in (0usize..6).prop_flat_map(|n| (0..n).map(arb_record).collect::<Vec<_>>())) {
            let schema = small_schema();
            let corpus = Corpus::new(schema.clone(), records).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            write_corpus(&path, &corpus).unwrap();
            let back = load_corpus(&path, Some(&schema)).unwrap();
            prop_assert_eq!(back, corpus);
        }
    }
}
