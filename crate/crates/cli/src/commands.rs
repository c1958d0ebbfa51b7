use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ehrgen_core::generate::{complete_record, generate_cohort, sample_baselines, GenerationConfig};
use ehrgen_core::metrics::{evaluate_corpus, PerplexityReport};
use ehrgen_core::model::{load_checkpoint, save_checkpoint, train, TrainConfig};
use ehrgen_core::privacy::{
    build_mi_dataset, delta_grid, run_attribute_attack, run_membership_attack, sample_subset, train_shadow, AttributeAttackConfig, AttributeAttackResult, MembershipAttackResult,
    MiClassifierConfig,
};
use ehrgen_core::records::{generate_oracle_corpus, load_corpus, load_schema, split_corpus, write_corpus, write_schema, Corpus, EventCode, Schema};
use ehrgen_core::rng::{derive_indexed, derive_seed, rng_for};
use ehrgen_core::utility::{run_utility_suite, Arm, UtilityConfig, UtilityResult};
use ehrgen_core::Model;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{GenerateMode, RunConfig};
use crate::{Cli, CliError, Command};

/// Effective settings of one invocation, after flags override the config.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub n: Option<usize>,
}

impl Context {
    pub fn new(config: RunConfig, out: Option<PathBuf>, checkpoint: Option<PathBuf>, seed: Option<u64>, n: Option<usize>) -> Result<Self, CliError> {
        config.validate()?;
        let out = out.or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
        let checkpoint = checkpoint.unwrap_or_else(|| out.join("checkpoint.json"));
        let seed = seed.unwrap_or(config.seed);
        Ok(Self { config, out, checkpoint, seed, n })
    }

    pub fn from_cli(cli: &Cli) -> Result<Self, CliError> {
        let config = match &cli.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        Self::new(config, cli.out.clone(), cli.checkpoint.clone(), cli.seed, cli.n)
    }

    /// Seed of a command's substream.
    pub fn stream(&self, name: &str) -> u64 {
        derive_seed(self.seed, name)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), source }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numeric(format!("{}: {e}", path.display())))?;
    write_text(path, &(text + "\n"))
}

fn write_jsonl<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<(), CliError> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(&row).map_err(|e| CliError::Numeric(format!("{}: {e}", path.display())))?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn create_out(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn required<'a>(field: &str, path: &'a Option<PathBuf>) -> Result<&'a PathBuf, CliError> {
    path.as_ref().ok_or_else(|| CliError::Config { path: field.into(), message: "required by this command".into() })
}

fn configured_schema(ctx: &Context) -> Result<Option<Schema>, CliError> {
    ctx.config.data.schema.as_ref().map(load_schema).transpose().map_err(Into::into)
}

/// Loads a corpus under `schema`, or infers the schema from the file.
fn corpus_at(path: &Path, schema: Option<&Schema>) -> Result<Corpus, CliError> {
    Ok(load_corpus(path, schema)?)
}

fn load_model(ctx: &Context) -> Result<Model, CliError> {
    if !ctx.checkpoint.is_file() {
        return Err(CliError::Config { path: "--checkpoint".into(), message: format!("{} does not exist", ctx.checkpoint.display()) });
    }
    let model: Model = load_checkpoint(&ctx.checkpoint)?;
    if let Some(schema) = configured_schema(ctx)? {
        if schema.hash() != model.schema_hash() {
            return Err(CliError::Data(format!("schema hash mismatch: checkpoint {}, data.schema {}", model.schema_hash(), schema.hash())));
        }
    }
    Ok(model)
}

/// The three real corpora under one schema: configured, or inferred from `data.train`.
fn real_corpora(ctx: &Context, need_val: bool) -> Result<(Corpus, Corpus, Option<Corpus>), CliError> {
    let data = &ctx.config.data;
    let schema = configured_schema(ctx)?;
    let train_set = corpus_at(required("data.train", &data.train)?, schema.as_ref())?;
    let schema = train_set.schema().clone();
    let val = match &data.val {
        Some(p) if need_val => corpus_at(p, Some(&schema))?,
        _ => Corpus::new(train_set.schema_arc().clone(), Vec::new())?,
    };
    let test = data.test.as_ref().map(|p| corpus_at(p, Some(&schema))).transpose()?;
    Ok((train_set, val, test))
}

/// Writes `checkpoint.json`, `vocab.txt` and `train_log.jsonl`.
pub fn cmd_train(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let (train_set, val, _) = real_corpora(ctx, true)?;
    let cfg = TrainConfig { seed: ctx.stream("train"), ..ctx.config.train.clone() };
    let outcome = train::<f32>(&train_set, &val, &ctx.config.model, &cfg)?;
    if let Some(dir) = ctx.checkpoint.parent() {
        create_out(dir)?;
    }
    save_checkpoint(&outcome.model, &ctx.checkpoint)?;
    let vocab = ctx.path("vocab.txt");
    write_text(&vocab, &(outcome.model.vocab().tokens().join("\n") + "\n"))?;
    let log = ctx.path("train_log.jsonl");
    write_jsonl(&log, &outcome.log)?;
    let steps = ctx.path("train_steps.tsv");
    let mut text = String::from("step\tloss\n");
    for (i, l) in outcome.step_losses.iter().enumerate() {
        text.push_str(&format!("{i}\t{l}\n"));
    }
    write_text(&steps, &text)?;
    println!("trained {} epochs, best epoch {}", outcome.log.len(), outcome.best_epoch);
    Ok(vec![ctx.checkpoint.clone(), vocab, log, steps])
}

#[derive(Serialize)]
struct ProvenanceEvent<'a> {
    visit: usize,
    modality: &'a str,
    code: &'a str,
}

#[derive(Serialize)]
struct Provenance<'a> {
    id: &'a str,
    mode: GenerateMode,
    /// Index into the baseline sample (scratch) or the input corpus (complete).
    source: usize,
    truncated: bool,
    imputed: Vec<ProvenanceEvent<'a>>,
}

/// Writes `synthetic.jsonl` and the per-record `provenance.jsonl` sidecar.
pub fn cmd_generate(ctx: &Context, mode: GenerateMode) -> Result<Vec<PathBuf>, CliError> {
    let model = load_model(ctx)?;
    let schema = model.schema().clone();
    let gen = GenerationConfig { seed: ctx.stream("generate"), ..ctx.config.generation.clone() };
    let data = &ctx.config.data;
    let (corpus, truncated, imputed) = match mode {
        GenerateMode::Scratch => {
            let n = ctx.n.unwrap_or(ctx.config.generate.n);
            let baselines = match &data.train {
                Some(p) => sample_baselines(&corpus_at(p, Some(&schema))?, n, &mut rng_for(ctx.seed, "generate-baselines")),
                None if schema.m_c + schema.m_u == 0 => vec![Default::default(); n],
                None => return Err(CliError::Config { path: "data.train".into(), message: "baselines are sampled from the training corpus".into() }),
            };
            let records = generate_cohort(&model, &baselines, "syn", &gen)?;
            let truncated = records.iter().map(|r| r.truncated).collect::<Vec<_>>();
            let imputed = vec![Vec::new(); records.len()];
            (Corpus::new(schema.clone(), records.into_iter().map(|r| r.record).collect())?, truncated, imputed)
        }
        GenerateMode::Complete => {
            let input = corpus_at(ctx.config.generate.input.as_ref().or(data.test.as_ref()).ok_or_else(|| CliError::Config { path: "generate.input".into(), message: "complete mode needs generate.input or data.test".into() })?, Some(&schema))?;
            let policy = &ctx.config.generate.policy;
            let done = input
                .records()
                .par_iter()
                .enumerate()
                .map(|(i, r)| complete_record(&model, r, policy, &gen, &mut ChaCha8Rng::seed_from_u64(derive_indexed(gen.seed, i as u64))))
                .collect::<Result<Vec<_>, _>>()?;
            let truncated = done.iter().map(|c| c.truncated).collect();
            let imputed = done.iter().map(|c| c.imputed.clone()).collect();
            (Corpus::new(schema.clone(), done.into_iter().map(|c| c.record).collect())?, truncated, imputed)
        }
    };
    create_out(&ctx.out)?;
    let synthetic = ctx.path("synthetic.jsonl");
    write_corpus(&synthetic, &corpus)?;
    let provenance = ctx.path("provenance.jsonl");
    let rows = corpus.records().iter().zip(&truncated).zip(&imputed).enumerate().map(|(i, ((r, &truncated), events))| Provenance {
        id: &r.id,
        mode,
        source: i,
        truncated,
        imputed: events.iter().map(|e| ProvenanceEvent { visit: e.visit, modality: schema.modality_name(e.modality), code: schema.code_name(EventCode { modality: e.modality, code: e.code }) }).collect(),
    });
    write_jsonl(&provenance, rows)?;
    println!("wrote {} records ({} truncated)", corpus.len(), truncated.iter().filter(|&&t| t).count());
    Ok(vec![synthetic, provenance])
}

/// Writes `perplexity_report.json` and the one-row `perplexity_table.tsv`.
pub fn write_perplexity_report(out: &Path, label: &str, report: &PerplexityReport) -> Result<Vec<PathBuf>, CliError> {
    let json_path = out.join("perplexity_report.json");
    write_json(&json_path, report)?;
    let tsv = out.join("perplexity_table.tsv");
    write_text(&tsv, &PerplexityReport::table_tsv(&[(label, report)]))?;
    Ok(vec![json_path, tsv])
}

pub fn cmd_evaluate(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let model = load_model(ctx)?;
    let path = ctx.config.evaluate.corpus.as_ref().or(ctx.config.data.test.as_ref()).ok_or_else(|| CliError::Config { path: "evaluate.corpus".into(), message: "evaluate needs evaluate.corpus or data.test".into() })?;
    let corpus = corpus_at(path, Some(model.schema()))?;
    let report = evaluate_corpus(&model, &corpus, ctx.stream("evaluate"))?;
    let files = write_perplexity_report(&ctx.out, "model", &report)?;
    print!("{}", PerplexityReport::table_tsv(&[("model", &report)]));
    Ok(files)
}

fn synthetic_corpus(ctx: &Context, schema: &Schema) -> Result<Corpus, CliError> {
    let path = ctx.config.data.synthetic.clone().unwrap_or_else(|| ctx.path("synthetic.jsonl"));
    if !path.is_file() {
        return Err(CliError::Config { path: "data.synthetic".into(), message: format!("{} does not exist", path.display()) });
    }
    corpus_at(&path, Some(schema))
}

/// Writes `mi_result.json` and `mi_roc.tsv`.
pub fn write_mi_report(out: &Path, result: &MembershipAttackResult) -> Result<Vec<PathBuf>, CliError> {
    let json_path = out.join("mi_result.json");
    write_json(&json_path, result)?;
    let roc = out.join("mi_roc.tsv");
    write_text(&roc, &result.roc_tsv())?;
    Ok(vec![json_path, roc])
}

pub fn cmd_attack_mi(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let (members, _, test) = real_corpora(ctx, false)?;
    let nonmembers = test.ok_or_else(|| CliError::Config { path: "data.test".into(), message: "required by this command".into() })?;
    let synthetic = synthetic_corpus(ctx, members.schema())?;
    let seed = ctx.stream("attack-mi");
    let mut shadow_cfg = ctx.config.attack.mi.shadow.clone();
    shadow_cfg.train.seed = seed;
    let shadow = train_shadow(&synthetic, &shadow_cfg)?;
    let in_set = sample_subset(&synthetic, nonmembers.len(), derive_seed(seed, "subset"));
    let dataset = build_mi_dataset(&shadow, &in_set, &nonmembers)?;
    let clf = MiClassifierConfig { seed: derive_seed(seed, "classifier"), ..ctx.config.attack.mi.classifier.clone() };
    let result = run_membership_attack(&shadow, &dataset, &members, &nonmembers, &clf)?;
    let files = write_mi_report(&ctx.out, &result)?;
    println!("membership AUC {:.4} over {} members and {} non-members", result.auc, members.len(), nonmembers.len());
    Ok(files)
}

/// Writes `ai_result.json` and `ai_sweep.tsv`.
pub fn write_ai_report(out: &Path, result: &AttributeAttackResult) -> Result<Vec<PathBuf>, CliError> {
    let json_path = out.join("ai_result.json");
    // JSON has no infinities; the sentinels are written as strings.
    let deltas: Vec<serde_json::Value> = result.deltas.iter().map(|&d| if d.is_finite() { json!(d) } else { json!(d.to_string()) }).collect();
    let rates = |arm: &[ehrgen_core::privacy::RatePoint]| arm.iter().map(|p| json!({ "tpr": p.tpr, "fpr": p.fpr })).collect::<Vec<_>>();
    let value = json!({
        "deltas": deltas,
        "treatment": rates(&result.treatment),
        "control": rates(&result.control),
        "n_hidden": result.n_hidden,
        "n_decoys": result.n_decoys,
    });
    write_json(&json_path, &value)?;
    let sweep = out.join("ai_sweep.tsv");
    write_text(&sweep, &result.sweep_tsv())?;
    Ok(vec![json_path, sweep])
}

pub fn cmd_attack_ai(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let (train_real, _, test) = real_corpora(ctx, false)?;
    let test_real = test.ok_or_else(|| CliError::Config { path: "data.test".into(), message: "required by this command".into() })?;
    let synthetic = synthetic_corpus(ctx, train_real.schema())?;
    let ai = &ctx.config.attack.ai;
    let deltas = delta_grid(ai.delta_min, ai.delta_max, ai.delta_step);
    let cfg = AttributeAttackConfig { models: ai.models.clone(), hide_fraction: ai.hide_fraction, seed: ctx.stream("attack-ai") };
    let result = run_attribute_attack(&synthetic, &train_real, &test_real, &deltas, &cfg)?;
    let files = write_ai_report(&ctx.out, &result)?;
    print!("{}", result.sweep_tsv());
    Ok(files)
}

/// The utility config a run uses; arms default to one all-real arm.
pub fn utility_config(ctx: &Context, n_train: usize) -> (UtilityConfig, Vec<Arm>) {
    let u = &ctx.config.utility;
    let cfg = UtilityConfig {
        predictor: u.predictor.clone(),
        generation: ctx.config.generation.clone(),
        ks: u.ks.clone(),
        bootstrap_resamples: u.bootstrap_resamples,
        seed: ctx.stream("utility"),
    };
    let arms = if u.arms.is_empty() { vec![Arm { n_syn: 0, n_real: n_train }] } else { u.arms.clone() };
    (cfg, arms)
}

pub fn cmd_utility(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let model = load_model(ctx)?;
    let schema = model.schema().as_ref().clone();
    let data = &ctx.config.data;
    let train_set = corpus_at(required("data.train", &data.train)?, Some(&schema))?;
    let test = corpus_at(required("data.test", &data.test)?, Some(&schema))?;
    let (cfg, arms) = utility_config(ctx, train_set.len());
    let results = run_utility_suite(&model, &train_set, &test, &arms, &cfg)?;
    create_out(&ctx.out)?;
    let json_path = ctx.path("utility.json");
    write_json(&json_path, &results)?;
    let tsv = ctx.path("utility.tsv");
    let table = UtilityResult::table_tsv(&results);
    write_text(&tsv, &table)?;
    print!("{table}");
    Ok(vec![json_path, tsv])
}

/// Writes `schema.json`, `corpus.jsonl`, its `train`/`val`/`test` split and
/// the generating `oracle_spec.json`.
pub fn cmd_oracle_corpus(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let spec = ctx.config.oracle_spec()?;
    let n = ctx.n.unwrap_or(ctx.config.oracle.n);
    let corpus = generate_oracle_corpus(&spec, n)?;
    let (train_set, val, test) = split_corpus(&corpus, ctx.config.oracle.split, ctx.stream("oracle-split")).map_err(|e| CliError::Config { path: "oracle.split".into(), message: e.to_string() })?;
    create_out(&ctx.out)?;
    let schema = ctx.path("schema.json");
    write_schema(&schema, corpus.schema())?;
    let spec_path = ctx.path("oracle_spec.json");
    write_json(&spec_path, &spec)?;
    let mut files = vec![schema, spec_path];
    for (name, c) in [("corpus.jsonl", &corpus), ("train.jsonl", &train_set), ("val.jsonl", &val), ("test.jsonl", &test)] {
        let p = ctx.path(name);
        write_corpus(&p, c)?;
        files.push(p);
    }
    println!("wrote {} records: {} train, {} val, {} test", corpus.len(), train_set.len(), val.len(), test.len());
    Ok(files)
}

fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes `manifest_<command>.json`: command, seed, effective config and a
/// digest of every output. The creation time is the only nondeterministic field.
pub fn write_manifest(ctx: &Context, command: Command, files: &[PathBuf]) -> Result<PathBuf, CliError> {
    let digests = files
        .iter()
        .map(|f| Ok(json!({ "path": f.strip_prefix(&ctx.out).unwrap_or(f).display().to_string(), "sha256": sha256_hex(f)? })))
        .collect::<Result<Vec<_>, CliError>>()?;
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let manifest = json!({
        "command": command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": ctx.seed,
        "config": ctx.config,
        "outputs": digests,
        "created_unix": created,
    });
    let path = ctx.path(&format!("manifest_{}.json", command.name().replace('-', "_")));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn execute(ctx: &Context, command: Command) -> Result<Vec<PathBuf>, CliError> {
    let files = match command {
        Command::Train => cmd_train(ctx)?,
        Command::Generate { mode } => cmd_generate(ctx, mode.unwrap_or(ctx.config.generate.mode))?,
        Command::Evaluate => cmd_evaluate(ctx)?,
        Command::AttackMi => cmd_attack_mi(ctx)?,
        Command::AttackAi => cmd_attack_ai(ctx)?,
        Command::Utility => cmd_utility(ctx)?,
        Command::OracleCorpus => cmd_oracle_corpus(ctx)?,
    };
    write_manifest(ctx, command, &files)?;
    Ok(files)
}

/// Runs one parsed invocation; returns the files it wrote, manifest excluded.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let ctx = Context::from_cli(cli)?;
    execute(&ctx, cli.command)
}
