//! The TOML run configuration. Relative paths resolve against the config
//! file's directory.

use std::path::{Path, PathBuf};

use ehrgen_core::generate::{CompletionPolicy, GenerationConfig};
use ehrgen_core::model::{ModelConfig, TrainConfig};
use ehrgen_core::privacy::{AttackModelConfig, MiClassifierConfig};
use ehrgen_core::records::OracleSpec;
use ehrgen_core::utility::{Arm, PredictorConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Schema file; inferred from the training corpus when absent.
    pub schema: Option<PathBuf>,
    /// Real training corpus (the generator's members).
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Real held-out corpus (non-members).
    pub test: Option<PathBuf>,
    /// Synthetic corpus for the attacks; defaults to `<out>/synthetic.jsonl`.
    pub synthetic: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GenerateMode {
    #[default]
    Scratch,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub n: usize,
    pub mode: GenerateMode,
    /// Corpus completed in `complete` mode; defaults to `data.test`.
    pub input: Option<PathBuf>,
    pub policy: CompletionPolicy,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { n: 100, mode: GenerateMode::Scratch, input: None, policy: CompletionPolicy::keep_all() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Corpus to score; defaults to `data.test`.
    pub corpus: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiSection {
    pub shadow: AttackModelConfig,
    pub classifier: MiClassifierConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AiSection {
    pub models: AttackModelConfig,
    pub hide_fraction: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub delta_step: f64,
}

impl Default for AiSection {
    fn default() -> Self {
        Self { models: AttackModelConfig::default(), hide_fraction: 0.2, delta_min: -5.0, delta_max: 5.0, delta_step: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub mi: MiSection,
    pub ai: AiSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UtilitySection {
    pub predictor: PredictorConfig,
    /// Defaults to one all-real arm.
    pub arms: Vec<Arm>,
    pub ks: Vec<usize>,
    pub bootstrap_resamples: usize,
}

impl Default for UtilitySection {
    fn default() -> Self {
        Self { predictor: PredictorConfig::default(), arms: Vec::new(), ks: vec![10, 20], bootstrap_resamples: 1000 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OraclePreset {
    #[default]
    Demo,
    Chain,
    Uniform,
    Coupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub preset: OraclePreset,
    /// JSON oracle specification; overrides `preset`.
    pub spec: Option<PathBuf>,
    pub n: usize,
    /// Primary (dx) vocabulary size of the chain, uniform and coupled presets.
    pub vocab: usize,
    /// Lab vocabulary size of the coupled preset.
    pub n_lab: usize,
    pub strength: f64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { preset: OraclePreset::Demo, spec: None, n: 200, vocab: 50, n_lab: 10, strength: 0.9, split: [0.8, 0.1, 0.1] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataPaths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub generate: GenerateSection,
    pub evaluate: EvaluateSection,
    pub attack: AttackSection,
    pub utility: UtilitySection,
    pub oracle: OracleSection,
}

fn invalid(path: &str, message: impl std::fmt::Display) -> CliError {
    CliError::Config { path: path.to_string(), message: message.to_string() }
}

/// Dotted key of the line holding byte `at`, e.g. `train.learning_rate`.
fn error_path(text: &str, at: usize) -> String {
    let start = text[..at].rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].lines().next().unwrap_or_default().trim();
    let header = |l: &str| l.strip_prefix('[').and_then(|l| l.strip_suffix(']')).map(|l| l.trim_matches(['[', ']']).trim().to_string());
    if let Some(h) = header(line) {
        return h;
    }
    let key = line.split('=').next().unwrap_or_default().trim();
    match text[..start].lines().rev().find_map(|l| header(l.trim())) {
        Some(section) => format!("{section}.{key}"),
        None => key.to_string(),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let path = e.span().map(|s| error_path(text, s.start)).unwrap_or_default();
            invalid(if path.is_empty() { "<config>" } else { &path }, e.message())
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid("--config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        for p in [
            &mut self.out,
            &mut self.data.schema,
            &mut self.data.train,
            &mut self.data.val,
            &mut self.data.test,
            &mut self.data.synthetic,
            &mut self.generate.input,
            &mut self.evaluate.corpus,
            &mut self.oracle.spec,
        ] {
            fix(p);
        }
    }

    /// Checks every section and every referenced input path.
    pub fn validate(&self) -> Result<(), CliError> {
        let files = [
            ("data.schema", &self.data.schema),
            ("data.train", &self.data.train),
            ("data.val", &self.data.val),
            ("data.test", &self.data.test),
            ("generate.input", &self.generate.input),
            ("evaluate.corpus", &self.evaluate.corpus),
            ("oracle.spec", &self.oracle.spec),
        ];
        for (field, path) in files {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(invalid(field, format!("{} does not exist", p.display())));
                }
            }
        }
        self.model.validate().map_err(|e| invalid("model", e))?;
        self.train.validate().map_err(|e| invalid("train", e))?;
        self.generation.validate().map_err(|e| invalid("generation", e))?;
        self.generate.policy.validate().map_err(|e| invalid("generate.policy", e))?;
        for (field, m) in [("attack.mi.shadow", &self.attack.mi.shadow), ("attack.ai.models", &self.attack.ai.models)] {
            m.model.validate().map_err(|e| invalid(&format!("{field}.model"), e))?;
            m.train.validate().map_err(|e| invalid(&format!("{field}.train"), e))?;
        }
        let mi = &self.attack.mi.classifier;
        if mi.hidden == 0 || mi.epochs == 0 || !(mi.learning_rate > 0.0) {
            return Err(invalid("attack.mi.classifier", "hidden, epochs and learning_rate must be positive"));
        }
        let ai = &self.attack.ai;
        if !(0.0..=1.0).contains(&ai.hide_fraction) || ai.hide_fraction == 0.0 {
            return Err(invalid("attack.ai.hide_fraction", "must lie in (0, 1]"));
        }
        if !(ai.delta_step > 0.0 && ai.delta_min <= ai.delta_max && ai.delta_min.is_finite() && ai.delta_max.is_finite()) {
            return Err(invalid("attack.ai.delta_step", "need finite delta_min <= delta_max and a positive step"));
        }
        if self.utility.ks.is_empty() || self.utility.ks.contains(&0) {
            return Err(invalid("utility.ks", "must be nonempty and positive"));
        }
        if self.utility.arms.iter().any(|a| a.n_syn + a.n_real == 0) {
            return Err(invalid("utility.arms", "every arm needs at least one record"));
        }
        let p = &self.utility.predictor;
        if p.embedding == 0 || p.hidden == 0 || p.epochs == 0 || p.batch_size == 0 || !(p.learning_rate > 0.0) {
            return Err(invalid("utility.predictor", "sizes, epochs and learning_rate must be positive"));
        }
        if self.oracle.n == 0 {
            return Err(invalid("oracle.n", "must be positive"));
        }
        Ok(())
    }

    pub fn oracle_spec(&self) -> Result<OracleSpec, CliError> {
        let seed = ehrgen_core::rng::derive_seed(self.seed, "oracle");
        let o = &self.oracle;
        let spec = match &o.spec {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| invalid("oracle.spec", e))?;
                let mut spec: OracleSpec = serde_json::from_str(&text).map_err(|e| invalid("oracle.spec", e))?;
                spec.seed = seed;
                spec
            }
            None => match o.preset {
                OraclePreset::Demo => OracleSpec::demo(seed),
                OraclePreset::Chain => OracleSpec::deterministic_chain(o.vocab, seed),
                OraclePreset::Uniform => OracleSpec::uniform(o.vocab, seed),
                OraclePreset::Coupled => OracleSpec::coupled(o.vocab, o.n_lab, o.strength, seed),
            },
        };
        spec.validate().map_err(|e| invalid("oracle", e))?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_field_names_its_location() {
        let err = RunConfig::from_toml("[train]\nlearning_rat = 0.1\n").unwrap_err();
        match err {
            CliError::Config { path, message } => {
                assert!(message.contains("learning_rat"), "{message}");
                assert_eq!(path, "train.learning_rat");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_section_names_its_field() {
        let cfg = RunConfig::from_toml("[generation]\ntop_p = 1.5\n").unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config { path, .. }) if path == "generation"));
        let cfg = RunConfig::from_toml("[data]\ntrain = \"/nonexistent/train.jsonl\"\n").unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config { path, .. }) if path == "data.train"));
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "out = \"o\"\n[data]\ntest = \"t.jsonl\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.out.unwrap(), dir.path().join("o"));
        assert_eq!(cfg.data.test.unwrap(), dir.path().join("t.jsonl"));
    }

    #[test]
    fn presets_build_valid_specs() {
        for preset in ["demo", "chain", "uniform", "coupled"] {
            let cfg = RunConfig::from_toml(&format!("[oracle]\npreset = \"{preset}\"\nvocab = 12\n")).unwrap();
            cfg.oracle_spec().unwrap();
        }
    }
}
