use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mixdiff::diffusion::ScheduleConfig;
use mixdiff::nn::DenoiserConfig;
use mixdiff::pipeline::EvaluationConfig;
use mixdiff::privacy::QuasiIdentifier;
use mixdiff::toy::ToySpec;
use mixdiff::training::TrainConfig;
use mixdiff::utility::{BcqConfig, UtilityConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MIXDIFF_OUT";
pub const DEFAULT_OUT: &str = "mixdiff-out";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub variable: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtilitySection {
    pub action_variables: Vec<String>,
    pub components: usize,
    pub states: usize,
    pub bcq: BcqConfig,
    pub reward: Option<RewardConfig>,
}

impl Default for UtilitySection {
    fn default() -> Self {
        let d = UtilityConfig::default();
        Self {
            action_variables: d.action_variables,
            components: d.components,
            states: d.states,
            bcq: d.bcq,
            reward: None,
        }
    }
}

/// Everything a run needs. Relative paths are resolved against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: Option<PathBuf>,
    pub real: Option<PathBuf>,
    pub synthetic: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
    pub precision: Precision,
    pub schedule: ScheduleConfig,
    pub denoiser: Option<DenoiserConfig>,
    pub train: TrainConfig,
    pub samples: usize,
    pub toy: ToySpec,
    pub evaluation: EvaluationConfig,
    pub quasi_identifiers: Vec<QuasiIdentifier>,
    pub utility: UtilitySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: None,
            real: None,
            synthetic: None,
            checkpoint: None,
            output_dir: None,
            seed: 0,
            precision: Precision::F32,
            schedule: ScheduleConfig::default(),
            denoiser: None,
            train: TrainConfig::default(),
            samples: 500,
            toy: ToySpec::default(),
            evaluation: EvaluationConfig::default(),
            quasi_identifiers: Vec::new(),
            utility: UtilitySection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.schema,
            &mut cfg.real,
            &mut cfg.synthetic,
            &mut cfg.checkpoint,
            &mut cfg.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Applies command-line overrides. The seed fans out to every seeded
    /// stage so one number replays a run.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if out.is_some() {
            self.output_dir = out;
        }
        if self.output_dir.is_none() {
            self.output_dir = Some(std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from));
        }
        self.train.seed = self.seed;
        self.toy.seed = self.seed;
        self.evaluation = self.evaluation.clone().with_seed(self.seed);
    }

    pub fn out_dir(&self) -> &Path {
        self.output_dir.as_deref().unwrap_or(Path::new(DEFAULT_OUT))
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        match field {
            Some(p) => Ok(p),
            None => bail!("config field `{name}` is required for this command"),
        }
    }

    pub fn utility_config(&self) -> UtilityConfig {
        UtilityConfig {
            action_variables: self.utility.action_variables.clone(),
            components: self.utility.components,
            states: self.utility.states,
            bcq: self.utility.bcq,
            seed: self.seed,
        }
    }
}
