//! End-to-end glue: sampling synthetic tables from a trained denoiser and
//! collecting every evaluation metric for a real/synthetic pair.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{decode, DatasetSchema, EpisodeBatch, RecordTable};
use crate::diffusion::{sample, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fidelity::{kl_table, run_cascade, CascadeConfig, CascadeResult, KlEntry};
use crate::privacy::{privacy_report, PrivacyReport, QuasiIdentifier};
use crate::scalar::Scalar;
use crate::structure::{category_coverage, log_cluster, CorrelationBundle, LogClusterConfig, LogClusterResult};

/// Draws `patients` synthetic episodes and decodes them into records.
pub fn synthesize<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    denoiser: &P,
    schedule: &NoiseSchedule<T>,
    schema: &Arc<DatasetSchema>,
    patients: usize,
    seed: u64,
) -> Result<RecordTable> {
    if patients == 0 {
        return Err(Error::Config("asked for zero synthetic patients".into()));
    }
    let shape = [patients, 1, schema.max_length, schema.width()];
    let x = sample(denoiser, schedule, &shape, seed)?;
    decode(&EpisodeBatch::from_tensor(x, Arc::clone(schema))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub cascade: CascadeConfig,
    pub kl_bins: usize,
    pub log_cluster: LogClusterConfig,
    /// Quasi-identifiers for the privacy section; empty skips it.
    pub quasi_identifiers: Vec<QuasiIdentifier>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            cascade: CascadeConfig::default(),
            kl_bins: 20,
            log_cluster: LogClusterConfig::default(),
            quasi_identifiers: Vec::new(),
        }
    }
}

impl EvaluationConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.cascade.seed = seed;
        self.log_cluster.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cascade: CascadeResult,
    pub kl: Vec<KlEntry>,
    pub real_correlations: CorrelationBundle,
    pub synthetic_correlations: CorrelationBundle,
    pub max_correlation_gap: f64,
    pub log_cluster: LogClusterResult,
    /// `None` when the schema has no binary or categorical variables.
    pub category_coverage: Option<f64>,
    pub privacy: Option<PrivacyReport>,
}

pub fn evaluate(
    real: &RecordTable,
    syn: &RecordTable,
    schema: &DatasetSchema,
    config: &EvaluationConfig,
) -> Result<EvaluationReport> {
    real.validate(schema)?;
    syn.validate(schema)?;
    let real_correlations = CorrelationBundle::compute(real, schema)?;
    let synthetic_correlations = CorrelationBundle::compute(syn, schema)?;
    let category_coverage = match category_coverage(real, syn, schema) {
        Ok(c) => Some(c),
        Err(Error::NotApplicable(_)) => None,
        Err(e) => return Err(e),
    };
    let privacy = if config.quasi_identifiers.is_empty() {
        None
    } else {
        Some(privacy_report(real, syn, schema, &config.quasi_identifiers)?)
    };
    Ok(EvaluationReport {
        cascade: run_cascade(real, syn, schema, &config.cascade)?,
        kl: kl_table(real, syn, schema, config.kl_bins)?,
        max_correlation_gap: real_correlations.max_abs_difference(&synthetic_correlations),
        real_correlations,
        synthetic_correlations,
        log_cluster: log_cluster(real, syn, schema, &config.log_cluster)?,
        category_coverage,
        privacy,
    })
}
