//! Seeded toy cohort: two phase-lagged sinusoidal vitals with a little
//! jitter, a flag thresholded on the first of them and a three-level regime
//! that switches as a Markov chain and sets how fast the vitals oscillate.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Cell, DatasetSchema, Record, RecordTable, VariableSpec};
use crate::error::{Error, Result};

pub const SIGNAL_A: &str = "signal_a";
pub const SIGNAL_B: &str = "signal_b";
pub const FLAG: &str = "flag";
pub const REGIME: &str = "regime";
pub const REGIME_LEVELS: [&str; 3] = ["slow", "medium", "fast"];

const CENTER_A: f64 = 80.0;
const AMP_A: f64 = 15.0;
const CENTER_B: f64 = 40.0;
const AMP_B: f64 = 8.0;
const PHASE_LAG: f64 = 0.6;
const NOISE: f64 = 0.01;
const SPEEDS: [f64; 3] = [0.2, 0.45, 0.8];
const STAY: f64 = 0.85;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub patients: usize,
    pub holdout_patients: usize,
    pub length: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            patients: 500,
            holdout_patients: 500,
            length: 16,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 {
            return Err(Error::Config("toy spec needs at least one patient".into()));
        }
        if self.length < 2 {
            return Err(Error::Config(format!("toy episodes need length >= 2, got {}", self.length)));
        }
        Ok(())
    }
}

/// Schema of the toy cohort. Numeric ranges are left open.
pub fn toy_schema(length: usize) -> Result<DatasetSchema> {
    DatasetSchema::new(
        vec![
            VariableSpec::numeric(SIGNAL_A, None),
            VariableSpec::numeric(SIGNAL_B, None),
            VariableSpec::binary(FLAG, ["no", "yes"]),
            VariableSpec::categorical(REGIME, &REGIME_LEVELS),
        ],
        length,
        "hour",
    )
}

#[derive(Clone, Debug)]
pub struct ToyData {
    /// Toy schema with numeric ranges fitted on the training split.
    pub schema: DatasetSchema,
    pub train: RecordTable,
    pub holdout: RecordTable,
}

fn episode(id: String, length: usize, rng: &mut ChaCha8Rng) -> Vec<Record> {
    let mut theta = rng.random::<f64>() * 2.0 * PI;
    let mut regime = rng.random_range(0..REGIME_LEVELS.len());
    let mut rows = Vec::with_capacity(length);
    for t in 0..length {
        let na: f64 = rng.sample(StandardNormal);
        let nb: f64 = rng.sample(StandardNormal);
        let a = CENTER_A + AMP_A * (theta.sin() + NOISE * na);
        let b = CENTER_B + AMP_B * ((theta - PHASE_LAG).sin() + NOISE * nb);
        let flag = a > CENTER_A;
        rows.push(Record {
            patient_id: id.clone(),
            time_index: t,
            values: vec![
                Cell::Number(a),
                Cell::Number(b),
                Cell::Label(if flag { "yes" } else { "no" }.into()),
                Cell::Label(REGIME_LEVELS[regime].into()),
            ],
        });
        theta += SPEEDS[regime];
        if rng.random::<f64>() >= STAY {
            let weights: [f64; 3] = if flag { [0.2, 0.3, 0.5] } else { [0.5, 0.3, 0.2] };
            let mut u = rng.random::<f64>();
            regime = weights.len() - 1;
            for (k, w) in weights.iter().enumerate() {
                if u < *w {
                    regime = k;
                    break;
                }
                u -= w;
            }
        }
    }
    rows
}

fn cohort(prefix: &str, n: usize, length: usize, rng: &mut ChaCha8Rng) -> Result<RecordTable> {
    let width = n.max(1).to_string().len();
    RecordTable::new(
        (0..n)
            .flat_map(|i| episode(format!("{prefix}{i:0width$}"), length, rng))
            .collect(),
    )
}

pub fn generate(spec: &ToySpec) -> Result<ToyData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = cohort("T", spec.patients, spec.length, &mut rng)?;
    let holdout = cohort("H", spec.holdout_patients, spec.length, &mut rng)?;
    let schema = toy_schema(spec.length)?.fit_ranges(&train)?;
    train.validate(&schema)?;
    Ok(ToyData {
        schema,
        train,
        holdout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_follows_signal_and_seed_is_reproducible() {
        let spec = ToySpec {
            patients: 20,
            holdout_patients: 5,
            seed: 3,
            ..ToySpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.holdout, b.holdout);
        assert_eq!(a.train.n_episodes(), 20);
        assert_eq!(a.train.len(), 20 * 16);
        for r in a.train.records() {
            let on = r.values[0].as_number().unwrap() > CENTER_A;
            assert_eq!(r.values[2].as_label().unwrap() == "yes", on);
        }
        assert!(generate(&ToySpec { patients: 0, ..spec }).is_err());
    }
}
