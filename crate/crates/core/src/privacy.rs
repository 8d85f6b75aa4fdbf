//! Leakage and re-identification risk: nearest-record distance and the
//! sample-to-population disclosure attack over quasi-identifier classes.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encode, DatasetSchema, RecordTable};
use crate::error::{Error, Result};

/// Maximum acceptable disclosure risk.
pub const DISCLOSURE_RISK_THRESHOLD: f64 = 0.09;

/// A variable used to link synthetic patients to real ones. Numeric
/// variables must carry a bin width; values are floored to multiples of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiIdentifier {
    pub variable: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_width: Option<f64>,
}

impl QuasiIdentifier {
    pub fn level(variable: impl Into<String>) -> Self {
        Self {
            variable: variable.into(),
            bin_width: None,
        }
    }

    pub fn binned(variable: impl Into<String>, width: f64) -> Self {
        Self {
            variable: variable.into(),
            bin_width: Some(width),
        }
    }
}

struct Resolved {
    index: usize,
    bin_width: Option<f64>,
}

fn resolve(schema: &DatasetSchema, quasi: &[QuasiIdentifier]) -> Result<Vec<Resolved>> {
    if quasi.is_empty() {
        return Err(Error::Config("no quasi-identifiers given".into()));
    }
    quasi
        .iter()
        .map(|q| {
            let index = schema.require_index(&q.variable)?;
            let numeric = schema.variables[index].kind.is_numeric();
            match (numeric, q.bin_width) {
                (true, Some(w)) if w > 0.0 && w.is_finite() => {}
                (true, _) => {
                    return Err(Error::Config(format!(
                        "numeric quasi-identifier `{}` needs a positive bin width",
                        q.variable
                    )))
                }
                (false, Some(_)) => {
                    return Err(Error::Config(format!(
                        "`{}` is not numeric and cannot be binned",
                        q.variable
                    )))
                }
                (false, None) => {}
            }
            Ok(Resolved {
                index,
                bin_width: q.bin_width,
            })
        })
        .collect()
}

/// Class key of every patient, read from the patient's first timestep.
pub(crate) fn patient_classes(
    table: &RecordTable,
    schema: &DatasetSchema,
    quasi: &[QuasiIdentifier],
) -> Result<Vec<Vec<String>>> {
    let resolved = resolve(schema, quasi)?;
    table
        .episodes()
        .filter(|ep| !ep.rows.is_empty())
        .map(|ep| {
            let first = &ep.rows[0];
            resolved
                .iter()
                .map(|r| {
                    let cell = &first.values[r.index];
                    match r.bin_width {
                        Some(w) => {
                            let x = cell.as_number().ok_or_else(|| Error::Schema {
                                variable: schema.variables[r.index].name.clone(),
                                message: format!("expected a number, found {cell:?}"),
                            })?;
                            let lo = (x / w).floor() * w;
                            Ok(format!("[{lo}, {})", lo + w))
                        }
                        None => cell.as_label().map(str::to_string).ok_or_else(|| Error::Schema {
                            variable: schema.variables[r.index].name.clone(),
                            message: format!("expected a level label, found {cell:?}"),
                        }),
                    }
                })
                .collect()
        })
        .collect()
}

/// Patient counts per quasi-identifier class in the real (`F`) and
/// synthetic data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceClassTable {
    pub classes: BTreeMap<Vec<String>, (usize, usize)>,
}

impl EquivalenceClassTable {
    pub fn build(
        real: &RecordTable,
        syn: &RecordTable,
        schema: &DatasetSchema,
        quasi: &[QuasiIdentifier],
    ) -> Result<Self> {
        let mut classes: BTreeMap<Vec<String>, (usize, usize)> = BTreeMap::new();
        for key in patient_classes(real, schema, quasi)? {
            classes.entry(key).or_default().0 += 1;
        }
        for key in patient_classes(syn, schema, quasi)? {
            classes.entry(key).or_default().1 += 1;
        }
        Ok(Self { classes })
    }

    /// Joint presence indicator `I` of a class.
    pub fn shared(&self, key: &[String]) -> bool {
        self.classes.get(key).is_some_and(|&(r, s)| r > 0 && s > 0)
    }

    pub fn n_shared(&self) -> usize {
        self.classes.values().filter(|&&(r, s)| r > 0 && s > 0).count()
    }

    /// `(1/S) Σ_s I_s / F_s` over synthetic patients `s`.
    pub fn risk(&self) -> Result<f64> {
        let s: usize = self.classes.values().map(|&(_, s)| s).sum();
        if s == 0 {
            return Err(Error::InsufficientData("no synthetic patients".into()));
        }
        let sum: f64 = self
            .classes
            .values()
            .filter(|&&(r, _)| r > 0)
            .map(|&(r, s)| s as f64 / r as f64)
            .sum();
        Ok(sum / s as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisclosureRisk {
    pub risk: f64,
    pub threshold: f64,
    pub pass: bool,
    pub n_classes: usize,
    pub n_shared_classes: usize,
}

pub fn disclosure_risk(
    real: &RecordTable,
    syn: &RecordTable,
    schema: &DatasetSchema,
    quasi: &[QuasiIdentifier],
) -> Result<DisclosureRisk> {
    let table = EquivalenceClassTable::build(real, syn, schema, quasi)?;
    let risk = table.risk()?;
    Ok(DisclosureRisk {
        risk,
        threshold: DISCLOSURE_RISK_THRESHOLD,
        pass: risk <= DISCLOSURE_RISK_THRESHOLD,
        n_classes: table.classes.len(),
        n_shared_classes: table.n_shared(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearestRecord {
    pub distance: f64,
    pub synthetic_index: usize,
    pub real_index: usize,
}

/// Minimum Euclidean distance between flattened record vectors, scanning
/// every `(synthetic, real)` pair. Ties keep the lowest indices.
pub fn min_distance_rows(real: &[f64], syn: &[f64], dim: usize) -> Result<NearestRecord> {
    if dim == 0 || real.is_empty() || syn.is_empty() || real.len() % dim != 0 || syn.len() % dim != 0 {
        return Err(Error::InsufficientData("distance needs non-empty record sets of one width".into()));
    }
    let best = syn
        .par_chunks(dim)
        .enumerate()
        .map(|(si, s)| {
            let mut best = (f64::INFINITY, si, 0);
            for (ri, r) in real.chunks(dim).enumerate() {
                let d: f64 = s.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, si, ri);
                }
            }
            best
        })
        .reduce(
            || (f64::INFINITY, usize::MAX, usize::MAX),
            |a, b| if b.0 < a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2)) { b } else { a },
        );
    Ok(NearestRecord {
        distance: best.0.sqrt(),
        synthetic_index: best.1,
        real_index: best.2,
    })
}

/// Nearest-record distance between whole encoded episodes (scaled
/// numerics, one-hot levels, zero padding).
pub fn min_euclidean_distance(real: &RecordTable, syn: &RecordTable, schema: &DatasetSchema) -> Result<NearestRecord> {
    real.validate(schema)?;
    syn.validate(schema)?;
    let r = encode::<f64>(real, schema)?;
    let s = encode::<f64>(syn, schema)?;
    min_distance_rows(r.data().data(), s.data().data(), r.data().row_len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub disclosure: DisclosureRisk,
    pub quasi_identifiers: Vec<QuasiIdentifier>,
    pub min_distance: NearestRecord,
}

pub fn privacy_report(
    real: &RecordTable,
    syn: &RecordTable,
    schema: &DatasetSchema,
    quasi: &[QuasiIdentifier],
) -> Result<PrivacyReport> {
    Ok(PrivacyReport {
        disclosure: disclosure_risk(real, syn, schema, quasi)?,
        quasi_identifiers: quasi.to_vec(),
        min_distance: min_euclidean_distance(real, syn, schema)?,
    })
}
