use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::table::{Cell, RecordTable};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Numeric,
    Binary,
    Categorical,
}

impl VariableKind {
    pub fn is_numeric(self) -> bool {
        self == VariableKind::Numeric
    }
}

/// One column of a mixed-type longitudinal dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    /// Ordered level labels; empty for numeric variables.
    #[serde(default)]
    pub levels: Vec<String>,
    /// Observed `[min, max]` in native units; numeric variables only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
}

impl VariableSpec {
    pub fn numeric(name: impl Into<String>, range: Option<[f64; 2]>) -> Self {
        Self {
            name: name.into(),
            kind: VariableKind::Numeric,
            levels: Vec::new(),
            range,
        }
    }

    pub fn binary(name: impl Into<String>, levels: [&str; 2]) -> Self {
        Self {
            name: name.into(),
            kind: VariableKind::Binary,
            levels: levels.iter().map(|s| s.to_string()).collect(),
            range: None,
        }
    }

    pub fn categorical<S: AsRef<str>>(name: impl Into<String>, levels: &[S]) -> Self {
        Self {
            name: name.into(),
            kind: VariableKind::Categorical,
            levels: levels.iter().map(|s| s.as_ref().to_string()).collect(),
            range: None,
        }
    }

    /// Number of encoded channels: 1 for numeric, one per level otherwise.
    pub fn width(&self) -> usize {
        match self.kind {
            VariableKind::Numeric => 1,
            _ => self.levels.len(),
        }
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }

    fn validate(&self) -> Result<()> {
        let err = |message: String| Error::Schema {
            variable: self.name.clone(),
            message,
        };
        match self.kind {
            VariableKind::Numeric => {
                if !self.levels.is_empty() {
                    return Err(err("numeric variables carry no levels".into()));
                }
                if let Some([lo, hi]) = self.range {
                    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                        return Err(err(format!("invalid range [{lo}, {hi}]")));
                    }
                }
            }
            VariableKind::Binary if self.levels.len() != 2 => {
                return Err(err(format!(
                    "binary variables need exactly 2 levels, found {}",
                    self.levels.len()
                )));
            }
            VariableKind::Categorical if self.levels.len() < 2 => {
                return Err(err(format!(
                    "categorical variables need at least 2 levels, found {}",
                    self.levels.len()
                )));
            }
            _ => {}
        }
        let mut seen = HashSet::new();
        for l in &self.levels {
            if !seen.insert(l.as_str()) {
                return Err(err(format!("duplicate level `{l}`")));
            }
        }
        if self.range.is_some() && !self.kind.is_numeric() {
            return Err(err("only numeric variables carry a range".into()));
        }
        Ok(())
    }
}

/// Declarative description of a dataset: variable order, maximum episode
/// length and the unit of the time index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub variables: Vec<VariableSpec>,
    pub max_length: usize,
    pub time_unit: String,
}

impl DatasetSchema {
    pub fn new(variables: Vec<VariableSpec>, max_length: usize, time_unit: impl Into<String>) -> Result<Self> {
        let schema = Self {
            variables,
            max_length,
            time_unit: time_unit.into(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variables.is_empty() {
            return Err(Error::InvalidSchema("no variables".into()));
        }
        if self.max_length == 0 {
            return Err(Error::InvalidSchema("max_length must be positive".into()));
        }
        let mut names = HashSet::new();
        for v in &self.variables {
            v.validate()?;
            if !names.insert(v.name.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate variable `{}`", v.name)));
            }
            if v.name == PATIENT_ID_COLUMN || v.name == self.time_unit {
                return Err(Error::InvalidSchema(format!(
                    "variable `{}` collides with an index column",
                    v.name
                )));
            }
        }
        Ok(())
    }

    /// Encoded feature width N.
    pub fn width(&self) -> usize {
        self.variables.iter().map(VariableSpec::width).sum()
    }

    /// Channel offset of each variable inside the encoded feature axis.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.variables
            .iter()
            .map(|v| {
                let o = acc;
                acc += v.width();
                o
            })
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn require_index(&self, name: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| Error::Schema {
            variable: name.to_string(),
            message: "not in schema".into(),
        })
    }

    pub fn has_non_numeric(&self) -> bool {
        self.variables.iter().any(|v| !v.kind.is_numeric())
    }

    /// CSV header: variables, then patient id, then the time index.
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = self.variables.iter().map(|v| v.name.clone()).collect();
        h.push(PATIENT_ID_COLUMN.to_string());
        h.push(self.time_unit.clone());
        h
    }

    /// Returns a copy with every numeric range replaced by the observed
    /// min/max of `table`.
    pub fn fit_ranges(&self, table: &RecordTable) -> Result<Self> {
        let mut out = self.clone();
        for (i, var) in out.variables.iter_mut().enumerate() {
            if !var.kind.is_numeric() {
                continue;
            }
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for rec in table.records() {
                if let Cell::Number(x) = rec.values[i] {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
            }
            if !lo.is_finite() {
                return Err(Error::InsufficientData(format!(
                    "no values observed for `{}`",
                    var.name
                )));
            }
            if lo == hi {
                return Err(Error::DegenerateRange {
                    variable: var.name.clone(),
                    min: lo,
                    max: hi,
                });
            }
            var.range = Some([lo, hi]);
        }
        Ok(out)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: Self = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

pub const PATIENT_ID_COLUMN: &str = "patient_id";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_counts_levels() {
        let s = DatasetSchema::new(
            vec![
                VariableSpec::numeric("a", Some([0.0, 1.0])),
                VariableSpec::binary("b", ["no", "yes"]),
                VariableSpec::categorical("c", &["x", "y", "z"]),
            ],
            4,
            "hour",
        )
        .unwrap();
        assert_eq!(s.width(), 6);
        assert_eq!(s.offsets(), vec![0, 1, 3]);
        assert_eq!(s.csv_header().len(), 5);
    }

    #[test]
    fn rejects_bad_variables() {
        let bad_binary = VariableSpec {
            name: "b".into(),
            kind: VariableKind::Binary,
            levels: vec!["only".into()],
            range: None,
        };
        assert!(DatasetSchema::new(vec![bad_binary], 3, "hour").is_err());
        let dup = VariableSpec::categorical("c", &["x", "x"]);
        assert!(DatasetSchema::new(vec![dup], 3, "hour").is_err());
        let numeric_with_levels = VariableSpec {
            levels: vec!["a".into()],
            ..VariableSpec::numeric("n", None)
        };
        assert!(DatasetSchema::new(vec![numeric_with_levels], 3, "hour").is_err());
        assert!(DatasetSchema::new(vec![VariableSpec::numeric("n", None)], 0, "hour").is_err());
    }

    #[test]
    fn json_round_trip_keeps_fields() {
        let s = DatasetSchema::new(
            vec![
                VariableSpec::numeric("a", Some([-1.5, 2.0])),
                VariableSpec::binary("Gender", ["Female", "Male"]),
            ],
            10,
            "month",
        )
        .unwrap();
        let back: DatasetSchema = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
