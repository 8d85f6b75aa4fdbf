use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::schema::{DatasetSchema, VariableKind, PATIENT_ID_COLUMN};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Number(f64),
    Label(String),
}

impl Cell {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Cell::Number(x) => Some(*x),
            Cell::Label(_) => None,
        }
    }

    pub fn as_label(&self) -> Option<&str> {
        match self {
            Cell::Label(s) => Some(s),
            Cell::Number(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub patient_id: String,
    pub time_index: usize,
    pub values: Vec<Cell>,
}

/// Rows of `(patient, time, values…)`, stored grouped by patient in order of
/// first appearance and sorted by time within each patient.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RecordTable {
    records: Vec<Record>,
    episodes: Vec<Range<usize>>,
}

/// Borrowed view of one patient's rows.
#[derive(Clone, Copy, Debug)]
pub struct Episode<'a> {
    pub patient_id: &'a str,
    pub rows: &'a [Record],
}

impl RecordTable {
    /// Groups and validates rows. `(patient_id, time_index)` pairs must be
    /// unique and time indices contiguous from zero per patient.
    pub fn new(records: Vec<Record>) -> Result<Self> {
        Self::build(records.into_iter().enumerate().map(|(i, r)| (i + 1, r)).collect())
    }

    /// Same as [`RecordTable::new`] but each record carries the row number
    /// used in error messages.
    fn build(rows: Vec<(usize, Record)>) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<(usize, Record)>> = HashMap::new();
        for (row, rec) in rows {
            let g = groups.entry(rec.patient_id.clone()).or_insert_with(|| {
                order.push(rec.patient_id.clone());
                Vec::new()
            });
            g.push((row, rec));
        }
        let mut records = Vec::new();
        let mut episodes = Vec::with_capacity(order.len());
        for id in order {
            let mut g = groups.remove(&id).unwrap_or_default();
            g.sort_by_key(|(row, r)| (r.time_index, *row));
            for w in g.windows(2) {
                if w[0].1.time_index == w[1].1.time_index {
                    return Err(Error::Csv {
                        row: w[1].0,
                        message: format!(
                            "duplicate (patient `{}`, time {})",
                            id, w[1].1.time_index
                        ),
                    });
                }
            }
            for (expected, (row, r)) in g.iter().enumerate() {
                if r.time_index != expected {
                    return Err(Error::Csv {
                        row: *row,
                        message: format!(
                            "patient `{}`: time index {} where {} was expected",
                            id, r.time_index, expected
                        ),
                    });
                }
            }
            let start = records.len();
            records.extend(g.into_iter().map(|(_, r)| r));
            episodes.push(start..records.len());
        }
        Ok(Self { records, episodes })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = Episode<'_>> + '_ {
        self.episodes.iter().map(move |r| {
            let rows = &self.records[r.clone()];
            Episode {
                patient_id: &rows[0].patient_id,
                rows,
            }
        })
    }

    /// Checks value types and level labels against `schema`.
    pub fn validate(&self, schema: &DatasetSchema) -> Result<()> {
        for (row, rec) in self.records.iter().enumerate() {
            if rec.values.len() != schema.variables.len() {
                return Err(Error::Csv {
                    row: row + 1,
                    message: format!(
                        "{} values for {} variables",
                        rec.values.len(),
                        schema.variables.len()
                    ),
                });
            }
            for (v, cell) in schema.variables.iter().zip(&rec.values) {
                match (v.kind, cell) {
                    (VariableKind::Numeric, Cell::Number(x)) if x.is_finite() => {}
                    (VariableKind::Numeric, other) => {
                        return Err(Error::Schema {
                            variable: v.name.clone(),
                            message: format!("expected a finite number, found {other:?}"),
                        })
                    }
                    (_, Cell::Label(l)) if v.level_index(l).is_some() => {}
                    (_, other) => {
                        return Err(Error::Schema {
                            variable: v.name.clone(),
                            message: format!("unknown level {other:?}"),
                        })
                    }
                }
            }
        }
        Ok(())
    }

    /// Values of numeric variable `var` over all rows.
    pub fn numeric_column(&self, var: usize) -> Result<Vec<f64>> {
        self.records
            .iter()
            .map(|r| {
                r.values[var]
                    .as_number()
                    .ok_or_else(|| Error::shape(format!("column {var} is not numeric")))
            })
            .collect()
    }

    /// Level indices of non-numeric variable `var` over all rows.
    pub fn level_column(&self, schema: &DatasetSchema, var: usize) -> Result<Vec<usize>> {
        let spec = &schema.variables[var];
        self.records
            .iter()
            .map(|r| {
                let label = r.values[var].as_label().unwrap_or("");
                spec.level_index(label).ok_or_else(|| Error::Schema {
                    variable: spec.name.clone(),
                    message: format!("unknown level `{label}`"),
                })
            })
            .collect()
    }

    /// Ordinal view of a column: numeric values, or level indices as `f64`.
    pub fn ordinal_column(&self, schema: &DatasetSchema, var: usize) -> Result<Vec<f64>> {
        if schema.variables[var].kind.is_numeric() {
            self.numeric_column(var)
        } else {
            Ok(self
                .level_column(schema, var)?
                .into_iter()
                .map(|i| i as f64)
                .collect())
        }
    }

    /// Keeps only the listed patients (by episode index), preserving order.
    pub fn select_episodes(&self, indices: &[usize]) -> Self {
        let mut records = Vec::new();
        let mut episodes = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = self.episodes[i].clone();
            let start = records.len();
            records.extend_from_slice(&self.records[r]);
            episodes.push(start..records.len());
        }
        Self { records, episodes }
    }

    pub fn read_csv<R: Read>(reader: R, schema: &DatasetSchema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Csv {
                row: 1,
                message: e.to_string(),
            })?
            .clone();
        let find = |name: &str| {
            header.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Csv {
                row: 1,
                message: format!("missing column `{name}`"),
            })
        };
        let var_cols: Vec<usize> = schema
            .variables
            .iter()
            .map(|v| find(&v.name))
            .collect::<Result<_>>()?;
        let id_col = find(PATIENT_ID_COLUMN)?;
        let time_col = find(&schema.time_unit)?;

        let mut rows = Vec::new();
        for result in rdr.records() {
            let rec = result.map_err(|e| Error::Csv {
                row: e.position().map(|p| p.line() as usize).unwrap_or(0),
                message: e.to_string(),
            })?;
            let row = rec.position().map(|p| p.line() as usize).unwrap_or(rows.len() + 2);
            let field = |c: usize| -> Result<&str> {
                let s = rec.get(c).map(str::trim).unwrap_or("");
                if s.is_empty() {
                    return Err(Error::Csv {
                        row,
                        message: format!("missing value in column `{}`", &header[c]),
                    });
                }
                Ok(s)
            };
            let mut values = Vec::with_capacity(var_cols.len());
            for (spec, &c) in schema.variables.iter().zip(&var_cols) {
                let s = field(c)?;
                values.push(if spec.kind.is_numeric() {
                    let x: f64 = s.parse().map_err(|_| Error::Csv {
                        row,
                        message: format!("malformed number `{s}` for `{}`", spec.name),
                    })?;
                    if !x.is_finite() {
                        return Err(Error::Csv {
                            row,
                            message: format!("non-finite value for `{}`", spec.name),
                        });
                    }
                    Cell::Number(x)
                } else {
                    Cell::Label(s.to_string())
                });
            }
            let time_str = field(time_col)?;
            let time_index: usize = time_str.parse().map_err(|_| Error::Csv {
                row,
                message: format!("malformed time index `{time_str}`"),
            })?;
            rows.push((
                row,
                Record {
                    patient_id: field(id_col)?.to_string(),
                    time_index,
                    values,
                },
            ));
        }
        Self::build(rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W, schema: &DatasetSchema) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::Csv {
            row: 0,
            message: e.to_string(),
        };
        wtr.write_record(schema.csv_header()).map_err(csv_err)?;
        let mut fields = Vec::with_capacity(schema.variables.len() + 2);
        for rec in &self.records {
            fields.clear();
            for cell in &rec.values {
                fields.push(match cell {
                    Cell::Number(x) => format!("{x}"),
                    Cell::Label(s) => s.clone(),
                });
            }
            fields.push(rec.patient_id.clone());
            fields.push(rec.time_index.to_string());
            wtr.write_record(&fields).map_err(csv_err)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<RecordTable> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    RecordTable::read_csv(f, schema)
}

/// Writes through a temporary file renamed into place.
pub fn save_csv(table: &RecordTable, path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<()> {
    let mut buf = Vec::new();
    table.write_csv(&mut buf, schema)?;
    crate::nn::write_atomic(path.as_ref(), &buf)
}
