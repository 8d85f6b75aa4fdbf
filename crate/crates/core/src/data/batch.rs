use std::sync::Arc;

use crate::data::schema::{DatasetSchema, VariableKind};
use crate::data::table::{Cell, Record, RecordTable};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mass below which an encoded timestep counts as padding when lengths are
/// recovered from a sampled tensor.
pub const PADDING_MASS_THRESHOLD: f64 = 0.5;

/// Encoded episodes: a `B×1×L×N` tensor plus the true length and id of every
/// episode and the schema that produced it.
#[derive(Clone, Debug)]
pub struct EpisodeBatch<T> {
    data: Tensor<T>,
    lengths: Vec<usize>,
    patient_ids: Vec<String>,
    schema: Arc<DatasetSchema>,
}

impl<T: Scalar> EpisodeBatch<T> {
    /// Wraps a raw tensor. Lengths default to what [`recover_lengths`] infers
    /// and ids to `S000001`, `S000002`, …
    pub fn from_tensor(data: Tensor<T>, schema: Arc<DatasetSchema>) -> Result<Self> {
        let b = check_shape(&data, &schema)?;
        let lengths = recover_lengths(&data, &schema)?;
        let patient_ids = (1..=b).map(|i| format!("S{i:06}")).collect();
        Ok(Self {
            data,
            lengths,
            patient_ids,
            schema,
        })
    }

    pub fn new(
        data: Tensor<T>,
        lengths: Vec<usize>,
        patient_ids: Vec<String>,
        schema: Arc<DatasetSchema>,
    ) -> Result<Self> {
        let b = check_shape(&data, &schema)?;
        if lengths.len() != b || patient_ids.len() != b {
            return Err(Error::shape(format!(
                "{b} episodes but {} lengths and {} ids",
                lengths.len(),
                patient_ids.len()
            )));
        }
        if let Some(&l) = lengths.iter().find(|&&l| l > schema.max_length) {
            return Err(Error::shape(format!("length {l} exceeds {}", schema.max_length)));
        }
        Ok(Self {
            data,
            lengths,
            patient_ids,
            schema,
        })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn schema(&self) -> &Arc<DatasetSchema> {
        &self.schema
    }

    pub fn n_episodes(&self) -> usize {
        self.lengths.len()
    }

    /// Encoded values of one episode, `L×N` row-major including padding.
    pub fn episode(&self, i: usize) -> &[T] {
        let n = self.data.row_len();
        &self.data.data()[i * n..(i + 1) * n]
    }

    /// Stacks the listed episodes into a `b×1×L×N` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor<T> {
        let n = self.data.row_len();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(self.episode(i));
        }
        let s = self.data.shape();
        Tensor::from_vec(&[indices.len(), 1, s[2], s[3]], out).expect("gather shape")
    }

    pub fn cast<U: Scalar>(&self) -> EpisodeBatch<U> {
        EpisodeBatch {
            data: self.data.cast(),
            lengths: self.lengths.clone(),
            patient_ids: self.patient_ids.clone(),
            schema: self.schema.clone(),
        }
    }
}

fn check_shape<T: Scalar>(data: &Tensor<T>, schema: &DatasetSchema) -> Result<usize> {
    let s = data.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != schema.max_length || s[3] != schema.width() {
        return Err(Error::shape(format!(
            "expected B×1×{}×{}, got {:?}",
            schema.max_length,
            schema.width(),
            s
        )));
    }
    Ok(s[0])
}

fn numeric_range(spec: &crate::data::schema::VariableSpec) -> Result<(f64, f64)> {
    let [lo, hi] = spec.range.ok_or_else(|| Error::MissingRange(spec.name.clone()))?;
    if lo >= hi {
        return Err(Error::DegenerateRange {
            variable: spec.name.clone(),
            min: lo,
            max: hi,
        });
    }
    Ok((lo, hi))
}

/// Min-max scales numerics with the schema's frozen ranges, one-hot encodes
/// binary/categorical variables in schema order and zero-pads every episode
/// to `max_length`.
///
/// Numeric values outside the frozen range (e.g. a holdout split) scale to
/// values outside `[0, 1]`; they are not clamped.
pub fn encode<T: Scalar>(table: &RecordTable, schema: &DatasetSchema) -> Result<EpisodeBatch<T>> {
    schema.validate()?;
    let ranges = numeric_ranges(schema)?;
    let offsets = schema.offsets();
    let (l_max, n) = (schema.max_length, schema.width());
    let b = table.n_episodes();
    let mut data = vec![T::zero(); b * l_max * n];
    let mut lengths = Vec::with_capacity(b);
    let mut ids = Vec::with_capacity(b);

    for (e, ep) in table.episodes().enumerate() {
        if ep.rows.len() > l_max {
            return Err(Error::EpisodeTooLong {
                patient: ep.patient_id.to_string(),
                length: ep.rows.len(),
                max: l_max,
            });
        }
        for (t, rec) in ep.rows.iter().enumerate() {
            let row = &mut data[(e * l_max + t) * n..(e * l_max + t + 1) * n];
            if rec.values.len() != schema.variables.len() {
                return Err(Error::shape(format!(
                    "patient `{}` has {} values per row, schema has {} variables",
                    ep.patient_id,
                    rec.values.len(),
                    schema.variables.len()
                )));
            }
            encode_values(&rec.values, schema, &ranges, &offsets, row)?;
        }
        lengths.push(ep.rows.len());
        ids.push(ep.patient_id.to_string());
    }
    let data = Tensor::from_vec(&[b, 1, l_max, n], data)?;
    Ok(EpisodeBatch {
        data,
        lengths,
        patient_ids: ids,
        schema: Arc::new(schema.clone()),
    })
}

/// Encodes every record of `table` as one row of width N, row-major, with
/// the same scaling and one-hot layout as [`encode`] but without padding.
pub fn encode_rows(table: &RecordTable, schema: &DatasetSchema) -> Result<Vec<f64>> {
    schema.validate()?;
    let ranges = numeric_ranges(schema)?;
    let offsets = schema.offsets();
    let n = schema.width();
    let mut out = vec![0.0; table.len() * n];
    for (rec, row) in table.records().iter().zip(out.chunks_mut(n)) {
        encode_values(&rec.values, schema, &ranges, &offsets, row)?;
    }
    Ok(out)
}

fn numeric_ranges(schema: &DatasetSchema) -> Result<Vec<Option<(f64, f64)>>> {
    schema
        .variables
        .iter()
        .map(|v| {
            if v.kind.is_numeric() {
                numeric_range(v).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

fn encode_values<T: Scalar>(
    values: &[Cell],
    schema: &DatasetSchema,
    ranges: &[Option<(f64, f64)>],
    offsets: &[usize],
    row: &mut [T],
) -> Result<()> {
    if values.len() != schema.variables.len() {
        return Err(Error::shape(format!(
            "{} values per row, schema has {} variables",
            values.len(),
            schema.variables.len()
        )));
    }
    for (v, spec) in schema.variables.iter().enumerate() {
        let cell = &values[v];
        match spec.kind {
            VariableKind::Numeric => {
                let x = cell.as_number().ok_or_else(|| Error::Schema {
                    variable: spec.name.clone(),
                    message: format!("expected a number, found {cell:?}"),
                })?;
                let (lo, hi) = ranges[v].expect("numeric range");
                row[offsets[v]] = T::of((x - lo) / (hi - lo));
            }
            _ => {
                let label = cell.as_label().ok_or_else(|| Error::Schema {
                    variable: spec.name.clone(),
                    message: format!("expected a level label, found {cell:?}"),
                })?;
                let k = spec.level_index(label).ok_or_else(|| Error::Schema {
                    variable: spec.name.clone(),
                    message: format!("unknown level `{label}`"),
                })?;
                row[offsets[v] + k] = T::one();
            }
        }
    }
    Ok(())
}

/// Inverse of [`encode`]: numerics are clamped to `[0, 1]` and rescaled,
/// each one-hot group becomes its argmax level, rows past `lengths` are
/// dropped.
pub fn decode<T: Scalar>(batch: &EpisodeBatch<T>) -> Result<RecordTable> {
    let schema = batch.schema();
    check_shape(&batch.data, schema).map_err(|e| Error::Decode(e.to_string()))?;
    let offsets = schema.offsets();
    let n = schema.width();
    let mut records = Vec::new();
    for e in 0..batch.n_episodes() {
        let ep = batch.episode(e);
        for t in 0..batch.lengths[e] {
            let row = &ep[t * n..(t + 1) * n];
            let mut values = Vec::with_capacity(schema.variables.len());
            for (v, spec) in schema.variables.iter().enumerate() {
                let o = offsets[v];
                values.push(match spec.kind {
                    VariableKind::Numeric => {
                        let (lo, hi) = numeric_range(spec)?;
                        let u = row[o].as_f64().clamp(0.0, 1.0);
                        Cell::Number(lo + u * (hi - lo))
                    }
                    _ => {
                        let k = argmax(&row[o..o + spec.width()]);
                        Cell::Label(spec.levels[k].clone())
                    }
                });
            }
            records.push(Record {
                patient_id: batch.patient_ids[e].clone(),
                time_index: t,
                values,
            });
        }
    }
    RecordTable::new(records)
}

/// Index of the largest score; the first one wins ties. Softmax is monotone,
/// so this equals the argmax of the softmax probabilities.
pub fn argmax<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Infers each episode's length from a generated tensor: a timestep is
/// padding when the mean one-hot mass over its non-numeric groups is below
/// [`PADDING_MASS_THRESHOLD`]; the length is one past the last non-padding
/// step. Schemas without non-numeric variables always yield `max_length`.
pub fn recover_lengths<T: Scalar>(data: &Tensor<T>, schema: &DatasetSchema) -> Result<Vec<usize>> {
    let b = check_shape(data, schema)?;
    let (l_max, n) = (schema.max_length, schema.width());
    if !schema.has_non_numeric() {
        return Ok(vec![l_max; b]);
    }
    let offsets = schema.offsets();
    let groups: Vec<(usize, usize)> = schema
        .variables
        .iter()
        .zip(&offsets)
        .filter(|(v, _)| !v.kind.is_numeric())
        .map(|(v, &o)| (o, v.width()))
        .collect();
    let mut lengths = Vec::with_capacity(b);
    for e in 0..b {
        let ep = &data.data()[e * l_max * n..(e + 1) * l_max * n];
        let mut len = 0;
        for t in (0..l_max).rev() {
            let row = &ep[t * n..(t + 1) * n];
            let mass: f64 = groups
                .iter()
                .map(|&(o, w)| row[o..o + w].iter().map(|x| x.as_f64()).sum::<f64>())
                .sum::<f64>()
                / groups.len() as f64;
            if mass >= PADDING_MASS_THRESHOLD {
                len = t + 1;
                break;
            }
        }
        lengths.push(len);
    }
    Ok(lengths)
}
