//! Cross-variable and cohort structure: Kendall τ correlation matrices
//! (static and trend/cycle), the log-cluster metric and category coverage.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::Hasher;
use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encode_rows, DatasetSchema, RecordTable};
use crate::error::{Error, Result};
use crate::fidelity::write_rows;
use crate::kmeans::{KMeans, KMeansConfig};
use crate::privacy::{patient_classes, QuasiIdentifier};

/// Tie-corrected Kendall τ-b in `O(n log n)`. `None` when either sequence
/// is constant.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape(format!(
            "Kendall τ needs two sequences of equal length ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));

    let tied_pairs = |run: u64| run * (run.saturating_sub(1)) / 2;
    let (mut ties_a, mut ties_joint) = (0u64, 0u64);
    let (mut run_a, mut run_ab) = (1u64, 1u64);
    for i in 1..n {
        if pairs[i].0 == pairs[i - 1].0 {
            run_a += 1;
            if pairs[i].1 == pairs[i - 1].1 {
                run_ab += 1;
            } else {
                ties_joint += tied_pairs(run_ab);
                run_ab = 1;
            }
        } else {
            ties_a += tied_pairs(run_a);
            ties_joint += tied_pairs(run_ab);
            run_a = 1;
            run_ab = 1;
        }
    }
    ties_a += tied_pairs(run_a);
    ties_joint += tied_pairs(run_ab);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = ys.clone();
    let swaps = merge_count(&mut ys, &mut buf);

    let mut ties_b = 0u64;
    let mut run_b = 1u64;
    for i in 1..n {
        if ys[i] == ys[i - 1] {
            run_b += 1;
        } else {
            ties_b += tied_pairs(run_b);
            run_b = 1;
        }
    }
    ties_b += tied_pairs(run_b);

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    Ok(tau_b(n0, ties_a, ties_b, ties_joint, swaps))
}

/// `τ_b = (n0 − n1 − n2 + n3 − 2·D) / √((n0 − n1)(n0 − n2))`, where `D`
/// counts discordant pairs.
pub fn tau_b(n0: u64, ties_a: u64, ties_b: u64, ties_joint: u64, discordant: u64) -> Option<f64> {
    let da = n0 - ties_a;
    let db = n0 - ties_b;
    if da == 0 || db == 0 {
        return None;
    }
    let s = n0 as i64 - ties_a as i64 - ties_b as i64 + ties_joint as i64 - 2 * discordant as i64;
    Some((s as f64 / ((da as f64) * (db as f64)).sqrt()).clamp(-1.0, 1.0))
}

/// Stable merge sort returning the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Symmetric V×V matrix of τ values. Entries are `None` where τ is
/// undefined; `counts` records how many per-patient values entered each
/// averaged entry (1 for pooled matrices).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub variables: Vec<String>,
    pub values: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl CorrelationMatrix {
    pub fn size(&self) -> usize {
        self.variables.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i * self.size() + j]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut rows = Vec::with_capacity(self.size() + 1);
        let mut header = vec![String::new()];
        header.extend(self.variables.iter().cloned());
        rows.push(header);
        for i in 0..self.size() {
            let mut row = vec![self.variables[i].clone()];
            row.extend((0..self.size()).map(|j| self.get(i, j).map_or(String::new(), |v| v.to_string())));
            rows.push(row);
        }
        write_rows(writer, &rows)
    }
}

fn pairwise(columns: &[Vec<f64>]) -> Result<Vec<Option<f64>>> {
    let v = columns.len();
    let upper: Vec<(usize, usize)> = (0..v).flat_map(|i| (i..v).map(move |j| (i, j))).collect();
    let taus = upper
        .par_iter()
        .map(|&(i, j)| kendall_tau(&columns[i], &columns[j]))
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![None; v * v];
    for (&(i, j), t) in upper.iter().zip(taus) {
        out[i * v + j] = t;
        out[j * v + i] = t;
    }
    Ok(out)
}

fn names(schema: &DatasetSchema) -> Vec<String> {
    schema.variables.iter().map(|v| v.name.clone()).collect()
}

/// τ between every pair of variables over all rows pooled across patients
/// and time. Non-numeric variables enter through their level index.
pub fn static_correlations(table: &RecordTable, schema: &DatasetSchema) -> Result<CorrelationMatrix> {
    table.validate(schema)?;
    if table.len() < 2 {
        return Err(Error::InsufficientData("static correlations need at least two rows".into()));
    }
    let columns = (0..schema.variables.len())
        .map(|i| table.ordinal_column(schema, i))
        .collect::<Result<Vec<_>>>()?;
    let values = pairwise(&columns)?;
    let counts = values.iter().map(|v| v.is_some() as usize).collect();
    Ok(CorrelationMatrix {
        variables: names(schema),
        values,
        counts,
    })
}

/// Least-squares line of one series against its time index.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendCycle {
    pub trend: Vec<f64>,
    pub cycle: Vec<f64>,
}

pub fn decompose_series(y: &[f64]) -> Result<TrendCycle> {
    let n = y.len();
    if n < 2 {
        return Err(Error::InsufficientData("a trend needs at least two points".into()));
    }
    let t_mean = (n - 1) as f64 / 2.0;
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, &v) in y.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxy += dt * (v - y_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    let trend: Vec<f64> = (0..n).map(|t| y_mean + slope * (t as f64 - t_mean)).collect();
    let cycle = y.iter().zip(&trend).map(|(v, tr)| v - tr).collect();
    Ok(TrendCycle { trend, cycle })
}

/// Per-patient trend and cycle of every variable.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedSeries {
    pub patients: Vec<PatientDecomposition>,
    /// Patients skipped because their episode has fewer than two steps.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientDecomposition {
    pub patient_id: String,
    /// One entry per schema variable.
    pub variables: Vec<TrendCycle>,
}

pub fn decompose(table: &RecordTable, schema: &DatasetSchema) -> Result<DecomposedSeries> {
    table.validate(schema)?;
    let mut patients = Vec::new();
    let mut excluded = 0;
    for ep in table.episodes() {
        if ep.rows.len() < 2 {
            excluded += 1;
            continue;
        }
        let sub = RecordTable::new(ep.rows.to_vec())?;
        let variables = (0..schema.variables.len())
            .map(|i| decompose_series(&sub.ordinal_column(schema, i)?))
            .collect::<Result<Vec<_>>>()?;
        patients.push(PatientDecomposition {
            patient_id: ep.patient_id.to_string(),
            variables,
        });
    }
    if excluded > 0 {
        log::warn!("{excluded} single-step episodes excluded from the trend/cycle decomposition");
    }
    Ok(DecomposedSeries { patients, excluded })
}

/// Entrywise mean of per-patient τ matrices on trends and on cycles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicCorrelations {
    pub trend: CorrelationMatrix,
    pub cycle: CorrelationMatrix,
    pub patients: usize,
    pub excluded: usize,
}

pub fn dynamic_correlations(table: &RecordTable, schema: &DatasetSchema) -> Result<DynamicCorrelations> {
    let dec = decompose(table, schema)?;
    if dec.patients.is_empty() {
        return Err(Error::InsufficientData("no patient has at least two timesteps".into()));
    }
    let v = schema.variables.len();
    let per_patient = dec
        .patients
        .par_iter()
        .map(|p| {
            let trend: Vec<Vec<f64>> = p.variables.iter().map(|tc| tc.trend.clone()).collect();
            let cycle: Vec<Vec<f64>> = p.variables.iter().map(|tc| tc.cycle.clone()).collect();
            Ok((pairwise(&trend)?, pairwise(&cycle)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let average = |pick: fn(&(Vec<Option<f64>>, Vec<Option<f64>>)) -> &Vec<Option<f64>>| {
        let mut sums = vec![0.0; v * v];
        let mut counts = vec![0usize; v * v];
        for m in &per_patient {
            for (k, x) in pick(m).iter().enumerate() {
                if let Some(x) = x {
                    sums[k] += x;
                    counts[k] += 1;
                }
            }
        }
        let values = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect();
        CorrelationMatrix {
            variables: names(schema),
            values,
            counts,
        }
    };
    Ok(DynamicCorrelations {
        trend: average(|m| &m.0),
        cycle: average(|m| &m.1),
        patients: dec.patients.len(),
        excluded: dec.excluded,
    })
}

/// Static, trend and cycle τ matrices of one table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBundle {
    #[serde(rename = "static")]
    pub static_: CorrelationMatrix,
    pub trend: CorrelationMatrix,
    pub cycle: CorrelationMatrix,
}

impl CorrelationBundle {
    pub fn compute(table: &RecordTable, schema: &DatasetSchema) -> Result<Self> {
        let dynamic = dynamic_correlations(table, schema)?;
        Ok(Self {
            static_: static_correlations(table, schema)?,
            trend: dynamic.trend,
            cycle: dynamic.cycle,
        })
    }

    /// Largest absolute entrywise difference over entries defined in both.
    pub fn max_abs_difference(&self, other: &Self) -> f64 {
        [(&self.static_, &other.static_), (&self.trend, &other.trend), (&self.cycle, &other.cycle)]
            .iter()
            .flat_map(|(a, b)| a.values.iter().zip(&b.values))
            .filter_map(|(x, y)| Some((x.as_ref()? - y.as_ref()?).abs()))
            .fold(0.0, f64::max)
    }
}

/// Lower bound returned in place of `ln 0`.
pub const LOG_CLUSTER_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub u: f64,
    /// True when the mean squared deviation was below `1e-12`.
    pub floored: bool,
    /// Clusters that received at least one record.
    pub clusters_used: usize,
}

/// `U = ln((1/Γ) Σ_k (n_k^real / n_k − n^real / n)²)` over the non-empty
/// clusters of an explicit assignment.
pub fn log_cluster_from_assignment(assignment: &[usize], is_real: &[bool], gamma: usize) -> Result<ClusterScore> {
    if assignment.len() != is_real.len() || assignment.is_empty() {
        return Err(Error::shape("assignment and origin flags differ in length".to_string()));
    }
    let mut total = vec![0usize; gamma];
    let mut real = vec![0usize; gamma];
    for (&c, &r) in assignment.iter().zip(is_real) {
        if c >= gamma {
            return Err(Error::Parameter(format!("cluster {c} outside 0..{gamma}")));
        }
        total[c] += 1;
        real[c] += r as usize;
    }
    let n_real = is_real.iter().filter(|&&r| r).count() as f64;
    let c = n_real / assignment.len() as f64;
    let used: Vec<usize> = (0..gamma).filter(|&k| total[k] > 0).collect();
    let mean = used
        .iter()
        .map(|&k| (real[k] as f64 / total[k] as f64 - c).powi(2))
        .sum::<f64>()
        / used.len() as f64;
    let floored = mean < 1e-12;
    Ok(ClusterScore {
        u: if floored { LOG_CLUSTER_FLOOR } else { mean.ln() },
        floored,
        clusters_used: used.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogClusterConfig {
    pub gamma: usize,
    pub repetitions: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for LogClusterConfig {
    fn default() -> Self {
        Self {
            gamma: 20,
            repetitions: 20,
            sample_size: 100_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogClusterResult {
    pub mean_u: f64,
    pub repetitions: Vec<ClusterScore>,
    /// Rows drawn per dataset after capping at the available count.
    pub real_rows: usize,
    pub synthetic_rows: usize,
}

fn row_hash(row: &[f64]) -> u64 {
    let mut h = Fnv::default();
    for v in row {
        h.write_u64(v.to_bits());
    }
    h.finish()
}

#[derive(Default)]
struct Fnv(u64);

impl Hasher for Fnv {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        if self.0 == 0 {
            self.0 = 0xcbf2_9ce4_8422_2325;
        }
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Rows reordered by content hash (then content), so the input order of a
/// table cannot influence seeded sampling.
fn canonical_rows(rows: Vec<f64>, dim: usize) -> Vec<f64> {
    let mut keyed: Vec<(u64, &[f64])> = rows.chunks(dim).map(|r| (row_hash(r), r)).collect();
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            a.1.iter()
                .zip(b.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    keyed.into_iter().flat_map(|(_, r)| r.iter().copied()).collect()
}

/// Clusters merged samples of encoded real and synthetic records and
/// reports the mean of `U` over repetitions.
pub fn log_cluster(
    real: &RecordTable,
    syn: &RecordTable,
    schema: &DatasetSchema,
    config: &LogClusterConfig,
) -> Result<LogClusterResult> {
    real.validate(schema)?;
    syn.validate(schema)?;
    if real.is_empty() || syn.is_empty() {
        return Err(Error::InsufficientData("log-cluster metric needs rows in both tables".into()));
    }
    let dim = schema.width();
    let r = canonical_rows(encode_rows(real, schema)?, dim);
    let s = canonical_rows(encode_rows(syn, schema)?, dim);
    let (nr, ns) = (
        config.sample_size.min(real.len()),
        config.sample_size.min(syn.len()),
    );
    if nr < config.sample_size || ns < config.sample_size {
        log::info!("log-cluster sample capped at {nr} real and {ns} synthetic rows");
    }
    let reps = (0..config.repetitions)
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(rep as u64);
            let ri = index::sample(&mut rng, real.len(), nr);
            let si = index::sample(&mut rng, syn.len(), ns);
            let mut merged = Vec::with_capacity((nr + ns) * dim);
            for i in ri.iter() {
                merged.extend_from_slice(&r[i * dim..(i + 1) * dim]);
            }
            for i in si.iter() {
                merged.extend_from_slice(&s[i * dim..(i + 1) * dim]);
            }
            let mut is_real = vec![true; nr];
            is_real.resize(nr + ns, false);
            let gamma = config.gamma.min(nr + ns);
            let km = KMeans::fit(&merged, dim, &KMeansConfig::new(gamma, config.seed ^ (rep as u64) << 32))?;
            log_cluster_from_assignment(km.assignment(), &is_real, gamma)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_u = reps.iter().map(|r| r.u).sum::<f64>() / reps.len().max(1) as f64;
    Ok(LogClusterResult {
        mean_u,
        repetitions: reps,
        real_rows: nr,
        synthetic_rows: ns,
    })
}

fn distinct_levels(table: &RecordTable, var: usize) -> BTreeSet<String> {
    table
        .records()
        .iter()
        .filter_map(|r| r.values[var].as_label().map(str::to_string))
        .collect()
}

/// Mean over non-numeric variables of the share of real levels that also
/// appear in the synthetic data.
pub fn category_coverage(real: &RecordTable, syn: &RecordTable, schema: &DatasetSchema) -> Result<f64> {
    real.validate(schema)?;
    syn.validate(schema)?;
    let vars: Vec<usize> = (0..schema.variables.len())
        .filter(|&i| !schema.variables[i].kind.is_numeric())
        .collect();
    if vars.is_empty() {
        return Err(Error::NotApplicable("schema has no binary or categorical variables".into()));
    }
    let mut sum = 0.0;
    for &v in &vars {
        let r = distinct_levels(real, v);
        let s = distinct_levels(syn, v);
        let ratio = if r.is_empty() {
            1.0
        } else {
            r.intersection(&s).count() as f64 / r.len() as f64
        };
        sum += ratio.min(1.0);
    }
    Ok(sum / vars.len() as f64)
}

/// Joint counts of patients per quasi-identifier combination, including
/// combinations seen in only one of the two tables and, for non-numeric
/// variables, unseen level combinations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub variables: Vec<String>,
    pub cells: Vec<CoverageCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub key: Vec<String>,
    pub real: usize,
    pub synthetic: usize,
}

impl CoverageTable {
    pub fn get(&self, key: &[&str]) -> Option<&CoverageCell> {
        self.cells
            .iter()
            .find(|c| c.key.iter().map(String::as_str).eq(key.iter().copied()))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut header = self.variables.clone();
        header.push("real".into());
        header.push("synthetic".into());
        let mut rows = vec![header];
        for c in &self.cells {
            let mut row = c.key.clone();
            row.push(c.real.to_string());
            row.push(c.synthetic.to_string());
            rows.push(row);
        }
        write_rows(writer, &rows)
    }
}

pub fn demographic_coverage(
    real: &RecordTable,
    syn: &RecordTable,
    schema: &DatasetSchema,
    quasi: &[QuasiIdentifier],
) -> Result<CoverageTable> {
    real.validate(schema)?;
    syn.validate(schema)?;
    let mut counts: BTreeMap<Vec<String>, (usize, usize)> = BTreeMap::new();
    let real_keys = patient_classes(real, schema, quasi)?;
    let syn_keys = patient_classes(syn, schema, quasi)?;
    // Observed values per axis, plus every declared level for non-numerics.
    let mut axes: Vec<BTreeSet<String>> = vec![BTreeSet::new(); quasi.len()];
    for (q, axis) in quasi.iter().zip(axes.iter_mut()) {
        let spec = &schema.variables[schema.require_index(&q.variable)?];
        axis.extend(spec.levels.iter().cloned());
    }
    for key in real_keys.iter().chain(&syn_keys) {
        for (axis, v) in axes.iter_mut().zip(key) {
            axis.insert(v.clone());
        }
    }
    let mut grid: Vec<Vec<String>> = vec![Vec::new()];
    for axis in &axes {
        grid = grid
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut k = prefix.clone();
                    k.push(v.clone());
                    k
                })
            })
            .collect();
    }
    for key in grid {
        counts.insert(key, (0, 0));
    }
    for k in real_keys {
        counts.get_mut(&k).expect("key in grid").0 += 1;
    }
    for k in syn_keys {
        counts.get_mut(&k).expect("key in grid").1 += 1;
    }
    Ok(CoverageTable {
        variables: quasi.iter().map(|q| q.variable.clone()).collect(),
        cells: counts
            .into_iter()
            .map(|(key, (real, synthetic))| CoverageCell { key, real, synthetic })
            .collect(),
    })
}
