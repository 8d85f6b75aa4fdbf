//! Per-variable realism: the KS → t/F → three-sigma hypothesis cascade and
//! binned KL divergence.

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::data::{DatasetSchema, RecordTable, VariableKind};
use crate::error::{Error, Result};

/// Significance level used by every test unless configured otherwise.
pub const DEFAULT_ALPHA: f64 = 0.05;

/// Additive smoothing applied to every histogram cell before normalising.
pub const KL_SMOOTHING: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
    pub pass: bool,
}

impl TestOutcome {
    fn new(statistic: f64, p_value: f64, alpha: f64) -> Self {
        Self {
            statistic,
            p_value,
            pass: p_value >= alpha,
        }
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var)
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("KS test needs two non-empty samples".into()));
    }
    let (a, b) = (sorted(a), sorted(b));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (−1)^{j−1} exp(−2 j² λ²)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let a2 = -2.0 * lambda * lambda;
    let mut sum = 0.0;
    let mut sign = 2.0;
    let mut prev = 0.0;
    for j in 1..=100 {
        let term = sign * (a2 * (j * j) as f64).exp();
        sum += term;
        if term.abs() <= 1e-10 * prev || term.abs() <= 1e-12 * sum {
            return sum.clamp(0.0, 1.0);
        }
        sign = -sign;
        prev = term.abs();
    }
    1.0
}

/// KS test with the asymptotic two-sample p-value.
pub fn ks_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TestOutcome> {
    let d = ks_statistic(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let en = (na * nb / (na + nb)).sqrt();
    let p = kolmogorov_q((en + 0.12 + 0.11 / en) * d);
    Ok(TestOutcome::new(d, p, alpha))
}

/// Welch's unequal-variance two-sample t-test.
pub fn t_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TestOutcome> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData("t-test needs at least two values per sample".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let se2 = va / a.len() as f64 + vb / b.len() as f64;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            TestOutcome::new(0.0, 1.0, alpha)
        } else {
            TestOutcome::new((ma - mb).signum() * f64::INFINITY, 0.0, alpha)
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let (qa, qb) = (va / a.len() as f64, vb / b.len() as f64);
    let df = se2 * se2 / (qa * qa / (a.len() - 1) as f64 + qb * qb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Parameter(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TestOutcome::new(t, p, alpha))
}

/// Snedecor's variance-ratio test `F = s²_a / s²_b`, two-sided.
pub fn f_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TestOutcome> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData("F-test needs at least two values per sample".into()));
    }
    let (_, va) = mean_var(a);
    let (_, vb) = mean_var(b);
    if vb == 0.0 {
        return Err(Error::DegenerateVariance("second sample has zero variance".into()));
    }
    let f = va / vb;
    let dist = FisherSnedecor::new((a.len() - 1) as f64, (b.len() - 1) as f64)
        .map_err(|e| Error::Parameter(e.to_string()))?;
    let lower = dist.cdf(f);
    let p = (2.0 * lower.min(1.0 - lower)).min(1.0);
    Ok(TestOutcome::new(f, p, alpha))
}

/// One-way ANOVA between the two groups on each level's indicator. The
/// statistic is the mean F over levels; the test passes only if every level
/// passes.
pub fn anova_f_test(a: &[usize], b: &[usize], n_levels: usize, alpha: f64) -> Result<TestOutcome> {
    if a.is_empty() || b.is_empty() || a.len() + b.len() < 3 {
        return Err(Error::InsufficientData("ANOVA needs at least three observations".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let dist = FisherSnedecor::new(1.0, na + nb - 2.0).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut f_sum = 0.0;
    let mut p_min: f64 = 1.0;
    for level in 0..n_levels {
        let pa = a.iter().filter(|&&x| x == level).count() as f64 / na;
        let pb = b.iter().filter(|&&x| x == level).count() as f64 / nb;
        let p = (pa * na + pb * nb) / (na + nb);
        let ssb = na * (pa - p).powi(2) + nb * (pb - p).powi(2);
        let ssw = na * pa * (1.0 - pa) + nb * pb * (1.0 - pb);
        let (f, pv) = if ssb == 0.0 {
            (0.0, 1.0)
        } else if ssw == 0.0 {
            (f64::INFINITY, 0.0)
        } else {
            let f = ssb / (ssw / (na + nb - 2.0));
            (f, 1.0 - dist.cdf(f))
        };
        f_sum += f;
        p_min = p_min.min(pv);
    }
    Ok(TestOutcome::new(f_sum / n_levels as f64, p_min, alpha))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThreeSigmaOutcome {
    pub in_range_fraction: f64,
    pub pass: bool,
}

/// Passes iff every synthetic value lies within `mean(real) ± k·sd(real)`.
pub fn three_sigma_test(real: &[f64], syn: &[f64], k: f64) -> Result<ThreeSigmaOutcome> {
    if real.len() < 2 {
        return Err(Error::InsufficientData("three-sigma test needs two real values".into()));
    }
    let (m, var) = mean_var(real);
    let half = k * var.sqrt();
    let inside = syn.iter().filter(|&&x| (x - m).abs() <= half).count();
    let frac = if syn.is_empty() { 1.0 } else { inside as f64 / syn.len() as f64 };
    Ok(ThreeSigmaOutcome {
        in_range_fraction: frac,
        pass: inside == syn.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub alpha: f64,
    pub repetitions: usize,
    pub batch_size: usize,
    /// Width multiplier of the plausibility band.
    pub sigma_k: f64,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            repetitions: 100,
            batch_size: 32,
            sigma_k: 2.0,
            seed: 0,
        }
    }
}

/// Pass counts of one variable. `None` marks a test that does not apply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableCounts {
    pub variable: String,
    pub kind: VariableKind,
    pub ks: usize,
    pub t: Option<usize>,
    pub f: usize,
    pub three_sigma: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub alpha: f64,
    pub repetitions: usize,
    pub batch_size: usize,
    pub variables: Vec<VariableCounts>,
}

impl CascadeResult {
    pub fn get(&self, variable: &str) -> Option<&VariableCounts> {
        self.variables.iter().find(|v| v.variable == variable)
    }

    /// CSV with `X/R` cells (dashes where a test does not apply) followed by
    /// the raw counts.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let r = self.repetitions;
        let frac = |c: Option<usize>| c.map_or("- -".to_string(), |c| format!("{c}/{r}"));
        let raw = |c: Option<usize>| c.map_or(String::new(), |c| c.to_string());
        let mut rows = vec![vec![
            "variable", "ks", "t", "f", "three_sigma", "ks_count", "t_count", "f_count", "three_sigma_count",
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()];
        for v in &self.variables {
            rows.push(vec![
                v.variable.clone(),
                frac(Some(v.ks)),
                frac(v.t),
                frac(Some(v.f)),
                frac(v.three_sigma),
                v.ks.to_string(),
                raw(v.t),
                v.f.to_string(),
                raw(v.three_sigma),
            ]);
        }
        write_rows(writer, &rows)
    }
}

pub(crate) fn write_rows<W: Write, S: AsRef<str>>(writer: W, rows: &[Vec<S>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.write_record(row.iter().map(AsRef::as_ref)).map_err(|e| Error::Csv {
            row: 0,
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))
}

enum Column {
    Numeric(Vec<f64>),
    Levels(Vec<usize>, usize),
}

fn columns(table: &RecordTable, schema: &DatasetSchema) -> Result<Vec<Column>> {
    table.validate(schema)?;
    schema
        .variables
        .iter()
        .enumerate()
        .map(|(i, v)| {
            Ok(if v.kind.is_numeric() {
                Column::Numeric(table.numeric_column(i)?)
            } else {
                Column::Levels(table.level_column(schema, i)?, v.levels.len())
            })
        })
        .collect()
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

#[derive(Default, Clone, Copy)]
struct RepCounts {
    ks: usize,
    t: usize,
    f: usize,
    sigma: usize,
}

/// Runs `R` repetitions of the test cascade on batches of `b` rows drawn
/// from each table. Every repetition owns its own random stream, so the
/// result is independent of scheduling.
pub fn run_cascade(
    real: &RecordTable,
    syn: &RecordTable,
    schema: &DatasetSchema,
    config: &CascadeConfig,
) -> Result<CascadeResult> {
    let rc = columns(real, schema)?;
    let sc = columns(syn, schema)?;
    let b = config.batch_size;
    if b < 2 || real.len() < b || syn.len() < b {
        return Err(Error::InsufficientData(format!(
            "batches of {b} rows need at least that many rows in each table ({} real, {} synthetic)",
            real.len(),
            syn.len()
        )));
    }
    let alpha = config.alpha;
    let per_rep: Vec<Vec<RepCounts>> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| -> Result<Vec<RepCounts>> {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(rep as u64);
            let ri = index::sample(&mut rng, real.len(), b).into_vec();
            // Equal-sized tables share row indices, so a table compared
            // with itself sees identical batches.
            let si = if syn.len() == real.len() {
                ri.clone()
            } else {
                index::sample(&mut rng, syn.len(), b).into_vec()
            };
            rc.iter()
                .zip(&sc)
                .map(|(r, s)| {
                    let mut c = RepCounts::default();
                    match (r, s) {
                        (Column::Numeric(full), Column::Numeric(s)) => {
                            let (r, s) = (pick(full, &ri), pick(s, &si));
                            c.ks = ks_test(&r, &s, alpha)?.pass as usize;
                            c.t = t_test(&r, &s, alpha)?.pass as usize;
                            c.f = match f_test(&r, &s, alpha) {
                                Ok(o) => o.pass as usize,
                                Err(Error::DegenerateVariance(_)) => (mean_var(&r).1 == 0.0) as usize,
                                Err(e) => return Err(e),
                            };
                            // The plausibility band comes from the whole real variable.
                            c.sigma = three_sigma_test(full, &s, config.sigma_k)?.pass as usize;
                        }
                        (Column::Levels(r, n), Column::Levels(s, _)) => {
                            let (r, s) = (pick(r, &ri), pick(s, &si));
                            let as_f = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
                            c.ks = ks_test(&as_f(&r), &as_f(&s), alpha)?.pass as usize;
                            c.f = anova_f_test(&r, &s, *n, alpha)?.pass as usize;
                        }
                        _ => unreachable!("both tables validated against one schema"),
                    }
                    Ok(c)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let variables = schema
        .variables
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let sum = |f: fn(&RepCounts) -> usize| per_rep.iter().map(|r| f(&r[i])).sum::<usize>();
            let numeric = v.kind.is_numeric();
            VariableCounts {
                variable: v.name.clone(),
                kind: v.kind,
                ks: sum(|c| c.ks),
                t: numeric.then(|| sum(|c| c.t)),
                f: sum(|c| c.f),
                three_sigma: numeric.then(|| sum(|c| c.sigma)),
            }
        })
        .collect();
    Ok(CascadeResult {
        alpha,
        repetitions: config.repetitions,
        batch_size: b,
        variables,
    })
}

/// `Σ p_syn · ln(p_syn / p_real)` over histogram cells after adding
/// [`KL_SMOOTHING`] to every cell and renormalising.
pub fn kl_from_frequencies(p_syn: &[f64], p_real: &[f64]) -> Result<f64> {
    if p_syn.len() != p_real.len() || p_syn.is_empty() {
        return Err(Error::shape(format!(
            "frequency vectors of length {} and {}",
            p_syn.len(),
            p_real.len()
        )));
    }
    let smooth = |p: &[f64]| {
        let s: Vec<f64> = p.iter().map(|&x| x + KL_SMOOTHING).collect();
        let total: f64 = s.iter().sum();
        s.into_iter().map(|x| x / total).collect::<Vec<_>>()
    };
    let (ps, pr) = (smooth(p_syn), smooth(p_real));
    Ok(ps.iter().zip(&pr).map(|(&s, &r)| s * (s / r).ln()).sum::<f64>().max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEntry {
    pub variable: String,
    pub kl: f64,
    /// Cells empty in the real histogram but occupied in the synthetic one.
    pub smoothed_cells: usize,
}

fn frequencies(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / n.max(1) as f64).collect()
}

fn smoothed_cells(syn: &[usize], real: &[usize]) -> usize {
    syn.iter().zip(real).filter(|(&s, &r)| s > 0 && r == 0).count()
}

/// KL divergence of numeric samples over `bins` equal-width bins spanning
/// the pooled range.
pub fn kl_numeric(real: &[f64], syn: &[f64], bins: usize) -> Result<KlEntry> {
    if real.is_empty() || syn.is_empty() || bins == 0 {
        return Err(Error::InsufficientData("KL needs non-empty samples and bins".into()));
    }
    let lo = real.iter().chain(syn).copied().fold(f64::INFINITY, f64::min);
    let hi = real.iter().chain(syn).copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let bin = |x: f64| {
        if width == 0.0 {
            0
        } else {
            (((x - lo) / width) as usize).min(bins - 1)
        }
    };
    let mut cr = vec![0usize; bins];
    let mut cs = vec![0usize; bins];
    real.iter().for_each(|&x| cr[bin(x)] += 1);
    syn.iter().for_each(|&x| cs[bin(x)] += 1);
    Ok(KlEntry {
        variable: String::new(),
        kl: kl_from_frequencies(&frequencies(&cs), &frequencies(&cr))?,
        smoothed_cells: smoothed_cells(&cs, &cr),
    })
}

/// KL divergence of level-indexed samples over their level frequencies.
pub fn kl_levels(real: &[usize], syn: &[usize], n_levels: usize) -> Result<KlEntry> {
    if real.is_empty() || syn.is_empty() {
        return Err(Error::InsufficientData("KL needs non-empty samples".into()));
    }
    let mut cr = vec![0usize; n_levels];
    let mut cs = vec![0usize; n_levels];
    real.iter().for_each(|&x| cr[x] += 1);
    syn.iter().for_each(|&x| cs[x] += 1);
    Ok(KlEntry {
        variable: String::new(),
        kl: kl_from_frequencies(&frequencies(&cs), &frequencies(&cr))?,
        smoothed_cells: smoothed_cells(&cs, &cr),
    })
}

/// Per-variable KL divergence table over all rows of both tables.
pub fn kl_table(real: &RecordTable, syn: &RecordTable, schema: &DatasetSchema, bins: usize) -> Result<Vec<KlEntry>> {
    let rc = columns(real, schema)?;
    let sc = columns(syn, schema)?;
    schema
        .variables
        .iter()
        .zip(rc.iter().zip(&sc))
        .map(|(v, cols)| {
            let mut e = match cols {
                (Column::Numeric(r), Column::Numeric(s)) => kl_numeric(r, s, bins)?,
                (Column::Levels(r, n), Column::Levels(s, _)) => kl_levels(r, s, *n)?,
                _ => unreachable!("both tables validated against one schema"),
            };
            e.variable = v.name.clone();
            Ok(e)
        })
        .collect()
}

pub fn write_kl_csv<W: Write>(entries: &[KlEntry], writer: W) -> Result<()> {
    let mut rows = vec![vec!["variable".to_string(), "kl".into(), "smoothed_cells".into(), "smoothing".into()]];
    for e in entries {
        rows.push(vec![
            e.variable.clone(),
            e.kl.to_string(),
            e.smoothed_cells.to_string(),
            KL_SMOOTHING.to_string(),
        ]);
    }
    write_rows(writer, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_examples() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[5.0, 6.0, 7.0]).unwrap(), 1.0);
        let d = ks_statistic(&[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5]).unwrap();
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
        assert!(ks_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 0.05).unwrap().pass);
        assert!(ks_statistic(&[], &[1.0]).is_err());
    }

    #[test]
    fn kolmogorov_tail_reference_values() {
        // Q(1) = 0.26999967..., Q(0.5) = 0.96394524...
        assert!((kolmogorov_q(1.0) - 0.269_999_671_677_5).abs() < 1e-9);
        assert!((kolmogorov_q(0.5) - 0.963_945_243_664_7).abs() < 1e-6);
        assert_eq!(kolmogorov_q(0.0), 1.0);
    }

    #[test]
    fn t_test_degenerate_cases() {
        let a = [2.0, 2.0, 2.0];
        assert!(t_test(&a, &a, 0.05).unwrap().pass);
        assert!(!t_test(&a, &[3.0, 3.0, 3.0], 0.05).unwrap().pass);
        let b: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let c: Vec<f64> = b.iter().map(|x| x + 100.0).collect();
        assert!(!t_test(&b, &c, 0.05).unwrap().pass);
        assert_eq!(t_test(&b, &b, 0.05).unwrap().statistic, 0.0);
    }

    #[test]
    fn f_test_examples() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let o = f_test(&a, &a, 0.05).unwrap();
        assert_eq!(o.statistic, 1.0);
        assert!(o.pass);
        assert!(matches!(f_test(&a, &[1.0, 1.0], 0.05), Err(Error::DegenerateVariance(_))));
        let same = [0, 1, 0, 1, 1, 0];
        assert!(anova_f_test(&same, &same, 2, 0.05).unwrap().pass);
    }

    #[test]
    fn three_sigma_examples() {
        let real = [1.0, 2.0, 3.0, 4.0];
        assert!(three_sigma_test(&real, &[2.5, 2.5], 2.0).unwrap().pass);
        let sd = mean_var(&real).1.sqrt();
        let o = three_sigma_test(&real, &[2.5, 2.5 + 3.0 * sd], 2.0).unwrap();
        assert!(!o.pass);
        assert_eq!(o.in_range_fraction, 0.5);
    }

    #[test]
    fn kl_hand_value() {
        let kl = kl_from_frequencies(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let exact = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - exact).abs() < 1e-8);
        assert!((kl - 0.1438).abs() < 1e-4);
        assert_eq!(kl_from_frequencies(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
    }
}
