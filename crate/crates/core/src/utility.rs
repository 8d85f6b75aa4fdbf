//! Offline-RL utility: compress observations with partial least squares,
//! abstract states with k-means, learn a batch-constrained tabular Q policy
//! and compare the resulting action distributions.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{encode_rows, DatasetSchema, Record, RecordTable};
use crate::error::{Error, Result};
use crate::fidelity::write_rows;
use crate::kmeans::{KMeans, KMeansConfig};

/// Paired decomposition of an observation block `X` and an action block `Y`
/// (NIPALS PLS with regression-mode deflation). `X` columns are
/// standardised, `Y` columns centred.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossDecomposition {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    /// `p × k` weight vectors, column-major per component.
    pub weights: Vec<Vec<f64>>,
    /// `p × k` projection applied to standardised rows, one column per
    /// component.
    pub rotations: Vec<Vec<f64>>,
}

fn column_stats(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut means = Vec::with_capacity(x.ncols());
    let mut sds = Vec::with_capacity(x.ncols());
    for c in x.column_iter() {
        let m = c.sum() / n;
        let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0);
        means.push(m);
        sds.push(var.sqrt());
    }
    (means, sds)
}

impl CrossDecomposition {
    /// Fits up to `k` components. Fewer are returned, with a warning, when
    /// the cross-covariance is exhausted first.
    pub fn fit(obs: &[f64], obs_dim: usize, actions: &[f64], action_dim: usize, k: usize) -> Result<Self> {
        if obs_dim == 0 || action_dim == 0 || obs.len() % obs_dim != 0 || actions.len() % action_dim != 0 {
            return Err(Error::shape("observation/action blocks are not rectangular".to_string()));
        }
        let n = obs.len() / obs_dim;
        if actions.len() / action_dim != n {
            return Err(Error::shape(format!(
                "{n} observation rows vs {} action rows",
                actions.len() / action_dim
            )));
        }
        if n < 2 {
            return Err(Error::InsufficientData("cross decomposition needs two rows".into()));
        }
        if k == 0 || k > obs_dim {
            return Err(Error::Parameter(format!("k = {k} outside 1..={obs_dim}")));
        }
        let x = DMatrix::from_row_slice(n, obs_dim, obs);
        let y = DMatrix::from_row_slice(n, action_dim, actions);
        let (x_mean, x_sd) = column_stats(&x);
        let (y_mean, _) = column_stats(&y);
        let x_scale: Vec<f64> = x_sd.iter().map(|&s| if s > 0.0 { s } else { 1.0 }).collect();
        let mut xh = x.clone();
        for (j, mut c) in xh.column_iter_mut().enumerate() {
            c.iter_mut().for_each(|v| *v = (*v - x_mean[j]) / x_scale[j]);
        }
        let mut yh = y.clone();
        for (j, mut c) in yh.column_iter_mut().enumerate() {
            c.iter_mut().for_each(|v| *v -= y_mean[j]);
        }

        let mut w_cols: Vec<DVector<f64>> = Vec::new();
        let mut p_cols: Vec<DVector<f64>> = Vec::new();
        let mut first_strength = None;
        for _ in 0..k {
            let m = xh.transpose() * &yh;
            let eig = SymmetricEigen::new(&m * m.transpose());
            let (top, &lambda) = eig
                .eigenvalues
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("non-empty spectrum");
            let base = *first_strength.get_or_insert(lambda);
            if !(lambda > 1e-12 * base.max(f64::MIN_POSITIVE)) || lambda <= 0.0 {
                break;
            }
            let mut w = eig.eigenvectors.column(top).into_owned();
            let pivot = w.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
            if pivot < 0.0 {
                w = -w;
            }
            let t = &xh * &w;
            let tt = t.dot(&t);
            if tt <= 0.0 {
                break;
            }
            let p = xh.transpose() * &t / tt;
            let c = yh.transpose() * &t / tt;
            xh -= &t * p.transpose();
            yh -= &t * c.transpose();
            w_cols.push(w);
            p_cols.push(p);
        }
        if w_cols.is_empty() {
            return Err(Error::InsufficientData(
                "observations carry no covariance with the actions".into(),
            ));
        }
        if w_cols.len() < k {
            log::warn!(
                "cross decomposition reduced from {k} to {} components: blocks are rank deficient",
                w_cols.len()
            );
        }
        let w = DMatrix::from_columns(&w_cols);
        let p = DMatrix::from_columns(&p_cols);
        let ptw = p.transpose() * &w;
        let inv = ptw
            .try_inverse()
            .ok_or_else(|| Error::InsufficientData("singular loading matrix".into()))?;
        let r = &w * inv;
        let to_cols = |m: &DMatrix<f64>| m.column_iter().map(|c| c.iter().copied().collect()).collect();
        Ok(Self {
            x_mean,
            x_scale,
            weights: to_cols(&w),
            rotations: to_cols(&r),
        })
    }

    pub fn components(&self) -> usize {
        self.rotations.len()
    }

    /// Scores of row-major observations, `rows × k`.
    pub fn transform(&self, obs: &[f64]) -> Vec<f64> {
        let p = self.x_mean.len();
        let k = self.components();
        let mut out = Vec::with_capacity(obs.len() / p * k);
        let mut z = vec![0.0; p];
        for row in obs.chunks(p) {
            for j in 0..p {
                z[j] = (row[j] - self.x_mean[j]) / self.x_scale[j];
            }
            for r in &self.rotations {
                out.push(z.iter().zip(r).map(|(a, b)| a * b).sum());
            }
        }
        out
    }
}

/// Standardised scores clustered into discrete states.
#[derive(Clone, Debug, PartialEq)]
pub struct StateModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub kmeans: KMeans,
}

impl StateModel {
    pub fn fit(scores: &[f64], dim: usize, k: usize, seed: u64) -> Result<Self> {
        if dim == 0 || scores.len() % dim != 0 {
            return Err(Error::shape("scores are not rectangular".to_string()));
        }
        let n = scores.len() / dim;
        if n < k {
            return Err(Error::InsufficientData(format!("{n} rows for {k} states")));
        }
        let m = DMatrix::from_row_slice(n, dim, scores);
        let (mean, sd) = column_stats(&m);
        let scale: Vec<f64> = sd.iter().map(|&s| if s > 0.0 { s } else { 1.0 }).collect();
        let z = standardize(scores, &mean, &scale);
        let kmeans = KMeans::fit(&z, dim, &KMeansConfig::new(k, seed))?;
        Ok(Self { mean, scale, kmeans })
    }

    pub fn n_states(&self) -> usize {
        self.kmeans.k()
    }

    pub fn assign(&self, scores: &[f64]) -> Vec<usize> {
        let dim = self.mean.len();
        standardize(scores, &self.mean, &self.scale)
            .chunks(dim)
            .map(|r| self.kmeans.predict(r))
            .collect()
    }
}

fn standardize(rows: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    let d = mean.len();
    rows.chunks(d)
        .flat_map(|r| (0..d).map(move |j| (r[j] - mean[j]) / scale[j]))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpDataset {
    pub n_states: usize,
    pub n_actions: usize,
    /// Chronological within each episode, episodes back to back.
    pub transitions: Vec<Transition>,
}

impl MdpDataset {
    pub fn new(n_states: usize, n_actions: usize, transitions: Vec<Transition>) -> Result<Self> {
        for t in &transitions {
            if t.state >= n_states || t.next_state >= n_states || t.action >= n_actions {
                return Err(Error::Parameter(format!("transition {t:?} outside the state/action space")));
            }
            if !t.reward.is_finite() {
                return Err(Error::Parameter(format!("non-finite reward in {t:?}")));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcqConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub iterations: usize,
    /// Minimum `N(s,a) / max_a' N(s,a')` for an action to be admissible.
    pub threshold: f64,
}

impl Default for BcqConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha: 0.01,
            iterations: 100,
            threshold: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcqPolicy {
    pub config: BcqConfig,
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major `states × actions`.
    pub q: Vec<f64>,
    pub counts: Vec<usize>,
}

impl BcqPolicy {
    pub fn admissible(&self, s: usize, a: usize) -> bool {
        let row = &self.counts[s * self.n_actions..(s + 1) * self.n_actions];
        let max = row.iter().copied().max().unwrap_or(0);
        max > 0 && row[a] > 0 && row[a] as f64 / max as f64 >= self.config.threshold
    }

    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    /// Highest-valued admissible action (lowest index on ties); `None` for
    /// states without observed actions.
    pub fn greedy(&self, s: usize) -> Option<usize> {
        let mut best: Option<usize> = None;
        for a in 0..self.n_actions {
            if self.admissible(s, a) && best.is_none_or(|b| self.q(s, a) > self.q(s, b)) {
                best = Some(a);
            }
        }
        best
    }

    fn max_admissible(&self, s: usize) -> f64 {
        self.greedy(s).map_or(0.0, |a| self.q(s, a))
    }
}

/// Tabular batch-constrained Q-learning: each iteration sweeps every
/// transition in order.
pub fn bcq_train(data: &MdpDataset, config: &BcqConfig) -> Result<BcqPolicy> {
    if data.transitions.is_empty() {
        return Err(Error::InsufficientData("no transitions".into()));
    }
    if !(0.0..=1.0).contains(&config.gamma) || !(0.0..=1.0).contains(&config.alpha) {
        return Err(Error::Config(format!("gamma and alpha must lie in [0, 1], got {config:?}")));
    }
    let (ns, na) = (data.n_states, data.n_actions);
    let mut counts = vec![0usize; ns * na];
    for t in &data.transitions {
        counts[t.state * na + t.action] += 1;
    }
    let mut policy = BcqPolicy {
        config: *config,
        n_states: ns,
        n_actions: na,
        q: vec![0.0; ns * na],
        counts,
    };
    let unvisited = (0..ns).filter(|&s| policy.greedy(s).is_none()).count();
    if unvisited > 0 {
        log::warn!("{unvisited} of {ns} states have no observed actions and get no policy");
    }
    for _ in 0..config.iterations {
        for t in &data.transitions {
            let boot = if t.terminal {
                0.0
            } else {
                config.gamma * policy.max_admissible(t.next_state)
            };
            let q = &mut policy.q[t.state * na + t.action];
            *q += config.alpha * (t.reward + boot - *q);
        }
    }
    if let Some(v) = policy.q.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("Q table ({v})")));
    }
    Ok(policy)
}

/// Scores a record for the transition that leaves it.
pub trait Reward: Send + Sync {
    fn reward(&self, next: &Record) -> f64;
}

/// +1 when a numeric variable lies inside `[lo, hi]`, else 0.
#[derive(Clone, Debug, PartialEq)]
pub struct BandReward {
    pub variable: String,
    pub lo: f64,
    pub hi: f64,
    index: usize,
}

impl BandReward {
    pub fn new(schema: &DatasetSchema, variable: &str, lo: f64, hi: f64) -> Result<Self> {
        let index = schema.require_index(variable)?;
        if !schema.variables[index].kind.is_numeric() {
            return Err(Error::Config(format!("reward variable `{variable}` must be numeric")));
        }
        Ok(Self {
            variable: variable.into(),
            lo,
            hi,
            index,
        })
    }
}

impl Reward for BandReward {
    fn reward(&self, next: &Record) -> f64 {
        match next.values[self.index].as_number() {
            Some(x) if x >= self.lo && x <= self.hi => 1.0,
            _ => 0.0,
        }
    }
}

/// The declared action variables and their joint level space.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSpace {
    pub variables: Vec<String>,
    pub levels: Vec<Vec<String>>,
    indices: Vec<usize>,
}

impl ActionSpace {
    pub fn new(schema: &DatasetSchema, variables: &[String]) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::Config("no action variables declared".into()));
        }
        let mut indices = Vec::new();
        let mut levels = Vec::new();
        for v in variables {
            let i = schema.require_index(v)?;
            let spec = &schema.variables[i];
            if spec.kind.is_numeric() {
                return Err(Error::Config(format!("action variable `{v}` must be binary or categorical")));
            }
            indices.push(i);
            levels.push(spec.levels.clone());
        }
        Ok(Self {
            variables: variables.to_vec(),
            levels,
            indices,
        })
    }

    pub fn size(&self) -> usize {
        self.levels.iter().map(Vec::len).product()
    }

    /// Mixed-radix id with the first variable most significant.
    pub fn action_of(&self, record: &Record, schema: &DatasetSchema) -> Result<usize> {
        let mut id = 0;
        for (&i, lv) in self.indices.iter().zip(&self.levels) {
            let label = record.values[i].as_label().unwrap_or("");
            let k = schema.variables[i].level_index(label).ok_or_else(|| Error::Schema {
                variable: schema.variables[i].name.clone(),
                message: format!("unknown level `{label}`"),
            })?;
            id = id * lv.len() + k;
        }
        Ok(id)
    }

    pub fn label(&self, id: usize) -> Vec<String> {
        let mut rest = id;
        let mut out = vec![String::new(); self.levels.len()];
        for (j, lv) in self.levels.iter().enumerate().rev() {
            out[j] = lv[rest % lv.len()].clone();
            rest /= lv.len();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityConfig {
    pub action_variables: Vec<String>,
    pub components: usize,
    pub states: usize,
    pub bcq: BcqConfig,
    pub seed: u64,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        Self {
            action_variables: Vec::new(),
            components: 5,
            states: 100,
            bcq: BcqConfig::default(),
            seed: 0,
        }
    }
}

/// Observation rows: the encoded record with the action channels removed.
fn observations(table: &RecordTable, schema: &DatasetSchema, actions: &ActionSpace) -> Result<(Vec<f64>, usize)> {
    let n = schema.width();
    let offsets = schema.offsets();
    let mut keep = vec![true; n];
    for &i in &actions.indices {
        for c in offsets[i]..offsets[i] + schema.variables[i].width() {
            keep[c] = false;
        }
    }
    let dim = keep.iter().filter(|&&k| k).count();
    if dim == 0 {
        return Err(Error::Config("no observation variables left besides the actions".into()));
    }
    let rows = encode_rows(table, schema)?;
    let obs = rows
        .chunks(n)
        .flat_map(|r| r.iter().zip(&keep).filter(|(_, &k)| k).map(|(&v, _)| v))
        .collect();
    Ok((obs, dim))
}

/// A fitted decomposition → states → policy chain.
#[derive(Clone, Debug)]
pub struct UtilityModel {
    pub actions: ActionSpace,
    pub decomposition: CrossDecomposition,
    pub states: StateModel,
    pub mdp: MdpDataset,
    pub policy: BcqPolicy,
    /// Most frequent behaviour action, used where a state has no policy.
    pub fallback_action: usize,
}

impl UtilityModel {
    pub fn fit(table: &RecordTable, schema: &DatasetSchema, reward: &dyn Reward, config: &UtilityConfig) -> Result<Self> {
        table.validate(schema)?;
        let actions = ActionSpace::new(schema, &config.action_variables)?;
        let (obs, dim) = observations(table, schema, &actions)?;
        let ids = table
            .records()
            .iter()
            .map(|r| actions.action_of(r, schema))
            .collect::<Result<Vec<_>>>()?;
        let na = actions.size();
        let mut onehot = vec![0.0; ids.len() * na];
        for (row, &a) in ids.iter().enumerate() {
            onehot[row * na + a] = 1.0;
        }
        let decomposition = CrossDecomposition::fit(&obs, dim, &onehot, na, config.components.min(dim))?;
        let scores = decomposition.transform(&obs);
        let states = StateModel::fit(&scores, decomposition.components(), config.states, config.seed)?;
        let assigned = states.assign(&scores);

        let mut transitions = Vec::with_capacity(ids.len());
        let mut row = 0;
        for ep in table.episodes() {
            let len = ep.rows.len();
            for t in 0..len {
                let last = t + 1 == len;
                let next = if last { row } else { row + 1 };
                transitions.push(Transition {
                    state: assigned[row],
                    action: ids[row],
                    reward: reward.reward(&ep.rows[if last { t } else { t + 1 }]),
                    next_state: assigned[next],
                    terminal: last,
                });
                row += 1;
            }
        }
        let mdp = MdpDataset::new(states.n_states(), na, transitions)?;
        let policy = bcq_train(&mdp, &config.bcq)?;
        let mut freq = vec![0usize; na];
        ids.iter().for_each(|&a| freq[a] += 1);
        let fallback_action = (0..na).max_by_key(|&a| (freq[a], std::cmp::Reverse(a))).unwrap_or(0);
        Ok(Self {
            actions,
            decomposition,
            states,
            mdp,
            policy,
            fallback_action,
        })
    }

    /// Greedy action for every record of `table`.
    pub fn act(&self, table: &RecordTable, schema: &DatasetSchema) -> Result<Vec<usize>> {
        let (obs, _) = observations(table, schema, &self.actions)?;
        let states = self.states.assign(&self.decomposition.transform(&obs));
        Ok(states
            .into_iter()
            .map(|s| self.policy.greedy(s).unwrap_or(self.fallback_action))
            .collect())
    }

    /// Distribution of greedy actions over the records of `table`, i.e.
    /// over states weighted by how often `table` visits them.
    pub fn heatmap(&self, table: &RecordTable, schema: &DatasetSchema) -> Result<ActionHeatmap> {
        ActionHeatmap::from_actions(&self.actions, &self.act(table, schema)?)
    }
}

/// Percentage of greedy actions per joint action level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionHeatmap {
    pub variables: Vec<String>,
    pub levels: Vec<Vec<String>>,
    /// Indexed by action id; sums to 100.
    pub percent: Vec<f64>,
}

impl ActionHeatmap {
    pub fn from_actions(space: &ActionSpace, actions: &[usize]) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InsufficientData("no actions to tabulate".into()));
        }
        let mut counts = vec![0usize; space.size()];
        for &a in actions {
            counts[a] += 1;
        }
        Ok(Self {
            variables: space.variables.clone(),
            levels: space.levels.clone(),
            percent: counts
                .iter()
                .map(|&c| 100.0 * c as f64 / actions.len() as f64)
                .collect(),
        })
    }

    /// Rows are levels of the first action variable, columns the joint
    /// levels of the rest.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let first = self.levels[0].len();
        let cols = self.percent.len() / first;
        let tail = ActionSpace {
            variables: self.variables[1..].to_vec(),
            levels: self.levels[1..].to_vec(),
            indices: Vec::new(),
        };
        let mut header = vec![self.variables.join(" / ")];
        header.extend((0..cols).map(|c| {
            if tail.levels.is_empty() {
                "percent".to_string()
            } else {
                tail.label(c).join(" / ")
            }
        }));
        let mut rows = vec![header];
        for r in 0..first {
            let mut row = vec![self.levels[0][r].clone()];
            row.extend((0..cols).map(|c| format!("{:.2}", self.percent[r * cols + c])));
            rows.push(row);
        }
        write_rows(writer, &rows)
    }
}

/// Total-variation distance between two heatmaps, in `[0, 1]`.
pub fn compare_policies(a: &ActionHeatmap, b: &ActionHeatmap) -> Result<f64> {
    if a.levels != b.levels || a.variables != b.variables {
        return Err(Error::shape("heatmaps span different action spaces".to_string()));
    }
    Ok(0.5 * a.percent.iter().zip(&b.percent).map(|(x, y)| (x - y).abs()).sum::<f64>() / 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(levels: &[usize]) -> ActionSpace {
        ActionSpace {
            variables: (0..levels.len()).map(|i| format!("a{i}")).collect(),
            levels: levels
                .iter()
                .map(|&n| (0..n).map(|k| format!("L{k}")).collect())
                .collect(),
            indices: Vec::new(),
        }
    }

    #[test]
    fn heatmap_and_tv() {
        let s = space(&[2, 2]);
        let one = ActionHeatmap::from_actions(&s, &[3, 3, 3]).unwrap();
        assert_eq!(one.percent, vec![0.0, 0.0, 0.0, 100.0]);
        let other = ActionHeatmap::from_actions(&s, &[0]).unwrap();
        assert_eq!(compare_policies(&one, &other).unwrap(), 1.0);
        assert_eq!(compare_policies(&one, &one).unwrap(), 0.0);
        let p = ActionHeatmap::from_actions(&s, &[0, 1, 2, 3]).unwrap();
        let q = ActionHeatmap::from_actions(&s, &[0, 0, 1, 1]).unwrap();
        // |25−50| + |25−50| + 25 + 25 = 100 → TV 0.5
        assert!((compare_policies(&p, &q).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(s.label(2), vec!["L1", "L0"]);
    }

    #[test]
    fn zero_step_size_keeps_initialisation() {
        let mdp = MdpDataset::new(
            2,
            2,
            vec![Transition {
                state: 0,
                action: 1,
                reward: 1.0,
                next_state: 1,
                terminal: true,
            }],
        )
        .unwrap();
        let p = bcq_train(
            &mdp,
            &BcqConfig {
                alpha: 0.0,
                ..BcqConfig::default()
            },
        )
        .unwrap();
        assert!(p.q.iter().all(|&v| v == 0.0));
        assert_eq!(p.greedy(0), Some(1));
        assert_eq!(p.greedy(1), None);
    }
}
