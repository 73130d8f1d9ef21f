//! Conditional Covariance Test: learn a Markov graph from a covariance estimate.
//!
//! A pair `(i, j)` is an edge when every conditioning set `S ⊆ V∖{i,j}` with
//! `|S| ≤ η` leaves a dependence above `ξ`. The minimized quantity is the
//! absolute conditional covariance or, by default, the absolute conditional
//! correlation `|Σ(i,j|S)| / √(Σ(i,i|S) Σ(j,j|S))`, which is scale free.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix};
use serde::{Deserialize, Serialize};

use crate::case_io::BusId;
use crate::error::{Error, Result};
use crate::gmrf::SampleMatrix;
use crate::grid_model::EdgeSet;
use crate::stream_cov::{batch_covariance, conditioning_ridge};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    /// `|Σ(i,j|S)| / √(Σ(i,i|S) Σ(j,j|S))`.
    #[default]
    Correlation,
    /// `|Σ(i,j|S)|`, in covariance units.
    Covariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CctConfig {
    pub xi: f64,
    pub eta: usize,
    #[serde(default)]
    pub statistic: Statistic,
}

impl CctConfig {
    pub fn new(xi: f64, eta: usize, statistic: Statistic) -> Result<Self> {
        let cfg = CctConfig { xi, eta, statistic };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi.is_finite() && self.xi > 0.0) {
            return Err(Error::invalid(format!("xi must be positive, got {}", self.xi)));
        }
        Ok(())
    }
}

/// Learned graph with the witness `min_S stat(i,j|S)` of every pair.
///
/// For pairs that were rejected the search stops as soon as the running
/// minimum drops to `ξ`, so their witness is only an upper bound on the full
/// minimum. Edge witnesses are always exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovGraph {
    pub var_ids: Vec<BusId>,
    pub edges: EdgeSet,
    pub witnesses: Vec<(BusId, BusId, f64)>,
}

impl MarkovGraph {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization is infallible")
    }

    /// Symmetric 0/1 adjacency matrix with a header row of bus ids.
    pub fn write_adjacency_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["bus".to_string()];
        header.extend(self.var_ids.iter().map(|id| id.to_string()));
        w.write_record(&header)?;
        for &a in &self.var_ids {
            let mut row = vec![a.to_string()];
            row.extend(
                self.var_ids
                    .iter()
                    .map(|&b| if self.edges.contains(a, b) { "1" } else { "0" }.to_string()),
            );
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Lexicographic `k`-subsets of `0..n`.
struct Combinations {
    n: usize,
    idx: Vec<usize>,
    done: bool,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Combinations { n, idx: (0..k).collect(), done: k > n }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        let k = self.idx.len();
        let mut pos = k;
        while pos > 0 && self.idx[pos - 1] == self.n - k + pos - 1 {
            pos -= 1;
        }
        if pos == 0 {
            self.done = true;
        } else {
            self.idx[pos - 1] += 1;
            for q in pos..k {
                self.idx[q] = self.idx[q - 1] + 1;
            }
        }
        Some(out)
    }
}

/// Largest usable conditioning-set size for `p` variables.
pub fn effective_eta(eta: usize, p: usize) -> usize {
    eta.min(p.saturating_sub(2))
}

/// Symmetric matrix of witnesses `min_{|S| ≤ η} stat(i,j|S)` with a zero diagonal.
///
/// Sets are visited smallest first. With `cutoff = Some(ξ)` a pair stops being
/// updated once its running minimum is at or below `ξ`.
pub fn witness_matrix(
    cov: &DMatrix<f64>,
    eta: usize,
    statistic: Statistic,
    cutoff: Option<f64>,
) -> Result<DMatrix<f64>> {
    let p = cov.nrows();
    if cov.ncols() != p {
        return Err(Error::Dimension { expected: p, got: cov.ncols() });
    }
    let mut w = DMatrix::from_element(p, p, f64::INFINITY);
    w.fill_diagonal(0.0);
    let mut alive = DMatrix::from_element(p, p, true);
    alive.fill_diagonal(false);
    let mut n_alive = p * p.saturating_sub(1);
    let mut in_s = vec![false; p];
    let mut cond = DMatrix::<f64>::zeros(p, p);

    'sizes: for k in 0..=effective_eta(eta, p) {
        for s in Combinations::new(p, k) {
            if n_alive == 0 {
                break 'sizes;
            }
            s.iter().for_each(|&v| in_s[v] = true);
            conditioned(cov, &s, &mut cond)?;
            for i in 0..p {
                if in_s[i] {
                    continue;
                }
                for j in i + 1..p {
                    if in_s[j] || !alive[(i, j)] {
                        continue;
                    }
                    let v = match statistic {
                        Statistic::Covariance => cond[(i, j)].abs(),
                        Statistic::Correlation => {
                            let denom = (cond[(i, i)] * cond[(j, j)]).sqrt();
                            if denom > 0.0 {
                                cond[(i, j)].abs() / denom
                            } else {
                                0.0
                            }
                        }
                    };
                    if v < w[(i, j)] {
                        w[(i, j)] = v;
                        w[(j, i)] = v;
                    }
                    if cutoff.is_some_and(|xi| w[(i, j)] <= xi) {
                        alive[(i, j)] = false;
                        alive[(j, i)] = false;
                        n_alive -= 2;
                    }
                }
            }
            s.iter().for_each(|&v| in_s[v] = false);
        }
    }
    Ok(w)
}

/// Writes `Σ − Σ(:,S) Σ(S,S)⁻¹ Σ(S,:)` into `out` (rows/columns in `S` are garbage).
fn conditioned(cov: &DMatrix<f64>, s: &[usize], out: &mut DMatrix<f64>) -> Result<()> {
    out.copy_from(cov);
    if s.is_empty() {
        return Ok(());
    }
    let k = s.len();
    let block = DMatrix::from_fn(k, k, |a, b| cov[(s[a], s[b])]);
    let chol = match Cholesky::new(block.clone()) {
        Some(c) => c,
        None => {
            let ridge = conditioning_ridge(cov, s);
            Cholesky::new(block + DMatrix::identity(k, k) * ridge)
                .ok_or_else(|| Error::Singular("conditioning block Σ(S,S)".into()))?
        }
    };
    let rows = DMatrix::from_fn(k, cov.ncols(), |a, c| cov[(s[a], c)]);
    let mut y = rows;
    chol.l().solve_lower_triangular_mut(&mut y);
    *out -= y.tr_mul(&y);
    Ok(())
}

fn graph_from_witnesses(w: &DMatrix<f64>, var_ids: &[BusId], xi: f64) -> MarkovGraph {
    let mut edges = EdgeSet::new();
    let mut witnesses = Vec::new();
    for a in 0..var_ids.len() {
        for b in a + 1..var_ids.len() {
            let v = w[(a, b)];
            if v > xi {
                edges.insert(var_ids[a], var_ids[b]);
            }
            witnesses.push((var_ids[a], var_ids[b], v));
        }
    }
    MarkovGraph { var_ids: var_ids.to_vec(), edges, witnesses }
}

/// Runs the test on a covariance estimate whose rows follow `var_ids`.
pub fn run_cct(cov: &DMatrix<f64>, var_ids: &[BusId], config: &CctConfig) -> Result<MarkovGraph> {
    config.validate()?;
    if cov.nrows() != var_ids.len() {
        return Err(Error::Dimension { expected: var_ids.len(), got: cov.nrows() });
    }
    let w = witness_matrix(cov, config.eta, config.statistic, Some(config.xi))?;
    Ok(graph_from_witnesses(&w, var_ids, config.xi))
}

/// Edges of a precomputed witness matrix at threshold `xi`.
pub fn threshold_witnesses(w: &DMatrix<f64>, var_ids: &[BusId], xi: f64) -> EdgeSet {
    graph_from_witnesses(w, var_ids, xi).edges
}

/// Number of edges present in exactly one of the two graphs.
pub fn edit_distance(a: &EdgeSet, b: &EdgeSet) -> usize {
    a.symmetric_difference_len(b)
}

/// Threshold candidates for [`tune_threshold`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XiGrid {
    /// Every interval between consecutive distinct witness values.
    Breakpoints,
    /// An explicit list of positive thresholds.
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub xi: f64,
    pub edit_distance: usize,
    /// The ξ interval whose midpoint was chosen.
    pub interval: (f64, f64),
    /// Smallest witness among reference edges.
    pub min_edge_witness: Option<f64>,
    /// Largest witness among reference non-edges.
    pub max_nonedge_witness: Option<f64>,
    pub eta: usize,
    pub statistic: Statistic,
}

impl TuningResult {
    pub fn config(&self) -> CctConfig {
        CctConfig { xi: self.xi, eta: self.eta, statistic: self.statistic }
    }
}

/// Tunes ξ on clean samples.
pub fn tune_threshold(
    clean: &SampleMatrix,
    reference: &EdgeSet,
    eta: usize,
    statistic: Statistic,
    grid: &XiGrid,
    bound: Option<usize>,
) -> Result<TuningResult> {
    let cov = batch_covariance(clean.data())?;
    tune_threshold_cov(&cov, clean.var_ids(), reference, eta, statistic, grid, bound)
}

/// Default failure bound: a tenth of the reference edges, rounded up.
pub fn default_tuning_bound(reference: &EdgeSet) -> usize {
    reference.len().div_ceil(10)
}

/// Picks the midpoint of the widest ξ interval reaching the minimum edit
/// distance to `reference`. Fails when that minimum exceeds `bound`
/// (default [`default_tuning_bound`]).
pub fn tune_threshold_cov(
    cov: &DMatrix<f64>,
    var_ids: &[BusId],
    reference: &EdgeSet,
    eta: usize,
    statistic: Statistic,
    grid: &XiGrid,
    bound: Option<usize>,
) -> Result<TuningResult> {
    if cov.nrows() != var_ids.len() {
        return Err(Error::Dimension { expected: var_ids.len(), got: cov.nrows() });
    }
    if let XiGrid::Values(v) = grid {
        if v.is_empty() {
            return Err(Error::invalid("xi grid is empty"));
        }
        if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(Error::invalid(format!("xi grid value {bad} is not positive")));
        }
    }
    let reference = reference.restrict(var_ids);
    let bound = bound.unwrap_or_else(|| default_tuning_bound(&reference));
    let w = witness_matrix(cov, eta, statistic, None)?;

    let mut pairs: Vec<(f64, bool)> = Vec::new();
    for a in 0..var_ids.len() {
        for b in a + 1..var_ids.len() {
            pairs.push((w[(a, b)], reference.contains(var_ids[a], var_ids[b])));
        }
    }
    let min_edge_witness = pairs.iter().filter(|p| p.1).map(|p| p.0).reduce(f64::min);
    let max_nonedge_witness = pairs.iter().filter(|p| !p.1).map(|p| p.0).reduce(f64::max);

    let (interval, _) = match grid {
        XiGrid::Breakpoints => best_breakpoint_interval(&mut pairs),
        XiGrid::Values(values) => best_grid_run(values, &pairs),
    };
    let xi = 0.5 * (interval.0 + interval.1);
    let learned = threshold_witnesses(&w, var_ids, xi);
    let distance = edit_distance(&learned, &reference);
    if distance > bound {
        return Err(Error::TuningFailed { best: distance, bound });
    }
    Ok(TuningResult {
        xi,
        edit_distance: distance,
        interval,
        min_edge_witness,
        max_nonedge_witness,
        eta,
        statistic,
    })
}

fn distance_at(pairs: &[(f64, bool)], xi: f64) -> usize {
    pairs.iter().filter(|&&(w, is_ref)| (w > xi) != is_ref).count()
}

fn best_breakpoint_interval(pairs: &mut [(f64, bool)]) -> ((f64, f64), usize) {
    if pairs.is_empty() {
        return ((0.0, 2.0), 0);
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Below the smallest witness every pair is an edge.
    let mut dist = pairs.iter().filter(|p| !p.1).count();
    let mut best: Option<((f64, f64), usize)> = None;
    let consider = |lo: f64, hi: f64, d: usize, best: &mut Option<((f64, f64), usize)>| {
        if hi <= lo {
            return;
        }
        let better = match best {
            None => true,
            Some(((blo, bhi), bd)) => d < *bd || (d == *bd && hi - lo > *bhi - *blo),
        };
        if better {
            *best = Some(((lo, hi), d));
        }
    };
    let mut lo = 0.0;
    let mut k = 0;
    while k < pairs.len() {
        let value = pairs[k].0;
        consider(lo, value, dist, &mut best);
        while k < pairs.len() && pairs[k].0 == value {
            dist = if pairs[k].1 { dist + 1 } else { dist - 1 };
            k += 1;
        }
        lo = value;
    }
    let top = lo.max(f64::MIN_POSITIVE);
    consider(top, 2.0 * top, dist, &mut best);
    best.expect("at least the open top interval is considered")
}

fn best_grid_run(values: &[f64], pairs: &[(f64, bool)]) -> ((f64, f64), usize) {
    let mut xs = values.to_vec();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let dists: Vec<usize> = xs.iter().map(|&x| distance_at(pairs, x)).collect();
    let min = *dists.iter().min().expect("grid is non-empty");
    let mut best: Option<(usize, usize)> = None;
    let mut k = 0;
    while k < xs.len() {
        if dists[k] != min {
            k += 1;
            continue;
        }
        let start = k;
        while k + 1 < xs.len() && dists[k + 1] == min {
            k += 1;
        }
        if best.is_none_or(|(s, e)| xs[k] - xs[start] > xs[e] - xs[s]) {
            best = Some((start, k));
        }
        k += 1;
    }
    let (s, e) = best.expect("minimum is attained");
    ((xs[s], xs[e]), min)
}

/// Sample-size guidance `⌈C · J_min⁻² · ln p⌉`.
pub fn min_sample_guidance(j_min: f64, p: usize, c: f64) -> Result<u64> {
    if !(j_min.is_finite() && j_min > 0.0) || p < 2 || !(c.is_finite() && c > 0.0) {
        return Err(Error::invalid("need J_min > 0, p >= 2 and C > 0"));
    }
    Ok((c * (p as f64).ln() / (j_min * j_min)).ceil() as u64)
}
