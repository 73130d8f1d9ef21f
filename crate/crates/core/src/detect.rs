//! Alarm on Markov-graph mismatch and localization by KL anomaly scores.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::case_io::BusId;
use crate::cct::{edit_distance, run_cct, CctConfig};
use crate::error::{Error, Result};
use crate::grid_model::{EdgeSet, SubNetwork};
use crate::stream_cov::CovAccumulator;

/// Default score threshold for flagging a bus.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// `None` for a whole-grid run.
    pub area_id: Option<u32>,
    pub learned: EdgeSet,
    pub reference: EdgeSet,
    pub edit_distance: usize,
    pub alarm: bool,
    pub n: u64,
    pub config: CctConfig,
    pub tolerance: usize,
}

/// Learns the graph of the accumulated samples and alarms when it is more
/// than `tolerance` edits away from `reference`.
pub fn detect(
    acc: &CovAccumulator,
    reference: &EdgeSet,
    config: &CctConfig,
    tolerance: usize,
) -> Result<DetectionReport> {
    let cov = acc.covariance()?;
    let graph = run_cct(&cov, acc.var_ids(), config)?;
    let reference = reference.restrict(acc.var_ids());
    let distance = edit_distance(&graph.edges, &reference);
    Ok(DetectionReport {
        area_id: None,
        learned: graph.edges,
        reference,
        edit_distance: distance,
        alarm: distance > tolerance,
        n: acc.n(),
        config: *config,
        tolerance,
    })
}

/// Tolerance as the `q`-quantile (nearest rank) of clean-window edit distances.
pub fn calibrate_tolerance(clean_distances: &[usize], q: f64) -> Result<usize> {
    if clean_distances.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid("need clean distances and a quantile in [0, 1]"));
    }
    let mut sorted = clean_distances.to_vec();
    sorted.sort_unstable();
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Default ridge `1e-6 · trace(Σ̂)/p`.
pub fn default_ridge(cov: &DMatrix<f64>) -> f64 {
    1e-6 * cov.trace() / cov.nrows().max(1) as f64
}

/// `(Σ̂ + ridge·I)⁻¹`.
pub fn estimate_precision(cov: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::invalid(format!("ridge must be non-negative, got {ridge}")));
    }
    let p = cov.nrows();
    let sym = (cov + cov.transpose()) * 0.5 + DMatrix::identity(p, p) * ridge;
    let inv = Cholesky::new(sym)
        .ok_or_else(|| Error::Singular("regularized covariance".into()))?
        .inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub var_ids: Vec<BusId>,
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub flagged: Vec<BusId>,
    pub j_ref: Vec<Vec<f64>>,
    pub j_att: Vec<Vec<f64>>,
}

impl AnomalyReport {
    pub fn write_scores_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bus_id", "score"])?;
        for (id, s) in self.var_ids.iter().zip(&self.scores) {
            w.write_record([id.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Expected KL divergence, under model A, between the conditionals of
/// variable `i` given the rest under A and under B.
///
/// Each conditional is Gaussian with variance `1/J_ii` and mean
/// `−J_{i,−i} z / J_ii`, so the divergence is
/// `½[ln(λ_A/λ_B) + λ_B/λ_A − 1 + λ_B uᵀ W_A u]` with
/// `u = l_A/λ_A − l_B/λ_B` and `W_A = Σ_A[−i,−i]`.
pub fn conditional_kl(j_a: &DMatrix<f64>, sigma_a: &DMatrix<f64>, j_b: &DMatrix<f64>, i: usize) -> f64 {
    let p = j_a.nrows();
    let (la, lb) = (j_a[(i, i)], j_b[(i, i)]);
    let rest: Vec<usize> = (0..p).filter(|&k| k != i).collect();
    let u = DVector::from_fn(rest.len(), |r, _| j_a[(rest[r], i)] / la - j_b[(rest[r], i)] / lb);
    let w = sigma_a.select_rows(&rest).select_columns(&rest);
    let quad = u.dot(&(w * &u));
    (0.5 * ((la / lb).ln() + lb / la - 1.0 + lb * quad)).max(0.0)
}

fn check_pd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    Cholesky::new(m.clone()).map(|_| ()).ok_or_else(|| Error::Singular(what.into()))
}

/// Per-variable scores `max(d^{AB}, d^{BA})` between the reference model and
/// the attacked estimate.
pub fn anomaly_scores(
    var_ids: &[BusId],
    j_ref: &DMatrix<f64>,
    sigma_ref: &DMatrix<f64>,
    j_att: &DMatrix<f64>,
    sigma_att: &DMatrix<f64>,
    threshold: f64,
) -> Result<AnomalyReport> {
    let p = var_ids.len();
    for m in [j_ref, sigma_ref, j_att, sigma_att] {
        if m.nrows() != p || m.ncols() != p {
            return Err(Error::Dimension { expected: p, got: m.nrows() });
        }
    }
    check_pd(j_ref, "reference precision")?;
    check_pd(j_att, "attacked precision")?;
    let scores: Vec<f64> = (0..p)
        .map(|i| conditional_kl(j_ref, sigma_ref, j_att, i).max(conditional_kl(j_att, sigma_att, j_ref, i)))
        .collect();
    let mut report = AnomalyReport {
        var_ids: var_ids.to_vec(),
        scores,
        threshold,
        flagged: Vec::new(),
        j_ref: rows(j_ref),
        j_att: rows(j_att),
    };
    report.flagged = localize(&report, threshold);
    Ok(report)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Buses whose score exceeds `threshold`.
pub fn localize(report: &AnomalyReport, threshold: f64) -> Vec<BusId> {
    report
        .var_ids
        .iter()
        .zip(&report.scores)
        .filter(|(_, &s)| s > threshold)
        .map(|(&id, _)| id)
        .collect()
}

/// Runs [`detect`] in every area over its augmented bus set.
///
/// `accumulators[k]` must cover exactly the buses of `areas[k].augmented`
/// other than `slack`. `configs` holds one entry per area or a single entry
/// shared by all.
pub fn run_decentralized(
    areas: &[SubNetwork],
    slack: BusId,
    accumulators: &[CovAccumulator],
    configs: &[CctConfig],
    tolerances: &[usize],
) -> Result<Vec<DetectionReport>> {
    let pick = |len: usize, k: usize, what: &str| -> Result<usize> {
        match len {
            1 => Ok(0),
            n if n == areas.len() => Ok(k),
            n => Err(Error::invalid(format!("{n} {what} for {} areas", areas.len()))),
        }
    };
    if accumulators.len() != areas.len() {
        return Err(Error::Dimension { expected: areas.len(), got: accumulators.len() });
    }
    areas
        .iter()
        .zip(accumulators)
        .enumerate()
        .map(|(k, (area, acc))| {
            if acc.var_ids() != area.variables(slack).as_slice() {
                return Err(Error::invalid(format!(
                    "accumulator does not cover the augmented buses of area {}",
                    area.area_id
                )));
            }
            let cfg = &configs[pick(configs.len(), k, "configs")?];
            let tol = tolerances[pick(tolerances.len(), k, "tolerances")?];
            let mut report = detect(acc, &area.edges, cfg, tol)?;
            report.area_id = Some(area.area_id);
            Ok(report)
        })
        .collect()
}
