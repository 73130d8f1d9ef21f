//! Stealthy deception attacks `a = H d` on connected bus subsets.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::case_io::{BusId, GridCase};
use crate::error::{Error, Result};
use crate::gmrf::SampleMatrix;
use crate::grid_model::SusceptanceMatrix;

/// Which vector `attack_size` refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sizing {
    /// Expected `‖a‖₂` of the injection-space attack vector.
    #[default]
    MeasurementNorm,
    /// Expected `‖d‖₂` of the state perturbation.
    StateNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    /// Attacked non-slack buses, sorted.
    pub attacked: Vec<BusId>,
    pub attack_size: f64,
    #[serde(default)]
    pub sizing: Sizing,
    /// Standard deviation of each attacked coordinate of `d`.
    pub scale: f64,
    /// Number of trailing samples to corrupt.
    pub duration: usize,
    pub seed: u64,
}

impl AttackSpec {
    /// `rows × vars` matrix of state perturbations drawn from `rng`.
    pub fn draw_perturbations<R: Rng + ?Sized>(
        &self,
        var_ids: &[BusId],
        rows: usize,
        rng: &mut R,
    ) -> Result<DMatrix<f64>> {
        let cols = self
            .attacked
            .iter()
            .map(|id| {
                var_ids
                    .binary_search(id)
                    .map_err(|_| Error::invalid(format!("attacked bus {id} is not a sample variable")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut d = DMatrix::zeros(rows, var_ids.len());
        for r in 0..rows {
            for &c in &cols {
                d[(r, c)] = self.scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(d)
    }

    /// The `duration × vars` perturbations determined by `seed`.
    pub fn state_perturbations(&self, var_ids: &[BusId]) -> Result<DMatrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.draw_perturbations(var_ids, self.duration, &mut rng)
    }
}

/// All connected vertex subsets of size `kmin..=kmax` that avoid the slack,
/// ordered by size and then lexicographically by bus id.
pub fn enumerate_connected_subsets(case: &GridCase, kmin: usize, kmax: usize) -> Result<Vec<Vec<BusId>>> {
    if kmin < 2 || kmin > kmax {
        return Err(Error::invalid(format!("need 2 <= kmin <= kmax, got {kmin}..{kmax}")));
    }
    let slack = case.slack_index();
    let limit = case.num_buses() - 1;
    let kmax = if kmax > limit {
        log::warn!("kmax {kmax} exceeds the {limit} non-slack buses; clamping");
        limit
    } else {
        kmax
    };
    let adj = case.adjacency();
    let ids = case.bus_ids();

    let mut out = Vec::new();
    let mut level: BTreeSet<Vec<usize>> = (0..ids.len()).filter(|&v| v != slack).map(|v| vec![v]).collect();
    for k in 1..=kmax {
        if k >= kmin {
            out.extend(level.iter().map(|s| s.iter().map(|&v| ids[v]).collect::<Vec<_>>()));
        }
        if k == kmax {
            break;
        }
        let mut next = BTreeSet::new();
        for set in &level {
            for &u in set {
                for &v in &adj[u] {
                    if v != slack && set.binary_search(&v).is_err() {
                        let mut grown = set.clone();
                        let at = grown.binary_search(&v).unwrap_err();
                        grown.insert(at, v);
                        next.insert(grown);
                    }
                }
            }
        }
        level = next;
    }
    Ok(out)
}

/// `E√(gᵀ A g)` for `g ~ N(0, I)` where `A` has eigenvalues `lambdas`.
///
/// Uses `√q = (4π)^{-1/2} ∫₀^∞ (1 − e^{−tq}) t^{−3/2} dt` and the Gaussian
/// Laplace transform `E e^{−tQ} = Π (1 + 2λt)^{−1/2}`, integrated in `ln t`
/// by composite Simpson.
pub fn expected_sqrt_quadratic(lambdas: &[f64]) -> f64 {
    let integrand = |y: f64| {
        let t = y.exp();
        let log_mgf: f64 = lambdas.iter().map(|&l| -0.5 * (2.0 * l.max(0.0) * t).ln_1p()).sum();
        -log_mgf.exp_m1() * (-0.5 * y).exp()
    };
    let (a, b, n) = (-60.0_f64, 60.0_f64, 6000);
    let h = (b - a) / n as f64;
    let mut sum = integrand(a) + integrand(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * integrand(a + k as f64 * h);
    }
    sum * h / 3.0 / (2.0 * std::f64::consts::PI.sqrt())
}

/// `E‖g‖₂` for a standard Gaussian in `k` dimensions.
pub fn expected_chi(k: usize) -> f64 {
    // c₁ = √(2/π) and c_{m+1} = m / c_m.
    let mut c = (2.0 / std::f64::consts::PI).sqrt();
    for m in 1..k {
        c = m as f64 / c;
    }
    c
}

fn check_attacked_set(b: &SusceptanceMatrix, attacked: &[BusId]) -> Result<Vec<BusId>> {
    if attacked.is_empty() {
        return Err(Error::invalid("attacked set is empty"));
    }
    let mut set: Vec<BusId> = attacked.to_vec();
    set.sort_unstable();
    set.dedup();
    let mut pos = Vec::with_capacity(set.len());
    for &id in &set {
        let k = b.bus_index(id).ok_or_else(|| Error::invalid(format!("bus {id} is not in the case")))?;
        if k == b.slack_index() {
            return Err(Error::invalid(format!("attacked set contains the slack bus {id}")));
        }
        pos.push(k);
    }
    // Connectivity of the induced subgraph, using B's off-diagonal pattern.
    let full = b.full();
    let mut seen = vec![false; pos.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for v in 0..pos.len() {
            if !seen[v] && full[(pos[u], pos[v])] != 0.0 {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::invalid(format!("attacked set {set:?} is not connected")));
    }
    Ok(set)
}

/// Builds an attack whose per-coordinate scale makes the expected norm of
/// `a` (or of `d`, per `sizing`) equal `attack_size`.
pub fn build_attack(
    b: &SusceptanceMatrix,
    attacked: &[BusId],
    attack_size: f64,
    sizing: Sizing,
    duration: usize,
    seed: u64,
) -> Result<AttackSpec> {
    if !(attack_size.is_finite() && attack_size > 0.0) {
        return Err(Error::invalid(format!("attack size must be positive, got {attack_size}")));
    }
    let attacked = check_attacked_set(b, attacked)?;
    let unit_norm = match sizing {
        Sizing::StateNorm => expected_chi(attacked.len()),
        Sizing::MeasurementNorm => {
            let cols: Vec<usize> = attacked.iter().map(|&id| b.bus_index(id).unwrap()).collect();
            let m = b.full().select_columns(&cols);
            let gram = m.tr_mul(&m);
            let eig = SymmetricEigen::new(gram).eigenvalues;
            expected_sqrt_quadratic(eig.as_slice())
        }
    };
    Ok(AttackSpec { attacked, attack_size, sizing, scale: attack_size / unit_norm, duration, seed })
}

/// Adds the attack's perturbations to the last `duration` rows.
pub fn corrupt_samples(samples: &SampleMatrix, spec: &AttackSpec) -> Result<SampleMatrix> {
    if spec.duration > samples.n() {
        return Err(Error::Dimension { expected: samples.n(), got: spec.duration });
    }
    let d = spec.state_perturbations(samples.var_ids())?;
    Ok(apply_perturbations(samples, &d))
}

/// Adds `d` (rows aligned to the end of `samples`) and flags those rows.
pub fn apply_perturbations(samples: &SampleMatrix, d: &DMatrix<f64>) -> SampleMatrix {
    let mut out = samples.clone();
    let start = samples.n() - d.nrows();
    for r in 0..d.nrows() {
        for c in 0..d.ncols() {
            out.data_mut()[(start + r, c)] += d[(r, c)];
        }
        out.set_corrupted(start + r, true);
    }
    out
}

/// Injection-space attack `a = B d` for a state perturbation over non-slack buses.
pub fn attack_vector(b: &SusceptanceMatrix, d: &DVector<f64>) -> DVector<f64> {
    b.full() * b.expand(d)
}

/// Least-squares residual norm of `z` against the DC model `z = H x`.
pub fn ls_residual(b: &SusceptanceMatrix, z: &DVector<f64>) -> Result<f64> {
    if z.len() != b.num_buses() {
        return Err(Error::Dimension { expected: b.num_buses(), got: z.len() });
    }
    let q = b.measurement_matrix().qr().q();
    let projected = &q * (q.tr_mul(z));
    Ok((z - projected).norm())
}

/// Change of the bad-data residual caused by moving from `clean` to `attacked`
/// measurements. Near zero for attacks in the column space of `H`.
pub fn stealthiness_check(b: &SusceptanceMatrix, clean: &DVector<f64>, attacked: &DVector<f64>) -> Result<f64> {
    Ok(ls_residual(b, attacked)? - ls_residual(b, clean)?)
}

/// `‖(I − H H⁺) a‖₂` computed through the pseudo-inverse.
pub fn image_residual(b: &SusceptanceMatrix, a: &DVector<f64>) -> Result<f64> {
    let h = b.measurement_matrix();
    let pinv = h
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok((a - &h * (pinv * a)).norm())
}
