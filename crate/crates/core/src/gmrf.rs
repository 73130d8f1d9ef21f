//! Gaussian Markov random field view of DC phase angles.
//!
//! Two precision models are available. [`ModelKind::Exact`] treats the non-slack
//! injections as i.i.d. Gaussian, giving `J = B_rᵀ B_r / σ²` whose graph
//! contains second neighbors. [`ModelKind::FirstNeighbor`] is the nearest-neighbor
//! approximation `J = B_r / σ²` (the conditional autoregression implied by nodal
//! balance), whose Markov graph is exactly the branch adjacency. Both are
//! sampled through the same DC solve; they differ only in the injection
//! covariance.

use std::io::{Read, Write};
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::case_io::BusId;
use crate::error::{Error, Result};
use crate::grid_model::{EdgeSet, SusceptanceMatrix};

/// Entries of `J` below this magnitude count as structural zeros.
pub const ZERO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Exact,
    #[default]
    FirstNeighbor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    /// Phase angles driven by active-power fluctuations.
    #[default]
    Angle,
    /// Voltage magnitudes driven by reactive-power fluctuations.
    Voltage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    #[default]
    FirstNeighbor,
    ExactTwoHop,
}

#[derive(Debug, Clone)]
pub struct PrecisionModel {
    j: DMatrix<f64>,
    sigma: f64,
    kind: ModelKind,
    channel: Channel,
    var_ids: Vec<BusId>,
    cov: OnceLock<DMatrix<f64>>,
}

/// `J = B_rᵀ B_r / σ²` on the angle channel.
pub fn precision_from_b(b: &SusceptanceMatrix, sigma: f64) -> Result<PrecisionModel> {
    PrecisionModel::new(b, sigma, ModelKind::Exact, Channel::Angle)
}

impl PrecisionModel {
    pub fn new(b: &SusceptanceMatrix, sigma: f64, kind: ModelKind, channel: Channel) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid(format!("injection sigma must be positive, got {sigma}")));
        }
        if b.reduced_cholesky().is_none() {
            return Err(Error::Singular("reduced susceptance matrix".into()));
        }
        let br = b.reduced();
        let scale = 1.0 / (sigma * sigma);
        let j = match kind {
            ModelKind::Exact => br.transpose() * br * scale,
            ModelKind::FirstNeighbor => br * scale,
        };
        Ok(PrecisionModel { j, sigma, kind, channel, var_ids: b.var_ids(), cov: OnceLock::new() })
    }

    pub fn j(&self) -> &DMatrix<f64> {
        &self.j
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn var_ids(&self) -> &[BusId] {
        &self.var_ids
    }

    /// `Σ = J⁻¹`, computed on first use.
    pub fn covariance(&self) -> &DMatrix<f64> {
        self.cov.get_or_init(|| {
            let chol = Cholesky::new(self.j.clone()).expect("J is positive definite by construction");
            let inv = chol.inverse();
            (&inv + inv.transpose()) * 0.5
        })
    }

    pub fn partial_correlations(&self) -> DMatrix<f64> {
        partial_correlations(&self.j)
    }

    /// Graph of entries with `|J_ij| > ZERO_TOL`.
    pub fn support_graph(&self) -> EdgeSet {
        support_graph(&self.j, &self.var_ids)
    }
}

/// `r_ij = −J_ij / √(J_ii J_jj)` with a zero diagonal.
pub fn partial_correlations(j: &DMatrix<f64>) -> DMatrix<f64> {
    let p = j.nrows();
    DMatrix::from_fn(p, p, |r, c| {
        if r == c {
            0.0
        } else {
            -j[(r, c)] / (j[(r, r)] * j[(c, c)]).sqrt()
        }
    })
}

/// Spectral radius of the entrywise absolute partial-correlation matrix.
/// Values below 1 mean the model is walk-summable.
pub fn walk_summability_alpha(r: &DMatrix<f64>) -> f64 {
    if r.is_empty() {
        return 0.0;
    }
    let abs = r.abs();
    let sym = (&abs + abs.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.amax()
}

fn support_graph(j: &DMatrix<f64>, ids: &[BusId]) -> EdgeSet {
    let mut edges = EdgeSet::new();
    for a in 0..ids.len() {
        for b in a + 1..ids.len() {
            if j[(a, b)].abs() > ZERO_TOL {
                edges.insert(ids[a], ids[b]);
            }
        }
    }
    edges
}

/// Markov graph over the non-slack buses predicted from the grid alone.
pub fn predicted_markov_graph(b: &SusceptanceMatrix, mode: GraphMode) -> EdgeSet {
    let br = b.reduced();
    let ids = b.var_ids();
    match mode {
        GraphMode::FirstNeighbor => support_graph(br, &ids),
        GraphMode::ExactTwoHop => support_graph(&(br.transpose() * br), &ids),
    }
}

/// Samples as rows, one column per non-slack bus.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    var_ids: Vec<BusId>,
    data: DMatrix<f64>,
    corrupted: Vec<bool>,
    seed: Option<u64>,
}

impl SampleMatrix {
    pub fn new(var_ids: Vec<BusId>, data: DMatrix<f64>) -> Result<Self> {
        if data.ncols() != var_ids.len() {
            return Err(Error::Dimension { expected: var_ids.len(), got: data.ncols() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sample matrix contains non-finite entries"));
        }
        let corrupted = vec![false; data.nrows()];
        Ok(SampleMatrix { var_ids, data, corrupted, seed: None })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn var_ids(&self) -> &[BusId] {
        &self.var_ids
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.data
    }

    pub fn corrupted(&self) -> &[bool] {
        &self.corrupted
    }

    pub fn set_corrupted(&mut self, row: usize, flag: bool) {
        self.corrupted[row] = flag;
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Writes `# seed=` (when known), a header of bus ids plus `provenance`,
    /// then one sample per row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        if let Some(seed) = self.seed {
            writeln!(out, "# seed={seed}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = self.var_ids.iter().map(|id| id.to_string()).collect();
        header.push("provenance".into());
        w.write_record(&header)?;
        for (r, row) in self.data.row_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            rec.push(if self.corrupted[r] { "corrupted" } else { "clean" }.into());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format written by [`write_csv`](Self::write_csv). The
    /// `provenance` column is optional; `#` lines are comments.
    pub fn read_csv<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let seed = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .find_map(|l| l.trim_start_matches('#').trim().strip_prefix("seed=")?.trim().parse().ok());

        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        let has_prov = header.iter().next_back() == Some("provenance");
        let ncols = header.len() - usize::from(has_prov);
        let var_ids = header
            .iter()
            .take(ncols)
            .map(|h| {
                h.parse::<BusId>()
                    .ok()
                    .filter(|&id| id >= 1)
                    .ok_or_else(|| Error::schema("header", format!("`{h}` is not a bus id")))
            })
            .collect::<Result<Vec<_>>>()?;
        if var_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::schema("header", "bus ids must be strictly increasing"));
        }

        let mut values = Vec::new();
        let mut corrupted = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Dimension { expected: header.len(), got: rec.len() });
            }
            for (c, field) in rec.iter().take(ncols).enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::schema(format!("row {}, column {}", r + 1, var_ids[c]), "not a number")
                })?;
                values.push(v);
            }
            corrupted.push(match rec.get(ncols) {
                None | Some("clean") => false,
                Some("corrupted") => true,
                Some(other) => {
                    return Err(Error::schema(
                        format!("row {}, provenance", r + 1),
                        format!("expected clean or corrupted, got `{other}`"),
                    ))
                }
            });
        }
        let data = DMatrix::from_row_slice(corrupted.len(), ncols, &values);
        let mut m = SampleMatrix::new(var_ids, data)?;
        m.corrupted = corrupted;
        m.seed = seed;
        Ok(m)
    }
}

/// Draws `n` samples with a fresh generator seeded from `seed`.
pub fn sample_gmrf(
    model: &PrecisionModel,
    b: &SusceptanceMatrix,
    n: usize,
    seed: u64,
    noise_sigma: f64,
) -> Result<SampleMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_gmrf_with(model, b, n, noise_sigma, &mut rng)?.with_seed(seed))
}

/// Draws `n` samples: non-slack injections from the model, slack balancing,
/// DC solve, then optional white measurement noise.
pub fn sample_gmrf_with<R: Rng + ?Sized>(
    model: &PrecisionModel,
    b: &SusceptanceMatrix,
    n: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<SampleMatrix> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples, got {n}")));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    if model.var_ids() != b.var_ids().as_slice() {
        return Err(Error::invalid("model and susceptance matrix disagree on buses"));
    }
    let injections = draw_injections(model, b, n, rng)?;
    let angles = b.solve_reduced(&injections)?;
    let mut data = angles.transpose();
    if noise_sigma > 0.0 {
        for v in data.iter_mut() {
            *v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    SampleMatrix::new(model.var_ids().to_vec(), data)
}

/// Non-slack injections, one sample per column. The slack absorbs `−ΣP`,
/// which the reduced solve accounts for implicitly.
pub fn draw_injections<R: Rng + ?Sized>(
    model: &PrecisionModel,
    b: &SusceptanceMatrix,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let p = b.num_vars();
    let z = DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sigma = model.sigma();
    Ok(match model.kind() {
        ModelKind::Exact => z * sigma,
        ModelKind::FirstNeighbor => {
            let chol = b
                .reduced_cholesky()
                .ok_or_else(|| Error::Singular("reduced susceptance matrix".into()))?;
            chol.l() * z * sigma
        }
    })
}

/// `Σ(i,j) − Σ(i,S) Σ(S,S)⁻¹ Σ(S,j)` without regularization.
pub fn conditional_covariance_exact(sigma: &DMatrix<f64>, i: usize, j: usize, s: &[usize]) -> Result<f64> {
    check_conditioning(sigma.nrows(), i, j, s)?;
    schur_entry(sigma, i, j, s, 0.0)
}

pub(crate) fn check_conditioning(p: usize, i: usize, j: usize, s: &[usize]) -> Result<()> {
    if i >= p || j >= p || s.iter().any(|&k| k >= p) {
        return Err(Error::invalid(format!("variable index out of range for dimension {p}")));
    }
    if s.contains(&i) || s.contains(&j) {
        return Err(Error::invalid("conditioning set contains i or j"));
    }
    Ok(())
}

pub(crate) fn schur_entry(sigma: &DMatrix<f64>, i: usize, j: usize, s: &[usize], ridge: f64) -> Result<f64> {
    if s.is_empty() {
        return Ok(sigma[(i, j)]);
    }
    let k = s.len();
    let mut sub = DMatrix::from_fn(k, k, |a, b| sigma[(s[a], s[b])]);
    for d in 0..k {
        sub[(d, d)] += ridge;
    }
    let chol = Cholesky::new(sub).ok_or_else(|| Error::Singular("conditioning block Σ(S,S)".into()))?;
    let rhs = DVector::from_fn(k, |a, _| sigma[(s[a], j)]);
    let left = DVector::from_fn(k, |a, _| sigma[(i, s[a])]);
    Ok(sigma[(i, j)] - left.dot(&chol.solve(&rhs)))
}
