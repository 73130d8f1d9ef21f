//! Reproducible experiment runs driven by a TOML manifest.
//!
//! Every random draw comes from a ChaCha8 generator seeded with the manifest
//! seed and a task-specific stream, so results do not depend on thread
//! scheduling or on which chunks were restored from checkpoints. Every CSV
//! written here starts with a `# manifest_sha256=…, seed=…` comment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{apply_perturbations, build_attack, enumerate_connected_subsets, Sizing};
use crate::case_io::{load_case, BusId, GridCase};
use crate::cct::{edit_distance, run_cct, tune_threshold_cov, CctConfig, Statistic, TuningResult, XiGrid};
use crate::detect::{anomaly_scores, calibrate_tolerance, default_ridge, detect, estimate_precision, DetectionReport};
use crate::error::{Error, Result};
use crate::gmrf::{
    partial_correlations, predicted_markov_graph, sample_gmrf_with, walk_summability_alpha, Channel, GraphMode,
    ModelKind, PrecisionModel, SampleMatrix,
};
use crate::grid_model::{build_susceptance_matrix, EdgeSet, SusceptanceMatrix};
use crate::plot;
use crate::stream_cov::{batch_covariance, CovAccumulator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowMode {
    /// Corrupted samples displace the oldest clean ones; window size is fixed.
    #[default]
    Sliding,
    /// Corrupted samples are appended to a full clean window.
    Growing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Each repetition draws an attacked subset uniformly at random.
    #[default]
    Sampled,
    /// Every connected subset is run `reps` times.
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub mode: WindowMode,
    pub size: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { mode: WindowMode::Sliding, size: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    /// Fixed threshold; skips tuning when set.
    pub xi: Option<f64>,
    /// Candidate thresholds; all witness breakpoints when absent.
    pub xi_grid: Option<Vec<f64>>,
    /// Maximum acceptable tuned edit distance.
    pub bound: Option<usize>,
    /// Clean windows used to calibrate the alarm tolerance.
    pub calibration_windows: usize,
    pub tolerance_quantile: f64,
    /// Fixed alarm tolerance; overrides calibration.
    pub tolerance: Option<usize>,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            xi: None,
            xi_grid: None,
            bound: None,
            calibration_windows: 200,
            tolerance_quantile: 0.99,
            tolerance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub mode: SweepMode,
    pub kmin: usize,
    /// Defaults to 6 on 14-bus cases and 8 on 30-bus cases.
    pub kmax: Option<usize>,
    pub sizes: Vec<f64>,
    pub sizing: Sizing,
    pub reps: usize,
    pub corrupted: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            mode: SweepMode::Sampled,
            kmin: 2,
            kmax: None,
            sizes: vec![2.1],
            sizing: Sizing::MeasurementNorm,
            reps: 100,
            corrupted: vec![0, 10, 30, 50, 130],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyConfig {
    pub attacked: Vec<BusId>,
    pub sizes: Vec<f64>,
    pub sizing: Sizing,
    pub reps: usize,
    /// Corrupted samples at the end of the window; the whole window when absent.
    pub corrupted: Option<usize>,
    pub threshold: f64,
    /// Ridge for precision estimation; `1e-6 · trace/p` when absent.
    pub ridge: Option<f64>,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        AnomalyConfig {
            attacked: vec![4, 5, 6],
            sizes: vec![0.7],
            sizing: Sizing::MeasurementNorm,
            reps: 100,
            corrupted: None,
            threshold: crate::detect::DEFAULT_SCORE_THRESHOLD,
            ridge: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentManifest {
    /// `ieee14`, `ieee30`, or a path to a MATPOWER / canonical JSON case.
    pub case: String,
    pub channel: Channel,
    pub sigma_p: f64,
    pub sigma_q: f64,
    pub noise_sigma: f64,
    pub model: ModelKind,
    pub reference: GraphMode,
    pub statistic: Statistic,
    pub eta: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub window: WindowConfig,
    pub tuning: TuningConfig,
    pub sweep: SweepConfig,
    pub anomaly: AnomalyConfig,
    /// Directory that relative case paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        ExperimentManifest {
            case: "ieee14".into(),
            channel: Channel::Angle,
            sigma_p: 0.03,
            sigma_q: 0.03,
            noise_sigma: 0.0,
            model: ModelKind::FirstNeighbor,
            reference: GraphMode::FirstNeighbor,
            statistic: Statistic::Correlation,
            eta: 2,
            seed: 0,
            out: PathBuf::from("out"),
            window: WindowConfig::default(),
            tuning: TuningConfig::default(),
            sweep: SweepConfig::default(),
            anomaly: AnomalyConfig::default(),
            base_dir: None,
        }
    }
}

impl ExperimentManifest {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let m: ExperimentManifest = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("manifest").to_string();
            Error::schema(field, e.to_string().trim())
        })?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut m = Self::from_toml_str(&fs::read_to_string(path)?)?;
        m.base_dir = path.parent().map(Path::to_path_buf);
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialization is infallible")
    }

    /// SHA-256 of the canonical TOML rendering. The output directory is left
    /// out so that relocating a run does not change its identity.
    pub fn sha256(&self) -> String {
        let canonical = ExperimentManifest { out: PathBuf::new(), ..self.clone() };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} must be positive, got {v}")))
            }
        };
        positive(self.sigma_p, "sigma_p")?;
        positive(self.sigma_q, "sigma_q")?;
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        if self.window.size < 2 {
            return Err(Error::invalid("window.size must be at least 2"));
        }
        if let Some(xi) = self.tuning.xi {
            positive(xi, "tuning.xi")?;
        }
        if let Some(grid) = &self.tuning.xi_grid {
            if grid.is_empty() {
                return Err(Error::invalid("tuning.xi_grid is empty"));
            }
            for &x in grid {
                positive(x, "tuning.xi_grid entry")?;
            }
        }
        if self.tuning.calibration_windows == 0 && self.tuning.tolerance.is_none() {
            return Err(Error::invalid("tuning.calibration_windows must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.tuning.tolerance_quantile) {
            return Err(Error::invalid("tuning.tolerance_quantile must lie in [0, 1]"));
        }
        if self.sweep.reps == 0 || self.anomaly.reps == 0 {
            return Err(Error::invalid("repetitions must be at least 1"));
        }
        if self.sweep.sizes.is_empty() || self.anomaly.sizes.is_empty() {
            return Err(Error::invalid("attack size lists must not be empty"));
        }
        for &s in self.sweep.sizes.iter().chain(&self.anomaly.sizes) {
            positive(s, "attack size")?;
        }
        if self.window.mode == WindowMode::Sliding {
            if let Some(&m) = self.sweep.corrupted.iter().find(|&&m| m > self.window.size) {
                return Err(Error::invalid(format!(
                    "{m} corrupted samples do not fit a sliding window of {}",
                    self.window.size
                )));
            }
        }
        if self.anomaly.corrupted.is_some_and(|m| m == 0 || m > self.window.size) {
            return Err(Error::invalid("anomaly.corrupted must lie in 1..=window.size"));
        }
        if self.anomaly.attacked.is_empty() {
            return Err(Error::invalid("anomaly.attacked is empty"));
        }
        Ok(())
    }

    fn case_location(&self) -> String {
        match (&self.base_dir, self.case.as_str()) {
            (_, "ieee14" | "ieee30") => self.case.clone(),
            (Some(dir), path) if Path::new(path).is_relative() => dir.join(path).to_string_lossy().into_owned(),
            _ => self.case.clone(),
        }
    }
}

/// Seed domains for [`task_rng`].
mod stream {
    pub const TUNE: u64 = 1;
    pub const CALIBRATE: u64 = 2;
    pub const SWEEP: u64 = 3;
    pub const ANOMALY: u64 = 4;
    pub const SIMULATE: u64 = 5;
}

/// Generator for task `index` of `domain`.
pub fn task_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 48) | index);
    rng
}

/// Tuned detector settings, written as `tuned.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedConfig {
    pub xi: f64,
    pub eta: usize,
    pub statistic: Statistic,
    pub tuned_edit_distance: usize,
    pub tolerance: usize,
    /// Fraction of calibration windows above `tolerance`.
    pub clean_alarm_rate: f64,
    pub min_edge_witness: Option<f64>,
    pub max_nonedge_witness: Option<f64>,
    /// Walk-summability of the sampled model.
    pub alpha: f64,
    /// Walk-summability of `B_rᵀB_r`, for comparison.
    pub alpha_exact: f64,
    pub window: usize,
    pub manifest_sha256: String,
    pub seed: u64,
}

impl TunedConfig {
    pub fn config(&self) -> CctConfig {
        CctConfig { xi: self.xi, eta: self.eta, statistic: self.statistic }
    }
}

/// One detection-rate row of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub attacked: Vec<BusId>,
    pub attack_size: f64,
    pub corrupted: usize,
    pub detections: usize,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub attack_size: f64,
    pub corrupted: usize,
    pub detection_rate: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalySummary {
    pub attack_size: f64,
    pub reps: usize,
    /// Per-variable mean scores.
    pub mean_scores: Vec<f64>,
    /// Fraction of reps where the attacked buses hold the top scores.
    pub top_rate: f64,
    /// Fraction of reps where the threshold flags exactly the attacked set.
    pub exact_rate: f64,
}

/// A manifest bound to its case, model and reference graph.
pub struct Experiment {
    pub manifest: ExperimentManifest,
    pub case: GridCase,
    pub b: SusceptanceMatrix,
    pub model: PrecisionModel,
    pub reference: EdgeSet,
    hash: String,
}

/// One completed sweep task: (subset index, size index, corrupted index, alarm).
type Outcome = (usize, usize, usize, bool);

impl Experiment {
    pub fn new(manifest: ExperimentManifest) -> Result<Self> {
        manifest.validate()?;
        let case = load_case(&manifest.case_location())?;
        let b = build_susceptance_matrix(&case);
        let sigma = match manifest.channel {
            Channel::Angle => manifest.sigma_p,
            Channel::Voltage => manifest.sigma_q,
        };
        let model = PrecisionModel::new(&b, sigma, manifest.model, manifest.channel)?;
        let reference = predicted_markov_graph(&b, manifest.reference);
        let hash = manifest.sha256();
        Ok(Experiment { manifest, case, b, model, reference, hash })
    }

    pub fn manifest_sha256(&self) -> &str {
        &self.hash
    }

    pub fn var_ids(&self) -> Vec<BusId> {
        self.b.var_ids()
    }

    fn comment(&self) -> String {
        format!("# manifest_sha256={}, seed={}\n", self.hash, self.manifest.seed)
    }

    pub fn clean_samples<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SampleMatrix> {
        sample_gmrf_with(&self.model, &self.b, n, self.manifest.noise_sigma, rng)
    }

    /// A window with `corrupted` trailing samples shifted by `d` draws from
    /// the attack on `attacked`.
    fn attacked_window<R: Rng + ?Sized>(
        &self,
        attacked: &[BusId],
        size: f64,
        sizing: Sizing,
        corrupted: usize,
        rng: &mut R,
    ) -> Result<SampleMatrix> {
        let w = self.manifest.window.size;
        let n = match self.manifest.window.mode {
            WindowMode::Sliding => w,
            WindowMode::Growing => w + corrupted,
        };
        let clean = self.clean_samples(n, rng)?;
        if corrupted == 0 {
            return Ok(clean);
        }
        let spec = build_attack(&self.b, attacked, size, sizing, corrupted, 0)?;
        let d = spec.draw_perturbations(clean.var_ids(), corrupted, rng)?;
        Ok(apply_perturbations(&clean, &d))
    }

    /// Tunes ξ on one clean window and calibrates the alarm tolerance on
    /// independent clean windows.
    pub fn tune(&self) -> Result<TunedConfig> {
        let m = &self.manifest;
        let ids = self.var_ids();
        let mut rng = task_rng(m.seed, stream::TUNE, 0);
        let cov = batch_covariance(self.clean_samples(m.window.size, &mut rng)?.data())?;
        let tuned: TuningResult = match m.tuning.xi {
            Some(xi) => {
                let g = run_cct(&cov, &ids, &CctConfig::new(xi, m.eta, m.statistic)?)?;
                TuningResult {
                    xi,
                    edit_distance: edit_distance(&g.edges, &self.reference),
                    interval: (xi, xi),
                    min_edge_witness: None,
                    max_nonedge_witness: None,
                    eta: m.eta,
                    statistic: m.statistic,
                }
            }
            None => {
                let grid = match &m.tuning.xi_grid {
                    Some(v) => XiGrid::Values(v.clone()),
                    None => XiGrid::Breakpoints,
                };
                tune_threshold_cov(&cov, &ids, &self.reference, m.eta, m.statistic, &grid, m.tuning.bound)?
            }
        };
        let config = tuned.config();

        let distances: Vec<usize> = (0..m.tuning.calibration_windows)
            .into_par_iter()
            .map(|k| {
                let mut rng = task_rng(m.seed, stream::CALIBRATE, k as u64);
                let window = self.clean_samples(m.window.size, &mut rng)?;
                let acc = CovAccumulator::from_rows(ids.clone(), window.data())?;
                Ok(detect(&acc, &self.reference, &config, 0)?.edit_distance)
            })
            .collect::<Result<_>>()?;
        let tolerance = match m.tuning.tolerance {
            Some(t) => t,
            None => calibrate_tolerance(&distances, m.tuning.tolerance_quantile)?,
        };
        let clean_alarm_rate = if distances.is_empty() {
            0.0
        } else {
            distances.iter().filter(|&&d| d > tolerance).count() as f64 / distances.len() as f64
        };

        let alpha = walk_summability_alpha(&self.model.partial_correlations());
        let br = self.b.reduced();
        let alpha_exact = walk_summability_alpha(&partial_correlations(&(br.transpose() * br)));

        Ok(TunedConfig {
            xi: tuned.xi,
            eta: tuned.eta,
            statistic: tuned.statistic,
            tuned_edit_distance: tuned.edit_distance,
            tolerance,
            clean_alarm_rate,
            min_edge_witness: tuned.min_edge_witness,
            max_nonedge_witness: tuned.max_nonedge_witness,
            alpha,
            alpha_exact,
            window: m.window.size,
            manifest_sha256: self.hash.clone(),
            seed: m.seed,
        })
    }

    pub fn kmax(&self) -> usize {
        self.manifest.sweep.kmax.unwrap_or(match self.case.num_buses() {
            30 => 8,
            n => 6.min(n - 1),
        })
    }

    /// Detection rates over attacked subsets, sizes and corrupted-sample counts.
    ///
    /// With `checkpoints` set, each finished chunk (a point in sampled mode, a
    /// subset in exhaustive mode) is stored there and reused on the next run.
    pub fn sweep(&self, tuned: &TunedConfig, checkpoints: Option<&Path>) -> Result<SweepResult> {
        let s = &self.manifest.sweep;
        let subsets = enumerate_connected_subsets(&self.case, s.kmin, self.kmax())?;
        if subsets.is_empty() {
            return Err(Error::invalid("no connected attack subsets in the requested size range"));
        }
        let n_points = s.sizes.len() * s.corrupted.len();
        let chunks = match s.mode {
            SweepMode::Sampled => n_points,
            SweepMode::Exhaustive => subsets.len(),
        };
        if let Some(dir) = checkpoints {
            fs::create_dir_all(dir)?;
        }

        let outcomes: Vec<Vec<Outcome>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let path = checkpoints.map(|d| d.join(format!("chunk-{c:05}.json")));
                if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                    if let Ok(cached) = serde_json::from_str::<Checkpoint>(&fs::read_to_string(p)?) {
                        if cached.manifest_sha256 == self.hash {
                            return Ok(cached.outcomes);
                        }
                    }
                }
                let out = self.sweep_chunk(c, &subsets, tuned)?;
                if let Some(p) = path {
                    let cp = Checkpoint { manifest_sha256: self.hash.clone(), outcomes: out.clone() };
                    fs::write(p, serde_json::to_string(&cp)?)?;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;

        let mut table: BTreeMap<(usize, usize, usize), (usize, usize)> = BTreeMap::new();
        let mut curve: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        for &(sub, si, mi, alarm) in outcomes.iter().flatten() {
            let e = table.entry((si, mi, sub)).or_default();
            e.0 += usize::from(alarm);
            e.1 += 1;
            let e = curve.entry((si, mi)).or_default();
            e.0 += usize::from(alarm);
            e.1 += 1;
        }
        let rows = table
            .into_iter()
            .map(|((si, mi, sub), (det, reps))| SweepRow {
                k: subsets[sub].len(),
                attacked: subsets[sub].clone(),
                attack_size: s.sizes[si],
                corrupted: s.corrupted[mi],
                detections: det,
                reps,
            })
            .collect();
        let curve = curve
            .into_iter()
            .map(|((si, mi), (det, reps))| CurvePoint {
                attack_size: s.sizes[si],
                corrupted: s.corrupted[mi],
                detection_rate: det as f64 / reps as f64,
                reps,
            })
            .collect();
        Ok(SweepResult { rows, curve })
    }

    fn sweep_chunk(&self, chunk: usize, subsets: &[Vec<BusId>], tuned: &TunedConfig) -> Result<Vec<Outcome>> {
        let s = &self.manifest.sweep;
        let config = tuned.config();
        let ids = self.var_ids();
        let n_corr = s.corrupted.len();
        let run = |task: u64, sub: usize, si: usize, mi: usize, rng: &mut ChaCha8Rng| -> Result<Outcome> {
            let _ = task;
            let window = self.attacked_window(&subsets[sub], s.sizes[si], s.sizing, s.corrupted[mi], rng)?;
            let acc = CovAccumulator::from_rows(ids.clone(), window.data())?;
            let report = detect(&acc, &self.reference, &config, tuned.tolerance)?;
            Ok((sub, si, mi, report.alarm))
        };
        let mut out = Vec::with_capacity(s.reps);
        match s.mode {
            SweepMode::Sampled => {
                let (si, mi) = (chunk / n_corr, chunk % n_corr);
                for r in 0..s.reps {
                    let task = (chunk * s.reps + r) as u64;
                    let mut rng = task_rng(self.manifest.seed, stream::SWEEP, task);
                    let sub = rng.random_range(0..subsets.len());
                    out.push(run(task, sub, si, mi, &mut rng)?);
                }
            }
            SweepMode::Exhaustive => {
                let per_subset = s.sizes.len() * n_corr * s.reps;
                for point in 0..s.sizes.len() * n_corr {
                    let (si, mi) = (point / n_corr, point % n_corr);
                    for r in 0..s.reps {
                        let task = (chunk * per_subset + point * s.reps + r) as u64;
                        let mut rng = task_rng(self.manifest.seed, stream::SWEEP, task);
                        out.push(run(task, chunk, si, mi, &mut rng)?);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Anomaly scores of the configured attacked set, averaged over reps.
    pub fn anomaly(&self) -> Result<Vec<AnomalySummary>> {
        let a = &self.manifest.anomaly;
        let ids = self.var_ids();
        let attacked: Vec<usize> = a
            .attacked
            .iter()
            .map(|id| {
                ids.binary_search(id)
                    .map_err(|_| Error::invalid(format!("attacked bus {id} is not a non-slack bus")))
            })
            .collect::<Result<_>>()?;
        let corrupted = a.corrupted.unwrap_or(self.manifest.window.size);
        let j_ref = self.model.j();
        let sigma_ref = self.model.covariance();

        a.sizes
            .iter()
            .enumerate()
            .map(|(si, &size)| {
                let per_rep: Vec<Vec<f64>> = (0..a.reps)
                    .into_par_iter()
                    .map(|r| {
                        let mut rng = task_rng(self.manifest.seed, stream::ANOMALY, (si * a.reps + r) as u64);
                        let window = self.attacked_window(&a.attacked, size, a.sizing, corrupted, &mut rng)?;
                        let cov = batch_covariance(window.data())?;
                        let ridge = a.ridge.unwrap_or_else(|| default_ridge(&cov));
                        let j_att = estimate_precision(&cov, ridge)?;
                        let sigma_att = (&cov + cov.transpose()) * 0.5 + DMatrix::identity(cov.nrows(), cov.nrows()) * ridge;
                        Ok(anomaly_scores(&ids, j_ref, sigma_ref, &j_att, &sigma_att, a.threshold)?.scores)
                    })
                    .collect::<Result<_>>()?;
                let p = ids.len();
                let k = attacked.len();
                let mut mean = vec![0.0; p];
                let (mut top, mut exact) = (0usize, 0usize);
                for scores in &per_rep {
                    for (m, s) in mean.iter_mut().zip(scores) {
                        *m += s / a.reps as f64;
                    }
                    let mut order: Vec<usize> = (0..p).collect();
                    order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(x.cmp(&y)));
                    let mut best: Vec<usize> = order[..k.min(p)].to_vec();
                    best.sort_unstable();
                    top += usize::from(best == attacked);
                    let flagged: Vec<usize> = (0..p).filter(|&v| scores[v] > a.threshold).collect();
                    exact += usize::from(flagged == attacked);
                }
                Ok(AnomalySummary {
                    attack_size: size,
                    reps: a.reps,
                    mean_scores: mean,
                    top_rate: top as f64 / a.reps as f64,
                    exact_rate: exact as f64 / a.reps as f64,
                })
            })
            .collect()
    }

    /// `n` clean samples, optionally with a trailing attack.
    pub fn simulate(&self, n: usize, attack: Option<(&[BusId], f64, usize)>) -> Result<SampleMatrix> {
        let mut rng = task_rng(self.manifest.seed, stream::SIMULATE, 0);
        let clean = self.clean_samples(n, &mut rng)?.with_seed(self.manifest.seed);
        match attack {
            None => Ok(clean),
            Some((set, size, duration)) => {
                if duration > n {
                    return Err(Error::Dimension { expected: n, got: duration });
                }
                let spec = build_attack(&self.b, set, size, self.manifest.anomaly.sizing, duration, 0)?;
                let d = spec.draw_perturbations(clean.var_ids(), duration, &mut rng)?;
                Ok(apply_perturbations(&clean, &d))
            }
        }
    }

    /// Runs the detector on the window of `samples` selected by the window mode.
    pub fn detect_samples(&self, samples: &SampleMatrix, tuned: &TunedConfig) -> Result<DetectionReport> {
        if samples.var_ids() != self.var_ids().as_slice() {
            return Err(Error::invalid("sample columns do not match the case's non-slack buses"));
        }
        let w = self.manifest.window.size;
        let data = samples.data();
        let start = match self.manifest.window.mode {
            WindowMode::Sliding => data.nrows().saturating_sub(w),
            WindowMode::Growing => 0,
        };
        let window = data.rows(start, data.nrows() - start).into_owned();
        let acc = CovAccumulator::from_rows(samples.var_ids().to_vec(), &window)?;
        detect(&acc, &self.reference, &tuned.config(), tuned.tolerance)
    }

    // ---- file outputs -----------------------------------------------------

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.manifest.out.clone();
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn write_csv(&self, path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
        let mut buf = self.comment().into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(header)?;
            for row in rows {
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        fs::write(path, buf)?;
        Ok(())
    }

    /// Loads `tuned.json` from the output directory when it belongs to this
    /// manifest, otherwise tunes and writes it.
    pub fn load_or_tune(&self) -> Result<TunedConfig> {
        let path = self.out_dir()?.join("tuned.json");
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(t) = serde_json::from_str::<TunedConfig>(&text) {
                if t.manifest_sha256 == self.hash {
                    return Ok(t);
                }
            }
        }
        self.cmd_tune()
    }

    pub fn cmd_tune(&self) -> Result<TunedConfig> {
        let tuned = self.tune()?;
        let dir = self.out_dir()?;
        fs::write(dir.join("tuned.json"), serde_json::to_string_pretty(&tuned)? + "\n")?;
        Ok(tuned)
    }

    pub fn cmd_sweep(&self) -> Result<SweepResult> {
        let tuned = self.load_or_tune()?;
        let dir = self.out_dir()?;
        let result = self.sweep(&tuned, Some(&dir.join("checkpoints")))?;
        let rows = result
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.k.to_string(),
                    r.attacked.iter().map(|b| b.to_string()).collect::<Vec<_>>().join("-"),
                    r.attack_size.to_string(),
                    r.corrupted.to_string(),
                    (r.detections as f64 / r.reps as f64).to_string(),
                    r.reps.to_string(),
                ]
            })
            .collect();
        self.write_csv(
            &dir.join("sweep.csv"),
            &["k", "attacked_set", "attack_size", "corrupted_samples", "detection_rate", "reps"],
            rows,
        )?;
        let curve_rows = result
            .curve
            .iter()
            .map(|p| {
                vec![
                    p.attack_size.to_string(),
                    p.corrupted.to_string(),
                    p.detection_rate.to_string(),
                    p.reps.to_string(),
                ]
            })
            .collect();
        self.write_csv(
            &dir.join("curve.csv"),
            &["attack_size", "corrupted_samples", "detection_rate", "reps"],
            curve_rows,
        )?;
        let series: Vec<(String, Vec<(f64, f64)>)> = self
            .manifest
            .sweep
            .sizes
            .iter()
            .map(|&size| {
                let pts = result
                    .curve
                    .iter()
                    .filter(|p| p.attack_size == size)
                    .map(|p| (p.corrupted as f64, p.detection_rate))
                    .collect();
                (format!("attack size {size}"), pts)
            })
            .collect();
        let svg = plot::line_chart("Detection rate", "corrupted samples in window", "detection rate", &series, 1.0);
        fs::write(dir.join("curve.svg"), svg)?;
        Ok(result)
    }

    pub fn cmd_anomaly(&self) -> Result<Vec<AnomalySummary>> {
        let summaries = self.anomaly()?;
        let dir = self.out_dir()?;
        let ids = self.var_ids();
        let attacked = &self.manifest.anomaly.attacked;
        let mut rows = Vec::new();
        for s in &summaries {
            for (id, score) in ids.iter().zip(&s.mean_scores) {
                rows.push(vec![
                    s.attack_size.to_string(),
                    id.to_string(),
                    score.to_string(),
                    attacked.contains(id).to_string(),
                ]);
            }
        }
        self.write_csv(&dir.join("anomaly.csv"), &["attack_size", "bus_id", "mean_score", "attacked"], rows)?;
        let summary_rows = summaries
            .iter()
            .map(|s| {
                vec![
                    s.attack_size.to_string(),
                    s.reps.to_string(),
                    s.top_rate.to_string(),
                    s.exact_rate.to_string(),
                ]
            })
            .collect();
        self.write_csv(
            &dir.join("anomaly_summary.csv"),
            &["attack_size", "reps", "top_rate", "exact_flag_rate"],
            summary_rows,
        )?;
        let categories: Vec<String> = ids.iter().map(|id| id.to_string()).collect();
        let series: Vec<(String, Vec<f64>)> = summaries
            .iter()
            .map(|s| (format!("attack size {}", s.attack_size), s.mean_scores.clone()))
            .collect();
        let svg = plot::bar_chart(
            "Anomaly score",
            "bus",
            "mean anomaly score",
            &categories,
            &series,
            self.manifest.anomaly.threshold,
        );
        fs::write(dir.join("anomaly.svg"), svg)?;
        Ok(summaries)
    }

    pub fn cmd_simulate(&self, n: usize, attack: Option<(&[BusId], f64, usize)>) -> Result<PathBuf> {
        let samples = self.simulate(n, attack)?;
        let path = self.out_dir()?.join("samples.csv");
        let mut buf = self.comment().into_bytes();
        samples.write_csv(&mut buf)?;
        fs::write(&path, buf)?;
        Ok(path)
    }

    pub fn cmd_detect(&self, samples_path: &Path) -> Result<DetectionReport> {
        let samples = SampleMatrix::read_csv(fs::File::open(samples_path)?)?;
        let tuned = self.load_or_tune()?;
        let report = self.detect_samples(&samples, &tuned)?;
        fs::write(self.out_dir()?.join("detection.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(report)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    manifest_sha256: String,
    outcomes: Vec<Outcome>,
}
