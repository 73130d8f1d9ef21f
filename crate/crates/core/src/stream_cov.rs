//! Incremental sample covariance and conditional covariances.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::case_io::BusId;
use crate::error::{Error, Result};
use crate::gmrf::{check_conditioning, schur_entry};

/// Streaming mean and co-moment (Welford form).
///
/// The co-moment `M = Σ (x − μ)(x − μ)ᵀ` is algebraically equal to
/// `Σxxᵀ − nμμᵀ` but avoids cancellation. The covariance is the unbiased
/// `M / (n − 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovAccumulator {
    var_ids: Vec<BusId>,
    n: u64,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
}

impl CovAccumulator {
    pub fn new(var_ids: Vec<BusId>) -> Self {
        let p = var_ids.len();
        CovAccumulator { var_ids, n: 0, mean: DVector::zeros(p), comoment: DMatrix::zeros(p, p) }
    }

    /// Accumulates every row of `data`.
    pub fn from_rows(var_ids: Vec<BusId>, data: &DMatrix<f64>) -> Result<Self> {
        let mut acc = Self::new(var_ids);
        for row in data.row_iter() {
            acc.update(row.transpose().as_slice())?;
        }
        Ok(acc)
    }

    pub fn var_ids(&self) -> &[BusId] {
        &self.var_ids
    }

    pub fn dim(&self) -> usize {
        self.var_ids.len()
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn update(&mut self, sample: &[f64]) -> Result<()> {
        if sample.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: sample.len() });
        }
        self.n += 1;
        let n = self.n as f64;
        let delta = DVector::from_column_slice(sample) - &self.mean;
        self.mean += &delta / n;
        // δδᵀ(n−1)/n equals (x − μ_old)(x − μ_new)ᵀ and stays exactly symmetric.
        self.comoment.ger(1.0 - 1.0 / n, &delta, &delta, 1.0);
        Ok(())
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.n < 2 {
            return Err(Error::invalid(format!("covariance needs n >= 2, have {}", self.n)));
        }
        Ok(&self.comoment / (self.n - 1) as f64)
    }
}

/// Two-pass unbiased covariance of the rows of `data`.
pub fn batch_covariance(data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = data.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("covariance needs n >= 2, have {n}")));
    }
    let mean = data.row_mean();
    let centered = DMatrix::from_fn(n, data.ncols(), |r, c| data[(r, c)] - mean[c]);
    let cov = centered.tr_mul(&centered) / (n - 1) as f64;
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Fixed-capacity FIFO of samples; statistics are recomputed exactly from
/// the retained samples.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    var_ids: Vec<BusId>,
    capacity: usize,
    buf: VecDeque<Vec<f64>>,
}

impl SlidingWindow {
    pub fn new(var_ids: Vec<BusId>, capacity: usize) -> Result<Self> {
        if capacity < 2 {
            return Err(Error::invalid("window capacity must be at least 2"));
        }
        Ok(SlidingWindow { var_ids, capacity, buf: VecDeque::with_capacity(capacity) })
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends a sample, evicting the oldest one when full.
    pub fn push(&mut self, sample: &[f64]) -> Result<()> {
        if sample.len() != self.var_ids.len() {
            return Err(Error::Dimension { expected: self.var_ids.len(), got: sample.len() });
        }
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(sample.to_vec());
        Ok(())
    }

    /// Accumulator over the current window contents, oldest first.
    pub fn to_accumulator(&self) -> CovAccumulator {
        let mut acc = CovAccumulator::new(self.var_ids.clone());
        for s in &self.buf {
            acc.update(s).expect("window samples have the right length");
        }
        acc
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        self.to_accumulator().covariance()
    }
}

/// Sample conditional covariance `Σ̂(i,j|S)`.
///
/// When `Σ̂(S,S)` is numerically singular a ridge of `1e-10 · trace/|S|` is
/// added before a second attempt.
pub fn conditional_covariance(cov: &DMatrix<f64>, i: usize, j: usize, s: &[usize]) -> Result<f64> {
    check_conditioning(cov.nrows(), i, j, s)?;
    match schur_entry(cov, i, j, s, 0.0) {
        Ok(v) => Ok(v),
        Err(_) => schur_entry(cov, i, j, s, conditioning_ridge(cov, s)),
    }
}

pub(crate) fn conditioning_ridge(cov: &DMatrix<f64>, s: &[usize]) -> f64 {
    let trace: f64 = s.iter().map(|&k| cov[(k, k)]).sum();
    1e-10 * trace.abs().max(f64::MIN_POSITIVE) / s.len() as f64
}
