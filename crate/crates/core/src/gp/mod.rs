//! Gaussian-process surrogate: domain and data containers, the ARD
//! squared-exponential kernel, posterior moments, the marginal likelihood and
//! Monte-Carlo sampling of the hyperparameters.

mod hyper;
mod posterior;

pub use hyper::{
    log_hyper_posterior, sample_hyperparameters, HyperChain, HyperPosteriorSamples, HyperPrior,
    SliceConfig,
};
pub use posterior::{log_marginal_likelihood, posterior_predictive, GpPosterior, MvnPredictive};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A point in the input space.
pub type Point = Vec<f64>;

/// Axis-aligned box `[lower, upper]` in `D` dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::InvalidArgument("domain needs at least one dimension".into()));
        }
        check_dim(lower.len(), upper.len())?;
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::InvalidArgument("domain requires lower < upper".into()));
        }
        Ok(Self { lower, upper })
    }

    /// The unit hypercube `[0, 1]^dim`.
    pub fn unit(dim: usize) -> Self {
        assert!(dim >= 1);
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, d: usize) -> f64 {
        self.upper[d] - self.lower[d]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    /// Projects `x` onto the box.
    pub fn clamp(&self, x: &mut [f64]) {
        for (d, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[d], self.upper[d]);
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        (0..self.dim())
            .map(|d| self.lower[d] + rng.random::<f64>() * self.width(d))
            .collect()
    }

    /// Maps a point of the unit cube into the box.
    pub fn from_unit(&self, u: &[f64]) -> Point {
        u.iter()
            .enumerate()
            .map(|(d, v)| self.lower[d] + v * self.width(d))
            .collect()
    }
}

/// Observed input/output pairs inside a [`Domain`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    domain: Domain,
    inputs: Vec<Point>,
    outputs: Vec<f64>,
    y_max: f64,
}

impl Dataset {
    pub fn new(domain: Domain) -> Self {
        Self {
            domain,
            inputs: Vec::new(),
            outputs: Vec::new(),
            y_max: f64::NEG_INFINITY,
        }
    }

    pub fn from_pairs(domain: Domain, inputs: Vec<Point>, outputs: Vec<f64>) -> Result<Self> {
        check_dim(inputs.len(), outputs.len())?;
        let mut data = Self::new(domain);
        for (x, y) in inputs.into_iter().zip(outputs) {
            data.push(x, y)?;
        }
        Ok(data)
    }

    pub fn push(&mut self, x: Point, y: f64) -> Result<()> {
        check_dim(self.domain.dim(), x.len())?;
        if !self.domain.contains(&x) {
            return Err(Error::InvalidArgument(format!("input {x:?} outside domain")));
        }
        if !y.is_finite() {
            return Err(Error::InvalidArgument("non-finite output".into()));
        }
        self.y_max = self.y_max.max(y);
        self.inputs.push(x);
        self.outputs.push(y);
        Ok(())
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn inputs(&self) -> &[Point] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Largest observed output; `-inf` when empty.
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    /// Index of the largest observed output (first one on ties).
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, y) in self.outputs.iter().enumerate() {
            if best.is_none_or(|b| *y > self.outputs[b]) {
                best = Some(i);
            }
        }
        best
    }

    pub fn output_mean(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.outputs.iter().sum::<f64>() / self.len() as f64
    }

    /// Population variance of the outputs (0 for fewer than two points).
    pub fn output_variance(&self) -> f64 {
        if self.len() < 2 {
            return 0.0;
        }
        let m = self.output_mean();
        self.outputs.iter().map(|y| (y - m).powi(2)).sum::<f64>() / self.len() as f64
    }

    /// Affinely rescaled copy with zero-mean, unit-variance outputs.
    pub fn standardized(&self) -> (Dataset, Standardization) {
        let shift = self.output_mean();
        let sd = self.output_variance().sqrt();
        let scale = if sd > 1e-12 { sd } else { 1.0 };
        let st = Standardization { shift, scale };
        let outputs = self.outputs.iter().map(|y| st.forward(*y)).collect::<Vec<_>>();
        let y_max = outputs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (
            Dataset {
                domain: self.domain.clone(),
                inputs: self.inputs.clone(),
                outputs,
                y_max,
            },
            st,
        )
    }
}

/// `y ↦ (y - shift) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub shift: f64,
    pub scale: f64,
}

impl Standardization {
    pub fn forward(&self, y: f64) -> f64 {
        (y - self.shift) / self.scale
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.scale + self.shift
    }
}

/// Hyperparameters of the constant-mean, ARD squared-exponential GP with
/// Gaussian observation noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub mean: f64,
    pub amplitude_sq: f64,
    pub lengthscale: Vec<f64>,
    pub noise_var: f64,
}

impl GpHyper {
    pub fn new(mean: f64, amplitude_sq: f64, lengthscale: Vec<f64>, noise_var: f64) -> Result<Self> {
        let h = Self {
            mean,
            amplitude_sq,
            lengthscale,
            noise_var,
        };
        h.validate()?;
        Ok(h)
    }

    /// Same lengthscale in every dimension.
    pub fn isotropic(mean: f64, amplitude_sq: f64, lengthscale: f64, dim: usize, noise_var: f64) -> Result<Self> {
        Self::new(mean, amplitude_sq, vec![lengthscale; dim], noise_var)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !self.mean.is_finite() {
            return Err(Error::InvalidArgument("mean must be finite".into()));
        }
        if !positive(self.amplitude_sq) || !positive(self.noise_var) {
            return Err(Error::InvalidArgument("amplitude and noise must be positive".into()));
        }
        if self.lengthscale.is_empty() || !self.lengthscale.iter().all(|l| positive(*l)) {
            return Err(Error::InvalidArgument("lengthscales must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscale.len()
    }
}

#[inline]
pub(crate) fn sq_exp(x: &[f64], x2: &[f64], hyper: &GpHyper) -> f64 {
    let mut r2 = 0.0;
    for ((a, b), l) in x.iter().zip(x2).zip(&hyper.lengthscale) {
        let z = (a - b) / l;
        r2 += z * z;
    }
    hyper.amplitude_sq * (-0.5 * r2).exp()
}

/// `γ² exp(-½ Σ_d (x_d - x2_d)² / l_d²)`.
pub fn kernel_eval(x: &[f64], x2: &[f64], hyper: &GpHyper) -> Result<f64> {
    check_dim(hyper.dim(), x.len())?;
    check_dim(hyper.dim(), x2.len())?;
    Ok(sq_exp(x, x2, hyper))
}

/// Gradient of `k(x, x2)` with respect to `x`.
#[inline]
pub(crate) fn sq_exp_grad(x: &[f64], x2: &[f64], hyper: &GpHyper, out: &mut [f64]) -> f64 {
    let k = sq_exp(x, x2, hyper);
    for d in 0..x.len() {
        let l2 = hyper.lengthscale[d] * hyper.lengthscale[d];
        out[d] = -k * (x[d] - x2[d]) / l2;
    }
    k
}

/// Prior covariance matrix over a point set.
pub fn kernel_matrix(points: &[Point], hyper: &GpHyper) -> nalgebra::DMatrix<f64> {
    let n = points.len();
    let mut k = nalgebra::DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hyper.amplitude_sq;
        for j in 0..i {
            let v = sq_exp(&points[i], &points[j], hyper);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}
