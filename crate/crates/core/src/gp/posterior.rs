use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{kernel_matrix, sq_exp, sq_exp_grad, Dataset, GpHyper, Point};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{symmetrize, JitteredCholesky};
use crate::special::LN_2PI;

/// Joint Gaussian over a finite set of latent values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MvnPredictive {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl MvnPredictive {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// A GP conditioned on a dataset under fixed hyperparameters.
///
/// Holds the Cholesky factor of `K + σ²I` and `α = (K + σ²I)⁻¹ (y − λ)` so that
/// pointwise queries cost `O(n²)`.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    hyper: GpHyper,
    inputs: Vec<Point>,
    chol: Option<JitteredCholesky>,
    alpha: DVector<f64>,
}

impl GpPosterior {
    pub fn fit(data: &Dataset, hyper: &GpHyper) -> Result<Self> {
        hyper.validate()?;
        check_dim(data.dim(), hyper.dim())?;
        if data.is_empty() {
            return Ok(Self {
                hyper: hyper.clone(),
                inputs: Vec::new(),
                chol: None,
                alpha: DVector::zeros(0),
            });
        }
        let mut k = kernel_matrix(data.inputs(), hyper);
        for i in 0..data.len() {
            k[(i, i)] += hyper.noise_var;
        }
        let chol = JitteredCholesky::new(&k)?;
        let resid = DVector::from_iterator(data.len(), data.outputs().iter().map(|y| y - hyper.mean));
        let alpha = chol.solve_vec(&resid);
        Ok(Self {
            hyper: hyper.clone(),
            inputs: data.inputs().to_vec(),
            chol: Some(chol),
            alpha,
        })
    }

    pub fn hyper(&self) -> &GpHyper {
        &self.hyper
    }

    pub fn n_data(&self) -> usize {
        self.inputs.len()
    }

    pub fn inputs(&self) -> &[Point] {
        &self.inputs
    }

    /// Factor of `K + σ²I` over the training inputs, if there are any.
    pub(crate) fn factor(&self) -> Option<&JitteredCholesky> {
        self.chol.as_ref()
    }

    /// `k(X, x)` against the training inputs.
    pub fn cross(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|xi| sq_exp(x, xi, &self.hyper)))
    }

    /// `(K + σ²I)⁻¹ k(X, x)`; empty when there is no data.
    pub fn weights(&self, x: &[f64]) -> DVector<f64> {
        match &self.chol {
            Some(c) => c.solve_vec(&self.cross(x)),
            None => DVector::zeros(0),
        }
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        if self.inputs.is_empty() {
            return self.hyper.mean;
        }
        self.hyper.mean + self.cross(x).dot(&self.alpha)
    }

    /// Latent mean and variance at `x`.
    pub fn mean_var(&self, x: &[f64]) -> (f64, f64) {
        match &self.chol {
            None => (self.hyper.mean, self.hyper.amplitude_sq),
            Some(c) => {
                let k = self.cross(x);
                let v = c.solve_lower_vec(&k);
                let var = (self.hyper.amplitude_sq - v.norm_squared()).max(0.0);
                (self.hyper.mean + k.dot(&self.alpha), var)
            }
        }
    }

    /// Mean and its gradient at `x`.
    pub fn mean_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let dim = x.len();
        let mut grad = vec![0.0; dim];
        let mut mean = self.hyper.mean;
        let mut g = vec![0.0; dim];
        for (xi, a) in self.inputs.iter().zip(self.alpha.iter()) {
            let k = sq_exp_grad(x, xi, &self.hyper, &mut g);
            mean += a * k;
            for d in 0..dim {
                grad[d] += a * g[d];
            }
        }
        (mean, grad)
    }

    /// Mean, standard deviation and both gradients at `x`.
    pub fn mean_std_grad(&self, x: &[f64]) -> (f64, f64, Vec<f64>, Vec<f64>) {
        let dim = x.len();
        let n = self.inputs.len();
        let (mean, mean_grad) = self.mean_grad(x);
        if n == 0 {
            return (mean, self.hyper.amplitude_sq.sqrt(), mean_grad, vec![0.0; dim]);
        }
        let mut k = DVector::zeros(n);
        let mut dk = DMatrix::zeros(n, dim);
        let mut g = vec![0.0; dim];
        for (i, xi) in self.inputs.iter().enumerate() {
            k[i] = sq_exp_grad(x, xi, &self.hyper, &mut g);
            for d in 0..dim {
                dk[(i, d)] = g[d];
            }
        }
        let w = self.chol.as_ref().expect("non-empty data").solve_vec(&k);
        let var = (self.hyper.amplitude_sq - k.dot(&w)).max(1e-300);
        let sd = var.sqrt();
        let dvar = dk.transpose() * &w * -2.0;
        let sd_grad = dvar.iter().map(|v| v / (2.0 * sd)).collect();
        (mean, sd, mean_grad, sd_grad)
    }

    /// Joint latent predictive over `test`.
    pub fn predictive(&self, test: &[Point]) -> MvnPredictive {
        let m = test.len();
        let mut cov = kernel_matrix(test, &self.hyper);
        let mut mean = DVector::from_element(m, self.hyper.mean);
        if let Some(c) = &self.chol {
            let n = self.inputs.len();
            let mut kxt = DMatrix::zeros(n, m);
            for j in 0..m {
                for i in 0..n {
                    kxt[(i, j)] = sq_exp(&self.inputs[i], &test[j], &self.hyper);
                }
            }
            mean += kxt.transpose() * &self.alpha;
            let v = c.solve_lower(&kxt);
            cov -= v.transpose() * v;
            symmetrize(&mut cov);
        }
        MvnPredictive { mean, cov }
    }
}

/// Posterior predictive moments of the latent function at `test`.
pub fn posterior_predictive(data: &Dataset, hyper: &GpHyper, test: &[Point]) -> Result<MvnPredictive> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("no test points".into()));
    }
    for x in test {
        check_dim(data.dim(), x.len())?;
    }
    Ok(GpPosterior::fit(data, hyper)?.predictive(test))
}

/// `log N(y; λ1, K + σ²I)`.
pub fn log_marginal_likelihood(data: &Dataset, hyper: &GpHyper) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("marginal likelihood needs data".into()));
    }
    hyper.validate()?;
    check_dim(data.dim(), hyper.dim())?;
    let n = data.len();
    let mut k = kernel_matrix(data.inputs(), hyper);
    for i in 0..n {
        k[(i, i)] += hyper.noise_var;
    }
    let chol = JitteredCholesky::new(&k)?;
    let resid = DVector::from_iterator(n, data.outputs().iter().map(|y| y - hyper.mean));
    let v = chol.solve_lower_vec(&resid);
    Ok(-0.5 * v.norm_squared() - 0.5 * chol.log_det() - 0.5 * n as f64 * LN_2PI)
}
