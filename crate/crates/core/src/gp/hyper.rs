//! Hyperpriors and slice sampling of the GP hyperparameters.
//!
//! The sampler state lives in an unconstrained space `[λ, ln γ², ln l_1..ln l_D, ln σ²]`
//! and each coordinate is updated with univariate stepping-out slice sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{log_marginal_likelihood, Dataset, GpHyper};
use crate::error::{Error, Result};
use crate::special::LN_2PI;

const GAMMA_SHAPE: f64 = 1.5;
const GAMMA_RATE: f64 = 0.5;

/// `Normal(mean_mu, mean_var)` on the constant mean; `Gamma(1.5, rate 0.5)` on
/// `γ²`, every `l_d` and `σ²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPrior {
    pub mean_mu: f64,
    pub mean_var: f64,
    pub gamma_shape: f64,
    pub gamma_rate: f64,
}

impl HyperPrior {
    pub fn from_data(data: &Dataset) -> Self {
        Self {
            mean_mu: data.output_mean(),
            mean_var: data.output_variance() + 1.0,
            gamma_shape: GAMMA_SHAPE,
            gamma_rate: GAMMA_RATE,
        }
    }

    fn log_gamma_density(&self, v: f64) -> f64 {
        let (a, b) = (self.gamma_shape, self.gamma_rate);
        (a - 1.0) * v.ln() - b * v + a * b.ln() - libm::lgamma(a)
    }

    /// Log prior density on the raw (untransformed) parameters.
    pub fn log_density(&self, h: &GpHyper) -> f64 {
        let dm = h.mean - self.mean_mu;
        let mut lp = -0.5 * dm * dm / self.mean_var - 0.5 * (LN_2PI + self.mean_var.ln());
        lp += self.log_gamma_density(h.amplitude_sq);
        lp += self.log_gamma_density(h.noise_var);
        lp += h.lengthscale.iter().map(|l| self.log_gamma_density(*l)).sum::<f64>();
        lp
    }
}

/// Unnormalized log posterior `log p(D|ψ) + log p(ψ)` on the raw parameters.
pub fn log_hyper_posterior(data: &Dataset, hyper: &GpHyper, prior: &HyperPrior) -> Result<f64> {
    Ok(log_marginal_likelihood(data, hyper)? + prior.log_density(hyper))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    pub burn_in: usize,
    pub thin: usize,
    /// Initial bracket width for the log-parameters.
    pub width: f64,
    pub max_steps_out: usize,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            burn_in: 300,
            thin: 5,
            width: 1.0,
            max_steps_out: 20,
        }
    }
}

/// `M` approximate draws from `p(ψ | D)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPosteriorSamples {
    pub samples: Vec<GpHyper>,
    /// Unnormalized log posterior of each sample.
    pub log_posterior: Vec<f64>,
}

impl HyperPosteriorSamples {
    pub fn from_single(hyper: GpHyper) -> Self {
        Self {
            samples: vec![hyper],
            log_posterior: vec![0.0],
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The sample with the highest posterior density.
    pub fn best(&self) -> &GpHyper {
        let i = (0..self.samples.len())
            .max_by(|&a, &b| self.log_posterior[a].total_cmp(&self.log_posterior[b]))
            .expect("at least one sample");
        &self.samples[i]
    }
}

/// A slice-sampling Markov chain over the hyperparameters; can be warm-started
/// across iterations of an optimization loop.
#[derive(Clone, Debug)]
pub struct HyperChain {
    state: Vec<f64>,
    config: SliceConfig,
}

impl HyperChain {
    /// Starts from a data-driven default: mean and variance of the outputs,
    /// a quarter of the domain width as lengthscale, and 1% noise.
    pub fn new(data: &Dataset, config: SliceConfig) -> Self {
        let var = data.output_variance().max(1e-2);
        let mut state = vec![data.output_mean(), var.ln()];
        for d in 0..data.dim() {
            state.push((0.25 * data.domain().width(d)).ln());
        }
        state.push((0.01 * var).ln());
        Self { state, config }
    }

    pub fn from_hyper(hyper: &GpHyper, config: SliceConfig) -> Self {
        let mut state = vec![hyper.mean, hyper.amplitude_sq.ln()];
        state.extend(hyper.lengthscale.iter().map(|l| l.ln()));
        state.push(hyper.noise_var.ln());
        Self { state, config }
    }

    pub fn current(&self) -> GpHyper {
        decode(&self.state)
    }

    /// Runs `burn_in` sweeps, then collects `count` samples `thin` sweeps apart.
    pub fn run<R: Rng + ?Sized>(
        &mut self,
        data: &Dataset,
        burn_in: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<HyperPosteriorSamples> {
        if data.len() < 2 {
            return Err(Error::InvalidArgument("hyperparameter sampling needs at least 2 points".into()));
        }
        if count == 0 {
            return Err(Error::InvalidArgument("sample count must be positive".into()));
        }
        if self.state.len() != data.dim() + 3 {
            return Err(Error::DimensionMismatch {
                expected: data.dim() + 3,
                got: self.state.len().saturating_sub(3),
            });
        }
        let target = Target::new(data);
        let mut current = target.eval(&self.state);
        if !current.is_finite() {
            // Warm start no longer admissible for the new data; restart.
            *self = Self::new(data, self.config);
            current = target.eval(&self.state);
            if !current.is_finite() {
                return Err(Error::Numerical("hyperparameter chain has no finite start".into()));
            }
        }
        for _ in 0..burn_in {
            current = self.sweep(&target, current, rng);
        }
        let mut samples = Vec::with_capacity(count);
        let mut log_post = Vec::with_capacity(count);
        for _ in 0..count {
            for _ in 0..self.config.thin.max(1) {
                current = self.sweep(&target, current, rng);
            }
            let h = decode(&self.state);
            log_post.push(log_hyper_posterior(data, &h, &target.prior)?);
            samples.push(h);
        }
        Ok(HyperPosteriorSamples {
            samples,
            log_posterior: log_post,
        })
    }

    fn sweep<R: Rng + ?Sized>(&mut self, target: &Target, mut current: f64, rng: &mut R) -> f64 {
        for i in 0..self.state.len() {
            let width = if i == 0 {
                target.prior.mean_var.sqrt()
            } else {
                self.config.width
            };
            current = self.slice_coordinate(target, i, current, width, rng);
        }
        current
    }

    fn slice_coordinate<R: Rng + ?Sized>(
        &mut self,
        target: &Target,
        i: usize,
        current: f64,
        width: f64,
        rng: &mut R,
    ) -> f64 {
        let x0 = self.state[i];
        let log_y = current + rng.random::<f64>().ln();
        let eval_at = |v: f64, state: &mut Vec<f64>| {
            state[i] = v;
            target.eval(state)
        };
        let mut lo = x0 - width * rng.random::<f64>();
        let mut hi = lo + width;
        let mut j = (self.config.max_steps_out as f64 * rng.random::<f64>()).floor() as usize;
        let mut k = self.config.max_steps_out.saturating_sub(1) - j.min(self.config.max_steps_out.saturating_sub(1));
        while j > 0 && eval_at(lo, &mut self.state) > log_y {
            lo -= width;
            j -= 1;
        }
        while k > 0 && eval_at(hi, &mut self.state) > log_y {
            hi += width;
            k -= 1;
        }
        for _ in 0..200 {
            let v = lo + rng.random::<f64>() * (hi - lo);
            let lv = eval_at(v, &mut self.state);
            if lv > log_y {
                return lv;
            }
            if v < x0 {
                lo = v;
            } else {
                hi = v;
            }
        }
        self.state[i] = x0;
        current
    }
}

/// Draws `count` hyperparameter samples with the default burn-in and thinning.
pub fn sample_hyperparameters<R: Rng + ?Sized>(
    data: &Dataset,
    count: usize,
    rng: &mut R,
) -> Result<HyperPosteriorSamples> {
    let config = SliceConfig::default();
    HyperChain::new(data, config).run(data, config.burn_in, count, rng)
}

fn decode(state: &[f64]) -> GpHyper {
    let dim = state.len() - 3;
    GpHyper {
        mean: state[0],
        amplitude_sq: state[1].exp(),
        lengthscale: state[2..2 + dim].iter().map(|v| v.exp()).collect(),
        noise_var: state[2 + dim].exp(),
    }
}

struct Target<'a> {
    data: &'a Dataset,
    prior: HyperPrior,
    bounds: Vec<(f64, f64)>,
}

impl<'a> Target<'a> {
    fn new(data: &'a Dataset) -> Self {
        let prior = HyperPrior::from_data(data);
        let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY), (1e-6f64.ln(), 1e4f64.ln())];
        for d in 0..data.dim() {
            let w = data.domain().width(d);
            bounds.push(((1e-3 * w).ln(), (1e2 * w).ln()));
        }
        bounds.push((1e-8f64.ln(), 1e3f64.ln()));
        Self { data, prior, bounds }
    }

    /// Log density in the transformed space, including the log-Jacobian.
    fn eval(&self, state: &[f64]) -> f64 {
        if state
            .iter()
            .zip(&self.bounds)
            .any(|(v, (lo, hi))| !v.is_finite() || v < lo || v > hi)
        {
            return f64::NEG_INFINITY;
        }
        let h = decode(state);
        let jacobian: f64 = state[1..].iter().sum();
        match log_hyper_posterior(self.data, &h, &self.prior) {
            Ok(v) if v.is_finite() => v + jacobian,
            _ => f64::NEG_INFINITY,
        }
    }
}
