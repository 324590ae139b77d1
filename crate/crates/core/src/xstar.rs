//! Approximate draws from the posterior over the global maximizer `x*`.
//!
//! Two samplers are offered: the maximizer of the posterior mean (a point
//! estimate), and the maximizer of a random-feature approximation to a posterior
//! sample path.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{check_dim, Error, Result};
use crate::gp::{Dataset, Domain, GpHyper, GpPosterior, Point};
use crate::linalg::JitteredCholesky;
use crate::optimize::{multistart_ascent, AscentConfig};

pub const DEFAULT_FEATURES: usize = 500;
pub const DEFAULT_STARTS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum XStarSource {
    Map,
    RandomFeature,
}

/// Which sampler the acquisition should use for `x*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum XStarMethod {
    Map,
    RandomFeature { features: usize },
}

impl Default for XStarMethod {
    fn default() -> Self {
        Self::RandomFeature {
            features: DEFAULT_FEATURES,
        }
    }
}

/// A hyperparameter sample paired with a maximizer drawn under it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaximizerSample {
    pub hyper: GpHyper,
    pub x_star: Point,
    pub source: XStarSource,
}

/// `g(x) = φ(x)ᵀθ + λ` with `φ(x) = √(2α/m) cos(Wx + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomFeatureModel {
    pub freq: DMatrix<f64>,
    pub phase: DVector<f64>,
    pub amp_norm: f64,
    pub weights: DVector<f64>,
    pub mean_offset: f64,
}

impl RandomFeatureModel {
    pub fn n_features(&self) -> usize {
        self.phase.len()
    }

    pub fn dim(&self) -> usize {
        self.freq.ncols()
    }

    fn scale(&self) -> f64 {
        (2.0 * self.amp_norm / self.n_features() as f64).sqrt()
    }

    #[inline]
    fn arg(&self, j: usize, x: &[f64]) -> f64 {
        let mut a = self.phase[j];
        for (d, xd) in x.iter().enumerate() {
            a += self.freq[(j, d)] * xd;
        }
        a
    }

    pub fn features(&self, x: &[f64]) -> DVector<f64> {
        let s = self.scale();
        DVector::from_fn(self.n_features(), |j, _| s * self.arg(j, x).cos())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let s = self.scale();
        let mut v = 0.0;
        for j in 0..self.n_features() {
            v += self.weights[j] * self.arg(j, x).cos();
        }
        self.mean_offset + s * v
    }

    pub fn eval_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let s = self.scale();
        let mut v = 0.0;
        let mut g = vec![0.0; x.len()];
        for j in 0..self.n_features() {
            let a = self.arg(j, x);
            let w = self.weights[j];
            v += w * a.cos();
            let ds = -w * a.sin();
            for (d, gd) in g.iter_mut().enumerate() {
                *gd += ds * self.freq[(j, d)];
            }
        }
        g.iter_mut().for_each(|gd| *gd *= s);
        (self.mean_offset + s * v, g)
    }
}

fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Draws spectral features for the squared-exponential kernel and a weight vector
/// from its exact Gaussian posterior given `data`.
pub fn draw_feature_model<R: Rng + ?Sized>(
    data: &Dataset,
    hyper: &GpHyper,
    m: usize,
    rng: &mut R,
) -> Result<RandomFeatureModel> {
    if m == 0 {
        return Err(Error::InvalidArgument("feature count must be positive".into()));
    }
    hyper.validate()?;
    check_dim(data.dim(), hyper.dim())?;
    let dim = hyper.dim();
    let mut freq = DMatrix::zeros(m, dim);
    for j in 0..m {
        for d in 0..dim {
            let z: f64 = StandardNormal.sample(rng);
            freq[(j, d)] = z / hyper.lengthscale[d];
        }
    }
    let phase = DVector::from_fn(m, |_, _| rng.random::<f64>() * 2.0 * PI);
    let mut model = RandomFeatureModel {
        freq,
        phase,
        amp_norm: hyper.amplitude_sq,
        weights: DVector::zeros(m),
        mean_offset: hyper.mean,
    };
    if data.is_empty() {
        model.weights = standard_normal_vec(m, rng);
        return Ok(model);
    }
    let rows: Vec<_> = data.inputs().iter().map(|x| model.features(x).transpose()).collect();
    let phi = DMatrix::from_rows(&rows);
    let y = DVector::from_iterator(data.len(), data.outputs().iter().map(|v| v - hyper.mean));
    model.weights = draw_weights(&phi, &y, hyper.noise_var, rng)?;
    Ok(model)
}

/// Draws `θ ~ N(A⁻¹Φᵀy, σ²A⁻¹)`, `A = ΦᵀΦ + σ²I`, by perturbing a prior draw with
/// the data residual; costs `O(n²m)` instead of factoring the `m × m` matrix `A`.
fn draw_weights<R: Rng + ?Sized>(
    phi: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_var: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let (n, m) = phi.shape();
    let theta0 = standard_normal_vec(m, rng);
    let noise = standard_normal_vec(n, rng) * noise_var.sqrt();
    let mut gram = phi * phi.transpose();
    for i in 0..n {
        gram[(i, i)] += noise_var;
    }
    let chol = JitteredCholesky::new(&gram)?;
    let resid = y - phi * &theta0 - noise;
    Ok(theta0 + phi.transpose() * chol.solve_vec(&resid))
}

fn uniform_starts<R: Rng + ?Sized>(domain: &Domain, count: usize, rng: &mut R) -> Vec<Point> {
    (0..count).map(|_| domain.sample_uniform(rng)).collect()
}

/// Approximate maximizer of the posterior mean, from uniform starts plus the
/// observed inputs.
pub fn map_maximizer<R: Rng + ?Sized>(data: &Dataset, hyper: &GpHyper, domain: &Domain, rng: &mut R) -> Result<Point> {
    check_dim(domain.dim(), hyper.dim())?;
    let post = GpPosterior::fit(data, hyper)?;
    let mut starts = uniform_starts(domain, DEFAULT_STARTS, rng);
    starts.extend(data.inputs().iter().cloned());
    let (x, _) = multistart_ascent(
        |x| post.mean(x),
        |x| post.mean_grad(x),
        &starts,
        domain.lower(),
        domain.upper(),
        &AscentConfig::default(),
    );
    Ok(x)
}

/// Maximizer of a given feature model over `domain`.
pub fn maximize_feature_model<R: Rng + ?Sized>(model: &RandomFeatureModel, domain: &Domain, rng: &mut R) -> Point {
    let starts = uniform_starts(domain, DEFAULT_STARTS, rng);
    multistart_ascent(
        |x| model.eval(x),
        |x| model.eval_grad(x),
        &starts,
        domain.lower(),
        domain.upper(),
        &AscentConfig::default(),
    )
    .0
}

/// One approximate draw of `x*` via a random-feature sample path.
pub fn sample_maximizer_rf<R: Rng + ?Sized>(
    data: &Dataset,
    hyper: &GpHyper,
    domain: &Domain,
    m: usize,
    rng: &mut R,
) -> Result<Point> {
    check_dim(domain.dim(), hyper.dim())?;
    let model = draw_feature_model(data, hyper, m, rng)?;
    Ok(maximize_feature_model(&model, domain, rng))
}

/// Draws one [`MaximizerSample`] under `hyper` with the chosen method.
pub fn sample_maximizer<R: Rng + ?Sized>(
    method: XStarMethod,
    data: &Dataset,
    hyper: &GpHyper,
    domain: &Domain,
    rng: &mut R,
) -> Result<MaximizerSample> {
    let (x_star, source) = match method {
        XStarMethod::Map => (map_maximizer(data, hyper, domain, rng)?, XStarSource::Map),
        XStarMethod::RandomFeature { features } => (
            sample_maximizer_rf(data, hyper, domain, features, rng)?,
            XStarSource::RandomFeature,
        ),
    };
    Ok(MaximizerSample {
        hyper: hyper.clone(),
        x_star,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::kernel_eval;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hyper_1d(l: f64) -> GpHyper {
        GpHyper::isotropic(0.0, 1.0, l, 1, 1e-4).unwrap()
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize) -> Dataset {
        let mut d = Dataset::new(Domain::unit(1));
        for _ in 0..n {
            let x = rng.random::<f64>();
            d.push(vec![x], rng.random::<f64>() * 2.0 - 1.0).unwrap();
        }
        d
    }

    fn grid(n: usize) -> impl Iterator<Item = f64> {
        (0..n).map(move |i| i as f64 / (n - 1) as f64)
    }

    #[test]
    fn map_single_observation_is_peak() {
        let data = Dataset::from_pairs(Domain::unit(1), vec![vec![0.5]], vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = map_maximizer(&data, &hyper_1d(0.1), &Domain::unit(1), &mut rng).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-4, "{x:?}");
    }

    #[test]
    fn map_empty_data_in_domain() {
        let dom = Domain::new(vec![-2.0, 1.0], vec![-1.0, 3.0]).unwrap();
        let data = Dataset::new(dom.clone());
        let h = GpHyper::isotropic(0.0, 1.0, 0.3, 2, 1e-3).unwrap();
        let x = map_maximizer(&data, &h, &dom, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(dom.contains(&x));
    }

    #[test]
    fn map_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = hyper_1d(0.1);
        for _ in 0..20 {
            let data = random_dataset(&mut rng, 6);
            let post = GpPosterior::fit(&data, &h).unwrap();
            let x = map_maximizer(&data, &h, &Domain::unit(1), &mut rng).unwrap();
            let best = grid(10_000).map(|g| post.mean(&[g])).fold(f64::NEG_INFINITY, f64::max);
            assert!(post.mean(&x) >= best - 1e-6);
        }
    }

    #[test]
    fn empty_data_prior_weights_and_feature_bound() {
        let data = Dataset::new(Domain::unit(2));
        let h = GpHyper::isotropic(0.0, 2.5, 0.2, 2, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = draw_feature_model(&data, &h, 4000, &mut rng).unwrap();
        let w = &model.weights;
        let mean = w.mean();
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.06 && (var - 1.0).abs() < 0.08, "{mean} {var}");
        for _ in 0..50 {
            let x = Domain::unit(2).sample_uniform(&mut rng);
            assert!(model.features(&x).norm_squared() <= 2.0 * 2.5 + 1e-12);
        }
        assert!(model.phase.iter().all(|b| (0.0..2.0 * PI).contains(b)));
    }

    fn reconstruction_errors(m: usize, seed: u64) -> Vec<f64> {
        let data = Dataset::new(Domain::unit(2));
        let h = GpHyper::new(0.0, 1.0, vec![0.2, 0.4], 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = draw_feature_model(&data, &h, m, &mut rng).unwrap();
        (0..200)
            .map(|_| {
                let x = Domain::unit(2).sample_uniform(&mut rng);
                let y = Domain::unit(2).sample_uniform(&mut rng);
                (kernel_eval(&x, &y, &h).unwrap() - model.features(&x).dot(&model.features(&y))).abs()
            })
            .collect()
    }

    #[test]
    fn kernel_reconstruction() {
        let e = reconstruction_errors(2000, 5);
        assert!(e.iter().sum::<f64>() / e.len() as f64 <= 0.05);
        let median = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(median(reconstruction_errors(2000, 6)) < median(reconstruction_errors(50, 6)));
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = random_dataset(&mut rng, 5);
        let h = hyper_1d(0.2);
        let a = draw_feature_model(&data, &h, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = draw_feature_model(&data, &h, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weights_follow_posterior() {
        // exact posterior of θ under fixed features, compared by Monte Carlo
        let data = Dataset::from_pairs(Domain::unit(1), vec![vec![0.2], vec![0.7]], vec![0.5, -0.3]).unwrap();
        let h = GpHyper::isotropic(0.1, 1.0, 0.3, 1, 0.05).unwrap();
        let template = draw_feature_model(&data, &h, 3, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let phi = DMatrix::from_rows(&[template.features(&[0.2]).transpose(), template.features(&[0.7]).transpose()]);
        let a = phi.transpose() * &phi + DMatrix::identity(3, 3) * 0.05;
        let ainv = a.try_inverse().unwrap();
        let y = DVector::from_column_slice(&[0.4, -0.4]);
        let mean = &ainv * phi.transpose() * &y;
        let cov = ainv * 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 40_000;
        let mut acc = DVector::zeros(3);
        let mut acc2 = DMatrix::zeros(3, 3);
        for _ in 0..n {
            let t = draw_weights(&phi, &y, 0.05, &mut rng).unwrap();
            acc += &t;
            acc2 += &t * t.transpose();
        }
        let m = acc / n as f64;
        let c = acc2 / n as f64 - &m * m.transpose();
        assert!((m - mean).abs().max() < 0.02);
        assert!((c - cov).abs().max() < 0.02);
    }

    #[test]
    fn single_feature_argmax_matches_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = hyper_1d(0.1);
        for _ in 0..20 {
            let data = random_dataset(&mut rng, 3);
            let model = draw_feature_model(&data, &h, 1, &mut rng).unwrap();
            let x = maximize_feature_model(&model, &Domain::unit(1), &mut rng);
            let best = grid(10_000).map(|g| model.eval(&[g])).fold(f64::NEG_INFINITY, f64::max);
            assert!(model.eval(&x) >= best - 1e-6);
        }
    }

    #[test]
    fn dominant_observation_attracts_samples() {
        let h = GpHyper::isotropic(0.0, 1.0, 0.05, 1, 0.01).unwrap();
        let x0 = 0.63;
        let mut inputs = vec![vec![x0]];
        let mut outputs = vec![5.0];
        for i in 0..8 {
            let x = (i as f64 + 0.5) / 8.0;
            if (x - x0).abs() > 0.1 {
                inputs.push(vec![x]);
                outputs.push(0.0);
            }
        }
        let data = Dataset::from_pairs(Domain::unit(1), inputs, outputs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let near = (0..100)
            .filter(|_| {
                let x = sample_maximizer_rf(&data, &h, &Domain::unit(1), 500, &mut rng).unwrap();
                (x[0] - x0).abs() <= 3.0 * 0.05
            })
            .count();
        assert!(near >= 60, "{near}");
    }

    #[test]
    fn outputs_respect_bounds() {
        let dom = Domain::new(vec![0.2, -1.0], vec![0.4, 1.0]).unwrap();
        let h = GpHyper::isotropic(0.0, 1.0, 0.5, 2, 1e-3).unwrap();
        let data = Dataset::new(dom.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let s = sample_maximizer(XStarMethod::RandomFeature { features: 50 }, &data, &h, &dom, &mut rng).unwrap();
            assert!(dom.contains(&s.x_star));
            assert_eq!(s.source, XStarSource::RandomFeature);
        }
    }
}
