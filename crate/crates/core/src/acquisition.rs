//! The Monte-Carlo PPES acquisition function, its gradient and the batch optimizer.
//!
//! For each hyperparameter sample `ψ⁽ⁱ⁾` with maximizer `x*⁽ⁱ⁾` the acquisition
//! adds `½ [log det(K⁽ⁱ⁾ + σ²I) − log det(Σ⁽ⁱ⁾ + σ²I)]`, where `K⁽ⁱ⁾` is the
//! predictive covariance of the batch and `Σ⁽ⁱ⁾` the same covariance after EP
//! conditioning on `x*⁽ⁱ⁾` being the maximizer.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ep::{ep_condition_with, linearize, ConstraintVectors, EpConfig};
use crate::error::{check_dim, Error, Result};
use crate::gp::{sq_exp, sq_exp_grad, Dataset, Domain, GpPosterior, HyperPosteriorSamples, Point};
use crate::linalg::{leading_block, JitteredCholesky};
use crate::optimize::{projected_ascent, AscentConfig};
use crate::xstar::{map_maximizer, sample_maximizer, MaximizerSample, XStarMethod, XStarSource};

/// Shift applied to a batch point that coincides with another point or with `x*`.
const DUPLICATE_SHIFT: f64 = 1e-6;
const COINCIDENCE_TOL: f64 = 1e-9;

/// A set of `Q` query points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchCandidate {
    pub points: Vec<Point>,
}

impl BatchCandidate {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::InvalidArgument("a batch needs at least one point".into()));
        };
        let dim = first.len();
        for p in &points {
            check_dim(dim, p.len())?;
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.points.concat()
    }

    pub fn from_flat(flat: &[f64], dim: usize) -> Self {
        Self {
            points: flat.chunks(dim).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(domain: &Domain, q: usize, rng: &mut R) -> Self {
        Self {
            points: (0..q).map(|_| domain.sample_uniform(rng)).collect(),
        }
    }
}

/// Everything the acquisition needs: the data and one posterior and maximizer per
/// hyperparameter sample.
#[derive(Clone, Debug)]
pub struct AcquisitionContext {
    data: Dataset,
    samples: Vec<MaximizerSample>,
    posteriors: Vec<GpPosterior>,
    ep: EpConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub method: XStarMethod,
    /// Redraws of an `x*` whose probe EP run fails before falling back to the MAP.
    pub max_redraws: usize,
    pub ep: EpConfig,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            method: XStarMethod::default(),
            max_redraws: 50,
            ep: EpConfig::default(),
        }
    }
}

impl AcquisitionContext {
    /// Uses the given maximizer samples as they are.
    pub fn new(data: Dataset, samples: Vec<MaximizerSample>) -> Result<Self> {
        Self::with_ep_config(data, samples, EpConfig::default())
    }

    pub fn with_ep_config(data: Dataset, samples: Vec<MaximizerSample>, ep: EpConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("at least one maximizer sample is required".into()));
        }
        let mut posteriors = Vec::with_capacity(samples.len());
        for s in &samples {
            check_dim(data.dim(), s.x_star.len())?;
            posteriors.push(GpPosterior::fit(&data, &s.hyper)?);
        }
        Ok(Self {
            data,
            samples,
            posteriors,
            ep,
        })
    }

    /// Draws one `x*` per hyperparameter sample.
    ///
    /// Each draw is probed with EP on a random batch of size `q`; draws whose EP run
    /// fails are rejected and redrawn.
    pub fn build<R: Rng + ?Sized>(
        data: &Dataset,
        hypers: &HyperPosteriorSamples,
        q: usize,
        config: &ContextConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if q == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let domain = data.domain().clone();
        let y_max = data.y_max();
        let mut samples = Vec::with_capacity(hypers.len());
        let mut posteriors = Vec::with_capacity(hypers.len());
        for hyper in &hypers.samples {
            let post = GpPosterior::fit(data, hyper)?;
            let mut accepted = None;
            for _ in 0..=config.max_redraws {
                let s = sample_maximizer(config.method, data, hyper, &domain, rng)?;
                let probe = BatchCandidate::random(&domain, q, rng);
                let pts = prepare_points(&probe.points, &domain);
                if sample_term(&post, &s.x_star, &pts, &domain, y_max, &config.ep, None).is_ok() {
                    accepted = Some(s);
                    break;
                }
            }
            let s = match accepted {
                Some(s) => s,
                None => {
                    log::warn!("x* draws kept failing EP; using the posterior-mean maximizer");
                    MaximizerSample {
                        hyper: hyper.clone(),
                        x_star: map_maximizer(data, hyper, &domain, rng)?,
                        source: XStarSource::Map,
                    }
                }
            };
            samples.push(s);
            posteriors.push(post);
        }
        Ok(Self {
            data: data.clone(),
            samples,
            posteriors,
            ep: config.ep,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn samples(&self) -> &[MaximizerSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The per-sample terms `½[log det(K+σ²I) − log det(Σ+σ²I)]`; failed EP runs are errors.
    pub fn sample_terms(&self, batch: &BatchCandidate) -> Result<Vec<Result<f64>>> {
        self.check_batch(batch)?;
        let domain = self.data.domain();
        let sorted: Vec<Point> = canonical_order(&batch.points)
            .into_iter()
            .map(|i| batch.points[i].clone())
            .collect();
        let pts = prepare_points(&sorted, domain);
        let y_max = self.data.y_max();
        Ok((0..self.len())
            .into_par_iter()
            .map(|i| {
                sample_term(&self.posteriors[i], &self.samples[i].x_star, &pts, domain, y_max, &self.ep, None)
                    .map(|(v, _)| v)
            })
            .collect())
    }

    fn check_batch(&self, batch: &BatchCandidate) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for p in &batch.points {
            check_dim(self.data.dim(), p.len())?;
        }
        Ok(())
    }
}

/// Nudges exact duplicates apart so that the joint predictive stays nonsingular.
fn prepare_points(points: &[Point], domain: &Domain) -> Vec<Point> {
    let mut out: Vec<Point> = Vec::with_capacity(points.len());
    for p in points {
        let mut p = p.clone();
        domain.clamp(&mut p);
        while out.iter().any(|o| coincide(o, &p)) {
            shift(&mut p, domain);
        }
        out.push(p);
    }
    out
}

fn coincide(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= COINCIDENCE_TOL)
}

fn shift(p: &mut [f64], domain: &Domain) {
    for (d, v) in p.iter_mut().enumerate() {
        *v = if *v + DUPLICATE_SHIFT <= domain.upper()[d] {
            *v + DUPLICATE_SHIFT
        } else {
            *v - DUPLICATE_SHIFT
        };
    }
}

/// One Monte-Carlo term and, optionally, its gradient (`Q × D`) with the EP sites
/// held fixed.
fn sample_term(
    post: &GpPosterior,
    x_star: &[f64],
    batch: &[Point],
    domain: &Domain,
    y_max: f64,
    ep_config: &EpConfig,
    grad_mode: Option<GradientMode>,
) -> Result<(f64, Option<DMatrix<f64>>)> {
    let q = batch.len();
    let dim = x_star.len();
    let mut z: Vec<Point> = batch.to_vec();
    for p in z.iter_mut() {
        while coincide(p, x_star) {
            shift(p, domain);
        }
    }
    z.push(x_star.to_vec());
    let pred = post.predictive(&z);
    let noise = post.hyper().noise_var;

    let mut k_noisy = leading_block(&pred.cov, q);
    for i in 0..q {
        k_noisy[(i, i)] += noise;
    }
    let v_chol = JitteredCholesky::new(&k_noisy)?;
    let ep = ep_condition_with(&pred, y_max, noise, ep_config)?;
    let mut s_noisy = ep.batch_cov();
    for i in 0..q {
        s_noisy[(i, i)] += noise;
    }
    let w_chol = JitteredCholesky::new(&s_noisy)
        .map_err(|_| Error::EpFailure("conditioned batch covariance not positive definite".into()))?;
    let value = 0.5 * (v_chol.log_det() - w_chol.log_det());
    if !value.is_finite() {
        return Err(Error::EpFailure("non-finite acquisition term".into()));
    }
    let Some(mode) = grad_mode else {
        return Ok((value, None));
    };

    let cons = ConstraintVectors::new(q);
    let lin = linearize(&pred, y_max, noise, &ep.sites)?;
    let p = &lin.p;

    // k(X, z) solved against K_X + σ²I, for the data part of ∂K₊
    let hyper = post.hyper();
    let data_solve = post.factor().map(|f| {
        let n = post.n_data();
        let kxz = DMatrix::from_fn(n, q + 1, |i, j| sq_exp(&post.inputs()[i], &z[j], hyper));
        f.solve(&kxz)
    });

    let v_inv = v_chol.inverse();
    let w_inv = w_chol.inverse();

    // Adjoint of the EP fixed point: λ = J⁻ᵀ ∂V/∂(ν, η). Only ν enters V directly.
    let n_active = lin.active.len();
    let lambda = if mode == GradientMode::Exact && n_active > 0 {
        let mut dv = DVector::zeros(2 * n_active);
        for (ji, &j) in lin.active.iter().enumerate() {
            let u = cons.mat_col(j, &lin.cov).rows(0, q).into_owned();
            dv[ji] = 0.5 * u.dot(&(&w_inv * &u));
        }
        let lam = lin
            .site_jacobian
            .transpose()
            .lu()
            .solve(&dv)
            .ok_or_else(|| Error::EpFailure("singular EP fixed-point Jacobian".into()))?;
        Some(lam)
    } else {
        None
    };
    // Pᵀ c_j for each active site
    let ptc: Vec<DVector<f64>> = lin.active.iter().map(|&j| p.transpose() * cons.vector(j)).collect();
    let mut grad = DMatrix::zeros(q, dim);
    for qi in 0..q {
        let dk = cov_row_derivative(post, &z, data_solve.as_ref(), qi);
        let a = p.column(qi).rows(0, q).into_owned();
        let mean_grad = post.mean_grad(&z[qi]).1;
        for d in 0..dim {
            // ∂K₊ = e_q gᵀ + g e_qᵀ
            let g = dk.column(d).into_owned();
            let first = (&v_inv * g.rows(0, q))[qi];
            let pg = p * &g;
            let second = a.dot(&(&w_inv * pg.rows(0, q)));
            let mut total = first - second;
            if let Some(lam) = &lambda {
                // change of each site's (m_j, s_j) at fixed sites, mapped to its residual
                let gr = g.dot(&lin.r);
                for (ji, pc) in ptc.iter().enumerate() {
                    let pcg = pc.dot(&g);
                    let ds = 2.0 * pc[qi] * pcg;
                    let dm = pc[qi] * gr + pcg * lin.r[qi] + pc[qi] * mean_grad[d];
                    let map = lin.moment_map[ji];
                    total -= lam[ji] * (map[0][0] * dm + map[0][1] * ds);
                    total -= lam[n_active + ji] * (map[1][0] * dm + map[1][1] * ds);
                }
            }
            grad[(qi, d)] = total;
        }
    }
    Ok((value, Some(grad)))
}

/// Column `d` holds `g` with `∂K₊/∂x_{q,d} = e_q gᵀ + g e_qᵀ` for the posterior
/// covariance `K₊` over `z`; `data_solve` is `(K_X + σ²I)⁻¹ k(X, z)`.
fn cov_row_derivative(post: &GpPosterior, z: &[Point], data_solve: Option<&DMatrix<f64>>, qi: usize) -> DMatrix<f64> {
    let hyper = post.hyper();
    let dim = z[qi].len();
    let mut buf = vec![0.0; dim];
    let mut dk = DMatrix::zeros(z.len(), dim);
    for (j, zj) in z.iter().enumerate() {
        // the prior variance does not depend on x_q
        if j == qi {
            continue;
        }
        sq_exp_grad(&z[qi], zj, hyper, &mut buf);
        for d in 0..dim {
            dk[(j, d)] = buf[d];
        }
    }
    if let Some(u) = data_solve {
        let mut dkx = DMatrix::zeros(post.n_data(), dim);
        for (i, xi) in post.inputs().iter().enumerate() {
            sq_exp_grad(&z[qi], xi, hyper, &mut buf);
            for d in 0..dim {
                dkx[(i, d)] = buf[d];
            }
        }
        dk -= u.transpose() * dkx;
    }
    dk
}

/// Mean of the successful per-sample terms.
fn reduce(results: Vec<Result<(f64, Option<DMatrix<f64>>)>>) -> Result<(f64, Option<DMatrix<f64>>)> {
    let mut count = 0usize;
    let mut value = 0.0;
    let mut grad: Option<DMatrix<f64>> = None;
    let mut last_err = None;
    for r in results {
        match r {
            Ok((v, g)) => {
                count += 1;
                value += v;
                if let Some(g) = g {
                    grad = Some(match grad {
                        Some(acc) => acc + g,
                        None => g,
                    });
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    if count == 0 {
        return Err(match last_err {
            Some(Error::EpFailure(m)) => Error::EpFailure(m),
            Some(e) => e,
            None => Error::EpFailure("no samples".into()),
        });
    }
    let scale = 1.0 / count as f64;
    Ok((value * scale, grad.map(|g| g * scale)))
}

/// Order in which the batch is handed to EP. Sequential site updates make the
/// converged sites depend slightly on point order; fixing the order makes the
/// acquisition an exact function of the point set.
fn canonical_order(points: &[Point]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

fn evaluate(
    batch: &BatchCandidate,
    ctx: &AcquisitionContext,
    grad_mode: Option<GradientMode>,
) -> Result<(f64, Option<DMatrix<f64>>)> {
    ctx.check_batch(batch)?;
    let domain = ctx.data.domain();
    let order = canonical_order(&batch.points);
    let sorted: Vec<Point> = order.iter().map(|&i| batch.points[i].clone()).collect();
    let pts = prepare_points(&sorted, domain);
    let y_max = ctx.data.y_max();
    let results: Vec<_> = (0..ctx.len())
        .into_par_iter()
        .map(|i| sample_term(&ctx.posteriors[i], &ctx.samples[i].x_star, &pts, domain, y_max, &ctx.ep, grad_mode))
        .collect();
    let (v, g) = reduce(results)?;
    let g = g.map(|g| {
        let mut out = DMatrix::zeros(g.nrows(), g.ncols());
        for (row, &i) in order.iter().enumerate() {
            out.set_row(i, &g.row(row));
        }
        out
    });
    Ok((v, g))
}

/// Monte-Carlo estimate of the information the batch carries about `x*`.
///
/// Samples whose EP run fails are left out of the average; the call fails only
/// if every sample fails.
pub fn ppes_value(batch: &BatchCandidate, ctx: &AcquisitionContext) -> Result<f64> {
    evaluate(batch, ctx, None).map(|(v, _)| v)
}

/// How the gradient treats the EP site parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientMode {
    /// Differentiates through the EP fixed point, so the result is the derivative of
    /// [`ppes_value`] itself.
    Exact,
    /// Holds the sites constant and differentiates `Σ₊ = (K₊⁻¹ + C S Cᵀ)⁻¹` through
    /// `K₊` alone. Cheaper, but the sites do move with the batch, so this is only a
    /// search direction.
    FixedSites,
}

/// Gradient of [`ppes_value`] with respect to the batch points, as a `Q × D` matrix.
pub fn ppes_gradient(batch: &BatchCandidate, ctx: &AcquisitionContext) -> Result<DMatrix<f64>> {
    ppes_value_and_gradient(batch, ctx).map(|(_, g)| g)
}

pub fn ppes_value_and_gradient(batch: &BatchCandidate, ctx: &AcquisitionContext) -> Result<(f64, DMatrix<f64>)> {
    ppes_value_and_gradient_with(batch, ctx, GradientMode::Exact)
}

pub fn ppes_value_and_gradient_with(
    batch: &BatchCandidate,
    ctx: &AcquisitionContext,
    mode: GradientMode,
) -> Result<(f64, DMatrix<f64>)> {
    let (v, g) = evaluate(batch, ctx, Some(mode))?;
    Ok((v, g.expect("gradient requested")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub random_batches: usize,
    /// Number of best random batches to run gradient ascent from.
    pub restarts: usize,
    pub ascent_steps: usize,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            random_batches: 1000,
            restarts: 1,
            ascent_steps: 100,
        }
    }
}

/// Maximizes [`ppes_value`] over batches of size `q` in `domain`.
pub fn optimize_batch<R: Rng + ?Sized>(
    ctx: &AcquisitionContext,
    domain: &Domain,
    q: usize,
    rng: &mut R,
) -> Result<BatchCandidate> {
    optimize_batch_with(ctx, domain, q, &OptimizeConfig::default(), rng).map(|(b, _)| b)
}

/// Scores uniform random batches, then ascends from the best ones. Returns the
/// batch and its value; batches whose EP fails for every sample score `-∞`.
pub fn optimize_batch_with<R: Rng + ?Sized>(
    ctx: &AcquisitionContext,
    domain: &Domain,
    q: usize,
    config: &OptimizeConfig,
    rng: &mut R,
) -> Result<(BatchCandidate, f64)> {
    if q == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    check_dim(ctx.data.dim(), domain.dim())?;
    let dim = domain.dim();
    let score = |flat: &[f64]| ppes_value(&BatchCandidate::from_flat(flat, dim), ctx).unwrap_or(f64::NEG_INFINITY);
    let score_grad = |flat: &[f64]| match ppes_value_and_gradient(&BatchCandidate::from_flat(flat, dim), ctx) {
        Ok((v, g)) => {
            // row-major flattening matches `BatchCandidate::flatten`
            let gt = g.transpose();
            (v, gt.as_slice().to_vec())
        }
        Err(_) => (f64::NEG_INFINITY, vec![0.0; flat.len()]),
    };

    let mut scanned: Vec<(Vec<f64>, f64)> = (0..config.random_batches.max(1))
        .map(|_| {
            let b = BatchCandidate::random(domain, q, rng).flatten();
            let v = score(&b);
            (b, v)
        })
        .collect();
    // stable sort keeps the first-drawn batch among equals
    scanned.sort_by(|a, b| b.1.total_cmp(&a.1));

    let lower: Vec<f64> = (0..q).flat_map(|_| domain.lower().iter().copied()).collect();
    let upper: Vec<f64> = (0..q).flat_map(|_| domain.upper().iter().copied()).collect();
    let ascent = AscentConfig {
        max_steps: config.ascent_steps,
        ..AscentConfig::default()
    };
    let (mut best, mut best_v) = scanned[0].clone();
    for (start, start_v) in scanned.iter().take(config.restarts.max(1)) {
        if !start_v.is_finite() {
            continue;
        }
        let (x, v) = projected_ascent(score, score_grad, start, &lower, &upper, &ascent);
        if v > best_v {
            best = x;
            best_v = v;
        }
    }
    if !best_v.is_finite() {
        return Err(Error::EpFailure("every candidate batch failed".into()));
    }
    Ok((BatchCandidate::from_flat(&best, dim), best_v))
}
