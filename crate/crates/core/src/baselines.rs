//! Greedy batch policies that PPES is compared against, and the common
//! [`BatchPolicy`] interface shared with PPES itself.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::acquisition::{optimize_batch_with, AcquisitionContext, BatchCandidate, ContextConfig, OptimizeConfig};
use crate::error::{check_dim, Error, Result};
use crate::gp::{sq_exp_grad, Dataset, Domain, GpHyper, GpPosterior, HyperPosteriorSamples, Point};
use crate::linalg::JitteredCholesky;
use crate::optimize::{halton, projected_ascent, AscentConfig};
use crate::special::{norm_cdf, norm_pdf};

/// Candidate-set size for the inner maximizations.
pub const CANDIDATES: usize = 2000;
const DUPLICATE_SHIFT: f64 = 1e-6;

/// Exploration weight `α_t` of the upper confidence bound `μ + α_t^{1/2} σ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum UcbSchedule {
    /// `α_t = 2 log(D t² π² / 0.6)`.
    #[default]
    Standard,
    Constant(f64),
}

impl UcbSchedule {
    /// `t` counts batches from 1.
    pub fn alpha(&self, t: usize, dim: usize) -> f64 {
        match *self {
            Self::Standard => {
                let t = t.max(1) as f64;
                2.0 * (dim as f64 * t * t * PI * PI / 0.6).ln()
            }
            Self::Constant(a) => a,
        }
    }
}

/// Candidate points covering `domain`: a Halton set plus the observed inputs.
pub fn candidate_set(domain: &Domain, n: usize, extra: &[Point]) -> Vec<Point> {
    let mut c: Vec<Point> = halton(n, domain.dim()).iter().map(|u| domain.from_unit(u)).collect();
    c.extend(extra.iter().cloned());
    c
}

/// Maximizes `f` over a candidate set, then polishes the winner by projected ascent.
fn maximize_on_candidates<V, G>(value: V, value_grad: G, candidates: &[Point], domain: &Domain) -> Point
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut best = &candidates[0];
    let mut best_v = f64::NEG_INFINITY;
    for c in candidates {
        let v = value(c);
        if v > best_v {
            best_v = v;
            best = c;
        }
    }
    projected_ascent(value, value_grad, best, domain.lower(), domain.upper(), &AscentConfig::default()).0
}

fn ucb_value_grad(post: &GpPosterior, x: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let (m, s, gm, gs) = post.mean_std_grad(x);
    (m + beta * s, gm.iter().zip(&gs).map(|(a, b)| a + beta * b).collect())
}

fn ucb(post: &GpPosterior, x: &[f64], beta: f64) -> f64 {
    let (m, v) = post.mean_var(x);
    m + beta * v.sqrt()
}

/// Argmax of `μ(x) + α^{1/2} σ(x)` over `domain`.
pub fn ucb_argmax(post: &GpPosterior, alpha: f64, domain: &Domain) -> Point {
    let beta = alpha.max(0.0).sqrt();
    let candidates = candidate_set(domain, CANDIDATES, post.inputs());
    maximize_on_candidates(|x| ucb(post, x, beta), |x| ucb_value_grad(post, x, beta), &candidates, domain)
}

/// `σ [φ(τ) + τ Φ(τ)]` with `τ = (μ − incumbent)/σ`; the improvement itself when `σ = 0`.
pub fn ei_formula(mean: f64, sd: f64, incumbent: f64) -> f64 {
    if sd <= 0.0 {
        return (mean - incumbent).max(0.0);
    }
    let tau = (mean - incumbent) / sd;
    (sd * (norm_pdf(tau) + tau * norm_cdf(tau))).max(0.0)
}

/// Posterior mean at the input with the largest observed output. With noisy
/// outputs this is the model's estimate of `f(x_best)`.
pub fn incumbent(post: &GpPosterior, data: &Dataset) -> Result<f64> {
    let best = data
        .best_index()
        .ok_or_else(|| Error::InvalidArgument("expected improvement needs data".into()))?;
    Ok(post.mean(&data.inputs()[best]))
}

/// Expected improvement of the latent function at `x` over the incumbent.
pub fn expected_improvement(x: &[f64], data: &Dataset, hyper: &GpHyper) -> Result<f64> {
    check_dim(data.dim(), x.len())?;
    let post = GpPosterior::fit(data, hyper)?;
    let inc = incumbent(&post, data)?;
    let (m, v) = post.mean_var(x);
    Ok(ei_formula(m, v.sqrt(), inc))
}

/// Expected improvement averaged over hyperparameter samples and over fantasized
/// outcomes at already chosen batch points.
struct FantasyEi {
    terms: Vec<FantasyTerm>,
}

struct FantasyTerm {
    post: GpPosterior,
    chosen: Vec<Point>,
    /// `(K_X + σ²I)⁻¹ k(X, S)`
    data_solve: DMatrix<f64>,
    /// `(Σ_SS + σ²I)⁻¹`
    m_inv: DMatrix<f64>,
    /// `(Σ_SS + σ²I)⁻¹ (y_f − μ_S)` per fantasy
    shifts: Vec<DVector<f64>>,
    incumbents: Vec<f64>,
}

impl FantasyTerm {
    fn new<R: Rng + ?Sized>(
        post: GpPosterior,
        data: &Dataset,
        chosen: &[Point],
        n_fantasy: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k = chosen.len();
        let n = post.n_data();
        let best = data
            .best_index()
            .ok_or_else(|| Error::InvalidArgument("expected improvement needs data".into()))?;
        if k == 0 {
            let inc = post.mean(&data.inputs()[best]);
            return Ok(Self {
                post,
                chosen: Vec::new(),
                data_solve: DMatrix::zeros(n, 0),
                m_inv: DMatrix::zeros(0, 0),
                shifts: vec![DVector::zeros(0)],
                incumbents: vec![inc],
            });
        }
        let pred = post.predictive(chosen);
        let mut m = pred.cov.clone();
        for i in 0..k {
            m[(i, i)] += post.hyper().noise_var;
        }
        let chol = JitteredCholesky::new(&m)?;
        let m_inv = chol.inverse();
        let mut data_solve = DMatrix::zeros(n, k);
        for (j, s) in chosen.iter().enumerate() {
            data_solve.set_column(j, &post.weights(s));
        }
        // cross-covariances of the data inputs with S, for the fantasy incumbent
        let x_best = &data.inputs()[best];
        let c_best = cross_cov(&post, &data_solve, x_best, chosen);
        let mu_best = post.mean(x_best);
        let fantasies = draw_fantasies_from(&pred.mean, &chol, n_fantasy, rng);
        let mut shifts = Vec::with_capacity(n_fantasy);
        let mut incumbents = Vec::with_capacity(n_fantasy);
        for y in fantasies {
            let w = &m_inv * (&y - &pred.mean);
            // best input among the observed and the fantasized outcomes
            let (arg, _) = y.iter().enumerate().fold((None, data.y_max()), |acc, (j, v)| {
                if *v > acc.1 {
                    (Some(j), *v)
                } else {
                    acc
                }
            });
            let inc = match arg {
                None => mu_best + c_best.dot(&w),
                Some(j) => {
                    let cj = DVector::from_fn(k, |i, _| pred.cov[(j, i)]);
                    pred.mean[j] + cj.dot(&w)
                }
            };
            shifts.push(w);
            incumbents.push(inc);
        }
        Ok(Self {
            post,
            chosen: chosen.to_vec(),
            data_solve,
            m_inv,
            shifts,
            incumbents,
        })
    }

    fn value_grad(&self, x: &[f64], with_grad: bool) -> (f64, Vec<f64>) {
        let dim = x.len();
        let k = self.chosen.len();
        let (mu, sd0, gmu, gsd0) = if with_grad {
            self.post.mean_std_grad(x)
        } else {
            let (m, v) = self.post.mean_var(x);
            (m, v.sqrt(), vec![0.0; dim], vec![0.0; dim])
        };
        let (c, dc) = if k > 0 {
            cross_cov_grad(&self.post, &self.data_solve, x, &self.chosen, with_grad)
        } else {
            (DVector::zeros(0), DMatrix::zeros(0, dim))
        };
        let mc = &self.m_inv * &c;
        let var = (sd0 * sd0 - c.dot(&mc)).max(0.0);
        let sd = var.sqrt();
        // ∇var = ∇var₀ − 2 ∇cᵀ M⁻¹ c
        let gvar: Vec<f64> = (0..dim)
            .map(|d| 2.0 * sd0 * gsd0[d] - if k > 0 { 2.0 * dc.column(d).dot(&mc) } else { 0.0 })
            .collect();
        let mut value = 0.0;
        let mut grad = vec![0.0; dim];
        for (w, inc) in self.shifts.iter().zip(&self.incumbents) {
            let m = mu + if k > 0 { c.dot(w) } else { 0.0 };
            value += ei_formula(m, sd, *inc);
            if with_grad && sd > 1e-12 {
                let tau = (m - inc) / sd;
                let (dm, ds) = (norm_cdf(tau), norm_pdf(tau));
                for d in 0..dim {
                    let gm = gmu[d] + if k > 0 { dc.column(d).dot(w) } else { 0.0 };
                    grad[d] += dm * gm + ds * gvar[d] / (2.0 * sd);
                }
            }
        }
        let scale = 1.0 / self.shifts.len() as f64;
        (value * scale, grad.iter().map(|g| g * scale).collect())
    }
}

/// Posterior covariance between `x` and each point of `s`.
fn cross_cov(post: &GpPosterior, data_solve: &DMatrix<f64>, x: &[f64], s: &[Point]) -> DVector<f64> {
    cross_cov_grad(post, data_solve, x, s, false).0
}

fn cross_cov_grad(
    post: &GpPosterior,
    data_solve: &DMatrix<f64>,
    x: &[f64],
    s: &[Point],
    with_grad: bool,
) -> (DVector<f64>, DMatrix<f64>) {
    let dim = x.len();
    let hyper = post.hyper();
    let mut buf = vec![0.0; dim];
    let mut c = DVector::zeros(s.len());
    let mut dc = DMatrix::zeros(s.len(), dim);
    for (j, sj) in s.iter().enumerate() {
        c[j] = sq_exp_grad(x, sj, hyper, &mut buf);
        for d in 0..dim {
            dc[(j, d)] = buf[d];
        }
    }
    let n = post.n_data();
    if n > 0 {
        let mut kx = DVector::zeros(n);
        let mut dkx = DMatrix::zeros(n, dim);
        for (i, xi) in post.inputs().iter().enumerate() {
            kx[i] = sq_exp_grad(x, xi, hyper, &mut buf);
            for d in 0..dim {
                dkx[(i, d)] = buf[d];
            }
        }
        c -= data_solve.transpose() * kx;
        if with_grad {
            dc -= data_solve.transpose() * dkx;
        }
    }
    (c, dc)
}

impl FantasyEi {
    fn value(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.value_grad(x, false).0).sum::<f64>() / self.terms.len() as f64
    }

    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut v = 0.0;
        let mut g = vec![0.0; x.len()];
        for t in &self.terms {
            let (tv, tg) = t.value_grad(x, true);
            v += tv;
            g.iter_mut().zip(&tg).for_each(|(a, b)| *a += b);
        }
        let s = 1.0 / self.terms.len() as f64;
        (v * s, g.iter().map(|x| x * s).collect())
    }
}

fn draw_fantasies_from<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol: &JitteredCholesky,
    n: usize,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let l = chol.l();
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
            mean + &l * z
        })
        .collect()
}

/// Joint draws of noisy outcomes at `points` from the posterior predictive.
pub fn draw_fantasies<R: Rng + ?Sized>(
    post: &GpPosterior,
    points: &[Point],
    n: usize,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let pred = post.predictive(points);
    let mut cov = pred.cov;
    for i in 0..points.len() {
        cov[(i, i)] += post.hyper().noise_var;
    }
    let chol = JitteredCholesky::new(&cov)?;
    Ok(draw_fantasies_from(&pred.mean, &chol, n, rng))
}

/// Moves any point that coincides with an earlier one by a tiny step.
fn separate_duplicates(points: &mut [Point], domain: &Domain) {
    for i in 1..points.len() {
        while points[..i].iter().any(|p| p == &points[i]) {
            for d in 0..domain.dim() {
                let v = points[i][d];
                points[i][d] = if v + DUPLICATE_SHIFT <= domain.upper()[d] {
                    v + DUPLICATE_SHIFT
                } else {
                    v - DUPLICATE_SHIFT
                };
            }
        }
    }
}

/// Greedy batch expected improvement averaged over hyperparameter samples, with
/// outcomes at already chosen points integrated out by `n_fantasy` joint draws.
pub fn ei_mcmc_batch<R: Rng + ?Sized>(
    data: &Dataset,
    hypers: &HyperPosteriorSamples,
    q: usize,
    n_fantasy: usize,
    rng: &mut R,
) -> Result<BatchCandidate> {
    if q == 0 || n_fantasy == 0 || hypers.is_empty() {
        return Err(Error::InvalidArgument("EI-MCMC needs q, n_fantasy and samples ≥ 1".into()));
    }
    let domain = data.domain().clone();
    let posts: Vec<GpPosterior> = hypers
        .samples
        .iter()
        .map(|h| GpPosterior::fit(data, h))
        .collect::<Result<_>>()?;
    let candidates = candidate_set(&domain, CANDIDATES, data.inputs());
    let mut chosen: Vec<Point> = Vec::with_capacity(q);
    for _ in 0..q {
        let terms = posts
            .iter()
            .map(|p| FantasyTerm::new(p.clone(), data, &chosen, n_fantasy, rng))
            .collect::<Result<Vec<_>>>()?;
        let acq = FantasyEi { terms };
        let x = maximize_on_candidates(|x| acq.value(x), |x| acq.value_grad(x), &candidates, &domain);
        chosen.push(x);
        separate_duplicates(&mut chosen, &domain);
    }
    BatchCandidate::new(chosen)
}

/// Sum over `points` of the squared distance to the nearest selected medoid.
pub fn medoid_cost(points: &[Point], medoids: &[usize]) -> f64 {
    points
        .iter()
        .map(|p| {
            medoids
                .iter()
                .map(|&m| sq_dist(p, &points[m]))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Largest number of subsets searched exhaustively before falling back to
/// greedy addition with swaps.
const EXACT_MEDOID_LIMIT: f64 = 20_000.0;

/// Chooses `k` medoids. Small problems are solved exactly; larger ones use
/// greedy addition followed by improving swaps.
pub fn greedy_k_medoids(points: &[Point], k: usize) -> Vec<usize> {
    let n = points.len();
    let k = k.min(n);
    let subsets = (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    if k > 0 && subsets <= EXACT_MEDOID_LIMIT {
        return exact_k_medoids(points, k);
    }
    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    while medoids.len() < k {
        let mut best = None;
        let mut best_cost = f64::INFINITY;
        for i in 0..n {
            if medoids.contains(&i) || medoids.iter().any(|&m| points[m] == points[i]) {
                continue;
            }
            medoids.push(i);
            let c = medoid_cost(points, &medoids);
            medoids.pop();
            if c < best_cost {
                best_cost = c;
                best = Some(i);
            }
        }
        match best {
            Some(i) => medoids.push(i),
            None => break,
        }
    }
    let mut cost = medoid_cost(points, &medoids);
    let mut improved = true;
    while improved {
        improved = false;
        for slot in 0..medoids.len() {
            for i in 0..n {
                if medoids.iter().any(|&m| points[m] == points[i]) {
                    continue;
                }
                let old = medoids[slot];
                medoids[slot] = i;
                let c = medoid_cost(points, &medoids);
                if c < cost - 1e-12 {
                    cost = c;
                    improved = true;
                } else {
                    medoids[slot] = old;
                }
            }
        }
    }
    medoids
}

fn exact_k_medoids(points: &[Point], k: usize) -> Vec<usize> {
    let n = points.len();
    let mut idx: Vec<usize> = (0..k).collect();
    let mut best = idx.clone();
    let mut best_cost = medoid_cost(points, &idx);
    loop {
        // advance to the next k-subset in lexicographic order
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return best;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
        let c = medoid_cost(points, &idx);
        if c < best_cost - 1e-12 {
            best_cost = c;
            best.clone_from(&idx);
        }
    }
}

/// Simulates the sequential UCB policy with fantasized outcomes until `pool`
/// points are collected (each run contributes at most `q`).
pub fn simulate_ucb_pool<R: Rng + ?Sized>(
    data: &Dataset,
    hyper: &GpHyper,
    q: usize,
    pool: usize,
    schedule: UcbSchedule,
    t: usize,
    rng: &mut R,
) -> Result<Vec<Point>> {
    let domain = data.domain().clone();
    let alpha = schedule.alpha(t, domain.dim());
    let mut population = Vec::with_capacity(pool);
    while population.len() < pool {
        let mut sim = data.clone();
        for _ in 0..q {
            if population.len() >= pool {
                break;
            }
            let post = GpPosterior::fit(&sim, hyper)?;
            let x = ucb_argmax(&post, alpha, &domain);
            let y = draw_fantasies(&post, std::slice::from_ref(&x), 1, rng)?[0][0];
            sim.push(x.clone(), y)?;
            population.push(x);
        }
    }
    Ok(population)
}

/// Simulated matching: `q` medoids of a population of simulated UCB choices.
pub fn sm_ucb_batch<R: Rng + ?Sized>(
    data: &Dataset,
    hyper: &GpHyper,
    q: usize,
    pool: usize,
    schedule: UcbSchedule,
    t: usize,
    rng: &mut R,
) -> Result<BatchCandidate> {
    if q == 0 || pool < q {
        return Err(Error::InvalidArgument("simulated matching needs 1 ≤ q ≤ pool".into()));
    }
    let population = simulate_ucb_pool(data, hyper, q, pool, schedule, t, rng)?;
    Ok(batch_from_medoids(&population, q, data.domain()))
}

/// Medoids of a population, padded with copies of the first medoid when the
/// population has fewer than `q` distinct points.
pub fn batch_from_medoids(population: &[Point], q: usize, domain: &Domain) -> BatchCandidate {
    let medoids = greedy_k_medoids(population, q);
    let mut points: Vec<Point> = medoids.iter().map(|&i| population[i].clone()).collect();
    while points.len() < q {
        points.push(points[0].clone());
    }
    separate_duplicates(&mut points, domain);
    BatchCandidate { points }
}

/// Refits with the chosen points hallucinated at their posterior mean, which
/// shrinks the variance there and leaves the mean unchanged.
pub fn hallucinate(data: &Dataset, hyper: &GpHyper, post: &GpPosterior, points: &[Point]) -> Result<GpPosterior> {
    let mut aug = data.clone();
    for p in points {
        aug.push(p.clone(), post.mean(p))?;
    }
    GpPosterior::fit(&aug, hyper)
}

/// GP-BUCB: sequential UCB with a fixed mean and variances updated by hallucinated
/// observations at the points chosen so far.
pub fn gp_bucb_batch(
    data: &Dataset,
    hyper: &GpHyper,
    q: usize,
    schedule: UcbSchedule,
    t: usize,
) -> Result<BatchCandidate> {
    if q == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let domain = data.domain().clone();
    let beta = schedule.alpha(t, domain.dim()).max(0.0).sqrt();
    let base = GpPosterior::fit(data, hyper)?;
    let candidates = candidate_set(&domain, CANDIDATES, data.inputs());
    let mut chosen: Vec<Point> = Vec::with_capacity(q);
    for _ in 0..q {
        let upd = hallucinate(data, hyper, &base, &chosen)?;
        let value = |x: &[f64]| base.mean(x) + beta * upd.mean_var(x).1.sqrt();
        let value_grad = |x: &[f64]| {
            let (_, gm) = base.mean_grad(x);
            let (_, _, _, gs) = upd.mean_std_grad(x);
            (value(x), gm.iter().zip(&gs).map(|(a, b)| a + beta * b).collect::<Vec<_>>())
        };
        chosen.push(maximize_on_candidates(value, value_grad, &candidates, &domain));
        separate_duplicates(&mut chosen, &domain);
    }
    BatchCandidate::new(chosen)
}

/// GP-UCB-PE: the UCB argmax, then points of maximal hallucinated variance inside
/// the relevant region `{x : UCB(x) ≥ max LCB}`.
pub fn gp_ucb_pe_batch(
    data: &Dataset,
    hyper: &GpHyper,
    q: usize,
    schedule: UcbSchedule,
    t: usize,
) -> Result<BatchCandidate> {
    let candidates = candidate_set(data.domain(), CANDIDATES, data.inputs());
    gp_ucb_pe_batch_on(data, hyper, q, schedule, t, &candidates).map(|(b, _)| b)
}

/// [`gp_ucb_pe_batch`] over an explicit candidate set; also returns the indices
/// of the candidates inside the relevant region.
pub fn gp_ucb_pe_batch_on(
    data: &Dataset,
    hyper: &GpHyper,
    q: usize,
    schedule: UcbSchedule,
    t: usize,
    candidates: &[Point],
) -> Result<(BatchCandidate, Vec<usize>)> {
    if q == 0 || candidates.is_empty() {
        return Err(Error::InvalidArgument("need q ≥ 1 and candidates".into()));
    }
    let domain = data.domain().clone();
    let alpha = schedule.alpha(t, domain.dim());
    let beta = alpha.max(0.0).sqrt();
    let post = GpPosterior::fit(data, hyper)?;
    let first = ucb_argmax(&post, alpha, &domain);
    let stats: Vec<(f64, f64)> = candidates.iter().map(|c| post.mean_var(c)).collect();
    let max_lcb = stats
        .iter()
        .map(|(m, v)| m - beta * v.sqrt())
        .fold(f64::NEG_INFINITY, f64::max);
    let region: Vec<usize> = (0..candidates.len())
        .filter(|&i| stats[i].0 + beta * stats[i].1.sqrt() >= max_lcb)
        .collect();
    let mut chosen = vec![first];
    while chosen.len() < q {
        let upd = hallucinate(data, hyper, &post, &chosen)?;
        let pick = region
            .iter()
            .copied()
            .filter(|&i| !chosen.contains(&candidates[i]))
            .max_by(|&a, &b| upd.mean_var(&candidates[a]).1.total_cmp(&upd.mean_var(&candidates[b]).1));
        match pick {
            Some(i) => chosen.push(candidates[i].clone()),
            None => chosen.push(chosen[0].clone()),
        }
    }
    separate_duplicates(&mut chosen, &domain);
    Ok((BatchCandidate::new(chosen)?, region))
}

/// What a policy sees at batch `t` (counted from 1).
pub struct PolicyState<'a> {
    pub data: &'a Dataset,
    pub hypers: &'a HyperPosteriorSamples,
    pub q: usize,
    pub t: usize,
}

pub trait BatchPolicy: Send + Sync {
    fn name(&self) -> &'static str;
    fn select_batch(&self, state: &PolicyState<'_>, rng: &mut dyn RngCore) -> Result<BatchCandidate>;
}

/// Serializable description of a policy and its settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PolicyConfig {
    Ppes { context: ContextConfig, optimize: OptimizeConfig },
    EiMcmc { n_fantasy: usize },
    SmUcb { pool: usize, schedule: UcbSchedule },
    GpBucb { schedule: UcbSchedule },
    GpUcbPe { schedule: UcbSchedule },
    Random,
}

impl PolicyConfig {
    /// Defaults for a policy given by name: `ppes`, `ei_mcmc`, `sm_ucb`,
    /// `gp_bucb`, `gp_ucb_pe` or `random`.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "ppes" => Self::Ppes {
                context: ContextConfig::default(),
                optimize: OptimizeConfig::default(),
            },
            "ei_mcmc" => Self::EiMcmc { n_fantasy: 100 },
            "sm_ucb" => Self::SmUcb {
                pool: 30,
                schedule: UcbSchedule::default(),
            },
            "gp_bucb" => Self::GpBucb {
                schedule: UcbSchedule::default(),
            },
            "gp_ucb_pe" => Self::GpUcbPe {
                schedule: UcbSchedule::default(),
            },
            "random" => Self::Random,
            _ => return Err(Error::InvalidArgument(format!("unknown policy '{name}'"))),
        })
    }

    pub fn build(&self) -> Box<dyn BatchPolicy> {
        match *self {
            Self::Ppes { context, optimize } => Box::new(PpesPolicy { context, optimize }),
            Self::EiMcmc { n_fantasy } => Box::new(EiMcmcPolicy { n_fantasy }),
            Self::SmUcb { pool, schedule } => Box::new(SmUcbPolicy { pool, schedule }),
            Self::GpBucb { schedule } => Box::new(GpBucbPolicy { schedule }),
            Self::GpUcbPe { schedule } => Box::new(GpUcbPePolicy { schedule }),
            Self::Random => Box::new(RandomPolicy),
        }
    }
}

pub const POLICY_NAMES: [&str; 6] = ["ppes", "ei_mcmc", "sm_ucb", "gp_bucb", "gp_ucb_pe", "random"];

pub struct PpesPolicy {
    pub context: ContextConfig,
    pub optimize: OptimizeConfig,
}

impl BatchPolicy for PpesPolicy {
    fn name(&self) -> &'static str {
        "ppes"
    }

    fn select_batch(&self, state: &PolicyState<'_>, rng: &mut dyn RngCore) -> Result<BatchCandidate> {
        let ctx = AcquisitionContext::build(state.data, state.hypers, state.q, &self.context, rng)?;
        optimize_batch_with(&ctx, state.data.domain(), state.q, &self.optimize, rng).map(|(b, _)| b)
    }
}

pub struct EiMcmcPolicy {
    pub n_fantasy: usize,
}

impl BatchPolicy for EiMcmcPolicy {
    fn name(&self) -> &'static str {
        "ei_mcmc"
    }

    fn select_batch(&self, state: &PolicyState<'_>, rng: &mut dyn RngCore) -> Result<BatchCandidate> {
        ei_mcmc_batch(state.data, state.hypers, state.q, self.n_fantasy, rng)
    }
}

pub struct SmUcbPolicy {
    pub pool: usize,
    pub schedule: UcbSchedule,
}

impl BatchPolicy for SmUcbPolicy {
    fn name(&self) -> &'static str {
        "sm_ucb"
    }

    fn select_batch(&self, state: &PolicyState<'_>, rng: &mut dyn RngCore) -> Result<BatchCandidate> {
        let pool = self.pool.max(state.q);
        sm_ucb_batch(state.data, state.hypers.best(), state.q, pool, self.schedule, state.t, rng)
    }
}

pub struct GpBucbPolicy {
    pub schedule: UcbSchedule,
}

impl BatchPolicy for GpBucbPolicy {
    fn name(&self) -> &'static str {
        "gp_bucb"
    }

    fn select_batch(&self, state: &PolicyState<'_>, _rng: &mut dyn RngCore) -> Result<BatchCandidate> {
        gp_bucb_batch(state.data, state.hypers.best(), state.q, self.schedule, state.t)
    }
}

pub struct GpUcbPePolicy {
    pub schedule: UcbSchedule,
}

impl BatchPolicy for GpUcbPePolicy {
    fn name(&self) -> &'static str {
        "gp_ucb_pe"
    }

    fn select_batch(&self, state: &PolicyState<'_>, _rng: &mut dyn RngCore) -> Result<BatchCandidate> {
        gp_ucb_pe_batch(state.data, state.hypers.best(), state.q, self.schedule, state.t)
    }
}

/// Uniform random batches.
pub struct RandomPolicy;

impl BatchPolicy for RandomPolicy {
    fn name(&self) -> &'static str {
        "random"
    }

    fn select_batch(&self, state: &PolicyState<'_>, rng: &mut dyn RngCore) -> Result<BatchCandidate> {
        Ok(BatchCandidate::random(state.data.domain(), state.q, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_data(dim: usize, n: usize, seed: u64) -> Dataset {
        let domain = Domain::unit(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Dataset::new(domain.clone());
        for _ in 0..n {
            let x = domain.sample_uniform(&mut rng);
            let y = x.iter().map(|v| (6.0 * v).sin()).sum::<f64>() + 0.05 * rng.random::<f64>();
            d.push(x, y).unwrap();
        }
        d
    }

    fn hyper(dim: usize) -> GpHyper {
        GpHyper::isotropic(0.0, 1.0, 0.2, dim, 0.01).unwrap()
    }

    #[test]
    fn schedule_positive() {
        for t in 1..50 {
            for d in 1..7 {
                assert!(UcbSchedule::Standard.alpha(t, d) > 0.0);
            }
        }
        assert_eq!(UcbSchedule::Constant(2.5).alpha(3, 2), 2.5);
    }

    #[test]
    fn ei_formula_values() {
        assert!((ei_formula(1.0, 1.0, 1.0) - 0.398_942_280_4).abs() < 1e-9);
        assert_eq!(ei_formula(0.2, 0.0, 0.5), 0.0);
        assert_eq!(ei_formula(0.7, 0.0, 0.5), 0.7 - 0.5);
    }

    #[test]
    fn ei_nonnegative() {
        let data = toy_data(2, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x = data.domain().sample_uniform(&mut rng);
            assert!(expected_improvement(&x, &data, &hyper(2)).unwrap() >= 0.0);
        }
        assert!(expected_improvement(&[0.5], &Dataset::new(Domain::unit(1)), &hyper(1)).is_err());
    }

    fn grid_argmax_ei(data: &Dataset, h: &GpHyper) -> f64 {
        let post = GpPosterior::fit(data, h).unwrap();
        let inc = incumbent(&post, data).unwrap();
        let ei = |x: f64| {
            let (m, v) = post.mean_var(&[x]);
            ei_formula(m, v.sqrt(), inc)
        };
        let mut best = 0.0;
        let mut best_v = f64::NEG_INFINITY;
        for i in 0..=20_000 {
            let x = i as f64 / 20_000.0;
            if ei(x) > best_v {
                best_v = ei(x);
                best = x;
            }
        }
        // golden-section refinement inside the winning cell
        let (mut a, mut b) = ((best - 5e-5).max(0.0), (best + 5e-5).min(1.0));
        let r = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..80 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if ei(c) > ei(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn ei_mcmc_single_point_is_ei_argmax() {
        for seed in 0..3 {
            let data = toy_data(1, 6, 10 + seed);
            let h = hyper(1);
            let hypers = HyperPosteriorSamples::from_single(h.clone());
            let b = ei_mcmc_batch(&data, &hypers, 1, 10, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let x = grid_argmax_ei(&data, &h);
            assert!((b.points[0][0] - x).abs() < 1e-4, "{:?} vs {x}", b.points[0]);
        }
    }

    #[test]
    fn fantasies_match_predictive() {
        let data = toy_data(1, 5, 3);
        let h = hyper(1);
        let post = GpPosterior::fit(&data, &h).unwrap();
        let pts = vec![vec![0.2], vec![0.25], vec![0.8]];
        let n = 10_000;
        let ys = draw_fantasies(&post, &pts, n, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let pred = post.predictive(&pts);
        for i in 0..3 {
            let var = pred.cov[(i, i)] + h.noise_var;
            let mean = ys.iter().map(|y| y[i]).sum::<f64>() / n as f64;
            assert!((mean - pred.mean[i]).abs() < 3.0 * (var / n as f64).sqrt());
            for j in 0..3 {
                let cov = pred.cov[(i, j)] + if i == j { h.noise_var } else { 0.0 };
                let mj = ys.iter().map(|y| y[j]).sum::<f64>() / n as f64;
                let emp = ys.iter().map(|y| (y[i] - mean) * (y[j] - mj)).sum::<f64>() / (n - 1) as f64;
                let vj = pred.cov[(j, j)] + h.noise_var;
                // standard error of a sample covariance under Gaussianity
                let se = ((var * vj + cov * cov) / n as f64).sqrt();
                assert!((emp - cov).abs() < 3.0 * se, "{i}{j}: {emp} vs {cov}");
            }
        }
    }

    #[test]
    fn ei_mcmc_batch_is_valid() {
        let data = toy_data(2, 6, 5);
        let hypers = HyperPosteriorSamples {
            samples: vec![hyper(2), GpHyper::isotropic(0.1, 0.8, 0.3, 2, 0.02).unwrap()],
            log_posterior: vec![0.0, 0.0],
        };
        let b = ei_mcmc_batch(&data, &hypers, 3, 20, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(b.len(), 3);
        for i in 0..3 {
            assert!(data.domain().contains(&b.points[i]));
            for j in 0..i {
                assert_ne!(b.points[i], b.points[j]);
            }
        }
    }

    #[test]
    fn fantasy_ei_gradient_matches_differences() {
        let data = toy_data(2, 6, 7);
        let post = GpPosterior::fit(&data, &hyper(2)).unwrap();
        let chosen = vec![vec![0.3, 0.6], vec![0.7, 0.2]];
        let term = FantasyTerm::new(post, &data, &chosen, 5, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let x = [0.45, 0.4];
        let (_, g) = term.value_grad(&x, true);
        for d in 0..2 {
            let h = 1e-6;
            let mut a = x;
            let mut b = x;
            a[d] += h;
            b[d] -= h;
            let fd = (term.value_grad(&a, false).0 - term.value_grad(&b, false).0) / (2.0 * h);
            assert!((g[d] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "{} {}", g[d], fd);
        }
    }

    #[test]
    fn medoids_degenerate_and_full() {
        let domain = Domain::unit(2);
        let same = vec![vec![0.3, 0.3]; 10];
        let b = batch_from_medoids(&same, 3, &domain);
        assert_eq!(b.points[0], vec![0.3, 0.3]);
        let pool: Vec<Point> = (0..4).map(|i| vec![0.1 * i as f64, 0.5]).collect();
        let mut idx = greedy_k_medoids(&pool, 4);
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn medoids_beat_random_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let pool: Vec<Point> = (0..30).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
            let chosen = greedy_k_medoids(&pool, 3);
            let random: Vec<usize> = rand::seq::index::sample(&mut rng, 30, 3).into_vec();
            assert!(medoid_cost(&pool, &chosen) <= medoid_cost(&pool, &random) + 1e-12);
        }
    }

    #[test]
    fn sm_ucb_full_pool_returns_the_population() {
        let data = toy_data(2, 6, 16);
        let h = hyper(2);
        let s = UcbSchedule::Standard;
        let mut population = simulate_ucb_pool(&data, &h, 4, 4, s, 2, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let mut batch = sm_ucb_batch(&data, &h, 4, 4, s, 2, &mut ChaCha8Rng::seed_from_u64(17)).unwrap().points;
        population.sort_by(|a, b| a.partial_cmp(b).unwrap());
        batch.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(batch, population);
        assert!(batch.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn ucb_family_agrees_for_single_point() {
        let data = toy_data(2, 7, 11);
        let h = hyper(2);
        let s = UcbSchedule::Standard;
        let post = GpPosterior::fit(&data, &h).unwrap();
        let x = ucb_argmax(&post, s.alpha(3, 2), data.domain());
        let a = gp_bucb_batch(&data, &h, 1, s, 3).unwrap();
        let b = gp_ucb_pe_batch(&data, &h, 1, s, 3).unwrap();
        let c = sm_ucb_batch(&data, &h, 1, 5, s, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for p in [&a.points[0], &b.points[0], &c.points[0]] {
            assert!(p.iter().zip(&x).all(|(u, v)| (u - v).abs() < 1e-4), "{p:?} {x:?}");
        }
    }

    #[test]
    fn bucb_shrinks_variance_and_keeps_mean() {
        let data = toy_data(1, 5, 12);
        let h = hyper(1);
        let post = GpPosterior::fit(&data, &h).unwrap();
        let b = gp_bucb_batch(&data, &h, 3, UcbSchedule::Standard, 2).unwrap();
        let upd = hallucinate(&data, &h, &post, &b.points).unwrap();
        for p in &b.points {
            assert!(upd.mean_var(p).1 < post.mean_var(p).1);
        }
        for i in 0..=200 {
            let x = [i as f64 / 200.0];
            assert!((upd.mean(&x) - post.mean(&x)).abs() < 1e-10);
        }
    }

    #[test]
    fn ucb_pe_region_and_variance_picks() {
        let data = toy_data(1, 5, 13);
        let h = hyper(1);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cands: Vec<Point> = (0..500).map(|_| vec![rng.random::<f64>()]).collect();
        let (b, region) = gp_ucb_pe_batch_on(&data, &h, 4, UcbSchedule::Standard, 2, &cands).unwrap();
        let post = GpPosterior::fit(&data, &h).unwrap();
        for k in 1..4 {
            assert!(region.iter().any(|&i| cands[i] == b.points[k]));
            let upd = hallucinate(&data, &h, &post, &b.points[..k]).unwrap();
            let chosen_var = upd.mean_var(&b.points[k]).1;
            for &i in &region {
                assert!(upd.mean_var(&cands[i]).1 <= chosen_var + 1e-15);
            }
        }
    }

    #[test]
    fn policies_return_q_points_deterministically() {
        let data = toy_data(2, 6, 15);
        let hypers = HyperPosteriorSamples::from_single(hyper(2));
        for name in POLICY_NAMES {
            let mut cfg = PolicyConfig::from_name(name).unwrap();
            if let PolicyConfig::Ppes { optimize, .. } = &mut cfg {
                optimize.random_batches = 20;
                optimize.ascent_steps = 5;
            }
            if let PolicyConfig::EiMcmc { n_fantasy } = &mut cfg {
                *n_fantasy = 5;
            }
            if let PolicyConfig::SmUcb { pool, .. } = &mut cfg {
                *pool = 6;
            }
            let policy = cfg.build();
            let state = PolicyState {
                data: &data,
                hypers: &hypers,
                q: 3,
                t: 1,
            };
            let a = policy.select_batch(&state, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
            let b = policy.select_batch(&state, &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
            assert_eq!(a, b, "{name}");
            assert_eq!(a.len(), 3);
            assert!(a.points.iter().all(|p| data.domain().contains(p)), "{name}");
        }
        assert!(PolicyConfig::from_name("thompson").is_err());
    }
}
