//! Rejection-sampling ground truth for the two-point acquisition surface of a
//! one-dimensional problem.
//!
//! Joint posterior sample paths are drawn on a regular grid. The grid argmax of
//! each path is a draw of `x*`, and the paths sharing an argmax are draws from the
//! posterior conditioned on that maximizer. Entropies of the noisy pair
//! `(y(x), y(x'))` are estimated by kernel density estimation, once over all paths
//! and once per maximizer, and combined into
//! `H[y | D] - Σ p(x*) H[y | D, x*]`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{ppes_value, AcquisitionContext, BatchCandidate};
use crate::error::{Error, Result};
use crate::gp::{kernel_matrix, Dataset, Domain, GpHyper, GpPosterior};
use crate::linalg::JitteredCholesky;
use crate::special::LN_2PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub grid_n: usize,
    pub n_paths: usize,
    /// Maximizers with fewer accepted paths are left out of the expectation.
    pub min_accepted: usize,
    /// Upper bound on the samples used to fit, and separately to evaluate, each
    /// density estimate.
    pub kde_cap: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            grid_n: 50,
            n_paths: 200_000,
            min_accepted: 50,
            kde_cap: 1000,
        }
    }
}

/// Cell centres `(i + 0.5) / n` of a regular grid on `[0, 1]`.
pub fn grid_points(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

/// Acquisition values on the grid of ordered pairs `(grid[i], grid[j])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub grid: Vec<f64>,
    pub values: DMatrix<f64>,
}

impl Surface {
    pub fn argmax_index(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for j in 0..self.values.ncols() {
            for i in 0..self.values.nrows() {
                if self.values[(i, j)] > self.values[best] {
                    best = (i, j);
                }
            }
        }
        best
    }

    pub fn argmax(&self) -> (f64, f64) {
        let (i, j) = self.argmax_index();
        (self.grid[i], self.grid[j])
    }

    /// Writes `x,x_prime,value` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "x_prime", "value"])?;
        for i in 0..self.grid.len() {
            for j in 0..self.grid.len() {
                w.serialize((self.grid[i], self.grid[j], self.values[(i, j)]))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSurface {
    pub surface: Surface,
    /// Monte Carlo standard error of each surface value.
    pub std_err: DMatrix<f64>,
    /// Fraction of paths whose grid argmax is each grid point.
    pub maximizer_probs: Vec<f64>,
    /// Number of maximizers dropped for having too few accepted paths.
    pub excluded: usize,
}

/// Entropy estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropyEstimate {
    pub entropy: f64,
    pub std_err: f64,
}

/// Kernel density estimate of the differential entropy of 2-D samples.
///
/// The first half of the samples fits a Gaussian kernel density and the second
/// half is scored under it; the entropy is the mean of `-log f̂`. The kernel is a
/// product kernel with Silverman's bandwidth `n^(-1/6)` per axis in the sample's
/// whitened coordinates, so strongly correlated pairs are smoothed along their
/// principal axes rather than across them.
pub fn kde_entropy(samples: &[[f64; 2]]) -> Result<EntropyEstimate> {
    let half = samples.len() / 2;
    if half < 2 {
        return Err(Error::InvalidArgument("KDE entropy needs at least 4 samples".into()));
    }
    let (fit, eval) = samples.split_at(half);
    let n = fit.len() as f64;
    let mean = fit.iter().fold([0.0; 2], |m, s| [m[0] + s[0] / n, m[1] + s[1] / n]);
    let mut cov = [0.0; 3];
    for s in fit {
        let (a, b) = (s[0] - mean[0], s[1] - mean[1]);
        cov[0] += a * a / (n - 1.0);
        cov[1] += a * b / (n - 1.0);
        cov[2] += b * b / (n - 1.0);
    }
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::Numerical("degenerate sample covariance in KDE".into()));
    }
    let h2 = n.powf(-1.0 / 3.0);
    // precision of the kernel, (h² Σ)⁻¹
    let (p00, p01, p11) = (cov[2] / (det * h2), -cov[1] / (det * h2), cov[0] / (det * h2));
    let log_norm = -LN_2PI - 0.5 * (h2 * h2 * det).ln() - n.ln();
    let scores: Vec<f64> = eval
        .par_iter()
        .map(|e| {
            let mut s = 0.0;
            for f in fit {
                let (a, b) = (e[0] - f[0], e[1] - f[1]);
                s += (-0.5 * (p00 * a * a + 2.0 * p01 * a * b + p11 * b * b)).exp();
            }
            -(log_norm + s.max(f64::MIN_POSITIVE).ln())
        })
        .collect();
    let m = scores.len() as f64;
    let entropy = scores.iter().sum::<f64>() / m;
    let var = scores.iter().map(|s| (s - entropy).powi(2)).sum::<f64>() / (m - 1.0);
    Ok(EntropyEstimate {
        entropy,
        std_err: (var / m).sqrt(),
    })
}

/// Noisy observations of stored paths. `first` and `second` carry independent
/// noise so that a pair of identical inputs still sees two noise draws.
struct NoisyPaths {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl NoisyPaths {
    fn new() -> Self {
        Self {
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    fn push<R: Rng + ?Sized>(&mut self, path: &[f64], noise_sd: f64, rng: &mut R) {
        let noisy = |rng: &mut R| {
            path.iter()
                .map(|f| f + noise_sd * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<_>>()
        };
        self.first.push(noisy(rng));
        self.second.push(noisy(rng));
    }

    fn len(&self) -> usize {
        self.first.len()
    }

    fn pair(&self, i: usize, j: usize) -> Vec<[f64; 2]> {
        let other = if i == j { &self.second } else { &self.first };
        self.first.iter().zip(other).map(|(a, b)| [a[i], b[j]]).collect()
    }

    /// Entropy estimates for every unordered pair, as a symmetric matrix pair.
    fn entropies(&self, grid_n: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let pairs: Vec<(usize, usize)> = (0..grid_n).flat_map(|i| (i..grid_n).map(move |j| (i, j))).collect();
        let est = pairs
            .iter()
            .map(|&(i, j)| kde_entropy(&self.pair(i, j)))
            .collect::<Result<Vec<_>>>()?;
        let mut h = DMatrix::zeros(grid_n, grid_n);
        let mut se = DMatrix::zeros(grid_n, grid_n);
        for (&(i, j), e) in pairs.iter().zip(est) {
            h[(i, j)] = e.entropy;
            h[(j, i)] = e.entropy;
            se[(i, j)] = e.std_err;
            se[(j, i)] = e.std_err;
        }
        Ok((h, se))
    }
}

/// Ground-truth acquisition surface for a batch of two points in one dimension.
pub fn ground_truth_ppes<R: Rng + ?Sized>(
    data: &Dataset,
    hyper: &GpHyper,
    cfg: &OracleConfig,
    rng: &mut R,
) -> Result<GroundTruthSurface> {
    if data.dim() != 1 {
        return Err(Error::InvalidArgument("the oracle handles one-dimensional inputs only".into()));
    }
    if cfg.grid_n < 2 || cfg.n_paths < 4 || cfg.kde_cap < 2 {
        return Err(Error::InvalidArgument("oracle grid and path counts are too small".into()));
    }
    let n = cfg.grid_n;
    let unit = grid_points(n);
    let grid: Vec<Vec<f64>> = unit.iter().map(|u| data.domain().from_unit(&[*u])).collect();
    let post = GpPosterior::fit(data, hyper)?;
    let pred = post.predictive(&grid);
    let chol = JitteredCholesky::new(&pred.cov)?;
    let l = chol.l();
    let noise_sd = hyper.noise_var.sqrt();
    let keep = 2 * cfg.kde_cap;

    let mut counts = vec![0usize; n];
    let mut all = NoisyPaths::new();
    let mut by_max: Vec<NoisyPaths> = (0..n).map(|_| NoisyPaths::new()).collect();
    let mut path = vec![0.0; n];
    for _ in 0..cfg.n_paths {
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = &pred.mean + &l * z;
        path.copy_from_slice(f.as_slice());
        // lowest index wins ties
        let k = (0..n).fold(0, |b, i| if path[i] > path[b] { i } else { b });
        counts[k] += 1;
        if all.len() < keep {
            all.push(&path, noise_sd, rng);
        }
        if by_max[k].len() < keep {
            by_max[k].push(&path, noise_sd, rng);
        }
    }
    let probs: Vec<f64> = counts.iter().map(|c| *c as f64 / cfg.n_paths as f64).collect();

    let (h0, se0) = all.entropies(n)?;
    let included: Vec<usize> = (0..n).filter(|&k| counts[k] >= cfg.min_accepted).collect();
    let excluded = counts.iter().filter(|&&c| c > 0).count() - included.len();
    if excluded > 0 {
        log::warn!("{excluded} maximizer locations had fewer than {} accepted paths", cfg.min_accepted);
    }
    let mass: f64 = included.iter().map(|&k| probs[k]).sum();
    if included.is_empty() || mass <= 0.0 {
        return Err(Error::Numerical("no maximizer location has enough accepted paths".into()));
    }
    let mut values = h0;
    let mut var = se0.map(|s| s * s);
    for &k in &included {
        let w = probs[k] / mass;
        let (hk, sek) = by_max[k].entropies(n)?;
        values -= hk * w;
        var += sek.map(|s| w * w * s * s);
    }
    Ok(GroundTruthSurface {
        surface: Surface { grid: unit, values },
        std_err: var.map(f64::sqrt),
        maximizer_probs: probs,
        excluded,
    })
}

/// Hyperparameters of the one-dimensional validation problem: unit signal
/// variance, noise variance `1e-4` and squared lengthscale `0.025`.
pub fn validation_hyper() -> GpHyper {
    GpHyper::isotropic(0.0, 1.0, 0.025f64.sqrt(), 1, 1e-4).expect("valid constants")
}

/// Noisy observations at `n_obs` uniform inputs of a function drawn from the
/// GP prior with `hyper`, on `[0, 1]`.
pub fn prior_draw_problem<R: Rng + ?Sized>(hyper: &GpHyper, n_obs: usize, rng: &mut R) -> Result<Dataset> {
    if hyper.dim() != 1 || n_obs == 0 {
        return Err(Error::InvalidArgument("need a one-dimensional hyper and at least one observation".into()));
    }
    let xs: Vec<Vec<f64>> = (0..n_obs).map(|_| vec![rng.random::<f64>()]).collect();
    let l = JitteredCholesky::new(&kernel_matrix(&xs, hyper))?.l();
    let z = DVector::from_fn(n_obs, |_, _| rng.sample::<f64, _>(StandardNormal));
    let f = l * z;
    let sd = hyper.noise_var.sqrt();
    let ys = f
        .iter()
        .map(|v| hyper.mean + v + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Dataset::from_pairs(Domain::unit(1), xs, ys)
}

/// The EP acquisition evaluated at every ordered pair of grid cell centres.
pub fn ppes_surface(ctx: &AcquisitionContext, grid_n: usize) -> Result<Surface> {
    if ctx.data().dim() != 1 {
        return Err(Error::InvalidArgument("surfaces are only defined for one-dimensional inputs".into()));
    }
    let unit = grid_points(grid_n);
    let domain = ctx.data().domain();
    let rows = (0..grid_n)
        .into_par_iter()
        .map(|i| {
            (0..grid_n)
                .map(|j| {
                    let batch = BatchCandidate {
                        points: vec![domain.from_unit(&[unit[i]]), domain.from_unit(&[unit[j]])],
                    };
                    ppes_value(&batch, ctx)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let values = DMatrix::from_fn(grid_n, grid_n, |i, j| rows[i][j]);
    Ok(Surface { grid: unit, values })
}

/// The EP acquisition of single points on the grid, as `(x, value)` pairs.
pub fn ppes_curve(ctx: &AcquisitionContext, grid_n: usize) -> Result<Vec<(f64, f64)>> {
    let domain = ctx.data().domain();
    grid_points(grid_n)
        .into_iter()
        .map(|u| {
            let x = domain.from_unit(&[u]);
            let v = ppes_value(&BatchCandidate { points: vec![x.clone()] }, ctx)?;
            Ok((x[0], v))
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = 0.5 * (i + j) as f64 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation, with tied values given their average rank.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equally long samples".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let m = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - m) * (y - m);
        saa += (x - m) * (x - m);
        sbb += (y - m) * (y - m);
    }
    Ok(sab / (saa * sbb).sqrt())
}
