//! Expectation propagation for a Gaussian over `f₊ = [f_1..f_Q, f*]` conditioned on
//! `f* ≥ f_q` for every batch point and on `f*` exceeding the best noisy observation.
//!
//! Each constraint acts on one linear projection `c_qᵀ f₊` and is replaced by an
//! unnormalized Gaussian site `Z̃_q N(c_qᵀ f₊; μ̃_q, τ̃_q)`. Internally the sites are kept
//! in natural form (`1/τ̃_q`, `μ̃_q/τ̃_q`) and the approximation is assembled as a
//! Gaussian conditioned on pseudo-observations, which never inverts `K₊`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::MvnPredictive;
use crate::linalg::{leading_block, symmetrize, JitteredCholesky};
use crate::special::{log_norm_cdf, mills_ratio, LN_2PI};

/// Site variance used before the first update; practically uninformative.
const INITIAL_SITE_VARIANCE: f64 = 1e6;
/// Floor on a site's precision relative to its cavity precision.
const MIN_SITE_PRECISION: f64 = 1e-12;

/// The `Q + 1` constraint directions over `f₊` (dimension `Q + 1`).
///
/// For `q < Q`, `c_q` has `-1` at `q` and `+1` at the last position;
/// `c_Q` picks out `f*` alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConstraintVectors {
    batch: usize,
}

impl ConstraintVectors {
    pub fn new(batch: usize) -> Self {
        Self { batch }
    }

    pub fn len(&self) -> usize {
        self.batch + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn vector(&self, q: usize) -> DVector<f64> {
        let mut c = DVector::zeros(self.batch + 1);
        c[self.batch] = 1.0;
        if q < self.batch {
            c[q] = -1.0;
        }
        c
    }

    /// All constraint vectors as the columns of a `(Q+1) × (Q+1)` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.batch + 1;
        DMatrix::from_fn(n, n, |i, q| {
            if i == self.batch {
                1.0
            } else if i == q {
                -1.0
            } else {
                0.0
            }
        })
    }

    #[inline]
    fn dot(&self, q: usize, v: &DVector<f64>) -> f64 {
        if q < self.batch {
            v[self.batch] - v[q]
        } else {
            v[self.batch]
        }
    }

    /// `M c_q` for a square matrix `M`.
    #[inline]
    pub(crate) fn mat_col(&self, q: usize, m: &DMatrix<f64>) -> DVector<f64> {
        let mut out = m.column(self.batch).into_owned();
        if q < self.batch {
            out -= m.column(q);
        }
        out
    }
}

/// Scaled-Gaussian site parameters `Z̃_q`, `μ̃_q`, `τ̃_q` (site variance).
///
/// A site with `τ̃_q = ∞` carries no information; this is how the soft factor is
/// switched off when there are no observations (`y_max = -∞`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    pub z_tilde: Vec<f64>,
    pub mu_tilde: Vec<f64>,
    pub tau_tilde: Vec<f64>,
}

impl SiteParams {
    pub fn len(&self) -> usize {
        self.tau_tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau_tilde.is_empty()
    }

    /// Site precisions `1/τ̃_q` (zero for inactive sites).
    pub fn precisions(&self) -> Vec<f64> {
        self.tau_tilde.iter().map(|t| 1.0 / t).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpConfig {
    /// Weight of the new site in the natural-parameter update.
    pub damping: f64,
    /// Convergence threshold on the largest change of a site's natural parameters.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tolerance: 1e-6,
            max_sweeps: 60,
        }
    }
}

/// Gaussian approximation `N(μ₊, Σ₊)` of the constrained predictive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpResult {
    pub mu_plus: DVector<f64>,
    pub sigma_plus: DMatrix<f64>,
    /// Log normalizer of the site-augmented Gaussian.
    pub log_z: f64,
    pub sites: SiteParams,
    pub converged: bool,
    pub iterations: usize,
}

impl EpResult {
    pub fn batch_size(&self) -> usize {
        self.mu_plus.len() - 1
    }

    /// Covariance of the batch values `f_1..f_Q` (leading block of `Σ₊`).
    pub fn batch_cov(&self) -> DMatrix<f64> {
        leading_block(&self.sigma_plus, self.batch_size())
    }

    pub fn batch_mean(&self) -> DVector<f64> {
        self.mu_plus.rows(0, self.batch_size()).into_owned()
    }
}

/// The moments of `N(m, K)` after absorbing Gaussian sites with precisions `nu` and
/// shifts `eta` along the constraint directions, plus the operator
/// `P = Σ₊ K⁻¹ = I − K C S½ B⁻¹ S½ Cᵀ` used for sensitivities.
pub(crate) struct SiteAbsorbed {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// `G = C S½ B⁻¹ S½ Cᵀ`, so that `Σ₊ = K − K G K`.
    pub g: DMatrix<f64>,
}

pub(crate) fn absorb_sites(
    m: &DVector<f64>,
    k: &DMatrix<f64>,
    cons: ConstraintVectors,
    nu: &[f64],
    eta: &[f64],
) -> Result<SiteAbsorbed> {
    let n = cons.len();
    let c = cons.matrix();
    let mut cs = c.clone();
    for j in 0..n {
        cs.column_mut(j).scale_mut(nu[j].max(0.0).sqrt());
    }
    // B = I + S½ Cᵀ K C S½
    let b = DMatrix::identity(n, n) + cs.transpose() * k * &cs;
    let chol = JitteredCholesky::new(&b)?;
    let g = &cs * chol.solve(&cs.transpose());
    let p = DMatrix::identity(n, n) - k * &g;
    let mut cov = &p * k;
    symmetrize(&mut cov);
    let h = &c * DVector::from_column_slice(eta);
    // μ₊ = P (m + K C η)
    let mean = &p * (m + k * h);
    Ok(SiteAbsorbed { mean, cov, p, g })
}

/// Cavity parameters and matched moments of one site.
struct Projection {
    cavity_mean: f64,
    cavity_var: f64,
    log_zhat: f64,
    new_nu: f64,
    new_eta: f64,
}

fn project(
    q: usize,
    cons: ConstraintVectors,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    nu: f64,
    eta: f64,
    y_max: f64,
    noise_var: f64,
) -> Option<Projection> {
    let u = cons.mat_col(q, cov);
    let s = cons.dot(q, &u);
    let mq = cons.dot(q, mean);
    let cav_prec = 1.0 / s - nu;
    if !(cav_prec > 0.0) || !s.is_finite() || s <= 0.0 {
        return None;
    }
    let tau = 1.0 / cav_prec;
    let mu = tau * (mq / s - eta);
    let (log_zhat, mu_hat, tau_hat) = if q < cons.batch {
        // 𝕀(c_qᵀ f₊ ≥ 0)
        let sd = tau.sqrt();
        let beta = mu / sd;
        let r = mills_ratio(beta);
        (log_norm_cdf(beta), mu + sd * r, tau * (1.0 - r * (r + beta)))
    } else {
        // Φ((f* − y_max)/σ)
        let den2 = noise_var + tau;
        let den = den2.sqrt();
        let beta = (mu - y_max) / den;
        let r = mills_ratio(beta);
        (
            log_norm_cdf(beta),
            mu + tau * r / den,
            tau - tau * tau * r * (r + beta) / den2,
        )
    };
    if !(tau_hat > 0.0) || !mu_hat.is_finite() {
        return None;
    }
    // The factors are log-concave, so the exact site precision is nonnegative; an
    // inactive constraint gives zero up to round-off.
    let new_nu = (1.0 / tau_hat - 1.0 / tau).max(MIN_SITE_PRECISION / tau);
    let new_eta = mu_hat / tau_hat - mu / tau;
    if !new_nu.is_finite() || !new_eta.is_finite() {
        return None;
    }
    Some(Projection {
        cavity_mean: mu,
        cavity_var: tau,
        log_zhat,
        new_nu,
        new_eta,
    })
}

/// Approximates `N(f₊; m₊, K₊) Φ((f* − y_max)/σ) Π_q 𝕀(f* ≥ f_q)` by a Gaussian.
///
/// `pred` is the joint predictive over the batch followed by `f* = f(x*)` in the last
/// coordinate. With `y_max = -∞` the soft factor is dropped.
pub fn ep_condition(pred: &MvnPredictive, y_max: f64, noise_var: f64) -> Result<EpResult> {
    ep_condition_with(pred, y_max, noise_var, &EpConfig::default())
}

pub fn ep_condition_with(pred: &MvnPredictive, y_max: f64, noise_var: f64, config: &EpConfig) -> Result<EpResult> {
    let n = pred.dim();
    if n < 2 || pred.cov.nrows() != n || pred.cov.ncols() != n {
        return Err(Error::InvalidArgument("EP needs a joint predictive of dimension Q+1 ≥ 2".into()));
    }
    if y_max.is_nan() || y_max == f64::INFINITY {
        return Err(Error::InvalidArgument("y_max must be finite or -inf".into()));
    }
    if !(noise_var >= 0.0) {
        return Err(Error::InvalidArgument("noise variance must be nonnegative".into()));
    }
    let cons = ConstraintVectors::new(n - 1);
    let soft_active = y_max.is_finite();
    let active = |q: usize| q < n - 1 || soft_active;

    let mut nu: Vec<f64> = (0..n)
        .map(|q| if active(q) { 1.0 / INITIAL_SITE_VARIANCE } else { 0.0 })
        .collect();
    let mut eta = vec![0.0; n];
    let mut state = absorb_sites(&pred.mean, &pred.cov, cons, &nu, &eta)?;

    let mut converged = false;
    let mut sweeps = 0;
    let mut last_sweep_skipped = false;
    while sweeps < config.max_sweeps {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        let mut skipped = false;
        for q in (0..n).filter(|&q| active(q)) {
            let Some(proj) = project(q, cons, &state.mean, &state.cov, nu[q], eta[q], y_max, noise_var) else {
                skipped = true;
                continue;
            };
            let nu_next = (1.0 - config.damping) * nu[q] + config.damping * proj.new_nu;
            let eta_next = (1.0 - config.damping) * eta[q] + config.damping * proj.new_eta;
            let d_nu = nu_next - nu[q];
            let d_eta = eta_next - eta[q];
            max_change = max_change.max(d_nu.abs()).max(d_eta.abs());
            // rank-one refresh of the moments
            let u = cons.mat_col(q, &state.cov);
            let s = cons.dot(q, &u);
            let mq = cons.dot(q, &state.mean);
            let denom = 1.0 + d_nu * s;
            state.cov -= (&u * u.transpose()) * (d_nu / denom);
            state.mean += &u * ((d_eta - d_nu * mq) / denom);
            nu[q] = nu_next;
            eta[q] = eta_next;
        }
        // refactor from scratch to keep round-off from accumulating
        state = absorb_sites(&pred.mean, &pred.cov, cons, &nu, &eta)?;
        if !state.mean.iter().all(|v| v.is_finite()) || !state.cov.iter().all(|v| v.is_finite()) {
            return Err(Error::EpFailure("non-finite moments".into()));
        }
        last_sweep_skipped = skipped;
        if !skipped && max_change < config.tolerance {
            converged = true;
            break;
        }
    }
    if last_sweep_skipped {
        return Err(Error::EpFailure("negative cavity variance persisted".into()));
    }

    // final site normalizers from the converged cavities
    let mut z_tilde = vec![1.0; n];
    let mut log_z_sites = 0.0;
    for q in (0..n).filter(|&q| active(q)) {
        let u = cons.mat_col(q, &state.cov);
        let s = cons.dot(q, &u);
        let mq = cons.dot(q, &state.mean);
        let cav_prec = 1.0 / s - nu[q];
        if !(cav_prec > 0.0) {
            return Err(Error::EpFailure("negative cavity variance at convergence".into()));
        }
        let tau = 1.0 / cav_prec;
        let mu = tau * (mq / s - eta[q]);
        let log_zhat = match project(q, cons, &state.mean, &state.cov, nu[q], eta[q], y_max, noise_var) {
            Some(p) => {
                debug_assert!((p.cavity_mean - mu).abs() <= 1e-9 * (1.0 + mu.abs()));
                debug_assert!((p.cavity_var - tau).abs() <= 1e-9 * (1.0 + tau));
                p.log_zhat
            }
            None => return Err(Error::EpFailure("site projection failed at convergence".into())),
        };
        let tau_site = 1.0 / nu[q];
        let mu_site = eta[q] / nu[q];
        let log_zt = log_zhat
            + 0.5 * LN_2PI
            + 0.5 * (tau + tau_site).ln()
            + 0.5 * (mu - mu_site).powi(2) / (tau + tau_site);
        z_tilde[q] = log_zt.exp();
        log_z_sites += log_zt;
    }

    let sites = SiteParams {
        z_tilde,
        mu_tilde: (0..n).map(|q| if nu[q] > 0.0 { eta[q] / nu[q] } else { 0.0 }).collect(),
        tau_tilde: nu.iter().map(|v| 1.0 / v).collect(),
    };
    let log_z = log_z_sites + log_site_evidence(&pred.mean, &pred.cov, cons, &sites)?;

    if JitteredCholesky::new(&state.cov).is_err() {
        return Err(Error::EpFailure("approximate covariance not positive definite".into()));
    }
    Ok(EpResult {
        mu_plus: state.mean,
        sigma_plus: state.cov,
        log_z,
        sites,
        converged,
        iterations: sweeps,
    })
}

/// `log N(μ̃; Cᵀ m, Cᵀ K C + diag(τ̃))` over the active sites.
fn log_site_evidence(m: &DVector<f64>, k: &DMatrix<f64>, cons: ConstraintVectors, sites: &SiteParams) -> Result<f64> {
    let idx: Vec<usize> = (0..cons.len()).filter(|&q| sites.tau_tilde[q].is_finite()).collect();
    if idx.is_empty() {
        return Ok(0.0);
    }
    let r = idx.len();
    let cols: Vec<DVector<f64>> = idx.iter().map(|&q| cons.vector(q)).collect();
    let c = DMatrix::from_columns(&cols);
    let mut s = c.transpose() * k * &c;
    for (i, &q) in idx.iter().enumerate() {
        s[(i, i)] += sites.tau_tilde[q];
    }
    let resid = DVector::from_iterator(r, idx.iter().map(|&q| sites.mu_tilde[q])) - c.transpose() * m;
    let chol = JitteredCholesky::new(&s)?;
    let v = chol.solve_lower_vec(&resid);
    Ok(-0.5 * v.norm_squared() - 0.5 * chol.log_det() - 0.5 * r as f64 * LN_2PI)
}

/// First-order behaviour of the EP fixed point.
///
/// At convergence every active site satisfies `R_j = (m_j − μ̂_j, s_j − τ̂_j) = 0`,
/// where `m_j`, `s_j` are the mean and variance of `c_jᵀ f₊` under the approximation
/// and `μ̂_j`, `τ̂_j` the matched tilted moments. This holds the Jacobian of `R` with
/// respect to the active site parameters `(ν, η)` and, per site, the 2×2 map from
/// a change of `(m_j, s_j)` at fixed sites to the change of `R_j`.
pub(crate) struct EpLinearization {
    pub active: Vec<usize>,
    /// Rows and columns ordered `[ν_a…, η_a…]` over `active`; rows `[R1_a…, R2_a…]`.
    pub site_jacobian: DMatrix<f64>,
    pub moment_map: Vec<[[f64; 2]; 2]>,
    pub cov: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// `K₊⁻¹ (μ₊ − m₊)`, computed without inverting `K₊`.
    pub r: DVector<f64>,
}

/// Partial derivatives of the matched moments with respect to the cavity mean and
/// variance: `[[∂μ̂/∂μ, ∂μ̂/∂τ], [∂τ̂/∂μ, ∂τ̂/∂τ]]`.
fn projection_partials(mu: f64, tau: f64, offset: f64, extra_var: f64) -> [[f64; 2]; 2] {
    let d2 = extra_var + tau;
    let den = d2.sqrt();
    let beta = (mu - offset) / den;
    let r = mills_ratio(beta);
    let dr = -r * (r + beta);
    let u = r * (r + beta);
    let du = dr * (2.0 * r + beta) + r;
    let dbeta_dtau = -beta / (2.0 * d2);
    let dmu_dmu = 1.0 + tau * dr / d2;
    let dmu_dtau = r / den + tau * dr * dbeta_dtau / den - tau * r / (2.0 * d2 * den);
    let dtau_dmu = -tau * tau * du / (d2 * den);
    let dtau_dtau = 1.0 - 2.0 * tau * u / d2 - tau * tau * du * dbeta_dtau / d2 + tau * tau * u / (d2 * d2);
    [[dmu_dmu, dmu_dtau], [dtau_dmu, dtau_dtau]]
}

pub(crate) fn linearize(pred: &MvnPredictive, y_max: f64, noise_var: f64, sites: &SiteParams) -> Result<EpLinearization> {
    let n = pred.dim();
    let cons = ConstraintVectors::new(n - 1);
    let nu = sites.precisions();
    let eta: Vec<f64> = (0..n).map(|q| sites.mu_tilde[q] * nu[q]).collect();
    let st = absorb_sites(&pred.mean, &pred.cov, cons, &nu, &eta)?;
    let active: Vec<usize> = (0..n).filter(|&q| nu[q] > 0.0).collect();
    let a = active.len();

    // μ₊ − m₊ = K (h − G (m₊ + K h)) with h = C η
    let c = cons.matrix();
    let h = &c * DVector::from_column_slice(&eta);
    let r = &h - &st.g * (&pred.mean + &pred.cov * &h);

    let sc = c.transpose() * &st.cov * &c;
    let cm = c.transpose() * &st.mean;
    let mut jac = DMatrix::zeros(2 * a, 2 * a);
    let mut moment_map = Vec::with_capacity(a);
    let mut direct = Vec::with_capacity(a);
    for &j in &active {
        let s = sc[(j, j)];
        let m = cm[j];
        let prec = 1.0 / s - nu[j];
        if !(prec > 0.0) {
            return Err(Error::EpFailure("negative cavity variance at fixed point".into()));
        }
        let tau = 1.0 / prec;
        let kappa = m / s - eta[j];
        let mu = tau * kappa;
        let (offset, extra) = if j < n - 1 { (0.0, 0.0) } else { (y_max, noise_var) };
        let pp = projection_partials(mu, tau, offset, extra);
        let tau_s = tau * tau / (s * s);
        let tau_nu = tau * tau;
        let mu_m = tau / s;
        let mu_s = tau_s * kappa - tau * m / (s * s);
        let mu_nu = tau * tau * kappa;
        let mu_eta = -tau;
        let map = [
            [1.0 - pp[0][0] * mu_m, -(pp[0][0] * mu_s + pp[0][1] * tau_s)],
            [-pp[1][0] * mu_m, 1.0 - (pp[1][0] * mu_s + pp[1][1] * tau_s)],
        ];
        let dir = [
            [-(pp[0][0] * mu_nu + pp[0][1] * tau_nu), -pp[0][0] * mu_eta],
            [-(pp[1][0] * mu_nu + pp[1][1] * tau_nu), -pp[1][0] * mu_eta],
        ];
        moment_map.push(map);
        direct.push(dir);
    }
    for (ji, &j) in active.iter().enumerate() {
        let map = moment_map[ji];
        for (ki, &k) in active.iter().enumerate() {
            // ν_k: dΣ = −Σ c_k c_kᵀ Σ, dμ = −Σ c_k (c_kᵀ μ)
            let ds_nu = -sc[(j, k)] * sc[(j, k)];
            let dm_nu = -sc[(j, k)] * cm[k];
            // η_k: dμ = Σ c_k
            let dm_eta = sc[(j, k)];
            for row in 0..2 {
                jac[(row * a + ji, ki)] = map[row][0] * dm_nu + map[row][1] * ds_nu;
                jac[(row * a + ji, a + ki)] = map[row][0] * dm_eta;
            }
        }
        for row in 0..2 {
            jac[(row * a + ji, ji)] += direct[ji][row][0];
            jac[(row * a + ji, a + ji)] += direct[ji][row][1];
        }
    }
    Ok(EpLinearization {
        active,
        site_jacobian: jac,
        moment_map,
        cov: st.cov,
        p: st.p,
        r,
    })
}

/// `½ log det(2πe (Σ + σ² I))`, the entropy of a Gaussian with covariance `Σ + σ²I`.
pub fn batch_entropy(sigma: &DMatrix<f64>, noise_var: f64) -> Result<f64> {
    let q = sigma.nrows();
    if q == 0 || sigma.ncols() != q {
        return Err(Error::InvalidArgument("batch covariance must be square and nonempty".into()));
    }
    let mut m = sigma.clone();
    for i in 0..q {
        m[(i, i)] += noise_var;
    }
    let ld = JitteredCholesky::new(&m)?.log_det();
    Ok(0.5 * (q as f64 * (1.0 + LN_2PI) + ld))
}
