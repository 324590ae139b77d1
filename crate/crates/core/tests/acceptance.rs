//! End-to-end acceptance checks. Runs as a plain binary so that every check
//! prints one `PASS`/`FAIL` line; the process fails if any check fails.
//!
//! Pass check numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 3 4 8`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ppes::acquisition::{ppes_gradient, ppes_value, AcquisitionContext, BatchCandidate, ContextConfig};
use ppes::baselines::{
    ei_formula, ei_mcmc_batch, gp_bucb_batch, gp_ucb_pe_batch, incumbent, sm_ucb_batch, PolicyConfig, UcbSchedule,
};
use ppes::ep::ep_condition;
use ppes::gp::{kernel_eval, Dataset, Domain, GpHyper, GpPosterior, HyperPosteriorSamples, MvnPredictive};
use ppes::harness::{aggregate, run_repeats, wilcoxon_signed_rank, ExperimentConfig, RegretTrace};
use ppes::objectives::{rocket, rocket_flight_time};
use ppes::oracle::{ground_truth_ppes, ppes_surface, prior_draw_problem, spearman, validation_hyper, OracleConfig};
use ppes::xstar::{draw_feature_model, sample_maximizer_rf};
use ppes::xstar::{MaximizerSample, XStarSource};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// ---------------------------------------------------------------- 1

fn figure_one() -> Outcome {
    let hyper = validation_hyper();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = prior_draw_problem(&hyper, 5, &mut rng).unwrap();
    let m = 200;
    let hypers = HyperPosteriorSamples {
        samples: vec![hyper.clone(); m],
        log_posterior: vec![0.0; m],
    };
    let ctx = AcquisitionContext::build(&data, &hypers, 2, &ContextConfig::default(), &mut rng).unwrap();
    let ep = ppes_surface(&ctx, 50).unwrap();
    let truth = ground_truth_ppes(&data, &hyper, &OracleConfig::default(), &mut rng).unwrap();

    let (a, b) = ep.argmax();
    let (u, v) = truth.surface.argmax();
    // the surface is symmetric in (x, x'), so either orientation of the maximizer counts
    let tol = 0.02 + 1e-9;
    let near = |p: f64, q: f64, r: f64, s: f64| (p - r).abs() <= tol && (q - s).abs() <= tol;
    let argmax_ok = near(a, b, u, v) || near(a, b, v, u);
    let rho = spearman(ep.values.as_slice(), truth.surface.values.as_slice()).unwrap();
    Outcome::new(
        argmax_ok && rho >= 0.7,
        format!(
            "EP argmax ({a:.3}, {b:.3}), ground-truth argmax ({u:.3}, {v:.3}), Spearman {rho:.3}, {} maximizer cells excluded",
            truth.excluded
        ),
    )
}

// ---------------------------------------------------------------- 2

/// Moments of `N(m, K)` restricted to `f_i ≤ f*` for every batch index and
/// `f* ≥ y_max + ε`, `ε ~ N(0, noise)`, from `target` accepted draws.
struct RejectionMoments {
    mean: Vec<f64>,
    var: Vec<f64>,
    mean_se: Vec<f64>,
    var_se: Vec<f64>,
}

fn rejection_moments(m: &DVector<f64>, k: &DMatrix<f64>, y_max: f64, noise: f64, target: usize, rng: &mut ChaCha8Rng) -> RejectionMoments {
    let d = m.len();
    let q = d - 1;
    let l = k.clone().cholesky().expect("positive definite").l();
    let mut draws = Vec::with_capacity(target * d);
    let mut z = vec![0.0; d];
    let mut f = vec![0.0; d];
    let mut accepted = 0;
    while accepted < target {
        for zi in z.iter_mut() {
            *zi = normal(rng);
        }
        for i in 0..d {
            f[i] = m[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>();
        }
        let fs = f[q];
        if f[..q].iter().any(|&v| v > fs) {
            continue;
        }
        if y_max.is_finite() && fs < y_max + noise.sqrt() * normal(rng) {
            continue;
        }
        draws.extend_from_slice(&f);
        accepted += 1;
    }
    let n = target as f64;
    let mut out = RejectionMoments {
        mean: vec![0.0; d],
        var: vec![0.0; d],
        mean_se: vec![0.0; d],
        var_se: vec![0.0; d],
    };
    for i in 0..d {
        let col = || draws.iter().skip(i).step_by(d);
        let mean = col().sum::<f64>() / n;
        let (mut m2, mut m4) = (0.0, 0.0);
        for v in col() {
            let c = (v - mean) * (v - mean);
            m2 += c;
            m4 += c * c;
        }
        m2 /= n;
        m4 /= n;
        out.mean[i] = mean;
        out.var[i] = m2;
        out.mean_se[i] = (m2 / n).sqrt();
        out.var_se[i] = ((m4 - m2 * m2) / n).sqrt();
    }
    out
}

fn ep_against_rejection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = 0.01;
    let instances = 50;
    let mut clean = 0;
    let mut worst_z: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    for inst in 0..instances {
        let q = 1 + inst % 3;
        let d = q + 1;
        let m = DVector::from_fn(d, |_, _| 0.5 * normal(&mut rng));
        let a = DMatrix::from_fn(d, d, |_, _| normal(&mut rng));
        let k = &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1;
        let y_max = 0.5 * normal(&mut rng);
        let ep = ep_condition(&MvnPredictive { mean: m.clone(), cov: k.clone() }, y_max, noise).unwrap();
        let rs = rejection_moments(&m, &k, y_max, noise, 1_000_000, &mut rng);
        let mut ok = true;
        for i in 0..d {
            let zm = (ep.mu_plus[i] - rs.mean[i]).abs() / rs.mean_se[i];
            let zv = (ep.sigma_plus[(i, i)] - rs.var[i]).abs() / rs.var_se[i];
            ok &= zm <= 3.0 && zv <= 3.0;
            worst_z = worst_z.max(zm).max(zv);
            worst_abs = worst_abs
                .max((ep.mu_plus[i] - rs.mean[i]).abs())
                .max((ep.sigma_plus[(i, i)] - rs.var[i]).abs());
        }
        clean += ok as usize;
    }

    // Q = 1, m = 0, K = I, no y_max: d = f* - f1 ~ N(0, 2) truncated to d ≥ 0
    let e = 1.0 / std::f64::consts::PI.sqrt();
    let pair = MvnPredictive {
        mean: DVector::zeros(2),
        cov: DMatrix::identity(2, 2),
    };
    let r = ep_condition(&pair, f64::NEG_INFINITY, 0.0).unwrap();
    let pair_err = (r.mu_plus[0] + e).abs().max((r.mu_plus[1] - e).abs());
    Outcome::new(
        clean == instances && pair_err <= 0.02,
        format!(
            "{clean}/{instances} instances with every moment within 3 s.e. (worst {worst_z:.1} s.e., {worst_abs:.4} absolute); ordered pair mean error {pair_err:.2e}"
        ),
    )
}

// ---------------------------------------------------------------- 3, 4

/// A dataset from a smooth function and `m` hyperparameter samples with
/// random-feature maximizer draws.
fn random_context(rng: &mut ChaCha8Rng, dim: usize, n: usize, m: usize) -> AcquisitionContext {
    let domain = Domain::unit(dim);
    let mut data = Dataset::new(domain.clone());
    for _ in 0..n {
        let x = domain.sample_uniform(rng);
        let y = x.iter().enumerate().map(|(d, v)| ((4.0 + d as f64) * v).sin()).sum::<f64>() + 0.05 * normal(rng);
        data.push(x, y).unwrap();
    }
    let samples = (0..m)
        .map(|_| {
            let l: Vec<f64> = (0..dim).map(|_| 0.15 + 0.3 * rng.random::<f64>()).collect();
            let hyper = GpHyper::new(0.0, 0.5 + rng.random::<f64>(), l, 0.01 + 0.05 * rng.random::<f64>()).unwrap();
            let x_star = sample_maximizer_rf(&data, &hyper, &domain, 500, rng).unwrap();
            MaximizerSample {
                hyper,
                x_star,
                source: XStarSource::RandomFeature,
            }
        })
        .collect();
    AcquisitionContext::new(data, samples).unwrap()
}

fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inner = Domain::new(vec![0.05; 2], vec![0.95; 2]).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let ctx = random_context(&mut rng, 2, 6, 3);
        let batch = BatchCandidate::random(&inner, 2, &mut rng);
        let g = ppes_gradient(&batch, &ctx).unwrap();
        let fd = DMatrix::from_fn(2, 2, |i, d| {
            let mut up = batch.clone();
            let mut dn = batch.clone();
            up.points[i][d] += h;
            dn.points[i][d] -= h;
            (ppes_value(&up, &ctx).unwrap() - ppes_value(&dn, &ctx).unwrap()) / (2.0 * h)
        });
        worst = worst.max((&g - &fd).norm() / fd.norm());
    }
    Outcome::new(worst <= 1e-4, format!("worst relative error {worst:.2e} over 10 instances"))
}

fn nonnegative_and_symmetric() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let contexts: Vec<_> = (0..4).map(|i| random_context(&mut rng, 1 + i % 2, 7, 4)).collect();
    let mut min_value = f64::INFINITY;
    let mut worst_perm: f64 = 0.0;
    for b in 0..100 {
        let ctx = &contexts[b % contexts.len()];
        let q = 1 + b % 4;
        let batch = BatchCandidate::random(ctx.data().domain(), q, &mut rng);
        let v = ppes_value(&batch, ctx).unwrap();
        min_value = min_value.min(v);
        let mut shuffled = batch.clone();
        shuffled.points.shuffle(&mut rng);
        worst_perm = worst_perm.max((ppes_value(&shuffled, ctx).unwrap() - v).abs());
    }
    Outcome::new(
        min_value >= -1e-8 && worst_perm <= 1e-10,
        format!("smallest value {min_value:.3e}, largest permutation change {worst_perm:.1e} over 100 batches"),
    )
}

// ---------------------------------------------------------------- 5

fn random_feature_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = GpHyper::new(0.0, 1.0, vec![0.2, 0.4], 1e-3).unwrap();
    let domain = Domain::unit(2);
    let model = draw_feature_model(&Dataset::new(domain.clone()), &h, 2000, &mut rng).unwrap();
    let pairs = 200;
    let recon = (0..pairs)
        .map(|_| {
            let x = domain.sample_uniform(&mut rng);
            let y = domain.sample_uniform(&mut rng);
            (kernel_eval(&x, &y, &h).unwrap() - model.features(&x).dot(&model.features(&y))).abs()
        })
        .sum::<f64>()
        / pairs as f64;

    // exact posterior paths on a fine grid; the maximizer's bin is recorded
    let h1 = GpHyper::isotropic(0.0, 1.0, 0.1, 1, 0.01).unwrap();
    let xs = [0.1, 0.3, 0.45, 0.7, 0.9];
    let data = Dataset::from_pairs(
        Domain::unit(1),
        xs.iter().map(|&x| vec![x]).collect(),
        xs.iter().map(|&x| (7.0 * x).sin() + 0.5 * x).collect(),
    )
    .unwrap();
    let bins = 50;
    let fine = 400;
    let grid: Vec<Vec<f64>> = (0..fine).map(|i| vec![(i as f64 + 0.5) / fine as f64]).collect();
    let pred = GpPosterior::fit(&data, &h1).unwrap().predictive(&grid);
    let l = (pred.cov + DMatrix::identity(fine, fine) * 1e-9).cholesky().expect("posterior covariance").l();
    let paths = 20_000;
    let mut truth = vec![0.0; bins];
    for _ in 0..paths {
        let z = DVector::from_fn(fine, |_, _| normal(&mut rng));
        let f = &pred.mean + &l * z;
        truth[f.argmax().0 * bins / fine] += 1.0 / paths as f64;
    }
    let draws = 500;
    let mut approx = vec![0.0; bins];
    for _ in 0..draws {
        let x = sample_maximizer_rf(&data, &h1, &Domain::unit(1), 1000, &mut rng).unwrap()[0];
        approx[((x * bins as f64) as usize).min(bins - 1)] += 1.0 / draws as f64;
    }
    let tv = 0.5 * truth.iter().zip(&approx).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Outcome::new(
        recon < 0.05 && tv <= 0.2,
        format!("mean kernel error {recon:.4} at 2000 features, maximizer histogram TV {tv:.3}"),
    )
}

// ---------------------------------------------------------------- 6

fn branin_regret() -> Outcome {
    let base = ExperimentConfig {
        objective: "branin".into(),
        q: 3,
        iters: 15,
        repeats: 20,
        seed: 0,
        noise_sd: Some(0.1),
        ..Default::default()
    };
    let run = |policy: PolicyConfig| -> Vec<RegretTrace> {
        run_repeats(&ExperimentConfig {
            policy,
            ..base.clone()
        })
        .unwrap()
    };
    let ppes = run(PolicyConfig::from_name("ppes").unwrap());
    let random = run(PolicyConfig::Random);
    let final_regret = |t: &[RegretTrace]| -> Vec<f64> { t.iter().map(|r| r.records.last().map_or(f64::NAN, |x| x.regret)).collect() };
    let (rp, rr) = (aggregate(&ppes).unwrap(), aggregate(&random).unwrap());
    let (mp, mr) = (rp.median[14], rr.median[14]);
    let w = wilcoxon_signed_rank(&final_regret(&ppes), &final_regret(&random)).unwrap();
    Outcome::new(
        rp.aborted == 0 && mp <= 0.5 && mp <= mr && w.p_less < 0.05,
        format!(
            "median regret at T=15: PPES {mp:.4}, random {mr:.4}; Wilcoxon one-sided p = {:.2e} ({} aborted)",
            w.p_less, rp.aborted
        ),
    )
}

// ---------------------------------------------------------------- 7

fn toy_data(dim: usize, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domain = Domain::unit(dim);
    let mut data = Dataset::new(domain.clone());
    for _ in 0..n {
        let x = domain.sample_uniform(&mut rng);
        let y = x.iter().map(|v| (6.0 * v).cos()).sum::<f64>() + 0.1 * normal(&mut rng);
        data.push(x, y).unwrap();
    }
    data
}

/// EI argmax on [0, 1] by a dense grid and golden-section refinement of the best cell.
fn ei_argmax(data: &Dataset, h: &GpHyper) -> f64 {
    let post = GpPosterior::fit(data, h).unwrap();
    let inc = incumbent(&post, data).unwrap();
    let ei = |x: f64| {
        let (m, v) = post.mean_var(&[x]);
        ei_formula(m, v.sqrt(), inc)
    };
    let n = 20_000;
    let best = (0..=n)
        .map(|i| i as f64 / n as f64)
        .max_by(|a, b| ei(*a).total_cmp(&ei(*b)))
        .unwrap();
    let (mut a, mut b) = ((best - 1.0 / n as f64).max(0.0), (best + 1.0 / n as f64).min(1.0));
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

fn baseline_sanity() -> Outcome {
    let s = UcbSchedule::Standard;
    let mut ucb_gap: f64 = 0.0;
    for seed in 0..5 {
        let dim = 1 + seed as usize % 2;
        let data = toy_data(dim, 6, 70 + seed);
        let h = GpHyper::isotropic(0.0, 1.0, 0.2, dim, 0.01).unwrap();
        let t = 1 + seed as usize;
        let a = gp_bucb_batch(&data, &h, 1, s, t).unwrap();
        let b = gp_ucb_pe_batch(&data, &h, 1, s, t).unwrap();
        let c = sm_ucb_batch(&data, &h, 1, 5, s, t, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (p, r) in [(&a, &b), (&a, &c), (&b, &c)] {
            let gap = p.points[0].iter().zip(&r.points[0]).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            ucb_gap = ucb_gap.max(gap);
        }
    }
    let mut ei_gap: f64 = 0.0;
    for seed in 0..5 {
        let data = toy_data(1, 6, 80 + seed);
        let h = GpHyper::isotropic(0.0, 1.0, 0.15, 1, 0.01).unwrap();
        let hypers = HyperPosteriorSamples::from_single(h.clone());
        let b = ei_mcmc_batch(&data, &hypers, 1, 10, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        ei_gap = ei_gap.max((b.points[0][0] - ei_argmax(&data, &h)).abs());
    }
    Outcome::new(
        ucb_gap <= 1e-4 && ei_gap <= 1e-4,
        format!("largest UCB-family disagreement {ucb_gap:.1e}, EI-MCMC vs EI argmax {ei_gap:.1e}"),
    )
}

// ---------------------------------------------------------------- 8

fn rocket_examples() -> Outcome {
    let zero_fuel = [0.0, 0.3, 1.0].iter().all(|&a| rocket_flight_time(&[0.0, 0.0, a]) == 0.0);

    use rocket::*;
    let fuel = 0.05;
    let t = rocket_flight_time(&[0.0, fuel / MAX_FUEL, 1.0]);
    let burn = fuel / BURN_RATE;
    let v = EXHAUST_SPEED * ((DRY_MASS + fuel) / DRY_MASS).ln() - GRAVITY * burn;
    let ballistic = burn + 2.0 * v / GRAVITY;
    let ballistic_err = (t / ballistic - 1.0).abs();

    let escape = rocket_flight_time(&[0.0, 1.0, 1.0]);
    Outcome::new(
        zero_fuel && ballistic_err < 0.02 && escape == 0.0,
        format!(
            "zero fuel stays grounded: {zero_fuel}; vertical burn {t:.3} s vs ballistic {ballistic:.3} s; escape returns {escape}"
        ),
    )
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 8] = [
        ("figure-1 replication", figure_one),
        ("EP against rejection sampling", ep_against_rejection),
        ("gradient against finite differences", gradient_fidelity),
        ("nonnegativity and permutation invariance", nonnegative_and_symmetric),
        ("random-feature fidelity", random_feature_fidelity),
        ("Branin regret ordering", branin_regret),
        ("baseline sanity", baseline_sanity),
        ("rocket behaviour", rocket_examples),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let out = check();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        failed += !out.pass as usize;
        println!("check {id} {name}: {verdict} [{:.1} s] {}", start.elapsed().as_secs_f64(), out.detail);
    }
    if failed > 0 {
        println!("{failed} checks failed");
        std::process::exit(1);
    }
}
