//! Experiment runner: initial design, the batch decision loop, recommendations,
//! immediate regret, and the aggregate report.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{BatchPolicy, PolicyConfig, PolicyState};
use crate::error::{Error, Result};
use crate::gp::{Dataset, GpPosterior, HyperChain, HyperPosteriorSamples, Point, SliceConfig};
use crate::objectives::{make_objective, Objective};
use crate::optimize::{halton, multistart_ascent, AscentConfig};

/// Share of aborted repeats above which a run counts as failed.
pub const MAX_ABORT_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub objective: String,
    pub policy: PolicyConfig,
    pub q: usize,
    /// Number of batches queried after the initial design.
    pub iters: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Hyperparameter samples drawn at every iteration.
    pub m_samples: usize,
    pub init_count: usize,
    /// Overrides the objective's observation noise.
    pub noise_sd: Option<f64>,
    /// Slice-sampling sweeps before the first draw of a repeat.
    pub initial_burn_in: usize,
    /// Sweeps discarded at later iterations, where the chain is warm.
    pub warm_burn_in: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            objective: "branin".into(),
            policy: PolicyConfig::Random,
            q: 3,
            iters: 15,
            repeats: 20,
            seed: 0,
            m_samples: 10,
            init_count: 5,
            noise_sd: None,
            initial_burn_in: 300,
            warm_burn_in: 30,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("q", self.q),
            ("iters", self.iters),
            ("repeats", self.repeats),
            ("m_samples", self.m_samples),
            ("init_count", self.init_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if let Some(sd) = self.noise_sd {
            if !(sd >= 0.0) || !sd.is_finite() {
                return Err(Error::InvalidArgument("noise_sd must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> Result<Objective> {
        let obj = make_objective(&self.objective)?;
        Ok(match self.noise_sd {
            Some(sd) => obj.with_noise(sd),
            None => obj,
        })
    }
}

/// What happened at one iteration of a repeat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub recommendation: Point,
    /// Noiseless objective value at the recommendation.
    pub value: f64,
    pub regret: f64,
    /// Largest noisy observation so far.
    pub best_observed: f64,
    pub batch: Vec<Point>,
    /// Time spent selecting the batch.
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub run_id: usize,
    pub records: Vec<IterationRecord>,
    /// Set when the repeat stopped early because the policy failed.
    pub aborted: Option<String>,
}

impl RegretTrace {
    pub fn regrets(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.regret).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.aborted.is_none()
    }
}

fn run_rngs(seed: u64, run_id: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    // Separate streams keep the initial design identical across policies that
    // share a seed, which makes per-repeat comparisons paired.
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(2 * run_id as u64);
    let mut rest = ChaCha8Rng::seed_from_u64(seed);
    rest.set_stream(2 * run_id as u64 + 1);
    (init, rest)
}

/// Argmax of the posterior mean averaged over the hyperparameter samples.
pub fn recommend(data: &Dataset, hypers: &HyperPosteriorSamples) -> Result<Point> {
    let posts = hypers
        .samples
        .iter()
        .map(|h| GpPosterior::fit(data, h))
        .collect::<Result<Vec<_>>>()?;
    let m = posts.len() as f64;
    let value = |x: &[f64]| posts.iter().map(|p| p.mean(x)).sum::<f64>() / m;
    let value_grad = |x: &[f64]| {
        let mut g = vec![0.0; x.len()];
        let mut v = 0.0;
        for p in &posts {
            let (pv, pg) = p.mean_grad(x);
            v += pv / m;
            for (gi, pgi) in g.iter_mut().zip(pg) {
                *gi += pgi / m;
            }
        }
        (v, g)
    };
    let domain = data.domain();
    let mut starts: Vec<Point> = data.inputs().to_vec();
    starts.extend(halton(20, domain.dim()).iter().map(|u| domain.from_unit(u)));
    let (x, _) = multistart_ascent(value, value_grad, &starts, domain.lower(), domain.upper(), &AscentConfig::default());
    Ok(x)
}

/// Hyperparameter draws on standardized data, advancing the warm chain.
fn draw_hypers<R: Rng + ?Sized>(
    chain: &mut Option<HyperChain>,
    data: &Dataset,
    cfg: &ExperimentConfig,
    rng: &mut R,
) -> Result<HyperPosteriorSamples> {
    if data.len() < 2 {
        return Ok(HyperPosteriorSamples::from_single(HyperChain::new(data, SliceConfig::default()).current()));
    }
    let burn_in = if chain.is_some() { cfg.warm_burn_in } else { cfg.initial_burn_in };
    let c = chain.get_or_insert_with(|| HyperChain::new(data, SliceConfig::default()));
    c.run(data, burn_in, cfg.m_samples, rng)
}

/// Uniform initial inputs with noisy observations. Depends only on the seed,
/// the repeat index and the objective, never on the policy.
pub fn initial_design(objective: &Objective, cfg: &ExperimentConfig, run_id: usize) -> Result<Dataset> {
    let domain = objective.domain();
    let (mut rng, _) = run_rngs(cfg.seed, run_id);
    let mut data = Dataset::new(domain.clone());
    for _ in 0..cfg.init_count {
        let x = domain.sample_uniform(&mut rng);
        let y = objective.observe(&x, &mut rng);
        data.push(x, y)?;
    }
    Ok(data)
}

/// One repeat of `policy` on `objective`.
///
/// Policies and the recommender see outputs standardized to zero mean and unit
/// variance; regrets are measured on the raw objective. A policy error ends the
/// repeat and is recorded in the trace.
pub fn run_with_policy(
    objective: &Objective,
    policy: &dyn BatchPolicy,
    cfg: &ExperimentConfig,
    run_id: usize,
) -> Result<RegretTrace> {
    cfg.validate()?;
    let f_star = objective
        .known_max
        .ok_or_else(|| Error::InvalidArgument(format!("objective '{}' has no known maximum", objective.name())))?;
    let domain = objective.domain();
    let mut data = initial_design(objective, cfg, run_id)?;
    let (_, mut rng) = run_rngs(cfg.seed, run_id);
    let mut chain = None;
    let mut records = Vec::with_capacity(cfg.iters);
    for t in 1..=cfg.iters {
        let step = (|| -> Result<(Vec<Point>, f64)> {
            let (std_data, _) = data.standardized();
            let hypers = draw_hypers(&mut chain, &std_data, cfg, &mut rng)?;
            let state = PolicyState {
                data: &std_data,
                hypers: &hypers,
                q: cfg.q,
                t,
            };
            let start = Instant::now();
            let batch = policy.select_batch(&state, &mut rng as &mut dyn RngCore)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            if batch.len() != cfg.q || !batch.points.iter().all(|p| domain.contains(p)) {
                return Err(Error::Policy(format!("{} returned an invalid batch", policy.name())));
            }
            Ok((batch.points, wall_ms))
        })();
        let (batch, wall_ms) = match step {
            Ok(v) => v,
            Err(e) => {
                log::warn!("repeat {run_id} aborted at iteration {t}: {e}");
                return Ok(RegretTrace {
                    run_id,
                    records,
                    aborted: Some(e.to_string()),
                });
            }
        };
        for x in &batch {
            let y = objective.observe(x, &mut rng);
            data.push(x.clone(), y)?;
        }
        let (std_data, _) = data.standardized();
        let hypers = draw_hypers(&mut chain, &std_data, cfg, &mut rng)?;
        let rec = recommend(&std_data, &hypers)?;
        let value = objective.evaluate(&rec);
        records.push(IterationRecord {
            t,
            regret: (f_star - value).abs(),
            value,
            recommendation: rec,
            best_observed: data.y_max(),
            batch,
            wall_ms,
        });
    }
    Ok(RegretTrace {
        run_id,
        records,
        aborted: None,
    })
}

/// One repeat of the configured policy on the configured objective.
pub fn run_experiment(cfg: &ExperimentConfig, run_id: usize) -> Result<RegretTrace> {
    let objective = cfg.objective()?;
    run_with_policy(&objective, cfg.policy.build().as_ref(), cfg, run_id)
}

/// All repeats, run in parallel and returned in repeat order.
pub fn run_repeats(cfg: &ExperimentConfig) -> Result<Vec<RegretTrace>> {
    cfg.validate()?;
    let objective = cfg.objective()?;
    let policy = cfg.policy.build();
    (0..cfg.repeats)
        .into_par_iter()
        .map(|r| run_with_policy(&objective, policy.as_ref(), cfg, r))
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Standard deviation of the sample median over bootstrap resamples.
pub fn bootstrap_median_sd<R: Rng + ?Sized>(values: &[f64], resamples: usize, rng: &mut R) -> f64 {
    let n = values.len();
    if n < 2 || resamples < 2 {
        return 0.0;
    }
    let mut buf = vec![0.0; n];
    let meds: Vec<f64> = (0..resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = values[rng.random_range(0..n)];
            }
            median(&buf)
        })
        .collect();
    let m = meds.iter().sum::<f64>() / resamples as f64;
    (meds.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (resamples - 1) as f64).sqrt()
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

fn ln_choose(n: usize, k: usize) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// `P(Bin(n, p) ≥ m)`.
fn binom_tail(n: usize, p: f64, m: usize) -> f64 {
    if m == 0 {
        return 1.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    (m..=n)
        .map(|i| (ln_choose(n, i) + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp())
        .sum::<f64>()
        .min(1.0)
}

/// Standard deviation of the median under the bootstrap distribution itself,
/// the limit of [`bootstrap_median_sd`] as the number of resamples grows.
///
/// With the data sorted, a resample's `i`-th order statistic is `x_(k)` with a
/// binomial probability, and for even sizes the two middle order statistics have
/// a closed-form joint law, so no resampling noise enters the band.
pub fn exact_bootstrap_median_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    let nf = n as f64;
    // P(O_i = x_(k)), k = 1..n
    let order_pmf = |i: usize| -> Vec<f64> {
        (1..=n)
            .map(|k| binom_tail(n, k as f64 / nf, i) - binom_tail(n, (k - 1) as f64 / nf, i))
            .collect()
    };
    let (mean, second) = if n % 2 == 1 {
        let p = order_pmf(n.div_ceil(2));
        let m: f64 = p.iter().zip(&x).map(|(p, v)| p * v).sum();
        let s: f64 = p.iter().zip(&x).map(|(p, v)| p * v * v).sum();
        (m, s)
    } else {
        let a = n / 2;
        let pa = order_pmf(a);
        let pb = order_pmf(a + 1);
        let c = ln_choose(n, a);
        let lower = |k: usize| (k as f64 / nf).powi(a as i32) - ((k - 1) as f64 / nf).powi(a as i32);
        let upper = |l: usize| {
            let r = (n - a) as i32;
            ((n - l + 1) as f64 / nf).powi(r) - ((n - l) as f64 / nf).powi(r)
        };
        // E[O_a O_b]: split the joint law into k < l and k = l
        let mut cross = 0.0;
        for k in 1..=n {
            let mut off = 0.0;
            for l in k + 1..=n {
                let pkl = c.exp() * lower(k) * upper(l);
                off += pkl;
                cross += pkl * x[k - 1] * x[l - 1];
            }
            let diag = (pa[k - 1] - off).max(0.0);
            cross += diag * x[k - 1] * x[k - 1];
        }
        let ea: f64 = pa.iter().zip(&x).map(|(p, v)| p * v).sum();
        let eb: f64 = pb.iter().zip(&x).map(|(p, v)| p * v).sum();
        let ea2: f64 = pa.iter().zip(&x).map(|(p, v)| p * v * v).sum();
        let eb2: f64 = pb.iter().zip(&x).map(|(p, v)| p * v * v).sum();
        (0.5 * (ea + eb), 0.25 * (ea2 + 2.0 * cross + eb2))
    };
    (second - mean * mean).max(0.0).sqrt()
}

/// Per-iteration median regret with a one-standard-deviation bootstrap band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub median: Vec<f64>,
    pub band_sd: Vec<f64>,
    pub completed: usize,
    pub aborted: usize,
}

impl RegretReport {
    pub fn band(&self) -> Vec<(f64, f64)> {
        self.median.iter().zip(&self.band_sd).map(|(m, s)| (m - s, m + s)).collect()
    }

    pub fn final_median(&self) -> Option<f64> {
        self.median.last().copied()
    }
}

/// Aggregates the completed traces; aborted ones are only counted. The band is
/// the exact bootstrap standard deviation of the median.
pub fn aggregate(traces: &[RegretTrace]) -> Result<RegretReport> {
    aggregate_with(traces, None)
}

/// As [`aggregate`], or with a Monte Carlo band from `(resamples, seed)`.
pub fn aggregate_with(traces: &[RegretTrace], monte_carlo: Option<(usize, u64)>) -> Result<RegretReport> {
    let done: Vec<&RegretTrace> = traces.iter().filter(|t| t.is_complete()).collect();
    if done.is_empty() {
        return Err(Error::InvalidArgument("no completed traces to aggregate".into()));
    }
    let len = done[0].records.len();
    if done.iter().any(|t| t.records.len() != len) {
        return Err(Error::InvalidArgument("traces have different lengths".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(monte_carlo.map_or(0, |m| m.1));
    let mut med = Vec::with_capacity(len);
    let mut sd = Vec::with_capacity(len);
    for t in 0..len {
        let col: Vec<f64> = done.iter().map(|tr| tr.records[t].regret).collect();
        med.push(median(&col));
        sd.push(match monte_carlo {
            Some((resamples, _)) => bootstrap_median_sd(&col, resamples, &mut rng),
            None => exact_bootstrap_median_sd(&col),
        });
    }
    Ok(RegretReport {
        median: med,
        band_sd: sd,
        completed: done.len(),
        aborted: traces.len() - done.len(),
    })
}

/// Whether too many repeats were aborted for the run to count.
pub fn too_many_aborted(report: &RegretReport) -> bool {
    let total = report.completed + report.aborted;
    report.aborted as f64 > MAX_ABORT_FRACTION * total as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of the positive differences `x - y`.
    pub w_plus: f64,
    /// Number of nonzero differences.
    pub n: usize,
    /// One-sided p-value for the alternative that `x` tends to be smaller than `y`.
    pub p_less: f64,
}

/// Wilcoxon signed-rank test on paired samples. Zero differences are dropped and
/// tied magnitudes get average ranks. The null distribution is enumerated
/// exactly for up to 60 pairs and approximated by a normal law beyond that.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            n,
            p_less: 1.0,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    // doubled ranks stay integral under ties
    let mut rank2 = vec![0usize; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        for k in i..=j {
            rank2[idx[k]] = i + j + 2;
        }
        i = j + 1;
    }
    let w2: usize = (0..n).filter(|&k| d[k] > 0.0).map(|k| rank2[k]).sum();
    let p_less = if n <= 60 {
        // number of sign patterns with doubled statistic s
        let total: usize = rank2.iter().sum();
        let mut ways = vec![0.0f64; total + 1];
        ways[0] = 1.0;
        for &r in &rank2 {
            for s in (r..=total).rev() {
                ways[s] += ways[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        ways[..=w2].iter().sum::<f64>() / all
    } else {
        let mean = n as f64 * (n as f64 + 1.0) / 4.0;
        let var = rank2.iter().map(|r| (*r as f64 / 2.0).powi(2)).sum::<f64>() / 4.0;
        let z = (w2 as f64 / 2.0 - mean + 0.5) / var.sqrt();
        crate::special::norm_cdf(z)
    };
    Ok(WilcoxonResult {
        w_plus: w2 as f64 / 2.0,
        n,
        p_less: p_less.min(1.0),
    })
}

/// One CSV row per `(repeat, t)`.
pub fn write_traces_csv<W: Write>(traces: &[RegretTrace], dim: usize, q: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["run_id".to_string(), "t".into(), "r_t".into(), "value".into(), "best_observed".into()];
    header.extend((0..dim).map(|d| format!("x_rec_{d}")));
    for i in 0..q {
        header.extend((0..dim).map(|d| format!("batch_{i}_{d}")));
    }
    header.push("wall_ms".into());
    w.write_record(&header)?;
    for tr in traces {
        for r in &tr.records {
            let mut row = vec![
                tr.run_id.to_string(),
                r.t.to_string(),
                r.regret.to_string(),
                r.value.to_string(),
                r.best_observed.to_string(),
            ];
            row.extend(r.recommendation.iter().map(|v| v.to_string()));
            row.extend(r.batch.iter().flatten().map(|v| v.to_string()));
            row.push(format!("{:.3}", r.wall_ms));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub policy: String,
    pub known_max: f64,
    pub report: RegretReport,
    pub abort_reasons: Vec<String>,
}

/// Writes `<stem>.csv` with the traces and `<stem>.json` with the summary.
pub fn write_outputs(stem: &Path, cfg: &ExperimentConfig, traces: &[RegretTrace], report: &RegretReport) -> Result<()> {
    let objective = cfg.objective()?;
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let csv_file = std::fs::File::create(stem.with_extension("csv"))?;
    write_traces_csv(traces, objective.dim(), cfg.q, csv_file)?;
    let summary = RunSummary {
        config: cfg.clone(),
        policy: cfg.policy.build().name().to_string(),
        known_max: objective.known_max.unwrap_or(f64::NAN),
        report: report.clone(),
        abort_reasons: traces.iter().filter_map(|t| t.aborted.clone()).collect(),
    };
    let json_file = std::fs::File::create(stem.with_extension("json"))?;
    serde_json::to_writer_pretty(json_file, &summary)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(run_id: usize, regrets: &[f64]) -> RegretTrace {
        RegretTrace {
            run_id,
            records: regrets
                .iter()
                .enumerate()
                .map(|(t, r)| IterationRecord {
                    t: t + 1,
                    recommendation: vec![0.5],
                    value: -r,
                    regret: *r,
                    best_observed: 0.0,
                    batch: vec![vec![0.5]],
                    wall_ms: 0.0,
                })
                .collect(),
            aborted: None,
        }
    }

    #[test]
    fn median_of_small_sets() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn single_trace_report() {
        let tr = trace(0, &[3.0, 2.0, 0.5]);
        let rep = aggregate(&[tr]).unwrap();
        assert_eq!(rep.median, vec![3.0, 2.0, 0.5]);
        assert_eq!(rep.band_sd, vec![0.0; 3]);
    }

    #[test]
    fn constant_traces_report_their_median() {
        let traces: Vec<RegretTrace> = (1..=5).map(|c| trace(c, &[c as f64; 4])).collect();
        let rep = aggregate(&traces).unwrap();
        assert_eq!(rep.median, vec![3.0; 4]);
        let mut rev = traces.clone();
        rev.reverse();
        assert_eq!(aggregate(&rev).unwrap().median, rep.median);
    }

    #[test]
    fn aggregate_skips_aborted_and_flags_them() {
        let mut bad = trace(2, &[1.0]);
        bad.aborted = Some("boom".into());
        let rep = aggregate(&[trace(0, &[1.0, 2.0]), bad.clone()]).unwrap();
        assert_eq!((rep.completed, rep.aborted), (1, 1));
        assert!(too_many_aborted(&rep));
        assert!(aggregate(&[bad]).is_err());
        assert!(aggregate(&[trace(0, &[1.0]), trace(1, &[1.0, 2.0])]).is_err());
    }

    #[test]
    fn bootstrap_band_matches_reference() {
        // lognormal regrets, heavily skewed
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [20, 25] {
            let vals: Vec<f64> = (0..n).map(|_| (2.0 * rng.sample::<f64, _>(rand_distr::StandardNormal)).exp()).collect();
            let exact = exact_bootstrap_median_sd(&vals);
            let reference = bootstrap_median_sd(&vals, 100_000, &mut ChaCha8Rng::seed_from_u64(7));
            assert!((exact - reference).abs() < 0.05 * reference, "{n}: {exact} vs {reference}");
            let traces: Vec<RegretTrace> = vals.iter().enumerate().map(|(i, v)| trace(i, &[*v])).collect();
            let mc = aggregate_with(&traces, Some((BOOTSTRAP_RESAMPLES, 3))).unwrap().band_sd[0];
            assert!((mc - reference).abs() < 0.25 * reference);
            assert_eq!(aggregate(&traces).unwrap().band_sd[0], exact);
        }
    }

    #[test]
    fn exact_bootstrap_small_cases() {
        assert_eq!(exact_bootstrap_median_sd(&[4.0]), 0.0);
        assert_eq!(exact_bootstrap_median_sd(&[2.0; 6]), 0.0);
        // n = 2: the median is x1, x2 or their mean with probabilities 1/4, 1/4, 1/2
        let sd = exact_bootstrap_median_sd(&[0.0, 2.0]);
        assert!((sd - 0.5f64.sqrt()).abs() < 1e-12);
        // n = 3 enumerated over all 27 resamples
        let x = [1.0, 2.0, 7.0];
        let mut meds = Vec::new();
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    meds.push(median(&[x[a], x[b], x[c]]));
                }
            }
        }
        let m = meds.iter().sum::<f64>() / 27.0;
        let want = (meds.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 27.0).sqrt();
        assert!((exact_bootstrap_median_sd(&x) - want).abs() < 1e-12);
    }

    /// Tail probability by brute-force enumeration of all sign patterns.
    fn brute_force_p(d: &[f64]) -> f64 {
        let n = d.len();
        let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        let rank = |i: usize| {
            let less = abs.iter().filter(|a| **a < abs[i]).count() as f64;
            let eq = abs.iter().filter(|a| **a == abs[i]).count() as f64;
            less + (eq + 1.0) / 2.0
        };
        let ranks: Vec<f64> = (0..n).map(rank).collect();
        let w: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| ranks[i]).sum();
        let mut hits = 0usize;
        for mask in 0..(1usize << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s <= w + 1e-9 {
                hits += 1;
            }
        }
        hits as f64 / (1usize << n) as f64
    }

    #[test]
    fn wilcoxon_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in [5, 9, 12] {
            let x: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 4.0).round()).collect();
            let y: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 4.0).round() + 0.5).collect();
            let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            let r = wilcoxon_signed_rank(&x, &y).unwrap();
            assert!((r.p_less - brute_force_p(&d)).abs() < 1e-12);
        }
        let all_smaller: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let larger: Vec<f64> = all_smaller.iter().map(|v| v + 1.0 + 0.1 * v).collect();
        let r = wilcoxon_signed_rank(&all_smaller, &larger).unwrap();
        assert!((r.p_less - 1.0 / 1024.0).abs() < 1e-15);
        assert_eq!(wilcoxon_signed_rank(&[1.0], &[1.0]).unwrap().p_less, 1.0);
        assert!(wilcoxon_signed_rank(&[1.0], &[]).is_err());
    }

    #[test]
    fn wilcoxon_normal_branch_is_close_to_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..60).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..60).map(|_| rng.random::<f64>() + 0.1).collect();
        let exact = wilcoxon_signed_rank(&x, &y).unwrap().p_less;
        let mut x2 = x.clone();
        let mut y2 = y.clone();
        x2.push(0.5);
        y2.push(0.5 + 1e-9);
        let approx = wilcoxon_signed_rank(&x2, &y2).unwrap().p_less;
        assert!((exact - approx).abs() < 0.01, "{exact} {approx}");
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        for bad in [
            ExperimentConfig { q: 0, ..Default::default() },
            ExperimentConfig { iters: 0, ..Default::default() },
            ExperimentConfig { repeats: 0, ..Default::default() },
            ExperimentConfig { init_count: 0, ..Default::default() },
            ExperimentConfig { noise_sd: Some(-1.0), ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let cfg = ExperimentConfig { noise_sd: Some(0.0), ..Default::default() };
        assert_eq!(cfg.objective().unwrap().noise_sd, 0.0);
    }

    #[test]
    fn csv_layout() {
        let mut out = Vec::new();
        write_traces_csv(&[trace(0, &[1.0, 0.5])], 1, 1, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run_id,t,r_t,value,best_observed,x_rec_0,batch_0_0,wall_ms");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("0,2,0.5,"));
    }
}
