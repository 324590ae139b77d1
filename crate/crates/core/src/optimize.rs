//! Box-constrained local ascent used by every inner maximization in the crate.

/// Projected gradient ascent with an Armijo backtracking step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AscentConfig {
    pub max_steps: usize,
    /// First trial step as a fraction of the box width.
    pub initial_step: f64,
    /// Stop once an accepted step improves the objective by less than this.
    pub tolerance: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            max_steps: 200,
            initial_step: 0.1,
            tolerance: 1e-12,
        }
    }
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Maximizes `value` from `x0` inside `[lower, upper]`.
///
/// `value_grad` returns the objective and its gradient; `value` is used during
/// backtracking. Non-finite trial values are treated as failed steps. The
/// search direction is the gradient rescaled by squared box widths, so the
/// iteration behaves the same on any box.
pub fn projected_ascent<V, G>(
    value: V,
    value_grad: G,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    config: &AscentConfig,
) -> (Vec<f64>, f64)
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let width: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| (u - l).max(1e-300)).collect();
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let (mut fx, mut g) = value_grad(&x);
    if !fx.is_finite() {
        return (x, fx);
    }
    let mut step: Option<f64> = None;
    let mut trial = vec![0.0; n];
    for _ in 0..config.max_steps {
        let dir: Vec<f64> = g.iter().zip(&width).map(|(gi, w)| gi * w * w).collect();
        let scale = dir
            .iter()
            .zip(&width)
            .map(|(d, w)| (d / w).abs())
            .fold(0.0, f64::max);
        if !(scale > 0.0) || !scale.is_finite() {
            break;
        }
        let mut s = step.unwrap_or(config.initial_step / scale);
        let mut accepted = None;
        for _ in 0..40 {
            for i in 0..n {
                trial[i] = x[i] + s * dir[i];
            }
            project(&mut trial, lower, upper);
            let moved: f64 = (0..n).map(|i| g[i] * (trial[i] - x[i])).sum();
            if moved <= 0.0 {
                break;
            }
            let ft = value(&trial);
            if ft.is_finite() && ft >= fx + 1e-4 * moved {
                accepted = Some(ft);
                break;
            }
            s *= 0.5;
        }
        let Some(ft) = accepted else { break };
        let gain = ft - fx;
        x.copy_from_slice(&trial);
        let (f_new, g_new) = value_grad(&x);
        if !f_new.is_finite() {
            // value and value_grad disagree only through round-off
            return (x, ft);
        }
        fx = f_new;
        g = g_new;
        step = Some(2.0 * s);
        if gain < config.tolerance {
            break;
        }
    }
    (x, fx)
}

/// Runs [`projected_ascent`] from every start and returns the best optimum.
/// Ties go to the earliest start.
pub fn multistart_ascent<V, G>(
    value: V,
    value_grad: G,
    starts: &[Vec<f64>],
    lower: &[f64],
    upper: &[f64],
    config: &AscentConfig,
) -> (Vec<f64>, f64)
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut best: Option<(Vec<f64>, f64)> = None;
    for s in starts {
        let (x, f) = projected_ascent(&value, &value_grad, s, lower, upper, config);
        let better = match &best {
            None => true,
            Some((_, bf)) => f > *bf || (bf.is_nan() && !f.is_nan()),
        };
        if better {
            best = Some((x, f));
        }
    }
    best.unwrap_or_else(|| (lower.to_vec(), f64::NEG_INFINITY))
}

/// First `n` points of the Halton sequence in `[0, 1)^dim`, skipping the origin.
pub fn halton(n: usize, dim: usize) -> Vec<Vec<f64>> {
    const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];
    assert!(dim <= PRIMES.len(), "Halton sequence supports up to 16 dimensions");
    (1..=n as u64)
        .map(|i| {
            PRIMES[..dim]
                .iter()
                .map(|&b| {
                    let (mut f, mut r, mut k) = (1.0, 0.0, i);
                    while k > 0 {
                        f /= b as f64;
                        r += f * (k % b) as f64;
                        k /= b;
                    }
                    r
                })
                .collect()
        })
        .collect()
}
