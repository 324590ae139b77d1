//! Benchmark objectives on the unit hypercube, all posed as maximization problems.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{check_dim, Error, Result};
use crate::gp::{Domain, Point};

/// Observation noise used for every benchmark unless overridden.
pub const DEFAULT_NOISE_SD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    Branin,
    Cosines,
    Shekel10,
    Hartmann6,
    Rocket,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Branin => "branin",
            Self::Cosines => "cosines",
            Self::Shekel10 => "shekel10",
            Self::Hartmann6 => "hartmann6",
            Self::Rocket => "rocket",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Self::Branin | Self::Cosines | Self::Shekel10 => 2,
            Self::Hartmann6 => 6,
            Self::Rocket => 3,
        }
    }
}

/// A noiseless function on `[0, 1]^D` plus the Gaussian noise level used when observing it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub noise_sd: f64,
    pub known_max: Option<f64>,
    pub argmax: Vec<Point>,
}

impl Objective {
    pub fn new(kind: ObjectiveKind) -> Self {
        let (known_max, argmax) = match kind {
            ObjectiveKind::Branin => (
                Some(-BRANIN_MIN),
                vec![
                    branin_to_unit(-PI, 12.275),
                    branin_to_unit(PI, 2.275),
                    branin_to_unit(3.0 * PI, 2.475),
                ],
            ),
            ObjectiveKind::Cosines => (Some(1.6), vec![vec![0.3125, 0.3125]]),
            ObjectiveKind::Shekel10 => (Some(SHEKEL2_MAX), vec![SHEKEL2_ARGMAX.to_vec()]),
            ObjectiveKind::Hartmann6 => (Some(HARTMANN6_MAX), vec![HARTMANN6_ARGMAX.to_vec()]),
            ObjectiveKind::Rocket => {
                let (t, x) = rocket_supremum();
                (Some(t), vec![x])
            }
        };
        Self {
            kind,
            noise_sd: DEFAULT_NOISE_SD,
            known_max,
            argmax,
        }
    }

    pub fn with_noise(mut self, noise_sd: f64) -> Self {
        self.noise_sd = noise_sd;
        self
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn domain(&self) -> Domain {
        Domain::unit(self.dim())
    }

    /// Noiseless value at `x ∈ [0, 1]^D`.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        match self.kind {
            ObjectiveKind::Branin => -branin(x),
            ObjectiveKind::Cosines => cosines(x),
            ObjectiveKind::Shekel10 => shekel2(x),
            ObjectiveKind::Hartmann6 => hartmann6(x),
            ObjectiveKind::Rocket => rocket_flight_time(x),
        }
    }

    pub fn checked_evaluate(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        if !self.domain().contains(x) {
            return Err(Error::InvalidArgument(format!("{x:?} is outside the unit cube")));
        }
        Ok(self.evaluate(x))
    }

    /// `f(x) + ε`, `ε ~ N(0, noise_sd²)`.
    pub fn observe<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> f64 {
        let f = self.evaluate(x);
        if self.noise_sd == 0.0 {
            return f;
        }
        f + Normal::new(0.0, self.noise_sd).expect("finite noise").sample(rng)
    }
}

/// One of `branin`, `cosines`, `shekel10`, `hartmann6`.
pub fn make_synthetic(name: &str) -> Result<Objective> {
    let kind = match name {
        "branin" => ObjectiveKind::Branin,
        "cosines" => ObjectiveKind::Cosines,
        "shekel10" => ObjectiveKind::Shekel10,
        "hartmann6" => ObjectiveKind::Hartmann6,
        _ => return Err(Error::InvalidArgument(format!("unknown synthetic objective '{name}'"))),
    };
    Ok(Objective::new(kind))
}

/// Any objective by name, the rocket simulator included.
pub fn make_objective(name: &str) -> Result<Objective> {
    if name == "rocket" {
        return Ok(Objective::new(ObjectiveKind::Rocket));
    }
    make_synthetic(name)
}

pub const OBJECTIVE_NAMES: [&str; 5] = ["branin", "cosines", "shekel10", "hartmann6", "rocket"];

const BRANIN_MIN: f64 = 0.397_887_357_729_738_2;

fn branin_to_unit(x1: f64, x2: f64) -> Point {
    vec![(x1 + 5.0) / 15.0, x2 / 15.0]
}

/// Branin-Hoo on `[-5, 10] × [0, 15]` (minimization form).
fn branin(u: &[f64]) -> f64 {
    let x1 = -5.0 + 15.0 * u[0];
    let x2 = 15.0 * u[1];
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2) + 10.0 * (1.0 - t) * x1.cos() + 10.0
}

fn cosines(x: &[f64]) -> f64 {
    let u = 1.6 * x[0] - 0.5;
    let v = 1.6 * x[1] - 0.5;
    1.0 - (u * u + v * v - 0.3 * (3.0 * PI * u).cos() - 0.3 * (3.0 * PI * v).cos())
}

const SHEKEL_BETA: [f64; 10] = [0.1, 0.2, 0.2, 0.4, 0.4, 0.6, 0.3, 0.7, 0.5, 0.5];
const SHEKEL_C: [[f64; 4]; 10] = [
    [4.0, 4.0, 4.0, 4.0],
    [1.0, 1.0, 1.0, 1.0],
    [8.0, 8.0, 8.0, 8.0],
    [6.0, 6.0, 6.0, 6.0],
    [3.0, 7.0, 3.0, 7.0],
    [2.0, 9.0, 2.0, 9.0],
    [5.0, 3.0, 5.0, 3.0],
    [8.0, 1.0, 8.0, 1.0],
    [6.0, 2.0, 6.0, 2.0],
    [7.0, 3.6, 7.0, 3.6],
];
const SHEKEL2_MAX: f64 = 10.536_363_349_643_07;
const SHEKEL2_ARGMAX: [f64; 2] = [0.400_074_61, 0.399_951_02];

/// The 10-mode Shekel function on `[0, 10]^4` (maximization form) with the last
/// two coordinates held at 4, their value at the 4-D optimum.
fn shekel2(u: &[f64]) -> f64 {
    let x = [10.0 * u[0], 10.0 * u[1], 4.0, 4.0];
    SHEKEL_C
        .iter()
        .zip(SHEKEL_BETA)
        .map(|(c, b)| {
            let d: f64 = x.iter().zip(c).map(|(xi, ci)| (xi - ci).powi(2)).sum();
            1.0 / (d + b)
        })
        .sum()
}

const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const HARTMANN_A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];
const HARTMANN_P: [[f64; 6]; 4] = [
    [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
    [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
    [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
    [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
];
const HARTMANN6_MAX: f64 = 3.322_368_011_415_515;
const HARTMANN6_ARGMAX: [f64; 6] = [0.201_69, 0.150_011, 0.476_874, 0.275_332, 0.311_652, 0.657_3];

fn hartmann6(x: &[f64]) -> f64 {
    HARTMANN_ALPHA
        .iter()
        .zip(HARTMANN_A.iter().zip(&HARTMANN_P))
        .map(|(a, (arow, prow))| {
            let s: f64 = (0..6).map(|j| arow[j] * (x[j] - prow[j]).powi(2)).sum();
            a * (-s).exp()
        })
        .sum()
}

/// Parameters of the point-mass rocket behind [`rocket_flight_time`].
pub mod rocket {
    pub const MAX_LAUNCH_HEIGHT: f64 = 100.0;
    pub const MAX_FUEL: f64 = 10.0;
    pub const MAX_ANGLE_DEG: f64 = 90.0;
    pub const DRY_MASS: f64 = 1.0;
    pub const EXHAUST_SPEED: f64 = 1000.0;
    pub const BURN_RATE: f64 = 5.0;
    pub const GRAVITY: f64 = 9.81;
    pub const DT: f64 = 0.01;
    pub const TIME_CAP: f64 = 600.0;
    /// Vertical speed above which the rocket is treated as never coming back.
    pub const ESCAPE_SPEED: f64 = 2000.0;
}

/// Flight time in seconds of a rocket launched from height `100 x₀` m with `10 x₁`
/// kg of fuel at `90 x₂` degrees above the horizontal.
///
/// The engine burns at a constant rate with constant exhaust speed, thrusting
/// along the launch direction, over a flat ground under constant gravity and no
/// drag. Returns 0 if the rocket never returns: still airborne at the time cap,
/// or climbing faster than the escape threshold.
pub fn rocket_flight_time(x: &[f64]) -> f64 {
    use rocket::*;
    let h0 = MAX_LAUNCH_HEIGHT * x[0].clamp(0.0, 1.0);
    let fuel = MAX_FUEL * x[1].clamp(0.0, 1.0);
    let angle = (MAX_ANGLE_DEG * x[2].clamp(0.0, 1.0)).to_radians();
    let burn_time = fuel / BURN_RATE;
    let thrust = EXHAUST_SPEED * BURN_RATE;
    let lift = thrust * angle.sin();

    // Only the vertical motion matters for the landing time. The phase is fixed per
    // step, and steps are split at burnout.
    let accel = |t: f64, burning: bool| -> f64 {
        if burning {
            lift / (DRY_MASS + fuel - BURN_RATE * t) - GRAVITY
        } else {
            -GRAVITY
        }
    };

    let (mut t, mut y, mut vy) = (0.0_f64, h0, 0.0_f64);
    while t < TIME_CAP {
        // split the step at burnout so RK4 never straddles the thrust cut-off
        let burning = t < burn_time;
        let mut h = DT;
        if burning && t + h > burn_time {
            h = burn_time - t;
        }
        let k1v = accel(t, burning);
        let k2v = accel(t + 0.5 * h, burning);
        let k4v = accel(t + h, burning);
        let (k1y, k2y, k3y, k4y) = (vy, vy + 0.5 * h * k1v, vy + 0.5 * h * k2v, vy + h * k2v);
        let k3v = k2v;
        let y_next = y + h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
        let v_next = vy + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        if y_next <= 0.0 {
            // linear interpolation of the touchdown inside the step
            let frac = if y > y_next { y / (y - y_next) } else { 0.0 };
            return t + frac * h;
        }
        t += h;
        y = y_next;
        vy = v_next;
        if t >= burn_time && vy > ESCAPE_SPEED {
            return 0.0;
        }
    }
    0.0
}

/// Longest flight and where it occurs. Flight time grows with launch height and
/// fuel until the escape threshold. Along that threshold it keeps growing as the
/// angle drops and more fuel is needed, until the tank is full, so the best
/// returning flight has full height and fuel and the steepest angle that still
/// returns, found by bisection.
pub fn rocket_supremum() -> (f64, Point) {
    static SUP: OnceLock<(f64, Point)> = OnceLock::new();
    SUP.get_or_init(|| {
        let returns = |angle: f64| rocket_flight_time(&[1.0, 1.0, angle]) > 0.0;
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        if returns(hi) {
            lo = hi;
        } else {
            while hi - lo > 1e-13 {
                let mid = 0.5 * (lo + hi);
                if returns(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        let x = vec![1.0, 1.0, lo];
        (rocket_flight_time(&x), x)
    })
    .clone()
}
