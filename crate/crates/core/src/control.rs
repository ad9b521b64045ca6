//! Output feedback on an identified model: a chain-of-integrators observer,
//! an exponential trajectory planner and a one-step control inversion, run in
//! closed loop against the ground-truth throttle plant.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{etc_rhs, rk4_step, EtcParams, ETC_EQUILIBRIUM};
use crate::polyalg::Polynomial;
use crate::stats::percentile;

/// Bound on `|y|` beyond which a closed-loop run is declared divergent.
pub const DIVERGENCE_BOUND: f64 = 1e3;

/// Coefficients `c_1..c_n` of `prod (s - p_i) = s^n + c_1 s^{n-1} + .. + c_n`.
/// For the error of a chain of integrators with output injection, these
/// are exactly the gains `L_1..L_n`.
pub fn observer_gain(poles: &[f64]) -> Result<Vec<f64>> {
    if poles.is_empty() {
        return Err(Error::Empty("observer poles"));
    }
    if let Some(&p) = poles.iter().find(|p| !(**p < 0.0) || !p.is_finite()) {
        return Err(Error::UnstablePole(p));
    }
    // coefficients of the monic polynomial, highest power first
    let mut c = vec![1.0];
    for &p in poles {
        let mut next = vec![0.0; c.len() + 1];
        for (i, ci) in c.iter().enumerate() {
            next[i] += ci;
            next[i + 1] -= p * ci;
        }
        c = next;
    }
    Ok(c[1..].to_vec())
}

/// True when every root of `s^n + L_1 s^{n-1} + .. + L_n` has negative real
/// part.
fn gain_is_hurwitz(gain: &[f64]) -> bool {
    let n = gain.len();
    if n == 0 || gain.iter().any(|g| !g.is_finite()) {
        return false;
    }
    // companion matrix of the error dynamics
    let a = DMatrix::from_fn(n, n, |i, j| {
        if j == 0 {
            -gain[i]
        } else if j == i + 1 {
            1.0
        } else {
            0.0
        }
    });
    a.complex_eigenvalues().iter().all(|ev| ev.re < 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverState {
    /// Estimates of `y, y', .., y^(n-1)`.
    pub xi_hat: Vec<f64>,
    pub gain: Vec<f64>,
}

impl ObserverState {
    pub fn new(xi_hat: Vec<f64>, gain: Vec<f64>) -> Result<Self> {
        if xi_hat.len() != gain.len() {
            return Err(Error::DimensionMismatch {
                expected: gain.len(),
                got: xi_hat.len(),
            });
        }
        if !gain_is_hurwitz(&gain) {
            return Err(Error::InvalidArgument(format!(
                "observer gain {gain:?} does not give stable error dynamics"
            )));
        }
        Ok(Self { xi_hat, gain })
    }

    pub fn from_poles(xi_hat: Vec<f64>, poles: &[f64]) -> Result<Self> {
        Self::new(xi_hat, observer_gain(poles)?)
    }

    /// Skips the stability check; meant for open-loop comparisons.
    pub fn unchecked(xi_hat: Vec<f64>, gain: Vec<f64>) -> Self {
        Self { xi_hat, gain }
    }

    pub fn order(&self) -> usize {
        self.xi_hat.len()
    }
}

fn observer_rhs(xi: &[f64], gain: &[f64], y: f64, u: f64, model: &Polynomial) -> Vec<f64> {
    let n = xi.len();
    let innovation = y - xi[0];
    let mut z = xi.to_vec();
    z.push(u);
    let mut d = vec![0.0; n];
    for i in 0..n - 1 {
        d[i] = xi[i + 1] + gain[i] * innovation;
    }
    d[n - 1] = model.eval_unchecked(&z) + gain[n - 1] * innovation;
    d
}

/// One RK4 step of the observer with `y` and `u` held over the step.
pub fn observer_step(
    obs: &ObserverState,
    y_meas: f64,
    u: f64,
    model: &Polynomial,
    tau: f64,
) -> Result<ObserverState> {
    let n = obs.order();
    if model.n_z() != n + 1 {
        return Err(Error::DimensionMismatch {
            expected: n + 1,
            got: model.n_z(),
        });
    }
    if !(y_meas.is_finite() && u.is_finite() && tau > 0.0) {
        return Err(Error::NonFinite("observer input"));
    }
    let f = |x: &[f64]| observer_rhs(x, &obs.gain, y_meas, u, model);
    let x = &obs.xi_hat;
    let shift = |k: &[f64], a: f64| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + a * ki).collect() };
    let k1 = f(x);
    let k2 = f(&shift(&k1, 0.5 * tau));
    let k3 = f(&shift(&k2, 0.5 * tau));
    let k4 = f(&shift(&k3, tau));
    let next: Vec<f64> = (0..n)
        .map(|i| x[i] + tau / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observer state"));
    }
    Ok(ObserverState {
        xi_hat: next,
        gain: obs.gain.clone(),
    })
}

/// Coefficients of `y_ref + sum_j alpha_j exp(-sigma j t)` matching the
/// estimated position, velocity and acceleration at `t = 0`.
pub fn plan_alpha(xi_hat: &[f64; 3], y_ref: f64, sigma: f64) -> Result<[f64; 3]> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("planner rate {sigma} must be > 0")));
    }
    let rates = [-sigma, -2.0 * sigma, -3.0 * sigma];
    let v = Matrix3::from_fn(|i, j| rates[j].powi(i as i32));
    let rhs = Vector3::new(xi_hat[0] - y_ref, xi_hat[1], xi_hat[2]);
    let alpha = v.lu().solve(&rhs).ok_or(Error::Singular("planner system"))?;
    Ok([alpha[0], alpha[1], alpha[2]])
}

/// `k`-th time derivative of the planned profile at time `t`, excluding the
/// constant `y_ref` for `k = 0`.
pub fn profile_derivative(alpha: &[f64; 3], sigma: f64, k: u32, t: f64) -> f64 {
    alpha
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let r = -sigma * (j + 1) as f64;
            a * r.powi(k as i32) * (r * t).exp()
        })
        .sum()
}

pub fn desired_jerk(alpha: &[f64; 3], sigma: f64) -> f64 {
    profile_derivative(alpha, sigma, 3, 0.0)
}

/// `argmin_{|v| <= u_bar} |jerk_des - P(xi_hat, v)|`.
pub fn solve_control(model: &Polynomial, xi_hat: &[f64], jerk_des: f64, u_bar: f64) -> Result<f64> {
    let n = xi_hat.len();
    if model.n_z() != n + 1 {
        return Err(Error::DimensionMismatch {
            expected: n + 1,
            got: model.n_z(),
        });
    }
    if !(u_bar > 0.0 && u_bar.is_finite()) {
        return Err(Error::InvalidArgument(format!("saturation {u_bar} must be > 0")));
    }
    if !jerk_des.is_finite() || xi_hat.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("control inputs"));
    }
    let mut z = xi_hat.to_vec();
    z.push(0.0);
    let mut p_at = |v: f64| {
        z[n] = v;
        model.eval_unchecked(&z)
    };
    if model.max_exponent(n) <= 1 {
        let a = p_at(0.0);
        let b = p_at(1.0) - a;
        if b == 0.0 {
            return Ok(0.0);
        }
        return Ok(((jerk_des - a) / b).clamp(-u_bar, u_bar));
    }

    let mut cost = |v: f64| (jerk_des - p_at(v)).abs();
    const GRID: usize = 101;
    let step = 2.0 * u_bar / (GRID - 1) as f64;
    let at = |i: usize| -u_bar + i as f64 * step;
    let costs: Vec<f64> = (0..GRID).map(|i| cost(at(i))).collect();
    let best = (0..GRID)
        .min_by(|&a, &b| costs[a].total_cmp(&costs[b]))
        .expect("non-empty grid");
    if costs.iter().all(|c| *c == costs[0]) {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (at(best.saturating_sub(1)), at((best + 1).min(GRID - 1)));
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = cost(x1);
    let mut f2 = cost(x2);
    while hi - lo > 1e-14 * u_bar.max(1.0) {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = cost(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = cost(x2);
        }
    }
    let refined = 0.5 * (lo + hi);
    let v = if cost(refined) <= costs[best] { refined } else { at(best) };
    Ok(v.clamp(-u_bar, u_bar))
}

/// Piecewise-linear reference through `(t, value)` knots; two knots at the
/// same time make a step. Held constant outside the knot range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub knots: Vec<(f64, f64)>,
}

impl Reference {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::Empty("reference knots"));
        }
        if knots.iter().any(|(t, v)| !t.is_finite() || !v.is_finite())
            || knots.windows(2).any(|w| w[1].0 < w[0].0)
        {
            return Err(Error::InvalidArgument(
                "reference knots must be finite with non-decreasing times".into(),
            ));
        }
        Ok(Self { knots })
    }

    pub fn constant(value: f64) -> Self {
        Self {
            knots: vec![(0.0, value)],
        }
    }

    pub fn step(at: f64, from: f64, to: f64) -> Self {
        Self {
            knots: vec![(at, from), (at, to)],
        }
    }

    /// Steps and ramps around the rest angle over 5 s.
    pub fn step_and_ramp() -> Self {
        let r = FRAC_PI_2;
        Self {
            knots: vec![
                (0.5, r),
                (0.5, r + 0.5),
                (1.5, r + 0.5),
                (2.5, r + 0.1),
                (3.0, r + 0.1),
                (3.0, r + 0.4),
                (4.0, r + 0.4),
                (4.5, r + 0.2),
            ],
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        let k = &self.knots;
        // index of the first knot strictly after t
        let i = k.partition_point(|(tk, _)| *tk <= t);
        if i == 0 {
            return k[0].1;
        }
        if i == k.len() {
            return k[k.len() - 1].1;
        }
        let (t0, v0) = k[i - 1];
        let (t1, v1) = k[i];
        if t1 == t0 {
            return v1;
        }
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }
}

impl Default for Reference {
    fn default() -> Self {
        Self::step_and_ramp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Planner decay rate.
    pub sigma: f64,
    pub u_bar: f64,
    /// Control is recomputed every `kappa` sampling periods.
    pub kappa: usize,
    pub tau_ctrl: f64,
    pub observer_poles: Vec<f64>,
    pub duration: f64,
    /// Measurement noise as a fraction of the 99th percentile of `|y_ref|`.
    pub nsr: f64,
    pub seed: u64,
    /// RK4 steps per control period for the plant.
    pub plant_substeps: usize,
    pub reference: Reference,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            sigma: 5.0,
            u_bar: 0.15,
            kappa: 3,
            tau_ctrl: 800e-6,
            observer_poles: vec![-60.0; 3],
            duration: 5.0,
            nsr: 0.0,
            seed: 0,
            plant_substeps: 4,
            reference: Reference::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.u_bar > 0.0) || self.kappa == 0 || !(self.tau_ctrl > 0.0) || !(self.duration > 0.0) {
            return Err(Error::InvalidArgument(
                "u_bar, kappa, tau_ctrl and duration must be positive".into(),
            ));
        }
        if !(self.sigma > 0.0) || self.plant_substeps == 0 || !(self.nsr >= 0.0) {
            return Err(Error::InvalidArgument(
                "sigma and plant_substeps must be positive, nsr non-negative".into(),
            ));
        }
        if self.observer_poles.len() != 3 {
            return Err(Error::InvalidArgument("the controller needs three observer poles".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClosedLoopLog {
    pub t: Vec<f64>,
    pub y_ref: Vec<f64>,
    /// Measured output.
    pub y: Vec<f64>,
    pub xi_hat: Vec<[f64; 3]>,
    pub u: Vec<f64>,
    /// Plant state per step.
    pub state: Vec<[f64; 3]>,
}

impl ClosedLoopLog {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,y_ref,y,y_hat0,y_hat1,y_hat2,u\n");
        for i in 0..self.len() {
            let x = &self.xi_hat[i];
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.t[i], self.y_ref[i], self.y[i], x[0], x[1], x[2], self.u[i]
            );
        }
        out
    }
}

/// Closed loop from rest: the observer tracks `y`, the control is
/// recomputed every `kappa` periods and held in between, and the plant runs
/// the ground-truth throttle dynamics.
pub fn closed_loop(plant: &EtcParams, model: &Polynomial, cfg: &ControllerConfig) -> Result<ClosedLoopLog> {
    cfg.validate()?;
    plant.validate()?;
    if model.n_z() != 4 {
        return Err(Error::DimensionMismatch {
            expected: 4,
            got: model.n_z(),
        });
    }
    let steps = (cfg.duration / cfg.tau_ctrl).round() as usize;
    let noise_level = if cfg.nsr > 0.0 {
        let samples: Vec<f64> = (0..steps)
            .map(|k| cfg.reference.value(k as f64 * cfg.tau_ctrl).abs())
            .collect();
        cfg.nsr * percentile(&samples, 99.0)?
    } else {
        0.0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut x = ETC_EQUILIBRIUM;
    let mut obs = ObserverState::from_poles(vec![x[0], 0.0, 0.0], &cfg.observer_poles)?;
    let mut u = 0.0;
    let h = cfg.tau_ctrl / cfg.plant_substeps as f64;
    let mut log = ClosedLoopLog::default();
    for k in 0..steps {
        let t = k as f64 * cfg.tau_ctrl;
        let nu: f64 = if noise_level > 0.0 {
            StandardNormal.sample(&mut rng)
        } else {
            0.0
        };
        let y_meas = x[0] + noise_level * nu;
        let y_ref = cfg.reference.value(t);
        let xi = [obs.xi_hat[0], obs.xi_hat[1], obs.xi_hat[2]];
        if k % cfg.kappa == 0 {
            let alpha = plan_alpha(&xi, y_ref, cfg.sigma)?;
            u = solve_control(model, &xi, desired_jerk(&alpha, cfg.sigma), cfg.u_bar)?;
        }
        log.t.push(t);
        log.y_ref.push(y_ref);
        log.y.push(y_meas);
        log.xi_hat.push(xi);
        log.u.push(u);
        log.state.push(x);

        obs = observer_step(&obs, y_meas, u, model, cfg.tau_ctrl).map_err(|_| Error::ObserverDiverged { step: k })?;
        let held = u;
        for s in 0..cfg.plant_substeps {
            x = rk4_step(&|x: &[f64; 3], u| etc_rhs(x, u, plant), &x, t + s as f64 * h, h, &|_| held);
        }
        if !x[0].is_finite() || x[0].abs() > DIVERGENCE_BOUND {
            return Err(Error::ClosedLoopDiverged {
                t: t + cfg.tau_ctrl,
                y: x[0],
            });
        }
    }
    Ok(log)
}

/// Settling of one reference step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub at: f64,
    pub size: f64,
    /// Time after the step from which `|y - y_ref|` stays inside the band
    /// for as long as the reference holds the new value; `None` if it never
    /// gets there.
    pub settling_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    /// Band as a fraction of each step size.
    pub band: f64,
    pub steps: Vec<StepMetric>,
    pub max_abs_error: f64,
    pub rms_error: f64,
    pub final_abs_error: f64,
    pub max_abs_u: f64,
    /// Fraction of periods with the control on a bound.
    pub saturated_fraction: f64,
}

/// Tracking metrics of a closed-loop log, measured on the true plant angle.
pub fn tracking_summary(log: &ClosedLoopLog, reference: &Reference, u_bar: f64, band: f64) -> Result<TrackingSummary> {
    if log.is_empty() {
        return Err(Error::Empty("closed-loop log"));
    }
    let err: Vec<f64> = log.state.iter().zip(&log.y_ref).map(|(x, r)| x[0] - r).collect();
    let jumps: Vec<(f64, f64)> = reference
        .knots
        .windows(2)
        .filter(|w| w[0].0 == w[1].0 && w[0].1 != w[1].1)
        .map(|w| (w[0].0, w[1].1 - w[0].1))
        .collect();
    let mut steps = Vec::with_capacity(jumps.len());
    for &(at, size) in &jumps {
        let tol = band * size.abs();
        let start = log.t.partition_point(|t| *t < at);
        // the window lasts while the reference holds the post-step value
        let hold = log.y_ref.get(start).copied();
        let end = match hold {
            Some(h) => start + log.y_ref[start..].iter().take_while(|r| **r == h).count(),
            None => start,
        };
        let settling_time = if start == end {
            None
        } else {
            match (start..end).rev().find(|&i| err[i].abs() > tol) {
                None => Some(log.t[start] - at),
                Some(i) if i + 1 < end => Some(log.t[i + 1] - at),
                Some(_) => None,
            }
        };
        steps.push(StepMetric { at, size, settling_time });
    }
    let max_abs_u = log.u.iter().fold(0.0f64, |m, u| m.max(u.abs()));
    let saturated = log.u.iter().filter(|u| u.abs() >= u_bar * (1.0 - 1e-12)).count();
    Ok(TrackingSummary {
        band,
        steps,
        max_abs_error: err.iter().fold(0.0f64, |m, e| m.max(e.abs())),
        rms_error: crate::stats::rms(&err),
        final_abs_error: err[err.len() - 1].abs(),
        max_abs_u,
        saturated_fraction: saturated as f64 / log.len() as f64,
    })
}

/// The noise-free linear part of the throttle model in derivative
/// coordinates, `y''' = a0 (y - pi/2) + a1 y' + a2 y'' + b u`; used as a
/// reference model in tests.
pub fn etc_linear_model(p: &EtcParams) -> Result<Polynomial> {
    let j = p.inertia();
    let k_sp = p.k_sp;
    let friction = p.n_m * p.n_m * p.b_m + p.b_t;
    let motor = p.n_m * p.k_t;
    // characteristic polynomial s^3 + c2 s^2 + c1 s + c0
    let c2 = p.r_a / p.l_a + friction / j;
    let c1 = (p.r_a * friction + motor * p.n_m * p.k_b) / (p.l_a * j) + k_sp / j;
    let c0 = p.r_a * k_sp / (p.l_a * j);
    let b = motor * p.k_g / (p.l_a * j);
    Polynomial::new(
        4,
        vec![vec![0, 0, 0, 0], vec![1, 0, 0, 0], vec![0, 1, 0, 0], vec![0, 0, 1, 0], vec![0, 0, 0, 1]],
        vec![c0 * FRAC_PI_2, -c0, -c1, -c2, b],
    )
}
