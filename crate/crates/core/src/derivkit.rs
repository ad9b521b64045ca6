//! Derivative reconstruction for noisy, uniformly sampled series.
//!
//! Every sample gets a least-squares polynomial fit over a window of
//! `2h + 1` neighbours (shifted at the series ends); the order-`n`
//! derivative is read off the fitted polynomial at the sample position.
//! For a fixed [`Tuning`] the estimator is a linear filter of the data and it
//! reproduces polynomials of degree `<= local_order` exactly.
//!
//! The confidence indicator is the standard error of the derivative
//! coefficient implied by the local residual variance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::percentile_sorted;

pub const MAX_ORDER: usize = 4;
pub const MIN_SERIES_LEN: usize = 30;
pub const HALF_WINDOW_GRID: [usize; 6] = [5, 10, 20, 40, 80, 160];
/// Local orders tried by the tuner are `n + 1 ..= n + ORDER_SPAN`.
pub const ORDER_SPAN: usize = 3;
/// Fraction of the smallest prediction errors averaged by the tuning score.
pub const SCORE_QUANTILE: f64 = 0.5;

/// Window and local polynomial order of the sliding fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tuning {
    pub half_window: usize,
    pub local_order: usize,
}

impl Tuning {
    pub fn window_len(&self) -> usize {
        2 * self.half_window + 1
    }

    /// A window must carry at least as many residual degrees of freedom as
    /// fitted coefficients, and fit three times into the series.
    pub fn is_feasible(&self, series_len: usize) -> bool {
        self.half_window >= 1
            && 3 * self.half_window < series_len
            && self.window_len() >= 2 * (self.local_order + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeEstimate {
    pub order: usize,
    /// Estimated `y^(order)` in signal units per `s^order`.
    pub values: Vec<f64>,
    /// Standard error of each value; larger is less reliable.
    pub confidence: Vec<f64>,
    /// False where the window had to be shifted at the ends of the series.
    pub valid_mask: Vec<bool>,
    pub tuning: Tuning,
}

impl DerivativeEstimate {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        self.valid_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &ok)| ok.then_some(i))
            .collect()
    }
}

fn check_inputs(v: &[f64], order: usize, tau: f64) -> Result<()> {
    if order > MAX_ORDER {
        return Err(Error::InvalidArgument(format!(
            "derivative order {order} exceeds {MAX_ORDER}"
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("sampling period {tau} must be > 0")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("derivative input series"));
    }
    let min = min_series_len(order);
    if v.len() < min {
        return Err(Error::SeriesTooShort {
            len: v.len(),
            order,
            min,
        });
    }
    Ok(())
}

/// Candidate tunings for order `order` on a series of `len` samples, in the
/// order the tuner visits them.
pub fn tuning_grid(order: usize, len: usize) -> Vec<Tuning> {
    HALF_WINDOW_GRID
        .iter()
        .flat_map(|&half_window| {
            (order + 1..=order + ORDER_SPAN).map(move |local_order| Tuning {
                half_window,
                local_order,
            })
        })
        .filter(|t| t.is_feasible(len))
        .collect()
}

/// Shortest series for which the tuner has at least one candidate.
pub fn min_series_len(order: usize) -> usize {
    let smallest = HALF_WINDOW_GRID
        .iter()
        .copied()
        .find(|&h| 2 * h + 1 >= 2 * (order + 2))
        .unwrap_or(HALF_WINDOW_GRID[HALF_WINDOW_GRID.len() - 1]);
    MIN_SERIES_LEN.max(3 * smallest + 1)
}

/// Least-squares projector of one window position.
struct Stencil {
    /// `(p + 1) x m`: maps window samples to coefficients in the normalised
    /// abscissa `s = (j - c) / h`.
    pinv: DMatrix<f64>,
    /// Diagonal of `(X^T X)^{-1}`.
    cov_diag: Vec<f64>,
    /// `m x (p + 1)` design matrix.
    design: DMatrix<f64>,
}

impl Stencil {
    fn new(tuning: Tuning, center: usize) -> Result<Self> {
        let m = tuning.window_len();
        let cols = tuning.local_order + 1;
        let h = tuning.half_window as f64;
        let design = DMatrix::from_fn(m, cols, |j, k| ((j as f64 - center as f64) / h).powi(k as i32));
        let qr = design.clone().qr();
        let r = qr.r();
        let rinv = r
            .solve_upper_triangular(&DMatrix::identity(cols, cols))
            .ok_or(Error::Singular("local polynomial fit"))?;
        let pinv = &rinv * qr.q().transpose();
        let cov_diag = (0..cols)
            .map(|k| rinv.row(k).iter().map(|x| x * x).sum())
            .collect();
        Ok(Self {
            pinv,
            cov_diag,
            design,
        })
    }
}

/// Local coefficients and residual scale for every sample.
struct LocalFits {
    tuning: Tuning,
    /// Per sample: polynomial coefficients in the normalised abscissa.
    coeffs: Vec<Vec<f64>>,
    /// Per sample: residual standard deviation of the local fit.
    sigma: Vec<f64>,
    /// Per sample: `diag((X^T X)^{-1})` of the stencil used.
    cov_diag: Vec<Vec<f64>>,
}

fn local_fits(v: &[f64], tuning: Tuning) -> Result<LocalFits> {
    let n = v.len();
    if !tuning.is_feasible(n) {
        return Err(Error::InvalidArgument(format!(
            "tuning {tuning:?} is not feasible for a series of {n} samples"
        )));
    }
    let h = tuning.half_window;
    let m = tuning.window_len();
    let dof = (m - tuning.local_order - 1) as f64;
    let interior = Stencil::new(tuning, h)?;
    let mut edge: Vec<Option<Stencil>> = (0..m).map(|_| None).collect();

    let mut coeffs = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut cov_diag = Vec::with_capacity(n);
    for i in 0..n {
        let (start, center) = if i < h {
            (0, i)
        } else if i + h >= n {
            (n - m, i + m - n)
        } else {
            (i - h, h)
        };
        let stencil = if center == h {
            &interior
        } else {
            if edge[center].is_none() {
                edge[center] = Some(Stencil::new(tuning, center)?);
            }
            edge[center].as_ref().expect("stencil just built")
        };
        let window = &v[start..start + m];
        let a: Vec<f64> = stencil
            .pinv
            .row_iter()
            .map(|row| row.iter().zip(window).map(|(w, x)| w * x).sum())
            .collect();
        let rss: f64 = stencil
            .design
            .row_iter()
            .zip(window)
            .map(|(row, x)| {
                let fit: f64 = row.iter().zip(&a).map(|(d, c)| d * c).sum();
                (x - fit).powi(2)
            })
            .sum();
        coeffs.push(a);
        sigma.push((rss / dof).sqrt());
        cov_diag.push(stencil.cov_diag.clone());
    }
    Ok(LocalFits {
        tuning,
        coeffs,
        sigma,
        cov_diag,
    })
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

impl LocalFits {
    fn estimate(&self, order: usize, tau: f64) -> DerivativeEstimate {
        let h = self.tuning.half_window;
        let n = self.coeffs.len();
        let scale = factorial(order) / (h as f64 * tau).powi(order as i32);
        let values = self.coeffs.iter().map(|a| a[order] * scale).collect();
        let confidence = self
            .sigma
            .iter()
            .zip(&self.cov_diag)
            .map(|(s, c)| s * c[order].sqrt() * scale)
            .collect();
        let valid_mask = (0..n).map(|i| i >= h && i + h < n).collect();
        DerivativeEstimate {
            order,
            values,
            confidence,
            valid_mask,
            tuning: self.tuning,
        }
    }
}

/// Self-tuned order-`order` derivative of `v` sampled every `tau` seconds.
pub fn reconstruct(v: &[f64], order: usize, tau: f64) -> Result<DerivativeEstimate> {
    let tuning = self_tune(v, order, tau)?;
    reconstruct_with(v, order, tau, tuning)
}

/// Derivative estimate with a caller-chosen tuning.
pub fn reconstruct_with(
    v: &[f64],
    order: usize,
    tau: f64,
    tuning: Tuning,
) -> Result<DerivativeEstimate> {
    check_inputs(v, order, tau)?;
    if tuning.local_order < order {
        return Err(Error::InvalidArgument(format!(
            "local order {} cannot provide derivative order {order}",
            tuning.local_order
        )));
    }
    Ok(local_fits(v, tuning)?.estimate(order, tau))
}

/// Orders `0..=max_order` from one shared tuning, selected for `max_order`.
pub fn reconstruct_orders(
    v: &[f64],
    max_order: usize,
    tau: f64,
) -> Result<Vec<DerivativeEstimate>> {
    let tuning = self_tune(v, max_order, tau)?;
    reconstruct_orders_with(v, max_order, tau, tuning)
}

pub fn reconstruct_orders_with(
    v: &[f64],
    max_order: usize,
    tau: f64,
    tuning: Tuning,
) -> Result<Vec<DerivativeEstimate>> {
    check_inputs(v, max_order, tau)?;
    if tuning.local_order < max_order {
        return Err(Error::InvalidArgument(format!(
            "local order {} cannot provide derivative order {max_order}",
            tuning.local_order
        )));
    }
    let fits = local_fits(v, tuning)?;
    Ok((0..=max_order).map(|k| fits.estimate(k, tau)).collect())
}

/// Picks the window/order pair with the smallest predicted derivative error.
///
/// See [`tuning_score`]. Ties keep the earlier grid point, so the result
/// is deterministic.
pub fn self_tune(v: &[f64], order: usize, tau: f64) -> Result<Tuning> {
    check_inputs(v, order, tau)?;
    let grid = tuning_grid(order, v.len());
    let mut best: Option<(f64, Tuning)> = None;
    for tuning in &grid {
        let score = tuning_score(v, order, tau, *tuning)?;
        if !score.is_finite() {
            continue;
        }
        if best.is_none_or(|(s, _)| score < s) {
            best = Some((score, *tuning));
        }
    }
    match best {
        Some((_, t)) => Ok(t),
        // every score degenerate: largest feasible window
        None => grid.last().copied().ok_or(Error::SeriesTooShort {
            len: v.len(),
            order,
            min: min_series_len(order),
        }),
    }
}

/// Predicted mean squared error of the order-`order` derivative for a tuning:
/// the mean squared one-step-ahead prediction error of the local fit (each
/// window extrapolated to the sample just after it) times the noise
/// amplification of the order-`order` filter. Unlike a centred leave-one-out
/// residual, the extrapolated one also sees odd-degree misfit.
pub fn tuning_score(v: &[f64], order: usize, tau: f64, tuning: Tuning) -> Result<f64> {
    let h = tuning.half_window;
    let m = tuning.window_len();
    let stencil = Stencil::new(tuning, h)?;
    let ahead = (h + 1) as f64 / h as f64;
    let predictor: Vec<f64> = (0..m)
        .map(|j| {
            (0..=tuning.local_order)
                .map(|k| ahead.powi(k as i32) * stencil.pinv[(k, j)])
                .sum()
        })
        .collect();
    let mut sq: Vec<f64> = (m..v.len())
        .map(|i| {
            let pred: f64 = predictor.iter().zip(&v[i - m..i]).map(|(w, x)| w * x).sum();
            (v[i] - pred).powi(2)
        })
        .collect();
    sq.sort_by(f64::total_cmp);
    // the worst samples are trimmed downstream anyway; keep them out of the score
    let kept = &sq[..((sq.len() as f64 * SCORE_QUANTILE).ceil() as usize).max(1)];
    let mean_sq = kept.iter().sum::<f64>() / kept.len() as f64;
    let scale = factorial(order) / (h as f64 * tau).powi(order as i32);
    let amplification: f64 =
        stencil.pinv.row(order).iter().map(|w| w * w).sum::<f64>() * scale * scale;
    Ok(mean_sq * amplification)
}

/// Valid indices whose confidence does not exceed the `q`-quantile of the
/// confidence over valid samples.
pub fn trim(est: &DerivativeEstimate, q: f64) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("trim quantile {q} not in (0, 1]")));
    }
    let valid = est.valid_indices();
    if valid.is_empty() {
        return Err(Error::EmptyValidSet);
    }
    let mut conf: Vec<f64> = valid.iter().map(|&i| est.confidence[i]).collect();
    conf.sort_by(f64::total_cmp);
    let threshold = percentile_sorted(&conf, 100.0 * q);
    Ok(valid
        .into_iter()
        .filter(|&i| est.confidence[i] <= threshold)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn valid_values(est: &DerivativeEstimate) -> impl Iterator<Item = (usize, f64)> + '_ {
        est.valid_indices().into_iter().map(|i| (i, est.values[i]))
    }

    #[test]
    fn constant_has_zero_slope() {
        let v = vec![7.0; 200];
        let est = reconstruct(&v, 1, 0.01).unwrap();
        for (_, x) in valid_values(&est) {
            assert!(x.abs() <= 1e-9, "{x}");
        }
    }

    #[test]
    fn ramp_has_unit_slope() {
        let tau = 0.003;
        let v: Vec<f64> = (0..300).map(|k| k as f64 * tau).collect();
        let est = reconstruct(&v, 1, tau).unwrap();
        for (_, x) in valid_values(&est) {
            assert!((x - 1.0).abs() <= 1e-9, "{x}");
        }
    }

    #[test]
    fn sine_second_derivative_within_two_percent() {
        let tau = 0.003;
        let t: Vec<f64> = (0..1000).map(|k| k as f64 * tau).collect();
        let v: Vec<f64> = t.iter().map(|t| (2.0 * t).sin()).collect();
        let est = reconstruct(&v, 2, tau).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (i, x) in valid_values(&est) {
            let truth = -4.0 * (2.0 * t[i]).sin();
            num += (x - truth).powi(2);
            den += truth * truth;
        }
        assert!((num / den).sqrt() <= 0.02, "rel rms {}", (num / den).sqrt());
    }

    #[test]
    fn noisy_sine_third_derivative() {
        let tau = 0.003;
        let t: Vec<f64> = (0..1000).map(|k| k as f64 * tau).collect();
        let clean: Vec<f64> = t.iter().map(|t| (2.0 * t).sin()).collect();
        let mut sorted: Vec<f64> = clean.iter().map(|x| x.abs()).collect();
        sorted.sort_by(f64::total_cmp);
        let p99 = percentile_sorted(&sorted, 99.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let v: Vec<f64> = clean
            .iter()
            .map(|x| {
                let nu: f64 = StandardNormal.sample(&mut rng);
                x + 0.03 * p99 * nu
            })
            .collect();
        let est = reconstruct(&v, 3, tau).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (i, x) in valid_values(&est) {
            let truth = -8.0 * (2.0 * t[i]).cos();
            num += (x - truth).powi(2);
            den += truth * truth;
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 0.30, "rel rms {rel} with {:?}", est.tuning);
    }

    #[test]
    fn exact_on_polynomials_for_all_orders() {
        let tau = 0.01;
        let n = 400;
        // cubic in t, exact for every local order >= 3
        let poly = |t: f64| [2.0 - 0.5 * t + 0.3 * t * t - 0.2 * t.powi(3), -0.5 + 0.6 * t - 0.6 * t * t, 0.6 - 1.2 * t, -1.2, 0.0];
        let v: Vec<f64> = (0..n).map(|k| poly(k as f64 * tau)[0]).collect();
        for tuning in [
            Tuning { half_window: 5, local_order: 4 },
            Tuning { half_window: 20, local_order: 3 },
            Tuning { half_window: 40, local_order: 6 },
        ] {
            let ests = reconstruct_orders_with(&v, 3, tau, tuning).unwrap();
            for est in &ests {
                for (i, x) in valid_values(est) {
                    let truth = poly(i as f64 * tau)[est.order];
                    assert!(
                        (x - truth).abs() <= 1e-6 * truth.abs().max(1.0),
                        "order {} at {i}: {x} vs {truth}",
                        est.order
                    );
                }
            }
        }
    }

    #[test]
    fn estimator_is_linear_for_fixed_tuning() {
        let tau = 0.003;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v1: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
        let v2: Vec<f64> = (0..500).map(|k| (k as f64 * 0.01).cos()).collect();
        let (a, b) = (1.7, -0.4);
        let mix: Vec<f64> = v1.iter().zip(&v2).map(|(x, y)| a * x + b * y).collect();
        let tuning = Tuning { half_window: 20, local_order: 5 };
        for order in 0..=4 {
            let e1 = reconstruct_with(&v1, order, tau, tuning).unwrap();
            let e2 = reconstruct_with(&v2, order, tau, tuning).unwrap();
            let em = reconstruct_with(&mix, order, tau, tuning).unwrap();
            let scale = e1.values.iter().chain(&e2.values).fold(0.0f64, |m, x| m.max(x.abs()));
            for i in em.valid_indices() {
                let want = a * e1.values[i] + b * e2.values[i];
                assert!((em.values[i] - want).abs() <= 1e-9 * scale.max(1.0));
            }
        }
    }

    #[test]
    fn time_scaling_is_exact_power_of_two() {
        let v: Vec<f64> = (0..300).map(|k| (k as f64 * 0.02).sin() + 0.1 * k as f64).collect();
        let tuning = Tuning { half_window: 10, local_order: 5 };
        for order in 0..=4 {
            let a = reconstruct_with(&v, order, 0.003, tuning).unwrap();
            let b = reconstruct_with(&v, order, 0.006, tuning).unwrap();
            let factor = 0.5f64.powi(order as i32);
            for i in a.valid_indices() {
                assert!((b.values[i] - a.values[i] * factor).abs() <= 1e-9 * a.values[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v: Vec<f64> = (0..400).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert_eq!(reconstruct(&v, 2, 0.01).unwrap(), reconstruct(&v, 2, 0.01).unwrap());
    }

    #[test]
    fn shapes_and_mask() {
        let v: Vec<f64> = (0..120).map(|k| (k as f64 * 0.05).sin()).collect();
        let est = reconstruct(&v, 2, 0.05).unwrap();
        assert_eq!(est.values.len(), v.len());
        assert_eq!(est.confidence.len(), v.len());
        assert!(est.confidence.iter().all(|c| c.is_finite() && *c >= 0.0));
        let h = est.tuning.half_window;
        assert!(est.valid_mask[..h].iter().all(|&m| !m));
        assert!(est.valid_mask[v.len() - h..].iter().all(|&m| !m));
        assert!(est.valid_mask[h..v.len() - h].iter().all(|&m| m));
    }

    #[test]
    fn short_series_names_minimum() {
        let v = vec![0.0; 20];
        match reconstruct(&v, 1, 0.1) {
            Err(Error::SeriesTooShort { min, .. }) => assert_eq!(min, min_series_len(1)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(reconstruct(&vec![0.0; 40], 5, 0.1).is_err());
        assert!(reconstruct(&vec![0.0; 40], 1, 0.0).is_err());
        assert!(reconstruct(&[f64::NAN; 40], 1, 0.1).is_err());
    }

    #[test]
    fn tuner_prefers_exact_order_on_clean_cubic() {
        let tau = 0.01;
        let v: Vec<f64> = (0..500)
            .map(|k| {
                let t = k as f64 * tau;
                1.0 + t - 2.0 * t * t + 0.7 * t.powi(3)
            })
            .collect();
        let tuning = self_tune(&v, 1, tau).unwrap();
        assert!(tuning.local_order >= 3, "{tuning:?}");
    }

    #[test]
    fn tuner_widens_window_under_heavy_noise() {
        let tau = 0.01;
        let n = 1000;
        let clean: Vec<f64> = (0..n).map(|k| (2.0 * k as f64 * tau).sin()).collect();
        let noisy = |level: f64, seed: u64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            clean
                .iter()
                .map(|x| {
                    let nu: f64 = StandardNormal.sample(&mut rng);
                    x + level * nu
                })
                .collect()
        };
        let light = self_tune(&noisy(0.01, 1), 1, tau).unwrap();
        let heavy = self_tune(&noisy(0.30, 1), 1, tau).unwrap();
        assert!(
            heavy.half_window > light.half_window,
            "light {light:?} heavy {heavy:?}"
        );
    }

    #[test]
    fn minimum_length_has_single_candidate() {
        let order = 3;
        let n = min_series_len(order);
        let grid = tuning_grid(order, n);
        assert_eq!(grid.len(), 1, "{grid:?}");
        let v: Vec<f64> = (0..n).map(|k| (k as f64 * 0.1).sin()).collect();
        assert_eq!(self_tune(&v, order, 0.1).unwrap(), grid[0]);
    }

    fn with_confidence(conf: Vec<f64>, valid: Vec<bool>) -> DerivativeEstimate {
        DerivativeEstimate {
            order: 1,
            values: vec![0.0; conf.len()],
            confidence: conf,
            valid_mask: valid,
            tuning: Tuning { half_window: 1, local_order: 2 },
        }
    }

    #[test]
    fn trim_cases() {
        let est = with_confidence(vec![1.0, 2.0, 3.0, 4.0], vec![true; 4]);
        assert_eq!(trim(&est, 0.5).unwrap(), vec![0, 1]);
        assert_eq!(trim(&est, 1.0).unwrap(), vec![0, 1, 2, 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conf: Vec<f64> = (0..101).map(|_| StandardNormal.sample(&mut rng)).map(|x: f64| x.abs()).collect();
        let mut valid = vec![true; 101];
        valid[0] = false;
        valid[100] = false;
        let est = with_confidence(conf, valid);
        let half = trim(&est, 0.5).unwrap();
        assert!((half.len() as i64 - 50).abs() <= 1, "{}", half.len());
        assert!(!half.contains(&0) && !half.contains(&100));

        let none = with_confidence(vec![1.0; 3], vec![false; 3]);
        assert!(matches!(trim(&none, 0.5), Err(Error::EmptyValidSet)));
        assert!(trim(&est, 0.0).is_err());
        assert!(trim(&est, 1.5).is_err());
    }
}
