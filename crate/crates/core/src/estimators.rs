//! Diffusion estimates from raw curves, with statistical error bars.
//!
//! All reported coefficients use the normalized convention in which the
//! free particle gives D = 1: the Einstein route divides the fitted
//! mean-square-displacement slope by 2·d·N, and the Green-Kubo route
//! subtracts the discrete force-autocorrelation sum from 1 with prefactor
//! beta^2 dt / (d N). Statistical errors come from a delete-one-batch
//! jackknife over the replica batches carried by the curves; batches are
//! i.i.d. groups by construction, and the delete-d jackknife variance
//! `(1/B) sum_b ((M - w_b)/w_b) (theta_(-b) - mean)^2` reduces to the
//! classical delete-d formula for equal batch sizes.

use crate::dynamics::{steps_for_time, DynamicsParams};
use crate::ensemble::{BatchCurve, CorrelationCurve, MsdCurve};
use crate::model::SimulationBox;
use crate::sum::Kahan;
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("fit window must contain at least 2 points inside the curve")]
    BadWindow,
    #[error("time {tau} is outside the curve (have {have} steps of {dt})")]
    OutOfRange { tau: f64, have: usize, dt: f64 },
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("log-log fit needs strictly positive coordinates")]
    NonPositive,
    #[error("fit is degenerate: all abscissae equal")]
    Degenerate,
    #[error("curve is empty")]
    EmptyCurve,
    #[error("curve was produced at dt = {curve_dt}, parameters say {param_dt}")]
    MismatchedTimeStep { curve_dt: f64, param_dt: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    EinsteinSlope,
    EinsteinFinalTime,
    GreenKubo,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::EinsteinSlope => "einstein-slope",
            Method::EinsteinFinalTime => "einstein-final-time",
            Method::GreenKubo => "green-kubo",
        })
    }
}

/// A normalized self-diffusion estimate (free particle = 1) at one time step.
#[derive(Clone, Copy, Debug)]
pub struct DiffusionEstimate {
    pub value: f64,
    pub stat_err: f64,
    pub dt: f64,
    pub method: Method,
}

/// Affine extrapolation of a time-step sweep: D(dt) ~ D0 + D1 dt.
#[derive(Clone, Debug)]
pub struct SweepFit {
    pub d0: f64,
    pub d1: f64,
    /// Per-point residuals D_i - (D0 + D1 dt_i), in input order.
    pub residuals: Vec<f64>,
}

/// Delete-one-batch jackknife: apply `estimate` to the full mean curve and
/// to every leave-one-batch-out mean curve; the spread of the latter gives
/// the standard error. With fewer than two batches the error is reported
/// as 0 (there is nothing to resample).
fn jackknife(
    values: &[f64],
    batches: &[BatchCurve],
    replicas: usize,
    estimate: impl Fn(&[f64]) -> f64,
) -> (f64, f64) {
    let point = estimate(values);
    if batches.len() < 2 {
        return (point, 0.0);
    }
    let m = replicas as f64;
    let mut thetas = Vec::with_capacity(batches.len());
    let mut leave = vec![0.0; values.len()];
    for b in batches {
        let w = b.weight as f64;
        for (i, l) in leave.iter_mut().enumerate() {
            *l = (values[i] * m - b.values[i] * w) / (m - w);
        }
        thetas.push(estimate(&leave));
    }
    let k = thetas.len() as f64;
    let mean = thetas.iter().sum::<f64>() / k;
    let mut var = Kahan::new();
    for (theta, b) in thetas.iter().zip(batches) {
        let w = b.weight as f64;
        var.add((m - w) / w * (theta - mean) * (theta - mean));
    }
    (point, (var.value() / k).sqrt())
}

/// Standard error of the curve at every index, from the batch spread.
pub fn batch_point_errors(values: &[f64], batches: &[BatchCurve], replicas: usize) -> Vec<f64> {
    if batches.len() < 2 {
        return vec![0.0; values.len()];
    }
    let m = replicas as f64;
    let k = batches.len() as f64;
    (0..values.len())
        .map(|n| {
            let mut acc = Kahan::new();
            for b in batches {
                let d = b.values[n] - values[n];
                acc.add(b.weight as f64 * d * d);
            }
            (acc.value() / (m * (k - 1.0))).sqrt()
        })
        .collect()
}

fn check_dt(curve_dt: f64, p: &DynamicsParams) -> Result<(), EstimatorError> {
    if curve_dt != p.dt {
        return Err(EstimatorError::MismatchedTimeStep {
            curve_dt,
            param_dt: p.dt,
        });
    }
    Ok(())
}

/// Least-squares fit of the mean-square displacement against time, through
/// the origin, over the index window; D = slope / (2 d N).
pub fn msd_slope_fit(
    curve: &MsdCurve,
    cell: &SimulationBox,
    window: Range<usize>,
) -> Result<DiffusionEstimate, EstimatorError> {
    if window.end > curve.values.len() || window.len() < 2 {
        return Err(EstimatorError::BadWindow);
    }
    let dt = curve.dt;
    let norm = 2.0 * cell.dof() as f64;
    let window_start = window.start;
    let slope_over = move |vals: &[f64]| {
        let mut num = Kahan::new();
        let mut den = 0.0;
        for (off, &v) in vals[window.clone()].iter().enumerate() {
            let t = (window_start + off) as f64 * dt;
            num.add(t * v);
            den += t * t;
        }
        num.value() / den / norm
    };
    let (value, stat_err) = jackknife(&curve.values, &curve.batches, curve.replicas, slope_over);
    Ok(DiffusionEstimate {
        value,
        stat_err,
        dt,
        method: Method::EinsteinSlope,
    })
}

/// Single-time Einstein estimate: D = msd(tau) / (2 d N tau).
pub fn einstein_final_time(
    curve: &MsdCurve,
    cell: &SimulationBox,
    tau: f64,
) -> Result<DiffusionEstimate, EstimatorError> {
    let k = steps_for_time(tau, curve.dt);
    if k == 0 || k >= curve.values.len() {
        return Err(EstimatorError::OutOfRange {
            tau,
            have: curve.values.len() - 1,
            dt: curve.dt,
        });
    }
    let norm = 2.0 * cell.dof() as f64 * tau;
    let (value, stat_err) = jackknife(&curve.values, &curve.batches, curve.replicas, |vals| {
        vals[k] / norm
    });
    Ok(DiffusionEstimate {
        value,
        stat_err,
        dt: curve.dt,
        method: Method::EinsteinFinalTime,
    })
}

/// Quadrature rule for the discrete Green-Kubo time sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GkRule {
    /// Every term at full weight dt, including n = 0 — the production rule.
    Rectangle,
    /// Half weight on the first and last terms; kept for sensitivity
    /// studies only.
    Trapezoid,
}

/// Discrete Green-Kubo estimate:
/// D = 1 - (beta^2 dt / (d N)) * sum_n C_n with the rectangle rule.
pub fn green_kubo_sum(
    corr: &CorrelationCurve,
    cell: &SimulationBox,
    p: &DynamicsParams,
) -> Result<DiffusionEstimate, EstimatorError> {
    green_kubo_sum_rule(corr, cell, p, GkRule::Rectangle)
}

pub fn green_kubo_sum_rule(
    corr: &CorrelationCurve,
    cell: &SimulationBox,
    p: &DynamicsParams,
    rule: GkRule,
) -> Result<DiffusionEstimate, EstimatorError> {
    if corr.values.is_empty() {
        return Err(EstimatorError::EmptyCurve);
    }
    check_dt(corr.dt, p)?;
    let prefactor = p.beta * p.beta * p.dt / cell.dof() as f64;
    let last = corr.values.len() - 1;
    let sum_rule = move |vals: &[f64]| {
        let mut acc = Kahan::new();
        for (n, &c) in vals.iter().enumerate() {
            let w = match rule {
                GkRule::Rectangle => 1.0,
                GkRule::Trapezoid if n == 0 || n == last => 0.5,
                GkRule::Trapezoid => 1.0,
            };
            acc.add(w * c);
        }
        1.0 - prefactor * acc.value()
    };
    let (value, stat_err) = jackknife(&corr.values, &corr.batches, corr.samples, sum_rule);
    Ok(DiffusionEstimate {
        value,
        stat_err,
        dt: corr.dt,
        method: Method::GreenKubo,
    })
}

/// Least-squares slope of log(y) against log(x).
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64, EstimatorError> {
    if points.len() < 2 {
        return Err(EstimatorError::TooFewPoints {
            need: 2,
            got: points.len(),
        });
    }
    if points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(EstimatorError::NonPositive);
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let fit = affine_fit(&logs)?;
    Ok(fit.d1)
}

/// Ordinary least squares of y against x: y ~ d0 + d1 x.
pub fn affine_fit(points: &[(f64, f64)]) -> Result<SweepFit, EstimatorError> {
    if points.len() < 2 {
        return Err(EstimatorError::TooFewPoints {
            need: 2,
            got: points.len(),
        });
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let scale: f64 = points.iter().map(|p| p.0 * p.0).sum::<f64>().max(1e-300);
    if sxx <= 1e-24 * scale {
        return Err(EstimatorError::Degenerate);
    }
    let d1 = sxy / sxx;
    let d0 = my - d1 * mx;
    let residuals = points.iter().map(|&(x, y)| y - (d0 + d1 * x)).collect();
    Ok(SweepFit { d0, d1, residuals })
}

/// Propagate known per-point standard errors through the OLS intercept and
/// slope: returns (d0_err, d1_err). The intercept is the statistic of
/// interest when extrapolating a time-step sweep to dt = 0.
pub fn affine_fit_errors(
    points: &[(f64, f64)],
    sigmas: &[f64],
) -> Result<(f64, f64), EstimatorError> {
    if points.len() != sigmas.len() {
        return Err(EstimatorError::TooFewPoints {
            need: points.len(),
            got: sigmas.len(),
        });
    }
    // Reuse the validity checks (degenerate abscissae, point count).
    affine_fit(points)?;
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let mut var0 = 0.0;
    let mut var1 = 0.0;
    for (&(x, _), &s) in points.iter().zip(sigmas) {
        let c1 = (x - mx) / sxx;
        let c0 = 1.0 / n - mx * c1;
        var0 += c0 * c0 * s * s;
        var1 += c1 * c1 * s * s;
    }
    Ok((var0.sqrt(), var1.sqrt()))
}

/// Standard error of a mean over independent replica values:
/// sample standard deviation / sqrt(M).
pub fn replica_stat_error(per_replica: &[f64]) -> Result<f64, EstimatorError> {
    if per_replica.len() < 2 {
        return Err(EstimatorError::TooFewPoints {
            need: 2,
            got: per_replica.len(),
        });
    }
    let m = per_replica.len() as f64;
    let mean = per_replica.iter().sum::<f64>() / m;
    let mut acc = Kahan::new();
    for &v in per_replica {
        acc.add((v - mean) * (v - mean));
    }
    Ok((acc.value() / (m - 1.0)).sqrt() / m.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::RngStream;

    fn synthetic_msd(dt: f64, values: Vec<f64>, n_batches: usize) -> MsdCurve {
        // Identical batches: the jackknife spread is exactly zero.
        let batches = (0..n_batches)
            .map(|_| BatchCurve {
                weight: 10,
                values: values.clone(),
            })
            .collect();
        MsdCurve {
            dt,
            replicas: 10 * n_batches,
            values,
            batches,
        }
    }

    fn unit_cell() -> SimulationBox {
        SimulationBox::new(1.0, 1, 1).unwrap()
    }

    #[test]
    fn slope_fit_recovers_the_free_particle_line() {
        let dt = 0.01;
        let values: Vec<f64> = (0..=100).map(|n| 2.0 * n as f64 * dt).collect();
        let curve = synthetic_msd(dt, values, 4);
        let est = msd_slope_fit(&curve, &unit_cell(), 0..101).unwrap();
        assert!((est.value - 1.0).abs() < 1e-14);
        assert_eq!(est.stat_err, 0.0);
        assert_eq!(est.method, Method::EinsteinSlope);
    }

    #[test]
    fn slope_fit_of_a_zero_curve_is_zero() {
        let curve = synthetic_msd(0.01, vec![0.0; 101], 4);
        let est = msd_slope_fit(&curve, &unit_cell(), 0..101).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn slope_fit_rejects_bad_windows() {
        let curve = synthetic_msd(0.01, vec![0.0; 101], 4);
        assert!(msd_slope_fit(&curve, &unit_cell(), 5..6).is_err());
        assert!(msd_slope_fit(&curve, &unit_cell(), 0..500).is_err());
    }

    #[test]
    fn slope_fit_recovers_a_noisy_synthetic_slope() {
        // Per-replica curves v_m(t) = s t + noise, assembled into batches the
        // same way the ensemble layer would.
        let mut rng = RngStream::new(123, 0);
        let (dt, n_pts, m, s) = (0.01, 200usize, 2000usize, 3.4);
        let per_batch = 50;
        let mut batches = Vec::new();
        let mut totals = vec![0.0; n_pts + 1];
        for _ in 0..m / per_batch {
            let mut sums = vec![0.0; n_pts + 1];
            for _ in 0..per_batch {
                for (n, sum) in sums.iter_mut().enumerate().skip(1) {
                    let t = n as f64 * dt;
                    *sum += s * t + 0.3 * rng.standard_normal();
                }
            }
            for (t, s_) in totals.iter_mut().zip(&sums) {
                *t += s_;
            }
            batches.push(BatchCurve {
                weight: per_batch,
                values: sums.iter().map(|x| x / per_batch as f64).collect(),
            });
        }
        let curve = MsdCurve {
            dt,
            replicas: m,
            values: totals.iter().map(|x| x / m as f64).collect(),
            batches,
        };
        let est = msd_slope_fit(&curve, &unit_cell(), 0..n_pts + 1).unwrap();
        assert!(est.stat_err > 0.0);
        assert!(
            (est.value - s / 2.0).abs() <= 3.0 * est.stat_err,
            "fit {} vs truth {} (se {})",
            est.value,
            s / 2.0,
            est.stat_err
        );
    }

    #[test]
    fn final_time_estimate_substitutes_directly() {
        let dt = 0.01;
        let tau = 0.5;
        let cell = SimulationBox::new(4.0, 3, 5).unwrap();
        // msd(tau) = 6 N tau with d = 3 gives D = 1.
        let k = steps_for_time(tau, dt);
        let mut values = vec![0.0; 101];
        values[k] = 6.0 * 5.0 * tau;
        let curve = synthetic_msd(dt, values, 3);
        let est = einstein_final_time(&curve, &cell, tau).unwrap();
        assert!((est.value - 1.0).abs() < 1e-14);
        assert_eq!(est.method, Method::EinsteinFinalTime);

        let zero = synthetic_msd(dt, vec![0.0; 101], 3);
        assert_eq!(einstein_final_time(&zero, &cell, tau).unwrap().value, 0.0);
        assert!(einstein_final_time(&zero, &cell, 5.0).is_err());
    }

    #[test]
    fn final_time_and_slope_agree_on_exact_linear_data() {
        let dt = 0.002;
        let values: Vec<f64> = (0..=1000).map(|n| 0.7 * n as f64 * dt).collect();
        let curve = synthetic_msd(dt, values, 4);
        let cell = unit_cell();
        let a = msd_slope_fit(&curve, &cell, 0..1001).unwrap().value;
        let b = einstein_final_time(&curve, &cell, 1.0).unwrap().value;
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    fn synthetic_corr(dt: f64, values: Vec<f64>) -> CorrelationCurve {
        let batches = (0..3)
            .map(|_| BatchCurve {
                weight: 7,
                values: values.clone(),
            })
            .collect();
        CorrelationCurve {
            dt,
            samples: 21,
            values,
            batches,
        }
    }

    #[test]
    fn green_kubo_of_zero_correlation_is_exactly_one() {
        let corr = synthetic_corr(0.01, vec![0.0; 31]);
        let p = DynamicsParams::new(1.0, 0.01).unwrap();
        let est = green_kubo_sum(&corr, &unit_cell(), &p).unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.method, Method::GreenKubo);
    }

    #[test]
    fn green_kubo_single_term_and_trapezoid_weighting() {
        let c0 = 2.75;
        let mut values = vec![0.0; 4];
        values[0] = c0;
        let corr = synthetic_corr(0.1, values);
        let p = DynamicsParams::new(1.0, 0.1).unwrap();
        let rect = green_kubo_sum(&corr, &unit_cell(), &p).unwrap();
        assert!((rect.value - (1.0 - 0.1 * c0)).abs() < 1e-15);
        let trap = green_kubo_sum_rule(&corr, &unit_cell(), &p, GkRule::Trapezoid).unwrap();
        assert!((trap.value - (1.0 - 0.05 * c0)).abs() < 1e-15);

        let wrong_dt = DynamicsParams::new(1.0, 0.2).unwrap();
        assert!(green_kubo_sum(&corr, &unit_cell(), &wrong_dt).is_err());
    }

    #[test]
    fn loglog_slope_reads_off_exact_power_laws() {
        let pts: Vec<(f64, f64)> = [1e-3, 2e-3, 5e-3, 1e-2]
            .iter()
            .map(|&dt: &f64| (dt, 0.37 * dt.powf(1.5)))
            .collect();
        assert!((loglog_slope(&pts).unwrap() - 1.5).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = [1e-3, 2e-3, 5e-3].iter().map(|&dt| (dt, 0.4)).collect();
        assert!(loglog_slope(&flat).unwrap().abs() < 1e-12);
        assert!(loglog_slope(&[(0.1, -1.0), (0.2, 1.0)]).is_err());
        assert!(loglog_slope(&[(0.1, 1.0)]).is_err());
    }

    #[test]
    fn affine_fit_is_exact_on_affine_data() {
        let pts: Vec<(f64, f64)> = [0.002, 0.005, 0.01, 0.02]
            .iter()
            .map(|&dt| (dt, 0.6 + 2.0 * dt))
            .collect();
        let fit = affine_fit(&pts).unwrap();
        assert!((fit.d0 - 0.6).abs() < 1e-12);
        assert!((fit.d1 - 2.0).abs() < 1e-12);
        assert_eq!(fit.residuals.len(), 4);
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-12));

        let constant: Vec<(f64, f64)> = pts.iter().map(|&(x, _)| (x, 0.9)).collect();
        assert!(affine_fit(&constant).unwrap().d1.abs() < 1e-12);

        let degenerate = vec![(0.01, 1.0), (0.01, 2.0)];
        assert!(matches!(
            affine_fit(&degenerate),
            Err(EstimatorError::Degenerate)
        ));
    }

    #[test]
    fn affine_fit_recovers_a_noisy_intercept() {
        let mut rng = RngStream::new(77, 0);
        let truth = 0.62;
        let sigma = 0.004;
        let pts: Vec<(f64, f64)> = [0.002f64, 0.005, 0.01, 0.02]
            .iter()
            .map(|&dt| (dt, truth + 1.8 * dt + sigma * rng.standard_normal()))
            .collect();
        let fit = affine_fit(&pts).unwrap();
        let (d0_err, d1_err) = affine_fit_errors(&pts, &[sigma; 4]).unwrap();
        assert!(d1_err > 0.0);
        assert!(
            (fit.d0 - truth).abs() <= 3.0 * d0_err,
            "d0 {} vs {truth} (err {d0_err})",
            fit.d0
        );
    }

    #[test]
    fn replica_error_matches_hand_computations() {
        assert_eq!(replica_stat_error(&[1.5, 1.5, 1.5]).unwrap(), 0.0);
        assert!((replica_stat_error(&[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(replica_stat_error(&[1.0]).is_err());

        let mut rng = RngStream::new(314, 0);
        let draws: Vec<f64> = (0..10_000).map(|_| rng.standard_normal()).collect();
        let se = replica_stat_error(&draws).unwrap();
        assert!(
            (se - 0.01).abs() < 0.001,
            "standard error of 10^4 unit normals should be near 0.01, got {se}"
        );
    }

    #[test]
    fn batch_point_errors_scale_like_the_spread() {
        let values = vec![1.0, 2.0];
        let batches = vec![
            BatchCurve {
                weight: 10,
                values: vec![0.9, 1.8],
            },
            BatchCurve {
                weight: 10,
                values: vec![1.1, 2.2],
            },
        ];
        let errs = batch_point_errors(&values, &batches, 20);
        // Two equal batches of 10 with means v +- delta: the sample variance
        // of the batch means is 2 delta^2 (denominator B - 1 = 1), so the
        // standard error of the overall mean is sqrt(2 delta^2 / B) = delta.
        assert!((errs[0] - 0.1).abs() < 1e-12);
        assert!((errs[1] - 0.2).abs() < 1e-12);
    }
}
