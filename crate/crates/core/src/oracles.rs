//! Semi-analytic references for the one-dimensional systems.
//!
//! Two independent routes to the continuous-limit diffusion coefficient:
//!
//! * [`lifson_jackson_1d`]: the classical homogenization closed form
//!   `D = 1 / (<e^{beta V}> <e^{-beta V}>)` with uniform averages, evaluated
//!   by trapezoidal quadrature (spectrally accurate on a periodic grid).
//! * [`poisson_gk_oracle_1d`]: solve the Poisson equation
//!   `Phi'' - beta V' Phi' = -V'` with periodic boundary and zero-mean
//!   gauge by centered second-order finite differences, then integrate the
//!   Green-Kubo identity `D = 1 - beta^2 <Phi V'>_mu`.
//!
//! They share no code path past the potential itself, so their agreement
//! validates both. The module also provides the Gibbs density on a grid
//! (for histogram exactness tests) and the rejection-rate diagnostics
//! [`xi`] / [`xi_bar_average`]: the Metropolized scheme rejects with
//! probability `dt^{3/2} <xibar>_mu + O(dt^2)`, where
//! `xi(q, G) = -(sqrt2/6) V'''(q) G^3 + (sqrt2/2) V'(q) V''(q) G` and
//! `xibar(q) = E_G[max(0, xi)]`.

use crate::dynamics::RngStream;
use crate::model::Scalar1D;
use crate::sum::{kahan_mean, kahan_sum, Kahan};
use thiserror::Error;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("grid needs at least 16 nodes, got {0}")]
    GridTooCoarse(usize),
    #[error("potential evaluated non-finite at q = {0}")]
    NonFiniteValue(f64),
    #[error("finite-difference system is singular (pivot {0:.3e})")]
    SingularSystem(f64),
    #[error("period must be positive and finite, got {0}")]
    BadPeriod(f64),
    #[error("Monte Carlo sample count must be at least 10^4, got {0}")]
    TooFewSamples(usize),
}

/// Values of a periodic function on the uniform grid q_i = i L / n.
#[derive(Clone, Debug)]
pub struct GridFunction1D {
    pub length: f64,
    pub values: Vec<f64>,
}

impl GridFunction1D {
    pub fn n_grid(&self) -> usize {
        self.values.len()
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.values.len() as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        i as f64 * self.spacing()
    }

    /// Trapezoidal integral over one period. On a periodic uniform grid the
    /// trapezoidal rule collapses to spacing times the node sum.
    pub fn integrate(&self) -> f64 {
        self.spacing() * kahan_sum(&self.values)
    }
}

fn check_grid(n_grid: usize, length: f64) -> Result<(), OracleError> {
    if n_grid < 16 {
        return Err(OracleError::GridTooCoarse(n_grid));
    }
    if !(length.is_finite() && length > 0.0) {
        return Err(OracleError::BadPeriod(length));
    }
    Ok(())
}

/// Continuous-limit diffusion by the homogenization closed form:
/// `1 / (<e^{beta V}> <e^{-beta V}>)`, uniform averages over one period.
pub fn lifson_jackson_1d(
    v: impl Fn(f64) -> f64,
    beta: f64,
    length: f64,
    n_grid: usize,
) -> Result<f64, OracleError> {
    check_grid(n_grid, length)?;
    let h = length / n_grid as f64;
    let mut plus = Kahan::new();
    let mut minus = Kahan::new();
    for i in 0..n_grid {
        let q = i as f64 * h;
        let val = v(q);
        if !val.is_finite() {
            return Err(OracleError::NonFiniteValue(q));
        }
        plus.add((beta * val).exp());
        minus.add((-beta * val).exp());
    }
    let n = n_grid as f64;
    Ok(1.0 / ((plus.value() / n) * (minus.value() / n)))
}

/// Gibbs density e^{-beta V} / Z on the grid, normalized so that its
/// trapezoidal integral is 1.
pub fn gibbs_density_1d(
    v: impl Fn(f64) -> f64,
    beta: f64,
    length: f64,
    n_grid: usize,
) -> Result<GridFunction1D, OracleError> {
    check_grid(n_grid, length)?;
    let h = length / n_grid as f64;
    let mut values = Vec::with_capacity(n_grid);
    for i in 0..n_grid {
        let q = i as f64 * h;
        let val = v(q);
        if !val.is_finite() {
            return Err(OracleError::NonFiniteValue(q));
        }
        values.push((-beta * val).exp());
    }
    let z = h * kahan_sum(&values);
    for x in &mut values {
        *x /= z;
    }
    Ok(GridFunction1D { length, values })
}

/// Probability mass of each of `n_bins` equal bins under the Gibbs measure,
/// by composite trapezoid with `subdiv` intervals per bin. Masses are
/// normalized to sum to exactly 1; used as the reference for histogram
/// comparisons.
pub fn gibbs_bin_masses(
    v: impl Fn(f64) -> f64,
    beta: f64,
    length: f64,
    n_bins: usize,
    subdiv: usize,
) -> Vec<f64> {
    let h = length / (n_bins * subdiv) as f64;
    let mut masses = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let mut acc = Kahan::new();
        for s in 0..=subdiv {
            let q = (b * subdiv + s) as f64 * h;
            let w = if s == 0 || s == subdiv { 0.5 } else { 1.0 };
            acc.add(w * (-beta * v(q)).exp());
        }
        masses.push(acc.value() * h);
    }
    let total = kahan_sum(&masses);
    for m in &mut masses {
        *m /= total;
    }
    masses
}

/// Solve a tridiagonal system in place by the Thomas algorithm.
/// `lower[i]` multiplies x[i-1] in row i, `upper[i]` multiplies x[i+1].
fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>, OracleError> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = diag[0];
    if pivot.abs() < 1e-300 {
        return Err(OracleError::SingularSystem(pivot));
    }
    c[0] = upper[0] / pivot;
    d[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i] * c[i - 1];
        if pivot.abs() < 1e-300 {
            return Err(OracleError::SingularSystem(pivot));
        }
        c[i] = upper[i] / pivot;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / pivot;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        let next = x[i + 1];
        x[i] -= c[i] * next;
    }
    Ok(x)
}

/// Continuous-limit diffusion through the Green-Kubo identity and a
/// finite-difference Poisson solve, independent of [`lifson_jackson_1d`].
///
/// The generator equation `L Phi = -V'` with `L = d^2/dq^2 - beta V' d/dq`
/// is discretized in conservative form,
/// `(a Phi')' = -beta V' e^{-beta V} / beta` with `a = e^{-beta V}` sampled
/// at cell midpoints, which is the standard centered second-order scheme and
/// yields a symmetric system. The constant nullspace is removed by pinning
/// one node and restoring the zero-mean gauge afterwards; the right-hand
/// side is projected onto mean zero for solvability. Finally
/// `D = 1 - beta^2 <Phi V'>_mu` by quadrature.
pub fn poisson_gk_oracle_1d(
    pot: &impl Scalar1D,
    beta: f64,
    length: f64,
    n_grid: usize,
) -> Result<f64, OracleError> {
    check_grid(n_grid, length)?;
    let n = n_grid;
    let h = length / n as f64;

    // Node data: weight e^{-beta V}, force -V'; midpoint conductivities.
    let mut weight = vec![0.0; n];
    let mut dv = vec![0.0; n];
    let mut a_mid = vec![0.0; n]; // a_mid[i] = e^{-beta V(q_i + h/2)}
    for i in 0..n {
        let q = i as f64 * h;
        let vq = pot.v(q);
        let dvq = pot.dv(q);
        let vm = pot.v(q + 0.5 * h);
        if !(vq.is_finite() && dvq.is_finite() && vm.is_finite()) {
            return Err(OracleError::NonFiniteValue(q));
        }
        weight[i] = (-beta * vq).exp();
        dv[i] = dvq;
        a_mid[i] = (-beta * vm).exp();
    }

    // rhs g_i = -V'(q_i) e^{-beta V(q_i)}, projected to zero mean so the
    // singular periodic system is compatible.
    let mut g: Vec<f64> = (0..n).map(|i| -dv[i] * weight[i]).collect();
    let g_mean = kahan_mean(&g);
    for x in &mut g {
        *x -= g_mean;
    }

    // Pin Phi_0 = 0 and solve rows 1..n-1; the dropped row is implied by the
    // compatibility projection. Row i: a_{i-1/2} Phi_{i-1}
    // - (a_{i-1/2} + a_{i+1/2}) Phi_i + a_{i+1/2} Phi_{i+1} = h^2 g_i,
    // where a_{i-1/2} = a_mid[i-1].
    let m = n - 1;
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    for row in 0..m {
        let i = row + 1;
        lower[row] = a_mid[i - 1];
        diag[row] = -(a_mid[i - 1] + a_mid[i]);
        upper[row] = a_mid[i];
        rhs[row] = h * h * g[i];
    }
    // Neighbors that refer to the pinned node contribute nothing.
    lower[0] = 0.0;
    upper[m - 1] = 0.0;
    let inner = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;

    let mut phi = Vec::with_capacity(n);
    phi.push(0.0);
    phi.extend_from_slice(&inner);
    let phi_mean = kahan_mean(&phi);
    for x in &mut phi {
        *x -= phi_mean;
    }

    // D = 1 - beta^2 * (sum Phi V' w) / (sum w); the grid spacing cancels.
    let mut num = Kahan::new();
    let mut den = Kahan::new();
    for i in 0..n {
        num.add(phi[i] * dv[i] * weight[i]);
        den.add(weight[i]);
    }
    Ok(1.0 - beta * beta * num.value() / den.value())
}

/// Leading rejection integrand of the Metropolized scheme (unit inverse
/// temperature convention): the acceptance exponent satisfies
/// `alpha = dt^{3/2} xi(q, G) + O(dt^2)` along a proposal with noise G.
pub fn xi(pot: &impl Scalar1D, q: f64, g: f64) -> f64 {
    -(SQRT_2 / 6.0) * pot.d3v(q) * g * g * g + (SQRT_2 / 2.0) * pot.dv(q) * pot.d2v(q) * g
}

/// Result of the xi-bar Gibbs average with its Monte Carlo error.
#[derive(Clone, Copy, Debug)]
pub struct XiBarEstimate {
    pub value: f64,
    pub std_err: f64,
}

/// Seed for the common-random-numbers Gaussian draws when none is supplied.
const XI_BAR_SEED: u64 = 0x5eed_0fc0_ffee;

/// `<xibar>_mu` where `xibar(q) = E_G[max(0, xi(q, G))]`: the prefactor in
/// the `dt^{3/2}` law for the average rejection rate.
///
/// For beta != 1 the potential is rescaled to beta V first (the xi formula
/// is stated at unit inverse temperature), and the Gibbs weight uses the
/// same rescaled potential. The Gaussian expectation uses `n_mc` common
/// random numbers across all grid nodes; the reported standard error is the
/// spread of the per-draw Gibbs averages.
pub fn xi_bar_average(
    pot: &impl Scalar1D,
    beta: f64,
    n_mc: usize,
    n_grid: usize,
    length: f64,
) -> Result<f64, OracleError> {
    Ok(xi_bar_average_seeded(pot, beta, n_mc, n_grid, length, XI_BAR_SEED)?.value)
}

pub fn xi_bar_average_seeded(
    pot: &impl Scalar1D,
    beta: f64,
    n_mc: usize,
    n_grid: usize,
    length: f64,
    seed: u64,
) -> Result<XiBarEstimate, OracleError> {
    check_grid(n_grid, length)?;
    if n_mc < 10_000 {
        return Err(OracleError::TooFewSamples(n_mc));
    }
    let h = length / n_grid as f64;

    // Per-node cubic and linear coefficients of xi for the rescaled
    // potential beta V, and normalized Gibbs masses.
    let mut cubic = vec![0.0; n_grid];
    let mut linear = vec![0.0; n_grid];
    let mut mass = vec![0.0; n_grid];
    for i in 0..n_grid {
        let q = i as f64 * h;
        let (v, dv, d2v, d3v) = (pot.v(q), pot.dv(q), pot.d2v(q), pot.d3v(q));
        if !(v.is_finite() && dv.is_finite() && d2v.is_finite() && d3v.is_finite()) {
            return Err(OracleError::NonFiniteValue(q));
        }
        cubic[i] = -(SQRT_2 / 6.0) * beta * d3v;
        linear[i] = (SQRT_2 / 2.0) * beta * beta * dv * d2v;
        mass[i] = (-beta * v).exp();
    }
    let total_mass = kahan_sum(&mass);
    for m in &mut mass {
        *m /= total_mass;
    }

    // One Gibbs-averaged positive part per Gaussian draw; mean and spread
    // over draws give the estimate and its standard error.
    let mut rng = RngStream::new(seed, 0);
    let mut mean = Kahan::new();
    let mut mean_sq = Kahan::new();
    for _ in 0..n_mc {
        let g = rng.standard_normal();
        let g3 = g * g * g;
        let mut draw = Kahan::new();
        for i in 0..n_grid {
            let x = cubic[i] * g3 + linear[i] * g;
            if x > 0.0 {
                draw.add(mass[i] * x);
            }
        }
        let y = draw.value();
        mean.add(y);
        mean_sq.add(y * y);
    }
    let n = n_mc as f64;
    let value = mean.value() / n;
    let var = (mean_sq.value() / n - value * value).max(0.0);
    Ok(XiBarEstimate {
        value,
        std_err: (var / n).sqrt(),
    })
}
