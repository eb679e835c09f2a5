//! Time stepping: bare and Metropolized Euler-Maruyama.
//!
//! One step of the bare scheme reads
//! `q' = q - beta dt grad V(q) + sqrt(2 dt) G`, with `G` standard normal.
//! The Metropolized variant accepts `q'` with probability `min(1, e^-alpha)`
//! and repeats the state otherwise, which restores the Gibbs measure exactly
//! at any time step. Displacement increments of accepted moves are
//! accumulated on the unwrapped lift of the trajectory; only the wrapped
//! representative is folded back into the box.
//!
//! The acceptance exponent is evaluated in the expanded form
//!
//! ```text
//! alpha = beta [V(q') - V(q)]
//!       - beta/2 <q' - q, grad V(q') + grad V(q)>
//!       + beta^2 dt / 4 (|grad V(q')|^2 - |grad V(q)|^2)
//! ```
//!
//! rather than as a ratio of transition densities: the ratio form subtracts
//! two O(1/dt) quantities and loses most of its precision exactly in the
//! small-dt regime this crate is meant to study. The ratio form is kept as
//! [`log_acceptance_ratio_form`] for cross-checking.
//!
//! RNG discipline: every step consumes exactly `dim * particles` standard
//! normals followed by one uniform, for both schemes, so that a bare and a
//! Metropolized chain driven by the same stream stay step-for-step identical
//! until the first rejection. Normals come from the ziggurat sampler of
//! `rand_distr::StandardNormal`; the generator is ChaCha8 with one
//! counter-based stream per replica, so streams are independent and the
//! sequence depends only on (seed, stream).

use crate::model::{fold, Configuration, ModelError, PotentialModel, SimulationBox};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("time step must be positive and finite, got {0}")]
    BadDt(f64),
    #[error("inverse temperature must be positive and finite, got {0}")]
    BadBeta(f64),
    #[error("non-finite position encountered")]
    NonFinite,
    #[error("potential evaluation failed: {0}")]
    Potential(#[from] ModelError),
}

/// Inverse temperature and time step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicsParams {
    pub beta: f64,
    pub dt: f64,
}

impl DynamicsParams {
    pub fn new(beta: f64, dt: f64) -> Result<Self, DynamicsError> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(DynamicsError::BadBeta(beta));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(DynamicsError::BadDt(dt));
        }
        Ok(Self { beta, dt })
    }
}

/// Number of steps covering a time horizon: floor(tau / dt), with a small
/// relative nudge so that horizons meant to be exact multiples of dt do not
/// fall one step short through decimal-to-binary rounding.
pub fn steps_for_time(tau: f64, dt: f64) -> usize {
    ((tau / dt) * (1.0 + 1e-12)).floor() as usize
}

/// Seeded random stream. Replica streams use the ChaCha stream counter, so
/// any number of replicas draw from provably disjoint sequences of one keyed
/// generator.
#[derive(Clone, Debug)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    /// Stream `stream_id` of the generator keyed by `seed`.
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { rng }
    }

    /// Stream used for replica `index` during production runs.
    pub fn replica(seed: u64, index: u64) -> Self {
        Self::new(seed, index.wrapping_add(1))
    }

    /// Stream used for sequential replica preparation and burn-in.
    pub fn preparation(seed: u64) -> Self {
        Self::new(seed, 0)
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    #[inline]
    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.rng.sample(StandardNormal);
        }
    }

    /// Uniform on [0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

/// Euler-Maruyama proposal on the unwrapped lift:
/// `q - beta dt gradV + sqrt(2 dt) G`.
pub fn em_proposal(q: &[f64], grad_v: &[f64], p: &DynamicsParams, noise: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    em_proposal_into(q, grad_v, p, noise, &mut out);
    out
}

#[inline]
fn em_proposal_into(q: &[f64], grad_v: &[f64], p: &DynamicsParams, noise: &[f64], out: &mut [f64]) {
    let drift = -p.beta * p.dt;
    let spread = (2.0 * p.dt).sqrt();
    for i in 0..q.len() {
        out[i] = q[i] + drift * grad_v[i] + spread * noise[i];
    }
}

/// The expanded acceptance exponent, given both endpoint evaluations.
/// `delta` must be the proposal displacement `q' - q` on the unwrapped lift.
/// Returns -alpha, the log of the acceptance ratio capped at 0 by the caller.
#[inline]
fn neg_alpha(
    p: &DynamicsParams,
    delta: &[f64],
    e_cur: f64,
    g_cur: &[f64],
    e_prop: f64,
    g_prop: &[f64],
) -> f64 {
    let mut inner = 0.0;
    let mut grad_sq_diff = 0.0;
    for i in 0..delta.len() {
        inner += delta[i] * (g_prop[i] + g_cur[i]);
        grad_sq_diff += g_prop[i] * g_prop[i] - g_cur[i] * g_cur[i];
    }
    let alpha = p.beta * (e_prop - e_cur) - 0.5 * p.beta * inner
        + 0.25 * p.beta * p.beta * p.dt * grad_sq_diff;
    -alpha
}

/// Log of the Metropolis acceptance ratio for the move `q -> q_prop`
/// (both unwrapped), evaluated through the expanded exponent.
pub fn log_acceptance(
    cell: &SimulationBox,
    q: &[f64],
    q_prop: &[f64],
    pot: &impl PotentialModel,
    p: &DynamicsParams,
) -> Result<f64, DynamicsError> {
    let n = cell.dof();
    assert_eq!(q.len(), n);
    assert_eq!(q_prop.len(), n);
    let mut wrapped = vec![0.0; n];
    let mut g_cur = vec![0.0; n];
    let mut g_prop = vec![0.0; n];
    for i in 0..n {
        if !q[i].is_finite() || !q_prop[i].is_finite() {
            return Err(DynamicsError::NonFinite);
        }
        wrapped[i] = fold(cell.length(), q[i]);
    }
    let e_cur = pot.energy_gradient_into(cell, &wrapped, &mut g_cur)?;
    for i in 0..n {
        wrapped[i] = fold(cell.length(), q_prop[i]);
    }
    let e_prop = pot.energy_gradient_into(cell, &wrapped, &mut g_prop)?;
    let delta: Vec<f64> = q_prop.iter().zip(q).map(|(a, b)| a - b).collect();
    Ok(neg_alpha(p, &delta, e_cur, &g_cur, e_prop, &g_prop))
}

/// Same quantity as [`log_acceptance`], computed the direct way as
/// `log[e^{-beta V(q')} T(q', q)] - log[e^{-beta V(q)} T(q, q')]` with the
/// Gaussian transition densities written out. Numerically ill-conditioned at
/// small dt (it subtracts O(1/dt) terms); exists to cross-check the expanded
/// form, not for production stepping.
pub fn log_acceptance_ratio_form(
    cell: &SimulationBox,
    q: &[f64],
    q_prop: &[f64],
    pot: &impl PotentialModel,
    p: &DynamicsParams,
) -> Result<f64, DynamicsError> {
    let n = cell.dof();
    let mut wrapped = vec![0.0; n];
    let mut g_cur = vec![0.0; n];
    let mut g_prop = vec![0.0; n];
    for i in 0..n {
        wrapped[i] = fold(cell.length(), q[i]);
    }
    let e_cur = pot.energy_gradient_into(cell, &wrapped, &mut g_cur)?;
    for i in 0..n {
        wrapped[i] = fold(cell.length(), q_prop[i]);
    }
    let e_prop = pot.energy_gradient_into(cell, &wrapped, &mut g_prop)?;
    // |q - q' + beta dt gradV(q')|^2 / (4 dt): reverse-move exponent.
    let mut fwd = 0.0;
    let mut rev = 0.0;
    for i in 0..n {
        let f = q_prop[i] - q[i] + p.beta * p.dt * g_cur[i];
        let r = q[i] - q_prop[i] + p.beta * p.dt * g_prop[i];
        fwd += f * f;
        rev += r * r;
    }
    Ok((-p.beta * e_prop - rev / (4.0 * p.dt)) - (-p.beta * e_cur - fwd / (4.0 * p.dt)))
}

/// Accumulated unwrapped displacement state: the current lift Q and its
/// initial value Q0. Q is never reprojected into the box.
#[derive(Clone, Debug)]
pub struct UnwrappedTracker {
    q0: Vec<f64>,
    q: Vec<f64>,
}

impl UnwrappedTracker {
    pub fn new(initial: &[f64]) -> Self {
        Self {
            q0: initial.to_vec(),
            q: initial.to_vec(),
        }
    }

    pub fn current(&self) -> &[f64] {
        &self.q
    }

    pub fn initial(&self) -> &[f64] {
        &self.q0
    }

    /// Squared displacement since Q0, summed over all coordinates.
    pub fn displacement_sq(&self) -> f64 {
        self.q
            .iter()
            .zip(&self.q0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Restart displacement accounting from the current position.
    pub fn rebase(&mut self) {
        self.q0.copy_from_slice(&self.q);
    }

    #[inline]
    fn advance(&mut self, delta: &[f64]) {
        for (x, d) in self.q.iter_mut().zip(delta) {
            *x += d;
        }
    }
}

/// Everything a single step reports.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Proposed position on the unwrapped lift.
    pub proposal: Vec<f64>,
    /// Log of the acceptance ratio, -alpha (0 means certain acceptance).
    pub log_acceptance: f64,
    pub accepted: bool,
    /// Applied displacement; the zero vector on rejection.
    pub increment: Vec<f64>,
    /// Wrapped state after the step.
    pub next: Configuration,
}

/// Wrap a position vector into the box, coordinate by coordinate.
pub fn wrap(cell: &SimulationBox, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
    let mut out = vec![0.0; x.len()];
    for (o, &xi) in out.iter_mut().zip(x) {
        if !xi.is_finite() {
            return Err(DynamicsError::NonFinite);
        }
        *o = fold(cell.length(), xi);
    }
    Ok(out)
}

/// One Metropolized step. `c` must be the wrapped image of the tracker's
/// current unwrapped position. On acceptance the tracker advances by the
/// raw increment and `next` is the freshly wrapped lift, so that
/// `wrap(Q0 + sum of increments)` reproduces the wrapped chain bitwise.
pub fn mala_step(
    c: &Configuration,
    tracker: &mut UnwrappedTracker,
    pot: &impl PotentialModel,
    p: &DynamicsParams,
    rng: &mut RngStream,
) -> Result<StepOutcome, DynamicsError> {
    step_outcome(c, tracker, pot, p, rng, true)
}

/// One bare Euler-Maruyama step: the proposal is always applied. Non-finite
/// proposals and singular potential evaluations surface as errors so the
/// caller can flag a blow-up.
pub fn em_step(
    c: &Configuration,
    tracker: &mut UnwrappedTracker,
    pot: &impl PotentialModel,
    p: &DynamicsParams,
    rng: &mut RngStream,
) -> Result<StepOutcome, DynamicsError> {
    step_outcome(c, tracker, pot, p, rng, false)
}

fn step_outcome(
    c: &Configuration,
    tracker: &mut UnwrappedTracker,
    pot: &impl PotentialModel,
    p: &DynamicsParams,
    rng: &mut RngStream,
    metropolize: bool,
) -> Result<StepOutcome, DynamicsError> {
    let cell = *c.cell();
    let mut walker = Walker::new(&cell, pot, tracker.clone())?;
    let mut engine = Integrator::new(cell, pot, *p);
    let data = engine.step(&mut walker, rng, metropolize)?;
    let next = Configuration::new(cell, walker.wrapped().to_vec())
        .expect("wrapped coordinates are always in range");
    // The raw applied displacement, bitwise: summing these increments onto
    // Q0 replays the tracker's exact arithmetic path.
    let increment = if data.accepted {
        engine.delta.clone()
    } else {
        vec![0.0; cell.dof()]
    };
    *tracker = walker.tracker;
    Ok(StepOutcome {
        proposal: engine.proposal_x.clone(),
        log_acceptance: data.log_acceptance,
        accepted: data.accepted,
        increment,
        next,
    })
}

/// Per-step summary used by the ensemble layer (no allocations).
#[derive(Clone, Copy, Debug)]
pub struct StepData {
    pub accepted: bool,
    pub log_acceptance: f64,
    /// Potential energy of the state after the step.
    pub energy: f64,
    /// Largest single-particle displacement (Euclidean norm over that
    /// particle's coordinates) applied this step; 0 on rejection.
    pub max_move: f64,
}

/// Which update rule a trajectory runs: the bare scheme applies every
/// proposal, the Metropolized scheme filters them through the acceptance
/// rule. Both consume identical randomness per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    BareEm,
    Mala,
}

impl Scheme {
    pub fn metropolize(self) -> bool {
        matches!(self, Scheme::Mala)
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::BareEm => "bare-em",
            Scheme::Mala => "mala",
        })
    }
}

/// Trajectory state: unwrapped tracker, wrapped image, cached evaluation.
/// The wrapped image is recomputed from the unwrapped lift after every
/// accepted move, which is what makes the wrapped/unwrapped consistency
/// bitwise rather than approximate.
#[derive(Clone, Debug)]
pub struct Walker {
    tracker: UnwrappedTracker,
    wrapped: Vec<f64>,
    energy: f64,
    grad: Vec<f64>,
}

impl Walker {
    /// Start a walker at the tracker's current position, evaluating the
    /// potential once.
    pub fn new(
        cell: &SimulationBox,
        pot: &impl PotentialModel,
        tracker: UnwrappedTracker,
    ) -> Result<Self, DynamicsError> {
        let mut wrapped = vec![0.0; tracker.current().len()];
        for (w, &x) in wrapped.iter_mut().zip(tracker.current()) {
            if !x.is_finite() {
                return Err(DynamicsError::NonFinite);
            }
            *w = fold(cell.length(), x);
        }
        let mut grad = vec![0.0; wrapped.len()];
        let energy = pot.energy_gradient_into(cell, &wrapped, &mut grad)?;
        Ok(Self {
            tracker,
            wrapped,
            energy,
            grad,
        })
    }

    pub fn from_configuration(
        c: &Configuration,
        pot: &impl PotentialModel,
    ) -> Result<Self, DynamicsError> {
        Self::new(c.cell(), pot, UnwrappedTracker::new(c.positions()))
    }

    pub fn tracker(&self) -> &UnwrappedTracker {
        &self.tracker
    }

    pub fn wrapped(&self) -> &[f64] {
        &self.wrapped
    }

    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn displacement_sq(&self) -> f64 {
        self.tracker.displacement_sq()
    }

    /// Restart displacement accounting at the current position.
    pub fn rebase(&mut self) {
        self.tracker.rebase();
    }

    pub fn into_configuration(self, cell: &SimulationBox) -> Configuration {
        Configuration::new(*cell, self.wrapped).expect("wrapped coordinates are always in range")
    }
}

/// Reusable stepping engine: owns the scratch buffers so that the per-step
/// cost is pure arithmetic plus one potential evaluation at the proposal.
pub struct Integrator<'a, P: PotentialModel> {
    cell: SimulationBox,
    pot: &'a P,
    p: DynamicsParams,
    noise: Vec<f64>,
    proposal_x: Vec<f64>,
    proposal_q: Vec<f64>,
    proposal_grad: Vec<f64>,
    delta: Vec<f64>,
}

impl<'a, P: PotentialModel> Integrator<'a, P> {
    pub fn new(cell: SimulationBox, pot: &'a P, p: DynamicsParams) -> Self {
        let n = cell.dof();
        Self {
            cell,
            pot,
            p,
            noise: vec![0.0; n],
            proposal_x: vec![0.0; n],
            proposal_q: vec![0.0; n],
            proposal_grad: vec![0.0; n],
            delta: vec![0.0; n],
        }
    }

    pub fn params(&self) -> &DynamicsParams {
        &self.p
    }

    pub fn set_dt(&mut self, dt: f64) -> Result<(), DynamicsError> {
        self.p = DynamicsParams::new(self.p.beta, dt)?;
        Ok(())
    }

    /// Advance one step; `metropolize` selects between the Metropolized and
    /// the bare scheme. Exactly dof normals plus one uniform are consumed
    /// either way.
    pub fn step(
        &mut self,
        w: &mut Walker,
        rng: &mut RngStream,
        metropolize: bool,
    ) -> Result<StepData, DynamicsError> {
        rng.fill_standard_normal(&mut self.noise);
        let log_u = rng.uniform().ln();

        let drift = -self.p.beta * self.p.dt;
        let spread = (2.0 * self.p.dt).sqrt();
        let x = w.tracker.current();
        for (i, &xi) in x.iter().enumerate() {
            let d = drift * w.grad[i] + spread * self.noise[i];
            self.delta[i] = d;
            let px = xi + d;
            if !px.is_finite() {
                return Err(DynamicsError::NonFinite);
            }
            self.proposal_x[i] = px;
            self.proposal_q[i] = fold(self.cell.length(), px);
        }
        let e_prop =
            self.pot
                .energy_gradient_into(&self.cell, &self.proposal_q, &mut self.proposal_grad)?;
        let log_acc = neg_alpha(
            &self.p,
            &self.delta,
            w.energy,
            &w.grad,
            e_prop,
            &self.proposal_grad,
        );

        let accepted = !metropolize || log_u <= log_acc;
        if accepted {
            w.tracker.advance(&self.delta);
            w.wrapped.copy_from_slice(&self.proposal_q);
            w.grad.copy_from_slice(&self.proposal_grad);
            w.energy = e_prop;
            let max_move = self
                .delta
                .chunks_exact(self.cell.dim())
                .fold(0.0f64, |m, d| {
                    m.max(d.iter().map(|x| x * x).sum::<f64>().sqrt())
                });
            Ok(StepData {
                accepted: true,
                log_acceptance: log_acc,
                energy: e_prop,
                max_move,
            })
        } else {
            Ok(StepData {
                accepted: false,
                log_acceptance: log_acc,
                energy: w.energy,
                max_move: 0.0,
            })
        }
    }
}
