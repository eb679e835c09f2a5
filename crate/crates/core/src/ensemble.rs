//! Replica preparation and trajectory orchestration.
//!
//! Two production modes:
//!
//! * **Parallel replicas** — M independent walkers, prepared incrementally
//!   (replica m+1 is replica m's start pushed through a short Metropolized
//!   equilibration), then advanced independently while mean-square
//!   displacement or force-autocorrelation curves are accumulated.
//! * **Sequential trajectories** — one long chain cut into M stretches,
//!   each stretch starting where the previous one ended; used for the
//!   interacting 3D runs where independent equilibration is expensive.
//!
//! Determinism contract: results depend only on (seed, plan, parameters),
//! never on the worker count. Replica m draws from its own counter-based
//! RNG stream; replicas are grouped into fixed-size batches, each batch is
//! accumulated sequentially with compensated summation, and batches are
//! reduced in index order. The batch layout is a function of M alone, so
//! any thread pool produces bitwise-identical curves.

use crate::dynamics::{DynamicsError, DynamicsParams, Integrator, RngStream, Scheme, Walker};
use crate::model::{Configuration, ModelError, PotentialModel, SimulationBox};
use crate::sum::Kahan;
use rayon::prelude::*;
use std::sync::atomic::{AtomicUsize, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("this operation requires {expected} mode")]
    WrongMode { expected: &'static str },
    #[error("plan must have at least one replica and one step")]
    EmptyPlan,
    #[error("could not build the initial configuration: {0}")]
    Initial(#[from] ModelError),
    #[error("equilibration failed while preparing replica {replica}: {source}")]
    Preparation {
        replica: usize,
        source: DynamicsError,
    },
    #[error("replica {replica} failed at step {step}: {source}")]
    Trajectory {
        replica: usize,
        step: usize,
        source: DynamicsError,
    },
    #[error("trajectory diverged in replica {replica} at step {step}: {what}")]
    Diverged {
        replica: usize,
        step: usize,
        what: String,
    },
}

/// Per-step displacement beyond which a production trajectory is declared
/// diverged. Equilibrated moves are a few times sqrt(2 dt); values past
/// this limit only occur once a bare-scheme run has left the physical
/// regime.
const MOVE_LIMIT: f64 = 1e6;

/// Energy magnitude beyond which a production trajectory is declared
/// diverged. Equilibrium energies are of the order of the coordinate
/// count.
const ENERGY_LIMIT: f64 = 1e9;

fn check_diverged(
    replica: usize,
    step: usize,
    max_move: f64,
    energy: f64,
) -> Result<(), EnsembleError> {
    let what = if !(max_move.is_finite() && max_move < MOVE_LIMIT) {
        format!("per-step move {max_move:e}")
    } else if !(energy.is_finite() && energy.abs() < ENERGY_LIMIT) {
        format!("potential energy {energy:e}")
    } else {
        return Ok(());
    };
    Err(EnsembleError::Diverged {
        replica,
        step,
        what,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleMode {
    ParallelReplicas,
    SequentialTrajectories,
}

/// How many trajectories to run and how to prepare them.
#[derive(Clone, Debug)]
pub struct EnsemblePlan {
    /// Replica count (parallel mode) or trajectory count (sequential mode).
    pub replicas: usize,
    pub mode: EnsembleMode,
    /// Steps per trajectory for displacement runs.
    pub n_steps: usize,
    /// Equilibration step size between replicas (and for the initial
    /// burn-in of a sequential run).
    pub dt_therm: f64,
    /// Equilibration step count between replicas.
    pub n_therm: usize,
    pub seed: u64,
    /// Update rule for the production steps; equilibration is always
    /// Metropolized so it cannot blow up.
    pub scheme: Scheme,
    /// Emit progress lines to standard error.
    pub progress: bool,
}

impl EnsemblePlan {
    pub fn new(replicas: usize, n_steps: usize, seed: u64) -> Self {
        Self {
            replicas,
            mode: EnsembleMode::ParallelReplicas,
            n_steps,
            dt_therm: 0.01,
            n_therm: 10,
            seed,
            scheme: Scheme::Mala,
            progress: false,
        }
    }

    pub fn sequential(mut self) -> Self {
        self.mode = EnsembleMode::SequentialTrajectories;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_therm(mut self, dt_therm: f64, n_therm: usize) -> Self {
        self.dt_therm = dt_therm;
        self.n_therm = n_therm;
        self
    }

    pub fn with_progress(mut self, progress: bool) -> Self {
        self.progress = progress;
        self
    }

    fn validate(&self) -> Result<(), EnsembleError> {
        if self.replicas == 0 || self.n_steps == 0 {
            return Err(EnsembleError::EmptyPlan);
        }
        Ok(())
    }
}

/// Mean curve of one batch of replicas, kept for jackknife error bars.
#[derive(Clone, Debug)]
pub struct BatchCurve {
    /// Number of replicas averaged into this batch.
    pub weight: usize,
    pub values: Vec<f64>,
}

/// Unnormalized mean-square displacement curve: values[n] is the squared
/// displacement summed over all coordinates, averaged over replicas, after
/// n steps. values[0] is exactly 0.
#[derive(Clone, Debug)]
pub struct MsdCurve {
    pub dt: f64,
    pub replicas: usize,
    pub values: Vec<f64>,
    pub batches: Vec<BatchCurve>,
}

/// Force autocorrelation curve: values[n] is the mean over samples of
/// grad V(q^n) . grad V(q^0).
#[derive(Clone, Debug)]
pub struct CorrelationCurve {
    pub dt: f64,
    pub samples: usize,
    pub values: Vec<f64>,
    pub batches: Vec<BatchCurve>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RejectionStats {
    pub proposals: u64,
    pub rejections: u64,
}

impl RejectionStats {
    /// Exactly rejections/proposals (0 for an empty run).
    pub fn rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.rejections as f64 / self.proposals as f64
        }
    }

    fn absorb(&mut self, other: RejectionStats) {
        self.proposals += other.proposals;
        self.rejections += other.rejections;
    }
}

/// Deterministic overlap-free starting state: a uniform lattice. In 3D the
/// lattice site nearest the cell-center ion is excluded so no particle
/// starts on top of it.
pub fn initial_configuration(cell: &SimulationBox) -> Result<Configuration, EnsembleError> {
    let n = cell.particles();
    let length = cell.length();
    let positions = if cell.dim() == 1 {
        (0..n).map(|i| i as f64 * length / n as f64).collect()
    } else {
        let mut side = (n as f64).cbrt().ceil() as usize;
        loop {
            let h = length / side as f64;
            let center = cell.center();
            let mut sites = Vec::with_capacity(side * side * side);
            for i in 0..side {
                for j in 0..side {
                    for k in 0..side {
                        let site = [
                            (i as f64 + 0.5) * h,
                            (j as f64 + 0.5) * h,
                            (k as f64 + 0.5) * h,
                        ];
                        let r2: f64 = site
                            .iter()
                            .map(|&s| {
                                let d = crate::model::minimum_image(length, s - center);
                                d * d
                            })
                            .sum();
                        if r2.sqrt() >= 0.45 * h {
                            sites.push(site);
                        }
                    }
                }
            }
            if sites.len() >= n {
                break sites.iter().take(n).flatten().copied().collect();
            }
            side += 1;
        }
    };
    Ok(Configuration::new(*cell, positions)?)
}

/// Replicas are grouped into contiguous batches whose size depends only on
/// the replica count, making the reduction independent of the worker pool.
fn batch_size(replicas: usize) -> usize {
    replicas.div_ceil(64).clamp(1, 256)
}

fn batch_bounds(replicas: usize) -> Vec<(usize, usize)> {
    let bs = batch_size(replicas);
    (0..replicas.div_ceil(bs))
        .map(|b| (b * bs, ((b + 1) * bs).min(replicas)))
        .collect()
}

struct ProgressMeter<'a> {
    label: &'a str,
    total: usize,
    done: AtomicUsize,
    enabled: bool,
}

impl<'a> ProgressMeter<'a> {
    fn new(label: &'a str, total: usize, enabled: bool) -> Self {
        Self {
            label,
            total,
            done: AtomicUsize::new(0),
            enabled,
        }
    }

    /// Record one completed unit; prints on each decile boundary.
    fn tick(&self) {
        if !self.enabled {
            return;
        }
        let done = self.done.fetch_add(1, Ordering::Relaxed) + 1;
        let decile = |k: usize| 10 * k / self.total;
        if done == self.total || decile(done) != decile(done - 1) {
            eprintln!("[{}] {}/{} done", self.label, done, self.total);
        }
    }
}

struct BatchOut {
    weight: usize,
    sums: Vec<f64>,
    rejection: RejectionStats,
}

/// Combine batch sums in index order into the overall mean curve, and keep
/// the per-batch means for jackknife estimates downstream.
fn reduce_batches(
    outs: Vec<BatchOut>,
    replicas: usize,
    len: usize,
) -> (Vec<f64>, Vec<BatchCurve>, RejectionStats) {
    let mut values = vec![0.0; len];
    #[allow(clippy::needless_range_loop)]
    for n in 0..len {
        let mut acc = Kahan::new();
        for out in &outs {
            acc.add(out.sums[n]);
        }
        values[n] = acc.value() / replicas as f64;
    }
    let mut rejection = RejectionStats::default();
    let mut batches = Vec::with_capacity(outs.len());
    for out in outs {
        rejection.absorb(out.rejection);
        let weight = out.weight;
        batches.push(BatchCurve {
            weight,
            values: out.sums.iter().map(|s| s / weight as f64).collect(),
        });
    }
    (values, batches, rejection)
}

/// Run `body` for every replica, accumulating `len` values per replica into
/// per-batch compensated sums. `body` receives the 0-based replica index
/// and a recorder closure it must call once per curve index.
fn run_batched<F>(
    replicas: usize,
    len: usize,
    meter: &ProgressMeter<'_>,
    body: F,
) -> Result<(Vec<f64>, Vec<BatchCurve>, RejectionStats), EnsembleError>
where
    F: Sync + Fn(usize, &mut [Kahan]) -> Result<RejectionStats, EnsembleError>,
{
    let outs = batch_bounds(replicas)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut acc = vec![Kahan::new(); len];
            let mut rejection = RejectionStats::default();
            for m in lo..hi {
                rejection.absorb(body(m, &mut acc)?);
            }
            meter.tick();
            Ok(BatchOut {
                weight: hi - lo,
                sums: acc.iter().map(Kahan::value).collect(),
                rejection,
            })
        })
        .collect::<Result<Vec<_>, EnsembleError>>()?;
    Ok(reduce_batches(outs, replicas, len))
}

/// Equilibrate a chain of starting configurations: replica 1 is the initial
/// state itself, and each subsequent replica is its predecessor's start
/// advanced by `n_therm` Metropolized steps at `dt_therm`, all drawn from
/// the dedicated preparation stream.
pub fn prepare_replicas<P: PotentialModel>(
    pot: &P,
    p: &DynamicsParams,
    cell: &SimulationBox,
    plan: &EnsemblePlan,
) -> Result<Vec<Configuration>, EnsembleError> {
    let initial = initial_configuration(cell)?;
    prepare_replicas_from(pot, p, &initial, plan)
}

pub fn prepare_replicas_from<P: PotentialModel>(
    pot: &P,
    p: &DynamicsParams,
    initial: &Configuration,
    plan: &EnsemblePlan,
) -> Result<Vec<Configuration>, EnsembleError> {
    plan.validate()?;
    if plan.mode != EnsembleMode::ParallelReplicas {
        return Err(EnsembleError::WrongMode {
            expected: "parallel-replicas",
        });
    }
    let cell = *initial.cell();
    let therm = DynamicsParams::new(p.beta, plan.dt_therm)
        .map_err(|source| EnsembleError::Preparation { replica: 1, source })?;
    let mut rng = RngStream::preparation(plan.seed);
    let mut engine = Integrator::new(cell, pot, therm);
    let meter = ProgressMeter::new("prepare", plan.replicas, plan.progress);

    let mut replicas = Vec::with_capacity(plan.replicas);
    replicas.push(initial.clone());
    meter.tick();
    for m in 2..=plan.replicas {
        let mut walker = Walker::from_configuration(replicas.last().unwrap(), pot)
            .map_err(|source| EnsembleError::Preparation { replica: m, source })?;
        for _ in 0..plan.n_therm {
            engine
                .step(&mut walker, &mut rng, true)
                .map_err(|source| EnsembleError::Preparation { replica: m, source })?;
        }
        replicas.push(walker.into_configuration(&cell));
        meter.tick();
    }
    Ok(replicas)
}

/// Advance each start `n_steps` production steps, accumulating the squared
/// displacement (summed over all coordinates) after every step.
pub fn run_einstein_from_configs<P: PotentialModel>(
    pot: &P,
    p: &DynamicsParams,
    starts: &[Configuration],
    n_steps: usize,
    seed: u64,
    scheme: Scheme,
    progress: bool,
) -> Result<(MsdCurve, RejectionStats), EnsembleError> {
    let replicas = starts.len();
    let meter = ProgressMeter::new("einstein", batch_bounds(replicas).len(), progress);
    let (values, batches, rejection) = run_batched(replicas, n_steps + 1, &meter, |m, acc| {
        let mut rng = RngStream::replica(seed, m as u64);
        let mut walker = Walker::from_configuration(&starts[m], pot).map_err(|source| {
            EnsembleError::Trajectory {
                replica: m + 1,
                step: 0,
                source,
            }
        })?;
        let mut engine = Integrator::new(*starts[m].cell(), pot, *p);
        let mut rej = RejectionStats::default();
        for (n, slot) in acc.iter_mut().enumerate().skip(1) {
            let data = engine
                .step(&mut walker, &mut rng, scheme.metropolize())
                .map_err(|source| EnsembleError::Trajectory {
                    replica: m + 1,
                    step: n,
                    source,
                })?;
            check_diverged(m + 1, n, data.max_move, data.energy)?;
            rej.proposals += 1;
            rej.rejections += u64::from(!data.accepted);
            slot.add(walker.displacement_sq());
        }
        Ok(rej)
    })?;
    Ok((
        MsdCurve {
            dt: p.dt,
            replicas,
            values,
            batches,
        },
        rejection,
    ))
}

pub fn run_einstein_ensemble<P: PotentialModel>(
    pot: &P,
    p: &DynamicsParams,
    cell: &SimulationBox,
    plan: &EnsemblePlan,
) -> Result<(MsdCurve, RejectionStats), EnsembleError> {
    plan.validate()?;
    let starts = prepare_replicas(pot, p, cell, plan)?;
    run_einstein_from_configs(
        pot,
        p,
        &starts,
        plan.n_steps,
        plan.seed,
        plan.scheme,
        plan.progress,
    )
}

/// Advance each start for `floor(tau/dt)` steps, accumulating the
/// force autocorrelation against the force at step 0.
pub fn run_gk_from_configs<P: PotentialModel>(
    pot: &P,
    p: &DynamicsParams,
    starts: &[Configuration],
    tau: f64,
    seed: u64,
    scheme: Scheme,
    progress: bool,
) -> Result<(CorrelationCurve, RejectionStats), EnsembleError> {
    let replicas = starts.len();
    let n_corr = crate::dynamics::steps_for_time(tau, p.dt);
    let meter = ProgressMeter::new("green-kubo", batch_bounds(replicas).len(), progress);
    let (values, batches, rejection) = run_batched(replicas, n_corr + 1, &meter, |m, acc| {
        let mut rng = RngStream::replica(seed, m as u64);
        let mut walker = Walker::from_configuration(&starts[m], pot).map_err(|source| {
            EnsembleError::Trajectory {
                replica: m + 1,
                step: 0,
                source,
            }
        })?;
        let mut engine = Integrator::new(*starts[m].cell(), pot, *p);
        let g0 = walker.grad().to_vec();
        let mut rej = RejectionStats::default();
        acc[0].add(dot(&g0, &g0));
        for (n, slot) in acc.iter_mut().enumerate().skip(1) {
            let data = engine
                .step(&mut walker, &mut rng, scheme.metropolize())
                .map_err(|source| EnsembleError::Trajectory {
                    replica: m + 1,
                    step: n,
                    source,
                })?;
            check_diverged(m + 1, n, data.max_move, data.energy)?;
            rej.proposals += 1;
            rej.rejections += u64::from(!data.accepted);
            slot.add(dot(walker.grad(), &g0));
        }
        Ok(rej)
    })?;
    Ok((
        CorrelationCurve {
            dt: p.dt,
            samples: replicas,
            values,
            batches,
        },
        rejection,
    ))
}

/// Force-autocorrelation run in whichever mode the plan selects.
pub fn run_gk_ensemble<P: PotentialModel>(
    pot: &P,
    p: &DynamicsParams,
    cell: &SimulationBox,
    plan: &EnsemblePlan,
    tau: f64,
) -> Result<(CorrelationCurve, RejectionStats), EnsembleError> {
    plan.validate()?;
    match plan.mode {
        EnsembleMode::ParallelReplicas => {
            let starts = prepare_replicas(pot, p, cell, plan)?;
            run_gk_from_configs(pot, p, &starts, tau, plan.seed, plan.scheme, plan.progress)
        }
        EnsembleMode::SequentialTrajectories => {
            run_sequential_trajectories(pot, p, cell, plan, tau)
        }
    }
}

/// One long chain cut into trajectories: trajectory m+1 starts from the
/// final configuration of trajectory m. The chain is opened with `n_therm`
/// Metropolized steps at `dt_therm` so the step-0 force of the first
/// trajectory is never taken from the raw lattice.
pub fn run_sequential_trajectories<P: PotentialModel>(
    pot: &P,
    p: &DynamicsParams,
    cell: &SimulationBox,
    plan: &EnsemblePlan,
    tau: f64,
) -> Result<(CorrelationCurve, RejectionStats), EnsembleError> {
    plan.validate()?;
    if plan.mode != EnsembleMode::SequentialTrajectories {
        return Err(EnsembleError::WrongMode {
            expected: "sequential-trajectories",
        });
    }
    let n_corr = crate::dynamics::steps_for_time(tau, p.dt);
    let initial = initial_configuration(cell)?;
    let mut walker =
        Walker::from_configuration(&initial, pot).map_err(|source| EnsembleError::Trajectory {
            replica: 1,
            step: 0,
            source,
        })?;

    // Burn-in on the preparation stream.
    {
        let therm = DynamicsParams::new(p.beta, plan.dt_therm)
            .map_err(|source| EnsembleError::Preparation { replica: 1, source })?;
        let mut rng = RngStream::preparation(plan.seed);
        let mut engine = Integrator::new(*cell, pot, therm);
        for _ in 0..plan.n_therm {
            engine
                .step(&mut walker, &mut rng, true)
                .map_err(|source| EnsembleError::Preparation { replica: 1, source })?;
        }
    }

    let mut engine = Integrator::new(*cell, pot, *p);
    let bounds = batch_bounds(plan.replicas);
    let meter = ProgressMeter::new("green-kubo/seq", bounds.len(), plan.progress);
    let mut outs = Vec::with_capacity(bounds.len());
    let mut g0 = vec![0.0; cell.dof()];
    for (lo, hi) in bounds {
        let mut acc = vec![Kahan::new(); n_corr + 1];
        let mut rej = RejectionStats::default();
        for m in lo..hi {
            let mut rng = RngStream::replica(plan.seed, m as u64);
            g0.copy_from_slice(walker.grad());
            acc[0].add(dot(&g0, &g0));
            for (n, slot) in acc.iter_mut().enumerate().skip(1) {
                let data = engine
                    .step(&mut walker, &mut rng, plan.scheme.metropolize())
                    .map_err(|source| EnsembleError::Trajectory {
                        replica: m + 1,
                        step: n,
                        source,
                    })?;
                check_diverged(m + 1, n, data.max_move, data.energy)?;
                rej.proposals += 1;
                rej.rejections += u64::from(!data.accepted);
                slot.add(dot(walker.grad(), &g0));
            }
        }
        outs.push(BatchOut {
            weight: hi - lo,
            sums: acc.iter().map(Kahan::value).collect(),
            rejection: rej,
        });
        meter.tick();
    }
    let (values, batches, rejection) = reduce_batches(outs, plan.replicas, n_corr + 1);
    Ok((
        CorrelationCurve {
            dt: p.dt,
            samples: plan.replicas,
            values,
            batches,
        },
        rejection,
    ))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// What a trajectory step left behind, as seen by blow-up detection.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    /// Potential energy after the step.
    pub energy: f64,
    /// Largest single-particle displacement applied this step.
    pub max_move: f64,
    /// Whether every coordinate was finite after the step.
    pub finite: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlowupReason {
    NonFinite,
    Energy,
    Displacement,
}

impl std::fmt::Display for BlowupReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlowupReason::NonFinite => "non-finite state",
            BlowupReason::Energy => "energy threshold exceeded",
            BlowupReason::Displacement => "single-step displacement threshold exceeded",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Blowup { step: usize, reason: BlowupReason },
}

/// Default energy threshold for blow-up detection, in units of the pair
/// energy scale.
pub const DEFAULT_ENERGY_THRESHOLD: f64 = 1e6;

/// Scan a step stream for the first sign of numerical explosion: a
/// non-finite state, an energy above `energy_threshold`, or a single-step
/// particle displacement above `displacement_threshold` (half the box is a
/// natural default — beyond it the periodic image convention is
/// meaningless).
pub fn detect_blowup(
    records: &[StepRecord],
    energy_threshold: f64,
    displacement_threshold: f64,
) -> Stability {
    for (step, r) in records.iter().enumerate() {
        let reason = if !r.finite || !r.energy.is_finite() {
            Some(BlowupReason::NonFinite)
        } else if r.energy > energy_threshold {
            Some(BlowupReason::Energy)
        } else if r.max_move > displacement_threshold {
            Some(BlowupReason::Displacement)
        } else {
            None
        };
        if let Some(reason) = reason {
            return Stability::Blowup { step, reason };
        }
    }
    Stability::Stable
}

/// Advance one trajectory while recording the per-step quantities blow-up
/// detection needs. A step whose proposal cannot even be evaluated (the
/// potential is singular there, or coordinates overflowed) terminates the
/// stream with a non-finite record; the final configuration is returned
/// only if all `n_steps` completed.
pub fn run_recorded_trajectory<P: PotentialModel>(
    pot: &P,
    p: &DynamicsParams,
    start: &Configuration,
    scheme: Scheme,
    n_steps: usize,
    rng: &mut RngStream,
) -> (Vec<StepRecord>, Option<Configuration>) {
    let cell = *start.cell();
    let poisoned = StepRecord {
        energy: f64::NAN,
        max_move: f64::NAN,
        finite: false,
    };
    let mut walker = match Walker::from_configuration(start, pot) {
        Ok(w) => w,
        Err(_) => return (vec![poisoned], None),
    };
    let mut engine = Integrator::new(cell, pot, *p);
    let mut records = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        match engine.step(&mut walker, rng, scheme.metropolize()) {
            Ok(data) => {
                let finite = walker.tracker().current().iter().all(|x| x.is_finite());
                records.push(StepRecord {
                    energy: data.energy,
                    max_move: data.max_move,
                    finite,
                });
            }
            Err(_) => {
                records.push(poisoned);
                return (records, None);
            }
        }
    }
    (records, Some(walker.into_configuration(&cell)))
}
