//! Levenberg-Marquardt refinement of pose and shape.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::energy::{
    linearize, linearize_with_hull_choice, EnergyBreakdown, EnergyConfig, Linearization, Measurement, Variables,
    PARAM_ALPHA, PARAM_SIGMA, PARAM_T, PARAM_THETA,
};
use crate::error::{Error, Result};
use crate::shape::MorphableModel;

const MIN_DAMPING: f64 = 1e-12;
const MAX_DAMPING: f64 = 1e12;

/// Parameter blocks held fixed at their initial values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FreezeMask {
    pub theta: bool,
    pub translation: bool,
    pub sigma: bool,
    pub alpha: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub function_tolerance: f64,
    pub parameter_tolerance: f64,
    pub initial_damping: f64,
    pub freeze: FreezeMask,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            function_tolerance: 1e-8,
            parameter_tolerance: 1e-10,
            initial_damping: 1e-3,
            // The energy has no term anchoring the extents to their
            // hypothesis, so they are held at it unless released.
            freeze: FreezeMask {
                sigma: true,
                ..FreezeMask::default()
            },
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let tol = [self.function_tolerance, self.parameter_tolerance, self.initial_damping];
        if tol.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::Config("solver tolerances and damping must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Relative energy decrease below the function tolerance.
    FunctionTolerance,
    /// Step length below the parameter tolerance.
    ParameterTolerance,
    /// Energy reached zero.
    ZeroEnergy,
    /// Iteration budget exhausted.
    MaxIterations,
    /// Damping hit its upper clamp without an accepted step.
    DampingSaturated,
    /// No optimization was run.
    NotRun,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(
            self,
            Self::FunctionTolerance | Self::ParameterTolerance | Self::ZeroEnergy
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FunctionTolerance => "function_tolerance",
            Self::ParameterTolerance => "parameter_tolerance",
            Self::ZeroEnergy => "zero_energy",
            Self::MaxIterations => "max_iterations",
            Self::DampingSaturated => "damping_saturated",
            Self::NotRun => "not_run",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    /// Final variables, yaw wrapped into `[0, 2pi)`.
    pub vars: Variables,
    pub converged: bool,
    /// Trial steps taken, accepted or not.
    pub iterations: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub breakdown: EnergyBreakdown,
    pub termination: Termination,
    /// Energy after initialization and after every accepted step.
    pub energy_trace: Vec<f64>,
    /// Some accepted linearization sat on a projected-hull tie.
    pub hull_tie: bool,
}

/// Starting point from the hypotheses and the box center ray.
pub fn initialize(meas: &Measurement, model: &MorphableModel) -> Result<Variables> {
    let ray = meas.camera.back_project(meas.box2d.tx, meas.box2d.ty);
    let translation = match meas.depth {
        Some(z) if z > 0.0 && z.is_finite() => ray * z,
        Some(z) => return Err(Error::Initialization(format!("invalid crop depth {z}"))),
        None => {
            let along = meas.ground.normal.dot(&ray);
            if !(along > 1e-9) {
                return Err(Error::Initialization(
                    "box center ray does not meet the ground plane in front of the camera".into(),
                ));
            }
            ray / along
        }
    };
    Ok(Variables {
        theta: meas.theta0,
        translation,
        sigma: meas.sigma0,
        alpha: DVector::zeros(model.basis_count()),
    })
}

/// Minimize the weighted energy from [`initialize`].
pub fn refine(
    meas: &Measurement,
    model: &MorphableModel,
    cfg: &EnergyConfig,
    opts: &SolverOptions,
) -> Result<RefineResult> {
    let init = initialize(meas, model)?;
    refine_from(init, meas, model, cfg, opts)
}

/// Minimize the weighted energy from a given starting point.
pub fn refine_from(
    init: Variables,
    meas: &Measurement,
    model: &MorphableModel,
    cfg: &EnergyConfig,
    opts: &SolverOptions,
) -> Result<RefineResult> {
    cfg.validate()?;
    opts.validate()?;
    let frozen = frozen_columns(opts.freeze, init.alpha.len());

    let mut x = init.to_vector();
    let mut lin = linearize(&init, meas, model, cfg, true)?;
    let initial_energy = lin.energy();
    let mut energy = initial_energy;
    let mut trace = vec![energy];
    let mut hull_tie = lin.hull_tie();
    let mut mu = opts.initial_damping.clamp(MIN_DAMPING, MAX_DAMPING);
    let mut iterations = 0;
    let mut normal = normal_equations(&lin.jacobian.take().expect("jacobian requested"), &lin.residuals, &frozen);

    let mut hull_gaps = lin.hull_gaps;

    let termination = loop {
        if energy == 0.0 {
            break Termination::ZeroEnergy;
        }
        if iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }
        let Some(step) = damped_step(&normal, mu) else {
            if mu >= MAX_DAMPING {
                break Termination::DampingSaturated;
            }
            mu = (mu * 10.0).min(MAX_DAMPING);
            continue;
        };

        let x_norm = x.norm();
        if step.norm() <= opts.parameter_tolerance * (x_norm + opts.parameter_tolerance) {
            break Termination::ParameterTolerance;
        }

        // Decrease predicted by the linear model; stop when even the model
        // sees nothing left to gain, unless the other side of a hull kink does.
        let (jtj, jtr) = &normal;
        let predicted = -(2.0 * step.dot(jtr) + step.dot(&(jtj * &step)));
        let stalled = predicted <= opts.function_tolerance * energy;

        let mut accepted = None;
        if !stalled {
            iterations += 1;
            let trial_x = &x + &step;
            accepted = linearize(&Variables::from_vector(&trial_x), meas, model, cfg, true)
                .ok()
                .filter(|t| t.energy() < energy)
                .map(|t| (trial_x, t));
        }
        if accepted.is_none() {
            if let Some(found) = kink_step(&x, energy, mu, &hull_gaps, meas, model, cfg, &frozen) {
                if stalled {
                    iterations += 1;
                }
                accepted = Some(found);
            }
        }

        match accepted {
            Some((trial_x, mut t)) => {
                let new_energy = t.energy();
                debug_assert!(new_energy <= energy);
                let decrease = energy - new_energy;
                x = trial_x;
                energy = new_energy;
                trace.push(energy);
                hull_tie |= t.hull_tie();
                hull_gaps = t.hull_gaps;
                normal = normal_equations(&t.jacobian.take().expect("jacobian requested"), &t.residuals, &frozen);
                mu = (mu * 0.5).max(MIN_DAMPING);
                if energy == 0.0 {
                    break Termination::ZeroEnergy;
                }
                if decrease <= opts.function_tolerance * (energy + decrease) {
                    break Termination::FunctionTolerance;
                }
            }
            None if stalled => break Termination::FunctionTolerance,
            None => {
                if mu >= MAX_DAMPING {
                    break Termination::DampingSaturated;
                }
                mu = (mu * 10.0).min(MAX_DAMPING);
            }
        }
    };

    let vars = Variables::from_vector(&x).wrapped();
    let breakdown = linearize(&vars, meas, model, cfg, false)?.breakdown;
    Ok(RefineResult {
        vars,
        converged: termination.converged(),
        iterations,
        initial_energy,
        final_energy: energy,
        breakdown,
        termination,
        energy_trace: trace,
        hull_tie,
    })
}

/// Solution of the damped normal equations, if positive definite.
fn damped_step(normal: &(DMatrix<f64>, DVector<f64>), mu: f64) -> Option<DVector<f64>> {
    let (jtj, jtr) = normal;
    let mut damped = jtj.clone();
    for i in 0..damped.nrows() {
        damped[(i, i)] += mu * jtj[(i, i)].clamp(1e-6, 1e32);
    }
    damped.cholesky().map(|ch| -ch.solve(jtr))
}

/// Hull extremes closer than this (px) to their runner-up count as a kink.
const KINK_GAP: f64 = 1e-2;

/// At a hull kink the active-corner linearization can stall; try the
/// one-sided Jacobians of the tied extremes and keep the best decrease.
#[allow(clippy::too_many_arguments)]
fn kink_step(
    x: &DVector<f64>,
    energy: f64,
    mu: f64,
    gaps: &[f64; 4],
    meas: &Measurement,
    model: &MorphableModel,
    cfg: &EnergyConfig,
    frozen: &[bool],
) -> Option<(DVector<f64>, Linearization)> {
    let tied: Vec<usize> = (0..4).filter(|&s| gaps[s] < KINK_GAP).collect();
    if tied.is_empty() {
        return None;
    }
    let vars = Variables::from_vector(x);
    let mut best: Option<(DVector<f64>, Linearization)> = None;
    for mask in 1..(1u32 << tied.len()) {
        let mut choice = [false; 4];
        for (b, &slot) in tied.iter().enumerate() {
            choice[slot] = mask & (1 << b) != 0;
        }
        let Ok(mut lin) = linearize_with_hull_choice(&vars, meas, model, cfg, true, choice) else {
            continue;
        };
        let normal = normal_equations(&lin.jacobian.take().expect("jacobian requested"), &lin.residuals, frozen);
        let Some(step) = damped_step(&normal, mu) else {
            continue;
        };
        let trial_x = x + step;
        let Ok(trial) = linearize(&Variables::from_vector(&trial_x), meas, model, cfg, true) else {
            continue;
        };
        let bar = best.as_ref().map_or(energy, |b| b.1.energy());
        if trial.energy() < bar {
            best = Some((trial_x, trial));
        }
    }
    best
}

fn frozen_columns(freeze: FreezeMask, n_alpha: usize) -> Vec<bool> {
    let mut cols = vec![false; PARAM_ALPHA + n_alpha];
    cols[PARAM_THETA] = freeze.theta;
    for i in 0..3 {
        cols[PARAM_T + i] = freeze.translation;
        cols[PARAM_SIGMA + i] = freeze.sigma;
    }
    for c in cols.iter_mut().skip(PARAM_ALPHA) {
        *c = freeze.alpha;
    }
    cols
}

fn normal_equations(jac: &DMatrix<f64>, r: &DVector<f64>, frozen: &[bool]) -> (DMatrix<f64>, DVector<f64>) {
    let mut j = jac.clone();
    for (c, f) in frozen.iter().enumerate() {
        if *f {
            j.column_mut(c).fill(0.0);
        }
    }
    (j.tr_mul(&j), j.tr_mul(r))
}

/// Ablation variants, each adding terms to the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Initialization only.
    V1,
    /// Box consistency and ground plane.
    V2,
    /// V2 plus landmarks and shape prior.
    V3,
    /// V3 plus crop depth.
    V4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::V1, Variant::V2, Variant::V3, Variant::V4];

    /// `base` with the terms of this variant enabled and all others off.
    pub fn energy_config(self, base: &EnergyConfig) -> EnergyConfig {
        let at_least = |v: Variant| self >= v;
        EnergyConfig {
            enable_box: at_least(Variant::V2),
            enable_ground: at_least(Variant::V2),
            enable_landmarks: at_least(Variant::V3),
            enable_shape: at_least(Variant::V3),
            enable_depth: at_least(Variant::V4),
            ..*base
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            "v3" => Ok(Variant::V3),
            "v4" => Ok(Variant::V4),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Refine with the terms of `variant`; `V1` returns the initialization.
pub fn refine_ablation(
    meas: &Measurement,
    model: &MorphableModel,
    base: &EnergyConfig,
    variant: Variant,
    opts: &SolverOptions,
) -> Result<RefineResult> {
    let cfg = variant.energy_config(base);
    if variant == Variant::V1 {
        let vars = initialize(meas, model)?;
        let full = Variant::V4.energy_config(base);
        let lin = linearize(&vars, meas, model, &full, false)?;
        let energy = lin.energy();
        return Ok(RefineResult {
            vars: vars.wrapped(),
            converged: false,
            iterations: 0,
            initial_energy: energy,
            final_energy: energy,
            breakdown: lin.breakdown,
            termination: Termination::NotRun,
            energy_trace: vec![energy],
            hull_tie: lin.hull_tie(),
        });
    }
    refine(meas, model, &cfg, opts)
}

/// Largest absolute difference between two sets of variables, split into
/// yaw (radians, wrapped), translation (m) and log-scale.
pub fn pose_error(a: &Variables, b: &Variables) -> (f64, f64, f64) {
    let dtheta = crate::geometry::wrap_pi(a.theta - b.theta).abs();
    let dt = (a.translation - b.translation).amax();
    let ds: Vector3<f64> = a.sigma - b.sigma;
    (dtheta, dt, ds.amax())
}
