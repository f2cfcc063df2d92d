//! Configuration file parsing and exhaustive validation.
//!
//! The file format is sectioned key-value TOML; see the README for the full
//! grammar. Parsing reports syntax errors with line information; validation
//! collects every constraint violation instead of stopping at the first.

use crate::linsolve::{KrylovConfig, KrylovMethod, NewtonConfig, Precond};
use crate::params::{Coefficient, ModelParams};
use crate::potential::PotentialParams;
use crate::scalar::Scalar;
use serde::Deserialize;
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Agg,
    QStokes,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Model::Agg => write!(f, "agg"),
            Model::QStokes => write!(f, "qstokes"),
        }
    }
}

/// One named constraint violation: which key, which constraint, which value.
#[derive(Debug, Clone)]
pub struct Violation {
    pub key: String,
    pub constraint: String,
    pub value: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: violates `{}` (value {})",
            self.key, self.constraint, self.value
        )
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("{} constraint violation(s):\n{}", .0.len(), .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Constraints(Vec<Violation>),
}

/// Initial-condition descriptor; smoothing is applied by `make_initial`.
#[derive(Debug, Clone, Copy)]
pub enum InitialKind<F: Scalar> {
    Uniform { mean: F },
    Random { mean: F, amplitude: F, seed: u64 },
    Bubble { center: (F, F), radius: F, width: F },
    Stratified { height: F, width: F },
}

#[derive(Debug, Clone, Copy)]
pub struct InitialCondition<F: Scalar> {
    pub kind: InitialKind<F>,
    pub smooth_substeps: usize,
    pub smooth_time: F,
}

/// Fully validated simulation configuration.
#[derive(Debug, Clone)]
pub struct SimConfig<F: Scalar> {
    pub model: Model,
    pub nx: usize,
    pub ny: usize,
    pub lx: F,
    pub ly: F,
    pub params: ModelParams<F>,
    pub h: F,
    pub n_steps: usize,
    /// Snapshot cadence; 0 writes only the initial and final snapshots.
    pub snapshot_every: usize,
    pub newton: NewtonConfig<F>,
    pub krylov: KrylovConfig<F>,
    pub initial: InitialCondition<F>,
    pub out_dir: PathBuf,
}

// ---------- raw (serde) layer ----------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: String,
    grid: RawGrid,
    physics: RawPhysics,
    time: RawTime,
    #[serde(default)]
    solver: RawSolver,
    initial: RawInitial,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    nx: i64,
    ny: i64,
    lx: f64,
    ly: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPhysics {
    rho_plus: f64,
    rho_minus: f64,
    theta: f64,
    theta_c: f64,
    #[serde(default = "default_gamma")]
    gamma: f64,
    #[serde(default)]
    matched_densities: bool,
    kappa: Option<f64>,
    #[serde(default = "default_coefficient")]
    mobility: Coefficient<f64>,
    #[serde(default = "default_coefficient")]
    mobility_r: Coefficient<f64>,
    #[serde(default = "default_coefficient")]
    viscosity_nu: Coefficient<f64>,
    #[serde(default = "default_coefficient")]
    viscosity_eta: Coefficient<f64>,
}

fn default_gamma() -> f64 {
    1.0
}

fn default_coefficient() -> Coefficient<f64> {
    Coefficient::Constant { value: 1.0 }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTime {
    h: f64,
    n_steps: i64,
    #[serde(default)]
    snapshot_every: i64,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct RawSolver {
    res_tol: Option<f64>,
    max_newton: Option<i64>,
    eps_barrier: Option<f64>,
    krylov: Option<String>,
    restart: Option<i64>,
    rel_tol: Option<f64>,
    abs_tol: Option<f64>,
    max_iter: Option<i64>,
    precond: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInitial {
    kind: String,
    mean: Option<f64>,
    amplitude: Option<f64>,
    seed: Option<u64>,
    center: Option<[f64; 2]>,
    radius: Option<f64>,
    width: Option<f64>,
    height: Option<f64>,
    #[serde(default = "default_substeps")]
    smooth_substeps: i64,
    smooth_time: Option<f64>,
}

fn default_substeps() -> i64 {
    2
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct RawOutput {
    dir: Option<String>,
}

// ---------- validation ----------

struct Check {
    violations: Vec<Violation>,
}

impl Check {
    fn new() -> Self {
        Self {
            violations: Vec::new(),
        }
    }

    fn require(&mut self, ok: bool, key: &str, constraint: &str, value: impl fmt::Display) {
        if !ok {
            self.violations.push(Violation {
                key: key.to_string(),
                constraint: constraint.to_string(),
                value: value.to_string(),
            });
        }
    }
}

/// Parses and validates a configuration file.
pub fn parse_config<F: Scalar>(path: &Path) -> Result<SimConfig<F>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}

/// Parses and validates configuration text.
pub fn parse_config_str<F: Scalar>(text: &str) -> Result<SimConfig<F>, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    validate(raw)
}

fn validate<F: Scalar>(raw: RawConfig) -> Result<SimConfig<F>, ConfigError> {
    let mut ck = Check::new();

    let model = match raw.model.as_str() {
        "agg" => Model::Agg,
        "qstokes" => Model::QStokes,
        other => {
            ck.require(false, "model", "one of {agg, qstokes}", other);
            Model::Agg
        }
    };

    ck.require(raw.grid.nx >= 2, "grid.nx", "nx >= 2", raw.grid.nx);
    ck.require(raw.grid.ny >= 2, "grid.ny", "ny >= 2", raw.grid.ny);
    ck.require(raw.grid.lx > 0.0, "grid.lx", "lx > 0", raw.grid.lx);
    ck.require(raw.grid.ly > 0.0, "grid.ly", "ly > 0", raw.grid.ly);

    let ph = &raw.physics;
    ck.require(
        ph.rho_plus > 0.0,
        "physics.rho_plus",
        "rho_plus > 0",
        ph.rho_plus,
    );
    ck.require(
        ph.rho_minus > 0.0,
        "physics.rho_minus",
        "rho_minus > 0",
        ph.rho_minus,
    );
    ck.require(
        ph.rho_plus != ph.rho_minus || ph.matched_densities,
        "physics.matched_densities",
        "rho_plus == rho_minus requires matched_densities = true",
        format!("{} == {}", ph.rho_plus, ph.rho_minus),
    );
    ck.require(
        ph.theta > 0.0 && ph.theta < ph.theta_c,
        "physics.theta",
        "0 < theta < theta_c",
        format!("theta={}, theta_c={}", ph.theta, ph.theta_c),
    );
    if model == Model::QStokes {
        ck.require(
            ph.gamma > 0.0,
            "physics.gamma",
            "gamma > 0 (Navier-slip friction)",
            ph.gamma,
        );
        ck.require(
            ph.mobility_r.lower_bound() > 0.0,
            "physics.mobility_r",
            "mobility_r > 0 on [-1, 1] for model qstokes",
            ph.mobility_r.lower_bound(),
        );
    }
    ck.require(
        ph.mobility.lower_bound() > 0.0,
        "physics.mobility",
        "mobility > 0 on [-1, 1]",
        ph.mobility.lower_bound(),
    );
    ck.require(
        ph.mobility_r.lower_bound() >= 0.0,
        "physics.mobility_r",
        "mobility_r >= 0 on [-1, 1]",
        ph.mobility_r.lower_bound(),
    );
    ck.require(
        ph.viscosity_nu.lower_bound() > 0.0,
        "physics.viscosity_nu",
        "viscosity_nu > 0 on [-1, 1]",
        ph.viscosity_nu.lower_bound(),
    );
    ck.require(
        ph.viscosity_eta.lower_bound() > 0.0,
        "physics.viscosity_eta",
        "viscosity_eta > 0 on [-1, 1]",
        ph.viscosity_eta.lower_bound(),
    );
    if let Some(kappa) = ph.kappa {
        ck.require(
            kappa >= (ph.theta_c - ph.theta).max(0.0),
            "physics.kappa",
            "kappa >= theta_c - theta (convex split)",
            kappa,
        );
    }

    ck.require(raw.time.h > 0.0, "time.h", "h > 0", raw.time.h);
    ck.require(
        raw.time.n_steps >= 1,
        "time.n_steps",
        "n_steps >= 1",
        raw.time.n_steps,
    );
    ck.require(
        raw.time.snapshot_every >= 0,
        "time.snapshot_every",
        "snapshot_every >= 0",
        raw.time.snapshot_every,
    );

    let sv = &raw.solver;
    let res_tol = sv.res_tol.unwrap_or(1e-10);
    let eps_barrier = sv.eps_barrier.unwrap_or(1e-9);
    ck.require(res_tol > 0.0, "solver.res_tol", "res_tol > 0", res_tol);
    ck.require(
        eps_barrier > 0.0 && eps_barrier < 1.0,
        "solver.eps_barrier",
        "0 < eps_barrier < 1",
        eps_barrier,
    );
    let max_newton = sv.max_newton.unwrap_or(50);
    ck.require(
        max_newton >= 1,
        "solver.max_newton",
        "max_newton >= 1",
        max_newton,
    );
    let rel_tol = sv.rel_tol.unwrap_or(1e-10);
    let abs_tol = sv.abs_tol.unwrap_or(1e-14);
    let max_iter = sv.max_iter.unwrap_or(2000);
    ck.require(rel_tol > 0.0, "solver.rel_tol", "rel_tol > 0", rel_tol);
    ck.require(abs_tol > 0.0, "solver.abs_tol", "abs_tol > 0", abs_tol);
    ck.require(max_iter >= 1, "solver.max_iter", "max_iter >= 1", max_iter);
    let restart = sv.restart.unwrap_or(50);
    ck.require(restart >= 1, "solver.restart", "restart >= 1", restart);
    let method = match sv.krylov.as_deref().unwrap_or("gmres") {
        "cg" => KrylovMethod::Cg,
        "bicgstab" => KrylovMethod::BiCgStab,
        "gmres" => KrylovMethod::Gmres(restart.max(1) as usize),
        other => {
            ck.require(
                false,
                "solver.krylov",
                "one of {cg, bicgstab, gmres}",
                other,
            );
            KrylovMethod::Gmres(50)
        }
    };
    let precond = match sv.precond.as_deref().unwrap_or("ilu0") {
        "none" => Precond::None,
        "jacobi" => Precond::Jacobi,
        "ilu0" => Precond::Ilu0,
        other => {
            ck.require(
                false,
                "solver.precond",
                "one of {none, jacobi, ilu0}",
                other,
            );
            Precond::Ilu0
        }
    };

    // initial condition
    let init = &raw.initial;
    let in_unit = |v: f64| v > -1.0 && v < 1.0;
    let kind = match init.kind.as_str() {
        "uniform" => {
            let mean = init.mean.unwrap_or(0.0);
            ck.require(in_unit(mean), "initial.mean", "mean in (-1, 1)", mean);
            InitialKind::Uniform { mean: F::of(mean) }
        }
        "random" => {
            let mean = init.mean.unwrap_or(0.0);
            let amplitude = init.amplitude.unwrap_or(0.05);
            ck.require(in_unit(mean), "initial.mean", "mean in (-1, 1)", mean);
            ck.require(
                amplitude >= 0.0,
                "initial.amplitude",
                "amplitude >= 0",
                amplitude,
            );
            ck.require(
                mean.abs() + amplitude <= 1.0,
                "initial.amplitude",
                "|mean| + amplitude <= 1 (phase field bounds)",
                format!("|{mean}| + {amplitude}"),
            );
            InitialKind::Random {
                mean: F::of(mean),
                amplitude: F::of(amplitude),
                seed: init.seed.unwrap_or(0),
            }
        }
        "bubble" => {
            let center = init
                .center
                .unwrap_or([raw.grid.lx / 2.0, raw.grid.ly / 2.0]);
            let radius = init.radius.unwrap_or(0.25);
            let width = init.width.unwrap_or(0.05);
            ck.require(
                center[0] >= 0.0
                    && center[0] <= raw.grid.lx
                    && center[1] >= 0.0
                    && center[1] <= raw.grid.ly,
                "initial.center",
                "bubble center inside the domain",
                format!("({}, {})", center[0], center[1]),
            );
            ck.require(radius > 0.0, "initial.radius", "radius > 0", radius);
            ck.require(
                radius <= raw.grid.lx.min(raw.grid.ly),
                "initial.radius",
                "radius fits inside the domain",
                radius,
            );
            ck.require(width > 0.0, "initial.width", "width > 0", width);
            InitialKind::Bubble {
                center: (F::of(center[0]), F::of(center[1])),
                radius: F::of(radius),
                width: F::of(width),
            }
        }
        "stratified" => {
            let height = init.height.unwrap_or(raw.grid.ly / 2.0);
            let width = init.width.unwrap_or(0.05);
            ck.require(
                height > 0.0 && height < raw.grid.ly,
                "initial.height",
                "interface height inside the domain",
                height,
            );
            ck.require(width > 0.0, "initial.width", "width > 0", width);
            InitialKind::Stratified {
                height: F::of(height),
                width: F::of(width),
            }
        }
        other => {
            ck.require(
                false,
                "initial.kind",
                "one of {uniform, random, bubble, stratified}",
                other,
            );
            InitialKind::Uniform { mean: F::zero() }
        }
    };
    ck.require(
        init.smooth_substeps >= 0,
        "initial.smooth_substeps",
        "smooth_substeps >= 0",
        init.smooth_substeps,
    );
    let smooth_time = init.smooth_time.unwrap_or(raw.time.h);
    ck.require(
        smooth_time >= 0.0,
        "initial.smooth_time",
        "smooth_time >= 0",
        smooth_time,
    );

    // threads cap from the environment (the engine is sequential; the cap
    // must still be a sensible number when set)
    if let Ok(t) = std::env::var("PHASEFIELD_THREADS") {
        let ok = t.parse::<usize>().map(|n| n >= 1).unwrap_or(false);
        ck.require(ok, "env.PHASEFIELD_THREADS", "positive integer", t);
    }

    if !ck.violations.is_empty() {
        return Err(ConfigError::Constraints(ck.violations));
    }

    let potential = PotentialParams::new(F::of(ph.theta), F::of(ph.theta_c), F::of(eps_barrier))
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    let coef = |c: &Coefficient<f64>| -> Coefficient<F> {
        match *c {
            Coefficient::Constant { value } => Coefficient::Constant {
                value: F::of(value),
            },
            Coefficient::Quadratic { c0, c2 } => Coefficient::Quadratic {
                c0: F::of(c0),
                c2: F::of(c2),
            },
        }
    };
    let params = ModelParams::new(
        F::of(ph.rho_plus),
        F::of(ph.rho_minus),
        ph.matched_densities,
        coef(&ph.mobility),
        coef(&ph.mobility_r),
        coef(&ph.viscosity_nu),
        coef(&ph.viscosity_eta),
        F::of(ph.gamma),
        potential,
        ph.kappa.map(F::of),
    )
    .map_err(|e| ConfigError::Parse(e.to_string()))?;

    Ok(SimConfig {
        model,
        nx: raw.grid.nx as usize,
        ny: raw.grid.ny as usize,
        lx: F::of(raw.grid.lx),
        ly: F::of(raw.grid.ly),
        params,
        h: F::of(raw.time.h),
        n_steps: raw.time.n_steps as usize,
        snapshot_every: raw.time.snapshot_every as usize,
        newton: NewtonConfig {
            res_tol: F::of(res_tol),
            max_newton: max_newton as usize,
            backtrack_factor: F::half(),
            max_backtracks: 40,
            eps_barrier: F::of(eps_barrier),
        },
        krylov: KrylovConfig {
            method,
            precond,
            rel_tol: F::of(rel_tol),
            abs_tol: F::of(abs_tol),
            max_iter: max_iter as usize,
        },
        initial: InitialCondition {
            kind,
            smooth_substeps: init.smooth_substeps as usize,
            smooth_time: F::of(smooth_time),
        },
        out_dir: PathBuf::from(raw.output.dir.clone().unwrap_or_else(|| "out".to_string())),
    })
}
