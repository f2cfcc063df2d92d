//! Batch driver: initial-condition generation, time-loop orchestration, and
//! output writing. The CLI binary is a thin wrapper over [`run_simulation`].

pub mod config;
pub mod output;

use crate::diagnostics::{energy_free, energy_kinetic, DiagRecord};
use crate::grid::{
    assemble_div, assemble_grad, assemble_laplace, assemble_viscous_form, cell_mean, BoundaryKind,
    FaceField, Field, Grid,
};
use crate::model_agg::{smooth_initial, step_agg, AggStepper, StateAgg};
use crate::model_qstokes::{step_qstokes, QsStepper, StateQs};
use crate::potential::{f0_second, kappa_min};
use crate::scalar::{norm2, Scalar};
use config::{ConfigError, InitialCondition, InitialKind, Model, SimConfig};
use output::{write_csv, write_vtk, OutputError, VtkSnapshot};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use thiserror::Error;

/// Process exit codes of the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success,
    ConfigError,
    SolverFailure,
    InvariantViolation,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::ConfigError => 2,
            ExitStatus::SolverFailure => 3,
            ExitStatus::InvariantViolation => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("solver failure at step {step}: {message}")]
    Solver { step: usize, message: String },
    #[error("invariant violation at step {step}: {message}")]
    Invariant { step: usize, message: String },
    #[error(transparent)]
    Output(#[from] OutputError),
}

impl RunError {
    pub fn exit_status(&self) -> ExitStatus {
        match self {
            RunError::Config(_) => ExitStatus::ConfigError,
            RunError::Solver { .. } => ExitStatus::SolverFailure,
            RunError::Invariant { .. } | RunError::Output(_) => ExitStatus::InvariantViolation,
        }
    }
}

/// Generates the (smoothed) initial phase field and the zero initial
/// velocity from a descriptor.
pub fn make_initial<F: Scalar>(
    ic: &InitialCondition<F>,
    grid: &Grid<F>,
) -> (Field<F>, FaceField<F>) {
    let raw = match ic.kind {
        InitialKind::Uniform { mean } => Field::constant(grid, mean),
        InitialKind::Random {
            mean,
            amplitude,
            seed,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut f = Field::zeros(grid);
            for v in f.values_mut() {
                let noise: f64 = rng.gen_range(-1.0..=1.0);
                *v = mean + amplitude * F::of(noise);
            }
            f.map(|s| s.max(-F::one()).min(F::one()))
        }
        InitialKind::Bubble {
            center,
            radius,
            width,
        } => Field::from_fn(grid, |x, y| {
            let dx = x - center.0;
            let dy = y - center.1;
            let r = (dx * dx + dy * dy).sqrt();
            ((radius - r) / width).tanh()
        }),
        InitialKind::Stratified { height, width } => {
            Field::from_fn(grid, |_x, y| ((height - y) / width).tanh())
        }
    };
    let phi0 = smooth_initial(&raw, ic.smooth_time, ic.smooth_substeps);
    (phi0, FaceField::zeros(grid))
}

/// Result of a completed run.
pub struct RunSummary<F: Scalar> {
    pub records: Vec<DiagRecord<F>>,
    pub csv_path: PathBuf,
}

fn initial_record<F: Scalar>(
    phi: &Field<F>,
    v: &FaceField<F>,
    p: &crate::params::ModelParams<F>,
) -> Result<DiagRecord<F>, RunError> {
    let e_free = energy_free(phi, p).map_err(|e| RunError::Invariant {
        step: 0,
        message: e.to_string(),
    })?;
    let e_kin = energy_kinetic(v, &p.density(phi));
    Ok(DiagRecord {
        step: 0,
        time: F::zero(),
        e_free,
        e_kin,
        e_tot: e_free + e_kin,
        dissipation: F::zero(),
        mean_phi: cell_mean(phi),
        min_phi: phi.min(),
        max_phi: phi.max(),
        energy_slack: F::zero(),
        newton_iters: 0,
        linear_iters: 0,
    })
}

fn snapshot_due(step: usize, n_steps: usize, every: usize) -> bool {
    step == 0 || step == n_steps || (every > 0 && step.is_multiple_of(every))
}

fn monitor<F: Scalar>(rec: &DiagRecord<F>, mean0: F, step: usize) -> Result<(), RunError> {
    let drift = (rec.mean_phi - mean0).abs();
    if drift > F::of(1e-10) {
        return Err(RunError::Invariant {
            step,
            message: format!("phase-field mean drift {drift:e} exceeds 1e-10"),
        });
    }
    if !(rec.max_phi < F::one() && rec.min_phi > -F::one()) {
        return Err(RunError::Invariant {
            step,
            message: "phase field left (-1, 1)".to_string(),
        });
    }
    if !rec.e_tot.is_finite() {
        return Err(RunError::Invariant {
            step,
            message: "non-finite energy".to_string(),
        });
    }
    Ok(())
}

/// Runs the configured simulation: `n_steps` implicit steps with diagnostics
/// per step, CSV at the end (also on abort, for the executed steps), and
/// VTK snapshots at the configured cadence.
pub fn run_simulation<F: Scalar>(cfg: &SimConfig<F>) -> Result<RunSummary<F>, RunError> {
    let grid = Grid::new(cfg.nx, cfg.ny, cfg.lx, cfg.ly)
        .map_err(|e| RunError::Config(ConfigError::Parse(e.to_string())))?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|source| {
        RunError::Output(OutputError::Io {
            path: cfg.out_dir.display().to_string(),
            source,
        })
    })?;
    let csv_path = cfg.out_dir.join("diagnostics.csv");

    let (phi0, v0) = make_initial(&cfg.initial, &grid);
    let mut records = Vec::with_capacity(cfg.n_steps + 1);
    records.push(initial_record(&phi0, &v0, &cfg.params)?);
    let mean0 = records[0].mean_phi;

    let mut result: Result<(), RunError> = Ok(());
    match cfg.model {
        Model::Agg => {
            let mut state = StateAgg::quiescent(phi0, &cfg.params);
            state.v = v0;
            let mut stepper = AggStepper::new(cfg.params, cfg.h, cfg.newton);
            write_snapshot_agg(cfg, &grid, &state, 0)?;
            for k in 1..=cfg.n_steps {
                match stepper.step(&state) {
                    Ok((next, mut rec)) => {
                        rec.step = k;
                        rec.time = F::of_usize(k) * cfg.h;
                        let check = monitor(&rec, mean0, k);
                        records.push(rec);
                        state = next;
                        if let Err(e) = check {
                            result = Err(e);
                            break;
                        }
                        if snapshot_due(k, cfg.n_steps, cfg.snapshot_every) {
                            write_snapshot_agg(cfg, &grid, &state, k)?;
                        }
                    }
                    Err(e) => {
                        result = Err(RunError::Solver {
                            step: k,
                            message: e.to_string(),
                        });
                        break;
                    }
                }
            }
        }
        Model::QStokes => {
            let mut state = StateQs::quiescent(phi0, &cfg.params);
            let mut stepper = QsStepper::new(cfg.params, cfg.h, cfg.newton);
            write_snapshot_qs(cfg, &grid, &state, 0)?;
            for k in 1..=cfg.n_steps {
                match stepper.step(&state) {
                    Ok((next, mut rec)) => {
                        rec.step = k;
                        rec.time = F::of_usize(k) * cfg.h;
                        let check = monitor(&rec, mean0, k);
                        records.push(rec);
                        state = next;
                        if let Err(e) = check {
                            result = Err(e);
                            break;
                        }
                        if snapshot_due(k, cfg.n_steps, cfg.snapshot_every) {
                            write_snapshot_qs(cfg, &grid, &state, k)?;
                        }
                    }
                    Err(e) => {
                        result = Err(RunError::Solver {
                            step: k,
                            message: e.to_string(),
                        });
                        break;
                    }
                }
            }
        }
    }

    // diagnostics stay complete for the executed steps even on abort
    write_csv(&records, &csv_path)?;
    result.map(|()| RunSummary { records, csv_path })
}

fn write_snapshot_agg<F: Scalar>(
    cfg: &SimConfig<F>,
    grid: &Grid<F>,
    state: &StateAgg<F>,
    step: usize,
) -> Result<(), RunError> {
    let path = cfg.out_dir.join(format!("snap_{step:06}.vtk"));
    let snap = VtkSnapshot {
        phi: &state.phi,
        potential: ("mu", &state.mu),
        pressure: ("lambda", &state.lambda),
        velocity: &state.v,
    };
    write_vtk(&snap, grid, &path).map_err(RunError::Output)
}

fn write_snapshot_qs<F: Scalar>(
    cfg: &SimConfig<F>,
    grid: &Grid<F>,
    state: &StateQs<F>,
    step: usize,
) -> Result<(), RunError> {
    let path = cfg.out_dir.join(format!("snap_{step:06}.vtk"));
    let snap = VtkSnapshot {
        phi: &state.phi,
        potential: ("omega", &state.omega),
        pressure: ("lambda0", &state.lambda0),
        velocity: &state.u,
    };
    write_vtk(&snap, grid, &path).map_err(RunError::Output)
}

/// Structural invariant suite for `--check-only`: operator identities,
/// potential convexity, and a uniform fixed-point smoke step on the
/// configured model. Prints one line per check.
pub fn check_only<F: Scalar>(cfg: &SimConfig<F>) -> Result<(), RunError> {
    let grid = Grid::new(cfg.nx, cfg.ny, cfg.lx, cfg.ly)
        .map_err(|e| RunError::Config(ConfigError::Parse(e.to_string())))?;
    let mut failures: Vec<String> = Vec::new();
    let mut report = |name: &str, pass: bool, detail: String| {
        println!(
            "check {}: {name} ({detail})",
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            failures.push(format!("{name}: {detail}"));
        }
    };

    // adjointness probes: ||(div + grad^T) x|| on random vectors
    let gradm = assemble_grad(&grid);
    let divm = assemble_div(&grid);
    let gt = gradm.transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = F::zero();
    for _ in 0..10 {
        let x: Vec<F> = (0..divm.cols())
            .map(|_| F::of(rng.gen_range(-1.0..1.0)))
            .collect();
        let a = divm.matvec(&x).expect("dims");
        let b = gt.matvec(&x).expect("dims");
        let diff: Vec<F> = a.iter().zip(&b).map(|(u, v)| *u + *v).collect();
        worst = worst.max(norm2(&diff));
    }
    report(
        "div = -grad^T",
        worst <= F::of(1e-12),
        format!("max probe residual {worst:e}"),
    );

    let lap = assemble_laplace(&grid);
    report(
        "laplacian symmetric",
        lap.verify_symmetry(F::of(1e-12)),
        "assembled matrix".to_string(),
    );
    let mut psd_ok = true;
    for _ in 0..20 {
        let x: Vec<F> = (0..lap.cols())
            .map(|_| F::of(rng.gen_range(-1.0..1.0)))
            .collect();
        if lap.quadratic_form(&x) > F::of(1e-10) {
            psd_ok = false;
        }
    }
    report(
        "laplacian negative semidefinite",
        psd_ok,
        "20 random probes".to_string(),
    );

    let ones = Field::constant(&grid, F::one());
    let bc = match cfg.model {
        Model::Agg => BoundaryKind::NoSlip,
        Model::QStokes => BoundaryKind::NavierSlip(cfg.params.gamma),
    };
    match assemble_viscous_form(&ones, &ones, bc) {
        Ok(a) => report(
            "viscous form symmetric",
            a.verify_symmetry(F::of(1e-12)),
            "assembled matrix".to_string(),
        ),
        Err(e) => report("viscous form symmetric", false, e.to_string()),
    }

    let kmin = kappa_min(&cfg.params.potential).kappa;
    report(
        "convex split admissible",
        cfg.params.split.kappa >= kmin,
        format!("kappa {} >= {}", cfg.params.split.kappa, kmin),
    );
    let mut convex_ok = true;
    for k in 0..200 {
        let s = F::of(-0.999 + 1.998 * k as f64 / 199.0);
        match f0_second(s, &cfg.params.potential, &cfg.params.split) {
            Ok(v) if v >= F::of(-1e-12) => {}
            _ => convex_ok = false,
        }
    }
    report(
        "split potential convex",
        convex_ok,
        "200 samples in (-1, 1)".to_string(),
    );

    // uniform fixed-point smoke step of the configured model
    let m = F::of(0.1);
    let phi = Field::constant(&grid, m);
    let smoke = match cfg.model {
        Model::Agg => {
            let state = StateAgg::quiescent(phi, &cfg.params);
            step_agg(&state, &cfg.params, cfg.h, &cfg.newton, &cfg.krylov)
                .map(|(out, _)| {
                    out.phi
                        .values()
                        .iter()
                        .all(|&s| (s - m).abs() <= F::of(1e-10))
                })
                .map_err(|e| e.to_string())
        }
        Model::QStokes => {
            let state = StateQs::quiescent(phi, &cfg.params);
            step_qstokes(&state, &cfg.params, cfg.h, &cfg.newton, &cfg.krylov)
                .map(|(out, _)| {
                    out.phi
                        .values()
                        .iter()
                        .all(|&s| (s - m).abs() <= F::of(1e-10))
                })
                .map_err(|e| e.to_string())
        }
    };
    match smoke {
        Ok(pass) => report(
            "uniform state is a fixed point",
            pass,
            "one implicit step".to_string(),
        ),
        Err(e) => report("uniform state is a fixed point", false, e),
    }

    if failures.is_empty() {
        Ok(())
    } else {
        Err(RunError::Invariant {
            step: 0,
            message: failures.join("; "),
        })
    }
}
