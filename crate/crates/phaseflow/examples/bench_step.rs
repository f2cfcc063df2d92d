//! Step-cost probe at the acceptance scale (`cargo run --release --example bench_step`).

use phaseflow::grid::{Field, Grid};
use phaseflow::linsolve::NewtonConfig;
use phaseflow::model_agg::{smooth_initial, AggStepper, StateAgg};
use phaseflow::model_qstokes::{QsStepper, StateQs};
use phaseflow::params::ModelParams;
use phaseflow::potential::PotentialParams;
use std::time::Instant;

fn main() {
    let grid: Grid<f64> = Grid::new(32, 32, 1.0, 1.0).unwrap();
    let p = ModelParams::basic(
        1.0,
        0.5,
        PotentialParams::with_default_barrier(1.0, 2.0).unwrap(),
    )
    .unwrap();
    let phi0 = Field::from_fn(&grid, |x: f64, y: f64| {
        let r = ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt();
        ((0.25 - r) / 0.05).tanh()
    });
    let phi0 = smooth_initial(&phi0, 1e-3, 2);
    let ncfg = NewtonConfig::default();

    let mut state = StateAgg::quiescent(phi0.clone(), &p);
    let mut stepper = AggStepper::new(p, 1e-3, ncfg);
    let t0 = Instant::now();
    let (mut newton, mut linear) = (0, 0);
    for _ in 0..20 {
        let (next, rec) = stepper.step(&state).expect("model I step");
        newton += rec.newton_iters;
        linear += rec.linear_iters;
        state = next;
    }
    println!(
        "model I:  20 steps in {:?} ({newton} newton, {linear} linear solves)",
        t0.elapsed()
    );

    let mut state = StateQs::quiescent(phi0, &p);
    let mut stepper = QsStepper::new(p, 1e-3, ncfg);
    let t0 = Instant::now();
    let (mut newton, mut linear) = (0, 0);
    for _ in 0..20 {
        let (next, rec) = stepper.step(&state).expect("model II step");
        newton += rec.newton_iters;
        linear += rec.linear_iters;
        state = next;
    }
    println!(
        "model II: 20 steps in {:?} ({newton} newton, {linear} linear solves)",
        t0.elapsed()
    );
}
