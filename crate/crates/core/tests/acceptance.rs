//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the summary always reaches the console.

use std::f64::consts::{PI, TAU};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use hjreach::config::RunConfig;
use hjreach::dataflow::{estimate_cycles, LineBufferModel, StreamConfig};
use hjreach::dynamics::{CarControl, CarState, DubinsCar, Dynamics, Gradient4};
use hjreach::fixedpoint::{max_abs_error, quantize, solve_fixed, FixedKernel, Q5_27};
use hjreach::grid::{GridConfig, ValueField};
use hjreach::safety::{
    build_initial_values, interpolate_value, AdversarialDriver, Simulation, DEFAULT_THRESHOLD, PHYSICAL_RADIUS,
};
use hjreach::solver::{
    reference_solve, resolve_timestep, run_schedule, solve, sweep_with, FloatKernel, SolveReport, SolveSettings,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn config(name: &str) -> RunConfig {
    RunConfig::from_path(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

struct FullRun {
    cfg: RunConfig,
    car: DubinsCar,
    v0: ValueField<f64>,
    float: ValueField<f64>,
    report: SolveReport,
}

fn full_run() -> FullRun {
    let cfg = config("env1.toml");
    let car = DubinsCar::new(cfg.dynamics).unwrap();
    let v0 = build_initial_values(&cfg.environment, &cfg.grid).unwrap();
    let (float, report) = solve(&v0, &car, &cfg.solver).unwrap();
    FullRun {
        cfg,
        car,
        v0,
        float,
        report,
    }
}

fn criterion_1(run: &FullRun) -> Check {
    let r = &run.report;
    let detail = format!("{} iterations at dt {} in {:.2} s", r.iterations, r.dt, r.wall_time);
    if r.iterations == 67 && r.dt == 0.007497 && r.wall_time < 600.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2(run: &FullRun) -> Check {
    let (fixed, report) = solve_fixed(&run.v0, &run.car, &run.cfg.solver).map_err(|e| e.to_string())?;
    let err = max_abs_error(&run.float, &fixed).map_err(|e| e.to_string())?;
    let detail = format!(
        "max |fixed - float| = {err:.3e} over {} iterations, {} saturations",
        report.iterations, report.saturations
    );
    if (1e-8..=5e-6).contains(&err) && report.iterations == 67 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bits_equal_f64(a: &ValueField<f64>, b: &ValueField<f64>) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_3() -> Check {
    let car = DubinsCar::new(Default::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut points = 0;
    for case in 0..50 {
        let n4 = rng.gen_range(4..=12usize);
        let dims = [rng.gen_range(4..=12), rng.gen_range(4..=12), rng.gen_range(4..=12), n4];
        let divisors: Vec<usize> = (1..=4).filter(|d| n4 % d == 0).collect();
        let n_pe = divisors[rng.gen_range(0..divisors.len())];
        let grid = GridConfig::new(
            dims,
            [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0, rng.gen_range(-PI..PI)],
            [rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5), rng.gen_range(0.2..0.6), TAU / n4 as f64],
            [false, false, false, true],
        )
        .unwrap();
        let vt = ValueField::from_fn(grid, |_| rng.gen_range(-2.0..2.0));
        let v0 = ValueField::from_fn(grid, |_| rng.gen_range(-2.0..3.0));
        let dt = resolve_timestep(&SolveSettings::default(), &grid, &car).unwrap();
        let cfg = StreamConfig {
            n_pe,
            ..StreamConfig::default()
        };
        let model = LineBufferModel::new(&grid, &cfg).map_err(|e| e.to_string())?;

        let fk = FloatKernel::new(grid, &car, dt);
        let streamed = model.run(&fk, &vt, &v0).map_err(|e| e.to_string())?;
        let (batch, _) = sweep_with(&fk, &vt, &v0).unwrap();
        if !bits_equal_f64(&streamed.field, &batch) || streamed.reads != grid.len() {
            return Err(format!("float mismatch on case {case}, dims {dims:?}, n_pe {n_pe}"));
        }

        let qk = FixedKernel::new(grid, &car, dt).unwrap();
        let (qt, _) = quantize(&vt).unwrap();
        let (q0, _) = quantize(&v0).unwrap();
        let streamed = model.run(&qk, &qt, &q0).map_err(|e| e.to_string())?;
        let (batch, _) = sweep_with(&qk, &qt, &q0).unwrap();
        if streamed.field.data() != batch.data() {
            return Err(format!("fixed mismatch on case {case}, dims {dims:?}, n_pe {n_pe}"));
        }
        points += grid.len();
    }
    Ok(format!("50 random grids ({points} points) bit-identical in f64 and Q5.27"))
}

fn criterion_4() -> Check {
    let est = estimate_cycles(&GridConfig::room_6x4(), 67, &StreamConfig::default()).map_err(|e| e.to_string())?;
    let cycle_err = (est.cycles as f64 - 44_155_209.0).abs() / 44_155_209.0;
    let latency_err = (est.latency - 0.176).abs() / 0.176;
    let detail = format!(
        "{} cycles (relative error {:.1e}), {:.4} s ({:.3}% off), {:.2} Hz",
        est.cycles,
        cycle_err,
        est.latency,
        100.0 * latency_err,
        est.rate_hz
    );
    if cycle_err <= 0.01 && latency_err <= 0.01 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_5() -> Check {
    let car = DubinsCar::new(Default::default()).unwrap();
    let grid = GridConfig::new(
        [12, 12, 8, 12],
        [0.0, 0.0, 0.0, -PI],
        [0.5, 0.35, 0.5, TAU / 12.0],
        [false, false, false, true],
    )
    .unwrap();
    let v0 = ValueField::from_fn(grid, |i| {
        let z = grid.state(i);
        (z[0] - 2.75).hypot(z[1] - 1.9) - 0.75
    });
    let dt = resolve_timestep(&SolveSettings::default(), &grid, &car).unwrap();
    let settings = SolveSettings::fixed_horizon(20.0 * dt);
    let (fast, fr) = solve(&v0, &car, &settings).map_err(|e| e.to_string())?;
    let (slow, sr) = reference_solve(&v0, &car, &settings).map_err(|e| e.to_string())?;
    let diff = max_abs_error(&fast, &slow).unwrap();
    let detail = format!(
        "{} vs {} iterations, dt {:.6e} vs {:.6e}, max diff {diff:.3e}",
        fr.iterations, sr.iterations, fr.dt, sr.dt
    );
    if fr.iterations == 20 && sr.iterations == 20 && (fr.dt - sr.dt).abs() <= 1e-15 && diff <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Interpolates along one axis at a time, recursing on slices.
fn nested_interpolation(field: &ValueField<f64>, z: [f64; 4]) -> f64 {
    fn rec(field: &ValueField<f64>, z: &[f64; 4], fixed: &mut [usize; 4], d: usize) -> f64 {
        if d == 4 {
            return field.get(*fixed).unwrap();
        }
        let g = field.grid();
        let n = g.dims()[d];
        let mut t = (z[d] - g.mins()[d]) / g.spacings()[d];
        if g.periodic()[d] {
            t = t.rem_euclid(n as f64);
        }
        let lo = (t.floor() as usize).min(if g.periodic()[d] { n - 1 } else { n - 2 });
        let hi = if g.periodic()[d] { (lo + 1) % n } else { lo + 1 };
        fixed[d] = lo;
        let a = rec(field, z, fixed, d + 1);
        fixed[d] = hi;
        let b = rec(field, z, fixed, d + 1);
        a + (t - lo as f64) * (b - a)
    }
    rec(field, &z, &mut [0; 4], 0)
}

fn criterion_6(run: &FullRun) -> Check {
    let mut notes = Vec::new();

    // Clamp and monotonicity on every iteration of the full-size solve.
    let kernel = FloatKernel::new(run.cfg.grid, &run.car, run.report.dt);
    let mut prev = run.v0.clone();
    let mut worst_growth = f64::NEG_INFINITY;
    let mut clamp_ok = true;
    run_schedule(&kernel, &run.v0, &run.cfg.solver, run.report.dt, |_, next| {
        for ((p, n), t) in prev.data().iter().zip(next.data()).zip(run.v0.data()) {
            clamp_ok &= n <= t;
            if *p <= 0.0 {
                worst_growth = worst_growth.max(*n);
            }
        }
        prev = next.clone();
    })
    .map_err(|e| e.to_string())?;
    if !clamp_ok {
        return Err("clamp V <= V0 violated".into());
    }
    if worst_growth > 1e-6 {
        return Err(format!("sub-zero set shrank: a value rose to {worst_growth:.3e}"));
    }
    notes.push(format!("clamp exact, sub-zero set monotone (max {worst_growth:.1e})"));

    // Constant field is a fixed point in both datapaths.
    let small = GridConfig::new([6, 5, 4, 8], [0.0, 0.0, 0.0, -PI], [0.3, 0.3, 0.5, TAU / 8.0], [false, false, false, true])
        .unwrap();
    let c = ValueField::constant(small, 0.37);
    let (out, _) = sweep_with(&FloatKernel::new(small, &run.car, 0.01), &c, &c).unwrap();
    let (qc, _) = quantize(&c).unwrap();
    let (qout, _) = sweep_with(&FixedKernel::new(small, &run.car, 0.01).unwrap(), &qc, &qc).unwrap();
    if out != c || qout != qc {
        return Err("constant field moved".into());
    }
    notes.push("constant fixed point exact".into());

    // Determinism across thread counts.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rv = ValueField::from_fn(small, |_| rng.gen_range(-1.0..1.0));
    let base = SolveSettings::fixed_horizon(0.1);
    let runs: Vec<ValueField<f64>> = [1, 2, 3, 8]
        .iter()
        .map(|&t| solve(&rv, &run.car, &base.clone().with_threads(t)).unwrap().0)
        .collect();
    if !runs.iter().all(|r| bits_equal_f64(r, &runs[0])) {
        return Err("thread count changed the result".into());
    }
    let fixed_runs: Vec<ValueField<Q5_27>> = [1, 4]
        .iter()
        .map(|&t| solve_fixed(&rv, &run.car, &base.clone().with_threads(t)).unwrap().0)
        .collect();
    if fixed_runs[0] != fixed_runs[1] {
        return Err("thread count changed the fixed result".into());
    }
    notes.push("1/2/3/8 threads bit-exact".into());

    // Argmax over sampled controls.
    let p = run.car.params();
    for _ in 0..500 {
        let z = [rng.gen_range(0.0..6.0), rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0), rng.gen_range(-PI..PI)];
        let g = Gradient4(std::array::from_fn(|_| rng.gen_range(-2.0..2.0)));
        let best = g.dot(&run.car.flow(&z, &run.car.optimal_control(&z, &g)));
        for i in 0..=20 {
            for j in 0..=20 {
                let u = CarControl::new(
                    p.a_min + (p.a_max - p.a_min) * i as f64 / 20.0,
                    p.delta_min + (p.delta_max - p.delta_min) * j as f64 / 20.0,
                );
                if g.dot(&run.car.flow(&z, &u)) > best {
                    return Err(format!("sampled control beats the optimum at {z:?}"));
                }
            }
        }
    }
    notes.push("argmax holds over 441 controls x 500 states".into());

    // Interpolation against the nested oracle.
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let z = [
            rng.gen_range(0.0..=run.cfg.grid.node_max(0)),
            rng.gen_range(0.0..=run.cfg.grid.node_max(1)),
            rng.gen_range(0.0..=run.cfg.grid.node_max(2)),
            rng.gen_range(-TAU..TAU),
        ];
        let got = interpolate_value(&run.float, &CarState::from_array(z)).unwrap();
        worst = worst.max((got - nested_interpolation(&run.float, z)).abs());
    }
    if worst > 1e-12 {
        return Err(format!("interpolation differs from oracle by {worst:.3e}"));
    }
    notes.push(format!("interpolation oracle diff {worst:.1e}"));
    Ok(notes.join("; "))
}

fn criterion_7() -> Check {
    let mut notes = Vec::new();
    for name in ["env1.toml", "env2.toml", "env3.toml"] {
        let cfg = config(name);
        let car = DubinsCar::new(cfg.dynamics).unwrap();
        let v0 = build_initial_values(&cfg.environment, &cfg.grid).unwrap();
        let (brt, _) = solve(&v0, &car, &cfg.solver).map_err(|e| e.to_string())?;
        let mut closest = f64::INFINITY;
        let mut engaged = 0;
        let starts = [CarState::new(0.3, 0.3, 0.0, 0.0), CarState::new(5.6, 3.6, 1.0, 3.0)];
        for start in starts {
            let mut sim = Simulation::new(car, &cfg.grid, start);
            let mut driver = AdversarialDriver::new(&cfg.environment, 5.0);
            let steps = (30.0 / sim.dt).round() as usize;
            for _ in 0..steps {
                let user = driver.control(&sim.state, &car, sim.dt);
                let rec = sim.step(&brt, user).map_err(|e| e.to_string())?;
                let v = interpolate_value(&brt, &rec.state).unwrap();
                if rec.intervening != (v < DEFAULT_THRESHOLD) {
                    return Err(format!("{name}: filter engaged at V = {v}"));
                }
                engaged += rec.intervening as usize;
                closest = closest.min(cfg.environment.nearest_center_distance(sim.state.x, sim.state.y));
            }
        }
        if closest <= PHYSICAL_RADIUS {
            return Err(format!("{name}: car came within {closest:.3} m of a cone"));
        }
        notes.push(format!("{name} closest {closest:.2} m, {engaged} overrides"));
    }
    Ok(notes.join("; "))
}

fn criterion_8(run: &FullRun) -> Check {
    let detail = format!(
        "67-iteration full-size float solve took {:.2} s on {} thread(s)",
        run.report.wall_time,
        rayon::current_num_threads()
    );
    if run.report.wall_time <= 10.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let start = Instant::now();
    let run = full_run();
    let results: Vec<(&str, Check)> = vec![
        ("1 iteration count", guarded(|| criterion_1(&run))),
        ("2 fixed vs float error", guarded(|| criterion_2(&run))),
        ("3 streamed equals batch", guarded(criterion_3)),
        ("4 cycle model", guarded(criterion_4)),
        ("5 reference equivalence", guarded(criterion_5)),
        ("6 invariant suite", guarded(|| criterion_6(&run))),
        ("7 closed-loop safety", guarded(criterion_7)),
        ("8 performance", guarded(|| criterion_8(&run))),
    ];
    let mut failed = 0;
    for (name, result) in &results {
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1} s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
