//! Explicit Lax-Friedrichs time stepping of the reachability PDE.
//!
//! The production path computes each new grid value in one pass from nine
//! neighbouring values with a precomputed time step. [`reference_solve`] is
//! the classic three-pass variant (Hamiltonian, global dissipation with
//! per-iteration CFL step, integration) and serves as an oracle.
//!
//! Each sweep reads only the previous field and writes a fresh one, so output
//! points are independent and the parallel sweep is bit-identical to the
//! serial one.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Dynamics, Gradient4};
use crate::error::{Error, Result};
use crate::grid::{
    gather_at, neighbor_value, Element, GridConfig, Index4, StateTables, Stencil, ValueField,
    NDIM,
};

/// One-sided and central differences along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AxisDifferences {
    pub minus: f64,
    pub plus: f64,
    pub central: f64,
}

pub fn central_differences(field: &ValueField<f64>, idx: Index4) -> [AxisDifferences; NDIM] {
    let dx = field.grid().spacings();
    let c = field.at(idx);
    std::array::from_fn(|d| {
        let minus = (c - neighbor_value(field, idx, d, -1)) / dx[d];
        let plus = (neighbor_value(field, idx, d, 1) - c) / dx[d];
        AxisDifferences {
            minus,
            plus,
            central: (plus + minus) / 2.0,
        }
    })
}

/// Computes one new grid value from its stencil. Implemented by the float
/// and fixed-point datapaths; shared by the batch sweep and the stream model.
pub trait PointKernel: Sync {
    type Elem: Element;

    fn grid(&self) -> &GridConfig;

    fn update(&self, idx: Index4, stencil: &Stencil<Self::Elem>, v0: Self::Elem) -> Self::Elem;
}

/// Local Lax-Friedrichs update in f64, shared by the kernel and [`step_point`].
#[inline(always)]
fn lf_update(
    stencil: &Stencil<f64>,
    spacings: &[f64; NDIM],
    v0: f64,
    dt: f64,
    terms: impl FnOnce(&Gradient4) -> (f64, [f64; NDIM]),
) -> f64 {
    let c = stencil.center;
    let mut p = [0.0; NDIM];
    let mut jump = [0.0; NDIM];
    for d in 0..NDIM {
        let dm = (c - stencil.minus[d]) / spacings[d];
        let dp = (stencil.plus[d] - c) / spacings[d];
        p[d] = (dp + dm) / 2.0;
        jump[d] = dp - dm;
    }
    let (h, alpha) = terms(&Gradient4(p));
    let mut ham = h;
    for d in 0..NDIM {
        ham += alpha[d] * (jump[d] * 0.5);
    }
    let next = c + ham * dt;
    // NaN in `next` must propagate so the solver can report it.
    if v0 < next {
        v0
    } else {
        next
    }
}

/// Float datapath for any [`Dynamics`].
pub struct FloatKernel<'a, D> {
    grid: GridConfig,
    tables: StateTables,
    dynamics: &'a D,
    dt: f64,
}

impl<'a, D: Dynamics> FloatKernel<'a, D> {
    pub fn new(grid: GridConfig, dynamics: &'a D, dt: f64) -> Self {
        Self {
            grid,
            tables: StateTables::new(&grid),
            dynamics,
            dt,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

impl<D: Dynamics> PointKernel for FloatKernel<'_, D> {
    type Elem = f64;

    fn grid(&self) -> &GridConfig {
        &self.grid
    }

    #[inline]
    fn update(&self, idx: Index4, stencil: &Stencil<f64>, v0: f64) -> f64 {
        lf_update(stencil, &self.grid.spacings(), v0, self.dt, |p| {
            self.dynamics.hamiltonian_terms_at(&self.tables, idx, p)
        })
    }
}

/// New value at `idx` after one step of size `dt`.
pub fn step_point<D: Dynamics>(
    vt: &ValueField<f64>,
    v0: &ValueField<f64>,
    idx: Index4,
    dt: f64,
    dynamics: &D,
) -> f64 {
    let grid = vt.grid();
    let stencil = crate::grid::gather_stencil(vt, idx);
    let z = grid.state(idx);
    lf_update(&stencil, &grid.spacings(), v0.at(idx), dt, |p| {
        dynamics.hamiltonian_terms(&z, p)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepStats {
    /// max |V_next - V_prev|
    pub epsilon: f64,
    pub all_finite: bool,
}

/// Apply `kernel` at every grid point. `vt` is not modified.
pub fn sweep_with<K: PointKernel>(
    kernel: &K,
    vt: &ValueField<K::Elem>,
    v0: &ValueField<K::Elem>,
) -> Result<(ValueField<K::Elem>, SweepStats)> {
    let grid = *kernel.grid();
    if !grid.same_geometry(vt.grid()) || !grid.same_geometry(v0.grid()) {
        return Err(Error::GridMismatch("sweep inputs do not share the kernel grid".into()));
    }
    let dims = grid.dims();
    let strides = grid.strides();
    let periodic = grid.periodic();
    let plane = strides[0];
    let src = vt.data();
    let init = v0.data();
    let mut out = vec![K::Elem::zero(); grid.len()];

    let stats = out
        .par_chunks_mut(plane)
        .enumerate()
        .map(|(i, chunk)| {
            let mut eps = 0.0_f64;
            let mut finite = true;
            let mut local = 0;
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    for l in 0..dims[3] {
                        let idx = [i, j, k, l];
                        let offset = i * plane + local;
                        let st = gather_at(src, offset, idx, &dims, &strides, &periodic);
                        let next = kernel.update(idx, &st, init[offset]);
                        finite &= next.is_finite();
                        eps = eps.max(K::Elem::abs_diff(next, st.center));
                        chunk[local] = next;
                        local += 1;
                    }
                }
            }
            SweepStats {
                epsilon: eps,
                all_finite: finite,
            }
        })
        .reduce(
            || SweepStats {
                epsilon: 0.0,
                all_finite: true,
            },
            |a, b| SweepStats {
                epsilon: a.epsilon.max(b.epsilon),
                all_finite: a.all_finite && b.all_finite,
            },
        );
    Ok((ValueField::from_raw_parts(grid, out), stats))
}

/// One float sweep with the given dynamics and step.
pub fn sweep<D: Dynamics>(
    vt: &ValueField<f64>,
    v0: &ValueField<f64>,
    dt: f64,
    dynamics: &D,
) -> Result<(ValueField<f64>, f64)> {
    let kernel = FloatKernel::new(*vt.grid(), dynamics, dt);
    let (next, stats) = sweep_with(&kernel, vt, v0)?;
    Ok((next, stats.epsilon))
}

/// Stable step `cfl / sum_d(alpha_d / dx_d)`.
pub fn compute_timestep(alpha_max: [f64; NDIM], grid: &GridConfig, cfl_factor: f64) -> Result<f64> {
    let dx = grid.spacings();
    let rate: f64 = (0..NDIM).map(|d| alpha_max[d].abs() / dx[d]).sum();
    if rate <= 0.0 {
        return Err(Error::StaticSystem);
    }
    Ok(cfl_factor / rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMode {
    FixedHorizon,
    Converge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSettings {
    pub mode: SolveMode,
    /// Seconds of backward time, fixed-horizon mode.
    pub horizon: f64,
    pub dt_override: Option<f64>,
    pub cfl_factor: f64,
    /// Stop once max |V_next - V_prev| drops below this, converge mode.
    pub epsilon_threshold: f64,
    pub max_iterations: usize,
    /// Worker count; `None` uses the ambient thread pool.
    pub threads: Option<usize>,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            mode: SolveMode::FixedHorizon,
            horizon: 0.5,
            dt_override: None,
            cfl_factor: 0.9,
            epsilon_threshold: 1e-3,
            max_iterations: 10_000,
            threads: None,
        }
    }
}

impl SolveSettings {
    pub fn fixed_horizon(horizon: f64) -> Self {
        Self {
            horizon,
            ..Self::default()
        }
    }

    pub fn converge(epsilon_threshold: f64) -> Self {
        Self {
            mode: SolveMode::Converge,
            epsilon_threshold,
            ..Self::default()
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt_override = Some(dt);
        self
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = Some(threads);
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SolveMode::FixedHorizon if !(self.horizon > 0.0 && self.horizon.is_finite()) => {
                return Err(Error::InvalidConfig("horizon must be positive".into()));
            }
            SolveMode::Converge if !(self.epsilon_threshold > 0.0) => {
                return Err(Error::InvalidConfig("epsilon_threshold must be positive".into()));
            }
            _ => {}
        }
        if !(self.cfl_factor > 0.0 && self.cfl_factor <= 1.0) {
            return Err(Error::InvalidConfig("cfl_factor must be in (0, 1]".into()));
        }
        if let Some(dt) = self.dt_override {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::InvalidConfig("dt_override must be positive".into()));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Sweeps needed to cover the horizon with steps of `dt`.
    pub fn horizon_iterations(&self, dt: f64) -> usize {
        // Slack absorbs representation error in e.g. 0.3 / 0.1.
        ((self.horizon / dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub(crate) fn resolve_dt(&self, alpha_max: impl FnOnce() -> [f64; NDIM], grid: &GridConfig) -> Result<f64> {
        match self.dt_override {
            Some(dt) => Ok(dt),
            None => compute_timestep(alpha_max(), grid, self.cfl_factor),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub dt: f64,
    pub final_epsilon: f64,
    /// Seconds.
    pub wall_time: f64,
    pub sweep_timings: Vec<f64>,
    /// Fixed-point saturation events; always zero for the float datapath.
    pub saturations: u64,
    pub warnings: Vec<String>,
}

/// Run `f` inside a pool with `threads` workers, or in the ambient pool.
pub(crate) fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Iterate `kernel` from `v0` under the schedule in `settings`, calling
/// `observe` after every sweep.
pub fn run_schedule<K: PointKernel>(
    kernel: &K,
    v0: &ValueField<K::Elem>,
    settings: &SolveSettings,
    dt: f64,
    mut observe: impl FnMut(usize, &ValueField<K::Elem>) + Send,
) -> Result<(ValueField<K::Elem>, SolveReport)> {
    settings.validate()?;
    let start = Instant::now();
    let planned = match settings.mode {
        SolveMode::FixedHorizon => settings.horizon_iterations(dt),
        SolveMode::Converge => settings.max_iterations,
    };
    with_threads(settings.threads, || {
        let mut report = SolveReport {
            dt,
            ..SolveReport::default()
        };
        let mut current = v0.clone();
        for it in 1..=planned {
            let t = Instant::now();
            let (next, stats) = sweep_with(kernel, &current, v0)?;
            report.sweep_timings.push(t.elapsed().as_secs_f64());
            if !stats.all_finite {
                return Err(Error::NumericalInstability { iteration: it });
            }
            report.iterations = it;
            report.final_epsilon = stats.epsilon;
            current = next;
            observe(it, &current);
            if settings.mode == SolveMode::Converge && stats.epsilon < settings.epsilon_threshold {
                break;
            }
        }
        if settings.mode == SolveMode::Converge && report.final_epsilon >= settings.epsilon_threshold {
            report.warnings.push(format!(
                "not converged after {} iterations (epsilon {:.3e})",
                report.iterations, report.final_epsilon
            ));
        }
        report.wall_time = start.elapsed().as_secs_f64();
        Ok((current, report))
    })?
}

/// The time step a solve with `settings` would use on `grid`.
pub fn resolve_timestep<D: Dynamics>(settings: &SolveSettings, grid: &GridConfig, dynamics: &D) -> Result<f64> {
    settings.validate()?;
    settings.resolve_dt(|| dynamics.global_alpha_bound(grid), grid)
}

/// Production solve in f64.
pub fn solve<D: Dynamics>(
    v0: &ValueField<f64>,
    dynamics: &D,
    settings: &SolveSettings,
) -> Result<(ValueField<f64>, SolveReport)> {
    settings.validate()?;
    let grid = *v0.grid();
    let dt = settings.resolve_dt(|| dynamics.global_alpha_bound(&grid), &grid)?;
    let kernel = FloatKernel::new(grid, dynamics, dt);
    run_schedule(&kernel, v0, settings, dt, |_, _| {})
}

/// Three-pass solve with global dissipation and a CFL step recomputed every
/// iteration. Serial and written independently of the production kernel.
///
/// `settings.dt_override` is ignored; the step always comes from the CFL bound.
pub fn reference_solve<D: Dynamics>(
    v0: &ValueField<f64>,
    dynamics: &D,
    settings: &SolveSettings,
) -> Result<(ValueField<f64>, SolveReport)> {
    settings.validate()?;
    let start = Instant::now();
    let grid = *v0.grid();
    let n = grid.len();
    let mut report = SolveReport::default();
    let mut current = v0.clone();
    let mut elapsed = 0.0;

    for it in 1..=settings.max_iterations {
        let t = Instant::now();

        // Pass 1: Hamiltonian and derivative range per axis.
        let mut ham = vec![0.0; n];
        let mut lo = [f64::INFINITY; NDIM];
        let mut hi = [f64::NEG_INFINITY; NDIM];
        for (o, idx) in grid.indices().enumerate() {
            let diffs = central_differences(&current, idx);
            let p = Gradient4(diffs.map(|a| a.central));
            for d in 0..NDIM {
                lo[d] = lo[d].min(p.0[d]);
                hi[d] = hi[d].max(p.0[d]);
            }
            ham[o] = dynamics.hamiltonian(&grid.state(idx), &p);
        }

        // Pass 2: dissipation from the worst case over the derivative box.
        let corners: Vec<Gradient4> = (0..1usize << NDIM)
            .map(|mask| {
                Gradient4(std::array::from_fn(|d| if mask >> d & 1 == 1 { hi[d] } else { lo[d] }))
            })
            .collect();
        let mut alpha_max = [0.0_f64; NDIM];
        for (o, idx) in grid.indices().enumerate() {
            let z = grid.state(idx);
            let mut alpha = [0.0_f64; NDIM];
            for corner in &corners {
                let a = dynamics.dissipation_coeffs(&z, corner);
                for d in 0..NDIM {
                    alpha[d] = alpha[d].max(a[d]);
                }
            }
            let diffs = central_differences(&current, idx);
            for d in 0..NDIM {
                ham[o] += alpha[d] * ((diffs[d].plus - diffs[d].minus) * 0.5);
                alpha_max[d] = alpha_max[d].max(alpha[d]);
            }
        }

        // Pass 3: integrate with the stable step and clamp to the target.
        let dt = compute_timestep(alpha_max, &grid, settings.cfl_factor)?;
        let mut eps = 0.0_f64;
        let mut next = Vec::with_capacity(n);
        for o in 0..n {
            let prev = current.data()[o];
            let candidate = prev + ham[o] * dt;
            let target = v0.data()[o];
            let value = if target < candidate { target } else { candidate };
            if !value.is_finite() {
                return Err(Error::NumericalInstability { iteration: it });
            }
            eps = eps.max((value - prev).abs());
            next.push(value);
        }
        current = ValueField::from_raw_parts(grid, next);
        elapsed += dt;
        report.iterations = it;
        report.dt = dt;
        report.final_epsilon = eps;
        report.sweep_timings.push(t.elapsed().as_secs_f64());

        let done = match settings.mode {
            SolveMode::FixedHorizon => elapsed >= settings.horizon * (1.0 - 1e-9),
            SolveMode::Converge => eps < settings.epsilon_threshold,
        };
        if done {
            break;
        }
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((current, report))
}
