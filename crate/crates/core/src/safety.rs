//! Obstacle fields, value interpolation, the safety filter and the plant.

use std::f64::consts::{PI, TAU};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::dynamics::{CarControl, CarState, DubinsCar, Dynamics, Gradient4};
use crate::error::{Error, Result};
use crate::grid::{GridConfig, ValueField, HEADING_AXIS, NDIM};

pub const DEFAULT_THRESHOLD: f64 = 0.15;
/// Cone radius used for collision checks; obstacles carry the inflated radius.
pub const PHYSICAL_RADIUS: f64 = 0.08;
pub const EFFECTIVE_RADIUS: f64 = 0.75;
pub const PLANT_DT: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

impl Obstacle {
    pub fn new(x: f64, y: f64, r: f64) -> Self {
        Self { x, y, r }
    }

    /// Signed distance to the inflated disc.
    pub fn value(&self, x: f64, y: f64) -> f64 {
        (x - self.x).hypot(y - self.y) - self.r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    pub width: f64,
    pub height: f64,
    pub obstacles: Vec<Obstacle>,
}

impl Environment {
    pub fn new(width: f64, height: f64, obstacles: Vec<Obstacle>) -> Result<Self> {
        let env = Self {
            width,
            height,
            obstacles,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::InvalidConfig("room dimensions must be positive".into()));
        }
        for (k, o) in self.obstacles.iter().enumerate() {
            if !(o.r > 0.0 && o.r.is_finite()) {
                return Err(Error::InvalidConfig(format!("obstacle {k}: radius must be positive")));
            }
            if !(0.0..=self.width).contains(&o.x) || !(0.0..=self.height).contains(&o.y) {
                return Err(Error::InvalidConfig(format!(
                    "obstacle {k} at ({}, {}) lies outside the {}x{} room",
                    o.x, o.y, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn value(&self, x: f64, y: f64) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.value(x, y))
            .fold(f64::INFINITY, f64::min)
    }

    /// Distance from a point to the nearest cone center.
    pub fn nearest_center_distance(&self, x: f64, y: f64) -> f64 {
        self.obstacles
            .iter()
            .map(|o| (x - o.x).hypot(y - o.y))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Target-set value on every node: the minimum over obstacles of the
/// distance to each inflated disc. Independent of speed and heading.
pub fn build_initial_values(env: &Environment, grid: &GridConfig) -> Result<ValueField<f64>> {
    env.validate()?;
    if env.obstacles.is_empty() {
        return Err(Error::InvalidConfig("at least one obstacle is required".into()));
    }
    let xs: Vec<f64> = (0..grid.dims()[0]).map(|i| grid.coord(0, i)).collect();
    let ys: Vec<f64> = (0..grid.dims()[1]).map(|j| grid.coord(1, j)).collect();
    ValueField::new(*grid, {
        let mut data = Vec::with_capacity(grid.len());
        let inner = grid.strides()[1];
        for &x in &xs {
            for &y in &ys {
                let v = env.value(x, y);
                data.extend(std::iter::repeat(v).take(inner));
            }
        }
        data
    })
}

/// Cell index and fraction along one axis.
fn locate(grid: &GridConfig, d: usize, value: f64) -> Result<(usize, usize, f64)> {
    let n = grid.dims()[d];
    let t = (value - grid.mins()[d]) / grid.spacings()[d];
    if grid.periodic()[d] {
        let t = t.rem_euclid(n as f64);
        let i0 = (t.floor() as usize).min(n - 1);
        return Ok((i0, (i0 + 1) % n, t - i0 as f64));
    }
    let tol = 1e-9;
    if !(t >= -tol && t <= (n - 1) as f64 + tol) {
        return Err(Error::OutOfDomain {
            axis: d,
            value,
            min: grid.mins()[d],
            max: grid.node_max(d),
        });
    }
    let t = t.clamp(0.0, (n - 1) as f64);
    let i0 = (t.floor() as usize).min(n - 2);
    Ok((i0, i0 + 1, t - i0 as f64))
}

/// Multilinear interpolation over the 16 corners of the enclosing cell.
pub fn interpolate_value(field: &ValueField<f64>, s: &CarState) -> Result<f64> {
    let grid = field.grid();
    let z = s.to_array();
    let mut cells = [(0, 0, 0.0); NDIM];
    for d in 0..NDIM {
        cells[d] = locate(grid, d, z[d])?;
    }
    let strides = grid.strides();
    let data = field.data();
    let mut acc = 0.0;
    for corner in 0..16usize {
        let mut w = 1.0;
        let mut offset = 0;
        for d in 0..NDIM {
            let (i0, i1, f) = cells[d];
            if corner >> d & 1 == 1 {
                w *= f;
                offset += i1 * strides[d];
            } else {
                w *= 1.0 - f;
                offset += i0 * strides[d];
            }
        }
        acc += w * data[offset];
    }
    Ok(acc)
}

pub fn should_intervene(field: &ValueField<f64>, s: &CarState, threshold: f64) -> Result<bool> {
    Ok(interpolate_value(field, s)? < threshold)
}

/// Central-difference gradient of the interpolated value, step one grid
/// spacing per axis. Samples are kept inside the domain on bounded axes.
pub fn interpolated_gradient(field: &ValueField<f64>, s: &CarState) -> Result<Gradient4> {
    let grid = field.grid();
    let z = s.to_array();
    let mut p = [0.0; NDIM];
    for d in 0..NDIM {
        let h = grid.spacings()[d];
        let (mut lo, mut hi) = (z[d] - h, z[d] + h);
        if !grid.periodic()[d] {
            lo = lo.max(grid.mins()[d]);
            hi = hi.min(grid.node_max(d));
        }
        let mut a = z;
        let mut b = z;
        a[d] = lo;
        b[d] = hi;
        let va = interpolate_value(field, &CarState::from_array(a))?;
        let vb = interpolate_value(field, &CarState::from_array(b))?;
        p[d] = if hi > lo { (vb - va) / (hi - lo) } else { 0.0 };
    }
    Ok(Gradient4(p))
}

pub fn safe_control(field: &ValueField<f64>, s: &CarState, car: &DubinsCar) -> Result<CarControl> {
    let p = interpolated_gradient(field, s)?;
    Ok(car.optimal_control(&s.to_array(), &p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FilterOutput {
    pub control: CarControl,
    pub intervening: bool,
    pub value: f64,
}

/// User control, clamped to bounds, unless the state is inside the
/// threshold band; then the value-optimal control.
pub fn filter_loop(
    field: &ValueField<f64>,
    s: &CarState,
    user: CarControl,
    car: &DubinsCar,
    threshold: f64,
) -> Result<FilterOutput> {
    let value = interpolate_value(field, s)?;
    if value < threshold {
        Ok(FilterOutput {
            control: safe_control(field, s, car)?,
            intervening: true,
            value,
        })
    } else {
        Ok(FilterOutput {
            control: car.clamp_control(user),
            intervening: false,
            value,
        })
    }
}

pub fn wrap_angle(theta: f64) -> f64 {
    if (-PI..PI).contains(&theta) {
        return theta;
    }
    let w = (theta + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to exactly TAU
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// One RK4 step with the control held constant.
pub fn simulate_step(car: &DubinsCar, s: CarState, u: CarControl, dt: f64) -> CarState {
    let z = s.to_array();
    let add = |a: [f64; NDIM], k: [f64; NDIM], h: f64| std::array::from_fn(|d| a[d] + h * k[d]);
    let k1 = car.flow(&z, &u);
    let k2 = car.flow(&add(z, k1, dt / 2.0), &u);
    let k3 = car.flow(&add(z, k2, dt / 2.0), &u);
    let k4 = car.flow(&add(z, k3, dt), &u);
    let mut next: [f64; NDIM] =
        std::array::from_fn(|d| z[d] + dt / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]));
    next[HEADING_AXIS] = wrap_angle(next[HEADING_AXIS]);
    CarState::from_array(next)
}

/// Most recent value field plus a staleness flag. Re-solves are tagged with a
/// generation; only the newest requested generation may be installed.
#[derive(Debug)]
pub struct BrtSlot {
    inner: Mutex<SlotState>,
}

#[derive(Debug)]
struct SlotState {
    field: Arc<ValueField<f64>>,
    requested: u64,
    installed: u64,
}

impl BrtSlot {
    pub fn new(field: ValueField<f64>) -> Self {
        Self {
            inner: Mutex::new(SlotState {
                field: Arc::new(field),
                requested: 0,
                installed: 0,
            }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, SlotState> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Mark the field stale and return the generation of the new request.
    pub fn request(&self) -> u64 {
        let mut st = self.lock();
        st.requested += 1;
        st.requested
    }

    /// Install a solved field. Returns false if a newer request superseded it.
    pub fn install(&self, generation: u64, field: ValueField<f64>) -> bool {
        let mut st = self.lock();
        if generation != st.requested {
            return false;
        }
        st.field = Arc::new(field);
        st.installed = generation;
        true
    }

    pub fn current(&self) -> (Arc<ValueField<f64>>, bool) {
        let st = self.lock();
        (Arc::clone(&st.field), st.installed != st.requested)
    }

    pub fn is_stale(&self) -> bool {
        self.current().1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub state: CarState,
    pub user_control: CarControl,
    pub applied_control: CarControl,
    pub intervening: bool,
    pub value: f64,
}

/// Closed-loop plant: filter then RK4, with the state kept inside the
/// value grid (walls stop motion, speed stays in the tabulated range).
#[derive(Debug, Clone)]
pub struct Simulation {
    pub car: DubinsCar,
    pub state: CarState,
    pub threshold: f64,
    pub dt: f64,
    bounds: [(f64, f64); 3],
}

impl Simulation {
    pub fn new(car: DubinsCar, grid: &GridConfig, state: CarState) -> Self {
        let bounds = std::array::from_fn(|d| (grid.mins()[d], grid.node_max(d)));
        let mut sim = Self {
            car,
            state,
            threshold: DEFAULT_THRESHOLD,
            dt: PLANT_DT,
            bounds,
        };
        sim.state = sim.confine(state);
        sim
    }

    pub fn confine(&self, s: CarState) -> CarState {
        let [(x0, x1), (y0, y1), (v0, v1)] = self.bounds;
        CarState {
            x: s.x.clamp(x0, x1),
            y: s.y.clamp(y0, y1),
            v: s.v.clamp(v0, v1),
            theta: wrap_angle(s.theta),
        }
    }

    pub fn reset(&mut self, s: CarState) {
        self.state = self.confine(s);
    }

    pub fn step(&mut self, field: &ValueField<f64>, user: CarControl) -> Result<StepRecord> {
        let out = filter_loop(field, &self.state, user, &self.car, self.threshold)?;
        let record = StepRecord {
            state: self.state,
            user_control: user,
            applied_control: out.control,
            intervening: out.intervening,
            value: out.value,
        };
        self.state = self.confine(simulate_step(&self.car, self.state, out.control, self.dt));
        Ok(record)
    }
}

/// Scripted driver that floors the throttle and steers at one cone after
/// another, switching targets every `dwell` seconds.
#[derive(Debug, Clone)]
pub struct AdversarialDriver {
    targets: Vec<(f64, f64)>,
    dwell: f64,
    elapsed: f64,
}

impl AdversarialDriver {
    pub fn new(env: &Environment, dwell: f64) -> Self {
        Self {
            targets: env.obstacles.iter().map(|o| (o.x, o.y)).collect(),
            dwell,
            elapsed: 0.0,
        }
    }

    pub fn control(&mut self, s: &CarState, car: &DubinsCar, dt: f64) -> CarControl {
        let k = ((self.elapsed / self.dwell) as usize) % self.targets.len().max(1);
        self.elapsed += dt;
        let Some(&(tx, ty)) = self.targets.get(k) else {
            return CarControl::new(car.params().a_max, 0.0);
        };
        let bearing = (ty - s.y).atan2(tx - s.x);
        let err = wrap_angle(bearing - s.theta);
        let p = car.params();
        CarControl::new(p.a_max, if err >= 0.0 { p.delta_max } else { p.delta_min })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DubinsParams;
    use crate::solver::{solve, SolveSettings};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn car() -> DubinsCar {
        DubinsCar::new(DubinsParams::default()).unwrap()
    }

    fn small_grid() -> GridConfig {
        GridConfig::new(
            [7, 6, 5, 8],
            [0.0, 0.0, 0.0, -PI],
            [0.5, 0.4, 0.5, TAU / 8.0],
            [false, false, false, true],
        )
        .unwrap()
    }

    fn one_cone() -> Environment {
        Environment::new(6.0, 4.0, vec![Obstacle::new(3.0, 2.0, EFFECTIVE_RADIUS)]).unwrap()
    }

    /// Interpolates one axis at a time, innermost first, by recursion on
    /// lower-dimensional slices.
    fn nested_oracle(field: &ValueField<f64>, z: [f64; 4]) -> f64 {
        fn rec(field: &ValueField<f64>, z: &[f64; 4], fixed: &mut [usize; 4], d: usize) -> f64 {
            if d == 4 {
                return field.get(*fixed).unwrap();
            }
            let g = field.grid();
            let n = g.dims()[d];
            let h = g.spacings()[d];
            let mut t = (z[d] - g.mins()[d]) / h;
            if g.periodic()[d] {
                t = t.rem_euclid(n as f64);
            }
            let mut lo = t.floor() as usize;
            if !g.periodic()[d] && lo == n - 1 {
                lo -= 1;
            }
            let hi = if g.periodic()[d] { (lo + 1) % n } else { lo + 1 };
            let f = t - lo as f64;
            fixed[d] = lo;
            let a = rec(field, z, fixed, d + 1);
            fixed[d] = hi;
            let b = rec(field, z, fixed, d + 1);
            a + f * (b - a)
        }
        rec(field, &z, &mut [0; 4], 0)
    }

    #[test]
    fn initial_value_examples() {
        let g = GridConfig::room_6x4();
        let env = one_cone();
        let v0 = build_initial_values(&env, &g).unwrap();
        // x = 3.0 is node 30; y = 2.0 is not a node at 0.067 spacing
        let j = (2.0f64 / 0.067).round() as usize;
        let y = g.state_at(1, j).unwrap();
        assert_abs_diff_eq!(v0.get([30, j, 3, 7]).unwrap(), (y - 2.0).abs() - 0.75, epsilon = 1e-12);
        assert_eq!(env.value(3.0, 2.0), -0.75);
        assert_eq!(env.value(3.75, 2.0), 0.0);

        let two = Environment::new(
            6.0,
            4.0,
            vec![Obstacle::new(1.5, 1.0, 0.75), Obstacle::new(4.5, 3.0, 0.5)],
        )
        .unwrap();
        let f2 = build_initial_values(&two, &g).unwrap();
        let a = build_initial_values(&Environment::new(6.0, 4.0, vec![two.obstacles[0]]).unwrap(), &g).unwrap();
        let b = build_initial_values(&Environment::new(6.0, 4.0, vec![two.obstacles[1]]).unwrap(), &g).unwrap();
        for k in (0..g.len()).step_by(997) {
            assert_eq!(f2.data()[k], a.data()[k].min(b.data()[k]));
        }
    }

    #[test]
    fn environment_validation() {
        assert!(Environment::new(6.0, 4.0, vec![Obstacle::new(7.0, 1.0, 0.75)]).is_err());
        assert!(Environment::new(6.0, 4.0, vec![Obstacle::new(1.0, 1.0, 0.0)]).is_err());
        let empty = Environment::new(6.0, 4.0, vec![]).unwrap();
        assert!(build_initial_values(&empty, &small_grid()).is_err());
    }

    #[test]
    fn initial_values_are_translation_invariant() {
        let g = GridConfig::new([20, 20, 3, 4], [0.0, 0.0, 0.0, -PI], [0.25, 0.25, 1.0, TAU / 4.0], [false, false, false, true]).unwrap();
        let env = Environment::new(6.0, 4.0, vec![Obstacle::new(1.25, 1.5, 0.75)]).unwrap();
        let moved = Environment::new(6.0, 4.0, vec![Obstacle::new(2.25, 2.0, 0.75)]).unwrap();
        let a = build_initial_values(&env, &g).unwrap();
        let b = build_initial_values(&moved, &g).unwrap();
        for i in 0..12 {
            for j in 0..14 {
                assert_eq!(a.get([i, j, 1, 2]).unwrap(), b.get([i + 4, j + 2, 1, 2]).unwrap());
            }
        }
    }

    #[test]
    fn initial_values_are_1_lipschitz() {
        let env = Environment::new(
            6.0,
            4.0,
            vec![Obstacle::new(2.0, 2.0, 0.75), Obstacle::new(4.0, 1.0, 0.6)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let (x1, y1, x2, y2): (f64, f64, f64, f64) = (
                rng.gen_range(0.0..6.0),
                rng.gen_range(0.0..4.0),
                rng.gen_range(0.0..6.0),
                rng.gen_range(0.0..4.0),
            );
            let d = (x1 - x2).hypot(y1 - y2);
            assert!((env.value(x1, y1) - env.value(x2, y2)).abs() <= d + 1e-12);
        }
    }

    #[test]
    fn interpolation_examples() {
        let g = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field = ValueField::from_fn(g, |_| rng.gen_range(-1.0..1.0));
        let idx = [3, 2, 4, 5];
        let s = CarState::from_array(g.state(idx));
        assert_eq!(interpolate_value(&field, &s).unwrap(), field.get(idx).unwrap());

        let linear = ValueField::from_fn(g, |i| {
            let z = g.state(i);
            1.0 + 2.0 * z[0] - 0.5 * z[1] + 0.25 * z[2]
        });
        let s = CarState::new(1.25, 0.6, 0.75, 0.3);
        assert_abs_diff_eq!(
            interpolate_value(&linear, &s).unwrap(),
            1.0 + 2.5 - 0.3 + 0.1875,
            epsilon = 1e-12
        );

        let outside = CarState::new(-0.1, 1.0, 1.0, 0.0);
        assert!(matches!(interpolate_value(&field, &outside), Err(Error::OutOfDomain { axis: 0, .. })));
        let fast = CarState::new(1.0, 1.0, 2.5, 0.0);
        assert!(matches!(interpolate_value(&field, &fast), Err(Error::OutOfDomain { axis: 2, .. })));
    }

    #[test]
    fn interpolation_matches_nested_oracle() {
        let g = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let field = ValueField::from_fn(g, |_| rng.gen_range(-3.0..3.0));
        for _ in 0..100 {
            let z = [
                rng.gen_range(0.0..=g.node_max(0)),
                rng.gen_range(0.0..=g.node_max(1)),
                rng.gen_range(0.0..=g.node_max(2)),
                rng.gen_range(-3.0 * PI..3.0 * PI),
            ];
            let got = interpolate_value(&field, &CarState::from_array(z)).unwrap();
            assert_abs_diff_eq!(got, nested_oracle(&field, z), epsilon = 1e-12);
        }
    }

    #[test]
    fn heading_wraps_in_interpolation() {
        let g = small_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let field = ValueField::from_fn(g, |_| rng.gen_range(-1.0..1.0));
        let a = interpolate_value(&field, &CarState::new(1.0, 1.0, 1.0, 3.0)).unwrap();
        let b = interpolate_value(&field, &CarState::new(1.0, 1.0, 1.0, 3.0 - TAU)).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        // between the last node and the first
        let c = interpolate_value(&field, &CarState::new(1.0, 1.0, 1.0, PI - 0.1)).unwrap();
        assert!(c.is_finite());
    }

    #[test]
    fn intervention_threshold() {
        let g = small_grid();
        let at = |v: f64| ValueField::constant(g, v);
        let s = CarState::new(1.0, 1.0, 1.0, 0.0);
        assert!(should_intervene(&at(0.10), &s, DEFAULT_THRESHOLD).unwrap());
        assert!(!should_intervene(&at(0.15), &s, DEFAULT_THRESHOLD).unwrap());
        assert!(!should_intervene(&at(1.5), &s, DEFAULT_THRESHOLD).unwrap());
    }

    #[test]
    fn safe_control_steers_away_from_cone() {
        let g = GridConfig::room_6x4();
        let v0 = build_initial_values(&one_cone(), &g).unwrap();
        let c = car();
        // A short solve gives the value a heading dependence.
        let settings = SolveSettings::fixed_horizon(0.075).with_dt(0.0075);
        let (field, _) = solve(&v0, &c, &settings).unwrap();
        // Heading east, cone ahead and slightly to the left: steer right.
        let s = CarState::new(2.0, 1.9, 2.0, 0.0);
        let u = safe_control(&field, &s, &c).unwrap();
        // heading sensitivity of the distance field after a short straight move
        let (dx, dy) = (s.x - 3.0, s.y - 2.0);
        let n = dx.hypot(dy);
        let p4 = (dx / n) * (-s.v * s.theta.sin()) + (dy / n) * (s.v * s.theta.cos());
        assert!(p4 < 0.0);
        assert_eq!(u.delta, c.params().delta_min);

        // mirrored: cone ahead and to the right
        let s = CarState::new(2.0, 2.1, 2.0, 0.0);
        assert_eq!(safe_control(&field, &s, &c).unwrap().delta, c.params().delta_max);
    }

    #[test]
    fn safe_control_accelerates_on_positive_speed_gradient() {
        let g = small_grid();
        let field = ValueField::from_fn(g, |i| 0.3 * g.state(i)[2]);
        let u = safe_control(&field, &CarState::new(1.0, 1.0, 1.0, 0.2), &car()).unwrap();
        assert_eq!(u.a, 1.5);
    }

    #[test]
    fn safe_control_maximizes_over_sampled_controls() {
        let g = GridConfig::room_6x4();
        let field = build_initial_values(&one_cone(), &g).unwrap();
        let c = car();
        let p = c.params();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let s = CarState::new(
                rng.gen_range(0.5..5.5),
                rng.gen_range(0.5..3.5),
                rng.gen_range(0.1..3.7),
                rng.gen_range(-PI..PI),
            );
            let grad = interpolated_gradient(&field, &s).unwrap();
            let z = s.to_array();
            let best = grad.dot(&c.flow(&z, &safe_control(&field, &s, &c).unwrap()));
            for i in 0..=20 {
                for j in 0..=20 {
                    let u = CarControl::new(
                        p.a_min + (p.a_max - p.a_min) * i as f64 / 20.0,
                        p.delta_min + (p.delta_max - p.delta_min) * j as f64 / 20.0,
                    );
                    assert!(grad.dot(&c.flow(&z, &u)) <= best + 1e-12);
                }
            }
        }
    }

    #[test]
    fn simulate_step_examples() {
        let c = car();
        let s = simulate_step(&c, CarState::new(0.0, 0.0, 1.0, 0.0), CarControl::new(0.0, 0.0), 1.0);
        assert_eq!(s.x, 1.0);
        assert_eq!(s.theta, 0.0);

        let s = simulate_step(&c, CarState::new(0.0, 0.0, 1.0, 0.7), CarControl::new(1.5, 0.0), 0.1);
        assert_eq!(s.theta, 0.7);

        // straight line under constant acceleration
        let (v0, a, th) = (0.5, 1.2, 0.4);
        let mut s = CarState::new(1.0, -1.0, v0, th);
        let dt = 0.02;
        let mut worst: f64 = 0.0;
        for k in 1..=100 {
            s = simulate_step(&c, s, CarControl::new(a, 0.0), dt);
            let t = k as f64 * dt;
            let dist = v0 * t + 0.5 * a * t * t;
            worst = worst
                .max((s.x - (1.0 + dist * th.cos())).abs())
                .max((s.y - (-1.0 + dist * th.sin())).abs());
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn wrap_angle_range() {
        for &t in &[-PI, PI, 3.0 * PI, -7.5, 0.0, 1e-17 - PI, 100.0] {
            let w = wrap_angle(t);
            assert!((-PI..PI).contains(&w), "{t} -> {w}");
            assert_abs_diff_eq!((w - t).rem_euclid(TAU).min(TAU - (w - t).rem_euclid(TAU)), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn filter_examples() {
        let g = GridConfig::room_6x4();
        let field = build_initial_values(&one_cone(), &g).unwrap();
        let c = car();
        let user = CarControl::new(5.0, -1.0);
        let far = CarState::new(0.5, 0.5, 1.0, 0.0);
        let out = filter_loop(&field, &far, user, &c, DEFAULT_THRESHOLD).unwrap();
        assert!(!out.intervening);
        assert_eq!(out.control, c.clamp_control(user));

        let near = CarState::new(2.2, 2.0, 1.0, 0.0);
        let out = filter_loop(&field, &near, user, &c, DEFAULT_THRESHOLD).unwrap();
        assert!(out.intervening);
        assert_eq!(out.control, safe_control(&field, &near, &c).unwrap());
    }

    proptest! {
        #[test]
        fn filter_passes_through_outside_band(
            x in 0.0..5.9f64, y in 0.0..3.9f64, v in 0.0..3.8f64, th in -PI..PI,
            a in -3.0..3.0f64, d in -0.5..0.5f64,
        ) {
            let g = small_grid();
            let field = ValueField::from_fn(g, |i| { let z = g.state(i); z[0] - 1.0 + 0.2 * z[3].cos() });
            let c = car();
            let s = CarState::new(x.min(g.node_max(0)), y.min(g.node_max(1)), v.min(g.node_max(2)), th);
            let user = CarControl::new(a, d);
            if !should_intervene(&field, &s, DEFAULT_THRESHOLD).unwrap() {
                let out = filter_loop(&field, &s, user, &c, DEFAULT_THRESHOLD).unwrap();
                prop_assert_eq!(out.control, c.clamp_control(user));
            }
        }
    }

    #[test]
    fn brt_slot_newest_wins() {
        let g = small_grid();
        let slot = BrtSlot::new(ValueField::constant(g, 1.0));
        assert!(!slot.is_stale());
        let first = slot.request();
        let second = slot.request();
        assert!(slot.is_stale());
        assert!(!slot.install(first, ValueField::constant(g, 2.0)));
        assert_eq!(slot.current().0.data()[0], 1.0);
        assert!(slot.is_stale());
        assert!(slot.install(second, ValueField::constant(g, 3.0)));
        let (f, stale) = slot.current();
        assert!(!stale);
        assert_eq!(f.data()[0], 3.0);
    }

    #[test]
    fn plant_stays_in_grid() {
        let g = GridConfig::room_6x4();
        let field = ValueField::constant(g, 10.0);
        let mut sim = Simulation::new(car(), &g, CarState::new(5.8, 2.0, 3.0, 0.0));
        for _ in 0..200 {
            sim.step(&field, CarControl::new(1.5, 0.0)).unwrap();
            let s = sim.state;
            assert!(s.x <= g.node_max(0) && s.v <= g.node_max(2) && s.v >= 0.0);
        }
    }
}
