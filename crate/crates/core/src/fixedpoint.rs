//! Q5.27 fixed-point arithmetic and the fixed-point solver datapath.
//!
//! A value is a 32-bit signed integer scaled by 2^-27: five integer bits
//! including sign, 27 fractional bits, range [-16, 16 - 2^-27]. Conversion
//! and multiplication round to nearest, ties to even. Every operation
//! saturates instead of wrapping.
//!
//! The datapath mirrors an accelerator with no runtime division: reciprocals
//! of the grid spacings, the time step and the steering constants are
//! computed once in f64 and converted.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::dynamics::{DubinsCar, Dynamics};
use crate::error::{Error, Result};
use crate::grid::{Element, GridConfig, Index4, StateTables, Stencil, ValueField, HEADING_AXIS, NDIM};
use crate::solver::{run_schedule, PointKernel, SolveReport, SolveSettings};

pub const FRAC_BITS: u32 = 27;
const SCALE: f64 = (1u64 << FRAC_BITS) as f64;
const HALF_ULP: i64 = 1 << (FRAC_BITS - 1);
const FRAC_MASK: i64 = (1 << FRAC_BITS) - 1;

#[allow(non_camel_case_types)]
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Q5_27(i32);

impl Q5_27 {
    pub const ZERO: Self = Self(0);
    pub const ONE: Self = Self(1 << FRAC_BITS);
    pub const HALF: Self = Self(1 << (FRAC_BITS - 1));
    pub const MAX: Self = Self(i32::MAX);
    pub const MIN: Self = Self(i32::MIN);
    /// One ulp, 2^-27.
    pub const EPSILON: Self = Self(1);

    pub const fn from_raw(raw: i32) -> Self {
        Self(raw)
    }

    pub const fn raw(self) -> i32 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / SCALE
    }

    /// Convert, reporting whether the input had to be clamped.
    pub fn from_f64_saturating(f: f64) -> Result<(Self, bool)> {
        if f.is_nan() {
            return Err(Error::Conversion(f));
        }
        let scaled = (f * SCALE).round_ties_even();
        if scaled > i32::MAX as f64 {
            Ok((Self::MAX, true))
        } else if scaled < i32::MIN as f64 {
            Ok((Self::MIN, true))
        } else {
            Ok((Self(scaled as i32), false))
        }
    }

    pub fn overflowing_add(self, rhs: Self) -> (Self, bool) {
        saturate(self.0 as i64 + rhs.0 as i64)
    }

    pub fn overflowing_sub(self, rhs: Self) -> (Self, bool) {
        saturate(self.0 as i64 - rhs.0 as i64)
    }

    pub fn overflowing_mul(self, rhs: Self) -> (Self, bool) {
        let product = self.0 as i64 * rhs.0 as i64;
        // Round half up, then pull exact ties back to the even neighbour.
        let mut q = (product + HALF_ULP) >> FRAC_BITS;
        if product & FRAC_MASK == HALF_ULP {
            q &= !1;
        }
        saturate(q)
    }

    pub fn saturating_add(self, rhs: Self) -> Self {
        self.overflowing_add(rhs).0
    }

    pub fn saturating_sub(self, rhs: Self) -> Self {
        self.overflowing_sub(rhs).0
    }

    pub fn saturating_mul(self, rhs: Self) -> Self {
        self.overflowing_mul(rhs).0
    }

    pub fn abs(self) -> Self {
        Self(self.0.saturating_abs())
    }
}

#[inline]
fn saturate(wide: i64) -> (Q5_27, bool) {
    if wide > i32::MAX as i64 {
        (Q5_27::MAX, true)
    } else if wide < i32::MIN as i64 {
        (Q5_27::MIN, true)
    } else {
        (Q5_27(wide as i32), false)
    }
}

impl fmt::Debug for Q5_27 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q5_27({} = {})", self.0, self.to_f64())
    }
}

impl fmt::Display for Q5_27 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f64(), f)
    }
}

/// Round-to-nearest-even conversion with saturation. NaN is an error.
pub fn to_fixed(f: f64) -> Result<Q5_27> {
    Q5_27::from_f64_saturating(f).map(|(q, _)| q)
}

pub fn fixed_add(a: Q5_27, b: Q5_27) -> Q5_27 {
    a.saturating_add(b)
}

pub fn fixed_mul(a: Q5_27, b: Q5_27) -> Q5_27 {
    a.saturating_mul(b)
}

impl Element for Q5_27 {
    fn zero() -> Self {
        Q5_27::ZERO
    }

    #[inline]
    fn extrapolate(edge: Self, inner: Self) -> Self {
        saturate(2 * edge.0 as i64 - inner.0 as i64).0
    }

    fn to_f64(self) -> f64 {
        Q5_27::to_f64(self)
    }

    fn is_finite(self) -> bool {
        true
    }

    #[inline]
    fn abs_diff(a: Self, b: Self) -> f64 {
        (a.0 as i64 - b.0 as i64).unsigned_abs() as f64 / SCALE
    }
}

/// Counts saturation events across one point update.
#[derive(Default)]
struct Alu {
    saturations: u32,
}

impl Alu {
    #[inline(always)]
    fn add(&mut self, a: Q5_27, b: Q5_27) -> Q5_27 {
        let (r, o) = a.overflowing_add(b);
        self.saturations += o as u32;
        r
    }

    #[inline(always)]
    fn sub(&mut self, a: Q5_27, b: Q5_27) -> Q5_27 {
        let (r, o) = a.overflowing_sub(b);
        self.saturations += o as u32;
        r
    }

    #[inline(always)]
    fn mul(&mut self, a: Q5_27, b: Q5_27) -> Q5_27 {
        let (r, o) = a.overflowing_mul(b);
        self.saturations += o as u32;
        r
    }
}

fn constant(name: &str, value: f64) -> Result<Q5_27> {
    match Q5_27::from_f64_saturating(value)? {
        (q, false) => Ok(q),
        (_, true) => Err(Error::InvalidConfig(format!(
            "{name} = {value} does not fit in Q5.27"
        ))),
    }
}

/// Fixed-point point update for the extended Dubins car.
pub struct FixedKernel {
    grid: GridConfig,
    inv_dx: [Q5_27; NDIM],
    dt: Q5_27,
    a_min: Q5_27,
    a_max: Q5_27,
    turn_min: Q5_27,
    turn_max: Q5_27,
    speed: Vec<Q5_27>,
    cos_heading: Vec<Q5_27>,
    sin_heading: Vec<Q5_27>,
    saturations: AtomicU64,
}

impl FixedKernel {
    pub fn new(grid: GridConfig, car: &DubinsCar, dt: f64) -> Result<Self> {
        let tables = StateTables::new(&grid);
        let dx = grid.spacings();
        let p = car.params();
        let mut inv_dx = [Q5_27::ZERO; NDIM];
        for d in 0..NDIM {
            inv_dx[d] = constant("1/dx", 1.0 / dx[d])?;
        }
        let table = |name: &str, values: &[f64]| -> Result<Vec<Q5_27>> {
            values.iter().map(|&v| constant(name, v)).collect()
        };
        Ok(Self {
            grid,
            inv_dx,
            dt: constant("dt", dt)?,
            a_min: constant("a_min", p.a_min)?,
            a_max: constant("a_max", p.a_max)?,
            turn_min: constant("tan(delta_min)/L", p.delta_min.tan() / p.wheelbase)?,
            turn_max: constant("tan(delta_max)/L", p.delta_max.tan() / p.wheelbase)?,
            speed: table("speed", &tables.coords[2])?,
            cos_heading: table("cos", &tables.cos_heading)?,
            sin_heading: table("sin", &tables.sin_heading)?,
            saturations: AtomicU64::new(0),
        })
    }

    pub fn dt(&self) -> Q5_27 {
        self.dt
    }

    pub fn saturations(&self) -> u64 {
        self.saturations.load(Ordering::Relaxed)
    }
}

impl PointKernel for FixedKernel {
    type Elem = Q5_27;

    fn grid(&self) -> &GridConfig {
        &self.grid
    }

    fn update(&self, idx: Index4, st: &Stencil<Q5_27>, v0: Q5_27) -> Q5_27 {
        let mut alu = Alu::default();
        let c = st.center;
        let mut p = [Q5_27::ZERO; NDIM];
        let mut jump = [Q5_27::ZERO; NDIM];
        for d in 0..NDIM {
            let left = alu.sub(c, st.minus[d]);
            let right = alu.sub(st.plus[d], c);
            let dm = alu.mul(left, self.inv_dx[d]);
            let dp = alu.mul(right, self.inv_dx[d]);
            let sum = alu.add(dp, dm);
            p[d] = alu.mul(sum, Q5_27::HALF);
            jump[d] = alu.sub(dp, dm);
        }

        let v = self.speed[idx[2]];
        let l = idx[HEADING_AXIS];
        let a = if p[2].raw() >= 0 { self.a_max } else { self.a_min };
        // sign(p4 * v) >= 0 without forming the product
        let turn_up = p[3].raw() == 0 || v.raw() == 0 || (p[3].raw() > 0) == (v.raw() > 0);
        let turn = if turn_up { self.turn_max } else { self.turn_min };
        let f = [
            alu.mul(v, self.cos_heading[l]),
            alu.mul(v, self.sin_heading[l]),
            a,
            alu.mul(v, turn),
        ];

        let mut ham = Q5_27::ZERO;
        for d in 0..NDIM {
            let term = alu.mul(p[d], f[d]);
            ham = alu.add(ham, term);
        }
        for d in 0..NDIM {
            let half_jump = alu.mul(jump[d], Q5_27::HALF);
            let term = alu.mul(f[d].abs(), half_jump);
            ham = alu.add(ham, term);
        }
        let step = alu.mul(ham, self.dt);
        let next = alu.add(c, step);
        if alu.saturations > 0 {
            self.saturations
                .fetch_add(alu.saturations as u64, Ordering::Relaxed);
        }
        next.min(v0)
    }
}

/// Convert a float field, returning the number of clamped elements.
pub fn quantize(field: &ValueField<f64>) -> Result<(ValueField<Q5_27>, u64)> {
    let mut clamped = 0;
    let mut data = Vec::with_capacity(field.data().len());
    for &v in field.data() {
        let (q, sat) = Q5_27::from_f64_saturating(v)?;
        clamped += sat as u64;
        data.push(q);
    }
    Ok((ValueField::new(*field.grid(), data)?, clamped))
}

/// Run the single-pass schedule entirely in Q5.27.
pub fn solve_fixed(
    v0: &ValueField<f64>,
    car: &DubinsCar,
    settings: &SolveSettings,
) -> Result<(ValueField<Q5_27>, SolveReport)> {
    solve_fixed_observed(v0, car, settings, |_, _| {})
}

/// [`solve_fixed`] with a callback after every sweep.
pub fn solve_fixed_observed(
    v0: &ValueField<f64>,
    car: &DubinsCar,
    settings: &SolveSettings,
    observe: impl FnMut(usize, &ValueField<Q5_27>) + Send,
) -> Result<(ValueField<Q5_27>, SolveReport)> {
    settings.validate()?;
    let grid = *v0.grid();
    let dt = settings.resolve_dt(|| car.global_alpha_bound(&grid), &grid)?;
    let kernel = FixedKernel::new(grid, car, dt)?;
    let (q0, clamped) = quantize(v0)?;
    let (out, mut report) = run_schedule(&kernel, &q0, settings, dt, observe)?;
    report.saturations = clamped + kernel.saturations();
    if report.saturations > 0 {
        log::warn!("fixed-point solve saturated {} times", report.saturations);
        report.warnings.push(format!(
            "fixed-point saturation occurred {} times; results may be corrupted",
            report.saturations
        ));
    }
    Ok((out, report))
}

/// Largest pointwise difference between two fields on the same grid.
pub fn max_abs_error<A: Element, B: Element>(a: &ValueField<A>, b: &ValueField<B>) -> Result<f64> {
    a.check_same_grid(b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(f: f64) -> Q5_27 {
        to_fixed(f).unwrap()
    }

    #[test]
    fn conversion_examples() {
        assert_eq!(q(1.0).raw(), 134_217_728);
        assert_eq!(q(7.45e-9).raw(), 1);
        assert_eq!(q(20.0).raw(), i32::MAX);
        assert_eq!(q(-20.0).raw(), i32::MIN);
        assert_eq!(q(f64::INFINITY), Q5_27::MAX);
        assert!(matches!(to_fixed(f64::NAN), Err(Error::Conversion(_))));
        // Ties go to even.
        assert_eq!(q(0.5 / SCALE).raw(), 0);
        assert_eq!(q(1.5 / SCALE).raw(), 2);
        assert_eq!(q(-0.5 / SCALE).raw(), 0);
        assert_eq!(Q5_27::EPSILON.to_f64(), 2f64.powi(-27));
    }

    #[test]
    fn arithmetic_examples() {
        assert_eq!(fixed_mul(q(1.0), q(0.5)), q(0.5));
        assert_eq!(fixed_mul(Q5_27::EPSILON, Q5_27::EPSILON), Q5_27::ZERO);
        assert_eq!(fixed_add(q(12.0), q(12.0)), Q5_27::MAX);
        assert_eq!(Q5_27::MAX.to_f64(), 16.0 - 2f64.powi(-27));
        assert_eq!(fixed_add(q(-12.0), q(-12.0)), Q5_27::MIN);
        assert_eq!(fixed_mul(q(-3.0), q(2.5)), q(-7.5));
        assert_eq!(fixed_mul(q(8.0), q(4.0)), Q5_27::MAX);
    }

    /// Independent model: exact rational product in i128, rounded half-even.
    fn reference_mul(a: i32, b: i32) -> i32 {
        let p = a as i128 * b as i128;
        let d = 1i128 << 27;
        let floor = p.div_euclid(d);
        let rem = p.rem_euclid(d);
        let rounded = if 2 * rem > d || (2 * rem == d && floor % 2 != 0) {
            floor + 1
        } else {
            floor
        };
        rounded.clamp(i32::MIN as i128, i32::MAX as i128) as i32
    }

    #[test]
    fn saturation_matches_wide_model() {
        let (s, o) = q(12.0).overflowing_add(q(12.0));
        let wide = (q(12.0).raw() as i128 + q(12.0).raw() as i128).min(i32::MAX as i128);
        assert!(o);
        assert_eq!(s.raw() as i128, wide);
        assert_eq!(s.to_f64(), 16.0 - 2f64.powi(-27));
    }

    proptest! {
        #[test]
        fn mul_matches_wide_model(a in any::<i32>(), b in any::<i32>()) {
            let got = Q5_27::from_raw(a).saturating_mul(Q5_27::from_raw(b));
            prop_assert_eq!(got.raw(), reference_mul(a, b));
        }

        #[test]
        fn mul_by_one_is_identity(a in any::<i32>()) {
            prop_assert_eq!(fixed_mul(Q5_27::from_raw(a), Q5_27::ONE).raw(), a);
        }

        #[test]
        fn round_trip_on_grid_values(raw in any::<i32>()) {
            let v = Q5_27::from_raw(raw);
            prop_assert_eq!(to_fixed(v.to_f64()).unwrap(), v);
        }

        #[test]
        fn add_commutes_and_associates_without_saturation(
            a in -(1i32 << 29)..(1i32 << 29),
            b in -(1i32 << 29)..(1i32 << 29),
            c in -(1i32 << 29)..(1i32 << 29),
        ) {
            let (a, b, c) = (Q5_27::from_raw(a), Q5_27::from_raw(b), Q5_27::from_raw(c));
            prop_assert_eq!(fixed_add(a, b), fixed_add(b, a));
            prop_assert_eq!(fixed_add(fixed_add(a, b), c), fixed_add(a, fixed_add(b, c)));
        }
    }

    #[test]
    fn max_abs_error_examples() {
        let g = GridConfig::new([3; 4], [0.0; 4], [1.0; 4], [false; 4]).unwrap();
        let a = ValueField::constant(g, q(0.25));
        assert_eq!(max_abs_error(&a, &a).unwrap(), 0.0);
        let mut data = a.data().to_vec();
        data[17] = Q5_27::from_raw(data[17].raw() + 1);
        let b = ValueField::new(g, data).unwrap();
        approx::assert_abs_diff_eq!(max_abs_error(&a, &b).unwrap(), 7.45e-9, epsilon = 1e-11);

        let other = GridConfig::new([3, 3, 3, 4], [0.0; 4], [1.0; 4], [false; 4]).unwrap();
        let c = ValueField::constant(other, 0.0);
        assert!(matches!(max_abs_error(&a, &c), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn kernel_rejects_unrepresentable_constants() {
        let car = DubinsCar::new(Default::default()).unwrap();
        // 1 / 0.05 = 20 does not fit.
        let g = GridConfig::new([3; 4], [0.0; 4], [0.05, 1.0, 1.0, 1.0], [false; 4]).unwrap();
        assert!(FixedKernel::new(g, &car, 0.01).is_err());
    }

    #[test]
    fn constant_field_is_fixed_point() {
        let car = DubinsCar::new(Default::default()).unwrap();
        let g = GridConfig::new(
            [4, 4, 4, 6],
            [0.0, 0.0, 0.0, -std::f64::consts::PI],
            [0.25, 0.25, 0.5, std::f64::consts::TAU / 6.0],
            [false, false, false, true],
        )
        .unwrap();
        let v0 = ValueField::constant(g, 0.7);
        let settings = SolveSettings::fixed_horizon(0.2).with_dt(0.01);
        let (out, report) = solve_fixed(&v0, &car, &settings).unwrap();
        assert_eq!(report.iterations, 20);
        assert_eq!(report.saturations, 0);
        assert!(out.data().iter().all(|&v| v == q(0.7)));
    }
}
