//! System dynamics for the solver and the safety filter.
//!
//! The solver only talks to [`Dynamics`], so any 4D system with a closed-form
//! maximizing control can be plugged in. [`DubinsCar`] is the extended Dubins
//! car `(x, y, v, theta)` driven by acceleration and steering angle.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridConfig, Index4, StateTables, HEADING_AXIS, NDIM};

pub type State4 = [f64; NDIM];

/// Spatial gradient of the value function (the costate).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Gradient4(pub [f64; NDIM]);

impl Gradient4 {
    pub fn dot(&self, f: &[f64; NDIM]) -> f64 {
        let p = &self.0;
        p[0] * f[0] + p[1] * f[1] + p[2] * f[2] + p[3] * f[3]
    }

    pub fn scale(&self, c: f64) -> Self {
        Gradient4(self.0.map(|p| p * c))
    }
}

pub trait Dynamics: Sync {
    type Control: Copy + std::fmt::Debug + PartialEq;

    fn flow(&self, z: &State4, u: &Self::Control) -> [f64; NDIM];

    /// Control maximizing `p . f(z, u)` over the admissible set.
    fn optimal_control(&self, z: &State4, p: &Gradient4) -> Self::Control;

    fn hamiltonian(&self, z: &State4, p: &Gradient4) -> f64 {
        p.dot(&self.flow(z, &self.optimal_control(z, p)))
    }

    /// `|f_d|` under the optimal control.
    fn dissipation_coeffs(&self, z: &State4, p: &Gradient4) -> [f64; NDIM] {
        self.flow(z, &self.optimal_control(z, p)).map(f64::abs)
    }

    /// Per-axis supremum of `|f_d|` over the grid nodes and admissible controls.
    fn global_alpha_bound(&self, grid: &GridConfig) -> [f64; NDIM];

    /// Hamiltonian and dissipation coefficients from one control evaluation.
    fn hamiltonian_terms(&self, z: &State4, p: &Gradient4) -> (f64, [f64; NDIM]) {
        let f = self.flow(z, &self.optimal_control(z, p));
        (p.dot(&f), f.map(f64::abs))
    }

    /// [`Dynamics::hamiltonian_terms`] at a grid node, free to use the
    /// precomputed tables. Must agree bit-for-bit with the untabled version.
    fn hamiltonian_terms_at(
        &self,
        tables: &StateTables,
        idx: Index4,
        p: &Gradient4,
    ) -> (f64, [f64; NDIM]) {
        self.hamiltonian_terms(&tables.state(idx), p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DubinsParams {
    pub a_min: f64,
    pub a_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub wheelbase: f64,
}

impl Default for DubinsParams {
    fn default() -> Self {
        Self {
            a_min: -1.5,
            a_max: 1.5,
            delta_min: -PI / 18.0,
            delta_max: PI / 18.0,
            wheelbase: 0.3,
        }
    }
}

impl DubinsParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.a_min, self.a_max, self.delta_min, self.delta_max, self.wheelbase]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("dynamics parameters must be finite".into()));
        }
        if self.a_min >= self.a_max {
            return Err(Error::InvalidConfig("a_min must be below a_max".into()));
        }
        if self.delta_min >= self.delta_max {
            return Err(Error::InvalidConfig("delta_min must be below delta_max".into()));
        }
        // tan must stay monotone on the steering interval.
        if self.delta_min <= -PI / 2.0 || self.delta_max >= PI / 2.0 {
            return Err(Error::InvalidConfig("steering bounds must lie inside (-pi/2, pi/2)".into()));
        }
        if self.wheelbase <= 0.0 {
            return Err(Error::InvalidConfig("wheelbase must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CarState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
}

impl CarState {
    pub fn new(x: f64, y: f64, v: f64, theta: f64) -> Self {
        Self { x, y, v, theta }
    }

    pub fn to_array(self) -> State4 {
        [self.x, self.y, self.v, self.theta]
    }

    pub fn from_array(z: State4) -> Self {
        Self::new(z[0], z[1], z[2], z[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CarControl {
    pub a: f64,
    pub delta: f64,
}

impl CarControl {
    pub fn new(a: f64, delta: f64) -> Self {
        Self { a, delta }
    }
}

/// Extended Dubins car: `x' = v cos(theta)`, `y' = v sin(theta)`, `v' = a`,
/// `theta' = v tan(delta) / L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DubinsCar {
    params: DubinsParams,
    // tan(delta) / L at both steering bounds
    turn_min: f64,
    turn_max: f64,
}

impl DubinsCar {
    pub fn new(params: DubinsParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            turn_min: params.delta_min.tan() / params.wheelbase,
            turn_max: params.delta_max.tan() / params.wheelbase,
        })
    }

    pub fn params(&self) -> &DubinsParams {
        &self.params
    }

    /// Clamp a requested control into the admissible box.
    pub fn clamp_control(&self, u: CarControl) -> CarControl {
        let p = &self.params;
        CarControl {
            a: u.a.clamp(p.a_min, p.a_max),
            delta: u.delta.clamp(p.delta_min, p.delta_max),
        }
    }

    #[inline(always)]
    fn terms(&self, v: f64, cos_t: f64, sin_t: f64, p: &Gradient4) -> (f64, [f64; NDIM]) {
        let q = &p.0;
        let a = if q[2] >= 0.0 { self.params.a_max } else { self.params.a_min };
        let turn = if q[3] * v >= 0.0 { self.turn_max } else { self.turn_min };
        let f = [v * cos_t, v * sin_t, a, v * turn];
        (p.dot(&f), f.map(f64::abs))
    }
}

impl Dynamics for DubinsCar {
    type Control = CarControl;

    fn flow(&self, z: &State4, u: &CarControl) -> [f64; NDIM] {
        let (sin_t, cos_t) = z[3].sin_cos();
        let v = z[2];
        [v * cos_t, v * sin_t, u.a, v * (u.delta.tan() / self.params.wheelbase)]
    }

    /// Bang-bang: `tan` is increasing on the steering interval, so each input
    /// sits at the bound selected by the sign of its coefficient. Ties go to
    /// the upper bound.
    fn optimal_control(&self, z: &State4, p: &Gradient4) -> CarControl {
        let q = &p.0;
        CarControl {
            a: if q[2] >= 0.0 { self.params.a_max } else { self.params.a_min },
            delta: if q[3] * z[2] >= 0.0 {
                self.params.delta_max
            } else {
                self.params.delta_min
            },
        }
    }

    fn global_alpha_bound(&self, grid: &GridConfig) -> [f64; NDIM] {
        let tables = StateTables::new(grid);
        let v_max = tables.coords[2].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let cos_max = tables.cos_heading.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
        let sin_max = tables.sin_heading.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
        let a_max = self.params.a_min.abs().max(self.params.a_max.abs());
        let turn = self.turn_min.abs().max(self.turn_max.abs());
        [v_max * cos_max, v_max * sin_max, a_max, v_max * turn]
    }

    fn hamiltonian_terms(&self, z: &State4, p: &Gradient4) -> (f64, [f64; NDIM]) {
        let (sin_t, cos_t) = z[3].sin_cos();
        self.terms(z[2], cos_t, sin_t, p)
    }

    #[inline]
    fn hamiltonian_terms_at(
        &self,
        tables: &StateTables,
        idx: Index4,
        p: &Gradient4,
    ) -> (f64, [f64; NDIM]) {
        let l = idx[HEADING_AXIS];
        self.terms(
            tables.coords[2][idx[2]],
            tables.cos_heading[l],
            tables.sin_heading[l],
            p,
        )
    }
}
