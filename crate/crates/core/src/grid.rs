//! 4D grid geometry, value storage and boundary handling.
//!
//! Values are stored row-major with the last axis (heading) innermost, so
//! the loop nest `i, j, k, l` walks memory linearly. Non-periodic axes use a
//! slope-preserving ghost point past each edge, `2 * V_edge - V_inner`;
//! periodic axes wrap.

use std::f64::consts::{PI, TAU};
use std::fmt;

use crate::error::{Error, Result};

pub const NDIM: usize = 4;

/// Axis holding the heading angle; trig lookup tables are built for it.
pub const HEADING_AXIS: usize = 3;

/// Tolerance used when checking that a periodic axis spans a full turn.
const PERIOD_TOLERANCE: f64 = 0.01;

pub type Index4 = [usize; NDIM];

/// Geometry of a 4D grid: point counts, lower bounds, spacings and periodicity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    dims: [usize; NDIM],
    mins: [f64; NDIM],
    spacings: [f64; NDIM],
    periodic: [bool; NDIM],
}

impl GridConfig {
    pub fn new(
        dims: [usize; NDIM],
        mins: [f64; NDIM],
        spacings: [f64; NDIM],
        periodic: [bool; NDIM],
    ) -> Result<Self> {
        for d in 0..NDIM {
            if dims[d] < 3 {
                return Err(Error::InvalidConfig(format!(
                    "axis {d} has {} points; at least 3 are required",
                    dims[d]
                )));
            }
            if !(spacings[d].is_finite() && spacings[d] > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "axis {d} spacing must be positive, got {}",
                    spacings[d]
                )));
            }
            if !mins[d].is_finite() {
                return Err(Error::InvalidConfig(format!("axis {d} lower bound is not finite")));
            }
            if periodic[d] {
                let span = dims[d] as f64 * spacings[d];
                if ((span - TAU) / TAU).abs() > PERIOD_TOLERANCE {
                    return Err(Error::InvalidConfig(format!(
                        "periodic axis {d} spans {span:.6} rad, expected 2*pi within 1%"
                    )));
                }
            }
        }
        Ok(Self {
            dims,
            mins,
            spacings,
            periodic,
        })
    }

    /// The 60x60x20x36 grid over a 6 m x 4 m room used for the car experiments.
    ///
    /// Speed nodes run 0.0..=3.8 m/s; heading covers [-pi, pi) and is periodic
    /// with spacing 2*pi/36.
    pub fn room_6x4() -> Self {
        Self::new(
            [60, 60, 20, 36],
            [0.0, 0.0, 0.0, -PI],
            [0.1, 0.067, 0.2, TAU / 36.0],
            [false, false, false, true],
        )
        .expect("room grid is valid")
    }

    pub fn dims(&self) -> [usize; NDIM] {
        self.dims
    }

    pub fn mins(&self) -> [f64; NDIM] {
        self.mins
    }

    pub fn spacings(&self) -> [f64; NDIM] {
        self.spacings
    }

    pub fn periodic(&self) -> [bool; NDIM] {
        self.periodic
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear distance between neighbours along each axis.
    pub fn strides(&self) -> [usize; NDIM] {
        let [_, n2, n3, n4] = self.dims;
        [n2 * n3 * n4, n3 * n4, n4, 1]
    }

    /// Largest node coordinate on axis `d`.
    pub fn node_max(&self, d: usize) -> f64 {
        self.mins[d] + (self.dims[d] - 1) as f64 * self.spacings[d]
    }

    /// Same geometry (counts, bounds, spacings) as `other`, ignoring periodicity.
    pub fn same_geometry(&self, other: &GridConfig) -> bool {
        self.dims == other.dims && self.mins == other.mins && self.spacings == other.spacings
    }

    pub fn linear_index(&self, idx: Index4) -> Result<usize> {
        if idx.iter().zip(self.dims.iter()).any(|(i, n)| i >= n) {
            return Err(Error::IndexOutOfRange {
                index: idx,
                dims: self.dims,
            });
        }
        Ok(self.offset(idx))
    }

    #[inline]
    pub(crate) fn offset(&self, idx: Index4) -> usize {
        let [_, n2, n3, n4] = self.dims;
        ((idx[0] * n2 + idx[1]) * n3 + idx[2]) * n4 + idx[3]
    }

    /// Inverse of [`GridConfig::linear_index`].
    pub fn unravel(&self, mut offset: usize) -> Index4 {
        let mut idx = [0; NDIM];
        for d in (0..NDIM).rev() {
            idx[d] = offset % self.dims[d];
            offset /= self.dims[d];
        }
        idx
    }

    pub fn state_at(&self, d: usize, i: usize) -> Result<f64> {
        if d >= NDIM {
            return Err(Error::AxisOutOfRange { axis: d });
        }
        if i >= self.dims[d] {
            let mut index = [0; NDIM];
            index[d] = i;
            return Err(Error::IndexOutOfRange {
                index,
                dims: self.dims,
            });
        }
        Ok(self.coord(d, i))
    }

    #[inline]
    pub(crate) fn coord(&self, d: usize, i: usize) -> f64 {
        self.mins[d] + i as f64 * self.spacings[d]
    }

    /// Continuous state of the node at `idx`.
    pub fn state(&self, idx: Index4) -> [f64; NDIM] {
        std::array::from_fn(|d| self.coord(d, idx[d]))
    }

    /// Iterate over every index in memory order.
    pub fn indices(&self) -> impl Iterator<Item = Index4> + '_ {
        (0..self.len()).map(move |o| self.unravel(o))
    }
}

/// Scalar stored in a [`ValueField`].
pub trait Element: Copy + Send + Sync + PartialEq + PartialOrd + fmt::Debug + 'static {
    fn zero() -> Self;
    /// Ghost value past an edge: `2 * edge - inner`.
    fn extrapolate(edge: Self, inner: Self) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    /// `|a - b|` in real units.
    fn abs_diff(a: Self, b: Self) -> f64;
}

impl Element for f64 {
    fn zero() -> Self {
        0.0
    }

    #[inline]
    fn extrapolate(edge: Self, inner: Self) -> Self {
        2.0 * edge - inner
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    #[inline]
    fn abs_diff(a: Self, b: Self) -> f64 {
        (a - b).abs()
    }
}

/// The value function sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField<T> {
    grid: GridConfig,
    data: Vec<T>,
}

impl<T: Element> ValueField<T> {
    pub fn new(grid: GridConfig, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "data has {} elements, grid {:?} needs {}",
                data.len(),
                grid.dims(),
                grid.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite value at offset {pos}"
            )));
        }
        Ok(Self { grid, data })
    }

    /// Build a field without the finiteness scan; the solver checks this itself.
    pub(crate) fn from_raw_parts(grid: GridConfig, data: Vec<T>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        Self { grid, data }
    }

    pub fn constant(grid: GridConfig, value: T) -> Self {
        Self {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: GridConfig, mut f: impl FnMut(Index4) -> T) -> Self {
        let data = (0..grid.len()).map(|o| f(grid.unravel(o))).collect();
        Self { grid, data }
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, idx: Index4) -> Result<T> {
        Ok(self.data[self.grid.linear_index(idx)?])
    }

    #[inline]
    pub(crate) fn at(&self, idx: Index4) -> T {
        self.data[self.grid.offset(idx)]
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> ValueField<U> {
        ValueField {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_same_grid<U>(&self, other: &ValueField<U>) -> Result<()> {
        if self.grid.same_geometry(&other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{:?} vs {:?}",
                self.grid.dims(),
                other.grid.dims()
            )))
        }
    }
}

/// Value of the neighbour of `idx` along axis `d` in direction `dir` (-1 or +1).
///
/// Panics if `idx` is out of bounds or `dir` is not +-1.
pub fn neighbor_value<T: Element>(field: &ValueField<T>, idx: Index4, d: usize, dir: i32) -> T {
    assert!(dir == 1 || dir == -1, "direction must be -1 or +1");
    let g = field.grid();
    let n = g.dims()[d];
    let i = idx[d];
    let mut probe = idx;
    if dir > 0 {
        if i + 1 < n {
            probe[d] = i + 1;
            field.at(probe)
        } else if g.periodic()[d] {
            probe[d] = 0;
            field.at(probe)
        } else {
            probe[d] = i - 1;
            T::extrapolate(field.at(idx), field.at(probe))
        }
    } else if i > 0 {
        probe[d] = i - 1;
        field.at(probe)
    } else if g.periodic()[d] {
        probe[d] = n - 1;
        field.at(probe)
    } else {
        probe[d] = 1;
        T::extrapolate(field.at(idx), field.at(probe))
    }
}

/// The nine values a point update reads: the centre and both neighbours on each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil<T> {
    pub center: T,
    pub minus: [T; NDIM],
    pub plus: [T; NDIM],
}

/// Gather the stencil at `idx` with boundary handling.
pub fn gather_stencil<T: Element>(field: &ValueField<T>, idx: Index4) -> Stencil<T> {
    Stencil {
        center: field.at(idx),
        minus: std::array::from_fn(|d| neighbor_value(field, idx, d, -1)),
        plus: std::array::from_fn(|d| neighbor_value(field, idx, d, 1)),
    }
}

/// Stencil gather on raw data at a known offset; same rules as [`neighbor_value`].
#[inline(always)]
pub(crate) fn gather_at<T: Element>(
    data: &[T],
    offset: usize,
    idx: Index4,
    dims: &[usize; NDIM],
    strides: &[usize; NDIM],
    periodic: &[bool; NDIM],
) -> Stencil<T> {
    let center = data[offset];
    let mut minus = [center; NDIM];
    let mut plus = [center; NDIM];
    for d in 0..NDIM {
        let s = strides[d];
        let i = idx[d];
        let last = dims[d] - 1;
        plus[d] = if i < last {
            data[offset + s]
        } else if periodic[d] {
            data[offset - last * s]
        } else {
            T::extrapolate(center, data[offset - s])
        };
        minus[d] = if i > 0 {
            data[offset - s]
        } else if periodic[d] {
            data[offset + last * s]
        } else {
            T::extrapolate(center, data[offset + s])
        };
    }
    Stencil {
        center,
        minus,
        plus,
    }
}

/// Per-axis node coordinates plus cos/sin of every heading node.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTables {
    pub coords: [Vec<f64>; NDIM],
    pub cos_heading: Vec<f64>,
    pub sin_heading: Vec<f64>,
}

impl StateTables {
    pub fn new(grid: &GridConfig) -> Self {
        let coords: [Vec<f64>; NDIM] =
            std::array::from_fn(|d| (0..grid.dims()[d]).map(|i| grid.coord(d, i)).collect());
        let cos_heading = coords[HEADING_AXIS].iter().map(|t| t.cos()).collect();
        let sin_heading = coords[HEADING_AXIS].iter().map(|t| t.sin()).collect();
        Self {
            coords,
            cos_heading,
            sin_heading,
        }
    }

    #[inline]
    pub fn state(&self, idx: Index4) -> [f64; NDIM] {
        std::array::from_fn(|d| self.coords[d][idx[d]])
    }
}
