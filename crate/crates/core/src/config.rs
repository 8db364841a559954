//! Run configuration, read from TOML.
//!
//! ```toml
//! datapath = "float"          # or "fixed"
//!
//! [grid]
//! dims = [60, 60, 20, 36]
//! mins = [0.0, 0.0, 0.0, -3.141592653589793]
//! spacings = [0.1, 0.067, 0.2, 0.17453292519943295]
//! periodic = [false, false, false, true]
//!
//! [dynamics]
//! a_min = -1.5
//! # ...
//!
//! [environment]
//! width = 6.0
//! height = 4.0
//! obstacles = [{ x = 3.0, y = 2.0, r = 0.75 }]
//!
//! [solver]
//! horizon = 0.5
//!
//! [stream]
//! n_pe = 4
//! ```
//!
//! Every section except `[environment]` falls back to defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataflow::StreamConfig;
use crate::dynamics::DubinsParams;
use crate::error::{Error, Result};
use crate::grid::{GridConfig, NDIM};
use crate::safety::Environment;
use crate::solver::SolveSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Datapath {
    #[default]
    Float,
    Fixed,
}

impl FromStr for Datapath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(Self::Float),
            "fixed" => Ok(Self::Fixed),
            other => Err(Error::InvalidConfig(format!(
                "unknown datapath '{other}', expected float or fixed"
            ))),
        }
    }
}

impl fmt::Display for Datapath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Float => "float",
            Self::Fixed => "fixed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dims: [usize; NDIM],
    pub mins: [f64; NDIM],
    pub spacings: [f64; NDIM],
    pub periodic: [bool; NDIM],
}

impl Default for GridSection {
    fn default() -> Self {
        GridConfig::room_6x4().into()
    }
}

impl From<GridConfig> for GridSection {
    fn from(g: GridConfig) -> Self {
        Self {
            dims: g.dims(),
            mins: g.mins(),
            spacings: g.spacings(),
            periodic: g.periodic(),
        }
    }
}

impl TryFrom<GridSection> for GridConfig {
    type Error = Error;

    fn try_from(s: GridSection) -> Result<Self> {
        GridConfig::new(s.dims, s.mins, s.spacings, s.periodic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    datapath: Datapath,
    #[serde(default)]
    grid: GridSection,
    #[serde(default)]
    dynamics: DubinsParams,
    environment: Environment,
    #[serde(default)]
    solver: SolveSettings,
    #[serde(default)]
    stream: StreamConfig,
}

/// A validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub dynamics: DubinsParams,
    pub environment: Environment,
    pub solver: SolveSettings,
    pub datapath: Datapath,
    pub stream: StreamConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text)?;
        let cfg = Self {
            grid: raw.grid.try_into()?,
            dynamics: raw.dynamics,
            environment: raw.environment,
            solver: raw.solver,
            datapath: raw.datapath,
            stream: raw.stream,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let raw = RawConfig {
            datapath: self.datapath,
            grid: self.grid.into(),
            dynamics: self.dynamics,
            environment: self.environment.clone(),
            solver: self.solver.clone(),
            stream: self.stream.clone(),
        };
        toml::to_string(&raw).expect("config serializes")
    }

    /// Checks cross-section consistency. The grid must cover the room: a
    /// grid whose last node sits one spacing short of a wall still covers it.
    pub fn validate(&self) -> Result<()> {
        self.dynamics.validate()?;
        self.environment.validate()?;
        self.solver.validate()?;
        self.stream.validate()?;
        let g = &self.grid;
        let tol = 1e-9;
        for (d, extent) in [(0, self.environment.width), (1, self.environment.height)] {
            if g.periodic()[d] {
                return Err(Error::InvalidConfig(format!("position axis {d} cannot be periodic")));
            }
            if g.mins()[d] > tol || g.node_max(d) + g.spacings()[d] < extent - tol {
                return Err(Error::InvalidConfig(format!(
                    "grid axis {d} spans [{}, {}] and does not cover the room extent {extent}",
                    g.mins()[d],
                    g.node_max(d)
                )));
            }
        }
        if g.mins()[2] > tol {
            return Err(Error::InvalidConfig("speed axis must include v = 0".into()));
        }
        Ok(())
    }
}
