//! Transaction-level model of the streaming accelerator.
//!
//! The grid is streamed from memory once per sweep in linear order,
//! `n_pe` points per cycle. Point `o` enters line `o mod n_pe`. Each line
//! is a shift register split into FIFO segments, with taps at the segment
//! ends. PE `idx` produces output `g * n_pe + idx` for group `g` from its
//! nine taps, so every line advances one element per clock and a value is
//! dropped exactly after its last use.
//!
//! A line needs `2 * S / n_pe + 1` slots, where `S = N2 * N3 * N4` is the
//! outer-axis stride; `N1` never enters. PEs start once the lines are half
//! full (`S / n_pe` cycles) and the stream is padded with bubbles for the
//! same number of cycles at the end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Element, GridConfig, Index4, Stencil, ValueField, NDIM};
use crate::solver::PointKernel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub n_pe: usize,
    /// Pipeline stages per PE. Not observable from outputs; it only enters
    /// the cycle count, and the default of 233 is a calibration constant.
    pub pipeline_depth: u64,
    /// Seconds per clock.
    pub clock_period: f64,
    /// On-chip words available for line buffers, if a budget check is wanted.
    pub onchip_budget: Option<usize>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            n_pe: 4,
            pipeline_depth: 233,
            clock_period: 4e-9,
            onchip_budget: None,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pe == 0 {
            return Err(Error::InvalidConfig("n_pe must be at least 1".into()));
        }
        if !(self.clock_period > 0.0 && self.clock_period.is_finite()) {
            return Err(Error::InvalidConfig("clock_period must be positive".into()));
        }
        Ok(())
    }

    /// Checks the streaming preconditions against a grid.
    pub fn check_grid(&self, grid: &GridConfig) -> Result<()> {
        self.validate()?;
        let n4 = grid.dims()[NDIM - 1];
        if n4 % self.n_pe != 0 {
            return Err(Error::Stream(format!(
                "innermost axis ({n4} points) is not divisible by n_pe = {}",
                self.n_pe
            )));
        }
        if grid.periodic()[0] {
            return Err(Error::Stream(
                "a periodic outermost axis needs the whole grid on chip".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Tap {
    line: usize,
    /// Slot in the line; 0 is the element pushed this cycle.
    pos: usize,
}

/// Taps feeding one PE.
#[derive(Debug, Clone)]
struct PeTaps {
    center: Tap,
    minus: [Tap; NDIM],
    plus: [Tap; NDIM],
    /// Wrapped neighbours on periodic axes: `minus` at index 0, `plus` at N-1.
    wrap_minus: [Option<Tap>; NDIM],
    wrap_plus: [Option<Tap>; NDIM],
}

/// Per-line FIFO segment capacities.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferPlan {
    pub n_pe: usize,
    /// Segment capacities of each line, from the stream input towards the tail.
    pub lines: Vec<Vec<usize>>,
    /// Stencil span of a single PE: `2 * S + 1` points.
    pub window_points: usize,
    pub warnings: Vec<String>,
}

impl BufferPlan {
    pub fn line_capacity(&self, line: usize) -> usize {
        self.lines[line].iter().sum()
    }

    pub fn total_capacity(&self) -> usize {
        (0..self.lines.len()).map(|m| self.line_capacity(m)).sum()
    }
}

/// Whether PE `idx` can sit at the start (or end) of a periodic axis. On the
/// innermost axis the index is fixed modulo `n_pe`, so only the first PE sees
/// index 0 and only the last sees `N - 1`.
fn needs_wrap(d: usize, idx: usize, n_pe: usize, at_start: bool) -> bool {
    d != NDIM - 1 || idx == if at_start { 0 } else { n_pe - 1 }
}

/// Signed stream offsets of every tap PE `idx` may read.
fn stencil_offsets(grid: &GridConfig, idx: usize, n_pe: usize) -> Vec<isize> {
    let dims = grid.dims();
    let strides = grid.strides();
    let mut offsets = vec![0];
    for d in 0..NDIM {
        let s = strides[d] as isize;
        offsets.extend([-s, s]);
        if grid.periodic()[d] {
            let wrap = (dims[d] - 1) as isize * s;
            if needs_wrap(d, idx, n_pe, true) {
                offsets.push(wrap);
            }
            if needs_wrap(d, idx, n_pe, false) {
                offsets.push(-wrap);
            }
        }
    }
    offsets
}

fn tap_for(idx: usize, delta: isize, n_pe: usize, fill: usize) -> Tap {
    let n = n_pe as isize;
    let rel = idx as isize + delta;
    Tap {
        line: rel.rem_euclid(n) as usize,
        pos: (fill as isize - rel.div_euclid(n)) as usize,
    }
}

/// Queue capacities for `grid` streamed through `n_pe` lines.
pub fn buffer_sizes(grid: &GridConfig, n_pe: usize) -> Result<BufferPlan> {
    let cfg = StreamConfig {
        n_pe,
        ..StreamConfig::default()
    };
    plan_buffers(grid, &cfg)
}

pub fn plan_buffers(grid: &GridConfig, cfg: &StreamConfig) -> Result<BufferPlan> {
    cfg.check_grid(grid)?;
    let n_pe = cfg.n_pe;
    let fill = grid.strides()[0] / n_pe;
    let mut taps: Vec<Vec<usize>> = vec![Vec::new(); n_pe];
    for idx in 0..n_pe {
        for delta in stencil_offsets(grid, idx, n_pe) {
            let t = tap_for(idx, delta, n_pe, fill);
            taps[t.line].push(t.pos);
        }
    }
    let lines: Vec<Vec<usize>> = taps
        .into_iter()
        .map(|mut positions| {
            positions.sort_unstable();
            positions.dedup();
            let mut prev: Option<usize> = None;
            positions
                .iter()
                .map(|&p| {
                    let cap = match prev {
                        None => p + 1,
                        Some(q) => p - q,
                    };
                    prev = Some(p);
                    cap
                })
                .collect()
        })
        .collect();
    let mut plan = BufferPlan {
        n_pe,
        lines,
        window_points: 2 * grid.strides()[0] + 1,
        warnings: Vec::new(),
    };
    if let Some(budget) = cfg.onchip_budget {
        let total = plan.total_capacity();
        if total > budget {
            plan.warnings.push(format!(
                "line buffers need {total} words, over the on-chip budget of {budget}"
            ));
        }
    }
    Ok(plan)
}

struct Line<T> {
    slots: Vec<T>,
    tags: Vec<usize>,
    head: usize,
}

const BUBBLE: usize = usize::MAX;

impl<T: Element> Line<T> {
    fn new(len: usize) -> Self {
        Self {
            slots: vec![T::zero(); len],
            tags: vec![BUBBLE; len],
            head: 0,
        }
    }

    #[inline]
    fn push(&mut self, value: T, tag: usize) {
        self.head = (self.head + 1) % self.slots.len();
        self.slots[self.head] = value;
        self.tags[self.head] = tag;
    }

    #[inline]
    fn slot(&self, pos: usize) -> usize {
        (self.head + self.slots.len() - pos) % self.slots.len()
    }
}

/// The line buffers and PE tap wiring for one grid.
#[derive(Debug, Clone)]
pub struct LineBufferModel {
    grid: GridConfig,
    n_pe: usize,
    plan: BufferPlan,
    pe_taps: Vec<PeTaps>,
    /// False once a segment has been shrunk below its reuse distance.
    nominal: bool,
}

impl LineBufferModel {
    pub fn new(grid: &GridConfig, cfg: &StreamConfig) -> Result<Self> {
        let plan = plan_buffers(grid, cfg)?;
        let n_pe = cfg.n_pe;
        let fill = grid.strides()[0] / n_pe;
        let strides = grid.strides();
        let dims = grid.dims();
        let pe_taps = (0..n_pe)
            .map(|idx| {
                let tap = |delta: isize| tap_for(idx, delta, n_pe, fill);
                PeTaps {
                    center: tap(0),
                    minus: std::array::from_fn(|d| tap(-(strides[d] as isize))),
                    plus: std::array::from_fn(|d| tap(strides[d] as isize)),
                    wrap_minus: std::array::from_fn(|d| {
                        (grid.periodic()[d] && needs_wrap(d, idx, n_pe, true))
                            .then(|| tap(((dims[d] - 1) * strides[d]) as isize))
                    }),
                    wrap_plus: std::array::from_fn(|d| {
                        (grid.periodic()[d] && needs_wrap(d, idx, n_pe, false))
                            .then(|| tap(-(((dims[d] - 1) * strides[d]) as isize)))
                    }),
                }
            })
            .collect();
        let model = Self {
            grid: *grid,
            n_pe,
            plan,
            pe_taps,
            nominal: true,
        };
        model.check_wiring()?;
        Ok(model)
    }

    pub fn plan(&self) -> &BufferPlan {
        &self.plan
    }

    /// Remove one slot from segment `segment` of line `line`. Taps past that
    /// segment move one slot closer to the input, as they would in hardware
    /// with an undersized FIFO.
    pub fn shrink_segment(&mut self, line: usize, segment: usize) -> Result<()> {
        let caps = self
            .plan
            .lines
            .get_mut(line)
            .ok_or_else(|| Error::Stream(format!("no line {line}")))?;
        if segment >= caps.len() {
            return Err(Error::Stream(format!("line {line} has no segment {segment}")));
        }
        if caps[segment] == 0 || caps.iter().sum::<usize>() <= 1 {
            return Err(Error::Stream("segment is already empty".into()));
        }
        // Tap position at the end of `segment` before shrinking.
        let boundary: usize = caps[..=segment].iter().sum::<usize>() - 1;
        if boundary == 0 {
            return Err(Error::Stream("the input slot cannot be removed".into()));
        }
        caps[segment] -= 1;
        let shift = |t: &mut Tap| {
            if t.line == line && t.pos >= boundary {
                t.pos -= 1;
            }
        };
        for pe in &mut self.pe_taps {
            shift(&mut pe.center);
            pe.minus.iter_mut().for_each(shift);
            pe.plus.iter_mut().for_each(shift);
            pe.wrap_minus.iter_mut().flatten().for_each(shift);
            pe.wrap_plus.iter_mut().flatten().for_each(shift);
        }
        self.nominal = false;
        Ok(())
    }

    fn check_wiring(&self) -> Result<()> {
        for pe in &self.pe_taps {
            let all = std::iter::once(&pe.center)
                .chain(&pe.minus)
                .chain(&pe.plus)
                .chain(pe.wrap_minus.iter().flatten())
                .chain(pe.wrap_plus.iter().flatten());
            for t in all {
                if t.line >= self.n_pe || t.pos >= self.plan.line_capacity(t.line) {
                    return Err(Error::Stream(format!("tap {t:?} falls outside its line")));
                }
            }
        }
        Ok(())
    }

    /// Stream one sweep through the model.
    pub fn run<K: PointKernel>(
        &self,
        kernel: &K,
        vt: &ValueField<K::Elem>,
        v0: &ValueField<K::Elem>,
    ) -> Result<StreamResult<K::Elem>> {
        let grid = self.grid;
        if !grid.same_geometry(vt.grid()) || !grid.same_geometry(v0.grid()) || !grid.same_geometry(kernel.grid()) {
            return Err(Error::GridMismatch("stream inputs do not share the model grid".into()));
        }
        let n = self.n_pe;
        let total = grid.len();
        let groups = total / n;
        let fill = grid.strides()[0] / n;
        let dims = grid.dims();
        let periodic = grid.periodic();
        let strides = grid.strides();
        let src = vt.data();

        let mut lines: Vec<Line<K::Elem>> = (0..n)
            .map(|m| Line::new(self.plan.line_capacity(m)))
            .collect();
        let mut out = vec![K::Elem::zero(); total];
        let mut reads = 0usize;
        let mut cycles = 0u64;

        for t in 0..groups + fill {
            for (m, line) in lines.iter_mut().enumerate() {
                if t < groups {
                    let o = t * n + m;
                    line.push(src[o], o);
                    reads += 1;
                } else {
                    line.push(K::Elem::zero(), BUBBLE);
                }
            }
            cycles += 1;
            if t < fill {
                continue;
            }
            let g = t - fill;
            for (idx, taps) in self.pe_taps.iter().enumerate() {
                let c = g * n + idx;
                let index = grid.unravel(c);
                let read = |tap: &Tap, offset: usize| -> K::Elem {
                    let line = &lines[tap.line];
                    let slot = line.slot(tap.pos);
                    if self.nominal {
                        assert_eq!(
                            line.tags[slot], offset,
                            "tap misalignment in PE {idx} at output {c}"
                        );
                    }
                    line.slots[slot]
                };
                let center = read(&taps.center, c);
                let mut st = Stencil {
                    center,
                    minus: [center; NDIM],
                    plus: [center; NDIM],
                };
                for d in 0..NDIM {
                    let i = index[d];
                    let last = dims[d] - 1;
                    let s = strides[d];
                    st.plus[d] = if i < last {
                        read(&taps.plus[d], c + s)
                    } else if periodic[d] {
                        read(taps.wrap_plus[d].as_ref().expect("periodic tap"), c - last * s)
                    } else {
                        K::Elem::extrapolate(center, read(&taps.minus[d], c - s))
                    };
                    st.minus[d] = if i > 0 {
                        read(&taps.minus[d], c - s)
                    } else if periodic[d] {
                        read(taps.wrap_minus[d].as_ref().expect("periodic tap"), c + last * s)
                    } else {
                        K::Elem::extrapolate(center, read(&taps.plus[d], c + s))
                    };
                }
                out[c] = kernel.update(index, &st, v0.data()[c]);
            }
        }
        Ok(StreamResult {
            field: ValueField::from_raw_parts(grid, out),
            reads,
            cycles,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StreamResult<T> {
    pub field: ValueField<T>,
    /// Grid values pulled from the input stream.
    pub reads: usize,
    /// Clock cycles spent streaming, excluding pipeline latency.
    pub cycles: u64,
}

/// One streamed sweep with nominally sized buffers.
pub fn stream_sweep<K: PointKernel>(
    kernel: &K,
    vt: &ValueField<K::Elem>,
    v0: &ValueField<K::Elem>,
    cfg: &StreamConfig,
) -> Result<StreamResult<K::Elem>> {
    LineBufferModel::new(vt.grid(), cfg)?.run(kernel, vt, v0)
}

/// First linear offset where two fields differ, if any.
pub fn first_divergence<T: Element>(a: &ValueField<T>, b: &ValueField<T>) -> Option<(usize, Index4)> {
    a.data()
        .iter()
        .zip(b.data())
        .position(|(x, y)| x != y)
        .map(|o| (o, a.grid().unravel(o)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CycleEstimate {
    pub cycles_per_iteration: u64,
    pub cycles: u64,
    /// Seconds.
    pub latency: f64,
    /// Re-solves per second.
    pub rate_hz: f64,
}

/// Clock cycles for `iterations` sweeps: each sweep streams `N / n_pe`
/// groups plus a fill of `S / n_pe` cycles and the pipeline depth.
pub fn estimate_cycles(grid: &GridConfig, iterations: u64, cfg: &StreamConfig) -> Result<CycleEstimate> {
    cfg.validate()?;
    let n = cfg.n_pe as u64;
    let core = (grid.len() as u64).div_ceil(n);
    let fill = (grid.strides()[0] as u64).div_ceil(n) + cfg.pipeline_depth;
    let per_iteration = core + fill;
    let cycles = per_iteration * iterations;
    let latency = cycles as f64 * cfg.clock_period;
    Ok(CycleEstimate {
        cycles_per_iteration: per_iteration,
        cycles,
        latency,
        rate_hz: if latency > 0.0 { 1.0 / latency } else { f64::INFINITY },
    })
}
