//! Binary value-field files.
//!
//! Layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8     | magic `HJVF0001` |
//! | 1     | element type: 0 = f64, 1 = Q5.27 raw i32 |
//! | 16    | dims, four u32 |
//! | 64    | mins then spacings, eight f64 |
//! | N * w | payload, row-major (last axis fastest) |
//! | 4     | CRC32 of the payload |
//!
//! Periodicity is not stored. On read, an axis whose extent `N * spacing`
//! equals 2π to within 1e-9 relative is taken as periodic.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fixedpoint::Q5_27;
use crate::grid::{GridConfig, ValueField, NDIM};

pub const MAGIC: &[u8; 8] = b"HJVF0001";
pub const HEADER_LEN: usize = 8 + 1 + 4 * NDIM + 16 * NDIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ElementType {
    F64 = 0,
    Q5_27 = 1,
}

impl ElementType {
    fn width(self) -> usize {
        match self {
            Self::F64 => 8,
            Self::Q5_27 => 4,
        }
    }
}

/// A value field as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredField {
    Float(ValueField<f64>),
    Fixed(ValueField<Q5_27>),
}

impl StoredField {
    pub fn grid(&self) -> &GridConfig {
        match self {
            Self::Float(f) => f.grid(),
            Self::Fixed(f) => f.grid(),
        }
    }

    pub fn element_type(&self) -> ElementType {
        match self {
            Self::Float(_) => ElementType::F64,
            Self::Fixed(_) => ElementType::Q5_27,
        }
    }

    pub fn to_f64(&self) -> ValueField<f64> {
        match self {
            Self::Float(f) => f.clone(),
            Self::Fixed(f) => f.map(Q5_27::to_f64),
        }
    }
}

impl From<ValueField<f64>> for StoredField {
    fn from(f: ValueField<f64>) -> Self {
        Self::Float(f)
    }
}

impl From<ValueField<Q5_27>> for StoredField {
    fn from(f: ValueField<Q5_27>) -> Self {
        Self::Fixed(f)
    }
}

fn infer_periodic(dims: [usize; NDIM], spacings: [f64; NDIM]) -> [bool; NDIM] {
    std::array::from_fn(|d| ((dims[d] as f64 * spacings[d]) - TAU).abs() <= 1e-9 * TAU)
}

pub fn encode(field: &StoredField) -> Vec<u8> {
    let grid = field.grid();
    let mut payload = Vec::with_capacity(grid.len() * field.element_type().width());
    match field {
        StoredField::Float(f) => f.data().iter().for_each(|v| payload.extend(v.to_le_bytes())),
        StoredField::Fixed(f) => f.data().iter().for_each(|v| payload.extend(v.raw().to_le_bytes())),
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(field.element_type() as u8);
    for n in grid.dims() {
        out.extend((n as u32).to_le_bytes());
    }
    for x in grid.mins().into_iter().chain(grid.spacings()) {
        out.extend(x.to_le_bytes());
    }
    out.extend_from_slice(&payload);
    out.extend(crc32fast::hash(&payload).to_le_bytes());
    out
}

pub fn write_field<W: Write>(mut w: W, field: &StoredField) -> Result<()> {
    w.write_all(&encode(field))?;
    w.flush()?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("file truncated in {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<StoredField> {
    let b = &mut bytes;
    if take(b, 8, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a value file".into()));
    }
    let ty = match take(b, 1, "header")?[0] {
        0 => ElementType::F64,
        1 => ElementType::Q5_27,
        other => return Err(Error::Format(format!("unknown element type {other}"))),
    };
    let mut dims = [0usize; NDIM];
    for n in &mut dims {
        *n = u32::from_le_bytes(take(b, 4, "header")?.try_into().expect("4 bytes")) as usize;
    }
    let mut geom = [0.0f64; 2 * NDIM];
    for x in &mut geom {
        *x = f64::from_le_bytes(take(b, 8, "header")?.try_into().expect("8 bytes"));
    }
    let mins: [f64; NDIM] = std::array::from_fn(|d| geom[d]);
    let spacings: [f64; NDIM] = std::array::from_fn(|d| geom[NDIM + d]);
    let grid = GridConfig::new(dims, mins, spacings, infer_periodic(dims, spacings))
        .map_err(|e| Error::Format(format!("invalid grid in header: {e}")))?;
    let len = grid
        .len()
        .checked_mul(ty.width())
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let payload = take(b, len, "payload")?;
    let stored = u32::from_le_bytes(take(b, 4, "checksum")?.try_into().expect("4 bytes"));
    if !b.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checksum", b.len())));
    }
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    Ok(match ty {
        ElementType::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            StoredField::Float(ValueField::new(grid, data).map_err(|e| Error::Format(e.to_string()))?)
        }
        ElementType::Q5_27 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| Q5_27::from_raw(i32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            StoredField::Fixed(ValueField::new(grid, data)?)
        }
    })
}

pub fn read_field<R: Read>(mut r: R) -> Result<StoredField> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save(path: impl AsRef<Path>, field: &StoredField) -> Result<()> {
    write_field(BufWriter::new(File::create(path)?), field)
}

pub fn load(path: impl AsRef<Path>) -> Result<StoredField> {
    read_field(BufReader::new(File::open(path)?))
}
