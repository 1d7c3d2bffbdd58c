//! Flat field files.
//!
//! Binary layout, all integers `u32` little endian:
//!
//! ```text
//! magic "TFLD" | version | dim | n_1 .. n_dim | components | values
//! ```
//!
//! `values` holds `components * n_1 * .. * n_dim` little-endian `f64`,
//! component after component, each in row-major node order (last axis
//! fastest). The CSV twin has one row per node: `y1,..,yd,c0,..`.

use std::fmt::Write as _;

use thiserror::Error;

use crate::torus::{FieldError, ScalarField, TorusGrid};

pub const MAGIC: &[u8; 4] = b"TFLD";
pub const VERSION: u32 = 1;
/// Largest component count accepted by the decoder (a 3×3 tensor).
pub const MAX_COMPONENTS: usize = 9;

#[derive(Debug, Error)]
pub enum FieldIoError {
    #[error("not a field file (bad magic)")]
    Magic,
    #[error("unsupported field file version {0}")]
    Version(u32),
    #[error("truncated field file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("{0} trailing bytes after field data")]
    Trailing(usize),
    #[error("component count {0} outside 1..={MAX_COMPONENTS}")]
    Components(usize),
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Grid(#[from] FieldError),
    #[error("components live on different grids")]
    GridMismatch,
}

/// Decoded contents of a field file.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub grid: TorusGrid,
    pub components: Vec<ScalarField>,
}

pub fn encode_field(components: &[ScalarField]) -> Result<Vec<u8>, FieldIoError> {
    let first = components.first().ok_or(FieldIoError::Components(0))?;
    if components.len() > MAX_COMPONENTS {
        return Err(FieldIoError::Components(components.len()));
    }
    let grid = *first.grid();
    if components.iter().any(|c| *c.grid() != grid) {
        return Err(FieldIoError::GridMismatch);
    }
    let header = 4 + 4 * (3 + grid.dim());
    let mut out = Vec::with_capacity(header + 8 * grid.len() * components.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.dim() as u32).to_le_bytes());
    for &n in grid.sizes() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.extend_from_slice(&(components.len() as u32).to_le_bytes());
    for c in components {
        for v in c.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], FieldIoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(FieldIoError::Truncated {
            needed: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FieldIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_field(bytes: &[u8]) -> Result<FieldFile, FieldIoError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| FieldIoError::Magic)? != MAGIC {
        return Err(FieldIoError::Magic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(FieldIoError::Version(version));
    }
    let dim = r.u32()? as usize;
    if !(1..=3).contains(&dim) {
        return Err(FieldError::InvalidGrid(format!("dimension {dim}")).into());
    }
    let sizes: Vec<usize> = (0..dim).map(|_| r.u32().map(|n| n as usize)).collect::<Result<_, _>>()?;
    let nodes = sizes.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n));
    if nodes.is_none_or(|n| n > bytes.len()) {
        return Err(FieldIoError::Truncated { needed: usize::MAX, found: bytes.len() });
    }
    let grid = TorusGrid::new(&sizes)?;
    let ncomp = r.u32()? as usize;
    if !(1..=MAX_COMPONENTS).contains(&ncomp) {
        return Err(FieldIoError::Components(ncomp));
    }
    // check the length before allocating anything sized by the header
    let needed = grid
        .len()
        .checked_mul(ncomp * 8)
        .and_then(|n| n.checked_add(r.pos))
        .unwrap_or(usize::MAX);
    if needed > bytes.len() {
        return Err(FieldIoError::Truncated { needed, found: bytes.len() });
    }
    if needed < bytes.len() {
        return Err(FieldIoError::Trailing(bytes.len() - needed));
    }
    let mut components = Vec::with_capacity(ncomp);
    for c in 0..ncomp {
        let raw = r.take(8 * grid.len())?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(FieldIoError::NonFinite(c * grid.len() + k));
        }
        components.push(ScalarField::from_values(grid, values)?);
    }
    Ok(FieldFile { grid, components })
}

/// CSV with node coordinates; values use Rust's shortest round-trip format.
pub fn field_csv(components: &[ScalarField], names: &[&str]) -> Result<String, FieldIoError> {
    let first = components.first().ok_or(FieldIoError::Components(0))?;
    let grid = *first.grid();
    if components.iter().any(|c| *c.grid() != grid) {
        return Err(FieldIoError::GridMismatch);
    }
    let mut out = String::new();
    let mut header: Vec<String> = (1..=grid.dim()).map(|i| format!("y{i}")).collect();
    header.extend(names.iter().map(|s| s.to_string()));
    header.extend((names.len()..components.len()).map(|c| format!("c{c}")));
    out.push_str(&header.join(","));
    out.push('\n');
    for node in 0..grid.len() {
        let p = grid.point(node);
        let cells = p.iter().copied().chain(components.iter().map(|c| c.values()[node]));
        for (k, v) in cells.enumerate() {
            if k > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}
