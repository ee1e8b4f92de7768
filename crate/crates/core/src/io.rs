//! Binary formats for fields, vector fields, noise bases and Brownian paths.
//!
//! All integers and floats are little-endian. Readers validate the magic,
//! version, grid size and exact payload length, so a truncated or foreign
//! file is reported as a format error naming the path.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fields::{Bc, Grid, ScalarField, VectorField};
use crate::stochastic::{NoiseBasis, PathIncrements};

pub const FIELD_MAGIC: &[u8; 8] = b"SALTFLD1";
pub const VECTOR_MAGIC: &[u8; 8] = b"SALTVEC1";
pub const BASIS_MAGIC: &[u8; 8] = b"SALTEOF1";
pub const PATH_MAGIC: &[u8; 8] = b"SALTPTH1";
pub const FORMAT_VERSION: u32 = 1;

/// Largest grid accepted by readers; guards allocation on corrupt headers.
const MAX_N: u64 = 1 << 14;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, len: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(format!(
                "truncated: need {len} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )),
        }
    }

    fn magic(&mut self, expect: &[u8; 8]) -> std::result::Result<(), String> {
        let got = self.take(8)?;
        if got != expect {
            return Err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expect)
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> std::result::Result<Vec<f64>, String> {
        let len = count.checked_mul(8).ok_or("payload size overflows")?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn version(&mut self) -> std::result::Result<(), String> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(format!("unsupported version {v}"));
        }
        Ok(())
    }

    fn grid(&mut self) -> std::result::Result<Grid, String> {
        let n = self.u64()?;
        if n > MAX_N {
            return Err(format!("grid size {n} exceeds {MAX_N}"));
        }
        Grid::new(n as usize).map_err(|e| e.to_string())
    }

    fn bc(&mut self) -> std::result::Result<Bc, String> {
        let tag = self.u32()?;
        Bc::from_tag(tag).ok_or_else(|| format!("unknown boundary tag {tag}"))
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.bytes.len() {
            return Err(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn format_err(path: &Path, reason: String) -> Error {
    Error::Format { path: path.to_path_buf(), reason }
}

fn field_body(r: &mut Reader, grid: Grid, bc: Bc) -> std::result::Result<ScalarField, String> {
    let values = r.f64s(grid.len())?;
    ScalarField::from_values(grid, bc, values).map_err(|e| e.to_string())
}

pub fn encode_field(f: &ScalarField) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + f.values().len() * 8);
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&f.bc().tag().to_le_bytes());
    out.extend_from_slice(&(f.grid().n() as u64).to_le_bytes());
    put_f64s(&mut out, f.values());
    out
}

pub fn decode_field(bytes: &[u8]) -> std::result::Result<ScalarField, String> {
    let mut r = Reader::new(bytes);
    r.magic(FIELD_MAGIC)?;
    r.version()?;
    let bc = r.bc()?;
    let grid = r.grid()?;
    let f = field_body(&mut r, grid, bc)?;
    r.finish()?;
    Ok(f)
}

/// Both components share the header's boundary tag.
pub fn encode_vector(v: &VectorField) -> Result<Vec<u8>> {
    if v.x.bc() != v.y.bc() {
        return crate::error::input("vector components carry different boundary tags");
    }
    let mut out = Vec::with_capacity(24 + 2 * v.x.values().len() * 8);
    out.extend_from_slice(VECTOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&v.x.bc().tag().to_le_bytes());
    out.extend_from_slice(&(v.grid().n() as u64).to_le_bytes());
    put_f64s(&mut out, v.x.values());
    put_f64s(&mut out, v.y.values());
    Ok(out)
}

pub fn decode_vector(bytes: &[u8]) -> std::result::Result<VectorField, String> {
    let mut r = Reader::new(bytes);
    r.magic(VECTOR_MAGIC)?;
    r.version()?;
    let bc = r.bc()?;
    let grid = r.grid()?;
    let x = field_body(&mut r, grid, bc)?;
    let y = field_body(&mut r, grid, bc)?;
    r.finish()?;
    VectorField::new(x, y).map_err(|e| e.to_string())
}

pub fn encode_basis(b: &NoiseBasis) -> Vec<u8> {
    let g = b.grid();
    let mut out = Vec::with_capacity(28 + b.m() * (1 + g.len()) * 8);
    out.extend_from_slice(BASIS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(g.n() as u64).to_le_bytes());
    out.extend_from_slice(&(b.m() as u64).to_le_bytes());
    put_f64s(&mut out, b.spectrum());
    for z in b.zetas() {
        put_f64s(&mut out, z.values());
    }
    out
}

pub fn decode_basis(bytes: &[u8]) -> std::result::Result<NoiseBasis, String> {
    let mut r = Reader::new(bytes);
    r.magic(BASIS_MAGIC)?;
    r.version()?;
    let grid = r.grid()?;
    let m = r.u64()?;
    let remaining = (bytes.len() - r.pos) as u64 / 8;
    if m == 0 || m > remaining {
        return Err(format!("implausible mode count {m}"));
    }
    let m = m as usize;
    let spectrum = r.f64s(m)?;
    let zetas = (0..m)
        .map(|_| field_body(&mut r, grid, Bc::DirichletZero))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    r.finish()?;
    NoiseBasis::new(grid, zetas, spectrum).map_err(|e| e.to_string())
}

/// Increments are written substep-major: all modes of substep 0, then substep 1.
pub fn encode_path(p: &PathIncrements) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + p.values().len() * 8);
    out.extend_from_slice(PATH_MAGIC);
    out.extend_from_slice(&(p.m() as u64).to_le_bytes());
    out.extend_from_slice(&(p.n_sub() as u64).to_le_bytes());
    put_f64s(&mut out, p.values());
    out
}

pub fn decode_path(bytes: &[u8]) -> std::result::Result<PathIncrements, String> {
    let mut r = Reader::new(bytes);
    r.magic(PATH_MAGIC)?;
    let m = r.u64()?;
    let n_sub = r.u64()?;
    let count = m
        .checked_mul(n_sub)
        .filter(|&c| c.checked_mul(8) == Some((bytes.len() - r.pos) as u64))
        .ok_or_else(|| format!("payload length does not match {m} x {n_sub} increments"))?;
    let dw = r.f64s(count as usize)?;
    r.finish()?;
    PathIncrements::new(m as usize, n_sub as usize, dw).map_err(|e| e.to_string())
}

/// Writes through a sibling temporary file and renames, so readers never see
/// a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp: PathBuf = path.to_path_buf();
    let name = path
        .file_name()
        .map(|n| format!(".{}.tmp", n.to_string_lossy()))
        .unwrap_or_else(|| ".tmp".into());
    tmp.set_file_name(name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_with<T>(path: &Path, decode: impl Fn(&[u8]) -> std::result::Result<T, String>) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    decode(&bytes).map_err(|reason| format_err(path, reason))
}

pub fn write_field(path: &Path, f: &ScalarField) -> Result<()> {
    write_atomic(path, &encode_field(f))
}

pub fn read_field(path: &Path) -> Result<ScalarField> {
    read_with(path, decode_field)
}

pub fn write_vector(path: &Path, v: &VectorField) -> Result<()> {
    write_atomic(path, &encode_vector(v)?)
}

pub fn read_vector(path: &Path) -> Result<VectorField> {
    read_with(path, decode_vector)
}

pub fn write_basis(path: &Path, b: &NoiseBasis) -> Result<()> {
    write_atomic(path, &encode_basis(b))
}

pub fn read_basis(path: &Path) -> Result<NoiseBasis> {
    read_with(path, decode_basis)
}

pub fn write_path(path: &Path, p: &PathIncrements) -> Result<()> {
    write_atomic(path, &encode_path(p))
}

pub fn read_path(path: &Path) -> Result<PathIncrements> {
    read_with(path, decode_path)
}
