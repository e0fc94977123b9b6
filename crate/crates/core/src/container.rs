//! Binary container format shared with the exporter.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  "RCLP"      4 bytes
//! version u32        = 1
//! tag     u8         1 embeddings | 2 catalog | 3 labels | 4 basis | 5 adapter
//! payload
//! ```
//!
//! Payloads:
//!
//! - embeddings: `n u64, d u64, unit_norm u8`, `n*d` binary32 row-major, then
//!   `n` ids, each a u32 byte length followed by UTF-8.
//! - catalog: `m u64`, `m` length-prefixed names, `count u8` (1 or 2), then
//!   `count` embedding payloads without tag, single-template first.
//! - labels: `n u64`, `n` i64 values, `-1` meaning unlabeled.
//! - basis: `d u64, r u64, variant u8`, `d*r` binary64 column-major.
//! - adapter: `d u64`, `d` binary64 gains, `d` binary64 biases.
//!
//! Embeddings are narrowed to binary32 on save; everything loaded is exactly
//! representable, so load/save round-trips are bitwise.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use crate::adapt::AffineAdapter;
use crate::embedstore::{ClassCatalog, EmbeddingSet, LabelVector};
use crate::error::{Error, Result};
use crate::projection::{ProjectionBasis, Variant};

pub const MAGIC: &[u8; 4] = b"RCLP";
pub const VERSION: u32 = 1;

const TAG_EMBEDDINGS: u8 = 1;
const TAG_CATALOG: u8 = 2;
const TAG_LABELS: u8 = 3;
const TAG_BASIS: u8 = 4;
const TAG_ADAPTER: u8 = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum Container {
    Embeddings(EmbeddingSet),
    Catalog(ClassCatalog),
    Labels(LabelVector),
    Basis(ProjectionBasis),
    Adapter(AffineAdapter),
}

impl Container {
    pub fn kind(&self) -> &'static str {
        match self {
            Container::Embeddings(_) => "embeddings",
            Container::Catalog(_) => "catalog",
            Container::Labels(_) => "labels",
            Container::Basis(_) => "basis",
            Container::Adapter(_) => "adapter",
        }
    }
}

fn with_path(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn save_container(object: &Container, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(object)).map_err(with_path(path))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(with_path(path))?;
    decode(&bytes)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    match load_container(path)? {
        Container::Embeddings(e) => Ok(e),
        other => Err(unexpected("embeddings", &other)),
    }
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<ClassCatalog> {
    match load_container(path)? {
        Container::Catalog(c) => Ok(c),
        other => Err(unexpected("catalog", &other)),
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVector> {
    match load_container(path)? {
        Container::Labels(l) => Ok(l),
        other => Err(unexpected("labels", &other)),
    }
}

pub fn load_basis(path: impl AsRef<Path>) -> Result<ProjectionBasis> {
    match load_container(path)? {
        Container::Basis(b) => Ok(b),
        other => Err(unexpected("basis", &other)),
    }
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<AffineAdapter> {
    match load_container(path)? {
        Container::Adapter(a) => Ok(a),
        other => Err(unexpected("adapter", &other)),
    }
}

fn unexpected(wanted: &str, got: &Container) -> Error {
    Error::Format(format!("expected a {wanted} container, found {}", got.kind()))
}

pub fn encode(object: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    match object {
        Container::Embeddings(e) => {
            out.push(TAG_EMBEDDINGS);
            write_embeddings(&mut out, e);
        }
        Container::Catalog(c) => {
            out.push(TAG_CATALOG);
            out.extend_from_slice(&(c.classes() as u64).to_le_bytes());
            for name in c.names() {
                write_str(&mut out, name);
            }
            out.push(if c.multi().is_some() { 2 } else { 1 });
            write_embeddings(&mut out, c.single());
            if let Some(multi) = c.multi() {
                write_embeddings(&mut out, multi);
            }
        }
        Container::Labels(l) => {
            out.push(TAG_LABELS);
            out.extend_from_slice(&(l.len() as u64).to_le_bytes());
            for v in l.values() {
                let raw = v.map_or(-1i64, |v| v as i64);
                out.extend_from_slice(&raw.to_le_bytes());
            }
        }
        Container::Basis(b) => {
            out.push(TAG_BASIS);
            out.extend_from_slice(&(b.source_dims() as u64).to_le_bytes());
            out.extend_from_slice(&(b.rank() as u64).to_le_bytes());
            out.push(b.variant().code());
            for v in b.matrix().as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Container::Adapter(a) => {
            out.push(TAG_ADAPTER);
            out.extend_from_slice(&(a.dims() as u64).to_le_bytes());
            for v in a.gain().iter().chain(a.bias()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn write_embeddings(out: &mut Vec<u8>, e: &EmbeddingSet) {
    out.extend_from_slice(&(e.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(e.dims() as u64).to_le_bytes());
    out.push(u8::from(e.is_unit_norm()));
    for &v in e.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for id in e.ids() {
        write_str(out, id);
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let tag = read_u8(&mut r)?;
    let object = match tag {
        TAG_EMBEDDINGS => Container::Embeddings(read_embeddings(&mut r)?),
        TAG_CATALOG => {
            let m = read_len(&mut r)?;
            let names = (0..m).map(|_| read_str(&mut r)).collect::<Result<Vec<_>>>()?;
            let count = read_u8(&mut r)?;
            if !(1..=2).contains(&count) {
                return Err(Error::Format(format!("catalog embedding count must be 1 or 2, got {count}")));
            }
            let single = read_embeddings(&mut r)?;
            let multi = if count == 2 { Some(read_embeddings(&mut r)?) } else { None };
            Container::Catalog(ClassCatalog::new(names, single, multi)?)
        }
        TAG_LABELS => {
            let n = read_len(&mut r)?;
            let mut values = Vec::with_capacity(n.min(r.len() / 8));
            for _ in 0..n {
                let raw = read_i64(&mut r)?;
                values.push(match raw {
                    -1 => None,
                    v if v >= 0 => Some(v as usize),
                    v => return Err(Error::Validation(format!("invalid label value {v}"))),
                });
            }
            Container::Labels(LabelVector::new(values))
        }
        TAG_BASIS => {
            let d = read_len(&mut r)?;
            let rank = read_len(&mut r)?;
            let variant = Variant::from_code(read_u8(&mut r)?)?;
            let count = d.checked_mul(rank).ok_or_else(|| Error::Format("basis size overflow".into()))?;
            let data = read_f64s(&mut r, count)?;
            Container::Basis(ProjectionBasis::from_parts(d, rank, variant, data)?)
        }
        TAG_ADAPTER => {
            let d = read_len(&mut r)?;
            let gain = read_f64s(&mut r, d)?;
            let bias = read_f64s(&mut r, d)?;
            Container::Adapter(AffineAdapter::from_parts(gain, bias)?)
        }
        other => return Err(Error::Format(format!("unknown section tag {other}"))),
    };
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after payload", r.len())));
    }
    Ok(object)
}

fn read_embeddings(r: &mut &[u8]) -> Result<EmbeddingSet> {
    let n = read_len(r)?;
    let d = read_len(r)?;
    let unit_norm = match read_u8(r)? {
        0 => false,
        1 => true,
        v => return Err(Error::Format(format!("unit_norm flag must be 0 or 1, got {v}"))),
    };
    let count = n.checked_mul(d).ok_or_else(|| Error::Format("embedding size overflow".into()))?;
    let mut raw = vec![0u8; count.checked_mul(4).ok_or_else(|| Error::Format("embedding size overflow".into()))?];
    if raw.len() > r.len() {
        return Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into());
    }
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
    let ids = (0..n).map(|_| read_str(r)).collect::<Result<Vec<_>>>()?;
    EmbeddingSet::new(data, d, ids, unit_norm)
}

fn read_f64s(r: &mut &[u8], count: usize) -> Result<Vec<f64>> {
    if count.saturating_mul(8) > r.len() {
        return Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into());
    }
    (0..count).map(|_| read_f64(r)).collect()
}

fn read_u8(r: &mut &[u8]) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_i64(r: &mut &[u8]) -> Result<i64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(i64::from_le_bytes(b))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_len(r: &mut &[u8]) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("length does not fit in usize".into()))
}

fn read_str(r: &mut &[u8]) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > r.len() {
        return Err(std::io::Error::from(std::io::ErrorKind::UnexpectedEof).into());
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("invalid UTF-8 string: {e}")))
}
