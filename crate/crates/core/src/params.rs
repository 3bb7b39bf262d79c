//! Flat parameter vectors and their on-disk formats.
//!
//! A [`ParamVector`] is an ordered list of named, shaped tensors stored in a
//! single `Vec<f64>`. Gradients use the same manifest as the parameters they
//! belong to, so optimizer steps are element-wise over `values`.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "HSCPARAM"
//! version    u32       1
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8 bytes)
//!   rank     u32, dims (u64 each)
//!   values   f64 LE, row-major, product(dims) of them
//! ```
//!
//! The text dump carries the same information for diffing: a
//! `hscope-params 1` line, then for each tensor a `tensor <name> <dims...>`
//! line followed by its values, one row (last dimension) per line, each value
//! with 17 significant digits. Both formats round-trip bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{check_len, invalid, Error, Result};

pub const MAGIC: &[u8; 8] = b"HSCPARAM";
pub const VERSION: u32 = 1;
const TEXT_HEADER: &str = "hscope-params 1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    manifest: Vec<TensorSpec>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) -> Result<()> {
        let spec = TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
        };
        check_len("tensor length", spec.len(), data.len())?;
        if self.manifest.iter().any(|t| t.name == spec.name) {
            return Err(invalid(format!("duplicate tensor name {}", spec.name)));
        }
        self.manifest.push(spec);
        self.values.extend_from_slice(data);
        Ok(())
    }

    pub fn manifest(&self) -> &[TensorSpec] {
        &self.manifest
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.manifest == other.manifest
    }

    /// Zero vector with this manifest.
    pub fn zeros_like(&self) -> Self {
        Self {
            manifest: self.manifest.clone(),
            values: vec![0.0; self.values.len()],
        }
    }

    /// `(spec, offset into values)` for every tensor.
    pub fn offsets(&self) -> Vec<(&TensorSpec, usize)> {
        let mut off = 0;
        self.manifest
            .iter()
            .map(|t| {
                let o = off;
                off += t.len();
                (t, o)
            })
            .collect()
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&TensorSpec, &[f64])> {
        self.offsets()
            .into_iter()
            .map(move |(t, o)| (t, &self.values[o..o + t.len()]))
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors().find(|(t, _)| t.name == name).map(|(_, v)| v)
    }

    /// Sequential reader used when reassembling a model.
    pub fn reader(&self) -> ParamReader<'_> {
        ParamReader {
            pv: self,
            next: 0,
            offset: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        for (t, v) in self.tensors() {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(invalid("not a parameter file (bad magic)"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(invalid(format!("unsupported parameter file version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut pv = Self::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| invalid("tensor name is not UTF-8"))?
                .to_string();
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| cur.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect::<Result<Vec<_>>>()?;
            pv.push(name, &shape, &data)?;
        }
        if cur.pos != bytes.len() {
            return Err(invalid("trailing bytes after last tensor"));
        }
        Ok(pv)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(TEXT_HEADER);
        out.push('\n');
        for (t, v) in self.tensors() {
            write!(out, "tensor {}", t.name).unwrap();
            for d in &t.shape {
                write!(out, " {d}").unwrap();
            }
            out.push('\n');
            let width = t.shape.last().copied().unwrap_or(1).max(1);
            for row in v.chunks(width) {
                let line: Vec<String> = row.iter().map(|x| format!("{x:.16e}")).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == TEXT_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected {TEXT_HEADER:?}"),
                })
            }
        }
        let mut pv = Self::new();
        let mut pending: Option<(String, Vec<usize>, Vec<f64>)> = None;
        for (i, line) in lines {
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks[0] == "tensor" {
                if let Some((name, shape, data)) = pending.take() {
                    pv.push(name, &shape, &data)?;
                }
                let name = toks.get(1).ok_or_else(|| perr("tensor without a name".into()))?;
                let shape = toks[2..]
                    .iter()
                    .map(|d| d.parse::<usize>().map_err(|_| perr(format!("bad dimension {d:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                pending = Some((name.to_string(), shape, Vec::new()));
            } else {
                let (_, _, data) = pending
                    .as_mut()
                    .ok_or_else(|| perr("values before first tensor".into()))?;
                for t in toks {
                    data.push(t.parse().map_err(|_| perr(format!("bad value {t:?}")))?);
                }
            }
        }
        if let Some((name, shape, data)) = pending {
            pv.push(name, &shape, &data)?;
        }
        Ok(pv)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load_text(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub struct ParamReader<'a> {
    pv: &'a ParamVector,
    next: usize,
    offset: usize,
}

impl<'a> ParamReader<'a> {
    /// Next tensor, which must be called `name` with shape `shape`.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<&'a [f64]> {
        let t = self
            .pv
            .manifest
            .get(self.next)
            .ok_or_else(|| invalid(format!("missing tensor {name}")))?;
        if t.name != name || t.shape != shape {
            return Err(invalid(format!(
                "expected tensor {name} {shape:?}, found {} {:?}",
                t.name, t.shape
            )));
        }
        let v = &self.pv.values[self.offset..self.offset + t.len()];
        self.next += 1;
        self.offset += t.len();
        Ok(v)
    }

    pub fn finish(self) -> Result<()> {
        if self.next != self.pv.manifest.len() {
            return Err(invalid(format!(
                "{} unused tensors starting at {}",
                self.pv.manifest.len() - self.next,
                self.pv.manifest[self.next].name
            )));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| invalid("truncated parameter file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
