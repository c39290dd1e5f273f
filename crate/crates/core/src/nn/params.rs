//! Flat, named, canonically ordered parameter storage and its binary payload format.
//!
//! Payload layout (all integers little-endian):
//!
//! ```text
//! "FPSW1"                       5-byte magic
//! u32 segment_count
//! per segment:
//!   u32 name_len, name (UTF-8)
//!   u32 rank, rank × u64 dims
//!   product(dims) × f32
//! u32 crc32 of every preceding byte
//! ```

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PAYLOAD_MAGIC: &[u8; 5] = b"FPSW1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "segment `{name}`: shape {shape:?} vs {} values",
                data.len()
            )));
        }
        Ok(Segment { name, shape, data })
    }

    pub fn from_tensor(name: impl Into<String>, t: Tensor) -> Self {
        let shape = t.shape().to_vec();
        Segment {
            name: name.into(),
            shape,
            data: t.into_data(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.clone()).expect("segment invariant")
    }
}

/// Ordered list of named parameter segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &segments {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate segment name `{}`",
                    s.name
                )));
            }
        }
        Ok(ParamVector { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut [Segment] {
        &mut self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut Segment> {
        self.segments.iter_mut().find(|s| s.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.data.len()).sum()
    }

    /// Same names, shapes and order as `self`, filled with zeros.
    pub fn zeros_like(&self) -> Self {
        ParamVector {
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data: vec![0.0; s.data.len()],
                })
                .collect(),
        }
    }

    pub fn check_congruent(&self, other: &ParamVector) -> Result<()> {
        if self.segments.len() != other.segments.len() {
            return Err(Error::Incongruent(format!(
                "{} vs {} segments",
                self.segments.len(),
                other.segments.len()
            )));
        }
        for (a, b) in self.segments.iter().zip(&other.segments) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Incongruent(format!(
                    "segment `{}` {:?} vs `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn values(&self) -> impl Iterator<Item = &f32> {
        self.segments.iter().flat_map(|s| s.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.segments.iter_mut().flat_map(|s| s.data.iter_mut())
    }

    /// Value at a flat index across all segments.
    pub fn get_flat(&self, mut idx: usize) -> Option<f32> {
        for s in &self.segments {
            if idx < s.data.len() {
                return Some(s.data[idx]);
            }
            idx -= s.data.len();
        }
        None
    }

    pub fn set_flat(&mut self, mut idx: usize, value: f32) -> bool {
        for s in &mut self.segments {
            if idx < s.data.len() {
                s.data[idx] = value;
                return true;
            }
            idx -= s.data.len();
        }
        false
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// Element-wise `a·x + y`.
    pub fn axpy(a: f32, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
        x.check_congruent(y)?;
        let mut out = y.clone();
        for (o, &xv) in out.values_mut().zip(x.values()) {
            *o += a * xv;
        }
        Ok(out)
    }

    /// Euclidean distance over all segments, accumulated in `f64`.
    pub fn l2_dist(x: &ParamVector, y: &ParamVector) -> Result<f64> {
        x.check_congruent(y)?;
        let sum: f64 = x
            .values()
            .zip(y.values())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(sum.sqrt())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.total_len() * 4);
        out.extend_from_slice(PAYLOAD_MAGIC);
        out.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for s in &self.segments {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for &d in &s.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamVector> {
        if bytes.len() < PAYLOAD_MAGIC.len() + 8 {
            return Err(Error::Payload("truncated payload".into()));
        }
        if &bytes[..5] != PAYLOAD_MAGIC {
            return Err(Error::Payload("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Payload("crc mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: PAYLOAD_MAGIC.len(),
        };
        let count = r.u32()? as usize;
        let mut segments = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Payload("segment name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Payload("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            segments.push(Segment::new(name, shape, data)?);
        }
        if r.pos != body.len() {
            return Err(Error::Payload("trailing bytes after segments".into()));
        }
        ParamVector::new(segments)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Payload("truncated payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
