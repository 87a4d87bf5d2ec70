//! Binary weight container shared by the denoiser and the pose predictor.
//!
//! Layout (little-endian): 4-byte magic, u32 format version, u32-length-prefixed
//! config text, u32-length-prefixed metadata text, u32 section count, then per
//! section a u32-length-prefixed name, u32 rank, u32 dims, raw f32 values; a
//! trailing CRC32 covers every preceding byte.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{GidError, Result};
use crate::numerics::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub magic: [u8; 4],
    pub config: String,
    pub metadata: String,
    pub params: ParamSet<f32>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_text(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(GidError::Checkpoint(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| GidError::Checkpoint("text block is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&self.magic);
        put_u32(&mut buf, FORMAT_VERSION);
        put_text(&mut buf, &self.config);
        put_text(&mut buf, &self.metadata);
        put_u32(&mut buf, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_text(&mut buf, name);
            put_u32(&mut buf, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut buf, d as u32);
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        put_u32(&mut buf, crc);
        buf
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(GidError::Checkpoint("file too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(GidError::Checkpoint("CRC mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if found != magic {
            return Err(GidError::Checkpoint(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&found)
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(GidError::Checkpoint(format!("unsupported format version {version}")));
        }
        let config = r.text()?;
        let metadata = r.text()?;
        let sections = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..sections {
            let name = r.text()?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(name, Tensor::new(&shape, data)?);
        }
        if r.pos != body.len() {
            return Err(GidError::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Checkpoint {
            magic,
            config,
            metadata,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf, magic)
    }

    /// Checks the stored tensors have exactly the names and shapes of `expected`.
    pub fn check_layout(&self, expected: &ParamSet<f32>) -> Result<()> {
        if self.params.len() != expected.len() {
            return Err(GidError::Checkpoint(format!(
                "config implies {} tensors ({} values), file has {} ({} values)",
                expected.len(),
                expected.count(),
                self.params.len(),
                self.params.count()
            )));
        }
        for ((n1, t1), (n2, t2)) in self.params.iter().zip(expected.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(GidError::Checkpoint(format!(
                    "section {n1} {:?} does not match expected {n2} {:?}",
                    t1.shape(),
                    t2.shape()
                )));
            }
        }
        Ok(())
    }
}

/// `key=value` lines, in order.
pub fn kv_text(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| GidError::Config(format!("expected key=value, got {l:?}")))
        })
        .collect()
}

/// Looks up `key` and parses it.
pub fn kv_get<T: std::str::FromStr>(kv: &[(String, String)], key: &str) -> Result<T> {
    let v = kv
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| GidError::Config(format!("missing key {key}")))?;
    v.parse()
        .map_err(|_| GidError::Config(format!("bad value for {key}: {v:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamSet::new();
        p.push("a.w", Tensor::from_f64(&[2, 3], &[1.0, -2.5, 3.25, 0.1, 1e-8, -0.0]).unwrap());
        p.push("a.b", Tensor::from_f64(&[3], &[f64::MAX, 0.0, 7.0]).unwrap());
        Checkpoint {
            magic: *b"GIDC",
            config: "window=64\n".into(),
            metadata: "seed=1\n".into(),
            params: p,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, *b"GIDC").unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in c.params.tensors().iter().zip(back.params.tensors()) {
            let x: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let y: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn corruption_and_magic_detected() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes, *b"POSC").is_err());
        bytes[20] ^= 1;
        let err = Checkpoint::from_bytes(&bytes, *b"GIDC").unwrap_err();
        assert!(err.to_string().contains("CRC"));
        assert!(Checkpoint::from_bytes(&bytes[..5], *b"GIDC").is_err());
    }

    #[test]
    fn kv_helpers() {
        let kv = parse_kv("a=1\n# c\n\nb = x y\n").unwrap();
        assert_eq!(kv_get::<u32>(&kv, "a").unwrap(), 1);
        assert_eq!(kv_get::<String>(&kv, "b").unwrap(), "x y");
        assert!(kv_get::<u32>(&kv, "b").is_err());
        assert!(parse_kv("nokey\n").is_err());
    }
}
