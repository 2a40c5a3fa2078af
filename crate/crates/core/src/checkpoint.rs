//! Flat binary container of named `f64` arrays.
//!
//! Layout:
//!
//! ```text
//! PIMARRAYS 1\n
//! <name>\t<shape>\t<byte offset>\t<element count>\n     one line per array
//! \n                                                    end of header
//! <payload>                                             little-endian f64
//! ```
//!
//! `<shape>` is `x`-joined extents (`16x1x3x3`), or `-` for a scalar. Offsets
//! are relative to the start of the payload and arrays are stored back to back
//! in header order. Used for model checkpoints (weights plus optimizer state)
//! and for persisted whitening matrices.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "PIMARRAYS 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayFile {
    arrays: Vec<(String, Tensor)>,
}

impl ArrayFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(['\t', '\n']) {
            return Err(Error::invalid("array file", format!("bad array name {name:?}")));
        }
        if self.get(&name).is_some() {
            return Err(Error::invalid("array file", format!("duplicate array {name:?}")));
        }
        self.arrays.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.arrays.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Adds every parameter under `prefix` + name.
    pub fn push_params(&mut self, prefix: &str, params: &ParamStore) -> Result<()> {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}{name}"), t.clone())?;
        }
        Ok(())
    }

    /// Collects the arrays whose names start with `prefix`, prefix stripped.
    pub fn params_with_prefix(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.insert(rest, t.clone());
            }
        }
        store
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\n");
        let mut offset = 0usize;
        for (name, t) in &self.arrays {
            let shape = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
            };
            header.push_str(&format!("{name}\t{shape}\t{offset}\t{}\n", t.numel()));
            offset += t.numel() * 8;
        }
        header.push('\n');
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for (_, t) in &self.arrays {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("array file: {msg}"));
        let end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("unterminated header"))?;
        let header = std::str::from_utf8(&bytes[..end + 1]).map_err(|_| bad("header is not UTF-8"))?;
        let payload = &bytes[end + 2..];
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing magic line"));
        }
        let mut out = ArrayFile::new();
        let mut expected_offset = 0usize;
        for line in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, shape, offset, count] = fields[..] else {
                return Err(bad(&format!("malformed header line {line:?}")));
            };
            let shape: Vec<usize> = if shape == "-" {
                Vec::new()
            } else {
                shape
                    .split('x')
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(&format!("bad shape in {line:?}")))?
            };
            let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
            let count: usize = count.parse().map_err(|_| bad("bad element count"))?;
            if offset != expected_offset {
                return Err(bad(&format!(
                    "array {name} at offset {offset}, expected {expected_offset}"
                )));
            }
            let stop = offset + count * 8;
            let raw = payload.get(offset..stop).ok_or_else(|| bad("payload truncated"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            out.push(name, Tensor::new(shape, data)?)?;
            expected_offset = stop;
        }
        if expected_offset != payload.len() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_readable_text() {
        let mut f = ArrayFile::new();
        f.push("w", Tensor::new([2, 3], vec![1.5; 6]).unwrap()).unwrap();
        f.push("s", Tensor::scalar(-2.0)).unwrap();
        let bytes = f.to_bytes();
        let text = String::from_utf8_lossy(&bytes[..40]);
        assert!(text.starts_with("PIMARRAYS 1\nw\t2x3\t0\t6\ns\t-\t48\t1\n\n"));
        assert_eq!(bytes.len(), "PIMARRAYS 1\nw\t2x3\t0\t6\ns\t-\t48\t1\n\n".len() + 7 * 8);
        assert_eq!(&bytes[bytes.len() - 8..], &(-2.0f64).to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let mut f = ArrayFile::new();
        f.push("a", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let bytes = f.to_bytes();
        assert!(ArrayFile::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ArrayFile::from_bytes(&bytes[1..]).is_err());
        assert!(f.push("a", Tensor::scalar(0.0)).is_err());
        assert!(f.push("tab\tname", Tensor::scalar(0.0)).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(arrays in prop::collection::vec(
            (prop::collection::vec(1usize..4, 0..4), any::<u64>()), 0..6)) {
            let mut f = ArrayFile::new();
            for (i, (shape, seed)) in arrays.iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|j| f64::from_bits(seed.wrapping_add(j as u64) >> 2)).collect();
                f.push(format!("arr.{i}"), Tensor::new(shape.clone(), data).unwrap()).unwrap();
            }
            let back = ArrayFile::from_bytes(&f.to_bytes()).unwrap();
            prop_assert_eq!(back.len(), f.len());
            for ((n1, t1), (n2, t2)) in f.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let same = t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same);
            }
        }
    }
}
