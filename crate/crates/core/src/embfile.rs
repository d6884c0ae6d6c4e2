//! `PPSE` embedding matrices and their text sidecars.
//!
//! Layout: magic `PPSE`, then little-endian `u32` version (1), `u32` row
//! count, `u32` dim, then `count × dim` little-endian f32 values, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PPSE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Format(format!(
                "{} values do not form rows of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Format(format!("row of length {} in a dim-{dim} matrix", bad.len())));
        }
        Self::new(dim, rows.concat())
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing PPSE magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
        let version = word(4);
        if version != VERSION {
            return Err(Error::Version {
                what: "PPSE embedding file",
                found: version,
                expected: VERSION,
            });
        }
        let count = word(8) as usize;
        let dim = word(12) as usize;
        let expected = HEADER_LEN + count * dim * 4;
        if bytes.len() != expected || dim == 0 {
            return Err(Error::Format(format!(
                "PPSE header declares {count}×{dim} but payload is {} bytes",
                bytes.len() - HEADER_LEN
            )));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Ok(Self { dim, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// `file.ppse` → `file.ppse.<ext>`
pub fn sidecar_path(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Feature export sidecar: one `id<TAB>label` line per row.
pub fn write_labels(path: impl AsRef<Path>, ids: &[usize], labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let text: String = ids
        .iter()
        .zip(labels)
        .map(|(i, l)| format!("{i}\t{l}\n"))
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<usize>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            file: path.display().to_string(),
            line: idx + 1,
            msg: msg.to_string(),
        };
        let (id, label) = line.split_once('\t').ok_or_else(|| err("expected `id<TAB>label`"))?;
        ids.push(id.trim().parse().map_err(|_| err("id is not an integer"))?);
        labels.push(label.trim().parse().map_err(|_| err("label is not an integer"))?);
    }
    Ok((ids, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = EmbeddingMatrix::new(2, vec![1.0, -0.5, 0.25, 3.0]).unwrap();
        let b = m.to_bytes();
        assert_eq!(&b[..4], b"PPSE");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn rejects_bad_files() {
        let m = EmbeddingMatrix::new(1, vec![1.0]).unwrap();
        let mut b = m.to_bytes();
        b[4] = 2;
        assert!(matches!(EmbeddingMatrix::from_bytes(&b), Err(Error::Version { found: 2, .. })));
        let b = m.to_bytes();
        assert!(EmbeddingMatrix::from_bytes(&b[..b.len() - 1]).is_err());
        assert!(EmbeddingMatrix::from_bytes(b"PPSX").is_err());
    }

    #[test]
    fn labels_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.labels");
        write_labels(&p, &[4, 9], &[0, 3]).unwrap();
        assert_eq!(read_labels(&p).unwrap(), (vec![4, 9], vec![0, 3]));
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exact(dim in 1usize..6, bits in proptest::collection::vec(any::<u32>(), 0..30)) {
            let n = bits.len() / dim * dim;
            let data: Vec<f32> = bits[..n].iter().map(|b| f32::from_bits(*b)).collect();
            let m = EmbeddingMatrix::new(dim, data).unwrap();
            let bytes = m.to_bytes();
            let back = EmbeddingMatrix::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
