//! Versioned binary checkpoint: a manifest of named shapes followed by
//! flat 64-bit little-endian buffers in manifest order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint manifest mismatch: expected {expected}, got {got}")]
    ManifestMismatch { expected: String, got: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let e = Self { name: name.into(), shape, data };
        assert_eq!(e.shape.iter().product::<usize>(), e.data.len());
        e
    }
}

pub fn save(path: &Path, entries: &[Entry]) -> Result<(), CheckpointError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(CheckpointError::Format(format!("name too long: {}", e.name)));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for e in entries {
        for &v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Entry>, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *cur + n > bytes.len() {
            return Err(CheckpointError::Format("truncated checkpoint".into()));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };

    if take(&mut cur, 4)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;

    let mut heads: Vec<(String, Vec<usize>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| CheckpointError::Format("non-utf8 name".into()))?;
        let ndim = take(&mut cur, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
        }
        heads.push((name, shape));
    }

    let mut entries = Vec::with_capacity(count);
    for (name, shape) in heads {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()));
        }
        entries.push(Entry { name, shape, data });
    }
    if cur != bytes.len() {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }
    Ok(entries)
}

/// Reject a loaded checkpoint whose manifest differs from `expected`
/// (same names, shapes, and order).
pub fn expect_manifest(
    entries: &[Entry],
    expected: &[(String, Vec<usize>)],
) -> Result<(), CheckpointError> {
    let got: Vec<(String, Vec<usize>)> =
        entries.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
    if got != expected {
        return Err(CheckpointError::ManifestMismatch {
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_mismatch_rejection() {
        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.ckpt");
        let entries = vec![
            Entry::new("a.w", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            Entry::new("a.b", vec![3], vec![0.0, -1.5, 2.25]),
        ];
        save(&path, &entries).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded, entries);

        let manifest: Vec<(String, Vec<usize>)> =
            entries.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
        expect_manifest(&loaded, &manifest).unwrap();

        let wrong = vec![("a.w".to_string(), vec![3, 2]), ("a.b".to_string(), vec![3])];
        assert!(expect_manifest(&loaded, &wrong).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
