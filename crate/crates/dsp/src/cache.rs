//! On-disk feature cache keyed by utterance id and front-end config hash.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{DspError, Result};
use crate::frontend::{FeatureKind, FeatureMatrix};

const MAGIC: &[u8; 8] = b"PSFEAT01";

pub fn encode(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + m.data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&m.config_hash.to_le_bytes());
    out.extend_from_slice(&(m.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(m.n_dims as u32).to_le_bytes());
    out.push(m.kind.code());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<FeatureMatrix> {
    let bad = |m: &str| DspError::Cache(m.to_string());
    if bytes.len() < 25 || &bytes[..8] != MAGIC {
        return Err(bad("not a feature record"));
    }
    let hash = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let t = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
    let kind = FeatureKind::from_code(bytes[24]).ok_or_else(|| bad("unknown feature kind"))?;
    let body = &bytes[25..];
    if body.len() != t * d * 8 {
        return Err(bad("truncated or oversized record"));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(t, d, data, kind, hash)
}

/// Directory of `<utt>.<hash>.feat` records.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    root: PathBuf,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn path_for(&self, utt: &str, hash: u64) -> PathBuf {
        self.root.join(format!("{utt}.{hash:016x}.feat"))
    }

    pub fn load(&self, utt: &str, hash: u64) -> Result<Option<FeatureMatrix>> {
        let p = self.path_for(utt, hash);
        if !p.exists() {
            return Ok(None);
        }
        let m = read_record(&p)?;
        if m.config_hash != hash {
            return Err(DspError::Cache(format!("{} holds a different config hash", p.display())));
        }
        Ok(Some(m))
    }

    pub fn store(&self, utt: &str, m: &FeatureMatrix) -> Result<PathBuf> {
        let p = self.path_for(utt, m.config_hash);
        write_record(&p, m)?;
        Ok(p)
    }

    /// Returns the cached matrix or computes and stores it.
    pub fn get_or_compute<F>(&self, utt: &str, hash: u64, compute: F) -> Result<FeatureMatrix>
    where
        F: FnOnce() -> Result<FeatureMatrix>,
    {
        if let Some(m) = self.load(utt, hash)? {
            return Ok(m);
        }
        let m = compute()?;
        self.store(utt, &m)?;
        Ok(m)
    }
}

pub fn write_record(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let tmp = path.with_extension("feat.tmp");
    fs::File::create(&tmp)?.write_all(&encode(m))?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_record(path: &Path) -> Result<FeatureMatrix> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureMatrix {
        FeatureMatrix::new(3, 2, vec![1.0, -2.5, 0.0, 1e-10, f64::MIN_POSITIVE, 7.0], FeatureKind::Lfbe, 0xdead_beef).unwrap()
    }

    #[test]
    fn record_round_trip() {
        let m = sample();
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn truncated_record_is_rejected() {
        let bytes = encode(&sample());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"garbage").is_err());
    }

    #[test]
    fn cache_computes_once() {
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path()).unwrap();
        let m = sample();
        let mut calls = 0;
        let a = cache.get_or_compute("u1", m.config_hash, || {
            calls += 1;
            Ok(m.clone())
        });
        assert_eq!(a.unwrap(), m);
        let b = cache
            .get_or_compute("u1", m.config_hash, || panic!("should hit the cache"))
            .unwrap();
        assert_eq!(b, m);
        assert_eq!(calls, 1);
        assert!(cache.load("u1", 1).unwrap().is_none());
    }
}
