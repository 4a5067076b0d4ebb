//! Content-addressed kernel program cache.
//!
//! File layout: `"QKCH"`, version byte `1`, then records of
//! `[32-byte hash][u64 LE length][blob]`. The index is rebuilt by a linear
//! scan on open; a later record for the same hash overrides earlier ones.
//! Writes go to a temporary file in the same directory which then replaces
//! the cache, so readers never observe a partial record.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::{normalize_whitespace, KernelProgram};

const MAGIC: &[u8; 4] = b"QKCH";
const VERSION: u8 = 1;

/// Stand-in for a compiled device binary: the whitespace-normalized source.
pub fn canonical_blob(program: &KernelProgram) -> Vec<u8> {
    normalize_whitespace(&program.source).into_bytes()
}

#[derive(Debug)]
pub struct KernelCache {
    path: PathBuf,
    index: HashMap<[u8; 32], Vec<u8>>,
    /// Record bytes in file order, rewritten on every put.
    records: Vec<u8>,
}

fn parse(bytes: &[u8]) -> Result<(HashMap<[u8; 32], Vec<u8>>, Vec<u8>)> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::Cache("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Cache(format!("unsupported version {}", bytes[4])));
    }
    let body = &bytes[5..];
    let mut index = HashMap::new();
    let mut pos = 0;
    while pos < body.len() {
        if body.len() - pos < 40 {
            return Err(Error::Cache("truncated record header".into()));
        }
        let hash: [u8; 32] = body[pos..pos + 32].try_into().expect("32 bytes");
        let len = u64::from_le_bytes(body[pos + 32..pos + 40].try_into().expect("8 bytes"));
        pos += 40;
        if ((body.len() - pos) as u64) < len {
            return Err(Error::Cache("truncated record".into()));
        }
        let len = len as usize;
        index.insert(hash, body[pos..pos + len].to_vec());
        pos += len;
    }
    Ok((index, body.to_vec()))
}

impl KernelCache {
    /// Opens `path`, starting empty if it does not exist.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let (index, records) = match fs::read(&path) {
            Ok(bytes) => parse(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => (HashMap::new(), Vec::new()),
            Err(e) => return Err(Error::Cache(format!("{}: {e}", path.display()))),
        };
        Ok(KernelCache { path, index, records })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, hash: &[u8; 32]) -> Option<&[u8]> {
        self.index.get(hash).map(Vec::as_slice)
    }

    /// Stores `blob` under the program's hash. Returns `false` when the
    /// same bytes are already stored.
    pub fn put(&mut self, program: &KernelProgram, blob: &[u8]) -> Result<bool> {
        let hash = program.content_hash;
        if self.index.get(&hash).is_some_and(|b| b == blob) {
            return Ok(false);
        }
        let mut records = self.records.clone();
        records.extend_from_slice(&hash);
        records.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        records.extend_from_slice(blob);
        self.write(&records)?;
        self.records = records;
        self.index.insert(hash, blob.to_vec());
        Ok(true)
    }

    fn write(&self, records: &[u8]) -> Result<()> {
        let dir = match self.path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let err = |e: std::io::Error| Error::Cache(format!("{}: {e}", self.path.display()));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
        tmp.write_all(MAGIC).map_err(err)?;
        tmp.write_all(&[VERSION]).map_err(err)?;
        tmp.write_all(records).map_err(err)?;
        tmp.as_file().sync_all().map_err(err)?;
        tmp.persist(&self.path).map_err(|e| err(e.error))?;
        Ok(())
    }

    /// Returns the cached blob for `program`, building and storing it on a
    /// miss. Storage failures are logged and the fresh blob is returned.
    pub fn get_or_build(&mut self, program: &KernelProgram) -> Vec<u8> {
        if let Some(b) = self.get(&program.content_hash) {
            return b.to_vec();
        }
        let blob = canonical_blob(program);
        if let Err(e) = self.put(program, &blob) {
            log::warn!("kernel cache write failed, continuing without cache: {e}");
        }
        blob
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codegen::{emit_relu_program, Dialect};
    use crate::dtype::DataType;

    #[test]
    fn empty_then_put_get() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kernels.bin");
        let mut c = KernelCache::open(&path).unwrap();
        let p = emit_relu_program(DataType::Int8Q, Dialect::Cuda).unwrap();
        assert!(c.get(&p.content_hash).is_none());
        let blob = canonical_blob(&p);
        assert!(c.put(&p, &blob).unwrap());
        assert!(!c.put(&p, &blob).unwrap());
        assert_eq!(c.get(&p.content_hash), Some(blob.as_slice()));

        let reopened = KernelCache::open(&path).unwrap();
        assert_eq!(reopened.get(&p.content_hash), Some(blob.as_slice()));
        assert_eq!(reopened.len(), 1);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..5], b"QKCH\x01");
        assert_eq!(bytes.len(), 5 + 40 + blob.len());
    }

    #[test]
    fn last_put_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        let p = emit_relu_program(DataType::Fp32, Dialect::OpenCl).unwrap();
        let mut c = KernelCache::open(&path).unwrap();
        c.put(&p, b"one").unwrap();
        c.put(&p, b"two").unwrap();
        assert_eq!(KernelCache::open(&path).unwrap().get(&p.content_hash), Some(&b"two"[..]));
    }

    #[test]
    fn all_programs_have_distinct_hashes() {
        let mut seen = std::collections::HashSet::new();
        for d in DataType::ALL {
            for dialect in [Dialect::OpenCl, Dialect::Cuda] {
                let p = emit_relu_program(d, dialect).unwrap();
                assert!(seen.insert(p.content_hash));
                // one token changed
                let mut q = p.clone();
                q.source = q.source.replacen("ReLUForward", "ReLUForwarD", 1);
                assert_ne!(crate::codegen::content_hash(dialect, &q.source), p.content_hash);
            }
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        fs::write(&path, b"QKCX\x01").unwrap();
        assert!(matches!(KernelCache::open(&path), Err(Error::Cache(_))));
        fs::write(&path, [b"QKCH\x01".as_slice(), &[0u8; 39]].concat()).unwrap();
        assert!(matches!(KernelCache::open(&path), Err(Error::Cache(_))));
    }

    #[test]
    fn get_or_build_falls_back_when_unwritable() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = KernelCache::open(dir.path().join("missing-dir/c")).unwrap();
        let p = emit_relu_program(DataType::Fp16, Dialect::Cuda).unwrap();
        assert_eq!(c.get_or_build(&p), canonical_blob(&p));
        assert!(c.is_empty());
    }
}
