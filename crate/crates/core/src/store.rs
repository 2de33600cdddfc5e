//! Content-addressed blob store: `root/ab/cdef…` keyed by SHA-256 hex.

use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct ContentStore {
    root: PathBuf,
}

impl ContentStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &str) -> io::Result<PathBuf> {
        let valid = key.len() == 64
            && key
                .bytes()
                .all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase());
        if !valid {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("bad store key {key:?}"),
            ));
        }
        Ok(self.root.join(&key[..2]).join(&key[2..]))
    }

    /// Stores `bytes` and returns their key. Writing the same bytes twice is
    /// a no-op.
    pub fn put(&self, bytes: &[u8]) -> io::Result<String> {
        let key = digest_hex(bytes);
        let path = self.path_for(&key)?;
        if path.exists() {
            return Ok(key);
        }
        let dir = path.parent().expect("keyed path has a parent");
        std::fs::create_dir_all(dir)?;
        // write-then-rename so readers never see a partial blob
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        io::Write::write_all(&mut tmp, bytes)?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(key)
    }

    pub fn get(&self, key: &str) -> io::Result<Vec<u8>> {
        std::fs::read(self.path_for(key)?)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.path_for(key).is_ok_and(|p| p.exists())
    }
}
