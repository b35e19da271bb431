//! Content digests binding shields and manifests to the models they came from.

use std::io::{self, Read, Write};
use std::path::Path;

use sha2::{Digest as _, Sha256};

use crate::mdp::{format::write_mdp, BasicMdp};

/// `io::Write` sink feeding a SHA-256 state.
#[derive(Default)]
pub struct HashWriter(Sha256);

impl HashWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = HashWriter::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.write_all(&buf[..n])?;
    }
    Ok(hasher.finish())
}

/// Digest of the canonical text serialization of `mdp`.
pub fn mdp_digest(mdp: &BasicMdp) -> String {
    let mut h = HashWriter::new();
    write_mdp(mdp, std::io::BufWriter::new(&mut h)).expect("hashing cannot fail");
    h.finish()
}
