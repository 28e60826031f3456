//! Content hashing for run artifacts.
//!
//! Hashes are over exact byte encodings of the underlying values (little
//! endian for floats), so two runs agree on a hash exactly when they agree
//! bit for bit on the artifact.

use sha2::{Digest, Sha256};

use crate::nn::Tensor;

pub struct ArtifactHasher {
    inner: Sha256,
}

impl ArtifactHasher {
    pub fn new() -> Self {
        Self {
            inner: Sha256::new(),
        }
    }

    pub fn bytes(mut self, bytes: &[u8]) -> Self {
        self.inner.update(bytes);
        self
    }

    pub fn text(self, text: &str) -> Self {
        self.bytes(text.as_bytes())
    }

    pub fn floats(mut self, values: &[f64]) -> Self {
        for v in values {
            self.inner.update(v.to_le_bytes());
        }
        self
    }

    pub fn tensor(self, t: &Tensor) -> Self {
        self.bytes(&(t.n as u64).to_le_bytes())
            .bytes(&(t.c as u64).to_le_bytes())
            .bytes(&(t.h as u64).to_le_bytes())
            .bytes(&(t.w as u64).to_le_bytes())
            .floats(&t.data)
    }

    pub fn finish(self) -> String {
        hex::encode(self.inner.finalize())
    }
}

impl Default for ArtifactHasher {
    fn default() -> Self {
        Self::new()
    }
}
