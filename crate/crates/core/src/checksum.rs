use alloc::string::String;
use core::fmt::Write;

use sha2::{Digest, Sha256};

/// Streaming SHA-256 over the exact bit patterns of float buffers.
#[derive(Default, Clone)]
pub struct Checksum {
    hasher: Sha256,
}

impl Checksum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update_f32(&mut self, data: &[f32]) -> &mut Self {
        self.hasher.update((data.len() as u64).to_le_bytes());
        for v in data {
            self.hasher.update(v.to_bits().to_le_bytes());
        }
        self
    }

    pub fn update_bytes(&mut self, data: &[u8]) -> &mut Self {
        self.hasher.update((data.len() as u64).to_le_bytes());
        self.hasher.update(data);
        self
    }

    pub fn hex(&self) -> String {
        let digest = self.hasher.clone().finalize();
        let mut s = String::with_capacity(64);
        for b in digest.iter() {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}
