// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

use sha2::{Digest, Sha256};

use super::{normalize, EmbedError, Embedder};
use crate::text::tokenize;

/// Feature-hashing embedder: each token lands in one of `dim` buckets with a
/// hashed ±1 sign; the bucket counts are L2-normalized.
///
/// Deterministic across processes for a given `(dim, seed)`.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Bucket index and sign for one token.
    pub fn bucket(&self, token: &str) -> (usize, f64) {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        let index = (u64::from_le_bytes(word) % self.dim as u64) as usize;
        let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        (index, sign)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut tokens = tokenize(trimmed);
        if tokens.is_empty() {
            tokens.push(trimmed.to_string());
        }
        let mut v = vec![0.0; self.dim];
        for token in &tokens {
            let (i, s) = self.bucket(token);
            v[i] += s;
        }
        if normalize(&mut v).is_err() {
            // all tokens cancelled out
            let (i, _) = self.bucket(trimmed);
            v[i] = 1.0;
        }
        Ok(v)
    }
}
