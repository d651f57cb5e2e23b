//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u64` manifest length, a JSON manifest (metadata strings plus the name and
//! length of every array, in order), then every array as little-endian `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Parameterized;

const MAGIC: &[u8; 8] = b"VFCKPT\0\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: BTreeMap<String, String>,
    arrays: Vec<(String, usize)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, data: &[f64]) {
        self.arrays.push((name.into(), data.to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, d)| d.as_slice())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint is missing metadata `{key}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            version: FORMAT_VERSION,
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(n, d)| (n.clone(), d.len())).collect(),
        };
        let text = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + text.len() + 8 * self.arrays.iter().map(|a| a.1.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        for (_, data) in &self.arrays {
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
        let len = u64::from_le_bytes(b8) as usize;
        if r.len() < len {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&r[..len]).map_err(|e| bad(&format!("bad manifest: {e}")))?;
        r = &r[len..];
        let total: usize = manifest.arrays.iter().map(|(_, n)| n).sum();
        if r.len() != 8 * total {
            return Err(bad(&format!("expected {} data bytes, found {}", 8 * total, r.len())));
        }
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for (name, n) in manifest.arrays {
            let data = r[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            r = &r[8 * n..];
            arrays.push((name, data));
        }
        Ok(Self {
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Store every parameter and buffer of `model` under `prefix`.
    pub fn push_model<M: Parameterized + ?Sized>(&mut self, prefix: &str, model: &M) {
        for (name, data) in model.param_names().into_iter().zip(model.params()) {
            self.push(format!("{prefix}.{name}"), data);
        }
        for (name, data) in model.buffer_names().into_iter().zip(model.buffers()) {
            self.push(format!("{prefix}.{name}"), data);
        }
    }

    /// Overwrite `model` from arrays stored by [`Checkpoint::push_model`].
    pub fn restore_model<M: Parameterized + ?Sized>(&self, prefix: &str, model: &mut M) -> Result<()> {
        let names = model.param_names();
        for (name, dst) in names.iter().zip(model.params_mut()) {
            let key = format!("{prefix}.{name}");
            let src = self.get(&key).ok_or_else(|| Error::InvalidArgument(format!("checkpoint is missing `{key}`")))?;
            crate::error::check_len("checkpoint array", dst.len(), src.len())?;
            dst.copy_from_slice(src);
        }
        let names = model.buffer_names();
        for (name, dst) in names.iter().zip(model.buffers_mut()) {
            let key = format!("{prefix}.{name}");
            let src = self.get(&key).ok_or_else(|| Error::InvalidArgument(format!("checkpoint is missing `{key}`")))?;
            crate::error::check_len("checkpoint buffer", dst.len(), src.len())?;
            dst.copy_from_slice(src);
        }
        model.refresh();
        Ok(())
    }

    pub fn push_rng(&mut self, prefix: &str, rng: &ChaCha8Rng) {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        self.set_meta(&format!("{prefix}.seed"), seed);
        self.set_meta(&format!("{prefix}.stream"), rng.get_stream());
        self.set_meta(&format!("{prefix}.word_pos"), rng.get_word_pos());
    }

    pub fn restore_rng(&self, prefix: &str) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let hex = self.meta(&format!("{prefix}.seed"))?;
        if hex.len() != 64 {
            return Err(Error::InvalidArgument("rng seed must be 32 bytes".into()));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::InvalidArgument("rng seed is not hex".into()))?;
        }
        let parse_err = |k: &str| Error::InvalidArgument(format!("bad rng field {k}"));
        let stream: u64 = self.meta(&format!("{prefix}.stream"))?.parse().map_err(|_| parse_err("stream"))?;
        let pos: u128 = self.meta(&format!("{prefix}.word_pos"))?.parse().map_err(|_| parse_err("word_pos"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn bytes_round_trip_exactly() {
        let mut c = Checkpoint::default();
        c.push("a", &[1.0, -0.0, f64::MIN_POSITIVE, 1e308]);
        c.push("empty", &[]);
        c.set_meta("iteration", 12);
        let back = Checkpoint::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("a").unwrap()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupt_input_rejected() {
        let mut c = Checkpoint::default();
        c.push("a", &[1.0]);
        let mut bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..37 {
            let _: u32 = rng.random();
        }
        let mut c = Checkpoint::default();
        c.push_rng("rng", &rng);
        let mut back = c.restore_rng("rng").unwrap();
        for _ in 0..10 {
            assert_eq!(rng.random::<u64>(), back.random::<u64>());
        }
    }
}
