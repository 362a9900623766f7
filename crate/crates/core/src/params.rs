//! Named trainable parameters with gradient accumulators, the SGD step,
//! and the bit-exact checkpoint container.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"VCKP";
pub const CKPT_VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Uniquely named parameter entries. Iteration order is the name order
/// (BTreeMap), which keeps every pass over the store deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(CoreError::InvalidArgument(format!("duplicate parameter '{}'", name)));
        }
        let grad = Tensor::zeros(value.shape.clone());
        self.entries.insert(name.to_string(), ParamEntry { value, grad, trainable });
        Ok(())
    }

    /// Uniform init in ±sqrt(1/fan_in), drawn from the given rng.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let bound = (1.0 / fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape, data)?, true)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries.get(name).ok_or_else(|| CoreError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries.get_mut(name).ok_or_else(|| CoreError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[f32]) -> Result<()> {
        let e = self.get_mut(name)?;
        if e.grad.numel() != g.len() {
            return Err(CoreError::ShapeMismatch {
                op: "accumulate_grad",
                detail: format!("param '{}' has {} values, grad has {}", name, e.grad.numel(), g.len()),
            });
        }
        for (a, b) in e.grad.data.iter_mut().zip(g.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            for g in e.grad.data.iter_mut() {
                *g = 0.0;
            }
        }
    }

    /// w <- w - lr * grad for trainable entries, then zero all gradients.
    pub fn sgd_step(&mut self, lr: f32) -> Result<()> {
        for (name, e) in self.entries.iter_mut() {
            if e.trainable {
                for (w, g) in e.value.data.iter_mut().zip(e.grad.data.iter()) {
                    *w -= lr * g;
                }
                if !e.value.all_finite() {
                    return Err(CoreError::NonFinite(format!("parameter '{}' after sgd_step", name)));
                }
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact value bytes. Used to assert
    /// frozen networks stay frozen.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            h.update(name.as_bytes());
            for &d in &e.value.shape {
                h.update((d as u64).to_le_bytes());
            }
            for &v in &e.value.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(CKPT_MAGIC)?;
        f.write_u16::<LittleEndian>(CKPT_VERSION)?;
        f.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for (name, e) in &self.entries {
            let nb = name.as_bytes();
            f.write_u16::<LittleEndian>(nb.len() as u16)?;
            f.write_all(nb)?;
            f.write_u8(e.trainable as u8)?;
            f.write_u8(e.value.shape.len() as u8)?;
            for &d in &e.value.shape {
                f.write_u32::<LittleEndian>(d as u32)?;
            }
            // payload reuses the volume container, flattened
            let flat = crate::volume::Volume::new(
                1,
                (1, 1, e.value.numel()),
                (1.0, 1.0, 1.0),
                e.value.data.clone(),
            )?;
            crate::volume::write_volume_to(&mut f, &flat)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(CoreError::Data(format!("bad checkpoint magic {:?}", magic)));
        }
        let version = f.read_u16::<LittleEndian>()?;
        if version != CKPT_VERSION {
            return Err(CoreError::Data(format!("unsupported checkpoint version {}", version)));
        }
        let count = f.read_u32::<LittleEndian>()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = f.read_u16::<LittleEndian>()? as usize;
            let mut nb = vec![0u8; nlen];
            f.read_exact(&mut nb)?;
            let name = String::from_utf8(nb)
                .map_err(|e| CoreError::Data(format!("bad parameter name: {}", e)))?;
            let trainable = f.read_u8()? != 0;
            let ndim = f.read_u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(f.read_u32::<LittleEndian>()? as usize);
            }
            let flat = crate::volume::read_volume_from(&mut f)?;
            let value = Tensor::new(shape, flat.data().to_vec())?;
            store.insert(&name, value, trainable)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn sgd_lr_zero_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true).unwrap();
        store.accumulate_grad("w", &[5.0, 5.0]).unwrap();
        store.sgd_step(0.0).unwrap();
        assert_eq!(store.get("w").unwrap().value.data, vec![1.0, -2.0]);
    }

    #[test]
    fn sgd_quadratic_single_step() {
        // loss = w^2 at w=1, grad 2, lr 0.25 -> w = 0.5
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap(), true).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let l = g.mul(w, w).unwrap();
        let l = g.sum_all(l);
        g.backward(l).unwrap();
        g.accumulate_param_grads(&mut store).unwrap();
        store.sgd_step(0.25).unwrap();
        assert_eq!(store.get("w").unwrap().value.data, vec![0.5]);
    }

    #[test]
    fn sgd_converges_on_convex_quadratic() {
        // loss = (a - 3)^2 + 2 (b + 1)^2; minimum at (3, -1)
        let mut store = ParamStore::new();
        store.insert("v", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), true).unwrap();
        for _ in 0..20 {
            let mut g = Graph::new();
            let v = g.param(&store, "v").unwrap();
            let c = g.leaf(Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
            let d = g.sub(v, c).unwrap();
            let sq = g.mul(d, d).unwrap();
            let wts = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
            let terms = g.mul(sq, wts).unwrap();
            let l = g.sum_all(terms);
            g.backward(l).unwrap();
            g.accumulate_param_grads(&mut store).unwrap();
            store.sgd_step(0.2).unwrap();
        }
        let v = &store.get("v").unwrap().value.data;
        assert!((v[0] - 3.0).abs() <= 1e-3 && (v[1] + 1.0).abs() <= 1e-3, "{:?}", v);
    }

    #[test]
    fn sgd_never_touches_frozen_entries() {
        let mut store = ParamStore::new();
        store.insert("frozen", Tensor::new(vec![1], vec![7.0]).unwrap(), false).unwrap();
        store.accumulate_grad("frozen", &[100.0]).unwrap();
        store.sgd_step(1.0).unwrap();
        assert_eq!(store.get("frozen").unwrap().value.data, vec![7.0]);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut rng = crate::rng::derive_rng(3, "ckpt");
        let mut store = ParamStore::new();
        store.insert_uniform("a.w", vec![2, 1, 3, 3, 3], 27, &mut rng).unwrap();
        store.insert("b.rvar", Tensor::new(vec![4], vec![1.0, 0.5, 2.0, 1e-6]).unwrap(), false).unwrap();
        let dir = std::env::temp_dir().join(format!("ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.vckp");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(store.checksum(), loaded.checksum());
        assert_eq!(loaded.get("b.rvar").unwrap().trainable, false);
        assert_eq!(
            store.get("a.w").unwrap().value.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            loaded.get("a.w").unwrap().value.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checksum_changes_with_values() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap(), true).unwrap();
        let before = a.checksum();
        a.get_mut("w").unwrap().value.data[0] = 1.5;
        assert_ne!(before, a.checksum());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(vec![1]), true).unwrap();
        assert!(store.insert("w", Tensor::zeros(vec![1]), true).is_err());
    }
}
