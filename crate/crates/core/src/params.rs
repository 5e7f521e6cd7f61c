//! Named trainable parameters and their on-disk checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u32`):
//!
//! ```text
//! "ARVO" | version | entry count | per entry, sorted by name:
//!     name length | name bytes | rank | dims[rank] | f32 payload (LE)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ARVO";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trainable tensors keyed by name, iterated in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

/// Graph handles for every parameter of a store bound to one [`Graph`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    /// Adds or replaces `name`; the tensor is marked as requiring gradients.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) {
        tensor.requires_grad = true;
        tensor.grad = None;
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Moves `other`'s entries into this store.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.entries.extend(other.entries);
    }

    /// Entries whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Registers every entry as a gradient-tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> ParamVars {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.entries {
            let mut value = t.clone();
            value.grad = None;
            vars.insert(name.clone(), g.param(value));
        }
        ParamVars { vars }
    }

    /// Registers every entry as a constant of `g`, for inference.
    pub fn bind_constants(&self, g: &mut Graph<T>) -> ParamVars {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.entries {
            let mut value = t.clone();
            value.grad = None;
            vars.insert(name.clone(), g.constant(value));
        }
        ParamVars { vars }
    }

    /// Stores the gradient of every bound entry (zeros where the output did
    /// not depend on it).
    pub fn set_grads(&mut self, vars: &ParamVars, grads: &Gradients<T>) {
        for (name, t) in self.entries.iter_mut() {
            let g = vars
                .vars
                .get(name)
                .and_then(|&v| grads.get(v))
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); t.numel()]);
            t.grad = Some(g);
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.grad = None;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.entries {
            t.check_finite(name)?;
        }
        Ok(())
    }

    /// Writes the checkpoint format described in the module docs.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&u32_len(self.entries.len())?.to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&u32_len(name.len())?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&u32_len(t.rank())?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&u32_len(d)?.to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format { what: "checkpoint", detail: format!("bad magic {magic:?}") });
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { what: "checkpoint", detail: format!("unsupported version {version}") });
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        let mut previous: Option<String> = None;
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Format { what: "checkpoint", detail: e.to_string() })?;
            if previous.as_deref().is_some_and(|p| p >= name.as_str()) {
                return Err(Error::Format { what: "checkpoint", detail: format!("entry `{name}` out of order") });
            }
            let rank = read_u32(&mut r)? as usize;
            let dims = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let mut payload = vec![0u8; numel * 4];
            r.read_exact(&mut payload)?;
            let data = payload
                .chunks_exact(4)
                .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            store.insert(name.clone(), Tensor::new(&dims, data)?);
            previous = Some(name);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_checkpoint(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::read_checkpoint(BufReader::new(file))
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{n} does not fit the checkpoint format")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// He-style normal initialisation: `N(0, gain^2 * 2 / fan_in)`.
pub fn he_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_bytes_are_bit_exact() {
        let mut store = ParamStore::<f32>::new();
        store.insert("b", Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        store.insert("a", Tensor::new(&[1, 1], vec![0.25]).unwrap());
        let mut bytes = Vec::new();
        store.write_checkpoint(&mut bytes).unwrap();

        let mut expected = Vec::new();
        expected.extend_from_slice(b"ARVO");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"a");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&0.25f32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"b");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);

        let back = ParamStore::<f32>::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = ParamStore::<f32>::read_checkpoint(&b"NOPE\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn missing_param_is_named() {
        let store = ParamStore::<f32>::new();
        match store.get("enc.w") {
            Err(Error::MissingParam(n)) => assert_eq!(n, "enc.w"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
