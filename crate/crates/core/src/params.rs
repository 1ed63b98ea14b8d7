//! Named parameter tensors with paired gradient buffers, their initializers
//! and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian `u32`):
//!
//! ```text
//! "ATC1" count { name_len name_utf8 n c h w f32_le[n*c*h*w] }*count
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor4<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor4::zeros(value.shape());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    /// Moves every parameter of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(Error::config(format!("duplicate parameter `{name}`")));
            }
            self.params.insert(name, p);
        }
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    fn entry(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    fn entry_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor4<T>> {
        Ok(&self.entry(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor4<T>> {
        Ok(&mut self.entry_mut(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor4<T>> {
        Ok(&self.entry(name)?.grad)
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut Tensor4<T>> {
        Ok(&mut self.entry_mut(name)?.grad)
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor4<T>) -> Result<()> {
        self.entry_mut(name)?.grad.add_assign(g)
    }

    /// Adds a flat slice, e.g. a bias gradient, to the named gradient buffer.
    pub fn accumulate_grad_slice(&mut self, name: &str, g: &[T]) -> Result<()> {
        let p = self.entry_mut(name)?;
        if p.grad.data().len() != g.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for `{name}` with {} elements",
                g.len(),
                p.grad.data().len()
            )));
        }
        for (a, &b) in p.grad.data_mut().iter_mut().zip(g) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.shape().numel()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .map(|p| {
                p.grad
                    .data()
                    .iter()
                    .map(|g| g.as_f64() * g.as_f64())
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// How a declared parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Convolution or linear weight; Kaiming-normal with the given fan-in.
    Weight {
        fan_in: usize,
    },
    Bias,
    /// Raw fusion logit, always starts at 0.
    Logit,
    /// Multiplicative affine scale (batch-norm gamma), starts at 1.
    Scale,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub role: ParamRole,
}

impl ParamDecl {
    pub fn new(name: impl Into<String>, shape: Shape, role: ParamRole) -> Self {
        ParamDecl {
            name: name.into(),
            shape,
            role,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Every parameter exactly 0.
    Zeros,
    /// Weights ~ N(0, 2 / fan_in); biases and logits 0; scales 1.
    #[default]
    Kaiming,
}

/// Materializes declarations in order from a single seeded stream.
pub fn init_from_decls<T: Real>(
    decls: &[ParamDecl],
    scheme: InitScheme,
    seed: u64,
) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for d in decls {
        let value = match (scheme, d.role) {
            (InitScheme::Zeros, _) => Tensor4::zeros(d.shape),
            (InitScheme::Kaiming, ParamRole::Weight { fan_in }) => {
                if fan_in == 0 {
                    return Err(Error::config(format!("`{}` has zero fan-in", d.name)));
                }
                Tensor4::randn(d.shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
            }
            (InitScheme::Kaiming, ParamRole::Scale) => Tensor4::full(d.shape, T::one()),
            (InitScheme::Kaiming, ParamRole::Bias | ParamRole::Logit) => Tensor4::zeros(d.shape),
        };
        store.insert(d.name.clone(), value)?;
    }
    Ok(store)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ATC1";

pub fn encode_checkpoint(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in p.value.shape().dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = crate::data::ByteReader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(at, "parameter name is not utf-8"))?
            .to_string();
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        let shape = Shape::from_dims(dims);
        let mut data = Vec::with_capacity(shape.numel());
        for _ in 0..shape.numel() {
            data.push(r.f32()?);
        }
        store
            .insert(name, Tensor4::from_vec(shape, data)?)
            .map_err(|e| Error::format(at, e.to_string()))?;
    }
    r.expect_end()?;
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    crate::data::write_atomic(path.as_ref(), &encode_checkpoint(store))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(Error::io_at(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decls() -> Vec<ParamDecl> {
        vec![
            ParamDecl::new(
                "w",
                Shape::new(4, 2, 3, 3),
                ParamRole::Weight { fan_in: 18 },
            ),
            ParamDecl::new("b", Shape::new(1, 4, 1, 1), ParamRole::Bias),
            ParamDecl::new("g", Shape::new(1, 4, 1, 1), ParamRole::Scale),
            ParamDecl::new("z", Shape::new(1, 1, 1, 1), ParamRole::Logit),
        ]
    }

    #[test]
    fn zeros_scheme_is_all_zero() {
        let s: ParamStore<f32> = init_from_decls(&decls(), InitScheme::Zeros, 1).unwrap();
        assert!(s
            .iter()
            .all(|(_, p)| p.value.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn kaiming_is_deterministic_and_roles_respected() {
        let a: ParamStore<f32> = init_from_decls(&decls(), InitScheme::Kaiming, 7).unwrap();
        let b: ParamStore<f32> = init_from_decls(&decls(), InitScheme::Kaiming, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.value("b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.value("g").unwrap().data().iter().all(|&v| v == 1.0));
        assert_eq!(a.value("z").unwrap().data(), &[0.0]);
        let c: ParamStore<f32> = init_from_decls(&decls(), InitScheme::Kaiming, 8).unwrap();
        assert_ne!(a.value("w").unwrap(), c.value("w").unwrap());
    }

    #[test]
    fn kaiming_std_matches_fan_in() {
        let d = [ParamDecl::new(
            "w",
            Shape::new(10_000, 1, 1, 1),
            ParamRole::Weight { fan_in: 18 },
        )];
        let s: ParamStore<f64> = init_from_decls(&d, InitScheme::Kaiming, 0).unwrap();
        let v = s.value("w").unwrap().data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64;
        let target = (2.0f64 / 18.0).sqrt();
        assert!((var.sqrt() - target).abs() < 0.2 * target);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor4::zeros(Shape::new(1, 1, 1, 1)))
            .unwrap();
        assert!(matches!(
            s.insert("a", Tensor4::zeros(Shape::new(1, 1, 1, 1))),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let s: ParamStore<f32> = init_from_decls(&decls(), InitScheme::Kaiming, 3).unwrap();
        let bytes = encode_checkpoint(&s);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.names(), s.names());
        for (name, p) in s.iter() {
            assert_eq!(back.value(name).unwrap(), &p.value);
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_checkpoint(cut), Err(Error::Format { .. })));
    }
}
