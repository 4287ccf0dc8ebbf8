use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, ParamError, Result};

/// Default per-channel scale of the L2 normalization layers.
pub const DEFAULT_L2NORM_SCALE: f64 = 10.0;
/// Variance epsilon used when folding batch-norm statistics into convolutions.
pub const BN_EPS: f64 = 1e-5;

const PARAM_MAGIC: &[u8; 4] = b"UMCP";
const PARAM_VERSION: u32 = 1;
const MAX_RANK: usize = 4;

/// A weight tensor of rank 0..=4 with its recorded shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ParamError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(ParamError::Format(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Name-addressed weights for every stage of the model.
///
/// Lookups never fall back to zeros: a missing name is a [`ParamError::Missing`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if tensor.shape.len() > MAX_RANK {
            return Err(ParamError::Rank { name, rank: tensor.shape.len() });
        }
        if tensor.data.iter().any(|v| !v.is_finite()) {
            return Err(ParamError::NonFinite(name));
        }
        if self.entries.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Replaces an existing entry or inserts a new one.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        self.entries.remove(&name);
        self.insert(name, tensor)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.entries.get(name).ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ParamError> {
        self.entries.get_mut(name).ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    /// Looks up `name` and checks its shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor, ParamError> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(ParamError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                actual: t.shape.clone(),
            });
        }
        Ok(t)
    }

    /// A scalar entry, or `default` when the name is absent.
    pub fn scalar_or(&self, name: &str, default: f64) -> Result<f64, ParamError> {
        match self.entries.get(name) {
            None => Ok(default),
            Some(t) if t.len() == 1 => Ok(t.data[0]),
            Some(t) => Err(ParamError::ShapeMismatch {
                name: name.to_string(),
                expected: vec![1],
                actual: t.shape.clone(),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Inserts a tensor drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<(), ParamError> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor { shape, data })
    }

    /// Folds every `{layer}.bn.{gamma,beta,mean,var}` group into `{layer}.weight` / `{layer}.bias`.
    ///
    /// Inference-mode fold: `w' = w * g / sqrt(var + eps)`, `b' = (b - mean) * g / sqrt(var + eps) + beta`.
    pub fn fold_batch_norms(&mut self) -> Result<(), ParamError> {
        let layers: Vec<String> = self
            .entries
            .keys()
            .filter_map(|k| k.strip_suffix(".bn.gamma").map(str::to_string))
            .collect();
        for layer in layers {
            let take = |set: &mut ParamSet, field: &str| -> Result<Tensor, ParamError> {
                let name = format!("{layer}.bn.{field}");
                set.entries.remove(&name).ok_or(ParamError::Missing(name))
            };
            let gamma = take(self, "gamma")?;
            let beta = take(self, "beta")?;
            let mean = take(self, "mean")?;
            let var = take(self, "var")?;
            let weight_name = format!("{layer}.weight");
            let weight = self.get_mut(&weight_name)?;
            let out_c = weight.shape.first().copied().unwrap_or(0);
            for (field, t) in [("gamma", &gamma), ("beta", &beta), ("mean", &mean), ("var", &var)] {
                if t.shape != [out_c] {
                    return Err(ParamError::ShapeMismatch {
                        name: format!("{layer}.bn.{field}"),
                        expected: vec![out_c],
                        actual: t.shape.clone(),
                    });
                }
            }
            if var.data.iter().any(|&v| v + BN_EPS <= 0.0) {
                return Err(ParamError::Format(format!("{layer}.bn.var has negative entries")));
            }
            let factors: Vec<f64> =
                gamma.data.iter().zip(&var.data).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect();
            let per_out = weight.len() / out_c.max(1);
            for (chunk, f) in weight.data.chunks_mut(per_out).zip(&factors) {
                chunk.iter_mut().for_each(|w| *w *= f);
            }
            let bias_name = format!("{layer}.bias");
            let old_bias =
                self.entries.remove(&bias_name).map(|t| t.data).unwrap_or_else(|| vec![0.0; out_c]);
            let bias: Vec<f64> = (0..out_c)
                .map(|c| (old_bias[c] - mean.data[c]) * factors[c] + beta.data[c])
                .collect();
            self.insert(bias_name, Tensor { shape: vec![out_c], data: bias })?;
        }
        Ok(())
    }

    /// Serializes to the `UMCP` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a `UMCP` container, validates it consumes the input exactly, then folds batch norms.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ParamError> {
        let mut set = Self::parse(bytes)?;
        set.fold_batch_norms()?;
        Ok(set)
    }

    fn parse(bytes: &[u8]) -> Result<Self, ParamError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != PARAM_MAGIC {
            return Err(ParamError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != PARAM_VERSION {
            return Err(ParamError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ParamError::Format("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            if rank > MAX_RANK {
                return Err(ParamError::Rank { name, rank });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(
                || ParamError::Format(format!("entry `{name}` shape overflows")),
            )?;
            let payload = r.take(n.checked_mul(8).ok_or_else(|| {
                ParamError::Format(format!("entry `{name}` payload overflows"))
            })?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            set.insert(name, Tensor { shape, data })?;
        }
        if r.pos != bytes.len() {
            return Err(ParamError::Format(format!(
                "{} trailing bytes after {count} entries",
                bytes.len() - r.pos
            )));
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(Error::from)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ParamError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            ParamError::Format(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ParamError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ParamError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ParamError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
