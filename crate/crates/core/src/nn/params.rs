//! Trainable parameter storage, seeded initialization and checkpoints.
//!
//! A checkpoint is a single safetensors file. Its header metadata carries a
//! format tag, the component kind, the architecture descriptor and training
//! info, all as JSON strings.

use std::collections::HashMap;
use std::marker::PhantomData;
use std::path::Path;

use candle_core::{Device, Tensor, Var};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::rng::JobRng;
use crate::{Error, Real, Result};

pub const CHECKPOINT_FORMAT: &str = "pilot-ckpt/1";

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

/// Ordered set of named trainable variables of element type `T`.
#[derive(Clone)]
pub struct Params<T> {
    vars: Vec<(String, Var)>,
    frozen: bool,
    _t: PhantomData<T>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self {
            vars: Vec::new(),
            frozen: false,
            _t: PhantomData,
        }
    }
}

impl<T: Real> Params<T> {
    /// Parameters whose module handles do not track gradients. The storage
    /// is still shared with the variables, so [`Params::assign`] updates the
    /// modules in place.
    pub fn frozen() -> Self {
        Self {
            frozen: true,
            ..Self::default()
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Snapshot of every tensor, detached from the graph.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), v.as_tensor().detach()))
            .collect()
    }

    /// Overwrite every variable from `tensors`, converting dtype as needed.
    pub fn assign(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(T::DTYPE)?)?;
        }
        if tensors.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                self.vars.len()
            )));
        }
        Ok(())
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut JobRng) -> ParamBuilder<'a, T> {
        ParamBuilder {
            params: self,
            rng,
            prefix: String::new(),
        }
    }
}

pub struct ParamBuilder<'a, T> {
    params: &'a mut Params<T>,
    rng: &'a mut JobRng,
    prefix: String,
}

impl<T: Real> ParamBuilder<'_, T> {
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            params: self.params,
            rng: self.rng,
            prefix,
        }
    }

    pub fn tensor(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        if self.params.vars.iter().any(|(n, _)| *n == full) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{full}`")));
        }
        let n: usize = dims.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Uniform(b) => (0..n).map(|_| T::lit(self.rng.range(-b, b))).collect(),
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, dims, &Device::Cpu)?)?;
        let t = if self.params.frozen {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        };
        self.params.vars.push((full, var));
        Ok(t)
    }
}

/// Component stored in a checkpoint file.
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub info: serde_json::Value,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new<C: Serialize, I: Serialize>(
        kind: &str,
        config: &C,
        info: &I,
        tensors: HashMap<String, Tensor>,
    ) -> Result<Self> {
        Ok(Self {
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            info: serde_json::to_value(info)?,
            tensors,
        })
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn info<I: DeserializeOwned>(&self) -> Result<I> {
        Ok(serde_json::from_value(self.info.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("kind".to_string(), self.kind.clone());
        meta.insert("config".to_string(), self.config.to_string());
        meta.insert("info".to_string(), self.info.to_string());
        let mut names: Vec<&String> = self.tensors.keys().collect();
        names.sort();
        let data: Vec<(&str, Tensor)> = names
            .into_iter()
            .map(|n| Ok((n.as_str(), self.tensors[n].contiguous()?)))
            .collect::<Result<_>>()?;
        safetensors::serialize(data, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8], expected_kind: &str) -> Result<Self> {
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("missing header metadata".into()))?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata field `{k}`")))
        };
        let format = field("format")?;
        if format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format `{format}`, expected `{CHECKPOINT_FORMAT}`"
            )));
        }
        let kind = field("kind")?;
        if kind != expected_kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a `{kind}`, expected `{expected_kind}`"
            )));
        }
        let config = serde_json::from_str(&field("config")?)?;
        let info = serde_json::from_str(&field("info")?)?;
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
        Ok(Self {
            kind,
            config,
            info,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        crate::io::write_atomic(path, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path, expected_kind: &str) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        let ckpt = Self::from_bytes(&bytes, expected_kind)?;
        Ok((ckpt, sha256_hex(&bytes)))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
