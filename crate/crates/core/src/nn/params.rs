use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named, ordered collection of learnable arrays.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub(crate) fn push(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Name of the first array holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n)
    }
}

/// Gradients aligned index-for-index with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub(crate) tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.tensors
    }

    pub fn l2_norm(&self) -> T {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub(crate) fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

pub(crate) const CHECKPOINT_FORMAT: &str = "mixdiff-denoiser";
pub(crate) const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar, C: Serialize + serde::de::DeserializeOwned")]
pub(crate) struct CheckpointFile<T, C> {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub n_features: usize,
    pub config: C,
    pub params: Vec<NamedArray<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub(crate) struct NamedArray<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar, C: Serialize + serde::de::DeserializeOwned> CheckpointFile<T, C> {
    pub fn new(n_features: usize, config: C, store: &ParamStore<T>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.into(),
            n_features,
            config,
            params: store
                .iter()
                .map(|(n, t)| NamedArray {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: unreadable header: {e}", path.display())))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        if header.scalar != T::NAME {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, expected {}",
                header.scalar,
                T::NAME
            )));
        }
        Ok(serde_json::from_str(&text)?)
    }

    /// Copies the arrays into `store`, which must have identical names and
    /// shapes in the same order.
    pub fn restore_into(self, store: &mut ParamStore<T>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} arrays in file, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (i, arr) in self.params.into_iter().enumerate() {
            if arr.name != store.names[i] || arr.shape != store.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "array {i}: file has `{}` {:?}, model expects `{}` {:?}",
                    arr.name,
                    arr.shape,
                    store.names[i],
                    store.tensors[i].shape()
                )));
            }
            store.tensors[i] = Tensor::from_vec(&arr.shape, arr.data)?;
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    scalar: String,
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
