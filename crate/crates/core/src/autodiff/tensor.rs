use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// Tensors are the unit of parameter storage. Computation happens on a
/// [`Tape`](super::Tape), which copies tensor data into its own nodes; the
/// gradients it produces are written back into [`Tensor::grad`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Parameter(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

const CHECKPOINT_FORMAT: &str = "rehab-params";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    params: Vec<CheckpointEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Sum of absolute values over the given parameters.
    pub fn l1_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .map(|id| self.tensors[id.0].data.iter().map(|w| w.abs()).sum::<f64>())
            .sum()
    }

    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Copies all values from `other`, which must have identical layout.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_layout(
            other
                .names
                .iter()
                .zip(other.tensors.iter().map(|t| t.shape())),
        )?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    fn check_layout<'a>(
        &self,
        other: impl ExactSizeIterator<Item = (&'a String, &'a [usize])>,
    ) -> Result<()> {
        if other.len() != self.tensors.len() {
            return Err(Error::Schema(format!(
                "parameter count mismatch: expected {}, found {}",
                self.tensors.len(),
                other.len()
            )));
        }
        for ((name, tensor), (other_name, other_shape)) in
            self.names.iter().zip(&self.tensors).zip(other)
        {
            if name != other_name {
                return Err(Error::Schema(format!(
                    "parameter name mismatch: expected `{name}`, found `{other_name}`"
                )));
            }
            if tensor.shape() != other_shape {
                return Err(Error::shape("checkpoint", tensor.shape(), other_shape));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses a checkpoint into a fresh parameter set.
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(text)?)
    }

    fn from_checkpoint(file: CheckpointFile) -> Result<Self> {
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!(
                "unknown checkpoint format `{}`",
                file.format
            )));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        let mut set = ParamSet::new();
        for entry in file.params {
            if entry.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("non-finite value in `{}`", entry.name)));
            }
            set.add(entry.name, Tensor::new(entry.shape, entry.values)?);
        }
        Ok(set)
    }

    /// Loads checkpoint values into this set, checking names and shapes.
    pub fn load_values_json(&mut self, text: &str) -> Result<()> {
        let other = ParamSet::from_json(text)?;
        self.copy_values_from(&other)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

impl Serialize for ParamSet {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(name, t)| CheckpointEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    values: t.data.clone(),
                })
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ParamSet {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let file = CheckpointFile::deserialize(deserializer)?;
        ParamSet::from_checkpoint(file).map_err(serde::de::Error::custom)
    }
}
