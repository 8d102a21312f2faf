//! Checkpoint archives: one JSON document holding named tensors, BN running
//! statistics, classifier weights and memories. Floats are written in
//! shortest round-trip form, so load(save(x)) is bit-identical.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::encoder::{BatchNorm, EncoderConfig, EncoderParams, Linear};
use crate::error::{Error, Result};
use crate::losses::{FcClassifier, FcVariant};
use crate::memory::IdentityMemory;
use crate::model::ModelParams;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl Tensor {
    fn from_array(name: impl Into<String>, a: &Array2<f64>) -> Result<Self> {
        let name = name.into();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor {name} holds non-finite values")));
        }
        Ok(Self {
            name,
            shape: [a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        })
    }

    fn from_vector(name: impl Into<String>, v: &Array1<f64>) -> Result<Self> {
        Self::from_array(name, &v.clone().insert_axis(ndarray::Axis(0)))
    }

    fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", self.name)))
    }

    fn to_vector(&self) -> Result<Array1<f64>> {
        if self.shape[0] != 1 {
            return Err(Error::Checkpoint(format!("tensor {} is not a vector", self.name)));
        }
        Ok(self.to_array()?.row(0).to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierState {
    pub variant: FcVariant,
    pub sizes: Vec<usize>,
    pub weights: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    pub domain_id: usize,
    pub momentum: f64,
    pub temperature: f64,
    pub centroids: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config_hash: Option<String>,
    pub epoch: usize,
    pub iteration: usize,
    pub encoder: EncoderConfig,
    /// `linear{i}.weight`, `linear{i}.bias`, `bn{i}.gamma`, `bn{i}.beta`,
    /// `bn{i}.running_mean`, `bn{i}.running_var` for each layer in order.
    pub tensors: Vec<Tensor>,
    pub classifier: Option<ClassifierState>,
    pub memories: Vec<MemoryState>,
}

impl Checkpoint {
    pub fn capture(
        params: &ModelParams,
        memories: &[IdentityMemory],
        epoch: usize,
        iteration: usize,
        config_hash: Option<String>,
    ) -> Result<Self> {
        let enc = &params.encoder;
        let mut tensors = Vec::new();
        for (i, (lin, bn)) in enc.linears.iter().zip(&enc.norms).enumerate() {
            tensors.push(Tensor::from_array(format!("linear{i}.weight"), &lin.weight)?);
            tensors.push(Tensor::from_array(format!("linear{i}.bias"), &lin.bias)?);
            tensors.push(Tensor::from_array(format!("bn{i}.gamma"), &bn.gamma)?);
            tensors.push(Tensor::from_array(format!("bn{i}.beta"), &bn.beta)?);
            tensors.push(Tensor::from_vector(format!("bn{i}.running_mean"), &bn.running_mean)?);
            tensors.push(Tensor::from_vector(format!("bn{i}.running_var"), &bn.running_var)?);
        }
        let classifier = params
            .classifier
            .as_ref()
            .map(|c| -> Result<ClassifierState> {
                Ok(ClassifierState {
                    variant: c.variant,
                    sizes: c.sizes.clone(),
                    weights: c
                        .weights
                        .iter()
                        .enumerate()
                        .map(|(i, w)| Tensor::from_array(format!("fc{i}.weight"), w))
                        .collect::<Result<_>>()?,
                })
            })
            .transpose()?;
        let memories = memories
            .iter()
            .map(|m| {
                Ok(MemoryState {
                    domain_id: m.domain_id,
                    momentum: m.momentum,
                    temperature: m.temperature,
                    centroids: Tensor::from_array(format!("memory{}", m.domain_id), &m.centroids)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            format: FORMAT_VERSION,
            config_hash,
            epoch,
            iteration,
            encoder: enc.config.clone(),
            tensors,
            classifier,
            memories,
        })
    }

    /// Rebuilds parameters and memories, checking names and shapes.
    pub fn restore(&self) -> Result<(ModelParams, Vec<IdentityMemory>)> {
        if self.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {}", self.format)));
        }
        self.encoder.validate()?;
        let mut dims = vec![self.encoder.input_dim];
        dims.extend(&self.encoder.hidden_dims);
        dims.push(self.encoder.embed_dim);
        let n_layers = dims.len() - 1;
        if self.tensors.len() != 6 * n_layers {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                6 * n_layers,
                self.tensors.len()
            )));
        }
        let mut linears = Vec::with_capacity(n_layers);
        let mut norms = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let t = &self.tensors[6 * i..6 * i + 6];
            let expected = [
                (format!("linear{i}.weight"), [dims[i], dims[i + 1]]),
                (format!("linear{i}.bias"), [1, dims[i + 1]]),
                (format!("bn{i}.gamma"), [1, dims[i + 1]]),
                (format!("bn{i}.beta"), [1, dims[i + 1]]),
                (format!("bn{i}.running_mean"), [1, dims[i + 1]]),
                (format!("bn{i}.running_var"), [1, dims[i + 1]]),
            ];
            for (tensor, (name, shape)) in t.iter().zip(&expected) {
                if &tensor.name != name || &tensor.shape != shape {
                    return Err(Error::Checkpoint(format!(
                        "expected {name} {shape:?}, found {} {:?}",
                        tensor.name, tensor.shape
                    )));
                }
            }
            linears.push(Linear {
                weight: t[0].to_array()?,
                bias: t[1].to_array()?,
            });
            norms.push(BatchNorm {
                gamma: t[2].to_array()?,
                beta: t[3].to_array()?,
                running_mean: t[4].to_vector()?,
                running_var: t[5].to_vector()?,
            });
        }
        let classifier = self
            .classifier
            .as_ref()
            .map(|c| -> Result<FcClassifier> {
                Ok(FcClassifier {
                    variant: c.variant,
                    sizes: c.sizes.clone(),
                    weights: c.weights.iter().map(Tensor::to_array).collect::<Result<_>>()?,
                })
            })
            .transpose()?;
        let memories = self
            .memories
            .iter()
            .map(|m| {
                Ok(IdentityMemory {
                    domain_id: m.domain_id,
                    centroids: m.centroids.to_array()?,
                    momentum: m.momentum,
                    temperature: m.temperature,
                })
            })
            .collect::<Result<_>>()?;
        let encoder = EncoderParams {
            config: self.encoder.clone(),
            linears,
            norms,
        };
        Ok((ModelParams { encoder, classifier }, memories))
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}
