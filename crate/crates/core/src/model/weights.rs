use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::sites::block_prefix;
use crate::tensor::Tensor;

/// How a parameter tensor is treated by quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Weight of a quantized linear layer.
    Quantizable,
    /// Convolutions, norms and biases kept in floating point.
    FpResident,
    /// Relative position bias tables, also kept in floating point.
    PositionBias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every persistent tensor of the network, in a fixed order.
pub fn tensor_specs(config: &ModelConfig) -> Vec<TensorSpec> {
    let c = config.embed_dim;
    let hidden = config.mlp_hidden();
    let m = config.window_size;
    let out_ch = config.in_chans * config.upscale * config.upscale;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind: ParamKind| {
        specs.push(TensorSpec { name, shape, kind })
    };
    let fp = ParamKind::FpResident;
    let conv = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind), name: &str, cout: usize, cin: usize| {
        push(format!("{name}.weight"), vec![cout, cin, 3, 3], fp);
        push(format!("{name}.bias"), vec![cout], fp);
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind), name: &str| {
        push(format!("{name}.weight"), vec![c], fp);
        push(format!("{name}.bias"), vec![c], fp);
    };
    let linear = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind), name: &str, out: usize, inp: usize| {
        push(format!("{name}.weight"), vec![out, inp], ParamKind::Quantizable);
        push(format!("{name}.bias"), vec![out], fp);
    };

    conv(&mut push, "conv_first", c, config.in_chans);
    norm(&mut push, "patch_embed.norm");
    for i in 0..config.num_rstb {
        for j in 0..config.stl_per_rstb {
            let p = block_prefix(i, j);
            norm(&mut push, &format!("{p}.norm1"));
            push(
                format!("{p}.attn.relative_position_bias_table"),
                vec![(2 * m - 1) * (2 * m - 1), config.num_heads],
                ParamKind::PositionBias,
            );
            linear(&mut push, &format!("{p}.attn.qkv"), 3 * c, c);
            linear(&mut push, &format!("{p}.attn.proj"), c, c);
            norm(&mut push, &format!("{p}.norm2"));
            linear(&mut push, &format!("{p}.mlp.fc1"), hidden, c);
            linear(&mut push, &format!("{p}.mlp.fc2"), c, hidden);
        }
        conv(&mut push, &format!("layers.{i}.conv"), c, c);
    }
    norm(&mut push, "norm");
    conv(&mut push, "conv_after_body", c, c);
    conv(&mut push, "upsample.0", out_ch, c);
    specs
}

/// Canonical form of a tensor name: converted reference checkpoints nest
/// blocks under `residual_group`, which is dropped here.
pub fn canonical_name(name: &str) -> String {
    name.replace(".residual_group.", ".")
}

/// Named floating-point parameters of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    tensors: BTreeMap<String, Arc<Tensor>>,
}

impl ModelWeights {
    /// Validates that `tensors` holds exactly the tensors the config needs.
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut tensors: BTreeMap<String, Arc<Tensor>> = tensors
            .into_iter()
            .map(|(k, v)| (canonical_name(&k), Arc::new(v)))
            .collect();
        let mut ordered = BTreeMap::new();
        for spec in tensor_specs(&config) {
            let t = tensors
                .remove(&spec.name)
                .ok_or_else(|| Error::MissingTensor(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            t.ensure_finite(&spec.name)?;
            ordered.insert(spec.name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            config,
            tensors: ordered,
        })
    }

    /// Random weights with heavy-tailed linear layers, deterministic in `seed`.
    ///
    /// Trained transformers carry a few large-magnitude weights and
    /// activation outliers; a Gaussian body with sparse ×4 outliers
    /// reproduces the long tails that make clipping worthwhile.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in tensor_specs(config) {
            let n = spec.numel();
            let data: Vec<f32> = match spec.kind {
                ParamKind::Quantizable => {
                    let fan_in = spec.shape[1] as f32;
                    let std = 1.0 / fan_in.sqrt();
                    (0..n)
                        .map(|_| {
                            let z: f32 = rng.sample(StandardNormal);
                            let tail = if rng.random::<f32>() < 0.01 { 4.0 } else { 1.0 };
                            z * std * tail
                        })
                        .collect()
                }
                ParamKind::PositionBias => sample(&mut rng, n, 0.0, 0.5),
                ParamKind::FpResident => {
                    if spec.shape.len() == 4 {
                        let fan_in = (spec.shape[1] * 9) as f32;
                        let gain = match spec.name.as_str() {
                            "conv_first.weight" => 1.0,
                            "upsample.0.weight" => 0.25,
                            _ => 0.5,
                        };
                        sample(&mut rng, n, 0.0, gain / fan_in.sqrt())
                    } else if spec.name.ends_with("norm.weight")
                        || spec.name.ends_with("norm1.weight")
                        || spec.name.ends_with("norm2.weight")
                    {
                        sample(&mut rng, n, 1.0, 0.1)
                    } else {
                        sample(&mut rng, n, 0.0, 0.05)
                    }
                }
            };
            tensors.insert(spec.name, Tensor::new(spec.shape, data)?);
        }
        Self::new(config.clone(), tensors)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Tensors in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arc<Tensor>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Replaces one tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape("set", slot.shape(), value.shape()));
        }
        *slot = Arc::new(value);
        Ok(())
    }
}

fn sample(rng: &mut ChaCha8Rng, n: usize, mean: f32, std: f32) -> Vec<f32> {
    let dist = Normal::new(mean, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}
