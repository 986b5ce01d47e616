//! Quantized model artifact: magic `2DQQ`, version, model config, bit
//! width, one record per quantizer site, optional calibration statistics,
//! optional packed weight payloads and the table of FP tensors.
//!
//! Serialization is canonical (sites in forward order, tensors in name
//! order) and the loader insists on that order, so a load/save cycle
//! reproduces the input bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::calib::{Histogram, TensorStats};
use crate::error::{Error, Result};
use crate::io::binary::{Reader, Writer};
use crate::io::{read_file, write_atomic};
use crate::model::{quantizer_sites, ModelConfig, ModelWeights, PackedModel, QuantizerSet};
use crate::quant::{check_bits, PackedIntTensor, QuantizerState, Role, SearchMode};
use crate::tensor::Tensor;

pub const ARTIFACT_MAGIC: &[u8; 4] = b"2DQQ";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModelArtifact {
    pub config: ModelConfig,
    pub bits: u8,
    pub quantizers: QuantizerSet,
    /// Calibration statistics per site, kept for percentile reports.
    pub stats: Option<Vec<TensorStats>>,
    /// Packed weights aligned with the site list (`None` for activation and
    /// inactive sites); absent while weights are still stored as floats.
    pub packed: Option<Vec<Option<PackedIntTensor>>>,
    /// Every tensor not held in `packed`.
    pub tensors: BTreeMap<String, Tensor>,
}

fn uniform_bits(q: &QuantizerSet) -> Result<u8> {
    let bits = q.states().first().map(|s| s.bits).ok_or_else(|| Error::InvalidArgument("no quantizers".into()))?;
    check_bits(bits)?;
    if let Some((site, s)) = q.iter().find(|(_, s)| s.bits != bits) {
        return Err(Error::InvalidArgument(format!(
            "quantizer `{}` has {} bits, others {bits}",
            site.id, s.bits
        )));
    }
    Ok(bits)
}

impl QuantizedModelArtifact {
    /// Artifact holding the FP weights unchanged next to the bounds.
    pub fn from_float(weights: &ModelWeights, quantizers: QuantizerSet, stats: Option<Vec<TensorStats>>) -> Result<Self> {
        let bits = uniform_bits(&quantizers)?;
        if let Some(s) = &stats {
            if s.len() != quantizers.len() {
                return Err(Error::InvalidArgument("statistics do not match the site list".into()));
            }
        }
        Ok(Self {
            config: weights.config().clone(),
            bits,
            quantizers,
            stats,
            packed: None,
            tensors: weights.iter().map(|(k, v)| (k.clone(), (**v).clone())).collect(),
        })
    }

    pub fn is_packed(&self) -> bool {
        self.packed.is_some()
    }

    /// Replaces every actively quantized weight by its packed codes.
    pub fn pack(&self) -> Result<Self> {
        if self.is_packed() {
            return Ok(self.clone());
        }
        let mut tensors = self.tensors.clone();
        let mut packed = Vec::with_capacity(self.quantizers.len());
        for (site, q) in self.quantizers.iter() {
            packed.push(match site.weight_name() {
                Some(name) if q.active => {
                    let t = tensors.remove(&name).ok_or(Error::MissingTensor(name))?;
                    Some(PackedIntTensor::quantize(&t, &q.grid()?)?)
                }
                _ => None,
            });
        }
        Ok(Self { packed: Some(packed), tensors, ..self.clone() })
    }

    /// FP weights; packed tensors come back as their grid values.
    pub fn weights(&self) -> Result<ModelWeights> {
        let mut all = self.tensors.clone();
        if let Some(packed) = &self.packed {
            for (site, p) in self.quantizers.sites().iter().zip(packed) {
                if let (Some(p), Some(name)) = (p, site.weight_name()) {
                    if all.insert(name.clone(), p.dequantize()?).is_some() {
                        return Err(Error::Format(format!("tensor `{name}` stored both packed and as floats")));
                    }
                }
            }
        }
        ModelWeights::new(self.config.clone(), all)
    }

    pub fn packed_model(&self) -> Result<PackedModel> {
        match &self.packed {
            Some(p) => PackedModel::from_packed(&self.config, &self.quantizers, p.clone()),
            None => PackedModel::new(&self.weights()?, &self.quantizers),
        }
    }

    fn validate(&self) -> Result<()> {
        uniform_bits(&self.quantizers).map_err(|e| Error::Format(e.to_string()))?;
        if self.quantizers.states().iter().any(|s| s.bits != self.bits) {
            return Err(Error::Format("quantizer bit width disagrees with the header".into()));
        }
        self.weights()?;
        if self.packed.is_some() {
            self.packed_model()?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(ARTIFACT_MAGIC);
        w.u32(ARTIFACT_VERSION);
        w.config(&self.config);
        w.u8(self.bits);
        w.u32(self.quantizers.len() as u32);
        for (site, q) in self.quantizers.iter() {
            w.str(&site.id);
            w.u8(match q.role {
                Role::Weight => 0,
                Role::Activation => 1,
            });
            w.u8(match q.mode {
                SearchMode::Symmetric => 0,
                SearchMode::FixedLower => 1,
            });
            w.u8(q.active as u8);
            w.u8(q.trainable as u8);
            w.f32(q.lower);
            w.f32(q.upper);
        }
        match &self.stats {
            None => w.u8(0),
            Some(stats) => {
                w.u8(1);
                stats.iter().for_each(|s| write_stats(&mut w, s));
            }
        }
        match &self.packed {
            None => w.u8(0),
            Some(packed) => {
                w.u8(1);
                for p in packed {
                    match p {
                        None => w.u8(0),
                        Some(p) => {
                            w.u8(1);
                            w.shape(p.shape());
                            w.u8(p.bits());
                            let (l, u) = p.bounds();
                            w.f32(l);
                            w.f32(u);
                            w.u64(p.payload().len() as u64);
                            w.bytes(p.payload());
                        }
                    }
                }
            }
        }
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.tensor(name, t);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(ARTIFACT_MAGIC, ARTIFACT_VERSION, "artifact")?;
        let config = r.config()?;
        let bits = r.u8("bit width")?;
        check_bits(bits).map_err(|e| Error::Format(e.to_string()))?;
        let sites = quantizer_sites(&config);
        let count = r.u32("quantizer count")? as usize;
        if count != sites.len() {
            return Err(Error::Format(format!("{count} quantizer records for {} sites", sites.len())));
        }
        let mut states = Vec::with_capacity(count);
        for site in &sites {
            let id = r.str("quantizer id")?;
            if id != site.id {
                return Err(Error::Format(format!("quantizer record `{id}` where `{}` was expected", site.id)));
            }
            let role = match r.u8("quantizer role")? {
                0 => Role::Weight,
                1 => Role::Activation,
                v => return Err(Error::Format(format!("`{id}`: unknown role {v}"))),
            };
            if role != site.role() {
                return Err(Error::Format(format!("`{id}`: role disagrees with the site")));
            }
            let mode = match r.u8("quantizer mode")? {
                0 => SearchMode::Symmetric,
                1 => SearchMode::FixedLower,
                v => return Err(Error::Format(format!("`{id}`: unknown search mode {v}"))),
            };
            let active = r.bool("quantizer active flag")?;
            let trainable = r.bool("quantizer trainable flag")?;
            let (lower, upper) = (r.f32("lower bound")?, r.f32("upper bound")?);
            let state = if active {
                let mut s = QuantizerState::new(bits, lower, upper, role, mode)
                    .map_err(|e| Error::Format(format!("`{id}`: {e}")))?;
                s.trainable = trainable;
                s
            } else {
                let s = QuantizerState::identity(bits, role, mode);
                if (lower, upper, trainable) != (s.lower, s.upper, s.trainable) {
                    return Err(Error::Format(format!("`{id}`: inactive quantizer with bounds")));
                }
                s
            };
            states.push(state);
        }
        let quantizers = QuantizerSet::new(&config, states)?;
        let stats = match r.bool("statistics flag")? {
            false => None,
            true => Some((0..count).map(|_| read_stats(&mut r)).collect::<Result<Vec<_>>>()?),
        };
        let packed = match r.bool("packed flag")? {
            false => None,
            true => {
                let mut packed = Vec::with_capacity(count);
                for site in &sites {
                    packed.push(match r.bool("packed entry flag")? {
                        false => None,
                        true => {
                            let what = format!("packed `{}`", site.id);
                            let shape = r.shape(&what)?;
                            let pbits = r.u8(&what)?;
                            let (l, u) = (r.f32(&what)?, r.f32(&what)?);
                            let len = r.len(&what)?;
                            let payload = r.take(len, &what)?.to_vec();
                            Some(PackedIntTensor::from_parts(shape, pbits, payload, l, u)
                                .map_err(|e| Error::Format(format!("{what}: {e}")))?)
                        }
                    });
                }
                Some(packed)
            }
        };
        let n = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        let mut last: Option<String> = None;
        for _ in 0..n {
            let (name, t) = r.tensor()?;
            if last.as_ref().is_some_and(|p| p >= &name) {
                return Err(Error::Format(format!("tensor `{name}` out of canonical order")));
            }
            last = Some(name.clone());
            tensors.insert(name, t);
        }
        r.finish()?;
        let artifact = Self { config, bits, quantizers, stats, packed, tensors };
        artifact.validate()?;
        Ok(artifact)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn write_stats(w: &mut Writer, s: &TensorStats) {
    w.u64(s.count);
    w.f32(s.min);
    w.f32(s.max);
    w.f64(s.mean);
    w.f64(s.m2);
    w.f64(s.m3);
    match &s.histogram {
        None => w.u8(0),
        Some(h) => {
            w.u8(1);
            w.f32(h.lower);
            w.f32(h.upper);
            w.u64(h.counts.len() as u64);
            h.counts.iter().for_each(|&c| w.u64(c));
        }
    }
}

fn read_stats(r: &mut Reader) -> Result<TensorStats> {
    let what = "statistics";
    let mut s = TensorStats {
        count: r.u64(what)?,
        min: r.f32(what)?,
        max: r.f32(what)?,
        mean: r.f64(what)?,
        m2: r.f64(what)?,
        m3: r.f64(what)?,
        histogram: None,
    };
    if r.bool("histogram flag")? {
        let (lower, upper) = (r.f32(what)?, r.f32(what)?);
        let bins = r.len("histogram size")?;
        if bins == 0 {
            return Err(Error::Format("empty histogram".into()));
        }
        let counts = (0..bins).map(|_| r.u64("histogram counts")).collect::<Result<Vec<_>>>()?;
        s.histogram = Some(Histogram { lower, upper, counts });
    }
    Ok(s)
}
