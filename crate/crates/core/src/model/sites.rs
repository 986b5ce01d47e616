//! Quantizer insertion points.
//!
//! Every linear layer and both batched matmuls of each Swin layer are
//! quantized: weights and inputs of `qkv`, `proj`, `fc1`, `fc2`, plus the
//! query, key, attention map and value operands of the two attention
//! products. Convolutions, norms, biases and the position bias stay in
//! floating point.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::quant::{QuantizerState, Role};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    QkvWeight,
    QkvInput,
    Query,
    Key,
    AttnMap,
    Value,
    ProjWeight,
    ProjInput,
    Fc1Weight,
    Fc1Input,
    Fc2Weight,
    Fc2Input,
}

impl SiteKind {
    pub const ALL: [SiteKind; 12] = [
        SiteKind::QkvWeight,
        SiteKind::QkvInput,
        SiteKind::Query,
        SiteKind::Key,
        SiteKind::AttnMap,
        SiteKind::Value,
        SiteKind::ProjWeight,
        SiteKind::ProjInput,
        SiteKind::Fc1Weight,
        SiteKind::Fc1Input,
        SiteKind::Fc2Weight,
        SiteKind::Fc2Input,
    ];

    pub const PER_STL: usize = Self::ALL.len();

    pub fn offset(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn suffix(self) -> &'static str {
        match self {
            SiteKind::QkvWeight => "attn.qkv.weight",
            SiteKind::QkvInput => "attn.qkv.input",
            SiteKind::Query => "attn.q",
            SiteKind::Key => "attn.k",
            SiteKind::AttnMap => "attn.map",
            SiteKind::Value => "attn.v",
            SiteKind::ProjWeight => "attn.proj.weight",
            SiteKind::ProjInput => "attn.proj.input",
            SiteKind::Fc1Weight => "mlp.fc1.weight",
            SiteKind::Fc1Input => "mlp.fc1.input",
            SiteKind::Fc2Weight => "mlp.fc2.weight",
            SiteKind::Fc2Input => "mlp.fc2.input",
        }
    }

    pub fn role(self) -> Role {
        match self {
            SiteKind::QkvWeight | SiteKind::ProjWeight | SiteKind::Fc1Weight | SiteKind::Fc2Weight => {
                Role::Weight
            }
            _ => Role::Activation,
        }
    }

    /// Parameter tensor quantized by a weight site, relative to its block.
    pub fn weight_param(self) -> Option<&'static str> {
        match self {
            SiteKind::QkvWeight => Some("attn.qkv.weight"),
            SiteKind::ProjWeight => Some("attn.proj.weight"),
            SiteKind::Fc1Weight => Some("mlp.fc1.weight"),
            SiteKind::Fc2Weight => Some("mlp.fc2.weight"),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSite {
    pub id: String,
    pub rstb: usize,
    pub stl: usize,
    pub kind: SiteKind,
}

impl QuantSite {
    pub fn role(&self) -> Role {
        self.kind.role()
    }

    /// Full parameter name of the quantized weight, for weight sites.
    pub fn weight_name(&self) -> Option<String> {
        self.kind
            .weight_param()
            .map(|p| format!("{}.{p}", block_prefix(self.rstb, self.stl)))
    }
}

pub fn block_prefix(rstb: usize, stl: usize) -> String {
    format!("layers.{rstb}.blocks.{stl}")
}

/// All quantizer sites in forward order.
pub fn quantizer_sites(config: &ModelConfig) -> Vec<QuantSite> {
    let mut sites = Vec::with_capacity(config.num_stl() * SiteKind::PER_STL);
    for i in 0..config.num_rstb {
        for j in 0..config.stl_per_rstb {
            for kind in SiteKind::ALL {
                sites.push(QuantSite {
                    id: format!("{}.{}", block_prefix(i, j), kind.suffix()),
                    rstb: i,
                    stl: j,
                    kind,
                });
            }
        }
    }
    sites
}

/// Position of a site in [`quantizer_sites`].
pub fn site_index(config: &ModelConfig, rstb: usize, stl: usize, kind: SiteKind) -> usize {
    (rstb * config.stl_per_rstb + stl) * SiteKind::PER_STL + kind.offset()
}

/// Quantizer states aligned with the model's site list.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerSet {
    sites: Vec<QuantSite>,
    states: Vec<QuantizerState>,
}

impl QuantizerSet {
    pub fn new(config: &ModelConfig, states: Vec<QuantizerState>) -> Result<Self> {
        let sites = quantizer_sites(config);
        if sites.len() != states.len() {
            return Err(Error::InvalidArgument(format!(
                "{} quantizer states for {} sites",
                states.len(),
                sites.len()
            )));
        }
        Ok(Self { sites, states })
    }

    /// Builds from `(id, state)` records; every site must appear exactly once.
    pub fn from_records(config: &ModelConfig, records: Vec<(String, QuantizerState)>) -> Result<Self> {
        let sites = quantizer_sites(config);
        let mut by_id: HashMap<String, QuantizerState> = HashMap::new();
        for (id, st) in records {
            if by_id.insert(id.clone(), st).is_some() {
                return Err(Error::Format(format!("duplicate quantizer record `{id}`")));
            }
        }
        let mut states = Vec::with_capacity(sites.len());
        for s in &sites {
            states.push(by_id.remove(&s.id).ok_or_else(|| Error::MissingQuantizer(s.id.clone()))?);
        }
        if let Some(extra) = by_id.keys().next() {
            return Err(Error::Format(format!("unknown quantizer record `{extra}`")));
        }
        Ok(Self { sites, states })
    }

    pub fn sites(&self) -> &[QuantSite] {
        &self.sites
    }

    pub fn states(&self) -> &[QuantizerState] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [QuantizerState] {
        &mut self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&QuantizerState> {
        self.sites.iter().position(|s| s.id == id).map(|i| &self.states[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&QuantSite, &QuantizerState)> {
        self.sites.iter().zip(&self.states)
    }

    /// Builds one state per site in forward order.
    pub fn from_fn(config: &ModelConfig, mut f: impl FnMut(&QuantSite) -> Result<QuantizerState>) -> Result<Self> {
        let sites = quantizer_sites(config);
        let states = sites.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        Ok(Self { sites, states })
    }
}
