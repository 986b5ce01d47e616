//! SwinIR-style super-resolution network with quantizer insertion points.

pub mod config;
pub mod deploy;
pub mod forward;
pub mod sites;
pub mod weights;
pub mod window;

pub use config::ModelConfig;
pub use deploy::PackedModel;
pub use forward::{forward, infer, run, ActivationObserver, BoundVars, ForwardOutput, Mode, Precision};
pub use sites::{quantizer_sites, site_index, QuantSite, QuantizerSet, SiteKind};
pub use weights::{canonical_name, tensor_specs, ModelWeights, ParamKind, TensorSpec};
