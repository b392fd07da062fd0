//! Toy causal autoregressive policy with exact reverse-mode gradients.
//!
//! The network reads `prompt_len` prompt tokens followed by the generated
//! prefix and emits next-token logits over the generation vocabulary. All
//! trainable scalars live in one flat [`ParamVector`] whose layout is a pure
//! function of the [`ModelConfig`], which is what makes weight interpolation
//! between finetuned models well defined.

mod adam;
mod config;
mod loss;
mod params;
mod policy;
mod transformer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use config::ModelConfig;
pub use loss::{backward, LossGraph, Part, SequenceTerm};
pub use params::{GradBuffer, Layout, LayoutBuilder, ParamVector, Segment};
pub(crate) use policy::check_temperature;
pub use policy::{init_model, Policy, PolicyModel, Rollout, DEFAULT_TEMPERATURE};
pub use transformer::{DecodeState, Trace};
