//! Deterministic desk-scale latent-diffusion simulator.
//!
//! Seven cross-attention layers on grids `16, 8, 4, 4, 4, 8, 16`, a DDIM
//! sampler with classifier-free guidance, and hooks that let a regulator
//! replace the conditional branch's attention maps while sampling.

pub mod hooks;
pub mod model;
pub mod run;
pub mod sampler;
pub mod vocab;

pub use hooks::{AttentionHook, HookSet, IdentityHook, OptimizeRegulator, ScalingRegulator};
pub use model::{DominanceBias, ModelConfig, ToyModel};
pub use run::{
    build_hooks, initial_latent, run_generation, run_with_hooks, Regulation, RegulatorKind, RunOptions, ScalingConfig,
};
pub use sampler::SamplerConfig;
pub use vocab::{Prompt, Vocabulary, BOS, EOS, PAD};
