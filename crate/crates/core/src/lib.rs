//! Inference-time attention regulation for cross-attention diffusion models.
//!
//! Edits a layer's attention by adding a smooth, Gaussian-basis perturbation
//! to its query-key logits. The perturbation weights are found by gradient
//! descent on a quantile + mass objective with a proximity penalty, smoothed
//! across sampler steps and decayed toward a cutoff step. A closed-form
//! scaling regulator is provided as an alternative, and a small deterministic
//! latent-diffusion simulator exercises both end to end.

pub mod ablation;
pub mod attention;
pub mod basis;
pub mod error;
pub mod gradcheck;
pub mod instances;
pub mod metrics;
pub mod objective;
pub mod optimizer;
pub mod record;
pub mod scaler;
pub mod schedule;
pub mod toy;

#[cfg(test)]
mod test_golden;

pub use attention::{attention_output, compute_attention, unravel, AttentionMap, LayerId, LogitBlock, TokenMap2D};
pub use basis::{apply_edit, apply_params, build_perturbation, gaussian_kernel, EditParams, GaussianBasis};
pub use error::{Error, Result};
pub use objective::{error_e, grad_theta, quantile, total_loss, LayerObjective, RegulationConfig};
pub use optimizer::{optimize, optimize_step, OptState, Optimized};
pub use schedule::{apply_schedule, select_layers, LayerDescriptor, LayerKind, ScheduleState};
pub use record::{RunRecord, Timings};
pub use toy::{run_generation, ModelConfig, Prompt, Regulation, RegulatorKind, SamplerConfig, ToyModel};
