//! Temporal control of edits across the reverse diffusion.
//!
//! The optimized edit of each layer is smoothed with an exponential moving
//! average, blended into the unedited map with weight `lambda^t`, and switched
//! off entirely from step `t_thres` onward.
//!
//! The moving average runs over the edit weights `theta` (the parameters the
//! optimized map is a function of). Materialized on the current step's logits
//! it is the smoothed optimized map; a zero edit stays exactly zero, so a run
//! whose optimizer never moves is bit-identical to an unregulated one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, LayerId, LogitBlock};
use crate::basis::{apply_params, EditParams, GaussianBasis};
use crate::error::{invalid, Error, Result};

/// Per-run schedule memory, keyed by layer. Reset for every generation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScheduleState {
    pub ema: BTreeMap<LayerId, Vec<EditParams>>,
    pub step: usize,
}

impl ScheduleState {
    pub fn new() -> Self {
        Self::default()
    }

    /// `ema <- kappa ema + (1 - kappa) optimized`; first update copies.
    pub fn ema_update(&mut self, layer: LayerId, optimized: &[EditParams], kappa: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&kappa) {
            return Err(invalid("kappa_ema", format!("{kappa} not in [0, 1]")));
        }
        match self.ema.get_mut(&layer) {
            None => {
                self.ema.insert(layer, optimized.to_vec());
            }
            Some(prev) => {
                if prev.len() != optimized.len()
                    || prev.iter().zip(optimized).any(|(a, b)| a.token != b.token || a.theta.dim() != b.theta.dim())
                {
                    return Err(Error::ShapeMismatch {
                        context: "ema_update",
                        expected: format!("{} edits matching previous tokens", prev.len()),
                        actual: format!("{} edits", optimized.len()),
                    });
                }
                for (avg, new) in prev.iter_mut().zip(optimized) {
                    avg.theta.zip_mut_with(&new.theta, |a, &b| *a = kappa * *a + (1.0 - kappa) * b);
                }
            }
        }
        Ok(())
    }

    /// The smoothed optimized map on the given logits, if this layer has one.
    pub fn ema_attention(&self, block: &LogitBlock, basis: &GaussianBasis) -> Result<Option<AttentionMap>> {
        match self.ema.get(&block.layer) {
            None => Ok(None),
            Some(params) => apply_params(block, params, basis).map(Some),
        }
    }
}

/// Decayed blend `A + lambda^t (A_ema - A)`; `A` untouched when `t >= t_thres`
/// or no smoothed map exists.
pub fn apply_schedule(
    original: AttentionMap,
    ema: Option<&AttentionMap>,
    lambda: f64,
    t: usize,
    t_thres: usize,
) -> Result<AttentionMap> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(invalid("lambda", format!("{lambda} not in (0, 1]")));
    }
    let Some(ema) = ema else {
        return Ok(original);
    };
    if t >= t_thres {
        return Ok(original);
    }
    if ema.values.dim() != original.values.dim() {
        return Err(Error::ShapeMismatch {
            context: "apply_schedule",
            expected: format!("{:?}", original.values.dim()),
            actual: format!("{:?}", ema.values.dim()),
        });
    }
    let weight = lambda.powi(t as i32);
    let mut out = original;
    out.values.zip_mut_with(&ema.values, |a, &e| *a += weight * (e - *a));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Down,
    Mid,
    Up,
}

/// One cross-attention layer in network order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub id: LayerId,
    pub name: String,
    pub kind: LayerKind,
    pub grid: usize,
}

/// Layers to edit. `None` picks the last down and first up layer; `Some(k)`
/// expands symmetrically from the bottleneck, alternating down then up.
pub fn select_layers(layout: &[LayerDescriptor], count: Option<usize>) -> Result<Vec<LayerId>> {
    if layout.is_empty() {
        return Err(Error::Empty("network layout"));
    }
    let downs: Vec<&LayerDescriptor> = layout.iter().filter(|l| l.kind == LayerKind::Down).collect();
    let ups: Vec<&LayerDescriptor> = layout.iter().filter(|l| l.kind == LayerKind::Up).collect();
    let k = count.unwrap_or(2);
    if k > downs.len() + ups.len() {
        return Err(invalid(
            "layer count",
            format!("{k} exceeds {} down/up layers", downs.len() + ups.len()),
        ));
    }
    // Nearest-to-bottleneck first: downs reversed, ups in order.
    let mut order = Vec::with_capacity(k);
    let (mut di, mut ui) = (downs.iter().rev(), ups.iter());
    while order.len() < k {
        if let Some(d) = di.next() {
            order.push(d.id);
        }
        if order.len() < k {
            if let Some(u) = ui.next() {
                order.push(u.id);
            }
        }
    }
    // Report in network order.
    let mut ids: Vec<LayerId> = layout.iter().map(|l| l.id).filter(|id| order.contains(id)).collect();
    ids.dedup();
    Ok(ids)
}
