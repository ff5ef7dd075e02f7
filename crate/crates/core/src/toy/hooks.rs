//! Attention interception: hooks replace a layer's attention map in flight.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::attention::{compute_attention, AttentionMap, LayerId, LogitBlock};
use crate::basis::GaussianBasis;
use crate::error::{Error, Result};
use crate::objective::RegulationConfig;
use crate::optimizer::optimize;
use crate::scaler::{regulate_attention, BoundCheck};
use crate::schedule::{apply_schedule, ScheduleState};

/// Receives a layer's logits at sampler step `step` and returns the attention
/// map to use instead. The simulator rejects maps that are not row-stochastic
/// or do not match the logits' shape.
pub trait AttentionHook: Send {
    fn intercept(&mut self, step: usize, block: &LogitBlock) -> Result<AttentionMap>;

    /// Free-form diagnostics collected over the run.
    fn summary(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

/// Hooks keyed by layer; each layer routes to at most one hook.
#[derive(Default)]
pub struct HookSet {
    hooks: Vec<Box<dyn AttentionHook>>,
    routes: BTreeMap<LayerId, usize>,
    elapsed: Duration,
}

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, layers: &[LayerId], hook: Box<dyn AttentionHook>) -> Result<()> {
        for (i, l) in layers.iter().enumerate() {
            if self.routes.contains_key(l) || layers[..i].contains(l) {
                return Err(Error::DuplicateHook(*l));
            }
        }
        let idx = self.hooks.len();
        self.hooks.push(hook);
        for &l in layers {
            self.routes.insert(l, idx);
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerId> {
        self.routes.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    /// Runs the hook registered for the block's layer, if any.
    pub fn intercept(&mut self, step: usize, block: &LogitBlock) -> Option<Result<AttentionMap>> {
        let idx = *self.routes.get(&block.layer)?;
        let start = Instant::now();
        let out = self.hooks[idx].intercept(step, block);
        self.elapsed += start.elapsed();
        Some(out)
    }

    /// Wall time spent inside hooks.
    pub fn elapsed(&self) -> Duration {
        self.elapsed
    }

    pub fn summaries(&self) -> Vec<serde_json::Value> {
        self.hooks.iter().map(|h| h.summary()).collect()
    }
}

/// Plain softmax; equivalent to no hook at all.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityHook;

impl AttentionHook for IdentityHook {
    fn intercept(&mut self, _step: usize, block: &LogitBlock) -> Result<AttentionMap> {
        compute_attention(block)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizeLog {
    pub step: usize,
    pub layer: LayerId,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

/// Optimize, smooth and blend: the optimization-based regulator.
pub struct OptimizeRegulator {
    config: RegulationConfig,
    bases: BTreeMap<usize, GaussianBasis>,
    schedule: ScheduleState,
    pub log: Vec<OptimizeLog>,
}

impl OptimizeRegulator {
    pub fn new(config: RegulationConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            bases: BTreeMap::new(),
            schedule: ScheduleState::new(),
            log: Vec::new(),
        })
    }
}

impl AttentionHook for OptimizeRegulator {
    fn intercept(&mut self, step: usize, block: &LogitBlock) -> Result<AttentionMap> {
        let cfg = &self.config;
        if step >= cfg.t_thres {
            return compute_attention(block);
        }
        if !self.bases.contains_key(&block.w) {
            self.bases.insert(block.w, GaussianBasis::for_grid(block.w)?);
        }
        let basis = &self.bases[&block.w];
        let opt = optimize(block, basis, cfg)?;
        self.schedule.step = step;
        self.schedule.ema_update(block.layer, &opt.state.params, cfg.kappa_ema)?;
        let ema = self.schedule.ema_attention(block, basis)?;
        let original = compute_attention(block)?;
        self.log.push(OptimizeLog {
            step,
            layer: block.layer,
            initial_loss: opt.initial_loss,
            final_loss: opt.final_loss,
            iterations: opt.state.iter,
        });
        apply_schedule(original, ema.as_ref(), cfg.lambda, step, cfg.t_thres)
    }

    fn summary(&self) -> serde_json::Value {
        let improved = self.log.iter().filter(|l| l.final_loss < l.initial_loss).count();
        serde_json::json!({
            "regulator": "optimize",
            "optimized_layer_steps": self.log.len(),
            "improved_layer_steps": improved,
            "mean_iterations": mean(self.log.iter().map(|l| l.iterations as f64)),
            "mean_initial_loss": mean(self.log.iter().map(|l| l.initial_loss)),
            "mean_final_loss": mean(self.log.iter().map(|l| l.final_loss)),
        })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scale the dominant target, inject EOS attention into the weakest one.
pub struct ScalingRegulator {
    pub targets: Vec<usize>,
    pub eos: usize,
    pub pad: Option<usize>,
    pub tau: f64,
    pub kappa_eos: f64,
    pub t_thres: usize,
    pub checks: Vec<(usize, LayerId, BoundCheck)>,
}

impl AttentionHook for ScalingRegulator {
    fn intercept(&mut self, step: usize, block: &LogitBlock) -> Result<AttentionMap> {
        let attn = compute_attention(block)?;
        if step >= self.t_thres {
            return Ok(attn);
        }
        let (out, checks) = regulate_attention(&attn, &self.targets, self.eos, self.pad, self.tau, self.kappa_eos)?;
        self.checks.extend(checks.into_iter().map(|c| (step, block.layer, c)));
        Ok(out)
    }

    fn summary(&self) -> serde_json::Value {
        let violations = self.checks.iter().filter(|(_, _, c)| !c.holds).count();
        serde_json::json!({
            "regulator": "scaling",
            "bound_checks": self.checks.len(),
            "bound_violations": violations,
        })
    }
}
