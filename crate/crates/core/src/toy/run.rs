use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{invalid, Error, Result};
use crate::objective::RegulationConfig;
use crate::record::{RunRecord, Timings};
use crate::schedule::select_layers;
use crate::scaler::DEFAULT_TAU;
use crate::toy::hooks::{HookSet, OptimizeRegulator, ScalingRegulator};
use crate::toy::model::ToyModel;
use crate::toy::sampler::SamplerConfig;
use crate::toy::vocab::Prompt;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegulatorKind {
    #[default]
    None,
    Optimize,
    Scaling,
}

impl std::str::FromStr for RegulatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "optimize" => Ok(Self::Optimize),
            "scaling" => Ok(Self::Scaling),
            other => Err(invalid("regulator", format!("`{other}` is not one of none, optimize, scaling"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub tau: f64,
    pub kappa_eos: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            kappa_eos: 0.5,
        }
    }
}

/// Which regulator runs, on which targets and layers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Regulation {
    pub regulator: RegulatorKind,
    pub config: RegulationConfig,
    pub scaling: ScalingConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Retain every layer's map at every step.
    pub keep_maps: bool,
    /// Skip the conditional branch; statistics come from the unconditional one.
    pub unconditional_only: bool,
}

/// Standard-normal starting latent; depends only on the run seed and shape.
pub fn initial_latent(model: &ToyModel, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((model.cells(), model.config.channels), || StandardNormal.sample(&mut rng))
}

/// Builds the hooks for a regulation request on a prompt.
pub fn build_hooks(model: &ToyModel, prompt: &Prompt, regulation: &Regulation) -> Result<HookSet> {
    let mut hooks = HookSet::new();
    if regulation.regulator == RegulatorKind::None {
        return Ok(hooks);
    }
    let cfg = &regulation.config;
    cfg.validate()?;
    prompt.check_targets(&cfg.targets)?;
    if cfg.targets.is_empty() {
        return Err(Error::Empty("regulation targets"));
    }
    let layout = model.layout();
    let layers = match &cfg.edit_layers {
        Some(ids) => {
            for id in ids {
                if !layout.iter().any(|l| l.id == *id) {
                    return Err(Error::MissingRecord(format!("layer {id} not in the model layout")));
                }
            }
            ids.clone()
        }
        None => select_layers(&layout, None)?,
    };
    if layers.is_empty() {
        return Ok(hooks);
    }
    match regulation.regulator {
        RegulatorKind::Optimize => hooks.register(&layers, Box::new(OptimizeRegulator::new(cfg.clone())?))?,
        RegulatorKind::Scaling => hooks.register(
            &layers,
            Box::new(ScalingRegulator {
                targets: cfg.targets.clone(),
                eos: prompt.eos_position(),
                pad: prompt.first_pad(),
                tau: regulation.scaling.tau,
                kappa_eos: regulation.scaling.kappa_eos,
                t_thres: cfg.t_thres,
                checks: Vec::new(),
            }),
        )?,
        RegulatorKind::None => {}
    }
    Ok(hooks)
}

/// Runs the reverse diffusion, regulating the conditional branch if asked.
pub fn run_generation(
    model: &ToyModel,
    prompt: &Prompt,
    sampler: &SamplerConfig,
    regulation: Option<&Regulation>,
    seed: u64,
) -> Result<RunRecord> {
    let hooks = match regulation {
        Some(r) => build_hooks(model, prompt, r)?,
        None => HookSet::new(),
    };
    run_with_hooks(model, prompt, sampler, hooks, seed, RunOptions::default())
}

/// Reverse DDIM loop with classifier-free guidance; `hooks` act on the
/// conditional branch only.
pub fn run_with_hooks(
    model: &ToyModel,
    prompt: &Prompt,
    sampler: &SamplerConfig,
    mut hooks: HookSet,
    seed: u64,
    options: RunOptions,
) -> Result<RunRecord> {
    let start = Instant::now();
    sampler.validate()?;
    let cond = model.context(prompt)?;
    let uncond = model.context(&Prompt::empty(model.config.max_tokens))?;
    let layers = model.layout();
    let (steps, heads, tokens) = (sampler.steps, model.config.heads, prompt.ids.len());
    let mut maxima = Array4::<f64>::zeros((steps, layers.len(), heads, tokens));
    let mut sums = Array4::<f64>::zeros((steps, layers.len(), heads, tokens));
    let mut final_maps = Vec::new();
    let mut debug_maps = options.keep_maps.then(Vec::new);

    let mut z = initial_latent(model, seed);
    let mut latents = vec![z.clone()];
    let s = sampler.cfg_scale;

    for (i, &(a_t, a_prev)) in sampler.alpha_pairs().iter().enumerate() {
        let last = i + 1 == steps;
        let mut seen: Vec<AttentionMap> = Vec::new();
        let mut layer_idx = 0;
        let mut observe = |a: &AttentionMap| {
            for (h, head) in a.values.outer_iter().enumerate() {
                for (t, col) in head.axis_iter(Axis(1)).enumerate() {
                    maxima[[i, layer_idx, h, t]] = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    sums[[i, layer_idx, h, t]] = col.sum();
                }
            }
            layer_idx += 1;
            if last || options.keep_maps {
                seen.push(a.clone());
            }
        };
        let x0 = if options.unconditional_only {
            model.denoise(z.view(), &uncond, a_t, i, None, &mut observe)?
        } else {
            let x0_c = model.denoise(z.view(), &cond, a_t, i, Some(&mut hooks), &mut observe)?;
            let x0_u = model.denoise(z.view(), &uncond, a_t, i, None, &mut |_| {})?;
            &x0_u + &((&x0_c - &x0_u) * s)
        };
        let x0 = if sampler.clip_sample {
            x0.mapv(|v| v.clamp(-1.0, 1.0))
        } else {
            x0
        };
        let eps = (&z - &(&x0 * a_t.sqrt())) / (1.0 - a_t).sqrt();
        z = x0 * a_prev.sqrt() + eps * (1.0 - a_prev).sqrt();
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { term: "latent" });
        }
        latents.push(z.clone());
        if last {
            final_maps = seen.clone();
        }
        if let Some(d) = debug_maps.as_mut() {
            d.push(seen);
        }
    }

    Ok(RunRecord {
        layers,
        prompt: prompt.clone(),
        seed,
        maxima,
        sums,
        latents,
        final_maps,
        debug_maps,
        timings: Timings {
            total_s: start.elapsed().as_secs_f64(),
            hooks_s: hooks.elapsed().as_secs_f64(),
        },
        hook_summaries: hooks.summaries(),
    })
}
