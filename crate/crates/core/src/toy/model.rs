//! Untrained, seeded denoiser with a U-Net-shaped stack of cross-attention
//! layers.
//!
//! Every layer attends from spatial features to the prompt tokens and adds
//! the attended values back to the features. The clean-latent prediction is
//!
//! ```text
//! x0 = sqrt(alpha_bar) z + (1 - alpha_bar) tanh(gain * paint)
//! ```
//!
//! where `paint` sums all layers' attention outputs. The first term is the
//! minimum-MSE estimate under a unit-variance prior and keeps whatever the
//! latent already shows; the second paints what the attention maps favour,
//! and dominates while the latent is still mostly noise.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{compute_attention, AttentionMap, LayerId, LogitBlock};
use crate::error::{invalid, Error, Result};
use crate::schedule::{LayerDescriptor, LayerKind};
use crate::toy::hooks::HookSet;
use crate::toy::vocab::{Prompt, Vocabulary, BOS, EOS, PAD};

/// Row-sum tolerance applied to maps returned by hooks.
pub const HOOK_TOLERANCE: f64 = 1e-9;

const LAYOUT: [(&str, LayerKind, u32); 7] = [
    ("d0", LayerKind::Down, 0),
    ("d1", LayerKind::Down, 1),
    ("d2", LayerKind::Down, 2),
    ("mid", LayerKind::Mid, 2),
    ("u0", LayerKind::Up, 2),
    ("u1", LayerKind::Up, 1),
    ("u2", LayerKind::Up, 0),
];

/// Offset added to one vocabulary word's key on the constant query channel,
/// i.e. to its raw logit at every cell and head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DominanceBias {
    pub token: String,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub seed: u64,
    /// Side of the full-resolution latent grid; must be divisible by 4.
    pub latent_side: usize,
    /// Latent and feature channels, shared by all levels; also the embedding width.
    pub channels: usize,
    pub heads: usize,
    /// Key dimension per head; the last coordinate carries the key bias.
    pub head_dim: usize,
    /// Scaled logit a unit query earns from a perfectly aligned token.
    pub coupling: f64,
    /// Relative size of the independent query/key perturbations.
    pub projection_noise: f64,
    pub conv_gain: f64,
    pub paint_gain: f64,
    pub max_tokens: usize,
    /// Raw-logit offset on padding keys; a soft padding mask when negative.
    pub pad_key_bias: f64,
    pub dominance_bias: Vec<DominanceBias>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_side: 16,
            channels: 8,
            heads: 2,
            head_dim: 8,
            coupling: 5.0,
            projection_noise: 0.3,
            conv_gain: 0.5,
            paint_gain: 1.0,
            max_tokens: 16,
            pad_key_bias: -10.0,
            dominance_bias: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_side < 4 || self.latent_side % 4 != 0 {
            return Err(invalid("latent_side", format!("{} is not a positive multiple of 4", self.latent_side)));
        }
        if self.channels == 0 || self.heads == 0 {
            return Err(invalid("channels/heads", "must be >= 1"));
        }
        if self.head_dim < 2 {
            return Err(invalid("head_dim", "must be >= 2"));
        }
        if self.max_tokens < 2 {
            return Err(invalid("max_tokens", "must fit BOS and EOS"));
        }
        for (name, v) in [
            ("coupling", self.coupling),
            ("projection_noise", self.projection_noise),
            ("conv_gain", self.conv_gain),
            ("paint_gain", self.paint_gain),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(name, format!("{v} is not a finite non-negative number")));
            }
        }
        if !self.pad_key_bias.is_finite() {
            return Err(invalid("pad_key_bias", "must be finite"));
        }
        for b in &self.dominance_bias {
            Vocabulary::id(&b.token)?;
            if !b.magnitude.is_finite() {
                return Err(invalid("dominance_bias", format!("magnitude {} for {}", b.magnitude, b.token)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    desc: LayerDescriptor,
    /// Per head, `C x (d - 1)`.
    wq: Vec<Array2<f64>>,
    wk: Vec<Array2<f64>>,
    /// Per head, value projection folded into the output projection, `C x C`.
    wvo: Vec<Array2<f64>>,
    /// Residual 3x3 convolution applied after the attention update, `3 x 3 x C x C`.
    conv: Array4<f64>,
}

/// Keys and projected values of one prompt for every layer.
#[derive(Debug, Clone)]
pub struct PromptContext {
    /// `[layer][head]`: `N x (d - 1)` keys.
    keys: Vec<Vec<Array2<f64>>>,
    /// `[layer][head]`: `N x C` values after output projection.
    values: Vec<Vec<Array2<f64>>>,
    /// Per-token raw-logit offset, length `N`.
    key_bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    layers: Vec<CrossAttention>,
    /// Grayscale readout direction, unit norm.
    pub decoder: Array1<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || normal.sample(rng))
}

impl ToyModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c, d, h) = (config.channels, config.head_dim, config.heads);
        let vocab = Vocabulary::seeded(config.seed, c);
        // q.k ~ cos(query, token) for the shared factor; amplitude sets the coupling.
        let amp = (config.coupling * (d as f64).sqrt()).sqrt();
        let eps = config.projection_noise;
        let conv_std = config.conv_gain / ((9 * c) as f64).sqrt();
        let layers = LAYOUT
            .iter()
            .enumerate()
            .map(|(i, &(name, kind, level))| {
                let desc = LayerDescriptor {
                    id: LayerId(i as u16),
                    name: name.to_string(),
                    kind,
                    grid: config.latent_side >> level,
                };
                let mut wq = Vec::with_capacity(h);
                let mut wk = Vec::with_capacity(h);
                let mut wvo = Vec::with_capacity(h);
                for _ in 0..h {
                    let shared = gaussian(&mut rng, (c, d - 1), 1.0 / ((d - 1) as f64).sqrt());
                    let nq = gaussian(&mut rng, (c, d - 1), eps / ((d - 1) as f64).sqrt());
                    let nk = gaussian(&mut rng, (c, d - 1), eps / ((d - 1) as f64).sqrt());
                    wq.push((&shared + &nq) * amp);
                    wk.push((&shared + &nk) * amp);
                    let wv = Array2::<f64>::eye(c) + gaussian(&mut rng, (c, c), 0.2 / (c as f64).sqrt());
                    let wo = Array2::<f64>::eye(c) / h as f64 + gaussian(&mut rng, (c, c), 0.1 / (c as f64).sqrt());
                    wvo.push(wv.dot(&wo));
                }
                let normal = Normal::new(0.0, conv_std).expect("finite std");
                let conv = Array4::from_shape_simple_fn((3, 3, c, c), || normal.sample(&mut rng));
                CrossAttention {
                    desc,
                    wq,
                    wk,
                    wvo,
                    conv,
                }
            })
            .collect();
        let mut decoder: Array1<f64> = Array1::from_shape_simple_fn(c, || StandardNormal.sample(&mut rng));
        let norm = decoder.dot(&decoder).sqrt();
        decoder.mapv_inplace(|v: f64| v / norm);
        Ok(Self {
            config,
            vocab,
            layers,
            decoder,
        })
    }

    pub fn layout(&self) -> Vec<LayerDescriptor> {
        self.layers.iter().map(|l| l.desc.clone()).collect()
    }

    pub fn cells(&self) -> usize {
        self.config.latent_side * self.config.latent_side
    }

    /// Encodes a prompt into per-layer keys and values.
    pub fn context(&self, prompt: &Prompt) -> Result<PromptContext> {
        if prompt.ids.len() != self.config.max_tokens {
            return Err(Error::ShapeMismatch {
                context: "prompt length",
                expected: format!("{} positions", self.config.max_tokens),
                actual: format!("{}", prompt.ids.len()),
            });
        }
        let n = prompt.ids.len();
        let mut emb = Array2::<f64>::zeros((n, self.config.channels));
        for (k, &id) in prompt.ids.iter().enumerate() {
            if id >= self.vocab.len() {
                return Err(Error::UnknownToken(format!("id {id}")));
            }
            emb.row_mut(k).assign(&self.vocab.embeddings.row(id));
        }
        let mut key_bias = Array1::<f64>::zeros(n);
        for (k, &t) in prompt.ids.iter().enumerate() {
            if t == PAD {
                key_bias[k] = self.config.pad_key_bias;
            }
        }
        for b in &self.config.dominance_bias {
            let id = Vocabulary::id(&b.token)?;
            for (k, &t) in prompt.ids.iter().enumerate() {
                if t == id {
                    key_bias[k] += b.magnitude;
                }
            }
        }
        let keys = self.layers.iter().map(|l| l.wk.iter().map(|w| emb.dot(w)).collect()).collect();
        // Special tokens are content-free attention sinks.
        let mut content = emb;
        for (k, &t) in prompt.ids.iter().enumerate() {
            if t == BOS || t == EOS || t == PAD {
                content.row_mut(k).fill(0.0);
            }
        }
        let values = self.layers.iter().map(|l| l.wvo.iter().map(|w| content.dot(w)).collect()).collect();
        Ok(PromptContext { keys, values, key_bias })
    }

    /// Clean-latent prediction for latent `z` (`M x C`, row-major cells) at
    /// noise level `alpha_bar`.
    ///
    /// `hooks` intercept the listed layers; `observe` sees every layer's map
    /// in network order after interception.
    pub fn denoise(
        &self,
        z: ArrayView2<'_, f64>,
        ctx: &PromptContext,
        alpha_bar: f64,
        step: usize,
        mut hooks: Option<&mut HookSet>,
        observe: &mut dyn FnMut(&AttentionMap),
    ) -> Result<Array2<f64>> {
        let w0 = self.config.latent_side;
        if z.dim() != (w0 * w0, self.config.channels) {
            return Err(Error::ShapeMismatch {
                context: "latent",
                expected: format!("{:?}", (w0 * w0, self.config.channels)),
                actual: format!("{:?}", z.dim()),
            });
        }
        let mut attend = |i: usize, f: &mut Array2<f64>| -> Result<Array2<f64>> {
            let out = self.cross_attend(i, f.view(), ctx, step, hooks.as_deref_mut(), observe)?;
            *f += &out;
            let mixed = conv3x3(f.view(), self.layers[i].desc.grid, &self.layers[i].conv);
            *f += &mixed;
            Ok(out)
        };

        let mut f0 = z.to_owned();
        let mut paint0 = attend(0, &mut f0)?;
        let mut f1 = pool2(f0.view(), w0);
        let mut paint1 = attend(1, &mut f1)?;
        let mut f2 = pool2(f1.view(), w0 / 2);
        let mut paint2 = attend(2, &mut f2)?;
        paint2 += &attend(3, &mut f2)?;
        paint2 += &attend(4, &mut f2)?;
        let mut g1 = (upsample2(f2.view(), w0 / 4) + &f1) * 0.5;
        paint1 += &attend(5, &mut g1)?;
        let mut g0 = (upsample2(g1.view(), w0 / 2) + &f0) * 0.5;
        paint0 += &attend(6, &mut g0)?;

        let coarse = upsample2(upsample2(paint2.view(), w0 / 4).view(), w0 / 2);
        let paint = paint0 + upsample2(paint1.view(), w0 / 2) + coarse;
        let gain = self.config.paint_gain;
        let keep = alpha_bar.sqrt();
        let mut x0 = paint.mapv(|v| (1.0 - alpha_bar) * (gain * v).tanh());
        x0.scaled_add(keep, &z);
        Ok(x0)
    }

    fn cross_attend(
        &self,
        i: usize,
        f: ArrayView2<'_, f64>,
        ctx: &PromptContext,
        step: usize,
        hooks: Option<&mut HookSet>,
        observe: &mut dyn FnMut(&AttentionMap),
    ) -> Result<Array2<f64>> {
        let layer = &self.layers[i];
        let (m, c) = f.dim();
        let n = ctx.key_bias.len();
        let mut q_in = f.to_owned();
        for mut row in q_in.outer_iter_mut() {
            let norm = row.dot(&row).sqrt() + 1e-6;
            row.mapv_inplace(|v| v / norm);
        }
        let mut logits = Array3::<f64>::zeros((self.config.heads, m, n));
        for (h, mut out) in logits.outer_iter_mut().enumerate() {
            let q = q_in.dot(&layer.wq[h]);
            out.assign(&q.dot(&ctx.keys[i][h].t()));
            // Constant query channel against the key-bias coordinate.
            out += &ctx.key_bias;
        }
        let block = LogitBlock::new(logits, self.config.head_dim, layer.desc.id, layer.desc.grid)?;
        let attn = match hooks.and_then(|hs| hs.intercept(step, &block)) {
            Some(result) => {
                let a = result?;
                validate_hook_output(&a, &block, step)?;
                a
            }
            None => compute_attention(&block)?,
        };
        observe(&attn);
        let mut out = Array2::<f64>::zeros((m, c));
        for (h, a) in attn.values.outer_iter().enumerate() {
            out += &a.dot(&ctx.values[i][h]);
        }
        Ok(out)
    }

    /// Fixed linear readout of a latent to `[0, 255]` grayscale, row-major.
    pub fn decode(&self, z: ArrayView2<'_, f64>) -> Vec<u8> {
        z.dot(&self.decoder)
            .iter()
            .map(|&v| ((0.5 + 0.5 * v).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

fn validate_hook_output(a: &AttentionMap, block: &LogitBlock, step: usize) -> Result<()> {
    let contract = |reason: String| Error::HookContract {
        step,
        layer: block.layer,
        reason,
    };
    if a.values.dim() != block.logits.dim() || a.w != block.w {
        return Err(contract(format!(
            "shape {:?} (w = {}) does not match logits {:?} (w = {})",
            a.values.dim(),
            a.w,
            block.logits.dim(),
            block.w
        )));
    }
    if a.layer != block.layer {
        return Err(contract(format!("map tagged {} returned for {}", a.layer, block.layer)));
    }
    a.check_row_stochastic(HOOK_TOLERANCE).map_err(contract)
}

/// Zero-padded 3x3 convolution of `w x w` features, `kernel[dy][dx]` is `C x C`.
fn conv3x3(f: ArrayView2<'_, f64>, w: usize, kernel: &Array4<f64>) -> Array2<f64> {
    let c = f.ncols();
    let grid = f.into_shape_with_order((w, w, c)).expect("M = w^2");
    let mut out = Array3::<f64>::zeros((w, w, c));
    for dy in 0..3 {
        for dx in 0..3 {
            let k = kernel.slice(s![dy, dx, .., ..]);
            // Output (i, j) reads input (i + dy - 1, j + dx - 1).
            let (i0, i1) = (1usize.saturating_sub(dy), (w + 1 - dy).min(w));
            let (j0, j1) = (1usize.saturating_sub(dx), (w + 1 - dx).min(w));
            for i in i0..i1 {
                let src = grid.slice(s![i + dy - 1, j0 + dx - 1..j1 + dx - 1, ..]);
                let mut dst = out.slice_mut(s![i, j0..j1, ..]);
                dst += &src.dot(&k);
            }
        }
    }
    out.into_shape_with_order((w * w, c)).expect("contiguous")
}

/// 2x2 average pooling of a `w x w` grid.
fn pool2(f: ArrayView2<'_, f64>, w: usize) -> Array2<f64> {
    let c = f.ncols();
    let half = w / 2;
    let mut out = Array2::<f64>::zeros((half * half, c));
    for i in 0..half {
        for j in 0..half {
            let mut dst = out.row_mut(i * half + j);
            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                dst += &f.row((2 * i + di) * w + 2 * j + dj);
            }
            dst *= 0.25;
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of a `w x w` grid.
fn upsample2(f: ArrayView2<'_, f64>, w: usize) -> Array2<f64> {
    let c = f.ncols();
    let big = 2 * w;
    let mut out = Array2::<f64>::zeros((big * big, c));
    for (k, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let (i, j) = (k / big, k % big);
        row.assign(&f.row((i / 2) * w + j / 2));
    }
    out
}
