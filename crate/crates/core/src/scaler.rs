//! Closed-form scaling regulator.
//!
//! Among the regulated tokens, the dominant one (largest per-token maximum) is
//! multiplied by `1 - gamma` so that its maximum lands exactly on the reference
//! level `i_avg`, and the weakest remaining token receives `kappa` times the
//! EOS token's map. After regulation the largest per-token maximum obeys
//!
//! ```text
//! M' <= max(tau (i_avg + delta), I_l + kappa I_eos)
//! delta = max{ I - i_avg : I among the non-dominant maxima } + I_p
//! ```
//!
//! `i_avg` is the mean maximum of the non-dominant tokens. Scaling fires when
//! `M > tau (i_avg + delta) - tau I_p`.

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionMap, TokenMap2D};
use crate::error::{invalid, Error, Result};

pub const DEFAULT_TAU: f64 = 1.1;

/// `1 - i_avg / i_t`: the factor that brings a map with maximum `i_t` down to `i_avg`.
pub fn gamma_for(i_t: f64, i_avg: f64) -> Result<f64> {
    if !(i_t > 0.0) {
        return Err(invalid("i_t", format!("{i_t} must be > 0")));
    }
    if !(0.0..=i_t).contains(&i_avg) {
        return Err(invalid("i_avg", format!("{i_avg} not in [0, {i_t}]")));
    }
    Ok(1.0 - i_avg / i_t)
}

pub fn scale_dominant(map: &TokenMap2D, gamma: f64) -> Result<TokenMap2D> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid("gamma", format!("{gamma} not in [0, 1]")));
    }
    let keep = 1.0 - gamma;
    Ok(TokenMap2D {
        grid: map.grid.mapv(|v| v * keep),
        token: map.token,
    })
}

pub fn inject_eos(least: &TokenMap2D, eos: &TokenMap2D, kappa: f64) -> Result<TokenMap2D> {
    if least.grid.dim() != eos.grid.dim() {
        return Err(Error::ShapeMismatch {
            context: "inject_eos",
            expected: format!("{:?}", least.grid.dim()),
            actual: format!("{:?}", eos.grid.dim()),
        });
    }
    if !(kappa.is_finite() && kappa >= 0.0) {
        return Err(invalid("kappa_eos", format!("{kappa} must be >= 0")));
    }
    let mut grid = least.grid.clone();
    grid.scaled_add(kappa, &eos.grid);
    Ok(TokenMap2D {
        grid,
        token: least.token,
    })
}

/// Everything the bound depends on, for one regulated instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerParams {
    pub tau: f64,
    pub kappa_eos: f64,
    pub i_avg: f64,
    pub i_p: f64,
    pub i_eos: f64,
    /// Per-token maxima before regulation, in the order of the regulated tokens.
    pub maxima: Vec<f64>,
    pub dominant_index: usize,
    pub least_index: usize,
}

impl ScalerParams {
    /// Derives dominant/least tokens and `i_avg` from the maxima.
    pub fn from_maxima(maxima: Vec<f64>, tau: f64, kappa_eos: f64, i_p: f64, i_eos: f64) -> Result<Self> {
        if maxima.len() < 2 {
            return Err(invalid("maxima", "at least two tokens are needed (delta undefined)"));
        }
        if !(tau >= 1.0) {
            return Err(invalid("tau", format!("{tau} must be >= 1")));
        }
        if !(kappa_eos.is_finite() && kappa_eos >= 0.0) {
            return Err(invalid("kappa_eos", format!("{kappa_eos} must be >= 0")));
        }
        for (name, v) in [("i_p", i_p), ("i_eos", i_eos)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(name, format!("{v} not in [0, 1]")));
            }
        }
        if maxima.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("maxima", "all maxima must lie in [0, 1]"));
        }
        let mut dominant = 0;
        for (k, &v) in maxima.iter().enumerate() {
            if v > maxima[dominant] {
                dominant = k;
            }
        }
        let mut least = if dominant == 0 { 1 } else { 0 };
        let mut sum = 0.0;
        for (k, &v) in maxima.iter().enumerate() {
            if k == dominant {
                continue;
            }
            sum += v;
            if v < maxima[least] {
                least = k;
            }
        }
        let i_avg = sum / (maxima.len() - 1) as f64;
        Ok(Self {
            tau,
            kappa_eos,
            i_avg,
            i_p,
            i_eos,
            maxima,
            dominant_index: dominant,
            least_index: least,
        })
    }

    pub fn delta(&self) -> f64 {
        let spread = self
            .maxima
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != self.dominant_index)
            .map(|(_, &v)| v - self.i_avg)
            .fold(f64::NEG_INFINITY, f64::max);
        spread + self.i_p
    }

    pub fn dominant_max(&self) -> f64 {
        self.maxima[self.dominant_index]
    }

    pub fn triggers(&self) -> bool {
        self.dominant_max() > self.tau * (self.i_avg + self.delta()) - self.tau * self.i_p
    }

    pub fn bound(&self) -> f64 {
        let least = self.maxima[self.least_index] + self.kappa_eos * self.i_eos;
        (self.tau * (self.i_avg + self.delta())).max(least)
    }
}

/// Outcome of checking the bound on regulated maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub holds: bool,
    pub bound: f64,
    pub m_prime: f64,
    /// Violating token and `bound - max` (negative) when the bound fails.
    pub witness: Option<(usize, f64)>,
}

pub fn verify_bound(params: &ScalerParams, regulated_maxima: &[f64]) -> Result<BoundCheck> {
    if regulated_maxima.len() != params.maxima.len() {
        return Err(Error::ShapeMismatch {
            context: "verify_bound",
            expected: format!("{} maxima", params.maxima.len()),
            actual: format!("{}", regulated_maxima.len()),
        });
    }
    let bound = params.bound();
    let (arg, m_prime) = regulated_maxima
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
    let holds = m_prime <= bound;
    Ok(BoundCheck {
        holds,
        bound,
        m_prime,
        witness: (!holds).then_some((arg, bound - m_prime)),
    })
}

/// Regulated maps plus the parameters that produced them.
#[derive(Debug, Clone)]
pub struct Regulated {
    pub maps: Vec<TokenMap2D>,
    pub params: ScalerParams,
    pub scaled: bool,
}

/// Scale-then-inject over a set of token maps.
pub fn regulate_maps(maps: &[TokenMap2D], eos: &TokenMap2D, i_p: f64, tau: f64, kappa_eos: f64) -> Result<Regulated> {
    let maxima: Vec<f64> = maps.iter().map(TokenMap2D::max).collect();
    let params = ScalerParams::from_maxima(maxima, tau, kappa_eos, i_p, eos.max())?;
    let mut out = maps.to_vec();
    let scaled = params.triggers();
    if scaled {
        let gamma = gamma_for(params.dominant_max(), params.i_avg)?;
        out[params.dominant_index] = scale_dominant(&maps[params.dominant_index], gamma)?;
    }
    out[params.least_index] = inject_eos(&out[params.least_index], eos, kappa_eos)?;
    Ok(Regulated {
        maps: out,
        params,
        scaled,
    })
}

/// Applies the scaling regulator to the target columns of every head, then
/// renormalizes rows so the result is a valid attention map again.
///
/// Returns the map together with each head's bound check on the
/// pre-normalization maxima.
pub fn regulate_attention(
    attn: &AttentionMap,
    targets: &[usize],
    eos: usize,
    pad: Option<usize>,
    tau: f64,
    kappa_eos: f64,
) -> Result<(AttentionMap, Vec<BoundCheck>)> {
    let n = attn.tokens();
    for &t in targets.iter().chain(std::iter::once(&eos)).chain(pad.iter()) {
        if t >= n {
            return Err(Error::IndexOutOfRange {
                what: "token",
                index: t,
                len: n,
            });
        }
    }
    let mut values: Array3<f64> = attn.values.clone();
    let mut checks = Vec::with_capacity(attn.heads());
    for h in 0..attn.heads() {
        let maps: Vec<TokenMap2D> = targets
            .iter()
            .map(|&t| crate::attention::unravel(attn, h, t))
            .collect::<Result<_>>()?;
        let eos_map = crate::attention::unravel(attn, h, eos)?;
        let i_p = match pad {
            Some(p) => crate::attention::unravel(attn, h, p)?.max(),
            None => 0.0,
        };
        let reg = regulate_maps(&maps, &eos_map, i_p, tau, kappa_eos)?;
        let reg_max: Vec<f64> = reg.maps.iter().map(TokenMap2D::max).collect();
        checks.push(verify_bound(&reg.params, &reg_max)?);
        let mut head = values.index_axis_mut(Axis(0), h);
        for (map, &t) in reg.maps.iter().zip(targets) {
            for (dst, &src) in head.column_mut(t).iter_mut().zip(map.grid.iter()) {
                *dst = src;
            }
        }
        for mut row in head.outer_iter_mut() {
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
    }
    Ok((
        AttentionMap {
            values,
            layer: attn.layer,
            w: attn.w,
        },
        checks,
    ))
}

/// One randomized instance of the bound check: a random attention map over
/// `targets + EOS + PAD` tokens with a randomly boosted dominant target.
pub fn random_bound_trial(seed: u64, tau: f64, kappa_eos: f64) -> Result<BoundCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = [2usize, 4, 8][rng.gen_range(0..3)];
    let m = w * w;
    let n_targets = rng.gen_range(2..=5);
    let n = n_targets + 2;
    let spread = rng.gen_range(0.5..4.0);
    let boost = rng.gen_range(0.0..6.0);
    let dominant = rng.gen_range(0..n_targets);
    let mut logits = Array3::<f64>::zeros((1, m, n));
    for ((_, _, k), v) in logits.indexed_iter_mut() {
        *v = rng.gen_range(-spread..spread) + if k == dominant { boost } else { 0.0 };
    }
    let block = crate::attention::LogitBlock::new(logits, 1, crate::attention::LayerId(0), w)?;
    let attn = crate::attention::compute_attention(&block)?;
    let targets: Vec<usize> = (0..n_targets).collect();
    let (_, checks) = regulate_attention(&attn, &targets, n_targets, Some(n_targets + 1), tau, kappa_eos)?;
    Ok(checks.into_iter().next().expect("one head"))
}
