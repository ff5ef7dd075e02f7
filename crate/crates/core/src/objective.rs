//! Regulation loss and its analytic gradient with respect to the edit weights.
//!
//! For head-averaged edited maps `Ā` and target set `T`:
//!
//! ```text
//! E = 1/|T| sum_t (quantile(Ā_t, q_level) - q_target)^2
//!   + alpha/|T| sum_t (sum_m Ā[m,t] - mu M)^2
//! L = E + beta sqrt(||A' - A||_F^2 + eps)
//! ```
//!
//! The quantile uses the nearest-rank-lower convention, so its subgradient is
//! routed to exactly one cell per target.

use ndarray::{Array1, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::attention::{softmax_block, AttentionMap, LayerId, LogitBlock};
use crate::basis::{EditParams, GaussianBasis};
use crate::error::{invalid, Error, Result};

/// Smoothing inside the Frobenius proximity term.
pub const FROBENIUS_EPS: f64 = 1e-12;

/// Hyperparameters of the optimization-based regulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegulationConfig {
    /// Proximity weight.
    pub beta: f64,
    /// Weight of the mass term.
    pub alpha: f64,
    /// Target fraction of high-attention area.
    pub mu: f64,
    pub q_level: f64,
    pub q_target: f64,
    /// Gradient-descent learning rate.
    pub eta: f64,
    pub max_iters: usize,
    /// Relative plateau tolerance over a 3-iteration window.
    pub tol: f64,
    pub kappa_ema: f64,
    pub lambda: f64,
    pub t_thres: usize,
    /// Prompt positions of the target tokens.
    pub targets: Vec<usize>,
    /// Layers to edit; `None` selects the last down and first up layer.
    pub edit_layers: Option<Vec<LayerId>>,
}

impl Default for RegulationConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            alpha: 1.0,
            mu: 0.2,
            q_level: 0.9,
            q_target: 0.9,
            eta: 0.1,
            max_iters: 20,
            tol: 1e-4,
            kappa_ema: 0.5,
            lambda: 0.95,
            t_thres: 25,
            targets: Vec::new(),
            edit_layers: None,
        }
    }
}

impl RegulationConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(invalid(name, format!("{v} must be finite and >= 0")))
            }
        };
        finite_nonneg("beta", self.beta)?;
        finite_nonneg("alpha", self.alpha)?;
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(invalid("mu", format!("{} not in (0, 1)", self.mu)));
        }
        if !(self.q_level > 0.0 && self.q_level < 1.0) {
            return Err(invalid("q_level", format!("{} not in (0, 1)", self.q_level)));
        }
        if !self.q_target.is_finite() {
            return Err(invalid("q_target", "must be finite"));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(invalid("eta", format!("{} must be > 0", self.eta)));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(invalid("tol", format!("{} must be > 0", self.tol)));
        }
        if !(0.0..=1.0).contains(&self.kappa_ema) {
            return Err(invalid("kappa_ema", format!("{} not in [0, 1]", self.kappa_ema)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(invalid("lambda", format!("{} not in (0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Nearest-rank-lower quantile: sort ascending (stable, so ties keep the lowest
/// original position first) and take zero-based rank `floor(q (M - 1))`.
/// Returns the value and its original position.
pub fn quantile(values: &[f64], q: f64) -> Result<(f64, usize)> {
    if values.is_empty() {
        return Err(Error::Empty("quantile of an empty list"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid("q", format!("{q} not in (0, 1)")));
    }
    let order = sorted_order(values);
    let rank = quantile_rank(values.len(), q);
    let idx = order[rank];
    Ok((values[idx], idx))
}

pub(crate) fn quantile_rank(len: usize, q: f64) -> usize {
    ((q * (len - 1) as f64) + 1e-9).floor() as usize
}

pub(crate) fn sorted_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    order
}

/// Per-target pieces of the error function.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTerms {
    pub token: usize,
    pub quantile: f64,
    /// Cell holding the selected quantile element.
    pub quantile_cell: usize,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBreakdown {
    pub value: f64,
    pub quantile_term: f64,
    pub mass_term: f64,
    pub targets: Vec<TargetTerms>,
}

fn check_targets(targets: &[usize], n: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Empty("target token set"));
    }
    for &t in targets {
        if t >= n {
            return Err(Error::IndexOutOfRange {
                what: "target token",
                index: t,
                len: n,
            });
        }
    }
    Ok(())
}

/// Error function on a head-averaged `M x N` map.
pub fn error_e(mean_map: ArrayView2<'_, f64>, config: &RegulationConfig) -> Result<ErrorBreakdown> {
    let (m, n) = mean_map.dim();
    check_targets(&config.targets, n)?;
    let inv_t = 1.0 / config.targets.len() as f64;
    let mut quantile_term = 0.0;
    let mut mass_term = 0.0;
    let mut terms = Vec::with_capacity(config.targets.len());
    for &t in &config.targets {
        let col = mean_map.column(t).to_vec();
        let (qv, cell) = quantile(&col, config.q_level)?;
        let mass: f64 = col.iter().sum();
        quantile_term += (qv - config.q_target).powi(2);
        mass_term += (mass - config.mu * m as f64).powi(2);
        terms.push(TargetTerms {
            token: t,
            quantile: qv,
            quantile_cell: cell,
            mass,
        });
    }
    quantile_term *= inv_t;
    mass_term *= config.alpha * inv_t;
    let value = quantile_term + mass_term;
    if !value.is_finite() {
        return Err(Error::NonFinite { term: "error function" });
    }
    Ok(ErrorBreakdown {
        value,
        quantile_term,
        mass_term,
        targets: terms,
    })
}

fn frobenius_sq(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `E(head_mean(A')) + beta sqrt(||A' - A||_F^2 + eps)` over all heads and tokens.
pub fn total_loss(edited: &AttentionMap, original: &AttentionMap, config: &RegulationConfig) -> Result<f64> {
    if edited.values.dim() != original.values.dim() {
        return Err(Error::ShapeMismatch {
            context: "total_loss",
            expected: format!("{:?}", original.values.dim()),
            actual: format!("{:?}", edited.values.dim()),
        });
    }
    let e = error_e(edited.head_mean().view(), config)?.value;
    let prox = (frobenius_sq(&edited.values, &original.values) + FROBENIUS_EPS).sqrt();
    Ok(e + config.beta * prox)
}

/// Loss landscape of one layer at one step: fixed logits and unedited map,
/// variable edit weights for each target.
#[derive(Debug, Clone)]
pub struct LayerObjective<'a> {
    pub block: &'a LogitBlock,
    pub basis: &'a GaussianBasis,
    pub original: AttentionMap,
    pub config: &'a RegulationConfig,
}

/// Loss value, its pieces, and the edited map it was computed on.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub error: ErrorBreakdown,
    pub edited: AttentionMap,
}

impl<'a> LayerObjective<'a> {
    pub fn new(block: &'a LogitBlock, basis: &'a GaussianBasis, config: &'a RegulationConfig) -> Result<Self> {
        if basis.w != block.w {
            return Err(Error::ShapeMismatch {
                context: "basis grid vs logit block",
                expected: format!("w = {}", block.w),
                actual: format!("w = {}", basis.w),
            });
        }
        check_targets(&config.targets, block.tokens())?;
        let original = softmax_block(block, None)?;
        Ok(Self {
            block,
            basis,
            original,
            config,
        })
    }

    fn shift(&self, params: &[EditParams]) -> Result<Array2<f64>> {
        let mut full = Array2::zeros((self.block.cells(), self.block.tokens()));
        for p in params {
            if p.theta.dim() != (self.basis.r, self.basis.r) {
                return Err(Error::ShapeMismatch {
                    context: "theta",
                    expected: format!("{0}x{0}", self.basis.r),
                    actual: format!("{:?}", p.theta.dim()),
                });
            }
            if p.token >= self.block.tokens() {
                return Err(Error::IndexOutOfRange {
                    what: "target token",
                    index: p.token,
                    len: self.block.tokens(),
                });
            }
            full.column_mut(p.token).assign(&self.basis.perturbation_flat(&p.theta));
        }
        Ok(full)
    }

    pub fn evaluate(&self, params: &[EditParams]) -> Result<Evaluation> {
        let shift = self.shift(params)?;
        let edited = softmax_block(self.block, Some(shift.view()))?;
        let error = error_e(edited.head_mean().view(), self.config)?;
        let diff_sq = frobenius_sq(&edited.values, &self.original.values);
        let loss = error.value + self.config.beta * (diff_sq + FROBENIUS_EPS).sqrt();
        if !loss.is_finite() {
            return Err(Error::NonFinite { term: "total loss" });
        }
        Ok(Evaluation { loss, error, edited })
    }

    pub fn loss(&self, params: &[EditParams]) -> Result<f64> {
        Ok(self.evaluate(params)?.loss)
    }

    /// Loss and `dL/dtheta` for every entry of `params`, in the same order.
    pub fn loss_and_grad(&self, params: &[EditParams]) -> Result<(Evaluation, Vec<Array2<f64>>)> {
        let eval = self.evaluate(params)?;
        let (h, m, n) = self.block.logits.dim();
        let cfg = self.config;
        let inv_t = 1.0 / cfg.targets.len() as f64;
        let inv_h = 1.0 / h as f64;

        // dE/dĀ, nonzero only on target columns.
        let mut g_mean = Array2::<f64>::zeros((m, n));
        for term in &eval.error.targets {
            let mass_grad = 2.0 * cfg.alpha * inv_t * (term.mass - cfg.mu * m as f64);
            g_mean.column_mut(term.token).mapv_inplace(|v| v + mass_grad);
            g_mean[[term.quantile_cell, term.token]] += 2.0 * inv_t * (term.quantile - cfg.q_target);
        }

        let diff_sq = frobenius_sq(&eval.edited.values, &self.original.values);
        let prox_scale = cfg.beta / (diff_sq + FROBENIUS_EPS).sqrt();
        if !prox_scale.is_finite() {
            return Err(Error::NonFinite { term: "proximity gradient" });
        }

        // Back through the row softmax of each head; the shift is shared by heads.
        let scale = 1.0 / (self.block.d as f64).sqrt();
        let mut g_shift = Array2::<f64>::zeros((m, n));
        let mut g_row = vec![0.0; n];
        for (a_new, a_old) in eval.edited.values.outer_iter().zip(self.original.values.outer_iter()) {
            for row in 0..m {
                let mut dot = 0.0;
                for col in 0..n {
                    let g = inv_h * g_mean[[row, col]] + prox_scale * (a_new[[row, col]] - a_old[[row, col]]);
                    g_row[col] = g;
                    dot += a_new[[row, col]] * g;
                }
                for col in 0..n {
                    g_shift[[row, col]] += scale * a_new[[row, col]] * (g_row[col] - dot);
                }
            }
        }

        let mut grads = Vec::with_capacity(params.len());
        for p in params {
            let g_col: Array1<f64> = g_shift.column(p.token).to_owned();
            let g_flat = self.basis.flat().dot(&g_col);
            if g_flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { term: "theta gradient" });
            }
            grads.push(g_flat.into_shape_with_order((self.basis.r, self.basis.r)).expect("r^2 entries"));
        }
        Ok((eval, grads))
    }

    /// Whether every target's selected quantile element is separated from its
    /// sorted neighbours by more than `margin` at the given parameters.
    pub fn quantile_gap(&self, params: &[EditParams]) -> Result<f64> {
        let eval = self.evaluate(params)?;
        let mean = eval.edited.head_mean();
        let mut gap = f64::INFINITY;
        for &t in &self.config.targets {
            let col = mean.column(t).to_vec();
            let order = sorted_order(&col);
            let rank = quantile_rank(col.len(), self.config.q_level);
            let v = col[order[rank]];
            if rank > 0 {
                gap = gap.min(v - col[order[rank - 1]]);
            }
            if rank + 1 < col.len() {
                gap = gap.min(col[order[rank + 1]] - v);
            }
        }
        Ok(gap)
    }
}

/// Analytic `dL/dtheta` for every target's edit at the given logits.
pub fn grad_theta(
    block: &LogitBlock,
    basis: &GaussianBasis,
    params: &[EditParams],
    config: &RegulationConfig,
) -> Result<Vec<Array2<f64>>> {
    let objective = LayerObjective::new(block, basis, config)?;
    Ok(objective.loss_and_grad(params)?.1)
}
