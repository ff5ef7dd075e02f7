//! Plain gradient descent on the edit weights of one layer at one step.

use crate::attention::{AttentionMap, LogitBlock};
use crate::basis::{EditParams, GaussianBasis};
use crate::error::{Error, Result};
use crate::objective::{LayerObjective, RegulationConfig};

/// Window (in iterations) of the plateau rule.
pub const PLATEAU_WINDOW: usize = 3;
/// Abort when the loss exceeds this multiple of the initial loss.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    /// One entry per target token.
    pub params: Vec<EditParams>,
    pub iter: usize,
    /// Loss before each step, then the loss at the returned parameters.
    pub loss_history: Vec<f64>,
}

impl OptState {
    pub fn zeros(basis: &GaussianBasis, block: &LogitBlock, targets: &[usize]) -> Self {
        Self {
            params: targets.iter().map(|&t| EditParams::zeros(basis, block.layer, t)).collect(),
            iter: 0,
            loss_history: Vec::new(),
        }
    }
}

/// `theta <- theta - eta grad` for every target; records the pre-step loss.
pub fn optimize_step(state: &mut OptState, objective: &LayerObjective<'_>) -> Result<f64> {
    let (eval, grads) = objective.loss_and_grad(&state.params)?;
    let eta = objective.config.eta;
    for (p, g) in state.params.iter_mut().zip(&grads) {
        p.theta.scaled_add(-eta, g);
    }
    state.iter += 1;
    state.loss_history.push(eval.loss);
    Ok(eval.loss)
}

/// Result of one layer's optimization.
#[derive(Debug, Clone)]
pub struct Optimized {
    pub attention: AttentionMap,
    pub state: OptState,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Minimizes the regulation loss from `theta = 0`.
///
/// Stops at `max_iters` or when the relative improvement over the last
/// [`PLATEAU_WINDOW`] iterations drops below `tol`. The lowest-loss iterate is
/// returned, so the final loss never exceeds the initial one.
pub fn optimize(block: &LogitBlock, basis: &GaussianBasis, config: &RegulationConfig) -> Result<Optimized> {
    let objective = LayerObjective::new(block, basis, config)?;
    let mut state = OptState::zeros(basis, block, &config.targets);
    let mut best = (f64::INFINITY, state.params.clone());
    let mut initial = None;

    while state.iter < config.max_iters {
        let before = state.params.clone();
        let loss = optimize_step(&mut state, &objective)?;
        let init = *initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * init {
            return Err(Error::Diverged {
                iter: state.iter,
                loss,
                initial: init,
            });
        }
        if loss < best.0 {
            best = (loss, before);
        }
        let h = &state.loss_history;
        if h.len() > PLATEAU_WINDOW {
            let old = h[h.len() - 1 - PLATEAU_WINDOW];
            let rel = (old - loss) / old.abs().max(f64::MIN_POSITIVE);
            if rel < config.tol {
                break;
            }
        }
    }

    let eval = objective.evaluate(&state.params)?;
    let init = *initial.get_or_insert(eval.loss);
    if eval.loss > DIVERGENCE_FACTOR * init {
        return Err(Error::Diverged {
            iter: state.iter,
            loss: eval.loss,
            initial: init,
        });
    }
    let (final_loss, attention) = if eval.loss <= best.0 {
        (eval.loss, eval.edited)
    } else {
        state.params = best.1;
        let e = objective.evaluate(&state.params)?;
        (e.loss, e.edited)
    };
    state.loss_history.push(final_loss);
    Ok(Optimized {
        attention,
        state,
        initial_loss: init,
        final_loss,
    })
}
