//! Central finite-difference check of the analytic edit-weight gradient.
//!
//! The reference derivative only ever calls [`LayerObjective::loss`], so it is
//! independent of the backward pass it validates.

use ndarray::Array3;
use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::{LayerId, LogitBlock};
use crate::basis::{EditParams, GaussianBasis};
use crate::error::Result;
use crate::objective::{LayerObjective, RegulationConfig};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;
/// Minimum distance between the selected quantile element and its sorted
/// neighbours for a trial to count as tie-free.
pub const TIE_MARGIN: f64 = 1e-6;

/// A seeded gradient-check problem: `M = 64`, `N = 8`, two targets, `r = 4`.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub seed: u64,
    pub block: LogitBlock,
    pub basis: GaussianBasis,
    pub params: Vec<EditParams>,
    pub config: RegulationConfig,
}

impl GradcheckInstance {
    pub fn seeded(seed: u64, base: &RegulationConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, n, d) = (2, 8, 8, 8);
        let logits = Array3::from_shape_simple_fn((h, w * w, n), || 2.0 * rng.sample::<f64, _>(StandardNormal));
        let block = LogitBlock::new(logits, d, LayerId(0), w)?;
        let basis = GaussianBasis::new(w, 1)?;
        let mut targets: Vec<usize> = sample(&mut rng, n, 2).into_vec();
        targets.sort_unstable();
        let params = targets
            .iter()
            .map(|&t| {
                let mut p = EditParams::zeros(&basis, block.layer, t);
                p.theta.mapv_inplace(|_| rng.gen_range(-1.5..1.5));
                p
            })
            .collect();
        let config = RegulationConfig {
            targets,
            ..base.clone()
        };
        Ok(Self {
            seed,
            block,
            basis,
            params,
            config,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialOutcome {
    Checked { seed: u64, max_rel_err: f64, max_abs_err: f64 },
    Skipped { seed: u64, quantile_gap: f64 },
}

/// Largest relative error between analytic and central-difference gradients.
pub fn check_instance(inst: &GradcheckInstance, h: f64) -> Result<TrialOutcome> {
    let objective = LayerObjective::new(&inst.block, &inst.basis, &inst.config)?;
    let gap = objective.quantile_gap(&inst.params)?;
    if gap <= TIE_MARGIN {
        return Ok(TrialOutcome::Skipped {
            seed: inst.seed,
            quantile_gap: gap,
        });
    }
    let (_, analytic) = objective.loss_and_grad(&inst.params)?;
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut probe = inst.params.clone();
    for (k, grad) in analytic.iter().enumerate() {
        for (idx, &a) in grad.indexed_iter() {
            let orig = probe[k].theta[idx];
            probe[k].theta[idx] = orig + h;
            let up = objective.loss(&probe)?;
            probe[k].theta[idx] = orig - h;
            let down = objective.loss(&probe)?;
            probe[k].theta[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let abs = (a - fd).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / a.abs().max(fd.abs()).max(REL_FLOOR));
        }
    }
    Ok(TrialOutcome::Checked {
        seed: inst.seed,
        max_rel_err: max_rel,
        max_abs_err: max_abs,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub trials: Vec<TrialOutcome>,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// Runs seeds `first_seed..` until `trials` tie-free instances have been checked.
pub fn run_gradcheck(trials: usize, first_seed: u64, base: &RegulationConfig) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        trials: Vec::new(),
    };
    let mut seed = first_seed;
    while report.checked < trials {
        let inst = GradcheckInstance::seeded(seed, base)?;
        let outcome = check_instance(&inst, FD_STEP)?;
        match &outcome {
            TrialOutcome::Checked { max_rel_err, .. } => {
                report.checked += 1;
                report.max_rel_err = report.max_rel_err.max(*max_rel_err);
            }
            TrialOutcome::Skipped { .. } => report.skipped += 1,
        }
        report.trials.push(outcome);
        seed += 1;
    }
    Ok(report)
}
