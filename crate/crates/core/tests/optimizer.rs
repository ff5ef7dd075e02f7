use attnreg_core::basis::default_sigma;
use attnreg_core::gradcheck::{check_instance, run_gradcheck, GradcheckInstance, TrialOutcome, FD_STEP};
use attnreg_core::instances::suppressed_instance;
use attnreg_core::*;
use ndarray::{Array2, Array3};

fn q90(a: &AttentionMap, token: usize) -> f64 {
    quantile(&a.head_mean().column(token).to_vec(), 0.9).unwrap().0
}

/// Central differences of the loss alone, independent of the backward pass.
fn fd_grad(obj: &LayerObjective<'_>, params: &[EditParams], which: usize) -> Array2<f64> {
    let mut g = Array2::zeros(params[which].theta.dim());
    for idx in 0..g.len() {
        let (i, j) = (idx / g.ncols(), idx % g.ncols());
        let mut plus = params.to_vec();
        plus[which].theta[[i, j]] += FD_STEP;
        let mut minus = params.to_vec();
        minus[which].theta[[i, j]] -= FD_STEP;
        g[[i, j]] = (obj.loss(&plus).unwrap() - obj.loss(&minus).unwrap()) / (2.0 * FD_STEP);
    }
    g
}

#[test]
fn zero_learning_rate_keeps_theta() {
    let inst = GradcheckInstance::seeded(3, &RegulationConfig::default()).unwrap();
    let cfg = RegulationConfig { eta: 0.0, ..inst.config.clone() };
    let obj = LayerObjective::new(&inst.block, &inst.basis, &cfg).unwrap();
    let mut state = OptState::zeros(&inst.basis, &inst.block, &cfg.targets);
    state.params = inst.params.clone();
    optimize_step(&mut state, &obj).unwrap();
    assert_eq!(state.params, inst.params);
}

#[test]
fn one_step_moves_against_finite_difference_gradient() {
    let inst = GradcheckInstance::seeded(5, &RegulationConfig::default()).unwrap();
    let obj = LayerObjective::new(&inst.block, &inst.basis, &inst.config).unwrap();
    let mut state = OptState::zeros(&inst.basis, &inst.block, &inst.config.targets);
    state.params = inst.params.clone();
    let expected: Vec<Array2<f64>> = (0..inst.params.len())
        .map(|k| &inst.params[k].theta - &(fd_grad(&obj, &inst.params, k) * inst.config.eta))
        .collect();
    optimize_step(&mut state, &obj).unwrap();
    for (p, e) in state.params.iter().zip(&expected) {
        for (a, b) in p.theta.iter().zip(e.iter()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}

/// Saturated target column: its softmax entries are exactly 1, so every
/// derivative through them is exactly 0.
fn saturated_block() -> LogitBlock {
    let (w, n) = (16, 3);
    let mut logits = Array3::<f64>::zeros((1, w * w, n));
    for m in 0..w * w {
        logits[[0, m, 1]] = 2000.0;
        logits[[0, m, 0]] = (m % 7) as f64;
    }
    LogitBlock::new(logits, 4, LayerId(0), w).unwrap()
}

#[test]
fn flat_direction_has_zero_gradient() {
    let block = saturated_block();
    let basis = GaussianBasis::new(16, 1).unwrap();
    let cfg = RegulationConfig {
        alpha: 0.0,
        beta: 0.0,
        targets: vec![1],
        ..Default::default()
    };
    let params = vec![EditParams::zeros(&basis, block.layer, 1)];
    let g = grad_theta(&block, &basis, &params, &cfg).unwrap();
    assert!(g[0].iter().all(|&v| v == 0.0));
    let out = optimize(&block, &basis, &cfg).unwrap();
    assert!(out.state.params[0].theta.iter().all(|&v| v == 0.0));
    assert_eq!(out.final_loss, out.initial_loss);
}

#[test]
fn quantile_tie_is_skipped() {
    let block = saturated_block();
    let basis = GaussianBasis::new(16, 1).unwrap();
    let cfg = RegulationConfig {
        alpha: 0.0,
        beta: 0.0,
        targets: vec![1],
        ..Default::default()
    };
    let inst = GradcheckInstance {
        seed: 0,
        params: vec![EditParams::zeros(&basis, block.layer, 1)],
        block,
        basis,
        config: cfg,
    };
    let outcome = check_instance(&inst, FD_STEP).unwrap();
    assert_eq!(outcome, TrialOutcome::Skipped { seed: 0, quantile_gap: 0.0 });
}

/// Two tokens on a 4x4 grid; target column has three cells at 0.9 and the
/// rest sharing 0.5, so its 0.9-quantile is 0.9 and its mass is 0.2 M.
fn satisfied_block() -> LogitBlock {
    let (w, d) = (4usize, 4usize);
    let mut logits = Array3::<f64>::zeros((1, w * w, 2));
    let logit = |p: f64| (p / (1.0 - p)).ln() * (d as f64).sqrt();
    for m in 0..w * w {
        let p = if m % 5 == 0 && m < 15 { 0.9 } else { 0.5 / 13.0 };
        logits[[0, m, 0]] = logit(p);
    }
    LogitBlock::new(logits, d, LayerId(0), w).unwrap()
}

#[test]
fn satisfied_targets_stay_put() {
    let block = satisfied_block();
    let a = compute_attention(&block).unwrap();
    let cfg = RegulationConfig {
        targets: vec![0],
        ..Default::default()
    };
    assert!(error_e(a.head_mean().view(), &cfg).unwrap().value < 1e-20);
    let basis = GaussianBasis::new(4, default_sigma(4).unwrap()).unwrap();
    let out = optimize(&block, &basis, &cfg).unwrap();
    let dist = (&out.attention.values - &a.values).mapv(|v| v * v).sum().sqrt();
    assert!(dist < 1e-6, "moved by {dist}");
}

#[test]
fn suppressed_instance_improves() {
    let inst = suppressed_instance(13).unwrap();
    let cfg = RegulationConfig {
        targets: inst.targets(),
        ..Default::default()
    };
    let basis = GaussianBasis::new(inst.block.w, default_sigma(inst.block.w).unwrap()).unwrap();
    let out = optimize(&inst.block, &basis, &cfg).unwrap();
    assert!(out.final_loss < out.initial_loss);
    let before = compute_attention(&inst.block).unwrap();
    assert!(q90(&out.attention, inst.suppressed) > q90(&before, inst.suppressed));
}

#[test]
fn optimization_is_deterministic() {
    let inst = suppressed_instance(4).unwrap();
    let cfg = RegulationConfig {
        targets: inst.targets(),
        ..Default::default()
    };
    let basis = GaussianBasis::new(inst.block.w, 1).unwrap();
    let a = optimize(&inst.block, &basis, &cfg).unwrap();
    let b = optimize(&inst.block, &basis, &cfg).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.attention.values, b.attention.values);
}

#[test]
fn first_iterate_is_the_unedited_map() {
    let inst = suppressed_instance(9).unwrap();
    let cfg = RegulationConfig {
        targets: inst.targets(),
        ..Default::default()
    };
    let basis = GaussianBasis::new(inst.block.w, 1).unwrap();
    let obj = LayerObjective::new(&inst.block, &basis, &cfg).unwrap();
    let zeros = OptState::zeros(&basis, &inst.block, &cfg.targets);
    let eval = obj.evaluate(&zeros.params).unwrap();
    assert_eq!(eval.edited.values, compute_attention(&inst.block).unwrap().values);
    let out = optimize(&inst.block, &basis, &cfg).unwrap();
    assert_eq!(out.state.loss_history[0], eval.loss);
}

#[test]
fn huge_step_diverges() {
    let inst = suppressed_instance(1).unwrap();
    let cfg = RegulationConfig {
        targets: inst.targets(),
        eta: 1e7,
        beta: 50.0,
        ..Default::default()
    };
    let basis = GaussianBasis::new(inst.block.w, 1).unwrap();
    assert!(matches!(optimize(&inst.block, &basis, &cfg), Err(Error::Diverged { .. })));
}

#[test]
fn small_gradcheck_suite() {
    let report = run_gradcheck(8, 100, &RegulationConfig::default()).unwrap();
    assert_eq!(report.checked, 8);
    assert!(report.passed(1e-4), "max rel err {}", report.max_rel_err);
}
