//! Smooth logit perturbations built from a lattice of 2D Gaussian kernels.
//!
//! The edit added to a target token's logit column is `S = sum_pq theta[p,q] G_pq`
//! where `G_pq` is a Gaussian of width `sigma` centered at `(2 sigma p, 2 sigma q)`
//! (1-based). With `r = w / (2 sigma)` there are `r^2 = M / (4 sigma^2)` weights
//! per (layer, token) instead of `M`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};

use crate::attention::{softmax_block, AttentionMap, LayerId, LogitBlock};
use crate::error::{invalid, Error, Result};

/// `exp(-((i - y0)^2 + (j - x0)^2) / (2 sigma^2))` for `1 <= i, j <= w`.
pub fn gaussian_kernel(x0: usize, y0: usize, sigma: usize, w: usize) -> Result<Array2<f64>> {
    if sigma == 0 {
        return Err(invalid("sigma", "must be >= 1"));
    }
    if x0 == 0 || y0 == 0 || x0 > w || y0 > w {
        return Err(invalid("center", format!("({x0}, {y0}) outside 1..={w}")));
    }
    let two_s2 = 2.0 * (sigma * sigma) as f64;
    Ok(Array2::from_shape_fn((w, w), |(i0, j0)| {
        let di = (i0 + 1) as f64 - y0 as f64;
        let dj = (j0 + 1) as f64 - x0 as f64;
        (-(di * di + dj * dj) / two_s2).exp()
    }))
}

/// Default kernel width for a grid side: `max(1, w / 8)`, so `r = 2` at `w = 4`
/// and `r = 4` at `w = 8, 16`.
pub fn default_sigma(w: usize) -> Result<usize> {
    let sigma = (w / 8).max(1);
    if w % (2 * sigma) != 0 {
        return Err(invalid("w", format!("no admissible sigma for grid side {w}")));
    }
    Ok(sigma)
}

/// The `r x r` lattice of kernels for one grid side.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBasis {
    pub w: usize,
    pub sigma: usize,
    pub r: usize,
    /// Kernel `(p, q)` (0-based) lives at index `p * r + q`.
    pub kernels: Vec<Array2<f64>>,
    /// Same kernels flattened row-major, shape `r^2 x M`.
    flat: Array2<f64>,
}

impl GaussianBasis {
    pub fn new(w: usize, sigma: usize) -> Result<Self> {
        if sigma == 0 || w == 0 || w % (2 * sigma) != 0 {
            return Err(invalid("sigma", format!("2*sigma = {} must divide w = {w}", 2 * sigma)));
        }
        let r = w / (2 * sigma);
        let mut kernels = Vec::with_capacity(r * r);
        for p in 1..=r {
            for q in 1..=r {
                kernels.push(gaussian_kernel(2 * sigma * p, 2 * sigma * q, sigma, w)?);
            }
        }
        let m = w * w;
        let mut flat = Array2::zeros((r * r, m));
        for (k, kern) in kernels.iter().enumerate() {
            for (dst, &src) in flat.row_mut(k).iter_mut().zip(kern.iter()) {
                *dst = src;
            }
        }
        Ok(Self { w, sigma, r, kernels, flat })
    }

    pub fn for_grid(w: usize) -> Result<Self> {
        Self::new(w, default_sigma(w)?)
    }

    pub fn num_params(&self) -> usize {
        self.r * self.r
    }

    /// Flattened kernels, `r^2 x M`.
    pub fn flat(&self) -> &Array2<f64> {
        &self.flat
    }

    /// Flattened perturbation `S` (length `M`) for a weight grid.
    pub(crate) fn perturbation_flat(&self, theta: &Array2<f64>) -> Array1<f64> {
        let weights = ArrayView1::from_shape(self.r * self.r, theta.as_slice().expect("standard layout"))
            .expect("theta shape checked");
        weights.dot(&self.flat)
    }
}

/// Learnable edit for one (layer, target token).
#[derive(Debug, Clone, PartialEq)]
pub struct EditParams {
    pub theta: Array2<f64>,
    pub sigma: usize,
    pub layer: LayerId,
    pub token: usize,
}

impl EditParams {
    pub fn zeros(basis: &GaussianBasis, layer: LayerId, token: usize) -> Self {
        Self {
            theta: Array2::zeros((basis.r, basis.r)),
            sigma: basis.sigma,
            layer,
            token,
        }
    }

    fn check(&self, basis: &GaussianBasis) -> Result<()> {
        if self.theta.dim() != (basis.r, basis.r) || self.sigma != basis.sigma {
            return Err(Error::ShapeMismatch {
                context: "edit params vs basis",
                expected: format!("theta {}x{} with sigma {}", basis.r, basis.r, basis.sigma),
                actual: format!("theta {:?} with sigma {}", self.theta.dim(), self.sigma),
            });
        }
        if self.theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: "theta" });
        }
        Ok(())
    }
}

/// `S = sum_pq theta[p,q] G(2 sigma p, 2 sigma q, sigma)`, a `w x w` grid.
pub fn build_perturbation(params: &EditParams, basis: &GaussianBasis) -> Result<Array2<f64>> {
    params.check(basis)?;
    let mut s = Array2::zeros((basis.w, basis.w));
    for (k, kern) in basis.kernels.iter().enumerate() {
        let weight = params.theta[[k / basis.r, k % basis.r]];
        s.scaled_add(weight, kern);
    }
    Ok(s)
}

/// Softmax of `(QK^T + S_full) / sqrt(d)` where column `t` of `S_full` is the
/// flattened `S_t` for each target and zero elsewhere. All heads share `S_full`.
pub fn apply_edit(block: &LogitBlock, edits: &BTreeMap<usize, Array2<f64>>) -> Result<AttentionMap> {
    let (m, n) = (block.cells(), block.tokens());
    let mut full = Array2::<f64>::zeros((m, n));
    for (&token, s) in edits {
        if token >= n {
            return Err(Error::IndexOutOfRange {
                what: "target token",
                index: token,
                len: n,
            });
        }
        if s.len() != m {
            return Err(Error::ShapeMismatch {
                context: "apply_edit perturbation",
                expected: format!("{} cells", m),
                actual: format!("{} cells", s.len()),
            });
        }
        for (cell, &v) in s.iter().enumerate() {
            full[[cell, token]] = v;
        }
    }
    softmax_block(block, Some(full.view()))
}

/// Builds every target's perturbation and applies them in one pass.
pub fn apply_params(block: &LogitBlock, params: &[EditParams], basis: &GaussianBasis) -> Result<AttentionMap> {
    let mut edits = BTreeMap::new();
    for p in params {
        edits.insert(p.token, build_perturbation(p, basis)?);
    }
    apply_edit(block, &edits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::compute_attention;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_peaks_at_center() {
        let k = gaussian_kernel(3, 2, 1, 4).unwrap();
        assert_eq!(k[[1, 2]], 1.0);
        assert!(k.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn kernel_closed_form_corner() {
        let k = gaussian_kernel(2, 2, 1, 4).unwrap();
        assert!((k[[0, 0]] - (-1.0f64).exp()).abs() < 1e-15);
        assert!((k[[0, 0]] - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn kernel_rejects_outside_center() {
        assert!(gaussian_kernel(0, 1, 1, 4).is_err());
        assert!(gaussian_kernel(5, 1, 1, 4).is_err());
        assert!(gaussian_kernel(1, 1, 0, 4).is_err());
    }

    #[test]
    fn kernel_w8_sigma2_matches_elementwise() {
        let k = gaussian_kernel(4, 8, 2, 8).unwrap();
        for i in 1..=8 {
            for j in 1..=8 {
                let e = (-((i as f64 - 8.0).powi(2) + (j as f64 - 4.0).powi(2)) / 8.0).exp();
                assert!((k[[i - 1, j - 1]] - e).abs() < 1e-15);
            }
        }
        // symmetric about the center column
        for i in 0..8 {
            assert_eq!(k[[i, 2]], k[[i, 4]]);
        }
    }

    #[test]
    fn default_sigma_gives_expected_lattice() {
        assert_eq!(GaussianBasis::for_grid(4).unwrap().r, 2);
        assert_eq!(GaussianBasis::for_grid(8).unwrap().r, 4);
        assert_eq!(GaussianBasis::for_grid(16).unwrap().r, 4);
        assert!(GaussianBasis::new(8, 3).is_err());
    }

    #[test]
    fn parameter_count_is_m_over_4_sigma_sq() {
        for (w, s) in [(4, 1), (8, 1), (8, 2), (16, 2), (16, 4)] {
            let b = GaussianBasis::new(w, s).unwrap();
            assert_eq!(b.num_params(), w * w / (4 * s * s));
        }
    }

    #[test]
    fn zero_theta_gives_zero_perturbation() {
        let b = GaussianBasis::new(8, 1).unwrap();
        let s = build_perturbation(&EditParams::zeros(&b, LayerId(0), 0), &b).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_theta_reproduces_kernel() {
        let b = GaussianBasis::new(8, 1).unwrap();
        let mut p = EditParams::zeros(&b, LayerId(0), 0);
        p.theta[[1, 2]] = 1.0;
        let s = build_perturbation(&p, &b).unwrap();
        assert_eq!(s, gaussian_kernel(4, 6, 1, 8).unwrap());
    }

    #[test]
    fn seeded_perturbation_matches_double_loop() {
        let b = GaussianBasis::new(8, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = EditParams::zeros(&b, LayerId(0), 0);
        p.theta.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let s = build_perturbation(&p, &b).unwrap();
        for i in 1..=8usize {
            for j in 1..=8usize {
                let mut acc = 0.0;
                for pp in 1..=4usize {
                    for qq in 1..=4usize {
                        let (x0, y0) = (2 * pp, 2 * qq);
                        let g = (-(((i as f64) - y0 as f64).powi(2) + ((j as f64) - x0 as f64).powi(2)) / 2.0).exp();
                        acc += p.theta[[pp - 1, qq - 1]] * g;
                    }
                }
                assert!((s[[i - 1, j - 1]] - acc).abs() < 1e-13);
            }
        }
        // flat path agrees with the grid path
        let flat = b.perturbation_flat(&p.theta);
        for (a, c) in flat.iter().zip(s.iter()) {
            assert!((a - c).abs() < 1e-13);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let b = GaussianBasis::new(8, 1).unwrap();
        let p = EditParams {
            theta: Array2::zeros((2, 2)),
            sigma: 1,
            layer: LayerId(0),
            token: 0,
        };
        assert!(build_perturbation(&p, &b).is_err());
    }

    fn seeded_block(seed: u64) -> LogitBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Array3::from_shape_fn((2, 16, 5), |_| rng.gen_range(-2.0..2.0));
        LogitBlock::new(logits, 4, LayerId(1), 4).unwrap()
    }

    #[test]
    fn zero_edit_is_bitwise_identity() {
        let block = seeded_block(3);
        let b = GaussianBasis::for_grid(4).unwrap();
        let params = vec![EditParams::zeros(&b, LayerId(1), 1), EditParams::zeros(&b, LayerId(1), 3)];
        let edited = apply_params(&block, &params, &b).unwrap();
        assert_eq!(edited, compute_attention(&block).unwrap());
    }

    #[test]
    fn large_shift_saturates_cell() {
        let block = seeded_block(4);
        let mut s = Array2::zeros((4, 4));
        s[[2, 1]] = 50.0 * 2.0; // /sqrt(d) = 50
        let edits = BTreeMap::from([(2usize, s)]);
        let a = apply_edit(&block, &edits).unwrap();
        for h in 0..2 {
            assert!((a.values[[h, 9, 2]] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn out_of_range_target_rejected() {
        let block = seeded_block(5);
        let edits = BTreeMap::from([(5usize, Array2::zeros((4, 4)))]);
        assert!(apply_edit(&block, &edits).is_err());
    }

    #[test]
    fn composed_edit_matches_reference() {
        let block = seeded_block(6);
        let b = GaussianBasis::for_grid(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut p = EditParams::zeros(&b, LayerId(1), 2);
        p.theta.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
        let a = apply_params(&block, &[p.clone()], &b).unwrap();
        let s = build_perturbation(&p, &b).unwrap();
        let scale = 0.5;
        for h in 0..2 {
            for m in 0..16 {
                let z: Vec<f64> = (0..5)
                    .map(|n| (block.logits[[h, m, n]] + if n == 2 { s[[m / 4, m % 4]] } else { 0.0 }) * scale)
                    .collect();
                let denom: f64 = z.iter().map(|v| v.exp()).sum();
                for n in 0..5 {
                    assert!((a.values[[h, m, n]] - z[n].exp() / denom).abs() < 1e-13);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn perturbation_is_linear(a in proptest::collection::vec(-5.0f64..5.0, 16), c in proptest::collection::vec(-5.0f64..5.0, 16)) {
            let b = GaussianBasis::new(8, 1).unwrap();
            let mk = |v: &[f64]| EditParams { theta: Array2::from_shape_vec((4, 4), v.to_vec()).unwrap(), sigma: 1, layer: LayerId(0), token: 0 };
            let sum: Vec<f64> = a.iter().zip(&c).map(|(x, y)| x + y).collect();
            let lhs = build_perturbation(&mk(&sum), &b).unwrap();
            let rhs = build_perturbation(&mk(&a), &b).unwrap() + build_perturbation(&mk(&c), &b).unwrap();
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn edited_rows_stay_stochastic(theta in proptest::collection::vec(-30.0f64..30.0, 4), seed in 0u64..1000) {
            let block = seeded_block(seed);
            let b = GaussianBasis::for_grid(4).unwrap();
            let p = EditParams { theta: Array2::from_shape_vec((2, 2), theta).unwrap(), sigma: 1, layer: LayerId(1), token: 0 };
            let a = apply_params(&block, &[p], &b).unwrap();
            prop_assert!(a.check_row_stochastic(1e-9).is_ok());
        }
    }
}
