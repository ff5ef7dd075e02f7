//! Dominance diagnostics, coverage proxy, overhead accounting and the
//! min-of-max detection score.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, LayerId};
use crate::error::{invalid, Error, Result};
use crate::objective::quantile;
use crate::record::RunRecord;

pub const HEAD_MAX_CSV_HEADER: &str = "layer,step,token,head,max";

/// Per-head maxima of every token's map at one layer and step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMaxStats {
    pub layer: LayerId,
    pub step: usize,
    /// `per_token[t][h]`.
    pub per_token: Vec<Vec<f64>>,
}

impl HeadMaxStats {
    pub fn head_mean(&self, token: usize) -> Result<f64> {
        let heads = self.per_token.get(token).ok_or(Error::IndexOutOfRange {
            what: "token",
            index: token,
            len: self.per_token.len(),
        })?;
        Ok(heads.iter().sum::<f64>() / heads.len() as f64)
    }

    /// Long-format rows for violin and strip plots.
    pub fn write_csv(&self, mut out: impl Write, header: bool) -> Result<()> {
        if header {
            writeln!(out, "{HEAD_MAX_CSV_HEADER}")?;
        }
        for (t, heads) in self.per_token.iter().enumerate() {
            for (h, v) in heads.iter().enumerate() {
                writeln!(out, "{},{},{t},{h},{v:.17e}", self.layer.0, self.step)?;
            }
        }
        Ok(())
    }
}

pub fn head_max_stats(record: &RunRecord, layer: LayerId, step: usize) -> Result<HeadMaxStats> {
    let l = record.layer_index(layer)?;
    if step >= record.steps() {
        return Err(Error::MissingRecord(format!("step {step} (run has {})", record.steps())));
    }
    let per_token = (0..record.tokens())
        .map(|t| (0..record.heads()).map(|h| record.maxima[[step, l, h, t]]).collect())
        .collect();
    Ok(HeadMaxStats { layer, step, per_token })
}

/// Largest head-averaged target maximum over the mean of them; `1` when all
/// are equal, including all zero.
pub fn dominance_index(stats: &HeadMaxStats, targets: &[usize]) -> Result<f64> {
    if targets.len() < 2 {
        return Err(invalid("targets", format!("need at least 2, got {}", targets.len())));
    }
    let means = targets.iter().map(|&t| stats.head_mean(t)).collect::<Result<Vec<_>>>()?;
    let top = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let avg = means.iter().sum::<f64>() / means.len() as f64;
    if top <= avg {
        return Ok(1.0);
    }
    Ok(top / avg)
}

/// Fraction of (map, target) pairs whose head-averaged 0.9-quantile reaches
/// `threshold`.
pub fn target_coverage(maps: &[AttentionMap], targets: &[usize], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(invalid("threshold", format!("{threshold} not in (0, 1)")));
    }
    if maps.is_empty() || targets.is_empty() {
        return Err(Error::Empty("coverage maps or targets"));
    }
    let mut hit = 0usize;
    for map in maps {
        let mean = map.head_mean();
        for &t in targets {
            if t >= mean.ncols() {
                return Err(Error::IndexOutOfRange {
                    what: "target",
                    index: t,
                    len: mean.ncols(),
                });
            }
            let col: Vec<f64> = mean.column(t).to_vec();
            if quantile(&col, 0.9)?.0 >= threshold {
                hit += 1;
            }
        }
    }
    Ok(hit as f64 / (maps.len() * targets.len()) as f64)
}

/// Head-averaged 0.9-quantile of each target, averaged over maps and targets.
pub fn mean_target_quantile(maps: &[AttentionMap], targets: &[usize]) -> Result<f64> {
    if maps.is_empty() || targets.is_empty() {
        return Err(Error::Empty("quantile maps or targets"));
    }
    let mut acc = 0.0;
    for map in maps {
        let mean = map.head_mean();
        for &t in targets {
            let col: Vec<f64> = mean.column(t).to_vec();
            acc += quantile(&col, 0.9)?.0;
        }
    }
    Ok(acc / (maps.len() * targets.len()) as f64)
}

/// Relative extra time, `(t_reg - t_base) / t_base`.
pub fn overhead(t_reg: f64, t_base: f64) -> Result<f64> {
    if !(t_base > 0.0 && t_base.is_finite()) {
        return Err(invalid("t_base", format!("{t_base} is not a positive time")));
    }
    if !(t_reg >= 0.0 && t_reg.is_finite()) {
        return Err(invalid("t_reg", format!("{t_reg} is not a time")));
    }
    Ok((t_reg - t_base) / t_base)
}

/// Frobenius distance between two latents.
pub fn latent_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context: "latent distance",
            expected: format!("{:?}", a.dim()),
            actual: format!("{:?}", b.dim()),
        });
    }
    Ok((a - b).mapv(|v| v * v).sum().sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Pixel rectangle, half-open on the right and bottom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub similarity: f64,
}

/// Open-vocabulary detector paired with an image-text similarity model.
pub trait ScoreBackend {
    fn capabilities(&self) -> &str;

    /// Boxes found for `label`, each with its crop's similarity in `[0, 1]`.
    fn locate(&self, image: &GrayImage, label: &str) -> Result<Vec<Detection>>;
}

/// Best similarity over the boxes found for `label`; `0` when none are found.
pub fn object_score(image: &GrayImage, label: &str, backend: &dyn ScoreBackend) -> Result<f64> {
    let found = backend.locate(image, label)?;
    let mut best = 0.0f64;
    for d in &found {
        if !(0.0..=1.0).contains(&d.similarity) {
            return Err(Error::Backend(format!(
                "similarity {} for `{label}` outside [0, 1]",
                d.similarity
            )));
        }
        best = best.max(d.similarity);
    }
    Ok(best)
}

/// Weakest object's score. Backend failures propagate as errors, never as `0`.
pub fn composite_score(image: &GrayImage, objects: &[&str], backend: &dyn ScoreBackend) -> Result<f64> {
    if objects.is_empty() {
        return Err(Error::Empty("object list"));
    }
    let mut worst = f64::INFINITY;
    for label in objects {
        worst = worst.min(object_score(image, label, backend)?);
    }
    Ok(worst)
}

/// Backend that replays detections from a fixture, ignoring pixels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureBackend {
    pub detections: BTreeMap<String, Vec<Detection>>,
    /// Labels whose lookup fails.
    pub failing: Vec<String>,
}

impl FixtureBackend {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl ScoreBackend for FixtureBackend {
    fn capabilities(&self) -> &str {
        "fixture"
    }

    fn locate(&self, _image: &GrayImage, label: &str) -> Result<Vec<Detection>> {
        if self.failing.iter().any(|l| l == label) {
            return Err(Error::Backend(format!("fixture marks `{label}` as failing")));
        }
        Ok(self.detections.get(label).cloned().unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Axis};

    fn stats(per_token: Vec<Vec<f64>>) -> HeadMaxStats {
        HeadMaxStats {
            layer: LayerId(0),
            step: 0,
            per_token,
        }
    }

    #[test]
    fn dominance_examples() {
        let s = stats(vec![vec![0.8], vec![0.2], vec![0.5]]);
        assert!((dominance_index(&s, &[0, 1]).unwrap() - 1.6).abs() < 1e-15);
        assert_eq!(dominance_index(&s, &[2, 2]).unwrap(), 1.0);
        assert!(dominance_index(&s, &[0]).is_err());
        assert!(dominance_index(&s, &[]).is_err());
        let zero = stats(vec![vec![0.0, 0.0]; 2]);
        assert_eq!(dominance_index(&zero, &[0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn coverage_extremes() {
        let mut values = Array3::from_elem((2, 16, 3), 0.0);
        values.index_axis_mut(Axis(2), 0).fill(0.9);
        values.index_axis_mut(Axis(2), 1).fill(0.1);
        let map = AttentionMap {
            values,
            layer: LayerId(0),
            w: 4,
        };
        assert_eq!(target_coverage(std::slice::from_ref(&map), &[0], 0.5).unwrap(), 1.0);
        assert_eq!(target_coverage(std::slice::from_ref(&map), &[1, 2], 0.5).unwrap(), 0.0);
        assert_eq!(target_coverage(std::slice::from_ref(&map), &[0, 1], 0.5).unwrap(), 0.5);
        assert!(target_coverage(std::slice::from_ref(&map), &[0], 1.0).is_err());
    }

    #[test]
    fn overhead_examples() {
        assert_eq!(overhead(2.0, 2.0).unwrap(), 0.0);
        assert!((overhead(1.488, 1.0).unwrap() - 0.488).abs() < 1e-12);
        assert!(overhead(1.0, 0.0).is_err());
    }

    #[test]
    fn backend_failure_is_not_zero() {
        let img = GrayImage {
            width: 1,
            height: 1,
            pixels: vec![0],
        };
        let backend = FixtureBackend {
            failing: vec!["cat".into()],
            ..Default::default()
        };
        assert_eq!(composite_score(&img, &["dog"], &backend).unwrap(), 0.0);
        assert!(matches!(composite_score(&img, &["dog", "cat"], &backend), Err(Error::Backend(_))));
    }
}
