//! Per-run attention statistics, latent trajectory and their on-disk form.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMap, LayerId};
use crate::error::{Error, Result};
use crate::schedule::LayerDescriptor;
use crate::toy::vocab::Prompt;

pub const ATTENTION_CSV_HEADER: &str = "step,layer,head,token,max,sum";

/// Wall-clock seconds per phase of one generation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_s: f64,
    /// Time spent inside attention hooks (regulators).
    pub hooks_s: f64,
}

/// Everything recorded about one generation.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub layers: Vec<LayerDescriptor>,
    pub prompt: Prompt,
    pub seed: u64,
    /// `(step, layer, head, token)` maximum of the token's map on the recorded branch.
    pub maxima: Array4<f64>,
    /// Same indexing; column sums, in `[0, M]`.
    pub sums: Array4<f64>,
    /// Initial latent followed by the latent after every step, each `M x C`.
    pub latents: Vec<Array2<f64>>,
    /// Every layer's map at the last step, in network order.
    pub final_maps: Vec<AttentionMap>,
    /// `[step][layer]` maps, kept only when requested.
    pub debug_maps: Option<Vec<Vec<AttentionMap>>>,
    pub timings: Timings,
    pub hook_summaries: Vec<serde_json::Value>,
}

impl RunRecord {
    pub fn steps(&self) -> usize {
        self.maxima.dim().0
    }

    pub fn heads(&self) -> usize {
        self.maxima.dim().2
    }

    pub fn tokens(&self) -> usize {
        self.maxima.dim().3
    }

    pub fn final_latent(&self) -> &Array2<f64> {
        self.latents.last().expect("initial latent always present")
    }

    /// Position of a layer in network order.
    pub fn layer_index(&self, layer: LayerId) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.id == layer)
            .ok_or_else(|| Error::MissingRecord(format!("layer {layer}")))
    }

    pub fn layer_by_name(&self, name: &str) -> Result<LayerId> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .map(|l| l.id)
            .ok_or_else(|| Error::MissingRecord(format!("layer {name}")))
    }

    pub fn write_attention_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{ATTENTION_CSV_HEADER}")?;
        for ((step, l, head, token), &max) in self.maxima.indexed_iter() {
            let sum = self.sums[[step, l, head, token]];
            writeln!(out, "{step},{},{head},{token},{max:.17e},{sum:.17e}", self.layers[l].id.0)?;
        }
        Ok(())
    }

    /// Writes `attention.csv` and `latents/step_####.pgm` under `dir`.
    /// Frame `0` is the initial latent.
    pub fn write_artifacts(&self, dir: &Path, decode: impl Fn(&Array2<f64>) -> Vec<u8>, side: usize) -> Result<()> {
        fs::create_dir_all(dir.join("latents"))?;
        let csv = fs::File::create(dir.join("attention.csv"))?;
        self.write_attention_csv(std::io::BufWriter::new(csv))?;
        for (i, z) in self.latents.iter().enumerate() {
            let path = dir.join("latents").join(format!("step_{i:04}.pgm"));
            write_pgm(&path, side, side, &decode(z))?;
        }
        Ok(())
    }
}

/// Binary (P5) portable graymap.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::ShapeMismatch {
            context: "pgm pixels",
            expected: format!("{}", width * height),
            actual: format!("{}", pixels.len()),
        });
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Parses a binary portable graymap written by [`write_pgm`].
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = || Error::Config(format!("{} is not a P5 graymap", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos + 1..).ok_or_else(bad)?;
    if data.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, data.to_vec()))
}
