//! Seeded dominance suite, paired regulated/unregulated runs, and parameter
//! sweeps over that suite.
//!
//! Each suite case biases the first word of a two-word prompt by
//! [`DOMINANCE_MAGNITUDE`] and regulates both words. Head maxima are read at
//! the first up-sampling layer at the final step; coverage is read on the
//! default edited layers.

use std::fmt;
use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::attention::LayerId;
use crate::error::{invalid, Error, Result};
use crate::metrics::{dominance_index, head_max_stats, latent_distance, mean_target_quantile, overhead, target_coverage};
use crate::record::RunRecord;
use crate::schedule::select_layers;
use crate::toy::{run_generation, DominanceBias, ModelConfig, Prompt, Regulation, RegulatorKind, SamplerConfig, ToyModel};

pub const DOMINANCE_MAGNITUDE: f64 = 3.0;
pub const COVERAGE_THRESHOLD: f64 = 0.5;

pub const DOMINANCE_PAIRS: [(&str, &str); 10] = [
    ("elephant", "glasses"),
    ("cat", "crown"),
    ("dog", "hat"),
    ("frog", "apple"),
    ("bear", "book"),
    ("turtle", "clock"),
    ("horse", "balloon"),
    ("bird", "bowl"),
    ("leopard", "camera"),
    ("lemon", "guitar"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteCase {
    pub dominant: String,
    pub suppressed: String,
    pub seed: u64,
}

/// Ten cases; case `i` runs with seed `i`.
pub fn dominance_suite() -> Vec<SuiteCase> {
    DOMINANCE_PAIRS
        .iter()
        .enumerate()
        .map(|(i, (a, b))| SuiteCase {
            dominant: a.to_string(),
            suppressed: b.to_string(),
            seed: i as u64,
        })
        .collect()
}

impl SuiteCase {
    pub fn text(&self) -> String {
        format!("{} {}", self.dominant, self.suppressed)
    }

    /// `base` with the dominance bias on this case's first word.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.dominance_bias = vec![DominanceBias {
            token: self.dominant.clone(),
            magnitude: DOMINANCE_MAGNITUDE,
        }];
        cfg
    }

    pub fn prompt(&self, max_tokens: usize) -> Result<Prompt> {
        Prompt::parse(&self.text(), max_tokens)
    }

    /// `(dominant, suppressed)` prompt positions.
    pub fn targets(&self, prompt: &Prompt) -> Result<(usize, usize)> {
        Ok((prompt.position_of(&self.dominant)?, prompt.position_of(&self.suppressed)?))
    }
}

/// Layer where head maxima are compared.
pub fn evaluation_layer(model: &ToyModel) -> Result<LayerId> {
    model
        .layout()
        .iter()
        .find(|l| l.name == "u0")
        .map(|l| l.id)
        .ok_or_else(|| Error::MissingRecord("layer u0".into()))
}

/// Statistics of one run of one case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseStats {
    pub dominant_max: f64,
    pub suppressed_max: f64,
    /// Largest head-averaged maximum among the other non-special tokens.
    pub other_max: f64,
    pub dominance_index: f64,
    pub target_coverage: f64,
    pub mean_quantile: f64,
    pub seconds: f64,
}

pub fn case_stats(model: &ToyModel, record: &RunRecord, targets: (usize, usize)) -> Result<CaseStats> {
    let eval = evaluation_layer(model)?;
    let last = record.steps() - 1;
    let stats = head_max_stats(record, eval, last)?;
    let pair = [targets.0, targets.1];
    let used = record.prompt.used;
    let mut other_max = 0.0f64;
    for t in 1..used.saturating_sub(1) {
        if t != targets.0 && t != targets.1 {
            other_max = other_max.max(stats.head_mean(t)?);
        }
    }
    let cover_layers = select_layers(&record.layers, None)?;
    let maps: Vec<_> = record
        .final_maps
        .iter()
        .filter(|m| cover_layers.contains(&m.layer))
        .cloned()
        .collect();
    Ok(CaseStats {
        dominant_max: stats.head_mean(targets.0)?,
        suppressed_max: stats.head_mean(targets.1)?,
        other_max,
        dominance_index: dominance_index(&stats, &pair)?,
        target_coverage: target_coverage(&maps, &pair, COVERAGE_THRESHOLD)?,
        mean_quantile: mean_target_quantile(&maps, &pair)?,
        seconds: record.timings.total_s,
    })
}

/// Regulated and unregulated runs of one case from the same latent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedOutcome {
    pub case: SuiteCase,
    pub base: CaseStats,
    pub regulated: CaseStats,
    pub latent_l2: f64,
}

impl PairedOutcome {
    pub fn suppressed_increased(&self) -> bool {
        self.regulated.suppressed_max > self.base.suppressed_max
    }

    pub fn index_decreased(&self) -> bool {
        self.regulated.dominance_index < self.base.dominance_index
    }

    /// The biased word out-attends every other non-special word when unregulated.
    pub fn dominance_shown(&self) -> bool {
        self.base.dominant_max > self.base.suppressed_max && self.base.dominant_max > self.base.other_max
    }
}

/// `regulation` with both suite words as targets.
fn case_regulation(template: &Regulation, targets: (usize, usize)) -> Regulation {
    let mut r = template.clone();
    r.config.targets = vec![targets.0, targets.1];
    r
}

pub fn paired_run(
    model_cfg: &ModelConfig,
    sampler: &SamplerConfig,
    regulation: &Regulation,
    case: &SuiteCase,
) -> Result<PairedOutcome> {
    let model = ToyModel::new(case.model_config(model_cfg))?;
    let prompt = case.prompt(model.config.max_tokens)?;
    let targets = case.targets(&prompt)?;
    let base = run_generation(&model, &prompt, sampler, None, case.seed)?;
    let reg = run_generation(&model, &prompt, sampler, Some(&case_regulation(regulation, targets)), case.seed)?;
    Ok(PairedOutcome {
        case: case.clone(),
        base: case_stats(&model, &base, targets)?,
        regulated: case_stats(&model, &reg, targets)?,
        latent_l2: latent_distance(base.final_latent(), reg.final_latent())?,
    })
}

/// Runs `jobs` on scoped worker threads; results come back in input order.
pub fn parallel_map<T, R, F>(jobs: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.clamp(1, jobs.len().max(1));
    let chunk = jobs.len().div_ceil(workers).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    })
}

pub fn default_workers() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    Layers,
    Steps,
    Beta,
    Kappa,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" => Ok(Self::Layers),
            "steps" => Ok(Self::Steps),
            "beta" => Ok(Self::Beta),
            "kappa" => Ok(Self::Kappa),
            other => Err(invalid("sweep", format!("`{other}` is not one of layers, steps, beta, kappa"))),
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Layers => "layers",
            Self::Steps => "steps",
            Self::Beta => "beta",
            Self::Kappa => "kappa",
        })
    }
}

impl Sweep {
    pub fn values(self) -> Vec<f64> {
        match self {
            Self::Layers => vec![0.0, 2.0, 4.0, 6.0],
            Self::Steps => vec![0.0, 10.0, 20.0, 25.0, 30.0, 40.0, 50.0],
            // Half-decade grid centred on 0.1.
            Self::Beta => (-4..=0).map(|k| 10f64.powf(k as f64 / 2.0)).collect(),
            Self::Kappa => vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }

    /// Regulation for one sweep setting; the κ sweep uses the scaling regulator.
    pub fn regulation(self, base: &Regulation, layout: &[crate::schedule::LayerDescriptor], value: f64) -> Result<Regulation> {
        let mut r = base.clone();
        match self {
            Self::Layers => r.config.edit_layers = Some(select_layers(layout, Some(value as usize))?),
            Self::Steps => r.config.t_thres = value as usize,
            Self::Beta => r.config.beta = value,
            Self::Kappa => {
                r.regulator = RegulatorKind::Scaling;
                r.scaling.kappa_eos = value;
            }
        }
        Ok(r)
    }
}

/// Suite means for one sweep setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep: Sweep,
    pub value: f64,
    pub target_coverage: f64,
    pub mean_quantile: f64,
    pub dominance_index: f64,
    pub suppressed_max: f64,
    pub overhead: f64,
}

pub const SWEEP_CSV_HEADER: &str = "sweep,value,target_coverage,mean_quantile,dominance_index,suppressed_max,overhead";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.6e}",
            self.sweep,
            self.value,
            self.target_coverage,
            self.mean_quantile,
            self.dominance_index,
            self.suppressed_max,
            self.overhead
        )
    }
}

/// Sweep result plus the unregulated reference row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub sweep: Sweep,
    pub baseline: SweepRow,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, value: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_CSV_HEADER}\n");
        for row in &self.rows {
            out.push_str(&row.csv_line());
            out.push('\n');
        }
        out
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn summarize(sweep: Sweep, value: f64, stats: &[CaseStats], base_secs: &[f64]) -> Result<SweepRow> {
    let overheads = stats
        .iter()
        .zip(base_secs)
        .map(|(s, &b)| overhead(s.seconds, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepRow {
        sweep,
        value,
        target_coverage: mean(stats.iter().map(|s| s.target_coverage)),
        mean_quantile: mean(stats.iter().map(|s| s.mean_quantile)),
        dominance_index: mean(stats.iter().map(|s| s.dominance_index)),
        suppressed_max: mean(stats.iter().map(|s| s.suppressed_max)),
        overhead: mean(overheads.into_iter()),
    })
}

/// Runs every setting of `sweep` on every suite case over `workers` threads.
/// Timing columns depend on load; every other column is deterministic.
pub fn run_sweep(
    sweep: Sweep,
    model_cfg: &ModelConfig,
    sampler: &SamplerConfig,
    regulation: &Regulation,
    suite: &[SuiteCase],
    workers: usize,
) -> Result<SweepReport> {
    if suite.is_empty() {
        return Err(Error::Empty("suite"));
    }
    let values = sweep.values();
    let layout = ToyModel::new(model_cfg.clone())?.layout();
    let mut template = regulation.clone();
    if template.regulator == RegulatorKind::None {
        template.regulator = RegulatorKind::Optimize;
    }
    let regs = values
        .iter()
        .map(|&v| sweep.regulation(&template, &layout, v))
        .collect::<Result<Vec<_>>>()?;

    // Job `(None, c)` is the unregulated run of case `c`.
    let mut jobs: Vec<(Option<usize>, usize)> = (0..suite.len()).map(|c| (None, c)).collect();
    for s in 0..values.len() {
        jobs.extend((0..suite.len()).map(|c| (Some(s), c)));
    }
    let results = parallel_map(&jobs, workers, |&(setting, c)| -> Result<CaseStats> {
        let case = &suite[c];
        let model = ToyModel::new(case.model_config(model_cfg))?;
        let prompt = case.prompt(model.config.max_tokens)?;
        let targets = case.targets(&prompt)?;
        let reg = setting.map(|s| case_regulation(&regs[s], targets));
        let record = run_generation(&model, &prompt, sampler, reg.as_ref(), case.seed)?;
        case_stats(&model, &record, targets)
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let (base, rest) = results.split_at(suite.len());
    let base_secs: Vec<f64> = base.iter().map(|s| s.seconds).collect();
    let baseline = summarize(sweep, f64::NAN, base, &base_secs)?;
    let rows = values
        .iter()
        .zip(rest.chunks(suite.len()))
        .map(|(&v, stats)| summarize(sweep, v, stats, &base_secs))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport { sweep, baseline, rows })
}
