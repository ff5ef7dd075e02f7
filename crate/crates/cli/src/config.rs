use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attnreg_core::ablation::DOMINANCE_MAGNITUDE;
use attnreg_core::toy::DominanceBias;
use attnreg_core::{ModelConfig, Prompt, Regulation, RegulatorKind, SamplerConfig};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "ATTNREG_SEED";

/// Everything a run needs. Unknown keys are rejected.
///
/// Regulation defaults: `beta 0.1, t_thres 25, kappa_ema 0.5, lambda 0.95,
/// alpha 1.0, mu 0.2, eta 0.1, max_iters 20`, scaling `tau 1.1, kappa_eos 0.5`.
/// The default prompt, bias and targets form the first dominance-suite case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    /// Run seed; drives the initial latent.
    pub seed: u64,
    pub prompt: String,
    /// Target words; their first positions become the regulation targets.
    pub targets: Vec<String>,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub regulation: Regulation,
    pub out_dir: PathBuf,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompt: "elephant glasses".into(),
            targets: vec!["elephant".into(), "glasses".into()],
            model: ModelConfig {
                dominance_bias: vec![DominanceBias {
                    token: "elephant".into(),
                    magnitude: DOMINANCE_MAGNITUDE,
                }],
                ..Default::default()
            },
            sampler: SamplerConfig::default(),
            regulation: Regulation {
                regulator: RegulatorKind::Optimize,
                ..Default::default()
            },
            out_dir: PathBuf::from("out"),
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("invalid config {}", p.display()))
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model")?;
        self.sampler.validate().context("sampler")?;
        self.regulation.config.validate().context("regulation.config")?;
        let prompt = self.prompt()?;
        if self.regulation.regulator != RegulatorKind::None && self.targets.len() < 2 {
            bail!("targets: regulation needs at least two target words, got {}", self.targets.len());
        }
        for word in &self.targets {
            prompt.position_of(word).with_context(|| format!("targets: `{word}`"))?;
        }
        Ok(())
    }

    /// Applies `ATTNREG_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().with_context(|| format!("{SEED_ENV}=`{v}` is not an unsigned integer"))?;
        }
        Ok(())
    }

    pub fn prompt(&self) -> Result<Prompt> {
        Prompt::parse(&self.prompt, self.model.max_tokens).context("prompt")
    }

    /// Regulation with target words resolved to prompt positions.
    pub fn resolved_regulation(&self) -> Result<Regulation> {
        let prompt = self.prompt()?;
        let mut reg = self.regulation.clone();
        reg.config.targets = self
            .targets
            .iter()
            .map(|w| prompt.position_of(w).with_context(|| format!("targets: `{w}`")))
            .collect::<Result<_>>()?;
        Ok(reg)
    }
}

/// Parses `word=magnitude`.
pub fn parse_bias(arg: &str) -> Result<DominanceBias> {
    let (token, mag) = arg
        .split_once('=')
        .with_context(|| format!("dominance `{arg}`: expected word=magnitude"))?;
    let magnitude = mag
        .parse()
        .with_context(|| format!("dominance `{arg}`: `{mag}` is not a number"))?;
    Ok(DominanceBias {
        token: token.to_string(),
        magnitude,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = CliConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(CliConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = CliConfig::parse(r#"{"sampler": {"stepz": 3}}"#).unwrap_err();
        assert!(format!("{err:#}").contains("stepz"));
    }

    #[test]
    fn bias_spec() {
        let b = parse_bias("cat=2.5").unwrap();
        assert_eq!((b.token.as_str(), b.magnitude), ("cat", 2.5));
        assert!(parse_bias("cat").is_err());
        assert!(parse_bias("cat=x").is_err());
    }
}
