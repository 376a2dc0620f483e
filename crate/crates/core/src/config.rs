//! Experiment configuration documents.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CorpusSpec, NoiseKinds};
use crate::error::{Error, Result};
use crate::model::{GatePolarity, ModelDims};
use crate::train::{AdamConfig, Schedule};

/// Labeled-to-pseudo minibatch ratio, written `"1:9"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub labeled: usize,
    pub pseudo: usize,
}

impl Default for Ratio {
    fn default() -> Self {
        Ratio {
            labeled: 1,
            pseudo: 9,
        }
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("ratio must look like \"1:9\", got {:?}", s));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let labeled: usize = a.trim().parse().map_err(|_| bad())?;
        let pseudo: usize = b.trim().parse().map_err(|_| bad())?;
        if labeled == 0 || pseudo == 0 {
            return Err(Error::Config(
                "both sides of the ratio must be positive".into(),
            ));
        }
        Ok(Ratio { labeled, pseudo })
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.labeled, self.pseudo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed_schedule: Schedule,
    pub student_schedule: Schedule,
    /// Utterances per minibatch.
    pub batch_size: usize,
    pub ratio: Ratio,
    /// Proportion of frames drawn as span starts.
    pub mask_p: f64,
    /// Span length in frames.
    pub mask_m: usize,
    pub gate_polarity: GatePolarity,
    /// Gradient mask on pseudo-label minibatches. Off gives plain mixing.
    pub grad_mask: bool,
    pub adam: AdamConfig,
    /// Master seed for the init, mask, shuffle and noise streams.
    pub seed: u64,
    /// Dev evaluations without improvement before stopping.
    pub patience: usize,
    /// Updates between dev evaluations.
    pub eval_every: usize,
    /// Greedy decoding's per-frame symbol cap.
    pub emit_cap: usize,
    /// Intra-step worker threads. Never changes results.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed_schedule: Schedule {
                peak_lr: 2e-3,
                warmup_steps: 500,
                hold_steps: 2000,
                total_steps: 8000,
            },
            student_schedule: Schedule {
                peak_lr: 2e-3,
                warmup_steps: 500,
                hold_steps: 2000,
                total_steps: 12000,
            },
            batch_size: 8,
            ratio: Ratio::default(),
            mask_p: 0.065,
            mask_m: 10,
            gate_polarity: GatePolarity::KeepMasked,
            grad_mask: true,
            adam: AdamConfig::default(),
            seed: 0,
            patience: 3,
            eval_every: 250,
            emit_cap: 4,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.seed_schedule.validate("seed_schedule")?;
        self.student_schedule.validate("student_schedule")?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.mask_p > 0.0 && self.mask_p <= 1.0) {
            return Err(Error::Config(format!(
                "mask_p must be in (0, 1], got {}",
                self.mask_p
            )));
        }
        if self.mask_m == 0 {
            return Err(Error::Config("mask_m must be at least 1".into()));
        }
        if self.eval_every == 0 || self.emit_cap == 0 {
            return Err(Error::Config(
                "eval_every and emit_cap must be positive".into(),
            ));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(
                "adam betas must be in [0, 1) and eps positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything one run needs; the document the command-line `--config` reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub model: ModelDims,
    pub train: TrainConfig,
    /// Pseudo-labeling rounds for `iterate`.
    pub iters: usize,
    /// Label-noise rates for `noise-sweep`.
    pub noise_rates: Vec<f64>,
    pub noise_kinds: NoiseKinds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSpec::default(),
            model: ModelDims::default(),
            train: TrainConfig::default(),
            iters: 3,
            noise_rates: vec![0.0, 0.15, 0.3],
            noise_kinds: NoiseKinds::Mixed,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.vocab_size != self.corpus.vocab_size
            || self.model.feature_dim != self.corpus.feature_dim
        {
            return Err(Error::Config(format!(
                "model (K={}, F={}) does not match corpus (K={}, F={})",
                self.model.vocab_size,
                self.model.feature_dim,
                self.corpus.vocab_size,
                self.corpus.feature_dim
            )));
        }
        if self.iters == 0 {
            return Err(Error::Config("iters must be at least 1".into()));
        }
        if let Some(r) = self.noise_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("noise rate {} outside [0, 1]", r)));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(json)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_parsing() {
        assert_eq!(
            "1:9".parse::<Ratio>().unwrap(),
            Ratio {
                labeled: 1,
                pseudo: 9
            }
        );
        assert!("0:9".parse::<Ratio>().is_err());
        assert!("19".parse::<Ratio>().is_err());
        let json = serde_json::to_string(&Ratio {
            labeled: 2,
            pseudo: 3,
        })
        .unwrap();
        assert_eq!(json, "\"2:3\"");
    }

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"train": {"mask_m": 3}}"#).unwrap();
        assert_eq!(cfg.train.mask_m, 3);
        assert_eq!(cfg.train.mask_p, 0.065);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn mismatched_model_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.vocab_size = 5;
        assert!(cfg.validate().is_err());
    }
}
