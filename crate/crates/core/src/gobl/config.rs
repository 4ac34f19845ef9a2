use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GoblError;
use crate::diffcore::{ModuleTag, OptimizerKind, OptimizerSettings};
use crate::losses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Gobl,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Gobl => "gobl",
        }
    }
}

/// Region features PNC compares each prompt against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PncFeatures {
    /// Each prompt against the regions of its own fused pass.
    PerPrompt,
    /// Both prompts against the regions of the true prompt's pass.
    Shared,
}

impl PncFeatures {
    pub fn as_str(self) -> &'static str {
        match self {
            PncFeatures::PerPrompt => "per_prompt",
            PncFeatures::Shared => "shared",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub pnc_features: PncFeatures,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
    pub freeze_tags: BTreeSet<ModuleTag>,
    pub manifest_path: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

/// Every recognized config key, in documentation order.
pub const CONFIG_KEYS: [&str; 18] = [
    "phase",
    "epochs",
    "batch_size",
    "sigma",
    "alpha",
    "beta",
    "w_cls",
    "w_l1",
    "w_giou",
    "pnc_features",
    "lr",
    "optimizer",
    "seed",
    "freeze_tags",
    "manifest_path",
    "checkpoint_in",
    "checkpoint_out",
    "log_path",
];

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            phase: Phase::Pretrain,
            epochs: 10,
            batch_size: 1,
            weights: LossWeights::default(),
            pnc_features: PncFeatures::PerPrompt,
            optimizer: OptimizerSettings::default(),
            seed: 0,
            freeze_tags: ModuleTag::ALL.into_iter().collect(),
            manifest_path: None,
            checkpoint_in: None,
            checkpoint_out: None,
            log_path: None,
        }
    }

    pub fn gobl() -> Self {
        Self {
            phase: Phase::Gobl,
            epochs: 1,
            freeze_tags: BTreeSet::from([ModuleTag::Fusion]),
            ..Self::pretrain()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self::pretrain(),
            Phase::Gobl => Self::gobl(),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Defaults follow the
    /// `phase` key (pretrain when absent) and `overrides` win over the file.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self, GoblError> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GoblError::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.extend(overrides.iter().cloned());
        let phase = match pairs.iter().rev().find(|(k, _)| k == "phase") {
            Some((_, v)) => parse_phase(v)?,
            None => Phase::Pretrain,
        };
        let mut cfg = Self::for_phase(phase);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), GoblError> {
        let num = |v: &str| -> Result<f64, GoblError> {
            let x: f64 = v
                .parse()
                .map_err(|_| GoblError::Config(format!("{key}: {v:?} is not a number")))?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(GoblError::Config(format!("{key}: must be finite")))
            }
        };
        let int = |v: &str| -> Result<u64, GoblError> {
            v.parse()
                .map_err(|_| GoblError::Config(format!("{key}: {v:?} is not a non-negative integer")))
        };
        let path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key {
            "phase" => self.phase = parse_phase(value)?,
            "epochs" => self.epochs = int(value)? as usize,
            "batch_size" => {
                self.batch_size = int(value)? as usize;
                if self.batch_size == 0 {
                    return Err(GoblError::Config("batch_size must be at least 1".into()));
                }
            }
            "sigma" => {
                self.weights.sigma = num(value)?;
                if self.weights.sigma <= 0.0 {
                    return Err(GoblError::Config("sigma must be positive".into()));
                }
            }
            "alpha" => self.weights.alpha = num(value)?,
            "beta" => self.weights.beta = num(value)?,
            "w_cls" => self.weights.w_cls = num(value)?,
            "w_l1" => self.weights.w_l1 = num(value)?,
            "w_giou" => self.weights.w_giou = num(value)?,
            "pnc_features" => {
                self.pnc_features = match value {
                    "per_prompt" => PncFeatures::PerPrompt,
                    "shared" => PncFeatures::Shared,
                    other => return Err(GoblError::Config(format!("pnc_features: unknown value {other:?}"))),
                }
            }
            "lr" => {
                self.optimizer.learning_rate = num(value)?;
                if self.optimizer.learning_rate <= 0.0 {
                    return Err(GoblError::Config("lr must be positive".into()));
                }
            }
            "optimizer" => {
                self.optimizer.kind = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    other => return Err(GoblError::Config(format!("optimizer: unknown kind {other:?}"))),
                }
            }
            "seed" => self.seed = int(value)?,
            "freeze_tags" => {
                let mut tags = BTreeSet::new();
                for t in value.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                    tags.insert(t.parse::<ModuleTag>().map_err(|e| GoblError::Config(e.to_string()))?);
                }
                self.freeze_tags = tags;
            }
            "manifest_path" => self.manifest_path = path(value),
            "checkpoint_in" => self.checkpoint_in = path(value),
            "checkpoint_out" => self.checkpoint_out = path(value),
            "log_path" => self.log_path = path(value),
            other => return Err(GoblError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical `key = value` rendering; parses back to an equal config.
    pub fn to_kv(&self) -> String {
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let tags: Vec<&str> = self.freeze_tags.iter().map(|t| t.as_str()).collect();
        let kind = match self.optimizer.kind {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        };
        let w = &self.weights;
        [
            ("phase", self.phase.as_str().to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("sigma", w.sigma.to_string()),
            ("alpha", w.alpha.to_string()),
            ("beta", w.beta.to_string()),
            ("w_cls", w.w_cls.to_string()),
            ("w_l1", w.w_l1.to_string()),
            ("w_giou", w.w_giou.to_string()),
            ("pnc_features", self.pnc_features.as_str().to_string()),
            ("lr", self.optimizer.learning_rate.to_string()),
            ("optimizer", kind.to_string()),
            ("seed", self.seed.to_string()),
            ("freeze_tags", tags.join(",")),
            ("manifest_path", p(&self.manifest_path)),
            ("checkpoint_in", p(&self.checkpoint_in)),
            ("checkpoint_out", p(&self.checkpoint_out)),
            ("log_path", p(&self.log_path)),
        ]
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_phase(v: &str) -> Result<Phase, GoblError> {
    match v {
        "pretrain" => Ok(Phase::Pretrain),
        "gobl" | "finetune" => Ok(Phase::Gobl),
        other => Err(GoblError::Config(format!("phase: unknown value {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_phase() {
        let c = TrainConfig::parse("phase = gobl\n", &[]).unwrap();
        assert_eq!(c.epochs, 1);
        assert_eq!(c.batch_size, 1);
        assert_eq!(c.freeze_tags, BTreeSet::from([ModuleTag::Fusion]));
        assert_eq!((c.weights.sigma, c.weights.alpha, c.weights.beta), (5.0, 0.5, 0.3));
        assert_eq!((c.weights.w_cls, c.weights.w_l1, c.weights.w_giou), (1.0, 5.0, 2.0));
        assert_eq!(TrainConfig::parse("", &[]).unwrap().epochs, 10);
    }

    #[test]
    fn overrides_win_and_round_trip() {
        let text = "# comment\nphase = pretrain\nlr = 0.01 # trailing\nfreeze_tags = fusion, decoder\n";
        let c = TrainConfig::parse(text, &[("lr".into(), "0.5".into()), ("phase".into(), "gobl".into())]).unwrap();
        assert_eq!(c.phase, Phase::Gobl);
        assert_eq!(c.optimizer.learning_rate, 0.5);
        assert_eq!(c.freeze_tags.len(), 2);
        assert_eq!(TrainConfig::parse(&c.to_kv(), &[]).unwrap(), c);
        assert_eq!(c.hash(), TrainConfig::parse(&c.to_kv(), &[]).unwrap().hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("nonsense", &[]).is_err());
        assert!(TrainConfig::parse("colour = red", &[]).is_err());
        assert!(TrainConfig::parse("sigma = -1", &[]).is_err());
        assert!(TrainConfig::parse("batch_size = 0", &[]).is_err());
        assert!(TrainConfig::parse("freeze_tags = neck", &[]).is_err());
    }

    #[test]
    fn key_list_matches_rendering() {
        let rendered = TrainConfig::gobl().to_kv();
        let keys: Vec<&str> = rendered.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, CONFIG_KEYS);
    }
}
