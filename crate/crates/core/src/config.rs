//! Declarative experiment configuration.
//!
//! Configs are strict JSON (unknown keys rejected) so that a config file and
//! its content hash pin an experiment exactly.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModelSpec;
use crate::data::DatasetParams;
use crate::error::{Error, Result};
use crate::stitch::StitchFamily;
use crate::training::{LossKind, Monitor, PretrainConfig, TrainConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneEntry {
    pub name: String,
    pub spec: ModelSpec,
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchSection {
    pub families: Vec<StitchFamily>,
    /// Default stitch points for every loss.
    pub points: Vec<usize>,
    /// Source backbone name (its prefix feeds the stitch).
    pub source: String,
    /// Target backbone name (its suffix consumes the stitch).
    pub target: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossPlan {
    pub kind: LossKind,
    /// Overrides the default stitch points for this loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub losses: Vec<LossPlan>,
    pub lr: f64,
    #[serde(default)]
    pub lr_sweep: Vec<f64>,
    pub batch_lfm: usize,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
}

impl TrainSection {
    pub fn config_for(&self, kind: LossKind, seed: u64) -> TrainConfig {
        TrainConfig {
            loss_kind: kind,
            lr: self.lr,
            lr_sweep: self.lr_sweep.clone(),
            batch: if kind == LossKind::Lfm {
                self.batch_lfm
            } else {
                self.batch
            },
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            weight_decay: self.weight_decay,
            monitor: match kind {
                LossKind::Tlt | LossKind::TwoStage => Monitor::ValAcc,
                _ => Monitor::ValLoss,
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfstitchSection {
    pub families: Vec<StitchFamily>,
    pub points: Vec<usize>,
    pub loss: LossKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub probe_lr: f64,
    pub probe_max_epochs: usize,
    pub probe_patience: usize,
    /// Emit layer/final distance diagnostics per cell.
    pub distance: bool,
    /// Run the self-stitch control grid and prediction partitioning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selfstitch: Option<SelfstitchSection>,
    /// Train a dense per-token probe on the cross cells at these points.
    #[serde(default)]
    pub dense_points: Vec<usize>,
}

impl EvalSection {
    pub fn probe_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            loss_kind: LossKind::Tlt,
            lr: self.probe_lr,
            lr_sweep: Vec::new(),
            batch: 128,
            max_epochs: self.probe_max_epochs,
            patience: self.probe_patience,
            seed,
            weight_decay: 0.0,
            monitor: Monitor::ValAcc,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Replicate seeds; empty means `[seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub dataset: DatasetParams,
    pub backbones: Vec<BackboneEntry>,
    pub stitch: StitchSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config json")
    }

    pub fn replicate_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn backbone(&self, name: &str) -> Result<&BackboneEntry> {
        self.backbones
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Config(format!("backbone '{name}' is not defined")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbones.is_empty() {
            return Err(Error::Config("at least one backbone is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for b in &self.backbones {
            b.spec.validate()?;
            if !names.insert(b.name.clone()) {
                return Err(Error::Config(format!("duplicate backbone name '{}'", b.name)));
            }
            if b.spec.image != self.dataset.image_side {
                return Err(Error::Config(format!(
                    "backbone '{}' expects image side {}, dataset has {}",
                    b.name, b.spec.image, self.dataset.image_side
                )));
            }
        }
        let src = self.backbone(&self.stitch.source)?;
        let tgt = self.backbone(&self.stitch.target)?;
        let max_depth = src.spec.depth.min(tgt.spec.depth);
        let mut all_points = self.stitch.points.clone();
        for plan in &self.train.losses {
            if let Some(p) = &plan.points {
                all_points.extend(p);
            }
        }
        if let Some(ss) = &self.eval.selfstitch {
            all_points.extend(&ss.points);
        }
        for &p in &all_points {
            if p < 1 || p > max_depth {
                return Err(Error::Config(format!(
                    "stitch point {p} exceeds backbone depth {max_depth}"
                )));
            }
        }
        if self.stitch.points.is_empty() {
            return Err(Error::Config("stitch.points must be non-empty".into()));
        }
        if self.train.losses.is_empty() {
            return Err(Error::Config("train.losses must be non-empty".into()));
        }
        if self.train.batch < 1 || self.train.batch_lfm < 1 || self.train.patience < 1 {
            return Err(Error::Config("train section has non-positive sizes".into()));
        }
        Ok(())
    }

    /// Hex digest over the canonical JSON serialization.
    pub fn digest(&self) -> String {
        slice_hash(self)
    }
}

/// Short content hash of any config slice (12 hex chars of SHA-256).
pub fn slice_hash(value: &impl Serialize) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(value).expect("slice json"));
    let d = h.finalize();
    d.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_config_json() -> String {
        r#"{
  "seed": 0,
  "seeds": [0, 1],
  "dataset": {"classes": 4, "per_class_train": 10, "per_class_test": 4, "image_side": 16, "seed": 9},
  "backbones": [
    {"name": "sup", "spec": {"depth": 2, "width": 16, "heads": 2, "mlp_ratio": 2, "patch": 8, "image": 16, "use_class_token": false, "num_classes": 0, "objective_tag": "supervised"},
     "pretrain": {"lr": 0.002, "batch": 16, "max_epochs": 2, "patience": 5, "weight_decay": 0.05, "seed": 100}},
    {"name": "rec", "spec": {"depth": 2, "width": 16, "heads": 2, "mlp_ratio": 2, "patch": 8, "image": 16, "use_class_token": false, "num_classes": 0, "objective_tag": "masked-recon"},
     "pretrain": {"lr": 0.002, "batch": 16, "max_epochs": 2, "patience": 5, "weight_decay": 0.05, "seed": 200}}
  ],
  "stitch": {"families": ["linear"], "points": [1], "source": "rec", "target": "sup"},
  "train": {"losses": [{"kind": "lfm"}, {"kind": "ffm"}], "lr": 0.01, "batch_lfm": 16, "batch": 16, "max_epochs": 2, "patience": 5, "weight_decay": 0.0},
  "eval": {"probe_lr": 0.02, "probe_max_epochs": 10, "probe_patience": 4, "distance": true,
           "selfstitch": {"families": ["linear"], "points": [1], "loss": "lfm"}}
}"#
        .to_string()
    }

    #[test]
    fn sample_config_parses_and_validates() {
        let cfg = ExperimentConfig::from_json(&sample_config_json()).unwrap();
        assert_eq!(cfg.replicate_seeds(), vec![0, 1]);
        assert_eq!(cfg.digest().len(), 12);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = sample_config_json().replace("\"seed\": 0,", "\"seed\": 0, \"extra\": 1,");
        assert!(ExperimentConfig::from_json(&json).is_err());
    }

    #[test]
    fn out_of_range_stitch_point_is_rejected() {
        let json = sample_config_json().replace("\"points\": [1]", "\"points\": [5]");
        assert!(ExperimentConfig::from_json(&json).is_err());
    }

    #[test]
    fn unknown_backbone_reference_is_rejected() {
        let json = sample_config_json().replace("\"source\": \"rec\"", "\"source\": \"nope\"");
        assert!(ExperimentConfig::from_json(&json).is_err());
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_json(&sample_config_json()).unwrap();
        let b = ExperimentConfig::from_json(&sample_config_json()).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = ExperimentConfig::from_json(&sample_config_json().replace("\"lr\": 0.01", "\"lr\": 0.02")).unwrap();
        assert_ne!(a.digest(), c.digest());
    }
}
