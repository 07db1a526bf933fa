//! JSON run configuration. Every section is optional and falls back to its
//! defaults; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::dataset::DEFAULT_VAL_FRACTION;
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::harness::Setup;
use crate::select::Aggregator;
use crate::ssim::SsimParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// `<root>/<class>/<images>` of real data.
    pub data_root: PathBuf,
    /// `<root>/<class>/<images>` of generated candidates.
    pub synth_root: PathBuf,
    pub setups: Vec<Setup>,
    pub trials: usize,
    /// Real training images per class after the validation hold-out.
    pub real_per_class: usize,
    pub synth_per_class: usize,
    /// Size of the SSIM-ranked shortlist the synthetic images come from.
    pub select_pool_k: usize,
    pub val_fraction: f64,
    pub aggregator: Aggregator,
    /// Use at most this many real training images per class as SSIM
    /// references; all when unset.
    pub reference_limit: Option<usize>,
    pub base_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data/real"),
            synth_root: PathBuf::from("data/synthetic"),
            setups: Setup::ALL.to_vec(),
            trials: 10,
            real_per_class: 200,
            synth_per_class: 50,
            select_pool_k: 100,
            val_fraction: DEFAULT_VAL_FRACTION,
            aggregator: Aggregator::Mean,
            reference_limit: None,
            base_seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trials == 0 {
            return bad("trials must be ≥ 1".into());
        }
        if self.setups.is_empty() {
            return bad("no setups selected".into());
        }
        if self.synth_per_class > self.select_pool_k {
            return bad(format!(
                "synth_per_class {} exceeds select_pool_k {}",
                self.synth_per_class, self.select_pool_k
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} not in [0,1)", self.val_fraction));
        }
        if self.reference_limit == Some(0) {
            return bad("reference_limit must be ≥ 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub classifier: ClassifierConfig,
    pub gan: GanConfig,
    pub ssim: SsimParams,
    pub experiment: ExperimentConfig,
}

impl AppConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: AppConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.gan.validate()?;
        self.ssim.validate()?;
        self.experiment.validate()
    }
}
