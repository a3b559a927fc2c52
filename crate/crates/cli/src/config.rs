use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fibro_core::clf::TrainConfig;
use fibro_core::patches::PatchExtractionConfig;
use fibro_core::staging::Thresholds;
use fibro_core::{ContrastMode, RegistrationConfig};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagingConfig {
    /// Fixed thresholds; when absent the mode's defaults apply.
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
    pub folds: usize,
    pub grid_step: f64,
}

impl Default for StagingConfig {
    fn default() -> Self {
        Self { tau1: None, tau2: None, folds: 4, grid_step: 0.01 }
    }
}

/// Baseline classifier settings; the training seed is the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, lr: t.lr, l2: t.l2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub mode: ContrastMode,
    pub seed: u64,
    pub jobs: usize,
    pub registration: RegistrationConfig,
    /// Restrict registration patches to the organ mask when the study has
    /// one.
    pub register_with_mask: bool,
    pub patches: PatchExtractionConfig,
    pub classifier: ClassifierConfig,
    pub staging: StagingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            output_dir: None,
            mode: ContrastMode::NonContrast,
            seed: 0,
            jobs: 1,
            registration: RegistrationConfig::default(),
            register_with_mask: false,
            patches: PatchExtractionConfig::default(),
            classifier: ClassifierConfig::default(),
            staging: StagingConfig::default(),
        }
    }
}

impl RunConfig {
    /// Read a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: String| Err(CliError::Config(e));
        if let Some(m) = &self.manifest {
            if !m.is_file() {
                return bad(format!("manifest {} does not exist", m.display()));
            }
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1".into());
        }
        if let Err(e) = self.registration.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.patches.validate() {
            return bad(e.to_string());
        }
        if !(self.classifier.lr > 0.0) || !(self.classifier.l2 >= 0.0) {
            return bad("classifier lr must be positive and l2 nonnegative".into());
        }
        if self.staging.folds < 2 || !(self.staging.grid_step > 0.0 && self.staging.grid_step < 0.5) {
            return bad("staging folds must be at least 2 and grid_step in (0, 0.5)".into());
        }
        self.thresholds(None, None).map(|_| ())
    }

    /// Thresholds with flag values taking precedence over the config and
    /// the config over the mode defaults.
    pub fn thresholds(&self, tau1: Option<f64>, tau2: Option<f64>) -> Result<Thresholds, CliError> {
        let d = Thresholds::default_for(self.mode);
        let t1 = tau1.or(self.staging.tau1).unwrap_or(d.tau1);
        let t2 = tau2.or(self.staging.tau2).unwrap_or(d.tau2);
        Thresholds::new(t1, t2, self.mode).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let c = &self.classifier;
        TrainConfig { epochs: c.epochs, lr: c.lr, l2: c.l2, seed: self.seed }
    }

    pub fn manifest(&self) -> Result<&Path, CliError> {
        self.manifest.as_deref().ok_or_else(|| CliError::Config("no manifest given (--manifest or config)".into()))
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output_dir.as_deref().ok_or_else(|| CliError::Config("no output directory given (--out or config)".into()))
    }
}
