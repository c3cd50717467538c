//! The declarative run-configuration file: one TOML document choosing the
//! preset, the linear stages, the deformable stage, the region table, the
//! working resolution, and the worker count. Every field has a default, so
//! commands run with no config file at all.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use voxreg::error::{Error, Result};
use voxreg::evaluation::RegionTable;
use voxreg::registration::{
    DeformableConfig, LinearKind, LinearStageConfig, Preset, PresetConfigs,
};

/// Parsed run configuration. TOML shape:
///
/// ```toml
/// preset = "RAR"            # NR | RR | RAR
/// resample_mm = 1.5         # isotropic working resolution
/// workers = 4               # cohort-mode parallelism
/// region_table = "..."      # CSV path; omitted = built-in table
/// output_dir = "..."        # cohort fallback when --out-dir is absent
///
/// [[linear]]                # at most one stage per kind
/// kind = "rigid"
/// iterations_per_level = [500, 250, 100]
/// shrink_factors = [4, 2, 1]
/// smoothing_sigmas = [2.0, 1.0, 0.0]
/// metric = "mi"
///
/// [[linear]]
/// kind = "affine"
///
/// [deformable]
/// learning_rate = 0.1
/// iterations = 500
/// parameterization = "svf"
///
/// [deformable.loss]
/// lncc_window = 9
/// lambda = 1.0
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub linear: Vec<LinearStageConfig>,
    pub deformable: DeformableConfig,
    pub region_table: Option<PathBuf>,
    pub resample_mm: f64,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::RAR,
            linear: vec![
                LinearStageConfig::default(),
                LinearStageConfig::affine_default(),
            ],
            deformable: DeformableConfig::default(),
            region_table: None,
            resample_mm: 1.5,
            workers: None,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| {
            Error::InvalidInput(format!("config {}: {e}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    /// The file when given, the full-default configuration otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut kinds = Vec::new();
        for stage in &self.linear {
            stage.validate()?;
            if kinds.contains(&stage.kind) {
                return Err(Error::InvalidInput(format!(
                    "config lists more than one {:?} linear stage",
                    stage.kind
                )));
            }
            kinds.push(stage.kind);
        }
        self.deformable.validate()?;
        if !(self.resample_mm > 0.0) || !self.resample_mm.is_finite() {
            return Err(Error::InvalidInput(format!(
                "resample_mm must be positive, got {}",
                self.resample_mm
            )));
        }
        if self.workers == Some(0) {
            return Err(Error::InvalidInput("workers must be at least 1".into()));
        }
        if let Some(path) = &self.region_table {
            if !path.exists() {
                return Err(Error::InvalidInput(format!(
                    "region table {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    /// The stage set a preset draws from: configured stages by kind,
    /// library defaults for kinds the file omits.
    pub fn preset_configs(&self) -> PresetConfigs {
        let pick = |kind: LinearKind, fallback: LinearStageConfig| {
            self.linear
                .iter()
                .find(|s| s.kind == kind)
                .cloned()
                .unwrap_or(fallback)
        };
        PresetConfigs {
            rigid: pick(LinearKind::Rigid, LinearStageConfig::default()),
            affine: pick(LinearKind::Affine, LinearStageConfig::affine_default()),
            deformable: self.deformable.clone(),
        }
    }

    /// The configured region table, or the built-in one.
    pub fn region_table(&self) -> Result<RegionTable> {
        match &self.region_table {
            Some(path) => RegionTable::from_file(path),
            None => Ok(RegionTable::default_table()),
        }
    }

    /// Worker-count precedence: command-line flag, then config file, then
    /// the `VOXREG_WORKERS` environment variable, then 1.
    pub fn effective_workers(&self, flag: Option<usize>) -> Result<usize> {
        let from_env = match std::env::var("VOXREG_WORKERS") {
            Ok(text) => Some(text.parse::<usize>().map_err(|_| {
                Error::InvalidInput(format!("VOXREG_WORKERS {text:?} is not a number"))
            })?),
            Err(_) => None,
        };
        let workers = flag.or(self.workers).or(from_env).unwrap_or(1);
        if workers == 0 {
            return Err(Error::InvalidInput("workers must be at least 1".into()));
        }
        Ok(workers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use voxreg::registration::LinearMetric;

    #[test]
    fn empty_config_is_the_default() {
        let parsed: RunConfig = toml::from_str("").unwrap();
        assert_eq!(parsed.preset, Preset::RAR);
        assert_eq!(parsed.resample_mm, 1.5);
        assert_eq!(parsed.linear.len(), 2);
        parsed.validate().unwrap();
    }

    #[test]
    fn partial_stage_tables_fill_from_defaults() {
        let text = r#"
            preset = "RR"
            resample_mm = 1.0

            [[linear]]
            kind = "rigid"
            iterations_per_level = [40, 20]
            shrink_factors = [2, 1]
            smoothing_sigmas = [1.0, 0.0]
            metric = "mse"

            [deformable]
            iterations = 30

            [deformable.loss]
            lambda = 2.0
        "#;
        let parsed: RunConfig = toml::from_str(text).unwrap();
        parsed.validate().unwrap();
        assert_eq!(parsed.preset, Preset::RR);
        let configs = parsed.preset_configs();
        assert_eq!(configs.rigid.iterations_per_level, vec![40, 20]);
        assert_eq!(configs.rigid.metric, LinearMetric::Mse);
        // Unstated rigid fields and the whole affine stage fall back.
        assert_eq!(configs.rigid.step, LinearStageConfig::default().step);
        assert_eq!(configs.affine.iterations_per_level, vec![500, 250, 100]);
        assert_eq!(configs.deformable.iterations, 30);
        assert_eq!(configs.deformable.loss.lambda, 2.0);
        assert_eq!(configs.deformable.loss.lncc_window, 9);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "resample_mm = 0.0",
            "workers = 0",
            "not_a_field = 1",
            "[. broken",
            "[[linear]]\nkind = \"rigid\"\n[[linear]]\nkind = \"rigid\"",
            "[deformable]\niterations = 0",
        ] {
            let outcome = toml::from_str::<RunConfig>(text)
                .map_err(|e| Error::InvalidInput(e.to_string()))
                .and_then(|c| c.validate());
            assert!(outcome.is_err(), "accepted {text:?}");
        }
    }

    #[test]
    fn worker_precedence_is_flag_config_env() {
        let mut config = RunConfig::default();
        // No sources → 1. (The env var is absent in the test environment;
        // precedence above it is covered by the flag/config cases.)
        assert_eq!(config.effective_workers(None).unwrap(), 1);
        config.workers = Some(3);
        assert_eq!(config.effective_workers(None).unwrap(), 3);
        assert_eq!(config.effective_workers(Some(5)).unwrap(), 5);
        assert!(config.effective_workers(Some(0)).is_err());
    }
}
