use std::path::{Path, PathBuf};

use driftscape::corruptions::CorruptionKind;
use driftscape::experiments::AblationSettings;
use driftscape::federation::FederationConfig;
use driftscape::tasks::TaskKind;
use driftscape::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    /// 0 picks the number of cores.
    pub workers: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub kind: CorruptionKind,
    pub target_drop: f64,
    pub tolerance: f64,
    pub salt: u64,
    /// Seed of the clean model being calibrated against and of the feasibility run.
    pub seed: u64,
    /// Transform checked for forgetting feasibility.
    pub check_kind: CorruptionKind,
    pub check_level: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub federation: FederationConfig,
    pub ablation: AblationSettings,
    pub calibration: CalibrationSection,
}

impl RunConfig {
    pub fn defaults(kind: TaskKind) -> Self {
        let (federation, calib_kind) = match kind {
            TaskKind::Classification => (FederationConfig::default(), CorruptionKind::GaussianNoise),
            TaskKind::Segmentation => (FederationConfig::segmentation(), CorruptionKind::OcclusionOverlay),
        };
        RunConfig {
            run: RunSection {
                seeds: vec![1, 2, 3, 4, 5],
                workers: 0,
                out: PathBuf::from("runs"),
            },
            federation,
            ablation: AblationSettings::default(),
            calibration: CalibrationSection {
                kind: calib_kind,
                target_drop: 0.2,
                tolerance: 0.02,
                salt: 0,
                seed: 1,
                check_kind: CorruptionKind::GaussianNoise,
                check_level: 5,
            },
        }
    }

    /// Parses a config file on top of the defaults of its task kind. Keys
    /// missing from the file keep their defaults; unknown keys are rejected.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format { path: origin.to_path_buf(), message };
        let user: toml::Table = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        let kind = user
            .get("federation")
            .and_then(|f| f.get("task"))
            .and_then(|t| t.get("kind"))
            .map(|k| {
                k.as_str()
                    .ok_or_else(|| bad("federation.task.kind must be a string".into()))?
                    .parse::<TaskKind>()
                    .map_err(|e| bad(e.to_string()))
            })
            .transpose()?
            .unwrap_or(TaskKind::Classification);
        let mut merged = toml::Table::try_from(RunConfig::defaults(kind)).map_err(|e| bad(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| bad(e.message().to_string()))?;
        cfg.validate().map_err(|e| e.context(origin.display().to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        RunConfig::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        if self.run.seeds.is_empty() {
            return Err(Error::InvalidConfig("run.seeds must not be empty".into()));
        }
        if !(0.0..1.0).contains(&self.calibration.target_drop) {
            return Err(Error::InvalidConfig(format!(
                "calibration.target_drop must be in [0, 1), got {}",
                self.calibration.target_drop
            )));
        }
        if self.calibration.check_level > driftscape::corruptions::MAX_LEVEL {
            return Err(Error::InvalidConfig(format!(
                "calibration.check_level {} exceeds {}",
                self.calibration.check_level,
                driftscape::corruptions::MAX_LEVEL
            )));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        for kind in [TaskKind::Classification, TaskKind::Segmentation] {
            let cfg = RunConfig::defaults(kind);
            assert_eq!(RunConfig::from_toml(&cfg.to_toml(), Path::new("d.toml")).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let cfg = RunConfig::from_toml(
            "[run]\nseeds = [4]\n[federation]\nlr = 0.1\n[federation.task]\nkind = \"segmentation\"\n",
            Path::new("c.toml"),
        )
        .unwrap();
        assert_eq!(cfg.run.seeds, vec![4]);
        assert_eq!(cfg.federation.lr, 0.1);
        assert_eq!(cfg.federation.task, FederationConfig::segmentation().task);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[federation]\nlearning_rate = 0.1\n", Path::new("c.toml")).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }
}
