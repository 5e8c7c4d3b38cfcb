use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use fuzzreuse::fuzzing::HarnessSpec;
use fuzzreuse::seedgen::ProviderConfig;
use fuzzreuse::Arch;

use crate::{env_error, usage_error};

/// Tool configuration file (JSON). Every field is optional; command-line
/// flags override it. Secrets are never read from here.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub store_dir: Option<PathBuf>,
    pub dump_dir: Option<PathBuf>,
    /// Sysroot per target architecture, keyed like `ARM_32`.
    pub sysroots: BTreeMap<String, PathBuf>,
    pub provider: ProviderConfig,
    /// Harness per applet, replacing the stock profile.
    pub harness_profiles: BTreeMap<String, HarnessSpec>,
}

impl ToolConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage_error(format!("config {}: {e}", path.display())))?;
        let cfg: ToolConfig = serde_json::from_str(&text)
            .map_err(|e| usage_error(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(cfg.relative_to(base))
    }

    fn relative_to(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.store_dir.iter_mut().for_each(fix);
        self.dump_dir.iter_mut().for_each(fix);
        self.sysroots.values_mut().for_each(fix);
        self
    }

    pub fn store_dir(&self) -> PathBuf {
        self.store_dir.clone().unwrap_or_else(|| "fuzzreuse-store".into())
    }

    pub fn dump_dir(&self) -> PathBuf {
        self.dump_dir.clone().unwrap_or_else(|| "fuzzreuse-dump".into())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.store_dir() == self.dump_dir() {
            return Err(usage_error("store_dir and dump_dir must differ"));
        }
        for key in self.sysroots.keys() {
            key.parse::<Arch>()
                .map_err(|_| usage_error(format!("unknown architecture {key:?} in sysroots")))?;
        }
        self.provider.validate().context("provider configuration")?;
        Ok(())
    }

    /// Sysroot for `arch`; it must exist when configured.
    pub fn sysroot(&self, arch: Arch) -> anyhow::Result<Option<PathBuf>> {
        match self.sysroots.get(&arch.to_string()) {
            Some(p) if !p.is_dir() => Err(env_error(format!(
                "sysroot for {arch} does not exist: {}",
                p.display()
            ))),
            Some(p) => Ok(Some(p.clone())),
            None => Ok(None),
        }
    }

    pub fn harness(&self, applet: &str) -> HarnessSpec {
        self.harness_profiles
            .get(applet)
            .cloned()
            .unwrap_or_else(|| HarnessSpec::default_profile(applet))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_resolve_against_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tool.json");
        std::fs::write(&path, r#"{"store_dir": "store", "provider": {"temperature": 0.2}}"#).unwrap();
        let cfg = ToolConfig::load(&path).unwrap();
        assert_eq!(cfg.store_dir(), dir.path().join("store"));
        assert_eq!(cfg.provider.temperature, 0.2);
        assert_eq!(cfg.provider.model_id, "gpt-4-0613");
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_shared_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tool.json");
        std::fs::write(&path, r#"{"api_key": "x"}"#).unwrap();
        assert!(ToolConfig::load(&path).is_err());
        let same = ToolConfig {
            store_dir: Some("d".into()),
            dump_dir: Some("d".into()),
            ..Default::default()
        };
        assert!(same.validate().is_err());
    }

    #[test]
    fn stock_harness_unless_overridden() {
        let mut cfg = ToolConfig::default();
        assert_eq!(cfg.harness("awk").argv_template, ["{target}", "awk", "-f", "@@"]);
        cfg.harness_profiles.insert("awk".into(), HarnessSpec::new(["{target}", "@@"]));
        assert_eq!(cfg.harness("awk").argv_template, ["{target}", "@@"]);
    }
}
