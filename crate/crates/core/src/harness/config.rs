use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dapo::PipelineConfig;
use crate::error::{Error, Result};
use crate::fixtures::t2;
use crate::generator::{gen_random_mdp, GenParams};
use crate::mdp::StepMdp;
use crate::policy::TabularPolicy;
use crate::rng::stage_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum MdpSource {
    File { path: PathBuf },
    /// Generated with seed `stage_seed(master_seed, "mdp")`.
    Random { params: GenParams },
    Builtin { name: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ReferenceSource {
    #[default]
    Uniform,
    /// Policy CSV (`state,action,logit`).
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: MdpSource,
    #[serde(default)]
    pub reference: ReferenceSource,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn builtin_t2() -> Self {
        ExperimentConfig {
            mdp: MdpSource::Builtin { name: "t2".into() },
            reference: ReferenceSource::Uniform,
            pipeline: PipelineConfig::default(),
            master_seed: 0,
            output_dir: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if let MdpSource::Builtin { name } = &self.mdp {
            if name != "t2" {
                return Err(Error::Config(format!("unknown builtin MDP `{name}`")));
            }
        }
        Ok(())
    }

    /// Relative paths resolve against `base` (usually the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        if let MdpSource::File { path } = &mut self.mdp {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if let ReferenceSource::File { path } = &mut self.reference {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn load_mdp(&self) -> Result<StepMdp> {
        match &self.mdp {
            MdpSource::File { path } => StepMdp::load(path),
            MdpSource::Random { params } => StepMdp::from_file(&gen_random_mdp(params, stage_seed(self.master_seed, "mdp"))?),
            MdpSource::Builtin { name } if name == "t2" => Ok(t2()),
            MdpSource::Builtin { name } => Err(Error::Config(format!("unknown builtin MDP `{name}`"))),
        }
    }

    pub fn load_reference(&self, mdp: &StepMdp) -> Result<TabularPolicy> {
        match &self.reference {
            ReferenceSource::Uniform => Ok(TabularPolicy::uniform(mdp)),
            ReferenceSource::File { path } => {
                let p = TabularPolicy::read_csv(mdp, std::fs::File::open(path)?)?;
                Ok(p.with_tag("reference"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_and_defaults() {
        let cfg = ExperimentConfig::builtin_t2();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let minimal = ExperimentConfig::from_json(r#"{"mdp": {"kind": "builtin", "name": "t2"}}"#).unwrap();
        assert_eq!(minimal, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let zero = r#"{"mdp": {"kind": "builtin", "name": "t2"}, "pipeline": {"iterations": 0}}"#;
        assert!(matches!(ExperimentConfig::from_json(zero), Err(Error::Config(_))));
        let unknown = r#"{"mdp": {"kind": "builtin", "name": "t2"}, "bogus": 1}"#;
        assert!(ExperimentConfig::from_json(unknown).is_err());
        let name = r#"{"mdp": {"kind": "builtin", "name": "t9"}}"#;
        assert!(ExperimentConfig::from_json(name).is_err());
    }

    #[test]
    fn random_source_is_seeded_by_master_seed() {
        let text = r#"{"mdp": {"kind": "random", "params": {"depth": 3, "branching": 2}}, "master_seed": 4}"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.load_mdp().unwrap().to_file(), cfg.load_mdp().unwrap().to_file());
    }
}
