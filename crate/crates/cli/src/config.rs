//! Experiment files: one TOML document per experiment, every section optional.

use std::path::{Path, PathBuf};

use ghnforge::archgraph::ArchSpaceConfig;
use ghnforge::data::SynthConfig;
use ghnforge::evalkit::{EvalBudget, TransferConfig, Variant};
use ghnforge::ghn::GhnConfig;
use ghnforge::target_net::FinetuneSchedule;
use ghnforge::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "GHNFORGE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Run seed. Copied into the hypernetwork, training, fine-tuning and
    /// transfer seeds; the space and data generators keep their own.
    pub seed: u64,
    pub space: ArchSpaceConfig,
    pub heldout: HeldOutConfig,
    pub data: DataConfig,
    #[serde(with = "ghn_section")]
    pub ghn: GhnConfig,
    pub train: TrainConfig,
    pub eval: EvalBudget,
    pub finetune: FinetuneConfig,
    pub transfer: TransferSection,
    pub analyze: AnalyzeConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            space: ArchSpaceConfig::default(),
            heldout: HeldOutConfig::default(),
            data: DataConfig::default(),
            ghn: GhnConfig::default(),
            train: TrainConfig::default(),
            eval: EvalBudget::default(),
            finetune: FinetuneConfig::default(),
            transfer: TransferSection::default(),
            analyze: AnalyzeConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Held-out architectures: drawn from the training generator with another
/// seed, never repeating a training structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeldOutConfig {
    pub n_archs: usize,
    pub seed: u64,
    pub name_prefix: String,
}

impl Default for HeldOutConfig {
    fn default() -> Self {
        Self {
            n_archs: 10,
            seed: 1,
            name_prefix: "heldout".into(),
        }
    }
}

/// A dataset directory, or the procedural generator when `dir` is unset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub synthetic: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Scale of the noise added to predicted parameters before fine-tuning.
    pub beta: f64,
    pub schedule: FinetuneSchedule,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            beta: 1e-5,
            schedule: FinetuneSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub protocol: TransferConfig,
    pub data: DataConfig,
}

impl Default for TransferSection {
    fn default() -> Self {
        let mut data = DataConfig::default();
        data.synthetic.name = "synth5".into();
        data.synthetic.num_classes = 5;
        data.synthetic.seed = 1;
        Self {
            protocol: TransferConfig::default(),
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    /// Validation images propagated by the variance probe.
    pub probe_batch: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self { probe_batch: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
    /// `[reg_coef, weight_decay]` pairs.
    pub regs: Vec<[f64; 2]>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            regs: vec![[3e-5, 1e-2], [0.0, 1e-2]],
            seeds: vec![0, 1, 2],
        }
    }
}

/// `[ghn]` accepts `preset = "T" | "S" | "L" | "XL"` plus overrides of any
/// field of that preset.
mod ghn_section {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(c: &GhnConfig, s: S) -> Result<S::Ok, S::Error> {
        c.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<GhnConfig, D::Error> {
        let mut table = toml::Table::deserialize(d)?;
        let preset = match table.remove("preset") {
            None => "T".to_string(),
            Some(toml::Value::String(s)) => s,
            Some(v) => return Err(D::Error::custom(format!("preset must be a string, got {v}"))),
        };
        let base = GhnConfig::preset(&preset).ok_or_else(|| D::Error::custom(format!("unknown preset `{preset}`")))?;
        let mut merged = toml::Table::try_from(&base).map_err(D::Error::custom)?;
        merged.extend(table);
        GhnConfig::deserialize(toml::Value::Table(merged)).map_err(D::Error::custom)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Applies the seed override from the environment and propagates the
    /// run seed, then validates every section.
    pub fn resolve(mut self, env_seed: Option<&str>) -> Result<Self, CliError> {
        if let Some(s) = env_seed {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        self.ghn.seed = self.seed;
        self.train.seed = self.seed;
        self.finetune.schedule.seed = self.seed;
        self.transfer.protocol.seed = self.seed;
        self.space.validate()?;
        self.ghn.validate()?;
        self.train.validate()?;
        self.finetune.schedule.validate()?;
        if self.heldout.n_archs == 0 {
            return Err(CliError::Config("heldout.n_archs must be positive".into()));
        }
        if self.eval.batch == 0 || self.analyze.probe_batch == 0 {
            return Err(CliError::Config("eval.batch and analyze.probe_batch must be positive".into()));
        }
        Ok(self)
    }

    /// Canonical TOML of the resolved configuration; its hash identifies a run.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let err = ExperimentConfig::parse("[train]\nepochz = 3\n").unwrap_err();
        assert!(err.contains("epochz"), "{err}");
        assert!(ExperimentConfig::parse("[ghn]\nlayerz = 3\n").unwrap_err().contains("layerz"));
    }

    #[test]
    fn ghn_preset_with_overrides() {
        let c = ExperimentConfig::parse("[ghn]\npreset = \"S\"\nlayers = 1\n").unwrap();
        let s = GhnConfig::preset("S").unwrap();
        assert_eq!(c.ghn.layers, 1);
        assert_eq!(c.ghn.hidden, s.hidden);
        assert!(ExperimentConfig::parse("[ghn]\npreset = \"Q\"\n").is_err());
    }

    #[test]
    fn seed_override_propagates() {
        let c = ExperimentConfig::parse("seed = 3\n").unwrap().resolve(Some("11")).unwrap();
        assert_eq!((c.seed, c.ghn.seed, c.train.seed, c.finetune.schedule.seed), (11, 11, 11, 11));
        assert!(ExperimentConfig::default().resolve(Some("x")).is_err());
    }

    #[test]
    fn canonical_form_round_trips() {
        let c = ExperimentConfig::default().resolve(None).unwrap();
        assert_eq!(ExperimentConfig::parse(&c.canonical()).unwrap(), c);
    }
}
