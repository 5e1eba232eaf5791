//! Sectioned `key = value` (TOML) configuration for the pipeline and the ablation suite.

use std::path::{Path, PathBuf};

use choroid::bionet::{BioNetConfig, BiomarkerConfig, UNetConfig, Variant, BIOMARKER_LR};
use choroid::phantom::PhantomConfig;
use choroid::shadow::DeshadowConfig;
use choroid::training::TrainConfig;
use choroid::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Parses TOML into `T`, reporting the offending key path on failure.
pub fn parse_toml<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config(origin, e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Error::config(if key == "." { origin.to_string() } else { key }, e.into_inner().to_string())
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_toml(&read_text(path)?, &path.display().to_string())
}

/// Re-roots a validation error at `section`: validators name keys after themselves
/// (`phantom.height`, `train.batch_size`), so their first path component is replaced.
fn prefixed(section: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { key, msg } => match key.split_once('.') {
            Some((_, rest)) => Error::config(format!("{section}.{rest}"), msg),
            None => Error::config(section, msg),
        },
        other => other,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
}

/// What the pipeline analyses: a volume on disk, or a phantom generated from `phantom`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    pub volume: Option<PathBuf>,
    pub phantom: PhantomConfig,
}

impl Default for InputSection {
    fn default() -> Self {
        Self { volume: None, phantom: PhantomConfig::desk().with_seed(1) }
    }
}

/// A model stage: load `checkpoint` if given, else train on `n_train` generated phantoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection<M> {
    pub checkpoint: Option<PathBuf>,
    pub n_train: usize,
    pub model: M,
    pub train: TrainConfig,
}

impl<M> StageSection<M> {
    fn check(&self, name: &str) -> Result<()> {
        if self.checkpoint.is_none() && self.n_train == 0 {
            return Err(Error::config(format!("{name}.n_train"), "must be positive when no checkpoint is given"));
        }
        prefixed(&format!("{name}.train"), self.train.validate())
    }
}

fn epochs(max_epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig { max_epochs, initial_lr: lr, lr_drop_epochs: vec![], ..TrainConfig::default() }
}

impl Default for StageSection<BiomarkerConfig> {
    fn default() -> Self {
        Self {
            checkpoint: None,
            n_train: 60,
            model: BiomarkerConfig::default(),
            train: TrainConfig { crop_width: Some(64), ..epochs(15, BIOMARKER_LR) },
        }
    }
}

impl Default for StageSection<BioNetConfig> {
    fn default() -> Self {
        Self {
            checkpoint: None,
            n_train: 200,
            model: BioNetConfig::default(),
            train: TrainConfig { crop_width: Some(64), lr_drop_epochs: vec![6], ..epochs(8, 0.01) },
        }
    }
}

impl Default for StageSection<UNetConfig> {
    fn default() -> Self {
        Self { checkpoint: None, n_train: 5, model: UNetConfig::new(1, 1), train: TrainConfig { batch_size: 1, val_fraction: 0.0, ..epochs(20, 0.01) } }
    }
}

impl Default for StageSection<DeshadowConfig> {
    fn default() -> Self {
        Self { checkpoint: None, n_train: 16, model: DeshadowConfig::default(), train: epochs(60, 1e-3) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunSection,
    pub input: InputSection,
    /// Base anatomy for generated training phantoms; seeds are overridden per sample.
    pub training_phantom: PhantomConfig,
    pub biomarker: StageSection<BiomarkerConfig>,
    pub bionet: StageSection<BioNetConfig>,
    pub shadow_seg: StageSection<UNetConfig>,
    pub deshadow: StageSection<DeshadowConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            input: InputSection::default(),
            training_phantom: PhantomConfig::desk(),
            biomarker: StageSection::default(),
            bionet: StageSection::default(),
            shadow_seg: StageSection::default(),
            deshadow: StageSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = parse_toml(text, "pipeline")?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.volume.is_none() {
            prefixed("input.phantom", self.input.phantom.validate())?;
        }
        prefixed("training_phantom", self.training_phantom.validate())?;
        self.biomarker.check("biomarker")?;
        self.bionet.check("bionet")?;
        if self.bionet.model.variant.uses_bio() && self.biomarker.checkpoint.is_none() && self.biomarker.n_train == 0 {
            return Err(Error::config("biomarker", "the selected Bio-Net variant needs a biomarker net"));
        }
        self.shadow_seg.check("shadow_seg")?;
        prefixed("shadow_seg.model", self.shadow_seg.model.validate())?;
        self.deshadow.check("deshadow")?;
        prefixed("deshadow.model", self.deshadow.model.validate())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// One replicate per seed; every variant shares the replicate's seed.
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub n_train: usize,
    pub n_test: usize,
    pub phantom: PhantomConfig,
    pub model: BioNetConfig,
    pub train: TrainConfig,
    pub biomarker: StageSection<BiomarkerConfig>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            variants: Variant::ALL.to_vec(),
            n_train: 60,
            n_test: 20,
            phantom: PhantomConfig::desk(),
            model: BioNetConfig::default(),
            train: TrainConfig { crop_width: Some(64), lr_drop_epochs: vec![5], ..epochs(6, 0.01) },
            biomarker: StageSection::default(),
        }
    }
}

impl AblationConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = parse_toml(text, "ablation")?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("variants", "at least one variant is required"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("n_train", "n_train and n_test must be positive"));
        }
        prefixed("phantom", self.phantom.validate())?;
        prefixed("train", self.train.validate())?;
        if self.variants.iter().any(|v| v.uses_bio()) {
            self.biomarker.check("biomarker")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_key(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
        assert_eq!(AblationConfig::from_toml("").unwrap(), AblationConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_nested_key_names_its_path() {
        let e = PipelineConfig::from_toml("[deshadow.model.weights]\nstyle_loss = 1.0\n").unwrap_err();
        assert_eq!(config_key(e), "deshadow.model.weights.style_loss");
    }

    #[test]
    fn wrong_type_names_its_path() {
        let e = PipelineConfig::from_toml("[run]\nseed = \"seven\"\n").unwrap_err();
        assert_eq!(config_key(e), "run.seed");
    }

    #[test]
    fn validation_errors_carry_the_section() {
        let e = PipelineConfig::from_toml("[training_phantom]\nheight = 40\n").unwrap_err();
        assert_eq!(config_key(e), "training_phantom.layer_mean_thicknesses_px");
        let e = PipelineConfig::from_toml("[bionet.train]\nbatch_size = 0\n").unwrap_err();
        assert_eq!(config_key(e), "bionet.train.batch_size");
        let e = PipelineConfig::from_toml("[deshadow.model]\ncrop = 30\n").unwrap_err();
        assert_eq!(config_key(e), "deshadow.model.crop");
        let e = PipelineConfig::from_toml("[shadow_seg.model]\nlevels = 9\n").unwrap_err();
        assert_eq!(config_key(e), "shadow_seg.model.levels");
    }

    #[test]
    fn ablation_needs_seeds() {
        let e = AblationConfig::from_toml("seeds = []\n").unwrap_err();
        assert_eq!(config_key(e), "seeds");
        let e = AblationConfig::from_toml("[train]\nlr_drop_factor = 2.0\n").unwrap_err();
        assert_eq!(config_key(e), "train.lr_drop_factor");
    }

    #[test]
    fn variant_spellings_parse() {
        let c = AblationConfig::from_toml("variants = [\"baseline\", \"full\"]\n").unwrap();
        assert_eq!(c.variants, vec![Variant::Baseline, Variant::Full]);
    }
}
