//! Experiment configuration files.
//!
//! A config is a TOML document with a few top-level keys and one section per
//! concern. Every field has a default, so an empty file is a valid desk-scale
//! one-vs-rest run:
//!
//! ```toml
//! experiment = "ovr"
//! methods = ["adra", "knn-ad", "sad"]
//! seeds = 3
//!
//! [data]
//! image-size = 16
//!
//! [train]
//! epochs = 15
//! batch-size = 32
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use adra_core::baselines::{Method, MethodSpec};
use adra_core::datasets::{FactorSpec, SyntheticSpec};
use adra_core::model::{BackboneConfig, PartitionMode, Stage};
use adra_core::trainer::{Profile, TrainConfig};
use adra_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Ovr,
    Hoo,
    SmallMode,
    Disentangle,
    Pretrain,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Ovr => "ovr",
            Experiment::Hoo => "hoo",
            Experiment::SmallMode => "small-mode",
            Experiment::Disentangle => "disentangle",
            Experiment::Pretrain => "pretrain",
        }
    }
}

/// A method from the table, optionally with its own expert count, written
/// `adra` or `adra-k4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MethodEntry {
    pub method: Method,
    pub experts: Option<usize>,
}

impl MethodEntry {
    pub fn spec(&self) -> MethodSpec {
        MethodSpec::of(self.method)
    }
}

impl fmt::Display for MethodEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.experts {
            Some(k) => write!(f, "{}-k{k}", self.method),
            None => write!(f, "{}", self.method),
        }
    }
}

impl FromStr for MethodEntry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(method) = s.parse::<Method>() {
            return Ok(MethodEntry {
                method,
                experts: None,
            });
        }
        let bad = || Error::Config(format!("unknown method `{s}`"));
        let (name, k) = s.rsplit_once("-k").ok_or_else(bad)?;
        let method: Method = name.parse()?;
        let experts: usize = k.parse().map_err(|_| bad())?;
        if !MethodSpec::of(method).adapters {
            return Err(Error::Config(format!(
                "method {method} has no adapters to size"
            )));
        }
        Ok(MethodEntry {
            method,
            experts: Some(experts),
        })
    }
}

impl Serialize for MethodEntry {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MethodEntry {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct DataSection {
    pub image_size: usize,
    pub noise_std: f32,
    pub jitter: f32,
    pub classes: usize,
    pub held_out_colors: usize,
    pub checkerboard: bool,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Exposure corpus size; all reserved samples when absent.
    pub corpus_size: Option<usize>,
    /// Directory holding `train.adra`, `test.adra` and `reserve.adra`;
    /// replaces generation when set.
    pub dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        DataSection {
            image_size: s.factors.image_size,
            noise_std: s.factors.noise_std,
            jitter: s.jitter,
            classes: s.classes,
            held_out_colors: s.held_out_colors,
            checkerboard: s.checkerboard,
            train_per_class: s.train_per_class,
            test_per_class: s.test_per_class,
            seed: 1,
            corpus_size: None,
            dir: None,
        }
    }
}

impl DataSection {
    pub fn factors(&self) -> FactorSpec {
        FactorSpec {
            image_size: self.image_size,
            noise_std: self.noise_std,
            ..FactorSpec::default()
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            factors: self.factors(),
            classes: self.classes,
            held_out_colors: self.held_out_colors,
            checkerboard: self.checkerboard,
            jitter: self.jitter,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ModelSection {
    pub channels: Vec<usize>,
    pub blocks: usize,
    pub stem_pool: bool,
    pub embedding_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = BackboneConfig::desk();
        ModelSection {
            channels: d.stages.iter().map(|s| s.channels).collect(),
            blocks: d.stages[0].blocks,
            stem_pool: d.stem_pool,
            embedding_dim: d.embedding_dim,
        }
    }
}

/// Training overrides; unset fields keep the profile defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainSection {
    pub lr: Option<f32>,
    pub momentum: Option<f32>,
    pub weight_decay: Option<f32>,
    pub epochs: Option<usize>,
    pub milestones: Option<Vec<usize>>,
    pub batch_size: Option<usize>,
    pub seeds: Option<usize>,
    pub experts: Option<usize>,
    pub l2sp_strength: Option<f32>,
}

impl TrainSection {
    /// Apply the overrides in `other` on top of `self`.
    pub fn merge(&mut self, other: &TrainSection) {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if other.$f.is_some() {
                    self.$f = other.$f.clone();
                }
            )*};
        }
        take!(
            lr,
            momentum,
            weight_decay,
            epochs,
            milestones,
            batch_size,
            seeds,
            experts,
            l2sp_strength
        );
    }

    pub fn resolve(&self, profile: Profile) -> TrainConfig {
        let mut t = TrainConfig::profile(profile);
        if let Some(e) = self.epochs {
            t.epochs = e;
            t.milestones = TrainConfig::scaled_milestones(e);
        }
        if let Some(m) = &self.milestones {
            t.milestones = m.clone();
        }
        t.lr = self.lr.unwrap_or(t.lr);
        t.momentum = self.momentum.unwrap_or(t.momentum);
        t.weight_decay = self.weight_decay.unwrap_or(t.weight_decay);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.seeds = self.seeds.unwrap_or(t.seeds);
        t.experts = self.experts.unwrap_or(t.experts);
        t.l2sp_strength = self.l2sp_strength.unwrap_or(t.l2sp_strength);
        t
    }
}

/// Settings of the classification task the backbone is pretrained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub train_per_class: usize,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            epochs: 8,
            batch_size: 32,
            lr: 0.02,
            train_per_class: 300,
            seed: 1000,
        }
    }
}

impl PretrainSection {
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            milestones: TrainConfig::scaled_milestones(self.epochs),
            batch_size: self.batch_size,
            mode: PartitionMode::Scratch,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SmallModeSection {
    /// `(primary, secondary)` class pairs.
    pub pairs: Vec<[usize; 2]>,
    pub ratios: Vec<f64>,
}

impl Default for SmallModeSection {
    fn default() -> Self {
        SmallModeSection {
            pairs: vec![[0, 1], [2, 3], [4, 5]],
            ratios: vec![0.0, 0.05, 0.1, 0.25, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct DisentangleSection {
    /// `(shape, color)` pairs, each defining one task whose nominal set is
    /// that pair's slice of the factor grid.
    pub nominal: Vec<[u32; 2]>,
}

impl Default for DisentangleSection {
    fn default() -> Self {
        DisentangleSection {
            nominal: vec![[0, 0]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub profile: String,
    pub methods: Vec<MethodEntry>,
    /// Task classes to run; every class when empty.
    pub classes: Vec<usize>,
    /// Number of seeds; overrides `train.seeds`.
    pub seeds: Option<usize>,
    pub seed_base: u64,
    pub output_dir: PathBuf,
    /// Pretrained snapshot; `<output-dir>/backbone.adrb` when absent.
    pub backbone: Option<PathBuf>,
    /// Write an adapter bundle for every adapter-based cell.
    pub save_bundles: bool,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub pretrain: PretrainSection,
    pub small_mode: SmallModeSection,
    pub disentangle: DisentangleSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: Experiment::Ovr,
            profile: "desk".into(),
            methods: vec![
                MethodEntry {
                    method: Method::Adra,
                    experts: None,
                },
                MethodEntry {
                    method: Method::KnnAd,
                    experts: None,
                },
            ],
            classes: Vec::new(),
            seeds: None,
            seed_base: 0,
            output_dir: PathBuf::from("out"),
            backbone: None,
            save_bundles: false,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            pretrain: PretrainSection::default(),
            small_mode: SmallModeSection::default(),
            disentangle: DisentangleSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn profile(&self) -> Result<Profile> {
        self.profile.parse()
    }

    /// Training settings with profile defaults and overrides applied.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = self.train.resolve(self.profile()?);
        if let Some(s) = self.seeds {
            t.seeds = s;
        }
        Ok(t)
    }

    /// Seeds of the run: `seed-base, seed-base + 1, ...`.
    pub fn seed_list(&self) -> Result<Vec<u64>> {
        let n = self.train_config()?.seeds as u64;
        Ok((0..n).map(|i| self.seed_base + i).collect())
    }

    /// The backbone shape; the classifier is sized for the reserved pairs
    /// that pretraining classifies.
    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            stages: self
                .model
                .channels
                .iter()
                .map(|&channels| Stage {
                    channels,
                    blocks: self.model.blocks,
                })
                .collect(),
            input_channels: 3,
            input_resolution: self.data.image_size,
            stem_pool: self.model.stem_pool,
            embedding_dim: self.model.embedding_dim,
            class_count: self.data.synthetic().reserve_pairs().len().max(2),
        }
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.backbone
            .clone()
            .unwrap_or_else(|| self.output_dir.join("backbone.adrb"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() && self.experiment != Experiment::Pretrain {
            return Err(Error::Config("no methods configured".into()));
        }
        self.data.synthetic().validate()?;
        self.backbone_config().validate()?;
        let train = self.train_config()?;
        train.validate(true)?;
        for m in &self.methods {
            if let Some(k) = m.experts {
                TrainConfig {
                    experts: k,
                    ..train.clone()
                }
                .validate(true)?;
            }
        }
        if let Some(&c) = self.classes.iter().find(|&&c| c >= self.data.classes) {
            return Err(Error::Config(format!("class {c} out of range")));
        }
        if let Some(dir) = &self.data.dir {
            for f in ["train.adra", "test.adra", "reserve.adra"] {
                if !dir.join(f).is_file() {
                    return Err(Error::Config(format!(
                        "missing dataset file {}",
                        dir.join(f).display()
                    )));
                }
            }
        }
        match self.experiment {
            Experiment::SmallMode => {
                if self.small_mode.pairs.is_empty() || self.small_mode.ratios.is_empty() {
                    return Err(Error::Config(
                        "small-mode needs class pairs and ratios".into(),
                    ));
                }
                if let Some(r) = self
                    .small_mode
                    .ratios
                    .iter()
                    .find(|r| !(0.0..=1.0).contains(*r))
                {
                    return Err(Error::Config(format!("ratio {r} outside [0, 1]")));
                }
                for &[a, b] in &self.small_mode.pairs {
                    if a == b || a >= self.data.classes || b >= self.data.classes {
                        return Err(Error::Config(format!("invalid class pair ({a}, {b})")));
                    }
                }
            }
            Experiment::Disentangle => {
                let f = self.data.factors();
                if self.disentangle.nominal.is_empty() {
                    return Err(Error::Config(
                        "disentangle needs at least one nominal pair".into(),
                    ));
                }
                for &[s, c] in &self.disentangle.nominal {
                    if s as usize >= f.shapes || c as usize >= f.colors {
                        return Err(Error::Config(format!(
                            "nominal pair ({s}, {c}) out of range"
                        )));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::default());
    }

    #[test]
    fn method_entries() {
        let e: MethodEntry = "adra-k4".parse().unwrap();
        assert_eq!(e.experts, Some(4));
        assert_eq!(e.to_string(), "adra-k4");
        assert_eq!(
            "knn-ad".parse::<MethodEntry>().unwrap().method,
            Method::KnnAd
        );
        assert!("tf-k2".parse::<MethodEntry>().is_err());
        assert!("adra-kx".parse::<MethodEntry>().is_err());
    }

    #[test]
    fn overrides_and_round_trip() {
        let cfg = ExperimentConfig::from_toml(
            "experiment = \"small-mode\"\nmethods = [\"adra-k1\", \"tf\"]\nprofile = \"paper\"\n[train]\nlr = 0.05\n",
        )
        .unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!((t.epochs, t.lr), (120, 0.05));
        assert_eq!(t.milestones, vec![80, 100]);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("profile = \"laptop\"")
            .unwrap()
            .validate()
            .is_err());
    }
}
