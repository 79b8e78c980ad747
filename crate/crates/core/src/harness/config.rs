//! Experiment configuration (TOML). Every field has a desk-scale default,
//! so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackLr;
use crate::embedding::{EmbedStrategy, DESK_TRAIN_BATCH, DESK_WM_BATCH};
use crate::error::{Error, Result};
use crate::nn::{LrSchedule, ModelKind, ModelSpec};
use crate::triggers::{LabelScheme, PatchSpec, TriggerType, DEFAULT_FGSM_EPSILON, DEFAULT_NOISE_STD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub stages: Stages,
    pub train: TrainSection,
    pub triggers: TriggerSection,
    pub embed: EmbedSection,
    pub attack: AttackSection,
    pub restore: RestoreSection,
    pub blend: BlendSection,
    pub extract: ExtractSection,
    pub landscape: LandscapeSection,
    pub verify: VerifySection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            stages: Stages::default(),
            train: TrainSection::default(),
            triggers: TriggerSection::default(),
            embed: EmbedSection::default(),
            attack: AttackSection::default(),
            restore: RestoreSection::default(),
            blend: BlendSection::default(),
            extract: ExtractSection::default(),
            landscape: LandscapeSection::default(),
            verify: VerifySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Write measured wall time; off keeps metrics byte-reproducible.
    pub record_wall_time: bool,
    pub save_checkpoints: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 1,
            out_dir: PathBuf::from("runs"),
            record_wall_time: false,
            save_checkpoints: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub num_classes: usize,
    /// Synthetic train pool size per class.
    pub per_class: usize,
    pub test_per_class: usize,
    /// Seed of the data generator and the split; defaults to the run seed.
    pub data_seed: Option<u64>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Cap on the train pool read from IDX files.
    pub max_pool: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            num_classes: 10,
            per_class: 500,
            test_per_class: 100,
            data_seed: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            max_pool: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Hidden widths (MLP) or channel counts (CNN); empty means the default.
    pub widths: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mlp,
            widths: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    /// Clean pretraining (needed for FGSM triggers and the clean control).
    pub pretrain: bool,
    pub attack: bool,
    pub restore: bool,
    pub blend: bool,
    pub landscape: bool,
    pub extract: bool,
    /// Pass the clean model through the attack + restore pipeline.
    pub control: bool,
    pub verify: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            pretrain: true,
            attack: true,
            restore: true,
            blend: true,
            landscape: true,
            extract: false,
            control: false,
            verify: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub train_batch: usize,
    pub wm_batch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
}

const DESK_BATCH: usize = DESK_TRAIN_BATCH;

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            train_batch: DESK_BATCH,
            wm_batch: DESK_WM_BATCH,
            lr_start: 1e-3,
            lr_end: 1e-5,
            weight_decay: 1e-4,
        }
    }
}

impl TrainSection {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule::Cosine {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            total_epochs: self.epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    Noise,
    Content,
    Unrelated,
    Fgsm,
}

impl TriggerKind {
    pub const ALL: [TriggerKind; 4] = [
        TriggerKind::Noise,
        TriggerKind::Content,
        TriggerKind::Unrelated,
        TriggerKind::Fgsm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TriggerKind::Noise => "noise",
            TriggerKind::Content => "content",
            TriggerKind::Unrelated => "unrelated",
            TriggerKind::Fgsm => "fgsm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Single,
    Multi,
}

impl LabelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" => Some(LabelKind::Single),
            "multi" => Some(LabelKind::Multi),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerSection {
    #[serde(rename = "type")]
    pub kind: TriggerKind,
    pub labels: LabelKind,
    pub target: usize,
    pub noise_strength: f32,
    pub fgsm_epsilon: f32,
    pub patch_size: usize,
    pub ood_per_class: usize,
    pub ood_side: usize,
}

impl Default for TriggerSection {
    fn default() -> Self {
        Self {
            kind: TriggerKind::Noise,
            labels: LabelKind::Single,
            target: 0,
            noise_strength: DEFAULT_NOISE_STD,
            fgsm_epsilon: DEFAULT_FGSM_EPSILON,
            patch_size: 6,
            ood_per_class: 40,
            ood_side: 32,
        }
    }
}

impl TriggerSection {
    pub fn trigger_type(&self) -> TriggerType {
        match self.kind {
            TriggerKind::Noise => TriggerType::Noise {
                strength: self.noise_strength,
            },
            TriggerKind::Content => TriggerType::Content {
                patch: PatchSpec {
                    size: self.patch_size,
                    ..PatchSpec::default()
                },
            },
            TriggerKind::Unrelated => TriggerType::Unrelated {
                source: "synthetic-ood".into(),
            },
            TriggerKind::Fgsm => TriggerType::Fgsm {
                epsilon: self.fgsm_epsilon,
            },
        }
    }

    pub fn scheme(&self) -> LabelScheme {
        match self.labels {
            LabelKind::Single => LabelScheme::Single { target: self.target },
            LabelKind::Multi => LabelScheme::Multi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Joint,
    Rotation,
    Smoothed,
}

impl StrategyKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "joint" => Some(StrategyKind::Joint),
            "rotation" => Some(StrategyKind::Rotation),
            "smoothed" => Some(StrategyKind::Smoothed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub strategy: StrategyKind,
    pub n_copies: usize,
    pub noise_std: f32,
}

impl Default for EmbedSection {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Joint,
            n_copies: 4,
            noise_std: 0.01,
        }
    }
}

impl EmbedSection {
    pub fn strategy(&self) -> EmbedStrategy {
        match self.strategy {
            StrategyKind::Joint => EmbedStrategy::JointPoison,
            StrategyKind::Rotation => EmbedStrategy::LayerRotation,
            StrategyKind::Smoothed => EmbedStrategy::SmoothedGrad {
                n_copies: self.n_copies,
                noise_std: self.noise_std,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub lrs: Vec<AttackLr>,
    pub epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            lrs: AttackLr::ALL.to_vec(),
            epochs: 50,
            batch: DESK_BATCH,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreSection {
    pub epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub lr_small: f64,
    pub lr_med: f64,
    pub lr_big: f64,
}

impl Default for RestoreSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: DESK_BATCH,
            weight_decay: 1e-4,
            lr_small: AttackLr::Small.restore_lr(),
            lr_med: AttackLr::Med.restore_lr(),
            lr_big: AttackLr::Big.restore_lr(),
        }
    }
}

impl RestoreSection {
    pub fn lr_for(&self, attack: AttackLr) -> f64 {
        match attack {
            AttackLr::Small => self.lr_small,
            AttackLr::Med => self.lr_med,
            AttackLr::Big => self.lr_big,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlendSection {
    pub lr: AttackLr,
    pub mix_every: usize,
    pub train_batch: usize,
    pub finetune_batch: usize,
    pub epochs: usize,
}

impl Default for BlendSection {
    fn default() -> Self {
        Self {
            lr: AttackLr::Med,
            mix_every: 2,
            train_batch: DESK_BATCH,
            finetune_batch: DESK_BATCH,
            epochs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    pub epochs: usize,
    pub batch: usize,
    pub budget: Option<usize>,
    /// Attack lr whose restore settings are reused on the surrogate.
    pub restore_lr: AttackLr,
}

impl Default for ExtractSection {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: DESK_BATCH,
            budget: None,
            restore_lr: AttackLr::Small,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    Pca,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeSection {
    pub mode: DirectionMode,
    pub resolution: usize,
    /// Fixed half width of the square grid; `None` covers the trajectory.
    pub half_width: Option<f64>,
    pub margin: f64,
    /// Attack whose fine-tune + retrain trajectory is drawn.
    pub attack_lr: AttackLr,
    pub contour_levels: usize,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        Self {
            mode: DirectionMode::Pca,
            resolution: 41,
            half_width: None,
            margin: 0.25,
            attack_lr: AttackLr::Small,
            contour_levels: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub alpha: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            alpha: crate::protocols::DEFAULT_ALPHA,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn data_seed(&self) -> u64 {
        self.data.data_seed.unwrap_or(self.run.seed)
    }

    /// Directory holding this run's artifacts.
    pub fn run_dir(&self) -> PathBuf {
        self.run.out_dir.join(&self.run.name)
    }

    pub fn model_spec(&self, input_shape: [usize; 3]) -> ModelSpec {
        let mut spec = match self.model.kind {
            ModelKind::Mlp => ModelSpec::mlp(input_shape, self.data.num_classes),
            ModelKind::SmallCnn => ModelSpec::small_cnn(input_shape, self.data.num_classes),
        };
        if !self.model.widths.is_empty() {
            spec.widths = self.model.widths.clone();
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return bad(format!("run name {:?} must be a non-empty path component", self.run.name));
        }
        if self.data.num_classes < 2 {
            return bad("data.num_classes must be >= 2".into());
        }
        match self.data.source {
            DataSource::Synthetic => {
                if self.data.per_class == 0 || self.data.test_per_class == 0 {
                    return bad("synthetic data needs per_class and test_per_class >= 1".into());
                }
            }
            DataSource::Idx => {
                if self.data.train_images.is_none() || self.data.train_labels.is_none() {
                    return bad("idx data needs train_images and train_labels".into());
                }
                if self.data.test_images.is_some() != self.data.test_labels.is_some() {
                    return bad("test_images and test_labels must be given together".into());
                }
            }
        }
        if self.triggers.kind == TriggerKind::Fgsm && !self.stages.pretrain {
            return bad("fgsm triggers need the clean pretraining stage (stages.pretrain = true)".into());
        }
        if self.stages.control && !self.stages.pretrain {
            return bad("the clean control needs stages.pretrain = true".into());
        }
        if (self.stages.restore || self.stages.landscape || self.stages.control) && !self.stages.attack {
            return bad("restore, landscape and control stages need stages.attack = true".into());
        }
        if self.stages.landscape && !self.stages.restore {
            return bad("the landscape stage needs stages.restore = true".into());
        }
        if (self.stages.landscape || self.stages.control) && !self.attack.lrs.contains(&self.landscape.attack_lr) {
            return bad(format!(
                "landscape.attack_lr {} is not among attack.lrs",
                self.landscape.attack_lr.name()
            ));
        }
        if self.stages.attack && self.attack.lrs.is_empty() {
            return bad("attack.lrs is empty".into());
        }
        if let LabelKind::Single = self.triggers.labels {
            if self.triggers.target >= self.data.num_classes {
                return bad(format!("trigger target {} >= num_classes", self.triggers.target));
            }
        }
        if !(self.verify.alpha > 0.0 && self.verify.alpha < 1.0) {
            return bad("verify.alpha must be in (0, 1)".into());
        }
        if self.landscape.resolution < 2 || self.landscape.contour_levels == 0 {
            return bad("landscape.resolution must be >= 2 and contour_levels >= 1".into());
        }
        let positive = [
            ("train.epochs", self.train.epochs),
            ("train.train_batch", self.train.train_batch),
            ("train.wm_batch", self.train.wm_batch),
            ("attack.epochs", self.attack.epochs),
            ("attack.batch", self.attack.batch),
            ("restore.epochs", self.restore.epochs),
            ("restore.batch", self.restore.batch),
            ("blend.mix_every", self.blend.mix_every),
            ("blend.train_batch", self.blend.train_batch),
            ("blend.finetune_batch", self.blend.finetune_batch),
            ("blend.epochs", self.blend.epochs),
            ("extract.epochs", self.extract.epochs),
            ("extract.batch", self.extract.batch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be >= 1"));
        }
        self.train.schedule().validate()?;
        self.embed.strategy().validate()?;
        self.model_spec([28, 28, 1]).validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}
