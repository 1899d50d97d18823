//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::Stage;
use crate::contrastive::{ContrastiveConfig, ContrastiveMode, TOKEN_DIM};
use crate::diffusion::{DdimConfig, DenoiserConfig};
use crate::encoder::PatchConfig;
use crate::error::{Error, Result};
use crate::synthdata::dataset::{DatasetConfig, WindowDirection};
use crate::synthdata::scene::CAPTION_LEN;
use crate::synthdata::select::SelectionConfig;

/// Contrastive stage setting, including skipping the stage entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContrastiveSetting {
    Full,
    Text,
    Image,
    Off,
}

impl ContrastiveSetting {
    pub fn mode(self) -> Option<ContrastiveMode> {
        match self {
            Self::Full => Some(ContrastiveMode::Full),
            Self::Text => Some(ContrastiveMode::Text),
            Self::Image => Some(ContrastiveMode::Image),
            Self::Off => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceMode {
    /// Negative condition from the averaged fMRI.
    Adversarial,
    /// Null negative condition.
    ClassifierFree,
}

/// Which split's averaged fMRI forms the adversarial negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeSource {
    Test,
    Train,
}

/// Parsing and canonical rendering of one config value.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! parse_num {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("`{s}`: {e}"))
            }
            fn render(&self) -> String {
                format!("{self:?}")
            }
        }
    )*};
}
parse_num!(usize, u64, f64);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("`{s}` is not true|false")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

macro_rules! config_enum {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok(<$t>::$v),)*
                    _ => Err(format!("`{s}` is not one of {}", [$($s),*].join("|"))),
                }
            }
            fn render(&self) -> String {
                match self { $(<$t>::$v => $s.to_string(),)* }
            }
        }
    };
}
config_enum!(ContrastiveSetting { Full => "full", Text => "text", Image => "image", Off => "off" });
config_enum!(GuidanceMode { Adversarial => "adversarial", ClassifierFree => "classifier-free" });
config_enum!(NegativeSource { Test => "test", Train => "train" });
config_enum!(WindowDirection { Forward => "forward", Backward => "backward" });

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr => $stage:ident ),* $(,)?) => {
        /// Every knob of a run. Each key belongs to the first stage it
        /// affects; a stage's fingerprint covers its keys and those of all
        /// upstream stages.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Set one key from its text form. Unknown keys are rejected.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("key `{key}`: {e}")))?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// `(key, rendered value, owning stage)` in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String, Stage)> {
                vec![$( (stringify!($name), ConfigValue::render(&self.$name), Stage::$stage), )*]
            }
        }
    };
}

run_config! {
    /// Base seed for data generation, initialization and sampling.
    seed: u64 = 7 => GenData,
    train_scans: usize = 432 => GenData,
    test_scans: usize = 120 => GenData,
    voxels: usize = 256 => GenData,
    repeats: usize = 6 => GenData,
    snr: f64 = 1.0 => GenData,
    tr_seconds: f64 = 2.0 => GenData,
    fps: usize = 3 => GenData,
    min_scene_frames: usize = 9 => GenData,
    max_scene_frames: usize = 24 => GenData,
    region_semantic: f64 = 0.25 => GenData,
    region_motion: f64 = 0.125 => GenData,
    region_luminance: f64 = 0.125 => GenData,
    select_alpha: f64 = 0.01 => GenData,
    select_keep: f64 = 0.5 => GenData,
    select_significance: bool = true => GenData,

    patch_size: usize = 8 => Pretrain,
    embed_dim: usize = 64 => Pretrain,
    depth: usize = 4 => Pretrain,
    heads: usize = 4 => Pretrain,
    decoder_dim: usize = 32 => Pretrain,
    decoder_depth: usize = 2 => Pretrain,
    mask_ratio: f64 = 0.75 => Pretrain,
    latent_tokens: usize = 8 => Pretrain,
    cond_dim: usize = 32 => Pretrain,
    dropout: f64 = 0.6 => Pretrain,
    pretrain_steps: usize = 200 => Pretrain,
    pretrain_lr: f64 = 1e-3 => Pretrain,
    pretrain_batch: usize = 32 => Pretrain,

    window: usize = 2 => Contrastive,
    /// Scans between a clip and the first fMRI scan paired with it.
    hrf_shift_scans: usize = 3 => Contrastive,
    window_direction: WindowDirection = WindowDirection::Forward => Contrastive,
    contrastive: ContrastiveSetting = ContrastiveSetting::Full => Contrastive,
    contrastive_steps: usize = 400 => Contrastive,
    contrastive_lr: f64 = 5e-4 => Contrastive,
    contrastive_batch: usize = 32 => Contrastive,
    /// Logit scale of the contrastive loss.
    eps: f64 = 20.0 => Contrastive,
    contrastive_symmetric: bool = false => Contrastive,
    caption_synonym_prob: f64 = 0.3 => Contrastive,
    crop_prob: f64 = 0.5 => Contrastive,
    crop_margin: usize = 2 => Contrastive,
    sparsify: f64 = 0.1 => Contrastive,

    den_dim: usize = 32 => TrainGen,
    den_depth: usize = 2 => TrainGen,
    den_heads: usize = 2 => TrainGen,
    den_patch: usize = 2 => TrainGen,
    den_out_init_std: f64 = 0.02 => TrainGen,
    timesteps: usize = 100 => TrainGen,
    gen_steps: usize = 600 => TrainGen,
    gen_lr: f64 = 1e-3 => TrainGen,
    gen_batch: usize = 16 => TrainGen,
    /// Probability of replacing a condition with the null condition.
    cond_drop: f64 = 0.1 => TrainGen,

    cotrain_steps: usize = 500 => Cotrain,
    cotrain_lr: f64 = 5e-4 => Cotrain,
    cotrain_batch: usize = 16 => Cotrain,

    guidance: GuidanceMode = GuidanceMode::Adversarial => Sample,
    negative_source: NegativeSource = NegativeSource::Test => Sample,
    guidance_scale: f64 = 12.5 => Sample,
    ddim_steps: usize = 50 => Sample,
    clip_x0: f64 = 3.0 => Sample,
    /// Seed of the DDIM start noise; 0 derives it from `seed`.
    sample_seed: u64 = 0 => Sample,
    /// Test items to reconstruct, evenly spaced; 0 means all.
    sample_items: usize = 0 => Sample,

    nway_trials: usize = 100 => Evaluate,
    /// Ground-truth top-K of the N-way test; 0 uses the prediction-side K.
    nway_gt_k: usize = 0 => Evaluate,

    /// Seeds per variant in the ablation suite.
    ablation_seeds: usize = 5 => Ablate,
}

impl RunConfig {
    /// The reduced profile used by the test suites.
    pub fn quick() -> Self {
        Self {
            train_scans: 240,
            test_scans: 48,
            voxels: 128,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            decoder_dim: 16,
            decoder_depth: 1,
            pretrain_batch: 16,
            contrastive_steps: 200,
            contrastive_batch: 24,
            gen_steps: 300,
            gen_batch: 8,
            cotrain_steps: 200,
            cotrain_batch: 8,
            ddim_steps: 20,
            sample_items: 24,
            nway_trials: 50,
            ..Self::default()
        }
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(Self::default(), text)
    }

    pub fn parse_over(mut base: Self, text: &str) -> Result<Self> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
            base.set(k.trim(), v.trim())?;
        }
        base.validate()?;
        Ok(base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text: every key, one per line, in declaration order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v, _) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    /// Fingerprint of the keys feeding `stage`: its own and every
    /// upstream stage's.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let upstream = stage.upstream();
        let mut h = Sha256::new();
        for (k, v, owner) in self.entries() {
            if owner == stage || upstream.contains(&owner) {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.dataset().validate()?;
        self.patch().validate()?;
        self.denoiser().validate()?;
        if !(1..=3).contains(&self.window) {
            return bad(format!("window {} must be 1, 2 or 3", self.window));
        }
        if self.latent_tokens != CAPTION_LEN || self.cond_dim != TOKEN_DIM {
            return bad(format!(
                "latent_tokens x cond_dim must be {CAPTION_LEN} x {TOKEN_DIM} so caption and fMRI conditions share a shape"
            ));
        }
        if !(self.select_alpha > 0.0 && self.select_alpha < 1.0) || !(self.select_keep > 0.0 && self.select_keep <= 1.0) {
            return bad("select_alpha must be in (0,1) and select_keep in (0,1]".into());
        }
        for (name, v) in [
            ("pretrain_batch", self.pretrain_batch),
            ("contrastive_batch", self.contrastive_batch),
            ("gen_batch", self.gen_batch),
            ("cotrain_batch", self.cotrain_batch),
            ("ddim_steps", self.ddim_steps),
            ("nway_trials", self.nway_trials),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.contrastive_batch < 2 {
            return bad("contrastive_batch must be at least 2".into());
        }
        for (name, v) in [
            ("pretrain_lr", self.pretrain_lr),
            ("contrastive_lr", self.contrastive_lr),
            ("gen_lr", self.gen_lr),
            ("cotrain_lr", self.cotrain_lr),
            ("eps", self.eps),
            ("clip_x0", self.clip_x0),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive and finite"));
            }
        }
        for (name, v) in [
            ("cond_drop", self.cond_drop),
            ("caption_synonym_prob", self.caption_synonym_prob),
            ("crop_prob", self.crop_prob),
            ("sparsify", self.sparsify),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1)"));
            }
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return bad("guidance_scale must be finite and non-negative".into());
        }
        if self.timesteps < 2 || self.ddim_steps > self.timesteps {
            return bad(format!("ddim_steps {} must not exceed timesteps {}", self.ddim_steps, self.timesteps));
        }
        if self.test_scans < 2 || self.sample_items == 1 || self.sample_items > self.test_scans {
            return bad(format!("sample_items {} must be 0 or in 2..={}", self.sample_items, self.test_scans));
        }
        if 2 * self.crop_margin >= crate::synthdata::scene::FRAME_SIZE {
            return bad("crop_margin too large".into());
        }
        Ok(())
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            train_scans: self.train_scans,
            test_scans: self.test_scans,
            voxels: self.voxels,
            repeats: self.repeats,
            snr: self.snr,
            tr_seconds: self.tr_seconds,
            fps: self.fps,
            min_scene_frames: self.min_scene_frames,
            max_scene_frames: self.max_scene_frames,
            region_fractions: [self.region_semantic, self.region_motion, self.region_luminance],
            selection: SelectionConfig {
                alpha: self.select_alpha,
                keep_fraction: self.select_keep,
                significance_filter: self.select_significance,
            },
        }
    }

    pub fn patch(&self) -> PatchConfig {
        PatchConfig {
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            decoder_dim: self.decoder_dim,
            decoder_depth: self.decoder_depth,
            mask_ratio: self.mask_ratio,
            latent_tokens: self.latent_tokens,
            cond_dim: self.cond_dim,
            dropout: self.dropout,
            temporal: true,
        }
    }

    pub fn contrastive_config(&self) -> Option<ContrastiveConfig> {
        self.contrastive.mode().map(|mode| ContrastiveConfig {
            eps: self.eps,
            mode,
            symmetric: self.contrastive_symmetric,
            normalize: true,
        })
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            dim: self.den_dim,
            depth: self.den_depth,
            heads: self.den_heads,
            patch: self.den_patch,
            cond_tokens: self.latent_tokens,
            cond_dim: self.cond_dim,
            out_init_std: self.den_out_init_std,
        }
    }

    pub fn ddim(&self) -> DdimConfig {
        DdimConfig {
            steps: self.ddim_steps,
            clip_x0: Some(self.clip_x0),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        for cfg in [RunConfig::default(), RunConfig::quick()] {
            let back = RunConfig::parse(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        assert_eq!(RunConfig::KEYS.len(), RunConfig::default().entries().len());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::parse("no_such_key = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("window = 4"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("contrastive = both"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("window"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("cond_dim = 16"), Err(Error::Config(_))));
        let c = RunConfig::parse("# comment\nwindow = 3  # trailing\nguidance = classifier-free\n").unwrap();
        assert_eq!(c.window, 3);
        assert_eq!(c.guidance, GuidanceMode::ClassifierFree);
    }

    #[test]
    fn stage_hashes_follow_the_dependency_graph() {
        let base = RunConfig::quick();
        let w1 = RunConfig { window: 1, ..base.clone() };
        assert_eq!(base.stage_hash(Stage::Pretrain), w1.stage_hash(Stage::Pretrain));
        assert_eq!(base.stage_hash(Stage::TrainGen), w1.stage_hash(Stage::TrainGen));
        assert_ne!(base.stage_hash(Stage::Contrastive), w1.stage_hash(Stage::Contrastive));
        assert_ne!(base.stage_hash(Stage::Evaluate), w1.stage_hash(Stage::Evaluate));
        let cf = RunConfig { guidance: GuidanceMode::ClassifierFree, ..base.clone() };
        assert_eq!(base.stage_hash(Stage::Cotrain), cf.stage_hash(Stage::Cotrain));
        assert_ne!(base.stage_hash(Stage::Sample), cf.stage_hash(Stage::Sample));
        let seeds = RunConfig { ablation_seeds: 2, ..base.clone() };
        assert_eq!(base.stage_hash(Stage::Evaluate), seeds.stage_hash(Stage::Evaluate));
        assert_ne!(base.hash(), seeds.hash());
    }
}
