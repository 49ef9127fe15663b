//! TOML configuration: defaults, file loading with strict key checking, flag
//! overrides, and the resolved-config echo every artifact embeds.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use siamdrop_core::dropout::MaskKind;
use siamdrop_core::synth::BenchProfile;
use siamdrop_core::track::{CombinerKind, MaskSpec, TrackerConfig};
use siamdrop_core::train::{Stage, TrainConfig};
use siamdrop_core::BackboneConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub backbone: BackboneSection,
    pub dropout: DropoutSection,
    pub combiner: CombinerSection,
    pub tracker: TrackerSection,
    pub trainer: TrainerSection,
    pub synth: SynthSection,
    pub paths: PathsSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            backbone: BackboneSection::default(),
            dropout: DropoutSection::default(),
            combiner: CombinerSection::default(),
            tracker: TrackerSection::default(),
            trainer: TrainerSection::default(),
            synth: SynthSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub seed: u64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let core = BackboneConfig::default();
        BackboneSection {
            channels: core.channels,
            kernel: core.kernel,
            strides: core.strides,
            seed: core.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DropoutSection {
    /// none | channel | segment | slice | mc
    pub kind: String,
    /// Pass count for the stochastic kinds (slot 0 is the identity).
    pub n: usize,
    pub rate: f32,
    /// Slice strip fractions; n for slice is 1 + 4 * len.
    pub fractions: Vec<f32>,
    pub seed: u64,
}

impl Default for DropoutSection {
    fn default() -> Self {
        DropoutSection {
            kind: "none".into(),
            n: 21,
            rate: 0.2,
            fractions: siamdrop_core::dropout::SLICE_FRACTIONS.to_vec(),
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CombinerSection {
    /// encoder | explicit
    pub kind: String,
    /// Cluster-overlap threshold for channel-style explicit combining.
    pub alpha_c: f64,
    /// Score rescale base for patch-style explicit combining.
    pub b: f64,
}

impl Default for CombinerSection {
    fn default() -> Self {
        CombinerSection {
            kind: "explicit".into(),
            alpha_c: 0.2,
            b: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerSection {
    pub exemplar_size: usize,
    pub search_size: usize,
    pub context: f32,
    pub scale_step: f32,
    pub scale_penalty: f32,
    pub scale_damping: f32,
    pub window_weight: f32,
    pub response_up: usize,
}

impl Default for TrackerSection {
    fn default() -> Self {
        let core = TrackerConfig::default();
        TrackerSection {
            exemplar_size: core.exemplar_size,
            search_size: core.search_size,
            context: core.context,
            scale_step: core.scale_step,
            scale_penalty: core.scale_penalty,
            scale_damping: core.scale_damping,
            window_weight: core.window_weight,
            response_up: core.response_up,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub batch: usize,
    pub epochs_pretrain: usize,
    pub epochs_head: usize,
    pub epochs_joint: usize,
    pub lr: f32,
    pub lr_decay: f32,
    pub lr_decay_every: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub pairs_per_sequence: usize,
    /// Held-out sequences scored after each epoch (0 skips validation).
    pub val_count: usize,
    pub seed: u64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            batch: 8,
            epochs_pretrain: 20,
            epochs_head: 10,
            epochs_joint: 5,
            lr: 1e-2,
            lr_decay: 0.5,
            lr_decay_every: 5,
            momentum: 0.9,
            weight_decay: 5e-4,
            pairs_per_sequence: 40,
            val_count: 0,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// easy | occlusion-heavy
    pub profile: String,
    pub count: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            profile: "easy".into(),
            count: 20,
            seed: 7,
        }
    }
}

/// Default file locations; command-line paths take precedence.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub data: Option<String>,
    pub weights: Option<String>,
    pub results: Option<String>,
    pub report: Option<String>,
}

impl Config {
    pub fn load(path: &std::path::Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Config = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if MaskKind::parse(&self.dropout.kind).is_none() {
            bail!(
                "dropout.kind must be one of none|channel|segment|slice|mc, got {:?}",
                self.dropout.kind
            );
        }
        if CombinerKind::parse(&self.combiner.kind).is_none() {
            bail!(
                "combiner.kind must be encoder or explicit, got {:?}",
                self.combiner.kind
            );
        }
        if BenchProfile::parse(&self.synth.profile).is_none() {
            bail!(
                "synth.profile must be easy or occlusion-heavy, got {:?}",
                self.synth.profile
            );
        }
        if self.backbone.channels.len() != self.backbone.strides.len() + 1 {
            bail!(
                "backbone.channels must have one more entry than backbone.strides ({} vs {})",
                self.backbone.channels.len(),
                self.backbone.strides.len()
            );
        }
        Ok(())
    }

    /// Flag overrides; `seed` retargets every seeded component at once.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        dropout: Option<&str>,
        combiner: Option<&str>,
    ) -> Result<()> {
        if let Some(s) = seed {
            self.dropout.seed = s;
            self.trainer.seed = s;
            self.synth.seed = s;
        }
        if let Some(d) = dropout {
            if MaskKind::parse(d).is_none() {
                bail!("--dropout must be one of none|channel|segment|slice|mc, got {d:?}");
            }
            self.dropout.kind = d.into();
        }
        if let Some(c) = combiner {
            if CombinerKind::parse(c).is_none() {
                bail!("--combiner must be encoder or explicit, got {c:?}");
            }
            self.combiner.kind = c.into();
        }
        Ok(())
    }

    /// The resolved-config text embedded in every artifact.
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            channels: self.backbone.channels.clone(),
            kernel: self.backbone.kernel,
            strides: self.backbone.strides.clone(),
            seed: self.backbone.seed,
        }
    }

    pub fn mask_spec(&self) -> MaskSpec {
        let kind = MaskKind::parse(&self.dropout.kind).expect("validated");
        if kind == MaskKind::None {
            MaskSpec::none()
        } else {
            MaskSpec {
                kind,
                n: self.dropout.n,
                rate: self.dropout.rate,
                fractions: self.dropout.fractions.clone(),
            }
        }
    }

    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig {
            exemplar_size: self.tracker.exemplar_size,
            search_size: self.tracker.search_size,
            context: self.tracker.context,
            scale_step: self.tracker.scale_step,
            scale_penalty: self.tracker.scale_penalty,
            scale_damping: self.tracker.scale_damping,
            window_weight: self.tracker.window_weight,
            response_up: self.tracker.response_up,
            combiner: CombinerKind::parse(&self.combiner.kind).expect("validated"),
            alpha_c: self.combiner.alpha_c,
            b_scale: self.combiner.b,
            mask: self.mask_spec(),
            seed: self.dropout.seed,
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let t = &self.trainer;
        TrainConfig {
            stage,
            epochs: match stage {
                Stage::BackbonePretrain => t.epochs_pretrain,
                Stage::HeadTrain => t.epochs_head,
                Stage::Joint => t.epochs_joint,
            },
            batch: t.batch,
            lr: t.lr,
            lr_decay: t.lr_decay,
            lr_decay_every: t.lr_decay_every,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            mask: self.mask_spec(),
            seed: t.seed,
        }
    }

    pub fn bench_profile(&self) -> BenchProfile {
        BenchProfile::parse(&self.synth.profile).expect("validated")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = Config::default();
        let text = cfg.echo();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<Config>("[dropout]\nkinds = \"slice\"\n").unwrap_err();
        assert!(err.to_string().contains("kinds"), "{err}");
        assert!(toml::from_str::<Config>("[nonsense]\nx = 1\n").is_err());
    }

    #[test]
    fn overrides_retarget_seeds_and_kinds() {
        let mut cfg = Config::default();
        cfg.apply_overrides(Some(99), Some("slice"), Some("encoder")).unwrap();
        assert_eq!(cfg.dropout.seed, 99);
        assert_eq!(cfg.trainer.seed, 99);
        assert_eq!(cfg.synth.seed, 99);
        assert_eq!(cfg.dropout.kind, "slice");
        assert_eq!(cfg.combiner.kind, "encoder");
        assert!(cfg.apply_overrides(None, Some("bogus"), None).is_err());
    }

    #[test]
    fn slice_mask_spec_expands_to_thirteen() {
        let mut cfg = Config::default();
        cfg.dropout.kind = "slice".into();
        assert_eq!(cfg.mask_spec().count(), 13);
        assert_eq!(Config::default().mask_spec().count(), 1);
    }
}
