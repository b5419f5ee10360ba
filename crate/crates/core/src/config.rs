//! One TOML document configuring every stage of a run. Unknown keys are
//! rejected; omitted keys take the documented defaults; a single root seed
//! feeds data generation, initialization, and shuffling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode};
use crate::gnn::GnnConfig;
use crate::scenegraph::ExtractionOptions;
use crate::train::{Stage, TrainConfig};
use crate::vision::VitConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; propagated into every seeded component by `normalize`.
    pub seed: u64,
    /// Output directory for datasets, checkpoints, and metrics.
    pub out_dir: String,
    /// Samples generated per split by `gen-data`.
    pub train_samples: usize,
    pub test_samples: usize,
    pub extraction: ExtractionOptions,
    pub data: SyntheticSpec,
    pub gnn: GnnConfig,
    pub vit: VitConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "out".into(),
            train_samples: 200,
            test_samples: 50,
            extraction: ExtractionOptions::default(),
            data: SyntheticSpec::default(),
            gnn: GnnConfig::default(),
            vit: VitConfig::default(),
            fusion: FusionConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.normalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Threads the root seed and the cross-module dimensions through the
    /// sub-configs so they cannot drift apart.
    pub fn normalize(&mut self) {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.gnn.num_classes = self.data.num_object_classes;
        self.gnn.num_scene_classes = self.data.num_scene_classes;
        self.vit.image_height = self.data.height;
        self.vit.image_width = self.data.width;
        self.vit.channels = 1;
        self.vit.num_scene_classes = self.data.num_scene_classes;
        self.fusion.graph_dim = self.gnn.hidden_dim;
        self.fusion.image_dim = self.vit.embed_dim;
        self.fusion.num_scene_classes = self.data.num_scene_classes;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.vit.validate()?;
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.out_dir.is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        Ok(())
    }

    /// CLI flag overrides; each runs before normalization so derived
    /// fields stay consistent.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        stage: Option<&str>,
        fusion_mode: Option<&str>,
        out: Option<&str>,
    ) -> Result<()> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(s) = stage {
            self.train.stage = Stage::parse(s)?;
        }
        if let Some(m) = fusion_mode {
            self.fusion.mode = parse_fusion_mode(m)?;
        }
        if let Some(o) = out {
            self.out_dir = o.to_string();
        }
        self.normalize();
        self.validate()
    }
}

pub fn parse_fusion_mode(s: &str) -> Result<FusionMode> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown fusion mode '{s}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::LayerKind;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.gnn.hidden_dim, cfg.gnn.hidden_dim);
        assert_eq!(back.train.batch_size, cfg.train.batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("definitely_not_a_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("definitely_not_a_key"), "{err}");
        let err = RunConfig::from_toml("[gnn]\nbogus = 2\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[gnn]\nkind = \"gat\"\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.gnn.kind, LayerKind::Gat);
        assert_eq!(cfg.train.epochs, TrainConfig::default().epochs);
        // root seed propagated
        assert_eq!(cfg.data.seed, 9);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn normalize_links_dimensions() {
        let cfg = RunConfig::from_toml("[gnn]\nhidden_dim = 24\n[vit]\nembed_dim = 16\n").unwrap();
        assert_eq!(cfg.fusion.graph_dim, 24);
        assert_eq!(cfg.fusion.image_dim, 16);
        assert_eq!(cfg.gnn.num_classes, cfg.data.num_object_classes);
    }

    #[test]
    fn overrides_beat_file_values() {
        let mut cfg = RunConfig::from_toml("seed = 1\n").unwrap();
        cfg.apply_overrides(Some(5), Some("fusion"), Some("concat"), Some("elsewhere"))
            .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.data.seed, 5);
        assert_eq!(cfg.train.stage, Stage::Fusion);
        assert_eq!(cfg.fusion.mode, FusionMode::Concat);
        assert_eq!(cfg.out_dir, "elsewhere");
        assert!(cfg.apply_overrides(None, Some("nope"), None, None).is_err());
        assert!(cfg
            .apply_overrides(None, None, Some("mystery"), None)
            .is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = RunConfig::from_toml("[train]\nepochs = 0\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let err = RunConfig::from_toml("[data]\nnum_object_classes = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}
