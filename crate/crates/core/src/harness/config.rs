//! Training configuration: JSON file plus `--key value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{KptError, Result};
use crate::frontend::FrontendConfig;
use crate::ktformer::TransformerConfig;
use crate::posedec::Representation;
use crate::synthgen::{AugmentConfig, SceneConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub disable_identity_loss: bool,
    pub detr_style_tokens: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub representation: Representation,
    pub object_branch: bool,
    pub image_size: usize,
    pub heatmap_size: usize,
    pub channels: [usize; 3],
    pub d_app: usize,
    pub d_pos: usize,
    pub token_hidden: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_mult: usize,
    pub n_hand: usize,
    pub n_obj: usize,
    pub gamma: f64,
    pub sigma: f64,
    pub nms_threshold_train: f64,
    pub nms_threshold_eval: f64,
    pub lr_transformer: f64,
    pub lr_backbone: f64,
    /// Learning rates follow a cosine from 1 down to this fraction over
    /// the run; 1 keeps them constant.
    pub lr_final_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; `None` runs every epoch.
    pub max_steps: Option<usize>,
    pub gt_keypoint_warmup_epochs: usize,
    /// Length unit of the object corner loss, in millimetres.
    pub object_loss_unit_mm: f64,
    pub checkpoint_every: usize,
    /// Threads used for batch preparation.
    pub prep_threads: usize,
    pub ablations: Ablations,
    pub augment: AugmentConfig,
    pub scene: SceneConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let f = FrontendConfig::default();
        let t = TransformerConfig::default();
        Self {
            representation: Representation::JointVectors,
            object_branch: true,
            image_size: f.image_size,
            heatmap_size: f.heatmap_size,
            channels: f.channels,
            d_app: f.d_app,
            d_pos: f.d_pos,
            token_hidden: f.token_hidden,
            n_heads: t.n_heads,
            encoder_layers: t.encoder_layers,
            decoder_layers: t.decoder_layers,
            ffn_mult: t.ffn_mult,
            n_hand: 64,
            n_obj: 20,
            gamma: 3.0,
            sigma: 2.0,
            nms_threshold_train: 0.05,
            nms_threshold_eval: 0.25,
            lr_transformer: 1e-4,
            lr_backbone: 1e-5,
            lr_final_fraction: 1.0,
            batch_size: 8,
            epochs: 50,
            max_steps: None,
            gt_keypoint_warmup_epochs: 5,
            object_loss_unit_mm: 10.0,
            checkpoint_every: 500,
            prep_threads: 4,
            ablations: Ablations::default(),
            augment: AugmentConfig::default(),
            scene: SceneConfig::default(),
            seed: 0,
        }
    }
}

fn flatten_keys(prefix: &str, v: &Value, out: &mut Vec<String>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if child.is_object() {
                flatten_keys(&key, child, out);
            }
            out.push(key);
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| KptError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| KptError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| KptError::io(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(serde_json::to_string(self).expect("config serializes").as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    /// Every settable key, nested ones dotted (`augment.enabled`).
    pub fn keys() -> Vec<String> {
        let mut out = Vec::new();
        flatten_keys("", &serde_json::to_value(TrainConfig::default()).expect("config serializes"), &mut out);
        out
    }

    /// Sets `key` (dotted for nested fields) from its textual value, read
    /// as JSON when possible and as a string otherwise.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| KptError::InvalidConfig(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(root).map_err(|e| KptError::InvalidConfig(format!("bad value `{raw}` for `{key}`: {e}")))?;
        Ok(())
    }

    pub fn frontend(&self) -> FrontendConfig {
        FrontendConfig {
            image_size: self.image_size,
            heatmap_size: self.heatmap_size,
            channels: self.channels,
            d_app: self.d_app,
            d_pos: self.d_pos,
            token_hidden: self.token_hidden,
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig { n_heads: self.n_heads, encoder_layers: self.encoder_layers, decoder_layers: self.decoder_layers, ffn_mult: self.ffn_mult }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend().validate()?;
        let bad = |m: String| Err(KptError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_transformer > 0.0 && self.lr_backbone > 0.0) {
            return bad(format!("learning rates must be positive, got {} and {}", self.lr_transformer, self.lr_backbone));
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return bad(format!("lr_final_fraction must lie in (0, 1], got {}", self.lr_final_fraction));
        }
        if !(self.gamma > 0.0 && self.sigma > 0.0) {
            return bad("gamma and sigma must be positive".into());
        }
        if self.n_hand == 0 {
            return bad("n_hand must be at least 1".into());
        }
        if self.scene.image_size != self.image_size {
            return bad(format!("scene.image_size {} differs from image_size {}", self.scene.image_size, self.image_size));
        }
        Ok(())
    }
}
