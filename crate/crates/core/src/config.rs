//! Declarative run configuration, stored as TOML.
//!
//! Every section has complete defaults, so an empty file is a valid desk-scale
//! configuration. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub denoising: DenoisingConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryInit {
    /// Queries gathered and sampled from top-scoring encoder features.
    TaskAware,
    /// Per-slot learned embeddings (ablation baseline).
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel widths of the four backbone stages (strides 4, 8, 16, 32).
    pub backbone_channels: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    /// Sampling points per head per level in deformable attention.
    pub points: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Number of instance slots.
    pub num_queries: usize,
    /// Recognition queries per instance; transcripts hold at most one fewer character.
    pub max_text_len: usize,
    /// Rows averaged when sampling recognition queries from a proposal.
    pub sample_rows: usize,
    pub query_init: QueryInit,
    /// Vision-language communication stage in every decoder layer.
    pub vlc: bool,
    pub charset: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![32, 64, 128, 256],
            d_model: 64,
            heads: 4,
            points: 4,
            ffn_dim: 256,
            encoder_layers: 6,
            decoder_layers: 6,
            num_queries: 100,
            max_text_len: 25,
            sample_rows: 4,
            query_init: QueryInit::TaskAware,
            vlc: true,
            charset: DEFAULT_CHARSET.to_string(),
        }
    }
}

pub const DEFAULT_CHARSET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub class: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    /// Overall box weight multiplying both box terms.
    pub box_scale: f64,
    pub polygon: f64,
    pub recognition: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub match_class: f64,
    pub match_l1: f64,
    pub match_giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            box_l1: 5.0,
            box_giou: 2.0,
            box_scale: 1.0,
            polygon: 1.0,
            recognition: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            match_class: 2.0,
            match_l1: 5.0,
            match_giou: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoisingConfig {
    pub enabled: bool,
    pub shift_ratio: f64,
    pub scale_ratio: f64,
    pub groups: usize,
}

impl Default for DenoisingConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            shift_ratio: 0.4,
            scale_ratio: 0.4,
            groups: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Iterations at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    pub log_every: usize,
    /// Supervise every decoder layer, not only the last.
    pub aux_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 1e-4,
            milestones: vec![1500, 1800],
            lr_decay: 0.1,
            batch_size: 2,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            seed: 0,
            eval_every: 500,
            log_every: 10,
            aux_loss: true,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    /// Glyph height range in pixels.
    pub min_font_px: f64,
    pub max_font_px: f64,
    /// Probability that a word follows a curved baseline.
    pub curved_prob: f64,
    /// Maximum baseline bend as a fraction of the word length.
    pub max_bend: f64,
    pub placement_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            min_instances: 1,
            max_instances: 5,
            min_chars: 3,
            max_chars: 8,
            min_font_px: 16.0,
            max_font_px: 30.0,
            curved_prob: 0.5,
            max_bend: 0.25,
            placement_retries: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Full-scale shorter-side range; the sizes used are these times `scale`.
    pub shorter_min: usize,
    pub shorter_max: usize,
    pub shorter_step: usize,
    pub max_long: usize,
    pub scale: f64,
    pub crop: bool,
    pub crop_retries: usize,
    pub max_rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            shorter_min: 640,
            shorter_max: 896,
            shorter_step: 32,
            max_long: 1600,
            scale: 0.4,
            crop: true,
            crop_retries: 10,
            max_rotation_deg: 45.0,
        }
    }
}

impl AugmentConfig {
    /// Candidate shorter-side lengths after scaling.
    pub fn shorter_sides(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut s = self.shorter_min;
        while s <= self.shorter_max {
            out.push((s as f64 * self.scale).round() as usize);
            if self.shorter_step == 0 {
                break;
            }
            s += self.shorter_step;
        }
        out.dedup();
        out
    }

    pub fn max_long_side(&self) -> usize {
        (self.max_long as f64 * self.scale).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    /// Resize so the shorter side has this length; `None` keeps the input size.
    pub shorter_side: Option<usize>,
    pub max_long: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.3,
            shorter_side: Some(320),
            max_long: 730,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

impl Config {
    /// Full-resolution augmentation and test sizes.
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.augment.scale = 1.0;
        c.inference.shorter_side = Some(1000);
        c.inference.max_long = 1824;
        c
    }

    /// Small fixed-size images, no augmentation, short words: the setting
    /// used to check that the model can fit a handful of samples.
    pub fn overfit() -> Self {
        let mut c = Self::default();
        c.synth = SynthConfig {
            width: 128,
            height: 128,
            min_instances: 1,
            max_instances: 3,
            min_chars: 3,
            max_chars: 6,
            min_font_px: 16.0,
            max_font_px: 22.0,
            curved_prob: 0.3,
            max_bend: 0.15,
            placement_retries: 100,
        };
        c.model.num_queries = 20;
        c.model.max_text_len = 8;
        c.augment.enabled = false;
        c.inference.shorter_side = None;
        c.train.batch_size = 2;
        c.train.lr = 5e-4;
        c.train.clip_norm = 1.0;
        c.train.eval_every = 0;
        c
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `s`, applies `key.path=value` overrides, then validates.
    pub fn from_toml_with_overrides(s: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Config = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let m = &self.model;
        if m.backbone_channels.len() != 4 || m.backbone_channels.contains(&0) {
            problems.push("model.backbone_channels must list four positive widths".to_string());
        }
        if m.d_model == 0 || m.heads == 0 || m.d_model % m.heads != 0 {
            problems.push("model.d_model must be a positive multiple of model.heads".into());
        }
        if m.d_model % 4 != 0 {
            problems.push("model.d_model must be divisible by 4".into());
        }
        if m.points == 0 || m.ffn_dim == 0 || m.sample_rows == 0 {
            problems.push("model.points, model.ffn_dim and model.sample_rows must be positive".into());
        }
        if m.decoder_layers == 0 {
            problems.push("model.decoder_layers must be positive".into());
        }
        if m.num_queries == 0 {
            problems.push("model.num_queries must be positive".into());
        }
        if m.max_text_len < 2 {
            problems.push("model.max_text_len must be at least 2".into());
        }
        if let Err(e) = crate::data::Charset::new(&m.charset) {
            problems.push(format!("model.charset: {e}"));
        }
        let l = &self.loss;
        for (name, v) in [
            ("class", l.class),
            ("box_l1", l.box_l1),
            ("box_giou", l.box_giou),
            ("box_scale", l.box_scale),
            ("polygon", l.polygon),
            ("recognition", l.recognition),
            ("focal_alpha", l.focal_alpha),
            ("focal_gamma", l.focal_gamma),
            ("match_class", l.match_class),
            ("match_l1", l.match_l1),
            ("match_giou", l.match_giou),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("loss.{name} must be a finite non-negative number"));
            }
        }
        let d = &self.denoising;
        if !(0.0..1.0).contains(&d.shift_ratio) || !(0.0..1.0).contains(&d.scale_ratio) {
            problems.push("denoising.shift_ratio and denoising.scale_ratio must lie in [0, 1)".into());
        }
        let t = &self.train;
        if !(t.lr > 0.0) || !(t.lr_decay > 0.0) {
            problems.push("train.lr and train.lr_decay must be positive".into());
        }
        if t.milestones.windows(2).any(|w| w[0] >= w[1]) {
            problems.push("train.milestones must be strictly increasing".into());
        }
        if t.batch_size == 0 {
            problems.push("train.batch_size must be positive".into());
        }
        if !(t.clip_norm > 0.0) || t.weight_decay < 0.0 {
            problems.push("train.clip_norm must be positive and train.weight_decay non-negative".into());
        }
        let s = &self.synth;
        if s.min_instances > s.max_instances || s.min_chars == 0 || s.min_chars > s.max_chars {
            problems.push("synth instance and character ranges must be non-empty".into());
        }
        if s.max_chars + 1 > m.max_text_len {
            problems.push(format!(
                "synth.max_chars ({}) leaves no room for the end marker within model.max_text_len ({})",
                s.max_chars, m.max_text_len
            ));
        }
        if s.max_instances > m.num_queries {
            problems.push("synth.max_instances exceeds model.num_queries".into());
        }
        if s.width < 16 || s.height < 16 || !(s.min_font_px > 0.0) || s.min_font_px > s.max_font_px {
            problems.push("synth image and font sizes are invalid".into());
        }
        let a = &self.augment;
        if a.shorter_min > a.shorter_max || !(a.scale > 0.0) || a.max_rotation_deg < 0.0 {
            problems.push("augment ranges are invalid".into());
        }
        if !(0.0..=1.0).contains(&self.inference.score_threshold) {
            problems.push("inference.score_threshold must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.eval.iou_threshold) {
            problems.push("eval.iou_threshold must lie in [0, 1]".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty override key in `{assignment}`")))?;
    let mut cur = table;
    for k in keys {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path `{path}` crosses a non-table value")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
