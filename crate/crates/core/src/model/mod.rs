//! Toy grounding network: convolutional image encoder, self-attention text
//! encoder, bidirectional cross-attention fusion, dot-product alignment and
//! an anchor-relative box head. Every parameter carries a module tag.

mod network;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, ModuleTag, NdArray, ParamRegistry};
use crate::synthdata::tokenize;

pub use network::{
    align, decode_boxes, encode_image, encode_text, forward, forward_with_regions, fuse, image_to_chw, FusedVars,
    GroundingOutput, GroundingVars, TextVars,
};

pub const PAD: &str = "<pad>";
pub const OOV: &str = "<oov>";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub region_grid: usize,
    pub feature_dim: usize,
    pub conv_channels: [usize; 2],
    pub vocab: Vec<String>,
    pub max_seq_len: usize,
    pub text_layers: usize,
    pub text_ffn_dim: usize,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    /// Inner width of the fusion attention projections.
    pub fusion_attn_dim: usize,
    pub decoder_hidden: usize,
    /// Anchor box side, as a fraction of the image.
    pub anchor_size: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            region_grid: 8,
            feature_dim: 48,
            conv_channels: [16, 32],
            vocab: default_vocab(),
            max_seq_len: 16,
            text_layers: 1,
            text_ffn_dim: 192,
            fusion_layers: 2,
            fusion_heads: 4,
            fusion_attn_dim: 12,
            decoder_hidden: 480,
            anchor_size: 0.25,
        }
    }
}

/// PAD, OOV, then every word the synthetic description grammar can produce.
pub fn default_vocab() -> Vec<String> {
    let words = [
        PAD, OOV, "the", "in", "not", "at", "that", "is", "and", "circle", "square", "triangle", "diamond", "cross",
        "ellipse", "red", "green", "blue", "yellow", "purple", "cyan", "top", "left", "right", "center", "bottom",
        "large", "small", "filled", "hollow",
    ];
    words.iter().map(|w| w.to_string()).collect()
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.fusion_heads == 0 || !self.fusion_attn_dim.is_multiple_of(self.fusion_heads) {
            return bad(format!(
                "fusion attention width {} not divisible by {} heads",
                self.fusion_attn_dim, self.fusion_heads
            ));
        }
        if !self.feature_dim.is_multiple_of(self.fusion_heads) {
            return bad(format!(
                "feature dim {} not divisible by {} heads",
                self.feature_dim, self.fusion_heads
            ));
        }
        if self.image_size != self.region_grid * 8 {
            return bad("three stride-2 convolutions need image_size = 8 × region_grid".into());
        }
        if self.token_id(PAD) != Some(0) || self.token_id(OOV).is_none() {
            return bad("vocab must start with <pad> and contain <oov>".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn regions(&self) -> usize {
        self.region_grid * self.region_grid
    }

    pub fn token_id(&self, word: &str) -> Option<usize> {
        self.vocab.iter().position(|w| w == word)
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    /// Word ids of `text`; unknown words map to OOV.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let oov = self.token_id(OOV).unwrap_or(1);
        tokenize(text).iter().map(|w| self.token_id(w).unwrap_or(oov)).collect()
    }

    /// Grid-cell anchors as `(cx, cy, w, h)`, row-major.
    pub fn anchors(&self) -> NdArray {
        let g = self.region_grid;
        let mut data = Vec::with_capacity(g * g * 4);
        for row in 0..g {
            for col in 0..g {
                data.extend([
                    (col as f64 + 0.5) / g as f64,
                    (row as f64 + 0.5) / g as f64,
                    self.anchor_size,
                    self.anchor_size,
                ]);
            }
        }
        NdArray::new(vec![g * g, 4], data).expect("anchor shape")
    }
}

fn glorot(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> NdArray {
    NdArray::randn(shape, gain / (fan_in as f64).sqrt(), rng)
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_registry(cfg: &ModelConfig, seed: u64) -> Result<ParamRegistry, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = ParamRegistry::new();
    let d = cfg.feature_dim;
    let [c1, c2] = cfg.conv_channels;
    let relu_gain = 2f64.sqrt();

    use ModuleTag::*;
    for (i, (cin, cout)) in [(3, c1), (c1, c2), (c2, d)].into_iter().enumerate() {
        r.register(
            &format!("image.conv{i}.w"),
            glorot(&[cout, cin, 4, 4], cin * 16, relu_gain, &mut rng),
            ImageEncoder,
        )?;
        r.register(&format!("image.conv{i}.b"), NdArray::zeros(&[cout, 1, 1]), ImageEncoder)?;
    }
    r.register(
        "image.pos",
        NdArray::randn(&[cfg.regions(), d], 0.1, &mut rng),
        ImageEncoder,
    )?;

    r.register(
        "text.embed",
        NdArray::randn(&[cfg.vocab.len(), d], 1.0, &mut rng),
        TextEncoder,
    )?;
    r.register(
        "text.pos",
        NdArray::randn(&[cfg.max_seq_len, d], 0.1, &mut rng),
        TextEncoder,
    )?;
    for l in 0..cfg.text_layers {
        for m in ["q", "k", "v", "o"] {
            r.register(
                &format!("text.{l}.w{m}"),
                glorot(&[d, d], d, 1.0, &mut rng),
                TextEncoder,
            )?;
        }
        r.register(
            &format!("text.{l}.ff1.w"),
            glorot(&[d, cfg.text_ffn_dim], d, relu_gain, &mut rng),
            TextEncoder,
        )?;
        r.register(
            &format!("text.{l}.ff1.b"),
            NdArray::zeros(&[cfg.text_ffn_dim]),
            TextEncoder,
        )?;
        r.register(
            &format!("text.{l}.ff2.w"),
            glorot(&[cfg.text_ffn_dim, d], cfg.text_ffn_dim, 0.5, &mut rng),
            TextEncoder,
        )?;
        r.register(&format!("text.{l}.ff2.b"), NdArray::zeros(&[d]), TextEncoder)?;
    }

    let a = cfg.fusion_attn_dim;
    for l in 0..cfg.fusion_layers {
        for dir in ["r2t", "t2r"] {
            for m in ["q", "k", "v"] {
                r.register(
                    &format!("fusion.{l}.{dir}.w{m}"),
                    glorot(&[d, a], d, 1.0, &mut rng),
                    Fusion,
                )?;
            }
            // Zero output projections make a fresh fusion block the identity.
            r.register(&format!("fusion.{l}.{dir}.wo"), NdArray::zeros(&[a, d]), Fusion)?;
        }
    }

    let h = cfg.decoder_hidden;
    r.register("decoder.fc1.w", glorot(&[d, h], d, relu_gain, &mut rng), Decoder)?;
    r.register("decoder.fc1.b", NdArray::zeros(&[h]), Decoder)?;
    r.register("decoder.fc2.w", glorot(&[h, 4], h, 0.1, &mut rng), Decoder)?;
    r.register("decoder.fc2.b", NdArray::zeros(&[4]), Decoder)?;
    Ok(r)
}

/// Fusion parameters as a share of all parameters.
pub fn fusion_share(registry: &ParamRegistry) -> f64 {
    registry.count_for(ModuleTag::Fusion) as f64 / registry.total_count().max(1) as f64
}
