//! Task-aware decoder: vision-language communication, intra- and inter-group
//! self-attention, deformable cross-attention, and the prediction heads.

use candle_core::{DType, Device, Tensor};

use crate::attention::{DeformableAttention, Reference};
use crate::encoder::EncoderMemory;
use crate::error::Result;
use crate::nn::{self, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamBuilder};
use crate::ops::{self, LevelLayout};
use crate::query_init::{prior_logit, split_queries};

/// Polygon outputs: 16 points × (x, y).
pub const POLYGON_COORDS: usize = 32;

/// `(T + 1, T + 1)` additive mask: `-inf` on the diagonal, 0 elsewhere.
pub fn vlc_mask(tokens: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..tokens * tokens)
        .map(|k| if k / tokens == k % tokens { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(v, (tokens, tokens), device)?.to_dtype(dtype)?)
}

/// Maps recognition queries to character-class distributions and back.
#[derive(Debug, Clone)]
pub struct LanguageConversion {
    to_chars: Linear,
    from_chars: Linear,
}

impl LanguageConversion {
    pub fn new(pb: &ParamBuilder, dim: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            to_chars: Linear::xavier_no_bias(&pb.pp("to_chars"), dim, classes)?,
            from_chars: Linear::xavier_no_bias(&pb.pp("from_chars"), classes, dim)?,
        })
    }

    pub fn from_weights(to_chars: Tensor, from_chars: Tensor) -> Self {
        Self {
            to_chars: Linear::from_tensors(to_chars, None),
            from_chars: Linear::from_tensors(from_chars, None),
        }
    }

    /// Returns the language vectors `(n, T + 1, C)`, whose token 0 is the
    /// detection query, and the class distributions `(n, T, U)`.
    pub fn forward(&self, detection: &Tensor, recognition: &Tensor) -> Result<(Tensor, Tensor)> {
        let probs = ops::softmax_last_dim(&self.to_chars.forward(recognition)?)?;
        let lang = self.from_chars.forward(&probs)?;
        Ok((Tensor::cat(&[&detection.unsqueeze(1)?, &lang], 1)?, probs))
    }
}

/// Masked attention from the queries to the language vectors of the same instance.
#[derive(Debug, Clone)]
pub struct VisionLanguageAttention {
    attn: MultiHeadAttention,
    norm: LayerNorm,
}

impl VisionLanguageAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&pb.pp("attn"), dim, heads, false)?,
            norm: LayerNorm::new(&pb.pp("norm"), dim)?,
        })
    }

    /// `queries`, `lang`: `(n, T + 1, C)`; `token_embed`: `(T + 1, C)`.
    /// Returns the updated queries, the attention probabilities
    /// `(n, heads, T + 1, T + 1)` and the per-head mixed values.
    pub fn forward(&self, queries: &Tensor, lang: &Tensor, token_embed: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let tokens = queries.dim(1)?;
        let mask = vlc_mask(tokens, queries.dtype(), queries.device())?;
        let q = queries.broadcast_add(token_embed)?;
        let k = lang.broadcast_add(token_embed)?;
        let (probs, mixed) = self.attn.attend(&q, &k, lang, Some(&mask))?;
        let f = self.attn.output_proj().forward(&mixed)?;
        Ok((self.norm.forward(&(queries + f)?)?, probs, mixed))
    }
}

/// Self-attention with a residual connection and post-normalization.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    attn: MultiHeadAttention,
    norm: LayerNorm,
}

impl SelfAttentionBlock {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&pb.pp("attn"), dim, heads, true)?,
            norm: LayerNorm::new(&pb.pp("norm"), dim)?,
        })
    }

    /// `x`, `pos`: `(B, L, C)`; attention runs along `L` for each `B`.
    pub fn forward(&self, x: &Tensor, pos: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let qk = (x + pos)?;
        let out = self.attn.forward(&qk, &qk, x, mask)?;
        self.norm.forward(&(x + out)?)
    }

    pub fn attend(&self, x: &Tensor, pos: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let qk = (x + pos)?;
        Ok(self.attn.attend(&qk, &qk, x, mask)?.0)
    }
}

/// Attention among the `T + 1` tokens of each instance.
pub fn intra_group(block: &SelfAttentionBlock, s: &Tensor, pos: &Tensor) -> Result<Tensor> {
    block.forward(s, pos, None)
}

/// Attention across instances, separately for every token index.
/// `mask` is an optional `(n, n)` additive instance mask.
pub fn inter_group(block: &SelfAttentionBlock, s: &Tensor, pos: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let st = s.transpose(0, 1)?.contiguous()?;
    let pt = pos.transpose(0, 1)?.contiguous()?;
    Ok(block.forward(&st, &pt, mask)?.transpose(0, 1)?.contiguous()?)
}

/// A set of instances decoded together: queries `(n, T + 1, C)` and
/// reference boxes `(n, 4)`.
#[derive(Debug, Clone)]
pub struct InstanceBlock {
    pub queries: Tensor,
    pub boxes: Tensor,
}

/// Predictions of one decoder layer for one block.
#[derive(Debug, Clone)]
pub struct LayerPrediction {
    /// `(n,)` text/no-text logits.
    pub logits: Tensor,
    /// `(n, 4)` refined boxes.
    pub boxes: Tensor,
    /// `(n, 32)` polygon points: box center plus predicted offsets.
    pub polygons: Tensor,
    /// `(n, T, U + 2)` character logits.
    pub chars: Tensor,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub layers: Vec<LayerPrediction>,
    /// Queries after the last layer, `(n, T + 1, C)`.
    pub queries: Tensor,
}

impl DecoderOutput {
    pub fn last(&self) -> &LayerPrediction {
        self.layers.last().expect("decoder has layers")
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    vlc: Option<(LanguageConversion, VisionLanguageAttention)>,
    intra: SelfAttentionBlock,
    inter: SelfAttentionBlock,
    cross: DeformableAttention,
    cross_norm: LayerNorm,
    ffn: Mlp,
    ffn_norm: LayerNorm,
    box_delta: Mlp,
}

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub text_len: usize,
    /// Character classes without the end and padding ids.
    pub charset_len: usize,
    pub vlc: bool,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    token_embed: Tensor,
    box_pos: Mlp,
    class_head: Linear,
    polygon_head: Mlp,
    char_head: Linear,
    d_model: usize,
}

impl Decoder {
    pub fn new(pb: &ParamBuilder, cfg: &DecoderConfig) -> Result<Self> {
        let c = cfg.d_model;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = pb.pp(format!("layers.{i}"));
                let vlc = if cfg.vlc {
                    Some((
                        LanguageConversion::new(&p.pp("language"), c, cfg.charset_len)?,
                        VisionLanguageAttention::new(&p.pp("vlc"), c, cfg.heads)?,
                    ))
                } else {
                    None
                };
                Ok(DecoderLayer {
                    vlc,
                    intra: SelfAttentionBlock::new(&p.pp("intra"), c, cfg.heads)?,
                    inter: SelfAttentionBlock::new(&p.pp("inter"), c, cfg.heads)?,
                    cross: DeformableAttention::new(&p.pp("cross"), c, cfg.heads, cfg.levels, cfg.points)?,
                    cross_norm: LayerNorm::new(&p.pp("cross_norm"), c)?,
                    ffn: Mlp::new(&p.pp("ffn"), &[c, cfg.ffn_dim, c])?,
                    ffn_norm: LayerNorm::new(&p.pp("ffn_norm"), c)?,
                    box_delta: Mlp::zero_last(&p.pp("box_delta"), &[c, c, 4])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            token_embed: pb.get(&[cfg.text_len + 1, c], "token_embed", Init::Normal(0.02))?,
            box_pos: Mlp::new(&pb.pp("box_pos"), &[2 * c, c, c])?,
            class_head: Linear::with_init(
                &pb.pp("class_head"),
                c,
                1,
                Init::Xavier(c, 1),
                Some(Init::Values(vec![prior_logit()])),
            )?,
            polygon_head: Mlp::zero_last(&pb.pp("polygon_head"), &[c, c, POLYGON_COORDS])?,
            char_head: Linear::xavier(&pb.pp("char_head"), c, cfg.charset_len + 2)?,
            d_model: c,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-layer value projections of the memory, shared by every block.
    pub fn project_memory(&self, memory: &EncoderMemory) -> Result<Vec<Tensor>> {
        self.layers
            .iter()
            .map(|l| l.cross.project_values(&memory.tokens, Some(&memory.valid)))
            .collect()
    }

    /// Positional embedding of the queries: box embedding plus token index.
    fn query_pos(&self, boxes: &Tensor) -> Result<Tensor> {
        let emb = self.box_pos.forward(&nn::sine_embed(boxes, self.d_model / 2)?)?;
        Ok(emb.unsqueeze(1)?.broadcast_add(&self.token_embed)?)
    }

    pub fn forward(&self, block: &InstanceBlock, values: &[Tensor], layout: &LevelLayout) -> Result<DecoderOutput> {
        let mut s = block.queries.clone();
        let mut refs = block.boxes.detach();
        let (n, tokens, c) = s.dims3()?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (layer, value) in self.layers.iter().zip(values) {
            let pos = self.query_pos(&refs)?;
            if let Some((lc, vla)) = &layer.vlc {
                let (g, r) = split_queries(&s)?;
                let (lang, _) = lc.forward(&g, &r)?;
                s = vla.forward(&s, &lang, &self.token_embed)?.0;
            }
            s = intra_group(&layer.intra, &s, &pos)?;
            s = inter_group(&layer.inter, &s, &pos, None)?;
            let q = (&s + &pos)?.reshape((n * tokens, c))?;
            let r = refs.unsqueeze(1)?.broadcast_as((n, tokens, 4))?.reshape((n * tokens, 4))?;
            let a = layer.cross.forward(&q, &Reference::Boxes(r), value, layout)?;
            s = layer.cross_norm.forward(&(&s + a.output.reshape((n, tokens, c))?)?)?;
            s = layer.ffn_norm.forward(&(&s + layer.ffn.forward(&s)?)?)?;

            let det = s.narrow(1, 0, 1)?.squeeze(1)?;
            let boxes = nn::sigmoid(&(nn::inverse_sigmoid(&refs)? + layer.box_delta.forward(&det)?)?)?;
            layers.push(self.heads(&s, &det, &boxes)?);
            refs = boxes.detach();
        }
        Ok(DecoderOutput { layers, queries: s })
    }

    fn heads(&self, s: &Tensor, det: &Tensor, boxes: &Tensor) -> Result<LayerPrediction> {
        let (n, tokens, _) = s.dims3()?;
        let logits = self.class_head.forward(det)?.squeeze(1)?;
        let offsets = self.polygon_head.forward(det)?;
        let centers = boxes.narrow(1, 0, 2)?.repeat((1, POLYGON_COORDS / 2))?;
        let polygons = (centers + offsets)?;
        let chars = self.char_head.forward(&s.narrow(1, 1, tokens - 1)?)?;
        debug_assert_eq!(chars.dim(0)?, n);
        Ok(LayerPrediction {
            logits,
            boxes: boxes.clone(),
            polygons,
            chars,
        })
    }
}
