//! Deformable-attention encoder over the flattened pyramid.

use candle_core::Tensor;

use crate::attention::{DeformableAttention, Reference};
use crate::backbone::{token_center, token_positions, TokenPos};
use crate::error::{Error, Result};
use crate::nn::{self, index_tensor, Init, LayerNorm, Mlp, ParamBuilder};
use crate::ops::LevelLayout;

/// Encoded tokens `(S, C)` with the pyramid's positional metadata.
#[derive(Debug, Clone)]
pub struct EncoderMemory {
    pub tokens: Tensor,
    pub layout: LevelLayout,
    pub positions: Vec<TokenPos>,
    pub valid: Vec<bool>,
}

impl EncoderMemory {
    /// The finest level as its own single-level memory.
    pub fn finest_level(&self) -> Result<(Tensor, LevelLayout)> {
        let layout = self.layout.truncated(1);
        Ok((self.tokens.narrow(0, 0, layout.total())?, layout))
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        self.positions.iter().map(|&p| token_center(&self.layout, p)).collect()
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: LayerNorm,
    attn: DeformableAttention,
    norm2: LayerNorm,
    ffn: Mlp,
}

impl EncoderLayer {
    fn forward(&self, x: &Tensor, pos: &Tensor, refs: &Reference, valid: &[bool], layout: &LevelLayout) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let values = self.attn.project_values(&h, Some(valid))?;
        let a = self.attn.forward(&(&h + pos)?, refs, &values, layout)?;
        let x = (x + a.output)?;
        let f = self.ffn.forward(&self.norm2.forward(&x)?)?;
        Ok((x + f)?)
    }
}

/// Pre-norm layers of deformable self-attention and feed-forward, each with
/// a residual connection.
#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
    level_embed: Tensor,
    d_model: usize,
}

impl Encoder {
    pub fn new(
        pb: &ParamBuilder,
        d_model: usize,
        num_layers: usize,
        heads: usize,
        levels: usize,
        points: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| {
                let p = pb.pp(format!("layers.{i}"));
                Ok(EncoderLayer {
                    norm1: LayerNorm::new(&p.pp("norm1"), d_model)?,
                    attn: DeformableAttention::new(&p.pp("attn"), d_model, heads, levels, points)?,
                    norm2: LayerNorm::new(&p.pp("norm2"), d_model)?,
                    ffn: Mlp::new(&p.pp("ffn"), &[d_model, ffn_dim, d_model])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let level_embed = pb.get(&[levels, d_model], "level_embed", Init::Normal(0.02))?;
        Ok(Self {
            layers,
            level_embed,
            d_model,
        })
    }

    /// Zeroes every residual branch so the encoder becomes the identity map.
    pub fn zero_residual_branches(&mut self) -> Result<()> {
        for l in &mut self.layers {
            l.attn.zero_output()?;
            l.ffn.zero_last_layer()?;
        }
        Ok(())
    }

    /// Sinusoidal embedding of token centers plus the learned level embedding.
    pub fn position_embedding(&self, layout: &LevelLayout, positions: &[TokenPos]) -> Result<Tensor> {
        let centers: Vec<f64> = positions.iter().flat_map(|&p| token_center(layout, p)).collect();
        let dtype = self.level_embed.dtype();
        let device = self.level_embed.device();
        let centers = Tensor::from_vec(centers, (positions.len(), 2), device)?.to_dtype(dtype)?;
        let sine = nn::sine_embed(&centers, self.d_model / 2)?;
        let levels: Vec<usize> = positions.iter().map(|p| p.level).collect();
        let lvl = self.level_embed.index_select(&index_tensor(&levels)?, 0)?;
        Ok((sine + lvl)?)
    }

    /// Encodes `tokens` `(S, C)` whose rows sit at `positions`, which must be
    /// a permutation of the layout's cells. Rows come back in the input order.
    pub fn encode(
        &self,
        tokens: &Tensor,
        positions: &[TokenPos],
        layout: &LevelLayout,
        valid: &[bool],
    ) -> Result<EncoderMemory> {
        let canonical = token_positions(layout);
        if positions.len() != canonical.len() || tokens.dims2()?.0 != canonical.len() || valid.len() != canonical.len() {
            return Err(Error::Config(format!(
                "encoder input has {} tokens, layout has {}",
                positions.len(),
                canonical.len()
            )));
        }
        // Sampling reads values by spatial cell, so work in the layout's order.
        let mut order: Vec<usize> = (0..positions.len()).collect();
        order.sort_by_key(|&i| positions[i]);
        if order.iter().map(|&i| positions[i]).ne(canonical.iter().copied()) {
            return Err(Error::Config("token positions do not cover the layout".into()));
        }
        let identity = order.iter().enumerate().all(|(k, &i)| k == i);
        let (mut x, valid_sorted) = if identity {
            (tokens.clone(), valid.to_vec())
        } else {
            (
                tokens.index_select(&index_tensor(&order)?, 0)?,
                order.iter().map(|&i| valid[i]).collect(),
            )
        };
        let pos = self.position_embedding(layout, &canonical)?;
        let centers: Vec<f64> = canonical.iter().flat_map(|&p| token_center(layout, p)).collect();
        let centers = Tensor::from_vec(centers, (canonical.len(), 2), x.device())?.to_dtype(x.dtype())?;
        let refs = Reference::Points(centers);
        for layer in &self.layers {
            x = layer.forward(&x, &pos, &refs, &valid_sorted, layout)?;
        }
        if !identity {
            let mut inverse = vec![0; order.len()];
            for (k, &i) in order.iter().enumerate() {
                inverse[i] = k;
            }
            x = x.index_select(&index_tensor(&inverse)?, 0)?;
        }
        Ok(EncoderMemory {
            tokens: x,
            layout: layout.clone(),
            positions: positions.to_vec(),
            valid: valid.to_vec(),
        })
    }
}
