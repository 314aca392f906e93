//! Convolutional feature extractor producing the four-level pyramid.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm, Linear, ParamBuilder};
use crate::ops::LevelLayout;

/// Input sides must be multiples of this (the coarsest level's stride).
pub const SIZE_MULTIPLE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenPos {
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

/// Four channel-last maps `(H_l, W_l, C)` at strides 8, 16, 32 and 64.
///
/// Coordinates are relative to the padded canvas; `valid_ratio` is the
/// `(x, y)` fraction of it covered by the actual image.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub layout: LevelLayout,
    pub valid_ratio: [f64; 2],
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        let shapes = levels
            .iter()
            .map(|t| t.dims3().map(|(h, w, _)| (h, w)))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            levels,
            layout: LevelLayout::new(shapes),
            valid_ratio: [1.0, 1.0],
        })
    }

    /// Tokens whose center falls on the unpadded image.
    pub fn valid_mask(&self) -> Vec<bool> {
        valid_mask(&self.layout, self.valid_ratio)
    }

    /// Flattened tokens `(S, C)`, level by level in row-major order.
    pub fn tokens(&self) -> Result<Tensor> {
        let flat = self
            .levels
            .iter()
            .map(|t| {
                let (h, w, c) = t.dims3()?;
                t.reshape((h * w, c))
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&flat, 0)?)
    }

    pub fn positions(&self) -> Vec<TokenPos> {
        token_positions(&self.layout)
    }
}

pub fn token_positions(layout: &LevelLayout) -> Vec<TokenPos> {
    let mut out = Vec::with_capacity(layout.total());
    for (level, &(h, w)) in layout.shapes().iter().enumerate() {
        for row in 0..h {
            for col in 0..w {
                out.push(TokenPos { level, row, col });
            }
        }
    }
    out
}

pub fn valid_mask(layout: &LevelLayout, valid_ratio: [f64; 2]) -> Vec<bool> {
    token_positions(layout)
        .into_iter()
        .map(|p| {
            let [x, y] = token_center(layout, p);
            x < valid_ratio[0] && y < valid_ratio[1]
        })
        .collect()
}

/// Zero-pads `(H, W, C)` on the bottom and right up to multiples of `multiple`.
/// Returns the padded map and the valid `(x, y)` ratio.
pub fn pad_to_multiple(image: &Tensor, multiple: usize) -> Result<(Tensor, [f64; 2])> {
    let (h, w, _) = image.dims3()?;
    let hp = h.div_ceil(multiple).max(1) * multiple;
    let wp = w.div_ceil(multiple).max(1) * multiple;
    let mut x = image.clone();
    if hp != h {
        x = x.pad_with_zeros(0, 0, hp - h)?;
    }
    if wp != w {
        x = x.pad_with_zeros(1, 0, wp - w)?;
    }
    Ok((x, [w as f64 / wp as f64, h as f64 / hp as f64]))
}

/// Normalized `(x, y)` center of a token.
pub fn token_center(layout: &LevelLayout, p: TokenPos) -> [f64; 2] {
    let (h, w) = layout.shapes()[p.level];
    [(p.col as f64 + 0.5) / w as f64, (p.row as f64 + 0.5) / h as f64]
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: LayerNorm,
}

impl ConvBlock {
    fn new(pb: &ParamBuilder, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pb.pp("conv"), c_in, c_out, 3, stride)?,
            norm: LayerNorm::new(&pb.pp("norm"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Projection {
    linear: Linear,
    norm: LayerNorm,
}

/// Strided CNN: a stem to stride 4, then three stages (strides 8, 16, 32),
/// each a downsampling block followed by a stride-1 block. The stride-32
/// stage feeds the receptive enhancement block that adds the stride-64 level.
#[derive(Debug, Clone)]
pub struct Backbone {
    stem: Vec<ConvBlock>,
    stages: Vec<Vec<ConvBlock>>,
    proj: Vec<Projection>,
    rem: ConvBlock,
}

impl Backbone {
    pub fn new(pb: &ParamBuilder, channels: &[usize], d_model: usize) -> Result<Self> {
        if channels.len() != 4 {
            return Err(Error::Config("backbone needs four stage widths".into()));
        }
        let stem = vec![
            ConvBlock::new(&pb.pp("stem.0"), 3, channels[0], 2)?,
            ConvBlock::new(&pb.pp("stem.1"), channels[0], channels[0], 2)?,
        ];
        let mut stages = Vec::new();
        let mut proj = Vec::new();
        for s in 0..3 {
            let p = pb.pp(format!("stage{}", s + 1));
            let (c_in, c_out) = (channels[s], channels[s + 1]);
            stages.push(vec![
                ConvBlock::new(&p.pp("down"), c_in, c_out, 2)?,
                ConvBlock::new(&p.pp("conv"), c_out, c_out, 1)?,
            ]);
            let q = pb.pp(format!("proj{s}"));
            proj.push(Projection {
                linear: Linear::xavier(&q.pp("linear"), c_out, d_model)?,
                norm: LayerNorm::new(&q.pp("norm"), d_model)?,
            });
        }
        let rem = ConvBlock::new(&pb.pp("rem"), channels[3], d_model, 2)?;
        Ok(Self {
            stem,
            stages,
            proj,
            rem,
        })
    }

    /// `image`: `(H, W, 3)`, zero-padded here to multiples of [`SIZE_MULTIPLE`].
    pub fn forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, _, c) = image.dims3()?;
        if c != 3 {
            return Err(Error::Config(format!("backbone input has {c} channels, expected 3")));
        }
        let (mut x, valid_ratio) = pad_to_multiple(image, SIZE_MULTIPLE)?;
        for b in &self.stem {
            x = b.forward(&x)?;
        }
        let mut levels = Vec::with_capacity(4);
        for (stage, p) in self.stages.iter().zip(&self.proj) {
            for b in stage {
                x = b.forward(&x)?;
            }
            levels.push(p.norm.forward(&p.linear.forward(&x)?)?);
        }
        levels.push(self.rem.forward(&x)?);
        let mut pyramid = FeaturePyramid::new(levels)?;
        pyramid.valid_ratio = valid_ratio;
        Ok(pyramid)
    }
}
