//! Denoising groups: noised copies of the ground-truth boxes whose queries
//! learn to reconstruct the clean instances, kept apart from the matching
//! queries.

use std::ops::Range;

use candle_core::{Device, Tensor};
use rand::Rng;

use crate::config::DenoisingConfig;
use crate::decoder::InstanceBlock;
use crate::encoder::EncoderMemory;
use crate::error::Result;
use crate::geometry::{CenterBox, CornerBox};
use crate::nn::{self, LayerNorm, Mlp, ParamBuilder};
use crate::query_init::{assemble_queries, QueryInitializer};

/// `groups` noised copies of every box: the center moves uniformly within
/// `±shift_ratio · (w, h) / 2`, each side is scaled by a factor drawn from
/// `[1 − scale_ratio, 1 + scale_ratio]`, and the result is clipped to the
/// unit square.
pub fn make_noise_boxes<R: Rng>(
    gts: &[CenterBox],
    rng: &mut R,
    shift_ratio: f64,
    scale_ratio: f64,
    groups: usize,
) -> Vec<Vec<CenterBox>> {
    let mut u = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    (0..groups)
        .map(|_| {
            gts.iter()
                .map(|g| {
                    let cx = g.cx + u(shift_ratio) * g.w / 2.0;
                    let cy = g.cy + u(shift_ratio) * g.h / 2.0;
                    let w = g.w * (1.0 + u(scale_ratio));
                    let h = g.h * (1.0 + u(scale_ratio));
                    let n = CenterBox::new(cx, cy, w, h);
                    if shift_ratio == 0.0 && scale_ratio == 0.0 {
                        return n;
                    }
                    let c = n.to_corners();
                    CornerBox::new(c.x0.clamp(0.0, 1.0), c.y0.clamp(0.0, 1.0), c.x1.clamp(0.0, 1.0), c.y1.clamp(0.0, 1.0))
                        .to_center()
                })
                .collect()
        })
        .collect()
}

/// Which instances may attend to which under the denoising layout: the
/// groups come first, then the matching slots, and every block only sees
/// itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsolationMask {
    blocks: Vec<Range<usize>>,
}

impl IsolationMask {
    pub fn new(groups: usize, group_size: usize, matching: usize) -> Self {
        let mut blocks: Vec<Range<usize>> = (0..groups).map(|g| g * group_size..(g + 1) * group_size).collect();
        if group_size == 0 {
            blocks.clear();
        }
        let start = blocks.last().map_or(0, |b| b.end);
        blocks.push(start..start + matching);
        Self { blocks }
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matching(&self) -> Range<usize> {
        self.blocks.last().cloned().unwrap_or(0..0)
    }

    /// `allowed[i][j]`: instance `i` may attend to instance `j`.
    pub fn dense(&self) -> Vec<Vec<bool>> {
        let n = self.len();
        let block_of: Vec<usize> = (0..n)
            .map(|i| self.blocks.iter().position(|b| b.contains(&i)).expect("covered"))
            .collect();
        (0..n).map(|i| (0..n).map(|j| block_of[i] == block_of[j]).collect()).collect()
    }

    /// Additive form of [`IsolationMask::dense`]: 0 where allowed, `-inf` elsewhere.
    pub fn additive(&self, dtype: candle_core::DType) -> Result<Tensor> {
        let n = self.len();
        let v: Vec<f64> = self
            .dense()
            .into_iter()
            .flatten()
            .map(|a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Ok(Tensor::from_vec(v, (n, n), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Turns noise boxes into detection queries.
#[derive(Debug, Clone)]
pub struct NoiseEmbedding {
    mlp: Mlp,
    norm: LayerNorm,
    d_model: usize,
}

impl NoiseEmbedding {
    pub fn new(pb: &ParamBuilder, d_model: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(&pb.pp("mlp"), &[2 * d_model, d_model, d_model])?,
            norm: LayerNorm::new(&pb.pp("norm"), d_model)?,
            d_model,
        })
    }

    pub fn forward(&self, boxes: &Tensor) -> Result<Tensor> {
        self.norm.forward(&self.mlp.forward(&nn::sine_embed(boxes, self.d_model / 2)?)?)
    }
}

/// Denoising queries for one image.
#[derive(Debug, Clone)]
pub struct DenoisingBatch {
    /// `[group][gt]` noise boxes.
    pub noise_boxes: Vec<Vec<CenterBox>>,
    /// One block per group, decoded independently of each other and of the
    /// matching block.
    pub blocks: Vec<InstanceBlock>,
    pub mask: IsolationMask,
    /// `(gt_index, slot)` pairs, identical for every group.
    pub assignment: Vec<(usize, usize)>,
}

impl DenoisingBatch {
    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Builds the denoising groups for `gts`. Recognition queries are sampled
/// from the memory inside the noise boxes, exactly as for proposals.
pub fn build_denoising_batch<R: Rng>(
    gts: &[CenterBox],
    memory: &EncoderMemory,
    rng: &mut R,
    cfg: &DenoisingConfig,
    embed: &NoiseEmbedding,
    queries: &QueryInitializer,
    matching: usize,
) -> Result<DenoisingBatch> {
    if gts.is_empty() || !cfg.enabled || cfg.groups == 0 {
        return Ok(DenoisingBatch {
            noise_boxes: Vec::new(),
            blocks: Vec::new(),
            mask: IsolationMask::new(0, 0, matching),
            assignment: Vec::new(),
        });
    }
    let noise_boxes = make_noise_boxes(gts, rng, cfg.shift_ratio, cfg.scale_ratio, cfg.groups);
    let dtype = memory.tokens.dtype();
    let mut blocks = Vec::with_capacity(noise_boxes.len());
    for group in &noise_boxes {
        let flat: Vec<f64> = group.iter().flat_map(|b| b.to_array()).collect();
        let boxes = Tensor::from_vec(flat, (group.len(), 4), &Device::Cpu)?.to_dtype(dtype)?;
        let detection = embed.forward(&boxes)?;
        let recognition = queries.recognition_queries(memory, &boxes)?;
        blocks.push(InstanceBlock {
            queries: assemble_queries(&detection, &recognition)?,
            boxes,
        });
    }
    Ok(DenoisingBatch {
        mask: IsolationMask::new(cfg.groups, gts.len(), matching),
        assignment: (0..gts.len()).map(|i| (i, i)).collect(),
        noise_boxes,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{inter_group, SelfAttentionBlock};
    use candle_core::DType;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gts() -> Vec<CenterBox> {
        vec![CenterBox::new(0.3, 0.4, 0.2, 0.1), CenterBox::new(0.7, 0.6, 0.3, 0.2)]
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = make_noise_boxes(&gts(), &mut rng, 0.0, 0.0, 3);
        assert_eq!(out.len(), 3);
        for g in out {
            assert_eq!(g, gts());
        }
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let a = make_noise_boxes(&gts(), &mut ChaCha8Rng::seed_from_u64(5), 0.4, 0.4, 3);
        let b = make_noise_boxes(&gts(), &mut ChaCha8Rng::seed_from_u64(5), 0.4, 0.4, 3);
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn noised_centers_stay_inside_the_box(
            cx in 0.1f64..0.9, cy in 0.1f64..0.9, w in 0.01f64..0.2, h in 0.01f64..0.2,
            shift in 0.0f64..=1.0, scale in 0.0f64..0.99, seed in 0u64..1000,
        ) {
            let g = CenterBox::new(cx, cy, w, h);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for n in make_noise_boxes(&[g], &mut rng, shift, scale, 4).into_iter().flatten() {
                let c = g.to_corners();
                prop_assert!(n.cx >= c.x0 - 1e-12 && n.cx <= c.x1 + 1e-12);
                prop_assert!(n.cy >= c.y0 - 1e-12 && n.cy <= c.y1 + 1e-12);
                let nc = n.to_corners();
                prop_assert!(nc.x0 >= -1e-12 && nc.y0 >= -1e-12 && nc.x1 <= 1.0 + 1e-12 && nc.y1 <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn mask_layout() {
        let m = IsolationMask::new(3, 2, 4);
        assert_eq!(m.blocks(), &[0..2, 2..4, 4..6, 6..10]);
        assert_eq!(m.matching(), 6..10);
        let d = m.dense();
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(d[i][j], i / 2 == j / 2 || (i >= 6 && j >= 6));
            }
        }
        let empty = IsolationMask::new(0, 0, 4);
        assert!(empty.dense().iter().flatten().all(|&a| a));
        assert_eq!(empty.matching(), 0..4);
    }

    #[test]
    fn masked_inter_group_attention_equals_separate_blocks() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pb = ParamBuilder::random(3, DType::F64);
        let block = SelfAttentionBlock::new(&pb, 8, 2).unwrap();
        let m = IsolationMask::new(2, 2, 3);
        let v: Vec<f64> = (0..7 * 3 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = Tensor::from_vec(v, (7, 3, 8), &Device::Cpu).unwrap();
        let pos = s.affine(0.5, 0.1).unwrap();
        let full = inter_group(&block, &s, &pos, Some(&m.additive(DType::F64).unwrap())).unwrap();
        for r in m.blocks() {
            let part = inter_group(
                &block,
                &s.narrow(0, r.start, r.len()).unwrap(),
                &pos.narrow(0, r.start, r.len()).unwrap(),
                None,
            )
            .unwrap();
            let d: f64 = (part - full.narrow(0, r.start, r.len()).unwrap())
                .unwrap()
                .abs()
                .unwrap()
                .flatten_all()
                .unwrap()
                .max(0)
                .unwrap()
                .to_scalar()
                .unwrap();
            assert!(d < 1e-12);
        }
    }
}
