//! The assembled spotter: backbone, encoder, query initialization, decoder
//! and the denoising branch.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;

use crate::backbone::Backbone;
use crate::config::{DenoisingConfig, ModelConfig, QueryInit};
use crate::data::{Charset, TextInstance};
use crate::decoder::{Decoder, DecoderConfig, DecoderOutput, InstanceBlock, POLYGON_COORDS};
use crate::denoising::{build_denoising_batch, DenoisingBatch, NoiseEmbedding};
use crate::encoder::{Encoder, EncoderMemory};
use crate::error::{Error, Result};
use crate::geometry::{CenterBox, Polygon16};
use crate::loss::Targets;
use crate::nn::{self, ParamBuilder, ParamStore};
use crate::query_init::{QueryInitializer, TaskAwareQueries};

const LEVELS: usize = 4;

#[derive(Debug)]
pub struct TextSpotter {
    config: ModelConfig,
    charset: Charset,
    backbone: Backbone,
    encoder: Encoder,
    queries: QueryInitializer,
    decoder: Decoder,
    noise: NoiseEmbedding,
    params: ParamStore,
}

/// Everything one forward pass produces. Coordinates are relative to the
/// padded canvas; `valid_ratio` maps them back to the image.
#[derive(Debug)]
pub struct SpotterOutput {
    pub memory: EncoderMemory,
    pub valid_ratio: [f64; 2],
    pub queries: TaskAwareQueries,
    pub matching: DecoderOutput,
    pub denoising: Option<(DenoisingBatch, Vec<DecoderOutput>)>,
}

/// A decoded instance in normalized image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub polygon: Polygon16,
    pub bbox: CenterBox,
    pub score: f64,
    pub transcript: String,
}

impl TextSpotter {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(config, ParamBuilder::random(seed, dtype))
    }

    /// Rebuilds the model around stored parameters. Every parameter must be
    /// present with the expected shape, and none may be left over.
    pub fn from_tensors(config: &ModelConfig, tensors: HashMap<String, Tensor>, dtype: DType) -> Result<Self> {
        Self::build(config, ParamBuilder::from_tensors(tensors, dtype))
    }

    fn build(config: &ModelConfig, pb: ParamBuilder) -> Result<Self> {
        let charset = Charset::new(&config.charset)?;
        let c = config.d_model;
        if config.backbone_channels.len() != LEVELS {
            return Err(Error::Config(format!(
                "model.backbone_channels needs {LEVELS} entries, got {}",
                config.backbone_channels.len()
            )));
        }
        let backbone = Backbone::new(&pb.pp("backbone"), &config.backbone_channels, c)?;
        let encoder = Encoder::new(
            &pb.pp("encoder"),
            c,
            config.encoder_layers,
            config.heads,
            LEVELS,
            config.points,
            config.ffn_dim,
        )?;
        let queries = QueryInitializer::new(
            &pb.pp("query_init"),
            c,
            config.num_queries,
            config.max_text_len,
            config.sample_rows,
            config.query_init == QueryInit::Learned,
        )?;
        let decoder = Decoder::new(
            &pb.pp("decoder"),
            &DecoderConfig {
                d_model: c,
                heads: config.heads,
                levels: LEVELS,
                points: config.points,
                ffn_dim: config.ffn_dim,
                layers: config.decoder_layers,
                text_len: config.max_text_len,
                charset_len: charset.len(),
                vlc: config.vlc,
            },
        )?;
        let noise = NoiseEmbedding::new(&pb.pp("denoising"), c)?;
        let params = pb.finish()?;
        Ok(Self {
            config: config.clone(),
            charset,
            backbone,
            encoder,
            queries,
            decoder,
            noise,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn charset(&self) -> &Charset {
        &self.charset
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Backbone and encoder. `image`: `(H, W, 3)` in `[0, 1]`.
    pub fn encode(&self, image: &Tensor) -> Result<(EncoderMemory, [f64; 2])> {
        let pyramid = self.backbone.forward(&image.to_dtype(self.dtype())?)?;
        let memory = self.encoder.encode(
            &pyramid.tokens()?,
            &pyramid.positions(),
            &pyramid.layout,
            &pyramid.valid_mask(),
        )?;
        Ok((memory, pyramid.valid_ratio))
    }

    /// Full forward pass. With `denoise`, noised copies of the given boxes
    /// (padded-canvas coordinates) are decoded as separate blocks.
    pub fn forward<R: Rng>(
        &self,
        image: &Tensor,
        denoise: Option<(&[CenterBox], &DenoisingConfig, &mut R)>,
    ) -> Result<SpotterOutput> {
        let (memory, valid_ratio) = self.encode(image)?;
        let queries = self.queries.forward(&memory)?;
        let values = self.decoder.project_memory(&memory)?;
        let block = InstanceBlock {
            queries: queries.assemble()?,
            boxes: queries.proposals.clone(),
        };
        let matching = self.decoder.forward(&block, &values, &memory.layout)?;
        let denoising = match denoise {
            Some((gts, cfg, rng)) if cfg.enabled && !gts.is_empty() => {
                let batch = build_denoising_batch(
                    gts,
                    &memory,
                    rng,
                    cfg,
                    &self.noise,
                    &self.queries,
                    self.config.num_queries,
                )?;
                let outs = batch
                    .blocks
                    .iter()
                    .map(|b| self.decoder.forward(b, &values, &memory.layout))
                    .collect::<Result<Vec<_>>>()?;
                Some((batch, outs))
            }
            _ => None,
        };
        Ok(SpotterOutput {
            memory,
            valid_ratio,
            queries,
            matching,
            denoising,
        })
    }

    /// Instances scoring at least `threshold`, highest score first.
    pub fn predict(&self, image: &Tensor, threshold: f64) -> Result<Vec<Detection>> {
        let out = self.forward::<rand_chacha::ChaCha8Rng>(image, None)?;
        decode_predictions(&out, &self.charset, threshold)
    }

    /// Ground truth in the padded-canvas frame used by the model.
    pub fn targets(&self, instances: &[TextInstance], valid_ratio: [f64; 2]) -> Result<Targets> {
        targets_for(instances, valid_ratio, &self.charset, self.config.max_text_len, self.dtype())
    }
}

/// Maps image-normalized boxes into the padded canvas.
pub fn to_canvas(b: &CenterBox, ratio: [f64; 2]) -> CenterBox {
    CenterBox::new(b.cx * ratio[0], b.cy * ratio[1], b.w * ratio[0], b.h * ratio[1])
}

pub fn targets_for(
    instances: &[TextInstance],
    ratio: [f64; 2],
    charset: &Charset,
    text_len: usize,
    dtype: DType,
) -> Result<Targets> {
    let m = instances.len();
    let boxes: Vec<f64> = instances
        .iter()
        .flat_map(|i| to_canvas(&i.bbox, ratio).to_array())
        .collect();
    let polygons: Vec<f64> = instances
        .iter()
        .flat_map(|i| i.polygon.points().iter().flat_map(|p| [p[0] * ratio[0], p[1] * ratio[1]]).collect::<Vec<_>>())
        .collect();
    let chars = instances
        .iter()
        .map(|i| charset.encode(&i.transcript, text_len))
        .collect::<Result<Vec<_>>>()?;
    Ok(Targets {
        boxes: Tensor::from_vec(boxes, (m, 4), &Device::Cpu)?.to_dtype(dtype)?,
        polygons: Tensor::from_vec(polygons, (m, POLYGON_COORDS), &Device::Cpu)?.to_dtype(dtype)?,
        chars,
        pad: charset.pad(),
    })
}

/// Final-layer predictions above `threshold`, mapped back to image
/// coordinates and transcribed greedily.
pub fn decode_predictions(out: &SpotterOutput, charset: &Charset, threshold: f64) -> Result<Vec<Detection>> {
    let last = out.matching.last();
    let scores: Vec<f64> = nn::sigmoid(&last.logits)?.to_dtype(DType::F64)?.to_vec1()?;
    let boxes: Vec<Vec<f64>> = last.boxes.to_dtype(DType::F64)?.to_vec2()?;
    let polygons: Vec<Vec<f64>> = last.polygons.to_dtype(DType::F64)?.to_vec2()?;
    let ids: Vec<Vec<u32>> = last.chars.argmax(D::Minus1)?.to_vec2()?;
    let [rx, ry] = out.valid_ratio;
    let mut dets = Vec::new();
    for (i, &score) in scores.iter().enumerate() {
        if score < threshold {
            continue;
        }
        let b = &boxes[i];
        let polygon = Polygon16::from_flat(
            &polygons[i]
                .chunks_exact(2)
                .flat_map(|p| [p[0] / rx, p[1] / ry])
                .collect::<Vec<_>>(),
        )?;
        dets.push(Detection {
            polygon,
            bbox: CenterBox::new(b[0] / rx, b[1] / ry, b[2] / rx, b[3] / ry),
            score,
            transcript: charset.decode(&ids[i]),
        });
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(dets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        let mut m = Config::overfit().model;
        m.backbone_channels = vec![8, 8, 16, 16];
        m.d_model = 16;
        m.ffn_dim = 32;
        m.encoder_layers = 1;
        m.decoder_layers = 2;
        m.num_queries = 5;
        m.max_text_len = 4;
        m
    }

    #[test]
    fn forward_shapes_and_canvas_frame() {
        let m = TextSpotter::new(&tiny(), 0, DType::F32).unwrap();
        let img = Tensor::zeros((64, 96, 3), DType::F32, &Device::Cpu).unwrap();
        let out = m.forward::<ChaCha8Rng>(&img, None).unwrap();
        assert_eq!(out.valid_ratio, [96.0 / 128.0, 1.0]);
        assert_eq!(out.matching.layers.len(), 2);
        assert_eq!(out.matching.last().chars.dims(), &[5, 4, 38]);
        assert_eq!(out.matching.last().polygons.dims(), &[5, 32]);
        assert!(out.denoising.is_none());
    }

    #[test]
    fn denoising_leaves_matching_outputs_untouched() {
        let m = TextSpotter::new(&tiny(), 1, DType::F64).unwrap();
        let img = Tensor::rand(0f64, 1.0, (64, 64, 3), &Device::Cpu).unwrap();
        let gts = [CenterBox::new(0.3, 0.3, 0.2, 0.1), CenterBox::new(0.6, 0.7, 0.3, 0.1)];
        let cfg = DenoisingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let with = m.forward(&img, Some((&gts[..], &cfg, &mut rng))).unwrap();
        let without = m.forward::<ChaCha8Rng>(&img, None).unwrap();
        let (batch, outs) = with.denoising.as_ref().unwrap();
        assert_eq!(outs.len(), 3);
        assert_eq!(batch.assignment, vec![(0, 0), (1, 1)]);
        let a: Vec<f64> = with.matching.queries.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = without.matching.queries.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }
}
