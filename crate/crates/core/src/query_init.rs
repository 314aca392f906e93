//! Task-aware query initialization: detection queries and proposals from the
//! top-scoring encoder tokens, recognition queries sampled inside the proposals.

use candle_core::{DType, Device, Tensor};

use crate::encoder::EncoderMemory;
use crate::error::{Error, Result};
use crate::nn::{self, index_tensor, Init, LayerNorm, Linear, ParamBuilder};
use crate::ops::{self, LevelLayout};

/// Side of a level-0 prior box; each coarser level doubles it.
pub const PRIOR_SIZE: f64 = 0.05;

/// Initial focal-loss bias so that every slot starts near probability 0.01.
pub fn prior_logit() -> f64 {
    -((1.0 - 0.01f64) / 0.01).ln()
}

#[derive(Debug, Clone)]
pub struct TaskAwareQueries {
    /// `(N, C)`.
    pub detection: Tensor,
    /// `(N, T, C)`.
    pub recognition: Tensor,
    /// `(N, 4)` proposals, detached: the decoder's initial references.
    pub proposals: Tensor,
    /// `(N, 4)` proposals with gradient, for the encoder's box supervision.
    pub proposals_raw: Tensor,
    /// Selected memory rows.
    pub indices: Vec<usize>,
    /// `(S,)` token scores.
    pub scores: Tensor,
}

impl TaskAwareQueries {
    /// `(N, T + 1, C)` with the detection query at token 0.
    pub fn assemble(&self) -> Result<Tensor> {
        assemble_queries(&self.detection, &self.recognition)
    }
}

pub fn assemble_queries(detection: &Tensor, recognition: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[&detection.unsqueeze(1)?, recognition], 1)?)
}

/// Inverse of [`assemble_queries`].
pub fn split_queries(s: &Tensor) -> Result<(Tensor, Tensor)> {
    let t = s.dim(1)? - 1;
    Ok((s.narrow(1, 0, 1)?.squeeze(1)?, s.narrow(1, 1, t)?))
}

/// Indices of the `n` highest scores among `eligible` tokens, highest first;
/// equal scores prefer the lower index.
pub fn select_topn(scores: &[f64], eligible: &[bool], n: usize) -> Result<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| eligible[i]).collect();
    if n > idx.len() {
        return Err(Error::TopN {
            requested: n,
            available: idx.len(),
        });
    }
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

/// `(cx, cy, w, h)` prior of every memory token: its center and a square
/// sized by its level.
pub fn prior_boxes(memory: &EncoderMemory) -> Vec<[f64; 4]> {
    memory
        .centers()
        .into_iter()
        .zip(&memory.positions)
        .map(|([x, y], p)| {
            let s = PRIOR_SIZE * 2f64.powi(p.level as i32);
            [x, y, s, s]
        })
        .collect()
}

/// Samples a `rows × text_len` grid inside each box of `boxes` `(N, 4)` from a
/// single-level map `(S0, C)` and averages over the rows: `(N, text_len, C)`.
pub fn sample_recognition(
    level: &Tensor,
    layout: &LevelLayout,
    boxes: &Tensor,
    text_len: usize,
    rows: usize,
) -> Result<Tensor> {
    let (n, _) = boxes.dims2()?;
    let (s, c) = level.dims2()?;
    let dtype = level.dtype();
    let dev = level.device();
    if n == 0 {
        return Ok(Tensor::zeros((0, text_len, c), dtype, dev)?);
    }
    let boxes = boxes.to_dtype(dtype)?;
    let frac = |k: usize| -> Vec<f64> { (0..k).map(|i| (i as f64 + 0.5) / k as f64 - 0.5).collect() };
    let col = Tensor::from_vec(frac(text_len), (1, text_len, 1), dev)?.to_dtype(dtype)?;
    let row = Tensor::from_vec(frac(rows), (1, 1, rows), dev)?.to_dtype(dtype)?;
    let b = |i: usize| boxes.narrow(1, i, 1).and_then(|t| t.reshape((n, 1, 1)));
    let (cx, cy, w, h) = (b(0)?, b(1)?, b(2)?, b(3)?);
    let x = cx.broadcast_add(&col.broadcast_mul(&w)?)?.broadcast_as((n, text_len, rows))?;
    let y = cy.broadcast_add(&row.broadcast_mul(&h)?)?.broadcast_as((n, text_len, rows))?;
    let loc = Tensor::stack(&[x, y], 3)?.reshape((n * text_len, 1, 1, rows, 2))?;
    let attn = Tensor::full(1.0 / rows as f64, (n * text_len, 1, 1, rows), dev)?.to_dtype(dtype)?;
    let value = level.reshape((s, 1, c))?;
    Ok(ops::deform_sample(&value, &loc, &attn, layout)?.reshape((n, text_len, c))?)
}

#[derive(Debug, Clone)]
struct LearnedQueries {
    detection: Tensor,
    recognition: Tensor,
}

#[derive(Debug, Clone)]
pub struct QueryInitializer {
    score: Linear,
    detection: Linear,
    detection_norm: LayerNorm,
    box_delta: Linear,
    learned: Option<LearnedQueries>,
    num_queries: usize,
    text_len: usize,
    rows: usize,
}

impl QueryInitializer {
    /// With `learned`, detection and recognition queries are free embeddings
    /// and only the proposals come from the memory.
    pub fn new(
        pb: &ParamBuilder,
        d_model: usize,
        num_queries: usize,
        text_len: usize,
        rows: usize,
        learned: bool,
    ) -> Result<Self> {
        let score = Linear::with_init(
            &pb.pp("score"),
            d_model,
            1,
            Init::Xavier(d_model, 1),
            Some(Init::Values(vec![prior_logit()])),
        )?;
        let learned = if learned {
            Some(LearnedQueries {
                detection: pb.get(&[num_queries, d_model], "learned_detection", Init::Normal(1.0))?,
                recognition: pb.get(&[num_queries, text_len, d_model], "learned_recognition", Init::Normal(1.0))?,
            })
        } else {
            None
        };
        Ok(Self {
            score,
            detection: Linear::xavier(&pb.pp("detection"), d_model, d_model)?,
            detection_norm: LayerNorm::new(&pb.pp("detection_norm"), d_model)?,
            box_delta: Linear::with_init(&pb.pp("box_delta"), d_model, 4, Init::Zeros, Some(Init::Zeros))?,
            learned,
            num_queries,
            text_len,
            rows,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    /// One logit per memory token, `(S,)`.
    pub fn score_memory(&self, memory: &EncoderMemory) -> Result<Tensor> {
        Ok(self.score.forward(&memory.tokens)?.squeeze(1)?)
    }

    /// Recognition queries sampled from the finest memory level inside `boxes`.
    pub fn recognition_queries(&self, memory: &EncoderMemory, boxes: &Tensor) -> Result<Tensor> {
        let (level, layout) = memory.finest_level()?;
        sample_recognition(&level, &layout, boxes, self.text_len, self.rows)
    }

    pub fn forward(&self, memory: &EncoderMemory) -> Result<TaskAwareQueries> {
        let scores = self.score_memory(memory)?;
        let host: Vec<f64> = scores.to_dtype(DType::F64)?.to_vec1()?;
        let indices = select_topn(&host, &memory.valid, self.num_queries)?;
        let idx = index_tensor(&indices)?;
        let selected = memory.tokens.index_select(&idx, 0)?;
        let priors = prior_boxes(memory);
        let prior: Vec<f64> = indices.iter().flat_map(|&i| priors[i]).collect();
        let prior = Tensor::from_vec(prior, (indices.len(), 4), &Device::Cpu)?.to_dtype(scores.dtype())?;
        let proposals_raw = nn::sigmoid(&(nn::inverse_sigmoid(&prior)? + self.box_delta.forward(&selected)?)?)?;
        let proposals = proposals_raw.detach();
        let (detection, recognition) = match &self.learned {
            Some(l) => (l.detection.clone(), l.recognition.clone()),
            None => (
                self.detection_norm.forward(&self.detection.forward(&selected)?)?,
                self.recognition_queries(memory, &proposals)?,
            ),
        };
        Ok(TaskAwareQueries {
            detection,
            recognition,
            proposals,
            proposals_raw,
            indices,
            scores,
        })
    }
}
