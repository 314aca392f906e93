//! Optimization: loss assembly for one sample, the optimizer, and the
//! training loop.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{Config, LossWeights};
use crate::data::{augment, SpottingSample};
use crate::decoder::{DecoderOutput, LayerPrediction};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::geometry::CenterBox;
use crate::loss::{
    accumulate, ensure_finite, giou_loss, l1_loss, sigmoid_focal_loss, spotting_loss, zero_terms, LossBreakdown,
    Targets, TermTensors,
};
use crate::matching::{cost_matrix, hungarian};
use crate::model::{to_canvas, SpotterOutput, TextSpotter};
use crate::nn::{self, index_tensor};

/// Decoupled-weight-decay Adam.
#[derive(Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.step as usize
    }

    /// One update of every parameter that has a gradient.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = (&'a String, &'a Var)>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, var) in params {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = match self.moments.remove(name) {
                Some(mv) => mv,
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            let p = var.as_tensor().detach();
            let decayed = (&p * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m.detach(), v.detach()));
        }
        Ok(())
    }
}

/// Global ℓ2 norm of all gradients.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(sq.sqrt())
}

/// Rescales the gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(grads)?;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.values_mut() {
            *g = (&*g * s)?;
        }
    }
    Ok(norm)
}

fn host_probs_boxes(pred: &LayerPrediction) -> Result<(Vec<f64>, Vec<CenterBox>)> {
    let probs = nn::sigmoid(&pred.logits)?.to_dtype(DType::F64)?.to_vec1()?;
    let boxes: Vec<Vec<f64>> = pred.boxes.to_dtype(DType::F64)?.to_vec2()?;
    Ok((probs, boxes.iter().map(|b| CenterBox::new(b[0], b[1], b[2], b[3])).collect()))
}

fn matched_layer_loss(pred: &LayerPrediction, targets: &Targets, gts: &[CenterBox], w: &LossWeights) -> Result<TermTensors> {
    let (probs, boxes) = host_probs_boxes(pred)?;
    let assignment = hungarian(&cost_matrix(&probs, &boxes, gts, w))?;
    spotting_loss(pred, targets, &assignment.pairs, gts.len().max(1) as f64, w)
}

fn decoder_losses(
    out: &DecoderOutput,
    targets: &Targets,
    gts: &[CenterBox],
    w: &LossWeights,
    aux: bool,
) -> Result<(TermTensors, Option<TermTensors>)> {
    let n = out.layers.len();
    let main = matched_layer_loss(&out.layers[n - 1], targets, gts, w)?;
    let mut rest = None;
    if aux {
        for layer in &out.layers[..n - 1] {
            rest = Some(accumulate(rest, matched_layer_loss(layer, targets, gts, w)?)?);
        }
    }
    Ok((main, rest))
}

/// Token-score focal loss against "center inside a ground-truth box", and
/// matched box losses on the proposals of the selected tokens.
fn encoder_loss(out: &SpotterOutput, targets: &Targets, gts: &[CenterBox], w: &LossWeights) -> Result<TermTensors> {
    let dtype = out.queries.scores.dtype();
    let corners: Vec<_> = gts.iter().map(|g| g.to_corners()).collect();
    let valid: Vec<usize> = (0..out.memory.valid.len()).filter(|&i| out.memory.valid[i]).collect();
    let centers = out.memory.centers();
    let labels: Vec<f64> = valid
        .iter()
        .map(|&i| {
            let [x, y] = centers[i];
            let inside = corners.iter().any(|c| x >= c.x0 && x <= c.x1 && y >= c.y0 && y <= c.y1);
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let positives = labels.iter().sum::<f64>().max(1.0);
    let labels = Tensor::from_vec(labels, valid.len(), &Device::Cpu)?.to_dtype(dtype)?;
    let scores = out.queries.scores.index_select(&index_tensor(&valid)?, 0)?;
    let class = (sigmoid_focal_loss(&scores, &labels, w.focal_alpha, w.focal_gamma)? / positives)?;

    let mut terms = zero_terms(dtype)?;
    terms.class = class;
    if gts.is_empty() {
        return Ok(terms);
    }
    let sel = out.queries.scores.index_select(&index_tensor(&out.queries.indices)?, 0)?;
    let probs: Vec<f64> = nn::sigmoid(&sel)?.to_dtype(DType::F64)?.to_vec1()?;
    let raw: Vec<Vec<f64>> = out.queries.proposals_raw.to_dtype(DType::F64)?.to_vec2()?;
    let boxes: Vec<CenterBox> = raw.iter().map(|b| CenterBox::new(b[0], b[1], b[2], b[3])).collect();
    let pairs = hungarian(&cost_matrix(&probs, &boxes, gts, w))?.pairs;
    let slots = index_tensor(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
    let gi = index_tensor(&pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
    let pb = out.queries.proposals_raw.index_select(&slots, 0)?;
    let tb = targets.boxes.index_select(&gi, 0)?;
    let norm = gts.len() as f64;
    terms.box_l1 = (l1_loss(&pb, &tb)? / norm)?;
    terms.box_giou = (giou_loss(&pb, &tb)? / norm)?;
    Ok(terms)
}

/// Forward pass and every loss term for one sample. The returned tensor is
/// the weighted total.
pub fn sample_loss(
    model: &TextSpotter,
    sample: &SpottingSample,
    cfg: &Config,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, LossBreakdown)> {
    let image = sample.image_tensor(model.dtype())?;
    // The padded canvas depends only on the image size.
    let (w, h) = (sample.width() as usize, sample.height() as usize);
    let pad = |v: usize| v.div_ceil(crate::backbone::SIZE_MULTIPLE) * crate::backbone::SIZE_MULTIPLE;
    let ratio = [w as f64 / pad(w) as f64, h as f64 / pad(h) as f64];
    let gts: Vec<CenterBox> = sample.instances.iter().map(|i| to_canvas(&i.bbox, ratio)).collect();
    let out = model.forward(&image, Some((&gts[..], &cfg.denoising, rng)))?;
    debug_assert_eq!(out.valid_ratio, ratio);
    let targets = model.targets(&sample.instances, ratio)?;
    let wts = &cfg.loss;

    let (main, aux) = decoder_losses(&out.matching, &targets, &gts, wts, cfg.train.aux_loss)?;
    let mut dn = None;
    if let Some((batch, outs)) = &out.denoising {
        let norm = (gts.len() * batch.blocks.len()) as f64;
        for o in outs {
            let layers = if cfg.train.aux_loss { &o.layers[..] } else { &o.layers[o.layers.len() - 1..] };
            for layer in layers {
                dn = Some(accumulate(dn, spotting_loss(layer, &targets, &batch.assignment, norm, wts)?)?);
            }
        }
    }
    let enc = encoder_loss(&out, &targets, &gts, wts)?;

    let dtype = model.dtype();
    let aux = match aux {
        Some(a) => a,
        None => zero_terms(dtype)?,
    };
    let dn = match dn {
        Some(d) => d,
        None => zero_terms(dtype)?,
    };
    let total = (((main.weighted(wts)? + aux.weighted(wts)?)? + dn.weighted(wts)?)? + enc.weighted(wts)?)?;
    let mut breakdown = LossBreakdown {
        main: main.values()?,
        aux: aux.values()?,
        denoising: dn.values()?,
        encoder: enc.values()?,
        total: 0.0,
    };
    breakdown.total = total.to_dtype(DType::F64)?.to_scalar()?;
    Ok((total, breakdown))
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

/// Owns the model and optimizer state across steps.
#[derive(Debug)]
pub struct Trainer {
    pub model: TextSpotter,
    pub config: Config,
    optimizer: AdamW,
    iteration: usize,
}

impl Trainer {
    pub fn new(model: TextSpotter, config: Config) -> Self {
        let optimizer = AdamW::new(config.train.weight_decay);
        Self {
            model,
            config,
            optimizer,
            iteration: 0,
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Forward, backward and (when `update`) one optimizer step on `batch`.
    /// The batch loss is the mean of the per-sample losses.
    pub fn train_step(&mut self, batch: &[SpottingSample], rng: &mut ChaCha8Rng, update: bool) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut total: Option<Tensor> = None;
        let mut breakdown = LossBreakdown::default();
        for sample in batch {
            let (t, b) = sample_loss(&self.model, sample, &self.config, rng)?;
            total = Some(match total {
                None => t,
                Some(acc) => (acc + t)?,
            });
            for (dst, src) in [
                (&mut breakdown.main, b.main),
                (&mut breakdown.aux, b.aux),
                (&mut breakdown.denoising, b.denoising),
                (&mut breakdown.encoder, b.encoder),
            ] {
                dst.add(&scale_terms(&src, scale));
            }
            breakdown.total += b.total * scale;
        }
        ensure_finite(&breakdown)?;
        let total = (total.expect("non-empty batch") * scale)?;
        let lr = self.config.train.lr_at(self.iteration);
        let mut grad_norm = 0.0;
        if update {
            let store = total.backward()?;
            let mut grads = BTreeMap::new();
            for (name, var) in self.model.params().vars() {
                if let Some(g) = store.get(var.as_tensor()) {
                    // Gradients carry the backward graph; keeping them attached
                    // in the optimizer moments would retain every step's graph.
                    grads.insert(name.clone(), g.detach());
                }
            }
            grad_norm = clip_grad_norm(&mut grads, self.config.train.clip_norm)?;
            if !grad_norm.is_finite() {
                return Err(Error::NonFiniteLoss("gradient norm".into()));
            }
            self.optimizer.step(self.model.params().vars(), &grads, lr)?;
            self.iteration += 1;
        }
        Ok(StepRecord {
            iteration: self.iteration,
            lr,
            grad_norm,
            loss: breakdown,
        })
    }
}

fn scale_terms(t: &crate::loss::LossTerms, s: f64) -> crate::loss::LossTerms {
    crate::loss::LossTerms {
        class: t.class * s,
        box_l1: t.box_l1 * s,
        box_giou: t.box_giou * s,
        polygon: t.polygon * s,
        recognition: t.recognition * s,
    }
}

/// Batch of step `iteration`: consecutive samples, wrapping around.
pub fn batch_indices(iteration: usize, batch_size: usize, len: usize) -> Vec<usize> {
    (0..batch_size).map(|k| (iteration * batch_size + k) % len).collect()
}

/// Result of [`fit`].
#[derive(Debug)]
pub struct FitOutcome {
    pub model: TextSpotter,
    pub records: Vec<StepRecord>,
    /// `(iteration, report)` of every periodic evaluation.
    pub evaluations: Vec<(usize, EvalReport)>,
}

pub const FINAL_CHECKPOINT: &str = "checkpoint.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const METRICS_LOG: &str = "metrics.jsonl";

/// Trains a freshly initialized model on `data`. With `out_dir`, writes the
/// metrics log, the final checkpoint and, when periodic evaluation is on, the
/// checkpoint with the best end-to-end H-mean.
pub fn fit(
    cfg: &Config,
    data: &[SpottingSample],
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if data.is_empty() && cfg.train.iterations > 0 {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let model = TextSpotter::new(&cfg.model, cfg.train.seed, DType::F32)?;
    let mut trainer = Trainer::new(model, cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(0x5eed));
    let mut log = match out_dir {
        Some(d) => Some(BufWriter::new(File::create(d.join(METRICS_LOG))?)),
        None => None,
    };
    let mut records = Vec::new();
    let mut evaluations = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for it in 0..cfg.train.iterations {
        let batch: Vec<SpottingSample> = batch_indices(it, cfg.train.batch_size, data.len())
            .into_iter()
            .map(|i| {
                if cfg.augment.enabled {
                    augment(&data[i], &cfg.augment, &mut rng)
                } else {
                    Ok(data[i].clone())
                }
            })
            .collect::<Result<_>>()?;
        let rec = trainer.train_step(&batch, &mut rng, true)?;
        if let Some(w) = log.as_mut() {
            if cfg.train.log_every > 0 && (it % cfg.train.log_every == 0 || it + 1 == cfg.train.iterations) {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
        on_step(&rec);
        records.push(rec);
        let done = it + 1;
        if cfg.train.eval_every > 0 && done % cfg.train.eval_every == 0 {
            let report = evaluate(&trainer.model, data, cfg, None)?;
            if let Some(d) = out_dir {
                if report.e2e.hmean > best {
                    checkpoint::save(&trainer.model, cfg, &d.join(BEST_CHECKPOINT))?;
                }
            }
            best = best.max(report.e2e.hmean);
            evaluations.push((done, report));
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    if let Some(d) = out_dir {
        checkpoint::save(&trainer.model, cfg, &d.join(FINAL_CHECKPOINT))?;
    }
    Ok(FitOutcome {
        model: trainer.model,
        records,
        evaluations,
    })
}

/// Runs the model on every sample and scores it against the annotations.
pub fn evaluate(
    model: &TextSpotter,
    data: &[SpottingSample],
    cfg: &Config,
    lexicon: Option<&crate::eval::Lexicon>,
) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(data.len());
    let mut gts = Vec::with_capacity(data.len());
    for s in data {
        preds.push(infer(model, s, cfg)?);
        gts.push(crate::eval::GroundTruth::from_instances(&s.instances));
    }
    crate::eval::evaluate(&preds, &gts, lexicon, cfg.eval.iou_threshold)
}

/// Predictions for one sample at the configured test size and threshold,
/// in normalized image coordinates.
pub fn infer(model: &TextSpotter, sample: &SpottingSample, cfg: &Config) -> Result<Vec<crate::eval::Prediction>> {
    let image = match cfg.inference.shorter_side {
        Some(s) => crate::data::resize_for_inference(&sample.image, s, cfg.inference.max_long),
        None => sample.image.clone(),
    };
    let t = crate::data::image_tensor(&image, model.dtype())?;
    let dets = model.predict(&t, cfg.inference.score_threshold)?;
    Ok(dets.into_iter().map(crate::eval::Prediction::from).collect())
}
