//! Training losses: focal classification, box ℓ1 and GIoU, polygon ℓ1 and
//! character cross-entropy.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::LossWeights;
use crate::decoder::LayerPrediction;
use crate::error::{Error, Result};
use crate::nn::{self, index_tensor};

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub class: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub polygon: f64,
    pub recognition: f64,
}

impl LossTerms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.class * self.class
            + w.box_scale * (w.box_l1 * self.box_l1 + w.box_giou * self.box_giou)
            + w.polygon * self.polygon
            + w.recognition * self.recognition
    }

    pub fn add(&mut self, o: &LossTerms) {
        self.class += o.class;
        self.box_l1 += o.box_l1;
        self.box_giou += o.box_giou;
        self.polygon += o.polygon;
        self.recognition += o.recognition;
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("class", self.class),
            ("box_l1", self.box_l1),
            ("box_giou", self.box_giou),
            ("polygon", self.polygon),
            ("recognition", self.recognition),
        ]
    }
}

/// Loss values split by where they come from. `total` is the weighted sum
/// of all four groups.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Last decoder layer, matched slots.
    pub main: LossTerms,
    /// Earlier decoder layers, summed.
    pub aux: LossTerms,
    /// Denoising groups, summed over layers.
    pub denoising: LossTerms,
    /// Token scores and proposals of the query initializer.
    pub encoder: LossTerms,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.main.weighted(w) + self.aux.weighted(w) + self.denoising.weighted(w) + self.encoder.weighted(w)
    }

    /// First non-finite component, as `group.term`.
    pub fn non_finite(&self) -> Option<String> {
        for (g, t) in [
            ("main", &self.main),
            ("aux", &self.aux),
            ("denoising", &self.denoising),
            ("encoder", &self.encoder),
        ] {
            for (name, v) in t.named() {
                if !v.is_finite() {
                    return Some(format!("{g}.{name}"));
                }
            }
        }
        None
    }
}

/// Loss components as scalar tensors.
#[derive(Debug, Clone)]
pub struct TermTensors {
    pub class: Tensor,
    pub box_l1: Tensor,
    pub box_giou: Tensor,
    pub polygon: Tensor,
    pub recognition: Tensor,
}

impl TermTensors {
    pub fn weighted(&self, w: &LossWeights) -> Result<Tensor> {
        let boxes = ((&self.box_l1 * w.box_l1)? + (&self.box_giou * w.box_giou)?)?;
        Ok(((&self.class * w.class)?
            + (boxes * w.box_scale)?
            + (&self.polygon * w.polygon)?
            + (&self.recognition * w.recognition)?)?)
    }

    pub fn values(&self) -> Result<LossTerms> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossTerms {
            class: f(&self.class)?,
            box_l1: f(&self.box_l1)?,
            box_giou: f(&self.box_giou)?,
            polygon: f(&self.polygon)?,
            recognition: f(&self.recognition)?,
        })
    }
}

/// Ground truth of one image in model coordinates.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `(M, 4)` center boxes.
    pub boxes: Tensor,
    /// `(M, 32)` polygon coordinates.
    pub polygons: Tensor,
    /// `M` rows of `T` character ids (characters, end marker, padding).
    pub chars: Vec<Vec<u32>>,
    pub pad: u32,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }
}

fn scalar(v: f64, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::new(v, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Summed sigmoid focal loss. `targets` holds 0/1 labels of the same shape as `logits`.
pub fn sigmoid_focal_loss(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    if logits.elem_count() == 0 {
        return scalar(0.0, logits.dtype());
    }
    let p = nn::sigmoid(logits)?;
    // Stable binary cross-entropy: max(x, 0) − x·t + log(1 + e^{−|x|}).
    let ce = ((logits.relu()? - (logits * targets)?)? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let one_minus_t = targets.affine(-1.0, 1.0)?;
    let p_t = ((&p * targets)? + (p.affine(-1.0, 1.0)? * &one_minus_t)?)?;
    let miss = p_t.affine(-1.0, 1.0)?;
    let modulator = if gamma == 2.0 {
        miss.sqr()?
    } else if gamma == 0.0 {
        miss.ones_like()?
    } else {
        miss.clamp(1e-12, 1.0)?.powf(gamma)?
    };
    let alpha_t = (targets.affine(alpha, 0.0)? + one_minus_t.affine(1.0 - alpha, 0.0)?)?;
    Ok((ce * modulator)?.mul(&alpha_t)?.sum_all()?)
}

/// Summed `1 − GIoU` between rows of two `(k, 4)` center-box tensors.
pub fn giou_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let corners = |b: &Tensor| -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let c = |i| b.narrow(1, i, 1);
        let (cx, cy, w, h) = (c(0)?, c(1)?, c(2)?, c(3)?);
        Ok((
            (&cx - (&w * 0.5)?)?,
            (&cy - (&h * 0.5)?)?,
            (&cx + (&w * 0.5)?)?,
            (&cy + (&h * 0.5)?)?,
        ))
    };
    let (ax0, ay0, ax1, ay1) = corners(pred)?;
    let (bx0, by0, bx1, by1) = corners(gt)?;
    let area = |x0: &Tensor, y0: &Tensor, x1: &Tensor, y1: &Tensor| -> Result<Tensor> {
        Ok(((x1 - x0)?.relu()? * (y1 - y0)?.relu()?)?)
    };
    let area_a = area(&ax0, &ay0, &ax1, &ay1)?;
    let area_b = area(&bx0, &by0, &bx1, &by1)?;
    let inter = area(&ax0.maximum(&bx0)?, &ay0.maximum(&by0)?, &ax1.minimum(&bx1)?, &ay1.minimum(&by1)?)?;
    let eps = 1e-7;
    let union = ((area_a + area_b)? - &inter)?;
    let iou = (&inter / (&union + eps)?)?;
    let hull = area(&ax0.minimum(&bx0)?, &ay0.minimum(&by0)?, &ax1.maximum(&bx1)?, &ay1.maximum(&by1)?)?;
    let penalty = ((&hull - &union)? / (&hull + eps)?)?;
    let g = (iou - penalty)?;
    Ok(g.affine(-1.0, 1.0)?.sum_all()?)
}

/// Summed absolute difference.
pub fn l1_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok((pred - gt)?.abs()?.sum_all()?)
}

/// Per-instance mean ℓ1 over the polygon coordinates, summed over instances.
pub fn polygon_l1(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let k = pred.dim(D::Minus1)?;
    Ok((l1_loss(pred, gt)? / k as f64)?)
}

/// Per-instance mean cross-entropy over non-padding positions, summed over
/// instances. `logits`: `(k, T, classes)`.
pub fn recognition_ce(logits: &Tensor, targets: &[Vec<u32>], pad: u32) -> Result<Tensor> {
    let (k, t, classes) = logits.dims3()?;
    if k == 0 {
        return scalar(0.0, logits.dtype());
    }
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_probs = shifted.broadcast_sub(&lse)?;
    let mut pick = vec![0.0; k * t * classes];
    for (i, row) in targets.iter().enumerate() {
        let valid = row.iter().take(t).filter(|&&c| c != pad).count().max(1);
        for (j, &c) in row.iter().take(t).enumerate() {
            if c != pad {
                pick[(i * t + j) * classes + c as usize] = 1.0 / valid as f64;
            }
        }
    }
    let pick = Tensor::from_vec(pick, (k, t, classes), logits.device())?.to_dtype(logits.dtype())?;
    Ok((log_probs * pick)?.sum_all()?.neg()?)
}

/// Losses of one set of predictions against `targets` under a known
/// assignment of `(gt_index, slot)` pairs. Every slot not in `pairs` is a
/// negative for the classifier. All terms are divided by `norm`.
pub fn spotting_loss(
    pred: &LayerPrediction,
    targets: &Targets,
    pairs: &[(usize, usize)],
    norm: f64,
    w: &LossWeights,
) -> Result<TermTensors> {
    let dtype = pred.logits.dtype();
    let n = pred.logits.dim(0)?;
    let mut labels = vec![0.0; n];
    for &(_, s) in pairs {
        labels[s] = 1.0;
    }
    let labels = Tensor::from_vec(labels, n, &Device::Cpu)?.to_dtype(dtype)?;
    let class = (sigmoid_focal_loss(&pred.logits, &labels, w.focal_alpha, w.focal_gamma)? / norm)?;
    if pairs.is_empty() {
        let zero = scalar(0.0, dtype)?;
        return Ok(TermTensors {
            class,
            box_l1: zero.clone(),
            box_giou: zero.clone(),
            polygon: zero.clone(),
            recognition: zero,
        });
    }
    let slots = index_tensor(&pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
    let gts: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let gi = index_tensor(&gts)?;
    let pb = pred.boxes.index_select(&slots, 0)?;
    let tb = targets.boxes.index_select(&gi, 0)?.to_dtype(dtype)?;
    let pp = pred.polygons.index_select(&slots, 0)?;
    let tp = targets.polygons.index_select(&gi, 0)?.to_dtype(dtype)?;
    let pc = pred.chars.index_select(&slots, 0)?;
    let tc: Vec<Vec<u32>> = gts.iter().map(|&g| targets.chars[g].clone()).collect();
    Ok(TermTensors {
        class,
        box_l1: (l1_loss(&pb, &tb)? / norm)?,
        box_giou: (giou_loss(&pb, &tb)? / norm)?,
        polygon: (polygon_l1(&pp, &tp)? / norm)?,
        recognition: (recognition_ce(&pc, &tc, targets.pad)? / norm)?,
    })
}

/// Adds `b` into `a` component-wise.
pub fn accumulate(a: Option<TermTensors>, b: TermTensors) -> Result<TermTensors> {
    Ok(match a {
        None => b,
        Some(a) => TermTensors {
            class: (a.class + b.class)?,
            box_l1: (a.box_l1 + b.box_l1)?,
            box_giou: (a.box_giou + b.box_giou)?,
            polygon: (a.polygon + b.polygon)?,
            recognition: (a.recognition + b.recognition)?,
        },
    })
}

pub fn zero_terms(dtype: DType) -> Result<TermTensors> {
    let z = scalar(0.0, dtype)?;
    Ok(TermTensors {
        class: z.clone(),
        box_l1: z.clone(),
        box_giou: z.clone(),
        polygon: z.clone(),
        recognition: z,
    })
}

/// Checks that every component is finite.
pub fn ensure_finite(b: &LossBreakdown) -> Result<()> {
    match b.non_finite() {
        Some(name) => Err(Error::NonFiniteLoss(name)),
        None => Ok(()),
    }
}
