//! Detection and end-to-end spotting metrics.
//!
//! Predictions are matched to ground truth one to one, greedily in order of
//! decreasing score (then decreasing best IoU, then input order). Each
//! prediction takes the unmatched ground truth it overlaps most, provided the
//! polygon IoU reaches the threshold. A prediction that lands on an ignored
//! ground truth is dropped from both counts.

mod io;
mod text;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationInstance, TextInstance};
use crate::error::{Error, Result};
use crate::geometry::{polygon_iou, Point, POLYGON_POINTS};
use crate::model::Detection;

pub use io::{read_predictions, write_predictions, ImagePredictions};
pub use text::{edit_distance, normalize, normalized_distance, Lexicon};

/// A predicted instance in the on-disk prediction format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// 16 points as `[x0, y0, x1, y1, ...]`, normalized to the image.
    pub polygon: Vec<f64>,
    pub score: f64,
    pub transcript: String,
}

impl From<Detection> for Prediction {
    fn from(d: Detection) -> Self {
        Self {
            polygon: d.polygon.to_flat(),
            score: d.score,
            transcript: d.transcript,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub polygon: Vec<f64>,
    pub transcript: String,
    #[serde(default)]
    pub ignore: bool,
}

impl GroundTruth {
    pub fn from_instances(instances: &[TextInstance]) -> Vec<Self> {
        instances
            .iter()
            .map(|i| Self {
                polygon: i.polygon.to_flat(),
                transcript: i.transcript.clone(),
                ignore: false,
            })
            .collect()
    }

    pub fn from_annotations(instances: &[AnnotationInstance]) -> Vec<Self> {
        instances
            .iter()
            .map(|a| Self {
                polygon: a.polygon.clone(),
                transcript: a.transcript.clone(),
                ignore: a.ignore,
            })
            .collect()
    }
}

/// Precision, recall and their harmonic mean, with the counts behind them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prh {
    pub precision: f64,
    pub recall: f64,
    pub hmean: f64,
    pub true_positives: usize,
    pub predictions: usize,
    pub ground_truths: usize,
}

impl Prh {
    /// Ratios with an empty denominator are 0.
    pub fn from_counts(tp: usize, predictions: usize, ground_truths: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, predictions);
        let recall = ratio(tp, ground_truths);
        let hmean = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            hmean,
            true_positives: tp,
            predictions,
            ground_truths,
        }
    }
}

/// Matching outcome for one image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageMatches {
    /// `(prediction, ground_truth, iou)` for counted matches.
    pub pairs: Vec<(usize, usize, f64)>,
    /// Predictions that landed on ignored ground truths.
    pub discarded: Vec<usize>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_ground_truths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detection: Prh,
    /// End-to-end without a lexicon.
    pub e2e: Prh,
    /// End-to-end after lexicon correction, when a lexicon was given.
    pub e2e_lexicon: Option<Prh>,
    pub one_minus_ned: f64,
    pub iou_threshold: f64,
    pub images: Vec<ImageMatches>,
}

fn points(flat: &[f64]) -> Result<Vec<Point>> {
    if flat.len() != 2 * POLYGON_POINTS {
        return Err(Error::PointCount {
            expected: POLYGON_POINTS,
            got: flat.len() / 2,
        });
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("polygon coordinate"));
    }
    Ok(flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

/// Greedy one-to-one matching of one image.
pub fn match_image(preds: &[Prediction], gts: &[GroundTruth], iou_threshold: f64) -> Result<ImageMatches> {
    let pp = preds.iter().map(|p| points(&p.polygon)).collect::<Result<Vec<_>>>()?;
    let gp = gts.iter().map(|g| points(&g.polygon)).collect::<Result<Vec<_>>>()?;
    let ious: Vec<Vec<f64>> = pp.iter().map(|p| gp.iter().map(|g| polygon_iou(p, g)).collect()).collect();
    let best = |i: usize| ious[i].iter().copied().fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .total_cmp(&preds[a].score)
            .then(best(b).total_cmp(&best(a)))
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut m = ImageMatches::default();
    for i in order {
        let mut pick: Option<usize> = None;
        for j in 0..gts.len() {
            if taken[j] || ious[i][j] < iou_threshold {
                continue;
            }
            if pick.is_none_or(|k| ious[i][j] > ious[i][k]) {
                pick = Some(j);
            }
        }
        match pick {
            Some(j) => {
                taken[j] = true;
                if gts[j].ignore {
                    m.discarded.push(i);
                } else {
                    m.pairs.push((i, j, ious[i][j]));
                }
            }
            None => m.unmatched_predictions.push(i),
        }
    }
    m.unmatched_predictions.sort_unstable();
    m.unmatched_ground_truths = (0..gts.len()).filter(|&j| !taken[j] && !gts[j].ignore).collect();
    Ok(m)
}

fn check_lengths(preds: &[Vec<Prediction>], gts: &[Vec<GroundTruth>]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Dataset(format!(
            "{} prediction records for {} images",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

fn counts(m: &ImageMatches, gts: &[GroundTruth]) -> (usize, usize) {
    let n_pred = m.pairs.len() + m.unmatched_predictions.len();
    let n_gt = gts.iter().filter(|g| !g.ignore).count();
    (n_pred, n_gt)
}

fn e2e_from_matches(
    matches: &[ImageMatches],
    preds: &[Vec<Prediction>],
    gts: &[Vec<GroundTruth>],
    lexicon: Option<&Lexicon>,
) -> Prh {
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for ((m, p), g) in matches.iter().zip(preds).zip(gts) {
        let (a, b) = counts(m, g);
        np += a;
        ng += b;
        for &(i, j, _) in &m.pairs {
            let text = match lexicon {
                Some(l) => l.correct(&p[i].transcript),
                None => normalize(&p[i].transcript),
            };
            if text == normalize(&g[j].transcript) {
                tp += 1;
            }
        }
    }
    Prh::from_counts(tp, np, ng)
}

pub fn detection_prh(preds: &[Vec<Prediction>], gts: &[Vec<GroundTruth>], iou_threshold: f64) -> Result<Prh> {
    check_lengths(preds, gts)?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in preds.iter().zip(gts) {
        let m = match_image(p, g, iou_threshold)?;
        let (a, b) = counts(&m, g);
        tp += m.pairs.len();
        np += a;
        ng += b;
    }
    Ok(Prh::from_counts(tp, np, ng))
}

/// A detection match counts only when the transcripts agree after
/// normalization (and lexicon correction of the prediction, if given).
pub fn e2e_prh(
    preds: &[Vec<Prediction>],
    gts: &[Vec<GroundTruth>],
    lexicon: Option<&Lexicon>,
    iou_threshold: f64,
) -> Result<Prh> {
    check_lengths(preds, gts)?;
    let matches = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match_image(p, g, iou_threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(e2e_from_matches(&matches, preds, gts, lexicon))
}

fn ned_from_matches(matches: &[ImageMatches], preds: &[Vec<Prediction>], gts: &[Vec<GroundTruth>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((m, p), g) in matches.iter().zip(preds).zip(gts) {
        for &(i, j, _) in &m.pairs {
            sum += normalized_distance(&normalize(&p[i].transcript), &normalize(&g[j].transcript));
            n += 1;
        }
        let unmatched = m.unmatched_predictions.len() + m.unmatched_ground_truths.len();
        sum += unmatched as f64;
        n += unmatched;
    }
    if n == 0 {
        1.0
    } else {
        1.0 - sum / n as f64
    }
}

/// One minus the mean normalized edit distance over matched pairs, where
/// every unmatched prediction or ground truth counts as distance 1.
pub fn one_minus_ned(preds: &[Vec<Prediction>], gts: &[Vec<GroundTruth>], iou_threshold: f64) -> Result<f64> {
    check_lengths(preds, gts)?;
    let matches = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match_image(p, g, iou_threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(ned_from_matches(&matches, preds, gts))
}

/// Every metric over a dataset, one entry per image in `preds` and `gts`.
pub fn evaluate(
    preds: &[Vec<Prediction>],
    gts: &[Vec<GroundTruth>],
    lexicon: Option<&Lexicon>,
    iou_threshold: f64,
) -> Result<EvalReport> {
    check_lengths(preds, gts)?;
    let images = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match_image(p, g, iou_threshold))
        .collect::<Result<Vec<_>>>()?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (m, g) in images.iter().zip(gts) {
        let (a, b) = counts(m, g);
        tp += m.pairs.len();
        np += a;
        ng += b;
    }
    Ok(EvalReport {
        detection: Prh::from_counts(tp, np, ng),
        e2e: e2e_from_matches(&images, preds, gts, None),
        e2e_lexicon: lexicon.map(|l| e2e_from_matches(&images, preds, gts, Some(l))),
        one_minus_ned: ned_from_matches(&images, preds, gts),
        iou_threshold,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Axis-aligned rectangle as a 16-point ring in the top/bottom order.
    pub(crate) fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for k in 0..8 {
            out.extend([x0 + (x1 - x0) * k as f64 / 7.0, y0]);
        }
        for k in 0..8 {
            out.extend([x1 - (x1 - x0) * k as f64 / 7.0, y1]);
        }
        out
    }

    fn gt(p: Vec<f64>, t: &str) -> GroundTruth {
        GroundTruth {
            polygon: p,
            transcript: t.into(),
            ignore: false,
        }
    }

    fn pred(p: Vec<f64>, s: f64, t: &str) -> Prediction {
        Prediction {
            polygon: p,
            score: s,
            transcript: t.into(),
        }
    }

    fn fixture() -> Vec<GroundTruth> {
        vec![gt(rect(0.1, 0.1, 0.4, 0.2), "hello"), gt(rect(0.5, 0.5, 0.9, 0.6), "world")]
    }

    #[test]
    fn identical_predictions_score_one() {
        let g = fixture();
        let p: Vec<Prediction> = g.iter().map(|g| pred(g.polygon.clone(), 0.9, &g.transcript)).collect();
        let r = evaluate(&[p], &[g], None, 0.5).unwrap();
        assert_eq!((r.detection.precision, r.detection.recall, r.detection.hmean), (1.0, 1.0, 1.0));
        assert_eq!(r.e2e.hmean, 1.0);
        assert_eq!(r.one_minus_ned, 1.0);
    }

    #[test]
    fn no_predictions() {
        let r = evaluate(&[vec![]], &[vec![gt(rect(0.1, 0.1, 0.4, 0.2), "abc")]], None, 0.5).unwrap();
        assert_eq!((r.detection.precision, r.detection.recall, r.detection.hmean), (0.0, 0.0, 0.0));
        assert_eq!(r.one_minus_ned, 0.0);
    }

    #[test]
    fn two_of_three_predictions_match() {
        let g = fixture();
        let mut p: Vec<Prediction> = g.iter().map(|g| pred(g.polygon.clone(), 0.9, &g.transcript)).collect();
        p.push(pred(rect(0.0, 0.8, 0.2, 0.9), 0.8, "extra"));
        let d = detection_prh(&[p], &[g], 0.5).unwrap();
        assert_eq!(d.precision, 2.0 / 3.0);
        assert_eq!(d.recall, 1.0);
        assert_eq!(d.hmean, 0.8);
    }

    #[test]
    fn lexicon_rescues_a_near_miss() {
        let g = vec![gt(rect(0.1, 0.1, 0.4, 0.2), "hello")];
        let p = vec![pred(rect(0.1, 0.1, 0.4, 0.2), 0.9, "hel1o")];
        let lex = Lexicon::new(["hello"]).unwrap();
        let with = e2e_prh(&[p.clone()], &[g.clone()], Some(&lex), 0.5).unwrap();
        assert_eq!(with.hmean, 1.0);
        let without = e2e_prh(&[p], &[g], None, 0.5).unwrap();
        assert_eq!(without.hmean, 0.0);
    }

    #[test]
    fn ned_examples() {
        let g = vec![gt(rect(0.1, 0.1, 0.4, 0.2), "abc")];
        let p = vec![pred(rect(0.1, 0.1, 0.4, 0.2), 0.9, "abd")];
        assert_eq!(one_minus_ned(&[p], &[g], 0.5).unwrap(), 1.0 - 1.0 / 3.0);
        assert_eq!(one_minus_ned(&[vec![]], &[vec![]], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn ignored_ground_truth_drops_its_prediction() {
        let mut g = fixture();
        g[1].ignore = true;
        let p: Vec<Prediction> = g.iter().map(|g| pred(g.polygon.clone(), 0.9, &g.transcript)).collect();
        let r = evaluate(&[p], &[g], None, 0.5).unwrap();
        assert_eq!(r.detection.predictions, 1);
        assert_eq!(r.detection.ground_truths, 1);
        assert_eq!(r.detection.hmean, 1.0);
        assert_eq!(r.images[0].discarded, vec![1]);
    }

    #[test]
    fn equal_scores_prefer_the_better_overlap() {
        let g = vec![gt(rect(0.1, 0.1, 0.5, 0.3), "a")];
        let loose = pred(rect(0.1, 0.1, 0.45, 0.3), 0.5, "a");
        let tight = pred(rect(0.1, 0.1, 0.5, 0.3), 0.5, "a");
        let a = match_image(&[loose.clone(), tight.clone()], &g, 0.5).unwrap();
        let b = match_image(&[tight, loose], &g, 0.5).unwrap();
        assert_eq!((a.pairs[0].0, a.pairs[0].1), (1, 0));
        assert_eq!((b.pairs[0].0, b.pairs[0].1), (0, 0));
        assert!(a.pairs.len() == 1 && (a.pairs[0].2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_polygon_is_rejected() {
        let p = vec![pred(vec![0.0; 10], 0.9, "x")];
        assert!(detection_prh(&[p], &[vec![]], 0.5).is_err());
        assert!(detection_prh(&[vec![]], &[], 0.5).is_err());
    }

    fn arb_image() -> impl Strategy<Value = (Vec<Prediction>, Vec<GroundTruth>)> {
        let word = prop::sample::select(vec!["ab", "ba", "abc", ""]);
        let boxes = prop::collection::vec((0.0f64..0.8, 0.0f64..0.8, 0.05f64..0.2, word.clone(), 0u8..4), 0..5);
        let gts = prop::collection::vec((0.0f64..0.8, 0.0f64..0.8, 0.05f64..0.2, word), 0..5);
        (boxes, gts).prop_map(|(p, g)| {
            let p = p
                .into_iter()
                .map(|(x, y, s, w, sc)| pred(rect(x, y, x + s, y + s), sc as f64 / 4.0, w))
                .collect();
            let g = g.into_iter().map(|(x, y, s, w)| gt(rect(x, y, x + s, y + s), w)).collect();
            (p, g)
        })
    }

    proptest! {
        #[test]
        fn metric_invariants((p, g) in arb_image()) {
            let r = evaluate(&[p.clone()], &[g.clone()], None, 0.5).unwrap();
            prop_assert!(r.e2e.hmean <= r.detection.hmean);
            for v in [r.detection.precision, r.detection.recall, r.detection.hmean, r.one_minus_ned] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            // Recomputing is bit-identical.
            prop_assert_eq!(&r, &evaluate(&[p], &[g], None, 0.5).unwrap());
        }
    }
}
