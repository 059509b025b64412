//! Detection scoring: one-to-one matching, average precision, accuracy,
//! distance-binned recall, image heatmaps and the FP comparison at a
//! matched true-positive level.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_2d, nms, Box2D, ImageGrid, ScoredBox};

/// Number of image column bins used by the heatmaps.
pub const N_COLUMN_BINS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpMatch {
    pub det: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub tp: Vec<TpMatch>,
    pub fp: Vec<usize>,
    /// Ground-truth indices left unmatched.
    pub fn_gt: Vec<usize>,
}

impl MatchResult {
    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp.len(),
            fp: self.fp.len(),
            fn_: self.fn_gt.len(),
        }
    }

    pub fn matched_gt(&self, n_gt: usize) -> Vec<bool> {
        let mut m = vec![false; n_gt];
        for t in &self.tp {
            m[t.gt] = true;
        }
        m
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Descending score, lower index first among equals.
fn score_order(dets: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score));
    order
}

/// Greedy one-to-one matching: detections in descending score order each take
/// the still-unmatched ground truth with the highest IoU, if it reaches `t`.
pub fn match_detections(dets: &[ScoredBox], gt: &[Box2D], t: f64) -> MatchResult {
    let mut taken = vec![false; gt.len()];
    let mut out = MatchResult::default();
    for d in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, b) in gt.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = iou_2d(&dets[d].bbox, b);
            if best.map_or(true, |(_, v)| iou > v) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) if iou >= t => {
                taken[g] = true;
                out.tp.push(TpMatch { det: d, gt: g, iou });
            }
            _ => out.fp.push(d),
        }
    }
    out.fn_gt = (0..gt.len()).filter(|&g| !taken[g]).collect();
    out
}

/// Detections ranked across all scenes with their TP flags.
pub fn ranked_hits(
    dets: &[Vec<ScoredBox>],
    gts: &[Vec<Box2D>],
    t: f64,
) -> Result<Vec<(f64, bool)>> {
    if dets.len() != gts.len() {
        return Err(Error::shape("detections per scene", gts.len(), dets.len()));
    }
    let mut all: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (s, (d, g)) in dets.iter().zip(gts).enumerate() {
        let m = match_detections(d, g, t);
        let mut is_tp = vec![false; d.len()];
        for tp in &m.tp {
            is_tp[tp.det] = true;
        }
        // Rank within a scene follows the matching order.
        for (rank, &i) in score_order(d).iter().enumerate() {
            all.push((d[i].score, s, rank, is_tp[i]));
        }
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(all
        .into_iter()
        .map(|(score, _, _, hit)| (score, hit))
        .collect())
}

/// Area under the precision envelope over recall for ranked hit flags.
pub fn ap_from_ranked(hits: &[bool], n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::Invalid(
            "average precision is undefined without ground truth".into(),
        ));
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut envelope = 0.0f64;
    let mut ap = 0.0;
    // Walk backwards so each point sees the best precision at or beyond it.
    for k in (0..points.len()).rev() {
        envelope = envelope.max(points[k].1);
        let r_before = if k == 0 { 0.0 } else { points[k - 1].0 };
        ap += (points[k].0 - r_before) * envelope;
    }
    Ok(ap)
}

/// Single-class AP with one global ranking over all scenes.
pub fn average_precision(dets: &[Vec<ScoredBox>], gts: &[Vec<Box2D>], t: f64) -> Result<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let hits: Vec<bool> = ranked_hits(dets, gts, t)?
        .into_iter()
        .map(|(_, h)| h)
        .collect();
    ap_from_ranked(&hits, n_gt)
}

/// `TP / (TP + FP + FN)`.
pub fn detection_accuracy(c: &Counts) -> Result<f64> {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        return Err(Error::Invalid(
            "accuracy is undefined with no detections and no ground truth".into(),
        ));
    }
    Ok(c.tp as f64 / denom as f64)
}

/// Ground truth of one scene with each object's range.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub boxes: Vec<Box2D>,
    pub ranges: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceBins {
    pub bin_width_m: f64,
    pub n_bins: usize,
}

impl Default for DistanceBins {
    fn default() -> Self {
        Self {
            bin_width_m: 10.0,
            n_bins: 10,
        }
    }
}

impl DistanceBins {
    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width_m > 0.0) || self.n_bins == 0 {
            return Err(Error::Config(
                "distance bins need positive width and count".into(),
            ));
        }
        Ok(())
    }

    pub fn bin(&self, range_m: f64) -> Option<usize> {
        if !(range_m >= 0.0) {
            return None;
        }
        let b = (range_m / self.bin_width_m).floor() as usize;
        (b < self.n_bins).then_some(b)
    }

    pub fn edges(&self, b: usize) -> (f64, f64) {
        (
            b as f64 * self.bin_width_m,
            (b + 1) as f64 * self.bin_width_m,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BinRow {
    pub gt: usize,
    /// Ground truths matched one-to-one.
    pub tp_matched: usize,
    /// Ground truths reached by any detection at IoU >= t, matched or not.
    pub tp_perbox: usize,
}

pub fn distance_binned_recall(
    dets: &[Vec<ScoredBox>],
    truth: &[Truth],
    t: f64,
    bins: &DistanceBins,
) -> Result<Vec<BinRow>> {
    if dets.len() != truth.len() {
        return Err(Error::shape(
            "detections per scene",
            truth.len(),
            dets.len(),
        ));
    }
    let mut rows = vec![BinRow::default(); bins.n_bins];
    for (d, tr) in dets.iter().zip(truth) {
        let matched = match_detections(d, &tr.boxes, t).matched_gt(tr.boxes.len());
        for (g, (b, &r)) in tr.boxes.iter().zip(&tr.ranges).enumerate() {
            let Some(k) = bins.bin(r) else { continue };
            rows[k].gt += 1;
            rows[k].tp_matched += matched[g] as usize;
            rows[k].tp_perbox += d.iter().any(|x| iou_2d(&x.bbox, b) >= t) as usize;
        }
    }
    Ok(rows)
}

/// Distance bins by column bins, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub n_rows: usize,
    pub values: Vec<Option<f64>>,
}

impl Heatmap {
    fn zeros(n_rows: usize) -> Self {
        Self {
            n_rows,
            values: vec![Some(0.0); n_rows * N_COLUMN_BINS],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * N_COLUMN_BINS + col]
    }

    fn add(&mut self, row: usize, col: usize, v: f64) {
        let cell = &mut self.values[row * N_COLUMN_BINS + col];
        *cell = Some(cell.unwrap_or(0.0) + v);
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().flatten().sum()
    }
}

/// Cell of a box center: distance bin by range, column bin by `cx`.
fn cell(b: &Box2D, range_m: f64, grid: &ImageGrid, bins: &DistanceBins) -> Option<(usize, usize)> {
    let row = bins.bin(range_m)?;
    let width = grid.width_px as f64 / N_COLUMN_BINS as f64;
    if !(0.0..grid.width_px as f64).contains(&b.cx) {
        return None;
    }
    Some((row, ((b.cx / width) as usize).min(N_COLUMN_BINS - 1)))
}

pub fn gt_heatmap(truth: &[Truth], grid: &ImageGrid, bins: &DistanceBins) -> Heatmap {
    let mut m = Heatmap::zeros(bins.n_bins);
    for tr in truth {
        for (b, &r) in tr.boxes.iter().zip(&tr.ranges) {
            if let Some((i, j)) = cell(b, r, grid, bins) {
                m.add(i, j, 1.0);
            }
        }
    }
    m
}

/// Count of one-to-one matched ground truths per cell.
pub fn detected_heatmap(
    dets: &[Vec<ScoredBox>],
    truth: &[Truth],
    t: f64,
    grid: &ImageGrid,
    bins: &DistanceBins,
) -> Heatmap {
    let mut m = Heatmap::zeros(bins.n_bins);
    for (d, tr) in dets.iter().zip(truth) {
        let matched = match_detections(d, &tr.boxes, t).matched_gt(tr.boxes.len());
        for (g, (b, &r)) in tr.boxes.iter().zip(&tr.ranges).enumerate() {
            if matched[g] {
                if let Some((i, j)) = cell(b, r, grid, bins) {
                    m.add(i, j, 1.0);
                }
            }
        }
    }
    m
}

/// Detected / GT per cell; cells without ground truth are `None`.
pub fn recall_heatmap(detected: &Heatmap, gt: &Heatmap) -> Heatmap {
    let values = detected
        .values
        .iter()
        .zip(&gt.values)
        .map(|(d, g)| match (d, g) {
            (Some(d), Some(g)) if *g > 0.0 => Some(d / g),
            _ => None,
        })
        .collect();
    Heatmap {
        n_rows: gt.n_rows,
        values,
    }
}

pub fn difference_heatmap(a: &Heatmap, b: &Heatmap) -> Heatmap {
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| Some(x.unwrap_or(0.0) - y.unwrap_or(0.0)))
        .collect();
    Heatmap {
        n_rows: a.n_rows,
        values,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpRow {
    pub detector: String,
    pub threshold: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub note: String,
}

/// Camera detections at confidence threshold `threshold`: filter, then NMS.
pub fn camera_at_threshold(
    cands: &[Vec<ScoredBox>],
    threshold: f64,
    nms_iou: f64,
) -> Vec<Vec<ScoredBox>> {
    cands
        .iter()
        .map(|c| {
            let kept: Vec<ScoredBox> = c.iter().copied().filter(|b| b.score >= threshold).collect();
            nms(&kept, nms_iou)
        })
        .collect()
}

fn total_counts(dets: &[Vec<ScoredBox>], truth: &[Truth], t: f64) -> Counts {
    let mut c = Counts::default();
    for (d, tr) in dets.iter().zip(truth) {
        c += match_detections(d, &tr.boxes, t).counts();
    }
    c
}

/// Compares FP counts at a common TP level. The camera threshold is lowered
/// from `default_threshold` to the highest candidate score at which camera
/// TP reaches the fused TP count, found by bisection over the distinct scores.
pub fn fp_at_matched_tp(
    camera_cands: &[Vec<ScoredBox>],
    fused: &[Vec<ScoredBox>],
    truth: &[Truth],
    t: f64,
    nms_iou: f64,
    default_threshold: f64,
) -> Result<Vec<FpRow>> {
    if camera_cands.len() != truth.len() || fused.len() != truth.len() {
        return Err(Error::shape(
            "scenes",
            truth.len(),
            camera_cands.len().min(fused.len()),
        ));
    }
    let fused_c = total_counts(fused, truth, t);
    let camera_tp =
        |th: f64| total_counts(&camera_at_threshold(camera_cands, th, nms_iou), truth, t);
    let default_c = camera_tp(default_threshold);
    let row = |detector: &str, threshold: Option<f64>, c: Counts, note: &str| FpRow {
        detector: detector.to_string(),
        threshold,
        tp: c.tp,
        fp: c.fp,
        note: note.to_string(),
    };
    let mut rows = vec![row(
        "camera_default",
        Some(default_threshold),
        default_c,
        "",
    )];

    let matched = if default_c.tp >= fused_c.tp {
        row(
            "camera_matched",
            Some(default_threshold),
            default_c,
            "default already matches",
        )
    } else {
        let mut scores: Vec<f64> = camera_cands
            .iter()
            .flatten()
            .map(|b| b.score)
            .filter(|&s| s < default_threshold)
            .collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        scores.dedup();
        match scores.last().map(|&s| camera_tp(s)) {
            Some(c) if c.tp >= fused_c.tp => {
                // Camera TP grows as the threshold falls; find the first
                // (highest) score that reaches the target.
                let (mut lo, mut hi) = (0, scores.len() - 1);
                while lo < hi {
                    let mid = lo + (hi - lo) / 2;
                    if camera_tp(scores[mid]).tp >= fused_c.tp {
                        hi = mid;
                    } else {
                        lo = mid + 1;
                    }
                }
                row(
                    "camera_matched",
                    Some(scores[hi]),
                    camera_tp(scores[hi]),
                    "",
                )
            }
            Some(c) => row(
                "camera_matched",
                scores.last().copied(),
                c,
                "unmatchable: camera TP stays below fused TP",
            ),
            None => row(
                "camera_matched",
                Some(default_threshold),
                default_c,
                "unmatchable: no lower camera scores",
            ),
        }
    };
    rows.push(matched);
    rows.push(row("fused", None, fused_c, ""));
    Ok(rows)
}
