//! Late fusion of camera candidates with radar slice probabilities.
//!
//! Every candidate box is described by nine metrics: objectness `z`, vehicle
//! probability, center, size, area, and the mean and spread of the radar
//! occupancy probabilities under the box's columns. A boosted meta-classifier
//! maps those metrics to the probability that the box is a true positive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbm::Ensemble;
use crate::geometry::{iou_2d, nms, slices_overlapping_box, Box2D, ImageGrid, ScoredBox};
use crate::radarnet::{build_input_tensor, NetworkWeights, SliceProbs};
use crate::synth::Scene;

pub const N_METRICS: usize = 9;

pub const METRIC_NAMES: [&str; N_METRICS] = [
    "z",
    "p_vehicle",
    "cx",
    "cy",
    "w",
    "h",
    "area",
    "mu",
    "sigma",
];

/// `(z, p_vehicle, cx, cy, w, h, A, mu, sigma)`.
pub type FeatureVector = [f64; N_METRICS];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateBox {
    pub bbox: Box2D,
    pub z: f64,
    pub p_vehicle: f64,
}

impl CandidateBox {
    pub fn new(bbox: Box2D, z: f64, p_vehicle: f64) -> Result<Self> {
        let c = Self { bbox, z, p_vehicle };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !(0.0..=1.0).contains(&self.z) || !(0.0..=1.0).contains(&self.p_vehicle) {
            return Err(Error::Invalid(format!(
                "candidate scores must lie in [0, 1], got z={} p_vehicle={}",
                self.z, self.p_vehicle
            )));
        }
        Ok(())
    }

    /// Detector confidence `z * p_vehicle`.
    pub fn score(&self) -> f64 {
        self.z * self.p_vehicle
    }

    pub fn scored(&self) -> ScoredBox {
        ScoredBox {
            bbox: self.bbox,
            score: self.score(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Low candidate threshold on `z * p_vehicle`.
    pub t_f: f64,
    /// Decision threshold on the meta-classifier probability.
    pub t_fuse: f64,
    /// IoU above which a candidate is labelled a true positive.
    pub t_iou_label: f64,
    pub nms_iou: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            t_f: 0.05,
            t_fuse: 0.5,
            t_iou_label: 0.5,
            nms_iou: 0.45,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("t_f", self.t_f),
            ("t_fuse", self.t_fuse),
            ("t_iou_label", self.t_iou_label),
            ("nms_iou", self.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "fusion.{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Mean and population standard deviation of `y` over the slices under `b`;
/// `(0, 0)` when the box covers no slice.
pub fn radar_stats_over_box(b: &Box2D, y: &SliceProbs, grid: &ImageGrid) -> (f64, f64) {
    let slices = slices_overlapping_box(b, grid);
    if slices.is_empty() {
        return (0.0, 0.0);
    }
    let n = slices.len() as f64;
    // Shifted by the first value so that constant inputs give exact results.
    let y0 = y.get(slices[0]);
    let d_mean = slices.iter().map(|&s| y.get(s) - y0).sum::<f64>() / n;
    let d_sq = slices.iter().map(|&s| (y.get(s) - y0).powi(2)).sum::<f64>() / n;
    let var = (d_sq - d_mean * d_mean).max(0.0);
    ((y0 + d_mean).clamp(0.0, 1.0), var.sqrt().min(0.5))
}

pub fn build_features(c: &CandidateBox, y: &SliceProbs, grid: &ImageGrid) -> FeatureVector {
    let b = &c.bbox;
    let (mu, sigma) = radar_stats_over_box(b, y, grid);
    [c.z, c.p_vehicle, b.cx, b.cy, b.w, b.h, b.w * b.h, mu, sigma]
}

/// Per-box labels: true when the best IoU against any ground truth exceeds
/// `t_iou_label`. Several candidates may be positive for the same object.
pub fn label_candidates(cands: &[CandidateBox], gt: &[Box2D], t_iou_label: f64) -> Vec<bool> {
    cands
        .iter()
        .map(|c| gt.iter().map(|g| iou_2d(&c.bbox, g)).fold(0.0, f64::max) > t_iou_label)
        .collect()
}

/// Indices of candidates whose confidence reaches `t_f`.
pub fn prefilter(cands: &[CandidateBox], t_f: f64) -> Vec<usize> {
    (0..cands.len())
        .filter(|&i| cands[i].score() >= t_f)
        .collect()
}

/// Scores the candidates that pass the `t_f` pre-filter with the
/// meta-classifier, keeps those at or above `t_fuse`, then suppresses
/// overlaps. Output is by descending score.
pub fn fuse_scene(
    cands: &[CandidateBox],
    y: &SliceProbs,
    e: &Ensemble,
    cfg: &FusionConfig,
    grid: &ImageGrid,
) -> Result<Vec<ScoredBox>> {
    let mut kept = Vec::new();
    for c in prefilter(cands, cfg.t_f).into_iter().map(|i| &cands[i]) {
        let p = e.predict_proba(&build_features(c, y, grid))?;
        if p >= cfg.t_fuse {
            kept.push(ScoredBox {
                bbox: c.bbox,
                score: p,
            });
        }
    }
    Ok(nms(&kept, cfg.nms_iou))
}

/// Runs the radar network over every scene; order follows `scenes`.
pub fn radar_predictions(
    scenes: &[Scene],
    weights: &NetworkWeights,
    grid: &ImageGrid,
) -> Result<Vec<SliceProbs>> {
    let xs: Vec<_> = scenes
        .par_iter()
        .map(|s| build_input_tensor(&s.radar_frames, grid))
        .collect();
    weights.predict_many(&xs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub scene_id: u64,
    /// Index of the candidate in the scene's unfiltered candidate list.
    pub box_id: usize,
    pub features: FeatureVector,
    pub label: bool,
}

/// One row per candidate at or above `t_f`, ordered by scene then candidate.
pub fn build_training_set(
    scenes: &[Scene],
    radar: &[SliceProbs],
    cfg: &FusionConfig,
    grid: &ImageGrid,
) -> Result<Vec<LabeledExample>> {
    if scenes.len() != radar.len() {
        return Err(Error::shape("radar predictions", scenes.len(), radar.len()));
    }
    let mut rows = Vec::new();
    for (scene, y) in scenes.iter().zip(radar) {
        let labels = label_candidates(&scene.candidates, &scene.gt_boxes, cfg.t_iou_label);
        for i in prefilter(&scene.candidates, cfg.t_f) {
            rows.push(LabeledExample {
                scene_id: scene.id,
                box_id: i,
                features: build_features(&scene.candidates[i], y, grid),
                label: labels[i],
            });
        }
    }
    Ok(rows)
}

pub fn csv_header() -> String {
    let mut cols = vec!["scene_id", "box_id"];
    cols.extend(METRIC_NAMES);
    cols.push("label");
    cols.join(",")
}

pub fn csv_row(r: &LabeledExample) -> String {
    let mut out = format!("{},{}", r.scene_id, r.box_id);
    for v in r.features {
        out.push(',');
        out.push_str(&crate::store::fmt_f64(v));
    }
    out.push_str(if r.label { ",1" } else { ",0" });
    out
}

/// Parses a row written by [`csv_row`]; `line` is used only for messages.
pub fn parse_csv_row(text: &str, line: usize) -> std::result::Result<LabeledExample, String> {
    let fields: Vec<&str> = text.split(',').collect();
    if fields.len() != N_METRICS + 3 {
        return Err(format!(
            "expected {} columns, found {}",
            N_METRICS + 3,
            fields.len()
        ));
    }
    let scene_id = fields[0].parse().map_err(|e| format!("scene_id: {e}"))?;
    let box_id = fields[1].parse().map_err(|e| format!("box_id: {e}"))?;
    let mut features = [0.0; N_METRICS];
    for (k, f) in features.iter_mut().enumerate() {
        *f = fields[2 + k]
            .parse()
            .map_err(|e| format!("{}: {e}", METRIC_NAMES[k]))?;
    }
    let label = match fields[N_METRICS + 2] {
        "1" => true,
        "0" => false,
        other => return Err(format!("label must be 0 or 1 (line {line}), got {other:?}")),
    };
    Ok(LabeledExample {
        scene_id,
        box_id,
        features,
        label,
    })
}

/// Checks the nine-metric contract on one row.
pub fn check_metrics(f: &FeatureVector) -> Result<()> {
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("metrics must be finite".into()));
    }
    let (w, h, area, mu, sigma) = (f[4], f[5], f[6], f[7], f[8]);
    if (area - w * h).abs() > 1e-9 * area.abs().max(1.0) {
        return Err(Error::Validation(format!(
            "area {area} differs from w*h = {}",
            w * h
        )));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Validation(format!("mu {mu} outside [0, 1]")));
    }
    if !(0.0..=0.5).contains(&sigma) {
        return Err(Error::Validation(format!("sigma {sigma} outside [0, 0.5]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbm::TreeNode;
    use proptest::prelude::*;

    fn grid() -> ImageGrid {
        ImageGrid::default()
    }

    fn flat(p: f64) -> SliceProbs {
        SliceProbs::new(vec![p; 160]).unwrap()
    }

    fn cand(cx: f64, cy: f64, w: f64, h: f64, z: f64) -> CandidateBox {
        CandidateBox::new(Box2D::new(cx, cy, w, h).unwrap(), z, 0.9).unwrap()
    }

    #[test]
    fn constant_probabilities_have_zero_spread() {
        let b = Box2D::new(400.0, 450.0, 60.0, 40.0).unwrap();
        let (mu, sigma) = radar_stats_over_box(&b, &flat(0.7), &grid());
        assert!((mu - 0.7).abs() < 1e-15);
        assert_eq!(sigma, 0.0);
    }

    #[test]
    fn two_slice_stats() {
        let mut y = vec![0.5; 160];
        y[10] = 0.2; // slice 11 spans [100, 110)
        y[11] = 0.8;
        let y = SliceProbs::new(y).unwrap();
        let b = Box2D::from_corners(100.0, 0.0, 120.0, 10.0).unwrap();
        let (mu, sigma) = radar_stats_over_box(&b, &y, &grid());
        assert!((mu - 0.5).abs() < 1e-12);
        assert!((sigma - 0.3).abs() < 1e-12);
    }

    #[test]
    fn box_outside_image_has_zero_stats() {
        let b = Box2D::new(-100.0, 450.0, 50.0, 50.0).unwrap();
        assert_eq!(radar_stats_over_box(&b, &flat(0.9), &grid()), (0.0, 0.0));
    }

    #[test]
    fn area_is_computed() {
        let f = build_features(&cand(500.0, 400.0, 10.0, 20.0, 0.5), &flat(0.5), &grid());
        assert_eq!(f[6], 200.0);
        assert_eq!((f[7], f[8]), (0.5, 0.0));
        check_metrics(&f).unwrap();
    }

    #[test]
    fn golden_feature_vector() {
        let y: Vec<f64> = (0..160)
            .map(|s| 0.05 + 0.9 * ((s * 37 % 160) as f64 / 159.0))
            .collect();
        let y = SliceProbs::new(y).unwrap();
        let c =
            CandidateBox::new(Box2D::new(812.5, 470.25, 43.0, 31.5).unwrap(), 0.62, 0.87).unwrap();
        let f = build_features(&c, &y, &grid());
        // Slices 80..=84 hold y = 0.05 + 0.9 * (s*37 mod 160)/159 for s = 79..=83.
        let vals: Vec<f64> = (79..=83)
            .map(|s| 0.05 + 0.9 * ((s * 37 % 160) as f64 / 159.0))
            .collect();
        let mu = vals.iter().sum::<f64>() / 5.0;
        let sd = (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 5.0).sqrt();
        let expect = [0.62, 0.87, 812.5, 470.25, 43.0, 31.5, 1354.5, mu, sd];
        for (a, b) in f.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{f:?}");
        }
    }

    #[test]
    fn labels_use_strict_threshold() {
        let gt = Box2D::from_corners(0.0, 0.0, 10.0, 10.0).unwrap();
        let same = cand(5.0, 5.0, 10.0, 10.0, 0.5);
        // Shares 20/3 of 10 columns: IoU = (200/3) / (100 + 100 - 200/3) = 0.5.
        let half = CandidateBox::new(
            Box2D::from_corners(10.0 / 3.0, 0.0, 10.0 + 10.0 / 3.0, 10.0).unwrap(),
            0.5,
            0.5,
        )
        .unwrap();
        let iou = iou_2d(&half.bbox, &gt);
        assert!((iou - 0.5).abs() < 1e-12);
        let labels = label_candidates(&[same, half], &[gt], iou);
        assert_eq!(labels, vec![true, false]);
        assert_eq!(label_candidates(&[same], &[], 0.5), vec![false]);
    }

    fn constant_ensemble(p: f64) -> Ensemble {
        Ensemble::constant(N_METRICS, p)
    }

    #[test]
    fn no_filtering_reduces_to_nms() {
        let cands = vec![
            cand(100.0, 400.0, 50.0, 40.0, 0.9),
            cand(105.0, 400.0, 50.0, 40.0, 0.5),
            cand(700.0, 400.0, 30.0, 20.0, 0.2),
        ];
        let cfg = FusionConfig {
            t_fuse: 0.0,
            ..FusionConfig::default()
        };
        let out = fuse_scene(&cands, &flat(0.3), &constant_ensemble(1.0), &cfg, &grid()).unwrap();
        let plain: Vec<ScoredBox> = cands.iter().map(|c| c.scored()).collect();
        let expect: Vec<Box2D> = nms(&plain, cfg.nms_iou).iter().map(|b| b.bbox).collect();
        let mut got: Vec<Box2D> = out.iter().map(|b| b.bbox).collect();
        let mut expect_sorted = expect.clone();
        // Equal fused scores keep input order, as does NMS on the raw scores here.
        got.sort_by(|a, b| a.cx.total_cmp(&b.cx));
        expect_sorted.sort_by(|a, b| a.cx.total_cmp(&b.cx));
        assert_eq!(got, expect_sorted);
        let cfg1 = FusionConfig { t_fuse: 1.0, ..cfg };
        assert!(
            fuse_scene(&cands, &flat(0.3), &constant_ensemble(0.99), &cfg1, &grid())
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn radar_support_rescues_low_score_candidate() {
        // A far, low-confidence box under strongly occupied slices survives
        // while the camera's own score would have dropped it.
        let far = cand(1200.0, 460.0, 15.0, 12.0, 0.15);
        let mut y = vec![0.02; 160];
        for v in &mut y[118..122] {
            *v = 0.95;
        }
        let y = SliceProbs::new(y).unwrap();
        let e = Ensemble {
            n_features: N_METRICS,
            base_score: -3.0,
            shrinkage: 1.0,
            trees: vec![TreeNode::Split {
                feature: 7,
                threshold: 0.5,
                left: Box::new(TreeNode::Leaf { value: 0.0 }),
                right: Box::new(TreeNode::Leaf { value: 6.0 }),
            }],
        };
        assert!(far.score() < 0.3);
        let out = fuse_scene(&[far], &y, &e, &FusionConfig::default(), &grid()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, far.bbox);
        let quiet = fuse_scene(&[far], &flat(0.02), &e, &FusionConfig::default(), &grid()).unwrap();
        assert!(quiet.is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let r = LabeledExample {
            scene_id: 3,
            box_id: 7,
            features: [0.1, 0.2, 1.0 / 3.0, 4.0, 5.0, 6.0, 30.0, 0.25, 0.125],
            label: true,
        };
        assert_eq!(csv_header().split(',').count(), 12);
        assert_eq!(parse_csv_row(&csv_row(&r), 2).unwrap(), r);
        assert!(parse_csv_row("1,2,3", 2).is_err());
    }

    #[test]
    fn empty_scene_list_gives_empty_set() {
        assert!(
            build_training_set(&[], &[], &FusionConfig::default(), &grid())
                .unwrap()
                .is_empty()
        );
    }

    fn arb_cand() -> impl Strategy<Value = CandidateBox> {
        (
            -100.0..1700.0f64,
            300.0..600.0f64,
            1.0..300.0f64,
            1.0..200.0f64,
            0.0..=1.0f64,
            0.0..=1.0f64,
        )
            .prop_map(|(cx, cy, w, h, z, p)| {
                CandidateBox::new(Box2D::new(cx, cy, w, h).unwrap(), z, p).unwrap()
            })
    }

    proptest! {
        #[test]
        fn metrics_stay_in_bounds(
            c in arb_cand(),
            y in proptest::collection::vec(1e-9..1.0f64, 160),
        ) {
            let f = build_features(&c, &SliceProbs::new(y).unwrap(), &grid());
            prop_assert_eq!(f.len(), N_METRICS);
            prop_assert!(check_metrics(&f).is_ok());
        }

        #[test]
        fn raising_iou_threshold_never_adds_positives(
            cands in proptest::collection::vec(arb_cand(), 1..8),
            gts in proptest::collection::vec(arb_cand(), 0..4),
            t1 in 0.0..1.0f64,
            dt in 0.0..0.5f64,
        ) {
            let gt: Vec<Box2D> = gts.iter().map(|c| c.bbox).collect();
            let lo = label_candidates(&cands, &gt, t1);
            let hi = label_candidates(&cands, &gt, t1 + dt);
            for (a, b) in lo.iter().zip(&hi) {
                prop_assert!(*a || !*b);
            }
        }

        #[test]
        fn fusion_output_is_filtered_subset(
            cands in proptest::collection::vec(arb_cand(), 0..10),
            y in proptest::collection::vec(0.01..0.99f64, 160),
            t_lo in 0.0..1.0f64,
            dt in 0.0..0.5f64,
        ) {
            let y = SliceProbs::new(y).unwrap();
            let e = Ensemble {
                n_features: N_METRICS,
                base_score: -1.0,
                shrinkage: 1.0,
                trees: vec![TreeNode::Split {
                    feature: 7,
                    threshold: 0.5,
                    left: Box::new(TreeNode::Leaf { value: -0.5 }),
                    right: Box::new(TreeNode::Leaf { value: 2.0 }),
                }],
            };
            let lo = fuse_scene(&cands, &y, &e, &FusionConfig { t_fuse: t_lo, ..FusionConfig::default() }, &grid()).unwrap();
            let hi = fuse_scene(&cands, &y, &e, &FusionConfig { t_fuse: (t_lo + dt).min(1.0), ..FusionConfig::default() }, &grid()).unwrap();
            for d in &lo {
                prop_assert!(cands.iter().any(|c| c.bbox == d.bbox));
            }
            prop_assert!(hi.len() <= lo.len());
            for w in lo.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }

        #[test]
        fn constant_ensemble_is_threshold_then_nms(
            cands in proptest::collection::vec(arb_cand(), 0..10),
        ) {
            let y = flat(0.4);
            let cfg = FusionConfig { t_fuse: 0.3, ..FusionConfig::default() };
            let out = fuse_scene(&cands, &y, &constant_ensemble(0.6), &cfg, &grid()).unwrap();
            let all: Vec<ScoredBox> = prefilter(&cands, cfg.t_f)
                .into_iter()
                .map(|i| ScoredBox { bbox: cands[i].bbox, score: 0.6 })
                .collect();
            let expect = nms(&all, cfg.nms_iou);
            prop_assert_eq!(out.len(), expect.len());
            for (a, b) in out.iter().zip(&expect) {
                prop_assert_eq!(a.bbox, b.bbox);
            }
            let none = fuse_scene(&cands, &y, &constant_ensemble(0.2), &cfg, &grid()).unwrap();
            prop_assert!(none.is_empty());
        }
    }
}
