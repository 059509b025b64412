//! Image-plane geometry shared by every stage: slices, boxes, IoU, NMS.
//!
//! Slices are 1-indexed, half-open column spans `[(s-1)*W/N, s*W/N)`. A box
//! occupies a slice only when the overlap has strictly positive length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGrid {
    pub width_px: usize,
    pub height_px: usize,
    pub n_slices: usize,
}

impl Default for ImageGrid {
    fn default() -> Self {
        Self {
            width_px: 1600,
            height_px: 900,
            n_slices: 160,
        }
    }
}

impl ImageGrid {
    pub fn new(width_px: usize, height_px: usize, n_slices: usize) -> Result<Self> {
        let g = Self {
            width_px,
            height_px,
            n_slices,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slices == 0 || self.width_px == 0 || self.height_px == 0 {
            return Err(Error::Config(
                "image grid dimensions must be positive".into(),
            ));
        }
        if self.width_px % self.n_slices != 0 {
            return Err(Error::Config(format!(
                "width_px {} is not divisible by n_slices {}",
                self.width_px, self.n_slices
            )));
        }
        Ok(())
    }

    pub fn slice_width(&self) -> f64 {
        (self.width_px / self.n_slices) as f64
    }

    /// Column span of 1-based slice `s`.
    pub fn slice_span(&self, s: usize) -> Interval1D {
        let sw = self.slice_width();
        Interval1D {
            lo: (s - 1) as f64 * sw,
            hi: s as f64 * sw,
        }
    }

    /// 1-based slice containing a column, or `None` outside the image.
    pub fn slice_of_column(&self, column: f64) -> Option<usize> {
        if !(0.0..self.width_px as f64).contains(&column) {
            return None;
        }
        let s = (column / self.slice_width()).floor() as usize + 1;
        Some(s.min(self.n_slices))
    }
}

/// Axis-aligned box given by center and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Box2D {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Invalid(format!(
                "box must have finite center and positive size, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn column_span(&self) -> Interval1D {
        Interval1D {
            lo: self.x0(),
            hi: self.x1(),
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval1D {
    pub lo: f64,
    pub hi: f64,
}

impl Interval1D {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) {
            return Err(Error::Invalid(format!("interval lo {lo} > hi {hi}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 0.0
    }

    pub fn clamp_to(&self, lo: f64, hi: f64) -> Self {
        Self {
            lo: self.lo.max(lo),
            hi: self.hi.min(hi),
        }
    }

    fn overlap(&self, other: &Self) -> f64 {
        (self.hi.min(other.hi) - self.lo.max(other.lo)).max(0.0)
    }
}

/// Idealized pinhole camera looking along the range axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub focal_px: f64,
    pub cam_height: f64,
    pub horizon_row: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            focal_px: 800.0,
            cam_height: 0.5,
            horizon_row: 450.0,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px > 0.0) {
            return Err(Error::Config("camera focal_px must be positive".into()));
        }
        Ok(())
    }

    /// Image row of a point `height_m` above the ground plane at `range_m`.
    pub fn row_at_height(&self, height_m: f64, range_m: f64) -> f64 {
        self.horizon_row + self.focal_px * (self.cam_height - height_m) / range_m
    }
}

/// Projects a ground-plane point into (column, row) pixel coordinates.
pub fn project_to_image(
    lateral_m: f64,
    range_m: f64,
    cam: &CameraModel,
    grid: &ImageGrid,
) -> Result<(f64, f64)> {
    if !(range_m > 0.0) {
        return Err(Error::Domain(format!(
            "range must be positive, got {range_m}"
        )));
    }
    let column = grid.width_px as f64 / 2.0 + cam.focal_px * lateral_m / range_m;
    let row = cam.horizon_row + cam.focal_px * cam.cam_height / range_m;
    Ok((column, row))
}

/// Inclusive 1-based range of slices the box occupies after clamping to the
/// image, or `None` if nothing visible remains.
pub fn slice_range(b: &Box2D, grid: &ImageGrid) -> Option<(usize, usize)> {
    let span = b.column_span().clamp_to(0.0, grid.width_px as f64);
    if span.is_empty() {
        return None;
    }
    let sw = grid.slice_width();
    let first = (span.lo / sw).floor() as usize + 1;
    let last = ((span.hi / sw).ceil() as usize).min(grid.n_slices);
    (first <= last).then_some((first, last))
}

/// The set S_i of 1-based slice indices a box overlaps with positive length.
pub fn slices_overlapping_box(b: &Box2D, grid: &ImageGrid) -> Vec<usize> {
    slice_range(b, grid).map_or_else(Vec::new, |(f, l)| (f..=l).collect())
}

pub fn iou_1d(a: &Interval1D, b: &Interval1D) -> f64 {
    let inter = a.overlap(b);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    // Corner-derived areas make identical boxes give exactly 1.
    let area = |r: &Box2D| (r.x1() - r.x0()) * (r.y1() - r.y0());
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Binary ground-truth occupancy over slices (0-based vector positions).
pub fn occupancy_from_gt(gt_boxes: &[Box2D], grid: &ImageGrid) -> Vec<u8> {
    let mut t = vec![0u8; grid.n_slices];
    for b in gt_boxes {
        if let Some((first, last)) = slice_range(b, grid) {
            t[first - 1..last].fill(1);
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: Box2D,
    pub score: f64,
}

/// Indices (into `boxes`) kept by greedy NMS, in keep order.
pub fn nms_indices(boxes: &[ScoredBox], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    // Stable sort keeps lower input index first on equal scores.
    order.sort_by(|&i, &j| boxes[j].score.total_cmp(&boxes[i].score));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou_2d(&boxes[i].bbox, &boxes[j].bbox) >= iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Greedy non-maximum suppression; output ordered by descending score.
pub fn nms(boxes: &[ScoredBox], iou_thresh: f64) -> Vec<ScoredBox> {
    nms_indices(boxes, iou_thresh)
        .into_iter()
        .map(|i| boxes[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use proptest::prelude::*;

    fn grid10() -> ImageGrid {
        ImageGrid::new(1600, 900, 160).unwrap()
    }

    fn span_box(x0: f64, x1: f64) -> Box2D {
        Box2D::from_corners(x0, 0.0, x1, 10.0).unwrap()
    }

    /// Counts cells of a regular grid covered by each box.
    fn grid_count_iou(a: &Box2D, b: &Box2D, step: f64) -> f64 {
        // Integrates the indicator exactly per row of cells: within a row the
        // covered column count is computed by enumeration of cell centers.
        let x0 = a.x0().min(b.x0());
        let x1 = a.x1().max(b.x1());
        let y0 = a.y0().min(b.y0());
        let y1 = a.y1().max(b.y1());
        let nx = ((x1 - x0) / step).ceil() as usize;
        let ny = ((y1 - y0) / step).ceil() as usize;
        let inside =
            |bb: &Box2D, x: f64, y: f64| x >= bb.x0() && x < bb.x1() && y >= bb.y0() && y < bb.y1();
        let (mut inter, mut uni) = (0usize, 0usize);
        for iy in 0..ny {
            let y = y0 + (iy as f64 + 0.5) * step;
            for ix in 0..nx {
                let x = x0 + (ix as f64 + 0.5) * step;
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as usize;
                uni += (ia || ib) as usize;
            }
        }
        if uni == 0 {
            0.0
        } else {
            inter as f64 / uni as f64
        }
    }

    #[test]
    fn projection_examples() {
        let cam = CameraModel::default();
        let grid = grid10();
        let (c, _) = project_to_image(0.0, 37.0, &cam, &grid).unwrap();
        assert_eq!(c, 800.0);
        let (c, r) = project_to_image(4.0, 20.0, &cam, &grid).unwrap();
        assert_eq!((c, r), (960.0, 470.0));
        let (c, _) = project_to_image(-4.0, 20.0, &cam, &grid).unwrap();
        assert_eq!(c, 640.0);
        assert!(matches!(
            project_to_image(1.0, 0.0, &cam, &grid),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn grid_rejects_indivisible_width() {
        assert!(ImageGrid::new(1600, 900, 150).is_err());
        assert!(ImageGrid::new(1600, 900, 0).is_err());
    }

    #[test]
    fn box_rejects_nonpositive_size() {
        assert!(Box2D::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(Box2D::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(Box2D::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    /// Enumerates every slice and tests positive-length overlap directly.
    fn slices_by_enumeration(b: &Box2D, grid: &ImageGrid) -> Vec<usize> {
        let span = b.column_span().clamp_to(0.0, grid.width_px as f64);
        (1..=grid.n_slices)
            .filter(|&s| {
                let sl = grid.slice_span(s);
                span.hi.min(sl.hi) - span.lo.max(sl.lo) > 0.0
            })
            .collect()
    }

    #[test]
    fn slice_examples() {
        let g = grid10();
        assert_eq!(slices_overlapping_box(&span_box(0.0, 10.0), &g), vec![1]);
        assert_eq!(
            slices_overlapping_box(&span_box(5.0, 25.0), &g),
            vec![1, 2, 3]
        );
        assert_eq!(
            slices_by_enumeration(&span_box(5.0, 25.0), &g),
            vec![1, 2, 3]
        );
        assert_eq!(slices_overlapping_box(&span_box(-50.0, 5.0), &g), vec![1]);
        assert_eq!(slices_by_enumeration(&span_box(-50.0, 5.0), &g), vec![1]);
        assert!(slices_overlapping_box(&span_box(-50.0, -1.0), &g).is_empty());
        assert!(slices_overlapping_box(&span_box(1600.0, 1700.0), &g).is_empty());
        assert_eq!(
            slices_overlapping_box(&span_box(1590.0, 1700.0), &g),
            vec![160]
        );
        // Touching a boundary at one point does not occupy the neighbour.
        assert_eq!(slices_overlapping_box(&span_box(10.0, 20.0), &g), vec![2]);
    }

    #[test]
    fn iou_1d_examples() {
        let i = |lo, hi| Interval1D::new(lo, hi).unwrap();
        assert_eq!(iou_1d(&i(0.0, 10.0), &i(0.0, 10.0)), 1.0);
        assert_eq!(iou_1d(&i(0.0, 10.0), &i(20.0, 30.0)), 0.0);
        assert_eq!(iou_1d(&i(3.0, 3.0), &i(3.0, 3.0)), 0.0);
        assert!(Interval1D::new(2.0, 1.0).is_err());
        // Oracle: count 1e-3 cells.
        let (a, b) = (i(0.0, 10.0), i(5.0, 15.0));
        let (mut inter, mut uni) = (0u64, 0u64);
        for k in 0..15_000 {
            let x = (k as f64 + 0.5) * 1e-3;
            let (ia, ib) = (x >= a.lo && x < a.hi, x >= b.lo && x < b.hi);
            inter += (ia && ib) as u64;
            uni += (ia || ib) as u64;
        }
        let oracle = inter as f64 / uni as f64;
        assert!((oracle - 1.0 / 3.0).abs() < 1e-9);
        assert!((iou_1d(&a, &b) - oracle).abs() < 1e-12);
    }

    #[test]
    fn iou_2d_examples() {
        let a = Box2D::from_corners(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(iou_2d(&a, &a), 1.0);
        let shifted = a.translated(5.0, 0.0);
        let oracle = grid_count_iou(&a, &shifted, 0.01);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-9);
        assert!((iou_2d(&a, &shifted) - 1.0 / 3.0).abs() < 1e-12);
        let quarter = Box2D::from_corners(0.0, 0.0, 5.0, 5.0).unwrap();
        let oracle = grid_count_iou(&a, &quarter, 0.01);
        assert!((oracle - 0.25).abs() < 1e-9);
        assert!((iou_2d(&a, &quarter) - 0.25).abs() < 1e-12);
        let far = a.translated(100.0, 0.0);
        assert_eq!(iou_2d(&a, &far), 0.0);
    }

    #[test]
    fn iou_2d_matches_counting_oracle_on_lattice_boxes() {
        // Boxes with corners on a 0.5 px lattice are counted exactly by a
        // 0.25 px cell grid, so the oracle has no discretisation error.
        let mut rng = Stream::new(77);
        for _ in 0..200 {
            let mut corner = || (rng.int_range(0, 40) as f64) * 0.5;
            let (ax, ay) = (corner(), corner());
            let (bx, by) = (corner(), corner());
            let mut size = || (rng.int_range(1, 20) as f64) * 0.5;
            let a = Box2D::from_corners(ax, ay, ax + size(), ay + size()).unwrap();
            let b = Box2D::from_corners(bx, by, bx + size(), by + size()).unwrap();
            let oracle = grid_count_iou(&a, &b, 0.25);
            assert!((iou_2d(&a, &b) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn occupancy_examples() {
        let g = ImageGrid::new(80, 40, 8).unwrap();
        assert_eq!(occupancy_from_gt(&[], &g), vec![0; 8]);
        let b = span_box(20.0, 50.0);
        assert_eq!(occupancy_from_gt(&[b], &g), vec![0, 0, 1, 1, 1, 0, 0, 0]);
        let b2 = span_box(22.0, 48.0);
        assert_eq!(occupancy_from_gt(&[b, b2], &g), occupancy_from_gt(&[b], &g));
    }

    fn sb(x0: f64, x1: f64, score: f64) -> ScoredBox {
        ScoredBox {
            bbox: span_box(x0, x1),
            score,
        }
    }

    #[test]
    fn nms_examples() {
        let out = nms(&[sb(0.0, 10.0, 0.8), sb(0.0, 10.0, 0.9)], 0.5);
        assert_eq!(out, vec![sb(0.0, 10.0, 0.9)]);
        let out = nms(&[sb(0.0, 10.0, 0.8), sb(50.0, 60.0, 0.9)], 0.5);
        assert_eq!(out.len(), 2);
        // Chain: A overlaps B (iou 0.6), B overlaps C (iou 0.6), A and C disjoint.
        let a = sb(0.0, 16.0, 0.9);
        let b = sb(4.0, 20.0, 0.8);
        let c = sb(8.0, 24.0, 0.7);
        assert!(iou_2d(&a.bbox, &b.bbox) >= 0.5 && iou_2d(&b.bbox, &c.bbox) >= 0.5);
        assert!(iou_2d(&a.bbox, &c.bbox) < 0.5);
        let out = nms(&[c, a, b], 0.5);
        assert_eq!(out, vec![a, c]);
        // Ties: the earlier input wins.
        let t1 = sb(0.0, 10.0, 0.5);
        let t2 = sb(1.0, 10.0, 0.5);
        assert_eq!(nms_indices(&[t1, t2], 0.5), vec![0]);
        assert_eq!(nms_indices(&[t2, t1], 0.5), vec![0]);
    }

    fn arb_box() -> impl Strategy<Value = Box2D> {
        (
            -50.0..1650.0f64,
            -50.0..950.0f64,
            1.0..300.0f64,
            1.0..300.0f64,
        )
            .prop_map(|(cx, cy, w, h)| Box2D { cx, cy, w, h })
    }

    proptest! {
        #[test]
        fn iou_2d_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let x = iou_2d(&a, &b);
            prop_assert_eq!(x, iou_2d(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(iou_2d(&a, &a), 1.0);
        }

        #[test]
        fn iou_2d_translation_invariant(a in arb_box(), b in arb_box(), dx in -500.0..500.0f64, dy in -500.0..500.0f64) {
            let moved = iou_2d(&a.translated(dx, dy), &b.translated(dx, dy));
            prop_assert!((moved - iou_2d(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn occupancy_union_is_or(xs in proptest::collection::vec(arb_box(), 0..6), ys in proptest::collection::vec(arb_box(), 0..6)) {
            let g = ImageGrid::default();
            let both: Vec<Box2D> = xs.iter().chain(ys.iter()).copied().collect();
            let or: Vec<u8> = occupancy_from_gt(&xs, &g).iter().zip(occupancy_from_gt(&ys, &g)).map(|(a, b)| a | b).collect();
            prop_assert_eq!(occupancy_from_gt(&both, &g), or);
        }

        #[test]
        fn slice_range_matches_enumeration(b in arb_box()) {
            let g = ImageGrid::default();
            prop_assert_eq!(slices_overlapping_box(&b, &g), slices_by_enumeration(&b, &g));
        }

        #[test]
        fn nms_properties(raw in proptest::collection::vec((arb_box(), 0.0..1.0f64), 0..12), thresh in 0.05..1.0f64) {
            let boxes: Vec<ScoredBox> = raw.iter().map(|&(bbox, score)| ScoredBox { bbox, score }).collect();
            let kept = nms(&boxes, thresh);
            for k in &kept {
                prop_assert!(boxes.contains(k));
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(iou_2d(&a.bbox, &b.bbox) < thresh);
                }
            }
            let mut rev = boxes.clone();
            rev.reverse();
            let distinct = {
                let mut s: Vec<f64> = boxes.iter().map(|b| b.score).collect();
                s.sort_by(f64::total_cmp);
                s.windows(2).all(|w| w[0] != w[1])
            };
            if distinct {
                prop_assert_eq!(nms(&rev, thresh), kept);
            }
        }
    }
}
