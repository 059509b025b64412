//! Seeded synthetic driving scenes: ground-truth vehicles, a box-level camera
//! detector model, and sparse radar frames.
//!
//! The two simulated sensors fail in complementary ways. Camera recall falls
//! with distance and at night, while radar sees moving vehicles regardless of
//! light but almost never reports parked ones.
//!
//! Scene `i` draws only from `Stream::new(seed).named("world").child(i)`, so
//! generating more scenes never perturbs earlier ones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::CandidateBox;
use crate::geometry::{iou_2d, project_to_image, Box2D, CameraModel, ImageGrid};
use crate::radarnet::RadarPoint;
use crate::rng::Stream;

/// Candidates from the camera model never carry a vehicle probability below this.
const P_VEHICLE_MIN: f64 = 0.8;
const SCORE_FLOOR: f64 = 0.01;
const SCORE_CEIL: f64 = 0.99;
/// A new vehicle may overlap an earlier one by at most this IoU.
const MAX_VEHICLE_OVERLAP: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 20;
/// Keeps vehicle centers within this fraction of the half field of view.
const FOV_MARGIN: f64 = 0.9;

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::Config(format!(
            "{name} must be a nonempty range, got {r:?}"
        )));
    }
    Ok(())
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Split size; a run configuration sets it per split.
    #[serde(skip)]
    pub n_scenes: usize,
    /// Inclusive bounds on the number of vehicles per scene.
    pub vehicles_per_scene: [usize; 2],
    pub range_m: [f64; 2],
    /// Vehicles are placed with `|lateral| <= lateral_max_m` (and inside the view).
    pub lateral_max_m: f64,
    pub vehicle_width_m: f64,
    pub vehicle_height_m: f64,
    pub moving_fraction: f64,
    /// Longitudinal speed magnitude of movers, m/s.
    pub speed_mps: [f64; 2],
    pub lateral_speed_std_mps: f64,
    /// Probability that a scene is recorded at night; set per split.
    #[serde(skip)]
    pub night_fraction: f64,
    /// Derived from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_scenes: 100,
            vehicles_per_scene: [1, 8],
            range_m: [5.0, 100.0],
            lateral_max_m: 15.0,
            vehicle_width_m: 1.8,
            vehicle_height_m: 1.5,
            moving_fraction: 0.6,
            speed_mps: [3.0, 15.0],
            lateral_speed_std_mps: 0.5,
            night_fraction: 1.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vehicles_per_scene[0] > self.vehicles_per_scene[1] {
            return Err(Error::Config(
                "world.vehicles_per_scene must be a nonempty range".into(),
            ));
        }
        check_range("world.range_m", self.range_m)?;
        check_range("world.speed_mps", self.speed_mps)?;
        if !(self.range_m[0] > 0.0) {
            return Err(Error::Config("world.range_m must be positive".into()));
        }
        if !(self.lateral_max_m >= 0.0 && self.lateral_speed_std_mps >= 0.0) {
            return Err(Error::Config(
                "world lateral extents must be non-negative".into(),
            ));
        }
        if !(self.vehicle_width_m > 0.0 && self.vehicle_height_m > 0.0) {
            return Err(Error::Config("world vehicle size must be positive".into()));
        }
        check_prob("world.moving_fraction", self.moving_fraction)?;
        check_prob("world.night_fraction", self.night_fraction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthVehicle {
    pub lateral_m: f64,
    pub range_m: f64,
    pub width_m: f64,
    pub height_m: f64,
    /// Relative velocity; both zero for parked vehicles.
    pub speed_long: f64,
    pub speed_lat: f64,
}

impl GroundTruthVehicle {
    pub fn is_moving(&self) -> bool {
        self.speed_long != 0.0 || self.speed_lat != 0.0
    }

    /// Image box: width and height scale with focal length over range, and
    /// the bottom edge rests on the ground row.
    pub fn image_box(&self, cam: &CameraModel, grid: &ImageGrid) -> Result<Box2D> {
        let (column, ground_row) = project_to_image(self.lateral_m, self.range_m, cam, grid)?;
        let w = self.width_m * cam.focal_px / self.range_m;
        let h = self.height_m * cam.focal_px / self.range_m;
        Box2D::new(column, ground_row - h / 2.0, w, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSimConfig {
    pub base_recall: f64,
    pub recall_decay_per_m: f64,
    pub night_recall_penalty: f64,
    pub score_tp_mean: f64,
    pub score_tp_std: f64,
    pub score_fp_mean: f64,
    pub score_fp_std: f64,
    pub fp_rate_per_scene: f64,
    pub box_jitter_px: f64,
    /// Chance that a missed vehicle still appears as a low-score candidate.
    pub low_score_prob: f64,
    pub low_score_range: [f64; 2],
}

impl Default for CameraSimConfig {
    fn default() -> Self {
        Self {
            base_recall: 0.9,
            recall_decay_per_m: 0.006,
            night_recall_penalty: 0.25,
            score_tp_mean: 0.7,
            score_tp_std: 0.15,
            score_fp_mean: 0.3,
            score_fp_std: 0.15,
            fp_rate_per_scene: 1.5,
            box_jitter_px: 1.5,
            low_score_prob: 0.5,
            low_score_range: [0.05, 0.25],
        }
    }
}

impl CameraSimConfig {
    pub fn validate(&self) -> Result<()> {
        check_prob("camera_sim.base_recall", self.base_recall)?;
        check_prob("camera_sim.night_recall_penalty", self.night_recall_penalty)?;
        check_prob("camera_sim.low_score_prob", self.low_score_prob)?;
        check_prob("camera_sim.score_tp_mean", self.score_tp_mean)?;
        check_prob("camera_sim.score_fp_mean", self.score_fp_mean)?;
        check_range("camera_sim.low_score_range", self.low_score_range)?;
        check_prob("camera_sim.low_score_range", self.low_score_range[0])?;
        check_prob("camera_sim.low_score_range", self.low_score_range[1])?;
        let nonneg = [
            self.recall_decay_per_m,
            self.score_tp_std,
            self.score_fp_std,
            self.fp_rate_per_scene,
            self.box_jitter_px,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(
                "camera_sim rates, spreads and jitter must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Probability that a vehicle at `range_m` is detected normally.
    pub fn recall(&self, range_m: f64, night: bool) -> f64 {
        let night_factor = if night {
            1.0 - self.night_recall_penalty
        } else {
            1.0
        };
        (self.base_recall * (1.0 - self.recall_decay_per_m * range_m) * night_factor)
            .clamp(0.05, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarSimConfig {
    pub detect_prob_moving: f64,
    pub detect_prob_static: f64,
    pub max_range_m: f64,
    pub range_noise_m: f64,
    pub velocity_noise_mps: f64,
    pub points_per_vehicle: [usize; 2],
    pub clutter_points_per_scene: [usize; 2],
    pub clutter_speed_std_mps: f64,
    /// Number of frames per scene, oldest first; the last is the current one.
    pub n_frames: usize,
    pub frame_rate_hz: f64,
    /// Heights above ground at which reflections occur.
    pub reflection_height_m: [f64; 2],
}

impl Default for RadarSimConfig {
    fn default() -> Self {
        Self {
            detect_prob_moving: 0.7,
            detect_prob_static: 0.02,
            max_range_m: 100.0,
            range_noise_m: 0.3,
            velocity_noise_mps: 0.3,
            points_per_vehicle: [1, 3],
            clutter_points_per_scene: [2, 10],
            clutter_speed_std_mps: 0.5,
            n_frames: 3,
            frame_rate_hz: 13.0,
            reflection_height_m: [0.3, 1.2],
        }
    }
}

impl RadarSimConfig {
    pub fn validate(&self) -> Result<()> {
        check_prob("radar_sim.detect_prob_moving", self.detect_prob_moving)?;
        check_prob("radar_sim.detect_prob_static", self.detect_prob_static)?;
        check_range("radar_sim.reflection_height_m", self.reflection_height_m)?;
        if self.points_per_vehicle[0] > self.points_per_vehicle[1]
            || self.clutter_points_per_scene[0] > self.clutter_points_per_scene[1]
        {
            return Err(Error::Config(
                "radar_sim point-count ranges must be nonempty".into(),
            ));
        }
        if self.n_frames == 0 {
            return Err(Error::Config("radar_sim.n_frames must be positive".into()));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(Error::Config(
                "radar_sim.frame_rate_hz must be positive".into(),
            ));
        }
        let nonneg = [
            self.max_range_m,
            self.range_noise_m,
            self.velocity_noise_mps,
            self.clutter_speed_std_mps,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(
                "radar_sim ranges and noise levels must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub id: u64,
    pub night: bool,
    pub vehicles: Vec<GroundTruthVehicle>,
    /// Image box of each vehicle, same order as `vehicles`.
    pub gt_boxes: Vec<Box2D>,
    /// Whether each vehicle produced at least one radar point in any frame.
    pub radar_hits: Vec<bool>,
    pub candidates: Vec<CandidateBox>,
    /// Radar frames, oldest first.
    pub radar_frames: Vec<Vec<RadarPoint>>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let n = self.vehicles.len();
        if self.gt_boxes.len() != n || self.radar_hits.len() != n {
            return Err(Error::Validation(format!(
                "scene {}: {} vehicles but {} boxes and {} radar flags",
                self.id,
                n,
                self.gt_boxes.len(),
                self.radar_hits.len()
            )));
        }
        for v in &self.vehicles {
            if !(v.range_m > 0.0) {
                return Err(Error::Validation(format!(
                    "scene {}: vehicle range must be positive",
                    self.id
                )));
            }
        }
        for b in &self.gt_boxes {
            b.validate()
                .map_err(|e| Error::Validation(format!("scene {}: {e}", self.id)))?;
        }
        for c in &self.candidates {
            c.validate()
                .map_err(|e| Error::Validation(format!("scene {}: {e}", self.id)))?;
        }
        let finite_point = |p: &RadarPoint| {
            [p.range_m, p.proj_height_px, p.v_lat, p.v_long, p.column_px]
                .iter()
                .all(|v| v.is_finite())
        };
        if !self.radar_frames.iter().flatten().all(finite_point) {
            return Err(Error::Validation(format!(
                "scene {}: non-finite radar point",
                self.id
            )));
        }
        Ok(())
    }

    /// Boxes of vehicles that radar saw, used as radar training targets.
    pub fn radar_visible_boxes(&self) -> Vec<Box2D> {
        self.gt_boxes
            .iter()
            .zip(&self.radar_hits)
            .filter(|(_, &hit)| hit)
            .map(|(b, _)| *b)
            .collect()
    }
}

fn max_lateral(range_m: f64, cfg: &WorldConfig, cam: &CameraModel, grid: &ImageGrid) -> f64 {
    let half_view = grid.width_px as f64 / 2.0 / cam.focal_px;
    cfg.lateral_max_m.min(FOV_MARGIN * range_m * half_view)
}

fn place_vehicles(
    cfg: &WorldConfig,
    cam: &CameraModel,
    grid: &ImageGrid,
    rng: &mut Stream,
) -> Result<(Vec<GroundTruthVehicle>, Vec<Box2D>)> {
    let n = rng.int_range(
        cfg.vehicles_per_scene[0] as u64,
        cfg.vehicles_per_scene[1] as u64,
    ) as usize;
    let mut vehicles = Vec::with_capacity(n);
    let mut boxes: Vec<Box2D> = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let range_m = rng.uniform_range(cfg.range_m[0], cfg.range_m[1]);
            let lat = max_lateral(range_m, cfg, cam, grid);
            let lateral_m = rng.uniform_range(-lat, lat);
            let moving = rng.bernoulli(cfg.moving_fraction);
            let (speed_long, speed_lat) = if moving {
                let s = rng.uniform_range(cfg.speed_mps[0], cfg.speed_mps[1]);
                let dir = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                (dir * s, rng.gaussian(0.0, cfg.lateral_speed_std_mps))
            } else {
                (0.0, 0.0)
            };
            let v = GroundTruthVehicle {
                lateral_m,
                range_m,
                width_m: cfg.vehicle_width_m,
                height_m: cfg.vehicle_height_m,
                // A zero draw would silently make a mover static.
                speed_long: if moving && speed_long == 0.0 {
                    f64::MIN_POSITIVE
                } else {
                    speed_long
                },
                speed_lat,
            };
            let b = v.image_box(cam, grid)?;
            if boxes.iter().all(|o| iou_2d(o, &b) <= MAX_VEHICLE_OVERLAP) {
                vehicles.push(v);
                boxes.push(b);
                break;
            }
        }
    }
    Ok((vehicles, boxes))
}

fn jitter_box(b: &Box2D, jitter_px: f64, rng: &mut Stream) -> Box2D {
    let cx = b.cx + rng.gaussian(0.0, jitter_px);
    let cy = b.cy + rng.gaussian(0.0, jitter_px);
    let w = (b.w + rng.gaussian(0.0, jitter_px / 2.0)).max(1.0);
    let h = (b.h + rng.gaussian(0.0, jitter_px / 2.0)).max(1.0);
    Box2D { cx, cy, w, h }
}

/// Splits a confidence `c` into objectness and vehicle probability with
/// `z * p_vehicle = c` whenever `c <= p_vehicle`.
fn split_score(c: f64, rng: &mut Stream) -> (f64, f64) {
    let p = rng.uniform_range(P_VEHICLE_MIN, 1.0);
    ((c / p).min(1.0), p)
}

fn candidate(b: Box2D, c: f64, rng: &mut Stream) -> CandidateBox {
    let (z, p_vehicle) = split_score(c, rng);
    CandidateBox {
        bbox: b,
        z,
        p_vehicle,
    }
}

/// Box-level camera detector model for one scene.
pub fn simulate_camera_detector(
    vehicles: &[GroundTruthVehicle],
    gt_boxes: &[Box2D],
    night: bool,
    cfg: &CameraSimConfig,
    world: &WorldConfig,
    cam: &CameraModel,
    grid: &ImageGrid,
    rng: &mut Stream,
) -> Result<Vec<CandidateBox>> {
    let mut out = Vec::new();
    for (v, b) in vehicles.iter().zip(gt_boxes) {
        if rng.bernoulli(cfg.recall(v.range_m, night)) {
            let c = rng
                .gaussian(cfg.score_tp_mean, cfg.score_tp_std)
                .clamp(SCORE_FLOOR, SCORE_CEIL);
            let jb = jitter_box(b, cfg.box_jitter_px, rng);
            out.push(candidate(jb, c, rng));
        } else if rng.bernoulli(cfg.low_score_prob) {
            let c = rng.uniform_range(cfg.low_score_range[0], cfg.low_score_range[1]);
            let jb = jitter_box(b, cfg.box_jitter_px, rng);
            out.push(candidate(jb, c, rng));
        }
    }
    let n_fp = rng.poisson(cfg.fp_rate_per_scene);
    for _ in 0..n_fp {
        // Spurious boxes sit on the ground plane with vehicle-like sizes.
        let range_m = rng.uniform_range(world.range_m[0], world.range_m[1]);
        let lat = max_lateral(range_m, world, cam, grid);
        let lateral_m = rng.uniform_range(-lat, lat);
        let scale = rng.uniform_range(0.6, 1.4);
        let ghost = GroundTruthVehicle {
            lateral_m,
            range_m,
            width_m: world.vehicle_width_m * scale,
            height_m: world.vehicle_height_m * scale,
            speed_long: 0.0,
            speed_lat: 0.0,
        };
        let b = ghost.image_box(cam, grid)?;
        let c = rng
            .gaussian(cfg.score_fp_mean, cfg.score_fp_std)
            .clamp(SCORE_FLOOR, SCORE_CEIL);
        out.push(candidate(b, c, rng));
    }
    Ok(out)
}

fn radar_point(
    lateral_m: f64,
    range_m: f64,
    height_m: f64,
    v_lat: f64,
    v_long: f64,
    cam: &CameraModel,
    grid: &ImageGrid,
) -> Result<RadarPoint> {
    let (column_px, _) = project_to_image(lateral_m, range_m, cam, grid)?;
    Ok(RadarPoint {
        range_m,
        proj_height_px: cam.row_at_height(height_m, range_m),
        v_lat,
        v_long,
        column_px,
    })
}

/// Radar frames (oldest first) and per-vehicle hit flags for one scene.
/// Earlier frames place each vehicle back along its velocity.
pub fn simulate_radar(
    vehicles: &[GroundTruthVehicle],
    cfg: &RadarSimConfig,
    world: &WorldConfig,
    cam: &CameraModel,
    grid: &ImageGrid,
    rng: &mut Stream,
) -> Result<(Vec<Vec<RadarPoint>>, Vec<bool>)> {
    let dt = 1.0 / cfg.frame_rate_hz;
    let mut hits = vec![false; vehicles.len()];
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let min_range = world.range_m[0].min(1.0);
    for k in 0..cfg.n_frames {
        let age = (cfg.n_frames - 1 - k) as f64 * dt;
        let mut frame = Vec::new();
        for (i, v) in vehicles.iter().enumerate() {
            let p = if v.is_moving() {
                cfg.detect_prob_moving
            } else {
                cfg.detect_prob_static
            };
            if !rng.bernoulli(p) {
                continue;
            }
            let n = rng.int_range(
                cfg.points_per_vehicle[0] as u64,
                cfg.points_per_vehicle[1] as u64,
            );
            let range_k = v.range_m - v.speed_long * age;
            let lateral_k = v.lateral_m - v.speed_lat * age;
            for _ in 0..n {
                let r = (range_k + rng.gaussian(0.0, cfg.range_noise_m)).max(min_range);
                let lat = lateral_k + rng.uniform_range(-v.width_m / 2.0, v.width_m / 2.0);
                let h = rng.uniform_range(cfg.reflection_height_m[0], cfg.reflection_height_m[1]);
                let v_lat = v.speed_lat + rng.gaussian(0.0, cfg.velocity_noise_mps);
                let v_long = v.speed_long + rng.gaussian(0.0, cfg.velocity_noise_mps);
                if r > cfg.max_range_m {
                    continue;
                }
                frame.push(radar_point(lat, r, h, v_lat, v_long, cam, grid)?);
                hits[i] = true;
            }
        }
        let n_clutter = rng.int_range(
            cfg.clutter_points_per_scene[0] as u64,
            cfg.clutter_points_per_scene[1] as u64,
        );
        for _ in 0..n_clutter {
            let r = rng.uniform_range(
                world.range_m[0],
                world.range_m[1].min(cfg.max_range_m).max(world.range_m[0]),
            );
            let lat_max = max_lateral(r, world, cam, grid) / FOV_MARGIN;
            let lat = rng.uniform_range(-lat_max, lat_max);
            let h = rng.uniform_range(cfg.reflection_height_m[0], cfg.reflection_height_m[1]);
            let v_lat = rng.gaussian(0.0, cfg.clutter_speed_std_mps);
            let v_long = rng.gaussian(0.0, cfg.clutter_speed_std_mps);
            frame.push(radar_point(lat, r, h, v_lat, v_long, cam, grid)?);
        }
        frames.push(frame);
    }
    Ok((frames, hits))
}

/// Generates scene `index` of a world.
pub fn generate_scene(
    index: u64,
    cfg: &WorldConfig,
    cam_cfg: &CameraSimConfig,
    radar_cfg: &RadarSimConfig,
    cam: &CameraModel,
    grid: &ImageGrid,
) -> Result<Scene> {
    let root = Stream::new(cfg.seed).named("world").child(index);
    let mut layout = root.named("layout");
    let night = layout.bernoulli(cfg.night_fraction);
    let (vehicles, gt_boxes) = place_vehicles(cfg, cam, grid, &mut layout)?;
    let candidates = simulate_camera_detector(
        &vehicles,
        &gt_boxes,
        night,
        cam_cfg,
        cfg,
        cam,
        grid,
        &mut root.named("camera"),
    )?;
    let (radar_frames, radar_hits) = simulate_radar(
        &vehicles,
        radar_cfg,
        cfg,
        cam,
        grid,
        &mut root.named("radar"),
    )?;
    Ok(Scene {
        id: index,
        night,
        vehicles,
        gt_boxes,
        radar_hits,
        candidates,
        radar_frames,
    })
}

pub fn generate_world(
    cfg: &WorldConfig,
    cam_cfg: &CameraSimConfig,
    radar_cfg: &RadarSimConfig,
    cam: &CameraModel,
    grid: &ImageGrid,
) -> Result<Vec<Scene>> {
    cfg.validate()?;
    cam_cfg.validate()?;
    radar_cfg.validate()?;
    cam.validate()?;
    grid.validate()?;
    (0..cfg.n_scenes as u64)
        .into_par_iter()
        .map(|i| generate_scene(i, cfg, cam_cfg, radar_cfg, cam, grid))
        .collect()
}
