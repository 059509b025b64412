//! The end-to-end stages, each reading and writing files in a run directory.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Split};
use crate::error::{Error, Result};
use crate::evaluate::{
    average_precision, camera_at_threshold, detected_heatmap, detection_accuracy,
    difference_heatmap, distance_binned_recall, fp_at_matched_tp, gt_heatmap, match_detections,
    recall_heatmap, BinRow, Counts, FpRow, Heatmap, Truth,
};
use crate::fusion::{build_training_set, fuse_scene, radar_predictions};
use crate::gbm::{fit, Ensemble};
use crate::geometry::{occupancy_from_gt, Box2D, ImageGrid, ScoredBox};
use crate::radarnet::{
    build_input_tensor, extract_bundles, train, EpochStat, NetworkWeights, SliceProbs,
};
use crate::report::{self, DetectorSummary};
use crate::store::{self, RunLayout};
use crate::synth::{generate_world, Scene};

pub const CONFIG_FILE: &str = "config.json";
pub const DETECTORS: [&str; 3] = ["radar", "camera", "fused"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub seed: u64,
    pub n_scenes: usize,
    pub n_night: usize,
    pub night_fraction_target: f64,
    pub night_fraction: f64,
    pub n_vehicles: usize,
    pub n_candidates: usize,
}

/// Seeds and counts of a generated run. The only file holding a timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub created_unix_s: u64,
    pub run_seed: u64,
    pub config_digest: String,
    pub splits: Vec<SplitSummary>,
}

/// Config for a stage: an explicit file wins, then the run directory's
/// saved copy, then defaults. A seed override applies last.
pub fn resolve_config(
    config: Option<&Path>,
    run_dir: &Path,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let saved = run_dir.join(CONFIG_FILE);
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None if saved.is_file() => RunConfig::load(&saved)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(layout: &RunLayout, split: Split) -> Result<Vec<Scene>> {
    Ok(store::load_world(&layout.world(split.name()))?.1)
}

pub fn gen_data(cfg: &RunConfig, run_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let layout = RunLayout::new(run_dir);
    let digest = cfg.digest()?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let world = cfg.world_for(split);
        let scenes = generate_world(
            &world,
            &cfg.camera_sim,
            &cfg.radar_sim,
            &cfg.camera,
            &cfg.grid,
        )?;
        let n_night = scenes.iter().filter(|s| s.night).count();
        splits.push(SplitSummary {
            split: split.name().to_string(),
            seed: world.seed,
            n_scenes: scenes.len(),
            n_night,
            night_fraction_target: world.night_fraction,
            night_fraction: n_night as f64 / scenes.len() as f64,
            n_vehicles: scenes.iter().map(|s| s.vehicles.len()).sum(),
            n_candidates: scenes.iter().map(|s| s.candidates.len()).sum(),
        });
        store::save_world(&layout.world(split.name()), &scenes, &digest)?;
    }
    let mut text = serde_json::to_string_pretty(cfg).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    store::write_text(&run_dir.join(CONFIG_FILE), &text)?;
    let manifest = Manifest {
        created_unix_s: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        run_seed: cfg.seed,
        config_digest: digest,
        splits,
    };
    let mut text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    text.push('\n');
    store::write_text(&layout.manifest(), &text)?;
    Ok(manifest)
}

pub fn read_manifest(run_dir: &Path) -> Result<Manifest> {
    let path = RunLayout::new(run_dir).manifest();
    serde_json::from_str(&store::read_text(&path)?).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Network input and occupancy target of every scene. Targets cover only
/// vehicles that returned at least one radar point.
pub fn radar_dataset(
    scenes: &[Scene],
    grid: &ImageGrid,
) -> Vec<(crate::radarnet::RadarTensor, Vec<u8>)> {
    scenes
        .par_iter()
        .map(|s| {
            (
                build_input_tensor(&s.radar_frames, grid),
                occupancy_from_gt(&s.radar_visible_boxes(), grid),
            )
        })
        .collect()
}

pub fn train_radar(
    cfg: &RunConfig,
    run_dir: &Path,
    on_epoch: impl FnMut(&EpochStat),
) -> Result<(NetworkWeights, Vec<EpochStat>)> {
    let layout = RunLayout::new(run_dir);
    let scenes = load_split(&layout, Split::Train)?;
    let dataset = radar_dataset(&scenes, &cfg.grid);
    let outcome = train(&dataset, cfg.arch(), &cfg.train_schedule(), on_epoch)?;
    let digest = cfg.digest()?;
    store::save_weights(&layout.radar_weights(), &outcome.weights, &digest)?;
    store::save_loss_curve(&layout.radar_loss(), &outcome.history, &digest)?;
    Ok((outcome.weights, outcome.history))
}

pub fn train_fusion(cfg: &RunConfig, run_dir: &Path) -> Result<Ensemble> {
    let layout = RunLayout::new(run_dir);
    let weights = store::load_weights(&layout.radar_weights())?.1;
    let mut rows = Vec::new();
    for &split in cfg.fusion_fit_data.splits() {
        let scenes = load_split(&layout, split)?;
        let radar = radar_predictions(&scenes, &weights, &cfg.grid)?;
        rows.extend(build_training_set(&scenes, &radar, &cfg.fusion, &cfg.grid)?);
    }
    let digest = cfg.digest()?;
    store::save_training_set(&layout.fusion_train(), &rows, &digest)?;
    let features: Vec<Vec<f64>> = rows.iter().map(|r| r.features.to_vec()).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label as u8).collect();
    let ensemble = fit(&features, &labels, &cfg.boost_config())?;
    store::save_ensemble(&layout.ensemble(), &ensemble, &digest)?;
    Ok(ensemble)
}

/// Radar-only detections: each slice bundle becomes a full-height box over
/// its slices' columns, scored by the bundle's mean probability.
pub fn radar_detections(y: &SliceProbs, t_g: f64, grid: &ImageGrid) -> Result<Vec<ScoredBox>> {
    extract_bundles(y, t_g)
        .into_iter()
        .map(|b| {
            let x0 = grid.slice_span(b.first).lo;
            let x1 = grid.slice_span(b.last).hi;
            let mean =
                (b.first..=b.last).map(|s| y.get(s)).sum::<f64>() / (b.last - b.first + 1) as f64;
            Ok(ScoredBox {
                bbox: Box2D::from_corners(x0, 0.0, x1, grid.height_px as f64)?,
                score: mean,
            })
        })
        .collect()
}

pub fn truth_of(scenes: &[Scene]) -> Vec<Truth> {
    scenes
        .iter()
        .map(|s| Truth {
            boxes: s.gt_boxes.clone(),
            ranges: s.vehicles.iter().map(|v| v.range_m).collect(),
        })
        .collect()
}

/// Detections of one detector on every test scene.
#[derive(Debug, Clone)]
pub struct DetectorRun {
    pub name: &'static str,
    pub detections: Vec<Vec<ScoredBox>>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub summaries: Vec<DetectorSummary>,
    pub bins: Vec<(String, Vec<BinRow>)>,
    pub fp_rows: Vec<FpRow>,
    pub gt_heatmap: Heatmap,
}

impl EvalOutcome {
    pub fn summary(&self, name: &str) -> Option<&DetectorSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    pub fn bin_rows(&self, name: &str) -> Option<&[BinRow]> {
        self.bins
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.as_slice())
    }
}

/// Runs the three detectors on `scenes` with fixed models.
pub fn detect_all(
    cfg: &RunConfig,
    scenes: &[Scene],
    weights: &NetworkWeights,
    ensemble: &Ensemble,
) -> Result<Vec<DetectorRun>> {
    let radar = radar_predictions(scenes, weights, &cfg.grid)?;
    let radar_dets = radar
        .par_iter()
        .map(|y| radar_detections(y, cfg.eval.t_g, &cfg.grid))
        .collect::<Result<Vec<_>>>()?;
    let camera_cands: Vec<Vec<ScoredBox>> = scenes
        .iter()
        .map(|s| s.candidates.iter().map(|c| c.scored()).collect())
        .collect();
    let camera_dets =
        camera_at_threshold(&camera_cands, cfg.eval.camera_threshold, cfg.fusion.nms_iou);
    let fused_dets = scenes
        .par_iter()
        .zip(&radar)
        .map(|(s, y)| fuse_scene(&s.candidates, y, ensemble, &cfg.fusion, &cfg.grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(vec![
        DetectorRun {
            name: DETECTORS[0],
            detections: radar_dets,
        },
        DetectorRun {
            name: DETECTORS[1],
            detections: camera_dets,
        },
        DetectorRun {
            name: DETECTORS[2],
            detections: fused_dets,
        },
    ])
}

/// Computes every analysis without touching the filesystem.
pub fn evaluate_scenes(
    cfg: &RunConfig,
    scenes: &[Scene],
    weights: &NetworkWeights,
    ensemble: &Ensemble,
) -> Result<EvalOutcome> {
    let runs = detect_all(cfg, scenes, weights, ensemble)?;
    evaluate_runs(cfg, scenes, &runs)
}

fn evaluate_runs(cfg: &RunConfig, scenes: &[Scene], runs: &[DetectorRun]) -> Result<EvalOutcome> {
    let truth = truth_of(scenes);
    let gts: Vec<Vec<Box2D>> = truth.iter().map(|t| t.boxes.clone()).collect();
    let t = cfg.eval.iou_match;
    let mut summaries = Vec::new();
    let mut bins = Vec::new();
    for run in runs {
        let mut counts = Counts::default();
        for (d, g) in run.detections.iter().zip(&gts) {
            counts += match_detections(d, g, t).counts();
        }
        summaries.push(DetectorSummary {
            name: run.name.to_string(),
            map: average_precision(&run.detections, &gts, t)?,
            accuracy: detection_accuracy(&counts)?,
            counts,
        });
        bins.push((
            run.name.to_string(),
            distance_binned_recall(&run.detections, &truth, t, &cfg.eval.bins)?,
        ));
    }
    let camera_cands: Vec<Vec<ScoredBox>> = scenes
        .iter()
        .map(|s| s.candidates.iter().map(|c| c.scored()).collect())
        .collect();
    let fp_rows = fp_at_matched_tp(
        &camera_cands,
        &runs[2].detections,
        &truth,
        t,
        cfg.fusion.nms_iou,
        cfg.eval.camera_threshold,
    )?;
    Ok(EvalOutcome {
        summaries,
        bins,
        fp_rows,
        gt_heatmap: gt_heatmap(&truth, &cfg.grid, &cfg.eval.bins),
    })
}

pub fn eval(cfg: &RunConfig, run_dir: &Path) -> Result<EvalOutcome> {
    let layout = RunLayout::new(run_dir);
    let weights = store::load_weights(&layout.radar_weights())?.1;
    let ensemble = store::load_ensemble(&layout.ensemble())?.1;
    let scenes = load_split(&layout, Split::Test)?;
    let runs = detect_all(cfg, &scenes, &weights, &ensemble)?;
    let outcome = evaluate_runs(cfg, &scenes, &runs)?;

    let truth = truth_of(&scenes);
    let (t, bins, grid) = (cfg.eval.iou_match, &cfg.eval.bins, &cfg.grid);
    let dir = layout.report_dir();
    let put = |name: &str, text: &str| store::write_text(&dir.join(name), text);

    put("summary.csv", &report::summary_csv(&outcome.summaries))?;
    put("summary.txt", &report::summary_text(&outcome.summaries))?;
    let bin_refs: Vec<(&str, &[BinRow])> = outcome
        .bins
        .iter()
        .map(|(n, r)| (n.as_str(), r.as_slice()))
        .collect();
    put("distance_bins.csv", &report::bins_csv(&bin_refs, bins))?;
    put("distance_bins.svg", &report::bins_svg(&bin_refs, bins))?;
    put("fp_at_matched_tp.csv", &report::fp_csv(&outcome.fp_rows))?;

    put(
        "heatmap_gt.csv",
        &report::heatmap_csv(&outcome.gt_heatmap, bins),
    )?;
    put(
        "heatmap_gt.svg",
        &report::heatmap_svg(
            "Ground-truth vehicles per cell",
            &outcome.gt_heatmap,
            bins,
            false,
        ),
    )?;
    let detected: Vec<Heatmap> = runs
        .iter()
        .map(|r| detected_heatmap(&r.detections, &truth, t, grid, bins))
        .collect();
    for (run, det) in runs.iter().zip(&detected) {
        let recall = recall_heatmap(det, &outcome.gt_heatmap);
        put(
            &format!("heatmap_recall_{}.csv", run.name),
            &report::heatmap_csv(&recall, bins),
        )?;
        put(
            &format!("heatmap_recall_{}.svg", run.name),
            &report::heatmap_svg(
                &format!("Recall per cell: {}", run.name),
                &recall,
                bins,
                false,
            ),
        )?;
    }
    let diff = difference_heatmap(&detected[2], &detected[1]);
    put(
        "heatmap_diff_fused_minus_camera.csv",
        &report::heatmap_csv(&diff, bins),
    )?;
    put(
        "heatmap_diff_fused_minus_camera.svg",
        &report::heatmap_svg("Detected vehicles: fused minus camera", &diff, bins, true),
    )?;
    Ok(outcome)
}

/// Writes `report/index.md`: the summary, the FP table and a list of every
/// file in the run directory. Also plots the radar loss curve if present.
pub fn report(run_dir: &Path) -> Result<String> {
    if !run_dir.is_dir() {
        return Err(Error::Invalid(format!(
            "{}: run directory does not exist",
            run_dir.display()
        )));
    }
    let layout = RunLayout::new(run_dir);
    let dir = layout.report_dir();
    let summary_path = dir.join("summary.txt");
    if !summary_path.is_file() {
        return Err(Error::Invalid(format!(
            "{}: no evaluation results (run eval first)",
            run_dir.display()
        )));
    }
    if layout.radar_loss().is_file() {
        let (_, history) = store::load_loss_curve(&layout.radar_loss())?;
        store::write_text(&dir.join("radar_loss.svg"), &report::loss_svg(&history))?;
    }
    let mut text = String::from("# Run report\n\n## Detectors\n\n```\n");
    text.push_str(&store::read_text(&summary_path)?);
    text.push_str("```\n\n## FP at matched TP\n\n```\n");
    text.push_str(&store::read_text(&dir.join("fp_at_matched_tp.csv"))?);
    text.push_str("```\n\n## Files\n\n");
    let mut files = Vec::new();
    list_files(run_dir, run_dir, &mut files)?;
    files.retain(|f| f != "report/index.md");
    files.sort();
    for f in files {
        text.push_str(&format!("- {f}\n"));
    }
    store::write_text(&dir.join("index.md"), &text)?;
    Ok(text)
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            list_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Runs every stage in order.
pub fn run_all(cfg: &RunConfig, run_dir: &Path) -> Result<EvalOutcome> {
    gen_data(cfg, run_dir)?;
    train_radar(cfg, run_dir, |_| {})?;
    train_fusion(cfg, run_dir)?;
    let outcome = eval(cfg, run_dir)?;
    report(run_dir)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{SplitSpec, Splits};
    use crate::radarnet::Phase;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.splits = Splits {
            train: SplitSpec {
                n_scenes: 24,
                night_fraction: 0.1,
            },
            val: SplitSpec {
                n_scenes: 8,
                night_fraction: 0.1,
            },
            test: SplitSpec {
                n_scenes: 12,
                night_fraction: 1.0,
            },
        };
        cfg.radar_net.width = 4;
        cfg.radar_train.phases = vec![Phase {
            epochs: 2,
            learning_rate: 1e-3,
        }];
        cfg.radar_train.batch_size = 8;
        cfg.boost.n_rounds = 10;
        cfg
    }

    #[test]
    fn manifest_records_split_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            splits: Splits {
                test: SplitSpec {
                    n_scenes: 40,
                    night_fraction: 1.0,
                },
                ..tiny().splits
            },
            ..tiny()
        };
        let m = gen_data(&cfg, dir.path()).unwrap();
        assert_eq!(m.splits.len(), 3);
        assert_eq!(m.splits[2].n_scenes, 40);
        assert_eq!(m.splits[2].night_fraction, 1.0);
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        let saved = resolve_config(None, dir.path(), None).unwrap();
        assert_eq!(saved, cfg);
        assert_eq!(resolve_config(None, dir.path(), Some(9)).unwrap().seed, 9);
    }

    #[test]
    fn radar_boxes_span_bundle_columns_at_full_height() {
        let grid = ImageGrid::default();
        let mut y = vec![0.01; grid.n_slices];
        y[9] = 0.8;
        y[10] = 0.6;
        let dets = radar_detections(&SliceProbs::new(y).unwrap(), 0.5, &grid).unwrap();
        assert_eq!(dets.len(), 1);
        let b = dets[0].bbox;
        assert_eq!(
            (b.x0(), b.x1()),
            (grid.slice_span(10).lo, grid.slice_span(11).hi)
        );
        assert_eq!((b.y0(), b.y1()), (0.0, grid.height_px as f64));
        assert!((dets[0].score - 0.7).abs() < 1e-12);
    }

    #[test]
    fn constant_zero_ensemble_fuses_nothing() {
        let cfg = tiny();
        let scenes = generate_world(
            &cfg.world_for(Split::Test),
            &cfg.camera_sim,
            &cfg.radar_sim,
            &cfg.camera,
            &cfg.grid,
        )
        .unwrap();
        let weights = NetworkWeights::init(cfg.arch(), 3).unwrap();
        let out = evaluate_scenes(&cfg, &scenes, &weights, &Ensemble::constant(9, 1e-9)).unwrap();
        let fused = out.summary("fused").unwrap();
        assert_eq!(fused.counts.tp + fused.counts.fp, 0);
        assert_eq!(fused.accuracy, 0.0);
        assert_eq!(fused.map, 0.0);
    }

    #[test]
    fn stages_fail_cleanly_on_missing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        assert!(matches!(
            train_radar(&cfg, dir.path(), |_| {}),
            Err(Error::Io { .. })
        ));
        assert!(matches!(report(dir.path()), Err(Error::Invalid(_))));
        assert!(report(&dir.path().join("nope")).is_err());
    }

    #[test]
    fn full_run_writes_every_artifact_and_is_repeatable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let out = run_all(&cfg, a.path()).unwrap();
        run_all(&cfg, b.path()).unwrap();
        assert_eq!(out.summaries.len(), 3);
        let index = std::fs::read_to_string(a.path().join("report/index.md")).unwrap();
        for f in [
            "ensemble.json",
            "radar_weights.json",
            "report/heatmap_gt.svg",
            "report/radar_loss.svg",
        ] {
            assert!(index.contains(f), "{f} missing from index");
        }
        let mut files = Vec::new();
        list_files(a.path(), a.path(), &mut files).unwrap();
        for f in files.iter().filter(|f| *f != "manifest.json") {
            let x = std::fs::read(a.path().join(f)).unwrap();
            let y = std::fs::read(b.path().join(f)).unwrap();
            assert!(x == y, "{f} differs between runs");
        }
        // Rerunning the report is a no-op.
        let before = std::fs::read(a.path().join("report/index.md")).unwrap();
        report(a.path()).unwrap();
        assert_eq!(
            before,
            std::fs::read(a.path().join("report/index.md")).unwrap()
        );
    }
}
