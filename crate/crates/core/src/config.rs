//! The run configuration: one JSON document covering every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::DistanceBins;
use crate::fusion::FusionConfig;
use crate::gbm::BoostConfig;
use crate::geometry::{CameraModel, ImageGrid};
use crate::radarnet::{Arch, TrainSchedule, N_FEATURES};
use crate::rng::Stream;
use crate::synth::{CameraSimConfig, RadarSimConfig, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub n_scenes: usize,
    pub night_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Splits {
    pub train: SplitSpec,
    pub val: SplitSpec,
    pub test: SplitSpec,
}

impl Default for Splits {
    fn default() -> Self {
        Self {
            train: SplitSpec {
                n_scenes: 600,
                night_fraction: 0.09,
            },
            val: SplitSpec {
                n_scenes: 100,
                night_fraction: 0.09,
            },
            test: SplitSpec {
                n_scenes: 200,
                night_fraction: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Which worlds the meta-classifier is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionFitData {
    Train,
    Val,
    TrainVal,
}

impl FusionFitData {
    pub fn splits(self) -> &'static [Split] {
        match self {
            FusionFitData::Train => &[Split::Train],
            FusionFitData::Val => &[Split::Val],
            FusionFitData::TrainVal => &[Split::Train, Split::Val],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarNetConfig {
    /// Base channel width of the network.
    pub width: usize,
}

impl Default for RadarNetConfig {
    fn default() -> Self {
        Self { width: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU a detection needs to count as a true positive.
    pub iou_match: f64,
    /// Confidence threshold of the camera-only detector.
    pub camera_threshold: f64,
    /// Slice threshold for radar bundles.
    pub t_g: f64,
    pub bins: DistanceBins,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_match: 0.5,
            camera_threshold: 0.3,
            t_g: 0.5,
            bins: DistanceBins::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: ImageGrid,
    pub camera: CameraModel,
    /// Scene parameters shared by all splits.
    pub world: WorldConfig,
    pub splits: Splits,
    pub camera_sim: CameraSimConfig,
    pub radar_sim: RadarSimConfig,
    pub radar_net: RadarNetConfig,
    pub radar_train: TrainSchedule,
    pub boost: BoostConfig,
    pub fusion: FusionConfig,
    pub fusion_fit_data: FusionFitData,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            grid: ImageGrid::default(),
            camera: CameraModel::default(),
            world: WorldConfig::default(),
            splits: Splits::default(),
            camera_sim: CameraSimConfig::default(),
            radar_sim: RadarSimConfig::default(),
            radar_net: RadarNetConfig::default(),
            radar_train: TrainSchedule::default(),
            boost: BoostConfig::default(),
            fusion: FusionConfig::default(),
            fusion_fit_data: FusionFitData::TrainVal,
            eval: EvalConfig::default(),
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::store::read_text(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.camera.validate()?;
        self.world.validate()?;
        for (name, s) in [
            ("train", self.splits.train),
            ("val", self.splits.val),
            ("test", self.splits.test),
        ] {
            if s.n_scenes == 0 {
                return Err(Error::Config(format!(
                    "splits.{name}.n_scenes: empty split"
                )));
            }
            unit(&format!("splits.{name}.night_fraction"), s.night_fraction)?;
        }
        self.camera_sim.validate()?;
        self.radar_sim.validate()?;
        self.radar_train.validate()?;
        self.boost.validate()?;
        self.fusion.validate()?;
        self.eval.bins.validate()?;
        unit("eval.iou_match", self.eval.iou_match)?;
        unit("eval.camera_threshold", self.eval.camera_threshold)?;
        unit("eval.t_g", self.eval.t_g)?;
        if self.radar_net.width == 0 {
            return Err(Error::Config("radar_net.width must be positive".into()));
        }
        self.arch().validate()
    }

    pub fn arch(&self) -> Arch {
        Arch {
            n_slices: self.grid.n_slices,
            n_steps: self.radar_sim.n_frames,
            n_features: N_FEATURES,
            width: self.radar_net.width,
        }
    }

    fn derived_seed(&self, purpose: &str) -> u64 {
        Stream::new(self.seed).named(purpose).key()
    }

    pub fn split_spec(&self, split: Split) -> SplitSpec {
        match split {
            Split::Train => self.splits.train,
            Split::Val => self.splits.val,
            Split::Test => self.splits.test,
        }
    }

    pub fn world_for(&self, split: Split) -> WorldConfig {
        let spec = self.split_spec(split);
        WorldConfig {
            n_scenes: spec.n_scenes,
            night_fraction: spec.night_fraction,
            seed: self.derived_seed(&format!("world-{}", split.name())),
            ..self.world.clone()
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            seed: self.derived_seed("radar-train"),
            ..self.radar_train.clone()
        }
    }

    pub fn boost_config(&self) -> BoostConfig {
        BoostConfig {
            seed: self.derived_seed("boost"),
            ..self.boost.clone()
        }
    }

    pub fn digest(&self) -> Result<String> {
        crate::store::config_digest(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.arch(), Arch::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let err = RunConfig::from_json(r#"{"fusion": {"t_fusee": 0.4}}"#).unwrap_err();
        assert!(err.to_string().contains("t_fusee"), "{err}");
        assert!(RunConfig::from_json(r#"{"world": {"seed": 3}}"#).is_err());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = RunConfig::from_json(r#"{"fusion": {"t_fuse": 1.5}}"#).unwrap_err();
        assert!(err.to_string().contains("t_fuse"), "{err}");
        let err =
            RunConfig::from_json(r#"{"splits": {"test": {"n_scenes": 5, "night_fraction": 2.0}}}"#)
                .unwrap_err();
        assert!(
            err.to_string().contains("splits.test.night_fraction"),
            "{err}"
        );
        let err =
            RunConfig::from_json(r#"{"splits": {"val": {"n_scenes": 0, "night_fraction": 0.1}}}"#)
                .unwrap_err();
        assert!(err.to_string().contains("empty split"), "{err}");
        assert!(RunConfig::from_json(
            r#"{"grid": {"width_px": 1600, "height_px": 900, "n_slices": 100}}"#
        )
        .is_err());
    }

    #[test]
    fn seeds_derive_from_run_seed() {
        let a = RunConfig::default();
        let b = RunConfig {
            seed: 2,
            ..RunConfig::default()
        };
        assert_ne!(
            a.world_for(Split::Train).seed,
            a.world_for(Split::Test).seed
        );
        assert_ne!(
            a.world_for(Split::Train).seed,
            b.world_for(Split::Train).seed
        );
        assert_ne!(a.train_schedule().seed, b.train_schedule().seed);
        assert_ne!(a.boost_config().seed, b.boost_config().seed);
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
        assert_eq!(a.world_for(Split::Test).night_fraction, 1.0);
    }
}
