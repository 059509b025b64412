//! 1D radar segmentation: slice tensor assembly, the encoder-decoder
//! network, its weighted cross-entropy objective, training, and slice
//! bundle extraction.

mod net;
mod train;

pub use net::{Arch, ForwardCache, Mode, NetworkWeights, Tensor};
pub use train::{input_scale, train, EpochStat, Phase, TrainOutcome, TrainSchedule};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageGrid;

/// Number of per-point features stored in the input tensor.
pub const N_FEATURES: usize = 4;

/// A radar reflection already projected into the camera image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarPoint {
    pub range_m: f64,
    pub proj_height_px: f64,
    pub v_lat: f64,
    pub v_long: f64,
    pub column_px: f64,
}

impl RadarPoint {
    fn features(&self) -> [f64; N_FEATURES] {
        [self.range_m, self.proj_height_px, self.v_lat, self.v_long]
    }
}

/// Slices x time steps x features, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarTensor {
    n_slices: usize,
    n_steps: usize,
    n_features: usize,
    data: Vec<f64>,
}

impl RadarTensor {
    pub fn zeros(n_slices: usize, n_steps: usize, n_features: usize) -> Self {
        Self {
            n_slices,
            n_steps,
            n_features,
            data: vec![0.0; n_slices * n_steps * n_features],
        }
    }

    pub fn from_vec(
        n_slices: usize,
        n_steps: usize,
        n_features: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != n_slices * n_steps * n_features {
            return Err(Error::shape(
                "radar tensor",
                format!("{n_slices}x{n_steps}x{n_features}"),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(
                "radar tensor holds non-finite values".into(),
            ));
        }
        Ok(Self {
            n_slices,
            n_steps,
            n_features,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_slices, self.n_steps, self.n_features)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, slice: usize, step: usize) -> usize {
        (slice * self.n_steps + step) * self.n_features
    }

    /// Features at 0-based slice and time step.
    pub fn at(&self, slice: usize, step: usize) -> &[f64] {
        let o = self.offset(slice, step);
        &self.data[o..o + self.n_features]
    }

    pub fn at_mut(&mut self, slice: usize, step: usize) -> &mut [f64] {
        let o = self.offset(slice, step);
        &mut self.data[o..o + self.n_features]
    }

    /// Channel-major view used by the network: channel `t * n_f + f`, position `s`.
    pub(crate) fn to_channels(&self) -> Vec<f64> {
        let ch = self.n_steps * self.n_features;
        let mut out = vec![0.0; ch * self.n_slices];
        for s in 0..self.n_slices {
            for t in 0..self.n_steps {
                for (f, &v) in self.at(s, t).iter().enumerate() {
                    out[(t * self.n_features + f) * self.n_slices + s] = v;
                }
            }
        }
        out
    }
}

/// Assembles the slice tensor from `n_t` frames ordered oldest to current.
/// Each slice keeps the nearest point of each frame; empty slices stay zero.
pub fn build_input_tensor(frames: &[Vec<RadarPoint>], grid: &ImageGrid) -> RadarTensor {
    let mut x = RadarTensor::zeros(grid.n_slices, frames.len(), N_FEATURES);
    for (t, frame) in frames.iter().enumerate() {
        let mut nearest: Vec<Option<&RadarPoint>> = vec![None; grid.n_slices];
        for p in frame {
            let Some(s) = grid.slice_of_column(p.column_px) else {
                continue;
            };
            let slot = &mut nearest[s - 1];
            if slot.map_or(true, |q| p.range_m < q.range_m) {
                *slot = Some(p);
            }
        }
        for (s, p) in nearest.iter().enumerate() {
            if let Some(p) = p {
                x.at_mut(s, t).copy_from_slice(&p.features());
            }
        }
    }
    x
}

/// Per-slice occupancy probabilities, each strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SliceProbs(pub Vec<f64>);

impl SliceProbs {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if let Some(v) = y.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Domain(format!(
                "slice probability {v} outside (0, 1)"
            )));
        }
        Ok(Self(y))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Probability of 1-based slice `s`.
    pub fn get(&self, s: usize) -> f64 {
        self.0[s - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Inclusive, 1-based run of neighbouring slices read as one object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceBundle {
    pub first: usize,
    pub last: usize,
}

pub fn extract_bundles(y: &SliceProbs, t_g: f64) -> Vec<SliceBundle> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &p) in y.as_slice().iter().enumerate() {
        match (p >= t_g, start) {
            (true, None) => start = Some(i + 1),
            (false, Some(first)) => {
                out.push(SliceBundle { first, last: i });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(first) = start {
        out.push(SliceBundle {
            first,
            last: y.len(),
        });
    }
    out
}

fn check_target(t: &[u8], y: &[f64]) -> Result<()> {
    if t.len() != y.len() {
        return Err(Error::shape(
            "loss",
            format!("{} targets", y.len()),
            t.len(),
        ));
    }
    if let Some(v) = y.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::Domain(format!("probability {v} outside (0, 1)")));
    }
    Ok(())
}

/// Weighted binary cross-entropy summed over slices; `alpha` scales only
/// the occupied-slice term.
pub fn loss(t: &[u8], y: &[f64], alpha: f64) -> Result<f64> {
    check_target(t, y)?;
    Ok(t.iter()
        .zip(y)
        .map(|(&t, &y)| {
            let t = f64::from(t);
            -alpha * t * y.ln() - (1.0 - t) * (1.0 - y).ln()
        })
        .sum())
}

/// Derivative of [`loss`] with respect to the pre-sigmoid logits.
pub fn loss_grad_logits(t: &[u8], y: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_target(t, y)?;
    Ok(t.iter()
        .zip(y)
        .map(|(&t, &y)| {
            let t = f64::from(t);
            -alpha * t * (1.0 - y) + (1.0 - t) * y
        })
        .collect())
}
