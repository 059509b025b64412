use serde::{Deserialize, Serialize};

use super::net::{Arch, Mode, NetworkWeights};
use super::RadarTensor;
use crate::error::{Error, Result};
use crate::rng::Stream;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub alpha: f64,
    /// Derived from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            phases: vec![
                Phase {
                    epochs: 20,
                    learning_rate: 1e-3,
                },
                Phase {
                    epochs: 10,
                    learning_rate: 1e-4,
                },
                Phase {
                    epochs: 10,
                    learning_rate: 1e-5,
                },
            ],
            batch_size: 128,
            weight_decay: 3e-4,
            alpha: 4.0,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config(
                "train schedule needs at least one phase".into(),
            ));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.epochs == 0 {
                return Err(Error::Config(format!("phase {i}: epochs must be positive")));
            }
            if !(p.learning_rate >= 0.0) {
                return Err(Error::Config(format!(
                    "phase {i}: learning_rate must be non-negative"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub phase: usize,
    pub learning_rate: f64,
    /// Mean per-tensor loss over the epoch, without the weight-decay term.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: NetworkWeights,
    pub history: Vec<EpochStat>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(w: &NetworkWeights) -> Self {
        let zeros: Vec<Vec<f64>> = w
            .tensors
            .iter()
            .map(|t| vec![0.0; t.values.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn apply(&mut self, w: &mut NetworkWeights, grad: &NetworkWeights, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for (i, (t, g)) in w.tensors.iter_mut().zip(&grad.tensors).enumerate() {
            if !NetworkWeights::is_trainable(i) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..t.values.len() {
                let gk = g.values[k];
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                t.values[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Per-feature scale 1/RMS over occupied (slice, step) cells, so empty
/// cells stay exactly zero after scaling.
pub fn input_scale(dataset: &[(RadarTensor, Vec<u8>)], n_features: usize) -> Vec<f64> {
    let mut sum_sq = vec![0.0; n_features];
    let mut count = 0usize;
    for (x, _) in dataset {
        let (n_s, n_t, _) = x.shape();
        for s in 0..n_s {
            for t in 0..n_t {
                let cell = x.at(s, t);
                if cell.iter().any(|&v| v != 0.0) {
                    count += 1;
                    for (acc, v) in sum_sq.iter_mut().zip(cell) {
                        *acc += v * v;
                    }
                }
            }
        }
    }
    sum_sq
        .iter()
        .map(|&ss| {
            let rms = (ss / count.max(1) as f64).sqrt();
            if rms > 0.0 {
                1.0 / rms
            } else {
                1.0
            }
        })
        .collect()
}

/// Trains from a fresh initialisation seeded by `schedule.seed`.
pub fn train(
    dataset: &[(RadarTensor, Vec<u8>)],
    arch: Arch,
    schedule: &TrainSchedule,
    mut on_epoch: impl FnMut(&EpochStat),
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("radar training set is empty".into()));
    }
    let mut weights = NetworkWeights::init(arch, schedule.seed)?;
    weights.set_input_scale(&input_scale(dataset, arch.n_features))?;
    let mut adam = Adam::new(&weights);
    let shuffle_root = Stream::new(schedule.seed).named("radarnet-shuffle");
    let mut history = Vec::with_capacity(schedule.total_epochs());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch = 0;
    for (phase_idx, phase) in schedule.phases.iter().enumerate() {
        for _ in 0..phase.epochs {
            shuffle_root.child(epoch as u64).shuffle(&mut order);
            let mut total = 0.0;
            for batch in order.chunks(schedule.batch_size) {
                let xs: Vec<&RadarTensor> = batch.iter().map(|&i| &dataset[i].0).collect();
                let ts: Vec<&[u8]> = batch.iter().map(|&i| dataset[i].1.as_slice()).collect();
                let (_, cache) = weights.forward_batch(&xs, Mode::Train)?;
                let diverged = || Error::Numeric(format!("training diverged at epoch {epoch}"));
                if cache.probs().iter().flatten().any(|p| !p.is_finite()) {
                    return Err(diverged());
                }
                let data_loss = weights.objective(cache.probs(), &ts, schedule.alpha, 0.0)?;
                if !data_loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite training loss at epoch {epoch}"
                    )));
                }
                total += data_loss * batch.len() as f64;
                let grad = weights.backward(&cache, &ts, schedule.alpha, schedule.weight_decay)?;
                adam.apply(&mut weights, &grad, phase.learning_rate);
                weights.update_running_stats(&cache);
            }
            let stat = EpochStat {
                epoch,
                phase: phase_idx,
                learning_rate: phase.learning_rate,
                loss: total / dataset.len() as f64,
            };
            on_epoch(&stat);
            history.push(stat);
            epoch += 1;
        }
    }
    weights
        .validate()
        .map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(TrainOutcome { weights, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Arch {
        Arch {
            n_slices: 16,
            n_steps: 3,
            n_features: 4,
            width: 4,
        }
    }

    /// Occupancy equals "slice has any radar return".
    pub(crate) fn separable_task(arch: &Arch, n: usize, seed: u64) -> Vec<(RadarTensor, Vec<u8>)> {
        let mut rng = Stream::new(seed).named("separable");
        (0..n)
            .map(|_| {
                let mut x = RadarTensor::zeros(arch.n_slices, arch.n_steps, arch.n_features);
                let mut t = vec![0u8; arch.n_slices];
                for s in 0..arch.n_slices {
                    if rng.bernoulli(0.2) {
                        t[s] = 1;
                        let step = arch.n_steps - 1;
                        let cell = x.at_mut(s, step);
                        cell[0] = rng.uniform_range(5.0, 100.0);
                        cell[1] = rng.uniform_range(440.0, 540.0);
                        cell[2] = rng.gaussian(0.0, 1.0);
                        cell[3] = rng.gaussian(0.0, 8.0);
                    }
                }
                (x, t)
            })
            .collect()
    }

    fn schedule(epochs: usize, lr: f64) -> TrainSchedule {
        TrainSchedule {
            phases: vec![Phase {
                epochs,
                learning_rate: lr,
            }],
            batch_size: 16,
            weight_decay: 3e-4,
            alpha: 4.0,
            seed: 3,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let arch = small_arch();
        let data = separable_task(&arch, 40, 1);
        let out = train(&data, arch, &schedule(2, 0.0), |_| {}).unwrap();
        let mut init = NetworkWeights::init(arch, 3).unwrap();
        init.set_input_scale(&input_scale(&data, 4)).unwrap();
        for (i, (a, b)) in out.weights.tensors.iter().zip(&init.tensors).enumerate() {
            if NetworkWeights::is_trainable(i) {
                assert_eq!(a, b);
            }
        }
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let arch = small_arch();
        let data = separable_task(&arch, 40, 2);
        let a = train(&data, arch, &schedule(3, 1e-3), |_| {}).unwrap();
        let b = train(&data, arch, &schedule(3, 1e-3), |_| {}).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn learns_separable_occupancy() {
        let arch = small_arch();
        let data = separable_task(&arch, 300, 4);
        let out = train(&data, arch, &schedule(20, 1e-3), |_| {}).unwrap();
        let xs: Vec<RadarTensor> = data.iter().map(|d| d.0.clone()).collect();
        let preds = out.weights.predict_many(&xs).unwrap();
        let (mut hit, mut total) = (0, 0);
        for (p, (_, t)) in preds.iter().zip(&data) {
            for (y, &t) in p.as_slice().iter().zip(t) {
                hit += ((*y >= 0.5) == (t == 1)) as usize;
                total += 1;
            }
        }
        let acc = hit as f64 / total as f64;
        assert!(acc >= 0.95, "accuracy {acc}");
        let first = out.history.first().unwrap().loss;
        let last = out.history.last().unwrap().loss;
        assert!(last < first);
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainSchedule::default().validate().is_ok());
        assert_eq!(TrainSchedule::default().total_epochs(), 40);
        let mut s = TrainSchedule::default();
        s.batch_size = 0;
        assert!(s.validate().is_err());
        let mut s = TrainSchedule::default();
        s.phases[1].epochs = 0;
        assert!(s.validate().is_err());
        let mut s = TrainSchedule::default();
        s.alpha = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(train(&[], small_arch(), &schedule(1, 1e-3), |_| {}).is_err());
    }
}
