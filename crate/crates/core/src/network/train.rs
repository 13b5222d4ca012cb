//! Patch-based SGD training of a cascade under deep supervision.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cascade::CascadeModel;
use crate::dataio::PatchSet;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::optim::{sgd_momentum_step, LrSchedule, OptimizerState};
use crate::resample::make_supervision_pyramid;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    /// Adjustable clipping threshold: gradients are clamped to `±clip / lr`.
    pub clip_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 64,
            schedule: LrSchedule::FROM_SCRATCH,
            momentum: 0.9,
            clip_threshold: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::InvalidArgument("clip threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

/// One training example in network units: LR input and per-stage targets, coarsest first.
#[derive(Debug, Clone)]
pub struct TrainingSample<T> {
    pub lr: DepthMap<T>,
    pub pyramid: Vec<DepthMap<T>>,
}

/// Converts patches to the model's scalar type and value scale and builds their pyramids.
pub fn prepare_samples<T: Scalar>(model: &CascadeModel<T>, patches: &PatchSet) -> Result<Vec<TrainingSample<T>>> {
    if patches.factor != model.total_factor() {
        return Err(Error::InvalidArgument(format!(
            "patch set degraded by x{} but model upsamples x{}",
            patches.factor,
            model.total_factor()
        )));
    }
    let scale = 2f64.powi(-model.config().value_shift);
    let factors = model.config().stage_factors.clone();
    patches
        .patches
        .par_iter()
        .map(|p| {
            let lr = p.lr.cast::<T>().map(|v| v * T::of(scale));
            let hr = p.hr.cast::<T>().map(|v| v * T::of(scale));
            Ok(TrainingSample {
                lr,
                pyramid: make_supervision_pyramid(&hr, &factors)?,
            })
        })
        .collect()
}

/// Trains `model` in place; see [`train_samples`].
pub fn train<T: Scalar>(model: &mut CascadeModel<T>, patches: &PatchSet, config: &TrainConfig) -> Result<TrainReport> {
    let samples = prepare_samples(model, patches)?;
    train_samples(model, &samples, config)
}

/// Mini-batch SGD with momentum over shuffled samples.
///
/// Per-sample gradients are computed in parallel but summed in batch order, so the loss trace
/// depends only on the seed, not on the worker count.
pub fn train_samples<T: Scalar>(
    model: &mut CascadeModel<T>,
    samples: &[TrainingSample<T>],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let sizes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    let mut state = OptimizerState::new(
        &sizes,
        T::of(config.schedule.initial),
        T::of(config.momentum),
        T::of(config.clip_threshold),
    )?;
    let names = model.param_names();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport {
        loss_trace: Vec::with_capacity(config.epochs),
        steps: 0,
    };

    for epoch in 0..config.epochs {
        state.learning_rate = T::of(config.schedule.rate_at(epoch, config.epochs));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let results = chunk
                .par_iter()
                .map(|&i| model.loss_and_grads(&samples[i].lr, &samples[i].pyramid))
                .collect::<Result<Vec<_>>>()?;

            let inv = T::one() / T::of(chunk.len() as f64);
            let mut loss = T::zero();
            let mut grads: Vec<Vec<T>> = sizes.iter().map(|&n| vec![T::zero(); n]).collect();
            for (l, g) in results {
                loss += l;
                for (acc, part) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.iter_mut().zip(part) {
                        *a += b;
                    }
                }
            }
            loss *= inv;
            for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
                *v *= inv;
            }

            if !loss.is_finite() {
                let layer = grads
                    .iter()
                    .position(|g| g.iter().any(|v| !v.is_finite()))
                    .map_or("<loss only>", |i| names[i].as_str());
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {batch}, first non-finite gradient in {layer}"
                )));
            }

            let mut params = model.param_slices_mut();
            sgd_momentum_step(&mut params, &mut grads, &mut state)?;
            epoch_loss += loss.as_f64();
            batches += 1;
            report.steps += 1;
        }
        let mean = epoch_loss / batches as f64;
        log::info!(
            "epoch {}/{} lr {:.1e} loss {:.6e}",
            epoch + 1,
            config.epochs,
            state.learning_rate.as_f64(),
            mean
        );
        report.loss_trace.push(mean);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::ConvLayer;
    use crate::network::{DcnnUnit, DcnnUnitConfig, ModelConfig, NvsStage};

    fn one_layer_config() -> ModelConfig {
        ModelConfig {
            stage_factors: vec![2],
            unit: DcnnUnitConfig {
                num_layers: 1,
                channels: 1,
                kernel: 3,
                residual: true,
                center_input: false,
            },
            msf: None,
            value_shift: 0,
        }
    }

    fn sample() -> TrainingSample<f64> {
        let lr = DepthMap::from_fn(3, 3, |y, x| (y * 3 + x) as f64 * 0.1);
        let hr = DepthMap::from_fn(6, 6, |y, x| ((y + 2 * x) % 5) as f64 * 0.2);
        TrainingSample { lr, pyramid: vec![hr] }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = CascadeModel::<f64>::init(one_layer_config(), &mut rng).unwrap();
        let before = model.clone();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let report = train_samples(&mut model, &[sample()], &cfg).unwrap();
        assert!(report.loss_trace.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn single_step_matches_hand_update() {
        // One linear 3x3 layer per view, all weights zero: every view equals the input, so the
        // loss gradient can be written out directly.
        let mut model = CascadeModel::<f64>::zeros(one_layer_config()).unwrap();
        let s = sample();
        let (lr, hr) = (&s.lr, &s.pyramid[0]);
        let n = hr.len() as f64;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            schedule: LrSchedule { initial: 0.05, gamma: 0.1, levels: 1 },
            momentum: 0.9,
            clip_threshold: 100.0,
            seed: 0,
        };
        let report = train_samples(&mut model, &[s.clone()], &cfg).unwrap();
        assert_eq!(report.steps, 1);

        for (u, unit) in model.stages()[0].units().iter().enumerate() {
            let (a, b) = (u / 2, u % 2);
            // residual e(i,j) = lr(i,j) - hr(2i+a, 2j+b), dL/dout = 2e/n
            let e = |i: usize, j: usize| lr.get(i, j) - hr.get(2 * i + a, 2 * j + b);
            let layer: &ConvLayer<f64> = &unit.layers()[0];
            let mut gb = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    gb += 2.0 * e(i, j) / n;
                }
            }
            assert!((layer.bias[0] + 0.05 * gb).abs() < 1e-15);
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut gw = 0.0;
                    for i in 0..3isize {
                        for j in 0..3isize {
                            let (yy, xx) = (i + ky as isize - 1, j + kx as isize - 1);
                            if (0..3).contains(&yy) && (0..3).contains(&xx) {
                                gw += 2.0 * e(i as usize, j as usize) / n * lr.get(yy as usize, xx as usize);
                            }
                        }
                    }
                    let got = layer.weights.get(0, 0, ky, kx);
                    assert!((got + 0.05 * gw).abs() < 1e-15, "{got} vs {}", -0.05 * gw);
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig {
            unit: DcnnUnitConfig { num_layers: 2, channels: 3, kernel: 3, residual: true, center_input: true },
            ..one_layer_config()
        };
        let base = CascadeModel::<f64>::init(cfg, &mut rng).unwrap();
        let samples: Vec<_> = (0..5)
            .map(|k| {
                let lr = DepthMap::from_fn(3, 3, |y, x| ((y * 7 + x * 3 + k) % 4) as f64 * 0.25);
                let hr = lr.nearest_upsample(2).map(|v| v * 0.9);
                TrainingSample { lr, pyramid: vec![hr] }
            })
            .collect();
        let tc = TrainConfig { epochs: 3, batch_size: 2, schedule: LrSchedule { initial: 0.01, gamma: 0.1, levels: 2 }, ..TrainConfig::default() };
        let (mut a, mut b) = (base.clone(), base);
        let ra = train_samples(&mut a, &samples, &tc).unwrap();
        let rb = train_samples(&mut b, &samples, &tc).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn diverging_run_reports_location() {
        let mut model = CascadeModel::<f64>::zeros(one_layer_config()).unwrap();
        let mut s = sample();
        s.pyramid[0].values_mut()[0] = f64::INFINITY;
        let cfg = TrainConfig { epochs: 1, batch_size: 1, ..TrainConfig::default() };
        let err = train_samples(&mut model, &[s], &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("epoch 0, batch 0")), "{err}");
    }

    #[test]
    fn stage_units_must_match() {
        let unit = DcnnUnit::<f64>::zeros(one_layer_config().unit, 1).unwrap();
        assert!(NvsStage::new(2, vec![unit.clone(); 3]).is_err());
        assert!(NvsStage::new(2, vec![unit; 4]).is_ok());
    }
}
