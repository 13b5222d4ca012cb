//! Novel-view-synthesis stages, the deeply supervised cascade and multi-scale fusion.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::unit::{DcnnUnit, DcnnUnitConfig, UnitTrace};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::loss::mse_loss;
use crate::reorg::{decompose, reorganize, ViewGrid};
use crate::resample::Resampler;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Upsampling factors the cascade can be configured for.
pub const SUPPORTED_FACTORS: [usize; 7] = [2, 3, 4, 5, 6, 8, 16];

/// Per-stage factors for an overall factor, smallest first.
pub fn stage_factors_for(total: usize) -> Result<Vec<usize>> {
    Ok(match total {
        2 => vec![2],
        3 => vec![3],
        4 => vec![2, 2],
        5 => vec![5],
        6 => vec![2, 3],
        8 => vec![2, 2, 2],
        16 => vec![2, 2, 2, 2],
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unsupported upsampling factor {total}; expected one of {SUPPORTED_FACTORS:?}"
            )))
        }
    })
}

/// Architecture of a cascade, persisted in model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stage_factors: Vec<usize>,
    pub unit: DcnnUnitConfig,
    pub msf: Option<DcnnUnitConfig>,
    /// Depth values are multiplied by `2^-value_shift` before entering the network and by
    /// `2^value_shift` on the way out; powers of two keep the round trip exact.
    #[serde(default)]
    pub value_shift: i32,
}

impl ModelConfig {
    /// Full-sized architecture for an overall factor, with fusion enabled for multi-stage cascades.
    pub fn standard(total_factor: usize) -> Result<Self> {
        let stage_factors = stage_factors_for(total_factor)?;
        let msf = (stage_factors.len() > 1).then_some(DcnnUnitConfig::FUSION);
        Ok(ModelConfig {
            stage_factors,
            unit: DcnnUnitConfig::SUB_TASK,
            msf,
            value_shift: 8,
        })
    }

    pub fn total_factor(&self) -> usize {
        self.stage_factors.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_factors.is_empty() {
            return Err(Error::InvalidArgument("a cascade needs at least one stage".into()));
        }
        if let Some(&f) = self.stage_factors.iter().find(|&&f| f < 2) {
            return Err(Error::InvalidArgument(format!("stage factor {f} < 2")));
        }
        self.unit.validate()?;
        if !self.unit.residual {
            return Err(Error::InvalidArgument("sub-task units must be residual".into()));
        }
        if let Some(msf) = &self.msf {
            msf.validate()?;
            if msf.kernel != 5 {
                return Err(Error::InvalidArgument("the fusion unit uses 5x5 kernels".into()));
            }
        }
        if !(-60..=60).contains(&self.value_shift) {
            return Err(Error::InvalidArgument(format!("value shift {} out of range", self.value_shift)));
        }
        Ok(())
    }
}

/// One upsampling stage: `r * r` sub-task units whose outputs are re-organized.
#[derive(Debug, Clone, PartialEq)]
pub struct NvsStage<T> {
    factor: usize,
    units: Vec<DcnnUnit<T>>,
}

/// Forward caches of every unit in a stage.
#[derive(Debug, Clone)]
pub struct StageTrace<T> {
    units: Vec<UnitTrace<T>>,
}

impl<T: Scalar> NvsStage<T> {
    pub fn new(factor: usize, units: Vec<DcnnUnit<T>>) -> Result<Self> {
        if factor < 2 || units.len() != factor * factor {
            return Err(Error::Shape(format!(
                "stage with factor {factor} needs {} units, got {}",
                factor * factor,
                units.len()
            )));
        }
        let cfg = units[0].config();
        if units.iter().any(|u| u.config() != cfg || u.in_channels() != 1) {
            return Err(Error::Shape("stage units must share one single-input config".into()));
        }
        Ok(NvsStage { factor, units })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Units ordered (1,1), (1,2), ..., (r,r).
    pub fn units(&self) -> &[DcnnUnit<T>] {
        &self.units
    }

    pub fn units_mut(&mut self) -> &mut [DcnnUnit<T>] {
        &mut self.units
    }

    /// Runs every unit on `lr` and re-organizes the views into an `(rH, rW)` map.
    pub fn forward(&self, lr: &DepthMap<T>) -> Result<(DepthMap<T>, ViewGrid<T>)> {
        let x = lr.to_tensor();
        let views = self
            .units
            .par_iter()
            .map(|u| DepthMap::from_tensor(&u.forward(&x)?))
            .collect::<Result<Vec<_>>>()?;
        let grid = ViewGrid::new(self.factor, views)?;
        Ok((reorganize(&grid), grid))
    }

    pub fn forward_traced(&self, lr: &DepthMap<T>) -> Result<(DepthMap<T>, StageTrace<T>)> {
        let x = lr.to_tensor();
        let units = self
            .units
            .par_iter()
            .map(|u| u.forward_traced(&x))
            .collect::<Result<Vec<_>>>()?;
        let views = units
            .iter()
            .map(|t| DepthMap::from_tensor(t.output()))
            .collect::<Result<Vec<_>>>()?;
        let hr = reorganize(&ViewGrid::new(self.factor, views)?);
        Ok((hr, StageTrace { units }))
    }

    /// Backpropagates the gradient of the stage output; returns the gradient with respect to
    /// the stage input and appends parameter gradients in unit order.
    pub fn backward(&self, trace: &StageTrace<T>, grad_hr: &DepthMap<T>, param_grads: &mut Vec<Vec<T>>) -> Result<DepthMap<T>> {
        let grid = decompose(grad_hr, self.factor)?;
        let per_unit = self
            .units
            .par_iter()
            .zip(trace.units.par_iter())
            .zip(grid.views().par_iter())
            .map(|((unit, t), g)| {
                let mut grads = Vec::new();
                let gin = unit.backward(t, &g.to_tensor(), &mut grads)?;
                Ok((gin, grads))
            })
            .collect::<Result<Vec<_>>>()?;
        let (vh, vw) = grid.view_dims();
        let mut gin = vec![T::zero(); vh * vw];
        for (g, grads) in per_unit {
            for (a, &b) in gin.iter_mut().zip(g.data()) {
                *a += b;
            }
            param_grads.extend(grads);
        }
        DepthMap::new(vh, vw, gin)
    }

    fn param_slices(&self) -> Vec<&[T]> {
        self.units.iter().flat_map(|u| u.param_slices()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.units.iter_mut().flat_map(|u| u.param_slices_mut()).collect()
    }
}

/// The full model: ordered stages and an optional fusion unit.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel<T> {
    config: ModelConfig,
    stages: Vec<NvsStage<T>>,
    msf: Option<DcnnUnit<T>>,
}

/// Everything the backward pass needs from one training forward pass.
#[derive(Debug, Clone)]
pub struct CascadeTrace<T> {
    stage_inputs: Vec<DepthMap<T>>,
    stage_traces: Vec<StageTrace<T>>,
    pub outputs: Vec<DepthMap<T>>,
    fusion: Option<FusionTrace<T>>,
}

#[derive(Debug, Clone)]
struct FusionTrace<T> {
    resamplers: Vec<Option<Resampler<T>>>,
    unit: UnitTrace<T>,
    output: DepthMap<T>,
}

impl<T: Scalar> CascadeModel<T> {
    /// All weights and biases zero: every sub-task unit returns its input.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let stages = config
            .stage_factors
            .iter()
            .map(|&r| {
                let units = (0..r * r).map(|_| DcnnUnit::zeros(config.unit, 1)).collect::<Result<_>>()?;
                NvsStage::new(r, units)
            })
            .collect::<Result<_>>()?;
        let msf = config
            .msf
            .map(|c| DcnnUnit::zeros(c, config.stage_factors.len()))
            .transpose()?;
        Ok(CascadeModel { config, stages, msf })
    }

    /// He-normal initialization of every unit; fusion starts at zero so it begins as the identity.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let unit_cfg = model.config.unit;
        for stage in &mut model.stages {
            for unit in &mut stage.units {
                *unit = DcnnUnit::he_normal(unit_cfg, 1, rng)?;
            }
        }
        if let (Some(cfg), Some(msf)) = (model.config.msf, model.msf.as_mut()) {
            let mut fresh = DcnnUnit::he_normal(cfg, model.config.stage_factors.len(), rng)?;
            // Zero the last layer so fusion starts as a pass-through of the final stage.
            if let Some(last) = fresh.layers_mut().last_mut() {
                last.weights.scale(T::zero());
            }
            *msf = fresh;
        }
        Ok(model)
    }

    pub fn from_parts(config: ModelConfig, stages: Vec<NvsStage<T>>, msf: Option<DcnnUnit<T>>) -> Result<Self> {
        config.validate()?;
        let factors: Vec<usize> = stages.iter().map(|s| s.factor).collect();
        if factors != config.stage_factors {
            return Err(Error::Shape(format!(
                "stage factors {factors:?} disagree with config {:?}",
                config.stage_factors
            )));
        }
        if stages.iter().any(|s| s.units[0].config() != config.unit) {
            return Err(Error::Shape("stage units disagree with config".into()));
        }
        match (&config.msf, &msf) {
            (None, None) => {}
            (Some(c), Some(u)) if u.config() == *c && u.in_channels() == stages.len() => {}
            _ => return Err(Error::Shape("fusion unit disagrees with config".into())),
        }
        Ok(CascadeModel { config, stages, msf })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stages(&self) -> &[NvsStage<T>] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [NvsStage<T>] {
        &mut self.stages
    }

    pub fn msf_unit(&self) -> Option<&DcnnUnit<T>> {
        self.msf.as_ref()
    }

    pub fn msf_unit_mut(&mut self) -> Option<&mut DcnnUnit<T>> {
        self.msf.as_mut()
    }

    pub fn total_factor(&self) -> usize {
        self.config.total_factor()
    }

    /// Copies the first stage from a trained single-stage model with the same unit config.
    pub fn warm_start_first_stage(&mut self, from: &CascadeModel<T>) -> Result<()> {
        let src = from
            .stages
            .first()
            .ok_or_else(|| Error::InvalidArgument("source model has no stages".into()))?;
        let dst = &mut self.stages[0];
        if src.factor != dst.factor || src.units[0].config() != dst.units[0].config() {
            return Err(Error::Shape("warm-start source stage does not match the first stage".into()));
        }
        *dst = src.clone();
        Ok(())
    }

    /// Runs the stages in order; returns every stage output, coarsest first.
    pub fn cascade_forward(&self, lr: &DepthMap<T>) -> Result<Vec<DepthMap<T>>> {
        lr.ensure_finite("cascade input")?;
        let mut outputs: Vec<DepthMap<T>> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (hr, _) = stage.forward(outputs.last().unwrap_or(lr))?;
            outputs.push(hr);
        }
        Ok(outputs)
    }

    /// Upsamples every stage output to the final resolution, stacks them coarsest first and runs
    /// the fusion unit, whose residual is the final stage output.
    pub fn msf_forward(&self, stage_outputs: &[DepthMap<T>]) -> Result<DepthMap<T>> {
        let unit = self
            .msf
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no multi-scale fusion unit".into()))?;
        let (input, _) = self.fusion_input(stage_outputs)?;
        DepthMap::from_tensor(&unit.forward(&input)?)
    }

    /// End-to-end super-resolution in the caller's depth units.
    pub fn infer(&self, lr: &DepthMap<T>, use_msf: bool) -> Result<DepthMap<T>> {
        let scale_in = T::of(2f64.powi(-self.config.value_shift));
        let scale_out = T::of(2f64.powi(self.config.value_shift));
        let x = lr.map(|v| v * scale_in);
        let outputs = self.cascade_forward(&x)?;
        let y = if use_msf && self.msf.is_some() {
            self.msf_forward(&outputs)?
        } else {
            outputs.into_iter().last().expect("at least one stage")
        };
        Ok(y.map(|v| v * scale_out))
    }

    /// Forward pass keeping every activation, in network (scaled) units.
    pub fn forward_traced(&self, lr: &DepthMap<T>) -> Result<CascadeTrace<T>> {
        let mut stage_inputs = Vec::with_capacity(self.stages.len());
        let mut stage_traces = Vec::with_capacity(self.stages.len());
        let mut outputs: Vec<DepthMap<T>> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let input = outputs.last().unwrap_or(lr).clone();
            let (hr, trace) = stage.forward_traced(&input)?;
            stage_inputs.push(input);
            stage_traces.push(trace);
            outputs.push(hr);
        }
        let fusion = match &self.msf {
            Some(unit) => {
                let (input, resamplers) = self.fusion_input(&outputs)?;
                let trace = unit.forward_traced(&input)?;
                let output = DepthMap::from_tensor(trace.output())?;
                Some(FusionTrace {
                    resamplers,
                    unit: trace,
                    output,
                })
            }
            None => None,
        };
        Ok(CascadeTrace {
            stage_inputs,
            stage_traces,
            outputs,
            fusion,
        })
    }

    /// Backpropagates per-stage output gradients (and the fusion-output gradient, if the model
    /// has a fusion unit) into flat parameter gradients ordered as [`CascadeModel::param_slices`].
    pub fn backward(
        &self,
        trace: &CascadeTrace<T>,
        stage_grads: &[DepthMap<T>],
        fusion_grad: Option<&DepthMap<T>>,
    ) -> Result<Vec<Vec<T>>> {
        if stage_grads.len() != self.stages.len() {
            return Err(Error::Shape(format!(
                "{} stage gradients for {} stages",
                stage_grads.len(),
                self.stages.len()
            )));
        }
        let mut grads: Vec<DepthMap<T>> = stage_grads.to_vec();
        let mut msf_grads = Vec::new();
        if let (Some(unit), Some(ft), Some(g)) = (&self.msf, &trace.fusion, fusion_grad) {
            g.ensure_same_dims(&ft.output, "fusion gradient")?;
            let gin = unit.backward(&ft.unit, &g.to_tensor(), &mut msf_grads)?;
            for (k, resampler) in ft.resamplers.iter().enumerate() {
                let gk = DepthMap::from_tensor(&gin.channel(k))?;
                let back = match resampler {
                    Some(r) => r.apply_adjoint(&gk)?,
                    None => gk,
                };
                accumulate(&mut grads[k], &back)?;
            }
        } else if self.msf.is_some() {
            // Fusion unit present but unsupervised: its parameters get zero gradient.
            msf_grads = self.msf.as_ref().expect("checked").param_slices().iter().map(|s| vec![T::zero(); s.len()]).collect();
        }

        let mut per_stage: Vec<Vec<Vec<T>>> = vec![Vec::new(); self.stages.len()];
        let mut carry: Option<DepthMap<T>> = None;
        for k in (0..self.stages.len()).rev() {
            let mut g = grads[k].clone();
            g.ensure_same_dims(&trace.outputs[k], "stage gradient")?;
            if let Some(c) = &carry {
                accumulate(&mut g, c)?;
            }
            let gin = self.stages[k].backward(&trace.stage_traces[k], &g, &mut per_stage[k])?;
            carry = Some(gin);
        }
        debug_assert_eq!(trace.stage_inputs.len(), self.stages.len());
        let mut flat: Vec<Vec<T>> = per_stage.into_iter().flatten().collect();
        flat.extend(msf_grads);
        Ok(flat)
    }

    /// Training objective for one sample: deep supervision on every stage, plus the fusion
    /// output against the finest target when the model has a fusion unit.
    pub fn loss_and_grads(&self, lr: &DepthMap<T>, pyramid: &[DepthMap<T>]) -> Result<(T, Vec<Vec<T>>)> {
        let trace = self.forward_traced(lr)?;
        let (mut loss, stage_grads) = deep_supervised_loss(&trace.outputs, pyramid)?;
        let fusion_grad = match &trace.fusion {
            Some(ft) => {
                let target = pyramid.last().expect("nonempty pyramid");
                let (l, g) = mse_loss(&ft.output.to_tensor(), &target.to_tensor())?;
                loss += l;
                Some(DepthMap::from_tensor(&g)?)
            }
            None => None,
        };
        let grads = self.backward(&trace, &stage_grads, fusion_grad.as_ref())?;
        Ok((loss, grads))
    }

    /// Same objective as [`CascadeModel::loss_and_grads`] without the backward pass.
    pub fn loss(&self, lr: &DepthMap<T>, pyramid: &[DepthMap<T>]) -> Result<T> {
        let outputs = self.cascade_forward(lr)?;
        let mut loss = T::zero();
        if outputs.len() != pyramid.len() {
            return Err(Error::Shape(format!("{} outputs vs {} targets", outputs.len(), pyramid.len())));
        }
        for (o, t) in outputs.iter().zip(pyramid) {
            o.ensure_same_dims(t, "supervision target")?;
            loss += mse_loss(&o.to_tensor(), &t.to_tensor())?.0;
        }
        if self.msf.is_some() {
            let fused = self.msf_forward(&outputs)?;
            let target = pyramid.last().expect("nonempty");
            loss += mse_loss(&fused.to_tensor(), &target.to_tensor())?.0;
        }
        Ok(loss)
    }

    /// Parameter slices in canonical order: stage by stage, unit (1,1)..(r,r), layer by layer
    /// (weights then bias), then the fusion unit.
    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = self.stages.iter().flat_map(|s| s.param_slices()).collect();
        if let Some(m) = &self.msf {
            v.extend(m.param_slices());
        }
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = self.stages.iter_mut().flat_map(|s| s.param_slices_mut()).collect();
        if let Some(m) = self.msf.as_mut() {
            v.extend(m.param_slices_mut());
        }
        v
    }

    /// Human-readable names matching [`CascadeModel::param_slices`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let unit_names = |prefix: &str, unit: &DcnnUnit<T>, names: &mut Vec<String>| {
            for l in 0..unit.layers().len() {
                names.push(format!("{prefix}.layer{l}.weight"));
                names.push(format!("{prefix}.layer{l}.bias"));
            }
        };
        for (s, stage) in self.stages.iter().enumerate() {
            let r = stage.factor;
            for (u, unit) in stage.units.iter().enumerate() {
                unit_names(&format!("stage{s}.view{}_{}", u / r + 1, u % r + 1), unit, &mut names);
            }
        }
        if let Some(m) = &self.msf {
            unit_names("msf", m, &mut names);
        }
        names
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn fusion_input(&self, stage_outputs: &[DepthMap<T>]) -> Result<(Tensor<T>, Vec<Option<Resampler<T>>>)> {
        let last = stage_outputs
            .last()
            .ok_or_else(|| Error::InvalidArgument("fusion needs at least one stage output".into()))?;
        let target = last.dims();
        let mut resamplers = Vec::with_capacity(stage_outputs.len());
        let mut channels = Vec::with_capacity(stage_outputs.len());
        for out in stage_outputs {
            if out.dims() == target {
                resamplers.push(None);
                channels.push(out.to_tensor());
            } else {
                let scales = (
                    target.0 as f64 / out.height() as f64,
                    target.1 as f64 / out.width() as f64,
                );
                let r = Resampler::with_scales(out.dims(), target, scales)?;
                channels.push(r.apply(out)?.to_tensor());
                resamplers.push(Some(r));
            }
        }
        let refs: Vec<&Tensor<T>> = channels.iter().collect();
        Ok((Tensor::concat_channels(&refs)?, resamplers))
    }
}

/// Sum of per-stage mean squared errors (unit weights) and its gradient per stage output.
pub fn deep_supervised_loss<T: Scalar>(
    stage_outputs: &[DepthMap<T>],
    pyramid: &[DepthMap<T>],
) -> Result<(T, Vec<DepthMap<T>>)> {
    if stage_outputs.len() != pyramid.len() {
        return Err(Error::Shape(format!(
            "{} stage outputs vs {} supervision targets",
            stage_outputs.len(),
            pyramid.len()
        )));
    }
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(pyramid.len());
    for (o, t) in stage_outputs.iter().zip(pyramid) {
        o.ensure_same_dims(t, "supervision target")?;
        let (l, g) = mse_loss(&o.to_tensor(), &t.to_tensor())?;
        total += l;
        grads.push(DepthMap::from_tensor(&g)?);
    }
    Ok((total, grads))
}

fn accumulate<T: Scalar>(dst: &mut DepthMap<T>, src: &DepthMap<T>) -> Result<()> {
    dst.ensure_same_dims(src, "gradient accumulation")?;
    for (a, &b) in dst.values_mut().iter_mut().zip(src.values()) {
        *a += b;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(stage_factors: Vec<usize>, msf: bool) -> ModelConfig {
        ModelConfig {
            stage_factors,
            unit: DcnnUnitConfig {
                num_layers: 2,
                channels: 2,
                kernel: 3,
                residual: true,
                center_input: true,
            },
            msf: msf.then_some(DcnnUnitConfig {
                num_layers: 2,
                channels: 2,
                kernel: 5,
                residual: true,
                center_input: true,
            }),
            value_shift: 0,
        }
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DepthMap<f64> {
        DepthMap::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn factorization_table() {
        assert_eq!(stage_factors_for(8).unwrap(), vec![2, 2, 2]);
        assert_eq!(stage_factors_for(6).unwrap(), vec![2, 3]);
        assert_eq!(stage_factors_for(5).unwrap(), vec![5]);
        assert!(stage_factors_for(7).is_err());
    }

    #[test]
    fn zero_stage_is_nearest_neighbour() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CascadeModel::<f64>::zeros(tiny(vec![3], false)).unwrap();
        let lr = random_map(&mut rng, 2, 3);
        let (hr, views) = model.stages()[0].forward(&lr).unwrap();
        assert_eq!(hr, lr.nearest_upsample(3));
        assert!(views.views().iter().all(|v| v == &lr));
    }

    #[test]
    fn scalar_input_views_land_at_grid_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = CascadeModel::<f64>::init(tiny(vec![2], false), &mut rng).unwrap();
        let lr = DepthMap::filled(1, 1, 0.7);
        let (hr, views) = model.stages()[0].forward(&lr).unwrap();
        assert_eq!(hr.dims(), (2, 2));
        assert_eq!(hr.get(0, 1), views.view(1, 2).get(0, 0));
        assert_eq!(hr.get(1, 0), views.view(2, 1).get(0, 0));
    }

    #[test]
    fn cascade_sizes_and_zero_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = CascadeModel::<f64>::zeros(tiny(vec![2, 2, 2], false)).unwrap();
        let lr = random_map(&mut rng, 8, 8);
        let outs = model.cascade_forward(&lr).unwrap();
        let dims: Vec<_> = outs.iter().map(|o| o.dims()).collect();
        assert_eq!(dims, vec![(16, 16), (32, 32), (64, 64)]);
        assert_eq!(outs[2], lr.nearest_upsample(8));

        let single = CascadeModel::<f64>::zeros(tiny(vec![2], false)).unwrap();
        assert_eq!(single.cascade_forward(&lr).unwrap().len(), 1);
        let out = single.infer(&random_map(&mut rng, 3, 5), false).unwrap();
        assert_eq!(out.dims(), (6, 10));
    }

    #[test]
    fn zero_fusion_returns_final_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = CascadeModel::<f64>::init(tiny(vec![2, 2], true), &mut rng).unwrap();
        for s in model.msf_unit_mut().unwrap().param_slices_mut() {
            s.fill(0.0);
        }
        let lr = random_map(&mut rng, 3, 4);
        let outs = model.cascade_forward(&lr).unwrap();
        assert_eq!(model.msf_forward(&outs).unwrap(), outs[1]);
    }

    #[test]
    fn fusion_channel_order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = tiny(vec![2, 2], true);
        cfg.msf = Some(DcnnUnitConfig { num_layers: 2, channels: 3, kernel: 5, residual: false, center_input: true });
        let mut model = CascadeModel::<f64>::zeros(cfg).unwrap();
        *model.msf_unit_mut().unwrap() = DcnnUnit::he_normal(model.config().msf.unwrap(), 2, &mut rng).unwrap();
        let a = random_map(&mut rng, 8, 8);
        let b = random_map(&mut rng, 8, 8);
        let fwd = model.msf_forward(&[a.clone(), b.clone()]).unwrap();
        let swapped = model.msf_forward(&[b, a]).unwrap();
        assert_ne!(fwd, swapped);
    }

    #[test]
    fn missing_fusion_unit_is_usage_error() {
        let model = CascadeModel::<f64>::zeros(tiny(vec![2], false)).unwrap();
        let out = DepthMap::filled(4, 4, 1.0);
        assert!(matches!(model.msf_forward(&[out.clone()]), Err(Error::Usage(_))));
        // infer silently skips fusion when the model has none
        assert!(model.infer(&out, true).is_ok());
    }

    #[test]
    fn single_stage_fusion_has_one_channel() {
        let model = CascadeModel::<f64>::zeros(tiny(vec![2], true)).unwrap();
        assert_eq!(model.msf_unit().unwrap().in_channels(), 1);
    }

    #[test]
    fn supervision_loss_reduces_to_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_map(&mut rng, 4, 4);
        let b = random_map(&mut rng, 4, 4);
        let (l, g) = deep_supervised_loss(&[a.clone()], &[b.clone()]).unwrap();
        let (want, _) = mse_loss(&a.to_tensor(), &b.to_tensor()).unwrap();
        assert_eq!(l, want);
        assert_eq!(g.len(), 1);
        let (zero, _) = deep_supervised_loss(&[a.clone(), b.clone()], &[a.clone(), b.clone()]).unwrap();
        assert_eq!(zero, 0.0);
        assert!(deep_supervised_loss(&[a.clone()], &[a, b]).is_err());
    }

    #[test]
    fn param_names_match_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = CascadeModel::<f64>::init(tiny(vec![2, 3], true), &mut rng).unwrap();
        assert_eq!(model.param_names().len(), model.param_slices().len());
        assert_eq!(model.param_names()[0], "stage0.view1_1.layer0.weight");
        let lr = random_map(&mut rng, 2, 2);
        let pyramid = crate::resample::make_supervision_pyramid(&random_map(&mut rng, 12, 12), &[2, 3]).unwrap();
        let (_, grads) = model.loss_and_grads(&lr, &pyramid).unwrap();
        let lens: Vec<_> = model.param_slices().iter().map(|s| s.len()).collect();
        assert_eq!(grads.iter().map(|g| g.len()).collect::<Vec<_>>(), lens);
    }
}
