//! Central finite-difference verification of every hand-written backward pass.
//!
//! Each case draws random parameters and data from a seed, computes analytic gradients, and
//! compares every parameter (and input) entry against `(L(p + h) - L(p - h)) / 2h` in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conv::ConvLayer;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::loss::mse_loss;
use crate::network::{CascadeModel, DcnnUnit, DcnnUnitConfig, ModelConfig, NvsStage};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub seeds: usize,
    pub base_seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error; keeps round-off on near-zero gradients from
    /// dominating.
    pub scale_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seeds: 20,
            base_seed: 0,
            step: 1e-6,
            tolerance: 1e-5,
            scale_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub name: &'static str,
    pub seed: u64,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub cases: Vec<GradCheckCase>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckCase> {
        self.cases.iter().filter(|c| !(c.max_rel_error < self.tolerance))
    }

    /// Worst relative error per case name, in suite order.
    pub fn summary(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|(n, _)| *n == c.name) {
                Some((_, e)) => *e = e.max(c.max_rel_error),
                None => out.push((c.name, c.max_rel_error)),
            }
        }
        out
    }
}

pub const CASE_NAMES: [&str; 8] = ["conv3", "conv5", "relu", "mse", "unit", "stage", "cascade", "cascade_msf"];

/// Runs every case for `config.seeds` consecutive seeds.
pub fn run_gradcheck(config: &GradCheckConfig) -> Result<GradCheckReport> {
    if config.seeds == 0 || !(config.step > 0.0) || !(config.tolerance > 0.0) {
        return Err(Error::InvalidArgument("gradcheck needs seeds > 0, step > 0, tolerance > 0".into()));
    }
    let mut cases = Vec::new();
    for k in 0..config.seeds as u64 {
        let seed = config.base_seed.wrapping_add(k);
        for name in CASE_NAMES {
            cases.push(run_case(name, seed, config)?);
        }
    }
    Ok(GradCheckReport {
        tolerance: config.tolerance,
        cases,
    })
}

pub fn run_case(name: &'static str, seed: u64, config: &GradCheckConfig) -> Result<GradCheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Stats::new(config);
    match name {
        "conv3" => check_conv(&mut rng, 3, false, &mut stats)?,
        "conv5" => check_conv(&mut rng, 5, false, &mut stats)?,
        "relu" => check_conv(&mut rng, 3, true, &mut stats)?,
        "mse" => check_mse(&mut rng, &mut stats)?,
        "unit" => check_unit(&mut rng, &mut stats)?,
        "stage" => check_stage(&mut rng, &mut stats)?,
        "cascade" => check_cascade(&mut rng, false, &mut stats)?,
        "cascade_msf" => check_cascade(&mut rng, true, &mut stats)?,
        other => return Err(Error::InvalidArgument(format!("unknown gradcheck case {other}"))),
    }
    Ok(GradCheckCase {
        name,
        seed,
        entries: stats.entries,
        max_rel_error: stats.max_rel,
    })
}

struct Stats {
    step: f64,
    floor: f64,
    entries: usize,
    max_rel: f64,
}

impl Stats {
    fn new(config: &GradCheckConfig) -> Self {
        Stats {
            step: config.step,
            floor: config.scale_floor,
            entries: 0,
            max_rel: 0.0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor);
        // NaN must register as a failure.
        self.max_rel = if rel.is_nan() { f64::INFINITY } else { self.max_rel.max(rel) };
        self.entries += 1;
    }

    /// Compares `analytic` against central differences of `loss` over the slices of `target`.
    fn compare<M: Parameters>(
        &mut self,
        target: &mut M,
        analytic: &[Vec<f64>],
        loss: impl Fn(&M) -> Result<f64>,
    ) -> Result<()> {
        let sizes: Vec<usize> = target.params_mut().iter().map(|s| s.len()).collect();
        if sizes.len() != analytic.len() || sizes.iter().zip(analytic).any(|(&n, a)| n != a.len()) {
            return Err(Error::Shape("analytic gradient layout differs from the parameters".into()));
        }
        for (i, &n) in sizes.iter().enumerate() {
            for j in 0..n {
                let orig = target.params_mut()[i][j];
                target.params_mut()[i][j] = orig + self.step;
                let plus = loss(target)?;
                target.params_mut()[i][j] = orig - self.step;
                let minus = loss(target)?;
                target.params_mut()[i][j] = orig;
                self.record(analytic[i][j], (plus - minus) / (2.0 * self.step));
            }
        }
        Ok(())
    }
}

trait Parameters {
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
}

impl Parameters for Tensor<f64> {
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.data_mut()]
    }
}

impl Parameters for DepthMap<f64> {
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.values_mut()]
    }
}

impl Parameters for ConvLayer<f64> {
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weights.data_mut(), self.bias.as_mut_slice()]
    }
}

impl Parameters for DcnnUnit<f64> {
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.param_slices_mut()
    }
}

impl Parameters for NvsStage<f64> {
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.units_mut().iter_mut().flat_map(|u| u.param_slices_mut()).collect()
    }
}

impl Parameters for CascadeModel<f64> {
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.param_slices_mut()
    }
}

fn uniform_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DepthMap<f64> {
    DepthMap::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0))
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Linear functional `sum(out * probe)`: its gradient with respect to `out` is `probe`.
fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn small_unit_config(kernel: usize) -> DcnnUnitConfig {
    DcnnUnitConfig {
        num_layers: 2,
        channels: 3,
        kernel,
        residual: true,
        center_input: true,
    }
}

/// He-normal init with nonzero biases so no ReLU sits exactly at its kink.
fn random_unit(rng: &mut ChaCha8Rng, cfg: DcnnUnitConfig, in_ch: usize) -> Result<DcnnUnit<f64>> {
    let mut unit = DcnnUnit::he_normal(cfg, in_ch, rng)?;
    for layer in unit.layers_mut() {
        for b in layer.bias.iter_mut() {
            *b = rng.gen_range(-0.2..0.2);
        }
    }
    Ok(unit)
}

fn check_conv(rng: &mut ChaCha8Rng, kernel: usize, relu: bool, stats: &mut Stats) -> Result<()> {
    let mut layer = ConvLayer::he_normal(2, 3, kernel, relu, rng)?;
    for b in layer.bias.iter_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    let mut input = uniform_tensor(rng, Shape::new(1, 2, 5, 5));
    let out = layer.forward(&input)?;
    let probe = uniform_tensor(rng, out.shape());
    let grads = layer.backward(&input, Some(&out), &probe)?;

    let analytic = vec![grads.weights.data().to_vec(), grads.bias.clone()];
    let x = input.clone();
    stats.compare(&mut layer, &analytic, |l| Ok(dot(&l.forward(&x)?, &probe)))?;
    stats.compare(&mut input, &[grads.input.data().to_vec()], |x| Ok(dot(&layer.forward(x)?, &probe)))
}

fn check_mse(rng: &mut ChaCha8Rng, stats: &mut Stats) -> Result<()> {
    let shape = Shape::new(1, 1, 3, 3);
    let mut pred = uniform_tensor(rng, shape);
    let target = uniform_tensor(rng, shape);
    let (_, grad) = mse_loss(&pred, &target)?;
    stats.compare(&mut pred, &[grad.into_vec()], |p| Ok(mse_loss(p, &target)?.0))
}

fn check_unit(rng: &mut ChaCha8Rng, stats: &mut Stats) -> Result<()> {
    let mut unit = random_unit(rng, small_unit_config(3), 1)?;
    let mut input = uniform_tensor(rng, Shape::new(1, 1, 4, 5));
    let target = uniform_tensor(rng, input.shape());
    let trace = unit.forward_traced(&input)?;
    let (_, g) = mse_loss(trace.output(), &target)?;
    let mut analytic = Vec::new();
    let gin = unit.backward(&trace, &g, &mut analytic)?;

    let x = input.clone();
    stats.compare(&mut unit, &analytic, |u| Ok(mse_loss(&u.forward(&x)?, &target)?.0))?;
    stats.compare(&mut input, &[gin.into_vec()], |x| Ok(mse_loss(&unit.forward(x)?, &target)?.0))
}

fn check_stage(rng: &mut ChaCha8Rng, stats: &mut Stats) -> Result<()> {
    let units = (0..4)
        .map(|_| random_unit(rng, small_unit_config(3), 1))
        .collect::<Result<Vec<_>>>()?;
    let mut stage = NvsStage::new(2, units)?;
    let mut lr = uniform_map(rng, 3, 4);
    let target = uniform_map(rng, 6, 8);
    let (hr, trace) = stage.forward_traced(&lr)?;
    let (_, g) = mse_loss(&hr.to_tensor(), &target.to_tensor())?;
    let mut analytic = Vec::new();
    let gin = stage.backward(&trace, &DepthMap::from_tensor(&g)?, &mut analytic)?;

    let loss = |s: &NvsStage<f64>, x: &DepthMap<f64>| -> Result<f64> {
        Ok(mse_loss(&s.forward(x)?.0.to_tensor(), &target.to_tensor())?.0)
    };
    let x = lr.clone();
    stats.compare(&mut stage, &analytic, |s| loss(s, &x))?;
    stats.compare(&mut lr, &[gin.into_values()], |x| loss(&stage, x))
}

fn check_cascade(rng: &mut ChaCha8Rng, msf: bool, stats: &mut Stats) -> Result<()> {
    let config = ModelConfig {
        stage_factors: vec![2, 2],
        unit: small_unit_config(3),
        msf: msf.then_some(DcnnUnitConfig {
            num_layers: 2,
            channels: 2,
            kernel: 5,
            residual: true,
            center_input: true,
        }),
        value_shift: 0,
    };
    let stages = [2usize, 2]
        .iter()
        .map(|&r| {
            let units = (0..r * r)
                .map(|_| random_unit(rng, config.unit, 1))
                .collect::<Result<Vec<_>>>()?;
            NvsStage::new(r, units)
        })
        .collect::<Result<Vec<_>>>()?;
    let fusion = config.msf.map(|c| random_unit(rng, c, 2)).transpose()?;
    let mut model = CascadeModel::from_parts(config, stages, fusion)?;
    let lr = uniform_map(rng, 3, 3);
    let pyramid = vec![uniform_map(rng, 6, 6), uniform_map(rng, 12, 12)];

    let (_, analytic) = model.loss_and_grads(&lr, &pyramid)?;
    stats.compare(&mut model, &analytic, |m| m.loss(&lr, &pyramid))
}
