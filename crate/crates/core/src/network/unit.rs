//! Residual DCNN unit: a stack of same-padded convolutions, ReLU after all but the last.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvLayer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcnnUnitConfig {
    pub num_layers: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Add the last input channel to the final conv output.
    pub residual: bool,
    /// Subtract the per-sample mean of the last input channel from every channel before the
    /// first conv. The residual path still sees the raw input.
    #[serde(default)]
    pub center_input: bool,
}

impl DcnnUnitConfig {
    /// 10 layers, 64 feature maps, 3x3 kernels, residual.
    pub const SUB_TASK: DcnnUnitConfig = DcnnUnitConfig {
        num_layers: 10,
        channels: 64,
        kernel: 3,
        residual: true,
        center_input: true,
    };

    /// Same depth and width with 5x5 kernels, for multi-scale fusion.
    pub const FUSION: DcnnUnitConfig = DcnnUnitConfig {
        num_layers: 10,
        channels: 64,
        kernel: 5,
        residual: true,
        center_input: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument(format!("invalid unit config {self:?}")));
        }
        if ![3, 5].contains(&self.kernel) {
            return Err(Error::InvalidArgument(format!("unit kernel must be 3 or 5, got {}", self.kernel)));
        }
        Ok(())
    }

    /// (in, out) channel counts of each layer.
    fn layer_channels(&self, in_ch: usize) -> Vec<(usize, usize)> {
        (0..self.num_layers)
            .map(|l| {
                let i = if l == 0 { in_ch } else { self.channels };
                let o = if l + 1 == self.num_layers { 1 } else { self.channels };
                (i, o)
            })
            .collect()
    }
}

/// Cached activations of one forward pass, needed for backpropagation.
#[derive(Debug, Clone)]
pub struct UnitTrace<T> {
    /// Conv-branch input (centered when the unit centers).
    input: Tensor<T>,
    /// Output of each conv layer (after its ReLU, if any).
    activations: Vec<Tensor<T>>,
    output: Tensor<T>,
}

impl<T> UnitTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcnnUnit<T> {
    config: DcnnUnitConfig,
    in_channels: usize,
    layers: Vec<ConvLayer<T>>,
}

impl<T: Scalar> DcnnUnit<T> {
    pub fn zeros(config: DcnnUnitConfig, in_channels: usize) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_channels(in_channels)
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| ConvLayer::zeros(i, o, config.kernel, l + 1 < config.num_layers))
            .collect::<Result<_>>()?;
        Ok(DcnnUnit {
            config,
            in_channels,
            layers,
        })
    }

    pub fn he_normal<R: Rng + ?Sized>(config: DcnnUnitConfig, in_channels: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_channels(in_channels)
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| ConvLayer::he_normal(i, o, config.kernel, l + 1 < config.num_layers, rng))
            .collect::<Result<_>>()?;
        Ok(DcnnUnit {
            config,
            in_channels,
            layers,
        })
    }

    /// Assembles a unit from explicit layers, checking them against `config`.
    pub fn from_layers(config: DcnnUnitConfig, in_channels: usize, layers: Vec<ConvLayer<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.layer_channels(in_channels);
        if layers.len() != expected.len() {
            return Err(Error::Shape(format!(
                "unit expects {} layers, got {}",
                expected.len(),
                layers.len()
            )));
        }
        for (l, (layer, (i, o))) in layers.iter().zip(expected).enumerate() {
            let relu = l + 1 < config.num_layers;
            if layer.in_channels() != i || layer.out_channels() != o || layer.kernel() != config.kernel || layer.has_relu != relu {
                return Err(Error::Shape(format!("layer {l} does not match unit config {config:?}")));
            }
        }
        Ok(DcnnUnit {
            config,
            in_channels,
            layers,
        })
    }

    pub fn config(&self) -> DcnnUnitConfig {
        self.config
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer<T>] {
        &mut self.layers
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let centered = self.centered(input);
        let mut x = self.layers[0].forward(centered.as_ref().unwrap_or(input))?;
        for layer in &self.layers[1..] {
            x = layer.forward(&x)?;
        }
        self.add_residual(&mut x, input);
        Ok(x)
    }

    pub fn forward_traced(&self, input: &Tensor<T>) -> Result<UnitTrace<T>> {
        self.check_input(input)?;
        let branch = self.centered(input).unwrap_or_else(|| input.clone());
        let mut activations: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let next = layer.forward(activations.last().unwrap_or(&branch))?;
            activations.push(next);
        }
        let mut output = activations.last().expect("at least one layer").clone();
        self.add_residual(&mut output, input);
        Ok(UnitTrace {
            input: branch,
            activations,
            output,
        })
    }

    /// Returns the gradient with respect to the unit input and, per layer, the flattened
    /// (weights, bias) gradients appended to `param_grads` in [`DcnnUnit::param_slices`] order.
    pub fn backward(&self, trace: &UnitTrace<T>, grad_out: &Tensor<T>, param_grads: &mut Vec<Vec<T>>) -> Result<Tensor<T>> {
        grad_out.ensure_shape(trace.output.shape(), "unit grad_out")?;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 { &trace.input } else { &trace.activations[l - 1] };
            let grads = self.layers[l].backward(input, Some(&trace.activations[l]), &g)?;
            per_layer.push((grads.weights.into_vec(), grads.bias));
            g = grads.input;
        }
        let last = self.in_channels - 1;
        if self.config.center_input {
            let s = g.shape();
            let n = T::of(s.plane() as f64);
            for b in 0..s.batch {
                let mut total = T::zero();
                for c in 0..s.channels {
                    total += g.plane(b, c).iter().fold(T::zero(), |a, &v| a + v);
                }
                let shift = total / n;
                for d in g.plane_mut(b, last) {
                    *d -= shift;
                }
            }
        }
        if self.config.residual {
            let s = g.shape();
            for b in 0..s.batch {
                let src = grad_out.plane(b, 0).to_vec();
                for (d, v) in g.plane_mut(b, last).iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        for (w, b) in per_layer.into_iter().rev() {
            param_grads.push(w);
            param_grads.push(b);
        }
        Ok(g)
    }

    /// Parameter slices: weights then bias for each layer, first layer first.
    pub fn param_slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape().channels != self.in_channels {
            return Err(Error::Shape(format!(
                "unit expects {} input channels, got {}",
                self.in_channels,
                input.shape().channels
            )));
        }
        Ok(())
    }

    /// The conv-branch input when centering is on.
    fn centered(&self, input: &Tensor<T>) -> Option<Tensor<T>> {
        if !self.config.center_input {
            return None;
        }
        let mut out = input.clone();
        let s = input.shape();
        let n = T::of(s.plane() as f64);
        for b in 0..s.batch {
            let mean = input.plane(b, self.in_channels - 1).iter().fold(T::zero(), |a, &v| a + v) / n;
            for c in 0..s.channels {
                for v in out.plane_mut(b, c) {
                    *v -= mean;
                }
            }
        }
        Some(out)
    }

    fn add_residual(&self, out: &mut Tensor<T>, input: &Tensor<T>) {
        if !self.config.residual {
            return;
        }
        let last = self.in_channels - 1;
        for b in 0..input.shape().batch {
            let skip = input.plane(b, last);
            for (o, &s) in out.plane_mut(b, 0).iter_mut().zip(skip) {
                *o += s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(residual: bool) -> DcnnUnitConfig {
        DcnnUnitConfig {
            num_layers: 3,
            channels: 4,
            kernel: 3,
            residual,
            center_input: false,
        }
    }

    #[test]
    fn zero_unit_residual_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(Shape::new(1, 1, 5, 6), 1.0, &mut rng);
        let unit = DcnnUnit::zeros(small(true), 1).unwrap();
        assert_eq!(unit.forward(&x).unwrap(), x);
        let unit = DcnnUnit::zeros(small(false), 1).unwrap();
        assert!(unit.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_composition_of_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let unit = DcnnUnit::<f64>::he_normal(small(true), 2, &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(1, 2, 4, 4), 1.0, &mut rng);
        let mut y = x.clone();
        for l in unit.layers() {
            y = l.forward(&y).unwrap();
        }
        let skip = x.channel(1);
        y.add_assign(&skip).unwrap();
        assert_eq!(unit.forward(&x).unwrap(), y);
        assert_eq!(unit.forward_traced(&x).unwrap().output(), &y);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let unit = DcnnUnit::<f64>::zeros(small(true), 1).unwrap();
        assert!(unit.forward(&Tensor::zeros(Shape::new(1, 2, 3, 3))).is_err());
    }

    #[test]
    fn backward_param_order_matches_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let unit = DcnnUnit::<f64>::he_normal(small(true), 1, &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(1, 1, 4, 4), 1.0, &mut rng);
        let trace = unit.forward_traced(&x).unwrap();
        let mut grads = Vec::new();
        unit.backward(&trace, &Tensor::full(trace.output().shape(), 1.0), &mut grads).unwrap();
        let lens: Vec<usize> = unit.param_slices().iter().map(|s| s.len()).collect();
        assert_eq!(grads.iter().map(|g| g.len()).collect::<Vec<_>>(), lens);
    }

    #[test]
    fn centering_ignores_a_constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = DcnnUnitConfig { center_input: true, ..small(true) };
        let unit = DcnnUnit::<f64>::he_normal(cfg, 2, &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(2, 2, 5, 4), 1.0, &mut rng);
        let mut shifted = x.clone();
        for v in shifted.data_mut() {
            *v += 7.0;
        }
        let (a, b) = (unit.forward(&x).unwrap(), unit.forward(&shifted).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((q - p - 7.0).abs() < 1e-9);
        }
        let zero = DcnnUnit::zeros(cfg, 2).unwrap();
        assert_eq!(zero.forward(&x).unwrap(), x.channel(1));
    }
}
