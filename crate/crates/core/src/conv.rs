//! Same-padded 2-D convolution (cross-correlation) with optional ReLU, forward and backward.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Kernel sizes the network uses: 3x3 for sub-task units, 5x5 for fusion.
pub const SUPPORTED_KERNELS: [usize; 2] = [3, 5];

/// A stride-1 convolution whose output keeps the input's spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    /// Shaped (out_ch, in_ch, k, k).
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub has_relu: bool,
}

/// Gradients of a scalar loss with respect to a layer's input and parameters.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, has_relu: bool) -> Result<Self> {
        if !SUPPORTED_KERNELS.contains(&kernel) {
            return Err(Error::InvalidArgument(format!(
                "kernel size {kernel} not in {SUPPORTED_KERNELS:?}"
            )));
        }
        if in_ch == 0 || out_ch == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        Ok(ConvLayer {
            weights: Tensor::zeros(Shape::new(out_ch, in_ch, kernel, kernel)),
            bias: vec![T::zero(); out_ch],
            has_relu,
        })
    }

    /// He-normal weights (std = sqrt(2 / (k*k*in_ch))) and zero bias.
    pub fn he_normal<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        has_relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::zeros(in_ch, out_ch, kernel, has_relu)?;
        let std = T::of((2.0 / (kernel * kernel * in_ch) as f64).sqrt());
        layer.weights = Tensor::randn(layer.weights.shape(), std, rng);
        Ok(layer)
    }

    pub fn from_parts(weights: Tensor<T>, bias: Vec<T>, has_relu: bool) -> Result<Self> {
        let s = weights.shape();
        if s.height != s.width || !SUPPORTED_KERNELS.contains(&s.height) {
            return Err(Error::Shape(format!("conv weights must be square 3x3 or 5x5, got {s}")));
        }
        if bias.len() != s.batch {
            return Err(Error::Shape(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                s.batch
            )));
        }
        Ok(ConvLayer {
            weights,
            bias,
            has_relu,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().channels
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().batch
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape().height
    }

    pub fn padding(&self) -> usize {
        self.kernel() / 2
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape().channels != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels(),
                input.shape().channels
            )));
        }
        Ok(())
    }

    fn output_shape(&self, input: Shape) -> Shape {
        Shape::new(input.batch, self.out_channels(), input.height, input.width)
    }

    /// Zero-padded correlation plus bias, then ReLU when `has_relu`.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let is = input.shape();
        let os = self.output_shape(is);
        let (h, w, k, pad) = (is.height, is.width, self.kernel(), self.padding());
        let in_ch = is.channels;
        let out_ch = os.channels;
        let mut out = Tensor::zeros(os);
        let weights = self.weights.data();

        out.data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(idx, plane)| {
                let (b, oc) = (idx / out_ch, idx % out_ch);
                plane.fill(self.bias[oc]);
                for ic in 0..in_ch {
                    let src = input.plane(b, ic);
                    let wbase = (oc * in_ch + ic) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = weights[wbase + ky * k + kx];
                            if wv == T::zero() {
                                continue;
                            }
                            accumulate_shifted(plane, src, h, w, ky as isize - pad as isize, kx as isize - pad as isize, wv);
                        }
                    }
                }
                if self.has_relu {
                    for v in plane.iter_mut() {
                        if *v < T::zero() {
                            *v = T::zero();
                        }
                    }
                }
            });
        Ok(out)
    }

    /// Backpropagates `grad_out` through the layer.
    ///
    /// `output` is the activation cached from `forward`; it supplies the ReLU mask and is
    /// required whenever the layer has a ReLU.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        output: Option<&Tensor<T>>,
        grad_out: &Tensor<T>,
    ) -> Result<ConvGrads<T>> {
        self.check_input(input)?;
        let is = input.shape();
        let os = self.output_shape(is);
        grad_out.ensure_shape(os, "conv grad_out")?;

        let grad_pre = if self.has_relu {
            let output = output.ok_or_else(|| {
                Error::Usage("ReLU conv backward needs the cached forward activation".into())
            })?;
            output.ensure_shape(os, "cached conv activation")?;
            let mut g = grad_out.clone();
            for (gv, &ov) in g.data_mut().iter_mut().zip(output.data()) {
                if ov <= T::zero() {
                    *gv = T::zero();
                }
            }
            g
        } else {
            grad_out.clone()
        };

        let (h, w, k, pad) = (is.height, is.width, self.kernel(), self.padding());
        let (batch, in_ch, out_ch) = (is.batch, is.channels, os.channels);

        let bias: Vec<T> = (0..out_ch)
            .map(|oc| {
                let mut s = T::zero();
                for b in 0..batch {
                    s += grad_pre.plane(b, oc).iter().copied().sum::<T>();
                }
                s
            })
            .collect();

        let mut gw = Tensor::zeros(self.weights.shape());
        gw.data_mut()
            .par_chunks_mut(k * k)
            .enumerate()
            .for_each(|(idx, taps)| {
                let (oc, ic) = (idx / in_ch, idx % in_ch);
                for ky in 0..k {
                    for kx in 0..k {
                        let mut s = T::zero();
                        for b in 0..batch {
                            s += dot_shifted(
                                grad_pre.plane(b, oc),
                                input.plane(b, ic),
                                h,
                                w,
                                ky as isize - pad as isize,
                                kx as isize - pad as isize,
                            );
                        }
                        taps[ky * k + kx] = s;
                    }
                }
            });

        let weights = self.weights.data();
        let mut gin = Tensor::zeros(is);
        gin.data_mut()
            .par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(idx, plane)| {
                let (b, ic) = (idx / in_ch, idx % in_ch);
                for oc in 0..out_ch {
                    let g = grad_pre.plane(b, oc);
                    let wbase = (oc * in_ch + ic) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = weights[wbase + ky * k + kx];
                            if wv == T::zero() {
                                continue;
                            }
                            // input(y+dy, x+dx) receives w * g(y, x): a shift by (-dy, -dx).
                            accumulate_shifted(plane, g, h, w, pad as isize - ky as isize, pad as isize - kx as isize, wv);
                        }
                    }
                }
            });

        Ok(ConvGrads {
            input: gin,
            weights: gw,
            bias,
        })
    }
}

/// `dst(y, x) += wv * src(y + dy, x + dx)` over positions where the source is in bounds.
#[inline]
fn accumulate_shifted<T: Scalar>(dst: &mut [T], src: &[T], h: usize, w: usize, dy: isize, dx: isize, wv: T) {
    let (x0, x1) = valid_range(w, dx);
    let (y0, y1) = valid_range(h, dy);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x0..y * w + x1];
        let s0 = (x0 as isize + dx) as usize;
        let s = &src[sy * w + s0..sy * w + s0 + (x1 - x0)];
        for (dv, &sv) in d.iter_mut().zip(s) {
            *dv += wv * sv;
        }
    }
}

/// `sum_{y,x} a(y, x) * b(y + dy, x + dx)` over in-bounds positions.
#[inline]
fn dot_shifted<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
    let (x0, x1) = valid_range(w, dx);
    let (y0, y1) = valid_range(h, dy);
    let mut s = T::zero();
    if x0 >= x1 {
        return s;
    }
    for y in y0..y1 {
        let by = (y as isize + dy) as usize;
        let ar = &a[y * w + x0..y * w + x1];
        let b0 = (x0 as isize + dx) as usize;
        let br = &b[by * w + b0..by * w + b0 + (x1 - x0)];
        for (&av, &bv) in ar.iter().zip(br) {
            s += av * bv;
        }
    }
    s
}

/// Indices `i` in `0..n` with `i + d` also in `0..n`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.min(n))
}
