//! Bicubic resampling (Keys kernel, a = -0.5) and the depth-dependent noise model.
//!
//! Resizing is separable: each axis gets a table of (source index, weight) taps computed with
//! half-pixel-centred coordinates, `src = (dst + 0.5) / scale - 0.5`. When shrinking, the kernel
//! is stretched by `1 / scale` so it also acts as an anti-aliasing filter. Taps falling outside
//! the image are clamped to the border pixel and the weights of every output sample are
//! normalized to sum to one.

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Keys' free parameter.
pub const KEYS_A: f64 = -0.5;

/// Default noise scale of the depth-dependent Gaussian model.
pub const DEFAULT_NOISE_DELTA: f64 = 651.0;

/// Keys cubic convolution kernel.
pub fn keys_kernel(t: f64) -> f64 {
    let a = KEYS_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Resampling taps for one axis.
#[derive(Debug, Clone)]
struct AxisTaps<T> {
    in_len: usize,
    /// Per output index: (clamped source index, normalized weight).
    taps: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> AxisTaps<T> {
    fn new(in_len: usize, out_len: usize, scale: f64) -> Self {
        let kscale = scale.min(1.0);
        let support = 2.0 / kscale;
        let taps = (0..out_len)
            .map(|o| {
                let center = (o as f64 + 0.5) / scale - 0.5;
                let lo = (center - support).ceil() as isize;
                let hi = (center + support).floor() as isize;
                let raw: Vec<(usize, f64)> = (lo..=hi)
                    .map(|j| {
                        let idx = j.clamp(0, in_len as isize - 1) as usize;
                        (idx, keys_kernel((center - j as f64) * kscale))
                    })
                    .collect();
                let total: f64 = raw.iter().map(|&(_, w)| w).sum();
                raw.into_iter().map(|(i, w)| (i, T::of(w / total))).collect()
            })
            .collect();
        AxisTaps { in_len, taps }
    }

    fn out_len(&self) -> usize {
        self.taps.len()
    }
}

/// A fixed separable bicubic resize from one size to another; linear, with an exact adjoint.
#[derive(Debug, Clone)]
pub struct Resampler<T> {
    rows: AxisTaps<T>,
    cols: AxisTaps<T>,
}

impl<T: Scalar> Resampler<T> {
    /// Resize `in_dims` to `out_dims` with the given per-axis scale factors (out / in).
    pub fn with_scales(in_dims: (usize, usize), out_dims: (usize, usize), scales: (f64, f64)) -> Result<Self> {
        let (ih, iw) = in_dims;
        let (oh, ow) = out_dims;
        if ih == 0 || iw == 0 || oh == 0 || ow == 0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate resize {ih}x{iw} -> {oh}x{ow}"
            )));
        }
        if !(scales.0 > 0.0 && scales.1 > 0.0) {
            return Err(Error::InvalidArgument("resize scale must be positive".into()));
        }
        Ok(Resampler {
            rows: AxisTaps::new(ih, oh, scales.0),
            cols: AxisTaps::new(iw, ow, scales.1),
        })
    }

    /// Resize by a rational factor; output dimensions are `round(in * scale)`.
    pub fn for_scale(in_dims: (usize, usize), scale: Ratio<usize>) -> Result<Self> {
        if *scale.numer() == 0 {
            return Err(Error::InvalidArgument("resize scale must be positive".into()));
        }
        let out = |n: usize| (2 * n * scale.numer() + scale.denom()) / (2 * scale.denom());
        let s = *scale.numer() as f64 / *scale.denom() as f64;
        Self::with_scales(in_dims, (out(in_dims.0), out(in_dims.1)), (s, s))
    }

    pub fn in_dims(&self) -> (usize, usize) {
        (self.rows.in_len, self.cols.in_len)
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.rows.out_len(), self.cols.out_len())
    }

    pub fn apply(&self, map: &DepthMap<T>) -> Result<DepthMap<T>> {
        if map.dims() != self.in_dims() {
            return Err(Error::Shape(format!(
                "resampler built for {:?}, got {:?}",
                self.in_dims(),
                map.dims()
            )));
        }
        let (ih, _) = self.in_dims();
        let (oh, ow) = self.out_dims();
        // Horizontal pass: ih x ow.
        let mut tmp = vec![T::zero(); ih * ow];
        for y in 0..ih {
            for (x, taps) in self.cols.taps.iter().enumerate() {
                let mut s = T::zero();
                for &(j, w) in taps {
                    s += w * map.get(y, j);
                }
                tmp[y * ow + x] = s;
            }
        }
        let mut out = vec![T::zero(); oh * ow];
        for (y, taps) in self.rows.taps.iter().enumerate() {
            let row = &mut out[y * ow..(y + 1) * ow];
            for &(i, w) in taps {
                for (o, &t) in row.iter_mut().zip(&tmp[i * ow..(i + 1) * ow]) {
                    *o += w * t;
                }
            }
        }
        DepthMap::new(oh, ow, out)
    }

    /// Transpose of [`Resampler::apply`]: maps an output-sized field back to the input grid.
    pub fn apply_adjoint(&self, grad: &DepthMap<T>) -> Result<DepthMap<T>> {
        if grad.dims() != self.out_dims() {
            return Err(Error::Shape(format!(
                "adjoint expects {:?}, got {:?}",
                self.out_dims(),
                grad.dims()
            )));
        }
        let (ih, iw) = self.in_dims();
        let (_, ow) = self.out_dims();
        let mut tmp = vec![T::zero(); ih * ow];
        for (y, taps) in self.rows.taps.iter().enumerate() {
            for &(i, w) in taps {
                for x in 0..ow {
                    tmp[i * ow + x] += w * grad.get(y, x);
                }
            }
        }
        let mut out = vec![T::zero(); ih * iw];
        for y in 0..ih {
            for (x, taps) in self.cols.taps.iter().enumerate() {
                let g = tmp[y * ow + x];
                for &(j, w) in taps {
                    out[y * iw + j] += w * g;
                }
            }
        }
        DepthMap::new(ih, iw, out)
    }
}

/// Bicubic resize by a positive rational factor.
pub fn bicubic_resize<T: Scalar>(map: &DepthMap<T>, scale: Ratio<usize>) -> Result<DepthMap<T>> {
    Resampler::for_scale(map.dims(), scale)?.apply(map)
}

/// Integer-factor bicubic downsampling.
pub fn downsample<T: Scalar>(map: &DepthMap<T>, factor: usize) -> Result<DepthMap<T>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("downsampling factor must be positive".into()));
    }
    bicubic_resize(map, Ratio::new(1, factor))
}

/// Integer-factor bicubic upsampling.
pub fn upsample<T: Scalar>(map: &DepthMap<T>, factor: usize) -> Result<DepthMap<T>> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upsampling factor must be positive".into()));
    }
    bicubic_resize(map, Ratio::from_integer(factor))
}

/// Supervision targets for a cascade with the given per-stage factors, coarsest first.
///
/// The last entry is `gt` itself; each earlier entry is the next one bicubic-downsampled by the
/// factor of the stage that produces it, so entry `k` has the resolution of stage `k`'s output.
pub fn make_supervision_pyramid<T: Scalar>(
    gt: &DepthMap<T>,
    stage_factors: &[usize],
) -> Result<Vec<DepthMap<T>>> {
    if stage_factors.is_empty() || stage_factors.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "invalid stage factors {stage_factors:?}"
        )));
    }
    let total: usize = stage_factors.iter().product();
    let (h, w) = gt.dims();
    if h % total != 0 || w % total != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} target is not divisible by the total factor {total}"
        )));
    }
    let mut levels = vec![gt.clone()];
    for &f in stage_factors[1..].iter().rev() {
        let next = downsample(levels.last().expect("nonempty"), f)?;
        levels.push(next);
    }
    levels.reverse();
    Ok(levels)
}

/// Parameters of the depth-dependent Gaussian noise model `N(0, delta / d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub delta: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(delta: f64, seed: u64) -> Result<Self> {
        let spec = NoiseSpec { delta, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise delta must be positive, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Adds independent Gaussian noise with standard deviation `delta / d` to each pixel `d > 0`.
///
/// Non-positive and non-finite depths are treated as holes and left untouched. Pixels are
/// visited row-major with one draw per valid pixel, so the result is fixed by the seed.
pub fn add_depth_noise<T: Scalar>(map: &DepthMap<T>, spec: &NoiseSpec) -> Result<DepthMap<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = map.clone();
    for v in out.values_mut() {
        let d = v.as_f64();
        if d > 0.0 && d.is_finite() {
            let z: f64 = unit.sample(&mut rng);
            *v = T::of(d + z * spec.delta / d);
        }
    }
    Ok(out)
}
