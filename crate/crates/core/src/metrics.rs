//! Error metrics: RMSE, SSIM and percent of bad pixels.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::atomic_write;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// SSIM Gaussian window side.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Depth maps in the usual benchmarks are stored as 8-bit images.
pub const DEFAULT_DYNAMIC_RANGE: f64 = 255.0;

/// Options shared by the metric functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Pixels shaved from every border before comparing.
    pub crop_border: usize,
    /// Round and clamp both inputs to 8-bit before computing RMSE.
    pub quantize_8bit: bool,
    pub dynamic_range: f64,
    pub bad_pixel_threshold: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            crop_border: 0,
            quantize_8bit: false,
            dynamic_range: DEFAULT_DYNAMIC_RANGE,
            bad_pixel_threshold: 1.0,
        }
    }
}

/// `sqrt(Σ (pred_i − gt_i)² / N)` over all pixels.
pub fn rmse<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<T> {
    pred.ensure_same_dims(gt, "rmse")?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("rmse of empty maps".into()));
    }
    let sum: T = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok((sum / T::of(pred.len() as f64)).sqrt())
}

/// Percentage of pixels whose absolute error exceeds `threshold`.
pub fn bad_pixel_percent<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>, threshold: T) -> Result<T> {
    pred.ensure_same_dims(gt, "bad_pixel_percent")?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("bad-pixel rate of empty maps".into()));
    }
    let bad = pred
        .values()
        .iter()
        .zip(gt.values())
        .filter(|(&a, &b)| (a - b).abs() > threshold)
        .count();
    Ok(T::of(100.0 * bad as f64 / pred.len() as f64))
}

/// Normalized 1-D Gaussian taps (σ = 1.5) of the SSIM window.
fn gaussian_1d<T: Scalar>() -> Vec<T> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.iter().map(|v| T::of(v / total)).collect()
}

/// Normalized 11x11 Gaussian window, row-major.
pub fn gaussian_window<T: Scalar>() -> Vec<T> {
    let g = gaussian_1d::<T>();
    g.iter().flat_map(|&a| g.iter().map(move |&b| a * b)).collect()
}

/// Mean SSIM over every position where the window fits entirely inside the image.
pub fn ssim<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>, dynamic_range: T) -> Result<T> {
    pred.ensure_same_dims(gt, "ssim")?;
    if !(dynamic_range > T::zero()) {
        return Err(Error::InvalidArgument("SSIM dynamic range must be positive".into()));
    }
    let (h, w) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    if pred == gt {
        return Ok(T::one());
    }
    let g1 = gaussian_1d::<T>();
    let c1 = (T::of(SSIM_K1) * dynamic_range).powi(2);
    let c2 = (T::of(SSIM_K2) * dynamic_range).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);

    // Windowed first and second moments via a horizontal then vertical pass.
    let fields = |f: &dyn Fn(T, T) -> T| -> Vec<T> {
        let mut rows = vec![T::zero(); h * ow];
        for y in 0..h {
            for x in 0..ow {
                let mut s = T::zero();
                for (k, &wk) in g1.iter().enumerate() {
                    s += wk * f(pred.get(y, x + k), gt.get(y, x + k));
                }
                rows[y * ow + x] = s;
            }
        }
        let mut out = vec![T::zero(); oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut s = T::zero();
                for (k, &wk) in g1.iter().enumerate() {
                    s += wk * rows[(y + k) * ow + x];
                }
                out[y * ow + x] = s;
            }
        }
        out
    };
    let mu_x = fields(&|a, _| a);
    let mu_y = fields(&|_, b| b);
    let xx = fields(&|a, _| a * a);
    let yy = fields(&|_, b| b * b);
    let xy = fields(&|a, b| a * b);

    let two = T::of(2.0);
    let mut total = T::zero();
    for i in 0..oh * ow {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sx = xx[i] - mx * mx;
        let sy = yy[i] - my * my;
        let sxy = xy[i] - mx * my;
        total += ((two * mx * my + c1) * (two * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2));
    }
    Ok(total / T::of((oh * ow) as f64))
}

/// Metrics of one predicted map against its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub rmse: f64,
    pub ssim: f64,
    pub bad_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

/// Computes all metrics for one pair under `opts`.
pub fn evaluate<T: Scalar>(id: &str, pred: &DepthMap<T>, gt: &DepthMap<T>, opts: &MetricOptions) -> Result<EvalRow> {
    pred.ensure_same_dims(gt, "evaluate")?;
    let (pred, gt) = if opts.crop_border > 0 {
        let c = opts.crop_border;
        let (h, w) = pred.dims();
        if 2 * c >= h || 2 * c >= w {
            return Err(Error::InvalidArgument(format!("border crop {c} leaves nothing of {h}x{w}")));
        }
        (pred.crop(c, c, h - 2 * c, w - 2 * c)?, gt.crop(c, c, h - 2 * c, w - 2 * c)?)
    } else {
        (pred.clone(), gt.clone())
    };
    let r = if opts.quantize_8bit {
        let q = |m: &DepthMap<T>| m.map(|v| v.round().max(T::zero()).min(T::of(255.0)));
        rmse(&q(&pred), &q(&gt))?
    } else {
        rmse(&pred, &gt)?
    };
    Ok(EvalRow {
        id: id.to_string(),
        rmse: r.as_f64(),
        ssim: ssim(&pred, &gt, T::of(opts.dynamic_range))?.as_f64(),
        bad_pct: bad_pixel_percent(&pred, &gt, T::of(opts.bad_pixel_threshold))?.as_f64(),
    })
}

impl EvalReport {
    /// Rows sorted by id, so the report does not depend on evaluation order.
    pub fn from_rows(mut rows: Vec<EvalRow>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        EvalReport { rows }
    }

    /// CSV with header `id,rmse,ssim,bad_pct`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record(["id", "rmse", "ssim", "bad_pct"])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        atomic_write(path, &buf)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<EvalRow>, _>>()?;
        Ok(EvalReport { rows })
    }

    pub fn mean_rmse(&self) -> f64 {
        self.rows.iter().map(|r| r.rmse).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmse_hand_cases() {
        let p = DepthMap::new(1, 2, vec![0.0f64, 0.0]).unwrap();
        let g = DepthMap::new(1, 2, vec![3.0f64, 4.0]).unwrap();
        assert!((rmse(&p, &g).unwrap() - (12.5f64).sqrt()).abs() < 1e-12);
        assert_eq!(rmse(&g, &g).unwrap(), 0.0);
        let shift = |m: &DepthMap<f64>| m.map(|v| v + 17.0);
        assert!((rmse(&shift(&p), &shift(&g)).unwrap() - rmse(&p, &g).unwrap()).abs() < 1e-12);
        assert!(rmse(&p, &DepthMap::filled(2, 1, 0.0)).is_err());
    }

    #[test]
    fn bad_pixel_cases() {
        let g = DepthMap::filled(4, 4, 10.0f64);
        let p = DepthMap::from_fn(4, 4, |y, _| if y < 2 { 12.0 } else { 10.0 });
        assert_eq!(bad_pixel_percent(&p, &g, 1.0).unwrap(), 50.0);
        assert_eq!(bad_pixel_percent(&g, &g, 1.0).unwrap(), 0.0);
        assert_eq!(bad_pixel_percent(&p, &g, f64::INFINITY).unwrap(), 0.0);
    }

    #[test]
    fn window_is_normalized() {
        let w = gaussian_window::<f64>();
        assert_eq!(w.len(), 121);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ssim_identity_offset_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = DepthMap::<f64>::from_fn(16, 16, |_, _| rng.gen_range(0.0..255.0));
        let b = a.map(|v| v + rng.gen_range(-10.0..10.0));
        assert_eq!(ssim(&a, &a, 255.0).unwrap(), 1.0);
        assert!(ssim(&a, &a.map(|v| v + 200.0), 255.0).unwrap() < 1.0);
        let (ab, ba) = (ssim(&a, &b, 255.0).unwrap(), ssim(&b, &a, 255.0).unwrap());
        assert!((ab - ba).abs() < 1e-14);
        assert!(ssim(&a.crop(0, 0, 10, 16).unwrap(), &a.crop(0, 0, 10, 16).unwrap(), 255.0).is_err());
    }

    #[test]
    fn csv_header_is_fixed() {
        let report = EvalReport::from_rows(vec![
            EvalRow { id: "b".into(), rmse: 1.5, ssim: 0.9, bad_pct: 2.0 },
            EvalRow { id: "a".into(), rmse: 0.0, ssim: 1.0, bad_pct: 0.0 },
        ]);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("id,rmse,ssim,bad_pct\na,"), "{text}");
        let mut empty = Vec::new();
        EvalReport::default().write_csv(&mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "id,rmse,ssim,bad_pct\n");
    }

    #[test]
    fn evaluate_crop_and_quantize() {
        let g = DepthMap::from_fn(20, 20, |y, x| (y * 20 + x) as f64 * 0.5);
        let p = g.map(|v| v + 0.2);
        let row = evaluate("x", &p, &g, &MetricOptions::default()).unwrap();
        assert!((row.rmse - 0.2).abs() < 1e-12);
        assert_eq!(row.bad_pct, 0.0);
        let opts = MetricOptions { crop_border: 2, quantize_8bit: true, ..MetricOptions::default() };
        let row = evaluate("x", &p, &g, &opts).unwrap();
        assert!(row.rmse < 0.71);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn rmse_and_ssim_are_symmetric_and_bounded(seed in 0u64..1 << 32, h in 11usize..20, w in 11usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DepthMap::from_fn(h, w, |_, _| rng.gen_range(0.0..255.0f64));
            let b = DepthMap::from_fn(h, w, |_, _| rng.gen_range(0.0..255.0f64));
            let (ab, ba) = (rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
            proptest::prop_assert!(ab == ba && ab >= 0.0);
            proptest::prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
            let (sab, sba) = (ssim(&a, &b, 255.0).unwrap(), ssim(&b, &a, 255.0).unwrap());
            proptest::prop_assert!((sab - sba).abs() < 1e-12);
            proptest::prop_assert!(sab <= 1.0 + 1e-12 && sab >= -1.0 - 1e-12);
        }
    }
}

