//! Decomposition of a high-resolution map into `r * r` interleaved low-resolution views, and the
//! periodic re-organization that interleaves them back.
//!
//! View `(a, b)` (1-based) of an `rH x rW` map holds the pixels at rows `r(i-1)+a` and columns
//! `r(j-1)+b`, i.e. the samples a virtual camera shifted by `(a-1, b-1)` sub-pixels would see.

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `r * r` equally sized views, stored row-major by `(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGrid<T> {
    factor: usize,
    views: Vec<DepthMap<T>>,
}

impl<T: Scalar> ViewGrid<T> {
    /// Views must be given in order (1,1), (1,2), ..., (r,r).
    pub fn new(factor: usize, views: Vec<DepthMap<T>>) -> Result<Self> {
        if factor < 2 {
            return Err(Error::InvalidArgument(format!("factor must be >= 2, got {factor}")));
        }
        if views.len() != factor * factor {
            return Err(Error::Shape(format!(
                "factor {factor} needs {} views, got {}",
                factor * factor,
                views.len()
            )));
        }
        let dims = views[0].dims();
        if let Some(bad) = views.iter().find(|v| v.dims() != dims) {
            return Err(Error::Shape(format!(
                "inconsistent view shapes: {:?} vs {:?}",
                bad.dims(),
                dims
            )));
        }
        Ok(ViewGrid { factor, views })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Dimensions shared by every view.
    pub fn view_dims(&self) -> (usize, usize) {
        self.views[0].dims()
    }

    /// View at 1-based position `(a, b)`.
    pub fn view(&self, a: usize, b: usize) -> &DepthMap<T> {
        assert!((1..=self.factor).contains(&a) && (1..=self.factor).contains(&b));
        &self.views[(a - 1) * self.factor + (b - 1)]
    }

    pub fn views(&self) -> &[DepthMap<T>] {
        &self.views
    }

    pub fn into_views(self) -> Vec<DepthMap<T>> {
        self.views
    }
}

/// Splits `hr` into `r * r` views; dimensions must be divisible by `r`.
pub fn decompose<T: Scalar>(hr: &DepthMap<T>, r: usize) -> Result<ViewGrid<T>> {
    if r < 2 {
        return Err(Error::InvalidArgument(format!("factor must be >= 2, got {r}")));
    }
    let (h, w) = hr.dims();
    if h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} map is not divisible by factor {r}"
        )));
    }
    let (vh, vw) = (h / r, w / r);
    let views = (0..r * r)
        .map(|idx| {
            let (a, b) = (idx / r, idx % r);
            DepthMap::from_fn(vh, vw, |i, j| hr.get(r * i + a, r * j + b))
        })
        .collect();
    ViewGrid::new(r, views)
}

/// Interleaves the views into a single `(rH, rW)` map: the exact inverse of [`decompose`].
pub fn reorganize<T: Scalar>(grid: &ViewGrid<T>) -> DepthMap<T> {
    let r = grid.factor;
    let (vh, vw) = grid.view_dims();
    let mut out = DepthMap::filled(vh * r, vw * r, T::zero());
    for (idx, view) in grid.views.iter().enumerate() {
        let (a, b) = (idx / r, idx % r);
        for i in 0..vh {
            for j in 0..vw {
                out.set(r * i + a, r * j + b, view.get(i, j));
            }
        }
    }
    out.map(|v| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_partition() {
        let m = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = decompose(&m, 2).unwrap();
        assert_eq!(g.view(1, 1).values(), &[1.0]);
        assert_eq!(g.view(1, 2).values(), &[2.0]);
        assert_eq!(g.view(2, 1).values(), &[3.0]);
        assert_eq!(g.view(2, 2).values(), &[4.0]);
        assert_eq!(reorganize(&g), m);
    }

    #[test]
    fn constant_map_gives_identical_views() {
        let m = DepthMap::filled(6, 9, 3.5f64);
        let g = decompose(&m, 3).unwrap();
        assert_eq!(g.views().len(), 9);
        assert!(g.views().iter().all(|v| v == &DepthMap::filled(2, 3, 3.5)));
    }

    #[test]
    fn ramp_matches_index_formula() {
        let m = DepthMap::from_fn(6, 6, |y, x| (10 * y + x) as f64);
        let g = decompose(&m, 3).unwrap();
        for a in 1..=3 {
            for b in 1..=3 {
                let v = g.view(a, b);
                for i in 1..=2 {
                    for j in 1..=2 {
                        let want = (10 * (3 * (i - 1) + a - 1) + 3 * (j - 1) + b - 1) as f64;
                        assert_eq!(v.get(i - 1, j - 1), want);
                    }
                }
            }
        }
    }

    #[test]
    fn scalar_views_land_in_order() {
        let views = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&v| DepthMap::filled(1, 1, v))
            .collect();
        let g = ViewGrid::new(2, views).unwrap();
        assert_eq!(reorganize(&g).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn non_divisible_and_inconsistent_inputs_rejected() {
        assert!(matches!(
            decompose(&DepthMap::filled(5, 4, 0.0f64), 2),
            Err(Error::Shape(_))
        ));
        let views = vec![
            DepthMap::filled(1, 1, 0.0f64),
            DepthMap::filled(1, 1, 0.0),
            DepthMap::filled(1, 2, 0.0),
            DepthMap::filled(1, 1, 0.0),
        ];
        assert!(matches!(ViewGrid::new(2, views), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn decompose_reorganize_round_trip(r in 2usize..=6, h in 1usize..5, w in 1usize..5,
                                           seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = DepthMap::from_fn(h * r, w * r, |_, _| rng.gen::<f64>() * 100.0 - 50.0);
            let g = decompose(&m, r).unwrap();
            prop_assert_eq!(reorganize(&g), m.clone());
            prop_assert_eq!(decompose(&reorganize(&g), r).unwrap(), g.clone());
            prop_assert_eq!(g.view(1, 1), &DepthMap::from_fn(h, w, |y, x| m.get(r * y, r * x)));
            let mut a = m.values().to_vec();
            let mut b: Vec<f64> = g.views().iter().flat_map(|v| v.values().to_vec()).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
