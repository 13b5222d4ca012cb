//! Synthetic piecewise-constant depth scenes: a background plane occluded by random rectangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::depth::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectangleScene {
    pub height: usize,
    pub width: usize,
    pub min_rects: usize,
    pub max_rects: usize,
    /// Inclusive integer depth range.
    pub min_value: u16,
    pub max_value: u16,
}

impl Default for RectangleScene {
    fn default() -> Self {
        RectangleScene {
            height: 64,
            width: 64,
            min_rects: 3,
            max_rects: 8,
            min_value: 10,
            max_value: 255,
        }
    }
}

impl RectangleScene {
    /// Integer-valued, so the map survives a 16-bit PGM round trip unchanged.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DepthMap<f64> {
        let (h, w) = (self.height, self.width);
        let depth = |rng: &mut R| rng.gen_range(self.min_value..=self.max_value) as f64;
        let mut map = DepthMap::filled(h, w, depth(rng));
        let count = rng.gen_range(self.min_rects..=self.max_rects.max(self.min_rects));
        for _ in 0..count {
            let rh = rng.gen_range(h / 8..=h / 2).max(1);
            let rw = rng.gen_range(w / 8..=w / 2).max(1);
            let top = rng.gen_range(0..=h - rh);
            let left = rng.gen_range(0..=w - rw);
            let v = depth(rng);
            for y in top..top + rh {
                for x in left..left + rw {
                    map.set(y, x, v);
                }
            }
        }
        let (lo, hi) = (self.min_value as f64, self.max_value as f64);
        map.with_value_range(lo, hi).expect("values lie in the declared range")
    }

    /// `count` scenes named `rect000`, `rect001`, ...; scene `i` depends only on `seed` and `i`.
    pub fn dataset(&self, count: usize, seed: u64) -> Vec<(String, DepthMap<f64>)> {
        (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                (format!("rect{i:03}"), self.sample(&mut rng))
            })
            .collect()
    }
}
