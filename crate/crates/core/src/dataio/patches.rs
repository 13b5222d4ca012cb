//! Deterministic HR/LR training patch extraction.

use log::warn;

use super::manifest::{DatasetManifest, Degradation, Split};
use super::pnm::read_depth;
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::resample::{add_depth_noise, downsample, NoiseSpec};

/// HR patches whose value range is below this are dropped as degenerate.
pub const FLAT_PATCH_RANGE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub source: String,
    pub top: usize,
    pub left: usize,
    pub hr: DepthMap<f64>,
    pub lr: DepthMap<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchSet {
    pub factor: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub patches: Vec<Patch>,
    /// Images smaller than one patch.
    pub skipped_images: usize,
    pub dropped_flat: usize,
}

impl PatchSet {
    pub fn new(factor: usize, patch_size: usize, stride: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::InvalidArgument(format!("factor must be >= 2, got {factor}")));
        }
        if patch_size == 0 || !patch_size.is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!(
                "patch size {patch_size} must be a positive multiple of the factor {factor}"
            )));
        }
        if stride == 0 || !stride.is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!(
                "stride {stride} must be a positive multiple of the factor {factor}"
            )));
        }
        Ok(PatchSet {
            factor,
            patch_size,
            stride,
            ..Default::default()
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Degrades `gt` as a whole (cropped to a multiple of the factor) and cuts aligned patch
    /// pairs on a regular grid. `noise_seed` drives the optional noise of this image.
    pub fn add_image(
        &mut self,
        source: &str,
        gt: &DepthMap<f64>,
        mask: Option<&DepthMap<f64>>,
        noise: Option<NoiseSpec>,
    ) -> Result<()> {
        let (f, p) = (self.factor, self.patch_size);
        if let Some(m) = mask {
            m.ensure_same_dims(gt, "mask")?;
        }
        if gt.height() < p || gt.width() < p {
            self.skipped_images += 1;
            warn!("{source}: {}x{} is smaller than a {p}x{p} patch, skipped", gt.height(), gt.width());
            return Ok(());
        }
        let (h, w) = (gt.height() / f * f, gt.width() / f * f);
        let gt = gt.crop(0, 0, h, w)?;
        let mut lr = downsample(&gt, f)?;
        if let Some(spec) = noise {
            lr = add_depth_noise(&lr, &spec)?;
        }
        for top in (0..=h - p).step_by(self.stride) {
            for left in (0..=w - p).step_by(self.stride) {
                if let Some(m) = mask {
                    let valid = (top..top + p).all(|y| (left..left + p).all(|x| m.get(y, x) != 0.0));
                    if !valid {
                        continue;
                    }
                }
                let hr = gt.crop(top, left, p, p)?;
                let (lo, hi) = hr.data_range();
                if hi - lo < FLAT_PATCH_RANGE {
                    self.dropped_flat += 1;
                    continue;
                }
                self.patches.push(Patch {
                    source: source.to_string(),
                    top,
                    left,
                    hr,
                    lr: lr.crop(top / f, left / f, p / f, p / f)?,
                });
            }
        }
        Ok(())
    }

    /// Builds a patch set from in-memory ground-truth maps.
    pub fn from_maps(
        maps: &[(String, DepthMap<f64>)],
        degradation: &Degradation,
        patch_size: usize,
        stride: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut set = PatchSet::new(degradation.factor, patch_size, stride)?;
        for (index, (id, gt)) in maps.iter().enumerate() {
            set.add_image(id, gt, None, image_noise(degradation, seed, index))?;
        }
        Ok(set)
    }
}

/// Per-image noise stream derived from the manifest seed, the run seed and the image index.
fn image_noise(degradation: &Degradation, seed: u64, index: usize) -> Option<NoiseSpec> {
    degradation.noise.map(|n| NoiseSpec {
        delta: n.delta,
        seed: splitmix64(n.seed ^ splitmix64(seed ^ splitmix64(index as u64))),
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Reads the manifest entries of `split` (all entries when `None`) and extracts patches.
pub fn build_patchset(
    manifest: &DatasetManifest,
    split: Option<Split>,
    patch_size: usize,
    stride: usize,
    seed: u64,
) -> Result<PatchSet> {
    manifest.validate()?;
    let mut set = PatchSet::new(manifest.degradation.factor, patch_size, stride)?;
    for (index, entry) in manifest.entries.iter().enumerate() {
        if split.is_some_and(|s| s != entry.split) {
            continue;
        }
        let gt = read_depth(&entry.gt)?;
        let mask = entry.mask.as_deref().map(read_depth).transpose()?;
        let id = entry.gt.display().to_string();
        set.add_image(&id, &gt, mask.as_ref(), image_noise(&manifest.degradation, seed, index))?;
    }
    Ok(set)
}
