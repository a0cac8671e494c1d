//! Training-time image augmentation and the progressive-resolution schedule.
//!
//! The augmentation order is random-resized-crop → color jitter → horizontal
//! flip; the jitter tuple from the recipe is read as (brightness, contrast,
//! saturation, hue) with contrast and hue disabled, leaving ±0.32
//! multiplicative brightness and saturation. Every draw is recorded in an
//! [`AppliedAug`] so label maps can be pushed through the same geometry.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{self, Image};

/// Augmentation strengths.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    /// Aspect-ratio bounds of the random crop.
    pub aspect_jitter: (f64, f64),
    /// Area-fraction bounds of the random crop.
    pub crop_scale: (f64, f64),
    /// Multiplicative brightness jitter half-range.
    pub brightness_jitter: f64,
    /// Multiplicative saturation jitter half-range.
    pub saturation_jitter: f64,
    pub hflip_prob: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            aspect_jitter: (0.75, 4.0 / 3.0),
            crop_scale: (0.08, 1.0),
            brightness_jitter: 0.32,
            saturation_jitter: 0.32,
            hflip_prob: 0.5,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aspect_jitter.0 > self.aspect_jitter.1 || self.crop_scale.0 > self.crop_scale.1 {
            return Err(Error::config("jitter ranges must have lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("hflip_prob outside [0,1]"));
        }
        Ok(())
    }

    /// Disable everything: crop becomes the full frame, no jitter, no flip.
    pub fn disabled() -> Self {
        Self {
            aspect_jitter: (1.0, 1.0),
            crop_scale: (1.0, 1.0),
            brightness_jitter: 0.0,
            saturation_jitter: 0.0,
            hflip_prob: 0.0,
        }
    }
}

/// The concrete draws of one augmentation, replayable onto label maps.
#[derive(Debug, Clone, Copy)]
pub struct AppliedAug {
    pub crop: (usize, usize, usize, usize), // top, left, height, width
    pub brightness: f64,
    pub saturation: f64,
    pub flipped: bool,
    pub out_size: usize,
}

/// Sample crop geometry the torchvision way: draw area and log-aspect up to
/// ten times, fall back to a centered maximal crop.
fn sample_crop(rng: &mut ChaCha8Rng, h: usize, w: usize, cfg: &AugConfig) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target_area = area * rng.gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let log_lo = cfg.aspect_jitter.0.ln();
        let log_hi = cfg.aspect_jitter.1.ln();
        let aspect = rng.gen_range(log_lo..=log_hi).exp();
        let cw = (target_area * aspect).sqrt().round() as usize;
        let ch = (target_area / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    // fallback: central crop at the nearest valid aspect
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < cfg.aspect_jitter.0 {
        let cw = w;
        (((cw as f64 / cfg.aspect_jitter.0).round() as usize).min(h), cw)
    } else if in_ratio > cfg.aspect_jitter.1 {
        let ch = h;
        (ch, ((ch as f64 * cfg.aspect_jitter.1).round() as usize).min(w))
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Draw augmentation parameters for an `h × w` input.
pub fn draw_aug(rng: &mut ChaCha8Rng, h: usize, w: usize, cfg: &AugConfig, out_size: usize) -> AppliedAug {
    let crop = sample_crop(rng, h, w, cfg);
    let b = if cfg.brightness_jitter > 0.0 {
        rng.gen_range(1.0 - cfg.brightness_jitter..=1.0 + cfg.brightness_jitter)
    } else {
        1.0
    };
    let s = if cfg.saturation_jitter > 0.0 {
        rng.gen_range(1.0 - cfg.saturation_jitter..=1.0 + cfg.saturation_jitter)
    } else {
        1.0
    };
    let flipped = cfg.hflip_prob > 0.0 && rng.gen_range(0.0..1.0) < cfg.hflip_prob;
    AppliedAug { crop, brightness: b, saturation: s, flipped, out_size }
}

/// Rec. 601 luma, the gray axis for saturation scaling.
fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Apply recorded augmentation parameters to an image.
pub fn apply_aug(img: &Image, aug: &AppliedAug) -> Result<Image> {
    let (top, left, ch, cw) = aug.crop;
    let cropped = imgproc::crop(img, top, left, ch, cw)?;
    let mut out = imgproc::resize(&cropped, aug.out_size, aug.out_size)?;
    if aug.brightness != 1.0 {
        out.mapv_inplace(|x| x * aug.brightness);
    }
    if aug.saturation != 1.0 {
        let (_, h, w) = out.dim();
        for y in 0..h {
            for x in 0..w {
                let (r, g, b) = (out[[0, y, x]], out[[1, y, x]], out[[2, y, x]]);
                let gray = luma(r, g, b);
                out[[0, y, x]] = gray + aug.saturation * (r - gray);
                out[[1, y, x]] = gray + aug.saturation * (g - gray);
                out[[2, y, x]] = gray + aug.saturation * (b - gray);
            }
        }
    }
    if aug.flipped {
        out = imgproc::hflip(&out);
    }
    imgproc::clamp01(&mut out);
    Ok(out)
}

/// Replay the geometric part of an augmentation onto an integer label map
/// (crop → nearest-neighbor resize → flip); photometric draws are ignored.
pub fn apply_aug_labels(labels: &Array2<u32>, aug: &AppliedAug) -> Result<Array2<u32>> {
    let (top, left, ch, cw) = aug.crop;
    let (h, w) = labels.dim();
    if top + ch > h || left + cw > w {
        return Err(Error::shape("label crop outside map"));
    }
    let cropped = labels.slice(ndarray::s![top..top + ch, left..left + cw]).to_owned();
    let mut out = imgproc::resize_nearest_labels(&cropped, aug.out_size, aug.out_size);
    if aug.flipped {
        out.invert_axis(ndarray::Axis(1));
    }
    Ok(out)
}

/// Draw and apply in one call.
pub fn augment(img: &Image, cfg: &AugConfig, rng: &mut ChaCha8Rng, out_size: usize) -> Result<(Image, AppliedAug)> {
    cfg.validate()?;
    let (_, h, w) = img.dim();
    if h == 0 || w == 0 {
        return Err(Error::shape("empty image"));
    }
    let aug = draw_aug(rng, h, w, cfg, out_size);
    let out = apply_aug(img, &aug)?;
    Ok((out, aug))
}

/// Progressive-resolution stages: each stage is (samples budget, resolution).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolutionSchedule {
    pub stages: Vec<(usize, usize)>,
}

impl ResolutionSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("schedule needs at least one stage"));
        }
        let mut prev_res = 0usize;
        for &(budget, res) in &self.stages {
            if budget == 0 {
                return Err(Error::config("stage budget must be positive"));
            }
            if res <= prev_res {
                return Err(Error::config("resolutions must be strictly increasing"));
            }
            prev_res = res;
        }
        Ok(())
    }

    /// Resolution of the stage whose half-open cumulative interval
    /// `[start, end)` contains `samples_seen`; past the total budget the
    /// final resolution applies.
    pub fn resolution_at(&self, samples_seen: usize) -> usize {
        let mut start = 0usize;
        for &(budget, res) in &self.stages {
            if samples_seen < start + budget {
                return res;
            }
            start += budget;
        }
        self.stages.last().map(|&(_, r)| r).unwrap_or(0)
    }

    pub fn total_budget(&self) -> usize {
        self.stages.iter().map(|&(b, _)| b).sum()
    }

    pub fn final_resolution(&self) -> usize {
        self.stages.last().map(|&(_, r)| r).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;

    fn test_image(h: usize, w: usize) -> Image {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            ((c * 31 + y * 7 + x * 3) % 11) as f64 / 11.0
        })
    }

    #[test]
    fn disabled_augmentation_is_resize_only() {
        let img = test_image(20, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, aug) = augment(&img, &AugConfig::disabled(), &mut rng, 10).unwrap();
        assert_eq!(aug.crop, (0, 0, 20, 20));
        assert!(!aug.flipped);
        let expect = imgproc::resize(&img, 10, 10).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn hflip_twice_restores() {
        let img = test_image(12, 12);
        let mut cfg = AugConfig::disabled();
        cfg.hflip_prob = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (once, _) = augment(&img, &cfg, &mut rng, 12).unwrap();
        let (twice, _) = augment(&once, &cfg, &mut rng, 12).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let img = test_image(32, 24);
        let cfg = AugConfig::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            augment(&img, &cfg, &mut rng, 16).unwrap()
        };
        let (a, aa) = run();
        let (b, ab) = run();
        assert_eq!(a, b);
        assert_eq!(aa.crop, ab.crop);
        assert_eq!(aa.flipped, ab.flipped);
    }

    #[test]
    fn output_stays_in_unit_range() {
        let img = test_image(40, 40);
        let cfg = AugConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (out, _) = augment(&img, &cfg, &mut rng, 16).unwrap();
            assert_eq!(out.dim(), (3, 16, 16));
            for v in out.iter() {
                assert!((0.0..=1.0).contains(v), "pixel {v} escaped [0,1]");
            }
        }
    }

    #[test]
    fn label_replay_tracks_geometry() {
        // labels colored by quadrant; a flip must mirror them identically to
        // the image path
        let labels = Array2::from_shape_fn((16, 16), |(y, x)| {
            (u32::from(y >= 8)) * 2 + u32::from(x >= 8)
        });
        let aug = AppliedAug {
            crop: (0, 0, 16, 16),
            brightness: 1.3,
            saturation: 0.8,
            flipped: true,
            out_size: 8,
        };
        let out = apply_aug_labels(&labels, &aug).unwrap();
        assert_eq!(out.dim(), (8, 8));
        assert_eq!(out[[0, 0]], 1); // right half flipped to the left
        assert_eq!(out[[0, 7]], 0);
        assert_eq!(out[[7, 0]], 3);
        assert_eq!(out[[7, 7]], 2);
    }

    #[test]
    fn schedule_boundaries_are_half_open() {
        let s = ResolutionSchedule { stages: vec![(10, 98), (8, 154), (4, 224), (2, 336)] };
        s.validate().unwrap();
        assert_eq!(s.resolution_at(0), 98);
        assert_eq!(s.resolution_at(9), 98);
        assert_eq!(s.resolution_at(10), 154); // boundary enters next stage
        assert_eq!(s.resolution_at(17), 154);
        assert_eq!(s.resolution_at(18), 224);
        assert_eq!(s.resolution_at(22), 336);
        assert_eq!(s.resolution_at(1000), 336); // clamp past the total
    }

    #[test]
    fn schedule_is_monotone() {
        let s = ResolutionSchedule { stages: vec![(5, 32), (5, 48), (5, 64)] };
        let mut prev = 0;
        for seen in 0..30 {
            let r = s.resolution_at(seen);
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn schedule_rejects_nonincreasing() {
        let s = ResolutionSchedule { stages: vec![(5, 64), (5, 48)] };
        assert!(s.validate().is_err());
        let s = ResolutionSchedule { stages: vec![(0, 64)] };
        assert!(s.validate().is_err());
    }
}
