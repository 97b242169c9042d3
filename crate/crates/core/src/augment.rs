//! Seeded weak (geometric) and strong (photometric) augmentations.
//!
//! Weak transforms move pixels and are applied identically to the mask.
//! Strong transforms only change intensities, so a strong view built on top
//! of a weak view stays pixel-aligned with it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakConfig {
    /// Draw a rotation uniformly from {0, 90, 180, 270} degrees.
    pub rotate: bool,
    /// Probability of each of the horizontal and vertical flips.
    pub flip_prob: f64,
}

impl Default for WeakConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            flip_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrongConfig {
    pub brightness_prob: f64,
    /// Multiplicative brightness range; chosen over the additive shift half the time.
    pub brightness_scale: (f64, f64),
    pub brightness_shift: (f64, f64),
    pub contrast_prob: f64,
    pub contrast_scale: (f64, f64),
    pub blur_prob: f64,
    pub blur_kernel: usize,
    pub blur_sigma: (f64, f64),
}

impl Default for StrongConfig {
    fn default() -> Self {
        Self {
            brightness_prob: 0.5,
            brightness_scale: (0.6, 1.4),
            brightness_shift: (-0.2, 0.2),
            contrast_prob: 0.5,
            contrast_scale: (0.6, 1.4),
            blur_prob: 0.5,
            blur_kernel: 3,
            blur_sigma: (0.1, 1.0),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak: WeakConfig,
    pub strong: StrongConfig,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.strong;
        let probs = [self.weak.flip_prob, s.brightness_prob, s.contrast_prob, s.blur_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let ranges = [s.brightness_scale, s.brightness_shift, s.contrast_scale, s.blur_sigma];
        if ranges.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::Config("augmentation ranges must satisfy lo <= hi".into()));
        }
        if s.blur_kernel % 2 == 0 || s.blur_sigma.0 <= 0.0 {
            return Err(Error::Config("blur kernel must be odd and sigma positive".into()));
        }
        Ok(())
    }
}

/// Replayable record of a weak draw: rotate first, then flip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakTransform {
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl WeakTransform {
    pub fn draw(cfg: &WeakConfig, rng: &mut impl Rng) -> Self {
        let quarter_turns = if cfg.rotate { rng.random_range(0..4u8) } else { 0 };
        let flip_horizontal = rng.random_bool(cfg.flip_prob);
        let flip_vertical = rng.random_bool(cfg.flip_prob);
        Self {
            quarter_turns,
            flip_horizontal,
            flip_vertical,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    /// Applies to a tensor whose trailing two axes are `H x W`.
    pub fn apply<T: Scalar>(&self, image: &Tensor<T>) -> Tensor<T> {
        let mut out = image.rot90(self.quarter_turns);
        if self.flip_horizontal {
            out = out.flip_w();
        }
        if self.flip_vertical {
            out = out.flip_h();
        }
        out
    }

    pub fn apply_mask(&self, mask: &LabelMap) -> LabelMap {
        let mut out = mask.rot90(self.quarter_turns);
        if self.flip_horizontal {
            out = out.flip_w();
        }
        if self.flip_vertical {
            out = out.flip_h();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Brightness {
    Scale(f64),
    Shift(f64),
}

/// Replayable record of a strong draw, applied in field order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StrongTransform {
    pub brightness: Option<Brightness>,
    pub contrast: Option<f64>,
    pub blur_sigma: Option<f64>,
    pub blur_kernel: usize,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

impl StrongTransform {
    pub fn draw(cfg: &StrongConfig, rng: &mut impl Rng) -> Self {
        // Every draw is consumed regardless of the branch taken.
        let use_brightness = rng.random_bool(cfg.brightness_prob);
        let use_scale = rng.random_bool(0.5);
        let scale = uniform(rng, cfg.brightness_scale);
        let shift = uniform(rng, cfg.brightness_shift);
        let use_contrast = rng.random_bool(cfg.contrast_prob);
        let contrast = uniform(rng, cfg.contrast_scale);
        let use_blur = rng.random_bool(cfg.blur_prob);
        let sigma = uniform(rng, cfg.blur_sigma);
        Self {
            brightness: use_brightness.then_some(if use_scale {
                Brightness::Scale(scale)
            } else {
                Brightness::Shift(shift)
            }),
            contrast: use_contrast.then_some(contrast),
            blur_sigma: use_blur.then_some(sigma),
            blur_kernel: cfg.blur_kernel,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.brightness.is_none() && self.contrast.is_none() && self.blur_sigma.is_none()
    }

    /// Applies to an `H x W` image and clamps the result to `[0, 1]`.
    pub fn apply<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = match self.brightness {
            Some(Brightness::Scale(s)) => image.map(|v| v * T::lit(s)),
            Some(Brightness::Shift(s)) => image.map(|v| v + T::lit(s)),
            None => image.clone(),
        };
        if let Some(c) = self.contrast {
            let mean = out.mean();
            out = out.map(|v| (v - mean) * T::lit(c) + mean);
        }
        if let Some(sigma) = self.blur_sigma {
            out = gaussian_blur(&out, self.blur_kernel, sigma)?;
        }
        Ok(out.map(|v| v.max(T::zero()).min(T::one())))
    }
}

/// Normalized `k x k` Gaussian kernel, row-major.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut w: Vec<f64> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .map(|(dy, dx)| (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Blurs an `H x W` image with a `k x k` Gaussian; borders replicate the edge pixel.
pub fn gaussian_blur<T: Scalar>(image: &Tensor<T>, k: usize, sigma: f64) -> Result<Tensor<T>> {
    let (h, w) = image.dims2()?;
    if k % 2 == 0 || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "blur needs an odd kernel and positive sigma, got {k} / {sigma}"
        )));
    }
    let kernel: Vec<T> = gaussian_kernel(k, sigma).into_iter().map(T::lit).collect();
    let r = (k / 2) as isize;
    let src = image.data();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for dy in -r..=r {
                let sy = clamp(y as isize + dy, h);
                for dx in -r..=r {
                    let sx = clamp(x as isize + dx, w);
                    acc += kernel[((dy + r) * k as isize + dx + r) as usize] * src[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Weak augmentation of an `H x W` image and its optional mask.
pub fn weak_augment<T: Scalar>(
    image: &Tensor<T>,
    mask: Option<&LabelMap>,
    seed: u64,
    cfg: &WeakConfig,
) -> Result<(Tensor<T>, Option<LabelMap>, WeakTransform)> {
    let (h, w) = image.dims2()?;
    if let Some(m) = mask {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::shape("weak_augment", &[h, w], &[m.height(), m.width()]));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = WeakTransform::draw(cfg, &mut rng);
    Ok((t.apply(image), mask.map(|m| t.apply_mask(m)), t))
}

/// Strong augmentation of an `H x W` image with intensities in `[0, 1]`.
pub fn strong_augment<T: Scalar>(image: &Tensor<T>, seed: u64, cfg: &StrongConfig) -> Result<(Tensor<T>, StrongTransform)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = StrongTransform::draw(cfg, &mut rng);
    Ok((t.apply(image)?, t))
}
