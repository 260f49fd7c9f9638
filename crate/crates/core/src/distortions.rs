//! Gaussian noise and Gaussian blur in the `[0, 255]` intensity domain, and
//! the mini-batch distortion policies used for training.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed::mix;

pub const MAX_INTENSITY: f32 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistortionKind {
    Clean,
    Noise,
    Blur,
}

impl DistortionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistortionKind::Clean => "clean",
            DistortionKind::Noise => "noise",
            DistortionKind::Blur => "blur",
        }
    }
}

impl fmt::Display for DistortionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Self::Clean),
            "noise" => Ok(Self::Noise),
            "blur" => Ok(Self::Blur),
            other => Err(Error::InvalidArgument(format!(
                "unknown distortion kind `{other}`"
            ))),
        }
    }
}

/// A distortion type and its level: the noise standard deviation in
/// intensity units, or the blur standard deviation in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSpec {
    pub kind: DistortionKind,
    pub level: f64,
}

impl DistortionSpec {
    pub const CLEAN: DistortionSpec = DistortionSpec {
        kind: DistortionKind::Clean,
        level: 0.0,
    };

    pub fn new(kind: DistortionKind, level: f64) -> Result<Self> {
        if !(level >= 0.0 && level.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "distortion level must be finite and nonnegative, got {level}"
            )));
        }
        Ok(Self { kind, level })
    }
}

/// Upper ends of the level ranges the distortions are sampled from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionRanges {
    pub noise_max: f64,
    pub blur_max: f64,
}

impl Default for DistortionRanges {
    fn default() -> Self {
        // Blur range scaled down for 32x32 inputs.
        Self {
            noise_max: 100.0,
            blur_max: 4.0,
        }
    }
}

impl DistortionRanges {
    pub fn max(&self, kind: DistortionKind) -> f64 {
        match kind {
            DistortionKind::Clean => 0.0,
            DistortionKind::Noise => self.noise_max,
            DistortionKind::Blur => self.blur_max,
        }
    }
}

/// Fractions of each mini-batch that stay clean or get noise/blur at a level
/// drawn from `U(0, max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPolicy {
    pub clean: f64,
    pub noise: f64,
    pub blur: f64,
    pub ranges: DistortionRanges,
}

impl BatchPolicy {
    pub fn new(clean: f64, noise: f64, blur: f64, ranges: DistortionRanges) -> Result<Self> {
        let p = Self {
            clean,
            noise,
            blur,
            ranges,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn all_clean(ranges: DistortionRanges) -> Self {
        Self {
            clean: 1.0,
            noise: 0.0,
            blur: 0.0,
            ranges,
        }
    }

    /// Half clean, half distorted with `kind`.
    pub fn half(kind: DistortionKind, ranges: DistortionRanges) -> Self {
        let mut p = Self::all_clean(ranges);
        match kind {
            DistortionKind::Clean => {}
            DistortionKind::Noise => {
                p.clean = 0.5;
                p.noise = 0.5;
            }
            DistortionKind::Blur => {
                p.clean = 0.5;
                p.blur = 0.5;
            }
        }
        p
    }

    /// Half clean, a quarter noise, a quarter blur.
    pub fn mixed(ranges: DistortionRanges) -> Self {
        Self {
            clean: 0.5,
            noise: 0.25,
            blur: 0.25,
            ranges,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fr = [self.clean, self.noise, self.blur];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidArgument(format!(
                "policy fractions must lie in [0, 1], got {fr:?}"
            )));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "policy fractions must sum to 1, got {fr:?}"
            )));
        }
        if !(self.ranges.noise_max >= 0.0 && self.ranges.blur_max >= 0.0) {
            return Err(Error::InvalidArgument("distortion ranges must be nonnegative".into()));
        }
        Ok(())
    }

    /// `(clean, noise, blur)` sample counts for a batch of `batch` images.
    /// Distorted counts are floored; the remainder stays clean.
    pub fn counts(&self, batch: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((f * batch as f64) + 1e-9).floor() as usize;
        let noise = floor(self.noise);
        let blur = floor(self.blur);
        (batch - noise - blur, noise, blur)
    }
}

/// Sampled and renormalized 1-D Gaussian of length `2 * ceil(3 sigma) + 1`.
pub fn gaussian_blur_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be finite and nonnegative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    Ok(k)
}

fn chw(image: &Tensor) -> Result<[usize; 3]> {
    match image.shape() {
        &[c, h, w] => Ok([c, h, w]),
        other => Err(Error::Shape(format!(
            "expected a (C, H, W) image, got {other:?}"
        ))),
    }
}

fn blur_plane(plane: &mut [f32], h: usize, w: usize, kernel: &[f64], tmp: &mut [f64]) {
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + j as isize - r, w);
                acc += kv * plane[y * w + sx] as f64;
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + j as isize - r, h);
                acc += kv * tmp[sy * w + x];
            }
            plane[y * w + x] = acc as f32;
        }
    }
}

fn blur_in_place(pixels: &mut [f32], [c, h, w]: [usize; 3], sigma: f64) -> Result<()> {
    let kernel = gaussian_blur_kernel(sigma)?;
    if kernel.len() == 1 {
        return Ok(());
    }
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        blur_plane(&mut pixels[ch * h * w..(ch + 1) * h * w], h, w, &kernel, &mut tmp);
    }
    Ok(())
}

fn noise_in_place(pixels: &mut [f32], sigma: f64, seed: u64) -> Result<()> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be finite and nonnegative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated above");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in pixels.iter_mut() {
        let v = *p as f64 + normal.sample(&mut rng);
        *p = v.clamp(0.0, MAX_INTENSITY as f64) as f32;
    }
    Ok(())
}

/// Separable Gaussian blur per channel with edge-replicate boundaries.
pub fn apply_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let dims = chw(image)?;
    let mut out = image.clone();
    blur_in_place(out.data_mut(), dims, sigma)?;
    Ok(out)
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every pixel of every channel and
/// clamps to `[0, 255]`.
pub fn apply_noise(image: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    chw(image)?;
    let mut out = image.clone();
    noise_in_place(out.data_mut(), sigma, seed)?;
    Ok(out)
}

/// Applies `spec` to one `(C, H, W)` image stored in `pixels`.
pub fn distort_in_place(
    pixels: &mut [f32],
    dims: [usize; 3],
    spec: DistortionSpec,
    seed: u64,
) -> Result<()> {
    match spec.kind {
        DistortionKind::Clean => Ok(()),
        DistortionKind::Noise => noise_in_place(pixels, spec.level, seed),
        DistortionKind::Blur => blur_in_place(pixels, dims, spec.level),
    }
}

fn batch_dims(batch: &Tensor) -> Result<[usize; 3]> {
    match batch.shape() {
        &[_, c, h, w] => Ok([c, h, w]),
        other => Err(Error::Shape(format!(
            "expected an (N, C, H, W) batch, got {other:?}"
        ))),
    }
}

/// Applies the same distortion to every image; image `i` uses noise seed
/// `mix(seed, i)`.
pub fn distort_all(batch: &Tensor, spec: DistortionSpec, seed: u64) -> Result<Tensor> {
    let dims = batch_dims(batch)?;
    let mut out = batch.clone();
    for i in 0..out.batch() {
        distort_in_place(out.sample_mut(i), dims, spec, mix(seed, i as u64))?;
    }
    Ok(out)
}

/// Distorts a mini-batch according to `policy`. The leading samples stay
/// clean, then come the noisy and finally the blurred ones; every distorted
/// sample draws its own level. Returns what was applied to each sample.
pub fn distort_batch(
    batch: &Tensor,
    policy: &BatchPolicy,
    seed: u64,
) -> Result<(Tensor, Vec<DistortionSpec>)> {
    policy.validate()?;
    let dims = batch_dims(batch)?;
    let b = batch.batch();
    let (clean, noise, _) = policy.counts(b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.clone();
    let mut applied = Vec::with_capacity(b);
    for i in 0..b {
        let kind = if i < clean {
            DistortionKind::Clean
        } else if i < clean + noise {
            DistortionKind::Noise
        } else {
            DistortionKind::Blur
        };
        let spec = match kind {
            DistortionKind::Clean => DistortionSpec::CLEAN,
            _ => {
                let max = policy.ranges.max(kind);
                let level = if max > 0.0 {
                    rng.random_range(0.0..max)
                } else {
                    0.0
                };
                DistortionSpec { kind, level }
            }
        };
        let noise_seed = rng.next_u64();
        distort_in_place(out.sample_mut(i), dims, spec, noise_seed)?;
        applied.push(spec);
    }
    Ok((out, applied))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> Tensor {
        Tensor::new(vec![c, h, w], (0..c * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn kernel_identity_at_zero_and_length_rule() {
        assert_eq!(gaussian_blur_kernel(0.0).unwrap(), vec![1.0]);
        assert_eq!(gaussian_blur_kernel(1.0).unwrap().len(), 7);
        assert_eq!(gaussian_blur_kernel(0.5).unwrap().len(), 5);
        assert_eq!(gaussian_blur_kernel(4.0).unwrap().len(), 25);
        assert!(gaussian_blur_kernel(-1.0).is_err());
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        for sigma in [0.3, 1.0, 2.7, 4.0, 10.0] {
            let k = gaussian_blur_kernel(sigma).unwrap();
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..k.len() {
                assert_eq!(k[i], k[k.len() - 1 - i]);
            }
        }
    }

    #[test]
    fn kernel_center_at_unit_sigma() {
        // Sampled Gaussian exp(-i^2/2) on i in [-3, 3], renormalized.
        let norm: f64 = (-3i32..=3).map(|i| (-(i * i) as f64 / 2.0).exp()).sum();
        let k = gaussian_blur_kernel(1.0).unwrap();
        assert!((k[3] - 1.0 / norm).abs() < 1e-15);
        assert!((k[3] - 0.399_050_2).abs() < 1e-6);
    }

    #[test]
    fn blur_keeps_constant_images() {
        let img = image(3, 9, 7, |_| 77.0);
        for sigma in [0.0, 0.7, 3.0] {
            assert_eq!(apply_blur(&img, sigma).unwrap(), img);
        }
    }

    #[test]
    fn blur_of_impulse_matches_dense_2d_convolution() {
        // Bright pixel away from the border: the separable result must equal
        // the outer product of the 1-D kernel evaluated directly.
        let (h, w) = (15, 15);
        let img = image(1, h, w, |i| if i == 7 * w + 7 { 255.0 } else { 0.0 });
        let out = apply_blur(&img, 1.0).unwrap();
        let g = |d: i64| (-(d * d) as f64 / 2.0).exp();
        let norm: f64 = (-3..=3).map(g).sum::<f64>();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (dy, dx) = (y - 7, x - 7);
                let expected = if dy.abs() <= 3 && dx.abs() <= 3 {
                    255.0 * g(dy) * g(dx) / (norm * norm)
                } else {
                    0.0
                };
                let got = out.data()[(y as usize) * w + x as usize] as f64;
                // Compared on the unit intensity scale.
                assert!(((got - expected) / 255.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn blur_stays_in_input_range() {
        let img = image(1, 12, 12, |i| ((i * 37) % 200) as f32 + 20.0);
        let out = apply_blur(&img, 2.2).unwrap();
        let (lo, hi) = (20.0, 219.0);
        assert!(out.data().iter().all(|&v| (lo..=hi).contains(&v)));
    }

    #[test]
    fn noise_statistics_on_mid_gray() {
        let img = image(1, 400, 400, |_| 128.0);
        let out = apply_noise(&img, 10.0, 99).unwrap();
        let n = out.len() as f64;
        let diffs: Vec<f64> = out.data().iter().map(|&v| v as f64 - 128.0).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.5, "mean {mean}");
        assert!((std - 10.0).abs() < 0.5, "std {std}");
    }

    #[test]
    fn noise_identity_determinism_and_clamping() {
        let img = image(3, 8, 8, |i| (i % 256) as f32);
        assert_eq!(apply_noise(&img, 0.0, 1).unwrap(), img);
        assert_eq!(apply_noise(&img, 30.0, 5).unwrap(), apply_noise(&img, 30.0, 5).unwrap());
        assert_ne!(apply_noise(&img, 30.0, 5).unwrap(), apply_noise(&img, 30.0, 6).unwrap());
        let loud = apply_noise(&img, 500.0, 2).unwrap();
        assert!(loud.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
        assert!(apply_noise(&img, -1.0, 0).is_err());
    }

    fn batch(b: usize) -> Tensor {
        Tensor::new(
            vec![b, 1, 6, 6],
            (0..b * 36).map(|i| ((i * 7) % 255) as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn all_clean_policy_is_identity() {
        let x = batch(8);
        let (y, specs) =
            distort_batch(&x, &BatchPolicy::all_clean(DistortionRanges::default()), 3).unwrap();
        assert_eq!(x, y);
        assert!(specs.iter().all(|s| *s == DistortionSpec::CLEAN));
    }

    #[test]
    fn half_and_quarter_splits() {
        let r = DistortionRanges::default();
        let count = |specs: &[DistortionSpec], k| specs.iter().filter(|s| s.kind == k).count();
        let (_, s) = distort_batch(&batch(32), &BatchPolicy::half(DistortionKind::Noise, r), 1)
            .unwrap();
        assert_eq!(count(&s, DistortionKind::Clean), 16);
        assert_eq!(count(&s, DistortionKind::Noise), 16);
        let (_, s) = distort_batch(&batch(32), &BatchPolicy::mixed(r), 1).unwrap();
        assert_eq!(
            [
                count(&s, DistortionKind::Clean),
                count(&s, DistortionKind::Noise),
                count(&s, DistortionKind::Blur)
            ],
            [16, 8, 8]
        );
        assert!(s[..16].iter().all(|d| d.kind == DistortionKind::Clean));
        assert!(s
            .iter()
            .all(|d| d.level >= 0.0 && d.level < r.max(d.kind).max(f64::MIN_POSITIVE)));
    }

    #[test]
    fn distort_batch_is_deterministic_and_reports_applied_specs() {
        let r = DistortionRanges::default();
        let x = batch(10);
        let a = distort_batch(&x, &BatchPolicy::mixed(r), 11).unwrap();
        let b = distort_batch(&x, &BatchPolicy::mixed(r), 11).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        // Re-applying a reported blur spec reproduces the sample.
        let i = a.1.iter().position(|s| s.kind == DistortionKind::Blur).unwrap();
        let mut pixels = x.sample(i).to_vec();
        distort_in_place(&mut pixels, [1, 6, 6], a.1[i], 0).unwrap();
        assert_eq!(pixels.as_slice(), a.0.sample(i));
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let p = BatchPolicy {
            clean: 0.5,
            noise: 0.3,
            blur: 0.3,
            ranges: DistortionRanges::default(),
        };
        assert!(distort_batch(&batch(4), &p, 0).is_err());
    }
}
