//! Two-view generation: the SimCLR augmentation stack, per-view Gaussian
//! noise, and packaging of views with their masks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::patch::{patchify, sample_mask, Image, MaskVector, PatchSequence};
use crate::rng::{self, tag};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Area fraction range for random resized crop.
    pub crop_scale_range: (f64, f64),
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub flip_prob: f64,
    pub output_size: (usize, usize),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: (0.08, 1.0),
            jitter_strength: 1.0,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            flip_prob: 0.5,
            output_size: (32, 32),
        }
    }
}

impl AugmentConfig {
    /// Every augmentation off: views are the input resized to `output_size`.
    pub fn identity(output_size: (usize, usize)) -> Self {
        Self {
            crop_scale_range: (1.0, 1.0),
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            flip_prob: 0.0,
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        for (name, p) in [
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("flip_prob", self.flip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.jitter_strength < 0.0 || !self.jitter_strength.is_finite() {
            return Err(Error::InvalidInput(format!(
                "jitter strength {} must be non-negative",
                self.jitter_strength
            )));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::InvalidInput("output size must be positive".into()));
        }
        Ok(())
    }
}

/// Picks a crop window `(y0, x0, h, w)` with area fraction in `scale` and
/// aspect ratio in [3/4, 4/3]; falls back to the whole image after ten misses.
fn crop_window<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    scale: (f64, f64),
    rng: &mut R,
) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(log_lo..=log_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let y0 = rng.random_range(0..=height - h);
            let x0 = rng.random_range(0..=width - w);
            return (y0, x0, h, w);
        }
    }
    (0, 0, height, width)
}

/// Bilinear resize of a crop window (half-pixel centers, edge clamping).
fn resize_crop(img: &Image, window: (usize, usize, usize, usize), out: (usize, usize)) -> Image {
    let (y0, x0, h, w) = window;
    let (oh, ow) = out;
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut res = Image::filled(oh, ow, 0.0);
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let iy = fy.floor() as usize;
        let iy1 = (iy + 1).min(h - 1);
        let ty = (fy - iy as f64) as f32;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let ix = fx.floor() as usize;
            let ix1 = (ix + 1).min(w - 1);
            let tx = (fx - ix as f64) as f32;
            for c in 0..3 {
                let a = img.at(y0 + iy, x0 + ix, c);
                let b = img.at(y0 + iy, x0 + ix1, c);
                let d = img.at(y0 + iy1, x0 + ix, c);
                let e = img.at(y0 + iy1, x0 + ix1, c);
                let top = a + (b - a) * tx;
                let bot = d + (e - d) * tx;
                *res.at_mut(oy, ox, c) = top + (bot - top) * ty;
            }
        }
    }
    res
}

fn flip_horizontal(img: &mut Image) {
    for y in 0..img.height {
        for x in 0..img.width / 2 {
            for c in 0..3 {
                let a = img.at(y, x, c);
                let xb = img.width - 1 - x;
                *img.at_mut(y, x, c) = img.at(y, xb, c);
                *img.at_mut(y, xb, c) = a;
            }
        }
    }
}

#[inline]
fn luma(px: [f32; 3]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn clamp_unit(img: &mut Image) {
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Brightness, contrast, saturation, hue, in that order.
fn color_jitter<R: Rng + ?Sized>(img: &mut Image, strength: f64, rng: &mut R) {
    if strength <= 0.0 {
        return;
    }
    let factor = |rng: &mut R, amount: f64| -> f32 {
        rng.random_range((1.0 - amount).max(0.0)..=1.0 + amount) as f32
    };

    let b = factor(rng, 0.8 * strength);
    img.data.iter_mut().for_each(|v| *v *= b);
    clamp_unit(img);

    let c = factor(rng, 0.8 * strength);
    let mean = (0..img.height * img.width)
        .map(|i| luma([img.data[3 * i], img.data[3 * i + 1], img.data[3 * i + 2]]))
        .sum::<f32>()
        / (img.height * img.width) as f32;
    img.data.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
    clamp_unit(img);

    let s = factor(rng, 0.8 * strength);
    for px in img.data.chunks_exact_mut(3) {
        let g = luma([px[0], px[1], px[2]]);
        px.iter_mut().for_each(|v| *v = (*v - g) * s + g);
    }
    clamp_unit(img);

    let hue_amount = (0.2 * strength).min(0.5);
    let shift = rng.random_range(-hue_amount..=hue_amount) as f32;
    for px in img.data.chunks_exact_mut(3) {
        let mut hsv = rgb_to_hsv([px[0], px[1], px[2]]);
        hsv[0] += shift;
        px.copy_from_slice(&hsv_to_rgb(hsv));
    }
    clamp_unit(img);
}

fn grayscale(img: &mut Image) {
    for px in img.data.chunks_exact_mut(3) {
        let g = luma([px[0], px[1], px[2]]);
        px.iter_mut().for_each(|v| *v = g);
    }
}

/// Separable truncated Gaussian blur; kernel side is 10% of the image side,
/// rounded up to odd. Borders clamp to the edge pixel.
fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let side = img.height.max(img.width);
    let mut size = ((side as f64) * 0.1).ceil() as usize;
    if size.is_multiple_of(2) {
        size += 1;
    }
    let radius = (size / 2) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = Image::filled(img.height, img.width, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let xx = (x + k as isize - radius).clamp(0, w - 1);
                    acc += wgt * img.at(y as usize, xx as usize, c);
                }
                *tmp.at_mut(y as usize, x as usize, c) = acc;
            }
        }
    }
    let mut out = Image::filled(img.height, img.width, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let yy = (y + k as isize - radius).clamp(0, h - 1);
                    acc += wgt * tmp.at(yy as usize, x as usize, c);
                }
                *out.at_mut(y as usize, x as usize, c) = acc;
            }
        }
    }
    out
}

/// One augmented view: crop, flip, jitter, grayscale, blur, clamp.
pub fn augment<R: Rng + ?Sized>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let window = crop_window(image.height, image.width, cfg.crop_scale_range, rng);
    let mut view = resize_crop(image, window, cfg.output_size);
    if rng.random_bool(cfg.flip_prob) {
        flip_horizontal(&mut view);
    }
    color_jitter(&mut view, cfg.jitter_strength, rng);
    if rng.random_bool(cfg.grayscale_prob) {
        grayscale(&mut view);
    }
    if rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(0.1..=2.0);
        view = gaussian_blur(&view, sigma);
    }
    clamp_unit(&mut view);
    view
}

/// Two independently augmented views of `image`.
pub fn two_views<R: Rng + ?Sized>(
    image: &Image,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Image, Image)> {
    cfg.validate()?;
    Ok((augment(image, cfg, rng), augment(image, cfg, rng)))
}

/// A view with additive Gaussian noise: `pixels == clean + sigma * noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedView {
    pub pixels: Image,
    pub clean: Image,
    pub sigma: f32,
    pub noise: Image,
}

pub fn add_noise<R: Rng + ?Sized>(view: Image, sigma_max: f64, rng: &mut R) -> Result<NoisedView> {
    if !(sigma_max >= 0.0 && sigma_max.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "sigma_max {sigma_max} must be finite and non-negative"
        )));
    }
    let sigma = (rng.random::<f64>() * sigma_max) as f32;
    let noise_vals: Vec<f32> = (0..view.data.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    let pixels: Vec<f32> = view
        .data
        .iter()
        .zip(&noise_vals)
        .map(|(c, e)| c + sigma * e)
        .collect();
    Ok(NoisedView {
        pixels: Image::new(view.height, view.width, pixels)?,
        noise: Image::new(view.height, view.width, noise_vals)?,
        clean: view,
        sigma,
    })
}

/// One view of one image, ready for the model.
#[derive(Clone, Debug)]
pub struct ViewSample {
    pub view: NoisedView,
    pub mask: MaskVector,
    /// Patches of the noisy pixels; encoder input.
    pub noisy: PatchSequence,
    /// Patches of the clean view; reconstruction target.
    pub clean: PatchSequence,
    /// `sigma * noise` in patch layout; denoising target.
    pub noise_target: Mat<f32>,
}

/// Views for a batch of `n` images, stored view-major: item `v * n + i` is
/// view `v` of image `i`.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub n: usize,
    pub views_per_image: usize,
    pub items: Vec<ViewSample>,
}

impl ViewBatch {
    pub fn item(&self, view: usize, image: usize) -> &ViewSample {
        &self.items[view * self.n + image]
    }

    pub fn seq_len(&self) -> usize {
        self.items[0].noisy.len()
    }

    pub fn unmasked_len(&self) -> usize {
        self.items[0].mask.unmasked_count
    }
}

/// Settings that turn images into a [`ViewBatch`].
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSettings {
    pub augment: AugmentConfig,
    pub views_per_image: usize,
    pub mask_rate: f64,
    pub sigma_max: f64,
    pub patch: usize,
}

/// Per view: augment, add noise, patchify, mask. Every draw comes from the
/// stream keyed by `(seed, key.., image index, view index)`.
pub fn build_view_batch(
    images: &[&Image],
    settings: &ViewSettings,
    seed: u64,
    key: &[u64],
) -> Result<ViewBatch> {
    if images.is_empty() {
        return Err(Error::InvalidInput("empty image batch".into()));
    }
    if !(1..=2).contains(&settings.views_per_image) {
        return Err(Error::InvalidInput(format!(
            "views per image must be 1 or 2, got {}",
            settings.views_per_image
        )));
    }
    settings.augment.validate()?;
    let n = images.len();
    let mut items = Vec::with_capacity(n * settings.views_per_image);
    for v in 0..settings.views_per_image {
        for (i, image) in images.iter().enumerate() {
            let stream_key = |purpose: u64| {
                let mut k = key.to_vec();
                k.extend_from_slice(&[i as u64, v as u64, purpose]);
                k
            };
            let mut aug_rng = rng::stream(seed, &stream_key(tag::AUGMENT));
            let view = augment(image, &settings.augment, &mut aug_rng);
            let mut noise_rng = rng::stream(seed, &stream_key(tag::NOISE));
            let view = add_noise(view, settings.sigma_max, &mut noise_rng)?;
            let noisy = patchify(&view.pixels, settings.patch)?;
            let clean = patchify(&view.clean, settings.patch)?;
            let noise_patches = patchify(&view.noise, settings.patch)?;
            let sigma = view.sigma;
            let noise_target = Mat::from_vec(
                noise_patches.patches.rows(),
                noise_patches.patches.cols(),
                noise_patches
                    .patches
                    .as_slice()
                    .iter()
                    .map(|e| sigma * e)
                    .collect(),
            );
            let mut mask_rng = rng::stream(seed, &stream_key(tag::MASK));
            let mask = sample_mask(noisy.len(), settings.mask_rate, &mut mask_rng)?;
            items.push(ViewSample {
                view,
                mask,
                noisy,
                clean,
                noise_target,
            });
        }
    }
    Ok(ViewBatch {
        n,
        views_per_image: settings.views_per_image,
        items,
    })
}
