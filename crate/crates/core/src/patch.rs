//! Patch decomposition, mask sampling, and the gather/scatter routing that
//! sends only unmasked tokens through the encoder.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

/// An `height x width x 3` image stored channel-interleaved, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f32 {
        &mut self.data[(y * self.width + x) * 3 + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// An image cut into `grid_h * grid_w` square patches, one row per patch.
///
/// Patch `t` covers rows `(t / grid_w) * p ..` and columns `(t % grid_w) * p ..`.
/// Within a patch, values are ordered row, column, channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patches: Mat<f32>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn patchify(image: &Image, p: usize) -> Result<PatchSequence> {
    if p == 0 || !image.height.is_multiple_of(p) || !image.width.is_multiple_of(p) {
        return Err(Error::InvalidInput(format!(
            "patch size {p} does not divide image {}x{}",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / p, image.width / p);
    let dim = p * p * 3;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..p {
                let y = gy * p + dy;
                let start = (y * image.width + gx * p) * 3;
                out.extend_from_slice(&image.data[start..start + p * 3]);
            }
        }
    }
    Ok(PatchSequence {
        patches: Mat::from_vec(gh * gw, dim, out),
        grid_h: gh,
        grid_w: gw,
        patch: p,
    })
}

pub fn unpatchify(seq: &PatchSequence) -> Image {
    let p = seq.patch;
    let (h, w) = (seq.grid_h * p, seq.grid_w * p);
    let mut data = vec![0.0; h * w * 3];
    for t in 0..seq.len() {
        let (gy, gx) = (t / seq.grid_w, t % seq.grid_w);
        let row = seq.patches.row(t);
        for dy in 0..p {
            let y = gy * p + dy;
            let start = (y * w + gx * p) * 3;
            data[start..start + p * 3].copy_from_slice(&row[dy * p * 3..(dy + 1) * p * 3]);
        }
    }
    Image {
        height: h,
        width: w,
        data,
    }
}

/// Per-view masking plan. `bits[t] == true` means patch `t` is hidden from the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskVector {
    pub bits: Vec<bool>,
    pub unmasked_count: usize,
}

impl MaskVector {
    pub fn none(len: usize) -> Self {
        Self {
            bits: vec![false; len],
            unmasked_count: len,
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        let unmasked_count = bits.iter().filter(|b| !**b).count();
        Self {
            bits,
            unmasked_count,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.bits.len() - self.unmasked_count
    }
}

/// Number of patches left visible: `T - round(mask_rate * T)`, ties away from zero.
pub fn unmasked_count(len: usize, mask_rate: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&mask_rate) {
        return Err(Error::InvalidInput(format!(
            "mask rate {mask_rate} outside [0, 1)"
        )));
    }
    let masked = (mask_rate * len as f64).round() as usize;
    let kept = len.saturating_sub(masked);
    if kept == 0 {
        return Err(Error::InvalidInput(format!(
            "mask rate {mask_rate} leaves no visible patch out of {len}"
        )));
    }
    Ok(kept)
}

/// Draws a mask with exactly `T - round(mask_rate * T)` visible patches,
/// uniform over subsets of that size.
pub fn sample_mask<R: Rng + ?Sized>(len: usize, mask_rate: f64, rng: &mut R) -> Result<MaskVector> {
    let kept = unmasked_count(len, mask_rate)?;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let mut bits = vec![false; len];
    for &t in &order[..len - kept] {
        bits[t] = true;
    }
    Ok(MaskVector {
        bits,
        unmasked_count: kept,
    })
}

/// Where each kept token came from, and where each original position went.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGatherPlan {
    pub kept_indices: Vec<usize>,
    pub inverse_map: Vec<Option<usize>>,
}

impl TokenGatherPlan {
    pub fn from_mask(mask: &MaskVector) -> Self {
        let mut kept_indices = Vec::with_capacity(mask.unmasked_count);
        let mut inverse_map = vec![None; mask.len()];
        for (t, &masked) in mask.bits.iter().enumerate() {
            if !masked {
                inverse_map[t] = Some(kept_indices.len());
                kept_indices.push(t);
            }
        }
        Self {
            kept_indices,
            inverse_map,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.inverse_map.len()
    }

    pub fn kept_len(&self) -> usize {
        self.kept_indices.len()
    }
}

pub fn gather_unmasked<T: Real>(tokens: &Mat<T>, mask: &MaskVector) -> Result<(Mat<T>, TokenGatherPlan)> {
    if tokens.rows() != mask.len() {
        return Err(Error::Shape(format!(
            "{} tokens but mask of length {}",
            tokens.rows(),
            mask.len()
        )));
    }
    let plan = TokenGatherPlan::from_mask(mask);
    Ok((tokens.select_rows(&plan.kept_indices), plan))
}

pub fn scatter_with_mask_token<T: Real>(
    encoded: &Mat<T>,
    plan: &TokenGatherPlan,
    mask_token: &[T],
) -> Result<Mat<T>> {
    if encoded.rows() != plan.kept_len() || mask_token.len() != encoded.cols() {
        return Err(Error::Shape(format!(
            "scatter of {}x{} with plan keeping {} and mask token of width {}",
            encoded.rows(),
            encoded.cols(),
            plan.kept_len(),
            mask_token.len()
        )));
    }
    let mut out = Mat::zeros(plan.seq_len(), encoded.cols());
    for (t, slot) in plan.inverse_map.iter().enumerate() {
        let src = match slot {
            Some(k) => encoded.row(*k),
            None => mask_token,
        };
        out.row_mut(t).copy_from_slice(src);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn letters() -> Mat<f64> {
        Mat::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0])
    }

    #[test]
    fn vit_b_patch_count() {
        let seq = patchify(&Image::filled(224, 224, 0.5), 16).unwrap();
        assert_eq!(seq.len(), 196);
        assert_eq!(seq.patches.cols(), 16 * 16 * 3);
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let seq = patchify(&Image::filled(4, 4, 0.3), 2).unwrap();
        assert_eq!(seq.len(), 4);
        assert!(seq.patches.as_slice().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn patch_ordering_is_row_major() {
        let mut img = Image::filled(4, 6, 0.0);
        *img.at_mut(2, 4, 1) = 1.0;
        let seq = patchify(&img, 2).unwrap();
        assert_eq!((seq.grid_h, seq.grid_w), (2, 3));
        // (y=2,x=4) lies in grid cell (1,2) = patch 5, offset (0,0), channel 1
        assert_eq!(seq.patches.get(5, 1), 1.0);
        assert_eq!(seq.patches.as_slice().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn non_dividing_patch_rejected() {
        assert!(matches!(
            patchify(&Image::filled(10, 8, 0.0), 4),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn default_mask_rate_keeps_half() {
        let m = sample_mask(196, 0.5, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(m.unmasked_count, 98);
        assert_eq!(m.bits.iter().filter(|b| **b).count(), 98);
    }

    #[test]
    fn zero_rate_masks_nothing() {
        let m = sample_mask(64, 0.0, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(m, MaskVector::none(64));
    }

    #[test]
    fn unmasked_count_rounding() {
        assert_eq!(unmasked_count(64, 0.9).unwrap(), 6);
        assert_eq!(unmasked_count(64, 0.75).unwrap(), 16);
        // 0.5 * 5 = 2.5 rounds away from zero to 3 masked
        assert_eq!(unmasked_count(5, 0.5).unwrap(), 2);
    }

    #[test]
    fn bad_rates_rejected() {
        let mut r = rng::stream(0, &[]);
        assert!(sample_mask(64, 1.0, &mut r).is_err());
        assert!(sample_mask(64, -0.1, &mut r).is_err());
        assert!(sample_mask(4, 0.9, &mut r).is_err());
    }

    #[test]
    fn mask_marginals_within_three_sigma() {
        let draws = 10_000;
        let mut counts = [0usize; 64];
        let mut r = rng::stream(11, &[]);
        for _ in 0..draws {
            let m = sample_mask(64, 0.5, &mut r).unwrap();
            for (c, b) in counts.iter_mut().zip(&m.bits) {
                *c += usize::from(*b);
            }
        }
        let sd = (draws as f64 * 0.25).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * 0.5).abs() < 3.0 * sd, "{c}");
        }
    }

    #[test]
    fn gather_selects_unmasked_in_order() {
        let mask = MaskVector::from_bits(vec![true, false, true, false]);
        let (g, plan) = gather_unmasked(&letters(), &mask).unwrap();
        assert_eq!(g.as_slice(), &[2.0, 4.0]);
        assert_eq!(plan.kept_indices, vec![1, 3]);
    }

    #[test]
    fn gather_all_visible_is_identity() {
        let (g, _) = gather_unmasked(&letters(), &MaskVector::none(4)).unwrap();
        assert_eq!(g, letters());
    }

    #[test]
    fn gather_length_mismatch_rejected() {
        assert!(gather_unmasked(&letters(), &MaskVector::none(3)).is_err());
    }

    #[test]
    fn scatter_places_mask_token() {
        let mask = MaskVector::from_bits(vec![true, false, true, false]);
        let plan = TokenGatherPlan::from_mask(&mask);
        let enc = Mat::from_vec(2, 1, vec![2.0, 4.0]);
        let out = scatter_with_mask_token(&enc, &plan, &[9.0]).unwrap();
        assert_eq!(out.as_slice(), &[9.0, 2.0, 9.0, 4.0]);
    }

    #[test]
    fn scatter_without_masking_is_identity() {
        let plan = TokenGatherPlan::from_mask(&MaskVector::none(4));
        let out = scatter_with_mask_token(&letters(), &plan, &[0.0]).unwrap();
        assert_eq!(out, letters());
    }

    #[test]
    fn scatter_inconsistent_plan_rejected() {
        let plan = TokenGatherPlan::from_mask(&MaskVector::none(4));
        let enc = Mat::<f64>::zeros(3, 1);
        assert!(scatter_with_mask_token(&enc, &plan, &[0.0]).is_err());
        assert!(scatter_with_mask_token(&letters(), &plan, &[0.0, 1.0]).is_err());
    }
}
