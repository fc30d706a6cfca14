//! Contrastive, reconstruction and denoising losses, their gradients, and the
//! weighted combination.

use crate::augment::ViewBatch;
use crate::error::{Error, Result};
use crate::patch::MaskVector;
use crate::tensor::{Mat, Real};

/// Objective weights parameterized by `(lambda_infonce, lambda)`:
/// `lambda_rec = (1 - lambda_infonce) * lambda`,
/// `lambda_denoise = (1 - lambda_infonce) * (1 - lambda)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_infonce: f64,
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(lambda_infonce: f64, lambda: f64) -> Result<Self> {
        let w = Self { lambda_infonce, lambda };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_infonce", self.lambda_infonce), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn infonce(&self) -> f64 {
        self.lambda_infonce
    }

    pub fn rec(&self) -> f64 {
        (1.0 - self.lambda_infonce) * self.lambda
    }

    pub fn denoise(&self) -> f64 {
        (1.0 - self.lambda_infonce) * (1.0 - self.lambda)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_infonce: f64,
    pub l_rec: f64,
    pub l_denoise: f64,
    pub l_total: f64,
}

fn check_unit_rows<T: Real>(u: &Mat<T>, name: &str) -> Result<()> {
    for r in 0..u.rows() {
        let n: f64 = u.row(r).iter().map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidInput(format!("{name} row {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

/// InfoNCE over `2n` anchors. For image `i`, both views anchor once; the
/// positive logit is `u1_i . u2_i / tau` and the negatives are all `2n - 2`
/// embeddings of other images. Returns the loss and its gradients w.r.t.
/// `u1` and `u2`.
pub fn info_nce_with_grad<T: Real>(u1: &Mat<T>, u2: &Mat<T>, tau: f64) -> Result<(f64, Mat<T>, Mat<T>)> {
    let n = u1.rows();
    if n == 0 {
        return Err(Error::InvalidInput("InfoNCE needs at least one image".into()));
    }
    if u2.shape() != u1.shape() {
        return Err(Error::Shape(format!("views {:?} vs {:?}", u1.shape(), u2.shape())));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature {tau} must be positive")));
    }
    check_unit_rows(u1, "u1")?;
    check_unit_rows(u2, "u2")?;

    let all = {
        let mut data = u1.as_slice().to_vec();
        data.extend_from_slice(u2.as_slice());
        Mat::from_vec(2 * n, u1.cols(), data)
    };
    let inv_tau = T::of(1.0 / tau);
    let mut logits = all.matmul_t(&all);
    logits.scale(inv_tau);

    let mut grad = Mat::<T>::zeros(2 * n, u1.cols());
    let mut total = 0.0f64;
    let norm = T::of(1.0 / (2 * n) as f64);
    let mut cand: Vec<(usize, T)> = Vec::with_capacity(2 * n);
    for v in 0..2 {
        for i in 0..n {
            let anchor = v * n + i;
            let pos = logits.get(i, n + i);
            cand.clear();
            for j in (0..2 * n).filter(|&j| j % n != i) {
                cand.push((j, logits.get(anchor, j)));
            }
            let max = cand.iter().map(|c| c.1).fold(pos, T::max);
            let denom = (pos - max).exp() + cand.iter().map(|c| (c.1 - max).exp()).sum::<T>();
            let lse = max + denom.ln();
            total += (lse - pos).to_f64().unwrap();

            let q_pos = (pos - max).exp() / denom;
            let g_pos = (q_pos - T::one()) * inv_tau * norm;
            for k in 0..u1.cols() {
                let a = all.get(i, k);
                let b = all.get(n + i, k);
                grad.set(i, k, grad.get(i, k) + g_pos * b);
                grad.set(n + i, k, grad.get(n + i, k) + g_pos * a);
            }
            for &(j, s) in &cand {
                let g = (s - max).exp() / denom * inv_tau * norm;
                for k in 0..u1.cols() {
                    let a = all.get(anchor, k);
                    let b = all.get(j, k);
                    grad.set(anchor, k, grad.get(anchor, k) + g * b);
                    grad.set(j, k, grad.get(j, k) + g * a);
                }
            }
        }
    }
    let g = grad.into_vec();
    let half = n * u1.cols();
    Ok((
        total / (2 * n) as f64,
        Mat::from_vec(n, u1.cols(), g[..half].to_vec()),
        Mat::from_vec(n, u1.cols(), g[half..].to_vec()),
    ))
}

pub fn info_nce<T: Real>(u1: &Mat<T>, u2: &Mat<T>, tau: f64) -> Result<f64> {
    info_nce_with_grad(u1, u2, tau).map(|r| r.0)
}

/// Mean squared error over the pixels of patches selected by `keep(masked)`,
/// with its gradient. An empty selection gives 0.
fn masked_mse<T: Real>(
    target: &Mat<T>,
    pred: &Mat<T>,
    mask: &MaskVector,
    keep_masked: bool,
) -> Result<(f64, Mat<T>)> {
    if target.shape() != pred.shape() || target.rows() != mask.len() {
        return Err(Error::Shape(format!(
            "target {:?}, prediction {:?}, mask of length {}",
            target.shape(),
            pred.shape(),
            mask.len()
        )));
    }
    let selected = mask.bits.iter().filter(|&&b| b == keep_masked).count();
    let mut grad = Mat::zeros(pred.rows(), pred.cols());
    if selected == 0 {
        return Ok((0.0, grad));
    }
    let count = (selected * pred.cols()) as f64;
    let scale = T::of(2.0 / count);
    let mut sum = 0.0;
    for (t, &b) in mask.bits.iter().enumerate() {
        if b != keep_masked {
            continue;
        }
        let g = grad.row_mut(t);
        for (k, (p, y)) in pred.row(t).iter().zip(target.row(t)).enumerate() {
            let r = *p - *y;
            sum += r.to_f64().unwrap().powi(2);
            g[k] = scale * r;
        }
    }
    Ok((sum / count, grad))
}

/// Per-pixel mean squared error on masked patches against the clean view.
pub fn recon_loss<T: Real>(clean: &Mat<T>, xhat: &Mat<T>, mask: &MaskVector) -> Result<f64> {
    masked_mse(clean, xhat, mask, true).map(|r| r.0)
}

pub fn recon_loss_with_grad<T: Real>(clean: &Mat<T>, xhat: &Mat<T>, mask: &MaskVector) -> Result<(f64, Mat<T>)> {
    masked_mse(clean, xhat, mask, true)
}

/// Per-pixel mean squared error on visible patches against `sigma * e`.
pub fn denoise_loss<T: Real>(noise: &Mat<T>, xhat: &Mat<T>, mask: &MaskVector) -> Result<f64> {
    masked_mse(noise, xhat, mask, false).map(|r| r.0)
}

pub fn denoise_loss_with_grad<T: Real>(noise: &Mat<T>, xhat: &Mat<T>, mask: &MaskVector) -> Result<(f64, Mat<T>)> {
    masked_mse(noise, xhat, mask, false)
}

/// What the model produced for a batch. `embeddings` has one unit row per
/// view (view-major, as in [`ViewBatch`]); `reconstructions` stacks `T` rows
/// per view.
pub struct ModelOutputs<T> {
    pub embeddings: Option<Mat<T>>,
    pub reconstructions: Option<Mat<T>>,
}

/// Gradients of the weighted total w.r.t. the model outputs.
pub struct OutputGrads<T> {
    pub embeddings: Option<Mat<T>>,
    pub reconstructions: Option<Mat<T>>,
}

/// Averages each term over the `views * n` image-views and applies the
/// weights once. Terms whose inputs are absent report 0.
pub fn loss_report<T: Real>(
    batch: &ViewBatch,
    outputs: &ModelOutputs<T>,
    weights: &LossWeights,
    tau: f64,
) -> Result<(LossReport, OutputGrads<T>)> {
    let n = batch.n;
    let views = batch.items.len();
    let t_len = batch.seq_len();

    let mut l_infonce = 0.0;
    let mut d_emb = None;
    if let Some(u) = &outputs.embeddings {
        if batch.views_per_image != 2 || u.rows() != 2 * n {
            return Err(Error::Shape(format!(
                "contrastive term needs two views per image, got {} embeddings for {n} images",
                u.rows()
            )));
        }
        let u1 = Mat::from_vec(n, u.cols(), u.as_slice()[..n * u.cols()].to_vec());
        let u2 = Mat::from_vec(n, u.cols(), u.as_slice()[n * u.cols()..].to_vec());
        let (l, g1, g2) = info_nce_with_grad(&u1, &u2, tau)?;
        l_infonce = l;
        let w = T::of(weights.infonce());
        let mut g = g1.into_vec();
        g.extend(g2.into_vec());
        let mut g = Mat::from_vec(2 * n, u.cols(), g);
        g.scale(w);
        d_emb = Some(g);
    }

    let (mut l_rec, mut l_denoise) = (0.0, 0.0);
    let mut d_rec = None;
    if let Some(xhat) = &outputs.reconstructions {
        if xhat.rows() != views * t_len {
            return Err(Error::Shape(format!(
                "{} reconstruction rows for {views} views of {t_len} patches",
                xhat.rows()
            )));
        }
        let inv_views = 1.0 / views as f64;
        let (w_rec, w_den) = (weights.rec() * inv_views, weights.denoise() * inv_views);
        let mut grad = Mat::zeros(xhat.rows(), xhat.cols());
        for (v, item) in batch.items.iter().enumerate() {
            let pred = Mat::from_vec(
                t_len,
                xhat.cols(),
                xhat.as_slice()[v * t_len * xhat.cols()..(v + 1) * t_len * xhat.cols()].to_vec(),
            );
            let (lr, gr) = recon_loss_with_grad(&item.clean.patches.cast(), &pred, &item.mask)?;
            let (ld, gd) = denoise_loss_with_grad(&item.noise_target.cast(), &pred, &item.mask)?;
            l_rec += lr * inv_views;
            l_denoise += ld * inv_views;
            let out = &mut grad.as_mut_slice()[v * t_len * xhat.cols()..(v + 1) * t_len * xhat.cols()];
            for ((o, a), b) in out.iter_mut().zip(gr.as_slice()).zip(gd.as_slice()) {
                *o = T::of(w_rec) * *a + T::of(w_den) * *b;
            }
        }
        d_rec = Some(grad);
    }

    for (name, v) in [("infonce", l_infonce), ("rec", l_rec), ("denoise", l_denoise)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    let l_total = weights.infonce() * l_infonce + weights.rec() * l_rec + weights.denoise() * l_denoise;
    Ok((
        LossReport {
            l_infonce,
            l_rec,
            l_denoise,
            l_total,
        },
        OutputGrads {
            embeddings: d_emb,
            reconstructions: d_rec,
        },
    ))
}
