//! The Vision Transformer: encoder over visible tokens, projection head for the
//! contrastive branch, noise-level embedding, and the lightweight decoder.


use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_backward, glorot_uniform, relu, relu_backward, trunc_normal, BatchNorm, BatchNormCache, Block,
    BlockCache, LayerNorm, Linear, NormCache, NormMode, Params,
};
use crate::patch::TokenGatherPlan;
use crate::rng::{self, tag};
use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerSpec {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSpec {
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub image: (usize, usize),
    pub patch: usize,
    pub encoder: TransformerSpec,
    pub decoder: TransformerSpec,
    pub head: HeadSpec,
    /// Multiplier applied to the noise level before the sinusoid.
    pub sigma_scale: f64,
}

pub const PAPER_DECODER: TransformerSpec = TransformerSpec {
    depth: 8,
    width: 512,
    heads: 16,
    mlp_dim: 2048,
};

pub const PAPER_HEAD: HeadSpec = HeadSpec {
    hidden_dim: 4096,
    hidden_layers: 2,
    out_dim: 128,
};

pub const VIT_S: TransformerSpec = TransformerSpec {
    depth: 12,
    width: 384,
    heads: 6,
    mlp_dim: 1536,
};

pub const VIT_B: TransformerSpec = TransformerSpec {
    depth: 12,
    width: 768,
    heads: 12,
    mlp_dim: 3072,
};

pub const VIT_L: TransformerSpec = TransformerSpec {
    depth: 24,
    width: 1024,
    heads: 16,
    mlp_dim: 4096,
};

pub const VIT_H: TransformerSpec = TransformerSpec {
    depth: 32,
    width: 1280,
    heads: 16,
    mlp_dim: 5120,
};

pub const VIT_MICRO: TransformerSpec = TransformerSpec {
    depth: 6,
    width: 192,
    heads: 3,
    mlp_dim: 768,
};

impl ModelSpec {
    /// A 224x224, patch-16 model with the 8x512 decoder and 4096-wide head.
    pub fn imagenet(encoder: TransformerSpec) -> Self {
        Self {
            image: (224, 224),
            patch: 16,
            encoder,
            decoder: PAPER_DECODER,
            head: PAPER_HEAD,
            sigma_scale: 1000.0,
        }
    }

    pub fn vit_b() -> Self {
        Self::imagenet(VIT_B)
    }

    pub fn vit_l() -> Self {
        Self::imagenet(VIT_L)
    }

    /// Desk-scale default for 32x32 inputs with 4x4 patches.
    pub fn micro() -> Self {
        Self {
            image: (32, 32),
            patch: 4,
            encoder: VIT_MICRO,
            decoder: TransformerSpec {
                depth: 2,
                width: 128,
                heads: 4,
                mlp_dim: 512,
            },
            head: HeadSpec {
                hidden_dim: 768,
                hidden_layers: 2,
                out_dim: 128,
            },
            sigma_scale: 1000.0,
        }
    }

    /// The smallest useful shape: depth 1, width 8, two heads.
    pub fn tiny(image: (usize, usize), patch: usize) -> Self {
        Self {
            image,
            patch,
            encoder: TransformerSpec {
                depth: 1,
                width: 8,
                heads: 2,
                mlp_dim: 16,
            },
            decoder: TransformerSpec {
                depth: 1,
                width: 8,
                heads: 2,
                mlp_dim: 16,
            },
            head: HeadSpec {
                hidden_dim: 12,
                hidden_layers: 2,
                out_dim: 4,
            },
            sigma_scale: 1000.0,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image.0 / self.patch, self.image.1 / self.patch)
    }

    pub fn seq_len(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patch == 0 || !self.image.0.is_multiple_of(self.patch) || !self.image.1.is_multiple_of(self.patch) {
            problems.push(format!("patch {} must divide image {:?}", self.patch, self.image));
        }
        for (name, t) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            if t.width == 0 || t.heads == 0 || t.width % t.heads != 0 {
                problems.push(format!("{name} width {} not divisible by heads {}", t.width, t.heads));
            }
        }
        if !self.encoder.width.is_multiple_of(4) {
            problems.push(format!(
                "encoder width {} must be a multiple of 4 for 2-D sin-cos positions",
                self.encoder.width
            ));
        }
        if self.head.out_dim == 0 || self.head.out_dim >= self.encoder.width {
            problems.push(format!(
                "projection dim {} must be in 1..{}",
                self.head.out_dim, self.encoder.width
            ));
        }
        if self.encoder.depth == 0 {
            problems.push("encoder depth must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(problems.join("; ")))
        }
    }
}

/// Fixed 2-D sin-cos table, one row per grid cell in row-major order. The
/// first half of each row encodes the row coordinate, the second half the column.
pub fn sincos_2d(grid_h: usize, grid_w: usize, dim: usize) -> Mat<f64> {
    assert_eq!(dim % 4, 0);
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    Mat::from_fn(grid_h * grid_w, dim, |t, j| {
        let pos = if j < dim / 2 { t / grid_w } else { t % grid_w } as f64;
        let j = j % (dim / 2);
        if j < quarter {
            (pos * omega[j]).sin()
        } else {
            (pos * omega[j - quarter]).cos()
        }
    })
}

/// `s_{2k} = sin(scale * sigma * w_k)`, `s_{2k+1} = cos(scale * sigma * w_k)`,
/// `w_k = 10000^(-2k/d)`.
pub fn sigma_sinusoid(sigma: f64, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let k = j / 2;
            let omega = scale * 10000f64.powf(-((2 * k) as f64) / dim as f64);
            if j % 2 == 0 {
                (sigma * omega).sin()
            } else {
                (sigma * omega).cos()
            }
        })
        .collect()
}

/// Projection head: `hidden_layers` of linear, batch norm, ReLU, then a
/// linear map to `out_dim` and L2 normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead<T> {
    pub hidden: Vec<(Linear<T>, BatchNorm<T>)>,
    pub out: Linear<T>,
}

pub struct HeadCache<T> {
    views: usize,
    seq_len: usize,
    inputs: Vec<Mat<T>>,
    bn: Vec<BatchNormCache<T>>,
    pre_relu: Vec<Mat<T>>,
    last_in: Mat<T>,
    u: Mat<T>,
    norms: Vec<T>,
}

impl<T> HeadCache<T> {
    pub fn batch_norm_caches(&self) -> &[BatchNormCache<T>] {
        &self.bn
    }
}

#[derive(Clone, Debug)]
pub struct Vit<T> {
    pub spec: ModelSpec,
    pub patch_embed: Linear<T>,
    pub encoder: Vec<Block<T>>,
    pub encoder_norm: LayerNorm<T>,
    pub mask_token: Mat<T>,
    pub sigma_mlp: (Linear<T>, Linear<T>),
    pub decoder_embed: Linear<T>,
    pub decoder: Vec<Block<T>>,
    pub decoder_norm: LayerNorm<T>,
    pub decoder_out: Linear<T>,
    pub head: ProjectionHead<T>,
    pos: Mat<T>,
}

pub struct EncoderCache<T> {
    x: Mat<T>,
    blocks: Vec<BlockCache<T>>,
    norm: NormCache<T>,
}

pub struct SigmaCache<T> {
    sinusoid: Mat<T>,
    pre: Mat<T>,
    act: Mat<T>,
}

pub struct DecoderCache<T> {
    embed_in: Mat<T>,
    blocks: Vec<BlockCache<T>>,
    norm: NormCache<T>,
    norm_out: Mat<T>,
    plans: Vec<TokenGatherPlan>,
    has_sigma: bool,
}

fn check_finite<T: Real>(m: &Mat<T>, stage: &'static str, layer: usize) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { stage, layer })
    }
}

impl<T: Real> Vit<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let e = spec.encoder;
        let dcd = spec.decoder;
        let pd = spec.patch_dim();
        let d = e.width;
        let mut hidden = Vec::with_capacity(spec.head.hidden_layers);
        let mut in_dim = d;
        for _ in 0..spec.head.hidden_layers {
            hidden.push((
                Linear::new(trunc_normal(in_dim, spec.head.hidden_dim, 0.02, &mut rng), false),
                BatchNorm::new(spec.head.hidden_dim),
            ));
            in_dim = spec.head.hidden_dim;
        }
        let (gh, gw) = spec.grid();
        Ok(Self {
            patch_embed: Linear::new(glorot_uniform(pd, d, &mut rng), true),
            encoder: (0..e.depth).map(|_| Block::new(d, e.heads, e.mlp_dim, &mut rng)).collect(),
            encoder_norm: LayerNorm::new(d),
            mask_token: trunc_normal(1, d, 0.02, &mut rng),
            sigma_mlp: (
                Linear::new(trunc_normal(d, d, 0.02, &mut rng), true),
                Linear::new(trunc_normal(d, d, 0.02, &mut rng), true),
            ),
            decoder_embed: Linear::new(trunc_normal(d, dcd.width, 0.02, &mut rng), true),
            decoder: (0..dcd.depth)
                .map(|_| Block::new(dcd.width, dcd.heads, dcd.mlp_dim, &mut rng))
                .collect(),
            decoder_norm: LayerNorm::new(dcd.width),
            decoder_out: Linear::new(trunc_normal(dcd.width, pd, 0.02, &mut rng), true),
            head: ProjectionHead {
                hidden,
                out: Linear::new(trunc_normal(in_dim, spec.head.out_dim, 0.02, &mut rng), true),
            },
            pos: sincos_2d(gh, gw, d).cast(),
            spec,
        })
    }

    /// Same structure with every parameter and buffer set to zero; used as a
    /// gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, m, _| m.fill(T::zero()));
        z.visit_buffers_mut(&mut |_, m| m.fill(T::zero()));
        z
    }

    pub fn cast<U: Real>(&self) -> Vit<U> {
        let mut out = Vit::<U>::new(self.spec.clone(), 0).expect("spec already validated");
        let mut src = Vec::new();
        self.visit("", &mut |_, m, _| src.push(m.cast::<U>()));
        self.visit_buffers(&mut |_, m| src.push(m.cast::<U>()));
        let mut it = src.into_iter();
        out.visit_mut("", &mut |_, m, _| *m = it.next().unwrap());
        out.visit_buffers_mut(&mut |_, m| *m = it.next().unwrap());
        out
    }

    /// Non-learned state: batch-norm running statistics.
    pub fn visit_buffers<'a>(&'a self, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        for (i, (_, bn)) in self.head.hidden.iter().enumerate() {
            f(format!("head.hidden{i}.bn.running_mean"), &bn.running_mean);
            f(format!("head.hidden{i}.bn.running_var"), &bn.running_var);
        }
    }

    pub fn visit_buffers_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        for (i, (_, bn)) in self.head.hidden.iter_mut().enumerate() {
            f(format!("head.hidden{i}.bn.running_mean"), &mut bn.running_mean);
            f(format!("head.hidden{i}.bn.running_var"), &mut bn.running_var);
        }
    }

    pub fn width(&self) -> usize {
        self.spec.encoder.width
    }

    pub fn positions(&self) -> &Mat<T> {
        &self.pos
    }

    /// Runs the encoder on visible patches. `patches` stacks `plans.len()` views
    /// of `T'` rows each; every token receives the position of its original
    /// grid cell.
    pub fn encode(&self, patches: &Mat<T>, plans: &[TokenGatherPlan]) -> Result<(Mat<T>, EncoderCache<T>)> {
        let views = plans.len();
        let seq_len = plans.first().map_or(0, |p| p.kept_len());
        if views == 0 || seq_len == 0 {
            return Err(Error::InvalidInput("encoder needs at least one visible token".into()));
        }
        if plans.iter().any(|p| p.kept_len() != seq_len || p.seq_len() != self.spec.seq_len())
            || patches.rows() != views * seq_len
            || patches.cols() != self.spec.patch_dim()
        {
            return Err(Error::Shape(format!(
                "encoder input {:?} inconsistent with {} plans of {} tokens",
                patches.shape(),
                views,
                seq_len
            )));
        }
        let mut h = self.patch_embed.forward(patches);
        for (v, plan) in plans.iter().enumerate() {
            for (r, &t) in plan.kept_indices.iter().enumerate() {
                let row = h.row_mut(v * seq_len + r);
                for (a, b) in row.iter_mut().zip(self.pos.row(t)) {
                    *a += *b;
                }
            }
        }
        check_finite(&h, "encoder", 0)?;
        let mut blocks = Vec::with_capacity(self.encoder.len());
        for (i, block) in self.encoder.iter().enumerate() {
            let (next, cache) = block.forward(&h, seq_len);
            check_finite(&next, "encoder", i + 1)?;
            blocks.push(cache);
            h = next;
        }
        let (z, norm) = self.encoder_norm.forward(&h);
        Ok((
            z,
            EncoderCache {
                x: patches.clone(),
                blocks,
                norm,
            },
        ))
    }

    pub fn encode_backward(&self, cache: &EncoderCache<T>, dz: &Mat<T>, grad: &mut Vit<T>) {
        let mut dh = self.encoder_norm.backward(&cache.norm, dz, &mut grad.encoder_norm);
        for (i, block) in self.encoder.iter().enumerate().rev() {
            dh = block.backward(&cache.blocks[i], &dh, &mut grad.encoder[i]);
        }
        self.patch_embed.accumulate(&cache.x, &dh, &mut grad.patch_embed);
    }

    /// Mean over each view's tokens.
    pub fn mean_pool(z: &Mat<T>, views: usize) -> Mat<T> {
        let seq_len = z.rows() / views;
        let inv = T::one() / T::of(seq_len as f64);
        let mut pooled = Mat::zeros(views, z.cols());
        for v in 0..views {
            let out = pooled.row_mut(v);
            for r in 0..seq_len {
                for (o, x) in out.iter_mut().zip(z.row(v * seq_len + r)) {
                    *o += *x;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        pooled
    }

    /// Mean-pool each view, apply the projection head and L2-normalize.
    pub fn pool_and_project(&self, z: &Mat<T>, views: usize, mode: NormMode) -> Result<(Mat<T>, HeadCache<T>)> {
        if views == 0 || z.rows() == 0 || !z.rows().is_multiple_of(views) {
            return Err(Error::Shape(format!("cannot pool {} rows into {views} views", z.rows())));
        }
        let seq_len = z.rows() / views;
        let mut x = Self::mean_pool(z, views);
        let mut inputs = Vec::new();
        let mut bn = Vec::new();
        let mut pre_relu = Vec::new();
        for (lin, norm) in &self.head.hidden {
            let a = lin.forward(&x);
            let (b, c) = norm.forward(&a, mode);
            inputs.push(x);
            bn.push(c);
            x = relu(&b);
            pre_relu.push(b);
        }
        let v = self.head.out.forward(&x);
        let mut u = v.clone();
        let mut norms = Vec::with_capacity(views);
        for r in 0..views {
            let row = u.row_mut(r);
            let norm = row.iter().map(|a| *a * *a).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Degenerate(format!(
                    "projection of view {r} has norm {norm}; cannot normalize"
                )));
            }
            row.iter_mut().for_each(|a| *a /= norm);
            norms.push(norm);
        }
        Ok((
            u.clone(),
            HeadCache {
                views,
                seq_len,
                inputs,
                bn,
                pre_relu,
                last_in: x,
                u,
                norms,
            },
        ))
    }

    /// Back-propagates `du` (gradient w.r.t. the unit embeddings) to the
    /// encoder output.
    pub fn head_backward(&self, cache: &HeadCache<T>, du: &Mat<T>, grad: &mut Vit<T>) -> Mat<T> {
        let mut dv = Mat::zeros(cache.views, du.cols());
        for r in 0..cache.views {
            let u = cache.u.row(r);
            let g = du.row(r);
            let dot: T = u.iter().zip(g).map(|(a, b)| *a * *b).sum();
            let inv = T::one() / cache.norms[r];
            for (j, o) in dv.row_mut(r).iter_mut().enumerate() {
                *o = (g[j] - u[j] * dot) * inv;
            }
        }
        let mut dx = self.head.out.backward(&cache.last_in, &dv, &mut grad.head.out);
        for i in (0..self.head.hidden.len()).rev() {
            let (lin, norm) = &self.head.hidden[i];
            let (glin, gnorm) = &mut grad.head.hidden[i];
            let db = relu_backward(&cache.pre_relu[i], &dx);
            let da = norm.backward(&cache.bn[i], &db, gnorm);
            dx = lin.backward(&cache.inputs[i], &da, glin);
        }
        let inv = T::one() / T::of(cache.seq_len as f64);
        let mut dz = Mat::zeros(cache.views * cache.seq_len, dx.cols());
        for v in 0..cache.views {
            for r in 0..cache.seq_len {
                for (o, g) in dz.row_mut(v * cache.seq_len + r).iter_mut().zip(dx.row(v)) {
                    *o = *g * inv;
                }
            }
        }
        dz
    }

    /// Folds the batch statistics of a training-mode head pass into the running
    /// statistics.
    pub fn update_running_stats(&mut self, cache: &HeadCache<T>) {
        for ((_, bn), c) in self.head.hidden.iter_mut().zip(&cache.bn) {
            bn.update_running(c);
        }
    }

    /// One row per noise level: sinusoid, then the two-layer MLP.
    pub fn embed_sigma(&self, sigmas: &[f64]) -> Result<(Mat<T>, SigmaCache<T>)> {
        let d = self.width();
        if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidInput("noise level must be finite and >= 0".into()));
        }
        let mut data = Vec::with_capacity(sigmas.len() * d);
        for &s in sigmas {
            data.extend(sigma_sinusoid(s, d, self.spec.sigma_scale).into_iter().map(T::of));
        }
        let sinusoid = Mat::from_vec(sigmas.len(), d, data);
        let pre = self.sigma_mlp.0.forward(&sinusoid);
        let act = gelu(&pre);
        let out = self.sigma_mlp.1.forward(&act);
        Ok((out, SigmaCache { sinusoid, pre, act }))
    }

    pub fn embed_sigma_backward(&self, cache: &SigmaCache<T>, dout: &Mat<T>, grad: &mut Vit<T>) {
        let dact = self.sigma_mlp.1.backward(&cache.act, dout, &mut grad.sigma_mlp.1);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.sigma_mlp.0.accumulate(&cache.sinusoid, &dpre, &mut grad.sigma_mlp.0);
    }

    /// Predicts every patch of every view. Visible tokens come from `z`, hidden
    /// ones from the mask token; positions and (optionally) the per-view noise
    /// embedding are added before projecting to decoder width.
    pub fn decode(
        &self,
        z: &Mat<T>,
        plans: &[TokenGatherPlan],
        sigma_emb: Option<&Mat<T>>,
    ) -> Result<(Mat<T>, DecoderCache<T>)> {
        let views = plans.len();
        let t_len = self.spec.seq_len();
        let d = self.width();
        let kept = plans.first().map_or(0, |p| p.kept_len());
        if views == 0 || z.rows() != views * kept || z.cols() != d {
            return Err(Error::Shape(format!(
                "decoder input {:?} inconsistent with {views} plans of {kept} tokens",
                z.shape()
            )));
        }
        if let Some(s) = sigma_emb {
            if s.shape() != (views, d) {
                return Err(Error::Shape(format!("sigma embedding {:?}, expected ({views}, {d})", s.shape())));
            }
        }
        let mut x = Mat::zeros(views * t_len, d);
        let mask = self.mask_token.row(0);
        for (v, plan) in plans.iter().enumerate() {
            for (t, slot) in plan.inverse_map.iter().enumerate() {
                let src = match slot {
                    Some(k) => z.row(v * kept + k),
                    None => mask,
                };
                let row = x.row_mut(v * t_len + t);
                for (j, o) in row.iter_mut().enumerate() {
                    *o = src[j] + self.pos.get(t, j);
                }
                if let Some(s) = sigma_emb {
                    for (o, e) in row.iter_mut().zip(s.row(v)) {
                        *o += *e;
                    }
                }
            }
        }
        let mut h = self.decoder_embed.forward(&x);
        check_finite(&h, "decoder", 0)?;
        let mut blocks = Vec::with_capacity(self.decoder.len());
        for (i, block) in self.decoder.iter().enumerate() {
            let (next, cache) = block.forward(&h, t_len);
            check_finite(&next, "decoder", i + 1)?;
            blocks.push(cache);
            h = next;
        }
        let (norm_out, norm) = self.decoder_norm.forward(&h);
        let out = self.decoder_out.forward(&norm_out);
        check_finite(&out, "decoder", self.decoder.len() + 1)?;
        Ok((
            out,
            DecoderCache {
                embed_in: x,
                blocks,
                norm,
                norm_out,
                plans: plans.to_vec(),
                has_sigma: sigma_emb.is_some(),
            },
        ))
    }

    /// Returns the gradients w.r.t. `z` and, if one was used, the noise embedding.
    pub fn decode_backward(
        &self,
        cache: &DecoderCache<T>,
        dout: &Mat<T>,
        grad: &mut Vit<T>,
    ) -> (Mat<T>, Option<Mat<T>>) {
        let t_len = self.spec.seq_len();
        let d = self.width();
        let views = cache.plans.len();
        let kept = cache.plans[0].kept_len();
        let dn = self.decoder_out.backward(&cache.norm_out, dout, &mut grad.decoder_out);
        let mut dh = self.decoder_norm.backward(&cache.norm, &dn, &mut grad.decoder_norm);
        for (i, block) in self.decoder.iter().enumerate().rev() {
            dh = block.backward(&cache.blocks[i], &dh, &mut grad.decoder[i]);
        }
        let dx = self.decoder_embed.backward(&cache.embed_in, &dh, &mut grad.decoder_embed);
        let mut dz = Mat::zeros(views * kept, d);
        let mut dsigma = cache.has_sigma.then(|| Mat::zeros(views, d));
        for (v, plan) in cache.plans.iter().enumerate() {
            for (t, slot) in plan.inverse_map.iter().enumerate() {
                let g = dx.row(v * t_len + t);
                let dst = match slot {
                    Some(k) => dz.row_mut(v * kept + k),
                    None => grad.mask_token.row_mut(0),
                };
                for (o, x) in dst.iter_mut().zip(g) {
                    *o += *x;
                }
                if let Some(ds) = dsigma.as_mut() {
                    for (o, x) in ds.row_mut(v).iter_mut().zip(g) {
                        *o += *x;
                    }
                }
            }
        }
        (dz, dsigma)
    }

    /// Mean-pooled final encoder representation of full, unmasked images.
    pub fn features(&self, patches: &Mat<T>, views: usize) -> Result<Mat<T>> {
        let t_len = self.spec.seq_len();
        let plan = TokenGatherPlan {
            kept_indices: (0..t_len).collect(),
            inverse_map: (0..t_len).map(Some).collect(),
        };
        let plans = vec![plan; views];
        let (z, _) = self.encode(patches, &plans)?;
        Ok(Self::mean_pool(&z, views))
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m, _| n += m.as_slice().len());
        n
    }
}

impl<T: Real> Params<T> for Vit<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>, bool)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.patch_embed.visit(&p("patch_embed"), f);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&p(&format!("encoder{i}")), f);
        }
        self.encoder_norm.visit(&p("encoder_norm"), f);
        f(p("mask_token"), &self.mask_token, false);
        self.sigma_mlp.0.visit(&p("sigma_mlp.fc1"), f);
        self.sigma_mlp.1.visit(&p("sigma_mlp.fc2"), f);
        self.decoder_embed.visit(&p("decoder_embed"), f);
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&p(&format!("decoder{i}")), f);
        }
        self.decoder_norm.visit(&p("decoder_norm"), f);
        self.decoder_out.visit(&p("decoder_out"), f);
        for (i, (lin, bn)) in self.head.hidden.iter().enumerate() {
            lin.visit(&p(&format!("head.hidden{i}.fc")), f);
            bn.visit(&p(&format!("head.hidden{i}.bn")), f);
        }
        self.head.out.visit(&p("head.out"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>, bool)) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.patch_embed.visit_mut(&p("patch_embed"), f);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&p(&format!("encoder{i}")), f);
        }
        self.encoder_norm.visit_mut(&p("encoder_norm"), f);
        f(p("mask_token"), &mut self.mask_token, false);
        self.sigma_mlp.0.visit_mut(&p("sigma_mlp.fc1"), f);
        self.sigma_mlp.1.visit_mut(&p("sigma_mlp.fc2"), f);
        self.decoder_embed.visit_mut(&p("decoder_embed"), f);
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&p(&format!("decoder{i}")), f);
        }
        self.decoder_norm.visit_mut(&p("decoder_norm"), f);
        self.decoder_out.visit_mut(&p("decoder_out"), f);
        for (i, (lin, bn)) in self.head.hidden.iter_mut().enumerate() {
            lin.visit_mut(&p(&format!("head.hidden{i}.fc")), f);
            bn.visit_mut(&p(&format!("head.hidden{i}.bn")), f);
        }
        self.head.out.visit_mut(&p("head.out"), f);
    }
}
