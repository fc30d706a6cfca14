//! Layers with explicit forward caches and backward passes.
//!
//! Inputs are row-stacked: `B` sequences of length `L` form a `(B*L) x d`
//! matrix. Backward methods accumulate parameter gradients into a layer of the
//! same type and return the gradient with respect to the layer input.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{gemm, Mat, Real};

/// Walks named parameter matrices. The flag marks tensors subject to weight decay.
pub trait Params<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>, bool));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>, bool));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat<T> {
    Mat::from_fn(rows, cols, |_, _| loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

/// Uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| T::of(rng.random_range(-a..a)))
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// `in x out`.
    pub w: Mat<T>,
    /// `1 x out`.
    pub b: Option<Mat<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(w: Mat<T>, bias: bool) -> Self {
        let b = bias.then(|| Mat::zeros(1, w.cols()));
        Self { w, b }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Mat::zeros(self.w.rows(), self.w.cols()),
            b: self.b.as_ref().map(|b| Mat::zeros(1, b.cols())),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = x.matmul(&self.w);
        if let Some(b) = &self.b {
            y.add_row_broadcast(b.as_slice());
        }
        y
    }

    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>) -> Mat<T> {
        self.accumulate(x, dy, grad);
        dy.matmul_t(&self.w)
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn accumulate(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>) {
        gemm(T::one(), x.view().t(), dy.view(), T::one(), grad.w.view_mut());
        if let Some(gb) = &mut grad.b {
            dy.sum_rows_into(gb.as_mut_slice());
        }
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>, bool)) {
        f(join(prefix, "w"), &self.w, true);
        if let Some(b) = &self.b {
            f(join(prefix, "b"), b, false);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>, bool)) {
        f(join(prefix, "w"), &mut self.w, true);
        if let Some(b) = &mut self.b {
            f(join(prefix, "b"), b, false);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Mat<T>,
    pub beta: Mat<T>,
}

pub struct NormCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
}

const LN_EPS: f64 = 1e-6;

impl<T: Real> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Mat::filled(1, d, T::one()),
            beta: Mat::zeros(1, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Mat::zeros(1, self.gamma.cols()),
            beta: Mat::zeros(1, self.beta.cols()),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, NormCache<T>) {
        let d = x.cols();
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = Mat::zeros(x.rows(), d);
        let mut y = Mat::zeros(x.rows(), d);
        let mut rstd = Vec::with_capacity(x.rows());
        let (g, b) = (self.gamma.as_slice(), self.beta.as_slice());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            let xh = xhat.row(r).to_vec();
            for (j, o) in y.row_mut(r).iter_mut().enumerate() {
                *o = xh[j] * g[j] + b[j];
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &NormCache<T>, dy: &Mat<T>, grad: &mut LayerNorm<T>) -> Mat<T> {
        let d = dy.cols();
        let inv_d = T::one() / T::of(d as f64);
        let g = self.gamma.as_slice();
        let mut dx = Mat::zeros(dy.rows(), d);
        let mut dxhat = vec![T::zero(); d];
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            {
                let gg = grad.gamma.as_mut_slice();
                for j in 0..d {
                    gg[j] += dyr[j] * xh[j];
                }
            }
            {
                let gb = grad.beta.as_mut_slice();
                for j in 0..d {
                    gb[j] += dyr[j];
                }
            }
            let mut mean_dxhat = T::zero();
            let mut mean_dxhat_xhat = T::zero();
            for j in 0..d {
                dxhat[j] = dyr[j] * g[j];
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * xh[j];
            }
            mean_dxhat *= inv_d;
            mean_dxhat_xhat *= inv_d;
            let rs = cache.rstd[r];
            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

impl<T: Real> Params<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>, bool)) {
        f(join(prefix, "gamma"), &self.gamma, false);
        f(join(prefix, "beta"), &self.beta, false);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>, bool)) {
        f(join(prefix, "gamma"), &mut self.gamma, false);
        f(join(prefix, "beta"), &mut self.beta, false);
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// `tanh` through `exp`, several times faster than the libm call.
#[inline]
fn fast_tanh<T: Real>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: &Mat<T>) -> Mat<T> {
    let (k, c, half) = (T::of(GELU_K), T::of(GELU_C), T::of(0.5));
    let mut y = x.clone();
    y.as_mut_slice().iter_mut().for_each(|v| {
        let x = *v;
        *v = half * x * (T::one() + fast_tanh(k * (x + c * x * x * x)));
    });
    y
}

pub fn gelu_backward<T: Real>(x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let (k, c, half, three) = (T::of(GELU_K), T::of(GELU_C), T::of(0.5), T::of(3.0));
    let mut dx = dy.clone();
    for (g, &x) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        let t = fast_tanh(k * (x + c * x * x * x));
        let d = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x);
        *g *= d;
    }
    dx
}

#[derive(Clone, Debug)]
pub struct Attention<T> {
    pub heads: usize,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
}

pub struct AttentionCache<T> {
    x: Mat<T>,
    qkv: Mat<T>,
    /// Softmax probabilities, `seqs * heads` blocks of `L x L`, row-stacked.
    probs: Mat<T>,
    ctx: Mat<T>,
    seq_len: usize,
}

impl<T: Real> Attention<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, rng: &mut R) -> Self {
        assert_eq!(d % heads, 0, "width must be divisible by heads");
        Self {
            heads,
            qkv: Linear::new(trunc_normal(d, 3 * d, 0.02, rng), true),
            proj: Linear::new(trunc_normal(d, d, 0.02, rng), true),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            heads: self.heads,
            qkv: self.qkv.zeros_like(),
            proj: self.proj.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Mat<T>, seq_len: usize) -> (Mat<T>, AttentionCache<T>) {
        let d = x.cols();
        let dh = d / self.heads;
        let seqs = x.rows() / seq_len;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut probs = Mat::zeros(seqs * self.heads * seq_len, seq_len);
        let mut ctx = Mat::zeros(x.rows(), d);
        for s in 0..seqs {
            let r0 = s * seq_len;
            for h in 0..self.heads {
                let p0 = (s * self.heads + h) * seq_len;
                gemm(
                    scale,
                    qkv.view().block(r0, seq_len, h * dh, dh),
                    qkv.view().block(r0, seq_len, d + h * dh, dh).t(),
                    T::zero(),
                    probs.view_mut().block(p0, seq_len, 0, seq_len),
                );
                for r in p0..p0 + seq_len {
                    softmax_in_place(probs.row_mut(r));
                }
                gemm(
                    T::one(),
                    probs.view().block(p0, seq_len, 0, seq_len),
                    qkv.view().block(r0, seq_len, 2 * d + h * dh, dh),
                    T::zero(),
                    ctx.view_mut().block(r0, seq_len, h * dh, dh),
                );
            }
        }
        let out = self.proj.forward(&ctx);
        (
            out,
            AttentionCache {
                x: x.clone(),
                qkv,
                probs,
                ctx,
                seq_len,
            },
        )
    }

    pub fn backward(&self, cache: &AttentionCache<T>, dout: &Mat<T>, grad: &mut Attention<T>) -> Mat<T> {
        let d = dout.cols();
        let dh = d / self.heads;
        let l = cache.seq_len;
        let seqs = dout.rows() / l;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let dctx = self.proj.backward(&cache.ctx, dout, &mut grad.proj);
        let mut dqkv = Mat::zeros(dout.rows(), 3 * d);
        let mut dp = Mat::zeros(l, l);
        for s in 0..seqs {
            let r0 = s * l;
            for h in 0..self.heads {
                let p0 = (s * self.heads + h) * l;
                let probs = cache.probs.view().block(p0, l, 0, l);
                // dV = P^T dO
                gemm(
                    T::one(),
                    probs.t(),
                    dctx.view().block(r0, l, h * dh, dh),
                    T::zero(),
                    dqkv.view_mut().block(r0, l, 2 * d + h * dh, dh),
                );
                // dP = dO V^T
                gemm(
                    T::one(),
                    dctx.view().block(r0, l, h * dh, dh),
                    cache.qkv.view().block(r0, l, 2 * d + h * dh, dh).t(),
                    T::zero(),
                    dp.view_mut(),
                );
                // dS = P * (dP - rowsum(dP * P)), scaled
                for r in 0..l {
                    let prow = cache.probs.row(p0 + r);
                    let drow = dp.row_mut(r);
                    let dot: T = prow.iter().zip(drow.iter()).map(|(p, g)| *p * *g).sum();
                    for (g, p) in drow.iter_mut().zip(prow) {
                        *g = *p * (*g - dot) * scale;
                    }
                }
                // dQ = dS K, dK = dS^T Q
                gemm(
                    T::one(),
                    dp.view(),
                    cache.qkv.view().block(r0, l, d + h * dh, dh),
                    T::zero(),
                    dqkv.view_mut().block(r0, l, h * dh, dh),
                );
                gemm(
                    T::one(),
                    dp.view().t(),
                    cache.qkv.view().block(r0, l, h * dh, dh),
                    T::zero(),
                    dqkv.view_mut().block(r0, l, d + h * dh, dh),
                );
            }
        }
        self.qkv.backward(&cache.x, &dqkv, &mut grad.qkv)
    }
}

impl<T: Real> Params<T> for Attention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>, bool)) {
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>, bool)) {
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct MlpCache<T> {
    x: Mat<T>,
    pre: Mat<T>,
    act: Mat<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new(fc1: Linear<T>, fc2: Linear<T>) -> Self {
        Self { fc1, fc2 }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, MlpCache<T>) {
        let pre = self.fc1.forward(x);
        let act = gelu(&pre);
        let out = self.fc2.forward(&act);
        (
            out,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache<T>, dout: &Mat<T>, grad: &mut Mlp<T>) -> Mat<T> {
        let dact = self.fc2.backward(&cache.act, dout, &mut grad.fc2);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(&cache.x, &dpre, &mut grad.fc1)
    }
}

impl<T: Real> Params<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>, bool)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>, bool)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `h + mlp(ln2(h))`.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

pub struct BlockCache<T> {
    ln1: NormCache<T>,
    attn: AttentionCache<T>,
    ln2: NormCache<T>,
    mlp: MlpCache<T>,
}

impl<T: Real> Block<T> {
    pub fn new<R: Rng + ?Sized>(d: usize, heads: usize, mlp_dim: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            attn: Attention::new(d, heads, rng),
            ln2: LayerNorm::new(d),
            mlp: Mlp::new(
                Linear::new(trunc_normal(d, mlp_dim, 0.02, rng), true),
                Linear::new(trunc_normal(mlp_dim, d, 0.02, rng), true),
            ),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ln1: self.ln1.zeros_like(),
            attn: self.attn.zeros_like(),
            ln2: self.ln2.zeros_like(),
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Mat<T>, seq_len: usize) -> (Mat<T>, BlockCache<T>) {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&n1, seq_len);
        let mut h = x.clone();
        h.add_assign(&a);
        let (n2, ln2) = self.ln2.forward(&h);
        let (m, mlp) = self.mlp.forward(&n2);
        h.add_assign(&m);
        (h, BlockCache { ln1, attn, ln2, mlp })
    }

    pub fn backward(&self, cache: &BlockCache<T>, dout: &Mat<T>, grad: &mut Block<T>) -> Mat<T> {
        let dn2 = self.mlp.backward(&cache.mlp, dout, &mut grad.mlp);
        let mut dh = self.ln2.backward(&cache.ln2, &dn2, &mut grad.ln2);
        dh.add_assign(dout);
        let dn1 = self.attn.backward(&cache.attn, &dh, &mut grad.attn);
        let mut dx = self.ln1.backward(&cache.ln1, &dn1, &mut grad.ln1);
        dx.add_assign(&dh);
        dx
    }
}

impl<T: Real> Params<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>, bool)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>, bool)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Batch normalization over rows, with running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Mat<T>,
    pub beta: Mat<T>,
    pub running_mean: Mat<T>,
    pub running_var: Mat<T>,
}

pub const BN_MOMENTUM: f64 = 0.9;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

pub struct BatchNormCache<T> {
    xhat: Mat<T>,
    rstd: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    mode: NormMode,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Mat::filled(1, d, T::one()),
            beta: Mat::zeros(1, d),
            running_mean: Mat::zeros(1, d),
            running_var: Mat::filled(1, d, T::one()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.gamma.cols();
        Self {
            gamma: Mat::zeros(1, d),
            beta: Mat::zeros(1, d),
            running_mean: Mat::zeros(1, d),
            running_var: Mat::zeros(1, d),
        }
    }

    pub fn forward(&self, x: &Mat<T>, mode: NormMode) -> (Mat<T>, BatchNormCache<T>) {
        let (n, d) = x.shape();
        let (mean, var) = match mode {
            NormMode::Train => {
                let inv_n = T::one() / T::of(n as f64);
                let mut mean = vec![T::zero(); d];
                x.sum_rows_into(&mut mean);
                mean.iter_mut().for_each(|m| *m *= inv_n);
                let mut var = vec![T::zero(); d];
                for r in 0..n {
                    for (j, v) in x.row(r).iter().enumerate() {
                        let c = *v - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv_n);
                (mean, var)
            }
            NormMode::Eval => (
                self.running_mean.as_slice().to_vec(),
                self.running_var.as_slice().to_vec(),
            ),
        };
        let rstd: Vec<T> = var.iter().map(|v| T::one() / (*v + T::of(BN_EPS)).sqrt()).collect();
        let (g, b) = (self.gamma.as_slice(), self.beta.as_slice());
        let mut xhat = Mat::zeros(n, d);
        let mut y = Mat::zeros(n, d);
        for r in 0..n {
            for j in 0..d {
                let xh = (x.get(r, j) - mean[j]) * rstd[j];
                xhat.set(r, j, xh);
                y.set(r, j, xh * g[j] + b[j]);
            }
        }
        (
            y,
            BatchNormCache {
                xhat,
                rstd,
                batch_mean: mean,
                batch_var: var,
                mode,
            },
        )
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, cache: &BatchNormCache<T>) {
        let m = T::of(BN_MOMENTUM);
        let one_m = T::one() - m;
        for (r, b) in self.running_mean.as_mut_slice().iter_mut().zip(&cache.batch_mean) {
            *r = m * *r + one_m * *b;
        }
        for (r, b) in self.running_var.as_mut_slice().iter_mut().zip(&cache.batch_var) {
            *r = m * *r + one_m * *b;
        }
    }

    pub fn backward(&self, cache: &BatchNormCache<T>, dy: &Mat<T>, grad: &mut BatchNorm<T>) -> Mat<T> {
        let (n, d) = dy.shape();
        let g = self.gamma.as_slice();
        let mut sum_dy = vec![T::zero(); d];
        let mut sum_dy_xhat = vec![T::zero(); d];
        for r in 0..n {
            for j in 0..d {
                let v = dy.get(r, j);
                sum_dy[j] += v;
                sum_dy_xhat[j] += v * cache.xhat.get(r, j);
            }
        }
        for j in 0..d {
            grad.gamma.as_mut_slice()[j] += sum_dy_xhat[j];
            grad.beta.as_mut_slice()[j] += sum_dy[j];
        }
        let mut dx = Mat::zeros(n, d);
        match cache.mode {
            NormMode::Eval => {
                for r in 0..n {
                    for j in 0..d {
                        dx.set(r, j, dy.get(r, j) * g[j] * cache.rstd[j]);
                    }
                }
            }
            NormMode::Train => {
                let inv_n = T::one() / T::of(n as f64);
                for r in 0..n {
                    for j in 0..d {
                        let v = dy.get(r, j) - sum_dy[j] * inv_n - cache.xhat.get(r, j) * sum_dy_xhat[j] * inv_n;
                        dx.set(r, j, g[j] * cache.rstd[j] * v);
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> Params<T> for BatchNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>, bool)) {
        f(join(prefix, "gamma"), &self.gamma, false);
        f(join(prefix, "beta"), &self.beta, false);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<T>, bool)) {
        f(join(prefix, "gamma"), &mut self.gamma, false);
        f(join(prefix, "beta"), &mut self.beta, false);
    }
}

pub fn relu<T: Real>(x: &Mat<T>) -> Mat<T> {
    let mut y = x.clone();
    y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

pub fn relu_backward<T: Real>(x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let mut dx = dy.clone();
    for (g, v) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        if *v <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}
