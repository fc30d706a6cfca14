//! Optimization: the combined forward/backward pass, AdamW with decoupled
//! weight decay, warmup + cosine schedule, checkpoints and the training loop.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::augment::{build_view_batch, AugmentConfig, ViewBatch, ViewSettings};
use crate::container::Container;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{HeadCache, ModelSpec, TransformerSpec, Vit};
use crate::nn::{NormMode, Params};
use crate::objectives::{loss_report, LossReport, LossWeights, ModelOutputs};
use crate::rng::{self, tag};
use crate::tensor::{Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Can,
    Simclr,
    Mae,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Can => "can",
            Method::Simclr => "simclr",
            Method::Mae => "mae",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "can" => Ok(Method::Can),
            "simclr" => Ok(Method::Simclr),
            "mae" => Ok(Method::Mae),
            other => Err(Error::InvalidInput(format!("unknown method `{other}` (can, simclr, mae)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub mask_rate: f64,
    pub sigma_max: f64,
    pub lambda_infonce: f64,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    pub views_per_image: usize,
    /// Feed the noise-level embedding to the decoder when denoising is on.
    pub sigma_conditioning: bool,
    pub checkpoint_every: u64,
    /// Stop early after this many total steps; the schedule is unaffected.
    pub max_steps: Option<u64>,
    /// Record elapsed seconds in the metrics file (0 when off).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Can,
            base_lr: 2.5e-4,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            eps: 1e-8,
            batch_size: 256,
            warmup_epochs: 5.0,
            total_epochs: 100.0,
            mask_rate: 0.5,
            sigma_max: 0.05,
            lambda_infonce: 0.03,
            lambda: 0.5,
            tau: 0.1,
            seed: 0,
            views_per_image: 2,
            sigma_conditioning: true,
            checkpoint_every: 1000,
            max_steps: None,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    /// Applies the method preset: SimCLR is contrastive-only without noise;
    /// MAE is reconstruction-only, noiseless, single view.
    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        match method {
            Method::Can => {}
            Method::Simclr => {
                self.lambda_infonce = 1.0;
                self.sigma_max = 0.0;
                self.views_per_image = 2;
            }
            Method::Mae => {
                self.lambda_infonce = 0.0;
                self.lambda = 1.0;
                self.sigma_max = 0.0;
                self.views_per_image = 1;
            }
        }
        self
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_infonce: self.lambda_infonce,
            lambda: self.lambda,
        }
    }

    pub fn objective(&self) -> Objective {
        Objective {
            weights: self.weights(),
            tau: self.tau,
            sigma_conditioning: self.sigma_conditioning,
        }
    }

    /// Every violated constraint, as `key: reason`.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut nonneg = |k: &str, v: f64| {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("{k}: must be a finite non-negative number, got {v}"));
            }
        };
        nonneg("train.base_lr", self.base_lr);
        nonneg("train.weight_decay", self.weight_decay);
        nonneg("train.warmup_epochs", self.warmup_epochs);
        nonneg("train.total_epochs", self.total_epochs);
        nonneg("train.sigma_max", self.sigma_max);
        if self.warmup_epochs > self.total_epochs {
            p.push(format!(
                "train.warmup_epochs: {} exceeds train.total_epochs {}",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if !(self.total_epochs > 0.0) {
            p.push("train.total_epochs: must be positive".into());
        }
        for (k, v) in [("train.beta1", self.betas.0), ("train.beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&v) {
                p.push(format!("{k}: must lie in [0, 1), got {v}"));
            }
        }
        if self.batch_size == 0 {
            p.push("train.batch_size: must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            p.push(format!("train.mask_rate: must lie in [0, 1), got {}", self.mask_rate));
        }
        for (k, v) in [("train.lambda_infonce", self.lambda_infonce), ("train.lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                p.push(format!("{k}: must lie in [0, 1], got {v}"));
            }
        }
        if !(self.tau > 0.0) {
            p.push(format!("train.tau: must be positive, got {}", self.tau));
        }
        if !(1..=2).contains(&self.views_per_image) {
            p.push(format!("train.views_per_image: must be 1 or 2, got {}", self.views_per_image));
        }
        if self.views_per_image == 1 && self.lambda_infonce > 0.0 {
            p.push("train.views_per_image: the contrastive term needs 2 views".into());
        }
        if self.views_per_image == 2 && self.lambda_infonce > 0.0 && self.batch_size < 2 {
            p.push("train.batch_size: the contrastive term needs >= 2 images for batch statistics".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(p.join("; ")))
        }
    }
}

/// What a gradient step optimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub tau: f64,
    pub sigma_conditioning: bool,
}

impl Objective {
    pub fn uses_head(&self) -> bool {
        self.weights.infonce() > 0.0
    }

    pub fn uses_decoder(&self) -> bool {
        self.weights.rec() > 0.0 || self.weights.denoise() > 0.0
    }

    /// The noise embedding only enters the decoder when the denoising term is live.
    pub fn uses_sigma(&self) -> bool {
        self.sigma_conditioning && self.weights.denoise() > 0.0
    }
}

/// Linear warmup to `peak`, then half-cosine decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    /// `peak = base_lr * batch_size / 256`.
    pub fn new(cfg: &TrainConfig, steps_per_epoch: u64) -> Self {
        let spe = steps_per_epoch as f64;
        let total_steps = ((cfg.total_epochs * spe).round() as u64).max(1);
        let warmup_steps = ((cfg.warmup_epochs * spe).round() as u64).min(total_steps);
        Self {
            peak: cfg.base_lr * cfg.batch_size as f64 / 256.0,
            warmup_steps,
            total_steps,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Gradients and auxiliary results of one combined pass.
pub struct StepOutput<T> {
    pub report: LossReport,
    pub grads: Vit<T>,
    pub head: Option<HeadCache<T>>,
}

/// Stacks the visible noisy patches of every view, view-major.
pub fn encoder_input<T: Real>(batch: &ViewBatch) -> (Mat<T>, Vec<crate::patch::TokenGatherPlan>) {
    let kept = batch.unmasked_len();
    let pd = batch.items[0].noisy.patches.cols();
    let mut data = Vec::with_capacity(batch.items.len() * kept * pd);
    let mut plans = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        let plan = crate::patch::TokenGatherPlan::from_mask(&item.mask);
        for &t in &plan.kept_indices {
            data.extend(item.noisy.patches.row(t).iter().map(|&v| T::of(v as f64)));
        }
        plans.push(plan);
    }
    (Mat::from_vec(batch.items.len() * kept, pd, data), plans)
}

/// Forward both branches of the shared encoder, score the objective and
/// back-propagate into a fresh gradient accumulator.
pub fn forward_backward<T: Real>(model: &Vit<T>, batch: &ViewBatch, objective: &Objective) -> Result<StepOutput<T>> {
    let views = batch.items.len();
    let (patches, plans) = encoder_input::<T>(batch);
    let (z, enc_cache) = model.encode(&patches, &plans)?;

    let head = if objective.uses_head() {
        Some(model.pool_and_project(&z, views, NormMode::Train)?)
    } else {
        None
    };
    let sigma = if objective.uses_decoder() && objective.uses_sigma() {
        let sigmas: Vec<f64> = batch.items.iter().map(|it| it.view.sigma as f64).collect();
        Some(model.embed_sigma(&sigmas)?)
    } else {
        None
    };
    let decoded = if objective.uses_decoder() {
        Some(model.decode(&z, &plans, sigma.as_ref().map(|s| &s.0))?)
    } else {
        None
    };

    let outputs = ModelOutputs {
        embeddings: head.as_ref().map(|h| h.0.clone()),
        reconstructions: decoded.as_ref().map(|d| d.0.clone()),
    };
    let (report, out_grads) = loss_report(batch, &outputs, &objective.weights, objective.tau)?;

    let mut grads = model.zeros_like();
    let mut dz = Mat::zeros(z.rows(), z.cols());
    if let (Some((_, cache)), Some(du)) = (&head, &out_grads.embeddings) {
        dz.add_assign(&model.head_backward(cache, du, &mut grads));
    }
    if let (Some((_, cache)), Some(dx)) = (&decoded, &out_grads.reconstructions) {
        let (dz_dec, dsigma) = model.decode_backward(cache, dx, &mut grads);
        dz.add_assign(&dz_dec);
        if let (Some((_, scache)), Some(ds)) = (&sigma, dsigma) {
            model.embed_sigma_backward(scache, &ds, &mut grads);
        }
    }
    model.encode_backward(&enc_cache, &dz, &mut grads);
    Ok(StepOutput {
        report,
        grads,
        head: head.map(|h| h.1),
    })
}

/// AdamW moments, one pair per parameter tensor in visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(model: &Vit<T>) -> Self {
        let mut m = Vec::new();
        model.visit("", &mut |_, p, _| m.push(Mat::zeros(p.rows(), p.cols())));
        Self { v: m.clone(), m }
    }

    /// One update at learning rate `lr`; `step` is the 0-based index of this update.
    /// Decay multiplies decayed tensors by `1 - lr * wd` before the adaptive step.
    pub fn update(&mut self, model: &mut Vit<T>, grads: &Vit<T>, lr: f64, cfg: &TrainConfig, step: u64) {
        let mut gs = Vec::new();
        grads.visit("", &mut |_, g, _| gs.push(g));
        let (b1, b2) = cfg.betas;
        let t = (step + 1) as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let step_size = T::of(lr / c1);
        let inv_c2_sqrt = T::of(1.0 / c2.sqrt());
        let eps = T::of(cfg.eps);
        let shrink = T::of(1.0 - lr * cfg.weight_decay);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |_, p, decay| {
            let g = gs[i].as_slice();
            let m = ms[i].as_mut_slice();
            let v = vs[i].as_mut_slice();
            for (k, w) in p.as_mut_slice().iter_mut().enumerate() {
                m[k] = b1t * m[k] + one_b1 * g[k];
                v[k] = b2t * v[k] + one_b2 * g[k] * g[k];
                if decay {
                    *w *= shrink;
                }
                *w -= step_size * m[k] / ((v[k]).sqrt() * inv_c2_sqrt + eps);
            }
            i += 1;
        });
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Vit<f32>,
    pub optimizer: AdamW<f32>,
    pub step: u64,
    /// Root seed; with `step` this is the full RNG state.
    pub seed: u64,
}

impl TrainState {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let model = Vit::new(spec, seed)?;
        Ok(Self {
            optimizer: AdamW::new(&model),
            model,
            step: 0,
            seed,
        })
    }

    pub fn epoch(&self, steps_per_epoch: u64) -> u64 {
        self.step / steps_per_epoch.max(1)
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.model.visit("", &mut |_, m, _| ok &= m.is_finite());
        ok
    }
}

/// One optimizer step on `batch` at the scheduled learning rate.
pub fn train_step(state: &mut TrainState, batch: &ViewBatch, cfg: &TrainConfig, schedule: &Schedule) -> Result<LossReport> {
    let out = forward_backward(&state.model, batch, &cfg.objective())?;
    if !out.report.l_total.is_finite() {
        return Err(Error::NonFiniteLoss("total"));
    }
    if let Some(head) = &out.head {
        state.model.update_running_stats(head);
    }
    let lr = schedule.lr_at(state.step);
    state.optimizer.update(&mut state.model, &out.grads, lr, cfg, state.step);
    state.step += 1;
    Ok(out.report)
}

fn spec_to_header(c: &mut Container, spec: &ModelSpec) {
    c.set("spec.image_h", spec.image.0);
    c.set("spec.image_w", spec.image.1);
    c.set("spec.patch", spec.patch);
    for (prefix, t) in [("spec.encoder", &spec.encoder), ("spec.decoder", &spec.decoder)] {
        c.set(&format!("{prefix}.depth"), t.depth);
        c.set(&format!("{prefix}.width"), t.width);
        c.set(&format!("{prefix}.heads"), t.heads);
        c.set(&format!("{prefix}.mlp_dim"), t.mlp_dim);
    }
    c.set("spec.head.hidden_dim", spec.head.hidden_dim);
    c.set("spec.head.hidden_layers", spec.head.hidden_layers);
    c.set("spec.head.out_dim", spec.head.out_dim);
    c.set("spec.sigma_scale", format!("{:?}", spec.sigma_scale));
}

fn spec_from_header(c: &Container, path: &Path) -> Result<ModelSpec> {
    let num = |k: &str| -> Result<usize> {
        c.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, format!("missing or invalid header `{k}`")))
    };
    let tspec = |prefix: &str| -> Result<TransformerSpec> {
        Ok(TransformerSpec {
            depth: num(&format!("{prefix}.depth"))?,
            width: num(&format!("{prefix}.width"))?,
            heads: num(&format!("{prefix}.heads"))?,
            mlp_dim: num(&format!("{prefix}.mlp_dim"))?,
        })
    };
    Ok(ModelSpec {
        image: (num("spec.image_h")?, num("spec.image_w")?),
        patch: num("spec.patch")?,
        encoder: tspec("spec.encoder")?,
        decoder: tspec("spec.decoder")?,
        head: crate::model::HeadSpec {
            hidden_dim: num("spec.head.hidden_dim")?,
            hidden_layers: num("spec.head.hidden_layers")?,
            out_dim: num("spec.head.out_dim")?,
        },
        sigma_scale: c
            .get("spec.sigma_scale")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, "missing spec.sigma_scale"))?,
    })
}

pub const CHECKPOINT_KIND: &str = "can-checkpoint";

/// Serializes the model spec, parameters, running statistics, AdamW moments,
/// step and RNG state.
pub fn checkpoint_container(state: &TrainState) -> Container {
    let mut c = Container::new(CHECKPOINT_KIND);
    spec_to_header(&mut c, &state.model.spec);
    c.set("state.step", state.step);
    c.set("state.rng.seed", state.seed);
    c.set("state.rng.counter", state.step);
    let mut push = |prefix: &str, name: String, m: &Mat<f32>| {
        c.push(format!("{prefix}/{name}"), vec![m.rows(), m.cols()], m.as_slice().to_vec());
    };
    let mut names = Vec::new();
    state.model.visit("", &mut |name, m, _| {
        push("param", name.clone(), m);
        names.push(name);
    });
    state.model.visit_buffers(&mut |name, m| push("buffer", name, m));
    for (name, m) in names.iter().zip(&state.optimizer.m) {
        push("adam_m", name.clone(), m);
    }
    for (name, m) in names.iter().zip(&state.optimizer.v) {
        push("adam_v", name.clone(), m);
    }
    c
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    checkpoint_container(state).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let c = Container::read(path)?;
    if c.kind != CHECKPOINT_KIND {
        return Err(Error::format(path, format!("not a checkpoint (kind `{}`)", c.kind)));
    }
    let spec = spec_from_header(&c, path)?;
    let step: u64 = c
        .get("state.step")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, "missing state.step"))?;
    let seed: u64 = c
        .get("state.rng.seed")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, "missing state.rng.seed"))?;
    let mut state = TrainState::new(spec, seed)?;
    state.step = step;
    let fetch = |key: String, into: &mut Mat<f32>| -> Result<()> {
        let a = c.array(&key).ok_or_else(|| Error::format(path, format!("missing array {key}")))?;
        if a.shape != [into.rows(), into.cols()] {
            return Err(Error::format(path, format!("array {key} has shape {:?}", a.shape)));
        }
        into.as_mut_slice().copy_from_slice(&a.data);
        Ok(())
    };
    let mut result = Ok(());
    let mut names = Vec::new();
    state.model.visit_mut("", &mut |name, m, _| {
        if result.is_ok() {
            result = fetch(format!("param/{name}"), m);
        }
        names.push(name);
    });
    result?;
    let mut result = Ok(());
    state.model.visit_buffers_mut(&mut |name, m| {
        if result.is_ok() {
            result = fetch(format!("buffer/{name}"), m);
        }
    });
    result?;
    for (name, m) in names.iter().zip(state.optimizer.m.iter_mut()) {
        fetch(format!("adam_m/{name}"), m)?;
    }
    for (name, v) in names.iter().zip(state.optimizer.v.iter_mut()) {
        fetch(format!("adam_v/{name}"), v)?;
    }
    Ok(state)
}

pub const METRICS_HEADER: &str = "step,lr,l_infonce,l_rec,l_denoise,l_total,wall_time";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
    pub wall_time: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:.3}",
            self.step,
            self.lr,
            self.report.l_infonce,
            self.report.l_rec,
            self.report.l_denoise,
            self.report.l_total,
            self.wall_time
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return None;
        }
        let p = |i: usize| f[i].trim().parse::<f64>().ok();
        Some(Self {
            step: f[0].trim().parse().ok()?,
            lr: p(1)?,
            report: LossReport {
                l_infonce: p(2)?,
                l_rec: p(3)?,
                l_denoise: p(4)?,
                l_total: p(5)?,
            },
            wall_time: p(6)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format(path, "missing metrics header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| MetricsRow::parse(l).ok_or_else(|| Error::format(path, format!("bad row at line {}", i + 2))))
        .collect()
}

/// Model shape and view settings for a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSetup {
    pub spec: ModelSpec,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
}

impl RunSetup {
    pub fn view_settings(&self) -> ViewSettings {
        ViewSettings {
            augment: self.augment.clone(),
            views_per_image: self.train.views_per_image,
            mask_rate: self.train.mask_rate,
            sigma_max: self.train.sigma_max,
            patch: self.spec.patch,
        }
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        ((dataset_len / self.train.batch_size.max(1)) as u64).max(1)
    }
}

/// Outcome of [`train_loop`].
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub rows: Vec<MetricsRow>,
}

/// Batches built ahead of the optimizer.
const PREFETCH: usize = 2;

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint_{step:08}.ckpt"))
}

/// Images of the batch at `step`: epoch-wise seeded permutation, consecutive slices.
pub fn batch_indices(seed: u64, step: u64, steps_per_epoch: u64, batch_size: usize, len: usize) -> Vec<usize> {
    let epoch = step / steps_per_epoch;
    let within = (step % steps_per_epoch) as usize;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, epoch]));
    let start = (within * batch_size).min(len);
    order[start..(start + batch_size).min(len)].to_vec()
}

/// Trains from scratch, or from `resume`, writing `metrics.csv` and
/// checkpoints into `out_dir`.
pub fn train_loop(setup: &RunSetup, dataset: &Dataset, out_dir: &Path, resume: Option<&Path>) -> Result<RunOutput> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    setup.train.validate()?;
    setup.spec.validate()?;
    let cfg = &setup.train;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let spe = setup.steps_per_epoch(dataset.len());
    let schedule = Schedule::new(cfg, spe);
    let end = cfg.max_steps.map_or(schedule.total_steps, |m| m.min(schedule.total_steps));

    let mut state = match resume {
        Some(p) => {
            let s = load_checkpoint(p)?;
            if s.model.spec != setup.spec {
                return Err(Error::InvalidInput(format!(
                    "checkpoint {} was trained with a different model spec",
                    p.display()
                )));
            }
            s
        }
        None => TrainState::new(setup.spec.clone(), cfg.seed)?,
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut rows: Vec<MetricsRow> = if resume.is_some() && metrics_path.exists() {
        read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.step <= state.step)
            .collect()
    } else {
        Vec::new()
    };
    let mut file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in &rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(&metrics_path, e))?;

    let settings = setup.view_settings();
    let started = Instant::now();
    let mut last_good = resume.map(Path::to_path_buf);
    let first = state.step;
    std::thread::scope(|s| -> Result<()> {
        // batches are pure functions of (seed, step), so building them ahead is safe
        let (tx, rx) = std::sync::mpsc::sync_channel::<Result<ViewBatch>>(PREFETCH);
        let settings = &settings;
        s.spawn(move || {
            for step in first..end {
                let idx = batch_indices(cfg.seed, step, spe, cfg.batch_size, dataset.len());
                let images: Vec<_> = idx.iter().map(|&i| &dataset.images[i]).collect();
                if tx.send(build_view_batch(&images, settings, cfg.seed, &[step])).is_err() {
                    break;
                }
            }
        });
        while state.step < end {
            let batch = rx
                .recv()
                .map_err(|_| Error::InvalidInput("input pipeline stopped early".into()))??;
            let lr = schedule.lr_at(state.step);
            let report = match train_step(&mut state, &batch, cfg, &schedule) {
                Ok(r) => r,
                Err(Error::NonFiniteLoss(_)) | Err(Error::NonFiniteActivation { .. }) => {
                    return Err(Error::Diverged {
                        step: state.step,
                        last_good: last_good.as_ref().map_or("none".into(), |p| p.display().to_string()),
                    })
                }
                Err(e) => return Err(e),
            };
            let row = MetricsRow {
                step: state.step,
                lr,
                report,
                wall_time: if cfg.log_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
            };
            writeln!(file, "{}", row.to_csv()).map_err(|e| Error::io(&metrics_path, e))?;
            rows.push(row);
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < end {
                let p = checkpoint_path(out_dir, state.step);
                save_checkpoint(&state, &p)?;
                last_good = Some(p);
            }
        }
        Ok(())
    })?;
    let checkpoint = checkpoint_path(out_dir, state.step);
    save_checkpoint(&state, &checkpoint)?;
    Ok(RunOutput {
        checkpoint,
        metrics: metrics_path,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentConfig;
    use crate::data::{synthetic, SyntheticSpec};

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            warmup_epochs: 1.0,
            total_epochs: 4.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_knots() {
        let s = Schedule {
            peak: 1e-3,
            warmup_steps: 10,
            total_steps: 100,
        };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(10), 1e-3);
        assert!(s.lr_at(100).abs() < 1e-12);
        assert!((s.lr_at(9) - 0.9e-3).abs() < 1e-15);
        // continuity at the knot
        let left = s.peak * (10.0 - 1e-9) / 10.0;
        assert!((left - s.lr_at(10)).abs() < 1e-12);
        assert!(s.lr_at(55) < s.lr_at(10) && s.lr_at(55) > 0.0);
    }

    #[test]
    fn schedule_uses_linear_scaling() {
        let c = TrainConfig {
            base_lr: 2.5e-4,
            batch_size: 4096,
            ..cfg()
        };
        assert!((Schedule::new(&c, 10).peak - 4e-3).abs() < 1e-15);
    }

    #[test]
    fn presets() {
        let mae = TrainConfig::default().with_method(Method::Mae);
        assert_eq!((mae.lambda_infonce, mae.lambda, mae.views_per_image), (0.0, 1.0, 1));
        let simclr = TrainConfig::default().with_method(Method::Simclr);
        assert_eq!((simclr.lambda_infonce, simclr.sigma_max), (1.0, 0.0));
        assert!(mae.validate().is_ok() && simclr.validate().is_ok());
    }

    #[test]
    fn config_problems_list_every_key() {
        let bad = TrainConfig {
            mask_rate: 1.0,
            warmup_epochs: 500.0,
            tau: 0.0,
            ..TrainConfig::default()
        };
        let p = bad.problems().join("\n");
        assert!(p.contains("train.mask_rate"));
        assert!(p.contains("train.warmup_epochs"));
        assert!(p.contains("train.tau"));
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut model = Vit::<f64>::new(ModelSpec::tiny((4, 4), 2), 1).unwrap();
        let before = model.clone();
        let zero = model.zeros_like();
        let mut opt = AdamW::new(&model);
        let c = TrainConfig {
            weight_decay: 0.1,
            ..cfg()
        };
        opt.update(&mut model, &zero, 0.01, &c, 0);
        let mut after = Vec::new();
        model.visit("", &mut |_, m, d| after.push((m.clone(), d)));
        let mut i = 0;
        before.visit("", &mut |name, m, decay| {
            let (ref a, d) = after[i];
            assert_eq!(decay, d);
            for (x, y) in m.as_slice().iter().zip(a.as_slice()) {
                let expected = if decay { x * (1.0 - 0.01 * 0.1) } else { *x };
                assert!((expected - y).abs() <= 1e-15 * x.abs().max(1.0), "{name}");
            }
            i += 1;
        });
    }

    #[test]
    fn no_decay_on_biases_norms_and_mask_token() {
        let model = Vit::<f32>::new(ModelSpec::tiny((4, 4), 2), 1).unwrap();
        model.visit("", &mut |name, m, decay| {
            let exempt = name.ends_with(".b")
                || name.ends_with("gamma")
                || name.ends_with("beta")
                || name == "mask_token";
            assert_eq!(decay, !exempt, "{name}");
            assert!(m.is_finite());
        });
    }

    fn tiny_setup() -> (RunSetup, Dataset) {
        let setup = RunSetup {
            spec: ModelSpec::tiny((8, 8), 4),
            augment: AugmentConfig {
                output_size: (8, 8),
                ..AugmentConfig::default()
            },
            train: TrainConfig {
                checkpoint_every: 3,
                log_wall_time: false,
                ..cfg()
            },
        };
        let ds = synthetic(&SyntheticSpec {
            count: 12,
            side: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        (setup, ds)
    }

    #[test]
    fn zero_learning_rate_moves_only_moments() {
        let (setup, ds) = tiny_setup();
        let mut state = TrainState::new(setup.spec.clone(), 0).unwrap();
        let before = state.model.clone();
        let images: Vec<_> = ds.images.iter().take(4).collect();
        let batch = build_view_batch(&images, &setup.view_settings(), 0, &[0]).unwrap();
        // step 0 of a warmup schedule has lr = 0
        let sched = Schedule::new(&setup.train, 3);
        assert_eq!(sched.lr_at(0), 0.0);
        train_step(&mut state, &batch, &setup.train, &sched).unwrap();
        let mut same = true;
        let mut params = Vec::new();
        state.model.visit("", &mut |_, m, _| params.push(m.clone()));
        let mut i = 0;
        before.visit("", &mut |_, m, _| {
            same &= *m == params[i];
            i += 1;
        });
        assert!(same);
        assert!(state.optimizer.m.iter().any(|m| m.as_slice().iter().any(|v| *v != 0.0)));
        assert_eq!(state.step, 1);
    }

    #[test]
    fn mae_leaves_head_gradients_zero() {
        let (setup, ds) = tiny_setup();
        let model = Vit::<f64>::new(setup.spec.clone(), 0).unwrap();
        let mut s = setup.view_settings();
        s.views_per_image = 1;
        let images: Vec<_> = ds.images.iter().take(4).collect();
        let batch = build_view_batch(&images, &s, 0, &[0]).unwrap();
        let cfg = setup.train.clone().with_method(Method::Mae);
        let out = forward_backward(&model, &batch, &cfg.objective()).unwrap();
        out.grads.visit("", &mut |name, g, _| {
            if name.starts_with("head.") || name.starts_with("sigma_mlp") {
                assert!(g.as_slice().iter().all(|v| *v == 0.0), "{name}");
            }
        });
        assert_eq!(out.report.l_total, out.report.l_rec);
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let (setup, ds) = tiny_setup();
        let a = tempfile::tempdir().unwrap();
        let full = train_loop(&setup, &ds, a.path(), None).unwrap();
        assert_eq!(full.rows.len(), 12);

        let b = tempfile::tempdir().unwrap();
        let mut partial = setup.clone();
        partial.train.max_steps = Some(6);
        train_loop(&partial, &ds, b.path(), None).unwrap();
        let resumed = train_loop(&setup, &ds, b.path(), Some(&checkpoint_path(b.path(), 6))).unwrap();
        assert_eq!(resumed.rows, full.rows);
        assert_eq!(
            fs::read(a.path().join("metrics.csv")).unwrap(),
            fs::read(b.path().join("metrics.csv")).unwrap()
        );

        let s1 = load_checkpoint(&full.checkpoint).unwrap();
        let s2 = load_checkpoint(&resumed.checkpoint).unwrap();
        assert_eq!(checkpoint_container(&s1), checkpoint_container(&s2));
    }

    #[test]
    fn resume_rejects_foreign_spec() {
        let (setup, ds) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let mut short = setup.clone();
        short.train.max_steps = Some(1);
        let out = train_loop(&short, &ds, dir.path(), None).unwrap();
        let mut other = setup.clone();
        other.spec.encoder.mlp_dim = 24;
        assert!(train_loop(&other, &ds, dir.path(), Some(&out.checkpoint)).is_err());
    }

    #[test]
    fn metrics_row_parse_round_trip() {
        let row = MetricsRow {
            step: 3,
            lr: 1.5e-4,
            report: LossReport {
                l_infonce: 1.25,
                l_rec: 0.5,
                l_denoise: 0.0025,
                l_total: 0.8,
            },
            wall_time: 0.0,
        };
        assert_eq!(MetricsRow::parse(&row.to_csv()), Some(row));
        assert_eq!(MetricsRow::parse("1,2,3"), None);
    }
}
