//! Frozen-encoder evaluation: feature extraction, multinomial logistic
//! regression probes and k-shot resampling.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};

use crate::augment::{augment, AugmentConfig};
use crate::container::Container;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Vit};
use crate::patch::patchify;
use crate::rng::{self, tag};
use crate::tensor::Mat;

pub const FEATURES_KIND: &str = "can-features";

/// Images per encoder call. Fixed so results do not depend on thread count.
const EXTRACT_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// N x d
    pub features: Mat<f32>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> FeatureSet {
        FeatureSet {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(FEATURES_KIND);
        c.set("num_classes", self.num_classes);
        c.push("features", vec![self.features.rows(), self.features.cols()], self.features.as_slice().to_vec());
        c.push("labels", vec![self.len()], self.labels.iter().map(|&l| l as f32).collect());
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        if c.kind != FEATURES_KIND {
            return Err(Error::format(path, format!("not a feature cache (kind `{}`)", c.kind)));
        }
        let num_classes = c
            .get("num_classes")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, "missing num_classes"))?;
        let f = c.array("features").ok_or_else(|| Error::format(path, "missing features"))?;
        let l = c.array("labels").ok_or_else(|| Error::format(path, "missing labels"))?;
        if f.shape.len() != 2 || l.shape != [f.shape[0]] {
            return Err(Error::format(path, "features/labels shape mismatch"));
        }
        Ok(Self {
            features: Mat::from_vec(f.shape[0], f.shape[1], f.data.clone()),
            labels: l.data.iter().map(|&v| v as u8).collect(),
            num_classes,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?, path)
    }
}

/// Full, unmasked, noiseless forward; mean-pooled encoder output. Images of
/// another size are bilinearly resized to the model resolution.
pub fn extract_features(model: &Vit<f32>, dataset: &Dataset) -> Result<FeatureSet> {
    let spec = &model.spec;
    let resize = AugmentConfig::identity(spec.image);
    let chunks: Vec<&[crate::patch::Image]> = dataset.images.chunks(EXTRACT_CHUNK).collect();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(chunks.len().max(1));
    let mut parts: Vec<Result<Mat<f32>>> = Vec::with_capacity(chunks.len());
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let chunks = &chunks;
                let resize = &resize;
                s.spawn(move || {
                    chunks
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % threads == t)
                        .map(|(i, imgs)| (i, encode_chunk(model, imgs, resize)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<(usize, Result<Mat<f32>>)> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        all.sort_by_key(|(i, _)| *i);
        parts.extend(all.into_iter().map(|(_, r)| r));
    });
    let d = model.width();
    let mut data = Vec::with_capacity(dataset.len() * d);
    for p in parts {
        data.extend_from_slice(p?.as_slice());
    }
    Ok(FeatureSet {
        features: Mat::from_vec(dataset.len(), d, data),
        labels: dataset.labels.clone(),
        num_classes: dataset.num_classes,
    })
}

fn encode_chunk(model: &Vit<f32>, images: &[crate::patch::Image], resize: &AugmentConfig) -> Result<Mat<f32>> {
    let spec = &model.spec;
    let mut data = Vec::with_capacity(images.len() * spec.seq_len() * spec.patch_dim());
    // the identity pipeline draws nothing random; the stream only satisfies the signature
    let mut rng = rng::stream(0, &[tag::PROBE]);
    for img in images {
        let view = if (img.height, img.width) == spec.image {
            img.clone()
        } else {
            augment(img, resize, &mut rng)
        };
        data.extend_from_slice(patchify(&view, spec.patch)?.patches.as_slice());
    }
    let patches = Mat::from_vec(images.len() * spec.seq_len(), spec.patch_dim(), data);
    model.features(&patches, images.len())
}

/// Loads a checkpoint, checks it against the expected spec, and extracts features.
pub fn extract_from_checkpoint(path: &Path, expected: Option<&ModelSpec>, dataset: &Dataset) -> Result<FeatureSet> {
    let state = crate::train::load_checkpoint(path)?;
    if let Some(spec) = expected {
        if *spec != state.model.spec {
            return Err(Error::InvalidInput(format!(
                "checkpoint {} does not match the configured model spec",
                path.display()
            )));
        }
    }
    extract_features(&state.model, dataset)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// L2 penalty on the weights (not the bias), scaled per sample.
    pub l2: f64,
    /// Stop when the gradient infinity-norm falls below this.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            tolerance: 1e-6,
            max_iters: 2000,
        }
    }
}

/// Fitted multinomial logistic regression on standardized features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// (d + 1) x C, last row is the bias.
    weights: Vec<f64>,
    classes: usize,
    pub iterations: usize,
    pub converged: bool,
}

struct Problem<'a> {
    x: Vec<f64>,
    y: &'a [u8],
    n: usize,
    d: usize,
    c: usize,
    l2: f64,
}

impl Problem<'_> {
    /// Mean cross-entropy + l2/2 |W|^2, and its gradient.
    fn eval(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        let (d, c) = (self.d, self.c);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut logits = vec![0.0; c];
        let inv_n = 1.0 / self.n as f64;
        for i in 0..self.n {
            let xi = &self.x[i * d..(i + 1) * d];
            for (k, l) in logits.iter_mut().enumerate() {
                *l = w[d * c + k];
            }
            for (j, &xj) in xi.iter().enumerate() {
                if xj != 0.0 {
                    for (l, wjk) in logits.iter_mut().zip(&w[j * c..(j + 1) * c]) {
                        *l += xj * wjk;
                    }
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let yi = self.y[i] as usize;
            loss += max + z.ln() - logits[yi];
            for k in 0..c {
                let p = (logits[k] - max).exp() / z - if k == yi { 1.0 } else { 0.0 };
                let p = p * inv_n;
                for (j, &xj) in xi.iter().enumerate() {
                    grad[j * c + k] += p * xj;
                }
                grad[d * c + k] += p;
            }
        }
        loss *= inv_n;
        for (g, wj) in grad[..d * c].iter_mut().zip(&w[..d * c]) {
            *g += self.l2 * wj;
            loss += 0.5 * self.l2 * wj * wj;
        }
        loss
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with backtracking Armijo steps.
fn lbfgs(p: &Problem<'_>, w: &mut [f64], cfg: &ProbeConfig) -> (usize, bool) {
    const MEMORY: usize = 10;
    let n = w.len();
    let mut g = vec![0.0; n];
    let mut f = p.eval(w, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut g_new = vec![0.0; n];
    let mut w_new = vec![0.0; n];
    for iter in 0..cfg.max_iters {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < cfg.tolerance {
            return (iter, true);
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push((a, rho));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y), (a, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
            s_hist.clear();
            y_hist.clear();
        }
        let mut step = if s_hist.is_empty() {
            (1.0 / g.iter().map(|v| v * v).sum::<f64>().sqrt()).min(1.0)
        } else {
            1.0
        };
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                w_new[i] = w[i] + step * dir[i];
            }
            let f_new = p.eval(&w_new, &mut g_new);
            if f_new <= f + 1e-4 * step * slope {
                let s: Vec<f64> = (0..n).map(|i| w_new[i] - w[i]).collect();
                let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
                if dot(&s, &y) > 1e-12 {
                    s_hist.push(s);
                    y_hist.push(y);
                    if s_hist.len() > MEMORY {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                }
                w.copy_from_slice(&w_new);
                g.copy_from_slice(&g_new);
                f = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no further decrease is representable
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            return (iter, gmax < cfg.tolerance.sqrt());
        }
    }
    (cfg.max_iters, false)
}

impl LinearProbe {
    pub fn fit(train: &FeatureSet, cfg: &ProbeConfig) -> Result<Self> {
        let n = train.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty probe training set".into()));
        }
        let c = train.num_classes.max(train.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0));
        let mut present = vec![false; c];
        train.labels.iter().for_each(|&l| present[l as usize] = true);
        if present.iter().filter(|&&p| p).count() < 2 {
            return Err(Error::InvalidInput("probe training set contains a single class".into()));
        }
        let d = train.features.cols();
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, &v) in train.features.row(i).iter().enumerate() {
                mean[j] += v as f64 / n as f64;
            }
        }
        for i in 0..n {
            for (j, &v) in train.features.row(i).iter().enumerate() {
                var[j] += (v as f64 - mean[j]).powi(2) / n as f64;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        let mut x = Vec::with_capacity(n * d);
        for i in 0..n {
            x.extend(train.features.row(i).iter().enumerate().map(|(j, &v)| (v as f64 - mean[j]) * inv_std[j]));
        }
        let problem = Problem {
            x,
            y: &train.labels,
            n,
            d,
            c,
            l2: cfg.l2,
        };
        let mut weights = vec![0.0; (d + 1) * c];
        let (iterations, converged) = lbfgs(&problem, &mut weights, cfg);
        Ok(Self {
            mean,
            inv_std,
            weights,
            classes: c,
            iterations,
            converged,
        })
    }

    pub fn predict(&self, features: &Mat<f32>) -> Vec<usize> {
        let (d, c) = (self.mean.len(), self.classes);
        (0..features.rows())
            .map(|i| {
                let mut logits: Vec<f64> = self.weights[d * c..].to_vec();
                for (j, &v) in features.row(i).iter().enumerate() {
                    let xj = (v as f64 - self.mean[j]) * self.inv_std[j];
                    for (l, w) in logits.iter_mut().zip(&self.weights[j * c..(j + 1) * c]) {
                        *l += xj * w;
                    }
                }
                // first maximum wins ties
                let mut best = 0;
                for k in 1..c {
                    if logits[k] > logits[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn accuracy(&self, test: &FeatureSet) -> f64 {
        if test.is_empty() {
            return 0.0;
        }
        let hits = self
            .predict(&test.features)
            .iter()
            .zip(&test.labels)
            .filter(|(p, &l)| **p == l as usize)
            .count();
        hits as f64 / test.len() as f64
    }
}

/// Top-1 test accuracy of a logistic-regression probe fitted on `train`.
pub fn linear_probe(train: &FeatureSet, test: &FeatureSet, cfg: &ProbeConfig) -> Result<f64> {
    if train.features.cols() != test.features.cols() {
        return Err(Error::InvalidInput(format!(
            "train features have {} dims, test {}",
            train.features.cols(),
            test.features.cols()
        )));
    }
    let mut present = vec![false; 256];
    train.labels.iter().for_each(|&l| present[l as usize] = true);
    if let Some(l) = test.labels.iter().find(|&&l| !present[l as usize]) {
        return Err(Error::InvalidInput(format!("test class {l} absent from the probe training set")));
    }
    Ok(LinearProbe::fit(train, cfg)?.accuracy(test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KShotReport {
    pub k: usize,
    pub repeats: usize,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

/// Draws `k` training examples per class `repeats` times, fits a probe on each
/// draw and scores it on `test`.
pub fn k_shot_probe(
    train: &FeatureSet,
    test: &FeatureSet,
    k: usize,
    repeats: usize,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<KShotReport> {
    if k == 0 || repeats == 0 {
        return Err(Error::InvalidInput("k and the number of repeats must be >= 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.num_classes];
    for (i, &l) in train.labels.iter().enumerate() {
        if l as usize >= by_class.len() {
            by_class.resize(l as usize + 1, Vec::new());
        }
        by_class[l as usize].push(i);
    }
    let classes: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    if let Some(&c) = classes.iter().find(|&&c| by_class[c].len() < k) {
        return Err(Error::InvalidInput(format!(
            "k = {k} exceeds the {} training examples of class {c}",
            by_class[c].len()
        )));
    }
    let mut accuracies = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = rng::stream(seed, &[tag::PROBE, k as u64, r as u64]);
        let mut idx = Vec::with_capacity(k * classes.len());
        for &c in &classes {
            idx.extend(by_class[c].choose_multiple(&mut rng, k).copied());
        }
        idx.sort_unstable();
        accuracies.push(linear_probe(&train.subset(&idx), test, cfg)?);
    }
    let mean = accuracies.iter().sum::<f64>() / repeats as f64;
    let std = (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / repeats as f64).sqrt();
    Ok(KShotReport {
        k,
        repeats,
        mean,
        std,
        accuracies,
    })
}

/// Same features with labels permuted by a seeded shuffle (chance-level baseline).
pub fn shuffle_labels(set: &FeatureSet, seed: u64) -> FeatureSet {
    let mut labels = set.labels.clone();
    labels.shuffle(&mut rng::stream(seed, &[tag::PROBE, u64::MAX]));
    FeatureSet {
        labels,
        ..set.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, SyntheticSpec};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(n: usize, classes: usize, d: usize, spread: f64, seed: u64) -> FeatureSet {
        let mut rng = rng::stream(seed, &[99]);
        let centers: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 5.0).collect())
            .collect();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % classes;
            data.extend(centers[c].iter().map(|m| (m + spread * rng.sample::<f64, _>(StandardNormal)) as f32));
            labels.push(c as u8);
        }
        FeatureSet {
            features: Mat::from_vec(n, d, data),
            labels,
            num_classes: classes,
        }
    }

    #[test]
    fn separable_blobs_are_perfect() {
        let train = blobs(200, 2, 5, 0.3, 1);
        let test = blobs(100, 2, 5, 0.3, 1);
        assert_eq!(linear_probe(&train, &test, &ProbeConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn one_hot_features_are_perfect() {
        let n = 60;
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        let features = Mat::from_fn(n, 3, |i, j| if labels[i] as usize == j { 1.0 } else { 0.0 });
        let set = FeatureSet {
            features,
            labels,
            num_classes: 3,
        };
        let probe = LinearProbe::fit(&set, &ProbeConfig::default()).unwrap();
        assert!(probe.converged);
        assert_eq!(probe.accuracy(&set), 1.0);
    }

    #[test]
    fn single_class_rejected() {
        let mut set = blobs(10, 2, 3, 1.0, 0);
        set.labels.iter_mut().for_each(|l| *l = 0);
        assert!(LinearProbe::fit(&set, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn unseen_test_class_rejected() {
        let train = blobs(20, 2, 3, 1.0, 0);
        let mut test = blobs(20, 2, 3, 1.0, 0);
        test.labels[0] = 2;
        assert!(linear_probe(&train, &test, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn shuffled_labels_are_near_chance() {
        let mut total = 0.0;
        for seed in 0..10 {
            let train = shuffle_labels(&blobs(400, 4, 8, 1.0, seed), seed);
            let test = shuffle_labels(&blobs(400, 4, 8, 1.0, seed + 100), seed + 100);
            total += linear_probe(&train, &test, &ProbeConfig::default()).unwrap();
        }
        let mean = total / 10.0;
        assert!((mean - 0.25).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn full_k_equals_linear_probe() {
        let train = blobs(40, 2, 4, 3.0, 3);
        let test = blobs(40, 2, 4, 3.0, 4);
        let cfg = ProbeConfig::default();
        let r = k_shot_probe(&train, &test, 20, 1, 0, &cfg).unwrap();
        assert_eq!(r.mean, linear_probe(&train, &test, &cfg).unwrap());
        assert_eq!(r.std, 0.0);
        assert!(k_shot_probe(&train, &test, 21, 1, 0, &cfg).is_err());
    }

    #[test]
    fn identical_features_give_half() {
        let n = 40;
        let set = FeatureSet {
            features: Mat::filled(n, 3, 0.7),
            labels: (0..n).map(|i| (i % 2) as u8).collect(),
            num_classes: 2,
        };
        let r = k_shot_probe(&set, &set, 1, 5, 0, &ProbeConfig::default()).unwrap();
        assert!((r.mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn feature_cache_round_trip() {
        let set = blobs(7, 3, 2, 1.0, 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        set.write(&p).unwrap();
        assert_eq!(FeatureSet::read(&p).unwrap(), set);
    }

    #[test]
    fn extraction_is_deterministic_and_per_sample() {
        let spec = ModelSpec::tiny((8, 8), 4);
        let model = Vit::<f32>::new(spec, 0).unwrap();
        let ds = synthetic(&SyntheticSpec {
            count: 40,
            side: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let a = extract_features(&model, &ds).unwrap();
        assert_eq!(a, extract_features(&model, &ds).unwrap());
        let order: Vec<usize> = (0..ds.len()).rev().collect();
        let b = extract_features(&model, &ds.subset(&order)).unwrap();
        for (i, &j) in order.iter().enumerate() {
            assert_eq!(a.features.row(j), b.features.row(i));
        }
    }
}
