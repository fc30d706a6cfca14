//! Acceptance suite. Each test prints one `[acceptance] <name>: PASS|FAIL ...`
//! line and then asserts. Desk-scale training runs use 16x16 synthetic images
//! with the ViT-Micro encoder; `CAN_DESK_STEPS` overrides their length.

use std::io::Write;
use std::path::Path;

use can_core::augment::{build_view_batch, AugmentConfig, ViewBatch, ViewSettings};
use can_core::cost::{self, method_flops};
use can_core::data::{self, synthetic, Dataset, SyntheticSpec};
use can_core::eval::{extract_features, k_shot_probe, linear_probe, ProbeConfig};
use can_core::model::{ModelSpec, Vit};
use can_core::nn::{NormMode, Params};
use can_core::objectives::{
    denoise_loss, info_nce, info_nce_with_grad, recon_loss, recon_loss_with_grad, LossWeights,
};
use can_core::patch::{gather_unmasked, sample_mask, scatter_with_mask_token, MaskVector};
use can_core::rng;
use can_core::tensor::Mat;
use can_core::train::{
    checkpoint_path, forward_backward, load_checkpoint, train_loop, Method, Objective, RunSetup, TrainConfig,
    TrainState,
};
use rand::Rng;
use rand_distr::StandardNormal;

/// Writes straight to the stderr handle: the harness only captures the print
/// macros, so the lines show up in a plain `cargo test` log.
fn report(name: &str, pass: bool, detail: impl AsRef<str>) {
    let line = format!(
        "[acceptance] {name}: {} {}\n",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

// ---------------------------------------------------------------- oracles

fn random_unit_rows<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Mat<f64> {
    let mut m = Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    for r in 0..rows {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    m
}

/// Every anchor of the 2n embeddings against all others, no stabilization.
fn brute_info_nce(u1: &Mat<f64>, u2: &Mat<f64>, tau: f64) -> f64 {
    let n = u1.rows();
    let all: Vec<&[f64]> = (0..n).map(|i| u1.row(i)).chain((0..n).map(|i| u2.row(i))).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for a in 0..2 * n {
        let pos = (a + n) % (2 * n);
        let mut denom = 0.0;
        for b in 0..2 * n {
            if b != a {
                denom += (dot(all[a], all[b]) / tau).exp();
            }
        }
        total += -((dot(all[a], all[pos]) / tau).exp() / denom).ln();
    }
    total / (2 * n) as f64
}

fn brute_masked_mse(target: &Mat<f64>, pred: &Mat<f64>, mask: &MaskVector, masked: bool) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for t in 0..target.rows() {
        if mask.bits[t] == masked {
            for j in 0..target.cols() {
                sum += (pred.get(t, j) - target.get(t, j)).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[test]
fn loss_oracles() {
    let mut rng = rng::stream(2024, &[1]);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=4usize);
        let k = rng.random_range(2..=6usize);
        let tau = rng.random_range(0.05..1.0f64);
        let u1 = random_unit_rows(n, k, &mut rng);
        let u2 = random_unit_rows(n, k, &mut rng);
        worst = worst.max((info_nce(&u1, &u2, tau).unwrap() - brute_info_nce(&u1, &u2, tau)).abs());

        let t = rng.random_range(1..=8usize);
        let p = 3 * rng.random_range(1..=4usize);
        let bits: Vec<bool> = (0..t).map(|_| rng.random_bool(0.5)).collect();
        let mask = MaskVector::from_bits(bits);
        let clean = Mat::from_fn(t, p, |_, _| rng.random::<f64>());
        let noise = Mat::from_fn(t, p, |_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
        let pred = Mat::from_fn(t, p, |_, _| rng.random::<f64>());
        worst = worst.max((recon_loss(&clean, &pred, &mask).unwrap() - brute_masked_mse(&clean, &pred, &mask, true)).abs());
        worst = worst.max((denoise_loss(&noise, &pred, &mask).unwrap() - brute_masked_mse(&noise, &pred, &mask, false)).abs());
    }
    let pass = worst <= 1e-6;
    report("loss oracles", pass, format!("200 instances, max abs error {worst:.2e} (tol 1e-6)"));
    assert!(pass);
}

// ---------------------------------------------------------------- gradients

fn tiny_batch(n: usize, views: usize, mask_rate: f64, sigma_max: f64, seed: u64) -> ViewBatch {
    let ds = synthetic(&SyntheticSpec {
        count: n,
        side: 8,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let images: Vec<_> = ds.images.iter().collect();
    let settings = ViewSettings {
        augment: AugmentConfig {
            output_size: (8, 8),
            ..AugmentConfig::default()
        },
        views_per_image: views,
        mask_rate,
        sigma_max,
        patch: 2,
    };
    build_view_batch(&images, &settings, seed, &[7]).unwrap()
}

#[test]
fn gradient_check() {
    let spec = ModelSpec::tiny((8, 8), 2);
    let mut model = Vit::<f64>::new(spec, 3).unwrap();
    let batch = tiny_batch(4, 2, 0.5, 0.05, 11);
    let objective = TrainConfig::default().objective();
    let analytic = forward_backward(&model, &batch, &objective).unwrap();
    let mut grads = Vec::new();
    analytic.grads.visit("", &mut |name, g, _| grads.push((name, g.clone())));

    let loss = |m: &Vit<f64>| forward_backward(m, &batch, &objective).unwrap().report.l_total;
    // near the round-off/truncation optimum for central differences in f64
    let h = 1e-5;
    let (mut total, mut ok) = (0usize, 0usize);
    let mut worst_name = String::new();
    let mut worst = 0.0f64;
    for (ti, (name, g)) in grads.iter().enumerate() {
        for k in 0..g.as_slice().len() {
            let perturb = |m: &mut Vit<f64>, delta: f64| {
                let mut i = 0;
                m.visit_mut("", &mut |_, p, _| {
                    if i == ti {
                        p.as_mut_slice()[k] += delta;
                    }
                    i += 1;
                });
            };
            perturb(&mut model, h);
            let up = loss(&model);
            perturb(&mut model, -2.0 * h);
            let down = loss(&model);
            perturb(&mut model, h);
            let numeric = (up - down) / (2.0 * h);
            let a = g.as_slice()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            total += 1;
            if rel <= 1e-4 {
                ok += 1;
            } else if rel > worst {
                worst = rel;
                worst_name = format!("{name}[{k}]");
            }
        }
    }
    let frac = ok as f64 / total as f64;
    let pass = frac >= 0.95;
    report(
        "gradient check",
        pass,
        format!(
            "{ok}/{total} coordinates ({:.2}%) within 1e-4 relative (need 95%); worst {worst:.1e} at {worst_name}",
            100.0 * frac
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- masking

#[test]
fn masking_invariants() {
    const T: usize = 64;
    const DRAWS: usize = 100_000;
    // upper 1% point of chi-square with 63 degrees of freedom
    const CRITICAL: f64 = 92.010_023_614_132_14;
    let mut lines = Vec::new();
    let mut pass = true;
    for (ri, rate) in [0.25, 0.5, 0.75].into_iter().enumerate() {
        let mut rng = rng::stream(99, &[ri as u64]);
        let mut counts = [0u64; T];
        let mut exact = true;
        let kept = T - (rate * T as f64).round() as usize;
        for _ in 0..DRAWS {
            let m = sample_mask(T, rate, &mut rng).unwrap();
            exact &= m.unmasked_count == kept && m.bits.iter().filter(|b| !**b).count() == kept;
            for (c, &b) in counts.iter_mut().zip(&m.bits) {
                *c += b as u64;
            }
        }
        // fixed-size draws: indicator covariance is p(1-p) T/(T-1) (I - 11'/T)
        let p = (T - kept) as f64 / T as f64;
        let e = DRAWS as f64 * p;
        let var = DRAWS as f64 * p * (1.0 - p);
        let stat = (T - 1) as f64 / T as f64 * counts.iter().map(|&c| (c as f64 - e).powi(2) / var).sum::<f64>();
        pass &= exact && stat < CRITICAL;
        lines.push(format!("rate {rate}: exact counts {exact}, chi2 {stat:.1}"));
    }

    let mut rng = rng::stream(5, &[]);
    let mut round_trips = true;
    for _ in 0..1000 {
        let t = rng.random_range(1..=32usize);
        let d = rng.random_range(1..=8usize);
        let rate = rng.random_range(0.0..0.97f64);
        let Ok(mask) = sample_mask(t, rate, &mut rng) else {
            continue;
        };
        let tokens = Mat::from_fn(t, d, |_, _| rng.random::<f64>());
        let token: Vec<f64> = (0..d).map(|_| -rng.random::<f64>()).collect();
        let (kept, plan) = gather_unmasked(&tokens, &mask).unwrap();
        let full = scatter_with_mask_token(&kept, &plan, &token).unwrap();
        for r in 0..t {
            let expect = if mask.bits[r] { &token[..] } else { tokens.row(r) };
            round_trips &= full.row(r) == expect;
        }
        round_trips &= kept.rows() == mask.unmasked_count;
    }
    pass &= round_trips;
    lines.push(format!("1000 gather/scatter round trips {round_trips} (critical {CRITICAL:.2})"));
    report("masking invariants", pass, lines.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------- degenerate configs

fn max_grad_diff(a: &Vit<f64>, b: &Vit<f64>) -> f64 {
    let mut xs = Vec::new();
    a.visit("", &mut |_, m, _| xs.push(m.clone()));
    let mut i = 0;
    let mut worst = 0.0f64;
    b.visit("", &mut |_, m, _| {
        for (x, y) in xs[i].as_slice().iter().zip(m.as_slice()) {
            worst = worst.max((x - y).abs());
        }
        i += 1;
    });
    worst
}

/// Gathers the visible noisy patches of every view without the trainer helpers.
fn standalone_input(batch: &ViewBatch) -> (Mat<f64>, Vec<can_core::patch::TokenGatherPlan>) {
    let mut rows = Vec::new();
    let mut plans = Vec::new();
    let mut cols = 0;
    for item in &batch.items {
        let (kept, plan) = gather_unmasked(&item.noisy.patches.cast::<f64>(), &item.mask).unwrap();
        cols = kept.cols();
        rows.extend_from_slice(kept.as_slice());
        plans.push(plan);
    }
    (Mat::from_vec(rows.len() / cols, cols, rows), plans)
}

fn standalone_contrastive(model: &Vit<f64>, batch: &ViewBatch, tau: f64) -> Vit<f64> {
    let n = batch.n;
    let (x, plans) = standalone_input(batch);
    let (z, enc) = model.encode(&x, &plans).unwrap();
    let (u, head) = model.pool_and_project(&z, 2 * n, NormMode::Train).unwrap();
    let d = u.cols();
    let u1 = Mat::from_vec(n, d, u.as_slice()[..n * d].to_vec());
    let u2 = Mat::from_vec(n, d, u.as_slice()[n * d..].to_vec());
    let (_, g1, g2) = info_nce_with_grad(&u1, &u2, tau).unwrap();
    let mut du = g1.into_vec();
    du.extend(g2.into_vec());
    let mut grads = model.zeros_like();
    let dz = model.head_backward(&head, &Mat::from_vec(2 * n, d, du), &mut grads);
    model.encode_backward(&enc, &dz, &mut grads);
    grads
}

fn standalone_mae(model: &Vit<f64>, batch: &ViewBatch) -> Vit<f64> {
    let views = batch.items.len();
    let t = batch.seq_len();
    let (x, plans) = standalone_input(batch);
    let (z, enc) = model.encode(&x, &plans).unwrap();
    let (xhat, dec) = model.decode(&z, &plans, None).unwrap();
    let p = xhat.cols();
    let mut dx = Vec::with_capacity(xhat.as_slice().len());
    for (v, item) in batch.items.iter().enumerate() {
        let pred = Mat::from_vec(t, p, xhat.as_slice()[v * t * p..(v + 1) * t * p].to_vec());
        let (_, g) = recon_loss_with_grad(&item.clean.patches.cast::<f64>(), &pred, &item.mask).unwrap();
        dx.extend(g.as_slice().iter().map(|v| v / views as f64));
    }
    let mut grads = model.zeros_like();
    let (dz, dsigma) = model.decode_backward(&dec, &Mat::from_vec(views * t, p, dx), &mut grads);
    assert!(dsigma.is_none());
    model.encode_backward(&enc, &dz, &mut grads);
    grads
}

#[test]
fn degenerate_config_equivalence() {
    let model = Vit::<f64>::new(ModelSpec::tiny((8, 8), 2), 21).unwrap();
    let tau = 0.1;
    let contrastive = Objective {
        weights: LossWeights::new(1.0, 0.5).unwrap(),
        tau,
        sigma_conditioning: true,
    };
    let mae = Objective {
        weights: LossWeights::new(0.0, 1.0).unwrap(),
        tau,
        sigma_conditioning: true,
    };
    let (mut worst_c, mut worst_m) = (0.0f64, 0.0f64);
    for b in 0..20 {
        let batch = tiny_batch(4, 2, 0.5, 0.0, 100 + b);
        let ours = forward_backward(&model, &batch, &contrastive).unwrap().grads;
        worst_c = worst_c.max(max_grad_diff(&ours, &standalone_contrastive(&model, &batch, tau)));

        let batch = tiny_batch(4, 1, 0.5, 0.0, 200 + b);
        let ours = forward_backward(&model, &batch, &mae).unwrap().grads;
        worst_m = worst_m.max(max_grad_diff(&ours, &standalone_mae(&model, &batch)));
    }
    let pass = worst_c <= 1e-6 && worst_m <= 1e-6;
    report(
        "degenerate-config equivalence",
        pass,
        format!("20 batches; max |grad diff| contrastive {worst_c:.1e}, MAE {worst_m:.1e} (tol 1e-6)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- desk-scale runs

const DESK_SIDE: usize = 16;
const DESK_BATCH: usize = 64;

fn desk_steps() -> u64 {
    std::env::var("CAN_DESK_STEPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(200)
}

fn desk_data() -> (Dataset, Dataset) {
    synthetic(&SyntheticSpec {
        count: 2048,
        num_classes: 4,
        side: DESK_SIDE,
        seed: 0,
    })
    .unwrap()
    .split(0.2)
}

fn desk_spec() -> ModelSpec {
    ModelSpec {
        image: (DESK_SIDE, DESK_SIDE),
        patch: 4,
        ..ModelSpec::micro()
    }
}

/// ViT-Micro at 16x16, batch 64, base lr 2e-3, one warmup epoch, the schedule
/// ending exactly at `steps`.
fn desk_setup(train_len: usize, seed: u64, steps: u64) -> RunSetup {
    let spe = (train_len / DESK_BATCH) as f64;
    RunSetup {
        spec: desk_spec(),
        augment: AugmentConfig {
            output_size: (DESK_SIDE, DESK_SIDE),
            ..AugmentConfig::default()
        },
        train: TrainConfig {
            batch_size: DESK_BATCH,
            base_lr: 2e-3,
            warmup_epochs: 1.0,
            total_epochs: steps as f64 / spe,
            seed,
            checkpoint_every: 0,
            log_wall_time: false,
            ..TrainConfig::default()
        },
    }
}

fn tail_mean(rows: &[can_core::train::MetricsRow], k: usize, f: impl Fn(&can_core::train::MetricsRow) -> f64) -> f64 {
    let tail = &rows[rows.len().saturating_sub(k)..];
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}

#[test]
fn complementarity_direction() {
    let (train, _) = desk_data();
    let steps = desk_steps();
    let spe = train.len() / DESK_BATCH;
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let run = |lambda_infonce: f64| {
            let mut setup = desk_setup(train.len(), seed, steps);
            setup.train.lambda_infonce = lambda_infonce;
            let dir = tempfile::tempdir().unwrap();
            train_loop(&setup, &train, dir.path(), None).unwrap().rows
        };
        let joint = run(0.03);
        let contrastive = run(1.0);
        let recon = run(0.0);
        // the last epoch: identical batches, masks and noise across the three runs
        let j_nce = tail_mean(&joint, spe, |r| r.report.l_infonce);
        let c_nce = tail_mean(&contrastive, spe, |r| r.report.l_infonce);
        let j_rec = tail_mean(&joint, spe, |r| r.report.l_rec);
        let r_rec = tail_mean(&recon, spe, |r| r.report.l_rec);
        let win = j_nce <= c_nce && j_rec <= r_rec;
        wins += win as usize;
        lines.push(format!(
            "seed {seed}: infonce joint {j_nce:.4} vs contrastive-only {c_nce:.4}, rec joint {j_rec:.4} vs rec-only {r_rec:.4}"
        ));
    }
    let pass = wins >= 2;
    report(
        "complementarity direction",
        pass,
        format!("{wins}/3 seeds (need 2), {steps} steps; {}", lines.join("; ")),
    );
    assert!(pass);
}

fn probe_accuracy(model: &Vit<f32>, train: &Dataset, test: &Dataset) -> f64 {
    let a = extract_features(model, train).unwrap();
    let b = extract_features(model, test).unwrap();
    linear_probe(&a, &b, &ProbeConfig::default()).unwrap()
}

#[test]
fn denoising_ablation_direction() {
    let (train, test) = desk_data();
    let steps = desk_steps();
    // (name, sigma_max, lambda, sigma conditioning)
    let configs = [
        ("none", 0.0, 1.0, false),
        ("+noise", 0.05, 1.0, false),
        ("+noise +loss", 0.05, 0.5, false),
        ("full", 0.05, 0.5, true),
    ];
    let mut means = Vec::new();
    for (name, sigma_max, lambda, cond) in configs {
        let mut accs = Vec::new();
        for seed in 0..3 {
            let mut setup = desk_setup(train.len(), seed, steps);
            setup.train.sigma_max = sigma_max;
            setup.train.lambda = lambda;
            setup.train.sigma_conditioning = cond;
            let dir = tempfile::tempdir().unwrap();
            let out = train_loop(&setup, &train, dir.path(), None).unwrap();
            let state = load_checkpoint(&out.checkpoint).unwrap();
            accs.push(100.0 * probe_accuracy(&state.model, &train, &test));
        }
        means.push((name, accs.iter().sum::<f64>() / 3.0, accs));
    }
    let none = means[0].1;
    let full = means[3].1;
    let pass = full >= none - 0.5;
    let detail: Vec<String> = means
        .iter()
        .map(|(n, m, a)| format!("{n} {m:.2}% ({:.1}/{:.1}/{:.1})", a[0], a[1], a[2]))
        .collect();
    report(
        "denoising ablation direction",
        pass,
        format!("full {full:.2} vs none {none:.2} - 0.5, {steps} steps; {}", detail.join(", ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- cost model

#[test]
fn flops_claims() {
    let spec = ModelSpec::vit_l();
    let can = method_flops(Method::Can, "vit-l", &spec, 0.5).unwrap();
    let simclr = method_flops(Method::Simclr, "vit-l", &spec, 0.5).unwrap();
    let ratio = simclr.total() as f64 / can.total() as f64;

    let mut no_decoder = spec.clone();
    no_decoder.decoder.depth = 0;
    let can0 = method_flops(Method::Can, "vit-l", &no_decoder, 0.5).unwrap();
    let simclr0 = method_flops(Method::Simclr, "vit-l", &no_decoder, 0.5).unwrap();
    // per-token encoder work: everything but the sequence-quadratic attention terms
    let linear = |r: &cost::CostReport| {
        let stack = cost::stack_flops(&no_decoder.encoder, r.encoder_seq_len);
        r.encoder_flops - r.views as u64 * stack.quadratic()
    };
    let linear_ratio = linear(&simclr0) as f64 / linear(&can0) as f64;
    let encoder_ratio = simclr0.encoder_flops as f64 / can0.encoder_flops as f64;
    let pass = (1.55..=1.85).contains(&ratio) && linear_ratio == 2.0;
    report(
        "FLOPs claims",
        pass,
        format!(
            "ViT-L m=0.5 SimCLR/CAN {ratio:.3} (need [1.55, 1.85]); zero-depth decoder: per-token encoder ratio {linear_ratio} (need 2), full encoder ratio incl. attention scores {encoder_ratio:.3}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- weights

#[test]
fn combined_weight_algebra() {
    let mut rng = rng::stream(8, &[]);
    let mut pass = true;
    let mut worst = 0.0f64;
    for i in 0..100 {
        // include the corners
        let (a, b) = match i {
            0 => (0.0, 0.0),
            1 => (1.0, 1.0),
            2 => (0.0, 1.0),
            3 => (1.0, 0.0),
            _ => (rng.random::<f64>(), rng.random::<f64>()),
        };
        let w = LossWeights::new(a, b).unwrap();
        let parts = [w.infonce(), w.rec(), w.denoise()];
        let err = (parts.iter().sum::<f64>() - 1.0).abs();
        worst = worst.max(err);
        pass &= parts.iter().all(|p| *p >= 0.0) && err <= f64::EPSILON;
    }
    report(
        "combined-weight algebra",
        pass,
        format!("100 pairs, max |sum - 1| = {worst:.2e} (1 ulp = {:.2e})", f64::EPSILON),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- training system

#[test]
fn training_system_contracts() {
    let (train, _) = desk_data();
    let small = train.subset(&(0..640).collect::<Vec<_>>());
    let mut lines = Vec::new();

    // same seed, identical metrics files
    let setup = desk_setup(small.len(), 4, 20);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_loop(&setup, &small, a.path(), None).unwrap();
    train_loop(&setup, &small, b.path(), None).unwrap();
    let same = std::fs::read(a.path().join("metrics.csv")).unwrap() == std::fs::read(b.path().join("metrics.csv")).unwrap();
    lines.push(format!("same-seed CSV identical {same}"));

    // stop at 10, resume, compare steps 11..20 and the final state
    let c = tempfile::tempdir().unwrap();
    let mut first = setup.clone();
    first.train.max_steps = Some(10);
    train_loop(&first, &small, c.path(), None).unwrap();
    let resumed = train_loop(&setup, &small, c.path(), Some(&checkpoint_path(c.path(), 10))).unwrap();
    let d = tempfile::tempdir().unwrap();
    let full = train_loop(&setup, &small, d.path(), None).unwrap();
    let tail_equal = resumed.rows[10..] == full.rows[10..] && resumed.rows.len() == 20;
    let state_equal = checkpoint_bytes(&resumed.checkpoint) == checkpoint_bytes(&full.checkpoint);
    lines.push(format!("resume reproduces steps 11-20 {tail_equal}, final state {state_equal}"));

    // 50-step smoke run, 3 seeds
    let (mut first_loss, mut last_loss) = (0.0, 0.0);
    for seed in 0..3 {
        let setup = desk_setup(train.len(), seed, 50);
        let rows = train_loop(&setup, &train, tempfile::tempdir().unwrap().path(), None).unwrap().rows;
        first_loss += rows[0].report.l_total / 3.0;
        last_loss += rows[49].report.l_total / 3.0;
    }
    let decreased = last_loss < first_loss;
    lines.push(format!("smoke l_total step 1 {first_loss:.4} -> step 50 {last_loss:.4}"));

    let pass = same && tail_equal && state_equal && decreased;
    report("training-system contracts", pass, lines.join("; "));
    assert!(pass);
}

fn checkpoint_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

// ---------------------------------------------------------------- probes

fn probe_sanity_on(train: &Dataset, test: &Dataset, setup: &RunSetup, label: &str) -> (bool, String) {
    let random = TrainState::new(setup.spec.clone(), setup.train.seed).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let out = train_loop(setup, train, dir.path(), None).unwrap();
    let trained = load_checkpoint(&out.checkpoint).unwrap().model;
    let acc_random = 100.0 * probe_accuracy(&random, train, test);
    let acc_trained = 100.0 * probe_accuracy(&trained, train, test);

    let ftrain = extract_features(&trained, train).unwrap();
    let ftest = extract_features(&trained, test).unwrap();
    let ks = [1, 5, 10, 25];
    let means: Vec<f64> = ks
        .iter()
        .map(|&k| 100.0 * k_shot_probe(&ftrain, &ftest, k, 10, 0, &ProbeConfig::default()).unwrap().mean)
        .collect();
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    let gain = acc_trained - acc_random;
    let pass = gain >= 10.0 && monotone;
    (
        pass,
        format!(
            "{label}: trained {acc_trained:.2}% vs random init {acc_random:.2}% (gain {gain:.2}, need 10); k-shot means k=1/5/10/25: {:.1}/{:.1}/{:.1}/{:.1} monotone {monotone}",
            means[0], means[1], means[2], means[3]
        ),
    )
}

/// The same protocol on the synthetic desk data. Does not reach the 10-point
/// gain: after 400 steps the pretrained and random-init probes are both near
/// chance, so it stays opt-in.
#[test]
#[ignore]
fn probe_sanity_synthetic() {
    let (train, test) = desk_data();
    let steps = 2 * desk_steps();
    let setup = desk_setup(train.len(), 0, steps);
    let (pass, detail) = probe_sanity_on(&train, &test, &setup, &format!("synthetic, {steps} steps"));
    report("probe sanity (synthetic stand-in)", pass, detail);
    assert!(pass);
}

/// The full protocol: ViT-Micro, CAN, 100 epochs on CIFAR-10 from
/// `CAN_CIFAR10_DIR` (the directory holding `data_batch_*.bin` and
/// `test_batch.bin`). Days of single-core CPU time, so without the variable
/// the check is reported as not verified rather than run.
#[test]
fn probe_sanity_cifar10() {
    let Ok(dir) = std::env::var("CAN_CIFAR10_DIR") else {
        report(
            "probe sanity (CIFAR-10)",
            false,
            "NOT RUN: set CAN_CIFAR10_DIR (needs ~40 CPU-hours); the synthetic stand-in \
             (--ignored probe_sanity_synthetic) does not reach the 10-point gain",
        );
        return;
    };
    let train = data::load_cifar10(Path::new(&dir), "data_batch").unwrap();
    let test = data::load_cifar10(Path::new(&dir), "test_batch").unwrap();
    let setup = RunSetup {
        spec: ModelSpec::micro(),
        augment: AugmentConfig::default(),
        train: TrainConfig {
            log_wall_time: false,
            ..TrainConfig::default()
        },
    };
    let (pass, detail) = probe_sanity_on(&train, &test, &setup, "CIFAR-10, 100 epochs");
    report("probe sanity (CIFAR-10)", pass, detail);
    assert!(pass);
}
