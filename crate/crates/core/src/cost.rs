//! Analytic FLOPs and parameter accounting for the encoder/decoder pipelines.
//!
//! Convention: one multiply-accumulate is 2 FLOPs. Per transformer block at
//! sequence length `L`, width `d`, MLP width `m`, `h` heads:
//!
//! ```text
//! attention projections   4 * L * d^2 * 2      (q, k, v, output)
//! attention scores/values 2 * L^2 * d * 2      (q k^T and p v)
//! softmax                 SOFTMAX_FLOPS * h * L^2
//! MLP                     2 * L * d * m * 2
//! layer norms             2 * NORM_FLOPS * L * d
//! ```
//!
//! Patch embedding costs `L * P * d * 2` (+ `L * d` bias), the final norm
//! `NORM_FLOPS * L * d`. The decoder adds its input projection, blocks at its
//! own width, a final norm and the `D * P * 2` per-token pixel projection.
//! Residual adds, GELU and bias adds inside blocks are not counted.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{HeadSpec, ModelSpec, TransformerSpec, VIT_B, VIT_H, VIT_L, VIT_S};
use crate::patch::unmasked_count;
use crate::train::Method;

/// Per element: mean, variance, normalize, scale, shift.
pub const NORM_FLOPS: u64 = 5;
/// Per score: max-subtract, exp, sum, divide.
pub const SOFTMAX_FLOPS: u64 = 4;
/// Batch norm per element in the projection head.
pub const BATCH_NORM_FLOPS: u64 = 5;

/// FLOPs of one transformer stack, split by term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StackFlops {
    pub attn_proj: u64,
    pub attn_scores: u64,
    pub softmax: u64,
    pub mlp: u64,
    pub norms: u64,
}

impl StackFlops {
    /// Terms linear in sequence length.
    pub fn linear(&self) -> u64 {
        self.attn_proj + self.mlp + self.norms
    }

    /// Terms quadratic in sequence length.
    pub fn quadratic(&self) -> u64 {
        self.attn_scores + self.softmax
    }

    pub fn total(&self) -> u64 {
        self.linear() + self.quadratic()
    }
}

/// Blocks of `t` at sequence length `seq_len`, no embeddings.
pub fn stack_flops(t: &TransformerSpec, seq_len: usize) -> StackFlops {
    let (l, d, m, h, n) = (
        seq_len as u64,
        t.width as u64,
        t.mlp_dim as u64,
        t.heads as u64,
        t.depth as u64,
    );
    StackFlops {
        attn_proj: n * 4 * l * d * d * 2,
        attn_scores: n * 2 * l * l * d * 2,
        softmax: n * SOFTMAX_FLOPS * h * l * l,
        mlp: n * 2 * l * d * m * 2,
        norms: n * 2 * NORM_FLOPS * l * d,
    }
}

/// Encoder forward at `seq_len` tokens: patch embedding, blocks, final norm.
pub fn vit_flops(spec: &ModelSpec, seq_len: usize) -> u64 {
    encoder_breakdown(spec, seq_len).1
}

fn encoder_breakdown(spec: &ModelSpec, seq_len: usize) -> (StackFlops, u64) {
    let (l, d, p) = (seq_len as u64, spec.encoder.width as u64, spec.patch_dim() as u64);
    let stack = stack_flops(&spec.encoder, seq_len);
    let embed = l * p * d * 2 + l * d;
    (stack, embed + stack.total() + NORM_FLOPS * l * d)
}

/// Decoder forward over all `seq_len` positions, including mask-token fill
/// and position adds.
pub fn decoder_flops(spec: &ModelSpec, seq_len: usize) -> u64 {
    let (l, d, dd, p) = (
        seq_len as u64,
        spec.encoder.width as u64,
        spec.decoder.width as u64,
        spec.patch_dim() as u64,
    );
    let adds = 2 * l * d;
    let embed = l * d * dd * 2 + l * dd;
    let out = l * dd * p * 2 + l * p;
    adds + embed + stack_flops(&spec.decoder, seq_len).total() + NORM_FLOPS * l * dd + out
}

/// Noise-level embedding MLP for one view: two `d x d` layers.
pub fn sigma_mlp_flops(spec: &ModelSpec) -> u64 {
    let d = spec.encoder.width as u64;
    2 * (d * d * 2 + d)
}

/// Projection head on one pooled vector, plus the pooling itself.
pub fn head_flops(spec: &ModelSpec, seq_len: usize) -> u64 {
    let HeadSpec {
        hidden_dim,
        hidden_layers,
        out_dim,
    } = spec.head;
    let (d, h, o) = (spec.encoder.width as u64, hidden_dim as u64, out_dim as u64);
    let pool = seq_len as u64 * d;
    let mut flops = pool;
    let mut input = d;
    for _ in 0..hidden_layers {
        flops += input * h * 2 + BATCH_NORM_FLOPS * h + h;
        input = h;
    }
    // output layer, then the L2 normalization (square, sum, divide)
    flops + input * o * 2 + o + 3 * o
}

fn linear_params(i: usize, o: usize, bias: bool) -> usize {
    i * o + if bias { o } else { 0 }
}

fn stack_params(t: &TransformerSpec) -> usize {
    let d = t.width;
    let block = 4 * d + linear_params(d, 3 * d, true) + linear_params(d, d, true)
        + linear_params(d, t.mlp_dim, true)
        + linear_params(t.mlp_dim, d, true);
    t.depth * block
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub encoder: usize,
    pub decoder: usize,
    pub head: usize,
    pub sigma_mlp: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.encoder + self.decoder + self.head + self.sigma_mlp
    }
}

/// Trainable parameters. The mask token is counted with the decoder.
pub fn param_counts(spec: &ModelSpec) -> ParamCounts {
    let (d, dd, p) = (spec.encoder.width, spec.decoder.width, spec.patch_dim());
    let encoder = linear_params(p, d, true) + stack_params(&spec.encoder) + 2 * d;
    let decoder = d + linear_params(d, dd, true) + stack_params(&spec.decoder) + 2 * dd + linear_params(dd, p, true);
    let mut head = 0;
    let mut input = d;
    for _ in 0..spec.head.hidden_layers {
        head += linear_params(input, spec.head.hidden_dim, false) + 2 * spec.head.hidden_dim;
        input = spec.head.hidden_dim;
    }
    head += linear_params(input, spec.head.out_dim, true);
    ParamCounts {
        encoder,
        decoder,
        head,
        sigma_mlp: 2 * linear_params(d, d, true),
    }
}

/// Masking rate of the MAE baseline.
pub const MAE_MASK_RATE: f64 = 0.75;

/// Per-image forward cost of one method (all views).
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub method: Method,
    pub model: String,
    pub mask_rate: f64,
    pub views: usize,
    pub encoder_seq_len: usize,
    pub decoder_seq_len: usize,
    pub encoder_flops: u64,
    /// Includes the noise-level MLP when the method conditions on it.
    pub decoder_flops: u64,
    pub head_flops: u64,
    pub params: ParamCounts,
}

impl CostReport {
    pub fn total(&self) -> u64 {
        self.encoder_flops + self.decoder_flops + self.head_flops
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.method,
            self.model,
            self.mask_rate,
            self.encoder_flops,
            self.decoder_flops,
            self.head_flops,
            self.total()
        )
    }
}

pub const CSV_HEADER: &str = "method,model,mask_rate,encoder_flops,decoder_flops,head_flops,total";

/// CAN: two masked views through the encoder, decoder over all T, head on both.
/// SimCLR: two full views, head, no decoder. MAE: one view at 75% masking plus
/// the decoder. `mask_rate` applies to CAN only.
pub fn method_flops(method: Method, model: &str, spec: &ModelSpec, mask_rate: f64) -> Result<CostReport> {
    spec.validate()?;
    let t = spec.seq_len();
    let (views, rate, decode, head, sigma) = match method {
        Method::Can => (2, mask_rate, true, true, true),
        Method::Simclr => (2, 0.0, false, true, false),
        Method::Mae => (1, MAE_MASK_RATE, true, false, false),
    };
    let kept = unmasked_count(t, rate)?;
    let v = views as u64;
    let mut decoder = 0;
    if decode {
        decoder += v * decoder_flops(spec, t);
    }
    if sigma {
        decoder += v * sigma_mlp_flops(spec);
    }
    let mut params = param_counts(spec);
    if !decode {
        params.decoder = 0;
    }
    if !head {
        params.head = 0;
    }
    if !sigma {
        params.sigma_mlp = 0;
    }
    Ok(CostReport {
        method,
        model: model.to_string(),
        mask_rate: rate,
        views,
        encoder_seq_len: kept,
        decoder_seq_len: if decode { t } else { 0 },
        encoder_flops: v * vit_flops(spec, kept),
        decoder_flops: decoder,
        head_flops: if head { v * head_flops(spec, kept) } else { 0 },
        params,
    })
}

/// Named full-scale shapes (224px, patch 16, 8x512 decoder).
pub fn named_spec(name: &str) -> Result<ModelSpec> {
    let enc = match name.to_ascii_lowercase().as_str() {
        "vit-s" | "s" => VIT_S,
        "vit-b" | "b" => VIT_B,
        "vit-l" | "l" => VIT_L,
        "vit-h" | "h" => VIT_H,
        "vit-micro" | "micro" => return Ok(ModelSpec::micro()),
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown model `{other}` (vit-s, vit-b, vit-l, vit-h, vit-micro)"
            )))
        }
    };
    Ok(ModelSpec::imagenet(enc))
}

pub fn to_csv(reports: &[CostReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn gflops(f: u64) -> f64 {
    f as f64 / 1e9
}

/// Fixed-width summary with GFLOPs and parameter counts.
pub fn to_table(reports: &[CostReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<7} {:<9} {:>5} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "method", "model", "mask", "T'", "enc GF", "dec GF", "head GF", "total GF", "params M"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<7} {:<9} {:>5.2} {:>5} {:>9.3} {:>9.3} {:>9.4} {:>9.3} {:>9.2}",
            r.method.to_string(),
            r.model,
            r.mask_rate,
            r.encoder_seq_len,
            gflops(r.encoder_flops),
            gflops(r.decoder_flops),
            gflops(r.head_flops),
            gflops(r.total()),
            r.params.total() as f64 / 1e6
        );
    }
    s.push_str("FLOPs per image over all views; 1 multiply-accumulate = 2 FLOPs.\n");
    s
}

/// Parses rows written by [`to_csv`]. Errors carry the 1-based line number.
pub fn parse_csv(text: &str) -> std::result::Result<Vec<CsvRow>, (usize, String)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        Some((_, h)) => return Err((1, format!("unexpected header `{h}`"))),
        None => return Err((1, "empty file".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| (i + 1, format!("{what} in `{line}`"));
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let int = |k: usize| f[k].trim().parse::<u64>().map_err(|_| bad("bad integer"));
        rows.push(CsvRow {
            method: f[0].parse().map_err(|_| bad("bad method"))?,
            model: f[1].to_string(),
            mask_rate: f[2].trim().parse().map_err(|_| bad("bad mask rate"))?,
            encoder_flops: int(3)?,
            decoder_flops: int(4)?,
            head_flops: int(5)?,
            total: int(6)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub method: Method,
    pub model: String,
    pub mask_rate: f64,
    pub encoder_flops: u64,
    pub decoder_flops: u64,
    pub head_flops: u64,
    pub total: u64,
}

impl From<&CostReport> for CsvRow {
    fn from(r: &CostReport) -> Self {
        Self {
            method: r.method,
            model: r.model.clone(),
            mask_rate: r.mask_rate,
            encoder_flops: r.encoder_flops,
            decoder_flops: r.decoder_flops,
            head_flops: r.head_flops,
            total: r.total(),
        }
    }
}
