//! Command-line front end: pretraining, probing, cost tables and plots.

pub mod config;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use can_core::cost::{self, CostReport};
use can_core::data::{self, Dataset};
use can_core::eval::{self, FeatureSet, ProbeConfig};
use can_core::model::Vit;
use can_core::train::{self, Method, TrainState};
use can_core::Error;

use config::{parse_overrides, DataSource, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "can", version, about = "Contrastive, masked and denoising ViT pretraining on CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain a model. Any config key can be overridden as `--key value`,
    /// e.g. `--method mae`, `--mask-rate 0.75`, `--model.decoder.depth 4`.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Linear or k-shot probe of a frozen encoder.
    Probe {
        #[arg(long, required_unless_present = "random_init")]
        checkpoint: Option<PathBuf>,
        /// Probe an untrained encoder built from the config instead.
        #[arg(long)]
        random_init: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Examples per class for a k-shot probe. Probe options go before
        /// any config overrides.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        /// Accuracy JSON path (default: probe.json next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Analytic FLOPs and parameters of CAN, SimCLR and MAE.
    Flops {
        #[arg(long, value_delimiter = ',', default_value = "vit-s,vit-b,vit-l,vit-h")]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "can,simclr,mae")]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        mask_rates: Vec<f64>,
        /// Replace the decoder depth of every model.
        #[arg(long)]
        decoder_depth: Option<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render CSV results as an SVG chart.
    Plot {
        #[arg(value_enum)]
        kind: PlotKind,
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PlotKind {
    /// Loss against step from metrics.csv files.
    Loss,
    /// Accuracy against masking rate, one curve per method.
    MaskSweep,
    /// Accuracy against pre-training FLOPs.
    Frontier,
    /// Total FLOPs from a `can flops --csv` file.
    Flops,
}

/// A failure and the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub messages: Vec<String>,
}

impl Failure {
    fn invalid(messages: Vec<String>) -> Self {
        Self {
            code: EXIT_INVALID,
            messages,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidInput(_) => EXIT_INVALID,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            messages: vec![e.to_string()],
        }
    }
}

/// Runs one invocation and returns its exit status. Output goes to stdout,
/// diagnostics to stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            for m in &f.messages {
                eprintln!("error: {m}");
            }
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Pretrain {
            config,
            resume,
            overrides,
        } => pretrain(config.as_deref(), resume.as_deref(), &overrides),
        Command::Probe {
            checkpoint,
            random_init,
            config,
            k,
            repeats,
            out,
            overrides,
        } => probe(ProbeArgs {
            checkpoint: if random_init { None } else { checkpoint },
            config,
            k,
            repeats,
            out,
            overrides,
        }),
        Command::Flops {
            models,
            methods,
            mask_rates,
            decoder_depth,
            csv,
        } => flops(&models, &methods, &mask_rates, decoder_depth, csv.as_deref()),
        Command::Plot { kind, inputs, out } => plot_cmd(kind, &inputs, &out),
    }
}

/// Reads the config file (if any) and applies overrides; all problems are reported together.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Failure> {
    let mut errors = Vec::new();
    let text = match path {
        Some(p) => match fs::read_to_string(p) {
            Ok(t) => Some(t),
            Err(e) => {
                return Err(Failure::invalid(vec![format!("config {}: {e}", p.display())]));
            }
        },
        None => None,
    };
    let (pairs, bad_flags) = parse_overrides(overrides);
    errors.extend(bad_flags);
    match RunConfig::resolve(text.as_deref(), &pairs) {
        Ok(cfg) if errors.is_empty() => Ok(cfg),
        Ok(_) => Err(Failure::invalid(errors)),
        Err(e) => {
            errors.extend(e);
            Err(Failure::invalid(errors))
        }
    }
}

/// The pretraining set and the held-out probe set.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset), Failure> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let all = data::synthetic(&cfg.data.synthetic)?;
            Ok(all.split(cfg.data.test_fraction))
        }
        DataSource::Cifar10 => {
            let path = cfg.data.path.as_ref().expect("validated");
            if path.is_dir() {
                let train = data::load_cifar10(path, "data_batch")?;
                let test = data::load_cifar10(path, "test_batch")?;
                Ok((train, test))
            } else {
                Ok(data::load_cifar10(path, "")?.split(cfg.data.test_fraction))
            }
        }
    }
}

fn pretrain(config: Option<&Path>, resume: Option<&Path>, overrides: &[String]) -> Result<(), Failure> {
    let cfg = load_config(config, overrides)?;
    let (train_set, _) = load_data(&cfg)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        messages: vec![format!("{}: {e}", out.display())],
    })?;
    let resolved = out.join("config.resolved");
    fs::write(&resolved, cfg.to_text()).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        messages: vec![format!("{}: {e}", resolved.display())],
    })?;
    let setup = cfg.setup();
    let spe = setup.steps_per_epoch(train_set.len());
    println!(
        "pretraining {} on {} images: {} steps/epoch, {} epochs, T = {}, T' = {}",
        cfg.train.method,
        train_set.len(),
        spe,
        cfg.train.total_epochs,
        cfg.spec.seq_len(),
        can_core::patch::unmasked_count(cfg.spec.seq_len(), cfg.train.mask_rate)?,
    );
    let run = train::train_loop(&setup, &train_set, out, resume)?;
    if let Some(last) = run.rows.last() {
        println!(
            "step {}: l_total {:.5} l_infonce {:.5} l_rec {:.5} l_denoise {:.5}",
            last.step, last.report.l_total, last.report.l_infonce, last.report.l_rec, last.report.l_denoise
        );
    }
    println!("checkpoint: {}", run.checkpoint.display());
    println!("metrics: {}", run.metrics.display());
    Ok(())
}

struct ProbeArgs {
    checkpoint: Option<PathBuf>,
    config: Option<PathBuf>,
    k: Option<usize>,
    repeats: usize,
    out: Option<PathBuf>,
    overrides: Vec<String>,
}

#[derive(Serialize)]
struct LinearReport<'a> {
    mode: &'a str,
    checkpoint: String,
    accuracy: f64,
    train_size: usize,
    test_size: usize,
}

#[derive(Serialize)]
struct KShotJson<'a> {
    mode: &'a str,
    checkpoint: String,
    k: usize,
    #[serde(rename = "R")]
    repeats: usize,
    mean: f64,
    std: f64,
    accuracies: Vec<f64>,
    test_size: usize,
}

fn probe(args: ProbeArgs) -> Result<(), Failure> {
    let explicit_model = args.config.is_some() || args.overrides.iter().any(|o| o.starts_with("--model"));
    let cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let model: Vit<f32> = match &args.checkpoint {
        Some(p) => {
            let state = train::load_checkpoint(p)?;
            if explicit_model && state.model.spec != cfg.spec {
                return Err(Failure::invalid(vec![format!(
                    "checkpoint {} does not match the configured model spec",
                    p.display()
                )]));
            }
            state.model
        }
        None => TrainState::new(cfg.spec.clone(), cfg.train.seed)?.model,
    };
    let (train_set, test_set) = load_data(&cfg)?;
    if let Some(k) = args.k {
        let mut counts = vec![0usize; 256];
        train_set.labels.iter().for_each(|&l| counts[l as usize] += 1);
        if let Some((c, n)) = counts.iter().enumerate().find(|(_, &n)| n > 0 && n < k) {
            return Err(Failure::invalid(vec![format!(
                "--k {k} exceeds the {n} training examples of class {c}"
            )]));
        }
    }
    let train_f: FeatureSet = eval::extract_features(&model, &train_set)?;
    let test_f: FeatureSet = eval::extract_features(&model, &test_set)?;
    let probe_cfg = ProbeConfig::default();
    let source = args
        .checkpoint
        .as_ref()
        .map_or("random-init".to_string(), |p| p.display().to_string());
    let json = match args.k {
        None => serde_json::to_string_pretty(&LinearReport {
            mode: "linear",
            checkpoint: source,
            accuracy: eval::linear_probe(&train_f, &test_f, &probe_cfg)?,
            train_size: train_f.len(),
            test_size: test_f.len(),
        }),
        Some(k) => {
            let r = eval::k_shot_probe(&train_f, &test_f, k, args.repeats, cfg.train.seed, &probe_cfg)?;
            serde_json::to_string_pretty(&KShotJson {
                mode: "k_shot",
                checkpoint: source,
                k,
                repeats: r.repeats,
                mean: r.mean,
                std: r.std,
                accuracies: r.accuracies,
                test_size: test_f.len(),
            })
        }
    }
    .expect("plain data serializes");
    let out = args.out.unwrap_or_else(|| match &args.checkpoint {
        Some(p) => p.with_file_name("probe.json"),
        None => cfg.output_dir.join("probe_random_init.json"),
    });
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure {
            code: EXIT_RUNTIME,
            messages: vec![format!("{}: {e}", dir.display())],
        })?;
    }
    fs::write(&out, format!("{json}\n")).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        messages: vec![format!("{}: {e}", out.display())],
    })?;
    println!("{json}");
    Ok(())
}

fn flops(
    models: &[String],
    methods: &[String],
    mask_rates: &[f64],
    decoder_depth: Option<usize>,
    csv: Option<&Path>,
) -> Result<(), Failure> {
    let mut errors = Vec::new();
    let methods: Vec<Method> = methods
        .iter()
        .filter_map(|m| m.parse().map_err(|e: Error| errors.push(e.to_string())).ok())
        .collect();
    let specs: Vec<_> = models
        .iter()
        .filter_map(|m| {
            cost::named_spec(m)
                .map(|mut s| {
                    if let Some(d) = decoder_depth {
                        s.decoder.depth = d;
                    }
                    (m.to_ascii_lowercase(), s)
                })
                .map_err(|e| errors.push(e.to_string()))
                .ok()
        })
        .collect();
    for r in mask_rates {
        if !(0.0..1.0).contains(r) {
            errors.push(format!("--mask-rates: {r} is outside [0, 1)"));
        }
    }
    if !errors.is_empty() {
        return Err(Failure::invalid(errors));
    }
    let mut reports: Vec<CostReport> = Vec::new();
    for (name, spec) in &specs {
        for &m in &methods {
            // only CAN depends on the requested rate; the baselines use their own
            let rates: &[f64] = if m == Method::Can { mask_rates } else { &mask_rates[..1] };
            for &r in rates {
                reports.push(cost::method_flops(m, name, spec, r)?);
            }
        }
    }
    print!("{}", cost::to_table(&reports));
    if let Some(path) = csv {
        fs::write(path, cost::to_csv(&reports)).map_err(|e| Failure {
            code: EXIT_RUNTIME,
            messages: vec![format!("{}: {e}", path.display())],
        })?;
    }
    Ok(())
}

fn plot_cmd(kind: PlotKind, inputs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let bad = |e: plot::CsvError| Failure::invalid(vec![e.to_string()]);
    let tables = inputs
        .iter()
        .map(|p| plot::Table::read(p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(bad)?;
    let chart = match kind {
        PlotKind::Loss => plot::loss_chart(&tables),
        PlotKind::MaskSweep => plot::mask_sweep_chart(&tables),
        PlotKind::Frontier => plot::frontier_chart(&tables),
        PlotKind::Flops => plot::flops_chart(&tables),
    }
    .map_err(bad)?;
    fs::write(out, chart.to_svg()).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        messages: vec![format!("{}: {e}", out.display())],
    })?;
    println!("{} points in {} series -> {}", chart.point_count(), chart.series.len(), out.display());
    Ok(())
}
