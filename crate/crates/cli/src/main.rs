//! `qks`: generate data, train, evaluate, verify gradients, export attention
//! maps, count token preferences and sweep the head size.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use qks_core::config::RunConfig;
use qks_core::eval::{self, attention_map, export_attention_map, token_preference_stats, Task};
use qks_core::io::{generate_synthetic, DatasetManifest, InMemorySplit, Split};
use qks_core::model::verify::{check_model_gradients, small_config};
use qks_core::model::{LossKind, ModelConfig, NormMode};
use qks_core::train::{train, train_in_memory};
use qks_core::QksError;

#[derive(Parser)]
#[command(name = "qks", version, about = "Query-based knowledge sharing head: data, training, evaluation")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat JSON config with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.m=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for all randomness; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, QksError> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut run = base.with_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            run.seed = s;
        }
        run.validate()?;
        Ok(run)
    }

    fn given(&self) -> bool {
        self.config.is_some() || !self.overrides.is_empty() || self.seed.is_some()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic planted-structure dataset.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a manifest; writes config.json, loss.csv and checkpoint/.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "zsl")]
        task: Task,
        /// Write the JSON report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient at float64.
    Gradcheck {
        #[arg(long, default_value = "small")]
        dims: String,
        #[arg(long, default_value = "classification")]
        loss: LossKind,
        #[arg(long, default_value = "prenorm")]
        norm: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Export the attention map of one test image and label.
    ExportAttn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test image id or position in the test split.
        #[arg(long)]
        image: String,
        /// Label index or name.
        #[arg(long)]
        label: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Token preference counts per label as CSV.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "zsl")]
        task: Task,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate over a grid of token counts and depths.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Token counts: `1..24` (inclusive) or `1,4,12`.
        #[arg(long, default_value = "1..24")]
        m: String,
        /// Layer counts, same syntax.
        #[arg(long, default_value = "1..10")]
        layers: String,
        #[arg(long, default_value = "zsl")]
        task: Task,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Data(String),
    Verification(String),
}

impl From<QksError> for Failure {
    fn from(e: QksError) -> Self {
        match e {
            e if e.is_data_error() => Failure::Data(e.to_string()),
            e @ (QksError::Undefined(_) | QksError::EmptyLabelSet) => Failure::Data(e.to_string()),
            e @ (QksError::NonDeterministic { .. }
            | QksError::NonFinite(_)
            | QksError::NonFiniteGradient(_)
            | QksError::Divergence { .. }) => Failure::Verification(e.to_string()),
            e => Failure::Usage(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn parse_grid(grid: &str) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::Usage(format!("bad grid {grid:?}; use `a..b` or `a,b,c`"));
    if let Some((a, b)) = grid.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a == 0 || a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    let v: Vec<usize> = grid
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    if v.is_empty() || v.contains(&0) {
        return Err(bad());
    }
    Ok(v)
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, Failure> {
    Ok(DatasetManifest::load(path)?)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::Data(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen(cfg: &ConfigArgs, out: &Path) -> Outcome {
    let run = cfg.resolve()?;
    let m = generate_synthetic(&run.synthetic(), out)?;
    println!(
        "wrote {} train and {} test images, {} labels ({} unseen) to {}",
        m.splits.train.len(),
        m.splits.test.len(),
        m.n_labels(),
        m.unseen.len(),
        out.display()
    );
    Ok(())
}

fn run_train(cfg: &ConfigArgs, data: &Path, out: &Path) -> Outcome {
    let run = cfg.resolve()?;
    let manifest = load_manifest(data)?;
    let start = Instant::now();
    let outcome = train(&manifest, &run, out)?;
    let first = outcome.log.first().map_or(f64::NAN, |r| r.loss);
    let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} steps in {:.1}s: loss {first:.4} -> {last:.4}; checkpoint {} (config {})",
        outcome.log.len(),
        start.elapsed().as_secs_f64(),
        outcome.checkpoint.display(),
        &outcome.run.hash()[..12]
    );
    Ok(())
}

fn run_eval(cfg: &ConfigArgs, data: &Path, ckpt: &Path, task: Task, out: Option<&Path>) -> Outcome {
    let manifest = load_manifest(data)?;
    let expected = if cfg.given() { Some(cfg.resolve()?) } else { None };
    let report = eval::evaluate_checkpoint(ckpt, &manifest, task, expected.as_ref())?;
    eprint!("{}", report.table());
    write_or_print(out, &(report.to_json() + "\n"))
}

fn gradcheck(dims: &str, loss: LossKind, norm: &str, seed: u64, h: f64, tol: f64) -> Outcome {
    let norm_mode = match norm {
        "prenorm" => NormMode::Prenorm,
        "literal" => NormMode::Literal,
        other => return Err(Failure::Usage(format!("unknown norm mode {other:?}"))),
    };
    let cfg: ModelConfig = match dims {
        "small" => small_config(norm_mode),
        other => return Err(Failure::Usage(format!("unknown dims {other:?} (only `small`)"))),
    };
    let start = Instant::now();
    let report = check_model_gradients(&cfg, loss, seed, h, tol)?;
    for p in &report.params {
        println!("{:<28} {:>5} elements  max rel err {:.3e}", p.name, p.elements, p.max_rel_err);
    }
    println!(
        "max rel err {:.3e} (tol {:.0e}, h {:.0e}) in {:.2}s: {}",
        report.max_rel_err,
        tol,
        h,
        start.elapsed().as_secs_f64(),
        if report.passed { "PASS" } else { "FAIL" }
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Verification(format!("max relative error {:.3e} exceeds {tol:.0e}", report.max_rel_err)))
    }
}

fn export_attn(data: &Path, ckpt: &Path, image: &str, label: &str, out: &Path) -> Outcome {
    let manifest = load_manifest(data)?;
    let ckpt = eval::load_checkpoint_for(ckpt, &manifest, None)?;
    let tests = manifest.split(Split::Test);
    let entry = tests
        .iter()
        .find(|e| e.id == image)
        .or_else(|| image.parse::<usize>().ok().and_then(|i| tests.get(i)))
        .ok_or_else(|| Failure::Usage(format!("no test image {image:?}")))?;
    let label_idx = manifest
        .label_names
        .iter()
        .position(|n| n == label)
        .or_else(|| label.parse().ok())
        .filter(|&l| l < manifest.n_labels())
        .ok_or_else(|| Failure::Usage(format!("no label {label:?}")))?;
    let labels = manifest.label_table::<f32>()?;
    let features = manifest.load_features::<f32>(entry)?;
    let map = attention_map(&ckpt.model, &features, &labels, label_idx)?;
    let stem = format!("{}_label{label_idx}", entry.id);
    for p in export_attention_map(&map, out, &stem)? {
        println!("{}", p.display());
    }
    if map.degenerate {
        eprintln!("warning: attention map is constant; wrote zeros");
    }
    Ok(())
}

fn stats(data: &Path, ckpt: &Path, task: Task, out: Option<&Path>) -> Outcome {
    let manifest = load_manifest(data)?;
    let ckpt = eval::load_checkpoint_for(ckpt, &manifest, None)?;
    let s = token_preference_stats(&ckpt.model, &manifest, task)?;
    eprintln!(
        "{} labels, {:.0}% concentrate half their mass on one token; {} of {} tokens used",
        s.labels.len(),
        100.0 * s.concentrated_fraction(0.5),
        s.tokens_used(),
        s.histogram.len()
    );
    write_or_print(out, &s.to_csv())
}

fn sweep(cfg: &ConfigArgs, data: &Path, ms: &str, ls: &str, task: Task, out: &Path) -> Outcome {
    let ms = parse_grid(ms)?;
    let ls = parse_grid(ls)?;
    let base = cfg.resolve()?;
    let manifest = load_manifest(data)?;
    let train_split = InMemorySplit::<f32>::load(&manifest, Split::Train)?;
    let test_split = InMemorySplit::<f32>::load(&manifest, Split::Test)?;
    let labels = manifest.label_table::<f32>()?;
    let ks = [3, 5];

    let mut csv = String::from("m,L,mAP,F1@3,F1@5,AVG\n");
    let grid: Vec<(usize, usize)> = ms.iter().flat_map(|&m| ls.iter().map(move |&l| (m, l))).collect();
    for (idx, &(m, l)) in grid.iter().enumerate() {
        let mut run = base.fit_to_manifest(&manifest);
        run.model.m = m;
        run.model.layers = l;
        run.seed = base.seed + idx as u64;
        let (model, _) = train_in_memory(run, train_split.clone(), labels.clone())?;
        let r = eval::evaluate_split(&model, &test_split, &labels, task, &ks)?;
        let (f3, f5) = (r.topk[0].f1, r.topk[1].f1);
        let avg = r.avg_score().expect("both cutoffs computed");
        log::info!("m={m} L={l}: mAP {:.4} F1@3 {f3:.4} F1@5 {f5:.4}", r.map);
        csv += &format!("{m},{l},{:.6},{f3:.6},{f5:.6},{avg:.6}\n", r.map);
    }
    fs::write(out, &csv).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    println!("wrote {} grid points to {}", grid.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Gen { cfg, out } => gen(&cfg, &out),
        Command::Train { cfg, data, out } => run_train(&cfg, &data, &out),
        Command::Eval {
            cfg,
            data,
            checkpoint,
            task,
            out,
        } => run_eval(&cfg, &data, &checkpoint, task, out.as_deref()),
        Command::Gradcheck {
            dims,
            loss,
            norm,
            seed,
            h,
            tol,
        } => gradcheck(&dims, loss, &norm, seed, h, tol),
        Command::ExportAttn {
            data,
            checkpoint,
            image,
            label,
            out,
        } => export_attn(&data, &checkpoint, &image, &label, &out),
        Command::Stats {
            data,
            checkpoint,
            task,
            out,
        } => stats(&data, &checkpoint, task, out.as_deref()),
        Command::Sweep {
            cfg,
            data,
            m,
            layers,
            task,
            out,
        } => sweep(&cfg, &data, &m, &layers, task, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = dispatch(cli);
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}
