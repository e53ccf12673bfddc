use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use garmentedit::editops::{feature_space_edit, pixel_blend, DEFAULT_STAGES};
use garmentedit::eval::{evaluate, Masking};
use garmentedit::imageio::{encode_labels, encode_mask, encode_ppm};
use garmentedit::ndgrad::inject_sigmoid_backward_fault;
use garmentedit::stylegen::GeneratorParams;
use garmentedit::suites::{run_scope, Scope};
use garmentedit::trainer::{smoothed_endpoints, CheckpointBundle, EditModel, Trainer, TrainConfig};

const USAGE: u8 = 1;
const RUNTIME: u8 = 2;
const CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "garmentedit", version, about = "Text-guided garment edits on a toy avatar generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// `key=value` override, applied after the config file and `--seed`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render avatars and their parse maps.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train a mapper and write a checkpoint plus the step log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Edit one avatar with a trained mapper.
    Edit {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// none, feature or pixel.
        #[arg(long, default_value = "feature")]
        mode: String,
    },
    /// CLIP Acc and background distance over the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long)]
        n_test: Option<usize>,
        /// none, feature or pixel.
        #[arg(long, default_value = "none")]
        masking: String,
    },
    /// Finite-difference gradient suites.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// ops, generator, mapper, losses or all.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, hide = true)]
        inject_sigmoid_fault: bool,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Check(usize),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<garmentedit::Error> for Failure {
    fn from(e: garmentedit::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

/// Defaults, then the file, then `--seed`, then each `--set`.
fn resolve(common: &Common, base: TrainConfig) -> Result<TrainConfig, Failure> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(usage)?;
        cfg.apply_text(&text).map_err(usage)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn echo(cfg: &TrainConfig) {
    println!("# effective configuration");
    print!("{}", cfg.to_text());
}

fn out_dir(common: &Common) -> anyhow::Result<&Path> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(&common.out)
}

fn write(path: PathBuf, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gen(common: &Common, count: usize) -> Outcome {
    if count == 0 {
        return Err(usage(anyhow!("--count must be at least 1")));
    }
    let cfg = resolve(common, TrainConfig::default())?;
    echo(&cfg);
    let g = GeneratorParams::<f64>::build(&cfg.generator_config())?;
    let dir = out_dir(common)?;
    for (i, z) in g.sample_z(cfg.seed, count).iter().enumerate() {
        let r = g.generate(&g.map_to_w(z)?)?;
        write(dir.join(format!("sample_{i:03}.ppm")), &encode_ppm(&r.image)?)?;
        write(dir.join(format!("sample_{i:03}_parse.pgm")), &encode_labels(&r.regions)?)?;
    }
    Ok(())
}

fn train(common: &Common) -> Outcome {
    let cfg = resolve(common, TrainConfig::default())?;
    echo(&cfg);
    let dir = out_dir(common)?;
    let trainer = Trainer::<f64>::new(&cfg)?;
    let log_path = dir.join("train_log.ndjson");
    let mut sink = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let out = trainer.run(Some(&mut sink))?;
    sink.flush().context("flushing the step log")?;
    let ckpt = dir.join("mapper.ckpt");
    out.bundle.save(&ckpt)?;
    let (first, last) = smoothed_endpoints(&out.log, 50);
    println!("wrote {}", log_path.display());
    println!("wrote {}", ckpt.display());
    println!("steps {}  smoothed loss {first:.4} -> {last:.4}", out.log.len());
    println!("checkpoint sha256 {}", out.bundle.digest());
    Ok(())
}

/// The checkpoint's own config with the command-line layers on top.
fn load_model(common: &Common, checkpoint: &Path) -> Result<EditModel<f64>, Failure> {
    let bundle = CheckpointBundle::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let base = TrainConfig::from_text(&bundle.config)?;
    let cfg = resolve(common, base)?;
    echo(&cfg);
    Ok(EditModel::with_config(&bundle, cfg)?)
}

fn edit(common: &Common, checkpoint: &Path, prompt: &str, mode: &str) -> Outcome {
    let mode: Masking = mode.parse().map_err(usage)?;
    let model = load_model(common, checkpoint)?;
    let z = model.generator.sample_z(model.config.seed, 1).remove(0);
    let (w, w2) = model.edit(&z, prompt)?;
    let m = feature_space_edit(&model.generator, &w, &w2, model.config.target, &DEFAULT_STAGES)?;
    let dir = out_dir(common)?;
    write(dir.join("original.ppm"), &encode_ppm(&m.original.image)?)?;
    write(dir.join("edited.ppm"), &encode_ppm(&m.edited.image)?)?;
    let masked = match mode {
        Masking::None => None,
        Masking::Feature => Some(m.image.clone()),
        Masking::Pixel => Some(pixel_blend(&m.original.image, &m.edited.image, &m.mask)?),
    };
    if let Some(img) = masked {
        write(dir.join("masked.ppm"), &encode_ppm(&img)?)?;
        write(dir.join("mask.pgm"), &encode_mask(&m.mask)?)?;
    }
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, n_test: Option<usize>, masking: &str) -> Outcome {
    let masking: Masking = masking.parse().map_err(usage)?;
    let model = load_model(common, checkpoint)?;
    if n_test.is_some_and(|n| n == 0 || n > model.config.n_test) {
        return Err(usage(anyhow!("--n-test must lie in 1..={}", model.config.n_test)));
    }
    let report = evaluate(&model, n_test, masking)?;
    let dir = out_dir(common)?;
    let json = serde_json::to_string_pretty(&report).context("serializing the report")?;
    write(dir.join("eval_report.json"), json.as_bytes())?;
    println!("method {}", report.method);
    println!("samples {}", report.samples.len());
    println!("clip_acc {:.2}", report.clip_acc);
    println!("bg_dist {:.6e}", report.bg_dist);
    println!("bg_mse {:.6e}", report.bg_mse);
    Ok(())
}

fn gradcheck(scope: &str, fault: bool) -> Outcome {
    let scopes: Vec<Scope> = if scope == "all" {
        Scope::ALL.to_vec()
    } else {
        vec![scope.parse().map_err(usage)?]
    };
    inject_sigmoid_backward_fault(fault);
    let mut rows = Vec::new();
    for s in scopes {
        rows.extend(run_scope(s)?);
    }
    inject_sigmoid_backward_fault(false);
    println!("{:<10} {:<18} {:>12} {:>9}  result", "scope", "check", "max_rel_err", "tol");
    let mut failed = 0;
    for r in &rows {
        let g = &r.report;
        failed += usize::from(!g.passed);
        let verdict = if g.passed { "pass" } else { "FAIL" };
        println!("{:<10} {:<18} {:>12.3e} {:>9.0e}  {verdict}", r.scope.name(), g.name, g.max_rel_err, g.tolerance);
    }
    println!("{} checks, {failed} failed", rows.len());
    if failed > 0 {
        return Err(Failure::Check(failed));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Gen { common, count } => gen(&common, count),
        Command::Train { common } => train(&common),
        Command::Edit {
            common,
            checkpoint,
            prompt,
            mode,
        } => edit(&common, &checkpoint, &prompt, &mode),
        Command::Eval {
            common,
            checkpoint,
            n_test,
            masking,
        } => eval(&common, &checkpoint, n_test, &masking),
        Command::Gradcheck {
            scope,
            inject_sigmoid_fault,
            ..
        } => gradcheck(&scope, inject_sigmoid_fault),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(USAGE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(RUNTIME)
        }
        Err(Failure::Check(n)) => {
            eprintln!("{n} gradient checks failed");
            ExitCode::from(CHECK_FAILED)
        }
    }
}
