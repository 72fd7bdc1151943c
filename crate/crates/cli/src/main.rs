mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mcse_core::autodiff::gradcheck::GradCheckConfig;
use mcse_core::dsp::{read_wav, write_wav, WavFormat, Waveform};
use mcse_core::metrics::{evaluate, Enhancer, Passthrough};
use mcse_core::network::{param_count, ModelConfig};
use mcse_core::sim::{generate_dataset, load_split, Split};
use mcse_core::ssm::{ssm_scan, ScanStrategy};
use mcse_core::trainer::{load_checkpoint, save_checkpoint, Trainer};
use mcse_core::{network::Model, verify, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "mcse",
    version,
    about = "Multi-channel speech enhancement toolkit"
)]
struct Cli {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 keeps runs bit-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a multi-channel dataset and write its manifest.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a generator on a simulated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Parent directory of the run directory.
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
    },
    /// Enhance a multi-channel WAV file.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a checkpoint (or the passthrough baseline) on one split.
    Evaluate(EvaluateArgs),
    /// Parameter breakdown and the per-microphone delta table.
    Params {
        /// Start from a preset instead of the configured model.
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        mics: Option<usize>,
        #[arg(long)]
        c_mid: Option<usize>,
    },
    /// Finite-difference check of every operator and composite subgraph.
    Gradcheck {
        /// Seeds for the operator catalog.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Sequential vs chunked scan throughput and deviation.
    Scanbench {
        #[arg(long, default_value_t = 4096)]
        len: usize,
        #[arg(long, default_value_t = 32)]
        d_inner: usize,
        #[arg(long, default_value_t = 16)]
        n_state: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,8,16,100")]
        chunks: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, required_unless_present = "passthrough")]
    checkpoint: Option<PathBuf>,
    /// Score the unprocessed reference channel instead of a model.
    #[arg(long)]
    passthrough: bool,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn echo(cfg: &RunConfig) -> Result<serde_json::Value> {
    let v = serde_json::to_value(cfg)?;
    println!("resolved config:\n{}", serde_json::to_string_pretty(&v)?);
    Ok(v)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let v = echo(cfg)?;
    let manifest = generate_dataset(&cfg.sim, out)?;
    write_json(&out.join("config.json"), &v)?;
    println!(
        "wrote {} items to {} (train {}, val {}, test {})",
        manifest.items.len(),
        out.display(),
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        manifest.splits.test.len()
    );
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, runs: &Path) -> Result<()> {
    let v = echo(cfg)?;
    let train = load_split(data, Split::Train)?;
    let val = load_split(data, Split::Val)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let dir = runs.join(format!("{stamp}-seed{}", cfg.seed));
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join("config.json"), &v)?;
    println!("run directory: {}", dir.display());
    let model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?.with_run_dir(&dir, Some(v))?;
    for s in trainer.fit(&train, &val)? {
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  val si-sdr {}  {:.1}s",
            s.epoch,
            s.lr,
            s.loss.total,
            s.val_si_sdr.map_or("n/a".into(), |x| format!("{x:.2} dB")),
            s.wall_seconds
        );
    }
    if trainer.best_val().is_none() {
        // no validation split: keep the final weights as best
        save_checkpoint(&trainer.model, dir.join("best.ckpt"), None)?;
    }
    Ok(())
}

fn enhance(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let model = load_checkpoint::<f32>(checkpoint)?;
    println!(
        "model config:\n{}",
        serde_json::to_string_pretty(model.cfg())?
    );
    let wave = read_wav(input)?;
    let cfg = model.cfg();
    if wave.n_channels() != cfg.n_mics {
        bail!(
            "{} has {} channels but the checkpoint expects {} microphones",
            input.display(),
            wave.n_channels(),
            cfg.n_mics
        );
    }
    if wave.sample_rate != cfg.stft.sample_rate {
        bail!(
            "{} is sampled at {} Hz, the model at {} Hz",
            input.display(),
            wave.sample_rate,
            cfg.stft.sample_rate
        );
    }
    let y = model.enhance(&wave.channels)?;
    write_wav(
        output,
        &Waveform::mono(wave.sample_rate, y),
        WavFormat::Float32,
    )?;
    println!("wrote {}", output.display());
    Ok(())
}

fn evaluate_cmd(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let items = load_split(&args.data, args.split)?;
    let enhancer: Box<dyn Enhancer> = match &args.checkpoint {
        Some(p) if !args.passthrough => {
            let m = load_checkpoint::<f32>(p)?;
            println!("model config:\n{}", serde_json::to_string_pretty(m.cfg())?);
            Box::new(m)
        }
        _ => {
            echo(cfg)?;
            Box::new(Passthrough {
                stft: cfg.model.stft.clone(),
            })
        }
    };
    let report = evaluate(enhancer.as_ref(), &items)?;
    print!("{}", report.table());
    if let Some(p) = &args.json {
        std::fs::write(p, report.to_json()?)?;
    }
    Ok(())
}

fn params(
    cfg: &RunConfig,
    preset: Option<Preset>,
    mics: Option<usize>,
    c_mid: Option<usize>,
) -> Result<()> {
    let mut base = match preset {
        Some(Preset::Paper) => ModelConfig::paper(cfg.model.n_mics),
        Some(Preset::Desk) => ModelConfig::desk(cfg.model.n_mics),
        None => cfg.model.clone(),
    };
    if let Some(c) = c_mid {
        base.c_mid = c;
    }
    let with_mics = |m: usize| ModelConfig {
        n_mics: m,
        reference_mic: mcse_core::network::default_reference(m),
        ..base.clone()
    };
    let m = mics.unwrap_or(base.n_mics);
    let cfg_m = with_mics(m);
    cfg_m.validate()?;
    let b = param_count(&cfg_m)?;
    println!("parameters for {m} mic(s), c_mid {}:", base.c_mid);
    for (k, v) in &b.modules {
        println!("  {k:<28} {v:>10}");
    }
    println!("  {:<28} {:>10}", "total", b.total);
    println!();
    println!("{:>5} {:>12} {:>14}", "mics", "params", "delta-per-mic");
    let mut prev: Option<usize> = None;
    for k in 1..=m.max(6) {
        let t = param_count(&with_mics(k))?.total;
        let delta = prev.map_or("-".to_string(), |p| (t - p).to_string());
        println!("{k:>5} {t:>12} {delta:>14}");
        prev = Some(t);
    }
    Ok(())
}

fn gradcheck(seeds: &[u64], json: Option<&Path>) -> Result<bool> {
    let cfg = GradCheckConfig::default();
    println!(
        "central differences, step {:e}, tolerance {:e}, float64",
        cfg.step, cfg.tolerance
    );
    let suite = verify::run_suite(seeds, &cfg)?;
    for r in &suite.reports {
        println!(
            "{:<6} {:<48} max rel err {:.2e}  ({} entries){}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.checked,
            match (&r.worst_param, &r.failing_op) {
                (_, Some(op)) => format!("  operator `{op}`"),
                (Some(p), None) if !r.passed => format!("  at {p}"),
                _ => String::new(),
            }
        );
    }
    if let Some(p) = json {
        write_json(p, &suite)?;
    }
    println!(
        "{} of {} checks passed",
        suite.reports.iter().filter(|r| r.passed).count(),
        suite.reports.len()
    );
    Ok(suite.passed)
}

fn scanbench(seed: u64, l: usize, d: usize, n: usize, chunks: &[usize], reps: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: Vec<usize>, lo: f64, hi: f64| -> Result<Tensor<f64>> {
        let k = shape.iter().product();
        Ok(Tensor::new(
            shape,
            (0..k).map(|_| rng.gen_range(lo..hi)).collect(),
        )?)
    };
    let abar = rand_t(vec![l, d, n], 0.9, 0.9999)?;
    let bbar = rand_t(vec![l, d, n], -0.1, 0.1)?;
    let c = rand_t(vec![l, n], -1.0, 1.0)?;
    let u = rand_t(vec![l, d], -1.0, 1.0)?;
    let time = |s: ScanStrategy| -> Result<(Tensor<f64>, f64)> {
        let mut best = f64::INFINITY;
        let mut y = None;
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            y = Some(ssm_scan(&abar, &bbar, &c, &u, None, s)?.0);
            best = best.min(t.elapsed().as_secs_f64());
        }
        Ok((y.expect("at least one repetition"), best))
    };
    let (reference, t_seq) = time(ScanStrategy::Sequential)?;
    let scale = reference
        .data()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-300);
    let steps = (l * d * n) as f64;
    println!("L {l}, D {d}, N {n}, best of {reps}");
    println!(
        "{:<14} {:>10} {:>16} {:>14}",
        "strategy", "ms", "Mstate-steps/s", "max rel dev"
    );
    println!(
        "{:<14} {:>10.3} {:>16.1} {:>14}",
        "sequential",
        t_seq * 1e3,
        steps / t_seq / 1e6,
        "-"
    );
    for &k in chunks {
        let (y, t) = time(ScanStrategy::Chunked(k))?;
        let dev = y
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / scale;
        println!(
            "{:<14} {:>10.3} {:>16.1} {:>14.2e}",
            format!("chunked({k})"),
            t * 1e3,
            steps / t / 1e6,
            dev
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .context("cannot configure worker threads")?;
    let cfg = config::resolve(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    match &cli.cmd {
        Command::Simulate { out } => simulate(&cfg, out)?,
        Command::Train { data, runs } => train(&cfg, data, runs)?,
        Command::Enhance {
            checkpoint,
            input,
            output,
        } => enhance(checkpoint, input, output)?,
        Command::Evaluate(args) => evaluate_cmd(&cfg, args)?,
        Command::Params {
            preset,
            mics,
            c_mid,
        } => {
            echo(&cfg)?;
            params(&cfg, *preset, *mics, *c_mid)?
        }
        Command::Gradcheck { seeds, json } => {
            echo(&cfg)?;
            return gradcheck(seeds, json.as_deref());
        }
        Command::Scanbench {
            len,
            d_inner,
            n_state,
            chunks,
            reps,
        } => {
            echo(&cfg)?;
            scanbench(cfg.seed, *len, *d_inner, *n_state, chunks, *reps)?
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
