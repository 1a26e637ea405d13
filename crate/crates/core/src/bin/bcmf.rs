//! `bcmf` command-line tool.
//!
//! ```text
//! bcmf generate-data --out data
//! bcmf train --out run --train.train_manifest data/train/manifest.txt
//! bcmf eval --config run/config.txt --checkpoint run/checkpoint.bin --manifest data/eval/manifest.txt
//! ```
//!
//! Any `--section.key value` (or `--section.key=value`) flag overrides the
//! config key of the same name. Failures print a single
//! `error kind=... message="..."` line on stderr and exit with status 1.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bcmf::checkpoint;
use bcmf::config::RunConfig;
use bcmf::datagen::{write_dataset, Manifest};
use bcmf::error::{Error, Result};
use bcmf::gradsuite;
use bcmf::train;

#[derive(Parser)]
#[command(name = "bcmf", version, about = "Train and evaluate a small boundary-aware segmentation network")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file(s) of `key = value` lines, applied in order.
    #[arg(long = "config", value_name = "PATH")]
    config: Vec<PathBuf>,
    /// Seed for the command's random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write train and eval splits of synthetic scenes under --out.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train from `train.train_manifest`; writes config, trace and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        instances: usize,
    },
    /// Parameter and FLOP counts plus forward timing.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Write palette-colored predictions as PPM files.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// Splits `--a.b value` / `--a.b=value` overrides out of the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().unwrap_or("").contains('.')) else {
            rest.push(a);
            continue;
        };
        if let Some((k, v)) = flag.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| Error::Config(format!("--{flag} needs a value")))?;
            overrides.push((flag.to_string(), v));
        }
    }
    Ok((rest, overrides))
}

fn resolve(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for p in &common.config {
        cfg.apply_file(p)?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
    }
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_manifest(path: &Path, cfg: &RunConfig) -> Result<Vec<bcmf::datagen::Sample>> {
    let m = Manifest::read(path)?;
    if m.num_classes != cfg.net.num_classes {
        return Err(Error::Config(format!(
            "{} has {} classes, network {}",
            path.display(),
            m.num_classes,
            cfg.net.num_classes
        )));
    }
    m.load_all()
}

fn run(cmd: Cmd, overrides: &[(String, String)]) -> Result<()> {
    match cmd {
        Cmd::GenerateData { common } => {
            let mut cfg = resolve(&common, overrides)?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            cfg.data.num_classes = cfg.net.num_classes;
            let out = common.out.unwrap_or_else(|| PathBuf::from("data"));
            let train = write_dataset(&out.join("train"), &cfg.data, 0, cfg.data_train_count)?;
            let eval = write_dataset(
                &out.join("eval"),
                &cfg.data,
                cfg.data_train_count as u64,
                cfg.data_eval_count,
            )?;
            println!("train_manifest = {}", train.display());
            println!("eval_manifest = {}", eval.display());
            println!("digest = {}", cfg.data.digest());
        }
        Cmd::Train { common } => {
            let mut cfg = resolve(&common, overrides)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(o) = common.out {
                cfg.train.out_dir = Some(o);
            }
            cfg.validate()?;
            let out = cfg.train.out_dir.clone().unwrap_or_else(|| PathBuf::from("run"));
            let manifest = cfg
                .train
                .train_manifest
                .clone()
                .ok_or_else(|| Error::Config("train.train_manifest is not set".into()))?;
            let data = load_manifest(&manifest, &cfg)?;
            let eval_data = match &cfg.train.eval_manifest {
                Some(p) if cfg.train.eval_interval > 0 => Some(load_manifest(p, &cfg)?),
                _ => None,
            };
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_file(&out.join("config.txt"), &cfg.to_text())?;
            let trace_path = out.join("trace.txt");
            let mut trace = fs::File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
            let t = cfg.train.clone();
            let result = train::train(&cfg, &data, |line, net| {
                writeln!(trace, "{line}").map_err(|e| Error::io(&trace_path, e))?;
                let done = line.iter + 1;
                if t.checkpoint_interval > 0 && done % t.checkpoint_interval == 0 {
                    checkpoint::save(&out.join(format!("checkpoint_{done:06}.bin")), net)?;
                }
                if let Some(ev) = &eval_data {
                    if done % t.eval_interval == 0 {
                        let r = train::evaluate(net, ev, cfg.eval_tolerance)?;
                        eprintln!("iter={} eval_miou={:.4} eval_boundary_f1={:.4}", line.iter, r.miou.mean, r.boundary_f1());
                        write_file(&out.join(format!("eval_{done:06}.txt")), &r.render()?)?;
                    }
                }
                Ok(())
            })?;
            checkpoint::save(&out.join("checkpoint.bin"), &result.network)?;
            if let Some(last) = result.trace.last() {
                println!("{last}");
            }
            println!("checkpoint = {}", out.join("checkpoint.bin").display());
        }
        Cmd::Eval {
            common,
            checkpoint: ckpt,
            manifest,
        } => {
            let cfg = resolve(&common, overrides)?;
            let net = checkpoint::load(&ckpt, &cfg.net)?;
            let data = load_manifest(&manifest, &cfg)?;
            let report = train::evaluate(&net, &data, cfg.eval_tolerance)?.render()?;
            print!("{report}");
            if let Some(o) = common.out {
                write_file(&o.join("report.txt"), &report)?;
            }
        }
        Cmd::Gradcheck { common, instances } => {
            let results = gradsuite::gradcheck_suite(common.seed.unwrap_or(0), instances)?;
            let mut failed = Vec::new();
            for r in &results {
                let status = if r.passed() { "pass" } else { "fail" };
                println!(
                    "case={} instances={} coords={} max_rel_error={:.3e} status={status}",
                    r.name, r.instances, r.checked, r.max_rel_error
                );
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Backward(format!("gradient check failed: {}", failed.join(","))));
            }
        }
        Cmd::Benchmark {
            common,
            height,
            width,
            reps,
        } => {
            let cfg = resolve(&common, overrides)?;
            let h = height.unwrap_or(cfg.data.height);
            let w = width.unwrap_or(cfg.data.width);
            let b = train::benchmark(&cfg.net, h, w, reps, common.seed.unwrap_or(0))?;
            println!("input = {h}x{w}");
            println!("params = {}", b.cost.params);
            println!("flops = {}", b.cost.flops);
            println!("seconds_per_forward = {:.6}", b.seconds_per_forward);
        }
        Cmd::Export {
            common,
            checkpoint: ckpt,
            manifest,
        } => {
            let cfg = resolve(&common, overrides)?;
            let net = checkpoint::load(&ckpt, &cfg.net)?;
            let data = load_manifest(&manifest, &cfg)?;
            let out = common.out.unwrap_or_else(|| PathBuf::from("predictions"));
            let n = train::export_predictions(&net, &data, &out)?;
            println!("exported = {n}");
            println!("out = {}", out.display());
        }
    }
    Ok(())
}

fn fail(kind: &str, msg: &str) -> ExitCode {
    let flat = msg.lines().next().unwrap_or("").replace('"', "'");
    eprintln!("error kind={kind} message=\"{flat}\"");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let (args, overrides) = match split_overrides(args) {
        Ok(x) => x,
        Err(e) => return fail(e.kind(), &e.to_string()),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim_start_matches("error: ")),
    };
    match run(cli.cmd, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
