use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icdc::checkpoint::load_model;
use icdc::eval::{evaluate, EvalOptions, Method};
use icdc::formats::{read_instances, write_instances};
use icdc::report::{markdown_table, write_report, write_rows};
use icdc::run::{create_run_dir, train_run, Manifest};
use icdc::{Error, Result};
use icdc_core::problems::{generate, Family};

#[derive(Parser)]
#[command(name = "icdc", version, about = "Train and evaluate discrete diffusion solvers for combinatorial problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write random instances as JSON lines; instance i uses seed + i.
    Generate {
        /// atsp, pmsp or nav.
        #[arg(long)]
        kind: String,
        /// `n`, or `jobs,machines` for pmsp.
        #[arg(long, value_delimiter = ',', required = true)]
        size: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a JSON config into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Best-of-n evaluation with gaps against the exact oracle when it reaches.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma separated; defaults to icdc plus the family baselines.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long, default_value_t = 32)]
        samples: usize,
        /// One or more strides, e.g. `1,2,5`.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        stride: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one checkpoint on fresh instances of several sizes.
    SweepGeneralize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        /// Machine count for pmsp sizes.
        #[arg(long, default_value_t = 3)]
        machines: usize,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Markdown table and plots from eval CSVs.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn family_of(kind: &str) -> Result<Family> {
    Family::from_name(kind).ok_or_else(|| Error::Schema(format!("unknown kind {kind:?}")))
}

fn size_of(family: Family, size: &[usize]) -> Result<(usize, usize)> {
    match (family, size) {
        (Family::Pmsp, &[j, m]) => Ok((j, m)),
        (Family::Atsp | Family::Nav, &[n]) => Ok((n, n)),
        _ => Err(Error::Schema(format!("bad size {size:?} for {}", family.name()))),
    }
}

fn parse_methods(names: &[String], family: Family, with_model: bool) -> Result<Vec<Method>> {
    if names.is_empty() {
        let mut m = if with_model { vec![Method::Icdc] } else { Vec::new() };
        m.extend(Method::baselines(family));
        return Ok(m);
    }
    names.iter().map(|n| Method::from_name(n).ok_or_else(|| Error::Schema(format!("unknown method {n:?}")))).collect()
}

fn cmd_generate(kind: &str, size: &[usize], count: usize, seed: u64, out: &Path) -> Result<()> {
    let family = family_of(kind)?;
    let size = size_of(family, size)?;
    let seeds: Vec<u64> = (0..count as u64).map(|i| seed + i).collect();
    let instances = seeds.iter().map(|&s| generate(family, size, s)).collect::<icdc_core::Result<Vec<_>>>()?;
    write_instances(out, &instances, &seeds.iter().map(|&s| Some(s)).collect::<Vec<_>>())?;
    println!("wrote {count} {} instances to {}", family.name(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: Option<&Path>,
    dataset: &Path,
    methods: &[String],
    samples: usize,
    strides: &[usize],
    seed: u64,
    workers: usize,
    out: &Path,
) -> Result<()> {
    let data = read_instances(dataset)?;
    let family = data.instances.first().map(|i| i.family()).ok_or_else(|| Error::Schema("empty dataset".into()))?;
    let model = checkpoint.map(load_model).transpose()?;
    if model.as_ref().is_some_and(|m| m.config().family != family) {
        return Err(Error::Schema("checkpoint and dataset families differ".into()));
    }
    let methods = parse_methods(methods, family, model.is_some())?;
    let opts = EvalOptions { samples, seed, workers, ..EvalOptions::default() };
    let report = evaluate(&data.instances, &methods, strides, model.as_ref(), &opts)?;
    create_run_dir(out)?;
    Manifest::new("eval", None, vec![("eval".into(), seed)]).write(out)?;
    write_rows(&out.join("eval.csv"), &report.rows)?;
    print!("{}", markdown_table(&report.rows));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    checkpoint: &Path,
    sizes: &[usize],
    machines: usize,
    count: usize,
    samples: usize,
    stride: usize,
    seed: u64,
    workers: usize,
    out: &Path,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let family = model.config().family;
    let opts = EvalOptions { samples, seed, workers, ..EvalOptions::default() };
    let mut rows = Vec::new();
    for &n in sizes {
        let size = if family == Family::Pmsp { (n, machines) } else { (n, n) };
        let instances = (0..count as u64).map(|i| generate(family, size, seed + i)).collect::<icdc_core::Result<Vec<_>>>()?;
        let mut methods = vec![Method::Icdc];
        methods.extend(Method::baselines(family));
        let report = evaluate(&instances, &methods, &[stride], Some(&model), &opts)?;
        rows.extend(report.rows.into_iter().filter(|r| r.method == "icdc"));
    }
    create_run_dir(out)?;
    Manifest::new("sweep-generalize", None, vec![("eval".into(), seed)]).write(out)?;
    write_rows(&out.join("generalize.csv"), &rows)?;
    print!("{}", markdown_table(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { kind, size, count, seed, out } => cmd_generate(&kind, &size, count, seed, &out),
        Command::Train { config, out, workers } => {
            let o = train_run(&config, &out, workers)?;
            println!("trained {} iterations into {}", o.iterations, o.dir.display());
            if let Some((it, gap)) = o.gaps.last() {
                println!("held-out gap at iteration {it}: {gap:.2}%");
            }
            Ok(())
        }
        Command::Eval { checkpoint, dataset, methods, samples, stride, seed, workers, out } => {
            cmd_eval(checkpoint.as_deref(), &dataset, &methods, samples, &stride, seed, workers, &out)
        }
        Command::SweepGeneralize { checkpoint, sizes, machines, count, samples, stride, seed, workers, out } => {
            cmd_sweep(&checkpoint, &sizes, machines, count, samples, stride, seed, workers, &out)
        }
        Command::Report { csv, out } => {
            for p in write_report(&csv, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
