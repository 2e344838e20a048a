//! `ccp`: generate data, train, evaluate, ablate and inspect cluster
//! pooling networks.

mod config;
mod inspect;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccp::ablation::{full_matrix, report, run_cell, summarize, RunResult};
use ccp::datasets::save_dataset;
use ccp::train::{evaluate, train, write_metrics_csv};
use ccp::{Checkpoint, GraphSource, Ordering, TrainMode};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "ccp", version, about = "Convolutional cluster pooling on graph signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; built-in desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; everything the command writes lands here.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the network seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    ordering: Option<String>,
    #[arg(long)]
    graph: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset to `<out>/dataset`.
    Gen(Common),
    /// Train and write `<out>/model.ckpt` and `<out>/metrics.csv`.
    Train(Common),
    /// Test-split accuracy and confusion matrix of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every mode × ordering × graph cell over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Write the cluster map of one level as `<out>/clusters-level<m>.ppm`.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        level: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

type CmdResult = Result<(), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn resolve(common: &Common) -> Result<RunConfig, String> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.network.seed = seed;
    }
    if let Some(mode) = &common.mode {
        cfg.network.mode = mode.parse::<TrainMode>().map_err(err)?;
    }
    if let Some(ordering) = &common.ordering {
        cfg.network.ordering = match ordering.as_str() {
            "centrality" => Ordering::Centrality,
            "random" => Ordering::Random,
            other => return Err(format!("unknown ordering `{}`", other)),
        };
    }
    if let Some(graph) = &common.graph {
        cfg.graph = graph.parse::<GraphSource>().map_err(err)?;
    }
    Ok(cfg)
}

fn create_out(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {}", dir.display(), e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    std::fs::write(path, bytes).map_err(|e| format!("{}: {}", path.display(), e))
}

fn cmd_gen(common: &Common) -> CmdResult {
    let cfg = resolve(common)?;
    let ds = cfg.data.load(&cfg.base).map_err(err)?;
    let dir = common.out.join("dataset");
    save_dataset(&ds, &dir).map_err(err)?;
    println!(
        "wrote {} samples ({} train, {} test) on {} nodes to {}",
        ds.len(),
        ds.train.len(),
        ds.test.len(),
        ds.graph.n(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(common: &Common) -> CmdResult {
    let cfg = resolve(common)?;
    let ds = cfg.data.load(&cfg.base).map_err(err)?;
    let graph = cfg.graph.resolve(&ds, cfg.network.seed).map_err(err)?;
    create_out(&common.out)?;
    write(&common.out.join("config.toml"), cfg.to_toml())?;
    let ckpt = train(&cfg.network, &cfg.train, &graph, &ds).map_err(err)?;
    ckpt.save(&common.out.join("model.ckpt")).map_err(err)?;
    write_metrics_csv(&ckpt.history, &common.out.join("metrics.csv")).map_err(err)?;
    if let Some(last) = ckpt.history.last() {
        println!(
            "epoch {}: loss {:.4}, L0 {:.4}, LK {:.4}, train acc {:.4}, test acc {:.4}",
            last.epoch, last.train_loss, last.l0, last.lk, last.train_acc, last.test_acc
        );
    }
    Ok(())
}

fn load_checkpoint(common: &Common, explicit: &Option<PathBuf>) -> Result<Checkpoint, String> {
    let path = explicit.clone().unwrap_or_else(|| common.out.join("model.ckpt"));
    Checkpoint::load(&path).map_err(err)
}

fn cmd_eval(common: &Common, checkpoint: &Option<PathBuf>) -> CmdResult {
    let cfg = resolve(common)?;
    let ckpt = load_checkpoint(common, checkpoint)?;
    let mut ds = cfg.data.load(&cfg.base).map_err(err)?;
    if ckpt.graph_source == GraphSource::Random {
        ds = ds.with_graph(ckpt.network.graph.clone()).map_err(err)?;
    }
    let report = evaluate(&ckpt, &ds).map_err(err)?;
    println!("test accuracy {:.4} on {} samples", report.accuracy, ds.test.len());
    println!("confusion (rows: true, columns: predicted)");
    for (name, row) in ds.class_names.iter().zip(&report.confusion) {
        let cells: Vec<String> = row.iter().map(|c| format!("{:>5}", c)).collect();
        println!("{:>16} {}", name, cells.join(""));
    }
    Ok(())
}

fn cmd_ablate(common: &Common, seeds: Option<u64>) -> CmdResult {
    let cfg = resolve(common)?;
    let ds = cfg.data.load(&cfg.base).map_err(err)?;
    let seeds = seeds.unwrap_or(cfg.ablate.seeds);
    let cells = full_matrix();
    let jobs: Vec<_> = cells
        .iter()
        .flat_map(|&cell| (0..seeds).map(move |s| (cell, cfg.network.seed + s)))
        .collect();
    let workers = cfg.ablate.jobs.clamp(1, jobs.len().max(1));
    let mut results: Vec<(usize, Result<RunResult, String>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (jobs, cfg, ds) = (&jobs, &cfg, &ds);
                scope.spawn(move || {
                    jobs.iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, &(cell, seed))| {
                            let r = run_cell(&cfg.network, &cfg.train, ds, cell, seed).map_err(err);
                            if let Ok(r) = &r {
                                eprintln!("{} seed {}: {:.4}", cell.label(), seed, r.test_acc);
                            }
                            (i, r)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    results.sort_by_key(|(i, _)| *i);
    let runs = results.into_iter().map(|(_, r)| r).collect::<Result<Vec<_>, _>>()?;
    let summaries = summarize(&cells, &runs);
    let table = report(&summaries);
    create_out(&common.out)?;
    write(&common.out.join("ablation.txt"), &table)?;
    let mut csv = String::from("mode,ordering,graph,seed,test_acc\n");
    for r in &runs {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.cell.mode.name(),
            match r.cell.ordering {
                Ordering::Centrality => "centrality",
                Ordering::Random => "random",
            },
            r.cell.graph.name(),
            r.seed,
            r.test_acc
        ));
    }
    write(&common.out.join("ablation.csv"), csv)?;
    print!("{}", table);
    Ok(())
}

fn cmd_inspect(common: &Common, level: usize, checkpoint: &Option<PathBuf>) -> CmdResult {
    let ckpt = load_checkpoint(common, checkpoint)?;
    let (width, height) = ckpt
        .grid
        .ok_or("inspect needs a checkpoint trained on a pixel grid")?;
    let (labels, clusters) = inspect::assignments(&ckpt.network, level)?;
    create_out(&common.out)?;
    let path = common.out.join(format!("clusters-level{}.ppm", level));
    write(&path, inspect::ppm(&labels, clusters, width, height))?;
    println!(
        "wrote {} ({} clusters, contiguity {:.4})",
        path.display(),
        clusters,
        inspect::contiguity(&labels, width, height)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(c) => cmd_gen(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Ablate { common, seeds } => cmd_ablate(common, *seeds),
        Command::Inspect {
            common,
            level,
            checkpoint,
        } => cmd_inspect(common, *level, checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {}", msg);
            ExitCode::FAILURE
        }
    }
}
