//! `lorafuse`: batch commands for building an adapter pool, training the
//! weight-space retriever and the fusion gates, and generating from fused
//! adapters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lorafuse_core::config::RunConfig;
use lorafuse_core::pipeline::{self, Pool};
use lorafuse_core::Error;

#[derive(Parser)]
#[command(
    name = "lorafuse",
    version,
    about = "Weight-space adapter retrieval and gated multi-adapter fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted sections use defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the host model and one adapter per (theme, variation).
    SynthPool {
        #[command(flatten)]
        common: Common,
    },
    /// Train the weight encoder against caption embeddings.
    TrainRetriever {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
    },
    /// Embed every pool adapter into a retrieval index.
    BuildIndex {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Print the top-k adapters for a text as JSON.
    Query {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Write the pairwise similarity matrix and intra/inter group means.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        index: PathBuf,
        /// Pool whose manifest groups adapters by theme.
        #[arg(long, required_unless_present = "groups")]
        pool: Option<PathBuf>,
        /// JSON object mapping adapter id to group name.
        #[arg(long, conflicts_with = "pool")]
        groups: Option<PathBuf>,
    },
    /// Train fusion gates with interference-resistant pairs.
    TrainFusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
    },
    /// Compare gated fusion with direct addition on random adapter sets.
    EvalFusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        gates: PathBuf,
        /// Set size; both 2 and 3 when omitted.
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long, default_value_t = 10)]
        sets: usize,
    },
    /// Sample points for a prompt, fusing retrieved adapters when an index is given.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, requires = "index")]
        gates: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 1024)]
        samples: usize,
    },
}

impl Common {
    fn config(&self) -> Result<RunConfig, Error> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    fn seeded(&self) -> Result<(RunConfig, u64), Error> {
        let cfg = self.config()?;
        let seed = cfg.resolve_seed(self.seed)?;
        Ok((cfg, seed))
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn require(path: &Path) -> Result<(), Error> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "{} does not exist",
            path.display()
        )))
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::SynthPool { common } => {
            let (cfg, seed) = common.seeded()?;
            let m = pipeline::synth_pool(&cfg, seed, &common.out)?;
            eprintln!(
                "wrote {} adapters to {}",
                m.adapters.len(),
                common.out.display()
            );
        }
        Command::TrainRetriever { common, pool } => {
            require(&pool)?;
            let (cfg, seed) = common.seeded()?;
            let run = pipeline::train_retriever(&cfg, seed, &pool, &common.out)?;
            if let Some(last) = run.metrics.last() {
                print_json(last)?;
            }
        }
        Command::BuildIndex {
            common,
            pool,
            encoder,
        } => {
            require(&pool)?;
            require(&encoder)?;
            let index = pipeline::build_index(&pool, &encoder, &common.out)?;
            eprintln!("indexed {} adapters", index.len());
        }
        Command::Query {
            common,
            index,
            text,
            k,
        } => {
            require(&index)?;
            let cfg = common.config()?;
            print_json(&pipeline::query(&cfg, &index, &text, k)?)?;
        }
        Command::Heatmap {
            common,
            index,
            pool,
            groups,
        } => {
            require(&index)?;
            let grouping: BTreeMap<String, String> = match (pool, groups) {
                (_, Some(g)) => {
                    require(&g)?;
                    serde_json::from_slice(&std::fs::read(g)?)?
                }
                (Some(p), None) => {
                    require(&p)?;
                    Pool::load(&p)?.theme_grouping()
                }
                (None, None) => {
                    return Err(Error::Argument("--pool or --groups is required".into()))
                }
            };
            let (_, stats) = pipeline::heatmap(&index, &grouping, &common.out)?;
            print_json(&stats)?;
        }
        Command::TrainFusion { common, pool } => {
            require(&pool)?;
            let (cfg, seed) = common.seeded()?;
            let run = pipeline::train_fusion(&cfg, seed, &pool, &common.out)?;
            if let Some(last) = run.log.last() {
                print_json(last)?;
            }
        }
        Command::EvalFusion {
            common,
            pool,
            gates,
            topk,
            sets,
        } => {
            require(&pool)?;
            require(&gates)?;
            let (cfg, seed) = common.seeded()?;
            let reports =
                pipeline::eval_fusion(&cfg, seed, &pool, &gates, topk, sets, &common.out)?;
            for (size, r) in &reports {
                eprintln!(
                    "size {size}: gated wins {}/{} on loss, {}/{} on energy",
                    r.gated_loss_wins,
                    r.sets.len(),
                    r.gated_energy_wins,
                    r.sets.len()
                );
            }
        }
        Command::Generate {
            common,
            pool,
            text,
            index,
            gates,
            k,
            samples,
        } => {
            require(&pool)?;
            for p in index.iter().chain(gates.iter()) {
                require(p)?;
            }
            let (cfg, seed) = common.seeded()?;
            let rec = pipeline::generate(
                &cfg,
                seed,
                &pool,
                gates.as_deref(),
                index.as_deref(),
                &text,
                k,
                samples,
                &common.out,
            )?;
            print_json(&rec)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
