//! Command-line front end. Every command takes `--seed` and `--out`; configs
//! are JSON files whose unknown keys are rejected.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bench::{bench_csv, solver_bench, BenchCfg};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::matcher::SolverCfg;
use crate::rng::RngStream;
use crate::synth::{load_batch, make_batch, save_batch, BatchManifest};
use crate::trainer::{
    checkpoint_dir, evaluate_batch, init_params, load_checkpoint, load_config, parse_json, rows_to_csv, sweep_run,
    train_run, SweepGrid, TrainConfig,
};
use crate::uncertainty::{
    default_shift_grid, eval_ood, harness_data, load_head, predictor_for, report_csv, save_head, train_uq, ShiftSpec,
    UqConfig,
};

#[derive(Debug, Parser)]
#[command(name = "graphmatch", version = VERSION.as_str(), about = "Graph-matching self-supervision and post-hoc uncertainty")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write one synthetic two-view batch.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Train the matching objective; writes metrics.jsonl, config.json and checkpoint/.
    TrainSsl {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        common: Common,
        /// Train on this fixed batch directory instead of fresh batches.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate matching on a saved batch and print JSON.
    EvalMatch {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        batch: PathBuf,
        /// Checkpoint directory; defaults to the initial parameters.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write graph_s.csv and graph_t.csv to --out.
        #[arg(long)]
        dump_graph: bool,
        /// Write cv.gmt and ce.csv to --out.
        #[arg(long)]
        dump_affinities: bool,
    },
    /// Train every cell of a hyperparameter grid and write a CSV.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Compare solvers on random instances and write a CSV.
    SolverBench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        max_n: usize,
        #[arg(long, default_value_t = 5)]
        instances: usize,
        /// Record solve times instead of zeros.
        #[arg(long)]
        timing: bool,
    },
    /// Train the uncertainty head on the synthetic source domain.
    TrainUq {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Score a trained head across a shift grid; writes JSON and a CSV twin.
    EvalOod {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        head: PathBuf,
        /// JSON list of shifts; defaults to the six-level grid.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        print_config: bool,
    },
}

#[derive(Serialize)]
struct SchemaDefaults {
    train: TrainConfig,
    sweep: SweepGrid,
    uq: UqConfig,
}

/// Hash of the default configs serialized as JSON; it changes whenever a
/// config field is added, removed or renamed.
pub fn schema_hash() -> String {
    let defaults = SchemaDefaults {
        train: TrainConfig::default(),
        sweep: SweepGrid::default(),
        uq: UqConfig::default(),
    };
    let bytes = serde_json::to_vec(&defaults).expect("serializable defaults");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

static VERSION: LazyLock<String> = LazyLock::new(version_string);

fn version_string() -> String {
    format!("{} (config schema {})", env!("CARGO_PKG_VERSION"), schema_hash())
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => load_config(p),
        None => Ok(T::default()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable value");
    bytes.push(b'\n');
    std::io::stdout().lock().write_all(&bytes).map_err(|e| Error::io("<stdout>", e))
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::config("--out", "this command needs an output path"))
}

fn write_or_print(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fsutil::write_atomic(p, bytes),
        None => std::io::stdout().lock().write_all(bytes).map_err(|e| Error::io("<stdout>", e)),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("--threads", "must be >= 1"));
        }
        // a pool that is already built keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenData { cfg, common } => {
            let mut c: TrainConfig = read_config(cfg.config.as_deref())?;
            if let Some(s) = common.seed {
                c.seed = s;
            }
            c.validate()?;
            if cfg.print_config {
                return print_json(&c);
            }
            let out = require_out(&common)?;
            let (xs, xt) = make_batch(&mut RngStream::new(c.seed), c.n, &c.data)?;
            let manifest = BatchManifest {
                n: c.n,
                d: c.data.d,
                r: c.data.r,
                s: c.data.s,
                seed: c.seed,
                cfg: c.data.clone(),
            };
            save_batch(out, &xs, &xt, &manifest)
        }
        Command::TrainSsl { cfg, common, dataset } => {
            let mut c: TrainConfig = read_config(cfg.config.as_deref())?;
            if let Some(s) = common.seed {
                c.seed = s;
            }
            c.validate()?;
            if cfg.print_config {
                return print_json(&c);
            }
            let out = train_run(&c, common.out.as_deref(), dataset.as_deref())?;
            if let Some(last) = out.records.last() {
                eprintln!("step {}: loss {} matching_accuracy {}", last.step, last.loss, last.matching_accuracy);
            }
            Ok(())
        }
        Command::EvalMatch {
            cfg,
            common,
            batch,
            checkpoint,
            dump_graph,
            dump_affinities,
        } => {
            let mut c: TrainConfig = match (&cfg.config, &checkpoint) {
                (Some(p), _) => load_config(p)?,
                (None, Some(dir)) => load_checkpoint(&checkpoint_dir_or_self(dir))?.1.config,
                (None, None) => TrainConfig::default(),
            };
            if let Some(s) = common.seed {
                c.seed = s;
            }
            c.validate()?;
            if cfg.print_config {
                return print_json(&c);
            }
            let params = match &checkpoint {
                Some(dir) => load_checkpoint(&checkpoint_dir_or_self(dir))?.0,
                None => init_params(&c),
            };
            let (xs, xt) = load_batch(&batch)?;
            let (report, fwd) = evaluate_batch(&xs, &xt, &params, &c, &mut RngStream::new(c.seed))?;
            if dump_graph || dump_affinities {
                let out = require_out(&common)?;
                fsutil::create_dir(out)?;
                if dump_graph {
                    fsutil::write_atomic(&out.join("graph_s.csv"), fwd.gs.to_csv().as_bytes())?;
                    fsutil::write_atomic(&out.join("graph_t.csv"), fwd.gt.to_csv().as_bytes())?;
                }
                if dump_affinities {
                    fwd.affs.cv_tensor()?.save(out.join("cv.gmt"))?;
                    fsutil::write_atomic(&out.join("ce.csv"), fwd.affs.ce_csv(&fwd.gs, &fwd.gt).as_bytes())?;
                }
            }
            print_json(&report)
        }
        Command::Sweep { cfg, common } => {
            let mut grid: SweepGrid = read_config(cfg.config.as_deref())?;
            if let Some(s) = common.seed {
                grid.base.seed = s;
            }
            grid.base.validate()?;
            if cfg.print_config {
                return print_json(&grid);
            }
            let rows = sweep_run(&grid);
            write_or_print(common.out.as_deref(), &rows_to_csv(&rows)?)
        }
        Command::SolverBench {
            common,
            max_n,
            instances,
            timing,
        } => {
            let cfg = BenchCfg {
                max_n,
                instances,
                seed: common.seed.unwrap_or(0),
                solver: SolverCfg::default(),
                timing,
                ..Default::default()
            };
            write_or_print(common.out.as_deref(), &bench_csv(&solver_bench(&cfg)?)?)
        }
        Command::TrainUq { cfg, common } => {
            let mut c: UqConfig = read_config(cfg.config.as_deref())?;
            if let Some(s) = common.seed {
                c.seed = s;
            }
            c.validate()?;
            if cfg.print_config {
                return print_json(&c);
            }
            let out = require_out(&common)?;
            let data = harness_data(&c);
            let trained = train_uq(&predictor_for(&c), &data.train, &c)?;
            save_head(out, &trained.head, &c)?;
            let mut log = Vec::new();
            for (epoch, loss) in trained.losses.iter().enumerate() {
                serde_json::to_writer(&mut log, &serde_json::json!({ "epoch": epoch, "loss": loss }))
                    .expect("serializable record");
                log.push(b'\n');
            }
            fsutil::write_atomic(&out.join("losses.jsonl"), &log)
        }
        Command::EvalOod {
            common,
            head,
            grid,
            print_config,
        } => {
            let grid: Vec<ShiftSpec> = match &grid {
                Some(p) => parse_json(&fsutil::read_to_string(p)?)?,
                None => default_shift_grid(),
            };
            if print_config {
                return print_json(&grid);
            }
            let (head, mut c) = load_head(&head)?;
            if let Some(s) = common.seed {
                c.seed = s;
            }
            let out = require_out(&common)?;
            let data = harness_data(&c);
            let report = eval_ood(&head, &predictor_for(&c), &grid, &data.eval, &data.shift_rng)?;
            fsutil::write_json(out, &report)?;
            fsutil::write_atomic(&out.with_extension("csv"), &report_csv(&report)?)
        }
    }
}

/// Accepts either a training output directory or its `checkpoint/` child.
fn checkpoint_dir_or_self(dir: &Path) -> PathBuf {
    let nested = checkpoint_dir(dir);
    if nested.join("manifest.json").exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}
