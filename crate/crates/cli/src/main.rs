use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dabs_core::{Component, DabsError};

mod commands;
mod config;

use config::{BenchMode, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "dabs", version, about = "Single-pass aspect sentiment experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic corpus as JSONL.
    Generate {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Multiplicity and class statistics of a corpus.
    Stats {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one model; writes a checkpoint and metric log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export per-aspect selection traces.
    Trace {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Ablations, component presets, depth controls, layer order, K sweep
    /// and the paired comparison against the encoder-only baseline.
    Probe {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated removals, or `all`.
        #[arg(long = "ablate", value_delimiter = ',')]
        ablate: Vec<String>,
        #[arg(long)]
        components: bool,
        /// Region masking, single-level controls, Rand-2L and the negation
        /// shift on a trained checkpoint.
        #[arg(long)]
        regions: bool,
        #[arg(long)]
        layer_order: bool,
        #[arg(long)]
        k_sweep: bool,
        #[arg(long)]
        paired: bool,
    },
    /// Reuse versus per-aspect serving over a range of M.
    Bench {
        #[arg(long, value_enum)]
        mode: Option<BenchMode>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        m: Vec<usize>,
    },
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, value_parser = parse_component)]
    component: Option<Component>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn parse_component(s: &str) -> Result<Component, String> {
    Component::ALL
        .into_iter()
        .find(|c| serde_json::to_value(c).ok().and_then(|v| v.as_str().map(|x| x == s)).unwrap_or(false))
        .ok_or_else(|| format!("expected one of encoder_only, dora_only, acbs_only, full; got `{s}`"))
}

fn exit_code(e: &DabsError) -> u8 {
    match e {
        DabsError::Config(_) => 1,
        DabsError::Input(_) | DabsError::Format { .. } | DabsError::Io(_) | DabsError::Json(_) => 2,
        DabsError::Shape(_) | DabsError::Domain(_) | DabsError::Training { .. } => 3,
    }
}

fn report(kind: &str, message: &str, code: u8) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message, "exit_code": code });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn resolve(common: &Common, cmd: &Cmd) -> dabs_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    let data_args = |d: &DataArgs, cfg: &mut RunConfig| {
        if let Some(p) = &d.data {
            cfg.data.path = Some(p.clone());
        }
        if let Some(p) = &d.test {
            cfg.data.test = Some(p.clone());
        }
    };
    let model_args = |m: &ModelArgs, cfg: &mut RunConfig| {
        if let Some(c) = m.component {
            cfg.component = c;
        }
        if let Some(e) = m.epochs {
            cfg.train.epochs = e;
        }
    };
    let ckpt = |c: &Option<PathBuf>, cfg: &mut RunConfig| {
        if let Some(p) = c {
            cfg.checkpoint = Some(p.clone());
        }
    };
    match cmd {
        Cmd::Generate { n } => {
            if let Some(n) = n {
                cfg.generate.n_sentences = *n;
            }
        }
        Cmd::Stats { data } => {
            if let Some(p) = data {
                cfg.data.path = Some(p.clone());
            }
        }
        Cmd::Train { data, model } => {
            data_args(data, &mut cfg);
            model_args(model, &mut cfg);
        }
        Cmd::Eval { data, checkpoint } | Cmd::Trace { data, checkpoint } => {
            data_args(data, &mut cfg);
            ckpt(checkpoint, &mut cfg);
        }
        Cmd::Probe { data, model, checkpoint, .. } => {
            data_args(data, &mut cfg);
            model_args(model, &mut cfg);
            ckpt(checkpoint, &mut cfg);
        }
        Cmd::Bench { mode, checkpoint, m } => {
            ckpt(checkpoint, &mut cfg);
            if let Some(mode) = mode {
                cfg.bench.mode = *mode;
            }
            if !m.is_empty() {
                cfg.bench.m_values = m.clone();
            }
        }
    }
    cfg.resolve()
}

fn run(cli: Cli) -> dabs_core::Result<()> {
    let cfg = resolve(&cli.common, &cli.cmd)?;
    cfg.write_resolved()?;
    match cli.cmd {
        Cmd::Generate { .. } => commands::generate(&cfg),
        Cmd::Stats { .. } => commands::stats(&cfg),
        Cmd::Train { .. } => commands::train(&cfg),
        Cmd::Eval { .. } => commands::eval(&cfg),
        Cmd::Trace { .. } => commands::trace(&cfg),
        Cmd::Probe { ablate, components, regions, layer_order, k_sweep, paired, .. } => {
            let req = commands::ProbeRequest { ablate, components, regions, layer_order, k_sweep, paired };
            commands::probe(&cfg, &req)
        }
        Cmd::Bench { .. } => commands::bench(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            return report("usage", first, 1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e.kind(), &e.to_string(), exit_code(&e)),
    }
}
