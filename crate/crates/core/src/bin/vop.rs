use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use vop::index::{VoteMode, Weighting};
use vop::pipeline::{self, diag, VopConfig};
use vop::Result;

#[derive(Parser)]
#[command(name = "vop", version, about = "Patch-overlap image retrieval")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Hard,
    Soft,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightsArg {
    Tfidf,
    Uniform,
}

#[derive(Args)]
struct RetrievalArgs {
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Search all database images instead of a global-descriptor shortlist.
    #[arg(long)]
    no_prefilter: bool,
    #[arg(long)]
    shortlist: Option<usize>,
    #[arg(long)]
    pool_factor: Option<usize>,
    #[arg(long, value_enum)]
    weights: Option<WeightsArg>,
    /// Fixed similarity radius instead of calibration.
    #[arg(long, allow_hyphen_values = true)]
    epsilon: Option<f64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Patch correspondences from depth maps and cameras.
    Supervise {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth image overlaps (default: <out>.overlaps.jsonl).
        #[arg(long)]
        overlaps: Option<PathBuf>,
    },
    /// Train the embedding head.
    Train {
        #[arg(long, required = true, num_args = 1..)]
        features: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        supervision: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV (default: <out>.loss.csv).
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Embed backbone features with a trained head.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a patch index; the sidecar is written next to it as .json.
    Index {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pool_factor: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        epsilon: Option<f64>,
    },
    /// Rank database images for each query.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        retrieval: RetrievalArgs,
    },
    /// Recall@k against ground-truth overlaps.
    Eval {
        #[arg(long)]
        retrievals: PathBuf,
        #[arg(long)]
        overlaps: PathBuf,
        #[arg(long)]
        supervision: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long)]
        threshold: Option<u64>,
        #[arg(long)]
        exclude_self: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Pose-graph growth from retrieval lists.
    Posegraph {
        #[arg(long)]
        retrievals: PathBuf,
        #[arg(long)]
        overlaps: PathBuf,
        #[arg(long)]
        out_trace: PathBuf,
        #[arg(long)]
        out_stats: PathBuf,
        #[arg(long)]
        shuffles: Option<usize>,
        #[arg(long)]
        threshold: Option<u64>,
        #[arg(long)]
        flip_probability: Option<f64>,
        #[arg(long)]
        terminate_on_single_cc: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    // embed and eval draw no random numbers, so they run without a seed
    let seedless = matches!(cli.cmd, Cmd::Embed { .. } | Cmd::Eval { .. });
    let seed = match (seedless, &cli.config, cli.seed) {
        (true, None, None) => Some(0),
        _ => cli.seed,
    };
    let mut cfg = VopConfig::load(cli.config.as_deref(), seed)?;
    match cli.cmd {
        Cmd::Supervise { manifest, out, overlaps } => {
            pipeline::cmd_supervise(&manifest, &out, overlaps.as_deref(), &cfg.supervise, cfg.seed)?;
        }
        Cmd::Train { features, supervision, out, loss_log, epochs, lr } => {
            if let Some(e) = epochs {
                cfg.train.insert("epochs".into(), json!(e));
            }
            if let Some(l) = lr {
                cfg.train.insert("lr".into(), json!(l));
            }
            let tc = cfg.train_config()?;
            pipeline::cmd_train(&features, &supervision, &tc, &out, loss_log.as_deref())?;
        }
        Cmd::Embed { checkpoint, features, out } => {
            pipeline::cmd_embed(&checkpoint, &features, &out)?;
        }
        Cmd::Index { embeddings, out, pool_factor, epsilon } => {
            let mut r = cfg.retrieval.clone();
            r.pool_factor = pool_factor.unwrap_or(r.pool_factor);
            r.epsilon = epsilon.or(r.epsilon);
            pipeline::cmd_index(&embeddings, &out, &r, cfg.seed)?;
        }
        Cmd::Query { index, queries, out, retrieval: a } => {
            let mut r = cfg.retrieval.clone();
            r.top_k = a.top_k.unwrap_or(r.top_k);
            if let Some(m) = a.mode {
                r.mode = match m {
                    ModeArg::Hard => VoteMode::Hard,
                    ModeArg::Soft => VoteMode::Soft,
                };
            }
            if let Some(w) = a.weights {
                r.weights = match w {
                    WeightsArg::Tfidf => Weighting::Tfidf,
                    WeightsArg::Uniform => Weighting::Uniform,
                };
            }
            r.prefilter &= !a.no_prefilter;
            r.shortlist = a.shortlist.unwrap_or(r.shortlist);
            r.pool_factor = a.pool_factor.unwrap_or(r.pool_factor);
            r.epsilon = a.epsilon.or(r.epsilon);
            pipeline::cmd_query(&index, &queries, &out, &r, cfg.seed)?;
        }
        Cmd::Eval { retrievals, overlaps, supervision, k, threshold, exclude_self, out, csv } => {
            let mut e = cfg.eval.clone();
            e.ks = k.unwrap_or(e.ks);
            e.overlap_threshold = threshold.unwrap_or(e.overlap_threshold);
            e.exclude_self |= exclude_self;
            pipeline::cmd_eval(&retrievals, &overlaps, supervision.as_deref(), &e, &out, csv.as_deref())?;
        }
        Cmd::Posegraph {
            retrievals,
            overlaps,
            out_trace,
            out_stats,
            shuffles,
            threshold,
            flip_probability,
            terminate_on_single_cc,
        } => {
            let mut p = cfg.posegraph.clone();
            p.shuffles = shuffles.unwrap_or(p.shuffles);
            p.overlap_threshold = threshold.unwrap_or(p.overlap_threshold);
            p.flip_probability = flip_probability.unwrap_or(p.flip_probability);
            p.terminate_on_single_cc |= terminate_on_single_cc;
            pipeline::cmd_posegraph(&retrievals, &overlaps, &p, cfg.seed, &out_trace, &out_stats)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // usage errors are validation failures
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            diag("error", json!({"kind": e.kind(), "message": e.to_string()}));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
