//! Command-line front end: train, eval, sample, clusters, geodesic, plots.
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort, 1 other.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rnf_harness::checkpoint;
use rnf_harness::config::RunConfig;
use rnf_harness::eval::{evaluate, EvalOptions};
use rnf_harness::model;
use rnf_harness::plots::{self, PlotOutcome};
use rnf_harness::sample;
use rnf_harness::train::{self, load_data};
use rnf_harness::{mix_seed, HarnessError};

use rnf_core::data::Vocab;
use rnf_core::flows::FlowStack;
use rnf_core::geometry::geodesic;
use rnf_core::nets::DecodeMode;
use rnf_core::rnf::gather_clusters;

#[derive(Parser)]
#[command(
    name = "rnf",
    about = "Train and inspect flow-based sequence autoencoders",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand; they override the config file and the
/// RNF_* environment variables.
#[derive(Args)]
struct Common {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory with train.txt and dev.txt (default: synthetic grammar).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model (optionally resuming from a checkpoint).
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the dev split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation batch size override.
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Decode sentences from prior samples.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of sentences.
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// Softmax temperature; omit for greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
        /// Maximum decoded length.
        #[arg(long, default_value_t = 40)]
        max_len: usize,
    },
    /// Gather posterior clusters from a checkpoint and save the artifact.
    Clusters {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cluster count override (default: the configured K).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Solve a geodesic under the checkpoint's flow metric.
    Geodesic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Start point, comma-separated coordinates.
        #[arg(long)]
        from: String,
        /// End point, comma-separated coordinates.
        #[arg(long)]
        to: String,
        /// Curve segments.
        #[arg(long, default_value_t = 24)]
        segments: usize,
        /// Descent iterations.
        #[arg(long, default_value_t = 400)]
        iters: usize,
    },
    /// Emit SVG plots from metrics CSVs and/or a checkpoint.
    Plots {
        #[command(flatten)]
        common: Common,
        /// Metrics CSVs for the mutual-information bar chart.
        #[arg(long, num_args = 1..)]
        metrics: Vec<PathBuf>,
        /// One label per metrics file (defaults to file stems).
        #[arg(long, num_args = 1..)]
        labels: Vec<String>,
        /// Checkpoint for the curvature heatmap (2-D latent only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Half-width of the heatmap grid.
        #[arg(long, default_value_t = 3.0)]
        range: f64,
        /// Heatmap grid resolution per axis.
        #[arg(long, default_value_t = 40)]
        grid: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rnf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, HarnessError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.data_dir {
        cfg.data_dir = Some(dir.clone());
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn parse_point(raw: &str, what: &str) -> Result<Vec<f64>, HarnessError> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| HarnessError::Config(format!("cannot parse {what} `{raw}`")))
        })
        .collect()
}

/// Rebuild model, flow stack, and vocabulary from a checkpoint. The
/// vocabulary is read from `vocab.tsv` next to the checkpoint file.
fn open_checkpoint(
    path: &PathBuf,
) -> Result<
    (
        checkpoint::TrainState,
        rnf_core::nets::ParamStore,
        model::Assembled,
        FlowStack,
        Vocab,
    ),
    HarnessError,
> {
    let state = checkpoint::load(path)?;
    let (store, asm) = model::restore(&state)?;
    let stack = model::flow_stack(&store, &asm.flow_ids)?;
    let vocab_path = path
        .parent()
        .map(|p| p.join("vocab.tsv"))
        .unwrap_or_else(|| PathBuf::from("vocab.tsv"));
    if !vocab_path.is_file() {
        return Err(HarnessError::Config(format!(
            "vocabulary file {} not found next to the checkpoint",
            vocab_path.display()
        )));
    }
    let vocab = Vocab::load(&vocab_path)?;
    if vocab.size() != state.vocab {
        return Err(HarnessError::Config(format!(
            "vocabulary has {} entries, checkpoint expects {}",
            vocab.size(),
            state.vocab
        )));
    }
    Ok((state, store, asm, stack, vocab))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.cmd {
        Cmd::Train { common, checkpoint } => {
            let mut cfg = load_config(&common)?;
            if let Some(ckpt) = checkpoint {
                cfg.resume = Some(ckpt);
            }
            let outcome = train::train(&cfg)?;
            println!(
                "done: metrics {}, rolling checkpoint {}, best checkpoint {}",
                outcome.csv.display(),
                outcome.last_ckpt.display(),
                outcome.best_ckpt.display()
            );
            if let Some(epoch) = outcome.best_epoch {
                println!(
                    "best dev objective {:.4} at epoch {epoch}; {} clipped steps",
                    outcome.best_score, outcome.clip_events
                );
            }
            Ok(())
        }
        Cmd::Eval {
            common,
            checkpoint: ckpt_path,
            batch_size,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(bs) = batch_size {
                cfg.eval_batch_size = bs;
            }
            let (state, store, asm, stack, _) = open_checkpoint(&ckpt_path)?;
            let data = load_data(&cfg)?;
            if data.vocab.size() != state.vocab {
                return Err(HarnessError::Config(format!(
                    "data yields a vocabulary of {}, checkpoint was trained with {}",
                    data.vocab.size(),
                    state.vocab
                )));
            }
            let kernel = match state.kernel {
                rnf_core::rnf::KernelKind::InverseMultiquadratic => {
                    rnf_core::rnf::KernelConfig::imq(state.latent)
                }
                rnf_core::rnf::KernelKind::Gaussian => {
                    rnf_core::rnf::KernelConfig::gaussian(state.latent)
                }
            };
            let eval_stack = if state.objective.uses_flows() {
                stack
            } else {
                FlowStack::empty()
            };
            let rnf = if state.objective.uses_regularized_logdet() {
                state.clusters.as_ref().map(|c| (c, &kernel))
            } else {
                None
            };
            let opts = EvalOptions {
                batch_size: cfg.eval_batch(),
                noise_seed: mix_seed(cfg.seed, 0x6576_616c, 0),
                mi_samples: cfg.mi_samples,
                mi_seed: mix_seed(cfg.seed, 0x6d69_7365, 0),
                want_mmd: state.objective.uses_mmd(),
            };
            let m = evaluate(&asm.model, &store, &eval_stack, rnf, &data.dev, &opts)?;
            println!("sentences      {}", m.sentences);
            println!("tokens         {}", m.tokens);
            println!("nll bound      {:.6}", m.nll);
            println!("reconstruction {:.6}", m.recon);
            println!("kl             {:.6}", m.kl);
            match m.mmd {
                Some(v) => println!("mmd            {v:.6}"),
                None => println!("mmd            -"),
            }
            match m.log_j_raw {
                Some(v) => println!("log_j_raw      {v:.6}"),
                None => println!("log_j_raw      -"),
            }
            match m.log_j_reg {
                Some(v) => println!("log_j_reg      {v:.6}"),
                None => println!("log_j_reg      -"),
            }
            println!("ppl            {:.6}", m.ppl);
            println!("mi             {:.6} (se {:.6})", m.mi.value, m.mi.std_error);
            Ok(())
        }
        Cmd::Sample {
            common,
            checkpoint: ckpt_path,
            n,
            temperature,
            max_len,
        } => {
            let cfg = load_config(&common)?;
            let (state, store, asm, stack, vocab) = open_checkpoint(&ckpt_path)?;
            let sample_stack = if state.objective.uses_flows() {
                stack
            } else {
                FlowStack::empty()
            };
            let mode = match temperature {
                Some(t) => DecodeMode::Temperature(t),
                None => DecodeMode::Greedy,
            };
            let sentences = sample::sample_sentences(
                &asm.model,
                &store,
                &sample_stack,
                n,
                max_len,
                mode,
                cfg.seed,
            )?;
            let lines = sample::render_sentences(&vocab, &sentences)?;
            let out_path = cfg.out_dir.join("samples.txt");
            std::fs::create_dir_all(&cfg.out_dir)?;
            sample::write_lines(&out_path, &lines)?;

            // Diversity proxy: exact-duplicate rate over 100 greedy samples
            // drawn on an independent stream.
            let greedy = sample::sample_sentences(
                &asm.model,
                &store,
                &sample_stack,
                100,
                max_len,
                DecodeMode::Greedy,
                mix_seed(cfg.seed, 0x6772_6564, 0),
            )?;
            let greedy_lines = sample::render_sentences(&vocab, &greedy)?;
            let ratio = sample::distinct_ratio(&greedy_lines).unwrap_or(0.0);
            println!(
                "wrote {} sentences to {}; distinct ratio over 100 greedy prior samples: {ratio:.2}",
                lines.len(),
                out_path.display()
            );
            Ok(())
        }
        Cmd::Clusters {
            common,
            checkpoint: ckpt_path,
            k,
        } => {
            let cfg = load_config(&common)?;
            let (state, store, asm, _, _) = open_checkpoint(&ckpt_path)?;
            let data = load_data(&cfg)?;
            if data.vocab.size() != state.vocab {
                return Err(HarnessError::Config(format!(
                    "data yields a vocabulary of {}, checkpoint was trained with {}",
                    data.vocab.size(),
                    state.vocab
                )));
            }
            let k = k.unwrap_or(cfg.clusters);
            let means =
                train::posterior_means(&asm.model, &store, &data.train, cfg.eval_batch())?;
            let set = gather_clusters(&means, k, mix_seed(cfg.seed, 0x636c_7573, 0))?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let out_path = cfg.out_dir.join("clusters.bin");
            set.save(&out_path)?;
            println!(
                "gathered {} clusters of dimension {} into {}",
                set.k(),
                set.dim(),
                out_path.display()
            );
            Ok(())
        }
        Cmd::Geodesic {
            common,
            checkpoint: ckpt_path,
            from,
            to,
            segments,
            iters,
        } => {
            let cfg = load_config(&common)?;
            let (state, _, _, stack, _) = open_checkpoint(&ckpt_path)?;
            let a = parse_point(&from, "--from")?;
            let b = parse_point(&to, "--to")?;
            if a.len() != state.latent || b.len() != state.latent {
                return Err(HarnessError::Config(format!(
                    "endpoints must have {} coordinates",
                    state.latent
                )));
            }
            let result = geodesic(&stack, &a, &b, segments, iters)?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let out_path = cfg.out_dir.join("geodesic.csv");
            let mut f = std::io::BufWriter::new(std::fs::File::create(&out_path)?);
            let header: Vec<String> = (0..state.latent).map(|i| format!("z{i}")).collect();
            writeln!(f, "{}", header.join(","))?;
            for r in 0..result.curve.points().rows() {
                let row: Vec<String> = result
                    .curve
                    .points()
                    .row_slice(r)
                    .iter()
                    .map(|v| v.to_string())
                    .collect();
                writeln!(f, "{}", row.join(","))?;
            }
            f.flush()?;
            println!(
                "geodesic with {} points, energy {:.6} -> {:.6}, converged: {}, saved to {}",
                result.curve.points().rows(),
                result.energies.first().copied().unwrap_or(f64::NAN),
                result.energies.last().copied().unwrap_or(f64::NAN),
                result.converged,
                out_path.display()
            );
            Ok(())
        }
        Cmd::Plots {
            common,
            metrics,
            labels,
            checkpoint: ckpt_path,
            range,
            grid,
        } => {
            let cfg = load_config(&common)?;
            if metrics.is_empty() && ckpt_path.is_none() {
                return Err(HarnessError::Config(
                    "nothing to plot: pass --metrics and/or --checkpoint".into(),
                ));
            }
            std::fs::create_dir_all(&cfg.out_dir)?;
            if !metrics.is_empty() {
                if !labels.is_empty() && labels.len() != metrics.len() {
                    return Err(HarnessError::Config(
                        "need exactly one label per metrics file".into(),
                    ));
                }
                let runs: Vec<(String, PathBuf)> = metrics
                    .iter()
                    .enumerate()
                    .map(|(i, path)| {
                        let label = labels.get(i).cloned().unwrap_or_else(|| {
                            path.file_stem()
                                .map(|s| s.to_string_lossy().into_owned())
                                .unwrap_or_else(|| format!("run{i}"))
                        });
                        (label, path.clone())
                    })
                    .collect();
                let out = plots::mi_bar_chart(&runs, &cfg.out_dir.join("mi.svg"))?;
                println!("wrote {}", out.display());
            }
            if let Some(path) = ckpt_path {
                let (state, _, _, stack, _) = open_checkpoint(&path)?;
                let plot_stack = if state.objective.uses_flows() {
                    stack
                } else {
                    FlowStack::empty()
                };
                let corner = 0.8 * range;
                match plots::curvature_plot(
                    &plot_stack,
                    state.latent,
                    range,
                    grid,
                    [-corner, -corner],
                    [corner, corner],
                    &cfg.out_dir,
                )? {
                    PlotOutcome::Written(files) => {
                        for f in files {
                            println!("wrote {}", f.display());
                        }
                    }
                    PlotOutcome::Skipped(reason) => {
                        println!("heatmap skipped: {reason}");
                    }
                }
            }
            Ok(())
        }
    }
}
