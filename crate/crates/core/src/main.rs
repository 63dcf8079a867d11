use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fgpt::calibration::{layer_stats, record_traces, similarity_matrix, write_similarity_csv, write_stats_csv};
use fgpt::error::Result;
use fgpt::eval::{bench_forward, logit_divergence, perplexity};
use fgpt::model::{ArchSpec, ModelConfig};
use fgpt::model_io::{generate_toy_model, load_model, save_model, tokenize_bytes, tokens_from_raw_u32, TokenStream};
use fgpt::pipeline::{compress, plan_compression};

#[derive(Parser)]
#[command(name = "fgpt", version, about = "Depth compression for small decoder transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CalibArgs {
    /// UTF-8 text file, tokenized at the byte level.
    #[arg(long, conflicts_with = "calib_tokens", required_unless_present = "calib_tokens")]
    calib_text: Option<PathBuf>,
    /// Raw little-endian u32 token id file.
    #[arg(long)]
    calib_tokens: Option<PathBuf>,
    /// Calibration sequence length.
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    /// Number of calibration sequences to use.
    #[arg(long, default_value_t = 32)]
    sequences: usize,
}

impl CalibArgs {
    fn load(&self) -> Result<TokenStream> {
        let stream = if let Some(path) = &self.calib_text {
            tokenize_bytes(&fs::read(path)?, self.seq_len)?
        } else {
            let path = self.calib_tokens.as_ref().expect("clap enforces one source");
            tokens_from_raw_u32(&fs::read(path)?, self.seq_len)?
        };
        stream.take(self.sequences)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a random toy model container.
    Generate {
        #[arg(long, default_value_t = 16)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        /// KV groups per layer; defaults to one group per head.
        #[arg(long)]
        kv_groups: Option<usize>,
        #[arg(long, default_value_t = 16)]
        head_dim: usize,
        #[arg(long, default_value_t = 256)]
        intermediate: usize,
        #[arg(long, default_value_t = 256)]
        vocab: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0.02)]
        init_scale: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the cross-layer similarity matrix and per-layer statistics.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        calib: CalibArgs,
        #[arg(long)]
        out_similarity: PathBuf,
        #[arg(long)]
        out_stats: PathBuf,
    },
    /// Flatten and prune a model to a target sparsity.
    Compress {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        calib: CalibArgs,
        /// Fraction of all parameters to remove, in (0, 1).
        #[arg(long)]
        sparsity: f64,
        #[arg(long, default_value_t = 10.0)]
        lambda_scale: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the compression report JSON.
        #[arg(long)]
        report: PathBuf,
    },
    /// Perplexity of a model; with a baseline, logit divergence too.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Reference model for divergence metrics.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        calib: CalibArgs,
    },
    /// Forward-latency benchmark.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate {
            layers,
            dim,
            heads,
            kv_groups,
            head_dim,
            intermediate,
            vocab,
            seed,
            init_scale,
            out,
        } => {
            let config = ModelConfig {
                d_model: dim,
                vocab,
                rope_base: 10000.0,
                norm_eps: 1e-6,
                layers: vec![
                    ArchSpec {
                        n_heads: heads,
                        n_kv_groups: kv_groups.unwrap_or(heads),
                        head_dim,
                        intermediate,
                    };
                    layers
                ],
            };
            let model = generate_toy_model(&config, seed, init_scale)?;
            save_model(&model, &out)?;
            eprintln!(
                "wrote {} ({} layers, {} parameters)",
                out.display(),
                layers,
                model.param_count()
            );
        }
        Cmd::Analyze {
            model,
            calib,
            out_similarity,
            out_stats,
        } => {
            let model = load_model(&model)?;
            let stream = calib.load()?;
            let traces = record_traces(&model, &stream)?;
            let sim = similarity_matrix(&traces)?;
            let stats = layer_stats(&traces)?;
            write_similarity_csv(&sim, fs::File::create(&out_similarity)?)?;
            write_stats_csv(&stats, fs::File::create(&out_stats)?)?;
            eprintln!(
                "wrote {} and {}",
                out_similarity.display(),
                out_stats.display()
            );
        }
        Cmd::Compress {
            model,
            calib,
            sparsity,
            lambda_scale,
            seed: _seed, // compression is deterministic; kept for interface stability
            out,
            report,
        } => {
            let dense = load_model(&model)?;
            let stream = calib.load()?;
            let plan = plan_compression(&dense, sparsity, lambda_scale, stream.len(), stream.seq_len())?;
            let (compressed, rep) = compress(&dense, &plan, &stream)?;
            save_model(&compressed, &out)?;
            fs::write(&report, serde_json::to_string_pretty(&rep)?)?;
            eprintln!(
                "compressed {} -> {} layers, sparsity {:.4} (block {:.4})",
                dense.config.n_layers(),
                compressed.config.n_layers(),
                rep.achieved_sparsity,
                rep.achieved_block_sparsity
            );
        }
        Cmd::Eval {
            model,
            baseline,
            calib,
        } => {
            let model = load_model(&model)?;
            let stream = calib.load()?;
            let output = match baseline {
                Some(path) => {
                    let reference = load_model(&path)?;
                    let metrics = logit_divergence(&reference, &model, &stream)?;
                    serde_json::json!({
                        "perplexity": metrics.ppl_model,
                        "baseline_perplexity": metrics.ppl_reference,
                        "logit_mse": metrics.logit_mse,
                        "mean_kl": metrics.mean_kl,
                    })
                }
                None => serde_json::json!({ "perplexity": perplexity(&model, &stream)? }),
            };
            println!("{output}");
        }
        Cmd::Bench {
            model,
            batch,
            seq_len,
            reps,
        } => {
            let model = load_model(&model)?;
            let stats = bench_forward(&model, batch, seq_len, reps)?;
            println!("{}", serde_json::to_string(&stats)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
