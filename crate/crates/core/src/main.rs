use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use layerfit::config::RunConfig;
use layerfit::gmf::{Ablation, SamplerKind};
use layerfit::metrics::Normalization;
use layerfit::parallel::Execution;
use layerfit::pipeline;
use layerfit::verify::{self, SuiteConfig};
use layerfit::{Error, Result};

#[derive(Parser)]
#[command(name = "layerfit", version = pipeline::VERSION, about = "Desk-scale multi-layer virtual try-on")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic layered-garment dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Train the occlusion network and denoiser on the train split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// base, gol or gol+locc
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Generate try-on images for the test split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Guidance scale (default from the run config).
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// ddpm or ddim
        #[arg(long)]
        sampler: Option<String>,
        /// Run config; defaults to the one beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score generated images with LACD and SSIM.
    Eval {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        band_radius: Option<usize>,
        /// raw or per-pixel
        #[arg(long)]
        norm: Option<Normalization>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run every finite-difference gradient suite.
    Gradcheck {
        /// Suite settings (seeds, first_seed, network_coords, include_networks).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    RunConfig::load_or_default(path)
}

fn run(cli: Cli) -> Result<()> {
    let exec = Execution::Parallel;
    match cli.command {
        Command::GenData { config, out, count } => {
            let config = load_config(config.as_deref())?;
            let n = pipeline::gen_data(&config, &out, count, exec)?;
            log::info!("wrote {n} samples to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            ablation,
        } => {
            let config = pipeline::with_ablation(load_config(config.as_deref())?, ablation);
            let every = (config.train.steps / 20).max(1);
            let summary = pipeline::train(&config, &data, &out, exec, |step, p| {
                if step % every == 0 {
                    log::info!("step {step}: loss {:.5} (denoise {:.5}, occlusion {:.4})", p.total, p.denoise, p.occlusion);
                }
            })?;
            log::info!(
                "trained {} steps on {} samples; loss {:.5} -> {:.5}; run in {}",
                summary.steps,
                summary.samples,
                summary.first_loss,
                summary.final_loss,
                out.display()
            );
        }
        Command::Infer {
            checkpoint,
            data,
            out,
            scale,
            seed,
            sampler,
            config,
        } => {
            let override_cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let mut loaded = pipeline::load_model(&checkpoint, override_cfg)?;
            let sample = &mut loaded.config.sample;
            if let Some(s) = scale {
                sample.guidance_scale = s;
            }
            if let Some(s) = seed {
                sample.seed = s;
            }
            if let Some(s) = sampler {
                sample.sampler = match s.as_str() {
                    "ddpm" => SamplerKind::Ddpm,
                    "ddim" => SamplerKind::Ddim,
                    _ => return Err(Error::Config(format!("unknown sampler {s:?}; expected ddpm or ddim"))),
                };
            }
            loaded.config.validate()?;
            let manifest = pipeline::infer(&loaded, &checkpoint, &data, &out, exec)?;
            log::info!("generated {} images in {}", manifest.samples.len(), out.display());
        }
        Command::Eval {
            gen,
            gt,
            masks,
            out,
            lambda1,
            band_radius,
            norm,
            config,
        } => {
            let mut eval = load_config(config.as_deref())?.eval;
            if let Some(l) = lambda1 {
                eval.lambda1 = l;
            }
            if let Some(r) = band_radius {
                eval.band_radius = r;
            }
            if let Some(n) = norm {
                eval.normalization = n;
            }
            let report = pipeline::eval(&gen, &gt, &masks, &out, &eval)?;
            log::info!(
                "{} samples: LACD {:.5}, SSIM {:.5}; report in {}",
                report.samples.len(),
                report.mean_lacd,
                report.mean_ssim,
                out.display()
            );
        }
        Command::Gradcheck { config, seeds, out } => {
            let mut suite = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_str::<SuiteConfig>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => SuiteConfig::default(),
            };
            if let Some(s) = seeds {
                suite.seeds = s;
            }
            let report = verify::run(&suite, exec)?;
            for c in &report.cases {
                eprintln!(
                    "{} {:<18} seeds {:>3}  max rel err {:.2e}",
                    if c.passed() { "PASS" } else { "FAIL" },
                    c.name,
                    c.seeds,
                    c.max_rel_error
                );
            }
            if let Some(path) = out {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                pipeline::write_json(&path, &report)?;
            }
            report.into_result()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
