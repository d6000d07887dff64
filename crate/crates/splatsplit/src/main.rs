//! Thin command-line front end: every subcommand is a few lines of argument
//! plumbing around the library. Exit code 2 flags bad input (arguments,
//! configs, malformed files), 1 flags runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use splatsplit::harness;
use splatsplit::maskgen::{label_colors, slic};
use splatsplit::trainer::{self, TrainConfig};
use splatsplit::{imgio, Error};

#[derive(Parser)]
#[command(name = "splatsplit", version, about = "static/transient Gaussian splat decomposition")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct SceneArgs {
    /// Dataset directory (as written by genscene).
    #[arg(long)]
    scene: PathBuf,
    /// Training config TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic benchmark scene with exact occluder masks.
    Genscene {
        #[arg(long)]
        out: PathBuf,
        /// light, medium, or heavy occlusion.
        #[arg(long, default_value = "medium")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        views: Option<usize>,
        /// Square image side in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        gaussians: Option<usize>,
        /// Occluder coverage fraction, overriding the preset.
        #[arg(long)]
        coverage: Option<f64>,
    },
    /// Run the staged optimization on a scene directory.
    Train {
        #[command(flatten)]
        scene: SceneArgs,
        /// Output directory for checkpoint, metrics and event log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render static, transient and composed images from a checkpoint.
    Render {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Single view index; all views when omitted.
        #[arg(long)]
        view: Option<usize>,
    },
    /// Score a checkpoint: novel-view quality, mask quality, memory.
    Eval {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the mask pipeline stages for one view as images.
    Maskviz {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: usize,
    },
    /// Configuration helpers.
    Config {
        /// Print the default training config as TOML.
        #[arg(long)]
        dump: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn load_train_config(path: &Option<PathBuf>) -> Result<TrainConfig, Error> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            trainer::parse_config(&text)
        }
    }
}

fn ensure_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn run(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::Genscene { out, preset, seed, views, size, gaussians, coverage } => {
            let mut cfg = harness::preset(&preset)
                .ok_or_else(|| Error::Config(format!("unknown preset {preset}")))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(v) = views {
                cfg.n_views = v;
            }
            if let Some(s) = size {
                cfg.width = s;
                cfg.height = s;
            }
            if let Some(g) = gaussians {
                cfg.n_gaussians = g;
            }
            if let Some(c) = coverage {
                cfg.occluder_coverage = c;
            }
            let scene = harness::generate_scene(&cfg)?;
            harness::save_dataset(&scene.dataset, &cfg, &out)?;
            println!(
                "wrote {} views of {}x{} ({} Gaussians, {:.0}% occlusion) to {}",
                cfg.n_views,
                cfg.width,
                cfg.height,
                cfg.n_gaussians,
                cfg.occluder_coverage * 100.0,
                out.display()
            );
            Ok(())
        }

        Cmd::Train { scene, out, seed } => {
            let (data, _) = harness::load_dataset(&scene.scene)?;
            let mut cfg = load_train_config(&scene.config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            ensure_dir(&out)?;
            let result = trainer::train_with(&data, &cfg, |row| {
                println!(
                    "step {:>6} stage {} loss {:.5} psnr {:.2} dB ({} Gaussians)",
                    row.step, row.stage, row.loss, row.eval_psnr, row.n_static
                );
            })?;
            trainer::save_checkpoint(&result.model, &out.join("model.ckpt"))?;
            let csv = trainer::metrics_csv(&result.metrics);
            std::fs::write(out.join("metrics.csv"), csv)
                .map_err(|e| Error::io(out.join("metrics.csv"), e))?;
            let events: String =
                result.densify_events.iter().map(|e| format!("{e}\n")).collect();
            std::fs::write(out.join("events.log"), events)
                .map_err(|e| Error::io(out.join("events.log"), e))?;
            std::fs::write(out.join("config.toml"), toml_for(&cfg))
                .map_err(|e| Error::io(out.join("config.toml"), e))?;
            println!("checkpoint, metrics.csv, events.log written to {}", out.display());
            Ok(())
        }

        Cmd::Render { scene, checkpoint, out, view } => {
            let (data, _) = harness::load_dataset(&scene.scene)?;
            let cfg = load_train_config(&scene.config)?;
            let model = trainer::load_checkpoint(&checkpoint)?;
            ensure_dir(&out)?;
            let views: Vec<usize> = match view {
                Some(v) if v >= data.n_views() => {
                    return Err(Error::Config(format!(
                        "view {v} out of range (dataset has {})",
                        data.n_views()
                    )))
                }
                Some(v) => vec![v],
                None => (0..data.n_views()).collect(),
            };
            let bg = cfg.background.map(|v| v as f32);
            for v in views {
                let o = trainer::view_outputs(&model, &data, v, cfg.n_superpixels, bg)?;
                imgio::save_rgb(&out.join(format!("static_{v:04}.png")), &o.static_img)?;
                imgio::save_rgb(&out.join(format!("transient_{v:04}.png")), &o.transient_img)?;
                imgio::save_rgb(&out.join(format!("composed_{v:04}.png")), &o.composed)?;
            }
            println!("renders written to {}", out.display());
            Ok(())
        }

        Cmd::Eval { scene, checkpoint, out } => {
            let (data, _) = harness::load_dataset(&scene.scene)?;
            let cfg = load_train_config(&scene.config)?;
            let model = trainer::load_checkpoint(&checkpoint)?;
            let report = harness::evaluate(
                &model,
                &data,
                cfg.holdout_every,
                cfg.n_superpixels,
                cfg.background.map(|v| v as f32),
            )?;
            println!("{report}");
            if let Some(path) = out {
                std::fs::write(&path, format!("{report}\n")).map_err(|e| Error::io(&path, e))?;
            }
            Ok(())
        }

        Cmd::Maskviz { scene, checkpoint, out, view } => {
            let (data, _) = harness::load_dataset(&scene.scene)?;
            let cfg = load_train_config(&scene.config)?;
            let model = trainer::load_checkpoint(&checkpoint)?;
            if view >= data.n_views() {
                return Err(Error::Config(format!(
                    "view {view} out of range (dataset has {})",
                    data.n_views()
                )));
            }
            ensure_dir(&out)?;
            let bg = cfg.background.map(|v| v as f32);
            let o = trainer::view_outputs(&model, &data, view, cfg.n_superpixels, bg)?;
            imgio::save_gray(&out.join(format!("mask_soft_{view:04}.png")), &o.m_o)?;
            imgio::save_gray(&out.join(format!("mask_refined_{view:04}.png")), &o.m_s)?;

            let gt = &data.images[view];
            let sp = slic(gt, cfg.n_superpixels)?;
            let palette = label_colors(sp.count);
            let mut seg = splatsplit::diffcore::Tensor::zeros(&[sp.h, sp.w, 3]);
            for p in 0..sp.h * sp.w {
                let c = palette[sp.labels[p] as usize];
                for k in 0..3 {
                    seg.data_mut()[p * 3 + k] = c[k] as f32 / 255.0;
                }
            }
            imgio::save_rgb(&out.join(format!("superpixels_{view:04}.png")), &seg)?;

            let mut residual = splatsplit::diffcore::Tensor::zeros(&[sp.h, sp.w]);
            for p in 0..sp.h * sp.w {
                let d: f32 = (0..3)
                    .map(|c| (gt.data()[p * 3 + c] - o.static_img.data()[p * 3 + c]).abs())
                    .sum();
                residual.data_mut()[p] = (d / 3.0).min(1.0);
            }
            imgio::save_gray(&out.join(format!("residual_{view:04}.png")), &residual)?;
            println!("mask visualizations written to {}", out.display());
            Ok(())
        }

        Cmd::Config { dump } => {
            if !dump {
                return Err(Error::Config("nothing to do; try --dump".to_string()));
            }
            print!("{}", trainer::default_config_toml());
            Ok(())
        }
    }
}

fn toml_for(cfg: &TrainConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}
