//! End-to-end miniature: generate an occluded scene, run the three-stage
//! decomposition for a few hundred steps, and inspect what came out.
//!
//! Kept deliberately small (32x32, 8 views) so it finishes in seconds; the
//! benchmark-scale settings live in the integration tests and the CLI
//! defaults. Writes PNGs under target/examples/train_quickstart/.

use std::path::PathBuf;

use splatsplit::harness::{evaluate, generate_scene, SceneConfig};
use splatsplit::imgio;
use splatsplit::trainer::{train, view_outputs, TrainConfig};

fn main() -> splatsplit::Result<()> {
    let out = PathBuf::from("target/examples/train_quickstart");
    std::fs::create_dir_all(&out).map_err(|e| splatsplit::Error::io(&out, e))?;

    let scene_cfg = SceneConfig {
        width: 32,
        height: 32,
        n_views: 8,
        n_gaussians: 120,
        occluder_coverage: 0.15,
        seed: 5,
        ..SceneConfig::default()
    };
    let scene = generate_scene(&scene_cfg)?;

    let mut cfg = TrainConfig { steps: 400, n_static_init: 100, n_transient_seeds: 30, ..TrainConfig::default() };
    cfg.eval_every = 100;
    cfg.n_superpixels = 48;
    cfg.densify.from_step = 120;
    cfg.densify.interval = 60;
    cfg.validate()?;

    println!("training {} steps (stages of {:?})...", cfg.steps, cfg.stage_steps());
    let run = train(&scene.dataset, &cfg)?;
    for row in &run.metrics {
        println!(
            "  step {:>4} stage {}: loss {:.4}, held-out psnr {:.2} dB, {} gaussians",
            row.step, row.stage, row.loss, row.eval_psnr, row.n_static
        );
    }
    println!(
        "{} densify events, {} non-finite gradients skipped",
        run.densify_events.len(),
        run.skipped_grads
    );

    let bg = cfg.background.map(|v| v as f32);
    let report = evaluate(&run.model, &scene.dataset, cfg.holdout_every, cfg.n_superpixels, bg)?;
    println!("{report}");

    // Decomposition for one training view: what the static field keeps,
    // what the transient field absorbs, and the mask that separates them.
    let v = scene.dataset.train_views(cfg.holdout_every)[1];
    let vo = view_outputs(&run.model, &scene.dataset, v, cfg.n_superpixels, bg)?;
    imgio::save_rgb(&out.join("input.png"), &scene.dataset.images[v])?;
    imgio::save_rgb(&out.join("static.png"), &vo.static_img)?;
    imgio::save_rgb(&out.join("transient.png"), &vo.transient_img)?;
    imgio::save_rgb(&out.join("composed.png"), &vo.composed)?;
    imgio::save_gray(&out.join("mask_soft.png"), &vo.m_o)?;
    imgio::save_gray(&out.join("mask_refined.png"), &vo.m_s)?;
    println!("wrote view-{v} decomposition to {}", out.display());
    Ok(())
}
