//! Superpixel-aware mask refinement on a generated scene.
//!
//! Segments one training image, then repairs a deliberately degraded
//! occluder mask by flooding any segment whose pixels vote for it.
//! Writes PNGs under target/examples/superpixel_refine/.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatsplit::diffcore::Tensor;
use splatsplit::harness::{generate_scene, iou, SceneConfig};
use splatsplit::imgio;
use splatsplit::maskgen::{coverage_ratio, label_colors, refine_mask, slic};

fn main() -> splatsplit::Result<()> {
    let out = PathBuf::from("target/examples/superpixel_refine");
    std::fs::create_dir_all(&out).map_err(|e| splatsplit::Error::io(&out, e))?;

    let cfg = SceneConfig { n_views: 4, occluder_coverage: 0.2, ..SceneConfig::default() };
    let scene = generate_scene(&cfg)?;
    let image = &scene.dataset.images[0];
    let gt_mask = &scene.dataset.masks[0];

    let sp = slic(image, 96)?;
    println!("{} superpixels over {}x{}", sp.count, sp.w, sp.h);

    // Degrade the true mask: drop 40% of its pixels, sprinkle 2% speckle.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noisy: Tensor<f32> = Tensor::from_fn(gt_mask.shape(), |i| {
        if gt_mask.data()[i] > 0.5 {
            if rng.gen_bool(0.4) { 0.1 } else { 0.9 }
        } else if rng.gen_bool(0.02) {
            0.9
        } else {
            0.1
        }
    });

    let refined = refine_mask(&noisy, &sp);
    println!(
        "IoU vs ground truth: degraded {:.3} -> refined {:.3}",
        iou(&noisy, gt_mask),
        iou(&refined, gt_mask)
    );
    let flooded = coverage_ratio(&splatsplit::maskgen::binarize(&noisy), &sp)
        .iter()
        .filter(|&&r| r >= 0.5)
        .count();
    println!("{flooded} segments flooded solid");

    // Label map as a color quilt for inspection.
    let palette = label_colors(sp.count);
    let quilt = Tensor::from_fn(&[sp.h, sp.w, 3], |i| {
        f32::from(palette[sp.labels[i / 3] as usize][i % 3]) / 255.0
    });

    imgio::save_rgb(&out.join("image.png"), image)?;
    imgio::save_rgb(&out.join("segments.png"), &quilt)?;
    imgio::save_gray(&out.join("mask_degraded.png"), &noisy)?;
    imgio::save_gray(&out.join("mask_refined.png"), &refined)?;
    imgio::save_gray(&out.join("mask_truth.png"), gt_mask)?;
    println!("wrote 5 images to {}", out.display());
    Ok(())
}
