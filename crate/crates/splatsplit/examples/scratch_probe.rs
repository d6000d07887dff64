//! Temporary diagnostic, not part of the example set.

use splatsplit::harness::load_dataset;
use splatsplit::trainer::{train, view_outputs, TrainConfig};

fn masked_mean(img: &splatsplit::diffcore::Tensor<f32>, mask: &splatsplit::diffcore::Tensor<f32>, inside: bool) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    let px = mask.numel();
    let ch = img.numel() / px;
    for i in 0..px {
        let m = mask.data()[i] > 0.5;
        if m == inside {
            for c in 0..ch {
                s += f64::from(img.data()[i * ch + c]);
            }
            n += ch as f64;
        }
    }
    s / n.max(1.0)
}

fn l1_masked(a: &splatsplit::diffcore::Tensor<f32>, b: &splatsplit::diffcore::Tensor<f32>, mask: &splatsplit::diffcore::Tensor<f32>, inside: bool) -> f64 {
    let diff = a.zip_map(b, |x, y| (x - y).abs());
    masked_mean(&diff, mask, inside)
}

fn main() -> splatsplit::Result<()> {
    let (data, _) = load_dataset(std::path::Path::new("/tmp/calib/scene_medium3"))?;
    let variant = std::env::args().nth(1).unwrap_or_default();

    let lam_override = std::env::args().nth(2).and_then(|s| s.parse::<f64>().ok());

    for s2 in [100usize, 400, 800] {
        let steps = 600 + s2;
        let mut cfg = TrainConfig { steps, ..TrainConfig::default() };
        cfg.stages.fractions = [600.0 / steps as f64, 1.0 - 600.0 / steps as f64, 0.0];
        cfg.densify.from_step = steps + 1; // isolate the mask/transient dynamics
        cfg.eval_every = steps; // quiet
        match variant.as_str() {
            "lr5" => cfg.lr.networks = 5e-3,
            "seeds" => cfg.n_transient_seeds = 120,
            "flip" => cfg.loss.fit_anchor_on_mask = true,
            "bench" => {
                cfg.lr.networks = 1e-2;
                cfg.lr.embeddings = 5e-3;
                cfg.n_transient_seeds = 120;
            }
            "reg05" | "reg1" | "reg2" => {
                cfg.lr.networks = 1e-2;
                cfg.lr.embeddings = 5e-3;
                cfg.n_transient_seeds = 120;
                cfg.loss.lambda_mask_reg = match variant.as_str() {
                    "reg05" => 0.05,
                    "reg1" => 0.1,
                    _ => 0.2,
                };
            }
            _ => {}
        }
        if let Some(lam) = lam_override {
            cfg.loss.lambda_mask_reg = lam;
        }
        cfg.validate()?;
        let run = train(&data, &cfg)?;

        let v = 1; // a training view
        let vo = view_outputs(&run.model, &data, v, cfg.n_superpixels, [0.0; 3])?;
        let gtm = &data.masks[v];
        let gt = &data.images[v];
        let (mut inter, mut uni) = (0.0f64, 0.0f64);
        for (a, b) in vo.m_s.data().iter().zip(gtm.data()) {
            let (a, b) = (*a > 0.5, *b > 0.5);
            inter += f64::from(u8::from(a && b));
            uni += f64::from(u8::from(a || b));
        }
        println!(
            "s2={s2:4}: m_o occ {:.3} clean {:.3} | t-l1 occ {:.3} clean {:.3} | s-l1 occ {:.3} clean {:.3} | m_s frac {:.3} iou {:.3}",
            masked_mean(&vo.m_o, gtm, true),
            masked_mean(&vo.m_o, gtm, false),
            l1_masked(&vo.transient_img, gt, gtm, true),
            l1_masked(&vo.transient_img, gt, gtm, false),
            l1_masked(&vo.static_img, gt, gtm, true),
            l1_masked(&vo.static_img, gt, gtm, false),
            vo.m_s.data().iter().sum::<f32>() / vo.m_s.numel() as f32,
            inter / uni.max(1.0),
        );
    }
    Ok(())
}
