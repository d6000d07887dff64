//! Differentiable splat rendering: place a few Gaussians by hand, render
//! them from two cameras, and read screen-space gradients back off the tape.
//!
//! Writes PNGs under target/examples/rasterize_splats/.

use std::path::PathBuf;

use splatsplit::diffcore::{logit, Graph, Tensor};
use splatsplit::imgio;
use splatsplit::raster::render_gaussians;
use splatsplit::splat::{Camera, Vec3};

fn main() -> splatsplit::Result<()> {
    let out = PathBuf::from("target/examples/rasterize_splats");
    std::fs::create_dir_all(&out).map_err(|e| splatsplit::Error::io(&out, e))?;

    // Three anisotropic Gaussians near the origin: red flat disc, green
    // stretched rod, blue sphere behind both.
    let mu = Tensor::new(
        &[3, 3],
        vec![0.0, 0.0, 0.0, 0.45, 0.2, 0.1, -0.3, -0.25, 0.6],
    );
    let log_scale = Tensor::new(
        &[3, 3],
        vec![
            0.25f64.ln(), 0.25f64.ln(), 0.02f64.ln(), // disc
            0.5f64.ln(), 0.04f64.ln(), 0.04f64.ln(),  // rod
            0.18f64.ln(), 0.18f64.ln(), 0.18f64.ln(), // sphere
        ],
    );
    let rot = Tensor::new(
        &[3, 4],
        vec![
            1.0, 0.0, 0.0, 0.0,
            0.92, 0.0, 0.0, 0.38, // rod twisted about z
            1.0, 0.0, 0.0, 0.0,
        ],
    );
    let opacity = Tensor::new(&[3], vec![logit(0.9), logit(0.8), logit(0.95)]);
    let color = Tensor::new(
        &[3, 3],
        vec![0.9, 0.15, 0.1, 0.1, 0.8, 0.2, 0.2, 0.3, 0.95],
    );

    for (tag, eye) in [("front", [0.0, -3.5, 0.4]), ("side", [3.0, -1.8, 1.2])] {
        let cam = Camera::look_at(
            Vec3(eye),
            Vec3([0.0, 0.0, 0.2]),
            Vec3([0.0, 0.0, 1.0]),
            96.0,
            96.0,
            96,
            96,
        );

        let g: Graph<f64> = Graph::new();
        let mu_v = g.leaf(mu.clone(), true);
        let ls_v = g.leaf(log_scale.clone(), true);
        let rot_v = g.leaf(rot.clone(), true);
        let alpha = g.leaf(opacity.clone(), true).sigmoid();
        let col_v = g.leaf(color.clone(), true);
        let (img, aux) = render_gaussians(&mu_v, &ls_v, &rot_v, &alpha, &col_v, &cam, [0.0; 3]);

        // Any scalar drives backward; mean() stands in for a real loss.
        g.backward(&img.mean());

        let aux = aux.borrow();
        println!("camera {tag}:");
        for i in 0..3 {
            println!(
                "  gaussian {i}: coverage {:.4}, blend weight {:.4}, d/d(mean2d) = ({:+.2e}, {:+.2e})",
                aux.coverage[i], aux.contrib[i], aux.grad_mean2d[i][0], aux.grad_mean2d[i][1]
            );
        }

        let path = out.join(format!("{tag}.png"));
        imgio::save_rgb(&path, &img.value().cast::<f32>())?;
        println!("  wrote {}", path.display());
    }
    Ok(())
}
