//! Finite-difference verification of reverse-mode gradients.
//!
//! Analytic gradients are compared against central differences computed from
//! two forward evaluations per coordinate. Runs at f64: with step h = 1e-5
//! the truncation error of the central difference is O(h^2) = 1e-10, far
//! below the tolerances asserted by callers, while f32 would drown in
//! rounding noise.

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Central-difference step. Chosen so h^2 (truncation) and eps/h (rounding
/// at f64) are both far below a 1e-6 relative tolerance.
pub const FD_STEP: f64 = 1e-5;

/// A scalar-valued function of several tensor inputs, rebuilt on a fresh
/// graph per evaluation.
pub type ScalarFn = dyn Fn(&Graph<f64>, &[Var<f64>]) -> Var<f64>;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Cap on coordinates checked per input; larger inputs are subsampled
    /// with a deterministic stride. `None` checks everything.
    pub max_coords_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: FD_STEP, max_coords_per_input: None }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic - central| / max(1, |central|).
    pub max_rel_err: f64,
    /// (input index, flat coordinate) where the max occurred.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub central_at_worst: f64,
    pub coords_checked: usize,
}

fn eval(f: &ScalarFn, inputs: &[Tensor<f64>], requires: bool) -> (Graph<f64>, Vec<Var<f64>>, Var<f64>) {
    let g: Graph<f64> = Graph::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.leaf(t.clone(), requires)).collect();
    let out = f(&g, &vars);
    assert_eq!(out.numel(), 1, "grad check function must return a scalar");
    (g, vars, out)
}

/// Compare reverse-mode gradients of `f` against central differences at the
/// given inputs. Inputs should avoid non-smooth points (kinks of |x|, clamp
/// boundaries) since the two sides disagree there by construction.
pub fn check_gradients(
    f: &ScalarFn,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let (g, vars, out) = eval(f, inputs, true);
    g.backward(&out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        central_at_worst: 0.0,
        coords_checked: 0,
    };
    let h = opts.step;

    for (ii, input) in inputs.iter().enumerate() {
        let n = input.numel();
        if n == 0 {
            continue;
        }
        let stride = match opts.max_coords_per_input {
            Some(cap) if n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for coord in (0..n).step_by(stride) {
            let mut plus = inputs.to_vec();
            plus[ii].data_mut()[coord] += h;
            let (_, _, fp) = eval(f, &plus, false);
            let mut minus = inputs.to_vec();
            minus[ii].data_mut()[coord] -= h;
            let (_, _, fm) = eval(f, &minus, false);
            let central = (fp.value().item() - fm.value().item()) / (2.0 * h);
            let a = analytic[ii].data()[coord];
            let rel = (a - central).abs() / central.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ii, coord);
                report.analytic_at_worst = a;
                report.central_at_worst = central;
            }
        }
    }
    report
}

/// Assert wrapper: panics with the offending coordinate when the worst
/// relative error exceeds `tol`.
pub fn assert_gradients_match(f: &ScalarFn, inputs: &[Tensor<f64>], tol: f64) {
    assert_gradients_match_with(f, inputs, tol, &GradCheckOptions::default());
}

pub fn assert_gradients_match_with(
    f: &ScalarFn,
    inputs: &[Tensor<f64>],
    tol: f64,
    opts: &GradCheckOptions,
) {
    let report = check_gradients(f, inputs, opts);
    assert!(
        report.max_rel_err <= tol,
        "gradient mismatch: rel err {:.3e} > {:.1e} at input {} coord {} (analytic {:.9e}, central {:.9e}; {} coords checked)",
        report.max_rel_err,
        tol,
        report.worst.0,
        report.worst.1,
        report.analytic_at_worst,
        report.central_at_worst,
        report.coords_checked
    );
}

#[cfg(test)]
mod tests {
    use super::super::ops::concat;
    use super::*;

    /// Deterministic quasi-random fill, kept away from zero so tests never
    /// sit on kinks of abs/relu/clamp.
    pub fn offset_fill(shape: &[usize], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| {
            let x = ((i as f64 + 1.3) * 0.7310 + seed).sin() * 0.8;
            if x.abs() < 0.05 {
                0.25 + x
            } else {
                x
            }
        })
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn elementwise_binary_ops() {
        let a = offset_fill(&[2, 3], 0.1);
        let b = offset_fill(&[2, 3], 7.7).map(|x| x + 1.8); // keep divisor away from 0
        assert_gradients_match(
            &|_, v| v[0].add(&v[1]).mul(&v[0]).sub(&v[1].square()).div(&v[1]).sum(),
            &[a, b],
            TOL,
        );
    }

    #[test]
    fn unary_chain() {
        let x = offset_fill(&[5], 2.2).map(|v| v * 0.5 + 1.6); // positive domain for ln/sqrt
        assert_gradients_match(
            &|_, v| {
                let y = v[0].ln().exp().sqrt().sigmoid();
                y.mul(&v[0].abs()).mean()
            },
            &[x],
            TOL,
        );
    }

    #[test]
    fn relu_clamp_powf_away_from_kinks() {
        let x = Tensor::new(&[4], vec![-1.3, -0.4, 0.6, 1.7]);
        assert_gradients_match(
            &|_, v| {
                let r = v[0].relu().add_scalar(0.3).powf(1.7);
                r.add(&v[0].clamp(-1.0, 1.0)).sum()
            },
            &[x],
            TOL,
        );
    }

    #[test]
    fn affine_and_reductions() {
        let x = offset_fill(&[3, 4], 5.0);
        assert_gradients_match(
            &|_, v| v[0].affine(2.5, -0.7).square().mean(),
            &[x],
            TOL,
        );
    }

    #[test]
    fn dense_layer_ops() {
        let x = offset_fill(&[3, 4], 0.4);
        let w = offset_fill(&[4, 2], 1.9);
        let b = offset_fill(&[2], 3.3);
        assert_gradients_match(
            &|_, v| v[0].matmul(&v[1]).add_bias(&v[2]).sigmoid().sum(),
            &[x, w, b],
            TOL,
        );
    }

    #[test]
    fn row_and_column_broadcasts() {
        let a = offset_fill(&[4, 3], 0.9);
        let col = offset_fill(&[4], 4.1);
        let row = offset_fill(&[3], 6.3);
        assert_gradients_match(
            &|_, v| {
                let bro = v[2].broadcast_row(4);
                v[0].mul_col(&v[1]).mul(&bro).sum()
            },
            &[a, col, row],
            TOL,
        );
    }

    #[test]
    fn row_normalization() {
        let x = offset_fill(&[3, 3], 8.8);
        assert_gradients_match(
            &|_, v| {
                let dirs = v[0].normalize_rows();
                dirs.mul(&dirs.affine(1.0, 0.2)).sum()
            },
            &[x],
            TOL,
        );
    }

    #[test]
    fn shape_ops_concat_slice_reshape() {
        let a = offset_fill(&[2, 3], 0.2);
        let b = offset_fill(&[2, 2], 1.1);
        assert_gradients_match(
            &|_, v| {
                let cat = concat(1, &[&v[0], &v[1]]);
                let left = cat.slice(1, 1, 3).reshape(&[6]);
                left.square().sum()
            },
            &[a, b],
            TOL,
        );
    }

    #[test]
    fn conv_stack_with_upsample_and_pads() {
        let x = offset_fill(&[2, 6, 6], 0.5);
        let w1 = offset_fill(&[3, 2, 3, 3], 1.5).map(|v| v * 0.4);
        let w2 = offset_fill(&[1, 3, 3, 3], 2.5).map(|v| v * 0.4);
        assert_gradients_match(
            &|_, v| {
                let h1 = v[0].conv2d(&v[1], 2, 1).relu(); // [3,3,3]
                let h2 = h1.upsample2_nearest(); // [3,6,6]
                let h3 = h2.pad2d(1, 0, 0, 1).crop2d(0, 0, 6, 6);
                h3.conv2d(&v[2], 1, 1).sigmoid().mean()
            },
            &[x, w1, w2],
            TOL,
        );
    }

    #[test]
    fn channel_bias_and_permutes() {
        let img = offset_fill(&[4, 5, 3], 3.1); // hwc
        let bias = offset_fill(&[3], 0.8);
        assert_gradients_match(
            &|_, v| {
                let chw = v[0].hwc_to_chw().add_chan_bias(&v[1]);
                chw.chw_to_hwc().square().mean()
            },
            &[img, bias],
            TOL,
        );
    }

    #[test]
    fn fixed_kernel_filter() {
        let x = offset_fill(&[2, 5, 5], 1.2);
        assert_gradients_match(
            &|_, v| {
                let k = Tensor::new(&[3, 3], vec![0.05, 0.1, 0.05, 0.1, 0.4, 0.1, 0.05, 0.1, 0.05]);
                v[0].filter2d_valid(&k).square().sum()
            },
            &[x],
            TOL,
        );
    }

    #[test]
    fn positional_encoding() {
        let x = offset_fill(&[3, 2], 4.4);
        const FREQS: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
        assert_gradients_match(
            &|_, v| v[0].posenc(&FREQS, true).square().sum(),
            &[x.clone()],
            TOL,
        );
        assert_gradients_match(
            &|_, v| v[0].posenc(&FREQS, false).sum(),
            &[x],
            TOL,
        );
    }

    #[test]
    fn l1_distance_of_linear_map_matches_central_differences() {
        let a = offset_fill(&[4, 3], 0.6);
        let x = offset_fill(&[3, 2], 2.9);
        let y = offset_fill(&[4, 2], 5.5).map(|v| v + 3.0); // keep |Ax - y| off its kink
        assert_gradients_match(
            &|_, v| v[0].matmul(&v[1]).sub(&v[2]).abs().mean(),
            &[a, x, y],
            TOL,
        );
    }

    #[test]
    fn stop_grad_zeroes_upstream_gradient() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(offset_fill(&[4], 1.0), true);
        let y = x.square();
        let frozen = y.stop_grad();
        assert_eq!(frozen.value(), y.value());
        // loss = sg(x^2) * x: gradient must be exactly x^2, no 2x * x term.
        let loss = frozen.mul(&x).sum();
        g.backward(&loss);
        let got = x.grad().unwrap();
        let want = x.value().map(|v| v * v);
        assert_eq!(got, want);
    }

    #[test]
    fn subsampling_caps_coordinate_count() {
        let x = offset_fill(&[40], 0.3);
        let opts = GradCheckOptions { step: FD_STEP, max_coords_per_input: Some(10) };
        let report = check_gradients(&|_, v| v[0].square().sum(), &[x], &opts);
        assert!(report.coords_checked <= 10);
        assert!(report.max_rel_err < TOL);
    }

    #[test]
    fn report_flags_a_wrong_gradient() {
        // A custom op lying about its derivative must be caught.
        let x = Tensor::new(&[2], vec![0.7, -0.3]);
        let report = check_gradients(
            &|g, v| {
                let val = v[0].value().map(|a| a * a);
                let wrong = g.custom_op(&[&v[0]], val, |gout| vec![Some(gout.scale(3.0))]);
                wrong.sum()
            },
            &[x],
            &GradCheckOptions::default(),
        );
        assert!(report.max_rel_err > 0.1, "bogus gradient slipped through: {report:?}");
    }
}
