//! Loss terms: masked composition of the two renders, L1, windowed
//! structural similarity, mask supervision and regularization, the
//! transient anchoring term, and the uncertainty loss.
//!
//! Stage losses are compositions of these pieces: the initial stage fits
//! the static render alone, the middle stage adds the transient anchor,
//! and the joint stage trains the composite with mask terms.

use crate::diffcore::{Scalar, Tensor, Var};

/// Weight of the structural term against L1 in photometric losses.
pub const LAMBDA_SSIM: f64 = 0.2;
/// Weight of the mask supervision term.
pub const LAMBDA_MASK_BCE: f64 = 3e-2;
/// Weight of the mask magnitude regularizer.
pub const LAMBDA_MASK_REG: f64 = 5e-4;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Stability constants for unit dynamic range: (0.01)^2 and (0.03)^2.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Predictions are clamped this far inside (0,1) before taking logs.
pub const BCE_EPS: f64 = 1e-6;

/// Blend the two renders with a per-pixel mask: mask 1 shows the transient
/// image, mask 0 the static one. `mask` is `[h,w]`, images `[h,w,3]`.
pub fn compose<T: Scalar>(mask: &Var<T>, transient: &Var<T>, statics: &Var<T>) -> Var<T> {
    let shape = transient.shape();
    assert_eq!(shape, statics.shape(), "render sizes differ");
    assert_eq!(&shape[..2], mask.shape().as_slice(), "mask size vs images");
    let (h, w) = (shape[0], shape[1]);
    let m = mask.reshape(&[h * w]);
    let inv = m.affine(-T::one(), T::one());
    transient
        .reshape(&[h * w, 3])
        .mul_col(&m)
        .add(&statics.reshape(&[h * w, 3]).mul_col(&inv))
        .reshape(&[h, w, 3])
}

pub fn l1<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    a.sub(b).abs().mean()
}

/// Normalized Gaussian window, cropped to the image when it is smaller
/// than the standard 11x11 support.
fn gaussian_window<T: Scalar>(kh: usize, kw: usize) -> Tensor<T> {
    let g1 = |k: usize| -> Vec<f64> {
        let c = (k as f64 - 1.0) / 2.0;
        (0..k)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
            .collect()
    };
    let (gy, gx) = (g1(kh), g1(kw));
    let mut data = Vec::with_capacity(kh * kw);
    let mut sum = 0.0;
    for y in &gy {
        for x in &gx {
            data.push(y * x);
            sum += y * x;
        }
    }
    Tensor::new(&[kh, kw], data.into_iter().map(|v| T::c(v / sum)).collect())
}

/// Mean structural similarity between two `[h,w,3]` images over all valid
/// window positions and channels. 1 for identical inputs.
pub fn ssim<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let shape = a.shape();
    assert_eq!(shape, b.shape(), "image sizes differ");
    let (h, w) = (shape[0], shape[1]);
    let win = gaussian_window::<T>(SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let (c1, c2) = (T::c(SSIM_C1), T::c(SSIM_C2));

    let x = a.hwc_to_chw();
    let y = b.hwc_to_chw();
    let mu_x = x.filter2d_valid(&win);
    let mu_y = y.filter2d_valid(&win);
    let mu_xx = mu_x.mul(&mu_x);
    let mu_yy = mu_y.mul(&mu_y);
    let mu_xy = mu_x.mul(&mu_y);
    let var_x = x.mul(&x).filter2d_valid(&win).sub(&mu_xx);
    let var_y = y.mul(&y).filter2d_valid(&win).sub(&mu_yy);
    let cov = x.mul(&y).filter2d_valid(&win).sub(&mu_xy);

    let num = mu_xy.scale(T::c(2.0)).add_scalar(c1).mul(&cov.scale(T::c(2.0)).add_scalar(c2));
    let den = mu_xx.add(&mu_yy).add_scalar(c1).mul(&var_x.add(&var_y).add_scalar(c2));
    num.div(&den).mean()
}

/// Structural dissimilarity in [0,1]: zero for identical images.
pub fn dssim<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    ssim(a, b).affine(T::c(-0.5), T::c(0.5))
}

/// `(1-lambda) L1 + lambda D-SSIM` against a fixed target image.
pub fn photometric<T: Scalar>(img: &Var<T>, gt: &Tensor<T>, lambda: f64) -> Var<T> {
    let target = img.graph().constant(gt.clone());
    l1(img, &target)
        .scale(T::c(1.0 - lambda))
        .add(&dssim(img, &target).scale(T::c(lambda)))
}

/// Mean binary cross entropy of a soft prediction against a fixed target,
/// with predictions clamped away from the log singularities. Saturated
/// predictions pass no gradient.
pub fn bce<T: Scalar>(pred: &Var<T>, target: &Tensor<T>) -> Var<T> {
    assert_eq!(pred.shape(), target.shape().to_vec(), "prediction vs target size");
    let g = pred.graph();
    let t = g.constant(target.clone());
    let t_inv = t.affine(-T::one(), T::one());
    let p = pred.clamp(T::c(BCE_EPS), T::c(1.0 - BCE_EPS));
    let p_inv = p.affine(-T::one(), T::one());
    t.mul(&p.ln()).add(&t_inv.mul(&p_inv.ln())).mean().neg()
}

/// Initial-stage loss: the static render must explain the whole image.
pub fn loss_initial<T: Scalar>(static_img: &Var<T>, gt: &Tensor<T>, lambda: f64) -> Var<T> {
    photometric(static_img, gt, lambda)
}

/// Joint loss: photometric error of the masked composite plus mask
/// supervision toward its own superpixel refinement and a magnitude
/// regularizer keeping the mask from claiming everything.
pub fn loss_joint<T: Scalar>(
    composed: &Var<T>,
    gt: &Tensor<T>,
    m_o: &Var<T>,
    m_s: &Tensor<T>,
    lambda: f64,
    lambda_bce: f64,
    lambda_reg: f64,
) -> Var<T> {
    photometric(composed, gt, lambda)
        .add(&bce(m_o, m_s).scale(T::c(lambda_bce)))
        .add(&m_o.square().mean().scale(T::c(lambda_reg)))
}

/// Middle-stage anchor: L1 between the transient render and the image,
/// restricted by the refined mask. The shipped form weights by the mask
/// complement; `fit_on_mask` flips to weighting by the mask itself.
pub fn transient_anchor<T: Scalar>(
    transient_img: &Var<T>,
    gt: &Tensor<T>,
    m_s: &Tensor<T>,
    fit_on_mask: bool,
) -> Var<T> {
    let shape = transient_img.shape();
    let (h, w) = (shape[0], shape[1]);
    let weight = if fit_on_mask {
        m_s.clone()
    } else {
        m_s.map(|v| T::one() - v)
    };
    let g = transient_img.graph();
    let wv = g.constant(weight.reshaped(&[h * w]));
    let target = g.constant(gt.clone());
    transient_img
        .sub(&target)
        .reshape(&[h * w, 3])
        .mul_col(&wv)
        .abs()
        .mean()
}

/// Uncertainty supervision: the composited per-pixel uncertainty, gated by
/// the refined mask, should be one inside the mask. Outside the mask both
/// prediction and target are zero, so static regions contribute nothing.
pub fn uncertainty_loss<T: Scalar>(uncertainty_map: &Var<T>, m_s: &Tensor<T>) -> Var<T> {
    let g = uncertainty_map.graph();
    let gate = g.constant(m_s.clone());
    bce(&uncertainty_map.mul(&gate), m_s)
}
