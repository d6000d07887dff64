//! Learned transient masks and their superpixel refinement.
//!
//! A small encoder/decoder network reads the training image together with
//! the residual against the static render and produces a soft mask of
//! likely occluder pixels. The soft mask is then snapped to superpixel
//! boundaries: segments where the binarized mask wins a majority vote are
//! filled whole, others keep the binarized values. The refined mask is
//! binary, never smaller than the binarized input, and stable under
//! re-refinement.

use rand::Rng;

use crate::diffcore::{concat, Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

// ----- mask network -----

/// Encoder widths after each stride-2 stage. Input is 6 channels: the
/// image and its absolute residual against the (detached) static render.
const ENC_CH: [usize; 3] = [8, 16, 32];
pub const MASK_IN_CH: usize = 6;

/// Convolutional mask head. Three stride-2 stages down, three
/// nearest-upsample stages back with skip connections, then a 1x1 sigmoid
/// head over the last features concatenated with the raw input. Inputs are
/// padded to a multiple of 8 and the output cropped back.
#[derive(Debug, Clone)]
pub struct MaskNet<T> {
    /// Stride-2 encoder convolutions, 3x3, (weight, bias).
    pub enc: Vec<(Tensor<T>, Tensor<T>)>,
    /// Post-upsample decoder convolutions over concatenated skips, 3x3.
    pub dec: Vec<(Tensor<T>, Tensor<T>)>,
    /// 1x1 head producing mask logits.
    pub head: (Tensor<T>, Tensor<T>),
}

/// Head-weight prior on the raw residual channels: a pixel that disagrees
/// with the static render leans transient from the first forward pass, so
/// the earliest refined masks flood the high-residual segments instead of
/// a coin-flip pattern. Small enough that a fresh net still reads ~0.5.
const RESIDUAL_PRIOR_W: f64 = 0.12;
/// Matching head bias: agreement leans (just) static.
const RESIDUAL_PRIOR_B: f64 = -0.05;

fn conv_init<T: Scalar>(o: usize, c: usize, k: usize, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    let a = gain * (6.0 / ((c + o) * k * k) as f64).sqrt();
    let data = (0..o * c * k * k).map(|_| T::c(rng.gen_range(-a..a))).collect();
    Tensor::new(&[o, c, k, k], data)
}

impl<T: Scalar> MaskNet<T> {
    /// Evenly-scaled hidden layers; the head starts tiny except for the
    /// residual prior, so a fresh network outputs roughly one half
    /// everywhere with a slight lean that tracks the residual.
    pub fn new(rng: &mut impl Rng) -> Self {
        let mut enc = Vec::new();
        let mut c_in = MASK_IN_CH;
        for &c_out in &ENC_CH {
            enc.push((conv_init(c_out, c_in, 3, 1.0, rng), Tensor::zeros(&[c_out])));
            c_in = c_out;
        }
        // Decoder inputs: upsampled features concatenated with the skip.
        let dec_io = [
            (ENC_CH[2] + ENC_CH[1], ENC_CH[1]),
            (ENC_CH[1] + ENC_CH[0], ENC_CH[0]),
            (ENC_CH[0] + MASK_IN_CH, ENC_CH[0]),
        ];
        let dec = dec_io
            .iter()
            .map(|&(i, o)| (conv_init(o, i, 3, 1.0, rng), Tensor::zeros(&[o])))
            .collect();
        let mut head_w = conv_init(1, ENC_CH[0] + MASK_IN_CH, 1, 0.01, rng);
        for c in 0..3 {
            // The input skip sits after the decoder features; its residual
            // channels are the last three.
            head_w.data_mut()[ENC_CH[0] + 3 + c] = T::c(RESIDUAL_PRIOR_W);
        }
        let head = (head_w, Tensor::full(&[1], T::c(RESIDUAL_PRIOR_B)));
        MaskNet { enc, dec, head }
    }

    pub fn param_count(&self) -> usize {
        let pairs = self.enc.iter().chain(&self.dec).chain(std::iter::once(&self.head));
        pairs.map(|(w, b)| w.numel() + b.numel()).sum()
    }

    pub fn on_graph(&self, g: &Graph<T>, trainable: bool) -> MaskNetVars<T> {
        let lift = |pairs: &[(Tensor<T>, Tensor<T>)]| -> Vec<(Var<T>, Var<T>)> {
            pairs
                .iter()
                .map(|(w, b)| (g.leaf(w.clone(), trainable), g.leaf(b.clone(), trainable)))
                .collect()
        };
        MaskNetVars {
            enc: lift(&self.enc),
            dec: lift(&self.dec),
            head: (
                g.leaf(self.head.0.clone(), trainable),
                g.leaf(self.head.1.clone(), trainable),
            ),
        }
    }
}

pub struct MaskNetVars<T: Scalar> {
    pub enc: Vec<(Var<T>, Var<T>)>,
    pub dec: Vec<(Var<T>, Var<T>)>,
    pub head: (Var<T>, Var<T>),
}

impl<T: Scalar> MaskNetVars<T> {
    /// `[6,h,w]` image-plus-residual to `[h,w]` soft mask in (0,1).
    pub fn forward(&self, input: &Var<T>) -> Var<T> {
        let shape = input.shape();
        assert_eq!(shape[0], MASK_IN_CH, "expected image and residual channels");
        let (h, w) = (shape[1], shape[2]);
        let (ph, pw) = (h.div_ceil(8) * 8 - h, w.div_ceil(8) * 8 - w);
        let x = input.pad2d(0, ph, 0, pw);

        let e1 = x.conv2d(&self.enc[0].0, 2, 1).add_chan_bias(&self.enc[0].1).relu();
        let e2 = e1.conv2d(&self.enc[1].0, 2, 1).add_chan_bias(&self.enc[1].1).relu();
        let e3 = e2.conv2d(&self.enc[2].0, 2, 1).add_chan_bias(&self.enc[2].1).relu();

        let up = |f: &Var<T>, skip: &Var<T>, layer: &(Var<T>, Var<T>)| {
            concat(0, &[&f.upsample2_nearest(), skip])
                .conv2d(&layer.0, 1, 1)
                .add_chan_bias(&layer.1)
                .relu()
        };
        let d3 = up(&e3, &e2, &self.dec[0]);
        let d2 = up(&d3, &e1, &self.dec[1]);
        let d1 = up(&d2, &x, &self.dec[2]);

        concat(0, &[&d1, &x])
            .conv2d(&self.head.0, 1, 0)
            .add_chan_bias(&self.head.1)
            .crop2d(0, 0, h, w)
            .reshape(&[h, w])
            .sigmoid()
    }
}

/// `[6,h,w]` network input from an `[h,w,3]` image and static render. The
/// render enters only through the residual magnitude, as a plain value.
pub fn mask_input<T: Scalar>(gt: &Tensor<T>, rendered: &Tensor<T>) -> Tensor<T> {
    assert_eq!(gt.shape(), rendered.shape(), "image and render sizes differ");
    let (h, w) = (gt.shape()[0], gt.shape()[1]);
    let mut out = Tensor::zeros(&[MASK_IN_CH, h, w]);
    for p in 0..h * w {
        for c in 0..3 {
            let g = gt.data()[p * 3 + c];
            out.data_mut()[c * h * w + p] = g;
            out.data_mut()[(3 + c) * h * w + p] = (g - rendered.data()[p * 3 + c]).abs();
        }
    }
    out
}

// ----- superpixels -----

/// A partition of the image plane into 4-connected segments.
#[derive(Debug, Clone)]
pub struct Superpixels {
    /// Segment id per pixel, row-major, each below `count`.
    pub labels: Vec<u32>,
    pub count: usize,
    pub h: usize,
    pub w: usize,
}

/// Relative weight of spatial distance against color distance.
pub const SLIC_COMPACTNESS: f64 = 10.0;
const SLIC_ITERS: usize = 10;

fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = |u: f64| {
        if u <= 0.04045 {
            u / 12.92
        } else {
            ((u + 0.055) / 1.055).powf(2.4)
        }
    };
    let (r, g, b) = (lin(rgb[0]), lin(rgb[1]), lin(rgb[2]));
    // sRGB D65 primaries, normalized by the white point.
    let x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Superpixel segmentation: local k-means over (lab, xy) features started
/// from an even grid, followed by connectivity enforcement. The result is
/// always a partition into 4-connected segments with a count in
/// `[n_segments/2, 2*n_segments]`; if k-means degenerates past repair the
/// plain grid partition is returned instead.
pub fn slic<T: Scalar>(image: &Tensor<T>, n_segments: usize) -> Result<Superpixels> {
    assert_eq!(image.shape().len(), 3, "expected [h,w,3]");
    assert_eq!(image.shape()[2], 3);
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if n_segments == 0 || n_segments > h * w {
        return Err(Error::Invalid(format!(
            "segment count {n_segments} out of range for a {w}x{h} image"
        )));
    }

    let lab: Vec<[f64; 3]> = (0..h * w)
        .map(|p| {
            srgb_to_lab([
                image.data()[p * 3].f64(),
                image.data()[p * 3 + 1].f64(),
                image.data()[p * 3 + 2].f64(),
            ])
        })
        .collect();

    // Grid layout: nx columns by ny rows, nx >= ny for landscape ties.
    let ny = ((n_segments as f64 * h as f64 / w as f64).sqrt().round() as usize)
        .clamp(1, n_segments.min(h));
    let nx = (n_segments as f64 / ny as f64).round().max(1.0) as usize;
    let nx = nx.min(w);
    let k = nx * ny;

    let grid = |p: usize| -> u32 {
        let (py, px) = (p / w, p % w);
        let gx = (px * nx / w).min(nx - 1);
        let gy = (py * ny / h).min(ny - 1);
        (gy * nx + gx) as u32
    };

    let mut centers: Vec<[f64; 5]> = Vec::with_capacity(k);
    for gy in 0..ny {
        for gx in 0..nx {
            let cx = (gx as f64 + 0.5) * w as f64 / nx as f64;
            let cy = (gy as f64 + 0.5) * h as f64 / ny as f64;
            let p = (cy as usize).min(h - 1) * w + (cx as usize).min(w - 1);
            let l = lab[p];
            centers.push([l[0], l[1], l[2], cx, cy]);
        }
    }

    let s = ((h * w) as f64 / k as f64).sqrt().max(1.0);
    let spatial = (SLIC_COMPACTNESS / s) * (SLIC_COMPACTNESS / s);
    let mut labels: Vec<u32> = (0..h * w).map(grid).collect();
    let mut best = vec![f64::INFINITY; h * w];

    for _ in 0..SLIC_ITERS {
        best.fill(f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let x0 = (c[3] - 2.0 * s).floor().max(0.0) as usize;
            let x1 = ((c[3] + 2.0 * s).ceil() as usize).min(w - 1);
            let y0 = (c[4] - 2.0 * s).floor().max(0.0) as usize;
            let y1 = ((c[4] + 2.0 * s).ceil() as usize).min(h - 1);
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let p = py * w + px;
                    let l = lab[p];
                    let dc = (l[0] - c[0]).powi(2) + (l[1] - c[1]).powi(2) + (l[2] - c[2]).powi(2);
                    let dxy = (px as f64 - c[3]).powi(2) + (py as f64 - c[4]).powi(2);
                    let d = dc + spatial * dxy;
                    if d < best[p] {
                        best[p] = d;
                        labels[p] = ci as u32;
                    }
                }
            }
        }
        let mut acc = vec![[0.0f64; 6]; k];
        for p in 0..h * w {
            let a = &mut acc[labels[p] as usize];
            let l = lab[p];
            a[0] += l[0];
            a[1] += l[1];
            a[2] += l[2];
            a[3] += (p % w) as f64;
            a[4] += (p / w) as f64;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                for i in 0..5 {
                    c[i] = a[i] / a[5];
                }
            }
        }
    }

    let sp = enforce_connectivity(&labels, h, w, k, n_segments);
    if sp.count * 2 < n_segments {
        // Degenerate clustering; the grid itself is a valid segmentation.
        let labels: Vec<u32> = (0..h * w).map(grid).collect();
        return Ok(Superpixels { labels, count: k, h, w });
    }
    Ok(sp)
}

/// Split label regions into 4-connected components, then absorb fragments:
/// components below a quarter of the mean segment area merge into their
/// largest neighbor, and the smallest components keep merging while the
/// total exceeds twice the request. Merging never continues below half the
/// request.
fn enforce_connectivity(
    labels: &[u32],
    h: usize,
    w: usize,
    k: usize,
    n_segments: usize,
) -> Superpixels {
    let mut comp = vec![u32::MAX; h * w];
    let mut members: Vec<Vec<u32>> = Vec::new();
    for start in 0..h * w {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = members.len() as u32;
        let mut stack = vec![start as u32];
        let mut pix = Vec::new();
        comp[start] = id;
        while let Some(p) = stack.pop() {
            pix.push(p);
            let (py, px) = (p as usize / w, p as usize % w);
            let mut try_push = |q: usize| {
                if comp[q] == u32::MAX && labels[q] == labels[p as usize] {
                    comp[q] = id;
                    stack.push(q as u32);
                }
            };
            if px > 0 {
                try_push(p as usize - 1);
            }
            if px + 1 < w {
                try_push(p as usize + 1);
            }
            if py > 0 {
                try_push(p as usize - w);
            }
            if py + 1 < h {
                try_push(p as usize + w);
            }
        }
        members.push(pix);
    }

    let mut alive = members.len();
    let min_size = ((h * w) / (k * 4)).max(1);
    let low = n_segments.div_ceil(2).max(1);
    // Union-find over components; roots own the member lists.
    let mut parent: Vec<u32> = (0..members.len() as u32).collect();
    fn root(parent: &mut [u32], mut i: u32) -> u32 {
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }

    loop {
        if alive <= low {
            break;
        }
        // Smallest alive component, by size then id.
        let mut victim: Option<u32> = None;
        for i in 0..members.len() as u32 {
            if root(&mut parent, i) != i {
                continue;
            }
            if victim.is_none_or(|v| members[i as usize].len() < members[v as usize].len()) {
                victim = Some(i);
            }
        }
        let v = victim.expect("at least one component");
        let vs = members[v as usize].len();
        if vs >= min_size && alive <= 2 * n_segments {
            break;
        }
        // Largest neighboring component, by size then id.
        let mut nb: Option<u32> = None;
        for &p in &members[v as usize] {
            let (py, px) = (p as usize / w, p as usize % w);
            for q in [
                (px > 0).then(|| p as usize - 1),
                (px + 1 < w).then(|| p as usize + 1),
                (py > 0).then(|| p as usize - w),
                (py + 1 < h).then(|| p as usize + w),
            ]
            .into_iter()
            .flatten()
            {
                let r = root(&mut parent, comp[q]);
                if r != v && nb.is_none_or(|b| members[r as usize].len() > members[b as usize].len())
                {
                    nb = Some(r);
                }
            }
        }
        let Some(nb) = nb else { break };
        parent[v as usize] = nb;
        let moved = std::mem::take(&mut members[v as usize]);
        members[nb as usize].extend(moved);
        alive -= 1;
    }

    // Compact ids in order of first appearance, row-major.
    let mut remap = vec![u32::MAX; members.len()];
    let mut count = 0u32;
    let mut out = vec![0u32; h * w];
    for p in 0..h * w {
        let r = root(&mut parent, comp[p]);
        if remap[r as usize] == u32::MAX {
            remap[r as usize] = count;
            count += 1;
        }
        out[p] = remap[r as usize];
    }
    Superpixels { labels: out, count: count as usize, h, w }
}

// ----- refinement -----

/// Binarize at one half: values at or above become exactly one.
pub fn binarize<T: Scalar>(m: &Tensor<T>) -> Tensor<T> {
    m.map(|v| if v >= T::c(0.5) { T::one() } else { T::zero() })
}

/// Fraction of each segment covered by a binary mask.
pub fn coverage_ratio<T: Scalar>(mask_binary: &Tensor<T>, sp: &Superpixels) -> Vec<f64> {
    assert_eq!(mask_binary.numel(), sp.labels.len(), "mask size vs segmentation");
    let mut on = vec![0usize; sp.count];
    let mut total = vec![0usize; sp.count];
    for (p, &l) in sp.labels.iter().enumerate() {
        total[l as usize] += 1;
        if mask_binary.data()[p] >= T::c(0.5) {
            on[l as usize] += 1;
        }
    }
    on.iter().zip(&total).map(|(&o, &t)| o as f64 / t.max(1) as f64).collect()
}

/// Snap a soft mask to superpixel boundaries by majority vote: segments
/// at least half covered by the binarized mask become all ones, the rest
/// keep the binarized values. The output is binary, pointwise at least the
/// binarized input, and a fixed point of this map.
pub fn refine_mask<T: Scalar>(m_o: &Tensor<T>, sp: &Superpixels) -> Tensor<T> {
    let star = binarize(m_o);
    let rho = coverage_ratio(&star, sp);
    let mut out = star.clone();
    for (p, &l) in sp.labels.iter().enumerate() {
        if rho[l as usize] >= 0.5 {
            out.data_mut()[p] = T::one();
        }
    }
    out
}

/// Deterministic distinct colors for visualizing segment labels.
pub fn label_colors(count: usize) -> Vec<[u8; 3]> {
    (0..count)
        .map(|i| {
            // Golden-angle hue walk, full saturation, alternating value.
            let hue = (i as f64 * 137.50776405003785) % 360.0;
            let v = if i % 2 == 0 { 0.95 } else { 0.65 };
            let c = v;
            let hp = hue / 60.0;
            let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
            let (r, g, b) = match hp as usize {
                0 => (c, x, 0.0),
                1 => (x, c, 0.0),
                2 => (0.0, c, x),
                3 => (0.0, x, c),
                4 => (x, 0.0, c),
                _ => (c, 0.0, x),
            };
            [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
        })
        .collect()
}
