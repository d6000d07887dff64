//! Synthetic benchmark scenes and evaluation metrics.
//!
//! A scene is a ring of cameras around a random Gaussian cloud. Every view
//! is rendered clean, then per-view occluders (solid or textured rectangles
//! and ellipses) are stamped over it. Occluder placement is independent
//! per view and re-rolled until no pixel is covered in every view, so the
//! static content behind each distractor is always observable somewhere.
//! Masks are exact by construction: a pixel is marked iff the occluder
//! changed it, and a painted pixel that happens to match the background is
//! nudged by one 8-bit step so the mark is honest.
//!
//! Datasets round-trip through a plain directory layout (PNG images, text
//! camera and spec files) without losing a bit.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{sigmoid, Graph, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::imgio;
use crate::splat::{
    covariance3d, eval_sh, project, Camera, StaticField, Vec3, NEAR_PLANE, SH_C0,
};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub n_views: usize,
    pub n_gaussians: usize,
    /// Target fraction of pixels occluded per view; 0 disables occluders.
    pub occluder_coverage: f64,
    pub camera_radius: f64,
    pub seed: u64,
    pub background: [f64; 3],
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            n_views: 20,
            n_gaussians: 300,
            occluder_coverage: 0.15,
            camera_radius: 4.0,
            seed: 7,
            background: [0.0; 3],
        }
    }
}

/// Named difficulty presets differing only in occluder coverage.
pub fn preset(name: &str) -> Option<SceneConfig> {
    let occluder_coverage = match name {
        "light" => 0.05,
        "medium" => 0.15,
        "heavy" => 0.30,
        _ => return None,
    };
    Some(SceneConfig { occluder_coverage, ..SceneConfig::default() })
}

fn validate_config(cfg: &SceneConfig) -> Result<()> {
    let mut problems = Vec::new();
    if cfg.width < 16 || cfg.height < 16 {
        problems.push("image side must be at least 16".to_string());
    }
    if cfg.n_views < 2 {
        problems.push("need at least 2 views".to_string());
    }
    if cfg.n_gaussians == 0 {
        problems.push("need at least 1 scene Gaussian".to_string());
    }
    if !(0.0..=0.5).contains(&cfg.occluder_coverage) {
        problems.push("occluder coverage must be in [0, 0.5]".to_string());
    }
    if cfg.camera_radius <= 1.5 {
        problems.push("camera radius must exceed 1.5 (the content cube)".to_string());
    }
    if let Some(p) = problems.into_iter().next() {
        return Err(Error::Config(p));
    }
    Ok(())
}

/// Everything the trainer consumes, fully in memory. `images` carry the
/// occluders; `clean` and `masks` are the ground truth used only for
/// scoring.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cameras: Vec<Camera<f32>>,
    pub images: Vec<Tensor<f32>>,
    pub clean: Vec<Tensor<f32>>,
    pub masks: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn n_views(&self) -> usize {
        self.cameras.len()
    }

    pub fn width(&self) -> usize {
        self.cameras[0].width
    }

    pub fn height(&self) -> usize {
        self.cameras[0].height
    }

    /// Views used for fitting; every `holdout_every`-th view is withheld.
    /// 0 keeps everything.
    pub fn train_views(&self, holdout_every: usize) -> Vec<usize> {
        (0..self.n_views())
            .filter(|v| holdout_every == 0 || v % holdout_every != 0)
            .collect()
    }

    pub fn holdout_views(&self, holdout_every: usize) -> Vec<usize> {
        (0..self.n_views())
            .filter(|v| holdout_every != 0 && v % holdout_every == 0)
            .collect()
    }
}

pub struct Scene {
    pub dataset: Dataset,
    /// The Gaussians the clean images were rendered from.
    pub gt_field: StaticField<f32>,
}

// ----- scene content -----

fn random_field(n: usize, rng: &mut impl Rng) -> StaticField<f32> {
    let mut mu = Vec::with_capacity(n * 3);
    let mut log_scale = Vec::with_capacity(n * 3);
    let mut rot = Vec::with_capacity(n * 4);
    let mut opacity = Vec::with_capacity(n);
    let mut sh = Vec::with_capacity(n * 12);
    for _ in 0..n {
        for _ in 0..3 {
            mu.push(rng.gen_range(-0.8..0.8) as f32);
            log_scale.push((rng.gen_range(0.04f64..0.18).ln()) as f32);
        }
        let q: [f64; 4] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        for c in q {
            rot.push((c / qn) as f32);
        }
        opacity.push(rng.gen_range(0.5..3.0) as f32);
        // Base color is a direct draw; the three directional bands stay
        // mild so view dependence tints rather than repaints.
        for _ in 0..3 {
            sh.push(((rng.gen_range(0.05f64..0.95) - 0.5) / SH_C0) as f32);
        }
        for _ in 0..9 {
            sh.push(rng.gen_range(-0.25f64..0.25) as f32);
        }
    }
    let field = StaticField {
        mu: Tensor::new(&[n, 3], mu),
        log_scale: Tensor::new(&[n, 3], log_scale),
        rot: Tensor::new(&[n, 4], rot),
        opacity_logit: Tensor::new(&[n], opacity),
        sh: Tensor::new(&[n, 12], sh),
        uncert_logit: Tensor::zeros(&[n]),
    };
    field.validate();
    field
}

/// Cameras evenly spaced on a circle of the configured radius, with a
/// gentle height wave so the ring is not degenerate, all aimed at the
/// origin.
pub fn ring_cameras(cfg: &SceneConfig) -> Vec<Camera<f32>> {
    (0..cfg.n_views)
        .map(|v| {
            let theta = 2.0 * PI * v as f64 / cfg.n_views as f64;
            let eye = Vec3([
                (cfg.camera_radius * theta.sin()) as f32,
                (cfg.camera_radius * theta.cos()) as f32,
                (0.25 + 0.55 * (2.0 * theta).sin()) as f32,
            ]);
            let cam = Camera::look_at(
                eye,
                Vec3([0.0; 3]),
                Vec3([0.0, 0.0, 1.0]),
                cfg.width as f32,
                cfg.width as f32,
                cfg.width,
                cfg.height,
            );
            assert!(cam.is_valid());
            cam
        })
        .collect()
}

/// Forward-only render of a static field: project every Gaussian with its
/// view-dependent color and composite. Same arithmetic as the
/// differentiable path, minus the tape.
pub fn render_static<T: Scalar>(
    field: &StaticField<T>,
    cam: &Camera<T>,
    background: [T; 3],
) -> Tensor<T> {
    let campos = cam.position();
    let mut projected = Vec::with_capacity(field.len());
    for i in 0..field.len() {
        let m = field.mu.row(i);
        let mu = Vec3([m[0], m[1], m[2]]);
        let ls = field.log_scale.row(i);
        let q = field.rot.row(i);
        let cov = covariance3d([ls[0], ls[1], ls[2]], [q[0], q[1], q[2], q[3]]);
        let color = eval_sh(field.sh.row(i), mu.sub(campos).normalized());
        let alpha = sigmoid(field.opacity_logit.data()[i]);
        if let Some(p) = project(mu, &cov, color, alpha, i, cam) {
            projected.push(p);
        }
    }
    crate::raster::rasterize(&projected, cam.height, cam.width, background).0.image
}

// ----- occluders -----

#[derive(Debug, Clone)]
struct OccShape {
    rect: bool,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [u8; 3],
    textured: bool,
}

impl OccShape {
    fn contains(&self, scale: f64, x: usize, y: usize) -> bool {
        let dx = (x as f64 - self.cx) / (self.rx * scale);
        let dy = (y as f64 - self.cy) / (self.ry * scale);
        if self.rect {
            dx.abs() <= 1.0 && dy.abs() <= 1.0
        } else {
            dx * dx + dy * dy <= 1.0
        }
    }

    fn paint(&self, x: usize, y: usize) -> [u8; 3] {
        if self.textured && (x / 4 + y / 4) % 2 == 1 {
            [255 - self.color[0], 255 - self.color[1], 255 - self.color[2]]
        } else {
            self.color
        }
    }
}

/// Occluder channels draw from saturated extremes so shapes read as foreign
/// objects against the mid-range scene palette (and stay so under the
/// checker complement).
fn occluder_channel(rng: &mut impl Rng) -> u8 {
    if rng.gen_bool(0.5) {
        rng.gen_range(217..=255)
    } else {
        rng.gen_range(0..=38)
    }
}

fn sample_shapes(target: f64, h: usize, w: usize, rng: &mut impl Rng) -> Vec<OccShape> {
    let k = if target < 0.08 {
        1
    } else if target < 0.2 {
        rng.gen_range(1..=2)
    } else {
        rng.gen_range(2..=3)
    };
    let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();
    weights
        .iter()
        .map(|wgt| {
            let area = target * (h * w) as f64 * wgt / total;
            let rect = rng.gen_bool(0.5);
            let aspect = rng.gen_range(0.5f64.ln()..2.0f64.ln()).exp();
            let ry = if rect { (area / (4.0 * aspect)).sqrt() } else { (area / (PI * aspect)).sqrt() };
            OccShape {
                rect,
                cx: rng.gen_range(0.1 * w as f64..0.9 * w as f64),
                cy: rng.gen_range(0.1 * h as f64..0.9 * h as f64),
                rx: aspect * ry,
                ry,
                color: [
                    occluder_channel(rng),
                    occluder_channel(rng),
                    occluder_channel(rng),
                ],
                textured: rng.gen_bool(0.25),
            }
        })
        .collect()
}

fn union_coverage(shapes: &[OccShape], scale: f64, h: usize, w: usize) -> f64 {
    let mut covered = 0usize;
    for y in 0..h {
        for x in 0..w {
            if shapes.iter().any(|s| s.contains(scale, x, y)) {
                covered += 1;
            }
        }
    }
    covered as f64 / (h * w) as f64
}

/// Coverage grows monotonically with a global size multiplier, so a binary
/// search lands within a pixel or two of the requested fraction.
fn fit_scale(shapes: &[OccShape], target: f64, h: usize, w: usize) -> f64 {
    let mut lo = 0.02;
    let mut hi = 1.0;
    while union_coverage(shapes, hi, h, w) < target && hi < 64.0 {
        hi *= 1.5;
    }
    for _ in 0..42 {
        let mid = 0.5 * (lo + hi);
        if union_coverage(shapes, mid, h, w) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (clo, chi) = (union_coverage(shapes, lo, h, w), union_coverage(shapes, hi, h, w));
    if (clo - target).abs() <= (chi - target).abs() {
        lo
    } else {
        hi
    }
}

/// Paint the occluders over a quantized clean view. A painted pixel that
/// would equal the clean pixel gets its red low bit flipped, keeping the
/// mask equivalent to "this pixel changed".
fn stamp_occluders(
    clean: &Tensor<f32>,
    shapes: &[OccShape],
    scale: f64,
    h: usize,
    w: usize,
) -> (Tensor<f32>, Tensor<f32>) {
    let mut image = clean.clone();
    let mut mask = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            // Last shape in the list paints on top.
            let Some(shape) = shapes.iter().rev().find(|s| s.contains(scale, x, y)) else {
                continue;
            };
            let mut px = shape.paint(x, y);
            let base = [
                imgio::quantize(clean.data()[(y * w + x) * 3]),
                imgio::quantize(clean.data()[(y * w + x) * 3 + 1]),
                imgio::quantize(clean.data()[(y * w + x) * 3 + 2]),
            ];
            if px == base {
                px[0] ^= 1;
            }
            for c in 0..3 {
                image.data_mut()[(y * w + x) * 3 + c] = px[c] as f32 / 255.0;
            }
            mask.data_mut()[y * w + x] = 1.0;
        }
    }
    (image, mask)
}

fn occlude_view(
    clean: &Tensor<f32>,
    target: f64,
    h: usize,
    w: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut best: Option<(f64, Tensor<f32>, Tensor<f32>)> = None;
    for _ in 0..10 {
        let shapes = sample_shapes(target, h, w, rng);
        let scale = fit_scale(&shapes, target, h, w);
        let (image, mask) = stamp_occluders(clean, &shapes, scale, h, w);
        let got = mask.data().iter().filter(|&&v| v > 0.0).count() as f64 / (h * w) as f64;
        let err = (got - target).abs() / target;
        if best.as_ref().map_or(true, |(e, _, _)| err < *e) {
            best = Some((err, image, mask));
        }
        if err <= 0.05 {
            break;
        }
    }
    let (err, image, mask) = best.unwrap();
    if err > 0.05 {
        return Err(Error::Invalid(format!(
            "occluder coverage missed the target by {:.1}% (relative)",
            err * 100.0
        )));
    }
    Ok((image, mask))
}

/// Build a full benchmark scene. Deterministic for a fixed config.
pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene> {
    validate_config(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gt_field = random_field(cfg.n_gaussians, &mut rng);
    let cameras = ring_cameras(cfg);
    let bg = cfg.background.map(|v| v as f32);
    let (h, w) = (cfg.height, cfg.width);

    let clean: Vec<Tensor<f32>> = cameras
        .iter()
        .map(|cam| imgio::quantized(&render_static(&gt_field, cam, bg)))
        .collect();

    if cfg.occluder_coverage == 0.0 {
        let masks = vec![Tensor::zeros(&[h, w]); cfg.n_views];
        let dataset =
            Dataset { cameras, images: clean.clone(), clean, masks };
        return Ok(Scene { dataset, gt_field });
    }

    let mut images = Vec::with_capacity(cfg.n_views);
    let mut masks = Vec::with_capacity(cfg.n_views);
    for v in 0..cfg.n_views {
        let (img, mask) = occlude_view(&clean[v], cfg.occluder_coverage, h, w, &mut rng)?;
        images.push(img);
        masks.push(mask);
    }

    // No pixel may be occluded in every view; re-roll views round-robin
    // until the intersection is empty.
    let all_covered = |masks: &[Tensor<f32>]| {
        (0..h * w).any(|p| masks.iter().all(|m| m.data()[p] > 0.0))
    };
    let mut fix = 0;
    while all_covered(&masks) {
        if fix >= 25 * cfg.n_views {
            return Err(Error::Invalid(
                "occluders keep covering a pixel in every view".to_string(),
            ));
        }
        let v = fix % cfg.n_views;
        let (img, mask) = occlude_view(&clean[v], cfg.occluder_coverage, h, w, &mut rng)?;
        images[v] = img;
        masks[v] = mask;
        fix += 1;
    }

    Ok(Scene { dataset: Dataset { cameras, images, clean, masks }, gt_field })
}

// ----- dataset files -----

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Write `cameras.txt`, `spec.txt` and the three PNG directories. Floats
/// are printed in shortest round-trip form, so a load sees identical bits.
pub fn save_dataset(data: &Dataset, cfg: &SceneConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for sub in ["images", "clean", "masks"] {
        create_dir(&dir.join(sub))?;
    }

    let mut cams = format!("format_version {DATASET_FORMAT_VERSION}\n");
    for cam in &data.cameras {
        for r in 0..3 {
            for c in 0..3 {
                cams.push_str(&format!("{} ", cam.rot.0[r][c]));
            }
        }
        cams.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            cam.trans.0[0],
            cam.trans.0[1],
            cam.trans.0[2],
            cam.fx,
            cam.fy,
            cam.cx,
            cam.cy,
            cam.width,
            cam.height
        ));
    }
    write_text(&dir.join("cameras.txt"), &cams)?;

    let spec = format!(
        "format_version {DATASET_FORMAT_VERSION}\n\
         width {}\nheight {}\nviews {}\ngaussians {}\n\
         occluder_coverage {}\ncamera_radius {}\nseed {}\n\
         background {} {} {}\n",
        cfg.width,
        cfg.height,
        cfg.n_views,
        cfg.n_gaussians,
        cfg.occluder_coverage,
        cfg.camera_radius,
        cfg.seed,
        cfg.background[0],
        cfg.background[1],
        cfg.background[2],
    );
    write_text(&dir.join("spec.txt"), &spec)?;

    for (v, ((img, clean), mask)) in
        data.images.iter().zip(&data.clean).zip(&data.masks).enumerate()
    {
        imgio::save_rgb(&dir.join(format!("images/{v:04}.png")), img)?;
        imgio::save_rgb(&dir.join(format!("clean/{v:04}.png")), clean)?;
        imgio::save_gray(&dir.join(format!("masks/{v:04}.png")), mask)?;
    }
    Ok(())
}

fn parse_spec(path: &Path, text: &str) -> Result<SceneConfig> {
    let mut cfg = SceneConfig::default();
    let mut version = None;
    for line in text.lines() {
        let mut it = line.split_whitespace();
        let Some(key) = it.next() else { continue };
        let vals: Vec<&str> = it.collect();
        let one = || -> Result<f64> {
            vals.first()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::parse(path, format!("bad value for {key}")))
        };
        match key {
            "format_version" => version = Some(one()? as u32),
            "width" => cfg.width = one()? as usize,
            "height" => cfg.height = one()? as usize,
            "views" => cfg.n_views = one()? as usize,
            "gaussians" => cfg.n_gaussians = one()? as usize,
            "occluder_coverage" => cfg.occluder_coverage = one()?,
            "camera_radius" => cfg.camera_radius = one()?,
            "seed" => cfg.seed = one()? as u64,
            "background" => {
                if vals.len() != 3 {
                    return Err(Error::parse(path, "background needs 3 values"));
                }
                for (i, v) in vals.iter().enumerate() {
                    cfg.background[i] =
                        v.parse().map_err(|_| Error::parse(path, "bad background"))?;
                }
            }
            _ => return Err(Error::parse(path, format!("unknown key {key}"))),
        }
    }
    match version {
        Some(DATASET_FORMAT_VERSION) => Ok(cfg),
        Some(v) => Err(Error::parse(path, format!("unsupported format_version {v}"))),
        None => Err(Error::parse(path, "missing format_version")),
    }
}

fn parse_cameras(path: &Path, text: &str) -> Result<Vec<Camera<f32>>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != format!("format_version {DATASET_FORMAT_VERSION}") {
        return Err(Error::parse(path, "bad or missing format_version"));
    }
    let mut cams = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let nums: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::parse(path, "bad number")))
            .collect::<Result<_>>()?;
        if nums.len() != 18 {
            return Err(Error::parse(path, "camera line needs 18 numbers"));
        }
        let mut rot = crate::splat::Mat3::zero();
        for r in 0..3 {
            for c in 0..3 {
                rot.0[r][c] = nums[r * 3 + c] as f32;
            }
        }
        let cam = Camera {
            rot,
            trans: Vec3([nums[9] as f32, nums[10] as f32, nums[11] as f32]),
            fx: nums[12] as f32,
            fy: nums[13] as f32,
            cx: nums[14] as f32,
            cy: nums[15] as f32,
            width: nums[16] as usize,
            height: nums[17] as usize,
        };
        if !cam.is_valid() {
            return Err(Error::parse(path, "camera fails validity checks"));
        }
        cams.push(cam);
    }
    Ok(cams)
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, SceneConfig)> {
    let spec_path = dir.join("spec.txt");
    let cfg = parse_spec(&spec_path, &read_text(&spec_path)?)?;
    let cam_path = dir.join("cameras.txt");
    let cameras = parse_cameras(&cam_path, &read_text(&cam_path)?)?;
    if cameras.len() != cfg.n_views {
        return Err(Error::parse(cam_path, "camera count disagrees with spec"));
    }
    let mut images = Vec::new();
    let mut clean = Vec::new();
    let mut masks = Vec::new();
    for v in 0..cfg.n_views {
        images.push(imgio::load_rgb(&dir.join(format!("images/{v:04}.png")))?);
        clean.push(imgio::load_rgb(&dir.join(format!("clean/{v:04}.png")))?);
        masks.push(imgio::load_mask(&dir.join(format!("masks/{v:04}.png")))?);
    }
    Ok((Dataset { cameras, images, clean, masks }, cfg))
}

// ----- metrics -----

/// Peak signal-to-noise ratio in dB for images in [0,1]; identical inputs
/// report infinity.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Structural similarity as a plain number, evaluated in f64.
pub fn ssim_metric(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let g = Graph::<f64>::new();
    let av = g.constant(a.cast());
    let bv = g.constant(b.cast());
    crate::objective::ssim(&av, &bv).value().item()
}

/// Intersection over union of two masks (thresholded at 0.5). Two empty
/// masks agree perfectly.
pub fn iou(pred: &Tensor<f32>, gt: &Tensor<f32>) -> f64 {
    assert_eq!(pred.shape(), gt.shape());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p >= 0.5, g >= 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn boundary_pixels(mask: &Tensor<f32>) -> Vec<bool> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let at = |y: isize, x: isize| -> bool {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            false
        } else {
            mask.data()[y as usize * w + x as usize] >= 0.5
        }
    };
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] = at(y, x)
                && (!at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1));
        }
    }
    out
}

/// Grow a pixel set by `tol` steps of 8-connected dilation (Chebyshev
/// distance).
fn dilate(set: &[bool], h: usize, w: usize, tol: usize) -> Vec<bool> {
    let mut cur = set.to_vec();
    for _ in 0..tol {
        let prev = cur.clone();
        for y in 0..h as isize {
            for x in 0..w as isize {
                if prev[y as usize * w + x as usize] {
                    continue;
                }
                'scan: for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny >= 0
                            && nx >= 0
                            && ny < h as isize
                            && nx < w as isize
                            && prev[ny as usize * w + nx as usize]
                        {
                            cur[y as usize * w + x as usize] = true;
                            break 'scan;
                        }
                    }
                }
            }
        }
    }
    cur
}

/// Boundary F-score: precision and recall of contour pixels matched within
/// `tol` pixels. Both contours empty scores 1, exactly one empty scores 0.
pub fn boundary_f_score(pred: &Tensor<f32>, gt: &Tensor<f32>, tol: usize) -> f64 {
    assert_eq!(pred.shape(), gt.shape());
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    let np = bp.iter().filter(|&&v| v).count();
    let ng = bg.iter().filter(|&&v| v).count();
    match (np, ng) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let near_gt = dilate(&bg, h, w, tol);
    let near_pred = dilate(&bp, h, w, tol);
    let precision =
        bp.iter().zip(&near_gt).filter(|(&p, &n)| p && n).count() as f64 / np as f64;
    let recall =
        bg.iter().zip(&near_pred).filter(|(&g, &n)| g && n).count() as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Fraction of Gaussian centers that land on an occluder when projected
/// into the given views (pooled over views). Static Gaussians parked on
/// distractors push this up.
pub fn centroid_in_occluder_fraction(
    field: &StaticField<f32>,
    cameras: &[Camera<f32>],
    masks: &[Tensor<f32>],
    views: &[usize],
) -> f64 {
    let mut visible = 0usize;
    let mut hits = 0usize;
    for &v in views {
        let cam = &cameras[v];
        let mask = &masks[v];
        for i in 0..field.len() {
            let m = field.mu.row(i);
            let p = cam.cam_space(Vec3([m[0], m[1], m[2]]));
            if p.0[2] <= NEAR_PLANE as f32 {
                continue;
            }
            let x = (cam.fx * p.0[0] / p.0[2] + cam.cx).round();
            let y = (cam.fy * p.0[1] / p.0[2] + cam.cy).round();
            if x < 0.0 || y < 0.0 || x >= cam.width as f32 || y >= cam.height as f32 {
                continue;
            }
            visible += 1;
            if mask.data()[y as usize * cam.width + x as usize] >= 0.5 {
                hits += 1;
            }
        }
    }
    if visible == 0 {
        0.0
    } else {
        hits as f64 / visible as f64
    }
}

/// Memory accounting for one trained model, in bytes at f32 storage.
#[derive(Debug, Clone, Copy)]
pub struct MemoryBreakdown {
    pub static_bytes: usize,
    pub transient_bytes: usize,
    /// Marginal cost of adding one more view.
    pub per_view_growth_bytes: usize,
    /// What one view costs if transients are stored as per-view copies.
    pub per_view_baseline_bytes: usize,
}

impl fmt::Display for MemoryBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "static {} B, transient {} B, +{} B/view (copy baseline {} B/view)",
            self.static_bytes,
            self.transient_bytes,
            self.per_view_growth_bytes,
            self.per_view_baseline_bytes
        )
    }
}

// ----- whole-model evaluation -----

/// Contour matching tolerance (pixels) for the boundary F-score.
pub const BOUNDARY_TOL: usize = 2;

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Held-out novel-view quality of the static render against the clean
    /// ground truth. Falls back to training views when nothing is held out.
    pub view_psnr: Vec<(usize, f64)>,
    pub view_ssim: Vec<(usize, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Refined-mask agreement with the exact occluder masks, training views.
    pub view_mask_iou: Vec<(usize, f64)>,
    pub view_boundary_f: Vec<(usize, f64)>,
    pub mean_mask_iou: f64,
    pub mean_boundary_f: f64,
    /// Same scores for the thresholded network mask before refinement.
    pub mean_raw_iou: f64,
    pub mean_raw_boundary_f: f64,
    pub n_static: usize,
    pub memory: MemoryBreakdown,
    /// Fraction of static Gaussian centers projecting onto occluders.
    pub centroid_in_occluder: f64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "novel views ({}): PSNR {:.2} dB, SSIM {:.4}",
            self.view_psnr.len(),
            self.mean_psnr,
            self.mean_ssim
        )?;
        for ((v, p), (_, s)) in self.view_psnr.iter().zip(&self.view_ssim) {
            writeln!(f, "  view {v}: {p:.2} dB / {s:.4}")?;
        }
        writeln!(
            f,
            "masks ({} train views): IoU {:.4}, boundary F {:.4} (unrefined {:.4} / {:.4})",
            self.view_mask_iou.len(),
            self.mean_mask_iou,
            self.mean_boundary_f,
            self.mean_raw_iou,
            self.mean_raw_boundary_f
        )?;
        writeln!(f, "static field: {} Gaussians", self.n_static)?;
        writeln!(f, "memory: {}", self.memory)?;
        write!(f, "centroids on occluders: {:.2}%", self.centroid_in_occluder * 100.0)
    }
}

/// Score a trained model: novel-view PSNR/SSIM on held-out views, mask
/// quality on training views, memory, and occluder contamination of the
/// static field.
pub fn evaluate(
    model: &crate::trainer::Model,
    data: &Dataset,
    holdout_every: usize,
    n_superpixels: usize,
    background: [f32; 3],
) -> Result<EvalReport> {
    let held = data.holdout_views(holdout_every);
    let eval_views = if held.is_empty() { data.train_views(0) } else { held };
    let train_views = data.train_views(holdout_every);

    let mut view_psnr = Vec::new();
    let mut view_ssim = Vec::new();
    for &v in &eval_views {
        let img = render_static(&model.statics, &data.cameras[v], background);
        view_psnr.push((v, psnr(&img, &data.clean[v])));
        view_ssim.push((v, ssim_metric(&img, &data.clean[v])));
    }

    let mut view_mask_iou = Vec::new();
    let mut view_boundary_f = Vec::new();
    let mut raw_iou = Vec::new();
    let mut raw_bf = Vec::new();
    for &v in &train_views {
        let out = crate::trainer::view_outputs(model, data, v, n_superpixels, background)?;
        let gt = &data.masks[v];
        view_mask_iou.push((v, iou(&out.m_s, gt)));
        view_boundary_f.push((v, boundary_f_score(&out.m_s, gt, BOUNDARY_TOL)));
        let hard = crate::maskgen::binarize(&out.m_o);
        raw_iou.push(iou(&hard, gt));
        raw_bf.push(boundary_f_score(&hard, gt, BOUNDARY_TOL));
    }

    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let seconds = |xs: &[(usize, f64)]| xs.iter().map(|&(_, x)| x).collect::<Vec<_>>();

    Ok(EvalReport {
        mean_psnr: mean(&seconds(&view_psnr)),
        mean_ssim: mean(&seconds(&view_ssim)),
        mean_mask_iou: mean(&seconds(&view_mask_iou)),
        mean_boundary_f: mean(&seconds(&view_boundary_f)),
        mean_raw_iou: mean(&raw_iou),
        mean_raw_boundary_f: mean(&raw_bf),
        view_psnr,
        view_ssim,
        view_mask_iou,
        view_boundary_f,
        n_static: model.n_static(),
        memory: model.memory(),
        centroid_in_occluder: centroid_in_occluder_fraction(
            &model.statics,
            &data.cameras,
            &data.masks,
            &train_views,
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::render_gaussians;
    use tempfile::tempdir;

    fn tiny_config() -> SceneConfig {
        SceneConfig {
            width: 32,
            height: 32,
            n_views: 5,
            n_gaussians: 40,
            occluder_coverage: 0.15,
            seed: 11,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = tiny_config();
        let a = generate_scene(&cfg).unwrap();
        let b = generate_scene(&cfg).unwrap();
        assert_eq!(a.gt_field.mu, b.gt_field.mu);
        for v in 0..cfg.n_views {
            assert_eq!(a.dataset.images[v], b.dataset.images[v]);
            assert_eq!(a.dataset.masks[v], b.dataset.masks[v]);
        }
    }

    #[test]
    fn occluder_coverage_hits_the_target_and_masks_are_exact() {
        let cfg = tiny_config();
        let scene = generate_scene(&cfg).unwrap();
        let hw = (cfg.width * cfg.height) as f64;
        for v in 0..cfg.n_views {
            let mask = &scene.dataset.masks[v];
            let got = mask.data().iter().filter(|&&m| m > 0.0).count() as f64 / hw;
            let rel = (got - cfg.occluder_coverage).abs() / cfg.occluder_coverage;
            assert!(rel <= 0.05, "view {v}: coverage {got:.4} off by {:.1}%", rel * 100.0);
            assert!(mask.data().iter().all(|&m| m == 0.0 || m == 1.0));

            // Mask is exactly the changed-pixel set.
            let img = &scene.dataset.images[v];
            let clean = &scene.dataset.clean[v];
            for p in 0..cfg.width * cfg.height {
                let changed = (0..3).any(|c| img.data()[p * 3 + c] != clean.data()[p * 3 + c]);
                assert_eq!(changed, mask.data()[p] == 1.0, "view {v} pixel {p}");
            }
        }

        // Every pixel must be clean somewhere.
        for p in 0..cfg.width * cfg.height {
            assert!(
                scene.dataset.masks.iter().any(|m| m.data()[p] == 0.0),
                "pixel {p} occluded in all views"
            );
        }
    }

    #[test]
    fn zero_coverage_means_clean_images_and_empty_masks() {
        let cfg = SceneConfig { occluder_coverage: 0.0, ..tiny_config() };
        let scene = generate_scene(&cfg).unwrap();
        for v in 0..cfg.n_views {
            assert_eq!(scene.dataset.images[v], scene.dataset.clean[v]);
            assert!(scene.dataset.masks[v].data().iter().all(|&m| m == 0.0));
        }
    }

    #[test]
    fn cameras_aim_at_the_origin() {
        let cams = ring_cameras(&tiny_config());
        for cam in cams {
            let p = cam.cam_space(Vec3([0.0, 0.0, 0.0]));
            assert!(p.0[2] > 1.0, "origin in front of the camera");
            let u = cam.fx * p.0[0] / p.0[2] + cam.cx;
            let v = cam.fy * p.0[1] / p.0[2] + cam.cy;
            assert!((u - cam.cx).abs() < 0.5 && (v - cam.cy).abs() < 0.5);
        }
    }

    #[test]
    fn plain_and_taped_renders_agree() {
        let cfg = SceneConfig { n_gaussians: 25, ..tiny_config() };
        let scene = generate_scene(&cfg).unwrap();
        let field = &scene.gt_field;
        let cam = &scene.dataset.cameras[2];
        let plain = render_static(field, cam, [0.0; 3]);

        let g = Graph::<f32>::new();
        let mu = g.constant(field.mu.clone());
        let ls = g.constant(field.log_scale.clone());
        let rot = g.constant(field.rot.clone());
        let alpha = g.constant(field.opacity_logit.clone()).sigmoid();
        let color = crate::raster::sh_colors(&g.constant(field.sh.clone()), &mu, cam);
        let (img, _) = render_gaussians(&mu, &ls, &rot, &alpha, &color, cam, [0.0; 3]);
        // Activation ops on the tape round a hair differently than the free
        // functions, so agreement is to ULP level, not bitwise.
        let worst = img
            .value()
            .data()
            .iter()
            .zip(plain.data())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-6, "plain and taped renders differ by {worst}");
    }

    #[test]
    fn dataset_files_round_trip_exactly() {
        let cfg = SceneConfig { n_views: 3, ..tiny_config() };
        let scene = generate_scene(&cfg).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&scene.dataset, &cfg, dir.path()).unwrap();
        let (loaded, cfg2) = load_dataset(dir.path()).unwrap();

        assert_eq!(cfg2, cfg);
        for v in 0..cfg.n_views {
            assert_eq!(loaded.images[v], scene.dataset.images[v]);
            assert_eq!(loaded.clean[v], scene.dataset.clean[v]);
            assert_eq!(loaded.masks[v], scene.dataset.masks[v]);
            let (a, b) = (&loaded.cameras[v], &scene.dataset.cameras[v]);
            assert_eq!(a.rot.0, b.rot.0);
            assert_eq!(a.trans.0, b.trans.0);
            assert_eq!((a.fx, a.fy, a.cx, a.cy), (b.fx, b.fy, b.cx, b.cy));
            assert_eq!((a.width, a.height), (b.width, b.height));
        }
    }

    #[test]
    fn loader_rejects_bad_versions_and_counts() {
        let cfg = SceneConfig { n_views: 2, ..tiny_config() };
        let scene = generate_scene(&cfg).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&scene.dataset, &cfg, dir.path()).unwrap();

        let spec = dir.path().join("spec.txt");
        let old = std::fs::read_to_string(&spec).unwrap();
        std::fs::write(&spec, old.replace("format_version 1", "format_version 9")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { .. })));
        std::fs::write(&spec, old.replace("views 2", "views 3")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::zeros(&[4, 4, 3]);
        assert_eq!(psnr(&a, &a), f64::INFINITY);
        let b = Tensor::full(&[4, 4, 3], 0.1f32);
        let got = psnr(&a, &b);
        // f32 0.1 is not exactly 0.1, so compare loosely.
        assert!((got - 20.0).abs() < 1e-5, "{got}");
    }

    #[test]
    fn ssim_metric_of_identical_images_is_one() {
        let a = Tensor::from_fn(&[16, 16, 3], |i| ((i * 37) % 11) as f32 / 11.0);
        assert!((ssim_metric(&a, &a) - 1.0).abs() < 1e-12);
        let b = a.map(|v| 1.0 - v);
        assert!(ssim_metric(&a, &b) < 0.5);
    }

    #[test]
    fn mask_overlap_scores() {
        let mut a = Tensor::zeros(&[8, 8]);
        let mut b = Tensor::zeros(&[8, 8]);
        for y in 2..6 {
            for x in 2..6 {
                a.data_mut()[y * 8 + x] = 1.0;
                b.data_mut()[y * 8 + x + 1] = 1.0; // shifted right by 1
            }
        }
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Tensor::zeros(&[8, 8])), 0.0);
        assert_eq!(iou(&Tensor::zeros(&[8, 8]), &Tensor::zeros(&[8, 8])), 1.0);
        // 4x4 squares shifted by one: intersection 12, union 20.
        assert!((iou(&a, &b) - 0.6).abs() < 1e-12);

        assert_eq!(boundary_f_score(&a, &a, 0), 1.0);
        assert_eq!(boundary_f_score(&a, &b, 2), 1.0, "1px shift within tol 2");
        assert!(boundary_f_score(&a, &b, 0) < 1.0);
        assert_eq!(boundary_f_score(&a, &Tensor::zeros(&[8, 8]), 2), 0.0);
        assert_eq!(
            boundary_f_score(&Tensor::zeros(&[8, 8]), &Tensor::zeros(&[8, 8]), 2),
            1.0
        );
    }

    #[test]
    fn centroid_fraction_counts_projected_hits() {
        // One Gaussian dead ahead of an identity-rotation camera, one far
        // off screen. The mask covers the principal point.
        let field = StaticField {
            mu: Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 50.0, 0.0, 0.0]),
            log_scale: Tensor::full(&[2, 3], -2.0f32),
            rot: Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
            opacity_logit: Tensor::zeros(&[2]),
            sh: Tensor::zeros(&[2, 12]),
            uncert_logit: Tensor::zeros(&[2]),
        };
        let cam = Camera::look_at(
            Vec3([0.0, 0.0, -3.0]),
            Vec3([0.0, 0.0, 0.0]),
            Vec3([0.0, 1.0, 0.0]),
            16.0,
            16.0,
            16,
            16,
        );
        let mut mask = Tensor::zeros(&[16, 16]);
        for y in 6..10 {
            for x in 6..10 {
                mask.data_mut()[y * 16 + x] = 1.0;
            }
        }
        let f = centroid_in_occluder_fraction(&field, &[cam.clone()], &[mask], &[0]);
        assert_eq!(f, 1.0, "only the visible Gaussian counts, and it hits");
        let empty = centroid_in_occluder_fraction(&field, &[cam], &[Tensor::zeros(&[16, 16])], &[0]);
        assert_eq!(empty, 0.0);
    }

    #[test]
    fn evaluate_reports_on_an_untrained_model() {
        let cfg = SceneConfig { n_views: 4, ..tiny_config() };
        let scene = generate_scene(&cfg).unwrap();
        let tcfg = crate::trainer::TrainConfig {
            n_static_init: 10,
            n_transient_seeds: 5,
            ..crate::trainer::TrainConfig::default()
        };
        let model = crate::trainer::Model::init(
            &tcfg,
            cfg.n_views,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
        );
        let report = evaluate(&model, &scene.dataset, 4, 16, [0.0; 3]).unwrap();
        assert_eq!(report.view_psnr.len(), 1, "one held-out view of four");
        assert_eq!(report.view_mask_iou.len(), 3);
        assert!(report.mean_psnr.is_finite());
        assert!((0.0..=1.0).contains(&report.mean_mask_iou));
        assert!((0.0..=1.0).contains(&report.centroid_in_occluder));
        assert_eq!(report.n_static, 10);
        assert_eq!(report.memory.per_view_growth_bytes, 64);
        let text = report.to_string();
        assert!(text.contains("PSNR") && text.contains("IoU") && text.contains("memory"));
    }

    #[test]
    fn presets_differ_only_in_coverage() {
        assert_eq!(preset("light").unwrap().occluder_coverage, 0.05);
        assert_eq!(preset("medium").unwrap().occluder_coverage, 0.15);
        assert_eq!(preset("heavy").unwrap().occluder_coverage, 0.30);
        assert!(preset("extreme").is_none());
        assert!(validate_config(&preset("heavy").unwrap()).is_ok());
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        for bad in [
            SceneConfig { width: 4, ..SceneConfig::default() },
            SceneConfig { n_views: 1, ..SceneConfig::default() },
            SceneConfig { n_gaussians: 0, ..SceneConfig::default() },
            SceneConfig { occluder_coverage: 0.7, ..SceneConfig::default() },
            SceneConfig { camera_radius: 1.0, ..SceneConfig::default() },
        ] {
            assert!(matches!(generate_scene(&bad), Err(Error::Config(_))));
        }
    }
}
