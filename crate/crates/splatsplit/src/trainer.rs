//! Staged optimization of the static/transient decomposition.
//!
//! Stage 1 fits the static field alone, as if the scene had no distractors.
//! Stage 2 turns on the mask network, the deformation and color heads with
//! their per-view embeddings, and the per-Gaussian uncertainty. Stage 3
//! additionally lets the transient seed geometry move. An optional short
//! polish stage repeats stage 3 at a tenth of every learning rate.
//!
//! One optimizer step builds a fresh graph: render the static field,
//! render the deformed transients for the view, predict the occlusion mask
//! from the image and the detached render residual, refine it over
//! superpixels, and descend the composite objective with Adam. Densification
//! runs on a fixed schedule inside its window and resets the static
//! moments, since Gaussian identities change under it.
//!
//! Everything is deterministic for a fixed seed: fixed view rotation,
//! fixed parameter order, a counter-based RNG, and single-threaded math.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::densify::{
    densify_and_prune, DensifyConfig, DensifyEvent, DensifyMode, DensifyStats,
};
use crate::diffcore::{logit, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::harness::{psnr, render_static, ssim_metric, Dataset, MemoryBreakdown};
use crate::maskgen::{mask_input, refine_mask, slic, MaskNet, MaskNetVars, Superpixels};
use crate::objective::{
    bce, compose, photometric, transient_anchor, uncertainty_loss, LAMBDA_MASK_BCE,
    LAMBDA_MASK_REG, LAMBDA_SSIM,
};
use crate::raster::{composite_attribute, render_gaussians, sh_colors, AttributeBlend};
use crate::splat::{StaticField, Vec3, SH_C0};
use crate::transient::{deform, seed_colors, transient_memory_bytes, MlpVars, TransientModel};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

// ----- configuration -----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    /// Fraction of `steps` spent in each of the three stages.
    pub fractions: [f64; 3],
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig { fractions: [0.5, 0.25, 0.25] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrConfig {
    /// Position rate, decayed exponentially to `mu_final` over the run.
    pub mu: f64,
    pub mu_final: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh: f64,
    pub uncertainty: f64,
    pub embeddings: f64,
    pub networks: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            mu: 1.6e-4,
            mu_final: 1.6e-6,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
            uncertainty: 5e-2,
            embeddings: 1e-3,
            networks: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_ssim: f64,
    pub lambda_mask_bce: f64,
    pub lambda_mask_reg: f64,
    /// Weight of the masked transient-fit term in stages 2 and 3.
    pub transient_anchor: f64,
    /// Fit the transient render inside the mask instead of outside it.
    pub fit_anchor_on_mask: bool,
    pub uncertainty: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_ssim: LAMBDA_SSIM,
            lambda_mask_bce: LAMBDA_MASK_BCE,
            lambda_mask_reg: LAMBDA_MASK_REG,
            transient_anchor: 1.0,
            fit_anchor_on_mask: false,
            uncertainty: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifySchedule {
    pub from_step: usize,
    /// Densification stops after this fraction of the total steps.
    pub until_frac: f64,
    pub interval: usize,
    pub grad_threshold: f64,
    pub scale_threshold_frac: f64,
    pub min_alpha: f64,
    pub uncertainty_threshold: f64,
    pub max_gaussians: usize,
    pub split_scale_shrink: f64,
    pub mode: DensifyMode,
}

impl Default for DensifySchedule {
    fn default() -> Self {
        let d = DensifyConfig::default();
        DensifySchedule {
            from_step: 500,
            until_frac: 0.6,
            interval: 100,
            grad_threshold: d.grad_threshold,
            scale_threshold_frac: d.scale_threshold_frac,
            min_alpha: d.min_alpha,
            uncertainty_threshold: d.uncertainty_threshold,
            max_gaussians: 20_000,
            split_scale_shrink: d.split_scale_shrink,
            mode: d.mode,
        }
    }
}

impl DensifySchedule {
    fn to_config(&self, scene_extent: f64) -> DensifyConfig {
        DensifyConfig {
            grad_threshold: self.grad_threshold,
            scale_threshold_frac: self.scale_threshold_frac,
            scene_extent,
            min_alpha: self.min_alpha,
            uncertainty_threshold: self.uncertainty_threshold,
            max_gaussians: self.max_gaussians,
            split_scale_shrink: self.split_scale_shrink,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    /// Every n-th view is withheld from training and scored instead.
    pub holdout_every: usize,
    pub eval_every: usize,
    pub background: [f64; 3],
    pub n_static_init: usize,
    pub n_transient_seeds: usize,
    pub n_superpixels: usize,
    /// Rough scene diameter; scales initialization and density control.
    pub scene_extent: f64,
    /// Extra stage-3 steps at a tenth of every rate. 0 disables.
    pub polish_steps: usize,
    pub stages: StageConfig,
    pub lr: LrConfig,
    pub loss: LossConfig,
    pub densify: DensifySchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            seed: 0,
            holdout_every: 8,
            eval_every: 200,
            background: [0.0; 3],
            n_static_init: 200,
            n_transient_seeds: 60,
            n_superpixels: 96,
            scene_extent: 2.0,
            polish_steps: 0,
            stages: StageConfig::default(),
            lr: LrConfig::default(),
            loss: LossConfig::default(),
            densify: DensifySchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.stages.fractions;
        if f.iter().any(|&x| x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-3 {
            return Err(Error::Config(
                "stage fractions must be nonnegative and sum to 1".to_string(),
            ));
        }
        if self.holdout_every == 1 {
            return Err(Error::Config("holdout_every 1 would withhold every view".to_string()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".to_string()));
        }
        if self.n_static_init == 0 || self.n_transient_seeds == 0 {
            return Err(Error::Config("need at least one Gaussian of each kind".to_string()));
        }
        if self.scene_extent <= 0.0 {
            return Err(Error::Config("scene_extent must be positive".to_string()));
        }
        if self.n_superpixels == 0 {
            return Err(Error::Config("n_superpixels must be positive".to_string()));
        }
        if self.densify.interval == 0 {
            return Err(Error::Config("densify interval must be positive".to_string()));
        }
        Ok(())
    }

    /// Steps spent in stages 1 through 3 (polish excluded).
    pub fn stage_steps(&self) -> [usize; 3] {
        let s1 = (self.stages.fractions[0] * self.steps as f64).round() as usize;
        let s2 = (self.stages.fractions[1] * self.steps as f64).round() as usize;
        let s1 = s1.min(self.steps);
        let s2 = s2.min(self.steps - s1);
        [s1, s2, self.steps - s1 - s2]
    }

    pub fn total_steps(&self) -> usize {
        self.steps + self.polish_steps
    }

    /// 1-based stage of a 0-based step index; the polish tail is stage 4.
    pub fn stage_at(&self, step: usize) -> usize {
        let [s1, s2, _] = self.stage_steps();
        if step < s1 {
            1
        } else if step < s1 + s2 {
            2
        } else if step < self.steps {
            3
        } else {
            4
        }
    }

    fn lr_mu_at(&self, step: usize) -> f64 {
        let total = self.total_steps();
        if total <= 1 || self.lr.mu <= 0.0 {
            return self.lr.mu;
        }
        let t = step as f64 / (total - 1) as f64;
        self.lr.mu * (self.lr.mu_final / self.lr.mu).powf(t)
    }
}

pub fn default_config_toml() -> String {
    toml::to_string_pretty(&TrainConfig::default()).unwrap()
}

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

// ----- the model -----

/// Everything that trains: the persistent field, the transient field with
/// its heads and embeddings, and the mask network.
#[derive(Debug, Clone)]
pub struct Model {
    pub statics: StaticField<f32>,
    pub transient: TransientModel<f32>,
    pub mask_net: MaskNet<f32>,
}

impl Model {
    /// Random initialization inside the scene volume. Consumes the RNG in a
    /// fixed order, so a seed pins the whole model.
    pub fn init(cfg: &TrainConfig, n_views: usize, rng: &mut ChaCha8Rng) -> Model {
        use rand::Rng;
        let n = cfg.n_static_init;
        let half = (cfg.scene_extent * 0.4) as f32;
        let mut mu = Vec::with_capacity(n * 3);
        let mut sh = Vec::with_capacity(n * 12);
        let mut rot = Vec::with_capacity(n * 4);
        for _ in 0..n {
            for _ in 0..3 {
                mu.push(rng.gen_range(-half..half));
            }
            rot.extend_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            for _ in 0..3 {
                sh.push(((rng.gen_range(0.25f64..0.75) - 0.5) / SH_C0) as f32);
            }
            sh.extend_from_slice(&[0.0; 9]);
        }
        let statics = StaticField {
            mu: Tensor::new(&[n, 3], mu),
            log_scale: Tensor::full(&[n, 3], (cfg.scene_extent * 0.025).ln() as f32),
            rot: Tensor::new(&[n, 4], rot),
            opacity_logit: Tensor::full(&[n], logit(0.1f32)),
            sh: Tensor::new(&[n, 12], sh),
            uncert_logit: Tensor::full(&[n], logit(0.1f32)),
        };
        statics.validate();
        let transient = TransientModel::new(
            cfg.n_transient_seeds,
            n_views,
            Vec3([0.0; 3]),
            (cfg.scene_extent * 0.9) as f32,
            rng,
        );
        let mask_net = MaskNet::new(rng);
        Model { statics, transient, mask_net }
    }

    pub fn n_static(&self) -> usize {
        self.statics.len()
    }

    pub fn memory(&self) -> MemoryBreakdown {
        MemoryBreakdown {
            static_bytes: 4 * self.statics.len() * 24,
            transient_bytes: transient_memory_bytes(&self.transient),
            per_view_growth_bytes: crate::transient::per_view_growth_bytes(),
            per_view_baseline_bytes: crate::transient::per_view_copy_baseline_bytes(
                self.transient.n_seeds(),
                1,
            ),
        }
    }
}

/// Visit every named parameter in the canonical order. The same order
/// drives checkpoints and optimizer bookkeeping.
fn visit_params<'m>(model: &'m Model, f: &mut impl FnMut(String, &'m Tensor<f32>)) {
    f("static.mu".into(), &model.statics.mu);
    f("static.log_scale".into(), &model.statics.log_scale);
    f("static.rot".into(), &model.statics.rot);
    f("static.opacity".into(), &model.statics.opacity_logit);
    f("static.sh".into(), &model.statics.sh);
    f("static.uncert".into(), &model.statics.uncert_logit);
    f("seeds.mu".into(), &model.transient.seeds.mu);
    f("seeds.log_scale".into(), &model.transient.seeds.log_scale);
    f("seeds.rot".into(), &model.transient.seeds.rot);
    f("seeds.opacity".into(), &model.transient.seeds.opacity_logit);
    f("embeddings".into(), &model.transient.embeddings);
    f("color_bias".into(), &model.transient.color_bias);
    for (i, (w, b)) in
        model.transient.deform.weights.iter().zip(&model.transient.deform.biases).enumerate()
    {
        f(format!("deform.w{i}"), w);
        f(format!("deform.b{i}"), b);
    }
    for (i, (w, b)) in
        model.transient.color.weights.iter().zip(&model.transient.color.biases).enumerate()
    {
        f(format!("color.w{i}"), w);
        f(format!("color.b{i}"), b);
    }
    for (i, (w, b)) in model.mask_net.enc.iter().enumerate() {
        f(format!("mask.enc{i}.w"), w);
        f(format!("mask.enc{i}.b"), b);
    }
    for (i, (w, b)) in model.mask_net.dec.iter().enumerate() {
        f(format!("mask.dec{i}.w"), w);
        f(format!("mask.dec{i}.b"), b);
    }
    f("mask.head.w".into(), &model.mask_net.head.0);
    f("mask.head.b".into(), &model.mask_net.head.1);
}

pub fn param_names(model: &Model) -> Vec<String> {
    let mut names = Vec::new();
    visit_params(model, &mut |n, _| names.push(n));
    names
}

pub fn param_count(model: &Model) -> usize {
    let mut count = 0;
    visit_params(model, &mut |_, t| count += t.numel());
    count
}

// ----- checkpoints -----

/// Serialize the model: a text header naming every tensor and its shape,
/// the literal line `data`, then the tensors' f32 little-endian bytes in
/// header order. Bit-exact round trip by construction.
pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut header = format!("checkpoint format_version {CHECKPOINT_FORMAT_VERSION}\n");
    let mut blobs: Vec<u8> = Vec::new();
    visit_params(model, &mut |name, t| {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(header, "tensor {name} {}", dims.join(" "));
        for v in t.data() {
            blobs.extend_from_slice(&v.to_le_bytes());
        }
    });
    header.push_str("data\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(&blobs);
    out
}

pub fn model_from_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    let marker = b"\ndata\n";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| bad("missing data marker"))?;
    let header =
        std::str::from_utf8(&bytes[..pos]).map_err(|_| bad("header is not utf-8"))?;
    let mut blob = &bytes[pos + marker.len()..];

    let mut lines = header.lines();
    let first = lines.next().unwrap_or_default();
    if first != format!("checkpoint format_version {CHECKPOINT_FORMAT_VERSION}") {
        return Err(bad(&format!("unsupported header: {first}")));
    }
    let mut tensors: HashMap<String, Tensor<f32>> = HashMap::new();
    let mut order = Vec::new();
    for line in lines {
        let mut it = line.split_whitespace();
        if it.next() != Some("tensor") {
            return Err(bad(&format!("unexpected header line: {line}")));
        }
        let name = it.next().ok_or_else(|| bad("tensor line missing name"))?;
        let shape: Vec<usize> = it
            .map(|d| d.parse().map_err(|_| bad("bad dimension")))
            .collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        if blob.len() < numel * 4 {
            return Err(bad("checkpoint truncated"));
        }
        let (raw, rest) = blob.split_at(numel * 4);
        blob = rest;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name.to_string(), Tensor::new(&shape, data));
        order.push(name.to_string());
    }
    if !blob.is_empty() {
        return Err(bad("trailing bytes after tensors"));
    }

    let mut take = |name: &str| -> Result<Tensor<f32>> {
        tensors.remove(name).ok_or_else(|| bad(&format!("missing tensor {name}")))
    };

    let statics = StaticField {
        mu: take("static.mu")?,
        log_scale: take("static.log_scale")?,
        rot: take("static.rot")?,
        opacity_logit: take("static.opacity")?,
        sh: take("static.sh")?,
        uncert_logit: take("static.uncert")?,
    };
    let seeds = crate::splat::TransientSeeds {
        mu: take("seeds.mu")?,
        log_scale: take("seeds.log_scale")?,
        rot: take("seeds.rot")?,
        opacity_logit: take("seeds.opacity")?,
    };
    let embeddings = take("embeddings")?;
    let color_bias = take("color_bias")?;
    let mut read_mlp = |prefix: &str, layers: usize| -> Result<crate::transient::Mlp<f32>> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..layers {
            weights.push(take(&format!("{prefix}.w{i}"))?);
            biases.push(take(&format!("{prefix}.b{i}"))?);
        }
        Ok(crate::transient::Mlp { weights, biases })
    };
    let deform = read_mlp("deform", 5)?;
    let color = read_mlp("color", 3)?;
    let mut pairs = |prefix: &str, n: usize| -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
        (0..n)
            .map(|i| Ok((take(&format!("{prefix}{i}.w"))?, take(&format!("{prefix}{i}.b"))?)))
            .collect()
    };
    let mask_net = MaskNet {
        enc: pairs("mask.enc", 3)?,
        dec: pairs("mask.dec", 3)?,
        head: (take("mask.head.w")?, take("mask.head.b")?),
    };
    if !tensors.is_empty() {
        return Err(bad("checkpoint has unknown tensors"));
    }

    let model = Model {
        statics,
        transient: TransientModel { seeds, embeddings, deform, color, color_bias },
        mask_net,
    };

    // Every shape must match what a fresh model of the same sizes has;
    // a mismatch means the file was corrupted or hand-edited.
    let n_views = model.transient.embeddings.shape().first().copied().unwrap_or(0);
    if model.transient.embeddings.shape().len() != 2 || n_views == 0 {
        return Err(bad("embeddings must be [views, dim]"));
    }
    let probe_cfg = TrainConfig {
        n_static_init: model.statics.mu.shape().first().copied().unwrap_or(0).max(1),
        n_transient_seeds: model.transient.seeds.mu.shape().first().copied().unwrap_or(0).max(1),
        ..TrainConfig::default()
    };
    let probe = Model::init(&probe_cfg, n_views, &mut ChaCha8Rng::seed_from_u64(0));
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    visit_params(&probe, &mut |n, t| expected.push((n, t.shape().to_vec())));
    let mut got: Vec<(String, Vec<usize>)> = Vec::new();
    visit_params(&model, &mut |n, t| got.push((n, t.shape().to_vec())));
    for ((en, es), (gn, gs)) in expected.iter().zip(&got) {
        if en != gn || es != gs {
            return Err(bad(&format!("tensor {gn} has shape {gs:?}, expected {es:?}")));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_checkpoint_bytes(&bytes)
}

// ----- optimizer -----

struct AdamSlot {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

/// Adam with per-tensor state addressed by parameter name. Gradients with
/// any non-finite entry skip the update (and the moment update) entirely;
/// the skip count is reported in the metrics.
pub struct Adam {
    state: HashMap<String, AdamSlot>,
    pub skipped: usize,
}

impl Adam {
    pub fn new() -> Self {
        Adam { state: HashMap::new(), skipped: 0 }
    }

    /// One update. Returns false when the gradient was rejected.
    pub fn step(
        &mut self,
        name: &str,
        param: &mut Tensor<f32>,
        grad: &Tensor<f32>,
        lr: f32,
    ) -> bool {
        assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch for {name}");
        if grad.data().iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return false;
        }
        let n = param.numel();
        let slot = self.state.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        assert_eq!(slot.m.len(), n, "stale moments for {name}; reset after resizing");
        slot.t += 1;
        let (b1, b2, eps) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32, ADAM_EPS as f32);
        let bc1 = 1.0 - b1.powi(slot.t);
        let bc2 = 1.0 - b2.powi(slot.t);
        let p = param.data_mut();
        for i in 0..n {
            let g = grad.data()[i];
            slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
            slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
            p[i] -= lr * (slot.m[i] / bc1) / ((slot.v[i] / bc2).sqrt() + eps);
        }
        true
    }

    /// Drop state for every parameter whose name starts with `prefix`.
    /// Required whenever densification changes tensor sizes.
    pub fn reset_prefix(&mut self, prefix: &str) {
        self.state.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn tracked(&self) -> usize {
        self.state.len()
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new()
    }
}

// ----- metrics -----

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: usize,
    pub loss: f64,
    pub photometric: f64,
    pub mask_bce: f64,
    pub mask_reg: f64,
    pub anchor: f64,
    pub uncertainty: f64,
    pub eval_psnr: f64,
    pub eval_ssim: f64,
    pub n_static: usize,
    pub skipped_grads: usize,
    pub memory_bytes: usize,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(
        "step,stage,loss,photometric,mask_bce,mask_reg,anchor,uncertainty,\
         eval_psnr,eval_ssim,n_static,skipped_grads,memory_bytes\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.stage,
            r.loss,
            r.photometric,
            r.mask_bce,
            r.mask_reg,
            r.anchor,
            r.uncertainty,
            r.eval_psnr,
            r.eval_ssim,
            r.n_static,
            r.skipped_grads,
            r.memory_bytes
        );
    }
    out
}

// ----- one optimization step -----

struct StageSets {
    mask: bool,
    transient_heads: bool,
    seeds: bool,
    uncertainty: bool,
}

fn stage_sets(stage: usize) -> StageSets {
    StageSets {
        mask: stage >= 2,
        transient_heads: stage >= 2,
        seeds: stage >= 3,
        uncertainty: stage >= 2,
    }
}

struct StepLosses {
    total: f64,
    photometric: f64,
    mask_bce: f64,
    mask_reg: f64,
    anchor: f64,
    uncertainty: f64,
}

struct StaticLeaves {
    mu: Var<f32>,
    log_scale: Var<f32>,
    rot: Var<f32>,
    opacity: Var<f32>,
    sh: Var<f32>,
}

struct TransientLeaves {
    mu: Var<f32>,
    log_scale: Var<f32>,
    rot: Var<f32>,
    opacity: Var<f32>,
    embeddings: Var<f32>,
    color_bias: Var<f32>,
    deform: MlpVars<f32>,
    color: MlpVars<f32>,
}

/// Apply one Adam update per trainable leaf, in canonical order.
#[allow(clippy::too_many_arguments)]
fn apply_updates(
    model: &mut Model,
    adam: &mut Adam,
    cfg: &TrainConfig,
    step: usize,
    stage: usize,
    statics: &StaticLeaves,
    uncert: Option<&Var<f32>>,
    transients: Option<&TransientLeaves>,
    mask: Option<&MaskNetVars<f32>>,
) {
    let polish = if stage == 4 { 0.1 } else { 1.0 };
    let mut upd = |name: String, var: &Var<f32>, param: &mut Tensor<f32>, lr: f64| {
        if let Some(gr) = var.grad() {
            adam.step(&name, param, &gr, (lr * polish) as f32);
        }
    };

    let lr = &cfg.lr;
    upd("static.mu".into(), &statics.mu, &mut model.statics.mu, cfg.lr_mu_at(step));
    upd("static.log_scale".into(), &statics.log_scale, &mut model.statics.log_scale, lr.log_scale);
    upd("static.rot".into(), &statics.rot, &mut model.statics.rot, lr.rotation);
    upd("static.opacity".into(), &statics.opacity, &mut model.statics.opacity_logit, lr.opacity);
    upd("static.sh".into(), &statics.sh, &mut model.statics.sh, lr.sh);
    if let Some(u) = uncert {
        upd("static.uncert".into(), u, &mut model.statics.uncert_logit, lr.uncertainty);
    }
    if let Some(t) = transients {
        upd("seeds.mu".into(), &t.mu, &mut model.transient.seeds.mu, cfg.lr_mu_at(step));
        upd(
            "seeds.log_scale".into(),
            &t.log_scale,
            &mut model.transient.seeds.log_scale,
            lr.log_scale,
        );
        upd("seeds.rot".into(), &t.rot, &mut model.transient.seeds.rot, lr.rotation);
        upd(
            "seeds.opacity".into(),
            &t.opacity,
            &mut model.transient.seeds.opacity_logit,
            lr.opacity,
        );
        upd("embeddings".into(), &t.embeddings, &mut model.transient.embeddings, lr.embeddings);
        upd("color_bias".into(), &t.color_bias, &mut model.transient.color_bias, lr.networks);
        for i in 0..t.deform.weights.len() {
            upd(
                format!("deform.w{i}"),
                &t.deform.weights[i],
                &mut model.transient.deform.weights[i],
                lr.networks,
            );
            upd(
                format!("deform.b{i}"),
                &t.deform.biases[i],
                &mut model.transient.deform.biases[i],
                lr.networks,
            );
        }
        for i in 0..t.color.weights.len() {
            upd(
                format!("color.w{i}"),
                &t.color.weights[i],
                &mut model.transient.color.weights[i],
                lr.networks,
            );
            upd(
                format!("color.b{i}"),
                &t.color.biases[i],
                &mut model.transient.color.biases[i],
                lr.networks,
            );
        }
    }
    if let Some(m) = mask {
        for i in 0..m.enc.len() {
            upd(format!("mask.enc{i}.w"), &m.enc[i].0, &mut model.mask_net.enc[i].0, lr.networks);
            upd(format!("mask.enc{i}.b"), &m.enc[i].1, &mut model.mask_net.enc[i].1, lr.networks);
        }
        for i in 0..m.dec.len() {
            upd(format!("mask.dec{i}.w"), &m.dec[i].0, &mut model.mask_net.dec[i].0, lr.networks);
            upd(format!("mask.dec{i}.b"), &m.dec[i].1, &mut model.mask_net.dec[i].1, lr.networks);
        }
        upd("mask.head.w".into(), &m.head.0, &mut model.mask_net.head.0, lr.networks);
        upd("mask.head.b".into(), &m.head.1, &mut model.mask_net.head.1, lr.networks);
    }
}

// ----- training -----

pub struct TrainOutput {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub densify_events: Vec<DensifyEvent>,
    pub skipped_grads: usize,
}

pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(data, cfg, |_| {})
}

/// Run the full schedule; `on_metrics` fires for every logged row as it is
/// produced (training still returns all rows).
pub fn train_with(
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_metrics: impl FnMut(&MetricsRow),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.n_views() == 0 {
        return Err(Error::Config("dataset has no views".to_string()));
    }
    let train_views = data.train_views(cfg.holdout_every);
    let total = cfg.total_steps();
    if total > 0 && train_views.is_empty() {
        return Err(Error::Config("holdout schedule leaves no training views".to_string()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(cfg, data.n_views(), &mut rng);
    let mut densify_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d1ce);
    let mut adam = Adam::new();
    let mut stats = DensifyStats::<f32>::new(model.n_static(), data.n_views());
    let bg = cfg.background.map(|v| v as f32);
    let densify_until = (cfg.densify.until_frac * cfg.steps as f64).round() as usize;
    let densify_cfg = cfg.densify.to_config(cfg.scene_extent);

    // Superpixels depend only on the input image; computed once per view
    // when stage 2 first needs them.
    let mut sp_cache: Vec<Option<Superpixels>> = vec![None; data.n_views()];

    let mut metrics = Vec::new();
    let mut densify_events = Vec::new();

    for step in 0..total {
        let stage = cfg.stage_at(step);
        let sets = stage_sets(stage);
        let view = train_views[step % train_views.len()];
        let cam = &data.cameras[view];
        let gt = &data.images[view];

        let g = Graph::<f32>::new();
        let statics = StaticLeaves {
            mu: g.leaf(model.statics.mu.clone(), true),
            log_scale: g.leaf(model.statics.log_scale.clone(), true),
            rot: g.leaf(model.statics.rot.clone(), true),
            opacity: g.leaf(model.statics.opacity_logit.clone(), true),
            sh: g.leaf(model.statics.sh.clone(), true),
        };
        let alpha = statics.opacity.sigmoid();
        let color = sh_colors(&statics.sh, &statics.mu, cam);
        let (static_img, aux) =
            render_gaussians(&statics.mu, &statics.log_scale, &statics.rot, &alpha, &color, cam, bg);

        let mut uncert_leaf = None;
        let mut transient_leaves = None;
        let mut mask_vars = None;
        let losses;
        let loss_var;

        if stage == 1 {
            let l = photometric(&static_img, gt, cfg.loss.lambda_ssim);
            let lv = l.value().item() as f64;
            losses = StepLosses {
                total: lv,
                photometric: lv,
                mask_bce: 0.0,
                mask_reg: 0.0,
                anchor: 0.0,
                uncertainty: 0.0,
            };
            loss_var = l;
        } else {
            // Transient branch: deform the seeds for this view and render.
            let t = TransientLeaves {
                mu: g.leaf(model.transient.seeds.mu.clone(), sets.seeds),
                log_scale: g.leaf(model.transient.seeds.log_scale.clone(), sets.seeds),
                rot: g.leaf(model.transient.seeds.rot.clone(), sets.seeds),
                opacity: g.leaf(model.transient.seeds.opacity_logit.clone(), sets.seeds),
                embeddings: g.leaf(model.transient.embeddings.clone(), sets.transient_heads),
                color_bias: g.leaf(model.transient.color_bias.clone(), sets.transient_heads),
                deform: model.transient.deform.on_graph(&g, sets.transient_heads),
                color: model.transient.color.on_graph(&g, sets.transient_heads),
            };
            let emb = t.embeddings.slice(0, view, 1);
            let (d_mu, d_ls, d_rot, d_op) =
                deform(&t.mu, &t.log_scale, &t.rot, &t.opacity, &emb, &t.deform);
            let t_alpha = d_op.sigmoid();
            let t_color = seed_colors(&t.mu, &emb, &t.color, &t.color_bias);
            // The transient field renders over the detached static image:
            // where its seeds are thin it reproduces the static render, so
            // joint training starts from parity and the field only has to
            // explain what the statics cannot. The backdrop carries no
            // gradient, so the static parameters never see this path.
            let (transient_img, _) = crate::raster::render_gaussians_over(
                &d_mu,
                &d_ls,
                &d_rot,
                &t_alpha,
                &t_color,
                cam,
                &static_img.value(),
            );

            // Mask branch: predict from the image and the detached render
            // residual, refine over superpixels for the supervision target.
            let m = model.mask_net.on_graph(&g, sets.mask);
            let m_in = g.constant(mask_input(gt, &static_img.value()));
            let m_o = m.forward(&m_in);
            let sp = sp_cache[view].get_or_insert_with(|| {
                slic(gt, cfg.n_superpixels).expect("superpixel count validated")
            });
            let m_s = refine_mask(&m_o.value(), sp);

            let composed = compose(&m_o, &transient_img, &static_img);
            let l_photo = photometric(&composed, gt, cfg.loss.lambda_ssim);
            let l_bce = bce(&m_o, &m_s).scale(cfg.loss.lambda_mask_bce as f32);
            let l_reg = m_o.square().mean().scale(cfg.loss.lambda_mask_reg as f32);
            let l_anchor =
                transient_anchor(&transient_img, gt, &m_s, cfg.loss.fit_anchor_on_mask)
                    .scale(cfg.loss.transient_anchor as f32);

            let u = g.leaf(model.statics.uncert_logit.clone(), sets.uncertainty);
            let alpha_detached =
                model.statics.opacity_logit.map(crate::diffcore::sigmoid);
            let u_map = composite_attribute(
                &model.statics.mu,
                &model.statics.log_scale,
                &model.statics.rot,
                &alpha_detached,
                &u.sigmoid(),
                cam,
                AttributeBlend::Composited,
            );
            let l_unc = uncertainty_loss(&u_map, &m_s).scale(cfg.loss.uncertainty as f32);

            let l = l_photo.add(&l_bce).add(&l_reg).add(&l_anchor).add(&l_unc);
            losses = StepLosses {
                total: l.value().item() as f64,
                photometric: l_photo.value().item() as f64,
                mask_bce: l_bce.value().item() as f64,
                mask_reg: l_reg.value().item() as f64,
                anchor: l_anchor.value().item() as f64,
                uncertainty: l_unc.value().item() as f64,
            };
            loss_var = l;
            uncert_leaf = Some(u);
            transient_leaves = Some(t);
            mask_vars = Some(m);
        }

        if !losses.total.is_finite() {
            return Err(Error::Invalid(format!(
                "non-finite loss {} at step {step} (view {view})",
                losses.total
            )));
        }

        g.backward(&loss_var);
        apply_updates(
            &mut model,
            &mut adam,
            cfg,
            step,
            stage,
            &statics,
            uncert_leaf.as_ref(),
            transient_leaves.as_ref(),
            mask_vars.as_ref(),
        );

        {
            let aux = aux.borrow();
            if aux.backward_ran {
                stats.absorb(&aux, view);
            }
        }

        // Density control: fixed window, fixed cadence, then fresh moments
        // for the static tensors whose rows changed identity.
        if step >= cfg.densify.from_step
            && step <= densify_until
            && step % cfg.densify.interval == 0
        {
            let outcome = densify_and_prune(
                &mut model.statics,
                &stats,
                &data.cameras,
                &densify_cfg,
                &mut densify_rng,
                step,
            );
            if !outcome.events.is_empty() {
                densify_events.extend(outcome.events);
                adam.reset_prefix("static.");
            }
            stats.reset(model.n_static());
        }

        if (step + 1) % cfg.eval_every == 0 || step + 1 == total {
            let eval_views = {
                let held = data.holdout_views(cfg.holdout_every);
                if held.is_empty() {
                    train_views.clone()
                } else {
                    held
                }
            };
            let mut psnr_sum = 0.0;
            let mut ssim_sum = 0.0;
            for &v in &eval_views {
                let img = render_static(&model.statics, &data.cameras[v], bg);
                psnr_sum += psnr(&img, &data.clean[v]);
                ssim_sum += ssim_metric(&img, &data.clean[v]);
            }
            let row = MetricsRow {
                step,
                stage,
                loss: losses.total,
                photometric: losses.photometric,
                mask_bce: losses.mask_bce,
                mask_reg: losses.mask_reg,
                anchor: losses.anchor,
                uncertainty: losses.uncertainty,
                eval_psnr: psnr_sum / eval_views.len() as f64,
                eval_ssim: ssim_sum / eval_views.len() as f64,
                n_static: model.n_static(),
                skipped_grads: adam.skipped,
                memory_bytes: model.memory().static_bytes + model.memory().transient_bytes,
            };
            on_metrics(&row);
            metrics.push(row);
        }
    }

    Ok(TrainOutput { model, metrics, densify_events, skipped_grads: adam.skipped })
}

// ----- inference helpers -----

/// Everything the pipeline produces for one view, detached. Used by the
/// CLI renderers and the evaluator.
pub struct ViewOutputs {
    pub static_img: Tensor<f32>,
    pub transient_img: Tensor<f32>,
    pub composed: Tensor<f32>,
    /// Soft mask straight from the network.
    pub m_o: Tensor<f32>,
    /// Superpixel-refined binary mask.
    pub m_s: Tensor<f32>,
}

pub fn view_outputs(
    model: &Model,
    data: &Dataset,
    view: usize,
    n_superpixels: usize,
    background: [f32; 3],
) -> Result<ViewOutputs> {
    let cam = &data.cameras[view];
    let gt = &data.images[view];
    let static_img = render_static(&model.statics, cam, background);

    let g = Graph::<f32>::new();
    let t_mu = g.constant(model.transient.seeds.mu.clone());
    let t_ls = g.constant(model.transient.seeds.log_scale.clone());
    let t_rot = g.constant(model.transient.seeds.rot.clone());
    let t_op = g.constant(model.transient.seeds.opacity_logit.clone());
    let emb_all = g.constant(model.transient.embeddings.clone());
    let emb = emb_all.slice(0, view, 1);
    let deform_net = model.transient.deform.on_graph(&g, false);
    let color_net = model.transient.color.on_graph(&g, false);
    let cbias = g.constant(model.transient.color_bias.clone());
    let (d_mu, d_ls, d_rot, d_op) = deform(&t_mu, &t_ls, &t_rot, &t_op, &emb, &deform_net);
    // Same backdrop convention as training: the transient view is the
    // static render with this view's distractors painted on top.
    let (transient_var, _) = crate::raster::render_gaussians_over(
        &d_mu,
        &d_ls,
        &d_rot,
        &d_op.sigmoid(),
        &seed_colors(&t_mu, &emb, &color_net, &cbias),
        cam,
        &static_img,
    );
    let transient_img = transient_var.value();

    let mask_vars = model.mask_net.on_graph(&g, false);
    let m_o = mask_vars.forward(&g.constant(mask_input(gt, &static_img))).value();
    let sp = slic(gt, n_superpixels)?;
    let m_s = refine_mask(&m_o, &sp);

    let (h, w) = (cam.height, cam.width);
    let mut composed = Tensor::zeros(&[h, w, 3]);
    for p in 0..h * w {
        let m = m_o.data()[p];
        for c in 0..3 {
            composed.data_mut()[p * 3 + c] =
                m * transient_img.data()[p * 3 + c] + (1.0 - m) * static_img.data()[p * 3 + c];
        }
    }
    Ok(ViewOutputs { static_img, transient_img, composed, m_o, m_s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{generate_scene, SceneConfig};

    fn tiny_scene() -> Dataset {
        generate_scene(&SceneConfig {
            width: 24,
            height: 24,
            n_views: 4,
            n_gaussians: 25,
            occluder_coverage: 0.15,
            seed: 3,
            ..SceneConfig::default()
        })
        .unwrap()
        .dataset
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            steps: 8,
            seed: 5,
            holdout_every: 4,
            eval_every: 4,
            n_static_init: 12,
            n_transient_seeds: 6,
            n_superpixels: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_descends_a_bowl_to_machine_precision() {
        let target: Vec<f32> = (0..10).map(|i| i as f32 * 0.3 - 1.0).collect();
        let mut x = Tensor::zeros(&[10]);
        let mut adam = Adam::new();
        let mut loss = f32::MAX;
        for step in 0..2000 {
            let grad = Tensor::from_fn(&[10], |i| 2.0 * (x.data()[i] - target[i]));
            loss = x
                .data()
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if loss < 1e-6 {
                break;
            }
            adam.step("x", &mut x, &grad, 0.1);
            assert!(step < 1999, "did not converge: loss {loss}");
        }
        assert!(loss < 1e-6);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut x = Tensor::full(&[3], 1.0f32);
        let before = x.clone();
        let mut adam = Adam::new();
        let bad = Tensor::new(&[3], vec![0.1, f32::NAN, 0.2]);
        assert!(!adam.step("x", &mut x, &bad, 0.1));
        assert_eq!(x, before, "rejected step must not touch the parameter");
        assert_eq!(adam.skipped, 1);
        let inf = Tensor::new(&[3], vec![0.1, f32::INFINITY, 0.2]);
        assert!(!adam.step("x", &mut x, &inf, 0.1));
        assert_eq!(adam.skipped, 2);
        assert!(adam.step("x", &mut x, &Tensor::full(&[3], 0.5), 0.1));
        assert_ne!(x, before);
    }

    #[test]
    fn adam_reset_by_prefix() {
        let mut adam = Adam::new();
        let g = Tensor::full(&[2], 1.0f32);
        adam.step("static.mu", &mut Tensor::zeros(&[2]), &g, 0.1);
        adam.step("static.sh", &mut Tensor::zeros(&[2]), &g, 0.1);
        adam.step("mask.head.w", &mut Tensor::zeros(&[2]), &g, 0.1);
        assert_eq!(adam.tracked(), 3);
        adam.reset_prefix("static.");
        assert_eq!(adam.tracked(), 1);
    }

    #[test]
    fn stage_schedule_and_lr_decay() {
        let cfg = TrainConfig { steps: 8, polish_steps: 2, ..TrainConfig::default() };
        let stages: Vec<usize> = (0..10).map(|s| cfg.stage_at(s)).collect();
        assert_eq!(stages, vec![1, 1, 1, 1, 2, 2, 3, 3, 4, 4]);
        assert_eq!(cfg.stage_steps(), [4, 2, 2]);

        assert!((cfg.lr_mu_at(0) - cfg.lr.mu).abs() < 1e-12);
        assert!((cfg.lr_mu_at(9) - cfg.lr.mu_final).abs() < 1e-12);
        assert!(cfg.lr_mu_at(5) < cfg.lr.mu && cfg.lr_mu_at(5) > cfg.lr.mu_final);

        let one_stage = TrainConfig {
            steps: 6,
            stages: StageConfig { fractions: [1.0, 0.0, 0.0] },
            ..TrainConfig::default()
        };
        assert!((0..6).all(|s| one_stage.stage_at(s) == 1));
    }

    #[test]
    fn config_toml_round_trip_and_partial_overrides() {
        let dumped = default_config_toml();
        let parsed = parse_config(&dumped).unwrap();
        assert_eq!(parsed, TrainConfig::default());

        let partial = parse_config("steps = 42\n[lr]\nmu = 0.5\n").unwrap();
        assert_eq!(partial.steps, 42);
        assert_eq!(partial.lr.mu, 0.5);
        assert_eq!(partial.lr.sh, TrainConfig::default().lr.sh);
        assert_eq!(partial.densify.mode, DensifyMode::UncertaintyAware);

        let classic = parse_config("[densify]\nmode = \"classic\"\n").unwrap();
        assert_eq!(classic.densify.mode, DensifyMode::Classic);

        assert!(parse_config("steps = \"many\"").is_err());
        assert!(parse_config("[stages]\nfractions = [0.9, 0.3, 0.3]\n").is_err());
        assert!(parse_config("holdout_every = 1").is_err());
    }

    #[test]
    fn model_init_is_deterministic_and_named_params_are_unique() {
        let cfg = tiny_config();
        let a = Model::init(&cfg, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = Model::init(&cfg, 4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(checkpoint_bytes(&a), checkpoint_bytes(&b));

        let names = param_names(&a);
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        // 6 static + 4 seed + embeddings + color_bias + 2*5 deform +
        // 2*3 color + 2*3 enc + 2*3 dec + 2 head.
        assert_eq!(names.len(), 6 + 4 + 2 + 10 + 6 + 6 + 6 + 2);
        assert!(param_count(&a) > 0);
    }

    #[test]
    fn checkpoints_round_trip_byte_exactly() {
        let cfg = tiny_config();
        let model = Model::init(&cfg, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let bytes = checkpoint_bytes(&model);
        let back = model_from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&back), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(checkpoint_bytes(&loaded), bytes);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let model = Model::init(&tiny_config(), 4, &mut ChaCha8Rng::seed_from_u64(1));
        let bytes = checkpoint_bytes(&model);
        assert!(matches!(
            model_from_checkpoint_bytes(&bytes[..bytes.len() - 8]),
            Err(Error::Checkpoint(_))
        ));
        let mut wrong_version = bytes.clone();
        wrong_version[23] = b'9'; // the version digit
        assert!(model_from_checkpoint_bytes(&wrong_version).is_err());
        assert!(model_from_checkpoint_bytes(b"not a checkpoint").is_err());
    }

    #[test]
    fn zero_steps_returns_the_initial_model() {
        let data = tiny_scene();
        let cfg = TrainConfig { steps: 0, ..tiny_config() };
        let out = train(&data, &cfg).unwrap();
        let init = Model::init(&cfg, data.n_views(), &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        assert_eq!(checkpoint_bytes(&out.model), checkpoint_bytes(&init));
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn same_seed_runs_are_bit_identical() {
        let data = tiny_scene();
        let cfg = tiny_config();
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(checkpoint_bytes(&a.model), checkpoint_bytes(&b.model));
        assert_eq!(a.densify_events, b.densify_events);

        let c = train(&data, &TrainConfig { seed: 99, ..cfg }).unwrap();
        assert_ne!(checkpoint_bytes(&a.model), checkpoint_bytes(&c.model));
    }

    #[test]
    fn all_stages_execute_and_losses_are_finite() {
        let data = tiny_scene();
        let out = train(&data, &tiny_config()).unwrap();
        assert!(!out.metrics.is_empty());
        let stages: std::collections::HashSet<usize> =
            out.metrics.iter().map(|r| r.stage).collect();
        assert!(stages.contains(&2) || stages.contains(&3));
        for row in &out.metrics {
            assert!(row.loss.is_finite());
            assert!(row.eval_psnr.is_finite());
        }
        let csv = metrics_csv(&out.metrics);
        assert!(csv.starts_with("step,stage,loss"));
        assert_eq!(csv.lines().count(), out.metrics.len() + 1);
    }

    #[test]
    fn stage_one_fitting_improves_holdout_psnr() {
        let data = generate_scene(&SceneConfig {
            width: 32,
            height: 32,
            n_views: 6,
            n_gaussians: 30,
            occluder_coverage: 0.0,
            seed: 21,
            ..SceneConfig::default()
        })
        .unwrap()
        .dataset;
        let cfg = TrainConfig {
            steps: 220,
            eval_every: 220,
            holdout_every: 6,
            n_static_init: 60,
            n_transient_seeds: 4,
            stages: StageConfig { fractions: [1.0, 0.0, 0.0] },
            densify: DensifySchedule { from_step: 80, interval: 60, ..Default::default() },
            ..TrainConfig::default()
        };
        let init = Model::init(&cfg, data.n_views(), &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let before = psnr(
            &render_static(&init.statics, &data.cameras[0], [0.0; 3]),
            &data.clean[0],
        );
        let out = train(&data, &cfg).unwrap();
        let after = out.metrics.last().unwrap().eval_psnr;
        assert!(
            after > before + 4.0,
            "psnr should climb several dB: {before:.2} -> {after:.2}"
        );
    }

    #[test]
    fn densification_fires_inside_its_window_and_training_survives() {
        let data = tiny_scene();
        let cfg = TrainConfig {
            steps: 10,
            stages: StageConfig { fractions: [1.0, 0.0, 0.0] },
            densify: DensifySchedule {
                from_step: 2,
                until_frac: 1.0,
                interval: 3,
                grad_threshold: 0.0, // every observed Gaussian qualifies
                max_gaussians: 40,
                ..Default::default()
            },
            ..tiny_config()
        };
        let out = train(&data, &cfg).unwrap();
        assert!(!out.densify_events.is_empty());
        for e in &out.densify_events {
            assert!(e.step >= 2 && e.step % 3 == 0);
        }
        assert!(out.model.n_static() <= 40);
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let mut data = tiny_scene();
        data.images[1].data_mut()[0] = f32::NAN;
        let cfg = TrainConfig { holdout_every: 0, ..tiny_config() };
        let msg = match train(&data, &cfg) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("training should abort on a NaN image"),
        };
        assert!(msg.contains("step") && msg.contains("view 1"), "{msg}");
    }

    #[test]
    fn view_outputs_are_consistent() {
        let data = tiny_scene();
        let cfg = tiny_config();
        let out = train(&data, &cfg).unwrap();
        let vo = view_outputs(&out.model, &data, 1, cfg.n_superpixels, [0.0; 3]).unwrap();
        assert_eq!(vo.static_img.shape(), &[24, 24, 3]);
        assert_eq!(vo.m_o.shape(), &[24, 24]);
        assert!(vo.m_o.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(vo.m_s.data().iter().all(|&v| v == 0.0 || v == 1.0));
        // Composite interpolates, so it stays inside the hull of the two.
        for p in 0..24 * 24 * 3 {
            let (s, t, c) =
                (vo.static_img.data()[p], vo.transient_img.data()[p], vo.composed.data()[p]);
            assert!(c >= s.min(t) - 1e-6 && c <= s.max(t) + 1e-6);
        }
    }
}
