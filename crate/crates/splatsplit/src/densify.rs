//! Density control for the static field: gradient-driven splitting and
//! cloning, with an uncertainty-aware twist.
//!
//! Screen-space position gradients are accumulated per Gaussian across
//! renders. Gaussians whose mean gradient norm crosses a threshold are
//! split (if large) or cloned (if small); unlike classic density control
//! the new copy is placed along the accumulated gradient direction,
//! back-projected into the scene through the camera that saw the Gaussian
//! most. Pruning removes nearly transparent Gaussians and, in
//! uncertainty-aware mode, those whose learned uncertainty marks them as
//! transient-contaminated. Every decision is logged as one event line and
//! the whole pass is bit-reproducible for a fixed seed.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{sigmoid, Scalar, Tensor};
use crate::raster::RenderAux;
use crate::splat::{quat_to_rot, Camera, StaticField, Vec3};

/// Densification mode: the full scheme or the classic baseline it is
/// measured against (no directional shift, no uncertainty pruning).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensifyMode {
    UncertaintyAware,
    Classic,
}

#[derive(Debug, Clone)]
pub struct DensifyConfig {
    /// Mean screen-gradient norm (pixels) above which a Gaussian densifies.
    pub grad_threshold: f64,
    /// Fraction of the scene extent separating splits from clones.
    pub scale_threshold_frac: f64,
    pub scene_extent: f64,
    /// Prune below this opacity.
    pub min_alpha: f64,
    /// Prune above this uncertainty (after the sigmoid).
    pub uncertainty_threshold: f64,
    /// Hard cap on the static field size.
    pub max_gaussians: usize,
    /// Split children shrink by this factor.
    pub split_scale_shrink: f64,
    pub mode: DensifyMode,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            grad_threshold: 2e-4,
            scale_threshold_frac: 0.01,
            scene_extent: 1.0,
            min_alpha: 0.005,
            uncertainty_threshold: 0.9,
            max_gaussians: 50_000,
            split_scale_shrink: 1.6,
            mode: DensifyMode::UncertaintyAware,
        }
    }
}

/// Running per-Gaussian statistics between densification events.
#[derive(Debug, Clone)]
pub struct DensifyStats<T> {
    sum_grad: Vec<[T; 2]>,
    sum_norm: Vec<T>,
    sum_coverage: Vec<T>,
    observations: Vec<u32>,
    /// Coverage sums per view, for picking the dominant camera.
    view_coverage: Vec<Vec<T>>,
}

impl<T: Scalar> DensifyStats<T> {
    pub fn new(n_gaussians: usize, n_views: usize) -> Self {
        DensifyStats {
            sum_grad: vec![[T::zero(); 2]; n_gaussians],
            sum_norm: vec![T::zero(); n_gaussians],
            sum_coverage: vec![T::zero(); n_gaussians],
            observations: vec![0; n_gaussians],
            view_coverage: vec![vec![T::zero(); n_gaussians]; n_views],
        }
    }

    pub fn len(&self) -> usize {
        self.sum_norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum_norm.is_empty()
    }

    /// Fold one render's gradients and coverage into the running sums.
    /// Call after the backward pass has filled the side channel.
    pub fn absorb(&mut self, aux: &RenderAux<T>, view: usize) {
        assert!(aux.backward_ran, "absorb needs a completed backward pass");
        assert_eq!(aux.grad_mean2d.len(), self.len(), "field size changed under stats");
        for i in 0..self.len() {
            let g = aux.grad_mean2d[i];
            self.sum_grad[i][0] = self.sum_grad[i][0] + g[0];
            self.sum_grad[i][1] = self.sum_grad[i][1] + g[1];
            self.sum_norm[i] = self.sum_norm[i] + (g[0] * g[0] + g[1] * g[1]).sqrt();
            self.sum_coverage[i] = self.sum_coverage[i] + aux.coverage[i];
            self.observations[i] += 1;
            self.view_coverage[view][i] = self.view_coverage[view][i] + aux.coverage[i];
        }
    }

    pub fn reset(&mut self, n_gaussians: usize) {
        let views = self.view_coverage.len();
        *self = DensifyStats::new(n_gaussians, views);
    }

    pub fn mean_grad_norm(&self, i: usize) -> T {
        if self.observations[i] == 0 {
            T::zero()
        } else {
            self.sum_norm[i] / T::c(self.observations[i] as f64)
        }
    }

    pub fn mean_coverage(&self, i: usize) -> T {
        if self.observations[i] == 0 {
            T::zero()
        } else {
            self.sum_coverage[i] / T::c(self.observations[i] as f64)
        }
    }

    /// Unit direction of the accumulated screen gradient; zero if nothing
    /// accumulated.
    pub fn grad_direction(&self, i: usize) -> [T; 2] {
        let g = self.sum_grad[i];
        let n = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if n > T::zero() {
            [g[0] / n, g[1] / n]
        } else {
            [T::zero(); 2]
        }
    }

    /// View that saw this Gaussian most (by summed coverage, first wins ties).
    pub fn dominant_view(&self, i: usize) -> usize {
        let mut best = 0;
        for v in 1..self.view_coverage.len() {
            if self.view_coverage[v][i] > self.view_coverage[best][i] {
                best = v;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensifyOp {
    Split,
    Clone,
    PruneAlpha,
    PruneUncertainty,
}

impl fmt::Display for DensifyOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DensifyOp::Split => "split",
            DensifyOp::Clone => "clone",
            DensifyOp::PruneAlpha => "prune-alpha",
            DensifyOp::PruneUncertainty => "prune-uncertainty",
        })
    }
}

/// One structured log line: what happened, to which Gaussian, where.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyEvent {
    pub step: usize,
    pub op: DensifyOp,
    /// Index in the field as it was when the pass started.
    pub id: usize,
    /// New child position for split/clone, the removed Gaussian's position
    /// for prunes.
    pub position: [f64; 3],
}

impl fmt::Display for DensifyEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} {} id {} at ({:.6}, {:.6}, {:.6})",
            self.step, self.op, self.id, self.position[0], self.position[1], self.position[2]
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct DensifyOutcome {
    pub events: Vec<DensifyEvent>,
    /// Candidates dropped because the budget was hit, lowest gradients first.
    pub skipped_for_budget: usize,
}

fn row3<T: Scalar>(t: &Tensor<T>, i: usize) -> [T; 3] {
    let r = t.row(i);
    [r[0], r[1], r[2]]
}

/// The directional offset for new Gaussians: the accumulated screen
/// gradient direction, scaled by mean coverage and the parent's largest
/// scale, lifted into the scene through the dominant view's image plane.
fn world_shift<T: Scalar>(
    stats: &DensifyStats<T>,
    i: usize,
    max_scale: T,
    cam: &Camera<T>,
) -> Vec3<T> {
    let dir = stats.grad_direction(i);
    let mag = stats.mean_coverage(i) * max_scale;
    // Rows of the camera rotation are the image-plane axes in world space.
    let r = cam.rot.transpose();
    Vec3([
        r.0[0][0] * dir[0] + r.0[0][1] * dir[1],
        r.0[1][0] * dir[0] + r.0[1][1] * dir[1],
        r.0[2][0] * dir[0] + r.0[2][1] * dir[1],
    ])
    .scale(mag)
}

/// One densification pass. Splits large high-gradient Gaussians into two
/// shrunken children sampled from the parent (removing the parent), clones
/// small ones, prunes transparent and (in uncertainty-aware mode)
/// high-uncertainty Gaussians. Iteration order and RNG use are fixed, so a
/// fixed seed reproduces the pass bit for bit.
pub fn densify_and_prune<T: Scalar>(
    field: &mut StaticField<T>,
    stats: &DensifyStats<T>,
    cams: &[Camera<T>],
    cfg: &DensifyConfig,
    rng: &mut impl Rng,
    step: usize,
) -> DensifyOutcome {
    let n = field.len();
    assert_eq!(stats.len(), n, "stats do not match this field");
    let mut outcome = DensifyOutcome::default();

    // High-gradient candidates, then budget-capped keeping the largest.
    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            stats.observations[i] > 0
                && stats.mean_grad_norm(i).f64() > cfg.grad_threshold
        })
        .collect();
    if n + candidates.len() > cfg.max_gaussians {
        let budget = cfg.max_gaussians.saturating_sub(n);
        candidates.sort_by(|&a, &b| {
            stats
                .mean_grad_norm(b)
                .partial_cmp(&stats.mean_grad_norm(a))
                .unwrap()
                .then(a.cmp(&b))
        });
        outcome.skipped_for_budget = candidates.len() - budget;
        candidates.truncate(budget);
        candidates.sort_unstable();
    }

    let scale_cut = T::c(cfg.scale_threshold_frac * cfg.scene_extent);
    let shrink = T::c(cfg.split_scale_shrink.ln());
    let mut remove = vec![false; n];
    let mut children = StaticField::empty();
    let mut push_child = |mu: Vec3<T>, log_scale: [T; 3], parent: usize, field: &StaticField<T>| {
        children.mu = children.mu.concat_rows(&Tensor::new(&[1, 3], mu.0.to_vec()));
        children.log_scale = children
            .log_scale
            .concat_rows(&Tensor::new(&[1, 3], log_scale.to_vec()));
        children.rot = children
            .rot
            .concat_rows(&Tensor::new(&[1, 4], field.rot.row(parent).to_vec()));
        children.opacity_logit = children.opacity_logit.concat_rows(&Tensor::new(
            &[1],
            vec![field.opacity_logit.data()[parent]],
        ));
        children.sh = children
            .sh
            .concat_rows(&Tensor::new(&[1, 12], field.sh.row(parent).to_vec()));
        children.uncert_logit = children.uncert_logit.concat_rows(&Tensor::new(
            &[1],
            vec![field.uncert_logit.data()[parent]],
        ));
    };

    for &i in &candidates {
        let ls = row3(&field.log_scale, i);
        let max_scale = ls[0].max(ls[1]).max(ls[2]).exp();
        let shift = match cfg.mode {
            DensifyMode::UncertaintyAware => {
                world_shift(stats, i, max_scale, &cams[stats.dominant_view(i)])
            }
            DensifyMode::Classic => Vec3::zero(),
        };
        let mu = Vec3(row3(&field.mu, i));

        if max_scale > scale_cut {
            // Split: two children drawn from the parent's own footprint,
            // scales shrunk; the parent goes away.
            let q = field.rot.row(i);
            let rot = quat_to_rot([q[0], q[1], q[2], q[3]]);
            let child_ls = [ls[0] - shrink, ls[1] - shrink, ls[2] - shrink];
            for _ in 0..2 {
                let z: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let local = Vec3([
                    ls[0].exp() * T::c(z[0]),
                    ls[1].exp() * T::c(z[1]),
                    ls[2].exp() * T::c(z[2]),
                ]);
                let child_mu = mu.add(shift).add(rot.mul_vec(local));
                outcome.events.push(DensifyEvent {
                    step,
                    op: DensifyOp::Split,
                    id: i,
                    position: [child_mu.0[0].f64(), child_mu.0[1].f64(), child_mu.0[2].f64()],
                });
                push_child(child_mu, child_ls, i, field);
            }
            remove[i] = true;
        } else {
            let child_mu = mu.add(shift);
            outcome.events.push(DensifyEvent {
                step,
                op: DensifyOp::Clone,
                id: i,
                position: [child_mu.0[0].f64(), child_mu.0[1].f64(), child_mu.0[2].f64()],
            });
            push_child(child_mu, ls, i, field);
        }
    }

    // Prune pass over the original rows. Children are never pruned in the
    // round that created them.
    for i in 0..n {
        if remove[i] {
            continue;
        }
        let pos = row3(&field.mu, i);
        let position = [pos[0].f64(), pos[1].f64(), pos[2].f64()];
        if sigmoid(field.opacity_logit.data()[i]).f64() < cfg.min_alpha {
            remove[i] = true;
            outcome.events.push(DensifyEvent { step, op: DensifyOp::PruneAlpha, id: i, position });
        } else if cfg.mode == DensifyMode::UncertaintyAware
            && sigmoid(field.uncert_logit.data()[i]).f64() > cfg.uncertainty_threshold
        {
            remove[i] = true;
            outcome.events.push(DensifyEvent {
                step,
                op: DensifyOp::PruneUncertainty,
                id: i,
                position,
            });
        }
    }

    let keep: Vec<bool> = remove.iter().map(|&r| !r).collect();
    field.retain(&keep);
    field.extend(&children);
    field.validate();
    outcome
}
