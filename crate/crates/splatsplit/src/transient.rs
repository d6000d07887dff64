//! Deformable transient field: a shared set of seed Gaussians bent into
//! each view by a small MLP conditioned on a learned per-view embedding,
//! with per-seed per-view colors from a second head.
//!
//! Per-view occluders are therefore represented by one geometry plus one
//! embedding vector per view, instead of a separate Gaussian set per view.
//! A seed can move, breathe, fade and recolor independently in every view,
//! which is what lets one shared set explain occluders that appear at
//! different places in different images. Seed positions enter both
//! networks only through a stop gradient, so the networks cannot drag
//! seeds around; position gradients reach seeds purely through the
//! rendering of the deformed result.

use std::f64::consts::PI;

use rand::Rng;

use crate::diffcore::{concat, Graph, Scalar, Tensor, Var};
use crate::splat::{TransientSeeds, Vec3};

/// Frequency bands for encoding seed positions.
pub const POS_ENC_FREQS: usize = 6;
/// Frequency bands for encoding view embeddings.
pub const EMB_ENC_FREQS: usize = 4;
/// Width of a per-view embedding vector.
pub const EMBED_DIM: usize = 16;
/// Hidden width of both heads.
pub const HIDDEN: usize = 64;

/// Floats of per-seed state shared by all views: position 3, log-scale 3,
/// rotation 4, opacity 1. The figure a naive per-view Gaussian copy pays
/// once per view.
pub const FLOATS_PER_GAUSSIAN: usize = 11;

/// Sinusoid frequencies `2^l * pi` for `l` in `0..bands`.
pub fn enc_freqs<T: Scalar>(bands: usize) -> Vec<T> {
    (0..bands).map(|l| T::c((1u64 << l) as f64 * PI)).collect()
}

/// Encoded width of a `d`-dimensional vector (no input passthrough).
pub const fn enc_dim(d: usize, bands: usize) -> usize {
    2 * bands * d
}

// ----- multilayer perceptron -----

/// Dense ReLU network. Weights are `[in, out]` so a batch of row vectors
/// flows through as `x * W + b`; ReLU sits between layers, never after the
/// last.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Xavier-uniform hidden layers. With `zero_final` the last layer's
    /// weights and bias start at exactly zero, so the network's output is
    /// exactly zero regardless of input: deformation heads begin as the
    /// identity.
    pub fn new(dims: &[usize], zero_final: bool, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let last = l == dims.len() - 2;
            if last && zero_final {
                weights.push(Tensor::zeros(&[fan_in, fan_out]));
            } else {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| T::c(rng.gen_range(-a..a)))
                    .collect();
                weights.push(Tensor::new(&[fan_in, fan_out], data));
            }
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Mlp { weights, biases }
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum::<usize>()
            + self.biases.iter().map(Tensor::numel).sum::<usize>()
    }

    /// Put every layer on a graph as trainable or frozen leaves.
    pub fn on_graph(&self, g: &Graph<T>, trainable: bool) -> MlpVars<T> {
        MlpVars {
            weights: self.weights.iter().map(|w| g.leaf(w.clone(), trainable)).collect(),
            biases: self.biases.iter().map(|b| g.leaf(b.clone(), trainable)).collect(),
        }
    }
}

/// One graph's view of an [`Mlp`]'s layers.
pub struct MlpVars<T: Scalar> {
    pub weights: Vec<Var<T>>,
    pub biases: Vec<Var<T>>,
}

impl<T: Scalar> MlpVars<T> {
    /// `[n, in] -> [n, out]`.
    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(w).add_bias(b);
            if l != last {
                h = h.relu();
            }
        }
        h
    }
}

// ----- the transient model -----

/// Learnable state of the transient branch.
#[derive(Debug, Clone)]
pub struct TransientModel<T> {
    pub seeds: TransientSeeds<T>,
    /// One row per training view, `[views, EMBED_DIM]`.
    pub embeddings: Tensor<T>,
    /// Deformation head: encoded position and view code to geometry and
    /// visibility deltas.
    pub deform: Mlp<T>,
    /// Color head: encoded position and view code to a per-seed color.
    pub color: Mlp<T>,
    /// Per-seed color offset added to the network output, `[seeds, 3]`.
    pub color_bias: Tensor<T>,
}

/// Input width of the deformation head.
pub const fn deform_in_dim() -> usize {
    enc_dim(3, POS_ENC_FREQS) + enc_dim(EMBED_DIM, EMB_ENC_FREQS)
}

/// Input width of the color head.
pub const fn color_in_dim() -> usize {
    enc_dim(3, POS_ENC_FREQS) + enc_dim(EMBED_DIM, EMB_ENC_FREQS)
}

/// Deformation head outputs per seed: position 3, log-scale 3, rotation 4,
/// opacity-logit 1.
pub const DEFORM_OUT: usize = 11;

impl<T: Scalar> TransientModel<T> {
    /// Seeds scattered uniformly in a cube around `center`; unit rotations,
    /// small isotropic scales, low starting opacity. Both heads start with
    /// zeroed final layers, so every view initially sees the undeformed
    /// seeds with color 0.5.
    pub fn new(
        n_seeds: usize,
        n_views: usize,
        center: Vec3<T>,
        extent: T,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(extent.f64() > 0.0, "seed cube needs positive extent");
        let half = extent.f64() * 0.5;
        // Broad, semi-transparent seeds: a fresh transient field renders as
        // a soft cloud rather than isolated specks, so the composite is not
        // hopeless at every pixel on the first joint step.
        let scale0 = T::c((extent.f64() * 0.12).max(1e-4).ln());
        let opacity0 = crate::diffcore::logit(T::c(0.25));
        let mut mu = Vec::with_capacity(n_seeds * 3);
        let mut rot = Vec::with_capacity(n_seeds * 4);
        for _ in 0..n_seeds {
            for c in 0..3 {
                mu.push(center.0[c] + T::c(rng.gen_range(-half..half)));
            }
            rot.extend_from_slice(&[T::one(), T::zero(), T::zero(), T::zero()]);
        }
        let seeds = TransientSeeds {
            mu: Tensor::new(&[n_seeds, 3], mu),
            log_scale: Tensor::full(&[n_seeds, 3], scale0),
            rot: Tensor::new(&[n_seeds, 4], rot),
            opacity_logit: Tensor::full(&[n_seeds], opacity0),
        };
        let embeddings = Tensor::from_fn(&[n_views, EMBED_DIM], |_| {
            T::c(rng.gen_range(-0.1..0.1))
        });
        let deform = Mlp::new(
            &[deform_in_dim(), HIDDEN, HIDDEN, HIDDEN, HIDDEN, DEFORM_OUT],
            true,
            rng,
        );
        let color = Mlp::new(&[color_in_dim(), HIDDEN, HIDDEN, 3], true, rng);
        // Saturated starting palette: each seed is born committed to a color
        // corner instead of mid gray. Gray loses to any reasonable static
        // render on a high-contrast distractor, so gray seeds only ever
        // learn to hide; a corner-colored seed wins somewhere immediately.
        let color_bias =
            Tensor::from_fn(&[n_seeds, 3], |_| T::c(if rng.gen_bool(0.5) { 1.5 } else { -1.5 }));
        TransientModel { seeds, embeddings, deform, color, color_bias }
    }

    pub fn n_seeds(&self) -> usize {
        self.seeds.len()
    }

    pub fn n_views(&self) -> usize {
        self.embeddings.shape()[0]
    }
}

/// Encoded `[n, in]` rows for the field heads: detached positions next to
/// the view code repeated per seed.
fn field_input<T: Scalar>(mu: &Var<T>, embedding: &Var<T>) -> Var<T> {
    let n = mu.shape()[0];
    let e = embedding.numel();
    let enc_mu = mu.stop_grad().posenc(&enc_freqs(POS_ENC_FREQS), false);
    let enc_t = embedding
        .reshape(&[1, e])
        .posenc(&enc_freqs(EMB_ENC_FREQS), false);
    let enc_t_rows = enc_t.reshape(&[enc_dim(e, EMB_ENC_FREQS)]).broadcast_row(n);
    concat(1, &[&enc_mu, &enc_t_rows])
}

/// Raw deltas for one view: `(d_mu [n,3], d_log_scale [n,3], d_rot [n,4],
/// d_opacity_logit [n,1])`. Positions are detached before encoding.
pub fn deform_deltas<T: Scalar>(
    mu: &Var<T>,
    embedding: &Var<T>,
    net: &MlpVars<T>,
) -> (Var<T>, Var<T>, Var<T>, Var<T>) {
    let out = net.forward(&field_input(mu, embedding));
    (
        out.slice(1, 0, 3),
        out.slice(1, 3, 3),
        out.slice(1, 6, 4),
        out.slice(1, 10, 1),
    )
}

/// Max per-view travel, in multiples of a seed's own radius.
const SHIFT_RADII: f64 = 3.0;
/// Max per-view log-scale swing: footprints breathe by at most a factor e.
const LOG_SCALE_SWING: f64 = 1.0;
/// Max per-view opacity-logit swing. A seed can fade to near nothing in
/// views where it has no work, but never to exactly nothing: its gradients
/// stay alive everywhere.
const OPACITY_SWING: f64 = 3.0;

/// Deformed per-view geometry: seed values plus network deltas, with the
/// perturbed rotations renormalized to unit quaternions. Returns
/// `(mu, log_scale, rot, opacity_logit)` for the view.
///
/// Deltas are squashed so a seed can travel a few of its own radii,
/// breathe, and fade, but never shrink away or leave the scene: the field
/// stays renderable in every view, which keeps per-view gradients alive.
pub fn deform<T: Scalar>(
    mu: &Var<T>,
    log_scale: &Var<T>,
    rot: &Var<T>,
    opacity_logit: &Var<T>,
    embedding: &Var<T>,
    net: &MlpVars<T>,
) -> (Var<T>, Var<T>, Var<T>, Var<T>) {
    let n = mu.shape()[0];
    let (dmu, dls, drot, dop) = deform_deltas(mu, embedding, net);
    let reach = log_scale.exp().scale(T::c(SHIFT_RADII));
    (
        mu.add(&dmu.tanh().mul(&reach)),
        log_scale.add(&dls.tanh().scale(T::c(LOG_SCALE_SWING))),
        rot.add(&drot).normalize_rows(),
        opacity_logit.add(&dop.tanh().scale(T::c(OPACITY_SWING)).reshape(&[n])),
    )
}

/// Per-seed per-view colors in (0,1): field output at the seed's (detached)
/// position and the view code, plus a learned per-seed offset, squashed by
/// a sigmoid.
pub fn seed_colors<T: Scalar>(
    mu: &Var<T>,
    embedding: &Var<T>,
    net: &MlpVars<T>,
    color_bias: &Var<T>,
) -> Var<T> {
    net.forward(&field_input(mu, embedding)).add(color_bias).sigmoid()
}

// ----- memory accounting -----

/// Bytes of transient state at f32 storage: per-seed geometry, opacity and
/// color bias, one embedding row per view, both network heads.
pub fn transient_memory_bytes<T: Scalar>(model: &TransientModel<T>) -> usize {
    let per_seed = FLOATS_PER_GAUSSIAN + 3;
    4 * (model.n_seeds() * per_seed
        + model.embeddings.numel()
        + model.deform.param_count()
        + model.color.param_count())
}

/// What the same content costs if every view stores its own copy of every
/// transient Gaussian.
pub fn per_view_copy_baseline_bytes(n_seeds: usize, n_views: usize) -> usize {
    4 * FLOATS_PER_GAUSSIAN * n_seeds * n_views
}

/// Marginal bytes added by registering one more view: a single embedding row.
pub fn per_view_growth_bytes() -> usize {
    4 * EMBED_DIM
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{assert_gradients_match_with, GradCheckOptions};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn graph() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn fresh_model_deforms_to_exactly_the_seeds() {
        let mut rng = StdRng::seed_from_u64(3);
        let model = TransientModel::<f64>::new(8, 4, Vec3([0.0; 3]), 2.0, &mut rng);
        let g = graph();
        let mu = g.leaf(model.seeds.mu.clone(), true);
        let ls = g.leaf(model.seeds.log_scale.clone(), true);
        let rot = g.leaf(model.seeds.rot.clone(), true);
        let op = g.leaf(model.seeds.opacity_logit.clone(), true);
        let emb = g.constant(Tensor::new(&[EMBED_DIM], model.embeddings.row(1).to_vec()));
        let net = model.deform.on_graph(&g, false);

        let (dmu, dls, drot, dop) = deform_deltas(&mu, &emb, &net);
        assert!(dmu.value().data().iter().all(|&v| v == 0.0));
        assert!(dls.value().data().iter().all(|&v| v == 0.0));
        assert!(drot.value().data().iter().all(|&v| v == 0.0));
        assert!(dop.value().data().iter().all(|&v| v == 0.0));

        let (mu_d, ls_d, rot_d, op_d) = deform(&mu, &ls, &rot, &op, &emb, &net);
        assert_eq!(mu_d.value(), model.seeds.mu, "zero delta must be bit-exact");
        assert_eq!(ls_d.value(), model.seeds.log_scale);
        assert_eq!(op_d.value(), model.seeds.opacity_logit);
        for (a, b) in rot_d.value().data().iter().zip(model.seeds.rot.data()) {
            assert!((a - b).abs() < 1e-9, "unit seed rotations survive renorm");
        }
    }

    fn random_net(dims: &[usize], seed: u64) -> Mlp<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut net = Mlp::new(dims, false, &mut rng);
        // Small nonzero final layer and biases so every output moves.
        for b in net.biases.iter_mut() {
            *b = Tensor::from_fn(&[b.numel()], |i| ((i as f64) * 0.37).sin() * 0.05);
        }
        net
    }

    #[test]
    fn detached_positions_get_no_gradient_through_the_network() {
        let n = 5;
        let e = 2;
        let net =
            random_net(&[enc_dim(3, POS_ENC_FREQS) + enc_dim(e, EMB_ENC_FREQS), 8, DEFORM_OUT], 7);
        let g = graph();
        let mu = g.leaf(Tensor::from_fn(&[n, 3], |i| (i as f64 * 0.21).sin() * 0.4), true);
        let emb = g.leaf(Tensor::from_fn(&[e], |i| 0.1 + 0.05 * i as f64), true);
        let vars = net.on_graph(&g, true);
        let (dmu, dls, drot, dop) = deform_deltas(&mu, &emb, &vars);
        let loss = concat(1, &[&dmu, &dls, &drot, &dop]).sum();
        assert!(loss.value().item() != 0.0, "network must actually fire");
        g.backward(&loss);
        // Deltas depend on mu only through the detached encoding, so no
        // gradient is ever accumulated for it: structurally zero.
        assert!(mu.grad().is_none());
        assert!(emb.grad().unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn identity_path_gradient_is_exactly_one_per_coordinate() {
        let n = 4;
        let e = 2;
        let net = random_net(
            &[enc_dim(3, POS_ENC_FREQS) + enc_dim(e, EMB_ENC_FREQS), 8, DEFORM_OUT],
            11,
        );
        let build = |target: usize| {
            let g = graph();
            let mu = g.leaf(Tensor::from_fn(&[n, 3], |i| (i as f64 * 0.13).cos() * 0.3), true);
            let ls = g.leaf(Tensor::full(&[n, 3], -1.5), true);
            let rot =
                g.leaf(Tensor::from_fn(&[n, 4], |i| if i % 4 == 0 { 1.0 } else { 0.1 }), false);
            let op = g.leaf(Tensor::from_fn(&[n], |i| -1.0 + 0.1 * i as f64), true);
            let emb = g.leaf(Tensor::from_fn(&[e], |i| 0.2 - 0.07 * i as f64), false);
            let vars = net.on_graph(&g, false);
            let (mu_d, ls_d, _, op_d) = deform(&mu, &ls, &rot, &op, &emb, &vars);
            let loss = [mu_d.sum(), ls_d.sum(), op_d.sum()][target].clone();
            g.backward(&loss);
            (mu, ls, op)
        };
        // mu enters the network only through a detached encoding, so its own
        // displaced position sees it by exact identity.
        let (mu, ls, _) = build(0);
        assert!(mu.grad().unwrap().data().iter().all(|&v| v == 1.0));
        // ...while the travel bound scales with the seed radius, so ls picks
        // up a real coupling through the displacement.
        assert!(ls.grad().unwrap().data().iter().any(|&v| v != 1.0));
        // The scale's and opacity's own deltas are additive: exact unit
        // gradients along their identity paths.
        let (mu2, ls2, _) = build(1);
        assert!(mu2.grad().is_none());
        assert!(ls2.grad().unwrap().data().iter().all(|&v| v == 1.0));
        let (_, _, op3) = build(2);
        assert!(op3.grad().unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deformed_rotations_are_unit_quaternions() {
        let n = 6;
        let e = 3;
        let net = random_net(
            &[enc_dim(3, POS_ENC_FREQS) + enc_dim(e, EMB_ENC_FREQS), 16, DEFORM_OUT],
            19,
        );
        let g = graph();
        let mu = g.leaf(Tensor::from_fn(&[n, 3], |i| (i as f64 * 0.41).sin()), false);
        let ls = g.leaf(Tensor::zeros(&[n, 3]), false);
        let rot = g.leaf(
            Tensor::from_fn(&[n, 4], |i| ((i * 5 + 1) as f64 * 0.23).cos()),
            false,
        );
        let op = g.leaf(Tensor::zeros(&[n]), false);
        let emb = g.leaf(Tensor::from_fn(&[e], |i| 0.3 * (i as f64 + 1.0)), false);
        let vars = net.on_graph(&g, false);
        let (_, _, rot_d, _) = deform(&mu, &ls, &rot, &op, &emb, &vars);
        let v = rot_d.value();
        for i in 0..n {
            let r = v.row(i);
            let norm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-7, "row {i} norm {norm}");
        }
    }

    #[test]
    fn deformation_chain_gradients_check_against_finite_differences() {
        let n = 3;
        let e = 2;
        let dims = [enc_dim(3, POS_ENC_FREQS) + enc_dim(e, EMB_ENC_FREQS), 6, DEFORM_OUT];
        let net = random_net(&dims, 23);
        let mu_t = Tensor::from_fn(&[n, 3], |i| (i as f64 * 0.19).sin() * 0.5);
        let inputs = vec![
            Tensor::from_fn(&[n, 3], |i| -1.0 - 0.1 * (i as f64 * 0.3).cos()),
            Tensor::from_fn(&[n, 4], |i| if i % 4 == 0 { 0.9 } else { 0.2 }),
            Tensor::from_fn(&[e], |i| 0.15 + 0.1 * i as f64),
            Tensor::from_fn(&[n], |i| -0.5 + 0.2 * i as f64),
            net.weights[0].clone(),
            net.weights[1].clone(),
            net.biases[0].clone(),
            net.biases[1].clone(),
        ];
        let opts = GradCheckOptions { step: 1e-5, max_coords_per_input: Some(8) };
        assert_gradients_match_with(
            &move |g, v| {
                let mu = g.constant(mu_t.clone());
                let vars = MlpVars {
                    weights: vec![v[4].clone(), v[5].clone()],
                    biases: vec![v[6].clone(), v[7].clone()],
                };
                let (mu_d, ls_d, rot_d, op_d) = deform(&mu, &v[0], &v[1], &v[3], &v[2], &vars);
                // Uneven weights so symmetric contributions cannot cancel.
                let w1 = g.constant(Tensor::from_fn(&[n, 3], |i| 0.3 + 0.05 * i as f64));
                let w2 = g.constant(Tensor::from_fn(&[n, 3], |i| 0.1 - 0.03 * i as f64));
                let w3 = g.constant(Tensor::from_fn(&[n, 4], |i| 0.2 + 0.02 * i as f64));
                let w4 = g.constant(Tensor::from_fn(&[n], |i| 0.5 - 0.04 * i as f64));
                mu_d.mul(&w1)
                    .sum()
                    .add(&ls_d.mul(&w2).sum())
                    .add(&rot_d.mul(&w3).sum())
                    .add(&op_d.mul(&w4).sum())
            },
            &inputs,
            1e-5,
            &opts,
        );
    }

    #[test]
    fn fresh_color_head_outputs_committed_channel_extremes() {
        let mut rng = StdRng::seed_from_u64(5);
        let model = TransientModel::<f64>::new(24, 3, Vec3([0.0; 3]), 1.0, &mut rng);
        let g = graph();
        let mu = g.constant(model.seeds.mu.clone());
        let emb = g.constant(Tensor::new(&[EMBED_DIM], model.embeddings.row(2).to_vec()));
        let net = model.color.on_graph(&g, false);
        let bias = g.leaf(model.color_bias.clone(), false);
        let colors = seed_colors(&mu, &emb, &net, &bias);
        assert_eq!(colors.shape(), vec![24, 3]);
        // Zeroed network head, so colors are exactly the squashed biases:
        // every channel at one of the two palette corners, both present.
        let (lo, hi) = (crate::diffcore::sigmoid(-1.5), crate::diffcore::sigmoid(1.5));
        let data = colors.value();
        for &c in data.data() {
            assert!(c == lo || c == hi, "channel {c} off the starting palette");
        }
        assert!(data.data().iter().any(|&c| c == lo));
        assert!(data.data().iter().any(|&c| c == hi));
    }

    #[test]
    fn color_head_gradients_reach_embedding_and_bias() {
        let e = 2;
        let n = 4;
        let net = random_net(&[enc_dim(3, POS_ENC_FREQS) + enc_dim(e, EMB_ENC_FREQS), 8, 3], 31);
        let mu_t = Tensor::from_fn(&[n, 3], |i| (i as f64 * 0.29).cos() * 0.4);
        let inputs = vec![
            Tensor::from_fn(&[e], |i| 0.2 + 0.1 * i as f64),
            Tensor::from_fn(&[n, 3], |i| 0.05 * (i as f64 * 0.7).sin()),
            net.weights[0].clone(),
            net.weights[1].clone(),
        ];
        let (b0, b1) = (net.biases[0].clone(), net.biases[1].clone());
        let opts = GradCheckOptions { step: 1e-5, max_coords_per_input: Some(8) };
        assert_gradients_match_with(
            &move |g, v| {
                let mu = g.constant(mu_t.clone());
                let vars = MlpVars {
                    weights: vec![v[2].clone(), v[3].clone()],
                    biases: vec![g.leaf(b0.clone(), false), g.leaf(b1.clone(), false)],
                };
                let w = g.constant(Tensor::from_fn(&[n, 3], |i| 0.4 - 0.06 * i as f64));
                seed_colors(&mu, &v[0], &vars, &v[1]).mul(&w).sum()
            },
            &inputs,
            1e-5,
            &opts,
        );
    }

    #[test]
    fn memory_accounting_matches_hand_arithmetic() {
        let mut rng = StdRng::seed_from_u64(1);
        let model = TransientModel::<f32>::new(500, 20, Vec3([0.0; 3]), 4.0, &mut rng);

        let deform_params = (deform_in_dim() * 64 + 64)
            + 3 * (64 * 64 + 64)
            + (64 * DEFORM_OUT + DEFORM_OUT);
        let color_params = (color_in_dim() * 64 + 64) + (64 * 64 + 64) + (64 * 3 + 3);
        assert_eq!(model.deform.param_count(), deform_params);
        assert_eq!(model.color.param_count(), color_params);

        let want = 4 * (500 * 14 + 20 * EMBED_DIM + deform_params + color_params);
        assert_eq!(transient_memory_bytes(&model), want);

        // Sharing seeds across views beats per-view copies by a wide margin,
        // and each extra view costs one embedding row, far under a tenth of
        // an extra per-view Gaussian copy.
        let baseline = per_view_copy_baseline_bytes(500, 20);
        assert_eq!(baseline, 4 * 11 * 500 * 20);
        let baseline_per_view = baseline / 20;
        assert!(per_view_growth_bytes() * 10 <= baseline_per_view);
    }

    #[test]
    fn model_initialization_is_seed_deterministic() {
        let mk = || {
            let mut rng = StdRng::seed_from_u64(99);
            TransientModel::<f32>::new(20, 5, Vec3([0.1, 0.2, 0.3]), 3.0, &mut rng)
        };
        let (a, b) = (mk(), mk());
        assert_eq!(a.seeds.mu, b.seeds.mu);
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.deform.weights, b.deform.weights);
        assert_eq!(a.color.weights, b.color.weights);
    }
}
