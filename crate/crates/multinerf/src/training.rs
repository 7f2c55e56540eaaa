//! Distillation of a student MLP from a teacher field restricted to one box,
//! and the PSNR-style score that drives the subdivision stopping rule.
//!
//! The training objective is a plain squared error on the 4-channel output,
//! L = mean[(sigma - sigma*)^2 + ||rgb - rgb*||^2], with sigma supervised in
//! post-softplus space.

use crate::field::{
    assemble_input, mlp_raw_at, sigmoid, softplus, FieldSample, MlpArch, MlpParams, MlpScratch,
    NodeMlpField, RadianceField,
};
use crate::geometry::{Aabb, Vec3};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Density is clamped to this cap and rescaled to [0,1] before entering the
/// score MSE, so the density channel is commensurate with the color channels.
pub const SCORE_SIGMA_CAP: f64 = 20.0;

/// Scores above this are reported as the cap (MSE below 1e-10).
pub const SCORE_CAP_DB: f64 = 99.0;

/// Gradient buffer shaped like a parameter blob.
#[derive(Clone, Debug)]
pub struct MlpGrads {
    data: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads { data: vec![0.0; params.data().len()] }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Distillation hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct DistillConfig {
    /// Optimization steps (N_max).
    pub iterations: u32,
    /// Positions drawn per step.
    pub batch: u32,
    /// Directions drawn per position.
    pub dirs_per_point: u32,
    pub lr: f64,
    pub seed: u64,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.dirs_per_point == 0 {
            return Err(Error::Params("distill batch and dirs_per_point must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Params("distill lr must be positive".into()));
        }
        Ok(())
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { iterations: 2000, batch: 1024, dirs_per_point: 1, lr: 5e-3, seed: 0 }
    }
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

pub struct BackwardResult {
    pub grads: MlpGrads,
    pub loss: f64,
}

struct BatchCache {
    /// Assembled inputs, n x in_dim.
    inputs: Vec<f64>,
    /// Pre-activations per layer, n x out_l.
    pre: Vec<Vec<f64>>,
    /// Post-ReLU activations per hidden layer, n x width.
    post: Vec<Vec<f64>>,
}

fn forward_batch_cached(params: &MlpParams, batch: &[(Vec3, Vec3)]) -> BatchCache {
    let arch = params.arch();
    let n = batch.len();
    let in_dim = arch.input_dim();
    let depth = arch.depth as usize;
    let shapes = arch.layer_shapes();

    let mut inputs = Vec::with_capacity(n * in_dim);
    let mut scratch = Vec::new();
    for &(x, d) in batch {
        assemble_input(arch, x, d, &mut scratch);
        inputs.extend_from_slice(&scratch);
    }

    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(depth);
    for (l, &(out, inp)) in shapes.iter().enumerate() {
        let (w, b) = params.layer(l);
        let mut z = vec![0.0; n * out];
        {
            let src: &[f64] = if l == 0 { &inputs } else { &post[l - 1] };
            for i in 0..n {
                let xi = &src[i * inp..(i + 1) * inp];
                let zi = &mut z[i * out..(i + 1) * out];
                for r in 0..out {
                    let wr = &w[r * inp..(r + 1) * inp];
                    let mut acc = b[r];
                    for k in 0..inp {
                        acc += wr[k] * xi[k];
                    }
                    zi[r] = acc;
                }
            }
        }
        if l < depth {
            post.push(z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect());
        }
        pre.push(z);
    }
    BatchCache { inputs, pre, post }
}

/// Reverse-mode gradients of the mean squared 4-channel loss.
///
/// Contributions are accumulated over the batch in index order and scaled by
/// 1/n at the end, so a size-2 batch reproduces the mean of two size-1
/// gradients exactly.
pub fn mlp_backward(
    params: &MlpParams,
    batch: &[(Vec3, Vec3)],
    targets: &[FieldSample],
) -> Result<BackwardResult> {
    if batch.is_empty() {
        return Err(Error::Params("backward pass needs a nonempty batch".into()));
    }
    if batch.len() != targets.len() {
        return Err(Error::Params(format!(
            "batch/target length mismatch: {} vs {}",
            batch.len(),
            targets.len()
        )));
    }

    let arch = params.arch();
    let n = batch.len();
    let depth = arch.depth as usize;
    let shapes = arch.layer_shapes();
    let cache = forward_batch_cached(params, batch);

    let mut grads = vec![0.0; params.data().len()];
    // Head deltas and the (unscaled) loss.
    let head = &cache.pre[depth];
    let mut loss_sum = 0.0;
    let mut delta = vec![0.0; n * 4];
    for i in 0..n {
        let z = &head[i * 4..(i + 1) * 4];
        let t = &targets[i];
        let sig = softplus(z[0]);
        let ds = sig - t.sigma;
        loss_sum += ds * ds;
        delta[i * 4] = 2.0 * ds * sigmoid(z[0]);
        for (k, tc) in t.rgb.to_array().iter().enumerate() {
            let c = sigmoid(z[1 + k]);
            let dc = c - tc;
            loss_sum += dc * dc;
            delta[i * 4 + 1 + k] = 2.0 * dc * c * (1.0 - c);
        }
    }

    // Walk layers top-down accumulating dW, db, and the downstream delta.
    let mut layer_offsets = Vec::with_capacity(shapes.len());
    {
        let mut off = 0;
        for &(o, i) in &shapes {
            layer_offsets.push(off);
            off += o * i + o;
        }
    }

    let mut delta_cur = delta;
    for l in (0..=depth).rev() {
        let (out, inp) = shapes[l];
        let activ: &[f64] = if l == 0 { &cache.inputs } else { &cache.post[l - 1] };
        let off = layer_offsets[l];
        let (w, _) = params.layer(l);
        let (gw, gb) = grads[off..off + out * inp + out].split_at_mut(out * inp);
        let mut delta_prev = vec![0.0; n * inp];
        for i in 0..n {
            let di = &delta_cur[i * out..(i + 1) * out];
            let ai = &activ[i * inp..(i + 1) * inp];
            let dpi = &mut delta_prev[i * inp..(i + 1) * inp];
            for r in 0..out {
                let d = di[r];
                if d == 0.0 {
                    continue;
                }
                let wr = &w[r * inp..(r + 1) * inp];
                let gwr = &mut gw[r * inp..(r + 1) * inp];
                for k in 0..inp {
                    gwr[k] += d * ai[k];
                    dpi[k] += d * wr[k];
                }
            }
            for r in 0..out {
                gb[r] += di[r];
            }
        }
        if l > 0 {
            // ReLU gate against the pre-activations of the layer below.
            let z = &cache.pre[l - 1];
            for (dp, &zv) in delta_prev.iter_mut().zip(z.iter()) {
                if zv <= 0.0 {
                    *dp = 0.0;
                }
            }
        }
        delta_cur = delta_prev;
    }

    let scale = 1.0 / n as f64;
    for g in grads.iter_mut() {
        *g *= scale;
    }
    Ok(BackwardResult { grads: MlpGrads { data: grads }, loss: loss_sum * scale })
}

/// Forward-only loss, shared by the optimizer loop and the finite-difference
/// probes in tests.
pub fn batch_loss(params: &MlpParams, batch: &[(Vec3, Vec3)], targets: &[FieldSample]) -> f64 {
    let mut scratch = MlpScratch::default();
    let mut sum = 0.0;
    for (&(x, d), t) in batch.iter().zip(targets.iter()) {
        let raw = mlp_raw_at(params, x, d, &mut scratch);
        let ds = softplus(raw[0]) - t.sigma;
        sum += ds * ds;
        for (k, tc) in t.rgb.to_array().iter().enumerate() {
            let dc = sigmoid(raw[1 + k]) - tc;
            sum += dc * dc;
        }
    }
    sum / batch.len() as f64
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state: step count plus first/second moment buffers shaped like
/// the parameter blob.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &MlpParams, hyper: AdamHyper) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; params.data().len()],
            v: vec![0.0; params.data().len()],
            hyper,
        }
    }
}

/// Bias-corrected Adam update on flat buffers.
pub fn adam_update_flat(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    hyper: AdamHyper,
) {
    debug_assert_eq!(params.len(), grads.len());
    let b1 = hyper.beta1;
    let b2 = hyper.beta2;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}

/// One optimizer step; increments the step count.
pub fn adam_step(params: &mut MlpParams, grads: &MlpGrads, state: &mut AdamState) -> Result<()> {
    if grads.data.len() != params.data().len() {
        return Err(Error::Params("gradient/parameter shape mismatch".into()));
    }
    state.step += 1;
    let step = state.step;
    let hyper = state.hyper;
    adam_update_flat(params.data_mut(), &grads.data, &mut state.m, &mut state.v, step, hyper);
    Ok(())
}

// ---------------------------------------------------------------------------
// Distillation
// ---------------------------------------------------------------------------

fn sample_unit_sphere(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = 1.0 - 2.0 * rng.gen::<f64>();
    let phi = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

fn sample_in_box(rng: &mut ChaCha8Rng, aabb: &Aabb) -> Vec3 {
    let min = aabb.min();
    let e = aabb.extent();
    Vec3::new(
        min.x + e.x * rng.gen::<f64>(),
        min.y + e.y * rng.gen::<f64>(),
        min.z + e.z * rng.gen::<f64>(),
    )
}

/// Draws one training batch: world positions uniform in the box, directions
/// uniform on the sphere, targets queried from the teacher, and student
/// inputs normalized to the node's unit cube.
fn draw_batch(
    teacher: &dyn RadianceField,
    aabb: &Aabb,
    cfg: &DistillConfig,
    rng: &mut ChaCha8Rng,
    batch: &mut Vec<(Vec3, Vec3)>,
    targets: &mut Vec<FieldSample>,
) {
    batch.clear();
    targets.clear();
    let min = aabb.min();
    let e = aabb.extent();
    for _ in 0..cfg.batch {
        let world = sample_in_box(rng, aabb);
        let unit = Vec3::new((world.x - min.x) / e.x, (world.y - min.y) / e.y, (world.z - min.z) / e.z);
        for _ in 0..cfg.dirs_per_point {
            let d = sample_unit_sphere(rng);
            batch.push((unit, d));
            targets.push(teacher.eval(world, d));
        }
    }
}

/// Distills a student network from the teacher restricted to `aabb`.
///
/// He-uniform init, then `iterations` Adam steps on freshly drawn batches.
/// Returns the trained parameters and the last-iterate loss (for
/// `iterations == 0`, the loss of the untouched initialization on one probe
/// batch). Bit-identical for a fixed seed.
pub fn distill_node(
    teacher: &dyn RadianceField,
    aabb: &Aabb,
    arch: MlpArch,
    cfg: &DistillConfig,
) -> Result<(MlpParams, f64)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = MlpParams::he_uniform_rng(arch, &mut rng)?;
    let mut state = AdamState::new(&params, AdamHyper::with_lr(cfg.lr));
    let mut batch = Vec::new();
    let mut targets = Vec::new();

    if cfg.iterations == 0 {
        draw_batch(teacher, aabb, cfg, &mut rng, &mut batch, &mut targets);
        let loss = batch_loss(&params, &batch, &targets);
        return Ok((params, loss));
    }

    let mut last_loss = f64::INFINITY;
    for _ in 0..cfg.iterations {
        draw_batch(teacher, aabb, cfg, &mut rng, &mut batch, &mut targets);
        let result = mlp_backward(&params, &batch, &targets)?;
        adam_step(&mut params, &result.grads, &mut state)?;
        last_loss = result.loss;
    }
    Ok((params, last_loss))
}

// ---------------------------------------------------------------------------
// Node scoring
// ---------------------------------------------------------------------------

/// PSNR-style agreement between two fields over a seeded evaluation set in a
/// box: MSE over 4 channels (density clamped to the cap and rescaled to
/// [0,1], then the three color channels), reported as -10*log10(MSE) and
/// capped at 99 dB.
pub fn score_fields(
    reference: &dyn RadianceField,
    candidate: &dyn RadianceField,
    aabb: &Aabb,
    n_points: u32,
    n_dirs: u32,
    seed: u64,
) -> f64 {
    assert!(n_points >= 1 && n_dirs >= 1, "score needs at least one point and direction");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sq_sum = 0.0;
    for _ in 0..n_points {
        let x = sample_in_box(&mut rng, aabb);
        for _ in 0..n_dirs {
            let d = sample_unit_sphere(&mut rng);
            let a = reference.eval(x, d);
            let b = candidate.eval(x, d);
            let ds = (a.sigma.clamp(0.0, SCORE_SIGMA_CAP) - b.sigma.clamp(0.0, SCORE_SIGMA_CAP))
                / SCORE_SIGMA_CAP;
            sq_sum += ds * ds;
            let dc = a.rgb - b.rgb;
            sq_sum += dc.dot(dc);
        }
    }
    let mse = sq_sum / (4.0 * n_points as f64 * n_dirs as f64);
    mse_to_db(mse)
}

pub(crate) fn mse_to_db(mse: f64) -> f64 {
    if mse < 1e-10 {
        SCORE_CAP_DB
    } else {
        -10.0 * mse.log10()
    }
}

/// Scores a student MLP against the teacher over the node's box.
pub fn node_score(
    teacher: &dyn RadianceField,
    student: &MlpParams,
    aabb: &Aabb,
    n_points: u32,
    n_dirs: u32,
    seed: u64,
) -> f64 {
    let student_field = NodeMlpField::new(student, aabb);
    score_fields(teacher, &student_field, aabb, n_points, n_dirs, seed)
}
