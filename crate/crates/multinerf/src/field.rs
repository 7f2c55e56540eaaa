//! The radiance-field contract `(x, d) -> (sigma, rgb)` and its two
//! implementations: analytic Gaussian-blob scenes (the teacher) and small
//! fully connected networks with frequency positional encoding (the
//! per-node students).

use crate::geometry::{Aabb, Vec3};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Density plus emitted radiance at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    /// Volume density, 1/world-unit, >= 0.
    pub sigma: f64,
    /// Emitted linear RGB, each channel in [0, 1].
    pub rgb: Vec3,
}

impl FieldSample {
    pub const EMPTY: FieldSample = FieldSample { sigma: 0.0, rgb: Vec3::ZERO };
}

/// Anything that maps (position, direction) to (density, color). Evaluation
/// must be pure so many workers can query concurrently.
pub trait RadianceField: Sync {
    fn eval(&self, position: Vec3, direction: Vec3) -> FieldSample;
}

// ---------------------------------------------------------------------------
// Analytic teacher
// ---------------------------------------------------------------------------

/// Isotropic Gaussian density lobe with a view-modulated color.
#[derive(Clone, Debug)]
pub struct GaussianBlob {
    pub center: Vec3,
    pub stddev: f64,
    pub amplitude: f64,
    pub color: Vec3,
    /// Blend factor in [0, 1] for the directional term.
    pub view_dependence: f64,
    /// Fixed unit vector the view modulation is measured against.
    pub view_axis: Vec3,
}

/// Procedural stand-in for a trained global field. Downstream stages only
/// issue `(x, d)` queries, so the pipeline is agnostic to what backs them.
#[derive(Clone, Debug)]
pub struct AnalyticScene {
    blobs: Vec<GaussianBlob>,
    domain: Aabb,
}

impl AnalyticScene {
    pub fn new(blobs: Vec<GaussianBlob>, domain: Aabb) -> Result<Self> {
        for (i, b) in blobs.iter().enumerate() {
            if !(b.stddev > 0.0) || !(b.amplitude > 0.0) {
                return Err(Error::Config(format!(
                    "blob {i}: stddev and amplitude must be positive"
                )));
            }
            if !domain.contains(b.center) {
                return Err(Error::Config(format!("blob {i}: center outside domain")));
            }
            if !(0.0..=1.0).contains(&b.view_dependence) {
                return Err(Error::Config(format!("blob {i}: view_dependence not in [0,1]")));
            }
            for c in [b.color.x, b.color.y, b.color.z] {
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::Config(format!("blob {i}: color channel not in [0,1]")));
                }
            }
            if !b.view_axis.is_unit() {
                return Err(Error::Config(format!("blob {i}: view_axis must be unit length")));
            }
        }
        Ok(AnalyticScene { blobs, domain })
    }

    pub fn domain(&self) -> &Aabb {
        &self.domain
    }

    pub fn blobs(&self) -> &[GaussianBlob] {
        &self.blobs
    }
}

impl RadianceField for AnalyticScene {
    fn eval(&self, position: Vec3, direction: Vec3) -> FieldSample {
        if !self.domain.contains(position) {
            return FieldSample::EMPTY;
        }
        let mut sigma = 0.0;
        let mut color_acc = Vec3::ZERO;
        for b in &self.blobs {
            let r = position - b.center;
            let w = b.amplitude * (-r.dot(r) / (2.0 * b.stddev * b.stddev)).exp();
            if w == 0.0 {
                continue;
            }
            let facing = direction.dot(b.view_axis).max(0.0);
            let modulation = (1.0 - b.view_dependence) + b.view_dependence * facing;
            sigma += w;
            color_acc += b.color * (w * modulation);
        }
        if sigma == 0.0 {
            return FieldSample::EMPTY;
        }
        FieldSample { sigma, rgb: color_acc / sigma }
    }
}

// ---------------------------------------------------------------------------
// Frequency encoding
// ---------------------------------------------------------------------------

/// Appends `(sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^{L-1} pi p),
/// cos(2^{L-1} pi p))` to `out`.
pub fn frequency_encode_into(p: f64, levels: u32, out: &mut Vec<f64>) {
    let mut freq = std::f64::consts::PI;
    for _ in 0..levels {
        let (s, c) = (freq * p).sin_cos();
        out.push(s);
        out.push(c);
        freq *= 2.0;
    }
}

/// Single-coordinate frequency encoding as a fresh vector of length `2 * levels`.
pub fn frequency_encode(p: f64, levels: u32) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * levels as usize);
    frequency_encode_into(p, levels, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Small MLP
// ---------------------------------------------------------------------------

/// Network architecture: `depth` hidden layers of `width` units plus a
/// 4-channel linear head; inputs are frequency encodings of position and
/// direction with the raw coordinates appended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpArch {
    pub width: u32,
    pub depth: u32,
    pub l_pos: u32,
    pub l_dir: u32,
}

impl MlpArch {
    pub fn input_dim(&self) -> usize {
        6 * self.l_pos as usize + 6 * self.l_dir as usize + 6
    }

    /// (out, in) shape of every weight matrix, input to head.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let w = self.width as usize;
        let mut shapes = Vec::with_capacity(self.depth as usize + 1);
        let mut fan_in = self.input_dim();
        for _ in 0..self.depth {
            shapes.push((w, fan_in));
            fan_in = w;
        }
        shapes.push((4, fan_in));
        shapes
    }

    /// Total parameter count (weights + biases).
    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(o, i)| o * i + o).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 {
            return Err(Error::Params("mlp width and depth must be positive".into()));
        }
        Ok(())
    }
}

/// Dense network parameters in one flat buffer. Per layer: weights
/// row-major `(out, in)`, then bias `(out)`. Flat storage keeps the
/// optimizer, the finite-difference probes, and serialization trivial.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    arch: MlpArch,
    data: Vec<f64>,
}

impl MlpParams {
    pub fn new(arch: MlpArch, data: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if data.len() != arch.param_count() {
            return Err(Error::Params(format!(
                "parameter blob has {} entries, architecture needs {}",
                data.len(),
                arch.param_count()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Params("non-finite parameter".into()));
        }
        Ok(MlpParams { arch, data })
    }

    pub fn zeros(arch: MlpArch) -> Result<Self> {
        MlpParams::new(arch, vec![0.0; arch.param_count()])
    }

    /// He-uniform initialization: weights from U(-sqrt(6/fan_in), +),
    /// biases zero. Deterministic for a fixed seed.
    pub fn he_uniform(arch: MlpArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::he_uniform_rng(arch, &mut rng)
    }

    /// He-uniform init drawing from an existing stream.
    pub fn he_uniform_rng(arch: MlpArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut data = Vec::with_capacity(arch.param_count());
        for (out, inp) in arch.layer_shapes() {
            let limit = (6.0 / inp as f64).sqrt();
            for _ in 0..out * inp {
                data.push(rng.gen_range(-limit..limit));
            }
            data.extend(std::iter::repeat(0.0).take(out));
        }
        MlpParams::new(arch, data)
    }

    pub fn arch(&self) -> MlpArch {
        self.arch
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for the optimizer; values must stay finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// (weights, bias) slices of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let shapes = self.arch.layer_shapes();
        let mut offset = 0;
        for (idx, &(o, i)) in shapes.iter().enumerate() {
            if idx == l {
                return (
                    &self.data[offset..offset + o * i],
                    &self.data[offset + o * i..offset + o * i + o],
                );
            }
            offset += o * i + o;
        }
        panic!("layer {l} out of range");
    }
}

/// Reusable forward-pass buffers; one per worker avoids per-sample allocation.
#[derive(Default, Clone)]
pub struct MlpScratch {
    input: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Builds the network input for a node-normalized position and a unit
/// direction: `[enc(x) | enc(d) | x | d]`.
pub fn assemble_input(arch: MlpArch, x_unit: Vec3, d: Vec3, out: &mut Vec<f64>) {
    out.clear();
    for p in x_unit.to_array() {
        frequency_encode_into(p, arch.l_pos, out);
    }
    for p in d.to_array() {
        frequency_encode_into(p, arch.l_dir, out);
    }
    out.extend_from_slice(&x_unit.to_array());
    out.extend_from_slice(&d.to_array());
}

fn dense_into(weights: &[f64], bias: &[f64], input: &[f64], out: &mut Vec<f64>) {
    let inp = input.len();
    out.clear();
    for (row, b) in bias.iter().enumerate() {
        let w = &weights[row * inp..(row + 1) * inp];
        let mut acc = *b;
        for k in 0..inp {
            acc += w[k] * input[k];
        }
        out.push(acc);
    }
}

/// Raw 4-channel head output (pre-activation) for an assembled input.
pub(crate) fn mlp_raw_output(params: &MlpParams, scratch: &mut MlpScratch) -> [f64; 4] {
    let arch = params.arch;
    let depth = arch.depth as usize;
    // input currently in scratch.input
    for l in 0..=depth {
        let (w, b) = params.layer(l);
        {
            let src: &[f64] = if l == 0 { &scratch.input } else { &scratch.a };
            dense_into(w, b, src, &mut scratch.b);
        }
        if l < depth {
            for v in scratch.b.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        std::mem::swap(&mut scratch.a, &mut scratch.b);
    }
    [scratch.a[0], scratch.a[1], scratch.a[2], scratch.a[3]]
}

/// Evaluates the network at a node-normalized position and unit direction.
/// Hidden layers are ReLU; the density channel goes through softplus and the
/// color channels through sigmoid, so outputs always satisfy the
/// `FieldSample` invariants.
pub fn mlp_forward_scratch(
    params: &MlpParams,
    x_unit: Vec3,
    d: Vec3,
    scratch: &mut MlpScratch,
) -> FieldSample {
    assemble_input(params.arch, x_unit, d, &mut scratch.input);
    let raw = mlp_raw_output(params, scratch);
    FieldSample {
        sigma: softplus(raw[0]),
        rgb: Vec3::new(sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])),
    }
}

pub fn mlp_forward(params: &MlpParams, x_unit: Vec3, d: Vec3) -> FieldSample {
    let mut scratch = MlpScratch::default();
    mlp_forward_scratch(params, x_unit, d, &mut scratch)
}

/// Raw head outputs for a node-normalized position and unit direction.
pub(crate) fn mlp_raw_at(
    params: &MlpParams,
    x_unit: Vec3,
    d: Vec3,
    scratch: &mut MlpScratch,
) -> [f64; 4] {
    assemble_input(params.arch, x_unit, d, &mut scratch.input);
    mlp_raw_output(params, scratch)
}

/// A node MLP viewed as a radiance field over its world-space box. Positions
/// are normalized to the node's unit cube before encoding; queries that land
/// a rounding error outside the box are clamped onto it.
pub struct NodeMlpField<'a> {
    params: &'a MlpParams,
    min: Vec3,
    inv_extent: Vec3,
}

impl<'a> NodeMlpField<'a> {
    pub fn new(params: &'a MlpParams, aabb: &Aabb) -> Self {
        let e = aabb.extent();
        NodeMlpField {
            params,
            min: aabb.min(),
            inv_extent: Vec3::new(1.0 / e.x, 1.0 / e.y, 1.0 / e.z),
        }
    }

    pub fn eval_scratch(&self, position: Vec3, direction: Vec3, scratch: &mut MlpScratch) -> FieldSample {
        let unit = ((position - self.min) * self.inv_extent).clamp01();
        mlp_forward_scratch(self.params, unit, direction, scratch)
    }
}

impl RadianceField for NodeMlpField<'_> {
    fn eval(&self, position: Vec3, direction: Vec3) -> FieldSample {
        let mut scratch = MlpScratch::default();
        self.eval_scratch(position, direction, &mut scratch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_domain() -> Aabb {
        Aabb::new(Vec3::ZERO, Vec3::splat(1.0)).unwrap()
    }

    fn single_blob(view_dependence: f64) -> AnalyticScene {
        AnalyticScene::new(
            vec![GaussianBlob {
                center: Vec3::splat(0.5),
                stddev: 0.1,
                amplitude: 4.0,
                color: Vec3::new(0.8, 0.3, 0.1),
                view_dependence,
                view_axis: Vec3::new(0.0, 0.0, 1.0),
            }],
            unit_domain(),
        )
        .unwrap()
    }

    #[test]
    fn encode_at_zero() {
        assert_eq!(frequency_encode(0.0, 4), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn encode_at_half() {
        let e = frequency_encode(0.5, 2);
        assert!((e[0] - 1.0).abs() < 1e-12); // sin(pi/2)
        assert!(e[1].abs() < 1e-12); // cos(pi/2)
        assert!(e[2].abs() < 1e-12); // sin(pi)
        assert!((e[3] + 1.0).abs() < 1e-12); // cos(pi)
    }

    #[test]
    fn encode_zero_levels_empty() {
        assert!(frequency_encode(0.7, 0).is_empty());
    }

    #[test]
    fn zero_params_forward() {
        let arch = MlpArch { width: 8, depth: 2, l_pos: 2, l_dir: 1 };
        let params = MlpParams::zeros(arch).unwrap();
        let out = mlp_forward(&params, Vec3::splat(0.3), Vec3::new(0.0, 0.0, 1.0));
        assert!((out.sigma - 2.0f64.ln()).abs() < 1e-12);
        assert!((out.rgb - Vec3::splat(0.5)).norm() < 1e-12);
    }

    #[test]
    fn forward_deterministic() {
        let arch = MlpArch { width: 16, depth: 3, l_pos: 4, l_dir: 2 };
        let params = MlpParams::he_uniform(arch, 99).unwrap();
        let x = Vec3::new(0.2, 0.7, 0.4);
        let d = Vec3::new(0.6, 0.8, 0.0).normalized();
        let a = mlp_forward(&params, x, d);
        let b = mlp_forward(&params, x, d);
        assert_eq!(a.sigma.to_bits(), b.sigma.to_bits());
        assert_eq!(a.rgb, b.rgb);
    }

    /// Widening with dead neurons must not change the function: new first-layer
    /// rows are zero, hidden blocks pass the original activations through, and
    /// the head ignores the padding columns.
    #[test]
    fn dead_neuron_padding_preserves_output() {
        let arch = MlpArch { width: 6, depth: 2, l_pos: 1, l_dir: 0 };
        let params = MlpParams::he_uniform(arch, 5).unwrap();

        let wide_arch = MlpArch { width: 12, depth: 2, l_pos: 1, l_dir: 0 };
        let mut wide = vec![0.0; wide_arch.param_count()];
        let shapes = arch.layer_shapes();
        let wide_shapes = wide_arch.layer_shapes();
        let mut src_off = 0;
        let mut dst_off = 0;
        for (l, (&(o, i), &(wo, wi))) in shapes.iter().zip(wide_shapes.iter()).enumerate() {
            let (w, b) = params.layer(l);
            for r in 0..o {
                for c in 0..i {
                    wide[dst_off + r * wi + c] = w[r * i + c];
                }
            }
            for r in 0..o {
                wide[dst_off + wo * wi + r] = b[r];
            }
            src_off += o * i + o;
            dst_off += wo * wi + wo;
        }
        assert_eq!(src_off, params.data().len());
        let wide = MlpParams::new(wide_arch, wide).unwrap();

        let x = Vec3::new(0.1, 0.9, 0.5);
        let d = Vec3::new(1.0, 0.0, 0.0);
        let a = mlp_forward(&params, x, d);
        let b = mlp_forward(&wide, x, d);
        assert!((a.sigma - b.sigma).abs() < 1e-12);
        assert!((a.rgb - b.rgb).norm() < 1e-12);
    }

    #[test]
    fn non_finite_params_rejected() {
        let arch = MlpArch { width: 4, depth: 1, l_pos: 0, l_dir: 0 };
        let mut data = vec![0.0; arch.param_count()];
        data[3] = f64::NAN;
        assert!(MlpParams::new(arch, data).is_err());
    }

    #[test]
    fn blob_peak_and_falloff() {
        let scene = single_blob(0.0);
        let d = Vec3::new(0.0, 0.0, 1.0);
        let at_center = scene.eval(Vec3::splat(0.5), d);
        assert!((at_center.sigma - 4.0).abs() < 1e-12);
        let at_stddev = scene.eval(Vec3::new(0.6, 0.5, 0.5), d);
        assert!((at_stddev.sigma - 4.0 * (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn view_independent_color() {
        let scene = single_blob(0.0);
        let x = Vec3::new(0.45, 0.55, 0.5);
        let dirs = [
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(0.0, 0.0, -1.0),
            Vec3::new(0.6, 0.8, 0.0).normalized(),
        ];
        let base = scene.eval(x, dirs[0]).rgb;
        for d in dirs {
            assert!((scene.eval(x, d).rgb - base).norm() < 1e-12);
        }
    }

    #[test]
    fn outside_domain_is_empty() {
        let scene = single_blob(0.5);
        let s = scene.eval(Vec3::new(2.0, 0.5, 0.5), Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(s.sigma, 0.0);
        assert_eq!(s.rgb, Vec3::ZERO);
    }

    #[test]
    fn sigma_locally_lipschitz() {
        let scene = AnalyticScene::new(
            vec![
                GaussianBlob {
                    center: Vec3::new(0.3, 0.4, 0.5),
                    stddev: 0.15,
                    amplitude: 5.0,
                    color: Vec3::splat(0.5),
                    view_dependence: 0.0,
                    view_axis: Vec3::new(0.0, 0.0, 1.0),
                },
                GaussianBlob {
                    center: Vec3::new(0.7, 0.6, 0.5),
                    stddev: 0.08,
                    amplitude: 3.0,
                    color: Vec3::splat(0.5),
                    view_dependence: 0.0,
                    view_axis: Vec3::new(0.0, 0.0, 1.0),
                },
            ],
            unit_domain(),
        )
        .unwrap();
        // Per-blob gradient magnitude peaks at r = stddev: amplitude/(stddev*sqrt(e)).
        let lipschitz: f64 = scene
            .blobs()
            .iter()
            .map(|b| b.amplitude / (b.stddev * 0.5f64.exp()))
            .sum();
        let d = Vec3::new(0.0, 0.0, 1.0);
        for ix in 0..6 {
            for iy in 0..6 {
                for iz in 0..6 {
                    let x = Vec3::new(
                        0.07 + ix as f64 * 0.17,
                        0.09 + iy as f64 * 0.16,
                        0.05 + iz as f64 * 0.18,
                    );
                    let h = 1e-5;
                    let step = Vec3::new(h, 0.0, 0.0);
                    let df = (scene.eval(x + step, d).sigma - scene.eval(x, d).sigma).abs();
                    assert!(df <= lipschitz * h * 1.01, "finite difference {df} exceeds bound");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn encode_bounded_and_periodic(p in -1.0f64..1.0, levels in 0u32..6) {
            let e = frequency_encode(p, levels);
            prop_assert_eq!(e.len(), 2 * levels as usize);
            for v in &e {
                prop_assert!(*v >= -1.0 - 1e-12 && *v <= 1.0 + 1e-12);
            }
            let shifted = frequency_encode(p + 2.0, levels);
            for (a, b) in e.iter().zip(shifted.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn forward_outputs_always_valid(seed in 0u64..1000, wx in 0.0f64..1.0, wy in 0.0f64..1.0) {
            let arch = MlpArch { width: 8, depth: 2, l_pos: 3, l_dir: 1 };
            let params = MlpParams::he_uniform(arch, seed).unwrap();
            let out = mlp_forward(&params, Vec3::new(wx, wy, 0.5), Vec3::new(0.0, 1.0, 0.0));
            prop_assert!(out.sigma >= 0.0);
            for c in out.rgb.to_array() {
                prop_assert!((0.0..=1.0).contains(&c));
            }
        }
    }
}
