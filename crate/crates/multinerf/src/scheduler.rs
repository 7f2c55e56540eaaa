//! Sort-based batching of samples for grouped MLP inference, scatter-back,
//! and emission-absorption compositing with early ray termination.
//!
//! The batched path realizes the sort-compaction scheme: all samples of a
//! frame are stably sorted by node code, each group is inferred through its
//! node's MLP, and results scatter back to ray order for compositing. The
//! naive path marches each ray independently and evaluates samples one by
//! one; both paths share the same per-sample math and per-ray accumulation
//! order, so their output is bit-identical.

use crate::field::{FieldSample, MlpScratch, NodeMlpField, RadianceField};
use crate::geometry::{ray_aabb_intersect, Ray, Vec3};
use crate::sampling::{fill_ray_samples, traverse_ray, PointSample, SamplingConfig, TraversalMode};
use crate::subdivision::{KdTree, NodeCode};
use crate::{Error, Result};
use rayon::prelude::*;
use std::ops::Range;
use std::time::Instant;

/// Transmittance threshold for early ray termination.
pub const DEFAULT_TAU_STOP: f64 = 1e-4;

/// One contiguous run of sorted samples sharing a node code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleBatch {
    pub node_code: NodeCode,
    pub range: Range<usize>,
}

/// Samples regrouped by node, with the permutation back to input order.
#[derive(Clone, Debug, Default)]
pub struct SortedSamples {
    pub samples: Vec<PointSample>,
    pub batches: Vec<SampleBatch>,
    /// `original_index[i]` is where sorted sample `i` came from.
    pub original_index: Vec<u32>,
}

/// Stable sort keyed by node code; within a batch the original (ray, t)
/// order survives, and the recorded permutation lets results scatter back.
pub fn sort_samples_by_node(samples: Vec<PointSample>) -> SortedSamples {
    let n = samples.len();
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by_key(|&i| samples[i as usize].node_code);
    let sorted: Vec<PointSample> = order.iter().map(|&i| samples[i as usize]).collect();

    let mut batches = Vec::new();
    let mut start = 0usize;
    while start < n {
        let code = sorted[start].node_code;
        let mut end = start + 1;
        while end < n && sorted[end].node_code == code {
            end += 1;
        }
        batches.push(SampleBatch { node_code: code, range: start..end });
        start = end;
    }
    SortedSamples { samples: sorted, batches, original_index: order }
}

fn eval_batch(
    tree: &KdTree,
    samples: &[PointSample],
    batch: &SampleBatch,
    field_override: Option<&dyn RadianceField>,
) -> Result<Vec<FieldSample>> {
    let members = &samples[batch.range.clone()];
    if let Some(field) = field_override {
        return Ok(members.iter().map(|s| field.eval(s.position, s.direction)).collect());
    }
    let node = tree
        .node_by_code(batch.node_code)
        .ok_or_else(|| Error::Invariant(format!("unknown node code {}", batch.node_code.value())))?;
    let field = NodeMlpField::new(&node.mlp, &node.aabb);
    let mut scratch = MlpScratch::default();
    Ok(members.iter().map(|s| field.eval_scratch(s.position, s.direction, &mut scratch)).collect())
}

/// Runs every batch through its node's MLP and writes results back at the
/// samples' original indices. Output is independent of batch execution
/// order; batches run in parallel.
pub fn infer_batches(tree: &KdTree, sorted: &SortedSamples) -> Result<Vec<FieldSample>> {
    infer_batches_with(tree, sorted, None)
}

/// `infer_batches` with an optional field standing in for every node's MLP
/// (the debug hook for rendering a teacher through the batched pipeline).
pub fn infer_batches_with(
    tree: &KdTree,
    sorted: &SortedSamples,
    field_override: Option<&dyn RadianceField>,
) -> Result<Vec<FieldSample>> {
    let per_batch: Vec<Result<Vec<FieldSample>>> = sorted
        .batches
        .par_iter()
        .map(|batch| eval_batch(tree, &sorted.samples, batch, field_override))
        .collect();

    let mut out = vec![FieldSample::EMPTY; sorted.samples.len()];
    for (batch, results) in sorted.batches.iter().zip(per_batch) {
        for (offset, value) in results?.into_iter().enumerate() {
            out[sorted.original_index[batch.range.start + offset] as usize] = value;
        }
    }
    Ok(out)
}

/// Standard emission-absorption quadrature over samples sorted by t.
///
/// `delta_i = t_{i+1} - t_i` with the last delta running to `t_far`, in world
/// units even though sample counts were assigned per normalized interval.
/// Accumulation stops once transmittance falls below `tau_stop`; the
/// remaining transmittance lights the background.
pub fn composite_ray(
    samples: &[PointSample],
    fields: &[FieldSample],
    t_far: f64,
    background: Vec3,
    tau_stop: f64,
) -> Result<Vec3> {
    if samples.len() != fields.len() {
        return Err(Error::Params(format!(
            "sample/field length mismatch: {} vs {}",
            samples.len(),
            fields.len()
        )));
    }
    for w in samples.windows(2) {
        if w[1].t < w[0].t {
            return Err(Error::Params("composite input not sorted by t".into()));
        }
    }
    let mut color = Vec3::ZERO;
    let mut transmittance = 1.0f64;
    for (i, (s, f)) in samples.iter().zip(fields.iter()).enumerate() {
        let delta = if i + 1 < samples.len() { samples[i + 1].t - s.t } else { t_far - s.t };
        let alpha = 1.0 - (-f.sigma * delta.max(0.0)).exp();
        color += f.rgb * (transmittance * alpha);
        transmittance *= 1.0 - alpha;
        if transmittance < tau_stop {
            break;
        }
    }
    Ok(color + background * transmittance)
}

/// Scheduling strategy for a render.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderPath {
    /// Traverse, fill, sort by node, batched inference, scatter, composite.
    Batched,
    /// Per-ray marching with direct per-sample evaluation; the oracle.
    Naive,
}

/// Everything a render needs besides the tree and the rays.
#[derive(Clone, Copy, Debug)]
pub struct RenderSettings {
    pub traversal: TraversalMode,
    pub sampling: SamplingConfig,
    pub background: Vec3,
    pub tau_stop: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            traversal: TraversalMode::LeafOnly,
            sampling: SamplingConfig::default(),
            background: Vec3::ZERO,
            tau_stop: DEFAULT_TAU_STOP,
        }
    }
}

/// Per-render counters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RenderStats {
    pub avg_samples_per_ray: f64,
    pub total_samples: u64,
    pub batch_count: u64,
    pub max_batch: u64,
    pub wall_millis: f64,
}

struct RayWork {
    samples: Vec<PointSample>,
    t_far: f64,
    hit: bool,
}

fn prepare_ray(tree: &KdTree, ray: &Ray, settings: &RenderSettings) -> RayWork {
    match ray_aabb_intersect(ray, &tree.root.aabb) {
        Some((_, t_exit)) => {
            let intervals = traverse_ray(tree, ray, &settings.traversal);
            let samples = fill_ray_samples(&intervals, ray, &settings.sampling);
            RayWork { samples, t_far: t_exit, hit: true }
        }
        None => RayWork { samples: Vec::new(), t_far: 0.0, hit: false },
    }
}

/// Renders a set of rays. Both paths produce bit-identical colors; the
/// batched one exists to group MLP evaluations per node, the naive one to
/// check it. Rays are processed in parallel with output order fixed by ray
/// index, so results do not depend on the worker count.
pub fn render_rays(
    tree: &KdTree,
    rays: &[Ray],
    settings: &RenderSettings,
    path: RenderPath,
) -> Result<(Vec<Vec3>, RenderStats)> {
    render_rays_with(tree, rays, settings, path, None)
}

/// `render_rays` with the per-node MLPs replaced by one field (debug hook).
pub fn render_rays_with(
    tree: &KdTree,
    rays: &[Ray],
    settings: &RenderSettings,
    path: RenderPath,
    field_override: Option<&dyn RadianceField>,
) -> Result<(Vec<Vec3>, RenderStats)> {
    let started = Instant::now();
    if rays.is_empty() {
        return Ok((Vec::new(), RenderStats::default()));
    }

    let work: Vec<RayWork> =
        rays.par_iter().map(|ray| prepare_ray(tree, ray, settings)).collect();
    let total_samples: u64 = work.iter().map(|w| w.samples.len() as u64).sum();

    let mut stats = RenderStats {
        avg_samples_per_ray: total_samples as f64 / rays.len() as f64,
        total_samples,
        batch_count: 0,
        max_batch: 0,
        wall_millis: 0.0,
    };

    let colors = match path {
        RenderPath::Naive => work
            .par_iter()
            .map(|w| {
                if !w.hit {
                    return Ok(settings.background);
                }
                let fields = naive_eval(tree, &w.samples, field_override)?;
                composite_ray(&w.samples, &fields, w.t_far, settings.background, settings.tau_stop)
            })
            .collect::<Result<Vec<Vec3>>>()?,
        RenderPath::Batched => {
            let mut flat = Vec::with_capacity(total_samples as usize);
            let mut ranges = Vec::with_capacity(work.len());
            for w in &work {
                let start = flat.len();
                flat.extend_from_slice(&w.samples);
                ranges.push(start..flat.len());
            }
            let sorted = sort_samples_by_node(flat);
            stats.batch_count = sorted.batches.len() as u64;
            stats.max_batch =
                sorted.batches.iter().map(|b| b.range.len() as u64).max().unwrap_or(0);
            let fields = infer_batches_with(tree, &sorted, field_override)?;
            work.par_iter()
                .zip(ranges.par_iter())
                .map(|(w, range)| {
                    if !w.hit {
                        return Ok(settings.background);
                    }
                    composite_ray(
                        &w.samples,
                        &fields[range.clone()],
                        w.t_far,
                        settings.background,
                        settings.tau_stop,
                    )
                })
                .collect::<Result<Vec<Vec3>>>()?
        }
    };

    stats.wall_millis = started.elapsed().as_secs_f64() * 1e3;
    Ok((colors, stats))
}

fn naive_eval(
    tree: &KdTree,
    samples: &[PointSample],
    field_override: Option<&dyn RadianceField>,
) -> Result<Vec<FieldSample>> {
    let mut out = Vec::with_capacity(samples.len());
    let mut scratch = MlpScratch::default();
    for s in samples {
        let value = match field_override {
            Some(field) => field.eval(s.position, s.direction),
            None => {
                let node = tree.node_by_code(s.node_code).ok_or_else(|| {
                    Error::Invariant(format!("unknown node code {}", s.node_code.value()))
                })?;
                NodeMlpField::new(&node.mlp, &node.aabb).eval_scratch(
                    s.position,
                    s.direction,
                    &mut scratch,
                )
            }
        };
        out.push(value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{MlpArch, MlpParams};
    use crate::geometry::{aabb_split, Aabb, Camera};
    use crate::sampling::SampleMode;
    use crate::subdivision::{BuildConfig, KdNode, KdSplit};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_box() -> Aabb {
        Aabb::new(Vec3::ZERO, Vec3::splat(1.0)).unwrap()
    }

    fn sample_at(t: f64, ray_id: u32, code: NodeCode) -> PointSample {
        PointSample {
            ray_id,
            node_code: code,
            t,
            position: Vec3::new(t, 0.0, 0.0),
            direction: Vec3::new(1.0, 0.0, 0.0),
        }
    }

    /// Random tree with random splits and seeded random MLPs; structure only,
    /// no distillation.
    fn random_tree(seed: u64, max_levels: u32, arch: MlpArch) -> KdTree {
        fn build(
            rng: &mut ChaCha8Rng,
            aabb: Aabb,
            code: NodeCode,
            levels: u32,
            arch: MlpArch,
        ) -> KdNode {
            let mlp = MlpParams::he_uniform_rng(arch, rng).unwrap();
            let split_here = levels > 0 && rng.gen::<f64>() < 0.75;
            if !split_here {
                return KdNode { code, aabb, score_db: 0.0, mlp, split: None };
            }
            let axis = rng.gen_range(0..3usize);
            let frac: f64 = rng.gen_range(0.25..0.75);
            let position = aabb.min()[axis] + frac * aabb.extent()[axis];
            let (lb, rb) = aabb_split(&aabb, axis, position).unwrap();
            let children = Box::new([
                build(rng, lb, code.left(), levels - 1, arch),
                build(rng, rb, code.right(), levels - 1, arch),
            ]);
            KdNode { code, aabb, score_db: 0.0, mlp, split: Some(KdSplit { axis, position, children }) }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KdTree {
            arch,
            root: build(&mut rng, unit_box(), NodeCode::ROOT, max_levels, arch),
            config: BuildConfig { arch, ..BuildConfig::default() },
        }
    }

    #[test]
    fn sort_stable_grouping() {
        let c2 = NodeCode::from_value(2).unwrap();
        let c5 = NodeCode::from_value(5).unwrap();
        let samples = vec![sample_at(0.1, 0, c5), sample_at(0.2, 0, c2), sample_at(0.3, 1, c5)];
        let sorted = sort_samples_by_node(samples);
        assert_eq!(sorted.batches.len(), 2);
        assert_eq!(sorted.batches[0].node_code, c2);
        assert_eq!(sorted.batches[0].range, 0..1);
        assert_eq!(sorted.batches[1].node_code, c5);
        assert_eq!(sorted.batches[1].range, 1..3);
        // Original relative order within the code-5 batch.
        assert_eq!(sorted.samples[1].t, 0.1);
        assert_eq!(sorted.samples[2].t, 0.3);
        assert_eq!(sorted.original_index, vec![1, 0, 2]);
    }

    #[test]
    fn sort_empty_and_single_group() {
        assert!(sort_samples_by_node(Vec::new()).batches.is_empty());
        let c = NodeCode::ROOT;
        let sorted = sort_samples_by_node(vec![sample_at(0.5, 0, c), sample_at(0.7, 0, c)]);
        assert_eq!(sorted.batches.len(), 1);
        assert_eq!(sorted.batches[0].range, 0..2);
    }

    #[test]
    fn infer_zero_weight_mlp() {
        let arch = MlpArch { width: 4, depth: 1, l_pos: 1, l_dir: 1 };
        let tree = KdTree {
            arch,
            root: KdNode {
                code: NodeCode::ROOT,
                aabb: unit_box(),
                score_db: 0.0,
                mlp: MlpParams::zeros(arch).unwrap(),
                split: None,
            },
            config: BuildConfig { arch, ..BuildConfig::default() },
        };
        let sorted = sort_samples_by_node(vec![sample_at(0.5, 0, NodeCode::ROOT)]);
        let out = infer_batches(&tree, &sorted).unwrap();
        assert!((out[0].sigma - 2.0f64.ln()).abs() < 1e-12);
        assert!((out[0].rgb - Vec3::splat(0.5)).norm() < 1e-12);
    }

    #[test]
    fn infer_unknown_code_is_error() {
        let tree = random_tree(1, 0, MlpArch { width: 4, depth: 1, l_pos: 0, l_dir: 0 });
        let bogus = NodeCode::from_value(1234).unwrap();
        let sorted = sort_samples_by_node(vec![sample_at(0.5, 0, bogus)]);
        match infer_batches(&tree, &sorted) {
            Err(Error::Invariant(_)) => {}
            other => panic!("expected invariant error, got {other:?}"),
        }
    }

    #[test]
    fn infer_matches_per_sample_oracle_exactly() {
        let arch = MlpArch { width: 8, depth: 2, l_pos: 2, l_dir: 1 };
        let tree = random_tree(7, 3, arch);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut samples = Vec::new();
        for i in 0..200u32 {
            let p = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let leaf = tree.leaf_for_point(p).unwrap();
            samples.push(PointSample {
                ray_id: i / 10,
                node_code: leaf.code,
                t: rng.gen::<f64>(),
                position: p,
                direction: Vec3::new(0.0, 0.0, 1.0),
            });
        }
        let sorted = sort_samples_by_node(samples.clone());
        let batched = infer_batches(&tree, &sorted).unwrap();
        let naive = naive_eval(&tree, &samples, None).unwrap();
        for (b, n) in batched.iter().zip(naive.iter()) {
            assert_eq!(b.sigma.to_bits(), n.sigma.to_bits());
            assert_eq!(b.rgb.x.to_bits(), n.rgb.x.to_bits());
        }
    }

    #[test]
    fn composite_empty_is_background() {
        let bg = Vec3::new(0.2, 0.3, 0.4);
        let c = composite_ray(&[], &[], 5.0, bg, DEFAULT_TAU_STOP).unwrap();
        assert_eq!(c, bg);
    }

    #[test]
    fn composite_zero_sigma_is_background() {
        let samples: Vec<PointSample> =
            (0..8).map(|i| sample_at(i as f64 * 0.1, 0, NodeCode::ROOT)).collect();
        let fields = vec![FieldSample::EMPTY; 8];
        let bg = Vec3::new(0.9, 0.1, 0.5);
        let c = composite_ray(&samples, &fields, 1.0, bg, DEFAULT_TAU_STOP).unwrap();
        assert!((c - bg).norm() < 1e-12);
    }

    #[test]
    fn composite_opaque_sample() {
        let samples = vec![sample_at(1.0, 0, NodeCode::ROOT)];
        let fields =
            vec![FieldSample { sigma: 50.0, rgb: Vec3::new(0.3, 0.7, 0.2) }];
        let c = composite_ray(&samples, &fields, 2.0, Vec3::ZERO, DEFAULT_TAU_STOP).unwrap();
        assert!((c - Vec3::new(0.3, 0.7, 0.2)).norm() < 1e-6);
    }

    #[test]
    fn composite_two_sample_closed_form() {
        let samples = vec![sample_at(0.0, 0, NodeCode::ROOT), sample_at(1.0, 0, NodeCode::ROOT)];
        let fields = vec![
            FieldSample { sigma: 1.0, rgb: Vec3::new(1.0, 0.0, 0.0) },
            FieldSample { sigma: 10.0, rgb: Vec3::new(0.0, 1.0, 0.0) },
        ];
        let c = composite_ray(&samples, &fields, 2.0, Vec3::ZERO, DEFAULT_TAU_STOP).unwrap();
        assert!((c.x - 0.63212).abs() < 1e-4, "{c:?}");
        assert!((c.y - 0.36786).abs() < 1e-4, "{c:?}");
        assert_eq!(c.z, 0.0);
    }

    #[test]
    fn composite_unsorted_rejected() {
        let samples = vec![sample_at(1.0, 0, NodeCode::ROOT), sample_at(0.5, 0, NodeCode::ROOT)];
        let fields = vec![FieldSample::EMPTY; 2];
        assert!(composite_ray(&samples, &fields, 2.0, Vec3::ZERO, DEFAULT_TAU_STOP).is_err());
    }

    fn random_sample_list(rng: &mut ChaCha8Rng, n: usize) -> (Vec<PointSample>, Vec<FieldSample>) {
        let mut t = 0.0;
        let mut samples = Vec::with_capacity(n);
        let mut fields = Vec::with_capacity(n);
        for _ in 0..n {
            t += rng.gen::<f64>() * 0.3;
            samples.push(sample_at(t, 0, NodeCode::ROOT));
            fields.push(FieldSample {
                sigma: rng.gen::<f64>() * 8.0,
                rgb: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
            });
        }
        (samples, fields)
    }

    /// Weights plus final transmittance partition unity on a black
    /// background, and the transmittance recurrence telescopes to
    /// exp(-sum sigma delta).
    #[test]
    fn quadrature_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..500 {
            let n = rng.gen_range(1..40);
            let (samples, fields) = random_sample_list(&mut rng, n);
            let t_far = samples.last().unwrap().t + rng.gen::<f64>();

            let mut weight_sum = 0.0;
            let mut transmittance = 1.0f64;
            let mut optical_depth = 0.0;
            for i in 0..n {
                let delta =
                    if i + 1 < n { samples[i + 1].t - samples[i].t } else { t_far - samples[i].t };
                let alpha = 1.0 - (-fields[i].sigma * delta).exp();
                weight_sum += transmittance * alpha;
                transmittance *= 1.0 - alpha;
                optical_depth += fields[i].sigma * delta;
            }
            assert!((weight_sum + transmittance - 1.0).abs() < 1e-6);
            assert!((transmittance - (-optical_depth).exp()).abs() < 1e-6);
        }
    }

    /// Early termination moves each channel by less than tau_stop.
    #[test]
    fn early_termination_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(5..60);
            let (samples, fields) = random_sample_list(&mut rng, n);
            let t_far = samples.last().unwrap().t + 0.5;
            let bg = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            let with = composite_ray(&samples, &fields, t_far, bg, 1e-4).unwrap();
            let without = composite_ray(&samples, &fields, t_far, bg, 0.0).unwrap();
            let diff = with - without;
            for c in diff.to_array() {
                assert!(c.abs() <= 1e-4 + 1e-12, "delta {c}");
            }
        }
    }

    fn test_camera(seed: u64, size: u32) -> Camera {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let r = 2.0 + rng.gen::<f64>();
        let position = Vec3::new(
            0.5 + r * theta.cos(),
            0.3 + rng.gen::<f64>(),
            0.5 + r * theta.sin(),
        );
        Camera::look_at(
            position,
            Vec3::splat(0.5),
            Vec3::new(0.0, 1.0, 0.0),
            0.9,
            size,
            size,
        )
        .unwrap()
    }

    #[test]
    fn batched_equals_naive_bitwise() {
        let arch = MlpArch { width: 8, depth: 2, l_pos: 2, l_dir: 1 };
        for seed in 0..6u64 {
            let tree = random_tree(100 + seed, 3, arch);
            let cam = test_camera(seed, 24);
            let rays = crate::geometry::generate_camera_rays(&cam).unwrap();
            let settings = RenderSettings {
                sampling: SamplingConfig {
                    budget: 4,
                    per_ray_cap: 64,
                    mode: if seed % 2 == 0 { SampleMode::Stratified } else { SampleMode::Halton },
                    seed,
                },
                ..RenderSettings::default()
            };
            let (batched, bstats) =
                render_rays(&tree, &rays, &settings, RenderPath::Batched).unwrap();
            let (naive, nstats) = render_rays(&tree, &rays, &settings, RenderPath::Naive).unwrap();
            assert_eq!(batched.len(), naive.len());
            for (a, b) in batched.iter().zip(naive.iter()) {
                assert_eq!(a.x.to_bits(), b.x.to_bits());
                assert_eq!(a.y.to_bits(), b.y.to_bits());
                assert_eq!(a.z.to_bits(), b.z.to_bits());
            }
            assert_eq!(bstats.total_samples, nstats.total_samples);
            assert!(bstats.batch_count > 0);
            assert_eq!(nstats.batch_count, 0);
        }
    }

    #[test]
    fn zero_rays_zero_stats() {
        let tree = random_tree(5, 2, MlpArch { width: 4, depth: 1, l_pos: 0, l_dir: 0 });
        let (colors, stats) =
            render_rays(&tree, &[], &RenderSettings::default(), RenderPath::Batched).unwrap();
        assert!(colors.is_empty());
        assert_eq!(stats, RenderStats::default());
    }

    #[test]
    fn stats_accounting() {
        let arch = MlpArch { width: 4, depth: 1, l_pos: 1, l_dir: 0 };
        let tree = random_tree(3, 2, arch);
        let cam = test_camera(40, 16);
        let rays = crate::geometry::generate_camera_rays(&cam).unwrap();
        let (_, stats) =
            render_rays(&tree, &rays, &RenderSettings::default(), RenderPath::Batched).unwrap();
        assert!(
            (stats.avg_samples_per_ray - stats.total_samples as f64 / rays.len() as f64).abs()
                < 1e-12
        );
    }
}
