//! Ray traversal through the KD-tree and sample generation.
//!
//! Traversal walks depth-first, near child first, emitting one interval per
//! visited node where the hierarchical check says to stop (or at leaves).
//! Every emitted interval then receives the same sample budget after being
//! normalized to unit length, so scene complexity rather than spatial extent
//! governs sample density.

use crate::geometry::{ray_aabb_intersect, Ray, Vec3};
use crate::seeding::{derive, Stream};
use crate::subdivision::{KdNode, KdTree, NodeCode};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Span of ray parameters over which a ray crosses one emitted node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub ray_id: u32,
    pub node_code: NodeCode,
    pub t0: f64,
    pub t1: f64,
}

/// One point sample along a ray, tagged with the node that will shade it.
#[derive(Clone, Copy, Debug)]
pub struct PointSample {
    pub ray_id: u32,
    pub node_code: NodeCode,
    pub t: f64,
    pub position: Vec3,
    pub direction: Vec3,
}

/// Cone-footprint parameters for the hierarchical cutoff. The footprint at
/// distance t is `descend_factor * pixel_footprint_slope * t`; once a node's
/// diagonal fits inside it there is no point resolving finer levels.
#[derive(Clone, Copy, Debug)]
pub struct HCheckParams {
    /// World units of pixel footprint per unit distance, typically
    /// `tan(fov_y / height)`.
    pub pixel_footprint_slope: f64,
    /// Scale factor on the footprint (kappa).
    pub descend_factor: f64,
}

/// Floor on the distance entering the footprint rule, so rays starting inside
/// a node do not force infinite descent.
pub const HCHECK_T_MIN: f64 = 1e-3;

/// Whether traversal emits intervals at inner nodes or descends to leaves.
#[derive(Clone, Copy, Debug)]
pub enum TraversalMode {
    /// Always descend; only leaves emit intervals.
    LeafOnly,
    /// Stop early at inner nodes once their diagonal fits the footprint.
    Hierarchical(HCheckParams),
}

/// Descend decision: true means resolve children. Leaves never descend; an
/// inner node is descended while its diagonal exceeds the footprint at the
/// entry distance, so far nodes emit at coarser levels.
pub fn hcheck(node: &KdNode, t_enter: f64, hp: &HCheckParams) -> bool {
    if node.is_leaf() {
        return false;
    }
    let footprint = hp.descend_factor * hp.pixel_footprint_slope * t_enter.max(HCHECK_T_MIN);
    node.aabb.diagonal() > footprint
}

fn visit(
    node: &KdNode,
    ray: &Ray,
    mode: &TraversalMode,
    current_t: &mut f64,
    out: &mut Vec<Interval>,
) {
    let Some((t_enter, t_exit)) = ray_aabb_intersect(ray, &node.aabb) else {
        return;
    };
    let t0 = t_enter.max(*current_t);
    if t0 >= t_exit {
        return;
    }
    let descend = match mode {
        TraversalMode::LeafOnly => !node.is_leaf(),
        TraversalMode::Hierarchical(hp) => hcheck(node, t0, hp),
    };
    match (&node.split, descend) {
        (Some(split), true) => {
            // Near child first: the child owning the entry point comes first;
            // a point on the plane belongs to the right child.
            let entry = ray.at(t0);
            let near = usize::from(entry[split.axis] >= split.position);
            visit(&split.children[near], ray, mode, current_t, out);
            visit(&split.children[1 - near], ray, mode, current_t, out);
        }
        _ => {
            out.push(Interval { ray_id: ray.ray_id, node_code: node.code, t0, t1: t_exit });
            *current_t = t_exit;
        }
    }
}

/// Collects the intervals a ray crosses, sorted by entry, pairwise
/// non-overlapping, and together covering the ray's span through the root.
pub fn traverse_ray(tree: &KdTree, ray: &Ray, mode: &TraversalMode) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut current_t = 0.0;
    visit(&tree.root, ray, mode, &mut current_t, &mut out);
    out
}

/// Sample placement within an interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// One jittered sample per stratum of the normalized interval.
    Stratified,
    /// Base-2 radical inverse sequence with a per-(ray, node) shift.
    Halton,
}

/// Base-2 radical inverse: the bits of `i` reflected around the binary point.
pub(crate) fn radical_inverse_base2(mut i: u64) -> f64 {
    let mut f = 0.0;
    let mut scale = 0.5;
    while i > 0 {
        if i & 1 == 1 {
            f += scale;
        }
        scale *= 0.5;
        i >>= 1;
    }
    f
}

/// Fills `n` samples into an interval regardless of its length.
///
/// The interval is normalized to [0, 1); stratified mode jitters one sample
/// per stratum, halton mode applies a seeded shift (mod 1) to the first `n`
/// radical-inverse values and sorts. Unit positions map back to world t in
/// ascending order, and the jitter stream depends only on (seed, ray id,
/// node code), never on evaluation order.
pub fn fill_interval_samples(
    interval: &Interval,
    ray: &Ray,
    n: u32,
    mode: SampleMode,
    seed: u64,
) -> Vec<PointSample> {
    debug_assert_eq!(interval.ray_id, ray.ray_id);
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(
        seed,
        Stream::IntervalFill,
        interval.ray_id as u64,
        interval.node_code.value() as u64,
    ));
    let mut unit: Vec<f64> = match mode {
        SampleMode::Stratified => {
            let inv = 1.0 / n as f64;
            (0..n).map(|i| (i as f64 + rng.gen::<f64>()) * inv).collect()
        }
        SampleMode::Halton => {
            let shift: f64 = rng.gen();
            let mut u: Vec<f64> =
                (1..=n as u64).map(|i| (radical_inverse_base2(i) + shift) % 1.0).collect();
            u.sort_by(|a, b| a.partial_cmp(b).unwrap());
            u
        }
    };
    // Guard against pathological duplicates after the halton shift.
    unit.dedup();

    let span = interval.t1 - interval.t0;
    unit.iter()
        .map(|&u| {
            let t = interval.t0 + span * u;
            PointSample {
                ray_id: interval.ray_id,
                node_code: interval.node_code,
                t,
                position: ray.at(t),
                direction: ray.direction,
            }
        })
        .collect()
}

/// Per-ray sampling knobs.
#[derive(Clone, Copy, Debug)]
pub struct SamplingConfig {
    /// Samples per interval.
    pub budget: u32,
    /// Hard cap on samples per ray; when a ray crosses more intervals than
    /// the cap affords, the farthest intervals lose their samples.
    pub per_ray_cap: u32,
    pub mode: SampleMode,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { budget: 8, per_ray_cap: 192, mode: SampleMode::Stratified, seed: 0 }
    }
}

/// Fills every interval of one ray near-to-far under the per-ray cap.
pub fn fill_ray_samples(
    intervals: &[Interval],
    ray: &Ray,
    cfg: &SamplingConfig,
) -> Vec<PointSample> {
    let mut out = Vec::with_capacity(intervals.len() * cfg.budget as usize);
    let mut remaining = cfg.per_ray_cap;
    for interval in intervals {
        if remaining == 0 {
            break;
        }
        let take = cfg.budget.min(remaining);
        let samples = fill_interval_samples(interval, ray, take, cfg.mode, cfg.seed);
        remaining -= samples.len() as u32;
        out.extend(samples);
    }
    out
}
