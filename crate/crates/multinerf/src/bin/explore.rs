// Scratch harness for tuning scene parameters; not part of the deliverable.
use multinerf::cli::SceneConfig;
use multinerf::geometry::{Camera, Vec3};
use multinerf::renderer::{image_psnr, render_image, render_reference};
use multinerf::sampling::{HCheckParams, TraversalMode};
use multinerf::scheduler::{RenderPath, RenderSettings};
use multinerf::subdivision::{build_kdtree, build_regular_grid};
use multinerf::training::{distill_node, node_score, DistillConfig};
use std::path::Path;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("all");

    match which {
        "time" => time_distill(),
        "standard" => standard(&args[2]),
        "imbalanced" => imbalanced(&args[2]),
        "far" => far_camera(&args[2], args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32.0)),
        "capacity" => capacity(&args[2]),
        "lattice" => lattice(&args[2], args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4)),
        "scan" => scan(&args[2]),
        other => eprintln!("unknown experiment {other}"),
    }
}

/// Adaptive build only; prints cumulative node counts per depth cap.
fn scan(path: &str) {
    let cfg = SceneConfig::load(Path::new(path)).unwrap();
    let scene = cfg.scene().unwrap();
    let domain = cfg.domain().unwrap();
    let tree = build_kdtree(&scene, domain, &cfg.build_config(None)).unwrap();
    let hist = tree.depth_histogram();
    let mut cum = 0;
    let counts: Vec<String> = hist
        .iter()
        .map(|c| {
            cum += c;
            cum.to_string()
        })
        .collect();
    println!("counts_by_md={}", counts.join(","));
}

/// Full score lattice to a fixed depth, ignoring the stopping rule, so the
/// subdivision dynamics are visible level by level.
fn lattice(path: &str, depth: u32) {
    use multinerf::geometry::aabb_split;
    use multinerf::subdivision::{choose_split, sample_density_cloud, CloudPoint, NodeCode};

    let cfg = SceneConfig::load(Path::new(path)).unwrap();
    let scene = cfg.scene().unwrap();
    let domain = cfg.domain().unwrap();
    let bc = cfg.build_config(None);
    let cloud = sample_density_cloud(&scene, &domain, bc.cloud_points, bc.cloud_dirs, bc.seed);

    fn walk(
        scene: &multinerf::field::AnalyticScene,
        aabb: multinerf::geometry::Aabb,
        points: Vec<CloudPoint>,
        code: NodeCode,
        parent_score: Option<f64>,
        depth_left: u32,
        bc: &multinerf::subdivision::BuildConfig,
    ) {
        let dcfg = DistillConfig { seed: code.value() as u64 * 7919, ..bc.distill };
        let (mlp, _) = distill_node(scene, &aabb, bc.arch, &dcfg).unwrap();
        let score = node_score(scene, &mlp, &aabb, bc.score_points, bc.score_dirs, code.value() as u64);
        let mass: f64 = points.iter().map(|p| p.density).sum();
        let verdict = match parent_score {
            Some(p) if score < p * 0.99 => "SUBDIV",
            Some(_) => "leaf",
            None => "root",
        };
        println!(
            "{:indent$}code={} d={} score={:.2} mass={:.1} pts={} vol={:.4} [{verdict}]",
            "",
            code.value(),
            code.depth(),
            score,
            mass,
            points.len(),
            aabb.volume(),
            indent = 2 * code.depth() as usize,
        );
        if depth_left == 0 || points.len() < 2 {
            return;
        }
        let (axis, pos) = choose_split(&points, &aabb);
        let (lb, rb) = aabb_split(&aabb, axis, pos).unwrap();
        let (lp, rp): (Vec<CloudPoint>, Vec<CloudPoint>) =
            points.into_iter().partition(|p| p.position[axis] < pos);
        walk(scene, lb, lp, code.left(), Some(score), depth_left - 1, bc);
        walk(scene, rb, rp, code.right(), Some(score), depth_left - 1, bc);
    }
    walk(&scene, domain, cloud.points, NodeCode::ROOT, None, depth, &bc);
}

fn time_distill() {
    let cfg = SceneConfig::load(Path::new("scenes/blobs.toml")).unwrap();
    let scene = cfg.scene().unwrap();
    let domain = cfg.domain().unwrap();
    let bc = cfg.build_config(None);
    let t = Instant::now();
    let (params, loss) = distill_node(&scene, &domain, bc.arch, &bc.distill).unwrap();
    let dt = t.elapsed().as_secs_f64();
    let score = node_score(&scene, &params, &domain, bc.score_points, bc.score_dirs, 1);
    println!("distill: {dt:.2}s loss={loss:.5} score={score:.2} dB");
}

fn standard(path: &str) {
    let cfg = SceneConfig::load(Path::new(path)).unwrap();
    let scene = cfg.scene().unwrap();
    let domain = cfg.domain().unwrap();
    let bc = cfg.build_config(None);
    let t = Instant::now();
    let tree = build_kdtree(&scene, domain, &bc).unwrap();
    println!("build: {:.1}s nodes={} leaves={} hist={:?}",
        t.elapsed().as_secs_f64(), tree.node_count(), tree.leaf_count(), tree.depth_histogram());
    let mut scores = Vec::new();
    tree.for_each_node(&mut |n| scores.push((n.code.value(), n.depth(), n.score_db, n.is_leaf())));
    for (code, depth, s, leaf) in &scores {
        println!("  node {code} depth {depth} score {s:.2} dB leaf={leaf}");
    }
    let camera = cfg.camera().unwrap();
    let settings = cfg.render_settings(&camera, false, None);
    let t = Instant::now();
    let (img, stats) = render_image(&tree, &camera, &settings, RenderPath::Batched).unwrap();
    println!("render leaf-only: {:.1}s avg_samples={:.1} batches={}",
        t.elapsed().as_secs_f64(), stats.avg_samples_per_ray, stats.batch_count);
    let t = Instant::now();
    let reference = render_reference(&scene, &domain, &camera, cfg.render.reference_steps, cfg.background()).unwrap();
    println!("reference: {:.1}s", t.elapsed().as_secs_f64());
    println!("psnr={:.2} dB", image_psnr(&img, &reference).unwrap());
}

fn imbalanced(path: &str) {
    let cfg = SceneConfig::load(Path::new(path)).unwrap();
    let scene = cfg.scene().unwrap();
    let domain = cfg.domain().unwrap();
    let bc = cfg.build_config(None);
    let t = Instant::now();
    let adaptive = build_kdtree(&scene, domain, &bc).unwrap();
    let hist = adaptive.depth_histogram();
    println!("adaptive: {:.1}s nodes={} hist={:?}",
        t.elapsed().as_secs_f64(), adaptive.node_count(), hist);
    let mut cum = 0usize;
    for (d, c) in hist.iter().enumerate() {
        cum += c;
        println!("  max_depth={d} -> nodes={cum}");
    }
    let t = Instant::now();
    let regular = build_regular_grid(&scene, domain, 2, &cfg.build_config(None)).unwrap();
    println!("regular r=2: {:.1}s nodes={}", t.elapsed().as_secs_f64(), regular.node_count());

    let camera = cfg.camera().unwrap();
    let settings = cfg.render_settings(&camera, false, None);
    let reference = render_reference(&scene, &domain, &camera, cfg.render.reference_steps, cfg.background()).unwrap();
    for (name, tree) in [("adaptive", &adaptive), ("regular", &regular)] {
        let (img, stats) = render_image(tree, &camera, &settings, RenderPath::Batched).unwrap();
        println!("{name}: avg_samples={:.2} psnr={:.2}",
            stats.avg_samples_per_ray, image_psnr(&img, &reference).unwrap());
    }
}

fn far_camera(path: &str, kappa: f64) {
    let cfg = SceneConfig::load(Path::new(path)).unwrap();
    let scene = cfg.scene().unwrap();
    let domain = cfg.domain().unwrap();
    let bc = cfg.build_config(None);
    let tree = build_kdtree(&scene, domain, &bc).unwrap();
    println!("nodes={} hist={:?}", tree.node_count(), tree.depth_histogram());

    // Camera at 4x the scene diagonal from the center.
    let center = domain.center();
    let distance = 4.0 * domain.diagonal();
    let position = center + Vec3::new(0.25, 0.31, 0.91).normalized() * distance;
    let camera = Camera::look_at(position, center, Vec3::new(0.0, 1.0, 0.0),
        cfg.camera.fov_y_degrees.to_radians(), cfg.render.width, cfg.render.height).unwrap();

    let reference = render_reference(&scene, &domain, &camera, cfg.render.reference_steps, cfg.background()).unwrap();
    let leaf_settings = cfg.render_settings(&camera, false, None);
    let (leaf_img, leaf_stats) = render_image(&tree, &camera, &leaf_settings, RenderPath::Batched).unwrap();
    let leaf_psnr = image_psnr(&leaf_img, &reference).unwrap();
    println!("leaf-only: avg_samples={:.3} psnr={:.2}", leaf_stats.avg_samples_per_ray, leaf_psnr);

    for k in [1.0, 4.0, 8.0, 16.0, kappa, 48.0, 64.0] {
        let hp = HCheckParams {
            pixel_footprint_slope: (camera.fov_y / camera.height as f64).tan(),
            descend_factor: k,
        };
        let settings = RenderSettings { traversal: TraversalMode::Hierarchical(hp), ..leaf_settings };
        let (img, stats) = render_image(&tree, &camera, &settings, RenderPath::Batched).unwrap();
        let psnr = image_psnr(&img, &reference).unwrap();
        println!(
            "kappa={k}: avg_samples={:.3} ({:.1}% fewer) psnr={:.2} (drop {:.3})",
            stats.avg_samples_per_ray,
            100.0 * (1.0 - stats.avg_samples_per_ray / leaf_stats.avg_samples_per_ray),
            psnr,
            leaf_psnr - psnr
        );
    }
}

fn capacity(path: &str) {
    let cfg = SceneConfig::load(Path::new(path)).unwrap();
    let scene = cfg.scene().unwrap();
    let domain = cfg.domain().unwrap();
    let bc = cfg.build_config(None);
    for width in [16u32, 32, 64] {
        let mut scores = Vec::new();
        for seed in 0..3u64 {
            let arch = multinerf::field::MlpArch { width, ..bc.arch };
            let dcfg = DistillConfig { seed: 1000 + seed, ..bc.distill };
            let t = Instant::now();
            let (params, _) = distill_node(&scene, &domain, arch, &dcfg).unwrap();
            let s = node_score(&scene, &params, &domain, bc.score_points, bc.score_dirs, 77);
            scores.push(s);
            println!("  width={width} seed={seed}: {s:.2} dB ({:.1}s)", t.elapsed().as_secs_f64());
        }
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!("width={width}: median {:.2} dB", scores[1]);
    }
}
