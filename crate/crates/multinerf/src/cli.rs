//! Scene config ingestion and the build / render / ablate commands.
//!
//! The scene file is strict TOML: unknown keys are rejected so a typo fails
//! loudly instead of silently running with defaults.

use crate::field::{AnalyticScene, GaussianBlob, MlpArch};
use crate::geometry::{Aabb, Camera, Vec3};
use crate::renderer::{image_psnr, render_image, render_reference, ImageBuffer, RenderStats};
use crate::sampling::{HCheckParams, SampleMode, SamplingConfig, TraversalMode};
use crate::scheduler::{RenderPath, RenderSettings, DEFAULT_TAU_STOP};
use crate::subdivision::{
    build_kdtree, build_regular_grid, load_tree_file, save_tree_file, BuildConfig, KdTree,
};
use crate::training::DistillConfig;
use crate::{Error, Result};
use serde::Deserialize;
use std::io::Write;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Scene config
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub domain: DomainSection,
    #[serde(default, rename = "blob")]
    pub blobs: Vec<BlobSection>,
    pub camera: CameraSection,
    #[serde(default)]
    pub render: RenderSection,
    #[serde(default)]
    pub build: BuildSection,
    #[serde(default)]
    pub sampling: SamplingSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSection {
    pub center: [f64; 3],
    pub stddev: f64,
    pub amplitude: f64,
    pub color: [f64; 3],
    #[serde(default)]
    pub view_dependence: f64,
    #[serde(default = "default_view_axis")]
    pub view_axis: [f64; 3],
}

fn default_view_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSection {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    pub fov_y_degrees: f64,
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSection {
    pub width: u32,
    pub height: u32,
    pub background: [f64; 3],
    pub reference_steps: u32,
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderSection { width: 128, height: 128, background: [0.0; 3], reference_steps: 1024 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildSection {
    pub seed: u64,
    pub cloud_points: u32,
    pub cloud_dirs: u32,
    pub max_depth: u32,
    pub min_points: u32,
    pub min_mass: f64,
    pub score_points: u32,
    pub score_dirs: u32,
    pub arch: ArchSection,
    pub distill: DistillSection,
}

impl Default for BuildSection {
    fn default() -> Self {
        let cfg = BuildConfig::default();
        BuildSection {
            seed: cfg.seed,
            cloud_points: cfg.cloud_points,
            cloud_dirs: cfg.cloud_dirs,
            max_depth: cfg.max_depth,
            min_points: cfg.min_points,
            min_mass: cfg.min_mass,
            score_points: cfg.score_points,
            score_dirs: cfg.score_dirs,
            arch: ArchSection::default(),
            distill: DistillSection::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub width: u32,
    pub depth: u32,
    pub l_pos: u32,
    pub l_dir: u32,
}

impl Default for ArchSection {
    fn default() -> Self {
        let arch = BuildConfig::default().arch;
        ArchSection { width: arch.width, depth: arch.depth, l_pos: arch.l_pos, l_dir: arch.l_dir }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub iterations: u32,
    pub batch: u32,
    pub dirs_per_point: u32,
    pub lr: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            iterations: d.iterations,
            batch: d.batch,
            dirs_per_point: d.dirs_per_point,
            lr: d.lr,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub budget: u32,
    pub per_ray_cap: u32,
    pub mode: SampleModeName,
    pub kappa: f64,
    pub seed: u64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let s = SamplingConfig::default();
        SamplingSection {
            budget: s.budget,
            per_ray_cap: s.per_ray_cap,
            mode: SampleModeName::Stratified,
            kappa: 1.0,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleModeName {
    Stratified,
    Halton,
}

impl From<SampleModeName> for SampleMode {
    fn from(m: SampleModeName) -> SampleMode {
        match m {
            SampleModeName::Stratified => SampleMode::Stratified,
            SampleModeName::Halton => SampleMode::Halton,
        }
    }
}

impl SceneConfig {
    pub fn load(path: &Path) -> Result<SceneConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SceneConfig = toml::from_str(&text)?;
        Ok(cfg)
    }

    pub fn domain(&self) -> Result<Aabb> {
        Aabb::new(Vec3::from_array(self.domain.min), Vec3::from_array(self.domain.max))
            .map_err(|e| Error::Config(format!("domain: {e}")))
    }

    pub fn scene(&self) -> Result<AnalyticScene> {
        let domain = self.domain()?;
        let blobs = self
            .blobs
            .iter()
            .map(|b| GaussianBlob {
                center: Vec3::from_array(b.center),
                stddev: b.stddev,
                amplitude: b.amplitude,
                color: Vec3::from_array(b.color),
                view_dependence: b.view_dependence,
                view_axis: Vec3::from_array(b.view_axis).normalized(),
            })
            .collect();
        AnalyticScene::new(blobs, domain)
    }

    pub fn camera(&self) -> Result<Camera> {
        Camera::look_at(
            Vec3::from_array(self.camera.position),
            Vec3::from_array(self.camera.look_at),
            Vec3::from_array(self.camera.up),
            self.camera.fov_y_degrees.to_radians(),
            self.render.width,
            self.render.height,
        )
    }

    pub fn build_config(&self, seed_override: Option<u64>) -> BuildConfig {
        let b = &self.build;
        BuildConfig {
            cloud_points: b.cloud_points,
            cloud_dirs: b.cloud_dirs,
            max_depth: b.max_depth,
            min_points: b.min_points,
            min_mass: b.min_mass,
            arch: MlpArch {
                width: b.arch.width,
                depth: b.arch.depth,
                l_pos: b.arch.l_pos,
                l_dir: b.arch.l_dir,
            },
            distill: DistillConfig {
                iterations: b.distill.iterations,
                batch: b.distill.batch,
                dirs_per_point: b.distill.dirs_per_point,
                lr: b.distill.lr,
                seed: 0, // derived per node from the master seed
            },
            score_points: b.score_points,
            score_dirs: b.score_dirs,
            seed: seed_override.unwrap_or(b.seed),
        }
    }

    pub fn sampling_config(&self, seed_override: Option<u64>) -> SamplingConfig {
        SamplingConfig {
            budget: self.sampling.budget,
            per_ray_cap: self.sampling.per_ray_cap,
            mode: self.sampling.mode.into(),
            seed: seed_override.unwrap_or(self.sampling.seed),
        }
    }

    /// Footprint slope from the camera: one pixel's angle approximated by
    /// tan(fov_y / height), scaled by the configured kappa.
    pub fn hcheck_params(&self, camera: &Camera) -> HCheckParams {
        HCheckParams {
            pixel_footprint_slope: (camera.fov_y / camera.height as f64).tan(),
            descend_factor: self.sampling.kappa,
        }
    }

    pub fn background(&self) -> Vec3 {
        Vec3::from_array(self.render.background)
    }

    pub fn render_settings(
        &self,
        camera: &Camera,
        hierarchical: bool,
        seed_override: Option<u64>,
    ) -> RenderSettings {
        RenderSettings {
            traversal: if hierarchical {
                TraversalMode::Hierarchical(self.hcheck_params(camera))
            } else {
                TraversalMode::LeafOnly
            },
            sampling: self.sampling_config(seed_override),
            background: self.background(),
            tau_stop: DEFAULT_TAU_STOP,
        }
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct BuildArgs {
    pub scene: PathBuf,
    pub out: PathBuf,
    /// Build the regular-grid baseline at this resolution instead.
    pub grid: Option<u32>,
    pub seed: Option<u64>,
}

pub fn cmd_build(args: &BuildArgs, out: &mut impl Write) -> Result<()> {
    let config = SceneConfig::load(&args.scene)?;
    let scene = config.scene()?;
    let domain = config.domain()?;
    let build_cfg = config.build_config(args.seed);
    let tree = match args.grid {
        Some(r) => build_regular_grid(&scene, domain, r, &build_cfg)?,
        None => build_kdtree(&scene, domain, &build_cfg)?,
    };
    save_tree_file(&tree, &args.out)?;

    let nodes = tree.node_count();
    writeln!(out, "nodes={nodes}")?;
    writeln!(out, "leaves={}", tree.leaf_count())?;
    writeln!(out, "max_depth={}", tree.max_depth())?;
    writeln!(out, "total_distill_iterations={}", nodes as u64 * build_cfg.distill.iterations as u64)?;
    let hist: Vec<String> =
        tree.depth_histogram().iter().map(|c| c.to_string()).collect();
    writeln!(out, "depth_histogram={}", hist.join(","))?;
    Ok(())
}

#[derive(Debug)]
pub struct RenderArgs {
    pub tree: PathBuf,
    pub scene: PathBuf,
    pub out: PathBuf,
    pub path: RenderPath,
    pub no_hcheck: bool,
    pub psnr_ref: bool,
    pub seed: Option<u64>,
}

fn write_stats(out: &mut impl Write, stats: &RenderStats) -> Result<()> {
    writeln!(out, "avg_samples_per_ray={:.4}", stats.avg_samples_per_ray)?;
    writeln!(out, "total_samples={}", stats.total_samples)?;
    writeln!(out, "batch_count={}", stats.batch_count)?;
    writeln!(out, "max_batch={}", stats.max_batch)?;
    writeln!(out, "wall_ms={:.2}", stats.wall_millis)?;
    Ok(())
}

pub fn cmd_render(args: &RenderArgs, out: &mut impl Write) -> Result<()> {
    let config = SceneConfig::load(&args.scene)?;
    let tree = load_tree_file(&args.tree)?;
    let camera = config.camera()?;
    let settings = config.render_settings(&camera, !args.no_hcheck, args.seed);

    let (image, stats) = render_image(&tree, &camera, &settings, args.path)?;
    std::fs::write(&args.out, image.to_ppm_bytes())?;
    write_stats(out, &stats)?;

    if args.psnr_ref {
        let scene = config.scene()?;
        let reference = render_reference(
            &scene,
            &config.domain()?,
            &camera,
            config.render.reference_steps,
            config.background(),
        )?;
        writeln!(out, "psnr_db={:.4}", image_psnr(&image, &reference)?)?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct AblateArgs {
    pub scene: PathBuf,
    /// Grid resolution for the regular baseline.
    pub grid: u32,
    pub seed: Option<u64>,
}

/// Runs the four-way comparison {adaptive, regular} x {hcheck, leaf-only} on
/// the same scene and camera, printing one machine-readable CSV row each.
pub fn cmd_ablate(args: &AblateArgs, out: &mut impl Write) -> Result<()> {
    let config = SceneConfig::load(&args.scene)?;
    let scene = config.scene()?;
    let domain = config.domain()?;
    let camera = config.camera()?;
    let build_cfg = config.build_config(args.seed);

    let adaptive = build_kdtree(&scene, domain, &build_cfg)?;
    let regular = build_regular_grid(&scene, domain, args.grid, &build_cfg)?;
    eprintln!(
        "ablate: adaptive nodes={} leaves={}, regular nodes={} leaves={}",
        adaptive.node_count(),
        adaptive.leaf_count(),
        regular.node_count(),
        regular.leaf_count()
    );

    let reference = render_reference(
        &scene,
        &domain,
        &camera,
        config.render.reference_steps,
        config.background(),
    )?;

    writeln!(out, "config,psnr_db,avg_samples_per_ray,batches,wall_ms")?;
    let cases: [(&str, &KdTree, bool); 4] = [
        ("adaptive+hcheck", &adaptive, true),
        ("adaptive+leaf", &adaptive, false),
        ("regular+hcheck", &regular, true),
        ("regular+leaf", &regular, false),
    ];
    for (name, tree, hierarchical) in cases {
        let settings = config.render_settings(&camera, hierarchical, args.seed);
        let (image, stats) = render_image(tree, &camera, &settings, RenderPath::Batched)?;
        let psnr = image_psnr(&image, &reference)?;
        writeln!(
            out,
            "{name},{psnr:.4},{:.4},{},{:.2}",
            stats.avg_samples_per_ray, stats.batch_count, stats.wall_millis
        )?;
    }
    Ok(())
}

/// PPM bytes for an already-rendered image; exposed for tests that compare
/// CLI output against library renders.
pub fn ppm_bytes(image: &ImageBuffer) -> Vec<u8> {
    image.to_ppm_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [domain]
        min = [0.0, 0.0, 0.0]
        max = [1.0, 1.0, 1.0]

        [[blob]]
        center = [0.5, 0.5, 0.5]
        stddev = 0.2
        amplitude = 5.0
        color = [0.8, 0.3, 0.2]

        [camera]
        position = [0.5, 0.5, 3.0]
        look_at = [0.5, 0.5, 0.5]
        fov_y_degrees = 40.0
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: SceneConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.render.width, 128);
        assert_eq!(cfg.build.arch.width, 32);
        assert_eq!(cfg.sampling.budget, 8);
        assert!(cfg.scene().is_ok());
        assert!(cfg.camera().is_ok());
        let bc = cfg.build_config(None);
        assert_eq!(bc.distill.iterations, 2000);
        let bc2 = cfg.build_config(Some(99));
        assert_eq!(bc2.seed, 99);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = format!("{MINIMAL}\n[render]\nwidht = 64\n");
        let err = toml::from_str::<SceneConfig>(&bad);
        assert!(err.is_err(), "typo'd key must be rejected");
    }

    #[test]
    fn bad_blob_rejected() {
        let bad = MINIMAL.replace("stddev = 0.2", "stddev = -0.2");
        let cfg: SceneConfig = toml::from_str(&bad).unwrap();
        assert!(cfg.scene().is_err());
    }

    #[test]
    fn hcheck_slope_from_camera() {
        let cfg: SceneConfig = toml::from_str(MINIMAL).unwrap();
        let cam = cfg.camera().unwrap();
        let hp = cfg.hcheck_params(&cam);
        let expected = (40.0f64.to_radians() / 128.0).tan();
        assert!((hp.pixel_footprint_slope - expected).abs() < 1e-12);
        assert_eq!(hp.descend_factor, 1.0);
    }
}
