//! Full-image rendering, dense-quadrature reference renders of the teacher,
//! image-space PSNR, and the PPM writer.

use crate::field::RadianceField;
use crate::geometry::{generate_camera_rays, ray_aabb_intersect, Aabb, Camera, Ray, Vec3};
use crate::sampling::PointSample;
use crate::scheduler::{composite_ray, render_rays_with, RenderPath, RenderSettings};
use crate::subdivision::{KdTree, NodeCode};
use crate::training::mse_to_db;
use crate::{Error, Result};
use rayon::prelude::*;
use std::io::Write;

pub use crate::scheduler::RenderStats;

/// Row-major linear-RGB framebuffer; channels are clamped to [0, 1] when
/// pixels are stored. Quantization to bytes happens only at file write.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    pixels: Vec<Vec3>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32) -> Self {
        ImageBuffer { width, height, pixels: vec![Vec3::ZERO; (width * height) as usize] }
    }

    pub fn from_colors(width: u32, height: u32, colors: Vec<Vec3>) -> Result<Self> {
        if colors.len() != (width * height) as usize {
            return Err(Error::Params(format!(
                "pixel count {} does not match {width}x{height}",
                colors.len()
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            pixels: colors.into_iter().map(Vec3::clamp01).collect(),
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[Vec3] {
        &self.pixels
    }

    /// Binary PPM: `P6\n{w} {h}\n255\n` then RGB bytes, row-major.
    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.pixels.len() * 3);
        out.extend_from_slice(format!("P6\n{} {}\n255\n", self.width, self.height).as_bytes());
        for p in &self.pixels {
            for c in p.to_array() {
                out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn write_ppm(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_ppm_bytes())?;
        Ok(())
    }
}

/// Renders the camera's full frame through the tree.
pub fn render_image(
    tree: &KdTree,
    camera: &Camera,
    settings: &RenderSettings,
    path: RenderPath,
) -> Result<(ImageBuffer, RenderStats)> {
    render_image_with(tree, camera, settings, path, None)
}

/// `render_image` with every node MLP replaced by one field (debug hook).
pub fn render_image_with(
    tree: &KdTree,
    camera: &Camera,
    settings: &RenderSettings,
    path: RenderPath,
    field_override: Option<&dyn RadianceField>,
) -> Result<(ImageBuffer, RenderStats)> {
    let rays = generate_camera_rays(camera)?;
    let (colors, stats) = render_rays_with(tree, &rays, settings, path, field_override)?;
    Ok((ImageBuffer::from_colors(camera.width, camera.height, colors)?, stats))
}

/// Ground-truth render of a field by fixed-step quadrature over the box span:
/// `steps_per_ray` uniform samples per ray, composited exactly like
/// `composite_ray`. Deterministic, no sampling noise.
pub fn render_reference(
    field: &dyn RadianceField,
    domain: &Aabb,
    camera: &Camera,
    steps_per_ray: u32,
    background: Vec3,
) -> Result<ImageBuffer> {
    if steps_per_ray < 16 {
        return Err(Error::Params("reference render needs at least 16 steps per ray".into()));
    }
    let rays = generate_camera_rays(camera)?;
    let colors: Vec<Vec3> = rays
        .par_iter()
        .map(|ray| reference_ray(field, domain, ray, steps_per_ray, background))
        .collect::<Result<Vec<Vec3>>>()?;
    ImageBuffer::from_colors(camera.width, camera.height, colors)
}

fn reference_ray(
    field: &dyn RadianceField,
    domain: &Aabb,
    ray: &Ray,
    steps: u32,
    background: Vec3,
) -> Result<Vec3> {
    let Some((t0, t1)) = ray_aabb_intersect(ray, domain) else {
        return Ok(background);
    };
    if t0 >= t1 {
        return Ok(background);
    }
    let h = (t1 - t0) / steps as f64;
    let mut samples = Vec::with_capacity(steps as usize);
    let mut fields = Vec::with_capacity(steps as usize);
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let position = ray.at(t);
        samples.push(PointSample {
            ray_id: ray.ray_id,
            node_code: NodeCode::ROOT,
            t,
            position,
            direction: ray.direction,
        });
        fields.push(field.eval(position, ray.direction));
    }
    composite_ray(&samples, &fields, t1, background, crate::scheduler::DEFAULT_TAU_STOP)
}

/// Peak signal-to-noise ratio between two images with peak 1.0, capped at
/// 99 dB for effectively identical inputs.
pub fn image_psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Params(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let mut sq = 0.0;
    for (pa, pb) in a.pixels.iter().zip(b.pixels.iter()) {
        let d = *pa - *pb;
        sq += d.dot(d);
    }
    let mse = sq / (3.0 * a.pixels.len() as f64);
    Ok(mse_to_db(mse))
}
