//! Quadrature volume rendering of single and fused radiance fields.
//!
//! A ray's `[near, far]` range is split into `N` equal bins of width `δ`;
//! sample `i` sits at the bin midpoint (or a seeded uniform position inside
//! the bin when stratified). With `α_i = 1 - exp(-σ_i δ)`, weights are
//! `w_i = T_i α_i` and `T_{i+1} = T_i exp(-σ_i δ)`, `T_1 = 1`. The background
//! is composited last with weight `T_{N+1}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{BoundingBox3D, Field, FieldSample, Rgb, BLACK};
use crate::geometry::{CameraModel, ObjectPlacement, Ray};
use crate::image::{DepthMap, ImageBuffer, Mask, ScalarMap};

/// Alpha below which a ray counts as empty and its depth falls back to `far`.
pub const DEPTH_ALPHA_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub samples: usize,
    pub stratified: bool,
    pub background: Rgb,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples: 128,
            stratified: false,
            background: BLACK,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn with_samples(samples: usize) -> Self {
        Self {
            samples,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::InvalidArgument(format!(
                "sample count must be >= 2, got {}",
                self.samples
            )));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument("background color must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Rgb,
    /// Sum of sample weights.
    pub alpha: f64,
    /// Expected termination distance along the ray.
    pub depth: f64,
    /// Transmittance left after the last sample.
    pub transmittance: f64,
}

/// How object densities enter a fused sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityScaling {
    /// Object density divided by the object scale, accounting for the
    /// shorter object-space intervals.
    Corrected,
    /// Densities summed as-is, ignoring the scale of the object frame.
    Uncorrected,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Jitter seed derived from the ray itself so that identical rays get
/// identical samples regardless of which pixel produced them.
fn ray_seed(seed: u64, ray: &Ray) -> u64 {
    let mut h = mix64(seed);
    for v in ray.origin.iter().chain(ray.direction.iter()) {
        h = mix64(h ^ v.to_bits());
    }
    h
}

/// Sample parameters `t_i` and the common interval `δ` for `ray`.
pub fn sample_positions(ray: &Ray, cfg: &SamplingConfig) -> (Vec<f64>, f64) {
    let n = cfg.samples;
    let delta = (ray.far - ray.near) / n as f64;
    let ts = if cfg.stratified {
        let mut rng = ChaCha8Rng::seed_from_u64(ray_seed(cfg.seed, ray));
        (0..n)
            .map(|i| ray.near + (i as f64 + rng.random::<f64>()) * delta)
            .collect()
    } else {
        (0..n).map(|i| ray.near + (i as f64 + 0.5) * delta).collect()
    };
    (ts, delta)
}

/// Front-to-back accumulator for the quadrature sum.
#[derive(Clone, Debug)]
pub struct Compositor {
    transmittance: f64,
    color: Rgb,
    weight_sum: f64,
    depth_sum: f64,
}

impl Default for Compositor {
    fn default() -> Self {
        Self::new()
    }
}

impl Compositor {
    pub fn new() -> Self {
        Self {
            transmittance: 1.0,
            color: [0.0; 3],
            weight_sum: 0.0,
            depth_sum: 0.0,
        }
    }

    pub fn transmittance(&self) -> f64 {
        self.transmittance
    }

    /// Adds one sample and returns its weight.
    pub fn push(&mut self, sample: &FieldSample, t: f64, delta: f64) -> f64 {
        let attenuation = (-sample.density * delta).exp();
        let w = self.transmittance * (1.0 - attenuation);
        for c in 0..3 {
            self.color[c] += w * sample.color[c];
        }
        self.weight_sum += w;
        self.depth_sum += w * t;
        let next = self.transmittance * attenuation;
        debug_assert!(next <= self.transmittance, "transmittance increased");
        self.transmittance = next;
        w
    }

    pub fn finish(self, background: Rgb, far: f64) -> RenderOutput {
        let t = self.transmittance;
        let color = std::array::from_fn(|c| (self.color[c] + t * background[c]).clamp(0.0, 1.0));
        let depth = if self.weight_sum > DEPTH_ALPHA_EPS {
            self.depth_sum / self.weight_sum
        } else {
            far
        };
        RenderOutput {
            color,
            alpha: self.weight_sum.clamp(0.0, 1.0),
            depth,
            transmittance: t,
        }
    }
}

/// Renders a ray whose sample at parameter `t` is supplied by `sample_at`.
pub fn composite_ray<Q>(ray: &Ray, cfg: &SamplingConfig, mut sample_at: Q) -> RenderOutput
where
    Q: FnMut(f64) -> FieldSample,
{
    let (ts, delta) = sample_positions(ray, cfg);
    let mut comp = Compositor::new();
    for &t in &ts {
        let s = sample_at(t);
        comp.push(&s, t, delta);
    }
    comp.finish(cfg.background, ray.far)
}

pub fn render_ray<F: Field + ?Sized>(field: &F, ray: &Ray, cfg: &SamplingConfig) -> RenderOutput {
    composite_ray(ray, cfg, |t| field.query(&ray.at(t)))
}

/// Combines co-located scene and object samples. `object_weight` multiplies
/// the object density: `1 / s` for the corrected fusion, `1` otherwise.
pub fn fuse_samples(scene: &FieldSample, object: &FieldSample, object_weight: f64) -> FieldSample {
    let so = object.density * object_weight;
    let density = scene.density + so;
    if density <= 0.0 {
        return FieldSample::EMPTY;
    }
    let color =
        std::array::from_fn(|c| ((scene.density * scene.color[c] + so * object.color[c]) / density).clamp(0.0, 1.0));
    FieldSample { density, color }
}

/// Object sample for world parameter `t`, zeroed outside `clip`.
fn object_sample<O: Field + ?Sized>(
    object: &O,
    object_ray: &Ray,
    interval_scale: f64,
    clip: Option<&BoundingBox3D>,
    t: f64,
) -> FieldSample {
    let q = object_ray.at(t * interval_scale);
    if clip.is_some_and(|c| !c.contains(&q)) {
        return FieldSample::EMPTY;
    }
    object.query(&q)
}

pub fn render_fused_ray<S, O>(
    scene: &S,
    object: &O,
    placement: &ObjectPlacement,
    clip: &BoundingBox3D,
    ray: &Ray,
    cfg: &SamplingConfig,
) -> RenderOutput
where
    S: Field + ?Sized,
    O: Field + ?Sized,
{
    render_fused_ray_with(
        scene,
        object,
        placement,
        Some(clip),
        ray,
        cfg,
        DensityScaling::Corrected,
    )
}

/// Fused rendering over one shared set of world-space samples. Each sample is
/// queried in the scene directly and in the object after mapping through the
/// placement.
pub fn render_fused_ray_with<S, O>(
    scene: &S,
    object: &O,
    placement: &ObjectPlacement,
    clip: Option<&BoundingBox3D>,
    ray: &Ray,
    cfg: &SamplingConfig,
    scaling: DensityScaling,
) -> RenderOutput
where
    S: Field + ?Sized,
    O: Field + ?Sized,
{
    let (object_ray, interval_scale) = placement.transform_ray(ray);
    let weight = match scaling {
        DensityScaling::Corrected => interval_scale,
        DensityScaling::Uncorrected => 1.0,
    };
    composite_ray(ray, cfg, |t| {
        let s = scene.query(&ray.at(t));
        let o = object_sample(object, &object_ray, interval_scale, clip, t);
        fuse_samples(&s, &o, weight)
    })
}

/// Object-only rendering in world space.
pub fn render_object_ray<O: Field + ?Sized>(
    object: &O,
    placement: &ObjectPlacement,
    clip: Option<&BoundingBox3D>,
    ray: &Ray,
    cfg: &SamplingConfig,
) -> RenderOutput {
    let (object_ray, interval_scale) = placement.transform_ray(ray);
    composite_ray(ray, cfg, |t| {
        let o = object_sample(object, &object_ray, interval_scale, clip, t);
        FieldSample {
            density: o.density * interval_scale,
            color: o.color,
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub color: ImageBuffer,
    /// Alpha per pixel.
    pub alpha: ScalarMap,
    /// Z-depth (distance along the optical axis) per pixel.
    pub depth: DepthMap,
    /// Expected termination distance along each pixel's ray.
    pub ray_depth: ScalarMap,
}

/// Renders every pixel center of `camera` with `per_ray`, in parallel over
/// rows.
pub fn render_view<R>(camera: &CameraModel, per_ray: R) -> RenderedImage
where
    R: Fn(&Ray) -> RenderOutput + Sync,
{
    let (w, h) = (camera.width(), camera.height());
    let axis = camera.optical_axis();
    let rows: Vec<Vec<(RenderOutput, f64)>> = (0..h)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .map(|col| {
                    let ray = camera.pixel_ray(row, col).expect("pixel centers lie inside the image");
                    let cos = ray.direction.dot(&axis);
                    (per_ray(&ray), cos)
                })
                .collect()
        })
        .collect();
    let mut color = Vec::with_capacity(w * h);
    let mut alpha = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut ray_depth = Vec::with_capacity(w * h);
    for (out, cos) in rows.into_iter().flatten() {
        color.push(out.color);
        alpha.push(out.alpha);
        depth.push(out.depth * cos);
        ray_depth.push(out.depth);
    }
    RenderedImage {
        color: ImageBuffer::from_pixels(w, h, color).expect("sized by construction"),
        alpha: ScalarMap::from_values(w, h, alpha).expect("sized by construction"),
        depth: DepthMap::from_values(w, h, depth).expect("sized by construction"),
        ray_depth: ScalarMap::from_values(w, h, ray_depth).expect("sized by construction"),
    }
}

pub fn render_image<F: Field + ?Sized>(field: &F, camera: &CameraModel, cfg: &SamplingConfig) -> Result<RenderedImage> {
    cfg.validate()?;
    Ok(render_view(camera, |ray| render_ray(field, ray, cfg)))
}

pub fn render_fused_image<S, O>(
    scene: &S,
    object: &O,
    placement: &ObjectPlacement,
    clip: &BoundingBox3D,
    camera: &CameraModel,
    cfg: &SamplingConfig,
) -> Result<RenderedImage>
where
    S: Field + ?Sized,
    O: Field + ?Sized,
{
    cfg.validate()?;
    Ok(render_view(camera, |ray| {
        render_fused_ray(scene, object, placement, clip, ray, cfg)
    }))
}

/// Pixels whose object-only alpha exceeds `threshold`.
pub fn render_object_mask<O: Field + ?Sized>(
    object: &O,
    placement: &ObjectPlacement,
    camera: &CameraModel,
    cfg: &SamplingConfig,
    threshold: f64,
) -> Result<Mask> {
    cfg.validate()?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let img = render_view(camera, |ray| render_object_ray(object, placement, None, ray, cfg));
    let bits = img.alpha.values().iter().map(|a| *a > threshold).collect();
    Mask::from_bits(camera.width(), camera.height(), bits)
}
