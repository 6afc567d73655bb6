//! Multi-view refinement of an inserted object.
//!
//! Cameras sit on a sphere around the object center and are visited
//! frontal-first. Each fused view is handed to a 2D refiner, appended to the
//! training set, and the object voxel grid is fitted to all views so far
//! with gradient descent on the masked photometric error. The scene field
//! stays frozen.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{BoundingBox3D, Field, FieldSample, RadianceField, Rgb, Vec3};
use crate::geometry::{CameraModel, ObjectPlacement, Ray};
use crate::image::{psnr, ImageBuffer, Mask};
use crate::render::{
    fuse_samples, render_fused_ray_with, render_object_mask, render_view, sample_positions, Compositor, DensityScaling,
    SamplingConfig,
};
use crate::voxel::{voxelize, Stencil, VoxelGrid};

/// Index sequence `0, 1, -1, 2, -2, ..., k, -k` for `k = count / 2`.
fn signed_sequence(count: usize) -> Vec<i64> {
    let k = (count / 2) as i64;
    let mut out = vec![0];
    for i in 1..=k {
        out.push(i);
        out.push(-i);
    }
    out
}

/// Angle mapped into `(-180, 180]`.
pub fn normalize_angle(deg: f64) -> f64 {
    let a = deg.rem_euclid(360.0);
    if a > 180.0 {
        a - 360.0
    } else {
        a
    }
}

/// Frontal-first `(azimuth index, elevation index)` pairs, azimuth outer.
/// Azimuth indices equal modulo `n` are kept once, assuming the azimuth
/// step divides the full circle into `n` parts.
pub fn order_views(n: usize, m: usize) -> Vec<(i64, i64)> {
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for i in signed_sequence(n) {
        let key = i.rem_euclid(n as i64);
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
        for j in signed_sequence(m) {
            out.push((i, j));
        }
    }
    out
}

/// Ordered `(azimuth, elevation)` offsets in degrees, deduplicated after
/// normalization.
pub fn view_angles(n: usize, m: usize, azimuth_step: f64, elevation_step: f64) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for i in signed_sequence(n.max(1)) {
        for j in signed_sequence(m.max(1)) {
            let v = (
                normalize_angle(i as f64 * azimuth_step),
                normalize_angle(j as f64 * elevation_step),
            );
            let dup = out
                .iter()
                .any(|(a, e)| (a - v.0).abs() < 1e-9 && (e - v.1).abs() < 1e-9);
            if !dup {
                out.push(v);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSchedule {
    pub azimuth_step: f64,
    pub elevation_step: f64,
    pub n: usize,
    pub m: usize,
    pub radius: f64,
    pub center: [f64; 3],
    /// Unit direction from the center toward the reference camera; the
    /// `(0, 0)` view lies along it.
    pub reference_direction: [f64; 3],
    pub views: Vec<(f64, f64)>,
}

impl ViewSchedule {
    pub fn new(
        azimuth_step: f64,
        elevation_step: f64,
        n: usize,
        m: usize,
        radius: f64,
        center: Vec3,
        reference_direction: Vec3,
    ) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidArgument("view counts must be >= 1".into()));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sphere radius must be positive, got {radius}"
            )));
        }
        let dir = reference_direction
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidGeometry("reference direction is zero".into()))?;
        Ok(Self {
            azimuth_step,
            elevation_step,
            n,
            m,
            radius,
            center: center.into(),
            reference_direction: dir.into(),
            views: view_angles(n, m, azimuth_step, elevation_step),
        })
    }

    /// Schedule centered on the placed object, oriented toward `reference`.
    pub fn around(
        reference: &CameraModel,
        center: Vec3,
        azimuth_step: f64,
        elevation_step: f64,
        n: usize,
        m: usize,
    ) -> Result<Self> {
        let offset = reference.center() - center;
        Self::new(azimuth_step, elevation_step, n, m, offset.norm(), center, offset)
    }
}

/// Look-at cameras for every scheduled view, in schedule order.
pub fn sample_refinement_cameras(
    schedule: &ViewSchedule,
    focal: f64,
    width: usize,
    height: usize,
) -> Result<Vec<CameraModel>> {
    let center = Vec3::from(schedule.center);
    let d = Vec3::from(schedule.reference_direction);
    let base_az = d.y.atan2(d.x).to_degrees();
    let base_el = d.z.clamp(-1.0, 1.0).asin().to_degrees();
    schedule
        .views
        .iter()
        .map(|&(az, el)| {
            let elevation = base_el + el;
            if elevation.abs() >= 90.0 - 1e-9 {
                return Err(Error::InvalidGeometry(format!(
                    "view ({az}, {el}) reaches elevation {elevation} where the up vector degenerates"
                )));
            }
            let (a, e) = ((base_az + az).to_radians(), elevation.to_radians());
            let dir = Vec3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin());
            CameraModel::look_at(center + schedule.radius * dir, center, focal, width, height)
        })
        .collect()
}

pub fn extract_multiview_masks<O: Field + ?Sized>(
    object: &O,
    placement: &ObjectPlacement,
    cameras: &[CameraModel],
    cfg: &SamplingConfig,
    threshold: f64,
) -> Result<Vec<Mask>> {
    cameras
        .iter()
        .map(|c| render_object_mask(object, placement, c, cfg, threshold))
        .collect()
}

/// 2D editor applied to a rendered view. Only masked pixels may change.
pub trait Refiner2D {
    fn refine(&self, image: &ImageBuffer, mask: &Mask) -> Result<ImageBuffer>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRefiner;

impl Refiner2D for IdentityRefiner {
    fn refine(&self, image: &ImageBuffer, _mask: &Mask) -> Result<ImageBuffer> {
        Ok(image.clone())
    }
}

/// Moves masked pixels toward `tint` by `strength` in `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct TintRefiner {
    pub tint: Rgb,
    pub strength: f64,
}

impl Refiner2D for TintRefiner {
    fn refine(&self, image: &ImageBuffer, mask: &Mask) -> Result<ImageBuffer> {
        if mask.width() != image.width() || mask.height() != image.height() {
            return Err(Error::ShapeMismatch("mask and image differ in size".into()));
        }
        let s = self.strength.clamp(0.0, 1.0);
        let pixels = image
            .pixels()
            .iter()
            .zip(mask.bits())
            .map(|(p, m)| {
                if *m {
                    std::array::from_fn(|c| (1.0 - s) * p[c] + s * self.tint[c])
                } else {
                    *p
                }
            })
            .collect();
        ImageBuffer::from_pixels(image.width(), image.height(), pixels)
    }
}

/// Voxel grid plus the optimizer settings used to fit it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainableGrid {
    pub grid: VoxelGrid,
    pub density_lr: f64,
    pub color_lr: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct TrainingView {
    pub camera: CameraModel,
    pub image: ImageBuffer,
    pub mask: Mask,
}

/// How the grid is rendered during fitting: as an object placed into a
/// frozen scene.
#[derive(Clone, Copy)]
pub struct FitContext<'a> {
    pub scene: &'a dyn Field,
    pub placement: &'a ObjectPlacement,
    pub clip: Option<&'a BoundingBox3D>,
    pub sampling: &'a SamplingConfig,
    pub scaling: DensityScaling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_mse: f64,
    pub best_mse: f64,
    /// Masked MSE before each step, then of the final grid.
    pub history: Vec<f64>,
    pub supervised_pixels: usize,
}

impl FitReport {
    pub fn best_psnr(&self) -> f64 {
        psnr(self.best_mse)
    }
}

/// Consecutive MSE increases that abort a fit.
pub const DIVERGENCE_PATIENCE: usize = 5;

struct Pass {
    sq_err: f64,
    grad: Vec<[f64; 4]>,
}

impl Pass {
    fn zero(n: usize) -> Self {
        Self {
            sq_err: 0.0,
            grad: vec![[0.0; 4]; n],
        }
    }

    fn merge(mut self, other: Pass) -> Pass {
        self.sq_err += other.sq_err;
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            for k in 0..4 {
                a[k] += b[k];
            }
        }
        self
    }
}

struct Step {
    stencil: Option<Stencil>,
    object: FieldSample,
    fused: FieldSample,
    weight: f64,
    t_next: f64,
}

/// Grid stencil for world parameter `t`, mirroring the object lookup of the
/// fused renderer.
fn object_stencil(
    grid: &VoxelGrid,
    object_ray: &Ray,
    interval_scale: f64,
    clip: Option<&BoundingBox3D>,
    t: f64,
) -> Option<Stencil> {
    let q = object_ray.at(t * interval_scale);
    if clip.is_some_and(|c| !c.contains(&q)) {
        return None;
    }
    grid.stencil(&q)
}

/// Adds the gradient of `scale * |C - target|^2` for one ray to `pass` and
/// returns the squared error. The forward pass reproduces the fused
/// renderer exactly.
fn ray_gradient(ctx: &FitContext, grid: &VoxelGrid, ray: &Ray, target: Rgb, scale: f64, pass: &mut Pass) {
    let cfg = ctx.sampling;
    let (object_ray, interval_scale) = ctx.placement.transform_ray(ray);
    let k = match ctx.scaling {
        DensityScaling::Corrected => interval_scale,
        DensityScaling::Uncorrected => 1.0,
    };
    let (ts, delta) = sample_positions(ray, cfg);
    let mut comp = Compositor::new();
    let mut steps = Vec::with_capacity(ts.len());
    for &t in &ts {
        let scene = ctx.scene.query(&ray.at(t));
        let stencil = object_stencil(grid, &object_ray, interval_scale, ctx.clip, t);
        let object = stencil.map_or(FieldSample::EMPTY, |st| grid.interpolate(&st));
        let fused = fuse_samples(&scene, &object, k);
        let weight = comp.push(&fused, t, delta);
        steps.push(Step {
            stencil,
            object,
            fused,
            weight,
            t_next: comp.transmittance(),
        });
    }
    let t_end = comp.transmittance();
    let out = comp.finish(cfg.background, ray.far);
    let residual: [f64; 3] = std::array::from_fn(|c| out.color[c] - target[c]);
    pass.sq_err += residual.iter().map(|r| r * r).sum::<f64>();
    let g: [f64; 3] = residual.map(|r| 2.0 * scale * r);
    if g.iter().all(|v| *v == 0.0) {
        return;
    }
    // light arriving from behind sample i, per channel
    let mut behind: [f64; 3] = std::array::from_fn(|c| t_end * cfg.background[c]);
    for s in steps.iter().rev() {
        if let Some(st) = &s.stencil {
            let sigma = s.fused.density;
            let (d_sigma_o, d_color_o) = if sigma > 0.0 {
                let mut ds = 0.0;
                let mut dc = [0.0; 3];
                for c in 0..3 {
                    let d_total = delta * (s.t_next * s.fused.color[c] - behind[c]);
                    ds += g[c] * (k * d_total + s.weight * k * (s.object.color[c] - s.fused.color[c]) / sigma);
                    dc[c] = g[c] * s.weight * k * s.object.density / sigma;
                }
                (ds, dc)
            } else {
                // an empty sample takes the object color as density appears
                let ds = (0..3)
                    .map(|c| g[c] * k * delta * (s.t_next * s.object.color[c] - behind[c]))
                    .sum();
                (ds, [0.0; 3])
            };
            for &(idx, w) in st {
                let a = &mut pass.grad[idx];
                a[0] += w * d_sigma_o;
                for c in 0..3 {
                    a[c + 1] += w * d_color_o[c];
                }
            }
        }
        for c in 0..3 {
            behind[c] += s.weight * s.fused.color[c];
        }
    }
}

fn supervised_pixels(views: &[TrainingView]) -> usize {
    views.iter().map(|v| v.mask.count()).sum()
}

/// Masked MSE over all views and its gradient with respect to every grid
/// sample.
fn evaluate(ctx: &FitContext, grid: &VoxelGrid, views: &[TrainingView], supervised: usize) -> (f64, Vec<[f64; 4]>) {
    let n = grid.samples().len();
    let norm = 1.0 / (3 * supervised) as f64;
    let pass = views
        .par_iter()
        .flat_map(|v| {
            let w = v.camera.width();
            (0..v.camera.height()).into_par_iter().map(move |row| (v, row, w))
        })
        .fold(
            || Pass::zero(n),
            |mut pass, (v, row, w)| {
                for col in 0..w {
                    if !v.mask.get(row, col) {
                        continue;
                    }
                    let ray = v
                        .camera
                        .pixel_ray(row, col)
                        .expect("pixel centers lie inside the image");
                    ray_gradient(ctx, grid, &ray, v.image.get(row, col), norm, &mut pass);
                }
                pass
            },
        )
        .reduce(|| Pass::zero(n), Pass::merge);
    (pass.sq_err * norm, pass.grad)
}

fn check_views(views: &[TrainingView]) -> Result<()> {
    for (i, v) in views.iter().enumerate() {
        let (w, h) = (v.camera.width(), v.camera.height());
        if v.image.width() != w || v.image.height() != h || v.mask.width() != w || v.mask.height() != h {
            return Err(Error::ShapeMismatch(format!(
                "training view {i} differs from its camera size"
            )));
        }
    }
    Ok(())
}

/// Masked MSE of the grid against `views`.
pub fn masked_view_mse(ctx: &FitContext, grid: &VoxelGrid, views: &[TrainingView]) -> Result<f64> {
    check_views(views)?;
    let supervised = supervised_pixels(views);
    if supervised == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for v in views {
        let img = render_view(&v.camera, |ray| {
            render_fused_ray_with(ctx.scene, grid, ctx.placement, ctx.clip, ray, ctx.sampling, ctx.scaling)
        });
        sum += img.color.masked_mse(&v.image, Some(&v.mask))? * (3 * v.mask.count()) as f64;
    }
    Ok(sum / (3 * supervised) as f64)
}

/// Gradient descent on the masked photometric error with fixed step sizes.
/// Densities are clamped to be nonnegative and colors to `[0, 1]` after
/// every step. Returns the best grid seen.
pub fn fit_grid_to_views(
    trainable: &TrainableGrid,
    ctx: &FitContext,
    views: &[TrainingView],
) -> Result<(TrainableGrid, FitReport)> {
    if trainable.iterations == 0 {
        return Err(Error::InvalidArgument("fit needs at least one iteration".into()));
    }
    ctx.sampling.validate()?;
    check_views(views)?;
    let supervised = supervised_pixels(views);
    if supervised == 0 {
        let report = FitReport {
            initial_mse: 0.0,
            best_mse: 0.0,
            history: vec![0.0],
            supervised_pixels: 0,
        };
        return Ok((trainable.clone(), report));
    }
    let mut grid = trainable.grid.clone();
    let mut best = grid.clone();
    let mut best_mse = f64::INFINITY;
    let mut history = Vec::with_capacity(trainable.iterations + 1);
    let mut rising = 0;
    for iter in 0..=trainable.iterations {
        let (mse, grad) = evaluate(ctx, &grid, views, supervised);
        if let Some(prev) = history.last() {
            rising = if mse > *prev { rising + 1 } else { 0 };
        }
        history.push(mse);
        if mse < best_mse {
            best_mse = mse;
            best = grid.clone();
        }
        if rising >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged(iter));
        }
        if iter == trainable.iterations || grad.iter().all(|g| g.iter().all(|v| *v == 0.0)) {
            break;
        }
        for (s, g) in grid.samples_mut().iter_mut().zip(&grad) {
            s.density -= trainable.density_lr * g[0];
            for c in 0..3 {
                s.color[c] -= trainable.color_lr * g[c + 1];
            }
        }
        grid.clamp_samples();
    }
    let report = FitReport {
        initial_mse: history[0],
        best_mse,
        history,
        supervised_pixels: supervised,
    };
    Ok((
        TrainableGrid {
            grid: best,
            ..trainable.clone()
        },
        report,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Degrees between neighbouring azimuths.
    pub azimuth_step: f64,
    /// Degrees between neighbouring elevations.
    pub elevation_step: f64,
    pub azimuth_count: usize,
    pub elevation_count: usize,
    /// Voxels per side of the trainable object grid.
    pub resolution: usize,
    /// Gradient steps after each new view.
    pub iterations_per_view: usize,
    /// Zero keeps the object geometry fixed so only its appearance follows
    /// the edited views.
    pub density_lr: f64,
    pub color_lr: f64,
    /// Object alpha above which a pixel is handed to the refiner.
    pub mask_threshold: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            azimuth_step: 45.0,
            elevation_step: 20.0,
            azimuth_count: 4,
            elevation_count: 2,
            resolution: 24,
            iterations_per_view: 10,
            density_lr: 0.0,
            color_lr: 1e4,
            mask_threshold: 1e-3,
        }
    }
}

pub struct RefineInputs<'a> {
    pub scene: &'a dyn Field,
    pub object: &'a dyn Field,
    pub placement: &'a ObjectPlacement,
    /// Object-space box the trainable grid covers.
    pub clip: &'a BoundingBox3D,
    pub reference: &'a CameraModel,
    pub sampling: &'a SamplingConfig,
}

#[derive(Clone, Debug)]
pub struct RefineOutput {
    pub grid: VoxelGrid,
    pub schedule: ViewSchedule,
    /// Views in the order they were consumed, after refinement. Each view's
    /// loss mask covers every pixel whose ray crosses the object box.
    pub views: Vec<TrainingView>,
    /// Object masks handed to the refiner, one per view.
    pub edit_masks: Vec<Mask>,
    pub reports: Vec<FitReport>,
}

/// Whether the segment `[near, far]` of `ray` crosses `bbox`.
fn ray_hits_box(ray: &Ray, bbox: &BoundingBox3D) -> bool {
    let (mut lo, mut hi) = (ray.near, ray.far);
    for a in 0..3 {
        let (o, d) = (ray.origin[a], ray.direction[a]);
        if d.abs() < 1e-300 {
            if o < bbox.min[a] || o > bbox.max[a] {
                return false;
            }
            continue;
        }
        let (t0, t1) = ((bbox.min[a] - o) / d, (bbox.max[a] - o) / d);
        lo = lo.max(t0.min(t1));
        hi = hi.min(t0.max(t1));
    }
    lo <= hi
}

/// Pixels whose rays pass through the placed object box, i.e. every pixel
/// the object grid can influence.
pub fn footprint_mask(placement: &ObjectPlacement, clip: &BoundingBox3D, camera: &CameraModel) -> Mask {
    let (w, h) = (camera.width(), camera.height());
    let bits = (0..h)
        .flat_map(|row| (0..w).map(move |col| (row, col)))
        .map(|(row, col)| {
            let ray = camera.pixel_ray(row, col).expect("pixel centers lie inside the image");
            ray_hits_box(&placement.transform_ray(&ray).0, clip)
        })
        .collect();
    Mask::from_bits(w, h, bits).expect("sized by construction")
}

/// Runs the frontal-first refinement schedule and returns the fitted
/// object grid. The refiner edits pixels inside the object mask; the fit
/// sees the whole object footprint so unedited pixels hold their rendered
/// values and the grid cannot grow content there.
pub fn refine_loop(inputs: &RefineInputs, refiner: &dyn Refiner2D, cfg: &RefineConfig) -> Result<RefineOutput> {
    let RefineInputs {
        scene,
        object,
        placement,
        clip,
        reference,
        sampling,
    } = *inputs;
    if cfg.resolution == 0 || cfg.iterations_per_view == 0 {
        return Err(Error::InvalidArgument(
            "resolution and iterations_per_view must be >= 1".into(),
        ));
    }
    let schedule = ViewSchedule::around(
        reference,
        placement.center(),
        cfg.azimuth_step,
        cfg.elevation_step,
        cfg.azimuth_count,
        cfg.elevation_count,
    )?;
    let cameras = sample_refinement_cameras(&schedule, reference.focal(), reference.width(), reference.height())?;
    let cameras: Vec<CameraModel> = cameras
        .into_iter()
        .map(|c| c.with_clip(reference.near(), reference.far()))
        .collect::<Result<_>>()?;
    let mut trainable = TrainableGrid {
        grid: voxelize(object, [cfg.resolution; 3], *clip)?,
        density_lr: cfg.density_lr,
        color_lr: cfg.color_lr,
        iterations: cfg.iterations_per_view,
    };
    let mut views: Vec<TrainingView> = Vec::with_capacity(cameras.len());
    let mut edit_masks = Vec::with_capacity(cameras.len());
    let mut reports = Vec::with_capacity(cameras.len());
    for camera in cameras {
        let grid = &trainable.grid;
        let rendered = render_view(&camera, |ray| {
            render_fused_ray_with(
                scene,
                grid,
                placement,
                Some(clip),
                ray,
                sampling,
                DensityScaling::Corrected,
            )
        });
        let mask = render_object_mask(grid, placement, &camera, sampling, cfg.mask_threshold)?;
        let edited = refiner.refine(&rendered.color, &mask)?;
        // whatever the refiner did, unmasked pixels stay as rendered
        let edited = crate::repaint::blend(&rendered.color, &edited, &mask)?;
        views.push(TrainingView {
            mask: footprint_mask(placement, clip, &camera),
            camera,
            image: edited,
        });
        edit_masks.push(mask);
        let ctx = FitContext {
            scene,
            placement,
            clip: Some(clip),
            sampling,
            scaling: DensityScaling::Corrected,
        };
        let (next, report) = fit_grid_to_views(&trainable, &ctx, &views)?;
        trainable = next;
        reports.push(report);
    }
    Ok(RefineOutput {
        grid: trainable.grid,
        schedule,
        views,
        edit_masks,
        reports,
    })
}

/// Uniform grid over `bounds`, a common starting point for fitting.
pub fn constant_grid(resolution: usize, bounds: BoundingBox3D, density: f64, color: Rgb) -> Result<VoxelGrid> {
    let f = RadianceField::Box(crate::field::BoxPrimitive {
        center: (bounds.min + bounds.max) / 2.0,
        half_extents: bounds.extent(),
        density,
        color,
    });
    voxelize(&f, [resolution; 3], bounds)
}
