//! Python bindings. Images cross the boundary as nested lists indexed
//! `[row][col]` (`[row][col][channel]` for color).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fieldfuse_core as core;
use fieldfuse_core::field::{make_primitive, BoundingBox3D, Field as _, PrimitiveSpec, RadianceField, Vec3};
use fieldfuse_core::geometry::{CameraModel, ObjectPlacement};
use fieldfuse_core::image::{BBox2D, DepthMap, ImageBuffer, Mask};
use fieldfuse_core::render::{DensityScaling, RenderedImage, SamplingConfig};
use fieldfuse_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Format { .. } | Error::StaleArtifact { .. } => PyIOError::new_err(e.to_string()),
        Error::Diverged(_) | Error::Stage { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn sampling(samples: usize, background: [f64; 3], stratified: bool, seed: u64) -> SamplingConfig {
    SamplingConfig {
        samples,
        stratified,
        background,
        seed,
    }
}

fn bbox(b: (usize, usize, usize, usize)) -> PyResult<BBox2D> {
    BBox2D::new(b.0, b.1, b.2, b.3).map_err(to_py)
}

fn rows<T: Clone>(values: &[T], width: usize) -> Vec<Vec<T>> {
    values.chunks(width.max(1)).map(<[T]>::to_vec).collect()
}

fn flatten(grid: &[Vec<f64>]) -> PyResult<(usize, usize, Vec<f64>)> {
    let h = grid.len();
    let w = grid.first().map_or(0, Vec::len);
    if grid.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("rows differ in length"));
    }
    Ok((w, h, grid.concat()))
}

fn image_from(grid: &[Vec<[f64; 3]>]) -> PyResult<ImageBuffer> {
    let h = grid.len();
    let w = grid.first().map_or(0, Vec::len);
    if grid.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("rows differ in length"));
    }
    ImageBuffer::from_pixels(w, h, grid.concat()).map_err(to_py)
}

/// A radiance field: analytic primitives, a voxel grid, or a sum of fields.
#[pyclass(name = "Field", module = "fieldfuse", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyField {
    inner: RadianceField,
}

#[pymethods]
impl PyField {
    #[staticmethod]
    fn empty() -> Self {
        Self {
            inner: RadianceField::Empty,
        }
    }

    #[staticmethod]
    fn sphere(center: [f64; 3], radius: f64, density: f64, color: [f64; 3]) -> PyResult<Self> {
        let inner = make_primitive(&PrimitiveSpec::Sphere {
            center,
            radius,
            density,
            color,
        })
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(name = "box")]
    fn box_(center: [f64; 3], half_extents: [f64; 3], density: f64, color: [f64; 3]) -> PyResult<Self> {
        let inner = make_primitive(&PrimitiveSpec::Box {
            center,
            half_extents,
            density,
            color,
        })
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn gaussian(center: [f64; 3], stddev: f64, peak: f64, color: [f64; 3]) -> PyResult<Self> {
        let inner = make_primitive(&PrimitiveSpec::Gaussian {
            center,
            stddev,
            peak,
            color,
        })
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Fields sharing space; densities add and colors mix by density.
    #[staticmethod]
    fn composite(parts: Vec<PyRef<'_, PyField>>) -> Self {
        Self {
            inner: RadianceField::Composite(parts.iter().map(|p| p.inner.clone()).collect()),
        }
    }

    #[staticmethod]
    fn load_voxels(path: PathBuf) -> PyResult<Self> {
        let grid = core::voxel::VoxelGrid::load(path).map_err(to_py)?;
        Ok(Self {
            inner: RadianceField::Voxel(grid),
        })
    }

    /// Samples the field on a `resolution`³ grid over the box.
    fn voxelize(&self, resolution: usize, bounds_min: [f64; 3], bounds_max: [f64; 3]) -> PyResult<Self> {
        let b = BoundingBox3D::new(Vec3::from(bounds_min), Vec3::from(bounds_max)).map_err(to_py)?;
        let grid = core::voxel::voxelize(&self.inner, [resolution; 3], b).map_err(to_py)?;
        Ok(Self {
            inner: RadianceField::Voxel(grid),
        })
    }

    fn save_voxels(&self, path: PathBuf) -> PyResult<()> {
        match &self.inner {
            RadianceField::Voxel(g) => g.save(path).map_err(to_py),
            _ => Err(PyValueError::new_err("only voxel fields can be saved")),
        }
    }

    /// `(density, (r, g, b))` at a point.
    fn query(&self, point: [f64; 3]) -> (f64, [f64; 3]) {
        let s = self.inner.query(&Vec3::from(point));
        (s.density, s.color)
    }

    /// `(min, max)` corners of the region outside which the field is empty,
    /// or None if unbounded.
    fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        self.inner.bounds().map(|b| (b.min.into(), b.max.into()))
    }

    fn __repr__(&self) -> String {
        let kind = match &self.inner {
            RadianceField::Empty => "empty".to_string(),
            RadianceField::Sphere(_) => "sphere".to_string(),
            RadianceField::Box(_) => "box".to_string(),
            RadianceField::Gaussian(_) => "gaussian".to_string(),
            RadianceField::Voxel(g) => format!("voxel {:?}", g.resolution()),
            RadianceField::Composite(p) => format!("composite of {}", p.len()),
        };
        format!("Field({kind})")
    }
}

/// Pinhole camera looking from `eye` toward `target` with world +z up.
#[pyclass(name = "Camera", module = "fieldfuse", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyCamera {
    inner: CameraModel,
}

#[pymethods]
impl PyCamera {
    #[new]
    #[pyo3(signature = (eye, target, focal, width, height, near = CameraModel::DEFAULT_NEAR, far = CameraModel::DEFAULT_FAR))]
    fn new(
        eye: [f64; 3],
        target: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> PyResult<Self> {
        let inner = CameraModel::look_at(Vec3::from(eye), Vec3::from(target), focal, width, height)
            .and_then(|c| c.with_clip(near, far))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn focal(&self) -> f64 {
        self.inner.focal()
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.inner.center().into()
    }

    /// Pixel coordinates `(u, v)` of a world point in front of the camera.
    fn project(&self, point: [f64; 3]) -> Option<[f64; 2]> {
        self.inner.project(&Vec3::from(point))
    }

    /// `(origin, direction)` of the ray through a pixel center.
    fn pixel_ray(&self, row: usize, col: usize) -> PyResult<([f64; 3], [f64; 3])> {
        let r = self.inner.pixel_ray(row, col).map_err(to_py)?;
        Ok((r.origin.into(), r.direction.into()))
    }
}

/// Where an object sits in the scene and at what scale.
#[pyclass(name = "Placement", module = "fieldfuse", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyPlacement {
    inner: ObjectPlacement,
}

#[pymethods]
impl PyPlacement {
    /// Object at `distance` along the ray through the bbox center, facing the
    /// camera. `bbox` is `(top, left, height, width)` in pixels.
    #[staticmethod]
    fn from_bbox(camera: &PyCamera, bbox: (usize, usize, usize, usize), scale: f64, distance: f64) -> PyResult<Self> {
        let b = self::bbox(bbox)?;
        let inner = core::placement::assemble_placement(&camera.inner, &b, scale, distance).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn axis_aligned(center: [f64; 3], scale: f64) -> PyResult<Self> {
        let inner = ObjectPlacement::axis_aligned(Vec3::from(center), scale).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale()
    }

    #[getter]
    fn distance(&self) -> f64 {
        self.inner.distance()
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.inner.center().into()
    }

    /// World-to-object rotation, row-major.
    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        let r = self.inner.rotation();
        std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]))
    }

    fn world_to_object(&self, point: [f64; 3]) -> [f64; 3] {
        self.inner.world_to_object(&Vec3::from(point)).into()
    }

    fn object_to_world(&self, point: [f64; 3]) -> [f64; 3] {
        self.inner.object_to_world(&Vec3::from(point)).into()
    }
}

fn rendered_dict<'py>(py: Python<'py>, img: &RenderedImage) -> PyResult<Bound<'py, PyDict>> {
    let w = img.color.width();
    let d = PyDict::new(py);
    d.set_item("color", rows(img.color.pixels(), w))?;
    d.set_item("alpha", rows(img.alpha.values(), w))?;
    d.set_item("depth", rows(img.depth.values(), w))?;
    Ok(d)
}

/// Renders a field; returns a dict of `color`, `alpha` and z-`depth`.
#[pyfunction]
#[pyo3(signature = (field, camera, samples = 128, background = [0.0; 3], stratified = false, seed = 0))]
fn render_image<'py>(
    py: Python<'py>,
    field: &PyField,
    camera: &PyCamera,
    samples: usize,
    background: [f64; 3],
    stratified: bool,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = sampling(samples, background, stratified, seed);
    let img = py
        .detach(|| core::render::render_image(&field.inner, &camera.inner, &cfg))
        .map_err(to_py)?;
    rendered_dict(py, &img)
}

/// Renders the scene with the object inserted. Object density outside the
/// object-space `clip` box `(min, max)` is dropped. `corrected=False` adds
/// object densities without accounting for the object scale.
#[pyfunction]
#[pyo3(signature = (scene, object, placement, clip, camera, samples = 128, background = [0.0; 3], corrected = true))]
#[allow(clippy::too_many_arguments)]
fn render_fused_image<'py>(
    py: Python<'py>,
    scene: &PyField,
    object: &PyField,
    placement: &PyPlacement,
    clip: ([f64; 3], [f64; 3]),
    camera: &PyCamera,
    samples: usize,
    background: [f64; 3],
    corrected: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = sampling(samples, background, false, 0);
    cfg.validate().map_err(to_py)?;
    let clip = BoundingBox3D::new(Vec3::from(clip.0), Vec3::from(clip.1)).map_err(to_py)?;
    let scaling = if corrected {
        DensityScaling::Corrected
    } else {
        DensityScaling::Uncorrected
    };
    let img = py.detach(|| {
        core::render::render_view(&camera.inner, |ray| {
            core::render::render_fused_ray_with(
                &scene.inner,
                &object.inner,
                &placement.inner,
                Some(&clip),
                ray,
                &cfg,
                scaling,
            )
        })
    });
    rendered_dict(py, &img)
}

/// Fits `reference ≈ scale * estimated + shift` outside the bbox.
#[pyfunction]
fn align_depth<'py>(
    py: Python<'py>,
    estimated: Vec<Vec<f64>>,
    reference: Vec<Vec<f64>>,
    bbox: (usize, usize, usize, usize),
) -> PyResult<Bound<'py, PyDict>> {
    let (w, h, e) = flatten(&estimated)?;
    let (wr, hr, r) = flatten(&reference)?;
    if (w, h) != (wr, hr) {
        return Err(PyValueError::new_err("depth maps differ in size"));
    }
    let e = DepthMap::from_values(w, h, e).map_err(to_py)?;
    let r = DepthMap::from_values(w, h, r).map_err(to_py)?;
    let fit = core::depth_align::align_depth(&e, &r, &self::bbox(bbox)?).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("scale", fit.scale)?;
    d.set_item("shift", fit.shift)?;
    d.set_item("residual_rms", fit.residual_rms)?;
    d.set_item("std_errors", fit.std_errors)?;
    d.set_item("pixels", fit.pixels)?;
    Ok(d)
}

/// Initial `(scale, distance)` from the center depth, the scene focal length
/// and the reconstructor's canonical distance, focal and anchor offset.
#[pyfunction]
#[pyo3(signature = (depth, focal, canonical_distance, canonical_focal, anchor_offset = 0.0))]
fn init_scale_distance(
    depth: f64,
    focal: f64,
    canonical_distance: f64,
    canonical_focal: f64,
    anchor_offset: f64,
) -> PyResult<(f64, f64)> {
    let intr = core::placement::ReconstructorIntrinsics {
        canonical_distance,
        canonical_focal,
        anchor_offset,
    };
    core::placement::init_scale_distance(depth, focal, &intr).map_err(to_py)
}

/// Frontal-first `(azimuth index, elevation index)` pairs.
#[pyfunction]
fn order_views(n: usize, m: usize) -> Vec<(i64, i64)> {
    core::refine::order_views(n, m)
}

/// Frontal-first `(azimuth, elevation)` offsets in degrees.
#[pyfunction]
fn view_angles(n: usize, m: usize, azimuth_step: f64, elevation_step: f64) -> Vec<(f64, f64)> {
    core::refine::view_angles(n, m, azimuth_step, elevation_step)
}

/// Scheduler actions as `(from, to, kind)` triples.
#[pyfunction]
#[pyo3(signature = (total_steps, jump_length = 2, steps = 2, resample_floor = 1))]
fn repaint_trace(
    total_steps: usize,
    jump_length: usize,
    steps: usize,
    resample_floor: usize,
) -> PyResult<Vec<(usize, usize, String)>> {
    let cfg = core::repaint::RepaintConfig {
        jump_length,
        steps,
        resample_floor,
        ..Default::default()
    };
    let plan = core::repaint::repaint_plan(total_steps, &cfg).map_err(to_py)?;
    Ok(plan.into_iter().map(|s| (s.from, s.to, s.kind.to_string())).collect())
}

/// Inpaints the masked region of `image` with the pure-noise denoiser, or
/// steers it toward `target` when one is given. Pixels outside the mask
/// come back unchanged.
#[pyfunction]
#[pyo3(signature = (image, mask, total_steps = 50, jump_length = 2, steps = 2, seed = 0, target = None))]
#[allow(clippy::too_many_arguments)]
fn repaint(
    py: Python<'_>,
    image: Vec<Vec<[f64; 3]>>,
    mask: Vec<Vec<bool>>,
    total_steps: usize,
    jump_length: usize,
    steps: usize,
    seed: u64,
    target: Option<Vec<Vec<[f64; 3]>>>,
) -> PyResult<Vec<Vec<[f64; 3]>>> {
    let x0 = image_from(&image)?;
    let (w, h) = (x0.width(), x0.height());
    if mask.len() != h || mask.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask must match the image size"));
    }
    let mask = Mask::from_bits(w, h, mask.concat()).map_err(to_py)?;
    let schedule = core::repaint::NoiseSchedule::ddpm(total_steps).map_err(to_py)?;
    let cfg = core::repaint::RepaintConfig {
        jump_length,
        steps,
        seed,
        ..Default::default()
    };
    let target = target.as_deref().map(image_from).transpose()?;
    let out = py
        .detach(|| match target {
            Some(target) => {
                let d = core::repaint::TargetDenoiser {
                    target,
                    schedule: schedule.clone(),
                };
                core::repaint::repaint_inpaint(&d, &x0, &mask, &schedule, &cfg)
            }
            None => core::repaint::repaint_inpaint(&core::repaint::NoiseDenoiser, &x0, &mask, &schedule, &cfg),
        })
        .map_err(to_py)?;
    Ok(rows(out.image.pixels(), w))
}

fn run_stage(
    py: Python<'_>,
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    f: impl FnOnce(&core::pipeline::SceneConfig, &std::path::Path) -> core::Result<core::pipeline::RunManifest> + Send,
) -> PyResult<String> {
    let mut cfg = core::pipeline::SceneConfig::load(&config).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| PyValueError::new_err("no output directory: pass out or set output_dir"))?;
    let manifest = py.detach(|| f(&cfg, &out)).map_err(to_py)?;
    serde_json::to_string(&manifest).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Renders the reference view of a config; returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config, out = None, seed = None))]
fn run_render(py: Python<'_>, config: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<String> {
    run_stage(py, config, out, seed, core::pipeline::cmd_render)
}

/// Runs the insertion stages, from `stage` onward if given; returns the
/// manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config, out = None, seed = None, stage = None))]
fn run_insert(
    py: Python<'_>,
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    stage: Option<String>,
) -> PyResult<String> {
    run_stage(py, config, out, seed, |cfg, dir| {
        core::pipeline::cmd_insert(cfg, dir, stage.as_deref())
    })
}

/// Refines the object of an earlier insertion; returns the manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config, out = None, seed = None))]
fn run_refine(py: Python<'_>, config: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<String> {
    run_stage(py, config, out, seed, core::pipeline::cmd_refine)
}

#[pymodule]
fn fieldfuse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyField>()?;
    m.add_class::<PyCamera>()?;
    m.add_class::<PyPlacement>()?;
    m.add_function(wrap_pyfunction!(render_image, m)?)?;
    m.add_function(wrap_pyfunction!(render_fused_image, m)?)?;
    m.add_function(wrap_pyfunction!(align_depth, m)?)?;
    m.add_function(wrap_pyfunction!(init_scale_distance, m)?)?;
    m.add_function(wrap_pyfunction!(order_views, m)?)?;
    m.add_function(wrap_pyfunction!(view_angles, m)?)?;
    m.add_function(wrap_pyfunction!(repaint_trace, m)?)?;
    m.add_function(wrap_pyfunction!(repaint, m)?)?;
    m.add_function(wrap_pyfunction!(run_render, m)?)?;
    m.add_function(wrap_pyfunction!(run_insert, m)?)?;
    m.add_function(wrap_pyfunction!(run_refine, m)?)?;
    Ok(())
}
