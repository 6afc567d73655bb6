//! End-to-end insertion runs driven by a [`SceneConfig`].
//!
//! `insert` runs the stages `render`, `edit`, `align`, `place` and `fuse` in
//! order. Every stage reads its inputs from the output directory and writes
//! its artifacts there, so a run resumed with `--stage` goes through exactly
//! the same bytes as a full run. The manifest records a SHA-256 for every
//! artifact; resuming after an upstream artifact changed is an error.

pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::SceneConfig;
pub use manifest::{RunManifest, StageRecord, StageStatus};

use crate::depth_align::{align_depth, object_center_depth, AffineNoiseDepthProvider, DepthProvider};
use crate::error::{Error, Result};
use crate::field::{BoundingBox3D, RadianceField};
use crate::geometry::{CameraModel, ObjectPlacement};
use crate::image::{DepthMap, ImageBuffer, Mask, ScalarMap};
use crate::io::{load_image, load_scalar, save_image, save_scalar};
use crate::placement::{
    assemble_placement, center_ray_distance, init_scale_distance, optimize_scale_distance, PlacementProblem,
};
use crate::refine::{refine_loop, sample_refinement_cameras, RefineInputs, ViewSchedule};
use crate::render::{
    render_fused_image, render_fused_ray_with, render_image, render_object_mask, render_view, DensityScaling,
    SamplingConfig,
};
use crate::repaint::{repaint_inpaint, repaint_plan, NoiseSchedule, TargetDenoiser, TraceStep};
use config::{EditConfig, RepaintSection};
use manifest::{sha256_hex, TIMINGS_FILE};

pub const INSERT_STAGES: [&str; 5] = ["render", "edit", "align", "place", "fuse"];
pub const REFINE_STAGE: &str = "refine";

/// Independent seed for one consumer of the run seed.
fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderValues {
    pub width: usize,
    pub height: usize,
    pub mean_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditValues {
    pub mode: String,
    /// Pixels that differ from the reference view.
    pub changed_pixels: usize,
    #[serde(default)]
    pub denoiser_calls: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignValues {
    pub scale: f64,
    pub shift: f64,
    pub residual_rms: f64,
    pub std_errors: [f64; 2],
    pub pixels: usize,
    /// Aligned z-depth at the bbox center.
    pub center_z_depth: f64,
    /// The same point's distance along the center pixel's ray.
    pub center_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceValues {
    pub init_scale: f64,
    pub init_distance: f64,
    pub init_mse: f64,
    pub scale: f64,
    pub distance: f64,
    pub mse: f64,
    pub iterations: usize,
    pub improved: bool,
    /// World-to-object rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub center: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseValues {
    pub views: Vec<(f64, f64)>,
    pub object_mask_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineValues {
    pub schedule: ViewSchedule,
    /// Best masked MSE after each consumed view.
    pub best_mse: Vec<f64>,
}

/// Fields, camera and settings shared by all stages.
pub struct RunContext {
    pub cfg: SceneConfig,
    pub out: PathBuf,
    pub camera: CameraModel,
    pub scene: RadianceField,
    pub sampling: SamplingConfig,
}

impl RunContext {
    pub fn new(cfg: &SceneConfig, out: &Path) -> Result<Self> {
        let mut sampling = cfg.sampling.clone();
        sampling.seed = sub_seed(cfg.seed, 1);
        Ok(Self {
            cfg: cfg.clone(),
            out: out.to_path_buf(),
            camera: cfg.camera.build()?,
            scene: cfg.scene.build()?,
            sampling,
        })
    }

    fn object(&self) -> Result<(RadianceField, BoundingBox3D)> {
        let o = self
            .cfg
            .object
            .as_ref()
            .ok_or_else(|| Error::Config("insertion needs an [object] section".into()))?;
        let field = o.field.build()?;
        let clip = o.clip_box(&field)?;
        Ok((field, clip))
    }

    fn placement_at(&self, scale: f64, distance: f64) -> Result<ObjectPlacement> {
        assemble_placement(&self.camera, &self.cfg.bbox, scale, distance)
    }

    fn truth_composite(&self) -> Result<crate::render::RenderedImage> {
        let truth = self
            .cfg
            .truth
            .ok_or_else(|| Error::Config("this edit mode needs a [truth] section".into()))?;
        let (object, clip) = self.object()?;
        let placement = self.placement_at(truth.scale, truth.distance)?;
        render_fused_image(&self.scene, &object, &placement, &clip, &self.camera, &self.sampling)
    }

    /// Cameras for `(azimuth, elevation)` offsets around `placement`,
    /// sharing the reference intrinsics and clip range.
    pub fn orbit_cameras(&self, placement: &ObjectPlacement, views: &[(f64, f64)]) -> Result<Vec<CameraModel>> {
        if views.is_empty() {
            return Ok(Vec::new());
        }
        let mut schedule = ViewSchedule::around(&self.camera, placement.center(), 0.0, 0.0, 1, 1)?;
        schedule.views = views.to_vec();
        sample_refinement_cameras(
            &schedule,
            self.camera.focal(),
            self.camera.width(),
            self.camera.height(),
        )?
        .into_iter()
        .map(|c| c.with_clip(self.camera.near(), self.camera.far()))
        .collect()
    }
}

/// Hash-recording artifact access for one stage.
struct StageIo<'a> {
    dir: &'a Path,
    rec: &'a mut StageRecord,
}

impl StageIo<'_> {
    fn note_input(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::Format {
            path: path.clone(),
            reason: format!("missing stage input: {e}"),
        })?;
        self.rec.inputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(path)
    }

    fn note_output(&mut self, name: &str) -> Result<()> {
        let digest = manifest::sha256_file(&self.dir.join(name))?;
        self.rec.outputs.insert(name.to_string(), digest);
        Ok(())
    }

    fn read_image(&mut self, name: &str) -> Result<ImageBuffer> {
        let path = self.note_input(name)?;
        load_image(path)
    }

    fn read_depth(&mut self, name: &str) -> Result<DepthMap> {
        let path = self.note_input(name)?;
        Ok(DepthMap::from(load_scalar(path)?))
    }

    fn write_image(&mut self, name: &str, image: &ImageBuffer) -> Result<()> {
        save_image(self.dir.join(name), image)?;
        self.note_output(name)
    }

    fn write_scalar(&mut self, name: &str, map: &ScalarMap) -> Result<()> {
        save_scalar(self.dir.join(name), map)?;
        self.note_output(name)
    }

    fn write_depth(&mut self, name: &str, depth: &DepthMap) -> Result<()> {
        let map = ScalarMap::from_values(depth.width(), depth.height(), depth.values().to_vec())?;
        self.write_scalar(name, &map)
    }

    fn write_mask(&mut self, name: &str, mask: &Mask) -> Result<()> {
        let values = mask.bits().iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        self.write_scalar(name, &ScalarMap::from_values(mask.width(), mask.height(), values)?)
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), text)?;
        self.note_output(name)
    }
}

fn values<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn stage_render(ctx: &RunContext, io: &mut StageIo) -> Result<serde_json::Value> {
    let img = render_image(&ctx.scene, &ctx.camera, &ctx.sampling)?;
    io.write_image("reference.png", &img.color)?;
    io.write_image("reference.pfm", &img.color)?;
    io.write_depth("reference_depth.pfm", &img.depth)?;
    let n = img.alpha.values().len() as f64;
    values(&RenderValues {
        width: ctx.camera.width(),
        height: ctx.camera.height(),
        mean_alpha: img.alpha.values().iter().sum::<f64>() / n,
    })
}

/// Copies the bbox region of `patch` (full-frame) into `base`.
fn paste_bbox<T: Clone>(base: &[T], patch: &[T], width: usize, bbox: &crate::image::BBox2D) -> Vec<T> {
    base.iter()
        .zip(patch)
        .enumerate()
        .map(|(i, (b, p))| {
            if bbox.contains(i / width, i % width) {
                p.clone()
            } else {
                b.clone()
            }
        })
        .collect()
}

fn stage_edit(ctx: &RunContext, io: &mut StageIo) -> Result<serde_json::Value> {
    let reference = io.read_image("reference.pfm")?;
    let ref_depth = io.read_depth("reference_depth.pfm")?;
    let bbox = &ctx.cfg.bbox;
    let (w, h) = (reference.width(), reference.height());
    let mut denoiser_calls = None;
    let (edited, depth_values) = match &ctx.cfg.edit {
        EditConfig::Composite | EditConfig::Repaint => {
            let truth = ctx.truth_composite()?;
            let pasted = ImageBuffer::from_pixels(w, h, paste_bbox(reference.pixels(), truth.color.pixels(), w, bbox))?;
            let depth = paste_bbox(ref_depth.values(), truth.depth.values(), w, bbox);
            let edited = if matches!(ctx.cfg.edit, EditConfig::Repaint) {
                let RepaintSection { total_steps, schedule } = &ctx.cfg.repaint;
                let noise = NoiseSchedule::ddpm(*total_steps)?;
                let denoiser = TargetDenoiser {
                    target: pasted,
                    schedule: noise.clone(),
                };
                let mut rcfg = schedule.clone();
                rcfg.seed = sub_seed(ctx.cfg.seed, 3);
                let mask = Mask::from_bbox(w, h, bbox)?;
                let out = repaint_inpaint(&denoiser, &reference, &mask, &noise, &rcfg)?;
                let trace: String = out.trace.iter().map(|s| format!("{s}\n")).collect();
                io.write_text("repaint_trace.txt", &trace)?;
                denoiser_calls = Some(
                    out.trace
                        .iter()
                        .filter(|s| s.kind == crate::repaint::StepKind::Denoise)
                        .count(),
                );
                out.image
            } else {
                pasted
            };
            (edited, depth)
        }
        EditConfig::Paste { image, depth } => {
            let patch = load_image(image)?;
            let pixels = if patch.width() == bbox.width && patch.height() == bbox.height {
                let mut full = reference.clone();
                full.paste(&patch, bbox)?;
                full.into_pixels()
            } else if patch.same_shape(&reference) {
                paste_bbox(reference.pixels(), patch.pixels(), w, bbox)
            } else {
                return Err(Error::ShapeMismatch(format!(
                    "edit image is {}x{}; expected the bbox size or the full frame",
                    patch.width(),
                    patch.height()
                )));
            };
            let depth = match depth {
                Some(p) => {
                    let d = load_scalar(p)?;
                    if d.width() != w || d.height() != h {
                        return Err(Error::ShapeMismatch("edit depth must be full-frame".into()));
                    }
                    d.values().to_vec()
                }
                None => ref_depth.values().to_vec(),
            };
            (ImageBuffer::from_pixels(w, h, pixels)?, depth)
        }
    };
    io.write_image("edited.png", &edited)?;
    io.write_image("edited.pfm", &edited)?;
    io.write_scalar("edited_depth_truth.pfm", &ScalarMap::from_values(w, h, depth_values)?)?;
    let changed_pixels = edited
        .pixels()
        .iter()
        .zip(reference.pixels())
        .filter(|(a, b)| a != b)
        .count();
    let mode = match ctx.cfg.edit {
        EditConfig::Composite => "composite",
        EditConfig::Paste { .. } => "paste",
        EditConfig::Repaint => "repaint",
    };
    values(&EditValues {
        mode: mode.into(),
        changed_pixels,
        denoiser_calls,
    })
}

fn stage_align(ctx: &RunContext, io: &mut StageIo) -> Result<serde_json::Value> {
    let edited = io.read_image("edited.pfm")?;
    let truth = io.read_depth("edited_depth_truth.pfm")?;
    let reference = io.read_depth("reference_depth.pfm")?;
    let provider = AffineNoiseDepthProvider {
        truth,
        scale: ctx.cfg.depth.scale,
        shift: ctx.cfg.depth.shift,
        noise_std: ctx.cfg.depth.noise_std,
        seed: sub_seed(ctx.cfg.seed, 2),
    };
    let estimated = provider.estimate(&edited)?;
    let bbox = &ctx.cfg.bbox;
    let fit = align_depth(&estimated, &reference, bbox)?;
    let aligned = estimated.affine(fit.scale, fit.shift);
    io.write_depth("estimated_depth.pfm", &estimated)?;
    io.write_depth("aligned_depth.pfm", &aligned)?;
    let center_z_depth = object_center_depth(&aligned, bbox)?;
    values(&AlignValues {
        scale: fit.scale,
        shift: fit.shift,
        residual_rms: fit.residual_rms,
        std_errors: fit.std_errors,
        pixels: fit.pixels,
        center_z_depth,
        center_distance: center_ray_distance(&ctx.camera, bbox, center_z_depth)?,
    })
}

fn stage_place(ctx: &RunContext, io: &mut StageIo, manifest: &RunManifest) -> Result<serde_json::Value> {
    let align: AlignValues = manifest.completed("align")?.values_as()?;
    let edited = io.read_image("edited.pfm")?;
    let (object, clip) = ctx.object()?;
    let intr = ctx.cfg.object.as_ref().expect("object checked above").intrinsics;
    let d = align.center_distance;
    let init = init_scale_distance(d, ctx.camera.focal(), &intr)?;
    let problem = PlacementProblem {
        scene: &ctx.scene,
        object: &object,
        clip,
        camera: &ctx.camera,
        bbox: ctx.cfg.bbox,
        sampling: ctx.sampling.clone(),
    };
    let crop = problem.objective_crop(ctx.cfg.placement.crop_dilation);
    let target = edited.crop(&crop)?;
    let est = optimize_scale_distance(&problem, &target, d, &intr, init, &ctx.cfg.placement)?;
    let placement = ctx.placement_at(est.scale, est.distance)?;
    let r = placement.rotation();
    values(&PlaceValues {
        init_scale: init.0,
        init_distance: init.1,
        init_mse: est.trace[0].mse,
        scale: est.scale,
        distance: est.distance,
        mse: est.mse,
        iterations: est.iterations,
        improved: est.improved,
        rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
        translation: placement.translation().into(),
        center: placement.center().into(),
    })
}

/// Placement recorded by a completed `place` stage.
pub fn recorded_placement(ctx: &RunContext, manifest: &RunManifest) -> Result<(PlaceValues, ObjectPlacement)> {
    let place: PlaceValues = manifest.completed("place")?.values_as()?;
    let placement = ctx.placement_at(place.scale, place.distance)?;
    Ok((place, placement))
}

fn stage_fuse(ctx: &RunContext, io: &mut StageIo, manifest: &RunManifest) -> Result<serde_json::Value> {
    let (_, placement) = recorded_placement(ctx, manifest)?;
    let (object, clip) = ctx.object()?;
    let fused = render_fused_image(&ctx.scene, &object, &placement, &clip, &ctx.camera, &ctx.sampling)?;
    io.write_image("fused_reference.png", &fused.color)?;
    io.write_image("fused_reference.pfm", &fused.color)?;
    io.write_depth("fused_reference_depth.pfm", &fused.depth)?;
    let mask = render_object_mask(&object, &placement, &ctx.camera, &ctx.sampling, 0.5)?;
    io.write_mask("object_mask.png", &mask)?;
    for (i, camera) in ctx.orbit_cameras(&placement, &ctx.cfg.views)?.iter().enumerate() {
        let img = render_fused_image(&ctx.scene, &object, &placement, &clip, camera, &ctx.sampling)?;
        io.write_image(&format!("fused_view_{i:02}.png"), &img.color)?;
    }
    values(&FuseValues {
        views: ctx.cfg.views.clone(),
        object_mask_pixels: mask.count(),
    })
}

fn stage_refine(ctx: &RunContext, io: &mut StageIo, manifest: &RunManifest) -> Result<serde_json::Value> {
    let (_, placement) = recorded_placement(ctx, manifest)?;
    let (object, clip) = ctx.object()?;
    let refiner = ctx.cfg.refine.refiner.build();
    let inputs = RefineInputs {
        scene: &ctx.scene,
        object: &object,
        placement: &placement,
        clip: &clip,
        reference: &ctx.camera,
        sampling: &ctx.sampling,
    };
    let out = refine_loop(&inputs, refiner.as_ref(), &ctx.cfg.refine.schedule)?;
    let grid_name = "refined_object.vox";
    out.grid.save(ctx.out.join(grid_name))?;
    io.note_output(grid_name)?;
    for (i, v) in out.views.iter().enumerate() {
        io.write_image(&format!("refine_view_{i:02}.png"), &v.image)?;
    }
    let refined = render_view(&ctx.camera, |ray| {
        render_fused_ray_with(
            &ctx.scene,
            &out.grid,
            &placement,
            Some(&clip),
            ray,
            &ctx.sampling,
            DensityScaling::Corrected,
        )
    });
    io.write_image("refined_reference.png", &refined.color)?;
    values(&RefineValues {
        schedule: out.schedule,
        best_mse: out.reports.iter().map(|r| r.best_mse).collect(),
    })
}

fn config_digest(cfg: &SceneConfig) -> Result<String> {
    Ok(sha256_hex(cfg.to_toml()?.as_bytes()))
}

fn run_one(name: &str, ctx: &RunContext, io: &mut StageIo, manifest: &RunManifest) -> Result<serde_json::Value> {
    match name {
        "render" => stage_render(ctx, io),
        "edit" => stage_edit(ctx, io),
        "align" => stage_align(ctx, io),
        "place" => stage_place(ctx, io, manifest),
        "fuse" => stage_fuse(ctx, io, manifest),
        REFINE_STAGE => stage_refine(ctx, io, manifest),
        other => Err(Error::Config(format!("unknown stage `{other}`"))),
    }
}

/// Runs `stages` in order, saving the manifest after each one. A failure
/// is recorded in the manifest and returned wrapped with the stage name.
fn execute(ctx: &RunContext, mut manifest: RunManifest, stages: &[&str]) -> Result<RunManifest> {
    let timings_path = ctx.out.join(TIMINGS_FILE);
    let mut timings: BTreeMap<String, f64> = std::fs::read(&timings_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    for &name in stages {
        let mut rec = StageRecord::new();
        let start = Instant::now();
        let result = run_one(
            name,
            ctx,
            &mut StageIo {
                dir: &ctx.out,
                rec: &mut rec,
            },
            &manifest,
        );
        timings.insert(name.to_string(), start.elapsed().as_secs_f64());
        match result {
            Ok(v) => {
                rec.status = StageStatus::Done;
                rec.values = v;
                manifest.stages.insert(name.to_string(), rec);
                manifest.save(&ctx.out)?;
            }
            Err(e) => {
                rec.error = Some(e.to_string());
                manifest.stages.insert(name.to_string(), rec);
                manifest.save(&ctx.out)?;
                std::fs::write(&timings_path, serde_json::to_string_pretty(&timings)?)?;
                return Err(Error::Stage {
                    stage: name.to_string(),
                    source: Box::new(e),
                });
            }
        }
    }
    std::fs::write(&timings_path, serde_json::to_string_pretty(&timings)?)?;
    Ok(manifest)
}

/// Opens the manifest of an earlier run with the same configuration and
/// checks that every artifact of `upstream` stages is unchanged.
fn resume(ctx: &RunContext, upstream: &[&str]) -> Result<RunManifest> {
    let manifest = RunManifest::load(&ctx.out)?;
    if manifest.config_sha256 != config_digest(&ctx.cfg)? {
        return Err(Error::Config(
            "configuration differs from the one recorded in the manifest; rerun from the first stage".into(),
        ));
    }
    for s in upstream {
        manifest.verify_outputs(s, &ctx.out)?;
    }
    Ok(manifest)
}

fn fresh(ctx: &RunContext) -> Result<RunManifest> {
    std::fs::create_dir_all(&ctx.out)?;
    Ok(RunManifest {
        seed: ctx.cfg.seed,
        config_sha256: config_digest(&ctx.cfg)?,
        stages: BTreeMap::new(),
    })
}

/// Renders the reference view and its depth.
pub fn cmd_render(cfg: &SceneConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate_render()?;
    let ctx = RunContext::new(cfg, out)?;
    let manifest = fresh(&ctx)?;
    execute(&ctx, manifest, &INSERT_STAGES[..1])
}

/// Runs the insertion stages, starting at `from` when given.
pub fn cmd_insert(cfg: &SceneConfig, out: &Path, from: Option<&str>) -> Result<RunManifest> {
    cfg.validate_insert()?;
    let ctx = RunContext::new(cfg, out)?;
    let start = match from {
        None => 0,
        Some(name) => INSERT_STAGES
            .iter()
            .position(|s| *s == name)
            .ok_or_else(|| Error::Config(format!("unknown stage `{name}`; expected one of {INSERT_STAGES:?}")))?,
    };
    let manifest = if start == 0 {
        fresh(&ctx)?
    } else {
        resume(&ctx, &INSERT_STAGES[..start])?
    };
    execute(&ctx, manifest, &INSERT_STAGES[start..])
}

/// Refines the object placed by an earlier `insert` run in `out`.
pub fn cmd_refine(cfg: &SceneConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate_insert()?;
    let ctx = RunContext::new(cfg, out)?;
    let manifest = resume(&ctx, &INSERT_STAGES[..4])?;
    execute(&ctx, manifest, &[REFINE_STAGE])
}

/// Scheduler actions for the configured diffusion settings.
pub fn repaint_trace(section: &RepaintSection) -> Result<Vec<TraceStep>> {
    repaint_plan(section.total_steps, &section.schedule)
}
