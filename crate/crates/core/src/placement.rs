//! Scale and distance of an inserted object.
//!
//! The object's scale `s` and the distance `r` from the reference camera to
//! its center are initialized from the aligned center depth `d` and the
//! reconstructor's canonical camera, then refined by matching a fused render
//! of the bbox crop against the edited reference crop. In constrained mode
//! `r = s l + d`, which keeps the object's visible front point at depth `d`
//! and reduces the search to one dimension.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{BoundingBox3D, Field};
use crate::geometry::{build_object_frame, compute_object_center, CameraModel, ObjectPlacement};
use crate::image::{BBox2D, ImageBuffer};
use crate::render::{render_fused_ray, SamplingConfig};

/// Canonical capture setup of the single-view reconstructor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructorIntrinsics {
    /// Camera distance `r'` in object units.
    pub canonical_distance: f64,
    /// Focal length `f'` in pixels.
    pub canonical_focal: f64,
    /// Distance `l` from the object origin to the surface point seen at the
    /// bbox center, in object units.
    #[serde(default)]
    pub anchor_offset: f64,
}

impl ReconstructorIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.canonical_distance > 0.0 && self.canonical_focal > 0.0 && self.anchor_offset >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "reconstructor intrinsics need r' > 0, f' > 0, l >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `s0 = (d / f') (r' / f)` and `r0 = s0 l + d`.
pub fn init_scale_distance(depth: f64, focal: f64, intr: &ReconstructorIntrinsics) -> Result<(f64, f64)> {
    intr.validate()?;
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "center depth must be positive, got {depth}"
        )));
    }
    if !(focal > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "focal length must be positive, got {focal}"
        )));
    }
    let s0 = (depth / intr.canonical_focal) * (intr.canonical_distance / focal);
    Ok((s0, s0 * intr.anchor_offset + depth))
}

/// Converts the z-depth read from a depth map at the bbox center into the
/// distance along that pixel's ray.
pub fn center_ray_distance(camera: &CameraModel, bbox: &BBox2D, z_depth: f64) -> Result<f64> {
    let (row, col) = bbox.center();
    let ray = camera.pixel_ray(row, col)?;
    Ok(z_depth / ray.direction.dot(&camera.optical_axis()))
}

/// Places the object center on the ray through the bbox center at
/// `distance`, facing the camera.
pub fn assemble_placement(camera: &CameraModel, bbox: &BBox2D, scale: f64, distance: f64) -> Result<ObjectPlacement> {
    bbox.check_inside(camera.width(), camera.height())?;
    let (row, col) = bbox.center();
    let v = camera.pixel_ray(row, col)?.direction;
    let center = compute_object_center(camera.center(), distance, v)?;
    let rotation = build_object_frame(&v)?;
    ObjectPlacement::new(rotation, center, scale, distance)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Golden-section search over `log s` with `r = s l + d`.
    Constrained,
    /// Alternating golden-section passes over `log s` and `r`.
    Unconstrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub mode: SearchMode,
    /// Objective evaluations, including the one at the initialization.
    pub budget: usize,
    /// Scale bracket is `[s0 / f, s0 * f]`.
    pub bracket_factor: f64,
    /// Fraction by which the bbox grows per side to form the objective crop.
    pub crop_dilation: f64,
    /// Bracket width in `log s` at which the search stops early.
    pub tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            mode: SearchMode::Constrained,
            budget: 64,
            bracket_factor: 4.0,
            crop_dilation: 0.2,
            tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub scale: f64,
    pub distance: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementEstimate {
    pub scale: f64,
    pub distance: f64,
    pub mse: f64,
    /// Objective evaluations spent.
    pub iterations: usize,
    /// False when nothing beat the initialization; scale and distance are
    /// then the initial values.
    pub improved: bool,
    /// Every evaluated candidate in order.
    pub trace: Vec<Candidate>,
}

/// Everything the objective needs besides the candidate parameters.
pub struct PlacementProblem<'a> {
    pub scene: &'a dyn Field,
    pub object: &'a dyn Field,
    /// Object-space box outside which object density is dropped.
    pub clip: BoundingBox3D,
    pub camera: &'a CameraModel,
    pub bbox: BBox2D,
    pub sampling: SamplingConfig,
}

impl PlacementProblem<'_> {
    pub fn objective_crop(&self, dilation: f64) -> BBox2D {
        self.bbox.dilate(dilation, self.camera.width(), self.camera.height())
    }

    /// Fused render of `crop` with the object placed at (`scale`, `distance`).
    pub fn render_crop(&self, crop: &BBox2D, scale: f64, distance: f64) -> Result<ImageBuffer> {
        let placement = assemble_placement(self.camera, &self.bbox, scale, distance)?;
        let pixels: Vec<_> = (0..crop.height * crop.width)
            .into_par_iter()
            .map(|i| {
                let ray = self
                    .camera
                    .pixel_ray(crop.top + i / crop.width, crop.left + i % crop.width)?;
                Ok(render_fused_ray(self.scene, self.object, &placement, &self.clip, &ray, &self.sampling).color)
            })
            .collect::<Result<_>>()?;
        ImageBuffer::from_pixels(crop.width, crop.height, pixels)
    }
}

/// Golden-section minimization of `f` on `[lo, hi]` with at most `max_evals`
/// evaluations. Returns the best evaluated point and value.
pub fn golden_section<F>(mut f: F, mut lo: f64, mut hi: f64, max_evals: usize, tol: f64) -> Result<(f64, f64, usize)>
where
    F: FnMut(f64) -> Result<f64>,
{
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    if max_evals == 0 {
        return Err(Error::InvalidArgument(
            "golden-section search needs at least one evaluation".into(),
        ));
    }
    if max_evals == 1 {
        let x = 0.5 * (lo + hi);
        return Ok((x, f(x)?, 1));
    }
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    let mut evals = 2;
    let mut best = if f2 < f1 { (x2, f2) } else { (x1, f1) };
    while evals < max_evals && (hi - lo) > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1)?;
            if f1 < best.1 {
                best = (x1, f1);
            }
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2)?;
            if f2 < best.1 {
                best = (x2, f2);
            }
        }
        evals += 1;
    }
    Ok((best.0, best.1, evals))
}

/// Minimizes the crop MSE between `target` and the fused render over
/// (scale, distance), starting from `init`.
pub fn optimize_scale_distance(
    problem: &PlacementProblem<'_>,
    target: &ImageBuffer,
    depth: f64,
    intr: &ReconstructorIntrinsics,
    init: (f64, f64),
    opts: &OptimizerConfig,
) -> Result<PlacementEstimate> {
    intr.validate()?;
    problem.sampling.validate()?;
    let (s0, r0) = init;
    if !(s0 > 0.0 && r0 > s0 * intr.anchor_offset && depth > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "initialization (s0={s0}, r0={r0}, d={depth}) violates s0 > 0, r0 > s0 l, d > 0"
        )));
    }
    if opts.budget < 2 || !(opts.bracket_factor > 1.0) {
        return Err(Error::InvalidArgument(
            "optimizer needs budget >= 2 and bracket factor > 1".into(),
        ));
    }
    let crop = problem.objective_crop(opts.crop_dilation);
    if target.width() != crop.width || target.height() != crop.height {
        return Err(Error::ShapeMismatch(format!(
            "edit crop is {}x{}, objective crop is {}x{}",
            target.width(),
            target.height(),
            crop.width,
            crop.height
        )));
    }

    let mut trace = Vec::new();
    let mut eval = |scale: f64, distance: f64| -> Result<f64> {
        let mse = problem.render_crop(&crop, scale, distance)?.mse(target)?;
        trace.push(Candidate { scale, distance, mse });
        Ok(mse)
    };
    let init_mse = eval(s0, r0)?;
    let l = intr.anchor_offset;
    let (lo, hi) = ((s0 / opts.bracket_factor).ln(), (s0 * opts.bracket_factor).ln());

    match opts.mode {
        SearchMode::Constrained => {
            golden_section(
                |log_s| {
                    let s = log_s.exp();
                    eval(s, s * l + depth)
                },
                lo,
                hi,
                opts.budget - 1,
                opts.tolerance,
            )?;
        }
        SearchMode::Unconstrained => {
            let rounds = 2;
            let per_pass = ((opts.budget - 1) / (2 * rounds)).max(1);
            let (mut s, mut r, mut best) = (s0, r0, init_mse);
            for _ in 0..rounds {
                let (log_s, m, _) = golden_section(
                    |log_s| {
                        let s = log_s.exp();
                        if r <= s * l {
                            return Ok(f64::INFINITY);
                        }
                        eval(s, r)
                    },
                    lo,
                    hi,
                    per_pass,
                    opts.tolerance,
                )?;
                if m < best {
                    best = m;
                    s = log_s.exp();
                }
                let r_lo = (r / 2.0).max(s * l * (1.0 + 1e-9) + 1e-9);
                let (rr, m, _) = golden_section(|r| eval(s, r), r_lo, 2.0 * r, per_pass, opts.tolerance * r)?;
                if m < best {
                    best = m;
                    r = rr;
                }
            }
        }
    }

    let best = trace
        .iter()
        .copied()
        .min_by(|a, b| a.mse.total_cmp(&b.mse))
        .expect("initialization is always evaluated");
    let improved = best.mse < init_mse;
    let (scale, distance, mse) = if improved {
        (best.scale, best.distance, best.mse)
    } else {
        (s0, r0, init_mse)
    };
    Ok(PlacementEstimate {
        scale,
        distance,
        mse,
        iterations: trace.len(),
        improved,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{RadianceField, Vec3};
    use crate::geometry::Mat3;

    #[test]
    fn init_direct_substitution() {
        let intr = ReconstructorIntrinsics {
            canonical_distance: 3.0,
            canonical_focal: 2.0,
            anchor_offset: 0.5,
        };
        let (s0, r0) = init_scale_distance(4.0, 1.0, &intr).unwrap();
        assert_eq!((s0, r0), (6.0, 7.0));
        let unit = ReconstructorIntrinsics {
            canonical_distance: 1.0,
            canonical_focal: 1.0,
            anchor_offset: 0.0,
        };
        assert_eq!(init_scale_distance(1.0, 1.0, &unit).unwrap(), (1.0, 1.0));
        assert!(init_scale_distance(0.0, 1.0, &unit).is_err());
        assert!(init_scale_distance(-2.0, 1.0, &unit).is_err());
    }

    #[test]
    fn init_is_homogeneous_in_depth() {
        let intr = ReconstructorIntrinsics {
            canonical_distance: 2.7,
            canonical_focal: 35.0,
            anchor_offset: 0.8,
        };
        let (s, r) = init_scale_distance(3.3, 120.0, &intr).unwrap();
        for lambda in [0.1, 2.0, 17.5] {
            let (sl, rl) = init_scale_distance(3.3 * lambda, 120.0, &intr).unwrap();
            assert!((sl - lambda * s).abs() < 1e-12 * sl);
            assert!((rl - lambda * r).abs() < 1e-12 * rl);
        }
    }

    #[test]
    fn golden_section_finds_quadratic_minimum() {
        let mut calls = 0;
        let (x, fx, n) = golden_section(
            |x| {
                calls += 1;
                Ok((x - 0.3).powi(2) + 1.0)
            },
            -2.0,
            4.0,
            64,
            1e-9,
        )
        .unwrap();
        assert!((x - 0.3).abs() < 1e-6);
        assert!((fx - 1.0).abs() < 1e-12);
        assert_eq!(n, calls);
        assert!(n <= 64);
    }

    #[test]
    fn identity_placement_case() {
        // camera at the origin looking down -x
        let cam = CameraModel::look_at(Vec3::zeros(), Vec3::new(-1.0, 0.0, 0.0), 30.0, 21, 21).unwrap();
        let bbox = BBox2D::new(5, 5, 11, 11).unwrap();
        let pl = assemble_placement(&cam, &bbox, 1.5, 2.0).unwrap();
        assert!((pl.center() - Vec3::new(-2.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((pl.rotation() - Mat3::identity()).abs().max() < 1e-12);
        let to_camera = (cam.center() - pl.center()).normalize();
        let x_axis = pl.rotation().row(0).transpose();
        assert!((x_axis - to_camera).norm() < 1e-12);
    }

    #[test]
    fn empty_object_reports_no_improvement() {
        let cam = CameraModel::look_at(Vec3::zeros(), Vec3::new(-1.0, 0.0, 0.0), 20.0, 24, 24).unwrap();
        let bbox = BBox2D::new(8, 8, 8, 8).unwrap();
        let problem = PlacementProblem {
            scene: &RadianceField::Empty,
            object: &RadianceField::Empty,
            clip: BoundingBox3D::cube(1.0).unwrap(),
            camera: &cam,
            bbox,
            sampling: SamplingConfig::with_samples(16),
        };
        let crop = problem.objective_crop(0.2);
        let target = ImageBuffer::filled(crop.width, crop.height, [0.5; 3]);
        let intr = ReconstructorIntrinsics {
            canonical_distance: 2.0,
            canonical_focal: 20.0,
            anchor_offset: 1.0,
        };
        let est =
            optimize_scale_distance(&problem, &target, 3.0, &intr, (0.5, 3.5), &OptimizerConfig::default()).unwrap();
        assert!(!est.improved);
        assert_eq!((est.scale, est.distance), (0.5, 3.5));
        assert!(est.iterations <= 64);
    }

    #[test]
    fn rejects_mismatched_target() {
        let cam = CameraModel::look_at(Vec3::zeros(), Vec3::new(-1.0, 0.0, 0.0), 20.0, 24, 24).unwrap();
        let problem = PlacementProblem {
            scene: &RadianceField::Empty,
            object: &RadianceField::Empty,
            clip: BoundingBox3D::cube(1.0).unwrap(),
            camera: &cam,
            bbox: BBox2D::new(8, 8, 8, 8).unwrap(),
            sampling: SamplingConfig::with_samples(16),
        };
        let intr = ReconstructorIntrinsics {
            canonical_distance: 2.0,
            canonical_focal: 20.0,
            anchor_offset: 1.0,
        };
        let target = ImageBuffer::filled(3, 3, [0.0; 3]);
        assert!(
            optimize_scale_distance(&problem, &target, 3.0, &intr, (0.5, 3.5), &OptimizerConfig::default()).is_err()
        );
    }
}
