//! Acceptance checks. Runs every criterion in sequence, prints one
//! PASS/FAIL line each with its runtime, and exits nonzero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use fieldfuse_core::depth_align::{align_depth, alignment_crop, compute_center_weights};
use fieldfuse_core::field::{sphere, BoundingBox3D, Field, FieldSample, RadianceField, Vec3};
use fieldfuse_core::geometry::{CameraModel, ObjectPlacement, Ray};
use fieldfuse_core::image::{psnr, BBox2D, DepthMap, ImageBuffer, Mask};
use fieldfuse_core::pipeline::{cmd_insert, SceneConfig};
use fieldfuse_core::placement::{
    assemble_placement, optimize_scale_distance, OptimizerConfig, PlacementProblem, ReconstructorIntrinsics,
};
use fieldfuse_core::refine::{
    constant_grid, fit_grid_to_views, footprint_mask, masked_view_mse, order_views, refine_loop,
    sample_refinement_cameras, view_angles, FitContext, IdentityRefiner, RefineConfig, RefineInputs, TrainableGrid,
    TrainingView, ViewSchedule,
};
use fieldfuse_core::render::{
    render_fused_ray_with, render_image, render_ray, render_view, DensityScaling, SamplingConfig,
};
use fieldfuse_core::repaint::{
    repaint_inpaint, repaint_plan, standard_normal_image, NoiseDenoiser, NoiseSchedule, RepaintConfig, StepKind,
    TargetDenoiser, TraceStep,
};
use fieldfuse_core::voxel::voxelize;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn primitive(toml_text: &str) -> RadianceField {
    fieldfuse_core::field::make_primitive(&toml::from_str(toml_text).unwrap()).unwrap()
}

fn mean_abs_channel_error(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).abs()).sum::<f64>())
        .sum();
    sum / (3 * a.pixels().len()) as f64
}

// 1. Quadrature.

fn quadrature() -> Outcome {
    // Slab of thickness 1 whose faces fall on bin edges.
    let sigma: f64 = 1.3;
    let slab = primitive("kind = \"box\"\ncenter = [1.0, 0.0, 0.0]\nhalf_extents = [0.5, 1.0, 1.0]\ndensity = 1.3\ncolor = [1.0, 1.0, 1.0]");
    let ray = Ray::new(Vec3::zeros(), Vec3::x(), 0.0, 2.0).unwrap();
    let out = render_ray(&slab, &ray, &SamplingConfig::with_samples(1024));
    let slab_err = (out.alpha - (1.0 - (-sigma).exp())).abs();

    // Sphere image against a fine-sampling reference.
    let ball = sphere([0.0; 3], 1.0, 2.0, [0.9, 0.5, 0.2]).unwrap();
    let cam = CameraModel::look_at(Vec3::new(4.0, 0.5, 0.8), Vec3::zeros(), 40.0, 48, 48)
        .unwrap()
        .with_clip(2.0, 6.0)
        .unwrap();
    let coarse = render_image(&ball, &cam, &SamplingConfig::with_samples(64)).unwrap();
    let fine = render_image(&ball, &cam, &SamplingConfig::with_samples(8192)).unwrap();
    let sphere_err = mean_abs_channel_error(&coarse.color, &fine.color);
    check(
        slab_err <= 1e-6 && sphere_err <= 1e-3,
        format!("slab |Δα| = {slab_err:.2e}, sphere N=64 vs N=8192 mean |Δc| = {sphere_err:.2e}"),
    )
}

// 2. Fusion identities.

fn fusion_identity() -> Outcome {
    let scene = RadianceField::Composite(vec![
        sphere([0.0, 0.3, 0.0], 0.8, 3.0, [0.2, 0.6, 0.9]).unwrap(),
        primitive("kind = \"gaussian\"\ncenter = [0.2, -0.4, 0.1]\nstddev = 0.5\npeak = 4.0\ncolor = [0.9, 0.8, 0.1]"),
    ]);
    let object = sphere([0.0; 3], 0.5, 5.0, [0.8, 0.1, 0.3]).unwrap();
    let cam = CameraModel::look_at(Vec3::new(4.0, 0.0, 0.5), Vec3::zeros(), 30.0, 24, 24)
        .unwrap()
        .with_clip(1.0, 8.0)
        .unwrap();
    let sampling = SamplingConfig::with_samples(128);
    let clip = BoundingBox3D::cube(0.6).unwrap();

    let bbox = BBox2D::new(6, 6, 12, 12).unwrap();
    let placement = assemble_placement(&cam, &bbox, 0.7, 3.8).unwrap();
    let scene_only = render_image(&scene, &cam, &sampling).unwrap();
    let with_empty = render_view(&cam, |ray| {
        render_fused_ray_with(
            &scene,
            &RadianceField::Empty,
            &placement,
            Some(&clip),
            ray,
            &sampling,
            DensityScaling::Corrected,
        )
    });
    let empty_err = max_diff(&scene_only.color, &with_empty.color);

    let unit = assemble_placement(&cam, &bbox, 1.0, 3.8).unwrap();
    let render = |scaling| {
        render_view(&cam, |ray| {
            render_fused_ray_with(&scene, &object, &unit, Some(&clip), ray, &sampling, scaling)
        })
    };
    let (corrected, uncorrected) = (render(DensityScaling::Corrected), render(DensityScaling::Uncorrected));
    let unit_err = max_diff(&corrected.color, &uncorrected.color).max(
        corrected
            .alpha
            .values()
            .iter()
            .zip(uncorrected.alpha.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
    );
    check(
        empty_err <= 1e-12 && unit_err <= 1e-12,
        format!("empty object max |Δ| = {empty_err:.1e}, corrected vs uncorrected at s=1 max |Δ| = {unit_err:.1e}"),
    )
}

fn max_diff(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    a.pixels()
        .iter()
        .zip(b.pixels())
        .flat_map(|(p, q)| (0..3).map(move |c| (p[c] - q[c]).abs()))
        .fold(0.0, f64::max)
}

// 3. Scale correction against a field with the object baked into world space.

/// The object resampled in world coordinates: a world point maps into the
/// object frame, and density per world length is density per object length
/// divided by the scale.
struct BakedObject<'a> {
    object: &'a RadianceField,
    placement: &'a ObjectPlacement,
    clip: &'a BoundingBox3D,
}

impl Field for BakedObject<'_> {
    fn query(&self, p: &Vec3) -> FieldSample {
        let q = self.placement.world_to_object(p);
        if !self.clip.contains(&q) {
            return FieldSample::EMPTY;
        }
        let s = self.object.query(&q);
        FieldSample {
            density: s.density / self.placement.scale(),
            color: s.color,
        }
    }
}

/// Scene and baked object sharing space: densities add, colors mix by
/// density.
struct World<'a> {
    scene: &'a RadianceField,
    baked: BakedObject<'a>,
}

impl Field for World<'_> {
    fn query(&self, p: &Vec3) -> FieldSample {
        let (a, b) = (self.scene.query(p), self.baked.query(p));
        let density = a.density + b.density;
        if density == 0.0 {
            return FieldSample::EMPTY;
        }
        FieldSample {
            density,
            color: std::array::from_fn(|c| (a.density * a.color[c] + b.density * b.color[c]) / density),
        }
    }
}

fn scale_correction() -> Outcome {
    let scene = RadianceField::Composite(vec![
        primitive("kind = \"gaussian\"\ncenter = [0.0, 0.3, 0.2]\nstddev = 0.9\npeak = 0.6\ncolor = [0.1, 0.7, 0.4]"),
        primitive("kind = \"box\"\ncenter = [-4.5, 0.0, 0.0]\nhalf_extents = [0.5, 8.0, 8.0]\ndensity = 4.0\ncolor = [0.3, 0.35, 0.6]"),
    ]);
    // Semi-transparent so that a wrong density scale changes the image.
    let object = RadianceField::Composite(vec![
        sphere([0.0; 3], 0.5, 2.0, [0.9, 0.3, 0.2]).unwrap(),
        sphere([0.25, 0.1, 0.3], 0.2, 3.0, [0.95, 0.9, 0.1]).unwrap(),
    ]);
    let clip = BoundingBox3D::cube(0.6).unwrap();
    let cam = CameraModel::look_at(Vec3::new(6.0, 0.0, 0.5), Vec3::zeros(), 28.0, 32, 32)
        .unwrap()
        .with_clip(0.5, 11.0)
        .unwrap();
    let bbox = BBox2D::new(8, 8, 16, 16).unwrap();
    let sampling = SamplingConfig::with_samples(4096);

    let mut lines = Vec::new();
    let mut ok = true;
    for s in [0.5, 2.0, 3.0] {
        let placement = assemble_placement(&cam, &bbox, s, 6.0).unwrap();
        let world = World {
            scene: &scene,
            baked: BakedObject {
                object: &object,
                placement: &placement,
                clip: &clip,
            },
        };
        let oracle = render_image(&world, &cam, &sampling).unwrap();
        let fused = |scaling| {
            render_view(&cam, |ray| {
                render_fused_ray_with(&scene, &object, &placement, Some(&clip), ray, &sampling, scaling)
            })
        };
        let corrected = mean_abs_channel_error(&fused(DensityScaling::Corrected).color, &oracle.color);
        ok &= corrected <= 1e-3;
        let mut line = format!("s={s}: corrected {corrected:.1e}");
        if s == 2.0 {
            let uncorrected = mean_abs_channel_error(&fused(DensityScaling::Uncorrected).color, &oracle.color);
            ok &= uncorrected > 1e-3;
            line += &format!(", uncorrected {uncorrected:.1e}");
        }
        lines.push(line);
    }
    check(ok, format!("mean |Δc| vs baked world: {}", lines.join("; ")))
}

// 4. Depth alignment.

/// Floor-and-wall style depth: a ramp with a step, spanning roughly [2, 8].
fn synthetic_depth(w: usize, h: usize) -> DepthMap {
    let values = (0..w * h)
        .map(|i| {
            let (row, col) = ((i / w) as f64, (i % w) as f64);
            let floor = 2.0 + 6.0 * (1.0 - row / h as f64);
            if col > 0.6 * w as f64 {
                floor.min(4.5) + 0.02 * col
            } else {
                floor
            }
        })
        .collect();
    DepthMap::from_values(w, h, values).unwrap()
}

fn depth_alignment() -> Outcome {
    let (w, h) = (40, 40);
    let reference = synthetic_depth(w, h);
    // 156 of 1600 pixels, about 10%.
    let bbox = BBox2D::new(14, 13, 12, 13).unwrap();
    let (alpha, beta) = (1.7, -0.4);
    let (a_true, b_true) = (1.0 / alpha, -beta / alpha);

    let exact = align_depth(&reference.affine(alpha, beta), &reference, &bbox).unwrap();
    let exact_err = (exact.scale - a_true).abs().max((exact.shift - b_true).abs());

    let clean = reference.affine(alpha, beta);
    let (lo, hi) = clean
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), v| (l.min(*v), u.max(*v)));
    let sigma = 0.01 * (hi - lo);
    let noise = Normal::new(0.0, sigma).unwrap();
    let trials = 100;
    // Returns trials with both parameters within 3 SE, the worst |z|, and the
    // mean signed z and error of the scale.
    let run_trials = |noise_on_estimate: bool| {
        let (mut within, mut worst, mut mean_za, mut mean_da) = (0, 0.0f64, 0.0, 0.0);
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fit = if noise_on_estimate {
                let noisy = clean.values().iter().map(|v| v + noise.sample(&mut rng)).collect();
                align_depth(&DepthMap::from_values(w, h, noisy).unwrap(), &reference, &bbox).unwrap()
            } else {
                let noisy = reference
                    .values()
                    .iter()
                    .map(|v| v + noise.sample(&mut rng) / alpha)
                    .collect();
                align_depth(&clean, &DepthMap::from_values(w, h, noisy).unwrap(), &bbox).unwrap()
            };
            let za = (fit.scale - a_true) / fit.std_errors[0];
            let zb = (fit.shift - b_true) / fit.std_errors[1];
            worst = worst.max(za.abs()).max(zb.abs());
            mean_za += za / trials as f64;
            mean_da += (fit.scale - a_true) / trials as f64;
            if za.abs() <= 3.0 && zb.abs() <= 3.0 {
                within += 1;
            }
        }
        (within, worst, mean_za, mean_da)
    };
    let (within, worst_z, mean_za, mean_da) = run_trials(true);
    let (control_within, _, control_za, _) = run_trials(false);

    // Noise on the regressor shrinks the fitted slope by var / (var + σ²),
    // with var the weighted variance of the clean estimate on the fit pixels.
    let crop = alignment_crop(&bbox, w, h);
    let (ic, jc) = bbox.center();
    let weights = compute_center_weights(crop.height, crop.width, (ic - crop.top, jc - crop.left)).unwrap();
    let (mut sw, mut se, mut see) = (0.0, 0.0, 0.0);
    for row in crop.top..crop.top + crop.height {
        for col in crop.left..crop.left + crop.width {
            if !bbox.contains(row, col) {
                let (wt, e) = (weights.get(row - crop.top, col - crop.left), clean.get(row, col));
                sw += wt;
                se += wt * e;
                see += wt * e * e;
            }
        }
    }
    let var = see / sw - (se / sw).powi(2);
    let predicted_bias = -a_true * sigma * sigma / (var + sigma * sigma);

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut perturbed = clean.values().to_vec();
    for (i, v) in perturbed.iter_mut().enumerate() {
        if bbox.contains(i / w, i % w) {
            *v = rng.random_range(-100.0..100.0);
        }
    }
    let base = align_depth(&clean, &reference, &bbox).unwrap();
    let moved = align_depth(&DepthMap::from_values(w, h, perturbed).unwrap(), &reference, &bbox).unwrap();
    let isolated = base.scale.to_bits() == moved.scale.to_bits() && base.shift.to_bits() == moved.shift.to_bits();

    check(
        exact_err <= 1e-9 && within == trials && isolated,
        format!(
            "exact max |Δ| = {exact_err:.1e}; noise on estimate: {within}/{trials} trials within 3 SE \
             (worst {worst_z:.2} SE; mean scale z {mean_za:+.2}, mean scale error {mean_da:+.2e} vs \
             attenuation {predicted_bias:+.2e}); \
             control with noise on reference: {control_within}/{trials}, mean scale z {control_za:+.2}; \
             bbox perturbation bitwise-neutral: {isolated}"
        ),
    )
}

// 5. Placement recovery.

fn placement_recovery() -> Outcome {
    let scene = RadianceField::Composite(vec![
        primitive("kind = \"box\"\ncenter = [0.0, 0.0, -0.05]\nhalf_extents = [8.0, 8.0, 0.05]\ndensity = 60.0\ncolor = [0.55, 0.5, 0.45]"),
        primitive("kind = \"box\"\ncenter = [-3.0, 0.0, 2.0]\nhalf_extents = [0.1, 8.0, 2.0]\ndensity = 60.0\ncolor = [0.3, 0.45, 0.6]"),
    ]);
    let object = RadianceField::Composite(vec![
        sphere([0.0; 3], 1.0, 20.0, [0.85, 0.25, 0.2]).unwrap(),
        sphere([0.6, 0.0, 0.5], 0.45, 20.0, [0.95, 0.85, 0.2]).unwrap(),
    ]);
    let cam = CameraModel::look_at(Vec3::new(5.0, 0.0, 2.0), Vec3::new(0.0, 0.0, 1.5), 120.0, 128, 128)
        .unwrap()
        .with_clip(0.5, 12.0)
        .unwrap();
    let bbox = BBox2D::new(14, 14, 100, 100).unwrap();
    let intr = ReconstructorIntrinsics {
        canonical_distance: 2.5,
        canonical_focal: 0.2,
        anchor_offset: 1.0,
    };
    let problem = PlacementProblem {
        scene: &scene,
        object: &object,
        clip: BoundingBox3D::cube(1.2).unwrap(),
        camera: &cam,
        bbox,
        sampling: SamplingConfig::with_samples(96),
    };
    let opts = OptimizerConfig::default();
    let crop = problem.objective_crop(opts.crop_dilation);
    let (s_true, r_true) = (1.0, 3.2);
    let target = problem.render_crop(&crop, s_true, r_true).unwrap();
    let d = r_true - s_true * intr.anchor_offset;

    let mut ok = crop.width == 128 && crop.height == 128;
    let mut lines = vec![format!("crop {}x{}", crop.width, crop.height)];
    for factor in [0.7, 1.3] {
        let s0 = factor * s_true;
        let est =
            optimize_scale_distance(&problem, &target, d, &intr, (s0, s0 * intr.anchor_offset + d), &opts).unwrap();
        let (es, er) = (est.scale / s_true - 1.0, est.distance / r_true - 1.0);
        ok &= es.abs() <= 0.02 && er.abs() <= 0.02;
        lines.push(format!(
            "init x{factor}: s err {:+.3}%, r err {:+.3}% ({} evals)",
            100.0 * es,
            100.0 * er,
            est.iterations
        ));
    }
    check(ok, lines.join("; "))
}

// 6. Inpainting scheduler.

/// Straightforward enumeration of the scheduler's actions: one reverse step
/// per level, each followed by its blend, then `steps` jumps of
/// `jump_length` levels forward and back down whenever the jump stays
/// within the schedule.
fn reference_trace(total: usize, jump: usize, steps: usize, floor: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut t = total;
    while t > 0 {
        out.push(format!("{} {} denoise", t, t - 1));
        out.push(format!("{} {} blend", t - 1, t - 1));
        let level = t - 1;
        if level >= floor && level + jump <= total {
            for _ in 0..steps {
                out.push(format!("{} {} renoise", level, level + jump));
                for k in (level + 1..=level + jump).rev() {
                    out.push(format!("{} {} denoise", k, k - 1));
                    out.push(format!("{} {} blend", k - 1, k - 1));
                }
            }
        }
        t -= 1;
    }
    out
}

fn repaint_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut preserved = 0;
    let triples = 50;
    for trial in 0..triples {
        let (w, h) = (rng.random_range(3..12), rng.random_range(3..12));
        let x0 = standard_normal_image(w, h, &mut rng);
        let p = rng.random_range(0.0..1.0);
        let bits = (0..w * h).map(|_| rng.random_bool(p)).collect();
        let mask = Mask::from_bits(w, h, bits).unwrap();
        let total = rng.random_range(1..25);
        let schedule = NoiseSchedule::ddpm(total).unwrap();
        let cfg = RepaintConfig {
            jump_length: rng.random_range(1..5),
            steps: rng.random_range(1..4),
            seed: rng.random(),
            resample_floor: rng.random_range(0..2),
        };
        let out = if trial % 2 == 0 {
            repaint_inpaint(&NoiseDenoiser, &x0, &mask, &schedule, &cfg).unwrap()
        } else {
            let target = standard_normal_image(w, h, &mut rng);
            repaint_inpaint(
                &TargetDenoiser {
                    target,
                    schedule: schedule.clone(),
                },
                &x0,
                &mask,
                &schedule,
                &cfg,
            )
            .unwrap()
        };
        let same = (0..w * h).all(|i| {
            mask.bits()[i]
                || out.image.pixels()[i]
                    .iter()
                    .zip(&x0.pixels()[i])
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        });
        if same {
            preserved += 1;
        }
    }

    let total = 50;
    let cfg = RepaintConfig {
        jump_length: 2,
        steps: 2,
        ..RepaintConfig::default()
    };
    let plan: Vec<String> = repaint_plan(total, &cfg)
        .unwrap()
        .iter()
        .map(TraceStep::to_string)
        .collect();
    let x0 = ImageBuffer::filled(4, 4, [0.1, 0.2, 0.3]);
    let executed = repaint_inpaint(
        &NoiseDenoiser,
        &x0,
        &Mask::full(4, 4),
        &NoiseSchedule::ddpm(total).unwrap(),
        &cfg,
    )
    .unwrap()
    .trace;
    let executed: Vec<String> = executed.iter().map(TraceStep::to_string).collect();
    let expected = reference_trace(total, 2, 2, cfg.resample_floor);
    let calls = plan
        .iter()
        .filter(|l| l.ends_with(&StepKind::Denoise.to_string()))
        .count();
    let expected_calls = total + (total - 2) * 2 * 2;
    check(
        preserved == triples && plan == expected && executed == expected && calls == expected_calls,
        format!(
            "{preserved}/{triples} triples preserve outside-mask pixels bitwise; trace (2,2) over T={total}: \
             {} lines, matches reference: {}, denoiser calls {calls} (expected {expected_calls})",
            plan.len(),
            plan == expected && executed == expected
        ),
    )
}

// 7. View ordering.

type ViewCase = ((usize, usize), Vec<(i64, i64)>);

fn view_schedule() -> Outcome {
    let expected: [ViewCase; 3] = [
        ((1, 1), vec![(0, 0)]),
        (
            (4, 2),
            vec![
                (0, 0),
                (0, 1),
                (0, -1),
                (1, 0),
                (1, 1),
                (1, -1),
                (-1, 0),
                (-1, 1),
                (-1, -1),
                (2, 0),
                (2, 1),
                (2, -1),
            ],
        ),
        (
            (6, 3),
            vec![
                (0, 0),
                (0, 1),
                (0, -1),
                (1, 0),
                (1, 1),
                (1, -1),
                (-1, 0),
                (-1, 1),
                (-1, -1),
                (2, 0),
                (2, 1),
                (2, -1),
                (-2, 0),
                (-2, 1),
                (-2, -1),
                (3, 0),
                (3, 1),
                (3, -1),
            ],
        ),
    ];
    let mut ok = true;
    let mut lines = Vec::new();
    for ((n, m), want) in &expected {
        let got = order_views(*n, *m);
        let step = 360.0 / *n as f64;
        let angles = view_angles(*n, *m, step, 30.0);
        let frontal = got.first() == Some(&(0, 0)) && angles.first() == Some(&(0.0, 0.0));
        ok &= got == *want && frontal && angles.len() == want.len();
        lines.push(format!("({n},{m}): {} views, match {}", got.len(), got == *want));
    }
    check(ok, lines.join("; "))
}

// 8. Grid fitting.

fn refinement_fitting() -> Outcome {
    let truth = sphere([0.0; 3], 0.5, 10.0, [0.9, 0.4, 0.15]).unwrap();
    let bounds = BoundingBox3D::cube(0.75).unwrap();
    let placement = ObjectPlacement::axis_aligned(Vec3::zeros(), 1.0).unwrap();
    let sampling = SamplingConfig::with_samples(64);
    let mut schedule = ViewSchedule::new(45.0, 25.0, 8, 2, 3.0, Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)).unwrap();
    schedule.views = view_angles(8, 2, 45.0, 25.0)
        .into_iter()
        .filter(|(_, e)| *e != 0.0)
        .collect();
    let views: Vec<TrainingView> = sample_refinement_cameras(&schedule, 40.0, 32, 32)
        .unwrap()
        .into_iter()
        .map(|c| {
            let camera = c.with_clip(1.5, 4.5).unwrap();
            TrainingView {
                image: render_image(&truth, &camera, &sampling).unwrap().color,
                mask: footprint_mask(&placement, &bounds, &camera),
                camera,
            }
        })
        .collect();
    let ctx = FitContext {
        scene: &RadianceField::Empty,
        placement: &placement,
        clip: None,
        sampling: &sampling,
        scaling: DensityScaling::Corrected,
    };
    let budget = 100;
    let trainable = TrainableGrid {
        grid: constant_grid(32, bounds, 1.0, [0.5; 3]).unwrap(),
        density_lr: 1e5,
        color_lr: 1e4,
        iterations: budget,
    };
    let (fitted, report) = fit_grid_to_views(&trainable, &ctx, &views).map_err(|e| e.to_string())?;
    let mse = masked_view_mse(&ctx, &fitted.grid, &views).unwrap();
    let fit_db = psnr(mse);

    // Identity refiner over a scene with an inserted object.
    let scene = primitive("kind = \"box\"\ncenter = [-1.5, 0.0, 0.5]\nhalf_extents = [0.2, 3.0, 1.5]\ndensity = 30.0\ncolor = [0.3, 0.5, 0.7]");
    let object = sphere([0.0; 3], 0.5, 12.0, [0.8, 0.3, 0.2]).unwrap();
    let placed = ObjectPlacement::axis_aligned(Vec3::new(0.0, 0.0, 0.5), 0.6).unwrap();
    let clip = BoundingBox3D::cube(0.75).unwrap();
    let reference = CameraModel::look_at(Vec3::new(3.0, 0.0, 0.9), Vec3::new(0.0, 0.0, 0.5), 40.0, 32, 32)
        .unwrap()
        .with_clip(1.0, 6.0)
        .unwrap();
    let cfg = RefineConfig {
        resolution: 20,
        iterations_per_view: 4,
        ..RefineConfig::default()
    };
    let inputs = RefineInputs {
        scene: &scene,
        object: &object,
        placement: &placed,
        clip: &clip,
        reference: &reference,
        sampling: &sampling,
    };
    let out = refine_loop(&inputs, &IdentityRefiner, &cfg).map_err(|e| e.to_string())?;
    let initial = voxelize(&object, [cfg.resolution; 3], clip).unwrap();
    let mut drift: f64 = 0.0;
    for v in &out.views {
        let render = |grid| {
            render_view(&v.camera, |ray| {
                render_fused_ray_with(
                    &scene,
                    grid,
                    &placed,
                    Some(&clip),
                    ray,
                    &sampling,
                    DensityScaling::Corrected,
                )
            })
            .color
        };
        drift = drift.max(max_diff(&render(&initial), &render(&out.grid)));
    }
    check(
        fit_db >= 25.0 && drift <= 1e-2,
        format!(
            "32^3 grid, {} views, {budget} iterations: masked PSNR {:.1} -> {fit_db:.1} dB; identity loop max drift {drift:.1e}",
            views.len(),
            psnr(report.initial_mse)
        ),
    )
}

// 9. End-to-end determinism.

fn determinism() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/golden.toml");
    let cfg = SceneConfig::load(config).map_err(|e| e.to_string())?;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = cmd_insert(&cfg, a.path(), None).map_err(|e| e.to_string())?;
    let mb = cmd_insert(&cfg, b.path(), None).map_err(|e| e.to_string())?;
    let mut names: Vec<String> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(a.path().join(n)).ok() != std::fs::read(b.path().join(n)).ok())
        .collect();
    let manifests_equal = ma == mb
        && std::fs::read(a.path().join("manifest.json")).unwrap()
            == std::fs::read(b.path().join("manifest.json")).unwrap();
    check(
        differing.is_empty() && manifests_equal && !names.is_empty(),
        format!(
            "{} PNGs, {} differ; manifests identical: {manifests_equal}",
            names.len(),
            differing.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: [Criterion; 9] = [
        ("quadrature", quadrature, Duration::from_secs(5)),
        ("fusion identity", fusion_identity, Duration::from_secs(5)),
        ("scale correction", scale_correction, Duration::from_secs(120)),
        ("depth alignment", depth_alignment, Duration::from_secs(10)),
        ("placement recovery", placement_recovery, Duration::from_secs(60)),
        ("repaint contract", repaint_contract, Duration::from_secs(10)),
        ("refinement schedule", view_schedule, Duration::from_secs(1)),
        ("refinement fitting", refinement_fitting, Duration::from_secs(180)),
        ("end-to-end determinism", determinism, Duration::from_secs(120)),
    ];
    let mut failures = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= *limit;
        let (passed, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        if !passed {
            failures += 1;
        }
        println!(
            "[{}] {}. {name}: {detail} ({:.2} s, limit {} s{})",
            if passed { "PASS" } else { "FAIL" },
            i + 1,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over time" }
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
