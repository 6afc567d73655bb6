//! Mask-conditioned diffusion inpainting schedule with resampling.
//!
//! Reverse steps run from `T` down to `0`. After every denoising step the
//! pixels outside the mask are replaced by the forward-noised original at the
//! same noise level. At levels `u` with `floor <= u <= T - jump_length` the
//! blended state is pushed `jump_length` levels back up the forward process
//! and denoised again, `steps` times.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bars[t] = prod_{k <= t} (1 - beta_k)`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `betas[k]` is the variance of the transition from level `k` to `k + 1`.
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("noise schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Betas evenly spaced from `start` to `end`.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("noise schedule needs at least one step".into()));
        }
        let betas = if steps == 1 {
            vec![start]
        } else {
            (0..steps)
                .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::new(betas)
    }

    /// The common DDPM setting scaled to `steps` levels: betas from
    /// `1e-4 * 1000 / T` to `0.02 * 1000 / T`.
    pub fn ddpm(steps: usize) -> Result<Self> {
        let k = 1000.0 / steps.max(1) as f64;
        Self::linear(steps, (1e-4 * k).min(0.5), (0.02 * k).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::StepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }
}

fn map_noisy(x: &ImageBuffer, rng: &mut ChaCha8Rng, f: impl Fn(f64, f64) -> f64) -> ImageBuffer {
    let pixels = x
        .pixels()
        .iter()
        .map(|p| {
            p.map(|v| {
                let e: f64 = StandardNormal.sample(rng);
                f(v, e)
            })
        })
        .collect();
    ImageBuffer::from_pixels(x.width(), x.height(), pixels).expect("same shape")
}

pub fn standard_normal_image(width: usize, height: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    map_noisy(&ImageBuffer::filled(width, height, [0.0; 3]), rng, |_, e| e)
}

/// Sample of `q(x_t | x_0)`: `sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps`. Level 0
/// returns `x_0` unchanged.
pub fn forward_noise(
    x0: &ImageBuffer,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<ImageBuffer> {
    schedule.check(t)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = schedule.alpha_bar(t);
    let (m, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(map_noisy(x0, rng, |v, e| m * v + s * e))
}

pub fn forward_noise_seeded(x0: &ImageBuffer, t: usize, schedule: &NoiseSchedule, seed: u64) -> Result<ImageBuffer> {
    forward_noise(x0, t, schedule, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One forward transition from level `t` to `t + 1`.
pub fn forward_step(x: &ImageBuffer, t: usize, schedule: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<ImageBuffer> {
    schedule.check(t + 1)?;
    let b = schedule.betas[t];
    let (m, s) = ((1.0 - b).sqrt(), b.sqrt());
    Ok(map_noisy(x, rng, |v, e| m * v + s * e))
}

/// Sample of `q(x_to | x_from)` for `to > from`.
pub fn renoise(
    x: &ImageBuffer,
    from: usize,
    to: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<ImageBuffer> {
    schedule.check(to)?;
    if to <= from {
        return Err(Error::InvalidArgument(format!(
            "renoise must move up, got {from} -> {to}"
        )));
    }
    let ratio = schedule.alpha_bar(to) / schedule.alpha_bar(from);
    let (m, s) = (ratio.sqrt(), (1.0 - ratio).sqrt());
    Ok(map_noisy(x, rng, |v, e| m * v + s * e))
}

/// Reverse diffusion step `x_t -> x_{t-1}`.
pub trait Denoiser {
    fn step(&self, x_t: &ImageBuffer, t: usize, rng: &mut ChaCha8Rng) -> Result<ImageBuffer>;
}

/// Deterministic reverse step that assumes the clean image is `target`:
/// the implied noise of `x_t` is carried to level `t - 1`. Lands exactly on
/// `target` at level 0.
#[derive(Clone, Debug)]
pub struct TargetDenoiser {
    pub target: ImageBuffer,
    pub schedule: NoiseSchedule,
}

impl Denoiser for TargetDenoiser {
    fn step(&self, x_t: &ImageBuffer, t: usize, _rng: &mut ChaCha8Rng) -> Result<ImageBuffer> {
        self.schedule.check(t)?;
        if t == 0 {
            return Err(Error::StepOutOfRange {
                t,
                max: self.schedule.steps(),
            });
        }
        if !x_t.same_shape(&self.target) {
            return Err(Error::ShapeMismatch("denoiser input and target differ".into()));
        }
        let (ab, ab_prev) = (self.schedule.alpha_bar(t), self.schedule.alpha_bar(t - 1));
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (ap, sp) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let pixels = x_t
            .pixels()
            .iter()
            .zip(self.target.pixels())
            .map(|(x, y)| {
                std::array::from_fn(|c| {
                    let eps = (x[c] - a * y[c]) / s;
                    ap * y[c] + sp * eps
                })
            })
            .collect();
        ImageBuffer::from_pixels(x_t.width(), x_t.height(), pixels)
    }
}

/// Ignores its input and returns fresh standard normal noise.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoiseDenoiser;

impl Denoiser for NoiseDenoiser {
    fn step(&self, x_t: &ImageBuffer, _t: usize, rng: &mut ChaCha8Rng) -> Result<ImageBuffer> {
        Ok(standard_normal_image(x_t.width(), x_t.height(), rng))
    }
}

/// `(1 - M) * known + M * unknown`, as an exact per-pixel selection.
pub fn blend(known: &ImageBuffer, unknown: &ImageBuffer, mask: &Mask) -> Result<ImageBuffer> {
    if !known.same_shape(unknown) || mask.width() != known.width() || mask.height() != known.height() {
        return Err(Error::ShapeMismatch("blend inputs differ in size".into()));
    }
    let pixels = known
        .pixels()
        .iter()
        .zip(unknown.pixels())
        .zip(mask.bits())
        .map(|((k, u), m)| if *m { *u } else { *k })
        .collect();
    ImageBuffer::from_pixels(known.width(), known.height(), pixels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepaintConfig {
    /// Forward levels per resampling jump.
    pub jump_length: usize,
    /// Resampling repetitions per level.
    pub steps: usize,
    pub seed: u64,
    /// Lowest level after which resampling happens. `1` skips the final
    /// level, `0` resamples there too.
    pub resample_floor: usize,
}

impl Default for RepaintConfig {
    fn default() -> Self {
        Self {
            jump_length: 2,
            steps: 2,
            seed: 0,
            resample_floor: 1,
        }
    }
}

impl RepaintConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jump_length == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument("jump_length and steps must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StepKind {
    Denoise,
    Renoise,
    Blend,
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepKind::Denoise => "denoise",
            StepKind::Renoise => "renoise",
            StepKind::Blend => "blend",
        })
    }
}

/// One scheduler action, printed as `from to kind`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TraceStep {
    pub from: usize,
    pub to: usize,
    pub kind: StepKind,
}

impl fmt::Display for TraceStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.from, self.to, self.kind)
    }
}

/// The full action sequence for `total_steps` levels.
pub fn repaint_plan(total_steps: usize, cfg: &RepaintConfig) -> Result<Vec<TraceStep>> {
    cfg.validate()?;
    let j = cfg.jump_length;
    let mut plan = Vec::new();
    let reverse = |plan: &mut Vec<TraceStep>, t: usize| {
        plan.push(TraceStep {
            from: t,
            to: t - 1,
            kind: StepKind::Denoise,
        });
        plan.push(TraceStep {
            from: t - 1,
            to: t - 1,
            kind: StepKind::Blend,
        });
    };
    for t in (1..=total_steps).rev() {
        reverse(&mut plan, t);
        let u = t - 1;
        if u >= cfg.resample_floor && u + j <= total_steps {
            for _ in 0..cfg.steps {
                plan.push(TraceStep {
                    from: u,
                    to: u + j,
                    kind: StepKind::Renoise,
                });
                for k in (u + 1..=u + j).rev() {
                    reverse(&mut plan, k);
                }
            }
        }
    }
    Ok(plan)
}

#[derive(Clone, Debug)]
pub struct RepaintOutput {
    pub image: ImageBuffer,
    pub trace: Vec<TraceStep>,
}

/// Inpaints the masked region of `x0`. Pixels outside `mask` come back
/// bitwise equal to `x0`.
pub fn repaint_inpaint(
    denoiser: &dyn Denoiser,
    x0: &ImageBuffer,
    mask: &Mask,
    schedule: &NoiseSchedule,
    cfg: &RepaintConfig,
) -> Result<RepaintOutput> {
    if mask.width() != x0.width() || mask.height() != x0.height() {
        return Err(Error::ShapeMismatch("mask and image differ in size".into()));
    }
    let plan = repaint_plan(schedule.steps(), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = standard_normal_image(x0.width(), x0.height(), &mut rng);
    let mut unknown = x.clone();
    let mut trace = Vec::with_capacity(plan.len());
    for step in plan {
        match step.kind {
            StepKind::Denoise => {
                unknown = denoiser.step(&x, step.from, &mut rng)?;
                if !unknown.same_shape(x0) {
                    return Err(Error::ShapeMismatch("denoiser changed the image shape".into()));
                }
            }
            StepKind::Blend => {
                let known = forward_noise(x0, step.to, schedule, &mut rng)?;
                x = blend(&known, &unknown, mask)?;
            }
            StepKind::Renoise => {
                x = renoise(&x, step.from, step.to, schedule, &mut rng)?;
            }
        }
        trace.push(step);
    }
    Ok(RepaintOutput { image: x, trace })
}
