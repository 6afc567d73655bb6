//! Affine alignment of non-metric depth to rendered reference depth.
//!
//! The fit minimizes `Σ (1 - M) W (D_R - a D_E - b)²` over a crop around the
//! bounding box, where `M` marks the box and `W` falls off linearly with the
//! distance from the box center.

use nalgebra::Matrix2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{BBox2D, DepthMap, ImageBuffer, ScalarMap};

/// Relative determinant below which the normal equations count as singular.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Per-side dilation of the bbox when forming the alignment crop, as a
/// fraction of the box size.
pub const CROP_DILATION: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineDepthFit {
    pub scale: f64,
    pub shift: f64,
    /// Weighted RMS of `D_R - (a D_E + b)` over the fitted pixels.
    pub residual_rms: f64,
    /// Standard errors of `(scale, shift)` assuming i.i.d. residuals.
    pub std_errors: [f64; 2],
    pub pixels: usize,
}

impl AffineDepthFit {
    pub fn apply(&self, depth: &DepthMap) -> DepthMap {
        depth.affine(self.scale, self.shift)
    }
}

/// `W = 1 - dist / z` with `z` the largest center distance in the grid.
/// A single-pixel grid gets weight 1.
pub fn compute_center_weights(height: usize, width: usize, center: (usize, usize)) -> Result<ScalarMap> {
    let (ic, jc) = center;
    if ic >= height || jc >= width {
        return Err(Error::InvalidArgument(format!(
            "center {center:?} outside a {width}x{height} grid"
        )));
    }
    let dist = |i: usize, j: usize| {
        let di = i as f64 - ic as f64;
        let dj = j as f64 - jc as f64;
        (di * di + dj * dj).sqrt()
    };
    // farthest pixel is always a corner
    let z = [(0, 0), (0, width - 1), (height - 1, 0), (height - 1, width - 1)]
        .iter()
        .map(|&(i, j)| dist(i, j))
        .fold(0.0, f64::max);
    let mut values = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            values.push(if z > 0.0 { 1.0 - dist(i, j) / z } else { 1.0 });
        }
    }
    ScalarMap::from_values(width, height, values)
}

/// Weighted least squares for `reference ≈ a * estimated + b`. Entries with
/// nonpositive weight are ignored.
pub fn fit_affine_weighted(estimated: &[f64], reference: &[f64], weights: &[f64]) -> Result<AffineDepthFit> {
    if estimated.len() != reference.len() || estimated.len() != weights.len() {
        return Err(Error::ShapeMismatch("fit inputs differ in length".into()));
    }
    let used = || {
        estimated
            .iter()
            .zip(reference)
            .zip(weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|((e, r), w)| (*e, *r, *w))
    };
    let (mut sw, mut se, mut sr, mut see) = (0.0, 0.0, 0.0, 0.0);
    let mut n = 0usize;
    for (e, r, w) in used() {
        sw += w;
        se += w * e;
        sr += w * r;
        see += w * e * e;
        n += 1;
    }
    if n < 2 || sw <= 0.0 {
        return Err(Error::DegenerateFit(0.0));
    }
    let e_mean = se / sw;
    let r_mean = sr / sw;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (e, r, w) in used() {
        sxx += w * (e - e_mean) * (e - e_mean);
        sxy += w * (e - e_mean) * (r - r_mean);
    }
    // det of the normal matrix is sw * sxx; normalize by sw * see
    let rel_det = if see > 0.0 { sxx / see } else { 0.0 };
    if !(rel_det > SINGULAR_TOL) {
        return Err(Error::DegenerateFit(rel_det));
    }
    let scale = sxy / sxx;
    let shift = r_mean - scale * e_mean;

    let (mut wres, mut sq_res) = (0.0, 0.0);
    let mut b = Matrix2::zeros();
    for (e, r, w) in used() {
        let res = r - scale * e - shift;
        wres += w * res * res;
        sq_res += res * res;
        let w2 = w * w;
        b += Matrix2::new(w2 * e * e, w2 * e, w2 * e, w2);
    }
    let a = Matrix2::new(see, se, se, sw);
    let std_errors = match a.try_inverse() {
        Some(ai) if n > 2 => {
            let sigma2 = sq_res / (n - 2) as f64;
            let cov = ai * b * ai * sigma2;
            [cov[(0, 0)].max(0.0).sqrt(), cov[(1, 1)].max(0.0).sqrt()]
        }
        _ => [f64::INFINITY; 2],
    };
    Ok(AffineDepthFit {
        scale,
        shift,
        residual_rms: (wres / sw).sqrt(),
        std_errors,
        pixels: n,
    })
}

/// Crop used for alignment: the bbox grown by [`CROP_DILATION`] per side.
pub fn alignment_crop(bbox: &BBox2D, width: usize, height: usize) -> BBox2D {
    bbox.dilate(CROP_DILATION, width, height)
}

/// Fits `D_R ≈ a D_E + b` on the alignment crop, excluding pixels inside
/// `bbox` and pixels invalid in either map.
pub fn align_depth(estimated: &DepthMap, reference: &DepthMap, bbox: &BBox2D) -> Result<AffineDepthFit> {
    let (w, h) = (estimated.width(), estimated.height());
    if reference.width() != w || reference.height() != h {
        return Err(Error::ShapeMismatch(
            "estimated and reference depth differ in size".into(),
        ));
    }
    bbox.check_inside(w, h)?;
    let crop = alignment_crop(bbox, w, h);
    let (ic, jc) = bbox.center();
    let weights = compute_center_weights(crop.height, crop.width, (ic - crop.top, jc - crop.left))?;
    let mut e = Vec::new();
    let mut r = Vec::new();
    let mut wts = Vec::new();
    for row in crop.top..crop.top + crop.height {
        for col in crop.left..crop.left + crop.width {
            if bbox.contains(row, col) || !estimated.is_valid(row, col) || !reference.is_valid(row, col) {
                continue;
            }
            e.push(estimated.get(row, col));
            r.push(reference.get(row, col));
            wts.push(weights.get(row - crop.top, col - crop.left));
        }
    }
    fit_affine_weighted(&e, &r, &wts)
}

/// Aligned depth at the bbox center pixel.
pub fn object_center_depth(aligned: &DepthMap, bbox: &BBox2D) -> Result<f64> {
    bbox.check_inside(aligned.width(), aligned.height())?;
    let (row, col) = bbox.center();
    if !aligned.is_valid(row, col) {
        return Err(Error::InvalidDepth { row, col });
    }
    Ok(aligned.get(row, col))
}

/// Source of monocular (non-metric) depth for an image.
pub trait DepthProvider {
    fn estimate(&self, image: &ImageBuffer) -> Result<DepthMap>;
}

/// Returns a known depth map distorted by `scale * d + shift` plus Gaussian
/// noise, ignoring the image content.
#[derive(Clone, Debug)]
pub struct AffineNoiseDepthProvider {
    pub truth: DepthMap,
    pub scale: f64,
    pub shift: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl DepthProvider for AffineNoiseDepthProvider {
    fn estimate(&self, image: &ImageBuffer) -> Result<DepthMap> {
        if image.width() != self.truth.width() || image.height() != self.truth.height() {
            return Err(Error::ShapeMismatch("image and depth provider sizes differ".into()));
        }
        let normal = Normal::new(0.0, self.noise_std.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let values = self
            .truth
            .values()
            .iter()
            .map(|d| {
                let noise = if self.noise_std > 0.0 {
                    normal.sample(&mut rng)
                } else {
                    0.0
                };
                self.scale * d + self.shift + noise
            })
            .collect();
        DepthMap::with_validity(
            self.truth.width(),
            self.truth.height(),
            values,
            self.truth.validity().to_vec(),
        )
    }
}
