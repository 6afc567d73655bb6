//! Row-major 2D buffers: color images, scalar maps, depth maps with validity,
//! binary masks and pixel bounding boxes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Rgb;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<Rgb>,
}

impl ImageBuffer {
    pub fn filled(width: usize, height: usize, value: Rgb) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, data: Vec<Rgb>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pixels(&self) -> &[Rgb] {
        &self.data
    }
    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.data
    }
    pub fn into_pixels(self) -> Vec<Rgb> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Rgb {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: Rgb) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn crop(&self, bbox: &BBox2D) -> Result<ImageBuffer> {
        bbox.check_inside(self.width, self.height)?;
        let mut data = Vec::with_capacity(bbox.width * bbox.height);
        for r in bbox.top..bbox.top + bbox.height {
            let start = r * self.width + bbox.left;
            data.extend_from_slice(&self.data[start..start + bbox.width]);
        }
        ImageBuffer::from_pixels(bbox.width, bbox.height, data)
    }

    /// Copies `patch` into this image with its top-left corner at `bbox`.
    pub fn paste(&mut self, patch: &ImageBuffer, bbox: &BBox2D) -> Result<()> {
        bbox.check_inside(self.width, self.height)?;
        if patch.width != bbox.width || patch.height != bbox.height {
            return Err(Error::ShapeMismatch("patch does not match bbox size".into()));
        }
        for r in 0..bbox.height {
            for c in 0..bbox.width {
                self.set(bbox.top + r, bbox.left + c, patch.get(r, c));
            }
        }
        Ok(())
    }

    /// Mean squared error over all channels.
    pub fn mse(&self, other: &ImageBuffer) -> Result<f64> {
        self.masked_mse(other, None)
    }

    /// Mean squared error over all channels of the pixels where `mask` is set
    /// (all pixels when `None`). Returns 0 when nothing is selected.
    pub fn masked_mse(&self, other: &ImageBuffer, mask: Option<&Mask>) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch("images differ in size".into()));
        }
        if let Some(m) = mask {
            if m.width() != self.width || m.height() != self.height {
                return Err(Error::ShapeMismatch("mask differs from image size".into()));
            }
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, (a, b)) in self.data.iter().zip(&other.data).enumerate() {
            if mask.is_some_and(|m| !m.data[i]) {
                continue;
            }
            for c in 0..3 {
                sum += (a[c] - b[c]).powi(2);
            }
            n += 3;
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }

    pub fn mean_color(&self, mask: Option<&Mask>) -> Rgb {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for (i, p) in self.data.iter().enumerate() {
            if mask.is_some_and(|m| !m.data[i]) {
                continue;
            }
            for c in 0..3 {
                acc[c] += p[c];
            }
            n += 1;
        }
        if n == 0 {
            return [0.0; 3];
        }
        acc.map(|v| v / n as f64)
    }
}

/// PSNR in dB for signals in [0, 1].
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} map",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn values(&self) -> &[f64] {
        &self.data
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }
}

/// Scalar depth per pixel plus a validity flag. Invalid entries never enter
/// any sum.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Entries are valid exactly when finite.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|v| v.is_finite()).collect();
        Self::with_validity(width, height, values, valid)
    }

    pub fn with_validity(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "depth map of {width}x{height} needs {} entries",
                width * height
            )));
        }
        let valid = valid
            .into_iter()
            .zip(&values)
            .map(|(ok, v)| ok && v.is_finite())
            .collect();
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn validity(&self) -> &[bool] {
        &self.valid
    }
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    /// Elementwise `a * d + b`, preserving validity.
    pub fn affine(&self, a: f64, b: f64) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| a * v + b).collect(),
            valid: self.valid.clone(),
        }
    }

    pub fn crop(&self, bbox: &BBox2D) -> Result<DepthMap> {
        bbox.check_inside(self.width, self.height)?;
        let mut values = Vec::with_capacity(bbox.width * bbox.height);
        let mut valid = Vec::with_capacity(bbox.width * bbox.height);
        for r in bbox.top..bbox.top + bbox.height {
            let start = r * self.width + bbox.left;
            values.extend_from_slice(&self.values[start..start + bbox.width]);
            valid.extend_from_slice(&self.valid[start..start + bbox.width]);
        }
        DepthMap::with_validity(bbox.width, bbox.height, values, valid)
    }
}

impl From<ScalarMap> for DepthMap {
    fn from(m: ScalarMap) -> Self {
        let valid = m.data.iter().map(|v| v.is_finite()).collect();
        DepthMap {
            width: m.width,
            height: m.height,
            values: m.data,
            valid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} mask bits for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_bbox(width: usize, height: usize, bbox: &BBox2D) -> Result<Self> {
        bbox.check_inside(width, height)?;
        let mut m = Self::empty(width, height);
        for r in bbox.top..bbox.top + bbox.height {
            for c in bbox.left..bbox.left + bbox.width {
                m.data[r * width + c] = true;
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn bits(&self) -> &[bool] {
        &self.data
    }
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }
    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// Mean (row, col) of set pixels.
    pub fn centroid(&self) -> Option<[f64; 2]> {
        let mut acc = [0.0; 2];
        let mut n = 0usize;
        for (i, _) in self.data.iter().enumerate().filter(|(_, b)| **b) {
            acc[0] += (i / self.width) as f64;
            acc[1] += (i % self.width) as f64;
            n += 1;
        }
        (n > 0).then(|| [acc[0] / n as f64, acc[1] / n as f64])
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch("masks differ in size".into()));
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }
}

/// Pixel rectangle given by its top-left corner and size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox2D {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BBox2D {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("bbox height and width must be >= 1".into()));
        }
        Ok(Self {
            top,
            left,
            height,
            width,
        })
    }

    pub fn check_inside(&self, width: usize, height: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.top + self.height > height || self.left + self.width > width {
            return Err(Error::InvalidArgument(format!(
                "bbox {self:?} is not inside a {width}x{height} image"
            )));
        }
        Ok(())
    }

    /// Center pixel `(row, col)`.
    pub fn center(&self) -> (usize, usize) {
        (self.top + self.height / 2, self.left + self.width / 2)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }

    /// Grows each side by `fraction` of the box size (rounded up), clamped to
    /// the image.
    pub fn dilate(&self, fraction: f64, image_width: usize, image_height: usize) -> BBox2D {
        let pad_r = (self.height as f64 * fraction).ceil() as usize;
        let pad_c = (self.width as f64 * fraction).ceil() as usize;
        let top = self.top.saturating_sub(pad_r);
        let left = self.left.saturating_sub(pad_c);
        let bottom = (self.top + self.height + pad_r).min(image_height);
        let right = (self.left + self.width + pad_c).min(image_width);
        BBox2D {
            top,
            left,
            height: bottom - top,
            width: right - left,
        }
    }
}
