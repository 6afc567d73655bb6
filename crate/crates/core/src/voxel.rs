//! Dense voxel grid with samples at voxel centers and trilinear interpolation.
//!
//! Binary layout (little endian): `u32 nx, ny, nz`, `f32 min_x, min_y, min_z,
//! max_x, max_y, max_z`, then `nx*ny*nz` records of `f32 density, r, g, b`
//! with x varying fastest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{BoundingBox3D, Field, FieldSample, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    resolution: [usize; 3],
    bounds: BoundingBox3D,
    samples: Vec<FieldSample>,
}

/// The eight grid samples (flat index, weight) blended for one query.
pub type Stencil = [(usize, f64); 8];

pub fn make_voxel_grid(resolution: [usize; 3], samples: Vec<FieldSample>, bounds: BoundingBox3D) -> Result<VoxelGrid> {
    if resolution.contains(&0) {
        return Err(Error::InvalidField(format!(
            "voxel resolution must be positive, got {resolution:?}"
        )));
    }
    if (0..3).any(|i| bounds.min[i] >= bounds.max[i]) {
        return Err(Error::InvalidField("voxel bounds must have positive extent".into()));
    }
    let expected = resolution.iter().product();
    if samples.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: samples.len(),
        });
    }
    if let Some(bad) = samples.iter().position(|s| !s.is_valid()) {
        return Err(Error::InvalidField(format!(
            "sample {bad} is not a valid field sample: {:?}",
            samples[bad]
        )));
    }
    Ok(VoxelGrid {
        resolution,
        bounds,
        samples,
    })
}

/// Samples `field` at the voxel centers of a grid covering `bounds`.
pub fn voxelize<F: Field + ?Sized>(field: &F, resolution: [usize; 3], bounds: BoundingBox3D) -> Result<VoxelGrid> {
    let [nx, ny, nz] = resolution;
    let mut samples = Vec::with_capacity(nx * ny * nz);
    let size = bounds
        .extent()
        .component_div(&Vec3::new(nx as f64, ny as f64, nz as f64));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = bounds.min
                    + Vec3::new(
                        (x as f64 + 0.5) * size.x,
                        (y as f64 + 0.5) * size.y,
                        (z as f64 + 0.5) * size.z,
                    );
                samples.push(field.query(&p));
            }
        }
    }
    make_voxel_grid(resolution, samples, bounds)
}

impl VoxelGrid {
    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bounds(&self) -> &BoundingBox3D {
        &self.bounds
    }

    pub fn samples(&self) -> &[FieldSample] {
        &self.samples
    }

    /// Mutable access for fitting. Callers keep samples valid; see
    /// [`VoxelGrid::clamp_samples`].
    pub fn samples_mut(&mut self) -> &mut [FieldSample] {
        &mut self.samples
    }

    pub fn clamp_samples(&mut self) {
        for s in &mut self.samples {
            s.density = if s.density.is_finite() { s.density.max(0.0) } else { 0.0 };
            for c in &mut s.color {
                *c = if c.is_finite() { c.clamp(0.0, 1.0) } else { 0.0 };
            }
        }
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution[0] * (y + self.resolution[1] * z)
    }

    pub fn voxel_size(&self) -> Vec3 {
        let [nx, ny, nz] = self.resolution;
        self.bounds
            .extent()
            .component_div(&Vec3::new(nx as f64, ny as f64, nz as f64))
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let size = self.voxel_size();
        self.bounds.min
            + Vec3::new(
                (x as f64 + 0.5) * size.x,
                (y as f64 + 0.5) * size.y,
                (z as f64 + 0.5) * size.z,
            )
    }

    /// Interpolation stencil at `p`, or `None` outside the half-open bounds.
    pub fn stencil(&self, p: &Vec3) -> Option<Stencil> {
        if !self.bounds.contains_half_open(p) {
            return None;
        }
        let size = self.voxel_size();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for axis in 0..3 {
            let n = self.resolution[axis];
            // continuous index relative to voxel centers, clamped in the
            // outer half voxel
            let c = ((p[axis] - self.bounds.min[axis]) / size[axis] - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (c.floor() as usize).min(n - 1);
            lo[axis] = i0;
            hi[axis] = (i0 + 1).min(n - 1);
            frac[axis] = c - i0 as f64;
        }
        let mut out = [(0usize, 0.0f64); 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let pick = |axis: usize| (k >> axis) & 1 == 1;
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for axis in 0..3 {
                if pick(axis) {
                    idx[axis] = hi[axis];
                    w *= frac[axis];
                } else {
                    idx[axis] = lo[axis];
                    w *= 1.0 - frac[axis];
                }
            }
            *slot = (self.index(idx[0], idx[1], idx[2]), w);
        }
        Some(out)
    }

    pub fn interpolate(&self, stencil: &Stencil) -> FieldSample {
        let mut density = 0.0;
        let mut color = [0.0; 3];
        for &(i, w) in stencil {
            let s = &self.samples[i];
            density += w * s.density;
            for c in 0..3 {
                color[c] += w * s.color[c];
            }
        }
        FieldSample {
            density: density.max(0.0),
            color: color.map(|c| c.clamp(0.0, 1.0)),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for n in self.resolution {
            let n = u32::try_from(n).map_err(|_| Error::InvalidField(format!("resolution {n} exceeds u32")))?;
            w.write_all(&n.to_le_bytes())?;
        }
        for v in self.bounds.min.iter().chain(self.bounds.max.iter()) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        for s in &self.samples {
            for v in [s.density, s.color[0], s.color[1], s.color[2]] {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut u = [0u8; 4];
        let mut resolution = [0usize; 3];
        for n in &mut resolution {
            r.read_exact(&mut u)?;
            *n = u32::from_le_bytes(u) as usize;
        }
        let mut read_f32 = |r: &mut R| -> Result<f64> {
            r.read_exact(&mut u)?;
            Ok(f32::from_le_bytes(u) as f64)
        };
        let mut corners = [0.0; 6];
        for c in &mut corners {
            *c = read_f32(&mut r)?;
        }
        let bounds = BoundingBox3D::new(
            Vec3::new(corners[0], corners[1], corners[2]),
            Vec3::new(corners[3], corners[4], corners[5]),
        )?;
        let count = resolution
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| Error::InvalidField("voxel resolution overflows".into()))?;
        let mut samples = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            let density = read_f32(&mut r)?;
            let color = [read_f32(&mut r)?, read_f32(&mut r)?, read_f32(&mut r)?];
            samples.push(FieldSample { density, color });
        }
        make_voxel_grid(resolution, samples, bounds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

impl Field for VoxelGrid {
    fn query(&self, p: &Vec3) -> FieldSample {
        match self.stencil(p) {
            Some(st) => self.interpolate(&st),
            None => FieldSample::EMPTY,
        }
    }
}
