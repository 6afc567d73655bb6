//! Radiance fields: queryable maps from a 3D point to density and color.
//!
//! Fields are immutable once built. Every query outside a field's declared
//! region returns [`FieldSample::EMPTY`], so composition never has to special
//! case out-of-range points.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::VoxelGrid;

pub type Vec3 = Vector3<f64>;
pub type Rgb = [f64; 3];

pub const BLACK: Rgb = [0.0; 3];

/// Density (per unit world length) and color at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub density: f64,
    pub color: Rgb,
}

impl FieldSample {
    pub const EMPTY: FieldSample = FieldSample {
        density: 0.0,
        color: BLACK,
    };

    pub fn new(density: f64, color: Rgb) -> Result<Self> {
        validate_density(density)?;
        validate_color(color)?;
        Ok(Self { density, color })
    }

    pub fn is_valid(&self) -> bool {
        self.density.is_finite() && self.density >= 0.0 && self.color.iter().all(|c| (0.0..=1.0).contains(c))
    }
}

fn validate_density(density: f64) -> Result<()> {
    if !density.is_finite() || density < 0.0 {
        return Err(Error::InvalidField(format!(
            "density must be finite and nonnegative, got {density}"
        )));
    }
    Ok(())
}

fn validate_color(color: Rgb) -> Result<()> {
    if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::InvalidField(format!(
            "color channels must lie in [0, 1], got {color:?}"
        )));
    }
    Ok(())
}

fn validate_point(name: &str, p: [f64; 3]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidField(format!("{name} must be finite, got {p:?}")));
    }
    Ok(())
}

/// Axis-aligned box in a field's local coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox3D {
    pub min: Vec3,
    pub max: Vec3,
}

impl BoundingBox3D {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if min.iter().chain(max.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("bounding box corners must be finite".into()));
        }
        if (0..3).any(|i| min[i] > max[i]) {
            return Err(Error::InvalidGeometry(format!(
                "bounding box min {:?} exceeds max {:?}",
                min.as_slice(),
                max.as_slice()
            )));
        }
        Ok(Self { min, max })
    }

    pub fn centered(center: Vec3, half_extents: Vec3) -> Result<Self> {
        Self::new(center - half_extents, center + half_extents)
    }

    pub fn cube(half: f64) -> Result<Self> {
        Self::centered(Vec3::zeros(), Vec3::repeat(half))
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Half-open containment, `min <= p < max`. Used by voxel grids so the
    /// max corner itself counts as outside.
    pub fn contains_half_open(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] < self.max[i])
    }
}

pub trait Field: Sync {
    fn query(&self, p: &Vec3) -> FieldSample;
}

impl<F: Field + ?Sized> Field for &F {
    fn query(&self, p: &Vec3) -> FieldSample {
        (**self).query(p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub density: f64,
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxPrimitive {
    pub center: Vec3,
    pub half_extents: Vec3,
    pub density: f64,
    pub color: Rgb,
}

/// Isotropic Gaussian density bump, truncated at [`GaussianBlob::CUTOFF`]
/// standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBlob {
    pub center: Vec3,
    pub stddev: f64,
    pub peak: f64,
    pub color: Rgb,
}

impl GaussianBlob {
    pub const CUTOFF: f64 = 5.0;
}

#[derive(Clone, Debug, PartialEq)]
pub enum RadianceField {
    Empty,
    Sphere(Sphere),
    Box(BoxPrimitive),
    Gaussian(GaussianBlob),
    Voxel(VoxelGrid),
    /// Several fields occupying the same space. Densities add and colors are
    /// density-weighted.
    Composite(Vec<RadianceField>),
}

impl RadianceField {
    /// Region outside of which the field is guaranteed empty, if bounded.
    pub fn bounds(&self) -> Option<BoundingBox3D> {
        match self {
            RadianceField::Empty => None,
            RadianceField::Sphere(s) => BoundingBox3D::centered(s.center, Vec3::repeat(s.radius)).ok(),
            RadianceField::Box(b) => BoundingBox3D::centered(b.center, b.half_extents).ok(),
            RadianceField::Gaussian(g) => {
                BoundingBox3D::centered(g.center, Vec3::repeat(GaussianBlob::CUTOFF * g.stddev)).ok()
            }
            RadianceField::Voxel(v) => Some(*v.bounds()),
            RadianceField::Composite(parts) => {
                let mut acc: Option<BoundingBox3D> = None;
                for b in parts.iter().filter_map(|f| f.bounds()) {
                    acc = Some(match acc {
                        None => b,
                        Some(a) => BoundingBox3D {
                            min: a.min.inf(&b.min),
                            max: a.max.sup(&b.max),
                        },
                    });
                }
                acc
            }
        }
    }
}

impl Field for RadianceField {
    fn query(&self, p: &Vec3) -> FieldSample {
        match self {
            RadianceField::Empty => FieldSample::EMPTY,
            RadianceField::Sphere(s) => {
                if (p - s.center).norm_squared() <= s.radius * s.radius {
                    FieldSample {
                        density: s.density,
                        color: s.color,
                    }
                } else {
                    FieldSample::EMPTY
                }
            }
            RadianceField::Box(b) => {
                let d = p - b.center;
                if (0..3).all(|i| d[i].abs() <= b.half_extents[i]) {
                    FieldSample {
                        density: b.density,
                        color: b.color,
                    }
                } else {
                    FieldSample::EMPTY
                }
            }
            RadianceField::Gaussian(g) => {
                let r2 = (p - g.center).norm_squared() / (g.stddev * g.stddev);
                if r2 <= GaussianBlob::CUTOFF * GaussianBlob::CUTOFF {
                    FieldSample {
                        density: g.peak * (-0.5 * r2).exp(),
                        color: g.color,
                    }
                } else {
                    FieldSample::EMPTY
                }
            }
            RadianceField::Voxel(v) => v.query(p),
            RadianceField::Composite(parts) => {
                let mut density = 0.0;
                let mut weighted = [0.0; 3];
                for s in parts.iter().map(|f| f.query(p)) {
                    density += s.density;
                    for c in 0..3 {
                        weighted[c] += s.density * s.color[c];
                    }
                }
                if density > 0.0 {
                    FieldSample {
                        density,
                        color: weighted.map(|w| (w / density).clamp(0.0, 1.0)),
                    }
                } else {
                    FieldSample::EMPTY
                }
            }
        }
    }
}

/// Parameters for an analytic primitive, as written in scene configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrimitiveSpec {
    Sphere {
        center: [f64; 3],
        radius: f64,
        density: f64,
        color: Rgb,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        density: f64,
        color: Rgb,
    },
    Gaussian {
        center: [f64; 3],
        stddev: f64,
        peak: f64,
        color: Rgb,
    },
}

pub fn make_primitive(spec: &PrimitiveSpec) -> Result<RadianceField> {
    match *spec {
        PrimitiveSpec::Sphere {
            center,
            radius,
            density,
            color,
        } => {
            validate_point("center", center)?;
            if !(radius > 0.0 && radius.is_finite()) {
                return Err(Error::InvalidField(format!(
                    "sphere radius must be positive, got {radius}"
                )));
            }
            validate_density(density)?;
            validate_color(color)?;
            Ok(RadianceField::Sphere(Sphere {
                center: center.into(),
                radius,
                density,
                color,
            }))
        }
        PrimitiveSpec::Box {
            center,
            half_extents,
            density,
            color,
        } => {
            validate_point("center", center)?;
            if half_extents.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
                return Err(Error::InvalidField(format!(
                    "box half-extents must be positive, got {half_extents:?}"
                )));
            }
            validate_density(density)?;
            validate_color(color)?;
            Ok(RadianceField::Box(BoxPrimitive {
                center: center.into(),
                half_extents: half_extents.into(),
                density,
                color,
            }))
        }
        PrimitiveSpec::Gaussian {
            center,
            stddev,
            peak,
            color,
        } => {
            validate_point("center", center)?;
            if !(stddev > 0.0 && stddev.is_finite()) {
                return Err(Error::InvalidField(format!(
                    "gaussian stddev must be positive, got {stddev}"
                )));
            }
            validate_density(peak)?;
            validate_color(color)?;
            Ok(RadianceField::Gaussian(GaussianBlob {
                center: center.into(),
                stddev,
                peak,
                color,
            }))
        }
    }
}

pub fn sphere(center: [f64; 3], radius: f64, density: f64, color: Rgb) -> Result<RadianceField> {
    make_primitive(&PrimitiveSpec::Sphere {
        center,
        radius,
        density,
        color,
    })
}
