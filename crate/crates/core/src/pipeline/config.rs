//! Declarative run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{make_primitive, BoundingBox3D, PrimitiveSpec, RadianceField, Vec3};
use crate::geometry::CameraModel;
use crate::image::BBox2D;
use crate::placement::{OptimizerConfig, ReconstructorIntrinsics};
use crate::refine::{IdentityRefiner, RefineConfig, Refiner2D, TintRefiner};
use crate::render::SamplingConfig;
use crate::repaint::RepaintConfig;
use crate::voxel::VoxelGrid;

/// Primitives and an optional voxel file, summed into one field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    #[serde(default)]
    pub primitives: Vec<PrimitiveSpec>,
    #[serde(default)]
    pub voxel: Option<PathBuf>,
}

impl FieldConfig {
    pub fn build(&self) -> Result<RadianceField> {
        let mut parts = self.primitives.iter().map(make_primitive).collect::<Result<Vec<_>>>()?;
        if let Some(path) = &self.voxel {
            parts.push(RadianceField::Voxel(VoxelGrid::load(path)?));
        }
        Ok(match parts.len() {
            0 => RadianceField::Empty,
            1 => parts.pop().expect("one part"),
            _ => RadianceField::Composite(parts),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    /// Object field in its own canonical frame.
    pub field: FieldConfig,
    /// Object-space box outside which object density is dropped. Defaults
    /// to the field's own bounds.
    #[serde(default)]
    pub clip: Option<ClipConfig>,
    pub intrinsics: ReconstructorIntrinsics,
}

impl ObjectConfig {
    pub fn clip_box(&self, field: &RadianceField) -> Result<BoundingBox3D> {
        match &self.clip {
            Some(c) => BoundingBox3D::new(Vec3::from(c.min), Vec3::from(c.max)),
            None => field
                .bounds()
                .ok_or_else(|| Error::Config("object field is unbounded; set object.clip".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    /// Focal length in pixels.
    pub focal: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
}

fn default_near() -> f64 {
    CameraModel::DEFAULT_NEAR
}

fn default_far() -> f64 {
    CameraModel::DEFAULT_FAR
}

impl CameraConfig {
    pub fn build(&self) -> Result<CameraModel> {
        CameraModel::look_at(
            Vec3::from(self.eye),
            Vec3::from(self.target),
            self.focal,
            self.width,
            self.height,
        )?
        .with_clip(self.near, self.far)
    }
}

/// Known placement used to synthesize the 2D edit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub scale: f64,
    pub distance: f64,
}

/// Stand-in for the text-driven 2D edit of the reference view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum EditConfig {
    /// Paste the bbox region of a fused render at the `truth` placement.
    #[default]
    Composite,
    /// Paste an image file into the bbox. The image is either bbox-sized or
    /// full-frame. `depth` optionally gives a full-frame PFM depth of the
    /// edited view.
    Paste {
        image: PathBuf,
        #[serde(default)]
        depth: Option<PathBuf>,
    },
    /// Inpaint the bbox with the diffusion scheduler and a denoiser that
    /// steers toward the `truth` composite.
    Repaint,
}

/// Affine distortion and noise applied by the stand-in monocular depth
/// estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthConfig {
    pub scale: f64,
    pub shift: f64,
    pub noise_std: f64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            scale: 0.5,
            shift: 1.0,
            noise_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepaintSection {
    /// Diffusion levels `T`.
    pub total_steps: usize,
    #[serde(flatten)]
    pub schedule: RepaintConfig,
}

impl Default for RepaintSection {
    fn default() -> Self {
        Self {
            total_steps: 50,
            schedule: RepaintConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum RefinerSpec {
    #[default]
    Identity,
    Tint {
        tint: [f64; 3],
        strength: f64,
    },
}

impl RefinerSpec {
    pub fn build(&self) -> Box<dyn Refiner2D> {
        match *self {
            RefinerSpec::Identity => Box::new(IdentityRefiner),
            RefinerSpec::Tint { tint, strength } => Box::new(TintRefiner { tint, strength }),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineSection {
    #[serde(flatten)]
    pub schedule: RefineConfig,
    pub refiner: RefinerSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub camera: CameraConfig,
    pub bbox: BBox2D,
    #[serde(default)]
    pub scene: FieldConfig,
    #[serde(default)]
    pub object: Option<ObjectConfig>,
    #[serde(default)]
    pub truth: Option<TruthConfig>,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub edit: EditConfig,
    #[serde(default)]
    pub depth: DepthConfig,
    #[serde(default)]
    pub placement: OptimizerConfig,
    #[serde(default)]
    pub repaint: RepaintSection,
    #[serde(default)]
    pub refine: RefineSection,
    /// Extra `(azimuth, elevation)` views in degrees around the placed
    /// object, rendered after fusion.
    #[serde(default)]
    pub views: Vec<(f64, f64)>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl SceneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(v) = cfg.scene.voxel.as_mut() {
            resolve(base, v);
        }
        if let Some(o) = cfg.object.as_mut() {
            if let Some(v) = o.field.voxel.as_mut() {
                resolve(base, v);
            }
        }
        if let EditConfig::Paste { image, depth } = &mut cfg.edit {
            resolve(base, image);
            if let Some(d) = depth {
                resolve(base, d);
            }
        }
        if let Some(o) = cfg.output_dir.as_mut() {
            resolve(base, o);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything the render stage needs.
    pub fn validate_render(&self) -> Result<()> {
        self.sampling.validate()?;
        let cam = self.camera.build()?;
        self.bbox.check_inside(cam.width(), cam.height())?;
        self.scene.build()?;
        Ok(())
    }

    /// Checks everything an insertion run needs.
    pub fn validate_insert(&self) -> Result<()> {
        self.validate_render()?;
        let object = self
            .object
            .as_ref()
            .ok_or_else(|| Error::Config("insertion needs an [object] section".into()))?;
        object.intrinsics.validate()?;
        object.clip_box(&object.field.build()?)?;
        match &self.edit {
            EditConfig::Composite | EditConfig::Repaint if self.truth.is_none() => {
                return Err(Error::Config(
                    "edit modes `composite` and `repaint` need a [truth] section".into(),
                ));
            }
            EditConfig::Paste { image, .. } if !image.exists() => {
                return Err(Error::Config(format!("edit image {} does not exist", image.display())));
            }
            _ => {}
        }
        if let Some(t) = &self.truth {
            if !(t.scale > 0.0 && t.distance > 0.0) {
                return Err(Error::Config("truth scale and distance must be positive".into()));
            }
        }
        self.repaint.schedule.validate()?;
        Ok(())
    }
}
