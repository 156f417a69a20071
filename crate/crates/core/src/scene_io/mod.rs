//! Scene assets: point cloud, optional mesh, posed RGB-D views.
//!
//! Everything downstream indexes into [`PointCloud`]; a [`SceneBundle`] is
//! immutable once loaded and can be shared between threads freely.

mod cache;
mod downsample;
mod manifest;
mod normals;
pub mod ply;

use std::path::PathBuf;

use image::RgbImage;
use nalgebra::{Matrix3, Matrix4, Point3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub(crate) use cache::{get_point as cache_get_point, get_vector as cache_get_vector, put_point as cache_put_point, put_vector as cache_put_vector};
pub use cache::{
    load_scene_cache, read_cache_file, save_scene_cache, write_cache_file, CacheCodec,
    CacheReader, CacheWriter, ArtifactKind, SceneGeometry, CACHE_MAGIC, CACHE_VERSION,
};
pub use downsample::voxel_downsample;
pub use manifest::{load_scene, manifest_inputs, SceneManifest, ViewEntry};
pub use normals::{estimate_normals, fill_invalid_normals, pca_normal};

/// Voxel edge length used when nothing else is configured (meters).
pub const DEFAULT_VOXEL_SIZE: f64 = 0.005;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed manifest at `{field}`: {message}")]
    MalformedManifest { field: String, message: String },
    #[error("view {view}: pose is not a rigid transform ({reason})")]
    InvalidPose { view: String, reason: String },
    #[error("view {view}: invalid intrinsics ({reason})")]
    InvalidIntrinsics { view: String, reason: String },
    #[error("view {view}: rgb is {rgb:?}, depth is {depth:?}, intrinsics say {intrinsics:?}")]
    DimensionMismatch {
        view: String,
        rgb: (u32, u32),
        depth: (u32, u32),
        intrinsics: (u32, u32),
    },
    #[error("{}: {message}", path.display())]
    Ply { path: PathBuf, message: String },
    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("mesh vertex {vertex} is {distance:.4} m from the nearest point (limit {limit:.4} m)")]
    MeshVertexUnmapped {
        vertex: usize,
        distance: f64,
        limit: f64,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("cache was written by format version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt cache: {0}")]
    CorruptCache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Downsampled scene points. Normals that could not be determined are kept
/// (as a zero vector) and flagged in `normal_valid`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point3<f64>>,
    pub colors: Vec<[u8; 3]>,
    pub normals: Vec<Vector3<f64>>,
    pub normal_valid: Vec<bool>,
}

impl PointCloud {
    /// Builds a cloud, renormalizing slightly-off normals and flagging those
    /// that are degenerate. `normals = None` flags every normal invalid.
    pub fn new(
        positions: Vec<Point3<f64>>,
        colors: Vec<[u8; 3]>,
        normals: Option<Vec<Vector3<f64>>>,
    ) -> Result<Self, SceneError> {
        let n = positions.len();
        if colors.len() != n {
            return Err(SceneError::InvalidCloud(format!(
                "{n} positions but {} colors",
                colors.len()
            )));
        }
        if let Some(i) = positions.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(SceneError::InvalidCloud(format!("position {i} is not finite")));
        }
        let (normals, normal_valid) = match normals {
            None => (vec![Vector3::zeros(); n], vec![false; n]),
            Some(normals) => {
                if normals.len() != n {
                    return Err(SceneError::InvalidCloud(format!(
                        "{n} positions but {} normals",
                        normals.len()
                    )));
                }
                normals
                    .into_iter()
                    .map(|v| {
                        let norm = v.norm();
                        if norm.is_finite() && norm > 1e-3 {
                            (v / norm, true)
                        } else {
                            (Vector3::zeros(), false)
                        }
                    })
                    .unzip()
            }
        };
        Ok(Self {
            positions,
            colors,
            normals,
            normal_valid,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn valid_normal_count(&self) -> usize {
        self.normal_valid.iter().filter(|v| **v).count()
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.is_empty() {
            return None;
        }
        let sum = self
            .positions
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.len() as f64))
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let n = self.len();
        if self.colors.len() != n || self.normals.len() != n || self.normal_valid.len() != n {
            return Err(SceneError::InvalidCloud("attribute length mismatch".into()));
        }
        for (i, p) in self.positions.iter().enumerate() {
            if !p.coords.iter().all(|c| c.is_finite()) {
                return Err(SceneError::InvalidCloud(format!("position {i} is not finite")));
            }
        }
        for (i, (nrm, valid)) in self.normals.iter().zip(&self.normal_valid).enumerate() {
            if *valid && (nrm.norm() - 1.0).abs() > 1e-4 {
                return Err(SceneError::InvalidCloud(format!(
                    "normal {i} has norm {}",
                    nrm.norm()
                )));
            }
        }
        Ok(())
    }

    /// Sub-cloud containing the given point indices, in that order.
    pub fn select(&self, indices: &[u32]) -> PointCloud {
        let pick = |i: &u32| *i as usize;
        PointCloud {
            positions: indices.iter().map(|i| self.positions[pick(i)]).collect(),
            colors: indices.iter().map(|i| self.colors[pick(i)]).collect(),
            normals: indices.iter().map(|i| self.normals[pick(i)]).collect(),
            normal_valid: indices.iter().map(|i| self.normal_valid[pick(i)]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    /// Nearest point-cloud index for every vertex.
    pub vertex_to_point: Vec<u32>,
}

impl TriangleMesh {
    /// Validates triangle indices and maps every vertex onto its nearest
    /// cloud point, refusing vertices farther than `max_distance`.
    pub fn new(
        vertices: Vec<Point3<f64>>,
        triangles: Vec<[u32; 3]>,
        cloud: &PointCloud,
        max_distance: f64,
    ) -> Result<Self, SceneError> {
        let mut mesh = Self {
            vertices,
            triangles,
            vertex_to_point: Vec::new(),
        };
        let nv = mesh.vertices.len();
        if let Some(t) = mesh.triangles.iter().find(|t| t.iter().any(|&i| i as usize >= nv)) {
            return Err(SceneError::InvalidArgument(format!(
                "triangle {t:?} references a vertex beyond {nv}"
            )));
        }
        mesh.remap(cloud, max_distance)?;
        Ok(mesh)
    }

    /// Recomputes `vertex_to_point` against a (typically downsampled) cloud.
    pub fn remap(&mut self, cloud: &PointCloud, max_distance: f64) -> Result<(), SceneError> {
        if cloud.is_empty() && !self.vertices.is_empty() {
            return Err(SceneError::InvalidArgument("cannot map a mesh onto an empty cloud".into()));
        }
        let index = crate::spatial::PointIndex::new(&cloud.positions);
        let mapped = crate::par::map(&self.vertices, |v| {
            index.nearest(v).expect("non-empty index")
        });
        let mut vertex_to_point = Vec::with_capacity(mapped.len());
        for (vertex, (point, d2)) in mapped.into_iter().enumerate() {
            let distance = d2.sqrt();
            if distance > max_distance {
                return Err(SceneError::MeshVertexUnmapped {
                    vertex,
                    distance,
                    limit: max_distance,
                });
            }
            vertex_to_point.push(point as u32);
        }
        self.vertex_to_point = vertex_to_point;
        Ok(())
    }

    /// Undirected vertex edges of all triangles.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.triangles
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(format!("focal lengths must be positive, got {} {}", self.fx, self.fy));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            ));
        }
        Ok(())
    }
}

/// Per-pixel camera-frame z distance in meters; `0` marks an invalid pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize, "depth buffer size");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    /// Millimeter-quantized copy, the on-disk 16-bit representation.
    pub fn to_millimeters(&self) -> Vec<u16> {
        self.data
            .iter()
            .map(|d| {
                if d.is_finite() && *d > 0.0 {
                    (f64::from(*d) * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
                } else {
                    0
                }
            })
            .collect()
    }
}

/// One posed RGB-D image. `cam_to_world` maps camera coordinates (x right,
/// y down, z forward) into the scene frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub view_id: String,
    pub intrinsics: Intrinsics,
    pub cam_to_world: Matrix4<f64>,
    world_to_cam: Matrix4<f64>,
    pub rgb: RgbImage,
    pub depth: DepthMap,
}

impl CameraView {
    pub fn new(
        view_id: impl Into<String>,
        intrinsics: Intrinsics,
        cam_to_world: Matrix4<f64>,
        rgb: RgbImage,
        depth: DepthMap,
    ) -> Result<Self, SceneError> {
        let view_id = view_id.into();
        intrinsics
            .validate()
            .map_err(|reason| SceneError::InvalidIntrinsics {
                view: view_id.clone(),
                reason,
            })?;
        let (w, h) = rgb.dimensions();
        if (w, h) != (depth.width, depth.height) || (w, h) != (intrinsics.width, intrinsics.height) {
            return Err(SceneError::DimensionMismatch {
                view: view_id,
                rgb: (w, h),
                depth: (depth.width, depth.height),
                intrinsics: (intrinsics.width, intrinsics.height),
            });
        }
        check_rigid(&cam_to_world).map_err(|reason| SceneError::InvalidPose {
            view: view_id.clone(),
            reason,
        })?;
        Ok(Self {
            world_to_cam: rigid_inverse(&cam_to_world),
            view_id,
            intrinsics,
            cam_to_world,
            rgb,
            depth,
        })
    }

    pub fn world_to_cam(&self) -> &Matrix4<f64> {
        &self.world_to_cam
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::new(
            self.cam_to_world[(0, 3)],
            self.cam_to_world[(1, 3)],
            self.cam_to_world[(2, 3)],
        )
    }

    /// World point seen at pixel `(u, v)` with camera-frame depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Point3<f64> {
        let k = &self.intrinsics;
        let cam = Vector4::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z, 1.0);
        let w = self.cam_to_world * cam;
        Point3::new(w.x, w.y, w.z)
    }
}

/// Checks that `m` is a proper rigid transform: orthonormal rotation block
/// with determinant +1 and an affine bottom row (all within 1e-5).
pub fn check_rigid(m: &Matrix4<f64>) -> Result<(), String> {
    const TOL: f64 = 1e-5;
    if !m.iter().all(|v| v.is_finite()) {
        return Err("non-finite entry".into());
    }
    let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if bottom
        .iter()
        .zip([0.0, 0.0, 0.0, 1.0])
        .any(|(a, b)| (a - b).abs() > TOL)
    {
        return Err(format!("bottom row is {bottom:?}"));
    }
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let gram_err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if gram_err > TOL {
        return Err(format!("rotation block not orthonormal (error {gram_err:.2e})"));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > TOL {
        return Err(format!("rotation determinant is {det}"));
    }
    Ok(())
}

/// Inverse of a rigid transform: `[Rᵀ | -Rᵀt]`.
pub fn rigid_inverse(m: &Matrix4<f64>) -> Matrix4<f64> {
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let t = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    let rt = r.transpose();
    let ti = -(rt * t);
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    out[(0, 3)] = ti.x;
    out[(1, 3)] = ti.y;
    out[(2, 3)] = ti.z;
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub cloud: PointCloud,
    pub mesh: Option<TriangleMesh>,
    /// Sorted by `view_id`.
    pub views: Vec<CameraView>,
    pub voxel_size: f64,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.voxel_size.is_nan() || self.voxel_size <= 0.0 {
            return Err(SceneError::InvalidArgument(format!(
                "voxel size must be positive, got {}",
                self.voxel_size
            )));
        }
        self.cloud.validate()?;
        if !self.views.windows(2).all(|w| w[0].view_id < w[1].view_id) {
            return Err(SceneError::InvalidArgument("view ids must be unique and sorted".into()));
        }
        Ok(())
    }
}
