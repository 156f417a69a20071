//! A small scene with known geometry and labels: three colored boxes on a
//! gray floor in front of a light wall, seen by a ring of cameras.
//!
//! Every surface is an axis-aligned rectangle, so views are rendered by exact
//! ray casting and every point carries its object label and face id.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::scene_io::{
    ply, CameraView, DepthMap, Intrinsics, PointCloud, SceneBundle, SceneError, SceneManifest, TriangleMesh,
    ViewEntry,
};

pub const FLOOR: u32 = 0;
pub const WALL: u32 = 1;
pub const RED_BOX: u32 = 2;
pub const GREEN_BOX: u32 = 3;
pub const BLUE_BOX: u32 = 4;
pub const LABEL_NAMES: [&str; 5] = ["floor", "wall", "red box", "green box", "blue box"];

pub const FLOOR_COLOR: [u8; 3] = [110, 110, 110];
pub const WALL_COLOR: [u8; 3] = [200, 200, 200];
pub const BACKGROUND_COLOR: [u8; 3] = [0, 0, 0];

pub const BOX_SIZE: f64 = 0.3;
pub const FLOOR_HALF: f64 = 1.5;
pub const WALL_Y: f64 = 1.5;
pub const WALL_HEIGHT: f64 = 1.2;

/// (label, color, footprint center). Box faces stay at least 0.175 m off
/// every plane through a default ring camera, so no face is seen edge-on.
pub const BOXES: [(u32, [u8; 3], [f64; 2]); 3] = [
    (RED_BOX, [200, 30, 30], [-0.325, -0.325]),
    (GREEN_BOX, [30, 170, 40], [0.325, -0.325]),
    (BLUE_BOX, [40, 60, 200], [0.325, 0.325]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub spacing: f64,
    pub n_views: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub look_at: [f64; 3],
    pub with_mesh: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            spacing: 0.02,
            n_views: 12,
            width: 160,
            height: 120,
            focal: 120.0,
            ring_radius: 1.3,
            ring_height: 1.4,
            look_at: [0.0, 0.0, 0.2],
            with_mesh: false,
        }
    }
}

/// Planar rectangle `origin + a·u + b·v` for `a, b ∈ [0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct Rect {
    pub origin: Point3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub label: u32,
    pub face: u32,
    pub color: [u8; 3],
}

impl Rect {
    /// Ray parameter of the hit, if any.
    pub fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = dir.dot(&self.normal);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.origin - origin).dot(&self.normal) / denom;
        if t <= 0.0 {
            return None;
        }
        let local = origin + dir * t - self.origin;
        let a = local.dot(&self.u) / self.u.norm_squared();
        let b = local.dot(&self.v) / self.v.norm_squared();
        ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some(t)
    }
}

/// All surfaces of the scene; face ids equal positions.
pub fn surfaces() -> Vec<Rect> {
    let mut out = Vec::new();
    let mut push = |origin: [f64; 3], u: [f64; 3], v: [f64; 3], normal: [f64; 3], label: u32, color: [u8; 3]| {
        let face = out.len() as u32;
        out.push(Rect {
            origin: Point3::from(origin),
            u: Vector3::from(u),
            v: Vector3::from(v),
            normal: Vector3::from(normal),
            label,
            face,
            color,
        });
    };
    let f = FLOOR_HALF;
    push([-f, -f, 0.0], [2.0 * f, 0.0, 0.0], [0.0, 2.0 * f, 0.0], [0.0, 0.0, 1.0], FLOOR, FLOOR_COLOR);
    push([-f, WALL_Y, 0.0], [2.0 * f, 0.0, 0.0], [0.0, 0.0, WALL_HEIGHT], [0.0, -1.0, 0.0], WALL, WALL_COLOR);
    let s = BOX_SIZE;
    for (label, color, [cx, cy]) in BOXES {
        let (x0, y0) = (cx - s / 2.0, cy - s / 2.0);
        let (x1, y1) = (x0 + s, y0 + s);
        push([x0, y0, s], [s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0], label, color);
        push([x0, y0, 0.0], [s, 0.0, 0.0], [0.0, 0.0, s], [0.0, -1.0, 0.0], label, color);
        push([x0, y1, 0.0], [s, 0.0, 0.0], [0.0, 0.0, s], [0.0, 1.0, 0.0], label, color);
        push([x0, y0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s], [-1.0, 0.0, 0.0], label, color);
        push([x1, y0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s], [1.0, 0.0, 0.0], label, color);
    }
    out
}

/// True if `(x, y)` lies inside a box footprint (closed).
pub fn under_box(x: f64, y: f64) -> bool {
    BOXES.iter().any(|(_, _, [cx, cy])| {
        (x - cx).abs() <= BOX_SIZE / 2.0 && (y - cy).abs() <= BOX_SIZE / 2.0
    })
}

/// Nearest surface hit along a ray.
pub fn cast(rects: &[Rect], origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
    rects
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.intersect(origin, dir).map(|t| (t, i)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
}

/// OpenCV-convention camera at `eye` looking at `target`, +z world up.
pub fn look_at(eye: Point3<f64>, target: Point3<f64>) -> Matrix4<f64> {
    let f = (target - eye).normalize();
    let right = f.cross(&Vector3::z()).normalize();
    let down = f.cross(&right);
    let r = Matrix3::from_columns(&[right, down, f]);
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&eye.coords);
    m
}

pub struct SyntheticScene {
    pub bundle: SceneBundle,
    /// Object label per point (see [`LABEL_NAMES`]).
    pub labels: Vec<u32>,
    /// Surface index per point (see [`surfaces`]).
    pub face_ids: Vec<u32>,
    pub surfaces: Vec<Rect>,
}

impl SyntheticScene {
    pub fn label_count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

fn render(rects: &[Rect], id: String, k: Intrinsics, pose: Matrix4<f64>) -> Result<CameraView, SceneError> {
    let rot = pose.fixed_view::<3, 3>(0, 0).into_owned();
    let eye = Point3::from(pose.fixed_view::<3, 1>(0, 3).into_owned());
    let mut rgb = RgbImage::new(k.width, k.height);
    let mut depth = vec![0f32; (k.width * k.height) as usize];
    for y in 0..k.height {
        for x in 0..k.width {
            let cam_dir = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
            // z of the camera-frame direction is 1, so t is the z-depth
            if let Some((t, i)) = cast(rects, &eye, &(rot * cam_dir)) {
                rgb.put_pixel(x, y, Rgb(rects[i].color));
                depth[(y * k.width + x) as usize] = t as f32;
            } else {
                rgb.put_pixel(x, y, Rgb(BACKGROUND_COLOR));
            }
        }
    }
    CameraView::new(id, k, pose, rgb, DepthMap::new(k.width, k.height, depth))
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticScene, SceneError> {
    if cfg.spacing.is_nan() || cfg.spacing <= 0.0 || cfg.n_views == 0 {
        return Err(SceneError::InvalidArgument("spacing must be > 0 and n_views >= 1".into()));
    }
    let rects = surfaces();
    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut normals = Vec::new();
    let mut labels = Vec::new();
    let mut face_ids = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    for r in &rects {
        let nu = (r.u.norm() / cfg.spacing).round().max(1.0) as usize;
        let nv = (r.v.norm() / cfg.spacing).round().max(1.0) as usize;
        let mut grid: Vec<Option<u32>> = Vec::with_capacity(nu * nv);
        for j in 0..nv {
            for i in 0..nu {
                let p = r.origin + r.u * ((i as f64 + 0.5) / nu as f64) + r.v * ((j as f64 + 0.5) / nv as f64);
                if r.label == FLOOR && under_box(p.x, p.y) {
                    grid.push(None);
                    continue;
                }
                grid.push(Some(positions.len() as u32));
                positions.push(p);
                colors.push(r.color);
                normals.push(r.normal);
                labels.push(r.label);
                face_ids.push(r.face);
            }
        }
        for j in 0..nv.saturating_sub(1) {
            for i in 0..nu.saturating_sub(1) {
                let c = |di: usize, dj: usize| grid[(j + dj) * nu + i + di];
                if let (Some(a), Some(b), Some(cc), Some(d)) = (c(0, 0), c(1, 0), c(0, 1), c(1, 1)) {
                    triangles.push([a, b, d]);
                    triangles.push([a, d, cc]);
                }
            }
        }
    }
    let cloud = PointCloud::new(positions, colors, Some(normals))?;
    let mesh = if cfg.with_mesh {
        Some(TriangleMesh::new(cloud.positions.clone(), triangles, &cloud, 1e-9)?)
    } else {
        None
    };
    let k = Intrinsics {
        fx: cfg.focal,
        fy: cfg.focal,
        cx: cfg.width as f64 / 2.0,
        cy: cfg.height as f64 / 2.0,
        width: cfg.width,
        height: cfg.height,
    };
    let target = Point3::from(cfg.look_at);
    let poses: Vec<(String, Matrix4<f64>)> = (0..cfg.n_views)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / cfg.n_views as f64;
            let eye = Point3::new(cfg.ring_radius * a.cos(), cfg.ring_radius * a.sin(), cfg.ring_height);
            (format!("view_{i:02}"), look_at(eye, target))
        })
        .collect();
    let views = crate::par::map(&poses, |(id, pose)| render(&rects, id.clone(), k, *pose))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SyntheticScene {
        bundle: SceneBundle {
            cloud,
            mesh,
            views,
            voxel_size: cfg.spacing / 4.0,
        },
        labels,
        face_ids,
        surfaces: rects,
    })
}

/// Writes the scene as a manifest with PLY cloud, RGB PNGs and 16-bit
/// millimeter depth PNGs, plus `labels.json`. Returns the manifest path.
pub fn write_scene_dir(scene: &SyntheticScene, dir: &Path) -> Result<PathBuf, SceneError> {
    std::fs::create_dir_all(dir)?;
    let b = &scene.bundle;
    ply::write_cloud(&dir.join("cloud.ply"), &b.cloud)?;
    let mut views = Vec::new();
    for v in &b.views {
        let rgb = format!("{}.png", v.view_id);
        let depth = format!("{}_depth.png", v.view_id);
        let img_err = |path: &str, e: image::ImageError| SceneError::Image {
            path: dir.join(path),
            message: e.to_string(),
        };
        v.rgb.save(dir.join(&rgb)).map_err(|e| img_err(&rgb, e))?;
        let mm: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(v.depth.width, v.depth.height, v.depth.to_millimeters()).expect("sized");
        mm.save(dir.join(&depth)).map_err(|e| img_err(&depth, e))?;
        let pose: Vec<f64> = (0..4).flat_map(|r| (0..4).map(move |c| (r, c))).map(|(r, c)| v.cam_to_world[(r, c)]).collect();
        views.push(ViewEntry {
            id: v.view_id.clone(),
            rgb,
            depth,
            pose,
            intrinsics: None,
        });
    }
    let manifest = SceneManifest {
        cloud: "cloud.ply".into(),
        mesh: None,
        voxel_size: Some(b.voxel_size),
        intrinsics: b.views.first().map(|v| v.intrinsics),
        views,
    };
    let path = dir.join("scene.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest).map_err(|e| SceneError::InvalidArgument(e.to_string()))?)?;
    let labels = serde_json::json!({ "names": LABEL_NAMES, "labels": scene.labels });
    std::fs::write(dir.join("labels.json"), labels.to_string())?;
    Ok(path)
}
