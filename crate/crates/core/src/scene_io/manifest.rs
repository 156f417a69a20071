//! JSON scene manifest.
//!
//! ```json
//! {
//!   "cloud": "cloud.ply",
//!   "mesh": "mesh.ply",
//!   "voxel_size": 0.005,
//!   "intrinsics": {"fx": 525, "fy": 525, "cx": 319.5, "cy": 239.5, "width": 640, "height": 480},
//!   "views": [{"id": "v00", "rgb": "v00.png", "depth": "v00_depth.png", "pose": [16 numbers, row-major cam_to_world]}]
//! }
//! ```
//!
//! Paths are relative to the manifest. A view may carry its own
//! `intrinsics`, overriding the top-level default.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader};
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::{ply, CameraView, DepthMap, Intrinsics, PointCloud, SceneBundle, SceneError, TriangleMesh};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub cloud: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voxel_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<Intrinsics>,
    pub views: Vec<ViewEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub id: String,
    pub rgb: String,
    pub depth: String,
    pub pose: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<Intrinsics>,
}

fn malformed(field: impl Into<String>, message: impl Into<String>) -> SceneError {
    SceneError::MalformedManifest {
        field: field.into(),
        message: message.into(),
    }
}

fn read_manifest(path: &Path) -> Result<SceneManifest, SceneError> {
    if !path.exists() {
        return Err(SceneError::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        malformed(field, e.inner().to_string())
    })
}

/// All files a manifest references (manifest first), for content hashing.
pub fn manifest_inputs(manifest_path: &Path) -> Result<Vec<PathBuf>, SceneError> {
    let m = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = vec![manifest_path.to_path_buf(), base.join(&m.cloud)];
    out.extend(m.mesh.iter().map(|p| base.join(p)));
    for v in &m.views {
        out.push(base.join(&v.rgb));
        out.push(base.join(&v.depth));
    }
    Ok(out)
}

fn existing(base: &Path, rel: &str) -> Result<PathBuf, SceneError> {
    let p = base.join(rel);
    if p.exists() {
        Ok(p)
    } else {
        Err(SceneError::MissingFile(p))
    }
}

fn open_image(path: &Path) -> Result<DynamicImage, SceneError> {
    ImageReader::open(path)
        .map_err(|e| SceneError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .decode()
        .map_err(|e| SceneError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn load_depth(path: &Path) -> Result<DepthMap, SceneError> {
    match open_image(path)? {
        DynamicImage::ImageLuma16(img) => {
            let (w, h) = img.dimensions();
            let data = img
                .into_raw()
                .into_iter()
                .map(|mm| mm as f32 / 1000.0)
                .collect();
            Ok(DepthMap::new(w, h, data))
        }
        other => Err(SceneError::Image {
            path: path.to_path_buf(),
            message: format!("depth must be 16-bit single-channel, got {:?}", other.color()),
        }),
    }
}

fn load_view(
    base: &Path,
    idx: usize,
    entry: &ViewEntry,
    default_k: Option<Intrinsics>,
) -> Result<CameraView, SceneError> {
    let field = |name: &str| format!("views[{idx}].{name}");
    if entry.pose.len() != 16 {
        return Err(malformed(
            field("pose"),
            format!("expected 16 numbers, got {}", entry.pose.len()),
        ));
    }
    let k = entry
        .intrinsics
        .or(default_k)
        .ok_or_else(|| malformed(field("intrinsics"), "no intrinsics for view and no default"))?;
    let rgb_path = existing(base, &entry.rgb)?;
    let depth_path = existing(base, &entry.depth)?;
    let rgb = open_image(&rgb_path)?.to_rgb8();
    let depth = load_depth(&depth_path)?;
    let pose = Matrix4::from_row_slice(&entry.pose);
    CameraView::new(entry.id.clone(), k, pose, rgb, depth)
}

/// Loads and validates everything a manifest references. Views come back
/// sorted by id.
pub fn load_scene(manifest_path: &Path) -> Result<SceneBundle, SceneError> {
    let m = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let voxel_size = m.voxel_size.unwrap_or(super::DEFAULT_VOXEL_SIZE);
    if voxel_size.is_nan() || voxel_size <= 0.0 {
        return Err(malformed("voxel_size", "must be positive"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (i, v) in m.views.iter().enumerate() {
        if !seen.insert(v.id.as_str()) {
            return Err(malformed(format!("views[{i}].id"), format!("duplicate id {}", v.id)));
        }
    }

    let cloud: PointCloud = ply::read_cloud(&existing(base, &m.cloud)?)?;
    if cloud.is_empty() {
        return Err(SceneError::InvalidCloud("cloud has no points".into()));
    }
    let mesh = match &m.mesh {
        None => None,
        Some(rel) => {
            let path = existing(base, rel)?;
            let (vertices, triangles) = match path.extension().and_then(|e| e.to_str()) {
                Some(ext) if ext.eq_ignore_ascii_case("obj") => ply::read_mesh_obj(&path)?,
                _ => ply::read_mesh_ply(&path)?,
            };
            Some(TriangleMesh::new(vertices, triangles, &cloud, 2.0 * voxel_size)?)
        }
    };

    let indexed: Vec<(usize, &ViewEntry)> = m.views.iter().enumerate().collect();
    let mut views = crate::par::map(&indexed, |(i, e)| load_view(base, *i, e, m.intrinsics))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    views.sort_by(|a, b| a.view_id.cmp(&b.view_id));

    let bundle = SceneBundle {
        cloud,
        mesh,
        views,
        voxel_size,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{ImageBuffer, Luma, RgbImage};
    use nalgebra::Point3;

    fn write_cloud(dir: &Path, n: usize) {
        let cloud = PointCloud::new(
            (0..n).map(|i| Point3::new(i as f64 * 0.01, 0.0, 0.0)).collect(),
            vec![[10, 20, 30]; n],
            None,
        )
        .unwrap();
        ply::write_cloud(&dir.join("cloud.ply"), &cloud).unwrap();
    }

    fn write_view(dir: &Path, id: &str, rgb: (u32, u32), depth: (u32, u32)) -> ViewEntry {
        RgbImage::new(rgb.0, rgb.1).save(dir.join(format!("{id}.png"))).unwrap();
        ImageBuffer::<Luma<u16>, Vec<u16>>::from_pixel(depth.0, depth.1, Luma([2000]))
            .save(dir.join(format!("{id}_d.png")))
            .unwrap();
        let mut pose = vec![0.0; 16];
        for i in 0..4 {
            pose[i * 5] = 1.0;
        }
        ViewEntry {
            id: id.into(),
            rgb: format!("{id}.png"),
            depth: format!("{id}_d.png"),
            pose,
            intrinsics: None,
        }
    }

    fn manifest(views: Vec<ViewEntry>, w: u32, h: u32) -> SceneManifest {
        SceneManifest {
            cloud: "cloud.ply".into(),
            mesh: None,
            voxel_size: None,
            intrinsics: Some(Intrinsics {
                fx: 50.0,
                fy: 50.0,
                cx: w as f64 / 2.0,
                cy: h as f64 / 2.0,
                width: w,
                height: h,
            }),
            views,
        }
    }

    fn save(dir: &Path, m: &SceneManifest) -> PathBuf {
        let p = dir.join("scene.json");
        std::fs::write(&p, serde_json::to_string_pretty(m).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_views_is_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        write_cloud(dir.path(), 100);
        let p = save(dir.path(), &manifest(vec![], 8, 8));
        let b = load_scene(&p).unwrap();
        assert_eq!(b.cloud.len(), 100);
        assert!(b.views.is_empty());
        assert_eq!(b.voxel_size, 0.005);
    }

    #[test]
    fn views_sorted_and_depth_in_meters() {
        let dir = tempfile::tempdir().unwrap();
        write_cloud(dir.path(), 10);
        let views = ["c", "a", "b"]
            .iter()
            .map(|id| write_view(dir.path(), id, (16, 12), (16, 12)))
            .collect();
        let b = load_scene(&save(dir.path(), &manifest(views, 16, 12))).unwrap();
        let ids: Vec<&str> = b.views.iter().map(|v| v.view_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(b.views[0].depth.get(3, 3), 2.0);
    }

    #[test]
    fn depth_rgb_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_cloud(dir.path(), 10);
        let views = vec![write_view(dir.path(), "v", (640, 481), (640, 480))];
        let err = load_scene(&save(dir.path(), &manifest(views, 640, 480))).unwrap_err();
        assert!(matches!(err, SceneError::DimensionMismatch { .. }), "{err}");
    }

    #[test]
    fn missing_rgb_file() {
        let dir = tempfile::tempdir().unwrap();
        write_cloud(dir.path(), 10);
        let mut v = write_view(dir.path(), "v", (8, 8), (8, 8));
        v.rgb = "nope.png".into();
        let err = load_scene(&save(dir.path(), &manifest(vec![v], 8, 8))).unwrap_err();
        assert!(matches!(err, SceneError::MissingFile(_)));
    }

    #[test]
    fn malformed_reports_field() {
        let dir = tempfile::tempdir().unwrap();
        write_cloud(dir.path(), 10);
        let p = dir.path().join("scene.json");
        std::fs::write(
            &p,
            r#"{"cloud": "cloud.ply", "views": [{"id": "a", "rgb": "a.png", "depth": "d.png", "pose": "x"}]}"#,
        )
        .unwrap();
        match load_scene(&p).unwrap_err() {
            SceneError::MalformedManifest { field, .. } => assert_eq!(field, "views[0].pose"),
            e => panic!("unexpected {e}"),
        }

        let mut v = write_view(dir.path(), "v", (8, 8), (8, 8));
        v.pose.pop();
        match load_scene(&save(dir.path(), &manifest(vec![v], 8, 8))).unwrap_err() {
            SceneError::MalformedManifest { field, .. } => assert_eq!(field, "views[0].pose"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_rigid_pose() {
        let dir = tempfile::tempdir().unwrap();
        write_cloud(dir.path(), 10);
        let mut v = write_view(dir.path(), "v", (8, 8), (8, 8));
        v.pose[0] = 2.0;
        let err = load_scene(&save(dir.path(), &manifest(vec![v], 8, 8))).unwrap_err();
        assert!(matches!(err, SceneError::InvalidPose { .. }));
    }
}
