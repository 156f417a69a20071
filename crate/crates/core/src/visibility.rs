//! Projection of superpoint members into the posed views, depth-map occlusion
//! tests and top-k view selection.
//!
//! Cameras follow the OpenCV convention: +x right, +y down, +z forward.

use std::collections::BTreeMap;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_io::{
    ArtifactKind, CacheCodec, CacheReader, CacheWriter, CameraView, PointCloud, SceneError,
};
use crate::superpoint::SuperpointGraph;

#[derive(Debug, Error, PartialEq)]
pub enum VisibilityError {
    #[error("visibility needs at least one view")]
    NoViews,
    #[error("invalid occlusion config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub point_index: u32,
    pub view_id: String,
    pub pixel: [f64; 2],
    pub cam_depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    pub abs_tolerance: f64,
    pub rel_tolerance: f64,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            abs_tolerance: 0.02,
            rel_tolerance: 0.01,
        }
    }
}

impl OcclusionConfig {
    pub fn validate(&self) -> Result<(), VisibilityError> {
        if !(self.abs_tolerance >= 0.0 && self.rel_tolerance >= 0.0)
            || !self.abs_tolerance.is_finite()
            || !self.rel_tolerance.is_finite()
        {
            return Err(VisibilityError::InvalidConfig(
                "tolerances must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Pixel and camera-frame depth of `p`, or `None` if it lies behind the
/// camera or outside the half-open image rectangle.
pub fn project_point(p: &Point3<f64>, view: &CameraView) -> Option<([f64; 2], f64)> {
    let c = view.world_to_cam().transform_point(p);
    if c.z <= 0.0 {
        return None;
    }
    let k = &view.intrinsics;
    let u = k.fx * c.x / c.z + k.cx;
    let v = k.fy * c.y / c.z + k.cy;
    let inside = u >= 0.0 && v >= 0.0 && u < k.width as f64 && v < k.height as f64;
    inside.then_some(([u, v], c.z))
}

/// [`project_point`] wrapped into a [`Projection`].
pub fn projection(point_index: u32, p: &Point3<f64>, view: &CameraView) -> Option<Projection> {
    project_point(p, view).map(|(pixel, cam_depth)| Projection {
        point_index,
        view_id: view.view_id.clone(),
        pixel,
        cam_depth,
    })
}

/// Nearest pixel to a continuous coordinate, clamped into the image.
pub fn nearest_pixel(pixel: [f64; 2], width: u32, height: u32) -> (u32, u32) {
    let clamp = |x: f64, n: u32| (x.round().max(0.0) as u32).min(n.saturating_sub(1));
    (clamp(pixel[0], width), clamp(pixel[1], height))
}

pub fn is_visible(pixel: [f64; 2], cam_depth: f64, view: &CameraView, cfg: &OcclusionConfig) -> bool {
    let (x, y) = nearest_pixel(pixel, view.depth.width, view.depth.height);
    let d = view.depth.get(x, y) as f64;
    if d <= 0.0 || !d.is_finite() {
        return false;
    }
    cam_depth <= d + cfg.abs_tolerance.max(cfg.rel_tolerance * d)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisiblePoint {
    pub point_index: u32,
    pub pixel: [f64; 2],
}

/// Visible member points per (superpoint, view). Pairs with no visible
/// point are not stored; their count is 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VisibilityTable {
    /// Every view the table was built against, ascending.
    pub view_ids: Vec<String>,
    pub entries: BTreeMap<u32, BTreeMap<String, Vec<VisiblePoint>>>,
}

impl VisibilityTable {
    pub fn count(&self, sp: u32, view_id: &str) -> usize {
        self.visible_points(sp, view_id).len()
    }

    pub fn visible_points(&self, sp: u32, view_id: &str) -> &[VisiblePoint] {
        self.entries
            .get(&sp)
            .and_then(|m| m.get(view_id))
            .map_or(&[], Vec::as_slice)
    }

    /// Non-zero counts of one superpoint, keyed by view.
    pub fn counts(&self, sp: u32) -> BTreeMap<&str, usize> {
        self.entries.get(&sp).map_or_else(BTreeMap::new, |m| {
            m.iter().map(|(v, pts)| (v.as_str(), pts.len())).collect()
        })
    }

    /// Same per-point visibility grouped under a different superpoint
    /// partition of the same cloud. Needed after merging, since merged
    /// superpoints are unions of visible sets.
    pub fn regroup(&self, point_to_sp: &[u32]) -> VisibilityTable {
        let mut entries: BTreeMap<u32, BTreeMap<String, Vec<VisiblePoint>>> = BTreeMap::new();
        for per_view in self.entries.values() {
            for (view, pts) in per_view {
                for vp in pts {
                    entries
                        .entry(point_to_sp[vp.point_index as usize])
                        .or_default()
                        .entry(view.clone())
                        .or_default()
                        .push(*vp);
                }
            }
        }
        for per_view in entries.values_mut() {
            for pts in per_view.values_mut() {
                pts.sort_by_key(|vp| vp.point_index);
            }
        }
        VisibilityTable {
            view_ids: self.view_ids.clone(),
            entries,
        }
    }
}

pub fn build_visibility(
    graph: &SuperpointGraph,
    cloud: &PointCloud,
    views: &[CameraView],
    cfg: &OcclusionConfig,
) -> Result<VisibilityTable, VisibilityError> {
    if views.is_empty() {
        return Err(VisibilityError::NoViews);
    }
    cfg.validate()?;
    let per_view: Vec<Vec<(u32, Vec<VisiblePoint>)>> = crate::par::map(views, |view| {
        graph
            .superpoints
            .iter()
            .filter_map(|sp| {
                let pts: Vec<VisiblePoint> = sp
                    .point_indices
                    .iter()
                    .filter_map(|&i| {
                        let (pixel, z) = project_point(&cloud.positions[i as usize], view)?;
                        is_visible(pixel, z, view, cfg).then_some(VisiblePoint {
                            point_index: i,
                            pixel,
                        })
                    })
                    .collect();
                (!pts.is_empty()).then_some((sp.id, pts))
            })
            .collect()
    });
    let mut entries: BTreeMap<u32, BTreeMap<String, Vec<VisiblePoint>>> = BTreeMap::new();
    for (view, list) in views.iter().zip(per_view) {
        for (sp, pts) in list {
            entries.entry(sp).or_default().insert(view.view_id.clone(), pts);
        }
    }
    let mut view_ids: Vec<String> = views.iter().map(|v| v.view_id.clone()).collect();
    view_ids.sort();
    view_ids.dedup();
    Ok(VisibilityTable { view_ids, entries })
}

/// Views with at least `min_visible` visible points, most visible first,
/// ties by view id; at most `k`.
pub fn top_k_views(table: &VisibilityTable, sp: u32, k: usize, min_visible: usize) -> Vec<String> {
    let mut ranked: Vec<(&str, usize)> = table
        .counts(sp)
        .into_iter()
        .filter(|&(_, c)| c >= min_visible.max(1))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(k).map(|(v, _)| v.to_owned()).collect()
}

impl CacheCodec for VisibilityTable {
    const KIND: ArtifactKind = ArtifactKind::Visibility;

    fn encode(&self, w: &mut CacheWriter) {
        w.len(self.view_ids.len());
        for v in &self.view_ids {
            w.str(v);
        }
        w.len(self.entries.len());
        for (sp, per_view) in &self.entries {
            w.u32(*sp);
            w.len(per_view.len());
            for (view, pts) in per_view {
                w.str(view);
                w.len(pts.len());
                for vp in pts {
                    w.u32(vp.point_index);
                    w.f64(vp.pixel[0]);
                    w.f64(vp.pixel[1]);
                }
            }
        }
    }

    fn decode(r: &mut CacheReader<'_>) -> Result<Self, SceneError> {
        let nv = r.len(8)?;
        let view_ids = (0..nv).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
        let ns = r.len(12)?;
        let mut entries = BTreeMap::new();
        for _ in 0..ns {
            let sp = r.u32()?;
            let nview = r.len(16)?;
            let mut per_view = BTreeMap::new();
            for _ in 0..nview {
                let view = r.str()?;
                let np = r.len(20)?;
                let pts = (0..np)
                    .map(|_| {
                        Ok(VisiblePoint {
                            point_index: r.u32()?,
                            pixel: [r.f64()?, r.f64()?],
                        })
                    })
                    .collect::<Result<Vec<_>, SceneError>>()?;
                per_view.insert(view, pts);
            }
            entries.insert(sp, per_view);
        }
        Ok(Self { view_ids, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::{DepthMap, Intrinsics};
    use image::RgbImage;
    use nalgebra::Matrix4;

    fn view(id: &str, depth: f32) -> CameraView {
        let k = Intrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        };
        CameraView::new(
            id,
            k,
            Matrix4::identity(),
            RgbImage::new(640, 480),
            DepthMap::new(640, 480, vec![depth; 640 * 480]),
        )
        .unwrap()
    }

    #[test]
    fn axis_point_maps_to_principal_point() {
        let v = view("a", 2.0);
        let (px, z) = project_point(&Point3::new(0.0, 0.0, 2.0), &v).unwrap();
        assert_eq!(px, [320.0, 240.0]);
        assert_eq!(z, 2.0);
        assert!(project_point(&Point3::new(0.0, 0.0, -1.0), &v).is_none());
    }

    #[test]
    fn border_is_exclusive() {
        let v = view("a", 2.0);
        // u == width exactly
        assert!(project_point(&Point3::new(320.0 / 500.0, 0.0, 1.0), &v).is_none());
        assert!(project_point(&Point3::new(-320.0 / 500.0, 0.0, 1.0), &v).is_some());
    }

    #[test]
    fn occlusion_examples() {
        let v = view("a", 2.0);
        let cfg = OcclusionConfig::default();
        assert!(is_visible([10.0, 10.0], 2.0, &v, &cfg));
        assert!(!is_visible([10.0, 10.0], 2.5, &v, &cfg));
        let empty = view("b", 0.0);
        assert!(!is_visible([10.0, 10.0], 0.5, &empty, &cfg));
    }

    #[test]
    fn top_k_examples() {
        let mut t = VisibilityTable::default();
        let vp = VisiblePoint {
            point_index: 0,
            pixel: [0.0, 0.0],
        };
        let per: BTreeMap<String, Vec<VisiblePoint>> = [("v1", 10), ("v2", 5), ("v3", 8), ("v4", 2)]
            .into_iter()
            .map(|(v, c)| (v.to_string(), vec![vp; c]))
            .collect();
        t.entries.insert(0, per);
        assert_eq!(top_k_views(&t, 0, 3, 1), ["v1", "v3", "v2"]);
        assert!(top_k_views(&t, 0, 3, 11).is_empty());
        let tie: BTreeMap<String, Vec<VisiblePoint>> =
            [("b", 5), ("a", 5)].into_iter().map(|(v, c)| (v.to_string(), vec![vp; c])).collect();
        t.entries.insert(1, tie);
        assert_eq!(top_k_views(&t, 1, 1, 1), ["a"]);
    }
}
