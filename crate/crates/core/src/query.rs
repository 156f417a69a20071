//! Text queries against superpoint features: scores, thresholding,
//! instance clustering and exports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature::{FeatureError, FeatureProvider, FeatureSet};
use crate::scene_io::ply::{write_vertex_header, PlyScalar};
use crate::scene_io::PointCloud;
use crate::spatial::PointIndex;
use crate::superpoint::SuperpointGraph;
use crate::union_find::UnionFind;

/// Score given to points whose superpoint has no feature.
pub const NO_FEATURE_SCORE: f64 = -1.0;
pub const NOISE_COLOR: [u8; 3] = [128, 128, 128];

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("no superpoint has a feature")]
    NoFeatures,
    #[error("features were made by provider {features:?} but the query provider is {provider:?}")]
    ProviderMismatch { features: String, provider: String },
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub prompt: String,
    pub sp_scores: BTreeMap<u32, f64>,
    pub point_scores: Vec<f64>,
    pub normalization: Normalization,
}

/// Nearest-rank percentile of `sorted` (ascending, non-empty).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64 - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

pub fn score_query(
    prompt: &str,
    features: &FeatureSet,
    provider: &dyn FeatureProvider,
    graph: &SuperpointGraph,
) -> Result<QueryResult, QueryError> {
    if prompt.trim().is_empty() {
        return Err(QueryError::EmptyPrompt);
    }
    if features.is_empty() {
        return Err(QueryError::NoFeatures);
    }
    let info = provider.info();
    if info.name != features.provider || info.dim != features.dim {
        return Err(QueryError::ProviderMismatch {
            features: format!("{} (dim {})", features.provider, features.dim),
            provider: format!("{} (dim {})", info.name, info.dim),
        });
    }
    let text = provider.embed_text(prompt)?;
    let mut sp_scores = BTreeMap::new();
    for (&sp, f) in &features.features {
        sp_scores.insert(sp, f.dot(&text)?);
    }
    let point_scores = graph
        .point_to_sp
        .iter()
        .map(|sp| sp_scores.get(sp).copied().unwrap_or(NO_FEATURE_SCORE))
        .collect();
    let mut sorted: Vec<f64> = sp_scores.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    Ok(QueryResult {
        prompt: prompt.to_owned(),
        normalization: Normalization {
            lo: nearest_rank(&sorted, 2.0),
            hi: nearest_rank(&sorted, 98.0),
        },
        sp_scores,
        point_scores,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum ThresholdMode {
    Absolute(f64),
    Percentile(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub threshold: ThresholdMode,
    pub epsilon: f64,
    pub min_cluster_size: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdMode::Percentile(97.0),
            epsilon: 0.05,
            min_cluster_size: 50,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), QueryError> {
        let bad = |m: &str| Err(QueryError::InvalidConfig(m.into()));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be > 0");
        }
        if self.min_cluster_size < 1 {
            return bad("min_cluster_size must be >= 1");
        }
        match self.threshold {
            ThresholdMode::Percentile(p) if !(p > 0.0 && p < 100.0) => bad("percentile must be in (0, 100)"),
            ThresholdMode::Absolute(t) if t.is_nan() => bad("absolute threshold is NaN"),
            _ => Ok(()),
        }
    }
}

/// Ascending indices of the points that pass the threshold. Percentile `p`
/// keeps the top `ceil((100 - p)% of n)` ranked points plus any points tied
/// with the last of them.
pub fn threshold_points(result: &QueryResult, threshold: ThresholdMode) -> Vec<u32> {
    let scores = &result.point_scores;
    let cutoff = match threshold {
        ThresholdMode::Absolute(t) => t,
        ThresholdMode::Percentile(p) => {
            let keep = (((100.0 - p) / 100.0) * scores.len() as f64 - 1e-9).ceil().max(0.0) as usize;
            if keep == 0 {
                return Vec::new();
            }
            let mut desc = scores.clone();
            desc.sort_by(|a, b| b.total_cmp(a));
            desc[keep.min(desc.len()) - 1]
        }
    };
    (0..scores.len() as u32).filter(|&i| scores[i as usize] >= cutoff).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMask {
    pub instance_id: u32,
    pub point_indices: Vec<u32>,
    pub score: f64,
}

/// DBSCAN over the selected points: neighborhoods include the point itself,
/// a point is core when its neighborhood holds at least `min_cluster_size`
/// points, clusters are connected core points, and each border point joins
/// its nearest core neighbor. Instances come out largest first.
pub fn cluster_instances(
    points: &[u32],
    cloud: &PointCloud,
    cfg: &ClusterConfig,
    point_scores: &[f64],
) -> Result<Vec<InstanceMask>, QueryError> {
    cfg.validate()?;
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    let positions: Vec<_> = pts.iter().map(|&i| cloud.positions[i as usize]).collect();
    let index = PointIndex::new(&positions);
    let neighborhoods: Vec<Vec<usize>> = crate::par::map(&positions, |p| index.within(p, cfg.epsilon));
    let core: Vec<bool> = neighborhoods.iter().map(|n| n.len() >= cfg.min_cluster_size).collect();

    let mut uf = UnionFind::new(pts.len());
    for (i, nbrs) in neighborhoods.iter().enumerate() {
        if core[i] {
            for &j in nbrs {
                if core[j] {
                    uf.union(i, j);
                }
            }
        }
    }
    let lex = |a: usize| {
        let p = positions[a];
        (p.x, p.y, p.z)
    };
    let mut owner: Vec<Option<usize>> = vec![None; pts.len()];
    for i in 0..pts.len() {
        owner[i] = if core[i] {
            Some(uf.find(i))
        } else {
            neighborhoods[i]
                .iter()
                .copied()
                .filter(|&j| core[j])
                .min_by(|&a, &b| {
                    let da = (positions[a] - positions[i]).norm_squared();
                    let db = (positions[b] - positions[i]).norm_squared();
                    da.total_cmp(&db).then_with(|| lex(a).partial_cmp(&lex(b)).expect("finite"))
                })
                .map(|j| uf.find(j))
        };
    }
    let mut groups: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (i, o) in owner.iter().enumerate() {
        if let Some(root) = o {
            groups.entry(*root).or_default().push(pts[i]);
        }
    }
    let mut clusters: Vec<Vec<u32>> = groups
        .into_values()
        .filter(|g| g.len() >= cfg.min_cluster_size)
        .collect();
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    Ok(clusters
        .into_iter()
        .enumerate()
        .map(|(id, point_indices)| InstanceMask {
            instance_id: id as u32,
            score: point_indices.iter().map(|&i| point_scores[i as usize]).sum::<f64>() / point_indices.len() as f64,
            point_indices,
        })
        .collect())
}

/// Blue (t = 0) to yellow (t = 1), rounded half up.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let up = (t * 255.0 + 0.5).floor() as u8;
    let down = ((1.0 - t) * 255.0 + 0.5).floor() as u8;
    [up, up, down]
}

pub fn heat_color(score: f64, norm: Normalization) -> [u8; 3] {
    if norm.hi <= norm.lo {
        return colormap(0.5);
    }
    colormap((score - norm.lo) / (norm.hi - norm.lo))
}

fn put_position(buf: &mut Vec<u8>, cloud: &PointCloud, i: usize) {
    for c in cloud.positions[i].coords.iter() {
        buf.extend_from_slice(&c.to_le_bytes());
    }
}

pub fn export_heatmap(result: &QueryResult, cloud: &PointCloud, path: &Path) -> Result<(), QueryError> {
    let mut buf = Vec::with_capacity(cloud.len() * 31 + 256);
    write_vertex_header(
        &mut buf,
        cloud.len(),
        &[
            ("x", PlyScalar::Double),
            ("y", PlyScalar::Double),
            ("z", PlyScalar::Double),
            ("red", PlyScalar::UChar),
            ("green", PlyScalar::UChar),
            ("blue", PlyScalar::UChar),
            ("score", PlyScalar::Float),
        ],
        &[format!("prompt {}", result.prompt)],
    )?;
    for (i, &s) in result.point_scores.iter().enumerate() {
        put_position(&mut buf, cloud, i);
        buf.extend_from_slice(&heat_color(s, result.normalization));
        buf.extend_from_slice(&(s as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Distinct, saturated color for instance `id`, never gray.
pub fn instance_color(id: u32) -> [u8; 3] {
    let hue = (id as f64 * 137.507_764).rem_euclid(360.0);
    let band = (id / 7) % 3;
    let value = [1.0, 0.8, 0.6][band as usize];
    let c = value * 0.85;
    let x = c * (1.0 - ((hue / 60.0).rem_euclid(2.0) - 1.0).abs());
    let m = value - c;
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r, g, b].map(|v| ((v + m) * 255.0).round() as u8)
}

/// Instance id per point, -1 for noise.
pub fn instance_labels(instances: &[InstanceMask], n_points: usize) -> Vec<i32> {
    let mut labels = vec![-1; n_points];
    for inst in instances {
        for &i in &inst.point_indices {
            labels[i as usize] = inst.instance_id as i32;
        }
    }
    labels
}

pub fn export_instances(instances: &[InstanceMask], cloud: &PointCloud, path: &Path) -> Result<(), QueryError> {
    let labels = instance_labels(instances, cloud.len());
    let mut buf = Vec::with_capacity(cloud.len() * 31 + 256);
    write_vertex_header(
        &mut buf,
        cloud.len(),
        &[
            ("x", PlyScalar::Double),
            ("y", PlyScalar::Double),
            ("z", PlyScalar::Double),
            ("red", PlyScalar::UChar),
            ("green", PlyScalar::UChar),
            ("blue", PlyScalar::UChar),
            ("instance", PlyScalar::Int),
        ],
        &[],
    )?;
    for (i, &l) in labels.iter().enumerate() {
        put_position(&mut buf, cloud, i);
        let color = if l < 0 { NOISE_COLOR } else { instance_color(l as u32) };
        buf.extend_from_slice(&color);
        buf.extend_from_slice(&l.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// `{prompt, sp_scores, normalization, instances: [{id, size, score, point_indices}]}`
/// Superpoints by descending score, ties by id.
pub fn ranked_superpoints(result: &QueryResult) -> Vec<(u32, f64)> {
    let mut v: Vec<(u32, f64)> = result.sp_scores.iter().map(|(k, s)| (*k, *s)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

pub fn result_json(result: &QueryResult, instances: &[InstanceMask]) -> serde_json::Value {
    serde_json::json!({
        "prompt": result.prompt,
        "ranking": ranked_superpoints(result).iter().map(|(id, score)| serde_json::json!({
            "id": id,
            "score": score,
        })).collect::<Vec<_>>(),
        "sp_scores": result.sp_scores,
        "normalization": result.normalization,
        "instances": instances.iter().map(|i| serde_json::json!({
            "id": i.instance_id,
            "size": i.point_indices.len(),
            "score": i.score,
            "point_indices": i.point_indices,
        })).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(scores: Vec<f64>) -> QueryResult {
        QueryResult {
            prompt: "x".into(),
            sp_scores: BTreeMap::new(),
            point_scores: scores,
            normalization: Normalization { lo: 0.0, hi: 1.0 },
        }
    }

    #[test]
    fn threshold_examples() {
        let r = result(vec![0.1, 0.5, 0.9]);
        assert!(threshold_points(&r, ThresholdMode::Absolute(0.95)).is_empty());
        assert_eq!(threshold_points(&r, ThresholdMode::Absolute(-1.0)), vec![0, 1, 2]);
        let hundred = result((0..100).map(|i| i as f64).collect());
        assert_eq!(threshold_points(&hundred, ThresholdMode::Percentile(97.0)), vec![97, 98, 99]);
        let tied = result(vec![1.0; 10]);
        assert_eq!(threshold_points(&tied, ThresholdMode::Percentile(90.0)).len(), 10);
    }

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 2.0), 2.0);
        assert_eq!(nearest_rank(&v, 98.0), 98.0);
        assert_eq!(nearest_rank(&[5.0], 2.0), 5.0);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0, 0, 255]);
        assert_eq!(colormap(1.0), [255, 255, 0]);
        assert_eq!(colormap(-3.0), [0, 0, 255]);
        assert_eq!(colormap(0.5), [128, 128, 128]);
        let n = Normalization { lo: 0.3, hi: 0.3 };
        assert_eq!(heat_color(0.3, n), colormap(0.5));
    }

    #[test]
    fn instance_colors_distinct_and_not_gray() {
        let colors: std::collections::BTreeSet<[u8; 3]> = (0..64).map(instance_color).collect();
        assert_eq!(colors.len(), 64);
        assert!(!colors.contains(&NOISE_COLOR));
    }

    #[test]
    fn config_validation() {
        let mut c = ClusterConfig::default();
        assert!(c.validate().is_ok());
        c.threshold = ThresholdMode::Percentile(100.0);
        assert!(c.validate().is_err());
        c = ClusterConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
