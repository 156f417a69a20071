//! Boundary-preserving oversegmentation into superpoints and the superpoint
//! adjacency graph.
//!
//! Superpoints are grown by a Lloyd-style minimization of a position + normal
//! energy. Seeds come from farthest-point sampling; each iteration assigns
//! every point to the nearby seed with the lowest
//!
//! ```text
//! E(p, s) = |p - s|² / r² + λ (1 - |n_p · n_s|)
//! ```
//!
//! where `r` is the mean seed spacing, then moves each seed to its members'
//! centroid and sign-aligned mean normal. The normal term keeps creases and
//! curvature changes on superpoint boundaries. After the last iteration any
//! superpoint whose members are not connected under the point adjacency
//! (mesh edges, or k-NN links) is split into its components.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_io::{
    ArtifactKind, CacheCodec, CacheReader, CacheWriter, PointCloud, SceneError, TriangleMesh,
};
use crate::spatial::PointIndex;
use crate::union_find::UnionFind;

#[derive(Debug, Error)]
pub enum SuperpointError {
    #[error("cannot oversegment an empty cloud")]
    EmptyCloud,
    #[error("every normal in the cloud is flagged invalid")]
    NoValidNormals,
    #[error("invalid oversegmentation config: {0}")]
    InvalidConfig(String),
    #[error("invalid superpoint graph: {0}")]
    InvalidGraph(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Superpoint {
    pub id: u32,
    /// Strictly ascending.
    pub point_indices: Vec<u32>,
    pub centroid: Point3<f64>,
    pub mean_normal: Vector3<f64>,
}

impl Superpoint {
    /// `point_indices` must already be sorted.
    pub fn from_members(id: u32, point_indices: Vec<u32>, cloud: &PointCloud) -> Self {
        debug_assert!(point_indices.windows(2).all(|w| w[0] < w[1]));
        let sum = point_indices
            .iter()
            .fold(Vector3::zeros(), |a, &i| a + cloud.positions[i as usize].coords);
        let centroid = Point3::from(sum / point_indices.len().max(1) as f64);
        Self {
            id,
            centroid,
            mean_normal: aligned_mean_normal(cloud, &point_indices, None).unwrap_or_else(Vector3::z),
            point_indices,
        }
    }

    pub fn member_count(&self) -> usize {
        self.point_indices.len()
    }
}

/// Mean of the members' valid normals after flipping each into the
/// hemisphere of `reference` (or of the first valid normal).
fn aligned_mean_normal(
    cloud: &PointCloud,
    members: &[u32],
    reference: Option<Vector3<f64>>,
) -> Option<Vector3<f64>> {
    let mut reference = reference;
    let mut sum = Vector3::zeros();
    for &i in members {
        let i = i as usize;
        if !cloud.normal_valid[i] {
            continue;
        }
        let n = cloud.normals[i];
        let r = *reference.get_or_insert(n);
        sum += if n.dot(&r) < 0.0 { -n } else { n };
    }
    let norm = sum.norm();
    (norm > 1e-12).then(|| sum / norm)
}

/// Superpoints (ids equal their position in `superpoints`) plus undirected
/// adjacency edges stored as sorted `(lo, hi)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpointGraph {
    pub superpoints: Vec<Superpoint>,
    pub edges: Vec<(u32, u32)>,
    pub point_to_sp: Vec<u32>,
}

impl SuperpointGraph {
    /// Builds superpoints from a dense labeling `0..n_groups`; no edges.
    pub fn from_labels(labels: &[u32], n_groups: usize, cloud: &PointCloud) -> Self {
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); n_groups];
        for (i, &l) in labels.iter().enumerate() {
            members[l as usize].push(i as u32);
        }
        let superpoints = members
            .into_iter()
            .enumerate()
            .map(|(id, m)| Superpoint::from_members(id as u32, m, cloud))
            .collect();
        Self {
            superpoints,
            edges: Vec::new(),
            point_to_sp: labels.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.superpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superpoints.is_empty()
    }

    pub fn total_points(&self) -> usize {
        self.point_to_sp.len()
    }

    /// Neighbor lists indexed by superpoint id.
    pub fn neighbors(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.len()];
        for &(a, b) in &self.edges {
            out[a as usize].push(b);
            out[b as usize].push(a);
        }
        out
    }

    pub fn has_edge(&self, a: u32, b: u32) -> bool {
        let key = (a.min(b), a.max(b));
        self.edges.binary_search(&key).is_ok()
    }

    /// Checks the partition and edge invariants against a cloud of
    /// `n_points` points.
    pub fn validate(&self, n_points: usize) -> Result<(), SuperpointError> {
        let bad = |m: String| Err(SuperpointError::InvalidGraph(m));
        if self.point_to_sp.len() != n_points {
            return bad(format!("point_to_sp has {} entries for {n_points} points", self.point_to_sp.len()));
        }
        let mut seen = vec![false; n_points];
        let mut total = 0usize;
        for (pos, sp) in self.superpoints.iter().enumerate() {
            if sp.id as usize != pos {
                return bad(format!("superpoint at {pos} has id {}", sp.id));
            }
            if sp.point_indices.is_empty() {
                return bad(format!("superpoint {pos} is empty"));
            }
            if !sp.point_indices.windows(2).all(|w| w[0] < w[1]) {
                return bad(format!("superpoint {pos} members not strictly ascending"));
            }
            for &i in &sp.point_indices {
                let i = i as usize;
                if i >= n_points || seen[i] {
                    return bad(format!("point {i} out of range or in two superpoints"));
                }
                seen[i] = true;
                if self.point_to_sp[i] != sp.id {
                    return bad(format!("point_to_sp[{i}] disagrees with membership"));
                }
            }
            total += sp.member_count();
        }
        if total != n_points {
            return bad(format!("superpoints cover {total} of {n_points} points"));
        }
        let n = self.len() as u32;
        if !self.edges.windows(2).all(|w| w[0] < w[1]) {
            return bad("edges not sorted and unique".into());
        }
        if let Some(e) = self.edges.iter().find(|(a, b)| a >= b || *b >= n) {
            return bad(format!("invalid edge {e:?}"));
        }
        Ok(())
    }

    /// `{"n_points", "point_to_sp": [...], "edges": [[a, b], ...]}`
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n_points": self.total_points(),
            "n_superpoints": self.len(),
            "point_to_sp": self.point_to_sp,
            "edges": self.edges.iter().map(|&(a, b)| [a, b]).collect::<Vec<_>>(),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<(), SuperpointError> {
        std::fs::write(path, serde_json::to_vec(&self.to_json())?)?;
        Ok(())
    }

    /// Rebuilds a graph from its JSON export.
    pub fn from_json(value: &serde_json::Value, cloud: &PointCloud) -> Result<Self, SuperpointError> {
        #[derive(Deserialize)]
        struct Export {
            point_to_sp: Vec<u32>,
            edges: Vec<(u32, u32)>,
        }
        let e: Export = serde_json::from_value(value.clone())?;
        if e.point_to_sp.len() != cloud.len() {
            return Err(SuperpointError::InvalidGraph("point count differs from cloud".into()));
        }
        let n = e.point_to_sp.iter().max().map_or(0, |m| *m as usize + 1);
        let mut g = Self::from_labels(&e.point_to_sp, n, cloud);
        g.edges = e.edges.into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
        g.edges.sort_unstable();
        g.edges.dedup();
        g.validate(cloud.len())?;
        Ok(g)
    }
}

impl CacheCodec for SuperpointGraph {
    const KIND: ArtifactKind = ArtifactKind::Graph;

    fn encode(&self, w: &mut CacheWriter) {
        w.len(self.superpoints.len());
        for sp in &self.superpoints {
            w.u32(sp.id);
            w.u32s(&sp.point_indices);
            crate::scene_io::cache_put_point(w, &sp.centroid);
            crate::scene_io::cache_put_vector(w, &sp.mean_normal);
        }
        w.len(self.edges.len());
        for &(a, b) in &self.edges {
            w.u32(a);
            w.u32(b);
        }
        w.u32s(&self.point_to_sp);
    }

    fn decode(r: &mut CacheReader<'_>) -> Result<Self, SceneError> {
        let n = r.len(60)?;
        let mut superpoints = Vec::with_capacity(n);
        for _ in 0..n {
            superpoints.push(Superpoint {
                id: r.u32()?,
                point_indices: r.u32s()?,
                centroid: crate::scene_io::cache_get_point(r)?,
                mean_normal: crate::scene_io::cache_get_vector(r)?,
            });
        }
        let ne = r.len(8)?;
        let edges = (0..ne).map(|_| Ok((r.u32()?, r.u32()?))).collect::<Result<_, SceneError>>()?;
        let point_to_sp = r.u32s()?;
        let g = Self {
            superpoints,
            edges,
            point_to_sp,
        };
        g.validate(g.point_to_sp.len())
            .map_err(|e| SceneError::CorruptCache(e.to_string()))?;
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OversegConfig {
    pub target_points_per_sp: usize,
    pub lambda_normal: f64,
    pub lloyd_iterations: usize,
    pub knn_adjacency_k: usize,
    /// Set from the master seed by the pipeline; not part of config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OversegConfig {
    fn default() -> Self {
        Self {
            target_points_per_sp: 200,
            lambda_normal: 2.0,
            lloyd_iterations: 10,
            knn_adjacency_k: 8,
            seed: 0,
        }
    }
}

impl OversegConfig {
    pub fn validate(&self) -> Result<(), SuperpointError> {
        let bad = |m: &str| Err(SuperpointError::InvalidConfig(m.into()));
        if self.target_points_per_sp < 1 {
            return bad("target_points_per_sp must be >= 1");
        }
        if !(self.lambda_normal >= 0.0 && self.lambda_normal.is_finite()) {
            return bad("lambda_normal must be a finite value >= 0");
        }
        if self.lloyd_iterations < 1 {
            return bad("lloyd_iterations must be >= 1");
        }
        if self.knn_adjacency_k < 1 {
            return bad("knn_adjacency_k must be >= 1");
        }
        Ok(())
    }
}

/// Symmetric point-to-point adjacency in CSR form.
#[derive(Clone, Debug)]
pub struct PointAdjacency {
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
}

impl PointAdjacency {
    fn from_pairs(n: usize, mut pairs: Vec<(u32, u32)>) -> Self {
        let mut both: Vec<(u32, u32)> = Vec::with_capacity(pairs.len() * 2);
        for (a, b) in pairs.drain(..) {
            if a != b {
                both.push((a, b));
                both.push((b, a));
            }
        }
        both.sort_unstable();
        both.dedup();
        let mut offsets = vec![0usize; n + 1];
        for &(a, _) in &both {
            offsets[a as usize + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        Self {
            offsets,
            neighbors: both.into_iter().map(|(_, b)| b).collect(),
        }
    }

    /// Links every point to its `k` nearest neighbors (symmetrized).
    pub fn knn(cloud: &PointCloud, k: usize) -> Self {
        let index = PointIndex::new(&cloud.positions);
        let lists = crate::par::map_range(cloud.len(), |i| {
            index
                .knn(&cloud.positions[i], k + 1)
                .into_iter()
                .filter(|(j, _)| *j != i)
                .take(k)
                .map(|(j, _)| (i as u32, j as u32))
                .collect::<Vec<_>>()
        });
        Self::from_pairs(cloud.len(), lists.into_iter().flatten().collect())
    }

    /// Mesh edges mapped onto cloud points. Points that no mesh edge
    /// reaches fall back to their k-NN links so they never end up isolated.
    pub fn mesh(cloud: &PointCloud, mesh: &TriangleMesh, knn_k: usize) -> Self {
        let v2p = &mesh.vertex_to_point;
        let mut pairs: Vec<(u32, u32)> = mesh
            .edges()
            .map(|(a, b)| (v2p[a as usize], v2p[b as usize]))
            .filter(|(a, b)| a != b)
            .collect();
        let mut covered = vec![false; cloud.len()];
        for &(a, b) in &pairs {
            covered[a as usize] = true;
            covered[b as usize] = true;
        }
        if covered.iter().any(|c| !c) {
            let knn = Self::knn(cloud, knn_k);
            for (i, c) in covered.iter().enumerate() {
                if !c {
                    pairs.extend(knn.of(i).iter().map(|&j| (i as u32, j)));
                }
            }
        }
        Self::from_pairs(cloud.len(), pairs)
    }

    pub fn build(cloud: &PointCloud, mesh: Option<&TriangleMesh>, knn_k: usize) -> Self {
        match mesh {
            Some(m) => Self::mesh(cloud, m, knn_k),
            None => Self::knn(cloud, knn_k),
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn of(&self, i: usize) -> &[u32] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Each undirected edge once, as `(lo, hi)`.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.len()).flat_map(move |i| {
            self.of(i)
                .iter()
                .filter(move |&&j| (i as u32) < j)
                .map(move |&j| (i as u32, j))
        })
    }
}

/// Superpoint edges induced by a point adjacency: `(a, b)` whenever some
/// point of `a` is adjacent to some point of `b`.
pub fn edges_from_point_adjacency(point_to_sp: &[u32], adjacency: &PointAdjacency) -> Vec<(u32, u32)> {
    let set: BTreeSet<(u32, u32)> = adjacency
        .edges()
        .filter_map(|(i, j)| {
            let (a, b) = (point_to_sp[i as usize], point_to_sp[j as usize]);
            (a != b).then(|| (a.min(b), a.max(b)))
        })
        .collect();
    set.into_iter().collect()
}

/// Replaces `graph`'s edges with those induced by the mesh (or, without a
/// mesh, by `knn_k`-nearest-neighbor links between points).
pub fn build_adjacency(
    graph: &SuperpointGraph,
    cloud: &PointCloud,
    mesh: Option<&TriangleMesh>,
    knn_k: usize,
) -> SuperpointGraph {
    let adjacency = PointAdjacency::build(cloud, mesh, knn_k);
    SuperpointGraph {
        edges: edges_from_point_adjacency(&graph.point_to_sp, &adjacency),
        ..graph.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GraphStats {
    pub n_superpoints: usize,
    pub n_edges: usize,
    pub mean_size: f64,
    pub min_size: usize,
    pub max_size: usize,
}

pub fn graph_stats(graph: &SuperpointGraph) -> GraphStats {
    let sizes = graph.superpoints.iter().map(Superpoint::member_count);
    GraphStats {
        n_superpoints: graph.len(),
        n_edges: graph.edges.len(),
        mean_size: if graph.is_empty() {
            0.0
        } else {
            graph.total_points() as f64 / graph.len() as f64
        },
        min_size: sizes.clone().min().unwrap_or(0),
        max_size: sizes.max().unwrap_or(0),
    }
}

/// Per-iteration diagnostics of [`oversegment_traced`].
#[derive(Clone, Debug, Default)]
pub struct OversegTrace {
    pub n_seeds: usize,
    pub seed_spacing: f64,
    /// Total assignment energy after each Lloyd iteration's assignment step.
    pub energies: Vec<f64>,
    /// Superpoints created by splitting disconnected assignments.
    pub split_extra: usize,
}

#[derive(Clone, Copy, Debug)]
struct Seed {
    position: Point3<f64>,
    normal: Option<Vector3<f64>>,
}

fn farthest_point_seeds(positions: &[Point3<f64>], n_seeds: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = positions.len();
    let mut seeds = vec![rng.random_range(0..n)];
    let mut dist = vec![f64::INFINITY; n];
    while seeds.len() < n_seeds {
        let last = positions[*seeds.last().expect("non-empty")];
        crate::par::for_each_mut(&mut dist, |i, d| {
            *d = d.min((positions[i] - last).norm_squared());
        });
        let (best, best_d) = dist
            .iter()
            .enumerate()
            .fold((0usize, -1.0f64), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        if best_d <= 0.0 {
            break; // only duplicates of existing seeds remain
        }
        seeds.push(best);
    }
    seeds
}

fn mean_seed_spacing(seeds: &[Point3<f64>], cloud: &PointCloud) -> f64 {
    if seeds.len() < 2 {
        let diag = cloud.bounds().map_or(0.0, |(lo, hi)| (hi - lo).norm());
        return if diag > 0.0 { diag } else { 1.0 };
    }
    let index = PointIndex::new(seeds);
    let total: f64 = seeds
        .iter()
        .map(|s| index.knn(s, 2).get(1).map_or(0.0, |(_, d2)| d2.sqrt()))
        .sum();
    total / seeds.len() as f64
}

/// Oversegments `cloud`; see the module docs for the procedure.
pub fn oversegment(
    cloud: &PointCloud,
    mesh: Option<&TriangleMesh>,
    cfg: &OversegConfig,
) -> Result<SuperpointGraph, SuperpointError> {
    oversegment_traced(cloud, mesh, cfg).map(|(g, _)| g)
}

pub fn oversegment_traced(
    cloud: &PointCloud,
    mesh: Option<&TriangleMesh>,
    cfg: &OversegConfig,
) -> Result<(SuperpointGraph, OversegTrace), SuperpointError> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(SuperpointError::EmptyCloud);
    }
    if cloud.valid_normal_count() == 0 {
        return Err(SuperpointError::NoValidNormals);
    }
    let n = cloud.len();
    let n_target = n.div_ceil(cfg.target_points_per_sp);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seed_points = farthest_point_seeds(&cloud.positions, n_target, &mut rng);
    let mut seeds: Vec<Seed> = seed_points
        .iter()
        .map(|&i| Seed {
            position: cloud.positions[i],
            normal: cloud.normal_valid[i].then_some(cloud.normals[i]),
        })
        .collect();
    let spacing = mean_seed_spacing(
        &seeds.iter().map(|s| s.position).collect::<Vec<_>>(),
        cloud,
    );
    let inv_r2 = 1.0 / (spacing * spacing);
    let radius = 3.0 * spacing;
    let lambda = cfg.lambda_normal;

    let energy = |i: usize, s: &Seed| -> f64 {
        let d2 = (cloud.positions[i] - s.position).norm_squared() * inv_r2;
        match s.normal {
            Some(sn) if cloud.normal_valid[i] => d2 + lambda * (1.0 - cloud.normals[i].dot(&sn).abs()),
            _ => d2,
        }
    };

    let mut trace = OversegTrace {
        n_seeds: seeds.len(),
        seed_spacing: spacing,
        ..Default::default()
    };
    let mut assignment: Vec<u32> = vec![u32::MAX; n];
    for iter in 0..cfg.lloyd_iterations {
        let index = PointIndex::new(&seeds.iter().map(|s| s.position).collect::<Vec<_>>());
        let previous = &assignment;
        let chosen: Vec<(u32, f64)> = crate::par::map_range(n, |i| {
            let p = &cloud.positions[i];
            let mut candidates = index.within(p, radius);
            // The current seed stays eligible even after drifting out of
            // range, which keeps the total energy non-increasing.
            let current = previous[i];
            if current != u32::MAX && candidates.binary_search(&(current as usize)).is_err() {
                candidates.push(current as usize);
            }
            if candidates.is_empty() {
                candidates.push(index.nearest(p).expect("seeds exist").0);
            }
            let mut best = (u32::MAX, f64::INFINITY);
            for s in candidates {
                let e = energy(i, &seeds[s]);
                if e < best.1 || (e == best.1 && (s as u32) < best.0) {
                    best = (s as u32, e);
                }
            }
            best
        });
        let total: f64 = chosen.iter().map(|c| c.1).sum();
        if let Some(&prev) = trace.energies.last() {
            debug_assert!(
                total <= prev + 1e-9 * prev.abs().max(1.0),
                "oversegmentation energy increased at iteration {iter}: {prev} -> {total}"
            );
        }
        trace.energies.push(total);
        assignment = chosen.into_iter().map(|c| c.0).collect();

        // seed update: centroid and sign-aligned mean normal of members
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); seeds.len()];
        for (i, &s) in assignment.iter().enumerate() {
            members[s as usize].push(i as u32);
        }
        for (seed, m) in seeds.iter_mut().zip(&members) {
            if m.is_empty() {
                continue;
            }
            let sum = m
                .iter()
                .fold(Vector3::zeros(), |a, &i| a + cloud.positions[i as usize].coords);
            seed.position = Point3::from(sum / m.len() as f64);
            if let Some(old) = seed.normal {
                if let Some(mean) = aligned_mean_normal(cloud, m, Some(old)) {
                    seed.normal = Some(mean);
                }
            }
        }
    }

    // split disconnected superpoints into connected components
    let adjacency = PointAdjacency::build(cloud, mesh, cfg.knn_adjacency_k);
    let mut uf = UnionFind::new(n);
    for (i, j) in adjacency.edges() {
        if assignment[i as usize] == assignment[j as usize] {
            uf.union(i as usize, j as usize);
        }
    }
    let (labels, n_groups) = uf.labels();
    let occupied: BTreeSet<u32> = assignment.iter().copied().collect();
    trace.split_extra = n_groups - occupied.len();

    let mut graph = SuperpointGraph::from_labels(&labels, n_groups, cloud);
    graph.edges = edges_from_point_adjacency(&graph.point_to_sp, &adjacency);
    Ok((graph, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_cloud(z: f64, nx: usize, ny: usize, step: f64) -> Vec<Point3<f64>> {
        (0..nx * ny)
            .map(|i| Point3::new((i % nx) as f64 * step, (i / nx) as f64 * step, z))
            .collect()
    }

    fn with_normals(points: Vec<Point3<f64>>, normals: Vec<Vector3<f64>>) -> PointCloud {
        let n = points.len();
        PointCloud::new(points, vec![[0; 3]; n], Some(normals)).unwrap()
    }

    #[test]
    fn coplanar_points_single_superpoint() {
        let pts = plane_cloud(0.0, 10, 10, 0.01);
        let cloud = with_normals(pts, vec![Vector3::z(); 100]);
        let cfg = OversegConfig {
            target_points_per_sp: 100,
            ..Default::default()
        };
        let g = oversegment(&cloud, None, &cfg).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.superpoints[0].member_count(), 100);
        assert!(g.edges.is_empty());
        g.validate(100).unwrap();
    }

    #[test]
    fn parallel_planes_separate() {
        let mut pts = plane_cloud(0.0, 5, 10, 0.1);
        pts.extend(plane_cloud(1.0, 5, 10, 0.1));
        let truth: Vec<u32> = (0..100).map(|i| (i >= 50) as u32).collect();
        let cloud = with_normals(pts, vec![Vector3::z(); 100]);
        for seed in 0..5 {
            let cfg = OversegConfig {
                target_points_per_sp: 50,
                seed,
                ..Default::default()
            };
            let g = oversegment(&cloud, None, &cfg).unwrap();
            assert_eq!(g.len(), 2, "seed {seed}");
            for sp in &g.superpoints {
                let label = truth[sp.point_indices[0] as usize];
                assert!(sp.point_indices.iter().all(|&i| truth[i as usize] == label));
                assert_eq!(sp.member_count(), 50);
            }
        }
    }

    #[test]
    fn errors() {
        let cfg = OversegConfig::default();
        assert!(matches!(
            oversegment(&PointCloud::default(), None, &cfg),
            Err(SuperpointError::EmptyCloud)
        ));
        let cloud = PointCloud::new(plane_cloud(0.0, 3, 3, 0.1), vec![[0; 3]; 9], None).unwrap();
        assert!(matches!(
            oversegment(&cloud, None, &cfg),
            Err(SuperpointError::NoValidNormals)
        ));
        let bad = OversegConfig {
            lloyd_iterations: 0,
            ..Default::default()
        };
        let cloud = with_normals(plane_cloud(0.0, 3, 3, 0.1), vec![Vector3::z(); 9]);
        assert!(matches!(
            oversegment(&cloud, None, &bad),
            Err(SuperpointError::InvalidConfig(_))
        ));
    }

    #[test]
    fn stats_examples() {
        let cloud = with_normals(plane_cloud(0.0, 8, 1, 1.0), vec![Vector3::z(); 8]);
        let g = SuperpointGraph::from_labels(&[0; 7], 1, &cloud.select(&[0, 1, 2, 3, 4, 5, 6]));
        let s = graph_stats(&g);
        assert_eq!(
            (s.n_superpoints, s.n_edges, s.mean_size, s.min_size, s.max_size),
            (1, 0, 7.0, 7, 7)
        );

        let mut g = SuperpointGraph::from_labels(&[0, 0, 0, 1, 1, 1, 1, 1], 2, &cloud);
        g.edges = vec![(0, 1)];
        let s = graph_stats(&g);
        assert_eq!(
            (s.n_superpoints, s.n_edges, s.mean_size, s.min_size, s.max_size),
            (2, 1, 4.0, 3, 5)
        );
        assert_eq!(s.mean_size * s.n_superpoints as f64, 8.0);
    }

    #[test]
    fn mesh_adjacency_two_superpoints() {
        let cloud = with_normals(plane_cloud(0.0, 2, 2, 1.0), vec![Vector3::z(); 4]);
        let mesh = TriangleMesh::new(cloud.positions.clone(), vec![[0, 1, 2], [1, 3, 2]], &cloud, 0.01).unwrap();
        let g = SuperpointGraph::from_labels(&[0, 0, 1, 1], 2, &cloud);
        let g = build_adjacency(&g, &cloud, Some(&mesh), 8);
        assert_eq!(g.edges, vec![(0, 1)]);

        let single = SuperpointGraph::from_labels(&[0; 4], 1, &cloud);
        assert!(build_adjacency(&single, &cloud, Some(&mesh), 8).edges.is_empty());
    }

    #[test]
    fn json_roundtrip() {
        let cloud = with_normals(plane_cloud(0.0, 4, 1, 1.0), vec![Vector3::z(); 4]);
        let mut g = SuperpointGraph::from_labels(&[0, 0, 1, 2], 3, &cloud);
        g.edges = vec![(0, 1), (1, 2)];
        let back = SuperpointGraph::from_json(&g.to_json(), &cloud).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn validate_catches_broken_partition() {
        let cloud = with_normals(plane_cloud(0.0, 4, 1, 1.0), vec![Vector3::z(); 4]);
        let mut g = SuperpointGraph::from_labels(&[0, 0, 1, 1], 2, &cloud);
        g.point_to_sp[3] = 0;
        assert!(g.validate(4).is_err());
        let mut g = SuperpointGraph::from_labels(&[0, 0, 1, 1], 2, &cloud);
        g.edges = vec![(1, 1)];
        assert!(g.validate(4).is_err());
    }
}
