//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use image::RgbImage;
use nalgebra::{Matrix3x4, Matrix4, Point3, Quaternion, UnitQuaternion, Vector3, Vector4};
use ovseg_core::feature::{BinaryMask, FeatureError, FeatureProvider, FeatureVector, ProviderInfo, SyntheticProvider};
use ovseg_core::pipeline::{prepare_in_memory, run_features, FeaturesArtifact, PipelineConfig, PreparedScene};
use ovseg_core::synthetic::{generate, SyntheticConfig, SyntheticScene};
use ovseg_core::{CameraView, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------- voxels

pub struct VoxelCell {
    pub count: usize,
    pub centroid: Point3<f64>,
    pub color: [u8; 3],
}

type Key = (i64, i64, i64);

/// Hash-grid counting: one cell per occupied `floor(p / s)` key, in order of
/// first occurrence.
pub fn voxel_oracle(cloud: &PointCloud, s: f64) -> Vec<VoxelCell> {
    let mut order: Vec<Key> = Vec::new();
    let mut cells: HashMap<Key, (usize, [f64; 3], [u64; 3])> = HashMap::new();
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        let key = ((p.x / s).floor() as i64, (p.y / s).floor() as i64, (p.z / s).floor() as i64);
        let e = cells.entry(key).or_insert_with(|| {
            order.push(key);
            (0, [0.0; 3], [0; 3])
        });
        e.0 += 1;
        for a in 0..3 {
            e.1[a] += p[a];
            e.2[a] += u64::from(c[a]);
        }
    }
    order
        .iter()
        .map(|k| {
            let (n, sum, col) = cells[k];
            VoxelCell {
                count: n,
                centroid: Point3::new(sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64),
                color: col.map(|c| ((2 * c + n as u64) / (2 * n as u64)) as u8),
            }
        })
        .collect()
}

pub fn random_cloud(rng: &mut impl Rng, n: usize, extent: f64) -> PointCloud {
    let positions = (0..n)
        .map(|_| Point3::new(rng.random::<f64>() * extent, rng.random::<f64>() * extent, rng.random::<f64>() * extent))
        .collect();
    let colors = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let normals = (0..n)
        .map(|_| Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng)).normalize())
        .collect();
    PointCloud::new(positions, colors, Some(normals)).unwrap()
}

// ------------------------------------------------------------ projection

pub fn random_pose(rng: &mut impl Rng) -> Matrix4<f64> {
    let q = UnitQuaternion::from_quaternion(Quaternion::new(gaussian(rng), gaussian(rng), gaussian(rng), gaussian(rng)));
    let mut m = q.to_homogeneous();
    for a in 0..3 {
        m[(a, 3)] = (rng.random::<f64>() - 0.5) * 6.0;
    }
    m
}

/// Full 3×4 projection matrix applied to homogeneous coordinates.
pub fn project_oracle(p: &Point3<f64>, view: &CameraView) -> Option<[f64; 2]> {
    let k = &view.intrinsics;
    let extrinsic = view.cam_to_world.try_inverse().expect("invertible pose");
    let mut kk = Matrix3x4::zeros();
    kk[(0, 0)] = k.fx;
    kk[(1, 1)] = k.fy;
    kk[(0, 2)] = k.cx;
    kk[(1, 2)] = k.cy;
    kk[(2, 2)] = 1.0;
    let x = kk * extrinsic * Vector4::new(p.x, p.y, p.z, 1.0);
    if x[2] <= 0.0 {
        return None;
    }
    let (u, v) = (x[0] / x[2], x[1] / x[2]);
    (u >= 0.0 && v >= 0.0 && u < k.width as f64 && v < k.height as f64).then_some([u, v])
}

/// Whether the open segment from the camera center to `p` is unobstructed.
pub fn raycast_visible(scene: &SyntheticScene, view: &CameraView, p: &Point3<f64>) -> bool {
    let eye = view.center();
    let dir = p - eye;
    match ovseg_core::synthetic::cast(&scene.surfaces, &eye, &dir) {
        Some((t, _)) => t >= 1.0 - 1e-9,
        None => true,
    }
}

// ----------------------------------------------------------------- merge

pub struct MergeCase {
    pub sizes: Vec<usize>,
    pub edges: Vec<(u32, u32)>,
    pub features: Vec<Option<Vec<f64>>>,
}

pub struct MergeOutcome {
    pub partition: BTreeSet<BTreeSet<u32>>,
    pub n_merges: usize,
    /// Representative of each merged group, keyed by its smallest member.
    pub merged_features: BTreeMap<u32, Vec<f64>>,
}

/// Sequential application of the merge rule on explicit member lists.
pub fn merge_oracle(case: &MergeCase, tau: f64) -> MergeOutcome {
    let n = case.sizes.len();
    let mut owner: Vec<usize> = (0..n).collect();
    let mut scored: Vec<(f64, u32, u32)> = case
        .edges
        .iter()
        .filter_map(|&(a, b)| {
            let (fa, fb) = (case.features[a as usize].as_ref()?, case.features[b as usize].as_ref()?);
            Some((dot(fa, fb), a, b))
        })
        .collect();
    scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then((x.1, x.2).cmp(&(y.1, y.2))));
    let rep = |owner: &[usize], g: usize| -> Vec<f64> {
        let dim = case.features.iter().flatten().next().unwrap().len();
        let mut s = vec![0.0; dim];
        for i in (0..n).filter(|&i| owner[i] == g) {
            let f = case.features[i].as_ref().unwrap();
            for d in 0..dim {
                s[d] += case.sizes[i] as f64 * f[d];
            }
        }
        unit(&s)
    };
    let mut n_merges = 0;
    for (_, a, b) in scored {
        let (ga, gb) = (owner[a as usize], owner[b as usize]);
        if ga == gb {
            continue;
        }
        if dot(&rep(&owner, ga), &rep(&owner, gb)) >= tau {
            for o in owner.iter_mut() {
                if *o == gb {
                    *o = ga;
                }
            }
            n_merges += 1;
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<u32>> = BTreeMap::new();
    for (i, &g) in owner.iter().enumerate() {
        groups.entry(g).or_default().insert(i as u32);
    }
    let merged_features = groups
        .iter()
        .filter(|(_, m)| m.len() > 1)
        .map(|(&g, m)| (*m.iter().next().unwrap(), rep(&owner, g)))
        .collect();
    MergeOutcome {
        partition: groups.into_values().collect(),
        n_merges,
        merged_features,
    }
}

/// Small random graph whose features cluster around a few prototypes, so
/// that merges above 0.95 are common.
pub fn random_merge_case(rng: &mut impl Rng, max_nodes: usize) -> MergeCase {
    let n = rng.random_range(2..=max_nodes);
    let dim = 3;
    let protos: Vec<Vec<f64>> = (0..rng.random_range(1..=3))
        .map(|_| unit(&(0..dim).map(|_| gaussian(rng)).collect::<Vec<_>>()))
        .collect();
    let spread = rng.random_range(0.02..0.35);
    let features = (0..n)
        .map(|_| {
            if rng.random::<f64>() < 0.1 {
                return None;
            }
            let p = &protos[rng.random_range(0..protos.len())];
            Some(unit(&p.iter().map(|x| x + spread * gaussian(rng)).collect::<Vec<_>>()))
        })
        .collect();
    let mut edges = Vec::new();
    for a in 0..n as u32 {
        for b in a + 1..n as u32 {
            if rng.random::<f64>() < 0.5 {
                edges.push((a, b));
            }
        }
    }
    MergeCase {
        sizes: (0..n).map(|_| rng.random_range(1..=4)).collect(),
        edges,
        features,
    }
}

// ------------------------------------------------------------- clustering

/// Quadratic DBSCAN: neighborhoods include the point itself and use
/// `d² ≤ ε²`; border points join the cluster of their nearest core
/// neighbor (ties to the lexicographically smaller position); groups below
/// the minimum size are dropped.
pub fn dbscan_oracle(points: &[u32], cloud: &PointCloud, eps: f64, min: usize) -> BTreeSet<BTreeSet<u32>> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    let pos: Vec<Point3<f64>> = pts.iter().map(|&i| cloud.positions[i as usize]).collect();
    let n = pts.len();
    let e2 = eps * eps;
    let nbrs: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| (pos[i] - pos[j]).norm_squared() <= e2).collect())
        .collect();
    let core: Vec<bool> = nbrs.iter().map(|v| v.len() >= min).collect();
    let mut cluster = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || cluster[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        cluster[s] = next;
        while let Some(i) = stack.pop() {
            for &j in &nbrs[i] {
                if core[j] && cluster[j] == usize::MAX {
                    cluster[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    let key = |a: usize| (pos[a].x, pos[a].y, pos[a].z);
    let mut groups: BTreeMap<usize, BTreeSet<u32>> = BTreeMap::new();
    for i in 0..n {
        let c = if core[i] {
            Some(cluster[i])
        } else {
            nbrs[i]
                .iter()
                .copied()
                .filter(|&j| core[j])
                .min_by(|&a, &b| {
                    (pos[a] - pos[i])
                        .norm_squared()
                        .partial_cmp(&(pos[b] - pos[i]).norm_squared())
                        .unwrap()
                        .then(key(a).partial_cmp(&key(b)).unwrap())
                })
                .map(|j| cluster[j])
        };
        if let Some(c) = c {
            groups.entry(c).or_default().insert(pts[i]);
        }
    }
    groups.into_values().filter(|g| g.len() >= min).collect()
}

/// Gaussian blobs plus uniform noise in a unit cube.
pub fn blob_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    let k = rng.random_range(1..=5);
    let centers: Vec<[f64; 3]> = (0..k).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let sigma: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..0.08)).collect();
    let positions = (0..n)
        .map(|_| {
            if rng.random::<f64>() < 0.15 {
                Point3::new(rng.random(), rng.random(), rng.random())
            } else {
                let b = rng.random_range(0..k);
                let c = centers[b];
                Point3::new(
                    c[0] + sigma[b] * gaussian(rng),
                    c[1] + sigma[b] * gaussian(rng),
                    c[2] + sigma[b] * gaussian(rng),
                )
            }
        })
        .collect();
    PointCloud::new(positions, vec![[0; 3]; n], None).unwrap()
}

// --------------------------------------------------------------- fixtures

pub struct SyntheticRun {
    pub scene: SyntheticScene,
    pub cfg: PipelineConfig,
    pub prepared: PreparedScene,
    pub artifact: FeaturesArtifact,
    pub provider: SyntheticProvider,
}

pub fn synthetic_config(spacing: f64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.override_providers("synthetic");
    cfg.cluster.epsilon = 3.0 * spacing;
    cfg.cluster.min_cluster_size = 20;
    cfg
}

/// The in-memory pipeline on the synthetic scene with the synthetic provider.
pub fn synthetic_run(spacing: f64) -> SyntheticRun {
    let scene = generate(&SyntheticConfig {
        spacing,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let cfg = synthetic_config(spacing);
    let provider = SyntheticProvider::new("synthetic-16", 16).unwrap();
    let prepared = prepare_in_memory(scene.bundle.clone(), &cfg).unwrap();
    assert_eq!(
        prepared.bundle.cloud.positions, scene.bundle.cloud.positions,
        "downsampling must not touch the fixture so labels stay aligned"
    );
    let artifact = run_features(&prepared, &cfg, &provider, &provider, None, |_| Ok(())).unwrap();
    SyntheticRun {
        scene,
        cfg,
        prepared,
        artifact,
        provider,
    }
}

/// Majority ground-truth label of every superpoint.
pub fn majority_labels(labels: &[u32], point_to_sp: &[u32], n_sp: usize) -> Vec<u32> {
    let mut votes: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); n_sp];
    for (i, &sp) in point_to_sp.iter().enumerate() {
        *votes[sp as usize].entry(labels[i]).or_default() += 1;
    }
    votes
        .iter()
        .map(|v| *v.iter().max_by_key(|(l, c)| (**c, std::cmp::Reverse(**l))).unwrap().0)
        .collect()
}

pub fn iou(a: &BTreeSet<u32>, b: &BTreeSet<u32>) -> f64 {
    let inter = a.intersection(b).count() as f64;
    let union = a.union(b).count() as f64;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

// ---------------------------------------------------------------- logging

/// Provider wrapper recording `(provider name, operation)` for every call.
pub struct Logged<P> {
    pub inner: P,
    pub log: Arc<Mutex<Vec<(String, &'static str)>>>,
}

impl<P: FeatureProvider> Logged<P> {
    fn note(&self, op: &'static str) {
        self.log.lock().unwrap().push((self.inner.info().name.clone(), op));
    }
}

impl<P: FeatureProvider> FeatureProvider for Logged<P> {
    fn info(&self) -> &ProviderInfo {
        self.inner.info()
    }
    fn embed_image(&self, image: &RgbImage) -> Result<FeatureVector, FeatureError> {
        self.note("embed_image");
        self.inner.embed_image(image)
    }
    fn embed_text(&self, text: &str) -> Result<FeatureVector, FeatureError> {
        self.note("embed_text");
        self.inner.embed_text(text)
    }
    fn segment(&self, image: &RgbImage, prompts: &[[f64; 2]]) -> Result<BinaryMask, FeatureError> {
        self.note("segment");
        self.inner.segment(image, prompts)
    }
}
