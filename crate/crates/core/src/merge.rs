//! Greedy merging of adjacent superpoints with near-identical features,
//! alternated with feature re-extraction.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature::{
    decode_feature_set, encode_feature_set, extract_features, FeatureConfig, FeatureError, FeatureProvider,
    FeatureSet, FeatureVector, ViewSelection,
};
use crate::scene_io::{ArtifactKind, CacheCodec, CacheReader, CacheWriter, CameraView, PointCloud, SceneError};
use crate::superpoint::{Superpoint, SuperpointGraph};
use crate::union_find::UnionFind;
use crate::visibility::VisibilityTable;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("invalid merge config: {0}")]
    InvalidConfig(String),
    #[error("features do not match the graph: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("checkpoint failed: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub tau: f64,
    pub rounds: usize,
    pub reextract_each_round: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            rounds: 8,
            reextract_each_round: true,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<(), MergeError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(MergeError::InvalidConfig(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64, FeatureError> {
    a.dot(b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeDecision {
    pub round: usize,
    /// Input superpoint ids of the edge that triggered the merge.
    pub edge: (u32, u32),
    /// Similarity of the two live representatives at decision time.
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub n_superpoints_before: usize,
    pub n_merges: usize,
    pub n_superpoints_after: usize,
    /// Mean similarity over edges whose endpoints both have features.
    pub mean_edge_similarity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub rounds: Vec<RoundReport>,
}

impl MergeReport {
    /// One JSON record per round.
    pub fn to_json_lines(&self) -> String {
        self.rounds
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain struct serializes") + "\n")
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct MergeRoundOutput {
    pub graph: SuperpointGraph,
    /// Input superpoint id → output superpoint id.
    pub old_to_new: Vec<u32>,
    pub decisions: Vec<MergeDecision>,
    pub report: RoundReport,
    /// Unmerged superpoints keep their feature; merged ones get the
    /// point-count-weighted mean of their constituents.
    pub features: FeatureSet,
    /// Output ids that are the union of two or more input superpoints.
    pub changed: BTreeSet<u32>,
}

fn check_features(graph: &SuperpointGraph, features: &FeatureSet) -> Result<(), MergeError> {
    if let Some((&sp, _)) = features.features.iter().find(|(&sp, _)| sp as usize >= graph.len()) {
        return Err(MergeError::Inconsistent(format!("feature for unknown superpoint {sp}")));
    }
    if let Some(f) = features.features.values().find(|f| f.dim() != features.dim) {
        return Err(MergeError::Inconsistent(format!("feature of dim {} in a set of dim {}", f.dim(), features.dim)));
    }
    Ok(())
}

/// One descending-similarity greedy pass; see the crate docs.
pub fn merge_round(
    graph: &SuperpointGraph,
    cloud: &PointCloud,
    features: &FeatureSet,
    tau: f64,
    round: usize,
) -> Result<MergeRoundOutput, MergeError> {
    check_features(graph, features)?;
    let n = graph.len();

    let mut scored: Vec<(f64, u32, u32)> = Vec::with_capacity(graph.edges.len());
    for &(a, b) in &graph.edges {
        if let (Some(fa), Some(fb)) = (features.get(a), features.get(b)) {
            scored.push((cosine_similarity(fa, fb)?, a, b));
        }
    }
    let mean_edge_similarity =
        (!scored.is_empty()).then(|| scored.iter().map(|s| s.0).sum::<f64>() / scored.len() as f64);
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));

    // live representatives: unnormalized count-weighted sums per root
    let mut sums: Vec<Option<Vec<f64>>> = (0..n as u32)
        .map(|sp| {
            let c = graph.superpoints[sp as usize].member_count() as f64;
            features.get(sp).map(|f| f.as_slice().iter().map(|x| x * c).collect())
        })
        .collect();
    let rep = |s: &Vec<f64>| FeatureVector::new(s.clone());

    let mut uf = UnionFind::new(n);
    let mut decisions = Vec::new();
    for &(_, a, b) in &scored {
        let (ra, rb) = (uf.find(a as usize), uf.find(b as usize));
        if ra == rb {
            continue;
        }
        let (Some(sa), Some(sb)) = (&sums[ra], &sums[rb]) else {
            continue;
        };
        let similarity = cosine_similarity(&rep(sa)?, &rep(sb)?)?;
        if similarity < tau {
            continue;
        }
        let merged: Vec<f64> = sa.iter().zip(sb).map(|(x, y)| x + y).collect();
        let root = uf.union(ra, rb).expect("distinct roots");
        sums[ra] = None;
        sums[rb] = None;
        sums[root] = Some(merged);
        debug_assert!(similarity >= tau);
        log::debug!("round {round}: merge {a}-{b} at similarity {similarity:.6}");
        decisions.push(MergeDecision {
            round,
            edge: (a, b),
            similarity,
        });
    }

    let (old_to_new, n_new) = uf.labels();
    let mut groups: Vec<Vec<u32>> = vec![Vec::new(); n_new];
    for (old, &new) in old_to_new.iter().enumerate() {
        groups[new as usize].push(old as u32);
    }
    let mut out_features = FeatureSet {
        provider: features.provider.clone(),
        dim: features.dim,
        features: Default::default(),
    };
    let mut changed = BTreeSet::new();
    let mut superpoints = Vec::with_capacity(n_new);
    for (new, members) in groups.iter().enumerate() {
        let new = new as u32;
        if members.len() == 1 {
            let old = &graph.superpoints[members[0] as usize];
            superpoints.push(Superpoint { id: new, ..old.clone() });
            if let Some(f) = features.get(members[0]) {
                out_features.features.insert(new, f.clone());
            }
            continue;
        }
        changed.insert(new);
        let mut points: Vec<u32> = members
            .iter()
            .flat_map(|&m| graph.superpoints[m as usize].point_indices.iter().copied())
            .collect();
        points.sort_unstable();
        superpoints.push(Superpoint::from_members(new, points, cloud));
        let root = uf.find(members[0] as usize);
        let sum = sums[root].as_ref().expect("merged groups carry features");
        out_features.features.insert(new, rep(sum)?);
    }
    let point_to_sp = graph.point_to_sp.iter().map(|&s| old_to_new[s as usize]).collect();
    let edges: BTreeSet<(u32, u32)> = graph
        .edges
        .iter()
        .filter_map(|&(a, b)| {
            let (x, y) = (old_to_new[a as usize], old_to_new[b as usize]);
            (x != y).then(|| (x.min(y), x.max(y)))
        })
        .collect();
    let report = RoundReport {
        round,
        n_superpoints_before: n,
        n_merges: decisions.len(),
        n_superpoints_after: n_new,
        mean_edge_similarity,
    };
    Ok(MergeRoundOutput {
        graph: SuperpointGraph {
            superpoints,
            edges: edges.into_iter().collect(),
            point_to_sp,
        },
        old_to_new,
        decisions,
        report,
        features: out_features,
        changed,
    })
}

/// Loop state, written after every round so an interrupted run resumes.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeState {
    pub rounds_done: usize,
    /// Set once a round performs no merge.
    pub converged: bool,
    pub graph: SuperpointGraph,
    pub features: FeatureSet,
    pub report: MergeReport,
}

impl MergeState {
    pub fn initial(graph: SuperpointGraph, features: FeatureSet) -> Self {
        Self {
            rounds_done: 0,
            converged: false,
            graph,
            features,
            report: MergeReport::default(),
        }
    }

    pub fn is_done(&self, cfg: &MergeConfig) -> bool {
        self.converged || self.rounds_done >= cfg.rounds
    }
}

impl CacheCodec for MergeState {
    const KIND: ArtifactKind = ArtifactKind::MergeCheckpoint;

    fn encode(&self, w: &mut CacheWriter) {
        w.len(self.rounds_done);
        w.bool(self.converged);
        self.graph.encode(w);
        encode_feature_set(&self.features, w);
        w.str(&serde_json::to_string(&self.report).expect("report serializes"));
    }

    fn decode(r: &mut CacheReader<'_>) -> Result<Self, SceneError> {
        let rounds_done = r.u64()? as usize;
        let converged = r.bool()?;
        let graph = SuperpointGraph::decode(r)?;
        let features = decode_feature_set(r)?;
        let report = serde_json::from_str(&r.str()?).map_err(|e| SceneError::CorruptCache(e.to_string()))?;
        Ok(Self {
            rounds_done,
            converged,
            graph,
            features,
            report,
        })
    }
}

/// Everything feature re-extraction needs between rounds.
pub struct Reextraction<'a> {
    /// Visibility of the initial graph; regrouped after each round.
    pub table: &'a VisibilityTable,
    pub views: &'a [CameraView],
    pub provider: &'a dyn FeatureProvider,
    pub feature_cfg: &'a FeatureConfig,
    pub selection: ViewSelection,
}

/// Runs rounds until `cfg.rounds` are done or one performs no merge,
/// calling `checkpoint` after every round. Pass a saved state to resume.
pub fn run_merge_loop(
    state: MergeState,
    cloud: &PointCloud,
    cfg: &MergeConfig,
    reextract: Option<&Reextraction<'_>>,
    mut checkpoint: impl FnMut(&MergeState, &MergeRoundOutput) -> Result<(), MergeError>,
) -> Result<MergeState, MergeError> {
    cfg.validate()?;
    let mut state = state;
    while !state.is_done(cfg) {
        let round = state.rounds_done + 1;
        let out = merge_round(&state.graph, cloud, &state.features, cfg.tau, round)?;
        let mut features = out.features.clone();
        if let (Some(rx), true) = (reextract, cfg.reextract_each_round && !out.changed.is_empty()) {
            let table = rx.table.regroup(&out.graph.point_to_sp);
            let fresh = extract_features(
                &out.graph,
                &table,
                rx.views,
                rx.provider,
                rx.feature_cfg,
                rx.selection,
                Some(&out.changed),
            )?;
            if fresh.dim != features.dim {
                return Err(FeatureError::DimMismatch {
                    expected: features.dim,
                    found: fresh.dim,
                }
                .into());
            }
            features.features.extend(fresh.features);
        }
        state.report.rounds.push(out.report.clone());
        state.converged = out.report.n_merges == 0;
        state.rounds_done = round;
        state.graph = out.graph.clone();
        state.features = features;
        checkpoint(&state, &out)?;
    }
    Ok(state)
}
