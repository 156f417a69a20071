//! Staged, content-addressed orchestration of the whole pipeline.
//!
//! Stages and the artifacts they leave in the cache directory:
//!
//! | stage        | artifact                      | key covers                                   |
//! |--------------|-------------------------------|----------------------------------------------|
//! | `load`       | `load-<key>.ovsg`             | bytes of the manifest and every file it names |
//! | `downsample` | `downsample-<key>.ovsg`       | load key, voxel size                          |
//! | `normals`    | `normals-<key>.ovsg`          | downsample key, neighbor count                |
//! | `overseg`    | `overseg-<key>.ovsg`          | normals key, oversegmentation config, seed    |
//! | `visibility` | `visibility-<key>.ovsg`       | overseg key, occlusion config                 |
//! | `features`   | `features-<key>.ovsg`         | visibility key, feature/merge config, providers, seed |
//!
//! A stage whose artifact exists is loaded instead of recomputed. The
//! features stage also keeps `merge-<key>.ovsg`, a checkpoint rewritten after
//! every merge round, so an interrupted run resumes where it stopped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::feature::{
    decode_feature_set, encode_feature_set, extract_features, FeatureConfig, FeatureError, FeatureProvider,
    FeatureSet, SyntheticProvider, ViewSelection,
};
use crate::merge::{run_merge_loop, MergeConfig, MergeError, MergeReport, MergeState, Reextraction};
use crate::query::{ClusterConfig, QueryError};
use crate::scene_io::{
    fill_invalid_normals, load_scene, manifest_inputs, read_cache_file, voxel_downsample, write_cache_file,
    ArtifactKind, CacheCodec, CacheReader, CacheWriter, SceneBundle, SceneError, SceneGeometry,
    DEFAULT_VOXEL_SIZE,
};
use crate::superpoint::{build_adjacency, oversegment, OversegConfig, SuperpointError, SuperpointGraph};
use crate::visibility::{build_visibility, OcclusionConfig, VisibilityError, VisibilityTable};

#[cfg(feature = "http")]
use crate::feature::{HttpProvider, HttpProviderConfig};

/// Provider spec that selects the in-process [`SyntheticProvider`].
pub const SYNTHETIC: &str = "synthetic";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` has not been run: {hint}")]
    MissingStage { stage: &'static str, hint: String },
    #[error("provider failure: {0}")]
    Provider(FeatureError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Superpoint(#[from] SuperpointError),
    #[error(transparent)]
    Visibility(#[from] VisibilityError),
    #[error(transparent)]
    Feature(FeatureError),
    #[error(transparent)]
    Merge(MergeError),
    #[error(transparent)]
    Query(QueryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<FeatureError> for PipelineError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::ProviderUnavailable(_) | FeatureError::ProviderProtocol(_) => Self::Provider(e),
            other => Self::Feature(other),
        }
    }
}

impl From<MergeError> for PipelineError {
    fn from(e: MergeError) -> Self {
        match e {
            MergeError::Feature(f) => f.into(),
            other => Self::Merge(other),
        }
    }
}

impl From<QueryError> for PipelineError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::Feature(f) => f.into(),
            other => Self::Query(other),
        }
    }
}

impl PipelineError {
    /// 0 success, 1 I/O, 2 validation, 3 missing stage, 4 provider failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingStage { .. } => 3,
            Self::Provider(_) => 4,
            Self::Io(_) | Self::Scene(SceneError::Io(_)) => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    /// Relative paths resolve against the config file's directory.
    pub manifest: PathBuf,
    pub voxel_size: f64,
    /// Neighbors used to estimate missing normals.
    pub normal_k: usize,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("scene.json"),
            voxel_size: DEFAULT_VOXEL_SIZE,
            normal_k: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    /// Base URL of the model service used while merging, or `"synthetic"`.
    pub merge: String,
    /// Base URL of the model service used for the final features and for
    /// queries, or `"synthetic"`.
    pub query: String,
    pub synthetic_dim: usize,
    #[cfg(feature = "http")]
    pub http: HttpProviderConfig,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            merge: "http://127.0.0.1:8765".into(),
            query: "http://127.0.0.1:8765".into(),
            synthetic_dim: 16,
            #[cfg(feature = "http")]
            http: HttpProviderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub cache_dir: PathBuf,
    pub scene: SceneSection,
    pub overseg: OversegConfig,
    pub occlusion: OcclusionConfig,
    pub views: ViewSelection,
    pub features: FeatureConfig,
    pub merge: MergeConfig,
    pub cluster: ClusterConfig,
    pub providers: ProviderSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cache_dir: PathBuf::from("cache"),
            scene: SceneSection::default(),
            overseg: OversegConfig::default(),
            occlusion: OcclusionConfig::default(),
            views: ViewSelection::default(),
            features: FeatureConfig::default(),
            merge: MergeConfig::default(),
            cluster: ClusterConfig::default(),
            providers: ProviderSection::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let de = toml::Deserializer::parse(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| PipelineError::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Every field written out, defaults included.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: String| PipelineError::Config(e);
        if !(self.scene.voxel_size > 0.0 && self.scene.voxel_size.is_finite()) {
            return Err(cfg("scene.voxel_size must be > 0".into()));
        }
        if self.scene.normal_k < 3 {
            return Err(cfg("scene.normal_k must be >= 3".into()));
        }
        if self.views.k < 1 {
            return Err(cfg("views.k must be >= 1".into()));
        }
        if self.providers.synthetic_dim < 8 {
            return Err(cfg("providers.synthetic_dim must be >= 8".into()));
        }
        self.overseg.validate().map_err(|e| cfg(e.to_string()))?;
        self.occlusion.validate().map_err(|e| cfg(e.to_string()))?;
        self.features.validate().map_err(|e| cfg(e.to_string()))?;
        self.merge.validate().map_err(|e| cfg(e.to_string()))?;
        self.cluster.validate().map_err(|e| cfg(e.to_string()))?;
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.base_dir.join(&self.scene.manifest)
    }

    pub fn cache_path(&self) -> PathBuf {
        self.base_dir.join(&self.cache_dir)
    }

    /// Replaces both provider specs, e.g. with [`SYNTHETIC`].
    pub fn override_providers(&mut self, spec: &str) {
        self.providers.merge = spec.to_owned();
        self.providers.query = spec.to_owned();
    }

    fn artifact(&self, stage: &str, key: &str) -> PathBuf {
        self.cache_path().join(format!("{stage}-{key}.ovsg"))
    }
}

/// RNG seed of one stage, independent of every other stage's.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

struct KeyHasher(Sha256);

impl KeyHasher {
    fn new(stage: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"ovsg-stage\0");
        h.update(stage.as_bytes());
        Self(h)
    }

    fn field(mut self, bytes: &[u8]) -> Self {
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
        self
    }

    fn json(self, value: &impl Serialize) -> Self {
        let v = serde_json::to_vec(value).expect("config serializes");
        self.field(&v)
    }

    fn finish(self) -> String {
        self.0.finalize()[..10].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Cached,
    Computed,
    Resumed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: &'static str,
    pub key: String,
    pub status: StageStatus,
}

fn cached_or<T: CacheCodec>(
    path: &Path,
    stage: &'static str,
    key: &str,
    records: &mut Vec<StageRecord>,
    compute: impl FnOnce() -> Result<T, PipelineError>,
) -> Result<T, PipelineError> {
    if path.exists() {
        match read_cache_file::<T>(path) {
            Ok(v) => {
                log::info!("{stage}: cached ({key})");
                records.push(StageRecord {
                    stage,
                    key: key.to_owned(),
                    status: StageStatus::Cached,
                });
                return Ok(v);
            }
            Err(e) => log::warn!("{stage}: ignoring unreadable cache {}: {e}", path.display()),
        }
    }
    log::info!("{stage}: computing ({key})");
    let v = compute()?;
    write_cache_file(path, &v)?;
    records.push(StageRecord {
        stage,
        key: key.to_owned(),
        status: StageStatus::Computed,
    });
    Ok(v)
}

/// Stage keys derived from the config and the input files, without running
/// anything.
#[derive(Clone, Debug, PartialEq)]
pub struct StageKeys {
    pub load: String,
    pub downsample: String,
    pub normals: String,
    pub overseg: String,
    pub visibility: String,
    pub features: String,
}

impl StageKeys {
    pub fn compute(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let manifest = cfg.manifest_path();
        let root = manifest.parent().unwrap_or(Path::new("."));
        let mut load = KeyHasher::new("load");
        for path in manifest_inputs(&manifest)? {
            if !path.exists() {
                return Err(SceneError::MissingFile(path).into());
            }
            let name = path.strip_prefix(root).unwrap_or(&path);
            load = load.field(name.to_string_lossy().as_bytes()).field(&std::fs::read(&path)?);
        }
        let load = load.finish();
        let downsample = KeyHasher::new("downsample")
            .field(load.as_bytes())
            .field(&cfg.scene.voxel_size.to_le_bytes())
            .finish();
        let normals = KeyHasher::new("normals")
            .field(downsample.as_bytes())
            .field(&(cfg.scene.normal_k as u64).to_le_bytes())
            .finish();
        let overseg = KeyHasher::new("overseg")
            .field(normals.as_bytes())
            .json(&cfg.overseg)
            .field(&stage_seed(cfg.seed, "overseg").to_le_bytes())
            .finish();
        let visibility = KeyHasher::new("visibility")
            .field(overseg.as_bytes())
            .json(&cfg.occlusion)
            .finish();
        let features = KeyHasher::new("features")
            .field(visibility.as_bytes())
            .json(&cfg.views)
            .json(&cfg.features)
            .json(&cfg.merge)
            .field(cfg.providers.merge.as_bytes())
            .field(cfg.providers.query.as_bytes())
            .field(&(cfg.providers.synthetic_dim as u64).to_le_bytes())
            .field(&stage_seed(cfg.seed, "features").to_le_bytes())
            .finish();
        Ok(Self {
            load,
            downsample,
            normals,
            overseg,
            visibility,
            features,
        })
    }
}

/// Output of [`cmd_prepare`]: the processed scene, its oversegmentation and
/// visibility.
pub struct Prepared {
    pub bundle: SceneBundle,
    pub graph: SuperpointGraph,
    pub table: VisibilityTable,
    pub keys: StageKeys,
    pub records: Vec<StageRecord>,
}

fn downsample_stage(raw: &SceneBundle, cfg: &PipelineConfig) -> Result<SceneGeometry, PipelineError> {
    let cloud = voxel_downsample(&raw.cloud, cfg.scene.voxel_size)?;
    let mesh = match &raw.mesh {
        Some(m) => {
            let mut m = m.clone();
            m.remap(&cloud, 2.0 * cfg.scene.voxel_size)?;
            Some(m)
        }
        None => None,
    };
    Ok(SceneGeometry {
        cloud,
        mesh,
        voxel_size: cfg.scene.voxel_size,
    })
}

fn normals_stage(down: &SceneGeometry, cfg: &PipelineConfig) -> Result<SceneGeometry, PipelineError> {
    let mut g = down.clone();
    if g.cloud.valid_normal_count() < g.cloud.len() && g.cloud.len() > cfg.scene.normal_k {
        g.cloud = fill_invalid_normals(&g.cloud, cfg.scene.normal_k)?;
    }
    Ok(g)
}

fn overseg_stage(bundle: &SceneBundle, cfg: &PipelineConfig) -> Result<SuperpointGraph, PipelineError> {
    let mut ocfg = cfg.overseg.clone();
    ocfg.seed = stage_seed(cfg.seed, "overseg");
    let g = oversegment(&bundle.cloud, bundle.mesh.as_ref(), &ocfg)?;
    Ok(build_adjacency(&g, &bundle.cloud, bundle.mesh.as_ref(), ocfg.knn_adjacency_k))
}

fn assemble(raw_views: Vec<crate::scene_io::CameraView>, geometry: SceneGeometry) -> Result<SceneBundle, PipelineError> {
    let bundle = SceneBundle {
        cloud: geometry.cloud,
        mesh: geometry.mesh,
        views: raw_views,
        voxel_size: geometry.voxel_size,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Processed scene, oversegmentation and visibility.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub bundle: SceneBundle,
    pub graph: SuperpointGraph,
    pub table: VisibilityTable,
}

/// The prepare stages on an already loaded scene, without any cache.
pub fn prepare_in_memory(raw: SceneBundle, cfg: &PipelineConfig) -> Result<PreparedScene, PipelineError> {
    cfg.validate()?;
    let geometry = normals_stage(&downsample_stage(&raw, cfg)?, cfg)?;
    let bundle = assemble(raw.views, geometry)?;
    let graph = overseg_stage(&bundle, cfg)?;
    let table = build_visibility(&graph, &bundle.cloud, &bundle.views, &cfg.occlusion)?;
    Ok(PreparedScene { bundle, graph, table })
}

/// Loads, downsamples, fills normals, oversegments and computes visibility,
/// reusing every cached stage.
pub fn cmd_prepare(cfg: &PipelineConfig) -> Result<Prepared, PipelineError> {
    cfg.validate()?;
    std::fs::create_dir_all(cfg.cache_path())?;
    let keys = StageKeys::compute(cfg)?;
    let mut records = Vec::new();

    let raw: SceneBundle = cached_or(&cfg.artifact("load", &keys.load), "load", &keys.load, &mut records, || {
        Ok(load_scene(&cfg.manifest_path())?)
    })?;
    let down: SceneGeometry = cached_or(
        &cfg.artifact("downsample", &keys.downsample),
        "downsample",
        &keys.downsample,
        &mut records,
        || downsample_stage(&raw, cfg),
    )?;
    let geometry: SceneGeometry = cached_or(
        &cfg.artifact("normals", &keys.normals),
        "normals",
        &keys.normals,
        &mut records,
        || normals_stage(&down, cfg),
    )?;
    drop(down);
    let bundle = assemble(raw.views, geometry)?;
    let graph: SuperpointGraph = cached_or(
        &cfg.artifact("overseg", &keys.overseg),
        "overseg",
        &keys.overseg,
        &mut records,
        || overseg_stage(&bundle, cfg),
    )?;
    let table: VisibilityTable = cached_or(
        &cfg.artifact("visibility", &keys.visibility),
        "visibility",
        &keys.visibility,
        &mut records,
        || Ok(build_visibility(&graph, &bundle.cloud, &bundle.views, &cfg.occlusion)?),
    )?;
    Ok(Prepared {
        bundle,
        graph,
        table,
        keys,
        records,
    })
}

/// Opens a provider from its spec: [`SYNTHETIC`] or an HTTP base URL.
pub fn open_provider(spec: &str, cfg: &PipelineConfig) -> Result<Box<dyn FeatureProvider>, PipelineError> {
    if spec == SYNTHETIC {
        return Ok(Box::new(SyntheticProvider::new(
            &format!("{SYNTHETIC}-{}", cfg.providers.synthetic_dim),
            cfg.providers.synthetic_dim,
        )?));
    }
    #[cfg(feature = "http")]
    {
        Ok(Box::new(HttpProvider::connect(spec, cfg.providers.http.clone())?))
    }
    #[cfg(not(feature = "http"))]
    {
        Err(PipelineError::Config(format!(
            "provider {spec:?} needs HTTP support, which this build lacks"
        )))
    }
}

/// Result of the features stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturesArtifact {
    /// Graph after the last merge round.
    pub graph: SuperpointGraph,
    /// Features from the merge provider, on `graph`.
    pub merge_features: FeatureSet,
    /// Features from the query provider, on `graph`. Queries use these.
    pub query_features: FeatureSet,
    pub report: MergeReport,
}

impl CacheCodec for FeaturesArtifact {
    const KIND: ArtifactKind = ArtifactKind::FinalFeatures;

    fn encode(&self, w: &mut CacheWriter) {
        self.graph.encode(w);
        encode_feature_set(&self.merge_features, w);
        encode_feature_set(&self.query_features, w);
        w.str(&serde_json::to_string(&self.report).expect("report serializes"));
    }

    fn decode(r: &mut CacheReader<'_>) -> Result<Self, SceneError> {
        let graph = SuperpointGraph::decode(r)?;
        let merge_features = decode_feature_set(r)?;
        let query_features = decode_feature_set(r)?;
        let report = serde_json::from_str(&r.str()?).map_err(|e| SceneError::CorruptCache(e.to_string()))?;
        Ok(Self {
            graph,
            merge_features,
            query_features,
            report,
        })
    }
}

pub struct FeaturesOutput {
    pub prepared: Prepared,
    pub artifact: FeaturesArtifact,
    pub records: Vec<StageRecord>,
}

/// Initial extraction (skipped when `resume` is given), the merge loop with
/// the merge provider, then one full extraction with the query provider.
/// `checkpoint` sees the merge state after the initial extraction and after
/// every round.
pub fn run_features(
    scene: &PreparedScene,
    cfg: &PipelineConfig,
    merge_provider: &dyn FeatureProvider,
    query_provider: &dyn FeatureProvider,
    resume: Option<MergeState>,
    mut checkpoint: impl FnMut(&MergeState) -> Result<(), PipelineError>,
) -> Result<FeaturesArtifact, PipelineError> {
    let mut fcfg = cfg.features.clone();
    fcfg.seed = stage_seed(cfg.seed, "features");
    let bundle = &scene.bundle;
    let state = match resume {
        Some(s) => s,
        None => {
            let initial = extract_features(
                &scene.graph,
                &scene.table,
                &bundle.views,
                merge_provider,
                &fcfg,
                cfg.views,
                None,
            )?;
            let s = MergeState::initial(scene.graph.clone(), initial);
            checkpoint(&s)?;
            s
        }
    };
    let rx = Reextraction {
        table: &scene.table,
        views: &bundle.views,
        provider: merge_provider,
        feature_cfg: &fcfg,
        selection: cfg.views,
    };
    let state = run_merge_loop(state, &bundle.cloud, &cfg.merge, Some(&rx), |s, out| {
        log::info!(
            "merge round {}: {} -> {} superpoints",
            s.rounds_done,
            out.report.n_superpoints_before,
            out.report.n_superpoints_after
        );
        checkpoint(s).map_err(|e| MergeError::Checkpoint(e.to_string()))
    })?;

    let final_table = scene.table.regroup(&state.graph.point_to_sp);
    let query_features = extract_features(
        &state.graph,
        &final_table,
        &bundle.views,
        query_provider,
        &fcfg,
        cfg.views,
        None,
    )?;
    Ok(FeaturesArtifact {
        graph: state.graph,
        merge_features: state.features,
        query_features,
        report: state.report,
    })
}

/// [`run_features`] on the cached prepare stages, checkpointing to
/// `merge-<key>.ovsg` and resuming from it.
pub fn cmd_features(
    cfg: &PipelineConfig,
    merge_provider: &dyn FeatureProvider,
    query_provider: &dyn FeatureProvider,
) -> Result<FeaturesOutput, PipelineError> {
    let prepared = cmd_prepare(cfg)?;
    let mut records = prepared.records.clone();
    let key = prepared.keys.features.clone();
    let path = cfg.artifact("features", &key);
    if path.exists() {
        if let Ok(artifact) = read_cache_file::<FeaturesArtifact>(&path) {
            records.push(StageRecord {
                stage: "features",
                key,
                status: StageStatus::Cached,
            });
            return Ok(FeaturesOutput {
                prepared,
                artifact,
                records,
            });
        }
    }

    let checkpoint_path = cfg.artifact("merge", &key);
    let resume = read_cache_file::<MergeState>(&checkpoint_path).ok();
    let status = match &resume {
        Some(s) => {
            log::info!("features: resuming after merge round {}", s.rounds_done);
            StageStatus::Resumed
        }
        None => StageStatus::Computed,
    };
    let scene = PreparedScene {
        bundle: prepared.bundle,
        graph: prepared.graph,
        table: prepared.table,
    };
    let artifact = run_features(&scene, cfg, merge_provider, query_provider, resume, |s| {
        Ok(write_cache_file(&checkpoint_path, s)?)
    })?;
    let prepared = Prepared {
        bundle: scene.bundle,
        graph: scene.graph,
        table: scene.table,
        keys: prepared.keys,
        records: prepared.records,
    };
    write_cache_file(&path, &artifact)?;
    std::fs::write(
        cfg.cache_path().join(format!("merge-report-{key}.jsonl")),
        artifact.report.to_json_lines(),
    )?;
    let _ = std::fs::remove_file(&checkpoint_path);
    records.push(StageRecord {
        stage: "features",
        key,
        status,
    });
    Ok(FeaturesOutput {
        prepared,
        artifact,
        records,
    })
}

/// Everything a query needs, read from the cache without computing.
pub struct QueryState {
    pub bundle: SceneBundle,
    pub artifact: FeaturesArtifact,
    pub keys: StageKeys,
}

fn require<T: CacheCodec>(cfg: &PipelineConfig, stage: &'static str, key: &str, hint: &str) -> Result<T, PipelineError> {
    let path = cfg.artifact(stage, key);
    if !path.exists() {
        return Err(PipelineError::MissingStage {
            stage,
            hint: hint.to_owned(),
        });
    }
    Ok(read_cache_file(&path)?)
}

/// Loads the cached scene and final features. Never writes.
pub fn load_query_state(cfg: &PipelineConfig) -> Result<QueryState, PipelineError> {
    cfg.validate()?;
    let keys = StageKeys::compute(cfg)?;
    let artifact: FeaturesArtifact = require(cfg, "features", &keys.features, "run `features` first")?;
    let raw: SceneBundle = require(cfg, "load", &keys.load, "run `prepare` first")?;
    let geometry: SceneGeometry = require(cfg, "normals", &keys.normals, "run `prepare` first")?;
    Ok(QueryState {
        bundle: SceneBundle {
            cloud: geometry.cloud,
            mesh: geometry.mesh,
            views: raw.views,
            voxel_size: geometry.voxel_size,
        },
        artifact,
        keys,
    })
}

/// Cache files grouped by stage, for `stats`.
pub fn cache_listing(cfg: &PipelineConfig) -> Result<BTreeMap<String, Vec<String>>, PipelineError> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let dir = cfg.cache_path();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some((stage, _)) = name.rsplit_once('-') {
            out.entry(stage.to_owned()).or_default().push(name.clone());
        }
    }
    for v in out.values_mut() {
        v.sort();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml_string();
        let back = PipelineConfig::from_toml_str(&text, Path::new(".")).unwrap();
        assert_eq!(back, cfg);
        assert!(text.contains("tau = 0.95"));
        assert!(text.contains("rounds = 8"));
    }

    #[test]
    fn unknown_and_invalid_fields_rejected() {
        let err = PipelineConfig::from_toml_str("[merge]\ntau = 1.5\n", Path::new(".")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = PipelineConfig::from_toml_str("[merge]\ntua = 0.9\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("merge"), "{err}");
    }

    #[test]
    fn stage_seeds_are_independent() {
        assert_ne!(stage_seed(0, "overseg"), stage_seed(0, "features"));
        assert_eq!(stage_seed(5, "overseg"), stage_seed(5, "overseg"));
        assert_ne!(stage_seed(5, "overseg"), stage_seed(6, "overseg"));
    }
}
