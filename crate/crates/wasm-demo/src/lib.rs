//! Browser demo. The whole pipeline runs client-side on the synthetic scene
//! with the synthetic provider. Three operations are exposed:
//!
//! 1. `Demo::new`: generate the scene and run prepare, features and merging
//! 2. `Demo::query`: score a text prompt, returning per-point heat colors
//! 3. `Demo::instances`: threshold and cluster, returning per-point labels
//!
//! [`Session`] holds the logic and is usable natively; [`Demo`] is the
//! wasm-bindgen wrapper.

use ovseg_core::feature::SyntheticProvider;
use ovseg_core::pipeline::{prepare_in_memory, run_features, FeaturesArtifact, PipelineConfig, PreparedScene};
use ovseg_core::query::{
    cluster_instances, heat_color, instance_color, instance_labels, ranked_superpoints, score_query,
    threshold_points, QueryResult, ThresholdMode, NOISE_COLOR,
};
use ovseg_core::synthetic::{generate, SyntheticConfig};
use serde_json::json;
use wasm_bindgen::prelude::*;

pub struct Session {
    pub cfg: PipelineConfig,
    pub scene: PreparedScene,
    pub artifact: FeaturesArtifact,
    provider: SyntheticProvider,
}

pub struct QueryView {
    pub colors: Vec<u8>,
    pub ranking: Vec<(u32, f64)>,
    pub result: QueryResult,
}

impl Session {
    pub fn new(spacing: f64, seed: u64) -> Result<Self, String> {
        if !(spacing.is_finite() && (0.01..=0.2).contains(&spacing)) {
            return Err(format!("spacing {spacing} outside [0.01, 0.2]"));
        }
        let synthetic = generate(&SyntheticConfig {
            spacing,
            ..SyntheticConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let mut cfg = PipelineConfig {
            seed,
            ..PipelineConfig::default()
        };
        cfg.cluster.epsilon = 3.0 * spacing;
        cfg.cluster.min_cluster_size = 20;
        let dim = cfg.providers.synthetic_dim;
        let provider = SyntheticProvider::new(&format!("synthetic-{dim}"), dim).map_err(|e| e.to_string())?;
        let scene = prepare_in_memory(synthetic.bundle, &cfg).map_err(|e| e.to_string())?;
        let artifact =
            run_features(&scene, &cfg, &provider, &provider, None, |_| Ok(())).map_err(|e| e.to_string())?;
        Ok(Self {
            cfg,
            scene,
            artifact,
            provider,
        })
    }

    pub fn n_points(&self) -> usize {
        self.scene.bundle.cloud.len()
    }

    pub fn positions(&self) -> Vec<f32> {
        self.scene
            .bundle
            .cloud
            .positions
            .iter()
            .flat_map(|p| [p.x as f32, p.y as f32, p.z as f32])
            .collect()
    }

    pub fn colors(&self) -> Vec<u8> {
        self.scene.bundle.cloud.colors.iter().flatten().copied().collect()
    }

    pub fn superpoint_ids(&self) -> Vec<u32> {
        self.artifact.graph.point_to_sp.clone()
    }

    pub fn summary(&self) -> serde_json::Value {
        json!({
            "points": self.n_points(),
            "initial_superpoints": self.scene.graph.len(),
            "superpoints": self.artifact.graph.len(),
            "rounds": self.artifact.report.rounds,
            "provider": self.artifact.query_features.provider,
        })
    }

    pub fn query(&self, prompt: &str) -> Result<QueryView, String> {
        let result = score_query(prompt, &self.artifact.query_features, &self.provider, &self.artifact.graph)
            .map_err(|e| e.to_string())?;
        let colors = result
            .point_scores
            .iter()
            .flat_map(|&s| heat_color(s, result.normalization))
            .collect();
        Ok(QueryView {
            colors,
            ranking: ranked_superpoints(&result),
            result,
        })
    }

    /// Per-point instance labels (-1 for unselected or noise) and matching colors.
    pub fn instances(
        &self,
        prompt: &str,
        threshold: f64,
        epsilon: f64,
        min_cluster_size: usize,
    ) -> Result<(Vec<i32>, Vec<u8>), String> {
        let mut cluster = self.cfg.cluster.clone();
        cluster.threshold = ThresholdMode::Absolute(threshold);
        cluster.epsilon = epsilon;
        cluster.min_cluster_size = min_cluster_size;
        cluster.validate().map_err(|e| e.to_string())?;
        let view = self.query(prompt)?;
        let selected = threshold_points(&view.result, cluster.threshold);
        let cloud = &self.scene.bundle.cloud;
        let inst = cluster_instances(&selected, cloud, &cluster, &view.result.point_scores).map_err(|e| e.to_string())?;
        let labels = instance_labels(&inst, cloud.len());
        let colors = labels
            .iter()
            .flat_map(|&l| match l {
                -1 => NOISE_COLOR,
                id => instance_color(id as u32),
            })
            .collect();
        Ok((labels, colors))
    }
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
pub struct QueryOutput {
    colors: Vec<u8>,
    ranking: String,
}

#[wasm_bindgen]
impl QueryOutput {
    /// RGB per point, blue (low) to yellow (high).
    pub fn colors(&self) -> Vec<u8> {
        self.colors.clone()
    }

    /// JSON array of `{id, score}`, best first.
    pub fn ranking(&self) -> String {
        self.ranking.clone()
    }
}

#[wasm_bindgen]
pub struct InstanceOutput {
    labels: Vec<i32>,
    colors: Vec<u8>,
}

#[wasm_bindgen]
impl InstanceOutput {
    pub fn labels(&self) -> Vec<i32> {
        self.labels.clone()
    }

    pub fn colors(&self) -> Vec<u8> {
        self.colors.clone()
    }

    pub fn count(&self) -> u32 {
        self.labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as u32)
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(spacing: f64, seed: u32) -> Result<Demo, JsError> {
        Session::new(spacing, seed.into()).map(Demo).map_err(|e| JsError::new(&e))
    }

    pub fn n_points(&self) -> u32 {
        self.0.n_points() as u32
    }

    pub fn positions(&self) -> Vec<f32> {
        self.0.positions()
    }

    pub fn colors(&self) -> Vec<u8> {
        self.0.colors()
    }

    pub fn superpoint_ids(&self) -> Vec<u32> {
        self.0.superpoint_ids()
    }

    pub fn summary(&self) -> String {
        self.0.summary().to_string()
    }

    pub fn query(&self, prompt: &str) -> Result<QueryOutput, JsError> {
        let v = self.0.query(prompt).map_err(|e| JsError::new(&e))?;
        let ranking = v
            .ranking
            .iter()
            .map(|(id, score)| json!({ "id": id, "score": score }))
            .collect::<Vec<_>>();
        Ok(QueryOutput {
            colors: v.colors,
            ranking: serde_json::Value::from(ranking).to_string(),
        })
    }

    pub fn instances(&self, prompt: &str, threshold: f64, epsilon: f64, min_cluster_size: u32) -> Result<InstanceOutput, JsError> {
        let (labels, colors) = self
            .0
            .instances(prompt, threshold, epsilon, min_cluster_size as usize)
            .map_err(|e| JsError::new(&e))?;
        Ok(InstanceOutput { labels, colors })
    }
}
