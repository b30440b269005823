//! On-disk checkpoints: a JSON manifest next to a tensor blob file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig, Stage, TransformerLayer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::expert_init::MoefyRecord;
use crate::params::{NormIds, Param, ParamGroup, ParamId, ParamSet};
use crate::router_init::{ClusterTree, RouterInit, RouterInitConfig};
use crate::tensor::{DType, Real, Tensor};

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "checkpoint.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RouterKind {
    Cluster,
    Random,
}

/// How the router of one MoE layer was initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterProvenance {
    pub layer: usize,
    pub kind: RouterKind,
    pub seed: u64,
    pub experts: usize,
    pub config: Option<RouterInitConfig>,
    pub scales: Vec<usize>,
    pub class_clusters: Vec<usize>,
    pub tree: Option<ClusterTree>,
}

impl RouterProvenance {
    pub fn from_init(init: &RouterInit, seed: u64) -> Self {
        Self {
            layer: init.layer,
            kind: RouterKind::Cluster,
            seed,
            experts: init.centroids.rows_cols().0,
            config: Some(init.config.clone()),
            scales: init.scales.clone(),
            class_clusters: init.class_clusters.clone(),
            tree: Some(init.tree.clone()),
        }
    }

    pub fn random(layer: usize, experts: usize, seed: u64) -> Self {
        Self {
            layer,
            kind: RouterKind::Random,
            seed,
            experts,
            config: None,
            scales: Vec::new(),
            class_clusters: Vec::new(),
            tree: None,
        }
    }
}

/// One pipeline step that produced or modified the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub command: String,
    pub seed: u64,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the tensor's blob within the blob file.
    pub offset: u64,
    pub bytes: u64,
    pub group: ParamGroup,
    pub clamp: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Structure {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: NormIds,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub dtype: DType,
    pub config: ModelConfig,
    pub blob: String,
    pub params: Vec<ParamEntry>,
    pub structure: Structure,
    #[serde(default)]
    pub moe: Vec<MoefyRecord>,
    #[serde(default)]
    pub router: Vec<RouterProvenance>,
    #[serde(default)]
    pub history: Vec<HistoryEntry>,
    #[serde(default)]
    pub run_config: Option<RunConfig>,
}

/// A model plus everything recorded about how it was produced.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub moe: Vec<MoefyRecord>,
    pub router: Vec<RouterProvenance>,
    pub history: Vec<HistoryEntry>,
    /// Resolved configuration of the run that last wrote the checkpoint.
    pub run_config: Option<RunConfig>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: Model<T>) -> Self {
        Self {
            model,
            moe: Vec::new(),
            router: Vec::new(),
            history: Vec::new(),
            run_config: None,
        }
    }

    pub fn stage(&self) -> Stage {
        self.model.stage()
    }

    pub fn require_stage(&self, expected: Stage) -> Result<()> {
        let found = self.stage();
        if found != expected {
            return Err(Error::StageMismatch {
                expected: expected.to_string(),
                found: found.to_string(),
            });
        }
        Ok(())
    }

    pub fn record(&mut self, command: &str, seed: u64, detail: serde_json::Value) {
        self.history.push(HistoryEntry {
            command: command.to_string(),
            seed,
            detail,
        });
    }

    pub fn manifest(&self) -> (Manifest, Vec<u8>) {
        let m = &self.model;
        let mut blob = Vec::new();
        let mut params = Vec::with_capacity(m.params.len());
        for p in m.params.iter() {
            let bytes = p.value.to_blob();
            params.push(ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: blob.len() as u64,
                bytes: bytes.len() as u64,
                group: p.group,
                clamp: p.clamp,
            });
            blob.extend(bytes);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            stage: self.stage(),
            dtype: T::DTYPE,
            config: m.config.clone(),
            blob: BLOB_FILE.to_string(),
            params,
            structure: Structure {
                embed_w: m.embed_w,
                embed_b: m.embed_b,
                pos: m.pos,
                layers: m.layers.clone(),
                final_norm: m.final_norm,
                head_w: m.head_w,
                head_b: m.head_b,
            },
            moe: self.moe.clone(),
            router: self.router.clone(),
            history: self.history.clone(),
            run_config: self.run_config.clone(),
        };
        (manifest, blob)
    }

    /// Writes `checkpoint.json` and `checkpoint.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let (manifest, blob) = self.manifest();
        let mut f = fs::File::create(dir.join(BLOB_FILE))?;
        f.write_all(&blob)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
        Ok(path)
    }

    /// Accepts a checkpoint directory or the manifest path itself.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read(&manifest_path).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                &manifest_path,
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let blob_path = manifest_path.with_file_name(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::format(&blob_path, e.to_string()))?;
        let mut params = ParamSet::new();
        for e in &manifest.params {
            let start = e.offset as usize;
            let end = start + e.bytes as usize;
            if end > blob.len() {
                return Err(Error::format(&blob_path, format!("parameter {} runs past end of blob", e.name)));
            }
            let (value, used) = Tensor::<T>::from_blob(&blob[start..end])?;
            if used != e.bytes as usize || value.shape() != e.shape.as_slice() {
                return Err(Error::format(&blob_path, format!("parameter {} does not match manifest", e.name)));
            }
            let id = match e.clamp {
                Some(c) => params.add_clamped(e.name.clone(), value, e.group, c),
                None => params.add(e.name.clone(), value, e.group),
            };
            debug_assert_eq!(params.param(id).name, e.name);
        }
        let s = manifest.structure;
        let model = Model {
            config: manifest.config,
            params,
            embed_w: s.embed_w,
            embed_b: s.embed_b,
            pos: s.pos,
            layers: s.layers,
            final_norm: s.final_norm,
            head_w: s.head_w,
            head_b: s.head_b,
        };
        let mut probe = model.clone();
        let referenced = probe.param_ids_mut().into_iter().map(|id| id.0).max().unwrap_or(0);
        if referenced >= model.params.len() {
            let id = referenced;
            return Err(Error::format(&manifest_path, format!("structure references missing parameter {id}")));
        }
        if model.stage() != manifest.stage {
            return Err(Error::format(&manifest_path, "stage tag does not match structure"));
        }
        Ok(Self {
            model,
            moe: manifest.moe,
            router: manifest.router,
            history: manifest.history,
            run_config: manifest.run_config,
        })
    }
}

/// Reads just the manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read(&manifest_path).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    serde_json::from_slice(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))
}

/// Parameter counts grouped the way `inspect` reports them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub embedding: usize,
    pub attention: usize,
    pub dense_mlp: usize,
    pub moe: usize,
    pub router: usize,
    pub head: usize,
    pub norm: usize,
    /// Input norms of all experts, kept out of the per-expert counts.
    pub expert_norm: usize,
    /// Per MoE layer: layer index and the parameter count of each expert
    /// (sliced MLP, correction vector and gate), found by walking names.
    pub experts: Vec<(usize, Vec<usize>)>,
}

/// Counts parameters by walking the stored names.
pub fn count_params<T: Real>(params: &ParamSet<T>) -> ParamCounts {
    let mut c = ParamCounts {
        total: 0,
        embedding: 0,
        attention: 0,
        dense_mlp: 0,
        moe: 0,
        router: 0,
        head: 0,
        norm: 0,
        expert_norm: 0,
        experts: Vec::new(),
    };
    for Param { name, value, .. } in params.iter() {
        let n = value.numel();
        c.total += n;
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["embed", ..] => c.embedding += n,
            ["head", ..] => c.head += n,
            ["final", ..] => c.norm += n,
            ["layers", _, "moe", "experts", _, "norm", ..] => {
                c.moe += n;
                c.expert_norm += n;
            }
            ["layers", l, "moe", "experts", k, ..] => {
                c.moe += n;
                let (l, k): (usize, usize) = (l.parse().unwrap_or(0), k.parse().unwrap_or(0));
                let pos = match c.experts.iter().position(|(x, _)| *x == l) {
                    Some(p) => p,
                    None => {
                        c.experts.push((l, Vec::new()));
                        c.experts.len() - 1
                    }
                };
                let row = &mut c.experts[pos].1;
                if row.len() <= k {
                    row.resize(k + 1, 0);
                }
                row[k] += n;
            }
            ["layers", _, "moe", ..] => {
                c.moe += n;
                c.router += n;
            }
            ["layers", _, "mlp", ..] => c.dense_mlp += n,
            ["layers", _, "attn", ..] => c.attention += n,
            _ => c.norm += n,
        }
    }
    c.experts.sort_by_key(|(l, _)| *l);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert_init::{moefy_layer, ExpertInitConfig, RouterSpec};
    use crate::ops::minmax_fit;
    use crate::rng::SeededRng;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            pixels_per_patch: 4,
            dim: 8,
            ffn_dim: 16,
            layers: 2,
            heads: 2,
            num_classes: 3,
            moe_layers: vec![1],
            experts: 2,
            ..ModelConfig::default()
        }
    }

    fn moe_model() -> Model<f64> {
        let mut m = Model::<f64>::new(small(), 4).unwrap();
        let mut rng = SeededRng::new(1);
        let pts: Tensor<f64> = rng.uniform_tensor(&[6, 8], -1.0, 1.0);
        let spec = RouterSpec {
            centroids: rng.uniform_tensor(&[2, 8], 0.0, 1.0),
            scaler: minmax_fit(&pts).unwrap(),
            log_prior: None,
        };
        moefy_layer(&mut m, 1, &spec, &ExpertInitConfig::default()).unwrap();
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = Checkpoint::new(moe_model());
        ck.record("moefy", 3, serde_json::json!({"experts": 2}));
        ck.router.push(RouterProvenance::random(1, 2, 3));
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::<f64>::load(dir.path()).unwrap();
        assert_eq!(back.stage(), Stage::Moe);
        assert_eq!(back.history, ck.history);
        assert_eq!(back.router, ck.router);
        let x: Tensor<f64> = SeededRng::new(9).uniform_tensor(&[2, 16, 16, 3], 0.0, 1.0);
        let a = ck.model.predict(&x).unwrap().0;
        let b = back.model.predict(&x).unwrap().0;
        assert_eq!(a, b);
        let (m1, b1) = ck.manifest();
        let (m2, b2) = back.manifest();
        assert_eq!(b1, b2);
        assert_eq!(serde_json::to_string(&m1).unwrap(), serde_json::to_string(&m2).unwrap());
    }

    #[test]
    fn stage_checks() {
        let dense = Checkpoint::new(Model::<f32>::new(small(), 0).unwrap());
        assert!(dense.require_stage(Stage::Dense).is_ok());
        assert!(matches!(dense.require_stage(Stage::Moe), Err(Error::StageMismatch { .. })));
    }

    #[test]
    fn corrupt_blob_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::new(Model::<f32>::new(small(), 0).unwrap()).save(dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
        let err = Checkpoint::<f32>::load(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. } | Error::Data(_)), "{err:?}");
    }

    #[test]
    fn counts_cover_every_parameter() {
        let m = moe_model();
        let c = count_params(&m.params);
        assert_eq!(c.total, m.params.numel());
        assert_eq!(c.total, c.embedding + c.attention + c.dense_mlp + c.moe + c.head + c.norm);
        assert_eq!(c.experts.len(), 1);
        assert_eq!(c.experts[0].1, vec![crate::moe::expert_param_count(8, 8); 2]);
        assert_eq!(c.expert_norm, 2 * 2 * 8);
    }
}
