//! The dense → cluster → convert → finetune pipeline as library calls.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbone::{Model, ModelConfig, Stage};
use crate::checkpoint::{count_params, Checkpoint, ParamCounts, RouterKind, RouterProvenance};
use crate::config::RunConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::expert_init::{moefy_layer, ExpertInitConfig, RouterSpec};
use crate::moe::expert_param_count;
use crate::router_init::{build_router, random_centroids, RouterInit};
use crate::tensor::{DType, Real};
use crate::train::{evaluate, train, EvalReport, MetricsLog};

fn check_dataset<T: Real>(model: &Model<T>, ds: &Dataset) -> Result<()> {
    if ds.num_classes() != model.config.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes, dataset has {}",
            model.config.num_classes,
            ds.num_classes()
        )));
    }
    if let Some(item) = ds.items.first() {
        model.config.check_image_size(item.image.width)?;
    }
    Ok(())
}

/// Checks that `run` describes the same architecture as the checkpoint's
/// `stored` config. With `routing` set, the MoE placement and routing fields
/// are taken from `run`; otherwise they must match too.
pub fn reconcile_model(stored: &ModelConfig, run: &ModelConfig, routing: bool) -> Result<ModelConfig> {
    let mut expect = run.clone();
    expect.classifier_dropout = stored.classifier_dropout;
    if routing {
        expect.moe_layers = stored.moe_layers.clone();
        expect.experts = stored.experts;
        expect.top_k = stored.top_k;
        expect.router_temperature = stored.router_temperature;
        expect.gate_mode = stored.gate_mode;
    }
    if &expect != stored {
        return Err(Error::Config(format!(
            "run config model section does not match the checkpoint: {}",
            serde_json::to_string(stored).unwrap_or_default()
        )));
    }
    let mut out = run.clone();
    out.classifier_dropout = stored.classifier_dropout;
    out.validate()?;
    Ok(out)
}

/// Trains a fresh dense model with the `[pretrain]` settings.
pub fn pretrain<T: Real>(cfg: &RunConfig, ds: &Dataset) -> Result<(Checkpoint<T>, MetricsLog)> {
    cfg.validate()?;
    let mut model = Model::<T>::new(cfg.model.clone(), cfg.seed)?;
    check_dataset(&model, ds)?;
    let tc = cfg.pretrain_config();
    let log = train(&mut model, ds, &tc)?;
    let mut ck = Checkpoint::new(model);
    ck.record("pretrain", cfg.seed, json!({ "train": tc }));
    ck.run_config = Some(cfg.clone());
    Ok((ck, log))
}

/// Seed of the random router for `layer`.
fn random_router_seed(seed: u64, layer: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(layer as u64)
}

/// Builds a router for every planned MoE layer from the dense model, then
/// converts those layers. Returns the converted checkpoint and the router
/// initializations (with the centroids actually installed).
pub fn moefy<T: Real>(
    mut ck: Checkpoint<T>,
    ds: &Dataset,
    cfg: &RunConfig,
    kind: RouterKind,
    expert_cfg: &ExpertInitConfig,
) -> Result<(Checkpoint<T>, Vec<RouterInit>)> {
    ck.require_stage(Stage::Dense)?;
    ck.model.config = reconcile_model(&ck.model.config, &cfg.model, true)?;
    check_dataset(&ck.model, ds)?;
    let experts = ck.model.config.experts;
    let layers = ck.model.config.moe_layers.clone();
    let mut inits = Vec::with_capacity(layers.len());
    for &layer in &layers {
        let mut init = build_router(&ck.model, ds, layer, experts, &cfg.router_init, cfg.seed)?;
        let provenance = match kind {
            RouterKind::Cluster => RouterProvenance::from_init(&init, cfg.seed),
            RouterKind::Random => {
                let seed = random_router_seed(cfg.seed, layer);
                init.centroids = random_centroids(experts, ck.model.config.dim, seed);
                init.log_prior = None;
                RouterProvenance::random(layer, experts, seed)
            }
        };
        ck.router.push(provenance);
        inits.push(init);
    }
    for init in &inits {
        let record = moefy_layer(&mut ck.model, init.layer, &RouterSpec::from(init), expert_cfg)?;
        ck.moe.push(record);
    }
    ck.record(
        "moefy",
        cfg.seed,
        json!({ "router": kind, "experts": experts, "expert_init": expert_cfg, "router_init": cfg.router_init }),
    );
    ck.run_config = Some(cfg.clone());
    Ok((ck, inits))
}

/// Finetunes a converted model with the paper's grouped optimizer.
pub fn finetune<T: Real>(mut ck: Checkpoint<T>, ds: &Dataset, cfg: &RunConfig) -> Result<(Checkpoint<T>, MetricsLog)> {
    ck.require_stage(Stage::Moe)?;
    reconcile_model(&ck.model.config, &cfg.model, false)?;
    check_dataset(&ck.model, ds)?;
    let tc = cfg.finetune_config();
    let log = train(&mut ck.model, ds, &tc)?;
    ck.record("finetune", cfg.seed, json!({ "train": tc }));
    ck.run_config = Some(cfg.clone());
    Ok((ck, log))
}

/// Evaluation on both splits.
pub fn eval<T: Real>(ck: &Checkpoint<T>, ds: &Dataset, batch_size: usize) -> Result<Vec<(Split, EvalReport)>> {
    check_dataset(&ck.model, ds)?;
    let mut out = Vec::new();
    for split in [Split::Train, Split::Val] {
        let idx = ds.split_indices(split);
        if !idx.is_empty() {
            out.push((split, evaluate(&ck.model, ds, &idx, batch_size)?));
        }
    }
    Ok(out)
}

/// One CSV row per split: samples, loss, top-1 and the routing entropy of
/// every MoE layer.
pub fn eval_csv(reports: &[(Split, EvalReport)]) -> String {
    use std::fmt::Write as _;
    let layers: Vec<usize> = reports
        .first()
        .map(|(_, r)| r.routing.layers.iter().map(|(l, _)| *l).collect())
        .unwrap_or_default();
    let mut s = String::from("split,samples,loss,top1");
    for l in &layers {
        let _ = write!(s, ",expert_entropy_layer_{l}");
    }
    s.push('\n');
    for (split, r) in reports {
        let name = match split {
            Split::Train => "train",
            Split::Val => "val",
        };
        let _ = write!(s, "{name},{},{:.6},{:.6}", r.samples, r.loss, r.top1);
        for (_, e) in r.routing.entropies() {
            let _ = write!(s, ",{e:.6}");
        }
        s.push('\n');
    }
    s
}

/// Expert counts of one MoE layer as `split,expert,count`.
pub fn routing_csv(reports: &[(Split, EvalReport)], layer: usize) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("split,expert,count\n");
    for (split, r) in reports {
        let name = match split {
            Split::Train => "train",
            Split::Val => "val",
        };
        if let Some((_, counts)) = r.routing.layers.iter().find(|(l, _)| *l == layer) {
            for (e, c) in counts.iter().enumerate() {
                let _ = writeln!(s, "{name},{e},{c}");
            }
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertLayerReport {
    pub layer: usize,
    pub experts: usize,
    pub expert_hidden: usize,
    pub reduction_factor: Option<usize>,
    pub gamma: Option<f64>,
    pub top_k: usize,
    pub temperature: f64,
    /// Per-expert MLP parameters found by walking the checkpoint.
    pub per_expert_walked: Vec<usize>,
    /// The same count from the closed-form expression.
    pub per_expert_closed_form: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub stage: Stage,
    pub dtype: DType,
    pub params: ParamCounts,
    pub layers: Vec<ExpertLayerReport>,
    pub router: Vec<RouterProvenance>,
}

pub fn inspect<T: Real>(ck: &Checkpoint<T>) -> InspectReport {
    let counts = count_params(&ck.model.params);
    let layers = ck
        .model
        .config
        .moe_layers
        .iter()
        .filter_map(|&l| {
            let block = ck.model.moe_block(l)?;
            let record = ck.moe.iter().find(|r| r.layer == l);
            let hidden = block.experts.first().map_or(0, |e| e.indices.len());
            Some(ExpertLayerReport {
                layer: l,
                experts: block.num_experts(),
                expert_hidden: hidden,
                reduction_factor: record.and_then(|r| r.reduction_factor),
                gamma: record.map(|r| r.gamma),
                top_k: block.router.top_k,
                temperature: block.router.temperature,
                per_expert_walked: counts
                    .experts
                    .iter()
                    .find(|(k, _)| *k == l)
                    .map(|(_, v)| v.clone())
                    .unwrap_or_default(),
                per_expert_closed_form: expert_param_count(ck.model.config.dim, hidden),
            })
        })
        .collect();
    InspectReport {
        stage: ck.stage(),
        dtype: T::DTYPE,
        params: counts,
        layers,
        router: ck.router.clone(),
    }
}

impl std::fmt::Display for InspectReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = &self.params;
        writeln!(f, "stage: {}", self.stage)?;
        let dtype = match self.dtype {
            DType::F32 => "f32",
            DType::F64 => "f64",
        };
        writeln!(f, "dtype: {dtype}")?;
        writeln!(f, "parameters: {}", p.total)?;
        writeln!(f, "  embedding: {}", p.embedding)?;
        writeln!(f, "  attention: {}", p.attention)?;
        writeln!(f, "  dense mlp: {}", p.dense_mlp)?;
        writeln!(f, "  moe layers: {} (router {}, expert norms {})", p.moe, p.router, p.expert_norm)?;
        writeln!(f, "  final norm: {}", p.norm)?;
        writeln!(f, "  head: {}", p.head)?;
        for l in &self.layers {
            writeln!(
                f,
                "layer {}: {} experts, d_e {}, reduction factor {}, gamma {}, top_k {}, temperature {}",
                l.layer,
                l.experts,
                l.expert_hidden,
                l.reduction_factor.map_or("-".to_string(), |r| r.to_string()),
                l.gamma.map_or("-".to_string(), |g| g.to_string()),
                l.top_k,
                l.temperature
            )?;
            writeln!(
                f,
                "  per-expert mlp parameters: walked {:?}, closed form {}",
                l.per_expert_walked, l.per_expert_closed_form
            )?;
        }
        for r in &self.router {
            write!(f, "router layer {}: {:?} init, seed {}, {} experts", r.layer, r.kind, r.seed, r.experts)?;
            if let Some(c) = &r.config {
                write!(f, ", K {}, T {}, scales {:?}", c.k, c.refine_steps, r.scales)?;
            }
            if !r.class_clusters.is_empty() {
                write!(f, ", class clusters {:?}", r.class_clusters)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
