//! Converts a dense MLP sublayer into sliced experts.
//!
//! Each expert keeps the hidden units of the dense MLP that activate most
//! strongly at its centroid, and starts with a correction vector equal to the
//! full MLP output at that centroid.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Model, Sublayer};
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::moe::{ExpertMLP, MoEBlock, Router};
use crate::ops::{self, Activation, ScalerParams};
use crate::params::{ParamGroup, ParamSet};
use crate::tensor::{Real, Tensor};

/// Weights of one dense MLP sublayer, in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMLPSnapshot {
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
    /// `d × d_ff`
    pub w1: Tensor<f64>,
    pub b1: Vec<f64>,
    /// `d_ff × d`
    pub w2: Tensor<f64>,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

impl DenseMLPSnapshot {
    pub fn new(
        norm: (Vec<f64>, Vec<f64>),
        w1: Tensor<f64>,
        b1: Vec<f64>,
        w2: Tensor<f64>,
        b2: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        let (d, f) = w1.rows_cols();
        if w1.rank() != 2
            || w2.shape() != [f, d]
            || b1.len() != f
            || b2.len() != d
            || norm.0.len() != d
            || norm.1.len() != d
        {
            return Err(Error::shape(
                "dense_snapshot",
                format!("w1 {:?}, w2 {:?}, b1 {}, b2 {}", w1.shape(), w2.shape(), b1.len(), b2.len()),
            ));
        }
        Ok(Self {
            norm_gain: norm.0,
            norm_bias: norm.1,
            w1,
            b1,
            w2,
            b2,
            activation,
        })
    }

    pub fn from_model<T: Real>(model: &Model<T>, layer: usize) -> Result<Self> {
        let l = model
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} of {}", model.layers.len())))?;
        let Sublayer::Dense(mlp) = &l.mlp else {
            return Err(Error::StageMismatch {
                expected: "dense".into(),
                found: format!("moe sublayer at layer {layer}"),
            });
        };
        let p = &model.params;
        let v = |id| p.get(id).to_f64_vec();
        Self::new(
            (v(mlp.norm.gain), v(mlp.norm.bias)),
            p.get(mlp.w1).cast(),
            v(mlp.b1),
            p.get(mlp.w2).cast(),
            v(mlp.b2),
            model.config.activation,
        )
    }

    pub fn dim(&self) -> usize {
        self.w1.rows_cols().0
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows_cols().1
    }

    /// `σ(x·W₁ + b₁)` for an already normalized row `x`.
    pub fn hidden_activations(&self, normed: &[f64]) -> Vec<f64> {
        let f = self.hidden();
        let mut h = self.b1.clone();
        for (i, &x) in normed.iter().enumerate() {
            for (o, &w) in h.iter_mut().zip(&self.w1.data()[i * f..(i + 1) * f]) {
                *o += x * w;
            }
        }
        h.into_iter().map(|v| self.activation.apply(v)).collect()
    }

    /// MLP body restricted to hidden units `indices` (all units when `None`).
    pub fn body(&self, normed: &[f64], indices: Option<&[usize]>) -> Vec<f64> {
        let h = self.hidden_activations(normed);
        let d = self.dim();
        let mut out = self.b2.clone();
        let all: Vec<usize>;
        let idx = match indices {
            Some(i) => i,
            None => {
                all = (0..self.hidden()).collect();
                &all
            }
        };
        for &j in idx {
            for (o, &w) in out.iter_mut().zip(&self.w2.data()[j * d..(j + 1) * d]) {
                *o += h[j] * w;
            }
        }
        out
    }

    /// Hex sha256 over the weights, identifying the source layer.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.norm_gain, &self.norm_bias, &self.b1, &self.b2] {
            for v in part {
                h.update(v.to_le_bytes());
            }
        }
        for t in [&self.w1, &self.w2] {
            h.update(t.to_blob());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The `d_e` hidden units with the largest activation at `centroid_raw`,
/// ties to the lower index, returned ascending.
pub fn importance_permutation(snap: &DenseMLPSnapshot, centroid_raw: &[f64], de: usize) -> Result<Vec<usize>> {
    if de > snap.hidden() || de == 0 {
        return Err(Error::InvalidArgument(format!("d_e {de} outside 1..={}", snap.hidden())));
    }
    if centroid_raw.len() != snap.dim() {
        return Err(Error::shape(
            "importance_permutation",
            format!("centroid has {} channels, layer {}", centroid_raw.len(), snap.dim()),
        ));
    }
    let h = snap.hidden_activations(centroid_raw);
    let mut idx: Vec<usize> = (0..h.len()).collect();
    idx.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
    idx.truncate(de);
    idx.sort_unstable();
    Ok(idx)
}

/// Expert weights before they are registered as parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub indices: Vec<usize>,
    pub norm_gain: Vec<f64>,
    pub norm_bias: Vec<f64>,
    pub w1: Tensor<f64>,
    pub b1: Vec<f64>,
    pub w2: Tensor<f64>,
    pub b2: Vec<f64>,
    pub gamma: f64,
    pub correction: Vec<f64>,
}

pub const DEFAULT_GAMMA: f64 = 0.9;

pub fn build_expert(
    snap: &DenseMLPSnapshot,
    indices: &[usize],
    centroid_scaled: &[f64],
    scaler: &ScalerParams,
    gamma: f64,
) -> Result<ExpertWeights> {
    let f = snap.hidden();
    if indices.iter().any(|&i| i >= f) {
        return Err(Error::InvalidArgument("expert index outside the dense hidden width".into()));
    }
    let c = Tensor::matrix(1, centroid_scaled.len(), centroid_scaled.to_vec())?;
    let raw = ops::minmax_invert(scaler, &c)?.into_data();
    if raw.len() != snap.dim() {
        return Err(Error::shape("build_expert", format!("centroid {} vs layer {}", raw.len(), snap.dim())));
    }
    let w1 = Tensor::matrix(snap.dim(), f, snap.w1.data().to_vec())?
        .transpose()
        .select_rows(indices)
        .transpose();
    Ok(ExpertWeights {
        indices: indices.to_vec(),
        norm_gain: snap.norm_gain.clone(),
        norm_bias: snap.norm_bias.clone(),
        w1,
        b1: indices.iter().map(|&i| snap.b1[i]).collect(),
        w2: snap.w2.select_rows(indices),
        b2: snap.b2.clone(),
        gamma,
        correction: snap.body(&raw, None),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertInitConfig {
    /// `d_e = d_ff / reduction_factor`.
    pub reduction_factor: usize,
    /// Literal expert width overriding the reduction factor.
    pub expert_hidden: Option<usize>,
    pub gamma: f64,
}

impl Default for ExpertInitConfig {
    fn default() -> Self {
        Self {
            reduction_factor: 2,
            expert_hidden: None,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl ExpertInitConfig {
    pub fn expert_hidden(&self, ffn_dim: usize) -> Result<usize> {
        if let Some(de) = self.expert_hidden {
            if de == 0 || de > ffn_dim {
                return Err(Error::Config(format!("expert width {de} outside 1..={ffn_dim}")));
            }
            return Ok(de);
        }
        if self.reduction_factor == 0 || ffn_dim % self.reduction_factor != 0 {
            return Err(Error::Config(format!(
                "d_ff {ffn_dim} not divisible by reduction factor {}",
                self.reduction_factor
            )));
        }
        Ok(ffn_dim / self.reduction_factor)
    }
}

/// Router inputs for one layer, independent of how the centroids were found.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterSpec {
    /// `E × d`, scaled space.
    pub centroids: Tensor<f64>,
    pub scaler: ScalerParams,
    pub log_prior: Option<Vec<f64>>,
}

impl From<&crate::router_init::RouterInit> for RouterSpec {
    fn from(r: &crate::router_init::RouterInit) -> Self {
        Self {
            centroids: r.centroids.clone(),
            scaler: r.scaler.clone(),
            log_prior: r.log_prior.clone(),
        }
    }
}

/// What `moefy_layer` did to one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoefyRecord {
    pub layer: usize,
    pub experts: usize,
    pub expert_hidden: usize,
    pub reduction_factor: Option<usize>,
    pub gamma: f64,
    pub indices: Vec<Vec<usize>>,
    pub source_hash: String,
}

fn vec_t<T: Real>(v: &[f64]) -> Tensor<T> {
    Tensor::vector(v.iter().map(|&x| T::c(x)).collect())
}

/// Replaces the dense MLP of `layer` with an MoE block. Attention weights and
/// all other layers are untouched; the dense MLP parameters are dropped.
pub fn moefy_layer<T: Real>(
    model: &mut Model<T>,
    layer: usize,
    router: &RouterSpec,
    cfg: &ExpertInitConfig,
) -> Result<MoefyRecord> {
    let snap = DenseMLPSnapshot::from_model(model, layer)?;
    let de = cfg.expert_hidden(snap.hidden())?;
    let (e, d) = router.centroids.rows_cols();
    if d != snap.dim() || router.scaler.channels() != d {
        return Err(Error::shape("moefy_layer", format!("centroids {:?} for width {}", router.centroids.shape(), snap.dim())));
    }
    if !(0.0..=1.0).contains(&cfg.gamma) {
        return Err(Error::Config(format!("gamma {} outside [0, 1]", cfg.gamma)));
    }
    let params: &mut ParamSet<T> = &mut model.params;
    let prefix = format!("layers.{layer}.moe");
    let norm = params.add_norm(&format!("{prefix}.router.norm"), d, ParamGroup::Moe);
    *params.get_mut(norm.gain) = vec_t(&snap.norm_gain);
    *params.get_mut(norm.bias) = vec_t(&snap.norm_bias);
    let centroids = params.add(format!("{prefix}.router.centroids"), router.centroids.cast(), ParamGroup::Moe);
    let mut experts = Vec::with_capacity(e);
    let mut all_indices = Vec::with_capacity(e);
    for k in 0..e {
        let c = router.centroids.row(k);
        let raw = ops::minmax_invert(&router.scaler, &Tensor::matrix(1, d, c.to_vec())?)?.into_data();
        let indices = importance_permutation(&snap, &raw, de)?;
        let w = build_expert(&snap, &indices, c, &router.scaler, cfg.gamma)?;
        let p = format!("{prefix}.experts.{k}");
        let enorm = params.add_norm(&format!("{p}.norm"), d, ParamGroup::Moe);
        *params.get_mut(enorm.gain) = vec_t(&w.norm_gain);
        *params.get_mut(enorm.bias) = vec_t(&w.norm_bias);
        let mlp = Mlp {
            norm: enorm,
            w1: params.add(format!("{p}.w1"), w.w1.cast(), ParamGroup::Moe),
            b1: params.add(format!("{p}.b1"), vec_t(&w.b1), ParamGroup::Moe),
            w2: params.add(format!("{p}.w2"), w.w2.cast(), ParamGroup::Moe),
            b2: params.add(format!("{p}.b2"), vec_t(&w.b2), ParamGroup::Moe),
        };
        let gamma = params.add_clamped(format!("{p}.gamma"), Tensor::scalar(T::c(w.gamma)), ParamGroup::Moe, (0.0, 1.0));
        let correction = params.add(format!("{p}.correction"), vec_t(&w.correction), ParamGroup::Moe);
        all_indices.push(indices.clone());
        experts.push(ExpertMLP {
            mlp,
            gamma,
            correction,
            indices,
        });
    }
    let cfgm = &model.config;
    let block = MoEBlock {
        router: Router {
            norm,
            centroids,
            scaler: router.scaler.clone(),
            temperature: cfgm.router_temperature,
            top_k: cfgm.top_k.min(e),
            gate_mode: cfgm.gate_mode,
            log_prior: router.log_prior.clone(),
        },
        experts,
    };
    model.layers[layer].mlp = Sublayer::Moe(block);
    model.prune_unused();
    Ok(MoefyRecord {
        layer,
        experts: e,
        expert_hidden: de,
        reduction_factor: cfg.expert_hidden.is_none().then_some(cfg.reduction_factor),
        gamma: cfg.gamma,
        indices: all_indices,
        source_hash: snap.hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::rng::SeededRng;

    fn hand_snapshot() -> DenseMLPSnapshot {
        // d = 2, d_ff = 4, relu
        DenseMLPSnapshot::new(
            (vec![1.0, 1.0], vec![0.0, 0.0]),
            Tensor::matrix(2, 4, vec![1.0, 0.0, 2.0, -1.0, 0.0, 1.0, 1.0, 3.0]).unwrap(),
            vec![0.0, 0.5, 0.0, 0.0],
            Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]).unwrap(),
            vec![0.1, 0.2],
            Activation::Relu,
        )
        .unwrap()
    }

    #[test]
    fn importance_examples() {
        let snap = hand_snapshot();
        // h at (1, 1) = relu([1, 1.5, 3, 2]) → top 2 = {2, 3}
        assert_eq!(importance_permutation(&snap, &[1.0, 1.0], 2).unwrap(), vec![2, 3]);
        assert_eq!(importance_permutation(&snap, &[1.0, 1.0], 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(importance_permutation(&snap, &[1.0, 1.0], 5).is_err());

        // identity W1 reads h off the input directly
        let id = DenseMLPSnapshot::new(
            (vec![1.0; 4], vec![0.0; 4]),
            Tensor::eye(4),
            vec![0.0; 4],
            Tensor::eye(4),
            vec![0.0; 4],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(importance_permutation(&id, &[0.1, 0.9, 0.5, 0.2], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn block_diagonal_gives_disjoint_sets() {
        let mut w1 = Tensor::zeros(&[2, 4]);
        w1.data_mut().copy_from_slice(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let snap = DenseMLPSnapshot::new(
            (vec![1.0; 2], vec![0.0; 2]),
            w1,
            vec![0.0; 4],
            Tensor::zeros(&[4, 2]),
            vec![0.0; 2],
            Activation::Relu,
        )
        .unwrap();
        let a = importance_permutation(&snap, &[1.0, 0.0], 2).unwrap();
        let b = importance_permutation(&snap, &[0.0, 1.0], 2).unwrap();
        assert_eq!(a, vec![0, 1]);
        assert_eq!(b, vec![2, 3]);
    }

    #[test]
    fn build_expert_hand_case() {
        let snap = hand_snapshot();
        let scaler = ScalerParams {
            min: vec![0.0, 0.0],
            max: vec![2.0, 2.0],
        };
        // scaled (0.5, 0.5) ↦ raw (1, 1)
        let w = build_expert(&snap, &[2, 3], &[0.5, 0.5], &scaler, 0.9).unwrap();
        assert_eq!(w.w1.data(), &[2.0, -1.0, 1.0, 3.0]);
        assert_eq!(w.b1, vec![0.0, 0.0]);
        assert_eq!(w.w2.data(), &[1.0, 1.0, 2.0, -1.0]);
        // h = [1, 1.5, 3, 2]; out = b2 + 1·(1,0) + 1.5·(0,1) + 3·(1,1) + 2·(2,−1)
        let expect = [0.1 + 1.0 + 3.0 + 4.0, 0.2 + 1.5 + 3.0 - 2.0];
        for (a, b) in w.correction.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(w.gamma, 0.9);
    }

    #[test]
    fn full_slice_matches_dense_body() {
        let snap = hand_snapshot();
        let x = [0.3, -0.7];
        let all = snap.body(&x, None);
        let sliced = snap.body(&x, Some(&[0, 1, 2, 3]));
        assert_eq!(all, sliced);
    }

    #[test]
    fn reduction_factor_validation() {
        let cfg = ExpertInitConfig::default();
        assert_eq!(cfg.expert_hidden(64).unwrap(), 32);
        assert!(ExpertInitConfig { reduction_factor: 3, ..cfg.clone() }.expert_hidden(64).is_err());
        let lit = ExpertInitConfig {
            expert_hidden: Some(2),
            ..cfg
        };
        assert_eq!(lit.expert_hidden(64).unwrap(), 2);
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            pixels_per_patch: 4,
            dim: 8,
            ffn_dim: 16,
            layers: 2,
            heads: 2,
            num_classes: 3,
            moe_layers: vec![1],
            experts: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn dense_equivalence_endpoint() {
        let cfg = tiny();
        let dense: Model<f64> = Model::new(cfg.clone(), 5).unwrap();
        let mut moe = dense.clone();
        let mut rng = SeededRng::new(9);
        let centroids: Tensor<f64> = rng.uniform_tensor(&[1, 8], 0.0, 1.0);
        let spec = RouterSpec {
            centroids,
            scaler: ScalerParams {
                min: vec![-1.0; 8],
                max: vec![1.0; 8],
            },
            log_prior: None,
        };
        let rec = moefy_layer(
            &mut moe,
            1,
            &spec,
            &ExpertInitConfig {
                reduction_factor: 1,
                expert_hidden: None,
                gamma: 0.0,
            },
        )
        .unwrap();
        assert_eq!(rec.expert_hidden, 16);
        assert!(moe.params.find("layers.1.mlp.w1").is_none());
        for s in 0..10 {
            let x: Tensor<f64> = SeededRng::new(s).uniform_tensor(&[2, 8, 8, 3], 0.0, 1.0);
            let (a, _) = dense.predict(&x).unwrap();
            let (b, _) = moe.predict(&x).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn stage_mismatch_on_second_moefy() {
        let mut m: Model<f64> = Model::new(tiny(), 1).unwrap();
        let spec = RouterSpec {
            centroids: Tensor::full(&[1, 8], 0.5),
            scaler: ScalerParams {
                min: vec![0.0; 8],
                max: vec![1.0; 8],
            },
            log_prior: None,
        };
        moefy_layer(&mut m, 1, &spec, &ExpertInitConfig::default()).unwrap();
        let e = moefy_layer(&mut m, 1, &spec, &ExpertInitConfig::default()).unwrap_err();
        assert!(matches!(e, Error::StageMismatch { .. }));
    }
}
