//! Patch-level mixture-of-experts MLP sublayer.
//!
//! Routing works per patch: the router-normalized activations are averaged
//! over the pixel axis, min-max scaled with the scaler fitted at router
//! initialization, and compared to the expert centroids by cosine similarity.
//! The scaled vector is only used for the logits; experts see the unscaled
//! residual stream through their own input layer norm. Every pixel of a
//! patch goes to the same expert set.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::ops::{self, Activation, ScalerParams};
use crate::params::{NormIds, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// How gate weights are derived from the routing softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Selected probabilities renormalized to sum to one.
    #[default]
    Renormalized,
    /// Selected probabilities used as-is.
    Raw,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Router {
    /// Input layer norm producing the routed (captured) activation.
    pub norm: NormIds,
    /// `E × d` centroids in scaled space.
    pub centroids: ParamId,
    pub scaler: ScalerParams,
    pub temperature: f64,
    pub top_k: usize,
    pub gate_mode: GateMode,
    /// Optional per-expert log-prior added to the logits.
    pub log_prior: Option<Vec<f64>>,
}

impl Router {
    pub fn num_experts<T: Real>(&self, params: &ParamSet<T>) -> usize {
        params.get(self.centroids).shape()[0]
    }

    /// Patch logits `[B·P × E]` from the router-normalized pixels `[B·P·N × d]`.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], normed: Var, pixels: usize) -> Result<Var> {
        let (_, d) = tape.value(normed).rows_cols();
        if self.scaler.channels() != d {
            return Err(Error::shape(
                "routing_logits",
                format!("scaler has {} channels, activations {d}", self.scaler.channels()),
            ));
        }
        let mean = tape.group_mean(normed, pixels)?;
        let (scale, shift) = self.scaler.affine();
        let scaled = tape.col_affine(
            mean,
            scale.into_iter().map(T::c).collect(),
            shift.into_iter().map(T::c).collect(),
        )?;
        let cos = tape.cosine(scaled, vars[self.centroids.0])?;
        let mut logits = tape.scale(cos, T::c(1.0 / self.temperature));
        if let Some(prior) = &self.log_prior {
            let p = tape.constant(Tensor::vector(prior.iter().map(|&v| T::c(v)).collect()));
            logits = tape.add_row(logits, p)?;
        }
        Ok(logits)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertMLP {
    /// Sliced MLP: `w1` is `d × d_e`, `w2` is `d_e × d`.
    pub mlp: Mlp,
    /// Scalar blend weight, clamped to `[0, 1]`.
    pub gamma: ParamId,
    /// Correction vector `X_corr` of length `d`.
    pub correction: ParamId,
    /// Hidden units of the source dense MLP kept by this expert, ascending.
    pub indices: Vec<usize>,
}

impl ExpertMLP {
    /// `(1 − γ)·MLP_e(x) + γ·X_corr` on pixel rows `[n × d]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, act: Activation) -> Result<Var> {
        let out = self.mlp.forward(tape, vars, x, act)?;
        tape.blend(out, vars[self.gamma.0], vars[self.correction.0])
    }

    /// Parameters counted towards the expert MLP size (weights, biases,
    /// correction vector and γ; the input norm is reported separately).
    pub fn mlp_param_ids(&self) -> [ParamId; 6] {
        [self.mlp.w1, self.mlp.b1, self.mlp.w2, self.mlp.b2, self.correction, self.gamma]
    }
}

/// Closed-form per-expert MLP parameter count for hidden width `d_e`.
pub fn expert_param_count(dim: usize, expert_hidden: usize) -> usize {
    (dim * expert_hidden + expert_hidden + expert_hidden * dim + dim) + dim + 1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoEBlock {
    pub router: Router,
    pub experts: Vec<ExpertMLP>,
}

/// Per-patch routing decisions for one MoE layer and batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    pub batch: usize,
    pub patches: usize,
    pub pixels: usize,
    pub top_k: usize,
    pub num_experts: usize,
    /// `[B·P·top_k]` expert indices, best first.
    pub indices: Vec<usize>,
    /// `[B·P·top_k]` gate weights matching `indices`.
    pub gates: Vec<f64>,
    /// `[B·P·E]` full routing softmax.
    pub probs: Vec<f64>,
    /// Patch assignments per expert, over all ranks.
    pub counts: Vec<usize>,
    /// Expert index of every pixel row at each rank, `[B·P·N·top_k]`.
    pub pixel_experts: Vec<usize>,
}

impl RoutingRecord {
    pub fn patch_experts(&self, batch: usize, patch: usize) -> &[usize] {
        let q = batch * self.patches + patch;
        &self.indices[q * self.top_k..(q + 1) * self.top_k]
    }

    pub fn patch_probs(&self, batch: usize, patch: usize) -> &[f64] {
        let q = batch * self.patches + patch;
        &self.probs[q * self.num_experts..(q + 1) * self.num_experts]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("batch,patch,rank,expert,gate\n");
        for b in 0..self.batch {
            for p in 0..self.patches {
                let q = b * self.patches + p;
                for r in 0..self.top_k {
                    let i = q * self.top_k + r;
                    let _ = writeln!(s, "{b},{p},{r},{},{}", self.indices[i], self.gates[i]);
                }
            }
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Top-k selection over one probability row. Ties go to the lower index.
pub fn top_k_indices<T: Real>(probs: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k);
    order
}

/// Softmax over experts, top-k by probability, gates renormalized to sum to 1.
/// Returns `[n×k]` indices and gates for `logits[n×E]`.
pub fn select_experts<T: Real>(logits: &Tensor<T>, top_k: usize) -> Result<(Vec<usize>, Tensor<T>)> {
    let (n, e) = logits.rows_cols();
    if top_k == 0 || top_k > e {
        return Err(Error::InvalidArgument(format!("top_k {top_k} with {e} experts")));
    }
    let probs = ops::softmax(logits, logits.rank() - 1)?;
    let mut indices = Vec::with_capacity(n * top_k);
    let mut gates = Vec::with_capacity(n * top_k);
    for r in 0..n {
        let row = probs.row(r);
        let idx = top_k_indices(row, top_k);
        let total: T = idx.iter().map(|&i| row[i]).sum();
        gates.extend(idx.iter().map(|&i| row[i] / total));
        indices.extend(idx);
    }
    Ok((indices, Tensor::new(vec![n, top_k], gates)?))
}

/// Output of [`MoEBlock::forward`].
pub struct MoeOutput {
    pub output: Var,
    /// Router-normalized activation (the pre-MLP capture point).
    pub normed: Var,
    pub logits: Var,
    pub record: RoutingRecord,
}

impl MoEBlock {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Sublayer output for residual-stream pixels `h[B·P·N × d]` (residual
    /// not included).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        h: Var,
        geometry: (usize, usize, usize),
        act: Activation,
    ) -> Result<MoeOutput> {
        let (batch, patches, pixels) = geometry;
        let r = &self.router;
        let normed = tape.layer_norm(h, vars[r.norm.gain.0], vars[r.norm.bias.0], T::c(T::EPS))?;
        let logits = r.logits(tape, vars, normed, pixels)?;
        let num_experts = tape.value(logits).rows_cols().1;
        if num_experts != self.experts.len() {
            return Err(Error::shape(
                "moe_forward",
                format!("{num_experts} centroids for {} experts", self.experts.len()),
            ));
        }
        let top_k = r.top_k;
        if top_k == 0 || top_k > num_experts {
            return Err(Error::InvalidArgument(format!("top_k {top_k} with {num_experts} experts")));
        }
        let probs = tape.softmax(logits);
        let n_patches = batch * patches;
        let mut indices = Vec::with_capacity(n_patches * top_k);
        for q in 0..n_patches {
            indices.extend(top_k_indices(tape.value(probs).row(q), top_k));
        }
        let mut gates = tape.gather_per_row(probs, indices.clone())?;
        if r.gate_mode == GateMode::Renormalized {
            gates = tape.normalize_rows(gates);
        }
        let gates_flat = tape.reshape(gates, &[n_patches * top_k, 1])?;

        let rows = n_patches * pixels;
        let d = tape.value(h).rows_cols().1;
        let mut output: Option<Var> = None;
        let mut counts = vec![0usize; num_experts];
        let mut pixel_experts = vec![0usize; rows * top_k];
        for (e, expert) in self.experts.iter().enumerate() {
            let mut pixel_rows = Vec::new();
            let mut gate_rows = Vec::new();
            for q in 0..n_patches {
                for rank in 0..top_k {
                    if indices[q * top_k + rank] == e {
                        counts[e] += 1;
                        for n in 0..pixels {
                            pixel_rows.push(q * pixels + n);
                            gate_rows.push(q * top_k + rank);
                            pixel_experts[(q * pixels + n) * top_k + rank] = e;
                        }
                    }
                }
            }
            if pixel_rows.is_empty() {
                continue;
            }
            let xe = tape.gather_rows(h, pixel_rows.clone())?;
            let ye = expert.forward(tape, vars, xe, act)?;
            let ge = tape.gather_rows(gates_flat, gate_rows)?;
            let ye = tape.mul_rows(ye, ge)?;
            let scattered = tape.scatter_rows(ye, pixel_rows, rows)?;
            output = Some(match output {
                Some(acc) => tape.add(acc, scattered)?,
                None => scattered,
            });
        }
        let output = match output {
            Some(o) => o,
            None => tape.constant(Tensor::zeros(&[rows, d])),
        };
        let record = RoutingRecord {
            batch,
            patches,
            pixels,
            top_k,
            num_experts,
            gates: tape.value(gates).data().iter().map(|v| v.as_f64()).collect(),
            probs: tape.value(probs).data().iter().map(|v| v.as_f64()).collect(),
            indices,
            counts,
            pixel_experts,
        };
        Ok(MoeOutput {
            output,
            normed,
            logits,
            record,
        })
    }
}

/// Expert utilization summary of a routing record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationReport {
    /// Fraction of patch assignments per expert.
    pub load: Vec<f64>,
    /// Entropy of `load` in nats.
    pub entropy: f64,
    /// `max(load) · E`; 1 for a perfectly balanced router.
    pub max_load_ratio: f64,
}

pub fn dispatch_stats(record: &RoutingRecord) -> UtilizationReport {
    utilization_from_counts(&record.counts)
}

pub fn utilization_from_counts(counts: &[usize]) -> UtilizationReport {
    let total: usize = counts.iter().sum();
    let e = counts.len().max(1);
    let load: Vec<f64> = if total == 0 {
        vec![0.0; counts.len()]
    } else {
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    };
    let entropy = load.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    let max_load_ratio = load.iter().copied().fold(0.0, f64::max) * e as f64;
    UtilizationReport {
        load,
        entropy,
        max_load_ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::rng::SeededRng;

    fn record_with(counts: Vec<usize>) -> RoutingRecord {
        RoutingRecord {
            batch: 1,
            patches: counts.iter().sum(),
            pixels: 1,
            top_k: 1,
            num_experts: counts.len(),
            indices: vec![],
            gates: vec![],
            probs: vec![],
            counts,
            pixel_experts: vec![],
        }
    }

    #[test]
    fn select_experts_examples() {
        let l = Tensor::<f64>::from_f64(&[1, 3], &[0.3, -1.0, 2.0]).unwrap();
        let (_, gates) = select_experts(&l, 3).unwrap();
        let full = ops::softmax(&l, 1).unwrap();
        let (idx, _) = select_experts(&l, 3).unwrap();
        assert_eq!(idx, vec![2, 0, 1]);
        for (j, &i) in idx.iter().enumerate() {
            assert!((gates.data()[j] - full.data()[i]).abs() < 1e-12);
        }

        let l = Tensor::<f64>::from_f64(&[1, 3], &[2.0, 1.0, 1.0]).unwrap();
        let (idx, g) = select_experts(&l, 1).unwrap();
        assert_eq!((idx, g.data().to_vec()), (vec![0], vec![1.0]));

        let l = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 1.0]).unwrap();
        assert_eq!(select_experts(&l, 1).unwrap().0, vec![0]);
        assert!(select_experts(&l, 3).is_err());
    }

    #[test]
    fn dispatch_stats_examples() {
        let r = dispatch_stats(&record_with(vec![7, 0, 0]));
        assert_eq!(r.load, vec![1.0, 0.0, 0.0]);
        assert_eq!(r.entropy, 0.0);
        assert_eq!(r.max_load_ratio, 3.0);

        let r = dispatch_stats(&record_with(vec![5; 4]));
        assert!((r.entropy - 4f64.ln()).abs() < 1e-12);
        assert!((r.max_load_ratio - 1.0).abs() < 1e-12);

        // 2 + 1 + 1 patches
        let r = dispatch_stats(&record_with(vec![2, 1, 1]));
        assert_eq!(r.load, vec![0.5, 0.25, 0.25]);
        let h = -(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((r.entropy - h).abs() < 1e-12);
        assert_eq!(r.max_load_ratio, 1.5);
    }

    fn toy_expert(params: &mut ParamSet<f64>, rng: &mut SeededRng, d: usize, de: usize, gamma: f64) -> ExpertMLP {
        let mlp = Mlp::init(params, "e", d, de, ParamGroup::Moe, rng);
        let gamma = params.add_clamped("e.gamma", Tensor::scalar(gamma), ParamGroup::Moe, (0.0, 1.0));
        let correction = params.add("e.corr", rng.normal_tensor(&[d], 1.0), ParamGroup::Moe);
        ExpertMLP {
            mlp,
            gamma,
            correction,
            indices: (0..de).collect(),
        }
    }

    #[test]
    fn expert_gamma_one_outputs_correction() {
        let mut rng = SeededRng::new(3);
        let mut params = ParamSet::new();
        let e = toy_expert(&mut params, &mut rng, 3, 4, 1.0);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let x = tape.constant(rng.normal_tensor(&[5, 3], 1.0));
        let y = e.forward(&mut tape, &vars, x, Activation::Silu).unwrap();
        let corr = params.get(e.correction).data();
        for r in 0..5 {
            assert_eq!(tape.value(y).row(r), corr);
        }
    }

    /// d_layer = 2, d_ff = 4, d_e = 2 worked by hand with ReLU so every
    /// intermediate is exact.
    #[test]
    fn expert_hand_example() {
        let mut params = ParamSet::<f64>::new();
        let norm = params.add_norm("n", 2, ParamGroup::Moe);
        // dense W1 (2×4) = [[1,0,2,-1],[0,1,-1,3]], keep hidden units {1,3}
        let w1 = params.add("w1", Tensor::from_f64(&[2, 2], &[0.0, -1.0, 1.0, 3.0]).unwrap(), ParamGroup::Moe);
        let b1 = params.add("b1", Tensor::from_f64(&[2], &[0.5, 0.0]).unwrap(), ParamGroup::Moe);
        let w2 = params.add("w2", Tensor::from_f64(&[2, 2], &[1.0, 2.0, -1.0, 1.0]).unwrap(), ParamGroup::Moe);
        let b2 = params.add("b2", Tensor::from_f64(&[2], &[0.1, -0.1]).unwrap(), ParamGroup::Moe);
        let gamma = params.add("g", Tensor::scalar(0.25), ParamGroup::Moe);
        let correction = params.add("c", Tensor::from_f64(&[2], &[4.0, 8.0]).unwrap(), ParamGroup::Moe);
        let e = ExpertMLP {
            mlp: Mlp { norm, w1, b1, w2, b2 },
            gamma,
            correction,
            indices: vec![1, 3],
        };
        // x = [1, 3] normalizes to [-1, 1]
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[1.0, 3.0]).unwrap());
        let y = e.forward(&mut tape, &vars, x, Activation::Relu).unwrap();
        // pre-activation: [-1,1]·[[0,-1],[1,3]] + [0.5,0] = [1.5, 4]
        // hidden·W2 + b2 = [1.5-4, 3+4] + [0.1,-0.1] = [-2.4, 6.9]
        // blend: 0.75·[-2.4, 6.9] + 0.25·[4, 8] = [-0.8, 7.175]
        let got = tape.value(y).data();
        assert!((got[0] + 0.8).abs() < 1e-9 && (got[1] - 7.175).abs() < 1e-9, "{got:?}");
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(expert_param_count(32, 32), 32 * 32 + 32 + 32 * 32 + 32 + 32 + 1);
    }

    #[test]
    fn routing_csv_layout() {
        let rec = RoutingRecord {
            batch: 1,
            patches: 2,
            pixels: 1,
            top_k: 1,
            num_experts: 2,
            indices: vec![1, 0],
            gates: vec![1.0, 1.0],
            probs: vec![0.4, 0.6, 0.7, 0.3],
            counts: vec![1, 1],
            pixel_experts: vec![1, 0],
        };
        assert_eq!(rec.to_csv(), "batch,patch,rank,expert,gate\n0,0,0,1,1\n0,1,0,0,1\n");
    }
}
