//! Minimal patch transformer with a (patch, pixel) token layout.
//!
//! An image is cut into non-overlapping `block × block` pixel blocks, each
//! projected to one feature-map position. The feature map is then unfolded
//! into patches of `N_px` positions. Token rows are ordered
//! `(batch, patch, pixel)`; attention runs across patches separately for
//! each pixel slot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::moe::{GateMode, MoEBlock, MoeOutput, RoutingRecord};
use crate::ops::Activation;
use crate::params::{NormIds, ParamGroup, ParamId, ParamSet};
use crate::rng::SeededRng;
use crate::tape::{AttentionGeometry, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Patch side in input pixels.
    pub patch_size: usize,
    /// Feature-map positions per patch (a perfect square).
    pub pixels_per_patch: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub classifier_dropout: f64,
    pub activation: Activation,
    pub moe_layers: Vec<usize>,
    pub experts: usize,
    pub top_k: usize,
    pub router_temperature: f64,
    pub gate_mode: GateMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            pixels_per_patch: 4,
            dim: 32,
            ffn_dim: 64,
            layers: 4,
            heads: 2,
            num_classes: 12,
            classifier_dropout: 0.1,
            activation: Activation::Silu,
            moe_layers: vec![1, 3],
            experts: 4,
            top_k: 1,
            router_temperature: 1.0,
            gate_mode: GateMode::Renormalized,
        }
    }
}

impl ModelConfig {
    /// Nine-layer layout with MoE on every other layer (2, 4, 6, 8) and 64
    /// experts per MoE layer.
    pub fn every_other_layer_preset() -> Self {
        Self {
            layers: 9,
            moe_layers: vec![2, 4, 6, 8],
            experts: 64,
            ..Self::default()
        }
    }

    pub fn pixel_side(&self) -> usize {
        (self.pixels_per_patch as f64).sqrt().round() as usize
    }

    /// Input pixels per feature-map position along one axis.
    pub fn block(&self) -> usize {
        self.patch_size / self.pixel_side().max(1)
    }

    pub fn grid(&self, image_size: usize) -> usize {
        image_size / self.patch_size
    }

    pub fn patches(&self, image_size: usize) -> usize {
        let g = self.grid(image_size);
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = self.pixel_side();
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if s * s != self.pixels_per_patch || s == 0 {
            return bad(format!("pixels_per_patch {} is not a perfect square", self.pixels_per_patch));
        }
        if self.patch_size == 0 || self.patch_size % s != 0 {
            return bad(format!("patch_size {} not divisible by pixel side {s}", self.patch_size));
        }
        self.check_image_size(self.image_size)?;
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if let Some(&l) = self.moe_layers.iter().find(|&&l| l >= self.layers) {
            return bad(format!("moe layer {l} outside 0..{}", self.layers));
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return bad(format!("top_k {} with {} experts", self.top_k, self.experts));
        }
        if !(self.router_temperature > 0.0) {
            return bad("router_temperature must be positive".into());
        }
        if !(0.0..1.0).contains(&self.classifier_dropout) {
            return bad("classifier_dropout must be in [0, 1)".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        Ok(())
    }

    pub fn check_image_size(&self, size: usize) -> Result<()> {
        if size == 0 || size % self.patch_size != 0 {
            return Err(Error::shape(
                "patch_embed",
                format!("image size {size} not divisible by patch size {}", self.patch_size),
            ));
        }
        Ok(())
    }
}

/// Activations in `(batch, patches, pixels, channels)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor<T> {
    pub batch: usize,
    pub patches: usize,
    pub pixels: usize,
    pub channels: usize,
    pub tensor: Tensor<T>,
}

impl<T: Real> PatchTensor<T> {
    pub fn from_rows(t: Tensor<T>, batch: usize, patches: usize, pixels: usize) -> Result<Self> {
        let (_, channels) = t.rows_cols();
        let tensor = t.reshape(&[batch, patches, pixels, channels])?;
        Ok(Self {
            batch,
            patches,
            pixels,
            channels,
            tensor,
        })
    }

    /// Row-major `[B·P·N × d]` view.
    pub fn rows(&self) -> Tensor<T> {
        self.tensor
            .clone()
            .reshape(&[self.batch * self.patches * self.pixels, self.channels])
            .expect("consistent layout")
    }

    pub fn row(&self, b: usize, p: usize, n: usize) -> &[T] {
        let r = (b * self.patches + p) * self.pixels + n;
        &self.tensor.data()[r * self.channels..(r + 1) * self.channels]
    }
}

/// Feature map `[B, H, W, d]` → patches of `side × side` positions.
pub fn unfold<T: Real>(map: &Tensor<T>, side: usize) -> Result<PatchTensor<T>> {
    let [b, h, w, d] = map.shape() else {
        return Err(Error::shape("unfold", format!("expected rank 4, got {:?}", map.shape())));
    };
    let (b, h, w, d) = (*b, *h, *w, *d);
    if side == 0 || h % side != 0 || w % side != 0 {
        return Err(Error::shape("unfold", format!("{h}×{w} map with patch side {side}")));
    }
    let (gh, gw) = (h / side, w / side);
    let pixels = side * side;
    let mut data = Vec::with_capacity(map.numel());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for iy in 0..side {
                    for ix in 0..side {
                        let (y, x) = (py * side + iy, px * side + ix);
                        let at = ((bi * h + y) * w + x) * d;
                        data.extend_from_slice(&map.data()[at..at + d]);
                    }
                }
            }
        }
    }
    Ok(PatchTensor {
        batch: b,
        patches: gh * gw,
        pixels,
        channels: d,
        tensor: Tensor::new(vec![b, gh * gw, pixels, d], data)?,
    })
}

/// Inverse of [`unfold`] for a square patch grid.
pub fn fold<T: Real>(x: &PatchTensor<T>) -> Result<Tensor<T>> {
    let side = (x.pixels as f64).sqrt().round() as usize;
    let g = (x.patches as f64).sqrt().round() as usize;
    if side * side != x.pixels || g * g != x.patches {
        return Err(Error::shape("fold", "patch grid and pixel block must be square"));
    }
    let h = g * side;
    let d = x.channels;
    let mut out = Tensor::zeros(&[x.batch, h, h, d]);
    for b in 0..x.batch {
        for p in 0..x.patches {
            for n in 0..x.pixels {
                let (y, xx) = ((p / g) * side + n / side, (p % g) * side + n % side);
                let at = ((b * h + y) * h + xx) * d;
                out.data_mut()[at..at + d].copy_from_slice(x.row(b, p, n));
            }
        }
    }
    Ok(out)
}

/// Images `[B, H, W, 3]` → per-position pixel blocks `[B·P·N × block²·3]`
/// in (row, column, channel) order.
pub fn image_blocks<T: Real>(images: &Tensor<T>, config: &ModelConfig) -> Result<(Tensor<T>, usize, usize)> {
    let [b, h, w, c] = images.shape() else {
        return Err(Error::shape("patch_embed", format!("expected [B,H,W,3], got {:?}", images.shape())));
    };
    let (b, h, w, c) = (*b, *h, *w, *c);
    if h != w || c != 3 {
        return Err(Error::shape("patch_embed", format!("expected square RGB images, got {h}×{w}×{c}")));
    }
    config.check_image_size(h)?;
    let k = config.block();
    let fh = h / k;
    let mut depth = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for fy in 0..fh {
            for fx in 0..fh {
                for y in 0..k {
                    for x in 0..k {
                        let at = ((bi * h + fy * k + y) * w + fx * k + x) * 3;
                        depth.extend_from_slice(&images.data()[at..at + 3]);
                    }
                }
            }
        }
    }
    let map = Tensor::new(vec![b, fh, fh, k * k * 3], depth)?;
    let pt = unfold(&map, config.pixel_side())?;
    let (patches, pixels) = (pt.patches, pt.pixels);
    Ok((pt.rows(), patches, pixels))
}

fn mlp_ids_mut(m: &mut Mlp) -> [&mut ParamId; 6] {
    [&mut m.norm.gain, &mut m.norm.bias, &mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Sublayer {
    Dense(Mlp),
    Moe(MoEBlock),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub attn_norm: NormIds,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub mlp: Sublayer,
}

impl TransformerLayer {
    /// Pre-norm attention with residual.
    pub fn attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        geometry: AttentionGeometry,
    ) -> Result<Var> {
        let n = tape.layer_norm(x, vars[self.attn_norm.gain.0], vars[self.attn_norm.bias.0], T::c(T::EPS))?;
        let qkv = tape.matmul(n, vars[self.qkv_w.0])?;
        let qkv = tape.add_row(qkv, vars[self.qkv_b.0])?;
        let a = tape.attention(qkv, geometry)?;
        let o = tape.matmul(a, vars[self.out_w.0])?;
        let o = tape.add_row(o, vars[self.out_b.0])?;
        tape.add(x, o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Dense,
    Moe,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Dense => "dense",
            Stage::Moe => "moe",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    /// Learned position embedding for the configured image size, `[P·N × d]`.
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub final_norm: NormIds,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Classifier dropout active (training).
    pub train: bool,
    pub dropout_seed: Option<u64>,
    /// Layers whose pre-MLP activation should be recorded.
    pub capture: Vec<usize>,
    /// Stop after the pre-MLP activation of this layer is computed.
    pub stop_after: Option<usize>,
}

pub struct ForwardOutput {
    /// `[B × classes]`; `None` when the forward stopped early.
    pub logits: Option<Var>,
    pub captures: Vec<(usize, Var)>,
    pub routing: Vec<(usize, RoutingRecord)>,
    pub batch: usize,
    pub patches: usize,
    pub pixels: usize,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut params = ParamSet::new();
        let d = config.dim;
        let k = config.block();
        let fan_in = k * k * 3;
        let embed_w = params.add("embed.w", rng.normal_tensor(&[fan_in, d], 1.0 / (fan_in as f64).sqrt()), ParamGroup::Rest);
        let embed_b = params.add("embed.b", Tensor::zeros(&[d]), ParamGroup::Rest);
        let tokens = config.patches(config.image_size) * config.pixels_per_patch;
        let pos = params.add("embed.pos", rng.normal_tensor(&[tokens, d], 0.02), ParamGroup::Rest);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layers.{l}");
            let attn_norm = params.add_norm(&format!("{p}.attn.norm"), d, ParamGroup::Rest);
            let std = 1.0 / (d as f64).sqrt();
            let qkv_w = params.add(format!("{p}.attn.qkv.w"), rng.normal_tensor(&[d, 3 * d], std), ParamGroup::Rest);
            let qkv_b = params.add(format!("{p}.attn.qkv.b"), Tensor::zeros(&[3 * d]), ParamGroup::Rest);
            let out_w = params.add(format!("{p}.attn.out.w"), rng.normal_tensor(&[d, d], std), ParamGroup::Rest);
            let out_b = params.add(format!("{p}.attn.out.b"), Tensor::zeros(&[d]), ParamGroup::Rest);
            let mlp = Mlp::init(&mut params, &format!("{p}.mlp"), d, config.ffn_dim, ParamGroup::Rest, &mut rng);
            layers.push(TransformerLayer {
                attn_norm,
                qkv_w,
                qkv_b,
                out_w,
                out_b,
                mlp: Sublayer::Dense(mlp),
            });
        }
        let final_norm = params.add_norm("final.norm", d, ParamGroup::Rest);
        let head_w = params.add(
            "head.w",
            rng.normal_tensor(&[d, config.num_classes], 1.0 / (d as f64).sqrt()),
            ParamGroup::Classifier,
        );
        let head_b = params.add("head.b", Tensor::zeros(&[config.num_classes]), ParamGroup::Classifier);
        Ok(Self {
            config,
            params,
            embed_w,
            embed_b,
            pos,
            layers,
            final_norm,
            head_w,
            head_b,
        })
    }

    pub fn stage(&self) -> Stage {
        if self.layers.iter().any(|l| matches!(l.mlp, Sublayer::Moe(_))) {
            Stage::Moe
        } else {
            Stage::Dense
        }
    }

    pub fn moe_block(&self, layer: usize) -> Option<&MoEBlock> {
        match &self.layers.get(layer)?.mlp {
            Sublayer::Moe(b) => Some(b),
            Sublayer::Dense(_) => None,
        }
    }

    /// Position-embedding rows for an input of `image_size`, resampled by
    /// nearest neighbour on the feature-map grid when it differs from the
    /// configured size.
    fn pos_rows(&self, image_size: usize) -> Vec<usize> {
        let c = &self.config;
        let s = c.pixel_side();
        let base = c.grid(c.image_size) * s;
        let side = c.grid(image_size) * s;
        let base_row = |y: usize, x: usize| ((y / s) * (base / s) + x / s) * c.pixels_per_patch + (y % s) * s + x % s;
        let g = side / s;
        let mut rows = Vec::with_capacity(side * side);
        for p in 0..g * g {
            for n in 0..c.pixels_per_patch {
                let y = (p / g) * s + n / s;
                let x = (p % g) * s + n % s;
                let by = y * base / side;
                let bx = x * base / side;
                rows.push(base_row(by, bx));
            }
        }
        rows
    }

    /// Learned projection of pixel blocks plus position embedding: `[B·P·N × d]`.
    pub fn patch_embed(&self, tape: &mut Tape<T>, vars: &[Var], images: &Tensor<T>) -> Result<(Var, usize, usize)> {
        let (blocks, patches, pixels) = image_blocks(images, &self.config)?;
        let blocks = tape.constant(blocks);
        let e = tape.matmul(blocks, vars[self.embed_w.0])?;
        let e = tape.add_row(e, vars[self.embed_b.0])?;
        let size = images.shape()[1];
        let pos = if size == self.config.image_size {
            vars[self.pos.0]
        } else {
            tape.gather_rows(vars[self.pos.0], self.pos_rows(size))?
        };
        Ok((tape.add_tiled(e, pos)?, patches, pixels))
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        images: &Tensor<T>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let batch = images.shape().first().copied().unwrap_or(0);
        if batch == 0 {
            return Err(Error::Empty("forward on an empty batch".into()));
        }
        if let Some(l) = opts.stop_after {
            if l >= self.layers.len() {
                return Err(Error::InvalidArgument(format!("layer {l} of {}", self.layers.len())));
            }
        }
        let (mut x, patches, pixels) = self.patch_embed(tape, vars, images)?;
        let geometry = AttentionGeometry {
            batch,
            patches,
            pixels,
            heads: self.config.heads,
        };
        let mut captures = Vec::new();
        let mut routing = Vec::new();
        let act = self.config.activation;
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.attention(tape, vars, x, geometry)?;
            let stop = opts.stop_after == Some(l);
            let want = opts.capture.contains(&l) || stop;
            let out = match &layer.mlp {
                Sublayer::Dense(mlp) => {
                    let n = tape.layer_norm(h, vars[mlp.norm.gain.0], vars[mlp.norm.bias.0], T::c(T::EPS))?;
                    if want {
                        captures.push((l, n));
                    }
                    if stop {
                        break;
                    }
                    mlp.forward_normed(tape, vars, n, act)?
                }
                Sublayer::Moe(block) => {
                    let MoeOutput {
                        output, normed, record, ..
                    } = block.forward(tape, vars, h, (batch, patches, pixels), act)?;
                    if want {
                        captures.push((l, normed));
                    }
                    routing.push((l, record));
                    if stop {
                        break;
                    }
                    output
                }
            };
            x = tape.add(h, out)?;
        }
        if opts.stop_after.is_some() {
            return Ok(ForwardOutput {
                logits: None,
                captures,
                routing,
                batch,
                patches,
                pixels,
            });
        }
        let x = tape.layer_norm(x, vars[self.final_norm.gain.0], vars[self.final_norm.bias.0], T::c(T::EPS))?;
        let logits = self.classify(tape, vars, x, patches * pixels, opts)?;
        Ok(ForwardOutput {
            logits: Some(logits),
            captures,
            routing,
            batch,
            patches,
            pixels,
        })
    }

    /// Global average pool over patches and pixels, dropout when training,
    /// then the linear head.
    pub fn classify(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        tokens_per_image: usize,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let pooled = tape.group_mean(x, tokens_per_image)?;
        let p = self.config.classifier_dropout;
        let pooled = if opts.train && p > 0.0 {
            let mut rng = SeededRng::new(opts.dropout_seed.unwrap_or(0));
            let shape = tape.value(pooled).shape().to_vec();
            let keep = T::c(1.0 / (1.0 - p));
            let n: usize = shape.iter().product();
            let mask = (0..n)
                .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
                .collect();
            let mask = tape.constant(Tensor::new(shape, mask)?);
            tape.mul(pooled, mask)?
        } else {
            pooled
        };
        let logits = tape.matmul(pooled, vars[self.head_w.0])?;
        tape.add_row(logits, vars[self.head_b.0])
    }

    /// Evaluation-mode logits `[B × classes]` and routing records.
    pub fn predict(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Vec<(usize, RoutingRecord)>)> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, images, &ForwardOptions::default())?;
        let logits = tape.value(out.logits.expect("full forward")).clone();
        logits.check_finite("model forward")?;
        Ok((logits, out.routing))
    }

    /// Activation after the attention sublayer and the MLP-input layer norm
    /// of `layer`, as `(B, P, N_px, d)`.
    pub fn capture_pre_mlp(&self, images: &Tensor<T>, layer: usize) -> Result<PatchTensor<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let opts = ForwardOptions {
            stop_after: Some(layer),
            ..Default::default()
        };
        let out = self.forward(&mut tape, &vars, images, &opts)?;
        let (_, v) = out.captures.last().copied().expect("stop layer is captured");
        PatchTensor::from_rows(tape.value(v).clone(), out.batch, out.patches, out.pixels)
    }

    /// Every parameter handle referenced by the model structure.
    pub fn param_ids_mut(&mut self) -> Vec<&mut ParamId> {
        let mut ids: Vec<&mut ParamId> = vec![&mut self.embed_w, &mut self.embed_b, &mut self.pos];
        for layer in &mut self.layers {
            ids.extend([
                &mut layer.attn_norm.gain,
                &mut layer.attn_norm.bias,
                &mut layer.qkv_w,
                &mut layer.qkv_b,
                &mut layer.out_w,
                &mut layer.out_b,
            ]);
            match &mut layer.mlp {
                Sublayer::Dense(m) => ids.extend(mlp_ids_mut(m)),
                Sublayer::Moe(b) => {
                    ids.extend([&mut b.router.norm.gain, &mut b.router.norm.bias, &mut b.router.centroids]);
                    for e in &mut b.experts {
                        ids.extend(mlp_ids_mut(&mut e.mlp));
                        ids.extend([&mut e.gamma, &mut e.correction]);
                    }
                }
            }
        }
        ids.extend([
            &mut self.final_norm.gain,
            &mut self.final_norm.bias,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        ids
    }

    /// Removes parameters no longer referenced by the structure.
    pub fn prune_unused(&mut self) {
        let mut keep = vec![false; self.params.len()];
        for id in self.param_ids_mut() {
            keep[id.0] = true;
        }
        let map = self.params.compact(&keep);
        for id in self.param_ids_mut() {
            *id = map[id.0].expect("referenced parameter kept");
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamSet::new();
        for p in self.params.iter() {
            let id = params.add(p.name.clone(), p.value.cast(), p.group);
            if let Some(c) = p.clamp {
                params.iter_mut().nth(id.0).unwrap().clamp = Some(c);
            }
        }
        Model {
            config: self.config.clone(),
            params,
            embed_w: self.embed_w,
            embed_b: self.embed_b,
            pos: self.pos,
            layers: self.layers.clone(),
            final_norm: self.final_norm,
            head_w: self.head_w,
            head_b: self.head_b,
        }
    }
}
