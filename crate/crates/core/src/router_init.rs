//! Router centroids from a pretrained dense model.
//!
//! Pipeline: multi-scale embedding collection → representative-patch
//! selection per class → min-max scaler fitted on the pooled selection →
//! one mean point per class → Ward clustering → centroids (optionally
//! refined by affinity weighting).

use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::dataset::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::ops::{self, ScalerParams};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

/// Pre-MLP activations of one class, `[N × N_px × d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    pub class: usize,
    pub layer: usize,
    pub data: Tensor<f64>,
}

impl ClassEmbeddings {
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Config size and ±25%, rounded to the patch grid.
pub fn default_scales(image_size: usize, patch_size: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [0.75, 1.0, 1.25]
        .iter()
        .map(|f| {
            let s = ((image_size as f64 * f / patch_size as f64).round() as usize).max(1);
            s * patch_size
        })
        .collect();
    out.dedup();
    out
}

/// Seeded choice of up to `per_class` training images of each class.
pub fn sample_per_class(ds: &Dataset, per_class: usize, seed: u64) -> Vec<Vec<usize>> {
    let rng = SeededRng::new(seed);
    (0..ds.num_classes())
        .map(|c| {
            let mut idx: Vec<usize> = ds
                .split_indices(Split::Train)
                .into_iter()
                .filter(|&i| ds.items[i].class == c)
                .collect();
            rng.derive(&[0xC011, c as u64]).shuffle(&mut idx);
            idx.truncate(per_class);
            idx.sort_unstable();
            idx
        })
        .collect()
}

pub fn collect_embeddings<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    layer: usize,
    scales: &[usize],
    samples_per_class: usize,
    seed: u64,
) -> Result<Vec<ClassEmbeddings>> {
    if !model.config.moe_layers.contains(&layer) {
        return Err(Error::InvalidArgument(format!("layer {layer} is not an MoE layer")));
    }
    if scales.is_empty() {
        return Err(Error::InvalidArgument("no collection scales".into()));
    }
    let d = model.config.dim;
    let mut out = Vec::with_capacity(ds.num_classes());
    for (class, members) in sample_per_class(ds, samples_per_class, seed).into_iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Data(format!("class {class} has no training samples")));
        }
        let mut data = Vec::new();
        let mut n = 0;
        for &size in scales {
            let resized = members
                .iter()
                .map(|&i| dataset::resize_nearest(&ds.items[i].image, size, size))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = resized.iter().collect();
            let x = dataset::images_to_tensor::<T>(&refs)?;
            let cap = model.capture_pre_mlp(&x, layer)?;
            n += cap.batch * cap.patches;
            data.extend(cap.tensor.data().iter().map(|v| v.as_f64()));
        }
        let pixels = model.config.pixels_per_patch;
        let data = Tensor::new(vec![n, pixels, d], data)?;
        data.check_finite("class embeddings")?;
        out.push(ClassEmbeddings { class, layer, data });
    }
    Ok(out)
}

/// Representative patches of one class: indices into the patch axis (in
/// selection order) and the pixel-max rows they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub rows: Tensor<f64>,
}

/// Indices of the `k` largest scores, ties to the lower index.
fn topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Max over the pixel axis: `[N × N_px × d] → [N × d]`.
pub fn pixel_max(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let &[n, px, d] = x.shape() else {
        return Err(Error::shape("pixel_max", format!("expected rank 3, got {:?}", x.shape())));
    };
    if px == 0 {
        return Err(Error::Empty("no pixels".into()));
    }
    let mut out = vec![f64::NEG_INFINITY; n * d];
    for i in 0..n {
        for p in 0..px {
            let src = &x.data()[(i * px + p) * d..(i * px + p + 1) * d];
            for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(src) {
                *o = o.max(v);
            }
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Iterative top-K selection of the patches most similar to a class centroid.
pub fn select_representative_patches(x: &Tensor<f64>, k: usize, steps: usize) -> Result<Selection> {
    let pooled = pixel_max(x)?;
    let (n, d) = pooled.rows_cols();
    if n < k {
        return Err(Error::InvalidArgument(format!("need at least K={k} patches, have {n}")));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let mut centroid = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for (c, &v) in centroid.iter_mut().zip(pooled.row(i)) {
            *c = c.max(v);
        }
    }
    let scores = |c: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| pooled.row(i).iter().zip(c).map(|(a, b)| a * b).sum())
            .collect()
    };
    let mut selected = topk(&scores(&centroid), k);
    for _ in 0..steps {
        centroid = vec![0.0; d];
        for &i in &selected {
            for (c, &v) in centroid.iter_mut().zip(pooled.row(i)) {
                *c += v;
            }
        }
        for c in centroid.iter_mut() {
            *c /= k as f64;
        }
        selected = topk(&scores(&centroid), k);
    }
    let rows = pooled.select_rows(&selected);
    Ok(Selection { indices: selected, rows })
}

/// One agglomeration step. Leaves are ids `0..n`; the cluster formed at
/// step `s` gets id `n + s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    /// Increase in within-cluster sum of squares caused by the merge.
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub leaves: usize,
    pub merges: Vec<Merge>,
    /// Class of each leaf.
    pub leaf_classes: Vec<usize>,
}

/// Relative tolerance under which two linkage values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

pub(crate) fn better(candidate: f64, best: f64) -> bool {
    candidate < best - TIE_TOLERANCE * best.abs().max(1.0)
}

/// Ward agglomerative clustering via the Lance–Williams recurrence.
///
/// Cluster slots are numbered by their smallest leaf; ties go to the
/// lexicographically smallest slot pair.
pub fn ward_cluster(points: &Tensor<f64>) -> Result<ClusterTree> {
    let (n, _) = points.rows_cols();
    if n == 0 {
        return Err(Error::Empty("no points to cluster".into()));
    }
    points.check_finite("ward_cluster")?;
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let sq: f64 = points.row(i).iter().zip(points.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            dist[i * n + j] = 0.5 * sq;
        }
    }
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut id: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in i + 1..n {
                if !active[j] {
                    continue;
                }
                let v = dist[i * n + j];
                if best.is_none_or(|(_, _, b)| better(v, b)) {
                    best = Some((i, j, v));
                }
            }
        }
        let (i, j, v) = best.expect("two active clusters");
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if !active[k] || k == i || k == j {
                continue;
            }
            let nk = size[k] as f64;
            let updated = ((ni + nk) * dist[i * n + k] + (nj + nk) * dist[j * n + k] - nk * v) / (ni + nj + nk);
            dist[i * n + k] = updated;
            dist[k * n + i] = updated;
        }
        merges.push(Merge {
            a: id[i],
            b: id[j],
            distance: v,
            size: size[i] + size[j],
        });
        active[j] = false;
        size[i] += size[j];
        id[i] = n + step;
    }
    Ok(ClusterTree {
        leaves: n,
        merges,
        leaf_classes: (0..n).collect(),
    })
}

impl ClusterTree {
    /// Cluster label per leaf after stopping at `e` clusters. Labels are
    /// ordered by each cluster's smallest leaf.
    pub fn cut(&self, e: usize) -> Result<Vec<usize>> {
        if e == 0 || e > self.leaves {
            return Err(Error::InvalidArgument(format!("cannot cut {} leaves into {e} clusters", self.leaves)));
        }
        let n = self.leaves;
        let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
        for m in &self.merges[..n - e] {
            let mut a = members[m.a].take().expect("merge of live cluster");
            a.extend(members[m.b].take().expect("merge of live cluster"));
            members.push(Some(a));
        }
        let mut groups: Vec<Vec<usize>> = members.into_iter().flatten().collect();
        groups.sort_by_key(|g| *g.iter().min().unwrap());
        let mut label = vec![0; n];
        for (c, g) in groups.iter().enumerate() {
            for &leaf in g {
                label[leaf] = c;
            }
        }
        Ok(label)
    }
}

/// `centroid_e = Σᵢ wᵢₑ·pᵢ / Σᵢ wᵢₑ`; centroids with zero total weight keep
/// their previous value.
pub fn weighted_centroids(points: &Tensor<f64>, weights: &Tensor<f64>, prev: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, d) = points.rows_cols();
    let (wn, e) = weights.rows_cols();
    if wn != n || prev.shape() != [e, d] {
        return Err(Error::shape(
            "weighted_centroids",
            format!("points {:?}, weights {:?}, prev {:?}", points.shape(), weights.shape(), prev.shape()),
        ));
    }
    let mut out = prev.clone();
    for c in 0..e {
        let total: f64 = (0..n).map(|i| weights.row(i)[c]).sum();
        if total <= 0.0 {
            continue;
        }
        let row = out.row_mut(c);
        row.fill(0.0);
        for i in 0..n {
            let w = weights.row(i)[c];
            if w != 0.0 {
                for (o, &p) in row.iter_mut().zip(points.row(i)) {
                    *o += w * p;
                }
            }
        }
        for o in row.iter_mut() {
            *o /= total;
        }
    }
    Ok(out)
}

pub fn membership_weights(labels: &[usize], e: usize) -> Tensor<f64> {
    let mut w = Tensor::zeros(&[labels.len(), e]);
    for (i, &l) in labels.iter().enumerate() {
        w.row_mut(i)[l] = 1.0;
    }
    w
}

/// Unweighted mean of the class points in each cluster.
pub fn initial_centroids(labels: &[usize], points: &Tensor<f64>, e: usize) -> Result<Tensor<f64>> {
    let d = points.rows_cols().1;
    if labels.len() != points.rows_cols().0 || labels.iter().any(|&l| l >= e) {
        return Err(Error::InvalidArgument("labels do not match points or cluster count".into()));
    }
    let mut sizes = vec![0; e];
    for &l in labels {
        sizes[l] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Empty(format!("cluster {empty} has no members")));
    }
    weighted_centroids(points, &membership_weights(labels, e), &Tensor::zeros(&[e, d]))
}

/// Softmax over experts of `cos(point, centroid)/τ`, entries below
/// `threshold` set to zero: `[n × E]`.
pub fn soft_assignment(points: &Tensor<f64>, centroids: &Tensor<f64>, temperature: f64, threshold: f64) -> Result<Tensor<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let sims = ops::cosine_matrix(points, centroids)?;
    let scaled = sims.map(|s| if temperature.is_infinite() { 0.0 } else { s / temperature });
    let mut w = ops::softmax(&scaled, 1)?;
    for v in w.data_mut() {
        if *v < threshold {
            *v = 0.0;
        }
    }
    Ok(w)
}

pub fn refine_centroids_weighted(
    centroids: &Tensor<f64>,
    points: &Tensor<f64>,
    temperature: f64,
    threshold: f64,
) -> Result<Tensor<f64>> {
    let w = soft_assignment(points, centroids, temperature, threshold)?;
    weighted_centroids(points, &w, centroids)
}

/// Space in which representative patches are selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionSpace {
    #[default]
    Raw,
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    #[default]
    Ward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterInitConfig {
    /// Representative patches kept per class.
    pub k: usize,
    pub refine_steps: usize,
    /// Collection image sizes; empty means config size and ±25%.
    pub scales: Vec<usize>,
    pub samples_per_class: usize,
    pub selection_space: SelectionSpace,
    pub linkage: Linkage,
    /// Affinity-weighted centroid refinement after clustering.
    pub refine: bool,
    pub refine_temperature: f64,
    pub refine_threshold: f64,
    /// Add the log of each cluster's class share to the routing logits.
    pub log_prior: bool,
}

impl Default for RouterInitConfig {
    fn default() -> Self {
        Self {
            k: 128,
            refine_steps: 5,
            scales: Vec::new(),
            samples_per_class: 16,
            selection_space: SelectionSpace::Raw,
            linkage: Linkage::Ward,
            refine: false,
            refine_temperature: 0.001,
            refine_threshold: 0.05,
            log_prior: false,
        }
    }
}

/// Everything needed to install a router plus the intermediate artifacts
/// used by the affinity diagnostics.
#[derive(Debug, Clone)]
pub struct RouterInit {
    pub layer: usize,
    /// `E × d`, scaled space.
    pub centroids: Tensor<f64>,
    pub scaler: ScalerParams,
    /// Cluster of each class.
    pub class_clusters: Vec<usize>,
    /// Per-class mean of the scaled selected patches, `C × d`.
    pub class_points: Tensor<f64>,
    /// Scaled selected patches of each class, `K × d`.
    pub selected: Vec<Tensor<f64>>,
    pub tree: ClusterTree,
    pub log_prior: Option<Vec<f64>>,
    pub scales: Vec<usize>,
    pub config: RouterInitConfig,
}

/// Router init from already collected class embeddings.
pub fn router_from_embeddings(
    embeddings: &[ClassEmbeddings],
    experts: usize,
    cfg: &RouterInitConfig,
) -> Result<RouterInit> {
    let first = embeddings.first().ok_or_else(|| Error::Empty("no class embeddings".into()))?;
    if experts == 0 || experts > embeddings.len() {
        return Err(Error::InvalidArgument(format!(
            "{experts} experts for {} classes",
            embeddings.len()
        )));
    }
    let pre_scaler = match cfg.selection_space {
        SelectionSpace::Raw => None,
        SelectionSpace::Scaled => {
            let pooled: Vec<Tensor<f64>> = embeddings.iter().map(|c| pixel_max(&c.data)).collect::<Result<_>>()?;
            Some(ops::minmax_fit(&vstack(&pooled)?)?)
        }
    };
    let mut raw_selected = Vec::with_capacity(embeddings.len());
    for c in embeddings {
        let x = match &pre_scaler {
            None => c.data.clone(),
            Some(s) => {
                let (n, px, d) = (c.data.shape()[0], c.data.shape()[1], c.data.shape()[2]);
                ops::minmax_apply(s, &c.data.clone().reshape(&[n * px, d])?)?.reshape(&[n, px, d])?
            }
        };
        let sel = select_representative_patches(&x, cfg.k, cfg.refine_steps)?;
        raw_selected.push(pixel_max(&c.data)?.select_rows(&sel.indices));
    }
    let scaler = ops::minmax_fit(&vstack(&raw_selected)?)?;
    let selected: Vec<Tensor<f64>> = raw_selected
        .iter()
        .map(|s| ops::minmax_apply(&scaler, s))
        .collect::<Result<_>>()?;
    let d = first.data.shape()[2];
    let mut points = Tensor::zeros(&[selected.len(), d]);
    for (c, s) in selected.iter().enumerate() {
        let (k, _) = s.rows_cols();
        let row = points.row_mut(c);
        for i in 0..k {
            for (o, &v) in row.iter_mut().zip(s.row(i)) {
                *o += v / k as f64;
            }
        }
    }
    let tree = ward_cluster(&points)?;
    let labels = tree.cut(experts)?;
    let mut centroids = initial_centroids(&labels, &points, experts)?;
    if cfg.refine {
        centroids = refine_centroids_weighted(&centroids, &points, cfg.refine_temperature, cfg.refine_threshold)?;
    }
    let log_prior = cfg.log_prior.then(|| {
        let mut share = vec![0.0; experts];
        for &l in &labels {
            share[l] += 1.0 / labels.len() as f64;
        }
        share.into_iter().map(f64::ln).collect()
    });
    Ok(RouterInit {
        layer: first.layer,
        centroids,
        scaler,
        class_clusters: labels,
        class_points: points,
        selected,
        tree,
        log_prior,
        scales: Vec::new(),
        config: cfg.clone(),
    })
}

pub fn build_router<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    layer: usize,
    experts: usize,
    cfg: &RouterInitConfig,
    seed: u64,
) -> Result<RouterInit> {
    let scales = if cfg.scales.is_empty() {
        default_scales(model.config.image_size, model.config.patch_size)
    } else {
        cfg.scales.clone()
    };
    let emb = collect_embeddings(model, ds, layer, &scales, cfg.samples_per_class, seed)?;
    let mut init = router_from_embeddings(&emb, experts, cfg)?;
    init.scales = scales;
    Ok(init)
}

/// Random-router baseline: centroids uniform in the unit cube of scaled space.
pub fn random_centroids(experts: usize, dim: usize, seed: u64) -> Tensor<f64> {
    SeededRng::new(seed).derive(&[0x7A4D]).uniform_tensor(&[experts, dim], 0.0, 1.0)
}

pub fn vstack(parts: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let d = parts.first().ok_or_else(|| Error::Empty("nothing to stack".into()))?.rows_cols().1;
    let mut data = Vec::new();
    let mut n = 0;
    for p in parts {
        let (r, c) = p.rows_cols();
        if c != d {
            return Err(Error::shape("vstack", format!("width {c} vs {d}")));
        }
        n += r;
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![n, d], data)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0usize; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let c2 = |v: usize| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&v| c2(v)).sum();
    let rows: f64 = (0..ka).map(|i| c2(table[i * kb..(i + 1) * kb].iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let total = c2(n);
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max = 0.5 * (rows + cols);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t3(rows: &[&[f64]]) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), 1, d], rows.concat()).unwrap()
    }

    #[test]
    fn scales_round_to_grid() {
        assert_eq!(default_scales(32, 8), vec![24, 32, 40]);
        assert_eq!(default_scales(64, 8), vec![48, 64, 80]);
        assert_eq!(default_scales(8, 8), vec![8]);
    }

    #[test]
    fn selection_examples() {
        let x = t3(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let s = select_representative_patches(&x, 2, 1).unwrap();
        assert_eq!(s.indices, vec![0, 1]);
        assert_eq!(s.rows.data(), &[1.0, 0.0, 1.0, 0.0]);

        let all = select_representative_patches(&x, 4, 0).unwrap();
        let mut idx = all.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert!(select_representative_patches(&x, 5, 0).is_err());
    }

    #[test]
    fn selection_uses_pixel_max() {
        // patch 1 has a strong pixel on channel 0; its pooled row wins
        let x = Tensor::new(vec![2, 2, 2], vec![0.2, 0.1, 0.1, 0.2, 0.9, 0.0, 0.0, 0.0]).unwrap();
        let s = select_representative_patches(&x, 1, 2).unwrap();
        assert_eq!(s.indices, vec![1]);
        assert_eq!(s.rows.data(), &[0.9, 0.0]);
    }

    #[test]
    fn ward_line_example() {
        let pts = Tensor::matrix(4, 1, vec![0.0, 0.1, 10.0, 10.1]).unwrap();
        let tree = ward_cluster(&pts).unwrap();
        assert_eq!(tree.cut(2).unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(tree.cut(4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(tree.cut(1).unwrap(), vec![0; 4]);
        assert!(tree.cut(5).is_err());

        let two = Tensor::matrix(2, 2, vec![0.0, 0.0, 2.0, 4.0]).unwrap();
        let tree = ward_cluster(&two).unwrap();
        assert_eq!(tree.merges.len(), 1);
        let c = initial_centroids(&tree.cut(1).unwrap(), &two, 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0]);
    }

    #[test]
    fn ward_merge_distance_is_sse_increase() {
        let pts = Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap();
        let tree = ward_cluster(&pts).unwrap();
        // SSE of {0, 2} around mean 1 is 2
        assert!((tree.merges[0].distance - 2.0).abs() < 1e-12);
    }

    #[test]
    fn centroid_examples() {
        let pts = Tensor::matrix(4, 2, vec![0.0, 0.0, 3.0, 0.0, 0.0, 6.0, 5.0, 5.0]).unwrap();
        let c = initial_centroids(&[0, 0, 0, 1], &pts, 2).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 5.0]);
        assert!(initial_centroids(&[0, 0, 0, 0], &pts, 2).is_err());
    }

    #[test]
    fn refine_examples() {
        let pts = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let c = Tensor::matrix(2, 2, vec![1.0, 0.1, 0.1, 1.0]).unwrap();

        let flat = refine_centroids_weighted(&c, &pts, f64::INFINITY, 0.0).unwrap();
        for e in 0..2 {
            assert!((flat.row(e)[0] - 0.5).abs() < 1e-12 && (flat.row(e)[1] - 0.5).abs() < 1e-12);
        }
        assert_eq!(refine_centroids_weighted(&c, &pts, 0.001, 1.1).unwrap(), c);

        let sharp_pts = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let sharp_c = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = refine_centroids_weighted(&sharp_c, &sharp_pts, 0.001, 0.05).unwrap();
        assert!(r.max_abs_diff(&sharp_pts) < 1e-9);
    }

    #[test]
    fn membership_weights_reproduce_initial_centroids() {
        let mut rng = SeededRng::new(3);
        let pts: Tensor<f64> = rng.uniform_tensor(&[7, 3], 0.0, 1.0);
        let labels = [0, 1, 2, 0, 1, 2, 2];
        let init = initial_centroids(&labels, &pts, 3).unwrap();
        let again = weighted_centroids(&pts, &membership_weights(&labels, 3), &Tensor::zeros(&[3, 3])).unwrap();
        assert!(init.max_abs_diff(&again) < 1e-12);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!((v + 0.5).abs() < 1e-12);
    }

    #[test]
    fn router_from_embeddings_groups_separated_classes() {
        let mut rng = SeededRng::new(1);
        let centers = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let emb: Vec<ClassEmbeddings> = (0..4)
            .map(|c| {
                let base = centers[c / 2];
                let data: Vec<f64> = (0..10 * 2)
                    .flat_map(|_| base.map(|b| b + 0.05 * rng.normal() + 0.01 * c as f64))
                    .collect();
                ClassEmbeddings {
                    class: c,
                    layer: 1,
                    data: Tensor::new(vec![10, 2, 3], data).unwrap(),
                }
            })
            .collect();
        let cfg = RouterInitConfig {
            k: 4,
            ..Default::default()
        };
        let init = router_from_embeddings(&emb, 2, &cfg).unwrap();
        assert_eq!(init.class_clusters, vec![0, 0, 1, 1]);
        assert_eq!(init.centroids.shape(), &[2, 3]);
        let one = router_from_embeddings(&emb, 1, &cfg).unwrap();
        let mean: Vec<f64> = (0..3)
            .map(|j| (0..4).map(|c| one.class_points.row(c)[j]).sum::<f64>() / 4.0)
            .collect();
        for j in 0..3 {
            assert!((one.centroids.row(0)[j] - mean[j]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn ward_distances_monotone(seed in 0u64..1000, n in 2usize..12) {
            let pts: Tensor<f64> = SeededRng::new(seed).normal_tensor(&[n, 3], 1.0);
            let tree = ward_cluster(&pts).unwrap();
            for w in tree.merges.windows(2) {
                prop_assert!(w[1].distance >= w[0].distance - 1e-9);
            }
            for e in 1..=n {
                let labels = tree.cut(e).unwrap();
                let mut seen = vec![false; e];
                for l in labels { seen[l] = true; }
                prop_assert!(seen.iter().all(|&s| s));
            }
        }

        #[test]
        fn selection_is_subset(seed in 0u64..1000, n in 1usize..20, k in 1usize..6, t in 0usize..4) {
            prop_assume!(k <= n);
            let x: Tensor<f64> = SeededRng::new(seed).normal_tensor(&[n, 2, 3], 1.0);
            let s = select_representative_patches(&x, k, t).unwrap();
            let pooled = pixel_max(&x).unwrap();
            prop_assert_eq!(s.indices.len(), k);
            let mut u = s.indices.clone();
            u.sort(); u.dedup();
            prop_assert_eq!(u.len(), k);
            for (r, &i) in s.indices.iter().enumerate() {
                prop_assert_eq!(s.rows.row(r), pooled.row(i));
            }
        }

        #[test]
        fn selection_permutation_invariant(seed in 0u64..500) {
            let mut rng = SeededRng::new(seed);
            let x: Tensor<f64> = rng.normal_tensor(&[10, 2, 3], 1.0);
            let perm = rng.permutation(10);
            let xp = x.clone().reshape(&[10, 6]).unwrap().select_rows(&perm).reshape(&[10, 2, 3]).unwrap();
            let a = select_representative_patches(&x, 4, 3).unwrap();
            let b = select_representative_patches(&xp, 4, 3).unwrap();
            let mapped: Vec<usize> = b.indices.iter().map(|&i| perm[i]).collect();
            prop_assert_eq!(a.indices, mapped);
        }
    }
}
