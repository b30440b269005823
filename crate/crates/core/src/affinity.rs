//! Class–expert affinity diagnostics.
//!
//! Pre-initialization affinity compares the router centroids with each
//! class's representative patches; post-finetune affinity averages the
//! router softmax over validation patches, grouped by image label.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::dataset::{self, Dataset, Image, Split};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityMode {
    PreInit,
    PostFinetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub layer: usize,
    pub seed: Option<u64>,
    pub batches: Option<usize>,
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    pub classes: usize,
    pub experts: usize,
    /// Row-major `classes × experts`.
    pub values: Vec<f64>,
    /// Classes with no contributing patches; their rows are not meaningful.
    pub missing: Vec<bool>,
    pub mode: AffinityMode,
    pub temperature: f64,
    pub threshold: f64,
    pub provenance: Provenance,
}

impl AffinityMatrix {
    pub fn row(&self, c: usize) -> &[f64] {
        &self.values[c * self.experts..(c + 1) * self.experts]
    }

    pub fn get(&self, c: usize, e: usize) -> f64 {
        self.values[c * self.experts + e]
    }

    /// Columns reordered so that new column `j` is old column `perm[j]`.
    pub fn permute_experts(&self, perm: &[usize]) -> AffinityMatrix {
        let mut out = self.clone();
        for c in 0..self.classes {
            for (j, &e) in perm.iter().enumerate() {
                out.values[c * self.experts + j] = self.get(c, e);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,expert,value\n");
        for c in 0..self.classes {
            for e in 0..self.experts {
                if self.missing[c] {
                    let _ = writeln!(s, "{c},{e},missing");
                } else {
                    let _ = writeln!(s, "{c},{e},{}", self.get(c, e));
                }
            }
        }
        s
    }

    /// Inverse of [`AffinityMatrix::to_csv`] for the value grid; metadata is
    /// taken from `template`.
    pub fn values_from_csv(text: &str) -> Result<(usize, usize, Vec<Option<f64>>)> {
        let mut cells = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || Error::Data(format!("affinity csv line {}: {line:?}", n + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            let c: usize = parts[0].parse().map_err(|_| bad())?;
            let e: usize = parts[1].parse().map_err(|_| bad())?;
            let v = match parts[2] {
                "missing" => None,
                x => Some(x.parse::<f64>().map_err(|_| bad())?),
            };
            cells.push((c, e, v));
        }
        let classes = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let experts = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let mut grid = vec![None; classes * experts];
        for (c, e, v) in cells {
            grid[c * experts + e] = v;
        }
        Ok((classes, experts, grid))
    }

    pub fn to_svg(&self, class_names: Option<&[String]>) -> String {
        let cell = 18;
        let left = 90;
        let top = 30;
        let width = left + cell * self.experts + 20;
        let height = top + cell * self.classes + 50;
        let max = self.values.iter().copied().fold(0.0, f64::max).max(1e-12);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"monospace\" font-size=\"10\">\n"
        );
        for e in 0..self.experts {
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{e}</text>",
                left + e * cell + cell / 2,
                top - 8
            );
        }
        for c in 0..self.classes {
            let name = class_names
                .and_then(|n| n.get(c).cloned())
                .unwrap_or_else(|| c.to_string());
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
                left - 6,
                top + c * cell + cell / 2 + 4,
                xml_escape(&name)
            );
            for e in 0..self.experts {
                let (fill, title) = if self.missing[c] {
                    ("#cccccc".to_string(), "missing".to_string())
                } else {
                    let v = self.get(c, e);
                    let t = (v / max).clamp(0.0, 1.0);
                    let shade = |lo: f64, hi: f64| (hi + (lo - hi) * t).round() as u8;
                    (
                        format!("#{:02x}{:02x}{:02x}", shade(8.0, 255.0), shade(48.0, 255.0), shade(107.0, 255.0)),
                        format!("{v:.4}"),
                    )
                };
                let _ = writeln!(
                    s,
                    "<rect class=\"cell\" x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\"><title>class {c}, expert {e}: {title}</title></rect>",
                    left + e * cell,
                    top + c * cell
                );
            }
        }
        let mode = match self.mode {
            AffinityMode::PreInit => "pre_init",
            AffinityMode::PostFinetune => "post_finetune",
        };
        let _ = writeln!(
            s,
            "<text x=\"4\" y=\"{}\">{mode} layer {} temperature {} threshold {} max {:.4}</text>",
            height - 12,
            self.provenance.layer,
            self.temperature,
            self.threshold,
            max
        );
        s.push_str("</svg>\n");
        s
    }

    /// Writes `<dir>/<stem>.{csv,json,svg}` for each requested format.
    pub fn export(&self, dir: &Path, stem: &str, formats: &[ExportFormat], class_names: Option<&[String]>) -> Result<()> {
        fs::create_dir_all(dir)?;
        for f in formats {
            match f {
                ExportFormat::Csv => fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?,
                ExportFormat::Json => fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?,
                ExportFormat::Svg => fs::write(dir.join(format!("{stem}.svg")), self.to_svg(class_names))?,
            }
        }
        Ok(())
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
    Svg,
}

/// Softmax of `cos(patch, centroid)/τ` per selected patch, entries below
/// `threshold` zeroed, averaged over each class's patches.
pub fn affinity_pre(
    centroids: &Tensor<f64>,
    class_patches: &[Tensor<f64>],
    temperature: f64,
    threshold: f64,
    layer: usize,
) -> Result<AffinityMatrix> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let e = centroids.rows_cols().0;
    let mut values = vec![0.0; class_patches.len() * e];
    let mut missing = vec![false; class_patches.len()];
    for (c, patches) in class_patches.iter().enumerate() {
        let n = patches.rows_cols().0;
        if n == 0 {
            missing[c] = true;
            continue;
        }
        let w = crate::router_init::soft_assignment(patches, centroids, temperature, threshold)?;
        for i in 0..n {
            for (k, &v) in w.row(i).iter().enumerate() {
                values[c * e + k] += v / n as f64;
            }
        }
    }
    Ok(AffinityMatrix {
        classes: class_patches.len(),
        experts: e,
        values,
        missing,
        mode: AffinityMode::PreInit,
        temperature,
        threshold,
        provenance: Provenance {
            layer,
            seed: None,
            batches: None,
            batch_size: None,
        },
    })
}

pub const FIGURE_D_TEMPERATURE: f64 = 0.001;
pub const FIGURE_D_THRESHOLD: f64 = 0.05;

/// Pre-init affinity with a sharp temperature and a cut-off.
pub fn figure_d_variant(centroids: &Tensor<f64>, class_patches: &[Tensor<f64>], layer: usize) -> Result<AffinityMatrix> {
    affinity_pre(centroids, class_patches, FIGURE_D_TEMPERATURE, FIGURE_D_THRESHOLD, layer)
}

/// Router softmax averaged per class over `batches` random validation
/// batches; classes never sampled are flagged missing.
pub fn affinity_post<T: Real>(
    model: &Model<T>,
    ds: &Dataset,
    layer: usize,
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<AffinityMatrix> {
    let block = model
        .moe_block(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} is not an MoE layer")))?;
    let e = block.num_experts();
    let classes = model.config.num_classes;
    let val = ds.split_indices(Split::Val);
    if val.is_empty() {
        return Err(Error::Empty("validation split is empty".into()));
    }
    let mut sums = vec![0.0; classes * e];
    let mut counts = vec![0usize; classes];
    let root = SeededRng::new(seed);
    for b in 0..batches {
        let mut order = val.clone();
        root.derive(&[0xAFF1, b as u64]).shuffle(&mut order);
        order.truncate(batch_size.max(1));
        let imgs: Vec<&Image> = order.iter().map(|&i| &ds.items[i].image).collect();
        let x = dataset::images_to_tensor::<T>(&imgs)?;
        let (_, records) = model.predict(&x)?;
        let (_, rec) = records
            .iter()
            .find(|(l, _)| *l == layer)
            .ok_or_else(|| Error::InvalidArgument(format!("no routing record for layer {layer}")))?;
        for (bi, &i) in order.iter().enumerate() {
            let c = ds.items[i].class;
            for p in 0..rec.patches {
                for (k, &v) in rec.patch_probs(bi, p).iter().enumerate() {
                    sums[c * e + k] += v;
                }
                counts[c] += 1;
            }
        }
    }
    let missing: Vec<bool> = counts.iter().map(|&n| n == 0).collect();
    for c in 0..classes {
        if counts[c] > 0 {
            for k in 0..e {
                sums[c * e + k] /= counts[c] as f64;
            }
        }
    }
    Ok(AffinityMatrix {
        classes,
        experts: e,
        values: sums,
        missing,
        mode: AffinityMode::PostFinetune,
        temperature: block.router.temperature,
        threshold: 0.0,
        provenance: Provenance {
            layer,
            seed: Some(seed),
            batches: Some(batches),
            batch_size: Some(batch_size),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    /// Classes whose affinity to each expert exceeds the threshold.
    pub background: Vec<usize>,
    pub background_threshold: f64,
    /// Share of total affinity mass per expert.
    pub column_mass: Vec<f64>,
    /// Entropy of `column_mass` in nats.
    pub entropy: f64,
    pub gini: f64,
    /// Classes whose strongest expert is each expert.
    pub assigned: Vec<usize>,
    /// Experts that are no class's strongest expert.
    pub starved: Vec<usize>,
}

/// Background scores, column-mass balance and starvation. Missing rows are
/// skipped; `threshold` defaults to `1/E`.
pub fn collapse_metrics(m: &AffinityMatrix, threshold: Option<f64>) -> CollapseReport {
    let e = m.experts;
    let thr = threshold.unwrap_or(1.0 / e.max(1) as f64);
    let mut background = vec![0; e];
    let mut mass = vec![0.0; e];
    let mut assigned = vec![0; e];
    for c in (0..m.classes).filter(|&c| !m.missing[c]) {
        let row = m.row(c);
        for (k, &v) in row.iter().enumerate() {
            if v > thr {
                background[k] += 1;
            }
            mass[k] += v;
        }
        if row.iter().any(|&v| v > 0.0) {
            let best = (0..e).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            assigned[best] += 1;
        }
    }
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        for v in mass.iter_mut() {
            *v /= total;
        }
    }
    let entropy = mass.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    let mut diff = 0.0;
    for a in &mass {
        for b in &mass {
            diff += (a - b).abs();
        }
    }
    let gini = if total > 0.0 { diff / (2.0 * e as f64 * mass.iter().sum::<f64>()) } else { 0.0 };
    CollapseReport {
        background,
        background_threshold: thr,
        column_mass: mass,
        entropy,
        gini,
        starved: (0..e).filter(|&k| assigned[k] == 0).collect(),
        assigned,
    }
}

/// Centroids and per-class representative patches (scaled space) of one
/// layer, as saved next to a converted checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub layer: usize,
    pub centroids: Tensor<f64>,
    pub class_patches: Vec<Tensor<f64>>,
    pub scales: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DumpSidecar {
    layer: usize,
    scales: Vec<usize>,
    experts: usize,
    dim: usize,
    /// Class of each stacked patch row.
    row_classes: Vec<usize>,
    classes: usize,
    blob: String,
}

impl EmbeddingDump {
    /// `<path>` gets the JSON sidecar, `<path>.bin` the centroids followed by
    /// the stacked patches.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (experts, dim) = self.centroids.rows_cols();
        let mut row_classes = Vec::new();
        let mut data = Vec::new();
        for (c, t) in self.class_patches.iter().enumerate() {
            row_classes.extend(std::iter::repeat_n(c, t.rows_cols().0));
            data.extend_from_slice(t.data());
        }
        let stacked = Tensor::new(vec![row_classes.len(), dim], data)?;
        let blob_path = path.with_extension("bin");
        let mut bytes = self.centroids.to_blob();
        bytes.extend(stacked.to_blob());
        fs::write(&blob_path, bytes)?;
        let side = DumpSidecar {
            layer: self.layer,
            scales: self.scales.clone(),
            experts,
            dim,
            row_classes,
            classes: self.class_patches.len(),
            blob: blob_path.file_name().unwrap().to_string_lossy().into_owned(),
        };
        fs::write(path, serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::format(path, e.to_string()))?;
        let side: DumpSidecar = serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let blob_path = path.with_file_name(&side.blob);
        let bytes = fs::read(&blob_path).map_err(|e| Error::format(&blob_path, e.to_string()))?;
        let (centroids, used) = Tensor::<f64>::from_blob(&bytes)?;
        let (stacked, _) = Tensor::<f64>::from_blob(&bytes[used..])?;
        if centroids.shape() != [side.experts, side.dim] || stacked.rows_cols().0 != side.row_classes.len() {
            return Err(Error::format(path, "sidecar does not match blob"));
        }
        let class_patches = (0..side.classes)
            .map(|c| {
                let rows: Vec<usize> = (0..side.row_classes.len()).filter(|&i| side.row_classes[i] == c).collect();
                stacked.select_rows(&rows)
            })
            .collect();
        Ok(Self {
            layer: side.layer,
            centroids,
            class_patches,
            scales: side.scales,
        })
    }
}

impl From<&crate::router_init::RouterInit> for EmbeddingDump {
    fn from(r: &crate::router_init::RouterInit) -> Self {
        Self {
            layer: r.layer,
            centroids: r.centroids.clone(),
            class_patches: r.selected.clone(),
            scales: r.scales.clone(),
        }
    }
}

/// Cosine similarities of equal vectors are exactly 1; used to build the
/// uniform-similarity cases.
pub fn uniform_similarity_inputs(experts: usize, classes: usize, dim: usize) -> (Tensor<f64>, Vec<Tensor<f64>>) {
    let centroids = Tensor::full(&[experts, dim], 1.0);
    let patches = (0..classes).map(|_| Tensor::full(&[1, dim], 1.0)).collect();
    (centroids, patches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: &[&[f64]]) -> AffinityMatrix {
        AffinityMatrix {
            classes: rows.len(),
            experts: rows[0].len(),
            values: rows.concat(),
            missing: vec![false; rows.len()],
            mode: AffinityMode::PreInit,
            temperature: 1.0,
            threshold: 0.0,
            provenance: Provenance {
                layer: 0,
                seed: None,
                batches: None,
                batch_size: None,
            },
        }
    }

    #[test]
    fn pre_examples() {
        let c = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = vec![Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()];
        let a = affinity_pre(&c, &p, 0.001, 0.0, 0).unwrap();
        assert!((a.get(0, 0) - 1.0).abs() < 1e-9 && a.get(0, 1) < 1e-9);

        let a = affinity_pre(&c, &p, 1e12, 0.0, 0).unwrap();
        assert!((a.get(0, 0) - 0.5).abs() < 1e-9 && (a.get(0, 1) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn figure_d_arithmetic() {
        let (c, p) = uniform_similarity_inputs(16, 3, 4);
        let a = figure_d_variant(&c, &p, 0).unwrap();
        assert_eq!((a.temperature, a.threshold), (0.001, 0.05));
        for r in 0..3 {
            assert!(a.row(r).iter().all(|&v| (v - 0.0625).abs() < 1e-12));
        }
        let (c, p) = uniform_similarity_inputs(64, 3, 4);
        let a = figure_d_variant(&c, &p, 0).unwrap();
        assert!(a.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collapse_examples() {
        let id = matrix(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let r = collapse_metrics(&id, None);
        assert_eq!(r.background, vec![1, 1, 1]);
        assert!(r.starved.is_empty());

        let one = matrix(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert_eq!(collapse_metrics(&one, None).starved, vec![1, 2]);

        // column mass (0.5 + 0.25 + 0.25, 0.5 + 0.75 + 0.75) / 3 = (1/3, 2/3)
        let hand = matrix(&[&[0.5, 0.5], &[0.25, 0.75], &[0.25, 0.75]]);
        let r = collapse_metrics(&hand, None);
        let expect = -(1.0f64 / 3.0) * (1.0f64 / 3.0).ln() - (2.0f64 / 3.0) * (2.0f64 / 3.0).ln();
        assert!((r.entropy - expect).abs() < 1e-12);
    }

    #[test]
    fn missing_rows_are_skipped() {
        let mut m = matrix(&[&[1.0, 0.0], &[0.0, 0.0]]);
        m.missing[1] = true;
        let r = collapse_metrics(&m, None);
        assert_eq!(r.starved, vec![1]);
        assert!(m.to_csv().contains("1,0,missing"));
    }

    #[test]
    fn csv_and_svg() {
        let one = matrix(&[&[0.3]]);
        assert_eq!(one.to_csv(), "class,expert,value\n0,0,0.3\n");
        let m = matrix(&[&[0.1, 0.2, 0.7], &[1.0 / 3.0, 0.5, 1.0 / 6.0]]);
        let (c, e, grid) = AffinityMatrix::values_from_csv(&m.to_csv()).unwrap();
        assert_eq!((c, e), (2, 3));
        assert_eq!(grid.into_iter().map(Option::unwrap).collect::<Vec<_>>(), m.values);
        assert_eq!(m.to_svg(None).matches("class=\"cell\"").count(), 6);
    }

    #[test]
    fn dump_round_trip() {
        let mut rng = SeededRng::new(2);
        let d = EmbeddingDump {
            layer: 1,
            centroids: rng.uniform_tensor(&[3, 4], 0.0, 1.0),
            class_patches: vec![rng.uniform_tensor(&[2, 4], 0.0, 1.0), rng.uniform_tensor(&[5, 4], 0.0, 1.0)],
            scales: vec![24, 32],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dump.json");
        d.save(&p).unwrap();
        assert_eq!(EmbeddingDump::load(&p).unwrap(), d);
    }

    proptest! {
        #[test]
        fn pre_rows_sum_to_one(seed in 0u64..500, e in 1usize..6, t in 0.01f64..5.0) {
            let mut rng = SeededRng::new(seed);
            let c: Tensor<f64> = rng.uniform_tensor(&[e, 3], 0.0, 1.0);
            let p: Vec<Tensor<f64>> = (0..3).map(|_| rng.uniform_tensor(&[4, 3], 0.0, 1.0)).collect();
            let a = affinity_pre(&c, &p, t, 0.0, 0).unwrap();
            for r in 0..3 {
                prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn permuting_centroids_permutes_columns(seed in 0u64..500) {
            let mut rng = SeededRng::new(seed);
            let c: Tensor<f64> = rng.uniform_tensor(&[4, 3], 0.0, 1.0);
            let p: Vec<Tensor<f64>> = (0..3).map(|_| rng.uniform_tensor(&[4, 3], 0.0, 1.0)).collect();
            let perm = rng.permutation(4);
            let a = affinity_pre(&c, &p, 0.5, 0.0, 0).unwrap();
            let b = affinity_pre(&c.select_rows(&perm), &p, 0.5, 0.0, 0).unwrap();
            let pa = a.permute_experts(&perm);
            for (x, y) in pa.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
