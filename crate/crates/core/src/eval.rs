//! Per-condition evaluation reports.
//!
//! A [`MetricsReport`] is written as JSON (`<name>.json`) and as an aligned
//! text table (`<name>.txt`). JSON schema, version 1:
//!
//! ```text
//! schema_version   u32
//! split            "train" | "test"
//! config_hash      16 hex digits
//! checkpoint_id    16 hex digits of the checkpoint file digest
//! count            records evaluated
//! psnr_mean        dB, or "inf"
//! ssim_mean        real
//! conditions[]     { condition_id, label, count, psnr_mean, ssim_mean }
//! codebook         null | { n_c, assignments, confusion, correct, total }
//! baselines[]      { name, psnr_mean, ssim_mean, conditions[] (as above) }
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nlos_tensor::{Binder, Graph, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::codebook::AssignmentStats;
use crate::dataset::{Manifest, Split, SplitData};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::lightsim::{require_cached_transport, TikhonovSolver};
use crate::metrics::{self, psnr_serde};
use crate::networks::Networks;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Name of the classical baseline column.
pub const TIKHONOV: &str = "tikhonov";
/// Name of the condition-agnostic model column.
pub const AGNOSTIC: &str = "agnostic";
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub condition_id: usize,
    pub label: String,
    pub count: usize,
    #[serde(with = "psnr_serde")]
    pub psnr_mean: f64,
    pub ssim_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineColumn {
    pub name: String,
    #[serde(with = "psnr_serde")]
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub conditions: Vec<ConditionMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub split: Split,
    pub config_hash: String,
    pub checkpoint_id: String,
    pub count: usize,
    #[serde(with = "psnr_serde")]
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub conditions: Vec<ConditionMetrics>,
    pub codebook: Option<AssignmentStats>,
    pub baselines: Vec<BaselineColumn>,
}

/// Optional comparison columns.
#[derive(Default)]
pub struct EvalOptions<'a, T: Scalar> {
    /// Ridge weight of the classical column; requires cached matrices.
    pub tikhonov_reg: Option<f64>,
    pub agnostic: Option<&'a Checkpoint<T>>,
}

/// Per-image `(psnr, ssim)` pairs.
pub type ImageScores = Vec<(f64, f64)>;

fn score(x: &ImageGrid<impl Scalar>, xr: &ImageGrid<impl Scalar>) -> Result<(f64, f64)> {
    let (x, xr) = (x.cast::<f64>(), xr.cast::<f64>());
    Ok((metrics::psnr(&x, &xr, 1.0)?, metrics::ssim(&x, &xr)?))
}

/// Test-time reconstructions of every projection, with codebook indices.
pub fn reconstruct_all<T: Scalar>(
    net: &Networks,
    ckpt: &Checkpoint<T>,
    projections: &[ImageGrid<T>],
) -> Result<(Vec<ImageGrid<T>>, Option<Vec<usize>>)> {
    let mut out = Vec::with_capacity(projections.len());
    let mut idx = Vec::new();
    for chunk in projections.chunks(EVAL_BATCH) {
        let g = Graph::new();
        let b = Binder::inference(&g, &ckpt.params);
        let refs: Vec<&ImageGrid<T>> = chunk.iter().collect();
        let (x, a) = net.reconstruct_test(&b, g.constant(ImageGrid::stack(&refs)?))?;
        let x = x.value();
        for i in 0..chunk.len() {
            out.push(ImageGrid::from_array(&x, i)?);
        }
        if let Some(a) = a {
            idx.extend(a);
        }
    }
    Ok((out, (!net.flags.no_vq).then_some(idx)))
}

fn model_scores<T: Scalar>(ckpt: &Checkpoint<T>, data: &SplitData<T>) -> Result<(ImageScores, Option<Vec<usize>>)> {
    let net = &ckpt.networks;
    let (xr, idx) = reconstruct_all(net, ckpt, &data.projection)?;
    let scores = data.hidden.iter().zip(&xr).map(|(x, r)| score(x, r)).collect::<Result<_>>()?;
    Ok((scores, idx))
}

fn tikhonov_scores<T: Scalar>(m: &Manifest, data: &SplitData<T>, reg: f64) -> Result<ImageScores> {
    let (dir, geom) = match (&m.matrix_dir, &m.geometry) {
        (Some(d), Some(g)) => (d, g),
        _ => {
            return Err(Error::MissingMatrix {
                condition_id: 0,
                path: m.matrix_dir.clone().unwrap_or_default(),
            })
        }
    };
    let mut solvers = Vec::with_capacity(m.num_conditions());
    for c in &m.conditions {
        solvers.push(TikhonovSolver::new(&require_cached_transport(dir, c, geom)?, reg)?);
    }
    data.hidden
        .iter()
        .zip(&data.projection)
        .zip(&data.condition_ids)
        .map(|((x, y), &c)| score(x, &solvers[c].solve(y)?))
        .collect()
}

fn per_condition(m: &Manifest, ids: &[usize], scores: &[(f64, f64)]) -> Vec<ConditionMetrics> {
    m.conditions
        .iter()
        .map(|c| {
            let (ps, ss): (Vec<f64>, Vec<f64>) = ids
                .iter()
                .zip(scores)
                .filter(|(&i, _)| i == c.id)
                .map(|(_, &s)| s)
                .unzip();
            ConditionMetrics {
                condition_id: c.id,
                label: c.label(),
                count: ps.len(),
                psnr_mean: metrics::mean(&ps),
                ssim_mean: metrics::mean(&ss),
            }
        })
        .collect()
}

fn means(scores: &[(f64, f64)]) -> (f64, f64) {
    let (ps, ss): (Vec<f64>, Vec<f64>) = scores.iter().copied().unzip();
    (metrics::mean(&ps), metrics::mean(&ss))
}

fn baseline(name: &str, m: &Manifest, ids: &[usize], scores: &[(f64, f64)]) -> BaselineColumn {
    let (psnr_mean, ssim_mean) = means(scores);
    BaselineColumn {
        name: name.into(),
        psnr_mean,
        ssim_mean,
        conditions: per_condition(m, ids, scores),
    }
}

/// Short content identifier of a checkpoint.
pub fn checkpoint_id<T: Scalar>(ckpt: &Checkpoint<T>) -> String {
    hex::encode(&Sha256::digest(ckpt.to_bytes())[..8])
}

/// Evaluate `ckpt` on one split of `m`.
pub fn evaluate<T: Scalar>(
    ckpt: &Checkpoint<T>,
    m: &Manifest,
    split: Split,
    opts: &EvalOptions<'_, T>,
) -> Result<MetricsReport> {
    let arch = &ckpt.networks.arch;
    if arch.hidden_res != m.hidden_res || arch.wall_res != m.wall_res || arch.n_conditions != m.num_conditions() {
        return Err(Error::Dimension(format!(
            "checkpoint expects hidden {:?}, wall {:?}, {} conditions; manifest has {:?}, {:?}, {}",
            arch.hidden_res,
            arch.wall_res,
            arch.n_conditions,
            m.hidden_res,
            m.wall_res,
            m.num_conditions()
        )));
    }
    let data = SplitData::<T>::load(m, split)?;
    let ids = &data.condition_ids;
    let (scores, idx) = model_scores(ckpt, &data)?;
    let codebook = idx
        .map(|a| AssignmentStats::new(m.num_conditions(), ids, &a))
        .transpose()?;
    let mut baselines = Vec::new();
    if let Some(reg) = opts.tikhonov_reg {
        baselines.push(baseline(TIKHONOV, m, ids, &tikhonov_scores(m, &data, reg)?));
    }
    if let Some(ag) = opts.agnostic {
        let a = &ag.networks.arch;
        if (a.hidden_res, a.wall_res) != (m.hidden_res, m.wall_res) {
            return Err(Error::Dimension("agnostic checkpoint resolutions differ from the manifest".into()));
        }
        baselines.push(baseline(AGNOSTIC, m, ids, &model_scores(ag, &data)?.0));
    }
    let (psnr_mean, ssim_mean) = means(&scores);
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        split,
        config_hash: ckpt.config_hash.clone(),
        checkpoint_id: checkpoint_id(ckpt),
        count: scores.len(),
        psnr_mean,
        ssim_mean,
        conditions: per_condition(m, ids, &scores),
        codebook,
        baselines,
    })
}

fn cell(v: f64, prec: usize) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.prec$}")
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Human-readable table: one row per condition plus the overall mean.
    pub fn to_table(&self) -> String {
        let label_w = self
            .conditions
            .iter()
            .map(|c| c.label.len())
            .chain([8])
            .max()
            .unwrap_or(8);
        let mut head = format!("{:>3}  {:<label_w$}  {:>5}  {:>8}  {:>6}", "id", "condition", "count", "psnr", "ssim");
        for b in &self.baselines {
            let _ = write!(head, "  {:>14}  {:>12}", format!("{}_psnr", b.name), format!("{}_ssim", b.name));
        }
        let mut out = format!(
            "split {} | config {} | checkpoint {}\n{head}\n",
            self.split, self.config_hash, self.checkpoint_id
        );
        let rows = self.conditions.iter().enumerate().map(|(k, c)| {
            (c.condition_id.to_string(), c.label.clone(), c.count, c.psnr_mean, c.ssim_mean, Some(k))
        });
        let total = std::iter::once((
            String::new(),
            "mean".to_string(),
            self.count,
            self.psnr_mean,
            self.ssim_mean,
            None,
        ));
        for (id, label, count, p, s, k) in rows.chain(total) {
            let _ = write!(out, "{id:>3}  {label:<label_w$}  {count:>5}  {:>8}  {:>6}", cell(p, 3), cell(s, 4));
            for b in &self.baselines {
                let (bp, bs) = match k {
                    Some(k) => (b.conditions[k].psnr_mean, b.conditions[k].ssim_mean),
                    None => (b.psnr_mean, b.ssim_mean),
                };
                let _ = write!(out, "  {:>14}  {:>12}", cell(bp, 3), cell(bs, 4));
            }
            out.push('\n');
        }
        if let Some(cb) = &self.codebook {
            let _ = writeln!(out, "codebook accuracy {:.4} ({}/{})", cb.accuracy(), cb.correct, cb.total);
        }
        out
    }

    /// Write `<stem>.json` and `<stem>.txt`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = stem.with_extension("json");
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let txt = stem.with_extension("txt");
        fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}

/// Confusion table of test-time assignments, `true \ assigned`.
pub fn confusion_table(stats: &AssignmentStats) -> String {
    let mut out = String::from("true\\assigned");
    for j in 0..stats.n_c {
        let _ = write!(out, " {j:>6}");
    }
    out.push_str("    total\n");
    for (i, row) in stats.confusion.iter().enumerate() {
        let _ = write!(out, "{i:>13}");
        for v in row {
            let _ = write!(out, " {v:>6}");
        }
        let _ = writeln!(out, " {:>8}", row.iter().sum::<usize>());
    }
    let _ = writeln!(out, "accuracy {:.4}; unused codes {:?}", stats.accuracy(), stats.unused_codes());
    out
}

/// Test-split reprojection error against the per-condition mean projection
/// of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionReport {
    pub model_l1: f64,
    pub mean_image_l1: f64,
    pub per_condition_model_l1: Vec<f64>,
    pub per_condition_mean_image_l1: Vec<f64>,
}

fn l1<T: Scalar>(a: &ImageGrid<T>, b: &ImageGrid<T>) -> f64 {
    a.data().iter().zip(b.data()).map(|(p, q)| (p.as_f64() - q.as_f64()).abs()).sum::<f64>() / a.data().len() as f64
}

/// `G_p(x, z_c)` for each hidden image with the codebook row of its label.
pub fn reproject_all<T: Scalar>(ckpt: &Checkpoint<T>, hidden: &[ImageGrid<T>], labels: &[usize]) -> Result<Vec<ImageGrid<T>>> {
    let net = &ckpt.networks;
    if net.flags.no_joint || net.flags.no_vq {
        return Err(Error::Contract(
            "reprojection needs a jointly trained checkpoint with a codebook".into(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= net.arch.n_conditions) {
        return Err(Error::Contract(format!(
            "condition id {bad} outside 0..{}",
            net.arch.n_conditions
        )));
    }
    let mut out = Vec::with_capacity(hidden.len());
    let idx: Vec<usize> = (0..hidden.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let g = Graph::new();
        let b = Binder::inference(&g, &ckpt.params);
        let refs: Vec<&ImageGrid<T>> = chunk.iter().map(|&i| &hidden[i]).collect();
        let lab: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let code = crate::codebook::codes(&b, net.arch.n_conditions, net.arch.code_dim).gather_rows(&lab);
        let y = net.reproject(&b, g.constant(ImageGrid::stack(&refs)?), code)?.value();
        for k in 0..chunk.len() {
            out.push(ImageGrid::from_array(&y, k)?);
        }
    }
    Ok(out)
}

pub fn reprojection_report<T: Scalar>(ckpt: &Checkpoint<T>, train: &SplitData<T>, test: &SplitData<T>) -> Result<ReprojectionReport> {
    let n_c = ckpt.networks.arch.n_conditions;
    let means = crate::dataset::mean_projections(train, n_c);
    let pred = reproject_all(ckpt, &test.hidden, &test.condition_ids)?;
    let mut model = vec![Vec::new(); n_c];
    let mut base = vec![Vec::new(); n_c];
    for ((y, p), &c) in test.projection.iter().zip(&pred).zip(&test.condition_ids) {
        let mu = means[c]
            .as_ref()
            .ok_or_else(|| Error::EmptySplit(format!("train (condition {c})")))?;
        model[c].push(l1(y, p));
        base[c].push(l1(y, mu));
    }
    let flat = |v: &[Vec<f64>]| metrics::mean(&v.concat());
    Ok(ReprojectionReport {
        model_l1: flat(&model),
        mean_image_l1: flat(&base),
        per_condition_model_l1: model.iter().map(|v| metrics::mean(v)).collect(),
        per_condition_mean_image_l1: base.iter().map(|v| metrics::mean(v)).collect(),
    })
}

/// Classical column alone, for the `baseline` command.
pub fn tikhonov_baseline<T: Scalar>(m: &Manifest, split: Split, reg: f64) -> Result<BaselineColumn> {
    let data = SplitData::<T>::load(m, split)?;
    Ok(baseline(TIKHONOV, m, &data.condition_ids, &tikhonov_scores(m, &data, reg)?))
}

impl BaselineColumn {
    pub fn to_table(&self) -> String {
        let w = self.conditions.iter().map(|c| c.label.len()).chain([8]).max().unwrap_or(8);
        let mut out = format!("{:>3}  {:<w$}  {:>5}  {:>8}  {:>6}\n", "id", self.name, "count", "psnr", "ssim");
        for c in &self.conditions {
            let _ = writeln!(
                out,
                "{:>3}  {:<w$}  {:>5}  {:>8}  {:>6}",
                c.condition_id,
                c.label,
                c.count,
                cell(c.psnr_mean, 3),
                cell(c.ssim_mean, 4)
            );
        }
        let n: usize = self.conditions.iter().map(|c| c.count).sum();
        let _ = writeln!(out, "{:>3}  {:<w$}  {n:>5}  {:>8}  {:>6}", "", "mean", cell(self.psnr_mean, 3), cell(self.ssim_mean, 4));
        out
    }
}
