//! Condition encoder, vector quantizer and VQ loss.
//!
//! Latents and codes live on the unit sphere, so the nearest code in L2 is
//! also the one with the largest dot product.

use nlos_tensor::{Array, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Init, ParamSource};

/// Parameter name of the code matrix `[n_c, n_d]`.
pub const CODES: &str = "cb.codes";
pub const ENCODER: &str = "ec";
pub const NORM_TOL: f64 = 1e-6;

pub const DEFAULT_CODE_DIM: usize = 128;
pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.25;

fn check_finite<T: Scalar>(v: &[T], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

fn unit<T: Scalar>(mut v: Vec<T>, what: &str) -> Result<Vec<T>> {
    check_finite(&v, what)?;
    let n = v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::Numeric(format!("{what} has zero norm")));
    }
    for x in &mut v {
        *x = T::lit(x.as_f64() / n);
    }
    Ok(v)
}

/// Encoder output `l`, unit L2 norm.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCondition<T: Scalar> {
    vector: Vec<T>,
}

impl<T: Scalar> LatentCondition<T> {
    /// Normalizes `v`.
    pub fn new(v: Vec<T>) -> Result<Self> {
        Ok(Self {
            vector: unit(v, "latent condition")?,
        })
    }

    pub fn vector(&self) -> &[T] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Rows of an `[N, n_d]` array.
    pub fn rows(a: &Array<T>) -> Result<Vec<Self>> {
        let [_, d] = a.dims2()?;
        a.data().chunks(d).map(|r| Self::new(r.to_vec())).collect()
    }
}

/// The `n_c x n_d` matrix of condition codes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook<T: Scalar> {
    n_c: usize,
    n_d: usize,
    codes: Vec<T>,
}

impl<T: Scalar> Codebook<T> {
    /// Rows are normalized on construction.
    pub fn from_array(a: &Array<T>) -> Result<Self> {
        let [n_c, n_d] = a.dims2()?;
        if n_c == 0 || n_d == 0 {
            return Err(Error::Dimension(format!("codebook must be non-empty, got {n_c}x{n_d}")));
        }
        let mut codes = Vec::with_capacity(n_c * n_d);
        for r in a.data().chunks(n_d) {
            codes.extend(unit(r.to_vec(), "codebook row")?);
        }
        Ok(Self { n_c, n_d, codes })
    }

    /// Unit Gaussian rows, normalized.
    pub fn random(n_c: usize, n_d: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_array(&nn::init_array(&[n_c, n_d], Init::UnitRows, &mut rng))
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn n_d(&self) -> usize {
        self.n_d
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.codes[i * self.n_d..(i + 1) * self.n_d]
    }

    pub fn to_array(&self) -> Array<T> {
        Array::from_vec(&[self.n_c, self.n_d], self.codes.clone()).expect("codebook shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizeResult<T: Scalar> {
    pub z_q: Vec<T>,
    pub index: usize,
    pub mode: Mode,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum()
}

/// Nearest code (test) or the labelled code (train).
pub fn quantize<T: Scalar>(
    l: &LatentCondition<T>,
    cb: &Codebook<T>,
    mode: Mode,
    label: Option<usize>,
) -> Result<QuantizeResult<T>> {
    if l.dim() != cb.n_d {
        return Err(Error::Dimension(format!(
            "latent has {} entries, codebook rows have {}",
            l.dim(),
            cb.n_d
        )));
    }
    let index = match mode {
        Mode::Train => {
            let label = label.ok_or_else(|| Error::Contract("train-mode quantization needs a label".into()))?;
            if label >= cb.n_c {
                return Err(Error::Contract(format!("label {label} outside 0..{}", cb.n_c)));
            }
            label
        }
        Mode::Test => nearest(l.vector(), cb),
    };
    Ok(QuantizeResult {
        z_q: cb.row(index).to_vec(),
        index,
        mode,
    })
}

fn nearest<T: Scalar>(v: &[T], cb: &Codebook<T>) -> usize {
    let mut best = (0, f64::INFINITY);
    for i in 0..cb.n_c {
        let d = sq_dist(v, cb.row(i));
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Test-mode indices for each row of an `[N, n_d]` latent batch.
pub fn nearest_indices<T: Scalar>(latents: &Array<T>, cb: &Codebook<T>) -> Result<Vec<usize>> {
    let [_, d] = latents.dims2()?;
    if d != cb.n_d {
        return Err(Error::Dimension(format!("latents have {d} columns, codebook rows have {}", cb.n_d)));
    }
    check_finite(latents.data(), "latent batch")?;
    Ok(latents.data().chunks(d).map(|r| nearest(r, cb)).collect())
}

/// The three VQ terms for one latent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqLoss {
    pub infonce: f64,
    pub codebook: f64,
    pub commit: f64,
}

impl VqLoss {
    /// `infonce + alpha * codebook + beta * commit`; the weights are already
    /// folded into `codebook` and `commit`.
    pub fn total(&self) -> f64 {
        self.infonce + self.codebook + self.commit
    }
}

/// Reference evaluation in `f64`.
pub fn vq_loss<T: Scalar>(
    l: &LatentCondition<T>,
    cb: &Codebook<T>,
    label: usize,
    tau: f64,
    alpha: f64,
    beta: f64,
) -> Result<VqLoss> {
    check_params(cb.n_c, label, tau)?;
    if l.dim() != cb.n_d {
        return Err(Error::Dimension(format!("latent has {} entries, codebook rows have {}", l.dim(), cb.n_d)));
    }
    check_finite(l.vector(), "latent condition")?;
    check_finite(&cb.codes, "codebook")?;
    let logits: Vec<f64> = (0..cb.n_c)
        .map(|i| l.vector().iter().zip(cb.row(i)).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>() / tau)
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let d = sq_dist(l.vector(), cb.row(label));
    Ok(VqLoss {
        infonce: lse - logits[label],
        codebook: alpha * d,
        commit: beta * d,
    })
}

fn check_params(n_c: usize, label: usize, tau: f64) -> Result<()> {
    if label >= n_c {
        return Err(Error::Contract(format!("label {label} outside 0..{n_c}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Graph terms averaged over the batch, unweighted.
#[derive(Debug)]
pub struct VqTerms<'g, T: Scalar> {
    pub infonce: Var<'g, T>,
    /// `||sg[l] - z_+||^2`: reaches only the selected code rows.
    pub codebook: Var<'g, T>,
    /// `||sg[z_+] - l||^2`: reaches only the encoder.
    pub commit: Var<'g, T>,
}

/// Differentiable VQ terms for latents `[N, n_d]` against codes `[n_c, n_d]`.
pub fn vq_terms<'g, T: Scalar>(
    l: Var<'g, T>,
    codes: Var<'g, T>,
    labels: &[usize],
    tau: f64,
) -> Result<VqTerms<'g, T>> {
    let (ls, cs) = (l.shape(), codes.shape());
    if ls.len() != 2 || cs.len() != 2 || ls[1] != cs[1] || ls[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "latents {ls:?}, codes {cs:?} and {} labels do not fit",
            labels.len()
        )));
    }
    for &label in labels {
        check_params(cs[0], label, tau)?;
    }
    if !l.value().all_finite() || !codes.value().all_finite() {
        return Err(Error::Numeric("non-finite latent or codebook".into()));
    }
    let logits = l.matmul_t(codes).scale(T::lit(1.0 / tau));
    let z_plus = codes.gather_rows(labels);
    Ok(VqTerms {
        infonce: logits.cross_entropy(labels).mean(),
        codebook: l.detach().sub(z_plus).square().sum_per_sample().mean(),
        commit: z_plus.detach().sub(l).square().sum_per_sample().mean(),
    })
}

/// The code matrix as a parameter.
pub fn codes<'g, T: Scalar>(p: &impl ParamSource<'g, T>, n_c: usize, n_d: usize) -> Var<'g, T> {
    p.param(CODES, &[n_c, n_d], Init::UnitRows)
}

/// `E_c`: four stride-2 conv stages, global average pool, linear head, L2 normalization.
pub fn condition_encoder<'g, T: Scalar>(
    p: &impl ParamSource<'g, T>,
    y: Var<'g, T>,
    width: usize,
    n_d: usize,
) -> Var<'g, T> {
    let mut h = y;
    for (i, m) in [1, 2, 4, 4].into_iter().enumerate() {
        h = nn::lrelu(nn::conv(p, &format!("{ENCODER}.c{i}"), h, width * m, 3, 2));
    }
    nn::linear(p, &format!("{ENCODER}.head"), h.mean_spatial(), n_d).l2_normalize_rows()
}

/// Test-time assignment summary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentStats {
    pub n_c: usize,
    /// Samples assigned to each code.
    pub assignments: Vec<usize>,
    /// `confusion[true][assigned]`.
    pub confusion: Vec<Vec<usize>>,
    pub correct: usize,
    pub total: usize,
}

impl AssignmentStats {
    pub fn new(n_c: usize, truth: &[usize], assigned: &[usize]) -> Result<Self> {
        if truth.len() != assigned.len() {
            return Err(Error::Dimension(format!(
                "{} labels vs {} assignments",
                truth.len(),
                assigned.len()
            )));
        }
        let mut confusion = vec![vec![0; n_c]; n_c];
        let mut assignments = vec![0; n_c];
        for (&t, &a) in truth.iter().zip(assigned) {
            if t >= n_c || a >= n_c {
                return Err(Error::Contract(format!("index outside 0..{n_c}: true {t}, assigned {a}")));
            }
            confusion[t][a] += 1;
            assignments[a] += 1;
        }
        let correct = (0..n_c).map(|i| confusion[i][i]).sum();
        Ok(Self {
            n_c,
            assignments,
            confusion,
            correct,
            total: truth.len(),
        })
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    /// Codes nobody was assigned to.
    pub fn unused_codes(&self) -> Vec<usize> {
        (0..self.n_c).filter(|&i| self.assignments[i] == 0).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nlos_tensor::{Binder, Graph, ParamSet};

    fn cb2() -> Codebook<f64> {
        Codebook::from_array(&Array::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap()
    }

    #[test]
    fn test_mode_picks_nearest_and_train_mode_the_label() {
        let l = LatentCondition::new(vec![0.9, 0.436]).unwrap();
        assert_eq!(quantize(&l, &cb2(), Mode::Test, None).unwrap().index, 0);
        let l0 = LatentCondition::new(vec![1.0, 0.0]).unwrap();
        let r = quantize(&l0, &cb2(), Mode::Train, Some(1)).unwrap();
        assert_eq!((r.index, r.z_q.as_slice()), (1, &[0.0, 1.0][..]));
        assert_eq!(quantize(&l0, &cb2(), Mode::Train, None).unwrap_err().class(), "contract");
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let l = LatentCondition::new(vec![1.0, 1.0]).unwrap();
        assert_eq!(quantize(&l, &cb2(), Mode::Test, None).unwrap().index, 0);
    }

    #[test]
    fn hand_computed_infonce() {
        let l = LatentCondition::new(vec![1.0, 0.0]).unwrap();
        let v = vq_loss(&l, &cb2(), 0, 1.0, 0.0, 0.0).unwrap();
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((v.infonce - expect).abs() < 1e-12);
        assert!((v.infonce - 0.31326).abs() < 1e-5);
        assert_eq!((v.codebook, v.commit), (0.0, 0.0));
    }

    #[test]
    fn graph_terms_match_reference() {
        let cb = Codebook::<f64>::random(4, 6, 2).unwrap();
        let ls = Codebook::<f64>::random(3, 6, 3).unwrap();
        let labels = [2, 0, 3];
        let g = Graph::new();
        let t = vq_terms(g.constant(ls.to_array()), g.constant(cb.to_array()), &labels, 0.5).unwrap();
        let mut sums = [0.0; 3];
        for (i, &lab) in labels.iter().enumerate() {
            let l = LatentCondition::new(ls.row(i).to_vec()).unwrap();
            let v = vq_loss(&l, &cb, lab, 0.5, 1.0, 1.0).unwrap();
            sums[0] += v.infonce / 3.0;
            sums[1] += v.codebook / 3.0;
            sums[2] += v.commit / 3.0;
        }
        assert!((t.infonce.item() - sums[0]).abs() < 1e-12);
        assert!((t.codebook.item() - sums[1]).abs() < 1e-12);
        assert!((t.commit.item() - sums[2]).abs() < 1e-12);
    }

    #[test]
    fn encoder_output_is_unit_norm() {
        let g = Graph::<f64>::new();
        let init = nn::Initializer::new(&g, 0);
        let y = g.constant(Array::full(&[2, 3, 16, 16], 0.3));
        condition_encoder(&init, y, 4, 8);
        let params: ParamSet<f64> = init.into_params();
        let b = Binder::inference(&g, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = g.constant(Array::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng));
        let l = condition_encoder(&b, y, 4, 8).value();
        for r in l.data().chunks(8) {
            assert!((r.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < NORM_TOL);
        }
    }

    #[test]
    fn confusion_rows_sum_to_counts() {
        let s = AssignmentStats::new(3, &[0, 0, 1, 2, 2], &[0, 1, 1, 2, 0]).unwrap();
        assert_eq!(s.confusion[0].iter().sum::<usize>(), 2);
        assert_eq!(s.correct, 3);
        assert_eq!(s.assignments, vec![2, 2, 1]);
        assert!(s.unused_codes().is_empty());
    }
}
