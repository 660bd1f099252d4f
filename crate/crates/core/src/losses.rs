//! Reconstruction, adversarial and perceptual objectives, and the per-term
//! report logged at every step.

use nlos_tensor::{Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Networks;
use crate::nn::ParamSource;

/// Loss weights and VQ hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_vq: f64,
    pub lambda_gan: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda_vq: 1.0,
            lambda_gan: 0.1,
            tau: crate::codebook::DEFAULT_TAU,
            alpha: crate::codebook::DEFAULT_ALPHA,
            beta: crate::codebook::DEFAULT_BETA,
        }
    }
}

/// Unweighted components plus the two weighted totals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub ot: f64,
    pub vq_infonce: f64,
    pub vq_codebook: f64,
    pub vq_commit: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub perceptual: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossReport {
    /// `l1 + lambda1 ot + lambda_vq (infonce + alpha cb + beta commit) + lambda_gan (gan_g + lambda2 perceptual)`.
    pub fn generator_total(&self, w: &LossWeights) -> f64 {
        self.l1
            + w.lambda1 * self.ot
            + w.lambda_vq * (self.vq_infonce + w.alpha * self.vq_codebook + w.beta * self.vq_commit)
            + w.lambda_gan * (self.gan_g + w.lambda2 * self.perceptual)
    }

    pub fn discriminator_total(&self) -> f64 {
        self.gan_d
    }

    /// Fill `total_g` and `total_d` from the components.
    pub fn with_totals(mut self, w: &LossWeights) -> Self {
        self.total_g = self.generator_total(w);
        self.total_d = self.discriminator_total();
        self
    }

    pub fn terms(&self) -> [(&'static str, f64); 10] {
        [
            ("l1", self.l1),
            ("ot", self.ot),
            ("vq_infonce", self.vq_infonce),
            ("vq_codebook", self.vq_codebook),
            ("vq_commit", self.vq_commit),
            ("gan_g", self.gan_g),
            ("gan_d", self.gan_d),
            ("perceptual", self.perceptual),
            ("total_g", self.total_g),
            ("total_d", self.total_d),
        ]
    }

    pub fn non_finite_terms(&self) -> Vec<&'static str> {
        self.terms().into_iter().filter(|(_, v)| !v.is_finite()).map(|(n, _)| n).collect()
    }

    /// Element-wise running sum, for epoch means.
    pub fn accumulate(&mut self, other: &LossReport) {
        self.l1 += other.l1;
        self.ot += other.ot;
        self.vq_infonce += other.vq_infonce;
        self.vq_codebook += other.vq_codebook;
        self.vq_commit += other.vq_commit;
        self.gan_g += other.gan_g;
        self.gan_d += other.gan_d;
        self.perceptual += other.perceptual;
        self.total_g += other.total_g;
        self.total_d += other.total_d;
    }

    pub fn scaled(&self, f: f64) -> LossReport {
        LossReport {
            l1: self.l1 * f,
            ot: self.ot * f,
            vq_infonce: self.vq_infonce * f,
            vq_codebook: self.vq_codebook * f,
            vq_commit: self.vq_commit * f,
            gan_g: self.gan_g * f,
            gan_d: self.gan_d * f,
            perceptual: self.perceptual * f,
            total_g: self.total_g * f,
            total_d: self.total_d * f,
        }
    }
}

fn same_shape<T: Scalar>(a: Var<'_, T>, b: Var<'_, T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(a, b, "mean absolute error")?;
    Ok(a.sub(b).abs().mean())
}

/// Mean squared error.
pub fn mse<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(a, b, "mean squared error")?;
    Ok(a.sub(b).square().mean())
}

/// Image L1 and latent L1 terms.
#[derive(Debug)]
pub struct ReconTerms<'g, T: Scalar> {
    pub total: Var<'g, T>,
    pub l1: Var<'g, T>,
    pub ot: Var<'g, T>,
}

/// `MAE(x, x') + lambda1 MAE(lat_h, lat_r)`.
pub fn recon_loss<'g, T: Scalar>(
    x: Var<'g, T>,
    x_rec: Var<'g, T>,
    lat_h: Var<'g, T>,
    lat_r: Var<'g, T>,
    lambda1: f64,
) -> Result<ReconTerms<'g, T>> {
    let l1 = mae(x, x_rec)?;
    let ot = mae(lat_h, lat_r)?;
    Ok(ReconTerms {
        total: l1.add(ot.scale(T::lit(lambda1))),
        l1,
        ot,
    })
}

/// Hinge objectives averaged over scales (and over the batch within a scale).
#[derive(Debug)]
pub struct GanTerms<'g, T: Scalar> {
    pub generator: Var<'g, T>,
    pub discriminator: Var<'g, T>,
}

pub fn gan_losses<'g, T: Scalar>(d_real: &[Var<'g, T>], d_fake: &[Var<'g, T>]) -> Result<GanTerms<'g, T>> {
    if d_real.is_empty() || d_real.len() != d_fake.len() {
        return Err(Error::Contract(format!(
            "need equal, non-empty score lists, got {} real and {} fake",
            d_real.len(),
            d_fake.len()
        )));
    }
    let k = T::lit(1.0 / d_real.len() as f64);
    let one = T::one();
    let mut g: Option<Var<'g, T>> = None;
    let mut d: Option<Var<'g, T>> = None;
    for (&r, &f) in d_real.iter().zip(d_fake) {
        same_shape(r, f, "discriminator scores")?;
        // -min(0, -1 + r) = relu(1 - r); -min(0, -1 - f) = relu(1 + f).
        let dk = r.neg().add_scalar(one).relu().mean().add(f.add_scalar(one).relu().mean());
        let gk = f.mean().neg();
        d = Some(d.map_or(dk, |acc| acc.add(dk)));
        g = Some(g.map_or(gk, |acc| acc.add(gk)));
    }
    Ok(GanTerms {
        generator: g.expect("non-empty").scale(k),
        discriminator: d.expect("non-empty").scale(k),
    })
}

/// Sum over the three feature stages of the feature MSE.
pub fn perceptual_loss<'g, T: Scalar>(
    net: &Networks,
    p: &impl ParamSource<'g, T>,
    y: Var<'g, T>,
    y_rep: Var<'g, T>,
) -> Result<Var<'g, T>> {
    same_shape(y, y_rep, "perceptual loss")?;
    let fa = net.perceptual_features(p, y)?;
    let fb = net.perceptual_features(p, y_rep)?;
    let mut total: Option<Var<'g, T>> = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let t = mse(a, b)?;
        total = Some(total.map_or(t, |acc| acc.add(t)));
    }
    Ok(total.expect("three stages"))
}
