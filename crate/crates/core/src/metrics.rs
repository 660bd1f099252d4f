//! Image fidelity metrics.

use nlos_tensor::Scalar;

use crate::error::{Error, Result};
use crate::image::ImageGrid;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Scalar>(a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!("comparing {:?} with {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::Dimension("empty image".into()));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(s / n as f64)
}

/// `10 log10(peak^2 / MSE)` in dB; `+inf` for identical images.
pub fn psnr<T: Scalar>(a: &ImageGrid<T>, b: &ImageGrid<T>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / m).log10() })
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over every fully contained 11 x 11 Gaussian window of the
/// channel-mean luma, dynamic range 1.
pub fn ssim<T: Scalar>(a: &ImageGrid<T>, b: &ImageGrid<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, _) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let la = a.luma();
    let lb = b.luma();
    let pa: Vec<f64> = la.data().iter().map(|v| v.as_f64()).collect();
    let pb: Vec<f64> = lb.data().iter().map(|v| v.as_f64()).collect();
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, ty) in taps.iter().enumerate() {
                for (dx, tx) in taps.iter().enumerate() {
                    let wgt = ty * tx;
                    let i = (y + dy) * w + x + dx;
                    let (va, vb) = (pa[i], pb[i]);
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Arithmetic mean; empty input gives `NaN`.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `+inf` PSNR is written as the string `"inf"`.
pub mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value `{t}`"))),
        }
    }
}
