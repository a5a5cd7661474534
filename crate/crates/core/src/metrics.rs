//! Image similarity: MSE, PSNR over the pooled dynamic range of the pair,
//! and global (single-window) SSIM with population moments.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

fn check_pair(g: &[f64], h: &[f64]) -> Result<()> {
    check_len(g.len(), h.len())?;
    if g.is_empty() {
        return Err(Error::DimensionMismatch { expected: 1, found: 0 });
    }
    Ok(())
}

/// `(1/n) Σ (G_i − H_i)²`.
pub fn mse(g: &[f64], h: &[f64]) -> Result<f64> {
    check_pair(g, h)?;
    Ok(g.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / g.len() as f64)
}

/// `max{G, H} − min{G, H}` over both images.
pub fn pooled_range(g: &[f64], h: &[f64]) -> Result<f64> {
    check_pair(g, h)?;
    let (lo, hi) = g
        .iter()
        .chain(h)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(hi - lo)
}

/// `10 log10(R² / MSE)` with `R` the pooled range; `+∞` when the images are
/// identical.
pub fn psnr(g: &[f64], h: &[f64]) -> Result<f64> {
    let r = pooled_range(g, h)?;
    if r <= 0.0 {
        return Err(Error::DegenerateRange);
    }
    let m = mse(g, h)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (r * r / m).log10())
}

/// Default stability constants `((0.01 R)², (0.03 R)²)`.
pub fn default_ssim_constants(range: f64) -> (f64, f64) {
    ((0.01 * range).powi(2), (0.03 * range).powi(2))
}

/// `(2μ_G μ_H + c1)(2σ_GH + c2) / ((μ_G² + μ_H² + c1)(σ_G² + σ_H² + c2))`.
pub fn ssim(g: &[f64], h: &[f64], c1: f64, c2: f64) -> Result<f64> {
    check_pair(g, h)?;
    if !(c1 > 0.0 && c2 > 0.0) {
        return Err(Error::InvalidConfig(format!("ssim constants must be positive, got ({c1}, {c2})")));
    }
    let n = g.len() as f64;
    let mg = g.iter().sum::<f64>() / n;
    let mh = h.iter().sum::<f64>() / n;
    let (mut vg, mut vh, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in g.iter().zip(h) {
        let (da, db) = (a - mg, b - mh);
        vg += da * da;
        vh += db * db;
        cov += da * db;
    }
    vg /= n;
    vh /= n;
    cov /= n;
    if g == h {
        return Ok(1.0);
    }
    Ok((2.0 * mg * mh + c1) * (2.0 * cov + c2) / ((mg * mg + mh * mh + c1) * (vg + vh + c2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    /// `+∞` for identical images, serialized as the string `"inf"`.
    #[serde(with = "psnr_value")]
    pub psnr: f64,
    pub ssim: f64,
    pub c1: f64,
    pub c2: f64,
}

mod psnr_value {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("invalid psnr {t:?}"))),
        }
    }
}

/// All three criteria with the default SSIM constants.
pub fn evaluate_pair(g: &[f64], h: &[f64]) -> Result<MetricReport> {
    let r = pooled_range(g, h)?;
    if r <= 0.0 {
        return Err(Error::DegenerateRange);
    }
    let (c1, c2) = default_ssim_constants(r);
    Ok(MetricReport {
        mse: mse(g, h)?,
        psnr: psnr(g, h)?,
        ssim: ssim(g, h, c1, c2)?,
        c1,
        c2,
    })
}
