//! Full-reference image quality: PSNR, Gaussian-windowed SSIM, and
//! dataset-level evaluation reports.
//!
//! Both metrics expect images in `[0, 1]` (peak 1). PSNR is capped at 99 dB
//! so identical pairs stay finite and sortable; SSIM averages an 11×11
//! Gaussian window (σ 1.5) over every valid position, channels weighted
//! equally.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const SSIM_SIGMA: f64 = 1.5;

/// `10·log10(1 / MSE)` against peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "psnr", lhs: a.shape(), rhs: b.shape() });
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// SSIM with the stock parameters (11×11 window, k1 0.01, k2 0.03).
pub fn ssim(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2)
}

/// Mean local SSIM over valid window positions; the window weights are a
/// normalized Gaussian with σ 1.5 regardless of window size.
pub fn ssim_with(a: &Tensor4, b: &Tensor4, window: usize, k1: f64, k2: f64) -> Result<f64> {
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::ShapeMismatch { op: "ssim", lhs: s, rhs: b.shape() });
    }
    if window == 0 || window > s.h.min(s.w) {
        return Err(Error::invalid(format!(
            "ssim window {window} does not fit {}x{} images",
            s.h, s.w
        )));
    }
    let c1 = (k1 * 1.0_f64).powi(2);
    let c2 = (k2 * 1.0_f64).powi(2);
    let kernel = gaussian_kernel(window, SSIM_SIGMA);
    let plane = s.h * s.w;

    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..s.n * s.c {
        let pa = &a.data()[p * plane..][..plane];
        let pb = &b.data()[p * plane..][..plane];
        let stats = |f: &dyn Fn(usize) -> f64| sep_conv_valid(f, s.h, s.w, &kernel);
        let mu_a = stats(&|i| pa[i]);
        let mu_b = stats(&|i| pb[i]);
        let m_aa = stats(&|i| pa[i] * pa[i]);
        let m_bb = stats(&|i| pb[i] * pb[i]);
        let m_ab = stats(&|i| pa[i] * pb[i]);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            total += l * cs;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let center = (window as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..window)
        .map(|i| (-(i as f64 - center).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-region Gaussian filtering of `f(flat index)` over an
/// `h`×`w` plane; returns the `(h-L+1)·(w-L+1)` filtered values.
fn sep_conv_valid(f: &dyn Fn(usize) -> f64, h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let l = kernel.len();
    let (wh, ww) = (h - l + 1, w - l + 1);
    let mut horiz = vec![0.0; h * ww];
    for y in 0..h {
        for x in 0..ww {
            let mut acc = 0.0;
            for (d, &kv) in kernel.iter().enumerate() {
                acc += kv * f(y * w + x + d);
            }
            horiz[y * ww + x] = acc;
        }
    }
    let mut out = vec![0.0; wh * ww];
    for y in 0..wh {
        for x in 0..ww {
            let mut acc = 0.0;
            for (d, &kv) in kernel.iter().enumerate() {
                acc += kv * horiz[(y + d) * ww + x];
            }
            out[y * ww + x] = acc;
        }
    }
    out
}

/// One evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores plus their arithmetic means for one method on one
/// dataset.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub method: String,
    pub dataset: String,
    pub per_image: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricsReport {
    /// One CSV row per image, ordered by id, with a trailing mean row.
    pub fn per_image_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim\n");
        for score in &self.per_image {
            let _ = writeln!(out, "{},{:.4},{:.6}", score.id, score.psnr, score.ssim);
        }
        let _ = writeln!(out, "mean,{:.4},{:.6}", self.mean_psnr, self.mean_ssim);
        out
    }

    /// Aligned text table, one row per method: method, PSNR, SSIM.
    pub fn render_table(reports: &[MetricsReport]) -> String {
        let name_w = reports
            .iter()
            .map(|r| r.method.len())
            .chain(["Method".len()])
            .max()
            .unwrap_or(6);
        let mut out = format!("{:<name_w$}  {:>6}  {:>5}\n", "Method", "PSNR", "SSIM");
        for r in reports {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>6.2}  {:>5.3}",
                r.method, r.mean_psnr, r.mean_ssim
            );
        }
        out
    }

    /// One CSV row per method: method, PSNR, SSIM.
    pub fn render_csv(reports: &[MetricsReport]) -> String {
        let mut out = String::from("method,psnr,ssim\n");
        for r in reports {
            let _ = writeln!(out, "{},{:.2},{:.3}", r.method, r.mean_psnr, r.mean_ssim);
        }
        out
    }
}

/// Scores `outputs` against `truths`, pairing by id. Every id must appear on
/// both sides exactly once; results come back sorted by id.
pub fn evaluate_dataset(
    method: &str,
    dataset: &str,
    outputs: &[(String, Tensor4)],
    truths: &[(String, Tensor4)],
) -> Result<MetricsReport> {
    let mut truth_map = BTreeMap::new();
    for (id, img) in truths {
        if truth_map.insert(id.as_str(), img).is_some() {
            return Err(Error::invalid(format!("duplicate ground-truth id {id}")));
        }
    }
    let mut out_map = BTreeMap::new();
    for (id, img) in outputs {
        if out_map.insert(id.as_str(), img).is_some() {
            return Err(Error::invalid(format!("duplicate output id {id}")));
        }
    }
    let missing_truth: Vec<&str> = out_map
        .keys()
        .filter(|id| !truth_map.contains_key(**id))
        .copied()
        .collect();
    let missing_output: Vec<&str> = truth_map
        .keys()
        .filter(|id| !out_map.contains_key(**id))
        .copied()
        .collect();
    if !missing_truth.is_empty() || !missing_output.is_empty() {
        let mut msg = String::from("unmatched ids:");
        if !missing_truth.is_empty() {
            let _ = write!(msg, " no ground truth for [{}]", missing_truth.join(", "));
        }
        if !missing_output.is_empty() {
            let _ = write!(msg, " no output for [{}]", missing_output.join(", "));
        }
        return Err(Error::invalid(msg));
    }
    if out_map.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }

    let mut per_image = Vec::with_capacity(out_map.len());
    for (id, out_img) in &out_map {
        let truth = truth_map[id];
        per_image.push(ImageScore {
            id: (*id).to_string(),
            psnr: psnr(out_img, truth)?,
            ssim: ssim(out_img, truth)?,
        });
    }
    let n = per_image.len() as f64;
    let mean_psnr = per_image.iter().map(|s| s.psnr).sum::<f64>() / n;
    let mean_ssim = per_image.iter().map(|s| s.ssim).sum::<f64>() / n;
    Ok(MetricsReport {
        method: method.to_string(),
        dataset: dataset.to_string(),
        per_image,
        mean_psnr,
        mean_ssim,
    })
}
