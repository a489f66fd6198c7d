//! Single-level 2D Haar analysis/synthesis on rank-4 tensors.
//!
//! Analysis correlates each channel with four 2×2 filters at stride 2,
//! yielding half-resolution sub-bands: LL (block sums) plus LH/HL/HH detail.
//! The filters keep their raw ±1 entries and the 1/4 lands in the synthesis
//! step, so one LL coefficient is literally the sum of its four pixels. An
//! orthonormal variant scales both halves by 1/2 instead.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

/// The four 2×2 analysis kernels, unscaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaarFilters {
    pub ll: [[f64; 2]; 2],
    pub lh: [[f64; 2]; 2],
    pub hl: [[f64; 2]; 2],
    pub hh: [[f64; 2]; 2],
}

impl HaarFilters {
    pub const fn unnormalized() -> Self {
        HaarFilters {
            ll: [[1.0, 1.0], [1.0, 1.0]],
            lh: [[-1.0, -1.0], [1.0, 1.0]],
            hl: [[-1.0, 1.0], [-1.0, 1.0]],
            hh: [[1.0, -1.0], [-1.0, 1.0]],
        }
    }

    pub fn as_array(&self) -> [[[f64; 2]; 2]; 4] {
        [self.ll, self.lh, self.hl, self.hh]
    }
}

/// Scaling convention for the filter bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WaveletNorm {
    /// ±1 analysis filters; synthesis carries the whole 1/4.
    #[default]
    Unnormalized,
    /// Both directions scaled by 1/2; coefficients keep the input's energy.
    Orthonormal,
}

impl WaveletNorm {
    fn analysis_scale(self) -> f64 {
        match self {
            WaveletNorm::Unnormalized => 1.0,
            WaveletNorm::Orthonormal => 0.5,
        }
    }

    fn synthesis_scale(self) -> f64 {
        match self {
            WaveletNorm::Unnormalized => 0.25,
            WaveletNorm::Orthonormal => 0.5,
        }
    }
}

/// The four half-resolution sub-bands of one analysis level.
#[derive(Debug, Clone)]
pub struct WaveletBands {
    pub ll: Tensor4,
    pub lh: Tensor4,
    pub hl: Tensor4,
    pub hh: Tensor4,
}

impl WaveletBands {
    pub fn shape(&self) -> Shape4 {
        self.ll.shape()
    }

    fn check_consistent(&self) -> Result<()> {
        let s = self.ll.shape();
        for (name, band) in [("lh", &self.lh), ("hl", &self.hl), ("hh", &self.hh)] {
            if band.shape() != s {
                return Err(Error::invalid(format!(
                    "wavelet band {name} has shape {} but ll has {s}",
                    band.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Decomposes `x` into four sub-bands with the default unnormalized filters.
pub fn dwt2(x: &Tensor4) -> Result<WaveletBands> {
    dwt2_with(x, WaveletNorm::Unnormalized)
}

pub fn dwt2_with(x: &Tensor4, norm: WaveletNorm) -> Result<WaveletBands> {
    let xs = x.shape();
    let stacked_shape = dwt2_out_shape(xs)?;
    let stacked = dwt2_raw(x.data(), xs, norm.analysis_scale());
    Ok(split_bands(&stacked, stacked_shape))
}

/// Reconstructs the image that [`dwt2`] decomposed; exact up to rounding.
pub fn iwt2(bands: &WaveletBands) -> Result<Tensor4> {
    iwt2_with(bands, WaveletNorm::Unnormalized)
}

pub fn iwt2_with(bands: &WaveletBands, norm: WaveletNorm) -> Result<Tensor4> {
    bands.check_consistent()?;
    let (stacked, stacked_shape) = stack_bands(bands);
    let out_shape = iwt2_out_shape(stacked_shape)?;
    let data = iwt2_raw(&stacked, stacked_shape, norm.synthesis_scale());
    Tensor4::from_vec(out_shape, data)
}

// ── Flat band-major kernels (shared with the differentiation tape) ──

pub(crate) fn dwt2_out_shape(xs: Shape4) -> Result<Shape4> {
    if xs.h % 2 != 0 || xs.w % 2 != 0 {
        return Err(Error::invalid(format!(
            "dwt2 needs even height and width, got {xs}; pad the image first"
        )));
    }
    Ok(Shape4::new(xs.n, 4 * xs.c, xs.h / 2, xs.w / 2))
}

pub(crate) fn iwt2_out_shape(ys: Shape4) -> Result<Shape4> {
    if ys.c % 4 != 0 {
        return Err(Error::invalid(format!(
            "iwt2 needs a channel count divisible by 4 (band-major stacking), got {ys}"
        )));
    }
    Ok(Shape4::new(ys.n, ys.c / 4, ys.h * 2, ys.w * 2))
}

/// Analysis into a band-major stack `(n, 4c, h/2, w/2)`: channels `[0, c)`
/// hold LL, then LH, HL, HH.
pub(crate) fn dwt2_raw(x: &[f64], xs: Shape4, scale: f64) -> Vec<f64> {
    let (h2, w2) = (xs.h / 2, xs.w / 2);
    let plane_in = xs.h * xs.w;
    let plane_out = h2 * w2;
    let mut out = vec![0.0; xs.n * 4 * xs.c * plane_out];
    for n in 0..xs.n {
        for ch in 0..xs.c {
            let src = &x[(n * xs.c + ch) * plane_in..][..plane_in];
            let band_base = |band: usize| (n * 4 * xs.c + band * xs.c + ch) * plane_out;
            let (b0, b1, b2, b3) = (band_base(0), band_base(1), band_base(2), band_base(3));
            for by in 0..h2 {
                let r0 = &src[2 * by * xs.w..][..xs.w];
                let r1 = &src[(2 * by + 1) * xs.w..][..xs.w];
                for bx in 0..w2 {
                    let (p, q) = (r0[2 * bx], r0[2 * bx + 1]);
                    let (r, s) = (r1[2 * bx], r1[2 * bx + 1]);
                    let o = by * w2 + bx;
                    out[b0 + o] = scale * (p + q + r + s);
                    out[b1 + o] = scale * (-p - q + r + s);
                    out[b2 + o] = scale * (-p + q - r + s);
                    out[b3 + o] = scale * (p - q - r + s);
                }
            }
        }
    }
    out
}

/// Synthesis from a band-major stack back to `(n, c, 2h, 2w)`.
pub(crate) fn iwt2_raw(y: &[f64], ys: Shape4, scale: f64) -> Vec<f64> {
    let c = ys.c / 4;
    let (h2, w2) = (ys.h, ys.w);
    let plane_in = h2 * w2;
    let w = 2 * w2;
    let plane_out = 4 * plane_in;
    let mut out = vec![0.0; ys.n * c * plane_out];
    for n in 0..ys.n {
        for ch in 0..c {
            let band = |b: usize| &y[(n * ys.c + b * c + ch) * plane_in..][..plane_in];
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            let dst = &mut out[(n * c + ch) * plane_out..][..plane_out];
            for by in 0..h2 {
                for bx in 0..w2 {
                    let o = by * w2 + bx;
                    let (a, d, v, g) = (ll[o], lh[o], hl[o], hh[o]);
                    let top = 2 * by * w + 2 * bx;
                    let bot = top + w;
                    dst[top] = scale * (a - d - v + g);
                    dst[top + 1] = scale * (a - d + v - g);
                    dst[bot] = scale * (a + d - v - g);
                    dst[bot + 1] = scale * (a + d + v + g);
                }
            }
        }
    }
    out
}

fn split_bands(stacked: &[f64], ss: Shape4) -> WaveletBands {
    let c = ss.c / 4;
    let band_shape = Shape4::new(ss.n, c, ss.h, ss.w);
    let plane = ss.h * ss.w;
    let run = c * plane;
    let mut bands: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; band_shape.count()]);
    for n in 0..ss.n {
        for (b, band) in bands.iter_mut().enumerate() {
            let src = &stacked[(n * ss.c + b * c) * plane..][..run];
            band[n * run..(n + 1) * run].copy_from_slice(src);
        }
    }
    let [ll, lh, hl, hh] = bands.map(|d| {
        Tensor4::from_vec(band_shape, d).expect("band data is finite by construction")
    });
    WaveletBands { ll, lh, hl, hh }
}

fn stack_bands(bands: &WaveletBands) -> (Vec<f64>, Shape4) {
    let bs = bands.shape();
    let ss = Shape4::new(bs.n, 4 * bs.c, bs.h, bs.w);
    let plane = bs.h * bs.w;
    let run = bs.c * plane;
    let mut stacked = vec![0.0; ss.count()];
    for n in 0..bs.n {
        for (b, band) in [&bands.ll, &bands.lh, &bands.hl, &bands.hh].iter().enumerate() {
            let dst = &mut stacked[(n * ss.c + b * bs.c) * plane..][..run];
            dst.copy_from_slice(&band.data()[n * run..(n + 1) * run]);
        }
    }
    (stacked, ss)
}
