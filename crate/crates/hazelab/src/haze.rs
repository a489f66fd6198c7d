//! Atmospheric scattering: haze synthesis, its analytic inverse, the dark
//! channel operator, and the classical prior-based baseline dehazer.
//!
//! The forward model blends a clear image toward the airlight by the
//! transmission `t = exp(-beta * depth)`; every function here works on
//! images in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{channel_min, minpool_patch, Shape4, Tensor4};

pub const DEFAULT_OMEGA: f64 = 0.95;
pub const DEFAULT_T_FLOOR: f64 = 0.1;
pub const DEFAULT_PATCH: usize = 3;
pub const DEFAULT_AIRLIGHT_FRACTION: f64 = 1e-3;

/// Everything the forward model needs: a clear image, per-pixel depth, the
/// scattering coefficient, and the per-channel airlight.
#[derive(Debug, Clone)]
pub struct HazeScene {
    pub clear: Tensor4,
    pub depth: Tensor4,
    pub beta: f64,
    pub airlight: Vec<f64>,
}

impl HazeScene {
    pub fn new(clear: Tensor4, depth: Tensor4, beta: f64, airlight: Vec<f64>) -> Result<Self> {
        let scene = HazeScene { clear, depth, beta, airlight };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        let (cs, ds) = (self.clear.shape(), self.depth.shape());
        if ds.c != 1 || ds.n != cs.n || ds.h != cs.h || ds.w != cs.w {
            return Err(Error::ShapeMismatch { op: "haze scene", lhs: cs, rhs: ds });
        }
        if self.clear.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::invalid("scene clear image has values outside [0, 1]"));
        }
        if self.depth.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("scene depth has negative values"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid(format!(
                "scene beta must be positive, got {}",
                self.beta
            )));
        }
        if self.airlight.len() != cs.c {
            return Err(Error::invalid(format!(
                "scene airlight has {} components for {} channels",
                self.airlight.len(),
                cs.c
            )));
        }
        if self.airlight.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::invalid("scene airlight components must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Single-channel transmission with every value in `(0, 1]`.
#[derive(Debug, Clone)]
pub struct TransmissionMap {
    t: Tensor4,
}

impl TransmissionMap {
    pub fn new(t: Tensor4) -> Result<Self> {
        if t.shape().c != 1 {
            return Err(Error::invalid(format!(
                "transmission must be single-channel, got shape {}",
                t.shape()
            )));
        }
        if t.data().iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::invalid(
                "transmission values must lie in (0, 1]".to_string(),
            ));
        }
        Ok(TransmissionMap { t })
    }

    pub fn map(&self) -> &Tensor4 {
        &self.t
    }

    pub fn into_inner(self) -> Tensor4 {
        self.t
    }
}

/// `t(x) = exp(-beta * d(x))`, kept strictly positive even where the
/// exponential underflows f64.
pub fn transmission_from_depth(depth: &Tensor4, beta: f64) -> Result<TransmissionMap> {
    if depth.shape().c != 1 {
        return Err(Error::invalid(format!(
            "depth must be single-channel, got shape {}",
            depth.shape()
        )));
    }
    if depth.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("depth has negative values"));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    let data = depth
        .data()
        .iter()
        .map(|&d| (-beta * d).exp().max(f64::MIN_POSITIVE))
        .collect();
    TransmissionMap::new(Tensor4::from_vec(depth.shape(), data)?)
}

/// Blends the clear image toward the airlight: `I = J t + A (1 - t)`.
pub fn synthesize_haze(scene: &HazeScene) -> Result<Tensor4> {
    scene.validate()?;
    let t = transmission_from_depth(&scene.depth, scene.beta)?;
    let s = scene.clear.shape();
    let plane = s.h * s.w;
    let mut out = vec![0.0; s.count()];
    for n in 0..s.n {
        let tp = &t.map().data()[n * plane..][..plane];
        for c in 0..s.c {
            let a = scene.airlight[c];
            let jp = &scene.clear.data()[(n * s.c + c) * plane..][..plane];
            let op = &mut out[(n * s.c + c) * plane..][..plane];
            for i in 0..plane {
                op[i] = jp[i] * tp[i] + a * (1.0 - tp[i]);
            }
        }
    }
    Tensor4::from_vec(s, out)
}

/// Analytic restoration `J = (I - A) / max(t, t_floor) + A`, clamped to
/// `[0, 1]`; `airlight` is one value per channel, shared across the batch.
pub fn invert_haze(
    hazy: &Tensor4,
    t: &TransmissionMap,
    airlight: &[f64],
    t_floor: f64,
) -> Result<Tensor4> {
    if !(t_floor > 0.0) {
        return Err(Error::invalid(format!(
            "t_floor must be positive, got {t_floor}"
        )));
    }
    let (hs, ts) = (hazy.shape(), t.map().shape());
    if ts.n != hs.n || ts.h != hs.h || ts.w != hs.w {
        return Err(Error::ShapeMismatch { op: "invert_haze", lhs: hs, rhs: ts });
    }
    if airlight.len() != hs.c {
        return Err(Error::invalid(format!(
            "airlight has {} components for {} channels",
            airlight.len(),
            hs.c
        )));
    }
    let plane = hs.h * hs.w;
    let mut out = vec![0.0; hs.count()];
    for n in 0..hs.n {
        let tp = &t.map().data()[n * plane..][..plane];
        for c in 0..hs.c {
            let a = airlight[c];
            let ip = &hazy.data()[(n * hs.c + c) * plane..][..plane];
            let op = &mut out[(n * hs.c + c) * plane..][..plane];
            for i in 0..plane {
                op[i] = ((ip[i] - a) / tp[i].max(t_floor) + a).clamp(0.0, 1.0);
            }
        }
    }
    Tensor4::from_vec(hs, out)
}

/// Patch-minimum of the channel-minimum: the darkest intensity near each
/// pixel, `(n, c, h, w)` → `(n, 1, h, w)`.
pub fn dark_channel(image: &Tensor4, patch: usize) -> Result<Tensor4> {
    let (per_pixel, _) = channel_min(image);
    let (dark, _) = minpool_patch(&per_pixel, patch)?;
    Ok(dark)
}

/// Per-sample, per-channel airlight: the mean of the hazy pixels whose dark
/// channel ranks in the top `fraction` of the image.
pub fn estimate_airlight(hazy: &Tensor4, fraction: f64) -> Result<Vec<Vec<f64>>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "airlight fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let s = hazy.shape();
    let hw = s.h * s.w;
    let k = (fraction * hw as f64).floor() as usize;
    if k == 0 {
        return Err(Error::invalid(format!(
            "airlight selection is empty: fraction {fraction} of {hw} pixels rounds to zero; use a larger fraction"
        )));
    }
    let dark = dark_channel(hazy, DEFAULT_PATCH)?;
    let mut out = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let dp = &dark.data()[n * hw..][..hw];
        let mut order: Vec<usize> = (0..hw).collect();
        order.sort_by(|&a, &b| {
            dp[b].partial_cmp(&dp[a]).expect("dark channel is finite").then(a.cmp(&b))
        });
        let top = &order[..k];
        let mut a = vec![0.0; s.c];
        for (c, slot) in a.iter_mut().enumerate() {
            let plane = &hazy.data()[(n * s.c + c) * hw..][..hw];
            *slot = top.iter().map(|&p| plane[p]).sum::<f64>() / k as f64;
        }
        out.push(a);
    }
    Ok(out)
}

/// Prior-based baseline: estimate the airlight, predict transmission as
/// `1 - omega * dark_channel(hazy / A)`, and invert. `omega = 0` disables
/// the prior and returns the input unchanged.
pub fn dcp_dehaze(hazy: &Tensor4, omega: f64, patch: usize, t_floor: f64) -> Result<Tensor4> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::invalid(format!(
            "omega must lie in [0, 1], got {omega}"
        )));
    }
    if !(t_floor > 0.0 && t_floor <= 1.0) {
        return Err(Error::invalid(format!(
            "t_floor must lie in (0, 1], got {t_floor}"
        )));
    }
    let s = hazy.shape();
    let hw = s.h * s.w;
    // never let the top-fraction rule select zero pixels, whatever the size
    let fraction = DEFAULT_AIRLIGHT_FRACTION.max(1.0 / hw as f64);
    let airlight = estimate_airlight(hazy, fraction)?;

    let plane = hw;
    let mut normalized = vec![0.0; s.count()];
    for n in 0..s.n {
        for c in 0..s.c {
            let a = airlight[n][c].max(1e-6);
            let src = &hazy.data()[(n * s.c + c) * plane..][..plane];
            let dst = &mut normalized[(n * s.c + c) * plane..][..plane];
            for i in 0..plane {
                dst[i] = src[i] / a;
            }
        }
    }
    let normalized = Tensor4::from_vec(s, normalized)?;
    let dark = dark_channel(&normalized, patch)?;

    let mut out = vec![0.0; s.count()];
    for n in 0..s.n {
        let dp = &dark.data()[n * plane..][..plane];
        for c in 0..s.c {
            let a = airlight[n][c];
            let ip = &hazy.data()[(n * s.c + c) * plane..][..plane];
            let op = &mut out[(n * s.c + c) * plane..][..plane];
            for i in 0..plane {
                let t = (1.0 - omega * dp[i]).clamp(t_floor, 1.0);
                op[i] = ((ip[i] - a) / t + a).clamp(0.0, 1.0);
            }
        }
    }
    Tensor4::from_vec(s, out)
}

/// Shape of synthetic depth to generate when no depth data is on hand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthProfile {
    /// 0 at the left edge to 1 at the right.
    Ramp,
    /// 0 at the image center to 1 at the corners.
    Radial,
    /// 1 everywhere.
    Constant,
}

/// Deterministic single-channel depth in `[0, 1]`.
pub fn procedural_depth(profile: DepthProfile, n: usize, h: usize, w: usize) -> Tensor4 {
    let shape = Shape4::new(n, 1, h, w);
    let mut out = Tensor4::zeros(shape);
    for s in 0..n {
        for y in 0..h {
            for x in 0..w {
                let d = match profile {
                    DepthProfile::Ramp => {
                        if w > 1 {
                            x as f64 / (w - 1) as f64
                        } else {
                            0.0
                        }
                    }
                    DepthProfile::Radial => {
                        let cy = (h as f64 - 1.0) / 2.0;
                        let cx = (w as f64 - 1.0) / 2.0;
                        let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                        let rmax = (cy.powi(2) + cx.powi(2)).sqrt();
                        if rmax > 0.0 {
                            r / rmax
                        } else {
                            0.0
                        }
                    }
                    DepthProfile::Constant => 1.0,
                };
                out.set(s, 0, y, x, d);
            }
        }
    }
    out
}

/// Deterministic colorful test scenes: each image is a two-color gradient
/// with a handful of solid rectangles, enough structure for restoration
/// metrics to move.
pub fn procedural_clear(n: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
    let mut out = Tensor4::zeros(Shape4::new(n, 3, h, w));
    for s in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_add((s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
        let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
        let horizontal = rng.random::<bool>();
        for y in 0..h {
            for x in 0..w {
                let t = if horizontal {
                    x as f64 / (w - 1).max(1) as f64
                } else {
                    y as f64 / (h - 1).max(1) as f64
                };
                for c in 0..3 {
                    out.set(s, c, y, x, c0[c] * (1.0 - t) + c1[c] * t);
                }
            }
        }
        for _ in 0..4 {
            let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
            let ry = rng.random_range(0..h);
            let rx = rng.random_range(0..w);
            let rh = rng.random_range(1..=(h / 2).max(1));
            let rw = rng.random_range(1..=(w / 2).max(1));
            for y in ry..(ry + rh).min(h) {
                for x in rx..(rx + rw).min(w) {
                    for c in 0..3 {
                        out.set(s, c, y, x, color[c]);
                    }
                }
            }
        }
    }
    out
}
