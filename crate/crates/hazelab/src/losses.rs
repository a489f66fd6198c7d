//! Training objectives for the dehazing generator and its discriminator.
//!
//! Seven scalar terms, each differentiable on the tape: a per-image L2
//! reconstruction loss, a perceptual distance in a fixed random feature
//! embedding, the two adversarial objectives, total variation, a dark
//! channel sparsity penalty routed through the min-pool lookup table, and a
//! contrastive term that pulls restorations toward the clear anchor and
//! away from the hazy negative in the same embedding.
//!
//! The feature embedding stands in for a pretrained backbone: a fixed,
//! seeded, bias-free conv stack. Distances in a frozen random nonlinear
//! embedding keep the loss geometry without shipping foreign weights, and
//! every value is reproducible from the seed.
//!
//! Callers composing the contrastive pathway add the plain L1 distance
//! between clear and restored to [`loss_contrastive`]'s stage-difference
//! term; [`loss_total`] then folds the combined value in with weight
//! epsilon.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{discriminator_forward, DiscriminatorVars};
use crate::tensor::{Shape4, Tape, Tensor4, Var};

/// Keeps adversarial log terms finite no matter how saturated the
/// discriminator gets.
const D_LOG_CLAMP: f64 = 1e-7;

const FEATURE_WIDTHS: [usize; 3] = [8, 16, 32];
const FEATURE_IN_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub tv_weight: f64,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1e-2,
            tv_weight: 1e-5,
            gamma: 1e-5,
            delta: 1e-3,
            epsilon: 1e-1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("tv_weight", self.tv_weight),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("epsilon", self.epsilon),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "loss weight {name} must be a nonnegative finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A frozen three-stage conv → ReLU pyramid (stride 2 each) whose kernels
/// are drawn once from the seed and never trained.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    kernels: Vec<Tensor4>,
    stage_weights: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = FEATURE_IN_CHANNELS;
        let mut kernels = Vec::with_capacity(FEATURE_WIDTHS.len());
        for cout in FEATURE_WIDTHS {
            let fan_in = (cin * 9) as f64;
            let s = (1.0 / fan_in).sqrt();
            kernels.push(Tensor4::uniform(Shape4::new(cout, cin, 3, 3), -s, s, &mut rng));
            cin = cout;
        }
        let n = kernels.len();
        FeatureExtractor {
            kernels,
            stage_weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn stage_count(&self) -> usize {
        self.kernels.len()
    }

    /// Per-stage coefficients for the contrastive sum; nonnegative and
    /// summing to one.
    pub fn stage_weights(&self) -> &[f64] {
        &self.stage_weights
    }

    /// Every stage's activation for `x`, shallow to deep.
    pub fn stages(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut feat = x;
        let mut out = Vec::with_capacity(self.kernels.len());
        for k in &self.kernels {
            let kv = tape.constant(k.clone());
            feat = tape.conv2d(feat, kv, 2, 1)?;
            feat = tape.relu(feat);
            out.push(feat);
        }
        Ok(out)
    }

    /// The deepest activation, used by the perceptual loss.
    pub fn deepest(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(*self.stages(tape, x)?.last().expect("stage list is never empty"))
    }
}

/// Whether reconstruction distances are per-image L2 norms or their
/// squares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReconNorm {
    #[default]
    L2,
    SquaredL2,
}

fn check_same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
    }
    Ok(())
}

fn batch_mean_norm(tape: &mut Tape, diff: Var, norm: ReconNorm) -> Result<Var> {
    let sq = tape.mul(diff, diff)?;
    let per_image = tape.sample_sum(sq);
    let per_image = match norm {
        ReconNorm::L2 => tape.sqrt(per_image),
        ReconNorm::SquaredL2 => per_image,
    };
    Ok(tape.mean_all(per_image))
}

/// Mean absolute difference over every element.
pub fn mean_l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean_all(d))
}

/// Batch mean of the per-image L2 norm of `pred − target`.
pub fn loss_msl(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    loss_msl_with(tape, pred, target, ReconNorm::L2)
}

pub fn loss_msl_with(tape: &mut Tape, pred: Var, target: Var, norm: ReconNorm) -> Result<Var> {
    check_same_shape(tape, "loss_msl", pred, target)?;
    let diff = tape.sub(pred, target)?;
    batch_mean_norm(tape, diff, norm)
}

/// Same distance as [`loss_msl`] but measured between deepest embedding
/// activations instead of pixels.
pub fn loss_perceptual(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    fx: &FeatureExtractor,
) -> Result<Var> {
    loss_perceptual_with(tape, pred, target, fx, ReconNorm::L2)
}

pub fn loss_perceptual_with(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    fx: &FeatureExtractor,
    norm: ReconNorm,
) -> Result<Var> {
    check_same_shape(tape, "loss_perceptual", pred, target)?;
    let fp = fx.deepest(tape, pred)?;
    let ft = fx.deepest(tape, target)?;
    let diff = tape.sub(fp, ft)?;
    batch_mean_norm(tape, diff, norm)
}

/// Which objective the generator minimizes in the adversarial game. The
/// non-saturating form keeps gradients alive when the discriminator wins
/// early, which small-scale runs need.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GanMode {
    #[default]
    NonSaturating,
    Saturating,
}

/// Binary cross-entropy pair for the adversarial game: the discriminator
/// minimizes `d_loss`, the generator minimizes the non-saturating `g_loss`.
/// Discriminator outputs are clamped away from 0 and 1 before the logs.
pub fn loss_adversarial(
    tape: &mut Tape,
    d_vars: &DiscriminatorVars,
    real: Var,
    fake: Var,
) -> Result<(Var, Var)> {
    loss_adversarial_with(tape, d_vars, real, fake, GanMode::NonSaturating)
}

pub fn loss_adversarial_with(
    tape: &mut Tape,
    d_vars: &DiscriminatorVars,
    real: Var,
    fake: Var,
    mode: GanMode,
) -> Result<(Var, Var)> {
    check_same_shape(tape, "loss_adversarial", real, fake)?;
    let d_real = discriminator_forward(tape, d_vars, real)?;
    let d_fake = discriminator_forward(tape, d_vars, fake)?;
    let d_real = tape.clamp(d_real, D_LOG_CLAMP, 1.0 - D_LOG_CLAMP);
    let d_fake = tape.clamp(d_fake, D_LOG_CLAMP, 1.0 - D_LOG_CLAMP);

    let ln_real = tape.ln(d_real);
    let mean_ln_real = tape.mean_all(ln_real);
    let neg_fake = tape.scale(d_fake, -1.0);
    let one_minus_fake = tape.offset(neg_fake, 1.0);
    let ln_one_minus = tape.ln(one_minus_fake);
    let mean_ln_one_minus = tape.mean_all(ln_one_minus);
    let sum = tape.add(mean_ln_real, mean_ln_one_minus)?;
    let d_loss = tape.scale(sum, -1.0);

    let g_loss = match mode {
        GanMode::NonSaturating => {
            let ln_fake = tape.ln(d_fake);
            let mean_ln_fake = tape.mean_all(ln_fake);
            tape.scale(mean_ln_fake, -1.0)
        }
        GanMode::Saturating => mean_ln_one_minus,
    };
    Ok((d_loss, g_loss))
}

/// Batch mean of summed absolute forward differences; a dimension too
/// small to difference contributes zero.
pub fn loss_tv(tape: &mut Tape, pred: Var) -> Result<Var> {
    let s = tape.shape(pred);
    let mut per_image: Option<Var> = None;
    let push = |tape: &mut Tape, term: Var, acc: &mut Option<Var>| -> Result<()> {
        *acc = Some(match *acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
        Ok(())
    };
    if s.w >= 2 {
        let dh = tape.diff_h(pred)?;
        let dh = tape.abs(dh);
        let t = tape.sample_sum(dh);
        push(tape, t, &mut per_image)?;
    }
    if s.h >= 2 {
        let dv = tape.diff_v(pred)?;
        let dv = tape.abs(dv);
        let t = tape.sample_sum(dv);
        push(tape, t, &mut per_image)?;
    }
    Ok(match per_image {
        Some(v) => tape.mean_all(v),
        None => tape.constant(Tensor4::scalar(0.0)),
    })
}

/// Maps the signed image to [0, 1], takes the 3×3 dark channel, and
/// penalizes its per-image mean; gradients follow the recorded argmin
/// indices back to the winning pixels.
pub fn loss_dark_channel(tape: &mut Tape, pred: Var) -> Result<Var> {
    let half = tape.scale(pred, 0.5);
    let unit = tape.offset(half, 0.5);
    let cm = tape.channel_min(unit);
    let dark = tape.minpool(cm, 3)?;
    let dark = tape.abs(dark);
    let per_image = tape.sample_sum(dark);
    let s = tape.shape(pred);
    let per_image = tape.scale(per_image, 1.0 / (s.h * s.w) as f64);
    Ok(tape.mean_all(per_image))
}

/// Stage-weighted sum of (distance to clear anchor − distance to hazy
/// negative) in the frozen embedding; negative values mean the restoration
/// sits closer to clear than to hazy. Callers add the plain L1
/// reconstruction term separately.
pub fn loss_contrastive(
    tape: &mut Tape,
    hazy: Var,
    clear: Var,
    restored: Var,
    fx: &FeatureExtractor,
) -> Result<Var> {
    check_same_shape(tape, "loss_contrastive", hazy, clear)?;
    check_same_shape(tape, "loss_contrastive", clear, restored)?;
    let g_hazy = fx.stages(tape, hazy)?;
    let g_clear = fx.stages(tape, clear)?;
    let g_restored = fx.stages(tape, restored)?;
    let mut total: Option<Var> = None;
    for (i, &w) in fx.stage_weights().iter().enumerate() {
        let anchor = mean_l1(tape, g_clear[i], g_restored[i])?;
        let push_away = mean_l1(tape, g_hazy[i], g_restored[i])?;
        let diff = tape.sub(anchor, push_away)?;
        let term = tape.scale(diff, w);
        total = Some(match total {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(total.expect("at least one stage"))
}

/// Scalar values of every term for one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub msl: f64,
    pub perceptual: f64,
    pub tv: f64,
    pub dark_channel: f64,
    pub adversarial_g: f64,
    pub adversarial_d: f64,
    pub contrastive: f64,
}

/// [`LossTerms`] plus the generator's weighted total. The discriminator
/// loss is reported but not part of the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub msl: f64,
    pub perceptual: f64,
    pub tv: f64,
    pub dark_channel: f64,
    pub adversarial_g: f64,
    pub adversarial_d: f64,
    pub contrastive: f64,
    pub total: f64,
}

pub fn loss_total(terms: LossTerms, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    for (name, v) in [
        ("msl", terms.msl),
        ("perceptual", terms.perceptual),
        ("tv", terms.tv),
        ("dark_channel", terms.dark_channel),
        ("adversarial_g", terms.adversarial_g),
        ("adversarial_d", terms.adversarial_d),
        ("contrastive", terms.contrastive),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} is {v}")));
        }
    }
    let total = terms.msl
        + weights.alpha * terms.perceptual
        + weights.tv_weight * terms.tv
        + weights.gamma * terms.dark_channel
        + weights.delta * terms.adversarial_g
        + weights.epsilon * terms.contrastive;
    Ok(LossReport {
        msl: terms.msl,
        perceptual: terms.perceptual,
        tv: terms.tv,
        dark_channel: terms.dark_channel,
        adversarial_g: terms.adversarial_g,
        adversarial_d: terms.adversarial_d,
        contrastive: terms.contrastive,
        total,
    })
}
