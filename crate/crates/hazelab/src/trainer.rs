//! Two-branch semi-supervised training loop.
//!
//! Every step crops one labeled batch and one unlabeled batch, runs the
//! supervised losses (reconstruction, perceptual, adversarial, contrastive)
//! on the first and the unsupervised priors (total variation, dark channel)
//! on the second, sums both gradient sets, and applies a single Adam update
//! to the one shared generator. Every `d_update_period`-th step the
//! discriminator takes its own Adam step on labeled clear crops versus the
//! generator's detached outputs. The learning rate holds at `lr_start` and
//! then decays linearly to `lr_end` over the back half of the schedule.
//!
//! Images enter in [0, 1]; the loop maps crops to [−1, 1] at its boundary
//! and everything inside works in the signed range.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    loss_adversarial_with, loss_contrastive, loss_dark_channel, loss_msl, loss_perceptual,
    loss_total, loss_tv, mean_l1, FeatureExtractor, GanMode, LossReport, LossTerms, LossWeights,
};
use crate::network::{
    build_discriminator, build_generator, generator_forward, save_generator, DiscriminatorConfig,
    DiscriminatorParams, ForwardMode, GeneratorConfig, GeneratorParams,
};
use crate::tensor::{Shape4, Tape, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_start_epoch: usize,
    pub crop: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub d_update_period: usize,
    pub checkpoint_every: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub gan: GanMode,
    pub use_contrastive: bool,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub feature_seed: u64,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale schedule: 300 epochs, decay after 150, 256-pixel crops.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 300,
            lr_start: 1e-4,
            lr_end: 1e-6,
            decay_start_epoch: 150,
            crop: 256,
            batch_labeled: 8,
            batch_unlabeled: 8,
            d_update_period: 5,
            checkpoint_every: 1000,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            gan: GanMode::NonSaturating,
            use_contrastive: true,
            generator: GeneratorConfig::toy(),
            discriminator: DiscriminatorConfig::toy(),
            feature_seed: 101,
            seed: 7,
        }
    }

    /// Same shape of schedule shrunk to minutes: the decay still starts at
    /// the halfway epoch.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 10,
            decay_start_epoch: 5,
            crop: 32,
            batch_labeled: 2,
            batch_unlabeled: 2,
            checkpoint_every: 50,
            ..TrainConfig::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".to_string()));
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start > lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.decay_start_epoch == 0 || self.decay_start_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "decay_start_epoch must lie in [1, epochs), got {} of {}",
                self.decay_start_epoch, self.epochs
            )));
        }
        let div = self.generator.spatial_divisor();
        if self.crop == 0 || self.crop % div != 0 {
            return Err(Error::Config(format!(
                "crop {} must be a positive multiple of {div}",
                self.crop
            )));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return Err(Error::Config("batch sizes must be positive".to_string()));
        }
        if self.d_update_period == 0 {
            return Err(Error::Config("d_update_period must be at least 1".to_string()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".to_string()));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.weights.validate()?;
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: flat until `decay_start_epoch`, then
/// one straight line reaching `lr_end` at the final epoch.
pub fn lr_at_epoch(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch < 1 || epoch > config.epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside schedule range 1..={}",
            config.epochs
        )));
    }
    if epoch <= config.decay_start_epoch {
        return Ok(config.lr_start);
    }
    let span = (config.epochs - config.decay_start_epoch) as f64;
    let progressed = (epoch - config.decay_start_epoch) as f64;
    Ok(config.lr_start - (config.lr_start - config.lr_end) * progressed / span)
}

/// First and second moment buffers keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Either network's parameter tree, seen as named tensors.
pub trait ParamSet {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor4));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor4));
}

impl ParamSet for GeneratorParams {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor4)) {
        self.visit(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor4)) {
        self.visit_mut(f);
    }
}

impl ParamSet for DiscriminatorParams {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor4)) {
        self.visit(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor4)) {
        self.visit_mut(f);
    }
}

pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Adam with coupled L2 weight decay: the decay term joins the raw
/// gradient before the moment updates.
pub fn adam_step(
    params: &mut dyn ParamSet,
    grads: &GradMap,
    state: &mut OptimizerState,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    let mut problem: Option<Error> = None;
    params.visit_params(&mut |name, t| {
        if problem.is_some() {
            return;
        }
        match grads.get(&name) {
            None => problem = Some(Error::invalid(format!("missing gradient for parameter {name}"))),
            Some(g) if g.len() != t.len() => {
                problem = Some(Error::invalid(format!(
                    "gradient for {name} has {} entries, parameter has {}",
                    g.len(),
                    t.len()
                )))
            }
            Some(g) if g.iter().any(|v| !v.is_finite()) => {
                problem = Some(Error::NonFinite(format!("gradient for parameter {name}")))
            }
            Some(_) => {}
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    params.visit_params_mut(&mut |name, tensor| {
        let g = &grads[&name];
        let (m, v) = state
            .moments
            .entry(name)
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for ((theta, &raw), (m, v)) in
            tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut()))
        {
            let grad = raw + config.weight_decay * *theta;
            *m = config.beta1 * *m + (1.0 - config.beta1) * grad;
            *v = config.beta2 * *v + (1.0 - config.beta2) * grad * grad;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *theta -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    });
    Ok(())
}

fn merge_grads(into: &mut GradMap, other: GradMap) -> Result<()> {
    for (name, g) in other {
        match into.get_mut(&name) {
            None => {
                into.insert(name, g);
            }
            Some(acc) => {
                if acc.len() != g.len() {
                    return Err(Error::invalid(format!(
                        "gradient length mismatch while merging parameter {name}"
                    )));
                }
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
    Ok(())
}

fn collect_grads(tape: &Tape, visit: impl Fn(&mut dyn FnMut(String, crate::tensor::Var))) -> GradMap {
    let mut out = GradMap::new();
    visit(&mut |name, var| {
        let g = tape.grad(var).expect("trainable parameters always receive gradients");
        out.insert(name, g.to_vec());
    });
    out
}

/// One branch's losses plus the gradients they induce on the generator.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub report: LossReport,
    pub grads: GradMap,
    pub dwt_calls: u64,
    pub iwt_calls: u64,
}

fn zero_terms() -> LossTerms {
    LossTerms {
        msl: 0.0,
        perceptual: 0.0,
        tv: 0.0,
        dark_channel: 0.0,
        adversarial_g: 0.0,
        adversarial_d: 0.0,
        contrastive: 0.0,
    }
}

/// Supervised branch: reconstruction, perceptual, adversarial-generator and
/// contrastive terms on a labeled batch, gradients into the generator only.
/// Inputs are signed-range crops of matching shape.
pub fn supervised_step(
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    fx: &FeatureExtractor,
    hazy: &Tensor4,
    clear: &Tensor4,
    weights: &LossWeights,
    gan: GanMode,
    use_contrastive: bool,
) -> Result<StepOutput> {
    if hazy.shape() != clear.shape() {
        return Err(Error::ShapeMismatch {
            op: "supervised_step",
            lhs: hazy.shape(),
            rhs: clear.shape(),
        });
    }
    let mut tape = Tape::new();
    let gv = gen.vars_on(&mut tape, true);
    let dv = disc.vars_on(&mut tape, false);
    let x = tape.constant(hazy.clone());
    let y = tape.constant(clear.clone());
    let pred = generator_forward(&mut tape, &gv, x, ForwardMode::Train)?;

    let msl = loss_msl(&mut tape, pred, y)?;
    let pl = loss_perceptual(&mut tape, pred, y, fx)?;
    let (d_loss, g_adv) = loss_adversarial_with(&mut tape, &dv, y, pred, gan)?;
    let mut terms = zero_terms();
    terms.msl = tape.value(msl).data()[0];
    terms.perceptual = tape.value(pl).data()[0];
    terms.adversarial_g = tape.value(g_adv).data()[0];
    terms.adversarial_d = tape.value(d_loss).data()[0];

    let pl_w = tape.scale(pl, weights.alpha);
    let adv_w = tape.scale(g_adv, weights.delta);
    let mut total = tape.add(msl, pl_w)?;
    total = tape.add(total, adv_w)?;
    if use_contrastive {
        let stage_diff = loss_contrastive(&mut tape, x, y, pred, fx)?;
        let recon = mean_l1(&mut tape, y, pred)?;
        let cont = tape.add(stage_diff, recon)?;
        terms.contrastive = tape.value(cont).data()[0];
        let cont_w = tape.scale(cont, weights.epsilon);
        total = tape.add(total, cont_w)?;
    }

    tape.backward(total)?;
    let grads = collect_grads(&tape, |f| gv.visit(f));
    Ok(StepOutput {
        report: loss_total(terms, weights)?,
        grads,
        dwt_calls: tape.dwt_calls,
        iwt_calls: tape.iwt_calls,
    })
}

/// Unsupervised branch: total-variation and dark-channel priors on an
/// unlabeled batch, gradients into the same shared generator parameters.
pub fn unsupervised_step(
    gen: &GeneratorParams,
    hazy: &Tensor4,
    weights: &LossWeights,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let gv = gen.vars_on(&mut tape, true);
    let x = tape.constant(hazy.clone());
    let pred = generator_forward(&mut tape, &gv, x, ForwardMode::Train)?;

    let tv = loss_tv(&mut tape, pred)?;
    let dc = loss_dark_channel(&mut tape, pred)?;
    let mut terms = zero_terms();
    terms.tv = tape.value(tv).data()[0];
    terms.dark_channel = tape.value(dc).data()[0];

    let tv_w = tape.scale(tv, weights.tv_weight);
    let dc_w = tape.scale(dc, weights.gamma);
    let total = tape.add(tv_w, dc_w)?;
    tape.backward(total)?;
    let grads = collect_grads(&tape, |f| gv.visit(f));
    Ok(StepOutput {
        report: loss_total(terms, weights)?,
        grads,
        dwt_calls: tape.dwt_calls,
        iwt_calls: tape.iwt_calls,
    })
}

/// Discriminator step on real clear crops versus detached generator
/// outputs; the generator is registered frozen, so no gradient reaches it.
pub fn discriminator_step(
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    hazy: &Tensor4,
    clear: &Tensor4,
    gan: GanMode,
) -> Result<(f64, GradMap)> {
    let mut tape = Tape::new();
    let gv = gen.vars_on(&mut tape, false);
    let dv = disc.vars_on(&mut tape, true);
    let x = tape.constant(hazy.clone());
    let real = tape.constant(clear.clone());
    let fake = generator_forward(&mut tape, &gv, x, ForwardMode::Train)?;
    let (d_loss, _) = loss_adversarial_with(&mut tape, &dv, real, fake, gan)?;
    tape.backward(d_loss)?;
    let grads = collect_grads(&tape, |f| dv.visit(f));
    Ok((tape.value(d_loss).data()[0], grads))
}

/// One hazy/clear image pair, each `(1, 3, h, w)` in [0, 1].
#[derive(Debug, Clone)]
pub struct LabeledPair {
    pub hazy: Tensor4,
    pub clear: Tensor4,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainStats {
    pub steps: u64,
    pub d_updates: u64,
    pub dwt_calls: u64,
    pub iwt_calls: u64,
    pub contrastive_evals: u64,
    pub final_total: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub generator: GeneratorParams,
    pub stats: TrainStats,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

fn check_image(what: &str, idx: usize, t: &Tensor4, crop: usize) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid(format!(
            "{what} image {idx} must be shaped (1, 3, h, w), got {s}"
        )));
    }
    if s.h < crop || s.w < crop {
        return Err(Error::invalid(format!(
            "{what} image {idx} is {}x{}, smaller than the {crop}-pixel crop",
            s.h, s.w
        )));
    }
    Ok(())
}

/// Cuts one random crop per listed image and stacks them into a signed
/// [−1, 1] batch.
fn crop_batch(images: &[&Tensor4], crop: usize, rng: &mut ChaCha8Rng) -> Tensor4 {
    let n = images.len();
    let mut out = Tensor4::zeros(Shape4::new(n, 3, crop, crop));
    for (i, img) in images.iter().enumerate() {
        let s = img.shape();
        let oy = rng.random_range(0..=s.h - crop);
        let ox = rng.random_range(0..=s.w - crop);
        for c in 0..3 {
            for y in 0..crop {
                for x in 0..crop {
                    let v = img.get(0, c, oy + y, ox + x);
                    out.set(i, c, y, x, 2.0 * v - 1.0);
                }
            }
        }
    }
    out
}

/// Center crop to the given size, for deterministic evaluation-time inputs.
pub fn center_crop(img: &Tensor4, h: usize, w: usize) -> Result<Tensor4> {
    let s = img.shape();
    if s.h < h || s.w < w {
        return Err(Error::invalid(format!(
            "cannot center-crop {s} to {h}x{w}"
        )));
    }
    let oy = (s.h - h) / 2;
    let ox = (s.w - w) / 2;
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..h {
                for x in 0..w {
                    out.set(n, c, y, x, img.get(n, c, oy + y, ox + x));
                }
            }
        }
    }
    Ok(out)
}

/// Dehazes one `(1, 3, h, w)` image in [0, 1]. The image is center-cropped
/// to the largest size the architecture accepts, mapped to [−1, 1] for the
/// forward pass, and mapped back afterwards.
pub fn dehaze_image(gen: &GeneratorParams, img: &Tensor4) -> Result<Tensor4> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid(format!(
            "dehaze_image needs a (1, 3, h, w) tensor, got {s}"
        )));
    }
    let d = gen.config.spatial_divisor();
    let (h, w) = (s.h / d * d, s.w / d * d);
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "image {s} is smaller than the {d}x{d} minimum input"
        )));
    }
    let cropped = center_crop(img, h, w)?;
    let signed: Vec<f64> = cropped.data().iter().map(|&v| 2.0 * v - 1.0).collect();
    let mut tape = Tape::new();
    let gv = gen.vars_on(&mut tape, false);
    let x = tape.constant(Tensor4::from_vec(cropped.shape(), signed)?);
    let y = generator_forward(&mut tape, &gv, x, ForwardMode::Infer)?;
    let restored: Vec<f64> = tape.value(y).data().iter().map(|&v| (v + 1.0) / 2.0).collect();
    Tensor4::from_vec(cropped.shape(), restored)
}

/// Serves shuffled indices forever, reshuffling at each wrap so the stream
/// cycles independently of the consumer's pace.
struct CyclingSampler {
    order: Vec<usize>,
    next: usize,
}

impl CyclingSampler {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        CyclingSampler { order, next: 0 }
    }

    fn take(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            if self.next == self.order.len() {
                self.order.shuffle(rng);
                self.next = 0;
            }
            out.push(self.order[self.next]);
            self.next += 1;
        }
        out
    }
}

fn write_checkpoint(params: &GeneratorParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    save_generator(params, &tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs the full loop and leaves a checkpoint plus a per-step CSV log in
/// `out_dir`. Deterministic for a fixed config.
pub fn train(
    config: &TrainConfig,
    labeled: &[LabeledPair],
    unlabeled: &[Tensor4],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(Error::invalid("training needs at least one labeled pair"));
    }
    if unlabeled.is_empty() {
        return Err(Error::invalid("training needs at least one unlabeled image"));
    }
    for (i, pair) in labeled.iter().enumerate() {
        check_image("labeled hazy", i, &pair.hazy, config.crop)?;
        check_image("labeled clear", i, &pair.clear, config.crop)?;
        if pair.hazy.shape() != pair.clear.shape() {
            return Err(Error::ShapeMismatch {
                op: "train labeled pair",
                lhs: pair.hazy.shape(),
                rhs: pair.clear.shape(),
            });
        }
    }
    for (i, img) in unlabeled.iter().enumerate() {
        check_image("unlabeled", i, img, config.crop)?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut gen = build_generator(config.generator, config.seed)?;
    let mut disc = build_discriminator(config.discriminator, config.seed.wrapping_add(1))?;
    let fx = FeatureExtractor::new(config.feature_seed);
    let mut gen_opt = OptimizerState::new();
    let mut disc_opt = OptimizerState::new();

    let log_path = out_dir.join("train_log.csv");
    let checkpoint_path = out_dir.join("generator.ckpt");
    let log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    writeln!(log, "step,epoch,lr,msl,pl,adv_g,adv_d,tv,dc,cont,total")
        .map_err(|e| Error::io(&log_path, e))?;

    let mut unlabeled_sampler = CyclingSampler::new(unlabeled.len(), &mut rng);
    let mut stats = TrainStats::default();
    let mut step: u64 = 0;

    for epoch in 1..=config.epochs {
        let lr = lr_at_epoch(epoch, config)?;
        let mut labeled_order: Vec<usize> = (0..labeled.len()).collect();
        labeled_order.shuffle(&mut rng);

        for chunk in labeled_order.chunks(config.batch_labeled) {
            step += 1;

            let hazy_refs: Vec<&Tensor4> = chunk.iter().map(|&i| &labeled[i].hazy).collect();
            let clear_refs: Vec<&Tensor4> = chunk.iter().map(|&i| &labeled[i].clear).collect();
            // both batches must crop at the same offsets, so draw once and
            // cut twice
            let offsets_seed: u64 = rng.random();
            let mut crop_rng = ChaCha8Rng::seed_from_u64(offsets_seed);
            let hazy_batch = crop_batch(&hazy_refs, config.crop, &mut crop_rng);
            let mut crop_rng = ChaCha8Rng::seed_from_u64(offsets_seed);
            let clear_batch = crop_batch(&clear_refs, config.crop, &mut crop_rng);

            let unl = unlabeled_sampler.take(config.batch_unlabeled, &mut rng);
            let unl_refs: Vec<&Tensor4> = unl.iter().map(|&i| &unlabeled[i]).collect();
            let unl_batch = crop_batch(&unl_refs, config.crop, &mut rng);

            let sup = supervised_step(
                &gen,
                &disc,
                &fx,
                &hazy_batch,
                &clear_batch,
                &config.weights,
                config.gan,
                config.use_contrastive,
            )?;
            let uns = unsupervised_step(&gen, &unl_batch, &config.weights)?;
            stats.dwt_calls += sup.dwt_calls + uns.dwt_calls;
            stats.iwt_calls += sup.iwt_calls + uns.iwt_calls;
            if config.use_contrastive {
                stats.contrastive_evals += 1;
            }

            let mut grads = sup.grads;
            merge_grads(&mut grads, uns.grads)?;
            adam_step(&mut gen, &grads, &mut gen_opt, lr, &config.adam)?;

            let mut report = sup.report;
            report.tv = uns.report.tv;
            report.dark_channel = uns.report.dark_channel;
            report.total = sup.report.total + uns.report.total;

            if step % config.d_update_period as u64 == 0 {
                let (d_loss, d_grads) =
                    discriminator_step(&gen, &disc, &hazy_batch, &clear_batch, config.gan)?;
                adam_step(&mut disc, &d_grads, &mut disc_opt, lr, &config.adam)?;
                stats.d_updates += 1;
                report.adversarial_d = d_loss;
            }

            writeln!(
                log,
                "{step},{epoch},{lr},{},{},{},{},{},{},{},{}",
                report.msl,
                report.perceptual,
                report.adversarial_g,
                report.adversarial_d,
                report.tv,
                report.dark_channel,
                report.contrastive,
                report.total
            )
            .map_err(|e| Error::io(&log_path, e))?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            stats.final_total = report.total;

            if step % config.checkpoint_every as u64 == 0 {
                write_checkpoint(&gen, &checkpoint_path)?;
            }
        }
    }

    stats.steps = step;
    write_checkpoint(&gen, &checkpoint_path)?;
    Ok(TrainOutcome { generator: gen, stats, checkpoint_path, log_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::seeded_data;

    fn tiny_generator() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 2,
            scales: 3,
            blocks_per_scale: 1,
            bottleneck_blocks: 1,
            use_dwt_bottleneck: true,
            in_channels: 3,
        }
    }

    fn tiny_discriminator() -> DiscriminatorConfig {
        DiscriminatorConfig { base_channels: 2, blocks: 2, in_channels: 3 }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            decay_start_epoch: 1,
            crop: 8,
            batch_labeled: 2,
            batch_unlabeled: 1,
            generator: tiny_generator(),
            discriminator: tiny_discriminator(),
            ..TrainConfig::toy()
        }
    }

    fn signed_img(n: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
        let shape = Shape4::new(n, 3, h, w);
        Tensor4::from_vec(shape, seeded_data(shape.count(), seed, -1.0, 1.0)).unwrap()
    }

    fn unit_img(h: usize, w: usize, seed: u64) -> Tensor4 {
        let shape = Shape4::new(1, 3, h, w);
        Tensor4::from_vec(shape, seeded_data(shape.count(), seed, 0.0, 1.0)).unwrap()
    }

    #[test]
    fn dehaze_image_crops_to_the_divisor_and_round_trips_the_range() {
        let gen = build_generator(tiny_generator(), 3).unwrap();
        let img = unit_img(20, 24, 9);
        let out = dehaze_image(&gen, &img).unwrap();
        assert_eq!(out.shape(), Shape4::new(1, 3, 16, 24));
        let expect = center_crop(&img, 16, 24).unwrap();
        assert_eq!(out.data(), expect.data(), "identity at init survives the range mapping");

        let tiny = unit_img(4, 4, 9);
        assert!(dehaze_image(&gen, &tiny).is_err());
        assert!(dehaze_image(&gen, &signed_img(2, 16, 16, 1)).is_err());
    }

    #[test]
    fn lr_schedule_hits_the_published_anchors() {
        let cfg = TrainConfig::full_scale();
        assert_eq!(lr_at_epoch(1, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at_epoch(150, &cfg).unwrap(), 1e-4);
        let mid = lr_at_epoch(225, &cfg).unwrap();
        assert!((mid - 5.05e-5).abs() < 1e-18, "{mid}");
        let last = lr_at_epoch(300, &cfg).unwrap();
        assert!((last - 1e-6).abs() < 1e-18, "{last}");
        assert!(lr_at_epoch(0, &cfg).is_err());
        assert!(lr_at_epoch(301, &cfg).is_err());
    }

    #[test]
    fn lr_schedule_is_continuous_and_affine_after_the_knee() {
        let cfg = TrainConfig::full_scale();
        let slope = (cfg.lr_end - cfg.lr_start) / (cfg.epochs - cfg.decay_start_epoch) as f64;
        let at_knee = lr_at_epoch(cfg.decay_start_epoch, &cfg).unwrap();
        let after = lr_at_epoch(cfg.decay_start_epoch + 1, &cfg).unwrap();
        assert!((after - (at_knee + slope)).abs() < 1e-18);
        let d1 = lr_at_epoch(200, &cfg).unwrap() - lr_at_epoch(175, &cfg).unwrap();
        let d2 = lr_at_epoch(275, &cfg).unwrap() - lr_at_epoch(250, &cfg).unwrap();
        assert!((d1 - d2).abs() < 1e-18, "equal epoch spans give equal decrements");
    }

    #[test]
    fn toy_schedule_decays_from_the_halfway_epoch() {
        let cfg = TrainConfig::toy();
        assert_eq!(cfg.decay_start_epoch, cfg.epochs / 2);
        assert_eq!(lr_at_epoch(cfg.epochs / 2, &cfg).unwrap(), cfg.lr_start);
        let last = lr_at_epoch(cfg.epochs, &cfg).unwrap();
        assert!((last - cfg.lr_end).abs() < 1e-18);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let good = tiny_train_config();
        assert!(good.validate().is_ok());
        for breakage in [
            |c: &mut TrainConfig| c.lr_end = c.lr_start,
            |c: &mut TrainConfig| c.lr_end = 0.0,
            |c: &mut TrainConfig| c.decay_start_epoch = c.epochs,
            |c: &mut TrainConfig| c.crop = 12,
            |c: &mut TrainConfig| c.d_update_period = 0,
            |c: &mut TrainConfig| c.batch_labeled = 0,
        ] {
            let mut cfg = tiny_train_config();
            breakage(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn adam_fixed_point_and_sign_step() {
        let mut params = build_discriminator(tiny_discriminator(), 1).unwrap();
        params.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let zero_grads: GradMap = {
            let mut m = GradMap::new();
            params.visit(&mut |name, t| {
                m.insert(name, vec![0.0; t.len()]);
            });
            m
        };
        let mut state = OptimizerState::new();
        let cfg = AdamConfig::default();
        adam_step(&mut params, &zero_grads, &mut state, 1e-3, &cfg).unwrap();
        params.visit(&mut |name, t| {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name} moved from the fixed point");
        });
        assert_eq!(state.step_count(), 1);

        // first step with wd = 0 moves every coordinate by ~lr against the
        // gradient sign
        let mut params = build_discriminator(tiny_discriminator(), 2).unwrap();
        let mut before = GradMap::new();
        let mut grads = GradMap::new();
        params.visit(&mut |name, t| {
            before.insert(name.clone(), t.data().to_vec());
            grads.insert(name, seeded_data(t.len(), 50, -1.0, 1.0));
        });
        let cfg = AdamConfig { weight_decay: 0.0, ..cfg };
        let lr = 1e-3;
        let mut state = OptimizerState::new();
        adam_step(&mut params, &grads, &mut state, lr, &cfg).unwrap();
        params.visit(&mut |name, t| {
            for (j, &now) in t.data().iter().enumerate() {
                let g = grads[&name][j];
                let delta = now - before[&name][j];
                let expect = -lr * g.signum();
                assert!(
                    (delta - expect).abs() < lr * 1e-3,
                    "first-step move should be -lr*sign(g): got {delta}, want {expect}"
                );
            }
        });
    }

    #[test]
    fn adam_pure_decay_shrinks_positive_weights() {
        let mut params = build_discriminator(tiny_discriminator(), 3).unwrap();
        params.visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.7));
        let mut grads = GradMap::new();
        params.visit(&mut |name, t| {
            grads.insert(name, vec![0.0; t.len()]);
        });
        let mut state = OptimizerState::new();
        adam_step(&mut params, &grads, &mut state, 1e-3, &AdamConfig::default()).unwrap();
        params.visit(&mut |name, t| {
            assert!(
                t.data().iter().all(|&v| v < 0.7),
                "{name}: weight decay alone must shrink positive weights"
            );
        });
    }

    #[test]
    fn adam_names_the_non_finite_gradient() {
        let mut params = build_discriminator(tiny_discriminator(), 4).unwrap();
        let mut grads = GradMap::new();
        params.visit(&mut |name, t| {
            grads.insert(name, vec![0.0; t.len()]);
        });
        grads.get_mut("conv.1.kernel").unwrap()[0] = f64::NAN;
        let err = adam_step(
            &mut params,
            &grads,
            &mut OptimizerState::new(),
            1e-3,
            &AdamConfig::default(),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("conv.1.kernel"), "{err}");
    }

    #[test]
    fn supervised_identity_fixture_reduces_to_the_adversarial_term() {
        let gen = build_generator(tiny_generator(), 5).unwrap();
        let disc = build_discriminator(tiny_discriminator(), 6).unwrap();
        let fx = FeatureExtractor::new(7);
        let weights = LossWeights::default();
        let img = signed_img(2, 8, 8, 60);
        let out = supervised_step(
            &gen,
            &disc,
            &fx,
            &img,
            &img,
            &weights,
            GanMode::NonSaturating,
            true,
        )
        .unwrap();
        assert_eq!(out.report.msl, 0.0);
        assert_eq!(out.report.perceptual, 0.0);
        assert_eq!(out.report.contrastive, 0.0);
        let expected = weights.delta * out.report.adversarial_g;
        assert!((out.report.total - expected).abs() < 1e-12);
    }

    #[test]
    fn supervised_gradients_cover_every_group_for_generic_params() {
        let mut gen = build_generator(tiny_generator(), 8).unwrap();
        gen.visit_mut(&mut |name, t| {
            if name == "tail.kernel" {
                let data = seeded_data(t.len(), 61, -0.3, 0.3);
                t.data_mut().copy_from_slice(&data);
            }
        });
        let disc = build_discriminator(tiny_discriminator(), 9).unwrap();
        let fx = FeatureExtractor::new(10);
        let out = supervised_step(
            &gen,
            &disc,
            &fx,
            &signed_img(1, 8, 8, 62),
            &signed_img(1, 8, 8, 63),
            &LossWeights::default(),
            GanMode::NonSaturating,
            true,
        )
        .unwrap();
        for (name, g) in &out.grads {
            assert!(g.iter().any(|&v| v != 0.0), "parameter {name} got no gradient");
        }
    }

    #[test]
    fn supervised_overfits_a_single_pair() {
        let mut gen = build_generator(tiny_generator(), 11).unwrap();
        let disc = build_discriminator(tiny_discriminator(), 12).unwrap();
        let fx = FeatureExtractor::new(13);
        let weights = LossWeights::default();
        let hazy = signed_img(1, 8, 8, 64);
        let clear = signed_img(1, 8, 8, 65);
        let mut state = OptimizerState::new();
        let adam = AdamConfig::default();
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let out = supervised_step(
                &gen,
                &disc,
                &fx,
                &hazy,
                &clear,
                &weights,
                GanMode::NonSaturating,
                true,
            )
            .unwrap();
            adam_step(&mut gen, &out.grads, &mut state, 5e-3, &adam).unwrap();
            first.get_or_insert(out.report.total);
            last = out.report.total;
        }
        let first = first.unwrap();
        assert!(
            last < 0.5 * first,
            "50 overfit steps should at least halve the loss: {first} -> {last}"
        );
    }

    #[test]
    fn unsupervised_constant_image_closed_forms() {
        let gen = build_generator(tiny_generator(), 14).unwrap();
        let weights = LossWeights::default();
        let c = 0.2;
        let img = Tensor4::filled(Shape4::new(1, 3, 8, 8), c);
        let out = unsupervised_step(&gen, &img, &weights).unwrap();
        assert_eq!(out.report.tv, 0.0, "identity network keeps the image constant");
        let dc = (c + 1.0) / 2.0;
        assert!((out.report.dark_channel - dc).abs() < 1e-12);
        let expected = weights.tv_weight * 0.0 + weights.gamma * dc;
        assert!((out.report.total - expected).abs() < 1e-12);
    }

    #[test]
    fn branches_share_one_parameter_set() {
        let mut gen = build_generator(tiny_generator(), 15).unwrap();
        let disc = build_discriminator(tiny_discriminator(), 16).unwrap();
        let fx = FeatureExtractor::new(17);
        let weights = LossWeights::default();
        let a = signed_img(1, 8, 8, 66);
        let b = signed_img(1, 8, 8, 67);

        let sup = supervised_step(&gen, &disc, &fx, &a, &b, &weights, GanMode::NonSaturating, true)
            .unwrap();
        let uns = unsupervised_step(&gen, &a, &weights).unwrap();
        let sup_names: Vec<&String> = sup.grads.keys().collect();
        let uns_names: Vec<&String> = uns.grads.keys().collect();
        assert_eq!(sup_names, uns_names, "both branches address the same parameters");

        let forward = |gen: &GeneratorParams| {
            let mut tape = Tape::new();
            let gv = gen.vars_on(&mut tape, false);
            let x = tape.constant(a.clone());
            let y = generator_forward(&mut tape, &gv, x, ForwardMode::Train).unwrap();
            tape.value(y).data().to_vec()
        };
        let before = forward(&gen);
        let mut grads = sup.grads;
        merge_grads(&mut grads, uns.grads).unwrap();
        adam_step(&mut gen, &grads, &mut OptimizerState::new(), 1e-3, &AdamConfig::default())
            .unwrap();
        assert_ne!(
            before,
            forward(&gen),
            "the single shared parameter set must absorb the merged update"
        );
    }

    #[test]
    fn tv_gradient_smooths_a_checkerboard() {
        let mut gen = build_generator(tiny_generator(), 18).unwrap();
        // nonzero tail so the prior can actually steer the interior
        gen.visit_mut(&mut |name, t| {
            if name == "tail.kernel" {
                let data = seeded_data(t.len(), 68, -0.1, 0.1);
                t.data_mut().copy_from_slice(&data);
            }
        });
        let shape = Shape4::new(1, 3, 8, 8);
        let mut board = Tensor4::zeros(shape);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    board.set(0, c, y, x, if (x + y) % 2 == 0 { 0.5 } else { -0.5 });
                }
            }
        }
        let weights = LossWeights { tv_weight: 1.0, gamma: 0.0, ..LossWeights::default() };
        let tv_of = |gen: &GeneratorParams| {
            unsupervised_step(gen, &board, &weights).unwrap().report.tv
        };
        let initial = tv_of(&gen);
        let mut state = OptimizerState::new();
        for _ in 0..20 {
            let out = unsupervised_step(&gen, &board, &weights).unwrap();
            adam_step(&mut gen, &out.grads, &mut state, 2e-3, &AdamConfig::default()).unwrap();
        }
        let after = tv_of(&gen);
        assert!(
            after < initial,
            "total variation should fall under its own gradient: {initial} -> {after}"
        );
    }

    #[test]
    fn discriminator_step_touches_only_discriminator_parameters() {
        let gen = build_generator(tiny_generator(), 19).unwrap();
        let disc = build_discriminator(tiny_discriminator(), 20).unwrap();
        let snapshot: Vec<f64> = {
            let mut v = Vec::new();
            gen.visit(&mut |_, t| v.extend_from_slice(t.data()));
            v
        };
        let (d_loss, grads) = discriminator_step(
            &gen,
            &disc,
            &signed_img(1, 8, 8, 70),
            &signed_img(1, 8, 8, 71),
            GanMode::NonSaturating,
        )
        .unwrap();
        assert!(d_loss.is_finite());
        let mut disc_names = Vec::new();
        disc.visit(&mut |name, _| disc_names.push(name));
        disc_names.sort();
        let got: Vec<&String> = grads.keys().collect();
        assert_eq!(got, disc_names.iter().collect::<Vec<_>>());
        let now: Vec<f64> = {
            let mut v = Vec::new();
            gen.visit(&mut |_, t| v.extend_from_slice(t.data()));
            v
        };
        assert_eq!(snapshot, now, "generator parameters are read-only in a d-step");
    }

    fn tiny_dataset(n_labeled: usize, n_unlabeled: usize, hw: usize) -> (Vec<LabeledPair>, Vec<Tensor4>) {
        let labeled = (0..n_labeled)
            .map(|i| LabeledPair {
                hazy: unit_img(hw, hw, 200 + i as u64),
                clear: unit_img(hw, hw, 300 + i as u64),
            })
            .collect();
        let unlabeled = (0..n_unlabeled).map(|i| unit_img(hw, hw, 400 + i as u64)).collect();
        (labeled, unlabeled)
    }

    #[test]
    fn train_runs_the_published_discriminator_cadence() {
        let cfg = TrainConfig {
            epochs: 5,
            decay_start_epoch: 2,
            batch_labeled: 1,
            ..tiny_train_config()
        };
        let (labeled, unlabeled) = tiny_dataset(5, 3, 8);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &labeled, &unlabeled, dir.path()).unwrap();
        assert_eq!(out.stats.steps, 25, "5 epochs x 5 single-pair steps");
        assert_eq!(out.stats.d_updates, 5, "one discriminator update per 5 steps");
        assert!(out.stats.dwt_calls > 0, "wavelet bottleneck must be exercised");
        assert_eq!(out.stats.contrastive_evals, 25);
    }

    #[test]
    fn train_is_deterministic_per_seed() {
        let cfg = tiny_train_config();
        let (labeled, unlabeled) = tiny_dataset(3, 2, 8);
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let out = train(&cfg, &labeled, &unlabeled, dir.path()).unwrap();
            fs::read(&out.checkpoint_path).unwrap()
        };
        assert_eq!(run(), run(), "same seed and data must give bit-identical checkpoints");
    }

    #[test]
    fn train_writes_log_and_checkpoint() {
        let cfg = tiny_train_config();
        let (labeled, unlabeled) = tiny_dataset(2, 1, 8);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &labeled, &unlabeled, dir.path()).unwrap();

        let log = fs::read_to_string(&out.log_path).unwrap();
        let mut lines = log.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,epoch,lr,msl,pl,adv_g,adv_d,tv,dc,cont,total"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len() as u64, out.stats.steps);
        for row in rows {
            assert_eq!(row.split(',').count(), 11);
        }

        let loaded = crate::network::load_generator(&out.checkpoint_path).unwrap();
        assert_eq!(loaded.config, cfg.generator);
        let mut a = Vec::new();
        out.generator.visit(&mut |_, t| a.extend_from_slice(t.data()));
        let mut b = Vec::new();
        loaded.visit(&mut |_, t| b.extend_from_slice(t.data()));
        assert_eq!(a, b);
    }

    #[test]
    fn train_rejects_empty_and_undersized_inputs() {
        let cfg = tiny_train_config();
        let (labeled, unlabeled) = tiny_dataset(2, 1, 8);
        let dir = tempfile::tempdir().unwrap();
        assert!(train(&cfg, &[], &unlabeled, dir.path()).is_err());
        assert!(train(&cfg, &labeled, &[], dir.path()).is_err());
        let (small_labeled, _) = tiny_dataset(1, 1, 4);
        assert!(
            train(&cfg, &small_labeled, &unlabeled, dir.path()).is_err(),
            "4-pixel images cannot serve an 8-pixel crop"
        );
    }
}
