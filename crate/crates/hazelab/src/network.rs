//! The dehazing generator and its adversary.
//!
//! The generator is a three-scale residual encoder–decoder. Per scale the
//! encoder runs `blocks_per_scale` residual blocks (conv3×3 → ReLU → conv3×3
//! → add, no normalization) and downsamples with a stride-2 conv3×3; widths
//! double per scale. The bottleneck analyses the deepest features into four
//! half-resolution sub-bands stacked along channels (C → 4C), runs residual
//! blocks there, projects with a 1×1 conv, and synthesizes back. The decoder
//! mirrors the encoder with 2×2 stride-2 transposed convs, adding the
//! matching encoder feature after each upsample. A zero-initialized tail
//! conv plus a global input skip make the untrained network the identity.
//!
//! Reconstructed layer table for the toy default (base 16, 3 scales, 3
//! blocks per scale, 2 bottleneck blocks, channels in → out at each step):
//!
//! | stage        | layers                      | width        | resolution |
//! |--------------|-----------------------------|--------------|------------|
//! | head         | conv3×3                     | 3 → 16       | 1          |
//! | encoder s0   | 3 res blocks (2 convs each) | 16           | 1          |
//! | down 0→1     | conv3×3 stride 2            | 16 → 32      | 1/2        |
//! | encoder s1   | 3 res blocks                | 32           | 1/2        |
//! | down 1→2     | conv3×3 stride 2            | 32 → 64      | 1/4        |
//! | encoder s2   | 3 res blocks                | 64           | 1/4        |
//! | bottleneck   | dwt, 2 res blocks, 1×1, iwt | 64 → 256 → 64| 1/8 bands  |
//! | decoder s2   | 3 res blocks                | 64           | 1/4        |
//! | up 2→1 +skip | convT2×2 stride 2           | 64 → 32      | 1/2        |
//! | decoder s1   | 3 res blocks                | 32           | 1/2        |
//! | up 1→0 +skip | convT2×2 stride 2           | 32 → 16      | 1          |
//! | decoder s0   | 3 res blocks                | 16           | 1          |
//! | tail         | conv3×3, no activation      | 16 → 3       | 1          |
//!
//! The discriminator is four stride-2 conv → instance-norm → ReLU blocks,
//! a 1×1 conv head, global average, sigmoid: one probability per sample.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tape, Tensor4, Var};

const INSTANCE_NORM_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 4] = b"HZLB";
const CHECKPOINT_VERSION: u32 = 1;

// ── Configuration ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub scales: usize,
    pub blocks_per_scale: usize,
    pub bottleneck_blocks: usize,
    pub use_dwt_bottleneck: bool,
    pub in_channels: usize,
}

impl GeneratorConfig {
    /// Desk-scale defaults: 16→32→64 widths, wavelet bottleneck on.
    pub fn toy() -> Self {
        GeneratorConfig {
            base_channels: 16,
            scales: 3,
            blocks_per_scale: 3,
            bottleneck_blocks: 2,
            use_dwt_bottleneck: true,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base_channels", self.base_channels),
            ("scales", self.scales),
            ("blocks_per_scale", self.blocks_per_scale),
            ("bottleneck_blocks", self.bottleneck_blocks),
            ("in_channels", self.in_channels),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("generator config: {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Input spatial dims must be divisible by this so the deepest scale
    /// still has even dimensions for the wavelet analysis.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.scales
    }

    fn width(&self, scale: usize) -> usize {
        self.base_channels << scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub blocks: usize,
    pub in_channels: usize,
}

impl DiscriminatorConfig {
    pub fn toy() -> Self {
        DiscriminatorConfig { base_channels: 8, blocks: 4, in_channels: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.blocks == 0 || self.in_channels == 0 {
            return Err(Error::invalid("discriminator config: all counts must be positive"));
        }
        Ok(())
    }
}

// ── Parameter containers ──

#[derive(Debug, Clone)]
pub struct ConvParam {
    pub kernel: Tensor4,
    pub bias: Tensor4,
}

#[derive(Debug, Clone)]
pub struct ResBlockParam {
    pub conv1: ConvParam,
    pub conv2: ConvParam,
}

#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub config: GeneratorConfig,
    head: ConvParam,
    enc_blocks: Vec<Vec<ResBlockParam>>,
    downs: Vec<ConvParam>,
    bottleneck: Vec<ResBlockParam>,
    bottleneck_proj: Option<ConvParam>,
    dec_blocks: Vec<Vec<ResBlockParam>>,
    ups: Vec<ConvParam>,
    tail: ConvParam,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorParams {
    pub config: DiscriminatorConfig,
    convs: Vec<ConvParam>,
    head: ConvParam,
}

/// How one parameter tensor starts out.
enum Init {
    /// Uniform in ±sqrt(1/fan_in).
    FanIn(usize),
    Zeros,
    /// 1×1 kernel carrying the identity map.
    Identity,
}

fn conv_param(f: &mut impl FnMut(Init, Shape4) -> Tensor4, cin: usize, cout: usize, k: usize) -> ConvParam {
    ConvParam {
        kernel: f(Init::FanIn(cin * k * k), Shape4::new(cout, cin, k, k)),
        bias: f(Init::Zeros, Shape4::new(1, cout, 1, 1)),
    }
}

fn res_block_param(f: &mut impl FnMut(Init, Shape4) -> Tensor4, width: usize) -> ResBlockParam {
    ResBlockParam {
        conv1: conv_param(f, width, width, 3),
        conv2: conv_param(f, width, width, 3),
    }
}

/// Builds the whole parameter tree in one fixed order; `make` decides the
/// contents, so initialization and zero templates share one layout.
fn construct_generator(
    config: GeneratorConfig,
    make: &mut impl FnMut(Init, Shape4) -> Tensor4,
) -> GeneratorParams {
    let nc = config.in_channels;
    let head = conv_param(make, nc, config.width(0), 3);
    let enc_blocks = (0..config.scales)
        .map(|s| (0..config.blocks_per_scale).map(|_| res_block_param(make, config.width(s))).collect())
        .collect();
    let downs = (0..config.scales - 1)
        .map(|s| conv_param(make, config.width(s), config.width(s + 1), 3))
        .collect();
    let deep = config.width(config.scales - 1);
    let bottleneck_width = if config.use_dwt_bottleneck { 4 * deep } else { deep };
    let bottleneck = (0..config.bottleneck_blocks)
        .map(|_| res_block_param(make, bottleneck_width))
        .collect();
    let bottleneck_proj = config.use_dwt_bottleneck.then(|| ConvParam {
        kernel: make(Init::Identity, Shape4::new(bottleneck_width, bottleneck_width, 1, 1)),
        bias: make(Init::Zeros, Shape4::new(1, bottleneck_width, 1, 1)),
    });
    let dec_blocks = (0..config.scales)
        .rev()
        .map(|s| (0..config.blocks_per_scale).map(|_| res_block_param(make, config.width(s))).collect())
        .collect();
    let ups = (0..config.scales - 1)
        .rev()
        .map(|s| ConvParam {
            kernel: make(
                Init::FanIn(config.width(s + 1) * 4),
                Shape4::new(config.width(s + 1), config.width(s), 2, 2),
            ),
            bias: make(Init::Zeros, Shape4::new(1, config.width(s), 1, 1)),
        })
        .collect();
    let tail = ConvParam {
        kernel: make(Init::Zeros, Shape4::new(nc, config.width(0), 3, 3)),
        bias: make(Init::Zeros, Shape4::new(1, nc, 1, 1)),
    };
    GeneratorParams {
        config,
        head,
        enc_blocks,
        downs,
        bottleneck,
        bottleneck_proj,
        dec_blocks,
        ups,
        tail,
    }
}

fn init_maker(seed: u64) -> impl FnMut(Init, Shape4) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |init, shape| match init {
        Init::FanIn(fan_in) => {
            let s = (1.0 / fan_in as f64).sqrt();
            Tensor4::uniform(shape, -s, s, &mut rng)
        }
        Init::Zeros => Tensor4::zeros(shape),
        Init::Identity => {
            let mut t = Tensor4::zeros(shape);
            for c in 0..shape.n.min(shape.c) {
                t.set(c, c, 0, 0, 1.0);
            }
            t
        }
    }
}

/// Deterministic generator initialization: fan-in-scaled uniform kernels,
/// zero biases, a zero tail (identity network), and an identity bottleneck
/// projection.
pub fn build_generator(config: GeneratorConfig, seed: u64) -> Result<GeneratorParams> {
    config.validate()?;
    Ok(construct_generator(config, &mut init_maker(seed)))
}

fn generator_template(config: GeneratorConfig) -> GeneratorParams {
    construct_generator(config, &mut |_, shape| Tensor4::zeros(shape))
}

fn construct_discriminator(
    config: DiscriminatorConfig,
    make: &mut impl FnMut(Init, Shape4) -> Tensor4,
) -> DiscriminatorParams {
    let mut cin = config.in_channels;
    let mut convs = Vec::with_capacity(config.blocks);
    for b in 0..config.blocks {
        let cout = config.base_channels << b;
        convs.push(conv_param(make, cin, cout, 3));
        cin = cout;
    }
    let head = conv_param(make, cin, 1, 1);
    DiscriminatorParams { config, convs, head }
}

pub fn build_discriminator(config: DiscriminatorConfig, seed: u64) -> Result<DiscriminatorParams> {
    config.validate()?;
    Ok(construct_discriminator(config, &mut init_maker(seed)))
}

// ── Named traversal ──

impl GeneratorParams {
    /// Walks every parameter in a fixed order, handing out `path, tensor`
    /// pairs; the order defines the checkpoint layout.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor4)) {
        let conv = |f: &mut dyn FnMut(String, &'a Tensor4), path: &str, p: &'a ConvParam| {
            f(format!("{path}.kernel"), &p.kernel);
            f(format!("{path}.bias"), &p.bias);
        };
        let block = |f: &mut dyn FnMut(String, &'a Tensor4), path: &str, b: &'a ResBlockParam| {
            conv(f, &format!("{path}.conv1"), &b.conv1);
            conv(f, &format!("{path}.conv2"), &b.conv2);
        };
        conv(f, "head", &self.head);
        for (s, blocks) in self.enc_blocks.iter().enumerate() {
            for (i, b) in blocks.iter().enumerate() {
                block(f, &format!("enc.{s}.block.{i}"), b);
            }
        }
        for (s, d) in self.downs.iter().enumerate() {
            conv(f, &format!("down.{s}"), d);
        }
        for (i, b) in self.bottleneck.iter().enumerate() {
            block(f, &format!("bottleneck.{i}"), b);
        }
        if let Some(p) = &self.bottleneck_proj {
            conv(f, "bottleneck_proj", p);
        }
        let scales = self.config.scales;
        for (rev, blocks) in self.dec_blocks.iter().enumerate() {
            let s = scales - 1 - rev;
            for (i, b) in blocks.iter().enumerate() {
                block(f, &format!("dec.{s}.block.{i}"), b);
            }
        }
        for (rev, u) in self.ups.iter().enumerate() {
            let s = scales - 2 - rev;
            conv(f, &format!("up.{s}"), u);
        }
        conv(f, "tail", &self.tail);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor4)) {
        let conv = |f: &mut dyn FnMut(String, &mut Tensor4), path: &str, p: &mut ConvParam| {
            f(format!("{path}.kernel"), &mut p.kernel);
            f(format!("{path}.bias"), &mut p.bias);
        };
        let block = |f: &mut dyn FnMut(String, &mut Tensor4), path: &str, b: &mut ResBlockParam| {
            conv(f, &format!("{path}.conv1"), &mut b.conv1);
            conv(f, &format!("{path}.conv2"), &mut b.conv2);
        };
        conv(f, "head", &mut self.head);
        for (s, blocks) in self.enc_blocks.iter_mut().enumerate() {
            for (i, b) in blocks.iter_mut().enumerate() {
                block(f, &format!("enc.{s}.block.{i}"), b);
            }
        }
        for (s, d) in self.downs.iter_mut().enumerate() {
            conv(f, &format!("down.{s}"), d);
        }
        for (i, b) in self.bottleneck.iter_mut().enumerate() {
            block(f, &format!("bottleneck.{i}"), b);
        }
        if let Some(p) = &mut self.bottleneck_proj {
            conv(f, "bottleneck_proj", p);
        }
        let scales = self.config.scales;
        for (rev, blocks) in self.dec_blocks.iter_mut().enumerate() {
            let s = scales - 1 - rev;
            for (i, b) in blocks.iter_mut().enumerate() {
                block(f, &format!("dec.{s}.block.{i}"), b);
            }
        }
        for (rev, u) in self.ups.iter_mut().enumerate() {
            let s = scales - 2 - rev;
            conv(f, &format!("up.{s}"), u);
        }
        conv(f, "tail", &mut self.tail);
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.len());
        total
    }
}

impl DiscriminatorParams {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor4)) {
        for (i, c) in self.convs.iter().enumerate() {
            f(format!("conv.{i}.kernel"), &c.kernel);
            f(format!("conv.{i}.bias"), &c.bias);
        }
        f("head.kernel".to_string(), &self.head.kernel);
        f("head.bias".to_string(), &self.head.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor4)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            f(format!("conv.{i}.kernel"), &mut c.kernel);
            f(format!("conv.{i}.bias"), &mut c.bias);
        }
        f("head.kernel".to_string(), &mut self.head.kernel);
        f("head.bias".to_string(), &mut self.head.bias);
    }
}

// ── Tape registration ──

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ResBlockVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
}

#[derive(Debug, Clone)]
pub struct GeneratorVars {
    pub config: GeneratorConfig,
    head: ConvVars,
    enc_blocks: Vec<Vec<ResBlockVars>>,
    downs: Vec<ConvVars>,
    bottleneck: Vec<ResBlockVars>,
    bottleneck_proj: Option<ConvVars>,
    dec_blocks: Vec<Vec<ResBlockVars>>,
    ups: Vec<ConvVars>,
    tail: ConvVars,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorVars {
    pub config: DiscriminatorConfig,
    convs: Vec<ConvVars>,
    head: ConvVars,
}

fn conv_vars(tape: &mut Tape, p: &ConvParam, trainable: bool) -> ConvVars {
    let mut reg = |t: &Tensor4| {
        if trainable {
            tape.leaf(t.clone().requiring_grad())
        } else {
            tape.constant(t.clone())
        }
    };
    ConvVars { kernel: reg(&p.kernel), bias: reg(&p.bias) }
}

fn block_vars(tape: &mut Tape, b: &ResBlockParam, trainable: bool) -> ResBlockVars {
    ResBlockVars {
        conv1: conv_vars(tape, &b.conv1, trainable),
        conv2: conv_vars(tape, &b.conv2, trainable),
    }
}

impl GeneratorParams {
    /// Registers a copy of every parameter on the tape; `trainable` decides
    /// whether gradients land on them.
    pub fn vars_on(&self, tape: &mut Tape, trainable: bool) -> GeneratorVars {
        GeneratorVars {
            config: self.config,
            head: conv_vars(tape, &self.head, trainable),
            enc_blocks: self
                .enc_blocks
                .iter()
                .map(|bs| bs.iter().map(|b| block_vars(tape, b, trainable)).collect())
                .collect(),
            downs: self.downs.iter().map(|c| conv_vars(tape, c, trainable)).collect(),
            bottleneck: self
                .bottleneck
                .iter()
                .map(|b| block_vars(tape, b, trainable))
                .collect(),
            bottleneck_proj: self
                .bottleneck_proj
                .as_ref()
                .map(|c| conv_vars(tape, c, trainable)),
            dec_blocks: self
                .dec_blocks
                .iter()
                .map(|bs| bs.iter().map(|b| block_vars(tape, b, trainable)).collect())
                .collect(),
            ups: self.ups.iter().map(|c| conv_vars(tape, c, trainable)).collect(),
            tail: conv_vars(tape, &self.tail, trainable),
        }
    }
}

impl DiscriminatorParams {
    pub fn vars_on(&self, tape: &mut Tape, trainable: bool) -> DiscriminatorVars {
        DiscriminatorVars {
            config: self.config,
            convs: self.convs.iter().map(|c| conv_vars(tape, c, trainable)).collect(),
            head: conv_vars(tape, &self.head, trainable),
        }
    }
}

impl GeneratorVars {
    /// Same traversal order and names as [`GeneratorParams::visit`].
    pub fn visit(&self, f: &mut dyn FnMut(String, Var)) {
        let conv = |f: &mut dyn FnMut(String, Var), path: &str, p: &ConvVars| {
            f(format!("{path}.kernel"), p.kernel);
            f(format!("{path}.bias"), p.bias);
        };
        let block = |f: &mut dyn FnMut(String, Var), path: &str, b: &ResBlockVars| {
            conv(f, &format!("{path}.conv1"), &b.conv1);
            conv(f, &format!("{path}.conv2"), &b.conv2);
        };
        conv(f, "head", &self.head);
        for (s, blocks) in self.enc_blocks.iter().enumerate() {
            for (i, b) in blocks.iter().enumerate() {
                block(f, &format!("enc.{s}.block.{i}"), b);
            }
        }
        for (s, d) in self.downs.iter().enumerate() {
            conv(f, &format!("down.{s}"), d);
        }
        for (i, b) in self.bottleneck.iter().enumerate() {
            block(f, &format!("bottleneck.{i}"), b);
        }
        if let Some(p) = &self.bottleneck_proj {
            conv(f, "bottleneck_proj", p);
        }
        let scales = self.config.scales;
        for (rev, blocks) in self.dec_blocks.iter().enumerate() {
            let s = scales - 1 - rev;
            for (i, b) in blocks.iter().enumerate() {
                block(f, &format!("dec.{s}.block.{i}"), b);
            }
        }
        for (rev, u) in self.ups.iter().enumerate() {
            let s = scales - 2 - rev;
            conv(f, &format!("up.{s}"), u);
        }
        conv(f, "tail", &self.tail);
    }
}

impl DiscriminatorVars {
    pub fn visit(&self, f: &mut dyn FnMut(String, Var)) {
        for (i, c) in self.convs.iter().enumerate() {
            f(format!("conv.{i}.kernel"), c.kernel);
            f(format!("conv.{i}.bias"), c.bias);
        }
        f("head.kernel".to_string(), self.head.kernel);
        f("head.bias".to_string(), self.head.bias);
    }
}

// ── Forward passes ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Raw residual output, gradients flow.
    Train,
    /// Output clamped to [−1, 1] for consumption as an image.
    Infer,
}

fn conv(tape: &mut Tape, c: &ConvVars, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = tape.conv2d(x, c.kernel, stride, pad)?;
    tape.add_bias(y, c.bias)
}

fn res_block(tape: &mut Tape, b: &ResBlockVars, x: Var) -> Result<Var> {
    let a = conv(tape, &b.conv1, x, 1, 1)?;
    let a = tape.relu(a);
    let a = conv(tape, &b.conv2, a, 1, 1)?;
    tape.add(x, a)
}

fn res_chain(tape: &mut Tape, blocks: &[ResBlockVars], mut x: Var) -> Result<Var> {
    for b in blocks {
        x = res_block(tape, b, x)?;
    }
    Ok(x)
}

/// Runs the full encoder–bottleneck–decoder; output shape equals input
/// shape, and the global skip means zero tail weights give back the input.
pub fn generator_forward(
    tape: &mut Tape,
    vars: &GeneratorVars,
    x: Var,
    mode: ForwardMode,
) -> Result<Var> {
    let cfg = &vars.config;
    let s = tape.shape(x);
    let div = cfg.spatial_divisor();
    if s.h % div != 0 || s.w % div != 0 {
        return Err(Error::invalid(format!(
            "generator input {s} must have spatial dims divisible by {div}"
        )));
    }
    if s.c != cfg.in_channels {
        return Err(Error::invalid(format!(
            "generator expects {} input channels, got shape {s}",
            cfg.in_channels
        )));
    }

    let mut feat = conv(tape, &vars.head, x, 1, 1)?;
    let mut skips = Vec::with_capacity(cfg.scales - 1);
    for scale in 0..cfg.scales {
        feat = res_chain(tape, &vars.enc_blocks[scale], feat)?;
        if scale + 1 < cfg.scales {
            skips.push(feat);
            feat = conv(tape, &vars.downs[scale], feat, 2, 1)?;
        }
    }

    feat = if let Some(proj) = &vars.bottleneck_proj {
        let bands = tape.dwt2(feat)?;
        let processed = res_chain(tape, &vars.bottleneck, bands)?;
        let projected = conv(tape, proj, processed, 1, 0)?;
        tape.iwt2(projected)?
    } else {
        res_chain(tape, &vars.bottleneck, feat)?
    };

    for (rev, blocks) in vars.dec_blocks.iter().enumerate() {
        feat = res_chain(tape, blocks, feat)?;
        if rev < vars.ups.len() {
            let up = &vars.ups[rev];
            let y = tape.conv_transpose2d(feat, up.kernel, 2)?;
            let y = tape.add_bias(y, up.bias)?;
            let skip = skips.pop().expect("one skip per upsample");
            feat = tape.add(y, skip)?;
        }
    }

    let residual = conv(tape, &vars.tail, feat, 1, 1)?;
    let out = tape.add(x, residual)?;
    Ok(match mode {
        ForwardMode::Train => out,
        ForwardMode::Infer => tape.clamp(out, -1.0, 1.0),
    })
}

/// Strided conv stack, instance-normalized and rectified, reduced to one
/// sigmoid probability per sample: output shape `(n, 1, 1, 1)`, values in
/// `(0, 1)`.
pub fn discriminator_forward(tape: &mut Tape, vars: &DiscriminatorVars, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.c != vars.config.in_channels {
        return Err(Error::invalid(format!(
            "discriminator expects {} input channels, got shape {s}",
            vars.config.in_channels
        )));
    }
    let mut feat = x;
    for c in &vars.convs {
        feat = conv(tape, c, feat, 2, 1)?;
        feat = tape.instance_norm(feat, INSTANCE_NORM_EPS);
        feat = tape.relu(feat);
    }
    let logits = conv(tape, &vars.head, feat, 1, 0)?;
    let ls = tape.shape(logits);
    let pooled = tape.sample_sum(logits);
    let mean = tape.scale(pooled, 1.0 / (ls.h * ls.w) as f64);
    Ok(tape.sigmoid(mean))
}

// ── Checkpoints ──

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "file truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Writes the config plus every named parameter array, little-endian.
pub fn save_generator(params: &GeneratorParams, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let cfg = &params.config;
    for v in [
        cfg.base_channels,
        cfg.scales,
        cfg.blocks_per_scale,
        cfg.bottleneck_blocks,
        cfg.in_channels,
    ] {
        put_u32(&mut out, v as u32);
    }
    out.push(cfg.use_dwt_bottleneck as u8);

    let mut entries: Vec<(String, &Tensor4)> = Vec::new();
    params.visit(&mut |name, t| entries.push((name, t)));
    put_u32(&mut out, entries.len() as u32);
    for (name, t) in entries {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        let s = t.shape();
        for d in [s.n, s.c, s.h, s.w] {
            put_u32(&mut out, d as u32);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a checkpoint back, refusing anything whose stored arrays disagree
/// with the layout implied by its stored config.
pub fn load_generator(path: &Path) -> Result<GeneratorParams> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader { buf: &buf, pos: 0 };

    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config = GeneratorConfig {
        base_channels: r.u32()? as usize,
        scales: r.u32()? as usize,
        blocks_per_scale: r.u32()? as usize,
        bottleneck_blocks: r.u32()? as usize,
        in_channels: r.u32()? as usize,
        use_dwt_bottleneck: r.take(1)?[0] != 0,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;

    let count = r.u32()? as usize;
    let mut params = generator_template(config);
    let mut expected: Vec<(String, Shape4)> = Vec::new();
    params.visit(&mut |name, t| expected.push((name, t.shape())));
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "config implies {} parameter arrays, file holds {count}",
            expected.len()
        )));
    }

    let mut loaded: Vec<Vec<f64>> = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".to_string()))?;
        if name != want_name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: found {name}, expected {want_name}"
            )));
        }
        let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        if shape != *want_shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {shape} does not match config shape {want_shape}"
            )));
        }
        loaded.push(r.f64s(shape.count())?);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last parameter",
            buf.len() - r.pos
        )));
    }

    let mut it = loaded.into_iter();
    let mut bad = None;
    params.visit_mut(&mut |name, t| {
        let data = it.next().expect("counted above");
        if data.iter().all(|v| v.is_finite()) {
            t.data_mut().copy_from_slice(&data);
        } else if bad.is_none() {
            bad = Some(name);
        }
    });
    if let Some(name) = bad {
        return Err(Error::Checkpoint(format!("parameter {name} holds non-finite values")));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::{assert_grads_close, numerical_grad, seeded_data};

    fn flat(params: &GeneratorParams) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        params.visit(&mut |name, t| out.push((name, t.data().to_vec())));
        out
    }

    fn tiny_config() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 2,
            scales: 3,
            blocks_per_scale: 1,
            bottleneck_blocks: 1,
            use_dwt_bottleneck: true,
            in_channels: 3,
        }
    }

    fn signed_img(n: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
        let shape = Shape4::new(n, 3, h, w);
        Tensor4::from_vec(shape, seeded_data(shape.count(), seed, -1.0, 1.0)).unwrap()
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let a = flat(&build_generator(cfg, 7).unwrap());
        let b = flat(&build_generator(cfg, 7).unwrap());
        assert_eq!(a, b, "same seed must reproduce bit-identical parameters");
        let c = flat(&build_generator(cfg, 8).unwrap());
        assert_ne!(a, c, "different seeds must differ");
    }

    #[test]
    fn toy_param_count_matches_closed_form() {
        let cfg = GeneratorConfig::toy();
        let params = build_generator(cfg, 1).unwrap();
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let block = |w: usize| 2 * conv(w, w, 3);
        let (w0, w1, w2) = (16, 32, 64);
        let expected = conv(3, w0, 3)
            + 3 * (block(w0) + block(w1) + block(w2))   // encoder blocks
            + conv(w0, w1, 3) + conv(w1, w2, 3)          // downsamples
            + 2 * block(4 * w2)                          // bottleneck blocks
            + conv(4 * w2, 4 * w2, 1)                    // bottleneck projection
            + 3 * (block(w0) + block(w1) + block(w2))   // decoder blocks
            + conv(w2, w1, 2) + conv(w1, w0, 2)          // upsamples (transposed)
            + conv(w0, 3, 3);                            // tail
        assert_eq!(params.param_count(), expected);
    }

    #[test]
    fn params_and_vars_traversals_agree() {
        let params = build_generator(tiny_config(), 3).unwrap();
        let mut tape = Tape::new();
        let vars = params.vars_on(&mut tape, true);
        let mut param_names = Vec::new();
        params.visit(&mut |n, _| param_names.push(n));
        let mut var_names = Vec::new();
        vars.visit(&mut |n, _| var_names.push(n));
        assert_eq!(param_names, var_names, "checkpoint and gradient orders must match");
    }

    #[test]
    fn untrained_generator_is_the_identity() {
        let params = build_generator(tiny_config(), 11).unwrap();
        let x = signed_img(2, 16, 16, 5);
        let mut tape = Tape::new();
        let vars = params.vars_on(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = generator_forward(&mut tape, &vars, xv, ForwardMode::Train).unwrap();
        assert_eq!(
            tape.value(y).data(),
            x.data(),
            "zero tail plus the global skip must reproduce the input bit-exactly"
        );
    }

    #[test]
    fn forward_preserves_shape_and_checks_divisibility() {
        let params = build_generator(GeneratorConfig::toy(), 2).unwrap();
        let x = signed_img(1, 32, 32, 6);
        let mut tape = Tape::new();
        let vars = params.vars_on(&mut tape, false);
        let xv = tape.constant(x);
        let y = generator_forward(&mut tape, &vars, xv, ForwardMode::Train).unwrap();
        assert_eq!(tape.shape(y), Shape4::new(1, 3, 32, 32));

        let mut tape = Tape::new();
        let vars = params.vars_on(&mut tape, false);
        let bad = tape.constant(signed_img(1, 20, 32, 7));
        assert!(generator_forward(&mut tape, &vars, bad, ForwardMode::Train).is_err());
    }

    #[test]
    fn infer_mode_clamps_to_signed_unit_range() {
        let mut params = build_generator(tiny_config(), 13).unwrap();
        // blow up the tail so the raw residual overshoots
        params.visit_mut(&mut |name, t| {
            if name.starts_with("tail") {
                t.data_mut().iter_mut().for_each(|v| *v = 3.0);
            }
        });
        let x = signed_img(1, 8, 8, 8);
        let mut tape = Tape::new();
        let vars = params.vars_on(&mut tape, false);
        let xv = tape.constant(x);
        let y = generator_forward(&mut tape, &vars, xv, ForwardMode::Infer).unwrap();
        assert!(tape.value(y).data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let raw = {
            let mut tape = Tape::new();
            let vars = params.vars_on(&mut tape, false);
            let xv = tape.constant(signed_img(1, 8, 8, 8));
            let y = generator_forward(&mut tape, &vars, xv, ForwardMode::Train).unwrap();
            tape.value(y).data().to_vec()
        };
        assert!(raw.iter().any(|v| v.abs() > 1.0), "fixture must actually overshoot");
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        let mut params = build_generator(tiny_config(), 17).unwrap();
        // the zero tail blocks upstream gradients; make it generic first
        params.visit_mut(&mut |name, t| {
            if name == "tail.kernel" {
                let data = seeded_data(t.len(), 99, -0.3, 0.3);
                t.data_mut().copy_from_slice(&data);
            }
        });
        let mut tape = Tape::new();
        let vars = params.vars_on(&mut tape, true);
        let xv = tape.constant(signed_img(1, 16, 16, 9));
        let y = generator_forward(&mut tape, &vars, xv, ForwardMode::Train).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.mean_all(sq);
        tape.backward(loss).unwrap();
        vars.visit(&mut |name, var| {
            let g = tape.grad(var).expect("trainable leaf must receive a gradient");
            assert!(
                g.iter().any(|&v| v != 0.0),
                "parameter group {name} got an all-zero gradient (dead branch)"
            );
        });
    }

    #[test]
    fn zeroed_bottleneck_makes_wavelet_path_transparent() {
        let cfg_dwt = tiny_config();
        let cfg_plain = GeneratorConfig { use_dwt_bottleneck: false, ..cfg_dwt };
        let with_dwt = build_generator(cfg_dwt, 23).unwrap();
        let mut plain = build_generator(cfg_plain, 23).unwrap();

        // share every common weight, then silence both bottlenecks so the
        // only difference is analysis → (identity) → synthesis
        let mut source = std::collections::BTreeMap::new();
        with_dwt.visit(&mut |name, t| {
            source.insert(name, t.data().to_vec());
        });
        plain.visit_mut(&mut |name, t| {
            if let Some(data) = source.get(&name) {
                if data.len() == t.len() {
                    t.data_mut().copy_from_slice(data);
                }
            }
        });
        let mut silenced = with_dwt.clone();
        for p in [&mut silenced, &mut plain] {
            p.visit_mut(&mut |name, t| {
                if name.starts_with("bottleneck.") {
                    t.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
                if name == "tail.kernel" {
                    let data = seeded_data(t.len(), 31, -0.3, 0.3);
                    t.data_mut().copy_from_slice(&data);
                }
            });
        }

        let x = signed_img(1, 16, 16, 10);
        let run = |params: &GeneratorParams| {
            let mut tape = Tape::new();
            let vars = params.vars_on(&mut tape, false);
            let xv = tape.constant(x.clone());
            let y = generator_forward(&mut tape, &vars, xv, ForwardMode::Train).unwrap();
            tape.value(y).data().to_vec()
        };
        let (a, b) = (run(&silenced), run(&plain));
        let max_err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(
            max_err < 1e-12,
            "analysis/synthesis around a silent bottleneck must be invisible, err {max_err}"
        );
    }

    #[test]
    fn discriminator_outputs_probabilities() {
        let cfg = DiscriminatorConfig::toy();
        let params = build_discriminator(cfg, 3).unwrap();
        let mut tape = Tape::new();
        let vars = params.vars_on(&mut tape, false);
        let xv = tape.constant(signed_img(3, 32, 32, 11));
        let d = discriminator_forward(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.shape(d), Shape4::new(3, 1, 1, 1));
        for &v in tape.value(d).data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn zero_head_discriminator_says_half() {
        let mut params = build_discriminator(DiscriminatorConfig::toy(), 5).unwrap();
        params.visit_mut(&mut |name, t| {
            if name.starts_with("head") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let mut tape = Tape::new();
        let vars = params.vars_on(&mut tape, false);
        let xv = tape.constant(signed_img(2, 16, 16, 12));
        let d = discriminator_forward(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(d).data(), &[0.5, 0.5]);
    }

    #[test]
    fn discriminator_gradients_match_finite_differences() {
        let cfg = DiscriminatorConfig { base_channels: 2, blocks: 2, in_channels: 3 };
        let params = build_discriminator(cfg, 7).unwrap();
        let x = signed_img(1, 8, 8, 13);

        let loss_of = |params: &DiscriminatorParams| {
            let mut tape = Tape::new();
            let vars = params.vars_on(&mut tape, true);
            let xv = tape.constant(x.clone());
            let d = discriminator_forward(&mut tape, &vars, xv).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let l = tape.mean_all(sq);
            (tape, vars, l)
        };

        let (mut tape, vars, l) = loss_of(&params);
        tape.backward(l).unwrap();
        let mut analytic = std::collections::BTreeMap::new();
        vars.visit(&mut |name, var| {
            analytic.insert(name, tape.grad(var).unwrap().to_vec());
        });

        let mut names = Vec::new();
        params.visit(&mut |name, _| names.push(name));
        for target in names {
            let mut base = Vec::new();
            params.visit(&mut |name, t| {
                if name == target {
                    base = t.data().to_vec();
                }
            });
            let numeric = numerical_grad(
                |d| {
                    let mut probe = params.clone();
                    probe.visit_mut(&mut |name, t| {
                        if name == target {
                            t.data_mut().copy_from_slice(d);
                        }
                    });
                    let (tape, _, l) = loss_of(&probe);
                    tape.value(l).data()[0]
                },
                &base,
            );
            assert_grads_close(&analytic[&target], &numeric, 1e-4);
        }
    }

    #[test]
    fn checkpoint_round_trips_and_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        let params = build_generator(tiny_config(), 41).unwrap();
        save_generator(&params, &path).unwrap();
        let loaded = load_generator(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        assert_eq!(flat(&loaded), flat(&params));

        let bytes = fs::read(&path).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        fs::write(&path, &bad_magic).unwrap();
        assert!(load_generator(&path).is_err());

        let mut bad_version = bytes.clone();
        bad_version[4] = 99;
        fs::write(&path, &bad_version).unwrap();
        assert!(load_generator(&path).is_err());

        // flipping the dwt flag changes the implied layout
        let flag_at = 4 + 4 + 5 * 4;
        let mut bad_config = bytes.clone();
        bad_config[flag_at] ^= 1;
        fs::write(&path, &bad_config).unwrap();
        let err = load_generator(&path).unwrap_err().to_string();
        assert!(err.contains("checkpoint"), "{err}");

        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_generator(&path).is_err(), "truncation must be caught");

        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 3]);
        fs::write(&path, &extended).unwrap();
        assert!(load_generator(&path).is_err(), "trailing bytes must be caught");
    }
}
