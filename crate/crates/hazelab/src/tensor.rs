//! Dense rank-4 tensors and a reverse-mode differentiation tape.
//!
//! Values live flat in NCHW order as `f64`. A [`Tape`] is an append-only
//! arena of operation nodes addressed by [`Var`] handles; appending keeps the
//! arena topologically sorted, so [`Tape::backward`] is a single reverse
//! sweep that deposits gradients on the leaf tensors registered with
//! `requires_grad`.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

// ── Shapes and tensors ──

/// Dimensions of a rank-4 tensor: batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    /// Total number of elements.
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat offset of `(n, c, y, x)` in row-major NCHW order.
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn per_sample(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// A dense `f64` tensor with an optional gradient buffer of the same shape.
#[derive(Debug, Clone)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
    pub requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        assert!(shape.count() > 0, "tensor shape {shape} has a zero dimension");
        Tensor4 {
            shape,
            data: vec![value; shape.count()],
            requires_grad: false,
            grad: None,
        }
    }

    /// Wraps `data` as a tensor, rejecting length mismatches and non-finite
    /// values.
    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if shape.count() == 0 {
            return Err(Error::invalid(format!(
                "tensor shape {shape} has a zero dimension"
            )));
        }
        if data.len() != shape.count() {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.count()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor data at flat index {pos}"
            )));
        }
        Ok(Tensor4 {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A `(1, 1, 1, 1)` tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor4 {
            shape: Shape4::new(1, 1, 1, 1),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Fills a fresh tensor with draws from `U(lo, hi)`.
    pub fn uniform(shape: Shape4, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        assert!(shape.count() > 0, "tensor shape {shape} has a zero dimension");
        let data = (0..shape.count()).map(|_| rng.random_range(lo..hi)).collect();
        Tensor4 {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Builder flag: mark this tensor as a differentiable leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Gradient buffer deposited by the last `backward`, if any.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.idx(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.shape.idx(n, c, y, x);
        self.data[i] = value;
    }

    /// Elementwise `scale * x + shift`, leaving `self` untouched.
    pub fn affine(&self, scale: f64, shift: f64) -> Tensor4 {
        let data = self.data.iter().map(|v| scale * v + shift).collect();
        Tensor4 {
            shape: self.shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

// ── Tape and operations ──

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
    SampleSum(Var),
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, k: Var, stride: usize },
    AddBias { x: Var, b: Var },
    InstanceNorm { x: Var, eps: f64 },
    MinPool { x: Var, argmin: Vec<usize> },
    ChannelMin { x: Var, argmin: Vec<usize> },
    Dwt2(Var),
    Iwt2(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    DiffH(Var),
    DiffV(Var),
}

struct Node {
    value: Tensor4,
    op: Op,
    needs: bool,
}

/// Append-only arena of tensor operations recording enough to differentiate.
pub struct Tape {
    nodes: Vec<Node>,
    ran_backward: bool,
    /// Forward analysis/synthesis wavelet applications recorded on this tape.
    pub dwt_calls: u64,
    pub iwt_calls: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ran_backward: false,
            dwt_calls: 0,
            iwt_calls: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` on the tape; its `requires_grad` flag decides whether
    /// `backward` will deposit a gradient on it.
    pub fn leaf(&mut self, t: Tensor4) -> Var {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Registers `t` as a frozen input regardless of its flag.
    pub fn constant(&mut self, mut t: Tensor4) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape
    }

    /// Gradient of the last `backward` target with respect to `v`, present
    /// only on leaves registered with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Copies the value out of the graph, severing any gradient path.
    pub fn detach(&self, v: Var) -> Tensor4 {
        let mut t = self.nodes[v.0].value.clone();
        t.requires_grad = false;
        t.grad = None;
        t
    }

    fn push(&mut self, mut value: Tensor4, op: Op, needs: bool) -> Var {
        if !matches!(op, Op::Leaf) {
            value.requires_grad = false;
        }
        value.grad = None;
        self.nodes.push(Node { value, op, needs });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape4> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    // ── Elementwise arithmetic ──

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let data = zip_map(self.data_of(a), self.data_of(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(tensor(shape, data), Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let data = zip_map(self.data_of(a), self.data_of(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(tensor(shape, data), Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let data = zip_map(self.data_of(a), self.data_of(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(tensor(shape, data), Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let shape = self.shape(a);
        let data = self.data_of(a).iter().map(|v| v * s).collect();
        let needs = self.needs(a);
        self.push(tensor(shape, data), Op::Scale(a, s), needs)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let shape = self.shape(a);
        let data = self.data_of(a).iter().map(|v| v + s).collect();
        let needs = self.needs(a);
        self.push(tensor(shape, data), Op::Offset(a), needs)
    }

    // ── Pointwise nonlinearities ──

    pub fn relu(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let data = self.data_of(a).iter().map(|v| v.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(tensor(shape, data), Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let data = self.data_of(a).iter().map(|&v| sigmoid(v)).collect();
        let needs = self.needs(a);
        self.push(tensor(shape, data), Op::Sigmoid(a), needs)
    }

    /// Natural log; callers must keep inputs positive (clamp first).
    pub fn ln(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let data = self.data_of(a).iter().map(|v| v.ln()).collect();
        let needs = self.needs(a);
        self.push(tensor(shape, data), Op::Ln(a), needs)
    }

    /// Square root with the zero-input subgradient defined as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let data = self.data_of(a).iter().map(|v| v.sqrt()).collect();
        let needs = self.needs(a);
        self.push(tensor(shape, data), Op::Sqrt(a), needs)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let data = self.data_of(a).iter().map(|v| v.abs()).collect();
        let needs = self.needs(a);
        self.push(tensor(shape, data), Op::Abs(a), needs)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        debug_assert!(lo <= hi, "clamp bounds inverted: {lo} > {hi}");
        let shape = self.shape(a);
        let data = self.data_of(a).iter().map(|v| v.clamp(lo, hi)).collect();
        let needs = self.needs(a);
        self.push(tensor(shape, data), Op::Clamp(a, lo, hi), needs)
    }

    // ── Reductions ──

    /// Sum of every element, as a `(1, 1, 1, 1)` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.data_of(a).iter().sum();
        let needs = self.needs(a);
        self.push(Tensor4::scalar(total), Op::SumAll(a), needs)
    }

    /// Mean of every element, as a `(1, 1, 1, 1)` tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let data = self.data_of(a);
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let needs = self.needs(a);
        self.push(Tensor4::scalar(mean), Op::MeanAll(a), needs)
    }

    /// Per-sample sum over channels and pixels: `(n, c, h, w)` → `(n, 1, 1, 1)`.
    pub fn sample_sum(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let per = shape.per_sample();
        let data = self
            .data_of(a)
            .chunks_exact(per)
            .map(|s| s.iter().sum())
            .collect();
        let needs = self.needs(a);
        self.push(
            tensor(Shape4::new(shape.n, 1, 1, 1), data),
            Op::SampleSum(a),
            needs,
        )
    }

    // ── Structured operations ──

    /// Cross-correlation of `x: (n, ci, h, w)` with `k: (co, ci, kh, kw)`,
    /// zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        let out = conv2d_out_shape(xs, ks, stride, pad)?;
        let mut data = vec![0.0; out.count()];
        conv2d_forward(self.data_of(x), xs, self.data_of(k), ks, stride, pad, &mut data, out);
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(tensor(out, data), Op::Conv2d { x, k, stride, pad }, needs))
    }

    /// Transposed convolution, the exact adjoint of [`Tape::conv2d`] at
    /// `pad = 0`; `k: (ci, co, kh, kw)` where `ci` matches the input.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        let out = convt2d_out_shape(xs, ks, stride)?;
        let mut data = vec![0.0; out.count()];
        convt2d_forward(self.data_of(x), xs, self.data_of(k), ks, stride, &mut data, out);
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(tensor(out, data), Op::ConvT2d { x, k, stride }, needs))
    }

    /// Adds a `(1, c, 1, 1)` bias across batch and pixels.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs != Shape4::new(1, xs.c, 1, 1) {
            return Err(Error::ShapeMismatch { op: "add_bias", lhs: xs, rhs: bs });
        }
        let plane = xs.plane();
        let bias = self.data_of(b).to_vec();
        let mut data = self.data_of(x).to_vec();
        for (i, chunk) in data.chunks_exact_mut(plane).enumerate() {
            let bv = bias[i % xs.c];
            for v in chunk {
                *v += bv;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(tensor(xs, data), Op::AddBias { x, b }, needs))
    }

    /// Normalizes each `(sample, channel)` plane to zero mean and unit
    /// variance, with `eps` inside the square root.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xs = self.shape(x);
        let plane = xs.plane();
        let src = self.data_of(x);
        let mut data = vec![0.0; src.len()];
        for (xc, yc) in src.chunks_exact(plane).zip(data.chunks_exact_mut(plane)) {
            let (mean, std) = plane_stats(xc, eps);
            for (y, &v) in yc.iter_mut().zip(xc) {
                *y = (v - mean) / std;
            }
        }
        let needs = self.needs(x);
        self.push(tensor(xs, data), Op::InstanceNorm { x, eps }, needs)
    }

    /// Sliding-window minimum over `patch`×`patch` neighborhoods, clipped at
    /// the borders; output keeps the input height and width.
    pub fn minpool(&mut self, x: Var, patch: usize) -> Result<Var> {
        let (out, argmin) = minpool_patch(&self.nodes[x.0].value, patch)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MinPool { x, argmin }, needs))
    }

    /// Minimum across channels: `(n, c, h, w)` → `(n, 1, h, w)`.
    pub fn channel_min(&mut self, x: Var) -> Var {
        let (out, argmin) = channel_min(&self.nodes[x.0].value);
        let needs = self.needs(x);
        self.push(out, Op::ChannelMin { x, argmin }, needs)
    }

    /// One analysis level of the 2×2 ±1 filter bank; bands stack band-major
    /// into `(n, 4c, h/2, w/2)`.
    pub fn dwt2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let out = crate::wavelet::dwt2_out_shape(xs)?;
        let data = crate::wavelet::dwt2_raw(self.data_of(x), xs, 1.0);
        self.dwt_calls += 1;
        let needs = self.needs(x);
        Ok(self.push(tensor(out, data), Op::Dwt2(x), needs))
    }

    /// Synthesis half of [`Tape::dwt2`]: `(n, 4c, h, w)` → `(n, c, 2h, 2w)`.
    pub fn iwt2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let out = crate::wavelet::iwt2_out_shape(xs)?;
        let data = crate::wavelet::iwt2_raw(self.data_of(x), xs, 0.25);
        self.iwt_calls += 1;
        let needs = self.needs(x);
        Ok(self.push(tensor(out, data), Op::Iwt2(x), needs))
    }

    /// Stacks `b`'s channels after `a`'s.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::ShapeMismatch { op: "concat_channels", lhs: sa, rhs: sb });
        }
        let out = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = vec![0.0; out.count()];
        let (pa, pb) = (sa.per_sample(), sb.per_sample());
        for n in 0..sa.n {
            let dst = &mut data[n * (pa + pb)..(n + 1) * (pa + pb)];
            dst[..pa].copy_from_slice(&self.data_of(a)[n * pa..(n + 1) * pa]);
            dst[pa..].copy_from_slice(&self.data_of(b)[n * pb..(n + 1) * pb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(tensor(out, data), Op::Concat(a, b), needs))
    }

    /// Keeps channels `start..end`.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xs = self.shape(x);
        if start >= end || end > xs.c {
            return Err(Error::invalid(format!(
                "slice_channels {start}..{end} out of range for {} channels",
                xs.c
            )));
        }
        let out = Shape4::new(xs.n, end - start, xs.h, xs.w);
        let plane = xs.plane();
        let mut data = vec![0.0; out.count()];
        for n in 0..xs.n {
            let src = &self.data_of(x)[(n * xs.c + start) * plane..(n * xs.c + end) * plane];
            data[n * out.per_sample()..(n + 1) * out.per_sample()].copy_from_slice(src);
        }
        let needs = self.needs(x);
        Ok(self.push(tensor(out, data), Op::Slice { x, start }, needs))
    }

    /// Horizontal first differences: `y[.., x] = a[.., x + 1] - a[.., x]`.
    pub fn diff_h(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.w < 2 {
            return Err(Error::invalid(format!(
                "diff_h needs width >= 2, got shape {s}"
            )));
        }
        let out = Shape4::new(s.n, s.c, s.h, s.w - 1);
        let src = self.data_of(a);
        let mut data = vec![0.0; out.count()];
        for (row, drow) in src.chunks_exact(s.w).zip(data.chunks_exact_mut(s.w - 1)) {
            for x in 0..s.w - 1 {
                drow[x] = row[x + 1] - row[x];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(tensor(out, data), Op::DiffH(a), needs))
    }

    /// Vertical first differences: `y[.., y, .] = a[.., y + 1, .] - a[.., y, .]`.
    pub fn diff_v(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.h < 2 {
            return Err(Error::invalid(format!(
                "diff_v needs height >= 2, got shape {s}"
            )));
        }
        let out = Shape4::new(s.n, s.c, s.h - 1, s.w);
        let src = self.data_of(a);
        let mut data = vec![0.0; out.count()];
        for (plane, dplane) in src
            .chunks_exact(s.plane())
            .zip(data.chunks_exact_mut(out.plane()))
        {
            for y in 0..s.h - 1 {
                for x in 0..s.w {
                    dplane[y * s.w + x] = plane[(y + 1) * s.w + x] - plane[y * s.w + x];
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(tensor(out, data), Op::DiffV(a), needs))
    }

    fn data_of(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    // ── Backward sweep ──

    /// Runs reverse-mode accumulation from the scalar `loss` node, writing
    /// gradients onto every `requires_grad` leaf (zeros if unreached).
    /// A tape differentiates once; build a fresh tape per step.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.ran_backward {
            return Err(Error::invalid(
                "backward already ran on this tape".to_string(),
            ));
        }
        let ls = self.shape(loss);
        if ls != Shape4::new(1, 1, 1, 1) {
            return Err(Error::invalid(format!(
                "backward target must be a scalar (1, 1, 1, 1) tensor, got {ls}"
            )));
        }
        self.ran_backward = true;

        let needs: Vec<bool> = self.nodes.iter().map(|n| n.needs).collect();
        let lens: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !needs[id] {
                continue;
            }
            self.accumulate(id, &g, &needs, &lens, &mut grads);
            if self.nodes[id].value.requires_grad {
                self.nodes[id].value.grad = Some(g);
            }
        }

        for node in &mut self.nodes {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        id: usize,
        g: &[f64],
        needs: &[bool],
        lens: &[usize],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let sink = |grads: &mut [Option<Vec<f64>>], v: Var| -> Option<*mut [f64]> {
            if !needs[v.0] {
                return None;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; lens[v.0]]);
            Some(slot.as_mut_slice() as *mut [f64])
        };
        // `sink` hands out at most two disjoint slots below (an op's inputs
        // may alias, e.g. mul(x, x); contributions are `+=` so aliasing is
        // safe, but the borrow checker cannot see that, hence raw pointers).
        macro_rules! into {
            ($v:expr, |$gi:ident| $body:expr) => {
                if let Some(p) = sink(grads, $v) {
                    let $gi: &mut [f64] = unsafe { &mut *p };
                    $body
                }
            };
        }

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                into!(*a, |ga| axpy(1.0, g, ga));
                into!(*b, |gb| axpy(1.0, g, gb));
            }
            Op::Sub(a, b) => {
                into!(*a, |ga| axpy(1.0, g, ga));
                into!(*b, |gb| axpy(-1.0, g, gb));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data_of(*a), self.data_of(*b));
                into!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                into!(*b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => into!(*a, |ga| axpy(*s, g, ga)),
            Op::Offset(a) => into!(*a, |ga| axpy(1.0, g, ga)),
            Op::Relu(a) => {
                let av = self.data_of(*a);
                into!(*a, |ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = &self.nodes[id].value.data;
                into!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::Ln(a) => {
                let av = self.data_of(*a);
                into!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / av[i];
                    }
                });
            }
            Op::Sqrt(a) => {
                let yv = &self.nodes[id].value.data;
                into!(*a, |ga| {
                    for i in 0..g.len() {
                        if yv[i] > 0.0 {
                            ga[i] += g[i] * 0.5 / yv[i];
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.data_of(*a);
                into!(*a, |ga| {
                    for i in 0..g.len() {
                        let s = if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[i] += g[i] * s;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.data_of(*a);
                into!(*a, |ga| {
                    for i in 0..g.len() {
                        if av[i] >= *lo && av[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::SumAll(a) => into!(*a, |ga| {
                for v in ga.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::MeanAll(a) => into!(*a, |ga| {
                let s = g[0] / lens[a.0] as f64;
                for v in ga.iter_mut() {
                    *v += s;
                }
            }),
            Op::SampleSum(a) => into!(*a, |ga| {
                let per = lens[a.0] / g.len();
                for (n, chunk) in ga.chunks_exact_mut(per).enumerate() {
                    for v in chunk {
                        *v += g[n];
                    }
                }
            }),
            Op::Conv2d { x, k, stride, pad } => {
                let (xs, ks) = (self.shape(*x), self.shape(*k));
                let os = self.nodes[id].value.shape;
                let (xv, kv) = (self.data_of(*x), self.data_of(*k));
                into!(*x, |gx| {
                    conv2d_backward_x(g, os, kv, ks, *stride, *pad, gx, xs);
                });
                into!(*k, |gk| {
                    conv2d_backward_k(g, os, xv, xs, *stride, *pad, gk, ks);
                });
            }
            Op::ConvT2d { x, k, stride } => {
                let (xs, ks) = (self.shape(*x), self.shape(*k));
                let os = self.nodes[id].value.shape;
                let (xv, kv) = (self.data_of(*x), self.data_of(*k));
                into!(*x, |gx| {
                    convt2d_backward_x(g, os, kv, ks, *stride, gx, xs);
                });
                into!(*k, |gk| {
                    convt2d_backward_k(g, os, xv, xs, *stride, gk, ks);
                });
            }
            Op::AddBias { x, b } => {
                let xs = self.shape(*x);
                into!(*x, |gx| axpy(1.0, g, gx));
                into!(*b, |gb| {
                    let plane = xs.plane();
                    for (i, chunk) in g.chunks_exact(plane).enumerate() {
                        gb[i % xs.c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::InstanceNorm { x, eps } => {
                let xs = self.shape(*x);
                let plane = xs.plane();
                let xv = self.data_of(*x);
                let yv = &self.nodes[id].value.data;
                into!(*x, |gx| {
                    let m = plane as f64;
                    for p in 0..xv.len() / plane {
                        let r = p * plane..(p + 1) * plane;
                        let (_, std) = plane_stats(&xv[r.clone()], *eps);
                        let gp = &g[r.clone()];
                        let yp = &yv[r.clone()];
                        let g_mean = gp.iter().sum::<f64>() / m;
                        let gy_mean = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / m;
                        let gxp = &mut gx[r];
                        for i in 0..plane {
                            gxp[i] += (gp[i] - g_mean - yp[i] * gy_mean) / std;
                        }
                    }
                });
            }
            Op::MinPool { x, argmin } => into!(*x, |gx| {
                for (j, &src) in argmin.iter().enumerate() {
                    gx[src] += g[j];
                }
            }),
            Op::ChannelMin { x, argmin } => into!(*x, |gx| {
                for (j, &src) in argmin.iter().enumerate() {
                    gx[src] += g[j];
                }
            }),
            Op::Dwt2(x) => into!(*x, |gx| {
                let os = self.nodes[id].value.shape;
                let back = crate::wavelet::iwt2_raw(g, os, 1.0);
                axpy(1.0, &back, gx);
            }),
            Op::Iwt2(x) => into!(*x, |gx| {
                let os = self.nodes[id].value.shape;
                let back = crate::wavelet::dwt2_raw(g, os, 0.25);
                axpy(1.0, &back, gx);
            }),
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (pa, pb) = (sa.per_sample(), sb.per_sample());
                into!(*a, |ga| {
                    for n in 0..sa.n {
                        let src = &g[n * (pa + pb)..n * (pa + pb) + pa];
                        axpy(1.0, src, &mut ga[n * pa..(n + 1) * pa]);
                    }
                });
                into!(*b, |gb| {
                    for n in 0..sb.n {
                        let src = &g[n * (pa + pb) + pa..(n + 1) * (pa + pb)];
                        axpy(1.0, src, &mut gb[n * pb..(n + 1) * pb]);
                    }
                });
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let os = self.nodes[id].value.shape;
                let plane = xs.plane();
                into!(*x, |gx| {
                    for n in 0..xs.n {
                        let dst = (n * xs.c + start) * plane;
                        let src = n * os.per_sample();
                        axpy(
                            1.0,
                            &g[src..src + os.per_sample()],
                            &mut gx[dst..dst + os.per_sample()],
                        );
                    }
                });
            }
            Op::DiffH(a) => {
                let s = self.shape(*a);
                into!(*a, |ga| {
                    for (row, grow) in ga.chunks_exact_mut(s.w).zip(g.chunks_exact(s.w - 1)) {
                        for x in 0..s.w - 1 {
                            row[x + 1] += grow[x];
                            row[x] -= grow[x];
                        }
                    }
                });
            }
            Op::DiffV(a) => {
                let s = self.shape(*a);
                into!(*a, |ga| {
                    let gplane = (s.h - 1) * s.w;
                    for (plane, gp) in ga.chunks_exact_mut(s.plane()).zip(g.chunks_exact(gplane)) {
                        for y in 0..s.h - 1 {
                            for x in 0..s.w {
                                plane[(y + 1) * s.w + x] += gp[y * s.w + x];
                                plane[y * s.w + x] -= gp[y * s.w + x];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn tensor(shape: Shape4, data: Vec<f64>) -> Tensor4 {
    Tensor4 {
        shape,
        data,
        requires_grad: false,
        grad: None,
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for i in 0..x.len() {
        y[i] += a * x[i];
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn plane_stats(plane: &[f64], eps: f64) -> (f64, f64) {
    let m = plane.len() as f64;
    let mean = plane.iter().sum::<f64>() / m;
    let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, (var + eps).sqrt())
}

// ── Pure pooling kernels (shared with the prior-based paths) ──

/// Minimum over clipped `patch`×`patch` windows plus the flat input index of
/// each winner. The window center seeds the scan, so a constant window
/// reports its center; otherwise the first strictly smaller value in
/// row-major order wins.
pub fn minpool_patch(x: &Tensor4, patch: usize) -> Result<(Tensor4, Vec<usize>)> {
    if patch == 0 || patch % 2 == 0 {
        return Err(Error::invalid(format!(
            "minpool patch must be odd and positive, got {patch}"
        )));
    }
    let s = x.shape();
    let r = patch / 2;
    let mut out = vec![0.0; s.count()];
    let mut argmin = vec![0usize; s.count()];
    let data = x.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for y in 0..s.h {
            for xx in 0..s.w {
                let center = base + y * s.w + xx;
                let mut best = data[center];
                let mut best_at = center;
                for ky in y.saturating_sub(r)..=(y + r).min(s.h - 1) {
                    for kx in xx.saturating_sub(r)..=(xx + r).min(s.w - 1) {
                        let i = base + ky * s.w + kx;
                        if data[i] < best {
                            best = data[i];
                            best_at = i;
                        }
                    }
                }
                out[center] = best;
                argmin[center] = best_at;
            }
        }
    }
    Ok((tensor(s, out), argmin))
}

/// Minimum across channels with the flat input index of each winner; ties go
/// to the lowest channel.
pub fn channel_min(x: &Tensor4) -> (Tensor4, Vec<usize>) {
    let s = x.shape();
    let out_shape = Shape4::new(s.n, 1, s.h, s.w);
    let mut out = vec![0.0; out_shape.count()];
    let mut argmin = vec![0usize; out_shape.count()];
    let data = x.data();
    let plane = s.plane();
    for n in 0..s.n {
        for p in 0..plane {
            let first = (n * s.c) * plane + p;
            let mut best = data[first];
            let mut best_at = first;
            for c in 1..s.c {
                let i = (n * s.c + c) * plane + p;
                if data[i] < best {
                    best = data[i];
                    best_at = i;
                }
            }
            out[n * plane + p] = best;
            argmin[n * plane + p] = best_at;
        }
    }
    (tensor(out_shape, out), argmin)
}

// ── Convolution kernels ──

fn conv2d_out_shape(xs: Shape4, ks: Shape4, stride: usize, pad: usize) -> Result<Shape4> {
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be positive".to_string()));
    }
    if ks.c != xs.c {
        return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ks });
    }
    if xs.h + 2 * pad < ks.h || xs.w + 2 * pad < ks.w {
        return Err(Error::invalid(format!(
            "conv2d kernel {ks} larger than padded input {xs} (pad {pad})"
        )));
    }
    Ok(Shape4::new(
        xs.n,
        ks.n,
        (xs.h + 2 * pad - ks.h) / stride + 1,
        (xs.w + 2 * pad - ks.w) / stride + 1,
    ))
}

fn convt2d_out_shape(xs: Shape4, ks: Shape4, stride: usize) -> Result<Shape4> {
    if stride == 0 {
        return Err(Error::invalid(
            "conv_transpose2d stride must be positive".to_string(),
        ));
    }
    if ks.n != xs.c {
        return Err(Error::ShapeMismatch { op: "conv_transpose2d", lhs: xs, rhs: ks });
    }
    Ok(Shape4::new(
        xs.n,
        ks.c,
        (xs.h - 1) * stride + ks.h,
        (xs.w - 1) * stride + ks.w,
    ))
}

/// Valid output-column range for one kernel column: `ix = ox*stride + kx - pad`
/// stays inside `[0, w)`.
fn ox_range(kx: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi = if w + pad > kx {
        (((w - 1 + pad - kx) / stride) + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    xs: Shape4,
    k: &[f64],
    ks: Shape4,
    stride: usize,
    pad: usize,
    y: &mut [f64],
    os: Shape4,
) {
    for n in 0..xs.n {
        for co in 0..os.c {
            let ybase = (n * os.c + co) * os.plane();
            for ci in 0..xs.c {
                let xbase = (n * xs.c + ci) * xs.plane();
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        let kv = k[((co * ks.c + ci) * ks.h + ky) * ks.w + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = ox_range(kx, pad, stride, xs.w, os.w);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..os.h {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * xs.w;
                            let yrow = ybase + oy * os.w;
                            if stride == 1 {
                                // ix = ox + kx - pad is affine in ox, so the
                                // row update is a contiguous multiply-add
                                let off = kx as isize - pad as isize;
                                let src = &x[(xrow as isize + off + lo as isize) as usize
                                    ..(xrow as isize + off + hi as isize) as usize];
                                let dst = &mut y[yrow + lo..yrow + hi];
                                for i in 0..dst.len() {
                                    dst[i] += kv * src[i];
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * stride + kx - pad;
                                    y[yrow + ox] += kv * x[xrow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_x(
    g: &[f64],
    os: Shape4,
    k: &[f64],
    ks: Shape4,
    stride: usize,
    pad: usize,
    gx: &mut [f64],
    xs: Shape4,
) {
    for n in 0..xs.n {
        for co in 0..os.c {
            let gbase = (n * os.c + co) * os.plane();
            for ci in 0..xs.c {
                let xbase = (n * xs.c + ci) * xs.plane();
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        let kv = k[((co * ks.c + ci) * ks.h + ky) * ks.w + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = ox_range(kx, pad, stride, xs.w, os.w);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..os.h {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * xs.w;
                            let grow = gbase + oy * os.w;
                            if stride == 1 {
                                let off = kx as isize - pad as isize;
                                let dst = &mut gx[(xrow as isize + off + lo as isize) as usize
                                    ..(xrow as isize + off + hi as isize) as usize];
                                let src = &g[grow + lo..grow + hi];
                                for i in 0..dst.len() {
                                    dst[i] += kv * src[i];
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * stride + kx - pad;
                                    gx[xrow + ix] += kv * g[grow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_k(
    g: &[f64],
    os: Shape4,
    x: &[f64],
    xs: Shape4,
    stride: usize,
    pad: usize,
    gk: &mut [f64],
    ks: Shape4,
) {
    for n in 0..xs.n {
        for co in 0..os.c {
            let gbase = (n * os.c + co) * os.plane();
            for ci in 0..xs.c {
                let xbase = (n * xs.c + ci) * xs.plane();
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        let (lo, hi) = ox_range(kx, pad, stride, xs.w, os.w);
                        if lo >= hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in 0..os.h {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * xs.w;
                            let grow = gbase + oy * os.w;
                            if stride == 1 {
                                let off = kx as isize - pad as isize;
                                let xsrc = &x[(xrow as isize + off + lo as isize) as usize
                                    ..(xrow as isize + off + hi as isize) as usize];
                                let gsrc = &g[grow + lo..grow + hi];
                                for i in 0..gsrc.len() {
                                    acc += gsrc[i] * xsrc[i];
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * stride + kx - pad;
                                    acc += g[grow + ox] * x[xrow + ix];
                                }
                            }
                        }
                        gk[((co * ks.c + ci) * ks.h + ky) * ks.w + kx] += acc;
                    }
                }
            }
        }
    }
}

fn convt2d_forward(
    x: &[f64],
    xs: Shape4,
    k: &[f64],
    ks: Shape4,
    stride: usize,
    y: &mut [f64],
    os: Shape4,
) {
    for n in 0..xs.n {
        for ci in 0..xs.c {
            let xbase = (n * xs.c + ci) * xs.plane();
            for co in 0..os.c {
                let ybase = (n * os.c + co) * os.plane();
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        let kv = k[((ci * ks.c + co) * ks.h + ky) * ks.w + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for iy in 0..xs.h {
                            let xrow = xbase + iy * xs.w;
                            let yrow = ybase + (iy * stride + ky) * os.w + kx;
                            for ix in 0..xs.w {
                                y[yrow + ix * stride] += kv * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn convt2d_backward_x(
    g: &[f64],
    os: Shape4,
    k: &[f64],
    ks: Shape4,
    stride: usize,
    gx: &mut [f64],
    xs: Shape4,
) {
    for n in 0..xs.n {
        for ci in 0..xs.c {
            let xbase = (n * xs.c + ci) * xs.plane();
            for co in 0..os.c {
                let gbase = (n * os.c + co) * os.plane();
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        let kv = k[((ci * ks.c + co) * ks.h + ky) * ks.w + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for iy in 0..xs.h {
                            let xrow = xbase + iy * xs.w;
                            let grow = gbase + (iy * stride + ky) * os.w + kx;
                            for ix in 0..xs.w {
                                gx[xrow + ix] += kv * g[grow + ix * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn convt2d_backward_k(
    g: &[f64],
    os: Shape4,
    x: &[f64],
    xs: Shape4,
    stride: usize,
    gk: &mut [f64],
    ks: Shape4,
) {
    for n in 0..xs.n {
        for ci in 0..xs.c {
            let xbase = (n * xs.c + ci) * xs.plane();
            for co in 0..os.c {
                let gbase = (n * os.c + co) * os.plane();
                for ky in 0..ks.h {
                    for kx in 0..ks.w {
                        let mut acc = 0.0;
                        for iy in 0..xs.h {
                            let xrow = xbase + iy * xs.w;
                            let grow = gbase + (iy * stride + ky) * os.w + kx;
                            for ix in 0..xs.w {
                                acc += x[xrow + ix] * g[grow + ix * stride];
                            }
                        }
                        gk[((ci * ks.c + co) * ks.h + ky) * ks.w + kx] += acc;
                    }
                }
            }
        }
    }
}
