//! Python bindings over the dehazing core: tensors, Haar wavelets, the
//! scattering model and its dark-channel baseline, image metrics, and
//! trained generators.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;

use hazelab::haze::{self, DepthProfile, HazeScene, TransmissionMap};
use hazelab::io::{self, ManifestKind};
use hazelab::metrics;
use hazelab::network::{build_generator, load_generator, save_generator, GeneratorConfig};
use hazelab::network::GeneratorParams;
use hazelab::tensor::{Shape4, Tensor4};
use hazelab::trainer::{self, LabeledPair, TrainConfig};
use hazelab::wavelet::{self, WaveletBands};

fn to_py(e: hazelab::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Rank-4 tensor in (batch, channel, row, column) order, f64 throughout.
/// Images are (1, 3, h, w) with values in [0, 1].
#[pyclass(module = "hazelab_py")]
struct Tensor {
    inner: Tensor4,
}

impl Tensor {
    fn wrap(inner: Tensor4) -> Self {
        Tensor { inner }
    }

    fn check(&self, n: usize, c: usize, y: usize, x: usize) -> PyResult<()> {
        let s = self.inner.shape();
        if n >= s.n || c >= s.c || y >= s.h || x >= s.w {
            return Err(PyIndexError::new_err(format!(
                "index ({n}, {c}, {y}, {x}) outside shape ({}, {}, {}, {})",
                s.n, s.c, s.h, s.w
            )));
        }
        Ok(())
    }
}

#[pymethods]
impl Tensor {
    /// Builds from a flat row-major list; the length must match the shape.
    #[new]
    fn new(shape: (usize, usize, usize, usize), data: Vec<f64>) -> PyResult<Self> {
        let (n, c, h, w) = shape;
        Tensor4::from_vec(Shape4::new(n, c, h, w), data)
            .map(Tensor::wrap)
            .map_err(to_py)
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        let (n, c, h, w) = shape;
        Tensor::wrap(Tensor4::zeros(Shape4::new(n, c, h, w)))
    }

    #[staticmethod]
    fn filled(shape: (usize, usize, usize, usize), value: f64) -> Self {
        let (n, c, h, w) = shape;
        Tensor::wrap(Tensor4::filled(Shape4::new(n, c, h, w), value))
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.inner.shape();
        (s.n, s.c, s.h, s.w)
    }

    /// Flat row-major copy of the values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, n: usize, c: usize, y: usize, x: usize) -> PyResult<f64> {
        self.check(n, c, y, x)?;
        Ok(self.inner.get(n, c, y, x))
    }

    fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) -> PyResult<()> {
        self.check(n, c, y, x)?;
        self.inner.set(n, c, y, x, value);
        Ok(())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let s = self.inner.shape();
        format!("Tensor(shape=({}, {}, {}, {}))", s.n, s.c, s.h, s.w)
    }
}

/// Dehazing network parameters, freshly initialized or loaded from a
/// checkpoint. Fresh networks start as the identity map.
#[pyclass(module = "hazelab_py")]
struct Generator {
    params: GeneratorParams,
}

#[pymethods]
impl Generator {
    #[new]
    #[pyo3(signature = (seed, base_channels=16, scales=3, blocks_per_scale=3, bottleneck_blocks=2, use_dwt_bottleneck=true))]
    fn new(
        seed: u64,
        base_channels: usize,
        scales: usize,
        blocks_per_scale: usize,
        bottleneck_blocks: usize,
        use_dwt_bottleneck: bool,
    ) -> PyResult<Self> {
        let config = GeneratorConfig {
            base_channels,
            scales,
            blocks_per_scale,
            bottleneck_blocks,
            use_dwt_bottleneck,
            in_channels: 3,
        };
        build_generator(config, seed)
            .map(|params| Generator { params })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_generator(&path).map(|params| Generator { params }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_generator(&self.params, &path).map_err(to_py)
    }

    /// Center-crops a (1, 3, h, w) image to the spatial divisor and runs the
    /// network on it.
    fn dehaze(&self, image: &Tensor) -> PyResult<Tensor> {
        trainer::dehaze_image(&self.params, &image.inner)
            .map(Tensor::wrap)
            .map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Input height and width must be divisible by this.
    #[getter]
    fn spatial_divisor(&self) -> usize {
        self.params.config.spatial_divisor()
    }

    fn __repr__(&self) -> String {
        let c = &self.params.config;
        format!(
            "Generator(base_channels={}, scales={}, dwt_bottleneck={}, params={})",
            c.base_channels,
            c.scales,
            c.use_dwt_bottleneck,
            self.params.param_count()
        )
    }
}

/// Statistics and artifact locations from one training run.
#[pyclass(module = "hazelab_py")]
struct TrainReport {
    #[pyo3(get)]
    steps: u64,
    #[pyo3(get)]
    d_updates: u64,
    #[pyo3(get)]
    dwt_calls: u64,
    #[pyo3(get)]
    iwt_calls: u64,
    #[pyo3(get)]
    contrastive_evals: u64,
    #[pyo3(get)]
    final_total: f64,
    #[pyo3(get)]
    checkpoint_path: String,
    #[pyo3(get)]
    log_path: String,
}

#[pymethods]
impl TrainReport {
    fn __repr__(&self) -> String {
        format!(
            "TrainReport(steps={}, d_updates={}, final_total={:.6})",
            self.steps, self.d_updates, self.final_total
        )
    }
}

/// Loads a PNG or binary PNM file as a (1, 3, h, w) tensor in [0, 1].
#[pyfunction]
fn load_image(path: PathBuf) -> PyResult<Tensor> {
    io::load_image(&path).map(Tensor::wrap).map_err(to_py)
}

/// Writes a (1, 3, h, w) tensor as .png or .ppm, quantized to 8 bits.
#[pyfunction]
fn save_image(image: &Tensor, path: PathBuf) -> PyResult<()> {
    io::save_image(&image.inner, &path).map_err(to_py)
}

/// One Haar analysis level; returns the (ll, lh, hl, hh) sub-bands at half
/// resolution.
#[pyfunction]
fn dwt2(x: &Tensor) -> PyResult<(Tensor, Tensor, Tensor, Tensor)> {
    let b = wavelet::dwt2(&x.inner).map_err(to_py)?;
    Ok((
        Tensor::wrap(b.ll),
        Tensor::wrap(b.lh),
        Tensor::wrap(b.hl),
        Tensor::wrap(b.hh),
    ))
}

/// Inverse of `dwt2`; reconstructs the signal from its four sub-bands.
#[pyfunction]
fn iwt2(ll: &Tensor, lh: &Tensor, hl: &Tensor, hh: &Tensor) -> PyResult<Tensor> {
    let bands = WaveletBands {
        ll: ll.inner.clone(),
        lh: lh.inner.clone(),
        hl: hl.inner.clone(),
        hh: hh.inner.clone(),
    };
    wavelet::iwt2(&bands).map(Tensor::wrap).map_err(to_py)
}

/// t = exp(-beta * depth), elementwise over a (n, 1, h, w) depth map.
#[pyfunction]
fn transmission_from_depth(depth: &Tensor, beta: f64) -> PyResult<Tensor> {
    haze::transmission_from_depth(&depth.inner, beta)
        .map(|t| Tensor::wrap(t.into_inner()))
        .map_err(to_py)
}

/// Applies the scattering model I = J*t + A*(1 - t) to a clear scene.
#[pyfunction]
fn synthesize_haze(clear: &Tensor, depth: &Tensor, beta: f64, airlight: Vec<f64>) -> PyResult<Tensor> {
    let scene = HazeScene::new(clear.inner.clone(), depth.inner.clone(), beta, airlight)
        .map_err(to_py)?;
    haze::synthesize_haze(&scene).map(Tensor::wrap).map_err(to_py)
}

/// Recovers the scene J = (I - A) / max(t, t_floor) + A, clamped to [0, 1].
#[pyfunction]
#[pyo3(signature = (hazy, transmission, airlight, t_floor=haze::DEFAULT_T_FLOOR))]
fn invert_haze(hazy: &Tensor, transmission: &Tensor, airlight: Vec<f64>, t_floor: f64) -> PyResult<Tensor> {
    let t = TransmissionMap::new(transmission.inner.clone()).map_err(to_py)?;
    haze::invert_haze(&hazy.inner, &t, &airlight, t_floor)
        .map(Tensor::wrap)
        .map_err(to_py)
}

/// Patchwise minimum over channels and a square neighborhood.
#[pyfunction]
#[pyo3(signature = (image, patch=haze::DEFAULT_PATCH))]
fn dark_channel(image: &Tensor, patch: usize) -> PyResult<Tensor> {
    haze::dark_channel(&image.inner, patch).map(Tensor::wrap).map_err(to_py)
}

/// Per-image airlight from the brightest dark-channel pixels; returns one
/// RGB triple per batch entry.
#[pyfunction]
#[pyo3(signature = (hazy, fraction=haze::DEFAULT_AIRLIGHT_FRACTION))]
fn estimate_airlight(hazy: &Tensor, fraction: f64) -> PyResult<Vec<Vec<f64>>> {
    haze::estimate_airlight(&hazy.inner, fraction).map_err(to_py)
}

/// Dark-channel-prior dehazing, the training-free baseline.
#[pyfunction]
#[pyo3(signature = (hazy, omega=haze::DEFAULT_OMEGA, patch=haze::DEFAULT_PATCH, t_floor=haze::DEFAULT_T_FLOOR))]
fn dcp_dehaze(hazy: &Tensor, omega: f64, patch: usize, t_floor: f64) -> PyResult<Tensor> {
    haze::dcp_dehaze(&hazy.inner, omega, patch, t_floor)
        .map(Tensor::wrap)
        .map_err(to_py)
}

/// Deterministic colorful test scenes, (n, 3, h, w) in [0, 1].
#[pyfunction]
fn procedural_clear(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::wrap(haze::procedural_clear(n, h, w, seed))
}

/// Synthetic (n, 1, h, w) depth; profile is "ramp", "radial", or "constant".
#[pyfunction]
fn procedural_depth(profile: &str, n: usize, h: usize, w: usize) -> PyResult<Tensor> {
    let p = match profile {
        "ramp" => DepthProfile::Ramp,
        "radial" => DepthProfile::Radial,
        "constant" => DepthProfile::Constant,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown depth profile {other:?}, expected ramp, radial, or constant"
            )))
        }
    };
    Ok(Tensor::wrap(haze::procedural_depth(p, n, h, w)))
}

/// Peak signal-to-noise ratio in dB, capped at 99.
#[pyfunction]
fn psnr(a: &Tensor, b: &Tensor) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner).map_err(to_py)
}

/// Mean structural similarity over an 11x11 Gaussian window.
#[pyfunction]
fn ssim(a: &Tensor, b: &Tensor) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner).map_err(to_py)
}

/// Learning rate at a 1-based epoch: flat until the decay start, then one
/// straight line down to `lr_end` at the final epoch. Defaults give the
/// full-scale 300-epoch schedule.
#[pyfunction]
#[pyo3(signature = (epoch, epochs=300, decay_start_epoch=150, lr_start=1e-4, lr_end=1e-6))]
fn lr_at_epoch(
    epoch: usize,
    epochs: usize,
    decay_start_epoch: usize,
    lr_start: f64,
    lr_end: f64,
) -> PyResult<f64> {
    let config = TrainConfig {
        epochs,
        decay_start_epoch,
        lr_start,
        lr_end,
        ..TrainConfig::full_scale()
    };
    config.validate().map_err(to_py)?;
    trainer::lr_at_epoch(epoch, &config).map_err(to_py)
}

/// Runs the semi-supervised loop over manifest-listed data and writes the
/// checkpoint and CSV log into `out_dir`. `config` is an optional key=value
/// file; `seed` overrides the config's seed.
#[pyfunction]
#[pyo3(signature = (labeled_manifest, unlabeled_manifest, out_dir, config=None, seed=None))]
fn train(
    labeled_manifest: PathBuf,
    unlabeled_manifest: PathBuf,
    out_dir: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
) -> PyResult<(Generator, TrainReport)> {
    let mut run = match &config {
        Some(path) => io::load_run_config(path).map_err(to_py)?,
        None => io::RunConfig::default(),
    };
    if let Some(s) = seed {
        run.train.seed = s;
    }
    let run = run.resolved().map_err(to_py)?;
    let labeled = io::load_manifest(&labeled_manifest, ManifestKind::Labeled).map_err(to_py)?;
    let unlabeled =
        io::load_manifest(&unlabeled_manifest, ManifestKind::Unlabeled).map_err(to_py)?;
    let pairs: Vec<LabeledPair> = labeled
        .entries
        .iter()
        .map(|e| {
            Ok(LabeledPair {
                hazy: io::load_image(&e.hazy)?,
                clear: io::load_image(e.clear.as_ref().expect("labeled manifests carry clear paths"))?,
            })
        })
        .collect::<hazelab::Result<_>>()
        .map_err(to_py)?;
    let extra: Vec<Tensor4> = unlabeled
        .entries
        .iter()
        .map(|e| io::load_image(&e.hazy))
        .collect::<hazelab::Result<_>>()
        .map_err(to_py)?;
    let outcome = trainer::train(&run.train, &pairs, &extra, &out_dir).map_err(to_py)?;
    let report = TrainReport {
        steps: outcome.stats.steps,
        d_updates: outcome.stats.d_updates,
        dwt_calls: outcome.stats.dwt_calls,
        iwt_calls: outcome.stats.iwt_calls,
        contrastive_evals: outcome.stats.contrastive_evals,
        final_total: outcome.stats.final_total,
        checkpoint_path: outcome.checkpoint_path.display().to_string(),
        log_path: outcome.log_path.display().to_string(),
    };
    Ok((Generator { params: outcome.generator }, report))
}

#[pymodule]
fn hazelab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Generator>()?;
    m.add_class::<TrainReport>()?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(save_image, m)?)?;
    m.add_function(wrap_pyfunction!(dwt2, m)?)?;
    m.add_function(wrap_pyfunction!(iwt2, m)?)?;
    m.add_function(wrap_pyfunction!(transmission_from_depth, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_haze, m)?)?;
    m.add_function(wrap_pyfunction!(invert_haze, m)?)?;
    m.add_function(wrap_pyfunction!(dark_channel, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_airlight, m)?)?;
    m.add_function(wrap_pyfunction!(dcp_dehaze, m)?)?;
    m.add_function(wrap_pyfunction!(procedural_clear, m)?)?;
    m.add_function(wrap_pyfunction!(procedural_depth, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at_epoch, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("DEFAULT_OMEGA", haze::DEFAULT_OMEGA)?;
    m.add("DEFAULT_T_FLOOR", haze::DEFAULT_T_FLOOR)?;
    m.add("DEFAULT_PATCH", haze::DEFAULT_PATCH)?;
    m.add("DEFAULT_AIRLIGHT_FRACTION", haze::DEFAULT_AIRLIGHT_FRACTION)?;
    m.add("PSNR_CAP_DB", metrics::PSNR_CAP_DB)?;
    m.add("SSIM_WINDOW", metrics::SSIM_WINDOW)?;
    Ok(())
}
