//! Image files, dataset manifests, and the flat-text run configuration.
//!
//! Images are 8-bit PNG or binary PPM/PGM; pixels map to [0, 1] as v/255
//! on load and back as round(v·255) on save, so 8-bit data round-trips
//! exactly. Manifests are tab-separated lines `id hazy [clear] [depth]`
//! with `#` comments, paths resolved relative to the manifest file.
//! Run configuration is a `key = value` file; anything omitted keeps its
//! default.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::GanMode;
use crate::tensor::{Shape4, Tensor4};
use crate::trainer::TrainConfig;

// ── Images ──

fn image_error(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), msg: msg.into() }
}

/// Reads a PNG or binary PPM/PGM into a `(1, 3, h, w)` tensor in [0, 1];
/// grayscale sources are replicated across the three channels.
pub fn load_image(path: &Path) -> Result<Tensor4> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        return decode_pnm(path, &bytes);
    }
    let img = image::load_from_memory(&bytes)
        .map_err(|e| image_error(path, format!("decode failed: {e}")))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(image_error(path, "image has zero size"));
    }
    let mut t = Tensor4::zeros(Shape4::new(1, 3, h, w));
    for (y, row) in rgb.rows().enumerate() {
        for (x, px) in row.enumerate() {
            for c in 0..3 {
                t.set(0, c, y, x, px.0[c] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

/// Binary PPM (P6, RGB) and PGM (P5, gray) with 8-bit maxval. The header
/// is ASCII tokens with `#` comments; one whitespace byte separates it
/// from the raster.
fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<Tensor4> {
    let channels = match &bytes[..2] {
        b"P6" => 3,
        b"P5" => 1,
        _ => unreachable!("caller sniffed the magic"),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comment lines between tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n')) {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(image_error(path, "truncated header")),
            }
        }
        let start = pos;
        while matches!(bytes.get(pos), Some(b) if b.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(image_error(path, "malformed header token"));
        }
        let token = std::str::from_utf8(&bytes[start..pos]).expect("digits are UTF-8");
        *field = token
            .parse()
            .map_err(|_| image_error(path, format!("header value {token} out of range")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(image_error(path, format!("only maxval 255 is supported, got {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(image_error(path, "image has zero size"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(image_error(path, "missing raster separator")),
    }
    let raster = &bytes[pos..];
    let expected = w * h * channels;
    if raster.len() != expected {
        return Err(image_error(
            path,
            format!("raster holds {} bytes, expected {expected}", raster.len()),
        ));
    }
    let mut t = Tensor4::zeros(Shape4::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let b = raster[(y * w + x) * channels + c.min(channels - 1)];
                t.set(0, c, y, x, b as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `(1, 3, h, w)` tensor as PNG or PPM depending on the
/// extension; values are clamped to [0, 1] and quantized to 8 bits.
pub fn save_image(img: &Tensor4, path: &Path) -> Result<()> {
    let s = img.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::invalid(format!("save_image needs a (1, 3, h, w) tensor, got {s}")));
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => {
            let mut out = image::RgbImage::new(s.w as u32, s.h as u32);
            for y in 0..s.h {
                for x in 0..s.w {
                    let px = [
                        quantize(img.get(0, 0, y, x)),
                        quantize(img.get(0, 1, y, x)),
                        quantize(img.get(0, 2, y, x)),
                    ];
                    out.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            out.save(path).map_err(|e| image_error(path, format!("write failed: {e}")))
        }
        "ppm" => {
            let mut bytes = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
            for y in 0..s.h {
                for x in 0..s.w {
                    for c in 0..3 {
                        bytes.push(quantize(img.get(0, c, y, x)));
                    }
                }
            }
            fs::write(path, bytes).map_err(|e| Error::io(path, e))
        }
        other => Err(Error::invalid(format!(
            "unsupported image extension {other:?} for {} (use png or ppm)",
            path.display()
        ))),
    }
}

// ── Manifests ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestKind {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub hazy: PathBuf,
    pub clear: Option<PathBuf>,
    pub depth: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub kind: ManifestKind,
    pub entries: Vec<ManifestEntry>,
}

fn manifest_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Manifest { file: path.to_path_buf(), line, msg: msg.into() }
}

/// Parses and fully validates a manifest: tab-separated
/// `id hazy [clear] [depth]` lines, unique ids, every referenced file
/// present, and a clear path on every entry when `kind` is labeled.
pub fn load_manifest(path: &Path, kind: ManifestKind) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    let mut seen = std::collections::BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 4 {
            return Err(manifest_error(
                path,
                line_no,
                format!("expected 2 to 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let id = fields[0];
        if id.is_empty() {
            return Err(manifest_error(path, line_no, "empty id"));
        }
        if !seen.insert(id.to_string()) {
            return Err(manifest_error(path, line_no, format!("duplicate id {id:?}")));
        }
        let resolve = |field: &str| -> PathBuf { base.join(field) };
        let optional = |i: usize| -> Option<PathBuf> {
            fields.get(i).filter(|f| !f.is_empty()).map(|f| resolve(f))
        };
        let entry = ManifestEntry {
            id: id.to_string(),
            hazy: resolve(fields[1]),
            clear: optional(2),
            depth: optional(3),
        };
        if kind == ManifestKind::Labeled && entry.clear.is_none() {
            return Err(manifest_error(
                path,
                line_no,
                format!("labeled entry {id:?} is missing its clear image path"),
            ));
        }
        for p in [Some(&entry.hazy), entry.clear.as_ref(), entry.depth.as_ref()]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                return Err(manifest_error(
                    path,
                    line_no,
                    format!("referenced file {} does not exist", p.display()),
                ));
            }
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(manifest_error(path, 1, "empty manifest"));
    }
    Ok(Manifest { kind, entries })
}

// ── Run configuration ──

/// Training configuration plus the two ablation switches; both on is the
/// full model.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub enable_dwt_bottleneck: bool,
    pub enable_contrastive: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::toy(),
            enable_dwt_bottleneck: true,
            enable_contrastive: true,
        }
    }
}

impl RunConfig {
    /// Pushes the switches down into the nested configs and revalidates.
    pub fn resolved(mut self) -> Result<Self> {
        self.train.generator.use_dwt_bottleneck = self.enable_dwt_bottleneck;
        self.train.use_contrastive = self.enable_contrastive;
        self.train.validate()?;
        Ok(self)
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

/// Parses `key = value` lines over toy defaults. If `epochs` is given
/// without `decay_start_epoch`, the decay knee stays at the halfway epoch.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    let mut saw_decay_start = false;
    let mut saw_epochs = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value")))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| {
            Error::Config(format!("line {line_no}: {key} expects {what}, got {value:?}"))
        };
        let as_usize = || value.parse::<usize>().map_err(|_| bad("a nonnegative integer"));
        let as_u64 = || value.parse::<u64>().map_err(|_| bad("a nonnegative integer"));
        let as_f64 = || value.parse::<f64>().map_err(|_| bad("a number"));
        let as_bool = || parse_bool(value).ok_or_else(|| bad("true or false"));

        let t = &mut run.train;
        match key {
            "epochs" => {
                t.epochs = as_usize()?;
                saw_epochs = true;
            }
            "decay_start_epoch" => {
                t.decay_start_epoch = as_usize()?;
                saw_decay_start = true;
            }
            "lr_start" => t.lr_start = as_f64()?,
            "lr_end" => t.lr_end = as_f64()?,
            "crop" => t.crop = as_usize()?,
            "batch_labeled" => t.batch_labeled = as_usize()?,
            "batch_unlabeled" => t.batch_unlabeled = as_usize()?,
            "d_update_period" => t.d_update_period = as_usize()?,
            "checkpoint_every" => t.checkpoint_every = as_usize()?,
            "beta1" => t.adam.beta1 = as_f64()?,
            "beta2" => t.adam.beta2 = as_f64()?,
            "adam_eps" => t.adam.eps = as_f64()?,
            "weight_decay" => t.adam.weight_decay = as_f64()?,
            "alpha" => t.weights.alpha = as_f64()?,
            "tv_weight" => t.weights.tv_weight = as_f64()?,
            "gamma" => t.weights.gamma = as_f64()?,
            "delta" => t.weights.delta = as_f64()?,
            "epsilon" => t.weights.epsilon = as_f64()?,
            "gan" => {
                t.gan = match value {
                    "non_saturating" => GanMode::NonSaturating,
                    "saturating" => GanMode::Saturating,
                    _ => return Err(bad("non_saturating or saturating")),
                }
            }
            "seed" => t.seed = as_u64()?,
            "feature_seed" => t.feature_seed = as_u64()?,
            "base_channels" => t.generator.base_channels = as_usize()?,
            "scales" => t.generator.scales = as_usize()?,
            "blocks_per_scale" => t.generator.blocks_per_scale = as_usize()?,
            "bottleneck_blocks" => t.generator.bottleneck_blocks = as_usize()?,
            "disc_base_channels" => t.discriminator.base_channels = as_usize()?,
            "disc_blocks" => t.discriminator.blocks = as_usize()?,
            "enable_dwt_bottleneck" => run.enable_dwt_bottleneck = as_bool()?,
            "enable_contrastive" => run.enable_contrastive = as_bool()?,
            _ => return Err(Error::Config(format!("line {line_no}: unknown key {key:?}"))),
        }
    }
    if saw_epochs && !saw_decay_start {
        run.train.decay_start_epoch = (run.train.epochs / 2).max(1);
    }
    run.resolved()
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testsupport::seeded_data;

    fn quantized_image(h: usize, w: usize, seed: u64) -> Tensor4 {
        let shape = Shape4::new(1, 3, h, w);
        let data = seeded_data(shape.count(), seed, 0.0, 1.0)
            .into_iter()
            .map(|v| (v * 255.0).round() / 255.0)
            .collect();
        Tensor4::from_vec(shape, data).unwrap()
    }

    #[test]
    fn png_round_trips_8_bit_values_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = quantized_image(9, 7, 1);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn ppm_round_trips_8_bit_values_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = quantized_image(5, 11, 2);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn extreme_bytes_map_to_unit_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let black = dir.path().join("black.ppm");
        fs::write(&black, [b"P6\n2 2\n255\n".as_slice(), &[0u8; 12]].concat()).unwrap();
        let t = load_image(&black).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));

        let white = dir.path().join("white.ppm");
        fs::write(&white, [b"P6\n2 2\n255\n".as_slice(), &[255u8; 12]].concat()).unwrap();
        let t = load_image(&white).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quantization_rounds_and_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ppm");
        let img = Tensor4::from_vec(
            Shape4::new(1, 3, 1, 1),
            vec![0.5, 1.2, -0.1],
        )
        .unwrap();
        save_image(&img, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let raster = &bytes[bytes.len() - 3..];
        assert_eq!(raster, &[128, 255, 0], "round half up, clamp above and below");
    }

    #[test]
    fn pgm_replicates_gray_to_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.pgm");
        fs::write(&path, [b"P5\n# note\n3 1\n255\n".as_slice(), &[10, 20, 30]].concat()).unwrap();
        let t = load_image(&path).unwrap();
        assert_eq!(t.shape(), Shape4::new(1, 3, 1, 3));
        for c in 0..3 {
            assert_eq!(t.get(0, c, 0, 0), 10.0 / 255.0);
            assert_eq!(t.get(0, c, 0, 2), 30.0 / 255.0);
        }
    }

    #[test]
    fn image_errors_name_the_path() {
        let missing = Path::new("/nonexistent/nowhere.png");
        let err = load_image(missing).unwrap_err().to_string();
        assert!(err.contains("nowhere.png"), "{err}");

        let dir = tempfile::tempdir().unwrap();
        let corrupt = dir.path().join("bad.png");
        fs::write(&corrupt, b"not an image at all").unwrap();
        let err = load_image(&corrupt).unwrap_err().to_string();
        assert!(err.contains("bad.png"), "{err}");

        let truncated = dir.path().join("短.ppm");
        fs::write(&truncated, b"P6\n4 4\n255\nxx").unwrap();
        assert!(load_image(&truncated).is_err());
    }

    #[test]
    fn save_rejects_bad_shapes_and_extensions() {
        let dir = tempfile::tempdir().unwrap();
        let img = quantized_image(2, 2, 3);
        assert!(save_image(&img, &dir.path().join("img.jpeg")).is_err());
        let mono = Tensor4::zeros(Shape4::new(1, 1, 2, 2));
        assert!(save_image(&mono, &dir.path().join("img.png")).is_err());
    }

    fn write_fixture_images(dir: &Path, names: &[&str]) {
        for name in names {
            let img = quantized_image(4, 4, 7);
            save_image(&img, &dir.join(name)).unwrap();
        }
    }

    #[test]
    fn manifest_loads_in_file_order_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_images(dir.path(), &["a_h.ppm", "a_c.ppm", "b_h.ppm", "b_c.ppm"]);
        let mpath = dir.path().join("pairs.tsv");
        fs::write(
            &mpath,
            "# fixtures\nalpha\ta_h.ppm\ta_c.ppm\n\nbeta\tb_h.ppm\tb_c.ppm\n",
        )
        .unwrap();
        let m = load_manifest(&mpath, ManifestKind::Labeled).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].id, "alpha");
        assert_eq!(m.entries[1].id, "beta");
        assert!(m.entries[0].hazy.is_file(), "paths resolve against the manifest directory");
        assert!(m.entries[0].clear.as_ref().unwrap().is_file());
        assert!(m.entries[0].depth.is_none());
    }

    #[test]
    fn manifest_validation_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_images(dir.path(), &["h.ppm", "c.ppm"]);
        let mpath = dir.path().join("m.tsv");

        fs::write(&mpath, "").unwrap();
        let err = load_manifest(&mpath, ManifestKind::Labeled).unwrap_err().to_string();
        assert!(err.contains("empty manifest"), "{err}");

        fs::write(&mpath, "x\th.ppm\tc.ppm\nx\th.ppm\tc.ppm\n").unwrap();
        let err = load_manifest(&mpath, ManifestKind::Labeled).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("duplicate"), "{err}");

        fs::write(&mpath, "x\th.ppm\n").unwrap();
        let err = load_manifest(&mpath, ManifestKind::Labeled).unwrap_err().to_string();
        assert!(err.contains("clear"), "{err}");
        assert!(load_manifest(&mpath, ManifestKind::Unlabeled).is_ok());

        fs::write(&mpath, "x\th.ppm\tc.ppm\ny\tmissing.ppm\tc.ppm\n").unwrap();
        let err = load_manifest(&mpath, ManifestKind::Labeled).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("missing.ppm"), "{err}");
    }

    #[test]
    fn config_defaults_and_overrides() {
        let run = parse_run_config("").unwrap();
        assert_eq!(run, RunConfig::default().resolved().unwrap());
        assert!(run.train.use_contrastive);
        assert!(run.train.generator.use_dwt_bottleneck);

        let text = "\
# toy override
epochs = 4
crop = 16
seed = 99
alpha = 0.5
enable_dwt_bottleneck = false
";
        let run = parse_run_config(text).unwrap();
        assert_eq!(run.train.epochs, 4);
        assert_eq!(run.train.decay_start_epoch, 2, "knee follows epochs when unset");
        assert_eq!(run.train.crop, 16);
        assert_eq!(run.train.seed, 99);
        assert_eq!(run.train.weights.alpha, 0.5);
        assert!(!run.train.generator.use_dwt_bottleneck);
        assert!(run.train.use_contrastive);
    }

    #[test]
    fn config_errors_name_line_and_key() {
        let err = parse_run_config("epochs = soon\n").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("epochs"), "{err}");
        let err = parse_run_config("\nwat = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("wat"), "{err}");
        let err = parse_run_config("epochs 4\n").unwrap_err().to_string();
        assert!(err.contains("key = value"), "{err}");
        assert!(parse_run_config("crop = 33\n").is_err(), "validation runs after parsing");
    }
}
