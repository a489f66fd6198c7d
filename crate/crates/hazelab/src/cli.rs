//! Command-line front end: dataset synthesis, training, inference,
//! evaluation, wavelet inspection, and the switch study.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::ablation::{run_ablation, EvalPair};
use crate::error::{Error, Result};
use crate::haze::{
    dcp_dehaze, procedural_clear, procedural_depth, synthesize_haze, DepthProfile, HazeScene,
    DEFAULT_OMEGA, DEFAULT_PATCH, DEFAULT_T_FLOOR,
};
use crate::io::{
    load_image, load_manifest, load_run_config, save_image, Manifest, ManifestKind, RunConfig,
};
use crate::metrics::{evaluate_dataset, MetricsReport};
use crate::network::load_generator;
use crate::tensor::{Shape4, Tensor4};
use crate::trainer::{dehaze_image, train, LabeledPair};
use crate::wavelet::{dwt2, iwt2};

#[derive(Debug, Parser)]
#[command(name = "hazelab", version, about = "Single-image dehazing workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic hazy/clear dataset with manifests.
    Synthesize {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Number of labeled training pairs.
        #[arg(long, default_value_t = 16)]
        labeled: usize,
        /// Number of unlabeled hazy images.
        #[arg(long, default_value_t = 8)]
        unlabeled: usize,
        /// Number of held-out evaluation pairs.
        #[arg(long, default_value_t = 4)]
        eval: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 48)]
        size: usize,
    },
    /// Train on a labeled manifest plus an unlabeled manifest.
    Train {
        /// Labeled manifest (id, hazy, clear per line).
        #[arg(long)]
        labeled: PathBuf,
        /// Unlabeled manifest (id, hazy per line).
        #[arg(long)]
        unlabeled: PathBuf,
        /// key = value configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore one image with a trained checkpoint.
    Dehaze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Hazy input image (png or ppm).
        #[arg(long)]
        input: PathBuf,
        /// Output image path; the extension picks the format.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score methods on a labeled manifest and print a PSNR/SSIM table.
    Eval {
        /// Labeled manifest with ground truth.
        #[arg(long)]
        manifest: PathBuf,
        /// Also score this trained checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also score the dark-channel-prior baseline.
        #[arg(long, default_value_t = false)]
        dcp: bool,
        /// Directory for CSV reports; table still prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decompose an image into sub-bands, reconstruct, and report the error.
    Wavelet {
        #[arg(long)]
        input: PathBuf,
        /// Directory for the band images and the reconstruction.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the four architecture variants with one shared seed.
    Ablate {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        unlabeled: PathBuf,
        /// Labeled manifest of held-out evaluation pairs.
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize { out, seed, labeled, unlabeled, eval, size } => {
            synthesize_cmd(&out, seed, labeled, unlabeled, eval, size)
        }
        Command::Train { labeled, unlabeled, config, seed, out } => {
            train_cmd(&labeled, &unlabeled, config.as_deref(), seed, &out)
        }
        Command::Dehaze { checkpoint, input, out } => dehaze_cmd(&checkpoint, &input, &out),
        Command::Eval { manifest, checkpoint, dcp, out } => {
            eval_cmd(&manifest, checkpoint.as_deref(), dcp, out.as_deref())
        }
        Command::Wavelet { input, out } => wavelet_cmd(&input, &out),
        Command::Ablate { labeled, unlabeled, eval, config, seed, out } => {
            ablate_cmd(&labeled, &unlabeled, &eval, config.as_deref(), seed, &out)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut run = match path {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default().resolved()?,
    };
    if let Some(s) = seed {
        run.train.seed = s;
    }
    Ok(run)
}

fn nth_image(batch: &Tensor4, i: usize) -> Tensor4 {
    let s = batch.shape();
    let plane = s.c * s.h * s.w;
    let data = batch.data()[i * plane..(i + 1) * plane].to_vec();
    Tensor4::from_vec(Shape4::new(1, s.c, s.h, s.w), data).expect("slice keeps the layout")
}

fn gray_to_rgb(gray: &Tensor4) -> Tensor4 {
    let s = gray.shape();
    let mut out = Tensor4::zeros(Shape4::new(s.n, 3, s.h, s.w));
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let v = gray.get(n, 0, y, x);
                for c in 0..3 {
                    out.set(n, c, y, x, v);
                }
            }
        }
    }
    out
}

fn synthesize_cmd(
    out: &Path,
    seed: u64,
    labeled: usize,
    unlabeled: usize,
    eval: usize,
    size: usize,
) -> Result<()> {
    use rand::{Rng, SeedableRng};
    if labeled == 0 {
        return Err(Error::invalid("need at least one labeled pair"));
    }
    if size < 8 {
        return Err(Error::invalid(format!("size {size} is too small, use at least 8")));
    }
    for sub in ["hazy", "clear", "depth"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }

    let total = labeled + unlabeled + eval;
    let clears = procedural_clear(total, size, size, seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xA1CE));
    let profiles = [DepthProfile::Ramp, DepthProfile::Radial, DepthProfile::Constant];

    let mut manifests = [String::new(), String::new(), String::new()];
    for i in 0..total {
        let (group, index, with_truth) = if i < labeled {
            (0, i, true)
        } else if i < labeled + unlabeled {
            (1, i - labeled, false)
        } else {
            (2, i - labeled - unlabeled, true)
        };
        let id = format!("{}{index:03}", ["train", "unlab", "eval"][group]);

        let clear = nth_image(&clears, i);
        let depth = procedural_depth(profiles[i % profiles.len()], 1, size, size);
        let beta = rng.random_range(0.4..=1.6);
        let airlight: Vec<f64> = (0..3).map(|_| rng.random_range(0.7..=1.0)).collect();
        let hazy = synthesize_haze(&HazeScene::new(clear.clone(), depth.clone(), beta, airlight)?)?;

        let hazy_rel = format!("hazy/{id}.png");
        save_image(&hazy, &out.join(&hazy_rel))?;
        if with_truth {
            let clear_rel = format!("clear/{id}.png");
            let depth_rel = format!("depth/{id}.png");
            save_image(&clear, &out.join(&clear_rel))?;
            save_image(&gray_to_rgb(&depth), &out.join(&depth_rel))?;
            manifests[group]
                .push_str(&format!("{id}\t{hazy_rel}\t{clear_rel}\t{depth_rel}\n"));
        } else {
            manifests[group].push_str(&format!("{id}\t{hazy_rel}\n"));
        }
    }

    for (name, body, count) in [
        ("labeled.tsv", &manifests[0], labeled),
        ("unlabeled.tsv", &manifests[1], unlabeled),
        ("eval.tsv", &manifests[2], eval),
    ] {
        if count > 0 {
            let path = out.join(name);
            fs::write(&path, body).map_err(|e| Error::io(path, e))?;
        }
    }
    println!(
        "wrote {labeled} labeled, {unlabeled} unlabeled, {eval} eval images ({size}x{size}) under {}",
        out.display()
    );
    Ok(())
}

fn load_labeled_pairs(manifest: &Manifest) -> Result<Vec<LabeledPair>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(LabeledPair {
                hazy: load_image(&e.hazy)?,
                clear: load_image(e.clear.as_ref().expect("labeled manifests carry clear paths"))?,
            })
        })
        .collect()
}

fn load_unlabeled_images(manifest: &Manifest) -> Result<Vec<Tensor4>> {
    manifest.entries.iter().map(|e| load_image(&e.hazy)).collect()
}

fn load_eval_pairs(manifest: &Manifest) -> Result<Vec<EvalPair>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            Ok(EvalPair {
                id: e.id.clone(),
                hazy: load_image(&e.hazy)?,
                clear: load_image(e.clear.as_ref().expect("labeled manifests carry clear paths"))?,
            })
        })
        .collect()
}

fn train_cmd(
    labeled: &Path,
    unlabeled: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let run = load_config(config, seed)?;
    let pairs = load_labeled_pairs(&load_manifest(labeled, ManifestKind::Labeled)?)?;
    let extra = load_unlabeled_images(&load_manifest(unlabeled, ManifestKind::Unlabeled)?)?;
    let outcome = train(&run.train, &pairs, &extra, out)?;
    println!(
        "trained {} steps ({} discriminator updates), final total loss {:.6}",
        outcome.stats.steps, outcome.stats.d_updates, outcome.stats.final_total
    );
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("log: {}", outcome.log_path.display());
    Ok(())
}

fn dehaze_cmd(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let gen = load_generator(checkpoint)?;
    let img = load_image(input)?;
    let restored = dehaze_image(&gen, &img)?;
    let (is_, os_) = (img.shape(), restored.shape());
    if (os_.h, os_.w) != (is_.h, is_.w) {
        println!(
            "input {}x{} center-cropped to {}x{} (the network needs multiples of {})",
            is_.h,
            is_.w,
            os_.h,
            os_.w,
            gen.config.spatial_divisor()
        );
    }
    save_image(&restored, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn eval_cmd(
    manifest: &Path,
    checkpoint: Option<&Path>,
    dcp: bool,
    out: Option<&Path>,
) -> Result<()> {
    let pairs = load_eval_pairs(&load_manifest(manifest, ManifestKind::Labeled)?)?;
    let truths: Vec<(String, Tensor4)> =
        pairs.iter().map(|p| (p.id.clone(), p.clear.clone())).collect();
    let dataset = manifest.display().to_string();

    let mut reports = Vec::new();
    let hazy: Vec<(String, Tensor4)> =
        pairs.iter().map(|p| (p.id.clone(), p.hazy.clone())).collect();
    reports.push(evaluate_dataset("hazy", &dataset, &hazy, &truths)?);

    if dcp {
        let restored: Result<Vec<(String, Tensor4)>> = pairs
            .iter()
            .map(|p| {
                Ok((p.id.clone(), dcp_dehaze(&p.hazy, DEFAULT_OMEGA, DEFAULT_PATCH, DEFAULT_T_FLOOR)?))
            })
            .collect();
        reports.push(evaluate_dataset("dcp", &dataset, &restored?, &truths)?);
    }
    if let Some(ckpt) = checkpoint {
        let gen = load_generator(ckpt)?;
        reports.push(crate::ablation::evaluate_generator(&gen, "model", &dataset, &pairs)?);
    }

    print!("{}", MetricsReport::render_table(&reports));
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let summary = dir.join("summary.csv");
        fs::write(&summary, MetricsReport::render_csv(&reports))
            .map_err(|e| Error::io(summary, e))?;
        for r in &reports {
            let per_image = dir.join(format!("{}_per_image.csv", r.method));
            fs::write(&per_image, r.per_image_csv()).map_err(|e| Error::io(per_image, e))?;
        }
        println!("reports written under {}", dir.display());
    }
    Ok(())
}

/// Shifts a band with values in `[-range, range]` onto `[0, 1]` for saving.
fn band_view(band: &Tensor4, range: f64, centered: bool) -> Tensor4 {
    let data = band
        .data()
        .iter()
        .map(|&v| if centered { v / (2.0 * range) + 0.5 } else { v / range })
        .collect();
    Tensor4::from_vec(band.shape(), data).expect("same layout")
}

fn wavelet_cmd(input: &Path, out: &Path) -> Result<()> {
    let img = load_image(input)?;
    let s = img.shape();
    let (h, w) = (s.h / 2 * 2, s.w / 2 * 2);
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("image {s} is too small to decompose")));
    }
    let img = crate::trainer::center_crop(&img, h, w)?;
    let bands = dwt2(&img)?;
    let recon = iwt2(&bands)?;
    let err = img
        .data()
        .iter()
        .zip(recon.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_image(&band_view(&bands.ll, 4.0, false), &out.join("ll.png"))?;
    save_image(&band_view(&bands.lh, 2.0, true), &out.join("lh.png"))?;
    save_image(&band_view(&bands.hl, 2.0, true), &out.join("hl.png"))?;
    save_image(&band_view(&bands.hh, 2.0, true), &out.join("hh.png"))?;
    save_image(&recon, &out.join("reconstruction.png"))?;
    println!(
        "decomposed {}x{} into {}x{} bands, max round-trip error {err:.3e}",
        h,
        w,
        bands.ll.shape().h,
        bands.ll.shape().w
    );
    println!("bands written under {}", out.display());
    Ok(())
}

fn ablate_cmd(
    labeled: &Path,
    unlabeled: &Path,
    eval: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let run = load_config(config, seed)?;
    let pairs = load_labeled_pairs(&load_manifest(labeled, ManifestKind::Labeled)?)?;
    let extra = load_unlabeled_images(&load_manifest(unlabeled, ManifestKind::Unlabeled)?)?;
    let eval_pairs = load_eval_pairs(&load_manifest(eval, ManifestKind::Labeled)?)?;

    let report = run_ablation(&run, &pairs, &extra, &eval_pairs, out)?;
    print!("{}", report.table());

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv = out.join("ablation.csv");
    fs::write(&csv, report.csv()).map_err(|e| Error::io(csv, e))?;
    let txt = out.join("ablation.txt");
    fs::write(&txt, report.table()).map_err(|e| Error::io(txt, e))?;
    println!("per-variant artifacts and the table live under {}", out.display());
    Ok(())
}
