//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::{read_kv, TrainConfig};
use super::manifest::{Manifest, Triplet, MANIFEST_NAME};
use super::models::Models;
use super::pnm::{self, Resize};
use super::train::{train_two_stage, Dataset, FEATURE_SEED};
use super::{gradsuite, visualize};
use crate::datagen::{
    binary_masked, blend, classify_area, gen_block_mask, select_pair, synthetic_face, BrushParams, FillSource,
    MaskKind, MaskSpec,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::image::{BinaryMask, Image};
use crate::inpaint::{parse_landmarks, LandmarkMap, HEATMAP_SIGMA};
use crate::losses::FeatureExtractor;
use crate::metrics::{self, EvalReport, SampleRow};

#[derive(Debug, Parser)]
#[command(name = "ftdr", version, about = "Blind face inpainting toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build corrupted/mask/ground-truth triplets and a manifest.
    Synth {
        /// Directory of PPM/PGM faces; procedural faces are drawn when omitted.
        #[arg(long)]
        gt_dir: Option<PathBuf>,
        /// `constant:<v>` or `dir:<path>`.
        #[arg(long, default_value = "constant:0.5")]
        fill: String,
        /// `block`, `freeform` or `dir:<path>`.
        #[arg(long, default_value = "freeform")]
        mask: String,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Brush strokes per free-form mask.
        #[arg(long, default_value_t = 4)]
        strokes: usize,
        /// Keep only masks whose area falls in this interval (0..6).
        #[arg(long)]
        area_interval: Option<usize>,
    },
    /// Predict the corruption mask of one image.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Binary mask output (PGM).
        #[arg(long)]
        out: PathBuf,
        /// Optional probability map output (PGM).
        #[arg(long)]
        prob: Option<PathBuf>,
    },
    /// Restore one image; without `--mask` the mask is detected first.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        /// 68 `x y` lines in pixels; the template is used when omitted.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train on a manifest (detector stage, then joint stage by default).
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// `key = value` file; flags below take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Start from a checkpoint instead of fresh weights.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// detector | joint | inpainter | two_stage
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// toy | full
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        image_size: Option<usize>,
        /// celeba_hq | celeba
        #[arg(long)]
        loss_preset: Option<String>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Any config key, as `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score restored images against ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Ground-truth masks; they define the area interval of each sample.
        #[arg(long)]
        mask_dir: PathBuf,
        /// Predicted mask probabilities, for MAE and IoU.
        #[arg(long)]
        pred_mask_dir: Option<PathBuf>,
        /// Report path; printed when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable block.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump input, high-pass, edge, attention and mask panels.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let _ = e.print();
                    2
                }
            };
        }
    };
    match dispatch(cli.cmd, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Synth {
            gt_dir,
            fill,
            mask,
            count,
            seed,
            out_dir,
            size,
            strokes,
            area_interval,
        } => {
            let job = SynthJob {
                gt: list_images(gt_dir.as_deref())?,
                fill: parse_fill(&fill)?,
                mask: parse_mask(&mask, strokes)?,
                size,
                seed,
                area_interval,
            };
            let n = job.write(&out_dir, count)?;
            say(out, format!("wrote {n} samples to {}", out_dir.display()))?;
        }
        Command::Detect {
            checkpoint,
            image,
            out: path,
            prob,
        } => {
            let models = Models::load(&checkpoint)?;
            let img = load_for(&models, &image)?;
            let det = models.detector.detect(&models.det_params, &img)?;
            let m = det.mask();
            create_parent(&path)?;
            pnm::save_mask(&path, &m)?;
            if let Some(p) = prob {
                create_parent(&p)?;
                let (h, w) = (m.height(), m.width());
                pnm::save_image(&p, &Image::new(h, w, 1, det.mask_prob.data().to_vec())?)?;
            }
            say(out, format!("mask area {:.4} -> {}", m.area_fraction(), path.display()))?;
        }
        Command::Inpaint {
            checkpoint,
            image,
            mask,
            landmarks,
            out_dir,
        } => {
            let models = Models::load(&checkpoint)?;
            let img = load_for(&models, &image)?;
            let (h, w) = (img.height(), img.width());
            create_dir(&out_dir)?;
            let m = match mask {
                Some(p) => pnm::load_mask(&p, Some((h, w)))?,
                None => {
                    let m = models.detector.detect(&models.det_params, &img)?.mask();
                    let p = out_dir.join("mask.pgm");
                    pnm::save_mask(&p, &m)?;
                    say(out, format!("detected mask -> {}", p.display()))?;
                    m
                }
            };
            let lm = match landmarks {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    let pts: Vec<(f64, f64)> = parse_landmarks(&text)?
                        .into_iter()
                        .map(|(x, y)| (x / w as f64, y / h as f64))
                        .collect();
                    LandmarkMap::render(&pts, h, w, HEATMAP_SIGMA)
                }
                None => LandmarkMap::template(h, w),
            };
            let masked = binary_masked(&img, &m)?;
            let restored = models.inpainter.generate(&models.gen_params, &masked, &m, &lm)?;
            let p = out_dir.join("restored.ppm");
            pnm::save_image(&p, &restored)?;
            say(out, format!("restored -> {}", p.display()))?;
        }
        Command::Train {
            manifest,
            config,
            out_dir,
            resume,
            stage,
            steps,
            seed,
            batch_size,
            model,
            image_size,
            loss_preset,
            checkpoint_every,
            set,
        } => {
            let mut cfg = TrainConfig::default();
            if let Some(p) = config {
                cfg.apply(&read_kv(&p)?)?;
            }
            let flags = [
                ("loss_preset", loss_preset),
                ("stage", stage),
                ("steps", steps.map(|v| v.to_string())),
                ("seed", seed.map(|v| v.to_string())),
                ("batch_size", batch_size.map(|v| v.to_string())),
                ("model", model),
                ("image_size", image_size.map(|v| v.to_string())),
                ("checkpoint_every", checkpoint_every.map(|v| v.to_string())),
            ];
            for (k, v) in flags {
                if let Some(v) = v {
                    cfg.set(k, &v)?;
                }
            }
            for kv in &set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{kv}'")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            let models = match resume {
                Some(p) => {
                    let m = Models::load(&p)?;
                    if m.spec != cfg.spec() {
                        return Err(Error::Config(format!(
                            "checkpoint model {:?} differs from configured {:?}",
                            m.spec,
                            cfg.spec()
                        )));
                    }
                    m
                }
                None => Models::init(cfg.spec(), cfg.seed)?,
            };
            let data = Dataset::from_manifest(&Manifest::load(&manifest)?, cfg.image_size)?;
            let res = train_two_stage(&cfg, models, &data, Some(&out_dir))?;
            if let Some(last) = res.log.rows.last() {
                say(out, format!("step {} {} total {}", last.step, last.stage.name(), last.total))?;
            }
            if let Some(p) = res.checkpoints.last() {
                say(out, format!("checkpoint -> {}", p.display()))?;
            }
        }
        Command::Eval {
            pred_dir,
            gt_dir,
            mask_dir,
            pred_mask_dir,
            out: path,
        } => {
            let report = evaluate(&pred_dir, &gt_dir, &mask_dir, pred_mask_dir.as_deref())?;
            let tsv = report.to_tsv();
            match path {
                Some(p) => {
                    create_parent(&p)?;
                    std::fs::write(&p, &tsv).map_err(|e| Error::io(&p, e))?;
                    say(out, format!("{} rows -> {}", report.rows.len(), p.display()))?;
                }
                None => write_out(out, &tsv)?,
            }
        }
        Command::Gradcheck { seed } => {
            let reports = gradsuite::run(seed)?;
            write_out(out, &gradsuite::format_report(&reports))?;
            let failed = reports.iter().filter(|r| !r.passes(gradsuite::TOLERANCE)).count();
            if failed > 0 {
                eprintln!("{failed} block(s) above tolerance {:e}", gradsuite::TOLERANCE);
                return Ok(1);
            }
        }
        Command::Visualize {
            checkpoint,
            image,
            out_dir,
        } => {
            let models = Models::load(&checkpoint)?;
            let img = load_for(&models, &image)?;
            let panels = visualize::panels(&models.detector, &models.det_params, &img)?;
            for p in visualize::save_panels(&panels, &out_dir)? {
                say(out, p.display().to_string())?;
            }
        }
    }
    Ok(0)
}

fn say(out: &mut dyn Write, line: String) -> Result<()> {
    write_out(out, &format!("{line}\n"))
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => create_dir(d),
        _ => Ok(()),
    }
}

/// Loads an image at the model's input size as RGB.
fn load_for(models: &Models, path: &Path) -> Result<Image> {
    let size = Some((models.spec.height, models.spec.width));
    Ok(pnm::load_image_sized(path, size, Resize::Bilinear)?.to_rgb())
}

fn is_pnm(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm" | "pnm"))
}

/// PNM files of `dir`, sorted by name.
fn list_images(dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    let Some(dir) = dir else { return Ok(Vec::new()) };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_pnm(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no PPM/PGM files in {}", dir.display())));
    }
    Ok(files)
}

enum FillArg {
    Constant(f64),
    Dir(Vec<PathBuf>),
}

enum MaskArg {
    Block,
    Freeform(usize),
    Dir(Vec<PathBuf>),
}

fn parse_fill(s: &str) -> Result<FillArg> {
    match s.split_once(':') {
        Some(("constant", v)) => {
            let v: f64 = v.parse().map_err(|_| Error::Config(format!("bad constant fill '{v}'")))?;
            FillSource::constant(v)?;
            Ok(FillArg::Constant(v))
        }
        Some(("dir", p)) => Ok(FillArg::Dir(list_images(Some(Path::new(p)))?)),
        _ => Err(Error::Config(format!("--fill expects constant:<v> or dir:<path>, got '{s}'"))),
    }
}

fn parse_mask(s: &str, strokes: usize) -> Result<MaskArg> {
    match s {
        "block" => Ok(MaskArg::Block),
        "freeform" => Ok(MaskArg::Freeform(strokes)),
        _ => match s.split_once(':') {
            Some(("dir", p)) => Ok(MaskArg::Dir(list_images(Some(Path::new(p)))?)),
            _ => Err(Error::Config(format!("--mask expects block, freeform or dir:<path>, got '{s}'"))),
        },
    }
}

struct SynthJob {
    gt: Vec<PathBuf>,
    fill: FillArg,
    mask: MaskArg,
    size: usize,
    seed: u64,
    area_interval: Option<usize>,
}

impl SynthJob {
    /// Sample `i` uses seed `seed ^ i`; mask and fill files are drawn independently.
    fn sample(&self, i: usize) -> Result<(Image, BinaryMask, Image)> {
        let s = self.size;
        let frame = Some((s, s));
        let sample_seed = self.seed ^ i as u64;
        let gt = if self.gt.is_empty() {
            synthetic_face(s, s, sample_seed)
        } else {
            pnm::load_image_sized(&self.gt[i % self.gt.len()], frame, Resize::Bilinear)?.to_rgb()
        };
        let (n_masks, n_fills) = (
            match &self.mask {
                MaskArg::Dir(v) => v.len(),
                _ => 1,
            },
            match &self.fill {
                FillArg::Dir(v) => v.len(),
                _ => 1,
            },
        );
        let (mi, fi) = select_pair(self.seed, i as u64, n_masks, n_fills);
        let mask = match &self.mask {
            MaskArg::Block => gen_block_mask((s, s), sample_seed),
            MaskArg::Freeform(strokes) => MaskSpec {
                kind: MaskKind::Freeform {
                    strokes: *strokes,
                    brush: BrushParams::default(),
                },
                area_interval: self.area_interval,
                seed: sample_seed,
            }
            .generate((s, s))?,
            MaskArg::Dir(v) => pnm::load_mask(&v[mi], frame)?,
        };
        let fill = match &self.fill {
            FillArg::Constant(v) => FillSource::Constant(*v),
            FillArg::Dir(v) => FillSource::Image(pnm::load_image_sized(&v[fi], frame, Resize::Bilinear)?.to_rgb()),
        };
        Ok((blend(&gt, &mask, &fill)?, mask, gt))
    }

    fn write(&self, dir: &Path, count: usize) -> Result<usize> {
        for sub in ["corrupted", "mask", "gt"] {
            create_dir(&dir.join(sub))?;
        }
        let results = exec::map_indices(count, |i| -> Result<Triplet> {
            let (corrupted, mask, gt) = self.sample(i)?;
            let t = Triplet {
                corrupted: PathBuf::from(format!("corrupted/{i:05}.ppm")),
                mask: PathBuf::from(format!("mask/{i:05}.pgm")),
                gt: PathBuf::from(format!("gt/{i:05}.ppm")),
            };
            pnm::save_image(&dir.join(&t.corrupted), &corrupted)?;
            pnm::save_mask(&dir.join(&t.mask), &mask)?;
            pnm::save_image(&dir.join(&t.gt), &gt)?;
            Ok(t)
        });
        let m = Manifest {
            root: dir.to_path_buf(),
            entries: results.into_iter().collect::<Result<Vec<_>>>()?,
        };
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, m.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(m.len())
    }
}

/// File in `dir` whose stem is `stem`, preferring PNM extensions.
fn find_by_stem(dir: &Path, stem: &str) -> Result<PathBuf> {
    for ext in ["ppm", "pgm", "pnm"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Config(format!("no image named {stem} in {}", dir.display())))
}

/// One row per ground-truth image, matched to the other directories by file stem.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, mask_dir: &Path, pred_mask_dir: Option<&Path>) -> Result<EvalReport> {
    let gts = list_images(Some(gt_dir))?;
    let fx = FeatureExtractor::new(FEATURE_SEED);
    let rows = exec::map_indices(gts.len(), |i| -> Result<SampleRow> {
        let gt_path = &gts[i];
        let stem = gt_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let gt = pnm::load_image(gt_path)?.to_rgb();
        let pred = pnm::load_image(&find_by_stem(pred_dir, &stem)?)?.to_rgb();
        let mask = pnm::load_mask(&find_by_stem(mask_dir, &stem)?, Some((gt.height(), gt.width())))?;
        let (mae, iou) = match pred_mask_dir {
            Some(d) => {
                let prob = pnm::load_image_sized(&find_by_stem(d, &stem)?, Some((mask.height(), mask.width())), Resize::Nearest)?;
                let prob: Vec<f64> = prob.luma().data().to_vec();
                let hard = BinaryMask::threshold(mask.height(), mask.width(), &prob, crate::maskdetect::MASK_THRESHOLD)?;
                (Some(metrics::mask_mae(&prob, &mask)?), Some(metrics::mask_iou(&hard, &mask)?.value))
            }
            None => (None, None),
        };
        Ok(SampleRow {
            id: stem,
            interval: classify_area(&mask)?,
            psnr: Some(metrics::psnr(&pred, &gt)?.value),
            ssim: Some(metrics::ssim(&pred, &gt)?),
            mae,
            iou,
            ics: Some(metrics::ics(&pred, &gt, &fx)?.value),
        })
    });
    let mut report = EvalReport::default();
    for r in rows {
        report.push(r?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = run(std::iter::once("ftdr").chain(args.iter().copied()), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_capture(&["frobnicate"]).0, 2);
        assert_eq!(run_capture(&["gradcheck", "--bogus"]).0, 2);
        assert_eq!(run_capture(&["--help"]).0, 0);
    }

    #[test]
    fn runtime_errors_exit_one() {
        let code = run_capture(&["detect", "--checkpoint", "/nonexistent.ftdr", "--image", "x.ppm", "--out", "m.pgm"]).0;
        assert_eq!(code, 1);
    }

    #[test]
    fn synth_then_eval_identity() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        let (code, _) = run_capture(&["synth", "--out-dir", d, "--count", "3", "--size", "32", "--mask", "block"]);
        assert_eq!(code, 0);
        let m = Manifest::load(dir.path()).unwrap();
        assert_eq!(m.len(), 3);
        let gt = dir.path().join("gt");
        let report = evaluate(&gt, &gt, &dir.path().join("mask"), None).unwrap();
        assert!(report.rows.iter().all(|r| r.psnr == Some(100.0) && r.ssim == Some(1.0)));
        assert!(report.rows.iter().all(|r| r.interval == 2));
    }
}
