//! Training loops: detector stage, joint stage and a generator-only stage.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::{Stage, TrainConfig};
use super::manifest::Manifest;
use super::models::Models;
use super::pnm::{self, Resize};
use crate::adversary::{lsgan_discriminator_loss, lsgan_generator_loss};
use crate::error::{Error, Result};
use crate::frequency::frequency_representation;
use crate::image::{stack, BinaryMask, Image};
use crate::inpaint::LandmarkMap;
use crate::losses::{
    perceptual_loss, reconstruction_loss, style_loss, total_loss, tv_loss, FeatureExtractor, LossTerms,
};
use crate::maskdetect::{detection_loss, MASK_THRESHOLD};
use crate::tensor::{concat, Adam, AdamConfig, Graph, Params, Tensor, Var};

/// Seed of the frozen feature backbone used by the perceptual and style terms.
pub const FEATURE_SEED: u64 = 0x000F_0EA7;

pub const LOG_HEADER: &str = "step\tstage\tdet\trecons\tadv\tperc\tstyle\ttv\ttotal\tdisc";

#[derive(Debug, Clone)]
pub struct Sample {
    pub corrupted: Image,
    pub mask: BinaryMask,
    pub gt: Image,
    pub landmarks: LandmarkMap,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Config("empty dataset".into()))?;
        let (h, w) = (first.gt.height(), first.gt.width());
        for (i, s) in samples.iter().enumerate() {
            let ok = [s.corrupted.height(), s.gt.height(), s.mask.height()] == [h; 3]
                && [s.corrupted.width(), s.gt.width(), s.mask.width()] == [w; 3]
                && s.corrupted.channels() == 3
                && s.gt.channels() == 3;
            if !ok {
                return Err(Error::contract(format!("sample {i} does not match the {h}x{w} RGB frame")));
            }
        }
        Ok(Self { samples })
    }

    /// Loads every triplet at `size x size`; landmarks come from the template.
    pub fn from_manifest(m: &Manifest, size: usize) -> Result<Self> {
        let frame = Some((size, size));
        let lm = LandmarkMap::template(size, size);
        let samples = m
            .entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    corrupted: pnm::load_image_sized(&m.resolve(&e.corrupted), frame, Resize::Bilinear)?.to_rgb(),
                    mask: pnm::load_mask(&m.resolve(&e.mask), frame)?,
                    gt: pnm::load_image_sized(&m.resolve(&e.gt), frame, Resize::Bilinear)?.to_rgb(),
                    landmarks: lm.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn frame(&self) -> (usize, usize) {
        (self.samples[0].gt.height(), self.samples[0].gt.width())
    }
}

/// One log line; `None` prints as `NA`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub stage: Stage,
    pub det: Option<f64>,
    /// recons, adv, perc, style, tv.
    pub terms: Option<[f64; 5]>,
    pub total: f64,
    pub disc: Option<f64>,
}

impl LogRow {
    fn is_finite(&self) -> bool {
        let terms = self.terms.is_none_or(|t| t.iter().all(|v| v.is_finite()));
        self.total.is_finite() && terms && self.det.is_none_or(f64::is_finite) && self.disc.is_none_or(f64::is_finite)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let na = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            let t = r.terms.map_or([None; 5], |t| t.map(Some));
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.step,
                r.stage.name(),
                na(r.det),
                na(t[0]),
                na(t[1]),
                na(t[2]),
                na(t[3]),
                na(t[4]),
                r.total,
                na(r.disc)
            );
        }
        s
    }
}

/// Stacked tensors for one minibatch.
struct Batch {
    corrupted: Tensor,
    freq: Tensor,
    mask: Tensor,
    gt: Tensor,
    landmarks: Tensor,
}

pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub models: Models,
    pub log: TrainLog,
    data: &'d Dataset,
    freq: Vec<Tensor>,
    fx: FeatureExtractor,
    opt_det: Adam,
    opt_gen: Adam,
    opt_disc: Adam,
    step: usize,
    out_dir: Option<PathBuf>,
    checkpoints: Vec<PathBuf>,
}

impl<'d> Trainer<'d> {
    /// With `out_dir`, the initial weights are written as `step_000000.ftdr`
    /// so an abort always has a checkpoint to point at.
    pub fn new(cfg: TrainConfig, models: Models, data: &'d Dataset, out_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        if data.frame() != models.detector.input_size() {
            return Err(Error::Config(format!(
                "data frame {:?} does not match model input {:?}",
                data.frame(),
                models.detector.input_size()
            )));
        }
        let hp = models.detector.cfg.high_pass;
        let freq = data
            .samples()
            .iter()
            .map(|s| {
                let (h, w) = (s.corrupted.height(), s.corrupted.width());
                frequency_representation(&s.corrupted, hp).reshape(&[1, 1, h, w])
            })
            .collect::<Result<Vec<_>>>()?;
        let adam = |lr| {
            Adam::new(AdamConfig {
                lr,
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                ..AdamConfig::with_lr(lr)
            })
        };
        let mut t = Self {
            opt_det: adam(cfg.lr_detector),
            opt_gen: adam(cfg.lr_generator),
            opt_disc: adam(cfg.lr_discriminator),
            cfg,
            models,
            log: TrainLog::default(),
            data,
            freq,
            fx: FeatureExtractor::new(FEATURE_SEED),
            step: 0,
            out_dir: out_dir.map(Path::to_path_buf),
            checkpoints: Vec::new(),
        };
        if let Some(dir) = &t.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            t.checkpoint("step_000000.ftdr")?;
        }
        Ok(t)
    }

    pub fn checkpoints(&self) -> &[PathBuf] {
        &self.checkpoints
    }

    /// Global step counter across stages.
    pub fn step(&self) -> usize {
        self.step
    }

    fn checkpoint(&mut self, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let path = dir.join(name);
            self.models.save(&path)?;
            self.checkpoints.push(path);
        }
        Ok(())
    }

    fn write_log(&self) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let path = dir.join("train.tsv");
            std::fs::write(&path, self.log.to_tsv()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Runs `steps` updates of `stage`.
    pub fn run(&mut self, stage: Stage, steps: usize) -> Result<()> {
        let b = self.cfg.batch(stage);
        for s in 0..steps {
            let batch = self.batch(s, b)?;
            let row = match stage {
                Stage::Detector => self.detector_step(&batch)?,
                Stage::Joint | Stage::Inpainter => self.generator_step(&batch, stage)?,
            };
            if !row.is_finite() {
                self.write_log()?;
                let last_good = self
                    .checkpoints
                    .last()
                    .map_or("none".to_string(), |p| p.display().to_string());
                return Err(Error::NonFinite { step: self.step, last_good });
            }
            self.log.rows.push(row);
            self.step += 1;
            if self.cfg.checkpoint_every > 0 && self.step.is_multiple_of(self.cfg.checkpoint_every) {
                self.checkpoint(&format!("step_{:06}.ftdr", self.step))?;
            }
        }
        Ok(())
    }

    /// Writes `final.ftdr` and the log.
    pub fn finish(&mut self) -> Result<()> {
        self.checkpoint("final.ftdr")?;
        self.write_log()
    }

    /// Batch `s` takes samples `s*b .. s*b + b`, wrapping around the dataset.
    fn batch(&self, s: usize, b: usize) -> Result<Batch> {
        let n = self.data.len();
        let idx: Vec<usize> = (0..b).map(|j| (s * b + j) % n).collect();
        let pick = |f: &dyn Fn(usize) -> Tensor| stack(&idx.iter().map(|&i| f(i)).collect::<Vec<_>>());
        let smp = self.data.samples();
        Ok(Batch {
            corrupted: pick(&|i| smp[i].corrupted.to_nchw())?,
            freq: pick(&|i| self.freq[i].clone())?,
            mask: pick(&|i| smp[i].mask.to_tensor())?,
            gt: pick(&|i| smp[i].gt.to_nchw())?,
            landmarks: pick(&|i| smp[i].landmarks.to_nchw())?,
        })
    }

    fn detector_step(&mut self, batch: &Batch) -> Result<LogRow> {
        let (loss, grads) = {
            let g = Graph::new();
            let p = Params::new(&g, &self.models.det_params);
            let tr = self
                .models
                .detector
                .forward(&p, g.constant(batch.corrupted.clone()), g.constant(batch.freq.clone()))?;
            let loss = detection_loss(tr.prob, &batch.mask)?;
            g.backward(loss)?;
            (loss.value().item(), p.grads())
        };
        if loss.is_finite() {
            self.opt_det.step(&mut self.models.det_params, &grads)?;
        }
        Ok(LogRow {
            step: self.step,
            stage: Stage::Detector,
            det: Some(loss),
            terms: None,
            total: loss,
            disc: None,
        })
    }

    /// Generator update, then a discriminator update on the same batch.
    ///
    /// In the joint stage the detector's hard mask drives the generator; its
    /// gradient reaches the detector through a straight-through path on the
    /// masked input image.
    fn generator_step(&mut self, batch: &Batch, stage: Stage) -> Result<LogRow> {
        let joint = stage == Stage::Joint;
        let w = self.cfg.weights;
        let use_disc = w.adv > 0.0;
        let (row, fake, det_grads, gen_grads) = {
            let g = Graph::new();
            let pd = Params::new(&g, &self.models.det_params);
            let pg = Params::new(&g, &self.models.gen_params);
            let pc = Params::frozen(&g, &self.models.disc_params);
            let x = &batch.corrupted;
            let (image_in, mask, det_loss) = if joint {
                let tr = self
                    .models
                    .detector
                    .forward(&pd, g.constant(x.clone()), g.constant(batch.freq.clone()))?;
                let hard = tr.prob.value().map(|v| if v > MASK_THRESHOLD { 1.0 } else { 0.0 });
                let keep = x.map(|v| 1.0 - v);
                let base = g.constant(paint_white(x, &hard));
                let st = tr.prob.sub(tr.prob.detach())?.mul(g.constant(keep))?;
                let det = detection_loss(tr.prob, &batch.mask)?;
                (base.add(st)?, hard, Some(det))
            } else {
                (g.constant(paint_white(x, &batch.mask)), batch.mask.clone(), None)
            };
            let tr = self.models.inpainter.forward(&pg, image_in, &mask, &batch.landmarks)?;
            let out = tr.output;
            let gt = g.constant(batch.gt.clone());
            let lm = g.constant(batch.landmarks.clone());
            let terms = LossTerms {
                recons: term(&g, w.recons, || reconstruction_loss(out, gt, &mask))?,
                adv: term(&g, w.adv, || {
                    let d = self.models.disc.forward(&pc, concat(&[out, lm], 1)?)?;
                    Ok(lsgan_generator_loss(d))
                })?,
                perc: term(&g, w.perc, || perceptual_loss(out, gt, &self.fx))?,
                style: term(&g, w.style, || style_loss(out, gt, &mask, &self.fx))?,
                tv: term(&g, w.tv, || tv_loss(out))?,
            };
            let mut total = total_loss(&terms, &w)?;
            if let Some(d) = det_loss {
                total = total.add(d.scale(self.cfg.detection_weight))?;
            }
            g.backward(total)?;
            let row = LogRow {
                step: self.step,
                stage,
                det: det_loss.map(|d| d.value().item()),
                terms: Some(terms.values()),
                total: total.value().item(),
                disc: None,
            };
            let det_grads = if joint { Some(pd.grads()) } else { None };
            (row, (*out.value()).clone(), det_grads, pg.grads())
        };
        if !row.is_finite() {
            return Ok(row);
        }
        self.opt_gen.step(&mut self.models.gen_params, &gen_grads)?;
        if let Some(dg) = det_grads {
            self.opt_det.step(&mut self.models.det_params, &dg)?;
        }
        let disc = if use_disc { Some(self.discriminator_step(&fake, batch)?) } else { None };
        Ok(LogRow { disc, ..row })
    }

    fn discriminator_step(&mut self, fake: &Tensor, batch: &Batch) -> Result<f64> {
        let (loss, grads) = {
            let g = Graph::new();
            let p = Params::new(&g, &self.models.disc_params);
            let lm = g.constant(batch.landmarks.clone());
            let d_fake = self.models.disc.forward(&p, concat(&[g.constant(fake.clone()), lm], 1)?)?;
            let d_real = self.models.disc.forward(&p, concat(&[g.constant(batch.gt.clone()), lm], 1)?)?;
            let loss = lsgan_discriminator_loss(d_fake, d_real, self.cfg.lsgan_standard)?;
            g.backward(loss)?;
            (loss.value().item(), p.grads())
        };
        if loss.is_finite() {
            self.opt_disc.step(&mut self.models.disc_params, &grads)?;
            self.models.disc.power_step(&self.models.disc_params)?;
        }
        Ok(loss)
    }
}

/// Terms with zero weight are not evaluated.
fn term<'g>(g: &'g Graph, weight: f64, f: impl FnOnce() -> Result<Var<'g>>) -> Result<Var<'g>> {
    if weight > 0.0 {
        f()
    } else {
        Ok(g.constant(Tensor::scalar(0.0)))
    }
}

/// `x * (1 - m) + m` for `[n, c, h, w]` images and `[n, 1, h, w]` masks.
fn paint_white(x: &Tensor, m: &Tensor) -> Tensor {
    let s = x.shape();
    let (c, plane) = (s[1], s[2] * s[3]);
    Tensor::from_fn(s, |i| {
        let k = (i / (c * plane)) * plane + i % plane;
        if m.data()[k] == 1.0 {
            1.0
        } else {
            x.data()[i]
        }
    })
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub models: Models,
    pub log: TrainLog,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs the configured stage, or the detector stage followed by the joint
/// stage when none is set. Each stage runs `cfg.steps` updates.
pub fn train_two_stage(cfg: &TrainConfig, models: Models, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let stages = match cfg.stage {
        Some(s) => vec![s],
        None => vec![Stage::Detector, Stage::Joint],
    };
    let mut t = Trainer::new(cfg.clone(), models, data, out_dir)?;
    for s in stages {
        t.run(s, cfg.steps)?;
    }
    t.finish()?;
    Ok(TrainOutcome {
        checkpoints: t.checkpoints.clone(),
        log: t.log,
        models: t.models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{blend, gen_block_mask, FillSource};
    use crate::harness::config::{ModelSize, ModelSpec};
    use crate::losses::LossWeights;
    use crate::rng::SplitMix64;

    fn data(n: usize, s: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let mut r = SplitMix64::new(i as u64);
                let gt = Image::from_fn(s, s, 3, |_, _, _| r.next_f64());
                let mask = gen_block_mask((s, s), i as u64);
                Sample {
                    corrupted: blend(&gt, &mask, &FillSource::Constant(0.2)).unwrap(),
                    mask,
                    gt,
                    landmarks: LandmarkMap::template(s, s),
                }
            })
            .collect();
        Dataset::new(samples).unwrap()
    }

    fn cfg(stage: Option<Stage>, steps: usize) -> TrainConfig {
        TrainConfig {
            stage,
            steps,
            batch_size: Some(2),
            model: ModelSize::Toy,
            image_size: 32,
            ..TrainConfig::default()
        }
    }

    fn models(seed: u64) -> Models {
        Models::init(cfg(None, 0).spec(), seed).unwrap()
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let d = data(2, 32);
        let m = models(1);
        let init = m.to_store();
        let out = train_two_stage(&cfg(None, 0), m, &d, None).unwrap();
        assert_eq!(out.models.to_store(), init);
        assert!(out.log.rows.is_empty());
    }

    #[test]
    fn two_stage_logs_every_term_and_is_repeatable() {
        let d = data(3, 32);
        let run = || train_two_stage(&cfg(None, 2), models(4), &d, None).unwrap();
        let a = run();
        let tsv = a.log.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[1].contains("\tdetector\t") && lines[1].ends_with("\tNA"));
        assert!(lines[3].contains("\tjoint\t") && !lines[3].contains("NA"));
        assert_eq!(run().log.to_tsv(), tsv);
    }

    #[test]
    fn generator_step_leaves_discriminator_alone() {
        let d = data(2, 32);
        let m = models(2);
        let disc_before = m.disc_params.clone();
        let mut t = Trainer::new(cfg(Some(Stage::Inpainter), 1), m, &d, None).unwrap();
        let batch = t.batch(0, 2).unwrap();
        let gen_before = t.models.gen_params.clone();
        // Zero adversarial weight skips the discriminator update entirely.
        t.cfg.weights = LossWeights { adv: 0.0, ..t.cfg.weights };
        let row = t.generator_step(&batch, Stage::Inpainter).unwrap();
        assert_eq!(row.disc, None);
        assert_eq!(t.models.disc_params, disc_before);
        assert_ne!(t.models.gen_params, gen_before);
        let gen_mid = t.models.gen_params.clone();
        t.discriminator_step(&batch.gt, &batch).unwrap();
        assert_eq!(t.models.gen_params, gen_mid);
        assert_ne!(t.models.disc_params, disc_before);
    }

    #[test]
    fn non_finite_loss_aborts_with_last_checkpoint() {
        let d = data(2, 32);
        let mut m = models(0);
        m.det_params.get_mut("det.stem.weight").unwrap().data_mut()[0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(cfg(Some(Stage::Detector), 3), m, &d, Some(dir.path())).unwrap();
        match t.run(Stage::Detector, 3) {
            Err(Error::NonFinite { last_good, .. }) => assert!(last_good.ends_with("step_000000.ftdr")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn spec_matches_trainer_frame() {
        let d = data(1, 32);
        let spec = ModelSpec {
            height: 64,
            width: 64,
            ..cfg(None, 0).spec()
        };
        let m = Models::init(spec, 0).unwrap();
        assert!(Trainer::new(cfg(None, 1), m, &d, None).is_err());
    }
}
