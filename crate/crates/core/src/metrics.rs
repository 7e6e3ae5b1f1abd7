//! Restoration and detection metrics with per-interval aggregation.

use std::fmt::Write as _;

use crate::datagen::AREA_INTERVALS;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};
use crate::losses::FeatureExtractor;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// A metric value plus whether a degenerate-case convention produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    pub flagged: bool,
}

impl Score {
    fn plain(value: f64) -> Self {
        Self { value, flagged: false }
    }
}

fn same_image_dims(op: &str, a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::contract(format!(
            "{op}: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<Score> {
    same_image_dims("psnr", pred, gt)?;
    let n = pred.data().len() as f64;
    let mse = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let db = 10.0 * (1.0 / mse).log10();
    if db >= PSNR_CAP {
        return Ok(Score {
            value: PSNR_CAP,
            flagged: mse == 0.0,
        });
    }
    Ok(Score::plain(db))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for j in 0..ow {
            rows[y * ow + j] = (0..n).map(|t| k[t] * x[y * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma planes.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    same_image_dims("ssim", pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!("ssim: {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let (a, b) = (pred.luma(), gt.luma());
    let (a, b) = (a.data(), b.data());
    let k = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    Ok(total / n as f64)
}

/// `100 * mean |prob - gt|`.
pub fn mask_mae(prob: &[f64], gt: &BinaryMask) -> Result<f64> {
    if prob.len() != gt.data().len() {
        return Err(Error::contract(format!("mask_mae: {} vs {} pixels", prob.len(), gt.data().len())));
    }
    let s: f64 = prob.iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum();
    Ok(100.0 * s / prob.len() as f64)
}

/// `100 * |pred ∩ gt| / |pred ∪ gt|`; two empty masks score 100 (flagged).
pub fn mask_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<Score> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::contract("mask_iou: mask sizes differ"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == 1.0, g == 1.0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        return Ok(Score {
            value: 100.0,
            flagged: true,
        });
    }
    Ok(Score::plain(100.0 * inter as f64 / union as f64))
}

/// Globally pooled deepest-stage descriptor.
pub fn identity_descriptor(img: &Image, fx: &FeatureExtractor) -> Result<Vec<f64>> {
    let x: Tensor = img.to_rgb().to_nchw();
    let feats = fx.eval(&x)?;
    let deep = feats.last().expect("five stages");
    let s = deep.shape();
    let plane = s[2] * s[3];
    Ok(deep.data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect())
}

/// Cosine similarity of the identity descriptors; a zero descriptor scores 0 (flagged).
pub fn ics(pred: &Image, gt: &Image, fx: &FeatureExtractor) -> Result<Score> {
    same_image_dims("ics", pred, gt)?;
    let a = identity_descriptor(gt, fx)?;
    let b = identity_descriptor(pred, fx)?;
    Ok(cosine(&a, &b))
}

fn cosine(a: &[f64], b: &[f64]) -> Score {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Score {
            value: 0.0,
            flagged: true,
        };
    }
    Score::plain((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub id: String,
    pub interval: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub mae: Option<f64>,
    pub iou: Option<f64>,
    pub ics: Option<f64>,
}

impl SampleRow {
    fn columns(&self) -> [Option<f64>; 5] {
        [self.psnr, self.ssim, self.mae, self.iou, self.ics]
    }
}

pub const COLUMNS: [&str; 5] = ["psnr", "ssim", "mae", "iou", "ics"];

/// Aggregate of one area interval: row count and column means.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalMeans {
    pub interval: usize,
    pub count: usize,
    pub means: [Option<f64>; 5],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<SampleRow>,
}

pub fn interval_label(i: usize) -> String {
    format!("{}-{}%", i * 10, i * 10 + 10)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

impl EvalReport {
    pub fn push(&mut self, row: SampleRow) {
        self.rows.push(row);
    }

    fn means_of<'a>(rows: impl Iterator<Item = &'a SampleRow> + Clone) -> [Option<f64>; 5] {
        std::array::from_fn(|c| {
            let vals: Vec<f64> = rows.clone().filter_map(|r| r.columns()[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
    }

    /// Means per non-empty interval, in interval order.
    pub fn aggregates(&self) -> Vec<IntervalMeans> {
        (0..AREA_INTERVALS)
            .filter_map(|i| {
                let rows = self.rows.iter().filter(move |r| r.interval == i);
                let count = rows.clone().count();
                (count > 0).then(|| IntervalMeans {
                    interval: i,
                    count,
                    means: Self::means_of(rows),
                })
            })
            .collect()
    }

    pub fn overall(&self) -> [Option<f64>; 5] {
        Self::means_of(self.rows.iter())
    }

    /// Tab-separated rows followed by the per-interval block.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tinterval");
        for c in COLUMNS {
            let _ = write!(s, "\t{c}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}\t{}", r.id, interval_label(r.interval));
            for v in r.columns() {
                let _ = write!(s, "\t{}", fmt_opt(v));
            }
            s.push('\n');
        }
        s.push_str("\n# interval\tcount");
        for c in COLUMNS {
            let _ = write!(s, "\t{c}");
        }
        s.push('\n');
        for a in self.aggregates() {
            let _ = write!(s, "{}\t{}", interval_label(a.interval), a.count);
            for v in a.means {
                let _ = write!(s, "\t{}", fmt_opt(v));
            }
            s.push('\n');
        }
        let _ = write!(s, "all\t{}", self.rows.len());
        for v in self.overall() {
            let _ = write!(s, "\t{}", fmt_opt(v));
        }
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn noise(seed: u64, h: usize, w: usize) -> Image {
        let mut r = SplitMix64::new(seed);
        Image::from_fn(h, w, 3, |_, _, _| r.next_f64())
    }

    #[test]
    fn psnr_half_step() {
        let a = Image::filled(1, 1, 1, 0.0);
        let b = Image::filled(1, 1, 1, 0.5);
        assert!((psnr(&a, &b).unwrap().value - 6.0206).abs() < 1e-3);
        let same = psnr(&a, &a).unwrap();
        assert_eq!(same, Score { value: PSNR_CAP, flagged: true });
    }

    #[test]
    fn ssim_identity_symmetry_negative() {
        let a = Image::from_fn(32, 32, 1, |y, x, _| 0.5 + 0.3 * ((x as f64 * 0.7).sin() * (y as f64 * 0.4).cos()));
        let b = a.map(|v| 1.0 - v);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&a, &b).unwrap() < 0.5);
        let (c, d) = (noise(1, 16, 16), noise(2, 16, 16));
        assert!((ssim(&c, &d).unwrap() - ssim(&d, &c).unwrap()).abs() < 1e-12);
        assert!(ssim(&noise(1, 8, 8), &noise(2, 8, 8)).is_err());
    }

    #[test]
    fn window_is_normalized() {
        assert!((gaussian_window().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mask_metrics() {
        let left = BinaryMask::from_fn(8, 8, |_, x| x < 4);
        let top = BinaryMask::from_fn(8, 8, |y, _| y < 4);
        assert!((mask_iou(&top, &left).unwrap().value - 100.0 / 3.0).abs() < 0.01);
        assert_eq!(mask_iou(&left, &left).unwrap().value, 100.0);
        let empty = BinaryMask::zeros(8, 8);
        assert!(mask_iou(&empty, &empty).unwrap().flagged);
        let right = BinaryMask::from_fn(8, 8, |_, x| x >= 4);
        assert_eq!(mask_iou(&left, &right).unwrap().value, 0.0);
        assert_eq!(mask_mae(&[0.5; 64], &left).unwrap(), 50.0);
        assert_eq!(mask_mae(left.data(), &left).unwrap(), 0.0);
    }

    #[test]
    fn ics_identity_and_symmetry() {
        let fx = FeatureExtractor::with_channels(0, [4, 4, 8, 8, 8]);
        let (a, b) = (noise(1, 32, 32), noise(2, 32, 32));
        assert!((ics(&a, &a, &fx).unwrap().value - 1.0).abs() < 1e-12);
        assert_eq!(ics(&a, &b, &fx).unwrap().value, ics(&b, &a, &fx).unwrap().value);
        let zero = Image::filled(32, 32, 3, 0.0);
        assert!(ics(&zero, &a, &fx).unwrap().flagged);
    }

    #[test]
    fn report_aggregates_are_row_means() {
        let mut r = EvalReport::default();
        for (i, v) in [(0, 10.0), (0, 20.0), (3, 30.0)] {
            r.push(SampleRow {
                id: format!("s{v}"),
                interval: i,
                psnr: Some(v),
                ssim: None,
                mae: Some(1.0),
                iou: None,
                ics: None,
            });
        }
        let agg = r.aggregates();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].means[0], Some(15.0));
        assert_eq!(agg[0].count, 2);
        assert_eq!(agg[1].means[1], None);
        let tsv = r.to_tsv();
        assert!(tsv.starts_with("id\tinterval\tpsnr"));
        assert!(tsv.contains("0-10%\t2\t15.0000\tNA\t1.0000"));
    }
}
