//! Diagnostic panels: input, high-pass map, edge map, attention and mask.

use std::path::{Path, PathBuf};

use super::pnm;
use crate::error::{Error, Result};
use crate::frequency::frequency_representation;
use crate::image::Image;
use crate::maskdetect::Detector;
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct Panels {
    pub input: Image,
    /// High-pass representation rescaled to `[0, 1]`.
    pub frequency: Image,
    pub edge: Image,
    /// Last-layer dual attention, one `[P, P]` panel per head.
    pub attention: Vec<Image>,
    pub mask_prob: Image,
    pub mask: Image,
}

/// Min-max rescale of a rank-2 slice into a grayscale image; constant input maps to 0.
pub fn rescale(values: &[f64], height: usize, width: usize) -> Result<Image> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = values
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    Image::new(height, width, 1, data)
}

fn plane(t: &Tensor) -> Result<Image> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if t.len() != h * w {
        return Err(Error::contract(format!("expected a single plane, got {s:?}")));
    }
    Image::new(h, w, 1, t.data().to_vec())
}

pub fn panels(det: &Detector, store: &ParamStore, image: &Image) -> Result<Panels> {
    let out = det.detect(store, image)?;
    let f = frequency_representation(&image.to_rgb(), det.cfg.high_pass);
    let (h, w) = (image.height(), image.width());
    let a = &out.attention;
    let (heads, pp) = (a.shape()[0], a.shape()[1]);
    let attention = (0..heads)
        .map(|k| rescale(&a.data()[k * pp * pp..(k + 1) * pp * pp], pp, pp))
        .collect::<Result<Vec<_>>>()?;
    let e = &out.edge_map;
    Ok(Panels {
        input: image.clone(),
        frequency: rescale(f.data(), h, w)?,
        edge: rescale(e.data(), e.shape()[0], e.shape()[1])?,
        attention,
        mask_prob: plane(&out.mask_prob)?,
        mask: out.mask().to_image(),
    })
}

/// Writes every panel into `dir` and returns the paths in panel order.
pub fn save_panels(p: &Panels, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![
        ("a_input.ppm".to_string(), &p.input),
        ("b_frequency.pgm".to_string(), &p.frequency),
        ("c_edge.pgm".to_string(), &p.edge),
    ];
    for (k, a) in p.attention.iter().enumerate() {
        files.push((format!("d_attention_head{k}.pgm"), a));
    }
    files.push(("e_mask_prob.pgm".to_string(), &p.mask_prob));
    files.push(("f_mask.pgm".to_string(), &p.mask));
    files
        .into_iter()
        .map(|(name, img)| {
            let path = dir.join(name);
            pnm::save_image(&path, img)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskdetect::DetectorConfig;
    use crate::rng::SplitMix64;

    #[test]
    fn rescale_spans_unit_interval() {
        let img = rescale(&[2.0, 4.0, 3.0, 2.0], 2, 2).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 0.5, 0.0]);
        assert!(rescale(&[1.0; 4], 2, 2).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn panel_set_is_complete() {
        let det = Detector::new(DetectorConfig::toy(), 32, 32).unwrap();
        let store = det.init_store(0);
        let mut r = SplitMix64::new(1);
        let img = Image::from_fn(32, 32, 3, |_, _, _| r.next_f64());
        let p = panels(&det, &store, &img).unwrap();
        assert_eq!(p.attention.len(), 2);
        assert_eq!((p.edge.height(), p.edge.width()), (4, 4));
        let dir = tempfile::tempdir().unwrap();
        let files = save_panels(&p, dir.path()).unwrap();
        assert_eq!(files.len(), 7);
        assert!(files.iter().all(|f| f.exists()));
    }
}
