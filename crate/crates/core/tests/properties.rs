use proptest::prelude::*;

use ftdr::adversary::{lsgan_discriminator_loss, lsgan_generator_loss, spectral_normalize, SpectralState};
use ftdr::datagen::{binary_masked, blend, classify_area, select_pair, BrushParams, FillSource, MaskKind, MaskSpec};
use ftdr::frequency::{dct2, frequency_representation, idct2, HighPassConfig};
use ftdr::harness::checkpoint;
use ftdr::image::{BinaryMask, Image};
use ftdr::inpaint::{region_normalize, Inpainter, InpainterConfig, LandmarkMap};
use ftdr::losses::{perceptual_loss, reconstruction_loss, style_loss, tv_loss, FeatureExtractor};
use ftdr::metrics::{mask_iou, mask_mae, psnr, ssim, EvalReport, SampleRow};
use ftdr::rng::SplitMix64;
use ftdr::tensor::{Graph, ParamStore, Tensor};

fn tensor(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let mut r = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| scale * r.uniform(-1.0, 1.0))
}

fn image(seed: u64, h: usize, w: usize) -> Image {
    let mut r = SplitMix64::new(seed);
    Image::from_fn(h, w, 3, |_, _, _| r.next_f64())
}

fn mask(seed: u64, h: usize, w: usize, density: f64) -> BinaryMask {
    let mut r = SplitMix64::new(seed);
    BinaryMask::from_fn(h, w, |_, _| r.next_f64() < density)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..500.0) {
        let g = Graph::new();
        let s = g.constant(tensor(seed, &[rows, cols], scale)).softmax(1).unwrap().value();
        for row in s.data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reshape_and_permute_round_trip(seed in any::<u64>(), a in 1usize..4, b in 1usize..4, c in 1usize..4, d in 1usize..4) {
        let t = tensor(seed, &[a, b, c, d], 1.0);
        let g = Graph::new();
        let x = g.constant(t.clone());
        let back = x
            .permute(&[2, 0, 3, 1]).unwrap()
            .reshape(&[c * a, d * b]).unwrap()
            .reshape(&[c, a, d, b]).unwrap()
            .permute(&[1, 3, 0, 2]).unwrap();
        prop_assert_eq!(&*back.value(), &t);
    }

    #[test]
    fn fan_out_gradients_add(seed in any::<u64>(), n in 1usize..12) {
        let (a, b) = (tensor(seed, &[n], 1.0), tensor(seed ^ 1, &[n], 1.0));
        let g = Graph::new();
        let x = g.param(tensor(seed ^ 2, &[n], 1.0));
        let loss = x.mul(g.constant(a.clone())).unwrap().sum()
            .add(x.mul(g.constant(b.clone())).unwrap().sum()).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        for i in 0..n {
            prop_assert_eq!(grad.data()[i], a.data()[i] + b.data()[i]);
        }
    }

    #[test]
    fn dct_inverts_and_preserves_energy(seed in any::<u64>(), h in 1usize..33, w in 1usize..33) {
        let x = tensor(seed, &[h, w], 1.0);
        let s = dct2(&x).unwrap();
        prop_assert!(idct2(&s).max_abs_diff(&x) < 1e-9);
        let e: f64 = x.data().iter().map(|v| v * v).sum();
        prop_assert!((s.energy() - e).abs() <= 1e-8 * e.max(1e-300));
    }

    #[test]
    fn frequency_representation_is_deterministic(seed in any::<u64>(), alpha in 0.01f64..0.99) {
        let img = image(seed, 16, 12);
        let cfg = HighPassConfig::new(alpha).unwrap();
        let a = frequency_representation(&img, cfg);
        let b = frequency_representation(&img.clone(), cfg);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn patch_similarity_is_bounded(seed in any::<u64>(), c in 1usize..5, h in 3usize..8, w in 3usize..8) {
        let g = Graph::new();
        let e = g.constant(tensor(seed, &[2, c, h, w], 3.0)).patch_similarity().unwrap().value();
        prop_assert!(e.data().iter().all(|&v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn region_normalize_standardizes_each_region(seed in any::<u64>(), density in 0.1f64..0.9, offset in -5.0f64..5.0) {
        let (c, h, w) = (2, 6, 7);
        let m = mask(seed, h, w, density);
        let x = tensor(seed ^ 3, &[c, h, w], 4.0).map(|v| v + offset);
        let y = region_normalize(&x, &m).unwrap();
        let plane = h * w;
        for ch in 0..c {
            for on in [true, false] {
                let vals: Vec<f64> = (0..plane)
                    .filter(|&i| (m.data()[i] == 1.0) == on)
                    .map(|i| y.data()[ch * plane + i])
                    .collect();
                if vals.len() < 2 {
                    continue;
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-6);
                prop_assert!((var - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn spectral_normalized_map_is_one_lipschitz(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8) {
        let w = tensor(seed, &[rows, cols], 2.0);
        let mut st = SpectralState::new(rows, cols, &mut SplitMix64::new(seed ^ 4));
        for _ in 0..50 {
            st.iterate(&w).unwrap();
        }
        let wn = spectral_normalize(&w, &mut st).unwrap();
        let mut r = SplitMix64::new(seed ^ 5);
        for _ in 0..8 {
            let d: Vec<f64> = (0..cols).map(|_| r.uniform(-1.0, 1.0)).collect();
            let out: f64 = (0..rows)
                .map(|i| (0..cols).map(|j| wn.data()[i * cols + j] * d[j]).sum::<f64>().powi(2))
                .sum::<f64>()
                .sqrt();
            let inp = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(out <= (1.0 + 1e-2) * inp);
        }
    }

    #[test]
    fn adversarial_losses_are_non_negative(seed in any::<u64>(), standard in any::<bool>()) {
        let g = Graph::new();
        let fake = g.constant(tensor(seed, &[2, 1, 3, 3], 3.0));
        let real = g.constant(tensor(seed ^ 6, &[2, 1, 3, 3], 3.0));
        prop_assert!(lsgan_generator_loss(fake).value().item() >= 0.0);
        prop_assert!(lsgan_discriminator_loss(fake, real, standard).unwrap().value().item() >= 0.0);
    }

    #[test]
    fn blend_keeps_unmasked_pixels(seed in any::<u64>(), h in 1usize..20, w in 1usize..20, density in 0.0f64..1.0, v in 0.0f64..1.0) {
        let gt = image(seed, h, w);
        let m = mask(seed ^ 7, h, w, density);
        let out = blend(&gt, &m, &FillSource::Constant(v)).unwrap();
        let white = binary_masked(&gt, &m).unwrap();
        for y in 0..h {
            for x in 0..w {
                if !m.get(y, x) {
                    for c in 0..3 {
                        prop_assert_eq!(out.get(y, x, c).to_bits(), gt.get(y, x, c).to_bits());
                        prop_assert_eq!(white.get(y, x, c).to_bits(), gt.get(y, x, c).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn mask_metrics_of_a_mask_with_itself(seed in any::<u64>(), density in 0.05f64..1.0) {
        let m = mask(seed, 9, 11, density);
        prop_assume!(m.count() > 0);
        prop_assert_eq!(mask_iou(&m, &m).unwrap().value, 100.0);
        prop_assert_eq!(mask_mae(m.data(), &m).unwrap(), 0.0);
    }

    #[test]
    fn report_aggregates_are_row_means(values in prop::collection::vec((0usize..6, 0.0f64..50.0, 0.0f64..1.0), 1..20)) {
        let mut report = EvalReport::default();
        for (i, (interval, p, s)) in values.iter().enumerate() {
            report.push(SampleRow { id: i.to_string(), interval: *interval, psnr: Some(*p), ssim: Some(*s), mae: None, iou: None, ics: None });
        }
        for agg in report.aggregates() {
            let rows: Vec<_> = values.iter().filter(|v| v.0 == agg.interval).collect();
            prop_assert_eq!(agg.count, rows.len());
            let mean = rows.iter().map(|v| v.1).sum::<f64>() / rows.len() as f64;
            prop_assert!((agg.means[0].unwrap() - mean).abs() < 1e-12);
            prop_assert_eq!(agg.means[2], None);
        }
        let total: usize = report.aggregates().iter().map(|a| a.count).sum();
        prop_assert_eq!(total, values.len());
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical(seed in any::<u64>(), n in 1usize..5) {
        let mut store = ParamStore::new();
        for i in 0..n {
            store.insert(format!("p{i}.weight"), tensor(seed ^ i as u64, &[i + 1, 3], 10.0));
        }
        let a = checkpoint::encode(&store).unwrap();
        let b = checkpoint::encode(&checkpoint::decode(&a).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn losses_are_non_negative_and_vanish_at_identity(seed in any::<u64>(), density in 0.0f64..1.0) {
        let fx = FeatureExtractor::with_channels(seed, [3, 4, 4, 4, 4]);
        let g = Graph::new();
        let a = g.constant(tensor(seed, &[1, 3, 16, 16], 1.0).map(|v| 0.5 + 0.5 * v));
        let b = g.constant(tensor(seed ^ 8, &[1, 3, 16, 16], 1.0).map(|v| 0.5 + 0.5 * v));
        let m = mask(seed ^ 9, 16, 16, density).to_tensor().reshape(&[1, 1, 16, 16]).unwrap();
        let terms = |p, q| -> [f64; 3] {
            [
                reconstruction_loss(p, q, &m).unwrap().value().item(),
                perceptual_loss(p, q, &fx).unwrap().value().item(),
                style_loss(p, q, &m, &fx).unwrap().value().item(),
            ]
        };
        prop_assert!(terms(a, b).iter().all(|&v| v >= 0.0));
        prop_assert!(terms(a, a).iter().all(|&v| v == 0.0));
        prop_assert!(tv_loss(a).unwrap().value().item() >= 0.0);
    }

    #[test]
    fn inpainter_composite_keeps_unmasked_pixels(seed in any::<u64>(), density in 0.0f64..1.0) {
        let gen = Inpainter::new(InpainterConfig::toy());
        let store = gen.init_store(seed);
        let (h, w) = (16, 16);
        let m = mask(seed ^ 10, h, w, density);
        let img = binary_masked(&image(seed, h, w), &m).unwrap();
        let out = gen.generate(&store, &img, &m, &LandmarkMap::template(h, w)).unwrap();
        for y in 0..h {
            for x in 0..w {
                if !m.get(y, x) {
                    for c in 0..3 {
                        prop_assert_eq!(out.get(y, x, c).to_bits(), img.get(y, x, c).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn restricted_masks_land_in_their_interval(seed in any::<u64>(), interval in 0usize..4) {
        let spec = MaskSpec {
            kind: MaskKind::Freeform { strokes: 3, brush: BrushParams::default() },
            area_interval: Some(interval),
            seed,
        };
        let m = spec.generate((64, 64)).unwrap();
        prop_assert_eq!(classify_area(&m).unwrap(), interval);
    }

    #[test]
    fn image_metrics_are_deterministic(seed in any::<u64>()) {
        let (a, b) = (image(seed, 12, 12), image(seed ^ 11, 12, 12));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&a, &b).unwrap());
        prop_assert_eq!(ssim(&a, &b).unwrap().to_bits(), ssim(&a, &b).unwrap().to_bits());
    }
}

/// Mask and fill indices are drawn independently: a chi-square test of the
/// 4x4 contingency table over 1000 draws stays below the 0.1% critical value.
#[test]
fn mask_and_fill_selection_are_independent() {
    for seed in [0u64, 1, 99] {
        let mut table = [[0.0f64; 4]; 4];
        for i in 0..1000 {
            let (m, f) = select_pair(seed, i, 4, 4);
            table[m][f] += 1.0;
        }
        let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..4).map(|j| table.iter().map(|r| r[j]).sum()).collect();
        let mut chi2 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let e = rows[i] * cols[j] / 1000.0;
                chi2 += (table[i][j] - e).powi(2) / e;
            }
        }
        // Nine degrees of freedom.
        assert!(chi2 < 27.88, "seed {seed}: chi2 {chi2}");
    }
}
