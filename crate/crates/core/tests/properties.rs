use ctrlgan_core::data::generate_toy_dataset;
use ctrlgan_core::losses::{color_loss, perceptual_loss, pixel_loss, total_objective, tv_loss, LossReport, LossWeights, Norm};
use ctrlgan_core::metrics::{frd, psnr, ssim, FeatureMatrix};
use ctrlgan_core::networks::{ConvStackExtractor, FeatureExtractor, GeneratorConfig};
use ctrlgan_core::tensor::no_grad;
use ctrlgan_core::{Generator, Tensor, ToyDatasetSpec};
use proptest::prelude::*;

const SHAPE: [usize; 4] = [2, 3, 8, 8];
const N: usize = 2 * 3 * 8 * 8;

fn img() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, N)
}

fn t(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), &SHAPE).unwrap()
}

fn val(r: ctrlgan_core::Result<Tensor>) -> f64 {
    r.unwrap().item().unwrap()
}

/// Direct 3x3 stride-2 zero-padded convolution followed by tanh.
fn naive_stage(input: &[f64], c_in: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> (Vec<f64>, usize, usize) {
    let c_out = bias.len();
    let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let (y, x) = ((2 * i + ki) as isize - 1, (2 * j + kj) as isize - 1);
                            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                acc += weight[((o * c_in + c) * 3 + ki) * 3 + kj] * input[(c * h + y as usize) * w + x as usize];
                            }
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc.tanh();
            }
        }
    }
    (out, ho, wo)
}

#[test]
fn loaded_extractor_matches_naive_convolution() {
    let e = ConvStackExtractor::random(3, &[4, 6, 5], 1, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("extractor.bin");
    e.save(&path).unwrap();
    let loaded = ConvStackExtractor::load(&path).unwrap();
    let input: Vec<f64> = (0..3 * 12 * 12).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
    let x = Tensor::from_vec(input.clone(), &[1, 3, 12, 12]).unwrap();
    let _g = no_grad();
    let (mut cur, mut c, mut h, mut w) = (input, 3, 12, 12);
    for layer in 0..3 {
        let (next, ho, wo) = naive_stage(&cur, c, h, w, loaded.weight(layer).data(), loaded.bias(layer).data());
        let got = loaded.extract(&x, layer).unwrap();
        assert_eq!(got.shape(), &[1, loaded.channels()[layer], ho, wo]);
        let dims = loaded.dims(layer, 12, 12).unwrap();
        assert_eq!((dims.channels, dims.height, dims.width), (loaded.channels()[layer], ho, wo));
        for (a, b) in got.data().iter().zip(&next) {
            assert!((a - b).abs() < 1e-12, "layer {layer}: {a} vs {b}");
        }
        assert_eq!(e.extract(&x, layer).unwrap().data(), got.data());
        (cur, c, h, w) = (next, loaded.channels()[layer], ho, wo);
    }
}

#[test]
fn toy_dataset_samples_satisfy_loader_invariants() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..4 {
        let spec = ToyDatasetSpec::new(3, 16 + 4 * seed as usize, seed);
        let written = ctrlgan_core::data::write_toy_dataset(&spec, dir.path()).unwrap();
        let loaded = ctrlgan_core::data::load_paired_dataset(
            dir.path(),
            ctrlgan_core::data::Split::Train,
            Default::default(),
        )
        .unwrap();
        assert_eq!(loaded.len(), written.train.len());
        let in_memory = generate_toy_dataset(&spec).unwrap();
        for (a, b) in loaded.iter().zip(&in_memory.train) {
            assert_eq!(a.x.shape(), b.x.shape());
            assert_eq!(a.x.data(), b.x.data());
            assert_eq!(a.c_y.data(), b.c_y.data());
            for v in a.x.data().iter().chain(a.y.data()).chain(a.c_x.data()).chain(a.c_y.data()) {
                assert!((-1.0..=1.0).contains(v));
            }
            assert_eq!(a.c_x.height(), a.x.height());
            assert_eq!(a.c_y.width(), a.y.width());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_nonnegative_and_zero_at_identity(a in img(), b in img()) {
        let (ta, tb) = (t(&a), t(&b));
        for norm in [Norm::L1, Norm::L2] {
            prop_assert!(val(pixel_loss(&ta, &tb, norm)) >= 0.0);
            prop_assert_eq!(val(pixel_loss(&ta, &ta, norm)), 0.0);
            prop_assert!(val(color_loss(&ta, &tb, Some((&tb, &ta)), norm)) >= 0.0);
            prop_assert_eq!(val(color_loss(&ta, &ta, Some((&tb, &tb)), norm)), 0.0);
        }
        prop_assert!(val(tv_loss(&ta)) >= 0.0);
        prop_assert_eq!(val(tv_loss(&Tensor::full(&SHAPE, a[0]))), 0.0);
        let e = ConvStackExtractor::toy(0);
        prop_assert!(val(perceptual_loss(&e, 1, &ta, &tb, None)) >= 0.0);
        prop_assert_eq!(val(perceptual_loss(&e, 1, &ta, &ta, Some((&tb, &tb)))), 0.0);
    }

    #[test]
    fn color_l1_is_sum_of_per_channel_l1(a in img(), b in img()) {
        let whole = val(color_loss(&t(&a), &t(&b), None, Norm::L1));
        let plane = 64;
        let mut sum = 0.0;
        for c in 0..3 {
            let pick = |v: &[f64]| {
                let mut out = Vec::new();
                for n in 0..2 {
                    out.extend_from_slice(&v[(n * 3 + c) * plane..(n * 3 + c + 1) * plane]);
                }
                Tensor::from_vec(out, &[2, 1, 8, 8]).unwrap()
            };
            sum += val(pixel_loss(&pick(&a), &pick(&b), Norm::L1));
        }
        prop_assert!((whole - sum).abs() < 1e-12);
    }

    #[test]
    fn total_objective_is_weighted_sum(parts in prop::array::uniform8(0.0f64..5.0), lambdas in prop::array::uniform5(0.0f64..200.0)) {
        let w = LossWeights {
            lambda_color: lambdas[0],
            lambda_cyc: lambdas[1],
            lambda_con: lambdas[2],
            lambda_vgg: lambdas[3],
            lambda_tv: lambdas[4],
            ..LossWeights::crossview()
        };
        let p = LossReport {
            adv_g: parts[0],
            color: parts[1],
            pixel: parts[2],
            cyc: parts[3],
            con: parts[4],
            vgg: parts[5],
            tv: parts[6],
            adv_d: parts[7],
            ..LossReport::default()
        };
        let r = total_objective(&w, &p).unwrap();
        let expected = parts[0] + lambdas[0] * (parts[1] + parts[2]) + lambdas[1] * parts[3]
            + lambdas[2] * parts[4] + lambdas[3] * parts[5] + lambdas[4] * parts[6];
        prop_assert!((r.total_g - expected).abs() <= 1e-9 * expected.max(1.0));
        prop_assert_eq!(r.total_d, parts[7]);
    }

    #[test]
    fn generator_is_deterministic_and_bounded(seed in 0u64..1000, x in prop::collection::vec(-1.0f64..1.0, 3 * 8 * 8)) {
        let cfg = GeneratorConfig { num_res_blocks: 1, base_channels: 8, ..GeneratorConfig::default() };
        let g = Generator::new(cfg.clone(), seed).unwrap();
        let h = Generator::new(cfg, seed).unwrap();
        let xt = Tensor::from_vec(x.clone(), &[1, 3, 8, 8]).unwrap();
        let st = Tensor::from_vec(x.iter().rev().copied().collect(), &[1, 3, 8, 8]).unwrap();
        let _g = no_grad();
        let a = g.forward(&xt, Some(&st)).unwrap();
        prop_assert_eq!(a.shape(), &[1, 3, 8, 8]);
        let b = h.forward(&xt, Some(&st)).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert!(a.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn metric_sanity(a in prop::collection::vec(0.0f64..255.0, 3 * 12 * 12), b in prop::collection::vec(0.0f64..255.0, 3 * 12 * 12)) {
        let p = psnr(&a, &b, 255.0).unwrap();
        prop_assert_eq!(p, psnr(&b, &a, 255.0).unwrap());
        prop_assert!(p <= 100.0);
        let s = ssim(&a, &b, [1, 3, 12, 12], 255.0).unwrap();
        prop_assert!(s <= 1.0 + 1e-12);
        let fa = FeatureMatrix::from_rows(&[a[..16].to_vec(), a[16..32].to_vec()]).unwrap();
        let fb = FeatureMatrix::from_rows(&[b[..16].to_vec(), b[16..32].to_vec()]).unwrap();
        prop_assert!(frd(&fa, &fb).unwrap() >= 0.0);
        prop_assert_eq!(frd(&fa, &fb).unwrap(), frd(&fb, &fa).unwrap());
    }
}
