//! Property tests for invariants that hold over whole input families.

use bvae::io::{decode_pnm, encode_image_grid, grid::quantize, idx::parse_idx, idx::IMAGES_MAGIC, parse_images};
use bvae::layers::GNova;
use bvae::metrics::{active_units, psnr, ssim};
use bvae::model::{Architecture, Vae};
use bvae::objectives::{belbo_loss, gaussian_kl};
use bvae::rng::RngState;
use bvae::tensor::{conv2d, conv2d_transpose, ConvGeometry};
use bvae::train::OneCycle;
use bvae::{Error, Tensor};
use proptest::prelude::*;

fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_transpose_is_the_adjoint(
        c_in in 1usize..4, c_out in 1usize..4, kernel in 1usize..5,
        stride in 1usize..3, extra in 0usize..4, seed in any::<u64>(),
    ) {
        let pad = kernel / 2;
        let h = kernel + stride * extra;
        let Ok(geom) = ConvGeometry::new(c_in, c_out, kernel, stride, pad, h, h) else {
            return Ok(());
        };
        let mut rng = RngState::new(seed);
        let x: Tensor<f64> = rng.standard_normal(vec![2, c_in, h, h]);
        let k: Tensor<f64> = rng.standard_normal(vec![c_out, c_in, kernel, kernel]);
        let y: Tensor<f64> = rng.standard_normal(vec![2, c_out, geom.out_h, geom.out_w]);
        let lhs = inner(&conv2d(&x, &k, stride, pad).unwrap(), &y);
        let rhs = inner(&x, &conv2d_transpose(&y, &k, stride, pad, Some((h, h))).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_the_prior(
        mu in prop::collection::vec(-5.0f64..5.0, 6),
        lv in prop::collection::vec(-8.0f64..8.0, 6),
    ) {
        let kl = gaussian_kl(
            &Tensor::from_f64(vec![2, 3], &mu).unwrap(),
            &Tensor::from_f64(vec![2, 3], &lv).unwrap(),
        ).unwrap();
        prop_assert!(kl >= 0.0);
        let zero = gaussian_kl(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 3])).unwrap();
        prop_assert_eq!(zero, 0.0);
    }

    #[test]
    fn image_metrics_are_symmetric(seed in any::<u64>(), side in 4usize..16) {
        let mut rng = RngState::new(seed);
        let a: Vec<f64> = (0..side * side).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..side * side).map(|_| rng.uniform()).collect();
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        let (sab, sba) = (ssim(&a, &b, [1, side, side]).unwrap(), ssim(&b, &a, [1, side, side]).unwrap());
        prop_assert_eq!(sab, sba);
        prop_assert!(sab <= 1.0);
    }

    #[test]
    fn psnr_falls_as_uniform_noise_grows(d1 in 0.01f64..0.2, gap in 0.01f64..0.2) {
        let a = vec![0.3; 64];
        let near: Vec<f64> = a.iter().map(|v| v + d1).collect();
        let far: Vec<f64> = a.iter().map(|v| v + d1 + gap).collect();
        prop_assert!(psnr(&a, &near).unwrap() > psnr(&a, &far).unwrap());
    }

    #[test]
    fn active_units_ignore_order_and_shrink_with_threshold(
        seed in any::<u64>(), e1 in 0.0f64..0.5, e2 in 0.0f64..0.5,
    ) {
        let mut rng = RngState::new(seed);
        let scales: Vec<f64> = (0..5).map(|_| rng.uniform() * 0.6).collect();
        let m = Tensor::from_fn(vec![40, 5], |k| rng.normal() * scales[k % 5]);
        let mut order: Vec<usize> = (0..40).collect();
        rng.shuffle(&mut order);
        let shuffled = m.select_rows(&order).unwrap();
        prop_assert_eq!(active_units(&m, e1).unwrap(), active_units(&shuffled, e1).unwrap());
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(active_units(&m, lo).unwrap() >= active_units(&m, hi).unwrap());
    }

    #[test]
    fn one_cycle_rises_then_falls(peak in 1e-5f64..1.0, total in 2u64..400) {
        let s = OneCycle::new(peak, total).unwrap();
        let lrs: Vec<f64> = (0..total).map(|t| s.lr(t).unwrap()).collect();
        let top = (0.3 * total as f64).floor() as usize;
        prop_assert!((lrs[top] - peak).abs() <= 1e-12 * peak);
        prop_assert!(lrs[..=top].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[top..].windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(lrs.iter().all(|&v| v > 0.0 && v <= peak));
        let past_end = matches!(s.lr(total), Err(Error::Contract(_)));
        prop_assert!(past_end);
    }

    #[test]
    fn gnova_is_increasing_for_moderate_alpha(alpha in 0.2f64..3.0, beta in 0.1f64..4.0, x in -20.0f64..20.0) {
        let act = GNova::new(alpha, beta).unwrap();
        prop_assert!(act.apply(x + 1e-3) > act.apply(x));
        prop_assert!(act.derivative(x) > 0.0);
    }

    #[test]
    fn idx_parser_is_total(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = parse_idx(&bytes, IMAGES_MAGIC);
        let _ = parse_images(&bytes);
    }

    #[test]
    fn every_proper_prefix_of_an_idx_file_is_rejected(n in 1u32..4, h in 1u32..5, w in 1u32..5, cut in 0.0f64..1.0) {
        let mut file = IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n, h, w] {
            file.extend_from_slice(&d.to_be_bytes());
        }
        file.extend((0..n * h * w).map(|i| i as u8));
        prop_assert!(parse_images(&file).is_ok());
        let len = (cut * file.len() as f64) as usize;
        let rejected = matches!(parse_images(&file[..len]), Err(Error::Parse { .. }));
        prop_assert!(rejected);
    }

    #[test]
    fn image_grids_roundtrip_at_eight_bits(seed in any::<u64>(), n in 1usize..7, cols in 1usize..5, rgb in any::<bool>()) {
        let c = if rgb { 3 } else { 1 };
        let mut rng = RngState::new(seed);
        let imgs = Tensor::<f64>::from_fn(vec![n, c, 5, 4], |_| rng.uniform() * 1.2 - 0.1);
        let pnm = decode_pnm(&encode_image_grid(&imgs, cols).unwrap()).unwrap();
        let cols = cols.min(n);
        prop_assert_eq!(pnm.channels, c);
        for i in 0..n {
            let (ty, tx) = (i / cols * 7, i % cols * 6);
            for y in 0..5 {
                for x in 0..4 {
                    for ch in 0..c {
                        let want = quantize(imgs.row(i)[(ch * 5 + y) * 4 + x]);
                        prop_assert_eq!(pnm.pixels[((ty + y) * pnm.width + tx + x) * c + ch], want);
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn weight_tied_twin_reproduces_the_bidirectional_loss(seed in any::<u64>(), latent in 1usize..5) {
        let arch = Architecture::new([1, 6, 6], "conv3k3s1p1,dense10", latent, GNova::new(0.7, 1.4).unwrap()).unwrap();
        let m = Vae::<f64>::bidirectional(arch, seed).unwrap();
        let twin = m.tied_twin().unwrap();
        let mut rng = RngState::new(seed ^ 1);
        let x = Tensor::<f64>::from_fn(vec![3, 1, 6, 6], |_| rng.uniform());
        let eps: Tensor<f64> = rng.standard_normal(vec![3, latent]);
        let a = belbo_loss(&m, &x, &eps, 1.0).unwrap();
        let b = belbo_loss(&twin, &x, &eps, 1.0).unwrap();
        prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}
