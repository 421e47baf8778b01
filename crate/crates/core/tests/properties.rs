use alignkit_core::adastn::{offsets_from_affine, AffineField, PositionalGrid, TAPS};
use alignkit_core::metrics::{psnr, ssim};
use alignkit_core::rectify::{guided_filter, masked_l1};
use alignkit_core::sample::{bilinear_sample, warp};
use alignkit_core::synth::stream_rng;
use alignkit_core::tensor::{FlowField, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn noise(seed: u64, dims: &[usize], lo: f32, hi: f32) -> Tensor {
    let mut rng = stream_rng(seed, 77);
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bilinear_is_linear_in_the_image(seed in 0u64..10_000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let (h, w) = (7, 9);
        let f = noise(seed, &[2, h, w], 0.0, 1.0);
        let g = noise(seed + 1, &[2, h, w], 0.0, 1.0);
        let coords = {
            let mut t = noise(seed + 2, &[2, 5, 6], 0.0, 1.0);
            let n = 30;
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v *= if i < n { (w - 1) as f32 } else { (h - 1) as f32 };
            }
            t
        };
        let mix = f.scale(a).add(&g.scale(b)).unwrap();
        let lhs = bilinear_sample(&mix, &coords).unwrap();
        let rhs = bilinear_sample(&f, &coords).unwrap().scale(a)
            .add(&bilinear_sample(&g, &coords).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
    }

    #[test]
    fn integer_warp_is_a_translation(seed in 0u64..10_000, dx in -3i32..=3, dy in -3i32..=3) {
        let (h, w) = (12, 14);
        let f = noise(seed, &[1, h, w], 0.0, 1.0);
        let out = warp(&f, &FlowField::uniform(h, w, dx as f32, dy as f32)).unwrap();
        for y in 3..h - 3 {
            for x in 3..w - 3 {
                let src = (y as i32 + dy) as usize * w + (x as i32 + dx) as usize;
                prop_assert_eq!(out.data()[y * w + x], f.data()[src]);
            }
        }
    }

    #[test]
    fn affine_offsets_are_linear(seed in 0u64..10_000) {
        let (n, h, w) = (2, 3, 4);
        // A is written as identity plus a delta; P is affine in the delta.
        let id = AffineField::identity(n, h, w);
        let d1 = noise(seed, &[n, 2, 2, h, w], -2.0, 2.0);
        let d2 = noise(seed + 1, &[n, 2, 2, h, w], -2.0, 2.0);
        let b1 = noise(seed + 2, &[n, 2, 1, h, w], -2.0, 2.0);
        let b2 = noise(seed + 3, &[n, 2, 1, h, w], -2.0, 2.0);
        let p = |d: &Tensor, b: &Tensor| {
            offsets_from_affine(&AffineField::new(id.a.add(d).unwrap(), b.clone()).unwrap())
        };
        let lhs = p(&d1.add(&d2).unwrap(), &b1.add(&b2).unwrap());
        let g = offsets_from_affine(&id);
        let rhs = p(&d1, &b1).add(&p(&d2, &b2)).unwrap().sub(&g).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
    }

    #[test]
    fn translation_only_moves_the_grid_rigidly(seed in 0u64..10_000) {
        let (n, h, w) = (3, 2, 5);
        let mut af = AffineField::identity(n, h, w);
        af.b = noise(seed, &[n, 2, 1, h, w], -3.0, 3.0);
        let p = offsets_from_affine(&af);
        let hw = h * w;
        for g in 0..n {
            for row in 0..2 {
                for k in 0..TAPS {
                    let (gx, gy) = PositionalGrid::tap(k);
                    let grid = if row == 0 { gx } else { gy };
                    for i in 0..hw {
                        let v = p.data()[((g * 2 + row) * TAPS + k) * hw + i];
                        let b = af.b.data()[(g * 2 + row) * hw + i];
                        prop_assert_eq!(v - grid, b);
                    }
                }
            }
        }
    }

    #[test]
    fn guided_filter_commutes_with_constant_shift(seed in 0u64..10_000, c in -0.5f32..0.5) {
        let guide = noise(seed, &[2, 13, 11], 0.0, 1.0);
        let src = noise(seed + 1, &[2, 13, 11], 0.0, 1.0);
        let q = guided_filter(&guide, &src, 3, 1e-3).unwrap();
        let qc = guided_filter(&guide, &src.map(|v| v + c), 3, 1e-3).unwrap();
        prop_assert!(qc.max_abs_diff(&q.map(|v| v + c)).unwrap() <= 1e-6);
    }

    #[test]
    fn masked_l1_shrinks_with_the_mask(seed in 0u64..10_000, cut in 0usize..48) {
        let p = noise(seed, &[3, 6, 8], 0.0, 1.0);
        let t = noise(seed + 1, &[3, 6, 8], 0.0, 1.0);
        let m = noise(seed + 2, &[1, 6, 8], 0.0, 1.0).map(|v| if v < 0.8 { 1.0 } else { 0.0 });
        let mut smaller = m.clone();
        smaller.data_mut()[cut] = 0.0;
        prop_assert!(masked_l1(&p, &t, &smaller).unwrap() <= masked_l1(&p, &t, &m).unwrap());
    }

    #[test]
    fn psnr_is_symmetric_and_ssim_reflexive(seed in 0u64..10_000) {
        let a = noise(seed, &[3, 16, 16], 0.0, 1.0);
        let b = noise(seed + 1, &[3, 16, 16], 0.0, 1.0);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
