use alignkit_core::adastn::{
    adastn_predict, adastn_v2_predict, offsets_from_affine, AffineField, DeformParams, PositionalGrid, PredictorWeights,
    TAPS,
};
use alignkit_core::align::{build_pyramid, deform_sample, deformnet, resflownet, AlignConfig, AlignWeights};
use alignkit_core::conv::{conv2d, Conv2d};
use alignkit_core::fit::{spsa, FitConfig};
use alignkit_core::flow::{endpoint_error, interior_mask};
use alignkit_core::sample::warp;
use alignkit_core::synth::{make_scene, stream_rng, SceneParams};
use alignkit_core::tensor::{FlowField, Tensor};
use rand::Rng;

fn noise(seed: u64, dims: &[usize], lo: f32, hi: f32) -> Tensor {
    let mut rng = stream_rng(seed, 5);
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn randomise(w: &mut PredictorWeights, seed: u64, scale: f32) {
    let mut rng = stream_rng(seed, 9);
    w.for_each_param_mut("", &mut |_, t| {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    });
}

#[test]
fn offsets_match_hand_matrix_product() {
    let (n, h, w) = (2, 3, 4);
    let af = AffineField::new(noise(1, &[n, 2, 2, h, w], -1.0, 1.0), noise(2, &[n, 2, 1, h, w], -1.0, 1.0)).unwrap();
    let p = offsets_from_affine(&af);
    let hw = h * w;
    for g in 0..n {
        for i in 0..hw {
            let a = |r: usize, c: usize| af.a.data()[(g * 4 + r * 2 + c) * hw + i];
            let b = |r: usize| af.b.data()[(g * 2 + r) * hw + i];
            for k in 0..TAPS {
                let col = [PositionalGrid::ROWS[0][k], PositionalGrid::ROWS[1][k]];
                for r in 0..2 {
                    let want = a(r, 0) * col[0] + a(r, 1) * col[1] + b(r);
                    let got = p.data()[((g * 2 + r) * TAPS + k) * hw + i];
                    assert!((got - want).abs() <= 1e-6);
                }
            }
        }
    }
}

#[test]
fn unit_shift_pattern_equals_conv_of_shifted_feature() {
    let (c, h, w) = (4, 10, 12);
    let f = noise(3, &[c, h, w], 0.0, 1.0);
    let wt = noise(4, &[5, c, 3, 3], -0.5, 0.5);
    let mut params = DeformParams::plain(2, h, w, 1.0);
    let hw = h * w;
    for g in 0..2 {
        for k in 0..TAPS {
            let off = ((g * 2) * TAPS + k) * hw;
            params.offsets.data_mut()[off..off + hw].iter_mut().for_each(|v| *v += 1.0);
        }
    }
    let got = deform_sample(&f, &params, &wt, None).unwrap();
    let shifted = Tensor::from_fn_chw(c, h, w, |ci, y, x| if x + 1 < w { f.plane(ci)[y * w + x + 1] } else { 0.0 });
    let want = conv2d(&shifted, &wt, None, 1).unwrap();
    for co in 0..5 {
        for y in 1..h - 1 {
            for x in 1..w - 2 {
                let i = co * hw + y * w + x;
                assert!((got.data()[i] - want.data()[i]).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn random_v2_masks_stay_inside_unit_interval() {
    let mut rng = stream_rng(11, 0);
    let mut w = PredictorWeights::v2(4, 4, &mut rng);
    randomise(&mut w, 12, 0.5);
    let f1 = noise(13, &[4, 9, 9], 0.0, 1.0);
    let f2 = noise(14, &[4, 9, 9], 0.0, 1.0);
    let p = adastn_v2_predict(&f1, &f2, &w, 4).unwrap();
    assert_eq!(p.offsets.dims(), &[4, 2, 9, 9, 9]);
    assert_eq!(p.masks.dims(), &[4, 9, 9, 9]);
    assert!(p.masks.data().iter().all(|&m| m > 0.0 && m < 1.0));
}

#[test]
fn predictor_is_translation_covariant() {
    let (c, h, w) = (3, 14, 16);
    let mut rng = stream_rng(21, 0);
    let mut wts = PredictorWeights::v1(c, &mut rng);
    randomise(&mut wts, 22, 0.2);
    let a = noise(23, &[c, h, w + 1], 0.0, 1.0);
    let b = noise(24, &[c, h, w + 1], 0.0, 1.0);
    let left = adastn_predict(&a.crop(0, 0, h, w).unwrap(), &b.crop(0, 0, h, w).unwrap(), &wts).unwrap();
    let right = adastn_predict(&a.crop(0, 1, h, w).unwrap(), &b.crop(0, 1, h, w).unwrap(), &wts).unwrap();
    // Three 3×3 layers see three pixels of padding.
    for y in 3..h - 3 {
        for x in 3..w - 4 {
            assert_eq!(right.at(x, y), left.at(x + 1, y));
        }
    }
}

#[test]
fn single_level_resflow_is_one_prediction() {
    let (c, h, w) = (3, 12, 12);
    let mut rng = stream_rng(31, 0);
    let mut head = PredictorWeights::v1(c, &mut rng);
    randomise(&mut head, 32, 0.1);
    let prev = noise(33, &[c, h, w], 0.0, 1.0);
    let cur = noise(34, &[c, h, w], 0.0, 1.0);
    let base = FlowField::uniform(h, w, 0.7, -0.4);
    let got = resflownet(&build_pyramid(&prev, 1).unwrap(), &build_pyramid(&cur, 1).unwrap(), &base, &[head.clone()])
        .unwrap();
    let want = adastn_predict(&cur, &warp(&prev, &base).unwrap(), &head).unwrap();
    assert_eq!(got, want);
}

#[test]
fn init_deformnet_with_zero_flow_is_plain_conv() {
    let (c, h, w) = (4, 10, 10);
    let mut rng = stream_rng(41, 0);
    let cfg = AlignConfig::default();
    let weights = AlignWeights::new(c, &cfg, &mut rng);
    let f_cur = noise(42, &[c, h, w], 0.0, 1.0);
    let f_prev = noise(43, &[c, h, w], 0.0, 1.0);
    let h_prev = noise(44, &[c, h, w], 0.0, 1.0);
    let got = deformnet(&f_cur, &f_prev, &h_prev, &FlowField::zeros(h, w), &weights.deform_head, &weights.deform_conv)
        .unwrap();
    let m = alignkit_core::conv::sigmoid(alignkit_core::adastn::MASK_BIAS);
    let conv = &weights.deform_conv;
    let want = Conv2d::new(conv.weight.scale(m), conv.bias.clone(), 1).unwrap().forward(&h_prev).unwrap();
    assert!(got.max_abs_diff(&want).unwrap() <= 1e-5);
}

#[test]
fn fitted_head_recovers_unit_residual() {
    let n = 32;
    let scene = make_scene(&SceneParams::new(51, n, n, 2).with_velocity(1.5, 0.5)).unwrap();
    let (cur, prev) = (&scene.frames[0], &scene.frames[1]);
    let gt = &scene.flows[0];
    let base = gt.sub(&FlowField::uniform(n, n, 1.0, 0.0)).unwrap();
    let warped = warp(prev, &base).unwrap();
    let mut rng = stream_rng(52, 0);
    let head = PredictorWeights::v1(3, &mut rng);
    let mask = interior_mask(n, n, 4);
    let truth = FlowField::uniform(n, n, 1.0, 0.0);
    let x0 = head.b_branch.bias.data().to_vec();
    let objective = |x: &[f32]| {
        let mut w = head.clone();
        w.b_branch.bias.data_mut().copy_from_slice(x);
        let r = adastn_predict(cur, &warped, &w).unwrap();
        endpoint_error(&r, &truth, &mask).unwrap()
    };
    let res = spsa(objective, &x0, &FitConfig { budget: 301, ..FitConfig::default() }).unwrap();
    let mut w = head.clone();
    w.b_branch.bias.data_mut().copy_from_slice(&res.params);
    let (mx, my) = adastn_predict(cur, &warped, &w).unwrap().mean();
    assert!(((mx - 1.0).powi(2) + my * my).sqrt() <= 0.25, "mean residual ({mx}, {my})");
}
