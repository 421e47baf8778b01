use alignkit_core::flow::block_match_flow;
use alignkit_core::sample::{upsample_bilinear, warp};
use alignkit_core::synth::{degrade, make_scene, DegradeParams, SceneParams};
use alignkit_core::tensor::Tensor;

fn interior_mean_abs(a: &Tensor, b: &Tensor, margin: usize) -> f64 {
    let (c, h, w) = (a.dims()[0], a.dims()[1], a.dims()[2]);
    let mut acc = 0.0;
    let mut n = 0usize;
    for ci in 0..c {
        for y in margin..h - margin {
            for x in margin..w - margin {
                let i = y * w + x;
                acc += (a.plane(ci)[i] - b.plane(ci)[i]).abs() as f64;
                n += 1;
            }
        }
    }
    acc / n as f64
}

#[test]
fn stored_flows_realign_consecutive_frames() {
    let mut p = SceneParams::new(8, 48, 48, 4).with_velocity(1.25, -0.75);
    p.motion.jitter = 0.4;
    let scene = make_scene(&p).unwrap();
    for t in 0..3 {
        let back = warp(&scene.frames[t + 1], &scene.flows[t]).unwrap();
        // Sub-pixel motion leaves bilinear interpolation error only.
        assert!(interior_mean_abs(&back, &scene.frames[t], 6) <= 5e-3);
    }
    // Integer motion resamples exactly.
    let scene = make_scene(&SceneParams::new(9, 40, 40, 3).with_velocity(2.0, -1.0)).unwrap();
    for t in 0..2 {
        let back = warp(&scene.frames[t + 1], &scene.flows[t]).unwrap();
        assert!(interior_mean_abs(&back, &scene.frames[t], 4) <= 1e-3);
    }
}

#[test]
fn degradation_is_deterministic_and_records_misalignment() {
    let scene = make_scene(&SceneParams::new(10, 64, 64, 2)).unwrap();
    let d = DegradeParams {
        misalign: (1.25, -0.5),
        noise_sigma: 0.01,
        blur_sigma: 0.8,
        gain: [1.1, 0.9, 1.0],
        seed: 3,
        ..DegradeParams::default()
    };
    let a = degrade(&scene, &d).unwrap();
    assert_eq!(a, degrade(&scene, &d).unwrap());
    assert_eq!(a.degrade.misalign, (1.25, -0.5));
}

#[test]
fn block_matching_recovers_integer_misalignment() {
    let scene = make_scene(&SceneParams::new(11, 96, 96, 1)).unwrap();
    for (dx, dy) in [(3.0f32, -2.0f32), (-2.25, 1.0)] {
        let d = DegradeParams {
            misalign: (dx, dy),
            ..DegradeParams::identity(4)
        };
        let pair = degrade(&scene, &d).unwrap();
        let up = upsample_bilinear(&pair.lr[0], 4).unwrap();
        let f = block_match_flow(&up, &pair.hr[0], 4).unwrap();
        let (h, w) = (f.height(), f.width());
        let mut votes = std::collections::HashMap::new();
        for y in 12..h - 12 {
            for x in 12..w - 12 {
                let (u, v) = f.at(x, y);
                *votes.entry((u as i32, v as i32)).or_insert(0usize) += 1;
            }
        }
        let (best, _) = votes.into_iter().max_by_key(|&(_, n)| n).unwrap();
        assert_eq!(best, (dx.round() as i32, dy.round() as i32));
    }
}
