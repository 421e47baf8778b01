use std::fs;

use alignkit::archive::{self, Model};
use alignkit::core::align::{AlignConfig, AlignWeights};
use alignkit::core::pipeline::{PipelineConfig, PipelineWeights};
use alignkit::core::synth::stream_rng;
use alignkit::core::tensor::Tensor;
use alignkit::{pnm, vten, Error};
use rand::Rng;

fn random(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, 0);
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()).unwrap()
}

#[test]
fn vten_round_trips_any_rank() {
    let dir = tempfile::tempdir().unwrap();
    for (i, dims) in [vec![7], vec![2, 3], vec![3, 5, 4], vec![2, 2, 9, 3, 3]].into_iter().enumerate() {
        let t = random(&dims, i as u64);
        let p = dir.path().join(format!("{i}.vten"));
        vten::save(&p, &t).unwrap();
        assert_eq!(vten::load(&p).unwrap(), t);
    }
}

#[test]
fn vten_layout_is_little_endian() {
    let t = Tensor::new(&[1, 2], vec![1.0, -2.5]).unwrap();
    let mut buf = Vec::new();
    vten::encode(&t, &mut buf);
    assert_eq!(&buf[..6], b"VTEN\x01\x02");
    assert_eq!(&buf[6..14], &[1, 0, 0, 0, 2, 0, 0, 0]);
    assert_eq!(&buf[14..18], &1.0f32.to_le_bytes());
    assert_eq!(buf.len(), 22);
}

#[test]
fn vten_rejects_damage() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.vten");
    let mut buf = Vec::new();
    vten::encode(&random(&[3, 4, 4], 1), &mut buf);
    for bad in [buf[..buf.len() - 1].to_vec(), [buf.as_slice(), &[0]].concat(), [b"XTEN", &buf[4..]].concat()] {
        fs::write(&p, bad).unwrap();
        assert!(matches!(vten::load(&p), Err(Error::Format { .. })));
    }
}

#[test]
fn pnm_round_trips_8bit_images() {
    let dir = tempfile::tempdir().unwrap();
    for c in [1, 3] {
        let t = Tensor::from_fn_chw(c, 5, 7, |ci, y, x| ((ci * 61 + y * 17 + x * 29) % 256) as f32 / 255.0);
        let p = dir.path().join(format!("{c}.pnm"));
        pnm::save(&p, &t).unwrap();
        assert_eq!(pnm::load(&p).unwrap(), t);
    }
    assert!(pnm::encode(&Tensor::zeros(&[2, 4, 4])).is_none());
}

#[test]
fn pnm_reads_header_comments() {
    let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
    let t = pnm::decode(bytes, "x.pgm".as_ref()).unwrap();
    assert_eq!(t.data(), &[0.0, 1.0]);
    assert!(pnm::decode(b"P5\n2 1\n65535\n\x00\x00\x00\x00", "x.pgm".as_ref()).is_err());
    assert!(pnm::decode(b"P6\n2 2\n255\n\x00", "x.ppm".as_ref()).is_err());
}

#[test]
fn pipeline_archive_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::new(2);
    let w = PipelineWeights::random(&cfg, 9).unwrap();
    archive::save_pipeline(dir.path(), &w, &cfg).unwrap();
    let (back, back_cfg) = archive::load_pipeline(dir.path()).unwrap();
    assert_eq!(back_cfg, cfg);
    assert_eq!(back, w);
    let index = archive::read_index(dir.path()).unwrap();
    assert_eq!(index.model, Model::Pipeline { scale: 2, levels: 3, groups: 4 });
}

#[test]
fn align_archive_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AlignConfig { groups: 3, ..AlignConfig::default() };
    let w = AlignWeights::new(3, &cfg, &mut stream_rng(4, 1));
    archive::save_align(dir.path(), &w, 3, &cfg).unwrap();
    let mut back_cfg = AlignConfig::default();
    let (back, channels) = archive::load_align(dir.path(), &mut back_cfg).unwrap();
    assert_eq!((channels, back_cfg), (3, cfg));
    assert_eq!(back, w);
    assert!(archive::load_pipeline(dir.path()).is_err());
}

#[test]
fn archive_rejects_missing_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::new(4);
    let w = PipelineWeights::zeros(&cfg).unwrap();
    let mut tensors = Vec::new();
    w.for_each_param(&mut |name, t| tensors.push((name, t)));
    tensors.pop();
    let model = Model::Pipeline { scale: 4, levels: 3, groups: 4 };
    archive::write(dir.path(), model, &tensors).unwrap();
    let err = archive::load_pipeline(dir.path()).unwrap_err();
    assert!(err.to_string().contains("missing"), "{err}");
}
