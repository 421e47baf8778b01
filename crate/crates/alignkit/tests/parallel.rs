use alignkit::core::pipeline::{vsr_forward, PipelineConfig, PipelineWeights};
use alignkit::core::synth::{make_scene, SceneParams};
use alignkit::parallel;

#[test]
fn threaded_forward_matches_sequential_bit_for_bit() {
    let cfg = PipelineConfig::new(2);
    let w = PipelineWeights::random(&cfg, 11).unwrap();
    let seq = make_scene(&SceneParams::new(2, 20, 24, 3).with_velocity(1.0, 0.5)).unwrap().frames;
    let reference = vsr_forward(&seq, &w, &cfg).unwrap();
    for threads in [1, 2, 3] {
        let pool = parallel::pool(threads).unwrap();
        assert_eq!(parallel::vsr_forward(&pool, &seq, &w, &cfg).unwrap(), reference, "{threads} threads");
    }
}

#[test]
fn threaded_forward_checks_inputs() {
    let cfg = PipelineConfig::new(4);
    let w = PipelineWeights::zeros(&PipelineConfig::new(2)).unwrap();
    let pool = parallel::pool(2).unwrap();
    let seq = make_scene(&SceneParams::new(2, 16, 16, 1)).unwrap().frames;
    assert!(parallel::vsr_forward(&pool, &seq, &w, &cfg).is_err());
    assert!(parallel::vsr_forward(&pool, &[], &w, &PipelineConfig::new(2)).is_err());
}
