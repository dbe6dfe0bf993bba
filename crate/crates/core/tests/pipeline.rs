use fruitsense::experiment::{build_library, direct_path_error, run_benchmark};
use fruitsense::scenario::standard_classes;
use fruitsense::{run_pipeline, RipenessLabel, sample_csi, ErrorModel, ExperimentConfig, GroundTruthChannel};

fn clean_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 11,
        trials: 2,
        training_samples: 1,
        phi_s_range: 0.0,
        errors: ErrorModel::none(),
        ..Default::default()
    };
    cfg.room.reflectors_min = 0;
    cfg.room.reflectors_max = 0;
    cfg
}

#[test]
fn clean_direct_path_survives_the_chain() {
    let cfg = clean_config();
    let plan = cfg.plan.build().unwrap();
    for class in standard_classes() {
        let truth = GroundTruthChannel::direct_only(5e-9, class.slab().unwrap());
        let ds = sample_csi(&truth, &plan, &ErrorModel::none()).unwrap();
        let out = run_pipeline(&ds, &cfg.settings(), None).unwrap();
        let err = direct_path_error(&out.direct, &truth).unwrap();
        // The steepest taper spreads past the direct-path window.
        let tol = if class.label == RipenessLabel::OverRipen { 0.15 } else { 0.01 };
        assert!(err < tol, "{:?}: relative error {err}", class.label);
        let amp: Vec<f64> = out.direct.response.iter().map(|v| v.norm()).collect();
        let k = plan.subcarrier_count_per_channel;
        let head = amp[..k].iter().sum::<f64>();
        let tail = amp[amp.len() - k..].iter().sum::<f64>();
        assert!(head > tail, "{:?}: amplitude does not fall with frequency", class.label);
    }
}

#[test]
fn clean_benchmark_is_self_consistent() {
    let cfg = clean_config();
    let lib = build_library(&cfg).unwrap();
    let report = run_benchmark(&cfg, &lib).unwrap();
    assert_eq!(report.accuracy, 1.0, "{:?}", report.confusion.counts);
}
