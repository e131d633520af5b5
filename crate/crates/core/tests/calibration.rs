use std::borrow::Cow;

use driftscape::corruptions::{
    calibrate_transform, corrupted_view, measured_drop, CorruptionKind, CorruptionSpec, Severity,
};
use driftscape::federation::{Federation, FederationConfig};
use driftscape::nn::ModelParams;
use driftscape::rng::StreamKey;
use driftscape::tasks::Image;
use driftscape::Error;

fn trained(cfg: FederationConfig, seed: u64) -> (Federation, ModelParams) {
    let fed = Federation::new(cfg.clone(), cfg.task.generate().unwrap(), seed).unwrap();
    let init = fed.init_model().unwrap();
    let plan = fed.plan(0.0, Severity::Level(0)).unwrap();
    let (model, _) = fed.run(&plan, cfg.rounds_cd, &init, StreamKey::root(seed).child("clean", 0)).unwrap();
    (fed, model)
}

#[test]
fn zero_target_gives_identity_spec() {
    let (fed, model) = trained(FederationConfig::segmentation(), 1);
    let spec = calibrate_transform(&model, &fed.data().test, CorruptionKind::OcclusionOverlay, 0.0, 0.02, 0).unwrap();
    assert_eq!(spec.severity, Severity::Continuous(0.0));
    assert!(spec.severity.is_identity());
}

#[test]
fn occlusion_drop_grows_with_coverage() {
    let (fed, model) = trained(FederationConfig::segmentation(), 1);
    let test = &fed.data().test;
    let clean = test.evaluate(&model).unwrap();
    let at = |c: f64| measured_drop(&model, test, clean, &CorruptionSpec::continuous(CorruptionKind::OcclusionOverlay, c)).unwrap();
    assert!(at(0.8) >= at(0.2));
}

#[test]
fn calibration_hits_target_on_segmentation() {
    let (fed, model) = trained(FederationConfig::segmentation(), 2);
    let test = &fed.data().test;
    let clean = test.evaluate(&model).unwrap();
    let spec = calibrate_transform(&model, test, CorruptionKind::OcclusionOverlay, 0.2, 0.02, 0).unwrap();
    let drop = measured_drop(&model, test, clean, &spec).unwrap();
    assert!((0.18..=0.22).contains(&drop), "{drop}");
}

#[test]
fn unreachable_target_is_infeasible() {
    let (fed, model) = trained(FederationConfig::segmentation(), 1);
    let err = calibrate_transform(&model, &fed.data().test, CorruptionKind::Brightness, 0.99, 0.0, 0).unwrap_err();
    match err {
        Error::CalibrationInfeasible { max_drop, .. } => assert!(max_drop < 0.99),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn blur_has_no_continuous_knob() {
    let (fed, model) = trained(FederationConfig::segmentation(), 1);
    let err = calibrate_transform(&model, &fed.data().test, CorruptionKind::BoxBlur, 0.2, 0.02, 0).unwrap_err();
    assert!(err.is_config());
}

#[test]
fn border_only_change_barely_moves_accuracy() {
    let (fed, model) = trained(FederationConfig::default(), 1);
    let test = &fed.data().test;
    let clean = test.evaluate(&model).unwrap();
    let (h, w) = (test.height, test.width);
    let border = |r: usize, c: usize| r < 2 || c < 2 || r >= h - 2 || c >= w - 2;
    let bordered = test
        .evaluate_with(&model, |s| {
            let mut pixels = s.image.pixels.clone();
            for (i, p) in pixels.iter_mut().enumerate() {
                if border(i / w, i % w) {
                    *p = (*p + 0.1).min(1.0);
                }
            }
            Ok(Cow::Owned(Image::new(h, w, pixels)?))
        })
        .unwrap();
    assert!((clean - bordered) / clean < 0.05, "{clean} -> {bordered}");
}

#[test]
fn noisy_evaluation_is_repeatable() {
    let (fed, model) = trained(FederationConfig::default(), 1);
    let test = &fed.data().test;
    let spec = CorruptionSpec::level(CorruptionKind::GaussianNoise, 5);
    let a = test.evaluate_with(&model, corrupted_view(&spec)).unwrap();
    let b = test.evaluate_with(&model, corrupted_view(&spec)).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}
