use driftscape::corruptions::CorruptionKind;
use driftscape::experiments::{run_ablation, AblationSettings, NoProgress};
use driftscape::federation::FederationConfig;

#[test]
fn contrast_hurts_stripes_more_than_brightness() {
    let cfg = FederationConfig::default();
    let kinds = [CorruptionKind::Contrast, CorruptionKind::Brightness];
    let entries = run_ablation(&cfg, &[1, 2, 3], &kinds, AblationSettings::default(), &NoProgress).unwrap();
    assert_eq!(entries.len(), 2);
    let (contrast, brightness) = (&entries[0], &entries[1]);
    assert!(contrast.cd_delta_rel > brightness.cd_delta_rel);
    assert!(contrast.cf_delta_rel > brightness.cf_delta_rel);
}
