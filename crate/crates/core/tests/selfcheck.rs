use std::time::Instant;

use avfusion::selfcheck::{run, SelfCheckConfig};

#[test]
fn default_suite_passes_quickly() {
    let start = Instant::now();
    let report = run(&SelfCheckConfig::default()).unwrap();
    let failures: Vec<_> = report.failures().collect();
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(report.outcomes.len() > 20);
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn perturbed_gradients_are_caught() {
    let cfg = SelfCheckConfig {
        instances: 10,
        perturb_analytic: 1e-2,
        ..SelfCheckConfig::default()
    };
    let report = run(&cfg).unwrap();
    let grads: Vec<_> = report
        .outcomes
        .iter()
        .filter(|o| o.name.starts_with("gradient/"))
        .collect();
    assert!(!grads.is_empty());
    assert!(grads.iter().all(|o| !o.passed), "{grads:#?}");
    assert!(report
        .outcomes
        .iter()
        .filter(|o| !o.name.starts_with("gradient/"))
        .all(|o| o.passed));
}
