use icl_core::verify::{run_group, SuiteOptions, GROUPS};

fn quick() -> SuiteOptions {
    SuiteOptions {
        grad_seeds: 3,
        metric_pairs: 120,
        ..Default::default()
    }
}

#[test]
fn every_group_passes() {
    for name in GROUPS {
        let r = run_group(name, &quick()).unwrap();
        let failed: Vec<_> = r
            .failures()
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        assert!(failed.is_empty(), "{name}: {failed:?}");
        assert!(!r.checks.is_empty(), "{name} ran no checks");
    }
}

#[test]
fn flipped_softmax_backward_is_caught() {
    let opts = SuiteOptions {
        flip_softmax_backward: true,
        ..quick()
    };
    let r = run_group("gradients", &opts).unwrap();
    assert!(!r.passed());
    assert!(
        r.failures().count() >= 3,
        "only {} cases noticed",
        r.failures().count()
    );
}

#[test]
fn unknown_group_is_an_error() {
    assert!(run_group("everything", &quick()).is_err());
}
