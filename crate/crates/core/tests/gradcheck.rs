use hscope::hslayer::EncoderArch;
use hscope::training::{
    encoder_case, gc_case, gradcheck, layer_case, orl_case, pose_case, ste_case, CaseShape, CheckCase, GradReport,
    DEFAULT_STEP,
};
use hscope::Result;

fn check(build: impl Fn(u64) -> Result<CheckCase>, tol: f64, seed: u64) -> GradReport {
    let report = gradcheck(build, tol, 50, DEFAULT_STEP, seed).unwrap();
    for g in &report.groups {
        eprintln!(
            "{:12} checked {:3} max rel err {:.3e}",
            g.group, g.checked, g.max_rel_err
        );
    }
    assert!(report.passed(), "{:#?}", report.failing().collect::<Vec<_>>());
    report
}

#[test]
fn gc_small_spec_instance() {
    // N=16, M=3, S=2, D_in=4, D_out=3
    let shape = CaseShape {
        n: 16,
        d_in: 4,
        d_out: 3,
        supports: 2,
        m: 3,
    };
    for seed in 0..5 {
        check(|s| gc_case(shape, s), 1e-5, seed);
    }
}

#[test]
fn gc_default_instances_cover_fifty_per_group() {
    // one layer has only d_out * S * 3 = 48 direction entries, so count across instances
    let mut totals = std::collections::BTreeMap::new();
    for seed in [11, 12] {
        for g in check(|s| gc_case(CaseShape::default(), s), 1e-4, seed).groups {
            *totals.entry(g.group).or_insert(0) += g.checked;
        }
    }
    assert!(totals.values().all(|&c| c >= 50), "{totals:?}");
}

#[test]
fn ste_is_exact() {
    let shape = CaseShape {
        d_in: 8,
        d_out: 8,
        ..CaseShape::default()
    };
    check(|s| ste_case(shape, s), 1e-6, 3);
}

#[test]
fn orl_instance() {
    for seed in 0..3 {
        check(|s| orl_case(CaseShape::default(), s), 1e-4, seed);
    }
}

#[test]
fn layer_instances() {
    for first in [true, false] {
        for seed in 0..3 {
            check(|s| layer_case(CaseShape::default(), first, s), 1e-4, seed);
        }
    }
}

#[test]
fn encoder_instance() {
    let shape = CaseShape {
        n: 32,
        d_out: 8,
        ..CaseShape::default()
    };
    let r = check(|s| encoder_case(shape, s), 1e-4, 5);
    for group in ["gc.dirs", "gc.weights", "ste", "orl"] {
        let g = r.groups.iter().find(|g| g.group == group).unwrap();
        assert!(g.checked >= 50, "{group}: {}", g.checked);
    }
}

#[test]
fn pose_model_instance() {
    let arch = EncoderArch::parse("layer = 8 1 4\nlayer = 8 1 4\npool = 0 24 4\n").unwrap();
    check(|s| pose_case(&arch, 32, s), 1e-4, 2);
}

#[test]
fn corrupted_gradient_fails() {
    let shape = CaseShape {
        d_in: 4,
        d_out: 4,
        ..CaseShape::default()
    };
    let corrupt = |s| {
        let mut c = ste_case(shape, s)?;
        c.grad.values_mut()[5] *= 2.0;
        Ok(c)
    };
    let r = gradcheck(corrupt, 1e-4, 50, DEFAULT_STEP, 0).unwrap();
    assert!(!r.passed());
    let bad: Vec<_> = r.failing().collect();
    assert_eq!(bad.len(), 1);
    assert_eq!((bad[0].tensor.as_str(), bad[0].index), ("ste.weights", 5));
}
