mod common;

use fcmfwi::app::report_text;
use fcmfwi::config::RunConfig;
use fcmfwi::fwi;
use fcmfwi_core::optimize::StopReason;

fn tiny(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::parse_with(common::TINY, &o).unwrap()
}

#[test]
fn homogeneous_truth_with_identical_pipelines_exits_early() {
    let cfg = tiny(&[
        "domain.defects=[]",
        "discretization.synthesis_h_factor=1",
        "discretization.synthesis_p_increase=0",
    ]);
    let syn = fwi::synthesize(&cfg).unwrap();
    let r = fwi::invert(&cfg, &syn.traces).unwrap();
    let chi = r.stages[0].chi();
    assert!(chi[0] < 1e-20, "chi = {}", chi[0]);
    assert_eq!(r.stages.len(), 1);
    assert!(r.early_exit && r.nothing_to_refine);
    assert_eq!(r.stages[0].reason, StopReason::Stationary);
    assert!(r.grid.gammas().iter().all(|&g| g == 1.0));
}

#[test]
fn defect_gives_positive_misfit_that_decreases() {
    let cfg = tiny(&[]);
    let syn = fwi::synthesize(&cfg).unwrap();
    let r = fwi::invert(&cfg, &syn.traces).unwrap();
    for st in &r.stages {
        let chi = st.chi();
        assert!(chi[0] > 0.0);
        assert!(chi.windows(2).all(|w| w[1] <= w[0]), "{chi:?}");
    }
    assert!(r.stages[0].final_chi() < r.stages[0].chi()[0]);
    let (lo, hi) = (cfg.inversion.gamma_min, cfg.inversion.gamma_max);
    assert!(r.grid.gammas().iter().all(|g| (lo..=hi).contains(g)));
}

#[test]
fn runs_are_deterministic() {
    let cfg = tiny(&[]);
    let syn = fwi::synthesize(&cfg).unwrap();
    let again = fwi::synthesize(&cfg).unwrap();
    for (a, b) in syn.traces.iter().zip(&again.traces) {
        assert_eq!(a, b);
    }
    let a = fwi::invert(&cfg, &syn.traces).unwrap();
    let b = fwi::invert(&cfg, &syn.traces).unwrap();
    assert_eq!(a.grid.gammas(), b.grid.gammas());
    let strip = |s: String| s.split("\n[timings]").next().unwrap().to_string();
    assert_eq!(strip(report_text(&a)), strip(report_text(&b)));
}

#[test]
fn warm_start_inherits_and_restart_resets() {
    let warm = tiny(&["inversion.strategy=\"warm-start\""]);
    let restart = tiny(&["inversion.strategy=\"restart\""]);
    let syn = fwi::synthesize(&warm).unwrap();
    let w = fwi::invert(&warm, &syn.traces).unwrap();
    let r = fwi::invert(&restart, &syn.traces).unwrap();
    assert_eq!(w.stages.len(), 2);
    assert_eq!(r.stages.len(), 2);
    // stage 2 starts where stage 1 ended (warm) or at the homogeneous misfit
    let s1 = w.stages[0].final_chi();
    let w0 = w.stages[1].chi()[0];
    assert!((w0 - s1).abs() <= 1e-9 * s1, "{w0} vs {s1}");
    let r0 = r.stages[1].chi()[0];
    let h0 = r.stages[0].chi()[0];
    assert!((r0 - h0).abs() <= 1e-9 * h0, "{r0} vs {h0}");
}
