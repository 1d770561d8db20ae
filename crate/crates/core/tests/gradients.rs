use pdfuse::autodiff::GradCheckConfig;
use pdfuse::gradsuite::{cases, run_suite};

#[test]
fn every_case_passes_over_ten_seeds() {
    let cfg = GradCheckConfig::default();
    let outcomes = run_suite(10, None, &cfg).unwrap();
    assert_eq!(outcomes.len(), cases().len());
    for o in &outcomes {
        println!(
            "{:20} coords {:6} kinks {:3} max rel err {:.3e} (seed {}, {})",
            o.name, o.coords, o.kinks, o.max_rel_error, o.worst_seed, o.worst_input
        );
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    assert!(failed.is_empty(), "failing cases: {failed:?}");
}
