//! Analytic gradients against central finite differences of an independent
//! f64 forward pass (step 1e-3, relative error at most 1e-3).

mod support;

use carprune::Network;
use support::gradcheck::{gradient_check, random_batch, small_network};

#[test]
fn analytic_gradients_match_finite_differences() {
    let net = small_network();
    for seed in [32, 33, 34] {
        check_batch(&net, seed);
    }
}

fn check_batch(net: &Network, seed: u64) {
    let (batch, labels) = random_batch(4, seed);
    let report = gradient_check(net, &batch, &labels);
    eprintln!(
        "checked {} entries ({} with a reduced step at kinks, {} skipped), worst relative error {:.2e}",
        report.checked, report.refined, report.skipped, report.worst
    );
    assert!(report.violations.is_empty(), "{:#?}", report.violations);
    assert!(report.loss_gap < 1e-5, "loss gap {}", report.loss_gap);
    assert_eq!(report.skipped, 0, "kink crossings even at the smallest step");
}
