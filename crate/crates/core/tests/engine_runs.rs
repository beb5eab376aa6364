use fedsel_core::dataset::{generate_synthetic, PartitionSpec, Scenario};
use fedsel_core::engine::{fitness, run_federation, RunConfig, RunStatus};
use fedsel_core::model::{architecture_for, DEFAULT_HIDDEN};
use fedsel_core::strategies::StrategyConfig;

#[test]
fn iid_fed_avg_learns_over_thirty_rounds() {
    let data = generate_synthetic(1000, 10, 2, 0).unwrap();
    let parts = PartitionSpec::new(Scenario::Iid, 4, 0).apply(&data).unwrap();
    let cfg = RunConfig::new(StrategyConfig::fed_avg(), architecture_for(&data, &DEFAULT_HIDDEN), 0);
    let res = run_federation(&cfg, &parts);
    assert_eq!(res.status, RunStatus::Ok);
    let accs = res.weighted_accuracies();
    assert_eq!(accs.len(), 30);
    eprintln!("first {:.4} last {:.4}", accs[0], accs[29]);
    assert!(accs[29] >= accs[0] + 0.1, "first {} last {}", accs[0], accs[29]);
    assert!(fitness(&res) > 0.5);
}
