mod common;

use common::{column, krum_oracle, median_oracle, random_rows, trimmed_oracle, updates, COORDS};
use fedsel_core::strategies::{aggregate, default_schema, validate_config, StrategyConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(config: &StrategyConfig, rows: &[Vec<f64>]) -> Vec<f64> {
    let ups = updates(rows);
    aggregate(config, &ups, &ups[0].params).unwrap().flatten()
}

#[test]
fn aggregators_equal_brute_force_references() {
    let schema = default_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for n in [3usize, 4, 5] {
        for _ in 0..200 {
            let rows = random_rows(&mut rng, n);
            assert_eq!(run(&StrategyConfig::fed_median(), &rows), median_oracle(&rows));
            let beta = (rng.random_range(0.0..0.49f64) * 1e4).round() / 1e4;
            assert_eq!(run(&StrategyConfig::fed_trimmed_avg(beta), &rows), trimmed_oracle(&rows, beta));
            let f = rng.random_range(0..=n - 3);
            let m = rng.random_range(1..=n);
            let krum = validate_config(&StrategyConfig::krum(f as i64, m as i64).to_raw(), &schema, n).unwrap();
            assert_eq!(run(&krum, &rows), krum_oracle(&rows, f, m), "n={n} f={f} m={m}");
        }
    }
}

#[test]
fn single_outlier_is_neutralised() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..100 {
        let n = rng.random_range(4..8);
        let mut rows = random_rows(&mut rng, n - 1);
        for r in &mut rows {
            r.iter_mut().for_each(|v| *v /= 10.0);
        }
        let scale = 10f64.powi(rng.random_range(3..9));
        let outlier: Vec<f64> = (0..COORDS).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let at = rng.random_range(0..n);
        rows.insert(at, outlier);
        let honest: Vec<&Vec<f64>> = rows.iter().enumerate().filter(|(i, _)| *i != at).map(|(_, r)| r).collect();
        let med = run(&StrategyConfig::fed_median(), &rows);
        for c in 0..COORDS {
            let lo = honest.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
            let hi = honest.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
            assert!(med[c] >= lo && med[c] <= hi);
        }
        let krum = run(&StrategyConfig::krum(1, 1), &rows);
        assert!(honest.iter().any(|r| **r == krum));
    }
}

proptest! {
    #[test]
    fn aggregate_ignores_arrival_order(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, COORDS), 4..7),
    ) {
        let ups = updates(&rows);
        let mut reversed = ups.clone();
        reversed.reverse();
        for cfg in [
            StrategyConfig::fed_avg(),
            StrategyConfig::fed_median(),
            StrategyConfig::fed_trimmed_avg(0.25),
            StrategyConfig::krum(1, 2),
        ] {
            prop_assert_eq!(
                aggregate(&cfg, &ups, &ups[0].params).unwrap(),
                aggregate(&cfg, &reversed, &ups[0].params).unwrap()
            );
        }
    }

    #[test]
    fn robust_outputs_stay_in_coordinate_range(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, COORDS), 3..7),
    ) {
        for cfg in [StrategyConfig::fed_avg(), StrategyConfig::fed_median(), StrategyConfig::fed_trimmed_avg(0.3)] {
            let out = run(&cfg, &rows);
            for (c, v) in out.iter().enumerate() {
                let col = column(&rows, c);
                prop_assert!(col.iter().any(|x| x <= v) && col.iter().any(|x| x >= v));
            }
        }
    }

    #[test]
    fn identical_updates_are_a_fixed_point(row in prop::collection::vec(-5.0f64..5.0, COORDS), n in 3usize..6) {
        let rows = vec![row.clone(); n];
        for cfg in [StrategyConfig::fed_avg(), StrategyConfig::fed_median(), StrategyConfig::fed_trimmed_avg(0.2), StrategyConfig::krum(0, 2)] {
            prop_assert_eq!(run(&cfg, &rows), row.clone());
        }
    }
}
