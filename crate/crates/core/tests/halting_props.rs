//! Property tests of the halting scan plus fuzzing against the brute-force
//! oracle.

mod common;

use common::oracle_scan;
use proptest::prelude::*;
use stas_core::halting::{scan_h_grid, AccumulationMode};
use stas_core::loss::ponder_value;

fn h_grid_strategy() -> impl Strategy<Value = (usize, usize, usize, f64, Vec<f64>)> {
    (1usize..4, 2usize..5, 1usize..6, 0.0f64..1.2)
        .prop_flat_map(|(t, l, k, eps)| {
            prop::collection::vec(0.0f64..1.0, t * l * k).prop_map(move |h| (t, l, k, eps, h))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn probability_mass_is_one_per_token_per_group((t, l, k, eps, h) in h_grid_strategy()) {
        for mode in [AccumulationMode::TwoDimensional, AccumulationMode::BlockOnly] {
            let trace = scan_h_grid(&h, t, l, k, eps, mode).unwrap();
            let groups = match mode {
                AccumulationMode::TwoDimensional => vec![1],
                AccumulationMode::BlockOnly => (1..=t).collect(),
            };
            for token in 0..k {
                for &g in &groups {
                    let mass = trace.p_sum(g, token);
                    prop_assert!((mass - 1.0).abs() < 1e-5, "mass {mass}");
                }
            }
            for &p in &trace.p {
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&p));
            }
            for &hv in &trace.h {
                prop_assert!((0.0..=1.0).contains(&hv));
            }
        }
    }

    #[test]
    fn totals_are_monotone_and_frozen_after_masking((t, l, k, eps, h) in h_grid_strategy()) {
        let trace = scan_h_grid(&h, t, l, k, eps, AccumulationMode::TwoDimensional).unwrap();
        let n_pos = t * l;
        for token in 0..k {
            let mut prev = 0.0;
            for s in 0..n_pos {
                let enter = trace.h_entering[s * k + token];
                prop_assert!(enter >= prev - 1e-12, "entering total decreased");
                // masked positions contribute nothing
                if !trace.active[s * k + token] {
                    prop_assert_eq!(trace.h[s * k + token], 0.0);
                }
                prev = enter;
            }
        }
    }

    #[test]
    fn natural_halt_total_is_bounded_by_single_step_overshoot((t, l, k, eps, h) in h_grid_strategy()) {
        let trace = scan_h_grid(&h, t, l, k, eps, AccumulationMode::TwoDimensional).unwrap();
        let threshold = 1.0 - eps;
        for ts in 1..=t {
            for token in 0..k {
                if let Some(slot) = trace.halt_slot(ts, token) {
                    if slot.natural {
                        let total = 1.0 - slot.r_raw; // accumulated score at masking
                        prop_assert!(total >= threshold - 1e-12);
                        // single-step overshoot: one score of at most 1 above
                        // the last sub-threshold total (which is at least 0)
                        prop_assert!(total < threshold.max(0.0) + 1.0 + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn raising_eps_moves_every_halt_weakly_earlier_on_a_fixed_trace((t, l, k, _eps, h) in h_grid_strategy()) {
        let flat = |slot: (usize, usize)| (slot.0 - 1) * l + (slot.1 - 1);
        let mut prev: Option<Vec<usize>> = None;
        for eps in [0.0, 0.05, 0.2, 0.5, 1.0] {
            let trace = scan_h_grid(&h, t, l, k, eps, AccumulationMode::TwoDimensional).unwrap();
            let positions: Vec<usize> = (0..k)
                .map(|token| {
                    (1..=t)
                        .find_map(|ts| trace.halt_slot(ts, token).map(|s| flat((ts, s.block))))
                        .unwrap()
                })
                .collect();
            if let Some(prev) = &prev {
                for (a, b) in prev.iter().zip(&positions) {
                    prop_assert!(b <= a, "halt moved later when eps rose: {a} -> {b}");
                }
            }
            prev = Some(positions);
        }
    }

    #[test]
    fn ponder_is_at_least_earliest_halt_index_over_timesteps((t, l, k, eps, h) in h_grid_strategy()) {
        let trace = scan_h_grid(&h, t, l, k, eps, AccumulationMode::TwoDimensional).unwrap();
        let v = ponder_value(&trace, false);
        let min_halt = (0..k)
            .map(|token| {
                (1..=t)
                    .find_map(|ts| trace.halt_index(ts, token))
                    .unwrap()
            })
            .min()
            .unwrap() as f64;
        prop_assert!(v > 0.0);
        prop_assert!(v >= min_halt / t as f64 - 1e-12, "ponder {v} vs bound {}", min_halt / t as f64);
    }

    #[test]
    fn avg_tokens_equals_unmasked_slot_fraction((t, l, k, eps, h) in h_grid_strategy()) {
        let trace = scan_h_grid(&h, t, l, k, eps, AccumulationMode::TwoDimensional).unwrap();
        let processed: usize = trace.processed_counts().iter().sum();
        prop_assert!((trace.avg_tokens() - processed as f64 / (t * l * k) as f64).abs() < 1e-12);
        let halted_end: usize = trace.halted_counts().iter().sum();
        prop_assert_eq!(halted_end + processed, t * l * k);
    }
}

#[test]
fn fuzzed_traces_match_brute_force_oracle_exactly() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for case in 0..200 {
        let t = rng.gen_range(1..=4);
        let l = rng.gen_range(2..=5);
        let k = rng.gen_range(1..=7);
        let eps = rng.gen_range(0.0..1.1);
        let h: Vec<f64> = (0..t * l * k).map(|_| rng.gen_range(0.0..1.0)).collect();
        for mode in [AccumulationMode::TwoDimensional, AccumulationMode::BlockOnly] {
            let trace = scan_h_grid(&h, t, l, k, eps, mode).unwrap();
            let oracle = oracle_scan(&h, t, l, k, eps, mode);
            for (token, want) in oracle.iter().enumerate() {
                for s in 0..t * l {
                    assert_eq!(trace.h[s * k + token], want.h[s], "case {case} h mismatch");
                    assert_eq!(
                        trace.h_entering[s * k + token], want.entering[s],
                        "case {case} entering mismatch"
                    );
                    assert_eq!(trace.active[s * k + token], want.active[s], "case {case} active");
                    assert_eq!(trace.p[s * k + token], want.p[s], "case {case} p mismatch at {s}");
                }
                let got_halts: Vec<(usize, usize, f64, f64)> = (1..=t)
                    .filter_map(|ts| {
                        trace
                            .halt_slot(ts, token)
                            .map(|sl| (ts, sl.block, sl.r, sl.r_raw))
                    })
                    .collect();
                assert_eq!(got_halts, want.halts, "case {case} halt slots");
            }
        }
    }
}
