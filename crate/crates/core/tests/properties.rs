mod common;

fn run(check: common::Check) {
    match check {
        Ok(msg) => eprintln!("{msg}"),
        Err(msg) => panic!("{msg}"),
    }
}

#[test]
fn legendre_functions_are_bounded_by_three() {
    run(common::bos_bound());
}

#[test]
fn legendre_gram_matrix_is_identity() {
    run(common::gram_identity());
}

#[test]
fn basis_change_round_trips() {
    run(common::change_basis_consistency());
}

#[test]
fn pullback_preserves_polynomial_values() {
    run(common::pullback_consistency());
}

#[test]
fn finite_difference_orders() {
    run(common::fd_order());
}

#[test]
fn l1_projection_is_nearest_point() {
    run(common::projection_matches_brute_force());
}

#[test]
fn l1_projection_matches_threshold_search() {
    run(common::projection_matches_threshold_search());
}

#[test]
fn bpdn_agrees_with_enumeration() {
    run(common::bpdn_matches_oracle());
}

mod randomized {
    use dynrec_core::dictionary::{all_columns, change_basis, BasisIndex, Basis};
    use dynrec_core::linalg::norm1;
    use dynrec_core::recovery::{required_bursts, BoundMode};
    use dynrec_core::sparse_solver::project_l1_ball;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn projection_stays_in_ball(v in prop::collection::vec(-10.0f64..10.0, 1..40), tau in 0.0f64..20.0) {
            let p = project_l1_ball(&v, tau);
            prop_assert!(norm1(&p) <= tau * (1.0 + 1e-12) + 1e-15);
            // idempotent
            let q = project_l1_ball(&p, tau);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn column_positions_round_trip(n in 1usize..30) {
            for (pos, idx) in all_columns(n).into_iter().enumerate() {
                prop_assert_eq!(idx.position(n), pos);
                prop_assert_eq!(BasisIndex::from_position(pos, n), Some(idx));
            }
        }

        #[test]
        fn basis_change_is_linear(n in 1usize..6, seed in any::<u64>(), alpha in -3.0f64..3.0) {
            use rand::{Rng, SeedableRng};
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cols = all_columns(n);
            let a: Vec<f64> = (0..cols.len()).map(|_| r.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..cols.len()).map(|_| r.random_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + y).collect();
            let ta = change_basis(&cols, &a, Basis::Monomial, Basis::Legendre).unwrap();
            let tb = change_basis(&cols, &b, Basis::Monomial, Basis::Legendre).unwrap();
            let tm = change_basis(&cols, &mix, Basis::Monomial, Basis::Legendre).unwrap();
            for i in 0..cols.len() {
                prop_assert!((tm[i] - (alpha * ta[i] + tb[i])).abs() <= 1e-12);
            }
        }

        #[test]
        fn burst_bound_grows_with_dictionary(s in 1usize..10, extra in 1usize..1000, more in 1usize..1000) {
            let small = required_bursts(s, s + extra, 0.5, BoundMode::Effective, 3.2).unwrap();
            let large = required_bursts(s, s + extra + more, 0.5, BoundMode::Effective, 3.2).unwrap();
            prop_assert!(small <= large);
            let theo = required_bursts(s, s + extra, 0.1, BoundMode::Theoretical, 3.2).unwrap();
            prop_assert!(theo >= small);
        }
    }
}
