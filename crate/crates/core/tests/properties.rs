mod common;

use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 512, ..ProptestConfig::default() })]

    #[test]
    fn printed_expressions_reparse_to_the_same_tree(tree in arb_tree(3)) {
        check_round_trip(tree, 3).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn tree_evaluator_matches_stack_machine(
        tree in arb_tree(2),
        point in prop::array::uniform2(-3.0f64..3.0),
    ) {
        check_evaluator(tree, 2, &point).map_err(TestCaseError::fail)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1024, ..ProptestConfig::default() })]

    #[test]
    fn evaluator_agreement_on_many_pairs(tree in arb_tree(1), y in -2.0f64..2.0) {
        check_evaluator(tree, 1, &[y]).map_err(TestCaseError::fail)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn parseval((sizes, values) in arb_grid_values()) {
        check_parseval(&sizes, values).map_err(TestCaseError::fail)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn poisson_plug_back(rhs in arb_zero_mean_rhs()) {
        check_poisson_plug_back(&rhs).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn measure_is_invariant_under_coefficient_scaling(c in arb_coefficients(), scale in 0.1f64..10.0) {
        check_measure_scaling(&c, scale).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn laminated_measure_reduces_to_one_dimension(l in arb_laminated()) {
        check_laminated_reduction(&l).map_err(TestCaseError::fail)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn effective_tensor_follows_axis_swap(c in arb_centered_2d()) {
        check_permutation_equivariance(&c).map_err(TestCaseError::fail)?;
    }
}
