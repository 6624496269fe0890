mod common;

use archleak_core::arch::{receptive_field_of_stack, spec_for_step};
use archleak_grad::nn::Window;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn hand_cases_seven_and_eleven() {
    let named = |ws: &[Window]| ws.iter().enumerate().map(|(i, w)| (format!("l{i}"), *w)).collect::<Vec<_>>();
    assert_eq!(receptive_field_of_stack(&named(&[Window::new(7, 2, 3)])).total, 7);
    assert_eq!(receptive_field_of_stack(&named(&[Window::new(3, 2, 1), Window::new(3, 2, 1)])).total, 7);
    assert_eq!(receptive_field_of_stack(&named(&[Window::new(7, 2, 3), Window::new(3, 2, 1)])).total, 11);
    common::probe_stack(&[Window::new(7, 2, 3)], 21, 0).unwrap();
    common::probe_stack(&[Window::new(3, 2, 1), Window::new(3, 2, 1)], 21, 0).unwrap();
}

#[test]
fn ladder_paths_match_the_probe() {
    // GELU steps only: dead ReLU units would hide part of the field.
    for step in 9..=12 {
        for side in [16, 32] {
            let spec = spec_for_step(step, 10, [3, side, side]).unwrap().desk(16);
            common::probe_spec(&spec, u64::from(step)).unwrap();
        }
    }
}

#[test]
fn unclipped_stack_spans_the_whole_field() {
    let stack = [Window::new(3, 1, 0), Window::new(3, 2, 0), Window::new(3, 1, 0)];
    common::probe_stack(&stack, 31, 3).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_stacks_match_the_probe(seed in any::<u64>(), side in 9usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = common::random_stack(&mut rng, side);
        prop_assert_eq!(common::probe_stack(&stack, side, seed), Ok(()));
    }
}
