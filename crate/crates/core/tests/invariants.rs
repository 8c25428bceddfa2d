//! Randomized invariants of every module, 1000 cases each.

mod common;

const CASES: u32 = 1000;

macro_rules! invariant {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                common::$name(CASES).unwrap();
            }
        )*
    };
}

invariant!(
    head_rows_on_simplex,
    similarity_symmetric,
    refinement_on_simplex,
    refinement_recovers_raw_near_one,
    membership_properties,
    weights_rows_identical,
    metrics_match_oracles,
    metrics_permutation_invariant,
    batches_partition,
    augment_keeps_shape_and_mass,
    idx_round_trip,
    autoencoder_preserves_shape,
);
