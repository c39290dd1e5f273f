mod common;

use common::gradcheck;

const COORDS: usize = 24;

#[test]
fn dense_matches_finite_differences() {
    for seed in 0..3 {
        let e = gradcheck::dense(COORDS, seed);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}

#[test]
fn conv_matches_finite_differences() {
    for (seed, stride) in [(0, 1), (1, 2), (2, 2)] {
        let e = gradcheck::conv(COORDS, seed, stride);
        assert!(e < 1e-3, "seed {seed} stride {stride}: {e}");
    }
}

#[test]
fn relu_gap_dropout_match_finite_differences() {
    for seed in 0..3 {
        assert!(gradcheck::relu_op(COORDS, seed) < 1e-3);
        assert!(gradcheck::gap(COORDS, seed) < 1e-3);
        assert!(gradcheck::dropout_op(COORDS, seed) < 1e-3);
    }
}

#[test]
fn softmax_xent_matches_finite_differences() {
    for seed in 0..3 {
        let e = gradcheck::softmax_xent_op(COORDS, seed);
        assert!(e < 1e-3, "seed {seed}: {e}");
    }
}

#[test]
fn full_model_matches_finite_differences() {
    let e = gradcheck::full_model(COORDS, 11);
    assert!(e < 1e-2, "{e}");
}
