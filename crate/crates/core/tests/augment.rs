use fedpath_core::augment::{
    balanced_indices_present, beta_sample, class_balanced_indices, dirichlet_sample, mixup,
    LabeledBatch,
};
use fedpath_core::nn::Tensor;
use fedpath_core::{Error, Grade, Magnification};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Moments of Beta(a, a): mean 1/2, variance 1 / (4·(2a + 1)).
fn beta_variance(a: f64) -> f64 {
    1.0 / (4.0 * (2.0 * a + 1.0))
}

#[test]
fn beta_moments_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws: Vec<f64> = (0..100_000)
        .map(|_| beta_sample(0.2, &mut rng).unwrap())
        .collect();
    assert!(draws.iter().all(|l| (0.0..=1.0).contains(l)));
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    assert!((beta_variance(0.2) - 0.178_571).abs() < 1e-6);
    assert!((var - beta_variance(0.2)).abs() < 0.005, "var {var}");
}

#[test]
fn beta_matches_moments_for_other_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for a in [0.05, 1.0, 4.0] {
        let draws: Vec<f64> = (0..50_000)
            .map(|_| beta_sample(a, &mut rng).unwrap())
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 0.5).abs() < 0.01, "a={a} mean {mean}");
        assert!((var - beta_variance(a)).abs() < 0.01, "a={a} var {var}");
    }
    assert!(matches!(
        beta_sample(0.0, &mut rng),
        Err(Error::InvalidArgument(_))
    ));
    assert!(beta_sample(f64::NAN, &mut rng).is_err());
}

/// Uniform(0, 1) has mean 1/2 and variance 1/12; Beta(1, 1) is that law.
#[test]
fn beta_one_one_is_uniform_by_deciles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bins = [0usize; 10];
    let n = 50_000;
    for _ in 0..n {
        let l = beta_sample(1.0, &mut rng).unwrap();
        bins[((l * 10.0) as usize).min(9)] += 1;
    }
    let expected = n as f64 / 10.0;
    let sigma = (n as f64 * 0.1 * 0.9).sqrt();
    for (i, &b) in bins.iter().enumerate() {
        assert!((b as f64 - expected).abs() < 4.0 * sigma, "decile {i}: {b}");
    }
}

fn batch(labels: &[Grade]) -> LabeledBatch {
    let b = labels.len();
    LabeledBatch::new(
        Tensor::from_fn(&[b, 3, 2, 2], |i| (i as f32 * 0.37).sin()),
        Tensor::from_fn(&[b, 3, 3, 3], |i| (i as f32 * 0.11).cos()),
        Tensor::new(
            vec![b, 3],
            labels.iter().flat_map(|g| g.one_hot()).collect(),
        )
        .unwrap(),
        vec![Magnification::X10; b],
    )
    .unwrap()
}

#[test]
fn mixed_label_rows_sum_to_one_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<Grade> = (0..64).map(|i| Grade::ALL[i % 3]).collect();
    let b = batch(&labels);
    for _ in 0..200 {
        let m = mixup(&b, 0.2, &mut rng).unwrap();
        for row in m.y.data().chunks(3) {
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(row.iter().map(|&v| v as f64).sum::<f64>(), 1.0, "{row:?}");
        }
    }
}

#[test]
fn balanced_sampler_equalizes_a_100_10_1_fixture() {
    let mut labels = vec![Grade::GradeI; 100];
    labels.extend(vec![Grade::GradeII; 10]);
    labels.push(Grade::GradeIII);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    let draws = class_balanced_indices(&labels, n, &mut rng).unwrap();
    let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    for g in Grade::ALL {
        let c = draws.iter().filter(|&&i| labels[i] == g).count() as f64;
        assert!((c - n as f64 / 3.0).abs() < 3.0 * sigma, "{g}: {c}");
    }
}

#[test]
fn sampler_rejects_missing_class_but_present_variant_copes() {
    let labels = vec![Grade::GradeI, Grade::GradeIII, Grade::GradeIII];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(matches!(
        class_balanced_indices(&labels, 10, &mut rng),
        Err(Error::EmptyClass(_))
    ));
    let draws = balanced_indices_present(&labels, 4000, &mut rng).unwrap();
    let first = draws.iter().filter(|&&i| i == 0).count() as f64 / 4000.0;
    assert!((first - 0.5).abs() < 0.03);
}

proptest! {
    #[test]
    fn mixup_weights_stay_in_unit_interval(seed in any::<u64>(), alpha in 0.01f64..5.0, n in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<Grade> = (0..n).map(|_| Grade::ALL[rng.random_range(0..3)]).collect();
        let m = mixup(&batch(&labels), alpha, &mut rng).unwrap();
        for row in m.y.data().chunks(3) {
            prop_assert_eq!(row.iter().map(|&v| v as f64).sum::<f64>(), 1.0);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dirichlet_is_a_probability_vector(seed in any::<u64>(), alpha in 1e-3f64..1e3, k in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = dirichlet_sample(alpha, k, &mut rng).unwrap();
        prop_assert_eq!(p.len(), k);
        prop_assert!(p.iter().all(|v| *v >= 0.0 && v.is_finite()));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
