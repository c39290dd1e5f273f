mod common;

use common::{max_abs_diff, percentile, random_profile, two_stain_image, unit};
use fedpath_core::imaging::stain::{
    angle_deg, default_reference_image, default_reference_profile, estimate_profile_from_image,
    lab_pixels, macenko_normalize, reinhard_normalize, reinhard_transfer_lab, LabStats,
    StainProfile,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn macenko_recovers_constructed_stains() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..8 {
        let (h, e) = random_profile(&mut rng);
        let (img, ch, ce) = two_stain_image(h, e, trial);
        let p = estimate_profile_from_image(&img).unwrap();
        let (eh, ee) = (
            angle_deg(p.stain_matrix[0], h),
            angle_deg(p.stain_matrix[1], e),
        );
        assert!(
            eh < 2.0 && ee < 2.0,
            "trial {trial}: angles {eh:.3} {ee:.3}"
        );
        let (th, te) = (percentile(&ch, 99.0), percentile(&ce, 99.0));
        let rh = (p.max_conc[0] - th).abs() / th;
        let re = (p.max_conc[1] - te).abs() / te;
        assert!(
            rh < 0.05 && re < 0.05,
            "trial {trial}: max_conc {:?} vs {th} {te}",
            p.max_conc
        );
    }
}

#[test]
fn recovery_is_not_tied_to_default_directions() {
    let (h, e) = (unit(60.0, 40.0), unit(50.0, 75.0));
    let (img, _, _) = two_stain_image(h, e, 3);
    let p = estimate_profile_from_image(&img).unwrap();
    assert!(angle_deg(p.stain_matrix[0], h) < 2.0);
    assert!(angle_deg(p.stain_matrix[1], e) < 2.0);
}

#[test]
fn identity_normalization_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..4 {
        let (h, e) = random_profile(&mut rng);
        let (img, _, _) = two_stain_image(h, e, 100 + trial);
        let p = estimate_profile_from_image(&img).unwrap();
        let out = macenko_normalize(&img, &p, &p).unwrap();
        assert!(max_abs_diff(&img, &out) <= 2);
        let q = StainProfile::new(h, e, [1.0, 1.0]).unwrap();
        assert!(max_abs_diff(&img, &macenko_normalize(&img, &q, &q).unwrap()) <= 2);
    }
}

#[test]
fn reinhard_matches_target_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let target = LabStats::of_image(&default_reference_image());
    for trial in 0..4 {
        let (h, e) = random_profile(&mut rng);
        let (img, _, _) = two_stain_image(h, e, 200 + trial);
        let lab = reinhard_transfer_lab(&img, &target).unwrap();
        let got = LabStats::of_lab(&lab);
        for c in 0..3 {
            assert!((got.mean[c] - target.mean[c]).abs() < 1e-2);
            assert!((got.std[c] - target.std[c]).abs() < 1e-2);
        }
        // After quantization the match is looser but still close.
        let out = reinhard_normalize(&img, &target).unwrap();
        let q = LabStats::of_lab(&lab_pixels(&out));
        for c in 0..3 {
            assert!((q.mean[c] - target.mean[c]).abs() < 0.05);
        }
    }
}

#[test]
fn normalization_maps_toward_reference_appearance() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (h, e) = random_profile(&mut rng);
    let (img, _, _) = two_stain_image(h, e, 300);
    let reference = default_reference_profile();
    let src = estimate_profile_from_image(&img).unwrap();
    let out = macenko_normalize(&img, &src, &reference).unwrap();
    let after = estimate_profile_from_image(&out).unwrap();
    assert!(angle_deg(after.stain_matrix[0], reference.stain_matrix[0]) < 2.0);
    assert!(angle_deg(after.stain_matrix[1], reference.stain_matrix[1]) < 2.0);
}
