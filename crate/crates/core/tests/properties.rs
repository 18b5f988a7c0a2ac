use dewarp_core::deform::{mesh_region_mask, random_mesh, DeformationSpec};
use dewarp_core::fitloss::rectification_loss;
use dewarp_core::fourier::{fft2, fourier_convert, ifft2, Blank, FourierConfig};
use dewarp_core::metrics::{cer, ms_ssim};
use dewarp_core::synthetic::{noise_texture, smooth_texture};
use dewarp_core::tps::{regular_grid, solve_tps, validate_mesh};
use dewarp_core::ImageBuf;
use proptest::prelude::*;

fn image(w: usize, h: usize, values: &[f64]) -> ImageBuf {
    ImageBuf::from_fn(w, h, |x, y| values[(y * w + x) % values.len()])
}

fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(ca != cb)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tps_interpolates_its_control_points(
        offsets in prop::collection::vec(-20.0f64..20.0, 50),
        rows in 3usize..6,
        cols in 3usize..6,
    ) {
        let src = regular_grid(rows, cols, 0.0, 0.0, 300.0, 200.0).unwrap();
        let mut k = 0;
        let dst = src.map_points(|p| {
            k += 2;
            [p[0] + offsets[(k - 2) % 50], p[1] + offsets[(k - 1) % 50]]
        });
        let c = solve_tps(&src, &dst).unwrap();
        for (s, d) in src.points().iter().zip(dst.points()) {
            let m = c.apply(*s);
            prop_assert!((m[0] - d[0]).abs() < 1e-7 && (m[1] - d[1]).abs() < 1e-7);
        }
    }

    #[test]
    fn fft_round_trip(w in 1usize..20, h in 1usize..20, values in prop::collection::vec(-1.0f64..1.0, 1..64)) {
        let img = image(w, h, &values);
        let back = ifft2(&fft2(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn converter_is_idempotent(beta in 0.0f64..0.5, blank in 0.0f64..1.0, seed in 0u64..1000) {
        let img = noise_texture(24, 20, seed);
        let cfg = FourierConfig::new(beta, Blank::Uniform(blank)).unwrap();
        let once = fourier_convert(&img, &cfg).unwrap();
        let twice = fourier_convert(&once, &cfg).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn converted_mean_is_the_blank(beta in 0.0f64..0.5, blank in 0.0f64..1.0, seed in 0u64..1000) {
        let img = smooth_texture(32, 24, 8.0, seed);
        let out = fourier_convert(&img, &FourierConfig::new(beta, Blank::Uniform(blank)).unwrap()).unwrap();
        prop_assert!((out.mean() - blank).abs() < 1e-9);
    }

    #[test]
    fn rectification_loss_is_a_symmetric_nonnegative_distance(
        a in prop::collection::vec(0.0f64..1.0, 30),
        b in prop::collection::vec(0.0f64..1.0, 30),
    ) {
        let (x, y) = (image(6, 5, &a), image(6, 5, &b));
        let ab = rectification_loss(&x, &y).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, rectification_loss(&y, &x).unwrap());
        prop_assert_eq!(rectification_loss(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn cer_matches_dp_and_is_bounded(h in "[abcé文]{0,50}", r in "[abcé文]{1,50}") {
        let (hc, rc): (Vec<char>, Vec<char>) = (h.chars().collect(), r.chars().collect());
        let got = cer(&h, &r).unwrap();
        prop_assert_eq!(got, levenshtein(&hc, &rc) as f64 / rc.len() as f64);
        prop_assert!(got <= hc.len().max(rc.len()) as f64 / rc.len() as f64);
        prop_assert_eq!(cer(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn random_meshes_are_fold_free_and_reproducible(seed in 0u64..10_000, sigma in 0.0f64..0.05) {
        let spec = DeformationSpec::new(seed, sigma);
        let m = random_mesh(&spec, 256, 192).unwrap();
        prop_assert!(validate_mesh(&m));
        prop_assert_eq!(m, random_mesh(&spec, 256, 192).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn ms_ssim_is_symmetric_and_bounded(s1 in 0u64..100, s2 in 0u64..100) {
        let a = smooth_texture(176, 176, 10.0, s1);
        let b = smooth_texture(176, 176, 10.0, s2);
        let ab = ms_ssim(&a, &b).unwrap();
        prop_assert!((ab - ms_ssim(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn region_mask_of_a_frame_grid_covers_the_interior() {
    let m = regular_grid(5, 5, -0.5, -0.5, 40.5, 30.5).unwrap();
    let mask = mesh_region_mask(&m, 40, 30).unwrap();
    assert!(mask.data().iter().all(|&v| v == 1.0));
}
