use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umlab::masking::{build_compact_map, sample_grid, sample_uniform, PatchGrid};
use umlab::numerics::Tensor;
use umlab::patchio::{
    compose_compact_image, decode_pgm, decode_ppm, encode_pgm, encode_ppm, mask_image, normalize_targets, patchify,
    read_pgm, read_ppm, unpatchify, write_pgm, write_ppm, GrayImage, Image, TARGET_EPS,
};
use umlab::Error;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _, _| rng.random::<f64>())
}

#[test]
fn patch_count_and_constant_image() {
    let g = PatchGrid::new(2, 2, 16).unwrap();
    let t = patchify(&Image::filled(32, 32, 0.4), &g).unwrap();
    assert_eq!(t.shape(), &[4, 768]);
    for r in 1..4 {
        assert_eq!(t.row(r), t.row(0));
    }
}

#[test]
fn patchify_rejects_extent_mismatch() {
    let g = PatchGrid::new(2, 2, 16).unwrap();
    assert!(matches!(patchify(&Image::filled(32, 48, 0.0), &g), Err(Error::InvalidArgument(_))));
}

#[test]
fn patch_layout_matches_pixel_coordinates() {
    let img = random_image(8, 16, 3);
    let g = PatchGrid::new(2, 4, 4).unwrap();
    let t = patchify(&img, &g).unwrap();
    // Patch (1, 2), pixel (3, 1), channel 2.
    let k = 6;
    assert_eq!(t.row(k)[(3 * 4 + 1) * 3 + 2], img.at(2, 4 + 3, 8 + 1));
}

#[test]
fn compact_image_of_quarter_area() {
    let img = random_image(256, 256, 1);
    let plan = sample_uniform(PatchGrid::new(16, 16, 16).unwrap(), 4).unwrap();
    let map = build_compact_map(&plan).unwrap();
    let c = compose_compact_image(&img, &plan, &map).unwrap();
    assert_eq!((c.height, c.width), (128, 128));

    let flat = Image::filled(64, 64, 0.25);
    let gs = sample_grid(PatchGrid::new(4, 4, 16).unwrap(), 0).unwrap();
    let c = compose_compact_image(&flat, &gs, &build_compact_map(&gs).unwrap()).unwrap();
    assert!(c.data.iter().all(|&v| v == 0.25));
}

#[test]
fn compact_image_rejects_inconsistent_map() {
    let img = random_image(64, 64, 1);
    let plan = sample_uniform(PatchGrid::new(4, 4, 16).unwrap(), 9).unwrap();
    let mut map = build_compact_map(&plan).unwrap();
    map.to_compact.swap(0, 1);
    assert!(compose_compact_image(&img, &plan, &map).is_err());
}

#[test]
fn normalize_closed_forms() {
    let t = Tensor::from_fn(&[2, 4], |i| if i < 4 { 0.7 } else { (i % 2) as f64 });
    let r = normalize_targets(&t, &[0, 1], TARGET_EPS).unwrap();
    assert!(r.targets.row(0).iter().all(|&v| v == 0.0));
    let want = 0.5 / (0.25 + TARGET_EPS).sqrt();
    for (i, &v) in r.targets.row(1).iter().enumerate() {
        let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
        assert!((v - sign * want).abs() < 1e-12);
    }
    assert!((r.mean[1] - 0.5).abs() < 1e-15);
}

#[test]
fn ppm_white_pixel_and_magic() {
    assert_eq!(encode_ppm(&Image::filled(1, 1, 1.0)), b"P6\n1 1\n255\n\xff\xff\xff".to_vec());
    assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\xff"), Err(Error::Format(_))));
    assert!(matches!(decode_ppm(b"P6\n2 1\n255\n\xff\xff\xff"), Err(Error::Format(_))));
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = random_image(20, 12, 8);
    write_ppm(&img, dir.path().join("a.ppm")).unwrap();
    let back = read_ppm(dir.path().join("a.ppm")).unwrap();
    let worst = img.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1.0 / 255.0);

    let plan = sample_uniform(PatchGrid::new(4, 6, 16).unwrap(), 2).unwrap();
    let m = mask_image(&plan);
    write_pgm(&m, dir.path().join("m.pgm")).unwrap();
    assert_eq!(read_pgm(dir.path().join("m.pgm")).unwrap(), m);
    assert_eq!(m.data.iter().filter(|&&v| v == 255).count(), 6);
    let g = GrayImage {
        height: 1,
        width: 3,
        data: vec![0, 128, 255],
    };
    assert_eq!(decode_pgm(&encode_pgm(&g)).unwrap(), g);
}

fn even_grid() -> impl Strategy<Value = PatchGrid> {
    (1usize..=4, 1usize..=4, 1usize..=4).prop_map(|(r, c, p)| PatchGrid::new(2 * r, 2 * c, p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unpatchify_inverts_patchify(g in even_grid(), seed in any::<u64>()) {
        let img = random_image(g.rows * g.patch_size, g.cols * g.patch_size, seed);
        let back = unpatchify(&patchify(&img, &g).unwrap(), &g).unwrap();
        prop_assert_eq!(back, img);
    }

    // Index-map oracle: compact patch k is full patch to_compact[k].
    #[test]
    fn compact_patches_follow_the_map(g in even_grid(), seed in any::<u64>()) {
        let img = random_image(g.rows * g.patch_size, g.cols * g.patch_size, seed);
        let plan = sample_uniform(g, seed).unwrap();
        let map = build_compact_map(&plan).unwrap();
        let compact = compose_compact_image(&img, &plan, &map).unwrap();
        let ft = patchify(&img, &g).unwrap();
        let p = g.patch_size;
        for (k, &f) in map.to_compact.iter().enumerate() {
            let (i, j) = (k / (g.cols / 2), k % (g.cols / 2));
            let mut patch = Vec::new();
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..3 {
                        patch.push(compact.at(ch, i * p + py, j * p + px));
                    }
                }
            }
            prop_assert_eq!(patch.as_slice(), ft.row(f));
        }
    }

    #[test]
    fn targets_are_standardized(seed in any::<u64>(), shift in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&[3, 48], |_| rng.random_range(-1.0..1.0));
        let r = normalize_targets(&t, &[0, 2], TARGET_EPS).unwrap();
        for (i, src) in [0, 2].into_iter().enumerate() {
            let moments = |row: &[f64]| {
                let mean = row.iter().sum::<f64>() / 48.0;
                (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 48.0)
            };
            let (mean, var) = moments(r.targets.row(i));
            let (_, raw_var) = moments(t.row(src));
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-5);
            prop_assert!((var - raw_var / (raw_var + TARGET_EPS)).abs() < 1e-12);
        }
        let shifted = Tensor::from_fn(&[3, 48], |i| t.data()[i] + shift);
        let s = normalize_targets(&shifted, &[0, 2], TARGET_EPS).unwrap();
        prop_assert!(s.targets.max_abs_diff(&r.targets).unwrap() < 1e-9);
    }
}
