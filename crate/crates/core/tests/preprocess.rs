use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trackdepth::dataset::{Frame, Sequence};
use trackdepth::preprocess::*;
use trackdepth::synthworld::{CameraMode, SceneSpec};
use trackdepth::{BoxXywh, Tensor};

fn sequence(seed: u64) -> Sequence {
    SceneSpec::random(seed, 16, 160, 120, CameraMode::Moving)
        .unwrap()
        .render_sequence("s")
        .unwrap()
}

fn noise_frame(w: usize, h: usize, seed: u64) -> Frame {
    let mut s = seed | 1;
    Frame {
        width: w,
        height: h,
        rgb: (0..w * h * 3)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 56) as u8
            })
            .collect(),
    }
}

/// Sorted, deduplicated index sets of at most 12 frames below 20.
fn index_set() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(0usize..20, 1..=12).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sampler_draws_only_from_open_windows(p in index_set(), pick in any::<prop::sample::Index>(), range in 1usize..7, seed in any::<u64>()) {
        let t = p[pick.index(p.len())];
        let before: Vec<usize> = p.iter().copied().filter(|&i| i + range > t && i < t).collect();
        let after: Vec<usize> = p.iter().copied().filter(|&i| i > t && i < t + range).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let f = sample_frame_pair(&p, t, range, &mut rng).unwrap();
            prop_assert_eq!(f.t, t);
            prop_assert!(f.t_prev <= t && t <= f.t_next);
            if before.is_empty() { prop_assert_eq!(f.t_prev, t) } else { prop_assert!(before.contains(&f.t_prev)) }
            if after.is_empty() { prop_assert_eq!(f.t_next, t) } else { prop_assert!(after.contains(&f.t_next)) }
        }
    }

    #[test]
    fn sampler_rejects_indices_outside_the_set(p in index_set(), t in 0usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        prop_assert_eq!(sample_frame_pair(&p, t, 5, &mut rng).is_ok(), p.contains(&t));
    }

    #[test]
    fn padding_mask_matches_geometry(cx in -20.0f64..180.0, cy in -20.0f64..140.0, side in 4.0f64..120.0, out in 4usize..40) {
        let b = BoxXywh::new(cx - side / 8.0, cy - side / 8.0, side / 4.0, side / 4.0);
        let spec = CropSpec::around(&b, 4.0, out).unwrap();
        let m = spec.padding_mask(160, 120);
        let x0 = cx - side / 2.0;
        let y0 = cy - side / 2.0;
        for j in 0..out {
            for i in 0..out {
                let x = x0 + (i as f64 + 0.5) * side / out as f64;
                let y = y0 + (j as f64 + 0.5) * side / out as f64;
                let outside = !(0.0..160.0).contains(&x) || !(0.0..120.0).contains(&y);
                prop_assert_eq!(m.at3(0, j, i), f64::from(u8::from(outside)), "pixel ({}, {})", i, j);
            }
        }
    }

    #[test]
    fn padding_mask_ignores_image_content(seed in any::<u64>(), x in 0.0f64..140.0, y in 0.0f64..100.0) {
        let b = BoxXywh::new(x, y, 20.0, 15.0);
        let (_, m1, s1) = crop_pad(&noise_frame(160, 120, seed), &b, 4.0, 32).unwrap();
        let (_, m2, s2) = crop_pad(&noise_frame(160, 120, seed ^ 99), &b, 4.0, 32).unwrap();
        prop_assert_eq!(s1, s2);
        prop_assert_eq!(m1, m2);
    }

    #[test]
    fn flip_mirrors_every_field(seed in 0u64..50, t in 1usize..15) {
        let seq = sequence(3);
        let cfg = SampleConfig { search_side: 32, template_side: 16, ..SampleConfig::default() }.without_augmentation();
        let s = build_sample(&seq, t, &cfg, true, seed).unwrap();
        let flip = AugmentDraw { flip: true, ..AugmentDraw::default() };
        let f = augment(&s, &flip);
        let w = s.search_side() as f64;
        prop_assert_eq!(f.gt_box.x, w - s.gt_box.x - s.gt_box.w);
        prop_assert_eq!((f.gt_box.y, f.gt_box.w, f.gt_box.h), (s.gt_box.y, s.gt_box.w, s.gt_box.h));
        prop_assert_eq!(&f.pad_mask, &s.pad_mask.flip_horizontal().unwrap());
        prop_assert_eq!(f.gt_depth.as_ref().unwrap(), &s.gt_depth.as_ref().unwrap().flip_horizontal().unwrap());
        prop_assert_eq!(&f.search_prev, &s.search_prev.flip_horizontal().unwrap());
        let mut back = augment(&f, &flip);
        prop_assert!((back.gt_box.x - s.gt_box.x).abs() < 1e-12);
        back.gt_box = s.gt_box;
        prop_assert_eq!(back, s);
    }
}

#[test]
fn corner_box_pads_an_l_shaped_region() {
    let frame = noise_frame(100, 80, 1);
    let b = BoxXywh::new(0.0, 0.0, 10.0, 10.0);
    let (img, m, spec) = crop_pad(&frame, &b, 4.0, 40).unwrap();
    // window [-15, 25)^2 at one output pixel per source pixel
    assert_eq!(spec.scale, 1.0);
    for j in 0..40 {
        for i in 0..40 {
            let padded = i < 15 || j < 15;
            assert_eq!(m.at3(0, j, i), f64::from(u8::from(padded)));
            if padded {
                assert!((0..3).all(|c| img.at3(c, j, i) == 0.0));
            }
        }
    }
}

#[test]
fn jitter_offsets_stay_within_bound() {
    let b = BoxXywh::new(500.0, 400.0, 40.0, 90.0);
    let side = (b.w * b.h).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (cx, cy) = b.center();
    let mut max_dev = 0.0f64;
    for _ in 0..10_000 {
        let j = jitter_box(b, 0.25, 0.25, (2000, 2000), &mut rng).unwrap();
        let (jx, jy) = j.center();
        assert!((jx - cx).abs() <= 0.25 * side + 1e-9);
        assert!((jy - cy).abs() <= 0.25 * side + 1e-9);
        let s = j.w / b.w;
        assert!((1.0 / 1.25 - 1e-12..=1.25 + 1e-12).contains(&s));
        assert!((j.h / b.h - s).abs() < 1e-12);
        max_dev = max_dev.max((jx - cx).abs() / side);
    }
    // the bound is reached, not just respected
    assert!(max_dev > 0.24);
}

#[test]
fn jitter_is_seeded_and_rejects_degenerate_boxes() {
    let b = BoxXywh::new(50.0, 40.0, 20.0, 10.0);
    let draw = |s| jitter_box(b, 0.25, 0.25, (160, 120), &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
    assert_eq!(draw(3), draw(3));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(jitter_box(BoxXywh::new(5.0, 5.0, 0.0, 4.0), 0.1, 0.1, (160, 120), &mut rng).is_err());
}

#[test]
fn resize_is_isotropic() {
    // a frame whose red channel encodes x and green channel encodes y
    let (w, h) = (120, 120);
    let img = Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (w * h), i % (w * h));
        match c {
            0 => (p % w) as f64 / 255.0,
            1 => (p / w) as f64 / 255.0,
            _ => 0.0,
        }
    });
    let frame = Frame::from_tensor(&img).unwrap();
    let (crop, m, _) = crop_pad(&frame, &BoxXywh::new(45.0, 45.0, 30.0, 30.0), 2.0, 30).unwrap();
    assert!(m.data().iter().all(|&v| v == 0.0));
    let dx = (crop.at3(0, 10, 20) - crop.at3(0, 10, 10)) * 255.0;
    let dy = (crop.at3(1, 20, 10) - crop.at3(1, 10, 10)) * 255.0;
    assert!((dx - 20.0).abs() < 1e-9 && (dy - 20.0).abs() < 1e-9, "{dx} {dy}");
}

#[test]
fn samples_share_one_window_and_are_reproducible() {
    let seq = sequence(5);
    let cfg = SampleConfig {
        search_side: 64,
        template_side: 32,
        ..SampleConfig::default()
    };
    for seed in 0..6 {
        let s = build_sample(&seq, 8, &cfg, true, seed).unwrap();
        assert_eq!(s, build_sample(&seq, 8, &cfg, true, seed).unwrap());
        let plain = SampleConfig { ..cfg.clone() }.without_augmentation();
        let u = build_sample(&seq, 8, &plain, true, seed).unwrap();
        assert_eq!(u.search_prev, u.crop.crop_frame(&seq.frames[u.frames.t_prev]));
        assert_eq!(u.search_next, u.crop.crop_frame(&seq.frames[u.frames.t_next]));
        assert_eq!(u.pad_mask, u.crop.padding_mask(160, 120));
        let inside = u.gt_box.intersection_area(&BoxXywh::new(0.0, 0.0, 64.0, 64.0));
        assert!(inside > 0.0);
    }
}
