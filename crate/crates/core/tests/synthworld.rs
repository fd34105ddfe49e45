use std::time::Instant;

use trackdepth::evalmetrics::iou;
use trackdepth::geometry::{backproject, project, transform_points};
use trackdepth::synthworld::*;

#[test]
fn planar_translation_shifts_texture_by_closed_form_flow() {
    let plane = PlaneRect {
        center: [0.0, 0.0],
        depth: 4.0,
        half_size: [50.0, 50.0],
        texture: Texture { seed: 11, cell: 0.2 },
    };
    let k = trackdepth::geometry::Intrinsics::pseudo(128, 96);
    let u = 0.2;
    let scene = SceneSpec {
        planes: vec![plane],
        target: None,
        camera_path: vec![
            trackdepth::geometry::Pose6DoF::identity(),
            trackdepth::geometry::Pose6DoF::new([0.0; 3], [u, 0.0, 0.0]).unwrap(),
        ],
        k,
        n_frames: 2,
        seed: 0,
    };
    let a = scene.render_frame(0).unwrap().rgb;
    let b = scene.render_frame(1).unwrap().rgb;
    let expected = -k.focal * u / 4.0;
    // cross-correlation peak over integer shifts
    let (_, h, w) = a.chw().unwrap();
    let mut best = (f64::NEG_INFINITY, 0i64);
    for s in -20i64..=20 {
        let mut acc = 0.0;
        for c in 0..3 {
            for y in 0..h {
                for x in 25..w - 25 {
                    let xs = (x as i64 + s) as usize;
                    acc += (a.at3(c, y, x) - 0.5) * (b.at3(c, y, xs) - 0.5);
                }
            }
        }
        if acc > best.0 {
            best = (acc, s);
        }
    }
    assert_eq!(best.1 as f64, expected.round());
}

#[test]
fn scene_invariants_hold() {
    for seed in 0..6 {
        let s = SceneSpec::random(seed, 60, FRAME_WIDTH, FRAME_HEIGHT, CameraMode::Moving).unwrap();
        let mean_depth = s.mean_plane_depth();
        for t in 1..60 {
            let r = s.relative_pose(t - 1, t);
            let rot = r.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            let tr = r.translation.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(rot < 0.05, "rotation {rot}");
            assert!(tr < 0.02 * mean_depth, "translation {tr} vs depth {mean_depth}");
        }
        let boxes: Vec<_> = (0..60).map(|t| s.target_box(t).unwrap()).collect();
        let visible = boxes.iter().filter(|b| b.area() >= 64.0).count();
        assert!(visible as f64 >= 0.9 * 60.0);
        for b in &boxes {
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.x2() <= FRAME_WIDTH as f64 && b.y2() <= FRAME_HEIGHT as f64);
        }
        for p in boxes.windows(2) {
            assert!(iou(&p[0], &p[1]) > 0.3, "seed {seed}: consecutive iou {}", iou(&p[0], &p[1]));
        }
    }
}

#[test]
fn rendered_box_matches_target_pixels() {
    let s = SceneSpec::random(4, 3, FRAME_WIDTH, FRAME_HEIGHT, CameraMode::Moving).unwrap();
    let f = s.render_frame(2).unwrap();
    assert!(f.depth.data().iter().all(|&d| d > 0.0));
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..FRAME_HEIGHT {
        for x in 0..FRAME_WIDTH {
            if f.target_mask[y * FRAME_WIDTH + x] {
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x);
                y2 = y2.max(y);
            }
        }
    }
    // covered pixel centers lie inside the exact box and reach within a pixel of it
    assert!(f.bbox.x <= x1 as f64 + 0.5 && f.bbox.x2() >= x2 as f64 + 0.5);
    assert!(f.bbox.y <= y1 as f64 + 0.5 && f.bbox.y2() >= y2 as f64 + 0.5);
    assert!(f.bbox.x > x1 as f64 - 0.5 && f.bbox.x2() < x2 as f64 + 1.5);
    assert!(f.bbox.y > y1 as f64 - 0.5 && f.bbox.y2() < y2 as f64 + 1.5);
}

#[test]
fn depth_buffer_is_consistent_across_frames() {
    let s = SceneSpec::random(2, 6, FRAME_WIDTH, FRAME_HEIGHT, CameraMode::Moving).unwrap();
    let f0 = s.render_frame(0).unwrap();
    let f1 = s.render_frame(5).unwrap();
    let pose = s.relative_pose(0, 5);
    let pts = transform_points(&backproject(&f0.depth, &s.k).unwrap(), &pose).unwrap();
    let (coords, valid) = project(&pts, &s.k).unwrap();
    let (w, h) = (FRAME_WIDTH, FRAME_HEIGHT);
    let mut checked = 0;
    let mut agree = 0;
    for i in 0..w * h {
        if valid.data()[i] < 0.5 || f0.target_mask[i] {
            continue;
        }
        let (u, v) = (coords.data()[i].round(), coords.data()[w * h + i].round());
        if u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
            continue;
        }
        let j = v as usize * w + u as usize;
        if f1.target_mask[j] {
            continue;
        }
        checked += 1;
        let z = pts.data()[2 * w * h + i];
        if (f1.depth.data()[j] - z).abs() < 0.01 * z {
            agree += 1;
        }
    }
    // disagreement only at occlusion boundaries between rectangles
    assert!(checked > w * h / 2);
    assert!(agree as f64 > 0.97 * checked as f64, "{agree}/{checked}");
}

#[test]
fn generation_is_deterministic_and_within_budget() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = GenConfig::new(8, 60, 7, CameraMode::Moving);
    let start = Instant::now();
    let m = generate_dataset(&cfg, a.path()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "generation took {secs:.1} s");
    assert_eq!(m.sequences.len(), 8);
    let small = GenConfig::new(2, 5, 7, CameraMode::Static);
    let c = tempfile::tempdir().unwrap();
    generate_dataset(&small, b.path()).unwrap();
    generate_dataset(&small, c.path()).unwrap();
    let files = |root: &std::path::Path| {
        let mut v: Vec<_> = walk(root).into_iter().map(|p| (p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap())).collect();
        v.sort();
        v
    };
    assert_eq!(files(b.path()), files(c.path()));
    let ds = trackdepth::dataset::load_dataset(b.path()).unwrap();
    for seq in &ds.sequences {
        let poses = seq.meta.camera_poses.as_ref().unwrap();
        assert!(poses.iter().all(|p| p.to_vec6() == [0.0; 6]));
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn warp_oracle_passes_on_fresh_data() {
    let cfg = GenConfig::new(2, 20, 3, CameraMode::Moving);
    for seq in generate_sequences(&cfg).unwrap() {
        for c in warp_check_sequence(&seq).unwrap() {
            assert!(c.passed(), "{c:?}");
            assert!(c.covisible > FRAME_WIDTH * FRAME_HEIGHT / 2, "{c:?}");
        }
    }
}

#[test]
fn warp_oracle_flags_corrupted_poses() {
    let cfg = GenConfig::new(1, 4, 3, CameraMode::Moving);
    let mut seq = generate_sequences(&cfg).unwrap().remove(0);
    let poses = seq.meta.camera_poses.as_mut().unwrap();
    poses[2].translation[0] += 1.5;
    let checks = warp_check_sequence(&seq).unwrap();
    assert!(checks[0].passed());
    assert!(!checks[1].passed() || !checks[2].passed());
}

#[test]
fn static_camera_pairs_warp_exactly() {
    let cfg = GenConfig::new(1, 3, 5, CameraMode::Static);
    let seq = generate_sequences(&cfg).unwrap().remove(0);
    for c in warp_check_sequence(&seq).unwrap() {
        assert!(c.mae < 1e-12, "{c:?}");
    }
}
