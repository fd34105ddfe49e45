use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackdepth::model::*;
use trackdepth::preprocess::{build_sample, Sample, SampleConfig};
use trackdepth::synthworld::{CameraMode, SceneSpec};
use trackdepth::trainer::Strategy;
use trackdepth::Tensor;

const STRATEGIES: [Strategy; 4] = [
    Strategy::TrackOnlyLarge,
    Strategy::TrackOnlySmall,
    Strategy::SupervisedAux,
    Strategy::SelfSupAux,
];

fn sample(arch: &ArchConfig, seed: u64) -> Sample {
    let seq = SceneSpec::random(seed, 12, 160, 120, CameraMode::Moving)
        .unwrap()
        .render_sequence("m")
        .unwrap();
    let cfg = SampleConfig {
        search_side: arch.input_side,
        template_side: arch.template_side,
        ..Default::default()
    };
    build_sample(&seq, 6, &cfg, true, seed).unwrap()
}

fn perturb_aux(m: &Model, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = m.clone();
    for p in out.params.params_mut() {
        if !p.group.is_tracking() {
            let noise = Tensor::from_fn(p.value.shape(), |_| rng.random_range(-1.0..1.0));
            p.value = p.value.zip_map(&noise, |v, n| v + n).unwrap();
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn heatmaps_are_distributions(seed in any::<u64>()) {
        let arch = ArchConfig::tiny();
        let m = Model::new(arch.clone(), seed).unwrap();
        let s = sample(&arch, seed % 20);
        let out = m.track(&s.template, &s.search_t).unwrap();
        for c in 0..2 {
            let h = out.corner_maps.channel(c).unwrap();
            prop_assert!(h.data().iter().all(|&v| v >= 0.0));
            prop_assert!((h.sum() - 1.0).abs() < 1e-6);
        }
        prop_assert!((out.attn_map.sum() - 1.0).abs() < 1e-6);
        let b = out.bbox;
        prop_assert!(b.x >= 0.0 && b.y >= 0.0 && b.x2() <= 1.0 + 1e-12 && b.y2() <= 1.0 + 1e-12);
        prop_assert!(b.w > 0.0 && b.h > 0.0);
    }

    #[test]
    fn tracking_ignores_auxiliary_weights(seed in any::<u64>()) {
        let arch = ArchConfig::tiny();
        let m = Model::new(arch.clone(), seed).unwrap();
        let s = sample(&arch, seed % 20);
        let base = m.track(&s.template, &s.search_t).unwrap();
        let other = perturb_aux(&m, seed ^ 5);
        prop_assert_eq!(&other.track(&s.template, &s.search_t).unwrap(), &base);
        prop_assert_eq!(&m.export_inference().track(&s.template, &s.search_t).unwrap(), &base);
        for st in STRATEGIES {
            prop_assert_eq!(&m.forward_full(&s, st).unwrap().track, &base);
        }
    }

    #[test]
    fn depth_round_trips_through_disparity(d in prop::collection::vec(0.1f64..100.0, 1..50)) {
        let t = Tensor::new(vec![d.len()], d).unwrap();
        let sigma = depth_to_disparity(&t).unwrap();
        prop_assert!(sigma.data().iter().all(|&s| (0.0..=1.0).contains(&s)));
        prop_assert!(disparity_to_depth(&sigma).unwrap().max_abs_diff(&t) < 1e-9);
    }

    #[test]
    fn depth_decreases_with_disparity(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        prop_assume!(a < b);
        let d = disparity_to_depth(&Tensor::new(vec![2], vec![a, b]).unwrap()).unwrap();
        prop_assert!(d.data()[0] > d.data()[1]);
    }
}

#[test]
fn forward_passes_share_one_extractor_pass() {
    let arch = ArchConfig::tiny();
    let m = Model::new(arch.clone(), 2).unwrap();
    let s = sample(&arch, 3);
    for st in STRATEGIES {
        let before = m.extract_feature_calls();
        m.forward_full(&s, st).unwrap();
        assert_eq!(m.extract_feature_calls() - before, 1, "{st:?}");
    }
    let before = m.extract_feature_calls();
    m.track_and_depth(&s.template, &s.search_t).unwrap();
    assert_eq!(m.extract_feature_calls() - before, 1);
}

#[test]
fn strategies_evaluate_only_their_branches() {
    let arch = ArchConfig::tiny();
    let m = Model::new(arch.clone(), 4).unwrap();
    let s = sample(&arch, 1);
    for st in STRATEGIES {
        let out = m.forward_full(&s, st).unwrap();
        assert_eq!(out.disparities.is_some(), st.uses_depth_head(), "{st:?}");
        assert_eq!(out.poses.is_some(), st.uses_pose_net(), "{st:?}");
    }
    let sup = m.forward_full(&s, Strategy::SupervisedAux).unwrap();
    let sides: Vec<usize> = sup.disparities.unwrap().iter().map(|d| d.shape()[1]).collect();
    let side = arch.input_side;
    assert_eq!(sides, vec![side / 8, side / 4, side / 2, side]);
    let ss = m.forward_full(&s, Strategy::SelfSupAux).unwrap();
    for p in ss.poses.unwrap() {
        assert_eq!(p.to_vec6(), [0.0; 6]);
    }
}

#[test]
fn default_depth_scales_cover_full_input() {
    assert_eq!(ArchConfig::default().depth_sides(), [32, 64, 128, 256]);
}

#[test]
fn export_removes_exactly_the_auxiliary_groups() {
    let m = Model::new(ArchConfig::desk(), 0).unwrap();
    let sum: usize = ParamGroup::ALL.iter().map(|&g| m.group_param_count(g)).sum();
    assert_eq!(sum, m.param_count());
    let e = m.export_inference();
    assert_eq!(
        e.param_count(),
        m.param_count() - m.group_param_count(ParamGroup::DepthHead) - m.group_param_count(ParamGroup::PoseNet)
    );
    assert_eq!(e.group_param_count(ParamGroup::DepthHead), 0);
    assert!(!e.has_pose_net());
}

#[test]
fn parameter_count_ignores_values() {
    let a = Model::new(ArchConfig::tiny(), 1).unwrap();
    let b = perturb_aux(&Model::new(ArchConfig::tiny(), 2).unwrap(), 3);
    assert_eq!(a.param_count(), b.param_count());
    for g in ParamGroup::ALL {
        assert_eq!(a.group_param_count(g), b.group_param_count(g));
    }
}

#[test]
fn forward_is_deterministic() {
    let arch = ArchConfig::tiny();
    let m = Model::new(arch.clone(), 8).unwrap();
    let s = sample(&arch, 8);
    let a = m.forward_full(&s, Strategy::SelfSupAux).unwrap();
    let b = m.forward_full(&s, Strategy::SelfSupAux).unwrap();
    assert_eq!(a.track, b.track);
    assert_eq!(a.disparities, b.disparities);
}

#[test]
fn pose_net_is_not_forced_antisymmetric() {
    let arch = ArchConfig::tiny();
    let mut m = Model::new(arch.clone(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in m.params.params_mut() {
        if p.group == ParamGroup::PoseNet {
            p.value = Tensor::from_fn(p.value.shape(), |_| rng.random_range(-0.5..0.5));
        }
    }
    let s = sample(&arch, 2);
    let ab = m.pose_net(&s.search_t, &s.search_prev).unwrap().to_vec6();
    let ba = m.pose_net(&s.search_prev, &s.search_t).unwrap().to_vec6();
    assert_ne!(ab, [0.0; 6]);
    assert!(ab.iter().zip(&ba).any(|(x, y)| (x + y).abs() > 1e-12));
}
