use escape::harness::experiments::{cmd_synth, SynthConfig};
use escape::pose::{subset_mpjpe, KeypointSchema, Pose, Split};
use escape::synthgen::{
    corrupt, generate_dataset, generate_gt, sample_rng, CorruptionModel, Regime, SkeletonModel, BOUNDING_HALF_EXTENT,
};

/// Mean norm of an isotropic 3-D Gaussian: the chi distribution with three
/// degrees of freedom, `sigma * sqrt(2) * Gamma(2) / Gamma(3/2)`.
fn chi3_mean(sigma: f64) -> f64 {
    let gamma_3_2 = std::f64::consts::PI.sqrt() / 2.0;
    sigma * 2f64.sqrt() * 1.0 / gamma_3_2
}

fn joint_errors(gts: &[Pose], preds: &[Pose], joints: &[usize]) -> f64 {
    gts.iter().zip(preds).map(|(g, p)| subset_mpjpe(p, g, joints).unwrap()).sum::<f64>() / gts.len() as f64
}

#[test]
fn chi_mean_oracle_matches_closed_values() {
    assert!((chi3_mean(35.0) - 55.85).abs() < 0.01);
    assert!((chi3_mean(8.0) - 12.77).abs() < 0.01);
}

#[test]
fn id_noise_matches_chi_distribution_mean() {
    let schema = KeypointSchema::h36m17();
    let model = CorruptionModel { ood_fraction: 0.0, ..CorruptionModel::default() };
    let ds = generate_dataset(10_000, Split::Test, &SkeletonModel::default(), &model).unwrap();
    assert!(ds.iter().all(|s| s.regime == Regime::InDistribution));
    let gts: Vec<Pose> = ds.iter().map(|s| s.record.ground_truth.clone().unwrap()).collect();
    let preds: Vec<Pose> = ds.iter().map(|s| s.record.predicted.clone()).collect();
    let distal = joint_errors(&gts, &preds, &schema.distal_indices);
    let proximal = joint_errors(&gts, &preds, &schema.proximal_indices);
    let (want_d, want_p) = (chi3_mean(35.0), chi3_mean(8.0));
    eprintln!("distal {distal:.2} (want {want_d:.2}), proximal {proximal:.2} (want {want_p:.2})");
    assert!((distal / want_d - 1.0).abs() < 0.02);
    assert!((proximal / want_p - 1.0).abs() < 0.02);
    assert!(distal > proximal);
}

#[test]
fn zero_noise_reproduces_ground_truth() {
    let model = CorruptionModel {
        sigma_proximal: 0.0,
        sigma_distal: 0.0,
        ood_fraction: 0.0,
        ..CorruptionModel::default()
    };
    for s in generate_dataset(50, Split::Train, &SkeletonModel::default(), &model).unwrap() {
        assert_eq!(Some(&s.record.predicted), s.record.ground_truth.as_ref());
    }
}

#[test]
fn forced_ood_is_worse_than_forced_id() {
    let schema = KeypointSchema::h36m17();
    let model = CorruptionModel::default();
    let gts = generate_gt(1000, &SkeletonModel::default(), 5).unwrap();
    let run = |regime| {
        let preds: Vec<Pose> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| corrupt(g, &model, Some(regime), &mut sample_rng(9, 3, i as u64)).unwrap().predicted)
            .collect();
        joint_errors(&gts, &preds, &schema.distal_indices)
    };
    let (id, ood) = (run(Regime::InDistribution), run(Regime::OutOfDistribution));
    assert!(ood > id, "ood {ood} id {id}");
}

#[test]
fn ood_subpopulation_has_larger_error() {
    let ds = generate_dataset(4000, Split::Test, &SkeletonModel::default(), &CorruptionModel::default()).unwrap();
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for s in &ds {
        let e = escape::pose::mpjpe(&s.record.predicted, s.record.ground_truth.as_ref().unwrap()).unwrap();
        match s.regime {
            Regime::InDistribution => id.push(e),
            Regime::OutOfDistribution => ood.push(e),
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!id.is_empty() && !ood.is_empty());
    assert!(mean(&ood) > mean(&id));
}

#[test]
fn generated_poses_have_variety() {
    let schema = KeypointSchema::h36m17();
    let gts = generate_gt(1000, &SkeletonModel::default(), 1).unwrap();
    let sd = |j: usize, c: usize| {
        let v: Vec<f64> = gts.iter().map(|p| p.joint(j)[c]).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    };
    for &j in &schema.distal_indices {
        let spreads = [sd(j, 0), sd(j, 1), sd(j, 2)];
        assert!(spreads.iter().all(|&s| s > 0.0), "joint {j}: {spreads:?}");
        assert!(spreads.iter().any(|&s| s > 50.0), "joint {j}: {spreads:?}");
    }
    // ankle height
    assert!(sd(3, 1) > 0.0 && sd(6, 1) > 0.0);
}

#[test]
fn bone_lengths_hold_for_generated_poses() {
    let skeleton = SkeletonModel::default();
    for pose in generate_gt(200, &skeleton, 2).unwrap() {
        for (a, b, len) in skeleton.bone_table() {
            let (p, q) = (pose.joint(a), pose.joint(b));
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
            assert!((d - len).abs() < 1e-6, "bone {a}-{b}: {d} vs {len}");
        }
        assert_eq!(pose.joint(0), [0.0; 3]);
    }
}

#[test]
fn predictions_stay_inside_bounding_box() {
    let model = CorruptionModel { ood_fraction: 0.5, ..CorruptionModel::default() };
    for s in generate_dataset(3000, Split::Test, &SkeletonModel::default(), &model).unwrap() {
        assert!(s.record.predicted.is_finite());
        for j in s.record.predicted.joints() {
            assert!(j.iter().all(|v| v.abs() <= BOUNDING_HALF_EXTENT));
        }
    }
    assert!(2.0 * BOUNDING_HALF_EXTENT <= 3000.0);
}

#[test]
fn dataset_files_are_byte_identical_per_seed() {
    let schema = KeypointSchema::h36m17();
    let mut cfg = SynthConfig::with_seed(17);
    cfg.train_size = 300;
    cfg.test_size = 100;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let oa = cmd_synth(&cfg, a.path(), &schema).unwrap();
    let ob = cmd_synth(&cfg, b.path(), &schema).unwrap();
    assert_eq!(std::fs::read(&oa.train_path).unwrap(), std::fs::read(&ob.train_path).unwrap());
    assert_eq!(std::fs::read(&oa.test_path).unwrap(), std::fs::read(&ob.test_path).unwrap());
    cfg.corruption.seed = 18;
    let c = tempfile::tempdir().unwrap();
    let oc = cmd_synth(&cfg, c.path(), &schema).unwrap();
    assert_ne!(std::fs::read(&oa.test_path).unwrap(), std::fs::read(&oc.test_path).unwrap());
}
