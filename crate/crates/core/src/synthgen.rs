//! Synthetic backbone simulator.
//!
//! Ground-truth poses come from forward kinematics over a 17-joint
//! Human3.6M-style tree (y axis pointing down, z forward, subject's left on
//! +x, pelvis at the origin). Predictions are the ground truth corrupted with
//! joint-class dependent Gaussian noise: small on the torso and proximal
//! joints, large on the distal joints. Out-of-distribution samples are drawn
//! from an unusual-activity pose prior (deep hip and knee flexion) and
//! additionally get whole-limb rotations about the proximal joint plus a
//! small whole-body tilt.
//!
//! Every sample uses its own ChaCha stream selected by `(seed, split, index)`,
//! so generation is order independent and reproducible.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Pose, SampleRecord, Split};

/// Bone lengths in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneLengths {
    pub hip_half_width: f64,
    pub femur: f64,
    pub tibia: f64,
    pub spine: f64,
    pub chest: f64,
    pub neck_to_nose: f64,
    pub nose_to_head: f64,
    pub shoulder_half_width: f64,
    pub humerus: f64,
    pub forearm: f64,
}

impl Default for BoneLengths {
    fn default() -> Self {
        Self {
            hip_half_width: 110.0,
            femur: 450.0,
            tibia: 430.0,
            spine: 230.0,
            chest: 250.0,
            neck_to_nose: 110.0,
            nose_to_head: 120.0,
            shoulder_half_width: 160.0,
            humerus: 300.0,
            forearm: 260.0,
        }
    }
}

/// Closed interval of joint angles, degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub min: f64,
    pub max: f64,
}

impl AngleRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn clamp(&self, deg: f64) -> f64 {
        deg.clamp(self.min, self.max)
    }

    fn uniform(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleLimits {
    pub yaw: AngleRange,
    pub trunk_pitch: AngleRange,
    pub trunk_roll: AngleRange,
    pub trunk_twist: AngleRange,
    pub neck_pitch: AngleRange,
    pub hip_flexion: AngleRange,
    pub hip_abduction: AngleRange,
    pub knee_flexion: AngleRange,
    pub shoulder_flexion: AngleRange,
    pub shoulder_abduction: AngleRange,
    pub elbow_flexion: AngleRange,
}

impl Default for AngleLimits {
    fn default() -> Self {
        Self {
            yaw: AngleRange::new(-45.0, 45.0),
            trunk_pitch: AngleRange::new(-10.0, 35.0),
            trunk_roll: AngleRange::new(-10.0, 10.0),
            trunk_twist: AngleRange::new(-20.0, 20.0),
            neck_pitch: AngleRange::new(-20.0, 30.0),
            hip_flexion: AngleRange::new(-25.0, 110.0),
            hip_abduction: AngleRange::new(-10.0, 40.0),
            knee_flexion: AngleRange::new(0.0, 135.0),
            shoulder_flexion: AngleRange::new(-40.0, 170.0),
            shoulder_abduction: AngleRange::new(0.0, 110.0),
            elbow_flexion: AngleRange::new(0.0, 140.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SkeletonModel {
    pub bones: BoneLengths,
    pub limits: AngleLimits,
}

impl SkeletonModel {
    pub fn validate(&self) -> Result<()> {
        let b = &self.bones;
        let all = [
            b.hip_half_width,
            b.femur,
            b.tibia,
            b.spine,
            b.chest,
            b.neck_to_nose,
            b.nose_to_head,
            b.shoulder_half_width,
            b.humerus,
            b.forearm,
        ];
        if all.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Argument("bone lengths must be positive".into()));
        }
        Ok(())
    }

    /// `(parent, child, length)` for every bone of the tree.
    pub fn bone_table(&self) -> Vec<(usize, usize, f64)> {
        let b = &self.bones;
        vec![
            (0, 1, b.hip_half_width),
            (1, 2, b.femur),
            (2, 3, b.tibia),
            (0, 4, b.hip_half_width),
            (4, 5, b.femur),
            (5, 6, b.tibia),
            (0, 7, b.spine),
            (7, 8, b.chest),
            (8, 9, b.neck_to_nose),
            (9, 10, b.nose_to_head),
            (8, 11, b.shoulder_half_width),
            (11, 12, b.humerus),
            (12, 13, b.forearm),
            (8, 14, b.shoulder_half_width),
            (14, 15, b.humerus),
            (15, 16, b.forearm),
        ]
    }
}

/// Which activity distribution ground-truth angles are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosePrior {
    /// Standing, walking and reaching: legs mostly extended.
    Common,
    /// Sitting, crouching and kneeling: deep hip and knee flexion.
    Unusual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    InDistribution,
    OutOfDistribution,
}

/// Joint angles in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAngles {
    pub yaw: f64,
    pub trunk_pitch: f64,
    pub trunk_roll: f64,
    pub trunk_twist: f64,
    pub neck_pitch: f64,
    /// `[right, left]`
    pub hip_flexion: [f64; 2],
    pub hip_abduction: [f64; 2],
    pub knee_flexion: [f64; 2],
    pub shoulder_flexion: [f64; 2],
    pub shoulder_abduction: [f64; 2],
    pub elbow_flexion: [f64; 2],
}

fn half_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z.abs() * sigma
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + z * sigma
}

impl JointAngles {
    pub fn sample(limits: &AngleLimits, prior: PosePrior, rng: &mut ChaCha8Rng) -> Self {
        let l = limits;
        let mut hip_flexion = [0.0; 2];
        let mut hip_abduction = [0.0; 2];
        let mut knee_flexion = [0.0; 2];
        let mut shoulder_flexion = [0.0; 2];
        let mut shoulder_abduction = [0.0; 2];
        let mut elbow_flexion = [0.0; 2];
        for side in 0..2 {
            match prior {
                PosePrior::Common => {
                    hip_flexion[side] = l.hip_flexion.clamp(normal(rng, 5.0, 15.0));
                    hip_abduction[side] = l.hip_abduction.clamp(normal(rng, 5.0, 8.0));
                    knee_flexion[side] = l.knee_flexion.clamp(half_normal(rng, 22.0));
                }
                PosePrior::Unusual => {
                    hip_flexion[side] = l.hip_flexion.clamp(rng.random_range(40.0..105.0));
                    hip_abduction[side] = l.hip_abduction.clamp(rng.random_range(0.0..35.0));
                    knee_flexion[side] = l.knee_flexion.clamp(rng.random_range(50.0..130.0));
                }
            }
            shoulder_flexion[side] = l.shoulder_flexion.uniform(rng);
            shoulder_abduction[side] = l.shoulder_abduction.uniform(rng);
            elbow_flexion[side] = l.elbow_flexion.uniform(rng);
        }
        let trunk_pitch = match prior {
            PosePrior::Common => l.trunk_pitch.clamp(normal(rng, 5.0, 8.0)),
            PosePrior::Unusual => l.trunk_pitch.uniform(rng),
        };
        Self {
            yaw: l.yaw.uniform(rng),
            trunk_pitch,
            trunk_roll: l.trunk_roll.clamp(normal(rng, 0.0, 4.0)),
            trunk_twist: l.trunk_twist.clamp(normal(rng, 0.0, 8.0)),
            neck_pitch: l.neck_pitch.clamp(normal(rng, 5.0, 10.0)),
            hip_flexion,
            hip_abduction,
            knee_flexion,
            shoulder_flexion,
            shoulder_abduction,
            elbow_flexion,
        }
    }
}

fn rot(axis: Vector3<f64>, deg: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), deg.to_radians()).into_inner()
}

fn rx(deg: f64) -> Matrix3<f64> {
    rot(Vector3::x(), deg)
}

fn ry(deg: f64) -> Matrix3<f64> {
    rot(Vector3::y(), deg)
}

fn rz(deg: f64) -> Matrix3<f64> {
    rot(Vector3::z(), deg)
}

/// Forward kinematics. The returned pose is root-aligned.
pub fn forward_kinematics(skeleton: &SkeletonModel, a: &JointAngles) -> Pose {
    let b = &skeleton.bones;
    let down = Vector3::new(0.0, 1.0, 0.0);
    let mut j = vec![Vector3::zeros(); 17];

    // legs: index 0 = right (-x), 1 = left (+x)
    for (side, (hip, knee, ankle)) in [(0usize, (1, 2, 3)), (1, (4, 5, 6))] {
        let s = if side == 0 { -1.0 } else { 1.0 };
        j[hip] = Vector3::new(s * b.hip_half_width, 0.0, 0.0);
        let thigh = rz(-s * a.hip_abduction[side]) * rx(a.hip_flexion[side]);
        j[knee] = j[hip] + thigh * down * b.femur;
        let shin = thigh * rx(-a.knee_flexion[side]);
        j[ankle] = j[knee] + shin * down * b.tibia;
    }

    let trunk = rz(a.trunk_roll) * rx(-a.trunk_pitch) * ry(a.trunk_twist);
    let up = -down;
    j[7] = trunk * up * b.spine;
    j[8] = j[7] + trunk * up * b.chest;
    let head = trunk * rx(-a.neck_pitch);
    let nose_dir = Vector3::new(0.0, -0.7, 0.7).normalize();
    let head_dir = Vector3::new(0.0, -1.0, -0.3).normalize();
    j[9] = j[8] + head * nose_dir * b.neck_to_nose;
    j[10] = j[9] + head * head_dir * b.nose_to_head;

    // arms: 0 = right (-x), 1 = left (+x)
    for (side, (shoulder, elbow, wrist)) in [(0usize, (14, 15, 16)), (1, (11, 12, 13))] {
        let s = if side == 0 { -1.0 } else { 1.0 };
        j[shoulder] = j[8] + trunk * Vector3::new(s * b.shoulder_half_width, 0.0, 0.0);
        let upper = trunk * rz(-s * a.shoulder_abduction[side]) * rx(a.shoulder_flexion[side]);
        j[elbow] = j[shoulder] + upper * down * b.humerus;
        let fore = upper * rx(a.elbow_flexion[side]);
        j[wrist] = j[elbow] + fore * down * b.forearm;
    }

    let yaw = ry(a.yaw);
    Pose::new(
        j.into_iter()
            .map(|v| {
                let v = yaw * v;
                [v.x, v.y, v.z]
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionModel {
    pub sigma_proximal: f64,
    pub sigma_distal: f64,
    /// Position of the knee/elbow noise level between the proximal (0) and
    /// distal (1) levels.
    pub intermediate_blend: f64,
    pub ood_fraction: f64,
    pub ood_limb_rotation_sigma: f64,
    pub torso_misalignment_sigma: f64,
    /// Log-space spread of a per-sample difficulty factor that scales all
    /// Gaussian noise of the sample. The factor has mean one, so average
    /// error levels do not depend on it; zero disables it.
    pub difficulty_sigma: f64,
    pub seed: u64,
}

impl Default for CorruptionModel {
    fn default() -> Self {
        Self {
            sigma_proximal: 8.0,
            sigma_distal: 35.0,
            intermediate_blend: 0.25,
            ood_fraction: 0.2,
            ood_limb_rotation_sigma: 25.0,
            torso_misalignment_sigma: 3.0,
            difficulty_sigma: 0.4,
            seed: 0,
        }
    }
}

impl CorruptionModel {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.sigma_proximal,
            self.sigma_distal,
            self.ood_limb_rotation_sigma,
            self.torso_misalignment_sigma,
            self.difficulty_sigma,
        ];
        if sigmas.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Argument("noise levels must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.ood_fraction) || !(0.0..=1.0).contains(&self.intermediate_blend) {
            return Err(Error::Argument("fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn sigma_intermediate(&self) -> f64 {
        self.sigma_proximal + self.intermediate_blend * (self.sigma_distal - self.sigma_proximal)
    }

    /// Noise level for each of the 17 joints. The root stays exact so
    /// predictions remain root-aligned.
    pub fn joint_sigmas(&self) -> [f64; 17] {
        let (p, m, d) = (self.sigma_proximal, self.sigma_intermediate(), self.sigma_distal);
        [0.0, p, m, d, p, m, d, p, p, p, p, p, m, d, p, m, d]
    }
}

/// `(proximal, intermediate, distal)` joint indices of each limb.
pub const LIMBS: [(usize, usize, usize); 4] = [(1, 2, 3), (4, 5, 6), (11, 12, 13), (14, 15, 16)];

/// Half-extent of the box every prediction is clamped to, millimetres.
pub const BOUNDING_HALF_EXTENT: f64 = 1500.0;

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub predicted: Pose,
    pub regime: Regime,
}

/// Simulated backbone prediction for `gt`. The regime is drawn from
/// `Bernoulli(ood_fraction)` unless forced.
pub fn corrupt(
    gt: &Pose,
    model: &CorruptionModel,
    force_regime: Option<Regime>,
    rng: &mut ChaCha8Rng,
) -> Result<Corrupted> {
    if gt.joint_count() != 17 {
        return Err(Error::Schema("the simulator works on 17-joint poses".into()));
    }
    gt.ensure_finite()?;
    let regime = force_regime.unwrap_or_else(|| {
        if rng.random::<f64>() < model.ood_fraction {
            Regime::OutOfDistribution
        } else {
            Regime::InDistribution
        }
    });
    let mut joints: Vec<Vector3<f64>> = gt
        .joints()
        .iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .collect();

    if regime == Regime::OutOfDistribution {
        let count = if rng.random::<bool>() { 2 } else { 1 };
        let mut limbs: Vec<usize> = (0..4).collect();
        for k in 0..count {
            let pick = rng.random_range(k..4);
            limbs.swap(k, pick);
            let (prox, mid, dist) = LIMBS[limbs[k]];
            let angle = normal(rng, 0.0, model.ood_limb_rotation_sigma);
            let r = rot(random_unit(rng), angle);
            let pivot = joints[prox];
            for i in [mid, dist] {
                joints[i] = pivot + r * (joints[i] - pivot);
            }
        }
        let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let axis = Vector3::new(heading.cos(), 0.0, heading.sin());
        let tilt = rot(axis, normal(rng, 0.0, model.torso_misalignment_sigma));
        for v in joints.iter_mut() {
            *v = tilt * *v;
        }
    }

    let difficulty = if model.difficulty_sigma > 0.0 {
        let d = model.difficulty_sigma;
        (normal(rng, 0.0, d) - 0.5 * d * d).exp()
    } else {
        1.0
    };
    let sigmas = model.joint_sigmas().map(|s| s * difficulty);
    let coords = joints
        .iter()
        .zip(sigmas)
        .map(|(v, s)| {
            let mut out = [v.x, v.y, v.z];
            if s > 0.0 {
                let noise = Normal::new(0.0, s).expect("sigma is finite");
                for c in out.iter_mut() {
                    *c = (*c + noise.sample(rng)).clamp(-BOUNDING_HALF_EXTENT, BOUNDING_HALF_EXTENT);
                }
            }
            out
        })
        .collect();
    Ok(Corrupted {
        predicted: Pose::new(coords),
        regime,
    })
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Test => 2,
    }
}

/// Generator for one sample: stream `index` of a ChaCha keyed by
/// `(seed, stream)`.
pub fn sample_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.rotate_left(48));
    rng.set_stream(index);
    rng
}

/// `n` ground-truth poses from the common activity prior.
pub fn generate_gt(n: usize, skeleton: &SkeletonModel, seed: u64) -> Result<Vec<Pose>> {
    generate_gt_with_prior(n, skeleton, PosePrior::Common, seed)
}

pub fn generate_gt_with_prior(
    n: usize,
    skeleton: &SkeletonModel,
    prior: PosePrior,
    seed: u64,
) -> Result<Vec<Pose>> {
    if n == 0 {
        return Err(Error::Argument("pose count must be positive".into()));
    }
    skeleton.validate()?;
    Ok((0..n as u64)
        .map(|i| {
            let mut rng = sample_rng(seed, 0, i);
            forward_kinematics(skeleton, &JointAngles::sample(&skeleton.limits, prior, &mut rng))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub record: SampleRecord,
    pub regime: Regime,
}

/// `n` records for `split`. Each sample draws its regime first; OOD samples
/// take their ground truth from the unusual prior and the OOD corruption.
pub fn generate_dataset(
    n: usize,
    split: Split,
    skeleton: &SkeletonModel,
    model: &CorruptionModel,
) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::Argument("sample count must be positive".into()));
    }
    skeleton.validate()?;
    model.validate()?;
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(model.seed, split_stream(split), i as u64);
            let regime = if rng.random::<f64>() < model.ood_fraction {
                Regime::OutOfDistribution
            } else {
                Regime::InDistribution
            };
            let prior = match regime {
                Regime::InDistribution => PosePrior::Common,
                Regime::OutOfDistribution => PosePrior::Unusual,
            };
            let gt = forward_kinematics(skeleton, &JointAngles::sample(&skeleton.limits, prior, &mut rng));
            let c = corrupt(&gt, model, Some(regime), &mut rng)?;
            Ok(SynthSample {
                record: SampleRecord {
                    id: format!("{}-{i:06}", split.as_str()),
                    predicted: c.predicted,
                    ground_truth: Some(gt),
                    split,
                },
                regime,
            })
        })
        .collect()
}
