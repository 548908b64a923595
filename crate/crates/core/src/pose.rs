//! Pose representation, keypoint layout, alignment and the standard
//! MPJPE / PA-MPJPE metrics. All coordinates are millimetres.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3D pose: one `[x, y, z]` row per joint, flattened joint-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    coords: Vec<[f64; 3]>,
}

impl Pose {
    pub fn new(coords: Vec<[f64; 3]>) -> Self {
        Self { coords }
    }

    pub fn zeros(joints: usize) -> Self {
        Self {
            coords: vec![[0.0; 3]; joints],
        }
    }

    /// Builds a pose from a flat `x0 y0 z0 x1 ...` vector.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::Schema(format!(
                "flat pose length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Ok(Self {
            coords: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn joint_count(&self) -> usize {
        self.coords.len()
    }

    pub fn joints(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn joints_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.coords
    }

    pub fn joint(&self, index: usize) -> [f64; 3] {
        self.coords[index]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.coords.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().flatten().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidPose("non-finite coordinate".into()))
        }
    }

    /// Adds `offset` to every joint.
    pub fn translated(&self, offset: [f64; 3]) -> Pose {
        Pose {
            coords: self
                .coords
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
                .collect(),
        }
    }

    /// Coordinates of the given joints, concatenated.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().flat_map(|&i| self.coords[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split '{other}'"))),
        }
    }
}

/// One backbone prediction with its optional ground truth. Inference code
/// never reads `ground_truth`; it exists for supervision and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub predicted: Pose,
    pub ground_truth: Option<Pose>,
    pub split: Split,
}

impl SampleRecord {
    pub fn gt(&self) -> Result<&Pose> {
        self.ground_truth
            .as_ref()
            .ok_or_else(|| Error::SupervisionUnavailable(self.id.clone()))
    }

    /// Copy with the ground truth removed.
    pub fn without_gt(&self) -> SampleRecord {
        SampleRecord {
            ground_truth: None,
            ..self.clone()
        }
    }
}

/// Joint layout: which index is the root and which joints are the proximal
/// (limb base) and distal (limb end) sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSchema {
    pub name: String,
    pub joint_count: usize,
    pub root_index: usize,
    pub proximal_indices: [usize; 4],
    pub distal_indices: [usize; 4],
    pub joint_names: Vec<String>,
}

pub const H36M_JOINT_NAMES: [&str; 17] = [
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "torso",
    "neck",
    "nose",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

impl KeypointSchema {
    pub fn new(
        name: impl Into<String>,
        joint_names: Vec<String>,
        root_index: usize,
        proximal_indices: [usize; 4],
        distal_indices: [usize; 4],
    ) -> Result<Self> {
        let schema = Self {
            name: name.into(),
            joint_count: joint_names.len(),
            root_index,
            proximal_indices,
            distal_indices,
            joint_names,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Human3.6M 17-joint layout with ankles/wrists as distal joints and
    /// hips/shoulders as proximal joints.
    pub fn h36m17() -> Self {
        Self {
            name: "h36m17".into(),
            joint_count: 17,
            root_index: 0,
            proximal_indices: [1, 4, 11, 14],
            distal_indices: [3, 6, 13, 16],
            joint_names: H36M_JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "h36m17" => Ok(Self::h36m17()),
            other => Err(Error::Argument(format!("unknown keypoint schema '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joint_count;
        if self.joint_names.len() != n {
            return Err(Error::Schema("joint name count differs from joint_count".into()));
        }
        if self.root_index >= n {
            return Err(Error::Schema("root index out of range".into()));
        }
        let sets = [&self.proximal_indices, &self.distal_indices];
        for set in sets {
            for (k, &i) in set.iter().enumerate() {
                if i >= n {
                    return Err(Error::Schema(format!("joint index {i} out of range")));
                }
                if i == self.root_index {
                    return Err(Error::Schema("root joint listed as proximal/distal".into()));
                }
                if set[..k].contains(&i) {
                    return Err(Error::Schema(format!("joint index {i} repeated")));
                }
            }
        }
        if self.proximal_indices.iter().any(|i| self.distal_indices.contains(i)) {
            return Err(Error::Schema("proximal and distal sets overlap".into()));
        }
        Ok(())
    }

    pub fn flat_dim(&self) -> usize {
        self.joint_count * 3
    }

    pub fn check(&self, pose: &Pose) -> Result<()> {
        if pose.joint_count() != self.joint_count {
            return Err(Error::Schema(format!(
                "pose has {} joints, schema '{}' expects {}",
                pose.joint_count(),
                self.name,
                self.joint_count
            )));
        }
        Ok(())
    }
}

impl Default for KeypointSchema {
    fn default() -> Self {
        Self::h36m17()
    }
}

/// Subtracts the root joint from every joint.
pub fn root_align(pose: &Pose, schema: &KeypointSchema) -> Result<Pose> {
    schema.check(pose)?;
    pose.ensure_finite()?;
    let r = pose.joint(schema.root_index);
    Ok(pose.translated([-r[0], -r[1], -r[2]]))
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn same_shape(pred: &Pose, gt: &Pose) -> Result<()> {
    if pred.joint_count() != gt.joint_count() {
        return Err(Error::Schema(format!(
            "joint count mismatch: {} vs {}",
            pred.joint_count(),
            gt.joint_count()
        )));
    }
    if pred.joint_count() == 0 {
        return Err(Error::Schema("empty pose".into()));
    }
    Ok(())
}

/// Mean per-joint position error.
pub fn mpjpe(pred: &Pose, gt: &Pose) -> Result<f64> {
    same_shape(pred, gt)?;
    let total: f64 = pred
        .joints()
        .iter()
        .zip(gt.joints())
        .map(|(a, b)| dist(a, b))
        .sum();
    Ok(total / pred.joint_count() as f64)
}

/// MPJPE restricted to `indices`.
pub fn subset_mpjpe(pred: &Pose, gt: &Pose, indices: &[usize]) -> Result<f64> {
    same_shape(pred, gt)?;
    if indices.is_empty() {
        return Err(Error::Argument("empty joint subset".into()));
    }
    let mut total = 0.0;
    for &i in indices {
        if i >= pred.joint_count() {
            return Err(Error::Schema(format!("joint index {i} out of range")));
        }
        total += dist(&pred.joints()[i], &gt.joints()[i]);
    }
    Ok(total / indices.len() as f64)
}

/// A proper similarity transform `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, pose: &Pose) -> Pose {
        Pose::new(
            pose.joints()
                .iter()
                .map(|p| {
                    let v = self.rotation * Vector3::new(p[0], p[1], p[2]) * self.scale
                        + self.translation;
                    [v.x, v.y, v.z]
                })
                .collect(),
        )
    }
}

/// Least-squares similarity transform taking `src` onto `dst` (Umeyama),
/// with the reflection case folded back to a proper rotation.
pub fn procrustes_transform(src: &Pose, dst: &Pose) -> Result<Similarity> {
    same_shape(src, dst)?;
    src.ensure_finite()?;
    dst.ensure_finite()?;
    let n = src.joint_count() as f64;
    let to_vec = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);

    let mu_src = src.joints().iter().map(to_vec).sum::<Vector3<f64>>() / n;
    let mu_dst = dst.joints().iter().map(to_vec).sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    for (a, b) in src.joints().iter().zip(dst.joints()) {
        let a = to_vec(a) - mu_src;
        let b = to_vec(b) - mu_dst;
        cov += b * a.transpose();
        var_src += a.norm_squared();
    }
    cov /= n;
    var_src /= n;

    let degenerate = |reason: &str, best_effort: Similarity| Error::AlignmentDegenerate {
        reason: reason.to_string(),
        best_effort: Box::new(best_effort),
    };

    if var_src <= f64::EPSILON * (1.0 + mu_src.norm_squared()) {
        let fallback = Similarity {
            translation: mu_dst - mu_src,
            ..Similarity::identity()
        };
        return Err(degenerate("source joints are coincident", fallback));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => {
            let fallback = Similarity {
                translation: mu_dst - mu_src,
                ..Similarity::identity()
            };
            return Err(degenerate("SVD did not converge", fallback));
        }
    };
    let sv = svd.singular_values;

    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // reflection: flip the axis paired with the smallest singular value
        let (min_idx, _) = sv
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        signs[min_idx] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = sv.dot(&signs) / var_src;
    let translation = mu_dst - rotation * mu_src * scale;
    let transform = Similarity {
        rotation,
        scale,
        translation,
    };

    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted[0] <= 0.0 || sorted[1] <= 1e-12 * sorted[0] || !(scale > 0.0) {
        return Err(degenerate("rank-deficient point spread", transform));
    }
    Ok(transform)
}

/// `src` moved by the optimal similarity transform onto `dst`.
pub fn procrustes_align(src: &Pose, dst: &Pose) -> Result<Pose> {
    procrustes_transform(src, dst).map(|t| t.apply(src))
}

/// MPJPE after Procrustes similarity alignment of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &Pose, gt: &Pose) -> Result<f64> {
    let aligned = procrustes_align(pred, gt)?;
    mpjpe(&aligned, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_pose() -> Pose {
        Pose::new(
            (0..17)
                .map(|i| {
                    let t = i as f64;
                    [t * 13.0 - 40.0, (t * 1.7).sin() * 300.0, (t * 0.9).cos() * 120.0 + t]
                })
                .collect(),
        )
    }

    #[test]
    fn root_align_cases() {
        let schema = KeypointSchema::h36m17();
        let mut p = sample_pose();
        p.joints_mut()[0] = [0.0; 3];
        assert_eq!(root_align(&p, &schema).unwrap(), p);

        let uniform = Pose::new(vec![[5.0; 3]; 17]);
        assert_eq!(root_align(&uniform, &schema).unwrap(), Pose::zeros(17));

        let mut q = Pose::zeros(17);
        q.joints_mut()[0] = [10.0, 0.0, 0.0];
        q.joints_mut()[5] = [13.0, 0.0, 0.0];
        let aligned = root_align(&q, &schema).unwrap();
        assert_eq!(aligned.joint(5), [3.0, 0.0, 0.0]);
        assert_eq!(aligned.joint(0), [0.0; 3]);
    }

    #[test]
    fn root_align_rejects_nan() {
        let mut p = sample_pose();
        p.joints_mut()[3][1] = f64::NAN;
        assert!(matches!(
            root_align(&p, &KeypointSchema::h36m17()),
            Err(Error::InvalidPose(_))
        ));
    }

    #[test]
    fn mpjpe_cases() {
        let gt = sample_pose();
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let shifted = gt.translated([3.0, 0.0, 0.0]);
        assert!((mpjpe(&shifted, &gt).unwrap() - 3.0).abs() < 1e-9);

        let mut one_off = Pose::zeros(17);
        one_off.joints_mut()[8] = [0.0, 17.0, 0.0];
        assert_eq!(mpjpe(&one_off, &Pose::zeros(17)).unwrap(), 1.0);

        assert!(matches!(mpjpe(&Pose::zeros(16), &gt), Err(Error::Schema(_))));
    }

    #[test]
    fn subset_mpjpe_cases() {
        let schema = KeypointSchema::h36m17();
        let gt = Pose::zeros(17);
        let mut pred = gt.clone();
        for &i in &schema.proximal_indices {
            pred.joints_mut()[i] = [4.0, 4.0, 4.0];
        }
        assert_eq!(subset_mpjpe(&pred, &gt, &schema.distal_indices).unwrap(), 0.0);

        let errs = [4.0, 8.0, 12.0, 16.0];
        for (&i, e) in schema.distal_indices.iter().zip(errs) {
            pred.joints_mut()[i] = [0.0, 0.0, e];
        }
        assert!((subset_mpjpe(&pred, &gt, &schema.distal_indices).unwrap() - 10.0).abs() < 1e-12);

        assert!(matches!(subset_mpjpe(&pred, &gt, &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn procrustes_scale_translation_recovery() {
        let src = sample_pose();
        let dst = Pose::new(
            src.joints()
                .iter()
                .map(|p| [2.0 * p[0] + 7.0, 2.0 * p[1] - 3.0, 2.0 * p[2] + 11.0])
                .collect(),
        );
        let aligned = procrustes_align(&src, &dst).unwrap();
        assert!(mpjpe(&aligned, &dst).unwrap() < 1e-9);
    }

    #[test]
    fn procrustes_coincident_source_is_degenerate() {
        let src = Pose::new(vec![[1.0, 2.0, 3.0]; 17]);
        let err = procrustes_align(&src, &sample_pose()).unwrap_err();
        assert!(matches!(err, Error::AlignmentDegenerate { .. }));
    }

    #[test]
    fn procrustes_collinear_source_is_degenerate() {
        let src = Pose::new((0..17).map(|i| [i as f64, 2.0 * i as f64, 0.0]).collect());
        match procrustes_align(&src, &sample_pose()) {
            Err(Error::AlignmentDegenerate { best_effort, .. }) => {
                assert!(best_effort.scale.is_finite())
            }
            other => panic!("expected degenerate alignment, got {other:?}"),
        }
    }

    #[test]
    fn schema_validation() {
        let names: Vec<String> = H36M_JOINT_NAMES.iter().map(|s| s.to_string()).collect();
        assert!(KeypointSchema::new("x", names.clone(), 0, [1, 4, 11, 14], [3, 6, 13, 16]).is_ok());
        assert!(KeypointSchema::new("x", names.clone(), 0, [1, 4, 11, 14], [3, 6, 13, 14]).is_err());
        assert!(KeypointSchema::new("x", names.clone(), 1, [1, 4, 11, 14], [3, 6, 13, 16]).is_err());
        assert!(KeypointSchema::new("x", names, 0, [1, 4, 11, 40], [3, 6, 13, 16]).is_err());
    }
}
