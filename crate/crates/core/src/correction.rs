//! Distal correction network (CNet) and proximal reverse network (RCNet):
//! applying predicted corrections and supervised training.
//!
//! Sign convention: a network predicts the error `X_I - Y_I` of the joints it
//! targets, so subtracting its output (`apply_correction`) moves the
//! prediction toward the ground truth.

use log::{debug, info};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{procrustes_align, KeypointSchema, Pose, SampleRecord};
use crate::tinynet::{adam_step, AdamState, Gradients, Mode, Network, NetworkConfig};

/// Per-joint error estimates for a target joint set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutput {
    pub deltas: Vec<[f64; 3]>,
}

impl CorrectionOutput {
    pub fn zeros(joints: usize) -> Self {
        Self {
            deltas: vec![[0.0; 3]; joints],
        }
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::Schema(format!(
                "correction length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Ok(Self {
            deltas: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.deltas.iter().flatten().copied().collect()
    }

    pub fn negated(&self) -> Self {
        Self {
            deltas: self.deltas.iter().map(|d| [-d[0], -d[1], -d[2]]).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.deltas.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `pose` with `deltas` subtracted at `indices`; other joints are copied bit for bit.
pub fn apply_correction(
    pose: &Pose,
    deltas: &CorrectionOutput,
    indices: &[usize],
) -> Result<Pose> {
    if deltas.deltas.len() != indices.len() {
        return Err(Error::Schema(format!(
            "{} deltas for {} joints",
            deltas.deltas.len(),
            indices.len()
        )));
    }
    let mut out = pose.clone();
    for (&i, d) in indices.iter().zip(&deltas.deltas) {
        let p = out
            .joints_mut()
            .get_mut(i)
            .ok_or_else(|| Error::Schema(format!("joint index {i} out of range")))?;
        p[0] -= d[0];
        p[1] -= d[1];
        p[2] -= d[2];
    }
    Ok(out)
}

/// Supervision target for the joints in `indices`: `pred_I - gt_I`.
pub fn correction_target(pred: &Pose, gt: &Pose, indices: &[usize]) -> CorrectionOutput {
    CorrectionOutput {
        deltas: indices
            .iter()
            .map(|&i| {
                let (p, g) = (pred.joint(i), gt.joint(i));
                [p[0] - g[0], p[1] - g[1], p[2] - g[2]]
            })
            .collect(),
    }
}

/// Batch mean of the per-row Euclidean distance between `predicted` and
/// `target`, and its gradient with respect to `predicted`. Rows with zero
/// residual get a zero subgradient.
pub fn l2_rows(predicted: ArrayView2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let batch = predicted.nrows() as f64;
    let mut grad = &predicted - &target;
    let mut total = 0.0;
    for mut row in grad.rows_mut() {
        let norm = row.dot(&row).sqrt();
        total += norm;
        if norm > 0.0 {
            row.mapv_inplace(|v| v / (norm * batch));
        }
    }
    (total / batch, grad)
}

/// Euclidean distance between predicted distal errors and the distal error
/// of `pose_pred` relative to `pose_gt`, with the gradient w.r.t. the prediction.
pub fn distal_loss(
    predicted: &CorrectionOutput,
    pose_pred: &Pose,
    pose_gt: Option<&Pose>,
    schema: &KeypointSchema,
) -> Result<(f64, CorrectionOutput)> {
    let gt = pose_gt.ok_or_else(|| Error::SupervisionUnavailable("distal loss".into()))?;
    schema.check(pose_pred)?;
    schema.check(gt)?;
    let target = correction_target(pose_pred, gt, &schema.distal_indices);
    if predicted.deltas.len() != target.deltas.len() {
        return Err(Error::Schema("prediction does not cover the distal set".into()));
    }
    let p = Array2::from_shape_vec((1, predicted.deltas.len() * 3), predicted.flatten()).unwrap();
    let t = Array2::from_shape_vec((1, target.deltas.len() * 3), target.flatten()).unwrap();
    let (loss, grad) = l2_rows(p.view(), t.view());
    Ok((loss, CorrectionOutput::from_flat(grad.as_slice().unwrap())?))
}

/// Stacks flattened poses into a `B x 3j` matrix.
pub fn poses_to_matrix<'a>(poses: impl IntoIterator<Item = &'a Pose>) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = poses.into_iter().map(|p| p.flatten()).collect();
    let cols = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / cols.max(1), cols), flat).expect("uniform pose sizes")
}

fn target_matrix(pairs: &[(&Pose, &Pose)], indices: &[usize]) -> Array2<f64> {
    let flat: Vec<f64> = pairs
        .iter()
        .flat_map(|(p, g)| correction_target(p, g, indices).flatten())
        .collect();
    Array2::from_shape_vec((pairs.len(), indices.len() * 3), flat).unwrap()
}

/// Corrected copy of each pose using the eval-mode output of `net`.
pub fn correct_poses(net: &Network, poses: &[Pose], indices: &[usize]) -> Result<Vec<Pose>> {
    let mut out = Vec::with_capacity(poses.len());
    for chunk in poses.chunks(1024) {
        let deltas = net.predict(poses_to_matrix(chunk).view())?;
        for (pose, row) in chunk.iter().zip(deltas.rows()) {
            let d = CorrectionOutput::from_flat(row.as_slice().unwrap())?;
            out.push(apply_correction(pose, &d, indices)?);
        }
    }
    Ok(out)
}

pub fn correct_pose(net: &Network, pose: &Pose, indices: &[usize]) -> Result<Pose> {
    let x = Array2::from_shape_vec((1, pose.joint_count() * 3), pose.flatten()).unwrap();
    let d = net.predict(x.view())?;
    apply_correction(pose, &CorrectionOutput::from_flat(d.as_slice().unwrap())?, indices)
}

#[derive(Debug, Clone)]
pub struct AlignedLoss {
    pub loss: f64,
    pub grads: Gradients,
    /// Samples whose alignment was degenerate and fell back to the raw pose.
    pub degenerate: usize,
}

/// Procrustes-aligns each prediction onto its ground truth; degenerate
/// alignments fall back to the unaligned pose.
pub fn align_to_gt(preds: &[Pose], gts: &[Pose]) -> (Vec<Pose>, usize) {
    let mut degenerate = 0;
    let aligned = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| match procrustes_align(p, g) {
            Ok(a) => a,
            Err(_) => {
                degenerate += 1;
                p.clone()
            }
        })
        .collect();
    (aligned, degenerate)
}

/// Loss of `net` evaluated on the Procrustes-aligned predictions against
/// the aligned distal targets. The alignment is a constant data transform.
/// Uses the network's current mode.
pub fn aligned_distal_loss(
    net: &mut Network,
    preds: &[Pose],
    gts: &[Pose],
    schema: &KeypointSchema,
) -> Result<AlignedLoss> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Argument("aligned loss needs matching non-empty batches".into()));
    }
    for p in preds.iter().chain(gts) {
        schema.check(p)?;
    }
    let (aligned, degenerate) = align_to_gt(preds, gts);
    let pairs: Vec<(&Pose, &Pose)> = aligned.iter().zip(gts).collect();
    let targets = target_matrix(&pairs, &schema.distal_indices);
    let fwd = net.forward(poses_to_matrix(&aligned).view())?;
    let (loss, g) = l2_rows(fwd.output.view(), targets.view());
    let grads = net.backward(&fwd.cache, g.view())?.params;
    Ok(AlignedLoss {
        loss,
        grads,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4096,
            learning_rate: 1e-4,
            lambda1: 1.0,
            lambda2: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Argument("batch size must be at least 2".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Argument("loss weights must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    /// Unaligned distal term (or the proximal term for RCNet).
    pub primary: f64,
    /// Procrustes-aligned distal term; zero for RCNet.
    pub aligned: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedNetwork {
    pub network: Network,
    pub history: Vec<EpochLoss>,
    pub degenerate_alignments: usize,
}

/// Pre-materialized inputs and targets for a training run.
struct TrainingData {
    inputs: Array2<f64>,
    targets: Array2<f64>,
    /// Aligned inputs/targets for the second CNet term.
    aligned: Option<(Array2<f64>, Array2<f64>)>,
}

fn check_records<'a>(
    dataset: &'a [SampleRecord],
    schema: &KeypointSchema,
) -> Result<(Vec<Pose>, Vec<&'a Pose>)> {
    if dataset.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let mut preds = Vec::with_capacity(dataset.len());
    let mut gts = Vec::with_capacity(dataset.len());
    for r in dataset {
        let gt = r.gt()?;
        schema.check(&r.predicted)?;
        schema.check(gt)?;
        r.predicted.ensure_finite()?;
        gt.ensure_finite()?;
        preds.push(r.predicted.clone());
        gts.push(gt);
    }
    Ok((preds, gts))
}

fn batch_indices(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    // a trailing singleton has no batch statistics; fold it into its neighbour
    if batches.len() > 1 && batches.last().unwrap().len() < 2 {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Loss terms of one supervised batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    /// `w1 * primary + w2 * aligned`
    pub loss: f64,
    pub primary: f64,
    pub aligned: f64,
}

/// Weighted supervised loss of one batch and its parameter gradient, using
/// the network's current mode. The optional aligned pair is forwarded as a
/// second batch after the primary one.
pub fn batch_loss(
    net: &mut Network,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    aligned: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
    weights: (f64, f64),
) -> Result<(BatchLoss, Gradients)> {
    let fwd = net.forward(inputs)?;
    let (primary, mut g) = l2_rows(fwd.output.view(), targets);
    g *= weights.0;
    let mut grads = net.backward(&fwd.cache, g.view())?.params;
    let mut aligned_loss = 0.0;
    if let Some((xa, ta)) = aligned {
        let fwd = net.forward(xa)?;
        let (l, mut g) = l2_rows(fwd.output.view(), ta);
        g *= weights.1;
        grads.add_scaled(&net.backward(&fwd.cache, g.view())?.params, 1.0);
        aligned_loss = l;
    }
    Ok((
        BatchLoss {
            loss: weights.0 * primary + weights.1 * aligned_loss,
            primary,
            aligned: aligned_loss,
        },
        grads,
    ))
}

/// CNet objective `lambda1 * L1 + lambda2 * L2` on a batch of poses.
pub fn cnet_loss(
    net: &mut Network,
    preds: &[Pose],
    gts: &[Pose],
    lambdas: (f64, f64),
    schema: &KeypointSchema,
) -> Result<(BatchLoss, Gradients)> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Argument("loss needs matching non-empty batches".into()));
    }
    let pairs: Vec<(&Pose, &Pose)> = preds.iter().zip(gts).collect();
    let (aligned, _) = align_to_gt(preds, gts);
    let aligned_pairs: Vec<(&Pose, &Pose)> = aligned.iter().zip(gts).collect();
    let x = poses_to_matrix(preds);
    let t = target_matrix(&pairs, &schema.distal_indices);
    let xa = poses_to_matrix(&aligned);
    let ta = target_matrix(&aligned_pairs, &schema.distal_indices);
    batch_loss(net, x.view(), t.view(), Some((xa.view(), ta.view())), lambdas)
}

/// RCNet objective on CNet-corrected poses: distance to the proximal errors.
pub fn rcnet_loss(
    net: &mut Network,
    corrected: &[Pose],
    gts: &[Pose],
    schema: &KeypointSchema,
) -> Result<(BatchLoss, Gradients)> {
    if corrected.len() != gts.len() || corrected.is_empty() {
        return Err(Error::Argument("loss needs matching non-empty batches".into()));
    }
    let pairs: Vec<(&Pose, &Pose)> = corrected.iter().zip(gts).collect();
    let x = poses_to_matrix(corrected);
    let t = target_matrix(&pairs, &schema.proximal_indices);
    batch_loss(net, x.view(), t.view(), None, (1.0, 0.0))
}

fn train_loop(
    mut net: Network,
    data: &TrainingData,
    cfg: &TrainConfig,
    weights: (f64, f64),
    label: &str,
) -> Result<(Network, Vec<EpochLoss>)> {
    let n = data.inputs.nrows();
    if n < 2 {
        return Err(Error::Argument("training needs at least two samples".into()));
    }
    net.set_mode(Mode::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let snapshot = net.clone();
        let (mut sum_loss, mut sum_primary, mut sum_aligned) = (0.0, 0.0, 0.0);
        for idx in batch_indices(n, cfg.batch_size, &mut rng) {
            let b = idx.len() as f64;
            let x = data.inputs.select(Axis(0), &idx);
            let t = data.targets.select(Axis(0), &idx);
            let aligned = data
                .aligned
                .as_ref()
                .map(|(xa, ta)| (xa.select(Axis(0), &idx), ta.select(Axis(0), &idx)));
            let (parts, grads) = batch_loss(
                &mut net,
                x.view(),
                t.view(),
                aligned.as_ref().map(|(xa, ta)| (xa.view(), ta.view())),
                weights,
            )?;
            let (loss, primary, aligned_loss) = (parts.loss, parts.primary, parts.aligned);
            if !loss.is_finite() || !grads.is_finite() {
                let mut last_good = snapshot;
                last_good.set_mode(Mode::Eval);
                return Err(Error::TrainingDiverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            adam_step(&mut net, &grads, &mut adam)?;
            sum_loss += loss * b;
            sum_primary += primary * b;
            sum_aligned += aligned_loss * b;
        }
        let record = EpochLoss {
            epoch,
            loss: sum_loss / n as f64,
            primary: sum_primary / n as f64,
            aligned: sum_aligned / n as f64,
        };
        debug!("{label} epoch {epoch}: loss {:.4}", record.loss);
        history.push(record);
    }
    if let Some(last) = history.last() {
        info!("{label} trained for {} epochs, final loss {:.4}", cfg.epochs, last.loss);
    }
    net.set_mode(Mode::Eval);
    Ok((net, history))
}

/// Supervised CNet training with `lambda1 * L1 + lambda2 * L2`.
pub fn train_cnet(
    dataset: &[SampleRecord],
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    schema: &KeypointSchema,
) -> Result<TrainedNetwork> {
    cfg.validate()?;
    check_net_shape(net_cfg, schema)?;
    let (preds, gts) = check_records(dataset, schema)?;
    let gts_owned: Vec<Pose> = gts.iter().map(|g| (*g).clone()).collect();
    let (aligned, degenerate) = align_to_gt(&preds, &gts_owned);
    if degenerate > 0 {
        info!("{degenerate} degenerate alignments fell back to the unaligned loss");
    }
    let pairs: Vec<(&Pose, &Pose)> = preds.iter().zip(gts.iter().copied()).collect();
    let aligned_pairs: Vec<(&Pose, &Pose)> = aligned.iter().zip(gts.iter().copied()).collect();
    let data = TrainingData {
        inputs: poses_to_matrix(&preds),
        targets: target_matrix(&pairs, &schema.distal_indices),
        aligned: (cfg.lambda2 > 0.0).then(|| {
            (
                poses_to_matrix(&aligned),
                target_matrix(&aligned_pairs, &schema.distal_indices),
            )
        }),
    };
    let (network, history) = train_loop(
        Network::new(net_cfg.clone())?,
        &data,
        cfg,
        (cfg.lambda1, cfg.lambda2),
        "cnet",
    )?;
    Ok(TrainedNetwork {
        network,
        history,
        degenerate_alignments: degenerate,
    })
}

/// RCNet training on CNet-corrected poses with the proximal loss. `cnet` is
/// only read.
pub fn train_rcnet(
    dataset: &[SampleRecord],
    cnet: &Network,
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    schema: &KeypointSchema,
) -> Result<TrainedNetwork> {
    cfg.validate()?;
    check_net_shape(net_cfg, schema)?;
    let (preds, gts) = check_records(dataset, schema)?;
    let corrected = correct_poses(cnet, &preds, &schema.distal_indices)?;
    let pairs: Vec<(&Pose, &Pose)> = corrected.iter().zip(gts.iter().copied()).collect();
    let data = TrainingData {
        inputs: poses_to_matrix(&corrected),
        targets: target_matrix(&pairs, &schema.proximal_indices),
        aligned: None,
    };
    let (network, history) =
        train_loop(Network::new(net_cfg.clone())?, &data, cfg, (1.0, 0.0), "rcnet")?;
    Ok(TrainedNetwork {
        network,
        history,
        degenerate_alignments: 0,
    })
}

fn check_net_shape(net_cfg: &NetworkConfig, schema: &KeypointSchema) -> Result<()> {
    if net_cfg.input_dim != schema.flat_dim() || net_cfg.output_dim != 12 {
        return Err(Error::Schema(format!(
            "network {}->{} does not fit schema '{}' ({} inputs, 12 outputs)",
            net_cfg.input_dim,
            net_cfg.output_dim,
            schema.name,
            schema.flat_dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(seed: f64) -> Pose {
        Pose::new(
            (0..17)
                .map(|i| {
                    let t = i as f64 + seed;
                    [t.sin() * 200.0, t.cos() * 350.0, (t * 0.3).sin() * 90.0]
                })
                .collect(),
        )
    }

    #[test]
    fn apply_correction_cases() {
        let p = pose(0.5);
        let idx = [3, 6, 13, 16];
        assert_eq!(apply_correction(&p, &CorrectionOutput::zeros(4), &idx).unwrap(), p);

        let mut d = CorrectionOutput::zeros(4);
        d.deltas[0] = [5.0, 0.0, 0.0];
        let out = apply_correction(&p, &d, &idx).unwrap();
        for j in 0..17 {
            if j == 3 {
                assert_eq!(out.joint(3)[0], p.joint(3)[0] - 5.0);
                assert_eq!(out.joint(3)[1..], p.joint(3)[1..]);
            } else {
                assert_eq!(out.joint(j), p.joint(j));
            }
        }

        let d = CorrectionOutput::from_flat(&[1.0, 2.0, 3.0, -4.0, 5.0, 6.0, 7.0, 8.0, -9.0, 0.5, 0.25, 0.125]).unwrap();
        let back = apply_correction(&apply_correction(&p, &d, &idx).unwrap(), &d.negated(), &idx).unwrap();
        for (a, b) in back.joints().iter().zip(p.joints()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }

        assert!(matches!(
            apply_correction(&p, &CorrectionOutput::zeros(3), &idx),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn subtracting_target_recovers_gt() {
        let schema = KeypointSchema::h36m17();
        let gt = pose(0.0);
        let pred = pose(0.3);
        let target = correction_target(&pred, &gt, &schema.distal_indices);
        let fixed = apply_correction(&pred, &target, &schema.distal_indices).unwrap();
        for &i in &schema.distal_indices {
            for k in 0..3 {
                assert!((fixed.joint(i)[k] - gt.joint(i)[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distal_loss_cases() {
        let schema = KeypointSchema::h36m17();
        let gt = pose(0.0);
        let pred = pose(0.2);
        let exact = correction_target(&pred, &gt, &schema.distal_indices);
        let (l, g) = distal_loss(&exact, &pred, Some(&gt), &schema).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.norm(), 0.0);

        let mut seven = CorrectionOutput::zeros(4);
        seven.deltas[1] = [0.0, 7.0, 0.0];
        let (l, _) = distal_loss(&seven, &gt, Some(&gt), &schema).unwrap();
        assert!((l - 7.0).abs() < 1e-12);

        assert!(matches!(
            distal_loss(&seven, &gt, None, &schema),
            Err(Error::SupervisionUnavailable(_))
        ));
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = batch_indices(9, 4, &mut rng);
        assert!(batches.iter().all(|b| b.len() >= 2));
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn train_config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        cfg.batch_size = 8;
        cfg.lambda2 = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        let r = train_cnet(
            &[],
            &TrainConfig::default(),
            &NetworkConfig::default(),
            &KeypointSchema::h36m17(),
        );
        assert!(matches!(r, Err(Error::Argument(_))));
    }
}
