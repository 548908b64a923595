//! Self-consistency test-time adaptation and the routing pipeline.
//!
//! For a pose `X`, CNet corrects the distal joints (`X^C`), the frozen RCNet
//! then corrects the proximal joints of `X^C` (`X^R`), and the adaptation
//! loss is the distance between the proximal joints of `X^R` and `X`. Only
//! CNet is updated. Both networks run with eval-mode normalization so a
//! single sample is well defined.

use std::time::{Duration, Instant};

use log::warn;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correction::{apply_correction, correct_pose, CorrectionOutput};
use crate::error::{Error, Result};
use crate::pose::{KeypointSchema, Pose, SampleRecord};
use crate::selector::{classify, energy_score, EnergyDecision, RandomSelector, SelectorConfig, SelectorKind};
use crate::tinynet::{adam_step, AdamState, Gradients, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Reset CNet to the pretrained weights before every sample.
    pub episodic: bool,
    pub batch_size: usize,
    /// Worker threads for episodic adaptation.
    pub workers: usize,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            steps: 2,
            learning_rate: 5e-4,
            episodic: true,
            batch_size: 1,
            workers: 1,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument("TTA learning rate must be positive".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Argument("only per-sample adaptation (batch size 1) is supported".into()));
        }
        if self.workers == 0 {
            return Err(Error::Argument("at least one worker is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutePath {
    Fast,
    Adapted,
}

impl RoutePath {
    pub fn as_str(&self) -> &'static str {
        match self {
            RoutePath::Fast => "fast",
            RoutePath::Adapted => "adapted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub id: String,
    /// What the energy gate says, whatever policy was used.
    pub decision: EnergyDecision,
    /// Whether the active policy routed the sample to adaptation.
    pub selected: bool,
    pub pose_corrected: Pose,
    pub path: RoutePath,
    pub tta_loss_trace: Vec<f64>,
    /// Adaptation produced a non-finite value and the fast correction was used.
    pub fell_back: bool,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct ConsistencyLoss {
    pub loss: f64,
    /// Gradient with respect to CNet parameters.
    pub grads: Gradients,
    pub corrected: Pose,
    pub reverse_corrected: Pose,
}

fn row(pose: &Pose) -> Array2<f64> {
    Array2::from_shape_vec((1, pose.joint_count() * 3), pose.flatten()).unwrap()
}

/// Self-consistency loss and its gradient with respect to CNet parameters.
/// RCNet is only read; its parameters receive no gradient.
pub fn consistency_loss(
    cnet: &Network,
    rcnet: &Network,
    pose: &Pose,
    schema: &KeypointSchema,
) -> Result<ConsistencyLoss> {
    schema.check(pose)?;
    let cfwd = cnet.forward_eval(row(pose).view())?;
    let distal_delta = CorrectionOutput::from_flat(cfwd.output.as_slice().unwrap())?;
    let corrected = apply_correction(pose, &distal_delta, &schema.distal_indices)?;

    let rfwd = rcnet.forward_eval(row(&corrected).view())?;
    let proximal_delta = CorrectionOutput::from_flat(rfwd.output.as_slice().unwrap())?;
    let reverse_corrected = apply_correction(&corrected, &proximal_delta, &schema.proximal_indices)?;

    let residual: Vec<f64> = reverse_corrected
        .gather(&schema.proximal_indices)
        .iter()
        .zip(pose.gather(&schema.proximal_indices))
        .map(|(a, b)| a - b)
        .collect();
    let loss = residual.iter().map(|v| v * v).sum::<f64>().sqrt();

    if loss == 0.0 {
        return Ok(ConsistencyLoss {
            loss,
            grads: Gradients::zeros_like(cnet),
            corrected,
            reverse_corrected,
        });
    }
    let unit: Vec<f64> = residual.iter().map(|v| v / loss).collect();

    // d loss / d X^C: identity path through the proximal joints plus the
    // path through RCNet's output (which enters with a minus sign).
    let neg_unit = Array2::from_shape_vec((1, unit.len()), unit.iter().map(|v| -v).collect()).unwrap();
    let mut grad_corrected = rcnet.backward_input(&rfwd.cache, neg_unit.view())?;
    for (k, &j) in schema.proximal_indices.iter().enumerate() {
        for c in 0..3 {
            grad_corrected[[0, 3 * j + c]] += unit[3 * k + c];
        }
    }
    // X^C_D = X_D - C(X)
    let grad_cnet_out = Array2::from_shape_fn((1, schema.distal_indices.len() * 3), |(_, i)| {
        let j = schema.distal_indices[i / 3];
        -grad_corrected[[0, 3 * j + i % 3]]
    });
    let grads = cnet.backward(&cfwd.cache, grad_cnet_out.view())?.params;
    Ok(ConsistencyLoss {
        loss,
        grads,
        corrected,
        reverse_corrected,
    })
}

#[derive(Debug, Clone)]
pub struct Adaptation {
    pub cnet: Network,
    /// Loss before each update step.
    pub trace: Vec<f64>,
    pub corrected: Pose,
    pub fell_back: bool,
}

/// Runs `cfg.steps` Adam steps of the consistency loss on a copy of `cnet`
/// with fresh optimizer state, then corrects `pose` with the adapted copy.
/// Non-finite values abort the adaptation and fall back to `cnet` unchanged.
pub fn adapt_sample(
    cnet: &Network,
    rcnet: &Network,
    pose: &Pose,
    cfg: &TtaConfig,
    schema: &KeypointSchema,
) -> Result<Adaptation> {
    let mut adapted = cnet.clone();
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.steps);

    let fallback = |trace: Vec<f64>| -> Result<Adaptation> {
        Ok(Adaptation {
            cnet: cnet.clone(),
            trace,
            corrected: correct_pose(cnet, pose, &schema.distal_indices)?,
            fell_back: true,
        })
    };

    for _ in 0..cfg.steps {
        let step = consistency_loss(&adapted, rcnet, pose, schema)?;
        trace.push(step.loss);
        if !step.loss.is_finite() {
            return fallback(trace);
        }
        match adam_step(&mut adapted, &step.grads, &mut adam) {
            Ok(()) => {}
            Err(Error::UpdateRejected(_)) => return fallback(trace),
            Err(e) => return Err(e),
        }
    }
    let corrected = match correct_pose(&adapted, pose, &schema.distal_indices) {
        Ok(p) if p.is_finite() => p,
        Ok(_) | Err(Error::InvalidPose(_)) => return fallback(trace),
        Err(e) => return Err(e),
    };
    Ok(Adaptation {
        cnet: adapted,
        trace,
        corrected,
        fell_back: false,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub results: Vec<PipelineResult>,
    /// `(id, reason)` for samples that could not be processed.
    pub skipped: Vec<(String, String)>,
}

fn validate_sample(record: &SampleRecord, schema: &KeypointSchema) -> Result<()> {
    schema.check(&record.predicted)?;
    record.predicted.ensure_finite()
}

fn process_sample(
    cnet: &Network,
    rcnet: &Network,
    record: &SampleRecord,
    random_flag: Option<bool>,
    selector: &SelectorConfig,
    tta: &TtaConfig,
    schema: &KeypointSchema,
) -> Result<(PipelineResult, Option<Network>)> {
    let start = Instant::now();
    let pose = &record.predicted;
    let decision = classify(energy_score(pose)?, selector.threshold, selector.direction);
    let selected = match selector.kind {
        SelectorKind::Energy => decision.is_ood,
        SelectorKind::All => true,
        SelectorKind::None => false,
        SelectorKind::Random => random_flag.unwrap_or(false),
    };
    let (pose_corrected, trace, fell_back, adapted) = if selected {
        let a = adapt_sample(cnet, rcnet, pose, tta, schema)?;
        (a.corrected, a.trace, a.fell_back, Some(a.cnet))
    } else {
        (correct_pose(cnet, pose, &schema.distal_indices)?, Vec::new(), false, None)
    };
    let elapsed = start.elapsed();
    Ok((
        PipelineResult {
            id: record.id.clone(),
            decision,
            selected,
            pose_corrected,
            path: if selected { RoutePath::Adapted } else { RoutePath::Fast },
            tta_loss_trace: trace,
            fell_back,
            elapsed,
        },
        adapted,
    ))
}

/// Routes every record through the fast or adapted path, in input order.
/// Ground truth is never read. Malformed records are skipped and reported.
pub fn run_pipeline(
    cnet: &Network,
    rcnet: &Network,
    records: &[SampleRecord],
    selector: &SelectorConfig,
    tta: &TtaConfig,
    schema: &KeypointSchema,
) -> Result<PipelineRun> {
    tta.validate()?;
    let mut skipped = Vec::new();
    let mut valid = Vec::with_capacity(records.len());
    for r in records {
        match validate_sample(r, schema) {
            Ok(()) => valid.push(r),
            Err(e) => {
                warn!("skipping sample {}: {e}", r.id);
                skipped.push((r.id.clone(), e.to_string()));
            }
        }
    }
    // the random baseline draws one flag per valid sample, in stream order
    let flags: Vec<Option<bool>> = match selector.kind {
        SelectorKind::Random => RandomSelector::new(selector.random_rate, selector.seed)?
            .take(valid.len())
            .map(Some)
            .collect(),
        _ => vec![None; valid.len()],
    };

    let results = if tta.episodic && tta.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(tta.workers)
            .build()
            .map_err(|e| Error::Argument(format!("worker pool: {e}")))?;
        pool.install(|| {
            valid
                .par_iter()
                .zip(flags.par_iter())
                .map(|(r, &f)| {
                    process_sample(cnet, rcnet, r, f, selector, tta, schema).map(|(res, _)| res)
                })
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        let mut current: Option<Network> = None;
        let mut out = Vec::with_capacity(valid.len());
        for (r, &f) in valid.iter().zip(&flags) {
            let active = current.as_ref().unwrap_or(cnet);
            let (res, adapted) = process_sample(active, rcnet, r, f, selector, tta, schema)?;
            if !tta.episodic {
                if let Some(net) = adapted {
                    current = Some(net);
                }
            }
            out.push(res);
        }
        out
    };
    Ok(PipelineRun { results, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::NetworkConfig;

    fn net(seed: u64, hidden: usize) -> Network {
        let mut n = Network::new(NetworkConfig {
            hidden_dim: hidden,
            seed,
            ..NetworkConfig::default()
        })
        .unwrap();
        n.set_mode(crate::tinynet::Mode::Eval);
        n
    }

    fn pose(seed: f64) -> Pose {
        Pose::new(
            (0..17)
                .map(|i| {
                    let t = i as f64 * 0.7 + seed;
                    [t.sin() * 200.0, t.cos() * 450.0, (t * 0.3).sin() * 90.0]
                })
                .collect(),
        )
    }

    #[test]
    fn zero_networks_give_zero_loss() {
        let schema = KeypointSchema::h36m17();
        let mut c = net(1, 16);
        let mut r = net(2, 16);
        c.zero_output_layer();
        r.zero_output_layer();
        let cl = consistency_loss(&c, &r, &pose(0.0), &schema).unwrap();
        assert_eq!(cl.loss, 0.0);
        assert_eq!(cl.grads.max_abs(), 0.0);
    }

    #[test]
    fn constant_reverse_output_gives_its_norm() {
        let schema = KeypointSchema::h36m17();
        let c = net(1, 16);
        let mut r = net(2, 16);
        r.zero_output_layer();
        let mut bias = vec![0.0; 12];
        bias[3] = 9.0;
        r.set_output_bias(&bias).unwrap();
        let cl = consistency_loss(&c, &r, &pose(0.4), &schema).unwrap();
        assert!((cl.loss - 9.0).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_equals_fast_path() {
        let schema = KeypointSchema::h36m17();
        let c = net(3, 16);
        let r = net(4, 16);
        let cfg = TtaConfig {
            steps: 0,
            ..TtaConfig::default()
        };
        let p = pose(1.0);
        let a = adapt_sample(&c, &r, &p, &cfg, &schema).unwrap();
        assert_eq!(a.corrected, correct_pose(&c, &p, &schema.distal_indices).unwrap());
        assert!(a.trace.is_empty());
    }

    #[test]
    fn silent_reverse_net_leaves_cnet_unchanged() {
        let schema = KeypointSchema::h36m17();
        let c = net(3, 16);
        let mut r = net(4, 16);
        r.zero_output_layer();
        let a = adapt_sample(&c, &r, &pose(2.0), &TtaConfig::default(), &schema).unwrap();
        assert!(a.cnet.same_parameters(&c));
        assert_eq!(a.trace, vec![0.0, 0.0]);
    }

    #[test]
    fn adaptation_leaves_rcnet_untouched() {
        let schema = KeypointSchema::h36m17();
        let c = net(5, 16);
        let r = net(6, 16);
        let before = r.checksum();
        let a = adapt_sample(&c, &r, &pose(0.1), &TtaConfig::default(), &schema).unwrap();
        assert_eq!(r.checksum(), before);
        assert_eq!(a.trace.len(), 2);
        assert!(!a.cnet.same_parameters(&c));
    }

    #[test]
    fn selector_policies_route_all_or_none() {
        let schema = KeypointSchema::h36m17();
        let c = net(5, 16);
        let r = net(6, 16);
        let records: Vec<SampleRecord> = (0..4)
            .map(|i| SampleRecord {
                id: format!("s{i}"),
                predicted: pose(i as f64),
                ground_truth: None,
                split: crate::pose::Split::Test,
            })
            .collect();
        let tta = TtaConfig::default();
        let none = run_pipeline(&c, &r, &records, &SelectorConfig::with_kind(SelectorKind::None), &tta, &schema).unwrap();
        assert!(none.results.iter().all(|r| r.path == RoutePath::Fast && r.tta_loss_trace.is_empty()));
        let all = run_pipeline(&c, &r, &records, &SelectorConfig::with_kind(SelectorKind::All), &tta, &schema).unwrap();
        assert!(all.results.iter().all(|r| r.path == RoutePath::Adapted && r.tta_loss_trace.len() == 2));
    }

    #[test]
    fn malformed_samples_are_skipped() {
        let schema = KeypointSchema::h36m17();
        let c = net(5, 16);
        let r = net(6, 16);
        let mut bad = pose(0.0);
        bad.joints_mut()[2][0] = f64::NAN;
        let records = vec![
            SampleRecord { id: "ok".into(), predicted: pose(0.3), ground_truth: None, split: crate::pose::Split::Test },
            SampleRecord { id: "bad".into(), predicted: bad, ground_truth: None, split: crate::pose::Split::Test },
            SampleRecord { id: "short".into(), predicted: Pose::zeros(16), ground_truth: None, split: crate::pose::Split::Test },
        ];
        let run = run_pipeline(&c, &r, &records, &SelectorConfig::default(), &TtaConfig::default(), &schema).unwrap();
        assert_eq!(run.results.len(), 1);
        assert_eq!(run.skipped.len(), 2);
    }
}
