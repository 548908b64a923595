//! Experiment drivers behind the command line: dataset synthesis, training,
//! evaluation arms, the loss/error correlation study and the latency bench.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::correction::{train_cnet, train_rcnet, EpochLoss, TrainConfig, TrainedNetwork};
use crate::error::{Error, Result};
use crate::harness::dataset::write_dataset;
use crate::harness::report::{PoseErrors, ReportRow, RunReport};
use crate::pose::{subset_mpjpe, KeypointSchema, SampleRecord, Split};
use crate::selector::{classify, energy_score, SelectorConfig, SelectorKind};
use crate::synthgen::{generate_dataset, CorruptionModel, SkeletonModel};
use crate::tinynet::{load_checkpoint_expecting, Network, NetworkConfig};
use crate::tta::{consistency_loss, run_pipeline, PipelineResult, RoutePath, TtaConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_size: usize,
    pub test_size: usize,
    /// OOD share of the training split. The networks learn from the
    /// backbone's own source-domain data, so this defaults to zero.
    pub train_ood_fraction: f64,
    pub skeleton: SkeletonModel,
    /// Test-split corruption; also carries the seed.
    pub corruption: CorruptionModel,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_size: 20_000,
            test_size: 4_000,
            train_ood_fraction: 0.0,
            skeleton: SkeletonModel::default(),
            corruption: CorruptionModel::default(),
        }
    }
}

impl SynthConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = Self::default();
        cfg.corruption.seed = seed;
        cfg
    }

    pub fn train_model(&self) -> CorruptionModel {
        CorruptionModel {
            ood_fraction: self.train_ood_fraction,
            ..self.corruption.clone()
        }
    }

    pub fn train_records(&self) -> Result<Vec<SampleRecord>> {
        let ds = generate_dataset(self.train_size, Split::Train, &self.skeleton, &self.train_model())?;
        Ok(ds.into_iter().map(|s| s.record).collect())
    }

    pub fn test_records(&self) -> Result<Vec<SampleRecord>> {
        let ds = generate_dataset(self.test_size, Split::Test, &self.skeleton, &self.corruption)?;
        Ok(ds.into_iter().map(|s| s.record).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub train_count: usize,
    pub test_count: usize,
}

/// Writes `train.jsonl` and `test.jsonl` into `out_dir`.
pub fn cmd_synth(cfg: &SynthConfig, out_dir: &Path, schema: &KeypointSchema) -> Result<SynthOutput> {
    if cfg.train_size == 0 || cfg.test_size == 0 {
        return Err(Error::Argument("dataset sizes must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.train_ood_fraction) {
        return Err(Error::Argument("train OOD fraction must lie in [0, 1]".into()));
    }
    if schema.joint_count != 17 {
        return Err(Error::Schema("the simulator only emits 17-joint poses".into()));
    }
    let train = cfg.train_records()?;
    let test = cfg.test_records()?;
    std::fs::create_dir_all(out_dir)?;
    let out = SynthOutput {
        train_path: out_dir.join("train.jsonl"),
        test_path: out_dir.join("test.jsonl"),
        train_count: train.len(),
        test_count: test.len(),
    };
    write_dataset(&out.train_path, &train, schema)?;
    write_dataset(&out.test_path, &test, schema)?;
    info!("wrote {} train and {} test records", out.train_count, out.test_count);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkRole {
    Cnet,
    Rcnet,
}

impl FromStr for NetworkRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnet" => Ok(NetworkRole::Cnet),
            "rcnet" => Ok(NetworkRole::Rcnet),
            other => Err(Error::Argument(format!("unknown network '{other}'"))),
        }
    }
}

/// Loads the CNet checkpoint an RCNet run depends on.
pub fn load_dependency(path: Option<&Path>, expected: &NetworkConfig) -> Result<Network> {
    let path = path.ok_or_else(|| Error::Dependency("rcnet training needs a cnet checkpoint".into()))?;
    if !path.exists() {
        return Err(Error::Dependency(format!("cnet checkpoint {} not found", path.display())));
    }
    load_checkpoint_expecting(path, expected)
}

/// Trains one network. RCNet requires the trained CNet.
pub fn cmd_train(
    records: &[SampleRecord],
    role: NetworkRole,
    cnet: Option<&Network>,
    cfg: &TrainConfig,
    net_cfg: &NetworkConfig,
    schema: &KeypointSchema,
) -> Result<TrainedNetwork> {
    match role {
        NetworkRole::Cnet => train_cnet(records, cfg, net_cfg, schema),
        NetworkRole::Rcnet => {
            let cnet = cnet.ok_or_else(|| Error::Dependency("rcnet training needs a trained cnet".into()))?;
            train_rcnet(records, cnet, cfg, net_cfg, schema)
        }
    }
}

pub fn loss_log_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,loss,primary,aligned\n");
    for e in history {
        let _ = writeln!(out, "{},{},{},{}", e.epoch, e.loss, e.primary, e.aligned);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Backbone output unchanged.
    Baseline,
    CnetOnly,
    TtaAll,
    /// Energy-gated selective adaptation.
    Escape,
    RandomSelect,
}

impl EvalMode {
    pub const ALL: [EvalMode; 5] = [
        EvalMode::Baseline,
        EvalMode::CnetOnly,
        EvalMode::TtaAll,
        EvalMode::Escape,
        EvalMode::RandomSelect,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Baseline => "baseline",
            EvalMode::CnetOnly => "cnet_only",
            EvalMode::TtaAll => "tta_all",
            EvalMode::Escape => "escape",
            EvalMode::RandomSelect => "random_select",
        }
    }

    /// Selector policy the arm runs with.
    pub fn selector(&self, base: &SelectorConfig) -> SelectorConfig {
        let kind = match self {
            EvalMode::Baseline | EvalMode::CnetOnly => SelectorKind::None,
            EvalMode::TtaAll => SelectorKind::All,
            EvalMode::Escape => SelectorKind::Energy,
            EvalMode::RandomSelect => SelectorKind::Random,
        };
        SelectorConfig {
            kind,
            ..base.clone()
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown eval mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub selector: SelectorConfig,
    pub tta: TtaConfig,
}

impl EvalConfig {
    pub fn new(mode: EvalMode) -> Self {
        Self {
            mode,
            selector: SelectorConfig::default(),
            tta: TtaConfig::default(),
        }
    }

    pub fn echo(&self, schema: &KeypointSchema, cnet: &Network, rcnet: &Network) -> Vec<(String, String)> {
        let s = self.mode.selector(&self.selector);
        [
            ("mode", self.mode.to_string()),
            ("schema", schema.name.clone()),
            ("selector", s.kind.to_string()),
            ("energy_threshold", s.threshold.to_string()),
            ("ood_direction", s.direction.to_string()),
            ("random_rate", s.random_rate.to_string()),
            ("seed", s.seed.to_string()),
            ("tta_steps", self.tta.steps.to_string()),
            ("tta_lr", self.tta.learning_rate.to_string()),
            ("episodic", self.tta.episodic.to_string()),
            ("workers", self.tta.workers.to_string()),
            ("cnet_checksum", format!("{:016x}", cnet.checksum())),
            ("rcnet_checksum", format!("{:016x}", rcnet.checksum())),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Per-sample results of one arm, without metrics. Ground truth is removed
/// before anything reaches the pipeline.
pub fn run_arm(
    records: &[SampleRecord],
    cnet: &Network,
    rcnet: &Network,
    cfg: &EvalConfig,
    schema: &KeypointSchema,
) -> Result<(Vec<PipelineResult>, Vec<(String, String)>)> {
    let stripped: Vec<SampleRecord> = records.iter().map(SampleRecord::without_gt).collect();
    if cfg.mode == EvalMode::Baseline {
        let mut results = Vec::with_capacity(stripped.len());
        let mut skipped = Vec::new();
        for r in &stripped {
            let start = Instant::now();
            let score = schema.check(&r.predicted).and_then(|_| energy_score(&r.predicted));
            match score {
                Ok(score) => results.push(PipelineResult {
                    id: r.id.clone(),
                    decision: classify(score, cfg.selector.threshold, cfg.selector.direction),
                    selected: false,
                    pose_corrected: r.predicted.clone(),
                    path: RoutePath::Fast,
                    tta_loss_trace: Vec::new(),
                    fell_back: false,
                    elapsed: start.elapsed(),
                }),
                Err(e) => skipped.push((r.id.clone(), e.to_string())),
            }
        }
        return Ok((results, skipped));
    }
    let run = run_pipeline(cnet, rcnet, &stripped, &cfg.mode.selector(&cfg.selector), &cfg.tta, schema)?;
    Ok((run.results, run.skipped))
}

/// Runs one arm and scores it against ground truth.
pub fn cmd_eval(
    records: &[SampleRecord],
    cnet: &Network,
    rcnet: &Network,
    cfg: &EvalConfig,
    schema: &KeypointSchema,
) -> Result<RunReport> {
    for r in records {
        r.gt()?;
    }
    let (results, skipped) = run_arm(records, cnet, rcnet, cfg, schema)?;
    let by_id: std::collections::HashMap<&str, &SampleRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let rows = results
        .into_iter()
        .map(|res| {
            let rec = by_id[res.id.as_str()];
            let gt = rec.gt()?;
            let pre = PoseErrors::measure(&rec.predicted, gt, schema)?;
            let post = PoseErrors::measure(&res.pose_corrected, gt, schema)?;
            Ok(ReportRow {
                id: res.id,
                energy: res.decision.score,
                is_ood: res.decision.is_ood,
                path: res.path,
                distal_pre: pre.distal,
                distal_post: post.distal,
                mpjpe_pre: pre.all,
                mpjpe_post: post.all,
                pa_pre: pre.aligned,
                pa_post: post.aligned,
                l_tt: res.tta_loss_trace,
                elapsed_us: res.elapsed.as_secs_f64() * 1e6,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut echo = cfg.echo(schema, cnet, rcnet);
    echo.push(("samples".into(), records.len().to_string()));
    RunReport::new(echo, rows, skipped)
}

pub const CORRELATION_BINS: usize = 20;
pub const MIN_CORRELATION_SAMPLES: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_loss: Option<f64>,
    pub mean_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    /// `(id, L_TT, gt distal MPJPE of the CNet-corrected pose)`
    pub samples: Vec<(String, f64, f64)>,
    pub bins: Vec<CorrelationBin>,
    /// `None` when either variable has zero variance.
    pub pearson_r: Option<f64>,
}

/// Pearson correlation; `None` for constant inputs or fewer than two pairs.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Equal-width bins over `[min, max]` of `keys`; the top edge is inclusive.
pub fn equal_width_bins(keys: &[f64], values: &[f64], bins: usize) -> Vec<CorrelationBin> {
    let lo = keys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = keys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut sums = vec![(0usize, 0.0, 0.0); bins];
    for (&k, &v) in keys.iter().zip(values) {
        let b = if width > 0.0 {
            (((k - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        sums[b].0 += 1;
        sums[b].1 += k;
        sums[b].2 += v;
    }
    sums.into_iter()
        .enumerate()
        .map(|(i, (count, sk, sv))| CorrelationBin {
            lo: lo + width * i as f64,
            hi: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count,
            mean_loss: (count > 0).then(|| sk / count as f64),
            mean_error: (count > 0).then(|| sv / count as f64),
        })
        .collect()
}

/// Per-sample self-consistency loss of the pretrained networks against the
/// ground-truth distal error of the CNet-corrected pose.
pub fn cmd_correlation(
    records: &[SampleRecord],
    cnet: &Network,
    rcnet: &Network,
    schema: &KeypointSchema,
) -> Result<CorrelationReport> {
    if records.len() < MIN_CORRELATION_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{} samples, at least {MIN_CORRELATION_SAMPLES} needed",
            records.len()
        )));
    }
    let samples = records
        .iter()
        .map(|r| {
            let gt = r.gt()?;
            let cl = consistency_loss(cnet, rcnet, &r.without_gt().predicted, schema)?;
            let err = subset_mpjpe(&cl.corrected, gt, &schema.distal_indices)?;
            Ok((r.id.clone(), cl.loss, err))
        })
        .collect::<Result<Vec<_>>>()?;
    let losses: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let errors: Vec<f64> = samples.iter().map(|s| s.2).collect();
    Ok(CorrelationReport {
        bins: equal_width_bins(&losses, &errors, CORRELATION_BINS),
        pearson_r: pearson(&losses, &errors),
        samples,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

impl CorrelationReport {
    pub const HEADER: &'static str = "kind,label,l_tt,distal_mpjpe,count,bin_lo,bin_hi,pearson_r";

    /// Header plus one row per sample, one per bin and a summary row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for (id, l, e) in &self.samples {
            let _ = writeln!(out, "sample,{id},{l},{e},1,,,");
        }
        for (i, b) in self.bins.iter().enumerate() {
            let _ = writeln!(
                out,
                "bin,{i},{},{},{},{},{},",
                opt(b.mean_loss),
                opt(b.mean_error),
                b.count,
                b.lo,
                b.hi
            );
        }
        let n = self.samples.len();
        let ml = self.samples.iter().map(|s| s.1).sum::<f64>() / n as f64;
        let me = self.samples.iter().map(|s| s.2).sum::<f64>() / n as f64;
        let _ = writeln!(out, "summary,all,{ml},{me},{n},,,{}", opt(self.pearson_r));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub arm: EvalMode,
    /// `all`, `fast` or `adapted`.
    pub path: String,
    pub samples: usize,
    pub mean_us: f64,
    pub p95_us: f64,
}

pub const BENCH_WARMUP: usize = 50;

/// Nearest-rank percentile of already sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn timing_row(arm: EvalMode, path: &str, mut us: Vec<f64>) -> Option<BenchRow> {
    if us.is_empty() {
        return None;
    }
    us.sort_by(f64::total_cmp);
    Some(BenchRow {
        arm,
        path: path.to_string(),
        samples: us.len(),
        mean_us: us.iter().sum::<f64>() / us.len() as f64,
        p95_us: percentile(&us, 0.95),
    })
}

/// Per-sample latency of each arm. The first `BENCH_WARMUP` samples of every
/// arm run but are not timed.
pub fn cmd_bench(
    records: &[SampleRecord],
    cnet: &Network,
    rcnet: &Network,
    arms: &[EvalMode],
    base: &EvalConfig,
    schema: &KeypointSchema,
) -> Result<Vec<BenchRow>> {
    if records.len() <= BENCH_WARMUP {
        return Err(Error::InsufficientData(format!(
            "benchmark needs more than {BENCH_WARMUP} samples"
        )));
    }
    let mut rows = Vec::new();
    for &arm in arms {
        let cfg = EvalConfig {
            mode: arm,
            ..base.clone()
        };
        let (results, _) = run_arm(records, cnet, rcnet, &cfg, schema)?;
        let timed = &results[BENCH_WARMUP.min(results.len())..];
        let us = |p: Option<RoutePath>| -> Vec<f64> {
            timed
                .iter()
                .filter(|r| p.is_none_or(|p| r.path == p))
                .map(|r| r.elapsed.as_secs_f64() * 1e6)
                .collect()
        };
        rows.extend(timing_row(arm, "all", us(None)));
        rows.extend(timing_row(arm, "fast", us(Some(RoutePath::Fast))));
        rows.extend(timing_row(arm, "adapted", us(Some(RoutePath::Adapted))));
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("arm,path,samples,mean_us,p95_us\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.arm, r.path, r.samples, r.mean_us, r.p95_us);
    }
    out
}
