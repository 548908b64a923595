//! Shared helpers for the integration tests: finite differences, a
//! loop-based reference forward pass and a closed-form ridge regressor.

#![allow(dead_code)]

use escape::pose::{KeypointSchema, Pose, SampleRecord};
use escape::tinynet::{Gradients, Network};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_rel: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }
}

/// Agreement rule: absolute difference within `abs` or relative within `rel`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let d = (a - b).abs();
    d <= abs || d <= rel * a.abs().max(b.abs())
}

/// Central differences of `loss` against `analytic`, for every entry of
/// every trainable tensor or, with `per_tensor = Some(k)`, for `k` random
/// entries per tensor (all entries of shorter tensors).
pub fn check_gradients(
    net: &Network,
    analytic: &Gradients,
    mut loss: impl FnMut(&Network) -> f64,
    per_tensor: Option<usize>,
    seed: u64,
) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = net.param_names();
    let mut probe = net.clone();
    let mut report = FdReport::default();
    let lens: Vec<usize> = net.trainable().iter().map(|t| t.len()).collect();
    for (t, &len) in lens.iter().enumerate() {
        let picks: Vec<usize> = match per_tensor {
            Some(k) if k < len => (0..k).map(|_| rng.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for k in picks {
            let orig = probe.trainable()[t][k];
            let h = 1e-6 * orig.abs().max(1.0);
            probe.trainable_mut()[t][k] = orig + h;
            let plus = loss(&probe);
            probe.trainable_mut()[t][k] = orig - h;
            let minus = loss(&probe);
            probe.trainable_mut()[t][k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.tensors[t][k];
            report.checked += 1;
            let d = (a - numeric).abs();
            if d > 1e-6 {
                report.worst_rel = report.worst_rel.max(d / a.abs().max(numeric.abs()));
            }
            if !close(a, numeric, 1e-3, 1e-6) {
                report.failures.push(format!("{}[{k}]: analytic {a:e} numeric {numeric:e}", names[t]));
            }
        }
    }
    report
}

/// Reference forward pass with explicit loops. `dropout_seed` replays the
/// network's dropout stream in train mode; `None` means eval statistics.
pub fn reference_forward(net: &Network, x: &[Vec<f64>], dropout_seed: Option<u64>) -> Vec<Vec<f64>> {
    let cfg = net.config().clone();
    let t = net.trainable();
    let stats = net.running_stats();
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let p = cfg.dropout_rate;

    let unit = |input: &Vec<Vec<f64>>, u: usize, rng: &mut Option<ChaCha8Rng>| -> Vec<Vec<f64>> {
        let (w, b, gamma, beta) = (t[4 * u], t[4 * u + 1], t[4 * u + 2], t[4 * u + 3]);
        let fan_in = input[0].len();
        let width = b.len();
        let z: Vec<Vec<f64>> = input
            .iter()
            .map(|row| {
                (0..width)
                    .map(|o| {
                        let mut acc = b[o];
                        for i in 0..fan_in {
                            acc += row[i] * w[i * width + o];
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        let n = z.len() as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = if rng.is_some() {
            (0..width)
                .map(|o| {
                    let m = z.iter().map(|r| r[o]).sum::<f64>() / n;
                    let v = z.iter().map(|r| (r[o] - m).powi(2)).sum::<f64>() / n;
                    (m, v)
                })
                .unzip()
        } else {
            (stats[u].0.to_vec(), stats[u].1.to_vec())
        };
        let mut out = vec![vec![0.0; width]; z.len()];
        for (r, row) in z.iter().enumerate() {
            for o in 0..width {
                let y = gamma[o] * (row[o] - mean[o]) / (var[o] + 1e-5).sqrt() + beta[o];
                let mut v = y.max(0.0);
                if let Some(g) = rng.as_mut() {
                    if p > 0.0 {
                        v = if g.random::<f64>() < p { 0.0 } else { v / (1.0 - p) };
                    }
                }
                out[r][o] = v;
            }
        }
        out
    };

    let mut h = unit(&x.to_vec(), 0, &mut rng);
    for blk in 0..cfg.residual_blocks {
        let a = unit(&h, 1 + 2 * blk, &mut rng);
        let bb = unit(&a, 2 + 2 * blk, &mut rng);
        for (hr, br) in h.iter_mut().zip(&bb) {
            for (hv, bv) in hr.iter_mut().zip(br) {
                *hv += bv;
            }
        }
    }
    let (w, b) = (t[t.len() - 2], t[t.len() - 1]);
    let width = b.len();
    h.iter()
        .map(|row| {
            (0..width)
                .map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * w[i * width + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Closed-form ridge regression from the flattened prediction (plus a bias
/// column) to the distal error, `W = (X'X + alpha I)^-1 X'Y`.
pub struct Ridge {
    weights: DMatrix<f64>,
}

fn features(p: &Pose) -> Vec<f64> {
    let mut v = p.flatten();
    v.push(1.0);
    v
}

impl Ridge {
    pub fn fit(records: &[SampleRecord], schema: &KeypointSchema, alpha: f64) -> Self {
        let d = schema.flat_dim() + 1;
        let n = records.len();
        let xs: Vec<f64> = records.iter().flat_map(|r| features(&r.predicted)).collect();
        let ys: Vec<f64> = records
            .iter()
            .flat_map(|r| {
                let gt = r.ground_truth.as_ref().expect("ridge needs ground truth");
                schema
                    .distal_indices
                    .iter()
                    .flat_map(|&j| {
                        let (a, b) = (r.predicted.joint(j), gt.joint(j));
                        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let x = DMatrix::from_row_slice(n, d, &xs);
        let y = DMatrix::from_row_slice(n, 12, &ys);
        let gram = x.transpose() * &x + DMatrix::identity(d, d) * alpha;
        let weights = gram
            .cholesky()
            .expect("regularised Gram matrix is positive definite")
            .solve(&(x.transpose() * y));
        Self { weights }
    }

    pub fn correct(&self, pose: &Pose, schema: &KeypointSchema) -> Pose {
        let f = DMatrix::from_row_slice(1, self.weights.nrows(), &features(pose));
        let delta = f * &self.weights;
        let mut out = pose.clone();
        for (k, &j) in schema.distal_indices.iter().enumerate() {
            for c in 0..3 {
                out.joints_mut()[j][c] -= delta[(0, 3 * k + c)];
            }
        }
        out
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Textbook two-pass Pearson correlation.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Quickly trained small CNet/RCNet pair plus a mixed test split.
pub struct SmallSetup {
    pub cnet: Network,
    pub rcnet: Network,
    pub test: Vec<SampleRecord>,
    pub schema: KeypointSchema,
}

pub fn small_setup(seed: u64) -> SmallSetup {
    use escape::correction::{train_cnet, train_rcnet, TrainConfig};
    use escape::harness::experiments::SynthConfig;
    use escape::tinynet::NetworkConfig;

    let schema = KeypointSchema::h36m17();
    let mut synth = SynthConfig::with_seed(seed);
    synth.train_size = 1500;
    synth.test_size = 200;
    let train = synth.train_records().unwrap();
    let test = synth.test_records().unwrap();
    let tc = TrainConfig { epochs: 4, batch_size: 128, learning_rate: 1e-3, seed, ..TrainConfig::default() };
    let nc = NetworkConfig { hidden_dim: 32, seed, ..NetworkConfig::default() };
    let cnet = train_cnet(&train, &tc, &nc, &schema).unwrap().network;
    let rcnet = train_rcnet(&train, &cnet, &tc, &nc, &schema).unwrap().network;
    SmallSetup { cnet, rcnet, test, schema }
}
