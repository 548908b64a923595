//! Residual MLP used for both correction networks.
//!
//! Topology: an embedding unit, `residual_blocks` residual blocks of two
//! units each, and an output linear layer. A unit is
//! `linear -> batch norm -> ReLU -> dropout`. Forward and backward passes are
//! written out by hand for this fixed topology.
//!
//! Batch norm uses batch statistics in [`Mode::Train`] and running statistics
//! in [`Mode::Eval`]. [`Network::forward_eval`] computes eval-mode activations
//! from a shared reference and still returns a cache, so gradients can flow
//! to the trainable parameters at batch size 1 while the running statistics
//! stay frozen.

mod adam;
mod checkpoint;

use std::hash::{Hash, Hasher};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, network_from_bytes, network_to_bytes,
    save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub residual_blocks: usize,
    pub output_dim: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 51,
            hidden_dim: 512,
            residual_blocks: 1,
            output_dim: 12,
            dropout_rate: 0.3,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Argument("network dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Argument(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// True when both configs describe the same parameter layout.
    pub fn same_shape(&self, other: &NetworkConfig) -> bool {
        self.input_dim == other.input_dim
            && self.hidden_dim == other.hidden_dim
            && self.residual_blocks == other.residual_blocks
            && self.output_dim == other.output_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    /// `in x out`, so a batch multiplies on the left.
    pub(crate) weight: Array2<f64>,
    pub(crate) bias: Array1<f64>,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let w_bound = (6.0 / fan_in as f64).sqrt();
        let b_bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
            rng.random_range(-w_bound..w_bound)
        });
        let bias = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-b_bound..b_bound));
        Self { weight, bias }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub(crate) gamma: Array1<f64>,
    pub(crate) beta: Array1<f64>,
    pub(crate) running_mean: Array1<f64>,
    pub(crate) running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
        }
    }
}

/// `linear -> batch norm -> ReLU -> dropout`
#[derive(Debug, Clone)]
pub(crate) struct Unit {
    pub(crate) linear: Linear,
    pub(crate) norm: BatchNorm,
}

#[derive(Debug, Clone)]
pub(crate) struct ResidualBlock {
    pub(crate) first: Unit,
    pub(crate) second: Unit,
}

#[derive(Debug, Clone)]
struct UnitCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    /// ReLU derivative times the (scaled) dropout mask.
    gate: Array2<f64>,
}

/// Activations recorded by a forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    version: u64,
    embed: UnitCache,
    blocks: Vec<(UnitCache, UnitCache)>,
    head_input: Array2<f64>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.head_input.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Array2<f64>,
    pub cache: ForwardCache,
}

/// Parameter gradients in declaration order (see [`Network::param_names`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            tensors: net.trainable().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors.iter_mut().flatten().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub params: Gradients,
    pub input: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    pub(crate) embed: Unit,
    pub(crate) blocks: Vec<ResidualBlock>,
    pub(crate) head: Linear,
    mode: Mode,
    rng: ChaCha8Rng,
    version: u64,
}

fn unit_forward(
    unit: &Unit,
    input: Array2<f64>,
    train: Option<(&mut ChaCha8Rng, f64)>,
) -> (Array2<f64>, UnitCache, Option<(Array1<f64>, Array1<f64>)>) {
    let z = unit.linear.apply(&input);
    let (xhat, inv_std, batch_stats) = match train {
        Some(_) => {
            let mean = z.mean_axis(Axis(0)).expect("batch is non-empty");
            let centered = &z - &mean;
            let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
            let inv_std = var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
            (centered * &inv_std, inv_std, Some((mean, var)))
        }
        None => {
            let inv_std = unit.norm.running_var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
            ((z - &unit.norm.running_mean) * &inv_std, inv_std, None)
        }
    };
    let y = &xhat * &unit.norm.gamma + &unit.norm.beta;
    let mut gate = y.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    if let Some((rng, p)) = train {
        if p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            gate.mapv_inplace(|g| if rng.random::<f64>() < p { 0.0 } else { g * keep });
        }
    }
    let out = y * &gate;
    let cache = UnitCache {
        input,
        xhat,
        inv_std,
        gate,
    };
    (out, cache, batch_stats)
}

/// Returns the input gradient and, when requested, `[dW, db, dgamma, dbeta]`.
fn unit_backward(
    unit: &Unit,
    cache: &UnitCache,
    dout: &Array2<f64>,
    mode: Mode,
    want_params: bool,
) -> (Array2<f64>, Option<[Vec<f64>; 4]>) {
    let dy = dout * &cache.gate;
    let dxhat = &dy * &unit.norm.gamma;
    let dz = match mode {
        Mode::Train => {
            let mean_dxhat = dxhat.mean_axis(Axis(0)).unwrap();
            let mean_dxhat_xhat = (&dxhat * &cache.xhat).mean_axis(Axis(0)).unwrap();
            (dxhat - &mean_dxhat - &cache.xhat * &mean_dxhat_xhat) * &cache.inv_std
        }
        Mode::Eval => dxhat * &cache.inv_std,
    };
    let dinput = dz.dot(&unit.linear.weight.t());
    let params = want_params.then(|| {
        let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
        let dbeta = dy.sum_axis(Axis(0));
        let dw = cache.input.t().dot(&dz);
        let db = dz.sum_axis(Axis(0));
        [
            into_flat(dw),
            db.to_vec(),
            dgamma.to_vec(),
            dbeta.to_vec(),
        ]
    });
    (dinput, params)
}

/// Row-major values of `a`, moved rather than copied when possible.
fn into_flat(a: Array2<f64>) -> Vec<f64> {
    if a.is_standard_layout() {
        let (v, offset) = a.into_raw_vec_and_offset();
        debug_assert_eq!(offset, Some(0));
        v
    } else {
        a.iter().copied().collect()
    }
}

fn update_running(norm: &mut BatchNorm, stats: Option<(Array1<f64>, Array1<f64>)>, batch: usize) {
    if let Some((mean, var)) = stats {
        let unbiased = batch as f64 / (batch as f64 - 1.0);
        norm.running_mean
            .zip_mut_with(&mean, |r, m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
        norm.running_var.zip_mut_with(&var, |r, v| {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbiased
        });
    }
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_dim;
        let unit = |rng: &mut ChaCha8Rng, fan_in| Unit {
            linear: Linear::init(rng, fan_in, h),
            norm: BatchNorm::new(h),
        };
        let embed = unit(&mut rng, config.input_dim);
        let blocks = (0..config.residual_blocks)
            .map(|_| ResidualBlock {
                first: unit(&mut rng, h),
                second: unit(&mut rng, h),
            })
            .collect();
        let head = Linear::init(&mut rng, h, config.output_dim);
        Ok(Self {
            config,
            embed,
            blocks,
            head,
            mode: Mode::Train,
            rng,
            version: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Monotone counter bumped whenever parameters change.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Restarts the dropout stream from `seed`.
    pub fn reseed_dropout(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn units(&self) -> impl Iterator<Item = &Unit> {
        std::iter::once(&self.embed).chain(self.blocks.iter().flat_map(|b| [&b.first, &b.second]))
    }

    fn units_mut(&mut self) -> impl Iterator<Item = &mut Unit> {
        std::iter::once(&mut self.embed)
            .chain(self.blocks.iter_mut().flat_map(|b| [&mut b.first, &mut b.second]))
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let unit_names = |prefix: &str| {
            ["weight", "bias", "bn_gamma", "bn_beta"].map(|n| format!("{prefix}.{n}"))
        };
        names.extend(unit_names("embed"));
        for i in 0..self.blocks.len() {
            names.extend(unit_names(&format!("block{i}.first")));
            names.extend(unit_names(&format!("block{i}.second")));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Trainable tensors in declaration order.
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for u in self.units() {
            out.push(u.linear.weight.as_slice().expect("standard layout"));
            out.push(u.linear.bias.as_slice().unwrap());
            out.push(u.norm.gamma.as_slice().unwrap());
            out.push(u.norm.beta.as_slice().unwrap());
        }
        out.push(self.head.weight.as_slice().unwrap());
        out.push(self.head.bias.as_slice().unwrap());
        out
    }

    /// Mutable trainable tensors; counts as a parameter change.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        let mut out: Vec<&mut [f64]> = Vec::new();
        let (units, head) = {
            let Network {
                embed,
                blocks,
                head,
                ..
            } = self;
            let units = std::iter::once(embed)
                .chain(blocks.iter_mut().flat_map(|b| [&mut b.first, &mut b.second]));
            (units, head)
        };
        for u in units {
            out.push(u.linear.weight.as_slice_mut().expect("standard layout"));
            out.push(u.linear.bias.as_slice_mut().unwrap());
            out.push(u.norm.gamma.as_slice_mut().unwrap());
            out.push(u.norm.beta.as_slice_mut().unwrap());
        }
        out.push(head.weight.as_slice_mut().unwrap());
        out.push(head.bias.as_slice_mut().unwrap());
        out
    }

    /// Running mean/variance pairs, one per batch-norm layer.
    pub fn running_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.units()
            .map(|u| {
                (
                    u.norm.running_mean.as_slice().unwrap(),
                    u.norm.running_var.as_slice().unwrap(),
                )
            })
            .collect()
    }

    /// Mutable running statistics; counts as a parameter change.
    pub fn running_stats_mut(&mut self) -> Vec<(&mut [f64], &mut [f64])> {
        self.version += 1;
        self.units_mut()
            .map(|u| {
                (
                    u.norm.running_mean.as_slice_mut().unwrap(),
                    u.norm.running_var.as_slice_mut().unwrap(),
                )
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Hash over every parameter and running statistic bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for t in self.trainable() {
            for v in t {
                v.to_bits().hash(&mut hasher);
            }
        }
        for (m, v) in self.running_stats() {
            for x in m.iter().chain(v) {
                x.to_bits().hash(&mut hasher);
            }
        }
        hasher.finish()
    }

    /// Bitwise equality of all parameters and running statistics.
    pub fn same_parameters(&self, other: &Network) -> bool {
        let bits = |n: &Network| -> Vec<u64> {
            n.trainable()
                .into_iter()
                .flatten()
                .chain(n.running_stats().into_iter().flat_map(|(m, v)| m.iter().chain(v)))
                .map(|x| x.to_bits())
                .collect()
        };
        self.config.same_shape(&other.config) && bits(self) == bits(other)
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Schema(format!(
                "network expects {} inputs, batch has {}",
                self.config.input_dim,
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite network input".into()));
        }
        Ok(())
    }

    /// Forward pass following the network's mode. In train mode batch
    /// statistics are used, running statistics are updated and dropout is
    /// sampled from the network's seeded stream.
    pub fn forward(&mut self, x: ArrayView2<f64>) -> Result<Forward> {
        if self.mode == Mode::Eval {
            return self.forward_eval(x);
        }
        self.check_input(&x)?;
        let batch = x.nrows();
        if batch < 2 {
            return Err(Error::BatchTooSmall(batch));
        }
        let p = self.config.dropout_rate;
        let version = self.version;
        let Network {
            embed,
            blocks,
            head,
            rng,
            ..
        } = self;

        let (mut h, embed_cache, stats) = unit_forward(embed, x.to_owned(), Some((rng, p)));
        update_running(&mut embed.norm, stats, batch);

        let mut block_caches = Vec::with_capacity(blocks.len());
        for block in blocks.iter_mut() {
            let (a, c1, s1) = unit_forward(&block.first, h.clone(), Some((rng, p)));
            update_running(&mut block.first.norm, s1, batch);
            let (b, c2, s2) = unit_forward(&block.second, a, Some((rng, p)));
            update_running(&mut block.second.norm, s2, batch);
            h += &b;
            block_caches.push((c1, c2));
        }
        let output = head.apply(&h);
        Ok(Forward {
            output,
            cache: ForwardCache {
                mode: Mode::Train,
                version,
                embed: embed_cache,
                blocks: block_caches,
                head_input: h,
            },
        })
    }

    /// Eval-mode forward pass: running statistics, no dropout, no mutation.
    pub fn forward_eval(&self, x: ArrayView2<f64>) -> Result<Forward> {
        self.check_input(&x)?;
        let (mut h, embed_cache, _) = unit_forward(&self.embed, x.to_owned(), None);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (a, c1, _) = unit_forward(&block.first, h.clone(), None);
            let (b, c2, _) = unit_forward(&block.second, a, None);
            h += &b;
            block_caches.push((c1, c2));
        }
        let output = self.head.apply(&h);
        Ok(Forward {
            output,
            cache: ForwardCache {
                mode: Mode::Eval,
                version: self.version,
                embed: embed_cache,
                blocks: block_caches,
                head_input: h,
            },
        })
    }

    /// Eval-mode output only.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_eval(x)?.output)
    }

    fn check_cache(&self, cache: &ForwardCache, grad_out: &ArrayView2<f64>) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::Sequencing(format!(
                "activation cache from parameter version {} but network is at {}",
                cache.version, self.version
            )));
        }
        if grad_out.dim() != (cache.batch_size(), self.config.output_dim) {
            return Err(Error::Schema(format!(
                "loss gradient shape {:?} does not match output ({}, {})",
                grad_out.dim(),
                cache.batch_size(),
                self.config.output_dim
            )));
        }
        Ok(())
    }

    /// Gradients of `sum(grad_out * output)` with respect to every trainable
    /// parameter and to the network input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Result<Backward> {
        self.check_cache(cache, &grad_out)?;
        let mode = cache.mode;
        let head_dw = cache.head_input.t().dot(&grad_out);
        let head_db = grad_out.sum_axis(Axis(0));
        let mut dh = grad_out.dot(&self.head.weight.t());

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, (c1, c2)) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (da, g2) = unit_backward(&block.second, c2, &dh, mode, true);
            let (dx, g1) = unit_backward(&block.first, c1, &da, mode, true);
            dh += &dx;
            block_grads.push((g1.unwrap(), g2.unwrap()));
        }
        let (dinput, ge) = unit_backward(&self.embed, &cache.embed, &dh, mode, true);

        let mut tensors = Vec::with_capacity(4 + 8 * self.blocks.len() + 2);
        tensors.extend(ge.unwrap());
        for (g1, g2) in block_grads.into_iter().rev() {
            tensors.extend(g1);
            tensors.extend(g2);
        }
        tensors.push(into_flat(head_dw));
        tensors.push(head_db.to_vec());
        Ok(Backward {
            params: Gradients { tensors },
            input: dinput,
        })
    }

    /// Input gradient only; skips the parameter outer products.
    pub fn backward_input(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        self.check_cache(cache, &grad_out)?;
        let mode = cache.mode;
        let mut dh = grad_out.dot(&self.head.weight.t());
        for (block, (c1, c2)) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (da, _) = unit_backward(&block.second, c2, &dh, mode, false);
            let (dx, _) = unit_backward(&block.first, c1, &da, mode, false);
            dh += &dx;
        }
        Ok(unit_backward(&self.embed, &cache.embed, &dh, mode, false).0)
    }

    /// Sets the output layer to zero, making the network output identically zero.
    pub fn zero_output_layer(&mut self) {
        self.head.weight.fill(0.0);
        self.head.bias.fill(0.0);
        self.version += 1;
    }

    /// Sets the output bias; combined with [`Network::zero_output_layer`]
    /// this yields a constant network.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.config.output_dim {
            return Err(Error::Schema("output bias length mismatch".into()));
        }
        self.head.bias.assign(&Array1::from(bias.to_vec()));
        self.version += 1;
        Ok(())
    }

    pub(crate) fn from_parts(config: NetworkConfig, tensors: Vec<Vec<f64>>) -> Result<Self> {
        let mut net = Network::new(config)?;
        let expected: Vec<usize> = net.checkpoint_tensors().iter().map(|t| t.len()).collect();
        if tensors.len() != expected.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (i, (t, &n)) in tensors.iter().zip(&expected).enumerate() {
            if t.len() != n {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {i} has {} values, expected {n}",
                    t.len()
                )));
            }
        }
        let mut it = tensors.into_iter();
        {
            let mut fill = |dst: &mut [f64]| dst.copy_from_slice(&it.next().unwrap());
            let Network {
                embed,
                blocks,
                head,
                ..
            } = &mut net;
            let units = std::iter::once(embed)
                .chain(blocks.iter_mut().flat_map(|b| [&mut b.first, &mut b.second]));
            for u in units {
                fill(u.linear.weight.as_slice_mut().unwrap());
                fill(u.linear.bias.as_slice_mut().unwrap());
                fill(u.norm.gamma.as_slice_mut().unwrap());
                fill(u.norm.beta.as_slice_mut().unwrap());
                fill(u.norm.running_mean.as_slice_mut().unwrap());
                fill(u.norm.running_var.as_slice_mut().unwrap());
            }
            fill(head.weight.as_slice_mut().unwrap());
            fill(head.bias.as_slice_mut().unwrap());
        }
        if net
            .running_stats()
            .iter()
            .any(|(_, var)| var.iter().any(|v| !(*v > 0.0)))
        {
            return Err(Error::CorruptCheckpoint("non-positive running variance".into()));
        }
        Ok(net)
    }

    /// Every stored tensor, running statistics included, in declaration order.
    pub(crate) fn checkpoint_tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for u in self.units() {
            out.push(u.linear.weight.as_slice().unwrap());
            out.push(u.linear.bias.as_slice().unwrap());
            out.push(u.norm.gamma.as_slice().unwrap());
            out.push(u.norm.beta.as_slice().unwrap());
            out.push(u.norm.running_mean.as_slice().unwrap());
            out.push(u.norm.running_var.as_slice().unwrap());
        }
        out.push(self.head.weight.as_slice().unwrap());
        out.push(self.head.bias.as_slice().unwrap());
        out
    }
}
