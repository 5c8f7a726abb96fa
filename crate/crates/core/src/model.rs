//! Multi-task attention network predicting the mean (μ) and the deviation (σ)
//! of opinion scores from a precomputed feature map.
//!
//! The full feature map is split channel-wise into `n_blocks` chunks. Each
//! chunk passes through an LMLSP block made of three shared streams
//! (1×1 conv, 3×3 conv, 3×3 average pool followed by 1×1 conv). Every stream
//! output `p` is gated element-wise by one learned attention mask per task,
//! giving the task features `a_mu = A_mu ⊙ p` and `a_sigma = A_sigma ⊙ p`.
//! Streams are concatenated and globally average pooled into per-block
//! features `f_mu`, `f_sigma` and the shared `f_s`.
//!
//! For each task the head input is the concatenation over blocks of
//! `[f_task, f_s]`. It runs through three fully-connected layers whose weights
//! are shared between tasks, each followed by a per-task sigmoid mask, and
//! ends in a scalar output per task. σ̂ passes through softplus.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{self, Tensor, TensorError};

/// Stream order used for every concatenation: 1×1 conv, 3×3 conv, pool + 1×1 conv.
pub const STREAMS: usize = 3;
/// Initial μ head bias: the midpoint of the 1..10 score scale.
pub const MU_BIAS_INIT: f64 = 5.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected {expected} block inputs, got {got}")]
    BlockCount { expected: usize, got: usize },
    #[error("block {block}: expected input shape {expected:?}, got {got:?}")]
    BlockShape {
        block: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{channels} channels cannot be split into {blocks} equal blocks")]
    IndivisibleChannels { channels: usize, blocks: usize },
    #[error("unknown parameter '{0}'")]
    UnknownParameter(String),
    #[error("parameter '{name}': expected shape {expected:?}, got {got:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub in_channels_per_block: usize,
    /// Height and width of the (square) feature map.
    pub spatial: usize,
    pub stream_out_channels: usize,
    pub attn_hidden_channels: usize,
    pub fc_sizes: [usize; 3],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_blocks: 4,
            in_channels_per_block: 16,
            spatial: 5,
            stream_out_channels: 8,
            attn_hidden_channels: 4,
            fc_sizes: [32, 16, 8],
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Full-size topology: 16 blocks of 5×5×1058 (a 5×5×16928 backbone map).
    pub fn full_scale() -> Self {
        ModelConfig {
            n_blocks: 16,
            in_channels_per_block: 1058,
            spatial: 5,
            stream_out_channels: 64,
            attn_hidden_channels: 16,
            fc_sizes: [2048, 1024, 256],
            seed: 0,
        }
    }

    /// Small configuration used by gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            n_blocks: 2,
            in_channels_per_block: 8,
            spatial: 5,
            stream_out_channels: 4,
            attn_hidden_channels: 3,
            fc_sizes: [16, 16, 8],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("n_blocks", self.n_blocks),
            ("in_channels_per_block", self.in_channels_per_block),
            ("spatial", self.spatial),
            ("stream_out_channels", self.stream_out_channels),
            ("attn_hidden_channels", self.attn_hidden_channels),
            ("fc_sizes[0]", self.fc_sizes[0]),
            ("fc_sizes[1]", self.fc_sizes[1]),
            ("fc_sizes[2]", self.fc_sizes[2]),
        ];
        for (name, v) in widths {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn total_channels(&self) -> usize {
        self.n_blocks * self.in_channels_per_block
    }

    pub fn block_shape(&self) -> [usize; 3] {
        [self.in_channels_per_block, self.spatial, self.spatial]
    }

    /// Width of one task's head input: per block, `f_task` and `f_s`.
    pub fn head_input_width(&self) -> usize {
        self.n_blocks * 2 * STREAMS * self.stream_out_channels
    }

    /// Closed-form parameter count (see the README for the derivation).
    pub fn parameter_count(&self) -> usize {
        let (c, s, h) = (
            self.in_channels_per_block,
            self.stream_out_channels,
            self.attn_hidden_channels,
        );
        let streams = 11 * s * c + 3 * s;
        let masks = 2 * STREAMS * (2 * h * s + h + s);
        let [f1, f2, f3] = self.fc_sizes;
        let d0 = self.head_input_width();
        let fc = d0 * f1 + f1 + f1 * f2 + f2 + f2 * f3 + f3;
        let fc_masks = 2 * (f1 * f1 + f1 + f2 * f2 + f2 + f3 * f3 + f3);
        let heads = 2 * (f3 + 1);
        self.n_blocks * (streams + masks) + fc + fc_masks + heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Mu,
    Sigma,
}

impl Task {
    pub const BOTH: [Task; 2] = [Task::Mu, Task::Sigma];

    pub fn tag(self) -> &'static str {
        match self {
            Task::Mu => "mu",
            Task::Sigma => "sigma",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One named parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Every learned weight of the network, in a fixed, config-determined order.
///
/// Plain data: `Send + Sync`, independent of any differentiation graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// Names and shapes of all parameters, with the fan-in used for init.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Option<usize>)> {
    let (c, s, h) = (
        cfg.in_channels_per_block,
        cfg.stream_out_channels,
        cfg.attn_hidden_channels,
    );
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, fan_in: Option<usize>| {
        out.push((name, shape, fan_in));
    };
    for b in 0..cfg.n_blocks {
        for (j, k) in [1, 3, 1].into_iter().enumerate() {
            let p = format!("block{b}.stream{j}");
            push(format!("{p}.weight"), vec![s, c, k, k], Some(c * k * k));
            push(format!("{p}.bias"), vec![s], None);
            for task in Task::BOTH {
                let a = format!("{p}.att_{task}");
                push(format!("{a}.conv0.weight"), vec![h, s, 1, 1], Some(s));
                push(format!("{a}.conv0.bias"), vec![h], None);
                push(format!("{a}.conv1.weight"), vec![s, h, 1, 1], Some(h));
                push(format!("{a}.conv1.bias"), vec![s], None);
            }
        }
    }
    let mut width = cfg.head_input_width();
    for (l, &f) in cfg.fc_sizes.iter().enumerate() {
        push(format!("fc{l}.weight"), vec![width, f], Some(width));
        push(format!("fc{l}.bias"), vec![1, f], None);
        for task in Task::BOTH {
            push(format!("fc{l}.mask_{task}.weight"), vec![f, f], Some(f));
            push(format!("fc{l}.mask_{task}.bias"), vec![1, f], None);
        }
        width = f;
    }
    for task in Task::BOTH {
        push(format!("head_{task}.weight"), vec![width, 1], Some(width));
        push(format!("head_{task}.bias"), vec![1, 1], None);
    }
    out
}

impl Parameters {
    /// Weights ~ U(−b, b) with `b = √(6 / fan_in)`; biases zero except the
    /// μ head bias, which starts at [`MU_BIAS_INIT`].
    pub fn init(cfg: &ModelConfig) -> Result<Parameters> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let entries = layout(cfg)
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let n = shape.iter().product();
                let data = match fan_in {
                    Some(fan_in) => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                    None if name == "head_mu.bias" => vec![MU_BIAS_INIT; n],
                    None => vec![0.0; n],
                };
                ParamEntry { name, shape, data }
            })
            .collect();
        Ok(Self::from_entries(entries))
    }

    fn from_entries(entries: Vec<ParamEntry>) -> Parameters {
        let index = entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        Parameters { entries, index }
    }

    /// Rebuilds parameters from named buffers, requiring exactly the
    /// names and shapes `cfg` implies.
    pub fn from_named(cfg: &ModelConfig, named: &HashMap<String, (Vec<usize>, Vec<f64>)>) -> Result<Parameters> {
        cfg.validate()?;
        let entries = layout(cfg)
            .into_iter()
            .map(|(name, shape, _)| {
                let (got_shape, data) = named
                    .get(&name)
                    .ok_or_else(|| ModelError::UnknownParameter(name.clone()))?;
                if *got_shape != shape {
                    return Err(ModelError::ParameterShape {
                        name,
                        expected: shape,
                        got: got_shape.clone(),
                    });
                }
                Ok(ParamEntry {
                    name,
                    shape,
                    data: data.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_entries(entries))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    /// Overwrites every element of a parameter with `value`.
    pub fn fill(&mut self, name: &str, value: f64) -> Result<()> {
        let e = self
            .get_mut(name)
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))?;
        e.data.iter_mut().for_each(|v| *v = value);
        Ok(())
    }

    /// Graph leaves for one forward pass. With `trainable`, backward
    /// accumulates gradients into the returned leaves.
    pub fn bind(&self, trainable: bool) -> BoundParams {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                let t = if trainable {
                    Tensor::param(&e.shape, e.data.clone())
                } else {
                    Tensor::new(&e.shape, e.data.clone())
                };
                t.expect("parameter shapes are validated at construction")
            })
            .collect();
        BoundParams {
            tensors,
            index: self.index.clone(),
        }
    }
}

/// Parameters materialized as graph leaves.
#[derive(Debug, Clone)]
pub struct BoundParams {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Wraps externally built leaves, ordered like [`Parameters::entries`].
    pub fn from_tensors(params: &Parameters, tensors: Vec<Tensor>) -> BoundParams {
        assert_eq!(tensors.len(), params.len());
        BoundParams {
            tensors,
            index: params.index.clone(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    fn get(&self, name: &str) -> &Tensor {
        match self.index.get(name) {
            Some(&i) => &self.tensors[i],
            None => panic!("model layout has no parameter '{name}'"),
        }
    }

    /// Accumulated gradients, ordered like [`Parameters::entries`].
    pub fn gradients(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(Tensor::grad_vec).collect()
    }
}

/// Graph outputs for one item.
#[derive(Debug, Clone)]
pub struct PredictionTensors {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl PredictionTensors {
    pub fn value(&self) -> Prediction {
        Prediction {
            mu_hat: self.mu.item(),
            sigma_hat: self.sigma.item(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mu_hat: f64,
    /// Always ≥ 0.
    pub sigma_hat: f64,
}

/// Per-stream outputs of one LMLSP block.
#[derive(Debug, Clone)]
pub struct StreamOutputs {
    /// Shared stream features `p^{ij}`, `j` in stream order.
    pub shared: Vec<Tensor>,
    pub mask_mu: Vec<Tensor>,
    pub mask_sigma: Vec<Tensor>,
    pub task_mu: Vec<Tensor>,
    pub task_sigma: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct BlockFeatures {
    pub f_mu: Tensor,
    pub f_sigma: Tensor,
    pub f_shared: Tensor,
}

#[derive(Debug, Clone)]
pub struct BlockActivations {
    pub streams: StreamOutputs,
    pub features: BlockFeatures,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationBundle {
    pub blocks: Vec<BlockActivations>,
    /// Per FC layer, the task masks `[mu, sigma]`.
    pub head_masks: Vec<[Tensor; 2]>,
}

/// Contiguous, order-preserving channel chunks of a `C×H×W` map.
pub fn split_features(full: &Tensor, n_blocks: usize) -> Result<Vec<Tensor>> {
    let (c, h, w) = match *full.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(TensorError::Rank {
                op: "split_features",
                expected: 3,
                shape: full.shape().to_vec(),
            }
            .into())
        }
    };
    if n_blocks == 0 || c % n_blocks != 0 {
        return Err(ModelError::IndivisibleChannels {
            channels: c,
            blocks: n_blocks,
        });
    }
    if n_blocks == 1 {
        return Ok(vec![full.clone()]);
    }
    let per = c / n_blocks;
    let chunk = per * h * w;
    full.data()
        .chunks_exact(chunk)
        .map(|d| Tensor::new(&[per, h, w], d.to_vec()).map_err(ModelError::from))
        .collect()
}

fn attention_mask(p: &BoundParams, prefix: &str, task: Task, shared: &Tensor) -> Result<Tensor> {
    let a = format!("{prefix}.att_{task}");
    let hidden = tensor::conv2d(
        shared,
        p.get(&format!("{a}.conv0.weight")),
        p.get(&format!("{a}.conv0.bias")),
    )?
    .relu();
    let logits = tensor::conv2d(
        &hidden,
        p.get(&format!("{a}.conv1.weight")),
        p.get(&format!("{a}.conv1.bias")),
    )?;
    Ok(logits.sigmoid())
}

/// Runs the three streams of block `block_index` and applies the task masks.
pub fn lmlsp_forward(params: &BoundParams, cfg: &ModelConfig, block_index: usize, x: &Tensor) -> Result<StreamOutputs> {
    let expected = cfg.block_shape();
    if x.shape() != expected {
        return Err(ModelError::BlockShape {
            block: block_index,
            expected: expected.to_vec(),
            got: x.shape().to_vec(),
        });
    }
    let pooled = tensor::avg_pool2d_3x3(x)?;
    let mut out = StreamOutputs {
        shared: Vec::with_capacity(STREAMS),
        mask_mu: Vec::with_capacity(STREAMS),
        mask_sigma: Vec::with_capacity(STREAMS),
        task_mu: Vec::with_capacity(STREAMS),
        task_sigma: Vec::with_capacity(STREAMS),
    };
    for j in 0..STREAMS {
        let prefix = format!("block{block_index}.stream{j}");
        let input = if j == 2 { &pooled } else { x };
        let shared = tensor::conv2d(
            input,
            params.get(&format!("{prefix}.weight")),
            params.get(&format!("{prefix}.bias")),
        )?
        .relu();
        let mask_mu = attention_mask(params, &prefix, Task::Mu, &shared)?;
        let mask_sigma = attention_mask(params, &prefix, Task::Sigma, &shared)?;
        out.task_mu.push(mask_mu.mul(&shared)?);
        out.task_sigma.push(mask_sigma.mul(&shared)?);
        out.mask_mu.push(mask_mu);
        out.mask_sigma.push(mask_sigma);
        out.shared.push(shared);
    }
    Ok(out)
}

/// GAP over the channel-concatenated streams, per task and for the shared path.
pub fn block_features(streams: &StreamOutputs) -> Result<BlockFeatures> {
    let pool = |xs: &[Tensor]| -> Result<Tensor> { Ok(tensor::global_avg_pool(&tensor::concat_channels(xs)?)?) };
    Ok(BlockFeatures {
        f_mu: pool(&streams.task_mu)?,
        f_sigma: pool(&streams.task_sigma)?,
        f_shared: pool(&streams.shared)?,
    })
}

fn head(params: &BoundParams, input: &Tensor, task: Task, masks: &mut Vec<Tensor>) -> Result<Tensor> {
    let mut h = input.reshape(&[1, input.len()])?;
    for l in 0..3 {
        let z = h
            .matmul(params.get(&format!("fc{l}.weight")))?
            .add(params.get(&format!("fc{l}.bias")))?
            .relu();
        let mask = z
            .matmul(params.get(&format!("fc{l}.mask_{task}.weight")))?
            .add(params.get(&format!("fc{l}.mask_{task}.bias")))?
            .sigmoid();
        h = mask.mul(&z)?;
        masks.push(mask);
    }
    let out = h
        .matmul(params.get(&format!("head_{task}.weight")))?
        .add(params.get(&format!("head_{task}.bias")))?
        .reshape(&[])?;
    Ok(match task {
        Task::Mu => out,
        Task::Sigma => out.softplus(),
    })
}

/// Full forward pass for one item given its `n_blocks` feature chunks.
pub fn forward(
    params: &BoundParams,
    cfg: &ModelConfig,
    blocks_input: &[Tensor],
) -> Result<(PredictionTensors, ActivationBundle)> {
    if blocks_input.len() != cfg.n_blocks {
        return Err(ModelError::BlockCount {
            expected: cfg.n_blocks,
            got: blocks_input.len(),
        });
    }
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    let mut mu_in = Vec::with_capacity(2 * cfg.n_blocks);
    let mut sigma_in = Vec::with_capacity(2 * cfg.n_blocks);
    for (i, x) in blocks_input.iter().enumerate() {
        let streams = lmlsp_forward(params, cfg, i, x)?;
        let features = block_features(&streams)?;
        mu_in.push(features.f_mu.clone());
        mu_in.push(features.f_shared.clone());
        sigma_in.push(features.f_sigma.clone());
        sigma_in.push(features.f_shared.clone());
        blocks.push(BlockActivations { streams, features });
    }
    let mut mu_masks = Vec::new();
    let mut sigma_masks = Vec::new();
    let mu = head(params, &tensor::concat_channels(&mu_in)?, Task::Mu, &mut mu_masks)?;
    let sigma = head(
        params,
        &tensor::concat_channels(&sigma_in)?,
        Task::Sigma,
        &mut sigma_masks,
    )?;
    let head_masks = mu_masks.into_iter().zip(sigma_masks).map(|(m, s)| [m, s]).collect();
    Ok((PredictionTensors { mu, sigma }, ActivationBundle { blocks, head_masks }))
}

/// Configuration plus weights; convenience wrapper for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        let params = Parameters::init(&config)?;
        Ok(Model { config, params })
    }

    /// Splits a full `C_total×H×W` feature map into block inputs.
    pub fn block_inputs(&self, features: &Tensor) -> Result<Vec<Tensor>> {
        let expected = [self.config.total_channels(), self.config.spatial, self.config.spatial];
        if features.shape() != expected {
            return Err(ModelError::BlockShape {
                block: 0,
                expected: expected.to_vec(),
                got: features.shape().to_vec(),
            });
        }
        split_features(features, self.config.n_blocks)
    }

    pub fn predict(&self, features: &Tensor) -> Result<Prediction> {
        let bound = self.params.bind(false);
        let blocks = self.block_inputs(features)?;
        Ok(forward(&bound, &self.config, &blocks)?.0.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_blocks(cfg: &ModelConfig, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.n_blocks)
            .map(|_| {
                let n = cfg.in_channels_per_block * cfg.spatial * cfg.spatial;
                let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                Tensor::new(&cfg.block_shape(), data).unwrap()
            })
            .collect()
    }

    fn attention_bias_names(cfg: &ModelConfig) -> Vec<String> {
        let mut names = Vec::new();
        for b in 0..cfg.n_blocks {
            for j in 0..STREAMS {
                for task in Task::BOTH {
                    names.push(format!("block{b}.stream{j}.att_{task}.conv1"));
                }
            }
        }
        names
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::toy();
        assert_eq!(Parameters::init(&cfg).unwrap(), Parameters::init(&cfg).unwrap());
        let other = ModelConfig { seed: 1, ..cfg.clone() };
        assert_ne!(Parameters::init(&cfg).unwrap(), Parameters::init(&other).unwrap());
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        // blocks: 2·(11·4·4 + 3·4 + 6·(2·4·4 + 4 + 4)) = 2·428 = 856
        // fc: 48·8+8 + 8·8+8 + 8·8+8 = 536; masks: 2·3·72 = 432; heads: 2·9 = 18
        let cfg = ModelConfig {
            n_blocks: 2,
            in_channels_per_block: 4,
            spatial: 5,
            stream_out_channels: 4,
            attn_hidden_channels: 4,
            fc_sizes: [8, 8, 8],
            seed: 3,
        };
        assert_eq!(cfg.parameter_count(), 1842);
        assert_eq!(Parameters::init(&cfg).unwrap().count(), 1842);
        for c in [ModelConfig::default(), ModelConfig::toy()] {
            assert_eq!(Parameters::init(&c).unwrap().count(), c.parameter_count());
        }
    }

    #[test]
    fn bias_init() {
        let p = Parameters::init(&ModelConfig::toy()).unwrap();
        for e in p.entries().iter().filter(|e| e.name.ends_with(".bias")) {
            let expected = if e.name == "head_mu.bias" { MU_BIAS_INIT } else { 0.0 };
            assert!(e.data.iter().all(|&v| v == expected), "{}", e.name);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig {
            stream_out_channels: 0,
            ..ModelConfig::toy()
        };
        assert!(matches!(Parameters::init(&cfg), Err(ModelError::Config(_))));
    }

    #[test]
    fn split_features_cases() {
        let x = Tensor::new(&[4, 1, 2], (0..8).map(f64::from).collect()).unwrap();
        let one = split_features(&x, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].data(), x.data());
        let parts = split_features(&x, 2).unwrap();
        assert_eq!(parts[0].data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(parts[1].shape(), &[2, 1, 2]);
        let back = tensor::concat_channels(&parts).unwrap();
        assert_eq!(back.data(), x.data());
        assert_eq!(
            split_features(&x, 3).unwrap_err(),
            ModelError::IndivisibleChannels { channels: 4, blocks: 3 }
        );
    }

    #[test]
    fn split_full_scale_backbone() {
        let x = Tensor::zeros(&[16928, 5, 5]).unwrap();
        let parts = split_features(&x, 16).unwrap();
        assert_eq!(parts.len(), 16);
        assert!(parts.iter().all(|p| p.shape() == [1058, 5, 5]));
    }

    #[test]
    fn saturated_masks_pass_or_block_features() {
        let cfg = ModelConfig::toy();
        let x = &random_blocks(&cfg, 4)[0];
        for (bias, check) in [(30.0, true), (-30.0, false)] {
            let mut p = Parameters::init(&cfg).unwrap();
            for name in attention_bias_names(&cfg) {
                p.fill(&format!("{name}.weight"), 0.0).unwrap();
                p.fill(&format!("{name}.bias"), bias).unwrap();
            }
            let out = lmlsp_forward(&p.bind(false), &cfg, 0, x).unwrap();
            for j in 0..STREAMS {
                for (a, s) in out.task_mu[j].data().iter().zip(out.shared[j].data()) {
                    if check {
                        assert!((a - s).abs() < 1e-12);
                    } else {
                        assert!(a.abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn masks_in_open_unit_interval_and_task_features_are_products() {
        let cfg = ModelConfig::toy();
        let p = Parameters::init(&cfg).unwrap().bind(false);
        let (_, bundle) = forward(&p, &cfg, &random_blocks(&cfg, 9)).unwrap();
        for b in &bundle.blocks {
            let s = &b.streams;
            for j in 0..STREAMS {
                for m in [&s.mask_mu[j], &s.mask_sigma[j]] {
                    assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
                }
                let expect: Vec<f64> = s.mask_mu[j]
                    .data()
                    .iter()
                    .zip(s.shared[j].data())
                    .map(|(a, b)| a * b)
                    .collect();
                assert_eq!(s.task_mu[j].data(), expect.as_slice());
            }
            assert_eq!(b.features.f_mu.len(), 3 * cfg.stream_out_channels);
            assert_eq!(b.features.f_shared.len(), 3 * cfg.stream_out_channels);
        }
        for masks in &bundle.head_masks {
            for m in masks {
                assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn block_features_of_constant_streams() {
        let c = |v: f64| Tensor::full(&[2, 3, 3], v).unwrap();
        let streams = StreamOutputs {
            shared: vec![c(1.0), c(2.0), c(3.0)],
            mask_mu: vec![],
            mask_sigma: vec![],
            task_mu: vec![c(0.5), c(0.5), c(0.25)],
            task_sigma: vec![c(4.0), c(5.0), c(6.0)],
        };
        let f = block_features(&streams).unwrap();
        assert_eq!(f.f_shared.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(f.f_mu.data(), &[0.5, 0.5, 0.5, 0.5, 0.25, 0.25]);
        assert_eq!(f.f_sigma.data(), &[4.0, 4.0, 5.0, 5.0, 6.0, 6.0]);
    }

    #[test]
    fn zeroed_sigma_head_gives_softplus_of_bias() {
        let cfg = ModelConfig::toy();
        let mut p = Parameters::init(&cfg).unwrap();
        p.fill("head_sigma.weight", 0.0).unwrap();
        let (pred, _) = forward(&p.bind(false), &cfg, &random_blocks(&cfg, 1)).unwrap();
        assert!((pred.sigma.item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::toy();
        let p = Parameters::init(&cfg).unwrap();
        let x = random_blocks(&cfg, 2);
        let a = forward(&p.bind(false), &cfg, &x).unwrap().0.value();
        let b = forward(&p.bind(false), &cfg, &x).unwrap().0.value();
        assert_eq!(a.mu_hat.to_bits(), b.mu_hat.to_bits());
        assert_eq!(a.sigma_hat.to_bits(), b.sigma_hat.to_bits());
        assert!(a.sigma_hat >= 0.0);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = ModelConfig::toy();
        let p = Parameters::init(&cfg).unwrap().bind(false);
        let x = random_blocks(&cfg, 2);
        assert_eq!(
            forward(&p, &cfg, &x[..1]).unwrap_err(),
            ModelError::BlockCount { expected: 2, got: 1 }
        );
        let wrong = vec![x[0].clone(), Tensor::zeros(&[3, 5, 5]).unwrap()];
        assert!(matches!(
            forward(&p, &cfg, &wrong),
            Err(ModelError::BlockShape { block: 1, .. })
        ));
    }

    #[test]
    fn permuting_blocks_changes_output() {
        let cfg = ModelConfig::toy();
        let p = Parameters::init(&cfg).unwrap().bind(false);
        let x = random_blocks(&cfg, 5);
        let swapped = vec![x[1].clone(), x[0].clone()];
        let a = forward(&p, &cfg, &x).unwrap().0.value();
        let b = forward(&p, &cfg, &swapped).unwrap().0.value();
        assert_ne!(a.mu_hat, b.mu_hat);
    }

    #[test]
    fn closing_mu_masks_leaves_shared_features_untouched() {
        let cfg = ModelConfig::toy();
        let x = random_blocks(&cfg, 6);
        let base = Parameters::init(&cfg).unwrap();
        let mut closed = base.clone();
        for b in 0..cfg.n_blocks {
            for j in 0..STREAMS {
                closed
                    .fill(&format!("block{b}.stream{j}.att_mu.conv1.bias"), -30.0)
                    .unwrap();
            }
        }
        let (pa, ba) = forward(&base.bind(false), &cfg, &x).unwrap();
        let (pb, bb) = forward(&closed.bind(false), &cfg, &x).unwrap();
        for (a, b) in ba.blocks.iter().zip(&bb.blocks) {
            assert_eq!(a.features.f_shared.data(), b.features.f_shared.data());
            assert_eq!(a.features.f_sigma.data(), b.features.f_sigma.data());
            assert!(b.features.f_mu.data().iter().all(|v| v.abs() < 1e-10));
        }
        assert_eq!(pa.sigma.item(), pb.sigma.item());
        assert_ne!(pa.mu.item(), pb.mu.item());

        // μ̂ approaches the value produced by all-zero task features
        let mut zeroed = base.clone();
        for b in 0..cfg.n_blocks {
            for j in 0..STREAMS {
                zeroed
                    .fill(&format!("block{b}.stream{j}.att_mu.conv1.bias"), -1e3)
                    .unwrap();
            }
        }
        let pz = forward(&zeroed.bind(false), &cfg, &x).unwrap().0;
        assert!((pz.mu.item() - pb.mu.item()).abs() < 1e-9);
    }

    #[test]
    fn model_predict_checks_full_shape() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let bad = Tensor::zeros(&[15, 5, 5]).unwrap();
        assert!(model.predict(&bad).is_err());
        let ok = Tensor::zeros(&[16, 5, 5]).unwrap();
        assert!(model.predict(&ok).unwrap().sigma_hat >= 0.0);
    }
}
