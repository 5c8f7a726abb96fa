//! ADAM optimization with step-decay learning rate, per-batch pair
//! construction, evaluation metrics and checkpointing.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{self, ConfigError};
use crate::data::{self, DataError, Item, NamedTensor};
use crate::losses::{Batch, LossConfig, LossError, LossTerms, PairSet};
use crate::model::{self, ModelConfig, ModelError, Parameters, Prediction};
use crate::stats::{self, CIConfig, ScoreLabel, StatsError, DEFAULT_CUTOFF};
use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid training config: {0}")]
    Invalid(String),
    #[error("gradient/state for '{name}' has {got} values, parameter has {expected}")]
    GradientShape { name: String, expected: usize, got: usize },
    #[error("expected {expected} gradient buffers, got {got}")]
    GradientCount { expected: usize, got: usize },
    #[error("checkpoint model config does not match: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint is missing '{0}'")]
    MissingEntry(String),
    #[error("cannot evaluate an empty split")]
    EmptySplit,
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Two-class accuracy threshold.
    pub cutoff: f64,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            lr_decay_every: 20,
            lr_decay_factor: 10.0,
            batch_size: 16,
            epochs: 60,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            cutoff: DEFAULT_CUTOFF,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Invalid(m.to_string()));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("train.initial_lr must be positive");
        }
        if self.lr_decay_every == 0 {
            return bad("train.lr_decay_every must be at least 1");
        }
        if !(self.lr_decay_factor >= 1.0) {
            return bad("train.lr_decay_factor must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("train.batch_size must be at least 2");
        }
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("train.eps must be positive");
        }
        self.loss.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

/// `initial_lr / decay_factor^floor(epoch / decay_every)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = (epoch / cfg.lr_decay_every) as i32;
    cfg.initial_lr / cfg.lr_decay_factor.powi(drops)
}

/// ADAM moment buffers plus progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl OptimizerState {
    pub fn new(params: &Parameters) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            epoch: 0,
        }
    }
}

/// Hyper-parameters of one ADAM update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected ADAM update; zeroes `grads` afterwards.
pub fn adam_step(
    params: &mut Parameters,
    grads: &mut [Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::GradientCount {
            expected: params.len(),
            got: grads.len().min(state.m.len()).min(state.v.len()),
        });
    }
    for ((entry, g), (m, v)) in params
        .entries()
        .iter()
        .zip(grads.iter())
        .zip(state.m.iter().zip(&state.v))
    {
        let n = entry.data.len();
        if g.len() != n || m.len() != n || v.len() != n {
            return Err(TrainError::GradientShape {
                name: entry.name.clone(),
                expected: n,
                got: g.len().min(m.len()).min(v.len()),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (i, entry) in params.entries_mut().iter_mut().enumerate() {
        let (g, m, v) = (&mut grads[i], &mut state.m[i], &mut state.v[i]);
        for k in 0..entry.data.len() {
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * g[k];
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            entry.data[k] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
            g[k] = 0.0;
        }
    }
    Ok(())
}

/// An item with its features already split into block inputs.
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub id: String,
    pub blocks: Vec<Tensor>,
    pub label: ScoreLabel,
}

pub fn prepare(items: &[&Item], cfg: &ModelConfig) -> Result<Vec<PreparedItem>> {
    items
        .iter()
        .map(|item| {
            let full = Tensor::new(&item.features.shape, item.features.data.clone())?;
            let expected = [cfg.total_channels(), cfg.spatial, cfg.spatial];
            if full.shape() != expected {
                return Err(TrainError::ConfigMismatch(format!(
                    "item '{}' has features {:?}, model expects {:?}",
                    item.id,
                    full.shape(),
                    expected
                )));
            }
            Ok(PreparedItem {
                id: item.id.clone(),
                blocks: model::split_features(&full, cfg.n_blocks)?,
                label: item.label.clone(),
            })
        })
        .collect()
}

/// Item order for `epoch`: a fixed permutation drawn from `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mean per-batch losses of one epoch (raw, unweighted components).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub mae_mu: f64,
    pub ci: f64,
    /// `λ·ci`, the CI share of the μ loss.
    pub ci_part: f64,
    pub sigma: f64,
    pub steps: usize,
    pub pairs: usize,
    pub gated_pairs: usize,
}

impl EpochMetrics {
    pub fn to_record(&self) -> String {
        format!(
            "epoch={} lr={:e} total={} mae_mu={} ci={} ci_part={} sigma={} steps={} pairs={} gated_pairs={}",
            self.epoch,
            self.lr,
            self.total,
            self.mae_mu,
            self.ci,
            self.ci_part,
            self.sigma,
            self.steps,
            self.pairs,
            self.gated_pairs
        )
    }
}

/// Parameters, optimizer state and configuration of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: Parameters,
    pub state: OptimizerState,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let params = Parameters::init(&config.model)?;
        let state = OptimizerState::new(&params);
        Ok(Trainer { config, params, state })
    }

    pub fn from_parts(config: TrainConfig, params: Parameters, state: OptimizerState) -> Result<Trainer> {
        config.validate()?;
        Ok(Trainer { config, params, state })
    }

    /// Forward, loss, backward and ADAM update on one batch.
    pub fn step(&mut self, batch: &[&PreparedItem], lr: f64) -> Result<StepLosses> {
        let bound = self.params.bind(true);
        let mut preds = Vec::with_capacity(batch.len());
        for item in batch {
            preds.push(model::forward(&bound, &self.config.model, &item.blocks)?.0);
        }
        let labels: Vec<ScoreLabel> = batch.iter().map(|i| i.label.clone()).collect();
        let pairs = PairSet::build(&labels, &self.config.loss);
        let batch = Batch::new(preds, labels)?;
        let terms = LossTerms::compute(&batch, &pairs, &self.config.loss)?;
        tensor::backward(&terms.total)?;
        let mut grads = bound.gradients();
        adam_step(
            &mut self.params,
            &mut grads,
            &mut self.state,
            lr,
            AdamHyper::from(&self.config),
        )?;
        Ok(StepLosses {
            total: terms.total.item(),
            mae_mu: terms.mae_mu.item(),
            ci: terms.ci.item(),
            sigma: terms.sigma.item(),
            pairs: pairs.len(),
            gated_pairs: pairs.gated_count(),
        })
    }

    /// One pass over `items` in the epoch's shuffled order. A final batch
    /// with a single item still trains, with no CI term.
    pub fn train_epoch(&mut self, items: &[PreparedItem]) -> Result<EpochMetrics> {
        if items.is_empty() {
            return Err(TrainError::EmptySplit);
        }
        let epoch = self.state.epoch;
        let lr = lr_at_epoch(&self.config, epoch);
        let order = epoch_order(self.config.seed, epoch, items.len());
        let mut sums = EpochMetrics {
            epoch: epoch + 1,
            lr,
            total: 0.0,
            mae_mu: 0.0,
            ci: 0.0,
            ci_part: 0.0,
            sigma: 0.0,
            steps: 0,
            pairs: 0,
            gated_pairs: 0,
        };
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&PreparedItem> = chunk.iter().map(|&i| &items[i]).collect();
            let s = self.step(&batch, lr)?;
            sums.total += s.total;
            sums.mae_mu += s.mae_mu;
            sums.ci += s.ci;
            sums.sigma += s.sigma;
            sums.pairs += s.pairs;
            sums.gated_pairs += s.gated_pairs;
            sums.steps += 1;
        }
        let k = sums.steps as f64;
        sums.total /= k;
        sums.mae_mu /= k;
        sums.ci /= k;
        sums.ci_part = self.config.loss.lambda * sums.ci;
        sums.sigma /= k;
        self.state.epoch += 1;
        Ok(sums)
    }

    /// Trains for the configured epochs, keeping the parameters with the best
    /// SCC(μ) on `val` (or on `train` when `val` is empty).
    pub fn fit<F>(&mut self, train: &[PreparedItem], val: &[PreparedItem], mut on_epoch: F) -> Result<FitOutcome>
    where
        F: FnMut(&EpochMetrics, &MetricsReport),
    {
        let select_on = if val.is_empty() { train } else { val };
        let mut best: Option<(f64, usize, Parameters, OptimizerState)> = None;
        while self.state.epoch < self.config.epochs {
            let metrics = self.train_epoch(train)?;
            let report = evaluate(
                &self.params,
                &self.config.model,
                select_on,
                &self.config.loss,
                self.config.cutoff,
            )?;
            on_epoch(&metrics, &report);
            let score = report.scc_mu.clone().unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(b, ..)| score > *b) {
                best = Some((score, metrics.epoch, self.params.clone(), self.state.clone()));
            }
        }
        let (best_scc_mu, best_epoch, best_params, best_state) = match best {
            Some(b) => b,
            None => (
                f64::NEG_INFINITY,
                self.state.epoch,
                self.params.clone(),
                self.state.clone(),
            ),
        };
        Ok(FitOutcome {
            best_epoch,
            best_scc_mu,
            best_params,
            best_state,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub mae_mu: f64,
    pub ci: f64,
    pub sigma: f64,
    pub pairs: usize,
    pub gated_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub best_epoch: usize,
    pub best_scc_mu: f64,
    pub best_params: Parameters,
    /// Optimizer state at the end of the best epoch.
    pub best_state: OptimizerState,
}

/// Evaluation metrics over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n_items: usize,
    pub pcc_mu: std::result::Result<f64, StatsError>,
    pub scc_mu: std::result::Result<f64, StatsError>,
    pub acc: f64,
    pub pcc_sigma: std::result::Result<f64, StatsError>,
    pub scc_sigma: std::result::Result<f64, StatsError>,
    pub mae_mu: f64,
    pub mae_sigma: f64,
    /// Mean of `z·σ̂/√n_obs` using each item's observer count.
    pub mean_ci_half_width: f64,
}

fn fmt_metric(v: &std::result::Result<f64, StatsError>) -> String {
    match v {
        Ok(x) => format!("{x}"),
        Err(_) => "undefined".to_string(),
    }
}

impl MetricsReport {
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "n_items={}", self.n_items).unwrap();
        writeln!(out, "pcc_mu={}", fmt_metric(&self.pcc_mu)).unwrap();
        writeln!(out, "scc_mu={}", fmt_metric(&self.scc_mu)).unwrap();
        writeln!(out, "acc={}", self.acc).unwrap();
        writeln!(out, "pcc_sigma={}", fmt_metric(&self.pcc_sigma)).unwrap();
        writeln!(out, "scc_sigma={}", fmt_metric(&self.scc_sigma)).unwrap();
        writeln!(out, "mae_mu={}", self.mae_mu).unwrap();
        writeln!(out, "mae_sigma={}", self.mae_sigma).unwrap();
        writeln!(out, "mean_ci_half_width={}", self.mean_ci_half_width).unwrap();
        out
    }
}

/// Metrics from ground truth and predictions.
pub fn metrics_from_predictions(
    labels: &[ScoreLabel],
    preds: &[Prediction],
    loss: &LossConfig,
    cutoff: f64,
) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let gt_mu: Vec<f64> = labels.iter().map(|l| l.mu).collect();
    let gt_sigma: Vec<f64> = labels.iter().map(|l| l.sigma).collect();
    let mu: Vec<f64> = preds.iter().map(|p| p.mu_hat).collect();
    let sigma: Vec<f64> = preds.iter().map(|p| p.sigma_hat).collect();
    let n = labels.len() as f64;
    let mae = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let ci = CIConfig { z: loss.z };
    let mean_ci_half_width = labels
        .iter()
        .zip(&sigma)
        .map(|(l, &s)| stats::ci_half_width(s, l.n_obs, &ci))
        .sum::<f64>()
        / n;
    Ok(MetricsReport {
        n_items: labels.len(),
        pcc_mu: stats::pcc(&gt_mu, &mu),
        scc_mu: stats::scc(&gt_mu, &mu),
        acc: stats::binary_accuracy(&gt_mu, &mu, cutoff).expect("non-empty, equal lengths"),
        pcc_sigma: stats::pcc(&gt_sigma, &sigma),
        scc_sigma: stats::scc(&gt_sigma, &sigma),
        mae_mu: mae(&gt_mu, &mu),
        mae_sigma: mae(&gt_sigma, &sigma),
        mean_ci_half_width,
    })
}

pub fn predict_all(params: &Parameters, cfg: &ModelConfig, items: &[PreparedItem]) -> Result<Vec<Prediction>> {
    let bound = params.bind(false);
    items
        .iter()
        .map(|item| Ok(model::forward(&bound, cfg, &item.blocks)?.0.value()))
        .collect()
}

pub fn evaluate(
    params: &Parameters,
    cfg: &ModelConfig,
    items: &[PreparedItem],
    loss: &LossConfig,
    cutoff: f64,
) -> Result<MetricsReport> {
    let preds = predict_all(params, cfg, items)?;
    let labels: Vec<ScoreLabel> = items.iter().map(|i| i.label.clone()).collect();
    metrics_from_predictions(&labels, &preds, loss, cutoff)
}

pub const CONFIG_ENTRY: &str = "__config__";
const STEP_ENTRY: &str = "__adam_step__";
const EPOCH_ENTRY: &str = "__epoch__";

/// Writes parameters, configuration and optimizer state into one `FTNS` file.
pub fn save_checkpoint(path: &Path, params: &Parameters, cfg: &TrainConfig, state: &OptimizerState) -> Result<()> {
    let mut out = Vec::with_capacity(3 * params.len() + 3);
    out.push(data::text_tensor(CONFIG_ENTRY, &config::to_kv(cfg)));
    out.push(NamedTensor::new(STEP_ENTRY, vec![1], vec![state.step as f64])?);
    out.push(NamedTensor::new(EPOCH_ENTRY, vec![1], vec![state.epoch as f64])?);
    for (i, e) in params.entries().iter().enumerate() {
        out.push(NamedTensor::new(e.name.clone(), e.shape.clone(), e.data.clone())?);
        out.push(NamedTensor::new(
            format!("__adam_m__/{}", e.name),
            e.shape.clone(),
            state.m[i].clone(),
        )?);
        out.push(NamedTensor::new(
            format!("__adam_v__/{}", e.name),
            e.shape.clone(),
            state.v[i].clone(),
        )?);
    }
    Ok(data::write_tensor_file(path, &out)?)
}

/// Restores `(parameters, config, optimizer state)` from a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(Parameters, TrainConfig, OptimizerState)> {
    let entries = data::read_tensor_file(path)?;
    let mut named: HashMap<String, (Vec<usize>, Vec<f64>)> =
        entries.into_iter().map(|t| (t.name, (t.shape, t.data))).collect();
    let cfg_tensor = named
        .remove(CONFIG_ENTRY)
        .ok_or_else(|| TrainError::MissingEntry(CONFIG_ENTRY.into()))?;
    let text = data::tensor_text(&NamedTensor {
        name: CONFIG_ENTRY.into(),
        shape: cfg_tensor.0,
        data: cfg_tensor.1,
    })
    .ok_or_else(|| TrainError::MissingEntry(format!("{CONFIG_ENTRY} (not UTF-8 text)")))?;
    let cfg = config::from_kv(&text)?;
    let mut scalar = |name: &str| -> Result<f64> {
        named
            .remove(name)
            .and_then(|(_, d)| d.first().copied())
            .ok_or_else(|| TrainError::MissingEntry(name.into()))
    };
    let step = scalar(STEP_ENTRY)? as u64;
    let epoch = scalar(EPOCH_ENTRY)? as usize;
    let params = Parameters::from_named(&cfg.model, &named)?;
    let mut state = OptimizerState::new(&params);
    state.step = step;
    state.epoch = epoch;
    for (i, e) in params.entries().iter().enumerate() {
        for (prefix, buf) in [("__adam_m__", &mut state.m[i]), ("__adam_v__", &mut state.v[i])] {
            let key = format!("{prefix}/{}", e.name);
            let (shape, d) = named.get(&key).ok_or_else(|| TrainError::MissingEntry(key.clone()))?;
            if *shape != e.shape {
                return Err(ModelError::ParameterShape {
                    name: key,
                    expected: e.shape.clone(),
                    got: shape.clone(),
                }
                .into());
            }
            buf.clone_from(d);
        }
    }
    Ok((params, cfg, state))
}

/// [`load_checkpoint`] that also requires the stored model config to equal `expected`.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ModelConfig,
) -> Result<(Parameters, TrainConfig, OptimizerState)> {
    let loaded = load_checkpoint(path)?;
    if loaded.1.model != *expected {
        return Err(TrainError::ConfigMismatch(format!(
            "stored {:?}, expected {:?}",
            loaded.1.model, expected
        )));
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};

    fn single_param(value: f64) -> Parameters {
        let mut p = Parameters::init(&ModelConfig::toy()).unwrap();
        for e in p.entries_mut() {
            e.data.iter_mut().for_each(|v| *v = value);
        }
        p
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0), 1e-4);
        assert_eq!(lr_at_epoch(&cfg, 19), 1e-4);
        assert!((lr_at_epoch(&cfg, 20) - 1e-5).abs() < 1e-20);
        assert!((lr_at_epoch(&cfg, 45) - 1e-6).abs() < 1e-21);
        let mut prev = f64::INFINITY;
        for e in 0..200 {
            let lr = lr_at_epoch(&cfg, e);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = single_param(0.25);
        let before = p.clone();
        let mut state = OptimizerState::new(&p);
        let mut grads: Vec<Vec<f64>> = p.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        adam_step(&mut p, &mut grads, &mut state, 0.1, AdamHyper::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = single_param(1.0);
        let mut state = OptimizerState::new(&p);
        let mut grads: Vec<Vec<f64>> = p.entries().iter().map(|e| vec![1.0; e.data.len()]).collect();
        adam_step(&mut p, &mut grads, &mut state, 0.1, AdamHyper::default()).unwrap();
        for e in p.entries() {
            for &v in &e.data {
                assert!((v - 0.9).abs() < 1e-8);
            }
        }
        assert!(grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_rejects_mismatched_gradients() {
        let mut p = single_param(1.0);
        let mut state = OptimizerState::new(&p);
        let mut grads: Vec<Vec<f64>> = p.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        grads[0].pop();
        assert!(matches!(
            adam_step(&mut p, &mut grads, &mut state, 0.1, AdamHyper::default()),
            Err(TrainError::GradientShape { .. })
        ));
        let mut short = vec![vec![0.0]];
        assert!(matches!(
            adam_step(&mut p, &mut short, &mut state, 0.1, AdamHyper::default()),
            Err(TrainError::GradientCount { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            initial_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn toy_items(n: usize, seed: u64) -> (TrainConfig, Vec<PreparedItem>) {
        let cfg = TrainConfig {
            model: ModelConfig::toy(),
            batch_size: 4,
            initial_lr: 1e-3,
            ..TrainConfig::default()
        };
        let ds = generate_synthetic(&SynthSpec {
            n_items: n,
            feature_shape: [16, 5, 5],
            seed,
            ..SynthSpec::default()
        })
        .unwrap();
        let refs: Vec<&Item> = ds.items.iter().collect();
        let items = prepare(&refs, &cfg.model).unwrap();
        (cfg, items)
    }

    #[test]
    fn steps_per_epoch_is_ceil() {
        let (cfg, items) = toy_items(10, 1);
        let mut t = Trainer::new(cfg.clone()).unwrap();
        assert_eq!(t.train_epoch(&items).unwrap().steps, 3);
        let mut t = Trainer::new(TrainConfig { batch_size: 10, ..cfg }).unwrap();
        let m = t.train_epoch(&items).unwrap();
        assert_eq!(m.steps, 1);
        assert_eq!(t.state.step, 1);
    }

    #[test]
    fn singleton_tail_batch_trains_without_ci() {
        let (cfg, items) = toy_items(5, 2);
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.params.clone();
        let tail = [&items[0]];
        let s = t.step(&tail, 1e-3).unwrap();
        assert_eq!(s.pairs, 0);
        assert_eq!(s.ci, 0.0);
        assert_ne!(t.params, before);
    }

    #[test]
    fn epoch_order_is_a_deterministic_permutation() {
        let a = epoch_order(5, 3, 20);
        assert_eq!(a, epoch_order(5, 3, 20));
        assert_ne!(a, epoch_order(5, 4, 20));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn metrics_identity_and_anticorrelation() {
        let labels: Vec<ScoreLabel> = [(4.2, 1.0), (6.1, 1.5), (5.5, 0.7), (3.0, 2.0)]
            .iter()
            .map(|&(m, s)| ScoreLabel::direct("i", 100, m, s).unwrap())
            .collect();
        let exact: Vec<Prediction> = labels
            .iter()
            .map(|l| Prediction {
                mu_hat: l.mu,
                sigma_hat: l.sigma,
            })
            .collect();
        let r = metrics_from_predictions(&labels, &exact, &LossConfig::default(), 5.0).unwrap();
        assert!((r.pcc_mu.clone().unwrap() - 1.0).abs() < 1e-12);
        assert!((r.scc_mu.clone().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.acc, 1.0);
        let mean = labels.iter().map(|l| l.mu).sum::<f64>() / 4.0;
        let negated: Vec<Prediction> = labels
            .iter()
            .map(|l| Prediction {
                mu_hat: 2.0 * mean - l.mu,
                sigma_hat: l.sigma,
            })
            .collect();
        let r = metrics_from_predictions(&labels, &negated, &LossConfig::default(), 5.0).unwrap();
        assert!((r.pcc_mu.unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_predictions_surface_correlation_error() {
        let labels: Vec<ScoreLabel> = [4.0, 6.0, 7.0]
            .iter()
            .map(|&m| ScoreLabel::direct("i", 10, m, 1.0).unwrap())
            .collect();
        let flat = vec![
            Prediction {
                mu_hat: 5.5,
                sigma_hat: 1.0
            };
            3
        ];
        let r = metrics_from_predictions(&labels, &flat, &LossConfig::default(), 5.0).unwrap();
        assert_eq!(r.pcc_mu, Err(StatsError::UndefinedCorrelation));
        assert!((r.acc - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.to_kv().contains("pcc_mu=undefined"));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ftns");
        let (cfg, items) = toy_items(6, 3);
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.train_epoch(&items).unwrap();
        save_checkpoint(&path, &t.params, &t.config, &t.state).unwrap();
        let (p, c, s) = load_checkpoint(&path).unwrap();
        assert_eq!(p, t.params);
        assert_eq!(c, t.config);
        assert_eq!(s, t.state);
        let other = ModelConfig {
            fc_sizes: [8, 6, 5],
            ..cfg.model.clone()
        };
        assert!(matches!(
            load_checkpoint_expecting(&path, &other),
            Err(TrainError::ConfigMismatch(_))
        ));
        assert!(load_checkpoint_expecting(&path, &cfg.model).is_ok());
    }
}
