//! Finite-difference check of the full model against its analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{self, Batch, LossConfig, PairSet};
use crate::model::{self, BoundParams, ModelConfig, ModelError, Parameters};
use crate::stats::ScoreLabel;
use crate::tensor::{self, Tensor, TensorError};

/// Scalar objective differentiated by [`model_grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Sum of μ̂ over the batch.
    MuSum,
    /// Multi-task loss over the batch.
    Mtl,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub n_checked: usize,
}

/// Random block inputs in `[lo, hi]` and labels for `n` items.
pub fn random_batch(
    cfg: &ModelConfig,
    n: usize,
    (lo, hi): (f64, f64),
    seed: u64,
) -> Result<(Vec<Vec<Tensor>>, Vec<ScoreLabel>), TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = cfg.block_shape();
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let blocks = (0..cfg.n_blocks)
            .map(|_| Tensor::new(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(lo..hi)).collect()))
            .collect::<Result<Vec<_>, _>>()?;
        inputs.push(blocks);
        let mu = rng.random_range(2.0..9.0);
        let sigma = rng.random_range(0.5..2.5);
        let n_obs = rng.random_range(20..200);
        labels.push(ScoreLabel::direct(format!("g{k}"), n_obs, mu, sigma).expect("valid label"));
    }
    Ok((inputs, labels))
}

fn objective_value(
    bound: &BoundParams,
    cfg: &ModelConfig,
    inputs: &[Vec<Tensor>],
    labels: &[ScoreLabel],
    objective: Objective,
    loss: &LossConfig,
) -> Result<Tensor, ModelError> {
    let preds = inputs
        .iter()
        .map(|b| model::forward(bound, cfg, b).map(|(p, _)| p))
        .collect::<Result<Vec<_>, _>>()?;
    match objective {
        Objective::MuSum => {
            let mus: Vec<Tensor> = preds.iter().map(|p| p.mu.clone()).collect();
            Ok(tensor::add_n(&mus)?)
        }
        Objective::Mtl => {
            let pairs = PairSet::build(labels, loss);
            let batch = Batch::new(preds, labels.to_vec()).map_err(|e| ModelError::Config(e.to_string()))?;
            losses::loss_mtl(&batch, &pairs, loss).map_err(|e| ModelError::Config(e.to_string()))
        }
    }
}

/// Parameters with every weight in `[0.5, 1.5] / fan_in` and every bias in
/// `[0.05, 0.15]`. With positive inputs each pre-activation stays positive
/// and O(1), so no ReLU sits near its kink and no sigmoid saturates.
pub fn smooth_parameters(cfg: &ModelConfig, seed: u64) -> Result<Parameters, ModelError> {
    let mut params = Parameters::init(&ModelConfig { seed, ..cfg.clone() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for e in params.entries_mut() {
        let (lo, hi) = if e.name.ends_with(".bias") {
            (0.05, 0.15)
        } else {
            // conv weights are [Co, Ci, k, k]; dense weights are [in, out]
            let fan_in = if e.shape.len() == 4 {
                e.shape[1..].iter().product::<usize>()
            } else {
                e.shape[0]
            } as f64;
            (0.5 / fan_in, 1.5 / fan_in)
        };
        e.data.iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    }
    Ok(params)
}

/// Parameters, per-item block inputs and labels.
pub type CheckPoint = (Parameters, Vec<Vec<Tensor>>, Vec<ScoreLabel>);

/// Inputs, parameters and labels of the default full-model check: a smooth
/// point from [`smooth_parameters`] with inputs in `[0.1, 1]`.
pub fn smooth_check_point(cfg: &ModelConfig, n_items: usize, seed: u64) -> Result<CheckPoint, ModelError> {
    let params = smooth_parameters(cfg, seed)?;
    let (inputs, labels) = random_batch(cfg, n_items, (0.1, 1.0), seed)?;
    Ok((params, inputs, labels))
}

/// Compares analytic and central-difference gradients of `objective` with
/// respect to every parameter element.
pub fn model_grad_check(
    params: &Parameters,
    cfg: &ModelConfig,
    inputs: &[Vec<Tensor>],
    labels: &[ScoreLabel],
    objective: Objective,
    loss: &LossConfig,
    h: f64,
) -> Result<ModelGradReport, ModelError> {
    let report = tensor::grad_check_many(
        |xs| {
            let bound = BoundParams::from_tensors(params, xs.to_vec());
            objective_value(&bound, cfg, inputs, labels, objective, loss)
        },
        params.bind(false).tensors(),
        h,
    )?;
    let (worst_param, worst_index) = match report.worst {
        Some((p, i)) => (Some(params.entries()[p].name.clone()), i),
        None => (None, 0),
    };
    Ok(ModelGradReport {
        max_rel_error: report.max_rel_error,
        worst_param,
        worst_index,
        analytic: report.analytic,
        numeric: report.numeric,
        n_checked: params.count(),
    })
}
