//! Training objective: σ mean-absolute error, the gated confidence-interval
//! ranking loss, the composite μ loss and the weighted multi-task sum.

use thiserror::Error;

use crate::model::PredictionTensors;
use crate::stats::{sigma_of_difference, ScoreLabel, Z_95};
use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss over an empty batch")]
    EmptyBatch,
    #[error("pair set was built for {pairs} items but the batch has {batch}")]
    PairSetMismatch { pairs: usize, batch: usize },
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha_mu: f64,
    pub alpha_sigma: f64,
    /// Weight of the CI loss inside the μ loss.
    pub lambda: f64,
    /// Gate margin in score units.
    pub tau: f64,
    pub z: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_mu: 0.6,
            alpha_sigma: 0.4,
            lambda: 0.5,
            tau: 0.2,
            z: Z_95,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LossError::Config(m.to_string()));
        if !(self.alpha_mu >= 0.0 && self.alpha_sigma >= 0.0) {
            return bad("alpha_mu and alpha_sigma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        // tau = +inf is allowed and disables the CI term
        if !(self.tau >= 0.0) {
            return bad("tau must be non-negative");
        }
        if !(self.z > 0.0 && self.z.is_finite()) {
            return bad("z must be positive");
        }
        Ok(())
    }
}

/// Graph predictions paired with their ground truth.
#[derive(Debug, Clone)]
pub struct Batch {
    pub predictions: Vec<PredictionTensors>,
    pub labels: Vec<ScoreLabel>,
}

impl Batch {
    pub fn new(predictions: Vec<PredictionTensors>, labels: Vec<ScoreLabel>) -> Result<Batch> {
        if predictions.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        assert_eq!(predictions.len(), labels.len(), "one label per prediction");
        Ok(Batch { predictions, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `1` iff `z·σ_diff(a, b) > τ`, from ground-truth statistics only.
pub fn gate_l_ci(a: &ScoreLabel, b: &ScoreLabel, cfg: &LossConfig) -> bool {
    cfg.z * sigma_of_difference(a, b) > cfg.tau
}

/// All unordered index pairs of a batch with their gate values.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    n_items: usize,
    pairs: Vec<(usize, usize, bool)>,
}

impl PairSet {
    pub fn build(labels: &[ScoreLabel], cfg: &LossConfig) -> PairSet {
        let n = labels.len();
        let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j, gate_l_ci(&labels[i], &labels[j], cfg)));
            }
        }
        PairSet { n_items: n, pairs }
    }

    pub fn pairs(&self) -> &[(usize, usize, bool)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn gated(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().filter(|p| p.2).map(|&(i, j, _)| (i, j))
    }

    pub fn gated_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.2).count()
    }

    fn check(&self, batch: &Batch) -> Result<()> {
        if self.n_items != batch.len() {
            return Err(LossError::PairSetMismatch {
                pairs: self.n_items,
                batch: batch.len(),
            });
        }
        Ok(())
    }
}

fn mean_abs_error<'a>(targets: impl Iterator<Item = (f64, &'a Tensor)>, n: usize) -> Result<Tensor> {
    let terms: Vec<Tensor> = targets
        .map(|(y, y_hat)| Ok(Tensor::scalar(y).sub(y_hat)?.abs()))
        .collect::<Result<_>>()?;
    Ok(tensor::add_n(&terms)?.scale(1.0 / n as f64))
}

/// Mean over items of `|σ − σ̂|`.
pub fn loss_sigma(batch: &Batch) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    mean_abs_error(
        batch
            .labels
            .iter()
            .zip(&batch.predictions)
            .map(|(l, p)| (l.sigma, &p.sigma)),
        batch.len(),
    )
}

/// Mean over items of `|μ − μ̂|`.
pub fn loss_mae_mu(batch: &Batch) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    mean_abs_error(
        batch.labels.iter().zip(&batch.predictions).map(|(l, p)| (l.mu, &p.mu)),
        batch.len(),
    )
}

/// Mean over gated pairs of `max(0, | |μ_a − μ_b| − |μ̂_a − μ̂_b| |)`.
///
/// With no gated pair the result is a constant zero with no graph inputs.
pub fn loss_ci(batch: &Batch, pairs: &PairSet, _cfg: &LossConfig) -> Result<Tensor> {
    pairs.check(batch)?;
    let mut terms = Vec::new();
    for (i, j) in pairs.gated() {
        let gt_gap = (batch.labels[i].mu - batch.labels[j].mu).abs();
        let pred_gap = batch.predictions[i].mu.sub(&batch.predictions[j].mu)?.abs();
        // the operand is already non-negative, so the hinge never clips
        let term = Tensor::scalar(gt_gap).sub(&pred_gap)?.abs().relu();
        terms.push(term);
    }
    if terms.is_empty() {
        return Ok(Tensor::scalar(0.0));
    }
    let n = terms.len();
    Ok(tensor::add_n(&terms)?.scale(1.0 / n as f64))
}

/// `(1 − λ)·MAE(μ) + λ·L_CI`.
pub fn loss_mu(batch: &Batch, pairs: &PairSet, cfg: &LossConfig) -> Result<Tensor> {
    Ok(LossTerms::compute(batch, pairs, cfg)?.mu)
}

/// `α_μ·L_μ + α_σ·L_σ`.
pub fn loss_mtl(batch: &Batch, pairs: &PairSet, cfg: &LossConfig) -> Result<Tensor> {
    Ok(LossTerms::compute(batch, pairs, cfg)?.total)
}

/// Every component of the objective, sharing one graph.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub mae_mu: Tensor,
    pub ci: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn compute(batch: &Batch, pairs: &PairSet, cfg: &LossConfig) -> Result<LossTerms> {
        let mae_mu = loss_mae_mu(batch)?;
        let ci = loss_ci(batch, pairs, cfg)?;
        let mu = mae_mu.scale(1.0 - cfg.lambda).add(&ci.scale(cfg.lambda))?;
        let sigma = loss_sigma(batch)?;
        let total = mu.scale(cfg.alpha_mu).add(&sigma.scale(cfg.alpha_sigma))?;
        Ok(LossTerms {
            mae_mu,
            ci,
            mu,
            sigma,
            total,
        })
    }
}

/// Direct double-loop evaluation of the CI loss on plain numbers,
/// independent of the graph implementation.
pub fn loss_ci_oracle(mus: &[f64], mu_hats: &[f64], sigmas: &[f64], n_obs: &[u32], cfg: &LossConfig) -> f64 {
    let n = mus.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..n {
        for b in a + 1..n {
            let sd = (sigmas[a] * sigmas[a] / n_obs[a] as f64 + sigmas[b] * sigmas[b] / n_obs[b] as f64).sqrt();
            if cfg.z * sd > cfg.tau {
                let err = ((mus[a] - mus[b]).abs() - (mu_hats[a] - mu_hats[b]).abs()).abs();
                sum += err.max(0.0);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use proptest::prelude::*;

    fn label(mu: f64, sigma: f64, n: u32) -> ScoreLabel {
        ScoreLabel::direct("x", n, mu, sigma).unwrap()
    }

    fn preds(mu: &[f64], sigma: &[f64]) -> Vec<PredictionTensors> {
        mu.iter()
            .zip(sigma)
            .map(|(&m, &s)| PredictionTensors {
                mu: Tensor::param(&[], vec![m]).unwrap(),
                sigma: Tensor::param(&[], vec![s]).unwrap(),
            })
            .collect()
    }

    fn batch(labels: Vec<ScoreLabel>, mu_hat: &[f64], sigma_hat: &[f64]) -> Batch {
        Batch::new(preds(mu_hat, sigma_hat), labels).unwrap()
    }

    #[test]
    fn sigma_loss_values() {
        let b = batch(vec![label(5.0, 1.0, 10), label(5.0, 2.0, 10)], &[0.0, 0.0], &[1.0, 2.0]);
        assert_eq!(loss_sigma(&b).unwrap().item(), 0.0);
        let b = batch(vec![label(5.0, 1.0, 10), label(5.0, 2.0, 10)], &[0.0, 0.0], &[1.5, 2.5]);
        let l = loss_sigma(&b).unwrap();
        assert_eq!(l.item(), 0.5);
        backward(&l).unwrap();
        // σ̂ above σ: gradient +1/N per item
        for p in &b.predictions {
            assert_eq!(p.sigma.grad_vec(), vec![0.5]);
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert_eq!(Batch::new(vec![], vec![]).unwrap_err(), LossError::EmptyBatch);
    }

    #[test]
    fn gate_cases() {
        let cfg = LossConfig {
            tau: 0.5,
            ..LossConfig::default()
        };
        assert!(!gate_l_ci(&label(5.0, 0.0, 25), &label(4.0, 0.0, 25), &cfg));
        assert!(gate_l_ci(&label(5.2, 1.2, 25), &label(4.6, 0.9, 25), &cfg));
        // boundary: z·σ_diff == τ exactly stays closed
        let a = label(5.0, 1.0, 1);
        let b = label(5.0, 0.0, 1);
        let cfg = LossConfig {
            z: 2.0,
            tau: 2.0,
            ..LossConfig::default()
        };
        assert_eq!(cfg.z * sigma_of_difference(&a, &b), cfg.tau);
        assert!(!gate_l_ci(&a, &b, &cfg));
    }

    #[test]
    fn pair_set_counts() {
        let labels: Vec<_> = (0..6).map(|i| label(5.0, i as f64 * 0.2, 25)).collect();
        let p = PairSet::build(&labels, &LossConfig::default());
        assert_eq!(p.len(), 15);
        assert!(PairSet::build(&labels[..1], &LossConfig::default()).is_empty());
    }

    #[test]
    fn ci_loss_hand_case() {
        let cfg = LossConfig {
            tau: 0.5,
            ..LossConfig::default()
        };
        let b = batch(vec![label(5.2, 1.2, 25), label(4.6, 0.9, 25)], &[5.0, 4.8], &[1.0, 1.0]);
        let pairs = PairSet::build(&b.labels, &cfg);
        assert_eq!(pairs.gated_count(), 1);
        let l = loss_ci(&b, &pairs, &cfg).unwrap();
        assert!((l.item() - 0.4).abs() < 1e-12);
        let oracle = loss_ci_oracle(&[5.2, 4.6], &[5.0, 4.8], &[1.2, 0.9], &[25, 25], &cfg);
        assert!((oracle - 0.4).abs() < 1e-12);
    }

    #[test]
    fn ci_loss_without_gates_is_detached_zero() {
        let cfg = LossConfig {
            tau: f64::INFINITY,
            ..LossConfig::default()
        };
        let b = batch(vec![label(5.2, 1.2, 25), label(4.6, 0.9, 25)], &[5.0, 4.8], &[1.0, 1.0]);
        let l = loss_ci(&b, &PairSet::build(&b.labels, &cfg), &cfg).unwrap();
        assert_eq!(l.item(), 0.0);
        assert!(!l.requires_grad());
        assert_eq!(loss_ci_oracle(&[5.0], &[1.0], &[2.0], &[3], &cfg), 0.0);
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let cfg = LossConfig::default();
        let labels = vec![label(5.2, 1.2, 25), label(4.6, 0.9, 25), label(7.0, 2.0, 30)];
        let b = batch(labels, &[5.2, 4.6, 7.0], &[1.2, 0.9, 2.0]);
        let pairs = PairSet::build(&b.labels, &cfg);
        assert_eq!(loss_ci(&b, &pairs, &cfg).unwrap().item(), 0.0);
        assert_eq!(loss_mtl(&b, &pairs, &cfg).unwrap().item(), 0.0);
    }

    #[test]
    fn mu_loss_blend() {
        let labels = vec![label(5.2, 1.2, 25), label(4.6, 0.9, 25)];
        let mu_hat = [5.0, 4.8];
        let for_lambda = |lambda: f64| {
            let cfg = LossConfig {
                lambda,
                tau: 0.5,
                ..LossConfig::default()
            };
            let b = batch(labels.clone(), &mu_hat, &[1.0, 1.0]);
            let pairs = PairSet::build(&b.labels, &cfg);
            loss_mu(&b, &pairs, &cfg).unwrap().item()
        };
        // MAE = 0.2, L_CI = 0.4
        assert!((for_lambda(0.0) - 0.2).abs() < 1e-12);
        assert!((for_lambda(1.0) - 0.4).abs() < 1e-12);
        assert!((for_lambda(0.5) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn mtl_weighting() {
        // MAE(μ) = 1.0 with λ = 0 gives L_μ = 1.0; L_σ = 0.5
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let b = batch(vec![label(5.0, 1.0, 10)], &[6.0], &[1.5]);
        let pairs = PairSet::build(&b.labels, &cfg);
        let terms = LossTerms::compute(&b, &pairs, &cfg).unwrap();
        assert_eq!(terms.mu.item(), 1.0);
        assert_eq!(terms.sigma.item(), 0.5);
        assert!((terms.total.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn mismatched_pair_set_rejected() {
        let cfg = LossConfig::default();
        let b = batch(vec![label(5.0, 1.0, 10), label(4.0, 1.0, 10)], &[5.0, 4.0], &[1.0, 1.0]);
        let pairs = PairSet::build(&b.labels[..1], &cfg);
        assert!(matches!(
            loss_ci(&b, &pairs, &cfg),
            Err(LossError::PairSetMismatch { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig {
                lambda: 1.5,
                ..LossConfig::default()
            },
            LossConfig {
                alpha_mu: -0.1,
                ..LossConfig::default()
            },
            LossConfig {
                tau: -1.0,
                ..LossConfig::default()
            },
            LossConfig {
                z: 0.0,
                ..LossConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        let inf = LossConfig {
            tau: f64::INFINITY,
            ..LossConfig::default()
        };
        assert!(inf.validate().is_ok());
    }

    fn arb_batch() -> impl Strategy<Value = Vec<(f64, f64, u32, f64)>> {
        proptest::collection::vec((1.0f64..10.0, 0.0f64..2.5, 1u32..60, 1.0f64..10.0), 2..12)
    }

    proptest! {
        #[test]
        fn gates_ignore_predictions(rows in arb_batch(), shift in -3.0f64..3.0) {
            let cfg = LossConfig::default();
            let labels: Vec<_> = rows.iter().map(|r| label(r.0, r.1, r.2)).collect();
            let a = PairSet::build(&labels, &cfg);
            let hats: Vec<f64> = rows.iter().map(|r| r.3 + shift).collect();
            let b = batch(labels.clone(), &hats, &hats);
            prop_assert_eq!(a, PairSet::build(&b.labels, &cfg));
        }

        #[test]
        fn ci_loss_invariances(rows in arb_batch(), shift in -3.0f64..3.0) {
            let cfg = LossConfig::default();
            let labels: Vec<_> = rows.iter().map(|r| label(r.0, r.1, r.2)).collect();
            let hats: Vec<f64> = rows.iter().map(|r| r.3).collect();
            let eval = |labels: Vec<ScoreLabel>, hats: &[f64]| {
                let b = batch(labels, hats, hats);
                let p = PairSet::build(&b.labels, &cfg);
                loss_ci(&b, &p, &cfg).unwrap().item()
            };
            let base = eval(labels.clone(), &hats);
            prop_assert!(base >= 0.0);
            // constant shift of every prediction
            let shifted: Vec<f64> = hats.iter().map(|h| h + shift).collect();
            prop_assert!((eval(labels.clone(), &shifted) - base).abs() < 1e-9);
            // reversing item order swaps both members of every pair
            let mut rl = labels.clone();
            rl.reverse();
            let mut rh = hats.clone();
            rh.reverse();
            prop_assert!((eval(rl, &rh) - base).abs() < 1e-12);
        }

        #[test]
        fn infinite_tau_collapses_mu_loss(rows in arb_batch(), lambda in 0.0f64..1.0) {
            let cfg = LossConfig { tau: f64::INFINITY, lambda, ..LossConfig::default() };
            let labels: Vec<_> = rows.iter().map(|r| label(r.0, r.1, r.2)).collect();
            let hats: Vec<f64> = rows.iter().map(|r| r.3).collect();
            let b = batch(labels, &hats, &hats);
            let p = PairSet::build(&b.labels, &cfg);
            let mae = loss_mae_mu(&b).unwrap().item();
            prop_assert_eq!(loss_mu(&b, &p, &cfg).unwrap().item(), (1.0 - lambda) * mae);
        }
    }
}
