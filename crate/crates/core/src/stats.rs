//! Opinion-score statistics: labels derived from vote histograms, confidence
//! intervals of a mean and of a score difference, and the evaluation metrics
//! (Pearson, Spearman, two-class accuracy).

use thiserror::Error;

/// Number of integer score bins (scores 1..=10).
pub const SCORE_BINS: usize = 10;

/// Critical value for a 95% two-sided normal interval.
pub const Z_95: f64 = 1.96;

/// Default cut-off separating "low" from "high" aesthetic quality.
pub const DEFAULT_CUTOFF: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("vote histogram for '{0}' has no votes")]
    EmptyHistogram(String),
    #[error("lists have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("undefined correlation: input is constant")]
    UndefinedCorrelation,
    #[error("invalid label '{id}': {reason}")]
    InvalidLabel { id: String, reason: String },
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Ground-truth opinion statistics of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLabel {
    pub item_id: String,
    pub n_obs: u32,
    pub mu: f64,
    /// Population standard deviation of the votes.
    pub sigma: f64,
    /// Counts for scores 1..=10, when the label came from a histogram.
    pub votes: Option<[u64; SCORE_BINS]>,
}

impl ScoreLabel {
    /// A label given directly as (μ, σ) without a histogram.
    pub fn direct(item_id: impl Into<String>, n_obs: u32, mu: f64, sigma: f64) -> Result<Self> {
        let item_id = item_id.into();
        let invalid = |reason: &str| StatsError::InvalidLabel {
            id: item_id.clone(),
            reason: reason.to_string(),
        };
        if n_obs == 0 {
            return Err(invalid("n_obs must be at least 1"));
        }
        if !mu.is_finite() {
            return Err(invalid("mu must be finite"));
        }
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(invalid("sigma must be finite and non-negative"));
        }
        Ok(ScoreLabel {
            item_id,
            n_obs,
            mu,
            sigma,
            votes: None,
        })
    }
}

/// Derives (μ, σ) from a histogram over scores 1..=10.
pub fn label_from_votes(votes: [u64; SCORE_BINS], item_id: impl Into<String>) -> Result<ScoreLabel> {
    let item_id = item_id.into();
    let n: u64 = votes.iter().sum();
    if n == 0 {
        return Err(StatsError::EmptyHistogram(item_id));
    }
    let n_obs = u32::try_from(n).map_err(|_| StatsError::InvalidLabel {
        id: item_id.clone(),
        reason: format!("{n} votes exceed the supported observer count"),
    })?;
    let nf = n as f64;
    let scores = (1..=SCORE_BINS).map(|s| s as f64);
    let mu = scores.clone().zip(&votes).map(|(s, &c)| s * c as f64).sum::<f64>() / nf;
    let var = scores
        .zip(&votes)
        .map(|(s, &c)| c as f64 * (s - mu).powi(2))
        .sum::<f64>()
        / nf;
    Ok(ScoreLabel {
        item_id,
        n_obs,
        mu,
        sigma: var.sqrt(),
        votes: Some(votes),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CIConfig {
    /// Two-sided critical value, e.g. 1.96 for 95% confidence.
    pub z: f64,
}

impl Default for CIConfig {
    fn default() -> Self {
        CIConfig { z: Z_95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn centered(center: f64, half_width: f64) -> Self {
        Interval {
            lo: center - half_width,
            hi: center + half_width,
        }
    }

    pub fn half_width(&self) -> f64 {
        (self.hi - self.lo) / 2.0
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

/// Half-width `z·σ/√n` of the interval around a mean.
pub fn ci_half_width(sigma: f64, n_obs: u32, cfg: &CIConfig) -> f64 {
    cfg.z * sigma / (n_obs as f64).sqrt()
}

/// `μ ± z·σ/√n_obs`.
pub fn ci_mean(label: &ScoreLabel, cfg: &CIConfig) -> Interval {
    Interval::centered(label.mu, ci_half_width(label.sigma, label.n_obs, cfg))
}

/// `√(σ_a²/n_a + σ_b²/n_b)`, the standard error of a difference of means.
pub fn sigma_of_difference(a: &ScoreLabel, b: &ScoreLabel) -> f64 {
    (a.sigma.powi(2) / a.n_obs as f64 + b.sigma.powi(2) / b.n_obs as f64).sqrt()
}

/// `|μ_a − μ_b| ± z·σ_diff`. The lower bound is not clamped at zero.
pub fn ci_difference(a: &ScoreLabel, b: &ScoreLabel, cfg: &CIConfig) -> Interval {
    Interval::centered((a.mu - b.mu).abs(), cfg.z * sigma_of_difference(a, b))
}

/// True iff the mean intervals of `a` and `b` are disjoint.
pub fn significantly_different(a: &ScoreLabel, b: &ScoreLabel, cfg: &CIConfig) -> bool {
    !ci_mean(a, cfg).overlaps(&ci_mean(b, cfg))
}

/// Outcome of comparing two items by interval non-overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    AOverB,
    BOverA,
    NotSignificant,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::AOverB => "A≻B",
            Verdict::BOverA => "B≻A",
            Verdict::NotSignificant => "not-significant",
        })
    }
}

/// `A≻B` or `B≻A` when the mean intervals are disjoint, by the higher mean.
pub fn rank_verdict(a: &ScoreLabel, b: &ScoreLabel, cfg: &CIConfig) -> Verdict {
    if !significantly_different(a, b, cfg) {
        Verdict::NotSignificant
    } else if a.mu > b.mu {
        Verdict::AOverB
    } else {
        Verdict::BOverA
    }
}

fn check_pair(x: &[f64], y: &[f64], needed: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < needed {
        return Err(StatsError::TooFew { needed, got: x.len() });
    }
    Ok(())
}

/// Pearson correlation coefficient.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end
        let mean_rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean_rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn scc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 2)?;
    pcc(&average_ranks(x), &average_ranks(y))
}

/// Fraction of items on the same side of `cutoff` in truth and prediction.
/// A score equal to the cutoff counts as "not above".
pub fn binary_accuracy(gt_mu: &[f64], pred_mu: &[f64], cutoff: f64) -> Result<f64> {
    check_pair(gt_mu, pred_mu, 1)?;
    let hits = gt_mu
        .iter()
        .zip(pred_mu)
        .filter(|(&g, &p)| (g > cutoff) == (p > cutoff))
        .count();
    Ok(hits as f64 / gt_mu.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(mu: f64, sigma: f64, n: u32) -> ScoreLabel {
        ScoreLabel::direct("x", n, mu, sigma).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn votes_degenerate() {
        let mut v = [0; SCORE_BINS];
        v[4] = 37;
        let l = label_from_votes(v, "a").unwrap();
        assert_eq!((l.mu, l.sigma, l.n_obs), (5.0, 0.0, 37));
    }

    #[test]
    fn votes_two_point() {
        let mut v = [0; SCORE_BINS];
        v[0] = 1;
        v[8] = 1;
        let l = label_from_votes(v, "a").unwrap();
        assert_eq!((l.mu, l.sigma), (5.0, 4.0));
    }

    #[test]
    fn votes_uniform() {
        let l = label_from_votes([1; SCORE_BINS], "u").unwrap();
        assert!(close(l.mu, 5.5, 1e-12));
        assert!(close(l.sigma, 8.25f64.sqrt(), 1e-12));
        assert!(close(l.sigma, 2.8723, 1e-4));
    }

    #[test]
    fn votes_empty() {
        assert_eq!(
            label_from_votes([0; SCORE_BINS], "e").unwrap_err(),
            StatsError::EmptyHistogram("e".into())
        );
    }

    #[test]
    fn direct_label_validation() {
        assert!(ScoreLabel::direct("a", 0, 5.0, 1.0).is_err());
        assert!(ScoreLabel::direct("a", 3, 5.0, -0.1).is_err());
        assert!(ScoreLabel::direct("a", 3, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn ci_mean_cases() {
        let cfg = CIConfig::default();
        let i = ci_mean(&label(5.0, 0.0, 10), &cfg);
        assert_eq!((i.lo, i.hi), (5.0, 5.0));
        let i = ci_mean(&label(5.0, 2.0, 100), &cfg);
        assert!(close(i.lo, 4.608, 1e-12) && close(i.hi, 5.392, 1e-12));
        let wide = ci_mean(&label(5.0, 2.0, 50), &cfg).half_width();
        assert!(close(wide / i.half_width(), 2f64.sqrt(), 1e-12));
    }

    #[test]
    fn sigma_of_difference_cases() {
        assert_eq!(sigma_of_difference(&label(3.0, 0.0, 4), &label(7.0, 0.0, 9)), 0.0);
        let d = sigma_of_difference(&label(5.2, 1.2, 25), &label(4.6, 0.9, 25));
        assert!(close(d, 0.3, 1e-12));
    }

    #[test]
    fn ci_difference_cases() {
        let cfg = CIConfig::default();
        let a = label(5.0, 0.0, 10);
        let i = ci_difference(&a, &a, &cfg);
        assert_eq!((i.lo, i.hi), (0.0, 0.0));
        let (a, b) = (label(5.2, 1.2, 25), label(4.6, 0.9, 25));
        let i = ci_difference(&a, &b, &cfg);
        assert!(close(i.lo, 0.012, 1e-12) && close(i.hi, 1.188, 1e-12));
        assert_eq!(i, ci_difference(&b, &a, &cfg));
    }

    #[test]
    fn ci_difference_lower_bound_not_clamped() {
        let (a, b) = (label(5.0, 2.0, 10), label(4.9, 2.0, 10));
        assert!(ci_difference(&a, &b, &CIConfig::default()).lo < 0.0);
    }

    #[test]
    fn significance_cases() {
        let cfg = CIConfig::default();
        let a = label(4.0, 1.0, 100);
        assert!(!significantly_different(&a, &a, &cfg));
        let b = label(6.0, 1.0, 100);
        let (ia, ib) = (ci_mean(&a, &cfg), ci_mean(&b, &cfg));
        assert!(close(ia.lo, 3.804, 1e-12) && close(ia.hi, 4.196, 1e-12));
        assert!(close(ib.lo, 5.804, 1e-12) && close(ib.hi, 6.196, 1e-12));
        assert!(significantly_different(&a, &b, &cfg));
        assert!(!significantly_different(
            &label(4.9, 2.0, 100),
            &label(5.1, 2.0, 100),
            &cfg
        ));
    }

    #[test]
    fn verdicts() {
        let cfg = CIConfig::default();
        let (a, b) = (label(4.0, 1.0, 100), label(6.0, 1.0, 100));
        assert_eq!(rank_verdict(&a, &b, &cfg), Verdict::BOverA);
        assert_eq!(rank_verdict(&b, &a, &cfg), Verdict::AOverB);
        assert_eq!(rank_verdict(&a, &a, &cfg), Verdict::NotSignificant);
        let zero = CIConfig { z: 0.0 };
        let (c, d) = (label(5.0, 2.0, 10), label(5.001, 2.0, 10));
        assert_eq!(rank_verdict(&c, &d, &cfg), Verdict::NotSignificant);
        assert_eq!(rank_verdict(&c, &d, &zero), Verdict::BOverA);
        assert_eq!(Verdict::AOverB.to_string(), "A≻B");
    }

    #[test]
    fn pcc_cases() {
        let x = [1.0, 2.0, 3.0, 4.5];
        assert!(close(pcc(&x, &x).unwrap(), 1.0, 1e-12));
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 7.0).collect();
        assert!(close(pcc(&x, &y).unwrap(), -1.0, 1e-12));
        assert!(close(pcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap(), 0.9820, 1e-4));
    }

    #[test]
    fn pcc_errors() {
        assert_eq!(
            pcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap_err(),
            StatsError::UndefinedCorrelation
        );
        assert_eq!(
            pcc(&[1.0], &[1.0]).unwrap_err(),
            StatsError::TooFew { needed: 2, got: 1 }
        );
        assert_eq!(pcc(&[1.0, 2.0], &[1.0]).unwrap_err(), StatsError::LengthMismatch(2, 1));
    }

    #[test]
    fn scc_cases() {
        let x = [0.5, 1.0, 2.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.exp() + 3.0).collect();
        assert!(close(scc(&x, &y).unwrap(), 1.0, 1e-12));
        assert!(close(scc(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap(), -0.5, 1e-12));
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
    }

    #[test]
    fn accuracy_cases() {
        let gt = [4.2, 6.1];
        assert_eq!(binary_accuracy(&gt, &gt, 5.0).unwrap(), 1.0);
        assert_eq!(binary_accuracy(&gt, &[4.9, 5.3], 5.0).unwrap(), 1.0);
        assert_eq!(binary_accuracy(&gt, &[5.1, 5.3], 5.0).unwrap(), 0.5);
        // exactly at the cut-off is "not above"
        assert_eq!(binary_accuracy(&[5.0], &[4.0], 5.0).unwrap(), 1.0);
        assert!(binary_accuracy(&[], &[], 5.0).is_err());
    }

    proptest! {
        #[test]
        fn half_width_monotone(sigma in 0.0f64..4.0, extra in 0.0f64..2.0, n in 1u32..500, dn in 0u32..500) {
            let cfg = CIConfig::default();
            let base = ci_half_width(sigma, n, &cfg);
            prop_assert!(ci_half_width(sigma + extra, n, &cfg) >= base);
            prop_assert!(ci_half_width(sigma, n + dn, &cfg) <= base);
            let i = ci_mean(&label(5.0, sigma, n), &cfg);
            prop_assert!((i.half_width() - cfg.z * sigma / (n as f64).sqrt()).abs() < 1e-12);
        }

        #[test]
        fn significance_symmetric(m1 in 1.0f64..10.0, m2 in 1.0f64..10.0, s1 in 0.0f64..3.0, s2 in 0.0f64..3.0, n1 in 1u32..300, n2 in 1u32..300) {
            let cfg = CIConfig::default();
            let (a, b) = (label(m1, s1, n1), label(m2, s2, n2));
            prop_assert_eq!(significantly_different(&a, &b, &cfg), significantly_different(&b, &a, &cfg));
            prop_assert_eq!(sigma_of_difference(&a, &b), sigma_of_difference(&b, &a));
        }

        #[test]
        fn correlations_symmetric_and_bounded(xs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..30)) {
            let (x, y): (Vec<f64>, Vec<f64>) = xs.into_iter().unzip();
            if let (Ok(a), Ok(b)) = (pcc(&x, &y), pcc(&y, &x)) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!(a.abs() <= 1.0 + 1e-12);
            }
            if let (Ok(a), Ok(b)) = (scc(&x, &y), scc(&y, &x)) {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!(a.abs() <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn scc_rank_invariant(xs in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 3..30)) {
            let (x, y): (Vec<f64>, Vec<f64>) = xs.into_iter().unzip();
            let tx: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
            let ty: Vec<f64> = y.iter().map(|v| v.exp()).collect();
            if let Ok(base) = scc(&x, &y) {
                prop_assert!((scc(&tx, &ty).unwrap() - base).abs() < 1e-12);
            }
        }

        #[test]
        fn votes_round_trip(votes in proptest::array::uniform10(0u64..50)) {
            prop_assume!(votes.iter().sum::<u64>() > 0);
            let l = label_from_votes(votes, "p").unwrap();
            // rebuild a histogram consistent with (mu, sigma, n) and re-derive
            let again = label_from_votes(l.votes.unwrap(), "p").unwrap();
            prop_assert!((again.mu - l.mu).abs() < 1e-9);
            prop_assert!((again.sigma - l.sigma).abs() < 1e-9);
            prop_assert!(l.mu >= 1.0 && l.mu <= 10.0);
            prop_assert_eq!(l.n_obs as u64, votes.iter().sum::<u64>());
        }
    }
}
