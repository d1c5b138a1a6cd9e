//! Scoring and the presentation-attack metric suite.
//!
//! Metrics take anything implementing [`Labeled`]. A higher score means
//! "more real", and a sample is classified real when `score ≥ threshold`.

use crate::error::{Error, Result};
use crate::store::Label;
use crate::vector::{self, Prob};

/// A scored sample with its ground-truth label.
pub trait Labeled {
    fn score(&self) -> f64;
    fn label(&self) -> Label;
}

impl Labeled for (f64, Label) {
    fn score(&self) -> f64 {
        self.0
    }

    fn label(&self) -> Label {
        self.1
    }
}

/// One test sample after inference.
///
/// `log_odds` is `(cos(f, e_r) − cos(f, e_s)) / τ`, the logit of `p_real`.
/// Metrics rank on it because `p_real` rounds to exactly 1.0 once the logit
/// exceeds ~37, which would collapse distinct samples into ties.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    pub p_real: Prob,
    pub log_odds: f64,
    pub label: Label,
    pub attack_type: Option<String>,
}

impl Labeled for ScoredSample {
    fn score(&self) -> f64 {
        self.log_odds
    }

    fn label(&self) -> Label {
        self.label
    }
}

/// Log-odds of the real class against the overall spoof embedding.
pub fn real_log_odds(f_v: &[f64], e_r: &[f64], e_s: &[f64], tau: f64) -> Result<f64> {
    vector::check_tau(tau)?;
    let s_r = vector::cosine_similarity(f_v, e_r)?;
    let s_s = vector::cosine_similarity(f_v, e_s)?;
    Ok((s_r - s_s) / tau)
}

/// Softmax probability of the real class over `{real, spoof}`.
pub fn predict_real_probability(f_v: &[f64], e_r: &[f64], e_s: &[f64], tau: f64) -> Result<Prob> {
    let s_r = vector::cosine_similarity(f_v, e_r)?;
    let s_s = vector::cosine_similarity(f_v, e_s)?;
    Ok(vector::softmax_probs(&[s_r, s_s], tau)?[0])
}

/// Real iff `p_real ≥ threshold`.
pub fn classify(p_real: Prob, threshold: f64) -> Label {
    if p_real.value() >= threshold {
        Label::Real
    } else {
        Label::Spoof
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

fn class_counts<S: Labeled>(samples: &[S]) -> Result<(usize, usize)> {
    let reals = samples.iter().filter(|s| s.label() == Label::Real).count();
    let spoofs = samples.len() - reals;
    if reals == 0 {
        return Err(Error::MissingClass("real"));
    }
    if spoofs == 0 {
        return Err(Error::MissingClass("spoof"));
    }
    Ok((reals, spoofs))
}

/// APCER, BPCER and their mean at a score threshold.
pub fn error_rates<S: Labeled>(samples: &[S], threshold: f64) -> Result<ErrorRates> {
    let (reals, spoofs) = class_counts(samples)?;
    let mut accepted_spoofs = 0usize;
    let mut rejected_reals = 0usize;
    for s in samples {
        let accepted = s.score() >= threshold;
        match (s.label(), accepted) {
            (Label::Spoof, true) => accepted_spoofs += 1,
            (Label::Real, false) => rejected_reals += 1,
            _ => {}
        }
    }
    let apcer = accepted_spoofs as f64 / spoofs as f64;
    let bpcer = rejected_reals as f64 / reals as f64;
    Ok(ErrorRates {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
    })
}

/// Exact ROC AUC: the probability that a random real sample outscores a
/// random spoof sample, ties counting one half. Computed from mid-ranks.
pub fn auc<S: Labeled>(samples: &[S]) -> Result<f64> {
    let (reals, spoofs) = class_counts(samples)?;
    let mut sorted: Vec<(f64, Label)> = samples.iter().map(|s| (s.score(), s.label())).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Sum of 1-based mid-ranks of the real samples, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share the mid-rank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u128;
        let tied_reals = sorted[i..=j].iter().filter(|s| s.1 == Label::Real).count() as u128;
        twice_rank_sum += twice_mid * tied_reals;
        i = j + 1;
    }
    let r = reals as u128;
    // U = rank_sum − R(R+1)/2, all doubled.
    let twice_u = twice_rank_sum - r * (r + 1);
    Ok(twice_u as f64 / (2.0 * reals as f64 * spoofs as f64))
}

/// How the decision threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    /// A fixed score threshold.
    Fixed(f64),
    /// The equal-error-rate threshold found on the scored samples.
    Eer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    /// Mean of APCER and BPCER at the EER threshold.
    pub eer: f64,
    pub eer_threshold: f64,
    /// Threshold selected by the policy.
    pub threshold: f64,
    /// Half total error rate at the policy threshold.
    pub hter: f64,
    pub rates: ErrorRates,
}

/// Candidate thresholds: `-∞`, midpoints of consecutive distinct sorted
/// scores, and `+∞`.
pub fn candidate_thresholds<S: Labeled>(samples: &[S]) -> Vec<f64> {
    let mut scores: Vec<f64> = samples.iter().map(Labeled::score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut out = Vec::with_capacity(scores.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(scores.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(f64::INFINITY);
    out
}

/// Threshold minimizing `|APCER − BPCER|` over [`candidate_thresholds`]. Ties
/// go to the lower mean error, then the lower threshold.
pub fn eer_threshold<S: Labeled>(samples: &[S]) -> Result<(f64, ErrorRates)> {
    let (reals, spoofs) = class_counts(samples)?;
    let mut sorted: Vec<(f64, Label)> = samples.iter().map(|s| (s.score(), s.label())).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let rates = |rejected_reals: usize, rejected_spoofs: usize| {
        let apcer = (spoofs - rejected_spoofs) as f64 / spoofs as f64;
        let bpcer = rejected_reals as f64 / reals as f64;
        ErrorRates {
            apcer,
            bpcer,
            acer: (apcer + bpcer) / 2.0,
        }
    };

    // Sweep upward: at each candidate every sample below it is rejected.
    let mut best = (f64::NEG_INFINITY, rates(0, 0));
    let mut rejected_reals = 0;
    let mut rejected_spoofs = 0;
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            match sorted[i].1 {
                Label::Real => rejected_reals += 1,
                Label::Spoof => rejected_spoofs += 1,
            }
            i += 1;
        }
        let threshold = match sorted.get(i) {
            Some(next) => score + (next.0 - score) / 2.0,
            None => f64::INFINITY,
        };
        let r = rates(rejected_reals, rejected_spoofs);
        let gap = (r.apcer - r.bpcer).abs();
        let best_gap = (best.1.apcer - best.1.bpcer).abs();
        if gap < best_gap || (gap == best_gap && r.acer < best.1.acer) {
            best = (threshold, r);
        }
    }
    Ok(best)
}

/// EER plus the HTER at the threshold chosen by `policy`.
pub fn eer_and_hter<S: Labeled>(samples: &[S], policy: ThresholdPolicy) -> Result<EerResult> {
    let (eer_threshold, eer_rates) = eer_threshold(samples)?;
    let (threshold, rates) = match policy {
        ThresholdPolicy::Eer => (eer_threshold, eer_rates),
        ThresholdPolicy::Fixed(t) => (t, error_rates(samples, t)?),
    };
    Ok(EerResult {
        eer: eer_rates.acer,
        eer_threshold,
        threshold,
        hter: rates.acer,
        rates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(reals: &[f64], spoofs: &[f64]) -> Vec<(f64, Label)> {
        reals
            .iter()
            .map(|&s| (s, Label::Real))
            .chain(spoofs.iter().map(|&s| (s, Label::Spoof)))
            .collect()
    }

    #[test]
    fn probability_examples() {
        let f = [1.0, 0.0];
        let p = predict_real_probability(&f, &[0.6, 0.8], &[0.6, -0.8], 0.01).unwrap();
        assert!((p.value() - 0.5).abs() < 1e-15);
        // sims (1, −1), τ = 1.
        let p = predict_real_probability(&f, &[1.0, 0.0], &[-1.0, 0.0], 1.0).unwrap();
        assert!((p.value() - 0.880_797_1).abs() < 1e-7);
        let lo = real_log_odds(&f, &[1.0, 0.0], &[-1.0, 0.0], 1.0).unwrap();
        assert!((vector::sigmoid(lo) - p.value()).abs() < 1e-15);
    }

    #[test]
    fn probability_is_monotone_in_real_similarity() {
        let f = [1.0, 0.0];
        let e_s = [0.2, 0.98];
        let mut last = -1.0;
        for k in 0..50 {
            let angle = std::f64::consts::PI * (1.0 - k as f64 / 49.0);
            let e_r = [angle.cos(), angle.sin()];
            let p = predict_real_probability(&f, &e_r, &e_s, 0.3).unwrap().value();
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn classify_edges() {
        assert_eq!(classify(Prob::new(0.0).unwrap(), 0.0), Label::Real);
        assert_eq!(classify(Prob::new(1.0).unwrap(), 1.0), Label::Real);
        assert_eq!(classify(Prob::new(0.49).unwrap(), 0.5), Label::Spoof);
    }

    #[test]
    fn error_rate_examples() {
        let perfect = samples(&[0.9, 0.8], &[0.1, 0.2]);
        let r = error_rates(&perfect, 0.5).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (0.0, 0.0, 0.0));

        let mixed = samples(&[0.8, 0.4], &[0.2, 0.6]);
        let r = error_rates(&mixed, 0.5).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (0.5, 0.5, 0.5));

        let r = error_rates(&mixed, 0.0).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (1.0, 0.0, 0.5));

        assert!(matches!(
            error_rates(&samples(&[0.5], &[]), 0.5),
            Err(Error::MissingClass("spoof"))
        ));
        assert!(matches!(
            error_rates(&samples(&[], &[0.5]), 0.5),
            Err(Error::MissingClass("real"))
        ));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&samples(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
        assert_eq!(auc(&samples(&[0.1, 0.2], &[0.9, 0.8])).unwrap(), 0.0);
        assert_eq!(auc(&samples(&[0.9, 0.4], &[0.6, 0.1])).unwrap(), 0.75);
        assert_eq!(auc(&samples(&[0.5, 0.5], &[0.5])).unwrap(), 0.5);
        assert!(auc(&samples(&[0.5], &[])).is_err());
    }

    #[test]
    fn candidates_are_midpoints_plus_infinities() {
        let c = candidate_thresholds(&samples(&[0.9, 0.4], &[0.6, 0.1, 0.6]));
        assert_eq!(c.len(), 5);
        assert_eq!(c[0], f64::NEG_INFINITY);
        assert!((c[1] - 0.25).abs() < 1e-15);
        assert!((c[2] - 0.5).abs() < 1e-15);
        assert!((c[3] - 0.75).abs() < 1e-15);
        assert_eq!(c[4], f64::INFINITY);
    }

    #[test]
    fn eer_perfect_separation() {
        let s = samples(&[0.9, 0.8, 0.7], &[0.1, 0.2]);
        let r = eer_and_hter(&s, ThresholdPolicy::Eer).unwrap();
        assert_eq!(r.eer, 0.0);
        assert_eq!(r.hter, 0.0);
        assert!(r.threshold > 0.2 && r.threshold < 0.7);
    }

    #[test]
    fn eer_matches_enumeration() {
        let s = samples(&[0.9, 0.4], &[0.6, 0.1]);
        let r = eer_and_hter(&s, ThresholdPolicy::Eer).unwrap();
        let mut best: Option<(f64, ErrorRates)> = None;
        for t in candidate_thresholds(&s) {
            let e = error_rates(&s, t).unwrap();
            let better = match &best {
                None => true,
                Some((_, b)) => (e.apcer - e.bpcer).abs() < (b.apcer - b.bpcer).abs(),
            };
            if better {
                best = Some((t, e));
            }
        }
        let (t, e) = best.unwrap();
        assert_eq!(r.threshold, t);
        assert_eq!(r.hter, e.acer);
        assert!((r.hter - r.eer).abs() < 1e-15);
    }

    #[test]
    fn fixed_policy_reports_hter_at_that_threshold() {
        let s = samples(&[0.9, 0.4], &[0.6, 0.1]);
        let r = eer_and_hter(&s, ThresholdPolicy::Fixed(0.75)).unwrap();
        assert_eq!(r.threshold, 0.75);
        assert_eq!(r.hter, 0.25);
        assert_eq!(r.eer, 0.5);
    }
}
