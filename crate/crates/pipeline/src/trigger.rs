//! Deciding when the deployed model is failing to recognise what it sees.

use std::collections::VecDeque;

use incdet_core::geometry::ScoredBox;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriggerPolicy {
    /// An observation is unrecognised when its best detection scores below
    /// this.
    pub unknown_threshold: f64,
    /// Consecutive unrecognised observations needed to ask for learning.
    pub min_observations: usize,
}

impl Default for TriggerPolicy {
    fn default() -> Self {
        TriggerPolicy {
            unknown_threshold: 0.5,
            min_observations: 3,
        }
    }
}

impl TriggerPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.unknown_threshold) {
            return Err(PipelineError::Core(incdet_core::Error::Config(
                "unknown_threshold must be in [0, 1]".into(),
            )));
        }
        if self.min_observations == 0 {
            return Err(PipelineError::Core(incdet_core::Error::Config(
                "min_observations must be at least 1".into(),
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TriggerDecision {
    NoAction,
    /// Best score of each observation in the window that raised it.
    LearningRequest { evidence: Vec<f64> },
}

fn best_score(detections: &[ScoredBox]) -> f64 {
    detections.iter().map(|d| d.score).fold(0.0, f64::max)
}

fn decide(scores: &[f64], policy: &TriggerPolicy) -> TriggerDecision {
    if scores.len() < policy.min_observations {
        return TriggerDecision::NoAction;
    }
    let window = &scores[scores.len() - policy.min_observations..];
    if window.iter().all(|&s| s < policy.unknown_threshold) {
        TriggerDecision::LearningRequest {
            evidence: window.to_vec(),
        }
    } else {
        TriggerDecision::NoAction
    }
}

/// Checks the most recent `min_observations` entries of `window`, each the
/// detections of one observation.
pub fn trigger_check(window: &[Vec<ScoredBox>], policy: &TriggerPolicy) -> TriggerDecision {
    let scores: Vec<f64> = window.iter().map(|d| best_score(d)).collect();
    decide(&scores, policy)
}

/// Sliding window over a stream of observations.
#[derive(Debug, Clone)]
pub struct Trigger {
    policy: TriggerPolicy,
    window: VecDeque<f64>,
}

impl Trigger {
    pub fn new(policy: TriggerPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Trigger {
            window: VecDeque::with_capacity(policy.min_observations),
            policy,
        })
    }

    pub fn observe(&mut self, detections: &[ScoredBox]) -> TriggerDecision {
        if self.window.len() == self.policy.min_observations {
            self.window.pop_front();
        }
        self.window.push_back(best_score(detections));
        decide(self.window.make_contiguous(), &self.policy)
    }

    pub fn reset(&mut self) {
        self.window.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use incdet_core::geometry::BBox;

    fn det(score: f64) -> Vec<ScoredBox> {
        vec![ScoredBox::new(BBox::new(0.0, 0.0, 5.0, 5.0).unwrap(), 0, score)]
    }

    #[test]
    fn confident_detection_needs_nothing() {
        let p = TriggerPolicy {
            unknown_threshold: 0.5,
            min_observations: 1,
        };
        assert_eq!(trigger_check(&[det(0.95)], &p), TriggerDecision::NoAction);
    }

    #[test]
    fn empty_window_requests_learning() {
        let p = TriggerPolicy::default();
        let d = trigger_check(&[vec![], vec![], vec![]], &p);
        assert_eq!(d, TriggerDecision::LearningRequest { evidence: vec![0.0; 3] });
    }

    #[test]
    fn low_scores_over_full_window() {
        let p = TriggerPolicy::default();
        let d = trigger_check(&[det(0.3), det(0.2), det(0.4)], &p);
        assert_eq!(d, TriggerDecision::LearningRequest { evidence: vec![0.3, 0.2, 0.4] });
        assert_eq!(trigger_check(&[det(0.3), det(0.2)], &p), TriggerDecision::NoAction);
    }

    #[test]
    fn streaming_matches_batch() {
        let mut t = Trigger::new(TriggerPolicy::default()).unwrap();
        assert_eq!(t.observe(&det(0.3)), TriggerDecision::NoAction);
        assert_eq!(t.observe(&det(0.9)), TriggerDecision::NoAction);
        assert_eq!(t.observe(&det(0.1)), TriggerDecision::NoAction);
        assert_eq!(t.observe(&det(0.2)), TriggerDecision::NoAction);
        assert!(matches!(t.observe(&[]), TriggerDecision::LearningRequest { .. }));
        t.reset();
        assert_eq!(t.observe(&[]), TriggerDecision::NoAction);
    }
}
