//! Acquisition scores over metric distributions and next-deployment choice.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::metric::MetricDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AcquisitionKind {
    #[serde(rename = "EI")]
    ExpectedImprovement,
    #[serde(rename = "PI")]
    ProbabilityOfImprovement,
    #[serde(rename = "UCB")]
    UpperConfidenceBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub kind: AcquisitionKind,
    pub beta: f64,
    pub xi: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            kind: AcquisitionKind::ExpectedImprovement,
            beta: 2.0,
            xi: 0.0,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !(self.xi >= 0.0) {
            return Err(Error::Config("acquisition beta and xi must be >= 0".into()));
        }
        Ok(())
    }
}

/// Incumbent for improvement-based scores: the best metric recorded so far.
pub fn incumbent(recorded: &[f64]) -> f64 {
    recorded.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("valid parameters")
}

pub fn score(cfg: &AcquisitionConfig, dist: &MetricDistribution, incumbent: f64) -> Result<f64> {
    let target = incumbent + cfg.xi;
    match dist {
        MetricDistribution::Gaussian { mean, variance } => {
            if !(*variance >= 0.0) {
                return Err(Error::InvalidArgument(format!("negative variance {variance}")));
            }
            let sd = variance.sqrt();
            Ok(match cfg.kind {
                AcquisitionKind::UpperConfidenceBound => mean + cfg.beta * sd,
                _ if sd == 0.0 => match cfg.kind {
                    AcquisitionKind::ExpectedImprovement => (mean - target).max(0.0),
                    _ => {
                        if *mean > target {
                            1.0
                        } else {
                            0.0
                        }
                    }
                },
                AcquisitionKind::ExpectedImprovement => {
                    let z = (mean - target) / sd;
                    let n = standard_normal();
                    (mean - target) * n.cdf(z) + sd * n.pdf(z)
                }
                AcquisitionKind::ProbabilityOfImprovement => standard_normal().cdf((mean - target) / sd),
            })
        }
        MetricDistribution::Samples { samples, .. } => {
            if samples.is_empty() {
                return Err(Error::Empty("metric samples"));
            }
            let n = samples.len() as f64;
            Ok(match cfg.kind {
                AcquisitionKind::ExpectedImprovement => samples.iter().map(|s| (s - target).max(0.0)).sum::<f64>() / n,
                AcquisitionKind::ProbabilityOfImprovement => samples.iter().filter(|s| **s > target).count() as f64 / n,
                AcquisitionKind::UpperConfidenceBound => dist.mean() + cfg.beta * dist.std(),
            })
        }
    }
}

/// Highest-scoring candidate not yet deployed; ties go to the lowest index.
pub fn select_next(scores: &[f64], deployed: &[usize]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if deployed.contains(&i) {
            continue;
        }
        let s = if s.is_nan() { f64::NEG_INFINITY } else { s };
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::AllDeployed)
}
