//! Training objectives and the gradients they place on network outputs.
//!
//! | Objective | Head | Output gradient |
//! |-----------|------|-----------------|
//! | [`ce`] cross-entropy | logits | `p − onehot(y)` |
//! | [`triplet`] margin hinge on squared distances | embedding | hinge subgradient |
//! | [`prototype`] distance cross-entropy + center loss | embedding | embeddings and prototypes |
//! | [`ap`] one-vs-all 1 − AP | logits | error-driven ranking update |
//!
//! Batch losses are means over examples (or triplets), except the AP loss,
//! which sums the per-class losses.

pub mod ap;
pub mod ce;
pub mod prototype;
pub mod triplet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ap::{ap_brute_force, ap_loss, smoothed_step, ApLoss};
pub use ce::{ce_batch, ce_loss};
pub use prototype::{center_loss, dce_loss, prototype_total, PrototypeBank, PrototypeLoss};
pub use triplet::{mine_triplets, triplet_batch, triplet_loss, Mining, Selection, Triplet};

/// Triplet margin used throughout unless overridden.
pub const DEFAULT_MARGIN: f64 = 1.0;
/// Half-width of the piecewise-linear rank step.
pub const DEFAULT_AP_DELTA: f64 = 1.0;

/// Which kind of network head an objective consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadFamily {
    Logits,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveConfig {
    CrossEntropy,
    Triplet { margin: f64, mining: Mining },
    Prototype { lambda: f64, tau: f64 },
    AveragePrecision { delta: f64 },
}

impl ObjectiveConfig {
    pub fn tag(&self) -> ObjectiveTag {
        match self {
            ObjectiveConfig::CrossEntropy => ObjectiveTag::CrossEntropy,
            ObjectiveConfig::Triplet { .. } => ObjectiveTag::Triplet,
            ObjectiveConfig::Prototype { .. } => ObjectiveTag::Prototype,
            ObjectiveConfig::AveragePrecision { .. } => ObjectiveTag::AveragePrecision,
        }
    }

    pub fn head_family(&self) -> HeadFamily {
        match self {
            ObjectiveConfig::CrossEntropy | ObjectiveConfig::AveragePrecision { .. } => HeadFamily::Logits,
            ObjectiveConfig::Triplet { .. } | ObjectiveConfig::Prototype { .. } => HeadFamily::Embedding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match *self {
            ObjectiveConfig::CrossEntropy => Ok(()),
            ObjectiveConfig::Triplet { margin, .. } if !(margin >= 0.0) || !margin.is_finite() => {
                bad(format!("triplet margin must be finite and >= 0, got {margin}"))
            }
            ObjectiveConfig::Prototype { lambda, .. } if !(lambda >= 0.0) || !lambda.is_finite() => {
                bad(format!("prototype lambda must be finite and >= 0, got {lambda}"))
            }
            ObjectiveConfig::Prototype { tau, .. } if !(tau > 0.0) || !tau.is_finite() => {
                bad(format!("prototype tau must be finite and > 0, got {tau}"))
            }
            ObjectiveConfig::AveragePrecision { delta } if !(delta > 0.0) || !delta.is_finite() => {
                bad(format!("AP delta must be finite and > 0, got {delta}"))
            }
            _ => Ok(()),
        }
    }
}

/// Objective identity without hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveTag {
    #[serde(rename = "ap")]
    AveragePrecision,
    #[serde(rename = "ce")]
    CrossEntropy,
    Prototype,
    Triplet,
}

impl ObjectiveTag {
    pub const ALL: [ObjectiveTag; 4] = [
        ObjectiveTag::AveragePrecision,
        ObjectiveTag::CrossEntropy,
        ObjectiveTag::Prototype,
        ObjectiveTag::Triplet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveTag::AveragePrecision => "ap",
            ObjectiveTag::CrossEntropy => "ce",
            ObjectiveTag::Prototype => "prototype",
            ObjectiveTag::Triplet => "triplet",
        }
    }

    /// Row label used in reports.
    pub fn display_name(self) -> &'static str {
        match self {
            ObjectiveTag::AveragePrecision => "AP Loss",
            ObjectiveTag::CrossEntropy => "Cross-Entropy Loss",
            ObjectiveTag::Prototype => "Prototype Loss",
            ObjectiveTag::Triplet => "Triplet Loss",
        }
    }
}

impl std::fmt::Display for ObjectiveTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ObjectiveTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ap" | "average_precision" => Ok(ObjectiveTag::AveragePrecision),
            "ce" | "cross_entropy" => Ok(ObjectiveTag::CrossEntropy),
            "prototype" => Ok(ObjectiveTag::Prototype),
            "triplet" => Ok(ObjectiveTag::Triplet),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyperparameter_ranges() {
        assert!(ObjectiveConfig::Prototype { lambda: -1.0, tau: 1.0 }.validate().is_err());
        assert!(ObjectiveConfig::Prototype { lambda: 0.0, tau: 0.0 }.validate().is_err());
        assert!(ObjectiveConfig::AveragePrecision { delta: 0.0 }.validate().is_err());
        assert!(ObjectiveConfig::Triplet { margin: f64::NAN, mining: Mining::Random }.validate().is_err());
        assert!(ObjectiveConfig::Prototype { lambda: 0.0, tau: 0.1 }.validate().is_ok());
    }

    #[test]
    fn head_families() {
        assert_eq!(ObjectiveConfig::CrossEntropy.head_family(), HeadFamily::Logits);
        assert_eq!(ObjectiveConfig::AveragePrecision { delta: 1.0 }.head_family(), HeadFamily::Logits);
        assert_eq!(
            ObjectiveConfig::Triplet { margin: 1.0, mining: Mining::SemiHard }.head_family(),
            HeadFamily::Embedding
        );
    }
}
