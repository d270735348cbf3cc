//! Pointwise losses `δ(prediction, label)` and the partial derivatives the
//! base step and the hypergradient need.

use crate::math::{sigmoid, softplus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `(f - y)^2`
    Squared,
    /// `log(1 + exp(-y f))`
    Logistic,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Squared => "squared",
            LossKind::Logistic => "logistic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "squared" => Some(LossKind::Squared),
            "logistic" => Some(LossKind::Logistic),
            _ => None,
        }
    }

    #[inline]
    pub fn value(self, pred: f64, label: f64) -> f64 {
        match self {
            LossKind::Squared => {
                let e = pred - label;
                e * e
            }
            LossKind::Logistic => softplus(-label * pred),
        }
    }

    /// ∂δ/∂f
    #[inline]
    pub fn d_pred(self, pred: f64, label: f64) -> f64 {
        match self {
            LossKind::Squared => 2.0 * (pred - label),
            LossKind::Logistic => -label * sigmoid(-label * pred),
        }
    }

    /// ∂δ/∂y
    #[inline]
    pub fn d_label(self, pred: f64, label: f64) -> f64 {
        match self {
            LossKind::Squared => -2.0 * (pred - label),
            LossKind::Logistic => -pred * sigmoid(-label * pred),
        }
    }

    /// ∂²δ/∂f²
    #[inline]
    pub fn d2_pred(self, pred: f64, label: f64) -> f64 {
        match self {
            LossKind::Squared => 2.0,
            LossKind::Logistic => {
                let s = sigmoid(-label * pred);
                label * label * s * (1.0 - s)
            }
        }
    }

    /// ∂²δ/∂f∂y, the mixed partial that carries pseudo-label gradients.
    #[inline]
    pub fn d2_pred_label(self, pred: f64, label: f64) -> f64 {
        match self {
            LossKind::Squared => -2.0,
            LossKind::Logistic => {
                let s = sigmoid(-label * pred);
                -s + label * pred * s * (1.0 - s)
            }
        }
    }
}
