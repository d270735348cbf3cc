//! Linear meta model generating debiasing parameters from one-hot features.
//!
//! ```text
//! w1(u, i, r[, p]) = exp(φ1 · [x_u ∘ x_i ∘ e_r (∘ e_p)])
//! w2(u, i)         = exp(φ2 · [x_u ∘ x_i ∘ e_O])
//! m(u, i)          = tanh(φ3 · [e_{r or missing} ∘ e_O])
//! ```
//!
//! Because every feature block is one-hot, `w1` factorizes into a product of
//! a user, an item, a label (and a position) weight.

use alloc::vec;
use alloc::vec::Vec;

use crate::data::{Interaction, ObservationIndicator};
use crate::error::{Error, Result};
use crate::framework::DebiasConfig;
use crate::math::{exp, sqrt, tanh};

/// Slot of a label in the label block: 0 for -1, 1 for +1.
#[inline]
pub fn label_slot(r: i8) -> usize {
    usize::from(r > 0)
}

/// Slot in the pseudo-label block: the observed label, or 2 for a missing pair.
#[inline]
pub fn label_or_missing_slot(r: Option<i8>) -> usize {
    r.map_or(2, label_slot)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    n_users: usize,
    n_items: usize,
    n_positions: usize,
    /// `[users | items | label(2) | positions]`
    pub phi1: Vec<f64>,
    /// `[users | items | O(2)]`
    pub phi2: Vec<f64>,
    /// `[label(2) + missing | O(2)]`
    pub phi3: Vec<f64>,
}

/// Features of one `w1` evaluation: up to four active one-hot slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveSlots {
    slots: [usize; 4],
    len: usize,
}

impl ActiveSlots {
    pub fn as_slice(&self) -> &[usize] {
        &self.slots[..self.len]
    }
}

impl MetaModel {
    /// All-zero surrogate parameters (`w1 ≡ w2 ≡ 1`, `m ≡ 0`).
    /// `n_positions > 0` switches on the position block of `w1`.
    pub fn zeros(n_users: usize, n_items: usize, n_positions: usize) -> Self {
        MetaModel {
            n_users,
            n_items,
            n_positions,
            phi1: vec![0.0; n_users + n_items + 2 + n_positions],
            phi2: vec![0.0; n_users + n_items + 2],
            phi3: vec![0.0; 3 + 2],
        }
    }

    /// Rebuilds a model from stored blocks, checking each block length.
    pub fn from_parts(
        n_users: usize,
        n_items: usize,
        n_positions: usize,
        phi1: Vec<f64>,
        phi2: Vec<f64>,
        phi3: Vec<f64>,
    ) -> Result<Self> {
        let shape = Self::zeros(n_users, n_items, n_positions);
        if phi1.len() != shape.phi1.len() || phi2.len() != shape.phi2.len() || phi3.len() != shape.phi3.len() {
            return Err(Error::domain("meta parameter blocks do not match the declared shape"));
        }
        Ok(MetaModel {
            n_users,
            n_items,
            n_positions,
            phi1,
            phi2,
            phi3,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_positions(&self) -> usize {
        self.n_positions
    }

    pub fn list_mode(&self) -> bool {
        self.n_positions > 0
    }

    pub fn is_finite(&self) -> bool {
        self.phi1
            .iter()
            .chain(&self.phi2)
            .chain(&self.phi3)
            .all(|v| v.is_finite())
    }

    /// Active `φ1` slots for a training row. The position slot is used only in list mode.
    #[inline]
    pub fn w1_slots(&self, u: usize, i: usize, r: i8, position: Option<u32>) -> ActiveSlots {
        let mut slots = [u, self.n_users + i, self.n_users + self.n_items + label_slot(r), 0];
        let mut len = 3;
        if let (true, Some(p)) = (self.list_mode(), position) {
            slots[3] = self.n_users + self.n_items + 2 + (p as usize - 1);
            len = 4;
        }
        ActiveSlots { slots, len }
    }

    #[inline]
    pub fn w2_slots(&self, u: usize, i: usize, observed: bool) -> [usize; 3] {
        [u, self.n_users + i, self.n_users + self.n_items + usize::from(observed)]
    }

    #[inline]
    pub fn m_slots(&self, label: Option<i8>, observed: bool) -> [usize; 2] {
        [label_or_missing_slot(label), 3 + usize::from(observed)]
    }

    #[inline]
    pub fn w1(&self, u: usize, i: usize, r: i8, position: Option<u32>) -> f64 {
        let s = self.w1_slots(u, i, r, position);
        exp(s.as_slice().iter().map(|&k| self.phi1[k]).sum())
    }

    #[inline]
    pub fn w2(&self, u: usize, i: usize, observed: bool) -> f64 {
        exp(self.w2_slots(u, i, observed).iter().map(|&k| self.phi2[k]).sum())
    }

    /// Pseudo-label for a pair with observed label `label` (`None` when missing).
    #[inline]
    pub fn m(&self, label: Option<i8>, observed: bool) -> f64 {
        tanh(self.m_slots(label, observed).iter().map(|&k| self.phi3[k]).sum())
    }

    /// `w1` split into its (user, item, label, position) factors; the
    /// position factor is 1 outside list mode.
    pub fn w1_factors(&self, u: usize, i: usize, r: i8, position: Option<u32>) -> [f64; 4] {
        let s = self.w1_slots(u, i, r, position);
        let mut out = [1.0; 4];
        for (o, &k) in out.iter_mut().zip(s.as_slice()) {
            *o = exp(self.phi1[k]);
        }
        out
    }

    pub fn user_factor(&self, u: usize) -> f64 {
        exp(self.phi1[u])
    }

    pub fn item_factor(&self, i: usize) -> f64 {
        exp(self.phi1[self.n_users + i])
    }

    pub fn label_factor(&self, r: i8) -> f64 {
        exp(self.phi1[self.n_users + self.n_items + label_slot(r)])
    }

    /// Learned pseudo-label of observed-positive, missing, and observed-negative pairs.
    pub fn imputation_values(&self) -> [f64; 3] {
        [self.m(Some(1), true), self.m(None, false), self.m(Some(-1), true)]
    }

    /// View as a [`DebiasConfig`] against the training observations.
    pub fn config<'a>(&'a self, obs: &'a ObservationIndicator, pair_term: bool) -> LearnedConfig<'a> {
        LearnedConfig {
            meta: self,
            obs,
            pair_term,
        }
    }
}

/// A [`MetaModel`] evaluated against the training observations.
#[derive(Debug, Clone, Copy)]
pub struct LearnedConfig<'a> {
    pub meta: &'a MetaModel,
    pub obs: &'a ObservationIndicator,
    pub pair_term: bool,
}

impl DebiasConfig for LearnedConfig<'_> {
    #[inline]
    fn w1(&self, _k: usize, x: &Interaction) -> f64 {
        self.meta.w1(x.user, x.item, x.label, x.position)
    }
    #[inline]
    fn w2(&self, u: usize, i: usize) -> f64 {
        self.meta.w2(u, i, self.obs.observed(u, i))
    }
    #[inline]
    fn m(&self, u: usize, i: usize) -> f64 {
        let label = self.obs.label(u, i);
        self.meta.m(label, label.is_some())
    }
    fn has_pair_term(&self) -> bool {
        self.pair_term
    }
}

/// Gradient with respect to the three surrogate blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    pub phi1: Vec<f64>,
    pub phi2: Vec<f64>,
    pub phi3: Vec<f64>,
}

impl MetaGradient {
    pub fn zeros_like(meta: &MetaModel) -> Self {
        MetaGradient {
            phi1: vec![0.0; meta.phi1.len()],
            phi2: vec![0.0; meta.phi2.len()],
            phi3: vec![0.0; meta.phi3.len()],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.phi1.iter().chain(&self.phi2).chain(&self.phi3).all(|g| *g == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.phi1
            .iter()
            .chain(&self.phi2)
            .chain(&self.phi3)
            .all(|g| g.is_finite())
    }
}

/// Adam with the usual defaults (β1 = 0.9, β2 = 0.999, ε = 1e-8).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, f64::from(t));
        let c2 = 1.0 - libm::pow(self.beta2, f64::from(t));
        for k in 0..params.len() {
            let g = grad[k];
            self.first[k] = self.beta1 * self.first[k] + (1.0 - self.beta1) * g;
            self.second[k] = self.beta2 * self.second[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first[k] / c1;
            let v_hat = self.second[k] / c2;
            params[k] -= self.lr * m_hat / (sqrt(v_hat) + self.eps);
        }
    }
}

/// One Adam state per surrogate block.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaOptimizer {
    pub phi1: Adam,
    pub phi2: Adam,
    pub phi3: Adam,
}

impl MetaOptimizer {
    pub fn new(lr: f64, meta: &MetaModel) -> Self {
        MetaOptimizer {
            phi1: Adam::new(lr, meta.phi1.len()),
            phi2: Adam::new(lr, meta.phi2.len()),
            phi3: Adam::new(lr, meta.phi3.len()),
        }
    }
}
