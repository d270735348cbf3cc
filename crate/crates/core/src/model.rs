//! Dot-product matrix factorization and plain mini-batch SGD.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::math::{dot, sqrt};
use crate::rng;

/// Stream tag for the per-epoch shuffle of training examples.
pub(crate) const SHUFFLE_STREAM: u64 = 1;

/// `f(u, i) = <p_u, q_i>`, with no bias terms.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    n_users: usize,
    n_items: usize,
    dim: usize,
    /// row-major `n_users x dim`
    pub(crate) users: Vec<f64>,
    /// row-major `n_items x dim`
    pub(crate) items: Vec<f64>,
}

impl FactorModel {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        assert!(dim >= 1, "factor dimension must be at least 1");
        FactorModel {
            n_users,
            n_items,
            dim,
            users: vec![0.0; n_users * dim],
            items: vec![0.0; n_items * dim],
        }
    }

    /// Factors drawn from `U(-0.01/√d, 0.01/√d)`.
    pub fn init(n_users: usize, n_items: usize, dim: usize, seed: u64) -> Self {
        Self::init_uniform(n_users, n_items, dim, 0.01, seed)
    }

    /// Factors drawn from `U(-scale/√d, scale/√d)`.
    pub fn init_uniform(n_users: usize, n_items: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut m = Self::zeros(n_users, n_items, dim);
        let bound = scale / sqrt(dim as f64);
        let mut rng = rng::stream(seed, 0);
        for v in m.users.iter_mut().chain(m.items.iter_mut()) {
            *v = rng.random_range(-bound..bound);
        }
        m
    }

    pub fn from_factors(n_users: usize, n_items: usize, dim: usize, users: Vec<f64>, items: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::domain("factor dimension must be at least 1"));
        }
        if users.len() != n_users * dim || items.len() != n_items * dim {
            return Err(Error::domain(format!(
                "factor buffers of length {}/{} do not match {n_users}x{dim} and {n_items}x{dim}",
                users.len(),
                items.len()
            )));
        }
        if users.iter().chain(&items).any(|v| !v.is_finite()) {
            return Err(Error::domain("factor entries must be finite"));
        }
        Ok(FactorModel {
            n_users,
            n_items,
            dim,
            users,
            items,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn user_factors(&self) -> &[f64] {
        &self.users
    }

    pub fn item_factors(&self) -> &[f64] {
        &self.items
    }

    #[inline]
    pub fn user_row(&self, u: usize) -> &[f64] {
        &self.users[u * self.dim..(u + 1) * self.dim]
    }

    #[inline]
    pub fn item_row(&self, i: usize) -> &[f64] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub(crate) fn user_row_mut(&mut self, u: usize) -> &mut [f64] {
        &mut self.users[u * self.dim..(u + 1) * self.dim]
    }

    #[inline]
    pub(crate) fn item_row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.items[i * self.dim..(i + 1) * self.dim]
    }

    /// Unchecked score; panics on out-of-range indices.
    #[inline]
    pub fn score(&self, u: usize, i: usize) -> f64 {
        dot(self.user_row(u), self.item_row(i))
    }

    pub fn predict(&self, u: usize, i: usize) -> Result<f64> {
        if u >= self.n_users {
            return Err(Error::OutOfBounds {
                what: "user",
                index: u,
                bound: self.n_users,
            });
        }
        if i >= self.n_items {
            return Err(Error::OutOfBounds {
                what: "item",
                index: i,
                bound: self.n_items,
            });
        }
        Ok(self.score(u, i))
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().chain(&self.items).all(|v| v.is_finite())
    }
}

/// Anything with a user, an item and a real-valued target.
pub trait Example {
    fn user(&self) -> usize;
    fn item(&self) -> usize;
    fn target(&self) -> f64;
}

impl Example for Interaction {
    fn user(&self) -> usize {
        self.user
    }
    fn item(&self) -> usize {
        self.item
    }
    fn target(&self) -> f64 {
        f64::from(self.label)
    }
}

/// A real-valued rating, e.g. a ground-truth preference score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

impl Example for Rating {
    fn user(&self) -> usize {
        self.user
    }
    fn item(&self) -> usize {
        self.item
    }
    fn target(&self) -> f64 {
        self.value
    }
}

/// Mean loss over `data`.
pub fn empirical_risk<E: Example>(model: &FactorModel, data: &[E], loss: LossKind) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("empirical risk of an empty dataset"));
    }
    let mut total = 0.0;
    for x in data {
        total += loss.value(model.predict(x.user(), x.item())?, x.target());
    }
    Ok(total / data.len() as f64)
}

/// Row-sparse gradient accumulator over a [`FactorModel`].
///
/// Rows are applied in first-touch order, which keeps updates deterministic.
#[derive(Debug, Clone)]
pub(crate) struct SparseGrad {
    dim: usize,
    pub(crate) users: Vec<f64>,
    pub(crate) items: Vec<f64>,
    pub(crate) user_touched: Vec<usize>,
    pub(crate) item_touched: Vec<usize>,
    user_flag: Vec<bool>,
    item_flag: Vec<bool>,
}

impl SparseGrad {
    pub(crate) fn new(model: &FactorModel) -> Self {
        SparseGrad {
            dim: model.dim,
            users: vec![0.0; model.users.len()],
            items: vec![0.0; model.items.len()],
            user_touched: Vec::new(),
            item_touched: Vec::new(),
            user_flag: vec![false; model.n_users],
            item_flag: vec![false; model.n_items],
        }
    }

    pub(crate) fn clear(&mut self) {
        let d = self.dim;
        for &u in &self.user_touched {
            self.users[u * d..(u + 1) * d].fill(0.0);
            self.user_flag[u] = false;
        }
        for &i in &self.item_touched {
            self.items[i * d..(i + 1) * d].fill(0.0);
            self.item_flag[i] = false;
        }
        self.user_touched.clear();
        self.item_touched.clear();
    }

    #[inline]
    pub(crate) fn touch(&mut self, u: usize, i: usize) {
        if !self.user_flag[u] {
            self.user_flag[u] = true;
            self.user_touched.push(u);
        }
        if !self.item_flag[i] {
            self.item_flag[i] = true;
            self.item_touched.push(i);
        }
    }

    /// Adds `coef * ∇_θ f(u, i)`.
    #[inline]
    pub(crate) fn add_example(&mut self, model: &FactorModel, u: usize, i: usize, coef: f64) {
        self.touch(u, i);
        let d = self.dim;
        let p = model.user_row(u);
        let q = model.item_row(i);
        for (g, v) in self.users[u * d..(u + 1) * d].iter_mut().zip(q) {
            *g += coef * v;
        }
        for (g, v) in self.items[i * d..(i + 1) * d].iter_mut().zip(p) {
            *g += coef * v;
        }
    }

    /// Adds `weight_decay * row` on every touched row.
    pub(crate) fn add_decay(&mut self, model: &FactorModel, weight_decay: f64) {
        if weight_decay == 0.0 {
            return;
        }
        let d = self.dim;
        for &u in &self.user_touched {
            for (g, v) in self.users[u * d..(u + 1) * d].iter_mut().zip(model.user_row(u)) {
                *g += weight_decay * v;
            }
        }
        for &i in &self.item_touched {
            for (g, v) in self.items[i * d..(i + 1) * d].iter_mut().zip(model.item_row(i)) {
                *g += weight_decay * v;
            }
        }
    }

    pub(crate) fn user_grad(&self, u: usize) -> &[f64] {
        &self.users[u * self.dim..(u + 1) * self.dim]
    }

    pub(crate) fn item_grad(&self, i: usize) -> &[f64] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn is_user_touched(&self, u: usize) -> bool {
        self.user_flag[u]
    }

    pub(crate) fn is_item_touched(&self, i: usize) -> bool {
        self.item_flag[i]
    }

    /// `θ ← θ - lr * g` on touched rows.
    pub(crate) fn apply(&self, model: &mut FactorModel, lr: f64) {
        let d = self.dim;
        for &u in &self.user_touched {
            for (v, g) in model.user_row_mut(u).iter_mut().zip(&self.users[u * d..(u + 1) * d]) {
                *v -= lr * g;
            }
        }
        for &i in &self.item_touched {
            for (v, g) in model.item_row_mut(i).iter_mut().zip(&self.items[i * d..(i + 1) * d]) {
                *v -= lr * g;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub loss: LossKind,
    pub lr: f64,
    /// L2 penalty on the rows a batch touches.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::domain("learning rate and weight decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub model: FactorModel,
    /// Mean per-example training loss of each epoch, measured before each step.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD on the mean loss plus the touched-row L2 penalty.
pub fn sgd_fit<E: Example>(model: FactorModel, data: &[E], cfg: &SgdConfig) -> Result<FitResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("cannot fit on an empty dataset"));
    }
    for x in data {
        model.predict(x.user(), x.item())?;
    }
    let mut model = model;
    let mut grad = SparseGrad::new(&model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, SHUFFLE_STREAM);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.clear();
            let b = batch.len() as f64;
            for &k in batch {
                let x = &data[k];
                let (u, i, y) = (x.user(), x.item(), x.target());
                let f = model.score(u, i);
                total += cfg.loss.value(f, y);
                let w = 1.0;
                grad.add_example(&model, u, i, w * cfg.loss.d_pred(f, y) / b);
            }
            grad.add_decay(&model, cfg.weight_decay);
            grad.apply(&mut model, cfg.lr);
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("training loss {mean}"),
            });
        }
        epoch_losses.push(mean);
    }
    Ok(FitResult { model, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_model_scores_zero() {
        let m = FactorModel::zeros(3, 4, 2);
        for u in 0..3 {
            for i in 0..4 {
                assert_eq!(m.predict(u, i).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn scalar_factors_multiply() {
        let m = FactorModel::from_factors(1, 1, 1, vec![2.0], vec![3.0]).unwrap();
        assert_eq!(m.predict(0, 0).unwrap(), 6.0);
    }

    #[test]
    fn predict_checks_bounds() {
        let m = FactorModel::zeros(2, 2, 1);
        assert!(matches!(m.predict(2, 0), Err(Error::OutOfBounds { what: "user", .. })));
        assert!(matches!(m.predict(0, 5), Err(Error::OutOfBounds { what: "item", .. })));
    }

    #[test]
    fn init_is_small_and_seeded() {
        let a = FactorModel::init(5, 7, 4, 11);
        let b = FactorModel::init(5, 7, 4, 11);
        assert_eq!(a, b);
        assert!(a.users.iter().chain(&a.items).all(|v| v.abs() <= 0.005));
        assert_ne!(a, FactorModel::init(5, 7, 4, 12));
    }

    #[test]
    fn risk_cases() {
        let perfect = FactorModel::from_factors(1, 1, 1, vec![1.0], vec![1.0]).unwrap();
        let data = [Interaction::new(0, 0, 1)];
        assert_eq!(empirical_risk(&perfect, &data, LossKind::Squared).unwrap(), 0.0);
        let zero = FactorModel::zeros(1, 1, 1);
        assert_eq!(empirical_risk(&zero, &data, LossKind::Squared).unwrap(), 1.0);
        let empty: [Interaction; 0] = [];
        assert!(empirical_risk(&zero, &empty, LossKind::Squared).is_err());
    }

    proptest! {
        #[test]
        fn risk_matches_naive_loop(
            seed in any::<u64>(),
            rows in proptest::collection::vec((0usize..4, 0usize..5, any::<bool>()), 1..40),
        ) {
            let m = FactorModel::init(4, 5, 3, seed);
            let m = FactorModel::from_factors(4, 5, 3,
                m.users.iter().map(|v| v * 300.0).collect(),
                m.items.iter().map(|v| v * 300.0).collect()).unwrap();
            let data: Vec<_> = rows.iter().map(|&(u, i, p)| Interaction::new(u, i, if p { 1 } else { -1 })).collect();
            for loss in [LossKind::Squared, LossKind::Logistic] {
                let mut naive = 0.0;
                for x in &data {
                    let mut f = 0.0;
                    for c in 0..3 {
                        f += m.users[x.user * 3 + c] * m.items[x.item * 3 + c];
                    }
                    naive += loss.value(f, x.target());
                }
                naive /= data.len() as f64;
                let got = empirical_risk(&m, &data, loss).unwrap();
                prop_assert!((got - naive).abs() <= 1e-12 * naive.abs().max(1.0));
            }
        }
    }

    fn rank_one_data() -> (Vec<Rating>, [f64; 4], [f64; 4]) {
        let a = [1.0, -0.5, 0.8, 0.3];
        let b = [0.7, 1.2, -0.9, 0.4];
        let mut data = Vec::new();
        for (u, au) in a.iter().enumerate() {
            for (i, bi) in b.iter().enumerate() {
                data.push(Rating {
                    user: u,
                    item: i,
                    value: au * bi,
                });
            }
        }
        (data, a, b)
    }

    #[test]
    fn recovers_noiseless_rank_one_matrix() {
        let (data, _, _) = rank_one_data();
        let cfg = SgdConfig {
            loss: LossKind::Squared,
            lr: 0.05,
            weight_decay: 0.0,
            epochs: 500,
            batch_size: 4,
            seed: 5,
        };
        let fit = sgd_fit(FactorModel::init(4, 4, 1, 3), &data, &cfg).unwrap();
        let mse = empirical_risk(&fit.model, &data, LossKind::Squared).unwrap();
        assert!(sqrt(mse) < 1e-2, "rmse {}", sqrt(mse));
    }

    #[test]
    fn loss_decreases_early_on_separable_data() {
        let data: Vec<_> = (0..6)
            .flat_map(|u| (0..6).map(move |i| Interaction::new(u, i, if (u + i) % 2 == 0 { 1 } else { -1 })))
            .collect();
        let init = FactorModel::from_factors(
            6,
            6,
            2,
            (0..12).map(|k| 0.1 * ((k * 7 % 5) as f64 - 2.0)).collect(),
            (0..12).map(|k| 0.1 * ((k * 3 % 5) as f64 - 2.0)).collect(),
        )
        .unwrap();
        let cfg = SgdConfig {
            loss: LossKind::Logistic,
            lr: 0.5,
            weight_decay: 0.0,
            epochs: 5,
            batch_size: 6,
            seed: 1,
        };
        let fit = sgd_fit(init, &data, &cfg).unwrap();
        assert!(
            fit.epoch_losses.windows(2).all(|w| w[1] < w[0]),
            "{:?}",
            fit.epoch_losses
        );
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (data, _, _) = rank_one_data();
        let init = FactorModel::init(4, 4, 3, 9);
        let cfg = SgdConfig {
            loss: LossKind::Squared,
            lr: 0.0,
            weight_decay: 0.1,
            epochs: 3,
            batch_size: 5,
            seed: 2,
        };
        let fit = sgd_fit(init.clone(), &data, &cfg).unwrap();
        assert_eq!(fit.model, init);
    }

    #[test]
    fn identical_seeds_give_identical_models() {
        let (data, _, _) = rank_one_data();
        let cfg = SgdConfig {
            loss: LossKind::Squared,
            lr: 0.1,
            weight_decay: 0.01,
            epochs: 20,
            batch_size: 3,
            seed: 7,
        };
        let a = sgd_fit(FactorModel::init(4, 4, 2, 1), &data, &cfg).unwrap();
        let b = sgd_fit(FactorModel::init(4, 4, 2, 1), &data, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_names_epoch() {
        let (data, _, _) = rank_one_data();
        let cfg = SgdConfig {
            loss: LossKind::Squared,
            lr: 1e6,
            weight_decay: 0.0,
            epochs: 50,
            batch_size: 16,
            seed: 0,
        };
        let init = FactorModel::from_factors(4, 4, 1, vec![1.0; 4], vec![1.0; 4]).unwrap();
        assert!(matches!(sgd_fit(init, &data, &cfg), Err(Error::Diverged { .. })));
    }
}
