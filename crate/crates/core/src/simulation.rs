//! Synthetic list-feedback dataset with both selection and position bias.
//!
//! Ground-truth preferences come from a low-rank latent model. Each user's
//! items are split into an unbiased reserve and a biased pool; a warm model
//! fitted on a few pool items ranks the pool, and clicks on its top-k list
//! follow `min(r / (2 sqrt(p)), 1)` at position `p`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{split_unbiased, DatasetBundle, FeedbackKind, Interaction};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::math::{dot, sigmoid, sqrt};
use crate::model::{sgd_fit, FactorModel, Rating, SgdConfig};
use crate::rng;

const TRUTH_STREAM: u64 = 10;
const SPLIT_STREAM: u64 = 11;
const WARM_STREAM: u64 = 12;
const CLICK_STREAM: u64 = 13;
const RESERVE_STREAM: u64 = 14;

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// Items per user held out as unbiased feedback.
    pub reserve: usize,
    /// Items per user available to the biased recommender.
    pub pool: usize,
    /// Pool items per user used to fit the warm model.
    pub warm_items: usize,
    pub list_len: usize,
    /// Latent dimension of the ground truth and the warm model.
    pub latent_dim: usize,
    /// Mean of the user latent entries.
    pub user_latent_mean: f64,
    /// Mean of the item latent entries. With a nonzero user mean, item means
    /// add item main effects; opposite signs lower the positive rate.
    pub item_latent_mean: f64,
    pub warm_epochs: usize,
    pub warm_lr: f64,
    /// Half-width scale of the warm model's uniform initialization.
    pub warm_init_scale: f64,
    /// Fractions of the reserve going to uniform, validation and test.
    pub reserve_split: [f64; 3],
    pub seed: u64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            n_users: 500,
            n_items: 500,
            reserve: 150,
            pool: 350,
            warm_items: 25,
            list_len: 25,
            latent_dim: 10,
            user_latent_mean: 0.0,
            item_latent_mean: 0.0,
            warm_epochs: 50,
            warm_lr: 0.5,
            warm_init_scale: 1.0,
            reserve_split: [0.05, 0.05, 0.90],
            seed: 0,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.latent_dim == 0 {
            return Err(Error::domain("simulation sizes must be positive"));
        }
        if self.reserve == 0 || self.pool == 0 || self.warm_items == 0 || self.list_len == 0 {
            return Err(Error::domain("reserve, pool, warm and list sizes must be positive"));
        }
        if self.reserve + self.pool != self.n_items {
            return Err(Error::domain("reserve and pool must partition the items"));
        }
        if !(self.warm_lr > 0.0) || !(self.warm_init_scale >= 0.0) {
            return Err(Error::domain(
                "warm model needs a positive rate and a nonnegative init scale",
            ));
        }
        if self.warm_items > self.pool || self.list_len > self.pool {
            return Err(Error::domain("warm items and list length cannot exceed the pool"));
        }
        Ok(())
    }
}

/// A generated bundle together with the ground-truth preferences behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub bundle: DatasetBundle,
    /// `r_ui` in `[0, 1]`, row-major over users.
    pub truth: Vec<f64>,
}

impl Simulation {
    pub fn truth(&self, u: usize, i: usize) -> f64 {
        self.truth[u * self.bundle.n_items + i]
    }
}

/// Click probability at 1-based list position `position`.
pub fn click_probability(r: f64, position: u32) -> f64 {
    debug_assert!(position >= 1);
    (r / (2.0 * sqrt(f64::from(position)))).min(1.0)
}

/// Label of a reserve item: `+1` above the midpoint.
pub fn threshold_label(r: f64) -> i8 {
    if r > 0.5 {
        1
    } else {
        -1
    }
}

/// Low-rank preferences: `sigmoid(<a_u, b_i> / sqrt(d))` with latents drawn
/// from `N(mean[0], 1)` for users and `N(mean[1], 1)` for items, min-max
/// normalized over the whole matrix.
pub fn ground_truth(n_users: usize, n_items: usize, dim: usize, mean: [f64; 2], seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, TRUTH_STREAM);
    let mut draw = |n: usize, mean: f64| -> Vec<f64> {
        (0..n * dim)
            .map(|_| mean + Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect()
    };
    let a = draw(n_users, mean[0]);
    let b = draw(n_items, mean[1]);
    let scale = 1.0 / sqrt(dim as f64);
    let mut r = Vec::with_capacity(n_users * n_items);
    for u in 0..n_users {
        for i in 0..n_items {
            r.push(sigmoid(
                scale * dot(&a[u * dim..(u + 1) * dim], &b[i * dim..(i + 1) * dim]),
            ));
        }
    }
    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in &mut r {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
    }
    r
}

/// Top-`k` items of `candidates` by descending score, ties by item index.
fn top_k(model: &FactorModel, u: usize, candidates: &[usize], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates.iter().map(|&i| (model.score(u, i), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, i)| i).collect()
}

pub fn generate_simulation(spec: &SimulationSpec) -> Result<Simulation> {
    spec.validate()?;
    let (nu, ni) = (spec.n_users, spec.n_items);
    let truth = ground_truth(
        nu,
        ni,
        spec.latent_dim,
        [spec.user_latent_mean, spec.item_latent_mean],
        spec.seed,
    );

    let mut split_rng = rng::stream(spec.seed, SPLIT_STREAM);
    let mut reserve_rows = Vec::with_capacity(nu * spec.reserve);
    let mut pools: Vec<Vec<usize>> = Vec::with_capacity(nu);
    let mut warm = Vec::with_capacity(nu * spec.warm_items);
    for u in 0..nu {
        let perm = index::sample(&mut split_rng, ni, ni).into_vec();
        let (reserve, pool) = perm.split_at(spec.reserve);
        let mut reserve = reserve.to_vec();
        reserve.sort_unstable();
        for &i in &reserve {
            reserve_rows.push(Interaction::new(u, i, threshold_label(truth[u * ni + i])));
        }
        let mut pool = pool.to_vec();
        pool.sort_unstable();
        for k in index::sample(&mut split_rng, pool.len(), spec.warm_items) {
            let i = pool[k];
            warm.push(Rating {
                user: u,
                item: i,
                value: truth[u * ni + i],
            });
        }
        pools.push(pool);
    }

    let warm_cfg = SgdConfig {
        loss: LossKind::Squared,
        lr: spec.warm_lr,
        weight_decay: 0.0,
        epochs: spec.warm_epochs,
        batch_size: 64,
        seed: rng::derive_seed(spec.seed, WARM_STREAM),
    };
    let init = FactorModel::init_uniform(
        nu,
        ni,
        spec.latent_dim,
        spec.warm_init_scale,
        rng::derive_seed(spec.seed, WARM_STREAM),
    );
    let warm_model = sgd_fit(init, &warm, &warm_cfg)?.model;

    let mut click_rng = rng::stream(spec.seed, CLICK_STREAM);
    let mut train = Vec::with_capacity(nu * spec.list_len);
    for (u, pool) in pools.iter().enumerate() {
        for (p, i) in top_k(&warm_model, u, pool, spec.list_len).into_iter().enumerate() {
            let position = p as u32 + 1;
            let clicked = click_rng.random::<f64>() < click_probability(truth[u * ni + i], position);
            train.push(Interaction::new(u, i, if clicked { 1 } else { -1 }).at_position(position));
        }
    }

    let (uniform, validation, test) = split_unbiased(
        &reserve_rows,
        spec.reserve_split,
        rng::derive_seed(spec.seed, RESERVE_STREAM),
    )?;
    let bundle =
        DatasetBundle::with_identity_ids(train, uniform, validation, test, nu, ni, FeedbackKind::List, spec.seed);
    Ok(Simulation { bundle, truth })
}

/// Empirical click frequency per position over `trials` resampled lists with
/// fixed preferences; used to check the click rule.
pub fn resample_clicks(prefs: &[f64], trials: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, CLICK_STREAM);
    let mut hits = vec![0usize; prefs.len()];
    for _ in 0..trials {
        for (p, (&r, h)) in prefs.iter().zip(&mut hits).enumerate() {
            if rng.random::<f64>() < click_probability(r, p as u32 + 1) {
                *h += 1;
            }
        }
    }
    hits.into_iter().map(|h| h as f64 / trials as f64).collect()
}
