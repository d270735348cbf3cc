//! Small fully-enumerated worlds with explicit training and ideal
//! distributions over (user, item, label), used as exact oracles.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::framework::DebiasConfig;
use crate::loss::LossKind;
use crate::model::FactorModel;
use crate::rng::Rng;

/// The label set, in table order.
pub const LABELS: [i8; 2] = [-1, 1];

#[inline]
fn label_slot(r: i8) -> usize {
    usize::from(r > 0)
}

/// Joint tables `p_T(u, i, r)` (how training data is collected) and
/// `p_U(u, i, r)` (the ideal unbiased distribution).
#[derive(Debug, Clone, PartialEq)]
pub struct WorldDistribution {
    n_users: usize,
    n_items: usize,
    p_t: Vec<f64>,
    p_u: Vec<f64>,
}

impl WorldDistribution {
    /// Tables are indexed `(u * n_items + i) * 2 + slot`, slot 0 for -1 and 1 for +1.
    pub fn new(n_users: usize, n_items: usize, p_t: Vec<f64>, p_u: Vec<f64>) -> Result<Self> {
        let len = n_users * n_items * 2;
        if p_t.len() != len || p_u.len() != len {
            return Err(Error::domain(format!("world tables must have {len} entries")));
        }
        for (name, t) in [("p_T", &p_t), ("p_U", &p_u)] {
            if t.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::domain(format!("{name} has a negative or non-finite entry")));
            }
            let total: f64 = t.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::domain(format!("{name} sums to {total}")));
            }
        }
        Ok(WorldDistribution {
            n_users,
            n_items,
            p_t,
            p_u,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    #[inline]
    fn idx(&self, u: usize, i: usize, r: i8) -> usize {
        (u * self.n_items + i) * 2 + label_slot(r)
    }

    pub fn p_t(&self, u: usize, i: usize, r: i8) -> f64 {
        self.p_t[self.idx(u, i, r)]
    }

    pub fn p_u(&self, u: usize, i: usize, r: i8) -> f64 {
        self.p_u[self.idx(u, i, r)]
    }

    /// `p_T > 0 ∧ p_U > 0`
    pub fn in_s1(&self, u: usize, i: usize, r: i8) -> bool {
        self.p_t(u, i, r) > 0.0 && self.p_u(u, i, r) > 0.0
    }

    /// `p_T = 0 ∧ p_U > 0`
    pub fn in_s0(&self, u: usize, i: usize, r: i8) -> bool {
        self.p_t(u, i, r) == 0.0 && self.p_u(u, i, r) > 0.0
    }

    /// Total `p_U` mass the training distribution never covers.
    pub fn s0_mass(&self) -> f64 {
        self.triples()
            .filter(|&(u, i, r)| self.in_s0(u, i, r))
            .map(|(u, i, r)| self.p_u(u, i, r))
            .sum()
    }

    fn triples(&self) -> impl Iterator<Item = (usize, usize, i8)> + '_ {
        (0..self.n_users).flat_map(move |u| (0..self.n_items).flat_map(move |i| LABELS.iter().map(move |&r| (u, i, r))))
    }

    /// Draws `n` training interactions i.i.d. from `p_T`.
    pub fn sample_train(&self, n: usize, rng: &mut Rng) -> Vec<Interaction> {
        let mut cdf = Vec::with_capacity(self.p_t.len());
        let mut acc = 0.0;
        for p in &self.p_t {
            acc += p;
            cdf.push(acc);
        }
        (0..n)
            .map(|_| {
                let x = rng.random::<f64>() * acc;
                let k = cdf.partition_point(|c| *c <= x).min(cdf.len() - 1);
                let pair = k / 2;
                Interaction::new(pair / self.n_items, pair % self.n_items, LABELS[k % 2])
            })
            .collect()
    }

    /// A random world.
    ///
    /// Each (u, i, r) has `p_U > 0` and is covered by `p_T` with probability
    /// `coverage`. A pair that the training distribution misses entirely keeps
    /// `p_U` mass on a single label, so its unobservable slice carries one
    /// label and the pseudo-label absorbs the expectation exactly. With
    /// `force_s0`, the first pair is made fully unobservable.
    pub fn random(n_users: usize, n_items: usize, coverage: f64, force_s0: bool, rng: &mut Rng) -> Self {
        let n = n_users * n_items;
        let mut p_t = vec![0.0; 2 * n];
        let mut p_u = vec![0.0; 2 * n];
        for pair in 0..n {
            for slot in 0..2 {
                p_u[2 * pair + slot] = rng.random_range(0.05..1.0);
                if rng.random::<f64>() < coverage {
                    p_t[2 * pair + slot] = rng.random_range(0.05..1.0);
                }
            }
            if force_s0 && pair == 0 {
                p_t[0] = 0.0;
                p_t[1] = 0.0;
            }
            if p_t[2 * pair] == 0.0 && p_t[2 * pair + 1] == 0.0 {
                let keep = usize::from(rng.random::<bool>());
                p_u[2 * pair + (1 - keep)] = 0.0;
            }
        }
        if p_t.iter().all(|p| *p == 0.0) {
            p_t[2 * n - 1] = 1.0;
        }
        let normalize = |t: &mut Vec<f64>| {
            let s: f64 = t.iter().sum();
            t.iter_mut().for_each(|p| *p /= s);
        };
        normalize(&mut p_t);
        normalize(&mut p_u);
        WorldDistribution {
            n_users,
            n_items,
            p_t,
            p_u,
        }
    }
}

/// `L(f) = Σ_{u,i,r} p_U(u, i, r) δ(f(u, i), r)` by enumeration.
pub fn true_risk(model: &FactorModel, world: &WorldDistribution, loss: LossKind) -> f64 {
    world
        .triples()
        .map(|(u, i, r)| world.p_u(u, i, r) * loss.value(model.score(u, i), f64::from(r)))
        .sum()
}

/// Expectation of the debiased empirical risk over training sets drawn
/// from `p_T`: `Σ p_T w1 δ(f, r) + Σ_{u,i} w2 δ(f, m)`.
pub fn expected_debiased_risk<C: DebiasConfig + ?Sized>(
    model: &FactorModel,
    world: &WorldDistribution,
    config: &C,
    loss: LossKind,
) -> f64 {
    let mut observed = 0.0;
    for (u, i, r) in world.triples() {
        let p = world.p_t(u, i, r);
        if p > 0.0 {
            let x = Interaction::new(u, i, r);
            observed += p * config.w1(0, &x) * loss.value(model.score(u, i), f64::from(r));
        }
    }
    let mut imputed = 0.0;
    if config.has_pair_term() {
        for u in 0..world.n_users {
            for i in 0..world.n_items {
                let w = config.w2(u, i);
                if w != 0.0 {
                    imputed += w * loss.value(model.score(u, i), config.m(u, i));
                }
            }
        }
    }
    observed + imputed
}

/// The debiasing parameters that make the expected debiased risk equal the
/// true risk: `w1 = p_U / p_T` on the covered support, `w2` the uncovered
/// `p_U` mass of each pair, and `m` the mean label of that uncovered slice.
#[derive(Debug, Clone)]
pub struct OptimalConfig {
    world: WorldDistribution,
    w2: Vec<f64>,
    m: Vec<f64>,
}

pub fn optimal_config(world: &WorldDistribution) -> OptimalConfig {
    let n = world.n_users * world.n_items;
    let mut w2 = vec![0.0; n];
    let mut m = vec![0.0; n];
    for pair in 0..n {
        let (u, i) = (pair / world.n_items, pair % world.n_items);
        let mut mass = 0.0;
        let mut label_mass = 0.0;
        for r in LABELS {
            if world.p_t(u, i, r) == 0.0 {
                let p = world.p_u(u, i, r);
                mass += p;
                label_mass += p * f64::from(r);
            }
        }
        w2[pair] = mass;
        if mass > 0.0 {
            m[pair] = label_mass / mass;
        }
    }
    OptimalConfig {
        world: world.clone(),
        w2,
        m,
    }
}

impl OptimalConfig {
    /// `p_U / p_T`; an error where the training distribution has no mass.
    pub fn weight(&self, u: usize, i: usize, r: i8) -> Result<f64> {
        let pt = self.world.p_t(u, i, r);
        if pt == 0.0 {
            return Err(Error::domain(format!(
                "w1 undefined at ({u}, {i}, {r}): outside the training support"
            )));
        }
        Ok(self.world.p_u(u, i, r) / pt)
    }
}

impl DebiasConfig for OptimalConfig {
    fn w1(&self, _k: usize, x: &Interaction) -> f64 {
        self.weight(x.user, x.item, x.label).unwrap_or(0.0)
    }
    fn w2(&self, u: usize, i: usize) -> f64 {
        self.w2[u * self.world.n_items + i]
    }
    fn m(&self, u: usize, i: usize) -> f64 {
        self.m[u * self.world.n_items + i]
    }
}
