//! The reweight-and-impute empirical risk and the fixed strategies it subsumes.
//!
//! ```text
//! L(f | w1, w2, m) = 1/|D_T| Σ_k w1_k δ(f(u_k, i_k), r_k) + Σ_{u,i} w2_ui δ(f(u, i), m_ui)
//! ```
//!
//! The second sum runs over every user-item pair. [`debiased_risk`] estimates
//! it from a pair sample scaled by `|U||I| / |sample|`, which is exact when the
//! sample is the full enumeration.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::data::{Interaction, ObservationIndicator};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::FactorModel;
use crate::rng::Rng;

/// Debiasing parameters, evaluated lazily per example and per pair.
pub trait DebiasConfig {
    /// Weight of the `k`-th training example `x`.
    fn w1(&self, k: usize, x: &Interaction) -> f64;
    /// Weight of the imputation term for pair `(user, item)`.
    fn w2(&self, user: usize, item: usize) -> f64;
    /// Pseudo-label of pair `(user, item)`.
    fn m(&self, user: usize, item: usize) -> f64;

    /// `false` when `w2 ≡ 0`, so the pair sum can be skipped.
    fn has_pair_term(&self) -> bool {
        true
    }

    /// Set by fixed strategies whose recovered weights can be negative
    /// (doubly robust, IPS variant).
    fn allows_negative_weights(&self) -> bool {
        false
    }

    /// Checks that the config can weight every row of `train`.
    fn check(&self, _train: &[Interaction]) -> Result<()> {
        Ok(())
    }
}

/// How an imputed "negative" is written for a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelConvention {
    /// Labels in {-1, +1}.
    #[default]
    PlusMinus,
    /// Labels in {0, 1}.
    ZeroOne,
}

impl LabelConvention {
    pub fn negative(self) -> f64 {
        match self {
            LabelConvention::PlusMinus => -1.0,
            LabelConvention::ZeroOne => 0.0,
        }
    }
}

/// A value per (user, item) pair.
#[derive(Debug, Clone, PartialEq)]
pub enum PairTable {
    Constant(f64),
    Dense {
        n_items: usize,
        values: Vec<f64>,
    },
    /// One value per item, shared by every user.
    PerItem(Vec<f64>),
}

impl PairTable {
    #[inline]
    pub fn get(&self, user: usize, item: usize) -> f64 {
        match self {
            PairTable::Constant(v) => *v,
            PairTable::Dense { n_items, values } => values[user * n_items + item],
            PairTable::PerItem(values) => values[item],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Propensities {
    Constant(f64),
    /// One observation probability per observed label.
    PerLabel {
        positive: f64,
        negative: f64,
    },
    PerPair(PairTable),
}

/// Observation probabilities `q(u, i)`, all in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityTable {
    values: Propensities,
    pub method: String,
    /// Number of rows the estimate was computed from (train, uniform).
    pub counts: (usize, usize),
}

impl PropensityTable {
    pub fn new(values: Propensities, method: impl Into<String>, counts: (usize, usize)) -> Result<Self> {
        let ok = |q: f64| q > 0.0 && q <= 1.0;
        let valid = match &values {
            Propensities::Constant(q) => ok(*q),
            Propensities::PerLabel { positive, negative } => ok(*positive) && ok(*negative),
            Propensities::PerPair(PairTable::Constant(q)) => ok(*q),
            Propensities::PerPair(PairTable::Dense { values, .. } | PairTable::PerItem(values)) => {
                values.iter().all(|q| ok(*q))
            }
        };
        if !valid {
            return Err(Error::domain("propensities must lie in (0, 1]"));
        }
        Ok(PropensityTable {
            values,
            method: method.into(),
            counts,
        })
    }

    pub fn constant(q: f64) -> Result<Self> {
        Self::new(Propensities::Constant(q), "constant", (0, 0))
    }

    pub fn values(&self) -> &Propensities {
        &self.values
    }

    /// `q(u, i)` for a pair whose observed label is `label`.
    #[inline]
    pub fn q(&self, user: usize, item: usize, label: i8) -> f64 {
        match &self.values {
            Propensities::Constant(q) => *q,
            Propensities::PerLabel { positive, negative } => {
                if label > 0 {
                    *positive
                } else {
                    *negative
                }
            }
            Propensities::PerPair(t) => t.get(user, item),
        }
    }
}

/// Every pair of the `n_users x n_items` grid, user-major.
pub fn all_pairs(n_users: usize, n_items: usize) -> Vec<(usize, usize)> {
    (0..n_users).flat_map(|u| (0..n_items).map(move |i| (u, i))).collect()
}

/// Pair set for the imputation sum: the full grid when it has at most
/// `max_exact` pairs, otherwise `sample_size` uniform draws with replacement.
pub fn pair_sample(
    n_users: usize,
    n_items: usize,
    max_exact: usize,
    sample_size: usize,
    rng: &mut Rng,
) -> Vec<(usize, usize)> {
    if n_users * n_items <= max_exact {
        all_pairs(n_users, n_items)
    } else {
        (0..sample_size)
            .map(|_| (rng.random_range(0..n_users), rng.random_range(0..n_items)))
            .collect()
    }
}

fn check_weight(what: &'static str, value: f64, allow_negative: bool) -> Result<()> {
    if !value.is_finite() || (!allow_negative && value < 0.0) {
        return Err(Error::InvalidWeight { what, value });
    }
    Ok(())
}

/// Reweighted training risk plus the scaled imputation term over `pairs`.
pub fn debiased_risk<C: DebiasConfig + ?Sized>(
    model: &FactorModel,
    train: &[Interaction],
    pairs: &[(usize, usize)],
    config: &C,
    loss: LossKind,
) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::domain("debiased risk of an empty training set"));
    }
    config.check(train)?;
    let neg = config.allows_negative_weights();
    let mut observed = 0.0;
    for (k, x) in train.iter().enumerate() {
        let w = config.w1(k, x);
        check_weight("w1", w, neg)?;
        observed += w * loss.value(model.predict(x.user, x.item)?, x.target());
    }
    let mut risk = observed / train.len() as f64;
    if config.has_pair_term() {
        if pairs.is_empty() {
            return Err(Error::domain("imputation term needs a nonempty pair sample"));
        }
        let scale = (model.n_users() * model.n_items()) as f64 / pairs.len() as f64;
        let mut imputed = 0.0;
        for &(u, i) in pairs {
            let w = config.w2(u, i);
            check_weight("w2", w, neg)?;
            if w != 0.0 {
                imputed += w * loss.value(model.predict(u, i)?, config.m(u, i));
            }
        }
        risk += scale * imputed;
    }
    Ok(risk)
}

/// `S_{w1} = Σ_k w1_k²`.
pub fn weight_mean_square<C: DebiasConfig + ?Sized>(config: &C, train: &[Interaction]) -> f64 {
    train
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let w = config.w1(k, x);
            w * w
        })
        .sum()
}

/// `w1 ≡ 1`, no imputation: the plain empirical risk.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unweighted;

impl DebiasConfig for Unweighted {
    fn w1(&self, _k: usize, _x: &Interaction) -> f64 {
        1.0
    }
    fn w2(&self, _u: usize, _i: usize) -> f64 {
        0.0
    }
    fn m(&self, _u: usize, _i: usize) -> f64 {
        0.0
    }
    fn has_pair_term(&self) -> bool {
        false
    }
}

/// Grid dimensions shared by the normalized providers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_train: usize,
    pub n_users: usize,
    pub n_items: usize,
}

impl Dims {
    fn pairs(&self) -> f64 {
        (self.n_users * self.n_items) as f64
    }
}

/// Inverse propensity scoring: `w1 = |D_T| / (q |U||I|)`.
#[derive(Debug, Clone)]
pub struct IpsConfig {
    q: PropensityTable,
    dims: Dims,
}

pub fn config_ips(q: PropensityTable, dims: Dims) -> IpsConfig {
    IpsConfig { q, dims }
}

impl DebiasConfig for IpsConfig {
    fn w1(&self, _k: usize, x: &Interaction) -> f64 {
        self.dims.n_train as f64 / (self.q.q(x.user, x.item, x.label) * self.dims.pairs())
    }
    fn w2(&self, _u: usize, _i: usize) -> f64 {
        0.0
    }
    fn m(&self, _u: usize, _i: usize) -> f64 {
        0.0
    }
    fn has_pair_term(&self) -> bool {
        false
    }
}

/// Constant-label imputation: `w1 = |D_T|/(|U||I|)`, `w2 = λ/(|U||I|)`.
#[derive(Debug, Clone)]
pub struct ImputationConfig {
    lambda: f64,
    m_value: f64,
    dims: Dims,
}

pub fn config_imputation(lambda: f64, m_value: f64, dims: Dims) -> Result<ImputationConfig> {
    if !(lambda >= 0.0) || !(-1.0..=1.0).contains(&m_value) {
        return Err(Error::domain("imputation needs lambda >= 0 and m in [-1, 1]"));
    }
    Ok(ImputationConfig { lambda, m_value, dims })
}

impl DebiasConfig for ImputationConfig {
    fn w1(&self, _k: usize, _x: &Interaction) -> f64 {
        self.dims.n_train as f64 / self.dims.pairs()
    }
    fn w2(&self, _u: usize, _i: usize) -> f64 {
        self.lambda / self.dims.pairs()
    }
    fn m(&self, _u: usize, _i: usize) -> f64 {
        self.m_value
    }
    fn has_pair_term(&self) -> bool {
        self.lambda != 0.0
    }
}

/// Doubly robust: IPS on observed rows, imputation everywhere, with the
/// imputed error of observed pairs subtracted through a negative `w2`.
#[derive(Debug, Clone)]
pub struct DoublyRobustConfig {
    q: PropensityTable,
    obs: ObservationIndicator,
    m_table: PairTable,
    dims: Dims,
}

pub fn config_doubly_robust(
    q: PropensityTable,
    obs: ObservationIndicator,
    m_table: PairTable,
    dims: Dims,
) -> DoublyRobustConfig {
    DoublyRobustConfig { q, obs, m_table, dims }
}

impl DebiasConfig for DoublyRobustConfig {
    fn w1(&self, _k: usize, x: &Interaction) -> f64 {
        self.dims.n_train as f64 / (self.q.q(x.user, x.item, x.label) * self.dims.pairs())
    }
    fn w2(&self, u: usize, i: usize) -> f64 {
        let n = self.dims.pairs();
        match self.obs.label(u, i) {
            Some(r) => 1.0 / n - 1.0 / (self.q.q(u, i, r) * n),
            None => 1.0 / n,
        }
    }
    fn m(&self, u: usize, i: usize) -> f64 {
        self.m_table.get(u, i)
    }
    fn allows_negative_weights(&self) -> bool {
        true
    }
}

/// Negative weighting for implicit feedback: unobserved pairs are imputed
/// negative with exposure weight `a`.
#[derive(Debug, Clone)]
pub struct NegativeWeightingConfig {
    a: PairTable,
    obs: ObservationIndicator,
    negative: f64,
}

pub fn config_negative_weighting(
    a: PairTable,
    obs: ObservationIndicator,
    convention: LabelConvention,
) -> NegativeWeightingConfig {
    NegativeWeightingConfig {
        a,
        obs,
        negative: convention.negative(),
    }
}

impl DebiasConfig for NegativeWeightingConfig {
    fn w1(&self, _k: usize, _x: &Interaction) -> f64 {
        1.0
    }
    fn w2(&self, u: usize, i: usize) -> f64 {
        if self.obs.observed(u, i) {
            0.0
        } else {
            self.a.get(u, i)
        }
    }
    fn m(&self, _u: usize, _i: usize) -> f64 {
        self.negative
    }
}

/// IPS variant for implicit feedback: IPS on observed rows plus a negative
/// imputation weighted by `1 - O/q`.
#[derive(Debug, Clone)]
pub struct IpsVariantConfig {
    q: PropensityTable,
    obs: ObservationIndicator,
    dims: Dims,
    negative: f64,
}

pub fn config_ips_variant(
    q: PropensityTable,
    obs: ObservationIndicator,
    dims: Dims,
    convention: LabelConvention,
) -> IpsVariantConfig {
    IpsVariantConfig {
        q,
        obs,
        dims,
        negative: convention.negative(),
    }
}

impl DebiasConfig for IpsVariantConfig {
    fn w1(&self, _k: usize, x: &Interaction) -> f64 {
        self.dims.n_train as f64 / (self.q.q(x.user, x.item, x.label) * self.dims.pairs())
    }
    fn w2(&self, u: usize, i: usize) -> f64 {
        let n = self.dims.pairs();
        match self.obs.label(u, i) {
            Some(r) => 1.0 / n - 1.0 / (self.q.q(u, i, r) * n),
            None => 1.0 / n,
        }
    }
    fn m(&self, _u: usize, _i: usize) -> f64 {
        self.negative
    }
    fn allows_negative_weights(&self) -> bool {
        true
    }
}

/// Position-aware IPS: `w1 = 1 / q_t` for list position `t`.
#[derive(Debug, Clone)]
pub struct PositionIpsConfig {
    /// `q_t` at index `t - 1`.
    q_t: Vec<f64>,
}

pub fn config_position_ips(q_t: Vec<f64>) -> Result<PositionIpsConfig> {
    if q_t.is_empty() || q_t.iter().any(|q| !(*q > 0.0 && *q <= 1.0)) {
        return Err(Error::domain("position propensities must lie in (0, 1]"));
    }
    Ok(PositionIpsConfig { q_t })
}

impl PositionIpsConfig {
    pub fn propensities(&self) -> &[f64] {
        &self.q_t
    }
}

impl DebiasConfig for PositionIpsConfig {
    fn w1(&self, _k: usize, x: &Interaction) -> f64 {
        let t = x.position.expect("position IPS needs positioned rows") as usize;
        1.0 / self.q_t[t - 1]
    }
    fn w2(&self, _u: usize, _i: usize) -> f64 {
        0.0
    }
    fn m(&self, _u: usize, _i: usize) -> f64 {
        0.0
    }
    fn has_pair_term(&self) -> bool {
        false
    }
    fn check(&self, train: &[Interaction]) -> Result<()> {
        for x in train {
            match x.position {
                Some(t) if t >= 1 && (t as usize) <= self.q_t.len() => {}
                Some(t) => {
                    return Err(Error::OutOfBounds {
                        what: "position",
                        index: t as usize,
                        bound: self.q_t.len() + 1,
                    })
                }
                None => return Err(Error::precondition("position IPS needs list positions on every row")),
            }
        }
        Ok(())
    }
}

/// Conformity offset: each observed pair is imputed with the blend
/// `α r + (1 - α) b` of its observed label and the bias term, with weight
/// `count / |D_T|`. The observed-row term is switched off (`w1 ≡ 0`).
#[derive(Debug, Clone)]
pub struct ConformityOffsetConfig {
    n_train: usize,
    // (user, item) -> (count, blended label sum)
    blended: BTreeMap<(usize, usize), (usize, f64)>,
}

pub fn config_conformity_offset(alpha: f64, b: &PairTable, train: &[Interaction]) -> Result<ConformityOffsetConfig> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain(format!("conformity alpha {alpha} outside [0, 1]")));
    }
    let mut blended = BTreeMap::new();
    for x in train {
        let bias = b.get(x.user, x.item);
        if !(-1.0..=1.0).contains(&bias) {
            return Err(Error::domain(format!("bias term {bias} outside [-1, 1]")));
        }
        let e = blended.entry((x.user, x.item)).or_insert((0usize, 0.0));
        e.0 += 1;
        e.1 += alpha * x.target() + (1.0 - alpha) * bias;
    }
    Ok(ConformityOffsetConfig {
        n_train: train.len(),
        blended,
    })
}

impl DebiasConfig for ConformityOffsetConfig {
    fn w1(&self, _k: usize, _x: &Interaction) -> f64 {
        0.0
    }
    fn w2(&self, u: usize, i: usize) -> f64 {
        self.blended
            .get(&(u, i))
            .map_or(0.0, |&(c, _)| c as f64 / self.n_train as f64)
    }
    fn m(&self, u: usize, i: usize) -> f64 {
        self.blended.get(&(u, i)).map_or(0.0, |&(c, s)| s / c as f64)
    }
}

/// Naive-Bayes propensities that depend only on the observed label:
/// `q(r) = P(r | O=1) P(O=1) / P(r)`, with `P(r | O=1)` from the training
/// labels and `P(r)` from the uniform labels.
pub fn estimate_propensity_naive_bayes(
    train: &[Interaction],
    uniform: &[Interaction],
    n_users: usize,
    n_items: usize,
) -> Result<PropensityTable> {
    if train.is_empty() || uniform.is_empty() {
        return Err(Error::Estimation(
            "naive Bayes needs nonempty train and uniform data".into(),
        ));
    }
    let positives = |s: &[Interaction]| s.iter().filter(|x| x.label > 0).count();
    let (tp, up) = (positives(train), positives(uniform));
    let (tn, un) = (train.len() - tp, uniform.len() - up);
    if up == 0 || un == 0 {
        return Err(Error::Estimation("uniform data lacks one of the labels".into()));
    }
    if tp == 0 || tn == 0 {
        return Err(Error::Estimation("training data lacks one of the labels".into()));
    }
    let p_obs = train.len() as f64 / (n_users * n_items) as f64;
    let q = |t: usize, u: usize| {
        let p_r_obs = t as f64 / train.len() as f64;
        let p_r = u as f64 / uniform.len() as f64;
        (p_r_obs * p_obs / p_r).min(1.0)
    };
    PropensityTable::new(
        Propensities::PerLabel {
            positive: q(tp, up),
            negative: q(tn, un),
        },
        "naive_bayes",
        (train.len(), uniform.len()),
    )
}

/// Item-popularity propensities `q_i = (n_i / max_j n_j)^power`, floored at
/// `floor` so items never observed keep a finite weight.
pub fn estimate_propensity_popularity(
    train: &[Interaction],
    n_items: usize,
    power: f64,
    floor: f64,
) -> Result<PropensityTable> {
    if train.is_empty() {
        return Err(Error::Estimation("popularity propensities need training rows".into()));
    }
    if !(power > 0.0) || !(floor > 0.0 && floor <= 1.0) {
        return Err(Error::domain(
            "popularity propensities need power > 0 and floor in (0, 1]",
        ));
    }
    let mut counts = alloc::vec![0usize; n_items];
    for x in train {
        if x.item >= n_items {
            return Err(Error::OutOfBounds {
                what: "item",
                index: x.item,
                bound: n_items,
            });
        }
        counts[x.item] += 1;
    }
    let max = *counts.iter().max().unwrap_or(&1) as f64;
    let values = counts
        .iter()
        .map(|&c| crate::math::pow(c as f64 / max, power).max(floor))
        .collect();
    PropensityTable::new(
        Propensities::PerPair(PairTable::PerItem(values)),
        "popularity",
        (train.len(), 0),
    )
}

/// Position propensities `q_t = CTR_t / CTR_1` from positioned training rows,
/// clamped to `[floor, 1]`. `CTR_t` is the share of positive rows at `t`.
pub fn estimate_position_propensity(train: &[Interaction], n_positions: usize, floor: f64) -> Result<Vec<f64>> {
    if n_positions == 0 || !(floor > 0.0 && floor <= 1.0) {
        return Err(Error::domain(
            "position propensities need positions and floor in (0, 1]",
        ));
    }
    let mut shown = alloc::vec![0usize; n_positions];
    let mut clicked = alloc::vec![0usize; n_positions];
    for x in train {
        let t = x
            .position
            .ok_or_else(|| Error::precondition("position propensities need list positions on every row"))?
            as usize;
        if t == 0 || t > n_positions {
            return Err(Error::OutOfBounds {
                what: "position",
                index: t,
                bound: n_positions + 1,
            });
        }
        shown[t - 1] += 1;
        clicked[t - 1] += usize::from(x.label > 0);
    }
    let ctr = |t: usize| {
        if shown[t] == 0 {
            0.0
        } else {
            clicked[t] as f64 / shown[t] as f64
        }
    };
    let top = ctr(0);
    if top <= 0.0 {
        return Err(Error::Estimation("no clicks at the top position".into()));
    }
    Ok((0..n_positions).map(|t| (ctr(t) / top).clamp(floor, 1.0)).collect())
}
