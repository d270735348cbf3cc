//! Bi-level training of the base model and the meta model.
//!
//! Each iteration runs three steps:
//!
//! 1. an assumed step `θ' = θ - η1 ∇_θ L_T(θ | φ)` on a training batch and a
//!    pair batch;
//! 2. a meta step on `φ` along `∇_φ L_U(θ'(φ))`, the uniform-batch loss of the
//!    assumed model, differentiated through the assumed step;
//! 3. the actual step on `θ` with the refreshed `φ`.
//!
//! The batch risk is
//!
//! ```text
//! L_T = 1/|B_T| Σ_k w1_k δ(f_k, r_k) + s Σ_p w2_p δ(f_p, m_p) + decay
//! ```
//!
//! with `s = 1/|B_P|` for learned parameters. Since `θ'` is linear in the
//! per-example coefficients `c_k = w1_k δ'(f_k, r_k) / |B_T|`, the chain rule
//! collapses to one scalar per example:
//!
//! ```text
//! ∂L_U/∂φ = -η1 Σ_k (∂c_k/∂φ) <∇_θ f_k, g_U>,     g_U = ∇_θ' L_U(θ')
//! ```
//!
//! where `∂c_k/∂φ1 = c_k x_k` (exponential link), likewise for `φ2` through
//! the pair coefficients, and the pair coefficients reach `φ3` through
//! `∂²δ/∂f∂m` and `tanh' = 1 - m²`.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::{DatasetBundle, Interaction, ObservationIndicator};
use crate::error::{Error, Result};
use crate::framework::DebiasConfig;
use crate::loss::LossKind;
use crate::math::dot;
use crate::meta::{LearnedConfig, MetaGradient, MetaModel, MetaOptimizer};
use crate::metrics;
use crate::model::{FactorModel, SparseGrad, SHUFFLE_STREAM};
use crate::rng;

const PAIR_STREAM: u64 = 2;
const UNIFORM_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub dim: usize,
    /// Base factors start from `U(-init_scale/√d, init_scale/√d)`.
    pub init_scale: f64,
    /// η1, the base-model SGD rate (assumed and actual steps).
    pub base_lr: f64,
    /// η2, the Adam rate for the meta model.
    pub meta_lr: f64,
    /// L2 penalty on base-model rows touched by a step.
    pub weight_decay: f64,
    pub train_batch: usize,
    pub pair_batch: usize,
    pub uniform_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Cutoff of the validation NDCG used to pick the best epoch.
    pub eval_k: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            dim: 10,
            init_scale: 0.01,
            base_lr: 0.01,
            meta_lr: 0.001,
            weight_decay: 0.001,
            train_batch: 512,
            pair_batch: 512,
            uniform_batch: 512,
            epochs: 50,
            seed: 0,
            loss: LossKind::Logistic,
            eval_k: 5,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.meta_lr > 0.0) {
            return Err(Error::domain("learning rates must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::domain("weight decay must be nonnegative"));
        }
        if self.dim == 0 || self.train_batch == 0 || self.pair_batch == 0 || self.uniform_batch == 0 {
            return Err(Error::domain("dimension and batch sizes must be positive"));
        }
        if !(self.init_scale >= 0.0) || !self.init_scale.is_finite() {
            return Err(Error::domain("init scale must be finite and nonnegative"));
        }
        if self.eval_k == 0 {
            return Err(Error::domain("evaluation cutoff must be positive"));
        }
        Ok(())
    }

    /// The base model every training run starts from.
    pub fn init_model(&self, n_users: usize, n_items: usize) -> FactorModel {
        FactorModel::init_uniform(
            n_users,
            n_items,
            self.dim,
            self.init_scale,
            rng::derive_seed(self.seed, INIT_STREAM),
        )
    }

    fn step_params(&self, pair_term: bool) -> StepParams {
        StepParams {
            lr: self.base_lr,
            weight_decay: self.weight_decay,
            loss: self.loss,
            pair_term,
        }
    }
}

/// Which surrogate blocks learn, and whether the imputation term exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LearnMask {
    pub phi1: bool,
    pub phi2: bool,
    pub phi3: bool,
    pub pair_term: bool,
}

impl LearnMask {
    pub const FROZEN: LearnMask = LearnMask {
        phi1: false,
        phi2: false,
        phi3: false,
        pair_term: false,
    };

    pub fn learns(&self) -> bool {
        self.phi1 || self.phi2 || self.phi3
    }
}

/// Ablations of the learned configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Learns `w1`, `w2` and `m`.
    Full,
    /// Learns `w1` and `m`; `w2` stays at its initial constant.
    W1M,
    /// Learns `w1` only; no imputation term.
    W1,
}

impl Variant {
    pub fn mask(self) -> LearnMask {
        match self {
            Variant::Full => LearnMask {
                phi1: true,
                phi2: true,
                phi3: true,
                pair_term: true,
            },
            Variant::W1M => LearnMask {
                phi1: true,
                phi2: false,
                phi3: true,
                pair_term: true,
            },
            Variant::W1 => LearnMask {
                phi1: true,
                phi2: false,
                phi3: false,
                pair_term: false,
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::W1M => "w1m",
            Variant::W1 => "w1",
        }
    }
}

/// Settings of a single base step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub pair_term: bool,
}

/// The three batches of one iteration.
#[derive(Debug, Clone, Copy)]
pub struct MetaBatch<'a> {
    pub train: &'a [Interaction],
    pub pairs: &'a [(usize, usize)],
    pub uniform: &'a [Interaction],
}

/// Reusable gradient buffers.
#[derive(Debug, Clone)]
pub struct Workspace {
    base: SparseGrad,
    uniform: SparseGrad,
}

impl Workspace {
    pub fn new(model: &FactorModel) -> Self {
        Workspace {
            base: SparseGrad::new(model),
            uniform: SparseGrad::new(model),
        }
    }
}

/// Accumulates `∇_θ L_T` of the batch into `grad`; returns the batch risk
/// without the decay term.
fn accumulate_base_grad<C: DebiasConfig + ?Sized>(
    grad: &mut SparseGrad,
    model: &FactorModel,
    config: &C,
    train: &[(usize, Interaction)],
    pairs: &[(usize, usize)],
    pair_scale: f64,
    params: &StepParams,
) -> f64 {
    grad.clear();
    let loss = params.loss;
    let b = train.len() as f64;
    let mut observed = 0.0;
    for (k, x) in train {
        let f = model.score(x.user, x.item);
        let y = x.target();
        let w = config.w1(*k, x);
        observed += w * loss.value(f, y);
        grad.add_example(model, x.user, x.item, w * loss.d_pred(f, y) / b);
    }
    let mut imputed = 0.0;
    if params.pair_term {
        for &(u, i) in pairs {
            let w = config.w2(u, i);
            if w == 0.0 {
                continue;
            }
            let m = config.m(u, i);
            let f = model.score(u, i);
            imputed += w * loss.value(f, m);
            grad.add_example(model, u, i, w * loss.d_pred(f, m) * pair_scale);
        }
    }
    grad.add_decay(model, params.weight_decay);
    observed / b + pair_scale * imputed
}

fn pair_scale_learned(pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        0.0
    } else {
        1.0 / pairs.len() as f64
    }
}

fn indexed(train: &[Interaction]) -> Vec<(usize, Interaction)> {
    train.iter().copied().enumerate().collect()
}

fn check_batch(model: &FactorModel, meta: &MetaModel, batch: &MetaBatch<'_>) -> Result<()> {
    if batch.train.is_empty() {
        return Err(Error::domain("training batch is empty"));
    }
    let (nu, ni) = (model.n_users(), model.n_items());
    if meta.n_users() != nu || meta.n_items() != ni {
        return Err(Error::domain("meta model and base model disagree on dimensions"));
    }
    for x in batch.train.iter().chain(batch.uniform) {
        x.validate(nu, ni)?;
        if let (true, Some(p)) = (meta.list_mode(), x.position) {
            if p as usize > meta.n_positions() {
                return Err(Error::OutOfBounds {
                    what: "position",
                    index: p as usize,
                    bound: meta.n_positions() + 1,
                });
            }
        }
    }
    for &(u, i) in batch.pairs {
        model.predict(u, i)?;
    }
    Ok(())
}

/// The assumed model `θ' = θ - η1 (∇_θ L_T(θ | φ))` as a dense copy.
pub fn base_step(
    model: &FactorModel,
    meta: &MetaModel,
    obs: &ObservationIndicator,
    train: &[Interaction],
    pairs: &[(usize, usize)],
    params: &StepParams,
) -> Result<FactorModel> {
    check_batch(
        model,
        meta,
        &MetaBatch {
            train,
            pairs,
            uniform: &[],
        },
    )?;
    let mut grad = SparseGrad::new(model);
    let config = meta.config(obs, params.pair_term);
    let risk = accumulate_base_grad(
        &mut grad,
        model,
        &config,
        &indexed(train),
        pairs,
        pair_scale_learned(pairs),
        params,
    );
    if !risk.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            detail: format!("non-finite batch risk {risk}"),
        });
    }
    let mut next = model.clone();
    grad.apply(&mut next, params.lr);
    if !next.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            detail: "non-finite assumed step".into(),
        });
    }
    Ok(next)
}

/// `∇_φ L_U(θ'(φ))` through one assumed SGD step.
pub fn hypergradient(
    model: &FactorModel,
    meta: &MetaModel,
    obs: &ObservationIndicator,
    batch: &MetaBatch<'_>,
    params: &StepParams,
) -> Result<MetaGradient> {
    check_batch(model, meta, batch)?;
    if batch.uniform.is_empty() {
        return Err(Error::domain("uniform batch is empty"));
    }
    let mut ws = Workspace::new(model);
    let train = indexed(batch.train);
    hypergradient_in(&mut ws, model, meta, obs, &train, batch.pairs, batch.uniform, params)
}

#[allow(clippy::too_many_arguments)]
fn hypergradient_in(
    ws: &mut Workspace,
    model: &FactorModel,
    meta: &MetaModel,
    obs: &ObservationIndicator,
    train: &[(usize, Interaction)],
    pairs: &[(usize, usize)],
    uniform: &[Interaction],
    params: &StepParams,
) -> Result<MetaGradient> {
    let loss = params.loss;
    let lr = params.lr;
    let pair_scale = pair_scale_learned(pairs);
    let config = meta.config(obs, params.pair_term);
    accumulate_base_grad(&mut ws.base, model, &config, train, pairs, pair_scale, params);

    // g_U at θ', reading assumed rows lazily from θ and the base gradient.
    let dim = model.dim();
    let mut p_new = alloc::vec![0.0; dim];
    let mut q_new = alloc::vec![0.0; dim];
    let bu = uniform.len() as f64;
    ws.uniform.clear();
    for x in uniform {
        assumed_row(model.user_row(x.user), &ws.base, true, x.user, lr, &mut p_new);
        assumed_row(model.item_row(x.item), &ws.base, false, x.item, lr, &mut q_new);
        let f = dot(&p_new, &q_new);
        let c = loss.d_pred(f, x.target()) / bu;
        ws.uniform.touch(x.user, x.item);
        for (g, v) in ws.uniform.users[x.user * dim..(x.user + 1) * dim]
            .iter_mut()
            .zip(&q_new)
        {
            *g += c * v;
        }
        for (g, v) in ws.uniform.items[x.item * dim..(x.item + 1) * dim]
            .iter_mut()
            .zip(&p_new)
        {
            *g += c * v;
        }
    }

    let mut grad = MetaGradient::zeros_like(meta);
    if !ws.uniform.users.iter().chain(&ws.uniform.items).any(|g| *g != 0.0) {
        return Ok(grad);
    }

    // <∇_θ f(u, i), g_U> at the pre-step θ.
    let align = |u: usize, i: usize| -> f64 {
        dot(model.item_row(i), ws.uniform.user_grad(u)) + dot(model.user_row(u), ws.uniform.item_grad(i))
    };

    let bt = train.len() as f64;
    for (_, x) in train {
        let s = align(x.user, x.item);
        if s == 0.0 {
            continue;
        }
        let f = model.score(x.user, x.item);
        let w = meta.w1(x.user, x.item, x.label, x.position);
        let c = w * loss.d_pred(f, x.target()) / bt;
        let g = -lr * c * s;
        for &k in meta.w1_slots(x.user, x.item, x.label, x.position).as_slice() {
            grad.phi1[k] += g;
        }
    }

    if params.pair_term {
        for &(u, i) in pairs {
            let s = align(u, i);
            if s == 0.0 {
                continue;
            }
            let label = obs.label(u, i);
            let observed = label.is_some();
            let w = meta.w2(u, i, observed);
            let m = meta.m(label, observed);
            let f = model.score(u, i);
            let g2 = -lr * w * loss.d_pred(f, m) * pair_scale * s;
            for k in meta.w2_slots(u, i, observed) {
                grad.phi2[k] += g2;
            }
            let g3 = -lr * w * loss.d2_pred_label(f, m) * (1.0 - m * m) * pair_scale * s;
            for k in meta.m_slots(label, observed) {
                grad.phi3[k] += g3;
            }
        }
    }
    Ok(grad)
}

#[inline]
fn assumed_row(theta: &[f64], grad: &SparseGrad, user: bool, idx: usize, lr: f64, out: &mut [f64]) {
    let touched = if user {
        grad.is_user_touched(idx)
    } else {
        grad.is_item_touched(idx)
    };
    if touched {
        let g = if user { grad.user_grad(idx) } else { grad.item_grad(idx) };
        for ((o, t), g) in out.iter_mut().zip(theta).zip(g) {
            *o = t - lr * g;
        }
    } else {
        out.copy_from_slice(theta);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch risk of the actual steps.
    pub train_risk: f64,
    /// Mean loss on the whole uniform set at epoch end (NaN when it is empty).
    pub uniform_risk: f64,
    /// Validation NDCG@k at epoch end (NaN when undefined).
    pub validation_ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Base model at the best validation epoch.
    pub model: FactorModel,
    pub meta: MetaModel,
    pub best_epoch: usize,
    pub final_model: FactorModel,
    pub final_meta: MetaModel,
    pub optimizer: Option<MetaOptimizer>,
    pub trace: Vec<EpochRecord>,
}

/// Learned debiasing with the wiring of `variant`.
pub fn train_autodebias(
    bundle: &DatasetBundle,
    cfg: &TrainerConfig,
    variant: Variant,
    meta_init: MetaModel,
) -> Result<TrainOutcome> {
    train_meta(bundle, cfg, variant.mask(), meta_init)
}

/// Learned debiasing with an explicit learning mask.
pub fn train_meta(
    bundle: &DatasetBundle,
    cfg: &TrainerConfig,
    mask: LearnMask,
    meta_init: MetaModel,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if mask.learns() && bundle.uniform.is_empty() {
        return Err(Error::precondition("learned debiasing needs a nonempty uniform set"));
    }
    if bundle.train.is_empty() {
        return Err(Error::precondition("training set is empty"));
    }
    let model = cfg.init_model(bundle.n_users, bundle.n_items);
    let obs = bundle.observation();
    check_batch(
        &model,
        &meta_init,
        &MetaBatch {
            train: &bundle.train,
            pairs: &[],
            uniform: &bundle.uniform,
        },
    )?;
    if meta_init.list_mode() && bundle.train.iter().any(|x| x.position.is_none()) {
        return Err(Error::precondition(
            "list-mode meta model needs positions on every training row",
        ));
    }
    let params = cfg.step_params(mask.pair_term);
    let mut meta = meta_init;
    let mut opt = MetaOptimizer::new(cfg.meta_lr, &meta);
    let mut ws = Workspace::new(&model);
    let mut pair_rng = rng::stream(cfg.seed, PAIR_STREAM);
    let mut uniform_rng = rng::stream(cfg.seed, UNIFORM_STREAM);
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(cfg.pair_batch);
    let mut ubatch: Vec<Interaction> = Vec::with_capacity(cfg.uniform_batch);

    run_epochs(bundle, &bundle.train, cfg, model, |epoch, model, batch| {
        pairs.clear();
        if mask.pair_term {
            for _ in 0..cfg.pair_batch {
                pairs.push((
                    pair_rng.random_range(0..bundle.n_users),
                    pair_rng.random_range(0..bundle.n_items),
                ));
            }
        }
        if mask.learns() {
            ubatch.clear();
            if cfg.uniform_batch >= bundle.uniform.len() {
                ubatch.extend_from_slice(&bundle.uniform);
            } else {
                for _ in 0..cfg.uniform_batch {
                    ubatch.push(bundle.uniform[uniform_rng.random_range(0..bundle.uniform.len())]);
                }
            }
            let g = hypergradient_in(&mut ws, model, &meta, &obs, batch, &pairs, &ubatch, &params)?;
            if !g.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite hypergradient".into(),
                });
            }
            if !g.is_zero() {
                if mask.phi1 {
                    opt.phi1.update(&mut meta.phi1, &g.phi1);
                }
                if mask.phi2 {
                    opt.phi2.update(&mut meta.phi2, &g.phi2);
                }
                if mask.phi3 {
                    opt.phi3.update(&mut meta.phi3, &g.phi3);
                }
            }
        }
        let config = meta.config(&obs, mask.pair_term);
        let risk = accumulate_base_grad(
            &mut ws.base,
            model,
            &config,
            batch,
            &pairs,
            pair_scale_learned(&pairs),
            &params,
        );
        ws.base.apply(model, params.lr);
        Ok((risk, meta.clone()))
    })
    .map(|mut out| {
        out.optimizer = Some(opt);
        out
    })
}

/// Trains on `train` under a fixed debiasing configuration. The imputation
/// term, when present, is the pair sample scaled by `|U||I| / |B_P|`.
pub fn train_fixed<C: DebiasConfig + ?Sized>(
    bundle: &DatasetBundle,
    train: &[Interaction],
    config: &C,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::precondition("training set is empty"));
    }
    config.check(train)?;
    let model = cfg.init_model(bundle.n_users, bundle.n_items);
    for x in train {
        x.validate(bundle.n_users, bundle.n_items)?;
    }
    let pair_term = config.has_pair_term();
    let params = cfg.step_params(pair_term);
    let mut grad = SparseGrad::new(&model);
    let mut pair_rng = rng::stream(cfg.seed, PAIR_STREAM);
    let n_pairs = (bundle.n_users * bundle.n_items) as f64;
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(cfg.pair_batch);
    let frozen = MetaModel::zeros(bundle.n_users, bundle.n_items, 0);
    run_epochs(bundle, train, cfg, model, |_, model, batch| {
        pairs.clear();
        if pair_term {
            for _ in 0..cfg.pair_batch {
                pairs.push((
                    pair_rng.random_range(0..bundle.n_users),
                    pair_rng.random_range(0..bundle.n_items),
                ));
            }
        }
        let scale = n_pairs / cfg.pair_batch as f64;
        let risk = accumulate_base_grad(&mut grad, model, config, batch, &pairs, scale, &params);
        grad.apply(model, params.lr);
        Ok((risk, frozen.clone()))
    })
}

/// Shared epoch loop: shuffles `train` with the same stream as
/// [`crate::model::sgd_fit`], calls `step` per batch, and tracks the best
/// validation epoch.
fn run_epochs<F>(
    bundle: &DatasetBundle,
    train: &[Interaction],
    cfg: &TrainerConfig,
    mut model: FactorModel,
    mut step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &mut FactorModel, &[(usize, Interaction)]) -> Result<(f64, MetaModel)>,
{
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, SHUFFLE_STREAM);
    let mut batch: Vec<(usize, Interaction)> = Vec::with_capacity(cfg.train_batch);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, FactorModel, MetaModel)> = None;
    let mut last_meta = MetaModel::zeros(bundle.n_users, bundle.n_items, 0);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut risk_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.train_batch) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| (k, train[k])));
            let (risk, meta) = step(epoch, &mut model, &batch)?;
            last_meta = meta;
            risk_sum += risk;
            n_batches += 1;
        }
        let train_risk = risk_sum / n_batches.max(1) as f64;
        if !train_risk.is_finite() || !model.is_finite() || !last_meta.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("training risk {train_risk}"),
            });
        }
        let uniform_risk = if bundle.uniform.is_empty() {
            f64::NAN
        } else {
            crate::model::empirical_risk(&model, &bundle.uniform, cfg.loss)?
        };
        let validation_ndcg = metrics::ndcg_at_k(&model, &bundle.validation, cfg.eval_k).unwrap_or(f64::NAN);
        trace.push(EpochRecord {
            epoch,
            train_risk,
            uniform_risk,
            validation_ndcg,
        });
        let better = match &best {
            None => true,
            Some((v, ..)) => validation_ndcg > *v || (v.is_nan() && !validation_ndcg.is_nan()),
        };
        if better {
            best = Some((validation_ndcg, epoch, model.clone(), last_meta.clone()));
        }
    }
    let (best_epoch, best_model, best_meta) = match best {
        Some((v, e, m, mm)) if !v.is_nan() => (e, m, mm),
        _ => (cfg.epochs.saturating_sub(1), model.clone(), last_meta.clone()),
    };
    Ok(TrainOutcome {
        model: best_model,
        meta: best_meta,
        best_epoch,
        final_model: model,
        final_meta: last_meta,
        optimizer: None,
        trace,
    })
}

/// Wraps a learned meta model so it can be inspected with the framework's
/// diagnostics, such as [`crate::framework::weight_mean_square`].
pub fn learned_config<'a>(meta: &'a MetaModel, obs: &'a ObservationIndicator, variant: Variant) -> LearnedConfig<'a> {
    meta.config(obs, variant.mask().pair_term)
}
