//! The methods an experiment can train, their data requirements, and the
//! debiasing configuration each one maps to.

use std::fmt;
use std::str::FromStr;

use debias_core::data::{DatasetBundle, FeedbackKind, Interaction};
use debias_core::framework::{
    config_doubly_robust, config_imputation, config_ips, config_ips_variant, config_negative_weighting,
    config_position_ips, estimate_position_propensity, estimate_propensity_naive_bayes, estimate_propensity_popularity,
    Dims, LabelConvention, PairTable, Unweighted,
};
use debias_core::meta::MetaModel;
use debias_core::trainer::{train_autodebias, train_fixed, TrainOutcome, TrainerConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::config::BaselineSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain MF on the biased training set.
    MfBiased,
    /// Plain MF on the uniform set only.
    MfUniform,
    /// Plain MF on training and uniform rows together.
    MfCombine,
    Ips,
    Dr,
    Imputation,
    NegWeight,
    IpsVariant,
    PosIps,
    Autodebias,
    AutodebiasW1,
    AutodebiasW1m,
}

pub const ALL_METHODS: [Method; 12] = [
    Method::MfBiased,
    Method::MfUniform,
    Method::MfCombine,
    Method::Ips,
    Method::Dr,
    Method::Imputation,
    Method::NegWeight,
    Method::IpsVariant,
    Method::PosIps,
    Method::Autodebias,
    Method::AutodebiasW1,
    Method::AutodebiasW1m,
];

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::MfBiased => "mf_biased",
            Method::MfUniform => "mf_uniform",
            Method::MfCombine => "mf_combine",
            Method::Ips => "ips",
            Method::Dr => "dr",
            Method::Imputation => "imputation",
            Method::NegWeight => "neg_weight",
            Method::IpsVariant => "ips_variant",
            Method::PosIps => "pos_ips",
            Method::Autodebias => "autodebias",
            Method::AutodebiasW1 => "autodebias_w1",
            Method::AutodebiasW1m => "autodebias_w1m",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Autodebias => Some(Variant::Full),
            Method::AutodebiasW1 => Some(Variant::W1),
            Method::AutodebiasW1m => Some(Variant::W1M),
            _ => None,
        }
    }

    pub fn supports(self, kind: FeedbackKind) -> bool {
        match self {
            Method::PosIps => kind == FeedbackKind::List,
            Method::NegWeight | Method::IpsVariant => kind == FeedbackKind::Implicit,
            Method::Ips | Method::Dr => kind != FeedbackKind::Implicit,
            _ => true,
        }
    }

    pub fn needs_uniform(self) -> bool {
        matches!(
            self,
            Method::MfUniform
                | Method::MfCombine
                | Method::Ips
                | Method::Dr
                | Method::Imputation
                | Method::Autodebias
                | Method::AutodebiasW1
                | Method::AutodebiasW1m
        )
    }

    /// Rejects a method for a feedback kind it is not defined on.
    pub fn check_kind(self, kind: FeedbackKind) -> Result<()> {
        if self.supports(kind) {
            Ok(())
        } else {
            let need = match self {
                Method::PosIps => "list feedback",
                Method::NegWeight | Method::IpsVariant => "implicit feedback",
                _ => "explicit or list feedback",
            };
            Err(Error::config(format!(
                "method {self} needs {need}, dataset has {} feedback",
                kind.as_str()
            )))
        }
    }

    /// Every check that can fail before training starts.
    pub fn check_bundle(self, bundle: &DatasetBundle) -> Result<()> {
        self.check_kind(bundle.feedback_kind)?;
        if self.needs_uniform() && bundle.uniform.is_empty() {
            return Err(Error::config(format!("method {self} needs a nonempty uniform set")));
        }
        if bundle.train.is_empty() && self != Method::MfUniform {
            return Err(Error::config(format!("method {self} needs training data")));
        }
        if self == Method::PosIps && bundle.train.iter().any(|x| x.position.is_none()) {
            return Err(Error::config("pos_ips needs a list position on every training row"));
        }
        Ok(())
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_METHODS
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}")))
    }
}

/// Mean label of the uniform set, used as the constant pseudo-label.
fn uniform_mean_label(bundle: &DatasetBundle) -> f64 {
    let sum: f64 = bundle.uniform.iter().map(Interaction::target).sum();
    sum / bundle.uniform.len() as f64
}

/// Zero surrogate sized for `bundle`; list bundles get a position block.
pub fn initial_meta(bundle: &DatasetBundle) -> MetaModel {
    let positions = match bundle.feedback_kind {
        FeedbackKind::List => bundle.max_position().unwrap_or(0) as usize,
        _ => 0,
    };
    MetaModel::zeros(bundle.n_users, bundle.n_items, positions)
}

/// Trains `method` on `bundle` with the trainer settings `cfg`.
pub fn train_method(
    bundle: &DatasetBundle,
    method: Method,
    cfg: &TrainerConfig,
    baselines: &BaselineSpec,
) -> Result<TrainOutcome> {
    method.check_bundle(bundle)?;
    let dims = Dims {
        n_train: bundle.train.len(),
        n_users: bundle.n_users,
        n_items: bundle.n_items,
    };
    let n_pairs = bundle.n_pairs() as f64;
    let naive_bayes =
        || estimate_propensity_naive_bayes(&bundle.train, &bundle.uniform, bundle.n_users, bundle.n_items);
    let outcome = match method {
        Method::MfBiased => train_fixed(bundle, &bundle.train, &Unweighted, cfg)?,
        Method::MfUniform => train_fixed(bundle, &bundle.uniform, &Unweighted, cfg)?,
        Method::MfCombine => {
            let combined: Vec<Interaction> = bundle.train.iter().chain(&bundle.uniform).copied().collect();
            train_fixed(bundle, &combined, &Unweighted, cfg)?
        }
        Method::Ips => train_fixed(bundle, &bundle.train, &config_ips(naive_bayes()?, dims), cfg)?,
        Method::Dr => {
            let m = PairTable::Constant(uniform_mean_label(bundle));
            let c = config_doubly_robust(naive_bayes()?, bundle.observation(), m, dims);
            train_fixed(bundle, &bundle.train, &c, cfg)?
        }
        Method::Imputation => {
            let lambda = baselines.imputation_lambda.unwrap_or(dims.n_train as f64 / n_pairs);
            let c = config_imputation(lambda, uniform_mean_label(bundle), dims)?;
            train_fixed(bundle, &bundle.train, &c, cfg)?
        }
        Method::NegWeight => {
            let a = PairTable::Constant(baselines.negative_weight / n_pairs);
            let c = config_negative_weighting(a, bundle.observation(), LabelConvention::PlusMinus);
            train_fixed(bundle, &bundle.train, &c, cfg)?
        }
        Method::IpsVariant => {
            let q = estimate_propensity_popularity(
                &bundle.train,
                bundle.n_items,
                baselines.popularity_power,
                baselines.popularity_floor,
            )?;
            let c = config_ips_variant(q, bundle.observation(), dims, LabelConvention::PlusMinus);
            train_fixed(bundle, &bundle.train, &c, cfg)?
        }
        Method::PosIps => {
            let n_positions = bundle.max_position().unwrap_or(0) as usize;
            let q_t = estimate_position_propensity(&bundle.train, n_positions, baselines.position_floor)?;
            train_fixed(bundle, &bundle.train, &config_position_ips(q_t)?, cfg)?
        }
        Method::Autodebias | Method::AutodebiasW1 | Method::AutodebiasW1m => {
            let variant = method.variant().expect("learned method");
            train_autodebias(bundle, cfg, variant, initial_meta(bundle))?
        }
    };
    Ok(outcome)
}
