//! Interactions, dataset splits, and the observation indicator.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// One observed (user, item, label) triple, with the display rank for list feedback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    /// +1 or -1.
    pub label: i8,
    /// 1-based list position.
    pub position: Option<u32>,
}

impl Interaction {
    pub fn new(user: usize, item: usize, label: i8) -> Self {
        Interaction {
            user,
            item,
            label,
            position: None,
        }
    }

    pub fn at_position(mut self, position: u32) -> Self {
        self.position = Some(position);
        self
    }

    #[inline]
    pub fn target(&self) -> f64 {
        f64::from(self.label)
    }

    pub fn validate(&self, n_users: usize, n_items: usize) -> Result<()> {
        if self.user >= n_users {
            return Err(Error::OutOfBounds {
                what: "user",
                index: self.user,
                bound: n_users,
            });
        }
        if self.item >= n_items {
            return Err(Error::OutOfBounds {
                what: "item",
                index: self.item,
                bound: n_items,
            });
        }
        if self.label != 1 && self.label != -1 {
            return Err(Error::domain(format!("label {} is not +1/-1", self.label)));
        }
        if self.position == Some(0) {
            return Err(Error::domain("list positions are 1-based"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackKind {
    Explicit,
    Implicit,
    List,
}

impl FeedbackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackKind::Explicit => "explicit",
            FeedbackKind::Implicit => "implicit",
            FeedbackKind::List => "list",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "explicit" => Some(FeedbackKind::Explicit),
            "implicit" => Some(FeedbackKind::Implicit),
            "list" => Some(FeedbackKind::List),
            _ => None,
        }
    }
}

/// Biased training data plus the three splits of the unbiased log.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<Interaction>,
    pub uniform: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub n_users: usize,
    pub n_items: usize,
    pub feedback_kind: FeedbackKind,
    /// Raw id of each dense user index.
    pub user_ids: Vec<u64>,
    /// Raw id of each dense item index.
    pub item_ids: Vec<u64>,
    pub seed: u64,
}

impl DatasetBundle {
    /// A bundle whose raw ids are the dense indices themselves.
    #[allow(clippy::too_many_arguments)]
    pub fn with_identity_ids(
        train: Vec<Interaction>,
        uniform: Vec<Interaction>,
        validation: Vec<Interaction>,
        test: Vec<Interaction>,
        n_users: usize,
        n_items: usize,
        feedback_kind: FeedbackKind,
        seed: u64,
    ) -> Self {
        DatasetBundle {
            train,
            uniform,
            validation,
            test,
            n_users,
            n_items,
            feedback_kind,
            user_ids: (0..n_users as u64).collect(),
            item_ids: (0..n_items as u64).collect(),
            seed,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.n_users * self.n_items
    }

    /// Checks every interaction and the disjointness of the unbiased splits.
    pub fn validate(&self) -> Result<()> {
        for x in self
            .train
            .iter()
            .chain(&self.uniform)
            .chain(&self.validation)
            .chain(&self.test)
        {
            x.validate(self.n_users, self.n_items)?;
        }
        if self.feedback_kind == FeedbackKind::Implicit && self.train.iter().any(|x| x.label != 1) {
            return Err(Error::domain("implicit training data may only hold positive labels"));
        }
        let keys = |s: &[Interaction]| -> BTreeSet<(usize, usize)> { s.iter().map(|x| (x.user, x.item)).collect() };
        let (u, v, t) = (keys(&self.uniform), keys(&self.validation), keys(&self.test));
        if !u.is_disjoint(&v) || !u.is_disjoint(&t) || !v.is_disjoint(&t) {
            return Err(Error::domain("uniform/validation/test splits share (user, item) pairs"));
        }
        Ok(())
    }

    pub fn observation(&self) -> ObservationIndicator {
        ObservationIndicator::from_interactions(&self.train, self.n_items)
    }

    /// Largest list position in the training data, if any row carries one.
    pub fn max_position(&self) -> Option<u32> {
        self.train.iter().filter_map(|x| x.position).max()
    }

    /// Keeps a seeded random `fraction` of the uniform split; validation and test are untouched.
    pub fn with_uniform_fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::domain(format!("uniform fraction {fraction} outside (0, 1]")));
        }
        let keep = libm::round(fraction * self.uniform.len() as f64) as usize;
        let mut idx: Vec<usize> = (0..self.uniform.len()).collect();
        idx.shuffle(&mut rng::stream(seed, 0x005e_ed0f_u64));
        let mut chosen: Vec<usize> = idx.into_iter().take(keep).collect();
        chosen.sort_unstable();
        let mut out = self.clone();
        out.uniform = chosen.into_iter().map(|i| self.uniform[i]).collect();
        Ok(out)
    }
}

/// Maps a 1–5 star rating onto ±1: strictly greater than 3 is positive.
pub fn binarize(rating: i64) -> Result<i8> {
    match rating {
        4 | 5 => Ok(1),
        1..=3 => Ok(-1),
        _ => Err(Error::domain(format!("rating {rating} outside 1..=5"))),
    }
}

/// Drops negative training feedback. The unbiased splits are left as they are.
pub fn to_implicit(bundle: &DatasetBundle) -> Result<DatasetBundle> {
    if bundle.feedback_kind != FeedbackKind::Explicit {
        return Err(Error::precondition(format!(
            "to_implicit expects explicit feedback, got {}",
            bundle.feedback_kind.as_str()
        )));
    }
    let mut out = bundle.clone();
    out.train.retain(|x| x.label == 1);
    if out.train.is_empty() {
        log::warn!("implicit conversion left the training set empty");
    }
    out.feedback_kind = FeedbackKind::Implicit;
    Ok(out)
}

/// Removes repeated (user, item) rows, keeping the last occurrence in its place.
pub fn dedup_last_wins(rows: &[Interaction]) -> Vec<Interaction> {
    let mut seen = BTreeSet::new();
    let mut out: Vec<Interaction> = rows
        .iter()
        .rev()
        .filter(|x| seen.insert((x.user, x.item)))
        .copied()
        .collect();
    out.reverse();
    out
}

/// Shuffles `rows` with `seed` and cuts them into (uniform, validation, test).
///
/// The first two sizes are `round(ratio * n)`; test takes the remainder.
pub fn split_unbiased(
    rows: &[Interaction],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<Interaction>, Vec<Interaction>, Vec<Interaction>)> {
    if ratios.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(Error::domain("split ratios must be finite and nonnegative"));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!("split ratios sum to {total}, expected 1")));
    }
    let n = rows.len();
    let mut shuffled = rows.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, 0x0005_b117));
    let n_uniform = (libm::round(ratios[0] * n as f64) as usize).min(n);
    let n_val = (libm::round(ratios[1] * n as f64) as usize).min(n - n_uniform);
    let test = shuffled.split_off(n_uniform + n_val);
    let validation = shuffled.split_off(n_uniform);
    Ok((shuffled, validation, test))
}

/// Whether a (user, item) pair occurs in the training data, and its last observed label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationIndicator {
    n_items: usize,
    // sorted by key = user * n_items + item
    entries: Vec<(u64, i8)>,
}

impl ObservationIndicator {
    pub fn from_interactions(train: &[Interaction], n_items: usize) -> Self {
        let mut keyed: Vec<(u64, usize, i8)> = train
            .iter()
            .enumerate()
            .map(|(k, x)| (Self::key_of(n_items, x.user, x.item), k, x.label))
            .collect();
        keyed.sort_unstable();
        let mut entries: Vec<(u64, i8)> = Vec::with_capacity(keyed.len());
        for (key, _, label) in keyed {
            match entries.last_mut() {
                Some(last) if last.0 == key => last.1 = label,
                _ => entries.push((key, label)),
            }
        }
        ObservationIndicator { n_items, entries }
    }

    #[inline]
    fn key_of(n_items: usize, user: usize, item: usize) -> u64 {
        (user as u64) * (n_items as u64) + item as u64
    }

    /// O(u, i).
    #[inline]
    pub fn observed(&self, user: usize, item: usize) -> bool {
        self.label(user, item).is_some()
    }

    /// Last training label seen for the pair.
    #[inline]
    pub fn label(&self, user: usize, item: usize) -> Option<i8> {
        let key = Self::key_of(self.n_items, user, item);
        self.entries
            .binary_search_by_key(&key, |e| e.0)
            .ok()
            .map(|i| self.entries[i].1)
    }

    /// Number of distinct observed pairs.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
