//! Test-set metrics: NLL, AUC, per-user NDCG@k, and popularity slices.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{DatasetBundle, Interaction};
use crate::error::{Error, Result};
use crate::math::{log2, softplus};
use crate::model::FactorModel;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `-mean log(1 + exp(-r f))`; at most 0, higher is better.
    pub nll: f64,
    pub auc: f64,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub slices: Vec<SliceReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceReport {
    pub name: String,
    pub n_items: usize,
    pub ndcg_at: BTreeMap<usize, f64>,
}

pub fn scores(model: &FactorModel, rows: &[Interaction]) -> Result<Vec<f64>> {
    rows.iter().map(|x| model.predict(x.user, x.item)).collect()
}

fn check_len(rows: &[Interaction], scores: &[f64]) -> Result<()> {
    if rows.len() != scores.len() {
        return Err(Error::domain(format!(
            "{} rows but {} scores",
            rows.len(),
            scores.len()
        )));
    }
    Ok(())
}

pub fn nll_of_scores(rows: &[Interaction], scores: &[f64]) -> Result<f64> {
    check_len(rows, scores)?;
    if rows.is_empty() {
        return Err(Error::domain("NLL of an empty test set"));
    }
    // running mean: exact when every term is equal
    let mut mean = 0.0;
    for (k, (x, f)) in rows.iter().zip(scores).enumerate() {
        mean += (softplus(-x.target() * f) - mean) / (k + 1) as f64;
    }
    Ok(-mean)
}

pub fn nll(model: &FactorModel, test: &[Interaction]) -> Result<f64> {
    nll_of_scores(test, &scores(model, test)?)
}

/// 1-based ascending ranks, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share their mean
        let avg = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

/// Rank-sum AUC over the whole set; equals the fraction of (positive,
/// negative) pairs ordered correctly, ties counting one half.
pub fn auc_of_scores(rows: &[Interaction], scores: &[f64]) -> Result<f64> {
    check_len(rows, scores)?;
    let pos = rows.iter().filter(|x| x.label > 0).count();
    let neg = rows.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative rows".into(),
        ));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = rows
        .iter()
        .zip(&ranks)
        .filter(|(x, _)| x.label > 0)
        .map(|(_, r)| r)
        .sum();
    let p = pos as f64;
    Ok((rank_sum - (p + 1.0) * p / 2.0) / (p * neg as f64))
}

pub fn auc(model: &FactorModel, test: &[Interaction]) -> Result<f64> {
    auc_of_scores(test, &scores(model, test)?)
}

/// Per-user NDCG@k averaged over users with at least one positive.
///
/// Each user's own test rows are the candidates, ranked by descending score
/// with ties broken by ascending item index. Gains use `1 / log2(rank + 1)`.
pub fn ndcg_of_scores(rows: &[Interaction], scores: &[f64], k: usize) -> Result<f64> {
    check_len(rows, scores)?;
    if k < 1 {
        return Err(Error::domain("NDCG cutoff must be at least 1"));
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        rows[a]
            .user
            .cmp(&rows[b].user)
            .then(scores[b].total_cmp(&scores[a]))
            .then(rows[a].item.cmp(&rows[b].item))
    });
    let mut total = 0.0;
    let mut users = 0usize;
    for group in order.chunk_by(|&a, &b| rows[a].user == rows[b].user) {
        let mut dcg = 0.0;
        let mut positives = 0usize;
        for (rank0, &idx) in group.iter().enumerate() {
            if rows[idx].label > 0 {
                positives += 1;
                if rank0 < k {
                    dcg += 1.0 / log2(rank0 as f64 + 2.0);
                }
            }
        }
        if positives == 0 {
            continue;
        }
        let idcg: f64 = (0..positives.min(k)).map(|j| 1.0 / log2(j as f64 + 2.0)).sum();
        total += dcg / idcg;
        users += 1;
    }
    if users == 0 {
        return Err(Error::UndefinedMetric("no user has a positive test row".into()));
    }
    Ok(total / users as f64)
}

pub fn ndcg_at_k(model: &FactorModel, test: &[Interaction], k: usize) -> Result<f64> {
    ndcg_of_scores(test, &scores(model, test)?, k)
}

/// NLL, AUC and NDCG at each cutoff in `ks`.
pub fn evaluate(model: &FactorModel, test: &[Interaction], ks: &[usize]) -> Result<MetricsReport> {
    let s = scores(model, test)?;
    let mut ndcg_at = BTreeMap::new();
    for &k in ks {
        ndcg_at.insert(k, ndcg_of_scores(test, &s, k)?);
    }
    Ok(MetricsReport {
        nll: nll_of_scores(test, &s)?,
        auc: auc_of_scores(test, &s)?,
        ndcg_at,
        slices: Vec::new(),
    })
}

/// Items ordered by training positive frequency (descending, ties by index);
/// the first `ceil(top_fraction * n_items)` form the popular slice.
pub fn popular_items(bundle: &DatasetBundle, top_fraction: f64) -> Vec<bool> {
    let freq = positive_frequency(bundle);
    let mut order: Vec<usize> = (0..bundle.n_items).collect();
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    let n_popular = libm::ceil(top_fraction * bundle.n_items as f64) as usize;
    let mut popular = vec![false; bundle.n_items];
    for &i in order.iter().take(n_popular) {
        popular[i] = true;
    }
    popular
}

/// Number of positive training rows per item.
pub fn positive_frequency(bundle: &DatasetBundle) -> Vec<usize> {
    let mut freq = vec![0usize; bundle.n_items];
    for x in bundle.train.iter().filter(|x| x.label > 0) {
        freq[x.item] += 1;
    }
    freq
}

/// NDCG@k on the test rows of popular and of unpopular items separately.
pub fn popularity_slices(
    model: &FactorModel,
    bundle: &DatasetBundle,
    top_fraction: f64,
    ks: &[usize],
) -> Result<Vec<SliceReport>> {
    let popular = popular_items(bundle, top_fraction);
    let n_popular = popular.iter().filter(|p| **p).count();
    let mut out = Vec::new();
    for (name, want, n_items) in [
        ("popular", true, n_popular),
        ("unpopular", false, bundle.n_items - n_popular),
    ] {
        let rows: Vec<Interaction> = bundle
            .test
            .iter()
            .filter(|x| popular[x.item] == want)
            .copied()
            .collect();
        let s = scores(model, &rows)?;
        let mut ndcg_at = BTreeMap::new();
        for &k in ks {
            ndcg_at.insert(k, ndcg_of_scores(&rows, &s, k)?);
        }
        out.push(SliceReport {
            name: name.into(),
            n_items,
            ndcg_at,
        });
    }
    Ok(out)
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::domain("spearman needs two equal-length series of at least 2"));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("spearman of a constant series".into()));
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}
