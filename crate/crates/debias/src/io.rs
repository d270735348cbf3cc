//! Rating files, bundle directories, checkpoints and trace files.
//!
//! Bundle directory layout:
//!
//! ```text
//! bundle.toml                      counts, feedback kind, seed, fingerprint
//! train.txt uniform.txt            one "user item label [position]" per line,
//! validation.txt test.txt          dense 0-based indices
//! user_ids.txt item_ids.txt        raw id of each dense index, one per line
//! truth.txt                        simulations only: one line of scores per user
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use debias_core::data::{binarize, dedup_last_wins, split_unbiased, to_implicit, FeedbackKind, Interaction};
use debias_core::meta::{Adam, MetaModel, MetaOptimizer};
use debias_core::model::FactorModel;
use debias_core::trainer::EpochRecord;
use debias_core::DatasetBundle;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BUNDLE_SCHEMA: u32 = 1;
pub const CHECKPOINT_SCHEMA: u32 = 1;

const SPLITS: [&str; 4] = ["train", "uniform", "validation", "test"];

/// One line of a raw rating file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawRating {
    pub user: u64,
    pub item: u64,
    pub rating: i64,
    /// 1-based line number in the source file.
    pub line: usize,
}

/// Options for [`load_explicit`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    /// (uniform, validation, test) shares of the unbiased file.
    pub split: [f64; 3],
    pub seed: u64,
    /// Largest raw user id allowed, when the dataset declares one.
    pub max_user_id: Option<u64>,
    pub max_item_id: Option<u64>,
    /// Drop negative training feedback after loading.
    pub implicit: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            split: [0.05, 0.05, 0.90],
            seed: 0,
            max_user_id: None,
            max_item_id: None,
            implicit: false,
        }
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).map_err(Error::io(path))?))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, what: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("{what} {s:?} is not an integer"),
    })
}

/// Reads whitespace-separated `user item rating` lines. Blank lines and
/// lines starting with `#` are skipped.
pub fn read_triples(path: &Path) -> Result<Vec<RawRating>> {
    let mut out = Vec::new();
    for (k, line) in open(path)?.lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(Error::io(path))?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("expected 3 fields (user item rating), found {}", fields.len()),
            });
        }
        out.push(RawRating {
            user: parse_field(path, line_no, "user", fields[0])?,
            item: parse_field(path, line_no, "item", fields[1])?,
            rating: parse_field(path, line_no, "rating", fields[2])?,
            line: line_no,
        });
    }
    Ok(out)
}

/// Reads a dense rating matrix (one user per line, one item per column,
/// 0 for "not rated"). Row and column indices become the raw ids.
pub fn read_rating_matrix(path: &Path) -> Result<Vec<RawRating>> {
    let mut out = Vec::new();
    let mut width = None;
    let mut row = 0u64;
    for (k, line) in open(path)?.lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split_whitespace().collect();
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("row has {} columns, expected {w}", cells.len()),
                })
            }
            Some(_) => {}
        }
        for (item, cell) in cells.iter().enumerate() {
            let rating: i64 = parse_field(path, line_no, "rating", cell)?;
            if rating != 0 {
                out.push(RawRating {
                    user: row,
                    item: item as u64,
                    rating,
                    line: line_no,
                });
            }
        }
        row += 1;
    }
    Ok(out)
}

fn check_ranges(path: &Path, rows: &[RawRating], opts: &LoadOptions) -> Result<()> {
    for r in rows {
        for (what, id, max) in [("user", r.user, opts.max_user_id), ("item", r.item, opts.max_item_id)] {
            if let Some(max) = max {
                if id > max {
                    return Err(Error::IdOutOfRange {
                        path: path.to_path_buf(),
                        what,
                        id,
                        max,
                    });
                }
            }
        }
    }
    Ok(())
}

fn to_labelled(path: &Path, rows: &[RawRating]) -> Result<Vec<(u64, u64, i8)>> {
    rows.iter()
        .map(|r| {
            let label = binarize(r.rating).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: r.line,
                msg: e.to_string(),
            })?;
            Ok((r.user, r.item, label))
        })
        .collect()
}

/// Builds an explicit bundle from already-parsed rows: raw ids are re-indexed
/// densely in ascending order, ratings binarized, the unbiased rows
/// deduplicated (last wins) and split with `opts.split` under `opts.seed`.
pub fn bundle_from_rows(
    biased: &[(u64, u64, i8)],
    unbiased: &[(u64, u64, i8)],
    opts: &LoadOptions,
) -> Result<DatasetBundle> {
    let mut users = BTreeMap::new();
    let mut items = BTreeMap::new();
    for &(u, i, _) in biased.iter().chain(unbiased) {
        users.insert(u, 0usize);
        items.insert(i, 0usize);
    }
    for (k, v) in users.values_mut().enumerate() {
        *v = k;
    }
    for (k, v) in items.values_mut().enumerate() {
        *v = k;
    }
    let dense = |rows: &[(u64, u64, i8)]| -> Vec<Interaction> {
        rows.iter()
            .map(|&(u, i, r)| Interaction::new(users[&u], items[&i], r))
            .collect()
    };
    let train = dense(biased);
    let pool = dedup_last_wins(&dense(unbiased));
    let (uniform, validation, test) = split_unbiased(&pool, opts.split, opts.seed)?;
    let bundle = DatasetBundle {
        train,
        uniform,
        validation,
        test,
        n_users: users.len(),
        n_items: items.len(),
        feedback_kind: FeedbackKind::Explicit,
        user_ids: users.keys().copied().collect(),
        item_ids: items.keys().copied().collect(),
        seed: opts.seed,
    };
    bundle.validate()?;
    if opts.implicit {
        Ok(to_implicit(&bundle)?)
    } else {
        Ok(bundle)
    }
}

/// Loads a biased and an unbiased `user item rating` file into a bundle.
pub fn load_explicit(biased: &Path, unbiased: &Path, opts: &LoadOptions) -> Result<DatasetBundle> {
    load_with(biased, unbiased, opts, read_triples)
}

/// Loads the two dense rating matrices of a Coat-style dataset directory
/// (`train.ascii`, `test.ascii`).
pub fn load_coat(dir: &Path, opts: &LoadOptions) -> Result<DatasetBundle> {
    load_with(
        &dir.join("train.ascii"),
        &dir.join("test.ascii"),
        opts,
        read_rating_matrix,
    )
}

pub const YAHOO_TRAIN: &str = "ydata-ymusic-rating-study-v1-0-train.txt";
pub const YAHOO_TEST: &str = "ydata-ymusic-rating-study-v1-0-test.txt";

/// Loads the Yahoo!R3 rating files from `dir`.
pub fn load_yahoo(dir: &Path, opts: &LoadOptions) -> Result<DatasetBundle> {
    load_explicit(&dir.join(YAHOO_TRAIN), &dir.join(YAHOO_TEST), opts)
}

fn load_with(
    biased: &Path,
    unbiased: &Path,
    opts: &LoadOptions,
    read: fn(&Path) -> Result<Vec<RawRating>>,
) -> Result<DatasetBundle> {
    let b = read(biased)?;
    let u = read(unbiased)?;
    check_ranges(biased, &b, opts)?;
    check_ranges(unbiased, &u, opts)?;
    bundle_from_rows(&to_labelled(biased, &b)?, &to_labelled(unbiased, &u)?, opts)
}

fn split_text(rows: &[Interaction]) -> String {
    let mut s = String::with_capacity(rows.len() * 16);
    for x in rows {
        match x.position {
            Some(p) => writeln!(s, "{} {} {} {}", x.user, x.item, x.label, p),
            None => writeln!(s, "{} {} {}", x.user, x.item, x.label),
        }
        .expect("writing to a String");
    }
    s
}

fn ids_text(ids: &[u64]) -> String {
    let mut s = String::with_capacity(ids.len() * 8);
    for id in ids {
        writeln!(s, "{id}").expect("writing to a String");
    }
    s
}

/// SHA-256 over the canonical text of every split, the id maps, the grid
/// size and the feedback kind.
pub fn fingerprint(bundle: &DatasetBundle) -> String {
    let mut h = Sha256::new();
    h.update(format!(
        "{} {} {}\n",
        bundle.n_users,
        bundle.n_items,
        bundle.feedback_kind.as_str()
    ));
    for rows in [&bundle.train, &bundle.uniform, &bundle.validation, &bundle.test] {
        h.update(split_text(rows));
        h.update(b"--\n");
    }
    h.update(ids_text(&bundle.user_ids));
    h.update(b"--\n");
    h.update(ids_text(&bundle.item_ids));
    hex::encode(h.finalize())
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    schema_version: u32,
    n_users: usize,
    n_items: usize,
    feedback_kind: String,
    seed: u64,
    counts: BTreeMap<String, usize>,
    fingerprint: String,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(Error::io(path))?);
    w.write_all(text.as_bytes()).map_err(Error::io(path))?;
    w.flush().map_err(Error::io(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::io(path))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

pub(crate) fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("plain structs serialize to TOML")
}

pub(crate) fn from_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))
}

fn splits(bundle: &DatasetBundle) -> [&Vec<Interaction>; 4] {
    [&bundle.train, &bundle.uniform, &bundle.validation, &bundle.test]
}

/// Writes `bundle` into `dir`, creating it if needed.
pub fn write_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<()> {
    create_dir(dir)?;
    let meta = BundleMeta {
        schema_version: BUNDLE_SCHEMA,
        n_users: bundle.n_users,
        n_items: bundle.n_items,
        feedback_kind: bundle.feedback_kind.as_str().into(),
        seed: bundle.seed,
        counts: SPLITS
            .iter()
            .zip(splits(bundle))
            .map(|(name, rows)| (name.to_string(), rows.len()))
            .collect(),
        fingerprint: fingerprint(bundle),
    };
    write_text(&dir.join("bundle.toml"), &to_toml(&meta))?;
    for (name, rows) in SPLITS.iter().zip(splits(bundle)) {
        write_text(&dir.join(format!("{name}.txt")), &split_text(rows))?;
    }
    write_text(&dir.join("user_ids.txt"), &ids_text(&bundle.user_ids))?;
    write_text(&dir.join("item_ids.txt"), &ids_text(&bundle.item_ids))
}

/// File name of simulation ground truth inside a bundle directory.
pub const TRUTH_FILE: &str = "truth.txt";

/// Ground-truth scores, one line per user with `n_items` values.
pub fn write_truth(path: &Path, n_items: usize, truth: &[f64]) -> Result<()> {
    if n_items == 0 || !truth.len().is_multiple_of(n_items) {
        return Err(Error::format(path, "truth length is not a multiple of the item count"));
    }
    let mut text = String::with_capacity(truth.len() * 20);
    for row in truth.chunks(n_items) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
    }
    write_text(path, &text)
}

/// Reads a truth file written by [`write_truth`]; returns `(n_items, scores)`.
pub fn read_truth(path: &Path) -> Result<(usize, Vec<f64>)> {
    let mut width = None;
    let mut out = Vec::new();
    for (k, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        let mut n = 0;
        for f in line.split_whitespace() {
            out.push(f.parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                msg: format!("bad score {f:?}: {e}"),
            })?);
            n += 1;
        }
        if *width.get_or_insert(n) != n {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                msg: format!("expected {} scores, found {n}", width.unwrap_or(0)),
            });
        }
    }
    Ok((width.unwrap_or(0), out))
}

fn read_split(path: &Path) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (k, line) in open(path)?.lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(Error::io(path))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 3 && f.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("expected user item label [position], found {} fields", f.len()),
            });
        }
        let mut x = Interaction::new(
            parse_field(path, line_no, "user", f[0])?,
            parse_field(path, line_no, "item", f[1])?,
            parse_field(path, line_no, "label", f[2])?,
        );
        if let Some(p) = f.get(3) {
            x = x.at_position(parse_field(path, line_no, "position", p)?);
        }
        out.push(x);
    }
    Ok(out)
}

fn read_ids(path: &Path) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for (k, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if !line.trim().is_empty() {
            out.push(parse_field(path, k + 1, "id", line.trim())?);
        }
    }
    Ok(out)
}

/// Reads a bundle directory and checks it against its recorded fingerprint.
pub fn read_bundle(dir: &Path) -> Result<DatasetBundle> {
    let meta_path = dir.join("bundle.toml");
    let meta: BundleMeta = from_toml(&meta_path)?;
    if meta.schema_version != BUNDLE_SCHEMA {
        return Err(Error::format(
            &meta_path,
            format!("unsupported schema_version {}", meta.schema_version),
        ));
    }
    let kind = FeedbackKind::parse(&meta.feedback_kind)
        .ok_or_else(|| Error::format(&meta_path, format!("unknown feedback_kind {:?}", meta.feedback_kind)))?;
    let mut parts = Vec::with_capacity(4);
    for name in SPLITS {
        parts.push(read_split(&dir.join(format!("{name}.txt")))?);
    }
    let test = parts.pop().expect("four splits");
    let validation = parts.pop().expect("four splits");
    let uniform = parts.pop().expect("four splits");
    let train = parts.pop().expect("four splits");
    let bundle = DatasetBundle {
        train,
        uniform,
        validation,
        test,
        n_users: meta.n_users,
        n_items: meta.n_items,
        feedback_kind: kind,
        user_ids: read_ids(&dir.join("user_ids.txt"))?,
        item_ids: read_ids(&dir.join("item_ids.txt"))?,
        seed: meta.seed,
    };
    bundle.validate()?;
    if bundle.user_ids.len() != bundle.n_users || bundle.item_ids.len() != bundle.n_items {
        return Err(Error::format(dir, "id maps do not match the declared counts"));
    }
    let actual = fingerprint(&bundle);
    if actual != meta.fingerprint {
        return Err(Error::format(
            &meta_path,
            format!(
                "fingerprint mismatch: recorded {}, contents hash to {actual}",
                meta.fingerprint
            ),
        ));
    }
    Ok(bundle)
}

/// Base-model parameters with the run they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub schema_version: u32,
    pub seed: u64,
    pub epoch: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub user_factors: Vec<f64>,
    pub item_factors: Vec<f64>,
}

impl ModelCheckpoint {
    pub fn new(model: &FactorModel, seed: u64, epoch: usize) -> Self {
        ModelCheckpoint {
            schema_version: CHECKPOINT_SCHEMA,
            seed,
            epoch,
            n_users: model.n_users(),
            n_items: model.n_items(),
            dim: model.dim(),
            user_factors: model.user_factors().to_vec(),
            item_factors: model.item_factors().to_vec(),
        }
    }

    pub fn model(&self) -> Result<FactorModel> {
        Ok(FactorModel::from_factors(
            self.n_users,
            self.n_items,
            self.dim,
            self.user_factors.clone(),
            self.item_factors.clone(),
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl From<&Adam> for AdamState {
    fn from(a: &Adam) -> Self {
        AdamState {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
            first: a.first.clone(),
            second: a.second.clone(),
        }
    }
}

impl From<&AdamState> for Adam {
    fn from(s: &AdamState) -> Self {
        Adam {
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
            step: s.step,
            first: s.first.clone(),
            second: s.second.clone(),
        }
    }
}

/// Surrogate parameters plus the optimizer state, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaCheckpoint {
    pub schema_version: u32,
    pub seed: u64,
    pub epoch: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub n_positions: usize,
    pub phi1: Vec<f64>,
    pub phi2: Vec<f64>,
    pub phi3: Vec<f64>,
    pub optimizer: Option<[AdamState; 3]>,
}

impl MetaCheckpoint {
    pub fn new(meta: &MetaModel, optimizer: Option<&MetaOptimizer>, seed: u64, epoch: usize) -> Self {
        MetaCheckpoint {
            schema_version: CHECKPOINT_SCHEMA,
            seed,
            epoch,
            n_users: meta.n_users(),
            n_items: meta.n_items(),
            n_positions: meta.n_positions(),
            phi1: meta.phi1.clone(),
            phi2: meta.phi2.clone(),
            phi3: meta.phi3.clone(),
            optimizer: optimizer.map(|o| [(&o.phi1).into(), (&o.phi2).into(), (&o.phi3).into()]),
        }
    }

    pub fn meta(&self) -> Result<MetaModel> {
        Ok(MetaModel::from_parts(
            self.n_users,
            self.n_items,
            self.n_positions,
            self.phi1.clone(),
            self.phi2.clone(),
            self.phi3.clone(),
        )?)
    }

    pub fn optimizer_state(&self) -> Option<MetaOptimizer> {
        self.optimizer.as_ref().map(|[a, b, c]| MetaOptimizer {
            phi1: a.into(),
            phi2: b.into(),
            phi3: c.into(),
        })
    }
}

fn check_schema(path: &Path, version: u32) -> Result<()> {
    if version != CHECKPOINT_SCHEMA {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint schema_version {version}"),
        ));
    }
    Ok(())
}

pub fn write_model_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    write_text(path, &to_toml(ckpt))
}

pub fn read_model_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let c: ModelCheckpoint = from_toml(path)?;
    check_schema(path, c.schema_version)?;
    Ok(c)
}

pub fn write_meta_checkpoint(path: &Path, ckpt: &MetaCheckpoint) -> Result<()> {
    write_text(path, &to_toml(ckpt))
}

pub fn read_meta_checkpoint(path: &Path) -> Result<MetaCheckpoint> {
    let c: MetaCheckpoint = from_toml(path)?;
    check_schema(path, c.schema_version)?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_risk: f64,
    pub uniform_risk: f64,
    pub validation_ndcg: f64,
}

impl From<&EpochRecord> for TraceRow {
    fn from(r: &EpochRecord) -> Self {
        TraceRow {
            epoch: r.epoch,
            train_risk: r.train_risk,
            uniform_risk: r.uniform_risk,
            validation_ndcg: r.validation_ndcg,
        }
    }
}

/// Writes serializable rows as a headed CSV file.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn write_trace(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    write_csv(path, &trace.iter().map(TraceRow::from).collect::<Vec<_>>())
}
