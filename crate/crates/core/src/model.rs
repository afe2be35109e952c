//! Shared domain model: image manifests, judge trials, dual-order pair
//! outcomes and the preference count matrix.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One image of the test set, with its optional ground-truth MOS and
/// distortion metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    #[serde(rename = "dataset")]
    pub dataset_id: String,
    #[serde(rename = "path")]
    pub file_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mos: Option<f64>,
    #[serde(default, rename = "dist_type", skip_serializing_if = "Option::is_none")]
    pub distortion_type: Option<String>,
    #[serde(default, rename = "dist_level", skip_serializing_if = "Option::is_none")]
    pub distortion_level: Option<u32>,
    #[serde(default, rename = "ref_id", skip_serializing_if = "Option::is_none")]
    pub reference_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub si: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cf: Option<f64>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, dataset_id: impl Into<String>, file_ref: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            dataset_id: dataset_id.into(),
            file_ref: file_ref.into(),
            mos: None,
            distortion_type: None,
            distortion_level: None,
            reference_id: None,
            si: None,
            cf: None,
        }
    }

    pub fn with_mos(mut self, mos: f64) -> Self {
        self.mos = Some(mos);
        self
    }

    pub fn with_distortion(mut self, reference_id: &str, kind: &str, level: u32) -> Self {
        self.reference_id = Some(reference_id.to_string());
        self.distortion_type = Some(kind.to_string());
        self.distortion_level = Some(level);
        self
    }
}

fn default_scale() -> (f64, f64) {
    (0.0, 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default = "default_scale")]
    pub mos_scale: (f64, f64),
    pub images: Vec<ImageRecord>,
}

const CSV_COLUMNS: [&str; 7] = ["id", "dataset", "path", "mos", "dist_type", "dist_level", "ref_id"];

impl DatasetManifest {
    /// Builds a manifest with the default `[0, 100]` MOS scale and validates it.
    pub fn new(name: impl Into<String>, images: Vec<ImageRecord>) -> Result<Self> {
        let manifest = Self {
            name: name.into(),
            mos_scale: default_scale(),
            images,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() {
            return Err(Error::invalid("manifest has no images"));
        }
        let (lo, hi) = self.mos_scale;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("bad mos scale ({lo}, {hi})")));
        }
        let mut seen = HashSet::with_capacity(self.images.len());
        for img in &self.images {
            if img.id.is_empty() {
                return Err(Error::invalid("empty image id"));
            }
            if !seen.insert(img.id.as_str()) {
                return Err(Error::DuplicateId(img.id.clone()));
            }
            if let Some(mos) = img.mos {
                let (min, max) = (lo.max(0.0), hi.min(100.0));
                if !(mos >= min && mos <= max) {
                    return Err(Error::MosOutOfRange {
                        id: img.id.clone(),
                        mos,
                        min,
                        max,
                    });
                }
            }
            if img.distortion_level.is_some() && img.distortion_type.is_none() {
                return Err(Error::invalid(format!(
                    "image `{}` has a distortion level but no distortion type",
                    img.id
                )));
            }
            if img.distortion_level == Some(0) {
                return Err(Error::invalid(format!("image `{}`: distortion level must be >= 1", img.id)));
            }
            for (name, v) in [("si", img.si), ("cf", img.cf)] {
                if let Some(v) = v {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::invalid(format!("image `{}`: bad {name} {v}", img.id)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|img| img.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.images.iter().map(|img| img.id.clone()).collect()
    }

    /// MOS lookup for every image that has one.
    pub fn mos_table(&self) -> HashMap<String, f64> {
        self.images
            .iter()
            .filter_map(|img| img.mos.map(|m| (img.id.clone(), m)))
            .collect()
    }

    /// Loads a manifest from `.json`, or from CSV for any other extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut text = String::new();
        File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|e| Error::io(path, e))?;
        let is_json = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false);
        if is_json {
            Self::from_json_str(&text)
        } else {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "manifest".to_string());
            Self::from_csv_str(&name, &text)
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn from_csv_str(name: &str, text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (id_col, ds_col, path_col) = match (col("id"), col("dataset"), col("path")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::MalformedRow {
                    row: 1,
                    message: "header must contain id, dataset and path".into(),
                })
            }
        };
        let (mos_col, type_col, level_col, ref_col) = (col("mos"), col("dist_type"), col("dist_level"), col("ref_id"));
        let (si_col, cf_col) = (col("si"), col("cf"));

        let mut images = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            // header is line 1
            let row = i + 2;
            let rec = rec.map_err(|e| Error::MalformedRow {
                row,
                message: e.to_string(),
            })?;
            let cell = |c: Option<usize>| -> Option<&str> { c.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()) };
            let required = |c: usize, name: &str| -> Result<String> {
                rec.get(c)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .ok_or_else(|| Error::MalformedRow {
                        row,
                        message: format!("missing {name}"),
                    })
            };
            let real = |c: Option<usize>, name: &str| -> Result<Option<f64>> {
                cell(c)
                    .map(|s| {
                        s.parse::<f64>().map_err(|_| Error::MalformedRow {
                            row,
                            message: format!("bad {name} `{s}`"),
                        })
                    })
                    .transpose()
            };
            let level = cell(level_col)
                .map(|s| {
                    s.parse::<u32>().map_err(|_| Error::MalformedRow {
                        row,
                        message: format!("bad dist_level `{s}`"),
                    })
                })
                .transpose()?;
            images.push(ImageRecord {
                id: required(id_col, "id")?,
                dataset_id: required(ds_col, "dataset")?,
                file_ref: required(path_col, "path")?,
                mos: real(mos_col, "mos")?,
                distortion_type: cell(type_col).map(str::to_string),
                distortion_level: level,
                reference_id: cell(ref_col).map(str::to_string),
                si: real(si_col, "si")?,
                cf: real(cf_col, "cf")?,
            });
        }
        Self::new(name, images)
    }

    pub fn to_csv_string(&self) -> String {
        let with_attrs = self.images.iter().any(|i| i.si.is_some() || i.cf.is_some());
        let mut out = CSV_COLUMNS.join(",");
        if with_attrs {
            out.push_str(",si,cf");
        }
        out.push('\n');
        let opt = |v: Option<String>| v.unwrap_or_default();
        for img in &self.images {
            let mut fields = vec![
                csv_field(&img.id),
                csv_field(&img.dataset_id),
                csv_field(&img.file_ref),
                opt(img.mos.map(|m| m.to_string())),
                opt(img.distortion_type.as_deref().map(csv_field)),
                opt(img.distortion_level.map(|l| l.to_string())),
                opt(img.reference_id.as_deref().map(csv_field)),
            ];
            if with_attrs {
                fields.push(opt(img.si.map(|v| v.to_string())));
                fields.push(opt(img.cf.map(|v| v.to_string())));
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Writes JSON for a `.json` path, CSV otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let is_json = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("json"))
            .unwrap_or(false);
        let text = if is_json { self.to_json_string() } else { self.to_csv_string() };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the canonical JSON form; used to detect a manifest
    /// swapped underneath a resumed session.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("manifest serializes");
        hex_digest(&canonical)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// A judge's answer to one ordered presentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Response {
    First,
    Second,
    Abstain,
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Response::First => "first",
            Response::Second => "second",
            Response::Abstain => "abstain",
        })
    }
}

/// Why a trial ended in `Abstain`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    /// The judge answered but no choice could be read from the reply.
    Parse,
    /// The request never produced a reply (retries exhausted).
    Transport,
    /// The judge rejected the query (e.g. missing MOS or score).
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    /// Index of the logical pair in the pairing plan.
    pub pair: usize,
    pub first_id: String,
    pub second_id: String,
    pub judge_id: String,
    pub response: Response,
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureKind>,
    pub timestamp: DateTime<Utc>,
}

/// The dual-order view of one logical pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairOutcome {
    /// Lexicographically smaller id.
    pub a_id: String,
    pub b_id: String,
    /// Response when presented as `(a, b)`.
    pub forward: Response,
    /// Response when presented as `(b, a)`.
    pub reverse: Response,
    pub consistent: bool,
}

impl PairOutcome {
    /// Builds the canonical outcome from the responses to `(x, y)` and `(y, x)`.
    pub fn from_presentations(x: &str, y: &str, xy: Response, yx: Response) -> Self {
        let (a_id, b_id, forward, reverse) = if x <= y {
            (x, y, xy, yx)
        } else {
            (y, x, yx, xy)
        };
        let consistent = matches!(
            (forward, reverse),
            (Response::First, Response::Second) | (Response::Second, Response::First)
        );
        Self {
            a_id: a_id.to_string(),
            b_id: b_id.to_string(),
            forward,
            reverse,
            consistent,
        }
    }

    /// `(winner, loser)` when the judge chose the same image in both orders.
    pub fn winner_loser(&self) -> Option<(&str, &str)> {
        match (self.consistent, self.forward) {
            (true, Response::First) => Some((&self.a_id, &self.b_id)),
            (true, Response::Second) => Some((&self.b_id, &self.a_id)),
            _ => None,
        }
    }
}

/// Pairs up trials by plan index, in plan order. Pairs missing one of the
/// two presentation orders are left out.
pub fn pair_outcomes(trials: &[TrialRecord]) -> Vec<PairOutcome> {
    let mut by_pair: BTreeMap<usize, Vec<&TrialRecord>> = BTreeMap::new();
    for t in trials {
        by_pair.entry(t.pair).or_default().push(t);
    }
    let mut outcomes = Vec::with_capacity(by_pair.len());
    for group in by_pair.values() {
        let Some(first) = group.first() else { continue };
        let reversed = group
            .iter()
            .find(|t| t.first_id == first.second_id && t.second_id == first.first_id);
        if let Some(rev) = reversed {
            outcomes.push(PairOutcome::from_presentations(
                &first.first_id,
                &first.second_id,
                first.response,
                rev.response,
            ));
        }
    }
    outcomes
}

/// Count matrix `C`: `C[i][j]` is how many times image `i` was consistently
/// preferred over image `j`.
///
/// Updates go through `&mut self`, so concurrent producers must funnel their
/// outcomes through a single owner; the final counts do not depend on the
/// order in which outcomes arrive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceMatrix {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
}

impl PreferenceMatrix {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::invalid("preference matrix needs at least 2 images"));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let n = ids.len();
        Ok(Self {
            ids,
            index,
            counts: vec![0; n * n],
        })
    }

    pub fn for_manifest(manifest: &DatasetManifest) -> Result<Self> {
        Self::new(manifest.ids())
    }

    /// Builds a matrix from dense row-major counts; the diagonal must be zero.
    pub fn from_counts(ids: Vec<String>, counts: &[Vec<u64>]) -> Result<Self> {
        let mut m = Self::new(ids)?;
        let n = m.n();
        if counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(Error::invalid(format!("count matrix must be {n}x{n}")));
        }
        for (i, row) in counts.iter().enumerate() {
            if row[i] != 0 {
                return Err(Error::invalid("diagonal counts must be zero"));
            }
            m.counts[i * n..(i + 1) * n].copy_from_slice(row);
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.ids.len() + j]
    }

    pub fn count(&self, winner: &str, loser: &str) -> Result<u64> {
        let i = self.index_of(winner).ok_or_else(|| Error::UnknownId(winner.to_string()))?;
        let j = self.index_of(loser).ok_or_else(|| Error::UnknownId(loser.to_string()))?;
        Ok(self.get(i, j))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Adds one count for the winner of a consistent outcome. Inconsistent
    /// outcomes (including any with an abstention) leave the matrix untouched.
    pub fn accumulate(&mut self, outcome: &PairOutcome) -> Result<()> {
        let a = self
            .index_of(&outcome.a_id)
            .ok_or_else(|| Error::UnknownId(outcome.a_id.clone()))?;
        let b = self
            .index_of(&outcome.b_id)
            .ok_or_else(|| Error::UnknownId(outcome.b_id.clone()))?;
        let n = self.n();
        match outcome.winner_loser() {
            Some((w, _)) if w == outcome.a_id => self.counts[a * n + b] += 1,
            Some(_) => self.counts[b * n + a] += 1,
            None => {}
        }
        Ok(())
    }

    /// Nonzero cells as `(winner, loser, count)`.
    pub fn nonzero(&self) -> Vec<(usize, usize, u64)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let c = self.counts[i * n + j];
                if c > 0 {
                    out.push((i, j, c));
                }
            }
        }
        out
    }

    /// Same counts under a new item order; `order[k]` is the old index that
    /// becomes row `k`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.n();
        if order.len() != n {
            return Err(Error::invalid("permutation length mismatch"));
        }
        let ids = order.iter().map(|&k| self.ids[k].clone()).collect();
        let mut out = Self::new(ids)?;
        for (r, &i) in order.iter().enumerate() {
            for (c, &j) in order.iter().enumerate() {
                out.counts[r * n + c] = self.counts[i * n + j];
            }
        }
        Ok(out)
    }

    /// Dense CSV: header row of ids, then one row per winner.
    pub fn to_csv_string(&self) -> String {
        let n = self.n();
        let mut out = String::from("id");
        for id in &self.ids {
            out.push(',');
            out.push_str(&csv_field(id));
        }
        out.push('\n');
        for i in 0..n {
            out.push_str(&csv_field(&self.ids[i]));
            for j in 0..n {
                out.push(',');
                out.push_str(&self.get(i, j).to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(self.to_csv_string().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Map,
    Mle,
    Perron,
    TrueSkill,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Map, Method::Mle, Method::Perron, Method::TrueSkill];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Map => "map",
            Method::Mle => "mle",
            Method::Perron => "perron",
            Method::TrueSkill => "trueskill",
        }
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
        match s.trim().to_ascii_lowercase().as_str() {
            "map" => Ok(Method::Map),
            "mle" => Ok(Method::Mle),
            "perron" => Ok(Method::Perron),
            "trueskill" => Ok(Method::TrueSkill),
            other => Err(Error::invalid(format!("unknown method `{other}`"))),
        }
    }
}

/// Global scores from one aggregator, aligned with `ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub method: Method,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub scores_0_100: Vec<f64>,
    /// Per-image rating deviation (TrueSkill only).
    pub sigma: Option<Vec<f64>>,
    pub rounds_used: u32,
    pub converged: bool,
    pub iterations: usize,
    /// Projected-gradient norm at exit (MAP and MLE only).
    pub final_gradient_norm: Option<f64>,
}

impl RankingResult {
    pub fn score(&self, id: &str) -> Option<f64> {
        self.ids.iter().position(|i| i == id).map(|k| self.scores[k])
    }

    pub fn score_map(&self) -> HashMap<String, f64> {
        self.ids.iter().cloned().zip(self.scores.iter().copied()).collect()
    }

    /// Rows of the score CSV (`id,method,score_internal,score_0_100,sigma`).
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (k, id) in self.ids.iter().enumerate() {
            let sigma = self
                .sigma
                .as_ref()
                .map(|s| format!("{:.10}", s[k]))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{:.10},{:.10},{}\n",
                csv_field(id),
                self.method,
                self.scores[k],
                self.scores_0_100[k],
                sigma
            ));
        }
        out
    }
}

pub const SCORES_CSV_HEADER: &str = "id,method,score_internal,score_0_100,sigma\n";

/// Full score CSV for several aggregators.
pub fn scores_csv(results: &[RankingResult]) -> String {
    let mut out = String::from(SCORES_CSV_HEADER);
    for r in results {
        out.push_str(&r.csv_rows());
    }
    out
}
