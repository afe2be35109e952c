//! Binary quality comparators: given an ordered image pair and a prompt,
//! answer `First`, `Second` or `Abstain`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DatasetManifest, FailureKind, ImageRecord, Response, TrialRecord};

pub mod http;

pub use http::{parse_reply, HttpJudge, HttpJudgeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSlot {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptPart {
    Text(String),
    Image(ImageSlot),
}

/// The interleaved prompt used for every LMM query.
pub fn default_prompt() -> Vec<PromptPart> {
    vec![
        PromptPart::Text("This is the first image:".into()),
        PromptPart::Image(ImageSlot::First),
        PromptPart::Text("This is the second image:".into()),
        PromptPart::Image(ImageSlot::Second),
        PromptPart::Text("Which image has better visual quality?".into()),
    ]
}

/// Requires exactly one slot for each image.
pub fn validate_prompt(parts: &[PromptPart]) -> Result<()> {
    let count = |slot| parts.iter().filter(|p| **p == PromptPart::Image(slot)).count();
    if count(ImageSlot::First) != 1 || count(ImageSlot::Second) != 1 {
        return Err(Error::invalid("prompt must contain exactly one first and one second image slot"));
    }
    Ok(())
}

/// One ordered presentation.
#[derive(Debug, Clone, Copy)]
pub struct JudgeQuery<'a> {
    /// Stable key of the presentation; seeded judges derive their noise from it.
    pub trial_id: &'a str,
    pub prompt_parts: &'a [PromptPart],
    pub first: &'a ImageRecord,
    pub second: &'a ImageRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeVerdict {
    pub choice: Response,
    pub raw_reply: Option<String>,
    pub latency: Option<Duration>,
    /// Set when `choice` is `Abstain`.
    pub failure: Option<FailureKind>,
}

impl JudgeVerdict {
    pub fn choice(choice: Response) -> Self {
        Self {
            choice,
            raw_reply: None,
            latency: None,
            failure: None,
        }
    }

    pub fn abstain(failure: FailureKind, raw_reply: Option<String>) -> Self {
        Self {
            choice: Response::Abstain,
            raw_reply,
            latency: None,
            failure: Some(failure),
        }
    }
}

pub trait Judge: Send + Sync {
    fn id(&self) -> &str;

    fn judge(&self, query: &JudgeQuery<'_>) -> Result<JudgeVerdict>;

    /// Upper bound on simultaneous `judge` calls.
    fn max_concurrency(&self) -> usize {
        usize::MAX
    }
}

/// Independent RNG stream for one presentation, so results do not depend on
/// call order or thread scheduling.
pub(crate) fn query_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn mos_of(table: &HashMap<String, f64>, img: &ImageRecord) -> Result<f64> {
    table
        .get(&img.id)
        .copied()
        .or(img.mos)
        .ok_or_else(|| Error::MissingMos(img.id.clone()))
}

fn manifest_mos(manifest: &DatasetManifest) -> HashMap<String, f64> {
    manifest.mos_table()
}

/// The golden observer: prefers the higher MOS, ties go to the first image.
#[derive(Debug, Clone)]
pub struct OracleJudge {
    mos: HashMap<String, f64>,
}

impl OracleJudge {
    pub fn new(mos: HashMap<String, f64>) -> Self {
        Self { mos }
    }

    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        Self::new(manifest_mos(manifest))
    }
}

impl Judge for OracleJudge {
    fn id(&self) -> &str {
        "oracle"
    }

    fn judge(&self, q: &JudgeQuery<'_>) -> Result<JudgeVerdict> {
        let (x, y) = (mos_of(&self.mos, q.first)?, mos_of(&self.mos, q.second)?);
        Ok(JudgeVerdict::choice(if x >= y { Response::First } else { Response::Second }))
    }
}

/// Case V observer: each presentation perceives `mos + N(0, σ²)` per image.
#[derive(Debug, Clone)]
pub struct ThurstoneJudge {
    mos: HashMap<String, f64>,
    sigma: f64,
    seed: u64,
    id: String,
}

impl ThurstoneJudge {
    pub fn new(mos: HashMap<String, f64>, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self {
            mos,
            sigma,
            seed,
            id: format!("thurstone:{sigma}"),
        })
    }

    pub fn from_manifest(manifest: &DatasetManifest, sigma: f64, seed: u64) -> Result<Self> {
        Self::new(manifest_mos(manifest), sigma, seed)
    }
}

impl Judge for ThurstoneJudge {
    fn id(&self) -> &str {
        &self.id
    }

    fn judge(&self, q: &JudgeQuery<'_>) -> Result<JudgeVerdict> {
        let (x, y) = (mos_of(&self.mos, q.first)?, mos_of(&self.mos, q.second)?);
        let mut rng = query_rng(self.seed, q.trial_id);
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let u = x + self.sigma * e1;
        let w = y + self.sigma * e2;
        Ok(JudgeVerdict::choice(if u >= w { Response::First } else { Response::Second }))
    }
}

/// Content-blind judge that says `Second` with probability `p_second`.
#[derive(Debug, Clone)]
pub struct BiasedJudge {
    p_second: f64,
    seed: u64,
    id: String,
}

impl BiasedJudge {
    pub fn new(p_second: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_second) {
            return Err(Error::invalid(format!("p_second must lie in [0, 1], got {p_second}")));
        }
        Ok(Self {
            p_second,
            seed,
            id: format!("biased:{p_second}"),
        })
    }
}

impl Judge for BiasedJudge {
    fn id(&self) -> &str {
        &self.id
    }

    fn judge(&self, q: &JudgeQuery<'_>) -> Result<JudgeVerdict> {
        let u: f64 = query_rng(self.seed, q.trial_id).gen();
        Ok(JudgeVerdict::choice(if u < self.p_second { Response::Second } else { Response::First }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    HigherBetter,
    LowerBetter,
}

impl std::str::FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "higher-better" | "higher" => Ok(Polarity::HigherBetter),
            "lower-better" | "lower" => Ok(Polarity::LowerBetter),
            other => Err(Error::invalid(format!("unknown polarity `{other}`"))),
        }
    }
}

/// A precomputed per-image score table, e.g. from a no-reference metric.
#[derive(Debug, Clone)]
pub struct ScoredJudge {
    scores: HashMap<String, f64>,
    polarity: Polarity,
    id: String,
}

impl ScoredJudge {
    pub fn new(id: impl Into<String>, scores: HashMap<String, f64>, polarity: Polarity) -> Self {
        Self {
            scores,
            polarity,
            id: id.into(),
        }
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    pub fn scores(&self) -> &HashMap<String, f64> {
        &self.scores
    }

    /// Parses `id,score` CSV. A leading `# polarity: lower-better` line sets
    /// the polarity; the default is higher-better.
    pub fn from_csv_str(id: impl Into<String>, text: &str) -> Result<Self> {
        let mut polarity = Polarity::HigherBetter;
        let mut body = String::new();
        for line in text.lines() {
            let trimmed = line.trim();
            if let Some(rest) = trimmed.strip_prefix('#') {
                if let Some((key, value)) = rest.split_once(':') {
                    if key.trim().eq_ignore_ascii_case("polarity") {
                        polarity = value.parse()?;
                    }
                }
                continue;
            }
            body.push_str(line);
            body.push('\n');
        }
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
        let headers = reader.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (id_col, score_col) = match (col("id"), col("score")) {
            (Some(i), Some(s)) => (i, s),
            _ => return Err(Error::MalformedRow { row: 1, message: "expected columns id,score".into() }),
        };
        let mut scores = HashMap::new();
        for (k, rec) in reader.records().enumerate() {
            let rec = rec?;
            let row = k + 2;
            let image = rec.get(id_col).unwrap_or_default().to_string();
            let raw = rec.get(score_col).unwrap_or_default();
            let score: f64 = raw.parse().map_err(|_| Error::MalformedRow {
                row,
                message: format!("bad score `{raw}`"),
            })?;
            if !score.is_finite() {
                return Err(Error::NonFinite(score));
            }
            if scores.insert(image.clone(), score).is_some() {
                return Err(Error::DuplicateId(image));
            }
        }
        Ok(Self::new(id, scores, polarity))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scores");
        Self::from_csv_str(format!("scored:{stem}"), &text)
    }
}

impl Judge for ScoredJudge {
    fn id(&self) -> &str {
        &self.id
    }

    fn judge(&self, q: &JudgeQuery<'_>) -> Result<JudgeVerdict> {
        let get = |img: &ImageRecord| self.scores.get(&img.id).copied().ok_or_else(|| Error::MissingScore(img.id.clone()));
        let (x, y) = (get(q.first)?, get(q.second)?);
        let first_wins = match self.polarity {
            Polarity::HigherBetter => x >= y,
            Polarity::LowerBetter => x <= y,
        };
        Ok(JudgeVerdict::choice(if first_wins { Response::First } else { Response::Second }))
    }
}

/// Serves responses from a recorded trial log, matching presentation order.
#[derive(Debug)]
pub struct ReplayJudge {
    id: String,
    trials: Vec<TrialRecord>,
    consumed: Mutex<Vec<bool>>,
}

impl ReplayJudge {
    pub fn new(trials: Vec<TrialRecord>) -> Self {
        let id = trials
            .first()
            .map(|t| format!("replay:{}", t.judge_id))
            .unwrap_or_else(|| "replay".into());
        let consumed = Mutex::new(vec![false; trials.len()]);
        Self { id, trials, consumed }
    }
}

impl Judge for ReplayJudge {
    fn id(&self) -> &str {
        &self.id
    }

    fn judge(&self, q: &JudgeQuery<'_>) -> Result<JudgeVerdict> {
        let mut consumed = self.consumed.lock().expect("replay lock poisoned");
        let hit = self
            .trials
            .iter()
            .enumerate()
            .find(|(k, t)| !consumed[*k] && t.first_id == q.first.id && t.second_id == q.second.id);
        match hit {
            Some((k, t)) => {
                consumed[k] = true;
                Ok(JudgeVerdict {
                    choice: t.response,
                    raw_reply: t.raw_reply.clone(),
                    latency: None,
                    failure: t.failure,
                })
            }
            None => Err(Error::MissingTrial {
                first: q.first.id.clone(),
                second: q.second.id.clone(),
            }),
        }
    }

    fn max_concurrency(&self) -> usize {
        1
    }
}
