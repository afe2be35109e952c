//! Probing runs: dual-order querying of a pairing plan, an append-only trial
//! log, aggregation and evaluation, plus the convergence simulation.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use chrono::Utc;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregate::{map_estimate, run_method, AggregateConfig, MapConfig};
use crate::error::{Error, Result};
use crate::judges::{
    default_prompt, validate_prompt, BiasedJudge, Judge, JudgeQuery, OracleJudge, Polarity, PromptPart, ScoredJudge,
    ThurstoneJudge,
};
use crate::metrics::{eval_report, plcc, report_csv, EvalReport, Grouping};
use crate::model::{
    pair_outcomes, scores_csv, DatasetManifest, FailureKind, ImageRecord, Method, PairOutcome, PreferenceMatrix,
    RankingResult, Response, TrialRecord,
};
use crate::pairing::{coarse_rounds, PairingPlan};

pub mod human;

pub const TRIALS_FILE: &str = "trials.jsonl";
pub const PLAN_FILE: &str = "plan.jsonl";
pub const META_FILE: &str = "session.json";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const REPORT_FILE: &str = "report.csv";

fn default_methods() -> Vec<Method> {
    vec![Method::Map]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub prompt_parts: Vec<PromptPart>,
    pub rounds: u32,
    pub seed: u64,
    /// The first method also supplies the scores behind ρ in the report.
    pub methods: Vec<Method>,
    pub max_in_flight: usize,
    pub output_dir: PathBuf,
    pub aggregate: AggregateConfig,
    /// Abort once transport/judge failures exceed this fraction of trials.
    pub max_failure_rate: f64,
    /// Trials logged before the failure rate is checked.
    pub breaker_min_trials: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            prompt_parts: default_prompt(),
            rounds: crate::pairing::DEFAULT_ROUNDS,
            seed: 0,
            methods: default_methods(),
            max_in_flight: 1,
            output_dir: PathBuf::from("session"),
            aggregate: AggregateConfig::default(),
            max_failure_rate: 0.5,
            breaker_min_trials: 20,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        validate_prompt(&self.prompt_parts)?;
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be >= 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("at least one aggregation method is required"));
        }
        if self.max_in_flight == 0 {
            return Err(Error::invalid("max_in_flight must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(Error::invalid("max_failure_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Identity of a session directory, checked on every resume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub seed: u64,
    pub manifest_hash: String,
    pub plan_hash: String,
    pub n_pairs: usize,
}

impl SessionMeta {
    fn new(manifest: &DatasetManifest, plan: &PairingPlan, seed: u64) -> Self {
        Self {
            seed,
            manifest_hash: manifest.content_hash(),
            plan_hash: plan.content_hash(),
            n_pairs: plan.len(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn check(&self, other: &Self) -> Result<()> {
        if self.manifest_hash != other.manifest_hash {
            return Err(Error::SessionMismatch("manifest differs from the one the session was started with".into()));
        }
        if self.seed != other.seed {
            return Err(Error::SessionMismatch(format!("seed {} differs from recorded seed {}", other.seed, self.seed)));
        }
        if self.plan_hash != other.plan_hash {
            return Err(Error::SessionMismatch("pairing plan differs from the recorded plan".into()));
        }
        Ok(())
    }
}

/// Id of one presentation of plan pair `pair`.
pub fn trial_id(pair: usize, reversed: bool) -> String {
    format!("p{pair:06}-{}", if reversed { "ba" } else { "ab" })
}

/// Reads a trial log. A final line without its newline is treated as an
/// interrupted write and dropped; any other malformed line is an error.
/// Returns the trials and the byte length of the valid prefix.
pub fn read_trials(path: &Path) -> Result<(Vec<TrialRecord>, u64)> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut trials = Vec::new();
    let mut valid = 0u64;
    let mut offset = 0usize;
    for (k, chunk) in text.split_inclusive('\n').enumerate() {
        offset += chunk.len();
        let complete = chunk.ends_with('\n');
        let line = chunk.trim_end();
        if line.is_empty() {
            if complete {
                valid = offset as u64;
            }
            continue;
        }
        if !complete {
            log::warn!("{}: dropping truncated final line", path.display());
            break;
        }
        match serde_json::from_str::<TrialRecord>(line) {
            Ok(t) => {
                trials.push(t);
                valid = offset as u64;
            }
            Err(e) => {
                return Err(Error::MalformedRow {
                    row: k + 1,
                    message: format!("{}: {e}", path.display()),
                })
            }
        }
    }
    Ok((trials, valid))
}

pub fn load_trials(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    read_trials(path.as_ref()).map(|(t, _)| t)
}

/// Append-only JSONL writer; each record is flushed before returning.
pub struct TrialLog {
    file: File,
    path: PathBuf,
}

impl TrialLog {
    /// Opens `path` for appending after cutting any truncated tail.
    pub fn open(path: impl Into<PathBuf>) -> Result<(Self, Vec<TrialRecord>)> {
        let path = path.into();
        let (trials, valid) = read_trials(&path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        file.set_len(valid).map_err(|e| Error::io(&path, e))?;
        Ok((Self { file, path }, trials))
    }

    pub fn append(&mut self, trial: &TrialRecord) -> Result<()> {
        let mut line = serde_json::to_vec(trial)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Everything a finished session produces.
#[derive(Debug, Clone)]
pub struct SessionOutput {
    pub trials: Vec<TrialRecord>,
    pub outcomes: Vec<PairOutcome>,
    pub matrix: PreferenceMatrix,
    pub rankings: Vec<RankingResult>,
    pub reports: Vec<EvalReport>,
}

impl SessionOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let put = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        put(MATRIX_FILE, self.matrix.to_csv_string())?;
        put(SCORES_FILE, scores_csv(&self.rankings))?;
        put(REPORT_FILE, report_csv(&self.reports))
    }

    pub fn ranking(&self, method: Method) -> Option<&RankingResult> {
        self.rankings.iter().find(|r| r.method == method)
    }
}

/// Builds outcomes, `C`, rankings and reports from a trial log. The result
/// depends only on the set of trials, not on their order in the log.
pub fn finalize(
    manifest: &DatasetManifest,
    plan: &PairingPlan,
    mut trials: Vec<TrialRecord>,
    methods: &[Method],
    aggregate: &AggregateConfig,
) -> Result<SessionOutput> {
    if methods.is_empty() {
        return Err(Error::invalid("at least one aggregation method is required"));
    }
    trials.sort_by(|a, b| (a.pair, &a.trial_id).cmp(&(b.pair, &b.trial_id)));
    let outcomes = pair_outcomes(&trials);
    let mut matrix = PreferenceMatrix::for_manifest(manifest)?;
    for o in &outcomes {
        matrix.accumulate(o)?;
    }
    let rankings = methods
        .iter()
        .map(|&m| run_method(m, &matrix, &outcomes, aggregate))
        .collect::<Result<Vec<_>>>()?;
    let cells = plan.cells();
    let grouping = if cells.is_empty() { Grouping::Dataset } else { Grouping::Cells(cells) };
    let reports = eval_report(&trials, manifest, &rankings[0], &grouping)?;
    Ok(SessionOutput {
        trials,
        outcomes,
        matrix,
        rankings,
        reports,
    })
}

/// Creates or reopens a session directory and returns the open log with the
/// trials already recorded.
fn prepare_dir(
    dir: &Path,
    manifest: &DatasetManifest,
    plan: &PairingPlan,
    seed: u64,
) -> Result<(TrialLog, Vec<TrialRecord>)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = SessionMeta::new(manifest, plan, seed);
    let meta_path = dir.join(META_FILE);
    if meta_path.exists() {
        SessionMeta::load(dir)?.check(&meta)?;
    } else {
        let trials_path = dir.join(TRIALS_FILE);
        if trials_path.metadata().map(|m| m.len() > 0).unwrap_or(false) {
            return Err(Error::SessionMismatch(format!(
                "{} holds trials but no {META_FILE}",
                dir.display()
            )));
        }
        let plan_path = dir.join(PLAN_FILE);
        std::fs::write(&plan_path, plan.to_jsonl()).map_err(|e| Error::io(&plan_path, e))?;
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    }
    let (log, mut trials) = TrialLog::open(dir.join(TRIALS_FILE))?;

    let mut seen = HashSet::new();
    trials.retain(|t| seen.insert(t.trial_id.clone()));
    for t in &trials {
        let pair = plan.pairs.get(t.pair).ok_or_else(|| {
            Error::SessionMismatch(format!("trial {} refers to pair {} outside the plan", t.trial_id, t.pair))
        })?;
        let forward = (t.first_id == pair.a && t.second_id == pair.b) && t.trial_id == trial_id(t.pair, false);
        let reverse = (t.first_id == pair.b && t.second_id == pair.a) && t.trial_id == trial_id(t.pair, true);
        if !(forward || reverse) {
            return Err(Error::SessionMismatch(format!("trial {} does not match the plan", t.trial_id)));
        }
    }
    Ok((log, trials))
}

fn is_hard_failure(t: &TrialRecord) -> bool {
    matches!(t.failure, Some(FailureKind::Transport | FailureKind::Judge))
}

fn ask(judge: &dyn Judge, prompt: &[PromptPart], id: &str, first: &ImageRecord, second: &ImageRecord) -> (Response, Option<String>, Option<FailureKind>) {
    let query = JudgeQuery {
        trial_id: id,
        prompt_parts: prompt,
        first,
        second,
    };
    match judge.judge(&query) {
        Ok(v) => {
            let failure = if v.choice == Response::Abstain {
                Some(v.failure.unwrap_or(FailureKind::Parse))
            } else {
                None
            };
            (v.choice, v.raw_reply, failure)
        }
        Err(e) => (Response::Abstain, Some(e.to_string()), Some(FailureKind::Judge)),
    }
}

struct Job<'a> {
    pair: usize,
    round: u32,
    id: String,
    first: &'a ImageRecord,
    second: &'a ImageRecord,
}

/// Queries every missing presentation of `plan` and then finalizes.
///
/// Each trial is appended to `trials.jsonl` and flushed as soon as it
/// arrives. Re-running on a directory holding a partial log continues it.
pub fn run_session(
    manifest: &DatasetManifest,
    plan: &PairingPlan,
    judge: &dyn Judge,
    cfg: &SessionConfig,
) -> Result<SessionOutput> {
    cfg.validate()?;
    plan.validate_against(manifest)?;
    let dir = cfg.output_dir.as_path();
    let (mut log, mut trials) = prepare_dir(dir, manifest, plan, cfg.seed)?;

    let done: HashSet<String> = trials.iter().map(|t| t.trial_id.clone()).collect();
    let mut jobs = Vec::new();
    for (k, p) in plan.pairs.iter().enumerate() {
        let a = manifest.get(&p.a).ok_or_else(|| Error::UnknownId(p.a.clone()))?;
        let b = manifest.get(&p.b).ok_or_else(|| Error::UnknownId(p.b.clone()))?;
        for (reversed, first, second) in [(false, a, b), (true, b, a)] {
            let id = trial_id(k, reversed);
            if !done.contains(&id) {
                jobs.push(Job {
                    pair: k,
                    round: p.round,
                    id,
                    first,
                    second,
                });
            }
        }
    }
    if jobs.is_empty() {
        log::info!("{}: all {} trials already recorded", dir.display(), trials.len());
    }

    let judge_id = judge.id().to_string();
    let make = |job: &Job<'_>| {
        let (response, raw_reply, failure) = ask(judge, &cfg.prompt_parts, &job.id, job.first, job.second);
        TrialRecord {
            trial_id: job.id.clone(),
            pair: job.pair,
            first_id: job.first.id.clone(),
            second_id: job.second.id.clone(),
            judge_id: judge_id.clone(),
            response,
            round: job.round,
            raw_reply,
            failure,
            timestamp: Utc::now(),
        }
    };

    let mut hard = trials.iter().filter(|t| is_hard_failure(t)).count();
    let mut tripped = None;
    let mut record = |t: TrialRecord, trials: &mut Vec<TrialRecord>| -> Result<bool> {
        log.append(&t)?;
        hard += is_hard_failure(&t) as usize;
        trials.push(t);
        let total = trials.len();
        if total >= cfg.breaker_min_trials && hard as f64 > cfg.max_failure_rate * total as f64 {
            tripped = Some(format!("{hard} of {total} trials failed (limit {:.0}%)", cfg.max_failure_rate * 100.0));
            return Ok(false);
        }
        Ok(true)
    };

    let workers = cfg.max_in_flight.min(judge.max_concurrency()).min(jobs.len()).max(1);
    if workers == 1 {
        for job in &jobs {
            if !record(make(job), &mut trials)? {
                break;
            }
        }
    } else {
        let next = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let (tx, rx) = mpsc::channel::<TrialRecord>();
        let outcome: Result<()> = std::thread::scope(|scope| {
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, stop, jobs, make) = (&next, &stop, &jobs, &make);
                scope.spawn(move || loop {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    let Some(job) = jobs.get(k) else { break };
                    if tx.send(make(job)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            let mut result = Ok(());
            for t in rx {
                if result.is_err() || stop.load(Ordering::SeqCst) {
                    continue;
                }
                match record(t, &mut trials) {
                    Ok(true) => {}
                    Ok(false) => stop.store(true, Ordering::SeqCst),
                    Err(e) => {
                        stop.store(true, Ordering::SeqCst);
                        result = Err(e);
                    }
                }
            }
            result
        });
        outcome?;
    }
    if let Some(reason) = tripped {
        return Err(Error::Aborted(reason));
    }

    let out = finalize(manifest, plan, trials, &cfg.methods, &cfg.aggregate)?;
    out.write(dir)?;
    Ok(out)
}

/// Continues the session stored in `dir`, reusing its plan and seed.
pub fn resume_session(dir: &Path, manifest: &DatasetManifest, judge: &dyn Judge, cfg: &SessionConfig) -> Result<SessionOutput> {
    let meta = SessionMeta::load(dir)?;
    let plan = load_plan(dir)?;
    let cfg = SessionConfig {
        seed: meta.seed,
        output_dir: dir.to_path_buf(),
        ..cfg.clone()
    };
    run_session(manifest, &plan, judge, &cfg)
}

pub fn load_plan(dir: &Path) -> Result<PairingPlan> {
    let path = dir.join(PLAN_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    PairingPlan::from_jsonl(&text)
}

/// Recomputes the outputs of `dir` from its trial log without querying a
/// judge.
pub fn reaggregate(dir: &Path, manifest: &DatasetManifest, methods: &[Method], aggregate: &AggregateConfig) -> Result<SessionOutput> {
    if let Ok(meta) = SessionMeta::load(dir) {
        if meta.manifest_hash != manifest.content_hash() {
            return Err(Error::SessionMismatch("manifest differs from the one the session was started with".into()));
        }
    }
    let plan = load_plan(dir)?;
    let trials = load_trials(dir.join(TRIALS_FILE))?;
    finalize(manifest, &plan, trials, methods, aggregate)
}

/// Simulated judges for [`simulate_convergence`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimJudge {
    Oracle,
    Thurstone { sigma: f64 },
    Biased { p_second: f64 },
    /// A fixed score table `truth + N(0, σ²)`, drawn once per repeat.
    NoisyScores { sigma: f64 },
}

impl std::str::FromStr for SimJudge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = s.split_once(':').unwrap_or((s, ""));
        let num = || {
            arg.parse::<f64>()
                .map_err(|_| Error::invalid(format!("judge `{s}` needs a numeric argument")))
        };
        match name {
            "oracle" => Ok(SimJudge::Oracle),
            "thurstone" => Ok(SimJudge::Thurstone { sigma: num()? }),
            "biased" => Ok(SimJudge::Biased { p_second: num()? }),
            "noisy" => Ok(SimJudge::NoisyScores { sigma: num()? }),
            _ => Err(Error::invalid(format!("unknown simulated judge `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergencePoint {
    pub rounds: u32,
    /// NaN when some repeat produced constant scores.
    pub mean_plcc: f64,
    pub per_repeat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceCurve {
    pub points: Vec<ConvergencePoint>,
    /// PLCC of the judge's own latent scores against truth, averaged over
    /// repeats; `None` for content-blind judges.
    pub bound: Option<f64>,
}

impl ConvergenceCurve {
    pub fn to_csv(&self) -> String {
        let bound = self.bound.map(|b| format!("{b:.6}")).unwrap_or_default();
        let mut out = String::from("rounds,mean_plcc,bound\n");
        for p in &self.points {
            out.push_str(&format!("{},{:.6},{bound}\n", p.rounds, p.mean_plcc));
        }
        out
    }
}

/// Mean PLCC between MAP scores and true scores after `M = 1..=m_max` coarse
/// rounds. True scores are uniform on `[0, 100]`; each `M` reuses the
/// judgments of the first `M` rounds of one `m_max`-round plan.
pub fn simulate_convergence(
    n: usize,
    judge: SimJudge,
    m_max: u32,
    repeats: usize,
    seed: u64,
    map: &MapConfig,
) -> Result<ConvergenceCurve> {
    if n < 2 {
        return Err(Error::invalid("simulation needs N >= 2"));
    }
    if m_max == 0 {
        return Err(Error::invalid("M_max must be >= 1"));
    }
    if repeats == 0 {
        return Err(Error::invalid("repeats must be >= 1"));
    }
    let prompt = default_prompt();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut curves = vec![Vec::with_capacity(repeats); m_max as usize];
    let mut bounds = Vec::new();

    for _ in 0..repeats {
        let (plan_seed, judge_seed) = (master.gen::<u64>(), master.gen::<u64>());
        let truth: Vec<f64> = (0..n).map(|_| master.gen_range(0.0..=100.0)).collect();
        let images = truth
            .iter()
            .enumerate()
            .map(|(k, &t)| ImageRecord::new(format!("s{k:05}"), "sim", format!("s{k:05}.png")).with_mos(t))
            .collect();
        let manifest = DatasetManifest::new("sim", images)?;
        let mos: HashMap<String, f64> = manifest.mos_table();

        let boxed: Box<dyn Judge> = match judge {
            SimJudge::Oracle => {
                bounds.push(1.0);
                Box::new(OracleJudge::new(mos))
            }
            SimJudge::Thurstone { sigma } => {
                bounds.push(1.0);
                Box::new(ThurstoneJudge::new(mos, sigma, judge_seed)?)
            }
            SimJudge::Biased { p_second } => Box::new(BiasedJudge::new(p_second, judge_seed)?),
            SimJudge::NoisyScores { sigma } => {
                let mut rng = ChaCha8Rng::seed_from_u64(judge_seed);
                let noisy: Vec<f64> = truth.iter().map(|t| t + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
                bounds.push(plcc(&noisy, &truth)?);
                let table = manifest.ids().into_iter().zip(noisy).collect();
                Box::new(ScoredJudge::new("noisy", table, Polarity::HigherBetter))
            }
        };

        let plan = coarse_rounds(&manifest, m_max, plan_seed)?;
        let mut matrix = PreferenceMatrix::for_manifest(&manifest)?;
        let mut cursor = 0;
        for m in 1..=m_max {
            while cursor < plan.pairs.len() && plan.pairs[cursor].round <= m {
                let p = &plan.pairs[cursor];
                let (a, b) = (manifest.get(&p.a).expect("plan id"), manifest.get(&p.b).expect("plan id"));
                let (xy, _, _) = ask(boxed.as_ref(), &prompt, &trial_id(cursor, false), a, b);
                let (yx, _, _) = ask(boxed.as_ref(), &prompt, &trial_id(cursor, true), b, a);
                matrix.accumulate(&PairOutcome::from_presentations(&p.a, &p.b, xy, yx))?;
                cursor += 1;
            }
            let scores = map_estimate(&matrix, map)?.scores;
            curves[m as usize - 1].push(plcc(&scores, &truth).unwrap_or(f64::NAN));
        }
    }

    let points = curves
        .into_iter()
        .enumerate()
        .map(|(k, per_repeat)| ConvergencePoint {
            rounds: k as u32 + 1,
            mean_plcc: per_repeat.iter().sum::<f64>() / per_repeat.len() as f64,
            per_repeat,
        })
        .collect();
    let bound = (!bounds.is_empty()).then(|| bounds.iter().sum::<f64>() / bounds.len() as f64);
    Ok(ConvergenceCurve { points, bound })
}
