//! HTTP service that serves a pairing plan to a human observer.
//!
//! Routes:
//! - `GET /api/session/:sid/next` → next trial, or 204 once everything is answered
//! - `POST /api/session/:sid/response` with `{trial_id, choice}` → 200, or 409
//!   for an unknown or already answered trial
//! - `GET /images/:id` → the image file

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response as HttpResponse};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{finalize, prepare_dir, trial_id, SessionConfig, SessionOutput, TrialLog};
use crate::error::Result;
use crate::model::{DatasetManifest, Response, TrialRecord};
use crate::pairing::PairingPlan;

/// Bounds (inclusive) on how many trials separate the two orders of a pair.
pub const MIN_GAP: usize = 3;
pub const MAX_GAP: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledTrial {
    pub trial_id: String,
    pub pair: usize,
    pub round: u32,
    pub first_id: String,
    pub second_id: String,
}

/// Serving order: each forward presentation in plan order, its reversal
/// inserted a seeded 3 to 10 trials later (or at the end when the plan runs
/// out).
pub fn human_schedule(plan: &PairingPlan, seed: u64) -> Vec<ScheduledTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<ScheduledTrial> = Vec::with_capacity(2 * plan.len());
    // (position due, reversed trial)
    let mut pending: Vec<(usize, ScheduledTrial)> = Vec::new();
    let flush_due = |order: &mut Vec<ScheduledTrial>, pending: &mut Vec<(usize, ScheduledTrial)>| loop {
        let due = pending
            .iter()
            .enumerate()
            .filter(|(_, (at, _))| *at <= order.len())
            .min_by_key(|(_, (at, t))| (*at, t.pair))
            .map(|(k, _)| k);
        match due {
            Some(k) => order.push(pending.remove(k).1),
            None => break,
        }
    };
    for (k, p) in plan.pairs.iter().enumerate() {
        flush_due(&mut order, &mut pending);
        order.push(ScheduledTrial {
            trial_id: trial_id(k, false),
            pair: k,
            round: p.round,
            first_id: p.a.clone(),
            second_id: p.b.clone(),
        });
        let gap = rng.gen_range(MIN_GAP..=MAX_GAP);
        pending.push((
            order.len() + gap,
            ScheduledTrial {
                trial_id: trial_id(k, true),
                pair: k,
                round: p.round,
                first_id: p.b.clone(),
                second_id: p.a.clone(),
            },
        ));
    }
    pending.sort_by_key(|(at, t)| (*at, t.pair));
    order.extend(pending.into_iter().map(|(_, t)| t));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HumanChoice {
    First,
    Second,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseBody {
    pub trial_id: String,
    pub choice: HumanChoice,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct NextTrial {
    pub trial_id: String,
    pub first_image_url: String,
    pub second_image_url: String,
    pub progress: Progress,
}

/// Why a response was refused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    UnknownTrial,
    AlreadyAnswered,
}

/// State of one human session; all mutation goes through `&mut self`.
pub struct HumanSession {
    sid: String,
    manifest: DatasetManifest,
    plan: PairingPlan,
    cfg: SessionConfig,
    image_root: PathBuf,
    schedule: Vec<ScheduledTrial>,
    answered: HashSet<String>,
    trials: Vec<TrialRecord>,
    log: TrialLog,
    output: Option<SessionOutput>,
}

impl HumanSession {
    /// Opens (or resumes) the session stored in `cfg.output_dir`.
    pub fn open(
        sid: impl Into<String>,
        manifest: DatasetManifest,
        plan: PairingPlan,
        cfg: SessionConfig,
        image_root: impl Into<PathBuf>,
    ) -> Result<Self> {
        cfg.validate()?;
        plan.validate_against(&manifest)?;
        let (log, trials) = prepare_dir(&cfg.output_dir, &manifest, &plan, cfg.seed)?;
        let schedule = human_schedule(&plan, cfg.seed);
        let answered = trials.iter().map(|t| t.trial_id.clone()).collect();
        let mut session = Self {
            sid: sid.into(),
            manifest,
            plan,
            cfg,
            image_root: image_root.into(),
            schedule,
            answered,
            trials,
            log,
            output: None,
        };
        if session.is_complete() {
            session.complete()?;
        }
        Ok(session)
    }

    pub fn sid(&self) -> &str {
        &self.sid
    }

    pub fn progress(&self) -> Progress {
        Progress {
            done: self.answered.len(),
            total: self.schedule.len(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.answered.len() == self.schedule.len()
    }

    pub fn output(&self) -> Option<&SessionOutput> {
        self.output.as_ref()
    }

    pub fn next_trial(&self) -> Option<NextTrial> {
        let t = self.schedule.iter().find(|t| !self.answered.contains(&t.trial_id))?;
        Some(NextTrial {
            trial_id: t.trial_id.clone(),
            first_image_url: format!("/images/{}", t.first_id),
            second_image_url: format!("/images/{}", t.second_id),
            progress: self.progress(),
        })
    }

    /// Logs one answer. Outputs are written once the last trial is in.
    pub fn respond(&mut self, trial: &str, choice: HumanChoice) -> Result<std::result::Result<Progress, Rejection>> {
        if self.answered.contains(trial) {
            return Ok(Err(Rejection::AlreadyAnswered));
        }
        let Some(t) = self.schedule.iter().find(|t| t.trial_id == trial) else {
            return Ok(Err(Rejection::UnknownTrial));
        };
        let record = TrialRecord {
            trial_id: t.trial_id.clone(),
            pair: t.pair,
            first_id: t.first_id.clone(),
            second_id: t.second_id.clone(),
            judge_id: format!("human:{}", self.sid),
            response: match choice {
                HumanChoice::First => Response::First,
                HumanChoice::Second => Response::Second,
            },
            round: t.round,
            raw_reply: None,
            failure: None,
            timestamp: Utc::now(),
        };
        self.log.append(&record)?;
        self.answered.insert(record.trial_id.clone());
        self.trials.push(record);
        if self.is_complete() {
            self.complete()?;
        }
        Ok(Ok(self.progress()))
    }

    fn complete(&mut self) -> Result<()> {
        let out = finalize(&self.manifest, &self.plan, self.trials.clone(), &self.cfg.methods, &self.cfg.aggregate)?;
        out.write(&self.cfg.output_dir)?;
        self.output = Some(out);
        Ok(())
    }

    pub fn image_path(&self, id: &str) -> Option<PathBuf> {
        self.manifest.get(id).map(|img| self.image_root.join(&img.file_ref))
    }
}

pub type SharedSession = Arc<Mutex<HumanSession>>;

pub fn router(session: SharedSession) -> Router {
    Router::new()
        .route("/api/session/:sid/next", get(next_handler))
        .route("/api/session/:sid/response", post(response_handler))
        .route("/images/:id", get(image_handler))
        .with_state(session)
}

fn error(status: StatusCode, message: impl Into<String>) -> HttpResponse {
    (status, Json(json!({"error": message.into()}))).into_response()
}

async fn next_handler(State(state): State<SharedSession>, UrlPath(sid): UrlPath<String>) -> HttpResponse {
    let session = state.lock().expect("session lock poisoned");
    if session.sid() != sid {
        return error(StatusCode::NOT_FOUND, format!("no session `{sid}`"));
    }
    match session.next_trial() {
        Some(next) => Json(next).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn response_handler(
    State(state): State<SharedSession>,
    UrlPath(sid): UrlPath<String>,
    Json(body): Json<ResponseBody>,
) -> HttpResponse {
    let mut session = state.lock().expect("session lock poisoned");
    if session.sid() != sid {
        return error(StatusCode::NOT_FOUND, format!("no session `{sid}`"));
    }
    match session.respond(&body.trial_id, body.choice) {
        Ok(Ok(progress)) => Json(json!({"progress": progress, "complete": session.is_complete()})).into_response(),
        Ok(Err(Rejection::AlreadyAnswered)) => error(StatusCode::CONFLICT, format!("trial `{}` already answered", body.trial_id)),
        Ok(Err(Rejection::UnknownTrial)) => error(StatusCode::CONFLICT, format!("unknown trial `{}`", body.trial_id)),
        Err(e) => {
            log::error!("session {sid}: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("bmp") => "image/bmp",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

async fn image_handler(State(state): State<SharedSession>, UrlPath(id): UrlPath<String>) -> HttpResponse {
    let path = state.lock().expect("session lock poisoned").image_path(&id);
    let Some(path) = path else {
        return error(StatusCode::NOT_FOUND, format!("unknown image `{id}`"));
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(e) => error(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())),
    }
}

/// Serves `session` on `listener` until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, session: HumanSession) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::new(Mutex::new(session)))).await
}
