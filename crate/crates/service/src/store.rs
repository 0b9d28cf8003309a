//! Session state behind the HTTP layer.
//!
//! Writes to one session are serialized by that session's lock. Each write
//! is validated on a copy of the session, appended to the log, and only then
//! committed, so the in-memory state never runs ahead of the log. Reads of
//! the whole collection (`progress`) take the commit lock and therefore see
//! the state after some prefix of the log.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use drscreen_core::adjudication::{
    session_id_for, source_agreement, AdjudicationSession, CommentView, Panel, SeniorVisibility, SessionEvent,
    SessionProvenance, SourceAgreement, SourceCalls, Stage, Submission, MAX_SPECIALIST_ROUNDS,
    SYSTEM_ACTOR,
};
use drscreen_core::eventlog::{read_log, Clock, EventRecord, LogAppender};
use drscreen_core::model::{GradeValue, GraderId, GraderRole, ImageId, ReferenceValue, SessionId, Task};
use drscreen_core::sampling::AdjudicationSelection;
use drscreen_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::registry::Registry;

/// Round number reported for the senior's tie-break.
pub const TIE_BREAK_ROUND: u8 = MAX_SPECIALIST_ROUNDS + 1;

fn round_of(stage: Stage) -> u8 {
    match stage {
        Stage::Round(r) => r,
        Stage::TieBreak => TIE_BREAK_ROUND,
    }
}

/// Session status without any grade values, safe to show to anyone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: SessionId,
    pub image_id: ImageId,
    pub task: Task,
    pub state: String,
    /// Current round, `TIE_BREAK_ROUND` while awaiting the senior, absent once finished.
    pub round: Option<u8>,
    pub awaiting: Vec<GraderId>,
    pub final_value: Option<ReferenceValue>,
    pub provenance: Option<SessionProvenance>,
    pub submissions: usize,
    pub last_seq: u64,
}

impl SessionSummary {
    pub fn of(s: &AdjudicationSession) -> Self {
        SessionSummary {
            session_id: s.session_id.clone(),
            image_id: s.image_id.clone(),
            task: s.task,
            state: s.state.name().to_owned(),
            round: s.current_stage().map(round_of),
            awaiting: s.awaiting().into_iter().collect(),
            final_value: s.final_value,
            provenance: s.provenance,
            submissions: s.rounds.len(),
            last_seq: s.last_seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    pub session_id: SessionId,
    pub image_id: ImageId,
    pub task: Task,
    pub round: u8,
    pub stage: Stage,
    pub opened_at: DateTime<Utc>,
    pub visible_counterpart_grade: Option<GradeValue>,
    pub own_previous_grade: Option<GradeValue>,
    pub visible_comments: Vec<CommentView>,
    pub history: Vec<Submission>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRequest {
    pub grader_id: GraderId,
    pub value: GradeValue,
    #[serde(default)]
    pub comment: String,
    #[serde(default)]
    pub request_token: Option<String>,
    /// The round the client believes it is grading; a mismatch is a conflict.
    #[serde(default)]
    pub round: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRequest {
    pub selection: AdjudicationSelection,
    pub panel: Panel,
    #[serde(default)]
    pub senior_visibility: SeniorVisibility,
    /// Screening calls per image, for agreement reporting.
    #[serde(default)]
    pub sources: BTreeMap<ImageId, SourceCalls>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortResponse {
    pub task: Task,
    pub opened: Vec<SessionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProgress {
    pub task: Task,
    pub sessions: u64,
    pub resolved: u64,
    pub agreement: SourceAgreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub sessions: u64,
    pub events: u64,
    pub by_state: BTreeMap<String, u64>,
    pub provenance: BTreeMap<String, u64>,
    pub tasks: Vec<TaskProgress>,
}

type TokenKey = (SessionId, GraderId, String);

struct Committed {
    appender: LogAppender,
    sessions: BTreeMap<SessionId, AdjudicationSession>,
    responses: HashMap<TokenKey, SessionSummary>,
    events: u64,
}

impl Committed {
    fn remember(&mut self, record: &EventRecord, session: &AdjudicationSession) -> Result<(), Error> {
        if let Some(token) = SessionEvent::from_record(record)?.request_token() {
            let key = (record.session_id.clone(), record.actor.clone(), token.to_owned());
            self.responses.insert(key, SessionSummary::of(session));
        }
        Ok(())
    }
}

pub struct Store {
    registry: Registry,
    clock: Arc<dyn Clock + Send + Sync>,
    locks: RwLock<BTreeMap<SessionId, Arc<Mutex<()>>>>,
    committed: Mutex<Committed>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Store {
    /// Replays the log at `log_path` (created if missing) and opens it for appending.
    pub fn open(log_path: &Path, registry: Registry, clock: Arc<dyn Clock + Send + Sync>) -> Result<Self, ServiceError> {
        let records = if log_path.exists() { read_log(log_path)? } else { Vec::new() };
        let appender = LogAppender::open(log_path)?;
        let mut committed =
            Committed { appender, sessions: BTreeMap::new(), responses: HashMap::new(), events: 0 };
        for record in &records {
            if record.event_type == "session_opened" {
                if committed.sessions.contains_key(&record.session_id) {
                    return Err(Error::EventLog(format!("session {} opened twice", record.session_id)).into());
                }
                let session = AdjudicationSession::from_record(record)?;
                committed.sessions.insert(session.session_id.clone(), session);
            } else {
                let session = committed
                    .sessions
                    .get_mut(&record.session_id)
                    .ok_or_else(|| Error::EventLog(format!("event for unopened session {}", record.session_id)))?;
                session.apply(record)?;
                let snapshot = session.clone();
                committed.remember(record, &snapshot)?;
            }
            committed.events += 1;
        }
        log::info!("replayed {} events over {} sessions", records.len(), committed.sessions.len());
        let locks = committed.sessions.keys().map(|id| (id.clone(), Arc::new(Mutex::new(())))).collect();
        Ok(Store { registry, clock, locks: RwLock::new(locks), committed: Mutex::new(committed) })
    }

    fn registered(&self, grader: &GraderId) -> Result<GraderRole, ServiceError> {
        self.registry
            .role(grader)
            .ok_or_else(|| Error::Authorization(format!("{grader} is not a registered grader")).into())
    }

    fn session_lock(&self, id: &SessionId) -> Result<Arc<Mutex<()>>, ServiceError> {
        let locks = self.locks.read().unwrap_or_else(|p| p.into_inner());
        locks.get(id).cloned().ok_or_else(|| Error::UnknownSession(id.to_string()).into())
    }

    /// Sessions awaiting `grader`, oldest first. Seniors only ever appear
    /// as the awaited actor once a session is deadlocked.
    pub fn work_for(&self, grader: &GraderId) -> Result<Vec<WorkItem>, ServiceError> {
        let role = self.registered(grader)?;
        let committed = lock(&self.committed);
        let mut items = Vec::new();
        for s in committed.sessions.values().filter(|s| s.panel.is_member(grader)) {
            let Some(view) = s.view_for(grader)? else { continue };
            if role == GraderRole::SeniorSpecialist && view.stage != Stage::TieBreak {
                continue;
            }
            items.push(WorkItem {
                session_id: view.session_id,
                image_id: view.image_id,
                task: view.task,
                round: round_of(view.stage),
                stage: view.stage,
                opened_at: s.opened_at,
                visible_counterpart_grade: view.visible_counterpart_grade,
                own_previous_grade: view.own_previous_grade,
                visible_comments: view.visible_comments,
                history: view.history,
            });
        }
        items.sort_by(|a, b| (a.opened_at, &a.session_id).cmp(&(b.opened_at, &b.session_id)));
        Ok(items)
    }

    pub fn summary(&self, id: &SessionId) -> Result<SessionSummary, ServiceError> {
        let committed = lock(&self.committed);
        committed
            .sessions
            .get(id)
            .map(SessionSummary::of)
            .ok_or_else(|| Error::UnknownSession(id.to_string()).into())
    }

    /// Records one grade. The panel's senior is routed to the tie-break.
    pub fn submit(&self, session_id: &SessionId, req: GradeRequest) -> Result<SessionSummary, ServiceError> {
        self.registered(&req.grader_id)?;
        let slot = self.session_lock(session_id)?;
        let _serial = lock(&slot);

        let mut session = {
            let committed = lock(&self.committed);
            if let Some(token) = &req.request_token {
                let key = (session_id.clone(), req.grader_id.clone(), token.clone());
                if let Some(previous) = committed.responses.get(&key) {
                    return Ok(previous.clone());
                }
            }
            committed.sessions[session_id].clone()
        };

        let current = session.current_stage().map(round_of);
        if let Some(round) = req.round {
            if current != Some(round) {
                let now = current.map_or_else(|| session.state.name().to_owned(), |r| format!("round {r}"));
                return Err(ServiceError::new(
                    axum::http::StatusCode::CONFLICT,
                    "stale_round",
                    format!("submission for round {round} but session {session_id} is at {now}"),
                )
                .with_state(SessionSummary::of(&session)));
            }
        }

        let event = if req.grader_id == session.panel.senior {
            SessionEvent::TieBreakSubmitted { value: req.value, comment: req.comment, request_token: req.request_token }
        } else {
            SessionEvent::GradeSubmitted { value: req.value, comment: req.comment, request_token: req.request_token }
        };
        let record = event.into_record(session.last_seq + 1, session_id.clone(), req.grader_id, self.clock.now());
        let before = SessionSummary::of(&session);
        session.apply(&record).map_err(|e| ServiceError::from(e).with_state(before))?;

        let mut committed = lock(&self.committed);
        committed.appender.append(&record)?;
        committed.events += 1;
        committed.remember(&record, &session)?;
        let summary = SessionSummary::of(&session);
        committed.sessions.insert(session_id.clone(), session);
        Ok(summary)
    }

    /// Opens one session per selected image. Nothing is opened if any image
    /// already has a session for the task.
    pub fn open_cohort(&self, req: CohortRequest) -> Result<CohortResponse, ServiceError> {
        let task = req
            .selection
            .task
            .ok_or_else(|| ServiceError::bad_request("selection has no task"))?;
        for id in [&req.panel.specialist_a, &req.panel.specialist_b] {
            if self.registered(id)? != GraderRole::Specialist {
                return Err(Error::Domain(format!("{id} is not registered as a specialist")).into());
            }
        }
        if self.registered(&req.panel.senior)? != GraderRole::SeniorSpecialist {
            return Err(Error::Domain(format!("{} is not registered as a senior specialist", req.panel.senior)).into());
        }
        let unknown: Vec<String> =
            req.sources.keys().filter(|id| !req.selection.contains(id)).map(|id| id.to_string()).collect();
        if !unknown.is_empty() {
            return Err(ServiceError::bad_request(format!("sources for unselected images: {}", unknown.join(", "))));
        }

        let mut locks = self.locks.write().unwrap_or_else(|p| p.into_inner());
        let mut committed = lock(&self.committed);
        let mut opened = Vec::new();
        let mut records = Vec::new();
        for image_id in req.selection.all_ids() {
            let session_id = session_id_for(&image_id, task);
            if committed.sessions.contains_key(&session_id) {
                return Err(Error::Conflict(format!("image {image_id} already has a {task} session")).into());
            }
            let event = SessionEvent::SessionOpened {
                sources: req.sources.get(&image_id).copied(),
                image_id,
                task,
                panel: req.panel.clone(),
                senior_visibility: req.senior_visibility,
            };
            let record = event.into_record(1, session_id.clone(), SYSTEM_ACTOR.into(), self.clock.now());
            opened.push(AdjudicationSession::from_record(&record)?);
            records.push(record);
        }
        for record in &records {
            committed.appender.append(record)?;
            committed.events += 1;
        }
        let ids: Vec<SessionId> = opened.iter().map(|s| s.session_id.clone()).collect();
        for session in opened {
            locks.insert(session.session_id.clone(), Arc::new(Mutex::new(())));
            committed.sessions.insert(session.session_id.clone(), session);
        }
        log::info!("opened {} {task} sessions", ids.len());
        Ok(CohortResponse { task, opened: ids })
    }

    pub fn progress(&self) -> Progress {
        let committed = lock(&self.committed);
        let sessions = committed.sessions.values();
        let mut by_state: BTreeMap<String, u64> =
            ["awaiting_round", "awaiting_tie_break", "consensus", "tie_broken", "closed"]
                .into_iter()
                .map(|s| (s.to_owned(), 0))
                .collect();
        let mut provenance: BTreeMap<String, u64> =
            [("agreed_consensus".to_owned(), 0), ("senior_tie_break".to_owned(), 0)].into();
        for s in sessions.clone() {
            *by_state.entry(s.state.name().to_owned()).or_default() += 1;
            match s.provenance {
                Some(SessionProvenance::AgreedConsensus) => *provenance.get_mut("agreed_consensus").unwrap() += 1,
                Some(SessionProvenance::SeniorTieBreak) => *provenance.get_mut("senior_tie_break").unwrap() += 1,
                None => {}
            }
        }
        let tasks = Task::ALL
            .into_iter()
            .map(|task| {
                let of_task = || sessions.clone().filter(move |s| s.task == task);
                TaskProgress {
                    task,
                    sessions: of_task().count() as u64,
                    resolved: of_task().filter(|s| s.state.is_resolved()).count() as u64,
                    agreement: source_agreement(task, of_task()),
                }
            })
            .collect();
        Progress {
            sessions: committed.sessions.len() as u64,
            events: committed.events,
            by_state,
            provenance,
            tasks,
        }
    }

    /// Number of events in the log, including those replayed at start.
    pub fn event_count(&self) -> u64 {
        lock(&self.committed).events
    }

    /// Current state of every session, in id order.
    pub fn sessions(&self) -> Vec<AdjudicationSession> {
        lock(&self.committed).sessions.values().cloned().collect()
    }
}
