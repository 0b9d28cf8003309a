//! Specialist adjudication and reference-standard assembly.
//!
//! A session adjudicates one (image, task). Two specialists grade
//! independently in round 1. While they disagree they re-grade in further
//! rounds, each seeing their own previous grade, the counterpart's latest
//! grade and every comment left so far. After three rounds without
//! consensus the designated senior specialist decides alone. For the DR
//! task consensus is judged on the merged scale, so no-DR versus mild NPDR
//! counts as agreement.
//!
//! Rounds are simultaneous: a round closes once both specialists have
//! submitted, and only then does either see the other's grade.
//!
//! Every mutation goes through an [`EventRecord`]; replaying the same records
//! rebuilds identical state.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eventlog::{Clock, EventRecord};
use crate::model::{GradeValue, GraderId, ImageId, ReferenceValue, SessionId, Task};
use crate::sampling::AdjudicationSelection;

/// Grades each specialist may submit before the senior is called in.
pub const MAX_SPECIALIST_ROUNDS: u8 = 3;

/// Actor recorded for events not triggered by a grader.
pub const SYSTEM_ACTOR: &str = "system";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Panel {
    pub specialist_a: GraderId,
    pub specialist_b: GraderId,
    pub senior: GraderId,
}

impl Panel {
    pub fn new(a: impl Into<GraderId>, b: impl Into<GraderId>, senior: impl Into<GraderId>) -> Self {
        Panel { specialist_a: a.into(), specialist_b: b.into(), senior: senior.into() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.specialist_a == self.specialist_b {
            return Err(Error::Domain(format!("specialists must differ, both are {}", self.specialist_a)));
        }
        if self.senior == self.specialist_a || self.senior == self.specialist_b {
            return Err(Error::Domain(format!(
                "senior {} must differ from both specialists",
                self.senior
            )));
        }
        Ok(())
    }

    pub fn is_specialist(&self, id: &GraderId) -> bool {
        *id == self.specialist_a || *id == self.specialist_b
    }

    pub fn is_member(&self, id: &GraderId) -> bool {
        self.is_specialist(id) || *id == self.senior
    }

    fn counterpart(&self, id: &GraderId) -> &GraderId {
        if *id == self.specialist_a {
            &self.specialist_b
        } else {
            &self.specialist_a
        }
    }

    fn specialists(&self) -> BTreeSet<GraderId> {
        [self.specialist_a.clone(), self.specialist_b.clone()].into()
    }
}

/// Whether the senior sees the specialists' grades when breaking a tie.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeniorVisibility {
    #[default]
    Blind,
    History,
}

/// The screening calls that led to the image being adjudicated. Optional
/// context used for agreement reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCalls {
    pub regional: GradeValue,
    pub algorithm: GradeValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Round(u8),
    TieBreak,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionState {
    AwaitingRound { round: u8, pending: BTreeSet<GraderId> },
    AwaitingTieBreak { senior: GraderId },
    Consensus,
    TieBroken,
    /// Withdrawn without a result.
    Closed,
}

impl SessionState {
    pub fn name(&self) -> &'static str {
        match self {
            SessionState::AwaitingRound { .. } => "awaiting_round",
            SessionState::AwaitingTieBreak { .. } => "awaiting_tie_break",
            SessionState::Consensus => "consensus",
            SessionState::TieBroken => "tie_broken",
            SessionState::Closed => "closed",
        }
    }

    pub fn is_resolved(&self) -> bool {
        matches!(self, SessionState::Consensus | SessionState::TieBroken)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionProvenance {
    AgreedConsensus,
    SeniorTieBreak,
}

/// One recorded grade together with what its author could see when grading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub grader_id: GraderId,
    pub stage: Stage,
    pub value: GradeValue,
    pub comment: String,
    /// Counterpart's grade from the previous round; never set in round 1.
    pub visible_counterpart: Option<GradeValue>,
    pub visible_own_previous: Option<GradeValue>,
    /// Senior only: whether the specialists' history was shown.
    pub history_visible: bool,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentView {
    pub grader_id: GraderId,
    pub stage: Stage,
    pub text: String,
}

/// What an awaited grader is shown before submitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderView {
    pub session_id: SessionId,
    pub image_id: ImageId,
    pub task: Task,
    pub stage: Stage,
    pub visible_counterpart_grade: Option<GradeValue>,
    pub own_previous_grade: Option<GradeValue>,
    pub visible_comments: Vec<CommentView>,
    /// Full specialist history, only populated for a senior with history visibility.
    pub history: Vec<Submission>,
}

/// Events that change adjudication state. Stored as `event_type` + `payload`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event_type", content = "payload", rename_all = "snake_case")]
pub enum SessionEvent {
    SessionOpened {
        image_id: ImageId,
        task: Task,
        panel: Panel,
        #[serde(default)]
        senior_visibility: SeniorVisibility,
        #[serde(default)]
        sources: Option<SourceCalls>,
    },
    GradeSubmitted {
        value: GradeValue,
        #[serde(default)]
        comment: String,
        #[serde(default)]
        request_token: Option<String>,
    },
    TieBreakSubmitted {
        value: GradeValue,
        #[serde(default)]
        comment: String,
        #[serde(default)]
        request_token: Option<String>,
    },
    SessionClosed {
        reason: String,
    },
}

impl SessionEvent {
    pub fn into_record(self, seq: u64, session_id: SessionId, actor: GraderId, timestamp: DateTime<Utc>) -> EventRecord {
        let mut value = serde_json::to_value(&self).expect("session events always serialize");
        let obj = value.as_object_mut().expect("tagged enum serializes to an object");
        let event_type = obj
            .remove("event_type")
            .and_then(|v| v.as_str().map(str::to_owned))
            .expect("event_type tag present");
        let payload = obj.remove("payload").unwrap_or(serde_json::Value::Null);
        EventRecord { seq, session_id, event_type, actor, payload, timestamp }
    }

    pub fn from_record(record: &EventRecord) -> Result<Self> {
        let value = serde_json::json!({
            "event_type": record.event_type,
            "payload": record.payload,
        });
        serde_json::from_value(value)
            .map_err(|e| Error::EventLog(format!("session {} seq {}: {e}", record.session_id, record.seq)))
    }

    pub fn request_token(&self) -> Option<&str> {
        match self {
            SessionEvent::GradeSubmitted { request_token, .. }
            | SessionEvent::TieBreakSubmitted { request_token, .. } => request_token.as_deref(),
            _ => None,
        }
    }
}

pub fn session_id_for(image_id: &ImageId, task: Task) -> SessionId {
    SessionId(format!("{}:{}", task.code(), image_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjudicationSession {
    pub session_id: SessionId,
    pub image_id: ImageId,
    pub task: Task,
    pub panel: Panel,
    pub senior_visibility: SeniorVisibility,
    pub sources: Option<SourceCalls>,
    pub opened_at: DateTime<Utc>,
    pub rounds: Vec<Submission>,
    pub state: SessionState,
    pub final_value: Option<ReferenceValue>,
    pub provenance: Option<SessionProvenance>,
    /// Sequence number of the last applied event.
    pub last_seq: u64,
}

impl AdjudicationSession {
    /// New session awaiting both specialists in round 1.
    pub fn open(
        session_id: SessionId,
        image_id: ImageId,
        task: Task,
        panel: Panel,
        senior_visibility: SeniorVisibility,
        sources: Option<SourceCalls>,
        at: DateTime<Utc>,
    ) -> Result<Self> {
        panel.validate()?;
        if let Some(s) = &sources {
            if !s.regional.is_valid_for(task) || !s.algorithm.is_valid_for(task) {
                return Err(Error::Domain(format!("source calls do not match task {task}")));
            }
        }
        Ok(AdjudicationSession {
            session_id,
            image_id,
            task,
            state: SessionState::AwaitingRound { round: 1, pending: panel.specialists() },
            panel,
            senior_visibility,
            sources,
            opened_at: at,
            rounds: Vec::new(),
            final_value: None,
            provenance: None,
            last_seq: 0,
        })
    }

    pub fn is_resolved(&self) -> bool {
        self.state.is_resolved()
    }

    /// Graders whose submission the session is waiting on.
    pub fn awaiting(&self) -> BTreeSet<GraderId> {
        match &self.state {
            SessionState::AwaitingRound { pending, .. } => pending.clone(),
            SessionState::AwaitingTieBreak { senior } => [senior.clone()].into(),
            _ => BTreeSet::new(),
        }
    }

    pub fn current_stage(&self) -> Option<Stage> {
        match &self.state {
            SessionState::AwaitingRound { round, .. } => Some(Stage::Round(*round)),
            SessionState::AwaitingTieBreak { .. } => Some(Stage::TieBreak),
            _ => None,
        }
    }

    pub fn grades_by(&self, grader: &GraderId) -> usize {
        self.rounds.iter().filter(|s| s.grader_id == *grader).count()
    }

    fn grade_at(&self, grader: &GraderId, stage: Stage) -> Option<GradeValue> {
        self.rounds
            .iter()
            .find(|s| s.grader_id == *grader && s.stage == stage)
            .map(|s| s.value)
    }

    fn comments_before(&self, round: u8) -> Vec<CommentView> {
        self.rounds
            .iter()
            .filter(|s| matches!(s.stage, Stage::Round(r) if r < round) && !s.comment.is_empty())
            .map(|s| CommentView { grader_id: s.grader_id.clone(), stage: s.stage, text: s.comment.clone() })
            .collect()
    }

    /// The information shown to `grader` for their pending submission, or
    /// `None` if the session is not waiting on them.
    pub fn view_for(&self, grader: &GraderId) -> Result<Option<GraderView>> {
        if !self.panel.is_member(grader) {
            return Err(Error::Authorization(format!(
                "{grader} is not on the panel of session {}",
                self.session_id
            )));
        }
        let view = |stage, counterpart, own, comments, history| GraderView {
            session_id: self.session_id.clone(),
            image_id: self.image_id.clone(),
            task: self.task,
            stage,
            visible_counterpart_grade: counterpart,
            own_previous_grade: own,
            visible_comments: comments,
            history,
        };
        match &self.state {
            SessionState::AwaitingRound { round, pending } if pending.contains(grader) => {
                let stage = Stage::Round(*round);
                if *round == 1 {
                    return Ok(Some(view(stage, None, None, Vec::new(), Vec::new())));
                }
                let prev = Stage::Round(round - 1);
                let counterpart = self.grade_at(self.panel.counterpart(grader), prev);
                let own = self.grade_at(grader, prev);
                Ok(Some(view(stage, counterpart, own, self.comments_before(*round), Vec::new())))
            }
            SessionState::AwaitingTieBreak { senior } if senior == grader => {
                let (comments, history) = match self.senior_visibility {
                    SeniorVisibility::Blind => (Vec::new(), Vec::new()),
                    SeniorVisibility::History => {
                        (self.comments_before(MAX_SPECIALIST_ROUNDS + 1), self.rounds.clone())
                    }
                };
                Ok(Some(view(Stage::TieBreak, None, None, comments, history)))
            }
            _ => Ok(None),
        }
    }

    /// Records a specialist's grade for the current round.
    pub fn submit_grade(&mut self, grader: &GraderId, value: GradeValue, comment: &str, at: DateTime<Utc>) -> Result<()> {
        if !self.panel.is_member(grader) {
            return Err(Error::Authorization(format!(
                "{grader} is not on the panel of session {}",
                self.session_id
            )));
        }
        if *grader == self.panel.senior {
            return Err(Error::Sequencing(format!(
                "senior {grader} grades only through tie-break"
            )));
        }
        let round = match &self.state {
            SessionState::AwaitingRound { round, pending } => {
                if !pending.contains(grader) {
                    return Err(Error::Sequencing(format!(
                        "{grader} already submitted round {round} of session {}",
                        self.session_id
                    )));
                }
                *round
            }
            SessionState::AwaitingTieBreak { .. } => {
                return Err(Error::Protocol(format!(
                    "{grader} has already graded session {} {MAX_SPECIALIST_ROUNDS} times",
                    self.session_id
                )));
            }
            other => {
                return Err(Error::Sequencing(format!(
                    "session {} is {} and takes no further grades",
                    self.session_id,
                    other.name()
                )));
            }
        };
        if !value.is_valid_for(self.task) {
            return Err(Error::Domain(format!("{value:?} is not a valid grade for task {}", self.task)));
        }
        if self.grades_by(grader) >= MAX_SPECIALIST_ROUNDS as usize {
            return Err(Error::Protocol(format!("{grader} exceeded {MAX_SPECIALIST_ROUNDS} grades")));
        }

        let (visible_counterpart, visible_own_previous) = if round == 1 {
            (None, None)
        } else {
            let prev = Stage::Round(round - 1);
            (self.grade_at(self.panel.counterpart(grader), prev), self.grade_at(grader, prev))
        };
        self.rounds.push(Submission {
            grader_id: grader.clone(),
            stage: Stage::Round(round),
            value,
            comment: comment.to_owned(),
            visible_counterpart,
            visible_own_previous,
            history_visible: false,
            timestamp: at,
        });

        let SessionState::AwaitingRound { pending, .. } = &mut self.state else {
            unreachable!("checked above")
        };
        pending.remove(grader);
        if !pending.is_empty() {
            return Ok(());
        }

        let stage = Stage::Round(round);
        let a = self.grade_at(&self.panel.specialist_a, stage).expect("both submitted");
        let b = self.grade_at(&self.panel.specialist_b, stage).expect("both submitted");
        if a.agrees_with(b) {
            self.state = SessionState::Consensus;
            self.final_value = Some(a.canonical());
            self.provenance = Some(SessionProvenance::AgreedConsensus);
        } else if round >= MAX_SPECIALIST_ROUNDS {
            self.state = SessionState::AwaitingTieBreak { senior: self.panel.senior.clone() };
        } else {
            self.state = SessionState::AwaitingRound { round: round + 1, pending: self.panel.specialists() };
        }
        Ok(())
    }

    /// Senior decision after three rounds of disagreement.
    pub fn tiebreak(&mut self, grader: &GraderId, value: GradeValue, comment: &str, at: DateTime<Utc>) -> Result<()> {
        if !self.panel.is_member(grader) {
            return Err(Error::Authorization(format!(
                "{grader} is not on the panel of session {}",
                self.session_id
            )));
        }
        match &self.state {
            SessionState::AwaitingTieBreak { .. } => {}
            SessionState::AwaitingRound { round, .. } => {
                return Err(Error::Protocol(format!(
                    "tie-break requested in round {round} of session {}; specialists have not completed {MAX_SPECIALIST_ROUNDS} rounds",
                    self.session_id
                )));
            }
            other => {
                return Err(Error::Protocol(format!(
                    "session {} is {} and cannot be tie-broken",
                    self.session_id,
                    other.name()
                )));
            }
        }
        if *grader != self.panel.senior {
            return Err(Error::Authorization(format!(
                "only senior {} may break the tie on session {}",
                self.panel.senior, self.session_id
            )));
        }
        if !value.is_valid_for(self.task) {
            return Err(Error::Domain(format!("{value:?} is not a valid grade for task {}", self.task)));
        }
        self.rounds.push(Submission {
            grader_id: grader.clone(),
            stage: Stage::TieBreak,
            value,
            comment: comment.to_owned(),
            visible_counterpart: None,
            visible_own_previous: None,
            history_visible: self.senior_visibility == SeniorVisibility::History,
            timestamp: at,
        });
        self.state = SessionState::TieBroken;
        self.final_value = Some(value.canonical());
        self.provenance = Some(SessionProvenance::SeniorTieBreak);
        Ok(())
    }

    /// Withdraws an unresolved session.
    pub fn close(&mut self) -> Result<()> {
        if self.is_resolved() || self.state == SessionState::Closed {
            return Err(Error::Protocol(format!(
                "session {} is already {}",
                self.session_id,
                self.state.name()
            )));
        }
        self.state = SessionState::Closed;
        Ok(())
    }

    /// Builds a session from its opening event.
    pub fn from_record(record: &EventRecord) -> Result<Self> {
        if record.seq != 1 {
            return Err(Error::EventLog(format!(
                "session {} must open at seq 1, got {}",
                record.session_id, record.seq
            )));
        }
        match SessionEvent::from_record(record)? {
            SessionEvent::SessionOpened { image_id, task, panel, senior_visibility, sources } => {
                let mut session = AdjudicationSession::open(
                    record.session_id.clone(),
                    image_id,
                    task,
                    panel,
                    senior_visibility,
                    sources,
                    record.timestamp,
                )?;
                session.last_seq = 1;
                Ok(session)
            }
            other => Err(Error::EventLog(format!(
                "session {} starts with {other:?} instead of session_opened",
                record.session_id
            ))),
        }
    }

    /// Applies a follow-up event. The session is unchanged on error.
    pub fn apply(&mut self, record: &EventRecord) -> Result<()> {
        if record.session_id != self.session_id {
            return Err(Error::EventLog(format!(
                "event for {} applied to {}",
                record.session_id, self.session_id
            )));
        }
        if record.seq != self.last_seq + 1 {
            return Err(Error::EventLog(format!(
                "session {}: expected seq {}, got {}",
                self.session_id,
                self.last_seq + 1,
                record.seq
            )));
        }
        let mut next = self.clone();
        match SessionEvent::from_record(record)? {
            SessionEvent::SessionOpened { .. } => {
                return Err(Error::Conflict(format!("session {} is already open", self.session_id)));
            }
            SessionEvent::GradeSubmitted { value, comment, .. } => {
                next.submit_grade(&record.actor, value, &comment, record.timestamp)?
            }
            SessionEvent::TieBreakSubmitted { value, comment, .. } => {
                next.tiebreak(&record.actor, value, &comment, record.timestamp)?
            }
            SessionEvent::SessionClosed { .. } => next.close()?,
        }
        next.last_seq = record.seq;
        *self = next;
        Ok(())
    }
}

/// Options for opening a session.
#[derive(Debug, Clone, Default)]
pub struct SessionOptions {
    pub senior_visibility: SeniorVisibility,
    pub sources: Option<SourceCalls>,
}

/// Single-writer collection of sessions with its event log.
#[derive(Debug, Default, Clone, Serialize)]
pub struct AdjudicationEngine {
    sessions: BTreeMap<SessionId, AdjudicationSession>,
    #[serde(skip)]
    by_key: BTreeMap<(ImageId, Task), SessionId>,
    #[serde(skip)]
    log: Vec<EventRecord>,
}

impl AdjudicationEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sessions(&self) -> impl Iterator<Item = &AdjudicationSession> {
        self.sessions.values()
    }

    pub fn session(&self, id: &SessionId) -> Result<&AdjudicationSession> {
        self.sessions.get(id).ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn session_for(&self, image_id: &ImageId, task: Task) -> Option<&AdjudicationSession> {
        self.by_key.get(&(image_id.clone(), task)).and_then(|id| self.sessions.get(id))
    }

    pub fn log(&self) -> &[EventRecord] {
        &self.log
    }

    pub fn open_session(
        &mut self,
        image_id: ImageId,
        task: Task,
        panel: Panel,
        options: SessionOptions,
        clock: &dyn Clock,
    ) -> Result<&AdjudicationSession> {
        let session_id = session_id_for(&image_id, task);
        let event = SessionEvent::SessionOpened {
            image_id,
            task,
            panel,
            senior_visibility: options.senior_visibility,
            sources: options.sources,
        };
        let record = event.into_record(1, session_id.clone(), SYSTEM_ACTOR.into(), clock.now());
        self.apply(record)?;
        Ok(&self.sessions[&session_id])
    }

    pub fn submit_grade(
        &mut self,
        session_id: &SessionId,
        grader: &GraderId,
        value: GradeValue,
        comment: &str,
        clock: &dyn Clock,
    ) -> Result<&AdjudicationSession> {
        let event = SessionEvent::GradeSubmitted { value, comment: comment.to_owned(), request_token: None };
        self.record(session_id, grader, event, clock)
    }

    pub fn tiebreak(
        &mut self,
        session_id: &SessionId,
        senior: &GraderId,
        value: GradeValue,
        comment: &str,
        clock: &dyn Clock,
    ) -> Result<&AdjudicationSession> {
        let event = SessionEvent::TieBreakSubmitted { value, comment: comment.to_owned(), request_token: None };
        self.record(session_id, senior, event, clock)
    }

    pub fn close_session(&mut self, session_id: &SessionId, reason: &str, clock: &dyn Clock) -> Result<&AdjudicationSession> {
        let event = SessionEvent::SessionClosed { reason: reason.to_owned() };
        self.record(session_id, &SYSTEM_ACTOR.into(), event, clock)
    }

    fn record(
        &mut self,
        session_id: &SessionId,
        actor: &GraderId,
        event: SessionEvent,
        clock: &dyn Clock,
    ) -> Result<&AdjudicationSession> {
        let seq = self.session(session_id)?.last_seq + 1;
        let record = event.into_record(seq, session_id.clone(), actor.clone(), clock.now());
        self.apply(record)?;
        Ok(&self.sessions[session_id])
    }

    /// Applies one record and appends it to the log on success.
    pub fn apply(&mut self, record: EventRecord) -> Result<()> {
        if record.event_type == "session_opened" {
            if self.sessions.contains_key(&record.session_id) {
                return Err(Error::Conflict(format!("session {} already exists", record.session_id)));
            }
            let session = AdjudicationSession::from_record(&record)?;
            let key = (session.image_id.clone(), session.task);
            if let Some(existing) = self.by_key.get(&key) {
                return Err(Error::Conflict(format!(
                    "image {} already has {} session {existing}",
                    key.0, key.1
                )));
            }
            self.by_key.insert(key, session.session_id.clone());
            self.sessions.insert(session.session_id.clone(), session);
        } else {
            self.sessions
                .get_mut(&record.session_id)
                .ok_or_else(|| Error::UnknownSession(record.session_id.to_string()))?
                .apply(&record)?;
        }
        self.log.push(record);
        Ok(())
    }

    /// Rebuilds an engine from a log.
    pub fn replay<'a>(records: impl IntoIterator<Item = &'a EventRecord>) -> Result<Self> {
        let mut engine = AdjudicationEngine::new();
        for record in records {
            engine.apply(record.clone())?;
        }
        Ok(engine)
    }

    /// Canonical serialized session state, for comparing engines.
    pub fn state_json(&self) -> String {
        serde_json::to_string(&self.sessions).expect("session state serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceProvenance {
    AgreedWithoutAdjudication,
    AdjudicatedConsensus,
    SeniorTieBreak,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReferenceStandardEntry {
    pub image_id: ImageId,
    pub task: Task,
    pub value: ReferenceValue,
    pub provenance: ReferenceProvenance,
}

/// Builds reference-standard entries for one task.
///
/// `pairs` maps each image gradable by both sources to its (regional,
/// algorithm) call. Selected images take their resolved session's value;
/// other images take the agreed call if the sources agree. For DR and DME a
/// non-selected disagreement means the selection did not come from these
/// pairs and is rejected.
pub fn assemble_reference_standard<'a>(
    task: Task,
    pairs: &BTreeMap<ImageId, (GradeValue, GradeValue)>,
    sessions: impl IntoIterator<Item = &'a AdjudicationSession>,
    selection: &AdjudicationSelection,
) -> Result<Vec<ReferenceStandardEntry>> {
    let resolved: BTreeMap<&ImageId, &AdjudicationSession> = sessions
        .into_iter()
        .filter(|s| s.task == task && s.is_resolved())
        .map(|s| (&s.image_id, s))
        .collect();

    let pending: Vec<String> = selection
        .all_ids()
        .into_iter()
        .filter(|id| pairs.contains_key(id) && !resolved.contains_key(id))
        .map(|id| id.0)
        .collect();
    if !pending.is_empty() {
        return Err(Error::Incomplete(format!(
            "{} selected {task} image(s) lack a resolved session: {}",
            pending.len(),
            pending.join(", ")
        )));
    }

    let mut entries = Vec::with_capacity(pairs.len());
    for (id, &(regional, algorithm)) in pairs {
        if selection.contains(id) {
            let session = resolved[id];
            let provenance = match session.provenance {
                Some(SessionProvenance::SeniorTieBreak) => ReferenceProvenance::SeniorTieBreak,
                _ => ReferenceProvenance::AdjudicatedConsensus,
            };
            entries.push(ReferenceStandardEntry {
                image_id: id.clone(),
                task,
                value: session.final_value.expect("resolved sessions carry a value"),
                provenance,
            });
        } else if regional.agrees_with(algorithm) {
            entries.push(ReferenceStandardEntry {
                image_id: id.clone(),
                task,
                value: regional.canonical(),
                provenance: ReferenceProvenance::AgreedWithoutAdjudication,
            });
        } else if matches!(task, Task::Dr | Task::Dme) {
            return Err(Error::Contract(format!(
                "image {id}: {task} disagreement ({regional} vs {algorithm}) was not selected for adjudication"
            )));
        }
    }
    Ok(entries)
}

/// How often resolved sessions of one task ended on each source's call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceAgreement {
    pub task: Task,
    /// Resolved sessions that carry source calls.
    pub resolved: u64,
    pub agree_regional: u64,
    pub agree_algorithm: u64,
    pub regional_rate: Option<f64>,
    pub algorithm_rate: Option<f64>,
}

pub fn source_agreement<'a>(task: Task, sessions: impl IntoIterator<Item = &'a AdjudicationSession>) -> SourceAgreement {
    let (mut resolved, mut regional, mut algorithm) = (0u64, 0u64, 0u64);
    for session in sessions.into_iter().filter(|s| s.task == task) {
        let (Some(sources), Some(value)) = (session.sources, session.final_value) else {
            continue;
        };
        resolved += 1;
        regional += u64::from(sources.regional.canonical() == value);
        algorithm += u64::from(sources.algorithm.canonical() == value);
    }
    let rate = |k: u64| (resolved > 0).then(|| k as f64 / resolved as f64);
    SourceAgreement {
        task,
        resolved,
        agree_regional: regional,
        agree_algorithm: algorithm,
        regional_rate: rate(regional),
        algorithm_rate: rate(algorithm),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventlog::LogicalClock;
    use crate::model::{DmeStatus, DrSeverity, MergedDr};

    fn panel() -> Panel {
        Panel::new("spec-a", "spec-b", "senior")
    }

    fn dr(level: DrSeverity) -> GradeValue {
        GradeValue::Dr(level)
    }

    fn open(engine: &mut AdjudicationEngine, image: &str, clock: &LogicalClock) -> SessionId {
        engine
            .open_session(image.into(), Task::Dr, panel(), SessionOptions::default(), clock)
            .unwrap()
            .session_id
            .clone()
    }

    #[test]
    fn open_session_starts_blind_round_one() {
        let clock = LogicalClock::default();
        let mut engine = AdjudicationEngine::new();
        let id = open(&mut engine, "img1", &clock);
        let s = engine.session(&id).unwrap();
        assert!(s.rounds.is_empty());
        assert_eq!(s.current_stage(), Some(Stage::Round(1)));
        assert_eq!(s.awaiting().len(), 2);
        let view = s.view_for(&"spec-a".into()).unwrap().unwrap();
        assert!(view.visible_counterpart_grade.is_none() && view.visible_comments.is_empty());
    }

    #[test]
    fn open_session_rejects_bad_panels_and_duplicates() {
        let clock = LogicalClock::default();
        let mut engine = AdjudicationEngine::new();
        let bad = Panel::new("a", "b", "a");
        assert!(matches!(
            engine.open_session("i".into(), Task::Dr, bad, SessionOptions::default(), &clock),
            Err(Error::Domain(_))
        ));
        open(&mut engine, "i", &clock);
        assert!(matches!(
            engine.open_session("i".into(), Task::Dr, panel(), SessionOptions::default(), &clock),
            Err(Error::Conflict(_))
        ));
        // Same image, different task is fine.
        engine.open_session("i".into(), Task::Dme, panel(), SessionOptions::default(), &clock).unwrap();
    }

    #[test]
    fn immediate_agreement_reaches_consensus() {
        let clock = LogicalClock::default();
        let mut engine = AdjudicationEngine::new();
        let id = open(&mut engine, "img", &clock);
        engine.submit_grade(&id, &"spec-a".into(), dr(DrSeverity::Moderate), "", &clock).unwrap();
        let s = engine.submit_grade(&id, &"spec-b".into(), dr(DrSeverity::Moderate), "", &clock).unwrap();
        assert_eq!(s.state, SessionState::Consensus);
        assert_eq!(s.final_value, Some(ReferenceValue::Dr(MergedDr::Moderate)));
        assert_eq!(s.provenance, Some(SessionProvenance::AgreedConsensus));
        assert_eq!(s.rounds.len(), 2);
    }

    #[test]
    fn no_dr_versus_mild_is_consensus() {
        let clock = LogicalClock::default();
        let mut engine = AdjudicationEngine::new();
        let id = open(&mut engine, "img", &clock);
        engine.submit_grade(&id, &"spec-a".into(), dr(DrSeverity::NoDr), "", &clock).unwrap();
        let s = engine.submit_grade(&id, &"spec-b".into(), dr(DrSeverity::Mild), "", &clock).unwrap();
        assert_eq!(s.state, SessionState::Consensus);
        assert_eq!(s.final_value, Some(ReferenceValue::Dr(MergedDr::NoOrMild)));
    }

    #[test]
    fn never_agreeing_specialists_follow_the_expected_trace() {
        let clock = LogicalClock::default();
        let mut engine = AdjudicationEngine::new();
        let id = open(&mut engine, "img", &clock);
        let (a, b): (GraderId, GraderId) = ("spec-a".into(), "spec-b".into());
        let mut trace = vec![engine.session(&id).unwrap().state.name().to_owned()];
        for round in 1..=3u8 {
            let s = engine.submit_grade(&id, &a, dr(DrSeverity::Moderate), &format!("a{round}"), &clock).unwrap();
            trace.push(format!("{}:{:?}", s.state.name(), s.awaiting()));
            let s = engine.submit_grade(&id, &b, dr(DrSeverity::Severe), &format!("b{round}"), &clock).unwrap();
            trace.push(format!("{}:{:?}", s.state.name(), s.awaiting()));
        }
        let expected = [
            "awaiting_round",
            r#"awaiting_round:{GraderId("spec-b")}"#,
            r#"awaiting_round:{GraderId("spec-a"), GraderId("spec-b")}"#,
            r#"awaiting_round:{GraderId("spec-b")}"#,
            r#"awaiting_round:{GraderId("spec-a"), GraderId("spec-b")}"#,
            r#"awaiting_round:{GraderId("spec-b")}"#,
            r#"awaiting_tie_break:{GraderId("senior")}"#,
        ];
        assert_eq!(trace, expected);

        let s = engine.session(&id).unwrap();
        // Round 2 submissions saw the counterpart's round 1 grade and both comments.
        assert_eq!(s.rounds[2].visible_counterpart, Some(dr(DrSeverity::Severe)));
        assert_eq!(s.rounds[2].visible_own_previous, Some(dr(DrSeverity::Moderate)));
        // A fourth specialist grade is a protocol violation.
        assert!(matches!(
            engine.submit_grade(&id, &a, dr(DrSeverity::Severe), "", &clock),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            engine.tiebreak(&id, &a, dr(DrSeverity::Severe), "", &clock),
            Err(Error::Authorization(_))
        ));
        let s = engine.tiebreak(&id, &"senior".into(), dr(DrSeverity::Severe), "", &clock).unwrap();
        assert_eq!(s.state, SessionState::TieBroken);
        assert_eq!(s.final_value, Some(ReferenceValue::Dr(MergedDr::Severe)));
        assert_eq!(s.provenance, Some(SessionProvenance::SeniorTieBreak));
        assert_eq!(s.rounds.len(), 7);
        assert!(!s.rounds[6].history_visible);
    }

    #[test]
    fn revision_view_shows_counterpart_and_comments() {
        let clock = LogicalClock::default();
        let mut engine = AdjudicationEngine::new();
        let id = open(&mut engine, "img", &clock);
        engine.submit_grade(&id, &"spec-a".into(), dr(DrSeverity::Moderate), "IRMA?", &clock).unwrap();
        // Counterpart still hidden while b has not submitted round 1.
        let b_view = engine.session(&id).unwrap().view_for(&"spec-b".into()).unwrap().unwrap();
        assert_eq!(b_view.stage, Stage::Round(1));
        assert!(b_view.visible_counterpart_grade.is_none());
        assert!(b_view.visible_comments.is_empty());
        engine.submit_grade(&id, &"spec-b".into(), dr(DrSeverity::Proliferative), "NVD", &clock).unwrap();
        let a_view = engine.session(&id).unwrap().view_for(&"spec-a".into()).unwrap().unwrap();
        assert_eq!(a_view.stage, Stage::Round(2));
        assert_eq!(a_view.visible_counterpart_grade, Some(dr(DrSeverity::Proliferative)));
        assert_eq!(a_view.own_previous_grade, Some(dr(DrSeverity::Moderate)));
        assert_eq!(a_view.visible_comments.len(), 2);
    }

    #[test]
    fn sequencing_and_authorization_errors() {
        let clock = LogicalClock::default();
        let mut engine = AdjudicationEngine::new();
        let id = open(&mut engine, "img", &clock);
        assert!(matches!(
            engine.submit_grade(&id, &"stranger".into(), dr(DrSeverity::Mild), "", &clock),
            Err(Error::Authorization(_))
        ));
        engine.submit_grade(&id, &"spec-a".into(), dr(DrSeverity::Mild), "", &clock).unwrap();
        assert!(matches!(
            engine.submit_grade(&id, &"spec-a".into(), dr(DrSeverity::Mild), "", &clock),
            Err(Error::Sequencing(_))
        ));
        assert!(matches!(
            engine.submit_grade(&id, &"spec-b".into(), GradeValue::Dme(DmeStatus::Absent), "", &clock),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            engine.tiebreak(&id, &"senior".into(), dr(DrSeverity::Mild), "", &clock),
            Err(Error::Protocol(_))
        ));
        // Failed calls leave no events behind.
        assert_eq!(engine.log().len(), 2);
        engine.submit_grade(&id, &"spec-b".into(), dr(DrSeverity::Mild), "", &clock).unwrap();
        assert!(matches!(
            engine.tiebreak(&id, &"senior".into(), dr(DrSeverity::Severe), "", &clock),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn replay_reproduces_state_byte_for_byte() {
        let clock = LogicalClock::default();
        let mut engine = AdjudicationEngine::new();
        let id = open(&mut engine, "x", &clock);
        let id2 = open(&mut engine, "y", &clock);
        engine.submit_grade(&id, &"spec-b".into(), dr(DrSeverity::Severe), "c", &clock).unwrap();
        engine.submit_grade(&id2, &"spec-a".into(), dr(DrSeverity::Mild), "", &clock).unwrap();
        engine.submit_grade(&id, &"spec-a".into(), dr(DrSeverity::Moderate), "", &clock).unwrap();
        engine.close_session(&id2, "withdrawn", &clock).unwrap();
        let replayed = AdjudicationEngine::replay(engine.log()).unwrap();
        assert_eq!(replayed.state_json(), engine.state_json());
        assert_eq!(replayed.log(), engine.log());
    }

    #[test]
    fn replay_rejects_gaps_and_unknown_sessions() {
        let clock = LogicalClock::default();
        let mut engine = AdjudicationEngine::new();
        let id = open(&mut engine, "x", &clock);
        engine.submit_grade(&id, &"spec-a".into(), dr(DrSeverity::Severe), "", &clock).unwrap();
        let mut log = engine.log().to_vec();
        log[1].seq = 5;
        assert!(matches!(AdjudicationEngine::replay(&log), Err(Error::EventLog(_))));
        let orphan = &engine.log()[1..];
        assert!(matches!(AdjudicationEngine::replay(orphan), Err(Error::UnknownSession(_))));
    }

    #[test]
    fn senior_history_visibility_is_configurable() {
        let clock = LogicalClock::default();
        let mut engine = AdjudicationEngine::new();
        let options = SessionOptions { senior_visibility: SeniorVisibility::History, sources: None };
        let id = engine
            .open_session("img".into(), Task::Dme, panel(), options, &clock)
            .unwrap()
            .session_id
            .clone();
        for _ in 0..3 {
            engine.submit_grade(&id, &"spec-a".into(), GradeValue::Dme(DmeStatus::Absent), "", &clock).unwrap();
            engine.submit_grade(&id, &"spec-b".into(), GradeValue::Dme(DmeStatus::Referable), "", &clock).unwrap();
        }
        let view = engine.session(&id).unwrap().view_for(&"senior".into()).unwrap().unwrap();
        assert_eq!(view.history.len(), 6);
        assert!(view.visible_counterpart_grade.is_none());
    }

    fn selection(ids: &[&str]) -> AdjudicationSelection {
        AdjudicationSelection {
            task: Some(Task::Dr),
            disagreement_ids: ids.iter().map(|&i| ImageId::from(i)).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn assembly_rules() {
        let clock = LogicalClock::default();
        let mut engine = AdjudicationEngine::new();
        let id = open(&mut engine, "dis", &clock);
        engine.submit_grade(&id, &"spec-a".into(), dr(DrSeverity::Severe), "", &clock).unwrap();
        engine.submit_grade(&id, &"spec-b".into(), dr(DrSeverity::Severe), "", &clock).unwrap();
        let mut pairs = BTreeMap::new();
        pairs.insert(ImageId::from("agree"), (dr(DrSeverity::Moderate), dr(DrSeverity::Moderate)));
        pairs.insert(ImageId::from("dis"), (dr(DrSeverity::Moderate), dr(DrSeverity::Severe)));
        pairs.insert(ImageId::from("nomild"), (dr(DrSeverity::NoDr), dr(DrSeverity::Mild)));
        let entries = assemble_reference_standard(Task::Dr, &pairs, engine.sessions(), &selection(&["dis"])).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0].value, ReferenceValue::Dr(MergedDr::Moderate));
        assert_eq!(entries[0].provenance, ReferenceProvenance::AgreedWithoutAdjudication);
        assert_eq!(entries[1].value, ReferenceValue::Dr(MergedDr::Severe));
        assert_eq!(entries[1].provenance, ReferenceProvenance::AdjudicatedConsensus);
        assert_eq!(entries[2].value, ReferenceValue::Dr(MergedDr::NoOrMild));

        // Selected image without a session.
        let err = assemble_reference_standard(Task::Dr, &pairs, engine.sessions(), &selection(&["dis", "agree"]));
        assert!(matches!(err, Err(Error::Incomplete(msg)) if msg.contains("agree")));
        // Unselected disagreement.
        let err = assemble_reference_standard(Task::Dr, &pairs, engine.sessions(), &selection(&[]));
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
