//! Headless drivers for the adjudication engine: a truth-driven simulated
//! panel and replay of scripted specialist grades.

use std::collections::{BTreeMap, BTreeSet};

use drscreen_core::adjudication::{AdjudicationEngine, Panel, SeniorVisibility, SessionOptions, SessionState, SourceCalls};
use drscreen_core::eventlog::Clock;
use drscreen_core::model::{DmeStatus, DrSeverity, GradeRecord, GradeValue, GraderId, ImageId, Task};
use drscreen_core::rng::{named_seed, rng_for, StreamRng};
use drscreen_core::Error;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::PanelConfig;
use crate::error::{EvalError, Result};
use crate::ingest::Truth;

pub type TaskPairs = BTreeMap<ImageId, (GradeValue, GradeValue)>;

fn truth_value(truth: &Truth, task: Task) -> GradeValue {
    match task {
        Task::Dr => GradeValue::Dr(truth.dr),
        Task::Dme => GradeValue::Dme(truth.dme),
        Task::DrGradability => GradeValue::Gradable(truth.gradability.dr_gradable),
        Task::DmeGradability => GradeValue::Gradable(truth.gradability.dme_gradable),
    }
}

/// A nearby wrong answer: one DR level away, or the other binary value.
fn perturb(value: GradeValue, rng: &mut StreamRng) -> GradeValue {
    match value {
        GradeValue::Dr(level) => {
            let code = level.code();
            let next = match code {
                0 => 1,
                4 => 3,
                c if rng.random_bool(0.5) => c + 1,
                c => c - 1,
            };
            GradeValue::Dr(DrSeverity::from_code(next).expect("neighbouring level is valid"))
        }
        GradeValue::Dme(d) => GradeValue::Dme(DmeStatus::from_flag(!d.is_referable())),
        GradeValue::Gradable(g) => GradeValue::Gradable(!g),
    }
}

fn panel_for(panels: &PanelConfig, task: Task) -> Panel {
    match task {
        Task::Dr => panels.dr.clone(),
        Task::Dme => panels.dme.clone(),
        Task::DrGradability | Task::DmeGradability => panels.gradability.clone(),
    }
}

/// Runs every selected image through the engine with scripted specialists.
///
/// In round `r` a specialist returns the true value with probability
/// `1 - (1 - accuracy) / r`, otherwise a neighbouring value. The senior
/// returns the true value. Draws come from a per-session stream, so the
/// result depends only on `seed` and the inputs.
pub fn simulate_panel(
    selections: &[(Task, BTreeSet<ImageId>)],
    pairs: &BTreeMap<Task, TaskPairs>,
    truth: &BTreeMap<ImageId, Truth>,
    accuracy: f64,
    panels: &PanelConfig,
    seed: u64,
    clock: &dyn Clock,
) -> Result<AdjudicationEngine> {
    let mut engine = AdjudicationEngine::new();
    for (task, ids) in selections {
        let missing: Vec<&str> = ids.iter().filter(|id| !truth.contains_key(*id)).map(|id| id.as_str()).collect();
        if !missing.is_empty() {
            return Err(EvalError::Integrity(format!("no truth row for selected image(s): {}", missing.join(", "))));
        }
        for id in ids {
            let target = truth_value(&truth[id], *task);
            let sources = pairs
                .get(task)
                .and_then(|p| p.get(id))
                .map(|&(regional, algorithm)| SourceCalls { regional, algorithm });
            let options = SessionOptions { senior_visibility: panels.senior_visibility, sources };
            let session_id = engine.open_session(id.clone(), *task, panel_for(panels, *task), options, clock)?.session_id.clone();
            let mut rng = rng_for(named_seed(seed, session_id.as_str()));
            loop {
                match engine.session(&session_id)?.state.clone() {
                    SessionState::AwaitingRound { round, pending } => {
                        let p_correct = 1.0 - (1.0 - accuracy) / f64::from(round);
                        for grader in pending {
                            let value = if rng.random_bool(p_correct) { target } else { perturb(target, &mut rng) };
                            engine.submit_grade(&session_id, &grader, value, "", clock)?;
                        }
                    }
                    SessionState::AwaitingTieBreak { senior } => {
                        engine.tiebreak(&session_id, &senior, target, "", clock)?;
                    }
                    _ => break,
                }
            }
        }
    }
    Ok(engine)
}

/// One scripted session for `eval adjudicate-sim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptSession {
    pub image_id: ImageId,
    pub task: Task,
    pub specialist_a: GraderId,
    pub specialist_b: GraderId,
    pub senior: GraderId,
    #[serde(default)]
    pub senior_visibility: SeniorVisibility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(rename = "session", default)]
    pub sessions: Vec<ScriptSession>,
}

impl Script {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| EvalError::Config(format!("script: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub image_id: String,
    pub task: Task,
    pub state: String,
    pub final_value: Option<String>,
    pub specialist_grades: usize,
    pub senior_grades: usize,
}

/// Feeds recorded specialist grades through the engine, session by session.
///
/// A specialist's grade for round `r` is the grade row with that `round`.
/// The senior's row may carry any round number. Rows the protocol never
/// asks for (for example round 2 after a round-1 consensus) are ignored and
/// listed in the second return value.
pub fn run_script(
    grades: &[GradeRecord],
    script: &Script,
    clock: &dyn Clock,
) -> Result<(AdjudicationEngine, Vec<SessionSummary>, Vec<String>)> {
    let mut by_key: BTreeMap<(&ImageId, &GraderId, u32), &GradeRecord> = BTreeMap::new();
    let mut by_grader: BTreeMap<(&ImageId, &GraderId), &GradeRecord> = BTreeMap::new();
    for g in grades {
        by_key.insert((&g.image_id, &g.grader_id, g.round), g);
        by_grader.entry((&g.image_id, &g.grader_id)).or_insert(g);
    }
    let mut used: BTreeSet<(ImageId, GraderId, u32)> = BTreeSet::new();
    let mut engine = AdjudicationEngine::new();
    let mut summaries = Vec::new();

    let value_of = |g: &GradeRecord, task: Task| {
        g.value_for(task).ok_or_else(|| {
            EvalError::Core(Error::Domain(format!(
                "grade by {} on image {} has no {task} value",
                g.grader_id, g.image_id
            )))
        })
    };

    for s in &script.sessions {
        let panel = Panel { specialist_a: s.specialist_a.clone(), specialist_b: s.specialist_b.clone(), senior: s.senior.clone() };
        let options = SessionOptions { senior_visibility: s.senior_visibility, sources: None };
        let session_id = engine.open_session(s.image_id.clone(), s.task, panel, options, clock)?.session_id.clone();
        loop {
            match engine.session(&session_id)?.state.clone() {
                SessionState::AwaitingRound { round, pending } => {
                    for grader in pending {
                        let g = by_key.get(&(&s.image_id, &grader, u32::from(round))).ok_or_else(|| {
                            EvalError::Core(Error::Incomplete(format!(
                                "session {session_id} awaits a round {round} grade from {grader}"
                            )))
                        })?;
                        engine.submit_grade(&session_id, &grader, value_of(g, s.task)?, &g.comment, clock)?;
                        used.insert((g.image_id.clone(), g.grader_id.clone(), g.round));
                    }
                }
                SessionState::AwaitingTieBreak { senior } => {
                    let g = by_grader.get(&(&s.image_id, &senior)).ok_or_else(|| {
                        EvalError::Core(Error::Incomplete(format!("session {session_id} awaits a tie-break from {senior}")))
                    })?;
                    engine.tiebreak(&session_id, &senior, value_of(g, s.task)?, &g.comment, clock)?;
                    used.insert((g.image_id.clone(), g.grader_id.clone(), g.round));
                }
                _ => break,
            }
        }
        let session = engine.session(&session_id)?;
        summaries.push(SessionSummary {
            session_id: session_id.to_string(),
            image_id: s.image_id.to_string(),
            task: s.task,
            state: session.state.name().to_owned(),
            final_value: session.final_value.map(|v| v.to_string()),
            specialist_grades: session.grades_by(&s.specialist_a) + session.grades_by(&s.specialist_b),
            senior_grades: session.grades_by(&s.senior),
        });
    }

    let scripted: BTreeSet<&ImageId> = script.sessions.iter().map(|s| &s.image_id).collect();
    let unused = grades
        .iter()
        .filter(|g| scripted.contains(&g.image_id))
        .filter(|g| !used.contains(&(g.image_id.clone(), g.grader_id.clone(), g.round)))
        .map(|g| format!("{} {} round {}", g.image_id, g.grader_id, g.round))
        .collect();
    Ok((engine, summaries, unused))
}
