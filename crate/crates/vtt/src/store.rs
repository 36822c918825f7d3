//! Durable session state: one append-only JSON-lines log per session plus
//! PNG files named by unguessable tokens.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use bapgan_core::data::save_png;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::planner::PlannedTrial;
use crate::{Answer, Tally, Truth, VttError, VttSessionSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogEntry {
    Session { session_id: String, spec: VttSessionSpec },
    Trial { trial_id: String, truth: Truth, token: Uuid },
    Response { trial_id: String, answer: Answer },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredTrial {
    pub trial_id: String,
    pub truth: Truth,
    pub token: Uuid,
}

#[derive(Debug)]
struct Session {
    spec: VttSessionSpec,
    trials: Vec<StoredTrial>,
    responses: HashMap<String, Answer>,
    log: PathBuf,
}

/// Outcome of a response submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ack {
    Recorded,
    /// Same answer submitted before; nothing written.
    Duplicate,
}

/// Everything a report needs, replayed from the log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSummary {
    pub spec: VttSessionSpec,
    pub tally: Tally,
    pub answered: usize,
    pub n_trials: usize,
}

impl SessionSummary {
    pub fn complete(&self) -> bool {
        self.answered == self.n_trials
    }
}

pub struct SessionStore {
    root: PathBuf,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    images: RwLock<HashMap<Uuid, PathBuf>>,
}

fn to_line(entry: &LogEntry) -> String {
    let mut s = serde_json::to_string(entry).expect("log entries serialize");
    s.push('\n');
    s
}

impl SessionStore {
    /// Open (or create) a store and replay every session log under it.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, VttError> {
        let root = root.into();
        for dir in [root.join("sessions"), root.join("images")] {
            fs::create_dir_all(&dir).map_err(|e| VttError::storage(&dir, e))?;
        }
        let store = Self {
            root,
            sessions: RwLock::new(BTreeMap::new()),
            images: RwLock::new(HashMap::new()),
        };
        let dir = store.root.join("sessions");
        let mut logs: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| VttError::storage(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        logs.sort();
        for log in logs {
            let (id, session) = replay(&log)?;
            let mut images = store.images.write().unwrap();
            for t in &session.trials {
                images.insert(t.token, store.image_file(t.token));
            }
            store.sessions.write().unwrap().insert(id, Arc::new(Mutex::new(session)));
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn image_file(&self, token: Uuid) -> PathBuf {
        self.root.join("images").join(format!("{token}.png"))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, VttError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| VttError::NotFound(format!("session {id}")))
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().unwrap().keys().cloned().collect()
    }

    /// Persist a planned session: images first, then the log, written to a
    /// temporary file and renamed so a session either exists whole or not at
    /// all.
    pub fn create(&self, spec: &VttSessionSpec, planned: Vec<PlannedTrial>) -> Result<(String, usize), VttError> {
        if planned.is_empty() {
            return Err(VttError::Empty("session has no trials".into()));
        }
        let id = Uuid::new_v4().to_string();
        let mut trials = Vec::with_capacity(planned.len());
        for (i, t) in planned.iter().enumerate() {
            let token = Uuid::new_v4();
            let path = self.image_file(token);
            save_png(&path, &t.pixels, t.size)?;
            trials.push(StoredTrial {
                trial_id: format!("{}", i + 1),
                truth: t.truth,
                token,
            });
        }
        let mut text = to_line(&LogEntry::Session {
            session_id: id.clone(),
            spec: spec.clone(),
        });
        for t in &trials {
            text.push_str(&to_line(&LogEntry::Trial {
                trial_id: t.trial_id.clone(),
                truth: t.truth,
                token: t.token,
            }));
        }
        let log = self.root.join("sessions").join(format!("{id}.jsonl"));
        let tmp = log.with_extension("jsonl.partial");
        {
            let mut f = File::create(&tmp).map_err(|e| VttError::storage(&tmp, e))?;
            f.write_all(text.as_bytes()).map_err(|e| VttError::storage(&tmp, e))?;
            f.sync_all().map_err(|e| VttError::storage(&tmp, e))?;
        }
        fs::rename(&tmp, &log).map_err(|e| VttError::storage(&log, e))?;
        sync_dir(&self.root.join("sessions"));

        let n = trials.len();
        {
            let mut images = self.images.write().unwrap();
            for t in &trials {
                images.insert(t.token, self.image_file(t.token));
            }
        }
        let session = Session {
            spec: spec.clone(),
            trials,
            responses: HashMap::new(),
            log,
        };
        self.sessions.write().unwrap().insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok((id, n))
    }

    /// First unanswered trial as `(trial_id, image token)`, or `None` when
    /// every trial has a response.
    pub fn next(&self, id: &str) -> Result<Option<(String, Uuid)>, VttError> {
        let s = self.session(id)?;
        let s = s.lock().unwrap();
        Ok(s
            .trials
            .iter()
            .find(|t| !s.responses.contains_key(&t.trial_id))
            .map(|t| (t.trial_id.clone(), t.token)))
    }

    /// Record an answer; the log line is on disk before this returns.
    pub fn respond(&self, id: &str, trial_id: &str, answer: &str) -> Result<Ack, VttError> {
        let s = self.session(id)?;
        let mut s = s.lock().unwrap();
        if !s.trials.iter().any(|t| t.trial_id == trial_id) {
            return Err(VttError::NotFound(format!("trial {trial_id} in session {id}")));
        }
        let answer = s.spec.kind.parse_answer(answer)?;
        if let Some(&previous) = s.responses.get(trial_id) {
            return if previous == answer {
                Ok(Ack::Duplicate)
            } else {
                Err(VttError::Conflict(format!(
                    "trial {trial_id} already answered {:?}",
                    s.spec.kind.answer_word(previous)
                )))
            };
        }
        let line = to_line(&LogEntry::Response {
            trial_id: trial_id.to_string(),
            answer,
        });
        let mut f = OpenOptions::new()
            .append(true)
            .open(&s.log)
            .map_err(|e| VttError::storage(&s.log, e))?;
        f.write_all(line.as_bytes()).map_err(|e| VttError::storage(&s.log, e))?;
        f.sync_data().map_err(|e| VttError::storage(&s.log, e))?;
        s.responses.insert(trial_id.to_string(), answer);
        Ok(Ack::Recorded)
    }

    pub fn summary(&self, id: &str) -> Result<SessionSummary, VttError> {
        let s = self.session(id)?;
        let s = s.lock().unwrap();
        let tally = Tally::from_pairs(
            s.trials
                .iter()
                .filter_map(|t| s.responses.get(&t.trial_id).map(|&a| (t.truth, a))),
        );
        Ok(SessionSummary {
            spec: s.spec.clone(),
            tally,
            answered: s.responses.len(),
            n_trials: s.trials.len(),
        })
    }

    /// Trials with ground truth, for administrative export.
    pub fn trials(&self, id: &str) -> Result<Vec<StoredTrial>, VttError> {
        Ok(self.session(id)?.lock().unwrap().trials.clone())
    }

    pub fn image_path(&self, token: &str) -> Result<PathBuf, VttError> {
        let not_found = || VttError::NotFound(format!("image {token}"));
        let token = Uuid::parse_str(token).map_err(|_| not_found())?;
        self.images.read().unwrap().get(&token).cloned().ok_or_else(not_found)
    }
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

fn replay(path: &Path) -> Result<(String, Session), VttError> {
    let text = fs::read_to_string(path).map_err(|e| VttError::storage(path, e))?;
    let corrupt = |line: usize, message: String| VttError::CorruptLog {
        path: path.to_path_buf(),
        line,
        message,
    };
    // a trailing fragment without newline was never acknowledged
    let complete = match text.rfind('\n') {
        Some(end) => &text[..=end],
        None => "",
    };
    if complete.len() < text.len() {
        log::warn!("{}: ignoring unterminated final line", path.display());
    }
    let mut header: Option<(String, VttSessionSpec)> = None;
    let mut trials = Vec::new();
    let mut responses = HashMap::new();
    for (i, line) in complete.lines().enumerate() {
        let entry: LogEntry = serde_json::from_str(line).map_err(|e| corrupt(i + 1, e.to_string()))?;
        match entry {
            LogEntry::Session { session_id, spec } => {
                if header.is_some() {
                    return Err(corrupt(i + 1, "second session header".into()));
                }
                header = Some((session_id, spec));
            }
            LogEntry::Trial { trial_id, truth, token } => trials.push(StoredTrial { trial_id, truth, token }),
            LogEntry::Response { trial_id, answer } => {
                if !trials.iter().any(|t: &StoredTrial| t.trial_id == trial_id) {
                    return Err(corrupt(i + 1, format!("response to unknown trial {trial_id}")));
                }
                if let Some(prev) = responses.insert(trial_id.clone(), answer) {
                    if prev != answer {
                        return Err(corrupt(i + 1, format!("conflicting responses to trial {trial_id}")));
                    }
                }
            }
        }
    }
    let (id, spec) = header.ok_or_else(|| corrupt(1, "missing session header".into()))?;
    Ok((
        id,
        Session {
            spec,
            trials,
            responses,
            log: path.to_path_buf(),
        },
    ))
}
