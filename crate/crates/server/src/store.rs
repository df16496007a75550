//! Append-only JSON-lines persistence for chat turns and feedback.
//! Text is anonymized here, on the way to disk, so no caller can skip it.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use fedbot_core::tokenizer::anonymize;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::ServerError;

pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const FEEDBACK_FILE: &str = "feedback.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub session_id: String,
    pub turn: usize,
    pub user: String,
    pub bot: String,
    /// Unix seconds.
    pub timestamp: u64,
    pub client_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rating {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub session_id: String,
    pub turn: usize,
    pub rating: Rating,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_response: Option<String>,
    pub timestamp: u64,
}

pub struct Store {
    sessions: PathBuf,
    feedback: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServerError + '_ {
    move |source| ServerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ServerError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!(
                "{}:{}: skipping unreadable record: {e}",
                path.display(),
                i + 1
            ),
        }
    }
    Ok(out)
}

impl Store {
    /// Opens `dir`, creating it if needed, and returns the stored turns and
    /// feedback.
    pub fn open(dir: &Path) -> Result<(Self, Vec<TurnRecord>, Vec<FeedbackRecord>), ServerError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let store = Store {
            sessions: dir.join(SESSIONS_FILE),
            feedback: dir.join(FEEDBACK_FILE),
        };
        let turns = read_lines(&store.sessions)?;
        let feedback = read_lines(&store.feedback)?;
        Ok((store, turns, feedback))
    }

    pub fn append_turn(&self, turn: &TurnRecord) -> Result<(), ServerError> {
        let clean = TurnRecord {
            user: anonymize(&turn.user),
            bot: anonymize(&turn.bot),
            ..turn.clone()
        };
        let mut line = serde_json::to_string(&clean).expect("plain record");
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.sessions)
            .map_err(io_err(&self.sessions))?;
        file.write_all(line.as_bytes())
            .map_err(io_err(&self.sessions))
    }

    /// Rewrites the feedback file with one record per turn, atomically.
    pub fn write_feedback<'a>(
        &self,
        records: impl IntoIterator<Item = &'a FeedbackRecord>,
    ) -> Result<(), ServerError> {
        let mut text = String::new();
        for r in records {
            let clean = FeedbackRecord {
                corrected_response: r.corrected_response.as_deref().map(anonymize),
                ..r.clone()
            };
            text.push_str(&serde_json::to_string(&clean).expect("plain record"));
            text.push('\n');
        }
        let tmp = self.feedback.with_extension("tmp");
        fs::write(&tmp, text).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &self.feedback).map_err(io_err(&self.feedback))
    }
}
