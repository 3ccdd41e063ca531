//! Job descriptors, the append-only job log and per-job stream state.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::watch;

use unmask_core::sampler::TraceStep;
use unmask_core::tokens::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobKind {
    Sample,
    Infill,
    Accompany,
    Guide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }

    /// pending → running → done | failed; pending may also fail directly.
    pub fn can_become(self, next: JobStatus) -> bool {
        matches!(
            (self, next),
            (JobStatus::Pending, JobStatus::Running)
                | (JobStatus::Pending, JobStatus::Failed)
                | (JobStatus::Running, JobStatus::Done)
                | (JobStatus::Running, JobStatus::Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobDescriptor {
    pub id: String,
    pub kind: JobKind,
    pub params: Value,
    pub status: JobStatus,
    /// Piece ids produced by the job.
    pub artifacts: Vec<String>,
    pub total_steps: usize,
    pub completed_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub cancelled: bool,
    #[serde(default)]
    pub guidance_fallbacks: usize,
}

/// Single-writer, append-only line-delimited JSON log of descriptor snapshots.
pub struct JobStore {
    path: PathBuf,
    file: Mutex<File>,
}

impl JobStore {
    /// Opens the log and returns the latest snapshot of every job. Jobs that
    /// never finished are marked failed.
    pub fn open(path: &Path) -> std::io::Result<(Self, Vec<JobDescriptor>)> {
        let mut latest: BTreeMap<String, JobDescriptor> = BTreeMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                // a torn final line after a crash is skipped
                if let Ok(d) = serde_json::from_str::<JobDescriptor>(&line) {
                    latest.insert(d.id.clone(), d);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let store = Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        };
        let mut jobs: Vec<JobDescriptor> = latest.into_values().collect();
        for d in &mut jobs {
            if !d.status.is_terminal() {
                d.status = JobStatus::Failed;
                d.error = Some("interrupted by service restart".into());
                store.append(d)?;
            }
        }
        Ok((store, jobs))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, d: &JobDescriptor) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(d).map_err(std::io::Error::other)?;
        line.push(b'\n');
        let mut f = self.file.lock().expect("job log lock");
        f.write_all(&line)?;
        f.flush()
    }
}

/// A message on a job's step stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StreamMessage {
    Start {
        job: String,
        total_steps: usize,
        /// Base64 token file of the starting grid.
        init: String,
    },
    Step(TraceStep),
    Done {
        piece: String,
        tokens: String,
    },
    Failed {
        error: String,
        cancelled: bool,
    },
}

/// Live state of a job known to this process.
pub struct JobRuntime {
    pub descriptor: Mutex<JobDescriptor>,
    pub init: Option<TokenSequence>,
    pub trace: Mutex<Vec<TraceStep>>,
    pub result: Mutex<Option<TokenSequence>>,
    messages: Mutex<Vec<Arc<str>>>,
    published: watch::Sender<(usize, bool)>,
    cancel: AtomicBool,
}

impl JobRuntime {
    pub fn new(descriptor: JobDescriptor, init: Option<TokenSequence>) -> Self {
        let done = descriptor.status.is_terminal();
        Self {
            descriptor: Mutex::new(descriptor),
            init,
            trace: Mutex::new(Vec::new()),
            result: Mutex::new(None),
            messages: Mutex::new(Vec::new()),
            published: watch::channel((0, done)).0,
            cancel: AtomicBool::new(false),
        }
    }

    pub fn snapshot(&self) -> JobDescriptor {
        self.descriptor.lock().expect("descriptor lock").clone()
    }

    pub fn request_cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
    }

    pub fn cancel_requested(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// Appends a stream message; `last` closes the stream.
    pub fn publish(&self, msg: &StreamMessage, last: bool) {
        let text: Arc<str> = serde_json::to_string(msg).expect("plain data").into();
        let n = {
            let mut m = self.messages.lock().expect("messages lock");
            m.push(text);
            m.len()
        };
        self.published.send_replace((n, last));
    }

    /// Closes the stream without a message (jobs restored from the log).
    pub fn close(&self) {
        let n = self.messages.lock().expect("messages lock").len();
        self.published.send_replace((n, true));
    }

    pub fn messages_from(&self, from: usize) -> Vec<Arc<str>> {
        let m = self.messages.lock().expect("messages lock");
        m.get(from..).map(<[_]>::to_vec).unwrap_or_default()
    }

    pub fn subscribe(&self) -> watch::Receiver<(usize, bool)> {
        self.published.subscribe()
    }
}
