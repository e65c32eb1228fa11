//! Bounded job store with FIFO start order and crash-safe snapshots.

use std::collections::VecDeque;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use factor_core::inference::WireRequest;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRef {
    pub clip_id: String,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub request: WireRequest,
    pub status: JobStatus,
    pub result: Option<ClipRef>,
    pub error: Option<String>,
    /// Position in the order jobs were started.
    pub start_index: Option<u64>,
    pub created_ms: u64,
    pub updated_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StoreError {
    /// Too many unfinished jobs, or the store is full of them.
    Full,
    UnknownJob(String),
    BadTransition { id: String, from: JobStatus, to: JobStatus },
}

impl std::fmt::Display for StoreError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StoreError::Full => write!(f, "job queue is full"),
            StoreError::UnknownJob(id) => write!(f, "unknown job {id}"),
            StoreError::BadTransition { id, from, to } => write!(f, "job {id} cannot go from {from:?} to {to:?}"),
        }
    }
}

impl std::error::Error for StoreError {}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub next_id: u64,
    pub next_start: u64,
    pub jobs: Vec<Job>,
}

pub const RESTART_MESSAGE: &str = "the service restarted before this job finished";

#[derive(Debug)]
pub struct JobStore {
    jobs: VecDeque<Job>,
    retention: usize,
    queue_capacity: usize,
    next_id: u64,
    next_start: u64,
    running: usize,
    peak_running: usize,
}

impl JobStore {
    pub fn new(retention: usize, queue_capacity: usize) -> Self {
        JobStore {
            jobs: VecDeque::new(),
            retention: retention.max(1),
            queue_capacity: queue_capacity.max(1),
            next_id: 1,
            next_start: 0,
            running: 0,
            peak_running: 0,
        }
    }

    /// Rebuilds a store after a restart. Unfinished jobs fail, and done jobs
    /// whose clip is gone fail too.
    pub fn restore(snapshot: StoreSnapshot, retention: usize, queue_capacity: usize, clip_exists: impl Fn(&str) -> bool) -> Self {
        let mut store = JobStore::new(retention, queue_capacity);
        store.next_id = snapshot.next_id;
        store.next_start = snapshot.next_start;
        let now = now_ms();
        for mut job in snapshot.jobs {
            let lost = match (&job.status, &job.result) {
                (JobStatus::Done, Some(r)) => !clip_exists(&r.clip_id),
                (JobStatus::Done, None) => true,
                (JobStatus::Failed, _) => false,
                _ => true,
            };
            if lost {
                job.status = JobStatus::Failed;
                job.result = None;
                job.error = Some(RESTART_MESSAGE.to_string());
                job.updated_ms = now;
            }
            store.jobs.push_back(job);
        }
        while store.jobs.len() > store.retention {
            store.jobs.pop_front();
        }
        store
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            next_id: self.next_id,
            next_start: self.next_start,
            jobs: self.jobs.iter().cloned().collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&Job> {
        self.jobs.iter().find(|j| j.id == id)
    }

    fn get_mut(&mut self, id: &str) -> Result<&mut Job, StoreError> {
        self.jobs
            .iter_mut()
            .find(|j| j.id == id)
            .ok_or_else(|| StoreError::UnknownJob(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty()
    }

    pub fn pending(&self) -> usize {
        self.jobs.iter().filter(|j| !j.status.is_finished()).count()
    }

    pub fn queued(&self) -> usize {
        self.jobs.iter().filter(|j| j.status == JobStatus::Queued).count()
    }

    pub fn running(&self) -> usize {
        self.running
    }

    pub fn peak_running(&self) -> usize {
        self.peak_running
    }

    /// Adds a queued job. Returns its id and the ids of finished jobs
    /// evicted to stay within the retention count.
    pub fn submit(&mut self, request: WireRequest) -> Result<(String, Vec<Job>), StoreError> {
        if self.pending() >= self.queue_capacity {
            return Err(StoreError::Full);
        }
        let mut evicted = Vec::new();
        while self.jobs.len() >= self.retention {
            let Some(pos) = self.jobs.iter().position(|j| j.status.is_finished()) else {
                return Err(StoreError::Full);
            };
            evicted.extend(self.jobs.remove(pos));
        }
        let id = format!("job-{:06}", self.next_id);
        self.next_id += 1;
        let now = now_ms();
        self.jobs.push_back(Job {
            id: id.clone(),
            request,
            status: JobStatus::Queued,
            result: None,
            error: None,
            start_index: None,
            created_ms: now,
            updated_ms: now,
        });
        Ok((id, evicted))
    }

    pub fn start(&mut self, id: &str) -> Result<(), StoreError> {
        let index = self.next_start;
        let job = self.get_mut(id)?;
        if job.status != JobStatus::Queued {
            return Err(StoreError::BadTransition {
                id: id.to_string(),
                from: job.status,
                to: JobStatus::Running,
            });
        }
        job.status = JobStatus::Running;
        job.start_index = Some(index);
        job.updated_ms = now_ms();
        self.next_start += 1;
        self.running += 1;
        self.peak_running = self.peak_running.max(self.running);
        Ok(())
    }

    pub fn finish(&mut self, id: &str, outcome: Result<ClipRef, String>) -> Result<(), StoreError> {
        let job = self.get_mut(id)?;
        let to = if outcome.is_ok() { JobStatus::Done } else { JobStatus::Failed };
        if job.status != JobStatus::Running {
            return Err(StoreError::BadTransition {
                id: id.to_string(),
                from: job.status,
                to,
            });
        }
        job.status = to;
        match outcome {
            Ok(clip) => job.result = Some(clip),
            Err(e) => job.error = Some(e),
        }
        job.updated_ms = now_ms();
        self.running -= 1;
        Ok(())
    }
}

/// Writes the snapshot through a temporary file and a rename.
pub fn write_snapshot(path: &Path, snapshot: &StoreSnapshot) -> std::io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(snapshot).map_err(std::io::Error::other)?)?;
    std::fs::rename(&tmp, path)
}

pub fn read_snapshot(path: &Path) -> std::io::Result<Option<StoreSnapshot>> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}
