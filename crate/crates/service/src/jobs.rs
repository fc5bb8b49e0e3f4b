//! Job queue, worker pool and edit sessions.
//!
//! Jobs run on plain threads pulling ids from one FIFO channel. State
//! lives in two maps behind mutexes; no code path holds both locks at once.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use pilot_core::denoiser::PromptTokens;
use pilot_core::eval::metrics::MetricReport;
use pilot_core::eval::oracle::Oracle;
use pilot_core::eval::score;
use pilot_core::io::ImageRgb;
use pilot_core::pilot::optimize::StageTrace;
use pilot_core::pilot::pipeline::SamplerObserver;
use pilot_core::pilot::{BinaryMask, PilotParams};
use pilot_core::record::{image_sha, mask_sha, persist_run, RunArtifacts};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::models::Engine;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobInputs {
    pub image_sha256: String,
    pub mask_sha256: String,
    pub height: usize,
    pub width: usize,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobOutputs {
    pub output: String,
    pub trace: String,
    pub contact_sheet: Option<String>,
    pub output_sha256: String,
    pub run_dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobState {
    pub id: Uuid,
    pub status: JobStatus,
    pub progress: f64,
    pub params: PilotParams,
    pub inputs: JobInputs,
    pub outputs: Option<JobOutputs>,
    pub error: Option<String>,
    pub session_id: Option<Uuid>,
    pub metrics: Option<MetricReport>,
    pub wall_time_s: Option<f64>,
    pub created_at: String,
}

/// Everything the server keeps for a job.
struct JobEntry {
    state: JobState,
    image: Arc<ImageRgb>,
    mask: BinaryMask,
    prompt: PromptTokens,
    output_png: Option<Arc<Vec<u8>>>,
    contact_sheet_png: Option<Arc<Vec<u8>>>,
    trace: Option<Arc<StageTrace>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub job_id: Uuid,
    pub status: JobStatus,
    pub input_sha256: String,
    pub mask_sha256: String,
    pub prompt: String,
    pub params: PilotParams,
    pub output_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSession {
    pub id: Uuid,
    pub created_at: String,
    /// Successful edits in order, plus at most one pending edit at the end.
    pub edits: Vec<EditRecord>,
    /// Edits whose job failed; they never advance the head.
    pub failed: Vec<EditRecord>,
    pub head_sha256: String,
}

struct SessionEntry {
    session: EditSession,
    head: Arc<ImageRgb>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum SubmitError {
    NotFound,
    /// The session's previous edit has not finished.
    Busy,
    ShuttingDown,
}

/// The job request after validation at the API boundary.
pub struct JobRequest {
    pub image: Arc<ImageRgb>,
    pub mask: BinaryMask,
    pub prompt: PromptTokens,
    pub params: PilotParams,
}

pub struct Hub {
    engine: Arc<dyn Engine>,
    oracle: Option<Oracle<f32>>,
    runs_dir: PathBuf,
    jobs: Mutex<HashMap<Uuid, JobEntry>>,
    sessions: Mutex<HashMap<Uuid, SessionEntry>>,
    queue: Mutex<Option<Sender<Uuid>>>,
    shutting_down: AtomicBool,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

struct Progress<'a> {
    hub: &'a Hub,
    id: Uuid,
    n_steps: usize,
}

impl SamplerObserver for Progress<'_> {
    fn on_step(&mut self, i: usize, _t: usize, _z: &candle_core::Tensor) {
        // Leave the last sliver for decoding and persistence.
        let p = 0.99 * (i + 1) as f64 / self.n_steps as f64;
        if let Some(e) = lock(&self.hub.jobs).get_mut(&self.id) {
            e.state.progress = e.state.progress.max(p);
        }
    }

    fn cancelled(&self) -> bool {
        self.hub.shutting_down.load(Ordering::SeqCst)
    }
}

impl Hub {
    pub fn start(engine: Arc<dyn Engine>, oracle: Option<Oracle<f32>>, runs_dir: PathBuf, workers: usize) -> Arc<Self> {
        let (tx, rx) = channel::<Uuid>();
        let hub = Arc::new(Self {
            engine,
            oracle,
            runs_dir,
            jobs: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            queue: Mutex::new(Some(tx)),
            shutting_down: AtomicBool::new(false),
            workers: Mutex::new(Vec::new()),
        });
        let rx = Arc::new(Mutex::new(rx));
        let handles = (0..workers.max(1))
            .map(|_| {
                let (hub, rx) = (Arc::clone(&hub), Arc::clone(&rx));
                std::thread::spawn(move || hub.worker(&rx))
            })
            .collect();
        *lock(&hub.workers) = handles;
        hub
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.engine.image_size()
    }

    fn worker(&self, rx: &Mutex<Receiver<Uuid>>) {
        loop {
            let next = lock(rx).recv();
            let Ok(id) = next else { return };
            self.execute(id);
        }
    }

    fn execute(&self, id: Uuid) {
        let job = {
            let mut jobs = lock(&self.jobs);
            let Some(e) = jobs.get_mut(&id) else { return };
            if self.shutting_down.load(Ordering::SeqCst) {
                drop(jobs);
                self.finish(id, Err("server shut down before the job started".into()));
                return;
            }
            e.state.status = JobStatus::Running;
            (Arc::clone(&e.image), e.mask.clone(), e.prompt, e.state.params.clone())
        };
        let (image, mask, prompt, params) = job;
        let outcome = self.run(id, &image, &mask, &prompt, &params);
        self.finish(id, outcome);
    }

    fn run(
        &self,
        id: Uuid,
        image: &ImageRgb,
        mask: &BinaryMask,
        prompt: &PromptTokens,
        params: &PilotParams,
    ) -> Result<Finished, String> {
        let mut progress = Progress {
            hub: self,
            id,
            n_steps: params.n_steps,
        };
        let mut result = self
            .engine
            .inpaint(image, mask, prompt, params, &mut progress)
            .map_err(|e| e.to_string())?;
        if let (Some(oracle), Some(label)) = (&self.oracle, prompt.label()) {
            result.record.metrics = Some(score(&result, image, mask, label, oracle).map_err(|e| e.to_string())?);
        }
        let dir = self.runs_dir.join(id.to_string());
        let sheet = result.contact_sheet();
        persist_run(
            &dir,
            &result.record,
            &RunArtifacts {
                input: image,
                mask,
                output: &result.output,
                raw: Some(&result.raw),
                contact_sheet: sheet.as_ref(),
            },
        )
        .map_err(|e| format!("persisting run: {e}"))?;
        Ok(Finished {
            output_png: result.output.to_png_bytes().map_err(|e| e.to_string())?,
            contact_sheet_png: sheet.map(|s| s.to_png_bytes()).transpose().map_err(|e| e.to_string())?,
            output: result.output,
            trace: result.record.trace.clone(),
            metrics: result.record.metrics.clone(),
            wall_time_s: result.record.timings.total_s,
            output_sha256: result.record.output_sha256.clone(),
            run_dir: dir.display().to_string(),
        })
    }

    /// Record the outcome: session first, so a client that sees the job
    /// finished can immediately post the next edit.
    fn finish(&self, id: Uuid, outcome: Result<Finished, String>) {
        let session_id = lock(&self.jobs).get(&id).and_then(|e| e.state.session_id);
        if let Some(sid) = session_id {
            let mut sessions = lock(&self.sessions);
            if let Some(s) = sessions.get_mut(&sid) {
                if let Some(pos) = s.session.edits.iter().position(|e| e.job_id == id) {
                    match &outcome {
                        Ok(f) => {
                            let edit = &mut s.session.edits[pos];
                            edit.status = JobStatus::Done;
                            edit.output_sha256 = Some(f.output_sha256.clone());
                            s.session.head_sha256 = f.output_sha256.clone();
                            s.head = Arc::new(f.output.clone());
                        }
                        Err(_) => {
                            let mut edit = s.session.edits.remove(pos);
                            edit.status = JobStatus::Failed;
                            s.session.failed.push(edit);
                        }
                    }
                }
            }
        }
        let mut jobs = lock(&self.jobs);
        let Some(e) = jobs.get_mut(&id) else { return };
        match outcome {
            Ok(f) => {
                e.state.outputs = Some(JobOutputs {
                    output: format!("/jobs/{id}/output"),
                    trace: format!("/jobs/{id}/trace"),
                    contact_sheet: f.contact_sheet_png.as_ref().map(|_| format!("/jobs/{id}/contact_sheet")),
                    output_sha256: f.output_sha256,
                    run_dir: f.run_dir,
                });
                e.state.metrics = f.metrics;
                e.state.wall_time_s = Some(f.wall_time_s);
                e.output_png = Some(Arc::new(f.output_png));
                e.contact_sheet_png = f.contact_sheet_png.map(Arc::new);
                e.trace = Some(Arc::new(f.trace));
                e.state.progress = 1.0;
                e.state.status = JobStatus::Done;
            }
            Err(msg) => {
                tracing::warn!(job = %id, error = %msg, "job failed");
                e.state.error = Some(msg);
                e.state.status = JobStatus::Failed;
            }
        }
    }

    fn enqueue(&self, id: Uuid) -> Result<(), SubmitError> {
        let queue = lock(&self.queue);
        match queue.as_ref() {
            Some(tx) if !self.shutting_down.load(Ordering::SeqCst) => tx.send(id).map_err(|_| SubmitError::ShuttingDown),
            _ => Err(SubmitError::ShuttingDown),
        }
    }

    fn insert_job(&self, req: JobRequest, session_id: Option<Uuid>) -> Uuid {
        let id = Uuid::new_v4();
        let state = JobState {
            id,
            status: JobStatus::Queued,
            progress: 0.0,
            params: req.params.clone(),
            inputs: JobInputs {
                image_sha256: image_sha(&req.image).unwrap_or_default(),
                mask_sha256: mask_sha(&req.mask).unwrap_or_default(),
                height: req.image.height,
                width: req.image.width,
                prompt: req.prompt.caption(),
            },
            outputs: None,
            error: None,
            session_id,
            metrics: None,
            wall_time_s: None,
            created_at: now(),
        };
        lock(&self.jobs).insert(
            id,
            JobEntry {
                state,
                image: req.image,
                mask: req.mask,
                prompt: req.prompt,
                output_png: None,
                contact_sheet_png: None,
                trace: None,
            },
        );
        id
    }

    pub fn submit(&self, req: JobRequest) -> Result<Uuid, SubmitError> {
        if self.shutting_down.load(Ordering::SeqCst) {
            return Err(SubmitError::ShuttingDown);
        }
        let id = self.insert_job(req, None);
        if let Err(e) = self.enqueue(id) {
            self.finish(id, Err("server is shutting down".into()));
            return Err(e);
        }
        Ok(id)
    }

    pub fn job(&self, id: Uuid) -> Option<JobState> {
        lock(&self.jobs).get(&id).map(|e| e.state.clone())
    }

    pub fn output_png(&self, id: Uuid) -> Option<Option<Arc<Vec<u8>>>> {
        lock(&self.jobs).get(&id).map(|e| e.output_png.clone())
    }

    pub fn contact_sheet_png(&self, id: Uuid) -> Option<Option<Arc<Vec<u8>>>> {
        lock(&self.jobs).get(&id).map(|e| e.contact_sheet_png.clone())
    }

    pub fn trace(&self, id: Uuid) -> Option<Option<Arc<StageTrace>>> {
        lock(&self.jobs).get(&id).map(|e| e.trace.clone())
    }

    pub fn create_session(&self, image: ImageRgb) -> Uuid {
        let id = Uuid::new_v4();
        let session = EditSession {
            id,
            created_at: now(),
            edits: Vec::new(),
            failed: Vec::new(),
            head_sha256: image_sha(&image).unwrap_or_default(),
        };
        lock(&self.sessions).insert(
            id,
            SessionEntry {
                session,
                head: Arc::new(image),
            },
        );
        id
    }

    pub fn session(&self, id: Uuid) -> Option<EditSession> {
        lock(&self.sessions).get(&id).map(|s| s.session.clone())
    }

    /// Queue an edit on the session head. The session lock is held while
    /// the edit is registered, so two racing posts cannot both pass the
    /// busy check.
    pub fn submit_edit(
        &self,
        session_id: Uuid,
        mask: BinaryMask,
        prompt: PromptTokens,
        params: PilotParams,
    ) -> Result<Uuid, SubmitError> {
        if self.shutting_down.load(Ordering::SeqCst) {
            return Err(SubmitError::ShuttingDown);
        }
        let id = {
            let mut sessions = lock(&self.sessions);
            let s = sessions.get_mut(&session_id).ok_or(SubmitError::NotFound)?;
            if s.session.edits.last().is_some_and(|e| !e.status.is_terminal()) {
                return Err(SubmitError::Busy);
            }
            let image = Arc::clone(&s.head);
            let record = EditRecord {
                job_id: Uuid::nil(),
                status: JobStatus::Queued,
                input_sha256: s.session.head_sha256.clone(),
                mask_sha256: mask_sha(&mask).unwrap_or_default(),
                prompt: prompt.caption(),
                params: params.clone(),
                output_sha256: None,
            };
            let id = self.insert_job(
                JobRequest {
                    image,
                    mask,
                    prompt,
                    params,
                },
                Some(session_id),
            );
            s.session.edits.push(EditRecord { job_id: id, ..record });
            id
        };
        if let Err(e) = self.enqueue(id) {
            self.finish(id, Err("server is shutting down".into()));
            return Err(e);
        }
        Ok(id)
    }

    /// Stop accepting work, cancel the running jobs, fail the queued ones
    /// and wait for the workers. Afterwards every job is terminal.
    pub fn shutdown(&self) {
        self.shutting_down.store(true, Ordering::SeqCst);
        lock(&self.queue).take();
        let handles: Vec<_> = lock(&self.workers).drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
        let pending: Vec<Uuid> = lock(&self.jobs)
            .iter()
            .filter(|(_, e)| !e.state.status.is_terminal())
            .map(|(id, _)| *id)
            .collect();
        for id in pending {
            self.finish(id, Err("server shut down".into()));
        }
    }
}

struct Finished {
    output: ImageRgb,
    output_png: Vec<u8>,
    contact_sheet_png: Option<Vec<u8>>,
    trace: StageTrace,
    metrics: Option<MetricReport>,
    wall_time_s: f64,
    output_sha256: String,
    run_dir: String,
}
