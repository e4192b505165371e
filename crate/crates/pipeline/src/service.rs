//! HTTP trainer service for edge-cloud mode, and its client.
//!
//! Endpoints:
//! - `GET /health`
//! - `POST /tasks` with a [`TaskRequest`] body, answers `{"id": ...}`
//! - `GET /tasks/{id}` answers a [`TaskStatus`]
//! - `GET /tasks/{id}/snapshot` answers the snapshot bytes with their
//!   SHA-256 in the `X-Content-Sha256` header
//! - `GET /tasks/{id}/exemplars` answers the exemplar bundle as JSON

use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use incdet_dataset::BuildReport;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tiny_http::{Header, Method, Response, Server};

use crate::bundle::ExemplarBundle;
use crate::error::{PipelineError, Result};
use crate::task::{execute, StageSeconds, TaskOutput, TaskRequest, TaskState};

pub const HASH_HEADER: &str = "X-Content-Sha256";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub id: String,
    pub state: TaskState,
    pub error: Option<String>,
    pub stages: Option<StageSeconds>,
    pub builds: Vec<BuildReport>,
    pub snapshot_sha256: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Submitted {
    id: String,
}

struct Entry {
    status: TaskStatus,
    snapshot: Option<Arc<Vec<u8>>>,
    exemplars: Option<Arc<Vec<u8>>>,
}

#[derive(Default)]
struct Shared {
    tasks: Mutex<HashMap<String, Entry>>,
    next_id: AtomicUsize,
    corrupt: AtomicUsize,
}

impl Shared {
    fn update(&self, id: &str, f: impl FnOnce(&mut Entry)) {
        if let Some(e) = self.tasks.lock().expect("task table").get_mut(id) {
            f(e);
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A running trainer service.
pub struct TrainerService {
    server: Arc<Server>,
    shared: Arc<Shared>,
    addr: String,
    http: Option<JoinHandle<()>>,
    worker: Option<JoinHandle<()>>,
}

impl TrainerService {
    /// Binds `bind` (port 0 picks a free port) and serves tasks against the
    /// corpus. Task artifacts go under `work/<id>/`.
    pub fn start(bind: &str, corpus: PathBuf, work: PathBuf) -> Result<Self> {
        let server = Arc::new(Server::http(bind).map_err(|e| PipelineError::Service(format!("bind {bind}: {e}")))?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| PipelineError::Service("service is not on an IP socket".into()))?
            .to_string();
        std::fs::create_dir_all(&work)?;
        let shared = Arc::new(Shared::default());
        let (tx, rx) = mpsc::channel::<(String, TaskRequest)>();

        let worker = {
            let shared = Arc::clone(&shared);
            std::thread::spawn(move || {
                for (id, req) in rx {
                    run_task(&shared, &id, &req, &corpus, &work);
                }
            })
        };
        let http = {
            let server = Arc::clone(&server);
            let shared = Arc::clone(&shared);
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    handle(&shared, &tx, request);
                }
            })
        };
        log::info!("trainer service listening on {addr}");
        Ok(TrainerService {
            server,
            shared,
            addr,
            http: Some(http),
            worker: Some(worker),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Flips one byte in each of the next `n` snapshot responses.
    pub fn corrupt_next(&self, n: usize) {
        self.shared.corrupt.store(n, Ordering::SeqCst);
    }

    /// Blocks until the service is stopped from another thread or process.
    pub fn wait(mut self) {
        if let Some(h) = self.http.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.http.take() {
            let _ = h.join();
        }
        if let Some(h) = self.worker.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TrainerService {
    fn drop(&mut self) {
        self.stop();
    }
}

fn run_task(shared: &Shared, id: &str, req: &TaskRequest, corpus: &Path, work: &Path) {
    let dir = work.join(id);
    let result = std::fs::create_dir_all(&dir)
        .map_err(PipelineError::from)
        .and_then(|_| execute(req, corpus, Some(&dir), &|state| shared.update(id, |e| e.status.state = state)));
    match result {
        Ok(TaskOutput {
            snapshot,
            exemplars,
            builds,
            stages,
        }) => {
            let ex = serde_json::to_vec(&exemplars).expect("bundle serialises");
            shared.update(id, |e| {
                e.status.snapshot_sha256 = Some(sha256_hex(&snapshot));
                e.status.stages = Some(stages);
                e.status.builds = builds;
                e.snapshot = Some(Arc::new(snapshot));
                e.exemplars = Some(Arc::new(ex));
                e.status.state = TaskState::Done;
            });
            log::info!("task {id} done");
        }
        Err(err) => {
            log::warn!("task {id} failed: {err}");
            shared.update(id, |e| {
                e.status.error = Some(err.to_string());
                e.status.state = TaskState::Failed;
            });
        }
    }
}

fn json_response(code: u16, body: &impl Serialize) -> Response<std::io::Cursor<Vec<u8>>> {
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    Response::from_data(serde_json::to_vec(body).expect("serialisable")).with_status_code(code).with_header(header)
}

fn error_response(code: u16, msg: &str) -> Response<std::io::Cursor<Vec<u8>>> {
    json_response(code, &serde_json::json!({ "error": msg }))
}

fn handle(shared: &Shared, tx: &mpsc::Sender<(String, TaskRequest)>, mut request: tiny_http::Request) {
    let path = request.url().split('?').next().unwrap_or("").to_string();
    let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
    let response = match (request.method(), parts.as_slice()) {
        (Method::Get, ["health"]) => json_response(200, &serde_json::json!({ "status": "ok" })),
        (Method::Post, ["tasks"]) => {
            let mut body = Vec::new();
            match request.as_reader().read_to_end(&mut body) {
                Err(e) => error_response(400, &e.to_string()),
                Ok(_) => match serde_json::from_slice::<TaskRequest>(&body) {
                    Err(e) => error_response(400, &format!("bad task request: {e}")),
                    Ok(req) => {
                        let id = format!("task-{:04}", shared.next_id.fetch_add(1, Ordering::SeqCst) + 1);
                        shared.tasks.lock().expect("task table").insert(
                            id.clone(),
                            Entry {
                                status: TaskStatus {
                                    id: id.clone(),
                                    state: TaskState::Queued,
                                    error: None,
                                    stages: None,
                                    builds: Vec::new(),
                                    snapshot_sha256: None,
                                },
                                snapshot: None,
                                exemplars: None,
                            },
                        );
                        match tx.send((id.clone(), req)) {
                            Ok(()) => json_response(202, &Submitted { id }),
                            Err(_) => error_response(503, "worker stopped"),
                        }
                    }
                },
            }
        }
        (Method::Get, ["tasks", id]) => match shared.tasks.lock().expect("task table").get(*id) {
            Some(e) => json_response(200, &e.status),
            None => error_response(404, &format!("unknown task '{id}'")),
        },
        (Method::Get, ["tasks", id, what @ ("snapshot" | "exemplars")]) => {
            let entry = shared
                .tasks
                .lock()
                .expect("task table")
                .get(*id)
                .map(|e| (e.snapshot.clone(), e.exemplars.clone()));
            match entry {
                None => error_response(404, &format!("unknown task '{id}'")),
                Some((snap, ex)) => {
                    let blob = if *what == "snapshot" { snap } else { ex };
                    match blob {
                        None => error_response(409, "task has no result"),
                        Some(bytes) => {
                            let hash = sha256_hex(&bytes);
                            let mut body = bytes.as_ref().clone();
                            if *what == "snapshot"
                                && shared
                                    .corrupt
                                    .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                                    .is_ok()
                            {
                                let mid = body.len() / 2;
                                body[mid] ^= 0x01;
                            }
                            Response::from_data(body)
                                .with_header(Header::from_bytes(HASH_HEADER, hash.as_bytes()).expect("hex header"))
                        }
                    }
                }
            }
        }
        _ => error_response(404, &format!("no route for {path}")),
    };
    if let Err(e) = request.respond(response) {
        log::warn!("failed to answer a request: {e}");
    }
}

/// Client side of the trainer protocol.
#[derive(Debug, Clone)]
pub struct TrainerClient {
    base: String,
    agent: ureq::Agent,
    pub poll_interval: Duration,
    pub timeout: Duration,
}

fn service_err(e: ureq::Error) -> PipelineError {
    match e {
        ureq::Error::Status(code, resp) => {
            PipelineError::Service(format!("HTTP {code}: {}", resp.into_string().unwrap_or_default()))
        }
        ureq::Error::Transport(t) => PipelineError::Service(t.to_string()),
    }
}

fn read_body(resp: ureq::Response) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    resp.into_reader().read_to_end(&mut body)?;
    Ok(body)
}

impl TrainerClient {
    pub fn new(base: &str) -> Self {
        TrainerClient {
            base: base.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().timeout_connect(Duration::from_secs(5)).build(),
            poll_interval: Duration::from_millis(20),
            timeout: Duration::from_secs(3600),
        }
    }

    pub fn health(&self) -> Result<()> {
        self.agent.get(&format!("{}/health", self.base)).call().map_err(service_err)?;
        Ok(())
    }

    pub fn submit(&self, req: &TaskRequest) -> Result<String> {
        let resp = self
            .agent
            .post(&format!("{}/tasks", self.base))
            .set("Content-Type", "application/json")
            .send_bytes(&serde_json::to_vec(req)?)
            .map_err(service_err)?;
        let s: Submitted = serde_json::from_slice(&read_body(resp)?)?;
        Ok(s.id)
    }

    pub fn status(&self, id: &str) -> Result<TaskStatus> {
        match self.agent.get(&format!("{}/tasks/{id}", self.base)).call() {
            Ok(resp) => Ok(serde_json::from_slice(&read_body(resp)?)?),
            Err(ureq::Error::Status(404, _)) => Err(PipelineError::NotFound(id.to_string())),
            Err(e) => Err(service_err(e)),
        }
    }

    pub fn wait(&self, id: &str) -> Result<TaskStatus> {
        let started = Instant::now();
        loop {
            let status = self.status(id)?;
            match status.state {
                TaskState::Done => return Ok(status),
                TaskState::Failed => {
                    return Err(PipelineError::Service(format!(
                        "task {id} failed: {}",
                        status.error.unwrap_or_default()
                    )))
                }
                _ if started.elapsed() > self.timeout => {
                    return Err(PipelineError::Service(format!("task {id} timed out")))
                }
                _ => std::thread::sleep(self.poll_interval),
            }
        }
    }

    fn fetch_once(&self, id: &str, what: &str) -> Result<Vec<u8>> {
        let resp = match self.agent.get(&format!("{}/tasks/{id}/{what}", self.base)).call() {
            Ok(r) => r,
            Err(ureq::Error::Status(404, _)) => return Err(PipelineError::NotFound(id.to_string())),
            Err(e) => return Err(service_err(e)),
        };
        let expected = resp
            .header(HASH_HEADER)
            .map(str::to_string)
            .ok_or_else(|| PipelineError::Transfer(format!("{what} of {id} has no content hash")))?;
        let body = read_body(resp)?;
        let got = sha256_hex(&body);
        if got != expected {
            return Err(PipelineError::Transfer(format!(
                "{what} of {id} hash mismatch: expected {expected}, got {got}"
            )));
        }
        Ok(body)
    }

    /// Downloads a result, verifying its hash; one retry on mismatch.
    pub fn fetch(&self, id: &str, what: &str) -> Result<Vec<u8>> {
        match self.fetch_once(id, what) {
            Err(PipelineError::Transfer(msg)) => {
                log::warn!("{msg}; retrying");
                self.fetch_once(id, what)
            }
            other => other,
        }
    }

    /// Submits, waits, and downloads. Also returns the download seconds.
    pub fn run(&self, req: &TaskRequest) -> Result<(TaskOutput, f64)> {
        let id = self.submit(req)?;
        log::info!("submitted {id}");
        let status = self.wait(&id)?;
        let t = Instant::now();
        let snapshot = self.fetch(&id, "snapshot")?;
        let exemplars: ExemplarBundle = serde_json::from_slice(&self.fetch(&id, "exemplars")?)?;
        let transfer_s = t.elapsed().as_secs_f64();
        Ok((
            TaskOutput {
                snapshot,
                exemplars,
                builds: status.builds,
                stages: status.stages.unwrap_or_default(),
            },
            transfer_s,
        ))
    }
}
