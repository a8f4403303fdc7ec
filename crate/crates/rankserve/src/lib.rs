//! HTTP ranking service. A person orders candidate rollouts in the browser
//! and that ordering is the ranking oracle of a prompt-tuning run.
//!
//! The tuner runs on a background thread; it rolls out all candidates of an
//! iteration with shared episode seeds, publishes them, and blocks until a
//! ranking arrives through `POST /api/ranking`. State is persisted to
//! `session.json` and `trace.jsonl` in the session directory after every
//! transition, so a restarted service resumes at the same query.

mod api;
pub mod session;
mod worker;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use ptdt_core::dtmodel::Checkpoint;
use ptdt_core::trajdata::flatten_prompt;
use ptdt_core::zorank::{TuneTrace, TunerConfig};
use ptdt_core::FORMAT_VERSION;

pub use session::{
    Candidate, CandidateSet, SessionFile, SessionSpec, SubmittedRanking, TaskInfo, Trajectory, TunerState,
};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ptdt_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("session: {0}")]
    Session(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Tuner defaults for a human oracle: six candidates are about as many as a
/// person can order reliably.
pub fn human_tuner_defaults() -> TunerConfig {
    TunerConfig {
        m: 6,
        k: 6,
        ..TunerConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// 0 picks a free port.
    pub port: u16,
    pub host: [u8; 4],
    pub session_dir: PathBuf,
    /// Built UI bundle served at `/`.
    pub ui_dir: Option<PathBuf>,
    pub reveal_returns: bool,
}

impl ServeOptions {
    pub fn new(session_dir: impl Into<PathBuf>) -> Self {
        Self {
            port: 0,
            host: [127, 0, 0, 1],
            session_dir: session_dir.into(),
            ui_dir: None,
            reveal_returns: false,
        }
    }
}

/// A running service; dropping it shuts it down.
pub struct RunningServer {
    pub addr: SocketAddr,
    shared: Arc<worker::Shared>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    http: Option<JoinHandle<()>>,
    worker: Option<JoinHandle<()>>,
}

impl RunningServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the session finishes or is aborted.
    pub fn wait(&self) -> TunerState {
        self.shared.wait_done()
    }

    pub fn state(&self) -> TunerState {
        self.shared.lock().file.state
    }

    /// Stops the worker and the HTTP server. The session stays resumable.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop();
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        for handle in [self.http.take(), self.worker.take()].into_iter().flatten() {
            let _ = handle.join();
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Starts (or resumes) the session in `opts.session_dir`.
///
/// With an existing `session.json` the stored session resumes and `spec`,
/// if given, must describe the same session.
pub fn start(opts: ServeOptions, spec: Option<SessionSpec>) -> Result<RunningServer> {
    let dir = opts.session_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
        context: format!("creating {}", dir.display()),
        source,
    })?;
    let (mut file, trace) = match SessionFile::load(&dir)? {
        Some(file) => {
            if let Some(spec) = &spec {
                if spec.id() != file.id {
                    return Err(Error::Session(format!(
                        "{} holds session {}, not {}",
                        dir.display(),
                        file.id,
                        spec.id()
                    )));
                }
            }
            let trace_path = SessionFile::trace_path(&dir);
            let ckpt_trace = if trace_path.exists() {
                Some(TuneTrace::load(&trace_path)?)
            } else {
                None
            };
            (file, ckpt_trace)
        }
        None => {
            let spec = spec.ok_or_else(|| Error::Session(format!("no session in {}", dir.display())))?;
            let file = SessionFile {
                format_version: FORMAT_VERSION,
                id: spec.id(),
                spec,
                state: TunerState::Idle,
                t: 0,
                pending: None,
                history: Vec::new(),
                error: None,
            };
            file.save(&dir)?;
            (file, None)
        }
    };
    let spec = file.spec.clone();
    spec.tuner
        .validate(flatten_prompt(&spec.prompt).x.len())
        .map_err(Error::Core)?;
    let ckpt = Checkpoint::load(&spec.checkpoint)?;
    let flat = flatten_prompt(&spec.prompt);
    let mut trace = trace.unwrap_or_else(|| worker::new_trace(&ckpt, &flat, &spec.tuner, &file.id));
    // A stopped run recorded a summary; the resumed run writes a new one.
    trace.summary = None;

    // A ranking accepted just before a restart whose iteration never
    // completed is replayed instead of asked again.
    let done = trace.iterations.len();
    let answer = file.history.last().filter(|a| a.t == done + 1).cloned();
    if answer.is_some() {
        file.pending = None;
        if !file.state.is_terminal() {
            file.state = TunerState::Idle;
        }
    }
    let terminal = file.state.is_terminal();
    let shared = Arc::new(worker::Shared {
        inner: Mutex::new(worker::Inner {
            file,
            answer,
            trace,
            stop: false,
        }),
        changed: Condvar::new(),
        dir: dir.clone(),
        reveal_returns: opts.reveal_returns,
    });

    let listener = std::net::TcpListener::bind(SocketAddr::from((opts.host, opts.port))).map_err(|source| Error::Io {
        context: format!("binding port {}", opts.port),
        source,
    })?;
    listener.set_nonblocking(true).map_err(|source| Error::Io {
        context: "configuring listener".into(),
        source,
    })?;
    let addr = listener.local_addr().map_err(|source| Error::Io {
        context: "reading listener address".into(),
        source,
    })?;
    let router = api::router(shared.clone(), opts.ui_dir.clone());
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|source| Error::Io {
            context: "starting runtime".into(),
            source,
        })?;
    let http = std::thread::Builder::new()
        .name("rankserve-http".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("listener: {e}");
                        return;
                    }
                };
                let server = axum::serve(listener, router).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = server.await {
                    log::error!("server: {e}");
                }
            });
        })
        .map_err(|source| Error::Io {
            context: "spawning server thread".into(),
            source,
        })?;

    let worker = if terminal {
        None
    } else {
        let shared = shared.clone();
        Some(
            std::thread::Builder::new()
                .name("rankserve-tuner".into())
                .spawn(move || worker::run(shared, ckpt, spec))
                .map_err(|source| Error::Io {
                    context: "spawning tuner thread".into(),
                    source,
                })?,
        )
    };
    log::info!("ranking service on http://{addr}");
    Ok(RunningServer {
        addr,
        shared,
        shutdown: Some(tx),
        http: Some(http),
        worker,
    })
}
