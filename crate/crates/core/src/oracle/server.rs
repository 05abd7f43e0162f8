//! JSON-over-HTTP front end for the oracle.
//!
//! `POST /query` takes `{version, id, mode, r, input}` and answers
//! `{version, id, labels, confidences}`; failures answer
//! `{version, status, message}` with a 4xx code. `GET /info` reports the
//! class count, input width and model fingerprint.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::{BlackBoxOracle, QueryMode, QueryResult, QueryService};
use crate::datasets::Input;
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum WireKind {
    Hard,
    SoftTopR,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireRequest {
    version: u32,
    id: String,
    mode: WireKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<usize>,
    input: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireAnswer {
    version: u32,
    id: String,
    labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidences: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireError {
    version: u32,
    status: String,
    message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WireInfo {
    version: u32,
    num_classes: usize,
    input_dim: usize,
    fingerprint: String,
}

fn to_wire(mode: QueryMode) -> (WireKind, Option<usize>) {
    match mode {
        QueryMode::Hard => (WireKind::Hard, None),
        QueryMode::SoftTopR { r } => (WireKind::SoftTopR, Some(r)),
    }
}

fn from_wire(kind: WireKind, r: Option<usize>) -> std::result::Result<QueryMode, String> {
    match (kind, r) {
        (WireKind::Hard, _) => Ok(QueryMode::Hard),
        (WireKind::SoftTopR, Some(r)) => Ok(QueryMode::SoftTopR { r }),
        (WireKind::SoftTopR, None) => Err("soft_top_r requires r".into()),
    }
}

struct ServerState {
    oracle: Arc<BlackBoxOracle>,
    /// Most revealing mode this endpoint will serve.
    ceiling: Option<QueryMode>,
}

type Reply = std::result::Result<Json<WireAnswer>, (StatusCode, Json<WireError>)>;

fn reject(
    code: StatusCode,
    status: &str,
    message: impl Into<String>,
) -> (StatusCode, Json<WireError>) {
    (
        code,
        Json(WireError {
            version: PROTOCOL_VERSION,
            status: status.into(),
            message: message.into(),
        }),
    )
}

async fn handle_query(
    State(state): State<Arc<ServerState>>,
    Json(req): Json<WireRequest>,
) -> Reply {
    if req.version != PROTOCOL_VERSION {
        return Err(reject(
            StatusCode::BAD_REQUEST,
            "version-mismatch",
            format!(
                "server speaks version {PROTOCOL_VERSION}, got {}",
                req.version
            ),
        ));
    }
    let mode = from_wire(req.mode, req.r)
        .map_err(|m| reject(StatusCode::BAD_REQUEST, "invalid-mode", m))?;
    if let Err(e) = mode.validate(state.oracle.num_classes()) {
        return Err(reject(
            StatusCode::BAD_REQUEST,
            "invalid-mode",
            e.to_string(),
        ));
    }
    if !permitted(mode, state.ceiling) {
        return Err(reject(
            StatusCode::FORBIDDEN,
            "invalid-mode",
            format!("this endpoint serves at most {:?}", state.ceiling),
        ));
    }
    let input = Input::Features(req.input);
    match state.oracle.query_with_id(&req.id, &input, mode) {
        Ok(res) => Ok(Json(WireAnswer {
            version: PROTOCOL_VERSION,
            id: req.id,
            labels: res.labels,
            confidences: res.confidences,
        })),
        Err(e) => Err(reject(
            StatusCode::UNPROCESSABLE_ENTITY,
            "malformed-input",
            e.to_string(),
        )),
    }
}

fn permitted(mode: QueryMode, ceiling: Option<QueryMode>) -> bool {
    match (mode, ceiling) {
        (_, None) | (QueryMode::Hard, _) => true,
        (QueryMode::SoftTopR { .. }, Some(QueryMode::Hard)) => false,
        (QueryMode::SoftTopR { r }, Some(QueryMode::SoftTopR { r: max })) => r <= max,
    }
}

async fn handle_info(State(state): State<Arc<ServerState>>) -> Json<WireInfo> {
    Json(WireInfo {
        version: PROTOCOL_VERSION,
        num_classes: state.oracle.num_classes(),
        input_dim: state.oracle.input_dim(),
        fingerprint: state.oracle.fingerprint(),
    })
}

fn router(oracle: Arc<BlackBoxOracle>, ceiling: Option<QueryMode>) -> Router {
    Router::new()
        .route("/query", post(handle_query))
        .route("/info", get(handle_info))
        .with_state(Arc::new(ServerState { oracle, ceiling }))
}

/// A server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            t.join()
                .map_err(|_| Error::Transport("server thread panicked".into()))?
                .map_err(|e| Error::Transport(e.to_string()))?;
        }
        Ok(())
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

fn bind(addr: SocketAddr) -> Result<std::net::TcpListener> {
    let listener = std::net::TcpListener::bind(addr)
        .map_err(|e| Error::Transport(format!("bind {addr}: {e}")))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::Transport(e.to_string()))?;
    Ok(listener)
}

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
}

/// Serve on `addr` (port 0 picks a free port) from a background thread.
pub fn serve(
    oracle: Arc<BlackBoxOracle>,
    addr: SocketAddr,
    ceiling: Option<QueryMode>,
) -> Result<ServerHandle> {
    let std_listener = bind(addr)?;
    let addr = std_listener
        .local_addr()
        .map_err(|e| Error::Transport(e.to_string()))?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(oracle, ceiling);
    let thread = std::thread::spawn(move || {
        runtime()?.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener)?;
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serve on the current thread until the process is killed.
pub fn serve_blocking(
    oracle: Arc<BlackBoxOracle>,
    addr: SocketAddr,
    ceiling: Option<QueryMode>,
) -> Result<()> {
    let std_listener = bind(addr)?;
    let app = router(oracle, ceiling);
    runtime()
        .and_then(|rt| {
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener)?;
                log::info!("serving oracle on {}", listener.local_addr()?);
                axum::serve(listener, app).await
            })
        })
        .map_err(|e| Error::Transport(e.to_string()))
}

/// Client for a remote oracle endpoint.
pub struct RemoteOracle {
    base: String,
    agent: ureq::Agent,
    info: WireInfo,
}

impl RemoteOracle {
    pub fn connect(base_url: &str) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        let base = base_url.trim_end_matches('/').to_string();
        let mut resp = agent
            .get(format!("{base}/info"))
            .call()
            .map_err(|e| Error::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Transport(format!(
                "GET /info returned {}",
                resp.status()
            )));
        }
        let info: WireInfo = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(e.to_string()))?;
        if info.version != PROTOCOL_VERSION {
            return Err(Error::Protocol {
                status: "version-mismatch".into(),
                message: format!("server speaks version {}", info.version),
            });
        }
        Ok(Self { base, agent, info })
    }

    pub fn input_dim(&self) -> usize {
        self.info.input_dim
    }

    pub fn remote_query(&self, id: &str, x: &Input, mode: QueryMode) -> Result<QueryResult> {
        let (kind, r) = to_wire(mode);
        let body = WireRequest {
            version: PROTOCOL_VERSION,
            id: id.to_string(),
            mode: kind,
            r,
            input: x.to_row()?,
        };
        let mut resp = self
            .agent
            .post(format!("{}/query", self.base))
            .send_json(&body)
            .map_err(|e| Error::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            let err: WireError = resp.body_mut().read_json().map_err(|e| {
                Error::Transport(format!(
                    "status {} with unreadable body: {e}",
                    resp.status()
                ))
            })?;
            return Err(Error::Protocol {
                status: err.status,
                message: err.message,
            });
        }
        let ans: WireAnswer = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(e.to_string()))?;
        if ans.version != PROTOCOL_VERSION {
            return Err(Error::Protocol {
                status: "version-mismatch".into(),
                message: format!("answer carries version {}", ans.version),
            });
        }
        Ok(QueryResult {
            labels: ans.labels,
            confidences: ans.confidences,
            mode,
        })
    }
}

impl QueryService for RemoteOracle {
    fn num_classes(&self) -> usize {
        self.info.num_classes
    }

    fn fingerprint(&self) -> String {
        self.info.fingerprint.clone()
    }

    fn query_with_id(&self, id: &str, x: &Input, mode: QueryMode) -> Result<QueryResult> {
        self.remote_query(id, x, mode)
    }
}
