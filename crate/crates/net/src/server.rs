//! HTTP front ends for the two worker roles.

use std::collections::HashMap;
use std::io;
use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sieve_core::index::ParamSet;
use sieve_core::pq::PqCode;
use tokio::sync::oneshot;

use crate::error::{NetError, Result};
use crate::wire::*;
use crate::worker::{IndexWorker, RefineWorker};

/// A server running on its own thread. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting connections and wait for the server thread.
    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop()
    }

    /// Block until the server exits on its own.
    pub fn wait(mut self) -> io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }

    fn stop(&mut self) -> io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

pub fn serve_index(worker: Arc<IndexWorker>, addr: &str) -> io::Result<ServerHandle> {
    let app = Router::new()
        .route("/v1/filter", post(filter))
        .route("/v1/insert_index", post(insert_index))
        .route("/v1/delete", post(index_delete))
        .route("/v1/install", post(install))
        .route("/v1/checkpoint", post(index_checkpoint))
        .route("/v1/stats", get(index_stats))
        .with_state(worker);
    spawn(app, addr)
}

pub fn serve_refine(worker: Arc<RefineWorker>, addr: &str) -> io::Result<ServerHandle> {
    let app = Router::new()
        .route("/v1/refine", post(refine))
        .route("/v1/insert_full", post(insert_full))
        .route("/v1/delete", post(refine_delete))
        .route("/v1/checkpoint", post(refine_checkpoint))
        .route("/v1/stats", get(refine_stats))
        .with_state(worker);
    spawn(app, addr)
}

fn spawn(app: Router, addr: &str) -> io::Result<ServerHandle> {
    let app = app
        .fallback(|| async { reply::<()>(Err(NetError::BadRequest("no such endpoint".into()))) })
        .layer(DefaultBodyLimit::max(1 << 30));
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name(format!("http-{local}")).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
        })
    })?;
    Ok(ServerHandle { addr: local, shutdown: Some(tx), thread: Some(thread) })
}

fn reply<T: Serialize>(r: Result<T>) -> Response {
    match r {
        Ok(p) => (StatusCode::OK, Json(Envelope::ok(p))).into_response(),
        Err(e) => {
            let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            (status, Json(Envelope::<()>::err(&e))).into_response()
        }
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| NetError::BadRequest(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f).await.unwrap_or_else(|e| Err(NetError::Internal(e.to_string())))
}

async fn filter(State(w): State<Arc<IndexWorker>>, body: Bytes) -> Response {
    reply(
        blocking(move || {
            let req: FilterRequest = parse(&body)?;
            let x = decode_vector(&req.vector)?;
            let out = w.filter(x, req.config)?;
            Ok(FilterResponse {
                candidates: out
                    .candidates
                    .into_iter()
                    .map(|(id, score, pid)| Candidate { id: id.to_string(), score, pid })
                    .collect(),
                partitions_scanned: out.partitions_scanned,
            })
        })
        .await,
    )
}

async fn insert_index(State(w): State<Arc<IndexWorker>>, body: Bytes) -> Response {
    reply(
        blocking(move || {
            let req: InsertIndexRequest = parse(&body)?;
            let id = parse_id(&req.id)?;
            let (pid, code) = match (&req.vector, req.pid, &req.code) {
                (_, Some(pid), Some(code)) => {
                    let m = w.index()?.partitions().m();
                    (pid as usize, PqCode::from_bytes(m, decode_bytes(code)?)?)
                }
                (Some(v), _, _) => w.encode(id, &decode_vector(v)?)?,
                _ => return Err(NetError::BadRequest("need a vector or a pid and code".into())),
            };
            if req.apply {
                w.apply(id, pid, &code)?;
            }
            Ok(InsertIndexResponse { pid: pid as u32, code: encode_bytes(code.as_bytes()), applied: req.apply })
        })
        .await,
    )
}

async fn index_delete(State(w): State<Arc<IndexWorker>>, body: Bytes) -> Response {
    reply(
        blocking(move || {
            let req: DeleteRequest = parse(&body)?;
            Ok(DeleteResponse { deleted: w.delete(&parse_ids(&req.ids)?)? })
        })
        .await,
    )
}

async fn install(State(w): State<Arc<IndexWorker>>, body: Bytes) -> Response {
    reply(
        blocking(move || {
            let req: InstallRequest = parse(&body)?;
            let params = match (&req.params, &req.path) {
                (Some(b64), None) => ParamSet::read_from(&mut decode_bytes(b64)?.as_slice())?,
                (None, Some(path)) => ParamSet::load(path)?,
                _ => return Err(NetError::BadRequest("give exactly one of params and path".into())),
            };
            let digest = w.install(params, req.dry_run)?;
            Ok(InstallResponse { installed: !req.dry_run, digest })
        })
        .await,
    )
}

async fn index_checkpoint(State(w): State<Arc<IndexWorker>>, body: Bytes) -> Response {
    reply(
        blocking(move || {
            let req: CheckpointRequest = parse(&body)?;
            Ok(CheckpointResponse { vectors: w.checkpoint(&req.path)?.vectors })
        })
        .await,
    )
}

fn wants_detail(q: &HashMap<String, String>) -> bool {
    q.get("detail").is_some_and(|v| v == "1" || v == "true")
}

async fn index_stats(State(w): State<Arc<IndexWorker>>, Query(q): Query<HashMap<String, String>>) -> Response {
    reply(blocking(move || Ok(w.stats(wants_detail(&q)))).await)
}

async fn refine(State(w): State<Arc<RefineWorker>>, body: Bytes) -> Response {
    reply(
        blocking(move || {
            let req: RefineRequest = parse(&body)?;
            let x = decode_vector(&req.vector)?;
            let (results, missing) = w.refine(&x, &parse_ids(&req.ids)?, req.k)?;
            Ok(RefineResponse {
                results: results.into_iter().map(|(id, score)| Scored { id: id.to_string(), score }).collect(),
                missing: id_strings(&missing),
            })
        })
        .await,
    )
}

async fn insert_full(State(w): State<Arc<RefineWorker>>, body: Bytes) -> Response {
    reply(
        blocking(move || {
            let req: InsertFullRequest = parse(&body)?;
            w.insert(parse_id(&req.id)?, &decode_vector(&req.vector)?)?;
            Ok(InsertFullResponse { vectors: w.store().len() })
        })
        .await,
    )
}

async fn refine_delete(State(w): State<Arc<RefineWorker>>, body: Bytes) -> Response {
    reply(
        blocking(move || {
            let req: DeleteRequest = parse(&body)?;
            Ok(DeleteResponse { deleted: w.delete(&parse_ids(&req.ids)?) })
        })
        .await,
    )
}

async fn refine_checkpoint(State(w): State<Arc<RefineWorker>>, body: Bytes) -> Response {
    reply(
        blocking(move || {
            let req: CheckpointRequest = parse(&body)?;
            Ok(CheckpointResponse { vectors: w.checkpoint(&req.path)? })
        })
        .await,
    )
}

async fn refine_stats(State(w): State<Arc<RefineWorker>>) -> Response {
    reply::<RefineStats>(Ok(w.stats()))
}
