//! Blocking client that drives a cluster: filter on one index worker,
//! refine on the owning shards in parallel, merge locally.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sieve_core::index::{ParamSet, SearchConfig};
use sieve_core::ivf::TopK;
use ureq::Agent;

use crate::config::ClusterConfig;
use crate::error::{NetError, Result};
use crate::wire::*;

/// Result of a distributed search.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClientSearch {
    /// `(id, exact score)`, best first.
    pub results: Vec<(u64, f32)>,
    pub candidates: usize,
    pub partitions_scanned: usize,
    /// Candidates no refine worker could resolve.
    pub missing: Vec<u64>,
    /// Index worker that served the filter stage.
    pub index_worker: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsertAck {
    pub pid: usize,
    pub refine_worker: usize,
    /// Index replicas that applied the entry.
    pub replicas_applied: usize,
    pub replicas_total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeleteAck {
    pub replicas_applied: usize,
    pub replicas_total: usize,
}

pub struct Client {
    cfg: ClusterConfig,
    agent: Agent,
    next: AtomicUsize,
    sticky: Option<usize>,
}

impl Client {
    pub fn new(cfg: ClusterConfig) -> Result<Self> {
        cfg.validate(None)?;
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Ok(Self { cfg, agent, next: AtomicUsize::new(0), sticky: None })
    }

    /// Send every filter request to one index worker, so reads observe
    /// writes that worker acknowledged.
    pub fn with_sticky_worker(mut self, worker: usize) -> Result<Self> {
        if worker >= self.cfg.index_workers.len() {
            return Err(NetError::Config(format!("no index worker {worker}")));
        }
        self.sticky = Some(worker);
        Ok(self)
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    fn pick_index_worker(&self) -> usize {
        self.sticky.unwrap_or_else(|| self.next.fetch_add(1, Ordering::Relaxed) % self.cfg.index_workers.len())
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, addr: &str, path: &str, body: &B) -> Result<T> {
        let resp = self
            .agent
            .post(&format!("http://{addr}{path}"))
            .send_json(body)
            .map_err(|e| NetError::Transport { addr: addr.to_string(), msg: e.to_string() })?;
        read_envelope(addr, resp)
    }

    fn get<T: DeserializeOwned>(&self, addr: &str, path: &str) -> Result<T> {
        let resp = self
            .agent
            .get(&format!("http://{addr}{path}"))
            .call()
            .map_err(|e| NetError::Transport { addr: addr.to_string(), msg: e.to_string() })?;
        read_envelope(addr, resp)
    }

    /// Filter stage on worker `i`.
    pub fn filter_on(&self, i: usize, x: &[f32], cfg: &SearchConfig) -> Result<FilterResponse> {
        let req = FilterRequest { vector: encode_vector(x), config: *cfg };
        self.post(&self.cfg.index_workers[i], "/v1/filter", &req)
    }

    /// Refine `ids` on refine worker `j` alone.
    pub fn refine_on(&self, j: usize, x: &[f32], ids: &[u64], k: usize) -> Result<(Vec<(u64, f32)>, Vec<u64>)> {
        let req = RefineRequest { vector: encode_vector(x), ids: id_strings(ids), k };
        let r: RefineResponse = self.post(&self.cfg.refine_workers[j], "/v1/refine", &req)?;
        let results = r.results.iter().map(|s| Ok((parse_id(&s.id)?, s.score))).collect::<Result<_>>()?;
        Ok((results, parse_ids(&r.missing)?))
    }

    /// Filter on the next index worker, retrying once on the following
    /// replica if the first is unreachable.
    fn filter_any(&self, x: &[f32], cfg: &SearchConfig) -> Result<(usize, FilterResponse)> {
        let first = self.pick_index_worker();
        match self.filter_on(first, x, cfg) {
            Err(e) if e.is_retryable() && self.cfg.index_workers.len() > 1 => {
                let second = (first + 1) % self.cfg.index_workers.len();
                log::warn!("index worker {first} failed ({e}), retrying on {second}");
                Ok((second, self.filter_on(second, x, cfg)?))
            }
            r => r.map(|f| (first, f)),
        }
    }

    pub fn search(&self, x: &[f32], cfg: &SearchConfig) -> Result<ClientSearch> {
        if cfg.k == 0 {
            return Ok(ClientSearch::default());
        }
        let (worker, filtered) = self.filter_any(x, cfg)?;
        let n = self.cfg.refine_workers.len();
        let mut shards: Vec<Vec<String>> = vec![Vec::new(); n];
        for c in &filtered.candidates {
            let id = parse_id(&c.id)?;
            let pid = c.pid as usize;
            if let crate::config::Sharding::ByIvf { partition_map } = &self.cfg.sharding {
                if pid >= partition_map.len() {
                    return Err(NetError::Internal(format!("candidate {id} in unknown partition {pid}")));
                }
            }
            shards[self.cfg.sharding.route(id, pid, n)].push(c.id.clone());
        }
        let vector = encode_vector(x);
        let replies: Vec<Result<RefineResponse>> = std::thread::scope(|s| {
            let handles: Vec<_> = shards
                .into_iter()
                .enumerate()
                .filter(|(_, ids)| !ids.is_empty())
                .map(|(j, ids)| {
                    let req = RefineRequest { vector: vector.clone(), ids, k: cfg.k };
                    let addr = &self.cfg.refine_workers[j];
                    s.spawn(move || self.post::<_, RefineResponse>(addr, "/v1/refine", &req))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(NetError::Internal("refine thread panicked".into()))))
                .collect()
        });
        let mut top = TopK::new(cfg.k);
        let mut missing = Vec::new();
        for r in replies {
            let r = r?;
            for s in r.results {
                top.offer(s.score, parse_id(&s.id)?);
            }
            missing.extend(parse_ids(&r.missing)?);
        }
        missing.sort_unstable();
        Ok(ClientSearch {
            results: top.into_sorted(),
            candidates: filtered.candidates.len(),
            partitions_scanned: filtered.partitions_scanned,
            missing,
            index_worker: worker,
        })
    }

    /// Encode on one index worker, store the full vector on its shard,
    /// then broadcast the entry to every index worker.
    pub fn insert(&self, id: u64, v: &[f32]) -> Result<InsertAck> {
        let encode = InsertIndexRequest {
            id: id.to_string(),
            vector: Some(encode_vector(v)),
            pid: None,
            code: None,
            apply: false,
        };
        let first = self.pick_index_worker();
        let encoded: InsertIndexResponse = match self.post(&self.cfg.index_workers[first], "/v1/insert_index", &encode) {
            Err(e) if e.is_retryable() && self.cfg.index_workers.len() > 1 => {
                let second = (first + 1) % self.cfg.index_workers.len();
                self.post(&self.cfg.index_workers[second], "/v1/insert_index", &encode)?
            }
            r => r?,
        };
        let pid = encoded.pid as usize;
        let shard = self.cfg.sharding.route(id, pid, self.cfg.refine_workers.len());
        let full = InsertFullRequest { id: id.to_string(), vector: encode.vector.clone().expect("set above") };
        self.post::<_, InsertFullResponse>(&self.cfg.refine_workers[shard], "/v1/insert_full", &full)?;

        let apply = InsertIndexRequest { id: id.to_string(), vector: None, pid: Some(encoded.pid), code: Some(encoded.code), apply: true };
        let results = self.broadcast::<_, InsertIndexResponse>("/v1/insert_index", &apply);
        let mut applied = 0;
        for (addr, r) in self.cfg.index_workers.iter().zip(&results) {
            match r {
                Ok(_) => applied += 1,
                Err(e) => log::warn!("insert of {id} not applied on {addr}: {e}"),
            }
        }
        if applied == 0 {
            return Err(results.into_iter().find_map(|r| r.err()).expect("some replica failed"));
        }
        Ok(InsertAck { pid, refine_worker: shard, replicas_applied: applied, replicas_total: results.len() })
    }

    /// Tombstone `ids` on every index worker and drop them from the shards.
    pub fn delete(&self, ids: &[u64]) -> Result<DeleteAck> {
        let req = DeleteRequest { ids: id_strings(ids) };
        let results = self.broadcast::<_, DeleteResponse>("/v1/delete", &req);
        for (addr, r) in self.cfg.refine_workers.iter().zip(self.broadcast_refine::<_, DeleteResponse>("/v1/delete", &req)) {
            if let Err(e) = r {
                log::warn!("delete not applied on refine worker {addr}: {e}");
            }
        }
        let applied = results.iter().filter(|r| r.is_ok()).count();
        if applied == 0 {
            return Err(results.into_iter().find_map(|r| r.err()).expect("some replica failed"));
        }
        Ok(DeleteAck { replicas_applied: applied, replicas_total: results.len() })
    }

    /// Two-phase install: every index worker validates the parameters
    /// first, and only if all accept do they switch.
    pub fn install_params(&self, params: &ParamSet) -> Result<String> {
        let mut bytes = Vec::new();
        params.write_to(&mut bytes).map_err(|e| NetError::Internal(e.to_string()))?;
        let mut req = InstallRequest { params: Some(encode_bytes(&bytes)), path: None, dry_run: true };
        let checks = self.broadcast::<_, InstallResponse>("/v1/install", &req);
        if let Some(e) = checks.into_iter().find_map(|r| r.err()) {
            return Err(e);
        }
        req.dry_run = false;
        let mut digest = String::new();
        for r in self.broadcast::<_, InstallResponse>("/v1/install", &req) {
            digest = r?.digest;
        }
        Ok(digest)
    }

    pub fn index_stats(&self, i: usize, detail: bool) -> Result<IndexStats> {
        let path = if detail { "/v1/stats?detail=1" } else { "/v1/stats" };
        self.get(&self.cfg.index_workers[i], path)
    }

    pub fn refine_stats(&self, j: usize) -> Result<RefineStats> {
        self.get(&self.cfg.refine_workers[j], "/v1/stats")
    }

    /// Checkpoint index worker `i` into `dir` on its own filesystem.
    pub fn checkpoint_index(&self, i: usize, dir: &str) -> Result<usize> {
        let r: CheckpointResponse = self.post(&self.cfg.index_workers[i], "/v1/checkpoint", &CheckpointRequest { path: dir.into() })?;
        Ok(r.vectors)
    }

    pub fn checkpoint_refine(&self, j: usize, dir: &str) -> Result<usize> {
        let r: CheckpointResponse = self.post(&self.cfg.refine_workers[j], "/v1/checkpoint", &CheckpointRequest { path: dir.into() })?;
        Ok(r.vectors)
    }

    fn broadcast<B: Serialize + Sync, T: DeserializeOwned + Send>(&self, path: &str, body: &B) -> Vec<Result<T>> {
        self.fan_out(&self.cfg.index_workers, path, body)
    }

    fn broadcast_refine<B: Serialize + Sync, T: DeserializeOwned + Send>(&self, path: &str, body: &B) -> Vec<Result<T>> {
        self.fan_out(&self.cfg.refine_workers, path, body)
    }

    fn fan_out<B: Serialize + Sync, T: DeserializeOwned + Send>(&self, addrs: &[String], path: &str, body: &B) -> Vec<Result<T>> {
        std::thread::scope(|s| {
            let handles: Vec<_> = addrs.iter().map(|a| s.spawn(move || self.post(a, path, body))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(NetError::Internal("request thread panicked".into()))))
                .collect()
        })
    }
}

fn read_envelope<T: DeserializeOwned>(addr: &str, mut resp: ureq::http::Response<ureq::Body>) -> Result<T> {
    let status = resp.status().as_u16();
    let env: Envelope<T> = resp
        .body_mut()
        .with_config()
        .limit(u64::MAX)
        .read_json()
        .map_err(|e| NetError::Transport { addr: addr.to_string(), msg: format!("unreadable response ({status}): {e}") })?;
    match (env.status.as_str(), env.payload, env.error) {
        ("ok", Some(p), _) => Ok(p),
        (_, _, Some(err)) => Err(NetError::Remote { addr: addr.to_string(), status, code: err.code, msg: err.msg }),
        _ => Err(NetError::Transport { addr: addr.to_string(), msg: format!("malformed envelope ({status})") }),
    }
}
