//! JSON-lines query service over TCP.
//!
//! One thread owns the runtime and receives every submission over a channel,
//! so query ids are assigned in arrival order. Each connection has a reader
//! thread and a writer thread; only the writer touches the socket's output,
//! one whole frame per write.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use bytes::Bytes;
use serde::{Deserialize, Serialize};

use sloserve::bench::scenarios::build_runtime;
use sloserve::bench::{Arrival, RunOutput, RunReport, SloTarget};
use sloserve::clock::Micros;
use sloserve::planner::Placement;
use sloserve::runtime::{QueryId, QueryStatus, Runtime};

use crate::config::{Deployment, Mode};
use crate::CliError;

const DRAIN_TIMEOUT_US: Micros = 30_000_000;

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum Request {
    Query {
        #[serde(default)]
        pipeline: Option<String>,
        payload: String,
    },
    Stats {
        #[serde(default)]
        pipeline: Option<String>,
    },
    Shutdown,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Frame {
    Result {
        id: QueryId,
        latency_us: Micros,
        payload: String,
    },
    Stats(Box<RunReport>),
    Error {
        #[serde(skip_serializing_if = "Option::is_none")]
        id: Option<QueryId>,
        reason: String,
    },
    Shutdown {
        drained: usize,
    },
}

impl Frame {
    fn error(reason: impl Into<String>) -> Self {
        Frame::Error {
            id: None,
            reason: reason.into(),
        }
    }
}

enum Cmd {
    Query { pipeline: String, payload: Bytes, reply: Sender<Frame> },
    Stats { pipeline: String, reply: Sender<Frame> },
    Shutdown { reply: Sender<Frame> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServeSummary {
    pub served: usize,
    pub drained: usize,
}

struct Service {
    rt: Runtime,
    mode: Mode,
    start: Instant,
    slo: Vec<SloTarget>,
    pending: Vec<(QueryId, Sender<Frame>)>,
    served: BTreeMap<String, Vec<QueryId>>,
}

impl Service {
    fn wall_us(&self) -> Micros {
        self.start.elapsed().as_micros() as Micros
    }

    fn run(mut self, rx: Receiver<Cmd>) -> ServeSummary {
        loop {
            let cmd = match self.mode {
                Mode::Simulate => match rx.recv() {
                    Ok(c) => Some(c),
                    Err(_) => break,
                },
                Mode::Live => match rx.recv_timeout(Duration::from_millis(1)) {
                    Ok(c) => Some(c),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => break,
                },
            };
            if self.mode == Mode::Live {
                let t = self.wall_us().max(self.rt.now());
                self.rt.advance_to(t);
            }
            match cmd {
                Some(Cmd::Query { pipeline, payload, reply }) => match self.rt.ingress_submit(&pipeline, payload) {
                    Ok(id) => {
                        self.pending.push((id, reply));
                        self.served.entry(pipeline).or_default().push(id);
                    }
                    Err(e) => {
                        let _ = reply.send(Frame::error(e.to_string()));
                    }
                },
                Some(Cmd::Stats { pipeline, reply }) => {
                    let _ = reply.send(self.stats(&pipeline));
                }
                Some(Cmd::Shutdown { reply }) => {
                    let drained = self.shutdown();
                    let _ = reply.send(Frame::Shutdown { drained });
                    return self.summary(drained);
                }
                None => {}
            }
            if self.mode == Mode::Simulate {
                while !self.pending.is_empty() && self.rt.step() {
                    self.flush();
                }
            }
            self.flush();
        }
        let drained = self.shutdown();
        self.summary(drained)
    }

    fn summary(&self, drained: usize) -> ServeSummary {
        ServeSummary {
            served: self.served.values().map(Vec::len).sum(),
            drained,
        }
    }

    fn shutdown(&mut self) -> usize {
        let names: Vec<String> = self.served.keys().cloned().collect();
        let mut drained = 0;
        for p in names {
            match self.rt.drain(&p, DRAIN_TIMEOUT_US) {
                Ok(n) => drained += n,
                Err(e) => log::warn!("drain of {p}: {e}"),
            }
        }
        self.flush();
        for (id, reply) in self.pending.drain(..) {
            let _ = reply.send(Frame::Error {
                id: Some(id),
                reason: "service shut down".into(),
            });
        }
        drained
    }

    /// Answers every pending query that has finished.
    fn flush(&mut self) {
        let rt = &self.rt;
        self.pending.retain(|(id, reply)| {
            let rec = rt.query(*id).expect("pending query has a record");
            let frame = match &rec.status {
                QueryStatus::InFlight => return true,
                QueryStatus::Completed => Frame::Result {
                    id: *id,
                    latency_us: rec.latency_us().unwrap_or(0),
                    payload: BASE64.encode(rec.result.as_deref().unwrap_or_default()),
                },
                QueryStatus::Failed(reason) => Frame::Error {
                    id: Some(*id),
                    reason: reason.clone(),
                },
            };
            let _ = reply.send(frame);
            false
        });
    }

    /// Report over this pipeline's finished queries.
    fn stats(&self, pipeline: &str) -> Frame {
        if self.rt.pipeline(pipeline).is_none() {
            return Frame::error(format!("no such pipeline {pipeline}"));
        }
        let ids: Vec<QueryId> = self
            .served
            .get(pipeline)
            .into_iter()
            .flatten()
            .copied()
            .filter(|id| self.rt.query(*id).is_some_and(|q| q.status != QueryStatus::InFlight))
            .collect();
        let arrivals = ids
            .iter()
            .enumerate()
            .map(|(i, id)| Arrival {
                index: i as u64,
                phase: 0,
                t_us: self.rt.query(*id).map_or(0, |q| q.ingress_us),
            })
            .collect();
        let out = RunOutput {
            pipeline: pipeline.to_string(),
            phases: Vec::new(),
            arrivals,
            query_ids: ids,
            in_flight: Vec::new(),
            resize_events: Vec::new(),
            controller: None,
        };
        match RunReport::build(&self.rt, &out, &self.slo) {
            Ok(r) => Frame::Stats(Box::new(r)),
            Err(e) => Frame::error(e.to_string()),
        }
    }
}

fn connection(stream: TcpStream, cmds: Sender<Cmd>, default_pipeline: String) {
    let (ftx, frx) = mpsc::channel::<Frame>();
    let Ok(mut out) = stream.try_clone() else { return };
    let writer = thread::spawn(move || {
        for f in frx {
            let mut line = serde_json::to_string(&f).expect("frame serializes");
            line.push('\n');
            if out.write_all(line.as_bytes()).is_err() {
                break;
            }
        }
    });
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        let line = String::from_utf8_lossy(&buf);
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cmd = match serde_json::from_str::<Request>(line) {
            Err(e) => {
                let _ = ftx.send(Frame::error(format!("malformed request: {e}")));
                continue;
            }
            Ok(Request::Query { pipeline, payload }) => match BASE64.decode(payload.as_bytes()) {
                Ok(bytes) => Cmd::Query {
                    pipeline: pipeline.unwrap_or_else(|| default_pipeline.clone()),
                    payload: Bytes::from(bytes),
                    reply: ftx.clone(),
                },
                Err(e) => {
                    let _ = ftx.send(Frame::error(format!("payload is not base64: {e}")));
                    continue;
                }
            },
            Ok(Request::Stats { pipeline }) => Cmd::Stats {
                pipeline: pipeline.unwrap_or_else(|| default_pipeline.clone()),
                reply: ftx.clone(),
            },
            Ok(Request::Shutdown) => Cmd::Shutdown { reply: ftx.clone() },
        };
        if cmds.send(cmd).is_err() {
            let _ = ftx.send(Frame::error("service is shutting down"));
            break;
        }
    }
    drop(ftx);
    let _ = writer.join();
}

/// A running service.
pub struct Server {
    addr: SocketAddr,
    accept: JoinHandle<()>,
    service: JoinHandle<ServeSummary>,
}

impl Server {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until a client requests shutdown.
    pub fn wait(self) -> ServeSummary {
        let summary = self.service.join().expect("service thread");
        let _ = self.accept.join();
        summary
    }
}

pub fn start(dep: &Deployment, placement: &Placement, listen: &str, mode: Mode) -> Result<Server, CliError> {
    let c = &dep.config;
    let rt = build_runtime(&dep.profiles, c.cluster.nodes, c.cluster.gpu_gb, c.cluster.host_workers, &dep.pipeline, placement, dep.runtime_config())?;
    let listener = TcpListener::bind(listen).map_err(|e| CliError::Io(format!("bind {listen}: {e}")))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let service = Service {
        rt,
        mode,
        start: Instant::now(),
        slo: c.slo.clone(),
        pending: Vec::new(),
        served: BTreeMap::new(),
    };
    let stop_svc = Arc::clone(&stop);
    let service = thread::spawn(move || {
        let summary = service.run(rx);
        stop_svc.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(addr);
        summary
    });
    let pipeline = dep.pipeline.name.clone();
    let accept = thread::spawn(move || {
        for stream in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            match stream {
                Ok(s) => {
                    let (cmds, p) = (tx.clone(), pipeline.clone());
                    thread::spawn(move || connection(s, cmds, p));
                }
                Err(e) => log::warn!("accept: {e}"),
            }
        }
    });
    log::info!("serving {} in {mode} mode on {addr}", dep.pipeline.name);
    Ok(Server { addr, accept, service })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_are_tagged() {
        let f = serde_json::to_value(Frame::Result {
            id: 3,
            latency_us: 10,
            payload: "eA==".into(),
        })
        .unwrap();
        assert_eq!(f["type"], "result");
        assert_eq!(f["id"], 3);
        let e = serde_json::to_value(Frame::error("bad")).unwrap();
        assert_eq!(e, serde_json::json!({"type": "error", "reason": "bad"}));
    }

    #[test]
    fn requests_parse() {
        let r: Request = serde_json::from_str(r#"{"type":"query","payload":"eA=="}"#).unwrap();
        assert!(matches!(r, Request::Query { pipeline: None, .. }));
        assert!(serde_json::from_str::<Request>(r#"{"type":"stats"}"#).is_ok());
        assert!(serde_json::from_str::<Request>(r#"{"type":"query"}"#).is_err());
        assert!(serde_json::from_str::<Request>(r#"{"type":"dance"}"#).is_err());
    }
}
