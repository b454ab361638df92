//! Newline-delimited JSON protocol for external logits backends.
//!
//! ```text
//! {"op":"open","top_n":64}                          -> {"ok":true,"session":"s1","vocab_size":V}
//! {"op":"score","session":"s1","tokens":[..],"top_n":64} -> {"ok":true,"dists":[[[tok,prob],..],..]}
//! {"op":"truncate","session":"s1","len":N}          -> {"ok":true}
//! {"op":"close","session":"s1"}                     -> {"ok":true}
//! failure                                           -> {"ok":false,"error":"<code>","message":".."}
//! ```
//!
//! The client opens one connection per session, so traffic for a session is
//! naturally serialized. The server keeps sessions per connection.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dist::{ProbDist, TokenId, DEFAULT_TOP_N};
use crate::error::{Error, Result};
use crate::model::{Model, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Open {
        #[serde(default = "default_top_n")]
        top_n: usize,
    },
    Score {
        session: String,
        tokens: Vec<u32>,
        #[serde(default = "default_top_n")]
        top_n: usize,
    },
    Truncate {
        session: String,
        len: usize,
    },
    Close {
        session: String,
    },
}

fn default_top_n() -> usize {
    DEFAULT_TOP_N
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dists: Option<Vec<Vec<(u32, f64)>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Response {
    fn ok() -> Self {
        Response { ok: true, ..Default::default() }
    }

    fn fail(e: &Error) -> Self {
        Response { ok: false, error: Some(e.code().into()), message: Some(e.to_string()), ..Default::default() }
    }

    fn into_result(self) -> Result<Self> {
        if self.ok {
            return Ok(self);
        }
        let code = self.error.unwrap_or_default();
        let msg = self.message.unwrap_or_default();
        Err(match code.as_str() {
            "TruncateBeyondContext" | "ProtocolError" | "UnknownToken" | "Precondition" => {
                Error::ProtocolError(format!("{code}: {msg}"))
            }
            "BackendUnavailable" => Error::BackendUnavailable(msg),
            _ => Error::ProtocolError(format!("backend error {code}: {msg}")),
        })
    }
}

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

/// Per-connection request handler.
pub struct Handler<'m, M: Model + ?Sized> {
    model: &'m M,
    sessions: HashMap<String, Box<dyn Session + 'm>>,
    next_id: u64,
}

impl<'m, M: Model + ?Sized> Handler<'m, M> {
    pub fn new(model: &'m M) -> Self {
        Self { model, sessions: HashMap::new(), next_id: 0 }
    }

    pub fn handle_line(&mut self, line: &str) -> Response {
        let req: Request = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => return Response::fail(&Error::ProtocolError(e.to_string())),
        };
        self.handle(req).unwrap_or_else(|e| Response::fail(&e))
    }

    fn session(&mut self, id: &str) -> Result<&mut Box<dyn Session + 'm>> {
        self.sessions.get_mut(id).ok_or_else(|| Error::ProtocolError(format!("no session {id}")))
    }

    pub fn handle(&mut self, req: Request) -> Result<Response> {
        match req {
            Request::Open { .. } => {
                self.next_id += 1;
                let id = format!("s{}", self.next_id);
                self.sessions.insert(id.clone(), self.model.open()?);
                Ok(Response { session: Some(id), vocab_size: self.model.vocab_size(), ..Response::ok() })
            }
            Request::Score { session, tokens, top_n } => {
                let toks: Vec<TokenId> = tokens.into_iter().map(TokenId).collect();
                let dists = self.session(&session)?.score(&toks)?;
                let dists = dists.iter().map(|d| d.truncated(top_n).to_pairs()).collect();
                Ok(Response { dists: Some(dists), ..Response::ok() })
            }
            Request::Truncate { session, len } => {
                self.session(&session)?.truncate(len)?;
                Ok(Response::ok())
            }
            Request::Close { session } => {
                self.sessions.remove(&session);
                Ok(Response::ok())
            }
        }
    }

    /// Serve one byte stream until EOF.
    pub fn run<R: BufRead, W: Write>(&mut self, reader: R, mut writer: W) -> Result<()> {
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let resp = self.handle_line(&line);
            serde_json::to_writer(&mut writer, &resp)?;
            writer.write_all(b"\n")?;
            writer.flush()?;
        }
        Ok(())
    }
}

/// Accept connections forever, one thread per connection.
pub fn serve<M: Model + ?Sized>(model: &M, listener: TcpListener) -> Result<()> {
    std::thread::scope(|scope| {
        for stream in listener.incoming() {
            let stream = stream?;
            scope.spawn(move || {
                let reader = match stream.try_clone() {
                    Ok(s) => BufReader::new(s),
                    Err(_) => return,
                };
                // a dropped client is not a server error
                let _ = Handler::new(model).run(reader, stream);
            });
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Client
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Target,
    Draft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// `host:port`, optionally prefixed with `tcp://`.
    pub endpoint: String,
    pub top_n: usize,
    pub timeout_s: f64,
    pub role: Role,
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>, role: Role) -> Self {
        Self { endpoint: endpoint.into(), top_n: DEFAULT_TOP_N, timeout_s: 30.0, role }
    }

    fn address(&self) -> &str {
        self.endpoint.strip_prefix("tcp://").unwrap_or(&self.endpoint)
    }
}

/// A model living behind the wire protocol.
#[derive(Debug, Clone)]
pub struct RemoteModel {
    config: BackendConfig,
    vocab_size: Option<usize>,
}

impl RemoteModel {
    /// Connects once to confirm the backend is up and learn its vocabulary size.
    pub fn connect(config: BackendConfig) -> Result<Self> {
        if config.top_n == 0 {
            return Err(Error::InvalidConfig("top_n must be positive".into()));
        }
        let mut probe = Self { config, vocab_size: None };
        let session = probe.open_remote()?;
        probe.vocab_size = session.vocab_size;
        Ok(probe)
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn open_remote(&self) -> Result<RemoteSession> {
        let addr = self.config.address();
        let timeout = Duration::from_secs_f64(self.config.timeout_s.max(0.001));
        let unavailable = |e: std::io::Error| Error::BackendUnavailable(format!("{addr}: {e}"));
        let sock = addr
            .to_socket_addrs()
            .map_err(unavailable)?
            .next()
            .ok_or_else(|| Error::BackendUnavailable(format!("{addr}: no address")))?;
        let stream = TcpStream::connect_timeout(&sock, timeout).map_err(unavailable)?;
        stream.set_read_timeout(Some(timeout)).map_err(unavailable)?;
        stream.set_write_timeout(Some(timeout)).map_err(unavailable)?;
        let reader = BufReader::new(stream.try_clone().map_err(unavailable)?);
        let mut s = RemoteSession {
            writer: stream,
            reader,
            id: String::new(),
            committed: 0,
            top_n: self.config.top_n,
            vocab_size: None,
        };
        let resp = s.call(&Request::Open { top_n: self.config.top_n })?;
        s.id = resp.session.ok_or_else(|| Error::ProtocolError("open response without session".into()))?;
        s.vocab_size = resp.vocab_size;
        Ok(s)
    }
}

impl Model for RemoteModel {
    fn open(&self) -> Result<Box<dyn Session + '_>> {
        Ok(Box::new(self.open_remote()?))
    }

    fn vocab_size(&self) -> Option<usize> {
        self.vocab_size
    }

    fn top_n(&self) -> usize {
        self.config.top_n
    }
}

struct RemoteSession {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    id: String,
    committed: usize,
    top_n: usize,
    vocab_size: Option<usize>,
}

impl RemoteSession {
    fn call(&mut self, req: &Request) -> Result<Response> {
        let io = |e: std::io::Error| Error::BackendUnavailable(e.to_string());
        let mut line = serde_json::to_vec(req)?;
        line.push(b'\n');
        self.writer.write_all(&line).map_err(io)?;
        self.writer.flush().map_err(io)?;
        let mut buf = String::new();
        if self.reader.read_line(&mut buf).map_err(io)? == 0 {
            return Err(Error::BackendUnavailable("connection closed".into()));
        }
        let resp: Response = serde_json::from_str(buf.trim_end()).map_err(|e| Error::ProtocolError(e.to_string()))?;
        resp.into_result()
    }
}

impl Session for RemoteSession {
    fn committed_len(&self) -> usize {
        self.committed
    }

    fn score(&mut self, tokens: &[TokenId]) -> Result<Vec<ProbDist>> {
        if tokens.is_empty() {
            return Err(Error::Precondition("score needs at least one token".into()));
        }
        let req = Request::Score {
            session: self.id.clone(),
            tokens: tokens.iter().map(|t| t.0).collect(),
            top_n: self.top_n,
        };
        let resp = self.call(&req)?;
        let raw = resp.dists.ok_or_else(|| Error::ProtocolError("score response without dists".into()))?;
        if raw.len() != tokens.len() {
            return Err(Error::ProtocolError(format!("sent {} tokens, got {} dists", tokens.len(), raw.len())));
        }
        let dists = raw
            .into_iter()
            .map(|pairs| {
                let entries = pairs.into_iter().map(|(t, p)| (TokenId(t), p)).collect();
                ProbDist::new(entries, self.top_n).map_err(|e| Error::ProtocolError(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        self.committed += tokens.len();
        Ok(dists)
    }

    fn truncate(&mut self, len: usize) -> Result<()> {
        if len > self.committed {
            return Err(Error::TruncateBeyondContext { requested: len, committed: self.committed });
        }
        self.call(&Request::Truncate { session: self.id.clone(), len })?;
        self.committed = len;
        Ok(())
    }
}

impl Drop for RemoteSession {
    fn drop(&mut self) {
        if !self.id.is_empty() {
            let _ = self.call(&Request::Close { session: self.id.clone() });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TableModel;

    fn model() -> TableModel {
        let mut m = TableModel::new(1, 8, ProbDist::from_pairs(&[(0, 0.5), (1, 0.5)]).unwrap());
        m.insert_rule(&[TokenId(3)], ProbDist::from_pairs(&[(4, 0.7), (5, 0.2)]).unwrap()).unwrap();
        m
    }

    #[test]
    fn request_wire_shape() {
        let r = Request::Score { session: "s1".into(), tokens: vec![1, 2], top_n: 64 };
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"op":"score","session":"s1","tokens":[1,2],"top_n":64}"#);
        let t: Request = serde_json::from_str(r#"{"op":"truncate","session":"x","len":3}"#).unwrap();
        assert_eq!(t, Request::Truncate { session: "x".into(), len: 3 });
    }

    #[test]
    fn handler_session_lifecycle() {
        let m = model();
        let mut h = Handler::new(&m);
        let open = h.handle_line(r#"{"op":"open","top_n":1}"#);
        assert_eq!(open.vocab_size, Some(8));
        let sid = open.session.unwrap();
        let score = h.handle_line(&format!(r#"{{"op":"score","session":"{sid}","tokens":[3],"top_n":1}}"#));
        assert_eq!(score.dists.unwrap(), vec![vec![(4, 0.7)]]);
        let bad = h.handle_line(&format!(r#"{{"op":"truncate","session":"{sid}","len":5}}"#));
        assert!(!bad.ok);
        assert_eq!(bad.error.as_deref(), Some("TruncateBeyondContext"));
        assert!(h.handle_line(&format!(r#"{{"op":"close","session":"{sid}"}}"#)).ok);
        let gone = h.handle_line(&format!(r#"{{"op":"score","session":"{sid}","tokens":[3]}}"#));
        assert_eq!(gone.error.as_deref(), Some("ProtocolError"));
    }

    #[test]
    fn garbage_is_a_protocol_error() {
        let m = model();
        let r = Handler::new(&m).handle_line("not json");
        assert!(!r.ok);
        assert_eq!(r.error.as_deref(), Some("ProtocolError"));
    }

    #[test]
    fn unreachable_backend() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut cfg = BackendConfig::new(format!("127.0.0.1:{port}"), Role::Target);
        cfg.timeout_s = 0.5;
        assert!(matches!(RemoteModel::connect(cfg), Err(Error::BackendUnavailable(_))));
    }
}
