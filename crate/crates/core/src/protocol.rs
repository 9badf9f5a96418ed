//! Line-delimited JSON scorer protocol.
//!
//! One object per LF-terminated line, over TCP or a child's stdio.
//! Positions on the wire are 1-based. Requests carry an integer `id` and
//! may be pipelined; responses may come back in any order.
//!
//! [`serve`] exposes any [`Scorer`] over a reader/writer pair and
//! [`ExternalScorer`] is the matching client.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lexicon::{
    Casing, MaskedSequence, Sequence, TokenId, Vocabulary, CLS_TOKEN, DEFAULT_MAX_LEN, SEP_TOKEN,
};
use crate::mrf::Scorer;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
/// Value of the handshake `framing` field asking the client to wrap every
/// request in `[CLS] … [SEP]`.
pub const FRAMING_CLS_SEP: &str = "cls_sep";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Hello,
    Logits {
        id: u64,
        tokens: Vec<String>,
        position: usize,
    },
    LogitsAll {
        id: u64,
        tokens: Vec<String>,
    },
    /// Per-token autoregressive log-probabilities, used for perplexity.
    ArLogprob {
        id: u64,
        tokens: Vec<String>,
    },
}

impl Request {
    fn id(&self) -> Option<u64> {
        match self {
            Request::Hello => None,
            Request::Logits { id, .. } | Request::LogitsAll { id, .. } | Request::ArLogprob { id, .. } => {
                Some(*id)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Response {
    Hello {
        vocab: Vec<String>,
        max_len: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        framing: Option<String>,
    },
    Logits {
        id: u64,
        values: Vec<f64>,
    },
    LogitsAll {
        id: u64,
        values: Vec<Vec<f64>>,
    },
    ArLogprob {
        id: u64,
        values: Vec<f64>,
    },
    Error {
        #[serde(default)]
        id: Option<u64>,
        message: String,
    },
}

impl Response {
    fn id(&self) -> Option<u64> {
        match self {
            Response::Hello { .. } => None,
            Response::Logits { id, .. } | Response::LogitsAll { id, .. } | Response::ArLogprob { id, .. } => {
                Some(*id)
            }
            Response::Error { id, .. } => *id,
        }
    }
}

/// Server-side knobs.
#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub max_len: usize,
    /// Advertise CLS/SEP framing and expect it on every request.
    pub framing: bool,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            max_len: DEFAULT_MAX_LEN,
            framing: false,
        }
    }
}

fn finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Protocol("scorer produced a non-finite value".into()))
    }
}

fn server_sequence(vocab: &Vocabulary, tokens: &[String], options: &ServeOptions) -> Result<Sequence> {
    let content = if options.framing {
        match tokens {
            [first, inner @ .., last] if first == CLS_TOKEN && last == SEP_TOKEN => inner,
            _ => return Err(Error::Protocol("expected [CLS] … [SEP] framing".into())),
        }
    } else {
        tokens
    };
    let ids = content
        .iter()
        .enumerate()
        .map(|(i, t)| {
            vocab.id(t).ok_or_else(|| Error::OutOfVocabulary {
                token: t.clone(),
                position: i + 1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Sequence::with_max_len(ids, options.max_len)
}

/// Answers one request.
pub fn respond<S: Scorer + ?Sized>(scorer: &S, request: &Request, options: &ServeOptions) -> Result<Response> {
    let vocab = scorer.vocab();
    let frame = usize::from(options.framing);
    let framed_rows = |rows: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        if !options.framing {
            return rows;
        }
        let m = vocab.len();
        let mut out = Vec::with_capacity(rows.len() + 2);
        out.push(vec![0.0; m]);
        out.extend(rows);
        out.push(vec![0.0; m]);
        out
    };
    match request {
        Request::Hello => Ok(Response::Hello {
            vocab: vocab.tokens().to_vec(),
            max_len: options.max_len,
            framing: options.framing.then(|| FRAMING_CLS_SEP.to_string()),
        }),
        Request::Logits { id, tokens, position } => {
            let seq = server_sequence(vocab, tokens, options)?;
            let t = position
                .checked_sub(1 + frame)
                .filter(|&t| t < seq.len())
                .ok_or(Error::PositionOutOfRange {
                    position: *position,
                    len: tokens.len(),
                })?;
            let values = scorer.logits(&MaskedSequence::new(&seq, t, vocab)?)?;
            finite(&values)?;
            Ok(Response::Logits { id: *id, values })
        }
        Request::LogitsAll { id, tokens } => {
            let seq = server_sequence(vocab, tokens, options)?;
            let values = scorer.logits_all(&seq)?;
            for row in &values {
                finite(row)?;
            }
            Ok(Response::LogitsAll {
                id: *id,
                values: framed_rows(values),
            })
        }
        Request::ArLogprob { .. } => Err(Error::Protocol(
            "this server has no autoregressive model".into(),
        )),
    }
}

fn write_line<W: Write + ?Sized>(writer: &mut W, value: &impl Serialize) -> Result<()> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    writer.write_all(&line)?;
    writer.flush()?;
    Ok(())
}

/// Serves requests from `reader` until EOF, one response per request line.
pub fn serve<S, R, W>(scorer: &S, reader: R, mut writer: W, options: &ServeOptions) -> Result<()>
where
    S: Scorer + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(request) => respond(scorer, &request, options).unwrap_or_else(|e| Response::Error {
                id: request.id(),
                message: e.to_string(),
            }),
            Err(e) => Response::Error {
                id: serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(serde_json::Value::as_u64)),
                message: format!("bad request: {e}"),
            },
        };
        write_line(&mut writer, &response)?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp<S: Scorer + 'static>(scorer: Arc<S>, listener: TcpListener, options: ServeOptions) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let scorer = Arc::clone(&scorer);
        let options = options.clone();
        thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(e) => {
                    log::warn!("connection setup failed: {e}");
                    return;
                }
            };
            if let Err(e) = serve(scorer.as_ref(), reader, stream, &options) {
                log::debug!("connection closed: {e}");
            }
        });
    }
    Ok(())
}

/// Where an external scorer lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `tcp://host:port`
    Tcp(String),
    /// `exec:<shell command>` speaking the protocol on stdio.
    Exec(String),
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            Ok(Endpoint::Tcp(addr.to_string()))
        } else if let Some(cmd) = s.strip_prefix("exec:") {
            Ok(Endpoint::Exec(cmd.to_string()))
        } else {
            Err(Error::Protocol(format!(
                "endpoint {s:?} must be tcp://host:port or exec:<command>"
            )))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
            Endpoint::Exec(c) => write!(f, "exec:{c}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub timeout: Duration,
    /// Connections (or child processes) opened up front.
    pub pool_size: usize,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            timeout: DEFAULT_TIMEOUT,
            pool_size: 1,
        }
    }
}

type Pending = Arc<Mutex<HashMap<Option<u64>, Sender<Result<Response>>>>>;

enum Transport {
    Tcp(TcpStream),
    Child(Child),
}

struct Connection {
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Pending,
    transport: Mutex<Transport>,
}

fn reader_loop(reader: impl BufRead, pending: Pending) {
    let fail_all = |message: String| {
        for (_, tx) in pending.lock().expect("pending lock").drain() {
            let _ = tx.send(Err(Error::Protocol(message.clone())));
        }
    };
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) => return fail_all(format!("read failed: {e}")),
        };
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Response>(&line) {
            Ok(r) => r,
            Err(e) => return fail_all(format!("malformed response: {e}")),
        };
        let id = response.id();
        let waiter = pending.lock().expect("pending lock").remove(&id);
        match (waiter, response) {
            (Some(tx), Response::Error { message, .. }) => {
                let _ = tx.send(Err(Error::Remote(message)));
            }
            (Some(tx), r) => {
                let _ = tx.send(Ok(r));
            }
            (None, Response::Error { id: None, message }) => {
                fail_all(format!("server error: {message}"));
            }
            (None, _) => log::warn!("dropping response with unknown id {id:?}"),
        }
    }
    fail_all("connection closed".into());
}

impl Connection {
    fn open(endpoint: &Endpoint, timeout: Duration) -> Result<Self> {
        let pending: Pending = Arc::default();
        let (writer, transport): (Box<dyn Write + Send>, Transport) = match endpoint {
            Endpoint::Tcp(addr) => {
                let addrs: Vec<_> = addr.to_socket_addrs()?.collect();
                let mut last = None;
                let mut stream = None;
                for a in addrs {
                    match TcpStream::connect_timeout(&a, timeout) {
                        Ok(s) => {
                            stream = Some(s);
                            break;
                        }
                        Err(e) => last = Some(e),
                    }
                }
                let stream = match (stream, last) {
                    (Some(s), _) => s,
                    (None, Some(e)) => return Err(e.into()),
                    (None, None) => return Err(Error::Protocol(format!("{addr} resolves to nothing"))),
                };
                stream.set_nodelay(true)?;
                let reader = BufReader::new(stream.try_clone()?);
                let p = Arc::clone(&pending);
                thread::spawn(move || reader_loop(reader, p));
                (Box::new(stream.try_clone()?), Transport::Tcp(stream))
            }
            Endpoint::Exec(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
                let p = Arc::clone(&pending);
                thread::spawn(move || reader_loop(stdout, p));
                (Box::new(stdin), Transport::Child(child))
            }
        };
        Ok(Self {
            writer: Mutex::new(writer),
            pending,
            transport: Mutex::new(transport),
        })
    }

    fn call(&self, request: &Request, timeout: Duration) -> Result<Response> {
        let id = request.id();
        let (tx, rx) = mpsc::channel();
        self.pending.lock().expect("pending lock").insert(id, tx);
        let sent = {
            let mut w = self.writer.lock().expect("writer lock");
            write_line(w.as_mut(), request)
        };
        if let Err(e) = sent {
            self.pending.lock().expect("pending lock").remove(&id);
            return Err(e);
        }
        match rx.recv_timeout(timeout) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().expect("pending lock").remove(&id);
                Err(Error::Timeout(timeout))
            }
            Err(RecvTimeoutError::Disconnected) => Err(Error::Protocol("connection closed".into())),
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        match &mut *self.transport.lock().expect("transport lock") {
            Transport::Tcp(s) => {
                let _ = s.shutdown(std::net::Shutdown::Both);
            }
            Transport::Child(c) => {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

/// Index of the first token where two vocabularies disagree.
fn first_divergence(local: &[String], remote: &[String]) -> Option<usize> {
    let common = local.len().min(remote.len());
    (0..common)
        .find(|&i| local[i] != remote[i])
        .or((local.len() != remote.len()).then_some(common))
}

/// A scorer answered by an out-of-process model.
pub struct ExternalScorer {
    endpoint: Endpoint,
    vocab: Vocabulary,
    max_len: usize,
    framed: bool,
    timeout: Duration,
    connections: Vec<Connection>,
    next_connection: AtomicUsize,
    next_id: AtomicU64,
}

impl fmt::Debug for ExternalScorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalScorer")
            .field("endpoint", &self.endpoint)
            .field("m", &self.vocab.len())
            .field("max_len", &self.max_len)
            .field("framed", &self.framed)
            .finish()
    }
}

impl ExternalScorer {
    /// Connects and handshakes. With `expected` set the remote vocabulary
    /// must match it token for token; otherwise the remote one is adopted.
    pub fn connect(endpoint: &Endpoint, expected: Option<&Vocabulary>, options: &ClientOptions) -> Result<Self> {
        let mut connections = Vec::new();
        let mut agreed: Option<(Vec<String>, usize, bool)> = None;
        for _ in 0..options.pool_size.max(1) {
            let conn = Connection::open(endpoint, options.timeout)?;
            let hello = match conn.call(&Request::Hello, options.timeout)? {
                Response::Hello {
                    vocab,
                    max_len,
                    framing,
                } => {
                    let framed = match framing.as_deref() {
                        None => false,
                        Some(FRAMING_CLS_SEP) => true,
                        Some(other) => {
                            return Err(Error::Protocol(format!("unsupported framing {other:?}")))
                        }
                    };
                    (vocab, max_len, framed)
                }
                other => return Err(Error::Protocol(format!("expected hello, got {other:?}"))),
            };
            if let Some(prev) = &agreed {
                if *prev != hello {
                    return Err(Error::Protocol("pooled connections disagree on the handshake".into()));
                }
            }
            agreed = Some(hello);
            connections.push(conn);
        }
        let (remote, max_len, framed) = agreed.expect("at least one connection");
        let vocab = match expected {
            Some(local) => {
                if let Some(index) = first_divergence(local.tokens(), &remote) {
                    return Err(Error::VocabMismatch {
                        index,
                        local: local.tokens().get(index).cloned(),
                        remote: remote.get(index).cloned(),
                    });
                }
                local.clone()
            }
            None => Vocabulary::new(remote, Casing::None)?,
        };
        log::info!(
            "connected to {endpoint}: M = {}, max_len = {max_len}, framing = {framed}",
            vocab.len()
        );
        Ok(Self {
            endpoint: endpoint.clone(),
            vocab,
            max_len,
            framed,
            timeout: options.timeout,
            connections,
            next_connection: AtomicUsize::new(0),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn framed(&self) -> bool {
        self.framed
    }

    fn next_id(&self) -> u64 {
        self.next_id.fetch_add(1, Ordering::Relaxed)
    }

    fn call(&self, request: &Request) -> Result<Response> {
        let i = self.next_connection.fetch_add(1, Ordering::Relaxed) % self.connections.len();
        self.connections[i].call(request, self.timeout)
    }

    fn wire_tokens(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        if ids.len() > self.max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.max_len,
            });
        }
        let mut tokens = Vec::with_capacity(ids.len() + 2);
        if self.framed {
            tokens.push(CLS_TOKEN.to_string());
        }
        for t in self.vocab.decode_ids(ids)? {
            tokens.push(t.to_string());
        }
        if self.framed {
            tokens.push(SEP_TOKEN.to_string());
        }
        Ok(tokens)
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.vocab.len() {
            return Err(Error::Protocol(format!(
                "expected {} logits, got {}",
                self.vocab.len(),
                row.len()
            )));
        }
        Ok(())
    }

    fn strip_frame<T>(&self, mut rows: Vec<T>, len: usize) -> Result<Vec<T>> {
        let frame = if self.framed { 2 } else { 0 };
        if rows.len() != len + frame {
            return Err(Error::Protocol(format!(
                "expected {} rows, got {}",
                len + frame,
                rows.len()
            )));
        }
        if self.framed {
            rows.pop();
            rows.remove(0);
        }
        Ok(rows)
    }

    /// Per-token log-probabilities under the remote autoregressive model.
    pub fn ar_logprobs(&self, seq: &Sequence) -> Result<Vec<f64>> {
        let request = Request::ArLogprob {
            id: self.next_id(),
            tokens: self.wire_tokens(seq.ids())?,
        };
        match self.call(&request)? {
            Response::ArLogprob { values, .. } => self.strip_frame(values, seq.len()),
            other => Err(Error::Protocol(format!("expected ar_logprob, got {other:?}"))),
        }
    }
}

impl Scorer for ExternalScorer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logits(&self, ms: &MaskedSequence) -> Result<Vec<f64>> {
        let request = Request::Logits {
            id: self.next_id(),
            tokens: self.wire_tokens(ms.ids())?,
            position: ms.position() + 1 + usize::from(self.framed),
        };
        match self.call(&request)? {
            Response::Logits { values, .. } => {
                self.check_row(&values)?;
                Ok(values)
            }
            other => Err(Error::Protocol(format!("expected logits, got {other:?}"))),
        }
    }

    fn logits_all(&self, seq: &Sequence) -> Result<Vec<Vec<f64>>> {
        let request = Request::LogitsAll {
            id: self.next_id(),
            tokens: self.wire_tokens(seq.ids())?,
        };
        match self.call(&request)? {
            Response::LogitsAll { values, .. } => {
                let rows = self.strip_frame(values, seq.len())?;
                for row in &rows {
                    self.check_row(row)?;
                }
                Ok(rows)
            }
            other => Err(Error::Protocol(format!("expected logits_all, got {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{f2, toy_vocabulary};
    use crate::tabular::TabularScorer;
    use std::io::Cursor;

    #[test]
    fn requests_match_the_wire_format() {
        let r = Request::Logits {
            id: 7,
            tokens: vec!["a".into(), "[MASK]".into()],
            position: 2,
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"op":"logits","id":7,"tokens":["a","[MASK]"],"position":2}"#
        );
        assert_eq!(serde_json::to_string(&Request::Hello).unwrap(), r#"{"op":"hello"}"#);
        let e: Response = serde_json::from_str(r#"{"op":"error","id":3,"message":"no"}"#).unwrap();
        assert_eq!(e.id(), Some(3));
        let h: Response = serde_json::from_str(r#"{"op":"hello","vocab":["a"],"max_len":8}"#).unwrap();
        assert!(matches!(h, Response::Hello { framing: None, .. }));
    }

    #[test]
    fn serve_answers_every_line() {
        let scorer = f2();
        let input = concat!(
            "{\"op\":\"hello\"}\n",
            "{\"op\":\"logits\",\"id\":1,\"tokens\":[\"a\",\"[MASK]\"],\"position\":2}\n",
            "\n",
            "{\"op\":\"logits_all\",\"id\":2,\"tokens\":[\"b\",\"c\"]}\n",
            "{\"op\":\"logits\",\"id\":3,\"tokens\":[\"a\",\"zzz\"],\"position\":1}\n",
            "{\"op\":\"bogus\",\"id\":4}\n",
            "{\"op\":\"ar_logprob\",\"id\":5,\"tokens\":[\"a\"]}\n",
        );
        let mut out = Vec::new();
        serve(&scorer, Cursor::new(input), &mut out, &ServeOptions::default()).unwrap();
        let lines: Vec<Response> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 6);
        let v = scorer.vocab();
        let want = scorer
            .logits(&MaskedSequence::new(&Sequence::new(vec![0, 0]).unwrap(), 1, v).unwrap())
            .unwrap();
        assert_eq!(lines[1], Response::Logits { id: 1, values: want });
        assert!(matches!(&lines[2], Response::LogitsAll { id: 2, values } if values.len() == 2));
        for (line, id) in lines[3..].iter().zip([3, 4, 5]) {
            assert!(matches!(line, Response::Error { id: Some(i), .. } if *i == id));
        }
    }

    fn spawn_server<S: Scorer + 'static>(scorer: S, options: ServeOptions) -> Endpoint {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let scorer = Arc::new(scorer);
        thread::spawn(move || serve_tcp(scorer, listener, options));
        Endpoint::Tcp(addr.to_string())
    }

    #[test]
    fn client_round_trips_exact_floats() {
        let local = f2();
        let endpoint = spawn_server(f2(), ServeOptions::default());
        let remote = ExternalScorer::connect(&endpoint, Some(local.vocab()), &ClientOptions::default()).unwrap();
        for ids in [[0, 1], [2, 2], [1, 0]] {
            let seq = Sequence::new(ids.to_vec()).unwrap();
            for t in 0..2 {
                let ms = MaskedSequence::new(&seq, t, local.vocab()).unwrap();
                let a = local.logits(&ms).unwrap();
                let b = remote.logits(&ms).unwrap();
                assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            }
            assert_eq!(local.logits_all(&seq).unwrap(), remote.logits_all(&seq).unwrap());
        }
    }

    #[test]
    fn framing_is_transparent() {
        let local = f2();
        let endpoint = spawn_server(
            f2(),
            ServeOptions {
                framing: true,
                ..ServeOptions::default()
            },
        );
        let remote = ExternalScorer::connect(&endpoint, Some(local.vocab()), &ClientOptions::default()).unwrap();
        assert!(remote.framed());
        let seq = Sequence::new(vec![1, 2]).unwrap();
        for t in 0..2 {
            let ms = MaskedSequence::new(&seq, t, local.vocab()).unwrap();
            assert_eq!(local.logits(&ms).unwrap(), remote.logits(&ms).unwrap());
        }
        assert_eq!(local.logits_all(&seq).unwrap(), remote.logits_all(&seq).unwrap());
    }

    #[test]
    fn vocabulary_mismatch_names_the_first_divergent_token() {
        let endpoint = spawn_server(TabularScorer::zero(toy_vocabulary(3)), ServeOptions::default());
        let other = Vocabulary::new(vec!["a".into(), "x".into(), "c".into()], Casing::None).unwrap();
        let err = ExternalScorer::connect(&endpoint, Some(&other), &ClientOptions::default()).unwrap_err();
        match err {
            Error::VocabMismatch { index, local, remote } => {
                assert_eq!(index, 1);
                assert_eq!(local.as_deref(), Some("x"));
                assert_eq!(remote.as_deref(), Some("b"));
            }
            e => panic!("unexpected {e}"),
        }
        let longer = toy_vocabulary(4);
        assert!(matches!(
            ExternalScorer::connect(&endpoint, Some(&longer), &ClientOptions::default()),
            Err(Error::VocabMismatch { index: 3, remote: None, .. })
        ));
    }

    #[test]
    fn remote_errors_surface() {
        let endpoint = spawn_server(TabularScorer::zero(toy_vocabulary(3)), ServeOptions::default());
        let remote = ExternalScorer::connect(&endpoint, None, &ClientOptions::default()).unwrap();
        let seq = Sequence::new(vec![0, 1]).unwrap();
        assert!(matches!(remote.ar_logprobs(&seq), Err(Error::Remote(_))));
        // the connection stays usable after an error
        let ms = MaskedSequence::new(&seq, 0, remote.vocab()).unwrap();
        assert_eq!(remote.logits(&ms).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn silent_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hold = thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            thread::sleep(Duration::from_millis(500));
            drop(s);
        });
        let options = ClientOptions {
            timeout: Duration::from_millis(100),
            pool_size: 1,
        };
        let err = ExternalScorer::connect(&Endpoint::Tcp(addr.to_string()), None, &options).unwrap_err();
        assert!(matches!(err, Error::Timeout(_)));
        hold.join().unwrap();
    }

    #[test]
    fn pooled_client_is_shareable_across_threads() {
        let local = f2();
        let endpoint = spawn_server(f2(), ServeOptions::default());
        let options = ClientOptions {
            pool_size: 3,
            ..ClientOptions::default()
        };
        let remote = Arc::new(ExternalScorer::connect(&endpoint, Some(local.vocab()), &options).unwrap());
        let want = local.logits_all(&Sequence::new(vec![2, 0]).unwrap()).unwrap();
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let r = Arc::clone(&remote);
                thread::spawn(move || {
                    (0..20)
                        .map(|_| r.logits_all(&Sequence::new(vec![2, 0]).unwrap()).unwrap())
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for got in h.join().unwrap() {
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!("tcp://127.0.0.1:9".parse::<Endpoint>().unwrap(), Endpoint::Tcp("127.0.0.1:9".into()));
        assert_eq!("exec:python x.py".parse::<Endpoint>().unwrap(), Endpoint::Exec("python x.py".into()));
        assert!("http://x".parse::<Endpoint>().is_err());
        assert_eq!(first_divergence(&["a".into()], &["a".into()]), None);
    }
}
