//! Energy/force evaluation delegated to a child process.
//!
//! The child speaks newline-delimited JSON on stdin/stdout. It first prints
//! the handshake `{"protocol":"periopt-calc","version":1}`, then answers each
//! request line
//!
//! ```text
//! {"id":n,"lattice":[9 floats],"symbols":["Ar",...],"positions":[3N floats]}
//! ```
//!
//! with exactly one response line, either `{"id":n,"energy":e,"forces":[3N]}`
//! or `{"id":n,"error":"..."}`. Units are eV and Å. Floats are written in
//! their shortest round-trip decimal form, so values survive the wire
//! bit-for-bit. One request is in flight at a time.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::{Lattice, SpeciesTable, Structure, StructureRecord, Vec3};
use crate::potential::{CalcError, CalcResult, Calculator, CalculatorStats, CallCounter, LennardJones};

pub const PROTOCOL: &str = "periopt-calc";
pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("failed to spawn calculator {command:?}: {source}")]
    Spawn { command: Vec<String>, source: std::io::Error },
    #[error("calculator did not send a handshake within {0:?}")]
    HandshakeTimeout(Duration),
    #[error("unexpected handshake line: {0}")]
    BadHandshake(String),
    #[error("protocol version mismatch: server speaks {got}, client speaks {PROTOCOL_VERSION}")]
    VersionMismatch { got: u64 },
    #[error("broken pipe: {0}")]
    BrokenPipe(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error: {0}")]
    Server(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Handshake {
    pub protocol: String,
    pub version: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CalcRequest {
    pub id: u64,
    pub lattice: Vec<f64>,
    pub symbols: Vec<String>,
    pub positions: Vec<f64>,
}

impl CalcRequest {
    pub fn new(id: u64, s: &Structure) -> Self {
        let rec = StructureRecord::from(s);
        Self { id, lattice: rec.lattice, symbols: rec.symbols, positions: rec.positions }
    }

    pub fn to_structure(&self, table: &SpeciesTable) -> Result<Structure, String> {
        let lattice = Lattice::from_flat(&self.lattice).map_err(|e| e.to_string())?;
        if self.positions.len() != 3 * self.symbols.len() {
            return Err(format!("{} symbols but {} coordinates", self.symbols.len(), self.positions.len()));
        }
        let pos = self.positions.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        Structure::from_symbols(lattice, &self.symbols, pos, table).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CalcResponse {
    pub id: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forces: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CalcResponse {
    pub fn ok(id: i64, energy: f64, forces: Vec<f64>) -> Self {
        Self { id, energy: Some(energy), forces: Some(forces), error: None }
    }

    pub fn err(id: i64, msg: impl Into<String>) -> Self {
        Self { id, energy: None, forces: None, error: Some(msg.into()) }
    }
}

struct Session {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
}

/// A live child-process calculator.
pub struct BridgeHandle {
    session: Mutex<Session>,
    calls: CallCounter,
    lines_written: std::sync::atomic::AtomicU64,
    lines_read: std::sync::atomic::AtomicU64,
}

pub fn spawn_bridge(command: &[String]) -> Result<BridgeHandle, BridgeError> {
    spawn_bridge_with_timeout(command, DEFAULT_HANDSHAKE_TIMEOUT)
}

pub fn spawn_bridge_with_timeout(command: &[String], timeout: Duration) -> Result<BridgeHandle, BridgeError> {
    let spawn_err = |source| BridgeError::Spawn { command: command.to_vec(), source };
    let (prog, args) = command
        .split_first()
        .ok_or_else(|| spawn_err(std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command")))?;
    let mut child = Command::new(prog)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(spawn_err)?;
    let stdin = child.stdin.take();
    let stdout = child.stdout.take().expect("stdout was piped");

    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });

    let mut session = Session { child, stdin, lines: rx, next_id: 1 };
    let first = match session.lines.recv_timeout(timeout) {
        Ok(Ok(line)) => line,
        Ok(Err(e)) => return Err(BridgeError::BrokenPipe(e.to_string())),
        Err(RecvTimeoutError::Timeout) => {
            let _ = session.child.kill();
            return Err(BridgeError::HandshakeTimeout(timeout));
        }
        Err(RecvTimeoutError::Disconnected) => {
            return Err(BridgeError::BrokenPipe("calculator exited before handshake".into()))
        }
    };
    let hs: Handshake = serde_json::from_str(first.trim()).map_err(|_| BridgeError::BadHandshake(first.clone()))?;
    if hs.protocol != PROTOCOL {
        return Err(BridgeError::BadHandshake(first));
    }
    if hs.version != PROTOCOL_VERSION as u64 {
        let _ = session.child.kill();
        return Err(BridgeError::VersionMismatch { got: hs.version });
    }
    Ok(BridgeHandle {
        session: Mutex::new(session),
        calls: CallCounter::default(),
        lines_written: Default::default(),
        lines_read: Default::default(),
    })
}

impl BridgeHandle {
    pub fn remote_evaluate(&self, s: &Structure) -> Result<CalcResult, BridgeError> {
        use std::sync::atomic::Ordering::Relaxed;
        let mut sess = self.session.lock().unwrap_or_else(|p| p.into_inner());
        let id = sess.next_id;
        sess.next_id += 1;
        self.calls.bump();

        let mut line = serde_json::to_string(&CalcRequest::new(id, s)).expect("request serializes");
        line.push('\n');
        let stdin = sess.stdin.as_mut().ok_or_else(|| BridgeError::BrokenPipe("stdin closed".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| BridgeError::BrokenPipe(e.to_string()))?;
        self.lines_written.fetch_add(1, Relaxed);

        let reply = match sess.lines.recv() {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => return Err(BridgeError::BrokenPipe(e.to_string())),
            Err(_) => return Err(BridgeError::BrokenPipe("calculator closed its output".into())),
        };
        self.lines_read.fetch_add(1, Relaxed);

        let resp: CalcResponse =
            serde_json::from_str(reply.trim()).map_err(|e| BridgeError::Malformed(format!("{e}: {reply}")))?;
        if resp.id != id as i64 {
            return Err(BridgeError::Protocol(format!("expected response id {id}, got {}", resp.id)));
        }
        match (resp.energy, resp.forces, resp.error) {
            (None, None, Some(msg)) => Err(BridgeError::Server(msg)),
            (Some(energy), Some(forces), None) => {
                if forces.len() != 3 * s.n_atoms() {
                    return Err(BridgeError::Malformed(format!(
                        "expected {} force components, got {}",
                        3 * s.n_atoms(),
                        forces.len()
                    )));
                }
                let forces = forces.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
                Ok(CalcResult { energy, forces })
            }
            _ => Err(BridgeError::Malformed("response must carry either energy+forces or error".into())),
        }
    }

    /// (request lines written, response lines read) over the session.
    pub fn line_counts(&self) -> (u64, u64) {
        use std::sync::atomic::Ordering::Relaxed;
        (self.lines_written.load(Relaxed), self.lines_read.load(Relaxed))
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        let sess = self.session.get_mut().unwrap_or_else(|p| p.into_inner());
        // closing stdin lets a well-behaved server exit on EOF
        sess.stdin.take();
        for _ in 0..50 {
            if let Ok(Some(_)) = sess.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = sess.child.kill();
        let _ = sess.child.wait();
    }
}

impl Calculator for BridgeHandle {
    fn evaluate(&self, s: &Structure) -> Result<CalcResult, CalcError> {
        self.remote_evaluate(s).map_err(|e| CalcError::External(e.to_string()))?.check(s.n_atoms())
    }

    fn stats(&self) -> CalculatorStats {
        self.calls.stats()
    }
}

/// Backend selection as given on the command line: `lj` or `cmd:<command>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CalculatorSpec {
    Lj,
    Command(Vec<String>),
}

impl std::str::FromStr for CalculatorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "lj" {
            return Ok(Self::Lj);
        }
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let parts: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if parts.is_empty() {
                return Err("empty calculator command".into());
            }
            return Ok(Self::Command(parts));
        }
        Err(format!("unknown calculator '{s}' (expected 'lj' or 'cmd:<command>')"))
    }
}

impl std::fmt::Display for CalculatorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Lj => write!(f, "lj"),
            Self::Command(c) => write!(f, "cmd:{}", c.join(" ")),
        }
    }
}

impl CalculatorSpec {
    pub fn build(&self) -> Result<Box<dyn Calculator>, BridgeError> {
        Ok(match self {
            Self::Lj => Box::new(LennardJones::new()),
            Self::Command(cmd) => Box::new(spawn_bridge(cmd)?),
        })
    }
}

/// Serves the protocol on the given streams until EOF.
pub fn serve<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    calc: &dyn Calculator,
    table: &SpeciesTable,
) -> std::io::Result<()> {
    let hs = Handshake { protocol: PROTOCOL.into(), version: PROTOCOL_VERSION as u64 };
    writeln!(output, "{}", serde_json::to_string(&hs).expect("handshake serializes"))?;
    output.flush()?;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<CalcRequest>(&line) {
            Err(e) => CalcResponse::err(-1, format!("malformed request: {e}")),
            Ok(req) => {
                let id = req.id as i64;
                match req.to_structure(table) {
                    Err(msg) => CalcResponse::err(id, msg),
                    Ok(s) => match calc.evaluate(&s) {
                        Ok(r) => CalcResponse::ok(id, r.energy, r.forces_flat()),
                        Err(e) => CalcResponse::err(id, e.to_string()),
                    },
                }
            }
        };
        writeln!(output, "{}", serde_json::to_string(&resp).expect("response serializes"))?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calculator_spec_parsing() {
        assert_eq!("lj".parse::<CalculatorSpec>(), Ok(CalculatorSpec::Lj));
        assert_eq!(
            "cmd:python3 server.py --backend lj".parse::<CalculatorSpec>(),
            Ok(CalculatorSpec::Command(vec!["python3".into(), "server.py".into(), "--backend".into(), "lj".into()]))
        );
        assert!("cmd:".parse::<CalculatorSpec>().is_err());
        assert!("chgnet".parse::<CalculatorSpec>().is_err());
    }

    #[test]
    fn wire_format_field_order() {
        let req = CalcRequest { id: 7, lattice: vec![1.0; 9], symbols: vec!["Ar".into()], positions: vec![0.5, 0.25, 0.1] };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"id":7,"lattice":[1.0,1.0,1.0,1.0,1.0,1.0,1.0,1.0,1.0],"symbols":["Ar"],"positions":[0.5,0.25,0.1]}"#
        );
        assert_eq!(serde_json::to_string(&CalcResponse::err(3, "boom")).unwrap(), r#"{"id":3,"error":"boom"}"#);
        let hs = Handshake { protocol: PROTOCOL.into(), version: 1 };
        assert_eq!(serde_json::to_string(&hs).unwrap(), r#"{"protocol":"periopt-calc","version":1}"#);
    }

    #[test]
    fn floats_survive_the_wire_bitwise() {
        let vals = [0.1, 1.0 / 3.0, -2.220446049250313e-16, 6.02214076e23, f64::MIN_POSITIVE, 1e-300];
        for v in vals {
            let text = serde_json::to_string(&v).unwrap();
            let back: f64 = serde_json::from_str(&text).unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{text}");
        }
    }

    #[test]
    fn in_process_server_answers_and_reports_errors() {
        let table = SpeciesTable::default();
        let good = CalcRequest {
            id: 1,
            lattice: vec![6.0, 0.0, 0.0, 0.0, 6.0, 0.0, 0.0, 0.0, 6.0],
            symbols: vec!["Ar".into(), "Ar".into()],
            positions: vec![0.0, 0.0, 0.0, 3.5, 0.0, 0.0],
        };
        let unknown = CalcRequest { id: 2, symbols: vec!["Zz".into(), "Ar".into()], ..good.clone() };
        let input = format!(
            "{}\nnot json\n{}\n",
            serde_json::to_string(&good).unwrap(),
            serde_json::to_string(&unknown).unwrap()
        );
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out, &LennardJones::new(), &table).unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&out).unwrap().lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], r#"{"protocol":"periopt-calc","version":1}"#);
        let r1: CalcResponse = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(r1.id, 1);
        assert!(r1.energy.is_some() && r1.forces.as_ref().unwrap().len() == 6);
        let r2: CalcResponse = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(r2.id, -1);
        assert!(r2.error.is_some());
        let r3: CalcResponse = serde_json::from_str(lines[3]).unwrap();
        assert_eq!(r3.id, 2);
        assert!(r3.error.unwrap().contains("Zz"));
    }
}
