//! Line-delimited JSON protocol for backends that live outside this process.
//!
//! An external backend is a program started as
//! `PROGRAM [ARGS..] --weights WEIGHTS`. It reads one JSON request per line
//! on stdin and answers with one JSON object per line on stdout. A response
//! carrying an `"error"` string is reported as a backend failure.
//!
//! Requests always carry an `"op"` field:
//!
//! | op          | request fields                 | response fields                                   |
//! |-------------|--------------------------------|---------------------------------------------------|
//! | `describe`  |                                | `num_classes`, `input_side`, `capabilities`       |
//! | `logits`    | `image`                        | `logits`                                          |
//! | `input_gradients` | `image`, `target`        | `gradients` (same layout as `data`)               |
//! | `attribute` | `image`, `target`              | `height`, `width`, `values`                       |
//! | `segment`   | `image`, `concepts` (optional) | `masks`: list of `{counts, concept}` (row-major RLE) |
//!
//! `image` is `{"height", "width", "data"}` with `data` in planar RGB order.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::ingest::ImageTensor;

#[derive(Debug, Error)]
pub enum ExternalError {
    #[error("failed to start `{program}`: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("backend `{0}` closed its output")]
    Closed(String),
    #[error("backend `{name}` i/o: {source}")]
    Io {
        name: String,
        #[source]
        source: std::io::Error,
    },
    #[error("backend `{name}` sent malformed response: {message}")]
    Protocol { name: String, message: String },
    #[error("backend `{name}` reported: {message}")]
    Remote { name: String, message: String },
}

/// How to launch one external backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSpec {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// Segmentation only: the backend accepts a concept prompt list.
    #[serde(default)]
    pub accepts_concepts: bool,
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// A running external backend. Calls are serialized through a mutex, so
/// adapters built on it declare themselves single-threaded.
pub struct ExternalProcess {
    name: String,
    session: Mutex<Session>,
}

impl ExternalProcess {
    pub fn spawn(name: &str, spec: &ExternalSpec) -> Result<Self, ExternalError> {
        let mut cmd = Command::new(&spec.program);
        cmd.args(&spec.args);
        if let Some(w) = &spec.weights {
            cmd.arg("--weights").arg(w);
        }
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| ExternalError::Spawn {
                program: spec.program.display().to_string(),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            name: name.to_string(),
            session: Mutex::new(Session { child, stdin, stdout }),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn call(&self, request: &Value) -> Result<Value, ExternalError> {
        let io = |source| ExternalError::Io {
            name: self.name.clone(),
            source,
        };
        let mut s = self.session.lock().unwrap_or_else(|e| e.into_inner());
        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        s.stdin.write_all(line.as_bytes()).map_err(io)?;
        s.stdin.flush().map_err(io)?;
        let mut reply = String::new();
        if s.stdout.read_line(&mut reply).map_err(io)? == 0 {
            return Err(ExternalError::Closed(self.name.clone()));
        }
        let value: Value = serde_json::from_str(&reply).map_err(|e| self.protocol(e.to_string()))?;
        if let Some(msg) = value.get("error").and_then(Value::as_str) {
            return Err(ExternalError::Remote {
                name: self.name.clone(),
                message: msg.to_string(),
            });
        }
        Ok(value)
    }

    pub fn protocol(&self, message: impl Into<String>) -> ExternalError {
        ExternalError::Protocol {
            name: self.name.clone(),
            message: message.into(),
        }
    }
}

impl Drop for ExternalProcess {
    fn drop(&mut self) {
        if let Ok(s) = self.session.get_mut() {
            let _ = s.child.kill();
            let _ = s.child.wait();
        }
    }
}

pub fn image_payload(x: &ImageTensor) -> Value {
    json!({ "height": x.height, "width": x.width, "data": x.data })
}

pub fn f64_list(v: &Value, field: &str) -> Option<Vec<f64>> {
    v.get(field)?.as_array()?.iter().map(Value::as_f64).collect()
}
