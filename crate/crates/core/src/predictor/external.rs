use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde_json::Value;

use super::protocol::{config_to_wire, Request, WireTile, UNKNOWN_MODEL};
use super::{ModelHandle, ScorerConfig, TileScorer};
use crate::error::{Error, Result};
use crate::seeds::sha256_hex;
use crate::slide_io::Label;
use crate::tiling::Tile;

const IO_TIMEOUT: Duration = Duration::from_secs(600);

/// Where an external scorer lives: `host:port` / `tcp://host:port`, or
/// `exec:COMMAND` for a subprocess speaking the protocol on stdio.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Exec(String),
}

impl Endpoint {
    pub fn parse(addr: &str) -> Result<Self> {
        let addr = addr.trim();
        if let Some(cmd) = addr.strip_prefix("exec:") {
            if cmd.trim().is_empty() {
                return Err(Error::InvalidScorerConfig("exec: endpoint needs a command".into()));
            }
            return Ok(Endpoint::Exec(cmd.to_string()));
        }
        let hostport = addr.strip_prefix("tcp://").unwrap_or(addr);
        match hostport.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(Endpoint::Tcp(hostport.to_string())),
            _ => Err(Error::InvalidScorerConfig(format!(
                "endpoint {addr:?}: expected host:port, tcp://host:port or exec:COMMAND"
            ))),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Endpoint::Tcp(a) => format!("tcp://{a}"),
            Endpoint::Exec(c) => format!("exec:{c}"),
        }
    }
}

struct Connection {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Client for a scorer speaking the NDJSON protocol. One request is in
/// flight at a time; the connection opens lazily and reopens after a
/// transport failure.
pub struct ExternalScorer {
    endpoint: Endpoint,
    conn: Mutex<Option<Connection>>,
}

impl ExternalScorer {
    pub fn new(endpoint: Endpoint) -> Self {
        Self {
            endpoint,
            conn: Mutex::new(None),
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn unavailable(&self, reason: impl std::fmt::Display) -> Error {
        Error::ExternalUnavailable {
            endpoint: self.endpoint.describe(),
            reason: reason.to_string(),
        }
    }

    fn connect(&self) -> Result<Connection> {
        match &self.endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(|e| self.unavailable(e))?;
                stream.set_read_timeout(Some(IO_TIMEOUT)).map_err(|e| self.unavailable(e))?;
                let read = stream.try_clone().map_err(|e| self.unavailable(e))?;
                Ok(Connection {
                    reader: BufReader::new(Box::new(read)),
                    writer: Box::new(stream),
                    child: None,
                })
            }
            Endpoint::Exec(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| self.unavailable(e))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Connection {
                    reader: BufReader::new(Box::new(stdout)),
                    writer: Box::new(stdin),
                    child: Some(child),
                })
            }
        }
    }

    /// Sends one request and returns the parsed reply. Error replies become
    /// `Protocol` (or `UnknownModel`) errors.
    pub fn request(&self, req: &Request) -> Result<Value> {
        let mut guard = self.conn.lock().expect("external connection");
        if guard.is_none() {
            *guard = Some(self.connect()?);
        }
        let conn = guard.as_mut().expect("connected");
        let line = req.to_line();
        let mut reply = String::new();
        let io = conn
            .writer
            .write_all(line.as_bytes())
            .and_then(|_| conn.writer.flush())
            .and_then(|_| conn.reader.read_line(&mut reply));
        match io {
            Ok(0) => {
                *guard = None;
                return Err(self.unavailable("connection closed"));
            }
            Ok(_) => {}
            Err(e) => {
                *guard = None;
                return Err(self.unavailable(e));
            }
        }
        let value: Value = serde_json::from_str(reply.trim_end()).map_err(|e| Error::Protocol {
            code: "BAD_REPLY".into(),
            message: format!("unparseable reply: {e}"),
        })?;
        if let Some(code) = value.get("error") {
            let code = code.as_str().unwrap_or("UNKNOWN").to_string();
            let message = value.get("message").and_then(Value::as_str).unwrap_or("").to_string();
            return Err(if code == UNKNOWN_MODEL {
                Error::UnknownModel(message)
            } else {
                Error::Protocol { code, message }
            });
        }
        Ok(value)
    }

    pub fn ping(&self) -> Result<()> {
        let v = self.request(&Request::Ping)?;
        if v.get("ok") == Some(&Value::Bool(true)) {
            Ok(())
        } else {
            Err(Error::Protocol {
                code: "BAD_REPLY".into(),
                message: format!("unexpected ping reply {v}"),
            })
        }
    }
}

impl TileScorer for ExternalScorer {
    fn train(&self, model_id: &str, tiles: &[Tile], labels: &[Label], config: &ScorerConfig) -> Result<ModelHandle> {
        config.validate()?;
        if !labels.iter().any(|l| l.is_pos()) || !labels.iter().any(|l| !l.is_pos()) {
            return Err(Error::SingleClassData);
        }
        let req = Request::Train {
            model_id: model_id.to_string(),
            tiles: tiles.iter().zip(labels).map(|(t, l)| WireTile::encode(t, Some(*l))).collect(),
            config: config_to_wire(config),
        };
        let line = req.to_line();
        let reply = self.request(&req)?;
        let id = reply
            .get("model_id")
            .and_then(Value::as_str)
            .unwrap_or(model_id)
            .to_string();
        Ok(ModelHandle {
            id,
            axis: None,
            level: None,
            seed: config.seed,
            // The remote parameters are opaque; the training payload is not.
            digest: sha256_hex(line.as_bytes()),
        })
    }

    fn score(&self, model: &ModelHandle, tile: &Tile) -> Result<f64> {
        let reply = self.request(&Request::Score {
            model_id: model.id.clone(),
            tile: WireTile::encode(tile, None),
        })?;
        match reply.get("score").and_then(Value::as_f64) {
            Some(s) if (0.0..=1.0).contains(&s) => Ok(s),
            _ => Err(Error::Protocol {
                code: "BAD_REPLY".into(),
                message: format!("score reply without a score in [0, 1]: {reply}"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_forms() {
        assert_eq!(Endpoint::parse("localhost:7000").unwrap(), Endpoint::Tcp("localhost:7000".into()));
        assert_eq!(Endpoint::parse("tcp://10.0.0.1:1").unwrap(), Endpoint::Tcp("10.0.0.1:1".into()));
        assert_eq!(Endpoint::parse("exec:python3 a.py").unwrap(), Endpoint::Exec("python3 a.py".into()));
        for bad in ["", "localhost", "host:notaport", "exec:  ", ":80"] {
            assert!(Endpoint::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn unreachable_endpoint_is_reported() {
        // Port 1 on loopback is essentially never listening.
        let s = ExternalScorer::new(Endpoint::parse("127.0.0.1:1").unwrap());
        match s.ping() {
            Err(Error::ExternalUnavailable { endpoint, .. }) => assert_eq!(endpoint, "tcp://127.0.0.1:1"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
