//! Blocking client for the key-value service.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    /// A `SERVER_ERROR <msg>` reply.
    #[error("server error: {0}")]
    Server(String),
    #[error("unexpected reply: {0:?}")]
    Protocol(String),
}

impl ClientError {
    pub fn is_server_error(&self) -> bool {
        matches!(self, ClientError::Server(_))
    }
}

pub struct KvClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl KvClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<KvClient, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        Ok(KvClient { reader: BufReader::new(stream.try_clone()?), writer: BufWriter::new(stream) })
    }

    pub fn set(&mut self, key: &str, value: &[u8]) -> Result<(), ClientError> {
        write!(self.writer, "SET {key} {}\r\n", value.len())?;
        self.writer.write_all(value)?;
        self.writer.write_all(b"\r\n")?;
        self.writer.flush()?;
        match self.line()?.as_str() {
            "STORED" => Ok(()),
            other => Err(unexpected(other)),
        }
    }

    pub fn get(&mut self, key: &str) -> Result<Option<Vec<u8>>, ClientError> {
        self.send_line(&format!("GET {key}"))?;
        let header = self.line()?;
        if header == "END" {
            return Ok(None);
        }
        let len = header
            .strip_prefix("VALUE ")
            .and_then(|rest| rest.rsplit_once(' '))
            .filter(|(k, _)| *k == key)
            .and_then(|(_, len)| len.parse::<usize>().ok())
            .ok_or_else(|| unexpected(&header))?;
        let mut value = vec![0u8; len + 2];
        self.reader.read_exact(&mut value)?;
        if !value.ends_with(b"\r\n") {
            return Err(ClientError::Protocol("value block not CRLF-terminated".into()));
        }
        value.truncate(len);
        match self.line()?.as_str() {
            "END" => Ok(Some(value)),
            other => Err(unexpected(other)),
        }
    }

    /// `true` if the key existed.
    pub fn delete(&mut self, key: &str) -> Result<bool, ClientError> {
        self.send_line(&format!("DELETE {key}"))?;
        match self.line()?.as_str() {
            "DELETED" => Ok(true),
            "NOT_FOUND" => Ok(false),
            other => Err(unexpected(other)),
        }
    }

    pub fn stats(&mut self) -> Result<BTreeMap<String, u64>, ClientError> {
        self.send_line("STATS")?;
        let mut stats = BTreeMap::new();
        loop {
            let line = self.line()?;
            if line == "END" {
                return Ok(stats);
            }
            let parsed = line
                .strip_prefix("STAT ")
                .and_then(|rest| rest.split_once(' '))
                .and_then(|(name, v)| Some((name.to_string(), v.parse::<u64>().ok()?)));
            match parsed {
                Some((name, value)) => {
                    stats.insert(name, value);
                }
                None => return Err(unexpected(&line)),
            }
        }
    }

    /// Sends the fault-injection command. A server that survived answers
    /// `SERVER_ERROR recovered`, which is returned as `Ok`.
    pub fn crashme(&mut self, key: &str) -> Result<String, ClientError> {
        self.send_line(&format!("CRASHME {key}"))?;
        match self.line() {
            Err(ClientError::Server(msg)) => Ok(format!("SERVER_ERROR {msg}")),
            Ok(line) => Ok(line),
            Err(e) => Err(e),
        }
    }

    /// Writes raw bytes and returns the next reply line, without the CRLF.
    pub fn raw(&mut self, bytes: &[u8]) -> Result<String, ClientError> {
        self.writer.write_all(bytes)?;
        self.writer.flush()?;
        let mut line = String::new();
        self.reader.read_line(&mut line)?;
        Ok(line.trim_end_matches("\r\n").to_string())
    }

    fn send_line(&mut self, line: &str) -> io::Result<()> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\r\n")?;
        self.writer.flush()
    }

    fn line(&mut self) -> Result<String, ClientError> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(ClientError::Io(io::ErrorKind::UnexpectedEof.into()));
        }
        let line = line.trim_end_matches("\r\n").to_string();
        match line.strip_prefix("SERVER_ERROR ") {
            Some(msg) => Err(ClientError::Server(msg.to_string())),
            None => Ok(line),
        }
    }
}

fn unexpected(line: &str) -> ClientError {
    ClientError::Protocol(line.to_string())
}
