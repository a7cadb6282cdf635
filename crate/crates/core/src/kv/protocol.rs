//! The text protocol: a small memcached-like subset, CRLF terminated.
//!
//! ```text
//! SET <key> <len>\r\n<len bytes>\r\n   -> STORED | SERVER_ERROR <msg>
//! GET <key>\r\n                        -> VALUE <key> <len>\r\n<bytes>\r\nEND | END
//! DELETE <key>\r\n                     -> DELETED | NOT_FOUND
//! STATS\r\n                            -> STAT <name> <value>... END
//! CRASHME <key>\r\n                    -> SERVER_ERROR recovered
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_KEY_LEN: usize = 250;
pub const MAX_VALUE_LEN: usize = 1 << 20;
/// Longest command line accepted by the framing layer, CRLF excluded.
pub const MAX_LINE_LEN: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verb {
    Get,
    Set,
    Delete,
    Stats,
    Crashme,
}

impl Verb {
    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Get => "GET",
            Verb::Set => "SET",
            Verb::Delete => "DELETE",
            Verb::Stats => "STATS",
            Verb::Crashme => "CRASHME",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvCommand {
    pub verb: Verb,
    /// Empty for STATS.
    pub key: String,
    #[serde(with = "serde_bytes")]
    pub value: Option<Vec<u8>>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseError {
    #[error("unknown command")]
    UnknownVerb,
    #[error("wrong number of arguments")]
    Arity,
    #[error("key longer than {MAX_KEY_LEN} bytes")]
    KeyTooLong,
    #[error("key contains whitespace, control or non-UTF-8 bytes")]
    BadKey,
    #[error("bad length header")]
    BadLength,
    #[error("object too large for cache")]
    ValueTooLarge,
    #[error("bad data chunk")]
    BadDataChunk,
    #[error("unexpected data block")]
    UnexpectedValue,
}

fn valid_key(raw: &[u8]) -> Result<String, ParseError> {
    if raw.len() > MAX_KEY_LEN {
        return Err(ParseError::KeyTooLong);
    }
    if raw.is_empty() || raw.iter().any(|b| b.is_ascii_whitespace() || b.is_ascii_control()) {
        return Err(ParseError::BadKey);
    }
    String::from_utf8(raw.to_vec()).map_err(|_| ParseError::BadKey)
}

/// Parses the announced body length of a SET line, for the framing layer.
/// `None` when the line is not a well-formed SET header.
pub fn announced_len(line: &[u8]) -> Option<usize> {
    let mut words = line.split(|b| *b == b' ').filter(|w| !w.is_empty());
    if words.next()? != b"SET" {
        return None;
    }
    let _key = words.next()?;
    let len = std::str::from_utf8(words.next()?).ok()?.parse().ok()?;
    words.next().is_none().then_some(len)
}

/// Parses one request: the command line without its CRLF, plus the data
/// block (without its CRLF) for SET.
pub fn parse_request(line: &[u8], body: Option<&[u8]>) -> Result<KvCommand, ParseError> {
    let words: Vec<&[u8]> = line.split(|b| *b == b' ').filter(|w| !w.is_empty()).collect();
    let Some((&verb, args)) = words.split_first() else {
        return Err(ParseError::UnknownVerb);
    };
    let verb = match verb {
        b"GET" => Verb::Get,
        b"SET" => Verb::Set,
        b"DELETE" => Verb::Delete,
        b"STATS" => Verb::Stats,
        b"CRASHME" => Verb::Crashme,
        _ => return Err(ParseError::UnknownVerb),
    };
    if verb != Verb::Set && body.is_some() {
        return Err(ParseError::UnexpectedValue);
    }
    match verb {
        Verb::Stats => {
            if !args.is_empty() {
                return Err(ParseError::Arity);
            }
            Ok(KvCommand { verb, key: String::new(), value: None })
        }
        Verb::Get | Verb::Delete | Verb::Crashme => {
            let [key] = args else { return Err(ParseError::Arity) };
            Ok(KvCommand { verb, key: valid_key(key)?, value: None })
        }
        Verb::Set => {
            let [key, len] = args else { return Err(ParseError::Arity) };
            let key = valid_key(key)?;
            let len: usize = std::str::from_utf8(len).ok().and_then(|s| s.parse().ok()).ok_or(ParseError::BadLength)?;
            if len > MAX_VALUE_LEN {
                return Err(ParseError::ValueTooLarge);
            }
            let body = body.ok_or(ParseError::BadDataChunk)?;
            if body.len() != len {
                return Err(ParseError::BadDataChunk);
            }
            Ok(KvCommand { verb, key, value: Some(body.to_vec()) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn get_foo() {
        assert_eq!(parse_request(b"GET foo", None), Ok(KvCommand { verb: Verb::Get, key: "foo".into(), value: None }));
    }

    #[test]
    fn set_with_body() {
        let cmd = parse_request(b"SET k 3", Some(b"abc")).unwrap();
        assert_eq!(cmd.value.as_deref(), Some(&b"abc"[..]));
        assert_eq!(parse_request(b"SET k 4", Some(b"abc")), Err(ParseError::BadDataChunk));
        assert_eq!(parse_request(b"SET k x", Some(b"abc")), Err(ParseError::BadLength));
        assert_eq!(parse_request(b"SET k 3", None), Err(ParseError::BadDataChunk));
    }

    #[test]
    fn key_limits() {
        let long = format!("GET {}", "k".repeat(300));
        assert_eq!(parse_request(long.as_bytes(), None), Err(ParseError::KeyTooLong));
        let edge = format!("GET {}", "k".repeat(250));
        assert!(parse_request(edge.as_bytes(), None).is_ok());
        assert_eq!(parse_request(b"GET a\x01b", None), Err(ParseError::BadKey));
    }

    #[test]
    fn presence_rules() {
        assert_eq!(parse_request(b"GET k", Some(b"x")), Err(ParseError::UnexpectedValue));
        assert_eq!(parse_request(b"GET", None), Err(ParseError::Arity));
        assert_eq!(parse_request(b"STATS now", None), Err(ParseError::Arity));
        assert_eq!(parse_request(b"FLUSH", None), Err(ParseError::UnknownVerb));
        assert_eq!(parse_request(b"", None), Err(ParseError::UnknownVerb));
    }

    #[test]
    fn value_limit() {
        let line = format!("SET k {}", MAX_VALUE_LEN + 1);
        assert_eq!(parse_request(line.as_bytes(), Some(b"")), Err(ParseError::ValueTooLarge));
    }

    #[test]
    fn framing_length() {
        assert_eq!(announced_len(b"SET k 12"), Some(12));
        assert_eq!(announced_len(b"SET k"), None);
        assert_eq!(announced_len(b"GET k 12"), None);
    }
}
