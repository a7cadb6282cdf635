//! Argument and result passing across the domain boundary.
//!
//! Values cross as encoded bytes only, so no reference into caller memory is
//! ever handed to domain code and nothing the domain built survives its
//! arena except through a checked copy.

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::domain::{Domain, DomainError};

/// Version of the argument encoding. Only meaningful within one process.
pub const SCHEMA_TAG: u32 = 0x5244_0001;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MarshalError {
    #[error("encoded argument is {len} bytes, quota is {quota}")]
    OversizedArgument { len: usize, quota: usize },
    #[error("value cannot be encoded: {0}")]
    EncodingError(String),
    #[error("payload cannot be decoded: {0}")]
    DecodeError(String),
    #[error("schema tag {found:#x} does not match {expected:#x}")]
    SchemaMismatch { found: u32, expected: u32 },
}

/// Pluggable encoding. Contract: `decode(encode(v)) == v`.
pub trait Codec {
    fn encode<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, MarshalError>;
    fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, MarshalError>;
}

/// MessagePack via `rmp-serde`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MsgPack;

impl Codec for MsgPack {
    fn encode<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, MarshalError> {
        rmp_serde::to_vec(value).map_err(|e| MarshalError::EncodingError(e.to_string()))
    }

    fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, MarshalError> {
        let mut de = rmp_serde::Deserializer::new(bytes);
        let value = T::deserialize(&mut de).map_err(|e| MarshalError::DecodeError(e.to_string()))?;
        let rest = de.into_inner();
        if !rest.is_empty() {
            return Err(MarshalError::DecodeError(format!("{} trailing bytes", rest.len())));
        }
        Ok(value)
    }
}

/// Encoded argument payload plus the identity of the function it is for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarshalledCall {
    function_id: String,
    payload: Vec<u8>,
    schema_tag: u32,
}

impl MarshalledCall {
    pub fn encode<T: Serialize + ?Sized>(function_id: impl Into<String>, value: &T) -> Result<Self, MarshalError> {
        Ok(MarshalledCall::from_bytes(function_id, MsgPack::encode(value)?))
    }

    /// Wraps already encoded bytes.
    pub fn from_bytes(function_id: impl Into<String>, payload: Vec<u8>) -> Self {
        MarshalledCall { function_id: function_id.into(), payload, schema_tag: SCHEMA_TAG }
    }

    /// A call carrying a foreign schema tag, for exercising the mismatch check.
    pub fn with_schema_tag(mut self, tag: u32) -> Self {
        self.schema_tag = tag;
        self
    }

    pub fn function_id(&self) -> &str {
        &self.function_id
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn payload_len(&self) -> usize {
        self.payload.len()
    }

    pub fn schema_tag(&self) -> u32 {
        self.schema_tag
    }
}

/// Location of an encoded value copied into a domain arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArenaArgument {
    pub address: usize,
    pub len: usize,
}

/// Encodes `value` and deep-copies the bytes into `domain`'s arena.
pub fn marshal_in<T: Serialize + ?Sized>(domain: &Domain, value: &T) -> Result<ArenaArgument, DomainError> {
    let bytes = MsgPack::encode(value)?;
    let quota = domain.config().quota();
    if bytes.len() > quota {
        return Err(MarshalError::OversizedArgument { len: bytes.len(), quota }.into());
    }
    let address = domain.write_arena(&bytes)?;
    Ok(ArenaArgument { address, len: bytes.len() })
}

/// Decodes a result payload copied out of a domain.
pub fn unmarshal_out<T: DeserializeOwned>(payload: &[u8]) -> Result<T, MarshalError> {
    MsgPack::decode(payload)
}

/// Encodes a value from inside a domain. Any failure aborts the call, since
/// an unencodable result is indistinguishable from a corrupted one.
pub fn marshal_return<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    match MsgPack::encode(value) {
        Ok(bytes) => bytes,
        Err(_) => {
            crate::monitor::raise_abort(crate::monitor::REASON_CORRUPT_RESULT);
            Vec::new()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_nested_list() {
        let v = vec![vec![1u32], vec![2, 3]];
        let bytes = MsgPack::encode(&v).unwrap();
        assert_eq!(unmarshal_out::<Vec<Vec<u32>>>(&bytes).unwrap(), v);
    }

    #[test]
    fn truncated_payload_fails() {
        let bytes = MsgPack::encode(&(42u32, "abc".to_string())).unwrap();
        let r = unmarshal_out::<(u32, String)>(&bytes[..bytes.len() - 1]);
        assert!(matches!(r, Err(MarshalError::DecodeError(_))));
    }

    #[test]
    fn trailing_garbage_fails() {
        let mut bytes = MsgPack::encode(&7u8).unwrap();
        bytes.push(0);
        assert!(unmarshal_out::<u8>(&bytes).is_err());
    }

    #[test]
    fn empty_tuple_is_tiny() {
        let call = MarshalledCall::encode("f", &()).unwrap();
        assert!(call.payload_len() <= 1);
        assert_eq!(call.schema_tag(), SCHEMA_TAG);
    }
}
