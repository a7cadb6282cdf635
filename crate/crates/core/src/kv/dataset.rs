//! Dataset files for preloading a store: a sequence of
//! `[u32 LE key length][key][u32 LE value length][value]` records.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::protocol::{MAX_KEY_LEN, MAX_VALUE_LEN};
use super::store::Store;

/// Writes `total_bytes` of values in records of `value_len` bytes under keys
/// `key:0`, `key:1`, ... Returns the number of records.
pub fn write_dataset(path: &Path, total_bytes: u64, value_len: usize) -> io::Result<u64> {
    let value_len = value_len.clamp(1, MAX_VALUE_LEN);
    let mut out = BufWriter::new(File::create(path)?);
    let mut value = vec![0u8; value_len];
    let mut written = 0u64;
    let mut records = 0u64;
    while written < total_bytes {
        let len = (total_bytes - written).min(value_len as u64) as usize;
        let key = format!("key:{records}");
        for (i, b) in value[..len].iter_mut().enumerate() {
            *b = (records as usize).wrapping_add(i) as u8;
        }
        out.write_all(&(key.len() as u32).to_le_bytes())?;
        out.write_all(key.as_bytes())?;
        out.write_all(&(len as u32).to_le_bytes())?;
        out.write_all(&value[..len])?;
        written += len as u64;
        records += 1;
    }
    out.flush()?;
    Ok(records)
}

fn read_u32(input: &mut impl Read) -> io::Result<Option<u32>> {
    let mut buf = [0u8; 4];
    match input.read_exact(&mut buf) {
        Ok(()) => Ok(Some(u32::from_le_bytes(buf))),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(e),
    }
}

/// Loads every record of `path` into `store`; returns the record count.
pub fn load_dataset(path: &Path, store: &Store) -> io::Result<u64> {
    let mut input = BufReader::with_capacity(1 << 20, File::open(path)?);
    let invalid = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
    let mut records = 0;
    while let Some(key_len) = read_u32(&mut input)? {
        if key_len as usize > MAX_KEY_LEN {
            return Err(invalid("key too long"));
        }
        let mut key = vec![0u8; key_len as usize];
        input.read_exact(&mut key)?;
        let value_len = read_u32(&mut input)?.ok_or_else(|| invalid("truncated record"))? as usize;
        if value_len > MAX_VALUE_LEN {
            return Err(invalid("value too large"));
        }
        let mut value = vec![0u8; value_len];
        input.read_exact(&mut value)?;
        let key = String::from_utf8(key).map_err(|_| invalid("key is not UTF-8"))?;
        store.set(key, value);
        records += 1;
    }
    Ok(records)
}
