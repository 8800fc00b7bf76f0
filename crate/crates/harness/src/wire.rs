//! Length-prefixed binary framing between clients and the gateway.
//!
//! ```text
//! request:  "SSIP" | ver u8 = 1 | type u8 = 1 | token_len u16 | token
//!           | name_len u16 | name (utf-8) | batch u32 | payload_len u32 | payload
//! response: "SSIP" | ver u8 = 1 | type u8 = 2 | status u8
//!           | queue_ns u64 | compute_ns u64 | payload_len u32 | payload
//! ```
//!
//! All integers are big-endian.

use gpufleet_core::Outcome;

pub const MAGIC: [u8; 4] = *b"SSIP";
pub const VERSION: u8 = 1;
pub const TYPE_REQUEST: u8 = 1;
pub const TYPE_RESPONSE: u8 = 2;
/// Largest payload a decoder will accept.
pub const MAX_PAYLOAD: u32 = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("unknown status {0}")]
    UnknownStatus(u8),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("payload length {0} exceeds limit")]
    PayloadTooLarge(u32),
    #[error("model name is not valid utf-8")]
    InvalidUtf8,
    #[error("{0} bytes after the end of the frame")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("{field} is {len} bytes, limit {max}")]
    TooLong { field: &'static str, len: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    Auth = 1,
    Rate = 2,
    Capacity = 3,
    NoBackend = 4,
}

impl Status {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Status::Ok,
            1 => Status::Auth,
            2 => Status::Rate,
            3 => Status::Capacity,
            4 => Status::NoBackend,
            _ => return None,
        })
    }
}

impl From<Outcome> for Status {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Ok => Status::Ok,
            Outcome::RejectedAuth => Status::Auth,
            Outcome::RejectedRate => Status::Rate,
            Outcome::RejectedCapacity => Status::Capacity,
            Outcome::NoBackend => Status::NoBackend,
        }
    }
}

impl From<Status> for Outcome {
    fn from(s: Status) -> Self {
        match s {
            Status::Ok => Outcome::Ok,
            Status::Auth => Outcome::RejectedAuth,
            Status::Rate => Outcome::RejectedRate,
            Status::Capacity => Outcome::RejectedCapacity,
            Status::NoBackend => Outcome::NoBackend,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestFrame {
    pub token: Vec<u8>,
    pub model: String,
    pub batch_size: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseFrame {
    pub status: Status,
    pub queue_ns: u64,
    pub compute_ns: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Request(RequestFrame),
    Response(ResponseFrame),
}

fn check_len(field: &'static str, len: usize, max: usize) -> Result<(), EncodeError> {
    if len > max {
        Err(EncodeError::TooLong { field, len, max })
    } else {
        Ok(())
    }
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    match msg {
        Message::Request(r) => {
            check_len("token", r.token.len(), u16::MAX as usize)?;
            check_len("model", r.model.len(), u16::MAX as usize)?;
            check_len("payload", r.payload.len(), MAX_PAYLOAD as usize)?;
            out.push(TYPE_REQUEST);
            out.extend_from_slice(&(r.token.len() as u16).to_be_bytes());
            out.extend_from_slice(&r.token);
            out.extend_from_slice(&(r.model.len() as u16).to_be_bytes());
            out.extend_from_slice(r.model.as_bytes());
            out.extend_from_slice(&r.batch_size.to_be_bytes());
            out.extend_from_slice(&(r.payload.len() as u32).to_be_bytes());
            out.extend_from_slice(&r.payload);
        }
        Message::Response(r) => {
            check_len("payload", r.payload.len(), MAX_PAYLOAD as usize)?;
            out.push(TYPE_RESPONSE);
            out.push(r.status as u8);
            out.extend_from_slice(&r.queue_ns.to_be_bytes());
            out.extend_from_slice(&r.compute_ns.to_be_bytes());
            out.extend_from_slice(&(r.payload.len() as u32).to_be_bytes());
            out.extend_from_slice(&r.payload);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated { needed: usize::MAX, available: self.buf.len() })?;
        let s = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated { needed: end, available: self.buf.len() })?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn payload(&mut self) -> Result<Vec<u8>, DecodeError> {
        let len = self.u32()?;
        if len > MAX_PAYLOAD {
            return Err(DecodeError::PayloadTooLarge(len));
        }
        Ok(self.take(len as usize)?.to_vec())
    }
}

fn parse(buf: &[u8]) -> Result<(Message, usize), DecodeError> {
    let n = buf.len().min(4);
    if buf[..n] != MAGIC[..n] {
        return Err(DecodeError::BadMagic);
    }
    let mut r = Reader { buf, pos: 0 };
    r.take(4)?;
    let version = r.u8()?;
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let msg = match r.u8()? {
        TYPE_REQUEST => {
            let token_len = r.u16()? as usize;
            let token = r.take(token_len)?.to_vec();
            let name_len = r.u16()? as usize;
            let model = std::str::from_utf8(r.take(name_len)?).map_err(|_| DecodeError::InvalidUtf8)?.to_owned();
            let batch_size = r.u32()?;
            let payload = r.payload()?;
            Message::Request(RequestFrame { token, model, batch_size, payload })
        }
        TYPE_RESPONSE => {
            let raw = r.u8()?;
            let status = Status::from_u8(raw).ok_or(DecodeError::UnknownStatus(raw))?;
            let queue_ns = r.u64()?;
            let compute_ns = r.u64()?;
            let payload = r.payload()?;
            Message::Response(ResponseFrame { status, queue_ns, compute_ns, payload })
        }
        other => return Err(DecodeError::UnknownType(other)),
    };
    Ok((msg, r.pos))
}

/// Decodes exactly one frame occupying all of `buf`.
pub fn decode(buf: &[u8]) -> Result<Message, DecodeError> {
    let (msg, used) = parse(buf)?;
    if used != buf.len() {
        return Err(DecodeError::TrailingBytes(buf.len() - used));
    }
    Ok(msg)
}

/// Decodes the frame at the start of a stream buffer. `Ok(None)` means more
/// bytes are needed; otherwise returns the message and the bytes consumed.
pub fn decode_prefix(buf: &[u8]) -> Result<Option<(Message, usize)>, DecodeError> {
    match parse(buf) {
        Ok(found) => Ok(Some(found)),
        Err(DecodeError::Truncated { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_layout() {
        let msg = Message::Response(ResponseFrame { status: Status::NoBackend, queue_ns: 1, compute_ns: 2, payload: vec![9] });
        let bytes = encode(&msg).unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 1 + 1 + 8 + 8 + 4 + 1);
        assert_eq!(&bytes[4..7], &[1, 2, 4]);
        assert_eq!(&bytes[7..15], &1u64.to_be_bytes());
        assert_eq!(decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn prefix_needs_more_then_yields() {
        let msg = Message::Request(RequestFrame { token: vec![], model: "m".into(), batch_size: 1, payload: vec![0; 10] });
        let mut bytes = encode(&msg).unwrap();
        for cut in 0..bytes.len() {
            assert_eq!(decode_prefix(&bytes[..cut]).unwrap(), None, "cut {cut}");
        }
        bytes.extend_from_slice(b"SS");
        let (m, used) = decode_prefix(&bytes).unwrap().unwrap();
        assert_eq!((m, used), (msg, bytes.len() - 2));
        assert_eq!(decode(&bytes), Err(DecodeError::TrailingBytes(2)));
    }

    #[test]
    fn status_outcome_mapping_is_bijective() {
        for o in Outcome::ALL {
            let s = Status::from(o);
            assert_eq!(Status::from_u8(s as u8), Some(s));
            assert_eq!(Outcome::from(s), o);
        }
        assert_eq!(Status::from_u8(5), None);
    }
}
