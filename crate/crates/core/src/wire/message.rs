//! Length-prefixed frames for the networked transport.
//!
//! ```text
//! "FEDM" | version u16 | type u8 | round u32 | client_id u32 | payload_len u32
//! payload
//! CRC32 (IEEE) of header and payload
//! ```

use std::io::{Read, Write};

use super::codec::Cursor;
use super::WireError;

pub const FRAME_MAGIC: [u8; 4] = *b"FEDM";
pub const FRAME_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 4;
pub const MAX_PAYLOAD: u32 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Hello = 0,
    Global = 1,
    Update = 2,
    Done = 3,
    Err = 4,
}

impl MessageKind {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Hello),
            1 => Some(Self::Global),
            2 => Some(Self::Update),
            3 => Some(Self::Done),
            4 => Some(Self::Err),
            _ => None,
        }
    }
}

/// Codes carried by ERR frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Protocol = 1,
    StaleRound = 2,
    DuplicateClient = 3,
    Decode = 4,
    UnknownClient = 5,
    Aborted = 6,
}

impl ErrorCode {
    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            1 => Some(Self::Protocol),
            2 => Some(Self::StaleRound),
            3 => Some(Self::DuplicateClient),
            4 => Some(Self::Decode),
            5 => Some(Self::UnknownClient),
            6 => Some(Self::Aborted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub round: u32,
    pub client_id: u32,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn hello(client_id: u32) -> Self {
        Self {
            kind: MessageKind::Hello,
            round: 0,
            client_id,
            payload: Vec::new(),
        }
    }

    pub fn global(round: u32, blob: Vec<u8>) -> Self {
        Self {
            kind: MessageKind::Global,
            round,
            client_id: 0,
            payload: blob,
        }
    }

    /// Payload is `n_k` (u64) followed by the parameter blob.
    pub fn update(round: u32, client_id: u32, n_k: u64, blob: &[u8]) -> Self {
        let mut payload = Vec::with_capacity(8 + blob.len());
        payload.extend_from_slice(&n_k.to_le_bytes());
        payload.extend_from_slice(blob);
        Self {
            kind: MessageKind::Update,
            round,
            client_id,
            payload,
        }
    }

    pub fn done(round: u32) -> Self {
        Self {
            kind: MessageKind::Done,
            round,
            client_id: 0,
            payload: Vec::new(),
        }
    }

    /// Payload is the code (u16) followed by a UTF-8 reason.
    pub fn error(round: u32, client_id: u32, code: ErrorCode, reason: &str) -> Self {
        let mut payload = (code as u16).to_le_bytes().to_vec();
        payload.extend_from_slice(reason.as_bytes());
        Self {
            kind: MessageKind::Err,
            round,
            client_id,
            payload,
        }
    }

    pub fn update_parts(&self) -> Result<(u64, &[u8]), WireError> {
        if self.kind != MessageKind::Update {
            return Err(WireError::Malformed(format!("expected UPDATE, got {:?}", self.kind)));
        }
        if self.payload.len() < 8 {
            return Err(WireError::Truncated {
                needed: 8,
                available: self.payload.len(),
            });
        }
        let n_k = u64::from_le_bytes(self.payload[..8].try_into().unwrap());
        Ok((n_k, &self.payload[8..]))
    }

    pub fn error_parts(&self) -> Result<(u16, String), WireError> {
        if self.kind != MessageKind::Err {
            return Err(WireError::Malformed(format!("expected ERR, got {:?}", self.kind)));
        }
        if self.payload.len() < 2 {
            return Err(WireError::Truncated {
                needed: 2,
                available: self.payload.len(),
            });
        }
        let code = u16::from_le_bytes([self.payload[0], self.payload[1]]);
        let reason = String::from_utf8_lossy(&self.payload[2..]).into_owned();
        Ok((code, reason))
    }
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, WireError> {
    let len = u32::try_from(msg.payload.len())
        .ok()
        .filter(|&l| l <= MAX_PAYLOAD)
        .ok_or(WireError::FrameTooLarge(msg.payload.len() as u64))?;
    let mut out = Vec::with_capacity(HEADER_LEN + msg.payload.len() + 4);
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.round.to_le_bytes());
    out.extend_from_slice(&msg.client_id.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&msg.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Header {
    kind: MessageKind,
    round: u32,
    client_id: u32,
    payload_len: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, WireError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4)?;
    if magic != FRAME_MAGIC {
        return Err(WireError::BadMagic {
            expected: FRAME_MAGIC,
            found: magic.try_into().unwrap(),
        });
    }
    let version = cur.u16()?;
    if version != FRAME_VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let code = cur.u8()?;
    let kind = MessageKind::from_code(code).ok_or(WireError::UnknownMessageType(code))?;
    let round = cur.u32()?;
    let client_id = cur.u32()?;
    let payload_len = cur.u32()?;
    if payload_len > MAX_PAYLOAD {
        return Err(WireError::FrameTooLarge(payload_len as u64));
    }
    Ok(Header {
        kind,
        round,
        client_id,
        payload_len: payload_len as usize,
    })
}

fn finish_frame(header: Header, frame_body: &[u8], crc_bytes: &[u8]) -> Result<Message, WireError> {
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(frame_body);
    if stored != computed {
        return Err(WireError::ChecksumMismatch { stored, computed });
    }
    Ok(Message {
        kind: header.kind,
        round: header.round,
        client_id: header.client_id,
        payload: frame_body[HEADER_LEN..].to_vec(),
    })
}

/// Decodes one frame from the front of `buf`; returns it with the bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(Message, usize), WireError> {
    let header = parse_header(buf)?;
    let total = HEADER_LEN + header.payload_len + 4;
    if buf.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            available: buf.len(),
        });
    }
    let body_end = HEADER_LEN + header.payload_len;
    let msg = finish_frame(header, &buf[..body_end], &buf[body_end..total])?;
    Ok((msg, total))
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    w.write_all(&encode_frame(msg)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_message<R: Read>(r: &mut R) -> Result<Message, WireError> {
    let mut frame = vec![0u8; HEADER_LEN];
    r.read_exact(&mut frame)?;
    let header = parse_header(&frame)?;
    frame.resize(HEADER_LEN + header.payload_len, 0);
    r.read_exact(&mut frame[HEADER_LEN..])?;
    let mut crc = [0u8; 4];
    r.read_exact(&mut crc)?;
    finish_frame(header, &frame, &crc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip() {
        let msgs = [
            Message::hello(3),
            Message::global(4, vec![1, 2, 3]),
            Message::update(4, 2, 320, &[9, 9]),
            Message::done(10),
            Message::error(5, 1, ErrorCode::StaleRound, "stale"),
        ];
        let mut stream = Vec::new();
        for m in &msgs {
            stream.extend(encode_frame(m).unwrap());
        }
        let mut reader = stream.as_slice();
        for m in &msgs {
            assert_eq!(&read_message(&mut reader).unwrap(), m);
        }
        let (first, used) = decode_frame(&stream).unwrap();
        assert_eq!(first, msgs[0]);
        assert_eq!(used, HEADER_LEN + 4);
    }

    #[test]
    fn payload_accessors() {
        let u = Message::update(1, 2, 77, b"blob");
        assert_eq!(u.update_parts().unwrap(), (77, &b"blob"[..]));
        let e = Message::error(1, 2, ErrorCode::DuplicateClient, "dup");
        assert_eq!(e.error_parts().unwrap(), (3, "dup".to_string()));
        assert!(Message::hello(1).update_parts().is_err());
    }

    #[test]
    fn unknown_type_rejected() {
        let mut f = encode_frame(&Message::done(1)).unwrap();
        f[6] = 42;
        assert!(matches!(decode_frame(&f), Err(WireError::UnknownMessageType(42))));
    }

    #[test]
    fn corrupted_payload_detected() {
        let mut f = encode_frame(&Message::global(1, vec![0; 32])).unwrap();
        f[HEADER_LEN + 3] ^= 1;
        assert!(matches!(decode_frame(&f), Err(WireError::ChecksumMismatch { .. })));
    }

    #[test]
    fn oversized_length_rejected_before_allocation() {
        let mut f = encode_frame(&Message::done(1)).unwrap();
        f[15..19].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_frame(&f), Err(WireError::FrameTooLarge(_))));
    }
}
