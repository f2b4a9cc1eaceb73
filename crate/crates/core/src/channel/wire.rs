//! Datagram format.
//!
//! ```text
//! request  = type(1) ‖ plaintext(16) ‖ zero padding up to packet_size
//! response = (type | 0x80)(1) ‖ plaintext(16) ‖ payload
//!   type 0x01 payload: cycles, 8 bytes little-endian
//!   type 0x02 payload: ciphertext, 16 bytes
//! ```

use thiserror::Error;

use crate::aes::Block;

pub const TIMING_REQUEST: u8 = 0x01;
pub const CIPHERTEXT_REQUEST: u8 = 0x02;
pub const RESPONSE_FLAG: u8 = 0x80;
/// Smallest valid request: type byte plus plaintext.
pub const MIN_REQUEST_LEN: usize = 17;
pub const TIMING_RESPONSE_LEN: usize = 1 + 16 + 8;
pub const CIPHERTEXT_RESPONSE_LEN: usize = 1 + 16 + 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("datagram of {0} bytes is too short")]
    TooShort(usize),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("response of {got} bytes, expected {expected}")]
    BadLength { got: usize, expected: usize },
    #[error("packet size {0} below the 17-byte minimum")]
    PacketSize(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequestKind {
    Timing,
    Ciphertext,
}

impl RequestKind {
    fn code(self) -> u8 {
        match self {
            RequestKind::Timing => TIMING_REQUEST,
            RequestKind::Ciphertext => CIPHERTEXT_REQUEST,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Request {
    pub kind: RequestKind,
    pub plaintext: Block,
}

impl Request {
    pub fn encode(&self, packet_size: usize) -> Result<Vec<u8>, WireError> {
        if packet_size < MIN_REQUEST_LEN {
            return Err(WireError::PacketSize(packet_size));
        }
        let mut buf = vec![0u8; packet_size];
        buf[0] = self.kind.code();
        buf[1..17].copy_from_slice(&self.plaintext.0);
        Ok(buf)
    }

    /// Padding after the plaintext is ignored.
    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < MIN_REQUEST_LEN {
            return Err(WireError::TooShort(buf.len()));
        }
        let kind = match buf[0] {
            TIMING_REQUEST => RequestKind::Timing,
            CIPHERTEXT_REQUEST => RequestKind::Ciphertext,
            other => return Err(WireError::UnknownType(other)),
        };
        Ok(Self {
            kind,
            plaintext: Block::from_slice(&buf[1..17]).unwrap(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Response {
    Timing { plaintext: Block, cycles: u64 },
    Ciphertext { plaintext: Block, ciphertext: Block },
}

impl Response {
    pub fn plaintext(&self) -> &Block {
        match self {
            Response::Timing { plaintext, .. } | Response::Ciphertext { plaintext, .. } => plaintext,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Response::Timing { plaintext, cycles } => {
                let mut buf = Vec::with_capacity(TIMING_RESPONSE_LEN);
                buf.push(TIMING_REQUEST | RESPONSE_FLAG);
                buf.extend_from_slice(&plaintext.0);
                buf.extend_from_slice(&cycles.to_le_bytes());
                buf
            }
            Response::Ciphertext {
                plaintext,
                ciphertext,
            } => {
                let mut buf = Vec::with_capacity(CIPHERTEXT_RESPONSE_LEN);
                buf.push(CIPHERTEXT_REQUEST | RESPONSE_FLAG);
                buf.extend_from_slice(&plaintext.0);
                buf.extend_from_slice(&ciphertext.0);
                buf
            }
        }
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let Some(&ty) = buf.first() else {
            return Err(WireError::TooShort(0));
        };
        let expect = |len: usize| {
            if buf.len() == len {
                Ok(())
            } else {
                Err(WireError::BadLength {
                    got: buf.len(),
                    expected: len,
                })
            }
        };
        match ty {
            t if t == TIMING_REQUEST | RESPONSE_FLAG => {
                expect(TIMING_RESPONSE_LEN)?;
                Ok(Response::Timing {
                    plaintext: Block::from_slice(&buf[1..17]).unwrap(),
                    cycles: u64::from_le_bytes(buf[17..25].try_into().unwrap()),
                })
            }
            t if t == CIPHERTEXT_REQUEST | RESPONSE_FLAG => {
                expect(CIPHERTEXT_RESPONSE_LEN)?;
                Ok(Response::Ciphertext {
                    plaintext: Block::from_slice(&buf[1..17]).unwrap(),
                    ciphertext: Block::from_slice(&buf[17..33]).unwrap(),
                })
            }
            other => Err(WireError::UnknownType(other)),
        }
    }
}
