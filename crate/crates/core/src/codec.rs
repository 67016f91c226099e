//! Bus frames and the three-message vocabulary spoken over them.
//!
//! Every payload starts with the sender address followed by a one-byte ASCII
//! type tag:
//!
//! | tag | message   | layout                                            | len |
//! |-----|-----------|---------------------------------------------------|-----|
//! | `n` | Announce  | sender, `n`, min, max, granularity, var_index     | 6   |
//! | `h` | Heartbeat | sender, `h`                                       | 2   |
//! | `s` | SetValue  | sender, `s`, target, var_index, value             | 5   |
//!
//! The arbitration identifier of an encoded frame is the sender address, so
//! the core (address 0) always wins contention on the bus.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum payload of a classic CAN data frame.
pub const MAX_PAYLOAD: usize = 8;

/// Largest 11-bit base-format identifier.
pub const MAX_STANDARD_ID: u16 = 0x7FF;

pub const TAG_ANNOUNCE: u8 = b'n';
pub const TAG_HEARTBEAT: u8 = b'h';
pub const TAG_SET_VALUE: u8 = b's';

pub const ANNOUNCE_LEN: usize = 6;
pub const HEARTBEAT_LEN: usize = 2;
pub const SET_VALUE_LEN: usize = 5;

/// One-byte bus address. Zero belongs to the core; slots are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Address(pub u8);

impl Address {
    pub const CORE: Address = Address(0);

    pub fn is_core(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    PayloadTooLong(usize),
    #[error("identifier {0:#x} does not fit in 11 bits")]
    IdOutOfRange(u32),
    #[error("malformed hex dump: {0}")]
    BadHexDump(String),
}

/// A single bus transmission: an 11-bit identifier and up to eight data bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Frame {
    id: u16,
    len: u8,
    data: [u8; MAX_PAYLOAD],
}

impl Frame {
    pub fn new(id: u16, payload: &[u8]) -> Result<Self, FrameError> {
        if id > MAX_STANDARD_ID {
            return Err(FrameError::IdOutOfRange(id as u32));
        }
        if payload.len() > MAX_PAYLOAD {
            return Err(FrameError::PayloadTooLong(payload.len()));
        }
        let mut data = [0u8; MAX_PAYLOAD];
        data[..payload.len()].copy_from_slice(payload);
        Ok(Frame {
            id,
            len: payload.len() as u8,
            data,
        })
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn payload(&self) -> &[u8] {
        &self.data[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Canonical trace form: `ID=<id> [b0 b1 ...]`, the identifier as three
/// lowercase hex digits and each byte as two.
impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ID={:03x} [", self.id)?;
        for (i, b) in self.payload().iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{b:02x}")?;
        }
        f.write_str("]")
    }
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Frame {
    type Err = FrameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FrameError::BadHexDump(s.to_string());
        let rest = s.trim().strip_prefix("ID=").ok_or_else(bad)?;
        let (id, rest) = rest.split_once(' ').ok_or_else(bad)?;
        let id = u32::from_str_radix(id, 16).map_err(|_| bad())?;
        if id > MAX_STANDARD_ID as u32 {
            return Err(FrameError::IdOutOfRange(id));
        }
        let body = rest
            .trim()
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(bad)?;
        let bytes = body
            .split_whitespace()
            .map(|b| {
                if b.len() != 2 {
                    return Err(bad());
                }
                u8::from_str_radix(b, 16).map_err(|_| bad())
            })
            .collect::<Result<Vec<u8>, _>>()?;
        Frame::new(id as u16, &bytes)
    }
}

/// Decoded payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Message {
    /// Self-description of one physical variable, sent after power-up.
    Announce {
        sender: Address,
        min: u8,
        max: u8,
        granularity: u8,
        var_index: u8,
    },
    Heartbeat {
        sender: Address,
    },
    SetValue {
        sender: Address,
        target: Address,
        var_index: u8,
        value: u8,
    },
}

impl Message {
    pub fn sender(&self) -> Address {
        match *self {
            Message::Announce { sender, .. }
            | Message::Heartbeat { sender }
            | Message::SetValue { sender, .. } => sender,
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Message::Announce { .. } => TAG_ANNOUNCE,
            Message::Heartbeat { .. } => TAG_HEARTBEAT,
            Message::SetValue { .. } => TAG_SET_VALUE,
        }
    }

    /// Checks the per-variant invariants.
    pub fn validate(&self) -> Result<(), CodecError> {
        match *self {
            Message::Announce {
                min,
                max,
                granularity,
                ..
            } => {
                if min > max {
                    return Err(CodecError::InvalidMessage(format!(
                        "announce min {min} exceeds max {max}"
                    )));
                }
                let span = u16::from(max - min) + 1;
                if granularity == 0 || u16::from(granularity) > span {
                    return Err(CodecError::InvalidMessage(format!(
                        "granularity {granularity} outside 1..={span}"
                    )));
                }
                Ok(())
            }
            Message::Heartbeat { .. } => Ok(()),
            Message::SetValue { sender, target, .. } => {
                if sender == target {
                    Err(CodecError::InvalidMessage(format!(
                        "set-value sender and target are both {sender}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("unknown message type tag {0:#04x}")]
    UnknownType(u8),
    #[error("payload length {actual} does not match {expected} for type {tag:?}")]
    LengthMismatch {
        tag: char,
        expected: usize,
        actual: usize,
    },
    #[error("empty payload")]
    EmptyPayload,
}

/// Exact payload length for a type tag, if the tag is known.
pub fn expected_len(tag: u8) -> Option<usize> {
    match tag {
        TAG_ANNOUNCE => Some(ANNOUNCE_LEN),
        TAG_HEARTBEAT => Some(HEARTBEAT_LEN),
        TAG_SET_VALUE => Some(SET_VALUE_LEN),
        _ => None,
    }
}

pub fn encode(msg: &Message) -> Result<Frame, CodecError> {
    msg.validate()?;
    let sender = msg.sender();
    let mut buf = [0u8; MAX_PAYLOAD];
    buf[0] = sender.0;
    buf[1] = msg.tag();
    let len = match *msg {
        Message::Announce {
            min,
            max,
            granularity,
            var_index,
            ..
        } => {
            buf[2..6].copy_from_slice(&[min, max, granularity, var_index]);
            ANNOUNCE_LEN
        }
        Message::Heartbeat { .. } => HEARTBEAT_LEN,
        Message::SetValue {
            target,
            var_index,
            value,
            ..
        } => {
            buf[2..5].copy_from_slice(&[target.0, var_index, value]);
            SET_VALUE_LEN
        }
    };
    // sender fits in 8 bits, well inside the 11-bit id space
    Ok(Frame::new(u16::from(sender.0), &buf[..len]).expect("encoded frame within limits"))
}

pub fn decode(frame: &Frame) -> Result<Message, CodecError> {
    let p = frame.payload();
    let (&sender, rest) = p.split_first().ok_or(CodecError::EmptyPayload)?;
    let Some(&tag) = rest.first() else {
        return Err(CodecError::LengthMismatch {
            tag: '?',
            expected: HEARTBEAT_LEN,
            actual: p.len(),
        });
    };
    let expected = expected_len(tag).ok_or(CodecError::UnknownType(tag))?;
    if p.len() != expected {
        return Err(CodecError::LengthMismatch {
            tag: tag as char,
            expected,
            actual: p.len(),
        });
    }
    let sender = Address(sender);
    let msg = match tag {
        TAG_ANNOUNCE => Message::Announce {
            sender,
            min: p[2],
            max: p[3],
            granularity: p[4],
            var_index: p[5],
        },
        TAG_HEARTBEAT => Message::Heartbeat { sender },
        _ => Message::SetValue {
            sender,
            target: Address(p[2]),
            var_index: p[3],
            value: p[4],
        },
    };
    msg.validate()?;
    Ok(msg)
}
