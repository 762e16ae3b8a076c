//! Length-prefixed JSON framing: 4-byte big-endian body length, then the body.

use crate::model::{ErrorKind, ObsStatus};
use crate::value::Value;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};

pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME}-byte limit")]
    FrameTooLarge(usize),
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxRequest {
    pub request_id: u64,
    pub sandbox_id: String,
    pub tool: String,
    #[serde(default)]
    pub args: BTreeMap<String, Value>,
    #[serde(rename = "final", default)]
    pub is_final: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardPayload {
    pub task_completed: bool,
    pub pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxResponse {
    pub request_id: u64,
    pub status: ObsStatus,
    pub output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<ErrorKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_payload: Option<RewardPayload>,
}

pub fn frame<T: Serialize>(msg: &T) -> Result<Vec<u8>, ProtocolError> {
    let body = serde_json::to_vec(msg).map_err(|e| ProtocolError::MalformedFrame(e.to_string()))?;
    if body.len() > MAX_FRAME {
        return Err(ProtocolError::FrameTooLarge(body.len()));
    }
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Decodes one frame from the front of `bytes`, returning it and the bytes consumed.
pub fn unframe<T: DeserializeOwned>(bytes: &[u8]) -> Result<(T, usize), ProtocolError> {
    let Some(header) = bytes.get(..4) else {
        return Err(ProtocolError::MalformedFrame(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    };
    let len = u32::from_be_bytes(header.try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    let body = bytes.get(4..4 + len).ok_or_else(|| {
        ProtocolError::MalformedFrame(format!("declared {len} bytes, have {}", bytes.len() - 4))
    })?;
    let msg =
        serde_json::from_slice(body).map_err(|e| ProtocolError::MalformedFrame(e.to_string()))?;
    Ok((msg, 4 + len))
}

/// Incremental decoder for a byte stream carrying concatenated frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, if one is buffered.
    pub fn next_message<T: DeserializeOwned>(&mut self) -> Result<Option<T>, ProtocolError> {
        if self.buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().expect("4 bytes")) as usize;
        if len > MAX_FRAME {
            return Err(ProtocolError::FrameTooLarge(len));
        }
        if self.buf.len() < 4 + len {
            return Ok(None);
        }
        let (msg, used) = unframe(&self.buf)?;
        self.buf.drain(..used);
        Ok(Some(msg))
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

pub fn write_message<T: Serialize>(w: &mut impl Write, msg: &T) -> Result<(), ProtocolError> {
    w.write_all(&frame(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one message; `Ok(None)` on a clean end of stream before a header.
pub fn read_message<T: DeserializeOwned>(r: &mut impl Read) -> Result<Option<T>, ProtocolError> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..])? {
            0 if got == 0 => return Ok(None),
            0 => {
                return Err(ProtocolError::MalformedFrame(
                    "stream ended inside a header".into(),
                ))
            }
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body)
        .map(Some)
        .map_err(|e| ProtocolError::MalformedFrame(e.to_string()))
}
