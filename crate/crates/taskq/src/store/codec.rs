//! Binary encoding of log records.
//!
//! Frame layout (all integers big-endian):
//!
//! ```text
//! frame := len:u32 | crc:u32 | body
//! body  := kind:u8 | sequence:u64 | payload
//! ```
//!
//! `len` covers the body only; `crc` is CRC-32/ISO-HDLC of the body. Text
//! is length-prefixed UTF-8 (`u32` length), byte blobs likewise. Optional
//! fields carry a one-byte presence flag. The full field-by-field layout
//! is documented in `docs/log-format.md` so other implementations can
//! read and write the same files.

use crate::task::{AttemptOutcome, AttemptRecord, HttpMethod, Task, TaskId, TaskState};
use url::Url;
use uuid::Uuid;

pub const FRAME_HEADER_LEN: usize = 8;
/// Upper bound on a sane body; anything larger is treated as corruption.
const MAX_BODY_LEN: u32 = 64 * 1024 * 1024;

const KIND_TASK_UPSERT: u8 = 1;
const KIND_STATE_CHANGE: u8 = 2;
const KIND_ATTEMPT: u8 = 3;

/// One durable event in the log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreRecord {
    /// Full task snapshot (initial accept, or a compaction rewrite).
    TaskUpsert(Task),
    /// State/attempt-count change for an existing task.
    StateChange {
        task_id: TaskId,
        state: TaskState,
        attempts_used: u32,
        at_ms: u64,
    },
    /// One delivery attempt.
    Attempt(AttemptRecord),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("truncated record")]
    Truncated,
    #[error("crc mismatch")]
    CrcMismatch,
    #[error("bad field encoding: {0}")]
    BadField(&'static str),
    #[error("unknown record kind {0}")]
    UnknownKind(u8),
    #[error("trailing bytes in record body")]
    TrailingBytes,
}

fn state_code(state: TaskState) -> u8 {
    match state {
        TaskState::Queued => 1,
        TaskState::AwaitingToken => 2,
        TaskState::Dispatched => 3,
        TaskState::InFlight => 4,
        TaskState::RetryWait => 5,
        TaskState::Finished => 6,
        TaskState::Failed => 7,
    }
}

fn state_from_code(code: u8) -> Option<TaskState> {
    Some(match code {
        1 => TaskState::Queued,
        2 => TaskState::AwaitingToken,
        3 => TaskState::Dispatched,
        4 => TaskState::InFlight,
        5 => TaskState::RetryWait,
        6 => TaskState::Finished,
        7 => TaskState::Failed,
        _ => return None,
    })
}

fn method_code(method: HttpMethod) -> u8 {
    match method {
        HttpMethod::Get => 1,
        HttpMethod::Post => 2,
        HttpMethod::Put => 3,
        HttpMethod::Patch => 4,
        HttpMethod::Delete => 5,
    }
}

fn method_from_code(code: u8) -> Option<HttpMethod> {
    Some(match code {
        1 => HttpMethod::Get,
        2 => HttpMethod::Post,
        3 => HttpMethod::Put,
        4 => HttpMethod::Patch,
        5 => HttpMethod::Delete,
        _ => return None,
    })
}

fn outcome_code(outcome: AttemptOutcome) -> u8 {
    match outcome {
        AttemptOutcome::Acked => 1,
        AttemptOutcome::TimedOut => 2,
        AttemptOutcome::TransportError => 3,
        AttemptOutcome::Nacked => 4,
    }
}

fn outcome_from_code(code: u8) -> Option<AttemptOutcome> {
    Some(match code {
        1 => AttemptOutcome::Acked,
        2 => AttemptOutcome::TimedOut,
        3 => AttemptOutcome::TransportError,
        4 => AttemptOutcome::Nacked,
        _ => return None,
    })
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::with_capacity(128) }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn id(&mut self, id: TaskId) {
        self.buf.extend_from_slice(id.as_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    fn text(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    fn opt_text(&mut self, s: Option<&str>) {
        match s {
            None => self.u8(0),
            Some(s) => {
                self.u8(1);
                self.text(s);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.pos + n > self.buf.len() {
            return Err(DecodeError::Truncated);
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
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

    fn id(&mut self) -> Result<TaskId, DecodeError> {
        let raw: [u8; 16] = self.take(16)?.try_into().unwrap();
        TaskId::from_uuid(Uuid::from_bytes(raw)).ok_or(DecodeError::BadField("task_id"))
    }

    fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn text(&mut self) -> Result<String, DecodeError> {
        String::from_utf8(self.bytes()?).map_err(|_| DecodeError::BadField("utf8"))
    }

    fn opt_text(&mut self) -> Result<Option<String>, DecodeError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.text()?)),
            _ => Err(DecodeError::BadField("presence flag")),
        }
    }

    fn done(&self) -> Result<(), DecodeError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(DecodeError::TrailingBytes)
        }
    }
}

/// Encodes a record into a complete frame (header + body).
pub fn encode_frame(sequence: u64, record: &StoreRecord) -> Vec<u8> {
    let mut w = Writer::new();
    match record {
        StoreRecord::TaskUpsert(task) => {
            w.u8(KIND_TASK_UPSERT);
            w.u64(sequence);
            w.id(task.id);
            w.text(&task.name);
            w.text(&task.queue);
            w.text(task.destination.as_str());
            w.u8(method_code(task.method));
            w.opt_text(task.content_type.as_deref());
            w.bytes(&task.payload);
            w.u32(task.retry_policy.max_retries);
            w.u64(task.retry_policy.backoff_ms);
            w.u64(task.retry_policy.ack_timeout_ms);
            w.u8(state_code(task.state));
            w.u32(task.attempts_used);
            w.u64(task.created_at_ms);
            w.u64(task.updated_at_ms);
        }
        StoreRecord::StateChange {
            task_id,
            state,
            attempts_used,
            at_ms,
        } => {
            w.u8(KIND_STATE_CHANGE);
            w.u64(sequence);
            w.id(*task_id);
            w.u8(state_code(*state));
            w.u32(*attempts_used);
            w.u64(*at_ms);
        }
        StoreRecord::Attempt(attempt) => {
            w.u8(KIND_ATTEMPT);
            w.u64(sequence);
            w.id(attempt.task_id);
            w.u32(attempt.attempt_number);
            w.u64(attempt.started_at_ms);
            w.u64(attempt.ended_at_ms);
            w.u8(outcome_code(attempt.outcome));
            match attempt.response_status {
                None => w.u8(0),
                Some(status) => {
                    w.u8(1);
                    w.u16(status);
                }
            }
        }
    }

    let body = w.buf;
    let mut frame = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&crc32fast::hash(&body).to_be_bytes());
    frame.extend_from_slice(&body);
    frame
}

fn decode_body(body: &[u8]) -> Result<(u64, StoreRecord), DecodeError> {
    let mut r = Reader::new(body);
    let kind = r.u8()?;
    let sequence = r.u64()?;
    let record = match kind {
        KIND_TASK_UPSERT => {
            let id = r.id()?;
            let name = r.text()?;
            let queue = r.text()?;
            let destination = Url::parse(&r.text()?)
                .map_err(|_| DecodeError::BadField("destination"))?;
            let method =
                method_from_code(r.u8()?).ok_or(DecodeError::BadField("method"))?;
            let content_type = r.opt_text()?;
            let payload = r.bytes()?;
            let max_retries = r.u32()?;
            let backoff_ms = r.u64()?;
            let ack_timeout_ms = r.u64()?;
            let state = state_from_code(r.u8()?).ok_or(DecodeError::BadField("state"))?;
            let attempts_used = r.u32()?;
            let created_at_ms = r.u64()?;
            let updated_at_ms = r.u64()?;
            StoreRecord::TaskUpsert(Task {
                id,
                name,
                queue,
                destination,
                method,
                content_type,
                payload,
                retry_policy: crate::task::RetryPolicy {
                    max_retries,
                    backoff_ms,
                    ack_timeout_ms,
                },
                state,
                attempts_used,
                created_at_ms,
                updated_at_ms,
            })
        }
        KIND_STATE_CHANGE => StoreRecord::StateChange {
            task_id: r.id()?,
            state: state_from_code(r.u8()?).ok_or(DecodeError::BadField("state"))?,
            attempts_used: r.u32()?,
            at_ms: r.u64()?,
        },
        KIND_ATTEMPT => {
            let task_id = r.id()?;
            let attempt_number = r.u32()?;
            let started_at_ms = r.u64()?;
            let ended_at_ms = r.u64()?;
            let outcome = outcome_from_code(r.u8()?).ok_or(DecodeError::BadField("outcome"))?;
            let response_status = match r.u8()? {
                0 => None,
                1 => Some(r.u16()?),
                _ => return Err(DecodeError::BadField("presence flag")),
            };
            StoreRecord::Attempt(AttemptRecord {
                task_id,
                attempt_number,
                started_at_ms,
                ended_at_ms,
                outcome,
                response_status,
            })
        }
        other => return Err(DecodeError::UnknownKind(other)),
    };
    r.done()?;
    Ok((sequence, record))
}

/// Decodes the frame starting at `buf[offset..]`.
///
/// Returns the sequenced record and the offset one past the frame.
pub fn decode_frame(buf: &[u8], offset: usize) -> Result<(u64, StoreRecord, usize), DecodeError> {
    if offset + FRAME_HEADER_LEN > buf.len() {
        return Err(DecodeError::Truncated);
    }
    let len = u32::from_be_bytes(buf[offset..offset + 4].try_into().unwrap());
    if len > MAX_BODY_LEN {
        return Err(DecodeError::BadField("length"));
    }
    let crc = u32::from_be_bytes(buf[offset + 4..offset + 8].try_into().unwrap());
    let body_start = offset + FRAME_HEADER_LEN;
    let body_end = body_start + len as usize;
    if body_end > buf.len() {
        return Err(DecodeError::Truncated);
    }
    let body = &buf[body_start..body_end];
    if crc32fast::hash(body) != crc {
        return Err(DecodeError::CrcMismatch);
    }
    let (sequence, record) = decode_body(body)?;
    Ok((sequence, record, body_end))
}

/// Decodes every whole, valid frame from the start of `buf`.
///
/// Stops at the first corrupt or truncated frame; `valid_len` is the byte
/// length of the clean prefix.
pub struct DecodedLog {
    pub records: Vec<(u64, StoreRecord)>,
    pub valid_len: usize,
    pub error: Option<DecodeError>,
}

pub fn decode_log(buf: &[u8]) -> DecodedLog {
    let mut records = Vec::new();
    let mut offset = 0;
    while offset < buf.len() {
        match decode_frame(buf, offset) {
            Ok((sequence, record, next)) => {
                records.push((sequence, record));
                offset = next;
            }
            Err(e) => {
                return DecodedLog {
                    records,
                    valid_len: offset,
                    error: Some(e),
                };
            }
        }
    }
    DecodedLog {
        records,
        valid_len: offset,
        error: None,
    }
}
