//! Length-prefixed frames: `u32 BE payload length | u8 type | payload`.

use std::io::{self, Read};

use thiserror::Error;

pub const PROTOCOL_VERSION: u16 = 1;
/// Largest accepted payload, in bytes.
pub const MAX_PAYLOAD: usize = 16 << 20;
pub const HEADER_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    Prompt = 2,
    BaseHiddens = 3,
    GateDecision = 4,
    SideOutput = 5,
    Token = 6,
    Eos = 7,
    Error = 8,
}

impl MessageType {
    pub const ALL: [MessageType; 8] = [
        MessageType::Hello,
        MessageType::Prompt,
        MessageType::BaseHiddens,
        MessageType::GateDecision,
        MessageType::SideOutput,
        MessageType::Token,
        MessageType::Eos,
        MessageType::Error,
    ];

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == b)
    }

    /// Dense index for per-type counters.
    pub fn index(self) -> usize {
        self as usize - 1
    }
}

/// Error codes carried by `ERROR` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    Protocol = 1,
    DigestMismatch = 2,
    Oversize = 3,
    Truncated = 4,
    UnknownType = 5,
    OutOfOrder = 6,
    Timeout = 7,
    Internal = 8,
    Version = 9,
    Malformed = 10,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        use ErrorCode::*;
        [
            Protocol,
            DigestMismatch,
            Oversize,
            Truncated,
            UnknownType,
            OutOfOrder,
            Timeout,
            Internal,
            Version,
            Malformed,
        ]
        .into_iter()
        .find(|c| *c as u16 == v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello {
        version: u16,
        digest: [u8; 32],
    },
    Prompt {
        policy: u8,
        strategy: u8,
        beam_width: u16,
        max_new: u32,
        tokens: Vec<u32>,
    },
    /// `layers × rows × cols` values, layer-major.
    BaseHiddens {
        step: u64,
        layers: u32,
        rows: u32,
        cols: u32,
        data: Vec<f64>,
    },
    GateDecision {
        step: u64,
        sigma: u8,
    },
    SideOutput {
        step: u64,
        data: Vec<f64>,
    },
    Token {
        step: u64,
        token: u32,
    },
    Eos,
    Error {
        code: u16,
        message: String,
    },
}

impl WireMessage {
    pub fn kind(&self) -> MessageType {
        match self {
            WireMessage::Hello { .. } => MessageType::Hello,
            WireMessage::Prompt { .. } => MessageType::Prompt,
            WireMessage::BaseHiddens { .. } => MessageType::BaseHiddens,
            WireMessage::GateDecision { .. } => MessageType::GateDecision,
            WireMessage::SideOutput { .. } => MessageType::SideOutput,
            WireMessage::Token { .. } => MessageType::Token,
            WireMessage::Eos => MessageType::Eos,
            WireMessage::Error { .. } => MessageType::Error,
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        WireMessage::Error {
            code: code as u16,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("payload of {len} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    Oversize { len: usize },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("malformed {kind:?} payload: {reason}")]
    Malformed { kind: MessageType, reason: String },
}

impl FrameError {
    pub fn code(&self) -> ErrorCode {
        match self {
            FrameError::Truncated { .. } => ErrorCode::Truncated,
            FrameError::Oversize { .. } => ErrorCode::Oversize,
            FrameError::UnknownType(_) => ErrorCode::UnknownType,
            FrameError::Malformed { .. } => ErrorCode::Malformed,
        }
    }
}

fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_bits().to_be_bytes());
    }
}

fn payload(msg: &WireMessage) -> Vec<u8> {
    let mut p = Vec::new();
    match msg {
        WireMessage::Hello { version, digest } => {
            p.extend_from_slice(&version.to_be_bytes());
            p.extend_from_slice(digest);
        }
        WireMessage::Prompt {
            policy,
            strategy,
            beam_width,
            max_new,
            tokens,
        } => {
            p.push(*policy);
            p.push(*strategy);
            p.extend_from_slice(&beam_width.to_be_bytes());
            p.extend_from_slice(&max_new.to_be_bytes());
            p.extend_from_slice(&(tokens.len() as u32).to_be_bytes());
            for t in tokens {
                p.extend_from_slice(&t.to_be_bytes());
            }
        }
        WireMessage::BaseHiddens {
            step,
            layers,
            rows,
            cols,
            data,
        } => {
            p.extend_from_slice(&step.to_be_bytes());
            p.extend_from_slice(&layers.to_be_bytes());
            p.extend_from_slice(&rows.to_be_bytes());
            p.extend_from_slice(&cols.to_be_bytes());
            put_f64s(&mut p, data);
        }
        WireMessage::GateDecision { step, sigma } => {
            p.extend_from_slice(&step.to_be_bytes());
            p.push(*sigma);
        }
        WireMessage::SideOutput { step, data } => {
            p.extend_from_slice(&step.to_be_bytes());
            p.extend_from_slice(&(data.len() as u32).to_be_bytes());
            put_f64s(&mut p, data);
        }
        WireMessage::Token { step, token } => {
            p.extend_from_slice(&step.to_be_bytes());
            p.extend_from_slice(&token.to_be_bytes());
        }
        WireMessage::Eos => {}
        WireMessage::Error { code, message } => {
            p.extend_from_slice(&code.to_be_bytes());
            p.extend_from_slice(&(message.len() as u32).to_be_bytes());
            p.extend_from_slice(message.as_bytes());
        }
    }
    p
}

pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, FrameError> {
    let p = payload(msg);
    if p.len() > MAX_PAYLOAD {
        return Err(FrameError::Oversize { len: p.len() });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + p.len());
    out.extend_from_slice(&(p.len() as u32).to_be_bytes());
    out.push(msg.kind() as u8);
    out.extend_from_slice(&p);
    Ok(out)
}

/// Checks a frame header; returns payload length and type byte.
pub fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(usize, u8), FrameError> {
    let len = u32::from_be_bytes([h[0], h[1], h[2], h[3]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::Oversize { len });
    }
    Ok((len, h[4]))
}

/// Decodes one frame from the front of `buf`; returns the message and bytes consumed.
pub fn decode(buf: &[u8]) -> Result<(WireMessage, usize), FrameError> {
    if buf.len() < HEADER_LEN {
        return Err(FrameError::Truncated {
            needed: HEADER_LEN,
            have: buf.len(),
        });
    }
    let header: [u8; HEADER_LEN] = buf[..HEADER_LEN].try_into().expect("header length");
    let (len, ty) = parse_header(&header)?;
    let total = HEADER_LEN + len;
    if buf.len() < total {
        return Err(FrameError::Truncated {
            needed: total,
            have: buf.len(),
        });
    }
    Ok((decode_payload(ty, &buf[HEADER_LEN..total])?, total))
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
    kind: MessageType,
}

impl<'b> Cursor<'b> {
    fn bad(&self, reason: impl Into<String>) -> FrameError {
        FrameError::Malformed {
            kind: self.kind,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8], FrameError> {
        if self.buf.len() - self.pos < n {
            return Err(self.bad(format!("needs {n} more bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FrameError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, FrameError> {
        let bytes = n.checked_mul(8).ok_or_else(|| self.bad("float count overflows"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_be_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }

    fn finish(self) -> Result<(), FrameError> {
        if self.pos != self.buf.len() {
            return Err(self.bad(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_payload(ty: u8, p: &[u8]) -> Result<WireMessage, FrameError> {
    let kind = MessageType::from_byte(ty).ok_or(FrameError::UnknownType(ty))?;
    let mut c = Cursor { buf: p, pos: 0, kind };
    let msg = match kind {
        MessageType::Hello => {
            let version = c.u16()?;
            let digest = c.take(32)?.try_into().expect("32 bytes");
            WireMessage::Hello { version, digest }
        }
        MessageType::Prompt => {
            let policy = c.u8()?;
            let strategy = c.u8()?;
            let beam_width = c.u16()?;
            let max_new = c.u32()?;
            let n = c.u32()? as usize;
            let raw = c.take(n.checked_mul(4).ok_or_else(|| c.bad("token count overflows"))?)?;
            let tokens = raw
                .chunks_exact(4)
                .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
                .collect();
            WireMessage::Prompt {
                policy,
                strategy,
                beam_width,
                max_new,
                tokens,
            }
        }
        MessageType::BaseHiddens => {
            let step = c.u64()?;
            let layers = c.u32()?;
            let rows = c.u32()?;
            let cols = c.u32()?;
            let n = (layers as usize)
                .checked_mul(rows as usize)
                .and_then(|v| v.checked_mul(cols as usize))
                .ok_or_else(|| c.bad("dimension product overflows"))?;
            let data = c.f64s(n)?;
            WireMessage::BaseHiddens {
                step,
                layers,
                rows,
                cols,
                data,
            }
        }
        MessageType::GateDecision => {
            let step = c.u64()?;
            let sigma = c.u8()?;
            if sigma > 1 {
                return Err(c.bad(format!("sigma must be 0 or 1, got {sigma}")));
            }
            WireMessage::GateDecision { step, sigma }
        }
        MessageType::SideOutput => {
            let step = c.u64()?;
            let n = c.u32()? as usize;
            let data = c.f64s(n)?;
            WireMessage::SideOutput { step, data }
        }
        MessageType::Token => {
            let step = c.u64()?;
            let token = c.u32()?;
            WireMessage::Token { step, token }
        }
        MessageType::Eos => WireMessage::Eos,
        MessageType::Error => {
            let code = c.u16()?;
            let n = c.u32()? as usize;
            let message = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| c.bad("message is not UTF-8"))?;
            WireMessage::Error { code, message }
        }
    };
    c.finish()?;
    Ok(msg)
}

/// Outcome of reading one frame from a byte stream.
#[derive(Debug)]
pub enum ReadError {
    /// Stream ended cleanly before a new frame began.
    Closed,
    TimedOut,
    Frame(FrameError),
    Io(io::Error),
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize, ReadError> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                return Err(ReadError::TimedOut)
            }
            Err(e) => return Err(ReadError::Io(e)),
        }
    }
    Ok(got)
}

/// Reads one frame; returns the message and the frame's size in bytes.
pub fn read_frame<R: Read>(r: &mut R) -> Result<(WireMessage, usize), ReadError> {
    let mut header = [0u8; HEADER_LEN];
    let got = read_full(r, &mut header)?;
    if got == 0 {
        return Err(ReadError::Closed);
    }
    if got < HEADER_LEN {
        return Err(ReadError::Frame(FrameError::Truncated {
            needed: HEADER_LEN,
            have: got,
        }));
    }
    let (len, ty) = parse_header(&header).map_err(ReadError::Frame)?;
    let mut p = vec![0u8; len];
    let got = read_full(r, &mut p)?;
    if got < len {
        return Err(ReadError::Frame(FrameError::Truncated {
            needed: HEADER_LEN + len,
            have: HEADER_LEN + got,
        }));
    }
    let msg = decode_payload(ty, &p).map_err(ReadError::Frame)?;
    Ok((msg, HEADER_LEN + len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_message() -> impl Strategy<Value = WireMessage> {
        let floats = prop::collection::vec(-1e6f64..1e6, 0..40);
        prop_oneof![
            (any::<u16>(), any::<[u8; 32]>()).prop_map(|(version, digest)| WireMessage::Hello { version, digest }),
            (any::<u8>(), any::<u8>(), any::<u16>(), any::<u32>(), prop::collection::vec(any::<u32>(), 0..30))
                .prop_map(|(policy, strategy, beam_width, max_new, tokens)| WireMessage::Prompt {
                    policy,
                    strategy,
                    beam_width,
                    max_new,
                    tokens
                }),
            (any::<u64>(), 0u32..4, 0u32..3, 0u32..5).prop_flat_map(|(step, layers, rows, cols)| {
                prop::collection::vec(any::<f64>(), (layers * rows * cols) as usize).prop_map(move |data| {
                    WireMessage::BaseHiddens {
                        step,
                        layers,
                        rows,
                        cols,
                        data,
                    }
                })
            }),
            (any::<u64>(), 0u8..2).prop_map(|(step, sigma)| WireMessage::GateDecision { step, sigma }),
            (any::<u64>(), floats).prop_map(|(step, data)| WireMessage::SideOutput { step, data }),
            (any::<u64>(), any::<u32>()).prop_map(|(step, token)| WireMessage::Token { step, token }),
            Just(WireMessage::Eos),
            (any::<u16>(), "\\PC{0,20}").prop_map(|(code, message)| WireMessage::Error { code, message }),
        ]
    }

    proptest! {
        #[test]
        fn frames_round_trip(msg in arb_message()) {
            let bytes = encode(&msg).unwrap();
            let (back, used) = decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            // compare through bytes so NaN payloads count as equal
            prop_assert_eq!(encode(&back).unwrap(), bytes.clone());
            let (streamed, n) = read_frame(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(n, bytes.len());
            prop_assert_eq!(encode(&streamed).unwrap(), bytes);
        }

        #[test]
        fn every_strict_prefix_is_truncated(msg in arb_message()) {
            let bytes = encode(&msg).unwrap();
            for cut in 0..bytes.len() {
                let is_truncated = matches!(decode(&bytes[..cut]), Err(FrameError::Truncated { .. }));
                prop_assert!(is_truncated);
            }
        }
    }

    #[test]
    fn oversize_header_is_rejected_without_reading_payload() {
        let mut frame = ((MAX_PAYLOAD + 1) as u32).to_be_bytes().to_vec();
        frame.push(MessageType::SideOutput as u8);
        assert_eq!(decode(&frame), Err(FrameError::Oversize { len: MAX_PAYLOAD + 1 }));
        assert!(matches!(
            read_frame(&mut frame.as_slice()),
            Err(ReadError::Frame(FrameError::Oversize { .. }))
        ));
        let big = WireMessage::SideOutput {
            step: 0,
            data: vec![0.0; MAX_PAYLOAD / 8 + 1],
        };
        assert!(matches!(encode(&big), Err(FrameError::Oversize { .. })));
    }

    #[test]
    fn bad_payloads_are_reported() {
        assert_eq!(decode(&[0, 0, 0, 0, 99]), Err(FrameError::UnknownType(99)));
        let eos_with_junk = [0, 0, 0, 1, MessageType::Eos as u8, 7];
        assert!(matches!(decode(&eos_with_junk), Err(FrameError::Malformed { .. })));
        let mut gate = encode(&WireMessage::GateDecision { step: 1, sigma: 1 }).unwrap();
        *gate.last_mut().unwrap() = 2;
        assert_eq!(decode(&gate).unwrap_err().code(), ErrorCode::Malformed);
    }

    #[test]
    fn stream_reader_distinguishes_close_from_truncation() {
        assert!(matches!(read_frame(&mut [].as_slice()), Err(ReadError::Closed)));
        let bytes = encode(&WireMessage::Token { step: 3, token: 9 }).unwrap();
        assert!(matches!(
            read_frame(&mut &bytes[..bytes.len() - 1]),
            Err(ReadError::Frame(FrameError::Truncated { .. }))
        ));
    }
}
