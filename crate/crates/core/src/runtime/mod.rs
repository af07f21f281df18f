//! Split decoding between a cloud endpoint (base and gate) and a device endpoint (side network).
//!
//! Per model evaluation the cloud sends `GATE_DECISION`. When `σ = 1` it
//! follows with `BASE_HIDDENS` and waits for the device's `SIDE_OUTPUT`
//! before fusing. Result tokens go out as `TOKEN` frames and the session ends
//! with `EOS`.

mod decode;
mod session;
mod transport;
pub mod wire;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;

pub use decode::{
    argmax, beam_search, decode_monolithic, embedding_row, greedy, run_decode, DecodeConfig, DecodeOutput,
    GatingPolicy, LocalSide, SidePath, Stepper, Strategy,
};
pub use session::{
    cloud_session, connect_and_run, device_only, run_device, serve_cloud, CloudServer, DeviceClient, DeviceOutcome,
    SessionLog, SessionResult, WireMode,
};
pub use transport::{
    loopback_pair, FrameStats, LoopbackTransport, PipeEnd, StreamTransport, TcpTransport, Transport, FRAME_TIMEOUT,
};
pub use wire::{ErrorCode, FrameError, MessageType, WireMessage, MAX_PAYLOAD, PROTOCOL_VERSION};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("timed out waiting for a frame after {} tokens", partial.len())]
    Timeout { partial: Vec<u32> },
    #[error("peer closed the connection")]
    Closed,
    #[error("model digest mismatch")]
    DigestMismatch,
    #[error("out-of-order frame: {0}")]
    OutOfOrder(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("peer reported error {code}: {message}")]
    Remote { code: u16, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

impl RuntimeError {
    /// Code of a remote error, if this is one.
    pub fn remote_code(&self) -> Option<ErrorCode> {
        match self {
            RuntimeError::Remote { code, .. } => ErrorCode::from_u16(*code),
            _ => None,
        }
    }
}

/// Transmission accounting kept independently by each endpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmissionCounter {
    pub frames_sent: u64,
    pub frames_received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    /// Model evaluations, one `GATE_DECISION` each.
    pub decode_steps: u64,
    pub sigma_ones: u64,
    /// `BASE_HIDDENS` / `SIDE_OUTPUT` exchanges.
    pub round_trips: u64,
    pub tokens: u64,
}

impl TransmissionCounter {
    pub fn record_gate(&mut self, sigma: u8) {
        self.decode_steps += 1;
        self.sigma_ones += u64::from(sigma);
    }

    /// Cloud-to-device round trips per model evaluation.
    pub fn m(&self) -> f64 {
        if self.decode_steps == 0 {
            0.0
        } else {
            self.round_trips as f64 / self.decode_steps as f64
        }
    }

    pub fn absorb(&mut self, stats: &FrameStats) {
        self.frames_sent = stats.sent.iter().sum();
        self.frames_received = stats.received.iter().sum();
        self.bytes_sent = stats.bytes_sent;
        self.bytes_received = stats.bytes_received;
    }
}

/// Architectures whose per-token transmission counts are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransmissionKind {
    Lora,
    Adapter,
    Lst,
    SpaClassifier,
    AlwaysSide,
    BaseOnly,
    DeviceOnly,
}

impl TransmissionKind {
    pub fn name(self) -> &'static str {
        match self {
            TransmissionKind::Lora => "LoRA",
            TransmissionKind::Adapter => "Adapter",
            TransmissionKind::Lst => "LST",
            TransmissionKind::SpaClassifier => "SPA",
            TransmissionKind::AlwaysSide => "Always-side",
            TransmissionKind::BaseOnly => "Base-only",
            TransmissionKind::DeviceOnly => "Device-only",
        }
    }
}

impl From<GatingPolicy> for TransmissionKind {
    fn from(p: GatingPolicy) -> Self {
        match p {
            GatingPolicy::SpaClassifier => TransmissionKind::SpaClassifier,
            GatingPolicy::AlwaysSide => TransmissionKind::AlwaysSide,
            GatingPolicy::DeviceOnly => TransmissionKind::DeviceOnly,
            GatingPolicy::Lst => TransmissionKind::Lst,
            GatingPolicy::BaseOnly => TransmissionKind::BaseOnly,
        }
    }
}

/// Analytic cloud/device transmissions per generated token.
///
/// LoRA exchanges once per layer, an adapter twice per layer, a ladder side
/// network once per token, and the gated side network only when `σ = 1`.
pub fn count_transmissions(kind: TransmissionKind, n_layers: usize, sigma: Option<&[u8]>) -> Result<f64, RuntimeError> {
    Ok(match kind {
        TransmissionKind::Lora => n_layers as f64,
        TransmissionKind::Adapter => 2.0 * n_layers as f64,
        TransmissionKind::Lst | TransmissionKind::AlwaysSide => 1.0,
        TransmissionKind::BaseOnly | TransmissionKind::DeviceOnly => 0.0,
        TransmissionKind::SpaClassifier => {
            let s = sigma.ok_or_else(|| RuntimeError::Contract("SPA transmission count needs a gate trace".into()))?;
            if s.is_empty() {
                return Err(RuntimeError::Contract("empty gate trace".into()));
            }
            s.iter().filter(|&&v| v == 1).count() as f64 / s.len() as f64
        }
    })
}
