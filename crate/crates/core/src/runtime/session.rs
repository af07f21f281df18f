use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{info, warn};

use crate::model::{model_digest, ModelConfig, PrefixState, RungSource, SideParams, SpaModel};

use super::decode::{decode_monolithic, run_decode, DecodeConfig, GatingPolicy, SidePath, Stepper, Strategy};
use super::transport::{TcpTransport, Transport, FRAME_TIMEOUT};
use super::wire::{ErrorCode, WireMessage, PROTOCOL_VERSION};
use super::{RuntimeError, TransmissionCounter};

/// Which base activations the cloud sends when `σ = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WireMode {
    /// Every layer's hidden for the current position.
    #[default]
    AllLayers,
    /// Only the final hidden; the device feeds it to every rung.
    Final,
}

impl WireMode {
    pub fn rung_source(self) -> RungSource {
        match self {
            WireMode::AllLayers => RungSource::AllLayers,
            WireMode::Final => RungSource::FinalOnly,
        }
    }
}

impl std::str::FromStr for WireMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all-layers" => Ok(WireMode::AllLayers),
            "final" => Ok(WireMode::Final),
            other => Err(format!("unknown wire mode '{other}' (expected final or all-layers)")),
        }
    }
}

/// What the cloud recorded for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub policy: GatingPolicy,
    pub tokens: Vec<u32>,
    pub sigma_trace: Vec<u8>,
    pub counter: TransmissionCounter,
}

impl SessionLog {
    pub fn usage_rate(&self) -> f64 {
        self.counter.m()
    }
}

struct CloudPath<'t, T: Transport> {
    transport: &'t mut T,
    mode: WireMode,
    counter: TransmissionCounter,
    d_model: usize,
}

impl<T: Transport> SidePath for CloudPath<'_, T> {
    fn gate(&mut self, step: u64, sigma: u8) -> Result<(), RuntimeError> {
        self.transport.send(&WireMessage::GateDecision { step, sigma })?;
        self.counter.record_gate(sigma);
        Ok(())
    }

    fn side(&mut self, step: u64, state: &PrefixState) -> Result<Vec<f64>, RuntimeError> {
        let layers: Vec<&[f64]> = match self.mode {
            WireMode::AllLayers => state.layers.iter().map(Vec::as_slice).collect(),
            WireMode::Final => vec![state.final_hidden()],
        };
        let msg = WireMessage::BaseHiddens {
            step,
            layers: layers.len() as u32,
            rows: 1,
            cols: self.d_model as u32,
            data: layers.concat(),
        };
        self.transport.send(&msg)?;
        self.counter.round_trips += 1;
        match self.transport.recv()? {
            WireMessage::SideOutput { step: s, data } if s == step && data.len() == self.d_model => Ok(data),
            WireMessage::SideOutput { step: s, .. } if s != step => Err(reject(
                self.transport,
                ErrorCode::OutOfOrder,
                format!("side output for step {s}, expected {step}"),
            )),
            WireMessage::Error { code, message } => Err(RuntimeError::Remote { code, message }),
            other => Err(reject(
                self.transport,
                ErrorCode::Protocol,
                format!("expected SIDE_OUTPUT for step {step}, got {:?}", other.kind()),
            )),
        }
    }

    fn token(&mut self, index: u64, token: u32) -> Result<(), RuntimeError> {
        self.transport.send(&WireMessage::Token { step: index, token })?;
        self.counter.tokens += 1;
        Ok(())
    }
}

/// Sends an ERROR frame (best effort) and returns the matching local error.
fn reject<T: Transport>(t: &mut T, code: ErrorCode, message: String) -> RuntimeError {
    let _ = t.send(&WireMessage::error(code, message.clone()));
    match code {
        ErrorCode::DigestMismatch => RuntimeError::DigestMismatch,
        ErrorCode::OutOfOrder => RuntimeError::OutOfOrder(message),
        _ => RuntimeError::Protocol(message),
    }
}

fn recv_or_reject<T: Transport>(t: &mut T) -> Result<WireMessage, RuntimeError> {
    match t.recv() {
        Err(RuntimeError::Frame(e)) => {
            let _ = t.send(&WireMessage::error(e.code(), e.to_string()));
            Err(RuntimeError::Frame(e))
        }
        other => other,
    }
}

/// Serves one session: handshake, prompt, decode, end of stream.
pub fn cloud_session<T: Transport>(model: &SpaModel, mode: WireMode, t: &mut T) -> Result<SessionLog, RuntimeError> {
    let digest = model.digest();
    match recv_or_reject(t)? {
        WireMessage::Hello { version, .. } if version != PROTOCOL_VERSION => {
            return Err(reject(t, ErrorCode::Version, format!("protocol version {version} not supported")));
        }
        WireMessage::Hello { digest: d, .. } if d != digest => {
            return Err(reject(t, ErrorCode::DigestMismatch, "side network was trained against a different base".into()));
        }
        WireMessage::Hello { .. } => {}
        other => return Err(reject(t, ErrorCode::Protocol, format!("expected HELLO, got {:?}", other.kind()))),
    }
    t.send(&WireMessage::Hello {
        version: PROTOCOL_VERSION,
        digest,
    })?;
    let (cfg, tokens) = match recv_or_reject(t)? {
        WireMessage::Prompt {
            policy,
            strategy,
            beam_width,
            max_new,
            tokens,
        } => {
            let policy = GatingPolicy::from_code(policy);
            let strategy = Strategy::from_code(strategy);
            match (policy, strategy) {
                (Some(GatingPolicy::DeviceOnly), _) => {
                    return Err(reject(t, ErrorCode::Protocol, "device-only sessions never reach the cloud".into()))
                }
                (Some(policy), Some(strategy)) if beam_width >= 1 => (
                    DecodeConfig {
                        max_new_tokens: max_new as usize,
                        strategy,
                        beam_width: beam_width as usize,
                        policy,
                    },
                    tokens,
                ),
                _ => return Err(reject(t, ErrorCode::Malformed, "bad decode settings in PROMPT".into())),
            }
        }
        other => return Err(reject(t, ErrorCode::Protocol, format!("expected PROMPT, got {:?}", other.kind()))),
    };
    if let Err(e) = crate::model::check_tokens(&model.config, &tokens) {
        return Err(reject(t, ErrorCode::Malformed, e.to_string()));
    }
    let mut stepper = Stepper::new(model, cfg.policy);
    let mut path = CloudPath {
        transport: t,
        mode,
        counter: TransmissionCounter::default(),
        d_model: model.config.d_model,
    };
    let (generated, _) = run_decode(&mut stepper, &tokens, &cfg, &mut path)?;
    let mut counter = path.counter;
    t.send(&WireMessage::Eos)?;
    counter.absorb(t.stats());
    Ok(SessionLog {
        policy: cfg.policy,
        tokens: generated,
        sigma_trace: stepper.into_sigma_trace(),
        counter,
    })
}

/// What the device holds: the side network and the tensors a device-only decode needs.
#[derive(Debug, Clone)]
pub struct DeviceClient {
    /// Device-side parameters; transformer layers and gate are placeholders.
    pub model: SpaModel,
    pub digest: [u8; 32],
}

impl DeviceClient {
    pub fn new(model: SpaModel, base_checksum: &str) -> Self {
        let digest = model_digest(&model.config, base_checksum);
        Self { model, digest }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn side(&self) -> &SideParams {
        &self.model.side
    }
}

/// What the device observed for one session.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceOutcome {
    pub tokens: Vec<u32>,
    pub sigma_trace: Vec<u8>,
    pub counter: TransmissionCounter,
}

fn side_for_hiddens(client: &DeviceClient, layers: u32, rows: u32, cols: u32, data: &[f64]) -> Result<Vec<f64>, String> {
    let cfg = client.config();
    let (l, d) = (layers as usize, cols as usize);
    if rows != 1 || d != cfg.d_model || (l != cfg.n_layers && l != 1) {
        return Err(format!("unexpected BASE_HIDDENS shape {layers}x{rows}x{cols}"));
    }
    let rows: Vec<&[f64]> = data.chunks(d).collect();
    let rungs = if l == 1 { vec![rows[0]; cfg.n_layers] } else { rows };
    client.side().forward_row(&rungs).map_err(|e| e.to_string())
}

/// Drives one session from the device side.
pub fn run_device<T: Transport>(
    client: &DeviceClient,
    t: &mut T,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<DeviceOutcome, RuntimeError> {
    cfg.validate()?;
    if cfg.policy == GatingPolicy::DeviceOnly {
        return device_only(client, prompt, cfg);
    }
    let mut counter = TransmissionCounter::default();
    let mut tokens = Vec::new();
    let mut sigma_trace = Vec::new();
    let with_partial = |e: RuntimeError, tokens: &Vec<u32>| match e {
        RuntimeError::Timeout { .. } => RuntimeError::Timeout { partial: tokens.clone() },
        other => other,
    };

    t.send(&WireMessage::Hello {
        version: PROTOCOL_VERSION,
        digest: client.digest,
    })?;
    match t.recv().map_err(|e| with_partial(e, &tokens))? {
        WireMessage::Hello { .. } => {}
        WireMessage::Error { code, message } => return Err(RuntimeError::Remote { code, message }),
        other => return Err(reject(t, ErrorCode::Protocol, format!("expected HELLO, got {:?}", other.kind()))),
    }
    t.send(&WireMessage::Prompt {
        policy: cfg.policy.code(),
        strategy: cfg.strategy.code(),
        beam_width: cfg.beam_width.min(u16::MAX as usize) as u16,
        max_new: cfg.max_new_tokens.min(u32::MAX as usize) as u32,
        tokens: prompt.to_vec(),
    })?;

    let mut last_gate: Option<u64> = None;
    let mut pending: Option<u64> = None;
    loop {
        let msg = match recv_or_reject(t) {
            Ok(m) => m,
            Err(e) => return Err(with_partial(e, &tokens)),
        };
        match msg {
            WireMessage::GateDecision { step, sigma } => {
                if last_gate.is_some_and(|s| step <= s) || pending.is_some() {
                    return Err(reject(t, ErrorCode::OutOfOrder, format!("gate decision for step {step} out of order")));
                }
                last_gate = Some(step);
                if sigma == 1 {
                    pending = Some(step);
                }
                sigma_trace.push(sigma);
                counter.record_gate(sigma);
            }
            WireMessage::BaseHiddens {
                step,
                layers,
                rows,
                cols,
                data,
            } => {
                if pending != Some(step) {
                    return Err(reject(t, ErrorCode::OutOfOrder, format!("hiddens for step {step} were not announced")));
                }
                pending = None;
                let side = match side_for_hiddens(client, layers, rows, cols, &data) {
                    Ok(s) => s,
                    Err(m) => return Err(reject(t, ErrorCode::Malformed, m)),
                };
                t.send(&WireMessage::SideOutput { step, data: side })?;
                counter.round_trips += 1;
            }
            WireMessage::Token { step, token } => {
                if step != tokens.len() as u64 {
                    return Err(reject(t, ErrorCode::OutOfOrder, format!("token {step} arrived after {}", tokens.len())));
                }
                tokens.push(token);
                counter.tokens += 1;
            }
            WireMessage::Eos => break,
            WireMessage::Error { code, message } => return Err(RuntimeError::Remote { code, message }),
            other => {
                return Err(reject(t, ErrorCode::Protocol, format!("unexpected {:?} from cloud", other.kind())));
            }
        }
    }
    counter.absorb(t.stats());
    Ok(DeviceOutcome {
        tokens,
        sigma_trace,
        counter,
    })
}

/// Decodes entirely on the device; nothing is transmitted.
pub fn device_only(client: &DeviceClient, prompt: &[u32], cfg: &DecodeConfig) -> Result<DeviceOutcome, RuntimeError> {
    let out = decode_monolithic(&client.model, prompt, cfg, RungSource::Embedding)?;
    let counter = TransmissionCounter {
        tokens: out.tokens.len() as u64,
        ..TransmissionCounter::default()
    };
    Ok(DeviceOutcome {
        tokens: out.tokens,
        sigma_trace: out.sigma_trace,
        counter,
    })
}

/// Result of one served connection.
pub type SessionResult = Result<SessionLog, RuntimeError>;

/// A running cloud endpoint.
pub struct CloudServer {
    pub addr: SocketAddr,
    handle: JoinHandle<()>,
    results: Arc<Mutex<Vec<(usize, SessionResult)>>>,
}

impl CloudServer {
    /// Waits for the accept loop to finish; results are ordered by connection.
    pub fn join(self) -> Vec<SessionResult> {
        let _ = self.handle.join();
        let mut r = std::mem::take(&mut *self.results.lock().expect("results lock"));
        r.sort_by_key(|(i, _)| *i);
        r.into_iter().map(|(_, r)| r).collect()
    }
}

/// Accepts connections on `listener`, one thread per session; stops after `max_sessions` if set.
pub fn serve_cloud(
    model: Arc<SpaModel>,
    listener: TcpListener,
    mode: WireMode,
    max_sessions: Option<usize>,
    timeout: Duration,
) -> Result<CloudServer, RuntimeError> {
    let addr = listener.local_addr().map_err(|e| RuntimeError::Io(e.to_string()))?;
    let results = Arc::new(Mutex::new(Vec::new()));
    let shared = Arc::clone(&results);
    let handle = thread::spawn(move || {
        let mut workers = Vec::new();
        for (i, conn) in listener.incoming().enumerate() {
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let model = Arc::clone(&model);
            let results = Arc::clone(&shared);
            workers.push(thread::spawn(move || {
                let r = serve_stream(&model, mode, stream, timeout);
                match &r {
                    Ok(log) => info!(
                        "session {i}: {} tokens, policy {}, M = {:.4}",
                        log.tokens.len(),
                        log.policy,
                        log.counter.m()
                    ),
                    Err(e) => warn!("session {i} failed: {e}"),
                }
                results.lock().expect("results lock").push((i, r));
            }));
            if max_sessions.is_some_and(|m| i + 1 >= m) {
                break;
            }
        }
        for w in workers {
            let _ = w.join();
        }
    });
    Ok(CloudServer { addr, handle, results })
}

fn serve_stream(model: &SpaModel, mode: WireMode, stream: TcpStream, timeout: Duration) -> SessionResult {
    let mut t = TcpTransport::tcp(stream, timeout)?;
    cloud_session(model, mode, &mut t)
}

/// Connects to a cloud endpoint and runs one device session.
pub fn connect_and_run(
    client: &DeviceClient,
    addr: &str,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<DeviceOutcome, RuntimeError> {
    if cfg.policy == GatingPolicy::DeviceOnly {
        return device_only(client, prompt, cfg);
    }
    let stream = TcpStream::connect(addr).map_err(|e| RuntimeError::Io(format!("{addr}: {e}")))?;
    let mut t = TcpTransport::tcp(stream, FRAME_TIMEOUT)?;
    run_device(client, &mut t, prompt, cfg)
}
