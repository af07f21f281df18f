//! Parameter containers for the frozen base, the ladder side network and the gate.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::numcore::{NodeId, NumError, Tape, Tensor, LAYER_NORM_EPS};

use super::ModelConfig;

/// Affine map `x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(vec![d_in, d_out], std, rng),
            bias: Tensor::zeros(vec![d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![d_in, d_out]),
            bias: Tensor::zeros(vec![d_out]),
        }
    }

    pub fn apply<'a>(&'a self, tape: &mut Tape<'a>, x: NodeId) -> Result<NodeId, NumError> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn visit<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn visit_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: Tensor::filled(vec![d], 1.0),
            bias: Tensor::zeros(vec![d]),
        }
    }

    pub fn apply<'a>(&'a self, tape: &mut Tape<'a>, x: NodeId) -> Result<NodeId, NumError> {
        let g = tape.leaf(&self.gain);
        let b = tape.leaf(&self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    fn visit<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn visit_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor)>) {
        out.push((format!("{prefix}.gain"), &mut self.gain));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// One pre-norm transformer block of the base model.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseLayer {
    pub attn_norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ff_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Frozen base network: embeddings, `L` transformer blocks, output head.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseParams {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<BaseLayer>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl BaseParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let std = 0.02;
        let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
        let layers = (0..cfg.n_layers)
            .map(|_| BaseLayer {
                attn_norm: LayerNorm::new(d),
                query: Linear::new(d, d, std, rng),
                key: Linear::new(d, d, std, rng),
                value: Linear::new(d, d, std, rng),
                attn_out: Linear::new(d, d, resid_std, rng),
                ff_norm: LayerNorm::new(d),
                ff_in: Linear::new(d, cfg.d_ff, std, rng),
                ff_out: Linear::new(cfg.d_ff, d, resid_std, rng),
            })
            .collect();
        Self {
            tok_emb: Tensor::randn(vec![cfg.vocab_size, d], std, rng),
            pos_emb: Tensor::randn(vec![cfg.max_seq_len, d], std / 2.0, rng),
            layers,
            final_norm: LayerNorm::new(d),
            head: Linear::new(d, cfg.vocab_size, std, rng),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("base.tok_emb".to_string(), &self.tok_emb),
            ("base.pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("base.layers.{i}");
            l.attn_norm.visit(&format!("{p}.attn_norm"), &mut out);
            l.query.visit(&format!("{p}.query"), &mut out);
            l.key.visit(&format!("{p}.key"), &mut out);
            l.value.visit(&format!("{p}.value"), &mut out);
            l.attn_out.visit(&format!("{p}.attn_out"), &mut out);
            l.ff_norm.visit(&format!("{p}.ff_norm"), &mut out);
            l.ff_in.visit(&format!("{p}.ff_in"), &mut out);
            l.ff_out.visit(&format!("{p}.ff_out"), &mut out);
        }
        self.final_norm.visit("base.final_norm", &mut out);
        self.head.visit("base.head", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("base.tok_emb".to_string(), &mut self.tok_emb),
            ("base.pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("base.layers.{i}");
            l.attn_norm.visit_mut(&format!("{p}.attn_norm"), &mut out);
            l.query.visit_mut(&format!("{p}.query"), &mut out);
            l.key.visit_mut(&format!("{p}.key"), &mut out);
            l.value.visit_mut(&format!("{p}.value"), &mut out);
            l.attn_out.visit_mut(&format!("{p}.attn_out"), &mut out);
            l.ff_norm.visit_mut(&format!("{p}.ff_norm"), &mut out);
            l.ff_in.visit_mut(&format!("{p}.ff_in"), &mut out);
            l.ff_out.visit_mut(&format!("{p}.ff_out"), &mut out);
        }
        self.final_norm.visit_mut("base.final_norm", &mut out);
        self.head.visit_mut("base.head", &mut out);
        out
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for (_, t) in self.named_mut() {
            t.set_requires_grad(!frozen);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.named().iter().all(|(_, t)| !t.requires_grad())
    }

    pub fn checksum(&self) -> String {
        checksum(&self.named())
    }
}

/// Attention-free two-layer mixer at side width.
#[derive(Debug, Clone, PartialEq)]
pub struct SideBlock {
    pub fc_in: Linear,
    pub fc_out: Linear,
}

/// Ladder side network held on the device.
#[derive(Debug, Clone, PartialEq)]
pub struct SideParams {
    /// `d_model → d_side`, one per base layer.
    pub down: Vec<Linear>,
    pub blocks: Vec<SideBlock>,
    /// Ladder mixing scalars for rungs `2..=L`; the first rung has no predecessor.
    pub mix: Vec<Tensor>,
    /// `d_side → d_model`.
    pub up: Linear,
}

impl SideParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let s = cfg.side_width();
        let mut p = Self {
            down: (0..cfg.n_layers)
                .map(|_| Linear::new(d, s, 1.0 / (d as f64).sqrt(), rng))
                .collect(),
            blocks: (0..cfg.n_layers)
                .map(|_| SideBlock {
                    fc_in: Linear::new(s, s, 1.0 / (s as f64).sqrt(), rng),
                    fc_out: Linear::new(s, s, 1.0 / (s as f64).sqrt(), rng),
                })
                .collect(),
            mix: (1..cfg.n_layers).map(|_| Tensor::scalar(1.0)).collect(),
            up: Linear::new(s, d, 0.1 / (s as f64).sqrt(), rng),
        };
        p.set_trainable(true);
        p
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let s = cfg.side_width();
        Self {
            down: (0..cfg.n_layers).map(|_| Linear::zeros(d, s)).collect(),
            blocks: (0..cfg.n_layers)
                .map(|_| SideBlock {
                    fc_in: Linear::zeros(s, s),
                    fc_out: Linear::zeros(s, s),
                })
                .collect(),
            mix: (1..cfg.n_layers).map(|_| Tensor::zeros(vec![1])).collect(),
            up: Linear::zeros(s, d),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.down.iter().enumerate() {
            l.visit(&format!("side.down.{i}"), &mut out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.fc_in.visit(&format!("side.blocks.{i}.fc_in"), &mut out);
            b.fc_out.visit(&format!("side.blocks.{i}.fc_out"), &mut out);
        }
        for (i, m) in self.mix.iter().enumerate() {
            out.push((format!("side.mix.{}", i + 1), m));
        }
        self.up.visit("side.up", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.down.iter_mut().enumerate() {
            l.visit_mut(&format!("side.down.{i}"), &mut out);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.fc_in.visit_mut(&format!("side.blocks.{i}.fc_in"), &mut out);
            b.fc_out.visit_mut(&format!("side.blocks.{i}.fc_out"), &mut out);
        }
        for (i, m) in self.mix.iter_mut().enumerate() {
            out.push((format!("side.mix.{}", i + 1), m));
        }
        self.up.visit_mut("side.up", &mut out);
        out
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.named_mut() {
            t.set_requires_grad(trainable);
        }
    }

    /// Ladder recurrence over the supplied rung inputs (one `T×d_model` per layer).
    ///
    /// `h_i = block_i(down_i(rung_i) + mix_i · h_{i-1})`, output `up(h_L)`.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, rungs: &[NodeId]) -> Result<NodeId, NumError> {
        if rungs.len() != self.down.len() {
            return Err(NumError::Contract(format!(
                "side network needs {} layer hiddens, got {}",
                self.down.len(),
                rungs.len()
            )));
        }
        let mut h: Option<NodeId> = None;
        for (i, &rung) in rungs.iter().enumerate() {
            let mut z = self.down[i].apply(tape, rung)?;
            if let Some(prev) = h {
                let m = tape.leaf(&self.mix[i - 1]);
                let carried = tape.scale_by(m, prev)?;
                z = tape.add(z, carried)?;
            }
            let u = self.blocks[i].fc_in.apply(tape, z)?;
            let u = tape.gelu(u);
            h = Some(self.blocks[i].fc_out.apply(tape, u)?);
        }
        self.up.apply(tape, h.expect("at least one layer"))
    }
}

/// Linear `d_model × 2` classifier; class 0 keeps the base output, class 1 consults the side.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub proj: Linear,
}

impl GateParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut g = Self {
            proj: Linear::new(cfg.d_model, 2, 0.02, rng),
        };
        g.set_trainable(true);
        g
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            proj: Linear::zeros(cfg.d_model, 2),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.proj.visit("gate.proj", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.proj.visit_mut("gate.proj", &mut out);
        out
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.named_mut() {
            t.set_requires_grad(trainable);
        }
    }

    /// `T×2` gate logits for a `T×d_model` input.
    pub fn logits<'a>(&'a self, tape: &mut Tape<'a>, base_final: NodeId) -> Result<NodeId, NumError> {
        self.proj.apply(tape, base_final)
    }
}

/// Hard gate decision from one position's logits. Ties keep the base path.
pub fn hard_decision(logits: &[f64]) -> u8 {
    u8::from(logits[1] > logits[0])
}

/// SHA-256 over names, shapes and little-endian values, as lowercase hex.
pub fn checksum(named: &[(String, &Tensor)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in named {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn count(named: &[(String, &Tensor)]) -> usize {
    named.iter().map(|(_, t)| t.len()).sum()
}

/// Parameter counts of each network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeAudit {
    pub base: usize,
    pub side: usize,
    pub gate: usize,
}

impl SizeAudit {
    pub fn side_percent(&self) -> f64 {
        100.0 * self.side as f64 / self.base as f64
    }

    pub fn trainable_percent(&self) -> f64 {
        100.0 * (self.side + self.gate) as f64 / self.base as f64
    }
}
