//! Forward passes: base transformer, ladder side network, gate and fusion.

use crate::numcore::{kernels, NodeId, NumError, Tape, Tensor};

use super::params::{hard_decision, BaseLayer, BaseParams, GateParams, Linear, LayerNorm, SideParams};
use super::{ModelConfig, ModelError};

/// Node handles of one base pass: the embedding and each layer's output `f_i(x)`.
#[derive(Debug, Clone)]
pub struct BaseTrace {
    pub embed: NodeId,
    pub layers: Vec<NodeId>,
}

/// Which base activations feed the side network's rungs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum RungSource {
    /// Rung `i` reads layer `i`'s output.
    #[default]
    AllLayers,
    /// Every rung reads the final layer output.
    FinalOnly,
    /// Every rung reads the input embedding; no transformer layers needed.
    Embedding,
}

impl BaseTrace {
    pub fn final_hidden(&self) -> NodeId {
        *self.layers.last().expect("at least one layer")
    }

    pub fn rungs(&self, source: RungSource) -> Vec<NodeId> {
        match source {
            RungSource::AllLayers => self.layers.clone(),
            RungSource::FinalOnly => vec![self.final_hidden(); self.layers.len()],
            RungSource::Embedding => vec![self.embed; self.layers.len()],
        }
    }

    /// Loads previously computed activations as constants.
    pub fn from_values(tape: &mut Tape<'_>, embed: &Tensor, layers: &[Tensor]) -> Result<Self, NumError> {
        let embed = tape.constant(embed.shape().to_vec(), embed.data().to_vec())?;
        let layers = layers
            .iter()
            .map(|t| tape.constant(t.shape().to_vec(), t.data().to_vec()))
            .collect::<Result<_, _>>()?;
        Ok(Self { embed, layers })
    }
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::Contract("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: t,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

fn attention<'a>(
    layer: &'a BaseLayer,
    cfg: &ModelConfig,
    tape: &mut Tape<'a>,
    x: NodeId,
) -> Result<NodeId, NumError> {
    let n = layer.attn_norm.apply(tape, x)?;
    let q = layer.query.apply(tape, n)?;
    let k = layer.key.apply(tape, n)?;
    let v = layer.value.apply(tape, n)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.causal_mask(scores)?;
        let probs = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let joined = tape.concat_cols(&heads)?;
    layer.attn_out.apply(tape, joined)
}

impl BaseParams {
    /// Token plus position embedding, `T×d_model`.
    pub fn embed<'a>(&'a self, tape: &mut Tape<'a>, tokens: &[u32]) -> Result<NodeId, NumError> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok_table = tape.leaf(&self.tok_emb);
        let pos_table = tape.leaf(&self.pos_emb);
        let tok = tape.gather_rows(tok_table, &ids)?;
        let pos = tape.gather_rows(pos_table, &positions)?;
        tape.add(tok, pos)
    }

    /// Causal forward pass recording every layer output.
    pub fn forward<'a>(&'a self, cfg: &ModelConfig, tape: &mut Tape<'a>, tokens: &[u32]) -> Result<BaseTrace, ModelError> {
        check_tokens(cfg, tokens)?;
        let embed = self.embed(tape, tokens)?;
        let mut x = embed;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = attention(layer, cfg, tape, x)?;
            x = tape.add(x, a)?;
            let n = layer.ff_norm.apply(tape, x)?;
            let u = layer.ff_in.apply(tape, n)?;
            let u = tape.gelu(u);
            let f = layer.ff_out.apply(tape, u)?;
            x = tape.add(x, f)?;
            layers.push(x);
        }
        Ok(BaseTrace { embed, layers })
    }

    /// Final norm followed by the output projection.
    pub fn head_logits<'a>(&'a self, tape: &mut Tape<'a>, h: NodeId) -> Result<NodeId, NumError> {
        let n = self.final_norm.apply(tape, h)?;
        self.head.apply(tape, n)
    }

    /// Next-token logits for every position of `tokens`, `T×V`.
    pub fn logits(&self, cfg: &ModelConfig, tokens: &[u32]) -> Result<Tensor, ModelError> {
        let mut tape = Tape::inference();
        let trace = self.forward(cfg, &mut tape, tokens)?;
        let logits = self.head_logits(&mut tape, trace.final_hidden())?;
        Ok(tape.to_tensor(logits))
    }

    /// Last-position activations after running `tokens` through the base.
    pub fn prefix_state(&self, cfg: &ModelConfig, tokens: &[u32]) -> Result<PrefixState, ModelError> {
        let mut tape = Tape::inference();
        let trace = self.forward(cfg, &mut tape, tokens)?;
        let d = cfg.d_model;
        let last = tokens.len() - 1;
        let row = |id: NodeId| tape.value(id)[last * d..(last + 1) * d].to_vec();
        Ok(PrefixState {
            embed: row(trace.embed),
            layers: trace.layers.iter().map(|&l| row(l)).collect(),
        })
    }
}

/// Last-position embedding and layer outputs for one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState {
    pub embed: Vec<f64>,
    pub layers: Vec<Vec<f64>>,
}

impl PrefixState {
    pub fn final_hidden(&self) -> &[f64] {
        self.layers.last().expect("at least one layer")
    }

    /// Rung inputs for a single position.
    pub fn rungs(&self, source: RungSource) -> Vec<&[f64]> {
        let n = self.layers.len();
        match source {
            RungSource::AllLayers => self.layers.iter().map(Vec::as_slice).collect(),
            RungSource::FinalOnly => vec![self.final_hidden(); n],
            RungSource::Embedding => vec![self.embed.as_slice(); n],
        }
    }
}

impl SideParams {
    /// Side output for one position given its rung inputs.
    pub fn forward_row(&self, rungs: &[&[f64]]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::inference();
        let nodes = rungs
            .iter()
            .map(|r| tape.constant(vec![1, r.len()], r.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = self.forward(&mut tape, &nodes)?;
        Ok(tape.value(out).to_vec())
    }

    /// Side output `T×d_model` from full base hiddens.
    pub fn side_forward(&self, hiddens: &[Tensor]) -> Result<Tensor, ModelError> {
        let mut tape = Tape::inference();
        let nodes = hiddens
            .iter()
            .map(|h| tape.constant(h.shape().to_vec(), h.data().to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = self.forward(&mut tape, &nodes)?;
        Ok(tape.to_tensor(out))
    }
}

impl GateParams {
    /// Gate logits for one position.
    pub fn logits_row(&self, base_final: &[f64]) -> [f64; 2] {
        let w = self.proj.weight.data();
        let b = self.proj.bias.data();
        let mut acc = [0.0; 2];
        for (k, x) in base_final.iter().enumerate() {
            acc[0] += x * w[k * 2];
            acc[1] += x * w[k * 2 + 1];
        }
        [acc[0] + b[0], acc[1] + b[1]]
    }

    pub fn decide(&self, base_final: &[f64]) -> u8 {
        hard_decision(&self.logits_row(base_final))
    }

    /// Gate logits `T×2` and probabilities via softmax.
    pub fn gate_logits(&self, base_final: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let mut tape = Tape::inference();
        let x = tape.constant(base_final.shape().to_vec(), base_final.data().to_vec())?;
        let logits = self.logits(&mut tape, x)?;
        let probs = tape.softmax(logits, 1)?;
        Ok((tape.to_tensor(logits), tape.to_tensor(probs)))
    }
}

/// Output head usable without the transformer layers.
pub fn logits_row(final_norm: &LayerNorm, head: &Linear, h: &[f64]) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::inference();
    let x = tape.constant(vec![1, h.len()], h.to_vec())?;
    let n = final_norm.apply(&mut tape, x)?;
    let out = head.apply(&mut tape, n)?;
    Ok(tape.value(out).to_vec())
}

/// `H = base + σ·side` row by row. Rows with `σ == 0` copy the base exactly.
pub fn fuse(base_final: &Tensor, side_out: &Tensor, sigma: &[f64]) -> Result<Tensor, ModelError> {
    if base_final.shape() != side_out.shape() || base_final.shape().len() != 2 {
        return Err(NumError::Shape {
            op: "fuse",
            left: base_final.shape().to_vec(),
            right: side_out.shape().to_vec(),
        }
        .into());
    }
    if sigma.len() != base_final.rows() {
        return Err(NumError::Shape {
            op: "fuse",
            left: base_final.shape().to_vec(),
            right: vec![sigma.len()],
        }
        .into());
    }
    let mut out = base_final.data().to_vec();
    let d = base_final.cols();
    for (t, &s) in sigma.iter().enumerate() {
        fuse_row(&mut out[t * d..(t + 1) * d], &side_out.data()[t * d..(t + 1) * d], s);
    }
    Ok(Tensor::new(base_final.shape().to_vec(), out)?)
}

/// In-place fusion of a single row.
pub fn fuse_row(base: &mut [f64], side: &[f64], sigma: f64) {
    if sigma == 0.0 {
        return;
    }
    if sigma == 1.0 {
        base.iter_mut().zip(side).for_each(|(b, s)| *b += s);
    } else {
        base.iter_mut().zip(side).for_each(|(b, s)| *b += sigma * s);
    }
}

/// Log-probabilities of `targets` under each row of `logits`.
pub fn target_log_probs(logits: &Tensor, targets: &[u32]) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row = logits.row(t);
            row[y as usize] - kernels::log_sum_exp(row)
        })
        .collect()
}
