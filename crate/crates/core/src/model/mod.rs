//! Frozen base transformer, ladder side network, token-level gate and their fusion.
//!
//! The base produces per-layer hiddens `f_1..f_L`. The side network reads
//! those hiddens through per-layer down-projections and returns a `d_model`
//! correction. The gate looks at the final base hidden of each position and
//! decides whether the correction is added: `H = f_L + σ·side`. Logits are
//! always produced from `H` by the frozen output head.

mod config;
mod forward;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numcore::{finite_difference_check, GradCheckReport, NodeId, NumError, Tape, Tensor};

pub use config::ModelConfig;
pub(crate) use forward::check_tokens;
pub use forward::{fuse, fuse_row, logits_row, target_log_probs, BaseTrace, PrefixState, RungSource};
pub use params::{
    checksum, count, hard_decision, BaseLayer, BaseParams, GateParams, LayerNorm, Linear, SideBlock, SideParams,
    SizeAudit,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Weights of the auxiliary terms in the side/gate training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    /// Multiplies the mean probability of consulting the side path.
    pub usage_penalty: f64,
    /// Multiplies the gate classification loss.
    pub gate_weight: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            usage_penalty: 0.01,
            gate_weight: 1.0,
        }
    }
}

/// How the gate enters the objective.
#[derive(Debug, Clone, Copy)]
pub enum GateTarget<'l> {
    /// Soft gate in the fusion, plus a classification loss against these labels.
    Labels(&'l [usize]),
    /// Side output always added; the gate is not involved.
    AlwaysOn,
}

/// Node handles of the pieces of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub token_loss: NodeId,
    pub gate_loss: Option<NodeId>,
    pub usage: Option<NodeId>,
    pub total: NodeId,
}

/// Per-position record of one full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub base_hiddens: Vec<Tensor>,
    pub side_output: Tensor,
    pub gate_logits: Tensor,
    pub gate_probs: Tensor,
    pub decisions: Vec<u8>,
    pub base_logits: Tensor,
    pub fused_logits: Tensor,
}

/// How the side output enters the fused hidden during scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `σ = 0` everywhere.
    Off,
    /// Hard decision from the gate classifier.
    Classifier,
    /// `σ = 1` everywhere.
    On,
    /// No transformer layers: the side network reads the embedding and is added to it.
    EmbeddingOnly,
}

/// Per-position negative log-likelihoods and gate decisions from one teacher-forced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForced {
    pub nll: Vec<f64>,
    pub sigma: Vec<u8>,
}

impl TeacherForced {
    pub fn total_nll(&self) -> f64 {
        self.nll.iter().sum()
    }
}

/// Base activations of one document, kept so the frozen base runs once.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedTrace {
    pub embed: Tensor,
    pub layers: Vec<Tensor>,
    pub targets: Vec<usize>,
}

/// Base parameters, side parameters and gate parameters of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaModel {
    pub config: ModelConfig,
    pub base: BaseParams,
    pub side: SideParams,
    pub gate: GateParams,
}

/// Teacher-forcing split: inputs `x_0..x_{n-2}`, targets `x_1..x_{n-1}`.
pub fn shift(tokens: &[u32]) -> Result<(&[u32], Vec<usize>), ModelError> {
    if tokens.len() < 2 {
        return Err(ModelError::Contract(format!(
            "teacher forcing needs at least 2 tokens, got {}",
            tokens.len()
        )));
    }
    let targets = tokens[1..].iter().map(|&t| t as usize).collect();
    Ok((&tokens[..tokens.len() - 1], targets))
}

/// Digest binding a side network to the exact base it was trained against.
pub fn model_digest(config: &ModelConfig, base_checksum: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(config.canonical_json().as_bytes());
    h.update([0u8]);
    h.update(base_checksum.as_bytes());
    h.finalize().into()
}

impl SpaModel {
    /// Fresh model with every network randomly initialised; the base is frozen.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = BaseParams::init(&config, &mut rng);
        Self::from_base(config, base, seed)
    }

    /// Wraps a pretrained base with a new side network and gate.
    pub fn from_base(config: ModelConfig, mut base: BaseParams, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        base.set_frozen(true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_51de);
        let side = SideParams::init(&config, &mut rng);
        let gate = GateParams::init(&config, &mut rng);
        Ok(Self {
            config,
            base,
            side,
            gate,
        })
    }

    pub fn digest(&self) -> [u8; 32] {
        model_digest(&self.config, &self.base.checksum())
    }

    pub fn size_audit(&self) -> SizeAudit {
        SizeAudit {
            base: count(&self.base.named()),
            side: count(&self.side.named()),
            gate: count(&self.gate.named()),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut all = self.base.named();
        all.extend(self.side.named());
        all.extend(self.gate.named());
        all
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut all = self.base.named_mut();
        all.extend(self.side.named_mut());
        all.extend(self.gate.named_mut());
        all
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Names of the side and gate tensors, the only trainable ones.
    pub fn trainable_names(&self) -> Vec<String> {
        self.side
            .named()
            .into_iter()
            .chain(self.gate.named())
            .map(|(n, _)| n)
            .collect()
    }

    /// Base-only next-token logits, `T×V`.
    pub fn base_logits(&self, tokens: &[u32]) -> Result<Tensor, ModelError> {
        self.base.logits(&self.config, tokens)
    }

    /// Base, side and gate activations for every position of `tokens`.
    pub fn trace(&self, tokens: &[u32]) -> Result<ForwardTrace, ModelError> {
        let mut tape = Tape::inference();
        let bt = self.base.forward(&self.config, &mut tape, tokens)?;
        let fin = bt.final_hidden();
        let side = self.side.forward(&mut tape, &bt.rungs(RungSource::AllLayers))?;
        let gl = self.gate.logits(&mut tape, fin)?;
        let gp = tape.softmax(gl, 1)?;
        let base_logits = self.base.head_logits(&mut tape, fin)?;
        let gate_logits = tape.to_tensor(gl);
        let decisions: Vec<u8> = (0..tokens.len()).map(|t| hard_decision(gate_logits.row(t))).collect();
        let side_output = tape.to_tensor(side);
        let fin_t = tape.to_tensor(fin);
        let sigma: Vec<f64> = decisions.iter().map(|&d| f64::from(d)).collect();
        let fused = fuse(&fin_t, &side_output, &sigma)?;
        let fused_logits = {
            let mut t2 = Tape::inference();
            let h = t2.constant(fused.shape().to_vec(), fused.data().to_vec())?;
            let l = self.base.head_logits(&mut t2, h)?;
            t2.to_tensor(l)
        };
        Ok(ForwardTrace {
            base_hiddens: bt.layers.iter().map(|&l| tape.to_tensor(l)).collect(),
            side_output,
            gate_probs: tape.to_tensor(gp),
            gate_logits,
            decisions,
            base_logits: tape.to_tensor(base_logits),
            fused_logits,
        })
    }

    /// Builds the objective on `tape` from an existing base trace.
    pub fn objective<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        trace: &BaseTrace,
        targets: &[usize],
        gate: GateTarget<'_>,
        weights: ObjectiveWeights,
    ) -> Result<Objective, ModelError> {
        let fin = trace.final_hidden();
        let side = self.side.forward(tape, &trace.rungs(RungSource::AllLayers))?;
        match gate {
            GateTarget::Labels(labels) => {
                let gl = self.gate.logits(tape, fin)?;
                let gp = tape.softmax(gl, 1)?;
                let p_side = tape.slice_cols(gp, 1, 2)?;
                let scaled = tape.scale_rows(side, p_side)?;
                let h = tape.add(fin, scaled)?;
                let logits = self.base.head_logits(tape, h)?;
                let token_loss = tape.cross_entropy(logits, targets)?;
                let gate_loss = tape.cross_entropy(gl, labels)?;
                let usage = tape.mean(p_side);
                let g = tape.scale(gate_loss, weights.gate_weight);
                let u = tape.scale(usage, weights.usage_penalty);
                let aux = tape.add(g, u)?;
                let total = tape.add(token_loss, aux)?;
                Ok(Objective {
                    token_loss,
                    gate_loss: Some(gate_loss),
                    usage: Some(usage),
                    total,
                })
            }
            GateTarget::AlwaysOn => {
                let h = tape.add(fin, side)?;
                let logits = self.base.head_logits(tape, h)?;
                let token_loss = tape.cross_entropy(logits, targets)?;
                Ok(Objective {
                    token_loss,
                    gate_loss: None,
                    usage: None,
                    total: token_loss,
                })
            }
        }
    }

    /// Teacher-forced mean negative log-likelihood through the soft gate.
    pub fn token_loss(&self, tokens: &[u32]) -> Result<f64, ModelError> {
        let (inputs, targets) = shift(tokens)?;
        let mut tape = Tape::inference();
        let trace = self.base.forward(&self.config, &mut tape, inputs)?;
        let fin = trace.final_hidden();
        let side = self.side.forward(&mut tape, &trace.rungs(RungSource::AllLayers))?;
        let gl = self.gate.logits(&mut tape, fin)?;
        let gp = tape.softmax(gl, 1)?;
        let p_side = tape.slice_cols(gp, 1, 2)?;
        let scaled = tape.scale_rows(side, p_side)?;
        let h = tape.add(fin, scaled)?;
        let logits = self.base.head_logits(&mut tape, h)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        Ok(tape.scalar(loss))
    }

    /// Per-position gain in target log-probability from adding the side output.
    pub fn cate_estimate(&self, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
        let (inputs, targets) = shift(tokens)?;
        let mut tape = Tape::inference();
        let trace = self.base.forward(&self.config, &mut tape, inputs)?;
        self.cate_from_trace(&mut tape, &trace, &targets)
    }

    /// CATE on an existing trace; `targets[t]` is the token after position `t`.
    pub fn cate_from_trace<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        trace: &BaseTrace,
        targets: &[usize],
    ) -> Result<Vec<f64>, ModelError> {
        let fin = trace.final_hidden();
        let side = self.side.forward(tape, &trace.rungs(RungSource::AllLayers))?;
        let on = tape.add(fin, side)?;
        let logits_on = self.base.head_logits(tape, on)?;
        let logits_off = self.base.head_logits(tape, fin)?;
        let targets: Vec<u32> = targets.iter().map(|&t| t as u32).collect();
        let lp_on = target_log_probs(&tape.to_tensor(logits_on), &targets);
        let lp_off = target_log_probs(&tape.to_tensor(logits_off), &targets);
        Ok(lp_on.iter().zip(&lp_off).map(|(a, b)| a - b).collect())
    }

    /// Runs the frozen base over `tokens[..n-1]` and keeps its activations.
    pub fn cache_trace(&self, tokens: &[u32]) -> Result<CachedTrace, ModelError> {
        let (inputs, targets) = shift(tokens)?;
        let mut tape = Tape::inference();
        let trace = self.base.forward(&self.config, &mut tape, inputs)?;
        Ok(CachedTrace {
            embed: tape.to_tensor(trace.embed),
            layers: trace.layers.iter().map(|&l| tape.to_tensor(l)).collect(),
            targets,
        })
    }

    pub fn teacher_forced(&self, tokens: &[u32], mode: GateMode) -> Result<TeacherForced, ModelError> {
        self.teacher_forced_cached(&self.cache_trace(tokens)?, mode)
    }

    pub fn teacher_forced_cached(&self, cached: &CachedTrace, mode: GateMode) -> Result<TeacherForced, ModelError> {
        let fin = cached.layers.last().expect("at least one layer");
        let n = cached.targets.len();
        let (h, sigma) = match mode {
            GateMode::Off => (fin.clone(), vec![0; n]),
            GateMode::On => {
                let side = self.side.side_forward(&cached.layers)?;
                (fuse(fin, &side, &vec![1.0; n])?, vec![1; n])
            }
            GateMode::Classifier => {
                let (logits, _) = self.gate.gate_logits(fin)?;
                let sigma: Vec<u8> = (0..n).map(|t| hard_decision(logits.row(t))).collect();
                let side = self.side.side_forward(&cached.layers)?;
                let s: Vec<f64> = sigma.iter().map(|&d| f64::from(d)).collect();
                (fuse(fin, &side, &s)?, sigma)
            }
            GateMode::EmbeddingOnly => {
                let rungs = vec![cached.embed.clone(); cached.layers.len()];
                let side = self.side.side_forward(&rungs)?;
                (fuse(&cached.embed, &side, &vec![1.0; n])?, vec![1; n])
            }
        };
        let mut tape = Tape::inference();
        let hn = tape.constant(h.shape().to_vec(), h.data().to_vec())?;
        let l = self.base.head_logits(&mut tape, hn)?;
        let targets: Vec<u32> = cached.targets.iter().map(|&t| t as u32).collect();
        let nll = target_log_probs(&tape.to_tensor(l), &targets).into_iter().map(|v| -v).collect();
        Ok(TeacherForced { nll, sigma })
    }

    /// Finite-difference check of every side and gate parameter on the full objective.
    ///
    /// Gate labels are derived once at the unperturbed point and held fixed,
    /// exactly as during a training step.
    pub fn check_trainable_gradients(
        &self,
        tokens: &[u32],
        margin: f64,
        weights: ObjectiveWeights,
        h: f64,
        tol: f64,
    ) -> Result<GradCheckReport, ModelError> {
        let (inputs, targets) = shift(tokens)?;
        let labels: Vec<usize> = gate_labels(&self.cate_estimate(tokens)?, margin);

        let mut work = self.clone();
        work.side.set_trainable(true);
        work.gate.set_trainable(true);
        let names = work.trainable_names();

        let analytic: Vec<(String, Vec<f64>)> = {
            let mut tape = Tape::new();
            let trace = work.base.forward(&work.config, &mut tape, inputs)?;
            let obj = work.objective(&mut tape, &trace, &targets, GateTarget::Labels(&labels), weights)?;
            tape.backward(obj.total)?;
            // Leaves are recorded in `named()` order on first use; recover them by value identity.
            let mut found = Vec::new();
            for (name, t) in work.side.named().into_iter().chain(work.gate.named()) {
                found.push((name, leaf_grad(&tape, t)));
            }
            found
        };

        let eval = |m: &SpaModel| -> f64 {
            let mut tape = Tape::inference();
            let mut run = || -> Result<f64, ModelError> {
                let trace = m.base.forward(&m.config, &mut tape, inputs)?;
                let obj = m.objective(&mut tape, &trace, &targets, GateTarget::Labels(&labels), weights)?;
                Ok(tape.scalar(obj.total))
            };
            run().unwrap_or(f64::NAN)
        };

        let mut report: Option<GradCheckReport> = None;
        for (name, grad) in analytic {
            debug_assert!(names.contains(&name));
            let x = work.param_mut(&name).expect("named param").data().to_vec();
            let r = finite_difference_check(
                |probe| {
                    work.param_mut(&name).expect("named param").data_mut().copy_from_slice(probe);
                    eval(&work)
                },
                &x,
                &grad,
                h,
                tol,
            );
            work.param_mut(&name).expect("named param").data_mut().copy_from_slice(&x);
            match report.as_mut() {
                Some(acc) => acc.merge(r),
                None => report = Some(r),
            }
        }
        Ok(report.expect("model has trainable parameters"))
    }
}

/// Sum of gradients of every leaf that borrows `t`'s storage.
pub(crate) fn leaf_grad(tape: &Tape<'_>, t: &Tensor) -> Vec<f64> {
    let mut g = vec![0.0; t.len()];
    for id in tape.leaves_of(t) {
        if let Some(v) = tape.grad(id) {
            g.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
    }
    g
}

/// Gate label per position: 1 iff the side path raises the target log-probability by more than `margin`.
pub fn gate_labels(cate: &[f64], margin: f64) -> Vec<usize> {
    cate.iter().map(|&d| usize::from(d > margin)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::kernels;
    use rand::Rng;

    fn toy() -> SpaModel {
        SpaModel::new(ModelConfig::toy(), 7).unwrap()
    }

    fn tokens(n: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..256)).collect()
    }

    #[test]
    fn single_token_logits_shape() {
        let m = toy();
        let l = m.base_logits(&[65]).unwrap();
        assert_eq!(l.shape(), &[1, m.config.vocab_size]);
        assert!(l.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn token_out_of_range_is_an_index_error() {
        let m = toy();
        assert!(matches!(
            m.base_logits(&[1000]),
            Err(ModelError::TokenOutOfRange { token: 1000, .. })
        ));
        let long = vec![1u32; m.config.max_seq_len + 1];
        assert!(matches!(m.base_logits(&long), Err(ModelError::SequenceTooLong { .. })));
    }

    #[test]
    fn duplicated_prompt_rows_identical() {
        let m = toy();
        let t = tokens(9, 1);
        let a = m.base_logits(&t).unwrap();
        let b = m.base_logits(&t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causal_prefix_rows_match() {
        let m = toy();
        let t = tokens(9, 2);
        let full = m.base_logits(&t).unwrap();
        let prefix = m.base_logits(&t[..4]).unwrap();
        for r in 0..4 {
            for (a, b) in full.row(r).iter().zip(prefix.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_head_gives_ln_vocab_loss() {
        let mut m = toy();
        m.base.head = Linear::zeros(m.config.d_model, m.config.vocab_size);
        m.side = SideParams::zeros(&m.config);
        let loss = m.token_loss(&tokens(12, 3)).unwrap();
        assert!((loss - (m.config.vocab_size as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_side_outputs_zero() {
        let mut m = toy();
        m.side = SideParams::zeros(&m.config);
        let tr = m.trace(&tokens(5, 4)).unwrap();
        assert_eq!(tr.side_output.shape(), &[5, m.config.d_model]);
        assert!(tr.side_output.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn side_needs_every_layer_hidden() {
        let m = toy();
        let tr = m.trace(&tokens(3, 5)).unwrap();
        assert!(matches!(
            m.side.side_forward(&tr.base_hiddens[..1]),
            Err(ModelError::Num(NumError::Contract(_)))
        ));
    }

    #[test]
    fn side_output_responds_to_each_layer_hidden() {
        let m = toy();
        let tr = m.trace(&tokens(5, 6)).unwrap();
        let base_out = m.side.side_forward(&tr.base_hiddens).unwrap();
        for layer in 0..tr.base_hiddens.len() {
            let mut perturbed = tr.base_hiddens.clone();
            perturbed[layer].data_mut()[3] += 1e-4;
            let out = m.side.side_forward(&perturbed).unwrap();
            let diff: f64 = out.data().iter().zip(base_out.data()).map(|(a, b)| (a - b).abs()).sum();
            assert!(diff > 0.0, "layer {layer} has no influence");
        }
    }

    #[test]
    fn side_row_matches_full_pass() {
        let m = toy();
        let t = tokens(6, 7);
        let tr = m.trace(&t).unwrap();
        let state = m.base.prefix_state(&m.config, &t).unwrap();
        let row = m.side.forward_row(&state.rungs(RungSource::AllLayers)).unwrap();
        for (a, b) in row.iter().zip(tr.side_output.row(5)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_zero_weights_are_even() {
        let m = toy();
        let g = GateParams::zeros(&m.config);
        let tr = m.trace(&tokens(4, 8)).unwrap();
        let (_, probs) = g.gate_logits(tr.base_hiddens.last().unwrap()).unwrap();
        assert!(probs.data().iter().all(|p| *p == 0.5));
        // tie goes to the base path
        assert_eq!(g.decide(tr.base_hiddens.last().unwrap().row(0)), 0);
    }

    #[test]
    fn gate_bias_forces_side() {
        let m = toy();
        let mut g = GateParams::zeros(&m.config);
        g.proj.bias.data_mut()[1] = 10.0;
        let tr = m.trace(&tokens(4, 9)).unwrap();
        let fin = tr.base_hiddens.last().unwrap();
        assert!((0..4).all(|t| g.decide(fin.row(t)) == 1));
    }

    #[test]
    fn gate_decision_invariant_under_positive_scaling_and_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..500 {
            let l = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let c: f64 = rng.random_range(1e-3..1e3);
            let s: f64 = rng.random_range(-50.0..50.0);
            assert_eq!(hard_decision(&l), hard_decision(&[l[0] * c, l[1] * c]));
            assert_eq!(hard_decision(&l), hard_decision(&[l[0] + s, l[1] + s]));
        }
    }

    #[test]
    fn fuse_cases() {
        let base = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.25, 3.0]).unwrap();
        let side = Tensor::new(vec![2, 2], vec![0.5, 0.5, -1.0, 2.0]).unwrap();
        assert_eq!(fuse(&base, &side, &[0.0, 0.0]).unwrap(), base);
        let on = fuse(&base, &side, &[1.0, 1.0]).unwrap();
        assert_eq!(on.data(), &[1.5, -1.5, -0.75, 5.0]);
        let half = fuse(&base, &base, &[0.5, 0.5]).unwrap();
        let want: Vec<f64> = base.data().iter().map(|v| 1.5 * v).collect();
        assert_eq!(half.data(), want.as_slice());
        let bad = Tensor::zeros(vec![3, 2]);
        assert!(fuse(&base, &bad, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn gate_off_fused_logits_equal_base_logits() {
        let m = toy();
        let t = tokens(10, 11);
        let tr = m.trace(&t).unwrap();
        let fin = tr.base_hiddens.last().unwrap();
        let h = fuse(fin, &tr.side_output, &[0.0; 10]).unwrap();
        let mut tape = Tape::inference();
        let hn = tape.constant(h.shape().to_vec(), h.data().to_vec()).unwrap();
        let l = m.base.head_logits(&mut tape, hn).unwrap();
        let fused = tape.to_tensor(l);
        assert_eq!(
            fused.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            tr.base_logits.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn token_loss_reduces_to_base_cross_entropy() {
        let mut m = toy();
        m.side = SideParams::zeros(&m.config);
        m.gate.proj.bias.data_mut().copy_from_slice(&[50.0, -50.0]);
        let t = tokens(16, 12);
        let (inputs, targets) = shift(&t).unwrap();
        let logits = m.base_logits(inputs).unwrap();
        let mut tape = Tape::inference();
        let l = tape.input(logits);
        let ce = tape.cross_entropy(l, &targets).unwrap();
        let loss = m.token_loss(&t).unwrap();
        assert!((loss - tape.scalar(ce)).abs() < 1e-12);
    }

    #[test]
    fn token_loss_matches_independent_evaluation() {
        let m = toy();
        let t = tokens(14, 13);
        let loss = m.token_loss(&t).unwrap();
        assert!(loss >= 0.0);
        // Recompute from the trace: soft gate, fusion, head, log-sum-exp.
        let (inputs, targets) = shift(&t).unwrap();
        let tr = m.trace(inputs).unwrap();
        let fin = tr.base_hiddens.last().unwrap();
        let d = m.config.d_model;
        let mut total = 0.0;
        for (pos, &y) in targets.iter().enumerate() {
            let p_side = tr.gate_probs.row(pos)[1];
            let h: Vec<f64> = (0..d)
                .map(|c| fin.row(pos)[c] + p_side * tr.side_output.row(pos)[c])
                .collect();
            let logits = logits_row(&m.base.final_norm, &m.base.head, &h).unwrap();
            total += kernels::log_sum_exp(&logits) - logits[y];
        }
        let want = total / targets.len() as f64;
        assert!((loss - want).abs() < 1e-10, "{loss} vs {want}");
    }

    #[test]
    fn token_loss_needs_two_tokens() {
        let m = toy();
        assert!(matches!(m.token_loss(&[5]), Err(ModelError::Contract(_))));
    }

    #[test]
    fn cate_zero_for_zero_side_and_deterministic() {
        let mut m = toy();
        let t = tokens(11, 14);
        let a = m.cate_estimate(&t).unwrap();
        assert_eq!(a, m.cate_estimate(&t).unwrap());
        assert_eq!(a.len(), 10);
        m.side = SideParams::zeros(&m.config);
        assert!(m.cate_estimate(&t).unwrap().iter().all(|d| *d == 0.0));
    }

    #[test]
    fn cate_matches_per_position_brute_force() {
        let m = toy();
        let t = tokens(9, 15);
        let cate = m.cate_estimate(&t).unwrap();
        for pos in 0..t.len() - 1 {
            let state = m.base.prefix_state(&m.config, &t[..=pos]).unwrap();
            let side = m.side.forward_row(&state.rungs(RungSource::AllLayers)).unwrap();
            let mut on = state.final_hidden().to_vec();
            fuse_row(&mut on, &side, 1.0);
            let lp = |h: &[f64]| {
                let l = logits_row(&m.base.final_norm, &m.base.head, h).unwrap();
                l[t[pos + 1] as usize] - kernels::log_sum_exp(&l)
            };
            let want = lp(&on) - lp(state.final_hidden());
            assert!((cate[pos] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn every_trainable_tensor_receives_gradient() {
        let mut hits = 0;
        let trials = 40;
        for seed in 0..trials {
            let m = SpaModel::new(ModelConfig::toy(), 100 + seed).unwrap();
            let t = tokens(12, 200 + seed);
            let (inputs, targets) = shift(&t).unwrap();
            let labels = vec![0usize; targets.len()];
            let mut tape = Tape::new();
            let trace = m.base.forward(&m.config, &mut tape, inputs).unwrap();
            let obj = m
                .objective(&mut tape, &trace, &targets, GateTarget::Labels(&labels), ObjectiveWeights {
                    usage_penalty: 0.0,
                    gate_weight: 0.0,
                })
                .unwrap();
            tape.backward(obj.token_loss).unwrap();
            let all_live = m
                .side
                .named()
                .into_iter()
                .chain(m.gate.named())
                .all(|(_, t)| leaf_grad(&tape, t).iter().any(|g| *g != 0.0));
            if all_live {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * trials as f64, "{hits}/{trials}");
    }

    #[test]
    fn base_receives_no_gradient() {
        let m = toy();
        let t = tokens(8, 16);
        let (inputs, targets) = shift(&t).unwrap();
        let labels = vec![1usize; targets.len()];
        let mut tape = Tape::new();
        let trace = m.base.forward(&m.config, &mut tape, inputs).unwrap();
        let obj = m
            .objective(&mut tape, &trace, &targets, GateTarget::Labels(&labels), ObjectiveWeights::default())
            .unwrap();
        tape.backward(obj.total).unwrap();
        for (name, t) in m.base.named() {
            assert!(tape.leaves_of(t).iter().all(|&id| tape.grad(id).is_none()), "{name}");
        }
    }

    #[test]
    fn objective_gradients_pass_finite_differences() {
        let m = toy();
        let report = m
            .check_trainable_gradients(&tokens(8, 17), 0.0, ObjectiveWeights::default(), 1e-5, 1e-4)
            .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn side_is_small_relative_to_base_at_default_size() {
        let m = SpaModel::new(ModelConfig::default(), 1).unwrap();
        let audit = m.size_audit();
        assert!(audit.side_percent() <= 5.0, "{}", audit.side_percent());
        assert_eq!(audit.gate, m.config.d_model * 2 + 2);
    }

    #[test]
    fn digest_depends_on_base() {
        let a = toy();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.base.head.bias.data_mut()[0] += 1.0;
        assert_ne!(a.digest(), b.digest());
    }
}
