use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{fuse_row, logits_row, GateMode, ModelConfig, PrefixState, RungSource, SideParams, SpaModel};
use crate::numcore::kernels::log_softmax;
use crate::train::EOS;

use super::RuntimeError;

/// Who decides, per token, whether the side output is fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatingPolicy {
    /// The gate classifier decides.
    SpaClassifier,
    /// Side output fused at every step.
    AlwaysSide,
    /// Everything on the device, from embeddings; no cloud contact.
    DeviceOnly,
    /// Side output fused at every step, from a ladder network trained without a gate.
    Lst,
    BaseOnly,
}

impl GatingPolicy {
    pub const ALL: [GatingPolicy; 5] = [
        GatingPolicy::SpaClassifier,
        GatingPolicy::AlwaysSide,
        GatingPolicy::DeviceOnly,
        GatingPolicy::Lst,
        GatingPolicy::BaseOnly,
    ];

    pub fn code(self) -> u8 {
        match self {
            GatingPolicy::SpaClassifier => 0,
            GatingPolicy::AlwaysSide => 1,
            GatingPolicy::DeviceOnly => 2,
            GatingPolicy::Lst => 3,
            GatingPolicy::BaseOnly => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.code() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            GatingPolicy::SpaClassifier => "spa",
            GatingPolicy::AlwaysSide => "always-side",
            GatingPolicy::DeviceOnly => "device-only",
            GatingPolicy::Lst => "lst",
            GatingPolicy::BaseOnly => "base-only",
        }
    }

    /// Scoring mode with the same fusion rule.
    pub fn gate_mode(self) -> GateMode {
        match self {
            GatingPolicy::SpaClassifier => GateMode::Classifier,
            GatingPolicy::AlwaysSide | GatingPolicy::Lst => GateMode::On,
            GatingPolicy::DeviceOnly => GateMode::EmbeddingOnly,
            GatingPolicy::BaseOnly => GateMode::Off,
        }
    }
}

impl fmt::Display for GatingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GatingPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown policy '{s}' (expected spa, lst, base-only, always-side or device-only)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
}

impl Strategy {
    pub fn code(self) -> u8 {
        match self {
            Strategy::Greedy => 0,
            Strategy::Beam => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Strategy::Greedy),
            1 => Some(Strategy::Beam),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    pub beam_width: usize,
    pub policy: GatingPolicy,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 50,
            strategy: Strategy::Greedy,
            beam_width: 4,
            policy: GatingPolicy::SpaClassifier,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.beam_width == 0 {
            return Err(RuntimeError::Contract("beam_width must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where side outputs come from during a decode.
pub trait SidePath {
    /// Called once per model evaluation with the decision for that step.
    fn gate(&mut self, _step: u64, _sigma: u8) -> Result<(), RuntimeError> {
        Ok(())
    }

    /// Side output for the current position; only called when `σ = 1`.
    fn side(&mut self, step: u64, state: &PrefixState) -> Result<Vec<f64>, RuntimeError>;

    /// Called for each token of the result, in order.
    fn token(&mut self, _index: u64, _token: u32) -> Result<(), RuntimeError> {
        Ok(())
    }
}

/// Side network evaluated in-process.
pub struct LocalSide<'m> {
    pub side: &'m SideParams,
    pub source: RungSource,
}

impl SidePath for LocalSide<'_> {
    fn side(&mut self, _step: u64, state: &PrefixState) -> Result<Vec<f64>, RuntimeError> {
        Ok(self.side.forward_row(&state.rungs(self.source))?)
    }
}

/// Embedding of the last position of `prefix`, without any transformer layer.
pub fn embedding_row(model: &SpaModel, prefix: &[u32]) -> Vec<f64> {
    let pos = prefix.len() - 1;
    let tok = model.base.tok_emb.row(prefix[pos] as usize);
    let p = model.base.pos_emb.row(pos);
    tok.iter().zip(p).map(|(a, b)| a + b).collect()
}

/// Evaluates next-token log-probabilities one prefix at a time.
pub struct Stepper<'m> {
    model: &'m SpaModel,
    policy: GatingPolicy,
    next_step: u64,
    sigma: Vec<u8>,
}

impl<'m> Stepper<'m> {
    pub fn new(model: &'m SpaModel, policy: GatingPolicy) -> Self {
        Self {
            model,
            policy,
            next_step: 0,
            sigma: Vec::new(),
        }
    }

    fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn sigma_trace(&self) -> &[u8] {
        &self.sigma
    }

    pub fn into_sigma_trace(self) -> Vec<u8> {
        self.sigma
    }

    pub fn log_probs(&mut self, prefix: &[u32], path: &mut dyn SidePath) -> Result<Vec<f64>, RuntimeError> {
        let m = self.model;
        let step = self.next_step;
        self.next_step += 1;
        let h = if self.policy == GatingPolicy::DeviceOnly {
            crate::model::check_tokens(self.config(), prefix)?;
            let e = embedding_row(m, prefix);
            let rungs = vec![e.as_slice(); self.config().n_layers];
            let side = m.side.forward_row(&rungs)?;
            let mut h = e.clone();
            fuse_row(&mut h, &side, 1.0);
            self.sigma.push(1);
            h
        } else {
            let state = m.base.prefix_state(self.config(), prefix)?;
            let sigma = match self.policy {
                GatingPolicy::SpaClassifier => m.gate.decide(state.final_hidden()),
                GatingPolicy::AlwaysSide | GatingPolicy::Lst => 1,
                GatingPolicy::BaseOnly => 0,
                GatingPolicy::DeviceOnly => unreachable!("handled above"),
            };
            path.gate(step, sigma)?;
            self.sigma.push(sigma);
            let mut h = state.final_hidden().to_vec();
            if sigma == 1 {
                let side = path.side(step, &state)?;
                if side.len() != h.len() {
                    return Err(RuntimeError::Protocol(format!(
                        "side output has {} values, expected {}",
                        side.len(),
                        h.len()
                    )));
                }
                fuse_row(&mut h, &side, 1.0);
            }
            h
        };
        let logits = logits_row(&m.base.final_norm, &m.base.head, &h)?;
        Ok(log_softmax(&logits))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    /// One entry per model evaluation, in evaluation order.
    pub sigma_trace: Vec<u8>,
    /// Sum of token log-probabilities divided by the number of generated tokens.
    pub score: f64,
}

fn check_prompt(cfg: &ModelConfig, prompt: &[u32]) -> Result<(), RuntimeError> {
    crate::model::check_tokens(cfg, prompt)?;
    Ok(())
}

pub fn greedy(
    stepper: &mut Stepper<'_>,
    prompt: &[u32],
    max_new: usize,
    path: &mut dyn SidePath,
) -> Result<(Vec<u32>, f64), RuntimeError> {
    check_prompt(stepper.config(), prompt)?;
    let max_len = stepper.config().max_seq_len;
    let mut seq = prompt.to_vec();
    let mut total = 0.0;
    let mut generated = Vec::new();
    while generated.len() < max_new && seq.len() <= max_len {
        let lp = stepper.log_probs(&seq, path)?;
        let tok = argmax(&lp) as u32;
        total += lp[tok as usize];
        path.token(generated.len() as u64, tok)?;
        generated.push(tok);
        seq.push(tok);
        if tok == EOS {
            break;
        }
    }
    let score = if generated.is_empty() {
        0.0
    } else {
        total / generated.len() as f64
    };
    Ok((generated, score))
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    log_prob: f64,
}

impl Hypothesis {
    fn score(&self) -> f64 {
        self.log_prob / self.tokens.len() as f64
    }
}

/// Higher length-normalised score first; equal scores in ascending token-id order.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search keeping the `width` best extensions per step; finished hypotheses leave the beam.
pub fn beam_search(
    stepper: &mut Stepper<'_>,
    prompt: &[u32],
    width: usize,
    max_new: usize,
    path: &mut dyn SidePath,
) -> Result<(Vec<u32>, f64), RuntimeError> {
    if width == 0 {
        return Err(RuntimeError::Contract("beam_width must be at least 1".into()));
    }
    check_prompt(stepper.config(), prompt)?;
    let max_len = stepper.config().max_seq_len;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_new {
        if live.is_empty() {
            break;
        }
        let mut candidates = Vec::with_capacity(live.len() * stepper.config().vocab_size);
        for h in &live {
            let mut seq = prompt.to_vec();
            seq.extend_from_slice(&h.tokens);
            let lp = stepper.log_probs(&seq, path)?;
            for (tok, l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + l,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(width);
        live.clear();
        for c in candidates {
            let full = prompt.len() + c.tokens.len() > max_len;
            if c.tokens.last() == Some(&EOS) || full {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    finished.extend(live);
    finished.sort_by(rank);
    let best = finished.into_iter().next();
    Ok(best.map_or((Vec::new(), 0.0), |h| {
        let s = h.score();
        (h.tokens, s)
    }))
}

/// Runs `cfg.strategy` and reports every result token to `path`.
pub fn run_decode(
    stepper: &mut Stepper<'_>,
    prompt: &[u32],
    cfg: &DecodeConfig,
    path: &mut dyn SidePath,
) -> Result<(Vec<u32>, f64), RuntimeError> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Greedy => greedy(stepper, prompt, cfg.max_new_tokens, path),
        Strategy::Beam => {
            let (tokens, score) = beam_search(stepper, prompt, cfg.beam_width, cfg.max_new_tokens, path)?;
            for (i, &t) in tokens.iter().enumerate() {
                path.token(i as u64, t)?;
            }
            Ok((tokens, score))
        }
    }
}

/// Split-path mathematics executed in one process.
pub fn decode_monolithic(
    model: &SpaModel,
    prompt: &[u32],
    cfg: &DecodeConfig,
    source: RungSource,
) -> Result<DecodeOutput, RuntimeError> {
    let mut stepper = Stepper::new(model, cfg.policy);
    let mut path = LocalSide {
        side: &model.side,
        source,
    };
    let (tokens, score) = run_decode(&mut stepper, prompt, cfg, &mut path)?;
    Ok(DecodeOutput {
        tokens,
        sigma_trace: stepper.into_sigma_trace(),
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{encode, BOS};

    fn model(seed: u64) -> SpaModel {
        SpaModel::new(ModelConfig::toy(), seed).unwrap()
    }

    fn cfg(policy: GatingPolicy, strategy: Strategy, width: usize, max_new: usize) -> DecodeConfig {
        DecodeConfig {
            max_new_tokens: max_new,
            strategy,
            beam_width: width,
            policy,
        }
    }

    #[test]
    fn policy_names_round_trip() {
        for p in GatingPolicy::ALL {
            assert_eq!(p.name().parse::<GatingPolicy>().unwrap(), p);
            assert_eq!(GatingPolicy::from_code(p.code()), Some(p));
        }
        assert!("spa_classifier".parse::<GatingPolicy>().is_err());
    }

    #[test]
    fn bos_only_prompt_generates_up_to_budget() {
        let m = model(1);
        let out = decode_monolithic(
            &m,
            &[BOS],
            &cfg(GatingPolicy::SpaClassifier, Strategy::Greedy, 1, 7),
            RungSource::AllLayers,
        )
        .unwrap();
        assert!(!out.tokens.is_empty() && out.tokens.len() <= 7);
        assert!(out.tokens.len() == 7 || *out.tokens.last().unwrap() == EOS);
        assert_eq!(out.sigma_trace.len(), out.tokens.len());
    }

    #[test]
    fn generation_stops_at_context_limit() {
        let m = model(2);
        let prompt = vec![BOS; m.config.max_seq_len - 2];
        let out = decode_monolithic(
            &m,
            &prompt,
            &cfg(GatingPolicy::BaseOnly, Strategy::Greedy, 1, 50),
            RungSource::AllLayers,
        )
        .unwrap();
        assert!(out.tokens.len() <= 3);
    }

    #[test]
    fn base_only_matches_base_logits_argmax() {
        let m = model(3);
        let prompt = encode("the cat");
        let out = decode_monolithic(
            &m,
            &prompt,
            &cfg(GatingPolicy::BaseOnly, Strategy::Greedy, 1, 5),
            RungSource::AllLayers,
        )
        .unwrap();
        let mut seq = prompt.clone();
        for &tok in &out.tokens {
            let logits = m.base_logits(&seq).unwrap();
            assert_eq!(argmax(logits.row(seq.len() - 1)) as u32, tok);
            seq.push(tok);
        }
        assert!(out.sigma_trace.iter().all(|&s| s == 0));
    }

    #[test]
    fn width_one_beam_is_greedy() {
        for seed in 0..4 {
            let m = model(10 + seed);
            let prompt = encode("a dog");
            for policy in [GatingPolicy::SpaClassifier, GatingPolicy::AlwaysSide] {
                let g = decode_monolithic(&m, &prompt, &cfg(policy, Strategy::Greedy, 1, 6), RungSource::AllLayers)
                    .unwrap();
                let b = decode_monolithic(&m, &prompt, &cfg(policy, Strategy::Beam, 1, 6), RungSource::AllLayers)
                    .unwrap();
                assert_eq!(g.tokens, b.tokens);
                assert_eq!(g.sigma_trace, b.sigma_trace);
            }
        }
    }

    #[test]
    fn zero_width_is_rejected() {
        let m = model(4);
        assert!(matches!(
            decode_monolithic(&m, &[BOS], &cfg(GatingPolicy::BaseOnly, Strategy::Beam, 0, 3), RungSource::AllLayers),
            Err(RuntimeError::Contract(_))
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn device_only_needs_no_transformer_layers() {
        let m = model(5);
        let mut stripped = m.clone();
        for l in &mut stripped.base.layers {
            l.ff_out.weight.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
        }
        let c = cfg(GatingPolicy::DeviceOnly, Strategy::Greedy, 1, 5);
        let a = decode_monolithic(&m, &encode("my"), &c, RungSource::AllLayers).unwrap();
        let b = decode_monolithic(&stripped, &encode("my"), &c, RungSource::AllLayers).unwrap();
        assert_eq!(a, b);
    }
}
