use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    gate_labels, leaf_grad, shift, BaseParams, BaseTrace, CachedTrace, GateMode, GateTarget, ModelConfig,
    ObjectiveWeights, SpaModel,
};
use crate::numcore::Tape;

use super::{encode_document, Adam, Corpus, TrainError};

/// Learning rates searched when selecting a side-training run.
pub const LEARNING_RATE_GRID: [f64; 3] = [2e-4, 5e-4, 1e-3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideObjective {
    /// Soft gate, gate labels from the CATE estimate, usage penalty.
    Spa,
    /// Side output always added; no gate.
    Ladder,
}

/// Side and gate training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// A position is labelled "use side" when its CATE exceeds this margin.
    pub gate_margin: f64,
    pub usage_penalty: f64,
    pub gate_weight: f64,
    pub objective: SideObjective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 15,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            gate_margin: 0.0,
            usage_penalty: 0.01,
            gate_weight: 1.0,
            objective: SideObjective::Spa,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            usage_penalty: self.usage_penalty,
            gate_weight: self.gate_weight,
        }
    }
}

/// Base pretraining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 8,
            epochs: 6,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_perplexity: f64,
    /// Fraction of validation positions routed through the side path.
    pub usage_rate: f64,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub base: BaseParams,
    pub initial_loss: f64,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct SideTraining {
    pub model: SpaModel,
    pub config: TrainConfig,
    pub history: Vec<EpochLog>,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
}

impl SideTraining {
    pub fn final_val_loss(&self) -> f64 {
        self.history.last().map_or(f64::INFINITY, |e| e.val_loss)
    }
}

fn tokenize(corpus: &Corpus, indices: &[usize], max_len: usize) -> Vec<Vec<u32>> {
    indices
        .iter()
        .map(|&i| {
            let mut ids = encode_document(&corpus.documents[i]);
            ids.truncate(max_len);
            ids
        })
        .filter(|ids| ids.len() >= 2)
        .collect()
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn base_nll(cfg: &ModelConfig, base: &BaseParams, docs: &[Vec<u32>]) -> Result<(f64, usize), TrainError> {
    let mut total = 0.0;
    let mut count = 0;
    for doc in docs {
        let (inputs, targets) = shift(doc)?;
        let mut tape = Tape::inference();
        let trace = base.forward(cfg, &mut tape, inputs)?;
        let logits = base.head_logits(&mut tape, trace.final_hidden())?;
        let ce = tape.cross_entropy(logits, &targets)?;
        total += tape.scalar(ce) * targets.len() as f64;
        count += targets.len();
    }
    Ok((total, count))
}

/// Trains a fresh base with plain next-token cross-entropy, then freezes it.
pub fn pretrain_base(cfg: &ModelConfig, pcfg: &PretrainConfig, corpus: &Corpus) -> Result<Pretrained, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::Contract("pretraining corpus is empty".into()));
    }
    let splits = corpus.split(pcfg.seed);
    let train = tokenize(corpus, &splits.train, cfg.max_seq_len);
    let val = tokenize(corpus, &splits.val, cfg.max_seq_len);
    if train.is_empty() {
        return Err(TrainError::Contract("no training documents with at least 2 tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let mut base = BaseParams::init(cfg, &mut rng);
    base.set_frozen(false);
    let (l0, n0) = base_nll(cfg, &base, &train)?;
    let initial_loss = l0 / n0 as f64;
    let mut opt = Adam::new(pcfg.learning_rate, pcfg.beta1, pcfg.beta2, pcfg.adam_eps);
    let mut history = Vec::with_capacity(pcfg.epochs);

    for epoch in 0..pcfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_docs = 0;
        for batch in batches(train.len(), pcfg.batch_size, &mut rng) {
            let mut grads: Vec<Vec<f64>> = base.named().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            for &d in &batch {
                let (inputs, targets) = shift(&train[d])?;
                let mut tape = Tape::new();
                let trace = base.forward(cfg, &mut tape, inputs)?;
                let logits = base.head_logits(&mut tape, trace.final_hidden())?;
                let ce = tape.cross_entropy(logits, &targets)?;
                let loss = tape.scalar(ce);
                if !loss.is_finite() {
                    return Err(TrainError::Divergence {
                        epoch,
                        step: opt.steps(),
                        loss,
                    });
                }
                epoch_loss += loss;
                epoch_docs += 1;
                let scaled = tape.scale(ce, 1.0 / batch.len() as f64);
                tape.backward(scaled)?;
                for ((_, t), g) in base.named().iter().zip(grads.iter_mut()) {
                    g.iter_mut().zip(leaf_grad(&tape, t)).for_each(|(a, b)| *a += b);
                }
            }
            let params = base.named_mut().into_iter().map(|(_, t)| t).collect();
            opt.step(params, &grads);
        }
        let (vl, vn) = base_nll(cfg, &base, &val)?;
        let val_loss = if vn == 0 { f64::NAN } else { vl / vn as f64 };
        let log = EpochLog {
            epoch,
            train_loss: epoch_loss / epoch_docs as f64,
            val_loss,
            val_perplexity: val_loss.exp(),
            usage_rate: 0.0,
        };
        info!(
            "pretrain epoch {epoch}: train loss {:.4}, val ppl {:.3}",
            log.train_loss, log.val_perplexity
        );
        history.push(log);
    }
    base.set_frozen(true);
    Ok(Pretrained {
        base,
        initial_loss,
        history,
    })
}

fn cache(model: &SpaModel, docs: &[Vec<u32>]) -> Result<Vec<CachedTrace>, TrainError> {
    docs.iter().map(|d| Ok(model.cache_trace(d)?)).collect()
}

/// Hard-gated validation loss and usage rate over cached documents.
fn validate(model: &SpaModel, val: &[CachedTrace], mode: GateMode) -> Result<(f64, f64), TrainError> {
    let (mut nll, mut n, mut ones) = (0.0, 0usize, 0usize);
    for c in val {
        let tf = model.teacher_forced_cached(c, mode)?;
        nll += tf.total_nll();
        n += tf.nll.len();
        ones += tf.sigma.iter().filter(|&&s| s == 1).count();
    }
    if n == 0 {
        return Ok((f64::NAN, 0.0));
    }
    Ok((nll / n as f64, ones as f64 / n as f64))
}

/// Optimises the side network and gate on `corpus` while the base stays frozen.
pub fn train_side_and_gate(model: &SpaModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<SideTraining, TrainError> {
    if !model.base.is_frozen() {
        return Err(TrainError::Contract("base parameters must be frozen before side training".into()));
    }
    if corpus.is_empty() {
        return Err(TrainError::Contract("personalized corpus is empty".into()));
    }
    let before = model.base.checksum();
    let mut work = model.clone();
    work.side.set_trainable(true);
    work.gate.set_trainable(matches!(cfg.objective, SideObjective::Spa));

    let splits = corpus.split(cfg.seed);
    let max = model.config.max_seq_len;
    let train = cache(&work, &tokenize(corpus, &splits.train, max))?;
    let val = cache(&work, &tokenize(corpus, &splits.val, max))?;
    if train.is_empty() {
        return Err(TrainError::Contract("no training documents with at least 2 tokens".into()));
    }
    let val_mode = match cfg.objective {
        SideObjective::Spa => GateMode::Classifier,
        SideObjective::Ladder => GateMode::On,
    };
    let weights = cfg.weights();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let mut opt = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_docs = 0;
        for batch in batches(train.len(), cfg.batch_size, &mut rng) {
            let trainable = trainable_tensors(&work, cfg.objective);
            let mut grads: Vec<Vec<f64>> = trainable.iter().map(|t| vec![0.0; t.len()]).collect();
            for &d in &batch {
                let doc = &train[d];
                let labels = match cfg.objective {
                    SideObjective::Spa => {
                        let mut tape = Tape::inference();
                        let trace = BaseTrace::from_values(&mut tape, &doc.embed, &doc.layers)?;
                        gate_labels(&work.cate_from_trace(&mut tape, &trace, &doc.targets)?, cfg.gate_margin)
                    }
                    SideObjective::Ladder => Vec::new(),
                };
                let gate = match cfg.objective {
                    SideObjective::Spa => GateTarget::Labels(&labels),
                    SideObjective::Ladder => GateTarget::AlwaysOn,
                };
                let mut tape = Tape::new();
                let trace = BaseTrace::from_values(&mut tape, &doc.embed, &doc.layers)?;
                let obj = work.objective(&mut tape, &trace, &doc.targets, gate, weights)?;
                let loss = tape.scalar(obj.total);
                if !loss.is_finite() {
                    return Err(TrainError::Divergence {
                        epoch,
                        step: opt.steps(),
                        loss,
                    });
                }
                epoch_loss += loss;
                epoch_docs += 1;
                let scaled = tape.scale(obj.total, 1.0 / batch.len() as f64);
                tape.backward(scaled)?;
                for (t, g) in trainable_tensors(&work, cfg.objective).iter().zip(grads.iter_mut()) {
                    g.iter_mut().zip(leaf_grad(&tape, t)).for_each(|(a, b)| *a += b);
                }
            }
            let mut params: Vec<_> = work.side.named_mut().into_iter().map(|(_, t)| t).collect();
            if matches!(cfg.objective, SideObjective::Spa) {
                params.extend(work.gate.named_mut().into_iter().map(|(_, t)| t));
            }
            opt.step(params, &grads);
        }
        let (val_loss, usage_rate) = validate(&work, &val, val_mode)?;
        let log = EpochLog {
            epoch,
            train_loss: epoch_loss / epoch_docs as f64,
            val_loss,
            val_perplexity: val_loss.exp(),
            usage_rate,
        };
        info!(
            "side epoch {epoch}: loss {:.4}, usage {:.3}, val ppl {:.3}",
            log.train_loss, log.usage_rate, log.val_perplexity
        );
        history.push(log);
    }
    let after = work.base.checksum();
    Ok(SideTraining {
        model: work,
        config: cfg.clone(),
        history,
        base_checksum_before: before,
        base_checksum_after: after,
    })
}

fn trainable_tensors(model: &SpaModel, objective: SideObjective) -> Vec<&crate::numcore::Tensor> {
    let mut out: Vec<_> = model.side.named().into_iter().map(|(_, t)| t).collect();
    if matches!(objective, SideObjective::Spa) {
        out.extend(model.gate.named().into_iter().map(|(_, t)| t));
    }
    out
}

/// One run per learning rate; `best` indexes the lowest final validation loss.
#[derive(Debug, Clone)]
pub struct GridSearch {
    pub runs: Vec<SideTraining>,
    pub best: usize,
}

impl GridSearch {
    pub fn best_run(&self) -> &SideTraining {
        &self.runs[self.best]
    }
}

pub fn select_learning_rate(
    model: &SpaModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<GridSearch, TrainError> {
    let mut runs = Vec::with_capacity(grid.len());
    for &lr in grid {
        let c = TrainConfig {
            learning_rate: lr,
            ..cfg.clone()
        };
        runs.push(train_side_and_gate(model, corpus, &c)?);
    }
    let best = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.final_val_loss().total_cmp(&b.1.final_val_loss()))
        .map(|(i, _)| i)
        .ok_or_else(|| TrainError::Contract("empty learning-rate grid".into()))?;
    Ok(GridSearch { runs, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{make_synthetic_corpus_with, SizeTier, SyntheticSpec};

    fn tiny() -> (Corpus, Corpus) {
        make_synthetic_corpus_with(
            SyntheticSpec {
                base_documents: 100,
                personal_documents: 24,
            },
            5,
            SizeTier::Small,
        )
    }

    fn quick_pretrain() -> PretrainConfig {
        PretrainConfig {
            epochs: 1,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_reduces_loss_and_freezes() {
        let (base_corpus, _) = tiny();
        let out = pretrain_base(&ModelConfig::toy(), &quick_pretrain(), &base_corpus).unwrap();
        assert!(out.base.is_frozen());
        assert!(out.history[0].train_loss < out.initial_loss);
    }

    #[test]
    fn pretraining_is_reproducible() {
        let (base_corpus, _) = tiny();
        let a = pretrain_base(&ModelConfig::toy(), &quick_pretrain(), &base_corpus).unwrap();
        let b = pretrain_base(&ModelConfig::toy(), &quick_pretrain(), &base_corpus).unwrap();
        assert_eq!(a.base.checksum(), b.base.checksum());
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty = Corpus::new("e", Vec::new());
        assert!(matches!(
            pretrain_base(&ModelConfig::toy(), &quick_pretrain(), &empty),
            Err(TrainError::Contract(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let (base_corpus, _) = tiny();
        let cfg = PretrainConfig {
            learning_rate: f64::NAN,
            epochs: 2,
            ..PretrainConfig::default()
        };
        assert!(matches!(
            pretrain_base(&ModelConfig::toy(), &cfg, &base_corpus),
            Err(TrainError::Divergence { .. })
        ));
    }

    #[test]
    fn side_training_rejects_unfrozen_base() {
        let (_, personal) = tiny();
        let mut m = SpaModel::new(ModelConfig::toy(), 1).unwrap();
        m.base.set_frozen(false);
        assert!(matches!(
            train_side_and_gate(&m, &personal, &TrainConfig::default()),
            Err(TrainError::Contract(_))
        ));
    }

    #[test]
    fn side_training_keeps_base_and_is_reproducible() {
        let (_, personal) = tiny();
        let m = SpaModel::new(ModelConfig::toy(), 2).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let a = train_side_and_gate(&m, &personal, &cfg).unwrap();
        assert_eq!(a.base_checksum_before, a.base_checksum_after);
        assert_eq!(a.base_checksum_before, m.base.checksum());
        assert_eq!(a.history.len(), 2);
        assert_ne!(a.model.side, m.side);
        let b = train_side_and_gate(&m, &personal, &cfg).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn reported_usage_matches_independent_pass() {
        let (_, personal) = tiny();
        let m = SpaModel::new(ModelConfig::toy(), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let run = train_side_and_gate(&m, &personal, &cfg).unwrap();
        let splits = personal.split(cfg.seed);
        let (mut ones, mut n) = (0, 0);
        for doc in personal.subset(&splits.val) {
            let ids = encode_document(doc);
            let tr = run.model.trace(&ids[..ids.len() - 1]).unwrap();
            ones += tr.decisions.iter().filter(|&&s| s == 1).count();
            n += tr.decisions.len();
        }
        assert_eq!(run.history[0].usage_rate, ones as f64 / n as f64);
    }

    #[test]
    fn ladder_objective_leaves_gate_untouched() {
        let (_, personal) = tiny();
        let m = SpaModel::new(ModelConfig::toy(), 4).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            objective: SideObjective::Ladder,
            ..TrainConfig::default()
        };
        let run = train_side_and_gate(&m, &personal, &cfg).unwrap();
        let data = |g: &crate::model::GateParams| g.named().iter().map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(data(&run.model.gate), data(&m.gate));
        assert_eq!(run.history[0].usage_rate, 1.0);
    }
}
