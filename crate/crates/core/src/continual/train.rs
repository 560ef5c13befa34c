use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ContinualError;
use crate::metrics::exact_match;
use crate::numerics::{
    Optimizer, OptimizerConfig, OptimizerKind, ParamGroup, Scalar, Tape, Tensor, Var,
};
use crate::seq2seq::{bind, teacher_forced_logits, ModelParams, PromptMatrix, Vocabulary, Weights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs between validation passes.
    pub eval_interval: usize,
    /// Validation passes without improvement before stopping.
    pub patience: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub max_decode_len: usize,
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            batch_size: 12,
            max_epochs: 300,
            eval_interval: 10,
            patience: 5,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::adam(),
                lr_prompt: 1e-2,
                lr_backbone: 1e-3,
            },
            seed: 0,
            max_decode_len: 32,
        }
    }

    pub fn paper() -> Self {
        Self {
            batch_size: 12,
            max_epochs: 1000,
            eval_interval: 50,
            patience: 10,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::adafactor(),
                lr_prompt: 0.3,
                lr_backbone: 1e-4,
            },
            seed: 0,
            max_decode_len: 32,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ContinualError> {
        if self.patience < 1 || self.eval_interval < 1 || self.batch_size < 1 {
            return Err(ContinualError::Contract(format!(
                "patience, eval interval and batch size must be ≥ 1 ({self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue { best: usize },
    Stop { best: usize },
}

/// Stops once `patience` evaluations have passed since the best one.
/// The best is the earliest maximum.
pub fn early_stopper(history: &[f64], patience: usize) -> Result<StopDecision, ContinualError> {
    if history.is_empty() || patience == 0 {
        return Err(ContinualError::Contract(
            "early stopping needs history and patience ≥ 1".into(),
        ));
    }
    let mut best = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > history[best] {
            best = i;
        }
    }
    if history.len() - 1 - best >= patience {
        Ok(StopDecision::Stop { best })
    } else {
        Ok(StopDecision::Continue { best })
    }
}

/// Token-level training pair; `target` ends with `<eos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn encode_pairs(vocab: &Vocabulary, texts: &[(String, String)]) -> Vec<Pair> {
    texts
        .iter()
        .map(|(src, tgt)| Pair {
            source: vocab.tokenize(src).ids,
            target: vocab.encode_target(tgt),
        })
        .collect()
}

/// What a training pair is fitted to.
#[derive(Clone, Debug, PartialEq)]
pub enum Supervision<S> {
    Gold,
    /// Per-step teacher logits over the gold target, `[T × V]`.
    Teacher(Tensor<S>),
}

/// The parameters one training run may update.
pub struct Trainee<'a, S> {
    pub backbone: &'a mut ModelParams<S>,
    pub prompt: Option<&'a mut PromptMatrix<S>>,
    pub train_backbone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub evals: Vec<EvalPoint>,
    /// Index into `evals` of the restored checkpoint.
    pub best: Option<usize>,
    pub epochs_run: usize,
    /// Mean batch loss per epoch.
    pub losses: Vec<f64>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn best_accuracy(&self) -> Option<f64> {
        self.best.map(|b| self.evals[b].accuracy)
    }
}

/// Sum over steps, mean over the batch; gold pairs use cross-entropy and
/// teacher-supervised pairs use KL(teacher ∥ model).
pub fn batch_loss<S: Scalar>(
    tape: &mut Tape<S>,
    backbone: &ModelParams<S>,
    w: &Weights<Var>,
    prompt: Option<Var>,
    batch: &[(&Pair, &Supervision<S>)],
) -> Result<Var, ContinualError> {
    let sources: Vec<Vec<usize>> = batch.iter().map(|(p, _)| p.source.clone()).collect();
    let targets: Vec<Vec<usize>> = batch.iter().map(|(p, _)| p.target.clone()).collect();
    let logits = teacher_forced_logits(tape, w, &backbone.config, prompt, &sources, &targets)?;
    let scale = S::one() / S::from_usize(batch.len()).expect("batch size");
    if batch.iter().all(|(_, s)| matches!(s, Supervision::Gold)) {
        return Ok(tape.cross_entropy(logits, &targets.concat(), scale)?);
    }
    let vocab = backbone.config.vocab_size;
    let (mut gold_rows, mut gold_targets) = (Vec::new(), Vec::new());
    let (mut kl_rows, mut teacher) = (Vec::new(), Vec::new());
    let mut off = 0;
    for (pair, sup) in batch {
        let n = pair.target.len();
        match sup {
            Supervision::Gold => {
                gold_rows.extend(off..off + n);
                gold_targets.extend_from_slice(&pair.target);
            }
            Supervision::Teacher(t) => {
                if t.shape() != [n, vocab] {
                    return Err(ContinualError::Contract(format!(
                        "teacher logits {:?} for a {n}-step target over {vocab} tokens",
                        t.shape()
                    )));
                }
                kl_rows.extend(off..off + n);
                teacher.extend_from_slice(t.data());
            }
        }
        off += n;
    }
    let mut loss = None;
    if !gold_rows.is_empty() {
        let rows = tape.gather_rows(logits, &gold_rows)?;
        loss = Some(tape.cross_entropy(rows, &gold_targets, scale)?);
    }
    if !kl_rows.is_empty() {
        let rows = tape.gather_rows(logits, &kl_rows)?;
        let t = Tensor::new(vec![kl_rows.len(), vocab], teacher)?;
        let kl = tape.kl_divergence(&t, rows, scale)?;
        loss = Some(match loss {
            Some(ce) => tape.add(ce, kl)?,
            None => kl,
        });
    }
    Ok(loss.expect("non-empty batch"))
}

/// Greedy predictions, detokenized.
pub fn predict<S: Scalar>(
    backbone: &ModelParams<S>,
    prompt: Option<&PromptMatrix<S>>,
    vocab: &Vocabulary,
    sources: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<String>, ContinualError> {
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(32) {
        for ids in backbone.greedy_tokens(prompt, chunk, max_len)? {
            out.push(vocab.detokenize(&ids));
        }
    }
    Ok(out)
}

/// Exact-match accuracy in percent.
pub fn accuracy_on<S: Scalar>(
    backbone: &ModelParams<S>,
    prompt: Option<&PromptMatrix<S>>,
    vocab: &Vocabulary,
    sources: &[Vec<usize>],
    golds: &[String],
    max_len: usize,
) -> Result<f64, ContinualError> {
    if sources.is_empty() {
        return Err(ContinualError::Contract("no validation examples".into()));
    }
    let preds = predict(backbone, prompt, vocab, sources, max_len)?;
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| exact_match(p, g))
        .count();
    Ok(100.0 * hits as f64 / sources.len() as f64)
}

/// Validation inputs and gold SQL strings.
#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    pub sources: Vec<Vec<usize>>,
    pub golds: Vec<String>,
}

impl EvalSet {
    pub fn new(vocab: &Vocabulary, texts: &[(String, String)]) -> Self {
        Self {
            sources: texts.iter().map(|(s, _)| vocab.tokenize(s).ids).collect(),
            golds: texts.iter().map(|(_, g)| g.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Mini-batch training with periodic validation, early stopping and
/// restoration of the best validated state. `supervision`, when given, has
/// one entry per pair; otherwise every pair is gold-supervised.
pub fn train<S: Scalar>(
    trainee: Trainee<'_, S>,
    data: &[Pair],
    supervision: Option<&[Supervision<S>]>,
    config: &TrainConfig,
    mut validate: impl FnMut(&ModelParams<S>, Option<&PromptMatrix<S>>) -> Result<f64, ContinualError>,
) -> Result<TrainOutcome, ContinualError> {
    config.validate()?;
    let Trainee {
        backbone,
        mut prompt,
        train_backbone,
    } = trainee;
    if !train_backbone && prompt.is_none() {
        return Err(ContinualError::Contract("nothing to train".into()));
    }
    if let Some(s) = supervision {
        if s.len() != data.len() {
            return Err(ContinualError::Contract(format!(
                "{} supervision entries for {} pairs",
                s.len(),
                data.len()
            )));
        }
    }
    let gold = Supervision::Gold;
    let sup = |i: usize| supervision.map_or(&gold, |s| &s[i]);
    let mut outcome = TrainOutcome::default();
    if config.max_epochs == 0 || data.is_empty() {
        return Ok(outcome);
    }

    backbone.set_requires_grad(train_backbone);
    if let Some(p) = prompt.as_deref_mut() {
        p.values.set_requires_grad(true);
    }
    let tune_prompt = prompt.as_deref().is_some_and(|p| !p.is_empty());
    let mut groups = Vec::new();
    if tune_prompt {
        groups.push(ParamGroup::Prompt);
    }
    if train_backbone {
        groups.push(ParamGroup::Backbone);
    }
    if groups.is_empty() {
        return Ok(outcome);
    }
    let mut opt = Optimizer::new(config.optimizer.clone(), &groups);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::new();
    let mut best_state: Option<(Option<ModelParams<S>>, Option<PromptMatrix<S>>)> = None;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&Pair, &Supervision<S>)> =
                chunk.iter().map(|&i| (&data[i], sup(i))).collect();
            let mut tape = Tape::new();
            let w = bind(&mut tape, backbone);
            let pvar = prompt
                .as_deref()
                .filter(|p| !p.is_empty())
                .map(|p| tape.leaf(&p.values));
            let loss = batch_loss(&mut tape, backbone, &w, pvar, &batch)?;
            let value = tape.value(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(ContinualError::Contract(format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            total += value;
            batches += 1;
            let grads = tape.backward(loss)?;
            let mut params: Vec<(ParamGroup, &mut Tensor<S>)> = Vec::new();
            if let (Some(p), Some(v)) = (prompt.as_deref_mut(), pvar) {
                p.values.zero_grad();
                grads.write_to(v, &mut p.values)?;
                params.push((ParamGroup::Prompt, &mut p.values));
            }
            if train_backbone {
                let vars: Vec<Var> = w.named().into_iter().map(|(_, &v)| v).collect();
                for (t, v) in backbone.weights.leaves_mut().into_iter().zip(vars) {
                    t.zero_grad();
                    grads.write_to(v, t)?;
                    params.push((ParamGroup::Backbone, t));
                }
            }
            opt.step(&mut params)?;
            outcome.steps += 1;
        }
        outcome.losses.push(total / batches as f64);
        outcome.epochs_run = epoch;

        if epoch % config.eval_interval == 0 || epoch == config.max_epochs {
            let acc = validate(backbone, prompt.as_deref())?;
            log::debug!(
                "epoch {epoch}: loss {:.4} valid {acc:.2}",
                total / batches as f64
            );
            outcome.evals.push(EvalPoint {
                epoch,
                accuracy: acc,
            });
            history.push(acc);
            let decision = early_stopper(&history, config.patience)?;
            let best = match decision {
                StopDecision::Continue { best } | StopDecision::Stop { best } => best,
            };
            if best == history.len() - 1 {
                best_state = Some((
                    train_backbone.then(|| backbone.clone()),
                    prompt.as_deref().cloned(),
                ));
            }
            outcome.best = Some(best);
            if matches!(decision, StopDecision::Stop { .. }) {
                break;
            }
        }
    }
    if let Some((b, p)) = best_state {
        if let Some(b) = b {
            *backbone = b;
        }
        if let (Some(dst), Some(src)) = (prompt.as_deref_mut(), p) {
            *dst = src;
        }
    }
    backbone.set_requires_grad(false);
    if let Some(p) = prompt.as_deref_mut() {
        p.values.set_requires_grad(false);
    }
    Ok(outcome)
}

/// Checks that two prediction lists agree and returns the agreement rate
/// in percent.
pub fn agreement(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() {
        return 100.0;
    }
    let same = a.iter().zip(b).filter(|(x, y)| exact_match(x, y)).count();
    100.0 * same as f64 / a.len() as f64
}
