//! Training procedures of the continual parser: initial task adaptation,
//! prompt tuning against a frozen backbone, the in-context teacher and the
//! distilled student. A [`PromptBank`] holds everything the student needs
//! at inference time.

mod bank;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bank::{load_bank, save_bank};
pub use train::{
    accuracy_on, agreement, batch_loss, early_stopper, encode_pairs, predict, train, EvalPoint,
    EvalSet, Pair, StopDecision, Supervision, TrainConfig, TrainOutcome, Trainee,
};

use crate::metrics::{exact_match, MetricsError};
use crate::numerics::{log_softmax_rows, NumericsError, Tensor};
use crate::retriever::{build_training_inputs, context_input, RetrieverConfig, RetrieverError};
use crate::seq2seq::{ModelError, ModelParams, PromptMatrix, Vocabulary};
use crate::taskstream::{Example, StreamError, Task};

#[derive(Debug, thiserror::Error)]
pub enum ContinualError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("frozen backbone modified: fingerprint {expected} became {found}")]
    FrozenBackbone { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o: {0}")]
    Io(String),
    #[error("corrupt bank: {0}")]
    Corruption(String),
}

/// Where a new task's prompt starts from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptInit {
    /// The prompt selected by initial task adaptation.
    #[default]
    Shared,
    /// The prompt of the preceding task.
    Previous,
}

/// Adapted backbone θ*, the shared initial prompt P* and one prompt per
/// task.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub backbone: ModelParams<f64>,
    /// Fingerprint of `backbone` at creation.
    pub fingerprint: String,
    pub init: PromptMatrix<f64>,
    pub prompts: BTreeMap<usize, PromptMatrix<f64>>,
}

impl PromptBank {
    pub fn new(
        backbone: ModelParams<f64>,
        init: PromptMatrix<f64>,
    ) -> Result<Self, ContinualError> {
        if init.dim() != backbone.config.prompt_dim() {
            return Err(ContinualError::Contract(format!(
                "prompt width {} for a d={} backbone",
                init.dim(),
                backbone.config.prompt_dim()
            )));
        }
        Ok(Self {
            fingerprint: backbone.fingerprint(),
            backbone,
            init,
            prompts: BTreeMap::new(),
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.init.len()
    }

    pub fn dim(&self) -> usize {
        self.init.dim()
    }

    pub fn get(&self, task: usize) -> Option<&PromptMatrix<f64>> {
        self.prompts.get(&task)
    }

    pub fn insert(&mut self, task: usize, prompt: PromptMatrix<f64>) -> Result<(), ContinualError> {
        if prompt.values.shape() != self.init.values.shape() {
            return Err(ContinualError::Contract(format!(
                "prompt {:?} does not match bank shape {:?}",
                prompt.values.shape(),
                self.init.values.shape()
            )));
        }
        self.prompts.insert(task, prompt.with_task(task));
        Ok(())
    }

    /// Fails unless the backbone still hashes to the recorded fingerprint.
    pub fn check_backbone(&self) -> Result<(), ContinualError> {
        let found = self.backbone.fingerprint();
        if found != self.fingerprint {
            return Err(ContinualError::FrozenBackbone {
                expected: self.fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Greedy predictions for `task` with its stored prompt.
    pub fn predict(
        &self,
        task: usize,
        vocab: &Vocabulary,
        sources: &[Vec<usize>],
        max_len: usize,
    ) -> Result<Vec<String>, ContinualError> {
        let prompt = self
            .get(task)
            .ok_or_else(|| ContinualError::Contract(format!("no prompt stored for task {task}")))?;
        predict(&self.backbone, Some(prompt), vocab, sources, max_len)
    }

    /// Bytes of prompt storage, all tasks together.
    pub fn prompt_bytes(&self) -> usize {
        self.prompts.values().map(|p| p.values.len() * 8).sum()
    }
}

/// `(X′, Y)` text pairs of a split.
pub fn plain_pairs(
    task: &Task,
    split: &[Example],
) -> Result<Vec<(String, String)>, ContinualError> {
    split
        .iter()
        .map(|e| Ok((task.flatten(e)?, e.sql.clone())))
        .collect()
}

/// Teacher inputs for a split: the demonstration context drawn from the
/// task's training pool when one qualifies, else `X′`.
pub fn context_pairs(
    task: &Task,
    split: &[Example],
    retriever: &RetrieverConfig,
) -> Result<Vec<(String, String)>, ContinualError> {
    split
        .iter()
        .map(|e| {
            Ok((
                context_input(task, e, &task.train, retriever)?.text,
                e.sql.clone(),
            ))
        })
        .collect()
}

fn nonempty_valid(task: &Task) -> Result<(), ContinualError> {
    if task.valid.is_empty() {
        return Err(ContinualError::Contract(format!(
            "task {} has no validation examples",
            task.index
        )));
    }
    Ok(())
}

fn prompt_validator(
    vocab: &Vocabulary,
    valid: EvalSet,
    max_len: usize,
) -> impl FnMut(&ModelParams<f64>, Option<&PromptMatrix<f64>>) -> Result<f64, ContinualError> + '_ {
    move |b, p| accuracy_on(b, p, vocab, &valid.sources, &valid.golds, max_len)
}

/// Fine-tunes backbone and a fresh prompt together on the merged initial
/// task and returns the bank holding the best validated pair, with that
/// prompt also stored as task 0's entry.
pub fn initial_task_adaptation(
    mut backbone: ModelParams<f64>,
    task: &Task,
    vocab: &Vocabulary,
    prompt_len: usize,
    prompt_seed: u64,
    config: &TrainConfig,
) -> Result<(PromptBank, TrainOutcome), ContinualError> {
    nonempty_valid(task)?;
    let mut prompt = PromptMatrix::random(
        task.index,
        prompt_len,
        backbone.config.prompt_dim(),
        prompt_seed,
    );
    let data = encode_pairs(vocab, &plain_pairs(task, &task.train)?);
    let valid = EvalSet::new(vocab, &plain_pairs(task, &task.valid)?);
    let outcome = train(
        Trainee {
            backbone: &mut backbone,
            prompt: Some(&mut prompt),
            train_backbone: true,
        },
        &data,
        None,
        config,
        prompt_validator(vocab, valid, config.max_decode_len),
    )?;
    let mut bank = PromptBank::new(backbone, prompt.clone())?;
    bank.insert(task.index, prompt)?;
    Ok((bank, outcome))
}

fn start_prompt(
    bank: &PromptBank,
    task: usize,
    init: PromptInit,
) -> Result<PromptMatrix<f64>, ContinualError> {
    if task == 0 {
        return Err(ContinualError::Contract(
            "task 0 is handled by initial adaptation".into(),
        ));
    }
    match init {
        PromptInit::Shared => Ok(bank.init.with_task(task)),
        PromptInit::Previous => bank
            .get(task - 1)
            .map(|p| p.with_task(task))
            .ok_or_else(|| {
                ContinualError::Contract(format!("no prompt for task {} to start from", task - 1))
            }),
    }
}

/// Tunes a new prompt for `task` against the frozen backbone and stores it.
pub fn continual_prompt_tune(
    bank: &mut PromptBank,
    task: &Task,
    vocab: &Vocabulary,
    init: PromptInit,
    config: &TrainConfig,
) -> Result<TrainOutcome, ContinualError> {
    let start = start_prompt(bank, task.index, init)?;
    prompt_tune_from(bank, task, vocab, start, config)
}

/// Prompt tuning from an explicit starting prompt; also usable for task 0
/// when the backbone is never adapted.
pub fn prompt_tune_from(
    bank: &mut PromptBank,
    task: &Task,
    vocab: &Vocabulary,
    start: PromptMatrix<f64>,
    config: &TrainConfig,
) -> Result<TrainOutcome, ContinualError> {
    let data = encode_pairs(vocab, &plain_pairs(task, &task.train)?);
    tune_student(bank, task, vocab, start, &data, None, config)
}

/// Full fine-tuning without a prompt on `(input, sql)` text pairs.
pub fn fine_tune(
    params: &mut ModelParams<f64>,
    vocab: &Vocabulary,
    train_texts: &[(String, String)],
    valid_texts: &[(String, String)],
    config: &TrainConfig,
) -> Result<TrainOutcome, ContinualError> {
    if valid_texts.is_empty() {
        return Err(ContinualError::Contract("no validation examples".into()));
    }
    let data = encode_pairs(vocab, train_texts);
    let valid = EvalSet::new(vocab, valid_texts);
    train(
        Trainee {
            backbone: params,
            prompt: None,
            train_backbone: true,
        },
        &data,
        None,
        config,
        prompt_validator(vocab, valid, config.max_decode_len),
    )
}

fn tune_student(
    bank: &mut PromptBank,
    task: &Task,
    vocab: &Vocabulary,
    start: PromptMatrix<f64>,
    data: &[Pair],
    supervision: Option<&[Supervision<f64>]>,
    config: &TrainConfig,
) -> Result<TrainOutcome, ContinualError> {
    nonempty_valid(task)?;
    bank.check_backbone()?;
    let mut prompt = start.with_task(task.index);
    let valid = EvalSet::new(vocab, &plain_pairs(task, &task.valid)?);
    let outcome = train(
        Trainee {
            backbone: &mut bank.backbone,
            prompt: Some(&mut prompt),
            train_backbone: false,
        },
        data,
        supervision,
        config,
        prompt_validator(vocab, valid, config.max_decode_len),
    )?;
    bank.check_backbone()?;
    bank.insert(task.index, prompt)?;
    Ok(outcome)
}

/// Teacher parameters and the last task they were trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ModelParams<f64>,
    pub last_task: Option<usize>,
}

impl TeacherState {
    pub fn fresh(params: ModelParams<f64>) -> Self {
        Self {
            params,
            last_task: None,
        }
    }

    /// Teacher inputs for `split`; plain `X′` when contexts are disabled.
    pub fn inputs(
        task: &Task,
        split: &[Example],
        retriever: &RetrieverConfig,
        use_context: bool,
    ) -> Result<Vec<(String, String)>, ContinualError> {
        if use_context {
            context_pairs(task, split, retriever)
        } else {
            plain_pairs(task, split)
        }
    }
}

/// Full-parameter training of the teacher on `task`, continuing from its
/// previous state. With `use_context` the training pairs follow the context
/// mixing rule and validation uses the same inputs the teacher will see at
/// distillation time; without it every input is plain `X′`.
pub fn teacher_ict_train(
    state: &mut TeacherState,
    task: &Task,
    vocab: &Vocabulary,
    retriever: &RetrieverConfig,
    use_context: bool,
    config: &TrainConfig,
) -> Result<TrainOutcome, ContinualError> {
    let expected = state.last_task.map_or(0, |t| t + 1);
    if task.index != expected {
        return Err(ContinualError::Contract(format!(
            "teacher last trained on {:?}, cannot train task {}",
            state.last_task, task.index
        )));
    }
    nonempty_valid(task)?;
    let mut texts = Vec::new();
    for e in &task.train {
        if use_context {
            texts.extend(build_training_inputs(task, e, &task.train, retriever)?);
        } else {
            texts.push((task.flatten(e)?, e.sql.clone()));
        }
    }
    let data = encode_pairs(vocab, &texts);
    let valid = EvalSet::new(
        vocab,
        &TeacherState::inputs(task, &task.valid, retriever, use_context)?,
    );
    let outcome = train(
        Trainee {
            backbone: &mut state.params,
            prompt: None,
            train_backbone: true,
        },
        &data,
        None,
        config,
        prompt_validator(vocab, valid, config.max_decode_len),
    )?;
    state.last_task = Some(task.index);
    Ok(outcome)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupervisionKind {
    TeacherKl,
    GoldFallback,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillRecord {
    /// Index into the task's training split.
    pub example: usize,
    pub kind: SupervisionKind,
    pub teacher_output: String,
    pub exact_match: bool,
}

/// Distillation targets for a task's training split: the teacher's
/// teacher-forced logits on gold `Y` where its greedy output is correct,
/// gold supervision elsewhere.
pub fn teacher_supervision(
    teacher: &TeacherState,
    task: &Task,
    vocab: &Vocabulary,
    retriever: &RetrieverConfig,
    use_context: bool,
    max_len: usize,
) -> Result<(Vec<Supervision<f64>>, Vec<DistillRecord>), ContinualError> {
    let inputs = EvalSet::new(
        vocab,
        &TeacherState::inputs(task, &task.train, retriever, use_context)?,
    );
    let outputs = predict(&teacher.params, None, vocab, &inputs.sources, max_len)?;
    let targets: Vec<Vec<usize>> = task
        .train
        .iter()
        .map(|e| vocab.encode_target(&e.sql))
        .collect();
    let mut sup = Vec::with_capacity(outputs.len());
    let mut records = Vec::with_capacity(outputs.len());
    let mut forced: Vec<usize> = Vec::new();
    for (i, (out, e)) in outputs.into_iter().zip(&task.train).enumerate() {
        let ok = exact_match(&out, &e.sql);
        if ok {
            forced.push(i);
        }
        sup.push(Supervision::Gold);
        records.push(DistillRecord {
            example: i,
            kind: if ok {
                SupervisionKind::TeacherKl
            } else {
                SupervisionKind::GoldFallback
            },
            teacher_output: out,
            exact_match: ok,
        });
    }
    for chunk in forced.chunks(32) {
        let src: Vec<Vec<usize>> = chunk.iter().map(|&i| inputs.sources[i].clone()).collect();
        let tgt: Vec<Vec<usize>> = chunk.iter().map(|&i| targets[i].clone()).collect();
        for (&i, d) in chunk
            .iter()
            .zip(teacher.params.forward_teacher_forced(None, &src, &tgt)?)
        {
            sup[i] = Supervision::Teacher(d.logits);
        }
    }
    Ok((sup, records))
}

/// Student prompt for `task` trained on the teacher's per-step
/// distributions (gold SQL where the teacher is wrong). Neither the teacher
/// nor the backbone receives gradients.
#[allow(clippy::too_many_arguments)]
pub fn distill_student(
    bank: &mut PromptBank,
    teacher: &TeacherState,
    task: &Task,
    vocab: &Vocabulary,
    retriever: &RetrieverConfig,
    use_context: bool,
    init: PromptInit,
    config: &TrainConfig,
) -> Result<(TrainOutcome, Vec<DistillRecord>), ContinualError> {
    if teacher.last_task != Some(task.index) {
        return Err(ContinualError::Contract(format!(
            "teacher last trained on {:?}, distilling task {}",
            teacher.last_task, task.index
        )));
    }
    if teacher.params.config.vocab_size != bank.backbone.config.vocab_size
        || vocab.len() != bank.backbone.config.vocab_size
    {
        return Err(ContinualError::Contract(format!(
            "teacher vocabulary {} and student vocabulary {} differ (tokenizer has {})",
            teacher.params.config.vocab_size,
            bank.backbone.config.vocab_size,
            vocab.len()
        )));
    }
    let (sup, records) = teacher_supervision(
        teacher,
        task,
        vocab,
        retriever,
        use_context,
        config.max_decode_len,
    )?;
    let data = encode_pairs(vocab, &plain_pairs(task, &task.train)?);
    let start = start_prompt(bank, task.index, init)?;
    let outcome = tune_student(bank, task, vocab, start, &data, Some(&sup), config)?;
    Ok((outcome, records))
}

/// Mean over teacher-supervised steps of `KL(teacher ∥ model)`.
pub fn mean_step_kl(
    model: &ModelParams<f64>,
    prompt: Option<&PromptMatrix<f64>>,
    data: &[Pair],
    supervision: &[Supervision<f64>],
) -> Result<f64, ContinualError> {
    let (mut total, mut steps) = (0.0, 0usize);
    let idx: Vec<usize> = (0..data.len())
        .filter(|&i| matches!(supervision.get(i), Some(Supervision::Teacher(_))))
        .collect();
    for chunk in idx.chunks(32) {
        let src: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].source.clone()).collect();
        let tgt: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].target.clone()).collect();
        for (&i, d) in chunk
            .iter()
            .zip(model.forward_teacher_forced(prompt, &src, &tgt)?)
        {
            let Supervision::Teacher(t) = &supervision[i] else {
                unreachable!()
            };
            total += step_kl_sum(t, &d.logits);
            steps += t.rows();
        }
    }
    if steps == 0 {
        return Err(ContinualError::Contract(
            "no teacher-supervised steps".into(),
        ));
    }
    Ok(total / steps as f64)
}

fn step_kl_sum(teacher: &Tensor<f64>, student: &Tensor<f64>) -> f64 {
    let v = teacher.cols();
    let lp = log_softmax_rows(teacher.data(), v);
    let lq = log_softmax_rows(student.data(), v);
    lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum()
}

#[cfg(test)]
mod tests;
