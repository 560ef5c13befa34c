//! Experiment orchestration: method pipelines over permuted task orders,
//! accuracy matrices, run records, sweeps and result files.

mod emit;
mod sweep;

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use emit::{emit_results, summarize, write_distill_records, SummaryRow};
pub use sweep::{sweep, write_sweep_csv, SweepAxis, SweepCell};

use crate::continual::{
    continual_prompt_tune, distill_student, fine_tune, initial_task_adaptation, plain_pairs,
    predict, prompt_tune_from, save_bank, teacher_ict_train, ContinualError, DistillRecord,
    EvalSet, PromptBank, PromptInit, TeacherState, TrainConfig,
};
use crate::metrics::{
    evaluate_task, report_from_predictions, write_predictions, AccuracyMatrix, MetricReport,
    MetricsError, PredictionRecord,
};
use crate::retriever::{context_input, RetrieverConfig};
use crate::seq2seq::{ModelConfig, ModelError, ModelParams, PromptMatrix, SizeTag, Vocabulary};
use crate::taskstream::{
    generate_stream, grammar_vocabulary, load_stream, merge_initial_tasks, permute_tail,
    stream_to_json, StreamConfig, StreamError, Task, TaskStream,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Continual(#[from] ContinualError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    /// Sequential full fine-tuning of one model.
    FineTune,
    /// Initial task adaptation, then one prompt per task from P*.
    Peft,
    /// In-context teacher distilled into the prompt-tuned student.
    C3,
    /// The in-context teacher alone, evaluated on its own inputs.
    TeacherOnly,
    /// Full fine-tuning on all training data seen so far.
    MultiTask,
    /// Prompt tuning on a randomly initialized, never adapted backbone.
    NoTaskAdapt,
    /// PEFT with each prompt started from the previous task's.
    ContinualInit,
    /// C3 whose teacher never sees demonstrations.
    C3NoIct,
}

impl MethodKind {
    pub const ALL: [MethodKind; 8] = [
        MethodKind::FineTune,
        MethodKind::Peft,
        MethodKind::C3,
        MethodKind::TeacherOnly,
        MethodKind::MultiTask,
        MethodKind::NoTaskAdapt,
        MethodKind::ContinualInit,
        MethodKind::C3NoIct,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::FineTune => "fine-tune",
            MethodKind::Peft => "peft",
            MethodKind::C3 => "c3",
            MethodKind::TeacherOnly => "teacher-only",
            MethodKind::MultiTask => "multi-task",
            MethodKind::NoTaskAdapt => "no-task-adapt",
            MethodKind::ContinualInit => "continual-init",
            MethodKind::C3NoIct => "c3-no-ict",
        }
    }

    /// Methods whose evaluation goes through a prompt bank.
    pub fn uses_bank(self) -> bool {
        matches!(
            self,
            MethodKind::Peft
                | MethodKind::C3
                | MethodKind::NoTaskAdapt
                | MethodKind::ContinualInit
                | MethodKind::C3NoIct
        )
    }

    pub fn uses_teacher(self) -> bool {
        matches!(
            self,
            MethodKind::C3 | MethodKind::C3NoIct | MethodKind::TeacherOnly
        )
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = MethodKind::ALL.iter().map(|m| m.name()).collect();
                HarnessError::Config(format!(
                    "unknown method {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    /// Pre-merge stream file; overrides generation from `stream`, whose
    /// `n` and `alternate` still apply.
    pub stream_path: Option<PathBuf>,
    pub method: MethodKind,
    pub student: SizeTag,
    pub teacher: SizeTag,
    pub prompt_len: usize,
    pub retriever: RetrieverConfig,
    pub train: TrainConfig,
    pub teacher_train: TrainConfig,
    pub order_seeds: Vec<u64>,
    pub model_seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ExperimentConfig {
    pub fn toy() -> Self {
        Self {
            stream: StreamConfig::default(),
            stream_path: None,
            method: MethodKind::C3,
            student: SizeTag::Small,
            teacher: SizeTag::Large,
            prompt_len: 20,
            retriever: RetrieverConfig::toy(),
            train: TrainConfig::toy(),
            teacher_train: TrainConfig::toy(),
            order_seeds: vec![0, 1, 2],
            model_seed: 0,
            out_dir: None,
        }
    }

    pub fn paper() -> Self {
        Self {
            prompt_len: 150,
            retriever: RetrieverConfig::paper(),
            train: TrainConfig::paper(),
            teacher_train: TrainConfig::paper(),
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self, HarnessError> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(HarnessError::Config(format!(
                "unknown preset {other:?}; expected toy or paper"
            ))),
        }
    }

    pub fn with_method(&self, method: MethodKind) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.order_seeds.is_empty() {
            return Err(HarnessError::Config("order seeds must be nonempty".into()));
        }
        if self.prompt_len == 0 {
            return Err(HarnessError::Config("prompt length must be ≥ 1".into()));
        }
        if let Some(p) = &self.stream_path {
            if !p.exists() {
                return Err(HarnessError::Config(format!(
                    "stream file {} does not exist",
                    p.display()
                )));
            }
        }
        self.stream.validate()?;
        self.retriever
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate()?;
        self.teacher_train.validate()?;
        Ok(())
    }

    /// The pre-merge stream and the vocabulary shared by every model.
    pub fn load_stream(&self) -> Result<(TaskStream, Vocabulary), HarnessError> {
        match &self.stream_path {
            Some(p) => {
                let s = load_stream(p)?;
                let texts = s.texts();
                let vocab = Vocabulary::from_texts(texts.iter().map(String::as_str));
                Ok((s, vocab))
            }
            None => Ok((generate_stream(&self.stream)?, grammar_vocabulary())),
        }
    }
}

/// Merges the first `n` tasks, then permutes the remaining ones.
pub fn ordered_stream(
    stream: &TaskStream,
    config: &StreamConfig,
    order_seed: u64,
) -> Result<TaskStream, StreamError> {
    let merged = merge_initial_tasks(stream, config.n)?;
    permute_tail(&merged, order_seed, config.alternate, 1)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub method: MethodKind,
    pub order_seed: u64,
    /// Table names of the task at each position.
    pub task_order: Vec<String>,
    pub matrix: Option<AccuracyMatrix>,
    pub report: Option<MetricReport>,
    pub task_seconds: Vec<f64>,
    /// Backbone fingerprint after each task.
    pub backbone_fingerprints: Vec<String>,
    /// Teacher test accuracy on each task right after training it.
    pub teacher_accuracy: Vec<f64>,
    /// Share of each task's training examples with a qualifying demonstration.
    pub context_rates: Vec<f64>,
    pub predictions_path: Option<PathBuf>,
    pub bank_path: Option<PathBuf>,
    pub version: String,
    pub error: Option<String>,
    #[serde(skip)]
    pub predictions: Vec<PredictionRecord>,
    /// Per task, one record per training example (distillation methods).
    #[serde(skip)]
    pub distill: Vec<Vec<DistillRecord>>,
}

impl RunRecord {
    fn new(config: &ExperimentConfig, order_seed: u64) -> Self {
        Self {
            config: config.clone(),
            method: config.method,
            order_seed,
            task_order: Vec::new(),
            matrix: None,
            report: None,
            task_seconds: Vec::new(),
            backbone_fingerprints: Vec::new(),
            teacher_accuracy: Vec::new(),
            context_rates: Vec::new(),
            predictions_path: None,
            bank_path: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            error: None,
            predictions: Vec::new(),
            distill: Vec::new(),
        }
    }

    /// Recomputes matrix and metrics from the prediction dump.
    pub fn recompute(&self) -> Result<(AccuracyMatrix, MetricReport), HarnessError> {
        let k = self.task_order.len();
        let records = match &self.predictions_path {
            Some(p) if self.predictions.is_empty() => crate::metrics::read_predictions(p)?,
            _ => self.predictions.clone(),
        };
        Ok(report_from_predictions(
            &records,
            k,
            self.method.name(),
            self.order_seed,
        )?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Experiment {
    pub records: Vec<RunRecord>,
    pub summary: Option<SummaryRow>,
}

/// Reuses pipeline stages with identical inputs across orders and methods:
/// the first-task models, which every order shares, and teachers, which
/// depend only on the task sequence seen so far.
#[derive(Default)]
pub struct Runner {
    banks: HashMap<String, PromptBank>,
    teachers: HashMap<String, TeacherState>,
    models: HashMap<String, ModelParams<f64>>,
    pub reuse_stages: bool,
}

fn cache_key(parts: serde_json::Value) -> String {
    hex::encode(Sha256::digest(parts.to_string().as_bytes()))
}

/// The learner a pipeline carries from task to task.
enum Learner {
    Bank(PromptBank),
    Single(ModelParams<f64>),
    Teacher,
}

struct Pipeline<'a> {
    config: &'a ExperimentConfig,
    vocab: &'a Vocabulary,
    learner: Option<Learner>,
    teacher: Option<TeacherState>,
    /// Tasks trained before the current one.
    seen: Vec<Task>,
}

impl Runner {
    pub fn new() -> Self {
        Self {
            reuse_stages: true,
            ..Default::default()
        }
    }

    /// One record per order seed, plus the cross-order summary. A failing
    /// order yields a record carrying the error; the other orders still run.
    pub fn run_experiment(
        &mut self,
        config: &ExperimentConfig,
    ) -> Result<Experiment, HarnessError> {
        config.validate()?;
        let (stream, vocab) = config.load_stream()?;
        let mut records = Vec::new();
        for &seed in &config.order_seeds {
            let mut record = RunRecord::new(config, seed);
            if let Err(e) = self.run_order(config, &stream, &vocab, seed, &mut record) {
                log::error!("{} order {seed}: {e}", config.method);
                record.error = Some(e.to_string());
            }
            records.push(record);
        }
        let summary = summarize(&records).into_iter().next();
        Ok(Experiment { records, summary })
    }

    /// The adapted bank (backbone and shared prompt after the first task)
    /// for `config`, computed once per runner.
    pub fn adapted(&mut self, config: &ExperimentConfig) -> Result<PromptBank, HarnessError> {
        config.validate()?;
        let (stream, vocab) = config.load_stream()?;
        let ordered = ordered_stream(&stream, &config.stream, config.order_seeds[0])?;
        self.adapted_bank(config, &ordered.tasks[0], &vocab)
    }

    /// The teacher of `config` after training on tasks `0..=upto` in the
    /// order given by `order_seed`.
    pub fn teacher_after(
        &mut self,
        config: &ExperimentConfig,
        order_seed: u64,
        upto: usize,
    ) -> Result<TeacherState, HarnessError> {
        config.validate()?;
        let (stream, vocab) = config.load_stream()?;
        let ordered = ordered_stream(&stream, &config.stream, order_seed)?;
        if upto >= ordered.len() {
            return Err(HarnessError::Config(format!(
                "task {upto} of a {}-task stream",
                ordered.len()
            )));
        }
        let use_context = config.method != MethodKind::C3NoIct;
        let mut teacher = None;
        for (j, task) in ordered.tasks[..=upto].iter().enumerate() {
            teacher = Some(self.next_teacher(
                config,
                teacher,
                &ordered.tasks[..j],
                task,
                &vocab,
                use_context,
            )?);
        }
        Ok(teacher.expect("at least one task"))
    }

    fn run_order(
        &mut self,
        config: &ExperimentConfig,
        stream: &TaskStream,
        vocab: &Vocabulary,
        seed: u64,
        record: &mut RunRecord,
    ) -> Result<(), HarnessError> {
        let ordered = ordered_stream(stream, &config.stream, seed)?;
        let k = ordered.len();
        record.task_order = ordered
            .tasks
            .iter()
            .map(|t| t.table_names().into_iter().collect::<Vec<_>>().join(","))
            .collect();
        let mut matrix = AccuracyMatrix::new(k);
        let mut pipe = Pipeline {
            config,
            vocab,
            learner: None,
            teacher: None,
            seen: Vec::new(),
        };
        let tests: Vec<EvalSet> = ordered
            .tasks
            .iter()
            .map(|t| Ok(EvalSet::new(vocab, &plain_pairs(t, &t.test)?)))
            .collect::<Result<_, ContinualError>>()?;
        for (j, task) in ordered.tasks.iter().enumerate() {
            let start = Instant::now();
            self.train_task(&mut pipe, task, record)?;
            pipe.seen.push(task.clone());
            for (i, past) in ordered.tasks[..=j].iter().enumerate() {
                let preds = pipe.predict(past, &tests[i])?;
                let (acc, flags) = evaluate_task(&preds, &tests[i].golds)?;
                matrix.set(i, j, acc)?;
                for (n, ((p, g), m)) in preds
                    .into_iter()
                    .zip(&tests[i].golds)
                    .zip(flags)
                    .enumerate()
                {
                    record.predictions.push(PredictionRecord {
                        task: i,
                        checkpoint: j,
                        example: n,
                        prediction: p,
                        gold: g.clone(),
                        matched: m,
                    });
                }
            }
            record.task_seconds.push(start.elapsed().as_secs_f64());
            if let Some(fp) = pipe.fingerprint() {
                record.backbone_fingerprints.push(fp);
            }
            log::info!(
                "{} order {seed}: task {j}/{} done in {:.1}s, a[{j}][{j}] = {:.1}",
                config.method,
                k - 1,
                record.task_seconds[j],
                matrix.get(j, j).unwrap_or(f64::NAN)
            );
        }
        let (m, report) =
            report_from_predictions(&record.predictions, k, config.method.name(), seed)?;
        debug_assert_eq!(m, matrix);
        record.matrix = Some(matrix);
        record.report = Some(report);

        if let Some(dir) = &config.out_dir {
            let run_dir = dir.join(format!("{}_order{seed}", config.method));
            std::fs::create_dir_all(&run_dir)
                .map_err(|e| HarnessError::Io(format!("{}: {e}", run_dir.display())))?;
            let path = run_dir.join("predictions.jsonl");
            write_predictions(&record.predictions, &path)?;
            record.predictions_path = Some(path);
            if let Some(Learner::Bank(bank)) = &pipe.learner {
                let path = run_dir.join("bank");
                save_bank(bank, Some(vocab), &path)?;
                record.bank_path = Some(path);
            }
            if !record.distill.is_empty() {
                write_distill_records(&record.distill, &run_dir.join("distill.jsonl"))?;
            }
        }
        Ok(())
    }

    fn train_task(
        &mut self,
        pipe: &mut Pipeline<'_>,
        task: &Task,
        record: &mut RunRecord,
    ) -> Result<(), HarnessError> {
        let cfg = pipe.config;
        let vocab = pipe.vocab;
        let train_cfg = cfg.train.with_seed(task.content_seed());
        let teacher_cfg = cfg.teacher_train.with_seed(task.content_seed());
        let use_context = cfg.method != MethodKind::C3NoIct;
        if cfg.method.uses_teacher() {
            let teacher = self.next_teacher(
                cfg,
                pipe.teacher.take(),
                &pipe.seen,
                task,
                vocab,
                use_context,
            )?;
            let inputs = EvalSet::new(
                vocab,
                &TeacherState::inputs(task, &task.test, &cfg.retriever, use_context)?,
            );
            let preds = predict(
                &teacher.params,
                None,
                vocab,
                &inputs.sources,
                teacher_cfg.max_decode_len,
            )?;
            record
                .teacher_accuracy
                .push(evaluate_task(&preds, &inputs.golds)?.0);
            record
                .context_rates
                .push(context_rate(task, &cfg.retriever)?);
            pipe.teacher = Some(teacher);
        }
        let j = task.index;
        match cfg.method {
            MethodKind::Peft | MethodKind::ContinualInit | MethodKind::C3 | MethodKind::C3NoIct => {
                if j == 0 {
                    pipe.learner = Some(Learner::Bank(self.adapted_bank(cfg, task, vocab)?));
                    return Ok(());
                }
                let Some(Learner::Bank(bank)) = pipe.learner.as_mut() else {
                    unreachable!("bank created at task 0")
                };
                match cfg.method {
                    MethodKind::Peft => {
                        continual_prompt_tune(bank, task, vocab, PromptInit::Shared, &train_cfg)?;
                    }
                    MethodKind::ContinualInit => {
                        continual_prompt_tune(bank, task, vocab, PromptInit::Previous, &train_cfg)?;
                    }
                    _ => {
                        let teacher = pipe.teacher.as_ref().expect("teacher trained above");
                        let (_, records) = distill_student(
                            bank,
                            teacher,
                            task,
                            vocab,
                            &cfg.retriever,
                            use_context,
                            PromptInit::Shared,
                            &train_cfg,
                        )?;
                        record.distill.push(records);
                    }
                }
            }
            MethodKind::NoTaskAdapt => {
                if j == 0 {
                    let backbone = ModelParams::init(&student_config(cfg, vocab), cfg.model_seed)?;
                    let init = PromptMatrix::random(
                        0,
                        cfg.prompt_len,
                        backbone.config.prompt_dim(),
                        prompt_seed(cfg),
                    );
                    let mut bank = PromptBank::new(backbone, init.clone())?;
                    prompt_tune_from(&mut bank, task, vocab, init, &train_cfg)?;
                    pipe.learner = Some(Learner::Bank(bank));
                } else if let Some(Learner::Bank(bank)) = pipe.learner.as_mut() {
                    continual_prompt_tune(bank, task, vocab, PromptInit::Shared, &train_cfg)?;
                }
            }
            MethodKind::FineTune | MethodKind::MultiTask => {
                if j == 0 {
                    pipe.learner = Some(Learner::Single(self.first_fine_tune(cfg, task, vocab)?));
                    return Ok(());
                }
                let Some(Learner::Single(params)) = pipe.learner.as_mut() else {
                    unreachable!("model created at task 0")
                };
                let (train, valid) = if cfg.method == MethodKind::FineTune {
                    (
                        plain_pairs(task, &task.train)?,
                        plain_pairs(task, &task.valid)?,
                    )
                } else {
                    let seen = pipe.seen.iter().chain(std::iter::once(task));
                    let (mut tr, mut va) = (Vec::new(), Vec::new());
                    for t in seen {
                        tr.extend(plain_pairs(t, &t.train)?);
                        va.extend(plain_pairs(t, &t.valid)?);
                    }
                    (tr, va)
                };
                fine_tune(params, vocab, &train, &valid, &train_cfg)?;
            }
            MethodKind::TeacherOnly => pipe.learner = Some(Learner::Teacher),
        }
        Ok(())
    }

    fn adapted_bank(
        &mut self,
        cfg: &ExperimentConfig,
        task: &Task,
        vocab: &Vocabulary,
    ) -> Result<PromptBank, HarnessError> {
        let train_cfg = cfg.train.with_seed(task.content_seed());
        let key = cache_key(serde_json::json!([
            "bank",
            task,
            student_config(cfg, vocab),
            cfg.prompt_len,
            train_cfg,
            cfg.model_seed
        ]));
        if let Some(b) = self.banks.get(&key).filter(|_| self.reuse_stages) {
            log::info!("reusing adapted backbone {}", &key[..12]);
            return Ok(b.clone());
        }
        let backbone = ModelParams::init(&student_config(cfg, vocab), cfg.model_seed)?;
        let (bank, outcome) = initial_task_adaptation(
            backbone,
            task,
            vocab,
            cfg.prompt_len,
            prompt_seed(cfg),
            &train_cfg,
        )?;
        log::info!(
            "initial adaptation: {} epochs, best validation {:?}",
            outcome.epochs_run,
            outcome.best_accuracy()
        );
        self.banks.insert(key, bank.clone());
        Ok(bank)
    }

    /// The teacher after training on `seen` followed by `task`. Depends only
    /// on that task sequence and the teacher settings, so runs that share a
    /// prefix of the order share teachers.
    fn next_teacher(
        &mut self,
        cfg: &ExperimentConfig,
        previous: Option<TeacherState>,
        seen: &[Task],
        task: &Task,
        vocab: &Vocabulary,
        use_context: bool,
    ) -> Result<TeacherState, HarnessError> {
        let teacher_cfg = cfg.teacher_train.with_seed(task.content_seed());
        let model = ModelConfig::for_size(cfg.teacher, vocab.len());
        let prefix: Vec<u64> = seen
            .iter()
            .chain(std::iter::once(task))
            .map(Task::content_seed)
            .collect();
        let key = cache_key(serde_json::json!([
            "teacher",
            prefix,
            task,
            model,
            cfg.teacher_train,
            cfg.retriever,
            use_context,
            cfg.model_seed
        ]));
        if let Some(t) = self.teachers.get(&key).filter(|_| self.reuse_stages) {
            log::info!("reusing teacher {}", &key[..12]);
            return Ok(t.clone());
        }
        let mut t = match previous {
            Some(t) => t,
            None => TeacherState::fresh(ModelParams::init(&model, teacher_seed(cfg))?),
        };
        teacher_ict_train(
            &mut t,
            task,
            vocab,
            &cfg.retriever,
            use_context,
            &teacher_cfg,
        )?;
        if self.reuse_stages {
            self.teachers.insert(key, t.clone());
        }
        Ok(t)
    }

    fn first_fine_tune(
        &mut self,
        cfg: &ExperimentConfig,
        task: &Task,
        vocab: &Vocabulary,
    ) -> Result<ModelParams<f64>, HarnessError> {
        let train_cfg = cfg.train.with_seed(task.content_seed());
        let model = student_config(cfg, vocab);
        let key = cache_key(serde_json::json!([
            "fine-tune",
            task,
            model,
            train_cfg,
            cfg.model_seed
        ]));
        if let Some(m) = self.models.get(&key).filter(|_| self.reuse_stages) {
            return Ok(m.clone());
        }
        let mut params = ModelParams::init(&model, cfg.model_seed)?;
        fine_tune(
            &mut params,
            vocab,
            &plain_pairs(task, &task.train)?,
            &plain_pairs(task, &task.valid)?,
            &train_cfg,
        )?;
        self.models.insert(key, params.clone());
        Ok(params)
    }
}

fn student_config(cfg: &ExperimentConfig, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig::for_size(cfg.student, vocab.len())
}

fn prompt_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.model_seed.wrapping_add(1)
}

fn teacher_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.model_seed.wrapping_add(2)
}

/// Share of `task`'s training examples for which `r` demonstrations qualify.
pub fn context_rate(task: &Task, retriever: &RetrieverConfig) -> Result<f64, HarnessError> {
    if task.train.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for e in &task.train {
        let ctx = context_input(task, e, &task.train, retriever).map_err(ContinualError::from)?;
        hits += ctx.with_demonstrations as usize;
    }
    Ok(hits as f64 / task.train.len() as f64)
}

impl Pipeline<'_> {
    fn predict(&self, task: &Task, test: &EvalSet) -> Result<Vec<String>, HarnessError> {
        let max_len = self.config.train.max_decode_len;
        let preds = match self.learner.as_ref().expect("trained before evaluation") {
            Learner::Bank(bank) => bank.predict(task.index, self.vocab, &test.sources, max_len)?,
            Learner::Single(params) => predict(params, None, self.vocab, &test.sources, max_len)?,
            Learner::Teacher => {
                let teacher = self.teacher.as_ref().expect("teacher-only pipeline");
                let inputs = TeacherState::inputs(task, &task.test, &self.config.retriever, true)?;
                let sources = EvalSet::new(self.vocab, &inputs).sources;
                predict(
                    &teacher.params,
                    None,
                    self.vocab,
                    &sources,
                    self.config.teacher_train.max_decode_len,
                )?
            }
        };
        Ok(preds)
    }

    fn fingerprint(&self) -> Option<String> {
        match self.learner.as_ref()? {
            Learner::Bank(bank) => Some(bank.backbone.fingerprint()),
            Learner::Single(params) => Some(params.fingerprint()),
            Learner::Teacher => self.teacher.as_ref().map(|t| t.params.fingerprint()),
        }
    }
}

/// Serialized stream after merging and ordering, for inspection.
pub fn ordered_stream_json(
    config: &ExperimentConfig,
    order_seed: u64,
) -> Result<String, HarnessError> {
    let (stream, _) = config.load_stream()?;
    Ok(stream_to_json(&ordered_stream(
        &stream,
        &config.stream,
        order_seed,
    )?))
}

#[cfg(test)]
mod tests;
