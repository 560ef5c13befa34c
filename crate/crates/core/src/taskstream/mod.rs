//! Synthetic text-to-SQL task streams with pairwise disjoint schemas.

mod grammar;
mod io;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use grammar::{classify_sql, generate_stream, grammar_vocabulary, sql_identifiers, MAX_TASKS};
pub use io::{load_stream, parse_stream, save_stream, stream_to_json};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StreamError {
    #[error("invalid stream config: {0}")]
    Config(String),
    #[error("capacity: {0}")]
    Capacity(String),
    #[error("dangling reference: {0}")]
    Reference(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("order constraint infeasible: {0}")]
    Constraint(String),
    #[error("schema not found in stream: {0}")]
    NotFound(String),
    #[error("schema disjointness violated: {0}")]
    Disjointness(String),
    #[error("parse error at line {line}, column {column}: {message}\n  | {context}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
        context: String,
    },
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
}

/// One database: tables in order, each column owned by its table.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Schema {
    pub tables: Vec<Table>,
}

impl Schema {
    pub fn table_names(&self) -> BTreeSet<&str> {
        self.tables.iter().map(|t| t.name.as_str()).collect()
    }

    /// `table.column` for every column.
    pub fn qualified_columns(&self) -> BTreeSet<String> {
        self.tables
            .iter()
            .flat_map(|t| t.columns.iter().map(move |c| format!("{}.{c}", t.name)))
            .collect()
    }

    /// Flattened schema text: `t1 : c1 , c2 ; t2 : c3`.
    pub fn flatten(&self) -> String {
        self.tables
            .iter()
            .map(|t| format!("{} : {}", t.name, t.columns.join(" , ")))
            .collect::<Vec<_>>()
            .join(" ; ")
    }

    fn validate(&self) -> Result<(), StreamError> {
        if self.tables.is_empty() {
            return Err(StreamError::Contract("schema without tables".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tables {
            if !seen.insert(t.name.as_str()) {
                return Err(StreamError::Contract(format!(
                    "table {:?} repeated in schema",
                    t.name
                )));
            }
            let mut cols = BTreeSet::new();
            for c in &t.columns {
                if !cols.insert(c.as_str()) {
                    return Err(StreamError::Contract(format!(
                        "column {c:?} repeated in table {:?}",
                        t.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Simple,
    Complex,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    #[serde(rename = "q")]
    pub question: String,
    /// Index into the owning task's schema list.
    pub schema_id: usize,
    pub sql: String,
    pub difficulty: Difficulty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub index: usize,
    pub schemas: Vec<Schema>,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl Task {
    pub fn schema(&self, e: &Example) -> Result<&Schema, StreamError> {
        self.schemas.get(e.schema_id).ok_or_else(|| {
            StreamError::Reference(format!(
                "schema_id {} in task {} with {} schema(s)",
                e.schema_id,
                self.index,
                self.schemas.len()
            ))
        })
    }

    /// Flattened model input `X′` for an example of this task.
    pub fn flatten(&self, e: &Example) -> Result<String, StreamError> {
        flatten_input(&self.schemas, e)
    }

    /// Complex when any example is complex.
    pub fn difficulty(&self) -> Difficulty {
        let complex = self
            .train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .any(|e| e.difficulty == Difficulty::Complex);
        if complex {
            Difficulty::Complex
        } else {
            Difficulty::Simple
        }
    }

    pub fn table_names(&self) -> BTreeSet<&str> {
        self.schemas.iter().flat_map(Schema::table_names).collect()
    }

    /// Seed derived from the task's table names only, so it does not depend
    /// on where the task sits in an order.
    pub fn content_seed(&self) -> u64 {
        let mut h = Sha256::new();
        for name in self.table_names() {
            h.update(name.as_bytes());
            h.update([0]);
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }

    pub fn all_examples(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

/// `t1 : c1 , c2 ; t2 : c3 | q`.
pub fn flatten_input(schemas: &[Schema], e: &Example) -> Result<String, StreamError> {
    let schema = schemas.get(e.schema_id).ok_or_else(|| {
        StreamError::Reference(format!("schema_id {} of {}", e.schema_id, schemas.len()))
    })?;
    Ok(format!("{} | {}", schema.flatten(), e.question))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub k: usize,
    pub n: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub alternate: bool,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            k: 8,
            n: 3,
            train_size: 64,
            valid_size: 16,
            test_size: 32,
            alternate: true,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<(), StreamError> {
        if self.n < 1 || self.n >= self.k {
            return Err(StreamError::Config(format!(
                "need 1 ≤ N < K, got N={} K={}",
                self.n, self.k
            )));
        }
        if self.train_size == 0 || self.valid_size == 0 || self.test_size == 0 {
            return Err(StreamError::Config("split sizes must be ≥ 1".into()));
        }
        if self.train_size >= 500 {
            return Err(StreamError::Config(format!(
                "few-shot cap: train size {} ≥ 500",
                self.train_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Structural checks: schemas well formed, references resolvable, splits
    /// disjoint, table names disjoint across tasks.
    pub fn validate(&self) -> Result<(), StreamError> {
        let mut owner: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
        for (ti, task) in self.tasks.iter().enumerate() {
            if task.schemas.is_empty() {
                return Err(StreamError::Contract(format!("task {ti} has no schema")));
            }
            for s in &task.schemas {
                s.validate()?;
                for name in s.table_names() {
                    if let Some(prev) = owner.insert(name, ti) {
                        if prev != ti {
                            return Err(StreamError::Disjointness(format!(
                                "table {name:?} appears in tasks {prev} and {ti}"
                            )));
                        }
                        return Err(StreamError::Contract(format!(
                            "table {name:?} repeated within task {ti}"
                        )));
                    }
                }
            }
            let mut seen = std::collections::HashSet::new();
            for (split, list) in [
                ("train", &task.train),
                ("valid", &task.valid),
                ("test", &task.test),
            ] {
                for e in list {
                    task.schema(e)?;
                    if !seen.insert(e) {
                        return Err(StreamError::Contract(format!(
                            "example {:?} appears twice in task {ti} ({split})",
                            e.question
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Index of the task owning exactly this schema.
    pub fn schema_to_task_index(&self, schema: &Schema) -> Result<usize, StreamError> {
        let names = schema.table_names();
        self.tasks
            .iter()
            .position(|t| t.schemas.iter().any(|s| s.table_names() == names))
            .ok_or_else(|| StreamError::NotFound(format!("{names:?}")))
    }

    /// Every string the stream can feed a model: flattened inputs and SQL.
    pub fn texts(&self) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.tasks {
            for e in t.all_examples() {
                out.push(t.flatten(e).expect("validated stream"));
                out.push(e.sql.clone());
            }
        }
        out
    }
}

fn reindex(tasks: &mut [Task]) {
    for (i, t) in tasks.iter_mut().enumerate() {
        t.index = i;
    }
}

/// Folds the first `n` tasks into task 0; the rest shift down.
pub fn merge_initial_tasks(stream: &TaskStream, n: usize) -> Result<TaskStream, StreamError> {
    if n < 1 || n > stream.len() || (n == stream.len() && n > 1) {
        return Err(StreamError::Contract(format!(
            "cannot merge first {n} of {} tasks",
            stream.len()
        )));
    }
    let mut merged = Task {
        index: 0,
        schemas: Vec::new(),
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for task in &stream.tasks[..n] {
        let offset = merged.schemas.len();
        merged.schemas.extend(task.schemas.iter().cloned());
        let shift = |list: &[Example]| -> Vec<Example> {
            list.iter()
                .map(|e| Example {
                    schema_id: e.schema_id + offset,
                    ..e.clone()
                })
                .collect()
        };
        merged.train.extend(shift(&task.train));
        merged.valid.extend(shift(&task.valid));
        merged.test.extend(shift(&task.test));
    }
    let mut tasks = vec![merged];
    tasks.extend(stream.tasks[n..].iter().cloned());
    reindex(&mut tasks);
    Ok(TaskStream { tasks })
}

/// Uniformly random order of all tasks (within parity classes when
/// `alternate` is set: even positions complex, odd positions simple).
pub fn permute_order(
    stream: &TaskStream,
    seed: u64,
    alternate: bool,
) -> Result<TaskStream, StreamError> {
    permute_tail(stream, seed, alternate, 0)
}

/// Like [`permute_order`] but keeps the first `keep` tasks in place.
/// Parity refers to positions in the full stream.
pub fn permute_tail(
    stream: &TaskStream,
    seed: u64,
    alternate: bool,
    keep: usize,
) -> Result<TaskStream, StreamError> {
    let k = stream.len();
    if keep > k {
        return Err(StreamError::Contract(format!(
            "keep {keep} exceeds {k} tasks"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<usize> = (keep..k).collect();
    let mut order: Vec<usize> = (0..k).collect();
    if alternate {
        for (parity, want) in [(0, Difficulty::Complex), (1, Difficulty::Simple)] {
            let slots: Vec<usize> = positions
                .iter()
                .copied()
                .filter(|p| p % 2 == parity)
                .collect();
            let mut pool: Vec<usize> = (keep..k)
                .filter(|&i| stream.tasks[i].difficulty() == want)
                .collect();
            if pool.len() != slots.len() {
                return Err(StreamError::Constraint(format!(
                    "{} {want:?} task(s) for {} position(s) of parity {parity}",
                    pool.len(),
                    slots.len()
                )));
            }
            pool.shuffle(&mut rng);
            for (slot, src) in slots.into_iter().zip(pool) {
                order[slot] = src;
            }
        }
    } else {
        let mut tail: Vec<usize> = positions.clone();
        tail.shuffle(&mut rng);
        for (slot, src) in positions.into_iter().zip(tail) {
            order[slot] = src;
        }
    }
    let mut tasks: Vec<Task> = order.iter().map(|&i| stream.tasks[i].clone()).collect();
    reindex(&mut tasks);
    Ok(TaskStream { tasks })
}
