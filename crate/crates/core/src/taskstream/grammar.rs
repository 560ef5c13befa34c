use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Difficulty, Example, Schema, StreamConfig, StreamError, Table, Task, TaskStream};

const TABLE_ATOMS: [&str; 5] = ["ship", "farm", "club", "shop", "mill"];
const COLUMN_ATOMS: [&str; 7] = ["name", "age", "city", "price", "rank", "color", "level"];
const VALUES: [&str; 12] = [
    "red", "blue", "green", "paris", "rome", "oslo", "gold", "silver", "alpha", "beta", "gamma",
    "delta",
];
const KEY: &str = "id";

/// Table-name atom pairs per task. Every ordered pair of distinct atoms is
/// used exactly once, so table names never repeat across tasks while each
/// atom token still appears in most tasks.
const TABLE_PAIRS: [[(usize, usize); 2]; 10] = [
    [(1, 2), (3, 4)],
    [(0, 2), (4, 3)],
    [(0, 3), (1, 4)],
    [(0, 1), (2, 4)],
    [(1, 0), (2, 3)],
    [(1, 3), (4, 2)],
    [(0, 4), (3, 2)],
    [(3, 0), (4, 1)],
    [(4, 0), (2, 1)],
    [(2, 0), (3, 1)],
];

pub const MAX_TASKS: usize = TABLE_PAIRS.len();

const SQL_KEYWORDS: [&str; 9] = [
    "SELECT", "FROM", "WHERE", "COUNT", "MAX", "GROUP", "BY", "JOIN", "USING",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Template {
    Show,
    WhatIs,
    Count,
    Largest,
    Join,
}

impl Template {
    fn for_difficulty(d: Difficulty) -> &'static [Template] {
        match d {
            Difficulty::Simple => &[Template::Show, Template::WhatIs],
            Difficulty::Complex => &[Template::Count, Template::Largest, Template::Join],
        }
    }

    /// All (question, sql) instances over a schema.
    fn instances(self, schema: &Schema) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let attrs = |t: &Table| -> Vec<String> {
            t.columns.iter().filter(|c| *c != KEY).cloned().collect()
        };
        for t in &schema.tables {
            let tbl = &t.name;
            let cols = attrs(t);
            match self {
                Template::Show | Template::WhatIs => {
                    for col in &cols {
                        for col2 in cols.iter().filter(|c| *c != col) {
                            for val in VALUES {
                                let q = if self == Template::Show {
                                    format!("show the {col} of {tbl} where {col2} is {val}")
                                } else {
                                    format!("what is the {col} in {tbl} whose {col2} equals {val}")
                                };
                                out.push((
                                    q,
                                    format!("SELECT {col} FROM {tbl} WHERE {col2} = '{val}'"),
                                ));
                            }
                        }
                    }
                }
                Template::Count => {
                    for col in &cols {
                        for val in VALUES {
                            out.push((
                                format!("how many {tbl} rows have {col} {val}"),
                                format!("SELECT COUNT(*) FROM {tbl} WHERE {col} = '{val}'"),
                            ));
                        }
                    }
                }
                Template::Largest => {
                    for col in &cols {
                        for col2 in cols.iter().filter(|c| *c != col) {
                            out.push((
                                format!("largest {col} of {tbl} for each {col2}"),
                                format!("SELECT {col2}, MAX({col}) FROM {tbl} GROUP BY {col2}"),
                            ));
                        }
                    }
                }
                Template::Join => {
                    for t2 in schema.tables.iter().filter(|o| o.name != t.name) {
                        let tbl2 = &t2.name;
                        for col in &cols {
                            for col2 in attrs(t2) {
                                for val in VALUES {
                                    out.push((
                                        format!("list {col} of {tbl} joined with {tbl2} where {col2} is {val}"),
                                        format!("SELECT {col} FROM {tbl} JOIN {tbl2} USING (id) WHERE {col2} = '{val}'"),
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn task_schema(k: usize, rng: &mut ChaCha8Rng) -> Schema {
    let mut cols: Vec<&str> = COLUMN_ATOMS
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != k % COLUMN_ATOMS.len())
        .map(|(_, c)| *c)
        .collect();
    cols.shuffle(rng);
    let tables = TABLE_PAIRS[k]
        .iter()
        .zip(cols.chunks(3))
        .map(|(&(a, b), chunk)| {
            let mut columns = vec![KEY.to_string()];
            columns.extend(chunk.iter().map(|c| c.to_string()));
            Table {
                name: format!("{}_{}", TABLE_ATOMS[a], TABLE_ATOMS[b]),
                columns,
            }
        })
        .collect();
    Schema { tables }
}

/// Generates `config.k` tasks (before any merging). Deterministic in
/// `config.seed`.
pub fn generate_stream(config: &StreamConfig) -> Result<TaskStream, StreamError> {
    config.validate()?;
    if config.k > MAX_TASKS {
        return Err(StreamError::Capacity(format!(
            "{} tasks requested, the name pool supports {MAX_TASKS}",
            config.k
        )));
    }
    let need = config.train_size + config.valid_size + config.test_size;
    let mut tasks = Vec::with_capacity(config.k);
    for k in 0..config.k {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(k as u64 + 1);
        let difficulty = if config.alternate {
            if k % 2 == 0 {
                Difficulty::Complex
            } else {
                Difficulty::Simple
            }
        } else if rng.random_bool(0.5) {
            Difficulty::Complex
        } else {
            Difficulty::Simple
        };
        let schema = task_schema(k, &mut rng);
        let mut pools: Vec<Vec<(String, String)>> = Template::for_difficulty(difficulty)
            .iter()
            .map(|t| {
                let mut v = t.instances(&schema);
                v.shuffle(&mut rng);
                v.reverse();
                v
            })
            .collect();
        let mut drawn = Vec::with_capacity(need);
        while drawn.len() < need {
            let before = drawn.len();
            for pool in pools.iter_mut() {
                if drawn.len() == need {
                    break;
                }
                if let Some(inst) = pool.pop() {
                    drawn.push(inst);
                }
            }
            if drawn.len() == before {
                return Err(StreamError::Capacity(format!(
                    "task {k}: only {before} distinct {difficulty:?} examples, {need} requested"
                )));
            }
        }
        drawn.shuffle(&mut rng);
        let mut examples = drawn.into_iter().map(|(question, sql)| Example {
            question,
            schema_id: 0,
            sql,
            difficulty,
        });
        let train = examples.by_ref().take(config.train_size).collect();
        let valid = examples.by_ref().take(config.valid_size).collect();
        let test = examples.collect();
        tasks.push(Task {
            index: k,
            schemas: vec![schema],
            train,
            valid,
            test,
        });
    }
    Ok(TaskStream { tasks })
}

/// Difficulty from the SQL alone: aggregation, grouping or joins make a
/// query complex.
pub fn classify_sql(sql: &str) -> Difficulty {
    let complex = sql_words(sql).iter().any(|w| {
        matches!(
            w.to_ascii_uppercase().as_str(),
            "COUNT" | "MAX" | "GROUP" | "JOIN"
        )
    });
    if complex {
        Difficulty::Complex
    } else {
        Difficulty::Simple
    }
}

fn sql_words(sql: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    for c in sql.chars() {
        if c == '\'' {
            quoted = !quoted;
            cur.clear();
            continue;
        }
        if quoted {
            continue;
        }
        if c.is_alphanumeric() || c == '_' {
            cur.push(c);
        } else if !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Identifiers (tables and columns) referenced by a query: every word
/// outside string literals that is not a keyword.
pub fn sql_identifiers(sql: &str) -> Vec<String> {
    sql_words(sql)
        .into_iter()
        .filter(|w| !SQL_KEYWORDS.contains(&w.to_ascii_uppercase().as_str()))
        .collect()
}

/// Closed vocabulary of the grammar: every token any generated stream can
/// contain, independent of the seed.
pub fn grammar_vocabulary() -> crate::seq2seq::Vocabulary {
    let tables: Vec<Table> = (0..TABLE_ATOMS.len())
        .map(|i| Table {
            name: format!(
                "{}_{}",
                TABLE_ATOMS[i],
                TABLE_ATOMS[(i + 1) % TABLE_ATOMS.len()]
            ),
            columns: std::iter::once(KEY)
                .chain(COLUMN_ATOMS)
                .map(String::from)
                .collect(),
        })
        .collect();
    let schema = Schema { tables };
    let mut texts = vec![schema.flatten()];
    for t in [
        Template::Show,
        Template::WhatIs,
        Template::Count,
        Template::Largest,
        Template::Join,
    ] {
        for (q, sql) in t.instances(&schema) {
            texts.push(q);
            texts.push(sql);
        }
    }
    crate::seq2seq::Vocabulary::from_texts(texts.iter().map(String::as_str))
}
