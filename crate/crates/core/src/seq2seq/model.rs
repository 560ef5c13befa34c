use std::sync::Arc;

use super::params::{Attn, Ffn, Norm, Weights};
use super::vocab::{BOS, EOS};
use super::{ModelConfig, ModelError, ModelParams, PromptMatrix};
use crate::numerics::{log_softmax_rows, AttnLayout, Scalar, Tape, Tensor, Var};

/// Binds every parameter as a tape leaf.
pub fn bind<S: Scalar>(tape: &mut Tape<S>, params: &ModelParams<S>) -> Weights<Var> {
    params.weights.map(|_, t| tape.leaf(t))
}

/// Binds only the leaves whose name satisfies `keep`; the others become a
/// shared empty constant that fails any shape check it reaches.
fn bind_subset<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    keep: impl Fn(&str) -> bool,
) -> Weights<Var> {
    let empty = tape.constant(vec![0], vec![]).expect("empty constant");
    params
        .weights
        .map(|name, t| if keep(name) { tape.leaf(t) } else { empty })
}

/// Decoder input under teacher forcing: `<bos>` followed by all but the
/// last target token.
pub fn decoder_inputs(target: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(target.len());
    if !target.is_empty() {
        ids.push(BOS);
        ids.extend_from_slice(&target[..target.len() - 1]);
    }
    ids
}

fn sinusoid<S: Scalar>(positions: impl Iterator<Item = usize>, d: usize) -> Vec<S> {
    let mut out = Vec::new();
    for pos in positions {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            out.push(S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

fn norm<S: Scalar>(tape: &mut Tape<S>, x: Var, n: &Norm<Var>) -> Result<Var, ModelError> {
    Ok(tape.layer_norm(x, n.gain, n.bias)?)
}

fn attn_block<S: Scalar>(
    tape: &mut Tape<S>,
    xq: Var,
    xkv: Var,
    a: &Attn<Var>,
    heads: usize,
    layout: Arc<AttnLayout>,
) -> Result<Var, ModelError> {
    let q = tape.matmul(xq, a.wq)?;
    let k = tape.matmul(xkv, a.wk)?;
    let v = tape.matmul(xkv, a.wv)?;
    let h = tape.attention(q, k, v, heads, layout)?;
    Ok(tape.matmul(h, a.wo)?)
}

fn ffn_block<S: Scalar>(tape: &mut Tape<S>, x: Var, f: &Ffn<Var>) -> Result<Var, ModelError> {
    let h = tape.matmul(x, f.w1)?;
    let h = tape.add_row(h, f.b1)?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, f.w2)?;
    Ok(tape.add_row(h, f.b2)?)
}

/// Encoder output for a packed batch: one block of rows per sequence.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub memory: Var,
    pub lengths: Vec<usize>,
}

fn check_source(cfg: &ModelConfig, m: usize, source: &[usize]) -> Result<(), ModelError> {
    let len = m + source.len();
    if len == 0 {
        return Err(ModelError::Length("empty encoder input".into()));
    }
    if len > cfg.max_len {
        return Err(ModelError::Length(format!(
            "encoder input of {len} positions ({m} prompt rows) exceeds max_len {}",
            cfg.max_len
        )));
    }
    check_ids(cfg, source)
}

fn check_ids(cfg: &ModelConfig, ids: &[usize]) -> Result<(), ModelError> {
    match ids.iter().find(|&&i| i >= cfg.vocab_size) {
        Some(bad) => Err(ModelError::Length(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        ))),
        None => Ok(()),
    }
}

fn check_target(cfg: &ModelConfig, target: &[usize]) -> Result<(), ModelError> {
    if target.len() > cfg.max_len {
        return Err(ModelError::Length(format!(
            "target of {} tokens exceeds max_len {}",
            target.len(),
            cfg.max_len
        )));
    }
    check_ids(cfg, target)
}

/// Runs the encoder over `[P ; embed(source)]` for every source.
/// `prompt` must be an `M × d` tape value (or `None` for `M = 0`).
pub fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    prompt: Option<Var>,
    sources: &[Vec<usize>],
) -> Result<Encoded, ModelError> {
    let d = cfg.d_model;
    let m = match prompt {
        Some(p) => {
            let shape = tape.shape(p);
            if shape.len() != 2 || shape[1] != d {
                return Err(ModelError::Config(format!(
                    "prompt shape {shape:?} does not match d_model {d}"
                )));
            }
            shape[0]
        }
        None => 0,
    };
    let mut ids = Vec::new();
    let mut lengths = Vec::with_capacity(sources.len());
    for s in sources {
        check_source(cfg, m, s)?;
        ids.extend_from_slice(s);
        lengths.push(m + s.len());
    }
    let emb = tape.gather_rows(w.embedding, &ids)?;
    let x = match prompt {
        Some(p) if m > 0 => {
            let all = tape.concat_rows(&[p, emb])?;
            let mut idx = Vec::with_capacity(lengths.iter().sum());
            let mut off = m;
            for &len in &lengths {
                idx.extend(0..m);
                idx.extend(off..off + len - m);
                off += len - m;
            }
            tape.gather_rows(all, &idx)?
        }
        _ => emb,
    };
    let pos = sinusoid::<S>(lengths.iter().flat_map(|&l| 0..l), d);
    let mut x = tape.add_const(x, &pos)?;
    let layout = Arc::new(AttnLayout::packed(&lengths, false));
    for layer in &w.encoder {
        let h = norm(tape, x, &layer.norm1)?;
        let h = attn_block(tape, h, h, &layer.attn, cfg.heads, layout.clone())?;
        x = tape.add(x, h)?;
        let h = norm(tape, x, &layer.norm2)?;
        let h = ffn_block(tape, h, &layer.ffn)?;
        x = tape.add(x, h)?;
    }
    let memory = norm(tape, x, &w.encoder_norm)?;
    Ok(Encoded { memory, lengths })
}

/// Decoder logits `[Σ len × vocab]` for packed decoder inputs.
pub fn decode<S: Scalar>(
    tape: &mut Tape<S>,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    enc: &Encoded,
    inputs: &[Vec<usize>],
) -> Result<Var, ModelError> {
    if inputs.len() != enc.lengths.len() {
        return Err(ModelError::Config(format!(
            "{} decoder inputs for {} encoded sources",
            inputs.len(),
            enc.lengths.len()
        )));
    }
    let lengths: Vec<usize> = inputs.iter().map(Vec::len).collect();
    let ids: Vec<usize> = inputs.concat();
    let x = tape.gather_rows(w.embedding, &ids)?;
    let pos = sinusoid::<S>(lengths.iter().flat_map(|&l| 0..l), cfg.d_model);
    let mut x = tape.add_const(x, &pos)?;
    let self_layout = Arc::new(AttnLayout::packed(&lengths, true));
    let cross_layout = Arc::new(AttnLayout::cross(&lengths, &enc.lengths));
    for layer in &w.decoder {
        let h = norm(tape, x, &layer.norm1)?;
        let h = attn_block(tape, h, h, &layer.self_attn, cfg.heads, self_layout.clone())?;
        x = tape.add(x, h)?;
        let h = norm(tape, x, &layer.norm2)?;
        let h = attn_block(
            tape,
            h,
            enc.memory,
            &layer.cross_attn,
            cfg.heads,
            cross_layout.clone(),
        )?;
        x = tape.add(x, h)?;
        let h = norm(tape, x, &layer.norm3)?;
        let h = ffn_block(tape, h, &layer.ffn)?;
        x = tape.add(x, h)?;
    }
    let x = norm(tape, x, &w.decoder_norm)?;
    let logits = tape.matmul(x, w.out_w)?;
    Ok(tape.add_row(logits, w.out_b)?)
}

/// Teacher-forced logits for a batch; row block `b` has `targets[b].len()`
/// rows, row `j` predicting `targets[b][j]`.
pub fn teacher_forced_logits<S: Scalar>(
    tape: &mut Tape<S>,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    prompt: Option<Var>,
    sources: &[Vec<usize>],
    targets: &[Vec<usize>],
) -> Result<Var, ModelError> {
    if sources.len() != targets.len() {
        return Err(ModelError::Config(format!(
            "{} sources, {} targets",
            sources.len(),
            targets.len()
        )));
    }
    for t in targets {
        if t.is_empty() {
            return Err(ModelError::Length("empty target sequence".into()));
        }
        check_target(cfg, t)?;
    }
    let enc = encode(tape, w, cfg, prompt, sources)?;
    let inputs: Vec<Vec<usize>> = targets.iter().map(|t| decoder_inputs(t)).collect();
    decode(tape, w, cfg, &enc, &inputs)
}

/// Per-step next-token logits `[T × vocab]` and the token chosen or forced
/// at each step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDistributions<S> {
    pub logits: Tensor<S>,
    pub tokens: Vec<usize>,
}

impl<S: Scalar> StepDistributions<S> {
    /// Tokens without the terminating `<eos>`.
    pub fn output(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    pub fn steps(&self) -> usize {
        self.logits.rows()
    }

    pub fn probs(&self, step: usize) -> Vec<S> {
        let row = self.logits.row(step);
        log_softmax_rows(row, row.len())
            .into_iter()
            .map(|v| v.exp())
            .collect()
    }

    pub fn argmax(&self) -> Vec<usize> {
        (0..self.steps())
            .map(|j| argmax(self.logits.row(j)))
            .collect()
    }
}

pub(crate) fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn split_rows<S: Scalar>(values: &[S], cols: usize, lengths: &[usize]) -> Vec<Tensor<S>> {
    let mut off = 0;
    lengths
        .iter()
        .map(|&l| {
            let t = Tensor::new(vec![l, cols], values[off * cols..(off + l) * cols].to_vec())
                .expect("row split");
            off += l;
            t
        })
        .collect()
}

impl<S: Scalar> ModelParams<S> {
    /// Teacher-forced step distributions for each `(source, target)` pair.
    pub fn forward_teacher_forced(
        &self,
        prompt: Option<&PromptMatrix<S>>,
        sources: &[Vec<usize>],
        targets: &[Vec<usize>],
    ) -> Result<Vec<StepDistributions<S>>, ModelError> {
        let mut tape = Tape::new();
        let w = bind(&mut tape, self);
        let p = prompt_var(&mut tape, prompt);
        let logits = teacher_forced_logits(&mut tape, &w, &self.config, p, sources, targets)?;
        let lengths: Vec<usize> = targets.iter().map(Vec::len).collect();
        Ok(
            split_rows(tape.value(logits), self.config.vocab_size, &lengths)
                .into_iter()
                .zip(targets)
                .map(|(logits, t)| StepDistributions {
                    logits,
                    tokens: t.clone(),
                })
                .collect(),
        )
    }

    /// `log p(target | source)` summed over steps, one value per pair.
    pub fn sequence_log_prob(
        &self,
        prompt: Option<&PromptMatrix<S>>,
        sources: &[Vec<usize>],
        targets: &[Vec<usize>],
    ) -> Result<Vec<S>, ModelError> {
        let dists = self.forward_teacher_forced(prompt, sources, targets)?;
        Ok(dists
            .iter()
            .zip(targets)
            .map(|(d, t)| {
                let v = d.logits.cols();
                let lp = log_softmax_rows(d.logits.data(), v);
                t.iter().enumerate().map(|(j, &y)| lp[j * v + y]).sum()
            })
            .collect())
    }

    /// Greedy token sequences with the trailing `<eos>` removed.
    pub fn greedy_tokens(
        &self,
        prompt: Option<&PromptMatrix<S>>,
        sources: &[Vec<usize>],
        max_steps: usize,
    ) -> Result<Vec<Vec<usize>>, ModelError> {
        Ok(self
            .greedy_decode(prompt, sources, max_steps)?
            .into_iter()
            .map(|d| d.output().to_vec())
            .collect())
    }

    /// Greedy decoding with per-layer key/value caches. Each sequence stops
    /// after emitting `<eos>` or after `max_steps` tokens.
    pub fn greedy_decode(
        &self,
        prompt: Option<&PromptMatrix<S>>,
        sources: &[Vec<usize>],
        max_steps: usize,
    ) -> Result<Vec<StepDistributions<S>>, ModelError> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let n = sources.len();
        let max_steps = max_steps.min(cfg.max_len);
        if n == 0 {
            return Ok(vec![]);
        }
        // Encoder pass and cross-attention keys/values, computed once.
        let (mem_lengths, cross_kv) = {
            let mut tape = Tape::new();
            let w = bind_subset(&mut tape, self, |name| {
                !name.starts_with("decoder.") || name.contains(".cross_attn.w")
            });
            let p = prompt_var(&mut tape, prompt);
            let enc = encode(&mut tape, &w, cfg, p, sources)?;
            let mut kv = Vec::with_capacity(cfg.decoder_layers);
            for layer in &w.decoder {
                let k = tape.matmul(enc.memory, layer.cross_attn.wk)?;
                let v = tape.matmul(enc.memory, layer.cross_attn.wv)?;
                kv.push((
                    split_rows(tape.value(k), d, &enc.lengths),
                    split_rows(tape.value(v), d, &enc.lengths),
                ));
            }
            (enc.lengths, kv)
        };

        let vsz = cfg.vocab_size;
        let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut rows: Vec<Vec<S>> = vec![Vec::new(); n];
        let mut last: Vec<usize> = vec![BOS; n];
        let mut alive: Vec<usize> = (0..n).collect();
        // self_cache[layer][seq] = (keys, values), row per generated position.
        let mut self_cache: Vec<Vec<(Vec<S>, Vec<S>)>> =
            vec![vec![(Vec::new(), Vec::new()); n]; cfg.decoder_layers];
        for step in 0..max_steps {
            if alive.is_empty() {
                break;
            }
            let mut tape = Tape::new();
            let w = bind_subset(&mut tape, self, |name| {
                name.starts_with("decoder") || name == "embedding" || name.starts_with("out_")
            });
            let ids: Vec<usize> = alive.iter().map(|&b| last[b]).collect();
            let x = tape.gather_rows(w.embedding, &ids)?;
            let pos = sinusoid::<S>(std::iter::repeat_n(step, alive.len()), d);
            let mut x = tape.add_const(x, &pos)?;
            let ones = vec![1; alive.len()];
            for (li, layer) in w.decoder.iter().enumerate() {
                // Self-attention against the cache extended by this step.
                let h = norm(&mut tape, x, &layer.norm1)?;
                let q = tape.matmul(h, layer.self_attn.wq)?;
                let k = tape.matmul(h, layer.self_attn.wk)?;
                let v = tape.matmul(h, layer.self_attn.wv)?;
                let (kv_new, vv_new) = (tape.value(k).to_vec(), tape.value(v).to_vec());
                let mut keys = Vec::new();
                let mut vals = Vec::new();
                for (r, &b) in alive.iter().enumerate() {
                    let cache = &mut self_cache[li][b];
                    cache.0.extend_from_slice(&kv_new[r * d..(r + 1) * d]);
                    cache.1.extend_from_slice(&vv_new[r * d..(r + 1) * d]);
                    keys.extend_from_slice(&cache.0);
                    vals.extend_from_slice(&cache.1);
                }
                let klens = vec![step + 1; alive.len()];
                let kc = tape.constant(vec![keys.len() / d, d], keys)?;
                let vc = tape.constant(vec![vals.len() / d, d], vals)?;
                let a = tape.attention(
                    q,
                    kc,
                    vc,
                    cfg.heads,
                    Arc::new(AttnLayout::cross(&ones, &klens)),
                )?;
                let a = tape.matmul(a, layer.self_attn.wo)?;
                x = tape.add(x, a)?;

                let h = norm(&mut tape, x, &layer.norm2)?;
                let q = tape.matmul(h, layer.cross_attn.wq)?;
                let (ck, cv) = &cross_kv[li];
                let mut keys = Vec::new();
                let mut vals = Vec::new();
                let mut mlens = Vec::with_capacity(alive.len());
                for &b in &alive {
                    keys.extend_from_slice(ck[b].data());
                    vals.extend_from_slice(cv[b].data());
                    mlens.push(mem_lengths[b]);
                }
                let kc = tape.constant(vec![keys.len() / d, d], keys)?;
                let vc = tape.constant(vec![vals.len() / d, d], vals)?;
                let a = tape.attention(
                    q,
                    kc,
                    vc,
                    cfg.heads,
                    Arc::new(AttnLayout::cross(&ones, &mlens)),
                )?;
                let a = tape.matmul(a, layer.cross_attn.wo)?;
                x = tape.add(x, a)?;

                let h = norm(&mut tape, x, &layer.norm3)?;
                let h = ffn_block(&mut tape, h, &layer.ffn)?;
                x = tape.add(x, h)?;
            }
            let x = norm(&mut tape, x, &w.decoder_norm)?;
            let logits = tape.matmul(x, w.out_w)?;
            let logits = tape.add_row(logits, w.out_b)?;
            let lv = tape.value(logits);
            let mut still = Vec::with_capacity(alive.len());
            for (r, &b) in alive.iter().enumerate() {
                let row = &lv[r * vsz..(r + 1) * vsz];
                let tok = argmax(row);
                rows[b].extend_from_slice(row);
                outputs[b].push(tok);
                if tok == EOS {
                    continue;
                }
                last[b] = tok;
                still.push(b);
            }
            alive = still;
        }
        Ok(outputs
            .into_iter()
            .zip(rows)
            .map(|(tokens, data)| StepDistributions {
                logits: Tensor::new(vec![tokens.len(), vsz], data).expect("decode rows"),
                tokens,
            })
            .collect())
    }
}

fn prompt_var<S: Scalar>(tape: &mut Tape<S>, prompt: Option<&PromptMatrix<S>>) -> Option<Var> {
    prompt
        .filter(|p| !p.is_empty())
        .map(|p| tape.leaf(&p.values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelParams<f64> {
        let mut cfg = ModelConfig::small(13);
        cfg.d_model = 16;
        cfg.ffn = 24;
        cfg.heads = 2;
        ModelParams::init(&cfg, 3).unwrap()
    }

    #[test]
    fn decoder_inputs_shift_right() {
        assert_eq!(decoder_inputs(&[7, 8, EOS]), vec![BOS, 7, 8]);
        assert!(decoder_inputs(&[]).is_empty());
    }

    #[test]
    fn packed_batch_matches_single_sequences() {
        let p = toy();
        let prompt = PromptMatrix::random(0, 3, 16, 1);
        let sources = vec![vec![5, 6, 7], vec![9], vec![10, 11, 4, 5, 6]];
        let targets = vec![vec![4, 5, EOS], vec![6, EOS], vec![7, 7, 7, 8, EOS]];
        let batch = p
            .forward_teacher_forced(Some(&prompt), &sources, &targets)
            .unwrap();
        for i in 0..3 {
            let one = p
                .forward_teacher_forced(Some(&prompt), &sources[i..i + 1], &targets[i..i + 1])
                .unwrap();
            for (a, b) in batch[i].logits.data().iter().zip(one[0].logits.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn greedy_agrees_with_teacher_forcing_on_its_own_output() {
        let p = toy();
        let prompt = PromptMatrix::random(0, 2, 16, 5);
        let sources = vec![vec![5, 6, 7], vec![8, 9]];
        let out = p.greedy_decode(Some(&prompt), &sources, 6).unwrap();
        for (s, o) in sources.iter().zip(&out) {
            assert_eq!(o.steps(), o.tokens.len());
            let tf = p
                .forward_teacher_forced(Some(&prompt), &[s.clone()], &[o.tokens.clone()])
                .unwrap();
            assert_eq!(tf[0].argmax(), o.tokens);
            for (a, b) in tf[0].logits.data().iter().zip(o.logits.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn over_length_input_is_rejected() {
        let p = toy();
        let long = vec![vec![5; p.config.max_len + 1]];
        let err = p
            .forward_teacher_forced(None, &long, &[vec![EOS]])
            .unwrap_err();
        assert!(matches!(err, ModelError::Length(_)));
        let prompt = PromptMatrix::random(0, 20, 16, 0);
        let src = vec![vec![5; p.config.max_len - 19]];
        assert!(matches!(
            p.greedy_decode(Some(&prompt), &src, 3),
            Err(ModelError::Length(_))
        ));
    }

    #[test]
    fn step_probabilities_sum_to_one() {
        let p = toy();
        let d = p
            .forward_teacher_forced(None, &[vec![4, 5]], &[vec![6, EOS]])
            .unwrap();
        for j in 0..d[0].steps() {
            let s: f64 = d[0].probs(j).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let lp = p
            .sequence_log_prob(None, &[vec![4, 5]], &[vec![6, EOS]])
            .unwrap();
        assert!(lp[0] < 0.0);
    }
}
