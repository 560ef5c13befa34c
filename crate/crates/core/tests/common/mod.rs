#![allow(dead_code)]

use c3_core::continual::{batch_loss, Pair, Supervision};
use c3_core::numerics::{grad_check, GradCheckOptions, NumericsError, OpKind, Tensor, Var};
use c3_core::seq2seq::{teacher_forced_logits, ModelConfig, ModelParams, SizeTag, Weights};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 11;

pub fn tiny_model(seed: u64) -> ModelParams<f64> {
    let cfg = ModelConfig {
        d_model: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn: 12,
        max_len: 32,
        vocab_size: VOCAB,
        size: SizeTag::Small,
    };
    let mut m = ModelParams::init(&cfg, seed).unwrap();
    // Move norm gains and biases off their initial 1 / 0 so every path is
    // exercised with generic values.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in m.weights.leaves_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

pub fn random_batch(seed: u64, n: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = |lo: usize, hi: usize| -> Vec<usize> {
        let len = rng.random_range(lo..=hi);
        (0..len).map(|_| rng.random_range(4..VOCAB)).collect()
    };
    let sources = (0..n).map(|_| seq(2, 5)).collect();
    let targets = (0..n).map(|_| seq(1, 4)).collect();
    (sources, targets)
}

/// Rebinds tape leaves `vars` (prompt last) into the model's layout.
pub fn weights_from(model: &ModelParams<f64>, vars: &[Var]) -> Weights<Var> {
    let mut it = vars.iter().copied();
    model
        .weights
        .map(|_, _| it.next().expect("one var per leaf"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossPath {
    /// Gold cross-entropy over every step.
    Gold,
    /// Per-step KL against fixed teacher logits.
    Kl,
    /// Half the batch gold, half teacher-supervised.
    Mixed,
}

/// Max relative error of the full training loss over backbone and prompt,
/// optionally with one op's backward rule corrupted.
pub fn model_grad_check(path: LossPath, fault: Option<OpKind>, seed: u64) -> f64 {
    let model = tiny_model(seed);
    let (sources, targets) = random_batch(seed + 1, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let prompt = Tensor::from_fn(&[2, 8], |_| rng.random_range(-0.5..0.5));
    let pairs: Vec<Pair> = sources
        .iter()
        .zip(&targets)
        .map(|(s, t)| Pair {
            source: s.clone(),
            target: t.clone(),
        })
        .collect();
    let sup: Vec<Supervision<f64>> = targets
        .iter()
        .enumerate()
        .map(|(b, t)| {
            let teacher = path == LossPath::Kl || (path == LossPath::Mixed && b % 2 == 1);
            if teacher {
                Supervision::Teacher(Tensor::from_fn(&[t.len(), VOCAB], |_| {
                    rng.random_range(-2.0..2.0)
                }))
            } else {
                Supervision::Gold
            }
        })
        .collect();
    let mut params: Vec<Tensor<f64>> = model
        .weights
        .named()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    params.push(prompt);
    let cfg = model.config.clone();
    grad_check(
        |tape, vars| {
            if let Some(kind) = fault {
                tape.inject_fault(kind);
            }
            let (w_vars, p) = vars.split_at(vars.len() - 1);
            let w = weights_from(&model, w_vars);
            if path == LossPath::Gold {
                let logits = teacher_forced_logits(tape, &w, &cfg, Some(p[0]), &sources, &targets)
                    .map_err(|e| NumericsError::Contract(e.to_string()))?;
                return tape.cross_entropy(logits, &targets.concat(), 1.0 / 3.0);
            }
            let batch: Vec<(&Pair, &Supervision<f64>)> = pairs.iter().zip(&sup).collect();
            batch_loss(tape, &model, &w, Some(p[0]), &batch)
                .map_err(|e| NumericsError::Contract(e.to_string()))
        },
        &params,
        1e-6,
        &GradCheckOptions {
            coords_per_param: 12,
            seed,
        },
    )
    .unwrap()
}
