use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attn<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ffn<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub norm1: Norm<T>,
    pub attn: Attn<T>,
    pub norm2: Norm<T>,
    pub ffn: Ffn<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub norm1: Norm<T>,
    pub self_attn: Attn<T>,
    pub norm2: Norm<T>,
    pub cross_attn: Attn<T>,
    pub norm3: Norm<T>,
    pub ffn: Ffn<T>,
}

/// The backbone's parameter tree. `T` is a [`Tensor`] for stored weights
/// and a tape handle once bound for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    /// Shared by encoder and decoder inputs.
    pub embedding: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub encoder_norm: Norm<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub decoder_norm: Norm<T>,
    pub out_w: T,
    pub out_b: T,
}

impl<T> Norm<T> {
    fn map<'a, U>(&'a self, p: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Norm<U> {
        Norm {
            gain: f(&format!("{p}.gain"), &self.gain),
            bias: f(&format!("{p}.bias"), &self.bias),
        }
    }
}

impl<T> Attn<T> {
    fn map<'a, U>(&'a self, p: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Attn<U> {
        Attn {
            wq: f(&format!("{p}.wq"), &self.wq),
            wk: f(&format!("{p}.wk"), &self.wk),
            wv: f(&format!("{p}.wv"), &self.wv),
            wo: f(&format!("{p}.wo"), &self.wo),
        }
    }
}

impl<T> Ffn<T> {
    fn map<'a, U>(&'a self, p: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Ffn<U> {
        Ffn {
            w1: f(&format!("{p}.w1"), &self.w1),
            b1: f(&format!("{p}.b1"), &self.b1),
            w2: f(&format!("{p}.w2"), &self.w2),
            b2: f(&format!("{p}.b2"), &self.b2),
        }
    }
}

impl<T> Weights<T> {
    /// Maps every leaf in canonical order, passing its dotted name.
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> Weights<U> {
        let f = &mut f;
        Weights {
            embedding: f("embedding", &self.embedding),
            encoder: self
                .encoder
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let p = format!("encoder.{i}");
                    EncoderLayer {
                        norm1: l.norm1.map(&format!("{p}.norm1"), f),
                        attn: l.attn.map(&format!("{p}.attn"), f),
                        norm2: l.norm2.map(&format!("{p}.norm2"), f),
                        ffn: l.ffn.map(&format!("{p}.ffn"), f),
                    }
                })
                .collect(),
            encoder_norm: self.encoder_norm.map("encoder_norm", f),
            decoder: self
                .decoder
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let p = format!("decoder.{i}");
                    DecoderLayer {
                        norm1: l.norm1.map(&format!("{p}.norm1"), f),
                        self_attn: l.self_attn.map(&format!("{p}.self_attn"), f),
                        norm2: l.norm2.map(&format!("{p}.norm2"), f),
                        cross_attn: l.cross_attn.map(&format!("{p}.cross_attn"), f),
                        norm3: l.norm3.map(&format!("{p}.norm3"), f),
                        ffn: l.ffn.map(&format!("{p}.ffn"), f),
                    }
                })
                .collect(),
            decoder_norm: self.decoder_norm.map("decoder_norm", f),
            out_w: f("out_w", &self.out_w),
            out_b: f("out_b", &self.out_b),
        }
    }

    /// Leaves in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(|n, t| out.push((n.to_string(), t)));
        out
    }

    /// Mutable leaves in canonical order.
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.encoder {
            out.extend([&mut l.norm1.gain, &mut l.norm1.bias]);
            push_attn(&mut out, &mut l.attn);
            out.extend([&mut l.norm2.gain, &mut l.norm2.bias]);
            push_ffn(&mut out, &mut l.ffn);
        }
        out.extend([&mut self.encoder_norm.gain, &mut self.encoder_norm.bias]);
        for l in &mut self.decoder {
            out.extend([&mut l.norm1.gain, &mut l.norm1.bias]);
            push_attn(&mut out, &mut l.self_attn);
            out.extend([&mut l.norm2.gain, &mut l.norm2.bias]);
            push_attn(&mut out, &mut l.cross_attn);
            out.extend([&mut l.norm3.gain, &mut l.norm3.bias]);
            push_ffn(&mut out, &mut l.ffn);
        }
        out.extend([&mut self.decoder_norm.gain, &mut self.decoder_norm.bias]);
        out.extend([&mut self.out_w, &mut self.out_b]);
        out
    }
}

fn push_attn<'a, T>(out: &mut Vec<&'a mut T>, a: &'a mut Attn<T>) {
    out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
}

fn push_ffn<'a, T>(out: &mut Vec<&'a mut T>, f: &'a mut Ffn<T>) {
    out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
}

/// Backbone parameters θ together with the dimensions they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub weights: Weights<Tensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Deterministic initialization from `seed`: Xavier-uniform matrices,
    /// unit-variance embeddings, unit norm gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size;
        let mut xavier = |rows: usize, cols: usize| -> Tensor<S> {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::from_fn(&[rows, cols], |_| S::lit(rng.random_range(-a..a)))
        };
        let norm = || Norm {
            gain: Tensor::from_fn(&[d], |_| S::one()),
            bias: Tensor::zeros(&[d]),
        };
        let zeros = |n: usize| Tensor::<S>::zeros(&[n]);
        let embedding = {
            let a = 3f64.sqrt();
            let mut r2 = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            Tensor::from_fn(&[v, d], |_| S::lit(r2.random_range(-a..a)))
        };
        let attn = |xavier: &mut dyn FnMut(usize, usize) -> Tensor<S>| Attn {
            wq: xavier(d, d),
            wk: xavier(d, d),
            wv: xavier(d, d),
            wo: xavier(d, d),
        };
        let mut encoder = Vec::new();
        for _ in 0..config.encoder_layers {
            encoder.push(EncoderLayer {
                norm1: norm(),
                attn: attn(&mut xavier),
                norm2: norm(),
                ffn: Ffn {
                    w1: xavier(d, config.ffn),
                    b1: zeros(config.ffn),
                    w2: xavier(config.ffn, d),
                    b2: zeros(d),
                },
            });
        }
        let mut decoder = Vec::new();
        for _ in 0..config.decoder_layers {
            decoder.push(DecoderLayer {
                norm1: norm(),
                self_attn: attn(&mut xavier),
                norm2: norm(),
                cross_attn: attn(&mut xavier),
                norm3: norm(),
                ffn: Ffn {
                    w1: xavier(d, config.ffn),
                    b1: zeros(config.ffn),
                    w2: xavier(config.ffn, d),
                    b2: zeros(d),
                },
            });
        }
        let out_w = xavier(d, v);
        Ok(Self {
            config: config.clone(),
            weights: Weights {
                embedding,
                encoder,
                encoder_norm: norm(),
                decoder,
                decoder_norm: norm(),
                out_w,
                out_b: zeros(v),
            },
        })
    }

    /// SHA-256 over names, shapes and little-endian `f64` values of every
    /// tensor; changes iff some parameter value changes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.weights.named() {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for t in self.weights.leaves_mut() {
            t.set_requires_grad(on);
        }
    }

    pub fn zero_grad(&mut self) {
        for t in self.weights.leaves_mut() {
            t.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Per-task prompt P: `M × d` rows prepended to the encoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptMatrix<S> {
    pub task: usize,
    pub values: Tensor<S>,
}

impl<S: Scalar> PromptMatrix<S> {
    pub fn new(task: usize, values: Tensor<S>) -> Result<Self, ModelError> {
        if values.shape().len() != 2 {
            return Err(ModelError::Config(format!(
                "prompt must be M×d, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { task, values })
    }

    /// Entries uniform in [−0.5, 0.5] scaled by 1/√d.
    pub fn random(task: usize, m: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d as f64).sqrt();
        let values = Tensor::from_fn(&[m, d], |_| S::lit(rng.random_range(-0.5..0.5) * s));
        Self { task, values }
    }

    pub fn zeros(task: usize, m: usize, d: usize) -> Self {
        Self {
            task,
            values: Tensor::zeros(&[m, d]),
        }
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn with_task(&self, task: usize) -> Self {
        let mut p = self.clone();
        p.task = task;
        p.values.zero_grad();
        p
    }
}
