use serde::{Deserialize, Serialize};

use super::{NumericsError, Scalar, Tensor};

/// Which learning rate a parameter trains under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Prompt,
    Backbone,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    /// Factored second moments, no first moment, update clipping at 1.
    AdaFactor {
        eps: f64,
        clip: f64,
        decay: f64,
    },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adafactor() -> Self {
        OptimizerKind::AdaFactor {
            eps: 1e-30,
            clip: 1.0,
            decay: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_prompt: f64,
    pub lr_backbone: f64,
}

impl OptimizerConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Prompt => self.lr_prompt,
            ParamGroup::Backbone => self.lr_backbone,
        }
    }
}

/// Per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub group: ParamGroup,
    pub step: u64,
    first: Vec<S>,
    second: Vec<S>,
    row: Vec<S>,
    col: Vec<S>,
}

impl<S: Scalar> OptimizerState<S> {
    fn new(group: ParamGroup, t: &Tensor<S>, kind: &OptimizerKind) -> Self {
        let n = t.len();
        let (first, second, row, col) = match kind {
            OptimizerKind::Sgd => (vec![], vec![], vec![], vec![]),
            OptimizerKind::Adam { .. } => (vec![S::zero(); n], vec![S::zero(); n], vec![], vec![]),
            OptimizerKind::AdaFactor { .. } if t.shape().len() >= 2 => (
                vec![],
                vec![],
                vec![S::zero(); t.rows()],
                vec![S::zero(); t.cols()],
            ),
            OptimizerKind::AdaFactor { .. } => (vec![], vec![S::zero(); n], vec![], vec![]),
        };
        Self {
            group,
            step: 0,
            first,
            second,
            row,
            col,
        }
    }
}

/// Updates parameters of the active groups only; parameters of inactive
/// groups are never read or written.
pub struct Optimizer<S> {
    config: OptimizerConfig,
    active: Vec<ParamGroup>,
    slots: Vec<OptimizerState<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(config: OptimizerConfig, active: &[ParamGroup]) -> Self {
        Self {
            config,
            active: active.to_vec(),
            slots: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn is_active(&self, group: ParamGroup) -> bool {
        self.active.contains(&group)
    }

    pub fn states(&self) -> &[OptimizerState<S>] {
        &self.slots
    }

    /// One update. `params` must be passed in the same order on every call;
    /// slot `i` keeps the moments of `params[i]`.
    pub fn step(
        &mut self,
        params: &mut [(ParamGroup, &mut Tensor<S>)],
    ) -> Result<(), NumericsError> {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|(g, t)| OptimizerState::new(*g, t, &self.config.kind))
                .collect();
        } else if self.slots.len() != params.len() {
            return Err(NumericsError::Contract(format!(
                "optimizer built for {} parameters, stepped with {}",
                self.slots.len(),
                params.len()
            )));
        }
        for (slot, (group, t)) in self.slots.iter_mut().zip(params.iter_mut()) {
            if slot.group != *group {
                return Err(NumericsError::Contract(
                    "parameter order changed between steps".into(),
                ));
            }
            if !self.active.contains(group) {
                continue;
            }
            let Some(grad) = t.grad().map(<[S]>::to_vec) else {
                return Err(NumericsError::Contract(format!(
                    "missing gradient for {group:?} parameter of shape {:?}",
                    t.shape()
                )));
            };
            slot.step += 1;
            let lr = S::lit(self.config.lr(*group));
            let (rows, cols) = (t.rows(), t.cols());
            let data = t.data_mut();
            match self.config.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in data.iter_mut().zip(&grad) {
                        *w = *w - lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2, e) = (S::lit(beta1), S::lit(beta2), S::lit(eps));
                    let bc1 = S::one() - b1.powi(slot.step as i32);
                    let bc2 = S::one() - b2.powi(slot.step as i32);
                    for i in 0..data.len() {
                        let g = grad[i];
                        slot.first[i] = b1 * slot.first[i] + (S::one() - b1) * g;
                        slot.second[i] = b2 * slot.second[i] + (S::one() - b2) * g * g;
                        let m = slot.first[i] / bc1;
                        let v = slot.second[i] / bc2;
                        data[i] = data[i] - lr * m / (v.sqrt() + e);
                    }
                }
                OptimizerKind::AdaFactor { eps, clip, decay } => {
                    let e = S::lit(eps);
                    let rho = S::one() - S::lit((slot.step as f64).powf(-decay));
                    let mut update: Vec<S> = if slot.row.is_empty() {
                        for (v, &g) in slot.second.iter_mut().zip(&grad) {
                            *v = rho * *v + (S::one() - rho) * (g * g + e);
                        }
                        grad.iter()
                            .zip(&slot.second)
                            .map(|(&g, &v)| g / v.sqrt())
                            .collect()
                    } else {
                        let nc = S::from_usize(cols).unwrap();
                        let nr = S::from_usize(rows).unwrap();
                        for r in 0..rows {
                            let mean = grad[r * cols..(r + 1) * cols]
                                .iter()
                                .map(|&g| g * g + e)
                                .sum::<S>()
                                / nc;
                            slot.row[r] = rho * slot.row[r] + (S::one() - rho) * mean;
                        }
                        for c in 0..cols {
                            let mean = (0..rows)
                                .map(|r| grad[r * cols + c])
                                .map(|g| g * g + e)
                                .sum::<S>()
                                / nr;
                            slot.col[c] = rho * slot.col[c] + (S::one() - rho) * mean;
                        }
                        let row_mean = slot.row.iter().copied().sum::<S>() / nr;
                        (0..rows * cols)
                            .map(|i| {
                                let v = slot.row[i / cols] * slot.col[i % cols] / row_mean;
                                grad[i] / v.sqrt()
                            })
                            .collect()
                    };
                    let n = S::from_usize(update.len().max(1)).unwrap();
                    let rms = (update.iter().map(|&u| u * u).sum::<S>() / n).sqrt();
                    let denom = S::one().max(rms / S::lit(clip));
                    update.iter_mut().for_each(|u| *u = *u / denom);
                    for (w, u) in data.iter_mut().zip(&update) {
                        *w = *w - lr * *u;
                    }
                }
            }
        }
        Ok(())
    }
}
