use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Whether a forward pass trains (batch statistics) or evaluates (running
/// statistics), and whether gradients flow into this network's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Pass {
    pub train: bool,
    pub track_params: bool,
    pub update_running: bool,
}

impl Pass {
    pub const EVAL: Pass = Pass {
        train: false,
        track_params: false,
        update_running: false,
    };
}

pub(crate) fn param(g: &mut Graph, id: ParamId, pass: Pass) -> Var {
    if pass.track_params {
        g.param(id)
    } else {
        g.frozen_param(id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[out, inp], 0.0, INIT_STD, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, pass: Pass) -> Result<Var> {
        let w = param(g, self.weight, pass);
        let b = param(g, self.bias, pass);
        g.linear(x, w, Some(b))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        Embedding {
            table: store.add(format!("{name}.table"), Tensor::randn(&[vocab, dim], 0.0, 1.0, rng)),
        }
    }

    pub fn forward(&self, g: &mut Graph, indices: &[usize], pass: Pass) -> Result<Var> {
        let t = param(g, self.table, pass);
        g.embedding(t, indices)
    }
}

/// Convolution weight; the tensor layout depends on direction.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub transpose: bool,
}

impl Conv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        transpose: bool,
        rng: &mut R,
    ) -> Self {
        let shape = if transpose { [inp, out, 4, 4] } else { [out, inp, 4, 4] };
        Conv {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&shape, 0.0, INIT_STD, rng)),
            transpose,
        }
    }

    /// 4×4 kernel, stride 2, padding 1: halves (or doubles) the spatial size.
    pub fn forward(&self, g: &mut Graph, x: Var, pass: Pass) -> Result<Var> {
        let w = param(g, self.weight, pass);
        if self.transpose {
            g.conv_transpose2d(x, w, 2, 1)
        } else {
            g.conv2d(x, w, 2, 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::randn(&[channels], 1.0, INIT_STD, rng)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, pass: Pass) -> Result<Var> {
        let gamma = param(g, self.gamma, pass);
        let beta = param(g, self.beta, pass);
        if !pass.train {
            return g.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, BN_EPS);
        }
        let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
        if pass.update_running {
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            for c in 0..self.running_mean.len() {
                self.running_mean[c] =
                    (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * stats.mean[c];
                self.running_var[c] =
                    (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * stats.var[c] * unbias;
            }
        }
        Ok(y)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}
