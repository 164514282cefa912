//! Generator (image to image) and segmentor (image to per-pixel class
//! probabilities) built on the [`crate::nn`] autodiff layer.

pub mod checkpoint;
pub mod generator;
pub mod segmentor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamSet, Tensor, Var};

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use generator::{Generator, GeneratorSpec, OutputActivation};
pub use segmentor::{Segmentor, SegmentorSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    Instance,
    Batch,
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Result of building a network on a graph.
pub struct Built {
    pub out: Var,
    /// New values for running-statistic buffers (train-mode batch norm).
    pub buffer_updates: Vec<(usize, Tensor)>,
}

/// Resolves parameter names against a [`ParamSet`] while a network is
/// being laid onto a graph.
pub(crate) struct Binder<'a> {
    pub params: &'a ParamSet,
    pub grad: bool,
    pub mode: Mode,
    pub updates: Vec<(usize, Tensor)>,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParamSet, grad: bool, mode: Mode) -> Self {
        Binder {
            params,
            grad,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))?;
        let e = self.params.get(idx);
        Ok(g.param(idx, e.value.clone(), self.grad && e.trainable))
    }

    /// `conv -> norm -> activation` with `k x k` kernel and same padding.
    pub fn conv_block(
        &mut self,
        g: &mut Graph,
        x: Var,
        prefix: &str,
        stride: usize,
        norm: NormKind,
        act: bool,
    ) -> Result<Var> {
        let w = self.bind(g, &format!("{prefix}.weight"))?;
        let k = g.value(w).h();
        let expected_c = g.value(w).c();
        if g.value(x).c() != expected_c {
            return Err(Error::InvalidConfig(format!(
                "`{prefix}` expects {expected_c} input channels, got {}",
                g.value(x).c()
            )));
        }
        let b = match norm {
            NormKind::None => Some(self.bind(g, &format!("{prefix}.bias"))?),
            _ => None,
        };
        let mut y = g.conv2d(x, w, b, stride, k / 2);
        y = self.norm(g, y, prefix, norm)?;
        if act {
            y = g.relu(y);
        }
        Ok(y)
    }

    fn norm(&mut self, g: &mut Graph, x: Var, prefix: &str, norm: NormKind) -> Result<Var> {
        Ok(match norm {
            NormKind::None => x,
            NormKind::Instance => {
                let gamma = self.bind(g, &format!("{prefix}.norm.gamma"))?;
                let beta = self.bind(g, &format!("{prefix}.norm.beta"))?;
                g.instance_norm(x, gamma, beta)
            }
            NormKind::Batch => {
                let gamma = self.bind(g, &format!("{prefix}.norm.gamma"))?;
                let beta = self.bind(g, &format!("{prefix}.norm.beta"))?;
                let mean_name = format!("{prefix}.norm.running_mean");
                let var_name = format!("{prefix}.norm.running_var");
                let mi = self.params.index_of(&mean_name).ok_or_else(|| {
                    Error::InvalidConfig(format!("missing buffer `{mean_name}`"))
                })?;
                let vi = self.params.index_of(&var_name).ok_or_else(|| {
                    Error::InvalidConfig(format!("missing buffer `{var_name}`"))
                })?;
                match self.mode {
                    Mode::Train => {
                        let (y, stats) = g.batch_norm(x, gamma, beta);
                        let blend = |old: &Tensor, new: &[f64]| {
                            Tensor::channel_vector(
                                old.data()
                                    .iter()
                                    .zip(new)
                                    .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                                    .collect(),
                            )
                        };
                        self.updates
                            .push((mi, blend(self.params.value(mi), &stats.mean)));
                        self.updates
                            .push((vi, blend(self.params.value(vi), &stats.var)));
                        y
                    }
                    Mode::Eval => {
                        let mean = self.params.value(mi).data().to_vec();
                        let var = self.params.value(vi).data().to_vec();
                        g.batch_norm_fixed(x, gamma, beta, &mean, &var)
                    }
                }
            }
        })
    }
}

/// Registers parameters in a fixed order with He-normal conv weights.
pub(crate) struct ParamBuilder {
    pub set: ParamSet,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(label: &str, seed: u64) -> Self {
        ParamBuilder {
            set: ParamSet::new(label),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, norm: NormKind) {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let data = (0..cout * cin * k * k)
            .map(|_| normal.sample(&mut self.rng))
            .collect();
        self.set.push(
            format!("{prefix}.weight"),
            Tensor::from_vec([cout, cin, k, k], data),
            true,
        );
        match norm {
            NormKind::None => {
                self.set.push(
                    format!("{prefix}.bias"),
                    Tensor::zeros([1, cout, 1, 1]),
                    true,
                );
            }
            NormKind::Instance | NormKind::Batch => {
                self.set.push(
                    format!("{prefix}.norm.gamma"),
                    Tensor::full([1, cout, 1, 1], 1.0),
                    true,
                );
                self.set.push(
                    format!("{prefix}.norm.beta"),
                    Tensor::zeros([1, cout, 1, 1]),
                    true,
                );
                if norm == NormKind::Batch {
                    self.set.push(
                        format!("{prefix}.norm.running_mean"),
                        Tensor::zeros([1, cout, 1, 1]),
                        false,
                    );
                    self.set.push(
                        format!("{prefix}.norm.running_var"),
                        Tensor::full([1, cout, 1, 1], 1.0),
                        false,
                    );
                }
            }
        }
    }

    /// Rescales the most recently added conv weight.
    pub fn scale_last_weight(&mut self, prefix: &str, k: f64) {
        let idx = self
            .set
            .index_of(&format!("{prefix}.weight"))
            .expect("weight registered");
        self.set
            .value_mut(idx)
            .expect("builder sets are never frozen")
            .scale(k);
    }

    pub fn fill_last_bias(&mut self, prefix: &str, v: f64) {
        let idx = self
            .set
            .index_of(&format!("{prefix}.bias"))
            .expect("bias registered");
        let t = self.set.value_mut(idx).expect("builder sets are never frozen");
        *t = Tensor::full(t.shape(), v);
    }
}

/// Checks that `params` has exactly the names and shapes of `template`.
pub(crate) fn validate_params(template: &ParamSet, params: &ParamSet) -> Result<()> {
    if template.len() != params.len() {
        return Err(Error::InvalidConfig(format!(
            "expected {} parameter tensors, got {}",
            template.len(),
            params.len()
        )));
    }
    for (t, p) in template.entries().iter().zip(params.entries()) {
        if t.name != p.name || t.value.shape() != p.value.shape() {
            return Err(Error::InvalidConfig(format!(
                "parameter `{}` {:?} does not match expected `{}` {:?}",
                p.name,
                p.value.shape(),
                t.name,
                t.value.shape()
            )));
        }
    }
    Ok(())
}

/// Pads `x` so both spatial dims are multiples of `multiple`; returns the
/// padded var and the original size.
pub(crate) fn pad_to_multiple(g: &mut Graph, x: Var, multiple: usize) -> (Var, usize, usize) {
    let [_, _, h, w] = g.value(x).shape();
    let ph = (multiple - h % multiple) % multiple;
    let pw = (multiple - w % multiple) % multiple;
    if ph == 0 && pw == 0 {
        (x, h, w)
    } else {
        (g.pad_bottom_right(x, ph, pw), h, w)
    }
}
