use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one [`ParamSet`]. Moment buffers are indexed like
/// the set's entries; buffers of non-trainable entries stay empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamSet) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {lr}")));
        }
        let zeros = |with: bool| -> Vec<Option<Tensor>> {
            params
                .entries()
                .iter()
                .map(|e| (e.trainable && with).then(|| Tensor::zeros(e.value.shape())))
                .collect()
        };
        let second = matches!(kind, OptimizerKind::Adam { .. });
        Ok(Optimizer {
            kind,
            lr,
            step: 0,
            first: zeros(true),
            second: zeros(second),
        })
    }

    pub fn first_moments(&self) -> &[Option<Tensor>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Option<Tensor>] {
        &self.second
    }

    /// Moment buffers as two sets (`{prefix}.m`, `{prefix}.v`) whose entries
    /// are named by parameter index; empty buffers are skipped.
    pub fn export_moments(&self, prefix: &str) -> [ParamSet; 2] {
        let pack = |bufs: &[Option<Tensor>], label: String| {
            let mut set = ParamSet::new(label);
            for (i, b) in bufs.iter().enumerate() {
                if let Some(t) = b {
                    set.push(i.to_string(), t.clone(), false);
                }
            }
            set
        };
        [
            pack(&self.first, format!("{prefix}.m")),
            pack(&self.second, format!("{prefix}.v")),
        ]
    }

    /// Rebuilds an optimizer from exported moments, checking that every
    /// buffer lines up with `params`.
    pub fn import_moments(
        kind: OptimizerKind,
        lr: f64,
        step: u64,
        params: &ParamSet,
        first: &ParamSet,
        second: &ParamSet,
    ) -> Result<Self> {
        let mut opt = Optimizer::new(kind, lr, params)?;
        opt.step = step;
        for (bufs, set) in [(&mut opt.first, first), (&mut opt.second, second)] {
            let mut seen = 0;
            for (i, slot) in bufs.iter_mut().enumerate() {
                if let Some(t) = slot {
                    let idx = set.index_of(&i.to_string()).ok_or_else(|| {
                        Error::Checkpoint(format!("`{}` lacks moment {i}", set.label()))
                    })?;
                    let src = set.value(idx);
                    if src.shape() != t.shape() {
                        return Err(Error::shape(t.shape(), src.shape()));
                    }
                    *t = src.clone();
                    seen += 1;
                }
            }
            if seen != set.len() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has {} moments, expected {seen}",
                    set.label(),
                    set.len()
                )));
            }
        }
        Ok(opt)
    }

    /// One update with the given `(entry index, gradient)` pairs.
    /// Entries without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(usize, Tensor)]) -> Result<()> {
        if params.is_frozen() {
            return Err(Error::Frozen(params.label().to_string()));
        }
        if self.first.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "optimizer built for {} entries, set has {}",
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        for (idx, g) in grads {
            let idx = *idx;
            if !params.get(idx).trainable {
                continue;
            }
            let m = self.first[idx]
                .as_mut()
                .expect("trainable entry has a moment buffer");
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self.second[idx].as_mut().expect("adam second moment");
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let lr = self.lr;
                    let p = params.value_mut(idx)?;
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    let lr = self.lr;
                    let p = params.value_mut(idx)?;
                    for ((pv, gv), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
                        *mv = momentum * *mv + gv;
                        *pv -= lr * *mv;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::new("p");
        p.push("w", Tensor::full([1, 1, 1, 2], 1.0), true);
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.01, &p).unwrap();
        let g = Tensor::from_vec([1, 1, 1, 2], vec![3.0, -0.5]);
        opt.step(&mut p, &[(0, g)]).unwrap();
        let v = p.value(0).data();
        assert!((v[0] - 0.99).abs() < 1e-6);
        assert!((v[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn sgd_minimises_quadratic() {
        let mut p = ParamSet::new("p");
        p.push("w", Tensor::full([1, 1, 1, 1], 5.0), true);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.5 }, 0.1, &p).unwrap();
        for _ in 0..200 {
            let w = p.value(0).data()[0];
            opt.step(&mut p, &[(0, Tensor::full([1, 1, 1, 1], 2.0 * w))])
                .unwrap();
        }
        assert!(p.value(0).data()[0].abs() < 1e-6);
    }

    #[test]
    fn moments_export_import_round_trip() {
        let mut p = ParamSet::new("p");
        p.push("w", Tensor::full([1, 1, 1, 3], 1.0), true);
        p.push("buf", Tensor::zeros([1, 1, 1, 1]), false);
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.01, &p).unwrap();
        opt.step(&mut p, &[(0, Tensor::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 0.5]))])
            .unwrap();
        let [m, v] = opt.export_moments("opt");
        let back = Optimizer::import_moments(opt.kind, opt.lr, opt.step, &p, &m, &v).unwrap();
        assert_eq!(back, opt);
        let [m, _] = Optimizer::new(OptimizerKind::default(), 0.01, &p)
            .unwrap()
            .export_moments("x");
        let empty = ParamSet::new("e");
        assert!(Optimizer::import_moments(opt.kind, 0.01, 1, &p, &m, &empty).is_err());
    }

    #[test]
    fn rejects_non_positive_lr_and_frozen_sets() {
        let mut p = ParamSet::new("p");
        p.push("w", Tensor::zeros([1, 1, 1, 1]), true);
        assert!(Optimizer::new(OptimizerKind::default(), 0.0, &p).is_err());
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.1, &p).unwrap();
        p.freeze();
        assert!(matches!(
            opt.step(&mut p, &[(0, Tensor::zeros([1, 1, 1, 1]))]),
            Err(Error::Frozen(_))
        ));
    }
}
