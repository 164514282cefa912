//! Plain supervised segmentor training, shared by the A-Dice harness and
//! the downstream protocol.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::sub_seed;
use crate::error::{Error, Result};
use crate::evaluation::dice_score;
use crate::grid::{stack_images, ImageGrid, LesionMask};
use crate::losses::{ce_batch, WceBackground};
use crate::networks::{Mode, Segmentor, SegmentorSpec};
use crate::nn::{Graph, Optimizer, OptimizerKind, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegFitConfig {
    pub segmentor: SegmentorSpec,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SegFitConfig {
    fn default() -> Self {
        SegFitConfig {
            segmentor: SegmentorSpec::default(),
            optimizer: OptimizerKind::default(),
            lr: 0.001,
            epochs: 20,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl SegFitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A freshly initialized segmentor with its optimizer.
pub struct SegFitter {
    pub seg: Segmentor,
    pub params: ParamSet,
    opt: Optimizer,
    cfg: SegFitConfig,
    steps: u64,
}

impl SegFitter {
    pub fn new(cfg: &SegFitConfig) -> Result<Self> {
        cfg.validate()?;
        let seg = Segmentor::new(cfg.segmentor.clone())?;
        let params = seg.init_params(sub_seed(cfg.seed, 0));
        let opt = Optimizer::new(cfg.optimizer, cfg.lr, &params)?;
        Ok(SegFitter {
            seg,
            params,
            opt,
            cfg: cfg.clone(),
            steps: 0,
        })
    }

    /// One optimizer step on a batch; returns the cross-entropy.
    pub fn step(&mut self, images: &[&ImageGrid], masks: &[&LesionMask]) -> Result<f64> {
        let x = stack_images(images.iter().copied())?;
        let mut g = Graph::new();
        let xv = g.input(x, false);
        let built = self.seg.build(&mut g, &self.params, xv, true, Mode::Train)?;
        let (loss, dprobs) = ce_batch(g.value(built.out), masks, None, WceBackground::TwoClass)?;
        self.steps += 1;
        let grads = g.backward(vec![(built.out, dprobs)]).param_grads();
        if grads.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite {
                what: "segmentor gradient".into(),
                step: self.steps,
            });
        }
        self.opt.step(&mut self.params, &grads)?;
        for (idx, t) in built.buffer_updates {
            self.params.update_buffer(idx, t)?;
        }
        Ok(loss)
    }

    /// One pass over the data in a seed-and-epoch determined order.
    /// Returns the mean batch loss.
    pub fn train_epoch(&mut self, images: &[ImageGrid], masks: &[LesionMask], epoch: usize) -> Result<f64> {
        if images.is_empty() || images.len() != masks.len() {
            return Err(Error::InvalidInput(format!(
                "need aligned, nonempty images and masks ({} vs {})",
                images.len(),
                masks.len()
            )));
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(self.cfg.seed, 1 + epoch as u64)));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let xs: Vec<&ImageGrid> = chunk.iter().map(|&i| &images[i]).collect();
            let ys: Vec<&LesionMask> = chunk.iter().map(|&i| &masks[i]).collect();
            total += self.step(&xs, &ys)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    pub fn predict(&self, images: &[ImageGrid]) -> Result<Vec<LesionMask>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.cfg.batch_size.max(1)) {
            for p in self.seg.forward(&self.params, chunk, Mode::Eval)? {
                out.push(p.argmax_mask());
            }
        }
        Ok(out)
    }

    /// Per-image dice of eval-mode predictions.
    pub fn dice(&self, images: &[ImageGrid], masks: &[LesionMask]) -> Result<Vec<f64>> {
        self.predict(images)?
            .iter()
            .zip(masks)
            .map(|(p, m)| dice_score(p, m))
            .collect()
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}
