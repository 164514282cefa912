//! Alternating generator-versus-segmentor training.
//!
//! Each batch runs `steps_a` segmentor updates with the generator frozen,
//! then `steps_b` generator updates with the segmentor frozen. The
//! synthesis `x_s = G(x_p)` is recomputed at the start of every step.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, sub_seed};
use crate::error::{Error, Result};
use crate::grid::{stack_images, LesionMask, Sample};
use crate::losses::{ce_batch, residual_batch, weight_maps_batch, WceBackground};
use crate::networks::{Checkpoint, CheckpointHeader, Generator, GeneratorSpec, Mode, Segmentor, SegmentorSpec};
use crate::nn::{Graph, Optimizer, OptimizerKind, ParamSet, Tensor};

pub const LOSS_CSV_HEADER: &str = "step,epoch,L_seg,L_s2,L_R,L_G";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub use_difference_aware: bool,
    pub wce_background: WceBackground,
    pub seed: u64,
    pub steps_a: usize,
    pub steps_b: usize,
    pub shuffle: bool,
    pub generator: GeneratorSpec,
    pub segmentor: SegmentorSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 10.0,
            lr: 0.001,
            batch_size: 8,
            epochs: 20,
            optimizer: OptimizerKind::default(),
            use_difference_aware: true,
            wce_background: WceBackground::TwoClass,
            seed: 0,
            steps_a: 1,
            steps_b: 1,
            shuffle: true,
            generator: GeneratorSpec::default(),
            segmentor: SegmentorSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be >= 1".into()));
        }
        if self.steps_a == 0 || self.steps_b == 0 {
            return Err(Error::InvalidConfig("steps per phase must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// One row of the loss log, written after each batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: u64,
    /// Last Step A loss (weighted or plain cross-entropy).
    pub l_seg: f64,
    pub l_s2: f64,
    pub l_r: f64,
    pub l_g: f64,
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.epoch, self.l_seg, self.l_s2, self.l_r, self.l_g
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub g: ParamSet,
    pub s: ParamSet,
    pub opt_g: Optimizer,
    pub opt_s: Optimizer,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed batches.
    pub step: u64,
    pub history: Vec<LossRecord>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    opt_g_step: u64,
    opt_s_step: u64,
    history: Vec<LossRecord>,
}

/// Generator-side losses of one Step B.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepBLosses {
    pub l_s2: f64,
    pub l_r: f64,
    pub l_g: f64,
}

#[derive(Clone, Debug)]
pub struct GvsTrainer {
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub seg: Segmentor,
    pub state: TrainState,
    hash: String,
}

fn non_finite(what: &str, step: u64) -> Error {
    Error::NonFinite {
        what: what.into(),
        step,
    }
}

impl GvsTrainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let gen = Generator::new(cfg.generator.clone())?;
        let seg = Segmentor::new(cfg.segmentor.clone())?;
        let g = gen.init_params(sub_seed(cfg.seed, 0));
        let s = seg.init_params(sub_seed(cfg.seed, 1));
        let opt_g = Optimizer::new(cfg.optimizer, cfg.lr, &g)?;
        let opt_s = Optimizer::new(cfg.optimizer, cfg.lr, &s)?;
        let hash = cfg.hash()?;
        Ok(GvsTrainer {
            cfg,
            gen,
            seg,
            state: TrainState {
                g,
                s,
                opt_g,
                opt_s,
                epoch: 0,
                step: 0,
                history: Vec::new(),
            },
            hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    /// Segmentor update with the generator frozen. Returns the Step A loss.
    pub fn step_a(&mut self, batch: &[&Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let step = self.state.step + 1;
        let x_p = stack_images(batch.iter().map(|s| &s.image))?;
        let masks: Vec<&LesionMask> = batch.iter().map(|s| &s.mask).collect();

        self.state.g.freeze();
        let x_s = self.gen.forward_tensor(&self.state.g, &x_p, Mode::Train);
        self.state.g.unfreeze();
        let x_s = x_s?;
        let weights = if self.cfg.use_difference_aware {
            Some(weight_maps_batch(&x_p, &x_s)?)
        } else {
            None
        };

        let mut graph = Graph::new();
        let xv = graph.input(x_s, false);
        let built = self.seg.build(&mut graph, &self.state.s, xv, true, Mode::Train)?;
        let (loss, dprobs) = ce_batch(
            graph.value(built.out),
            &masks,
            weights.as_deref(),
            self.cfg.wce_background,
        )
        .map_err(|_| non_finite("segmentor loss", step))?;
        let grads = graph.backward(vec![(built.out, dprobs)]).param_grads();
        if grads.iter().any(|(_, t)| !t.all_finite()) {
            return Err(non_finite("segmentor gradient", step));
        }
        self.state.opt_s.step(&mut self.state.s, &grads)?;
        for (idx, t) in built.buffer_updates {
            self.state.s.update_buffer(idx, t)?;
        }
        Ok(loss)
    }

    /// Generator gradients of `L_s2 + lambda * L_R` with the segmentor held
    /// fixed in train mode (batch statistics, no buffer updates).
    pub fn generator_gradients(&self, batch: &[&Sample], lambda: f64) -> Result<(StepBLosses, Vec<(usize, Tensor)>)> {
        let x_p = stack_images(batch.iter().map(|s| &s.image))?;
        let zero_masks: Vec<LesionMask> = batch
            .iter()
            .map(|s| LesionMask::zeros(s.mask.height(), s.mask.width()))
            .collect();
        let zero_refs: Vec<&LesionMask> = zero_masks.iter().collect();

        let mut graph = Graph::new();
        let xv = graph.input(x_p.clone(), false);
        let g_out = self.gen.build(&mut graph, &self.state.g, xv, true, Mode::Train)?.out;
        let s_out = self
            .seg
            .build(&mut graph, &self.state.s, g_out, false, Mode::Train)?
            .out;
        let step = self.state.step + 1;
        let (l_s2, d_probs) = ce_batch(graph.value(s_out), &zero_refs, None, WceBackground::TwoClass)
            .map_err(|_| non_finite("adversarial loss", step))?;
        let (l_r, mut d_xs) = residual_batch(graph.value(g_out), &x_p)?;
        d_xs.scale(lambda);
        let l_g = l_s2 + lambda * l_r;
        if !l_g.is_finite() {
            return Err(non_finite("generator loss", step));
        }
        let grads = graph.backward(vec![(s_out, d_probs), (g_out, d_xs)]).param_grads();
        Ok((StepBLosses { l_s2, l_r, l_g }, grads))
    }

    /// Generator update with the segmentor frozen.
    pub fn step_b(&mut self, batch: &[&Sample]) -> Result<StepBLosses> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let step = self.state.step + 1;
        self.state.s.freeze();
        let result = self.generator_gradients(batch, self.cfg.lambda);
        self.state.s.unfreeze();
        let (losses, grads) = result?;
        if grads.iter().any(|(_, t)| !t.all_finite()) {
            return Err(non_finite("generator gradient", step));
        }
        self.state.s.freeze();
        let stepped = self.state.opt_g.step(&mut self.state.g, &grads);
        self.state.s.unfreeze();
        stepped?;
        Ok(losses)
    }

    /// Step A then Step B on one batch; appends a loss record.
    pub fn train_batch(&mut self, batch: &[&Sample]) -> Result<LossRecord> {
        let mut l_seg = 0.0;
        for _ in 0..self.cfg.steps_a {
            l_seg = self.step_a(batch)?;
        }
        let mut b = None;
        for _ in 0..self.cfg.steps_b {
            b = Some(self.step_b(batch)?);
        }
        let b = b.expect("steps_b >= 1");
        self.state.step += 1;
        let rec = LossRecord {
            step: self.state.step,
            epoch: self.state.epoch + 1,
            l_seg,
            l_s2: b.l_s2,
            l_r: b.l_r,
            l_g: b.l_g,
        };
        self.state.history.push(rec);
        Ok(rec)
    }

    /// Sample order for a (zero-based) epoch.
    pub fn epoch_order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.cfg.shuffle {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(self.cfg.seed, 1000 + epoch)));
        }
        order
    }

    pub fn train_epoch(&mut self, data: &[Sample]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidInput("no training samples".into()));
        }
        let order = self.epoch_order(data.len(), self.state.epoch);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            self.train_batch(&batch)?;
        }
        self.state.epoch += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = StateMeta {
            step: self.state.step,
            opt_g_step: self.state.opt_g.step,
            opt_s_step: self.state.opt_s.step,
            history: self.state.history.clone(),
        };
        let mut sets = vec![self.state.g.clone(), self.state.s.clone()];
        sets.extend(self.state.opt_g.export_moments("G.opt"));
        sets.extend(self.state.opt_s.export_moments("S.opt"));
        for s in &mut sets {
            s.unfreeze();
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                spec: serde_json::to_value(&self.cfg)?,
                seed: self.cfg.seed,
                epoch: self.state.epoch,
                config_hash: self.hash.clone(),
                meta: serde_json::to_value(meta)?,
            },
            sets,
        })
    }

    /// Rebuilds a trainer from a checkpoint written under the same config.
    pub fn from_checkpoint(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = GvsTrainer::new(cfg)?;
        if ckpt.header.config_hash != t.hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} differs from {}",
                ckpt.header.config_hash, t.hash
            )));
        }
        let meta: StateMeta = serde_json::from_value(ckpt.header.meta.clone())?;
        ckpt.restore_into("generator", &mut t.state.g)?;
        ckpt.restore_into("segmentor", &mut t.state.s)?;
        let set = |label: &str| {
            ckpt.set(label)
                .ok_or_else(|| Error::Checkpoint(format!("archive has no `{label}` set")))
        };
        let (kind, lr) = (t.cfg.optimizer, t.cfg.lr);
        t.state.opt_g = Optimizer::import_moments(kind, lr, meta.opt_g_step, &t.state.g, set("G.opt.m")?, set("G.opt.v")?)?;
        t.state.opt_s = Optimizer::import_moments(kind, lr, meta.opt_s_step, &t.state.s, set("S.opt.m")?, set("S.opt.v")?)?;
        t.state.epoch = ckpt.header.epoch;
        t.state.step = meta.step;
        t.state.history = meta.history;
        Ok(t)
    }

    /// The header-embedded config of a training checkpoint.
    pub fn config_of(ckpt: &Checkpoint) -> Result<TrainConfig> {
        Ok(serde_json::from_value(ckpt.header.spec.clone())?)
    }
}

/// Generator network and weights from a training checkpoint.
pub fn load_generator(path: &Path) -> Result<(Generator, ParamSet, TrainConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = GvsTrainer::config_of(&ckpt)?;
    let gen = Generator::new(cfg.generator.clone())?;
    let mut g = gen.init_params(0);
    ckpt.restore_into("generator", &mut g)?;
    Ok((gen, g, cfg))
}

pub fn checkpoint_path(out: &Path, epoch: u64) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch}.ckpt"))
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{LOSS_CSV_HEADER}").expect("vec write");
    for r in history {
        writeln!(buf, "{}", r.csv_row()).expect("vec write");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Trains until `cfg.epochs` epochs are complete. With `out`, writes the
/// loss CSV after every epoch and one checkpoint per epoch. A failed write leaves the in-memory trainer intact
/// and is returned alongside it.
pub fn train_gvs(data: &[Sample], cfg: TrainConfig, out: Option<&Path>) -> Result<GvsTrainer> {
    let trainer = GvsTrainer::new(cfg)?;
    continue_training(trainer, data, out).map_err(|(e, _)| e)
}

/// Resumes from the latest state, training the remaining epochs.
pub fn continue_training(
    mut trainer: GvsTrainer,
    data: &[Sample],
    out: Option<&Path>,
) -> std::result::Result<GvsTrainer, (Error, Box<GvsTrainer>)> {
    if data.is_empty() {
        return Err((Error::InvalidInput("no training samples".into()), Box::new(trainer)));
    }
    if let Some(dir) = out {
        if let Err(e) = fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)) {
            return Err((e, Box::new(trainer)));
        }
    }
    while (trainer.state.epoch as usize) < trainer.cfg.epochs {
        if let Err(e) = trainer.train_epoch(data) {
            return Err((e, Box::new(trainer)));
        }
        let h = trainer.state.history.last().expect("epoch ran");
        log::info!(
            "epoch {}/{}: L_seg {:.4} L_s2 {:.4} L_R {:.5}",
            trainer.state.epoch,
            trainer.cfg.epochs,
            h.l_seg,
            h.l_s2,
            h.l_r
        );
        if let Some(dir) = out {
            let written = write_loss_csv(&dir.join("losses.csv"), &trainer.state.history).and_then(|_| {
                let ckpt = trainer.to_checkpoint()?;
                ckpt.save(&checkpoint_path(dir, trainer.state.epoch))
            });
            if let Err(e) = written {
                return Err((e, Box::new(trainer)));
            }
        }
    }
    Ok(trainer)
}

pub fn write_resolved_config<T: Serialize>(dir: &Path, cfg: &T) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.resolved.json");
    fs::write(&path, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_phantom;

    fn tiny() -> TrainConfig {
        TrainConfig {
            batch_size: 3,
            epochs: 2,
            seed: 5,
            generator: GeneratorSpec {
                base_channels: 2,
                downsamplings: 1,
                residual_blocks: 1,
                ..GeneratorSpec::default()
            },
            segmentor: SegmentorSpec {
                depth: 1,
                base_channels: 2,
                convs_per_level: 1,
                ..SegmentorSpec::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn bookkeeping_counts_batches() {
        let data = make_phantom(1, (32, 32), 7, 0.5).unwrap();
        let t = train_gvs(&data, TrainConfig { epochs: 1, ..tiny() }, None).unwrap();
        assert_eq!(t.state.history.len(), 3);
        assert_eq!(t.state.opt_s.step, 3);
        assert_eq!(t.state.opt_g.step, 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lambda: 0.0, ..tiny() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..tiny() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn steps_freeze_the_other_network() {
        let data = make_phantom(2, (32, 32), 3, 0.5).unwrap();
        let batch: Vec<&Sample> = data.iter().collect();
        let mut t = GvsTrainer::new(tiny()).unwrap();
        let g = t.state.g.snapshot();
        let s = t.state.s.snapshot();
        t.step_a(&batch).unwrap();
        assert!(t.state.g.equals(&g));
        assert!(!t.state.s.equals(&s));
        let s = t.state.s.snapshot();
        t.step_b(&batch).unwrap();
        assert!(t.state.s.equals(&s));
        assert!(!t.state.g.equals(&g));
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let data = make_phantom(3, (32, 32), 4, 0.5).unwrap();
        let t = train_gvs(&data, TrainConfig { epochs: 1, ..tiny() }, None).unwrap();
        let bytes = t.to_checkpoint().unwrap().to_bytes().unwrap();
        let back = GvsTrainer::from_checkpoint(t.cfg.clone(), &Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.state, t.state);
        let other = TrainConfig { lambda: 3.0, ..t.cfg.clone() };
        assert!(GvsTrainer::from_checkpoint(other, &t.to_checkpoint().unwrap()).is_err());
    }
}
