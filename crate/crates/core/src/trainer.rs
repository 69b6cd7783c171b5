//! SGD training loops for pretraining and for anomaly tasks.

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{make_partition, Backbone, Model, PartitionMode};
use crate::objectives::{hsc_loss, l2sp_penalty, one_class_loss, Origin};

/// Named default sets for [`TrainConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// 30 epochs, drops after 20 and 25.
    Desk,
    /// 120 epochs, drops after 80 and 100.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!(
                "unknown profile `{s}` (expected desk or paper)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    /// Epochs after which the learning rate is multiplied by 0.1.
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub seeds: usize,
    /// Adapter experts per block.
    pub experts: usize,
    pub mode: PartitionMode,
    pub l2sp_strength: f32,
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let epochs = match profile {
            Profile::Desk => 30,
            Profile::Paper => 120,
        };
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs,
            milestones: Self::scaled_milestones(epochs),
            batch_size: 128,
            seeds: 5,
            experts: 2,
            mode: PartitionMode::Adra,
            l2sp_strength: 1e-2,
        }
    }

    /// Milestones at 2/3 and 5/6 of the run, the positions of 80 and 100 in 120.
    pub fn scaled_milestones(epochs: usize) -> Vec<usize> {
        let mut m = vec![epochs * 2 / 3, epochs * 5 / 6];
        m.retain(|&e| e > 0 && e < epochs);
        m.dedup();
        m
    }

    pub fn validate(&self, with_corpus: bool) -> Result<()> {
        if self.lr.is_nan()
            || self.lr <= 0.0
            || !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return Err(Error::Config(format!(
                "invalid optimizer settings lr={} momentum={} weight-decay={}",
                self.lr, self.momentum, self.weight_decay
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1])
            || self.milestones.iter().any(|&m| m >= self.epochs)
        {
            return Err(Error::Config(format!(
                "milestones {:?} must increase strictly and stay below {} epochs",
                self.milestones, self.epochs
            )));
        }
        if with_corpus && !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch size {} must be even when a corpus is present",
                self.batch_size
            )));
        }
        if !(1..=16).contains(&self.experts) {
            return Err(Error::Config(format!(
                "{} experts per block is out of range",
                self.experts
            )));
        }
        Ok(())
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        (0..drops).fold(self.lr, |lr, _| lr * 0.1)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

/// Momentum buffers of the trainable parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Option<Tensor<f32>>>,
    pub lr: f32,
}

impl OptimizerState {
    pub fn new(lr: f32) -> Self {
        OptimizerState {
            velocity: Vec::new(),
            lr,
        }
    }

    pub fn velocity(&self, index: usize) -> Option<&Tensor<f32>> {
        self.velocity.get(index).and_then(Option::as_ref)
    }
}

/// `g' = g + wd·p; v ← μ·v + g'; p ← p − lr·v` for every trainable `p`.
pub fn sgd_step(
    params: &mut ParamStore<f32>,
    state: &mut OptimizerState,
    momentum: f32,
    weight_decay: f32,
) {
    if state.velocity.len() < params.len() {
        state.velocity.resize(params.len(), None);
    }
    let lr = state.lr;
    for (p, slot) in params.iter_mut().zip(state.velocity.iter_mut()) {
        if !p.trainable {
            continue;
        }
        let v = slot.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for ((w, &g), vel) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(v.data_mut())
        {
            let g = g + weight_decay * *w;
            *vel = momentum * *vel + g;
            *w -= lr * *vel;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f32,
    pub lr: f32,
}

/// Per-batch training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub records: Vec<LossRecord>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,batch,loss,lr\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.epoch, r.batch, r.loss, r.lr);
        }
        out
    }

    /// Mean batch loss of every epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.records.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        let mut sums = vec![(0.0f64, 0usize); epochs];
        for r in &self.records {
            sums[r.epoch].0 += r.loss as f64;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

fn check_finite(loss: f32, epoch: usize, batch: usize, lr: f32) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!(
            "loss {loss} at epoch {epoch}, batch {batch} (lr {lr})"
        )))
    }
}

/// Result of [`pretrain`].
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub backbone: Backbone,
    pub hash: [u8; 32],
    pub curve: LossCurve,
}

/// Train the backbone and classifier with softmax cross-entropy, then
/// return the frozen backbone without its classifier.
pub fn pretrain(
    model: &mut Model,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Pretrained> {
    cfg.validate(false)?;
    if data.is_empty() {
        return Err(Error::Contract("empty pretraining set".into()));
    }
    if data.class_count > model.arch.config.class_count {
        return Err(Error::Config(format!(
            "{} classes in data, classifier has {}",
            data.class_count, model.arch.config.class_count
        )));
    }
    for p in model.params.iter_mut() {
        p.trainable = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = OptimizerState::new(cfg.lr);
    let mut curve = LossCurve::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        state.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::trainable_only();
            let x = tape.input(data.images.select_rows(idx));
            let logits = model.arch.logits(&mut tape, &model.params, x)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let value = tape.value(loss).item();
            check_finite(value, epoch, batch, state.lr)?;
            model.params.zero_grad();
            tape.backward(loss, &mut model.params)?;
            sgd_step(
                &mut model.params,
                &mut state,
                cfg.momentum,
                cfg.weight_decay,
            );
            curve.records.push(LossRecord {
                epoch,
                batch,
                loss: value,
                lr: state.lr,
            });
        }
        debug!(
            "pretrain epoch {epoch}: loss {:.4}",
            curve.epoch_means()[epoch]
        );
    }
    let backbone = model.backbone()?;
    let hash = backbone.hash();
    info!(
        "pretraining finished, final loss {:.4}",
        curve.epoch_means().last().unwrap_or(&f64::NAN)
    );
    Ok(Pretrained {
        backbone,
        hash,
        curve,
    })
}

/// Top-1 accuracy of the pretraining classifier.
pub fn accuracy(model: &Model, data: &LabeledDataset) -> Result<f64> {
    let logits = model.logits_tensor(&data.images)?;
    let c = logits.row_len();
    let hits = logits
        .data()
        .chunks(c)
        .zip(&data.labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                );
            best.0 == l
        })
        .count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Cycles through a reshuffled permutation, reshuffling on exhaustion.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cycler { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Nominal rows `idx`, followed by as many corpus rows when a corpus is given.
fn assemble_batch(
    nominal: &Tensor<f32>,
    idx: &[usize],
    corpus: Option<(&Tensor<f32>, &mut Cycler)>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Vec<Origin>)> {
    let mut x = nominal.select_rows(idx);
    let mut origins = vec![Origin::Nominal; idx.len()];
    if let Some((c, cycle)) = corpus {
        let picked = cycle.take(idx.len(), rng);
        x = Tensor::concat_rows(&[&x, &c.select_rows(&picked)])?;
        origins.extend(std::iter::repeat_n(Origin::Corpus, picked.len()));
    }
    Ok((x, origins))
}

/// Minimize the radial objective over the trainable side of `cfg.mode`.
///
/// With a nonempty `corpus` every batch holds `batch_size / 2` nominal and
/// as many corpus samples and the loss is the HSC loss; without one, batches
/// are nominal only and the one-class loss is used. `anchor` is required
/// for [`PartitionMode::L2sp`]. Under [`PartitionMode::Adra`] the backbone
/// hash is verified after every epoch.
pub fn train_task(
    model: &mut Model,
    nominal: &Tensor<f32>,
    corpus: Option<&Tensor<f32>>,
    cfg: &TrainConfig,
    anchor: Option<&ParamStore<f32>>,
    seed: u64,
) -> Result<LossCurve> {
    let corpus = corpus.filter(|c| !c.is_empty());
    cfg.validate(corpus.is_some())?;
    let n = nominal.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Contract("empty nominal set".into()));
    }
    if cfg.mode == PartitionMode::L2sp && anchor.is_none() {
        return Err(Error::Contract("l2sp training needs an anchor".into()));
    }
    make_partition(model, cfg.mode).apply(&mut model.params)?;
    let theta_before = (cfg.mode == PartitionMode::Adra).then(|| model.theta_hash());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_side = if corpus.is_some() {
        cfg.batch_size / 2
    } else {
        cfg.batch_size
    };
    let mut corpus_cycle = corpus.map(|c| Cycler::new(c.shape()[0], &mut rng));
    let mut order: Vec<usize> = (0..n).collect();
    let mut state = OptimizerState::new(cfg.lr);
    let mut curve = LossCurve::default();

    for epoch in 0..cfg.epochs {
        state.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for (batch, idx) in order.chunks(per_side).enumerate() {
            let exposure = corpus.zip(corpus_cycle.as_mut());
            let (x, origins) = assemble_batch(nominal, idx, exposure, &mut rng)?;
            let mut tape = Tape::trainable_only();
            let xv = tape.input(x);
            let z = model.arch.embed(&mut tape, &model.params, xv)?;
            let mut loss = if corpus.is_some() {
                hsc_loss(&mut tape, z, &origins)?
            } else {
                one_class_loss(&mut tape, z, &origins)?
            };
            if cfg.mode == PartitionMode::L2sp {
                let anchor = anchor.expect("checked above");
                let penalty = l2sp_penalty(&mut tape, &model.params, anchor, cfg.l2sp_strength)?;
                loss = tape.add(loss, penalty)?;
            }
            let value = tape.value(loss).item();
            check_finite(value, epoch, batch, state.lr)?;
            model.params.zero_grad();
            tape.backward(loss, &mut model.params)?;
            sgd_step(
                &mut model.params,
                &mut state,
                cfg.momentum,
                cfg.weight_decay,
            );
            curve.records.push(LossRecord {
                epoch,
                batch,
                loss: value,
                lr: state.lr,
            });
        }
        if let Some(expected) = theta_before {
            if model.theta_hash() != expected {
                return Err(Error::Contract(format!(
                    "backbone parameters changed during epoch {epoch}"
                )));
            }
        }
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_at_milestones() {
        let cfg = TrainConfig::profile(Profile::Desk);
        assert_eq!(cfg.milestones, vec![20, 25]);
        assert_eq!(cfg.lr_at(19), 0.01);
        assert!((cfg.lr_at(20) - 0.001).abs() < 1e-9);
        assert!((cfg.lr_at(29) - 0.0001).abs() < 1e-10);
        assert_eq!(
            TrainConfig::profile(Profile::Paper).milestones,
            vec![80, 100]
        );
    }

    #[test]
    fn validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate(true).is_ok());
        cfg.batch_size = 127;
        assert!(cfg.validate(true).is_err());
        assert!(cfg.validate(false).is_ok());
        let mut cfg = TrainConfig {
            milestones: vec![25, 20],
            ..TrainConfig::default()
        };
        assert!(cfg.validate(false).is_err());
        cfg.milestones = vec![30];
        assert!(cfg.validate(false).is_err());
        assert!("desk".parse::<Profile>().is_ok());
        assert!("laptop".parse::<Profile>().is_err());
    }

    #[test]
    fn sgd_update_rule() {
        let mut store = ParamStore::new();
        store
            .insert("p", Tensor::from_vec(vec![1.0f32]), true)
            .unwrap();
        let mut state = OptimizerState::new(0.1);
        sgd_step(&mut store, &mut state, 0.9, 1e-4);
        assert!((state.velocity(0).unwrap().data()[0] - 1e-4).abs() < 1e-12);
        assert!((store.get(crate::autodiff::ParamId(0)).value.data()[0] - 0.99999).abs() < 1e-7);

        let mut store = ParamStore::new();
        store
            .insert("p", Tensor::from_vec(vec![1.0f32]), true)
            .unwrap();
        store.by_name_mut("p").unwrap().grad = Tensor::from_vec(vec![2.0]);
        let mut state = OptimizerState::new(0.5);
        sgd_step(&mut store, &mut state, 0.0, 0.0);
        assert_eq!(store.by_name("p").unwrap().value.data(), &[0.0]);
    }

    #[test]
    fn frozen_parameters_are_never_stepped() {
        let mut store = ParamStore::new();
        store
            .insert("f", Tensor::from_vec(vec![0.3f32, -1.7]), false)
            .unwrap();
        store.by_name_mut("f").unwrap().grad = Tensor::from_vec(vec![5.0, -2.0]);
        let before = store.by_name("f").unwrap().value.to_le_bytes();
        let mut state = OptimizerState::new(0.1);
        for _ in 0..3 {
            sgd_step(&mut store, &mut state, 0.9, 1e-4);
        }
        assert_eq!(store.by_name("f").unwrap().value.to_le_bytes(), before);
        assert!(state.velocity(0).is_none());
    }

    #[test]
    fn batches_are_half_corpus() {
        let nominal = Tensor::from_fn(&[5, 1], |i| i as f32);
        let corpus = Tensor::from_fn(&[3, 1], |i| 100.0 + i as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cycle = Cycler::new(3, &mut rng);
        let mut seen = Vec::new();
        for idx in [&[0usize, 1][..], &[2, 3], &[4]] {
            let (x, origins) =
                assemble_batch(&nominal, idx, Some((&corpus, &mut cycle)), &mut rng).unwrap();
            let corpus_rows = origins.iter().filter(|&&o| o == Origin::Corpus).count();
            assert_eq!(corpus_rows, idx.len());
            assert_eq!(x.shape(), &[2 * idx.len(), 1]);
            seen.extend(x.data()[idx.len()..].iter().map(|v| *v as usize));
        }
        // The corpus is cycled: the first pass visits each row exactly once.
        let mut first: Vec<usize> = seen[..3].to_vec();
        first.sort_unstable();
        assert_eq!(first, vec![100, 101, 102]);
        let (_, origins) = assemble_batch(&nominal, &[0, 1, 2], None, &mut rng).unwrap();
        assert!(origins.iter().all(|&o| o == Origin::Nominal));
    }
}
