//! Progressive training: generators are unfrozen in reverse layer order.
//!
//! Phase `j` (1-based) trains generators `K−j+1 … K` together with the
//! classifier. Phase boundaries are the cumulative sums of the per-phase
//! epoch budgets. Each mini-batch step draws fresh noise for every layer,
//! so no noise batch is ever reused. A generator that is frozen runs with
//! its running batch-norm statistics, making it a fixed function; its
//! parameters and statistics stay bit-identical until its phase begins.
//! Adam moments of a generator start at zero when it is first unfrozen.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, argmax_rows, AdamConfig, Graph, Parameter, Var};
use crate::data::Dataset;
use crate::error::{GrffError, Result};
use crate::generator::{derive_seed, streams, Mode, NoiseSpec, NoiseStream};
use crate::model::{accuracy, GrffNetwork, TrainMask};
use crate::tensor::Tensor;

pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub epochs: Vec<usize>,
}

impl PhaseSchedule {
    pub fn new(epochs: &[usize]) -> Result<Self> {
        if epochs.is_empty() || epochs.contains(&0) {
            return Err(GrffError::Config(format!("phase epochs {epochs:?} must be non-empty and positive")));
        }
        Ok(PhaseSchedule { epochs: epochs.to_vec() })
    }

    pub fn layers(&self) -> usize {
        self.epochs.len()
    }

    pub fn total(&self) -> usize {
        self.epochs.iter().sum()
    }

    /// Cumulative end epoch of each phase.
    pub fn boundaries(&self) -> Vec<usize> {
        self.epochs
            .iter()
            .scan(0, |acc, &e| {
                *acc += e;
                Some(*acc)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phase {
    /// 1-based phase index.
    pub index: usize,
    pub mask: TrainMask,
}

/// Phase containing `epoch` (0-based): the smallest `j` with
/// `epoch < Σ_{i≤j} epochs_i`.
pub fn phase_of_epoch(schedule: &PhaseSchedule, epoch: usize) -> Result<Phase> {
    let k = schedule.layers();
    let j = schedule
        .boundaries()
        .iter()
        .position(|&b| epoch < b)
        .ok_or(GrffError::ScheduleExhausted {
            epoch,
            total: schedule.total(),
        })?
        + 1;
    Ok(Phase {
        index: j,
        mask: TrainMask {
            generators: (0..k).map(|g| g >= k - j).collect(),
            classifier: true,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d_list: Vec<usize>,
    pub schedule: PhaseSchedule,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl TrainConfig {
    pub fn new(d_list: &[usize], epochs: &[usize], seed: u64) -> Result<Self> {
        let cfg = TrainConfig {
            d_list: d_list.to_vec(),
            schedule: PhaseSchedule::new(epochs)?,
            batch_size: DEFAULT_BATCH_SIZE,
            adam: AdamConfig::default(),
            seed,
            validation_fraction: DEFAULT_VALIDATION_FRACTION,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Layer-count defaults: `K=1 {256}/{1000}`, `K=2 {256,64}/{200,1000}`,
    /// `K=3 {64,64,64}/{200,200,1000}`, `K=4 {64,64,64,64}/{200,200,200,1000}`.
    pub fn for_layers(k: usize, seed: u64) -> Result<Self> {
        let (d, e): (&[usize], &[usize]) = match k {
            1 => (&[256], &[1000]),
            2 => (&[256, 64], &[200, 1000]),
            3 => (&[64, 64, 64], &[200, 200, 1000]),
            4 => (&[64, 64, 64, 64], &[200, 200, 200, 1000]),
            _ => return Err(GrffError::Config(format!("no default configuration for K={k}"))),
        };
        TrainConfig::new(d, e, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_list.len() != self.schedule.layers() {
            return Err(GrffError::Config(format!(
                "D list has {} layers but the schedule has {} phases",
                self.d_list.len(),
                self.schedule.layers()
            )));
        }
        if self.batch_size == 0 {
            return Err(GrffError::Config("batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(GrffError::Config(format!("invalid Adam settings {:?}", self.adam)));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(GrffError::Config(format!(
                "validation_fraction {} outside [0,1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    pub steps: usize,
    /// Noise stream position before each step's draw.
    pub noise_positions: Vec<u128>,
}

/// Mini-batch index lists for one epoch, shuffled by `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64));
    rng.set_stream(streams::SHUFFLE);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(GrffError::Numeric(format!("non-finite training loss {loss} in epoch {epoch}")))
    }
}

/// One epoch of Adam updates on the parts of `net` enabled by the phase of
/// `epoch`. Returns the sample-weighted mean loss and training accuracy.
pub fn epoch_step(
    net: &mut GrffNetwork,
    data: &Dataset,
    config: &TrainConfig,
    epoch: usize,
    noise: &mut NoiseStream,
) -> Result<EpochStats> {
    let phase = phase_of_epoch(&config.schedule, epoch)?;
    let mask = phase.mask;
    let mut loss_sum = 0.0;
    let mut correct = 0.0;
    let mut positions = Vec::new();
    let batches = epoch_batches(data.len(), config.batch_size, config.seed, epoch);
    for batch in &batches {
        let xb = data.x.select_rows(batch);
        let yb: Vec<usize> = batch.iter().map(|&i| data.y[i]).collect();
        positions.push(noise.position());
        let noise_batches = noise.sample_layers(&net.d_list);
        let (loss, acc, grads, stats) = {
            let mut g = Graph::new();
            let xv = g.constant(&xb);
            let nv: Vec<Var> = noise_batches.iter().map(|n| g.constant(n)).collect();
            let trace = net.forward_var(&mut g, xv, &nv, Mode::Train, &mask)?;
            let loss = g.softmax_cross_entropy(trace.logits, &yb)?;
            let acc = accuracy(&argmax_rows(g.value(trace.logits)), &yb);
            let grads = g.backward(loss)?;
            (g.value(loss).item(), acc, grads, trace.stats)
        };
        check_finite(loss, epoch)?;
        loss_sum += loss * batch.len() as f64;
        correct += acc * batch.len() as f64;
        let mut active: Vec<&mut Parameter> = Vec::new();
        for (k, gen) in net.generators.iter_mut().enumerate() {
            if mask.generators[k] {
                gen.update_running(&stats[k]);
                active.extend(gen.params_mut());
            }
        }
        active.push(&mut net.classifier.weight);
        active.push(&mut net.classifier.bias);
        for p in active.iter_mut() {
            p.clear_grad();
            grads.accumulate_into(p);
        }
        adam_step(&mut active, &config.adam)?;
        for p in active.iter_mut() {
            p.clear_grad();
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EpochStats {
        loss: loss_sum / n,
        accuracy: correct / n,
        steps: batches.len(),
        noise_positions: positions,
    })
}

/// Eval-mode mean cross-entropy and accuracy under the given noise.
pub fn evaluate(net: &GrffNetwork, data: &Dataset, noise: &[Tensor]) -> Result<(f64, f64)> {
    let w = net.weights(noise)?;
    let logits = net.logits_with_weights(&data.x, &w)?;
    let c = net.num_classes;
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks(c).zip(&data.y) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, accuracy(&argmax_rows(&logits), &data.y)))
}

pub struct TrainOutcome {
    /// Snapshot with the best validation accuracy.
    pub best: GrffNetwork,
    pub best_epoch: usize,
    /// Network after the last epoch.
    pub last: GrffNetwork,
    pub history: Vec<EpochRecord>,
}

/// Index of the record with maximal validation accuracy; ties go to the
/// earliest epoch.
pub fn best_epoch(history: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in history.iter().enumerate() {
        if best.is_none_or(|b| r.val_acc > history[b].val_acc) {
            best = Some(i);
        }
    }
    best
}

pub fn select_best_on_validation<'a, T>(history: &[EpochRecord], snapshots: &'a [T]) -> Option<&'a T> {
    best_epoch(history).and_then(|i| snapshots.get(i))
}

/// Runs the whole schedule, recording one history row per epoch and keeping
/// the best-validation snapshot. `on_epoch` sees every finished record.
pub fn train_progressive_with(
    mut net: GrffNetwork,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.d_list != net.d_list {
        return Err(GrffError::Config(format!(
            "config D list {:?} differs from the network's {:?}",
            config.d_list, net.d_list
        )));
    }
    if train.is_empty() || val.is_empty() {
        return Err(GrffError::Config("training and validation sets must be non-empty".into()));
    }
    let spec = NoiseSpec {
        noise_dim: net.noise.noise_dim,
        seed: config.seed,
    };
    let mut train_noise = NoiseStream::new(&spec, streams::TRAIN);
    let mut val_noise = NoiseStream::new(&spec, streams::VALIDATION);
    let mut history = Vec::with_capacity(config.schedule.total());
    let mut best: Option<(GrffNetwork, usize, f64)> = None;
    for epoch in 0..config.schedule.total() {
        let phase = phase_of_epoch(&config.schedule, epoch)?.index;
        let stats = epoch_step(&mut net, train, config, epoch, &mut train_noise)?;
        let (val_loss, val_acc) = evaluate(&net, val, &val_noise.sample_layers(&net.d_list))?;
        check_finite(val_loss, epoch)?;
        let rec = EpochRecord {
            epoch,
            phase,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            val_loss,
            val_acc,
        };
        if best.as_ref().is_none_or(|b| val_acc > b.2) {
            best = Some((net.clone(), epoch, val_acc));
        }
        on_epoch(&rec);
        history.push(rec);
    }
    let (best, best_epoch, _) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: net,
        history,
    })
}

pub fn train_progressive(net: GrffNetwork, train: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_progressive_with(net, train, val, config, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;

    fn rec(epoch: usize, val_acc: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            phase: 1,
            train_loss: 0.0,
            train_acc: 0.0,
            val_loss: 0.0,
            val_acc,
        }
    }

    #[test]
    fn phases() {
        let s = PhaseSchedule::new(&[200, 1000]).unwrap();
        let p = phase_of_epoch(&s, 199).unwrap();
        assert_eq!(p.index, 1);
        assert_eq!(p.mask.generators, vec![false, true]);
        let p = phase_of_epoch(&s, 200).unwrap();
        assert_eq!(p.index, 2);
        assert_eq!(p.mask.generators, vec![true, true]);
        assert!(matches!(phase_of_epoch(&s, 1200), Err(GrffError::ScheduleExhausted { .. })));
        let one = PhaseSchedule::new(&[7]).unwrap();
        assert!((0..7).all(|e| phase_of_epoch(&one, e).unwrap().index == 1));
        let s3 = PhaseSchedule::new(&[2, 3, 4]).unwrap();
        let mut prev = 0;
        for e in 0..9 {
            let n = phase_of_epoch(&s3, e).unwrap().mask.generators.iter().filter(|&&t| t).count();
            assert!(n >= prev);
            prev = n;
        }
        assert_eq!(s3.boundaries(), vec![2, 5, 9]);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::for_layers(2, 0).unwrap();
        assert_eq!(c.d_list, vec![256, 64]);
        assert_eq!(c.schedule.epochs, vec![200, 1000]);
        assert_eq!((c.batch_size, c.adam.lr, c.validation_fraction), (128, 1e-3, 0.2));
        assert!(matches!(TrainConfig::new(&[4, 4], &[3], 0), Err(GrffError::Config(_))));
    }

    #[test]
    fn best_selection_rules() {
        let rising = [rec(0, 0.5), rec(1, 0.6), rec(2, 0.7)];
        assert_eq!(best_epoch(&rising), Some(2));
        let plateau = [rec(0, 0.5), rec(1, 0.8), rec(2, 0.8), rec(3, 0.7)];
        assert_eq!(best_epoch(&plateau), Some(1));
        assert_eq!(select_best_on_validation(&plateau, &["a", "b", "c", "d"]), Some(&"b"));
        assert_eq!(best_epoch(&[]), None);
    }

    fn toy(n: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            let c = usize::from(a + 0.5 * b > 0.0);
            let shift = if c == 1 { 0.3 } else { -0.3 };
            data.extend_from_slice(&[a + shift, b]);
            y.push(c);
        }
        Dataset::new("toy", Tensor::new(vec![n, 2], data).unwrap(), y, vec!["0".into(), "1".into()]).unwrap()
    }

    fn small_net(d_list: &[usize], seed: u64) -> GrffNetwork {
        let spec = NetworkSpec {
            hidden: Some(d_list.iter().map(|_| vec![16, 16]).collect()),
            noise_dim: 8,
            ..NetworkSpec::vector(2, d_list, 2)
        };
        GrffNetwork::build(&spec, seed).unwrap()
    }

    #[test]
    fn separable_toy_loss_falls() {
        let data = toy(256, 1);
        let mut net = small_net(&[32], 2);
        let cfg = TrainConfig {
            adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
            batch_size: 32,
            ..TrainConfig::new(&[32], &[50], 3).unwrap()
        };
        let mut noise = NoiseStream::new(&NoiseSpec { noise_dim: 8, seed: 3 }, streams::TRAIN);
        let mut last = f64::INFINITY;
        for e in 0..50 {
            last = epoch_step(&mut net, &data, &cfg, e, &mut noise).unwrap().loss;
        }
        assert!(last < 0.1, "{last}");
    }

    #[test]
    fn freezing_and_noise_audit() {
        let data = toy(64, 2);
        let mut net = small_net(&[6, 4], 4);
        let cfg = TrainConfig {
            batch_size: 16,
            ..TrainConfig::new(&[6, 4], &[2, 2], 5).unwrap()
        };
        let g0 = net.generators[0].snapshot();
        let g1 = net.generators[1].snapshot();
        let mut noise = NoiseStream::new(&NoiseSpec { noise_dim: 8, seed: 5 }, streams::TRAIN);
        let mut positions = Vec::new();
        for e in 0..2 {
            positions.extend(epoch_step(&mut net, &data, &cfg, e, &mut noise).unwrap().noise_positions);
            assert_eq!(net.generators[0].snapshot(), g0);
        }
        assert_ne!(net.generators[1].snapshot(), g1);
        epoch_step(&mut net, &data, &cfg, 2, &mut noise).unwrap();
        assert_ne!(net.generators[0].snapshot(), g0);
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn history_and_determinism() {
        let data = toy(80, 3);
        let val = toy(40, 4);
        let cfg = TrainConfig {
            batch_size: 16,
            ..TrainConfig::new(&[6, 4], &[3, 3], 6).unwrap()
        };
        crate::parallel::set_parallel(false);
        let a = train_progressive(small_net(&[6, 4], 7), &data, &val, &cfg).unwrap();
        let b = train_progressive(small_net(&[6, 4], 7), &data, &val, &cfg).unwrap();
        crate::parallel::set_parallel(true);
        assert_eq!(a.history.len(), 6);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.iter().map(|r| r.phase).collect::<Vec<_>>(), vec![1, 1, 1, 2, 2, 2]);
        let best = a.history[a.best_epoch].val_acc;
        assert!(best >= a.history.last().unwrap().val_acc);
        assert_eq!(Some(a.best_epoch), best_epoch(&a.history));
    }
}
