//! Mini-batch SGD training loops: memory-bank NCA, exact NCA (the expensive
//! oracle for small sets), and the parametric softmax baseline.

use std::io::{self, Write};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bank::{BankError, MemoryBank};
use crate::data::LabeledDataset;
use crate::embedding::{l2_normalize, l2_normalize_backward, EmbeddingVector, RawFeature};
use crate::encoder::{EncoderError, EncoderNetwork, ParameterGradients, SoftmaxHead};
use crate::kernels::{self, BLOCK};
use crate::loss::{
    class_probability, grad_exact_vi, nca_weights_in_place, neighbor_distribution,
    probs_from_sims_leave_one_out, ClassIndexSets, NcaConfig,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Memory-bank NCA (the scalable path).
    Nca,
    /// Exact NCA: all embeddings recomputed every step. The oracle the
    /// memory approximation is measured against; limited to small sets.
    NcaExact,
    /// Parametric softmax + cross-entropy baseline.
    SoftmaxBaseline,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Nca => "nca",
            TrainMode::NcaExact => "nca-exact",
            TrainMode::SoftmaxBaseline => "softmax-baseline",
        }
    }
}

/// Step schedule: `initial * decay^(epoch / interval)`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub interval: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 0.1, decay: 0.1, interval: 40 }
    }
}

/// Linear ramp of the bank momentum across training.
#[derive(Debug, Clone, Copy)]
pub struct MomentumSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for MomentumSchedule {
    fn default() -> Self {
        MomentumSchedule { start: 0.5, end: 0.9 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub temperature: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub bank_momentum: MomentumSchedule,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            temperature: 0.05,
            epsilon: NcaConfig::DEFAULT_EPSILON,
            batch_size: 64,
            epochs: 1,
            lr: LrSchedule::default(),
            bank_momentum: MomentumSchedule::default(),
            sgd_momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            mode: TrainMode::Nca,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<NcaConfig, TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr.initial > 0.0) || !(self.lr.decay > 0.0) || self.lr.interval == 0 {
            return Err(TrainError::InvalidConfig("lr schedule rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(TrainError::InvalidConfig("sgd_momentum must be in [0, 1)".into()));
        }
        for m in [self.bank_momentum.start, self.bank_momentum.end] {
            if !(0.0..1.0).contains(&m) {
                return Err(TrainError::InvalidConfig("bank momentum must be in [0, 1)".into()));
            }
        }
        NcaConfig::with_epsilon(self.temperature, self.epsilon)
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }
}

/// Learning rate at an epoch: `initial * decay^floor(epoch / interval)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr.initial * cfg.lr.decay.powi((epoch / cfg.lr.interval) as i32)
}

/// Bank momentum at an epoch: linear from `start` (epoch 0) to `end` (last
/// epoch).
pub fn bank_momentum_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.bank_momentum.start;
    }
    let t = epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.bank_momentum.start + (cfg.bank_momentum.end - cfg.bank_momentum.start) * t
}

/// One completed epoch.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub objective: f64,
    pub p_mean: f64,
    pub p_min: f64,
    pub lr: f64,
    /// Memory-bank momentum; `None` for modes without a bank.
    pub bank_momentum: Option<f64>,
    pub seconds: f64,
    /// Wall time spent in the NCA similarity/gradient kernels.
    pub nca_seconds: f64,
    pub bank_updates: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn final_objective(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.objective)
    }

    /// Share of step time spent in the NCA module, averaged over epochs.
    pub fn nca_time_share(&self) -> Option<f64> {
        if self.epochs.is_empty() {
            return None;
        }
        let total: f64 = self.epochs.iter().map(|e| e.seconds).sum();
        let nca: f64 = self.epochs.iter().map(|e| e.nca_seconds).sum();
        (total > 0.0).then(|| nca / total)
    }

    /// Line-delimited records: `epoch,objective,lr,momentum,seconds`.
    pub fn write_log(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "epoch,objective,lr,momentum,seconds")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{:.9},{:.6},{},{:.3}",
                e.epoch,
                e.objective,
                e.lr,
                e.bank_momentum.map_or(String::new(), |m| format!("{m:.4}")),
                e.seconds
            )?;
        }
        Ok(())
    }
}

fn diverged(epoch: usize, reason: impl ToString) -> TrainError {
    TrainError::Diverged { epoch, reason: reason.to_string() }
}

/// v <- mu v + (g + wd * theta); theta <- theta - lr * v
fn sgd_step(
    net: &mut EncoderNetwork,
    velocity: &mut ParameterGradients,
    grad: &ParameterGradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for (layer, (v, g)) in net
        .layers_mut()
        .iter_mut()
        .zip(velocity.layers.iter_mut().zip(&grad.layers))
    {
        for ((w, vel), gr) in layer.weight.iter_mut().zip(v.weight.iter_mut()).zip(&g.weight) {
            *vel = momentum * *vel + (gr + weight_decay * *w);
            *w -= lr * *vel;
        }
        for ((b, vel), gr) in layer.bias.iter_mut().zip(v.bias.iter_mut()).zip(&g.bias) {
            *vel = momentum * *vel + gr;
            *b -= lr * *vel;
        }
    }
}

struct BatchForward {
    raws: Vec<RawFeature>,
    tapes: Vec<crate::encoder::ActivationTape>,
    fresh: Vec<EmbeddingVector>,
}

fn forward_batch(
    net: &EncoderNetwork,
    dataset: &LabeledDataset,
    batch: &[usize],
    epoch: usize,
) -> Result<BatchForward, TrainError> {
    let mut raws = Vec::with_capacity(batch.len());
    let mut tapes = Vec::with_capacity(batch.len());
    let mut fresh = Vec::with_capacity(batch.len());
    for &i in batch {
        let (raw, tape) = net.forward(dataset.sample(i))?;
        let e = l2_normalize(&raw)
            .map_err(|err| diverged(epoch, format!("sample {i}: {err}")))?;
        raws.push(raw);
        tapes.push(tape);
        fresh.push(e);
    }
    Ok(BatchForward { raws, tapes, fresh })
}

/// Train with the memory-bank NCA objective.
///
/// Per batch: forward, Eq. 9 gradients against the frozen bank (all
/// neighbors, including other batch members, read from the bank), the
/// normalization Jacobian, backprop, one SGD step, then momentum updates of
/// the batch rows. Every row is touched exactly once per epoch.
pub fn train_nca(
    dataset: &LabeledDataset,
    net: &mut EncoderNetwork,
    bank: &mut MemoryBank,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let loss_cfg = cfg.validate()?;
    let n = dataset.len();
    let d = net.output_dim();
    if bank.len() != n {
        return Err(TrainError::ShapeMismatch(format!(
            "bank holds {} rows, dataset has {n} samples",
            bank.len()
        )));
    }
    if bank.dim() != d {
        return Err(TrainError::ShapeMismatch(format!(
            "bank dim {} vs encoder output dim {d}",
            bank.dim()
        )));
    }
    if dataset.input_dim() != net.input_dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "dataset dim {} vs encoder input dim {}",
            dataset.input_dim(),
            net.input_dim()
        )));
    }
    let classes = ClassIndexSets::from_labels(dataset.labels());
    let mut velocity = ParameterGradients::zeros_like(net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport { mode: TrainMode::Nca, epochs: Vec::with_capacity(cfg.epochs) };

    let mut order: Vec<usize> = (0..n).collect();
    let mut sims = vec![0.0f64; BLOCK * n];
    let mut queries = vec![0.0f64; BLOCK * d];
    let mut grads_v = vec![0.0f64; BLOCK * d];

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let mut nca_time = Duration::ZERO;
        let lr = lr_at(cfg, epoch);
        let momentum = bank_momentum_at(cfg, epoch);
        bank.set_momentum(momentum)?;
        bank.begin_epoch();
        order.shuffle(&mut rng);

        let mut objective_sum = 0.0f64;
        let mut p_sum = 0.0f64;
        let mut p_min = f64::INFINITY;
        let mut updates = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let fwd = forward_batch(net, dataset, batch, epoch)?;
            let mut batch_grad = ParameterGradients::zeros_like(net);
            let inv_batch = 1.0 / batch.len() as f64;

            for (block_start, block) in batch.chunks(BLOCK).enumerate().map(|(c, b)| (c * BLOCK, b))
            {
                let q = block.len();
                for (b, local) in (block_start..block_start + q).enumerate() {
                    queries[b * d..(b + 1) * d].copy_from_slice(fwd.fresh[local].as_slice());
                }
                let t0 = Instant::now();
                kernels::sim_block(bank.rows_flat(), n, d, &queries[..q * d], q, &mut sims);
                for (b, local) in (block_start..block_start + q).enumerate() {
                    let i = batch[local];
                    let row = &mut sims[b * n..(b + 1) * n];
                    probs_from_sims_leave_one_out(row, Some(i), loss_cfg.temperature);
                    let p_i = nca_weights_in_place(row, classes.omega(i), i, &loss_cfg)
                        .map_err(|err| diverged(epoch, err))?;
                    objective_sum -= p_i.max(loss_cfg.epsilon).ln();
                    p_sum += p_i;
                    p_min = p_min.min(p_i);
                }
                kernels::weighted_sum_block(bank.rows_flat(), n, d, &sims, q, &mut grads_v);
                nca_time += t0.elapsed();

                for (b, local) in (block_start..block_start + q).enumerate() {
                    let g_raw =
                        l2_normalize_backward(&fwd.raws[local], &grads_v[b * d..(b + 1) * d])
                            .map_err(|err| {
                                diverged(epoch, format!("sample {}: {err}", batch[local]))
                            })?;
                    let g = net.backward(&fwd.tapes[local], &g_raw)?;
                    batch_grad.add_scaled(&g, inv_batch);
                }
            }

            sgd_step(net, &mut velocity, &batch_grad, lr, cfg.sgd_momentum, cfg.weight_decay);
            for (local, &i) in batch.iter().enumerate() {
                bank.momentum_update(i, &fwd.fresh[local])?;
                updates += 1;
            }
        }

        bank.finish_epoch()?;
        let objective = objective_sum / n as f64;
        if !objective.is_finite() {
            return Err(diverged(epoch, format!("objective = {objective}")));
        }
        report.epochs.push(EpochRecord {
            epoch,
            objective,
            p_mean: p_sum / n as f64,
            p_min,
            lr,
            bank_momentum: Some(momentum),
            seconds: epoch_start.elapsed().as_secs_f64(),
            nca_seconds: nca_time.as_secs_f64(),
            bank_updates: updates,
        });
    }
    Ok(report)
}

/// Largest dataset the exact mode will accept; beyond this the per-step
/// whole-dataset forward is the bottleneck the memory bank exists to remove.
pub const EXACT_MODE_MAX_SAMPLES: usize = 1000;

/// Exact-NCA training: every step recomputes the embeddings of the whole
/// dataset and differentiates Eq. 5 against them. The reference the memory
/// approximation is validated against.
pub fn train_nca_exact(
    dataset: &LabeledDataset,
    net: &mut EncoderNetwork,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let loss_cfg = cfg.validate()?;
    let n = dataset.len();
    if n > EXACT_MODE_MAX_SAMPLES {
        return Err(TrainError::InvalidConfig(format!(
            "exact mode recomputes all embeddings per step; limited to {EXACT_MODE_MAX_SAMPLES} samples, got {n}"
        )));
    }
    if n < 2 {
        return Err(TrainError::ShapeMismatch("need at least 2 samples".into()));
    }
    if dataset.input_dim() != net.input_dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "dataset dim {} vs encoder input dim {}",
            dataset.input_dim(),
            net.input_dim()
        )));
    }
    let classes = ClassIndexSets::from_labels(dataset.labels());
    let mut velocity = ParameterGradients::zeros_like(net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report =
        TrainReport { mode: TrainMode::NcaExact, epochs: Vec::with_capacity(cfg.epochs) };
    let mut order: Vec<usize> = (0..n).collect();

    let embed_all = |net: &EncoderNetwork, epoch: usize| -> Result<Vec<EmbeddingVector>, TrainError> {
        (0..n)
            .map(|i| {
                let raw = net.embed_raw(dataset.sample(i))?;
                l2_normalize(&raw).map_err(|err| diverged(epoch, format!("sample {i}: {err}")))
            })
            .collect()
    };

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let mut nca_time = Duration::ZERO;
        let lr = lr_at(cfg, epoch);
        order.shuffle(&mut rng);

        for batch in order.chunks(cfg.batch_size) {
            let embeddings = embed_all(net, epoch)?;
            let fwd = forward_batch(net, dataset, batch, epoch)?;
            let mut batch_grad = ParameterGradients::zeros_like(net);
            let inv_batch = 1.0 / batch.len() as f64;
            for (local, &i) in batch.iter().enumerate() {
                let t0 = Instant::now();
                let grad_v = grad_exact_vi(i, &embeddings, &classes, &loss_cfg)
                    .map_err(|err| diverged(epoch, err))?;
                nca_time += t0.elapsed();
                let g_raw = l2_normalize_backward(&fwd.raws[local], &grad_v)
                    .map_err(|err| diverged(epoch, format!("sample {i}: {err}")))?;
                let g = net.backward(&fwd.tapes[local], &g_raw)?;
                batch_grad.add_scaled(&g, inv_batch);
            }
            sgd_step(net, &mut velocity, &batch_grad, lr, cfg.sgd_momentum, cfg.weight_decay);
        }

        // Epoch-end statistics over fresh embeddings.
        let embeddings = embed_all(net, epoch)?;
        let mut objective_sum = 0.0f64;
        let mut p_sum = 0.0f64;
        let mut p_min = f64::INFINITY;
        for i in 0..n {
            let dist = neighbor_distribution(i, &embeddings[i], embeddings.as_slice(), &loss_cfg)
                .map_err(|err| diverged(epoch, err))?;
            let p_i = class_probability(&dist, classes.omega(i));
            objective_sum -= p_i.max(loss_cfg.epsilon).ln();
            p_sum += p_i;
            p_min = p_min.min(p_i);
        }
        let objective = objective_sum / n as f64;
        if !objective.is_finite() {
            return Err(diverged(epoch, format!("objective = {objective}")));
        }
        report.epochs.push(EpochRecord {
            epoch,
            objective,
            p_mean: p_sum / n as f64,
            p_min,
            lr,
            bank_momentum: None,
            seconds: epoch_start.elapsed().as_secs_f64(),
            nca_seconds: nca_time.as_secs_f64(),
            bank_updates: 0,
        });
    }
    Ok(report)
}

/// Cross-entropy training of the parametric softmax baseline. The encoder
/// output (pre-head) is the feature later evaluated with kNN.
pub fn train_softmax_baseline(
    dataset: &LabeledDataset,
    net: &mut EncoderNetwork,
    head: &mut SoftmaxHead,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let n = dataset.len();
    if head.feature_dim() != net.output_dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "head feature dim {} vs encoder output dim {}",
            head.feature_dim(),
            net.output_dim()
        )));
    }
    if head.classes() != dataset.num_classes() {
        return Err(TrainError::ShapeMismatch(format!(
            "head has {} classes, dataset has {}",
            head.classes(),
            dataset.num_classes()
        )));
    }
    if dataset.input_dim() != net.input_dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "dataset dim {} vs encoder input dim {}",
            dataset.input_dim(),
            net.input_dim()
        )));
    }
    let mut velocity = ParameterGradients::zeros_like(net);
    let mut head_velocity = vec![0.0f64; head.prototypes().len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report =
        TrainReport { mode: TrainMode::SoftmaxBaseline, epochs: Vec::with_capacity(cfg.epochs) };
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = lr_at(cfg, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut p_sum = 0.0f64;
        let mut p_min = f64::INFINITY;

        for batch in order.chunks(cfg.batch_size) {
            let mut batch_grad = ParameterGradients::zeros_like(net);
            let mut head_grad = vec![0.0f64; head.prototypes().len()];
            let inv_batch = 1.0 / batch.len() as f64;
            for &i in batch {
                let (raw, tape) = net.forward(dataset.sample(i))?;
                let ce = head.cross_entropy_grad(raw.as_slice(), dataset.labels()[i])?;
                loss_sum += ce.loss;
                let p = (-ce.loss).exp();
                p_sum += p;
                p_min = p_min.min(p);
                let g = net.backward(&tape, &ce.feature)?;
                batch_grad.add_scaled(&g, inv_batch);
                for (acc, gp) in head_grad.iter_mut().zip(&ce.prototypes) {
                    *acc += inv_batch * gp;
                }
            }
            sgd_step(net, &mut velocity, &batch_grad, lr, cfg.sgd_momentum, cfg.weight_decay);
            for ((w, vel), g) in head
                .prototypes_mut()
                .iter_mut()
                .zip(head_velocity.iter_mut())
                .zip(&head_grad)
            {
                *vel = cfg.sgd_momentum * *vel + g;
                *w -= lr * *vel;
            }
        }

        let objective = loss_sum / n as f64;
        if !objective.is_finite() {
            return Err(diverged(epoch, format!("objective = {objective}")));
        }
        report.epochs.push(EpochRecord {
            epoch,
            objective,
            p_mean: p_sum / n as f64,
            p_min,
            lr,
            bank_momentum: None,
            seconds: epoch_start.elapsed().as_secs_f64(),
            nca_seconds: 0.0,
            bank_updates: 0,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledDataset;

    fn two_cluster_toy(n_per: usize, seed: u64) -> LabeledDataset {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (center, label) in [(-2.0f32, 0usize), (2.0f32, 1)] {
            for _ in 0..n_per {
                let dx: f64 = StandardNormal.sample(&mut rng);
                let dy: f64 = StandardNormal.sample(&mut rng);
                samples.push(center + 0.3 * dx as f32);
                samples.push(0.5 * dy as f32);
                labels.push(label);
            }
        }
        LabeledDataset::new(samples, 2, labels)
    }

    fn toy_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            temperature: 0.1,
            epochs,
            batch_size: 8,
            lr: LrSchedule { initial: 0.05, decay: 0.1, interval: 40 },
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_matches_interval_decay() {
        let cfg = TrainConfig {
            epochs: 130,
            lr: LrSchedule { initial: 0.1, decay: 0.1, interval: 40 },
            ..TrainConfig::default()
        };
        assert!((lr_at(&cfg, 0) - 0.1).abs() < 1e-15);
        assert!((lr_at(&cfg, 39) - 0.1).abs() < 1e-15);
        assert!((lr_at(&cfg, 40) - 0.01).abs() < 1e-15);
        assert!((lr_at(&cfg, 80) - 0.001).abs() < 1e-15);
        assert!((lr_at(&cfg, 125) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn bank_momentum_ramps_linearly() {
        let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
        assert!((bank_momentum_at(&cfg, 0) - 0.5).abs() < 1e-15);
        assert!((bank_momentum_at(&cfg, 4) - 0.9).abs() < 1e-15);
        assert!((bank_momentum_at(&cfg, 2) - 0.7).abs() < 1e-15);
        let one = TrainConfig { epochs: 1, ..TrainConfig::default() };
        assert!((bank_momentum_at(&one, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let ds = two_cluster_toy(10, 1);
        let mut net = EncoderNetwork::mlp(2, &[8], 4, 3);
        let mut bank = MemoryBank::init(ds.len(), 4, 5).unwrap();
        let net_before = net.clone();
        let bank_before = bank.rows_flat().to_vec();
        let report = train_nca(&ds, &mut net, &mut bank, &toy_config(0)).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(bank.rows_flat(), bank_before.as_slice());
        for (a, b) in net.layers().iter().zip(net_before.layers()) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn identical_seeds_reproduce_identical_runs() {
        let ds = two_cluster_toy(10, 2);
        let run = || {
            let mut net = EncoderNetwork::mlp(2, &[8], 4, 3);
            let mut bank = MemoryBank::init(ds.len(), 4, 5).unwrap();
            let report = train_nca(&ds, &mut net, &mut bank, &toy_config(3)).unwrap();
            (report, net, bank)
        };
        let (ra, na, ba) = run();
        let (rb, nb, bb) = run();
        for (a, b) in ra.epochs.iter().zip(&rb.epochs) {
            assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        }
        assert_eq!(ba.rows_flat(), bb.rows_flat());
        for (a, b) in na.layers().iter().zip(nb.layers()) {
            assert_eq!(a.weight, b.weight);
        }
    }

    #[test]
    fn each_row_touched_once_per_epoch() {
        let ds = two_cluster_toy(12, 3);
        let mut net = EncoderNetwork::mlp(2, &[8], 4, 3);
        let mut bank = MemoryBank::init(ds.len(), 4, 5).unwrap();
        let report = train_nca(&ds, &mut net, &mut bank, &toy_config(2)).unwrap();
        assert_eq!(bank.generation(), 2);
        for rec in &report.epochs {
            assert_eq!(rec.bank_updates, ds.len());
        }
        assert!(bank.touch_counts().iter().all(|&c| c == 1));
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let ds = two_cluster_toy(4, 4);
        let mut net = EncoderNetwork::mlp(2, &[8], 4, 3);
        let mut bank = MemoryBank::init(5, 4, 5).unwrap();
        assert!(matches!(
            train_nca(&ds, &mut net, &mut bank, &toy_config(1)),
            Err(TrainError::ShapeMismatch(_))
        ));
        let mut bank = MemoryBank::init(ds.len(), 3, 5).unwrap();
        assert!(matches!(
            train_nca(&ds, &mut net, &mut bank, &toy_config(1)),
            Err(TrainError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn exact_mode_rejects_large_sets() {
        let ds = two_cluster_toy(501, 5);
        let mut net = EncoderNetwork::mlp(2, &[4], 3, 0);
        assert!(matches!(
            train_nca_exact(&ds, &mut net, &toy_config(1)),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn baseline_shape_checks() {
        let ds = two_cluster_toy(6, 6);
        let mut net = EncoderNetwork::mlp(2, &[8], 4, 3);
        let mut head = SoftmaxHead::init(3, 4, 1).unwrap();
        assert!(matches!(
            train_softmax_baseline(&ds, &mut net, &mut head, &toy_config(1)),
            Err(TrainError::ShapeMismatch(_))
        ));
        let mut head = SoftmaxHead::init(2, 5, 1).unwrap();
        assert!(matches!(
            train_softmax_baseline(&ds, &mut net, &mut head, &toy_config(1)),
            Err(TrainError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn log_format_lines() {
        let report = TrainReport {
            mode: TrainMode::Nca,
            epochs: vec![EpochRecord {
                epoch: 0,
                objective: 1.25,
                p_mean: 0.5,
                p_min: 0.25,
                lr: 0.1,
                bank_momentum: Some(0.5),
                seconds: 2.0,
                nca_seconds: 0.5,
                bank_updates: 40,
            }],
        };
        let mut buf = Vec::new();
        report.write_log(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,objective,lr,momentum,seconds");
        assert!(lines.next().unwrap().starts_with("0,1.25"));
        assert!((report.nca_time_share().unwrap() - 0.25).abs() < 1e-12);
    }
}
