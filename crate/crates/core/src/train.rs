//! End-to-end optimization: cross-entropy on the rollout's class logits,
//! Adam with per-step exponential learning-rate decay, class-balanced epoch
//! sampling, and dihedral augmentation.
//!
//! RNG discipline: master seed -> per-epoch stream -> per-sample
//! substreams, so per-sample work can run concurrently without changing
//! results. Gradients are summed at a barrier after all per-sample
//! backward passes, in sample order.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{
    classify, collect_grads, record_forward, rollout, MaskSource, NcaConfig, NcaParams, Rollout,
    StepMask,
};
use crate::rng::stream;
use crate::tape::Tape;
use crate::Real;

/// `-log softmax(logits)[label]`, computed with max-subtraction.
pub fn cross_entropy<F: Real>(logits: &[F], label: usize) -> Result<F> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, num_classes: logits.len() });
    }
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let log_sum: F = logits.iter().map(|&z| (z - max).exp()).sum::<F>().ln();
    Ok(log_sum - (logits[label] - max))
}

/// Loss used for training. Predictions argmax identically either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Categorical cross-entropy over softmax of the logits.
    #[default]
    SoftmaxCrossEntropy,
    /// Per-class binary cross-entropy against the sigmoid outputs.
    SigmoidBce,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-optimizer-step exponential decay weight.
    pub decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr0: 0.0004, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay: 0.9999 }
    }
}

/// Learning rate applied at optimizer step `t` (zero-based): `lr0 * decay^t`.
pub fn lr_at(hyper: &AdamHyper, t: usize) -> f64 {
    hyper.lr0 * hyper.decay.powi(t as i32)
}

/// Adam moment buffers, zero at t=0.
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub t: usize,
    pub m: NcaParams<F>,
    pub v: NcaParams<F>,
    pub hyper: AdamHyper,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: &NcaConfig, hyper: AdamHyper) -> Self {
        OptimizerState { t: 0, m: NcaParams::zeros(config), v: NcaParams::zeros(config), hyper }
    }
}

/// One Adam update with bias correction, using the decayed learning rate
/// for the current step.
pub fn adam_step<F: Real>(
    params: &mut NcaParams<F>,
    grads: &NcaParams<F>,
    state: &mut OptimizerState<F>,
) {
    let lr = F::from_f64_c(lr_at(&state.hyper, state.t));
    state.t += 1;
    let b1 = F::from_f64_c(state.hyper.beta1);
    let b2 = F::from_f64_c(state.hyper.beta2);
    let eps = F::from_f64_c(state.hyper.eps);
    let one = F::one();
    let t = state.t as i32;
    let corr1 = one - b1.powi(t);
    let corr2 = one - b2.powi(t);
    for ((p, g), (m, v)) in params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(state.m.blocks_mut().into_iter().zip(state.v.blocks_mut()))
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Emits an epoch's sample order with exactly uniform class counts: every
/// class appears T = round(mean class count) times; classes above T are
/// undersampled without replacement, classes below T oversampled with
/// replacement, then the whole list is shuffled.
pub fn balanced_epoch(
    labels: &[usize],
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (idx, &label) in labels.iter().enumerate() {
        per_class[label].push(idx);
    }
    if let Some(empty) = per_class.iter().position(|c| c.is_empty()) {
        return Err(Error::EmptyClass { class_id: empty });
    }
    let target = ((labels.len() as f64 / num_classes as f64).round() as usize).max(1);
    let mut order = Vec::with_capacity(target * num_classes);
    for members in &per_class {
        if members.len() >= target {
            let mut pool = members.clone();
            pool.shuffle(rng);
            order.extend_from_slice(&pool[..target]);
        } else {
            for _ in 0..target {
                order.push(members[rng.gen_range(0..members.len())]);
            }
        }
    }
    order.shuffle(rng);
    Ok(order)
}

/// One of the 8 dihedral transforms of a square image: `rot` quarter turns
/// clockwise, then an optional horizontal flip.
pub fn dihedral<F: Real>(image: &Grid<F>, rot: u8, flip: bool) -> Result<Grid<F>> {
    let s = image.height();
    if image.width() != s {
        return Err(Error::NonSquareImage { height: image.height(), width: image.width() });
    }
    let mut out = Grid::zeros(s, s, image.channels());
    for i in 0..s {
        for j in 0..s {
            let (ti, mut tj) = match rot % 4 {
                0 => (i, j),
                1 => (j, s - 1 - i),
                2 => (s - 1 - i, s - 1 - j),
                _ => (s - 1 - j, i),
            };
            if flip {
                tj = s - 1 - tj;
            }
            out.cell_mut(ti, tj).copy_from_slice(image.cell(i, j));
        }
    }
    Ok(out)
}

/// Uniformly random dihedral transform.
pub fn augment<F: Real>(image: &Grid<F>, rng: &mut ChaCha8Rng) -> Result<Grid<F>> {
    let rot = rng.gen_range(0u8..4);
    let flip = rng.gen_bool(0.5);
    dihedral(image, rot, flip)
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Grid<f32>,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stratified validation holdout fraction, fixed by the master seed.
    pub val_fraction: f64,
    pub loss: LossKind,
    pub augment: bool,
    pub hyper: AdamHyper,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            batch_size: 16,
            epochs: 32,
            val_fraction: 0.15,
            loss: LossKind::SoftmaxCrossEntropy,
            augment: true,
            hyper: AdamHyper::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

impl EpochMetrics {
    /// One line-delimited record.
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} train_loss={:.6} val_loss={:.6} train_acc={:.4} val_acc={:.4} lr={:.8}",
            self.epoch, self.train_loss, self.val_loss, self.train_acc, self.val_acc, self.lr
        )
    }
}

/// Deterministic stratified split into (train, validation) index sets.
pub fn stratified_split(
    labels: &[usize],
    num_classes: usize,
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (idx, &label) in labels.iter().enumerate() {
        per_class[label].push(idx);
    }
    let mut rng = stream(seed, &[5]);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for members in per_class.iter_mut() {
        members.shuffle(&mut rng);
        let n_val = ((members.len() as f64) * val_fraction).floor() as usize;
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

struct SampleResult {
    grads: NcaParams<f32>,
    loss: f64,
    correct: bool,
}

fn forward_backward(
    sample: &Sample,
    params: &NcaParams<f32>,
    config: &NcaConfig,
    plan: &TrainPlan,
    rng: &mut ChaCha8Rng,
) -> Result<SampleResult> {
    let image =
        if plan.augment { augment(&sample.image, rng)? } else { sample.image.clone() };
    let (h, w) = (image.height(), image.width());
    let masks: Vec<StepMask> =
        (0..config.steps).map(|_| StepMask::sample(h, w, config.fire_rate, rng)).collect();
    let mut tape = Tape::new();
    let (logits, leaves) = record_forward(&mut tape, &image, params, config, &masks)?;
    let loss_node = match plan.loss {
        LossKind::SoftmaxCrossEntropy => tape.softmax_cross_entropy(logits, sample.class_id)?,
        LossKind::SigmoidBce => tape.sigmoid_bce(logits, sample.class_id)?,
    };
    let loss = tape.value(loss_node).as_scalar() as f64;
    let predicted = crate::model::argmax(tape.value(logits).as_vector());
    tape.backward(loss_node)?;
    Ok(SampleResult {
        grads: collect_grads(&tape, &leaves, config),
        loss,
        correct: predicted == sample.class_id,
    })
}

fn eval_sample(
    sample: &Sample,
    params: &NcaParams<f32>,
    config: &NcaConfig,
    loss_kind: LossKind,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, bool)> {
    let r: Rollout<f32> = rollout(&sample.image, params, config, MaskSource::Sample(rng))?;
    let trace = classify(&r.features, params)?;
    let loss = match loss_kind {
        LossKind::SoftmaxCrossEntropy => cross_entropy(&trace.logits, sample.class_id)? as f64,
        LossKind::SigmoidBce => {
            let mut acc = 0.0f64;
            for (c, &z) in trace.logits.iter().enumerate() {
                let t = if c == sample.class_id { -z as f64 } else { z as f64 };
                acc += if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
            }
            acc
        }
    };
    Ok((loss, trace.predicted == sample.class_id))
}

/// Trains from scratch: `epochs` balanced epochs of `batch_size` batches,
/// each batch running rollout -> classify -> loss -> backward per sample
/// and one Adam step on the averaged gradients. Fully reproducible from
/// `seed`.
pub fn fit(
    samples: &[Sample],
    config: &NcaConfig,
    plan: &TrainPlan,
    seed: u64,
) -> Result<(NcaParams<f32>, Vec<EpochMetrics>)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.class_id).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= config.num_classes) {
        return Err(Error::LabelOutOfRange { label: bad, num_classes: config.num_classes });
    }
    let (train_idx, val_idx) =
        stratified_split(&labels, config.num_classes, plan.val_fraction, seed);
    let train_labels: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();

    let mut params = NcaParams::init(config, &mut stream(seed, &[1]));
    let mut opt = OptimizerState::new(config, plan.hyper);
    let mut metrics = Vec::with_capacity(plan.epochs);

    for epoch in 0..plan.epochs {
        let mut epoch_rng = stream(seed, &[2, epoch as u64]);
        let order = balanced_epoch(&train_labels, config.num_classes, &mut epoch_rng)?;
        let lr_this_epoch = lr_at(&opt.hyper, opt.t);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (batch_no, batch) in order.chunks(plan.batch_size).enumerate() {
            let results: Result<Vec<SampleResult>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &pos)| {
                    let mut rng = stream(
                        seed,
                        &[3, epoch as u64, (batch_no * plan.batch_size + k) as u64],
                    );
                    forward_backward(&samples[train_idx[pos]], &params, config, plan, &mut rng)
                })
                .collect();
            let results = results?;

            let mut grads = NcaParams::zeros(config);
            for r in &results {
                if !r.loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: batch_no, value: r.loss });
                }
                loss_sum += r.loss;
                correct += r.correct as usize;
                for (acc, g) in grads.blocks_mut().into_iter().zip(r.grads.blocks()) {
                    for (a, &b) in acc.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
            }
            seen += results.len();
            let scale = 1.0 / results.len() as f32;
            for block in grads.blocks_mut() {
                for g in block.iter_mut() {
                    *g *= scale;
                }
            }
            adam_step(&mut params, &grads, &mut opt);
        }

        let (val_loss, val_acc) = if val_idx.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let results: Result<Vec<(f64, bool)>> = val_idx
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut rng = stream(seed, &[4, epoch as u64, k as u64]);
                    eval_sample(&samples[i], &params, config, plan.loss, &mut rng)
                })
                .collect();
            let results = results?;
            let loss = results.iter().map(|(l, _)| l).sum::<f64>() / results.len() as f64;
            let acc =
                results.iter().filter(|(_, c)| *c).count() as f64 / results.len() as f64;
            (loss, acc)
        };

        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss,
            train_acc: correct as f64 / seen as f64,
            val_acc,
            lr: lr_this_epoch,
        });
    }
    Ok((params, metrics))
}
