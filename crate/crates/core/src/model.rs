//! The NCA classifier: seed construction, the local transition rule
//! (perception + per-cell update MLP), the stochastic k-step rollout,
//! channel-max feature aggregation, and the two-layer classifier head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::ops;
use crate::tape::{NodeId, Tape};
use crate::Real;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NcaConfig {
    /// Total channels n; the first 3 hold RGB, the rest are hidden memory.
    pub channels: usize,
    /// Rollout length k.
    pub steps: usize,
    /// Hidden width of the per-cell update MLP.
    pub update_hidden: usize,
    /// Hidden width of the classifier head.
    pub classifier_hidden: usize,
    pub num_classes: usize,
    /// Probability that a cell applies its update in a step.
    pub fire_rate: f64,
}

impl NcaConfig {
    /// The standard configuration: n=128 channels, k=64 steps, hidden 128,
    /// 13 classes, fire rate 0.5.
    pub fn standard() -> Self {
        NcaConfig {
            channels: 128,
            steps: 64,
            update_hidden: 128,
            classifier_hidden: 128,
            num_classes: 13,
            fire_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 3 {
            return Err(Error::InvalidConfig(format!(
                "channels must be >= 3 (got {})",
                self.channels
            )));
        }
        if self.update_hidden == 0 || self.classifier_hidden == 0 || self.num_classes == 0 {
            return Err(Error::InvalidConfig("hidden sizes and class count must be positive".into()));
        }
        if !(self.fire_rate > 0.0 && self.fire_rate <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "fire_rate must be in (0, 1] (got {})",
                self.fire_rate
            )));
        }
        Ok(())
    }
}

/// Closed-form trainable-scalar count: two n-channel 3x3 kernels, the
/// update MLP, and the classifier head. The standard configuration gives
/// 86,285.
pub fn count_params(config: &NcaConfig) -> usize {
    let n = config.channels;
    let hu = config.update_hidden;
    let hc = config.classifier_hidden;
    let c = config.num_classes;
    18 * n + (3 * n * hu + hu) + (hu * n + n) + (n * hc + hc) + (hc * c + c)
}

/// All trainable parameters. Weight matrices are row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct NcaParams<F> {
    /// Depthwise kernels, `n * 9` scalars each.
    pub k1: Vec<F>,
    pub k2: Vec<F>,
    /// Update MLP: `update_hidden x 3n` and `n x update_hidden`.
    pub w1: Vec<F>,
    pub b1: Vec<F>,
    pub w2: Vec<F>,
    pub b2: Vec<F>,
    /// Classifier head: `classifier_hidden x n` and `num_classes x classifier_hidden`.
    pub w3: Vec<F>,
    pub b3: Vec<F>,
    pub w4: Vec<F>,
    pub b4: Vec<F>,
}

/// Fixed serialization and traversal order of the parameter arrays.
pub const PARAM_NAMES: [&str; 10] =
    ["k1", "k2", "W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4"];

impl<F: Real> NcaParams<F> {
    pub fn zeros(config: &NcaConfig) -> Self {
        let n = config.channels;
        let hu = config.update_hidden;
        let hc = config.classifier_hidden;
        let c = config.num_classes;
        NcaParams {
            k1: vec![F::zero(); n * 9],
            k2: vec![F::zero(); n * 9],
            w1: vec![F::zero(); hu * 3 * n],
            b1: vec![F::zero(); hu],
            w2: vec![F::zero(); n * hu],
            b2: vec![F::zero(); n],
            w3: vec![F::zero(); hc * n],
            b3: vec![F::zero(); hc],
            w4: vec![F::zero(); c * hc],
            b4: vec![F::zero(); c],
        }
    }

    /// Random initialization: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
    /// k1, k2, W1, W3, W4; zero biases; W2 and b2 zero so the initial
    /// update is the identity.
    pub fn init(config: &NcaConfig, rng: &mut ChaCha8Rng) -> Self {
        let n = config.channels;
        let hu = config.update_hidden;
        let hc = config.classifier_hidden;
        let c = config.num_classes;
        let mut uniform = |len: usize, fan_in: usize| -> Vec<F> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| F::from_f64_c(rng.gen_range(-bound..bound))).collect()
        };
        NcaParams {
            k1: uniform(n * 9, 9),
            k2: uniform(n * 9, 9),
            w1: uniform(hu * 3 * n, 3 * n),
            b1: vec![F::zero(); hu],
            w2: vec![F::zero(); n * hu],
            b2: vec![F::zero(); n],
            w3: uniform(hc * n, n),
            b3: vec![F::zero(); hc],
            w4: uniform(c * hc, hc),
            b4: vec![F::zero(); c],
        }
    }

    pub fn blocks(&self) -> [&Vec<F>; 10] {
        [
            &self.k1, &self.k2, &self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3,
            &self.w4, &self.b4,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<F>; 10] {
        [
            &mut self.k1,
            &mut self.k2,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.w4,
            &mut self.b4,
        ]
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn map_precision<G: Real>(&self) -> NcaParams<G> {
        let conv = |v: &Vec<F>| v.iter().map(|x| G::from_f64_c(x.to_f64().unwrap())).collect();
        NcaParams {
            k1: conv(&self.k1),
            k2: conv(&self.k2),
            w1: conv(&self.w1),
            b1: conv(&self.b1),
            w2: conv(&self.w2),
            b2: conv(&self.b2),
            w3: conv(&self.w3),
            b3: conv(&self.b3),
            w4: conv(&self.w4),
            b4: conv(&self.b4),
        }
    }
}

/// One stochastic update gate per spatial cell, shared by all channels of
/// that cell, recorded for backward passes and deterministic replay.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl StepMask {
    /// Independent Bernoulli(fire_rate) draw per cell.
    pub fn sample(height: usize, width: usize, fire_rate: f64, rng: &mut ChaCha8Rng) -> Self {
        let bits = (0..height * width).map(|_| rng.gen_bool(fire_rate) as u8).collect();
        StepMask { height, width, bits }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        StepMask { height, width, bits: vec![1; height * width] }
    }
}

/// Seed grid: RGB image in channels 0..3, zeros in the remaining n-3
/// hidden channels.
pub fn make_seed<F: Real>(image: &Grid<F>, channels: usize) -> Result<Grid<F>> {
    if channels < 3 {
        return Err(Error::InvalidConfig(format!("seed needs >= 3 channels (got {channels})")));
    }
    if image.channels() != 3 {
        return Err(Error::ShapeMismatch {
            op: "make_seed",
            detail: format!("expected an RGB image, got {} channels", image.channels()),
        });
    }
    let mut seed = Grid::zeros(image.height(), image.width(), channels);
    for i in 0..image.height() {
        for j in 0..image.width() {
            seed.cell_mut(i, j)[..3].copy_from_slice(image.cell(i, j));
        }
    }
    Ok(seed)
}

/// Perception vector per cell: the cell's own state concatenated with its
/// two depthwise convolution responses, in exactly that order.
pub fn perceive<F: Real>(state: &Grid<F>, params: &NcaParams<F>) -> Result<Grid<F>> {
    let c1 = ops::depthwise_conv3x3(state, &params.k1)?;
    let c2 = ops::depthwise_conv3x3(state, &params.k2)?;
    ops::concat_channels(&[state, &c1, &c2])
}

/// One transition: `state + mask * f_u(f_p(state))` with
/// `f_u(p) = W2 relu(W1 p + b1) + b2`.
pub fn nca_step<F: Real>(
    state: &Grid<F>,
    params: &NcaParams<F>,
    mask: &StepMask,
) -> Result<Grid<F>> {
    let p = perceive(state, params)?;
    let hidden = ops::cell_linear(&p, &params.w1, &params.b1, params.b1.len())?;
    let hidden = Grid::from_vec(
        hidden.height(),
        hidden.width(),
        hidden.channels(),
        ops::relu(hidden.as_slice()),
    );
    let update = ops::cell_linear(&hidden, &params.w2, &params.b2, params.b2.len())?;
    Ok(ops::masked_residual(state, &update, &mask.bits))
}

/// Mask source for a rollout: fresh Bernoulli draws or recorded masks for
/// bit-exact replay.
pub enum MaskSource<'a> {
    Sample(&'a mut ChaCha8Rng),
    Recorded(&'a [StepMask]),
}

#[derive(Debug, Clone)]
pub struct Rollout<F> {
    pub final_state: Grid<F>,
    /// Channel-wise maxima of the final state.
    pub features: Vec<F>,
    /// Winning cell per channel, for gradient routing and relevance maps.
    pub argmax_pos: Vec<(usize, usize)>,
    pub masks: Vec<StepMask>,
}

/// Seed, k update steps, channel-max aggregation.
pub fn rollout<F: Real>(
    image: &Grid<F>,
    params: &NcaParams<F>,
    config: &NcaConfig,
    masks: MaskSource<'_>,
) -> Result<Rollout<F>> {
    config.validate()?;
    let mut state = make_seed(image, config.channels)?;
    let (h, w) = (state.height(), state.width());
    let masks: Vec<StepMask> = match masks {
        MaskSource::Sample(rng) => {
            (0..config.steps).map(|_| StepMask::sample(h, w, config.fire_rate, rng)).collect()
        }
        MaskSource::Recorded(m) => m.to_vec(),
    };
    for mask in &masks {
        state = nca_step(&state, params, mask)?;
    }
    let (features, argmax_pos) = ops::channel_max(&state);
    Ok(Rollout { final_state: state, features, argmax_pos, masks })
}

/// Classifier forward record: kept around for explanations.
#[derive(Debug, Clone)]
pub struct ClassifierTrace<F> {
    pub features: Vec<F>,
    /// Post-ReLU hidden activations.
    pub hidden: Vec<F>,
    pub logits: Vec<F>,
    /// Elementwise sigmoid of the logits, the model's per-class outputs.
    pub probs: Vec<F>,
    /// Argmax class, lowest index on ties.
    pub predicted: usize,
}

/// Two-layer head: `logits = W4 relu(W3 v + b3) + b4`, outputs squashed by
/// elementwise sigmoid. Argmax over probs equals argmax over logits.
pub fn classify<F: Real>(features: &[F], params: &NcaParams<F>) -> Result<ClassifierTrace<F>> {
    let hidden = ops::relu(&ops::vec_linear(features, &params.w3, &params.b3)?);
    let logits = ops::vec_linear(&hidden, &params.w4, &params.b4)?;
    let probs: Vec<F> = logits.iter().map(|&z| ops::sigmoid(z)).collect();
    let predicted = argmax(&logits);
    Ok(ClassifierTrace { features: features.to_vec(), hidden, logits, probs, predicted })
}

/// First maximal index.
pub fn argmax<F: Real>(v: &[F]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Tape leaves for every parameter array, in [`PARAM_NAMES`] order.
pub struct ParamLeaves {
    pub ids: [NodeId; 10],
}

/// Records the full forward pass (seed -> k steps -> channel max ->
/// classifier logits) on a tape for end-to-end backpropagation.
pub fn record_forward<F: Real>(
    tape: &mut Tape<F>,
    image: &Grid<F>,
    params: &NcaParams<F>,
    config: &NcaConfig,
    masks: &[StepMask],
) -> Result<(NodeId, ParamLeaves)> {
    let seed = make_seed(image, config.channels)?;
    let blocks = params.blocks();
    let ids: Vec<NodeId> = blocks.iter().map(|b| tape.leaf_vec((*b).clone())).collect();
    let [k1, k2, w1, b1, w2, b2, w3, b3, w4, b4]: [NodeId; 10] = ids.try_into().unwrap();

    let mut state = tape.leaf_grid(seed);
    for mask in masks {
        let c1 = tape.depthwise_conv(state, k1)?;
        let c2 = tape.depthwise_conv(state, k2)?;
        let p = tape.concat_channels(&[state, c1, c2])?;
        let h = tape.cell_linear(p, w1, b1)?;
        let h = tape.relu_grid(h);
        let upd = tape.cell_linear(h, w2, b2)?;
        state = tape.masked_residual(state, upd, mask.bits.clone());
    }
    let features = tape.channel_max(state);
    let hidden = tape.vec_linear(features, w3, b3)?;
    let hidden = tape.relu_vec(hidden);
    let logits = tape.vec_linear(hidden, w4, b4)?;
    Ok((logits, ParamLeaves { ids: [k1, k2, w1, b1, w2, b2, w3, b3, w4, b4] }))
}

/// Collects parameter gradients from a tape after backward into a
/// params-shaped struct. Unreached leaves yield zeros.
pub fn collect_grads<F: Real>(
    tape: &Tape<F>,
    leaves: &ParamLeaves,
    config: &NcaConfig,
) -> NcaParams<F> {
    let mut grads = NcaParams::zeros(config);
    for (slot, &id) in grads.blocks_mut().into_iter().zip(&leaves.ids) {
        if let Some(g) = tape.grad(id) {
            slot.copy_from_slice(g.as_vector());
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rand_image(h: usize, w: usize, seed: u64) -> Grid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid::from_vec(h, w, 3, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    fn small_config(n: usize) -> NcaConfig {
        NcaConfig {
            channels: n,
            steps: 3,
            update_hidden: 5,
            classifier_hidden: 4,
            num_classes: 3,
            fire_rate: 0.5,
        }
    }

    fn rand_params(config: &NcaConfig, seed: u64) -> NcaParams<f64> {
        // Fully random (including W2/b2) so updates are non-trivial in tests.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NcaParams::init(config, &mut rng);
        for v in p.w2.iter_mut().chain(p.b2.iter_mut()) {
            *v = rng.gen_range(-0.5..0.5);
        }
        p
    }

    #[test]
    fn seed_copies_rgb_and_zeroes_hidden_channels() {
        let img = rand_image(12, 12, 1);
        let seed = make_seed(&img, 8).unwrap();
        assert_eq!(seed.get(5, 9, 0), img.get(5, 9, 0));
        let hidden_sum: f64 = (3..8).map(|c| seed.channel_plane(c).iter().sum::<f64>()).sum();
        assert_eq!(hidden_sum, 0.0);

        // n = 3 degenerates to the image itself
        let seed3 = make_seed(&img, 3).unwrap();
        assert_eq!(seed3.as_slice(), img.as_slice());

        assert!(make_seed(&img, 2).is_err());
    }

    #[test]
    fn perceive_zero_state_and_zero_kernels() {
        let config = small_config(4);
        let params = rand_params(&config, 2);
        let zero: Grid<f64> = Grid::zeros(5, 5, 4);
        let p = perceive(&zero, &params).unwrap();
        assert!(p.as_slice().iter().all(|&v| v == 0.0));

        let mut zk = params.clone();
        zk.k1.iter_mut().for_each(|v| *v = 0.0);
        zk.k2.iter_mut().for_each(|v| *v = 0.0);
        let state = rand_image(5, 5, 3);
        let mut state4 = Grid::zeros(5, 5, 4);
        for i in 0..5 {
            for j in 0..5 {
                state4.cell_mut(i, j)[..3].copy_from_slice(state.cell(i, j));
            }
        }
        let p = perceive(&state4, &zk).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let cell = p.cell(i, j);
                assert_eq!(&cell[..4], state4.cell(i, j));
                assert!(cell[4..].iter().all(|&v| v == 0.0));
            }
        }
    }

    // Independent per-cell oracle: gathers each 3x3 neighborhood explicitly
    // and builds the perception vector from scratch.
    fn perceive_oracle(state: &Grid<f64>, params: &NcaParams<f64>) -> Grid<f64> {
        let n = state.channels();
        let (h, w) = (state.height(), state.width());
        let mut out = Grid::zeros(h, w, 3 * n);
        for i in 0..h {
            for j in 0..w {
                for c in 0..n {
                    out.set(i, j, c, state.get(i, j, c));
                    for (slot, k) in [(n, &params.k1), (2 * n, &params.k2)] {
                        let mut acc = 0.0;
                        for di in -1isize..=1 {
                            for dj in -1isize..=1 {
                                let (si, sj) = (i as isize + di, j as isize + dj);
                                if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                                    acc += state.get(si as usize, sj as usize, c)
                                        * k[c * 9 + ((di + 1) * 3 + (dj + 1)) as usize];
                                }
                            }
                        }
                        out.set(i, j, slot + c, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn perceive_matches_per_cell_gather_oracle() {
        let config = small_config(3);
        let params = rand_params(&config, 4);
        let state = rand_image(5, 5, 5);
        let got = perceive(&state, &params).unwrap();
        let want = perceive_oracle(&state, &params);
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // Literal per-cell application of the update equations.
    fn step_oracle(state: &Grid<f64>, params: &NcaParams<f64>, mask: &StepMask) -> Grid<f64> {
        let p = perceive_oracle(state, params);
        let n = state.channels();
        let hu = params.b1.len();
        let mut out = state.clone();
        for i in 0..state.height() {
            for j in 0..state.width() {
                if mask.bits[i * state.width() + j] == 0 {
                    continue;
                }
                let pv = p.cell(i, j);
                let mut hidden = vec![0.0; hu];
                for k in 0..hu {
                    let mut acc = params.b1[k];
                    for m in 0..3 * n {
                        acc += params.w1[k * 3 * n + m] * pv[m];
                    }
                    hidden[k] = acc.max(0.0);
                }
                for c in 0..n {
                    let mut acc = params.b2[c];
                    for k in 0..hu {
                        acc += params.w2[c * hu + k] * hidden[k];
                    }
                    out.set(i, j, c, state.get(i, j, c) + acc);
                }
            }
        }
        out
    }

    #[test]
    fn nca_step_matches_per_cell_oracle() {
        let config = small_config(4);
        let params = rand_params(&config, 6);
        let img = rand_image(4, 4, 7);
        let state = make_seed(&img, 4).unwrap();
        let mask = StepMask::ones(4, 4);
        let got = nca_step(&state, &params, &mask).unwrap();
        let want = step_oracle(&state, &params, &mask);
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_update_head_leaves_state_unchanged() {
        let config = small_config(4);
        let mut params = rand_params(&config, 8);
        params.w2.iter_mut().for_each(|v| *v = 0.0);
        params.b2.iter_mut().for_each(|v| *v = 0.0);
        let state = make_seed(&rand_image(5, 5, 9), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mask = StepMask::sample(5, 5, 0.5, &mut rng);
        let out = nca_step(&state, &params, &mask).unwrap();
        assert_eq!(out.as_slice(), state.as_slice());
    }

    #[test]
    fn all_zero_mask_leaves_state_unchanged() {
        let config = small_config(4);
        let params = rand_params(&config, 11);
        let state = make_seed(&rand_image(5, 5, 12), 4).unwrap();
        let mask = StepMask { height: 5, width: 5, bits: vec![0; 25] };
        let out = nca_step(&state, &params, &mask).unwrap();
        assert_eq!(out.as_slice(), state.as_slice());
    }

    #[test]
    fn masked_cells_are_bit_identical_across_a_step() {
        let config = small_config(6);
        let params = rand_params(&config, 13);
        let state = make_seed(&rand_image(6, 6, 14), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mask = StepMask::sample(6, 6, 0.5, &mut rng);
        let out = nca_step(&state, &params, &mask).unwrap();
        for idx in 0..36 {
            if mask.bits[idx] == 0 {
                let (i, j) = (idx / 6, idx % 6);
                assert_eq!(out.cell(i, j), state.cell(i, j));
            }
        }
    }

    #[test]
    fn rollout_with_zero_steps_pools_the_seed() {
        let mut config = small_config(8);
        config.steps = 0;
        let params = rand_params(&config, 16);
        let img = rand_image(6, 6, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let r = rollout(&img, &params, &config, MaskSource::Sample(&mut rng)).unwrap();
        let (want, _) = ops::channel_max(&make_seed(&img, 8).unwrap());
        assert_eq!(r.features, want);
        assert!(r.features[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rollout_is_deterministic_for_a_fixed_seed() {
        let config = small_config(8);
        let params = rand_params(&config, 19);
        let img = rand_image(6, 6, 20);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            rollout(&img, &params, &config, MaskSource::Sample(&mut rng)).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.features, b.features);
        assert_eq!(a.final_state.as_slice(), b.final_state.as_slice());
    }

    #[test]
    fn rollout_equals_manual_step_composition() {
        let mut config = small_config(8);
        config.steps = 4;
        let params = rand_params(&config, 22);
        let img = rand_image(6, 6, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let r = rollout(&img, &params, &config, MaskSource::Sample(&mut rng)).unwrap();
        assert_eq!(r.masks.len(), 4);

        let mut state = make_seed(&img, 8).unwrap();
        for mask in &r.masks {
            state = nca_step(&state, &params, mask).unwrap();
        }
        assert_eq!(state.as_slice(), r.final_state.as_slice());
        let (v, _) = ops::channel_max(&state);
        assert_eq!(v, r.features);
    }

    #[test]
    fn rollout_replay_reproduces_the_forward_bit_exactly() {
        let config = small_config(6);
        let params = rand_params(&config, 25);
        let img = rand_image(6, 6, 26);
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let first = rollout(&img, &params, &config, MaskSource::Sample(&mut rng)).unwrap();
        let replay =
            rollout(&img, &params, &config, MaskSource::Recorded(&first.masks)).unwrap();
        assert_eq!(first.final_state.as_slice(), replay.final_state.as_slice());
        assert_eq!(first.features, replay.features);
    }

    #[test]
    fn classify_zero_final_layer_gives_half_probs() {
        let config = small_config(6);
        let mut params = rand_params(&config, 28);
        params.w4.iter_mut().for_each(|v| *v = 0.0);
        params.b4.iter_mut().for_each(|v| *v = 0.0);
        let t = classify(&vec![0.3; 6], &params).unwrap();
        assert!(t.probs.iter().all(|&p| p == 0.5));
        assert_eq!(t.predicted, 0);
    }

    #[test]
    fn sigmoid_values_are_analytic() {
        let config = small_config(6);
        let mut params = NcaParams::<f64>::zeros(&config);
        params.b4 = vec![2.0, -1.0, 0.0];
        let t = classify(&vec![0.0; 6], &params).unwrap();
        assert_eq!(t.predicted, 0);
        assert!((t.probs[0] - 0.8807970779778823).abs() < 1e-12);
    }

    #[test]
    fn argmax_over_probs_equals_argmax_over_logits() {
        let config = small_config(6);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..1000 {
            let params = rand_params(&config, rng.gen());
            let features: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let t = classify(&features, &params).unwrap();
            assert_eq!(argmax(&t.probs), argmax(&t.logits));
            assert_eq!(t.predicted, argmax(&t.logits));
        }
    }

    #[test]
    fn count_params_standard_config_is_86285() {
        assert_eq!(count_params(&NcaConfig::standard()), 86_285);
    }

    #[test]
    fn count_params_tiny_config_by_hand() {
        let c = NcaConfig {
            channels: 3,
            steps: 1,
            update_hidden: 1,
            classifier_hidden: 1,
            num_classes: 1,
            fire_rate: 0.5,
        };
        // 54 kernel + (9+1) update-in + (3+3) update-out + (3+1) head-in + (1+1) head-out
        assert_eq!(count_params(&c), 76);
    }

    #[test]
    fn count_params_is_linear_in_class_count() {
        let mut c = NcaConfig::standard();
        let base = count_params(&c);
        c.num_classes *= 2;
        assert_eq!(count_params(&c), base + 13 * (c.classifier_hidden + 1));
    }

    #[test]
    fn count_params_matches_stored_scalars_for_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..20 {
            let config = NcaConfig {
                channels: rng.gen_range(3..20),
                steps: rng.gen_range(1..5),
                update_hidden: rng.gen_range(1..20),
                classifier_hidden: rng.gen_range(1..20),
                num_classes: rng.gen_range(1..14),
                fire_rate: 0.5,
            };
            let params = NcaParams::<f32>::zeros(&config);
            assert_eq!(count_params(&config), params.num_scalars());
        }
    }

    #[test]
    fn empirical_fire_rate_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mask = StepMask::sample(100, 100, 0.5, &mut rng);
        let mean = mask.bits.iter().map(|&b| b as f64).sum::<f64>() / 1e4;
        assert!((0.48..=0.52).contains(&mean), "mean {mean}");
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let config = small_config(6);
        let params = rand_params(&config, 32);
        let img = rand_image(6, 6, 33);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let plain = rollout(&img, &params, &config, MaskSource::Sample(&mut rng)).unwrap();
        let trace = classify(&plain.features, &params).unwrap();

        let mut tape = Tape::new();
        let (logits, _) = record_forward(&mut tape, &img, &params, &config, &plain.masks).unwrap();
        assert_eq!(tape.value(logits).as_vector(), trace.logits.as_slice());
    }
}
