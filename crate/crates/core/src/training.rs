//! Self-supervised decoder training.
//!
//! Keypoints are selected once from the raw features. Each iteration then
//! decodes the keypoint coordinates of every scene through the decoder and
//! scores the result with an InfoNCE loss that rewards row `k` of one scene
//! for being the most similar to row `k` of every other scene.

use std::sync::Arc;

use crate::attention::{decode_trainable, init_params, DecoderParams, DecoderShape, InitMode};
use crate::keypoints::{select_keypoints, KeypointCorrespondence, SelectionConfig};
use crate::numerics::{Tape, Tensor, Var};
use crate::scene::{FeaturedCloud, DEFAULT_EPSILON};
use crate::{Error, Result};

/// Which terms the InfoNCE denominator sums over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DenominatorMode {
    /// Negatives only (`k' ≠ k`). The loss can go below zero.
    #[default]
    Exclusive,
    /// Negatives plus the positive, the usual contrastive form.
    Standard,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Similarity {
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub k_nn: usize,
    pub max_keypoints: usize,
    pub seed: u64,
    pub mode: DenominatorMode,
    pub similarity: Similarity,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub epsilon: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let shape = DecoderShape::new(1);
        Self {
            temperature: 0.1,
            learning_rate: 1e-3,
            iterations: 100,
            k_nn: crate::keypoints::DEFAULT_K_NN,
            max_keypoints: crate::keypoints::DEFAULT_MAX_KEYPOINTS,
            seed: 0,
            mode: DenominatorMode::Exclusive,
            similarity: Similarity::Cosine,
            heads: shape.heads,
            head_dim: shape.head_dim,
            layers: shape.layers,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config("learning rate and epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn decoder_shape(&self, feature_dim: usize) -> DecoderShape {
        DecoderShape { feature_dim, heads: self.heads, head_dim: self.head_dim, layers: self.layers }
    }

    fn selection(&self) -> SelectionConfig {
        SelectionConfig { k_nn: self.k_nn, seed: self.seed, max_keypoints: self.max_keypoints }
    }
}

/// Coordinates of scene `i`'s keypoints as a `K×3` tensor.
fn keypoint_coords(cloud: &FeaturedCloud, idx: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(idx.len(), 3);
    for (k, &i) in idx.iter().enumerate() {
        t.row_slice_mut(k).copy_from_slice(&cloud.point(i));
    }
    t
}

/// Decoded features at every keypoint, one `K×C` tensor per scene.
pub fn keypoint_features(
    params: &DecoderParams,
    clouds: &[FeaturedCloud],
    corr: &KeypointCorrespondence,
    epsilon: f64,
) -> Result<Vec<Tensor>> {
    corr.validate(clouds)?;
    clouds
        .iter()
        .enumerate()
        .map(|(i, cloud)| crate::attention::query_features(params, cloud, &keypoint_coords(cloud, &corr.column(i)), epsilon))
        .collect()
}

fn check_featsets(featsets: &[Tensor]) -> Result<()> {
    let Some(first) = featsets.first() else {
        return Err(Error::Config("InfoNCE needs at least one feature set".into()));
    };
    let [k, c] = first.shape();
    if k < 2 {
        return Err(Error::TooFewKeypoints { need: 2, got: k });
    }
    for (i, f) in featsets.iter().enumerate() {
        if f.shape() != [k, c] {
            return Err(Error::Config(format!("feature set {i} is {:?}, expected {:?}", f.shape(), [k, c])));
        }
        for r in 0..k {
            if f.row_slice(r).iter().all(|&x| x == 0.0) {
                return Err(Error::ZeroNorm { scene: i, row: r });
            }
        }
    }
    Ok(())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot = crate::numerics::dot(a, b);
    dot / (crate::numerics::dot(a, a).sqrt() * crate::numerics::dot(b, b).sqrt())
}

/// InfoNCE over every ordered pair of distinct scenes.
pub fn infonce_loss(featsets: &[Tensor], temperature: f64, mode: DenominatorMode) -> Result<f64> {
    check_featsets(featsets)?;
    let k = featsets[0].rows();
    let mut total = 0.0;
    for (i, a) in featsets.iter().enumerate() {
        for (j, b) in featsets.iter().enumerate() {
            if i == j {
                continue;
            }
            for r in 0..k {
                let sims: Vec<f64> = (0..k).map(|s| cosine(a.row_slice(r), b.row_slice(s)) / temperature).collect();
                let kept = sims.iter().enumerate().filter(|&(s, _)| s != r || mode == DenominatorMode::Standard);
                let max = kept.clone().map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + kept.map(|(_, &v)| (v - max).exp()).sum::<f64>().ln();
                total += lse - sims[r];
            }
        }
    }
    Ok(total)
}

/// Tape version of [`infonce_loss`] over `K×C` feature variables.
pub fn infonce_on_tape(tape: &mut Tape, feats: &[Var], temperature: f64, mode: DenominatorMode) -> Result<Var> {
    let values: Vec<Tensor> = feats.iter().map(|&f| tape.value(f).clone()).collect();
    check_featsets(&values)?;
    let k = values[0].rows();
    let mask: Option<Arc<[bool]>> = match mode {
        DenominatorMode::Exclusive => Some((0..k * k).map(|e| e / k != e % k).collect()),
        DenominatorMode::Standard => None,
    };
    let eye = tape.leaf(Tensor::identity(k));
    let normed: Vec<Var> = feats
        .iter()
        .map(|&f| {
            let n = tape.row_norm(f);
            tape.div_col(f, n)
        })
        .collect::<std::result::Result<_, _>>()?;
    let mut terms = Vec::new();
    for (i, &a) in normed.iter().enumerate() {
        for (j, &b) in normed.iter().enumerate() {
            if i == j {
                continue;
            }
            let sim = tape.matmul_t(a, b)?;
            let sim = tape.scale(sim, 1.0 / temperature);
            let lse = tape.logsumexp_rows(sim, mask.clone())?;
            let diag = tape.mul(sim, eye)?;
            let pos = tape.row_sums(diag);
            let per_row = tape.sub(lse, pos)?;
            terms.push(tape.sum(per_row));
        }
    }
    let stacked = tape.concat_rows(&terms)?;
    Ok(tape.sum(stacked))
}

/// Adam: first and second moment estimates with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[[usize; 2]]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|&[r, c]| Tensor::zeros(r, c)).collect();
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Loss and parameter gradients at `params`.
pub fn loss_and_gradients(
    params: &DecoderParams,
    clouds: &[FeaturedCloud],
    corr: &KeypointCorrespondence,
    config: &TrainingConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let feats = clouds
        .iter()
        .enumerate()
        .map(|(i, cloud)| {
            let q = tape.leaf(keypoint_coords(cloud, &corr.column(i)));
            decode_trainable(&mut tape, params, &vars, cloud, q, config.epsilon).map(|d| d.features)
        })
        .collect::<Result<Vec<_>>>()?;
    let loss = infonce_on_tape(&mut tape, &feats, config.temperature, config.mode)?;
    let grads = tape.gradients(loss, &Tensor::scalar(1.0))?;
    Ok((tape.value(loss).item(), vars.0.iter().map(|&v| grads.get(v)).collect()))
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub params: DecoderParams,
    /// Loss before each parameter update; `iterations` entries.
    pub losses: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
    pub keypoints: KeypointCorrespondence,
}

/// Trains a zero-logit-initialized decoder on `clouds`.
pub fn train(clouds: &[FeaturedCloud], config: &TrainingConfig) -> Result<TrainingOutcome> {
    config.validate()?;
    let keypoints = select_keypoints(clouds, config.selection())?;
    if keypoints.len() < 2 {
        return Err(Error::TooFewKeypoints { need: 2, got: keypoints.len() });
    }
    let shape = config.decoder_shape(clouds[0].feature_dim());
    let params = init_params(shape, config.seed, InitMode::ZeroLogit)?;
    train_from(params, clouds, keypoints, config)
}

/// Runs the optimizer from given parameters and keypoints.
pub fn train_from(
    mut params: DecoderParams,
    clouds: &[FeaturedCloud],
    keypoints: KeypointCorrespondence,
    config: &TrainingConfig,
) -> Result<TrainingOutcome> {
    config.validate()?;
    keypoints.validate(clouds)?;
    let mut adam = Adam::new(config.learning_rate, &DecoderParams::matrix_shapes(params.shape()));
    let mut losses = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let (loss, grads) = loss_and_gradients(&params, clouds, &keypoints, config)?;
        losses.push(loss);
        adam.step(&mut params.matrices_mut(), &grads);
    }
    let final_loss = infonce_loss(&keypoint_features(&params, clouds, &keypoints, config.epsilon)?, config.temperature, config.mode)?;
    Ok(TrainingOutcome { params, losses, final_loss, keypoints })
}

/// Fraction of rows `k` of `a` whose cosine-nearest row of `b` is row `k`.
pub fn retrieval_accuracy(a: &Tensor, b: &Tensor) -> f64 {
    let hits = (0..a.rows())
        .filter(|&r| {
            let best = (0..b.rows())
                .map(|s| (cosine(a.row_slice(r), b.row_slice(s)), s))
                .fold((f64::NEG_INFINITY, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
            best.1 == r
        })
        .count();
    hits as f64 / a.rows().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_pairs_give_minus_four() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let l = infonce_loss(&[f.clone(), f], 1.0, DenominatorMode::Exclusive).unwrap();
        assert!((l + 4.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn constant_similarity_cancels() {
        let f = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0]]).unwrap();
        let l = infonce_loss(&[f.clone(), f], 0.1, DenominatorMode::Exclusive).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn zero_row_rejected() {
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let g = Tensor::identity(2);
        assert!(matches!(infonce_loss(&[g, f], 1.0, DenominatorMode::Standard), Err(Error::ZeroNorm { scene: 1, row: 1 })));
    }

    #[test]
    fn tape_loss_matches_plain() {
        let a = Tensor::from_rows(&[[0.3, -1.0, 0.2], [1.1, 0.4, -0.7], [0.2, 0.9, 0.5]]).unwrap();
        let b = Tensor::from_rows(&[[0.1, -0.8, 0.4], [0.9, 0.2, -0.3], [-0.4, 1.2, 0.3]]).unwrap();
        for mode in [DenominatorMode::Exclusive, DenominatorMode::Standard] {
            let mut tape = Tape::new();
            let vars = [tape.leaf(a.clone()), tape.leaf(b.clone())];
            let l = infonce_on_tape(&mut tape, &vars, 0.5, mode).unwrap();
            let plain = infonce_loss(&[a.clone(), b.clone()], 0.5, mode).unwrap();
            assert!((tape.value(l).item() - plain).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Tensor::row(&[1.0, -2.0]);
        let mut adam = Adam::new(0.1, &[[1, 2]]);
        adam.step(&mut [&mut p], &[Tensor::row(&[3.0, -0.5])]);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-7);
        assert!((p.get(0, 1) + 1.9).abs() < 1e-7);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig::default().validate().is_ok());
    }
}
