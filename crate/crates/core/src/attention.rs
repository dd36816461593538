//! The attention field: a cross-attention decoder from query points to the
//! points of a featured cloud.
//!
//! For a query `q` the key tokens are `[x̃ᵢ, fᵢ]` and the query token is
//! `[q̃, f(q)]`, where `f(q)` is the inverse-distance feature at `q` and
//! `x̃`, `q̃` are coordinates normalized to the cloud's centroid and RMS
//! radius. Each head scores
//!
//! ```text
//! logitᵢ = (W_Q·query)·(W_K·keyᵢ) / √d + log wᵢ(q)
//! ```
//!
//! with `wᵢ(q)` the inverse-distance weights, so a decoder whose query
//! projection is zero attends exactly like the inverse-distance field. The
//! head outputs `Σᵢ aᵢ W_V fᵢ` are concatenated and mapped back to `C`
//! channels by `W_O`. Additional layers repeat the block with the previous
//! layer's output in place of `f(q)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Tape, Tensor, Var};
use crate::scene::{idw_field, FeaturedCloud, QueryPoint};
use crate::{Error, Result};

/// Queries evaluated per tape in batched helpers; bounds the `Q×N` buffers.
const QUERY_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderShape {
    pub feature_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
}

impl DecoderShape {
    /// One layer, four heads of width 16.
    pub fn new(feature_dim: usize) -> Self {
        Self { feature_dim, heads: 4, head_dim: 16, layers: 1 }
    }

    fn token_dim(&self) -> usize {
        3 + self.feature_dim
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.heads == 0 || self.head_dim == 0 || self.layers == 0 {
            return Err(Error::Config(format!("decoder dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Projections of one attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `(3+C)×d`
    pub key: Tensor,
    /// `(3+C)×d`
    pub query: Tensor,
    /// `C×d`
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// `(H·d)×C`
    pub output: Tensor,
}

/// All learnable parameters of the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    shape: DecoderShape,
    layers: Vec<LayerParams>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Zero query projections (all learned logits vanish) and a value path
    /// that passes features through unchanged. Key projections are drawn
    /// at random so the query projections receive gradient.
    ZeroLogit,
    /// Every matrix Gaussian with variance `1 / fan_in`.
    Random,
}

pub fn init_params(shape: DecoderShape, seed: u64, mode: InitMode) -> Result<DecoderParams> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussian = |rows: usize, cols: usize| {
        let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("finite std");
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect()).expect("sized")
    };
    let DecoderShape { feature_dim: c, heads: h, head_dim: d, .. } = shape;
    let layers = (0..shape.layers)
        .map(|_| match mode {
            InitMode::Random => LayerParams {
                heads: (0..h)
                    .map(|_| HeadParams {
                        key: gaussian(shape.token_dim(), d),
                        query: gaussian(shape.token_dim(), d),
                        value: gaussian(c, d),
                    })
                    .collect(),
                output: gaussian(h * d, c),
            },
            InitMode::ZeroLogit => {
                let mut layer = identity_value_path(shape);
                for head in &mut layer.heads {
                    head.key = gaussian(shape.token_dim(), d);
                }
                layer
            }
        })
        .collect();
    Ok(DecoderParams { shape, layers })
}

/// Value/output projections that reproduce the attended features.
///
/// With `d ≥ C` every head carries all channels and `W_O` averages the
/// heads. Otherwise channel `c` rides in head `c / d`, slot `c % d`; when
/// `H·d < C` the trailing channels cannot pass and are dropped.
fn identity_value_path(shape: DecoderShape) -> LayerParams {
    let DecoderShape { feature_dim: c, heads: h, head_dim: d, .. } = shape;
    let mut heads: Vec<HeadParams> = (0..h)
        .map(|_| HeadParams {
            key: Tensor::zeros(shape.token_dim(), d),
            query: Tensor::zeros(shape.token_dim(), d),
            value: Tensor::zeros(c, d),
        })
        .collect();
    let mut output = Tensor::zeros(h * d, c);
    if d >= c {
        for (hi, head) in heads.iter_mut().enumerate() {
            for ch in 0..c {
                head.value.set(ch, ch, 1.0);
                output.set(hi * d + ch, ch, 1.0 / h as f64);
            }
        }
    } else {
        for ch in 0..c.min(h * d) {
            let (hi, slot) = (ch / d, ch % d);
            heads[hi].value.set(ch, slot, 1.0);
            output.set(hi * d + slot, ch, 1.0);
        }
    }
    LayerParams { heads, output }
}

impl DecoderParams {
    pub fn shape(&self) -> DecoderShape {
        self.shape
    }

    pub fn feature_dim(&self) -> usize {
        self.shape.feature_dim
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    /// Every matrix in canonical order: per layer, per head `key, query,
    /// value`, then the layer's output projection.
    pub fn matrices(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for head in &layer.heads {
                out.extend([&head.key, &head.query, &head.value]);
            }
            out.push(&layer.output);
        }
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.extend([&mut head.key, &mut head.query, &mut head.value]);
            }
            out.push(&mut layer.output);
        }
        out
    }

    /// Expected `[rows, cols]` of each entry of [`Self::matrices`].
    pub fn matrix_shapes(shape: DecoderShape) -> Vec<[usize; 2]> {
        let DecoderShape { feature_dim: c, heads: h, head_dim: d, layers } = shape;
        let t = shape.token_dim();
        let mut out = Vec::new();
        for _ in 0..layers {
            for _ in 0..h {
                out.extend([[t, d], [t, d], [c, d]]);
            }
            out.push([h * d, c]);
        }
        out
    }

    /// Rebuilds parameters from matrices in canonical order.
    pub fn from_matrices(shape: DecoderShape, matrices: Vec<Tensor>) -> Result<Self> {
        shape.validate()?;
        let want = Self::matrix_shapes(shape);
        if matrices.len() != want.len() {
            return Err(Error::Format(format!("{} matrices for a decoder needing {}", matrices.len(), want.len())));
        }
        if let Some((i, (m, w))) = matrices.iter().zip(&want).enumerate().find(|(_, (m, w))| m.shape() != **w) {
            return Err(Error::Format(format!("matrix {i} is {:?}, expected {w:?}", m.shape())));
        }
        if matrices.iter().any(|m| !m.is_finite()) {
            return Err(Error::Format("non-finite decoder parameter".into()));
        }
        let mut it = matrices.into_iter();
        let layers = (0..shape.layers)
            .map(|_| {
                let heads = (0..shape.heads)
                    .map(|_| HeadParams {
                        key: it.next().expect("counted"),
                        query: it.next().expect("counted"),
                        value: it.next().expect("counted"),
                    })
                    .collect();
                LayerParams { heads, output: it.next().expect("counted") }
            })
            .collect();
        Ok(Self { shape, layers })
    }

    /// Pushes every matrix onto `tape` as a differentiable leaf.
    pub fn leaves(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(self.matrices().into_iter().map(|m| tape.leaf(m.clone())).collect())
    }

    fn check_cloud(&self, cloud: &FeaturedCloud) -> Result<()> {
        if cloud.feature_dim() != self.shape.feature_dim {
            return Err(Error::FeatureDim { expected: self.shape.feature_dim, got: cloud.feature_dim() });
        }
        Ok(())
    }
}

/// Tape handles of the decoder matrices, in [`DecoderParams::matrices`] order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

/// Centroid and RMS radius used to normalize coordinates before projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormFrame {
    pub center: [f64; 3],
    pub scale: f64,
}

impl NormFrame {
    pub fn of(cloud: &FeaturedCloud) -> Self {
        let center = cloud.centroid();
        let ms: f64 = (0..cloud.len())
            .map(|i| {
                let p = cloud.point(i);
                (0..3).map(|k| (p[k] - center[k]).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / cloud.len() as f64;
        Self { center, scale: ms.sqrt().max(1e-6) }
    }

    fn apply(&self, tape: &mut Tape, pts: Var) -> Result<Var> {
        let neg_center = tape.leaf(Tensor::row(&self.center.map(|v| -v)));
        let shifted = tape.add_row(pts, neg_center)?;
        Ok(tape.scale(shifted, 1.0 / self.scale))
    }

    fn apply_plain(&self, pts: &Tensor) -> Tensor {
        let mut out = pts.clone();
        for i in 0..out.rows() {
            for (k, v) in out.row_slice_mut(i).iter_mut().enumerate() {
                *v = (*v - self.center[k]) / self.scale;
            }
        }
        out
    }
}

fn key_tokens(cloud: &FeaturedCloud, frame: &NormFrame) -> Tensor {
    let xn = frame.apply_plain(cloud.points());
    let c = cloud.feature_dim();
    let mut t = Tensor::zeros(cloud.len(), 3 + c);
    for i in 0..cloud.len() {
        let row = t.row_slice_mut(i);
        row[..3].copy_from_slice(xn.row_slice(i));
        row[3..].copy_from_slice(cloud.feature(i));
    }
    t
}

struct HeadInputs {
    keys: Var,
    values: Var,
    query_w: Var,
}

struct LayerInputs {
    heads: Vec<HeadInputs>,
    output: Var,
}

/// Per-head intermediate results of one decoder evaluation.
#[derive(Clone, Debug)]
pub struct HeadTrace {
    pub logits: Var,
    pub weights: Var,
}

/// Everything the decoder produced on a tape for a batch of queries.
#[derive(Clone, Debug)]
pub struct DecodeVars {
    /// `Q×C` attended features.
    pub features: Var,
    /// `Q×N` log inverse-distance bias, up to a per-row constant.
    pub bias: Var,
    /// Layer-major, head-minor.
    pub heads: Vec<HeadTrace>,
}

fn decode(
    tape: &mut Tape,
    layers: &[LayerInputs],
    norm_queries: Var,
    bias: Var,
    query_feature: Var,
    head_dim: usize,
) -> Result<(Var, Vec<HeadTrace>)> {
    let inv_sqrt_d = 1.0 / (head_dim as f64).sqrt();
    let mut feat = query_feature;
    let mut traces = Vec::new();
    for layer in layers {
        let token = tape.concat_cols(&[norm_queries, feat])?;
        let mut outs = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let qh = tape.matmul(token, head.query_w)?;
            let raw = tape.matmul_t(qh, head.keys)?;
            let logits = tape.scale(raw, inv_sqrt_d);
            let biased = tape.add(logits, bias)?;
            let weights = tape.softmax_rows(biased);
            outs.push(tape.matmul(weights, head.values)?);
            traces.push(HeadTrace { logits, weights });
        }
        let cat = tape.concat_cols(&outs)?;
        feat = tape.matmul(cat, layer.output)?;
    }
    Ok((feat, traces))
}

/// Decoder evaluation with the parameters as tape leaves, so gradients
/// reach both the queries and every matrix.
pub fn decode_trainable(
    tape: &mut Tape,
    params: &DecoderParams,
    vars: &ParamVars,
    cloud: &FeaturedCloud,
    queries: Var,
    epsilon: f64,
) -> Result<DecodeVars> {
    params.check_cloud(cloud)?;
    let frame = NormFrame::of(cloud);
    let points = tape.leaf(cloud.points().clone());
    let features = tape.leaf(cloud.features().clone());
    let tokens = tape.leaf(key_tokens(cloud, &frame));
    let mut it = vars.0.iter().copied();
    let mut layers = Vec::new();
    for _ in 0..params.shape.layers {
        let mut heads = Vec::new();
        for _ in 0..params.shape.heads {
            let (k, q, v) = (it.next(), it.next(), it.next());
            let (Some(k), Some(q), Some(v)) = (k, q, v) else {
                return Err(Error::Config("parameter handles do not match the decoder shape".into()));
            };
            let keys = tape.matmul(tokens, k)?;
            let values = tape.matmul(features, v)?;
            heads.push(HeadInputs { keys, values, query_w: q });
        }
        let output = it.next().ok_or_else(|| Error::Config("parameter handles do not match the decoder shape".into()))?;
        layers.push(LayerInputs { heads, output });
    }
    let (query_feature, bias) = idw_field(tape, points, features, queries, epsilon)?;
    let nq = frame.apply(tape, queries)?;
    let (out, heads) = decode(tape, &layers, nq, bias, query_feature, params.shape.head_dim)?;
    Ok(DecodeVars { features: out, bias, heads })
}

/// A decoder bound to one cloud with every query-independent product
/// (key and value projections) computed once. Used when the parameters
/// are frozen and only the query points move.
#[derive(Clone, Debug)]
pub struct FrozenField {
    shape: DecoderShape,
    frame: NormFrame,
    points: Tensor,
    features: Tensor,
    // per layer: per head (keys N×d, values N×d, W_Q), then W_O
    layers: Vec<(Vec<(Tensor, Tensor, Tensor)>, Tensor)>,
    epsilon: f64,
}

impl FrozenField {
    pub fn new(params: &DecoderParams, cloud: &FeaturedCloud, epsilon: f64) -> Result<Self> {
        params.check_cloud(cloud)?;
        let frame = NormFrame::of(cloud);
        let tokens = key_tokens(cloud, &frame);
        let layers = params
            .layers
            .iter()
            .map(|layer| -> Result<_> {
                let heads = layer
                    .heads
                    .iter()
                    .map(|h| Ok((tokens.matmul(&h.key)?, cloud.features().matmul(&h.value)?, h.query.clone())))
                    .collect::<Result<Vec<_>>>()?;
                Ok((heads, layer.output.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shape: params.shape,
            frame,
            points: cloud.points().clone(),
            features: cloud.features().clone(),
            layers,
            epsilon,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.shape.feature_dim
    }

    /// Attended features of `Q×3` queries, differentiable in the queries.
    pub fn decode(&self, tape: &mut Tape, queries: Var) -> Result<DecodeVars> {
        let points = tape.leaf(self.points.clone());
        let features = tape.leaf(self.features.clone());
        let layers: Vec<LayerInputs> = self
            .layers
            .iter()
            .map(|(heads, out)| LayerInputs {
                heads: heads
                    .iter()
                    .map(|(k, v, q)| HeadInputs { keys: tape.leaf(k.clone()), values: tape.leaf(v.clone()), query_w: tape.leaf(q.clone()) })
                    .collect(),
                output: tape.leaf(out.clone()),
            })
            .collect();
        let (query_feature, bias) = idw_field(tape, points, features, queries, self.epsilon)?;
        let nq = self.frame.apply(tape, queries)?;
        let (out, heads) = decode(tape, &layers, nq, bias, query_feature, self.shape.head_dim)?;
        Ok(DecodeVars { features: out, bias, heads })
    }

    /// Plain evaluation for a batch of `Q×3` queries.
    pub fn features_at(&self, queries: &Tensor) -> Result<Tensor> {
        let mut out = Tensor::zeros(queries.rows(), self.shape.feature_dim);
        for start in (0..queries.rows()).step_by(QUERY_CHUNK) {
            let end = (start + QUERY_CHUNK).min(queries.rows());
            let chunk = Tensor::from_vec(end - start, 3, queries.data()[start * 3..end * 3].to_vec())?;
            let mut tape = Tape::new();
            let q = tape.leaf(chunk);
            let dv = self.decode(&mut tape, q)?;
            let c = self.shape.feature_dim;
            out.data_mut()[start * c..end * c].copy_from_slice(tape.value(dv.features).data());
        }
        Ok(out)
    }
}

/// Attention weights and logits of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    /// Per head (layer-major), a probability distribution over the `N` points.
    pub weights: Vec<Vec<f64>>,
    /// Per head, learned logits before the distance bias is added.
    pub logits: Vec<Vec<f64>>,
    /// `log wᵢ`: log of the normalized inverse-distance weights.
    pub distance_bias: Vec<f64>,
}

/// Attended feature at a single query point, with its attention trace.
pub fn query_feature(
    params: &DecoderParams,
    cloud: &FeaturedCloud,
    q: QueryPoint,
    epsilon: f64,
) -> Result<(Vec<f64>, AttentionTrace)> {
    let field = FrozenField::new(params, cloud, epsilon)?;
    let mut tape = Tape::new();
    let qv = tape.leaf(Tensor::row(&q.0));
    let dv = field.decode(&mut tape, qv)?;
    let bias = tape.value(dv.bias).data();
    let max = bias.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + bias.iter().map(|b| (b - max).exp()).sum::<f64>().ln();
    let trace = AttentionTrace {
        weights: dv.heads.iter().map(|h| tape.value(h.weights).data().to_vec()).collect(),
        logits: dv.heads.iter().map(|h| tape.value(h.logits).data().to_vec()).collect(),
        distance_bias: bias.iter().map(|b| b - lse).collect(),
    };
    Ok((tape.value(dv.features).data().to_vec(), trace))
}

/// Attended features at a batch of `Q×3` query points.
pub fn query_features(params: &DecoderParams, cloud: &FeaturedCloud, queries: &Tensor, epsilon: f64) -> Result<Tensor> {
    FrozenField::new(params, cloud, epsilon)?.features_at(queries)
}

/// Attended feature at every scene point (`N×C`): a virtual query placed
/// on each point of the cloud.
pub fn self_attention_features(params: &DecoderParams, cloud: &FeaturedCloud, epsilon: f64) -> Result<Tensor> {
    query_features(params, cloud, cloud.points(), epsilon)
}

const PARAMS_MAGIC: &[u8; 4] = b"NAFP";
const PARAMS_VERSION: u32 = 1;

impl DecoderParams {
    /// Binary encoding: magic `NAFP`, `u32` version, `u32` C, H, d and
    /// layer count, then every matrix of [`Self::matrices`] as row-major
    /// little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        for v in [self.shape.feature_dim, self.shape.heads, self.shape.head_dim, self.shape.layers] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for m in self.matrices() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..4] != PARAMS_MAGIC {
            return Err(Error::Format("not a decoder parameter file (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = word(0);
        if version != PARAMS_VERSION {
            return Err(Error::Format(format!("unsupported decoder parameter version {version}")));
        }
        let shape = DecoderShape {
            feature_dim: word(1) as usize,
            heads: word(2) as usize,
            head_dim: word(3) as usize,
            layers: word(4) as usize,
        };
        shape.validate().map_err(|e| Error::Format(e.to_string()))?;
        let shapes = Self::matrix_shapes(shape);
        let total: usize = shapes.iter().map(|[r, c]| r * c).sum();
        let body = &bytes[24..];
        if body.len() != total * 8 {
            return Err(Error::Format(format!("decoder body is {} bytes, expected {}", body.len(), total * 8)));
        }
        let mut vals = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
        let matrices = shapes
            .iter()
            .map(|&[r, c]| Tensor::from_vec(r, c, vals.by_ref().take(r * c).collect()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::from_matrices(shape, matrices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{idw_feature, idw_weights, DEFAULT_EPSILON};

    fn sample_cloud(n: usize, c: usize, seed: u64) -> FeaturedCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let pts = Tensor::from_vec(n, 3, (0..n * 3).map(|_| normal.sample(&mut rng)).collect()).unwrap();
        let f = Tensor::from_vec(n, c, (0..n * c).map(|_| normal.sample(&mut rng) * 10.0).collect()).unwrap();
        FeaturedCloud::new(pts, f, None).unwrap()
    }

    #[test]
    fn random_init_is_deterministic_and_shaped() {
        let shape = DecoderShape { feature_dim: 8, heads: 4, head_dim: 16, layers: 1 };
        let a = init_params(shape, 3, InitMode::Random).unwrap();
        assert_eq!(a, init_params(shape, 3, InitMode::Random).unwrap());
        assert_ne!(a, init_params(shape, 4, InitMode::Random).unwrap());
        let head = &a.layers()[0].heads[0];
        assert_eq!(head.key.shape(), [11, 16]);
        assert_eq!(head.query.shape(), [11, 16]);
        assert_eq!(head.value.shape(), [8, 16]);
        assert_eq!(a.layers()[0].heads.len(), 4);
        assert_eq!(a.layers()[0].output.shape(), [64, 8]);
        assert!(init_params(DecoderShape { heads: 0, ..shape }, 0, InitMode::Random).is_err());
    }

    #[test]
    fn zero_logit_reduces_to_idw() {
        let cloud = sample_cloud(12, 3, 1);
        for shape in [
            DecoderShape { feature_dim: 3, heads: 2, head_dim: 4, layers: 1 },
            DecoderShape { feature_dim: 3, heads: 3, head_dim: 1, layers: 2 },
        ] {
            let params = init_params(shape, 9, InitMode::ZeroLogit).unwrap();
            let q = QueryPoint([0.02, -0.05, 0.1]);
            let (f, trace) = query_feature(&params, &cloud, q, DEFAULT_EPSILON).unwrap();
            let w = idw_weights(&cloud, q, DEFAULT_EPSILON);
            for head in &trace.weights {
                for (a, b) in head.iter().zip(&w) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            for (a, b) in f.iter().zip(idw_feature(&cloud, q, DEFAULT_EPSILON)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            for (a, b) in trace.distance_bias.iter().zip(&w) {
                assert!((a.exp() - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_point_attends_fully() {
        let cloud = sample_cloud(1, 2, 2);
        let shape = DecoderShape { feature_dim: 2, heads: 2, head_dim: 3, layers: 1 };
        let params = init_params(shape, 5, InitMode::Random).unwrap();
        let (f, trace) = query_feature(&params, &cloud, QueryPoint([1.0, 2.0, 3.0]), DEFAULT_EPSILON).unwrap();
        assert!(trace.weights.iter().all(|w| w == &vec![1.0]));
        let layer = &params.layers()[0];
        let f0 = Tensor::row(cloud.feature(0));
        let heads: Vec<f64> = layer.heads.iter().flat_map(|h| f0.matmul(&h.value).unwrap().into_vec()).collect();
        let expect = Tensor::row(&heads).matmul(&layer.output).unwrap();
        for (a, b) in f.iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let cloud = sample_cloud(4, 3, 0);
        let params = init_params(DecoderShape::new(2), 0, InitMode::Random).unwrap();
        assert!(matches!(
            query_feature(&params, &cloud, QueryPoint([0.0; 3]), DEFAULT_EPSILON),
            Err(Error::FeatureDim { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn batched_equals_per_point() {
        let cloud = sample_cloud(20, 4, 7);
        let params = init_params(DecoderShape { feature_dim: 4, heads: 2, head_dim: 5, layers: 1 }, 1, InitMode::Random).unwrap();
        let all = self_attention_features(&params, &cloud, DEFAULT_EPSILON).unwrap();
        for i in 0..cloud.len() {
            let (f, _) = query_feature(&params, &cloud, QueryPoint(cloud.point(i)), DEFAULT_EPSILON).unwrap();
            assert_eq!(all.row_slice(i), f.as_slice());
        }
    }

    #[test]
    fn params_round_trip_and_reject_corruption() {
        let params = init_params(DecoderShape { feature_dim: 3, heads: 2, head_dim: 2, layers: 2 }, 11, InitMode::Random).unwrap();
        let bytes = params.to_bytes();
        let back = DecoderParams::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(DecoderParams::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(DecoderParams::from_bytes(&bad).is_err());
        assert!(DecoderParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
