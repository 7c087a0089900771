//! The stacked encoder-decoder reconstruction network.
//!
//! One stage maps an occupancy volume to a refined occupancy volume
//! through four stride-2 convolutions (kernels 4, 2, 2, 2), four stride-2
//! transposed convolutions (kernels 2, 2, 2, 4) and a 1x1x1 sigmoid head.
//! Every hidden layer is followed by a leaky rectifier. The first stage
//! consumes the silhouette replicated along the depth axis; each further
//! stage consumes its predecessor's output, so all stages share one shape.
//! The ladder halves the grid extent four times, which is why the
//! resolution must be a positive multiple of 16.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

use crate::geometry::SilhouetteImage;
use crate::tensor::{Graph, NodeId, Scalar, Tensor, TensorError};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {msg}")]
    Checkpoint { path: std::path::PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<V> = std::result::Result<V, NetworkError>;

/// Negative-side slope of the hidden-layer rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Unscaled encoder channel widths; the decoder mirrors them.
const BASE_CHANNELS: [usize; 4] = [64, 256, 512, 1024];
const ENCODER_KERNELS: [usize; 4] = [4, 2, 2, 2];
const DECODER_KERNELS: [usize; 4] = [2, 2, 2, 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Cubic grid extent; a positive multiple of 16.
    pub resolution: usize,
    /// Multiplier on every channel width (1.0 reproduces the full net).
    pub width_mult: f64,
    /// Number of stacked stages, at least 1.
    pub n_stages: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec { resolution: 32, width_mult: 1.0, n_stages: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
}

/// Geometry of one layer of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    /// Sigmoid head when true; otherwise leaky rectifier.
    pub is_head: bool,
}

impl LayerSpec {
    /// Weight tensor shape under the layout the op expects.
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv => vec![self.c_out, self.c_in, self.k, self.k, self.k],
            LayerKind::Deconv => vec![self.c_in, self.c_out, self.k, self.k, self.k],
        }
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k * self.k + self.c_out
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 16 != 0 {
            return Err(NetworkError::InvalidSpec(format!(
                "resolution {} is not a positive multiple of 16",
                self.resolution
            )));
        }
        if !(self.width_mult > 0.0) || !self.width_mult.is_finite() {
            return Err(NetworkError::InvalidSpec(format!(
                "width multiplier {} must be positive and finite",
                self.width_mult
            )));
        }
        if self.n_stages == 0 {
            return Err(NetworkError::InvalidSpec("need at least one stage".into()));
        }
        Ok(())
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width_mult).round() as usize).max(1)
    }

    /// The nine layers of one stage in execution order.
    pub fn stage_layers(&self) -> Vec<LayerSpec> {
        let ch: Vec<usize> = BASE_CHANNELS.iter().map(|&c| self.scaled(c)).collect();
        let mut layers = Vec::with_capacity(9);
        let mut c_in = 1;
        for (i, &k) in ENCODER_KERNELS.iter().enumerate() {
            layers.push(LayerSpec {
                kind: LayerKind::Conv,
                c_in,
                c_out: ch[i],
                k,
                stride: 2,
                padding: if k == 4 { 1 } else { 0 },
                is_head: false,
            });
            c_in = ch[i];
        }
        for (i, &k) in DECODER_KERNELS.iter().enumerate() {
            // Decoder widths mirror the encoder: 1024w, 512w, 256w, 64w.
            let c_out = ch[ch.len() - 1 - i];
            layers.push(LayerSpec {
                kind: LayerKind::Deconv,
                c_in,
                c_out,
                k,
                stride: 2,
                padding: if k == 4 { 1 } else { 0 },
                is_head: false,
            });
            c_in = c_out;
        }
        layers.push(LayerSpec {
            kind: LayerKind::Conv,
            c_in,
            c_out: 1,
            k: 1,
            stride: 1,
            padding: 0,
            is_head: true,
        });
        layers
    }

    /// Grid extents entering each layer plus the final output extent.
    pub fn extent_ladder(&self) -> Vec<usize> {
        let mut d = self.resolution;
        let mut ladder = vec![d];
        for layer in self.stage_layers() {
            match layer.kind {
                LayerKind::Conv => {
                    d = (d + 2 * layer.padding - layer.k) / layer.stride + 1;
                }
                LayerKind::Deconv => {
                    d = (d - 1) * layer.stride + layer.k - 2 * layer.padding;
                }
            }
            ladder.push(d);
        }
        ladder
    }

    pub fn params_per_stage(&self) -> usize {
        self.stage_layers().iter().map(|l| l.param_count()).sum()
    }
}

/// Weight and bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams<T> {
    pub layers: Vec<LayerParams<T>>,
}

/// All parameters of a stacked network, tied to the spec that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedParams<T> {
    pub spec: NetworkSpec,
    pub stages: Vec<StageParams<T>>,
}

impl<T: Scalar> StackedParams<T> {
    pub fn param_count(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|s| &s.layers)
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Casts every parameter through f64.
    pub fn cast<U: Scalar>(&self) -> StackedParams<U> {
        StackedParams {
            spec: self.spec,
            stages: self
                .stages
                .iter()
                .map(|s| StageParams {
                    layers: s
                        .layers
                        .iter()
                        .map(|l| LayerParams { weight: l.weight.cast(), bias: l.bias.cast() })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Seeded He-style initialization: weights are normal with variance
/// `2 / fan_in`, biases zero. For convolutions `fan_in = c_in * k^3`;
/// for stride-s transposed convolutions each output position only
/// receives `c_in * k^3 / s^3` taps, and using that count keeps
/// activation variance level through the decoder instead of shrinking
/// fourfold per layer. The same seed always produces the same
/// parameters.
pub fn init_params<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<StackedParams<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec.stage_layers();
    let stages = (0..spec.n_stages)
        .map(|_| StageParams {
            layers: layers
                .iter()
                .map(|l| {
                    let taps = match l.kind {
                        LayerKind::Conv => l.k * l.k * l.k,
                        LayerKind::Deconv => {
                            (l.k * l.k * l.k) / (l.stride * l.stride * l.stride)
                        }
                    };
                    let fan_in = (l.c_in * taps) as f64;
                    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite sigma");
                    let shape = l.weight_shape();
                    let n: usize = shape.iter().product();
                    let values: Vec<T> =
                        (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
                    LayerParams {
                        weight: Tensor::new(shape, values).expect("shape matches count"),
                        bias: Tensor::zeros(vec![l.c_out]),
                    }
                })
                .collect(),
        })
        .collect();
    Ok(StackedParams { spec: *spec, stages })
}

/// Copies a silhouette into every depth slice: voxel `(x, y, z)` takes
/// pixel `(y, z)`, producing a `[1, R, R, R]` volume whose maximum along
/// x reproduces the image exactly.
pub fn replicate<T: Scalar>(image: &SilhouetteImage) -> Result<Tensor<T>> {
    let r = image.width();
    if image.height() != r {
        return Err(NetworkError::InvalidSpec(format!(
            "replication needs a square image, got {} x {}",
            r,
            image.height()
        )));
    }
    let mut values = vec![T::zero(); r * r * r];
    for s in 0..r * r {
        if image.get_linear(s) {
            for x in 0..r {
                values[s * r + x] = T::one();
            }
        }
    }
    Ok(Tensor::new(vec![1, r, r, r], values).expect("shape matches count"))
}

/// Graph handles of one stage's parameters.
pub struct StageNodes {
    layers: Vec<(NodeId, NodeId)>,
}

impl StageNodes {
    /// Builds handles from `(weight, bias)` pairs in layer order, for
    /// callers that insert leaves themselves (e.g. gradient checking).
    pub fn from_layer_handles(layers: Vec<(NodeId, NodeId)>) -> Self {
        StageNodes { layers }
    }

    pub fn layer_handles(&self) -> &[(NodeId, NodeId)] {
        &self.layers
    }
}

/// Inserts every parameter tensor as a graph leaf, marked as gradient
/// targets when `trainable`. Insert once per graph and reuse the handles
/// across batch samples so gradients accumulate in one place.
pub fn insert_params<T: Scalar>(
    g: &mut Graph<T>,
    params: &StackedParams<T>,
    trainable: bool,
) -> Vec<StageNodes> {
    params
        .stages
        .iter()
        .map(|stage| StageNodes {
            layers: stage
                .layers
                .iter()
                .map(|l| {
                    let (mut w, mut b) = (l.weight.clone(), l.bias.clone());
                    if trainable {
                        w = w.with_grad();
                        b = b.with_grad();
                    }
                    (g.leaf(w), g.leaf(b))
                })
                .collect(),
        })
        .collect()
}

/// Runs one stage on a `[1, R, R, R]` input node.
pub fn stage_forward<T: Scalar>(
    g: &mut Graph<T>,
    spec: &NetworkSpec,
    nodes: &StageNodes,
    input: NodeId,
) -> Result<NodeId> {
    let layers = spec.stage_layers();
    debug_assert_eq!(layers.len(), nodes.layers.len());
    let mut x = input;
    for (layer, &(w, b)) in layers.iter().zip(&nodes.layers) {
        x = match layer.kind {
            LayerKind::Conv => g.conv3d(x, w, b, layer.stride, layer.padding)?,
            LayerKind::Deconv => g.conv_transpose3d(x, w, b, layer.stride, layer.padding, 0)?,
        };
        x = if layer.is_head { g.sigmoid(x)? } else { g.leaky_relu(x, LEAKY_SLOPE)? };
    }
    Ok(x)
}

/// Runs the whole stack, returning every stage's output volume in order.
/// Stage `k` consumes stage `k - 1`'s output.
pub fn stacked_forward<T: Scalar>(
    g: &mut Graph<T>,
    spec: &NetworkSpec,
    stages: &[StageNodes],
    input: NodeId,
) -> Result<Vec<NodeId>> {
    let mut outputs = Vec::with_capacity(stages.len());
    let mut x = input;
    for nodes in stages {
        x = stage_forward(g, spec, nodes, x)?;
        outputs.push(x);
    }
    Ok(outputs)
}

/// Verifies the analytic gradients of a freshly initialized stack
/// against central differences.
///
/// The loss probes every stage output with a fixed random positive
/// tensor, so gradients flow both through the deep-supervision path and
/// through the next stage's convolutions. Only parameters are treated as
/// inputs; the replicated silhouette is a constant, as in training.
pub fn check_stack_gradients(
    spec: &NetworkSpec,
    seed: u64,
    opts: &crate::tensor::GradCheckOptions,
) -> Result<crate::tensor::GradCheckReport> {
    use rand::Rng;
    spec.validate()?;
    let params: StackedParams<f64> = init_params(spec, seed)?;
    let r = spec.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5117);
    let mut image = SilhouetteImage::new(r, r).expect("positive extent");
    for y in 0..r {
        for x in 0..r {
            if rng.gen_bool(0.5) {
                image.set(x, y, true);
            }
        }
    }
    let input = replicate::<f64>(&image)?;
    let n = r * r * r;
    let probes: Vec<Tensor<f64>> = (0..spec.n_stages)
        .map(|_| {
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.25..1.0)).collect();
            Tensor::new(vec![1, r, r, r], values).expect("shape matches count")
        })
        .collect();

    let mut inputs = Vec::new();
    for stage in &params.stages {
        for layer in &stage.layers {
            inputs.push(layer.weight.clone());
            inputs.push(layer.bias.clone());
        }
    }

    let layers_per_stage = spec.stage_layers().len();
    let report = crate::tensor::check_gradients(
        &inputs,
        |g, ids| {
            let stages: Vec<StageNodes> = ids
                .chunks(2 * layers_per_stage)
                .map(|chunk| {
                    StageNodes::from_layer_handles(
                        chunk.chunks(2).map(|p| (p[0], p[1])).collect(),
                    )
                })
                .collect();
            let x0 = g.leaf(input.clone());
            let outputs = stacked_forward(g, spec, &stages, x0)
                .map_err(|e| match e {
                    NetworkError::Tensor(t) => t,
                    other => TensorError::InvalidArgument {
                        op: "stacked_forward",
                        details: other.to_string(),
                    },
                })?;
            let mut loss: Option<NodeId> = None;
            for (out, probe) in outputs.iter().zip(&probes) {
                let q = g.leaf(probe.clone());
                let weighted = g.mul(*out, q)?;
                let term = g.sum(weighted)?;
                loss = Some(match loss {
                    None => term,
                    Some(acc) => g.add(acc, term)?,
                });
            }
            Ok(loss.expect("at least one stage"))
        },
        opts,
    )?;
    Ok(report)
}

/// Inference convenience: replicates the silhouette and runs the stack
/// without gradient tracking, returning the per-stage output volumes.
pub fn predict<T: Scalar>(
    params: &StackedParams<T>,
    image: &SilhouetteImage,
) -> Result<Vec<Tensor<T>>> {
    params.spec.validate()?;
    if image.width() != params.spec.resolution {
        return Err(NetworkError::InvalidSpec(format!(
            "image size {} does not match network resolution {}",
            image.width(),
            params.spec.resolution
        )));
    }
    let mut g = Graph::new();
    let input = g.leaf(replicate::<T>(image)?);
    let stages = insert_params(&mut g, params, false);
    let outputs = stacked_forward(&mut g, &params.spec, &stages, input)?;
    Ok(outputs.into_iter().map(|id| g.value(id).clone()).collect())
}
