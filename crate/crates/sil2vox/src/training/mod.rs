//! End-to-end training of the stacked network.
//!
//! Each stage is supervised against a mixed target, an elementwise blend
//! of the replicated input volume and the ground truth; the final stage
//! always targets the ground truth alone. The optimizer descends the
//! lambda-weighted sum of per-stage smoothed root losses, while model
//! selection watches only the final stage's error on held-out views, so
//! intermediate stages guide learning but never pick the checkpoint.
//!
//! Every source of randomness (initialization, the validation split, the
//! per-epoch shuffle) derives from the configured seed, and steps run
//! sequentially, so two runs of the same configuration produce identical
//! loss curves.

use crate::geometry::{Dataset, GeometryError, SilhouetteImage, VoxelGrid};
use crate::network::{
    insert_params, replicate, save_checkpoint, stacked_forward, CheckpointMeta, NetworkError,
    NetworkSpec, StackedParams,
};
use crate::tensor::{Graph, NodeId, Scalar, Tensor, TensorError};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("need at least 2 samples to carve out a validation split, got {0}")]
    TooFewSamples(usize),
    #[error("dataset resolution {dataset} does not match network resolution {network}")]
    ResolutionMismatch { dataset: usize, network: usize },
}

pub type Result<V> = std::result::Result<V, TrainingError>;

/// Which scalar the optimizer descends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// The lambda-weighted sum over all stages. Zero-lambda terms are
    /// still materialized, so weighting is explicit rather than pruned.
    Combined,
    /// The final stage's loss alone, with no weighting applied.
    FinalStageOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub network: NetworkSpec,
    /// Per-stage loss weights; nonnegative, summing to 1.
    pub lambdas: Vec<f64>,
    /// Per-stage target mix `[input share, ground-truth share]`; each
    /// pair is nonnegative and sums to 1, and the final stage must be
    /// exactly `[0, 1]` (the last stage answers to the truth alone).
    pub etas: Vec<[f64; 2]>,
    /// Smoothing of the root loss.
    pub eps: f64,
    pub learning_rate: f64,
    /// Momentum coefficient in [0, 1); 0 is plain gradient descent.
    pub momentum: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Run validation every this many steps (and once at the end).
    pub val_every: usize,
    /// Share of samples held out for validation, in (0, 1).
    pub val_fraction: f64,
    /// Validations without improvement before the learning rate decays.
    pub plateau_patience: usize,
    /// Multiplier applied to the learning rate on a plateau, in (0, 1].
    pub lr_decay: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl TrainConfig {
    /// Defaults for a given architecture: lambda spread uniformly, every
    /// hidden stage targeting a half/half blend, the final stage the
    /// ground truth.
    pub fn for_network(network: NetworkSpec) -> Self {
        let n = network.n_stages;
        let mut etas = vec![[0.5, 0.5]; n];
        etas[n - 1] = [0.0, 1.0];
        TrainConfig {
            network,
            lambdas: vec![1.0 / n as f64; n],
            etas,
            eps: 1e-4,
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 4,
            max_steps: 600,
            val_every: 25,
            val_fraction: 0.1,
            plateau_patience: 5,
            lr_decay: 0.1,
            seed: 0,
            loss_mode: LossMode::Combined,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let n = self.network.n_stages;
        let bad = |msg: String| Err(TrainingError::Config(msg));
        if self.lambdas.len() != n {
            return bad(format!("{} lambdas for {} stages", self.lambdas.len(), n));
        }
        if self.lambdas.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return bad("lambdas must be nonnegative and finite".into());
        }
        let sum: f64 = self.lambdas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("lambdas sum to {sum}, need 1"));
        }
        if self.etas.len() != n {
            return bad(format!("{} eta pairs for {} stages", self.etas.len(), n));
        }
        for (k, e) in self.etas.iter().enumerate() {
            if e.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return bad(format!("stage {k} etas must be nonnegative and finite"));
            }
            if (e[0] + e[1] - 1.0).abs() > 1e-9 {
                return bad(format!("stage {k} etas sum to {}, need 1", e[0] + e[1]));
            }
        }
        if self.etas[n - 1] != [0.0, 1.0] {
            return bad("final stage must target the ground truth alone (etas [0, 1])".into());
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be nonnegative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.val_every == 0 {
            return bad("batch size, max steps and validation cadence must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("validation fraction {} must lie in (0, 1)", self.val_fraction));
        }
        if self.plateau_patience == 0 {
            return bad("plateau patience must be positive".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("learning-rate decay {} must lie in (0, 1]", self.lr_decay));
        }
        Ok(())
    }

    /// Fingerprint of the serialized config, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        crate::fnv1a64(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// One training example: the replicated silhouette volume and the
/// ground-truth occupancy volume, both `[1, R, R, R]`.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub x_rep: Tensor<T>,
    pub gt: Tensor<T>,
}

pub fn sample_from_view<T: Scalar>(
    image: &SilhouetteImage,
    gt: &VoxelGrid,
) -> Result<Sample<T>> {
    let x_rep = replicate::<T>(image)?;
    let r = gt.resolution();
    if image.width() != r {
        return Err(TrainingError::ResolutionMismatch { dataset: image.width(), network: r });
    }
    let gt = Tensor::new(vec![1, r, r, r], gt.to_values()).expect("shape matches count");
    Ok(Sample { x_rep, gt })
}

/// Loads every (model, view) pair of a dataset, in manifest order.
pub fn samples_from_dataset<T: Scalar>(dataset: &Dataset) -> Result<Vec<Sample<T>>> {
    let mut samples = Vec::new();
    for entry in &dataset.manifest().models {
        let gt = dataset.load_voxels(&entry.id)?;
        for view in 0..entry.n_views {
            let (image, _) = dataset.load_view(&entry.id, view)?;
            samples.push(sample_from_view(&image, &gt)?);
        }
    }
    Ok(samples)
}

/// The supervision target of stage `k`: the elementwise blend
/// `eta1 * x_rep + eta2 * gt`. With default etas that is a half/half mix
/// for hidden stages and the plain ground truth for the final one.
pub fn stage_target<T: Scalar>(
    k: usize,
    x_rep: &Tensor<T>,
    gt: &Tensor<T>,
    config: &TrainConfig,
) -> Result<Tensor<T>> {
    let [e1, e2] = config.etas[k];
    let (a, b) = (T::from_f64(e1), T::from_f64(e2));
    Ok(x_rep.zip_map(gt, |x, g| a * x + b * g)?)
}

/// Builds the lambda-weighted sum of per-stage root losses as graph
/// nodes. Every term is materialized, including zero-lambda ones, so the
/// degenerate weighting (0, ..., 0, 1) reduces to the final-stage loss
/// through exact float identities rather than through pruning.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    outputs: &[NodeId],
    targets: &[NodeId],
    lambdas: &[f64],
    eps: f64,
) -> crate::tensor::Result<NodeId> {
    if outputs.is_empty() || outputs.len() != targets.len() || outputs.len() != lambdas.len() {
        return Err(TensorError::InvalidArgument {
            op: "combined_loss",
            details: format!(
                "{} outputs, {} targets, {} lambdas",
                outputs.len(),
                targets.len(),
                lambdas.len()
            ),
        });
    }
    let mut acc: Option<NodeId> = None;
    for ((&y, &t), &lambda) in outputs.iter().zip(targets).zip(lambdas) {
        let loss = g.root_abs_loss(y, t, eps)?;
        let term = g.mul_scalar(loss, lambda)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one stage"))
}

/// Plain (graph-free) smoothed root error, for logging and validation:
/// `mean(sqrt(|p - t| + eps) - sqrt(eps))`, accumulated in f64.
pub fn root_abs_error<T: Scalar>(pred: &[T], target: &[T], eps: f64) -> f64 {
    assert_eq!(pred.len(), target.len(), "root_abs_error length mismatch");
    let base = eps.sqrt();
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| ((p.as_f64() - t.as_f64()).abs() + eps).sqrt() - base)
        .sum();
    sum / pred.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    /// Per-stage root errors against that stage's mixed target, averaged
    /// over the batch. Logged in every loss mode.
    pub stage_losses: Vec<f64>,
    /// The scalar the optimizer actually descended.
    pub loss: f64,
    pub learning_rate: f64,
}

/// The best validation result seen so far, selected by the final stage's
/// root error only.
#[derive(Debug, Clone)]
pub struct BestRecord<T> {
    pub criterion: f64,
    pub step: u64,
    pub params: StackedParams<T>,
}

pub struct TrainState<T> {
    pub params: StackedParams<T>,
    /// Momentum buffers, one per parameter tensor in declaration order.
    velocity: Vec<Vec<T>>,
    pub step: u64,
    pub learning_rate: f64,
    pub best: Option<BestRecord<T>>,
    /// Validations since the best record last improved.
    stale_validations: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: StackedParams<T>, config: &TrainConfig) -> Self {
        let velocity = params
            .stages
            .iter()
            .flat_map(|s| &s.layers)
            .flat_map(|l| [vec![T::zero(); l.weight.len()], vec![T::zero(); l.bias.len()]])
            .collect();
        TrainState {
            params,
            velocity,
            step: 0,
            learning_rate: config.learning_rate,
            best: None,
            stale_validations: 0,
        }
    }

    /// Records a validation result; keeps the strictly best (earliest on
    /// ties) and decays the learning rate after a plateau. Returns true
    /// when the record improved.
    pub fn observe_validation(&mut self, criterion: f64, config: &TrainConfig) -> bool {
        let improved = match &self.best {
            None => true,
            Some(best) => criterion < best.criterion,
        };
        if improved {
            self.best =
                Some(BestRecord { criterion, step: self.step, params: self.params.clone() });
            self.stale_validations = 0;
        } else {
            self.stale_validations += 1;
            if self.stale_validations >= config.plateau_patience {
                self.learning_rate *= config.lr_decay;
                self.stale_validations = 0;
            }
        }
        improved
    }
}

/// Mean final-stage root error of `params` over `samples`, the model
/// selection criterion. Intermediate stages never enter.
pub fn validation_criterion<T: Scalar>(
    params: &StackedParams<T>,
    samples: &[&Sample<T>],
    eps: f64,
) -> Result<f64> {
    assert!(!samples.is_empty(), "validation set must be non-empty");
    let mut total = 0.0;
    for sample in samples {
        let final_out = forward_volumes(params, &sample.x_rep)?
            .pop()
            .expect("at least one stage");
        total += root_abs_error(final_out.values(), sample.gt.values(), eps);
    }
    Ok(total / samples.len() as f64)
}

/// No-grad forward pass from an already replicated input volume.
pub fn forward_volumes<T: Scalar>(
    params: &StackedParams<T>,
    x_rep: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let input = g.leaf(x_rep.clone());
    let stages = insert_params(&mut g, params, false);
    let outputs = stacked_forward(&mut g, &params.spec, &stages, input)?;
    Ok(outputs.into_iter().map(|id| g.value(id).clone()).collect())
}

/// One optimizer step over a batch: forward every sample through a fresh
/// graph sharing one set of parameter leaves, descend the batch-mean
/// loss, and apply a momentum update (`v = mu v + grad`,
/// `theta -= lr v`). Deterministic given state, batch and config.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[&Sample<T>],
    config: &TrainConfig,
) -> Result<StepMetrics> {
    assert!(!batch.is_empty(), "batch must be non-empty");
    let spec = &config.network;
    let n_stages = spec.n_stages;

    let mut g = Graph::new();
    let stage_nodes = insert_params(&mut g, &state.params, true);

    let mut sample_losses = Vec::with_capacity(batch.len());
    let mut stage_outputs: Vec<Vec<NodeId>> = Vec::with_capacity(batch.len());
    let mut stage_targets: Vec<Vec<Tensor<T>>> = Vec::with_capacity(batch.len());
    for sample in batch {
        let input = g.leaf(sample.x_rep.clone());
        let outputs = stacked_forward(&mut g, spec, &stage_nodes, input)?;
        let targets: Vec<Tensor<T>> = (0..n_stages)
            .map(|k| stage_target(k, &sample.x_rep, &sample.gt, config))
            .collect::<Result<_>>()?;
        let target_nodes: Vec<NodeId> = targets.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = match config.loss_mode {
            LossMode::Combined => {
                combined_loss(&mut g, &outputs, &target_nodes, &config.lambdas, config.eps)?
            }
            LossMode::FinalStageOnly => g.root_abs_loss(
                outputs[n_stages - 1],
                target_nodes[n_stages - 1],
                config.eps,
            )?,
        };
        sample_losses.push(loss);
        stage_outputs.push(outputs);
        stage_targets.push(targets);
    }

    let mut acc = sample_losses[0];
    for &l in &sample_losses[1..] {
        acc = g.add(acc, l)?;
    }
    let batch_loss = g.mul_scalar(acc, 1.0 / batch.len() as f64)?;
    let loss_value = g.value(batch_loss).item().as_f64();
    if !loss_value.is_finite() {
        return Err(TrainingError::NonFiniteLoss { step: state.step });
    }
    g.backward(batch_loss)?;

    // Per-stage logging errors, independent of the loss mode.
    let mut stage_losses = vec![0.0; n_stages];
    for (outputs, targets) in stage_outputs.iter().zip(&stage_targets) {
        for k in 0..n_stages {
            stage_losses[k] +=
                root_abs_error(g.value(outputs[k]).values(), targets[k].values(), config.eps);
        }
    }
    for v in &mut stage_losses {
        *v /= batch.len() as f64;
    }

    let lr = T::from_f64(state.learning_rate);
    let mu = T::from_f64(config.momentum);
    let mut vi = 0;
    for (stage, nodes) in state.params.stages.iter_mut().zip(&stage_nodes) {
        for (layer, &(wid, bid)) in stage.layers.iter_mut().zip(nodes.layer_handles()) {
            for (tensor, id) in [(&mut layer.weight, wid), (&mut layer.bias, bid)] {
                let velocity = &mut state.velocity[vi];
                vi += 1;
                let grad = g.grad(id).expect("trainable leaf received a gradient");
                for ((theta, v), &dg) in
                    tensor.values_mut().iter_mut().zip(velocity.iter_mut()).zip(grad)
                {
                    *v = mu * *v + dg;
                    *theta = *theta - lr * *v;
                }
            }
        }
    }

    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        stage_losses,
        loss: loss_value,
        learning_rate: state.learning_rate,
    })
}

/// Seeded split into (train, validation) index lists; validation takes
/// `round(n * fraction)`, at least 1, and training keeps the rest.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(TrainingError::TooFewSamples(n));
    }
    let n_val = (((n as f64) * fraction).round() as usize).clamp(1, n - 1);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    indices.shuffle(&mut rng);
    let val = indices[..n_val].to_vec();
    let train = indices[n_val..].to_vec();
    Ok((train, val))
}

pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub metrics: Vec<StepMetrics>,
    /// `(step, final-stage validation error)` at each validation.
    pub validations: Vec<(u64, f64)>,
    pub best: BestRecord<T>,
}

/// Runs the full loop over in-memory samples: seeded split, seeded
/// per-epoch shuffles, validation at the configured cadence and once
/// after the last step.
pub fn train_in_memory<T: Scalar>(
    config: &TrainConfig,
    samples: &[Sample<T>],
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    for s in samples {
        let r = config.network.resolution;
        if s.x_rep.shape() != [1, r, r, r] || s.gt.shape() != [1, r, r, r] {
            return Err(TrainingError::ResolutionMismatch {
                dataset: *s.x_rep.shape().get(1).unwrap_or(&0),
                network: r,
            });
        }
    }
    let (train_idx, val_idx) = split_indices(samples.len(), config.val_fraction, config.seed)?;
    let val_set: Vec<&Sample<T>> = val_idx.iter().map(|&i| &samples[i]).collect();

    let params = crate::network::init_params::<T>(&config.network, config.seed)?;
    let mut state = TrainState::new(params, config);
    let mut metrics = Vec::with_capacity(config.max_steps);
    let mut validations = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x51ca_11ed_5eed_5u64);

    let mut order = train_idx.clone();
    'steps: loop {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let m = train_step(&mut state, &batch, config)?;
            metrics.push(m);
            if state.step % config.val_every as u64 == 0 {
                let criterion = validation_criterion(&state.params, &val_set, config.eps)?;
                validations.push((state.step, criterion));
                state.observe_validation(criterion, config);
            }
            if state.step >= config.max_steps as u64 {
                break 'steps;
            }
        }
    }
    if validations.last().map(|&(s, _)| s) != Some(state.step) {
        let criterion = validation_criterion(&state.params, &val_set, config.eps)?;
        validations.push((state.step, criterion));
        state.observe_validation(criterion, config);
    }
    let best = state.best.clone().expect("at least one validation ran");
    Ok(TrainOutcome { state, metrics, validations, best })
}

/// Writes the step log as CSV: one row per step plus a header, with the
/// validation criterion filled on the steps where it was measured.
pub fn write_training_log(
    path: &Path,
    metrics: &[StepMetrics],
    validations: &[(u64, f64)],
) -> Result<()> {
    let n_stages = metrics.first().map_or(0, |m| m.stage_losses.len());
    let mut out = String::new();
    out.push_str("step");
    for k in 1..=n_stages {
        out.push_str(&format!(",stage{k}_loss"));
    }
    out.push_str(",loss,learning_rate,val_criterion\n");
    let mut vals = validations.iter().peekable();
    for m in metrics {
        out.push_str(&m.step.to_string());
        for s in &m.stage_losses {
            out.push_str(&format!(",{s:.17e}"));
        }
        out.push_str(&format!(",{:.17e},{:.17e}", m.loss, m.learning_rate));
        match vals.peek() {
            Some(&&(step, criterion)) if step == m.step => {
                out.push_str(&format!(",{criterion:.17e}"));
                vals.next();
            }
            _ => out.push(','),
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| TrainingError::Io { path: path.to_path_buf(), source: e })?;
    file.write_all(out.as_bytes())
        .map_err(|e| TrainingError::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

/// Paths and headline numbers of a finished run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub best_step: u64,
    pub best_criterion: f64,
    pub final_loss: f64,
    pub log_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Trains on every (model, view) pair of a dataset and writes the log
/// plus best/final checkpoints into `out_dir`.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<TrainSummary> {
    config.validate()?;
    let res = dataset.manifest().resolution;
    if res != config.network.resolution {
        return Err(TrainingError::ResolutionMismatch {
            dataset: res,
            network: config.network.resolution,
        });
    }
    let samples = samples_from_dataset::<T>(dataset)?;
    let outcome = train_in_memory(config, &samples)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| TrainingError::Io { path: out_dir.to_path_buf(), source: e })?;
    let log_path = out_dir.join("train_log.csv");
    write_training_log(&log_path, &outcome.metrics, &outcome.validations)?;
    let hash = config.hash();
    let best_path = out_dir.join("best.snw");
    save_checkpoint(
        &best_path,
        &outcome.best.params,
        CheckpointMeta { step: outcome.best.step, config_hash: hash },
    )?;
    let final_path = out_dir.join("final.snw");
    save_checkpoint(
        &final_path,
        &outcome.state.params,
        CheckpointMeta { step: outcome.state.step, config_hash: hash },
    )?;
    Ok(TrainSummary {
        steps: outcome.state.step,
        best_step: outcome.best.step,
        best_criterion: outcome.best.criterion,
        final_loss: outcome.metrics.last().map_or(f64::NAN, |m| m.loss),
        log_path,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rasterize_silhouette, unit_cube_mesh, voxelize, ViewAngle};
    use crate::network::init_params;

    fn tiny_config() -> TrainConfig {
        TrainConfig::for_network(NetworkSpec {
            resolution: 16,
            width_mult: 1.0 / 8.0,
            n_stages: 2,
        })
    }

    fn cube_sample(resolution: usize) -> Sample<f32> {
        let mesh = {
            let mut m = unit_cube_mesh();
            m.normalize_to_unit().unwrap();
            m
        };
        let front = ViewAngle { polar_deg: 90.0, azimuth_deg: 360.0 };
        let image = rasterize_silhouette(&mesh, front, resolution).unwrap();
        let grid = voxelize(&mesh, resolution).unwrap();
        sample_from_view(&image, &grid).unwrap()
    }

    #[test]
    fn config_validation_catches_bad_settings() {
        assert!(tiny_config().validate().is_ok());
        let mut c = tiny_config();
        c.lambdas = vec![0.6, 0.6];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.lambdas = vec![1.0];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.etas[0] = [0.7, 0.7];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.etas[1] = [0.1, 0.9];
        assert!(c.validate().is_err(), "final stage must mix nothing in");
        let mut c = tiny_config();
        c.eps = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.val_fraction = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_targets_blend_input_and_truth() {
        let config = tiny_config();
        let x = Tensor::<f64>::new(vec![4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let gt = Tensor::<f64>::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let t1 = stage_target(0, &x, &gt, &config).unwrap();
        assert_eq!(t1.values(), &[1.0, 0.5, 0.5, 0.0]);
        let t2 = stage_target(1, &x, &gt, &config).unwrap();
        assert_eq!(t2.values(), gt.values(), "final stage targets the truth exactly");

        let mut toward_input = config.clone();
        toward_input.etas[0] = [1.0, 0.0];
        let t = stage_target(0, &x, &gt, &toward_input).unwrap();
        assert_eq!(t.values(), x.values());

        // Affine blend: every value stays inside [min, max] of its inputs.
        for ((&tv, &xv), &gv) in t1.values().iter().zip(x.values()).zip(gt.values()) {
            assert!(tv >= xv.min(gv) && tv <= xv.max(gv));
        }
    }

    #[test]
    fn combined_loss_degenerates_exactly() {
        let mut g = Graph::<f64>::new();
        let y1 = g.leaf(Tensor::new(vec![4], vec![0.2, 0.8, 0.4, 0.6]).unwrap());
        let y2 = g.leaf(Tensor::new(vec![4], vec![0.9, 0.1, 0.7, 0.3]).unwrap());
        let t1 = g.leaf(Tensor::new(vec![4], vec![0.0, 1.0, 0.5, 0.5]).unwrap());
        let t2 = g.leaf(Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let eps = 1e-4;

        let combined = combined_loss(&mut g, &[y1, y2], &[t1, t2], &[0.0, 1.0], eps).unwrap();
        let direct = g.root_abs_loss(y2, t2, eps).unwrap();
        assert_eq!(g.value(combined).item(), g.value(direct).item());

        // Equal stage losses under (0.5, 0.5) reproduce the common value.
        let same = combined_loss(&mut g, &[y1, y1], &[t1, t1], &[0.5, 0.5], eps).unwrap();
        let single = g.root_abs_loss(y1, t1, eps).unwrap();
        assert_eq!(g.value(same).item(), g.value(single).item());

        // Zero residual everywhere means zero loss.
        let zero = combined_loss(&mut g, &[y1, y2], &[y1, y2], &[0.5, 0.5], eps).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);

        assert!(combined_loss(&mut g, &[y1], &[t1, t2], &[1.0], eps).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut config = tiny_config();
        config.learning_rate = 0.0;
        let params = init_params::<f32>(&config.network, 3).unwrap();
        let mut state = TrainState::new(params.clone(), &config);
        let sample = cube_sample(16);
        train_step(&mut state, &[&sample], &config).unwrap();
        assert_eq!(state.params, params);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn identical_seeds_give_identical_loss_curves() {
        let mut config = tiny_config();
        config.max_steps = 6;
        config.val_every = 3;
        config.batch_size = 2;
        let samples: Vec<Sample<f32>> = (0..4).map(|_| cube_sample(16)).collect();
        let a = train_in_memory(&config, &samples).unwrap();
        let b = train_in_memory(&config, &samples).unwrap();
        let la: Vec<f64> = a.metrics.iter().map(|m| m.loss).collect();
        let lb: Vec<f64> = b.metrics.iter().map(|m| m.loss).collect();
        assert_eq!(la, lb);
        assert_eq!(a.validations, b.validations);
    }

    #[test]
    fn loss_descends_on_a_single_cube_pair() {
        let mut config = tiny_config();
        config.max_steps = 50;
        let sample = cube_sample(16);
        let params = init_params::<f32>(&config.network, 11).unwrap();
        let mut state = TrainState::new(params, &config);
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(train_step(&mut state, &[&sample], &config).unwrap().loss);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss must strictly decrease: {:?}", losses);
        }
    }

    #[test]
    fn best_record_tracks_final_stage_only_and_never_worsens() {
        let config = tiny_config();
        let params = init_params::<f32>(&config.network, 1).unwrap();
        let mut state = TrainState::new(params, &config);
        state.step = 10;
        assert!(state.observe_validation(0.30, &config));
        state.step = 20;
        assert!(state.observe_validation(0.25, &config));
        state.step = 30;
        assert!(!state.observe_validation(0.27, &config));
        let best = state.best.as_ref().unwrap();
        assert_eq!(best.step, 20);
        assert_eq!(best.criterion, 0.25);
    }

    #[test]
    fn plateau_decays_learning_rate() {
        let mut config = tiny_config();
        config.plateau_patience = 2;
        let params = init_params::<f32>(&config.network, 1).unwrap();
        let mut state = TrainState::new(params, &config);
        state.observe_validation(0.5, &config);
        state.observe_validation(0.6, &config);
        assert_eq!(state.learning_rate, config.learning_rate);
        state.observe_validation(0.6, &config);
        assert!((state.learning_rate - config.learning_rate * 0.1).abs() < 1e-12);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (train, val) = split_indices(10, 0.1, 42).unwrap();
        assert_eq!(val.len(), 1);
        assert_eq!(train.len(), 9);
        let (train2, val2) = split_indices(10, 0.1, 42).unwrap();
        assert_eq!((&train, &val), (&train2, &val2));
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_indices(1, 0.1, 0).is_err());
    }

    #[test]
    fn log_has_one_row_per_step_plus_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let metrics = vec![
            StepMetrics { step: 1, stage_losses: vec![0.4, 0.5], loss: 0.45, learning_rate: 0.01 },
            StepMetrics { step: 2, stage_losses: vec![0.3, 0.4], loss: 0.35, learning_rate: 0.01 },
        ];
        write_training_log(&path, &metrics, &[(2, 0.37)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "step,stage1_loss,stage2_loss,loss,learning_rate,val_criterion");
        assert!(lines[1].ends_with(','), "no validation on step 1");
        let val: f64 = lines[2].rsplit(',').next().unwrap().parse().unwrap();
        assert!((val - 0.37).abs() < 1e-15);
    }

    #[test]
    fn degenerate_lambda_matches_final_stage_only_run() {
        let mut combined = tiny_config();
        combined.lambdas = vec![0.0, 1.0];
        combined.max_steps = 8;
        combined.val_every = 4;
        combined.batch_size = 2;
        let mut final_only = combined.clone();
        final_only.loss_mode = LossMode::FinalStageOnly;

        let samples: Vec<Sample<f32>> = (0..4).map(|_| cube_sample(16)).collect();
        let a = train_in_memory(&combined, &samples).unwrap();
        let b = train_in_memory(&final_only, &samples).unwrap();
        for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
            assert!(
                (ma.loss - mb.loss).abs() <= 1e-12,
                "step {}: {} vs {}",
                ma.step,
                ma.loss,
                mb.loss
            );
        }
    }
}
