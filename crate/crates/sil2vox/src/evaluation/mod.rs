//! Voxel-IoU evaluation and experiment protocols.
//!
//! Experiment 1 scores a model on the same view lattice it trained on;
//! experiment 2 re-renders silhouettes from seeded random views that by
//! construction never coincide with lattice views. Every (model, view)
//! prediction is binarized and scored against the ground-truth grid, with
//! hard views (near the vertical axis or the front/back line of sight,
//! where the silhouette hides most of the shape) tracked as a subset.
//! Reports carry per-image records plus aggregates that remain
//! recomputable from the records.

use crate::geometry::{
    is_hard_view, random_view_grid, rasterize_silhouette, Dataset, GeometryError,
    SilhouetteImage, ViewAngle, VoxelGrid,
};
use crate::network::{predict, NetworkError, StackedParams};
use crate::tensor::{Scalar, TensorError};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum EvaluationError {
    #[error("invalid evaluation argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint resolution {network} does not match dataset resolution {dataset}")]
    ResolutionMismatch { network: usize, dataset: usize },
}

pub type Result<V> = std::result::Result<V, EvaluationError>;

/// Thresholds a predicted occupancy volume into a binary grid; a voxel is
/// occupied iff its value is strictly greater than the threshold, so an
/// exact tie stays empty.
pub fn binarize<T: Scalar>(values: &[T], resolution: usize, threshold: f64) -> Result<VoxelGrid> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(EvaluationError::InvalidArgument(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    if values.len() != resolution * resolution * resolution {
        return Err(EvaluationError::InvalidArgument(format!(
            "{} values cannot fill a {resolution}^3 grid",
            values.len()
        )));
    }
    let mut grid = VoxelGrid::new(resolution).map_err(EvaluationError::Geometry)?;
    for (i, &v) in values.iter().enumerate() {
        if v.as_f64() > threshold {
            grid.set_linear(i, true);
        }
    }
    Ok(grid)
}

/// Intersection over union of two binary grids. Two empty grids agree on
/// emptiness and score 1.
pub fn voxel_iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.resolution() != b.resolution() {
        return Err(EvaluationError::InvalidArgument(format!(
            "grid resolutions {} and {} differ",
            a.resolution(),
            b.resolution()
        )));
    }
    let (inter, union) = a.overlap_counts(b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkTag {
    Single,
    Stacked,
}

impl NetworkTag {
    /// Column shorthand: S for the single network, SS for the stack.
    pub fn short(self) -> &'static str {
        match self {
            NetworkTag::Single => "S",
            NetworkTag::Stacked => "SS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentMode {
    /// Score on the training view lattice.
    E1,
    /// Score on seeded random views strictly inside lattice cells.
    E2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoURecord {
    pub model_id: String,
    pub view: ViewAngle,
    pub hard: bool,
    pub network: NetworkTag,
    pub iou: f64,
}

/// Summary statistics over a record set; always recomputable via
/// [`compute_aggregates`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub count: usize,
    pub mean_all: f64,
    /// Sample standard deviation over sqrt(count); 0 when count < 2.
    pub stderr_all: f64,
    pub hard_count: usize,
    pub mean_hard: Option<f64>,
    pub stderr_hard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: ExperimentMode,
    pub category: String,
    pub network: NetworkTag,
    pub seed: u64,
    pub config_hash: u64,
    pub records: Vec<IoURecord>,
    pub aggregates: Aggregates,
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0);
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt() / (n as f64).sqrt())
}

pub fn compute_aggregates(records: &[IoURecord]) -> Result<Aggregates> {
    if records.is_empty() {
        return Err(EvaluationError::InvalidArgument("no records to aggregate".into()));
    }
    let all: Vec<f64> = records.iter().map(|r| r.iou).collect();
    let hard: Vec<f64> = records.iter().filter(|r| r.hard).map(|r| r.iou).collect();
    let (mean_all, stderr_all) = mean_and_stderr(&all);
    let (mean_hard, stderr_hard) = if hard.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_and_stderr(&hard);
        (Some(m), Some(s))
    };
    Ok(Aggregates {
        count: all.len(),
        mean_all,
        stderr_all,
        hard_count: hard.len(),
        mean_hard,
        stderr_hard,
    })
}

/// Settings shared by both experiment protocols.
pub struct ExperimentSetup<'a> {
    pub dataset: &'a Dataset,
    pub mode: ExperimentMode,
    /// Seeds the random view grid in E2 mode; unused in E1.
    pub seed: u64,
    pub network: NetworkTag,
    pub category: String,
    pub config_hash: u64,
    pub threshold: f64,
}

/// Runs an experiment with an arbitrary predictor mapping (model id,
/// silhouette) to a final-stage occupancy volume in linear grid order.
/// This is the seam the network-backed runner and the test oracles share.
pub fn run_experiment_with<T, F>(setup: &ExperimentSetup, predictor: F) -> Result<ExperimentReport>
where
    T: Scalar,
    F: Fn(&str, &SilhouetteImage) -> Result<Vec<T>> + Sync,
{
    let manifest = setup.dataset.manifest();
    let resolution = manifest.resolution;
    let hard_threshold = manifest.hard_threshold_deg;

    // Work items in (manifest, view) order; evaluation order never
    // affects the records because each item is scored independently.
    let mut items: Vec<(String, usize, ViewAngle)> = Vec::new();
    match setup.mode {
        ExperimentMode::E1 => {
            let views = manifest.views();
            for entry in &manifest.models {
                for (i, &view) in views.iter().enumerate() {
                    items.push((entry.id.clone(), i, view));
                }
            }
        }
        ExperimentMode::E2 => {
            let views = random_view_grid(manifest.n_polar, manifest.n_azimuth, setup.seed);
            for entry in &manifest.models {
                for (i, &view) in views.iter().enumerate() {
                    items.push((entry.id.clone(), i, view));
                }
            }
        }
    }

    let records: Vec<IoURecord> = items
        .par_iter()
        .map(|(model_id, view_index, view)| -> Result<IoURecord> {
            let gt = setup.dataset.load_voxels(model_id)?;
            let image = match setup.mode {
                ExperimentMode::E1 => setup.dataset.load_view(model_id, *view_index)?.0,
                ExperimentMode::E2 => {
                    let mesh = setup.dataset.load_mesh(model_id)?;
                    rasterize_silhouette(&mesh, *view, resolution)
                        .map_err(EvaluationError::Geometry)?
                }
            };
            let volume = predictor(model_id, &image)?;
            let pred = binarize(&volume, resolution, setup.threshold)?;
            Ok(IoURecord {
                model_id: model_id.clone(),
                view: *view,
                hard: is_hard_view(*view, hard_threshold),
                network: setup.network,
                iou: voxel_iou(&pred, &gt)?,
            })
        })
        .collect::<Result<_>>()?;

    let aggregates = compute_aggregates(&records)?;
    Ok(ExperimentReport {
        mode: setup.mode,
        category: setup.category.clone(),
        network: setup.network,
        seed: setup.seed,
        config_hash: setup.config_hash,
        records,
        aggregates,
    })
}

/// Network-backed experiment: replicate each silhouette, run the stack,
/// score the final stage's output.
pub fn run_experiment<T: Scalar>(
    params: &StackedParams<T>,
    setup: &ExperimentSetup,
) -> Result<ExperimentReport> {
    let dataset_res = setup.dataset.manifest().resolution;
    if params.spec.resolution != dataset_res {
        return Err(EvaluationError::ResolutionMismatch {
            network: params.spec.resolution,
            dataset: dataset_res,
        });
    }
    run_experiment_with(setup, |_, image| {
        let outputs = predict(params, image)?;
        Ok(outputs.last().expect("at least one stage").values().to_vec())
    })
}

/// Histogram of record IoUs over `bins` equal-width buckets spanning
/// [0, 1]; an IoU of exactly 1 lands in the last bucket.
pub fn iou_histogram(records: &[IoURecord], bins: usize) -> Vec<usize> {
    assert!(bins > 0);
    let mut hist = vec![0usize; bins];
    for r in records {
        let b = ((r.iou * bins as f64) as usize).min(bins - 1);
        hist[b] += 1;
    }
    hist
}

/// Published full-scale baselines shown next to measured rows. Column
/// order matches [`TABLE_COLUMNS`]; the first cell is the textured-input
/// 3D-R2N2 system, the rest are the silhouette networks.
pub const PUBLISHED_BASELINES: [(&str, [f64; 7]); 2] = [
    ("Cars", [0.798, 0.699, 0.765, 0.817, 0.828, 0.601, 0.686]),
    ("Planes", [0.513, 0.373, 0.469, 0.473, 0.474, 0.384, 0.430]),
];

pub const TABLE_COLUMNS: [&str; 7] =
    ["3D-R2N2", "S-Hard-E1", "S-All-E1", "SS-Hard-E1", "SS-All-E1", "S-All-E2", "SS-All-E2"];

fn table_cell(reports: &[&ExperimentReport], category: &str, column: &str) -> Option<f64> {
    let (tag, subset, mode) = match column {
        "S-Hard-E1" => (NetworkTag::Single, true, ExperimentMode::E1),
        "S-All-E1" => (NetworkTag::Single, false, ExperimentMode::E1),
        "SS-Hard-E1" => (NetworkTag::Stacked, true, ExperimentMode::E1),
        "SS-All-E1" => (NetworkTag::Stacked, false, ExperimentMode::E1),
        "S-All-E2" => (NetworkTag::Single, false, ExperimentMode::E2),
        "SS-All-E2" => (NetworkTag::Stacked, false, ExperimentMode::E2),
        _ => return None,
    };
    reports
        .iter()
        .find(|r| r.category == category && r.network == tag && r.mode == mode)
        .and_then(|r| {
            if subset {
                r.aggregates.mean_hard
            } else {
                Some(r.aggregates.mean_all)
            }
        })
}

/// Renders the mean-IoU grid: one measured row per category present in
/// `reports`, with published full-scale baseline rows underneath for
/// side-by-side reading. Missing cells stay blank; nothing is invented.
pub fn report_table(reports: &[&ExperimentReport]) -> String {
    let mut out = String::new();
    out.push_str("| Category |");
    for c in TABLE_COLUMNS {
        let _ = write!(out, " {c} |");
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in TABLE_COLUMNS {
        out.push_str("---|");
    }
    out.push('\n');

    let mut categories: Vec<&str> = Vec::new();
    for r in reports {
        if !categories.contains(&r.category.as_str()) {
            categories.push(&r.category);
        }
    }
    for category in &categories {
        let _ = write!(out, "| {category} (measured) |");
        for column in TABLE_COLUMNS {
            match table_cell(reports, category, column) {
                Some(v) => {
                    let _ = write!(out, " {v:.3} |");
                }
                None => out.push_str("  |"),
            }
        }
        out.push('\n');
    }
    for (name, row) in PUBLISHED_BASELINES {
        let _ = write!(out, "| {name} (published, full scale) |");
        for v in row {
            let _ = write!(out, " {v:.3} |");
        }
        out.push('\n');
    }
    out.push_str(
        "\nPublished rows quote full-scale results reported for these protocols \
         and are references, not measurements from this run.\n",
    );
    out
}

/// Per-image records as CSV: `model_id,alpha,beta,hard,network,iou`.
pub fn records_csv(records: &[IoURecord]) -> String {
    let mut out = String::from("model_id,alpha,beta,hard,network,iou\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6}",
            r.model_id,
            r.view.polar_deg,
            r.view.azimuth_deg,
            r.hard,
            r.network.short(),
            r.iou
        );
    }
    out
}
