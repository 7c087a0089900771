//! Packed datasets: normalized meshes, ground-truth voxel grids and the
//! rendered lattice views for every model, plus a JSON manifest.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json
//! models/<id>/mesh.obj          normalized mesh
//! models/<id>/voxels.vox        ground-truth occupancy
//! models/<id>/views/view_NNN.pbm / .json
//! ```
//!
//! Builds are deterministic: the same models and config produce
//! byte-identical files.

use super::io::{read_pbm, read_voxel_grid, write_pbm, write_voxel_grid, ViewSidecar};
use super::silhouette::{rasterize_silhouette, SilhouetteImage};
use super::view::{check_grid_dims, is_hard_view, training_view_grid, ViewAngle};
use super::voxel::{voxelize, VoxelGrid};
use super::{io_err, GeometryError, Mesh, Result};

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Voxel grid resolution; view images use the same size.
    pub resolution: usize,
    pub n_polar: usize,
    pub n_azimuth: usize,
    /// Angular distance to a degenerate axis under which a view counts as
    /// hard.
    pub hard_threshold_deg: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { resolution: 32, n_polar: 10, n_azimuth: 18, hard_threshold_deg: 15.0 }
    }
}

/// Protocol side a model is assigned to. Informational at build time; the
/// command-line tools use it to select models for training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    pub n_views: usize,
    pub n_hard_views: usize,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub resolution: usize,
    pub n_polar: usize,
    pub n_azimuth: usize,
    pub hard_threshold_deg: f64,
    /// Input meshes that could not be read and were left out of the build.
    #[serde(default)]
    pub n_skipped: usize,
    pub models: Vec<ModelEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| GeometryError::Format { path: path.to_path_buf(), msg: e.to_string() })?;
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| GeometryError::Format { path: path.to_path_buf(), msg: e.to_string() })
    }

    /// The lattice every model's views were rendered from.
    pub fn views(&self) -> Vec<ViewAngle> {
        training_view_grid(self.n_polar, self.n_azimuth)
    }

    /// Ids of the models assigned to one side of the split, in manifest
    /// order.
    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.models.iter().filter(|m| m.split == split).map(|m| m.id.clone()).collect()
    }
}

fn check_model_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.');
    if !ok || id.starts_with('.') {
        return Err(GeometryError::InvalidArgument(format!(
            "model id {id:?} is not a safe directory name"
        )));
    }
    Ok(())
}

fn view_stem(index: usize) -> String {
    format!("view_{index:03}")
}

/// Normalizes, voxelizes and renders every model into `out_dir`. Models
/// keep their input order in the manifest.
pub fn build_dataset(
    models: &[(String, Mesh)],
    config: &DatasetConfig,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if models.is_empty() {
        return Err(GeometryError::InvalidArgument("no models given".into()));
    }
    check_grid_dims(config.n_polar, config.n_azimuth)?;
    if config.resolution == 0 {
        return Err(GeometryError::InvalidArgument("resolution must be positive".into()));
    }
    let mut seen = HashSet::new();
    for (id, _) in models {
        check_model_id(id)?;
        if !seen.insert(id.as_str()) {
            return Err(GeometryError::InvalidArgument(format!("duplicate model id {id:?}")));
        }
    }

    let views = training_view_grid(config.n_polar, config.n_azimuth);
    std::fs::create_dir_all(out_dir.join("models")).map_err(|e| io_err(out_dir, e))?;

    let entries: Result<Vec<ModelEntry>> = models
        .par_iter()
        .map(|(id, mesh)| build_model(id, mesh, config, &views, out_dir))
        .collect();
    let manifest = DatasetManifest {
        resolution: config.resolution,
        n_polar: config.n_polar,
        n_azimuth: config.n_azimuth,
        hard_threshold_deg: config.hard_threshold_deg,
        n_skipped: 0,
        models: entries?,
    };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn build_model(
    id: &str,
    mesh: &Mesh,
    config: &DatasetConfig,
    views: &[ViewAngle],
    out_dir: &Path,
) -> Result<ModelEntry> {
    let model_dir = out_dir.join("models").join(id);
    let views_dir = model_dir.join("views");
    std::fs::create_dir_all(&views_dir).map_err(|e| io_err(&views_dir, e))?;

    let mut normalized = mesh.clone();
    normalized.normalize_to_unit()?;
    normalized.save_obj(model_dir.join("mesh.obj"))?;

    let grid = voxelize(&normalized, config.resolution)?;
    write_voxel_grid(&grid, model_dir.join("voxels.vox"))?;

    let mut n_hard = 0;
    for (i, &view) in views.iter().enumerate() {
        if is_hard_view(view, config.hard_threshold_deg) {
            n_hard += 1;
        }
        let image = rasterize_silhouette(&normalized, view, config.resolution)?;
        let stem = view_stem(i);
        write_pbm(&image, views_dir.join(format!("{stem}.pbm")))?;
        let sidecar = ViewSidecar {
            width: image.width(),
            height: image.height(),
            model_id: id.to_string(),
            view,
        };
        sidecar.save(views_dir.join(format!("{stem}.json")))?;
    }
    Ok(ModelEntry {
        id: id.to_string(),
        n_views: views.len(),
        n_hard_views: n_hard,
        split: Split::Train,
    })
}

/// Read access to a packed dataset.
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = DatasetManifest::load(root.join("manifest.json"))?;
        Ok(Dataset { root, manifest })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn model_ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.models.iter().map(|m| m.id.as_str())
    }

    fn model_dir(&self, id: &str) -> PathBuf {
        self.root.join("models").join(id)
    }

    pub fn load_mesh(&self, id: &str) -> Result<Mesh> {
        Mesh::load_obj(self.model_dir(id).join("mesh.obj"))
    }

    pub fn load_voxels(&self, id: &str) -> Result<VoxelGrid> {
        read_voxel_grid(self.model_dir(id).join("voxels.vox"))
    }

    pub fn load_view(&self, id: &str, index: usize) -> Result<(SilhouetteImage, ViewAngle)> {
        let views_dir = self.model_dir(id).join("views");
        let stem = view_stem(index);
        let image = read_pbm(views_dir.join(format!("{stem}.pbm")))?;
        let sidecar = ViewSidecar::load(views_dir.join(format!("{stem}.json")))?;
        Ok((image, sidecar.view))
    }

    /// A view of the same on-disk data restricted to the models on one side
    /// of the split. With no `Test` entries the `Train` restriction is the
    /// whole dataset.
    pub fn restricted_to(&self, split: Split) -> Dataset {
        let mut manifest = self.manifest.clone();
        manifest.models.retain(|m| m.split == split);
        Dataset { root: self.root.clone(), manifest }
    }
}
