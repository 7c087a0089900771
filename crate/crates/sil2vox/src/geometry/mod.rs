//! Meshes, views, silhouettes and voxel grids.
//!
//! Everything downstream works in one canonical frame: after
//! [`Mesh::normalize_to_unit`] the shape's bounding box is centered at the
//! origin with its longest edge scaled to 1, and both images and voxel
//! grids map that unit box onto the central 90% of their cell range (see
//! [`cell_center`]). Using the same mapping for rendering and voxelization
//! is what makes silhouettes and voxel projections comparable cell by cell.

mod dataset;
mod io;
mod silhouette;
mod view;
mod voxel;

pub use dataset::{build_dataset, Dataset, DatasetConfig, DatasetManifest, ModelEntry, Split};
pub use io::{
    read_pbm, read_silhouette_bitset, read_voxel_grid, write_pbm, write_silhouette_bitset,
    write_voxel_grid, ViewSidecar,
};
pub use silhouette::{rasterize_silhouette, SilhouetteImage};
pub use view::{
    camera_basis, is_hard_view, random_view_grid, training_view_grid, view_direction, ViewAngle,
};
pub use voxel::{voxelize, VoxelGrid};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    ObjParse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("degenerate mesh: {0}")]
    DegenerateMesh(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<V> = std::result::Result<V, GeometryError>;

fn io_err(path: &Path, source: std::io::Error) -> GeometryError {
    GeometryError::Io { path: path.to_path_buf(), source }
}

/// Fraction of the cell range the canonical unit box occupies.
pub const FRAME_FILL: f64 = 0.9;

/// Canonical coordinate of the center of cell `i` out of `n`: cells span
/// the canonical box `[-0.5/0.9, 0.5/0.9]` so the unit box fills the
/// central 90%. The same mapping serves image pixels and voxel centers on
/// each axis.
pub fn cell_center(i: usize, n: usize) -> f64 {
    ((i as f64 + 0.5) / n as f64 - 0.5) / FRAME_FILL
}

/// Fractional cell index whose center sits at canonical coordinate `x`;
/// inverse of [`cell_center`].
pub fn cell_index(x: f64, n: usize) -> f64 {
    (x * FRAME_FILL + 0.5) * n as f64 - 0.5
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = norm3(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Indexed triangle mesh.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    /// Loads the `v` and `f` statements of a Wavefront OBJ file. Faces may
    /// use `v`, `v/vt`, `v//vn` or `v/vt/vn` references and negative
    /// (relative) indices; polygons are fan-triangulated. All other
    /// statements are ignored.
    pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse_obj(&text, path)
    }

    fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
        let err = |line: usize, msg: String| GeometryError::ObjParse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut mesh = Mesh::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            let mut fields = line.split_whitespace();
            match fields.next() {
                Some("v") => {
                    let mut coords = [0.0f64; 3];
                    for c in &mut coords {
                        let tok = fields
                            .next()
                            .ok_or_else(|| err(line_no, "vertex needs 3 coordinates".into()))?;
                        *c = tok
                            .parse()
                            .map_err(|_| err(line_no, format!("bad coordinate {tok:?}")))?;
                    }
                    mesh.vertices.push(coords);
                }
                Some("f") => {
                    let mut face = Vec::new();
                    for tok in fields {
                        let vref = tok.split('/').next().unwrap_or("");
                        let signed: i64 = vref
                            .parse()
                            .map_err(|_| err(line_no, format!("bad vertex reference {tok:?}")))?;
                        let n = mesh.vertices.len() as i64;
                        let resolved = if signed > 0 {
                            signed - 1
                        } else if signed < 0 {
                            n + signed
                        } else {
                            return Err(err(line_no, "vertex index 0 is not valid".into()));
                        };
                        if resolved < 0 || resolved >= n {
                            return Err(err(
                                line_no,
                                format!("vertex reference {signed} outside 1..={n}"),
                            ));
                        }
                        face.push(resolved as usize);
                    }
                    if face.len() < 3 {
                        return Err(err(line_no, "face needs at least 3 vertices".into()));
                    }
                    for i in 1..face.len() - 1 {
                        let tri = [face[0], face[i], face[i + 1]];
                        // Skip fan slivers that reference a vertex twice.
                        if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] {
                            mesh.triangles.push(tri);
                        }
                    }
                }
                _ => {}
            }
        }
        if mesh.triangles.is_empty() {
            return Err(err(0, "no faces found".into()));
        }
        Ok(mesh)
    }

    /// Writes vertices and faces as OBJ (1-based indices).
    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        std::fs::write(path, out).map_err(|e| io_err(path, e))
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn aabb(&self) -> Result<([f64; 3], [f64; 3])> {
        if self.vertices.is_empty() {
            return Err(GeometryError::DegenerateMesh("no vertices".into()));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                if !v[a].is_finite() {
                    return Err(GeometryError::DegenerateMesh(format!(
                        "non-finite vertex coordinate {}",
                        v[a]
                    )));
                }
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Ok((lo, hi))
    }

    /// Centers the bounding box on the origin and scales the longest box
    /// edge to exactly 1, putting every vertex inside `[-0.5, 0.5]^3`.
    pub fn normalize_to_unit(&mut self) -> Result<()> {
        let (lo, hi) = self.aabb()?;
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
        if extent <= 0.0 {
            return Err(GeometryError::DegenerateMesh(
                "bounding box has zero extent".into(),
            ));
        }
        let center = [
            (lo[0] + hi[0]) / 2.0,
            (lo[1] + hi[1]) / 2.0,
            (lo[2] + hi[2]) / 2.0,
        ];
        let scale = 1.0 / extent;
        for v in &mut self.vertices {
            for a in 0..3 {
                v[a] = (v[a] - center[a]) * scale;
            }
        }
        Ok(())
    }

    pub fn map_vertices(&mut self, f: impl Fn([f64; 3]) -> [f64; 3]) {
        for v in &mut self.vertices {
            *v = f(*v);
        }
    }

    /// True when every undirected edge is shared by exactly two triangles
    /// with opposite winding: the closed-surface precondition for the
    /// parity-based voxel fill.
    pub fn is_closed_surface(&self) -> bool {
        let mut edges: HashMap<(usize, usize), (usize, i64)> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let dir = if a < b { 1 } else { -1 };
                let entry = edges.entry(key).or_insert((0, 0));
                entry.0 += 1;
                entry.1 += dir;
            }
        }
        edges.values().all(|&(count, dir)| count == 2 && dir == 0)
    }
}

/// Axis-aligned unit cube spanning `[-0.5, 0.5]^3`, wound counterclockwise
/// seen from outside.
pub fn unit_cube_mesh() -> Mesh {
    let h = 0.5;
    let vertices = vec![
        [-h, -h, -h],
        [h, -h, -h],
        [h, h, -h],
        [-h, h, -h],
        [-h, -h, h],
        [h, -h, h],
        [h, h, h],
        [-h, h, h],
    ];
    let triangles = vec![
        // -z
        [0, 2, 1],
        [0, 3, 2],
        // +z
        [4, 5, 6],
        [4, 6, 7],
        // -y
        [0, 1, 5],
        [0, 5, 4],
        // +y
        [3, 7, 6],
        [3, 6, 2],
        // -x
        [0, 4, 7],
        [0, 7, 3],
        // +x
        [1, 2, 6],
        [1, 6, 5],
    ];
    Mesh { vertices, triangles }
}

/// Icosahedron subdivided `subdivisions` times with every vertex projected
/// onto the sphere of radius 0.5.
pub fn icosphere_mesh(subdivisions: u32) -> Mesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let base = [
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    let project = |v: [f64; 3]| {
        let n = normalize3(v);
        [n[0] * 0.5, n[1] * 0.5, n[2] * 0.5]
    };
    let mut vertices: Vec<[f64; 3]> = base.iter().map(|&v| project(v)).collect();
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for t in &triangles {
            let mut mids = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mids[e] = *midpoints.entry(key).or_insert_with(|| {
                    let m = [
                        (vertices[a][0] + vertices[b][0]) / 2.0,
                        (vertices[a][1] + vertices[b][1]) / 2.0,
                        (vertices[a][2] + vertices[b][2]) / 2.0,
                    ];
                    vertices.push(project(m));
                    vertices.len() - 1
                });
            }
            next.push([t[0], mids[0], mids[2]]);
            next.push([t[1], mids[1], mids[0]]);
            next.push([t[2], mids[2], mids[1]]);
            next.push([mids[0], mids[1], mids[2]]);
        }
        triangles = next;
    }
    Mesh { vertices, triangles }
}
