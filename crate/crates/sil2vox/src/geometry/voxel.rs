//! Solid voxelization on the canonical grid.
//!
//! The primary path casts one ray per (y, z) column through the triangle
//! soup: a half-open coverage rule counts every surface crossing exactly
//! once, and sorted crossing pairs mark the voxel centers between them as
//! interior. That reproduces nested shells (voids stay empty) and needs a
//! closed surface. Meshes that fail the closed-surface check, or columns
//! with odd parity, fall back to conservative surface marking plus an
//! exterior flood fill, which treats enclosed cavities as solid.

use super::silhouette::SilhouetteImage;
use super::{cell_center, cell_index, GeometryError, Mesh, Result};

/// Cubic occupancy grid. Bit `x + r*(y + r*z)` holds voxel `(x, y, z)`,
/// so the linear order matches a row-major tensor with depth = z,
/// height = y, width = x.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelGrid {
    resolution: usize,
    bits: Vec<u64>,
}

impl VoxelGrid {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(GeometryError::InvalidArgument(
                "voxel resolution must be positive".into(),
            ));
        }
        let n = resolution * resolution * resolution;
        Ok(VoxelGrid { resolution, bits: vec![0; n.div_ceil(64)] })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Total number of voxels.
    pub fn len(&self) -> usize {
        self.resolution * self.resolution * self.resolution
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn bit_index(&self, x: usize, y: usize, z: usize) -> usize {
        let r = self.resolution;
        assert!(x < r && y < r && z < r, "voxel ({x}, {y}, {z}) out of range");
        x + r * (y + r * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        let i = self.bit_index(x, y, z);
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.bit_index(x, y, z);
        if value {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    #[inline]
    pub fn get_linear(&self, i: usize) -> bool {
        assert!(i < self.len());
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set_linear(&mut self, i: usize, value: bool) {
        assert!(i < self.len());
        if value {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// `(|a AND b|, |a OR b|)` over the occupancy bits. Callers must pass
    /// an equal-resolution grid.
    pub fn overlap_counts(&self, other: &VoxelGrid) -> (usize, usize) {
        assert_eq!(self.resolution, other.resolution, "overlap needs equal resolutions");
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a & b).count_ones() as usize;
            union += (a | b).count_ones() as usize;
        }
        (inter, union)
    }

    /// Fraction of occupied voxels.
    pub fn occupancy(&self) -> f64 {
        self.count_ones() as f64 / self.len() as f64
    }

    /// Occupancies as numbers in linear bit order (occupied = 1).
    pub fn to_values<T: crate::tensor::Scalar>(&self) -> Vec<T> {
        (0..self.len())
            .map(|i| if self.get_linear(i) { T::one() } else { T::zero() })
            .collect()
    }

    /// Maximum projection along x: image pixel `(ix, iy) = (y, z)` is set
    /// when any voxel in that column is occupied. This is the inverse of
    /// silhouette replication along the depth axis.
    pub fn project_x(&self) -> SilhouetteImage {
        let r = self.resolution;
        let mut img = SilhouetteImage::new(r, r).expect("positive resolution");
        for z in 0..r {
            for y in 0..r {
                if (0..r).any(|x| self.get(x, y, z)) {
                    img.set(y, z, true);
                }
            }
        }
        img
    }
}

/// Voxelizes a mesh already in canonical coordinates.
pub fn voxelize(mesh: &Mesh, resolution: usize) -> Result<VoxelGrid> {
    if resolution == 0 {
        return Err(GeometryError::InvalidArgument(
            "voxel resolution must be positive".into(),
        ));
    }
    if mesh.triangles.is_empty() {
        return Err(GeometryError::DegenerateMesh("mesh has no triangles".into()));
    }
    if mesh.is_closed_surface() {
        if let Some(grid) = voxelize_parity(mesh, resolution)? {
            return Ok(grid);
        }
    }
    voxelize_flood(mesh, resolution)
}

/// Half-open coverage of a column center by a CCW triangle projected to
/// the (y, z) plane. Points strictly inside pass; points on an edge pass
/// only when the edge is rising in z, or horizontal and pointing in -y,
/// so triangles sharing that edge claim it exactly once.
fn column_covered(a: [f64; 2], b: [f64; 2], c: [f64; 2], p: [f64; 2]) -> bool {
    for (s, e) in [(a, b), (b, c), (c, a)] {
        let cross = (e[0] - s[0]) * (p[1] - s[1]) - (e[1] - s[1]) * (p[0] - s[0]);
        if cross < 0.0 {
            return false;
        }
        if cross == 0.0 {
            let dy = e[0] - s[0];
            let dz = e[1] - s[1];
            if !(dz > 0.0 || (dz == 0.0 && dy < 0.0)) {
                return false;
            }
        }
    }
    true
}

/// Parity fill; `None` when some column sees an odd number of crossings
/// and the caller should fall back to flood filling.
fn voxelize_parity(mesh: &Mesh, r: usize) -> Result<Option<VoxelGrid>> {
    let mut crossings: Vec<Vec<f64>> = vec![Vec::new(); r * r];
    for tri in &mesh.triangles {
        let v = [
            mesh.vertices[tri[0]],
            mesh.vertices[tri[1]],
            mesh.vertices[tri[2]],
        ];
        // Project onto (y, z) and normalize the winding to CCW there.
        let a = [v[0][1], v[0][2]];
        let mut b = [v[1][1], v[1][2]];
        let mut c = [v[2][1], v[2][2]];
        let mut xs = [v[0][0], v[1][0], v[2][0]];
        let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if area2 == 0.0 {
            // Edge-on triangles cast no column crossings.
            continue;
        }
        if area2 < 0.0 {
            std::mem::swap(&mut b, &mut c);
            xs.swap(1, 2);
        }

        let (min_y, max_y) = (
            a[0].min(b[0]).min(c[0]),
            a[0].max(b[0]).max(c[0]),
        );
        let (min_z, max_z) = (
            a[1].min(b[1]).min(c[1]),
            a[1].max(b[1]).max(c[1]),
        );
        let y_lo = cell_index(min_y, r).ceil().max(0.0) as usize;
        let y_hi = cell_index(max_y, r).floor().min(r as f64 - 1.0) as usize;
        let z_lo = cell_index(min_z, r).ceil().max(0.0) as usize;
        let z_hi = cell_index(max_z, r).floor().min(r as f64 - 1.0) as usize;

        let denom = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        for iz in z_lo..=z_hi {
            let pz = cell_center(iz, r);
            for iy in y_lo..=y_hi {
                let py = cell_center(iy, r);
                let p = [py, pz];
                if !column_covered(a, b, c, p) {
                    continue;
                }
                // Barycentric interpolation of the x coordinate at p.
                let s = ((p[0] - a[0]) * (c[1] - a[1]) - (p[1] - a[1]) * (c[0] - a[0])) / denom;
                let t = ((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])) / denom;
                let x = xs[0] + s * (xs[1] - xs[0]) + t * (xs[2] - xs[0]);
                crossings[iy + r * iz].push(x);
            }
        }
    }

    let mut grid = VoxelGrid::new(r)?;
    for (col, xs) in crossings.iter_mut().enumerate() {
        if xs.len() % 2 != 0 {
            return Ok(None);
        }
        xs.sort_by(|p, q| p.partial_cmp(q).expect("finite crossings"));
        let (iy, iz) = (col % r, col / r);
        for pair in xs.chunks_exact(2) {
            // Signed clamp before the usize cast: a cast of a negative
            // float saturates to 0 and would mark a spurious voxel.
            let lo_f = cell_index(pair[0], r).ceil();
            let hi_f = cell_index(pair[1], r).floor();
            if hi_f < 0.0 || lo_f > r as f64 - 1.0 || hi_f < lo_f {
                continue;
            }
            let x_lo = lo_f.max(0.0) as usize;
            let x_hi = hi_f.min(r as f64 - 1.0) as usize;
            for ix in x_lo..=x_hi {
                grid.set(ix, iy, iz, true);
            }
        }
    }
    Ok(Some(grid))
}

/// Separating-axis overlap test between a triangle and an axis-aligned
/// cube of half extent `half` centered at `center`.
fn tri_box_overlap(center: [f64; 3], half: f64, tri: [[f64; 3]; 3]) -> bool {
    let v: Vec<[f64; 3]> = tri
        .iter()
        .map(|p| [p[0] - center[0], p[1] - center[1], p[2] - center[2]])
        .collect();
    let edges = [
        super::sub3(v[1], v[0]),
        super::sub3(v[2], v[1]),
        super::sub3(v[0], v[2]),
    ];

    // Box face normals.
    for axis in 0..3 {
        let lo = v.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
        let hi = v.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
        if lo > half || hi < -half {
            return false;
        }
    }

    // Nine edge cross products.
    for e in &edges {
        for axis in 0..3 {
            let mut unit = [0.0; 3];
            unit[axis] = 1.0;
            let a = super::cross3(unit, *e);
            let rad = half * (a[0].abs() + a[1].abs() + a[2].abs());
            let p: Vec<f64> = v.iter().map(|q| super::dot3(*q, a)).collect();
            let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if lo > rad || hi < -rad {
                return false;
            }
        }
    }

    // Triangle plane.
    let n = super::cross3(edges[0], edges[1]);
    let d = super::dot3(n, v[0]);
    let rad = half * (n[0].abs() + n[1].abs() + n[2].abs());
    d.abs() <= rad
}

/// Conservative surface marking plus exterior flood fill. Everything not
/// reachable from the grid boundary without crossing a surface voxel is
/// occupied, so enclosed cavities fill in.
fn voxelize_flood(mesh: &Mesh, r: usize) -> Result<VoxelGrid> {
    let mut surface = VoxelGrid::new(r)?;
    let half = 1.0 / (2.0 * super::FRAME_FILL * r as f64);
    for tri in &mesh.triangles {
        let v = [
            mesh.vertices[tri[0]],
            mesh.vertices[tri[1]],
            mesh.vertices[tri[2]],
        ];
        let mut ranges = [[0usize; 2]; 3];
        let mut outside = false;
        for axis in 0..3 {
            let lo = v.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
            let hi = v.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
            // Candidate cells, padded one cell; the overlap test prunes.
            let i_lo = (cell_index(lo, r) - 1.0).floor().max(0.0) as usize;
            let i_hi = (cell_index(hi, r) + 1.0).ceil().min(r as f64 - 1.0) as usize;
            if cell_index(hi, r) < -1.0 || cell_index(lo, r) > r as f64 {
                outside = true;
            }
            ranges[axis] = [i_lo, i_hi];
        }
        if outside {
            continue;
        }
        for z in ranges[2][0]..=ranges[2][1] {
            for y in ranges[1][0]..=ranges[1][1] {
                for x in ranges[0][0]..=ranges[0][1] {
                    if surface.get(x, y, z) {
                        continue;
                    }
                    let center = [cell_center(x, r), cell_center(y, r), cell_center(z, r)];
                    if tri_box_overlap(center, half, v) {
                        surface.set(x, y, z, true);
                    }
                }
            }
        }
    }

    // Flood the exterior from every non-surface boundary cell.
    let mut exterior = vec![false; r * r * r];
    let mut stack: Vec<(usize, usize, usize)> = Vec::new();
    let idx = |x: usize, y: usize, z: usize| x + r * (y + r * z);
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                let on_boundary =
                    x == 0 || y == 0 || z == 0 || x == r - 1 || y == r - 1 || z == r - 1;
                if on_boundary && !surface.get(x, y, z) && !exterior[idx(x, y, z)] {
                    exterior[idx(x, y, z)] = true;
                    stack.push((x, y, z));
                    while let Some((cx, cy, cz)) = stack.pop() {
                        let mut visit = |nx: usize, ny: usize, nz: usize| {
                            if !surface.get(nx, ny, nz) && !exterior[idx(nx, ny, nz)] {
                                exterior[idx(nx, ny, nz)] = true;
                                stack.push((nx, ny, nz));
                            }
                        };
                        if cx > 0 {
                            visit(cx - 1, cy, cz);
                        }
                        if cx + 1 < r {
                            visit(cx + 1, cy, cz);
                        }
                        if cy > 0 {
                            visit(cx, cy - 1, cz);
                        }
                        if cy + 1 < r {
                            visit(cx, cy + 1, cz);
                        }
                        if cz > 0 {
                            visit(cx, cy, cz - 1);
                        }
                        if cz + 1 < r {
                            visit(cx, cy, cz + 1);
                        }
                    }
                }
            }
        }
    }

    let mut grid = VoxelGrid::new(r)?;
    for i in 0..r * r * r {
        if !exterior[i] {
            grid.set_linear(i, true);
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{icosphere_mesh, rasterize_silhouette, unit_cube_mesh, ViewAngle};

    #[test]
    fn bit_layout_is_x_fastest_z_slowest() {
        let mut g = VoxelGrid::new(32).unwrap();
        g.set(1, 2, 3, true);
        assert!(g.get(1, 2, 3));
        assert_eq!(g.count_ones(), 1);
        let values = g.to_values::<f32>();
        let linear = 1 + 32 * (2 + 32 * 3);
        assert_eq!(values[linear], 1.0);
        assert_eq!(values.iter().filter(|&&v| v != 0.0).count(), 1);
        assert!(g.get_linear(linear));
    }

    #[test]
    fn cube_voxel_count_is_exact_at_32_and_64() {
        // Independent count: voxel centers per axis whose canonical
        // coordinate falls inside the cube's [-0.5, 0.5] extent.
        for (r, expect_axis) in [(32usize, 28usize), (64, 58)] {
            let axis = (0..r).filter(|&i| cell_center(i, r).abs() <= 0.5).count();
            assert_eq!(axis, expect_axis);
            let grid = voxelize(&unit_cube_mesh(), r).unwrap();
            assert_eq!(grid.count_ones(), axis * axis * axis, "resolution {r}");
        }
    }

    #[test]
    fn cube_count_at_64_is_within_5_percent_of_volume() {
        let grid = voxelize(&unit_cube_mesh(), 64).unwrap();
        let analytic = (0.9f64 * 64.0).powi(3);
        let got = grid.count_ones() as f64;
        assert!((got - analytic).abs() / analytic < 0.05, "{got} vs {analytic}");
    }

    #[test]
    fn icosphere_count_is_within_7_percent_of_volume() {
        let grid = voxelize(&icosphere_mesh(2), 32).unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * (0.45f64 * 32.0).powi(3);
        let got = grid.count_ones() as f64;
        assert!((got - analytic).abs() / analytic < 0.07, "{got} vs {analytic}");
    }

    #[test]
    fn cube_projection_equals_front_silhouette_exactly() {
        let grid = voxelize(&unit_cube_mesh(), 32).unwrap();
        let projected = grid.project_x();
        let rendered =
            rasterize_silhouette(&unit_cube_mesh(), ViewAngle::new(90.0, 360.0), 32).unwrap();
        assert_eq!(projected, rendered);
    }

    #[test]
    fn sphere_projection_nearly_matches_front_silhouette() {
        let mesh = icosphere_mesh(2);
        let projected = voxelize(&mesh, 32).unwrap().project_x();
        let rendered = rasterize_silhouette(&mesh, ViewAngle::new(90.0, 360.0), 32).unwrap();
        let mismatch = (0..projected.len())
            .filter(|&i| projected.get_linear(i) != rendered.get_linear(i))
            .count();
        assert!(
            (mismatch as f64) < 0.02 * projected.len() as f64,
            "{mismatch} of {} pixels differ",
            projected.len()
        );
    }

    #[test]
    fn nested_shells_keep_their_void() {
        // A 0.5-scaled cube nested inside the unit cube: columns through
        // the middle see four crossings, so the cavity between pairs stays
        // empty.
        let mut mesh = unit_cube_mesh();
        let inner_offset = mesh.vertices.len();
        let inner = unit_cube_mesh();
        mesh.vertices
            .extend(inner.vertices.iter().map(|v| [v[0] * 0.5, v[1] * 0.5, v[2] * 0.5]));
        mesh.triangles
            .extend(inner.triangles.iter().map(|t| {
                [t[0] + inner_offset, t[1] + inner_offset, t[2] + inner_offset]
            }));
        assert!(mesh.is_closed_surface());
        let grid = voxelize(&mesh, 32).unwrap();
        let mid = 16; // center voxel, canonical coordinate ~0.017: inside the void
        assert!(!grid.get(mid, mid, mid), "cavity voxel must stay empty");
        // A voxel between the shells (x ~ 0.4) is solid.
        let shell = (0..32).find(|&i| cell_center(i, 32) > 0.35).unwrap();
        assert!(grid.get(shell, mid, mid), "shell voxel must be solid");
        let solid = voxelize(&unit_cube_mesh(), 32).unwrap().count_ones();
        assert!(grid.count_ones() < solid, "shell occupies less than the solid cube");
    }

    #[test]
    fn duplicated_triangle_forces_flood_fill_which_keeps_the_solid() {
        // Duplicating one face triangle breaks edge pairing (three edges
        // now have count 4), so the parity precondition fails even though
        // the surface fully seals the cube. The fallback keeps the whole
        // solid: every voxel box overlapping or inside [-0.5, 0.5]^3,
        // which at resolution 32 is exactly the index range 1..=30.
        let mut mesh = unit_cube_mesh();
        mesh.triangles.push(mesh.triangles[0]);
        assert!(!mesh.is_closed_surface());
        let grid = voxelize(&mesh, 32).unwrap();
        assert!(grid.get(16, 16, 16), "interior voxel");
        assert!(!grid.get(0, 0, 0), "exterior corner");
        assert_eq!(grid.count_ones(), 30 * 30 * 30);
    }

    #[test]
    fn odd_parity_column_aborts_the_parity_path() {
        // The duplicated triangle gives its columns three crossings.
        let mut mesh = unit_cube_mesh();
        mesh.triangles.push(*mesh.triangles.last().unwrap());
        assert!(voxelize_parity(&mesh, 32).unwrap().is_none());
    }

    #[test]
    fn open_patch_voxelizes_to_its_surface_shell_only() {
        // A lone square patch has no interior: the fallback marks the
        // voxels its triangles touch and floods everything else away.
        let mesh = Mesh {
            vertices: vec![
                [0.0, -0.4, -0.4],
                [0.0, 0.4, -0.4],
                [0.0, 0.4, 0.4],
                [0.0, -0.4, 0.4],
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        };
        assert!(!mesh.is_closed_surface());
        let grid = voxelize(&mesh, 32).unwrap();
        let n = grid.count_ones();
        // Roughly a (0.8 * 28.8)^2 cell plate, one or two voxels thick.
        assert!(n > 400 && n < 1600, "patch shell size {n}");
        assert!(!grid.get(0, 16, 16), "off-plate voxel");
    }

    #[test]
    fn disjoint_components_both_voxelize() {
        let mut mesh = Mesh::default();
        for offset in [-0.3f64, 0.3] {
            let base = mesh.vertices.len();
            let cube = unit_cube_mesh();
            mesh.vertices
                .extend(cube.vertices.iter().map(|v| [v[0] * 0.25 + offset, v[1] * 0.25, v[2] * 0.25]));
            mesh.triangles
                .extend(cube.triangles.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
        }
        assert!(mesh.is_closed_surface());
        let grid = voxelize(&mesh, 32).unwrap();
        let at = |c: f64| cell_index(c, 32).round() as usize;
        assert!(grid.get(at(-0.3), 16, 16));
        assert!(grid.get(at(0.3), 16, 16));
        assert!(!grid.get(16, 16, 16), "gap between the cubes stays empty");
    }

    #[test]
    fn rejects_empty_mesh_and_zero_resolution() {
        assert!(voxelize(&Mesh::default(), 32).is_err());
        assert!(voxelize(&unit_cube_mesh(), 0).is_err());
        assert!(VoxelGrid::new(0).is_err());
    }
}
