//! Generates a deterministic set of watertight toy meshes as OBJ files,
//! suitable as input for `sil2vox dataset`.
//!
//! Usage: `make_toy_meshes [OUT_DIR]` (default `toy_meshes/`).

use sil2vox::geometry::{icosphere_mesh, unit_cube_mesh, Mesh};

/// Right prism over a star-shaped cross-section polygon in the xy plane,
/// extruded along z over `[-h/2, h/2]`. Caps are center fans from
/// `kernel`, a point that sees the whole polygon boundary, so concave
/// profiles (L, T, +) stay watertight.
fn prism(polygon: &[[f64; 2]], kernel: [f64; 2], height: f64) -> Mesh {
    let n = polygon.len();
    let (zlo, zhi) = (-height / 2.0, height / 2.0);
    let mut vertices = Vec::with_capacity(2 * n + 2);
    for &[x, y] in polygon {
        vertices.push([x, y, zlo]);
    }
    for &[x, y] in polygon {
        vertices.push([x, y, zhi]);
    }
    let c_lo = vertices.len();
    vertices.push([kernel[0], kernel[1], zlo]);
    let c_hi = vertices.len();
    vertices.push([kernel[0], kernel[1], zhi]);

    let mut triangles = Vec::with_capacity(4 * n);
    for i in 0..n {
        let j = (i + 1) % n;
        // Caps, wound to face away from the solid.
        triangles.push([c_lo, j, i]);
        triangles.push([c_hi, n + i, n + j]);
        // Side wall quad split into two triangles.
        triangles.push([i, j, n + j]);
        triangles.push([i, n + j, n + i]);
    }
    Mesh { vertices, triangles }
}

/// Regular n-gon of circumradius 1 centered on the origin.
fn regular_polygon(sides: usize) -> Vec<[f64; 2]> {
    (0..sides)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / sides as f64;
            [a.cos(), a.sin()]
        })
        .collect()
}

fn scaled(mut mesh: Mesh, s: [f64; 3]) -> Mesh {
    mesh.map_vertices(|[x, y, z]| [x * s[0], y * s[1], z * s[2]]);
    mesh
}

fn tetrahedron() -> Mesh {
    Mesh {
        vertices: vec![
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
        ],
        triangles: vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
    }
}

fn octahedron() -> Mesh {
    Mesh {
        vertices: vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ],
        triangles: vec![
            [0, 2, 4],
            [2, 1, 4],
            [1, 3, 4],
            [3, 0, 4],
            [2, 0, 5],
            [1, 2, 5],
            [3, 1, 5],
            [0, 3, 5],
        ],
    }
}

fn pyramid() -> Mesh {
    Mesh {
        vertices: vec![
            [-1.0, -1.0, 0.0],
            [1.0, -1.0, 0.0],
            [1.0, 1.0, 0.0],
            [-1.0, 1.0, 0.0],
            [0.0, 0.0, 1.5],
        ],
        triangles: vec![[0, 2, 1], [0, 3, 2], [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]],
    }
}

fn toy_meshes() -> Vec<(String, Mesh)> {
    let l_profile: Vec<[f64; 2]> =
        vec![[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]];
    let t_profile: Vec<[f64; 2]> = vec![
        [0.0, 0.0],
        [3.0, 0.0],
        [3.0, 1.0],
        [2.0, 1.0],
        [2.0, 3.0],
        [1.0, 3.0],
        [1.0, 1.0],
        [0.0, 1.0],
    ];
    let plus_profile: Vec<[f64; 2]> = vec![
        [1.0, 0.0],
        [2.0, 0.0],
        [2.0, 1.0],
        [3.0, 1.0],
        [3.0, 2.0],
        [2.0, 2.0],
        [2.0, 3.0],
        [1.0, 3.0],
        [1.0, 2.0],
        [0.0, 2.0],
        [0.0, 1.0],
        [1.0, 1.0],
    ];

    let mut shapes: Vec<(String, Mesh)> = vec![
        ("cube".into(), unit_cube_mesh()),
        ("slab".into(), scaled(unit_cube_mesh(), [1.0, 1.0, 0.35])),
        ("plank".into(), scaled(unit_cube_mesh(), [1.0, 0.5, 0.2])),
        ("beam".into(), scaled(unit_cube_mesh(), [1.0, 0.3, 0.3])),
        ("brick".into(), scaled(unit_cube_mesh(), [1.0, 0.65, 0.4])),
        ("pillar".into(), scaled(unit_cube_mesh(), [0.4, 0.4, 1.0])),
        ("sphere_coarse".into(), icosphere_mesh(1)),
        ("sphere".into(), icosphere_mesh(2)),
        ("sphere_fine".into(), icosphere_mesh(3)),
        ("ellipsoid_prolate".into(), scaled(icosphere_mesh(2), [1.0, 0.55, 0.55])),
        ("ellipsoid_oblate".into(), scaled(icosphere_mesh(2), [1.0, 1.0, 0.45])),
        ("ellipsoid_tri".into(), scaled(icosphere_mesh(2), [1.0, 0.7, 0.45])),
        ("disc".into(), scaled(icosphere_mesh(2), [1.0, 1.0, 0.25])),
        ("prism_tri".into(), prism(&regular_polygon(3), [0.0, 0.0], 2.0)),
        ("prism_pent".into(), prism(&regular_polygon(5), [0.0, 0.0], 1.6)),
        ("prism_hex".into(), prism(&regular_polygon(6), [0.0, 0.0], 1.2)),
        ("prism_oct_flat".into(), prism(&regular_polygon(8), [0.0, 0.0], 0.5)),
        ("wedge".into(), scaled(prism(&regular_polygon(3), [0.0, 0.0], 2.0), [1.0, 0.45, 1.0])),
        ("l_beam".into(), prism(&l_profile, [0.75, 0.75], 2.0)),
        ("t_beam".into(), prism(&t_profile, [1.5, 0.5], 2.0)),
        ("cross".into(), prism(&plus_profile, [1.5, 1.5], 1.0)),
        ("tetrahedron".into(), tetrahedron()),
        ("octahedron".into(), octahedron()),
        ("pyramid".into(), pyramid()),
    ];
    shapes.sort_by(|a, b| a.0.cmp(&b.0));
    shapes
}

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "toy_meshes".to_string());
    let out = std::path::PathBuf::from(out);
    std::fs::create_dir_all(&out).expect("create output directory");

    let shapes = toy_meshes();
    for (name, mesh) in &shapes {
        assert!(mesh.is_closed_surface(), "{name} is not watertight");
        mesh.save_obj(out.join(format!("{name}.obj"))).expect("write OBJ");
    }
    println!("wrote {} toy meshes to {}", shapes.len(), out.display());
}
