//! Spherical view sampling and the orthographic camera frame.

use super::{cross3, dot3, norm3, normalize3, Result};
use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Camera direction in degrees: `polar` is measured from the +z axis,
/// `azimuth` from the +x axis in the xy plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewAngle {
    pub polar_deg: f64,
    pub azimuth_deg: f64,
}

impl ViewAngle {
    pub fn new(polar_deg: f64, azimuth_deg: f64) -> Self {
        ViewAngle { polar_deg, azimuth_deg }
    }
}

/// Unit vector from the object toward the camera.
pub fn view_direction(view: ViewAngle) -> [f64; 3] {
    let a = view.polar_deg.to_radians();
    let b = view.azimuth_deg.to_radians();
    [a.sin() * b.cos(), a.sin() * b.sin(), a.cos()]
}

/// The regular training lattice: polar steps `180/n_polar * l1` for
/// `l1 in 1..=n_polar` crossed with azimuth steps `360/n_azimuth * l2` for
/// `l2 in 1..=n_azimuth`, polar-major.
pub fn training_view_grid(n_polar: usize, n_azimuth: usize) -> Vec<ViewAngle> {
    let polar_step = 180.0 / n_polar as f64;
    let azimuth_step = 360.0 / n_azimuth as f64;
    let mut views = Vec::with_capacity(n_polar * n_azimuth);
    for l1 in 1..=n_polar {
        for l2 in 1..=n_azimuth {
            views.push(ViewAngle::new(polar_step * l1 as f64, azimuth_step * l2 as f64));
        }
    }
    views
}

/// The training lattice perturbed by one uniform offset `gamma` in the
/// open interval (0, 1) per view, applied to both indices:
/// `polar = step * (l1 - gamma)`, `azimuth = step * (l2 - gamma)`. No view
/// ever coincides with a lattice point, so these are disjoint from
/// [`training_view_grid`] by construction.
pub fn random_view_grid(n_polar: usize, n_azimuth: usize, seed: u64) -> Vec<ViewAngle> {
    let polar_step = 180.0 / n_polar as f64;
    let azimuth_step = 360.0 / n_azimuth as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::with_capacity(n_polar * n_azimuth);
    for l1 in 1..=n_polar {
        for l2 in 1..=n_azimuth {
            let gamma = loop {
                let g: f64 = rng.gen();
                if g > 0.0 {
                    break g;
                }
            };
            views.push(ViewAngle::new(
                polar_step * (l1 as f64 - gamma),
                azimuth_step * (l2 as f64 - gamma),
            ));
        }
    }
    views
}

/// Right-handed orthographic camera frame `(u, v, w)` for a view:
/// `w` points at the camera, `u` is the image x axis and `v` the image y
/// axis. The frame is z-up except at the poles, where +y takes over as the
/// up reference.
pub fn camera_basis(view: ViewAngle) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let w = view_direction(view);
    let z_up = [0.0, 0.0, 1.0];
    let y_up = [0.0, 1.0, 0.0];
    let candidate = cross3(z_up, w);
    let u = if norm3(candidate) < 1e-9 {
        normalize3(cross3(y_up, w))
    } else {
        normalize3(candidate)
    };
    let v = cross3(w, u);
    (u, v, w)
}

/// Projects a point into image coordinates `(x, y) = (p . u, p . v)`.
pub fn project_point(p: [f64; 3], u: [f64; 3], v: [f64; 3]) -> (f64, f64) {
    (dot3(p, u), dot3(p, v))
}

/// A view is hard when its direction lies within `threshold_deg` of one of
/// the degenerate axes +-x (front/back) or +-z (top/bottom), where a
/// silhouette collapses toward a profile with little depth information.
pub fn is_hard_view(view: ViewAngle, threshold_deg: f64) -> bool {
    let d = view_direction(view);
    let cos_best = d[0].abs().max(d[2].abs());
    cos_best.clamp(-1.0, 1.0).acos().to_degrees() <= threshold_deg
}

/// Validates lattice dimensions shared by the view-grid builders.
pub fn check_grid_dims(n_polar: usize, n_azimuth: usize) -> Result<()> {
    if n_polar == 0 || n_azimuth == 0 {
        return Err(super::GeometryError::InvalidArgument(format!(
            "view grid needs positive dimensions, got {n_polar} x {n_azimuth}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn default_lattice_has_180_views_literal_has_324() {
        assert_eq!(training_view_grid(10, 18).len(), 180);
        assert_eq!(training_view_grid(18, 18).len(), 324);
    }

    #[test]
    fn lattice_endpoints() {
        let grid = training_view_grid(10, 18);
        assert_eq!(grid[0], ViewAngle::new(18.0, 20.0));
        assert_eq!(grid[179], ViewAngle::new(180.0, 360.0));
        // Polar-major ordering: second entry advances azimuth.
        assert_eq!(grid[1], ViewAngle::new(18.0, 40.0));
    }

    #[test]
    fn directions_hit_the_axes() {
        let d = view_direction(ViewAngle::new(90.0, 360.0));
        assert_relative_eq!(d[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(d[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(d[2], 0.0, epsilon = 1e-12);
        let d = view_direction(ViewAngle::new(180.0, 100.0));
        assert_relative_eq!(d[2], -1.0, epsilon = 1e-12);
        let d = view_direction(ViewAngle::new(90.0, 90.0));
        assert_relative_eq!(d[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn basis_is_right_handed_orthonormal() {
        for view in training_view_grid(10, 18) {
            let (u, v, w) = camera_basis(view);
            assert_relative_eq!(norm3(u), 1.0, epsilon = 1e-12);
            assert_relative_eq!(norm3(v), 1.0, epsilon = 1e-12);
            assert_relative_eq!(norm3(w), 1.0, epsilon = 1e-12);
            assert_relative_eq!(dot3(u, v), 0.0, epsilon = 1e-12);
            assert_relative_eq!(dot3(u, w), 0.0, epsilon = 1e-12);
            assert_relative_eq!(dot3(v, w), 0.0, epsilon = 1e-12);
            let uv = cross3(u, v);
            for a in 0..3 {
                assert_relative_eq!(uv[a], w[a], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn front_view_maps_y_to_image_x_and_z_to_image_y() {
        let (u, v, _w) = camera_basis(ViewAngle::new(90.0, 360.0));
        assert_relative_eq!(u[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(v[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pole_view_uses_fallback_up() {
        let (u, v, w) = camera_basis(ViewAngle::new(180.0, 40.0));
        assert_relative_eq!(w[2], -1.0, epsilon = 1e-12);
        assert_relative_eq!(norm3(u), 1.0, epsilon = 1e-12);
        assert_relative_eq!(norm3(v), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn antipodal_views_mirror_the_image_axis_exactly() {
        let view = ViewAngle::new(54.0, 140.0);
        let anti = ViewAngle::new(180.0 - view.polar_deg, view.azimuth_deg + 180.0);
        let (u, v, w) = camera_basis(view);
        let (ua, va, wa) = camera_basis(anti);
        // Trig of the antipodal angles is not bit-exact, so compare the
        // frames loosely; the rasterizer's own mirror test pins exactness
        // where it matters (on mirrored pixel pairs).
        for a in 0..3 {
            assert_relative_eq!(ua[a], -u[a], epsilon = 1e-12);
            assert_relative_eq!(va[a], v[a], epsilon = 1e-12);
            assert_relative_eq!(wa[a], -w[a], epsilon = 1e-12);
        }
    }

    #[test]
    fn exactly_20_hard_views_on_the_default_lattice() {
        let hard: Vec<ViewAngle> = training_view_grid(10, 18)
            .into_iter()
            .filter(|&v| is_hard_view(v, 15.0))
            .collect();
        assert_eq!(hard.len(), 20);
        // 18 bottom-pole views plus the front and back profile.
        let poles = hard.iter().filter(|v| v.polar_deg == 180.0).count();
        assert_eq!(poles, 18);
        assert!(hard.contains(&ViewAngle::new(90.0, 180.0)));
        assert!(hard.contains(&ViewAngle::new(90.0, 360.0)));
    }

    #[test]
    fn hard_threshold_boundaries() {
        // The nearest non-hard lattice view sits acos(sin 72 deg) = 17.88
        // degrees from the +x axis, so thresholds in (0, 17.88) give 20.
        let grid = training_view_grid(10, 18);
        let at = |t: f64| grid.iter().filter(|&&v| is_hard_view(v, t)).count();
        assert_eq!(at(1.0), 20);
        assert_eq!(at(17.0), 20);
        assert!(at(18.0) > 20);
    }

    #[test]
    fn random_grid_stays_inside_its_cells_and_misses_the_lattice() {
        let (np, na) = (10, 18);
        let views = random_view_grid(np, na, 7);
        assert_eq!(views.len(), 180);
        let lattice = training_view_grid(np, na);
        let (ps, azs) = (180.0 / np as f64, 360.0 / na as f64);
        for (i, v) in views.iter().enumerate() {
            let l1 = (i / na + 1) as f64;
            let l2 = (i % na + 1) as f64;
            assert!(v.polar_deg > ps * (l1 - 1.0) && v.polar_deg < ps * l1);
            assert!(v.azimuth_deg > azs * (l2 - 1.0) && v.azimuth_deg < azs * l2);
            assert!(!lattice.contains(v));
        }
    }

    #[test]
    fn random_grid_is_seed_deterministic() {
        assert_eq!(random_view_grid(10, 18, 3), random_view_grid(10, 18, 3));
        assert_ne!(random_view_grid(10, 18, 3), random_view_grid(10, 18, 4));
    }
}
