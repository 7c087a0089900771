//! Binary silhouette images and the orthographic rasterizer.

use super::view::{camera_basis, project_point, ViewAngle};
use super::{cell_center, cell_index, GeometryError, Mesh, Result};

/// Row-major 1-bit image. `x` runs along image columns (the camera's `u`
/// axis), `y` along rows (the `v` axis); bits are packed LSB-first into
/// 64-bit words with trailing bits kept zero, so whole images compare
/// word-for-word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SilhouetteImage {
    width: usize,
    height: usize,
    bits: Vec<u64>,
}

impl SilhouetteImage {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidArgument(format!(
                "image dimensions must be positive, got {width} x {height}"
            )));
        }
        let words = (width * height).div_ceil(64);
        Ok(SilhouetteImage { width, height, bits: vec![0; words] })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn bit_index(&self, x: usize, y: usize) -> usize {
        assert!(x < self.width && y < self.height, "pixel ({x}, {y}) out of range");
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = self.bit_index(x, y);
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        let i = self.bit_index(x, y);
        if value {
            self.bits[i / 64] |= 1 << (i % 64);
        } else {
            self.bits[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Linear pixel access in row-major order.
    #[inline]
    pub fn get_linear(&self, i: usize) -> bool {
        assert!(i < self.len());
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Fraction of foreground pixels.
    pub fn coverage(&self) -> f64 {
        self.count_ones() as f64 / self.len() as f64
    }

    pub fn flipped_horizontal(&self) -> SilhouetteImage {
        let mut out = SilhouetteImage::new(self.width, self.height).unwrap();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    out.set(self.width - 1 - x, y, true);
                }
            }
        }
        out
    }

    /// Pixel values as numbers in row-major order (foreground = 1).
    pub fn to_values<T: crate::tensor::Scalar>(&self) -> Vec<T> {
        (0..self.len())
            .map(|i| if self.get_linear(i) { T::one() } else { T::zero() })
            .collect()
    }
}

/// 2D cross product of `(b - a)` and `(p - a)`.
#[inline]
fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Renders the mesh's orthographic silhouette for a view.
///
/// A pixel is foreground when its center lies inside or on the boundary of
/// any projected triangle. The inclusive rule is symmetric, which keeps
/// opposite views exact mirrors of each other.
pub fn rasterize_silhouette(mesh: &Mesh, view: ViewAngle, resolution: usize) -> Result<SilhouetteImage> {
    if resolution == 0 {
        return Err(GeometryError::InvalidArgument("resolution must be positive".into()));
    }
    if mesh.triangles.is_empty() {
        return Err(GeometryError::DegenerateMesh("mesh has no triangles".into()));
    }
    let (u, v, _w) = camera_basis(view);
    let projected: Vec<(f64, f64)> =
        mesh.vertices.iter().map(|&p| project_point(p, u, v)).collect();

    let mut image = SilhouetteImage::new(resolution, resolution)?;
    let n = resolution;
    for tri in &mesh.triangles {
        let a = projected[tri[0]];
        let b = projected[tri[1]];
        let c = projected[tri[2]];
        if edge(a, b, c) == 0.0 {
            continue;
        }
        let (min_x, max_x) = (a.0.min(b.0).min(c.0), a.0.max(b.0).max(c.0));
        let (min_y, max_y) = (a.1.min(b.1).min(c.1), a.1.max(b.1).max(c.1));
        let x_lo = cell_index(min_x, n).ceil().max(0.0) as usize;
        let x_hi = cell_index(max_x, n).floor().min(n as f64 - 1.0) as usize;
        let y_lo = cell_index(min_y, n).ceil().max(0.0) as usize;
        let y_hi = cell_index(max_y, n).floor().min(n as f64 - 1.0) as usize;
        for y in y_lo..=y_hi {
            let py = cell_center(y, n);
            for x in x_lo..=x_hi {
                if image.get(x, y) {
                    continue;
                }
                let p = (cell_center(x, n), py);
                let e0 = edge(a, b, p);
                let e1 = edge(b, c, p);
                let e2 = edge(c, a, p);
                let inside = (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0)
                    || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0);
                if inside {
                    image.set(x, y, true);
                }
            }
        }
    }
    Ok(image)
}
