//! On-disk formats for silhouettes and voxel grids.
//!
//! Silhouettes are stored either as binary PBM (`P4`, portable and
//! viewable) or as a raw bitset (`SBM1`, byte-exact and dense). Voxel
//! grids use the `VOX1` bitset layout. All bitset formats pack LSB-first
//! in linear cell order and require zeroed trailing bits, so a file is a
//! function of the content alone and round-trips are bit-exact.

use super::silhouette::SilhouetteImage;
use super::view::ViewAngle;
use super::voxel::VoxelGrid;
use super::{io_err, GeometryError, Result};

use std::path::Path;

use serde::{Deserialize, Serialize};

const BITSET_MAGIC: &[u8; 4] = b"SBM1";
const VOXEL_MAGIC: &[u8; 4] = b"VOX1";

fn format_err(path: &Path, msg: impl Into<String>) -> GeometryError {
    GeometryError::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// Writes a binary PBM (`P4`): foreground pixels are 1 (black), rows are
/// packed MSB-first and padded to whole bytes.
pub fn write_pbm(img: &SilhouetteImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width(), img.height());
    let mut out = format!("P4\n{w} {h}\n").into_bytes();
    let row_bytes = w.div_ceil(8);
    for y in 0..h {
        let mut row = vec![0u8; row_bytes];
        for x in 0..w {
            if img.get(x, y) {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_pbm(path: impl AsRef<Path>) -> Result<SilhouetteImage> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;

    // Header: "P4", width, height as whitespace-separated tokens with
    // '#' comments, then exactly one whitespace byte before the bits.
    let mut pos = 0usize;
    let mut token = |data: &[u8]| -> Result<String> {
        while pos < data.len() {
            match data[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < data.len() && data[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PBM header"));
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };

    let magic = token(&data)?;
    if magic != "P4" {
        return Err(format_err(path, format!("expected P4 magic, got {magic:?}")));
    }
    let parse_dim = |tok: String| -> Result<usize> {
        tok.parse::<usize>()
            .map_err(|_| format_err(path, format!("bad PBM dimension {tok:?}")))
    };
    let w = parse_dim(token(&data)?)?;
    let h = parse_dim(token(&data)?)?;
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(format_err(path, "missing whitespace before PBM raster"));
    }
    pos += 1;

    let row_bytes = w.div_ceil(8);
    if data.len() < pos + row_bytes * h {
        return Err(format_err(path, "PBM raster shorter than header promises"));
    }
    let mut img = SilhouetteImage::new(w, h)?;
    for y in 0..h {
        let row = &data[pos + y * row_bytes..pos + (y + 1) * row_bytes];
        for x in 0..w {
            if row[x / 8] & (0x80 >> (x % 8)) != 0 {
                img.set(x, y, true);
            }
        }
    }
    Ok(img)
}

fn pack_bits(len: usize, get: impl Fn(usize) -> bool) -> Vec<u8> {
    let mut bytes = vec![0u8; len.div_ceil(8)];
    for i in 0..len {
        if get(i) {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    bytes
}

fn check_payload(path: &Path, payload: &[u8], bits: usize) -> Result<()> {
    if payload.len() != bits.div_ceil(8) {
        return Err(format_err(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), bits.div_ceil(8)),
        ));
    }
    if bits % 8 != 0 {
        let last = payload[payload.len() - 1];
        if last >> (bits % 8) != 0 {
            return Err(format_err(path, "trailing bits past the end are not zero"));
        }
    }
    Ok(())
}

/// Writes the raw silhouette bitset: `SBM1`, width and height as u32
/// little-endian, then row-major pixels packed LSB-first.
pub fn write_silhouette_bitset(img: &SilhouetteImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(12 + img.len().div_ceil(8));
    out.extend_from_slice(BITSET_MAGIC);
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.extend(pack_bits(img.len(), |i| img.get_linear(i)));
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_silhouette_bitset(path: impl AsRef<Path>) -> Result<SilhouetteImage> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if data.len() < 12 || &data[0..4] != BITSET_MAGIC {
        return Err(format_err(path, "not a silhouette bitset (bad magic)"));
    }
    let w = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let payload = &data[12..];
    check_payload(path, payload, w * h)?;
    let mut img = SilhouetteImage::new(w, h)?;
    for i in 0..w * h {
        if payload[i / 8] & (1 << (i % 8)) != 0 {
            img.set(i % w, i / w, true);
        }
    }
    Ok(img)
}

/// Writes a voxel grid: `VOX1`, resolution as u32 little-endian, then
/// voxels packed LSB-first with x fastest and z slowest.
pub fn write_voxel_grid(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + grid.len().div_ceil(8));
    out.extend_from_slice(VOXEL_MAGIC);
    out.extend_from_slice(&(grid.resolution() as u32).to_le_bytes());
    out.extend(pack_bits(grid.len(), |i| grid.get_linear(i)));
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_voxel_grid(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if data.len() < 8 || &data[0..4] != VOXEL_MAGIC {
        return Err(format_err(path, "not a voxel grid (bad magic)"));
    }
    let r = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let payload = &data[8..];
    check_payload(path, payload, r * r * r)?;
    let mut grid = VoxelGrid::new(r)?;
    for i in 0..r * r * r {
        if payload[i / 8] & (1 << (i % 8)) != 0 {
            grid.set_linear(i, true);
        }
    }
    Ok(grid)
}

/// JSON companion of a rendered view image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSidecar {
    pub width: usize,
    pub height: usize,
    pub model_id: String,
    pub view: ViewAngle,
}

impl ViewSidecar {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| format_err(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image_from_bits(w: usize, h: usize, bits: &[bool]) -> SilhouetteImage {
        let mut img = SilhouetteImage::new(w, h).unwrap();
        for (i, &b) in bits.iter().enumerate() {
            if b {
                img.set(i % w, i / w, true);
            }
        }
        img
    }

    #[test]
    fn pbm_bytes_are_the_standard_layout() {
        // 9x2: row 0 has pixels 0 and 8 set, row 1 has pixel 1.
        // MSB-first rows of 2 bytes: [0x80, 0x80], [0x40, 0x00].
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pbm");
        let mut img = SilhouetteImage::new(9, 2).unwrap();
        img.set(0, 0, true);
        img.set(8, 0, true);
        img.set(1, 1, true);
        write_pbm(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"P4\n9 2\n\x80");
        assert_eq!(&bytes[8..], &[0x80, 0x40, 0x00]);
    }

    #[test]
    fn pbm_reader_accepts_comments_and_odd_whitespace() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pbm");
        let mut data = b"P4 # binary bitmap\n# size next\n 3\t2\n".to_vec();
        data.extend_from_slice(&[0b1010_0000, 0b0100_0000]);
        std::fs::write(&path, data).unwrap();
        let img = read_pbm(&path).unwrap();
        assert_eq!((img.width(), img.height()), (3, 2));
        assert!(img.get(0, 0) && !img.get(1, 0) && img.get(2, 0));
        assert!(!img.get(0, 1) && img.get(1, 1) && !img.get(2, 1));
    }

    #[test]
    fn pbm_reader_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pbm");
        std::fs::write(&path, b"P5\n2 2\n\0\0\0\0").unwrap();
        assert!(read_pbm(&path).is_err());
        std::fs::write(&path, b"P4\n4 4\n\xff").unwrap();
        assert!(read_pbm(&path).is_err(), "raster shorter than promised");
        std::fs::write(&path, b"P4\n-1 4\n").unwrap();
        assert!(read_pbm(&path).is_err());
    }

    #[test]
    fn bitset_rejects_bad_magic_length_and_dirty_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.sbm");
        std::fs::write(&path, b"XXXX\x03\0\0\0\x03\0\0\0\xff\xff").unwrap();
        assert!(read_silhouette_bitset(&path).is_err());
        // 3x3 = 9 bits = 2 bytes; give 3.
        let mut data = b"SBM1\x03\0\0\0\x03\0\0\0".to_vec();
        data.extend_from_slice(&[0xff, 0x01, 0x00]);
        std::fs::write(&path, &data).unwrap();
        assert!(read_silhouette_bitset(&path).is_err());
        // Right length but a set bit past the 9th.
        let mut data = b"SBM1\x03\0\0\0\x03\0\0\0".to_vec();
        data.extend_from_slice(&[0xff, 0x02]);
        std::fs::write(&path, &data).unwrap();
        assert!(read_silhouette_bitset(&path).is_err());
        // Clean tail parses.
        let mut data = b"SBM1\x03\0\0\0\x03\0\0\0".to_vec();
        data.extend_from_slice(&[0xff, 0x01]);
        std::fs::write(&path, &data).unwrap();
        assert_eq!(read_silhouette_bitset(&path).unwrap().count_ones(), 9);
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        let sidecar = ViewSidecar {
            width: 32,
            height: 32,
            model_id: "cube_00".into(),
            view: ViewAngle::new(54.0, 140.0),
        };
        sidecar.save(&path).unwrap();
        assert_eq!(ViewSidecar::load(&path).unwrap(), sidecar);
    }

    proptest! {
        #[test]
        fn pbm_round_trips_exactly(
            w in 1usize..40,
            h in 1usize..24,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let bits: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.4)).collect();
            let img = image_from_bits(w, h, &bits);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.pbm");
            write_pbm(&img, &path).unwrap();
            prop_assert_eq!(read_pbm(&path).unwrap(), img);
        }

        #[test]
        fn bitset_round_trips_exactly(
            w in 1usize..40,
            h in 1usize..24,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let bits: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.6)).collect();
            let img = image_from_bits(w, h, &bits);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.sbm");
            write_silhouette_bitset(&img, &path).unwrap();
            prop_assert_eq!(read_silhouette_bitset(&path).unwrap(), img);
        }

        #[test]
        fn voxel_grid_round_trips_exactly(r in 1usize..12, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut grid = VoxelGrid::new(r).unwrap();
            for i in 0..r * r * r {
                if rng.gen_bool(0.5) {
                    grid.set_linear(i, true);
                }
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.vox");
            write_voxel_grid(&grid, &path).unwrap();
            prop_assert_eq!(read_voxel_grid(&path).unwrap(), grid);
        }
    }
}
