//! Reconstruction of 3D voxel shapes from single-view binary silhouette
//! images.
//!
//! The crate is organised as a pipeline:
//!
//! * [`geometry`] — mesh loading, spherical view sampling, orthographic
//!   silhouette rendering, solid voxelization and dataset packing.
//! * [`tensor`] — a dense tensor type with reverse-mode automatic
//!   differentiation, including strided 3D convolution and transposed
//!   convolution.
//! * [`network`] — the silhouette replication layer and the stacked
//!   encoder–decoder reconstruction network.
//! * [`training`] — end-to-end training with per-stage mixed targets, a
//!   weighted multi-stage loss and final-stage model selection.
//! * [`evaluation`] — voxel IoU, the two view-protocol experiments and
//!   table/CSV reporting.
//!
//! The `sil2vox` binary wires these together behind a small CLI.

pub mod evaluation;
pub mod geometry;
pub mod network;
pub mod tensor;
pub mod training;

/// 64-bit FNV-1a, used to fingerprint configuration documents in
/// checkpoints and reports.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::fnv1a64;

    #[test]
    fn fnv1a64_known_values() {
        // Reference values for the standard FNV-1a offset basis / prime.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
