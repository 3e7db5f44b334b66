//! Anchor scene codec.
//!
//! Compresses sets of anchors (a 3D location plus a row of attributes) by
//! quantizing locations to a 16-bit lattice, quantizing attributes with an
//! adaptive element-wise step matrix, and range-coding the result under a
//! conditional Gaussian entropy model. The model side information is a fused
//! feature produced by several small expert MLPs over multi-resolution
//! hash-grid features of the coded locations, combined by a learned gate.
//!
//! Training, rate-distortion sweeps, and the quantization-chain variants used
//! for comparisons live in [`train`] and [`strategy`]; the on-disk format in
//! [`container`] (see FORMAT.md).

pub mod anchor;
pub mod autodiff;
pub mod bytes;
pub mod entropy;
pub mod error;
pub mod hashgrid;
pub mod nn;
pub mod prior;
pub mod quant;
pub mod rangecoder;

pub use error::Error;

/// 64-bit FNV-1a. Used for seed derivation and cheap content tags.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive an independent stream seed from a base seed and a purpose tag.
pub(crate) fn subseed(seed: u64, tag: &str) -> u64 {
    let mut buf = Vec::with_capacity(8 + tag.len());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());
    fnv1a64(&buf)
}
