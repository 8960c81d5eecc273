//! Parameter checksums, used to verify that frozen components stay frozen
//! and that two training runs produced identical weights.

use sha2::{Digest, Sha256};

use super::layers::Sequential;

/// SHA-256 over the exact bit patterns of every parameter in visit order.
pub fn params_checksum(net: &Sequential) -> [u8; 32] {
    let mut hasher = Sha256::new();
    net.visit_params_ref(&mut |p| {
        for &v in p.value.iter() {
            hasher.update(v.to_le_bytes());
        }
    });
    hasher.finalize().into()
}

/// Combine several component checksums into one.
pub fn combine(checksums: &[[u8; 32]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for c in checksums {
        hasher.update(c);
    }
    hasher.finalize().into()
}

pub fn hex(sum: &[u8; 32]) -> String {
    sum.iter().map(|b| format!("{b:02x}")).collect()
}
