//! Circuit files: a JSON header and the edge bits as a hex string.
//!
//! Bit `i` of the vector is bit `i % 8` (least significant first) of byte
//! `i / 8`.

use std::path::Path;

use cud_core::circuits::{AttributionMethod, Circuit, GraphRef, Metric, Provenance};
use cud_core::data::PatchStrategy;
use serde::{Deserialize, Serialize};

use super::{read_json, write_json};
use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitHeader {
    /// Graph fingerprint, 16 hex digits.
    pub graph_hash: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub edge_count: usize,
    pub k: usize,
    pub method: AttributionMethod,
    pub ig_steps: usize,
    pub metric: Metric,
    pub strategy: PatchStrategy,
    pub sample_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitFile {
    pub header: CircuitHeader,
    pub bits: String,
}

pub fn pack_bits(bits: &[bool]) -> String {
    let mut bytes = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    hex::encode(bytes)
}

pub fn unpack_bits(text: &str, len: usize) -> Option<Vec<bool>> {
    let bytes = hex::decode(text).ok()?;
    if bytes.len() != len.div_ceil(8) {
        return None;
    }
    let bits: Vec<bool> = (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
    // Padding bits past `len` must be clear.
    let padding_clear = (len..bytes.len() * 8).all(|i| bytes[i / 8] >> (i % 8) & 1 == 0);
    padding_clear.then_some(bits)
}

pub fn to_file(c: &Circuit) -> CircuitFile {
    CircuitFile {
        header: CircuitHeader {
            graph_hash: format!("{:016x}", c.graph.fingerprint),
            n_layers: c.graph.n_layers,
            n_heads: c.graph.n_heads,
            edge_count: c.bits.len(),
            k: c.k,
            method: c.provenance.method,
            ig_steps: c.provenance.ig_steps,
            metric: c.provenance.metric,
            strategy: c.provenance.strategy,
            sample_id: c.provenance.sample_id,
        },
        bits: pack_bits(&c.bits),
    }
}

pub fn from_file(f: &CircuitFile, path: &Path) -> AppResult<Circuit> {
    let bad = |reason: &str| AppError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let h = &f.header;
    let fingerprint = u64::from_str_radix(&h.graph_hash, 16).map_err(|_| bad("graph_hash is not hex"))?;
    let graph = GraphRef {
        n_layers: h.n_layers,
        n_heads: h.n_heads,
        fingerprint,
    };
    let expected = graph.graph();
    if expected.fingerprint() != fingerprint || expected.edge_count() != h.edge_count {
        return Err(bad("graph hash does not match the declared shape"));
    }
    let bits = unpack_bits(&f.bits, h.edge_count).ok_or_else(|| bad("bit vector does not match edge_count"))?;
    let c = Circuit::from_bits(
        graph,
        bits,
        Provenance {
            method: h.method,
            ig_steps: h.ig_steps,
            strategy: h.strategy,
            metric: h.metric,
            sample_id: h.sample_id,
        },
    );
    if c.k != h.k {
        return Err(bad("popcount differs from k"));
    }
    Ok(c)
}

pub fn save(path: &Path, c: &Circuit) -> AppResult<()> {
    write_json(path, &to_file(c))
}

pub fn load(path: &Path) -> AppResult<Circuit> {
    let f: CircuitFile = read_json(path)?;
    from_file(&f, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_order_is_lsb_first() {
        let mut bits = vec![false; 10];
        bits[0] = true;
        bits[9] = true;
        assert_eq!(pack_bits(&bits), "0102");
        assert_eq!(unpack_bits("0102", 10).unwrap(), bits);
        assert_eq!(unpack_bits("0106", 10), None, "padding bit set");
        assert_eq!(unpack_bits("01", 10), None);
        assert_eq!(unpack_bits("zz02", 10), None);
    }
}
