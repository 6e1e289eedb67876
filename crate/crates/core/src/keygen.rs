//! Array readout and output stabilization: golden bit planes and
//! fixed-length keys that skip masked cells and substitute healed values.

use crate::asch::StabilizationMap;
use crate::bits::BitGrid;
use crate::puf_cell::{evaluate_bit, stream, CellConfig, ChipModel, Environment};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum KeygenError {
    #[error("requested {requested} key bits but only {available} unmasked cells")]
    KeyTooLong { requested: u32, available: u32 },
    #[error("plane/map dimensions disagree")]
    DimensionMismatch,
}

/// One full-array readout under fixed conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct BitPlane {
    pub bits: BitGrid,
    pub config: CellConfig,
    pub env: Environment,
    /// Evaluations averaged per bit.
    pub n_avg: u32,
}

/// An ordered key bit sequence with its originating run identifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Key {
    bits: BitGrid,
    provenance: String,
}

impl Key {
    pub fn from_bits(bits: Vec<bool>, provenance: impl Into<String>) -> Key {
        let mut grid = BitGrid::new(1, bits.len() as u32);
        for (i, b) in bits.iter().enumerate() {
            grid.set(i, *b);
        }
        Key { bits: grid, provenance: provenance.into() }
    }

    pub fn len(&self) -> u32 {
        self.bits.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bit(&self, idx: usize) -> bool {
        self.bits.get(idx)
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.bits.iter()
    }

    /// Packed bytes, MSB-first within each byte; the last byte is padded
    /// with zeros in its low bits when the length is not a multiple of 8.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.bits.len();
        let mut out = vec![0u8; n.div_ceil(8)];
        for i in 0..n {
            if self.bits.get(i) {
                out[i / 8] |= 1 << (7 - (i % 8));
            }
        }
        out
    }

    /// Rebuilds a key from its MSB-first byte packing.
    pub fn from_bytes(bytes: &[u8], bit_len: u32, provenance: impl Into<String>) -> Option<Key> {
        if bytes.len() != (bit_len as usize).div_ceil(8) {
            return None;
        }
        let mut grid = BitGrid::new(1, bit_len);
        for i in 0..bit_len as usize {
            let set = (bytes[i / 8] >> (7 - (i % 8))) & 1 == 1;
            if set {
                grid.set(i, true);
            }
        }
        // padding bits must be zero
        let tail = bit_len as usize % 8;
        if tail != 0 {
            let last = bytes[bytes.len() - 1];
            if last & ((1u8 << (8 - tail)) - 1) != 0 {
                return None;
            }
        }
        Some(Key { bits: grid, provenance: provenance.into() })
    }

    /// Lowercase hex of the MSB-first packing.
    pub fn to_hex(&self) -> String {
        self.to_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hamming_distance(&self, other: &Key) -> Option<u32> {
        if self.len() != other.len() {
            return None;
        }
        let mut d = 0;
        for i in 0..self.bits.len() {
            if self.bits.get(i) != other.bits.get(i) {
                d += 1;
            }
        }
        Some(d)
    }
}

/// Reads the whole array with `n_avg`-fold noise averaging: each bit is
/// the majority over `n_avg` evaluations at zero skew.
pub fn golden_plane(
    chip: &ChipModel,
    config: CellConfig,
    env: Environment,
    n_avg: u32,
    run_seed: u64,
) -> BitPlane {
    assert!(n_avg % 2 == 1, "n_avg must be odd so the majority is well-defined");
    let model = &chip.model;
    let sub = match config {
        CellConfig::Original => 0,
        CellConfig::Healed => 1,
    };
    let mut bits = BitGrid::new(chip.rows, chip.cols);
    for idx in 0..chip.array_size() {
        let mut rng = chip.session_rng(idx, stream::label(run_seed, stream::PH_GOLDEN, sub));
        let mut ones = 0u32;
        for _ in 0..n_avg {
            if evaluate_bit(chip.cell(idx), config, model, env, 0.0, &mut rng) {
                ones += 1;
            }
        }
        if 2 * ones > n_avg {
            bits.set(idx, true);
        }
    }
    BitPlane { bits, config, env, n_avg }
}

/// Output stabilization: scans cells in row-major order, skips masked
/// cells, substitutes the healed value for healed cells, and stops after
/// `key_len` bits.
pub fn stabilize_readout(
    orig_bits: &BitPlane,
    healed_bits: &BitPlane,
    map: &StabilizationMap,
    key_len: u32,
) -> Result<Key, KeygenError> {
    if !orig_bits.bits.same_dims(&healed_bits.bits) || orig_bits.bits.len() != map.array_size() {
        return Err(KeygenError::DimensionMismatch);
    }
    let available = map.unmasked_count() as u32;
    if key_len > available {
        return Err(KeygenError::KeyTooLong { requested: key_len, available });
    }
    let mut bits = Vec::with_capacity(key_len as usize);
    for idx in 0..map.array_size() {
        if bits.len() as u32 == key_len {
            break;
        }
        if map.mask.get(idx) {
            continue;
        }
        let bit = if map.heal.get(idx) {
            healed_bits.bits.get(idx)
        } else {
            orig_bits.bits.get(idx)
        };
        bits.push(bit);
    }
    Ok(Key::from_bits(bits, "stabilized-readout"))
}

/// Single-shot key generation at the given environment: evaluates each
/// needed cell once, at zero skew, in the configuration the map dictates.
pub fn generate_key(
    chip: &ChipModel,
    map: &StabilizationMap,
    env: Environment,
    key_len: u32,
    run_seed: u64,
) -> Result<Key, KeygenError> {
    if map.array_size() != chip.array_size() {
        return Err(KeygenError::DimensionMismatch);
    }
    let available = map.unmasked_count() as u32;
    if key_len > available {
        return Err(KeygenError::KeyTooLong { requested: key_len, available });
    }
    let model = &chip.model;
    let mut bits = Vec::with_capacity(key_len as usize);
    for idx in 0..map.array_size() {
        if bits.len() as u32 == key_len {
            break;
        }
        if map.mask.get(idx) {
            continue;
        }
        let config = if map.heal.get(idx) { CellConfig::Healed } else { CellConfig::Original };
        let mut rng = chip.session_rng(idx, stream::label(run_seed, stream::PH_KEYGEN, 0));
        bits.push(evaluate_bit(chip.cell(idx), config, model, env, 0.0, &mut rng));
    }
    Ok(Key::from_bits(bits, format!("keygen:{}", chip.chip_id)))
}
