//! Packed bit grids used for PUF planes, dark/heal/mask bitmaps, and keys.

/// A fixed-size grid of bits in row-major order, packed into `u64` words.
///
/// Bit `i` (with `i = row * cols + col`) lives in word `i / 64` at bit
/// position `i % 64`. Byte serialization is row-major, LSB-first within
/// each byte, which is the canonical on-wire layout for all bitmaps.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitGrid {
    rows: u32,
    cols: u32,
    words: Vec<u64>,
}

impl BitGrid {
    pub fn new(rows: u32, cols: u32) -> Self {
        let n = rows as usize * cols as usize;
        BitGrid {
            rows,
            cols,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    /// Total number of bits.
    pub fn len(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_dims(&self, other: &BitGrid) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    #[inline]
    pub fn get(&self, idx: usize) -> bool {
        debug_assert!(idx < self.len());
        (self.words[idx / 64] >> (idx % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, idx: usize, value: bool) {
        debug_assert!(idx < self.len());
        let w = &mut self.words[idx / 64];
        if value {
            *w |= 1 << (idx % 64);
        } else {
            *w &= !(1 << (idx % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Iterator over all bits in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Indices of set bits.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.get(i))
    }

    /// `self & other`, dimensions must match.
    pub fn and(&self, other: &BitGrid) -> BitGrid {
        assert!(self.same_dims(other), "bitgrid dimension mismatch");
        let words = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| a & b)
            .collect();
        BitGrid { rows: self.rows, cols: self.cols, words }
    }

    /// `self & !other` (set difference), dimensions must match.
    pub fn and_not(&self, other: &BitGrid) -> BitGrid {
        assert!(self.same_dims(other), "bitgrid dimension mismatch");
        let mut words: Vec<u64> = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| a & !b)
            .collect();
        Self::mask_tail(self.len(), &mut words);
        BitGrid { rows: self.rows, cols: self.cols, words }
    }

    /// `self | other`, dimensions must match.
    pub fn or(&self, other: &BitGrid) -> BitGrid {
        assert!(self.same_dims(other), "bitgrid dimension mismatch");
        let words = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| a | b)
            .collect();
        BitGrid { rows: self.rows, cols: self.cols, words }
    }

    /// True if every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BitGrid) -> bool {
        assert!(self.same_dims(other), "bitgrid dimension mismatch");
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn intersects(&self, other: &BitGrid) -> bool {
        assert!(self.same_dims(other), "bitgrid dimension mismatch");
        self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0)
    }

    fn mask_tail(len: usize, words: &mut [u64]) {
        let tail = len % 64;
        if tail != 0 {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
    }

    /// Row-major bytes, LSB-first within each byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let nbytes = self.len().div_ceil(8);
        let mut out = vec![0u8; nbytes];
        for (i, byte) in out.iter_mut().enumerate() {
            for bit in 0..8 {
                let idx = i * 8 + bit;
                if idx < self.len() && self.get(idx) {
                    *byte |= 1 << bit;
                }
            }
        }
        out
    }

    /// Inverse of [`BitGrid::to_bytes`]. Trailing pad bits must be zero.
    pub fn from_bytes(rows: u32, cols: u32, bytes: &[u8]) -> Option<BitGrid> {
        let n = rows as usize * cols as usize;
        if bytes.len() != n.div_ceil(8) {
            return None;
        }
        let mut grid = BitGrid::new(rows, cols);
        for (i, &byte) in bytes.iter().enumerate() {
            for bit in 0..8 {
                let idx = i * 8 + bit;
                let set = (byte >> bit) & 1 == 1;
                if idx < n {
                    if set {
                        grid.set(idx, true);
                    }
                } else if set {
                    return None; // nonzero padding
                }
            }
        }
        Some(grid)
    }
}

impl std::fmt::Debug for BitGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BitGrid({}x{}, {} set)",
            self.rows,
            self.cols,
            self.count_ones()
        )
    }
}
