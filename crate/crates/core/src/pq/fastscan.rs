/*

## blocked code layout

A block holds up to 32 codes of `m` nibbles each, stored subspace-major
so that one 16-byte row feeds a single byte-shuffle lookup:

byte      | 16j + 0         | 16j + 1         | ... | 16j + 15         |
bits 0..3 | code j, slot 0  | code j, slot 1  | ... | code j, slot 15  |
bits 4..7 | code j, slot 16 | code j, slot 17 | ... | code j, slot 31  |

A block is `m * 16` bytes. Slots past `len` hold zero nibbles and their
scores are ignored.

*/

use super::{adc_score_unchecked, Lut, PqCode, KSUB};

pub const BLOCK_SIZE: usize = 32;

const HALF: usize = BLOCK_SIZE / 2;

/// Borrowed view of one packed block.
#[derive(Debug, Clone, Copy)]
pub struct BlockView<'a> {
    m: usize,
    len: usize,
    bytes: &'a [u8],
}

impl<'a> BlockView<'a> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn nibble(&self, slot: usize, sub: usize) -> u8 {
        let b = self.bytes[sub * HALF + slot % HALF];
        if slot < HALF {
            b & 0x0f
        } else {
            b >> 4
        }
    }

    pub fn code(&self, slot: usize) -> PqCode {
        let mut c = PqCode::zeros(self.m);
        for j in 0..self.m {
            c.set(j, self.nibble(slot, j));
        }
        c
    }
}

/// A single owned block, mostly useful for tests and tooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeBlock {
    m: usize,
    len: usize,
    bytes: Vec<u8>,
}

impl CodeBlock {
    pub fn new(m: usize) -> Self {
        Self { m, len: 0, bytes: vec![0; m * HALF] }
    }

    /// Returns false when the block is already full.
    pub fn push(&mut self, code: &PqCode) -> bool {
        assert_eq!(code.m(), self.m, "code width does not match block");
        if self.len == BLOCK_SIZE {
            return false;
        }
        write_slot(&mut self.bytes, self.len, code);
        self.len += 1;
        true
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn view(&self) -> BlockView<'_> {
        BlockView { m: self.m, len: self.len, bytes: &self.bytes }
    }
}

fn write_slot(block: &mut [u8], slot: usize, code: &PqCode) {
    for j in 0..code.m() {
        let b = &mut block[j * HALF + slot % HALF];
        let v = code.get(j);
        if slot < HALF {
            *b = (*b & 0xf0) | v;
        } else {
            *b = (*b & 0x0f) | (v << 4);
        }
    }
}

/// Append-only sequence of codes stored as consecutive blocks in one
/// contiguous buffer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PackedCodes {
    m: usize,
    len: usize,
    bytes: Vec<u8>,
}

impl PackedCodes {
    pub fn new(m: usize) -> Self {
        Self { m, len: 0, bytes: Vec::new() }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn block_bytes(&self) -> usize {
        self.m * HALF
    }

    pub fn push(&mut self, code: &PqCode) {
        assert_eq!(code.m(), self.m, "code width does not match partition");
        let slot = self.len % BLOCK_SIZE;
        if slot == 0 {
            self.bytes.resize(self.bytes.len() + self.block_bytes(), 0);
        }
        let bb = self.block_bytes();
        let start = (self.len / BLOCK_SIZE) * bb;
        write_slot(&mut self.bytes[start..start + bb], slot, code);
        self.len += 1;
    }

    pub fn num_blocks(&self) -> usize {
        self.len.div_ceil(BLOCK_SIZE)
    }

    /// View of block `b`, limited to the first `limit` codes overall.
    pub fn block_prefix(&self, b: usize, limit: usize) -> BlockView<'_> {
        let bb = self.block_bytes();
        let first = b * BLOCK_SIZE;
        let len = limit.min(self.len).saturating_sub(first).min(BLOCK_SIZE);
        BlockView { m: self.m, len, bytes: &self.bytes[b * bb..(b + 1) * bb] }
    }

    pub fn block(&self, b: usize) -> BlockView<'_> {
        self.block_prefix(b, self.len)
    }

    pub fn get(&self, i: usize) -> PqCode {
        assert!(i < self.len);
        self.block(i / BLOCK_SIZE).code(i % BLOCK_SIZE)
    }

    pub fn iter(&self) -> impl Iterator<Item = PqCode> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    /// The raw block buffer, `num_blocks() * m * 16` bytes.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Rebuild from a buffer produced by [`PackedCodes::as_bytes`].
    pub fn from_raw(m: usize, len: usize, bytes: Vec<u8>) -> Option<Self> {
        let out = Self { m, len, bytes };
        (out.bytes.len() == out.num_blocks() * out.block_bytes()).then_some(out)
    }
}

/// Score all 32 slots of a block. Slots `>= block.len()` are unspecified.
///
/// Float tables accumulate per slot in subspace order, matching the scalar
/// ADC loop bit for bit. Quantized tables accumulate integers, so any
/// summation order is exact.
pub fn scan_block(block: BlockView<'_>, lut: &Lut) -> [f32; BLOCK_SIZE] {
    assert_eq!(block.m, lut.m(), "lookup table does not match code width");
    match lut.quantized() {
        Some(q) => {
            let acc = accumulate_u8(block, &q.table);
            let mut out = [0f32; BLOCK_SIZE];
            for (o, a) in out.iter_mut().zip(acc) {
                *o = q.dequantize_sum(a);
            }
            out
        }
        None => scan_float(block, lut.table()),
    }
}

fn scan_float(block: BlockView<'_>, table: &[f32]) -> [f32; BLOCK_SIZE] {
    let mut acc = [0f32; BLOCK_SIZE];
    let (lo, hi) = acc.split_at_mut(HALF);
    for j in 0..block.m {
        let row = &table[j * KSUB..(j + 1) * KSUB];
        let codes = &block.bytes[j * HALF..(j + 1) * HALF];
        for t in 0..HALF {
            let c = codes[t];
            lo[t] += row[(c & 0x0f) as usize];
            hi[t] += row[(c >> 4) as usize];
        }
    }
    acc
}

fn accumulate_u8(block: BlockView<'_>, table: &[u8]) -> [u32; BLOCK_SIZE] {
    #[cfg(target_arch = "x86_64")]
    {
        // u16 lanes hold at most 257 * 255
        if block.m <= 257 && std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: feature checked above; slices sized m * 16 by construction.
            return unsafe { avx2::accumulate(block.m, block.bytes, table) };
        }
    }
    accumulate_u8_scalar(block, table)
}

fn accumulate_u8_scalar(block: BlockView<'_>, table: &[u8]) -> [u32; BLOCK_SIZE] {
    let mut acc = [0u32; BLOCK_SIZE];
    for j in 0..block.m {
        let row = &table[j * KSUB..(j + 1) * KSUB];
        let codes = &block.bytes[j * HALF..(j + 1) * HALF];
        for t in 0..HALF {
            let c = codes[t];
            acc[t] += row[(c & 0x0f) as usize] as u32;
            acc[t + HALF] += row[(c >> 4) as usize] as u32;
        }
    }
    acc
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    use super::{BLOCK_SIZE, HALF};

    /// Two subspaces per iteration: the 128-bit lanes of one shuffle hold
    /// subspace `j` and `j + 1` respectively.
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn accumulate(m: usize, codes: &[u8], table: &[u8]) -> [u32; BLOCK_SIZE] {
        assert!(codes.len() >= m * HALF && table.len() >= m * HALF);
        let mask = _mm256_set1_epi8(0x0f);
        let mut acc_lo = _mm256_setzero_si256();
        let mut acc_hi = _mm256_setzero_si256();
        let mut j = 0;
        while j + 2 <= m {
            let c = _mm256_loadu_si256(codes.as_ptr().add(j * HALF).cast());
            let lut = _mm256_loadu_si256(table.as_ptr().add(j * HALF).cast());
            let clo = _mm256_and_si256(c, mask);
            let chi = _mm256_and_si256(_mm256_srli_epi16(c, 4), mask);
            let rlo = _mm256_shuffle_epi8(lut, clo);
            let rhi = _mm256_shuffle_epi8(lut, chi);
            acc_lo = _mm256_add_epi16(acc_lo, _mm256_cvtepu8_epi16(_mm256_castsi256_si128(rlo)));
            acc_lo = _mm256_add_epi16(acc_lo, _mm256_cvtepu8_epi16(_mm256_extracti128_si256(rlo, 1)));
            acc_hi = _mm256_add_epi16(acc_hi, _mm256_cvtepu8_epi16(_mm256_castsi256_si128(rhi)));
            acc_hi = _mm256_add_epi16(acc_hi, _mm256_cvtepu8_epi16(_mm256_extracti128_si256(rhi, 1)));
            j += 2;
        }
        if j < m {
            let c = _mm_loadu_si128(codes.as_ptr().add(j * HALF).cast());
            let lut = _mm_loadu_si128(table.as_ptr().add(j * HALF).cast());
            let mask = _mm_set1_epi8(0x0f);
            let clo = _mm_and_si128(c, mask);
            let chi = _mm_and_si128(_mm_srli_epi16(c, 4), mask);
            acc_lo = _mm256_add_epi16(acc_lo, _mm256_cvtepu8_epi16(_mm_shuffle_epi8(lut, clo)));
            acc_hi = _mm256_add_epi16(acc_hi, _mm256_cvtepu8_epi16(_mm_shuffle_epi8(lut, chi)));
        }
        let mut lo = [0u16; HALF];
        let mut hi = [0u16; HALF];
        _mm256_storeu_si256(lo.as_mut_ptr().cast(), acc_lo);
        _mm256_storeu_si256(hi.as_mut_ptr().cast(), acc_hi);
        let mut out = [0u32; BLOCK_SIZE];
        for t in 0..HALF {
            out[t] = lo[t] as u32;
            out[t + HALF] = hi[t] as u32;
        }
        out
    }
}

/// Scalar reference: one ADC call per code.
pub fn scan_block_scalar(block: BlockView<'_>, lut: &Lut) -> Vec<f32> {
    (0..block.len).map(|s| adc_score_unchecked(lut, &block.code(s))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pq::{adc_score, compute_lut, PqCodebook};
    use crate::vector::Metric;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_code(rng: &mut ChaCha8Rng, m: usize) -> PqCode {
        PqCode::from_indices(&(0..m).map(|_| rng.random_range(0..16u8)).collect::<Vec<_>>()).unwrap()
    }

    fn random_lut(rng: &mut ChaCha8Rng, m: usize, quantize: bool) -> Lut {
        let dsub = 2;
        let cb = PqCodebook::new(m, dsub, (0..m * KSUB * dsub).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let x: Vec<f32> = (0..m * dsub).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lut = compute_lut(&cb, &x, Metric::InnerProduct).unwrap();
        if quantize {
            lut.with_quantization()
        } else {
            lut
        }
    }

    #[test]
    fn single_code_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lut = random_lut(&mut rng, 6, false);
        let code = random_code(&mut rng, 6);
        let mut b = CodeBlock::new(6);
        b.push(&code);
        assert_eq!(scan_block(b.view(), &lut)[0], adc_score(&lut, &code).unwrap());
        assert_eq!(b.view().code(0), code);
    }

    #[test]
    fn full_block_of_identical_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lut = random_lut(&mut rng, 5, false);
        let code = random_code(&mut rng, 5);
        let mut b = CodeBlock::new(5);
        while b.push(&code) {}
        assert_eq!(b.len(), BLOCK_SIZE);
        let s = scan_block(b.view(), &lut);
        assert!(s.iter().all(|&v| v == s[0]));
    }

    #[test]
    fn packed_codes_preserve_append_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let codes: Vec<PqCode> = (0..100).map(|_| random_code(&mut rng, 7)).collect();
        let mut p = PackedCodes::new(7);
        for c in &codes {
            p.push(c);
        }
        assert_eq!(p.num_blocks(), 4);
        assert_eq!(p.iter().collect::<Vec<_>>(), codes);
        assert_eq!(p.block_prefix(3, 97).len(), 1);
        assert_eq!(p.block_prefix(2, 40).len(), 0);
    }

    fn check_equivalence(seed: u64, m: usize, fill: usize, quantize: bool) -> Result<(), TestCaseError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lut = random_lut(&mut rng, m, quantize);
        let mut b = CodeBlock::new(m);
        for _ in 0..fill {
            b.push(&random_code(&mut rng, m));
        }
        let fast = scan_block(b.view(), &lut);
        let scalar = scan_block_scalar(b.view(), &lut);
        for s in 0..fill {
            prop_assert_eq!(fast[s].to_bits(), scalar[s].to_bits(), "slot {}", s);
        }
        if quantize {
            let portable = accumulate_u8_scalar(b.view(), &lut.quantized().unwrap().table);
            prop_assert_eq!(accumulate_u8(b.view(), &lut.quantized().unwrap().table), portable);
        }
        Ok(())
    }

    #[test]
    fn every_fill_level_matches_scalar() {
        for fill in 1..=BLOCK_SIZE {
            for m in [1, 2, 3, 8, 17] {
                check_equivalence(fill as u64 * 31 + m as u64, m, fill, false).unwrap();
                check_equivalence(fill as u64 * 37 + m as u64, m, fill, true).unwrap();
            }
        }
    }

    proptest! {
        #[test]
        fn blocked_scan_equals_scalar(seed in 0u64..100_000, m in 1usize..40, fill in 1usize..=32, q in any::<bool>()) {
            check_equivalence(seed, m, fill, q)?;
        }
    }
}
