//! Outlier-oriented on-die ECC for INT8 weight pages.
//!
//! The top 1% of a page by magnitude is recorded in the spare area: a
//! threshold (the smallest protected magnitude) stored as 9 copies, then one
//! entry per outlier with its Hamming-protected address and `N` copies of the
//! value. Decoding votes each protected value against its copies and zeroes
//! any other value whose magnitude exceeds the threshold.
//!
//! Packed layout, MSB first, zero-padded to a whole byte:
//! `threshold x 9 (8 bits each)`, then per entry in address order
//! `address (14) | parity (5) | copy_1 (8) | ... | copy_N (8)`.

pub mod analysis;
pub mod hamming;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use thiserror::Error;

pub use analysis::{
    evaluate_end_to_end, flip_rate_protected, monte_carlo_flip_rate, EndToEndReport, FlipRateMode, MonteCarloReport,
};
pub use hamming::{hamming14_decode, hamming14_encode, HammingStatus};

pub const THRESHOLD_COPIES: usize = 9;
pub const DEFAULT_COPIES: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum EccError {
    #[error("copy count must be even and at least 2, got {0}")]
    OddCopies(usize),
    #[error("bit error rate {0} outside [0, 1]")]
    BitErrorRate(f64),
    #[error("page of {0} elements cannot be addressed with 14 bits")]
    PageTooLarge(usize),
    #[error("packed block is {got} bytes, expected {expected}")]
    Length { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EccEntry {
    pub address: u16,
    pub parity: u8,
    pub copies: [i8; 8],
}

impl EccEntry {
    pub fn copies(&self, n: usize) -> &[i8] {
        &self.copies[..n]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EccBlock {
    pub threshold: [u8; THRESHOLD_COPIES],
    pub entries: Vec<EccEntry>,
    pub n_copies: usize,
}

/// Number of protected outliers for a page of `elements` values.
pub fn outlier_count(elements: usize) -> usize {
    elements / 100
}

pub fn packed_bits(entries: usize, n_copies: usize) -> usize {
    8 * THRESHOLD_COPIES + entries * (hamming::CODE_BITS as usize + 8 * n_copies)
}

pub fn packed_bytes(entries: usize, n_copies: usize) -> usize {
    packed_bits(entries, n_copies).div_ceil(8)
}

fn check_copies(n: usize) -> Result<(), EccError> {
    if n < 2 || !n.is_multiple_of(2) || n > 8 {
        Err(EccError::OddCopies(n))
    } else {
        Ok(())
    }
}

fn magnitude(v: i8) -> u8 {
    v.unsigned_abs()
}

/// Protected addresses by decreasing magnitude, lower address first on ties.
pub fn outlier_ranking(page: &[i8]) -> Vec<u16> {
    let mut order: Vec<u16> = (0..page.len() as u16).collect();
    // Stable sort keeps lower addresses first among equal magnitudes.
    order.sort_by_key(|&a| std::cmp::Reverse(magnitude(page[a as usize])));
    order.truncate(outlier_count(page.len()));
    order
}

pub fn encode_page(page: &[i8]) -> EccBlock {
    encode_page_with(page, DEFAULT_COPIES).expect("default copy count is valid")
}

pub fn encode_page_with(page: &[i8], n_copies: usize) -> Result<EccBlock, EccError> {
    check_copies(n_copies)?;
    if page.len() > 1 << hamming::ADDR_BITS {
        return Err(EccError::PageTooLarge(page.len()));
    }
    let mut chosen = outlier_ranking(page);
    let threshold = chosen.iter().map(|&a| magnitude(page[a as usize])).min().unwrap_or(0);
    chosen.sort_unstable();
    let entries = chosen
        .into_iter()
        .map(|a| {
            let mut copies = [0i8; 8];
            copies[..n_copies].fill(page[a as usize]);
            EccEntry {
                address: a,
                parity: hamming14_encode(a),
                copies,
            }
        })
        .collect();
    Ok(EccBlock {
        threshold: [threshold; THRESHOLD_COPIES],
        entries,
        n_copies,
    })
}

struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    fn put(&mut self, value: u32, width: u32) {
        for i in (0..width).rev() {
            if self.bit.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if value >> i & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 0x80 >> (self.bit % 8);
            }
            self.bit += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl BitReader<'_> {
    fn get(&mut self, width: u32) -> u32 {
        let mut v = 0;
        for _ in 0..width {
            let b = self.bytes[self.bit / 8] >> (7 - self.bit % 8) & 1;
            v = v << 1 | u32::from(b);
            self.bit += 1;
        }
        v
    }
}

impl EccBlock {
    pub fn packed_len(&self) -> usize {
        packed_bytes(self.entries.len(), self.n_copies)
    }

    pub fn pack(&self) -> Vec<u8> {
        let mut w = BitWriter {
            bytes: Vec::with_capacity(self.packed_len()),
            bit: 0,
        };
        for t in self.threshold {
            w.put(u32::from(t), 8);
        }
        for e in &self.entries {
            w.put(u32::from(e.address), hamming::ADDR_BITS);
            w.put(u32::from(e.parity), hamming::PARITY_BITS);
            for &c in e.copies(self.n_copies) {
                w.put(u32::from(c as u8), 8);
            }
        }
        w.bytes
    }

    pub fn unpack(bytes: &[u8], entries: usize, n_copies: usize) -> Result<Self, EccError> {
        check_copies(n_copies)?;
        let expected = packed_bytes(entries, n_copies);
        if bytes.len() != expected {
            return Err(EccError::Length {
                got: bytes.len(),
                expected,
            });
        }
        let mut r = BitReader { bytes, bit: 0 };
        let mut threshold = [0u8; THRESHOLD_COPIES];
        for t in &mut threshold {
            *t = r.get(8) as u8;
        }
        let entries = (0..entries)
            .map(|_| {
                let address = r.get(hamming::ADDR_BITS) as u16;
                let parity = r.get(hamming::PARITY_BITS) as u8;
                let mut copies = [0i8; 8];
                for c in copies.iter_mut().take(n_copies) {
                    *c = r.get(8) as u8 as i8;
                }
                EccEntry {
                    address,
                    parity,
                    copies,
                }
            })
            .collect();
        Ok(EccBlock {
            threshold,
            entries,
            n_copies,
        })
    }
}

/// Bitwise majority over an odd number of bytes.
pub fn majority(values: &[u8]) -> u8 {
    let need = values.len() / 2 + 1;
    (0..8).fold(0u8, |acc, b| {
        let ones = values.iter().filter(|&&v| v >> b & 1 == 1).count();
        if ones >= need {
            acc | 1 << b
        } else {
            acc
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorModel {
    pub bit_error_rate: f64,
    pub seed: u64,
}

impl ErrorModel {
    pub fn new(bit_error_rate: f64, seed: u64) -> Result<Self, EccError> {
        if !(0.0..=1.0).contains(&bit_error_rate) {
            return Err(EccError::BitErrorRate(bit_error_rate));
        }
        Ok(Self { bit_error_rate, seed })
    }
}

/// Flips each bit of `bufs`, taken as one concatenated bit stream, with
/// probability `x`. Returns the number of flipped bits.
pub fn flip_bits<R: Rng>(bufs: &mut [&mut [u8]], x: f64, rng: &mut R) -> u64 {
    let total: u64 = bufs.iter().map(|b| b.len() as u64 * 8).sum();
    if x <= 0.0 || total == 0 {
        return 0;
    }
    let flip_at = |pos: u64, bufs: &mut [&mut [u8]]| {
        let mut p = pos;
        for b in bufs.iter_mut() {
            let bits = b.len() as u64 * 8;
            if p < bits {
                b[(p / 8) as usize] ^= 0x80 >> (p % 8);
                return;
            }
            p -= bits;
        }
    };
    let mut flipped = 0;
    if x >= 1.0 {
        for pos in 0..total {
            flip_at(pos, bufs);
        }
        return total;
    }
    let gap = Geometric::new(x).expect("0 < x < 1");
    let mut pos = gap.sample(rng);
    while pos < total {
        flip_at(pos, bufs);
        flipped += 1;
        pos = pos.saturating_add(1).saturating_add(gap.sample(rng));
    }
    flipped
}

/// Independently flips every bit of the page and the packed ECC bytes.
pub fn inject_errors(page: &[i8], ecc: &[u8], model: &ErrorModel) -> (Vec<i8>, Vec<u8>, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    inject_errors_with(page, ecc, model.bit_error_rate, &mut rng)
}

pub fn inject_errors_with<R: Rng>(page: &[i8], ecc: &[u8], x: f64, rng: &mut R) -> (Vec<i8>, Vec<u8>, u64) {
    let mut data: Vec<u8> = page.iter().map(|&v| v as u8).collect();
    let mut spare = ecc.to_vec();
    let n = flip_bits(&mut [&mut data, &mut spare], x, rng);
    (data.into_iter().map(|b| b as i8).collect(), spare, n)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOutcome {
    pub page: Vec<i8>,
    pub threshold: u8,
    /// Addresses restored from ECC entries, in entry order.
    pub protected: Vec<u16>,
    pub corrected_addresses: usize,
    pub dropped_entries: usize,
    pub truncated: usize,
}

pub fn decode_page(page: &[i8], ecc: &EccBlock) -> Vec<i8> {
    decode_page_detailed(page, ecc).page
}

pub fn decode_page_detailed(page: &[i8], ecc: &EccBlock) -> DecodeOutcome {
    let threshold = majority(&ecc.threshold);
    let mut out = page.to_vec();
    let mut is_protected = vec![false; page.len()];
    let mut protected = Vec::with_capacity(ecc.entries.len());
    let mut corrected_addresses = 0;
    let mut dropped_entries = 0;
    let mut votes = [0u8; 9];
    for e in &ecc.entries {
        let (addr, status) = hamming14_decode(e.address, e.parity);
        match status {
            HammingStatus::Uncorrectable => {
                dropped_entries += 1;
                continue;
            }
            HammingStatus::Corrected => corrected_addresses += 1,
            HammingStatus::Clean => {}
        }
        let a = addr as usize;
        if a >= page.len() {
            dropped_entries += 1;
            continue;
        }
        let n = ecc.n_copies;
        for (v, &c) in votes.iter_mut().zip(e.copies(n)) {
            *v = c as u8;
        }
        votes[n] = page[a] as u8;
        out[a] = majority(&votes[..=n]) as i8;
        is_protected[a] = true;
        protected.push(addr);
    }
    let mut truncated = 0;
    for (v, &p) in out.iter_mut().zip(&is_protected) {
        if !p && magnitude(*v) > threshold {
            *v = 0;
            truncated += 1;
        }
    }
    DecodeOutcome {
        page: out,
        threshold,
        protected,
        corrected_addresses,
        dropped_entries,
        truncated,
    }
}

/// Raw dump of a page followed by its packed ECC block.
pub fn dump_raw(page: &[i8], ecc: &EccBlock) -> Vec<u8> {
    let mut v: Vec<u8> = page.iter().map(|&b| b as u8).collect();
    v.extend(ecc.pack());
    v
}

pub fn restore_raw(bytes: &[u8], elements: usize, n_copies: usize) -> Result<(Vec<i8>, EccBlock), EccError> {
    let expected = elements + packed_bytes(outlier_count(elements), n_copies);
    if bytes.len() != expected {
        return Err(EccError::Length {
            got: bytes.len(),
            expected,
        });
    }
    let page = bytes[..elements].iter().map(|&b| b as i8).collect();
    let ecc = EccBlock::unpack(&bytes[elements..], outlier_count(elements), n_copies)?;
    Ok((page, ecc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_page(seed: u64) -> Vec<i8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..16384).map(|_| rng.random::<i8>()).collect()
    }

    #[test]
    fn zero_page() {
        let page = vec![0i8; 16384];
        let e = encode_page(&page);
        assert_eq!(e.threshold, [0; 9]);
        assert_eq!(e.entries.len(), 163);
        let addrs: Vec<u16> = e.entries.iter().map(|e| e.address).collect();
        assert_eq!(addrs, (0..163).collect::<Vec<u16>>());
    }

    #[test]
    fn single_outlier_first() {
        let mut page = vec![0i8; 16384];
        page[5] = 127;
        assert_eq!(outlier_ranking(&page)[0], 5);
        let e = encode_page(&page);
        assert_eq!(e.threshold, [0; 9]);
        let entry = e.entries.iter().find(|x| x.address == 5).unwrap();
        assert_eq!(entry.copies(2), &[127, 127]);
    }

    #[test]
    fn packed_size() {
        let e = encode_page(&random_page(1));
        assert_eq!(packed_bits(163, 2), 5777);
        assert_eq!(e.pack().len(), 723);
        assert_eq!(EccBlock::unpack(&e.pack(), 163, 2).unwrap(), e);
    }

    #[test]
    fn roundtrip_without_errors() {
        let page = random_page(2);
        let e = encode_page(&page);
        let (p, s, n) = inject_errors(&page, &e.pack(), &ErrorModel::new(0.0, 9).unwrap());
        assert_eq!(n, 0);
        let e2 = EccBlock::unpack(&s, 163, 2).unwrap();
        assert_eq!(decode_page(&p, &e2), page);
    }

    #[test]
    fn inject_extremes() {
        let page = random_page(3);
        let ecc = vec![0xa5u8; 10];
        let (p, s, n) = inject_errors(&page, &ecc, &ErrorModel::new(1.0, 0).unwrap());
        assert_eq!(n, (16384 + 10) * 8);
        assert!(p.iter().zip(&page).all(|(a, b)| *a == !*b));
        assert!(s.iter().all(|&b| b == 0x5a));
        let m = ErrorModel::new(0.3, 77).unwrap();
        assert_eq!(inject_errors(&page, &ecc, &m), inject_errors(&page, &ecc, &m));
        assert!(ErrorModel::new(1.5, 0).is_err());
    }

    #[test]
    fn vote_example() {
        assert_eq!(majority(&[0b0110_0000, 0b0100_0000, 0b0100_0000]), 0b0100_0000);
    }

    #[test]
    fn truncates_unprotected_above_threshold() {
        let page = random_page(4);
        let e = encode_page(&page);
        let t = e.threshold[0];
        let mut corrupted = page.clone();
        let victim = (0..page.len())
            .find(|&i| !e.entries.iter().any(|x| x.address as usize == i))
            .unwrap();
        corrupted[victim] = if t < 127 { 127 } else { -128 };
        let out = decode_page(&corrupted, &e);
        assert_eq!(out[victim], 0);
    }

    #[test]
    fn raw_dump_roundtrip() {
        let page = random_page(5);
        let e = encode_page(&page);
        let raw = dump_raw(&page, &e);
        assert_eq!(restore_raw(&raw, 16384, 2).unwrap(), (page, e));
        assert!(restore_raw(&raw[1..], 16384, 2).is_err());
    }

    #[test]
    fn odd_copies_rejected() {
        assert_eq!(encode_page_with(&[0; 100], 3), Err(EccError::OddCopies(3)));
    }
}
