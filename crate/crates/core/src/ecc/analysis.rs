//! Analytic and Monte Carlo protection rates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{decode_page_detailed, encode_page_with, flip_bits, inject_errors_with, majority, EccBlock, EccError};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlipRateMode {
    Exact,
    Approx,
}

fn binomial(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Probability that a protected bit is wrong after voting `n` copies against
/// the page value, each flipped independently with probability `x`.
pub fn flip_rate_protected(n: usize, x: f64, mode: FlipRateMode) -> Result<f64, EccError> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(EccError::OddCopies(n));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(EccError::BitErrorRate(x));
    }
    let voters = n as u64 + 1;
    let need = n as u64 / 2 + 1;
    Ok(match mode {
        FlipRateMode::Approx => binomial(voters, need) * x.powi(need as i32),
        FlipRateMode::Exact => (need..=voters)
            .map(|i| binomial(voters, i) * x.powi(i as i32) * (1.0 - x).powi((voters - i) as i32))
            .sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub values: u64,
    pub bit_trials: u64,
    pub wrong_bits: u64,
    pub rate: f64,
    pub std_err: f64,
}

const CHUNK: u64 = 1 << 16;

fn chunk_rng(seed: u64, chunk: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk);
    rng
}

/// Votes `values` protected 8-bit values, each stored as `n` copies plus the
/// page value, with every stored bit flipped with probability `x`, and
/// measures the per-bit post-vote error rate. Deterministic for a given seed
/// regardless of thread count.
pub fn monte_carlo_flip_rate(n: usize, x: f64, values: u64, seed: u64) -> Result<MonteCarloReport, EccError> {
    flip_rate_protected(n, x, FlipRateMode::Exact)?;
    let chunks = values.div_ceil(CHUNK);
    let voters = n + 1;
    let wrong: u64 = par::map_range(chunks as usize, |c| {
        let c = c as u64;
        let len = CHUNK.min(values - c * CHUNK) as usize;
        let mut rng = chunk_rng(seed, c);
        // Error masks only: a bit is wrong after voting iff most voters flipped it.
        let mut masks = vec![0u8; len * voters];
        flip_bits(&mut [&mut masks], x, &mut rng);
        masks
            .chunks_exact(voters)
            .map(|m| u64::from(majority(m).count_ones()))
            .sum::<u64>()
    })
    .into_iter()
    .sum();
    let bit_trials = values * 8;
    let rate = wrong as f64 / bit_trials as f64;
    Ok(MonteCarloReport {
        values,
        bit_trials,
        wrong_bits: wrong,
        rate,
        std_err: (rate * (1.0 - rate) / bit_trials as f64).sqrt(),
    })
}

/// A synthetic INT8 weight page: a clipped Gaussian body with a sparse
/// heavy tail.
pub fn synthetic_weight_page<R: Rng>(rng: &mut R, elements: usize) -> Vec<i8> {
    let body = Normal::new(0.0, 12.0).expect("valid sigma");
    (0..elements)
        .map(|_| {
            if rng.random_bool(0.005) {
                let m: i16 = rng.random_range(64..=127);
                if rng.random_bool(0.5) {
                    -m as i8
                } else {
                    m as i8
                }
            } else {
                let v: f64 = body.sample(rng);
                v.round().clamp(-127.0, 127.0) as i8
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EndToEndReport {
    pub pages: u64,
    pub injected_flips: u64,
    pub protected_values: u64,
    pub protected_wrong_bits: u64,
    pub protected_wrong_values: u64,
    /// Per-bit error rate over protected positions after decoding.
    pub protected_flip_rate: f64,
    pub dropped_entries: u64,
    pub corrected_addresses: u64,
    /// Decoded values outside restored entries whose magnitude exceeds the
    /// recovered threshold.
    pub threshold_violations: u64,
    pub max_packed_bytes: usize,
}

struct PageStats {
    flips: u64,
    protected: u64,
    wrong_bits: u64,
    wrong_values: u64,
    dropped: u64,
    corrected: u64,
    violations: u64,
    packed: usize,
}

/// Encodes, corrupts and decodes `pages` synthetic pages at bit error rate `x`.
pub fn evaluate_end_to_end(
    pages: u64,
    elements: usize,
    n_copies: usize,
    x: f64,
    seed: u64,
) -> Result<EndToEndReport, EccError> {
    encode_page_with(&[], n_copies)?;
    if !(0.0..=1.0).contains(&x) {
        return Err(EccError::BitErrorRate(x));
    }
    let stats = par::map_range(pages as usize, |i| {
        let mut rng = chunk_rng(seed, i as u64);
        let page = synthetic_weight_page(&mut rng, elements);
        let ecc = encode_page_with(&page, n_copies).expect("validated");
        let packed = ecc.pack();
        let (bad_page, bad_spare, flips) = inject_errors_with(&page, &packed, x, &mut rng);
        let bad_ecc = EccBlock::unpack(&bad_spare, ecc.entries.len(), n_copies).expect("same size");
        let out = decode_page_detailed(&bad_page, &bad_ecc);
        let mut wrong_bits = 0;
        let mut wrong_values = 0;
        for e in &ecc.entries {
            let a = e.address as usize;
            let d = (out.page[a] as u8 ^ page[a] as u8).count_ones();
            wrong_bits += u64::from(d);
            wrong_values += u64::from(d > 0);
        }
        let mut restored = vec![false; elements];
        for &a in &out.protected {
            restored[a as usize] = true;
        }
        let violations = out
            .page
            .iter()
            .zip(&restored)
            .filter(|(v, r)| !**r && v.unsigned_abs() > out.threshold)
            .count() as u64;
        PageStats {
            flips,
            protected: ecc.entries.len() as u64,
            wrong_bits,
            wrong_values,
            dropped: out.dropped_entries as u64,
            corrected: out.corrected_addresses as u64,
            violations,
            packed: packed.len(),
        }
    });
    let mut r = EndToEndReport {
        pages,
        ..Default::default()
    };
    for s in stats {
        r.injected_flips += s.flips;
        r.protected_values += s.protected;
        r.protected_wrong_bits += s.wrong_bits;
        r.protected_wrong_values += s.wrong_values;
        r.dropped_entries += s.dropped;
        r.corrected_addresses += s.corrected;
        r.threshold_violations += s.violations;
        r.max_packed_bytes = r.max_packed_bytes.max(s.packed);
    }
    r.protected_flip_rate = if r.protected_values == 0 {
        0.0
    } else {
        r.protected_wrong_bits as f64 / (8 * r.protected_values) as f64
    };
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let a = flip_rate_protected(2, 1e-4, FlipRateMode::Approx).unwrap();
        assert!((a - 3e-8).abs() < 1e-20);
        assert_eq!(flip_rate_protected(2, 0.0, FlipRateMode::Exact).unwrap(), 0.0);
        let x: f64 = 0.01;
        let e = flip_rate_protected(2, x, FlipRateMode::Exact).unwrap();
        assert!((e - (3.0 * x * x * (1.0 - x) + x.powi(3))).abs() < 1e-15);
        assert!(flip_rate_protected(3, x, FlipRateMode::Exact).is_err());
    }

    #[test]
    fn small_monte_carlo_is_deterministic() {
        let a = monte_carlo_flip_rate(2, 0.05, 200_000, 7).unwrap();
        let b = monte_carlo_flip_rate(2, 0.05, 200_000, 7).unwrap();
        assert_eq!(a, b);
        let exact = flip_rate_protected(2, 0.05, FlipRateMode::Exact).unwrap();
        assert!((a.rate - exact).abs() < 5.0 * a.std_err);
    }

    #[test]
    fn clean_end_to_end() {
        let r = evaluate_end_to_end(4, 16384, 2, 0.0, 1).unwrap();
        assert_eq!(r.protected_wrong_bits, 0);
        assert_eq!(r.threshold_violations, 0);
        assert_eq!(r.max_packed_bytes, 723);
    }
}
