//! Hamming(19,14) single-error-correcting code for 14-bit addresses.
//!
//! Codeword positions are numbered 1..=19. Parity bits sit at the powers of
//! two (1, 2, 4, 8, 16); the 14 address bits fill the remaining positions,
//! least significant address bit at the lowest position. The syndrome of a
//! received word is the XOR of the positions of its set bits.

pub const ADDR_BITS: u32 = 14;
pub const PARITY_BITS: u32 = 5;
pub const CODE_BITS: u32 = ADDR_BITS + PARITY_BITS;

const DATA_POSITIONS: [u32; 14] = [3, 5, 6, 7, 9, 10, 11, 12, 13, 14, 15, 17, 18, 19];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HammingStatus {
    Clean,
    Corrected,
    Uncorrectable,
}

fn data_syndrome(addr: u16) -> u32 {
    DATA_POSITIONS
        .iter()
        .enumerate()
        .filter(|(i, _)| addr >> i & 1 == 1)
        .fold(0, |s, (_, &p)| s ^ p)
}

/// Parity bits for `addr`; bit `j` is the parity at position `2^j`.
pub fn hamming14_encode(addr: u16) -> u8 {
    debug_assert!(u32::from(addr) < 1 << ADDR_BITS);
    data_syndrome(addr & 0x3fff) as u8
}

/// Decodes a received address and parity, correcting any single flipped bit.
pub fn hamming14_decode(addr: u16, parity: u8) -> (u16, HammingStatus) {
    let addr = addr & 0x3fff;
    let syndrome = data_syndrome(addr) ^ u32::from(parity & 0x1f);
    match syndrome {
        0 => (addr, HammingStatus::Clean),
        s if s > CODE_BITS => (addr, HammingStatus::Uncorrectable),
        s if s.is_power_of_two() => (addr, HammingStatus::Corrected),
        s => {
            let i = DATA_POSITIONS.iter().position(|&p| p == s).expect("data position");
            (addr ^ (1 << i), HammingStatus::Corrected)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Flips codeword bit `pos` (1-based) in an (addr, parity) pair.
    fn flip(addr: u16, parity: u8, pos: u32) -> (u16, u8) {
        if pos.is_power_of_two() {
            (addr, parity ^ (1 << pos.trailing_zeros()))
        } else {
            let i = DATA_POSITIONS.iter().position(|&p| p == pos).unwrap();
            (addr ^ (1 << i), parity)
        }
    }

    #[test]
    fn clean_and_single_flips() {
        for addr in [0u16, 1, 5, 0x1555, 0x2aaa, 0x3fff, 16383] {
            let p = hamming14_encode(addr);
            assert_eq!(hamming14_decode(addr, p), (addr, HammingStatus::Clean));
            for pos in 1..=CODE_BITS {
                let (a, q) = flip(addr, p, pos);
                assert_eq!(hamming14_decode(a, q), (addr, HammingStatus::Corrected));
            }
        }
    }

    #[test]
    fn some_double_flips_are_detected() {
        let addr = 1234;
        let p = hamming14_encode(addr);
        let mut detected = 0;
        for i in 1..=CODE_BITS {
            for j in i + 1..=CODE_BITS {
                let (a, q) = flip(addr, p, i);
                let (a, q) = flip(a, q, j);
                let (_, st) = hamming14_decode(a, q);
                assert_ne!(st, HammingStatus::Clean);
                if (i ^ j) > CODE_BITS {
                    assert_eq!(st, HammingStatus::Uncorrectable);
                    detected += 1;
                }
            }
        }
        assert!(detected > 0);
    }
}
