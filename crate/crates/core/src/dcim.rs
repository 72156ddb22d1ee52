//! Exact digital bit-serial path: one-bit products across columns reduced by the
//! adder tree, plus the 3-bit normalize-and-quantize step feeding the evaluator.

use serde::{Deserialize, Serialize};

use crate::quant::{BitPlanes, PackedBits};
use crate::{Error, Result};

pub const DEFAULT_COLS: usize = 144;

/// Width of the normalized DMAC code sent to the saliency evaluator.
pub const NQ_BITS: u8 = 3;
const NQ_MAX: u32 = (1 << NQ_BITS) - 1;

/// Adder-tree output of one digital cycle.
///
/// The hardware register is quoted as 7 bits but 144 columns need 8, so the
/// value is kept exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dmac {
    pub value: u32,
    pub active_cols: u32,
    pub order: usize,
}

pub fn dmac_cycle(act_bits: &[u8], weight_bits: &[u8], order: usize) -> Result<Dmac> {
    if act_bits.len() != weight_bits.len() {
        return Err(Error::Shape(format!(
            "activation bits ({}) and weight bits ({}) differ in length",
            act_bits.len(),
            weight_bits.len()
        )));
    }
    let acts = PackedBits::from_binary(act_bits)?;
    let weights = PackedBits::from_binary(weight_bits)?;
    Ok(dmac_packed(&acts, &weights, order))
}

/// Packed variant of [`dmac_cycle`]; lengths must already agree.
pub fn dmac_packed(act_bits: &PackedBits, weight_bits: &PackedBits, order: usize) -> Dmac {
    Dmac {
        value: act_bits.and_count(weight_bits),
        active_cols: act_bits.len() as u32,
        order,
    }
}

/// `round_half_up(7 * value / active_cols)`, in integer arithmetic.
pub fn nq_quantize(d: &Dmac) -> Result<u8> {
    if d.active_cols == 0 {
        return Err(Error::Degenerate(
            "cannot normalize a DMAC over zero columns".into(),
        ));
    }
    let num = 2 * NQ_MAX as u64 * d.value as u64 + d.active_cols as u64;
    let code = num / (2 * d.active_cols as u64);
    Ok(code.min(NQ_MAX as u64) as u8)
}

/// Exact integer dot product; the ground-truth oracle for every simulated path.
pub fn reference_mac(acts: &[i32], weights: &[i32]) -> Result<i64> {
    if acts.len() != weights.len() {
        return Err(Error::Shape(format!(
            "activation length {} != weight length {}",
            acts.len(),
            weights.len()
        )));
    }
    Ok(acts
        .iter()
        .zip(weights)
        .map(|(&x, &y)| x as i64 * y as i64)
        .sum())
}

/// Full-precision shift-add of every one-bit MAC: `sum 2^(i+j) * dmac(i, j)` with
/// negative MSB planes where flagged.
pub fn bitplane_mac(acts: &BitPlanes, weights: &BitPlanes) -> Result<i64> {
    if acts.len() != weights.len() {
        return Err(Error::Shape(format!(
            "activation length {} != weight length {}",
            acts.len(),
            weights.len()
        )));
    }
    let mut total = 0i64;
    for i in 0..weights.bits() as usize {
        for j in 0..acts.bits() as usize {
            let d = dmac_packed(acts.plane(j), weights.plane(i), i + j);
            total += weights.plane_weight(i) * acts.plane_weight(j) * d.value as i64;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::decompose_values;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn dmac_hand_sum() {
        let d = dmac_cycle(&[1, 1, 0, 1], &[1, 0, 1, 1], 3).unwrap();
        assert_eq!(d.value, 2);
        assert_eq!(d.active_cols, 4);
        assert_eq!(d.order, 3);
    }

    #[test]
    fn dmac_saturation_and_zero() {
        let ones = vec![1u8; 144];
        assert_eq!(dmac_cycle(&ones, &ones, 0).unwrap().value, 144);
        let zeros = vec![0u8; 144];
        assert_eq!(dmac_cycle(&zeros, &ones, 0).unwrap().value, 0);
        assert!(matches!(dmac_cycle(&[1], &[1, 0], 0), Err(Error::Shape(_))));
    }

    #[test]
    fn nq_examples() {
        let mk = |value, active_cols| Dmac {
            value,
            active_cols,
            order: 0,
        };
        assert_eq!(nq_quantize(&mk(144, 144)).unwrap(), 7);
        assert_eq!(nq_quantize(&mk(0, 144)).unwrap(), 0);
        assert_eq!(nq_quantize(&mk(72, 144)).unwrap(), 4);
        assert!(matches!(nq_quantize(&mk(0, 0)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn nq_monotone_in_value() {
        for cols in [1u32, 7, 9, 64, 144] {
            let mut prev = 0;
            for v in 0..=cols {
                let c = nq_quantize(&Dmac {
                    value: v,
                    active_cols: cols,
                    order: 0,
                })
                .unwrap();
                assert!(c >= prev);
                assert!(c <= 7);
                prev = c;
            }
            assert_eq!(prev, 7);
        }
    }

    #[test]
    fn reference_examples() {
        assert_eq!(reference_mac(&[5], &[3]).unwrap(), 15);
        assert_eq!(reference_mac(&[1, 2, 3], &[4, -5, 6]).unwrap(), 12);
        assert!(reference_mac(&[1], &[]).is_err());
    }

    // Brute-force expansion over plain 0/1 vectors, independent of the packed path.
    fn expansion_oracle(acts: &[i32], weights: &[i32], a: u8, w: u8) -> i64 {
        let mut total = 0i64;
        for i in 0..w {
            for j in 0..a {
                let wb: Vec<u8> = weights.iter().map(|&x| ((x as u32 >> i) & 1) as u8).collect();
                let ab: Vec<u8> = acts.iter().map(|&x| ((x as u32 >> j) & 1) as u8).collect();
                let d = dmac_cycle(&ab, &wb, (i + j) as usize).unwrap();
                let sign = if i == w - 1 { -1 } else { 1 };
                total += sign * (1i64 << (i + j)) * d.value as i64;
            }
        }
        total
    }

    #[test]
    fn reference_equals_bitwise_expansion() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..=144);
            let acts: Vec<i32> = (0..n).map(|_| rng.random_range(0..256)).collect();
            let weights: Vec<i32> = (0..n).map(|_| rng.random_range(-128..128)).collect();
            let exact = reference_mac(&acts, &weights).unwrap();
            assert_eq!(expansion_oracle(&acts, &weights, 8, 8), exact);
        }
    }

    proptest! {
        #[test]
        fn bitplane_mac_is_exact(w in 2u8..=8, a in 2u8..=8, len in 1usize..=144,
                                 w_signed: bool, a_signed: bool, seed: u64) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (wl, wh) = crate::quant::value_range(w, w_signed);
            let (al, ah) = crate::quant::value_range(a, a_signed);
            let weights: Vec<i32> = (0..len).map(|_| rng.random_range(wl..=wh) as i32).collect();
            let acts: Vec<i32> = (0..len).map(|_| rng.random_range(al..=ah) as i32).collect();
            let ap = decompose_values(&acts, a, a_signed).unwrap();
            let wp = decompose_values(&weights, w, w_signed).unwrap();
            prop_assert_eq!(bitplane_mac(&ap, &wp).unwrap(), reference_mac(&acts, &weights).unwrap());
        }

        #[test]
        fn dmac_never_exceeds_columns(bits in proptest::collection::vec(0u8..=1, 1..200), seed: u64) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let other: Vec<u8> = bits.iter().map(|_| rng.random_range(0..=1)).collect();
            let d = dmac_cycle(&bits, &other, 0).unwrap();
            prop_assert!(d.value <= d.active_cols);
        }
    }
}
