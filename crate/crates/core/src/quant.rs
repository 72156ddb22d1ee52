//! Quantized integer tensors and their bit-plane decomposition.
//!
//! Bit order is LSB first everywhere, so plane `i` of a weight and plane `j` of an
//! activation meet at output order `k = i + j`. Signed values use two's complement:
//! the MSB plane carries weight `-2^(bits-1)`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Widest supported integer width.
pub const MAX_BITS: u8 = 16;

/// Inclusive value range of a `bits`-wide integer.
pub fn value_range(bits: u8, signed: bool) -> (i64, i64) {
    if signed {
        (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

fn check_width(bits: u8) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::Config(format!(
            "bit width {bits} outside 1..={MAX_BITS}"
        )));
    }
    Ok(())
}

fn check_value(v: i64, bits: u8, signed: bool) -> Result<()> {
    let (lo, hi) = value_range(bits, signed);
    if v < lo || v > hi {
        return Err(Error::Range {
            value: v,
            bits,
            kind: if signed { "signed" } else { "unsigned" },
        });
    }
    Ok(())
}

/// Integer tensor with a declared width, signedness and dequantization scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    shape: Vec<usize>,
    values: Vec<i32>,
    bits: u8,
    signed: bool,
    scale: f64,
}

impl QuantTensor {
    pub fn new(
        shape: Vec<usize>,
        values: Vec<i32>,
        bits: u8,
        signed: bool,
        scale: f64,
    ) -> Result<Self> {
        check_width(bits)?;
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                values.len()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {scale}")));
        }
        for &v in &values {
            check_value(v as i64, bits, signed)?;
        }
        Ok(Self {
            shape,
            values,
            bits,
            signed,
            scale,
        })
    }

    /// One-dimensional unsigned tensor with unit scale.
    pub fn unsigned(values: Vec<i32>, bits: u8) -> Result<Self> {
        Self::new(vec![values.len()], values, bits, false, 1.0)
    }

    /// One-dimensional signed tensor with unit scale.
    pub fn signed(values: Vec<i32>, bits: u8) -> Result<Self> {
        Self::new(vec![values.len()], values, bits, true, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn is_signed(&self) -> bool {
        self.signed
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row `r` of a two-dimensional tensor.
    pub fn row(&self, r: usize) -> Result<&[i32]> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "row access needs a 2-D tensor, shape is {:?}",
                self.shape
            )));
        }
        let cols = self.shape[1];
        if r >= self.shape[0] {
            return Err(Error::Shape(format!(
                "row {r} out of bounds for {} rows",
                self.shape[0]
            )));
        }
        Ok(&self.values[r * cols..(r + 1) * cols])
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64 * self.scale).collect()
    }
}

/// Fixed-length bit vector packed into 64-bit words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedBits {
    words: Vec<u64>,
    len: usize,
}

impl PackedBits {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    /// Packs a 0/1 slice. Any nonzero entry is rejected.
    pub fn from_binary(bits: &[u8]) -> Result<Self> {
        let mut out = Self::zeros(bits.len());
        for (idx, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => out.set(idx),
                other => {
                    return Err(Error::Range {
                        value: other as i64,
                        bits: 1,
                        kind: "unsigned",
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&mut self, idx: usize) {
        debug_assert!(idx < self.len);
        self.words[idx / 64] |= 1u64 << (idx % 64);
    }

    pub fn get(&self, idx: usize) -> bool {
        (self.words[idx / 64] >> (idx % 64)) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Popcount of the bitwise AND, i.e. the one-bit dot product.
    pub fn and_count(&self, other: &PackedBits) -> u32 {
        debug_assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

    pub fn to_vec(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.get(i) as u8).collect()
    }
}

/// LSB-first bit planes of a flat integer vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BitPlanes {
    planes: Vec<PackedBits>,
    msb_negative: bool,
}

impl BitPlanes {
    pub fn planes(&self) -> &[PackedBits] {
        &self.planes
    }

    pub fn plane(&self, i: usize) -> &PackedBits {
        &self.planes[i]
    }

    pub fn bits(&self) -> u8 {
        self.planes.len() as u8
    }

    pub fn msb_negative(&self) -> bool {
        self.msb_negative
    }

    /// Number of elements each plane covers.
    pub fn len(&self) -> usize {
        self.planes.first().map_or(0, PackedBits::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Signed weight of plane `i` in the recomposition.
    pub fn plane_weight(&self, i: usize) -> i64 {
        let mag = 1i64 << i;
        if self.msb_negative && i + 1 == self.planes.len() {
            -mag
        } else {
            mag
        }
    }
}

/// Splits every value of `t` into LSB-first planes.
pub fn decompose_bits(t: &QuantTensor) -> Result<BitPlanes> {
    decompose_values(t.values(), t.bits(), t.is_signed())
}

/// Same as [`decompose_bits`] for a raw slice; validates the range.
pub fn decompose_values(values: &[i32], bits: u8, signed: bool) -> Result<BitPlanes> {
    check_width(bits)?;
    let mut planes = vec![PackedBits::zeros(values.len()); bits as usize];
    let mask = (1u32 << bits) - 1;
    for (idx, &v) in values.iter().enumerate() {
        check_value(v as i64, bits, signed)?;
        let raw = (v as u32) & mask;
        for (b, plane) in planes.iter_mut().enumerate() {
            if (raw >> b) & 1 == 1 {
                plane.set(idx);
            }
        }
    }
    Ok(BitPlanes {
        planes,
        msb_negative: signed,
    })
}

/// Builds planes from explicit 0/1 vectors (LSB first).
pub fn planes_from_binary(planes: &[Vec<u8>], msb_negative: bool) -> Result<BitPlanes> {
    if planes.is_empty() || planes.len() > MAX_BITS as usize {
        return Err(Error::Config(format!(
            "plane count {} outside 1..={MAX_BITS}",
            planes.len()
        )));
    }
    let len = planes[0].len();
    let packed = planes
        .iter()
        .map(|p| {
            if p.len() != len {
                return Err(Error::Shape(format!(
                    "plane lengths differ: {} vs {len}",
                    p.len()
                )));
            }
            PackedBits::from_binary(p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BitPlanes {
        planes: packed,
        msb_negative,
    })
}

/// Inverse of [`decompose_bits`]: `sum_i 2^i * plane_i`, MSB negated when flagged.
pub fn recompose(p: &BitPlanes) -> Vec<i64> {
    (0..p.len())
        .map(|idx| {
            p.planes
                .iter()
                .enumerate()
                .filter(|(_, plane)| plane.get(idx))
                .map(|(i, _)| p.plane_weight(i))
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn planes_of(v: i32, bits: u8, signed: bool) -> (Vec<Vec<u8>>, bool) {
        let p = decompose_values(&[v], bits, signed).unwrap();
        (
            p.planes().iter().map(PackedBits::to_vec).collect(),
            p.msb_negative(),
        )
    }

    #[test]
    fn unsigned_binary_expansion() {
        let (planes, neg) = planes_of(5, 4, false);
        assert_eq!(planes, vec![vec![1], vec![0], vec![1], vec![0]]);
        assert!(!neg);
    }

    #[test]
    fn zero_is_all_zero_planes() {
        let (planes, _) = planes_of(0, 8, false);
        assert_eq!(planes.len(), 8);
        assert!(planes.iter().all(|p| p == &vec![0]));
        let (planes, _) = planes_of(0, 8, true);
        assert!(planes.iter().all(|p| p == &vec![0]));
    }

    #[test]
    fn twos_complement_negative_msb() {
        let (planes, neg) = planes_of(-3, 4, true);
        assert_eq!(planes, vec![vec![1], vec![0], vec![1], vec![1]]);
        assert!(neg);
    }

    #[test]
    fn recompose_examples() {
        let p = planes_from_binary(&[vec![1], vec![0], vec![1], vec![0]], false).unwrap();
        assert_eq!(recompose(&p), vec![5]);
        let p = planes_from_binary(&[vec![1], vec![0], vec![1], vec![1]], true).unwrap();
        assert_eq!(recompose(&p), vec![-3]);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(
            decompose_values(&[16], 4, false),
            Err(Error::Range { value: 16, .. })
        ));
        assert!(matches!(
            decompose_values(&[-9], 4, true),
            Err(Error::Range { .. })
        ));
        assert!(matches!(
            decompose_values(&[-1], 4, false),
            Err(Error::Range { .. })
        ));
        assert!(QuantTensor::signed(vec![128], 8).is_err());
        assert!(QuantTensor::new(vec![1], vec![1], 8, false, 0.0).is_err());
        assert!(QuantTensor::new(vec![2], vec![1], 8, false, 1.0).is_err());
    }

    #[test]
    fn round_trip_thousand_random_bytes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let unsigned: Vec<i32> = (0..1000).map(|_| rng.random_range(0..256)).collect();
        let p = decompose_values(&unsigned, 8, false).unwrap();
        assert_eq!(p.bits(), 8);
        let back: Vec<i32> = recompose(&p).into_iter().map(|v| v as i32).collect();
        assert_eq!(back, unsigned);

        let signed: Vec<i32> = (0..1000).map(|_| rng.random_range(-128..128)).collect();
        let p = decompose_values(&signed, 8, true).unwrap();
        let back: Vec<i32> = recompose(&p).into_iter().map(|v| v as i32).collect();
        assert_eq!(back, signed);
    }

    #[test]
    fn packed_bits_wide_vectors() {
        let bits: Vec<u8> = (0..144).map(|i| (i % 3 == 0) as u8).collect();
        let p = PackedBits::from_binary(&bits).unwrap();
        assert_eq!(p.to_vec(), bits);
        assert_eq!(p.count_ones(), 48);
        assert!(PackedBits::from_binary(&[0, 2]).is_err());
    }

    proptest! {
        #[test]
        fn decompose_recompose_bijection(bits in 1u8..=12, signed: bool, seed: u64) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (lo, hi) = value_range(bits, signed);
            let vals: Vec<i32> = (0..64).map(|_| rng.random_range(lo..=hi) as i32).collect();
            let p = decompose_values(&vals, bits, signed).unwrap();
            prop_assert_eq!(p.bits(), bits);
            let back: Vec<i32> = recompose(&p).into_iter().map(|v| v as i32).collect();
            prop_assert_eq!(back, vals);
        }
    }
}
