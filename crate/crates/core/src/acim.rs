//! Analog path: DAC-encoded activation slices, charge-sharing accumulation with
//! additive Gaussian noise, and a low-resolution SAR ADC.
//!
//! The charge-shared value is the ideal mean `sum_c w_c * level_c / (cols * (2^width - 1))`
//! in `[0, 1]`. Device mismatch, capacitor variation and IR drop are all lumped into
//! one additive Gaussian term with standard deviation `noise_sigma` in those
//! normalized units.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::hmu::{hybrid_row, RowPartials};
use crate::partition::{partition_grid, AnalogGroup};
use crate::quant::{decompose_values, value_range};
use crate::rng;
use crate::{Error, Result};

pub const MAX_DAC_BITS: u8 = 4;
pub const MAX_ADC_BITS: u8 = 16;

/// Default noise level. Produced by [`fit_noise_sigma`] on
/// [`SnrProbe::default`] at boundary 5 against a 40 dB target; the
/// `default_sigma_matches_fit` test re-runs the fit.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.159985;
pub const NOISE_FIT_BOUNDARY: usize = 5;
pub const NOISE_FIT_TARGET_DB: f64 = 40.0;
pub const NOISE_FIT_TRIALS: usize = 10_000;
pub const NOISE_FIT_SEED: u64 = 0x5EED;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalogParams {
    pub dac_bits_max: u8,
    pub adc_bits: u8,
    pub noise_sigma: f64,
    /// Normalized ADC input range `(lo, hi)`.
    pub adc_range: (f64, f64),
}

impl Default for AnalogParams {
    fn default() -> Self {
        Self {
            dac_bits_max: MAX_DAC_BITS,
            adc_bits: 3,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            adc_range: (0.0, 1.0),
        }
    }
}

impl AnalogParams {
    pub fn validate(&self) -> Result<()> {
        if self.dac_bits_max == 0 || self.dac_bits_max > MAX_DAC_BITS {
            return Err(Error::Config(format!(
                "dac_bits_max {} outside 1..={MAX_DAC_BITS}",
                self.dac_bits_max
            )));
        }
        if self.adc_bits == 0 || self.adc_bits > MAX_ADC_BITS {
            return Err(Error::Config(format!(
                "adc_bits {} outside 1..={MAX_ADC_BITS}",
                self.adc_bits
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        let (lo, hi) = self.adc_range;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::Config(format!("adc_range needs lo < hi, got ({lo}, {hi})")));
        }
        Ok(())
    }

    pub fn adc_max_code(&self) -> u32 {
        (1u32 << self.adc_bits) - 1
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn with_adc_bits(mut self, bits: u8) -> Self {
        self.adc_bits = bits;
        self
    }
}

/// ADC output of one analog group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Amac {
    pub code: u32,
    pub group: AnalogGroup,
    /// `2^(i + j_lo)`.
    pub significance: u64,
}

fn check_width(width: usize, params: &AnalogParams) -> Result<()> {
    if width == 0 || width > params.dac_bits_max as usize {
        return Err(Error::Config(format!(
            "DAC width {width} outside 1..={}",
            params.dac_bits_max
        )));
    }
    Ok(())
}

/// Ideal DAC level of an LSB-first activation slice.
pub fn dac_encode(act_slice_bits: &[u8], width: usize) -> Result<u32> {
    if width == 0 || width > MAX_DAC_BITS as usize {
        return Err(Error::Config(format!(
            "DAC width {width} outside 1..={MAX_DAC_BITS}"
        )));
    }
    if act_slice_bits.len() != width {
        return Err(Error::Shape(format!(
            "slice has {} bits, DAC width is {width}",
            act_slice_bits.len()
        )));
    }
    act_slice_bits
        .iter()
        .enumerate()
        .try_fold(0u32, |acc, (b, &bit)| match bit {
            0 => Ok(acc),
            1 => Ok(acc | (1 << b)),
            other => Err(Error::Range {
                value: other as i64,
                bits: 1,
                kind: "unsigned",
            }),
        })
}

pub fn adc_quantize(v: f64, params: &AnalogParams) -> u32 {
    let (lo, hi) = params.adc_range;
    let max = params.adc_max_code();
    let x = (v - lo) / (hi - lo) * max as f64;
    let code = (x + 0.5).floor();
    if code <= 0.0 {
        0
    } else if code >= max as f64 {
        max
    } else {
        code as u32
    }
}

/// Converts an already-summed charge (`sum_c w_c * level_c`) over `cols` columns.
pub fn amac_from_charge<R: Rng + ?Sized>(
    charge: u64,
    cols: usize,
    group: AnalogGroup,
    params: &AnalogParams,
    noise: &mut R,
) -> Result<Amac> {
    check_width(group.width(), params)?;
    if cols == 0 {
        return Err(Error::Degenerate("charge sharing over zero columns".into()));
    }
    let full_scale = (cols as u64) * ((1u64 << group.width()) - 1);
    let v = charge as f64 / full_scale as f64;
    let v = if params.noise_sigma > 0.0 {
        let z: f64 = noise.sample(StandardNormal);
        v + params.noise_sigma * z
    } else {
        v
    };
    Ok(Amac {
        code: adc_quantize(v, params),
        group,
        significance: 1u64 << group.order(),
    })
}

/// Multiplies one weight bit per column with the DAC levels, charge-shares and
/// converts.
pub fn amac_group<R: Rng + ?Sized>(
    weight_bits: &[u8],
    levels: &[u32],
    group: AnalogGroup,
    params: &AnalogParams,
    noise: &mut R,
) -> Result<Amac> {
    if weight_bits.len() != levels.len() {
        return Err(Error::Shape(format!(
            "{} weight bits vs {} DAC levels",
            weight_bits.len(),
            levels.len()
        )));
    }
    check_width(group.width(), params)?;
    let max_level = (1u32 << group.width()) - 1;
    let mut charge = 0u64;
    for (&wb, &level) in weight_bits.iter().zip(levels) {
        if wb > 1 {
            return Err(Error::Range {
                value: wb as i64,
                bits: 1,
                kind: "unsigned",
            });
        }
        if level > max_level {
            return Err(Error::Range {
                value: level as i64,
                bits: group.width() as u8,
                kind: "unsigned",
            });
        }
        charge += (wb as u32 * level) as u64;
    }
    amac_from_charge(charge, weight_bits.len(), group, params, noise)
}

/// Maps an ADC code back to integer partial-sum units, scaled by the group
/// significance, so it can share the digital accumulator.
pub fn decode_amac(m: &Amac, cols: usize, params: &AnalogParams) -> i64 {
    let full_scale = (cols as u64) * ((1u64 << m.group.width()) - 1);
    let units = (m.code as f64 * full_scale as f64 / params.adc_max_code() as f64 + 0.5).floor();
    units as i64 * m.significance as i64
}

/// Signal-to-noise ratio of simulated vs exact MAC outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    /// No error at all (e.g. the full-digital path).
    Exact,
    Db(f64),
}

impl Snr {
    pub fn db(&self) -> f64 {
        match self {
            Snr::Exact => f64::INFINITY,
            Snr::Db(v) => *v,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, Snr::Exact)
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Snr::Exact => f.write_str("exact"),
            Snr::Db(v) => write!(f, "{v:.4}"),
        }
    }
}

/// Random-job setup for SNR measurements: unsigned `a`-bit activations and signed
/// `w`-bit weights drawn uniformly over `cols` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrProbe {
    pub w: u8,
    pub a: u8,
    pub s: usize,
    pub window: usize,
    pub cols: usize,
    pub analog: AnalogParams,
}

impl Default for SnrProbe {
    fn default() -> Self {
        Self {
            w: 8,
            a: 8,
            s: 2,
            window: crate::partition::DEFAULT_WINDOW,
            cols: crate::dcim::DEFAULT_COLS,
            analog: AnalogParams::default(),
        }
    }
}

/// Accumulated energies from an SNR run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SnrEnergies {
    pub signal: f64,
    pub error: f64,
}

impl SnrEnergies {
    pub fn snr(&self) -> Result<Snr> {
        if self.signal == 0.0 {
            return Err(Error::Degenerate("zero signal energy".into()));
        }
        if self.error == 0.0 {
            return Ok(Snr::Exact);
        }
        Ok(Snr::Db(10.0 * (self.signal / self.error).log10()))
    }
}

/// Runs `trials` random jobs at `boundary` and accumulates signal/error energy.
///
/// Job data depends only on `seed`, so sweeps over boundaries compare the same
/// jobs.
pub fn snr_energies(
    probe: &SnrProbe,
    boundary: usize,
    trials: usize,
    seed: u64,
) -> Result<SnrEnergies> {
    if trials == 0 {
        return Err(Error::Degenerate("SNR needs at least one trial".into()));
    }
    probe.analog.validate()?;
    let partition = partition_grid(
        probe.w as usize,
        probe.a as usize,
        probe.s,
        boundary,
        probe.window,
    )?;
    let mut data = rng::stream(seed, &[0xDA7A]);
    let mut noise = rng::stream(seed, &[0x0004_015E]);
    let (wl, wh) = value_range(probe.w, true);
    let alim = 1i64 << probe.a;
    let mut acts = vec![0i32; probe.cols];
    let mut weights = vec![0i32; probe.cols];
    let mut out = SnrEnergies::default();
    for _ in 0..trials {
        for (x, y) in acts.iter_mut().zip(weights.iter_mut()) {
            *x = data.random_range(0..alim) as i32;
            *y = data.random_range(wl..=wh) as i32;
        }
        let exact = crate::dcim::reference_mac(&acts, &weights)?;
        let ap = decompose_values(&acts, probe.a, false)?;
        let wp = decompose_values(&weights, probe.w, true)?;
        let partials = RowPartials::new(&ap, &wp)?;
        let sim = hybrid_row(&partials, &partition, &probe.analog, &mut noise)?.output;
        let e = (sim - exact) as f64;
        out.signal += (exact as f64) * (exact as f64);
        out.error += e * e;
    }
    Ok(out)
}

/// `10 log10(sum y^2 / sum (y_sim - y)^2)` over `trials` random jobs.
pub fn measure_snr(probe: &SnrProbe, boundary: usize, trials: usize, seed: u64) -> Result<Snr> {
    snr_energies(probe, boundary, trials, seed)?.snr()
}

/// Bisects the noise level so the SNR at `boundary` hits `target_db`.
///
/// Returns 0 when the target is unreachable even without noise, i.e. when the
/// ADC quantization and discarded orders already lie below it.
pub fn fit_noise_sigma(
    probe: &SnrProbe,
    boundary: usize,
    target_db: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let at = |sigma: f64| -> Result<f64> {
        let mut p = probe.clone();
        p.analog.noise_sigma = sigma;
        Ok(measure_snr(&p, boundary, trials, seed)?.db())
    };
    if at(0.0)? <= target_db {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    if at(hi)? > target_db {
        return Err(Error::Config(format!(
            "target {target_db} dB not reached even at sigma {hi}"
        )));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if at(mid)? > target_db {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::AnalogGroup;

    fn g(weight_bit: usize, act_lo: usize, act_hi: usize) -> AnalogGroup {
        AnalogGroup {
            weight_bit,
            act_lo,
            act_hi,
        }
    }

    fn quiet() -> AnalogParams {
        AnalogParams::default().with_sigma(0.0)
    }

    #[test]
    fn dac_examples() {
        assert_eq!(dac_encode(&[0, 1], 2).unwrap(), 2);
        assert_eq!(dac_encode(&[1, 1, 1, 1], 4).unwrap(), 15);
        assert_eq!(dac_encode(&[1], 1).unwrap(), 1);
        assert!(matches!(dac_encode(&[1; 5], 5), Err(Error::Config(_))));
        assert!(dac_encode(&[1, 0], 3).is_err());
    }

    #[test]
    fn adc_examples() {
        let p = quiet();
        assert_eq!(adc_quantize(0.0, &p), 0);
        assert_eq!(adc_quantize(1.0, &p), 7);
        assert_eq!(adc_quantize(0.5, &p), 4);
        assert_eq!(adc_quantize(-0.3, &p), 0);
        assert_eq!(adc_quantize(1.7, &p), 7);
    }

    #[test]
    fn adc_monotone() {
        for bits in 1..=8 {
            let p = quiet().with_adc_bits(bits);
            let mut prev = 0;
            for step in -200..=1200 {
                let c = adc_quantize(step as f64 / 1000.0, &p);
                assert!(c >= prev);
                prev = c;
            }
        }
    }

    #[test]
    fn amac_reference_example() {
        let mut r = rng::stream(0, &[]);
        let m = amac_group(&[1, 0, 1, 1], &[3, 0, 1, 2], g(0, 0, 1), &quiet(), &mut r).unwrap();
        assert_eq!(m.code, 4);
        assert_eq!(m.significance, 1);
        // exact partial sum is 6; the 3-bit code decodes to 7
        assert_eq!(decode_amac(&m, 4, &quiet()), 7);

        let m = amac_group(&[1, 0, 1, 1], &[3, 0, 1, 2], g(2, 3, 4), &quiet(), &mut r).unwrap();
        assert_eq!(m.significance, 32);
        assert_eq!(decode_amac(&m, 4, &quiet()), 7 * 32);
    }

    #[test]
    fn amac_zero_weights() {
        let mut r = rng::stream(0, &[]);
        let m = amac_group(&[0; 4], &[3, 3, 2, 1], g(1, 0, 1), &quiet(), &mut r).unwrap();
        assert_eq!(m.code, 0);
        assert_eq!(decode_amac(&m, 4, &quiet()), 0);
    }

    #[test]
    fn amac_errors() {
        let mut r = rng::stream(0, &[]);
        assert!(matches!(
            amac_group(&[], &[], g(0, 0, 0), &quiet(), &mut r),
            Err(Error::Degenerate(_))
        ));
        assert!(amac_group(&[1], &[4], g(0, 0, 1), &quiet(), &mut r).is_err());
        assert!(amac_group(&[1, 1], &[1], g(0, 0, 1), &quiet(), &mut r).is_err());
    }

    #[test]
    fn noise_mean_tracks_noiseless_code() {
        // v = 5/12 sits 0.42 codes below a rounding edge, 3 sigma away.
        let p = quiet().with_sigma(0.02);
        let mut r = rng::stream(3, &[]);
        let n = 100_000;
        let mut sum = 0u64;
        for _ in 0..n {
            sum += amac_group(&[1, 0, 1, 1], &[3, 0, 1, 1], g(0, 0, 1), &p, &mut r)
                .unwrap()
                .code as u64;
        }
        let mean = sum as f64 / n as f64;
        assert!((mean - 3.0).abs() <= 0.05, "mean code {mean}");
    }

    #[test]
    fn wide_adc_decode_is_exact_exhaustive() {
        // cols = 4, width = 2: every weight pattern against every level vector.
        let p = quiet().with_adc_bits(16);
        let mut r = rng::stream(0, &[]);
        for wmask in 0u32..16 {
            let wb: Vec<u8> = (0..4).map(|c| ((wmask >> c) & 1) as u8).collect();
            for lv in 0u32..256 {
                let levels: Vec<u32> = (0..4).map(|c| (lv >> (2 * c)) & 3).collect();
                let exact: u32 = wb.iter().zip(&levels).map(|(&w, &l)| w as u32 * l).sum();
                let m = amac_group(&wb, &levels, g(0, 0, 1), &p, &mut r).unwrap();
                assert_eq!(decode_amac(&m, 4, &p), exact as i64);
            }
        }
    }

    #[test]
    fn identical_seed_identical_codes() {
        let p = quiet().with_sigma(0.1);
        let run = |seed| {
            let mut r = rng::stream(seed, &[]);
            (0..64)
                .map(|_| amac_group(&[1, 1], &[1, 2], g(0, 0, 1), &p, &mut r).unwrap().code)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn params_validation() {
        assert!(AnalogParams::default().validate().is_ok());
        assert!(quiet().with_adc_bits(0).validate().is_err());
        assert!(quiet().with_adc_bits(17).validate().is_err());
        assert!(quiet().with_sigma(-1.0).validate().is_err());
        let mut p = quiet();
        p.adc_range = (1.0, 1.0);
        assert!(p.validate().is_err());
        p.adc_range = (0.0, 1.0);
        p.dac_bits_max = 5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn snr_full_digital_is_exact() {
        let probe = SnrProbe {
            analog: AnalogParams::default().with_sigma(0.3),
            ..SnrProbe::default()
        };
        assert_eq!(measure_snr(&probe, 0, 200, 1).unwrap(), Snr::Exact);
        assert_eq!(Snr::Exact.to_string(), "exact");
        assert!(measure_snr(&probe, 0, 0, 1).is_err());
    }

    #[test]
    fn snr_wide_adc_discard_only() {
        // sigma 0, 16-bit ADC, boundary 5: only the discarded orders k < 1 err.
        let probe = SnrProbe {
            analog: quiet().with_adc_bits(16),
            ..SnrProbe::default()
        };
        let snr = measure_snr(&probe, 5, 2000, 4).unwrap();
        assert!(!snr.is_exact());
        assert!(snr.db() > 60.0, "{snr}");
    }

    #[test]
    fn default_sigma_matches_fit() {
        let fit = fit_noise_sigma(
            &SnrProbe::default(),
            NOISE_FIT_BOUNDARY,
            NOISE_FIT_TARGET_DB,
            NOISE_FIT_TRIALS,
            NOISE_FIT_SEED,
        )
        .unwrap();
        assert!((fit - DEFAULT_NOISE_SIGMA).abs() < 1e-4, "fit {fit}");
    }

}
