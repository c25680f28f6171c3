use serde::{Deserialize, Serialize};

use super::vocab::NUM_BINS;
use super::TokenizerError;

const BINS: f64 = NUM_BINS as f64;

/// floor(v·1024) for v in [0, 1).
pub fn quantize_frac(v: f64) -> Result<u16, TokenizerError> {
    if !(0.0..1.0).contains(&v) {
        return Err(TokenizerError::OutOfRange(v));
    }
    Ok(((v * BINS).floor() as usize).min(NUM_BINS - 1) as u16)
}

/// Bin centre, (b + 0.5)/1024.
pub fn dequantize_frac(bin: u16) -> Result<f64, TokenizerError> {
    if bin as usize >= NUM_BINS {
        return Err(TokenizerError::OutOfRange(bin as f64));
    }
    Ok((bin as f64 + 0.5) / BINS)
}

/// Which of the six lattice parameters a value belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LatticeParam {
    A,
    B,
    C,
    Alpha,
    Beta,
    Gamma,
}

impl LatticeParam {
    pub const ALL: [LatticeParam; 6] = [Self::A, Self::B, Self::C, Self::Alpha, Self::Beta, Self::Gamma];

    pub fn name(self) -> &'static str {
        match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::Alpha => "alpha",
            Self::Beta => "beta",
            Self::Gamma => "gamma",
        }
    }
}

/// Fixed normalization ranges for the six lattice parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeRanges {
    pub a: (f64, f64),
    pub b: (f64, f64),
    pub c: (f64, f64),
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub gamma: (f64, f64),
}

impl Default for LatticeRanges {
    fn default() -> Self {
        Self {
            a: (2.0, 10.0),
            b: (2.0, 12.5),
            c: (2.0, 20.0),
            alpha: (60.0, 120.0),
            beta: (60.0, 120.0),
            gamma: (60.0, 120.0),
        }
    }
}

impl LatticeRanges {
    pub fn new(ranges: [(f64, f64); 6]) -> Result<Self, TokenizerError> {
        for (i, (lo, hi)) in ranges.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(TokenizerError::BadRange(LatticeParam::ALL[i].name()));
            }
        }
        let [a, b, c, alpha, beta, gamma] = ranges;
        Ok(Self { a, b, c, alpha, beta, gamma })
    }

    pub fn get(&self, p: LatticeParam) -> (f64, f64) {
        match p {
            LatticeParam::A => self.a,
            LatticeParam::B => self.b,
            LatticeParam::C => self.c,
            LatticeParam::Alpha => self.alpha,
            LatticeParam::Beta => self.beta,
            LatticeParam::Gamma => self.gamma,
        }
    }

    /// Width of one bin in the parameter's own units.
    pub fn bin_width(&self, p: LatticeParam) -> f64 {
        let (lo, hi) = self.get(p);
        (hi - lo) / BINS
    }

    /// Maps [min, max] linearly onto [0, 1) and quantizes. Values outside
    /// the range land in the first or last bin and set the clamp flag.
    pub fn quantize(&self, p: LatticeParam, value: f64) -> (u16, bool) {
        let (lo, hi) = self.get(p);
        let t = (value - lo) / (hi - lo);
        if t.is_nan() {
            return (0, true);
        }
        // reduction leaves angles such as 60° a few ulps off; that is not clamping
        let clamped = !(-1e-9..=1.0 + 1e-9).contains(&t);
        let bin = (t * BINS).floor().clamp(0.0, BINS - 1.0) as u16;
        (bin, clamped)
    }

    pub fn dequantize(&self, p: LatticeParam, bin: u16) -> Result<f64, TokenizerError> {
        let (lo, hi) = self.get(p);
        Ok(lo + dequantize_frac(bin)? * (hi - lo))
    }
}

/// [`LatticeRanges::quantize`] under a free-function name.
pub fn quantize_lattice_param(p: LatticeParam, value: f64, ranges: &LatticeRanges) -> (u16, bool) {
    ranges.quantize(p, value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fractional_bins() {
        assert_eq!(quantize_frac(0.0).unwrap(), 0);
        assert_eq!(quantize_frac(0.5).unwrap(), 512);
        assert_eq!(quantize_frac(0.9999).unwrap(), 1023);
        assert!(quantize_frac(1.0).is_err());
        assert!(quantize_frac(-1e-12).is_err());
        assert!(quantize_frac(f64::NAN).is_err());
        assert_eq!(dequantize_frac(0).unwrap(), 0.00048828125);
        assert_eq!(dequantize_frac(512).unwrap(), 0.50048828125);
        assert!(dequantize_frac(1024).is_err());
    }

    #[test]
    fn lattice_bins() {
        let r = LatticeRanges::default();
        assert_eq!(r.quantize(LatticeParam::A, 2.0), (0, false));
        assert_eq!(r.quantize(LatticeParam::A, 6.0), (512, false));
        assert_eq!(r.quantize(LatticeParam::C, 25.0), (1023, true));
        assert_eq!(r.quantize(LatticeParam::A, 1.0), (0, true));
        assert_eq!(r.quantize(LatticeParam::Gamma, 120.0), (1023, false));
        assert!(LatticeRanges::new([(1.0, 1.0); 6]).is_err());
    }

    proptest! {
        #[test]
        fn half_bin_round_trip(v in 0.0f64..1.0) {
            let back = dequantize_frac(quantize_frac(v).unwrap()).unwrap();
            prop_assert!((back - v).abs() <= 1.0 / 2048.0);
        }

        #[test]
        fn lattice_round_trip_in_range(v in 2.0f64..20.0) {
            let r = LatticeRanges::default();
            let (bin, clamped) = r.quantize(LatticeParam::C, v);
            prop_assert!(!clamped);
            let back = r.dequantize(LatticeParam::C, bin).unwrap();
            prop_assert!((back - v).abs() <= r.bin_width(LatticeParam::C) / 2.0 + 1e-12);
        }
    }
}
