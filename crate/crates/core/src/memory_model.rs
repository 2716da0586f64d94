//! Energy-scalable unreliable memory.
//!
//! Each bit significance of the stored format lives in its own memory bank
//! with energy `e_b`; a cell in that bank reads back flipped with probability
//! `exp(-a e_b)`. Sign bits are kept in reliable storage, so only magnitude
//! bits ever flip.

use crate::error::{Error, Result};
use crate::fixedpoint::{FixedPointFormat, FixedPointValue};
use crate::scalar::{pow4, Scalar};
use rand::Rng;

/// Technology factor `a` and the per-bank energy floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryNoiseParams<T: Scalar> {
    a: T,
    e_thres: T,
}

impl<T: Scalar> MemoryNoiseParams<T> {
    pub fn new(a: T, e_thres: T) -> Result<Self> {
        if !(a > T::zero()) || !a.is_finite_value() {
            return Err(Error::InvalidParameter {
                name: "a",
                reason: format!("must be positive and finite, got {a}"),
            });
        }
        if !(e_thres >= T::zero()) || !e_thres.is_finite_value() {
            return Err(Error::InvalidParameter {
                name: "e_thres",
                reason: format!("must be non-negative and finite, got {e_thres}"),
            });
        }
        Ok(Self { a, e_thres })
    }

    pub fn a(&self) -> T {
        self.a
    }

    pub fn e_thres(&self) -> T {
        self.e_thres
    }
}

/// Per-bank energies `e_{-m}, ..., e_{n-1}`, least significant first.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyVector<T: Scalar> {
    format: FixedPointFormat,
    energies: Vec<T>,
}

impl<T: Scalar> EnergyVector<T> {
    /// `energies[i]` is the energy of the bank holding significance `i - m`.
    /// Infinite energies are allowed and mean a perfectly reliable bank.
    pub fn new(format: FixedPointFormat, energies: Vec<T>) -> Result<Self> {
        if energies.len() != format.bits() as usize {
            return Err(Error::InvalidEnergy(format!(
                "{} energies for a {}-bit format",
                energies.len(),
                format.bits()
            )));
        }
        if let Some(e) = energies.iter().find(|e| e.is_nan_value() || **e < T::zero()) {
            return Err(Error::InvalidEnergy(format!("negative or NaN bank energy {e}")));
        }
        Ok(Self { format, energies })
    }

    pub fn uniform(format: FixedPointFormat, energy: T) -> Result<Self> {
        Self::new(format, vec![energy; format.bits() as usize])
    }

    /// Splits `e_tot` evenly over all banks.
    pub fn uniform_total(format: FixedPointFormat, e_tot: T) -> Result<Self> {
        Self::uniform(format, e_tot / T::from_usize_lossy(format.bits() as usize))
    }

    /// Every bank infinitely reliable (no flips at all).
    pub fn reliable(format: FixedPointFormat) -> Self {
        Self {
            format,
            energies: vec![T::infinity(); format.bits() as usize],
        }
    }

    pub fn format(&self) -> FixedPointFormat {
        self.format
    }

    pub fn energies(&self) -> &[T] {
        &self.energies
    }

    /// Energy of the bank storing significance `b`.
    pub fn energy(&self, significance: i32) -> T {
        self.energies[self.format.bit_index(significance)]
    }

    pub fn total_energy(&self) -> T {
        self.energies.iter().fold(T::zero(), |acc, &e| acc + e)
    }

    pub fn flip_probabilities(&self, params: &MemoryNoiseParams<T>) -> Vec<T> {
        self.energies
            .iter()
            .map(|&e| bit_flip_probability(e, params.a))
            .collect()
    }

    pub fn max_flip_probability(&self, params: &MemoryNoiseParams<T>) -> T {
        self.flip_probabilities(params)
            .into_iter()
            .fold(T::zero(), |acc, p| acc.max(p))
    }

    pub fn is_reliable(&self) -> bool {
        self.energies.iter().all(|e| !e.is_finite_value())
    }
}

/// `p = exp(-e a)`.
pub fn bit_flip_probability<T: Scalar>(energy: T, a: T) -> T {
    (-(energy * a)).exp()
}

/// Storage noise variance `sum_b 4^b exp(-a e_b)`.
pub fn memory_noise_variance<T: Scalar>(ev: &EnergyVector<T>, params: &MemoryNoiseParams<T>) -> T {
    ev.format
        .bit_positions()
        .zip(&ev.energies)
        .fold(T::zero(), |acc, (b, &e)| {
            acc + pow4::<T>(b) * bit_flip_probability(e, params.a)
        })
}

pub fn total_energy<T: Scalar>(ev: &EnergyVector<T>) -> T {
    ev.total_energy()
}

/// Precomputed per-bit flip thresholds for fast fault injection.
///
/// Bit `i` of a stored magnitude flips when a fresh `u64` draw falls below
/// `thresholds[i]`, i.e. with probability `thresholds[i] / 2^64`. Banks with
/// `p = 1` always flip and banks with `p = 0` consume no randomness.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitFlipChannel {
    format: FixedPointFormat,
    thresholds: Vec<(u32, u64)>,
    always: u64,
}

impl BitFlipChannel {
    pub fn new<T: Scalar>(ev: &EnergyVector<T>, params: &MemoryNoiseParams<T>) -> Self {
        let mut thresholds = Vec::new();
        let mut always = 0u64;
        for (i, p) in ev.flip_probabilities(params).into_iter().enumerate() {
            let p = p.as_f64();
            if p >= 1.0 {
                always |= 1 << i;
            } else {
                // 2^64 * p; the float-to-int cast saturates.
                let t = (p * 18_446_744_073_709_551_616.0) as u64;
                if t > 0 {
                    thresholds.push((i as u32, t));
                }
            }
        }
        Self {
            format: ev.format,
            thresholds,
            always,
        }
    }

    pub fn format(&self) -> FixedPointFormat {
        self.format
    }

    /// True when no bit can ever flip.
    pub fn is_noiseless(&self) -> bool {
        self.thresholds.is_empty() && self.always == 0
    }

    pub fn flip_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let mut mask = self.always;
        for &(bit, t) in &self.thresholds {
            if rng.next_u64() < t {
                mask |= 1 << bit;
            }
        }
        mask
    }

    /// Reads `v` back through the faulty banks.
    pub fn corrupt<R: Rng + ?Sized>(&self, v: FixedPointValue, rng: &mut R) -> FixedPointValue {
        debug_assert_eq!(v.format(), self.format);
        if self.is_noiseless() {
            return v;
        }
        v.with_flipped_bits(self.flip_mask(rng))
    }
}

/// One read of `v` from memory banks with energies `ev`.
pub fn corrupt<T: Scalar, R: Rng + ?Sized>(
    v: FixedPointValue,
    ev: &EnergyVector<T>,
    params: &MemoryNoiseParams<T>,
    rng: &mut R,
) -> Result<FixedPointValue> {
    if v.format() != ev.format {
        return Err(Error::InvalidParameter {
            name: "v",
            reason: format!("format {} differs from energy vector format {}", v.format(), ev.format),
        });
    }
    Ok(BitFlipChannel::new(ev, params).corrupt(v, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixedpoint::quantize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> MemoryNoiseParams<f64> {
        MemoryNoiseParams::new(12.8, 0.1).unwrap()
    }

    #[test]
    fn probability_endpoints() {
        assert_eq!(bit_flip_probability(0.0, 12.8), 1.0);
        let e = 100f64.ln() / 12.8;
        assert!((e - 0.359779).abs() < 1e-6);
        assert!((bit_flip_probability(e, 12.8) - 0.01).abs() < 1e-15);
        assert_eq!(bit_flip_probability(f64::INFINITY, 12.8), 0.0);
    }

    #[test]
    fn probability_is_strictly_decreasing() {
        let ps: Vec<f64> = (0..50).map(|i| bit_flip_probability(i as f64 * 0.1, 12.8)).collect();
        assert!(ps.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn params_validation() {
        assert!(MemoryNoiseParams::new(0.0, 0.1).is_err());
        assert!(MemoryNoiseParams::new(1.0, -0.1).is_err());
        assert!(MemoryNoiseParams::new(f64::NAN, 0.1).is_err());
    }

    #[test]
    fn energy_vector_validation() {
        let f = FixedPointFormat::new(2, 2).unwrap();
        assert!(EnergyVector::new(f, vec![1.0; 3]).is_err());
        assert!(EnergyVector::new(f, vec![1.0, -1.0, 1.0, 1.0]).is_err());
        let ev = EnergyVector::new(f, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(ev.energy(-2), 0.1);
        assert_eq!(ev.energy(1), 0.4);
    }

    #[test]
    fn total_energy_cases() {
        let f = FixedPointFormat::new(3, 5).unwrap();
        assert_eq!(EnergyVector::uniform(f, 0.0).unwrap().total_energy(), 0.0);
        assert!((total_energy(&EnergyVector::<f64>::uniform(f, 0.7).unwrap()) - 5.6).abs() < 1e-12);
    }

    #[test]
    fn noise_variance_cases() {
        let p = params();
        let f = FixedPointFormat::new(1, 0).unwrap();
        assert_eq!(memory_noise_variance(&EnergyVector::reliable(f), &p), 0.0);
        let e = 100f64.ln() / 12.8;
        let v = memory_noise_variance(&EnergyVector::uniform(f, e).unwrap(), &p);
        assert!((v - 0.01).abs() < 1e-15);

        let f = FixedPointFormat::new(4, 4).unwrap();
        let e = 1000f64.ln() / 12.8;
        let v = memory_noise_variance(&EnergyVector::uniform(f, e).unwrap(), &p);
        let weight: f64 = (-4..4).map(|b| 4f64.powi(b)).sum();
        assert!((v - 1e-3 * weight).abs() < 1e-12 * weight);
    }

    #[test]
    fn reliable_memory_never_flips() {
        let f = FixedPointFormat::new(4, 6).unwrap();
        let ev = EnergyVector::reliable(f);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = quantize(-3.3f64, f).value;
        for _ in 0..100 {
            assert_eq!(corrupt(v, &ev, &params(), &mut rng).unwrap(), v);
        }
        assert!(BitFlipChannel::new(&ev, &params()).is_noiseless());
    }

    #[test]
    fn zero_energy_complements_magnitude() {
        let f = FixedPointFormat::new(4, 6).unwrap();
        let ev = EnergyVector::uniform(f, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = quantize(-3.3f64, f).value;
        let c = corrupt(v, &ev, &params(), &mut rng).unwrap();
        assert!(c.is_negative());
        assert_eq!(c.magnitude(), !v.magnitude() & f.max_raw());
    }

    #[test]
    fn format_mismatch_is_rejected() {
        let ev = EnergyVector::<f64>::reliable(FixedPointFormat::new(4, 6).unwrap());
        let v = FixedPointFormat::new(4, 5).unwrap().zero();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(corrupt(v, &ev, &params(), &mut rng).is_err());
    }
}
