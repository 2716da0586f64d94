//! Sign-magnitude fixed-point numbers.
//!
//! A value is stored as one sign bit plus `B = n + m` magnitude bits, the
//! magnitude being an unsigned integer in units of `2^-m`. Bit `b` of the
//! magnitude (for `b` in `-m..n`) lives at integer bit index `b + m`.
//!
//! All arithmetic on stored values is exact integer arithmetic; rounding only
//! happens where a real number or a double-width product is brought back to
//! the format, always to nearest with ties away from zero, saturating at the
//! largest representable magnitude.

use crate::error::{Error, Result};
use crate::scalar::{pow2, Scalar};
use nalgebra::DMatrix;

/// Signed Q-format descriptor: `n` integer bits, `m` fractional bits and a
/// separate sign bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FixedPointFormat {
    n: u32,
    m: u32,
}

impl FixedPointFormat {
    /// Largest supported magnitude width. Keeps every magnitude exactly
    /// representable in an `f64` mantissa.
    pub const MAX_BITS: u32 = 53;

    pub fn new(n: u32, m: u32) -> Result<Self> {
        if n + m == 0 {
            return Err(Error::InvalidFormat {
                n,
                m,
                reason: "at least one magnitude bit is required",
            });
        }
        if n + m > Self::MAX_BITS {
            return Err(Error::InvalidFormat {
                n,
                m,
                reason: "more than 53 magnitude bits",
            });
        }
        Ok(Self { n, m })
    }

    /// Integer bits.
    pub fn n(&self) -> u32 {
        self.n
    }

    /// Fractional bits.
    pub fn m(&self) -> u32 {
        self.m
    }

    /// Magnitude bits `B = n + m` (the sign bit is not counted).
    pub fn bits(&self) -> u32 {
        self.n + self.m
    }

    /// Largest raw magnitude, `2^B - 1`.
    pub fn max_raw(&self) -> u64 {
        (1u64 << self.bits()) - 1
    }

    /// Distance between adjacent representable values, `2^-m`.
    pub fn step<T: Scalar>(&self) -> T {
        pow2(-(self.m as i32))
    }

    /// Largest representable magnitude, `2^n - 2^-m`.
    pub fn max_value<T: Scalar>(&self) -> T {
        T::lit(self.max_raw() as f64) * self.step::<T>()
    }

    /// Bit significances from least to most significant: `-m, ..., n-1`.
    pub fn bit_positions(&self) -> impl Iterator<Item = i32> + Clone {
        -(self.m as i32)..self.n as i32
    }

    /// Index into the raw magnitude (and into energy vectors) of the bit
    /// with significance `b`.
    pub fn bit_index(&self, significance: i32) -> usize {
        debug_assert!(significance >= -(self.m as i32) && significance < self.n as i32);
        (significance + self.m as i32) as usize
    }

    pub fn zero(&self) -> FixedPointValue {
        FixedPointValue {
            negative: false,
            magnitude: 0,
            format: *self,
        }
    }
}

impl std::fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Q{}.{}", self.n, self.m)
    }
}

/// A stored sign-magnitude value. Negative zero is a distinct bit pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FixedPointValue {
    negative: bool,
    magnitude: u64,
    format: FixedPointFormat,
}

/// Result of rounding a real number (or a product) into a format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rounded {
    pub value: FixedPointValue,
    pub saturated: bool,
}

impl FixedPointValue {
    pub fn from_parts(negative: bool, magnitude: u64, format: FixedPointFormat) -> Result<Self> {
        if magnitude > format.max_raw() {
            return Err(Error::InvalidParameter {
                name: "magnitude",
                reason: format!("{magnitude} does not fit in {} bits", format.bits()),
            });
        }
        Ok(Self {
            negative,
            magnitude,
            format,
        })
    }

    pub fn is_negative(&self) -> bool {
        self.negative
    }

    /// Raw magnitude in units of `2^-m`.
    pub fn magnitude(&self) -> u64 {
        self.magnitude
    }

    pub fn format(&self) -> FixedPointFormat {
        self.format
    }

    /// Value of the magnitude bit with significance `b`.
    pub fn bit(&self, significance: i32) -> bool {
        (self.magnitude >> self.format.bit_index(significance)) & 1 == 1
    }

    /// Flips the magnitude bits set in `mask`; the sign is left alone.
    pub fn with_flipped_bits(&self, mask: u64) -> Self {
        Self {
            magnitude: (self.magnitude ^ mask) & self.format.max_raw(),
            ..*self
        }
    }

    /// Signed raw integer (magnitude with sign applied).
    pub fn signed_raw(&self) -> i128 {
        if self.negative {
            -(self.magnitude as i128)
        } else {
            self.magnitude as i128
        }
    }

    pub fn to_real<T: Scalar>(&self) -> T {
        let mag = T::lit(self.magnitude as f64) * self.format.step::<T>();
        if self.negative {
            -mag
        } else {
            mag
        }
    }

    fn from_signed_raw(raw: i128, format: FixedPointFormat) -> Self {
        Self {
            negative: raw < 0,
            magnitude: raw.unsigned_abs() as u64,
            format,
        }
    }
}

/// Rounds `value` to the nearest representable number of `fmt`, ties away
/// from zero. Magnitudes beyond `2^n - 2^-m` (including infinities) saturate.
///
/// Panics on NaN.
pub fn quantize<T: Scalar>(value: T, fmt: FixedPointFormat) -> Rounded {
    assert!(!value.is_nan_value(), "cannot quantize NaN");
    let negative = value.is_sign_negative();
    let scaled = value.abs() * pow2::<T>(fmt.m as i32);
    let rounded = scaled.round();
    let max_raw = fmt.max_raw();
    let (magnitude, saturated) = if !rounded.is_finite_value() || rounded > T::lit(max_raw as f64) {
        (max_raw, true)
    } else {
        (rounded.to_u64().expect("rounded magnitude fits in u64"), false)
    };
    Rounded {
        value: FixedPointValue {
            negative,
            magnitude,
            format: fmt,
        },
        saturated,
    }
}

/// Variance of the uniform rounding error, `2^-2m / 12`.
pub fn quantization_noise_variance<T: Scalar>(fmt: FixedPointFormat) -> T {
    pow2::<T>(-2 * fmt.m as i32) / T::lit(12.0)
}

/// Exact product of two stored values, rounded once back to the format.
pub fn fp_mul(a: FixedPointValue, b: FixedPointValue) -> Rounded {
    debug_assert_eq!(a.format, b.format);
    let fmt = a.format;
    let raw = round_product(a.magnitude as u128 * b.magnitude as u128, fmt.m);
    let max_raw = fmt.max_raw() as u128;
    let saturated = raw > max_raw;
    Rounded {
        value: FixedPointValue {
            negative: a.negative != b.negative,
            magnitude: raw.min(max_raw) as u64,
            format: fmt,
        },
        saturated,
    }
}

/// Brings a product with `2m` fractional bits back to `m` bits, half away
/// from zero (the magnitude is non-negative, so half-up).
#[inline]
fn round_product(product: u128, m: u32) -> u128 {
    if m == 0 {
        product
    } else {
        (product + (1u128 << (m - 1))) >> m
    }
}

/// Element-wise quantized matrix together with the exact residual
/// `delta = Q(mat) - mat`.
#[derive(Clone, Debug)]
pub struct QuantizedMatrix<T: Scalar> {
    rows: usize,
    cols: usize,
    format: FixedPointFormat,
    values: Vec<FixedPointValue>,
    delta: DMatrix<T>,
    saturated: Vec<(usize, usize)>,
}

/// Element-wise [`quantize`] of a full-precision matrix.
pub fn quantize_matrix<T: Scalar>(mat: &DMatrix<T>, fmt: FixedPointFormat) -> Result<QuantizedMatrix<T>> {
    if mat.iter().any(|v| !v.is_finite_value()) {
        return Err(Error::NonFinite("matrix to quantize"));
    }
    let (rows, cols) = mat.shape();
    let mut values = Vec::with_capacity(rows * cols);
    let mut saturated = Vec::new();
    let mut delta = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let r = quantize(mat[(i, j)], fmt);
            if r.saturated {
                saturated.push((i, j));
            }
            delta[(i, j)] = r.value.to_real::<T>() - mat[(i, j)];
            values.push(r.value);
        }
    }
    Ok(QuantizedMatrix {
        rows,
        cols,
        format: fmt,
        values,
        delta,
        saturated,
    })
}

/// Output of a fixed-point matrix-vector product.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatVec {
    pub values: Vec<FixedPointValue>,
    /// Per output entry: some product or partial sum hit the range limit.
    pub saturated: Vec<bool>,
}

impl<T: Scalar> QuantizedMatrix<T> {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn format(&self) -> FixedPointFormat {
        self.format
    }

    pub fn get(&self, i: usize, j: usize) -> FixedPointValue {
        self.values[i * self.cols + j]
    }

    pub fn delta(&self) -> &DMatrix<T> {
        &self.delta
    }

    /// Entries that saturated when quantized.
    pub fn saturated(&self) -> &[(usize, usize)] {
        &self.saturated
    }

    /// The quantized matrix as real numbers.
    pub fn dequantized(&self) -> DMatrix<T> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).to_real())
    }

    /// Side-by-side concatenation `[self | other]`.
    pub fn hcat(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.format != other.format {
            return Err(Error::dims("hcat", (self.rows, self.cols), other.shape()));
        }
        let cols = self.cols + other.cols;
        let mut values = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            values.extend_from_slice(&self.values[i * self.cols..(i + 1) * self.cols]);
            values.extend_from_slice(&other.values[i * other.cols..(i + 1) * other.cols]);
        }
        let mut delta = DMatrix::zeros(self.rows, cols);
        delta.columns_mut(0, self.cols).copy_from(&self.delta);
        delta.columns_mut(self.cols, other.cols).copy_from(&other.delta);
        let saturated = self
            .saturated
            .iter()
            .copied()
            .chain(other.saturated.iter().map(|&(i, j)| (i, j + self.cols)))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols,
            format: self.format,
            values,
            delta,
            saturated,
        })
    }

    /// Fixed-point `A x`: every scalar product is formed exactly and rounded
    /// once, then the rounded products are summed left to right with
    /// saturation after each addition.
    pub fn matvec(&self, x: &[FixedPointValue]) -> Result<MatVec> {
        let mut values = vec![self.format.zero(); self.rows];
        let mut saturated = vec![false; self.rows];
        self.matvec_into(x, &mut values, &mut saturated)?;
        Ok(MatVec { values, saturated })
    }

    /// Allocation-free [`Self::matvec`]. Returns the number of saturated
    /// output entries.
    pub fn matvec_into(
        &self,
        x: &[FixedPointValue],
        out: &mut [FixedPointValue],
        saturated: &mut [bool],
    ) -> Result<usize> {
        if x.len() != self.cols || out.len() != self.rows || saturated.len() != self.rows {
            return Err(Error::dims(
                "fixed-point matvec",
                (self.rows, self.cols),
                (out.len(), x.len()),
            ));
        }
        if let Some(bad) = x.iter().find(|v| v.format != self.format) {
            return Err(Error::InvalidParameter {
                name: "x",
                reason: format!("format {} differs from matrix format {}", bad.format, self.format),
            });
        }
        let max = self.format.max_raw() as i128;
        let m = self.format.m;
        let mut count = 0;
        for (i, (o, sat)) in out.iter_mut().zip(saturated.iter_mut()).enumerate() {
            let row = &self.values[i * self.cols..(i + 1) * self.cols];
            let mut acc: i128 = 0;
            let mut clipped = false;
            for (a, xv) in row.iter().zip(x) {
                let mag = round_product(a.magnitude as u128 * xv.magnitude as u128, m);
                let mag = if mag > max as u128 {
                    clipped = true;
                    max
                } else {
                    mag as i128
                };
                acc += if a.negative != xv.negative { -mag } else { mag };
                if acc.abs() > max {
                    clipped = true;
                    acc = acc.clamp(-max, max);
                }
            }
            *o = FixedPointValue::from_signed_raw(acc, self.format);
            *sat = clipped;
            count += clipped as usize;
        }
        Ok(count)
    }
}

/// Convenience wrapper matching the operation name used across the crate.
pub fn fp_matvec<T: Scalar>(a: &QuantizedMatrix<T>, x: &[FixedPointValue]) -> Result<MatVec> {
    a.matvec(x)
}
