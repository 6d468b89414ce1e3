//! Iterative radix-2 Cooley-Tukey FFT.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_len(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Config(format!("FFT length {n} is not a power of two")));
    }
    Ok(())
}

fn transform<S: Scalar>(buf: &mut [Complex<S>], inverse: bool) -> Result<()> {
    let n = buf.len();
    check_len(n)?;
    let bits = n.trailing_zeros();
    if bits > 0 {
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                buf.swap(i, j);
            }
        }
    }
    let sign = if inverse { S::one() } else { -S::one() };
    let mut len = 2;
    while len <= n {
        let angle = sign * S::lit(2.0) * S::PI() / S::from_usize(len);
        let half = len / 2;
        // Twiddles are evaluated directly rather than by repeated
        // multiplication so the error does not grow with `half`.
        let twiddles: Vec<Complex<S>> = (0..half)
            .map(|k| Complex::from_polar(S::one(), angle * S::from_usize(k)))
            .collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let a = buf[start + k];
                let b = buf[start + k + half] * twiddles[k];
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
    if inverse {
        let scale = S::one() / S::from_usize(n);
        for x in buf.iter_mut() {
            *x = *x * scale;
        }
    }
    Ok(())
}

/// Forward DFT, `X[k] = sum_n x[n] e^{-2 pi i k n / N}`.
pub fn fft<S: Scalar>(buf: &mut [Complex<S>]) -> Result<()> {
    transform(buf, false)
}

/// Inverse DFT including the `1/N` factor.
pub fn ifft<S: Scalar>(buf: &mut [Complex<S>]) -> Result<()> {
    transform(buf, true)
}

/// Non-negative-frequency half spectrum of a real signal (`N/2 + 1` bins).
pub fn rfft<S: Scalar>(signal: &[S]) -> Result<Vec<Complex<S>>> {
    let mut buf: Vec<Complex<S>> = signal.iter().map(|&x| Complex::new(x, S::zero())).collect();
    fft(&mut buf)?;
    buf.truncate(signal.len() / 2 + 1);
    Ok(buf)
}

/// Real signal of length `n` from its half spectrum, using Hermitian symmetry.
pub fn irfft<S: Scalar>(half: &[Complex<S>], n: usize) -> Result<Vec<S>> {
    check_len(n)?;
    if half.len() != n / 2 + 1 {
        return Err(Error::dim("irfft", &[half.len()], &[n / 2 + 1]));
    }
    let mut buf = vec![Complex::new(S::zero(), S::zero()); n];
    buf[..half.len()].copy_from_slice(half);
    for k in 1..n / 2 {
        buf[n - k] = half[k].conj();
    }
    ifft(&mut buf)?;
    Ok(buf.into_iter().map(|c| c.re).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = vec![Complex::new(0.0f64, 0.0); 8];
        x[0].re = 1.0;
        fft(&mut x).unwrap();
        for c in &x {
            assert!((c.norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_naive_dft() {
        let x: Vec<f64> = (0..16).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let fast = rfft(&x).unwrap();
        for (k, c) in fast.iter().enumerate() {
            let mut acc = Complex::new(0.0, 0.0);
            for (n, &v) in x.iter().enumerate() {
                let a = -2.0 * std::f64::consts::PI * (k * n) as f64 / 16.0;
                acc += Complex::from_polar(v, a);
            }
            assert!((acc - c).norm() < 1e-12);
        }
    }

    #[test]
    fn non_power_of_two_rejected() {
        let mut x = vec![Complex::new(0.0f64, 0.0); 6];
        assert!(matches!(fft(&mut x), Err(Error::Config(_))));
    }
}
