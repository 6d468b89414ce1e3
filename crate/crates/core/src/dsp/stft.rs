use num_complex::Complex;

use super::fft::{irfft, rfft};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Complex STFT, `n_frames x (n_fft/2 + 1)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram<S> {
    pub n_fft: usize,
    pub hop: usize,
    pub n_frames: usize,
    pub bins: Vec<Complex<S>>,
}

impl<S: Scalar> Spectrogram<S> {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frame(&self, t: usize) -> &[Complex<S>] {
        let nb = self.n_bins();
        &self.bins[t * nb..(t + 1) * nb]
    }

    pub fn magnitudes(&self) -> Vec<S> {
        self.bins.iter().map(|c| c.norm()).collect()
    }
}

/// Periodic Hann window.
pub fn hann<S: Scalar>(n: usize) -> Vec<S> {
    (0..n)
        .map(|i| {
            let phase = S::lit(2.0) * S::PI() * S::from_usize(i) / S::from_usize(n);
            S::lit(0.5) - S::lit(0.5) * phase.cos()
        })
        .collect()
}

fn check(n_fft: usize, hop: usize) -> Result<()> {
    if n_fft < 2 || !n_fft.is_power_of_two() {
        return Err(Error::Config(format!("n_fft {n_fft} is not a power of two")));
    }
    if hop == 0 || hop > n_fft {
        return Err(Error::Config(format!("hop {hop} outside (0, {n_fft}]")));
    }
    Ok(())
}

/// Reflect-pads by `pad` samples on both sides (no edge repeat). Positions the
/// reflection cannot reach in very short signals are zero.
pub(crate) fn reflect_pad<S: Scalar>(x: &[S], pad: usize) -> Vec<S> {
    let n = x.len() as isize;
    (0..x.len() + 2 * pad)
        .map(|i| {
            let mut j = i as isize - pad as isize;
            if j < 0 {
                j = -j;
            }
            if j >= n {
                j = 2 * (n - 1) - j;
            }
            if (0..n).contains(&j) {
                x[j as usize]
            } else {
                S::zero()
            }
        })
        .collect()
}

/// Windowed frames starting at `t * hop` of an already padded signal.
pub(crate) fn analyze<S: Scalar>(
    padded: &[S],
    n_fft: usize,
    hop: usize,
    n_frames: usize,
    window: &[S],
) -> Result<Spectrogram<S>> {
    let nb = n_fft / 2 + 1;
    let mut bins = Vec::with_capacity(n_frames * nb);
    let mut frame = vec![S::zero(); n_fft];
    for t in 0..n_frames {
        let start = t * hop;
        for (i, f) in frame.iter_mut().enumerate() {
            *f = padded.get(start + i).copied().unwrap_or(S::zero()) * window[i];
        }
        bins.extend(rfft(&frame)?);
    }
    Ok(Spectrogram {
        n_fft,
        hop,
        n_frames,
        bins,
    })
}

/// Least-squares inverse: windowed overlap-add divided by the summed squared
/// window. Returns the full padded-domain signal.
pub(crate) fn synthesize<S: Scalar>(spec: &Spectrogram<S>, window: &[S]) -> Result<Vec<S>> {
    let (n_fft, hop) = (spec.n_fft, spec.hop);
    let len = (spec.n_frames - 1) * hop + n_fft;
    let mut out = vec![S::zero(); len];
    let mut norm = vec![S::zero(); len];
    for t in 0..spec.n_frames {
        let frame = irfft(spec.frame(t), n_fft)?;
        let start = t * hop;
        for i in 0..n_fft {
            out[start + i] += frame[i] * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    let tiny = S::lit(1e-11);
    for (o, &w) in out.iter_mut().zip(&norm) {
        if w > tiny {
            *o /= w;
        }
    }
    Ok(out)
}

/// Centered STFT with reflect padding of `n_fft / 2` and a Hann window.
///
/// Produces `floor(len / hop) + 1` frames.
pub fn stft<S: Scalar>(signal: &[S], n_fft: usize, hop: usize) -> Result<Spectrogram<S>> {
    check(n_fft, hop)?;
    let padded = reflect_pad(signal, n_fft / 2);
    let n_frames = signal.len() / hop + 1;
    analyze(&padded, n_fft, hop, n_frames, &hann(n_fft))
}

/// Inverse of [`stft`]; output trimmed to `length` samples.
pub fn istft<S: Scalar>(spec: &Spectrogram<S>, length: usize) -> Result<Vec<S>> {
    check(spec.n_fft, spec.hop)?;
    if spec.n_frames == 0 {
        return Err(Error::Input("istft of an empty spectrogram".into()));
    }
    let full = synthesize(spec, &hann(spec.n_fft))?;
    let start = spec.n_fft / 2;
    Ok((0..length)
        .map(|i| full.get(start + i).copied().unwrap_or(S::zero()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_signal_has_zero_magnitude() {
        let spec = stft(&vec![0.0f64; 2048], 1024, 256).unwrap();
        assert_eq!(spec.n_frames, 2048 / 256 + 1);
        assert!(spec.magnitudes().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let sr = 22050.0;
        let x: Vec<f64> = (0..8192)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / sr).sin())
            .collect();
        let spec = stft(&x, 1024, 256).unwrap();
        let mags = spec.magnitudes();
        let frame = &mags[10 * 513..11 * 513];
        let argmax = (0..513).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
        assert_eq!(argmax, (440.0f64 * 1024.0 / sr).round() as usize);
        assert_eq!(argmax, 20);
    }

    #[test]
    fn bad_configuration_rejected() {
        assert!(stft(&[0.0f64; 100], 1000, 250).is_err());
        assert!(stft(&[0.0f64; 100], 1024, 0).is_err());
        assert!(stft(&[0.0f64; 100], 1024, 2048).is_err());
    }

    #[test]
    fn reflect_padding() {
        let p = reflect_pad(&[1.0f64, 2.0, 3.0, 4.0], 2);
        assert_eq!(p, vec![3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0]);
    }
}
