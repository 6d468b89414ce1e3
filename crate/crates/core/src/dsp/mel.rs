use super::stft::{stft, Spectrogram};
use super::AudioSignal;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower clamp applied to mel energies before the log.
pub const MEL_FLOOR: f64 = 1e-5;

/// Analysis settings for the log-mel frontend.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 22050,
            n_fft: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 11025.0,
        }
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on `n_mels + 2` equally mel-spaced points.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank<S> {
    pub n_mels: usize,
    pub n_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// `n_mels x n_bins`, row-major.
    pub weights: Vec<S>,
    /// Center frequency of each filter in Hz.
    pub centers: Vec<f64>,
}

impl<S: Scalar> MelFilterbank<S> {
    pub fn new(n_fft: usize, n_mels: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Self> {
        if n_mels < 2 {
            return Err(Error::Config(format!("n_mels must be >= 2, got {n_mels}")));
        }
        if fmax <= fmin {
            return Err(Error::Config(format!("fmax {fmax} must exceed fmin {fmin}")));
        }
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let points: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz: Vec<f64> = (0..n_bins)
            .map(|k| k as f64 * sample_rate as f64 / n_fft as f64)
            .collect();
        let mut weights = Vec::with_capacity(n_mels * n_bins);
        for m in 0..n_mels {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            for &f in &bin_hz {
                let up = (f - left) / (center - left);
                let down = (right - f) / (right - center);
                weights.push(S::lit(up.min(down).max(0.0)));
            }
        }
        Ok(MelFilterbank {
            n_mels,
            n_bins,
            fmin,
            fmax,
            weights,
            centers: points[1..=n_mels].to_vec(),
        })
    }

    pub fn from_config(cfg: &MelConfig) -> Result<Self> {
        Self::new(cfg.n_fft, cfg.n_mels, cfg.sample_rate, cfg.fmin, cfg.fmax)
    }

    pub fn row(&self, m: usize) -> &[S] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Mel energies of one magnitude frame.
    pub fn apply(&self, magnitudes: &[S]) -> Vec<S> {
        (0..self.n_mels)
            .map(|m| self.row(m).iter().zip(magnitudes).map(|(&w, &x)| w * x).sum())
            .collect()
    }

    /// Minimum-norm linear magnitudes reproducing `mel` under this filterbank,
    /// clamped at zero: `W^T (W W^T)^{-1} mel`.
    pub fn pseudo_inverse(&self) -> Result<PseudoInverse<S>> {
        let n = self.n_mels;
        let mut gram = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i..n {
                let v: f64 = self
                    .row(i)
                    .iter()
                    .zip(self.row(j))
                    .map(|(&a, &b)| a.as_f64() * b.as_f64())
                    .sum();
                gram[i * n + j] = v;
                gram[j * n + i] = v;
            }
        }
        let chol = cholesky(&gram, n)
            .ok_or_else(|| Error::Config("mel filterbank Gram matrix is singular".into()))?;
        Ok(PseudoInverse {
            n,
            chol,
            bank: self.clone(),
        })
    }
}

/// Factored solver for the filterbank pseudo-inverse.
#[derive(Clone, Debug)]
pub struct PseudoInverse<S> {
    n: usize,
    chol: Vec<f64>,
    bank: MelFilterbank<S>,
}

impl<S: Scalar> PseudoInverse<S> {
    pub fn linear_magnitudes(&self, mel: &[S]) -> Vec<S> {
        let n = self.n;
        let mut z: Vec<f64> = mel.iter().map(|v| v.as_f64()).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|k| self.chol[i * n + k] * z[k]).sum();
            z[i] = (z[i] - s) / self.chol[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| self.chol[k * n + i] * z[k]).sum();
            z[i] = (z[i] - s) / self.chol[i * n + i];
        }
        (0..self.bank.n_bins)
            .map(|k| {
                let v: f64 = (0..n)
                    .map(|m| self.bank.weights[m * self.bank.n_bins + k].as_f64() * z[m])
                    .sum();
                S::lit(v.max(0.0))
            })
            .collect()
    }
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 {
                    return None;
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// `T x n_mels` matrix of natural-log mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram<S> {
    pub frames: Tensor<S>,
    pub hop: u32,
    pub sample_rate: u32,
}

impl<S: Scalar> MelSpectrogram<S> {
    pub fn new(frames: Tensor<S>, hop: u32, sample_rate: u32) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::dim("mel_spectrogram", frames.shape(), &[0, 0]));
        }
        Ok(MelSpectrogram {
            frames,
            hop,
            sample_rate,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.cols()
    }

    pub fn floor_log() -> S {
        S::lit(MEL_FLOOR.ln())
    }
}

/// Log-mel energies of the magnitude STFT of `signal`.
pub fn mel_spectrogram<S: Scalar>(
    signal: &AudioSignal<S>,
    cfg: &MelConfig,
) -> Result<MelSpectrogram<S>> {
    let bank = MelFilterbank::from_config(cfg)?;
    let spec = stft(&signal.samples, cfg.n_fft, cfg.hop)?;
    log_mel(&spec, &bank, cfg)
}

pub(crate) fn log_mel<S: Scalar>(
    spec: &Spectrogram<S>,
    bank: &MelFilterbank<S>,
    cfg: &MelConfig,
) -> Result<MelSpectrogram<S>> {
    let mags = spec.magnitudes();
    let floor = S::lit(MEL_FLOOR);
    let nb = spec.n_bins();
    let mut data = Vec::with_capacity(spec.n_frames * bank.n_mels);
    for t in 0..spec.n_frames {
        data.extend(
            bank.apply(&mags[t * nb..(t + 1) * nb])
                .into_iter()
                .map(|e| e.max(floor).ln()),
        );
    }
    let frames = Tensor::new([spec.n_frames, bank.n_mels], data)?;
    MelSpectrogram::new(frames, cfg.hop as u32, cfg.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> MelFilterbank<f64> {
        MelFilterbank::from_config(&MelConfig::default()).unwrap()
    }

    #[test]
    fn htk_reference_point() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-9);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filters_are_positive_ordered_triangles() {
        let b = bank();
        assert_eq!(b.weights.len(), 80 * 513);
        for m in 0..80 {
            let row = b.row(m);
            assert!(row.iter().sum::<f64>() > 0.0);
            assert!(row.iter().all(|&w| w >= 0.0));
            let peak = row.iter().cloned().fold(0.0, f64::max);
            assert_eq!(row.iter().filter(|&&w| w == peak).count(), 1, "row {m}");
        }
        assert!(b.centers.windows(2).all(|w| w[0] < w[1]));
        for k in 0..513 {
            let covered = (0..80).filter(|&m| b.row(m)[k] > 0.0).count();
            assert!(covered <= 2);
        }
    }

    #[test]
    fn bad_ranges_rejected() {
        assert!(MelFilterbank::<f64>::new(1024, 80, 22050, 100.0, 100.0).is_err());
        assert!(MelFilterbank::<f64>::new(1024, 1, 22050, 0.0, 8000.0).is_err());
    }

    #[test]
    fn zero_signal_sits_at_floor() {
        let sig = AudioSignal::new(vec![0.0f64; 4096], 22050).unwrap();
        let mel = mel_spectrogram(&sig, &MelConfig::default()).unwrap();
        assert_eq!(mel.n_mels(), 80);
        assert!(mel.frames.data().iter().all(|&v| v == MEL_FLOOR.ln()));
    }
}
