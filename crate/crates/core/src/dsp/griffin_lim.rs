use num_complex::Complex;

use super::mel::{MelConfig, MelFilterbank, MelSpectrogram};
use super::stft::{analyze, hann, synthesize, Spectrogram};
use super::AudioSignal;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_ITERATIONS: usize = 60;
const TARGET_PEAK: f64 = 0.95;
/// Below this peak the output is treated as silence and left unscaled.
const SILENCE_PEAK: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GriffinLimOutput<S> {
    pub signal: AudioSignal<S>,
    /// Peak absolute sample before normalization.
    pub raw_peak: S,
    /// `|| |STFT(x_k)| - S || / ||S||` after each iteration.
    pub spectral_convergence: Vec<S>,
}

/// Inverts a log-mel spectrogram to audio.
///
/// Linear magnitudes come from the filterbank pseudo-inverse; phase is then
/// estimated by alternating projections starting from zero phase. Iterations
/// run on the padded signal so every synthesis step is the exact least-squares
/// inverse of the analysis that follows it.
pub fn griffin_lim<S: Scalar>(
    mel: &MelSpectrogram<S>,
    cfg: &MelConfig,
    iterations: usize,
) -> Result<GriffinLimOutput<S>> {
    if iterations == 0 {
        return Err(Error::Config("griffin_lim needs at least one iteration".into()));
    }
    if mel.n_mels() != cfg.n_mels {
        return Err(Error::dim("griffin_lim", mel.frames.shape(), &[cfg.n_mels]));
    }
    let bank = MelFilterbank::<S>::from_config(cfg)?;
    let pinv = bank.pseudo_inverse()?;
    let (n_fft, hop) = (cfg.n_fft, cfg.hop);
    let n_frames = mel.n_frames();
    let nb = n_fft / 2 + 1;

    let mut target = Vec::with_capacity(n_frames * nb);
    for t in 0..n_frames {
        let energies: Vec<S> = mel.frames.row(t).iter().map(|v| v.exp()).collect();
        target.extend(pinv.linear_magnitudes(&energies));
    }
    let target_norm = target.iter().map(|&m| m * m).sum::<S>().sqrt();

    let window = hann::<S>(n_fft);
    let mut spec = Spectrogram {
        n_fft,
        hop,
        n_frames,
        bins: target.iter().map(|&m| Complex::new(m, S::zero())).collect(),
    };
    let mut convergence = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let padded = synthesize(&spec, &window)?;
        let rebuilt = analyze(&padded, n_fft, hop, n_frames, &window)?;
        let mut err = S::zero();
        for ((dst, est), &mag) in spec.bins.iter_mut().zip(&rebuilt.bins).zip(&target) {
            let norm = est.norm();
            err += (norm - mag) * (norm - mag);
            *dst = if norm > S::zero() {
                est * (mag / norm)
            } else {
                Complex::new(mag, S::zero())
            };
        }
        convergence.push(if target_norm > S::zero() {
            err.sqrt() / target_norm
        } else {
            S::zero()
        });
    }

    let padded = synthesize(&spec, &window)?;
    let len = (n_frames - 1) * hop;
    let mut samples: Vec<S> = padded[n_fft / 2..n_fft / 2 + len].to_vec();
    let raw_peak = samples.iter().fold(S::zero(), |m, &x| m.max(x.abs()));
    if raw_peak >= S::lit(SILENCE_PEAK) {
        let scale = S::lit(TARGET_PEAK) / raw_peak;
        samples.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(GriffinLimOutput {
        signal: AudioSignal::new(samples, cfg.sample_rate)?,
        raw_peak,
        spectral_convergence: convergence,
    })
}
