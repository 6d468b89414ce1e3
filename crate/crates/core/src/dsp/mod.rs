//! Spectral frontend and inverse: STFT, log-mel analysis and Griffin-Lim.

mod fft;
mod griffin_lim;
mod io;
mod mel;
mod stft;

pub use fft::{fft, ifft, irfft, rfft};
pub use griffin_lim::{griffin_lim, GriffinLimOutput, DEFAULT_ITERATIONS};
pub use io::{decode_mel, encode_mel, encode_wav, read_mel, read_wav, write_mel, write_wav, MEL_MAGIC,
    MEL_VERSION,
};
pub use mel::{
    hz_to_mel, mel_spectrogram, mel_to_hz, MelConfig, MelFilterbank, MelSpectrogram,
    PseudoInverse, MEL_FLOOR,
};
pub use stft::{hann, istft, stft, Spectrogram};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal<S> {
    pub samples: Vec<S>,
    pub sample_rate: u32,
}

impl<S: Scalar> AudioSignal<S> {
    pub fn new(samples: Vec<S>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(bad) = samples.iter().find(|x| !x.is_finite() || x.abs() > S::one()) {
            return Err(Error::Input(format!("audio sample {bad} outside [-1, 1]")));
        }
        Ok(AudioSignal {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// `amplitude * sin(2 pi f t)` sampled for `len` samples.
    pub fn sine(freq: f64, amplitude: f64, len: usize, sample_rate: u32) -> Result<Self> {
        let samples = (0..len)
            .map(|i| {
                let t = i as f64 / sample_rate as f64;
                S::lit(amplitude * (2.0 * std::f64::consts::PI * freq * t).sin())
            })
            .collect();
        Self::new(samples, sample_rate)
    }
}
