use crate::dsp::{MelSpectrogram, MEL_FLOOR};
use crate::error::Result;
use crate::model::VarianceTargets;
use crate::tensor::Tensor;

pub const ORACLE_N_MELS: usize = 80;
pub const ORACLE_HOP: u32 = 256;
pub const ORACLE_SAMPLE_RATE: u32 = 22050;
const BUMP_SIGMA: f64 = 3.0;

/// Rounds through f32 so generated values survive the corpus file exactly.
fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

pub fn phoneme_duration(p: usize) -> usize {
    2 + p % 4
}

pub fn phoneme_pitch(p: usize) -> f64 {
    f32_exact(100.0 + 5.0 * p as f64)
}

pub fn phoneme_energy(p: usize) -> f64 {
    f32_exact(0.5 + 0.01 * p as f64)
}

/// Log-mel frame of phoneme `p` spoken by `speaker`: a Gaussian bump of width
/// 3 bins centered at `4 + p mod 72 + speaker mod 5`, scaled by
/// `1 + 0.1 * speaker`, over a background at the log floor.
pub fn oracle_frame(p: usize, speaker: usize) -> Vec<f64> {
    let center = (4 + p % 72 + speaker % 5) as f64;
    let amplitude = 1.0 + 0.1 * speaker as f64;
    (0..ORACLE_N_MELS)
        .map(|b| {
            let z = (b as f64 - center) / BUMP_SIGMA;
            let energy = amplitude * (-0.5 * z * z).exp();
            f32_exact(energy.max(MEL_FLOOR).ln())
        })
        .collect()
}

/// Deterministic ground truth for a phoneme sequence and speaker.
pub fn oracle_mel(phonemes: &[usize], speaker: usize) -> Result<(MelSpectrogram<f64>, VarianceTargets)> {
    let targets = VarianceTargets {
        duration: phonemes.iter().map(|&p| phoneme_duration(p)).collect(),
        pitch: phonemes.iter().map(|&p| phoneme_pitch(p)).collect(),
        energy: phonemes.iter().map(|&p| phoneme_energy(p)).collect(),
    };
    let frames = targets.total_frames();
    let mut data = Vec::with_capacity(frames * ORACLE_N_MELS);
    for (&p, &d) in phonemes.iter().zip(&targets.duration) {
        let frame = oracle_frame(p, speaker);
        for _ in 0..d {
            data.extend_from_slice(&frame);
        }
    }
    let mel = MelSpectrogram::new(
        Tensor::new([frames, ORACLE_N_MELS], data)?,
        ORACLE_HOP,
        ORACLE_SAMPLE_RATE,
    )?;
    Ok((mel, targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_aligned() {
        let (a, ta) = oracle_mel(&[3, 9, 17], 1).unwrap();
        let (b, tb) = oracle_mel(&[3, 9, 17], 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.total_frames(), a.n_frames());
        assert_eq!(ta.duration, vec![5, 3, 3]);
        assert_eq!(ta.pitch, vec![115.0, 145.0, 185.0]);
    }

    #[test]
    fn speakers_differ() {
        let ph = [0, 5, 11, 30];
        let (m0, _) = oracle_mel(&ph, 0).unwrap();
        let (m2, _) = oracle_mel(&ph, 2).unwrap();
        assert!(m0.frames.max_abs_diff(&m2.frames) > 0.1);
    }

    #[test]
    fn values_bounded_below_by_floor() {
        let f = oracle_frame(7, 2);
        let floor = MEL_FLOOR.ln() as f32 as f64;
        assert!(f.iter().all(|&v| v >= floor));
        let peak = (0..80).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
        assert_eq!(peak, 4 + 7 + 2);
    }
}
