use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{Backbone, ForwardOutput, Mode, SpeakerRef};
use crate::tensor::{Bound, Graph, NodeId, Tensor};

/// Values of every loss term at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub hard: f64,
    pub reference: f64,
    pub total: f64,
    pub omega: f64,
    /// Duration (log domain), pitch and energy predictor losses.
    pub variance: [f64; 3],
}

impl LossBreakdown {
    /// Residual of `total == hard + omega * ref + sum(variance)`, relative to
    /// the magnitude of `total`.
    pub fn identity_error(&self) -> f64 {
        let [d, p, e] = self.variance;
        let rhs = self.hard + self.omega * self.reference + d + p + e;
        (self.total - rhs).abs() / self.total.abs().max(f64::MIN_POSITIVE)
    }
}

/// `hard + omega * ref + dur + pitch + energy`, summed in that order.
pub fn total_loss(hard: f64, reference: f64, variance: [f64; 3], omega: f64) -> LossBreakdown {
    let [d, p, e] = variance;
    LossBreakdown {
        hard,
        reference,
        total: hard + omega * reference + d + p + e,
        omega,
        variance,
    }
}

pub fn validate_omega(omega: f64) -> Result<()> {
    if !(0.0..=10.0).contains(&omega) {
        return Err(Error::Config(format!("omega {omega} outside [0, 10]")));
    }
    Ok(())
}

fn masked_frame_mse(
    g: &mut Graph<f64>,
    predicted: NodeId,
    target: NodeId,
    mask: &Tensor<f64>,
) -> Result<NodeId> {
    let (ps, ts) = (g.shape(predicted), g.shape(target));
    if ps.len() != 3 || ps[..2] != ts[..2] {
        return Err(Error::Alignment(format!(
            "predicted mel {ps:?} and target {ts:?} have different frame grids"
        )));
    }
    if ps != ts {
        return Err(Error::dim("mel_loss", ps, ts));
    }
    g.masked_mse(predicted, target, mask)
}

/// Masked mean squared error between the student mels and ground truth over
/// every unpadded cell; `mel_ft` and `mel_gt` are `[B, T, n_mels]` and `mask`
/// is `[B, T, 1]`.
pub fn hard_loss(
    g: &mut Graph<f64>,
    mel_ft: NodeId,
    mel_gt: NodeId,
    mask: &Tensor<f64>,
) -> Result<NodeId> {
    masked_frame_mse(g, mel_ft, mel_gt, mask)
}

/// Masked mean squared error between student mels and pseudo labels. The
/// pseudo labels are expected to be constants, so nothing flows back into the
/// model that produced them.
pub fn reference_loss(
    g: &mut Graph<f64>,
    mel_ft: NodeId,
    mel_ref: NodeId,
    mask: &Tensor<f64>,
) -> Result<NodeId> {
    masked_frame_mse(g, mel_ft, mel_ref, mask)
}

/// Stacks per-item `[T_k, n_mels]` mels into a padded `[B, T, n_mels]` constant.
pub fn stack_mels(items: &[Tensor<f64>], max_frames: usize) -> Result<Tensor<f64>> {
    let n_mels = items[0].cols();
    let mut data = vec![0.0; items.len() * max_frames * n_mels];
    for (k, m) in items.iter().enumerate() {
        if m.cols() != n_mels || m.rows() > max_frames {
            return Err(Error::Alignment(format!(
                "pseudo label {:?} does not fit a {max_frames}-frame batch",
                m.shape()
            )));
        }
        let off = k * max_frames * n_mels;
        data[off..off + m.len()].copy_from_slice(m.data());
    }
    Tensor::new([items.len(), max_frames, n_mels], data)
}

/// Graph handles of one batch's loss.
pub struct BatchLoss {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

/// Student forward passes over a batch, teacher-forced, stacked to the batch
/// frame grid. Returns per-item outputs and the `[B, T, n_mels]` stack.
fn forward_batch(
    model: &Backbone<f64>,
    g: &mut Graph<f64>,
    p: &Bound,
    batch: &Batch,
    speakers: &[SpeakerRef],
) -> Result<(Vec<ForwardOutput>, NodeId)> {
    let mut outs = Vec::with_capacity(batch.len());
    for (k, speaker) in speakers.iter().enumerate() {
        let out = model.forward(g, p, &batch.item(k), speaker, Mode::TeacherForced)?;
        if out.n_frames != batch.frame_lengths[k] {
            return Err(Error::Alignment(format!(
                "item {k}: model produced {} frames, target has {}",
                out.n_frames, batch.frame_lengths[k]
            )));
        }
        outs.push(out);
    }
    let mels: Vec<NodeId> = outs.iter().map(|o| o.mel).collect();
    let stacked = g.pad_stack(&mels, batch.max_frames())?;
    Ok((outs, stacked))
}

fn variance_losses(
    model: &Backbone<f64>,
    g: &mut Graph<f64>,
    batch: &Batch,
    outs: &[ForwardOutput],
) -> Result<[NodeId; 3]> {
    let mask = batch.phoneme_mask_tensor();
    let (b, n) = (batch.len(), batch.max_phonemes());
    let mut targets = [vec![0.0; b * n], vec![0.0; b * n], vec![0.0; b * n]];
    for k in 0..b {
        let v = &batch.variances[k];
        for i in 0..n {
            if batch.phoneme_mask[k][i] {
                targets[0][k * n + i] = (v.duration[i] as f64).ln();
                targets[1][k * n + i] = model.normalize_pitch(v.pitch[i]);
                targets[2][k * n + i] = model.normalize_energy(v.energy[i]);
            }
        }
    }
    let mut losses = Vec::with_capacity(3);
    for (which, target) in targets.into_iter().enumerate() {
        let preds: Vec<NodeId> = outs
            .iter()
            .map(|o| [o.log_duration, o.pitch, o.energy][which])
            .collect();
        let pred = g.pad_stack(&preds, n)?;
        let target = g.constant(Tensor::new([b, n], target)?);
        losses.push(g.masked_mse(pred, target, &mask)?);
    }
    Ok([losses[0], losses[1], losses[2]])
}

/// Builds the loss of one batch on `g`.
///
/// With `pseudo` present and `omega > 0` the reference term enters the total;
/// with `omega == 0` it is evaluated after the total for reporting only, so
/// the tape reachable from the total is exactly that of training without a
/// reference model.
pub fn batch_loss(
    model: &Backbone<f64>,
    g: &mut Graph<f64>,
    p: &Bound,
    batch: &Batch,
    speakers: &[SpeakerRef],
    pseudo: Option<&Tensor<f64>>,
    omega: f64,
) -> Result<BatchLoss> {
    validate_omega(omega)?;
    if speakers.len() != batch.len() {
        return Err(Error::dim("batch_loss", &[batch.len()], &[speakers.len()]));
    }
    let (outs, stacked) = forward_batch(model, g, p, batch, speakers)?;
    let gt = g.constant(batch.mel.clone());
    let hard = hard_loss(g, stacked, gt, &batch.frame_mask)?;
    let [dur, pitch, energy] = variance_losses(model, g, batch, &outs)?;

    let mut reference = None;
    let mut mel_part = hard;
    if let (Some(labels), true) = (pseudo, omega > 0.0) {
        let labels = g.constant(labels.clone());
        let r = reference_loss(g, stacked, labels, &batch.frame_mask)?;
        let weighted = g.scale(r, omega);
        mel_part = g.add(hard, weighted)?;
        reference = Some(r);
    }
    let total = g.add(mel_part, dur)?;
    let total = g.add(total, pitch)?;
    let total = g.add(total, energy)?;
    if let (Some(labels), None) = (pseudo, reference) {
        let labels = g.constant(labels.clone());
        reference = Some(reference_loss(g, stacked, labels, &batch.frame_mask)?);
    }

    let value = |id: NodeId| g.value(id).item();
    Ok(BatchLoss {
        total,
        breakdown: LossBreakdown {
            hard: value(hard),
            reference: reference.map_or(0.0, value),
            total: value(total),
            omega,
            variance: [value(dur), value(pitch), value(energy)],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eq3_arithmetic() {
        let l = total_loss(2.0, 1.0, [0.0; 3], 0.1);
        assert_eq!(l.total, 2.1);
        let base = total_loss(2.0, 1.0, [0.5, 0.25, 0.125], 0.0);
        assert_eq!(base.total, 2.0 + 0.5 + 0.25 + 0.125);
        let one = total_loss(2.0, 1.0, [0.5, 0.25, 0.125], 1.0);
        assert!((one.total - base.total - 1.0).abs() < 1e-12);
        assert!(validate_omega(-0.1).is_err() && validate_omega(10.5).is_err());
    }

    #[test]
    fn constant_offset_gives_delta_squared() {
        let mut g = Graph::new();
        let a = Tensor::from_f64([1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = a.map(|v| v + 0.5);
        let (a, b) = (g.constant(a), g.constant(b));
        let mask = Tensor::full([1, 2, 1], 1.0);
        let l = hard_loss(&mut g, a, b, &mask).unwrap();
        assert!((g.value(l).item() - 0.25).abs() < 1e-15);
        let same = hard_loss(&mut g, a, a, &mask).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn frame_mismatch_is_alignment_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros([1, 3, 2]));
        let b = g.constant(Tensor::<f64>::zeros([1, 4, 2]));
        let mask = Tensor::full([1, 3, 1], 1.0);
        assert!(matches!(reference_loss(&mut g, a, b, &mask), Err(Error::Alignment(_))));
    }
}
