use std::fmt::Write;

use super::grid::{median_mse, GridResult};
use crate::dsp::{MelSpectrogram, MEL_FLOOR};

pub const CSV_HEADER: &str = "omega,size,seed,mel_mse,dur_mae,wall_s";

/// One row per cell. Failed cells leave the metric fields empty; `wall_s` is
/// empty unless `timing` is set.
pub fn emit_table(result: &GridResult, timing: bool) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in &result.records {
        let c = r.cell;
        let (mse, mae) = match &r.outcome {
            Ok(scores) => (
                scores.metrics.mel_mse.to_string(),
                scores.metrics.dur_mae.to_string(),
            ),
            Err(_) => (String::new(), String::new()),
        };
        let wall = if timing { format!("{:.3}", r.wall_s) } else { String::new() };
        let _ = writeln!(s, "{},{},{},{mse},{mae},{wall}", c.omega, c.size, c.seed);
    }
    s
}

/// `omega,size,seed,wall_s` for every cell.
pub fn emit_timing(result: &GridResult) -> String {
    let mut s = String::from("omega,size,seed,wall_s\n");
    for r in &result.records {
        let c = r.cell;
        let _ = writeln!(s, "{},{},{},{:.3}", c.omega, c.size, c.seed, r.wall_s);
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line chart of median test mel-MSE against target size, one polyline per
/// omega. The size axis is logarithmic.
pub fn emit_trend_chart(result: &GridResult, omegas: &[f64], sizes: &[usize]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 130.0, 30.0, 60.0);
    let series: Vec<Vec<(usize, f64)>> = omegas
        .iter()
        .map(|&om| {
            sizes
                .iter()
                .filter_map(|&s| median_mse(result, om, s).map(|m| (s, m)))
                .collect()
        })
        .collect();
    let values: Vec<f64> = series.iter().flatten().map(|&(_, m)| m).collect();
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let lx = |s: usize| (s.max(1) as f64).ln();
    let (x0, x1) = (lx(sizes[0]), lx(*sizes.last().unwrap()));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |s: usize| left + (lx(s) - x0) / span * (w - left - right);
    let py = |m: f64| top + (hi - m) / (hi - lo) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (xb, yr) = (h - bottom, w - right);
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{xb} H{yr}" fill="none" stroke="black"/>"#
    );
    for &size in sizes {
        let x = px(size);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{xb}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{size}</text>"#,
            xb + 5.0,
            xb + 18.0
        );
    }
    for k in 0..=4 {
        let m = lo + (hi - lo) * k as f64 / 4.0;
        let y = py(m);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{m:.4}</text>"#,
            left - 5.0,
            left - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">target training utterances</text>"#,
        (left + yr) / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">median test mel MSE</text>"#,
        (top + xb) / 2.0,
        (top + xb) / 2.0
    );
    for (i, (omega, points)) in omegas.iter().zip(&series).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = points
            .iter()
            .map(|&(size, m)| format!("{:.2},{:.2}", px(size), py(m)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"><title>omega={omega}</title></polyline>"#,
            pts.join(" ")
        );
        let ly = top + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">omega={omega}</text>"#,
            yr + 15.0,
            yr + 40.0,
            yr + 45.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Binary PGM (P5) with one column per frame and the highest mel channel on
/// the top row. Log values map affinely from `[ln 1e-5, max]` to `[0, 255]`.
pub fn emit_spectrogram_image(mel: &MelSpectrogram<f64>) -> Vec<u8> {
    let (frames, n_mels) = (mel.n_frames(), mel.n_mels());
    let floor = MEL_FLOOR.ln();
    let max = mel.frames.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - floor;
    let mut out = format!("P5\n{frames} {n_mels}\n255\n").into_bytes();
    for row in 0..n_mels {
        let channel = n_mels - 1 - row;
        for t in 0..frames {
            let v = mel.frames.at(t, channel);
            let px = if range > 0.0 {
                ((v - floor) / range * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            out.push(px);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn mel(values: Vec<f64>, frames: usize, n_mels: usize) -> MelSpectrogram<f64> {
        MelSpectrogram::new(Tensor::new([frames, n_mels], values).unwrap(), 256, 22050).unwrap()
    }

    #[test]
    fn silent_mel_is_black() {
        let m = mel(vec![MEL_FLOOR.ln(); 12], 3, 4);
        let img = emit_spectrogram_image(&m);
        let header = b"P5\n3 4\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert!(img[header.len()..].iter().all(|&p| p == 0));
        assert_eq!(img.len(), header.len() + 12);
    }

    #[test]
    fn frequency_ascends_upward() {
        let floor = MEL_FLOOR.ln();
        // One frame, four channels; only the top channel is loud.
        let m = mel(vec![floor, floor, floor, 0.0], 1, 4);
        let img = emit_spectrogram_image(&m);
        let px = &img[img.len() - 4..];
        assert_eq!(px, &[255, 0, 0, 0]);
    }
}
