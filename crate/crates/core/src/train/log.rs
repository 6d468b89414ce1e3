use std::fmt::Write;

use super::LossBreakdown;

/// One training step as written to the log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
}

impl LogRecord {
    /// `step hard ref total dur pitch energy grad_norm`, tab-separated.
    pub fn line(&self) -> String {
        let l = &self.loss;
        let [d, p, e] = l.variance;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, l.hard, l.reference, l.total, d, p, e, self.grad_norm
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return None;
        }
        let r = |i: usize| f[i].parse::<f64>().ok();
        Some(LogRecord {
            step: f[0].parse().ok()?,
            loss: LossBreakdown {
                hard: r(1)?,
                reference: r(2)?,
                total: r(3)?,
                omega: f64::NAN,
                variance: [r(4)?, r(5)?, r(6)?],
            },
            grad_norm: r(7)?,
        })
    }
}

pub fn format_log(records: &[LogRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}", r.line());
    }
    s
}
