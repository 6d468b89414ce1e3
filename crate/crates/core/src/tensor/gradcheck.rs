use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bound, Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
    /// Coordinates skipped because a kink lay inside the stencil.
    pub kinks_skipped: usize,
}

/// Default denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| rel_error(a, b, REL_FLOOR))
        .fold(0.0, f64::max)
}

fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central-difference gradient checker.
///
/// The loss closure receives a fresh graph and the bound parameters and
/// returns the scalar loss node. Optionally jitters every parameter by a tiny
/// seeded amount first, which moves inputs off the measure-zero set of relu
/// kinks.
#[derive(Clone, Debug)]
pub struct GradCheck {
    eps: f64,
    max_coords_per_param: Option<usize>,
    jitter: Option<(f64, u64)>,
    five_point: bool,
    floor: f64,
    kink_tol: Option<f64>,
}

impl GradCheck {
    pub fn new(eps: f64) -> Result<Self> {
        if !(1e-7..=1e-3).contains(&eps) {
            return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
        }
        Ok(GradCheck {
            eps,
            max_coords_per_param: None,
            jitter: None,
            five_point: false,
            floor: REL_FLOOR,
            kink_tol: None,
        })
    }

    /// Checks at most `n` evenly spaced coordinates of each parameter.
    pub fn sample(mut self, n: usize) -> Self {
        self.max_coords_per_param = Some(n.max(1));
        self
    }

    pub fn jitter(mut self, scale: f64, seed: u64) -> Self {
        self.jitter = Some((scale, seed));
        self
    }

    /// Fourth-order central stencil; truncation error shrinks as eps^4, so a
    /// larger eps can be used to suppress round-off.
    pub fn five_point(mut self) -> Self {
        self.five_point = true;
        self
    }

    /// Denominator floor of the relative error: gradients smaller than this
    /// are compared in absolute terms.
    pub fn floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    /// Also differentiates with half the step. Where the two estimates differ
    /// by more than `tol` relative, the stencil straddles a non-smooth point
    /// and the coordinate is skipped. A wrong analytic gradient does not
    /// trigger this, since both numeric estimates still agree with each other.
    pub fn kink_guard(mut self, tol: f64) -> Self {
        self.kink_tol = Some(tol);
        self
    }

    pub fn run<S, F>(&self, params: &ParamSet<S>, loss: F) -> Result<GradCheckReport>
    where
        S: Scalar,
        F: Fn(&mut Graph<S>, &Bound) -> Result<NodeId>,
    {
        let mut params = params.clone();
        if let Some((scale, seed)) = self.jitter {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for t in params.tensors_mut() {
                for x in t.data_mut() {
                    *x += S::lit(rng.gen_range(-scale..scale));
                }
            }
        }

        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let out = loss(&mut g, &bound)?;
        let analytic = params.collect_grads(&bound, &g.backward(out)?);

        let eval = |p: &ParamSet<S>| -> Result<f64> {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let out = loss(&mut g, &b)?;
            Ok(g.value(out).item().as_f64())
        };

        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            worst_values: (0.0, 0.0),
            coords_checked: 0,
            kinks_skipped: 0,
        };
        let eps = S::lit(self.eps);
        for (pi, name) in names.iter().enumerate() {
            let len = params.get(name).unwrap().len();
            let stride = match self.max_coords_per_param {
                Some(n) if n < len => len.div_ceil(n),
                _ => 1,
            };
            for idx in (0..len).step_by(stride) {
                let orig = params.get(name).unwrap().data()[idx];
                let mut at = |k: f64| -> Result<f64> {
                    params.get_mut(name).unwrap().data_mut()[idx] = orig + eps * S::lit(k);
                    eval(&params)
                };
                let mut derivative = |h: f64| -> Result<f64> {
                    Ok(if self.five_point {
                        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
                        (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h * self.eps)
                    } else {
                        (at(h)? - at(-h)?) / (2.0 * h * self.eps)
                    })
                };
                let numeric = derivative(1.0)?;
                let kink = match self.kink_tol {
                    Some(tol) => rel_error(numeric, derivative(0.5)?, self.floor) > tol,
                    None => false,
                };
                params.get_mut(name).unwrap().data_mut()[idx] = orig;
                if kink {
                    report.kinks_skipped += 1;
                    continue;
                }
                let a = analytic.0[pi][idx].as_f64();
                let err = rel_error(a, numeric, self.floor);
                report.coords_checked += 1;
                if report.worst.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst = Some((name.clone(), idx));
                    report.worst_values = (a, numeric);
                }
            }
        }
        Ok(report)
    }
}

/// Max relative error between backward() and central differences over every
/// coordinate of `params`.
pub fn grad_check<S, F>(params: &ParamSet<S>, eps: f64, loss: F) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &Bound) -> Result<NodeId>,
{
    Ok(GradCheck::new(eps)?.run(params, loss)?.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn params(data: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_f64([data.len()], data).unwrap()).unwrap();
        p
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let p = params(&[0.3, -1.2, 2.5]);
        let err = grad_check(&p, 1e-5, |g, b| {
            let x = b.get("x");
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn eps_outside_range_rejected() {
        assert!(GradCheck::new(1e-2).is_err());
        assert!(GradCheck::new(1e-9).is_err());
    }

    #[test]
    fn relu_kink_needs_jitter() {
        let p = params(&[0.0, 1.0]);
        let loss = |g: &mut Graph<f64>, b: &Bound| {
            let r = g.relu(b.get("x"));
            Ok(g.sum(r))
        };
        let raw = GradCheck::new(1e-6).unwrap().run(&p, loss).unwrap();
        assert!(raw.max_rel_error > 0.1);
        let jittered = GradCheck::new(1e-6)
            .unwrap()
            .jitter(1e-3, 1)
            .run(&p, loss)
            .unwrap();
        assert!(jittered.max_rel_error < 1e-8);
    }
}
