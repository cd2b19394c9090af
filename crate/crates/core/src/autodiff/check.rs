use rand::seq::index::sample;

use super::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::seeded_rng;

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Number of sampled coordinates; all coordinates when there are fewer.
    pub coords: usize,
    pub seed: u64,
    /// Denominator floor of the relative error. Defaults to the roundoff
    /// level of the difference quotient, `100 eps_mach max(1, |L|) / step`.
    pub floor: Option<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-6,
            coords: 50,
            seed: 0,
            floor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(leaf, coordinate, analytic, finite difference)` at the worst error.
    pub worst: Option<(NodeId, usize, f64, f64)>,
}

/// Compares the reverse-mode gradient of `output` with central differences
/// on randomly sampled coordinates of `leaves`. The tape is restored to its
/// original bindings afterwards.
pub fn check_gradient(
    tape: &mut Tape,
    output: NodeId,
    leaves: &[NodeId],
    opts: &CheckOptions,
) -> Result<CheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step {} must be positive",
            opts.step
        )));
    }
    let grads = tape.gradient(output)?;
    let base = tape.scalar(output);
    let floor = opts
        .floor
        .unwrap_or(100.0 * f64::EPSILON * base.abs().max(1.0) / opts.step);
    let originals: Vec<Vec<f64>> = leaves.iter().map(|&l| tape.value(l).to_vec()).collect();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&l| grads.get(l)).collect();
    let total: usize = originals.iter().map(Vec::len).sum();
    let picks: Vec<usize> = if total <= opts.coords {
        (0..total).collect()
    } else {
        let mut rng = seeded_rng(opts.seed);
        let mut v = sample(&mut rng, total, opts.coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = CheckReport {
        max_rel_error: 0.0,
        checked: picks.len(),
        worst: None,
    };
    for flat in picks {
        let (mut li, mut k) = (0, flat);
        while k >= originals[li].len() {
            k -= originals[li].len();
            li += 1;
        }
        let probe = |delta: f64, tape: &mut Tape| -> Result<f64> {
            let mut v = originals[li].clone();
            v[k] += delta;
            tape.evaluate(&[(leaves[li], v)])?;
            Ok(tape.scalar(output))
        };
        let plus = probe(opts.step, tape)?;
        let minus = probe(-opts.step, tape)?;
        tape.evaluate(&[(leaves[li], originals[li].clone())])?;
        let fd = (plus - minus) / (2.0 * opts.step);
        report.record(leaves[li], k, analytic[li][k], fd, floor);
    }
    Ok(report)
}

/// The same comparison for a plain function `f` with claimed gradient
/// `grad` at `x`. Coordinates are reported under `NodeId(0)`.
pub fn check_function(
    f: impl Fn(&[f64]) -> f64,
    grad: &[f64],
    x: &[f64],
    opts: &CheckOptions,
) -> Result<CheckReport> {
    if !(opts.step > 0.0) {
        return Err(Error::InvalidArgument(format!("step {} must be positive", opts.step)));
    }
    if grad.len() != x.len() {
        return Err(Error::Shape(format!("gradient has {} entries, point {}", grad.len(), x.len())));
    }
    let base = f(x);
    let floor = opts
        .floor
        .unwrap_or(100.0 * f64::EPSILON * base.abs().max(1.0) / opts.step);
    let picks: Vec<usize> = if x.len() <= opts.coords {
        (0..x.len()).collect()
    } else {
        let mut v = sample(&mut seeded_rng(opts.seed), x.len(), opts.coords).into_vec();
        v.sort_unstable();
        v
    };
    let mut report = CheckReport {
        max_rel_error: 0.0,
        checked: picks.len(),
        worst: None,
    };
    let mut probe = x.to_vec();
    for k in picks {
        probe[k] = x[k] + opts.step;
        let plus = f(&probe);
        probe[k] = x[k] - opts.step;
        let minus = f(&probe);
        probe[k] = x[k];
        report.record(NodeId(0), k, grad[k], (plus - minus) / (2.0 * opts.step), floor);
    }
    Ok(report)
}

impl CheckReport {
    fn record(&mut self, leaf: NodeId, k: usize, a: f64, fd: f64, floor: f64) {
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        if !(err <= self.max_rel_error) {
            self.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = Some((leaf, k, a, fd));
        }
    }
}
