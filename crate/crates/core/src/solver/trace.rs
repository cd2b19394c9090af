use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    U,
    V,
}

/// One iteration. `phi_eps` and `ledger` are taken at `(x_t, eps_t)`;
/// `accepted_ledger` at `(x_{t+1}, eps_t)`; `grad_norm` is
/// `|grad phi_{eps_t}(x_{t+1})|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub t: usize,
    pub branch: Branch,
    pub ell: usize,
    pub eps: f64,
    pub phi_eps: f64,
    /// `phi_eps + d1 eps / 2`.
    pub ledger: f64,
    pub accepted_ledger: f64,
    /// `|x_{t+1} - x_t|^2`.
    pub step_sq: f64,
    /// Step length of the accepted v-step (zero for u).
    pub v_step: f64,
    pub grad_norm: f64,
    pub reduced: bool,
    pub ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `sigma eps_t < eps_tol`.
    Tolerance,
    /// The phase or iteration budget ran out.
    MaxIterations,
    LineSearchExhausted,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Termination {
    pub reason: StopReason,
    pub iterations: usize,
    /// Reductions whose new level was used by a later iteration.
    pub reductions: usize,
    /// `phi_eps + d1 eps / 2` at the returned iterate and final level.
    pub final_ledger: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SolverTrace {
    pub eps0: f64,
    /// Number of feature rows `d1`.
    pub rows: usize,
    pub records: Vec<IterRecord>,
    pub termination: Option<Termination>,
}

/// A violated trace property, with the offending iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceViolation {
    pub t: usize,
    pub what: String,
}

/// `after - before <= -demand`. A demand below the resolution of `before`
/// cannot be observed, so there a non-increase is enough.
pub fn decreases_enough(before: f64, after: f64, demand: f64) -> bool {
    after - before <= -demand || (after <= before && demand <= f64::EPSILON * before.abs())
}

impl SolverTrace {
    pub fn reductions(&self) -> usize {
        self.records.iter().filter(|r| r.reduced).count()
    }

    /// `ledger` never increases from one iteration to the next, nor from the
    /// last iteration to the final iterate.
    pub fn check_ledger(&self) -> Vec<TraceViolation> {
        let mut out = Vec::new();
        for w in self.records.windows(2) {
            if w[1].ledger > w[0].ledger {
                out.push(TraceViolation {
                    t: w[1].t,
                    what: format!("ledger rose from {} to {}", w[0].ledger, w[1].ledger),
                });
            }
        }
        for r in &self.records {
            if r.accepted_ledger > r.ledger {
                out.push(TraceViolation {
                    t: r.t,
                    what: format!(
                        "step raised ledger from {} to {}",
                        r.ledger, r.accepted_ledger
                    ),
                });
            }
        }
        if let (Some(last), Some(term)) = (self.records.last(), &self.termination) {
            if term.final_ledger > last.ledger {
                out.push(TraceViolation {
                    t: last.t,
                    what: format!(
                        "final ledger {} above last {}",
                        term.final_ledger, last.ledger
                    ),
                });
            }
        }
        out
    }

    /// Every logged reduction satisfies the trigger `|grad| < sigma gamma
    /// eps_t`, and the l-th reduction (from zero) has `|grad| < sigma eps0
    /// gamma^(l+1)`.
    pub fn check_reductions(&self, sigma: f64, gamma: f64) -> Vec<TraceViolation> {
        let mut out = Vec::new();
        let mut l = 0i32;
        for r in self.records.iter().filter(|r| r.reduced) {
            if !(r.grad_norm < sigma * gamma * r.eps) {
                out.push(TraceViolation {
                    t: r.t,
                    what: format!(
                        "reduced with |grad| {} >= {}",
                        r.grad_norm,
                        sigma * gamma * r.eps
                    ),
                });
            }
            let bound = sigma * self.eps0 * gamma.powi(l + 1);
            if !(r.grad_norm < bound * (1.0 + 1e-12)) {
                out.push(TraceViolation {
                    t: r.t,
                    what: format!("reduction {l}: |grad| {} >= {bound}", r.grad_norm),
                });
            }
            l += 1;
        }
        out
    }

    /// Accepted u-steps satisfy the sufficient-decrease test with `eta2`,
    /// accepted v-steps the one with `eta3 / eps`, on the logged numbers.
    pub fn check_step_conditions(&self, eta2: f64, eta3: f64) -> Vec<TraceViolation> {
        self.records
            .iter()
            .filter(|r| {
                let demand = match r.branch {
                    Branch::U => (eta2 / 2.0) * r.step_sq,
                    Branch::V => (eta3 / r.eps) * r.step_sq,
                };
                !decreases_enough(r.ledger, r.accepted_ledger, demand)
            })
            .map(|r| TraceViolation {
                t: r.t,
                what: format!("{:?}-step decrease test fails as logged", r.branch),
            })
            .collect()
    }

    /// One JSON object per iteration, then the termination record.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        if let Some(t) = &self.termination {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)
            .expect("writing to a Vec cannot fail");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}
