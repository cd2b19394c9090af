//! The modified ELDA iteration: a learned two-gradient u-step, a
//! safeguarded gradient v-step with backtracking, and a shrinking
//! smoothing level.
//!
//! Sufficient-decrease tests and the trace ledger are evaluated on the
//! lifted objective `phi_eps + d1 eps / 2` at a common `eps`. It differs
//! from `phi_eps` by a constant, so the tests are unchanged mathematically,
//! but the termwise lifted sum makes the ledger monotone across
//! `eps`-reductions in floating point too.

mod trace;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use trace::{decreases_enough, Branch, IterRecord, SolverTrace, StopReason, Termination, TraceViolation};

use crate::error::{Error, Result};
use crate::mri::{zero_filling, Measurement};
use crate::network::FeatureMap;
use crate::regularizer::{default_eps0, Objective, PhiValue};
use crate::tensor::{planar_row_norms, ComplexImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub alpha_bar: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub rho: f64,
    pub sigma: f64,
    pub gamma: f64,
    /// `None` picks a tenth of the median feature row norm at `x0`.
    pub eps0: Option<f64>,
    pub eps_tol: f64,
    /// Iteration budget `T`; `None` runs until the tolerance test fires.
    #[serde(rename = "T", alias = "t")]
    pub max_iters: Option<usize>,
    pub max_linesearch: usize,
    /// Fixed step sizes used when no learned schedule is given.
    pub alpha: f64,
    pub beta: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            alpha_bar: 1.0,
            eta1: 1e-3,
            eta2: 1e-4,
            eta3: 1e-2,
            rho: 0.5,
            sigma: 0.9,
            gamma: 0.5,
            eps0: None,
            eps_tol: 1e-4,
            max_iters: None,
            max_linesearch: 60,
            alpha: 0.1,
            beta: 0.1,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} = {v} must be positive and finite"
        )))
    }
}

fn open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} = {v} must lie strictly between 0 and 1"
        )))
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        positive("alpha_bar", self.alpha_bar)?;
        positive("eta1", self.eta1)?;
        positive("eta2", self.eta2)?;
        positive("eta3", self.eta3)?;
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        open_unit("rho", self.rho)?;
        open_unit("sigma", self.sigma)?;
        open_unit("gamma", self.gamma)?;
        if let Some(e) = self.eps0 {
            positive("eps0", e)?;
        }
        if !(self.eps_tol >= 0.0 && self.eps_tol.is_finite()) {
            return Err(Error::Config(format!(
                "eps_tol = {} must be nonnegative",
                self.eps_tol
            )));
        }
        if self.max_linesearch == 0 {
            return Err(Error::Config("max_linesearch must be positive".into()));
        }
        match self.max_iters {
            Some(0) => return Err(Error::Config("T must be positive".into())),
            None if self.eps_tol == 0.0 => {
                return Err(Error::Config(
                    "T unbounded with eps_tol = 0 never stops".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    /// Largest backtrack count the line search can need on an objective
    /// whose gradient is `l_eps`-Lipschitz.
    pub fn linesearch_bound(&self, l_eps: f64, eps: f64) -> usize {
        let arg = self.alpha_bar * (l_eps / 2.0 + self.eta3 / eps);
        if arg <= 1.0 {
            return 0;
        }
        (arg.ln() / (1.0 / self.rho).ln()).floor() as usize + 1
    }
}

/// Per-phase step sizes. Phases past the end reuse the last entry.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizes {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl StepSizes {
    pub fn constant(alpha: f64, beta: f64) -> Self {
        StepSizes {
            alpha: vec![alpha],
            beta: vec![beta],
        }
    }

    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.len() != beta.len() {
            return Err(Error::InvalidArgument(format!(
                "step schedules of lengths {} and {}",
                alpha.len(),
                beta.len()
            )));
        }
        for (i, (&a, &b)) in alpha.iter().zip(&beta).enumerate() {
            positive(&format!("alpha[{i}]"), a)?;
            positive(&format!("beta[{i}]"), b)?;
        }
        Ok(StepSizes { alpha, beta })
    }

    pub fn at(&self, t: usize) -> (f64, f64) {
        let i = t.min(self.alpha.len() - 1);
        (self.alpha[i], self.beta[i])
    }
}

/// How iterates are represented and combined. The plain workspace works on
/// buffers; the training tape records every update so the final iterate can
/// be differentiated with respect to the parameters.
pub trait Workspace {
    type Point: Clone;

    fn values<'p>(&'p self, p: &'p Self::Point) -> &'p [f64];

    /// `u = z - beta_t grad r_eps(z)` with `z = x - alpha_t grad f(x)`.
    fn u_step(&mut self, x: &Self::Point, t: usize, eps: f64) -> Result<Self::Point>;

    /// A point holding `grad phi_eps(x)`; `known` is its value as computed
    /// by the objective.
    fn gradient(&mut self, x: &Self::Point, eps: f64, known: &[f64]) -> Result<Self::Point>;

    /// `x - s d`.
    fn step(&mut self, x: &Self::Point, s: f64, d: &Self::Point) -> Self::Point;
}

/// Buffers and a fixed step schedule.
pub struct PlainWorkspace<'o, 'a, M: FeatureMap + ?Sized> {
    pub objective: &'o Objective<'a, M>,
    pub steps: StepSizes,
}

impl<M: FeatureMap + ?Sized> Workspace for PlainWorkspace<'_, '_, M> {
    type Point = Vec<f64>;

    fn values<'p>(&'p self, p: &'p Vec<f64>) -> &'p [f64] {
        p
    }

    fn u_step(&mut self, x: &Vec<f64>, t: usize, eps: f64) -> Result<Vec<f64>> {
        let (alpha, beta) = self.steps.at(t);
        Ok(u_step_planar(self.objective, x, alpha, beta, eps).1)
    }

    fn gradient(&mut self, _x: &Vec<f64>, _eps: f64, known: &[f64]) -> Result<Vec<f64>> {
        Ok(known.to_vec())
    }

    fn step(&mut self, x: &Vec<f64>, s: f64, d: &Vec<f64>) -> Vec<f64> {
        x.iter().zip(d).map(|(a, b)| a + (-s) * b).collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(z, u)` on planar buffers.
pub fn u_step_planar<M: FeatureMap + ?Sized>(
    obj: &Objective<'_, M>,
    x: &[f64],
    alpha: f64,
    beta: f64,
    eps: f64,
) -> (Vec<f64>, Vec<f64>) {
    let gf = obj.fidelity.gradient(x);
    let z: Vec<f64> = x.iter().zip(&gf).map(|(a, g)| a - alpha * g).collect();
    let gr = obj.reg_grad(&z, eps);
    let u = z.iter().zip(&gr).map(|(a, g)| a - beta * g).collect();
    (z, u)
}

/// `z = x - alpha grad f(x)`, `u = z - beta grad r_eps(z)`.
pub fn u_step<M: FeatureMap + ?Sized>(
    x: &ComplexImage,
    alpha: f64,
    beta: f64,
    epsilon: f64,
    m: &Measurement,
    q: &M,
) -> Result<(ComplexImage, ComplexImage)> {
    positive("alpha", alpha)?;
    positive("beta", beta)?;
    positive("epsilon", epsilon)?;
    x.same_shape(&m.kspace)?;
    let obj = Objective::new(m, q)?;
    let (z, u) = u_step_planar(&obj, &x.to_planar(), alpha, beta, epsilon);
    let (h, w) = x.shape();
    Ok((
        ComplexImage::from_planar(h, w, &z)?,
        ComplexImage::from_planar(h, w, &u)?,
    ))
}

/// The numbers behind the u-acceptance test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UCheck {
    pub grad_norm: f64,
    pub step_norm: f64,
    /// Lifted objective at `x` and at `u`.
    pub at_x: f64,
    pub at_u: f64,
    pub small_gradient: bool,
    pub sufficient_decrease: bool,
}

impl UCheck {
    pub fn accepted(&self) -> bool {
        self.small_gradient && self.sufficient_decrease
    }
}

fn u_conditions(
    grad_norm: f64,
    step_sq: f64,
    at_x: f64,
    at_u: f64,
    eta1: f64,
    eta2: f64,
) -> UCheck {
    let step_norm = step_sq.sqrt();
    UCheck {
        grad_norm,
        step_norm,
        at_x,
        at_u,
        small_gradient: grad_norm <= step_norm / eta1,
        sufficient_decrease: decreases_enough(at_x, at_u, (eta2 / 2.0) * step_sq),
    }
}

/// Evaluates both u-acceptance conditions at `(x, u)`.
pub fn check_u_conditions<M: FeatureMap + ?Sized>(
    x: &ComplexImage,
    u: &ComplexImage,
    epsilon: f64,
    eta1: f64,
    eta2: f64,
    m: &Measurement,
    q: &M,
) -> Result<UCheck> {
    positive("epsilon", epsilon)?;
    x.same_shape(u)?;
    x.same_shape(&m.kspace)?;
    let obj = Objective::new(m, q)?;
    let (xp, up) = (x.to_planar(), u.to_planar());
    let (vx, g) = obj.value_and_grad(&xp, epsilon);
    let vu = obj.value(&up, epsilon);
    let c = u_conditions(
        norm(&g),
        dist_sq(&up, &xp),
        vx.lifted(),
        vu.lifted(),
        eta1,
        eta2,
    );
    log::debug!("u-check {c:?}");
    Ok(c)
}

struct LineSearch<P> {
    point: P,
    value: PhiValue,
    ell: usize,
    step: f64,
    step_sq: f64,
}

/// Backtracks from `alpha_bar` until the v-decrease test holds. `None`
/// when the cap is exceeded.
#[allow(clippy::too_many_arguments)]
fn line_search<W: Workspace, M: FeatureMap + ?Sized>(
    ws: &mut W,
    obj: &Objective<'_, M>,
    x: &W::Point,
    at_x: f64,
    grad: &[f64],
    eps: f64,
    alpha_bar: f64,
    rho: f64,
    eta3: f64,
    max_ls: usize,
) -> Result<Option<LineSearch<W::Point>>> {
    if grad.iter().all(|&g| g == 0.0) {
        let value = obj.value(ws.values(x), eps);
        return Ok(Some(LineSearch {
            point: x.clone(),
            value,
            ell: 0,
            step: 0.0,
            step_sq: 0.0,
        }));
    }
    let d = ws.gradient(x, eps, grad)?;
    let mut s = alpha_bar;
    for ell in 0..=max_ls {
        let v = ws.step(x, s, &d);
        let step_sq = dist_sq(ws.values(&v), ws.values(x));
        let value = obj.value(ws.values(&v), eps);
        if decreases_enough(at_x, value.lifted(), (eta3 / eps) * step_sq) {
            return Ok(Some(LineSearch {
                point: v,
                value,
                ell,
                step: s,
                step_sq,
            }));
        }
        s *= rho;
    }
    Ok(None)
}

/// The safeguarded gradient step `v = x - alpha_bar rho^ell grad phi_eps(x)`
/// with the smallest admissible `ell`.
pub fn v_step_linesearch<M: FeatureMap + ?Sized>(
    x: &ComplexImage,
    epsilon: f64,
    alpha_bar: f64,
    rho: f64,
    eta3: f64,
    max_ls: usize,
    m: &Measurement,
    q: &M,
) -> Result<(ComplexImage, usize)> {
    positive("epsilon", epsilon)?;
    positive("alpha_bar", alpha_bar)?;
    open_unit("rho", rho)?;
    x.same_shape(&m.kspace)?;
    let obj = Objective::new(m, q)?;
    let mut ws = PlainWorkspace {
        objective: &obj,
        steps: StepSizes::constant(1.0, 1.0),
    };
    let xp = x.to_planar();
    let (vx, g) = obj.value_and_grad(&xp, epsilon);
    match line_search(
        &mut ws,
        &obj,
        &xp,
        vx.lifted(),
        &g,
        epsilon,
        alpha_bar,
        rho,
        eta3,
        max_ls,
    )? {
        Some(ls) => Ok((
            ComplexImage::from_planar(x.height(), x.width(), &ls.point)?,
            ls.ell,
        )),
        None => Err(Error::LineSearchExhausted {
            cap: max_ls,
            iteration: 0,
            trace: Box::default(),
        }),
    }
}

/// Runs the iteration from `x0` with an explicit workspace. `eps0` must be
/// resolved by the caller.
pub fn run<W: Workspace, M: FeatureMap + ?Sized>(
    ws: &mut W,
    obj: &Objective<'_, M>,
    x0: W::Point,
    cfg: &SolverConfig,
    eps0: f64,
) -> Result<(W::Point, SolverTrace)> {
    cfg.validate()?;
    positive("eps0", eps0)?;
    let mut trace = SolverTrace {
        eps0,
        rows: obj.rows(),
        records: Vec::new(),
        termination: None,
    };
    let mut x = x0;
    let mut eps = eps0;
    let mut reductions = 0usize;
    // (value, gradient) at x for the current eps
    let mut cached: Option<(PhiValue, Vec<f64>)> = None;
    let mut t = 0usize;
    let diverged = |trace: SolverTrace, t: usize| Error::Diverged {
        iteration: t,
        trace: Box::new(trace),
    };

    loop {
        if cfg.max_iters.is_some_and(|cap| t >= cap) {
            let last = obj.value(ws.values(&x), eps).lifted();
            trace.termination = Some(Termination {
                reason: StopReason::MaxIterations,
                iterations: t,
                reductions,
                final_ledger: last,
            });
            return Ok((x, trace));
        }
        let clock = Instant::now();
        let (vx, gx) = match cached.take() {
            Some(c) => c,
            None => obj.value_and_grad(ws.values(&x), eps),
        };
        if !vx.is_finite() {
            return Err(diverged(trace, t));
        }
        let at_x = vx.lifted();
        let grad_norm_x = norm(&gx);

        let u = ws.u_step(&x, t, eps)?;
        let u_sq = dist_sq(ws.values(&u), ws.values(&x));
        let vu = obj.value(ws.values(&u), eps);
        let check = u_conditions(grad_norm_x, u_sq, at_x, vu.lifted(), cfg.eta1, cfg.eta2);

        let (next, next_val, branch, ell, v_step, step_sq) = if vu.is_finite() && check.accepted() {
            (u, vu, Branch::U, 0, 0.0, u_sq)
        } else {
            let ls = line_search(
                ws,
                obj,
                &x,
                at_x,
                &gx,
                eps,
                cfg.alpha_bar,
                cfg.rho,
                cfg.eta3,
                cfg.max_linesearch,
            )?;
            match ls {
                Some(ls) => (ls.point, ls.value, Branch::V, ls.ell, ls.step, ls.step_sq),
                None => {
                    trace.termination = Some(Termination {
                        reason: StopReason::LineSearchExhausted,
                        iterations: t,
                        reductions,
                        final_ledger: at_x,
                    });
                    return Err(Error::LineSearchExhausted {
                        cap: cfg.max_linesearch,
                        iteration: t,
                        trace: Box::new(trace),
                    });
                }
            }
        };
        if !next_val.is_finite() {
            return Err(diverged(trace, t));
        }

        let (after, g_next) = obj.value_and_grad(ws.values(&next), eps);
        let grad_norm = norm(&g_next);
        if !grad_norm.is_finite() {
            return Err(diverged(trace, t));
        }
        let reduced = grad_norm < cfg.sigma * cfg.gamma * eps;
        let eps_t = eps;
        if reduced {
            eps *= cfg.gamma;
        } else {
            cached = Some((after, g_next));
        }
        x = next;
        trace.records.push(IterRecord {
            t,
            branch,
            ell,
            eps: eps_t,
            phi_eps: vx.smoothed(),
            ledger: at_x,
            accepted_ledger: next_val.lifted(),
            step_sq,
            v_step,
            grad_norm,
            reduced,
            ms: clock.elapsed().as_secs_f64() * 1e3,
        });
        log::trace!(
            "t={t} {branch:?} ell={ell} eps={eps_t:e} ledger={at_x:.6e} |g|={grad_norm:.3e}"
        );
        t += 1;

        if cfg.sigma * eps_t < cfg.eps_tol {
            let last = obj.value(ws.values(&x), eps).lifted();
            trace.termination = Some(Termination {
                reason: StopReason::Tolerance,
                iterations: t,
                reductions,
                final_ledger: last,
            });
            return Ok((x, trace));
        }
        if reduced {
            reductions += 1;
        }
    }
}

/// Initial smoothing level for `x0`, from the config or the data.
pub fn resolve_eps0<M: FeatureMap + ?Sized>(
    obj: &Objective<'_, M>,
    x0: &[f64],
    cfg: &SolverConfig,
) -> f64 {
    cfg.eps0
        .unwrap_or_else(|| default_eps0(&planar_row_norms(&obj.features_at(x0).q, obj.rows())))
}

/// Reconstructs from one measurement, starting at `x0` or zero filling.
pub fn solve<M: FeatureMap + ?Sized>(
    m: &Measurement,
    q: &M,
    x0: Option<&ComplexImage>,
    cfg: &SolverConfig,
    steps: Option<&StepSizes>,
) -> Result<(ComplexImage, SolverTrace)> {
    cfg.validate()?;
    let start = match x0 {
        Some(x) => {
            x.same_shape(&m.kspace)?;
            x.clone()
        }
        None => zero_filling(m),
    };
    let obj = Objective::new(m, q)?;
    let xp = start.to_planar();
    let eps0 = resolve_eps0(&obj, &xp, cfg);
    let mut ws = PlainWorkspace {
        objective: &obj,
        steps: steps
            .cloned()
            .unwrap_or_else(|| StepSizes::constant(cfg.alpha, cfg.beta)),
    };
    let (x, trace) = run(&mut ws, &obj, xp, cfg, eps0)?;
    let (h, w) = m.shape();
    Ok((ComplexImage::from_planar(h, w, &x)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mri::{forward, make_cartesian_mask, CartesianMask};
    use crate::network::IdentityMap;
    use crate::tensor::{seeded_rng, standard_normal};
    use num_complex::Complex64;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = seeded_rng(seed);
        let d = (0..h * w)
            .map(|_| Complex64::new(standard_normal(&mut rng), standard_normal(&mut rng)))
            .collect();
        ComplexImage::new(h, w, d).unwrap()
    }

    /// Feature map that is identically zero.
    struct ZeroMap;

    impl FeatureMap for ZeroMap {
        fn channels(&self) -> usize {
            1
        }
        fn eval(&self, height: usize, width: usize, _x: &[f64]) -> crate::network::FeatureEval {
            crate::network::FeatureEval {
                height,
                width,
                q: vec![0.0; 2 * height * width],
                cache: vec![],
            }
        }
        fn pullback(&self, eval: &crate::network::FeatureEval, _w: &[f64]) -> Vec<f64> {
            vec![0.0; 2 * eval.pixels()]
        }
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        for bad in [
            SolverConfig {
                rho: 1.0,
                ..Default::default()
            },
            SolverConfig {
                gamma: 0.0,
                ..Default::default()
            },
            SolverConfig {
                alpha: -1.0,
                ..Default::default()
            },
            SolverConfig {
                eps_tol: 0.0,
                ..Default::default()
            },
            SolverConfig {
                max_iters: Some(0),
                ..Default::default()
            },
            SolverConfig {
                max_linesearch: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn u_step_matches_composition() {
        let x = random_image(8, 8, 1);
        let m = forward(
            &random_image(8, 8, 2),
            &make_cartesian_mask(8, 0.5, 3).unwrap(),
        )
        .unwrap();
        let (z, u) = u_step(&x, 0.2, 0.3, 0.5, &m, &IdentityMap).unwrap();
        let (_, gf) = crate::mri::data_fidelity(&x, &m).unwrap();
        let z_ref = x.axpy(Complex64::new(-0.2, 0.0), &gf);
        assert!(z.max_abs_diff(&z_ref) < 1e-12);
        let gr = crate::regularizer::grad_r_eps(&z, &IdentityMap, 0.5).unwrap();
        let u_ref = z.axpy(Complex64::new(-0.3, 0.0), &gr);
        assert!(u.max_abs_diff(&u_ref) < 1e-12);
    }

    #[test]
    fn u_conditions_trivial_cases() {
        let x = random_image(4, 4, 4);
        let m = forward(&random_image(4, 4, 5), &CartesianMask::full(4)).unwrap();
        let c = check_u_conditions(&x, &x, 0.1, 1e-3, 1e-4, &m, &ZeroMap).unwrap();
        assert!(!c.small_gradient);
        let zero = ComplexImage::zeros(4, 4);
        let m0 = forward(&zero, &CartesianMask::full(4)).unwrap();
        let c = check_u_conditions(&zero, &zero, 0.1, 1e-3, 1e-4, &m0, &ZeroMap).unwrap();
        assert!(c.accepted(), "{c:?}");
    }

    #[test]
    fn quadratic_line_search() {
        // phi = |x - x_hat|^2 / 2 with a full mask and no regularizer
        let truth = random_image(4, 4, 6);
        let m = forward(&truth, &CartesianMask::full(4)).unwrap();
        let x = random_image(4, 4, 7);
        let (v, ell) = v_step_linesearch(&x, 0.1, 1.0, 0.5, 0.01, 60, &m, &ZeroMap).unwrap();
        assert_eq!(ell, 0);
        assert!(v.max_abs_diff(&truth) < 1e-12);
        let (_, ell) = v_step_linesearch(&x, 0.1, 1e3, 0.5, 0.01, 60, &m, &ZeroMap).unwrap();
        // decrease test on the quadratic: s (1 - s/2) >= s^2 eta3/eps
        let s_max = 1.0 / (0.5 + 0.1);
        let expect = (0..).find(|&l| 1e3 * 0.5f64.powi(l) <= s_max).unwrap() as usize;
        assert_eq!(ell, expect);
        let cfg = SolverConfig {
            alpha_bar: 1e3,
            eta3: 0.01,
            ..Default::default()
        };
        assert!(ell <= cfg.linesearch_bound(1.0, 0.1));
        let (v, ell) = v_step_linesearch(&truth, 0.1, 1.0, 0.5, 0.01, 60, &m, &ZeroMap).unwrap();
        assert_eq!((ell, v), (0, truth));
        assert!(matches!(
            v_step_linesearch(&x, 0.1, 1e30, 0.5, 0.01, 3, &m, &ZeroMap),
            Err(Error::LineSearchExhausted { .. })
        ));
    }

    #[test]
    fn ledger_and_reductions_hold() {
        let truth = random_image(8, 8, 8);
        let m = forward(&truth, &make_cartesian_mask(8, 0.5, 9).unwrap()).unwrap();
        let cfg = SolverConfig {
            eps_tol: 1e-3,
            ..Default::default()
        };
        let (x, trace) = solve(&m, &IdentityMap, None, &cfg, None).unwrap();
        assert!(x.is_finite());
        assert!(
            trace.check_ledger().is_empty(),
            "{:?}",
            trace.check_ledger()
        );
        assert!(trace.check_reductions(cfg.sigma, cfg.gamma).is_empty());
        assert!(trace.check_step_conditions(cfg.eta2, cfg.eta3).is_empty());
        let term = trace.termination.clone().unwrap();
        assert_eq!(term.reason, StopReason::Tolerance);
        let lhat = term.reductions as i32;
        assert!(cfg.gamma.powi(-(lhat - 1)) <= cfg.sigma * trace.eps0 / cfg.eps_tol);
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap().lines().count(),
            trace.records.len() + 1
        );
    }

    #[test]
    fn iteration_cap() {
        let m = forward(&random_image(4, 4, 10), &CartesianMask::full(4)).unwrap();
        let cfg = SolverConfig {
            max_iters: Some(3),
            eps_tol: 0.0,
            ..Default::default()
        };
        let (_, trace) = solve(&m, &IdentityMap, None, &cfg, None).unwrap();
        assert_eq!(trace.records.len(), 3);
        assert_eq!(trace.termination.unwrap().reason, StopReason::MaxIterations);
    }

    #[test]
    fn rounding_level_gradient_does_not_exhaust_the_search() {
        let truth = random_image(32, 32, 11);
        let m = forward(&truth, &make_cartesian_mask(32, 0.2, 3).unwrap()).unwrap();
        let cfg = SolverConfig {
            max_iters: Some(4),
            eps_tol: 0.0,
            eps0: Some(1e-3),
            ..Default::default()
        };
        let (x, trace) = solve(&m, &ZeroMap, None, &cfg, None).unwrap();
        assert!(x.max_abs_diff(&zero_filling(&m)) < 1e-12);
        assert!(trace.check_ledger().is_empty());
        assert!(trace.check_step_conditions(cfg.eta2, cfg.eta3).is_empty());
    }
}
