//! Property checks run by `ulda selfcheck`: gradient oracles, the smoothing
//! sandwich, the descent ledger, the smoothing schedule, the line-search
//! bound and adjoint identities.

use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{check_function, check_gradient, CheckOptions, Fault};
use crate::data::phantoms::{phantom, Family};
use crate::error::{Error, Result};
use crate::mri::{forward, make_cartesian_mask, zero_filling, CartesianMask, Fidelity, Measurement};
use crate::network::conv::{conv_forward, conv_input_adjoint};
use crate::network::{
    geom, AdapterParams, ExtractorParams, FeatureEval, FeatureMap, IdentityMap, InitScheme, QNet, SmoothedRelu,
};
use crate::regularizer::{reg_values, Objective};
use crate::solver::{solve, v_step_linesearch, SolverConfig, StepSizes, StopReason};
use crate::tensor::{fft2_unitary, ifft2_unitary, standard_normal, substream, ComplexImage, SeededRng};
use crate::training::unrolled::{record_loss, unrolled_tape, Learn, TaskParams};
use crate::training::{train_step1, TaskBundle, TrainConfig, TrainOutputs, TrainSample};

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for PropertyCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<20} {} ({:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Corrupts one vector-Jacobian product of the unrolled tapes.
    pub fault: Option<Fault>,
    pub gradient_seeds: usize,
    pub sandwich_pairs: usize,
    pub ledger_runs: usize,
    pub schedule_runs: usize,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        SelfcheckOptions {
            seed: 0,
            fault: None,
            gradient_seeds: 20,
            sandwich_pairs: 1000,
            ledger_runs: 100,
            schedule_runs: 10,
        }
    }
}

/// Relative-error threshold of the gradient oracles.
pub const GRADIENT_TOL: f64 = 1e-4;

/// Central-difference settings for plain functions.
const PLAIN_FD: CheckOptions = CheckOptions {
    step: 1e-6,
    coords: 100,
    seed: 0,
    floor: None,
};

/// Central-difference settings for the unrolled loss. The step is larger
/// than for plain functions because roundoff accumulates over the phases;
/// gradients below the floor are compared in absolute terms.
const UNROLLED_FD: CheckOptions = CheckOptions {
    step: 1e-5,
    coords: 100,
    seed: 0,
    floor: Some(1e-5),
};

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> PropertyCheck {
    let clock = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    PropertyCheck {
        name,
        passed,
        detail,
        seconds: clock.elapsed().as_secs_f64(),
    }
}

/// Random-ellipse phantom and its measurement under a Cartesian mask.
pub fn instance(n: usize, ratio: f64, seed: u64) -> Result<(ComplexImage, Measurement)> {
    let truth = phantom(Family::RandomEllipses, n, seed, 0)?;
    let m = forward(&truth, &make_cartesian_mask(n, ratio, seed)?)?;
    Ok((truth, m))
}

fn random_image(rng: &mut SeededRng, h: usize, w: usize, scale: f64) -> ComplexImage {
    let d = (0..h * w)
        .map(|_| Complex64::new(scale * standard_normal(rng), scale * standard_normal(rng)))
        .collect();
    ComplexImage::new(h, w, d).expect("sizes match")
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

/// Extractor and adapters after a short training run on two 8x8 tasks.
pub fn trained_params(seed: u64) -> Result<(ExtractorParams, Vec<AdapterParams>)> {
    let mk = |family: Family, salt: u64| -> Result<TaskBundle> {
        let mask = make_cartesian_mask(8, 0.3, seed ^ salt)?;
        let samples = (0..2)
            .map(|i| {
                let truth = phantom(family, 8, seed ^ salt, i)?;
                Ok(TrainSample {
                    name: format!("{family}-{i}"),
                    measurement: forward(&truth, &mask)?,
                    truth,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TaskBundle::new(family.name(), samples)
    };
    let data = [mk(Family::SheppLogan, 1)?, mk(Family::RandomEllipses, 2)?];
    let cfg = TrainConfig {
        phases: 2,
        epochs: 3,
        pretrain_epochs: 1,
        batch_size: 2,
        learning_rate: 1e-2,
        seed,
        ..Default::default()
    };
    let out = train_step1(&data, &cfg, &SolverConfig::default(), &TrainOutputs::default())?;
    Ok((out.extractor, out.tasks.into_iter().map(|t| t.adapter).collect()))
}

/// Worst relative errors of `(grad f, grad r_eps, grad phi_eps, unrolled)`
/// on one 8x8 instance.
pub fn gradient_errors(seed: u64, fault: Option<Fault>) -> Result<[f64; 4]> {
    let (truth, m) = instance(8, 0.3, seed)?;
    let mut rng = substream(seed, 11);
    let ext = ExtractorParams::init(rng.random(), InitScheme::GlorotLike);
    let adapter = AdapterParams::init(rng.random(), InitScheme::GlorotLike);
    let act = SmoothedRelu::default();
    let net = QNet::new(&ext, &adapter, act);
    let obj = Objective::new(&m, &net)?;
    let x = zero_filling(&m).add(&random_image(&mut rng, 8, 8, 0.1)).to_planar();
    let eps = median(&obj.features_at(&x).row_norms());
    let opts = CheckOptions { seed, ..PLAIN_FD };

    let fid = Fidelity::new(&m)?;
    let e_f = check_function(|v| fid.value(v), &fid.gradient(&x), &x, &opts)?.max_rel_error;
    let e_r = check_function(|v| obj.value(v, eps).reg.smoothed, &obj.reg_grad(&x, eps), &x, &opts)?.max_rel_error;
    let e_phi = check_function(|v| obj.value(v, eps).smoothed(), &obj.value_and_grad(&x, eps).1, &x, &opts)?.max_rel_error;

    let task = TaskParams::new(adapter.clone(), 2, 0.1);
    let mut u = unrolled_tape(&m, &ext, &task, act, &SolverConfig::default(), Learn::ALL)?;
    u.ws.tape.set_fault(fault);
    let loss = record_loss(&mut u.ws.tape, u.output, &truth, 0.01);
    let (la, lb) = u.ws.step_leaves();
    let mut leaves = vec![la, lb, u.ws.adapter_node()];
    leaves.extend_from_slice(u.ws.kernel_nodes());
    let e_loss = check_gradient(&mut u.ws.tape, loss, &leaves, &CheckOptions { seed, ..UNROLLED_FD })?.max_rel_error;
    Ok([e_f, e_r, e_phi, e_loss])
}

pub fn gradient_oracles(opts: &SelfcheckOptions) -> PropertyCheck {
    timed("gradient-oracles", || {
        let errs = (0..opts.gradient_seeds as u64)
            .into_par_iter()
            .map(|k| gradient_errors(opts.seed.wrapping_add(k), opts.fault))
            .collect::<Result<Vec<_>>>()?;
        let mut worst = [0.0f64; 4];
        for e in &errs {
            for i in 0..4 {
                worst[i] = worst[i].max(e[i]);
            }
        }
        let passed = worst.iter().all(|&e| e < GRADIENT_TOL);
        Ok((
            passed,
            format!(
                "{} seeds, worst rel. error f {:.1e}, r_eps {:.1e}, phi_eps {:.1e}, unrolled loss {:.1e}",
                errs.len(),
                worst[0],
                worst[1],
                worst[2],
                worst[3]
            ),
        ))
    })
}

/// Relative slack of the `r_eps + d1 eps / 2` comparison.
pub const LITERAL_SLACK: f64 = 1e-12;

/// Counts of `(r_eps > r, r > termwise upper, r > r_eps + d1 eps / 2)`
/// over `pairs` random points and levels. The last form is an equality
/// when every row lies below `eps`, so it gets a relative rounding slack.
pub fn sandwich_violations(pairs: usize, seed: u64, nets: &[(ExtractorParams, AdapterParams)]) -> (usize, usize, usize) {
    let act = SmoothedRelu::default();
    let counts: Vec<(usize, usize, usize)> = (0..pairs)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, 1000 + k as u64);
            let (ext, ad) = &nets[k % nets.len()];
            let net = QNet::new(ext, ad, act);
            let n = 8;
            let scale = 10f64.powf(rng.random_range(-2.0..1.0));
            let x = random_image(&mut rng, n, n, scale).to_planar();
            let eval = net.eval(n, n, &x);
            let norms = eval.row_norms();
            let eps = 10f64.powf(rng.random_range(-4.0..0.5));
            let v = reg_values(&norms, eps);
            let literal = v.smoothed + norms.len() as f64 * eps / 2.0;
            (
                (v.smoothed > v.exact) as usize,
                (v.exact > v.upper) as usize,
                (v.exact > literal * (1.0 + LITERAL_SLACK)) as usize,
            )
        })
        .collect();
    counts
        .iter()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2))
}

fn random_nets(seed: u64, count: usize) -> Vec<(ExtractorParams, AdapterParams)> {
    (0..count as u64)
        .map(|i| {
            let mut rng = substream(seed, 500 + i);
            (
                ExtractorParams::init(rng.random(), InitScheme::GlorotLike),
                AdapterParams::init(rng.random(), InitScheme::GlorotLike),
            )
        })
        .collect()
}

pub fn smoothing_sandwich(opts: &SelfcheckOptions) -> PropertyCheck {
    timed("smoothing-sandwich", || {
        let (ext, adapters) = trained_params(opts.seed)?;
        let mut nets = random_nets(opts.seed, 4);
        nets.extend(adapters.into_iter().map(|a| (ext.clone(), a)));
        let (lo, hi, lit) = sandwich_violations(opts.sandwich_pairs, opts.seed, &nets);
        Ok((
            lo + hi + lit == 0,
            format!(
                "{} pairs over {} parameter sets: {lo} lower, {hi} upper, {lit} literal-upper violations",
                opts.sandwich_pairs,
                nets.len()
            ),
        ))
    })
}

/// Setting of one randomized solver run.
#[derive(Debug, Clone)]
pub struct RandomRun {
    pub size: usize,
    pub ratio: f64,
    pub family: Family,
    pub steps: (f64, f64),
    /// Index into the parameter sets, or `None` for the identity feature map.
    pub net: Option<usize>,
    pub seed: u64,
}

impl RandomRun {
    pub fn draw(seed: u64, k: u64, nets: usize) -> Self {
        let mut rng = substream(seed, 2000 + k);
        RandomRun {
            size: if rng.random_bool(0.5) { 8 } else { 16 },
            ratio: rng.random_range(0.15..0.6),
            family: Family::ALL[rng.random_range(0..4)],
            steps: (
                10f64.powf(rng.random_range(-2.0..0.5)),
                10f64.powf(rng.random_range(-2.0..0.5)),
            ),
            net: Some(rng.random_range(0..nets)),
            seed: rng.random(),
        }
    }

    pub fn solve(
        &self,
        nets: &[(ExtractorParams, AdapterParams)],
        cfg: &SolverConfig,
    ) -> Result<(ComplexImage, crate::solver::SolverTrace)> {
        let truth = phantom(self.family, self.size, self.seed, 0)?;
        let m = forward(&truth, &make_cartesian_mask(self.size, self.ratio, self.seed)?)?;
        let steps = StepSizes::constant(self.steps.0, self.steps.1);
        match self.net {
            Some(i) => {
                let net = QNet::new(&nets[i].0, &nets[i].1, SmoothedRelu::default());
                solve(&m, &net, None, cfg, Some(&steps))
            }
            None => solve(&m, &IdentityMap, None, cfg, Some(&steps)),
        }
    }
}

fn trace_of(e: Error) -> std::result::Result<crate::solver::SolverTrace, Error> {
    match e {
        Error::LineSearchExhausted { trace, .. } | Error::Diverged { trace, .. } => Ok(*trace),
        other => Err(other),
    }
}

pub fn descent_ledger(opts: &SelfcheckOptions) -> PropertyCheck {
    timed("descent-ledger", || {
        let nets = random_nets(opts.seed ^ 0xD, 6);
        let cfg = SolverConfig {
            eps_tol: 1e-3,
            max_iters: Some(40),
            ..Default::default()
        };
        let results: Vec<(usize, usize, usize, bool)> = (0..opts.ledger_runs as u64)
            .into_par_iter()
            .map(|k| {
                let run = RandomRun::draw(opts.seed, k, nets.len());
                let (trace, ok) = match run.solve(&nets, &cfg) {
                    Ok((_, t)) => (t, true),
                    Err(e) => (trace_of(e)?, false),
                };
                let v_steps = trace.records.iter().filter(|r| r.branch == crate::solver::Branch::V).count();
                Ok((trace.check_ledger().len(), trace.records.len(), v_steps, ok))
            })
            .collect::<Result<Vec<_>>>()?;
        let violations: usize = results.iter().map(|r| r.0).sum();
        let iters: usize = results.iter().map(|r| r.1).sum();
        let v_steps: usize = results.iter().map(|r| r.2).sum();
        let aborted = results.iter().filter(|r| !r.3).count();
        Ok((
            violations == 0 && aborted == 0,
            format!(
                "{} runs, {iters} iterations ({v_steps} v-steps): {violations} ledger violations, {aborted} aborted",
                results.len()
            ),
        ))
    })
}

/// Runs to the tolerance `1e-4` with no iteration budget (a safety cap
/// counts as failure to terminate). Even runs use random 8x8 networks, odd
/// runs the identity feature map at 16x16.
pub fn eps_schedule(opts: &SelfcheckOptions) -> PropertyCheck {
    timed("eps-schedule", || {
        let nets = random_nets(opts.seed ^ 0xE, 4);
        let cfg = SolverConfig {
            eps_tol: 1e-4,
            max_iters: Some(100_000),
            ..Default::default()
        };
        let results: Vec<(usize, bool, bool, usize)> = (0..opts.schedule_runs as u64)
            .into_par_iter()
            .map(|k| {
                let mut run = RandomRun::draw(opts.seed ^ 0xE, k, nets.len());
                run.steps = (cfg.alpha, cfg.beta);
                if k % 2 == 0 {
                    run.size = 8;
                } else {
                    run.size = 16;
                    run.net = None;
                }
                let trace = match run.solve(&nets, &cfg) {
                    Ok((_, t)) => t,
                    Err(e) => trace_of(e)?,
                };
                let bad = trace.check_reductions(cfg.sigma, cfg.gamma).len();
                let term = trace.termination.clone();
                let terminated = term.as_ref().is_some_and(|t| t.reason == StopReason::Tolerance);
                let bound = term.as_ref().is_some_and(|t| {
                    cfg.gamma.powi(-(t.reductions as i32 - 1)) <= cfg.sigma * trace.eps0 / cfg.eps_tol
                });
                Ok((bad, terminated, bound, trace.reductions()))
            })
            .collect::<Result<Vec<_>>>()?;
        let bad: usize = results.iter().map(|r| r.0).sum();
        let unterminated = results.iter().filter(|r| !r.1).count();
        let unbounded = results.iter().filter(|r| !r.2).count();
        let reductions: usize = results.iter().map(|r| r.3).sum();
        Ok((
            bad == 0 && unterminated == 0 && unbounded == 0,
            format!(
                "{} runs, {reductions} reductions: {bad} trigger violations, {unterminated} unterminated, {unbounded} count-bound violations",
                results.len()
            ),
        ))
    })
}

/// `q = 0`: the objective is the plain data term.
#[derive(Debug, Clone, Copy)]
struct ZeroFeatures;

impl FeatureMap for ZeroFeatures {
    fn channels(&self) -> usize {
        1
    }

    fn eval(&self, height: usize, width: usize, _x: &[f64]) -> FeatureEval {
        FeatureEval {
            height,
            width,
            q: vec![0.0; 2 * height * width],
            cache: Vec::new(),
        }
    }

    fn pullback(&self, eval: &FeatureEval, _w: &[f64]) -> Vec<f64> {
        vec![0.0; 2 * eval.pixels()]
    }
}

pub const LINESEARCH_ALPHA_BARS: [f64; 4] = [0.1, 1.0, 10.0, 1000.0];
pub const LINESEARCH_EPS: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// `(observed, bound)` backtrack counts on the full-mask fixtures: the
/// quadratic `|x - x_true|^2 / 2` (`L = 1`) and its sum with the smoothed
/// (2,1)-norm of `x` itself (`L_eps = 1 + 1/eps`).
pub fn linesearch_counts(seed: u64, points: usize) -> Result<Vec<(f64, f64, usize, usize)>> {
    let n = 8;
    let truth = phantom(Family::SheppLogan, n, seed, 0)?;
    let m = forward(&truth, &CartesianMask::full(n))?;
    let mut out = Vec::new();
    for &alpha_bar in &LINESEARCH_ALPHA_BARS {
        for &eps in &LINESEARCH_EPS {
            let cfg = SolverConfig {
                alpha_bar,
                ..Default::default()
            };
            for k in 0..points as u64 {
                let mut rng = substream(seed, 3000 + k);
                let scale = 10f64.powf(rng.random_range(-3.0..0.0));
                let x = truth.add(&random_image(&mut rng, n, n, scale));
                for (q, l_eps) in [
                    (&ZeroFeatures as &dyn FeatureMap, 1.0),
                    (&IdentityMap as &dyn FeatureMap, 1.0 + 1.0 / eps),
                ] {
                    let (_, ell) = v_step_linesearch(&x, eps, alpha_bar, cfg.rho, cfg.eta3, cfg.max_linesearch, &m, q)?;
                    out.push((alpha_bar, eps, ell, cfg.linesearch_bound(l_eps, eps)));
                }
            }
        }
    }
    Ok(out)
}

pub fn linesearch_bound(opts: &SelfcheckOptions) -> PropertyCheck {
    timed("linesearch-bound", || {
        let counts = linesearch_counts(opts.seed, 5)?;
        let over = counts.iter().filter(|c| c.2 > c.3).count();
        let max_ell = counts.iter().map(|c| c.2).max().unwrap_or(0);
        Ok((
            over == 0,
            format!(
                "{} searches over {}x{} (alpha_bar, eps) grid, max {max_ell} backtracks: {over} above bound",
                counts.len(),
                LINESEARCH_ALPHA_BARS.len(),
                LINESEARCH_EPS.len()
            ),
        ))
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest relative mismatch of `<Ax, y> = <x, A* y>` for the Fourier
/// transform, the sampled forward operator, a convolution layer and the
/// feature-map pullback (against a directional difference).
pub fn adjoint_errors(seed: u64) -> Result<[f64; 4]> {
    let n = 16;
    let mut rng = substream(seed, 4000);
    let x = random_image(&mut rng, n, n, 1.0);
    let y = random_image(&mut rng, n, n, 1.0);
    let inner = |a: &ComplexImage, b: &ComplexImage| a.inner(b);
    let rel = |a: Complex64, b: Complex64| (a - b).norm() / a.norm().max(b.norm()).max(1e-300);

    let e_fft = rel(inner(&fft2_unitary(&x)?, &y), inner(&x, &ifft2_unitary(&y)?));

    let m = forward(&ComplexImage::zeros(n, n), &make_cartesian_mask(n, 0.3, seed)?)?;
    let fid = Fidelity::new(&m)?;
    let (xp, yp) = (x.to_planar(), y.to_planar());
    let e_normal = {
        let a = dot(&fid.normal(&xp), &yp);
        let b = dot(&xp, &fid.normal(&yp));
        (a - b).abs() / a.abs().max(b.abs())
    };

    let g = geom(n, n);
    let channels = 2 * crate::network::CHANNELS;
    let inp: Vec<f64> = (0..channels * n * n).map(|_| standard_normal(&mut rng)).collect();
    let outp: Vec<f64> = (0..channels * n * n).map(|_| standard_normal(&mut rng)).collect();
    let kernel: Vec<f64> = (0..g.kernel_len()).map(|_| 0.1 * standard_normal(&mut rng)).collect();
    let e_conv = {
        let a = dot(&conv_forward(&g, &inp, &kernel), &outp);
        let b = dot(&inp, &conv_input_adjoint(&g, &outp, &kernel));
        (a - b).abs() / a.abs().max(b.abs())
    };

    let ext = ExtractorParams::init(rng.random(), InitScheme::GlorotLike);
    let ad = AdapterParams::init(rng.random(), InitScheme::GlorotLike);
    let net = QNet::new(&ext, &ad, SmoothedRelu::default());
    let eval = net.eval(n, n, &xp);
    let w: Vec<f64> = (0..eval.q.len()).map(|_| standard_normal(&mut rng)).collect();
    let dir = random_image(&mut rng, n, n, 1.0).to_planar();
    let h = 1e-6;
    let shifted = |s: f64| {
        let p: Vec<f64> = xp.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
        net.eval(n, n, &p).q
    };
    let (qp, qm) = (shifted(h), shifted(-h));
    let jvp: Vec<f64> = qp.iter().zip(&qm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    let e_pull = {
        let a = dot(&jvp, &w);
        let b = dot(&dir, &net.pullback(&eval, &w));
        (a - b).abs() / a.abs().max(b.abs())
    };
    Ok([e_fft, e_normal, e_conv, e_pull])
}

pub fn adjoints(opts: &SelfcheckOptions) -> PropertyCheck {
    timed("adjoints", || {
        let e = adjoint_errors(opts.seed)?;
        Ok((
            e[0] < 1e-12 && e[1] < 1e-12 && e[2] < 1e-12 && e[3] < 1e-6,
            format!(
                "fft {:.1e}, sampled forward {:.1e}, conv {:.1e}, feature pullback {:.1e}",
                e[0], e[1], e[2], e[3]
            ),
        ))
    })
}

/// Every check, in a fixed order.
pub fn run_all(opts: &SelfcheckOptions) -> Vec<PropertyCheck> {
    vec![
        gradient_oracles(opts),
        smoothing_sandwich(opts),
        descent_ledger(opts),
        eps_schedule(opts),
        linesearch_bound(opts),
        adjoints(opts),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linesearch_fixture_counts_stay_below_bound() {
        let counts = linesearch_counts(3, 1).unwrap();
        assert_eq!(counts.len(), 24);
        assert!(counts.iter().all(|c| c.2 <= c.3), "{counts:?}");
        assert!(counts.iter().any(|c| c.2 > 0));
    }

    #[test]
    fn adjoint_identities() {
        let e = adjoint_errors(1).unwrap();
        assert!(e[..3].iter().all(|&v| v < 1e-12), "{e:?}");
        assert!(e[3] < 1e-6, "{e:?}");
    }
}
