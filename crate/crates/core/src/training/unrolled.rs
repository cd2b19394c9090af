//! The iteration unrolled into a fixed number of phases and recorded on a
//! tape, so the reconstruction can be differentiated with respect to the
//! network weights and the per-phase step sizes.

use std::sync::Arc;

use crate::autodiff::{Gradients, NodeId, Op, Tape};
use crate::data::metrics::ssim_with_grad;
use crate::error::{Error, Result};
use crate::mri::{zero_filling, Fidelity, Measurement};
use crate::network::params::{ParamBundle, Tensor};
use crate::network::{
    extractor_tensor_name, geom, AdapterParams, ExtractorParams, QNet, SmoothedRelu,
    ADAPTER_TENSOR, CHANNELS, KERNEL_SHAPE,
};
use crate::regularizer::Objective;
use crate::solver::{resolve_eps0, run, solve, SolverConfig, SolverTrace, StepSizes, Workspace};
use crate::tensor::{planar_row_norms, ComplexImage};

pub const LOG_ALPHA_TENSOR: &str = "steps.log_alpha";
pub const LOG_BETA_TENSOR: &str = "steps.log_beta";

/// Everything owned by one task: its adapter and its per-phase step sizes,
/// stored as logarithms.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskParams {
    pub adapter: AdapterParams,
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
}

impl TaskParams {
    pub fn new(adapter: AdapterParams, phases: usize, step: f64) -> Self {
        TaskParams {
            adapter,
            log_alpha: vec![step.ln(); phases],
            log_beta: vec![step.ln(); phases],
        }
    }

    pub fn phases(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn steps(&self) -> StepSizes {
        StepSizes {
            alpha: self.log_alpha.iter().map(|v| v.exp()).collect(),
            beta: self.log_beta.iter().map(|v| v.exp()).collect(),
        }
    }

    pub fn to_bundle(&self) -> ParamBundle {
        let mut b = self.adapter.to_bundle();
        let n = self.phases();
        b.insert(
            LOG_ALPHA_TENSOR,
            Tensor::new(vec![n], self.log_alpha.clone()).unwrap(),
        );
        b.insert(
            LOG_BETA_TENSOR,
            Tensor::new(vec![n], self.log_beta.clone()).unwrap(),
        );
        b
    }

    /// Reads an adapter bundle; step sizes default to `default_step` over
    /// `phases` phases when the bundle has none.
    pub fn from_bundle(b: &ParamBundle, phases: usize, default_step: f64) -> Result<Self> {
        let adapter = AdapterParams::from_bundle(b)?;
        match (b.get(LOG_ALPHA_TENSOR), b.get(LOG_BETA_TENSOR)) {
            (Some(a), Some(bt)) => {
                if a.len() != bt.len() || a.is_empty() {
                    return Err(Error::Shape(format!(
                        "step schedules of lengths {} and {}",
                        a.len(),
                        bt.len()
                    )));
                }
                if a.data.iter().chain(&bt.data).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("step sizes".into()));
                }
                Ok(TaskParams {
                    adapter,
                    log_alpha: a.data.clone(),
                    log_beta: bt.data.clone(),
                })
            }
            (None, None) => Ok(TaskParams::new(adapter, phases, default_step)),
            _ => Err(Error::InvalidArgument(
                "adapter bundle has only one step schedule".into(),
            )),
        }
    }
}

/// Which parameter groups get gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Learn {
    pub extractor: bool,
    pub adapter: bool,
    pub steps: bool,
}

impl Learn {
    pub const ALL: Learn = Learn {
        extractor: true,
        adapter: true,
        steps: true,
    };
    pub const NONE: Learn = Learn {
        extractor: false,
        adapter: false,
        steps: false,
    };
}

/// Records phases on a tape. Parameters enter as leaves when learnable and
/// as constants otherwise.
pub struct TapeWorkspace {
    pub tape: Tape,
    fid: Arc<Fidelity>,
    height: usize,
    width: usize,
    act: SmoothedRelu,
    kernels: Vec<NodeId>,
    adapter: NodeId,
    log_alpha: NodeId,
    log_beta: NodeId,
    step_nodes: Vec<Option<(NodeId, NodeId)>>,
}

impl TapeWorkspace {
    pub fn new(
        fid: Arc<Fidelity>,
        extractor: &ExtractorParams,
        task: &TaskParams,
        act: SmoothedRelu,
        learn: Learn,
    ) -> Self {
        let mut tape = Tape::new();
        let input = |tape: &mut Tape, v: Vec<f64>, learnable: bool| {
            if learnable {
                tape.leaf(v)
            } else {
                tape.constant(v)
            }
        };
        let kernels = extractor
            .layers()
            .iter()
            .map(|l| input(&mut tape, l.weights().to_vec(), learn.extractor))
            .collect();
        let adapter = input(
            &mut tape,
            task.adapter.layer().weights().to_vec(),
            learn.adapter,
        );
        let log_alpha = input(&mut tape, task.log_alpha.clone(), learn.steps);
        let log_beta = input(&mut tape, task.log_beta.clone(), learn.steps);
        let (height, width) = fid.shape();
        TapeWorkspace {
            tape,
            fid,
            height,
            width,
            act,
            kernels,
            adapter,
            log_alpha,
            log_beta,
            step_nodes: vec![None; task.phases()],
        }
    }

    pub fn kernel_nodes(&self) -> &[NodeId] {
        &self.kernels
    }

    pub fn adapter_node(&self) -> NodeId {
        self.adapter
    }

    pub fn step_leaves(&self) -> (NodeId, NodeId) {
        (self.log_alpha, self.log_beta)
    }

    fn steps_at(&mut self, t: usize) -> (NodeId, NodeId) {
        let i = t.min(self.step_nodes.len() - 1);
        if let Some(s) = self.step_nodes[i] {
            return s;
        }
        let a = self.tape.index(self.log_alpha, i);
        let a = self.tape.exp(a);
        let b = self.tape.index(self.log_beta, i);
        let b = self.tape.exp(b);
        self.step_nodes[i] = Some((a, b));
        (a, b)
    }

    /// `q(x)` with the pre-activations of every extractor layer.
    pub fn features(&mut self, x: NodeId) -> (NodeId, Vec<NodeId>) {
        let g = geom(self.height, self.width);
        let mut h = self.tape.push(Op::Lift {
            x,
            channels: CHANNELS,
        });
        let mut pres = Vec::with_capacity(self.kernels.len());
        for &k in &self.kernels {
            let pre = self.tape.push(Op::Conv {
                x: h,
                kernel: k,
                geom: g,
            });
            pres.push(pre);
            h = self.tape.push(Op::Act {
                x: pre,
                act: self.act,
            });
        }
        let q = self.tape.push(Op::Conv {
            x: h,
            kernel: self.adapter,
            geom: g,
        });
        (q, pres)
    }

    /// `grad r_eps(x)` with the K0/K1 split frozen at the current value.
    pub fn reg_grad(&mut self, x: NodeId, eps: f64) -> NodeId {
        let g = geom(self.height, self.width);
        let (q, pres) = self.features(x);
        let norms = planar_row_norms(self.tape.value(q), self.height * self.width);
        let in_k0 = Arc::new(norms.iter().map(|&a| a <= eps).collect::<Vec<_>>());
        let w = self.tape.push(Op::SmoothCotangent { q, eps, in_k0 });
        let mut d = self.tape.push(Op::ConvT {
            g: w,
            kernel: self.adapter,
            geom: g,
        });
        for (&k, &pre) in self.kernels.clone().iter().zip(&pres).rev() {
            d = self.tape.push(Op::ActDeriv {
                g: d,
                pre,
                act: self.act,
            });
            d = self.tape.push(Op::ConvT {
                g: d,
                kernel: k,
                geom: g,
            });
        }
        self.tape.push(Op::Unlift {
            x: d,
            channels: CHANNELS,
        })
    }

    pub fn fidelity_grad(&mut self, x: NodeId) -> NodeId {
        self.tape.push(Op::FidelityGrad {
            x,
            fid: self.fid.clone(),
        })
    }
}

impl Workspace for TapeWorkspace {
    type Point = NodeId;

    fn values<'p>(&'p self, p: &'p NodeId) -> &'p [f64] {
        self.tape.value(*p)
    }

    fn u_step(&mut self, x: &NodeId, t: usize, eps: f64) -> Result<NodeId> {
        let (alpha, beta) = self.steps_at(t);
        let gf = self.fidelity_grad(*x);
        let z = self.tape.scaled_sub(*x, alpha, gf);
        let gr = self.reg_grad(z, eps);
        Ok(self.tape.scaled_sub(z, beta, gr))
    }

    fn gradient(&mut self, x: &NodeId, eps: f64, _known: &[f64]) -> Result<NodeId> {
        let gf = self.fidelity_grad(*x);
        let gr = self.reg_grad(*x, eps);
        Ok(self.tape.add(gf, gr))
    }

    fn step(&mut self, x: &NodeId, s: f64, d: &NodeId) -> NodeId {
        self.tape.add_scaled(*x, *d, -s)
    }
}

/// A recorded unrolled reconstruction.
pub struct Unrolled {
    pub ws: TapeWorkspace,
    pub x0: NodeId,
    pub output: NodeId,
    pub trace: SolverTrace,
}

/// The solver settings used for a fixed phase count: no early exit.
pub fn phase_config(solver: &SolverConfig, phases: usize) -> SolverConfig {
    SolverConfig {
        max_iters: Some(phases),
        eps_tol: 0.0,
        ..solver.clone()
    }
}

/// Runs `phases` iterations from zero filling on a tape.
pub fn unrolled_tape(
    m: &Measurement,
    extractor: &ExtractorParams,
    task: &TaskParams,
    act: SmoothedRelu,
    solver: &SolverConfig,
    learn: Learn,
) -> Result<Unrolled> {
    let cfg = phase_config(solver, task.phases());
    let net = QNet::new(extractor, &task.adapter, act);
    let obj = Objective::new(m, &net)?;
    let start = zero_filling(m).to_planar();
    let eps0 = resolve_eps0(&obj, &start, &cfg);
    let mut ws = TapeWorkspace::new(obj.fidelity.clone(), extractor, task, act, learn);
    let x0 = ws.tape.constant(start);
    let (output, trace) = run(&mut ws, &obj, x0, &cfg, eps0)?;
    Ok(Unrolled {
        ws,
        x0,
        output,
        trace,
    })
}

/// Plain (untaped) unrolled reconstruction with the same phases.
pub fn unrolled_forward(
    m: &Measurement,
    extractor: &ExtractorParams,
    task: &TaskParams,
    act: SmoothedRelu,
    solver: &SolverConfig,
) -> Result<(ComplexImage, SolverTrace)> {
    let cfg = phase_config(solver, task.phases());
    let net = QNet::new(extractor, &task.adapter, act);
    solve(m, &net, None, &cfg, Some(&task.steps()))
}

/// `|x - x_hat|^2 - alpha_ssim * SSIM(|x|, |x_hat|)`.
pub fn training_loss(x: &ComplexImage, x_hat: &ComplexImage, alpha_ssim: f64) -> Result<f64> {
    x.same_shape(x_hat)?;
    let sq = x.sub(x_hat).norm_sqr();
    if alpha_ssim == 0.0 {
        return Ok(sq);
    }
    let s = ssim_with_grad(
        &x.magnitude(),
        &x_hat.magnitude(),
        x.height(),
        x.width(),
        false,
    )
    .0;
    Ok(sq - alpha_ssim * s)
}

/// Records the training loss of planar node `x` against `x_hat`.
pub fn record_loss(tape: &mut Tape, x: NodeId, x_hat: &ComplexImage, alpha_ssim: f64) -> NodeId {
    let sq = tape.push(Op::SqDist {
        x,
        target: Arc::new(x_hat.to_planar()),
    });
    if alpha_ssim == 0.0 {
        return tape.weighted_sum(vec![(sq, 1.0)]);
    }
    let mag = tape.push(Op::Magnitude(x));
    let s = tape.push(Op::Ssim {
        x: mag,
        target: Arc::new(x_hat.magnitude()),
        height: x_hat.height(),
        width: x_hat.width(),
    });
    tape.weighted_sum(vec![(sq, 1.0), (s, -alpha_ssim)])
}

/// Loss, reconstruction and parameter gradients for one sample.
pub struct SampleGrad {
    pub loss: f64,
    pub recon: ComplexImage,
    /// Extractor gradients by layer, when learnable.
    pub extractor: Option<ParamBundle>,
    /// Adapter and step gradients in the task bundle layout.
    pub task: ParamBundle,
    pub trace: SolverTrace,
}

pub fn sample_gradient(
    m: &Measurement,
    truth: &ComplexImage,
    extractor: &ExtractorParams,
    task: &TaskParams,
    act: SmoothedRelu,
    solver: &SolverConfig,
    alpha_ssim: f64,
    learn: Learn,
) -> Result<SampleGrad> {
    let mut u = unrolled_tape(m, extractor, task, act, solver, learn)?;
    let loss_node = record_loss(&mut u.ws.tape, u.output, truth, alpha_ssim);
    let loss = u.ws.tape.scalar(loss_node);
    let (h, w) = m.shape();
    let recon = ComplexImage::from_planar(h, w, u.ws.tape.value(u.output))?;
    let grads = u.ws.tape.gradient(loss_node)?;
    let extractor_grads = learn.extractor.then(|| {
        let mut b = ParamBundle::new();
        for (i, &k) in u.ws.kernel_nodes().iter().enumerate() {
            b.insert(
                extractor_tensor_name(i),
                Tensor::new(KERNEL_SHAPE.to_vec(), grads.get(k)).unwrap(),
            );
        }
        b
    });
    let task_grads = task_gradients(&u.ws, &grads, task.phases(), learn);
    Ok(SampleGrad {
        loss,
        recon,
        extractor: extractor_grads,
        task: task_grads,
        trace: u.trace,
    })
}

fn task_gradients(
    ws: &TapeWorkspace,
    grads: &Gradients,
    phases: usize,
    learn: Learn,
) -> ParamBundle {
    let mut b = ParamBundle::new();
    if learn.adapter {
        b.insert(
            ADAPTER_TENSOR,
            Tensor::new(KERNEL_SHAPE.to_vec(), grads.get(ws.adapter_node())).unwrap(),
        );
    }
    if learn.steps {
        let (la, lb) = ws.step_leaves();
        b.insert(
            LOG_ALPHA_TENSOR,
            Tensor::new(vec![phases], grads.get(la)).unwrap(),
        );
        b.insert(
            LOG_BETA_TENSOR,
            Tensor::new(vec![phases], grads.get(lb)).unwrap(),
        );
    }
    b
}
