//! Reverse-mode differentiation over a closed set of primitives.
//!
//! A [`Tape`] is built define-by-run: every recorded node is evaluated
//! immediately, so branch decisions taken while building (K0/K1 masks,
//! accepted steps, line-search counts) can read plain values and are then
//! stored inside the ops as constants. [`Tape::evaluate`] replays the same
//! graph with new leaf values and the frozen branches.
//!
//! All values are real `f64` buffers. Complex images and feature stacks
//! use the planar layout `[re planes, im planes]`, so the gradient of a
//! complex leaf is the real-pair gradient in that same layout.

mod check;

pub use check::{check_function, check_gradient, CheckOptions, CheckReport};

use std::sync::Arc;

use crate::data::metrics::ssim_with_grad;
use crate::error::{Error, Result};
use crate::mri::Fidelity;
use crate::network::conv::{conv_forward, conv_input_adjoint, conv_kernel_grad, ConvGeom};
use crate::network::{lift, unlift, SmoothedRelu};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of one vector-Jacobian product, used to show
/// that the gradient checks catch a broken rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    ConvInputVjp,
    ActivationVjp,
    FidelityVjp,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv-vjp" => Ok(Fault::ConvInputVjp),
            "activation-vjp" => Ok(Fault::ActivationVjp),
            "fidelity-vjp" => Ok(Fault::FidelityVjp),
            other => Err(Error::InvalidArgument(format!("unknown fault '{other}'"))),
        }
    }
}

const FAULT_SCALE: f64 = 1.05;

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `a + c * b` with a constant `c`.
    AddScaled {
        a: NodeId,
        b: NodeId,
        c: f64,
    },
    /// `a - s * b` with a scalar node `s`.
    ScaledSub {
        a: NodeId,
        s: NodeId,
        b: NodeId,
    },
    Exp(NodeId),
    /// Picks one entry as a scalar.
    Index(NodeId, usize),
    Lift {
        x: NodeId,
        channels: usize,
    },
    Unlift {
        x: NodeId,
        channels: usize,
    },
    Conv {
        x: NodeId,
        kernel: NodeId,
        geom: ConvGeom,
    },
    /// Input adjoint of a convolution, as a function of the cotangent and
    /// the kernel.
    ConvT {
        g: NodeId,
        kernel: NodeId,
        geom: ConvGeom,
    },
    Act {
        x: NodeId,
        act: SmoothedRelu,
    },
    /// `g * act'(pre)`.
    ActDeriv {
        g: NodeId,
        pre: NodeId,
        act: SmoothedRelu,
    },
    /// Row cotangent of the smoothed (2,1)-norm with frozen K0 membership.
    SmoothCotangent {
        q: NodeId,
        eps: f64,
        in_k0: Arc<Vec<bool>>,
    },
    /// `r_eps` with frozen K0 membership.
    SmoothNorm21 {
        q: NodeId,
        eps: f64,
        in_k0: Arc<Vec<bool>>,
    },
    Norm21 {
        q: NodeId,
        pixels: usize,
    },
    /// `F^H P^T (PFx - y)`.
    FidelityGrad {
        x: NodeId,
        fid: Arc<Fidelity>,
    },
    /// `1/2 |PFx - y|^2`.
    DataFidelity {
        x: NodeId,
        fid: Arc<Fidelity>,
    },
    /// `1/2 |x|^2`.
    SqNorm(NodeId),
    /// `|x - target|^2`.
    SqDist {
        x: NodeId,
        target: Arc<Vec<f64>>,
    },
    /// Planar complex to per-pixel modulus.
    Magnitude(NodeId),
    /// Mean SSIM of a real image against a fixed reference.
    Ssim {
        x: NodeId,
        target: Arc<Vec<f64>>,
        height: usize,
        width: usize,
    },
    /// `sum_i c_i * s_i` over scalar nodes.
    WeightedSum(Vec<(NodeId, f64)>),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf | Const => vec![],
            Add(a, b) | Sub(a, b) => vec![*a, *b],
            Scale(a, _) | Exp(a) | Index(a, _) | SqNorm(a) | Magnitude(a) => vec![*a],
            AddScaled { a, b, .. } => vec![*a, *b],
            ScaledSub { a, s, b } => vec![*a, *s, *b],
            Lift { x, .. } | Unlift { x, .. } | Act { x, .. } => vec![*x],
            Conv { x, kernel, .. } => vec![*x, *kernel],
            ConvT { g, kernel, .. } => vec![*g, *kernel],
            ActDeriv { g, pre, .. } => vec![*g, *pre],
            SmoothCotangent { q, .. } | SmoothNorm21 { q, .. } | Norm21 { q, .. } => vec![*q],
            FidelityGrad { x, .. } | DataFidelity { x, .. } => vec![*x],
            SqDist { x, .. } | Ssim { x, .. } => vec![*x],
            WeightedSum(terms) => terms.iter().map(|t| t.0).collect(),
        }
    }

    pub fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Const => "const",
            Add(..) => "add",
            Sub(..) => "sub",
            Scale(..) => "scale",
            AddScaled { .. } => "add_scaled",
            ScaledSub { .. } => "scaled_sub",
            Exp(_) => "exp",
            Index(..) => "index",
            Lift { .. } => "lift",
            Unlift { .. } => "unlift",
            Conv { .. } => "conv",
            ConvT { .. } => "conv_t",
            Act { .. } => "act",
            ActDeriv { .. } => "act_deriv",
            SmoothCotangent { .. } => "smooth_cotangent",
            SmoothNorm21 { .. } => "smooth_norm21",
            Norm21 { .. } => "norm21",
            FidelityGrad { .. } => "fidelity_grad",
            DataFidelity { .. } => "data_fidelity",
            SqNorm(_) => "sq_norm",
            SqDist { .. } => "sq_dist",
            Magnitude(_) => "magnitude",
            Ssim { .. } => "ssim",
            WeightedSum(_) => "weighted_sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    requires_grad: bool,
    /// Activation pieces of the input, fixed when the node is recorded.
    pieces: Option<Arc<Vec<u8>>>,
}

/// A recorded computation with its current values.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Vec<f64>>,
    fault: Option<Fault>,
}

/// Gradients of one scalar output with respect to every node that feeds it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `id`; zeros if the output does not depend on it.
    pub fn get(&self, id: NodeId) -> Vec<f64> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[id.0]])
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(&src) {
                *a += b;
            }
        }
        None => *dst = Some(src),
    }
}

fn row_norms(q: &[f64], pixels: usize) -> Vec<f64> {
    crate::tensor::planar_row_norms(q, pixels)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id.0][0]
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Op names in recording order; two tapes with equal topology give
    /// equal lists.
    pub fn topology(&self) -> Vec<(&'static str, Vec<usize>)> {
        self.nodes
            .iter()
            .map(|n| (n.op.name(), n.op.inputs().iter().map(|i| i.0).collect()))
            .collect()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Vec<f64>) -> NodeId {
        self.push_raw(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push_raw(Op::Const, value, false)
    }

    fn push_raw(&mut self, op: Op, value: Vec<f64>, requires_grad: bool) -> NodeId {
        let pieces = match &op {
            Op::Act { x: t, act } | Op::ActDeriv { pre: t, act, .. } => Some(Arc::new(
                self.values[t.0].iter().map(|&v| act.piece(v)).collect(),
            )),
            _ => None,
        };
        self.nodes.push(Node {
            op,
            requires_grad,
            pieces,
        });
        self.values.push(value);
        NodeId(self.nodes.len() - 1)
    }

    /// Records `op`, evaluating it on the current values.
    pub fn push(&mut self, op: Op) -> NodeId {
        let inputs = op.inputs();
        assert!(
            inputs.iter().all(|i| i.0 < self.nodes.len()),
            "op inputs must precede it"
        );
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = self.push_raw(op, Vec::new(), requires_grad);
        self.values[id.0] = self.compute(id.0);
        id
    }

    fn compute(&self, node: usize) -> Vec<f64> {
        let v = |id: &NodeId| &self.values[id.0];
        let op = &self.nodes[node].op;
        let pieces = || -> &[u8] {
            self.nodes[node]
                .pieces
                .as_deref()
                .expect("activation nodes carry pieces")
        };
        match op {
            Op::Leaf | Op::Const => unreachable!("leaves are not recomputed"),
            Op::Add(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x + y).collect(),
            Op::Sub(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x - y).collect(),
            Op::Scale(a, c) => v(a).iter().map(|x| c * x).collect(),
            Op::AddScaled { a, b, c } => v(a).iter().zip(v(b)).map(|(x, y)| x + c * y).collect(),
            Op::ScaledSub { a, s, b } => {
                let s = v(s)[0];
                v(a).iter().zip(v(b)).map(|(x, y)| x - s * y).collect()
            }
            Op::Exp(a) => v(a).iter().map(|x| x.exp()).collect(),
            Op::Index(a, i) => vec![v(a)[*i]],
            Op::Lift { x, channels } => lift(v(x), *channels),
            Op::Unlift { x, channels } => unlift(v(x), *channels),
            Op::Conv { x, kernel, geom } => conv_forward(geom, v(x), v(kernel)),
            Op::ConvT { g, kernel, geom } => conv_input_adjoint(geom, v(g), v(kernel)),
            Op::Act { x, act } => v(x)
                .iter()
                .zip(pieces())
                .map(|(&t, &k)| act.value_on(k, t))
                .collect(),
            Op::ActDeriv { g, pre, act } => v(g)
                .iter()
                .zip(v(pre))
                .zip(pieces())
                .map(|((&a, &p), &k)| a * act.derivative_on(k, p))
                .collect(),
            Op::SmoothCotangent { q, eps, in_k0 } => {
                let q = v(q);
                let n = in_k0.len();
                let norms = row_norms(q, n);
                let scale: Vec<f64> = norms
                    .iter()
                    .zip(in_k0.iter())
                    .map(|(&a, &k0)| {
                        if k0 {
                            1.0 / eps
                        } else if a > 0.0 {
                            1.0 / a
                        } else {
                            0.0
                        }
                    })
                    .collect();
                q.chunks_exact(n)
                    .flat_map(|p| p.iter().zip(&scale).map(|(x, s)| x * s))
                    .collect()
            }
            Op::SmoothNorm21 { q, eps, in_k0 } => {
                let norms = row_norms(v(q), in_k0.len());
                let total = norms
                    .iter()
                    .zip(in_k0.iter())
                    .map(|(&a, &k0)| {
                        if k0 {
                            if a == 0.0 {
                                0.0
                            } else {
                                a * (a / (2.0 * eps))
                            }
                        } else {
                            a - eps / 2.0
                        }
                    })
                    .sum();
                vec![total]
            }
            Op::Norm21 { q, pixels } => vec![row_norms(v(q), *pixels).iter().sum()],
            Op::FidelityGrad { x, fid } => fid.gradient(v(x)),
            Op::DataFidelity { x, fid } => vec![fid.value(v(x))],
            Op::SqNorm(a) => vec![0.5 * dot(v(a), v(a))],
            Op::SqDist { x, target } => {
                vec![v(x)
                    .iter()
                    .zip(target.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()]
            }
            Op::Magnitude(a) => {
                let z = v(a);
                let n = z.len() / 2;
                (0..n).map(|k| z[k].hypot(z[n + k])).collect()
            }
            Op::Ssim {
                x,
                target,
                height,
                width,
            } => vec![ssim_with_grad(v(x), target, *height, *width, false).0],
            Op::WeightedSum(terms) => vec![terms.iter().map(|(id, c)| c * v(id)[0]).sum()],
        }
    }

    /// Replaces leaf values and recomputes every derived node with the
    /// frozen branch constants.
    pub fn evaluate(&mut self, bindings: &[(NodeId, Vec<f64>)]) -> Result<()> {
        for (id, value) in bindings {
            let node = self
                .nodes
                .get(id.0)
                .ok_or_else(|| Error::Tape(format!("no node {}", id.0)))?;
            if !matches!(node.op, Op::Leaf | Op::Const) {
                return Err(Error::Tape(format!("node {} is not a leaf", id.0)));
            }
            if value.len() != self.values[id.0].len() {
                return Err(Error::Shape(format!(
                    "binding for node {} has {} values, expected {}",
                    id.0,
                    value.len(),
                    self.values[id.0].len()
                )));
            }
            self.values[id.0] = value.clone();
        }
        for i in 0..self.nodes.len() {
            if !matches!(self.nodes[i].op, Op::Leaf | Op::Const) {
                self.values[i] = self.compute(i);
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar output.
    pub fn gradient(&self, output: NodeId) -> Result<Gradients> {
        if self.values[output.0].len() != 1 {
            return Err(Error::Tape(format!(
                "gradient needs a scalar output, node {} has {} values",
                output.0,
                self.values[output.0].len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            lens: self.values.iter().map(Vec::len).collect(),
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let v = |id: &NodeId| &self.values[id.0];
        let op = &node.op;
        let pieces = || -> &[u8] {
            node.pieces
                .as_deref()
                .expect("activation nodes carry pieces")
        };
        let fault = |f: Fault, mut d: Vec<f64>| {
            if self.fault == Some(f) {
                d.iter_mut().for_each(|x| *x *= FAULT_SCALE);
            }
            d
        };
        let mut send = |id: NodeId, d: Vec<f64>| {
            if self.nodes[id.0].requires_grad {
                add_into(&mut grads[id.0], d);
            }
        };
        match op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|x| c * x).collect()),
            Op::AddScaled { a, b, c } => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| c * x).collect());
            }
            Op::ScaledSub { a, s, b } => {
                let sv = v(s)[0];
                if self.wants(*s) {
                    send(*s, vec![-dot(g, v(b))]);
                }
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -sv * x).collect());
            }
            Op::Exp(a) => send(*a, g.iter().zip(v(a)).map(|(gi, x)| gi * x.exp()).collect()),
            Op::Index(a, i) => {
                let mut d = vec![0.0; v(a).len()];
                d[*i] = g[0];
                send(*a, d);
            }
            Op::Lift { x, channels } => send(*x, unlift(g, *channels)),
            Op::Unlift { x, channels } => send(*x, lift(g, *channels)),
            Op::Conv { x, kernel, geom } => {
                if self.wants(*x) {
                    send(
                        *x,
                        fault(Fault::ConvInputVjp, conv_input_adjoint(geom, g, v(kernel))),
                    );
                }
                if self.wants(*kernel) {
                    send(*kernel, conv_kernel_grad(geom, v(x), g));
                }
            }
            Op::ConvT {
                g: gin,
                kernel,
                geom,
            } => {
                if self.wants(*gin) {
                    send(*gin, conv_forward(geom, g, v(kernel)));
                }
                if self.wants(*kernel) {
                    send(*kernel, conv_kernel_grad(geom, g, v(gin)));
                }
            }
            Op::Act { x, act } => send(
                *x,
                fault(
                    Fault::ActivationVjp,
                    g.iter()
                        .zip(v(x))
                        .zip(pieces())
                        .map(|((gi, &t), &k)| gi * act.derivative_on(k, t))
                        .collect(),
                ),
            ),
            Op::ActDeriv { g: gin, pre, act } => {
                if self.wants(*gin) {
                    send(
                        *gin,
                        g.iter()
                            .zip(v(pre))
                            .zip(pieces())
                            .map(|((gi, &p), &k)| gi * act.derivative_on(k, p))
                            .collect(),
                    );
                }
                if self.wants(*pre) {
                    send(
                        *pre,
                        g.iter()
                            .zip(v(gin))
                            .zip(pieces())
                            .map(|((gi, a), &k)| gi * a * act.second_on(k))
                            .collect(),
                    );
                }
            }
            Op::SmoothCotangent { q, eps, in_k0 } => {
                let qv = v(q);
                let n = in_k0.len();
                let norms = row_norms(qv, n);
                let planes = qv.len() / n;
                let mut d = vec![0.0; qv.len()];
                for k in 0..n {
                    if in_k0[k] {
                        for c in 0..planes {
                            d[c * n + k] = g[c * n + k] / eps;
                        }
                    } else if norms[k] > 0.0 {
                        let a = norms[k];
                        let proj: f64 = (0..planes)
                            .map(|c| qv[c * n + k] * g[c * n + k])
                            .sum::<f64>()
                            / a;
                        for c in 0..planes {
                            d[c * n + k] = (g[c * n + k] - qv[c * n + k] / a * proj) / a;
                        }
                    }
                }
                send(*q, d);
            }
            Op::SmoothNorm21 { q, eps, in_k0 } => {
                let qv = v(q);
                let n = in_k0.len();
                let norms = row_norms(qv, n);
                let scale: Vec<f64> = norms
                    .iter()
                    .zip(in_k0.iter())
                    .map(|(&a, &k0)| {
                        if k0 {
                            g[0] / eps
                        } else if a > 0.0 {
                            g[0] / a
                        } else {
                            0.0
                        }
                    })
                    .collect();
                send(
                    *q,
                    qv.chunks_exact(n)
                        .flat_map(|p| p.iter().zip(&scale).map(|(x, s)| x * s))
                        .collect(),
                );
            }
            Op::Norm21 { q, pixels } => {
                let qv = v(q);
                let norms = row_norms(qv, *pixels);
                send(
                    *q,
                    qv.chunks_exact(*pixels)
                        .flat_map(|p| {
                            p.iter()
                                .zip(&norms)
                                .map(|(x, &a)| if a > 0.0 { g[0] * x / a } else { 0.0 })
                        })
                        .collect(),
                );
            }
            Op::FidelityGrad { x, fid } => send(*x, fault(Fault::FidelityVjp, fid.normal(g))),
            Op::DataFidelity { x, fid } => send(
                *x,
                fault(
                    Fault::FidelityVjp,
                    fid.gradient(v(x)).iter().map(|d| g[0] * d).collect(),
                ),
            ),
            Op::SqNorm(a) => send(*a, v(a).iter().map(|x| g[0] * x).collect()),
            Op::SqDist { x, target } => send(
                *x,
                v(x).iter()
                    .zip(target.iter())
                    .map(|(a, b)| 2.0 * g[0] * (a - b))
                    .collect(),
            ),
            Op::Magnitude(a) => {
                let z = v(a);
                let n = z.len() / 2;
                let mut d = vec![0.0; 2 * n];
                for k in 0..n {
                    let m = z[k].hypot(z[n + k]);
                    if m > 0.0 {
                        d[k] = g[k] * z[k] / m;
                        d[n + k] = g[k] * z[n + k] / m;
                    }
                }
                send(*a, d);
            }
            Op::Ssim {
                x,
                target,
                height,
                width,
            } => {
                let (_, grad) = ssim_with_grad(v(x), target, *height, *width, true);
                send(*x, grad.iter().map(|d| g[0] * d).collect());
            }
            Op::WeightedSum(terms) => {
                for (id, c) in terms {
                    send(*id, vec![c * g[0]]);
                }
            }
        }
    }

    // Convenience builders.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScaled { a, b, c })
    }

    pub fn scaled_sub(&mut self, a: NodeId, s: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ScaledSub { a, s, b })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> NodeId {
        self.push(Op::Index(a, i))
    }

    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SqNorm(a))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        self.push(Op::WeightedSum(terms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_square_norm() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0, 4.0]);
        let out = t.sq_norm(x);
        assert_eq!(t.scalar(out), 12.5);
        let g = t.gradient(out).unwrap();
        assert_eq!(g.get(x), vec![3.0, 4.0]);
    }

    #[test]
    fn norm21_of_single_row() {
        let mut t = Tape::new();
        // one pixel, one complex channel 3 + 4i
        let q = t.leaf(vec![3.0, 4.0]);
        let out = t.push(Op::Norm21 { q, pixels: 1 });
        assert_eq!(t.scalar(out), 5.0);
        let g = t.gradient(out).unwrap();
        assert_eq!(g.get(q), vec![0.6, 0.8]);
    }

    #[test]
    fn evaluate_replays_with_new_bindings() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0]);
        let c = t.constant(vec![0.5, 0.5]);
        let d = t.sub(x, c);
        let out = t.sq_norm(d);
        assert_eq!(t.scalar(out), 0.5 * (0.25 + 2.25));
        let topo = t.topology();
        t.evaluate(&[(x, vec![0.5, 0.5])]).unwrap();
        assert_eq!(t.scalar(out), 0.0);
        assert_eq!(t.topology(), topo);
        assert!(t.evaluate(&[(x, vec![0.0])]).is_err());
        assert!(t.evaluate(&[(d, vec![0.0, 0.0])]).is_err());
        let g = t.gradient(out).unwrap();
        assert_eq!(g.get(c), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0]);
        let y = t.scale(x, 2.0);
        assert!(t.gradient(y).is_err());
    }
}
