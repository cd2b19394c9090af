//! The learned regularizer `r(x) = |q(x)|_{2,1}`, its smoothing `r_eps`,
//! gradients, and the composite objective `phi_eps = f + r_eps`.
//!
//! Per row with norm `a`, the smoothed term is `a^2 / (2 eps)` when
//! `a <= eps` (the set K0) and `a - eps/2` otherwise (K1). Alongside it we
//! evaluate the lifted term `r_eps + eps/2`, computed as `a + (eps - a)^2 /
//! (2 eps)` on K0 and as `a` on K1. Both forms are computed termwise so that
//! `r_eps <= r <= r_eps + d1 eps / 2` holds exactly in floating point, and
//! the solver's descent bookkeeping uses the lifted form for the same
//! reason.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mri::{Fidelity, Measurement};
use crate::network::{FeatureEval, FeatureMap};
use crate::tensor::{planar_row_norms, ComplexImage};

/// Smoothing level and the K0 membership of every row at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingState {
    pub epsilon: f64,
    pub in_k0: Vec<bool>,
}

impl SmoothingState {
    pub fn from_norms(norms: &[f64], epsilon: f64) -> Self {
        SmoothingState {
            epsilon,
            in_k0: norms.iter().map(|&a| a <= epsilon).collect(),
        }
    }

    pub fn k0(&self) -> impl Iterator<Item = usize> + '_ {
        self.in_k0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(k, _)| k)
    }

    pub fn k1(&self) -> impl Iterator<Item = usize> + '_ {
        self.in_k0
            .iter()
            .enumerate()
            .filter(|(_, &b)| !b)
            .map(|(k, _)| k)
    }
}

#[inline]
pub fn smooth_term(a: f64, eps: f64) -> f64 {
    if a <= eps {
        if a == 0.0 {
            0.0
        } else {
            a * (a / (2.0 * eps))
        }
    } else {
        a - eps / 2.0
    }
}

#[inline]
pub fn lifted_term(a: f64, eps: f64) -> f64 {
    if a <= eps {
        let d = eps - a;
        a + d * (d / (2.0 * eps))
    } else {
        a
    }
}

/// Regularizer values at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegValues {
    /// `r(x)`.
    pub exact: f64,
    /// `r_eps(x)`.
    pub smoothed: f64,
    /// `r_eps(x) + d1 eps / 2`, summed termwise.
    pub upper: f64,
}

pub fn reg_values(norms: &[f64], eps: f64) -> RegValues {
    let mut v = RegValues {
        exact: 0.0,
        smoothed: 0.0,
        upper: 0.0,
    };
    for &a in norms {
        v.exact += a;
        v.smoothed += smooth_term(a, eps);
        v.upper += lifted_term(a, eps);
    }
    v
}

/// The row cotangent `w_k = q_k / eps` on K0 and `q_k / |q_k|` on K1, in
/// the planar layout of `q`.
pub fn smoothed_cotangent(q: &[f64], norms: &[f64], eps: f64) -> Vec<f64> {
    let n = norms.len();
    let scale: Vec<f64> = norms
        .iter()
        .map(|&a| if a <= eps { 1.0 / eps } else { 1.0 / a })
        .collect();
    q.chunks_exact(n)
        .flat_map(|plane| plane.iter().zip(&scale).map(|(v, s)| v * s))
        .collect()
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "smoothing level {eps} must be positive"
        )));
    }
    Ok(())
}

/// `r(x) = |q(x)|_{2,1}`.
pub fn r<M: FeatureMap + ?Sized>(x: &ComplexImage, q: &M) -> f64 {
    let e = q.eval(x.height(), x.width(), &x.to_planar());
    e.row_norms().iter().sum()
}

pub fn r_eps<M: FeatureMap + ?Sized>(
    x: &ComplexImage,
    q: &M,
    epsilon: f64,
) -> Result<(f64, SmoothingState)> {
    check_eps(epsilon)?;
    let norms = q.eval(x.height(), x.width(), &x.to_planar()).row_norms();
    Ok((
        reg_values(&norms, epsilon).smoothed,
        SmoothingState::from_norms(&norms, epsilon),
    ))
}

/// `grad r_eps(x)` by one pullback of the row cotangent.
pub fn grad_r_eps<M: FeatureMap + ?Sized>(
    x: &ComplexImage,
    q: &M,
    epsilon: f64,
) -> Result<ComplexImage> {
    check_eps(epsilon)?;
    let g = reg_gradient(q, &q.eval(x.height(), x.width(), &x.to_planar()), epsilon);
    ComplexImage::from_planar(x.height(), x.width(), &g)
}

pub fn reg_gradient<M: FeatureMap + ?Sized>(q: &M, eval: &FeatureEval, eps: f64) -> Vec<f64> {
    let norms = eval.row_norms();
    if norms.iter().all(|&a| a == 0.0) {
        return vec![0.0; 2 * eval.pixels()];
    }
    q.pullback(eval, &smoothed_cotangent(&eval.q, &norms, eps))
}

/// `phi_eps` and its pieces at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiValue {
    pub fidelity: f64,
    pub reg: RegValues,
}

impl PhiValue {
    /// `phi_eps = f + r_eps`.
    pub fn smoothed(&self) -> f64 {
        self.fidelity + self.reg.smoothed
    }

    /// `phi = f + r`.
    pub fn exact(&self) -> f64 {
        self.fidelity + self.reg.exact
    }

    /// `phi_eps + d1 eps / 2`.
    pub fn lifted(&self) -> f64 {
        self.fidelity + self.reg.upper
    }

    pub fn is_finite(&self) -> bool {
        self.lifted().is_finite() && self.smoothed().is_finite()
    }
}

/// The composite objective for one measurement and one feature map, on
/// planar image buffers.
#[derive(Clone)]
pub struct Objective<'a, M: FeatureMap + ?Sized> {
    pub fidelity: Arc<Fidelity>,
    pub features: &'a M,
}

impl<'a, M: FeatureMap + ?Sized> Objective<'a, M> {
    pub fn new(m: &Measurement, features: &'a M) -> Result<Self> {
        Ok(Objective {
            fidelity: Fidelity::new(m)?,
            features,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.fidelity.shape()
    }

    /// Number of feature rows `d1`.
    pub fn rows(&self) -> usize {
        self.fidelity.pixels()
    }

    pub fn features_at(&self, x: &[f64]) -> FeatureEval {
        let (h, w) = self.shape();
        self.features.eval(h, w, x)
    }

    pub fn value(&self, x: &[f64], eps: f64) -> PhiValue {
        let norms = planar_row_norms(&self.features_at(x).q, self.rows());
        PhiValue {
            fidelity: self.fidelity.value(x),
            reg: reg_values(&norms, eps),
        }
    }

    pub fn reg_grad(&self, x: &[f64], eps: f64) -> Vec<f64> {
        reg_gradient(self.features, &self.features_at(x), eps)
    }

    pub fn value_and_grad(&self, x: &[f64], eps: f64) -> (PhiValue, Vec<f64>) {
        let eval = self.features_at(x);
        let norms = eval.row_norms();
        let (fv, mut g) = self.fidelity.value_and_gradient(x);
        if norms.iter().any(|&a| a != 0.0) {
            let gr = self
                .features
                .pullback(&eval, &smoothed_cotangent(&eval.q, &norms, eps));
            for (a, b) in g.iter_mut().zip(&gr) {
                *a += b;
            }
        }
        (
            PhiValue {
                fidelity: fv,
                reg: reg_values(&norms, eps),
            },
            g,
        )
    }
}

/// `(phi_eps(x), grad phi_eps(x))` for a complex image.
pub fn phi_eps<M: FeatureMap + ?Sized>(
    x: &ComplexImage,
    m: &Measurement,
    q: &M,
    epsilon: f64,
) -> Result<(f64, ComplexImage)> {
    check_eps(epsilon)?;
    if x.shape() != m.shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs measurement {:?}",
            x.shape(),
            m.shape()
        )));
    }
    let obj = Objective::new(m, q)?;
    let (v, g) = obj.value_and_grad(&x.to_planar(), epsilon);
    Ok((
        v.smoothed(),
        ComplexImage::from_planar(x.height(), x.width(), &g)?,
    ))
}

/// Default initial smoothing level: a tenth of the median feature row norm
/// at `x0`, floored at `1e-3`.
pub fn default_eps0(norms: &[f64]) -> f64 {
    if norms.is_empty() {
        return 1e-3;
    }
    let mut s = norms.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    (0.1 * median).max(1e-3)
}
