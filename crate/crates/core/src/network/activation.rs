use crate::error::{Error, Result};

/// Default smoothing half-width of the activation.
pub const DEFAULT_DELTA: f64 = 1e-3;

/// Quadratic-then-linear smoothing of ReLU:
///
/// ```text
/// s(t) = 0              t <= 0
///        t^2 / (2 d)    0 < t <= d
///        t - d / 2      t > d
/// ```
///
/// `s` is C1 with a `1/d`-Lipschitz derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedRelu {
    delta: f64,
}

impl SmoothedRelu {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "activation delta must be positive, got {delta}"
            )));
        }
        Ok(SmoothedRelu { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else if t <= self.delta {
            t * t / (2.0 * self.delta)
        } else {
            t - self.delta / 2.0
        }
    }

    #[inline]
    pub fn derivative(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else if t <= self.delta {
            t / self.delta
        } else {
            1.0
        }
    }

    /// Almost-everywhere second derivative (zero at the two seams).
    #[inline]
    pub fn second_derivative(&self, t: f64) -> f64 {
        if t > 0.0 && t < self.delta {
            1.0 / self.delta
        } else {
            0.0
        }
    }

    /// Index of the piece containing `t`: 0 below zero, 1 on the quadratic
    /// part, 2 on the linear part.
    #[inline]
    pub fn piece(&self, t: f64) -> u8 {
        if t <= 0.0 {
            0
        } else if t <= self.delta {
            1
        } else {
            2
        }
    }

    /// Value of the polynomial on `piece`, evaluated at any `t`.
    #[inline]
    pub fn value_on(&self, piece: u8, t: f64) -> f64 {
        match piece {
            0 => 0.0,
            1 => t * t / (2.0 * self.delta),
            _ => t - self.delta / 2.0,
        }
    }

    #[inline]
    pub fn derivative_on(&self, piece: u8, t: f64) -> f64 {
        match piece {
            0 => 0.0,
            1 => t / self.delta,
            _ => 1.0,
        }
    }

    #[inline]
    pub fn second_on(&self, piece: u8) -> f64 {
        if piece == 1 {
            1.0 / self.delta
        } else {
            0.0
        }
    }
}

impl Default for SmoothedRelu {
    fn default() -> Self {
        SmoothedRelu {
            delta: DEFAULT_DELTA,
        }
    }
}

/// Scalar form of the activation.
pub fn smoothed_relu(t: f64, delta: f64) -> f64 {
    SmoothedRelu { delta }.value(t)
}
