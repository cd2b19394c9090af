//! 3x3 stride-1 zero-padded convolution over planar real channels.
//!
//! A complex 16-channel feature map is carried as 32 real planes
//! (`re_0..re_15, im_0..im_15`), so one real kernel block of shape
//! `[2C][2C][3][3]` holds the four real kernels of every complex tap. The
//! three kernels here (forward, input adjoint, kernel gradient) are
//! expressed as one GEMM per tap over a width-padded copy of the planes.

use matrixmultiply::dgemm;

pub const TAPS: usize = 9;

/// Spatial size and real channel counts of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn kernel_len(&self) -> usize {
        self.cin * self.cout * TAPS
    }

    fn padded_width(&self) -> usize {
        self.width + 2
    }

    // One spare row keeps the shifted reads of the last wide row in bounds.
    fn padded_plane(&self) -> usize {
        (self.height + 3) * self.padded_width()
    }

    fn wide_len(&self) -> usize {
        self.height * self.padded_width()
    }

    fn tap_offset(&self, tap: usize) -> usize {
        (tap / 3) * self.padded_width() + tap % 3
    }

    fn pad(&self, planes: &[f64], channels: usize) -> Vec<f64> {
        let (h, w, wp, plane) = (
            self.height,
            self.width,
            self.padded_width(),
            self.padded_plane(),
        );
        let mut out = vec![0.0; channels * plane];
        for c in 0..channels {
            for y in 0..h {
                let src = &planes[c * h * w + y * w..c * h * w + (y + 1) * w];
                let dst = c * plane + (y + 1) * wp + 1;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
        out
    }

    fn widen(&self, planes: &[f64], channels: usize) -> Vec<f64> {
        let (h, w, wp) = (self.height, self.width, self.padded_width());
        let m = self.wide_len();
        let mut out = vec![0.0; channels * m];
        for c in 0..channels {
            for y in 0..h {
                let src = &planes[c * h * w + y * w..c * h * w + (y + 1) * w];
                out[c * m + y * wp..c * m + y * wp + w].copy_from_slice(src);
            }
        }
        out
    }

    fn crop_wide(&self, wide: &[f64], channels: usize) -> Vec<f64> {
        let (h, w, wp) = (self.height, self.width, self.padded_width());
        let m = self.wide_len();
        let mut out = Vec::with_capacity(channels * h * w);
        for c in 0..channels {
            for y in 0..h {
                out.extend_from_slice(&wide[c * m + y * wp..c * m + y * wp + w]);
            }
        }
        out
    }

    fn crop_padded(&self, padded: &[f64], channels: usize) -> Vec<f64> {
        let (h, w, wp, plane) = (
            self.height,
            self.width,
            self.padded_width(),
            self.padded_plane(),
        );
        let mut out = Vec::with_capacity(channels * h * w);
        for c in 0..channels {
            for y in 0..h {
                let src = c * plane + (y + 1) * wp + 1;
                out.extend_from_slice(&padded[src..src + w]);
            }
        }
        out
    }
}

/// `out[o] = sum_i kernel[o][i] * input[i]` (cross-correlation, zero padding).
pub fn conv_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    assert_eq!(input.len(), g.cin * g.pixels(), "conv input size");
    assert_eq!(kernel.len(), g.kernel_len(), "conv kernel size");
    let padded = g.pad(input, g.cin);
    let m = g.wide_len();
    let plane = g.padded_plane();
    let mut wide = vec![0.0; g.cout * m];
    for tap in 0..TAPS {
        let off = g.tap_offset(tap);
        // SAFETY: every index touched is inside the buffers; see the
        // bounds discussion on `padded_plane`.
        unsafe {
            dgemm(
                g.cout,
                g.cin,
                m,
                1.0,
                kernel.as_ptr().add(tap),
                (g.cin * TAPS) as isize,
                TAPS as isize,
                padded.as_ptr().add(off),
                plane as isize,
                1,
                1.0,
                wide.as_mut_ptr(),
                m as isize,
                1,
            );
        }
    }
    g.crop_wide(&wide, g.cout)
}

/// Adjoint of [`conv_forward`] in its input: maps an output cotangent to an
/// input cotangent.
pub fn conv_input_adjoint(g: &ConvGeom, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
    assert_eq!(grad_out.len(), g.cout * g.pixels(), "conv cotangent size");
    assert_eq!(kernel.len(), g.kernel_len(), "conv kernel size");
    let wide = g.widen(grad_out, g.cout);
    let m = g.wide_len();
    let plane = g.padded_plane();
    let mut padded = vec![0.0; g.cin * plane];
    for tap in 0..TAPS {
        let off = g.tap_offset(tap);
        // SAFETY: as in `conv_forward`, with the roles of input and output
        // swapped; the shifted output windows stay inside each padded plane.
        unsafe {
            dgemm(
                g.cin,
                g.cout,
                m,
                1.0,
                kernel.as_ptr().add(tap),
                TAPS as isize,
                (g.cin * TAPS) as isize,
                wide.as_ptr(),
                m as isize,
                1,
                1.0,
                padded.as_mut_ptr().add(off),
                plane as isize,
                1,
            );
        }
    }
    g.crop_padded(&padded, g.cin)
}

/// Gradient of `<grad_out, conv_forward(input, kernel)>` with respect to the
/// kernel.
pub fn conv_kernel_grad(g: &ConvGeom, input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    assert_eq!(input.len(), g.cin * g.pixels(), "conv input size");
    assert_eq!(grad_out.len(), g.cout * g.pixels(), "conv cotangent size");
    let padded = g.pad(input, g.cin);
    let wide = g.widen(grad_out, g.cout);
    let m = g.wide_len();
    let plane = g.padded_plane();
    let mut dk = vec![0.0; g.kernel_len()];
    for tap in 0..TAPS {
        let off = g.tap_offset(tap);
        // SAFETY: the strided destination addresses `dk[o][i][tap]` only.
        unsafe {
            dgemm(
                g.cout,
                m,
                g.cin,
                1.0,
                wide.as_ptr(),
                m as isize,
                1,
                padded.as_ptr().add(off),
                1,
                plane as isize,
                0.0,
                dk.as_mut_ptr().add(tap),
                (g.cin * TAPS) as isize,
                TAPS as isize,
            );
        }
    }
    dk
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_rng, standard_normal};

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed);
        (0..n).map(|_| standard_normal(&mut rng)).collect()
    }

    /// Direct loop over every output pixel, channel and tap.
    fn naive(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (h, w) = (g.height as isize, g.width as isize);
        let mut out = vec![0.0; g.cout * g.pixels()];
        for o in 0..g.cout {
            for i in 0..g.cin {
                for y in 0..h {
                    for x in 0..w {
                        for tap in 0..TAPS {
                            let sy = y + (tap / 3) as isize - 1;
                            let sx = x + (tap % 3) as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h || sx >= w {
                                continue;
                            }
                            out[o * g.pixels() + (y * w + x) as usize] += kernel
                                [(o * g.cin + i) * TAPS + tap]
                                * input[i * g.pixels() + (sy * w + sx) as usize];
                        }
                    }
                }
            }
        }
        out
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn forward_matches_direct_loops() {
        let g = ConvGeom {
            height: 5,
            width: 7,
            cin: 3,
            cout: 4,
        };
        let x = randn(g.cin * g.pixels(), 1);
        let k = randn(g.kernel_len(), 2);
        let fast = conv_forward(&g, &x, &k);
        let slow = naive(&g, &x, &k);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_and_kernel_grad_satisfy_dot_product_tests() {
        let g = ConvGeom {
            height: 8,
            width: 4,
            cin: 6,
            cout: 2,
        };
        let x = randn(g.cin * g.pixels(), 3);
        let k = randn(g.kernel_len(), 4);
        let v = randn(g.cout * g.pixels(), 5);
        let y = conv_forward(&g, &x, &k);
        let lhs = dot(&y, &v);
        let via_input = dot(&x, &conv_input_adjoint(&g, &v, &k));
        let via_kernel = dot(&k, &conv_kernel_grad(&g, &x, &v));
        assert!((lhs - via_input).abs() < 1e-10 * lhs.abs().max(1.0));
        assert!((lhs - via_kernel).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn center_tap_identity_passes_through() {
        let g = ConvGeom {
            height: 4,
            width: 4,
            cin: 2,
            cout: 2,
        };
        let mut k = vec![0.0; g.kernel_len()];
        k[4] = 1.0;
        k[(g.cin + 1) * TAPS + 4] = 1.0;
        let x = randn(g.cin * g.pixels(), 9);
        assert_eq!(conv_forward(&g, &x, &k), x);
    }
}
