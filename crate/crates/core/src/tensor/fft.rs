use std::f64::consts::PI;

use num_complex::Complex64;

use super::{is_power_of_two, ComplexImage};
use crate::error::{Error, Result};

/// In-place iterative radix-2 decimation-in-time transform of length
/// `buf.len()` (a power of two). Unnormalized; `inverse` conjugates the
/// twiddles.
fn radix2_in_place(buf: &mut [Complex64], twiddles: &[Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = twiddles[k * stride];
                let w = if inverse { w.conj() } else { w };
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn twiddle_table(n: usize) -> Vec<Complex64> {
    (0..n / 2)
        .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
        .collect()
}

/// A reusable 2D transform plan for a fixed power-of-two grid.
#[derive(Debug, Clone)]
pub struct Fft2 {
    height: usize,
    width: usize,
    row_twiddles: Vec<Complex64>,
    col_twiddles: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if !is_power_of_two(height) || !is_power_of_two(width) {
            return Err(Error::Sizing(format!(
                "FFT grid {height}x{width} is not a power of two in both dimensions"
            )));
        }
        Ok(Fft2 {
            height,
            width,
            row_twiddles: twiddle_table(width),
            col_twiddles: twiddle_table(height),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Unitary transform of a row-major buffer in place.
    pub fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        assert_eq!(data.len(), h * w, "FFT buffer size");
        for row in data.chunks_exact_mut(w) {
            radix2_in_place(row, &self.row_twiddles, inverse);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                col[r] = data[r * w + c];
            }
            radix2_in_place(&mut col, &self.col_twiddles, inverse);
            for r in 0..h {
                data[r * w + c] = col[r];
            }
        }
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for z in data.iter_mut() {
            *z *= scale;
        }
    }

    /// Unitary transform of a planar `[re, im]` real buffer.
    pub fn transform_planar(&self, planar: &[f64], inverse: bool) -> Vec<f64> {
        let n = self.height * self.width;
        assert_eq!(planar.len(), 2 * n, "planar FFT buffer size");
        let mut buf: Vec<Complex64> = (0..n)
            .map(|k| Complex64::new(planar[k], planar[n + k]))
            .collect();
        self.transform(&mut buf, inverse);
        let mut out = Vec::with_capacity(2 * n);
        out.extend(buf.iter().map(|z| z.re));
        out.extend(buf.iter().map(|z| z.im));
        out
    }

    pub fn forward(&self, img: &ComplexImage) -> Result<ComplexImage> {
        self.apply(img, false)
    }

    pub fn inverse(&self, img: &ComplexImage) -> Result<ComplexImage> {
        self.apply(img, true)
    }

    fn apply(&self, img: &ComplexImage, inverse: bool) -> Result<ComplexImage> {
        if img.shape() != self.shape() {
            return Err(Error::Shape(format!(
                "image {:?} against FFT plan {:?}",
                img.shape(),
                self.shape()
            )));
        }
        let mut out = img.clone();
        self.transform(out.data_mut(), inverse);
        Ok(out)
    }
}

/// Unitary 2D DFT (`1/sqrt(n)` scaling).
pub fn fft2_unitary(img: &ComplexImage) -> Result<ComplexImage> {
    Fft2::new(img.height(), img.width())?.forward(img)
}

/// Unitary inverse 2D DFT; the adjoint of [`fft2_unitary`].
pub fn ifft2_unitary(img: &ComplexImage) -> Result<ComplexImage> {
    Fft2::new(img.height(), img.width())?.inverse(img)
}
