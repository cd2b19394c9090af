//! Complex image and feature-stack containers, the unitary 2D Fourier
//! transform, the (2,1)-norm and seeded random generation.

pub mod ctf;
mod fft;
mod rng;

pub use fft::{fft2_unitary, ifft2_unitary, Fft2};
pub(crate) use rng::substream;
pub use rng::{seeded_rng, standard_normal, SeededRng};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// A 2D grid of complex samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Sizing(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} samples for a {height}x{width} image",
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|z| !z.is_finite()) {
            return Err(Error::NonFinite(format!("sample {k} of image")));
        }
        Ok(ComplexImage {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        ComplexImage {
            height,
            width,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    /// Real intensities with zero imaginary part.
    pub fn from_real(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        Self::new(
            height,
            width,
            values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        )
    }

    /// Builds an image from a real plane layout `[re(0..n), im(0..n)]`.
    pub fn from_planar(height: usize, width: usize, planar: &[f64]) -> Result<Self> {
        let n = height * width;
        if planar.len() != 2 * n {
            return Err(Error::Shape(format!(
                "planar buffer of {} for {height}x{width}",
                planar.len()
            )));
        }
        let (re, im) = planar.split_at(n);
        Self::new(
            height,
            width,
            re.iter()
                .zip(im)
                .map(|(&a, &b)| Complex64::new(a, b))
                .collect(),
        )
    }

    /// Real plane layout `[re(0..n), im(0..n)]`; the gradient convention of
    /// the autodiff engine uses the same layout.
    pub fn to_planar(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.data.len());
        out.extend(self.data.iter().map(|z| z.re));
        out.extend(self.data.iter().map(|z| z.im));
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[Complex64] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &ComplexImage) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Hermitian inner product `<self, other> = sum(conj(self) * other)`.
    pub fn inner(&self, other: &ComplexImage) -> Complex64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    pub fn scale(&self, c: Complex64) -> ComplexImage {
        self.map(|z| z * c)
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> ComplexImage {
        ComplexImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&z| f(z)).collect(),
        }
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: Complex64, other: &ComplexImage) -> ComplexImage {
        debug_assert_eq!(self.shape(), other.shape());
        ComplexImage {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + c * b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &ComplexImage) -> ComplexImage {
        self.axpy(Complex64::new(-1.0, 0.0), other)
    }

    pub fn add(&self, other: &ComplexImage) -> ComplexImage {
        self.axpy(Complex64::new(1.0, 0.0), other)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.is_finite())
    }

    /// Largest absolute difference between corresponding samples.
    pub fn max_abs_diff(&self, other: &ComplexImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// A stack of complex channels: one channel vector per pixel.
///
/// Stored pixel-major so row `k` (the feature vector of pixel `k`) is a
/// contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pixels: usize,
    channels: usize,
    data: Vec<Complex64>,
}

impl FeatureStack {
    pub fn new(pixels: usize, channels: usize, data: Vec<Complex64>) -> Result<Self> {
        if pixels == 0 || channels == 0 {
            return Err(Error::Sizing(format!(
                "empty feature stack {pixels}x{channels}"
            )));
        }
        if data.len() != pixels * channels {
            return Err(Error::Shape(format!(
                "{} samples for {pixels} pixels x {channels} channels",
                data.len()
            )));
        }
        Ok(FeatureStack {
            pixels,
            channels,
            data,
        })
    }

    pub fn zeros(pixels: usize, channels: usize) -> Self {
        FeatureStack {
            pixels,
            channels,
            data: vec![Complex64::new(0.0, 0.0); pixels * channels],
        }
    }

    /// From real planes ordered `[re_0, .., re_{C-1}, im_0, .., im_{C-1}]`,
    /// each plane holding `pixels` samples.
    pub fn from_planar(pixels: usize, channels: usize, planar: &[f64]) -> Result<Self> {
        if planar.len() != 2 * pixels * channels {
            return Err(Error::Shape(format!(
                "planar buffer of {} for {pixels}x{channels}",
                planar.len()
            )));
        }
        let mut data = Vec::with_capacity(pixels * channels);
        for k in 0..pixels {
            for c in 0..channels {
                data.push(Complex64::new(
                    planar[c * pixels + k],
                    planar[(channels + c) * pixels + k],
                ));
            }
        }
        Self::new(pixels, channels, data)
    }

    pub fn to_planar(&self) -> Vec<f64> {
        let (n, c) = (self.pixels, self.channels);
        let mut out = vec![0.0; 2 * n * c];
        for k in 0..n {
            for ch in 0..c {
                let z = self.data[k * c + ch];
                out[ch * n + k] = z.re;
                out[(c + ch) * n + k] = z.im;
            }
        }
        out
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn row(&self, k: usize) -> &[Complex64] {
        &self.data[k * self.channels..(k + 1) * self.channels]
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.channels)
            .map(|row| row.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
            .collect()
    }

    pub fn scale(&self, c: Complex64) -> FeatureStack {
        FeatureStack {
            pixels: self.pixels,
            channels: self.channels,
            data: self.data.iter().map(|&z| z * c).collect(),
        }
    }
}

/// The (2,1)-norm: sum over pixels of the Euclidean norm of each channel
/// vector.
pub fn norm21(z: &FeatureStack) -> f64 {
    z.row_norms().iter().sum()
}

/// Row norms of a planar real feature layout with `real_channels` planes of
/// `pixels` samples each (real and imaginary planes together).
pub(crate) fn planar_row_norms(planar: &[f64], pixels: usize) -> Vec<f64> {
    let mut sq = vec![0.0; pixels];
    for plane in planar.chunks_exact(pixels) {
        for (s, v) in sq.iter_mut().zip(plane) {
            *s += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

pub fn is_power_of_two(n: usize) -> bool {
    n > 0 && n & (n - 1) == 0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn image_rejects_bad_lengths_and_nan() {
        assert!(ComplexImage::new(2, 2, vec![c(0.0, 0.0); 3]).is_err());
        assert!(ComplexImage::new(1, 1, vec![c(f64::NAN, 0.0)]).is_err());
        assert!(ComplexImage::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn planar_round_trip() {
        let img = ComplexImage::new(
            2,
            2,
            vec![c(1.0, 2.0), c(3.0, 4.0), c(5.0, 6.0), c(7.0, 8.0)],
        )
        .unwrap();
        let p = img.to_planar();
        assert_eq!(p, vec![1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]);
        assert_eq!(ComplexImage::from_planar(2, 2, &p).unwrap(), img);
    }

    #[test]
    fn norm21_examples() {
        assert_eq!(norm21(&FeatureStack::zeros(4, 3)), 0.0);
        let z = FeatureStack::new(
            2,
            2,
            vec![c(3.0, 0.0), c(0.0, 4.0), c(0.0, 0.0), c(0.0, 0.0)],
        )
        .unwrap();
        assert_eq!(norm21(&z), 5.0);
        let unit = FeatureStack::new(3, 2, [c(0.6, 0.0), c(0.0, 0.8)].repeat(3)).unwrap();
        assert!((norm21(&unit) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn feature_stack_planar_round_trip_and_rows() {
        let data: Vec<_> = (0..6).map(|k| c(k as f64, -(k as f64))).collect();
        let z = FeatureStack::new(3, 2, data).unwrap();
        assert_eq!(z.row(1), &[c(2.0, -2.0), c(3.0, -3.0)]);
        let p = z.to_planar();
        assert_eq!(FeatureStack::from_planar(3, 2, &p).unwrap(), z);
        let norms = planar_row_norms(&p, 3);
        for (k, n) in norms.iter().enumerate() {
            assert!((n - z.row_norms()[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn norm21_is_absolutely_homogeneous() {
        let mut rng = seeded_rng(3);
        let data: Vec<_> = (0..40)
            .map(|_| c(standard_normal(&mut rng), standard_normal(&mut rng)))
            .collect();
        let z = FeatureStack::new(10, 4, data).unwrap();
        let s = c(-1.5, 2.0);
        let lhs = norm21(&z.scale(s));
        assert!((lhs - s.norm() * norm21(&z)).abs() < 1e-12 * lhs);
    }
}
