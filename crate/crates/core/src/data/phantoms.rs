//! Synthetic image families. Every image is real, normalized to `[0, 1]`,
//! and a deterministic function of `(family, size, seed, index)`.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::substream;
use crate::tensor::{is_power_of_two, ComplexImage, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    SheppLogan,
    RandomEllipses,
    GridTexture,
    BlobField,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::SheppLogan,
        Family::RandomEllipses,
        Family::GridTexture,
        Family::BlobField,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::SheppLogan => "shepp_logan",
            Family::RandomEllipses => "random_ellipses",
            Family::GridTexture => "grid_texture",
            Family::BlobField => "blob_field",
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown phantom family '{s}'")))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub family: Family,
    pub size: usize,
    pub seed: u64,
    pub count: usize,
}

/// `(intensity, semi-axis a, semi-axis b, x0, y0, angle in degrees)`.
type Ellipse = (f64, f64, f64, f64, f64, f64);

/// The modified Shepp-Logan head with Toft's higher-contrast intensities.
const SHEPP_LOGAN: [Ellipse; 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// Pixel centre in `[-1, 1]^2`, `y` pointing up.
fn coords(r: usize, c: usize, n: usize) -> (f64, f64) {
    let x = (2 * c + 1) as f64 / n as f64 - 1.0;
    let y = 1.0 - (2 * r + 1) as f64 / n as f64;
    (x, y)
}

fn paint_ellipses(n: usize, ellipses: &[Ellipse]) -> Vec<f64> {
    let mut img = vec![0.0; n * n];
    for &(a, ax, by, x0, y0, deg) in ellipses {
        let (s, c) = (deg * PI / 180.0).sin_cos();
        for r in 0..n {
            for col in 0..n {
                let (x, y) = coords(r, col, n);
                let (dx, dy) = (x - x0, y - y0);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                if (u / ax).powi(2) + (v / by).powi(2) <= 1.0 {
                    img[r * n + col] += a;
                }
            }
        }
    }
    img
}

/// Clamps below at zero and rescales so the maximum is one.
fn normalize(mut img: Vec<f64>) -> Vec<f64> {
    img.iter_mut().for_each(|v| *v = v.max(0.0));
    let max = img.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        img.iter_mut().for_each(|v| *v /= max);
    }
    img
}

fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn shepp_logan(n: usize, jitter: Option<&mut SeededRng>) -> Vec<f64> {
    let mut ellipses = SHEPP_LOGAN;
    if let Some(rng) = jitter {
        for (i, e) in ellipses.iter_mut().enumerate() {
            let scale = uniform(rng, 0.92, 1.08);
            e.1 *= scale;
            e.2 *= uniform(rng, 0.92, 1.08);
            e.3 += uniform(rng, -0.03, 0.03);
            e.4 += uniform(rng, -0.03, 0.03);
            e.5 += uniform(rng, -8.0, 8.0);
            if i >= 2 {
                e.0 *= uniform(rng, 0.6, 1.4);
            }
        }
    }
    normalize(paint_ellipses(n, &ellipses))
}

fn random_ellipses(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    let count = rng.random_range(3..=8);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            (
                uniform(rng, 0.15, 0.6),
                uniform(rng, 0.1, 0.5),
                uniform(rng, 0.1, 0.5),
                uniform(rng, -0.5, 0.5),
                uniform(rng, -0.5, 0.5),
                uniform(rng, 0.0, 180.0),
            )
        })
        .collect();
    normalize(paint_ellipses(n, &ellipses))
}

/// Two crossed sinusoidal gratings inside a soft rounded support.
fn grid_texture(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    let f1 = uniform(rng, 2.0, 6.0);
    let f2 = uniform(rng, 2.0, 6.0);
    let th = uniform(rng, 0.0, PI);
    let (p1, p2) = (uniform(rng, 0.0, 2.0 * PI), uniform(rng, 0.0, 2.0 * PI));
    let radius = uniform(rng, 0.6, 0.9);
    let mut img = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let (x, y) = coords(r, c, n);
            let u = x * th.cos() + y * th.sin();
            let v = -x * th.sin() + y * th.cos();
            let g = (0.5 + 0.5 * (PI * f1 * u + p1).sin()) * (0.5 + 0.5 * (PI * f2 * v + p2).sin());
            let d = (x.powi(4) + y.powi(4)).powf(0.25);
            let support = 1.0 / (1.0 + ((d - radius) * 20.0).exp());
            img[r * n + c] = (0.2 + 0.8 * g) * support;
        }
    }
    normalize(img)
}

fn blob_field(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    let count = rng.random_range(10..=30);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            (
                uniform(rng, -0.8, 0.8),
                uniform(rng, -0.8, 0.8),
                uniform(rng, 0.05, 0.2),
                uniform(rng, 0.3, 1.0),
            )
        })
        .collect();
    let mut img = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let (x, y) = coords(r, c, n);
            img[r * n + c] = blobs
                .iter()
                .map(|&(bx, by, s, a)| {
                    a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp()
                })
                .sum();
        }
    }
    normalize(img)
}

/// One image of a family. Shepp-Logan with seed 0 and index 0 is the
/// unperturbed classic phantom.
pub fn phantom(family: Family, size: usize, seed: u64, index: usize) -> Result<ComplexImage> {
    if !is_power_of_two(size) {
        return Err(Error::Sizing(format!(
            "phantom size {size} is not a power of two"
        )));
    }
    let mut rng = substream(
        seed ^ (family as u64).wrapping_mul(0x1000_0001),
        index as u64,
    );
    let img = match family {
        Family::SheppLogan if seed == 0 && index == 0 => shepp_logan(size, None),
        Family::SheppLogan => shepp_logan(size, Some(&mut rng)),
        Family::RandomEllipses => random_ellipses(size, &mut rng),
        Family::GridTexture => grid_texture(size, &mut rng),
        Family::BlobField => blob_field(size, &mut rng),
    };
    ComplexImage::from_real(size, size, &img)
}

pub fn gen_phantoms(spec: &PhantomSpec) -> Result<Vec<ComplexImage>> {
    (0..spec.count)
        .map(|i| phantom(spec.family, spec.size, spec.seed, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_shepp_logan() {
        let img = phantom(Family::SheppLogan, 64, 0, 0).unwrap();
        let m = img.magnitude();
        assert_eq!(m.iter().cloned().fold(f64::MIN, f64::max), 1.0);
        assert_eq!(m.iter().cloned().fold(f64::MAX, f64::min), 0.0);
        assert!(img.data().iter().all(|z| z.im == 0.0));
        // the classic phantom has a 0.2 brain region around the centre
        assert!((img.get(40, 32).re - 0.2).abs() < 1e-12 || img.get(40, 32).re >= 0.2);
    }

    #[test]
    fn deterministic_and_in_range() {
        for fam in Family::ALL {
            let spec = PhantomSpec {
                family: fam,
                size: 32,
                seed: 5,
                count: 3,
            };
            let a = gen_phantoms(&spec).unwrap();
            assert_eq!(a, gen_phantoms(&spec).unwrap());
            assert_ne!(a[0], a[1]);
            for img in &a {
                assert!(img
                    .data()
                    .iter()
                    .all(|z| z.im == 0.0 && (0.0..=1.0).contains(&z.re)));
                assert!(img.data().iter().any(|z| z.re == 1.0));
            }
        }
        assert!(phantom(Family::BlobField, 30, 0, 0).is_err());
        assert!("nope".parse::<Family>().is_err());
        assert_eq!(
            "grid_texture".parse::<Family>().unwrap(),
            Family::GridTexture
        );
    }
}
