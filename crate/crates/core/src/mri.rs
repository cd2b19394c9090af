//! Single-coil Cartesian acquisition: row masks, the operator `PF`, the
//! data-fidelity term and its gradient, zero-filling, noise and
//! artificial undersampling.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ctf::{Array, ArrayData};
use crate::tensor::{seeded_rng, standard_normal, ComplexImage, Fft2};

/// Signed frequency of k-space row `k` in unshifted FFT order.
pub fn row_frequency(k: usize, height: usize) -> i64 {
    if k < height / 2 {
        k as i64
    } else {
        k as i64 - height as i64
    }
}

/// Rows of the mandatory low-frequency band: `ceil(0.05 * height)` rows
/// centred on DC.
pub fn center_band(height: usize) -> Vec<usize> {
    let c = (0.05 * height as f64).ceil() as usize;
    let start = height / 2 - c / 2;
    let mut rows: Vec<usize> = (start..start + c)
        .map(|j| (j + height - height / 2) % height)
        .collect();
    rows.sort_unstable();
    rows
}

/// A set of acquired k-space rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianMask {
    height: usize,
    sampled_rows: Vec<usize>,
    ratio: f64,
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub height: usize,
    pub ratio: f64,
    pub seed: u64,
}

impl CartesianMask {
    /// Mask from an explicit row list; the ratio is recomputed.
    pub fn from_rows(height: usize, mut rows: Vec<usize>, seed: u64) -> Result<Self> {
        rows.sort_unstable();
        rows.dedup();
        if let Some(&r) = rows.iter().find(|&&r| r >= height) {
            return Err(Error::InvalidArgument(format!(
                "row {r} outside height {height}"
            )));
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("mask samples no rows".into()));
        }
        Ok(CartesianMask {
            height,
            ratio: rows.len() as f64 / height as f64,
            sampled_rows: rows,
            seed,
        })
    }

    pub fn full(height: usize) -> Self {
        CartesianMask {
            height,
            sampled_rows: (0..height).collect(),
            ratio: 1.0,
            seed: 0,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn sampled_rows(&self) -> &[usize] {
        &self.sampled_rows
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn count(&self) -> usize {
        self.sampled_rows.len()
    }

    pub fn contains(&self, row: usize) -> bool {
        self.sampled_rows.binary_search(&row).is_ok()
    }

    /// One flag per row.
    pub fn row_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.height];
        for &r in &self.sampled_rows {
            flags[r] = true;
        }
        flags
    }

    pub fn sidecar(&self) -> MaskSidecar {
        MaskSidecar {
            height: self.height,
            ratio: self.ratio,
            seed: self.seed,
        }
    }

    pub fn to_array(&self) -> Array {
        let bytes = self.row_flags().into_iter().map(u8::from).collect();
        Array::new(vec![self.height], ArrayData::U8(bytes)).expect("mask array layout")
    }

    /// Writes `<stem>.ctf` and `<stem>.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        self.to_array().save(dir.join(format!("{stem}.ctf")))?;
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let ctf_path = dir.join(format!("{stem}.ctf"));
        let json_path = dir.join(format!("{stem}.json"));
        let arr = Array::load(&ctf_path)?;
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let side: MaskSidecar =
            serde_json::from_str(&text).map_err(|e| Error::format(&json_path, e.to_string()))?;
        let flags = match (&arr.dims[..], &arr.data) {
            ([h], ArrayData::U8(v)) if *h == side.height => v.clone(),
            _ => {
                return Err(Error::format(
                    &ctf_path,
                    "expected a rank-1 u8 mask of sidecar height",
                ))
            }
        };
        let rows = flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f != 0)
            .map(|(k, _)| k)
            .collect();
        let mut mask = Self::from_rows(side.height, rows, side.seed)?;
        mask.ratio = side.ratio;
        Ok(mask)
    }
}

/// Mask with the centre band plus Gaussian-weighted random rows.
pub fn make_cartesian_mask(height: usize, ratio: f64, seed: u64) -> Result<CartesianMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sampling ratio {ratio} outside (0, 1]"
        )));
    }
    if height < 8 {
        return Err(Error::InvalidArgument(format!(
            "mask height {height} below 8"
        )));
    }
    let target = (ratio * height as f64).round() as usize;
    let band = center_band(height);
    if target < band.len() {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} keeps {target} rows, fewer than the {} centre rows",
            band.len()
        )));
    }
    let mut flags = vec![false; height];
    for &r in &band {
        flags[r] = true;
    }
    let s = height as f64 / 6.0;
    let mut pool: Vec<(usize, f64)> = (0..height)
        .filter(|&k| !flags[k])
        .map(|k| {
            let f = row_frequency(k, height) as f64;
            (k, (-f * f / (2.0 * s * s)).exp())
        })
        .collect();
    let mut rng = seeded_rng(seed);
    for _ in band.len()..target {
        let total: f64 = pool.iter().map(|p| p.1).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = pool.len() - 1;
        for (i, &(_, w)) in pool.iter().enumerate() {
            if u < w {
                pick = i;
                break;
            }
            u -= w;
        }
        flags[pool.swap_remove(pick).0] = true;
    }
    let rows = (0..height).filter(|&k| flags[k]).collect();
    Ok(CartesianMask {
        height,
        sampled_rows: rows,
        ratio,
        seed,
    })
}

/// Acquired k-space with unsampled rows exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub kspace: ComplexImage,
    pub mask: CartesianMask,
    pub noise_std: f64,
}

impl Measurement {
    /// Validates shapes and zeroes any unsampled rows.
    pub fn new(mut kspace: ComplexImage, mask: CartesianMask, noise_std: f64) -> Result<Self> {
        if kspace.height() != mask.height() {
            return Err(Error::Shape(format!(
                "k-space height {} vs mask height {}",
                kspace.height(),
                mask.height()
            )));
        }
        let w = kspace.width();
        let flags = mask.row_flags();
        for (r, row) in kspace.data_mut().chunks_exact_mut(w).enumerate() {
            if !flags[r] {
                row.fill(Complex64::new(0.0, 0.0));
            }
        }
        Ok(Measurement {
            kspace,
            mask,
            noise_std,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.kspace.shape()
    }
}

fn check_mask(x: &ComplexImage, mask: &CartesianMask) -> Result<()> {
    if x.height() != mask.height() {
        return Err(Error::Shape(format!(
            "image height {} vs mask height {}",
            x.height(),
            mask.height()
        )));
    }
    Ok(())
}

fn zero_rows(data: &mut [Complex64], width: usize, flags: &[bool]) {
    for (r, row) in data.chunks_exact_mut(width).enumerate() {
        if !flags[r] {
            row.fill(Complex64::new(0.0, 0.0));
        }
    }
}

/// `y = PFx` (noise-free).
pub fn forward(x: &ComplexImage, mask: &CartesianMask) -> Result<Measurement> {
    check_mask(x, mask)?;
    let fft = Fft2::new(x.height(), x.width())?;
    let mut k = fft.forward(x)?;
    zero_rows(k.data_mut(), x.width(), &mask.row_flags());
    Ok(Measurement {
        kspace: k,
        mask: mask.clone(),
        noise_std: 0.0,
    })
}

/// Adds circular complex Gaussian noise of total variance `std^2` on the
/// sampled rows.
pub fn add_noise(m: &Measurement, std: f64, seed: u64) -> Result<Measurement> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise std {std}")));
    }
    let mut out = m.clone();
    out.noise_std = std;
    if std == 0.0 {
        return Ok(out);
    }
    let s = std / 2f64.sqrt();
    let mut rng = seeded_rng(seed);
    let w = out.kspace.width();
    let flags = out.mask.row_flags();
    for (r, row) in out.kspace.data_mut().chunks_exact_mut(w).enumerate() {
        if flags[r] {
            for z in row {
                *z += Complex64::new(s * standard_normal(&mut rng), s * standard_normal(&mut rng));
            }
        }
    }
    Ok(out)
}

/// `F^H P^T y`.
pub fn zero_filling(m: &Measurement) -> ComplexImage {
    let (h, w) = m.shape();
    let fft = Fft2::new(h, w).expect("measurement grid is a power of two");
    fft.inverse(&m.kspace).expect("shape checked")
}

/// The data term `f(x) = 1/2 |PFx - y|^2` with everything needed to
/// evaluate it and its gradient on planar buffers.
#[derive(Debug, Clone)]
pub struct Fidelity {
    fft: Fft2,
    height: usize,
    width: usize,
    flags: Vec<bool>,
    /// `y` in planar layout.
    y: Vec<f64>,
    /// `F^H P^T y` in planar layout.
    adjoint_y: Vec<f64>,
}

impl Fidelity {
    pub fn new(m: &Measurement) -> Result<Arc<Self>> {
        let (h, w) = m.shape();
        let fft = Fft2::new(h, w)?;
        let y = m.kspace.to_planar();
        let adjoint_y = fft.transform_planar(&y, true);
        Ok(Arc::new(Fidelity {
            fft,
            height: h,
            width: w,
            flags: m.mask.row_flags(),
            y,
            adjoint_y,
        }))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn project(&self, k: &mut [f64]) {
        let n = self.pixels();
        for (r, &keep) in self.flags.iter().enumerate() {
            if !keep {
                let span = r * self.width..(r + 1) * self.width;
                k[span.clone()].fill(0.0);
                k[n + span.start..n + span.end].fill(0.0);
            }
        }
    }

    /// `F^H P F x`, a self-adjoint contraction.
    pub fn normal(&self, x: &[f64]) -> Vec<f64> {
        let mut k = self.fft.transform_planar(x, false);
        self.project(&mut k);
        self.fft.transform_planar(&k, true)
    }

    /// `PFx - y` in planar k-space.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut k = self.fft.transform_planar(x, false);
        self.project(&mut k);
        for (a, b) in k.iter_mut().zip(&self.y) {
            *a -= b;
        }
        k
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        0.5 * self.residual(x).iter().map(|v| v * v).sum::<f64>()
    }

    /// `F^H P^T (PFx - y)`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.normal(x);
        for (a, b) in g.iter_mut().zip(&self.adjoint_y) {
            *a -= b;
        }
        g
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let r = self.residual(x);
        let value = 0.5 * r.iter().map(|v| v * v).sum::<f64>();
        // r is already zero off the mask, so P^T r = r
        (value, self.fft.transform_planar(&r, true))
    }

    pub fn adjoint_y(&self) -> &[f64] {
        &self.adjoint_y
    }
}

/// `(1/2 |PFx - y|^2, F^H P^T (PFx - y))`.
pub fn data_fidelity(x: &ComplexImage, m: &Measurement) -> Result<(f64, ComplexImage)> {
    if x.shape() != m.shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs measurement {:?}",
            x.shape(),
            m.shape()
        )));
    }
    let fid = Fidelity::new(m)?;
    let (v, g) = fid.value_and_gradient(&x.to_planar());
    Ok((v, ComplexImage::from_planar(x.height(), x.width(), &g)?))
}

/// Keeps the centre band and half (rounded up) of the sampled rows, dropping
/// the others uniformly at random among the non-centre rows.
pub fn artificial_undersample(m: &Measurement, seed: u64) -> Result<Measurement> {
    let band = center_band(m.mask.height());
    let count = m.mask.count();
    if count < 2 * band.len() || band.iter().any(|&r| !m.mask.contains(r)) {
        return Err(Error::InvalidArgument(format!(
            "cannot halve a {count}-row mask with a {}-row centre band",
            band.len()
        )));
    }
    let keep = count.div_ceil(2);
    let mut others: Vec<usize> = m
        .mask
        .sampled_rows()
        .iter()
        .copied()
        .filter(|r| band.binary_search(r).is_err())
        .collect();
    let mut rng = seeded_rng(seed);
    while band.len() + others.len() > keep {
        let i = rng.random_range(0..others.len());
        others.remove(i);
    }
    let mut rows = band;
    rows.extend(others);
    let mask = CartesianMask::from_rows(m.mask.height(), rows, seed)?;
    Measurement::new(m.kspace.clone(), mask, m.noise_std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = seeded_rng(seed);
        let data = (0..h * w)
            .map(|_| Complex64::new(standard_normal(&mut rng), standard_normal(&mut rng)))
            .collect();
        ComplexImage::new(h, w, data).unwrap()
    }

    #[test]
    fn mask_counts_and_center_band() {
        let full = make_cartesian_mask(256, 1.0, 3).unwrap();
        assert_eq!(full.count(), 256);
        let m = make_cartesian_mask(256, 0.2, 7).unwrap();
        assert_eq!(m.count(), 51);
        let band = center_band(256);
        assert_eq!(band.len(), 13);
        assert!(band.iter().all(|&r| m.contains(r)));
        assert!(band.contains(&0));
        assert_eq!(m, make_cartesian_mask(256, 0.2, 7).unwrap());
        assert!(make_cartesian_mask(256, 0.02, 0).is_err());
        assert!(make_cartesian_mask(4, 0.5, 0).is_err());
        assert!(make_cartesian_mask(64, 0.0, 0).is_err());
    }

    #[test]
    fn center_band_is_centered_on_dc() {
        for h in [8usize, 16, 32, 64, 256] {
            let band = center_band(h);
            let freqs: Vec<i64> = band.iter().map(|&k| row_frequency(k, h)).collect();
            let lo = *freqs.iter().min().unwrap();
            let hi = *freqs.iter().max().unwrap();
            assert!(lo <= 0 && hi >= 0);
            assert_eq!((hi - lo + 1) as usize, band.len());
            assert!(hi + lo <= 1 && hi + lo >= -1);
        }
    }

    #[test]
    fn full_mask_forward_is_fft() {
        let x = random_image(8, 8, 1);
        let m = forward(&x, &CartesianMask::full(8)).unwrap();
        assert_eq!(m.kspace, crate::tensor::fft2_unitary(&x).unwrap());
        let z = zero_filling(&m);
        assert!(z.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn fidelity_basics() {
        let x = random_image(16, 16, 2);
        let mask = make_cartesian_mask(16, 0.5, 4).unwrap();
        let m = forward(&x, &mask).unwrap();
        let (v, g) = data_fidelity(&x, &m).unwrap();
        assert!(v.abs() < 1e-20 && g.norm() < 1e-12);
        let zero = ComplexImage::zeros(16, 16);
        let (v0, g0) = data_fidelity(&zero, &m).unwrap();
        assert!((v0 - 0.5 * m.kspace.norm_sqr()).abs() < 1e-12);
        let zf = zero_filling(&m);
        assert!(g0.add(&zf).norm() < 1e-12);
    }

    #[test]
    fn fidelity_gradient_matches_finite_differences() {
        let x = random_image(16, 16, 3);
        let mask = make_cartesian_mask(16, 0.5, 5).unwrap();
        let m = add_noise(&forward(&random_image(16, 16, 9), &mask).unwrap(), 0.1, 1).unwrap();
        let fid = Fidelity::new(&m).unwrap();
        let xp = x.to_planar();
        let g = fid.gradient(&xp);
        let h = 1e-6;
        for k in (0..xp.len()).step_by(7) {
            let mut a = xp.clone();
            a[k] += h;
            let mut b = xp.clone();
            b[k] -= h;
            let fd = (fid.value(&a) - fid.value(&b)) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-6 * fd.abs().max(1.0),
                "{k}: {fd} vs {}",
                g[k]
            );
        }
        let (_, g2) = fid.value_and_gradient(&xp);
        let diff: f64 = g
            .iter()
            .zip(&g2)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn noise_stays_on_sampled_rows() {
        let mask = make_cartesian_mask(32, 0.3, 2).unwrap();
        let m = forward(&ComplexImage::zeros(32, 32), &mask).unwrap();
        assert_eq!(add_noise(&m, 0.0, 1).unwrap().kspace, m.kspace);
        let std = 0.3;
        let noisy = add_noise(&m, std, 1).unwrap();
        let flags = mask.row_flags();
        let mut sum = 0.0;
        let mut n = 0usize;
        for r in 0..32 {
            for z in noisy.kspace.row(r) {
                if flags[r] {
                    sum += z.norm_sqr();
                    n += 1;
                } else {
                    assert_eq!(z.norm(), 0.0);
                }
            }
        }
        assert!(n > 0);
        // the Monte Carlo variance check with 10^4 draws lives in the
        // integration tests; here only the order of magnitude
        assert!((sum / n as f64 / (std * std) - 1.0).abs() < 0.3);
    }

    #[test]
    fn halving_keeps_center_band() {
        let x = random_image(256, 8, 4);
        let mask = make_cartesian_mask(256, 0.2, 11).unwrap();
        let m = forward(&x, &mask).unwrap();
        let half = artificial_undersample(&m, 5).unwrap();
        assert_eq!(half.mask.count(), 26);
        assert!(center_band(256).iter().all(|&r| half.mask.contains(r)));
        assert!(half.mask.sampled_rows().iter().all(|&r| mask.contains(r)));
        assert_eq!(half, artificial_undersample(&m, 5).unwrap());
        let quarter = artificial_undersample(&half, 6).unwrap();
        assert_eq!(quarter.mask.count(), 13);
        assert!(artificial_undersample(&quarter, 7).is_err());
        for r in 0..256 {
            if !half.mask.contains(r) {
                assert!(half.kspace.row(r).iter().all(|z| z.norm() == 0.0));
            }
        }
    }

    #[test]
    fn mask_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = make_cartesian_mask(32, 0.25, 3).unwrap();
        mask.save(dir.path(), "mask").unwrap();
        assert_eq!(CartesianMask::load(dir.path(), "mask").unwrap(), mask);
    }
}
