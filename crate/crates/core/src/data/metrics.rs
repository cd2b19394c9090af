//! PSNR and SSIM on magnitude images, plus the aggregate report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ComplexImage;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(x: &ComplexImage, y: &ComplexImage) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` between magnitudes; `MSE = 0` gives the cap.
pub fn psnr(x: &ComplexImage, x_hat: &ComplexImage) -> Result<f64> {
    check_shapes(x, x_hat)?;
    Ok(psnr_real(&x.magnitude(), &x_hat.magnitude()))
}

pub fn psnr_real(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// Mean SSIM between magnitudes.
pub fn ssim(x: &ComplexImage, x_hat: &ComplexImage) -> Result<f64> {
    check_shapes(x, x_hat)?;
    Ok(ssim_with_grad(
        &x.magnitude(),
        &x_hat.magnitude(),
        x.height(),
        x.width(),
        false,
    )
    .0)
}

/// Truncated 1D Gaussian taps, index 0 at offset `-radius`.
fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect()
}

/// Local weighted average along one axis of length `n`, with the window
/// renormalized where it is cut by the border. `transpose` applies the
/// adjoint.
fn blur_1d(
    data: &mut [f64],
    n: usize,
    stride: usize,
    count: usize,
    outer: usize,
    transpose: bool,
    taps: &[f64],
) {
    let r = (taps.len() / 2) as i64;
    let norm: Vec<f64> = (0..n as i64)
        .map(|i| {
            (-r..=r)
                .filter(|d| (0..n as i64).contains(&(i + d)))
                .map(|d| taps[(d + r) as usize])
                .sum()
        })
        .collect();
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    for o in 0..count {
        let base = o * outer;
        for i in 0..n {
            line[i] = data[base + i * stride];
        }
        if transpose {
            for i in 0..n {
                line[i] /= norm[i];
            }
        }
        for (i, slot) in out.iter_mut().enumerate() {
            let i = i as i64;
            let lo = (i - r).max(0);
            let hi = (i + r).min(n as i64 - 1);
            let mut s = 0.0;
            for j in lo..=hi {
                s += taps[(j - i + r) as usize] * line[j as usize];
            }
            *slot = s;
        }
        for i in 0..n {
            data[base + i * stride] = if transpose { out[i] } else { out[i] / norm[i] };
        }
    }
}

fn blur(img: &[f64], h: usize, w: usize, transpose: bool, taps: &[f64]) -> Vec<f64> {
    let mut d = img.to_vec();
    blur_1d(&mut d, w, 1, h, w, transpose, taps);
    blur_1d(&mut d, h, w, w, 1, transpose, taps);
    d
}

/// Mean SSIM of real images `x` and `y` and, when asked, its gradient with
/// respect to `x`. Written so that `ssim(x, x) == 1` and `ssim(x, y) ==
/// ssim(y, x)` hold exactly.
pub fn ssim_with_grad(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    want_grad: bool,
) -> (f64, Vec<f64>) {
    assert_eq!(x.len(), h * w, "ssim image size");
    assert_eq!(y.len(), h * w, "ssim image size");
    let taps = gaussian_taps();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mx = blur(x, h, w, false, &taps);
    let my = blur(y, h, w, false, &taps);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let exx = blur(&xx, h, w, false, &taps);
    let eyy = blur(&yy, h, w, false, &taps);
    let exy = blur(&xy, h, w, false, &taps);
    let n = h * w;
    let mut total = 0.0;
    let (mut d_mu, mut d_exx, mut d_exy) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..n {
        let (ux, uy) = (mx[p], my[p]);
        let a1 = 2.0 * (ux * uy) + c1;
        let b1 = (ux * ux + uy * uy) + c1;
        let a2 = 2.0 * (exy[p] - ux * uy) + c2;
        let b2 = ((exx[p] - ux * ux) + (eyy[p] - uy * uy)) + c2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;
        if want_grad {
            d_mu[p] = s * (2.0 * uy / a1 - 2.0 * ux / b1 - 2.0 * uy / a2 + 2.0 * ux / b2);
            d_exx[p] = -s / b2;
            d_exy[p] = 2.0 * s / a2;
        }
    }
    let mean = total / n as f64;
    if !want_grad {
        return (mean, Vec::new());
    }
    let t_mu = blur(&d_mu, h, w, true, &taps);
    let t_xx = blur(&d_exx, h, w, true, &taps);
    let t_xy = blur(&d_exy, h, w, true, &taps);
    let scale = 1.0 / n as f64;
    let grad = (0..n)
        .map(|q| scale * (t_mu[q] + 2.0 * x[q] * t_xx[q] + y[q] * t_xy[q]))
        .collect();
    (mean, grad)
}

/// PSNR and SSIM after scaling both magnitude images by the truth's maximum.
pub fn normalized_metrics(truth: &ComplexImage, recon: &ComplexImage) -> Result<(f64, f64)> {
    check_shapes(truth, recon)?;
    let t = truth.magnitude();
    let r = recon.magnitude();
    let peak = t.iter().cloned().fold(0.0, f64::max);
    let s = if peak > 0.0 { 1.0 / peak } else { 1.0 };
    let t: Vec<f64> = t.iter().map(|v| v * s).collect();
    let r: Vec<f64> = r.iter().map(|v| v * s).collect();
    Ok((
        psnr_real(&t, &r),
        ssim_with_grad(&t, &r, truth.height(), truth.width(), false).0,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

impl MetricReport {
    pub fn from_entries(entries: Vec<MetricEntry>) -> Self {
        let p: Vec<f64> = entries.iter().map(|e| e.psnr).collect();
        let s: Vec<f64> = entries.iter().map(|e| e.ssim).collect();
        let (mean_psnr, std_psnr) = mean_std(&p);
        let (mean_ssim, std_ssim) = mean_std(&s);
        MetricReport {
            entries,
            mean_psnr,
            std_psnr,
            mean_ssim,
            std_ssim,
        }
    }

    /// Evaluates paired images in order.
    pub fn evaluate(
        names: &[String],
        truths: &[ComplexImage],
        recons: &[ComplexImage],
    ) -> Result<Self> {
        if truths.len() != recons.len() || names.len() != truths.len() {
            return Err(Error::InvalidArgument(format!(
                "{} truths, {} reconstructions, {} names",
                truths.len(),
                recons.len(),
                names.len()
            )));
        }
        let entries = names
            .iter()
            .zip(truths.iter().zip(recons))
            .map(|(name, (t, r))| {
                normalized_metrics(t, r).map(|(psnr, ssim)| MetricEntry {
                    name: name.clone(),
                    psnr,
                    ssim,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_entries(entries))
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>10} {:>8}\n", "image", "PSNR (dB)", "SSIM");
        for e in &self.entries {
            s.push_str(&format!(
                "{:<24} {:>10.2} {:>8.4}\n",
                e.name, e.psnr, e.ssim
            ));
        }
        s.push_str(&format!(
            "{:<24} {:>10} {:>8}\n",
            "mean ± std",
            format!("{:.2}±{:.2}", self.mean_psnr, self.std_psnr),
            format!("{:.4}±{:.4}", self.mean_ssim, self.std_ssim)
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_rng, standard_normal};

    #[test]
    fn psnr_cap_and_formula() {
        let x = ComplexImage::from_real(2, 2, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);
        let y = x.map(|z| z + 0.1);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_symmetry_constants() {
        let mut rng = seeded_rng(1);
        let a: Vec<f64> = (0..64).map(|_| standard_normal(&mut rng).abs()).collect();
        let b: Vec<f64> = (0..64).map(|_| standard_normal(&mut rng).abs()).collect();
        assert_eq!(ssim_with_grad(&a, &a, 8, 8, false).0, 1.0);
        assert_eq!(
            ssim_with_grad(&a, &b, 8, 8, false).0,
            ssim_with_grad(&b, &a, 8, 8, false).0
        );
        let c1 = 1e-4;
        let expect = (2.0 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1);
        let got = ssim_with_grad(&[0.2; 256], &[0.8; 256], 16, 16, false).0;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let (h, w) = (12, 10);
        let mut rng = seeded_rng(2);
        let x: Vec<f64> = (0..h * w)
            .map(|_| 0.5 + 0.2 * standard_normal(&mut rng))
            .collect();
        let y: Vec<f64> = (0..h * w)
            .map(|_| 0.5 + 0.2 * standard_normal(&mut rng))
            .collect();
        let (_, g) = ssim_with_grad(&x, &y, h, w, true);
        let step = 1e-6;
        for k in (0..h * w).step_by(5) {
            let mut p = x.clone();
            p[k] += step;
            let mut m = x.clone();
            m[k] -= step;
            let fd = (ssim_with_grad(&p, &y, h, w, false).0
                - ssim_with_grad(&m, &y, h, w, false).0)
                / (2.0 * step);
            assert!(
                (fd - g[k]).abs() <= 1e-6 * fd.abs().max(1e-2),
                "{k}: {fd} vs {}",
                g[k]
            );
        }
    }

    #[test]
    fn report_aggregates() {
        let t = ComplexImage::from_real(2, 2, &[0.0, 0.5, 1.0, 0.25]).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let rep = MetricReport::evaluate(&names, &[t.clone(), t.clone()], &[t.clone(), t.clone()])
            .unwrap();
        assert_eq!(rep.mean_psnr, 100.0);
        assert_eq!(rep.mean_ssim, 1.0);
        assert_eq!(rep.entries.len(), 2);
        assert!(rep.to_table().lines().count() == 4);
        assert!(MetricReport::evaluate(&names, &[t.clone()], &[t]).is_err());
    }
}
