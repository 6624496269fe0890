//! Reconstruction quality: MSE, PSNR and SSIM on `[0, 1]` images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PSNR_CAP_DB: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Image batch in NCHW layout, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct Images<'a> {
    pub data: &'a [f32],
    pub shape: [usize; 4],
}

impl<'a> Images<'a> {
    pub fn new(data: &'a [f32], shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("{} values for image shape {shape:?}", data.len())));
        }
        Ok(Self { data, shape })
    }

    fn plane(&self, b: usize, c: usize) -> &'a [f32] {
        let [_, ch, h, w] = self.shape;
        let start = (b * ch + c) * h * w;
        &self.data[start..start + h * w]
    }
}

pub fn mse(x: &Images, y: &Images) -> Result<f64> {
    same_shape(x, y)?;
    let n = x.data.len() as f64;
    Ok(x.data
        .iter()
        .zip(y.data)
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / mse)` with data range 1, capped for near-identical images.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn same_shape(x: &Images, y: &Images) -> Result<()> {
    if x.shape != y.shape {
        return Err(Error::shape(format!("image shapes {:?} vs {:?}", x.shape, y.shape)));
    }
    Ok(())
}

/// Normalized 1-D Gaussian of `size` taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over a Gaussian window, averaged over channels and batch.
///
/// The window is 11 taps, shrunk to the image size for smaller images.
pub fn ssim(x: &Images, y: &Images) -> Result<f64> {
    same_shape(x, y)?;
    let [b, c, h, w] = x.shape;
    let size = SSIM_WINDOW.min(h).min(w);
    let taps = gaussian_taps(size, SSIM_SIGMA);
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mut total = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            let a: Vec<f64> = x.plane(bi, ci).iter().map(|&v| v as f64).collect();
            let z: Vec<f64> = y.plane(bi, ci).iter().map(|&v| v as f64).collect();
            let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
            let (mu_a, _, _) = filter_valid(&a, h, w, &taps);
            let (mu_z, _, _) = filter_valid(&z, h, w, &taps);
            let (aa, _, _) = filter_valid(&prod(&a, &a), h, w, &taps);
            let (zz, _, _) = filter_valid(&prod(&z, &z), h, w, &taps);
            let (az, _, _) = filter_valid(&prod(&a, &z), h, w, &taps);
            let mut acc = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mz) = (mu_a[i], mu_z[i]);
                let va = aa[i] - ma * ma;
                let vz = zz[i] - mz * mz;
                let cov = az[i] - ma * mz;
                acc += ((2.0 * ma * mz + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mz * mz + c1) * (va + vz + c2));
            }
            total += acc / mu_a.len() as f64;
        }
    }
    Ok(total / (b * c) as f64)
}

pub fn reconstruction_metrics(x: &Images, x_star: &Images) -> Result<ReconMetrics> {
    let m = mse(x, x_star)?;
    Ok(ReconMetrics { mse: m, psnr: psnr_from_mse(m), ssim: ssim(x, x_star)? })
}

/// Optional perceptual metric plug-in (e.g. LPIPS), supplied by the caller.
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    fn score(&self, x: &Images, x_star: &Images) -> Result<f64>;
}
