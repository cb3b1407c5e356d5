//! Photometric losses and image metrics.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) applied separably with
//! reflect padding, per channel; the map is the channel mean.

use crate::error::{Error, Result};
use crate::img::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_RADIUS: usize = SSIM_WINDOW / 2;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const DEFAULT_LAMBDA_SSIM: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SsimMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub window_radius: usize,
}

impl SsimMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn to_gray8(&self) -> image::GrayImage {
        let mut out = image::GrayImage::new(self.width as u32, self.height as u32);
        for (dst, v) in out.pixels_mut().zip(&self.values) {
            dst.0 = [(v.clamp(0.0, 1.0) * 255.0).round() as u8];
        }
        out
    }
}

pub fn l1_loss(img: &Image, gt: &Image) -> Result<(f64, Image)> {
    img.same_dims(gt)?;
    let n = img.data.len() as f64;
    let mut grad = Image::new(img.width, img.height);
    let mut sum = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&img.data).zip(&gt.data) {
        let d = a - b;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// Digest of the sign pattern of `img − gt`: the smooth piece of the L1
/// loss the image lies on.
pub fn residual_sign_signature(img: &Image, gt: &Image) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for (a, b) in img.data.iter().zip(&gt.data) {
        (a - b).partial_cmp(&0.0).hash(&mut h);
    }
    h.finish()
}

pub fn psnr(img: &Image, gt: &Image) -> Result<f64> {
    img.same_dims(gt)?;
    let mse = img
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / img.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Separable window filter and its adjoint over one `w × h` plane.
struct Blur {
    w: usize,
    h: usize,
    k: [f64; SSIM_WINDOW],
}

impl Blur {
    fn forward(&self, src: &[f64]) -> Vec<f64> {
        let (w, h, r) = (self.w, self.h, SSIM_RADIUS as isize);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kt) in self.k.iter().enumerate() {
                    acc += kt * src[y * w + reflect(x as isize + t as isize - r, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kt) in self.k.iter().enumerate() {
                    acc += kt * tmp[reflect(y as isize + t as isize - r, h) * w + x];
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    fn adjoint(&self, g: &[f64]) -> Vec<f64> {
        let (w, h, r) = (self.w, self.h, SSIM_RADIUS as isize);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = g[y * w + x];
                for (t, kt) in self.k.iter().enumerate() {
                    tmp[reflect(y as isize + t as isize - r, h) * w + x] += kt * v;
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = tmp[y * w + x];
                for (t, kt) in self.k.iter().enumerate() {
                    out[y * w + reflect(x as isize + t as isize - r, w)] += kt * v;
                }
            }
        }
        out
    }
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Windowed statistics of one channel pair.
struct Stats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    e_xx: Vec<f64>,
    e_yy: Vec<f64>,
    e_xy: Vec<f64>,
}

fn stats(blur: &Blur, x: &[f64], y: &[f64]) -> Stats {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    Stats {
        mu_x: blur.forward(x),
        mu_y: blur.forward(y),
        e_xx: blur.forward(&sq(x, x)),
        e_yy: blur.forward(&sq(y, y)),
        e_xy: blur.forward(&sq(x, y)),
    }
}

struct Terms {
    s: f64,
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
}

#[inline]
fn ssim_terms(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64) -> Terms {
    let a1 = 2.0 * mx * my + SSIM_C1;
    let a2 = 2.0 * (exy - mx * my) + SSIM_C2;
    let b1 = mx * mx + my * my + SSIM_C1;
    let b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2;
    Terms {
        s: a1 * a2 / (b1 * b2),
        a1,
        a2,
        b1,
        b2,
    }
}

fn check_size(img: &Image, gt: &Image) -> Result<()> {
    img.same_dims(gt)?;
    // Reflect padding needs at least radius + 1 samples per axis.
    if img.width <= SSIM_RADIUS || img.height <= SSIM_RADIUS {
        return Err(Error::InvalidInput(format!(
            "{}x{} image is too small for the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            img.width, img.height
        )));
    }
    Ok(())
}

pub fn ssim_map(img: &Image, gt: &Image) -> Result<SsimMap> {
    check_size(img, gt)?;
    let (w, h) = (img.width, img.height);
    let blur = Blur {
        w,
        h,
        k: gaussian_window(),
    };
    let mut values = vec![0.0; w * h];
    for c in 0..3 {
        let st = stats(&blur, &channel(img, c), &channel(gt, c));
        for (p, v) in values.iter_mut().enumerate() {
            let t = ssim_terms(st.mu_x[p], st.mu_y[p], st.e_xx[p], st.e_yy[p], st.e_xy[p]);
            *v += t.s / 3.0;
        }
    }
    Ok(SsimMap {
        width: w,
        height: h,
        values,
        window_radius: SSIM_RADIUS,
    })
}

/// Mean SSIM of `(img, gt)` and its gradient with respect to `img`.
pub fn ssim_with_grad(img: &Image, gt: &Image) -> Result<(f64, Image)> {
    check_size(img, gt)?;
    let (w, h) = (img.width, img.height);
    let blur = Blur {
        w,
        h,
        k: gaussian_window(),
    };
    let scale = 1.0 / (3.0 * (w * h) as f64);
    let mut total = 0.0;
    let mut grad = Image::new(w, h);
    for c in 0..3 {
        let x = channel(img, c);
        let y = channel(gt, c);
        let st = stats(&blur, &x, &y);
        let mut g_mu = vec![0.0; w * h];
        let mut g_xx = vec![0.0; w * h];
        let mut g_xy = vec![0.0; w * h];
        for p in 0..w * h {
            let (mx, my) = (st.mu_x[p], st.mu_y[p]);
            let t = ssim_terms(mx, my, st.e_xx[p], st.e_yy[p], st.e_xy[p]);
            total += t.s * scale;
            let den = t.b1 * t.b2;
            g_mu[p] = scale
                * ((2.0 * my * t.a2 - 2.0 * my * t.a1) / den
                    - t.s * (2.0 * mx * t.b2 - 2.0 * mx * t.b1) / den);
            g_xx[p] = -scale * t.s / t.b2;
            g_xy[p] = scale * 2.0 * t.a1 / den;
        }
        let (b_mu, b_xx, b_xy) = (blur.adjoint(&g_mu), blur.adjoint(&g_xx), blur.adjoint(&g_xy));
        for q in 0..w * h {
            grad.data[q * 3 + c] = b_mu[q] + 2.0 * x[q] * b_xx[q] + y[q] * b_xy[q];
        }
    }
    Ok((total, grad))
}

/// `(1 − λ)·L1 + λ·(1 − mean SSIM)` with its image gradient.
pub fn combined_loss(img: &Image, gt: &Image, lambda_ssim: f64) -> Result<(f64, Image)> {
    if !(0.0..=1.0).contains(&lambda_ssim) {
        return Err(Error::InvalidInput(format!(
            "lambda_ssim must be in [0, 1], got {lambda_ssim}"
        )));
    }
    let (l1, mut grad) = l1_loss(img, gt)?;
    if lambda_ssim == 0.0 {
        return Ok((l1, grad));
    }
    let (ssim, d_ssim) = ssim_with_grad(img, gt)?;
    for (g, s) in grad.data.iter_mut().zip(&d_ssim.data) {
        *g = (1.0 - lambda_ssim) * *g - lambda_ssim * s;
    }
    Ok(((1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim), grad))
}
