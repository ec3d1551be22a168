//! Quality metrics and degradation generators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::image::{round_half_up_clamp_f64, ImagePlane};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("images differ in geometry: {0:?} vs {1:?}")]
    Geometry((usize, usize, usize), (usize, usize, usize)),
    #[error("metric needs {need}, got {got}")]
    Unsupported { need: String, got: String },
}

fn same_dims(a: &ImagePlane, b: &ImagePlane) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::Geometry(a.dims(), b.dims()));
    }
    Ok(())
}

fn mse_slice(a: &[u8], b: &[u8]) -> f64 {
    let sse: u64 = a.iter().zip(b).map(|(&x, &y)| (x as i64 - y as i64).pow(2) as u64).sum();
    sse as f64 / a.len() as f64
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// PSNR over every sample; identical images give `+inf`.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    Ok(psnr_from_mse(mse_slice(a.data(), b.data())))
}

/// Colour PSNR: the per-channel MSEs are averaged before conversion to dB.
pub fn cpsnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    if a.channels() != 3 {
        return Err(MetricError::Unsupported {
            need: "3 channels".into(),
            got: format!("{} channel", a.channels()),
        });
    }
    let mse = (0..3).map(|c| mse_slice(a.plane(c), b.plane(c))).sum::<f64>() / 3.0;
    Ok(psnr_from_mse(mse))
}

/// BT.601 luma of each pixel, unrounded: `16 + (65.481 R + 128.553 G + 24.966 B) / 255`.
pub fn y_channel_f64(img: &ImagePlane) -> Result<Vec<f64>, MetricError> {
    if img.channels() != 3 {
        return Err(MetricError::Unsupported {
            need: "3 channels".into(),
            got: format!("{} channel", img.channels()),
        });
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    Ok((0..r.len())
        .map(|i| 16.0 + (65.481 * r[i] as f64 + 128.553 * g[i] as f64 + 24.966 * b[i] as f64) / 255.0)
        .collect())
}

/// Luma rounded half up into a single-channel image.
pub fn y_channel(img: &ImagePlane) -> Result<ImagePlane, MetricError> {
    let y = y_channel_f64(img)?;
    Ok(ImagePlane::new(img.width(), img.height(), 1, y.into_iter().map(round_half_up_clamp_f64).collect()).unwrap())
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_1d() -> [f64; SSIM_WIN] {
    let mut k = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-region separable filtering of a `w x h` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WIN]) -> Vec<f64> {
    let ow = w - SSIM_WIN + 1;
    let oh = h - SSIM_WIN + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x0 in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * x[y * w + x0 + i];
            }
            rows[y * ow + x0] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y0 in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * rows[(y0 + i) * ow + x];
            }
            out[y0 * ow + x] = s;
        }
    }
    out
}

fn ssim_plane(a: &[u8], b: &[u8], w: usize, h: usize) -> f64 {
    let k = gaussian_1d();
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let fa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(&fa, w, h, &k);
    let mu_b = filter_valid(&fb, w, h, &k);
    let aa = filter_valid(&prod(&fa, &fa), w, h, &k);
    let bb = filter_valid(&prod(&fb, &fb), w, h, &k);
    let ab = filter_valid(&prod(&fa, &fb), w, h, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) over the valid region,
/// `K1 = 0.01`, `K2 = 0.03`, `L = 255`; colour images average their channels.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    if a.width() < SSIM_WIN || a.height() < SSIM_WIN {
        return Err(MetricError::Unsupported {
            need: format!("at least {SSIM_WIN}x{SSIM_WIN}"),
            got: format!("{}x{}", a.width(), a.height()),
        });
    }
    let c = a.channels();
    Ok((0..c).map(|ch| ssim_plane(a.plane(ch), b.plane(ch), a.width(), a.height())).sum::<f64>() / c as f64)
}

/// Blocking effect factor of one plane for block size `bs`.
fn bef(y: &[u8], w: usize, h: usize, bs: usize) -> f64 {
    let mut boundary = (0.0, 0usize);
    let mut inner = (0.0, 0usize);
    let mut add = |p: u8, q: u8, on_edge: bool| {
        let d = (p as f64 - q as f64).powi(2);
        let acc = if on_edge { &mut boundary } else { &mut inner };
        acc.0 += d;
        acc.1 += 1;
    };
    for r in 0..h {
        for c in 0..w.saturating_sub(1) {
            add(y[r * w + c], y[r * w + c + 1], (c + 1) % bs == 0);
        }
    }
    for r in 0..h.saturating_sub(1) {
        for c in 0..w {
            add(y[r * w + c], y[(r + 1) * w + c], (r + 1) % bs == 0);
        }
    }
    let db = if boundary.1 > 0 { boundary.0 / boundary.1 as f64 } else { 0.0 };
    let dbc = if inner.1 > 0 { inner.0 / inner.1 as f64 } else { 0.0 };
    let side = w.min(h) as f64;
    if db > dbc && side > 1.0 {
        (bs as f64).log2() / side.log2() * (db - dbc)
    } else {
        0.0
    }
}

/// PSNR-B of `test` against `reference`: the MSE is increased by the blocking
/// effect factor of `test` over the `block`-aligned boundaries.
pub fn psnr_b(reference: &ImagePlane, test: &ImagePlane, block: usize) -> Result<f64, MetricError> {
    same_dims(reference, test)?;
    let (w, h, c) = reference.dims();
    let mut mse_b = 0.0;
    for ch in 0..c {
        mse_b += mse_slice(reference.plane(ch), test.plane(ch)) + bef(test.plane(ch), w, h, block);
    }
    Ok(psnr_from_mse(mse_b / c as f64))
}

/// Keys cubic kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        1.5 * ax.powi(3) - 2.5 * ax.powi(2) + 1.0
    } else if ax < 2.0 {
        -0.5 * ax.powi(3) + 2.5 * ax.powi(2) - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Tap indices and normalized weights for shrinking `len` samples by `r`,
/// antialiased, with symmetric border extension.
fn bicubic_taps(len: usize, r: usize) -> Vec<Vec<(usize, f64)>> {
    let s = 1.0 / r as f64;
    let width = 4.0 / s;
    let out_len = len / r;
    (0..out_len)
        .map(|i| {
            let u = (i + 1) as f64 / s + 0.5 * (1.0 - 1.0 / s);
            let left = (u - width / 2.0).floor() as isize;
            let taps = width.ceil() as isize + 2;
            let mut v: Vec<(usize, f64)> = (0..taps)
                .map(|t| {
                    let j = left + t;
                    let wgt = s * cubic(s * (u - j as f64));
                    // 1-based j; mirror into [1, len].
                    let period = 2 * len as isize;
                    let mut m = (j - 1).rem_euclid(period);
                    if m >= len as isize {
                        m = period - 1 - m;
                    }
                    (m as usize, wgt)
                })
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let sum: f64 = v.iter().map(|p| p.1).sum();
            v.iter_mut().for_each(|p| p.1 /= sum);
            v
        })
        .collect()
}

/// Bicubic downscaling by an integer factor after cropping to a multiple of it.
pub fn bicubic_down(img: &ImagePlane, r: usize) -> ImagePlane {
    assert!(r >= 1);
    let (w, h) = (img.width() / r * r, img.height() / r * r);
    let img = img.crop(0, 0, w, h);
    if r == 1 {
        return img;
    }
    let (ow, oh) = (w / r, h / r);
    let tx = bicubic_taps(w, r);
    let ty = bicubic_taps(h, r);
    let mut out = Vec::with_capacity(ow * oh * img.channels());
    for c in 0..img.channels() {
        let p = img.plane(c);
        // Columns first, then rows.
        let mut tmp = vec![0.0; w * oh];
        for (oy, taps) in ty.iter().enumerate() {
            for x in 0..w {
                tmp[oy * w + x] = taps.iter().map(|&(j, k)| k * p[j * w + x] as f64).sum();
            }
        }
        for oy in 0..oh {
            for taps in &tx {
                let v: f64 = taps.iter().map(|&(j, k)| k * tmp[oy * w + j]).sum();
                out.push(round_half_up_clamp_f64(v));
            }
        }
    }
    ImagePlane::new(ow, oh, img.channels(), out).unwrap()
}

/// Adds seeded Gaussian noise of standard deviation `sigma`, then rounds half
/// up and clamps.
pub fn awgn(img: &ImagePlane, sigma: f64, seed: u64) -> ImagePlane {
    if sigma == 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite non-negative sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = img
        .data()
        .iter()
        .map(|&v| round_half_up_clamp_f64(v as f64 + normal.sample(&mut rng)))
        .collect();
    ImagePlane::new(img.width(), img.height(), img.channels(), data).unwrap()
}

/// Colour channel sampled at `(y, x)` of an RGGB mosaic.
pub fn rggb_channel(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Single-channel RGGB mosaic of a colour image.
pub fn mosaic_rggb(img: &ImagePlane) -> Result<ImagePlane, MetricError> {
    if img.channels() != 3 {
        return Err(MetricError::Unsupported {
            need: "3 channels".into(),
            got: format!("{} channel", img.channels()),
        });
    }
    Ok(ImagePlane::from_fn(img.width(), img.height(), 1, |_, y, x| img.get(rggb_channel(y, x), y, x)).unwrap())
}

/// Colour image keeping only the RGGB sample of each site; the rest are zero.
pub fn mask_rggb(img: &ImagePlane) -> Result<ImagePlane, MetricError> {
    let m = mosaic_rggb(img)?;
    Ok(ImagePlane::from_fn(img.width(), img.height(), 3, |c, y, x| if rggb_channel(y, x) == c { m.get(0, y, x) } else { 0 }).unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Degradation {
    Bicubic { scale: usize },
    Awgn { sigma: f64, seed: u64 },
    BayerRggb,
}

pub fn degrade(img: &ImagePlane, kind: Degradation) -> Result<ImagePlane, MetricError> {
    match kind {
        Degradation::Bicubic { scale } => Ok(bicubic_down(img, scale)),
        Degradation::Awgn { sigma, seed } => Ok(awgn(img, sigma, seed)),
        Degradation::BayerRggb => mosaic_rggb(img),
    }
}
