//! Image metrics and the photometric training loss.

use crate::render::Image;
use crate::RenderError;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
pub const DEFAULT_LAMBDA_DSSIM: f64 = 0.2;

fn check(a: &Image, b: &Image) -> Result<(), RenderError> {
    if !a.same_size(b) || a.data.len() != b.data.len() {
        return Err(RenderError::DimensionMismatch);
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, RenderError> {
    check(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `-10 log10(MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64, RenderError> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

fn channel(img: &Image, c: usize) -> Plane {
    Plane {
        w: img.width,
        h: img.height,
        v: (0..img.width * img.height).map(|p| img.data[3 * p + c]).collect(),
    }
}

/// Valid-region separable filtering.
fn filter(p: &Plane, taps: &[f64; SSIM_WINDOW]) -> Plane {
    let k = SSIM_WINDOW;
    let (ow, oh) = (p.w + 1 - k, p.h + 1 - k);
    let mut rows = vec![0.0; ow * p.h];
    for y in 0..p.h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * p.v[y * p.w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    Plane { w: ow, h: oh, v: out }
}

/// Adjoint of [`filter`] back onto a `w x h` plane.
fn filter_adjoint(g: &Plane, w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let mut rows = vec![0.0; g.w * h];
    for y in 0..g.h {
        for x in 0..g.w {
            let v = g.v[y * g.w + x];
            for i in 0..k {
                rows[(y + i) * g.w + x] += taps[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..g.w {
            let v = rows[y * g.w + x];
            for i in 0..k {
                out[y * w + x + i] += taps[i] * v;
            }
        }
    }
    out
}

fn mul(a: &Plane, b: &Plane) -> Plane {
    Plane {
        w: a.w,
        h: a.h,
        v: a.v.iter().zip(&b.v).map(|(x, y)| x * y).collect(),
    }
}

/// Mean SSIM and, when requested, its gradient w.r.t. `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>), RenderError> {
    check(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(RenderError::TooSmall);
    }
    let taps = ssim_taps();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::filled(a.width, a.height, [0.0; 3]));
    let count = ((a.width + 1 - SSIM_WINDOW) * (a.height + 1 - SSIM_WINDOW) * 3) as f64;
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let mx = filter(&x, &taps);
        let my = filter(&y, &taps);
        let exx = filter(&mul(&x, &x), &taps);
        let eyy = filter(&mul(&y, &y), &taps);
        let exy = filter(&mul(&x, &y), &taps);
        let n = mx.v.len();
        let mut g_mx = vec![0.0; n];
        let mut g_exx = vec![0.0; n];
        let mut g_exy = vec![0.0; n];
        for i in 0..n {
            let (ux, uy) = (mx.v[i], my.v[i]);
            let sxx = exx.v[i] - ux * ux;
            let syy = eyy.v[i] - uy * uy;
            let sxy = exy.v[i] - ux * uy;
            let a1 = 2.0 * ux * uy + c1;
            let a2 = 2.0 * sxy + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = sxx + syy + c2;
            let d = b1 * b2;
            let s = a1 * a2 / d;
            total += s;
            if want_grad {
                let dn = 2.0 * uy * a2 - 2.0 * uy * a1;
                let dd = 2.0 * ux * b2 - 2.0 * ux * b1;
                g_mx[i] = (dn - s * dd) / d / count;
                g_exx[i] = -s * b1 / d / count;
                g_exy[i] = 2.0 * a1 / d / count;
            }
        }
        if let Some(g) = grad.as_mut() {
            let wrap = |v| Plane { w: mx.w, h: mx.h, v };
            let gm = filter_adjoint(&wrap(g_mx), x.w, x.h, &taps);
            let gxx = filter_adjoint(&wrap(g_exx), x.w, x.h, &taps);
            let gxy = filter_adjoint(&wrap(g_exy), x.w, x.h, &taps);
            for p in 0..x.v.len() {
                g.data[3 * p + c] = gm[p] + 2.0 * x.v[p] * gxx[p] + y.v[p] * gxy[p];
            }
        }
    }
    Ok((total / count, grad))
}

/// Mean SSIM over valid 11x11 Gaussian windows and the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, RenderError> {
    Ok(ssim_impl(a, b, false)?.0)
}

pub fn l1(a: &Image, b: &Image) -> Result<f64, RenderError> {
    check(a, b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// `L1 + lambda (1 - SSIM)`. SSIM is skipped when `lambda` is zero.
pub fn loss(rendered: &Image, target: &Image, lambda_dssim: f64) -> Result<f64, RenderError> {
    let mut l = l1(rendered, target)?;
    if lambda_dssim != 0.0 {
        l += lambda_dssim * (1.0 - ssim(rendered, target)?);
    }
    Ok(l)
}

/// [`loss`] together with its gradient w.r.t. `rendered`.
pub fn loss_with_grad(rendered: &Image, target: &Image, lambda_dssim: f64) -> Result<(f64, Image), RenderError> {
    let mut l = l1(rendered, target)?;
    let n = rendered.data.len().max(1) as f64;
    let mut grad = Image {
        width: rendered.width,
        height: rendered.height,
        data: rendered
            .data
            .iter()
            .zip(&target.data)
            .map(|(x, y)| {
                if x > y {
                    1.0 / n
                } else if x < y {
                    -1.0 / n
                } else {
                    0.0
                }
            })
            .collect(),
    };
    if lambda_dssim != 0.0 {
        let (s, g) = ssim_impl(rendered, target, true)?;
        l += lambda_dssim * (1.0 - s);
        for (a, b) in grad.data.iter_mut().zip(g.expect("gradient requested").data) {
            *a -= lambda_dssim * b;
        }
    }
    Ok((l, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        }
    }

    /// Direct 2D windowed statistics, no separability.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let taps = ssim_taps();
        let (c1, c2) = (0.0001, 0.0009);
        let k = SSIM_WINDOW;
        let mut sum = 0.0;
        let mut n = 0.0;
        for c in 0..3 {
            for oy in 0..=a.height - k {
                for ox in 0..=a.width - k {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in 0..k {
                        for i in 0..k {
                            let w = taps[i] * taps[j];
                            let x = a.pixel(ox + i, oy + j)[c];
                            let y = b.pixel(ox + i, oy + j)[c];
                            mx += w * x;
                            my += w * y;
                            xx += w * x * x;
                            yy += w * y * y;
                            xy += w * x * y;
                        }
                    }
                    let vx = xx - mx * mx;
                    let vy = yy - my * my;
                    let cxy = xy - mx * my;
                    sum += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1.0;
                }
            }
        }
        sum / n
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(8, 8, [0.3, 0.4, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(8, 8, [0.4, 0.5, 0.6]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &Image::filled(4, 8, [0.0; 3])), Err(RenderError::DimensionMismatch));
    }

    #[test]
    fn psnr_matches_direct_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 9, 7);
        let b = random_image(&mut rng, 9, 7);
        let m: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
        assert!((psnr(&a, &b).unwrap() + 10.0 * m.log10()).abs() < 1e-12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let half = Image::filled(16, 16, [0.5; 3]);
        let neg = Image {
            data: half.data.iter().map(|v| 1.0 - v).collect(),
            ..half.clone()
        };
        assert!((ssim(&half, &neg).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&Image::filled(10, 20, [0.0; 3]), &Image::filled(10, 20, [0.0; 3])), Err(RenderError::TooSmall));
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 17, 14);
        let b = random_image(&mut rng, 17, 14);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 12, 12);
        assert_eq!(loss(&a, &a, 0.2).unwrap(), 0.0);
        let shifted = Image {
            data: a.data.iter().map(|v| v + 0.1).collect(),
            ..a.clone()
        };
        assert!((loss(&shifted, &a, 0.0).unwrap() - 0.1).abs() < 1e-12);
        let b = random_image(&mut rng, 12, 12);
        let l1: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
        assert!((loss(&a, &b, 0.2).unwrap() - (l1 + 0.2 * (1.0 - ssim_oracle(&a, &b)))).abs() < 1e-9);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(&mut rng, 13, 12);
        let b = random_image(&mut rng, 13, 12);
        let (l, g) = loss_with_grad(&a, &b, 0.2).unwrap();
        assert_eq!(l, loss(&a, &b, 0.2).unwrap());
        let h = 1e-6;
        for idx in [0, 7, 100, 250, 311, a.data.len() - 1] {
            let mut p = a.clone();
            p.data[idx] += h;
            let mut m = a.clone();
            m.data[idx] -= h;
            let fd = (loss(&p, &b, 0.2).unwrap() - loss(&m, &b, 0.2).unwrap()) / (2.0 * h);
            assert!((fd - g.data[idx]).abs() < 1e-7, "{idx}: {fd} vs {}", g.data[idx]);
        }
    }
}
