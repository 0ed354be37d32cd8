//! Naive reference implementations used as test oracles. Written against the
//! documented conventions only; no library internals are reused.

#![allow(dead_code)]

use icm_core::maskgen::BinaryMask;
use icm_core::Tensor;

/// `∫ φ` over `[a, b]` by composite Simpson with `n` (even) panels.
pub fn normal_mass(a: f64, b: f64, n: usize) -> f64 {
    let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let h = (b - a) / n as f64;
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        let z = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(z);
    }
    s * h / 3.0
}

/// Bits of integer `v` under a unit-width discretized `N(μ, σ)`.
pub fn discretized_gaussian_bits(v: f64, mu: f64, sigma: f64) -> f64 {
    let a = (v - 0.5 - mu) / sigma;
    let b = (v + 0.5 - mu) / sigma;
    -normal_mass(a, b, 20_000).log2()
}

fn taps(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Direct-window SSIM: each 11×11 valid window with 2-D Gaussian weights,
/// means first and centred moments in a second pass; averaged over windows
/// and channels. Inputs are `[C, H, W]`.
pub fn ssim_reference(x: &Tensor, y: &Tensor) -> f64 {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let t = taps(1.5, 5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let at = |img: &Tensor, ch: usize, r: usize, col: usize| img.data()[(ch * h + r) * w + col];
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for r0 in 0..=h - 11 {
            for q0 in 0..=w - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for a in 0..11 {
                    for b in 0..11 {
                        let wt = t[a] * t[b];
                        mx += wt * at(x, ch, r0 + a, q0 + b);
                        my += wt * at(y, ch, r0 + a, q0 + b);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for a in 0..11 {
                    for b in 0..11 {
                        let wt = t[a] * t[b];
                        let dx = at(x, ch, r0 + a, q0 + b) - mx;
                        let dy = at(y, ch, r0 + a, q0 + b) - my;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cxy += wt * dx * dy;
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Canny with the documented conventions: separable blur of radius ⌈3σ⌉
/// with replicated borders, 3×3 Sobel, four direction bins decided by slope
/// comparisons, keep `m ≥ behind && m > ahead`, thresholds as fractions of
/// the peak magnitude, hysteresis by repeated sweeps until nothing changes,
/// and no edges on the image border.
pub fn canny_reference(
    px: &[f64],
    w: usize,
    h: usize,
    sigma: f64,
    low_ratio: f64,
    high_ratio: f64,
) -> Vec<u8> {
    let radius = (3.0 * sigma).ceil() as usize;
    let t = taps(sigma, radius);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; w * h];
    for r in 0..h {
        for q in 0..w {
            let mut acc = 0.0;
            for (i, tv) in t.iter().enumerate() {
                let qq = clamp(q as isize + i as isize - radius as isize, w);
                acc += tv * px[r * w + qq];
            }
            tmp[r * w + q] = acc;
        }
    }
    let mut blurred = vec![0.0; w * h];
    for r in 0..h {
        for q in 0..w {
            let mut acc = 0.0;
            for (i, tv) in t.iter().enumerate() {
                let rr = clamp(r as isize + i as isize - radius as isize, h);
                acc += tv * tmp[rr * w + q];
            }
            blurred[r * w + q] = acc;
        }
    }

    let b = |q: isize, r: isize| blurred[clamp(r, h) * w + clamp(q, w)];
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut mag = vec![0.0; w * h];
    for r in 0..h as isize {
        for q in 0..w as isize {
            let sx = (b(q + 1, r - 1) + 2.0 * b(q + 1, r) + b(q + 1, r + 1))
                - (b(q - 1, r - 1) + 2.0 * b(q - 1, r) + b(q - 1, r + 1));
            let sy = (b(q - 1, r + 1) + 2.0 * b(q, r + 1) + b(q + 1, r + 1))
                - (b(q - 1, r - 1) + 2.0 * b(q, r - 1) + b(q + 1, r - 1));
            let i = r as usize * w + q as usize;
            gx[i] = sx;
            gy[i] = sy;
            mag[i] = (sx * sx + sy * sy).sqrt();
        }
    }
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    let mut edges = vec![0u8; w * h];
    if peak <= 0.0 {
        return edges;
    }

    let t1 = (22.5f64).to_radians().tan();
    let t2 = (67.5f64).to_radians().tan();
    let mut thin = vec![0.0; w * h];
    for r in 1..h - 1 {
        for q in 1..w - 1 {
            let i = r * w + q;
            if mag[i] <= 0.0 {
                continue;
            }
            let (ax, ay) = (gx[i].abs(), gy[i].abs());
            let (dq, dr): (isize, isize) = if ay < t1 * ax {
                (1, 0)
            } else if ay >= t2 * ax {
                (0, 1)
            } else if gx[i] * gy[i] > 0.0 {
                (1, 1)
            } else {
                (-1, 1)
            };
            let ahead = mag[(r as isize + dr) as usize * w + (q as isize + dq) as usize];
            let behind = mag[(r as isize - dr) as usize * w + (q as isize - dq) as usize];
            if mag[i] >= behind && mag[i] > ahead {
                thin[i] = mag[i];
            }
        }
    }

    let (hi, lo) = (high_ratio * peak, low_ratio * peak);
    for i in 0..w * h {
        if thin[i] > 0.0 && thin[i] >= hi {
            edges[i] = 1;
        }
    }
    loop {
        let mut changed = false;
        for r in 0..h {
            for q in 0..w {
                let i = r * w + q;
                if edges[i] == 1 || !(thin[i] > 0.0 && thin[i] >= lo) {
                    continue;
                }
                let touches = (-1isize..=1).any(|dr| {
                    (-1isize..=1).any(|dq| {
                        let (rr, qq) = (r as isize + dr, q as isize + dq);
                        rr >= 0
                            && qq >= 0
                            && (rr as usize) < h
                            && (qq as usize) < w
                            && edges[rr as usize * w + qq as usize] == 1
                    })
                });
                if touches {
                    edges[i] = 1;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    edges
}

/// Pixelwise `a ⊇ b`.
pub fn superset(a: &BinaryMask, b: &BinaryMask) -> bool {
    a.values().iter().zip(b.values()).all(|(&x, &y)| x >= y)
}
