use std::collections::VecDeque;

use super::BinaryMask;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape {
                op: "gray image",
                lhs: vec![height, width],
                rhs: vec![pixels.len()],
            });
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.pixels[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CannyParams {
    pub gaussian_sigma: f64,
    /// Weak threshold as a fraction of the maximum gradient magnitude.
    pub low_ratio: f64,
    /// Strong threshold as a fraction of the maximum gradient magnitude.
    pub high_ratio: f64,
    /// Chebyshev radius applied after edge extraction.
    pub dilate_radius: usize,
}

impl Default for CannyParams {
    fn default() -> Self {
        CannyParams {
            gaussian_sigma: 1.0,
            low_ratio: 0.1,
            high_ratio: 0.3,
            dilate_radius: 1,
        }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::contract(format!(
                "gaussian_sigma must be > 0, got {}",
                self.gaussian_sigma
            )));
        }
        if !(0.0 < self.low_ratio && self.low_ratio <= self.high_ratio && self.high_ratio <= 1.0) {
            return Err(Error::contract(format!(
                "need 0 < low_ratio <= high_ratio <= 1, got {} / {}",
                self.low_ratio, self.high_ratio
            )));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps over `[-⌈3σ⌉, ⌈3σ⌉]`.
pub(crate) fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn blur(img: &GrayImage, sigma: f64) -> GrayImage {
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut horiz = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * img.at_clamped(x as isize + i as isize - r, y as isize);
            }
            horiz[y * w + x] = acc;
        }
    }
    let tmp = GrayImage {
        width: w,
        height: h,
        pixels: horiz,
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * tmp.at_clamped(x as isize, y as isize + i as isize - r);
            }
            out[y * w + x] = acc;
        }
    }
    GrayImage {
        width: w,
        height: h,
        pixels: out,
    }
}

/// Sobel responses and magnitude after blurring, replicate border.
pub(crate) fn gradients(img: &GrayImage, sigma: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let b = blur(img, sigma);
    let (w, h) = (img.width, img.height);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut mag = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| b.at_clamped(x + dx, y + dy);
            let sx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let sy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let i = y as usize * w + x as usize;
            gx[i] = sx;
            gy[i] = sy;
            mag[i] = (sx * sx + sy * sy).sqrt();
        }
    }
    (gx, gy, mag)
}

/// Neighbour offsets along the gradient for the four direction bins.
fn direction_offsets(gx: f64, gy: f64) -> (isize, isize) {
    let mut deg = gy.atan2(gx).to_degrees();
    if deg < 0.0 {
        deg += 180.0;
    }
    if !(22.5..157.5).contains(&deg) {
        (1, 0)
    } else if deg < 67.5 {
        (1, 1)
    } else if deg < 112.5 {
        (0, 1)
    } else {
        (-1, 1)
    }
}

/// Canny edge detector on a `[0, 1]` grayscale image. Dilation is not
/// applied here; see [`super::dilate`].
///
/// Blur with radius `⌈3σ⌉`, 3×3 Sobel, four-bin non-maximum suppression
/// (ties along the gradient resolve to the far side), thresholds relative
/// to the maximum magnitude, and 8-connected hysteresis. Image border
/// pixels are never edges.
pub fn canny(img: &GrayImage, p: &CannyParams) -> Result<BinaryMask> {
    p.validate()?;
    if img.width < 5 || img.height < 5 {
        return Err(Error::contract(format!(
            "canny needs at least 5x5, got {}x{}",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width, img.height);
    let (gx, gy, mag) = gradients(img, p.gaussian_sigma);
    let max_mag = mag.iter().copied().fold(0.0, f64::max);
    let mut out = BinaryMask::zeros(w, h);
    if max_mag <= 0.0 {
        return Ok(out);
    }

    let mut nms = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let m = mag[i];
            if m <= 0.0 {
                continue;
            }
            let (dx, dy) = direction_offsets(gx[i], gy[i]);
            let back = mag[(y as isize - dy) as usize * w + (x as isize - dx) as usize];
            let fwd = mag[(y as isize + dy) as usize * w + (x as isize + dx) as usize];
            if m >= back && m > fwd {
                nms[i] = m;
            }
        }
    }

    let high = p.high_ratio * max_mag;
    let low = p.low_ratio * max_mag;
    let mut queue = VecDeque::new();
    for (i, &m) in nms.iter().enumerate() {
        if m > 0.0 && m >= high {
            out.values[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out.values[j] == 0 && nms[j] > 0.0 && nms[j] >= low {
                    out.values[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_edges() {
        let img = GrayImage::new(9, 9, vec![0.4; 81]).unwrap();
        assert_eq!(canny(&img, &CannyParams::default()).unwrap().count(), 0);
    }

    #[test]
    fn vertical_step_gives_one_column() {
        let px = (0..64).map(|i| if i % 8 >= 4 { 1.0 } else { 0.0 }).collect();
        let img = GrayImage::new(8, 8, px).unwrap();
        let m = canny(&img, &CannyParams::default()).unwrap();
        // the two columns flanking the step tie up to rounding
        let cols: Vec<usize> = (0..8).filter(|&x| (0..8).any(|y| m.get(x, y))).collect();
        assert_eq!(cols.len(), 1, "{cols:?}");
        assert!(cols[0] == 3 || cols[0] == 4);
        for y in 0..8 {
            assert_eq!(m.get(cols[0], y), (1..7).contains(&y));
        }
    }

    #[test]
    fn taps_are_normalized() {
        let t = gaussian_taps(1.0);
        assert_eq!(t.len(), 7);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_small_or_bad_params() {
        let img = GrayImage::new(4, 4, vec![0.0; 16]).unwrap();
        assert!(canny(&img, &CannyParams::default()).is_err());
        let img = GrayImage::new(6, 6, vec![0.0; 36]).unwrap();
        let bad = CannyParams {
            low_ratio: 0.5,
            high_ratio: 0.2,
            ..Default::default()
        };
        assert!(canny(&img, &bad).is_err());
    }
}
