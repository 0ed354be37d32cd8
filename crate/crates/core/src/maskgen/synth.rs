//! Deterministic synthetic scenes: value-noise backgrounds with flat-plus-noise
//! shapes and a label map. Only integer mixing and `+ - * /` are used, so a
//! seed produces the same bits everywhere.

use super::segmentation::{Region, SegmentationInput};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Confidences are drawn uniformly from this interval.
    pub confidence_range: (f64, f64),
    /// Regions left with fewer visible pixels than this are unlabeled.
    pub min_visible_pixels: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            min_objects: 2,
            max_objects: 5,
            confidence_range: (0.3, 1.0),
            min_visible_pixels: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub objects: usize,
    pub confidence_range: (f64, f64),
    /// Largest per-frame displacement along each axis, in pixels.
    pub max_speed: f64,
    pub min_visible_pixels: usize,
}

impl Default for ClipSpec {
    fn default() -> Self {
        ClipSpec {
            width: 64,
            height: 64,
            frames: 8,
            objects: 3,
            confidence_range: (0.5, 1.0),
            max_speed: 2.0,
            min_visible_pixels: 24,
        }
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Shape {
    fn random(rng: &mut SplitMix64, w: f64, h: f64) -> Shape {
        match rng.range_inclusive(0, 2) {
            0 => {
                let sw = rng.uniform(w / 8.0, w / 3.0);
                let sh = rng.uniform(h / 8.0, h / 3.0);
                let x0 = rng.uniform(0.0, w - sw);
                let y0 = rng.uniform(0.0, h - sh);
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + sw,
                    y1: y0 + sh,
                }
            }
            1 => {
                let rx = rng.uniform(w / 16.0, w / 6.0);
                let ry = rng.uniform(h / 16.0, h / 6.0);
                Shape::Ellipse {
                    cx: rng.uniform(rx, w - rx),
                    cy: rng.uniform(ry, h - ry),
                    rx,
                    ry,
                }
            }
            _ => {
                let bw = rng.uniform(w / 6.0, w / 2.0);
                let bh = rng.uniform(h / 6.0, h / 2.0);
                let ox = rng.uniform(0.0, w - bw);
                let oy = rng.uniform(0.0, h - bh);
                let mut pt = || (ox + rng.uniform(0.0, bw), oy + rng.uniform(0.0, bh));
                Shape::Triangle {
                    p: [pt(), pt(), pt()],
                }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let u = (x - cx) / rx;
                let v = (y - cy) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Triangle { p } => {
                let cross = |a: (f64, f64), b: (f64, f64)| {
                    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
                };
                let d0 = cross(p[0], p[1]);
                let d1 = cross(p[1], p[2]);
                let d2 = cross(p[2], p[0]);
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(neg && pos)
            }
        }
    }
}

struct Object {
    shape: Shape,
    color: [f64; 3],
    velocity: (f64, f64),
    confidence: f64,
    noise_key: u64,
}

fn value_noise(seed: u64, w: usize, h: usize) -> Vec<f64> {
    let mut rng = SplitMix64::derive(seed, &[0xBAC6]);
    let mut out = vec![0.0; 3 * w * h];
    for c in 0..3 {
        let base = rng.uniform(0.25, 0.75);
        for (cell, amp) in [(16usize, 0.18), (8, 0.09), (4, 0.045)] {
            let gw = w / cell + 2;
            let gh = h / cell + 2;
            let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.uniform(-1.0, 1.0)).collect();
            for y in 0..h {
                let fy = y as f64 / cell as f64;
                let (iy, ty) = (fy as usize, fy - (fy as usize) as f64);
                let sy = ty * ty * (3.0 - 2.0 * ty);
                for x in 0..w {
                    let fx = x as f64 / cell as f64;
                    let (ix, tx) = (fx as usize, fx - (fx as usize) as f64);
                    let sx = tx * tx * (3.0 - 2.0 * tx);
                    let l = |gx: usize, gy: usize| lattice[gy * gw + gx];
                    let top = l(ix, iy) + sx * (l(ix + 1, iy) - l(ix, iy));
                    let bot = l(ix, iy + 1) + sx * (l(ix + 1, iy + 1) - l(ix, iy + 1));
                    out[(c * h + y) * w + x] += amp * (top + sy * (bot - top));
                }
            }
        }
        for v in &mut out[c * w * h..(c + 1) * w * h] {
            *v = (*v + base).clamp(0.0, 1.0);
        }
    }
    out
}

fn random_objects(rng: &mut SplitMix64, count: usize, w: usize, h: usize, conf: (f64, f64), max_speed: f64) -> Vec<Object> {
    (0..count)
        .map(|k| {
            let shape = Shape::random(rng, w as f64, h as f64);
            let color = [rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)];
            let velocity = (rng.uniform(-max_speed, max_speed), rng.uniform(-max_speed, max_speed));
            let confidence = rng.uniform(conf.0, conf.1);
            Object {
                shape,
                color,
                velocity,
                confidence,
                noise_key: k as u64,
            }
        })
        .collect()
}

fn render(
    seed: u64,
    background: &[f64],
    objects: &[Object],
    w: usize,
    h: usize,
    shift: f64,
    min_visible: usize,
) -> Result<(Tensor, SegmentationInput)> {
    let mut img = background.to_vec();
    let mut labels = vec![0u32; w * h];
    for (k, obj) in objects.iter().enumerate() {
        let (dx, dy) = (obj.velocity.0 * shift, obj.velocity.1 * shift);
        let mut noise = SplitMix64::derive(seed, &[0x5EED, obj.noise_key]);
        for y in 0..h {
            for x in 0..w {
                let jitter = noise.uniform(-0.04, 0.04);
                if obj.shape.contains(x as f64 + 0.5 - dx, y as f64 + 0.5 - dy) {
                    labels[y * w + x] = k as u32 + 1;
                    for c in 0..3 {
                        img[(c * h + y) * w + x] = (obj.color[c] + jitter).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    let mut counts = vec![0usize; objects.len() + 1];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    for l in labels.iter_mut() {
        if *l != 0 && counts[*l as usize] < min_visible {
            *l = 0;
        }
    }
    let regions = objects
        .iter()
        .enumerate()
        .filter(|(k, _)| counts[k + 1] >= min_visible)
        .map(|(k, o)| Region {
            id: k as u32 + 1,
            confidence: o.confidence,
        })
        .collect();
    let seg = SegmentationInput::new(w, h, labels, regions)?;
    Ok((Tensor::new(vec![3, h, w], img)?, seg))
}

fn check_dims(w: usize, h: usize) -> Result<()> {
    if w < 16 || h < 16 {
        return Err(Error::contract(format!(
            "synthetic scenes need at least 16x16, got {w}x{h}"
        )));
    }
    Ok(())
}

/// A `[3, H, W]` image and its segmentation.
pub fn generate_synthetic_scene(seed: u64, spec: &SceneSpec) -> Result<(Tensor, SegmentationInput)> {
    check_dims(spec.width, spec.height)?;
    if spec.min_objects > spec.max_objects {
        return Err(Error::contract("min_objects exceeds max_objects"));
    }
    let (w, h) = (spec.width, spec.height);
    let mut rng = SplitMix64::derive(seed, &[0x5CE7E]);
    let count = rng.range_inclusive(spec.min_objects as u64, spec.max_objects as u64) as usize;
    let background = value_noise(seed, w, h);
    let objects = random_objects(&mut rng, count, w, h, spec.confidence_range, 0.0);
    render(seed, &background, &objects, w, h, 0.0, spec.min_visible_pixels)
}

/// Frames of shapes translating over a static background, with one
/// segmentation per frame. Object confidences are constant over the clip.
pub fn generate_synthetic_clip(
    seed: u64,
    spec: &ClipSpec,
) -> Result<(Vec<Tensor>, Vec<SegmentationInput>)> {
    check_dims(spec.width, spec.height)?;
    if spec.frames == 0 {
        return Err(Error::contract("clip needs at least one frame"));
    }
    let (w, h) = (spec.width, spec.height);
    let mut rng = SplitMix64::derive(seed, &[0xC11B]);
    let background = value_noise(seed, w, h);
    let objects = random_objects(&mut rng, spec.objects, w, h, spec.confidence_range, spec.max_speed);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut segs = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let (f, s) = render(seed, &background, &objects, w, h, t as f64, spec.min_visible_pixels)?;
        frames.push(f);
        segs.push(s);
    }
    Ok((frames, segs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        let a = generate_synthetic_scene(1, &spec).unwrap();
        let b = generate_synthetic_scene(1, &spec).unwrap();
        assert!(a.0.bit_eq(&b.0));
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn different_seed_different_labels() {
        let spec = SceneSpec::default();
        let a = generate_synthetic_scene(1, &spec).unwrap();
        let b = generate_synthetic_scene(2, &spec).unwrap();
        assert_ne!(a.1.label_map, b.1.label_map);
    }

    #[test]
    fn zero_objects_is_pure_texture() {
        let spec = SceneSpec {
            min_objects: 0,
            max_objects: 0,
            ..Default::default()
        };
        let (img, seg) = generate_synthetic_scene(3, &spec).unwrap();
        assert!(seg.regions.is_empty());
        assert!(seg.label_map.iter().all(|&l| l == 0));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn too_small_is_contract_error() {
        let spec = SceneSpec {
            width: 8,
            height: 8,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic_scene(1, &spec),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn clip_objects_move() {
        let (frames, segs) = generate_synthetic_clip(4, &ClipSpec::default()).unwrap();
        assert_eq!(frames.len(), 8);
        assert_ne!(segs[0].label_map, segs[7].label_map);
        for s in &segs {
            s.validate().unwrap();
        }
    }
}
