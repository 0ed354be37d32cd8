use std::collections::BTreeSet;

use super::{BinaryMask, SegmentationInput};

/// Dilation by the Chebyshev ball of radius `r` (a `(2r+1)²` square).
pub fn dilate(m: &BinaryMask, r: usize) -> BinaryMask {
    if r == 0 {
        return m.clone();
    }
    let (w, h) = (m.width(), m.height());
    let src = m.values();
    let mut horiz = vec![0u8; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            horiz[y * w + x] = row[lo..=hi].iter().any(|&v| v != 0) as u8;
        }
    }
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| horiz[yy * w + x] != 0) as u8;
        }
    }
    BinaryMask::from_values(w, h, out).expect("dims preserved")
}

/// Pixels of the listed regions that touch (4-neighbourhood) a pixel outside
/// their own region; the image frame counts as outside.
pub fn region_boundaries(seg: &SegmentationInput, ids: &BTreeSet<u32>) -> BinaryMask {
    let (w, h) = (seg.width, seg.height);
    let map = &seg.label_map;
    let mut out = BinaryMask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let id = map[y * w + x];
            if id == 0 || !ids.contains(&id) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x == w - 1
                || y == h - 1
                || map[y * w + x - 1] != id
                || map[y * w + x + 1] != id
                || map[(y - 1) * w + x] != id
                || map[(y + 1) * w + x] != id;
            if edge {
                out.set(x, y, true);
            }
        }
    }
    out
}
