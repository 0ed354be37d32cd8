use std::collections::BTreeSet;

use super::canny::{canny, CannyParams, GrayImage};
use super::morph::{dilate, region_boundaries};
use super::segmentation::{filter_regions, SegmentationInput};
use super::BinaryMask;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EdgeMode {
    /// Canny over the segmentation map rendered to gray levels.
    Composite,
    /// Union of per-region boundaries; monotone in `alpha`.
    #[default]
    RegionUnion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMask {
    pub mask: BinaryMask,
    /// Set when no region survived the confidence filter.
    pub no_regions: bool,
}

fn gray_level(id: u32) -> f64 {
    // splitmix64 finalizer, folded into [32, 255]
    let mut z = (id as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (32 + z % 224) as f64 / 255.0
}

/// Renders a label map to `[0, 1]` gray; unlabeled pixels are black.
pub fn render_regions(seg: &SegmentationInput) -> GrayImage {
    let pixels = seg
        .label_map
        .iter()
        .map(|&id| if id == 0 { 0.0 } else { gray_level(id) })
        .collect();
    GrayImage {
        width: seg.width,
        height: seg.height,
        pixels,
    }
}

/// Binary edge mask of the regions whose confidence is at least `alpha`.
pub fn edge_mask(
    seg: &SegmentationInput,
    alpha: f64,
    p: &CannyParams,
    mode: EdgeMode,
) -> Result<EdgeMask> {
    p.validate()?;
    let kept = filter_regions(seg, alpha)?;
    if kept.regions.is_empty() {
        return Ok(EdgeMask {
            mask: BinaryMask::zeros(seg.width, seg.height),
            no_regions: true,
        });
    }
    let raw = match mode {
        EdgeMode::Composite => canny(&render_regions(&kept), p)?,
        EdgeMode::RegionUnion => {
            let ids: BTreeSet<u32> = kept.regions.iter().map(|r| r.id).collect();
            region_boundaries(&kept, &ids)
        }
    };
    Ok(EdgeMask {
        mask: dilate(&raw, p.dilate_radius),
        no_regions: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::Region;

    fn scene() -> SegmentationInput {
        // 12x12 with three disjoint 3x3 squares
        let (w, h) = (12, 12);
        let mut map = vec![0u32; w * h];
        for (id, (ox, oy)) in [(1u32, (1, 1)), (2, (7, 1)), (3, (4, 7))] {
            for y in oy..oy + 3 {
                for x in ox..ox + 3 {
                    map[y * w + x] = id;
                }
            }
        }
        SegmentationInput::new(
            w,
            h,
            map,
            vec![
                Region { id: 1, confidence: 0.99 },
                Region { id: 2, confidence: 0.9 },
                Region { id: 3, confidence: 0.5 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn lower_alpha_is_superset() {
        let p = CannyParams::default();
        let hi = edge_mask(&scene(), 0.98, &p, EdgeMode::RegionUnion).unwrap().mask;
        let lo = edge_mask(&scene(), 0.48, &p, EdgeMode::RegionUnion).unwrap().mask;
        assert!(lo.is_superset_of(&hi));
        assert!(lo.count() > hi.count());
        // brute force: 8 boundary pixels per 3x3 square, dilated by 1 → 5x5 block
        assert_eq!(hi.count(), 25);
        assert_eq!(lo.count(), 75);
    }

    #[test]
    fn full_frame_region_gives_dilated_border() {
        let seg = SegmentationInput::new(
            6,
            5,
            vec![4; 30],
            vec![Region { id: 4, confidence: 1.0 }],
        )
        .unwrap();
        let p = CannyParams::default();
        let m = edge_mask(&seg, 0.5, &p, EdgeMode::RegionUnion).unwrap().mask;
        for y in 0..5 {
            for x in 0..6 {
                let near_border = x <= 1 || y <= 1 || x >= 4 || y >= 3;
                assert_eq!(m.get(x, y), near_border);
            }
        }
    }

    #[test]
    fn no_regions_sets_flag() {
        let seg = SegmentationInput::new(6, 6, vec![0; 36], vec![]).unwrap();
        for mode in [EdgeMode::Composite, EdgeMode::RegionUnion] {
            let out = edge_mask(&seg, 0.5, &CannyParams::default(), mode).unwrap();
            assert!(out.no_regions);
            assert_eq!(out.mask.count(), 0);
        }
    }

    #[test]
    fn composite_finds_square_outlines() {
        let out = edge_mask(&scene(), 0.0, &CannyParams { dilate_radius: 0, ..Default::default() }, EdgeMode::Composite).unwrap();
        assert!(!out.no_regions);
        assert!(out.mask.count() > 0);
    }

    #[test]
    fn gray_levels_in_range() {
        for id in 1..2000 {
            let g = gray_level(id) * 255.0;
            assert!((32.0..=255.0).contains(&g.round()));
        }
    }
}
