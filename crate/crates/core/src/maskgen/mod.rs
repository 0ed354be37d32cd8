//! Training-mask construction: segmentation ingestion, confidence
//! filtering, Canny edge extraction, dilation, and synthetic labeled scenes.

mod canny;
mod edge;
mod morph;
mod segmentation;
mod synth;

pub use canny::{canny, CannyParams, GrayImage};
pub use edge::{edge_mask, render_regions, EdgeMask, EdgeMode};
pub use morph::{dilate, region_boundaries};
pub use segmentation::{
    filter_regions, load_segmentation, parse_confidences, Region, SegmentationInput,
};
pub use synth::{generate_synthetic_clip, generate_synthetic_scene, ClipSpec, SceneSpec};

use crate::error::{Error, Result};
use crate::imageio::{decode_pgm, encode_pgm, GrayRaster};
use crate::tensor::Tensor;

/// An `H×W` map of exactly 0/1 values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            values: vec![1; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape {
                op: "mask",
                lhs: vec![height, width],
                rhs: vec![values.len()],
            });
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Validation("mask values must be 0 or 1".into()));
        }
        Ok(BinaryMask {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.values[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    /// Fraction of pixels set.
    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.values.len() as f64
    }

    pub fn is_superset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.values.iter().zip(&other.values).all(|(&a, &b)| a >= b)
    }

    /// `[H, W]` tensor of 0.0/1.0, the form the losses broadcast over channels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.values.iter().map(|&v| v as f64).collect(),
        )
        .expect("mask dims are positive")
    }

    /// P5 with maxval 255; pixels are 0 or 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(&GrayRaster {
            width: self.width,
            height: self.height,
            maxval: 255,
            samples: self.values.iter().map(|&v| v as u32 * 255).collect(),
        })
        .expect("mask raster is consistent")
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let r = decode_pgm(bytes)?;
        let values = r
            .samples
            .iter()
            .map(|&v| match v {
                0 => Ok(0),
                v if v == r.maxval => Ok(1),
                v => Err(Error::Validation(format!(
                    "mask sample {v} is neither 0 nor maxval {}",
                    r.maxval
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        BinaryMask::from_values(r.width, r.height, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let m = BinaryMask::from_values(3, 2, vec![0, 1, 1, 0, 0, 1]).unwrap();
        let bytes = m.to_pgm();
        assert!(bytes.ends_with(&[0, 255, 255, 0, 0, 255]));
        assert_eq!(BinaryMask::from_pgm(&bytes).unwrap(), m);
    }

    #[test]
    fn rejects_non_binary_values() {
        assert!(BinaryMask::from_values(2, 1, vec![0, 2]).is_err());
        assert!(BinaryMask::from_pgm(b"P5\n2 1\n255\n\x00\x80").is_err());
    }
}
