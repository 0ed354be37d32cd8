use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::{decode_pgm, encode_pgm, read_file, GrayRaster};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub id: u32,
    pub confidence: f64,
}

/// A label map plus per-region confidences. Id 0 means unlabeled.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationInput {
    pub width: usize,
    pub height: usize,
    pub label_map: Vec<u32>,
    pub regions: Vec<Region>,
}

impl SegmentationInput {
    /// Checks the label map size, that every nonzero id has exactly one
    /// region entry, and that confidences lie in `[0, 1]`.
    pub fn new(
        width: usize,
        height: usize,
        label_map: Vec<u32>,
        regions: Vec<Region>,
    ) -> Result<Self> {
        let seg = SegmentationInput {
            width,
            height,
            label_map,
            regions,
        };
        seg.validate()?;
        Ok(seg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.label_map.len() != self.width * self.height
        {
            return Err(Error::Validation(format!(
                "label map has {} entries for {}x{}",
                self.label_map.len(),
                self.width,
                self.height
            )));
        }
        let mut seen = BTreeSet::new();
        for r in &self.regions {
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(Error::Validation(format!(
                    "region {} confidence {} outside [0, 1]",
                    r.id, r.confidence
                )));
            }
            if r.id == 0 {
                return Err(Error::Validation("region id 0 is reserved".into()));
            }
            if !seen.insert(r.id) {
                return Err(Error::Validation(format!("region {} listed twice", r.id)));
            }
        }
        let missing: BTreeSet<u32> = self
            .label_map
            .iter()
            .copied()
            .filter(|&id| id != 0 && !seen.contains(&id))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!(
                "label ids without a confidence entry: {:?}",
                missing.into_iter().collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    pub fn confidence_of(&self, id: u32) -> Option<f64> {
        self.regions.iter().find(|r| r.id == id).map(|r| r.confidence)
    }

    /// 16-bit P5 label map with maxval 65535.
    pub fn to_label_pgm(&self) -> Result<Vec<u8>> {
        if let Some(&id) = self.label_map.iter().find(|&&id| id > 65535) {
            return Err(Error::contract(format!("region id {id} does not fit 16 bits")));
        }
        encode_pgm(&GrayRaster {
            width: self.width,
            height: self.height,
            maxval: 65535,
            samples: self.label_map.clone(),
        })
    }

    /// Sidecar text, one `id confidence` line per region.
    pub fn to_confidence_text(&self) -> String {
        self.regions
            .iter()
            .map(|r| format!("{} {}\n", r.id, r.confidence))
            .collect()
    }
}

/// Parses `id confidence` lines; blank lines and `#` comments are skipped.
pub fn parse_confidences(text: &str) -> Result<Vec<Region>> {
    let mut regions = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim();
        if !body.is_empty() && !body.starts_with('#') {
            let mut parts = body.split_whitespace();
            let parsed = match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(conf), None) => id
                    .parse::<u32>()
                    .ok()
                    .zip(conf.parse::<f64>().ok().filter(|c| c.is_finite())),
                _ => None,
            };
            let (id, confidence) = parsed.ok_or_else(|| Error::Parse {
                offset,
                msg: format!("expected \"id confidence\", got {body:?}"),
            })?;
            regions.push(Region { id, confidence });
        }
        offset += line.len();
    }
    Ok(regions)
}

/// Reads a 16-bit P5 label map and its confidence sidecar. Sidecar entries
/// for ids absent from the map are dropped.
pub fn load_segmentation(label_path: &Path, conf_path: &Path) -> Result<SegmentationInput> {
    let raster = decode_pgm(&read_file(label_path)?)?;
    let text = std::fs::read_to_string(conf_path).map_err(|e| Error::io(conf_path, e))?;
    let regions = parse_confidences(&text)?;
    let present: BTreeSet<u32> = raster.samples.iter().copied().filter(|&v| v != 0).collect();
    let regions = regions
        .into_iter()
        .filter(|r| present.contains(&r.id))
        .collect();
    SegmentationInput::new(raster.width, raster.height, raster.samples, regions)
}

/// Keeps exactly the regions with `confidence ≥ alpha`; pixels of dropped
/// regions become unlabeled.
pub fn filter_regions(seg: &SegmentationInput, alpha: f64) -> Result<SegmentationInput> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha {alpha} outside [0, 1]")));
    }
    let kept: BTreeMap<u32, f64> = seg
        .regions
        .iter()
        .filter(|r| r.confidence >= alpha)
        .map(|r| (r.id, r.confidence))
        .collect();
    Ok(SegmentationInput {
        width: seg.width,
        height: seg.height,
        label_map: seg
            .label_map
            .iter()
            .map(|&id| if kept.contains_key(&id) { id } else { 0 })
            .collect(),
        regions: seg
            .regions
            .iter()
            .copied()
            .filter(|r| kept.contains_key(&r.id))
            .collect(),
    })
}
