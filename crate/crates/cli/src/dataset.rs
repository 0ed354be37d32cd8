//! On-disk layout shared by every subcommand.
//!
//! A scene directory holds `image_%04d.ppm`, `labels_%04d.pgm` and
//! `conf_%04d.txt`; a mask directory holds `mask_%04d.pgm`. A clip directory
//! holds `frame_%05d.ppm`, `labels_%05d.pgm` and `conf_%05d.txt`, and its
//! masks are `frame_%05d.pgm`.

use std::path::{Path, PathBuf};

use icm_core::imageio::read_ppm;
use icm_core::maskgen::{load_segmentation, BinaryMask, SegmentationInput};
use icm_core::{Error, Result, Tensor};

pub fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("image_{i:04}.ppm"))
}

pub fn labels_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("labels_{i:04}.pgm"))
}

pub fn conf_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("conf_{i:04}.txt"))
}

pub fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("mask_{i:04}.pgm"))
}

pub fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:05}.ppm"))
}

pub fn frame_labels_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("labels_{t:05}.pgm"))
}

pub fn frame_conf_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("conf_{t:05}.txt"))
}

pub fn frame_mask_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:05}.pgm"))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Number of consecutive files `name(0)`, `name(1)`, … that exist.
pub fn count_files(name: impl Fn(usize) -> PathBuf) -> usize {
    (0..).take_while(|&i| name(i).exists()).count()
}

pub fn scene_count(dir: &Path) -> usize {
    count_files(|i| image_path(dir, i))
}

pub fn load_images(dir: &Path) -> Result<Vec<Tensor>> {
    let n = scene_count(dir);
    if n == 0 {
        return Err(Error::Contract(format!("no image_0000.ppm in {}", dir.display())));
    }
    (0..n).map(|i| read_ppm(&image_path(dir, i))).collect()
}

pub fn load_masks(dir: &Path, n: usize) -> Result<Vec<BinaryMask>> {
    (0..n)
        .map(|i| {
            let p = mask_path(dir, i);
            BinaryMask::from_pgm(&icm_core::imageio::read_file(&p)?)
        })
        .collect()
}

pub fn load_scene_segmentation(dir: &Path, i: usize) -> Result<SegmentationInput> {
    load_segmentation(&labels_path(dir, i), &conf_path(dir, i))
}

/// Extends a mask with zeros to `w × h`; padded pixels carry no weight.
pub fn pad_mask(mask: &BinaryMask, w: usize, h: usize) -> BinaryMask {
    if mask.width() == w && mask.height() == h {
        return mask.clone();
    }
    let mut out = BinaryMask::zeros(w, h);
    for y in 0..mask.height().min(h) {
        for x in 0..mask.width().min(w) {
            out.set(x, y, mask.get(x, y));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_zero_padded() {
        let d = Path::new("d");
        assert_eq!(image_path(d, 7), Path::new("d/image_0007.ppm"));
        assert_eq!(frame_mask_path(d, 3), Path::new("d/frame_00003.pgm"));
    }

    #[test]
    fn mask_padding_keeps_content() {
        let m = BinaryMask::from_values(2, 2, vec![1, 0, 0, 1]).unwrap();
        let p = pad_mask(&m, 4, 3);
        assert_eq!(p.count(), 2);
        assert!(p.get(1, 1) && !p.get(3, 2));
    }
}
