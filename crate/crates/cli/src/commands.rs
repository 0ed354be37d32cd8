use std::path::{Path, PathBuf};

use icm_core::codec::{decode_bitstream, encode_bitstream, reflect_pad, Bitstream, LicConfig, LicModel};
use icm_core::imageio::{read_file, read_ppm, write_atomic, write_ppm};
use icm_core::maskgen::{
    edge_mask, generate_synthetic_clip, generate_synthetic_scene, load_segmentation, BinaryMask,
    CannyParams, ClipSpec, EdgeMode, SceneSpec, SegmentationInput,
};
use icm_core::metrics::{bpp, mse, psnr};
use icm_core::nerv::{load_clip, NervConfig};
use icm_core::rng::SplitMix64;
use icm_core::trainer::{
    train_lic, train_nerv, Checkpoint, LicDataset, ModelKind, Objective, TrainConfig, TrainLog,
};
use icm_core::Tensor;

use crate::args::*;
use crate::dataset::*;
use crate::error::{CliError, CliResult};

impl MaskParams {
    pub fn canny(&self) -> CannyParams {
        CannyParams {
            gaussian_sigma: self.sigma,
            low_ratio: self.low,
            high_ratio: self.high,
            dilate_radius: self.dilate,
        }
    }

    pub fn edge_mode(&self) -> EdgeMode {
        match self.mode {
            MaskMode::RegionUnion => EdgeMode::RegionUnion,
            MaskMode::Composite => EdgeMode::Composite,
        }
    }

    pub fn build(&self, seg: &SegmentationInput) -> CliResult<BinaryMask> {
        Ok(edge_mask(seg, self.alpha, &self.canny(), self.edge_mode())?.mask)
    }
}

fn write_scene(
    image: &Path,
    labels: &Path,
    conf: &Path,
    x: &Tensor,
    seg: &SegmentationInput,
) -> CliResult<()> {
    write_ppm(image, x)?;
    write_atomic(labels, &seg.to_label_pgm()?)?;
    write_atomic(conf, seg.to_confidence_text().as_bytes())?;
    Ok(())
}

pub fn datagen(a: &DatagenArgs) -> CliResult<()> {
    let (height, width) = a.size;
    let (lo, hi) = a.objects;
    create_dir(&a.out)?;
    if let Some(frames) = a.frames {
        let objects = SplitMix64::derive(a.seed, &[0xC0B5]).range_inclusive(lo as u64, hi as u64);
        let spec = ClipSpec {
            width,
            height,
            frames,
            objects: objects as usize,
            ..ClipSpec::default()
        };
        let (xs, segs) = generate_synthetic_clip(a.seed, &spec)?;
        for (t, (x, seg)) in xs.iter().zip(&segs).enumerate() {
            write_scene(
                &frame_path(&a.out, t),
                &frame_labels_path(&a.out, t),
                &frame_conf_path(&a.out, t),
                x,
                seg,
            )?;
        }
        return Ok(());
    }
    let spec = SceneSpec {
        width,
        height,
        min_objects: lo,
        max_objects: hi,
        ..SceneSpec::default()
    };
    for i in 0..a.count {
        let (x, seg) = generate_synthetic_scene(a.seed.wrapping_add(i as u64), &spec)?;
        write_scene(
            &image_path(&a.out, i),
            &labels_path(&a.out, i),
            &conf_path(&a.out, i),
            &x,
            &seg,
        )?;
    }
    Ok(())
}

pub fn mask_gen(a: &MaskGenArgs) -> CliResult<()> {
    if let (Some(labels), Some(conf)) = (&a.labels, &a.conf) {
        let mask = a.params.build(&load_segmentation(labels, conf)?)?;
        write_atomic(&a.out, &mask.to_pgm())?;
        println!("coverage={}", mask.coverage());
        return Ok(());
    }
    let data = a.data.as_ref().expect("clap requires --labels or --data");
    let scenes = count_files(|i| labels_path(data, i));
    let frames = count_files(|t| frame_labels_path(data, t));
    type Namer = fn(&Path, usize) -> PathBuf;
    let (n, labels, conf, out): (usize, Namer, Namer, Namer) = if scenes > 0 {
        (scenes, labels_path, conf_path, mask_path)
    } else {
        (frames, frame_labels_path, frame_conf_path, frame_mask_path)
    };
    if n == 0 {
        return Err(CliError::usage(format!(
            "no labels_0000.pgm or labels_00000.pgm in {}",
            data.display()
        )));
    }
    create_dir(&a.out)?;
    let mut covered = 0.0;
    for i in 0..n {
        let mask = a.params.build(&load_segmentation(&labels(data, i), &conf(data, i))?)?;
        write_atomic(&out(&a.out, i), &mask.to_pgm())?;
        covered += mask.coverage();
    }
    println!("coverage={}", covered / n as f64);
    Ok(())
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn schedule_config(objective: Objective, alpha: Option<f64>, s: &Schedule) -> TrainConfig {
    TrainConfig {
        alpha,
        lr: s.lr,
        batch_size: s.batch,
        command: Some(command_line()),
        ..TrainConfig::new(objective, s.epochs, s.seed)
    }
}

fn finish_training(mut ck: Checkpoint, log: &TrainLog, cfg: &TrainConfig, s: &Schedule) -> CliResult<()> {
    if let Some(a) = cfg.alpha {
        ck.set_meta("alpha", a);
    }
    ck.set_meta("epochs", s.epochs as f64);
    ck.set_meta("seed", s.seed as f64);
    ck.save(&s.ckpt)?;
    let log_path = s.log.clone().unwrap_or_else(|| {
        let mut p = s.ckpt.clone().into_os_string();
        p.push(".csv");
        p.into()
    });
    write_atomic(&log_path, log.to_csv().as_bytes())?;
    if let Some(last) = log.records.last() {
        println!("loss={}", last.loss);
    }
    Ok(())
}

/// Images reflect-padded to the codec's stride and masks zero-extended to
/// match.
pub fn lic_dataset(images: Vec<Tensor>, masks: Option<Vec<BinaryMask>>) -> CliResult<LicDataset> {
    let factor = LicConfig::default().factor();
    let images = images
        .iter()
        .map(|x| reflect_pad(x, factor))
        .collect::<icm_core::Result<Vec<_>>>()?;
    let masks = masks.map(|ms| {
        ms.iter()
            .zip(&images)
            .map(|(m, x)| pad_mask(m, x.shape()[2], x.shape()[1]))
            .collect()
    });
    Ok(LicDataset { images, masks })
}

pub fn train_lic_cmd(a: &TrainLicArgs) -> CliResult<()> {
    if a.lambda2.is_some() && a.objective != LicObjective::Task {
        return Err(CliError::usage("--lambda2 only applies to --objective task"));
    }
    let wants_masks = a.objective == LicObjective::Masked;
    if wants_masks != a.masks.is_some() {
        return Err(CliError::usage(if wants_masks {
            "--objective masked needs --masks"
        } else {
            "--masks only applies to --objective masked"
        }));
    }
    let objective = match a.objective {
        LicObjective::Human => Objective::Human { lambda: a.lambda },
        LicObjective::Masked => Objective::Masked { lambda: a.lambda },
        LicObjective::Task => Objective::Task {
            lambda1: a.lambda,
            lambda2: a.lambda2.unwrap_or(1.0),
        },
    };
    let cfg = schedule_config(objective, a.alpha, &a.schedule);
    cfg.validate()?;
    let images = load_images(&a.data)?;
    let masks = match &a.masks {
        Some(dir) => Some(load_masks(dir, images.len())?),
        None => None,
    };
    let data = lic_dataset(images, masks)?;
    let (model, log) = train_lic(&data, &cfg, &LicConfig::default())?;
    let mut ck = model.to_checkpoint();
    ck.set_meta("lambda", a.lambda);
    if let Objective::Task { lambda2, .. } = objective {
        ck.set_meta("lambda2", lambda2);
    }
    finish_training(ck, &log, &cfg, &a.schedule)
}

pub fn train_nerv_cmd(a: &TrainNervArgs) -> CliResult<()> {
    let wants_masks = a.objective == NervObjective::SaNerv;
    if wants_masks != a.masks.is_some() {
        return Err(CliError::usage(if wants_masks {
            "--objective sa-nerv needs --masks"
        } else {
            "--masks only applies to --objective sa-nerv"
        }));
    }
    let objective = match a.objective {
        NervObjective::Nerv => Objective::Nerv { beta: a.beta },
        NervObjective::SaNerv => Objective::SaNerv { beta: a.beta },
    };
    let cfg = schedule_config(objective, a.alpha, &a.schedule);
    cfg.validate()?;
    let clip = load_clip(&a.data, a.masks.as_deref())?;
    let base = NervConfig::default();
    let up = 1 << base.block_channels.len();
    let nerv = NervConfig {
        h0: clip.height() / up,
        w0: clip.width() / up,
        ..base
    };
    let (model, log) = train_nerv(&clip, &cfg, &nerv)?;
    let mut ck = model.to_checkpoint();
    ck.set_meta("beta", a.beta);
    finish_training(ck, &log, &cfg, &a.schedule)
}

pub fn load_lic(path: &Path) -> CliResult<(LicModel, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != ModelKind::Lic {
        return Err(CliError::usage(format!(
            "{} holds a {:?} model, the codec needs a Lic checkpoint",
            path.display(),
            ck.kind
        )));
    }
    Ok((LicModel::from_checkpoint(&ck)?, ck))
}

/// Payload bits per pixel of the original image.
pub fn stream_bpp(bs: &Bitstream) -> CliResult<f64> {
    Ok(bpp(bs.payload.len(), bs.image_width as usize, bs.image_height as usize)?)
}

pub fn encode(a: &EncodeArgs) -> CliResult<()> {
    let (model, _) = load_lic(&a.ckpt)?;
    let x = read_ppm(&a.input)?;
    let bs = encode_bitstream(&model, &x)?;
    bs.write(&a.out)?;
    println!("bpp={}", stream_bpp(&bs)?);
    Ok(())
}

pub fn decode(a: &DecodeArgs) -> CliResult<()> {
    let (model, _) = load_lic(&a.ckpt)?;
    let bs = Bitstream::from_bytes(&read_file(&a.input)?)?;
    let recon = decode_bitstream(&model, &bs)?;
    let reference = match &a.reference {
        Some(p) => Some(read_ppm(p)?),
        None => None,
    };
    let quality = match &reference {
        Some(r) => Some(psnr(mse(r, &recon, None)?, 1.0)?),
        None => None,
    };
    write_ppm(&a.out, &recon)?;
    if let Some(q) = quality {
        println!("psnr={q}");
    }
    Ok(())
}
