//! `eval` and `rd-curve`. Both write one CSV row per model per image with
//! the columns `alpha,lambda,bpp,mse,masked_mse,psnr,masked_psnr,ssim`, in
//! model order then image order. `bpp` counts payload bytes of the actual
//! bitstream; the reconstruction is decoded from that bitstream. The masked
//! columns are empty when no alpha is known.

use icm_core::codec::{decode_bitstream, encode_bitstream, LicConfig, LicModel};
use icm_core::imageio::{read_ppm, write_atomic};
use icm_core::maskgen::{edge_mask, BinaryMask, CannyParams, EdgeMode};
use icm_core::metrics::{MetricReport, REPORT_CSV_HEADER};
use icm_core::trainer::{train_lic, Objective, TrainConfig};

use crate::args::{EvalArgs, EvalOutput, RdCurveArgs};
use crate::commands::{lic_dataset, load_lic, stream_bpp};
use crate::dataset::*;
use crate::error::{CliError, CliResult};
use crate::svg::{scatter, Series};

/// Evaluation masks: region-union boundaries with the default dilation.
pub fn eval_mask(data: &std::path::Path, i: usize, alpha: f64) -> CliResult<BinaryMask> {
    let seg = load_scene_segmentation(data, i)?;
    Ok(edge_mask(&seg, alpha, &CannyParams::default(), EdgeMode::RegionUnion)?.mask)
}

struct Evaluated {
    label: String,
    alpha: Option<f64>,
    lambda: Option<f64>,
    reports: Vec<MetricReport>,
}

fn evaluate(model: &LicModel, data: &std::path::Path, alpha: Option<f64>) -> CliResult<Vec<MetricReport>> {
    let n = scene_count(data);
    if n == 0 {
        return Err(CliError::usage(format!("no image_0000.ppm in {}", data.display())));
    }
    (0..n)
        .map(|i| {
            let x = read_ppm(&image_path(data, i))?;
            let bs = encode_bitstream(model, &x)?;
            let recon = decode_bitstream(model, &bs)?;
            let mask = alpha.map(|a| eval_mask(data, i, a)).transpose()?;
            let mut r = MetricReport::measure(&x, &recon, mask.as_ref())?;
            r.bpp = Some(stream_bpp(&bs)?);
            r.bitstream_bytes = Some(bs.file_len());
            Ok(r)
        })
        .collect()
}

fn write_outputs(out: &EvalOutput, models: &[Evaluated]) -> CliResult<()> {
    let mut csv = format!("{REPORT_CSV_HEADER}\n");
    for m in models {
        for r in &m.reports {
            csv.push_str(&r.csv_row(m.alpha, m.lambda));
            csv.push('\n');
        }
    }
    write_atomic(&out.out, csv.as_bytes())?;
    if let Some(svg) = &out.svg {
        let series: Vec<Series> = models
            .iter()
            .map(|m| Series {
                label: m.label.clone(),
                points: m
                    .reports
                    .iter()
                    .filter_map(|r| Some((r.bpp?, r.masked_psnr_db?)))
                    .collect(),
            })
            .collect();
        write_atomic(svg, scatter(&series, "bpp", "masked PSNR (dB)").as_bytes())?;
    }
    let rows: usize = models.iter().map(|m| m.reports.len()).sum();
    println!("rows={rows}");
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let mut models = Vec::new();
    for path in &a.ckpt_list {
        let (model, ck) = load_lic(path)?;
        let alpha = a.alpha.or_else(|| ck.meta("alpha"));
        models.push(Evaluated {
            label: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            alpha,
            lambda: ck.meta("lambda"),
            reports: evaluate(&model, &a.output.data, alpha)?,
        });
    }
    write_outputs(&a.output, &models)
}

/// Trains on every scene of `--data` with masks built at each alpha, then
/// evaluates on the same scenes with masks at that alpha.
pub fn rd_curve(a: &RdCurveArgs) -> CliResult<()> {
    let data = &a.output.data;
    let images = load_images(data)?;
    if let Some(dir) = &a.ckpt_dir {
        create_dir(dir)?;
    }
    let mut models = Vec::new();
    for &alpha in &a.alpha_list {
        let masks = (0..images.len())
            .map(|i| eval_mask(data, i, alpha))
            .collect::<CliResult<Vec<_>>>()?;
        let set = lic_dataset(images.clone(), Some(masks))?;
        let cfg = TrainConfig {
            alpha: Some(alpha),
            ..TrainConfig::new(Objective::Masked { lambda: a.lambda }, a.epochs, a.seed)
        };
        let (model, _) = train_lic(&set, &cfg, &LicConfig::default())?;
        if let Some(dir) = &a.ckpt_dir {
            let mut ck = model.to_checkpoint();
            ck.set_meta("lambda", a.lambda);
            ck.set_meta("alpha", alpha);
            ck.save(&dir.join(format!("alpha_{alpha}.ckpt")))?;
        }
        models.push(Evaluated {
            label: format!("alpha={alpha}"),
            alpha: Some(alpha),
            lambda: Some(a.lambda),
            reports: evaluate(&model, data, Some(alpha))?,
        });
    }
    write_outputs(&a.output, &models)
}
