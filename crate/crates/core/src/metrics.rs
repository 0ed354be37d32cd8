//! Distortion, quality, and rate measurements.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::maskgen::BinaryMask;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn plane_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::contract(format!(
            "expected an [H,W], [C,H,W] or [1,C,H,W] image, got {s:?}"
        ))),
    }
}

fn check_mask(mask: &BinaryMask, h: usize, w: usize) -> Result<()> {
    if mask.width() != w || mask.height() != h {
        return Err(Error::Shape {
            op: "mask",
            lhs: vec![h, w],
            rhs: vec![mask.height(), mask.width()],
        });
    }
    Ok(())
}

/// Mean over all elements of `(x⊙m − y⊙m)²`; no mask means all ones.
pub fn mse(x: &Tensor, y: &Tensor, mask: Option<&BinaryMask>) -> Result<f64> {
    x.same_shape(y, "mse")?;
    let (_, h, w) = plane_dims(x)?;
    let plane = h * w;
    let total: f64 = match mask {
        None => x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum(),
        Some(m) => {
            check_mask(m, h, w)?;
            let mv = m.values();
            x.data()
                .iter()
                .zip(y.data())
                .enumerate()
                .map(|(i, (a, b))| {
                    let k = mv[i % plane] as f64;
                    let d = a * k - b * k;
                    d * d
                })
                .sum()
        }
    };
    Ok(total / x.numel() as f64)
}

/// `10·log₁₀(peak²/mse)`, `+∞` when `mse` is zero.
pub fn psnr(mse: f64, peak: f64) -> Result<f64> {
    if mse < 0.0 || mse.is_nan() {
        return Err(Error::contract(format!("mse must be >= 0, got {mse}")));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub(crate) fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Differentiable mean SSIM of two images of equal shape (`[H,W]`,
/// `[C,H,W]` or `[1,C,H,W]`): per channel over valid 11×11 Gaussian windows,
/// averaged over channels and positions.
pub fn ssim_node(g: &mut Graph, x: NodeId, y: NodeId) -> Result<NodeId> {
    g.value(x).same_shape(g.value(y), "ssim")?;
    let (c, h, w) = plane_dims(g.value(x))?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = ssim_taps();
    let col = g.constant(Tensor::new(vec![1, 1, SSIM_WINDOW, 1], taps.clone())?);
    let row = g.constant(Tensor::new(vec![1, 1, 1, SSIM_WINDOW], taps)?);
    let x = g.reshape(x, &[c, 1, h, w])?;
    let y = g.reshape(y, &[c, 1, h, w])?;
    let filt = |g: &mut Graph, v: NodeId| -> Result<NodeId> {
        let a = g.conv2d(v, col, None, 1, 0)?;
        g.conv2d(a, row, None, 1, 0)
    };
    let mu_x = filt(g, x)?;
    let mu_y = filt(g, y)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let e_xx = filt(g, xx)?;
    let e_yy = filt(g, yy)?;
    let e_xy = filt(g, xy)?;

    let mu_xy = g.mul(mu_x, mu_y)?;
    let mu_xx = g.mul(mu_x, mu_x)?;
    let mu_yy = g.mul(mu_y, mu_y)?;
    let var_x = g.sub(e_xx, mu_xx)?;
    let var_y = g.sub(e_yy, mu_yy)?;
    let cov = g.sub(e_xy, mu_xy)?;

    let l_num = g.scale(mu_xy, 2.0);
    let l_num = g.add_scalar(l_num, SSIM_C1);
    let c_num = g.scale(cov, 2.0);
    let c_num = g.add_scalar(c_num, SSIM_C2);
    let num = g.mul(l_num, c_num)?;
    let l_den = g.add(mu_xx, mu_yy)?;
    let l_den = g.add_scalar(l_den, SSIM_C1);
    let c_den = g.add(var_x, var_y)?;
    let c_den = g.add_scalar(c_den, SSIM_C2);
    let den = g.mul(l_den, c_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(y.clone());
    let s = ssim_node(&mut g, a, b)?;
    g.scalar(s, "ssim")
}

/// SSIM of the masked images `x⊙m` and `y⊙m`.
pub fn masked_ssim(x: &Tensor, y: &Tensor, mask: &BinaryMask) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(y.clone());
    let m = g.constant(mask.to_tensor());
    let am = g.mask_mul(a, m)?;
    let bm = g.mask_mul(b, m)?;
    let s = ssim_node(&mut g, am, bm)?;
    g.scalar(s, "masked ssim")
}

pub fn bpp(bytes: usize, width: usize, height: usize) -> Result<f64> {
    if width == 0 || height == 0 {
        return Err(Error::contract("bpp needs positive dimensions"));
    }
    Ok(bytes as f64 * 8.0 / (width * height) as f64)
}

/// Shannon entropy, in bits per symbol, of the empirical histogram.
pub fn empirical_entropy<T: Ord + Copy>(symbols: &[T]) -> Result<f64> {
    if symbols.is_empty() {
        return Err(Error::contract("empirical entropy of an empty sequence"));
    }
    let mut hist: BTreeMap<T, usize> = BTreeMap::new();
    for &s in symbols {
        *hist.entry(s).or_default() += 1;
    }
    let n = symbols.len() as f64;
    Ok(hist
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Per-image evaluation row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub mse: Option<f64>,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub masked_mse: Option<f64>,
    pub masked_psnr_db: Option<f64>,
    pub masked_ssim: Option<f64>,
    pub bpp: Option<f64>,
    pub bitstream_bytes: Option<usize>,
}

pub const REPORT_CSV_HEADER: &str = "alpha,lambda,bpp,mse,masked_mse,psnr,masked_psnr,ssim";

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_default()
}

impl MetricReport {
    /// Distortion and quality of `reconstruction` against `reference`, with
    /// in-mask variants when a mask is given.
    pub fn measure(
        reference: &Tensor,
        reconstruction: &Tensor,
        mask: Option<&BinaryMask>,
    ) -> Result<Self> {
        let m = mse(reference, reconstruction, None)?;
        let mut r = MetricReport {
            mse: Some(m),
            psnr_db: Some(psnr(m, 1.0)?),
            ssim: Some(ssim(reference, reconstruction)?),
            ..Default::default()
        };
        if let Some(mask) = mask {
            let mm = mse(reference, reconstruction, Some(mask))?;
            r.masked_mse = Some(mm);
            r.masked_psnr_db = Some(psnr(mm, 1.0)?);
            r.masked_ssim = Some(masked_ssim(reference, reconstruction, mask)?);
        }
        Ok(r)
    }

    /// One row in [`REPORT_CSV_HEADER`] order.
    pub fn csv_row(&self, alpha: Option<f64>, lambda: Option<f64>) -> String {
        [
            cell(alpha),
            cell(lambda),
            cell(self.bpp),
            cell(self.mse),
            cell(self.masked_mse),
            cell(self.psnr_db),
            cell(self.masked_psnr_db),
            cell(self.ssim),
        ]
        .join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| r.next_f64())
    }

    #[test]
    fn mse_cases() {
        let x = Tensor::full(&[3, 2, 2], 1.0);
        let z = Tensor::zeros(&[3, 2, 2]);
        assert_eq!(mse(&x, &x, None).unwrap(), 0.0);
        assert_eq!(mse(&x, &z, None).unwrap(), 1.0);
        let half = BinaryMask::from_values(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(mse(&x, &z, Some(&half)).unwrap(), 0.5);
        let ones = BinaryMask::ones(2, 2);
        let y = random(&[3, 2, 2], 9);
        assert_eq!(mse(&x, &y, Some(&ones)).unwrap(), mse(&x, &y, None).unwrap());
        assert!(mse(&x, &Tensor::zeros(&[3, 2, 3]), None).is_err());
    }

    #[test]
    fn psnr_cases() {
        assert!((psnr(0.01, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert!((psnr(1.0, 255.0).unwrap() - 48.130_803_608_679_11).abs() < 1e-9);
        assert_eq!(psnr(0.0, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(-1.0, 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = random(&[3, 16, 16], 1);
        let b = random(&[3, 16, 16], 2);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&a, &b).unwrap() < 1.0);
        assert!(ssim(&Tensor::zeros(&[3, 10, 16]), &Tensor::zeros(&[3, 10, 16])).is_err());
    }

    #[test]
    fn ssim_of_zero_images_is_one() {
        let z = Tensor::zeros(&[3, 12, 12]);
        assert_eq!(ssim(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn bpp_cases() {
        assert_eq!(bpp(1000, 100, 80).unwrap(), 1.0);
        assert_eq!(bpp(0, 10, 10).unwrap(), 0.0);
        assert!(bpp(2, 10, 10).unwrap() > bpp(1, 10, 10).unwrap());
        assert!(bpp(1, 0, 10).is_err());
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(empirical_entropy(&[5, 5, 5]).unwrap(), 0.0);
        assert_eq!(empirical_entropy(&[0, 1, 0, 1]).unwrap(), 1.0);
        let all: Vec<u8> = (0..=255).collect();
        assert!((empirical_entropy(&all).unwrap() - 8.0).abs() < 1e-12);
        assert!(empirical_entropy::<i32>(&[]).is_err());
    }

    #[test]
    fn csv_row_has_fixed_columns() {
        let r = MetricReport {
            bpp: Some(0.5),
            mse: Some(0.01),
            psnr_db: Some(20.0),
            ssim: Some(0.9),
            ..Default::default()
        };
        let row = r.csv_row(Some(0.93), Some(0.05));
        assert_eq!(row, "0.93,0.05,0.5,0.01,,20,,0.9");
        assert_eq!(row.split(',').count(), REPORT_CSV_HEADER.split(',').count());
    }
}
