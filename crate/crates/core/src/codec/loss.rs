use super::model::BoundLic;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::maskgen::BinaryMask;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::trainer::init::he_uniform;

/// Weight applied to `λ·mse` so that λ lives on the usual 8-bit scale while
/// images stay in `[0, 1]`.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(−½, ½)` noise drawn from a stream keyed by this seed.
    Train { noise_seed: u64 },
    /// `μ + round(y − μ)`; passes no gradient to the analysis transform.
    Test,
}

/// Seed of the noise stream for one item of one batch.
pub fn noise_seed(seed: u64, epoch: usize, batch: usize, item: usize) -> u64 {
    SplitMix64::derive(seed, &[epoch as u64, batch as u64, item as u64]).next_u64()
}

fn channel_plane(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h * w)),
        [_, c, h, w] => Ok((c, h * w)),
        ref s => Err(Error::contract(format!(
            "latent must be [C,h,w] or [N,C,h,w], got {s:?}"
        ))),
    }
}

/// Integer symbols `round(y − μ_c)`, unclamped.
pub fn latent_symbols(y: &Tensor, mean: &[f64]) -> Result<Vec<i64>> {
    let (c, plane) = channel_plane(y.shape())?;
    if mean.len() != c {
        return Err(Error::contract("mean length differs from latent channels"));
    }
    Ok(y.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[(i / plane) % c]).round() as i64)
        .collect())
}

/// `ŷ = s + μ_c` with the same layout as the latent the symbols came from.
pub fn dequantize(symbols: &[i64], shape: &[usize], mean: &[f64]) -> Result<Tensor> {
    let (c, plane) = channel_plane(shape)?;
    let data = symbols
        .iter()
        .enumerate()
        .map(|(i, &s)| s as f64 + mean[(i / plane) % c])
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn train_noise(shape: &[usize], noise_seed: u64) -> Tensor {
    let mut rng = SplitMix64::derive(noise_seed, &[]);
    Tensor::from_fn(shape, |_| rng.uniform(-0.5, 0.5))
}

/// Training relaxation (`y + u`) or test rounding (`μ + round(y − μ)`).
pub fn relax_quantize(y: &Tensor, mean: &[f64], mode: QuantMode) -> Result<Tensor> {
    match mode {
        QuantMode::Train { noise_seed } => {
            let mut out = train_noise(y.shape(), noise_seed);
            out.add_assign(y);
            Ok(out)
        }
        QuantMode::Test => dequantize(&latent_symbols(y, mean)?, y.shape(), mean),
    }
}

fn quantize_node(g: &mut Graph, b: &BoundLic, y: NodeId, mode: QuantMode) -> Result<NodeId> {
    match mode {
        QuantMode::Train { noise_seed } => {
            let u = g.constant(train_noise(g.shape(y), noise_seed));
            g.add(y, u)
        }
        QuantMode::Test => {
            let q = relax_quantize(g.value(y), g.value(b.mean).data(), mode)?;
            Ok(g.constant(q))
        }
    }
}

/// Nodes of one rate-distortion evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: NodeId,
    /// Estimated total bits of the relaxed latent.
    pub rate_bits: NodeId,
    /// Distortion before weighting (plain or masked mse).
    pub distortion: NodeId,
    /// Task term `M(x̂)` when present.
    pub task: Option<NodeId>,
    pub input: NodeId,
    pub recon: NodeId,
}

impl LossTerms {
    /// Fails with a numeric error naming the first non-finite term.
    pub fn check_finite(&self, g: &Graph) -> Result<()> {
        let mut terms = vec![("rate", self.rate_bits), ("distortion", self.distortion)];
        if let Some(t) = self.task {
            terms.push(("task", t));
        }
        terms.push(("total loss", self.total));
        for (name, id) in terms {
            let v = g.value(id).item();
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{name} term is {v}")));
            }
        }
        Ok(())
    }
}

fn as_batch(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [3, h, w] => x.reshape(&[1, 3, h, w]),
        [1, 3, _, _] => Ok(x.clone()),
        ref s => Err(Error::contract(format!(
            "expected a [3,H,W] image, got {s:?}"
        ))),
    }
}

struct Forward {
    input: NodeId,
    recon: NodeId,
    bits: NodeId,
    pixels: usize,
}

fn forward(g: &mut Graph, b: &BoundLic, x: &Tensor, mode: QuantMode) -> Result<Forward> {
    let xb = as_batch(x)?;
    let pixels = xb.shape()[2] * xb.shape()[3];
    let input = g.constant(xb);
    let y = b.analysis(g, input)?;
    let yq = quantize_node(g, b, y, mode)?;
    let bits = b.rate_bits(g, yq)?;
    let recon = b.synthesis(g, yq)?;
    Ok(Forward {
        input,
        recon,
        bits,
        pixels,
    })
}

fn mse_node(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

fn combine(g: &mut Graph, f: &Forward, lambda: f64, distortion: NodeId) -> Result<NodeId> {
    let rate = g.scale(f.bits, 1.0 / f.pixels as f64);
    let weighted = g.scale(distortion, lambda * DISTORTION_SCALE);
    g.add(rate, weighted)
}

fn check_lambda(name: &str, v: f64, strict: bool) -> Result<()> {
    let ok = v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
    if !ok {
        let rel = if strict { "> 0" } else { ">= 0" };
        return Err(Error::contract(format!("{name} must be {rel}, got {v}")));
    }
    Ok(())
}

/// `bpp(ỹ) + λ·255²·mse(x, x̂)`.
pub fn loss_human(
    g: &mut Graph,
    b: &BoundLic,
    x: &Tensor,
    lambda: f64,
    mode: QuantMode,
) -> Result<LossTerms> {
    check_lambda("lambda", lambda, true)?;
    let f = forward(g, b, x, mode)?;
    let distortion = mse_node(g, f.input, f.recon)?;
    let total = combine(g, &f, lambda, distortion)?;
    Ok(LossTerms {
        total,
        rate_bits: f.bits,
        distortion,
        task: None,
        input: f.input,
        recon: f.recon,
    })
}

/// `bpp(ỹ) + λ·255²·mse(x ⊙ m, x̂ ⊙ m)`, averaged over every pixel and
/// channel including masked-out zeros.
pub fn loss_masked(
    g: &mut Graph,
    b: &BoundLic,
    x: &Tensor,
    mask: &BinaryMask,
    lambda: f64,
    mode: QuantMode,
) -> Result<LossTerms> {
    check_lambda("lambda", lambda, true)?;
    let (h, w) = (x.shape()[x.rank() - 2], x.shape()[x.rank() - 1]);
    if mask.width() != w || mask.height() != h {
        return Err(Error::contract(format!(
            "mask is {}x{} but the image is {w}x{h}",
            mask.width(),
            mask.height()
        )));
    }
    let f = forward(g, b, x, mode)?;
    let m = g.constant(mask.to_tensor());
    let xm = g.mask_mul(f.input, m)?;
    let rm = g.mask_mul(f.recon, m)?;
    let distortion = mse_node(g, xm, rm)?;
    let total = combine(g, &f, lambda, distortion)?;
    Ok(LossTerms {
        total,
        rate_bits: f.bits,
        distortion,
        task: None,
        input: f.input,
        recon: f.recon,
    })
}

/// `bpp(ỹ) + λ₁·255²·mse(x, x̂) + λ₂·M(x̂)` for a scalar task functional `M`.
pub fn loss_tl(
    g: &mut Graph,
    b: &BoundLic,
    x: &Tensor,
    lambda1: f64,
    lambda2: f64,
    mode: QuantMode,
    task: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>,
) -> Result<LossTerms> {
    check_lambda("lambda1", lambda1, false)?;
    check_lambda("lambda2", lambda2, false)?;
    let f = forward(g, b, x, mode)?;
    let distortion = mse_node(g, f.input, f.recon)?;
    let m = task(g, f.recon)?;
    if !g.value(m).is_scalar() {
        return Err(Error::contract(format!(
            "task head must return a scalar, got {:?}",
            g.shape(m)
        )));
    }
    let rd = combine(g, &f, lambda1, distortion)?;
    let weighted = g.scale(m, lambda2);
    let total = g.add(rd, weighted)?;
    Ok(LossTerms {
        total,
        rate_bits: f.bits,
        distortion,
        task: Some(m),
        input: f.input,
        recon: f.recon,
    })
}

/// `M(x̂) = mean((K ∗ x̂ − c)²)` with a fixed seeded 3×3 kernel: a smooth
/// stand-in for a recognition network.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTaskHead {
    pub kernel: Tensor,
    pub target: f64,
}

impl QuadraticTaskHead {
    pub fn new(seed: u64) -> Self {
        let mut rng = SplitMix64::derive(seed, &[0x7A5C]);
        QuadraticTaskHead {
            kernel: he_uniform(&[1, 3, 3, 3], 27, &mut rng),
            target: 0.5,
        }
    }

    pub fn apply(&self, g: &mut Graph, recon: NodeId) -> Result<NodeId> {
        let k = g.constant(self.kernel.clone());
        let r = g.conv2d(recon, k, None, 1, 1)?;
        let d = g.add_scalar(r, -self.target);
        let sq = g.square(d);
        Ok(g.mean(sq))
    }
}

fn fold(i: isize, n: usize) -> usize {
    // mirror without repeating the edge sample: -1 -> 1, n -> n - 2
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    (if r < n as isize { r } else { period - r }) as usize
}

/// Smallest multiple of `m` that is at least `v`.
pub fn padded_len(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Reflect-pads a `[C, H, W]` image on the bottom and right up to multiples
/// of `multiple`.
pub fn reflect_pad(x: &Tensor, multiple: usize) -> Result<Tensor> {
    let [c, h, w] = *x.shape() else {
        return Err(Error::contract(format!(
            "reflect_pad expects [C,H,W], got {:?}",
            x.shape()
        )));
    };
    let (ph, pw) = (padded_len(h, multiple), padded_len(w, multiple));
    let d = x.data();
    Ok(Tensor::from_fn(&[c, ph, pw], |i| {
        let (ci, yi, xi) = (i / (ph * pw), (i / pw) % ph, i % pw);
        d[(ci * h + fold(yi as isize, h)) * w + fold(xi as isize, w)]
    }))
}

/// Top-left `[C, h, w]` window of a `[C, H, W]` or `[1, C, H, W]` tensor.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, sh, sw) = match *x.shape() {
        [c, sh, sw] | [1, c, sh, sw] => (c, sh, sw),
        ref s => return Err(Error::contract(format!("crop expects an image, got {s:?}"))),
    };
    if h > sh || w > sw || h == 0 || w == 0 {
        return Err(Error::contract(format!(
            "cannot crop {sw}x{sh} to {w}x{h}"
        )));
    }
    let d = x.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ci, yi, xi) = (i / (h * w), (i / w) % h, i % w);
        d[(ci * sh + yi) * sw + xi]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::model::{LicConfig, LicModel};

    fn small() -> LicModel {
        LicModel::init(
            LicConfig {
                channels: vec![3, 4, 6],
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(&[3, h, w], |_| r.next_f64())
    }

    #[test]
    fn test_rounding_cases() {
        let mean = [0.3];
        let y = Tensor::new(vec![1, 1, 2], vec![0.3, 0.7]).unwrap();
        let q = relax_quantize(&y, &mean, QuantMode::Test).unwrap();
        assert_eq!(q.data(), &[0.3, 0.3]);
    }

    #[test]
    fn train_noise_is_bounded_and_seeded() {
        let y = Tensor::from_fn(&[2, 4, 4], |i| i as f64 * 0.1);
        let a = relax_quantize(&y, &[0.0, 0.0], QuantMode::Train { noise_seed: 9 }).unwrap();
        let b = relax_quantize(&y, &[0.0, 0.0], QuantMode::Train { noise_seed: 9 }).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.max_abs_diff(&y) <= 0.5);
        assert!(a.max_abs_diff(&y) > 0.0);
    }

    #[test]
    fn all_ones_mask_matches_human_loss() {
        let m = small();
        let x = image(1, 8, 8);
        let mode = QuantMode::Train { noise_seed: 4 };
        let mut g1 = Graph::new();
        let b1 = m.bind(&mut g1, true);
        let h = loss_human(&mut g1, &b1, &x, 0.05, mode).unwrap();
        let mut g2 = Graph::new();
        let b2 = m.bind(&mut g2, true);
        let k = loss_masked(&mut g2, &b2, &x, &BinaryMask::ones(8, 8), 0.05, mode).unwrap();
        assert_eq!(g1.value(h.total).item().to_bits(), g2.value(k.total).item().to_bits());
    }

    #[test]
    fn zero_mask_leaves_rate_only() {
        let m = small();
        let x = image(2, 8, 8);
        let mut g = Graph::new();
        let b = m.bind(&mut g, true);
        let t = loss_masked(&mut g, &b, &x, &BinaryMask::zeros(8, 8), 0.05, QuantMode::Test).unwrap();
        let bits = g.value(t.rate_bits).item();
        assert_eq!(g.value(t.total).item(), bits / 64.0);
    }

    #[test]
    fn lambda_scales_distortion_linearly() {
        let m = small();
        let x = image(3, 8, 8);
        let at = |lambda: f64| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false);
            let t = loss_human(&mut g, &b, &x, lambda, QuantMode::Test).unwrap();
            (g.value(t.total).item(), g.value(t.rate_bits).item() / 64.0)
        };
        let (l1, r) = at(0.05);
        let (l2, _) = at(0.1);
        assert!(((l2 - r) - 2.0 * (l1 - r)).abs() < 1e-9 * l2.abs());
    }

    #[test]
    fn zero_task_weight_matches_human() {
        let m = small();
        let x = image(4, 8, 8);
        let head = QuadraticTaskHead::new(1);
        let mut g1 = Graph::new();
        let b1 = m.bind(&mut g1, false);
        let h = loss_human(&mut g1, &b1, &x, 0.05, QuantMode::Test).unwrap();
        let mut g2 = Graph::new();
        let b2 = m.bind(&mut g2, false);
        let t = loss_tl(&mut g2, &b2, &x, 0.05, 0.0, QuantMode::Test, &|g, r| head.apply(g, r)).unwrap();
        assert_eq!(g1.value(h.total).item(), g2.value(t.total).item());
    }

    #[test]
    fn non_scalar_task_is_rejected() {
        let m = small();
        let x = image(5, 8, 8);
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let r = loss_tl(&mut g, &b, &x, 0.05, 1.0, QuantMode::Test, &|_, r| Ok(r));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn mask_dims_are_checked() {
        let m = small();
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let r = loss_masked(&mut g, &b, &image(6, 8, 8), &BinaryMask::ones(4, 8), 0.05, QuantMode::Test);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn reflect_pad_then_crop_is_identity() {
        let x = image(7, 5, 11);
        let p = reflect_pad(&x, 8).unwrap();
        assert_eq!(p.shape(), &[3, 8, 16]);
        assert!(crop(&p, 5, 11).unwrap().bit_eq(&x));
        // row 5 mirrors row 3
        assert_eq!(p.data()[5 * 16], x.data()[3 * 11]);
    }

    #[test]
    fn fold_handles_long_pads() {
        assert_eq!((0..7).map(|i| fold(i, 3)).collect::<Vec<_>>(), vec![0, 1, 2, 1, 0, 1, 2]);
        assert_eq!(fold(5, 1), 0);
    }
}
