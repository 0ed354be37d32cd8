//! Frame-index to frame decoder with sinusoidal positional encoding, and the
//! plain and edge-masked video fitting losses.

use std::path::Path;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::imageio::{read_file, read_ppm};
use crate::maskgen::BinaryMask;
use crate::metrics::ssim_node;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::trainer::init::{conv_params, linear_params};

#[derive(Clone, Debug, PartialEq)]
pub struct NervConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub pe_base: f64,
    pub pe_pairs: usize,
    pub stem_hidden: usize,
    /// Channels and spatial size of the grid the stem reshapes into.
    pub c0: usize,
    pub h0: usize,
    pub w0: usize,
    /// Output channels of each upsample block; each block doubles H and W.
    pub block_channels: Vec<usize>,
    pub slope: f64,
}

impl Default for NervConfig {
    fn default() -> Self {
        NervConfig {
            frames: 8,
            height: 64,
            width: 64,
            pe_base: 1.25,
            pe_pairs: 40,
            stem_hidden: 256,
            c0: 32,
            h0: 8,
            w0: 8,
            block_channels: vec![32, 16, 16],
            slope: 0.2,
        }
    }
}

impl NervConfig {
    pub fn validate(&self) -> Result<()> {
        let up = 1usize << self.block_channels.len();
        if self.h0 * up != self.height || self.w0 * up != self.width {
            return Err(Error::contract(format!(
                "grid {}x{} upsampled x{up} gives {}x{}, frames are {}x{}",
                self.w0,
                self.h0,
                self.w0 * up,
                self.h0 * up,
                self.width,
                self.height
            )));
        }
        if self.frames == 0 || self.pe_pairs == 0 || self.pe_base <= 1.0 {
            return Err(Error::contract("need frames >= 1, pe_pairs >= 1 and pe_base > 1"));
        }
        if self.stem_hidden == 0 || self.c0 == 0 || self.block_channels.contains(&0) {
            return Err(Error::contract("layer widths must be positive"));
        }
        Ok(())
    }
}

/// `[sin(b⁰πτ), cos(b⁰πτ), …, sin(b^{L−1}πτ), cos(b^{L−1}πτ)]` with `τ = t/T`.
pub fn positional_encode(t: usize, frames: usize, base: f64, pairs: usize) -> Result<Vec<f64>> {
    if t >= frames {
        return Err(Error::contract(format!(
            "frame index {t} out of range for {frames} frames"
        )));
    }
    if base <= 1.0 || pairs == 0 {
        return Err(Error::contract("need base > 1 and at least one pair"));
    }
    let tau = t as f64 / frames as f64;
    let mut out = Vec::with_capacity(2 * pairs);
    for i in 0..pairs {
        let arg = base.powi(i as i32) * std::f64::consts::PI * tau;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NervModel {
    pub config: NervConfig,
    /// `(weight [O, I], bias [O])` for the two affine stem layers.
    pub stem: Vec<(Tensor, Tensor)>,
    /// `(weight [4·C_out, C_in, 3, 3], bias)` per upsample block.
    pub blocks: Vec<(Tensor, Tensor)>,
    pub head: (Tensor, Tensor),
}

#[derive(Clone, Debug)]
pub struct BoundNerv {
    stem: Vec<(NodeId, NodeId)>,
    blocks: Vec<(NodeId, NodeId)>,
    head: (NodeId, NodeId),
    config: NervConfig,
}

impl NervModel {
    pub fn init(config: NervConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(seed, &[0x4E5E]);
        let grid = config.c0 * config.h0 * config.w0;
        let stem = vec![
            linear_params(config.stem_hidden, 2 * config.pe_pairs, &mut rng),
            linear_params(grid, config.stem_hidden, &mut rng),
        ];
        let mut c_in = config.c0;
        let mut blocks = Vec::new();
        for &c_out in &config.block_channels {
            blocks.push(conv_params(4 * c_out, c_in, 3, &mut rng));
            c_in = c_out;
        }
        let head = conv_params(3, c_in, 3, &mut rng);
        Ok(NervModel {
            config,
            stem,
            blocks,
            head,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (w, b) in self.stem.iter().chain(&self.blocks).chain([&self.head]) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (w, b) in self
            .stem
            .iter_mut()
            .chain(self.blocks.iter_mut())
            .chain([&mut self.head])
        {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.stem.len() {
            out.push(format!("stem.{i}.weight"));
            out.push(format!("stem.{i}.bias"));
        }
        for i in 0..self.blocks.len() {
            out.push(format!("block.{i}.weight"));
            out.push(format!("block.{i}.bias"));
        }
        out.push("head.weight".into());
        out.push("head.bias".into());
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundNerv {
        let ids: Vec<NodeId> = self
            .params()
            .into_iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        self.bind_nodes(&ids).expect("one node per parameter")
    }

    /// Uses existing nodes as the parameters, one per [`Self::params`] entry
    /// in the same order.
    pub fn bind_nodes(&self, ids: &[NodeId]) -> Result<BoundNerv> {
        let n = self.params().len();
        if ids.len() != n {
            return Err(Error::contract(format!("NeRV model has {n} parameters, got {} nodes", ids.len())));
        }
        let pair = |i: usize| (ids[2 * i], ids[2 * i + 1]);
        let ns = self.stem.len();
        let nb = self.blocks.len();
        Ok(BoundNerv {
            stem: (0..ns).map(pair).collect(),
            blocks: (ns..ns + nb).map(pair).collect(),
            head: pair(ns + nb),
            config: self.config.clone(),
        })
    }

    /// Decoded `[3, H, W]` frame `t`.
    pub fn forward(&self, t: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let out = b.forward(&mut g, t)?;
        let c = &self.config;
        g.value(out).reshape(&[3, c.height, c.width])
    }
}

impl BoundNerv {
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &(w, b) in self.stem.iter().chain(&self.blocks).chain([&self.head]) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Frame `t` as a `[1, 3, H, W]` node.
    pub fn forward(&self, g: &mut Graph, t: usize) -> Result<NodeId> {
        let c = &self.config;
        let pe = positional_encode(t, c.frames, c.pe_base, c.pe_pairs)?;
        let mut h = g.constant(Tensor::new(vec![1, pe.len()], pe)?);
        for &(w, b) in &self.stem {
            h = g.linear(h, w, Some(b))?;
            h = g.leaky_relu(h, c.slope);
        }
        h = g.reshape(h, &[1, c.c0, c.h0, c.w0])?;
        for &(w, b) in &self.blocks {
            h = g.conv2d(h, w, Some(b), 1, 1)?;
            h = g.pixel_shuffle(h, 2)?;
            h = g.leaky_relu(h, c.slope);
        }
        h = g.conv2d(h, self.head.0, Some(self.head.1), 1, 1)?;
        Ok(g.sigmoid(h))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<Tensor>,
    masks: Option<Vec<BinaryMask>>,
}

impl VideoClip {
    pub fn new(frames: Vec<Tensor>, masks: Option<Vec<BinaryMask>>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::contract("a clip needs at least one frame"))?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::contract(format!("frames must be [3,H,W], got {shape:?}")));
        }
        for (t, f) in frames.iter().enumerate() {
            if f.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "frame {t} is {:?}, frame 0 is {shape:?}",
                    f.shape()
                )));
            }
        }
        if let Some(m) = &masks {
            if m.len() != frames.len() {
                return Err(Error::contract(format!(
                    "{} masks for {} frames",
                    m.len(),
                    frames.len()
                )));
            }
            for (t, mask) in m.iter().enumerate() {
                if mask.width() != shape[2] || mask.height() != shape[1] {
                    return Err(Error::contract(format!("mask {t} dims differ from the frames")));
                }
            }
        }
        Ok(VideoClip { frames, masks })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn masks(&self) -> Option<&[BinaryMask]> {
        self.masks.as_deref()
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[2]
    }

    pub fn with_masks(self, masks: Vec<BinaryMask>) -> Result<Self> {
        VideoClip::new(self.frames, Some(masks))
    }

    fn mask(&self, t: usize) -> Result<&BinaryMask> {
        self.masks
            .as_ref()
            .and_then(|m| m.get(t))
            .ok_or_else(|| Error::contract(format!("frame {t} has no mask")))
    }
}

/// Reads `frame_00000.ppm`, `frame_00001.ppm`, … from `dir` until the first
/// gap, and the same-numbered `.pgm` masks from `mask_dir` when given.
pub fn load_clip(dir: &Path, mask_dir: Option<&Path>) -> Result<VideoClip> {
    let mut frames = Vec::new();
    loop {
        let p = dir.join(format!("frame_{:05}.ppm", frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(read_ppm(&p)?);
    }
    if frames.is_empty() {
        return Err(Error::contract(format!(
            "no frame_00000.ppm in {}",
            dir.display()
        )));
    }
    let masks = match mask_dir {
        None => None,
        Some(md) => Some(
            (0..frames.len())
                .map(|t| BinaryMask::from_pgm(&read_file(&md.join(format!("frame_{t:05}.pgm")))?))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    VideoClip::new(frames, masks)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::contract(format!("beta must be in [0, 1], got {beta}")));
    }
    Ok(())
}

/// `β·mae(x, x̂) + (1 − β)·(1 − ssim(x, x̂))` for two `[1, 3, H, W]` nodes.
fn fit_term(g: &mut Graph, x: NodeId, xh: NodeId, beta: f64) -> Result<NodeId> {
    let d = g.sub(x, xh)?;
    let a = g.abs(d);
    let mae = g.mean(a);
    let s = ssim_node(g, x, xh)?;
    let neg = g.scale(s, -1.0);
    let dissim = g.add_scalar(neg, 1.0);
    let l = g.scale(mae, beta);
    let r = g.scale(dissim, 1.0 - beta);
    g.add(l, r)
}

/// Per-frame loss nodes.
#[derive(Clone, Copy, Debug)]
pub struct FrameLoss {
    pub total: NodeId,
    /// The unmasked term alone.
    pub plain: NodeId,
    pub recon: NodeId,
}

/// Loss of frame `t`; with a mask the masked analogue is added on top of the
/// plain term.
pub fn frame_loss(
    g: &mut Graph,
    b: &BoundNerv,
    clip: &VideoClip,
    t: usize,
    beta: f64,
    masked: bool,
) -> Result<FrameLoss> {
    check_beta(beta)?;
    let target = &clip.frames[t];
    let recon = b.forward(g, t)?;
    let shape = g.shape(recon).to_vec();
    if target.shape() != &shape[1..] {
        return Err(Error::Shape {
            op: "nerv frame",
            lhs: target.shape().to_vec(),
            rhs: shape,
        });
    }
    let x = g.constant(target.reshape(&shape)?);
    let plain = fit_term(g, x, recon, beta)?;
    let total = if masked {
        let m = g.constant(clip.mask(t)?.to_tensor());
        let xm = g.mask_mul(x, m)?;
        let rm = g.mask_mul(recon, m)?;
        let extra = fit_term(g, xm, rm, beta)?;
        g.add(plain, extra)?
    } else {
        plain
    };
    Ok(FrameLoss { total, plain, recon })
}

fn clip_loss(g: &mut Graph, b: &BoundNerv, clip: &VideoClip, beta: f64, masked: bool) -> Result<NodeId> {
    if masked {
        for t in 0..clip.len() {
            clip.mask(t)?;
        }
    }
    let mut acc: Option<NodeId> = None;
    for t in 0..clip.len() {
        let f = frame_loss(g, b, clip, t, beta, masked)?.total;
        acc = Some(match acc {
            None => f,
            Some(a) => g.add(a, f)?,
        });
    }
    let sum = acc.expect("clip has frames");
    Ok(g.scale(sum, 1.0 / clip.len() as f64))
}

/// `(1/T) Σₜ [β·mae + (1 − β)(1 − ssim)]`.
pub fn loss_nerv(g: &mut Graph, b: &BoundNerv, clip: &VideoClip, beta: f64) -> Result<NodeId> {
    clip_loss(g, b, clip, beta, false)
}

/// The plain loss plus the same expression on `x ⊙ m` and `x̂ ⊙ m`.
pub fn loss_sa_nerv(g: &mut Graph, b: &BoundNerv, clip: &VideoClip, beta: f64) -> Result<NodeId> {
    clip_loss(g, b, clip, beta, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NervConfig {
        NervConfig {
            frames: 2,
            height: 16,
            width: 16,
            pe_pairs: 4,
            stem_hidden: 8,
            c0: 4,
            h0: 4,
            w0: 4,
            block_channels: vec![4, 3],
            ..Default::default()
        }
    }

    #[test]
    fn encoding_at_zero() {
        let pe = positional_encode(0, 8, 1.25, 40).unwrap();
        assert_eq!(pe.len(), 80);
        for pair in pe.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        assert!(positional_encode(8, 8, 1.25, 40).is_err());
    }

    #[test]
    fn default_forward_shape_and_purity() {
        let m = NervModel::init(NervConfig::default(), 1).unwrap();
        let a = m.forward(3).unwrap();
        assert_eq!(a.shape(), &[3, 64, 64]);
        assert!(a.bit_eq(&m.forward(3).unwrap()));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn misconfigured_dims_fail_at_init() {
        let cfg = NervConfig {
            height: 60,
            ..Default::default()
        };
        assert!(matches!(NervModel::init(cfg, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_stem_gives_constant_channels() {
        let mut m = NervModel::init(tiny(), 2).unwrap();
        for (w, b) in &mut m.stem {
            *w = Tensor::zeros(w.shape());
            *b = Tensor::zeros(b.shape());
        }
        let f = m.forward(1).unwrap();
        for c in 0..3 {
            let plane = &f.data()[c * 256..(c + 1) * 256];
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }

    fn clip_from(m: &NervModel, masks: Option<Vec<BinaryMask>>) -> VideoClip {
        let frames = (0..m.config.frames).map(|t| m.forward(t).unwrap()).collect();
        VideoClip::new(frames, masks).unwrap()
    }

    fn eval(m: &NervModel, clip: &VideoClip, beta: f64, masked: bool) -> f64 {
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let l = if masked {
            loss_sa_nerv(&mut g, &b, clip, beta).unwrap()
        } else {
            loss_nerv(&mut g, &b, clip, beta).unwrap()
        };
        g.value(l).item()
    }

    #[test]
    fn perfect_fit_is_zero() {
        let m = NervModel::init(tiny(), 3).unwrap();
        let masks = vec![BinaryMask::ones(16, 16), BinaryMask::zeros(16, 16)];
        let clip = clip_from(&m, Some(masks));
        assert_eq!(eval(&m, &clip, 0.7, false), 0.0);
        assert_eq!(eval(&m, &clip, 0.7, true), 0.0);
    }

    #[test]
    fn mask_reductions() {
        let m = NervModel::init(tiny(), 4).unwrap();
        let frames = vec![Tensor::full(&[3, 16, 16], 0.2), Tensor::full(&[3, 16, 16], 0.9)];
        let ones = VideoClip::new(frames.clone(), Some(vec![BinaryMask::ones(16, 16); 2])).unwrap();
        let zeros = VideoClip::new(frames, Some(vec![BinaryMask::zeros(16, 16); 2])).unwrap();
        let plain = eval(&m, &ones, 0.7, false);
        assert_eq!(eval(&m, &ones, 0.7, true), 2.0 * plain);
        assert_eq!(eval(&m, &zeros, 0.7, true), plain);
    }

    #[test]
    fn constant_error_mae() {
        let mut m = NervModel::init(tiny(), 5).unwrap();
        // push the head far negative so the sigmoid saturates to 0
        m.head.0 = Tensor::zeros(m.head.0.shape());
        m.head.1 = Tensor::full(&[3], -800.0);
        let clip = VideoClip::new(vec![Tensor::full(&[3, 16, 16], 1.0); 2], None).unwrap();
        assert_eq!(eval(&m, &clip, 1.0, false), 1.0);
    }

    #[test]
    fn missing_mask_names_frame() {
        let m = NervModel::init(tiny(), 6).unwrap();
        let clip = clip_from(&m, None);
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let err = loss_sa_nerv(&mut g, &b, &clip, 0.7).unwrap_err();
        assert!(err.to_string().contains("frame 0"));
    }
}
