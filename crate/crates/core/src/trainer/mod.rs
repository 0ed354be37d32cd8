//! Seeded initialization, Adam, the shared epoch/batch loop for both model
//! families, training logs and checkpoints.

mod adam;
mod checkpoint;
pub mod init;

use std::fmt::Write as _;
use std::time::Instant;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{Checkpoint, ModelKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::codec::{loss_human, loss_masked, loss_tl, noise_seed, LicConfig, LicModel, QuadraticTaskHead, QuantMode};
use crate::error::{Error, Result};
use crate::maskgen::BinaryMask;
use crate::nerv::{frame_loss, NervConfig, NervModel, VideoClip};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 0.7;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_BATCH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Human { lambda: f64 },
    Masked { lambda: f64 },
    Task { lambda1: f64, lambda2: f64 },
    Nerv { beta: f64 },
    SaNerv { beta: f64 },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Human { .. } => "human",
            Objective::Masked { .. } => "masked",
            Objective::Task { .. } => "task",
            Objective::Nerv { .. } => "nerv",
            Objective::SaNerv { .. } => "sa-nerv",
        }
    }

    fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::contract(format!("{name} must be > 0, got {v}")))
            }
        };
        match *self {
            Objective::Human { lambda } | Objective::Masked { lambda } => pos("lambda", lambda),
            Objective::Task { lambda1, lambda2 } => {
                pos("lambda1", lambda1)?;
                pos("lambda2", lambda2)
            }
            Objective::Nerv { beta } | Objective::SaNerv { beta } => {
                if (0.0..=1.0).contains(&beta) {
                    Ok(())
                } else {
                    Err(Error::contract(format!("beta must be in [0, 1], got {beta}")))
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Confidence threshold the masks were built with; informational.
    pub alpha: Option<f64>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Command line recorded as a comment row in the log.
    pub command: Option<String>,
}

impl TrainConfig {
    pub fn new(objective: Objective, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            objective,
            alpha: None,
            lr: DEFAULT_LR,
            epochs,
            batch_size: DEFAULT_BATCH,
            seed,
            command: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if let Some(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::contract(format!("alpha must be in [0, 1], got {a}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's items.
    pub loss: f64,
    pub rate_bits: f64,
    pub distortion: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub command: Option<String>,
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,loss,rate_bits,distortion,seconds";

impl TrainLog {
    fn render(&self, with_time: bool) -> String {
        let mut s = String::new();
        if let Some(c) = &self.command {
            let _ = writeln!(s, "# {}", c.replace('\n', " "));
        }
        if with_time {
            s.push_str(TRAIN_LOG_HEADER);
        } else {
            s.push_str("epoch,loss,rate_bits,distortion");
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{},{},{},{}", r.epoch, r.loss, r.rate_bits, r.distortion);
            if with_time {
                let _ = write!(s, ",{:.3}", r.seconds);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        self.render(true)
    }

    /// The CSV without the wall-clock column: a pure function of the run.
    pub fn deterministic_csv(&self) -> String {
        self.render(false)
    }

    /// Trailing moving average of the loss over `window` epochs.
    pub fn smoothed_loss(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let l: Vec<f64> = self.records.iter().map(|r| r.loss).collect();
        (0..l.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                l[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }
}

/// Images, with one mask per image when the objective needs them.
#[derive(Clone, Debug, PartialEq)]
pub struct LicDataset {
    pub images: Vec<Tensor>,
    pub masks: Option<Vec<BinaryMask>>,
}

struct ItemResult {
    loss: f64,
    rate_bits: f64,
    distortion: f64,
    grads: Vec<Tensor>,
}

fn collect_grads(g: &Graph, grads: &mut Gradients, ids: &[NodeId]) -> Vec<Tensor> {
    ids.iter()
        .map(|&id| grads.take(id).unwrap_or_else(|| Tensor::zeros(g.shape(id))))
        .collect()
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::derive(seed, &[0x0BDE, epoch as u64]);
    for i in (1..n).rev() {
        let j = rng.range_inclusive(0, i as u64) as usize;
        order.swap(i, j);
    }
    order
}

/// Shared loop: per epoch a seeded shuffle, per batch the mean of item
/// gradients summed in item order, then one Adam step.
fn optimize<M>(
    model: &mut M,
    items: usize,
    cfg: &TrainConfig,
    params: fn(&M) -> Vec<&Tensor>,
    params_mut: fn(&mut M) -> Vec<&mut Tensor>,
    mut item: impl FnMut(&M, usize, usize, usize, usize) -> Result<ItemResult>,
) -> Result<TrainLog> {
    let mut state = AdamState::new(&params(model));
    let mut log = TrainLog {
        command: cfg.command.clone(),
        records: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(cfg.seed, epoch, items);
        let (mut loss, mut rate, mut dist) = (0.0, 0.0, 0.0);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut sum: Option<Vec<Tensor>> = None;
            for (slot, &idx) in chunk.iter().enumerate() {
                let r = item(model, epoch, batch, slot, idx).map_err(|e| match e {
                    Error::Numeric(m) => {
                        Error::Numeric(format!("epoch {epoch}, batch {batch}, item {idx}: {m}"))
                    }
                    e => e,
                })?;
                loss += r.loss;
                rate += r.rate_bits;
                dist += r.distortion;
                match &mut sum {
                    None => sum = Some(r.grads),
                    Some(s) => {
                        for (a, b) in s.iter_mut().zip(&r.grads) {
                            a.add_assign(b);
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let grads: Vec<Tensor> = sum
                .expect("non-empty batch")
                .into_iter()
                .map(|t| t.map(|v| v * inv))
                .collect();
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("epoch {epoch}, batch {batch}: gradient")));
            }
            adam_step(&mut params_mut(model), &grads, &mut state, cfg.lr)?;
        }
        let n = items as f64;
        log.records.push(EpochRecord {
            epoch,
            loss: loss / n,
            rate_bits: rate / n,
            distortion: dist / n,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

/// Trains a freshly initialized codec.
pub fn train_lic(data: &LicDataset, cfg: &TrainConfig, lic: &LicConfig) -> Result<(LicModel, TrainLog)> {
    let model = LicModel::init(lic.clone(), cfg.seed)?;
    train_lic_from(model, data, cfg)
}

/// Continues training `model`.
pub fn train_lic_from(mut model: LicModel, data: &LicDataset, cfg: &TrainConfig) -> Result<(LicModel, TrainLog)> {
    cfg.validate()?;
    if data.images.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    match cfg.objective {
        Objective::Nerv { .. } | Objective::SaNerv { .. } => {
            return Err(Error::contract("video objectives train a NeRV model"));
        }
        Objective::Masked { .. } => match &data.masks {
            Some(m) if m.len() == data.images.len() => {}
            Some(m) => {
                return Err(Error::contract(format!(
                    "{} masks for {} images",
                    m.len(),
                    data.images.len()
                )))
            }
            None => return Err(Error::contract("masked objective needs masks")),
        },
        _ => {}
    }
    let head = QuadraticTaskHead::new(cfg.seed);
    let objective = cfg.objective;
    let seed = cfg.seed;
    let log = optimize(
        &mut model,
        data.images.len(),
        cfg,
        LicModel::params,
        LicModel::params_mut,
        |m, epoch, batch, slot, idx| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, true);
            let x = &data.images[idx];
            let mode = QuantMode::Train {
                noise_seed: noise_seed(seed, epoch, batch, slot),
            };
            let terms = match objective {
                Objective::Human { lambda } => loss_human(&mut g, &b, x, lambda, mode)?,
                Objective::Masked { lambda } => {
                    let mask = &data.masks.as_ref().expect("checked above")[idx];
                    loss_masked(&mut g, &b, x, mask, lambda, mode)?
                }
                Objective::Task { lambda1, lambda2 } => {
                    loss_tl(&mut g, &b, x, lambda1, lambda2, mode, &|g, r| head.apply(g, r))?
                }
                _ => unreachable!("rejected above"),
            };
            terms.check_finite(&g)?;
            let mut grads = g.backward(terms.total)?;
            Ok(ItemResult {
                loss: g.value(terms.total).item(),
                rate_bits: g.value(terms.rate_bits).item(),
                distortion: g.value(terms.distortion).item(),
                grads: collect_grads(&g, &mut grads, &b.param_ids()),
            })
        },
    )?;
    Ok((model, log))
}

/// Fits a freshly initialized NeRV to `clip`; the per-frame loss is averaged
/// over each batch of frame indices.
pub fn train_nerv(clip: &VideoClip, cfg: &TrainConfig, nerv: &NervConfig) -> Result<(NervModel, TrainLog)> {
    cfg.validate()?;
    let (beta, masked) = match cfg.objective {
        Objective::Nerv { beta } => (beta, false),
        Objective::SaNerv { beta } => (beta, true),
        _ => return Err(Error::contract("NeRV training needs the nerv or sa-nerv objective")),
    };
    if masked != clip.masks().is_some() {
        return Err(Error::contract(if masked {
            "sa-nerv needs a mask per frame"
        } else {
            "the nerv objective takes no masks"
        }));
    }
    let config = NervConfig {
        frames: clip.len(),
        height: clip.height(),
        width: clip.width(),
        ..nerv.clone()
    };
    let mut model = NervModel::init(config, cfg.seed)?;
    let log = optimize(
        &mut model,
        clip.len(),
        cfg,
        NervModel::params,
        NervModel::params_mut,
        |m, _, _, _, t| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, true);
            let f = frame_loss(&mut g, &b, clip, t, beta, masked)?;
            let loss = g.value(f.total).item();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("frame loss is {loss}")));
            }
            let mut grads = g.backward(f.total)?;
            Ok(ItemResult {
                loss,
                rate_bits: 0.0,
                distortion: g.value(f.plain).item(),
                grads: collect_grads(&g, &mut grads, &b.param_ids()),
            })
        },
    )?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_data(n: usize) -> LicDataset {
        let mut r = SplitMix64::new(1);
        LicDataset {
            images: (0..n).map(|_| Tensor::from_fn(&[3, 8, 8], |_| r.next_f64())).collect(),
            masks: Some(vec![BinaryMask::zeros(8, 8); n]),
        }
    }

    fn tiny_lic() -> LicConfig {
        LicConfig {
            channels: vec![3, 4, 5],
            ..Default::default()
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut o = epoch_order(3, 2, 17);
        o.sort();
        assert_eq!(o, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = TrainConfig::new(Objective::Human { lambda: 0.05 }, 3, 9);
        let (a, la) = train_lic(&tiny_data(5), &cfg, &tiny_lic()).unwrap();
        let (b, lb) = train_lic(&tiny_data(5), &cfg, &tiny_lic()).unwrap();
        assert_eq!(la.deterministic_csv(), lb.deterministic_csv());
        assert_eq!(a, b);
        assert_eq!(la.records.len(), 3);
    }

    #[test]
    fn zero_masks_freeze_synthesis() {
        let cfg = TrainConfig::new(Objective::Masked { lambda: 0.05 }, 2, 4);
        let init = LicModel::init(tiny_lic(), 4).unwrap();
        let (m, log) = train_lic(&tiny_data(4), &cfg, &tiny_lic()).unwrap();
        assert!(log.records.iter().all(|r| r.distortion == 0.0));
        for (a, b) in m.synthesis.iter().zip(&init.synthesis) {
            assert!(a.weight.bit_eq(&b.weight));
        }
        assert!(!m.log_scale.bit_eq(&init.log_scale));
        assert!(!m.analysis[0].weight.bit_eq(&init.analysis[0].weight));
    }

    #[test]
    fn bad_configs_are_contract_errors() {
        let data = tiny_data(2);
        let cfg = TrainConfig::new(Objective::Masked { lambda: 0.05 }, 1, 1);
        let no_masks = LicDataset { masks: None, ..data.clone() };
        assert!(matches!(train_lic(&no_masks, &cfg, &tiny_lic()), Err(Error::Contract(_))));
        let empty = LicDataset { images: vec![], masks: None };
        let human = TrainConfig::new(Objective::Human { lambda: 0.05 }, 1, 1);
        assert!(matches!(train_lic(&empty, &human, &tiny_lic()), Err(Error::Contract(_))));
        let neg = TrainConfig::new(Objective::Human { lambda: -1.0 }, 1, 1);
        assert!(matches!(train_lic(&data, &neg, &tiny_lic()), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_input_aborts_with_context() {
        let mut data = tiny_data(3);
        data.images[1].data_mut()[0] = f64::NAN;
        let cfg = TrainConfig::new(Objective::Human { lambda: 0.05 }, 1, 1);
        match train_lic(&data, &cfg, &tiny_lic()) {
            Err(Error::Numeric(m)) => assert!(m.contains("epoch 0") && m.contains("item 1"), "{m}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn single_frame_clip_trains() {
        let nerv = NervConfig {
            pe_pairs: 4,
            stem_hidden: 8,
            c0: 4,
            h0: 4,
            w0: 4,
            block_channels: vec![4, 3],
            ..Default::default()
        };
        let clip = VideoClip::new(vec![Tensor::full(&[3, 16, 16], 0.3)], None).unwrap();
        let cfg = TrainConfig::new(Objective::Nerv { beta: 0.7 }, 4, 2);
        let (m, log) = train_nerv(&clip, &cfg, &nerv).unwrap();
        assert_eq!(m.config.frames, 1);
        assert!(log.records.last().unwrap().loss < log.records[0].loss);
    }

    #[test]
    fn smoothing_window() {
        let log = TrainLog {
            command: None,
            records: [4.0, 2.0, 0.0]
                .iter()
                .enumerate()
                .map(|(i, &l)| EpochRecord {
                    epoch: i,
                    loss: l,
                    rate_bits: 0.0,
                    distortion: 0.0,
                    seconds: 0.0,
                })
                .collect(),
        };
        assert_eq!(log.smoothed_loss(2), vec![4.0, 3.0, 1.0]);
        assert!(log.to_csv().starts_with(TRAIN_LOG_HEADER));
    }
}
