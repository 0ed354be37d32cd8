use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::trainer::init::conv_params;

/// Likelihood floor applied before the log in the rate term.
pub const LIKELIHOOD_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LicConfig {
    /// Analysis channel progression, input first; synthesis mirrors it.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub slope: f64,
}

impl Default for LicConfig {
    fn default() -> Self {
        LicConfig {
            channels: vec![3, 32, 64, 48],
            kernel: 5,
            slope: 0.2,
        }
    }
}

impl LicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels[0] != 3 || self.channels.contains(&0) {
            return Err(Error::contract(format!(
                "channels must start at 3 and have at least one stage, got {:?}",
                self.channels
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::contract("kernel size must be odd"));
        }
        if !(self.slope.is_finite() && self.slope >= 0.0) {
            return Err(Error::contract("leaky relu slope must be non-negative"));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn latent_channels(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// Spatial downsampling factor of the analysis transform.
    pub fn factor(&self) -> usize {
        1 << self.stages()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LicModel {
    pub config: LicConfig,
    pub analysis: Vec<ConvLayer>,
    pub synthesis: Vec<ConvLayer>,
    /// Per-channel entropy means μ_c.
    pub mean: Tensor,
    /// Per-channel log σ_c.
    pub log_scale: Tensor,
}

/// Graph handles for one model's parameters.
#[derive(Clone, Debug)]
pub struct BoundLic {
    analysis: Vec<(NodeId, NodeId)>,
    synthesis: Vec<(NodeId, NodeId)>,
    pub mean: NodeId,
    pub log_scale: NodeId,
    kernel: usize,
    slope: f64,
    factor: usize,
}

impl LicModel {
    /// He-uniform weights, zero biases, μ = 0 and log σ = 0.
    pub fn init(config: LicConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let ch = &config.channels;
        let mut rng = SplitMix64::derive(seed, &[0x11C]);
        let analysis = ch
            .windows(2)
            .map(|p| {
                let (weight, bias) = conv_params(p[1], p[0], k, &mut rng);
                ConvLayer { weight, bias }
            })
            .collect();
        let synthesis = ch
            .windows(2)
            .rev()
            .map(|p| {
                let (weight, bias) = conv_params(p[0], p[1], k, &mut rng);
                ConvLayer { weight, bias }
            })
            .collect();
        let c = config.latent_channels();
        Ok(LicModel {
            mean: Tensor::zeros(&[c]),
            log_scale: Tensor::zeros(&[c]),
            config,
            analysis,
            synthesis,
        })
    }

    /// Parameters in a fixed order shared by [`Self::params_mut`],
    /// [`Self::param_names`] and [`BoundLic::param_ids`].
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.analysis.iter().chain(&self.synthesis) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.mean);
        out.push(&self.log_scale);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.analysis.iter_mut().chain(self.synthesis.iter_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.mean);
        out.push(&mut self.log_scale);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (side, layers) in [("analysis", &self.analysis), ("synthesis", &self.synthesis)] {
            for i in 0..layers.len() {
                out.push(format!("{side}.{i}.weight"));
                out.push(format!("{side}.{i}.bias"));
            }
        }
        out.push("entropy.mean".into());
        out.push("entropy.log_scale".into());
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Adds the parameters to `g`, as differentiable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLic {
        let ids: Vec<NodeId> = self
            .params()
            .into_iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        self.bind_nodes(&ids).expect("one node per parameter")
    }

    /// Uses existing nodes as the parameters, one per [`Self::params`] entry
    /// in the same order.
    pub fn bind_nodes(&self, ids: &[NodeId]) -> Result<BoundLic> {
        let n = self.params().len();
        if ids.len() != n {
            return Err(Error::contract(format!("LIC model has {n} parameters, got {} nodes", ids.len())));
        }
        let na = self.analysis.len();
        let ns = self.synthesis.len();
        let pairs = |from: usize, count: usize| (from..from + count).map(|i| (ids[2 * i], ids[2 * i + 1])).collect();
        Ok(BoundLic {
            analysis: pairs(0, na),
            synthesis: pairs(na, ns),
            mean: ids[n - 2],
            log_scale: ids[n - 1],
            kernel: self.config.kernel,
            slope: self.config.slope,
            factor: self.config.factor(),
        })
    }

    pub fn scales(&self) -> Vec<f64> {
        self.log_scale.data().iter().map(|v| v.exp()).collect()
    }
}

impl BoundLic {
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &(w, b) in self.analysis.iter().chain(&self.synthesis) {
            out.push(w);
            out.push(b);
        }
        out.push(self.mean);
        out.push(self.log_scale);
        out
    }

    /// Latent `y` of a `[N, 3, H, W]` batch; `H` and `W` must be multiples of
    /// the downsampling factor.
    pub fn analysis(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::contract(format!(
                "analysis expects [N, 3, H, W], got {s:?}"
            )));
        }
        if s[2] % self.factor != 0 || s[3] % self.factor != 0 {
            return Err(Error::contract(format!(
                "image {}x{} is not a multiple of {}; reflect-pad it first",
                s[3], s[2], self.factor
            )));
        }
        let mut h = x;
        let last = self.analysis.len() - 1;
        for (i, &(w, b)) in self.analysis.iter().enumerate() {
            h = g.conv2d(h, w, Some(b), 2, self.kernel / 2)?;
            if i < last {
                h = g.leaky_relu(h, self.slope);
            }
        }
        Ok(h)
    }

    /// Decoded image in `[0, 1]` from a `[N, C, h, w]` latent.
    pub fn synthesis(&self, g: &mut Graph, y: NodeId) -> Result<NodeId> {
        let mut h = y;
        let last = self.synthesis.len() - 1;
        for (i, &(w, b)) in self.synthesis.iter().enumerate() {
            h = g.upsample_nearest(h, 2)?;
            h = g.conv2d(h, w, Some(b), 1, self.kernel / 2)?;
            h = if i < last {
                g.leaky_relu(h, self.slope)
            } else {
                g.sigmoid(h)
            };
        }
        Ok(h)
    }

    /// Total bits of a relaxed latent under the factorized Gaussian model.
    pub fn rate_bits(&self, g: &mut Graph, y_tilde: NodeId) -> Result<NodeId> {
        g.gaussian_bits(y_tilde, self.mean, self.log_scale, LIKELIHOOD_FLOOR)
    }
}
