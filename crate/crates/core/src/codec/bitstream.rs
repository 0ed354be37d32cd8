use std::path::Path;

use super::loss::{crop, dequantize, latent_symbols, padded_len, reflect_pad};
use super::model::LicModel;
use super::range_coder::{FrequencyTable, RangeDecoder, RangeEncoder};
use crate::autodiff::{gaussian_bin_mass, Graph};
use crate::error::{Error, Result};
use crate::imageio::{read_file, write_atomic};
use crate::tensor::Tensor;

pub const BITSTREAM_MAGIC: &[u8; 8] = b"SAIBITS1";
pub const SYMBOL_MIN: i64 = -64;
pub const SYMBOL_MAX: i64 = 63;
pub const SYMBOL_BINS: usize = (SYMBOL_MAX - SYMBOL_MIN + 1) as usize;
/// Relative tolerance when matching header entropy parameters to a model.
pub const PARAM_TOLERANCE: f64 = 1e-6;

/// CDF table of `round(y − μ)` under `N(0, σ²)` over the 128 symbol bins,
/// with both tails folded into the end bins.
pub fn channel_table(scale: f64) -> Result<FrequencyTable> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::contract(format!("scale must be positive, got {scale}")));
    }
    let cdf = |z: f64| 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    let probs: Vec<f64> = (SYMBOL_MIN..=SYMBOL_MAX)
        .map(|s| match s {
            SYMBOL_MIN => cdf((s as f64 + 0.5) / scale),
            SYMBOL_MAX => cdf(-(s as f64 - 0.5) / scale),
            _ => gaussian_bin_mass(s as f64, 0.0, scale),
        })
        .collect();
    FrequencyTable::from_probabilities(&probs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub image_width: u32,
    pub image_height: u32,
    pub padded_width: u32,
    pub padded_height: u32,
    pub channels: u16,
    pub latent_height: u16,
    pub latent_width: u16,
    pub means: Vec<f32>,
    pub scales: Vec<f32>,
    pub payload: Vec<u8>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                msg: format!("header truncated, needed {n} more bytes at {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Bitstream {
    pub fn symbol_count(&self) -> usize {
        self.channels as usize * self.latent_height as usize * self.latent_width as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(34 + 8 * self.means.len() + self.payload.len());
        out.extend_from_slice(BITSTREAM_MAGIC);
        for v in [self.image_width, self.image_height, self.padded_width, self.padded_height] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [self.channels, self.latent_height, self.latent_width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (m, s) in self.means.iter().zip(&self.scales) {
            out.extend_from_slice(&m.to_le_bytes());
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != BITSTREAM_MAGIC {
            return Err(Error::Format("not a SAIBITS1 bitstream".into()));
        }
        let mut r = Reader { bytes, pos: 8 };
        let (image_width, image_height) = (r.u32()?, r.u32()?);
        let (padded_width, padded_height) = (r.u32()?, r.u32()?);
        let (channels, latent_height, latent_width) = (r.u16()?, r.u16()?, r.u16()?);
        let mut means = Vec::with_capacity(channels as usize);
        let mut scales = Vec::with_capacity(channels as usize);
        for _ in 0..channels {
            means.push(r.f32()?);
            scales.push(r.f32()?);
        }
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        let bs = Bitstream {
            image_width,
            image_height,
            padded_width,
            padded_height,
            channels,
            latent_height,
            latent_width,
            means,
            scales,
            payload,
        };
        bs.check_dims()?;
        Ok(bs)
    }

    fn check_dims(&self) -> Result<()> {
        let ok = self.image_width > 0
            && self.image_height > 0
            && self.padded_width >= self.image_width
            && self.padded_height >= self.image_height
            && self.channels > 0
            && self.latent_width > 0
            && self.latent_height > 0
            && self.padded_width % self.latent_width as u32 == 0
            && self.padded_height % self.latent_height as u32 == 0
            && self.scales.iter().all(|s| *s > 0.0 && s.is_finite())
            && self.means.iter().all(|m| m.is_finite());
        if !ok {
            return Err(Error::Format("inconsistent header dimensions or parameters".into()));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Bitstream::from_bytes(&read_file(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Total encoded file size in bytes.
    pub fn file_len(&self) -> usize {
        34 + 8 * self.means.len() + self.payload.len()
    }
}

/// Clamped symbols of a padded `[3, H, W]` image, channel-major, and the
/// latent shape `[1, C, h, w]`.
pub fn encode_symbols(model: &LicModel, padded: &Tensor) -> Result<(Vec<i64>, Vec<usize>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let [c, h, w] = *padded.shape() else {
        return Err(Error::contract("expected a [3,H,W] image"));
    };
    let x = g.constant(padded.reshape(&[1, c, h, w])?);
    let y = b.analysis(&mut g, x)?;
    let mut s = latent_symbols(g.value(y), model.mean.data())?;
    for v in &mut s {
        *v = (*v).clamp(SYMBOL_MIN, SYMBOL_MAX);
    }
    Ok((s, g.shape(y).to_vec()))
}

fn synthesize(model: &LicModel, symbols: &[i64], shape: &[usize], h: usize, w: usize) -> Result<Tensor> {
    let y_hat = dequantize(symbols, shape, model.mean.data())?;
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let y = g.constant(y_hat);
    let xh = b.synthesis(&mut g, y)?;
    crop(g.value(xh), h, w)
}

/// Reconstruction through test-mode quantization without entropy coding.
pub fn reconstruct_direct(model: &LicModel, x: &Tensor) -> Result<Tensor> {
    let (h, w) = image_dims(x)?;
    let padded = reflect_pad(x, model.config.factor())?;
    let (s, shape) = encode_symbols(model, &padded)?;
    synthesize(model, &s, &shape, h, w)
}

fn image_dims(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(Error::contract(format!("expected a [3,H,W] image, got {s:?}"))),
    }
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::contract(format!("{what} {v} does not fit the header")))
}

pub fn encode_bitstream(model: &LicModel, x: &Tensor) -> Result<Bitstream> {
    let (h, w) = image_dims(x)?;
    let f = model.config.factor();
    let padded = reflect_pad(x, f)?;
    let (symbols, shape) = encode_symbols(model, &padded)?;
    let (c, lh, lw) = (shape[1], shape[2], shape[3]);
    let scales = model.scales();
    let scales32: Vec<f32> = scales.iter().map(|&s| s as f32).collect();
    let tables = scales32
        .iter()
        .map(|&s| channel_table(s as f64))
        .collect::<Result<Vec<_>>>()?;
    let plane = lh * lw;
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        enc.encode(&tables[i / plane], (s - SYMBOL_MIN) as usize);
    }
    Ok(Bitstream {
        image_width: w as u32,
        image_height: h as u32,
        padded_width: padded_len(w, f) as u32,
        padded_height: padded_len(h, f) as u32,
        channels: to_u16(c, "latent channels")?,
        latent_height: to_u16(lh, "latent height")?,
        latent_width: to_u16(lw, "latent width")?,
        means: model.mean.data().iter().map(|&m| m as f32).collect(),
        scales: scales32,
        payload: enc.finish(),
    })
}

fn close(header: f32, model: f64) -> bool {
    (header as f64 - model).abs() <= PARAM_TOLERANCE * model.abs().max(1.0)
}

/// Entropy-decoded symbols, channel-major.
pub fn decode_symbols(model: &LicModel, bs: &Bitstream) -> Result<Vec<i64>> {
    let c = model.config.latent_channels();
    let f = model.config.factor() as u32;
    if bs.channels as usize != c {
        return Err(Error::Format(format!(
            "bitstream has {} latent channels, model has {c}",
            bs.channels
        )));
    }
    if bs.padded_width != bs.latent_width as u32 * f || bs.padded_height != bs.latent_height as u32 * f
    {
        return Err(Error::Format("latent dims disagree with the model's downsampling".into()));
    }
    let scales = model.scales();
    for ch in 0..c {
        if !close(bs.means[ch], model.mean.data()[ch]) || !close(bs.scales[ch], scales[ch]) {
            return Err(Error::Validation(format!(
                "entropy parameters of channel {ch} differ from the model"
            )));
        }
    }
    let tables = bs
        .scales
        .iter()
        .map(|&s| channel_table(s as f64))
        .collect::<Result<Vec<_>>>()?;
    let plane = bs.latent_height as usize * bs.latent_width as usize;
    let mut dec = RangeDecoder::new(&bs.payload)?;
    (0..bs.symbol_count())
        .map(|i| Ok(dec.decode(&tables[i / plane])? as i64 + SYMBOL_MIN))
        .collect()
}

pub fn decode_bitstream(model: &LicModel, bs: &Bitstream) -> Result<Tensor> {
    let symbols = decode_symbols(model, bs)?;
    let shape = [
        1,
        bs.channels as usize,
        bs.latent_height as usize,
        bs.latent_width as usize,
    ];
    synthesize(
        model,
        &symbols,
        &shape,
        bs.image_height as usize,
        bs.image_width as usize,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::model::LicConfig;
    use crate::rng::SplitMix64;

    fn small() -> LicModel {
        LicModel::init(
            LicConfig {
                channels: vec![3, 6, 8, 5],
                ..Default::default()
            },
            11,
        )
        .unwrap()
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(&[3, h, w], |_| r.next_f64())
    }

    #[test]
    fn table_mass_concentrates_for_small_scale() {
        let t = channel_table(0.05).unwrap();
        assert!(t.freq((0 - SYMBOL_MIN) as usize) > 65000);
    }

    #[test]
    fn round_trip_matches_direct_pipeline() {
        let m = small();
        let x = image(1, 21, 13);
        let bs = encode_bitstream(&m, &x).unwrap();
        assert_eq!((bs.padded_width, bs.padded_height), (16, 24));
        assert_eq!((bs.latent_width, bs.latent_height), (2, 3));
        let parsed = Bitstream::from_bytes(&bs.to_bytes()).unwrap();
        assert_eq!(parsed, bs);
        assert_eq!(parsed.file_len(), bs.to_bytes().len());
        let decoded = decode_bitstream(&m, &parsed).unwrap();
        assert!(decoded.bit_eq(&reconstruct_direct(&m, &x).unwrap()));
        assert_eq!(decoded.shape(), &[3, 21, 13]);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let m = small();
        let mut bytes = encode_bitstream(&m, &image(2, 8, 8)).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Bitstream::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn mean_mismatch_is_refused() {
        let m = small();
        let bs = encode_bitstream(&m, &image(3, 8, 8)).unwrap();
        let mut other = m.clone();
        other.mean.data_mut()[1] += 1e-3;
        assert!(matches!(decode_bitstream(&other, &bs), Err(Error::Validation(_))));
    }

    #[test]
    fn truncated_payload_is_decode_error() {
        let m = small();
        let mut bs = encode_bitstream(&m, &image(4, 64, 64)).unwrap();
        bs.payload.truncate(bs.payload.len() / 3);
        assert!(matches!(decode_bitstream(&m, &bs), Err(Error::Decode { .. })));
    }
}
