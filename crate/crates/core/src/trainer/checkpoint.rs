//! `SAICKPT1` container: named f64 tensors, little-endian.

use std::path::Path;

use crate::codec::{LicConfig, LicModel};
use crate::error::{Error, Result};
use crate::imageio::{read_file, write_atomic};
use crate::nerv::{NervConfig, NervModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SAICKPT1";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Lic = 1,
    Nerv = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub tensors: Vec<(String, Tensor)>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                msg: format!("checkpoint truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nl = u16::try_from(name.len())
                .map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&nl.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::contract("rank above 255"))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::contract("dimension above u32"))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a SAICKPT1 checkpoint".into()));
        }
        let mut c = Cursor { bytes, pos: 8 };
        let version = c.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = match c.u8()? {
            1 => ModelKind::Lic,
            2 => ModelKind::Nerv,
            k => return Err(Error::Format(format!("unknown model kind {k}"))),
        };
        let count = c.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nl = c.u16()? as usize;
            let at = c.pos;
            let name = std::str::from_utf8(c.take(nl)?)
                .map_err(|_| Error::Parse {
                    offset: at,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank = c.u8()? as usize;
            let shape = (0..rank)
                .map(|_| c.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let at = c.pos;
            let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Parse {
                offset: at,
                msg: "tensor size overflows".into(),
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Parse {
                offset: at,
                msg: format!("tensor {name}: {e}"),
            })?;
            tensors.push((name, t));
        }
        if c.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - c.pos
            )));
        }
        Ok(Checkpoint { kind, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&read_file(path)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
    }

    /// Records a scalar under `meta.<key>`, replacing any earlier value.
    pub fn set_meta(&mut self, key: &str, value: f64) {
        let name = format!("meta.{key}");
        self.tensors.retain(|(n, _)| *n != name);
        self.tensors.push((name, Tensor::scalar(value)));
    }

    pub fn meta(&self, key: &str) -> Option<f64> {
        let name = format!("meta.{key}");
        self.tensors
            .iter()
            .find(|(n, t)| *n == name && t.numel() == 1)
            .map(|(_, t)| t.data()[0])
    }

    fn usize_list(&self, name: &str) -> Result<Vec<usize>> {
        self.get(name)?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 1e12 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("{name} holds a non-integer {v}")))
                }
            })
            .collect()
    }

    fn usize_value(&self, name: &str) -> Result<usize> {
        let l = self.usize_list(name)?;
        l.first()
            .copied()
            .filter(|_| l.len() == 1)
            .ok_or_else(|| Error::Format(format!("{name} must hold one value")))
    }

    fn f64_value(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.numel() != 1 {
            return Err(Error::Format(format!("{name} must hold one value")));
        }
        Ok(t.data()[0])
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "checkpoint holds a {:?} model, expected {kind:?}",
                self.kind
            )));
        }
        Ok(())
    }

    fn fill(&self, names: &[String], slots: Vec<&mut Tensor>) -> Result<()> {
        for (name, slot) in names.iter().zip(slots) {
            let t = self.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

fn list(values: &[usize]) -> Tensor {
    Tensor::new(vec![values.len()], values.iter().map(|&v| v as f64).collect())
        .expect("non-empty config list")
}

fn push_params(out: &mut Vec<(String, Tensor)>, names: Vec<String>, params: Vec<&Tensor>) {
    out.extend(names.into_iter().zip(params.into_iter().cloned()));
}

impl LicModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut tensors = vec![
            ("config.channels".to_string(), list(&c.channels)),
            ("config.kernel".to_string(), list(&[c.kernel])),
            ("config.slope".to_string(), Tensor::scalar(c.slope)),
        ];
        push_params(&mut tensors, self.param_names(), self.params());
        Checkpoint {
            kind: ModelKind::Lic,
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Lic)?;
        let config = LicConfig {
            channels: ck.usize_list("config.channels")?,
            kernel: ck.usize_value("config.kernel")?,
            slope: ck.f64_value("config.slope")?,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut m = LicModel::init(config, 0)?;
        let names = m.param_names();
        ck.fill(&names, m.params_mut())?;
        Ok(m)
    }
}

impl NervModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut tensors = vec![
            (
                "config.dims".to_string(),
                list(&[c.frames, c.height, c.width, c.pe_pairs, c.stem_hidden, c.c0, c.h0, c.w0]),
            ),
            ("config.blocks".to_string(), list(&c.block_channels)),
            ("config.pe_base".to_string(), Tensor::scalar(c.pe_base)),
            ("config.slope".to_string(), Tensor::scalar(c.slope)),
        ];
        push_params(&mut tensors, self.param_names(), self.params());
        Checkpoint {
            kind: ModelKind::Nerv,
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Nerv)?;
        let d = ck.usize_list("config.dims")?;
        let [frames, height, width, pe_pairs, stem_hidden, c0, h0, w0] = d[..] else {
            return Err(Error::Format("config.dims must hold 8 values".into()));
        };
        let config = NervConfig {
            frames,
            height,
            width,
            pe_base: ck.f64_value("config.pe_base")?,
            pe_pairs,
            stem_hidden,
            c0,
            h0,
            w0,
            block_channels: ck.usize_list("config.blocks")?,
            slope: ck.f64_value("config.slope")?,
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut m = NervModel::init(config, 0)?;
        let names = m.param_names();
        ck.fill(&names, m.params_mut())?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lic_round_trip_is_bit_exact() {
        let mut m = LicModel::init(LicConfig::default(), 7).unwrap();
        m.mean.data_mut()[3] = 0.123456789;
        m.log_scale.data_mut()[0] = -1.5;
        let bytes = m.to_checkpoint().to_bytes().unwrap();
        let back = LicModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        for (a, b) in back.params().iter().zip(m.params()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn nerv_round_trip_is_bit_exact() {
        let m = NervModel::init(NervConfig::default(), 8).unwrap();
        let bytes = m.to_checkpoint().to_bytes().unwrap();
        let back = NervModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corrupt_inputs() {
        let m = LicModel::init(LicConfig { channels: vec![3, 4, 5], ..Default::default() }, 1).unwrap();
        let bytes = m.to_checkpoint().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[2] ^= 0xFF;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            Checkpoint::from_bytes(cut),
            Err(Error::Parse { offset, .. }) if offset == cut.len()
        ));
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(NervModel::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn header_layout_is_little_endian() {
        let ck = Checkpoint {
            kind: ModelKind::Nerv,
            tensors: vec![("a".into(), Tensor::new(vec![2], vec![1.0, -0.5]).unwrap())],
        };
        let b = ck.to_bytes().unwrap();
        assert_eq!(&b[8..15], &[1, 0, 2, 1, 0, 0, 0]);
        assert_eq!(&b[15..18], &[1, 0, b'a']);
        assert_eq!(&b[18..23], &[1, 2, 0, 0, 0]);
        assert_eq!(&b[23..31], &1.0f64.to_le_bytes());
    }
}
