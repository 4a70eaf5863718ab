//! Versioned binary checkpoint container.
//!
//! Layout: the magic `EGOLANE\0`, a little-endian `u32` format version, a
//! `u64` header length, a JSON header, then little-endian `f32` tensors in
//! header order: the parameters, and when present the two Adam moments.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::augment::Normalization;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamSpec;
use crate::training::{AdamState, TrainConfig};

const MAGIC: &[u8; 8] = b"EGOLANE\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub norm: Normalization,
    pub params: Vec<f32>,
    pub optimizer: Option<AdamState>,
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    pub val_f1: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    norm: Normalization,
    train_config: Option<TrainConfig>,
    step: u64,
    val_f1: Option<f64>,
    tensors: Vec<ParamSpec>,
    optimizer: Option<AdamState>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, norm: Normalization) -> Self {
        Self {
            model: model.config().clone(),
            norm,
            params: model.params().to_vec(),
            optimizer: None,
            train_config: None,
            step: 0,
            val_f1: None,
        }
    }

    pub fn to_model(&self) -> Result<Model<f32>> {
        Model::from_params(self.model.clone(), self.params.clone())
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let model = Model::<f32>::from_params(self.model.clone(), self.params.clone())?;
        let header = Header {
            model: self.model.clone(),
            norm: self.norm,
            train_config: self.train_config.clone(),
            step: self.step,
            val_f1: self.val_f1,
            tensors: model.layout().specs().to_vec(),
            optimizer: self.optimizer.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        out.write_u64::<LittleEndian>(json.len() as u64)?;
        out.write_all(&json)?;
        let mut write_all = |v: &[f32]| -> Result<()> {
            for &x in v {
                out.write_f32::<LittleEndian>(x)?;
            }
            Ok(())
        };
        write_all(&self.params)?;
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                return Err(bad("optimizer state does not match the parameters"));
            }
            write_all(&opt.m)?;
            write_all(&opt.v)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = input.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = input.read_u64::<LittleEndian>()?;
        if len > 1 << 30 {
            return Err(bad("header too large"));
        }
        let mut json = vec![0u8; len as usize];
        input.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;
        let expected = Model::<f32>::new(header.model.clone(), 0)?;
        if expected.layout().specs() != header.tensors.as_slice() {
            return Err(bad("tensor table does not match the model configuration"));
        }
        let n = expected.layout().len();
        let mut read = |n: usize| -> Result<Vec<f32>> {
            let mut v = vec![0f32; n];
            input
                .read_f32_into::<LittleEndian>(&mut v)
                .map_err(|_| bad("truncated tensor data"))?;
            Ok(v)
        };
        let params = read(n)?;
        let optimizer = match header.optimizer {
            Some(mut st) => {
                st.m = read(n)?;
                st.v = read(n)?;
                Some(st)
            }
            None => None,
        };
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            model: header.model,
            norm: header.norm,
            params,
            optimizer,
            train_config: header.train_config,
            step: header.step,
            val_f1: header.val_f1,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::AdamW;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_width: 24,
            input_height: 16,
            channels: vec![4, 8],
            strides: vec![2, 2],
            heads: 2,
            head_dim: 4,
            classes: 3,
            ffn_hidden: 8,
            use_attention: true,
            use_vpl: true,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::<f32>::new(tiny(), 3).unwrap();
        let mut opt = AdamW::new(model.params().len(), 0.01);
        opt.state.t = 7;
        opt.state
            .m
            .iter_mut()
            .enumerate()
            .for_each(|(i, m)| *m = i as f32 * 1e-3);
        opt.state
            .v
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f32).sqrt());
        let ck = Checkpoint {
            optimizer: Some(opt.state),
            train_config: Some(TrainConfig::default()),
            step: 42,
            val_f1: Some(0.123456789),
            norm: Normalization {
                mean: [0.1, 0.2, 0.3],
                std: [0.4, 0.5, 0.6],
            },
            ..Checkpoint::from_model(&model, Normalization::default())
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.to_model().unwrap().params(), model.params());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let model = Model::<f32>::new(tiny(), 3).unwrap();
        let bytes = Checkpoint::from_model(&model, Normalization::default())
            .to_bytes()
            .unwrap();
        assert!(matches!(
            Checkpoint::read_from(&mut &b"nope"[..]),
            Err(Error::Checkpoint(_))
        ));
        let truncated = &bytes[..bytes.len() - 4];
        assert!(matches!(
            Checkpoint::read_from(&mut &truncated[..]),
            Err(Error::Checkpoint(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            Checkpoint::read_from(&mut extra.as_slice()),
            Err(Error::Checkpoint(_))
        ));
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(
            Checkpoint::read_from(&mut wrong.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }
}
