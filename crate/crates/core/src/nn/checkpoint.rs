//! `SIDM` model checkpoints.
//!
//! `b"SIDM"`, `u16` version, `u32` header length, JSON [`CheckpointHeader`],
//! then little-endian floats: for every block the conv weights, conv biases,
//! gamma, beta, running mean and running variance; then the head weights and
//! biases.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, Model, Scalar, PIXEL_SCALING, PRECISION};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SIDM";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Arch,
    pub input_size: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerShape>,
    pub pixel_scaling: String,
    pub precision: String,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// SHA-256 of the training configuration, when produced by training.
    pub train_config_digest: Option<String>,
}

fn header_for(model: &Model, digest: Option<String>) -> CheckpointHeader {
    let bn = model.blocks.first().map(|b| (b.bn.eps as f64, b.bn.momentum as f64)).unwrap_or((1e-5, 0.1));
    CheckpointHeader {
        arch: model.arch.clone(),
        input_size: model.input_size,
        num_classes: model.num_classes(),
        layers: model
            .blocks
            .iter()
            .map(|b| LayerShape {
                in_channels: b.conv.in_channels(),
                out_channels: b.conv.out_channels(),
                stride: b.conv.stride,
                padding: b.conv.padding,
            })
            .collect(),
        pixel_scaling: PIXEL_SCALING.into(),
        precision: PRECISION.into(),
        bn_eps: bn.0,
        bn_momentum: bn.1,
        train_config_digest: digest,
    }
}

fn arrays(model: &Model) -> Vec<&[Scalar]> {
    let mut out: Vec<&[Scalar]> = Vec::new();
    for b in &model.blocks {
        out.push(b.conv.weight.data());
        out.push(&b.conv.bias);
        out.push(&b.bn.gamma);
        out.push(&b.bn.beta);
        out.push(&b.bn.running_mean);
        out.push(&b.bn.running_var);
    }
    out.push(model.head.weight.data());
    out.push(&model.head.bias);
    out
}

fn arrays_mut(model: &mut Model) -> Vec<&mut [Scalar]> {
    let mut out: Vec<&mut [Scalar]> = Vec::new();
    for b in &mut model.blocks {
        out.push(b.conv.weight.data_mut());
        out.push(&mut b.conv.bias);
        out.push(&mut b.bn.gamma);
        out.push(&mut b.bn.beta);
        out.push(&mut b.bn.running_mean);
        out.push(&mut b.bn.running_var);
    }
    out.push(model.head.weight.data_mut());
    out.push(&mut model.head.bias);
    out
}

pub fn write_checkpoint(model: &Model, digest: Option<String>) -> Result<Vec<u8>> {
    let header = header_for(model, digest);
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for a in arrays(model) {
        for v in a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model, digest: Option<String>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(model, digest)?)?;
    Ok(())
}

fn take<'a>(r: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Truncated(what.to_string()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, Model)> {
    let mut r = bytes;
    if take(&mut r, 4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, expected SIDM".into()));
    }
    let version = u16::from_le_bytes(take(&mut r, 2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(take(&mut r, 4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(&mut r, len, "header")?)?;
    if header.pixel_scaling != PIXEL_SCALING {
        return Err(Error::Format(format!("unsupported pixel scaling {:?}", header.pixel_scaling)));
    }
    let width = match header.precision.as_str() {
        "f64" => 8,
        "f32" => 4,
        p => return Err(Error::Format(format!("unknown precision {p:?}"))),
    };
    let mut model = Model::new(header.arch.clone(), header.input_size, header.num_classes)?;
    for b in &mut model.blocks {
        b.bn.eps = header.bn_eps as Scalar;
        b.bn.momentum = header.bn_momentum as Scalar;
    }
    for a in arrays_mut(&mut model) {
        let raw = take(&mut r, a.len() * width, "parameter data")?;
        for (v, chunk) in a.iter_mut().zip(raw.chunks_exact(width)) {
            *v = if width == 8 {
                f64::from_le_bytes(chunk.try_into().expect("8 bytes")) as Scalar
            } else {
                f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as Scalar
            };
        }
    }
    if !r.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after parameters", r.len())));
    }
    Ok((header, model))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointHeader, Model)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_all_arrays() {
        let mut m = Model::new(Arch::Small, 32, 3).unwrap();
        m.init_params(1.3, 5);
        m.blocks[1].bn.running_mean = vec![0.25, -0.5];
        m.blocks[2].bn.running_var[3] = 2.5;
        let bytes = write_checkpoint(&m, Some("abc".into())).unwrap();
        let (header, back) = read_checkpoint(&bytes).unwrap();
        assert_eq!(header.arch, Arch::Small);
        assert_eq!(header.train_config_digest.as_deref(), Some("abc"));
        assert_eq!(header.precision, PRECISION);
        assert_eq!(back.blocks, m.blocks);
        assert_eq!(back.head, m.head);
        assert_eq!(write_checkpoint(&back, Some("abc".into())).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_input() {
        let m = Model::new(Arch::Small, 16, 3).unwrap();
        let bytes = write_checkpoint(&m, None).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(Error::Format(_))));
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
    }
}
