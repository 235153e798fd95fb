//! Binary checkpoints: encoder segment, bank segment, optional softmax-head
//! segment, and a config echo, concatenated in one little-endian file.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::bank::MemoryBank;
use crate::encoder::{Activation, AffineLayer, EncoderNetwork, SoftmaxHead};

pub const ENCODER_MAGIC: &[u8; 4] = b"SNCE";
pub const BANK_MAGIC: &[u8; 4] = b"SNCB";
pub const HEAD_MAGIC: &[u8; 4] = b"SNCH";
pub const CONFIG_MAGIC: &[u8; 4] = b"SNCG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("unknown segment magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("segment {magic} has unsupported version {version}")]
    UnsupportedVersion { magic: String, version: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Everything a finished run persists. The config echo is the resolved
/// key=value configuration that reproduces the run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub encoder: EncoderNetwork,
    pub bank: Option<MemoryBank>,
    pub head: Option<SoftmaxHead>,
    pub config_echo: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        write_encoder_segment(&mut w, &self.encoder)?;
        if let Some(bank) = &self.bank {
            write_bank_segment(&mut w, bank)?;
        }
        if let Some(head) = &self.head {
            write_head_segment(&mut w, head)?;
        }
        write_config_segment(&mut w, &self.config_echo)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut encoder = None;
        let mut bank = None;
        let mut head = None;
        let mut config_echo = String::new();
        loop {
            let mut magic = [0u8; 4];
            match r.read_exact(&mut magic) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            match &magic {
                m if m == ENCODER_MAGIC => encoder = Some(read_encoder_body(&mut r)?),
                m if m == BANK_MAGIC => bank = Some(read_bank_body(&mut r)?),
                m if m == HEAD_MAGIC => head = Some(read_head_body(&mut r)?),
                m if m == CONFIG_MAGIC => config_echo = read_config_body(&mut r)?,
                _ => return Err(CheckpointError::BadMagic(magic)),
            }
        }
        let encoder = encoder
            .ok_or_else(|| CheckpointError::Malformed("missing encoder segment".into()))?;
        Ok(Checkpoint { encoder, bank, head, config_echo })
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f32s(w: &mut impl Write, values: impl Iterator<Item = f32>) -> io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f32_vec(r: &mut impl Read, count: usize) -> Result<Vec<f32>, CheckpointError> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn check_version(magic: &str, version: u32) -> Result<(), CheckpointError> {
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { magic: magic.into(), version });
    }
    Ok(())
}

/// `SNCE, version, layer count, per layer (in, out, tag, f32 weights
/// row-major, f32 bias)`.
pub fn write_encoder_segment(
    w: &mut impl Write,
    net: &EncoderNetwork,
) -> Result<(), CheckpointError> {
    w.write_all(ENCODER_MAGIC)?;
    write_u32(w, FORMAT_VERSION)?;
    write_u32(w, net.layers().len() as u32)?;
    for layer in net.layers() {
        write_u32(w, layer.in_dim as u32)?;
        write_u32(w, layer.out_dim as u32)?;
        let tag = match layer.activation {
            Activation::Identity => 0u8,
            Activation::Relu => 1u8,
        };
        w.write_all(&[tag])?;
        write_f32s(w, layer.weight.iter().map(|&x| x as f32))?;
        write_f32s(w, layer.bias.iter().map(|&x| x as f32))?;
    }
    Ok(())
}

fn read_encoder_body(r: &mut impl Read) -> Result<EncoderNetwork, CheckpointError> {
    check_version("SNCE", read_u32(r)?)?;
    let count = read_u32(r)? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let in_dim = read_u32(r)? as usize;
        let out_dim = read_u32(r)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let activation = match tag[0] {
            0 => Activation::Identity,
            1 => Activation::Relu,
            t => return Err(CheckpointError::Malformed(format!("nonlinearity tag {t}"))),
        };
        let weight = read_f32_vec(r, in_dim * out_dim)?;
        let bias = read_f32_vec(r, out_dim)?;
        layers.push(AffineLayer {
            weight: weight.into_iter().map(f64::from).collect(),
            bias: bias.into_iter().map(f64::from).collect(),
            in_dim,
            out_dim,
            activation,
        });
    }
    EncoderNetwork::from_layers(layers)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))
}

/// `SNCB, version, n u64, d u32, momentum f64, n*d f32 row-major`.
pub fn write_bank_segment(w: &mut impl Write, bank: &MemoryBank) -> Result<(), CheckpointError> {
    w.write_all(BANK_MAGIC)?;
    write_u32(w, FORMAT_VERSION)?;
    write_u64(w, bank.len() as u64)?;
    write_u32(w, bank.dim() as u32)?;
    w.write_all(&bank.momentum().to_le_bytes())?;
    write_f32s(w, bank.rows_flat().iter().copied())?;
    Ok(())
}

fn read_bank_body(r: &mut impl Read) -> Result<MemoryBank, CheckpointError> {
    check_version("SNCB", read_u32(r)?)?;
    let n = read_u64(r)? as usize;
    let d = read_u32(r)? as usize;
    let momentum = read_f64(r)?;
    if !(0.0..1.0).contains(&momentum) {
        return Err(CheckpointError::Malformed(format!("bank momentum {momentum}")));
    }
    let rows = read_f32_vec(r, n * d)?;
    Ok(MemoryBank::from_parts(rows, n, d, momentum))
}

/// `SNCH, version, classes u32, feature dim u32, f32 prototypes row-major`.
pub fn write_head_segment(w: &mut impl Write, head: &SoftmaxHead) -> Result<(), CheckpointError> {
    w.write_all(HEAD_MAGIC)?;
    write_u32(w, FORMAT_VERSION)?;
    write_u32(w, head.classes() as u32)?;
    write_u32(w, head.feature_dim() as u32)?;
    write_f32s(w, head.prototypes().iter().map(|&x| x as f32))?;
    Ok(())
}

fn read_head_body(r: &mut impl Read) -> Result<SoftmaxHead, CheckpointError> {
    check_version("SNCH", read_u32(r)?)?;
    let classes = read_u32(r)? as usize;
    let feature_dim = read_u32(r)? as usize;
    let protos = read_f32_vec(r, classes * feature_dim)?;
    Ok(SoftmaxHead::from_parts(
        protos.into_iter().map(f64::from).collect(),
        classes,
        feature_dim,
    ))
}

fn write_config_segment(w: &mut impl Write, echo: &str) -> Result<(), CheckpointError> {
    w.write_all(CONFIG_MAGIC)?;
    write_u32(w, FORMAT_VERSION)?;
    write_u64(w, echo.len() as u64)?;
    w.write_all(echo.as_bytes())?;
    Ok(())
}

fn read_config_body(r: &mut impl Read) -> Result<String, CheckpointError> {
    check_version("SNCG", read_u32(r)?)?;
    let len = read_u64(r)? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| CheckpointError::Malformed(e.to_string()))
}
