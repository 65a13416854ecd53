//! Versioned little-endian binary checkpoints.
//!
//! ```text
//! "GMMD" | u32 version | u8 kind (0 = encoder, 1 = detector model)
//! model only: u32 k | u32 l | f64 M | u8 calibrated | k x f64 tau
//! u32 layer count, then per layer:
//!     u32 in | u32 out | u8 activation (0 = relu, 1 = linear)
//!     out*in x f64 weight (row-major) | out x f64 bias
//! ```
//!
//! Reals are stored as raw IEEE-754 bits, so files round-trip exactly.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::autodiff::{Activation, EncoderNetwork, Layer};
use crate::error::{Error, Result};
use crate::gmm::{DetectorModel, GaussianMixtureHead};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GMMD";
const VERSION: u32 = 1;
const KIND_ENCODER: u8 = 0;
const KIND_MODEL: u8 = 1;

fn corrupt(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated or unreadable: {e}"))
}

fn write_encoder(w: &mut impl Write, net: &EncoderNetwork) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(net.layers().len() as u32)?;
    for layer in net.layers() {
        w.write_u32::<LittleEndian>(layer.in_dim() as u32)?;
        w.write_u32::<LittleEndian>(layer.out_dim() as u32)?;
        w.write_u8(match layer.activation {
            Activation::Relu => 0,
            Activation::Linear => 1,
        })?;
        for &v in layer.weight.data().iter().chain(layer.bias.data()) {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| r.read_f64::<LittleEndian>().map_err(corrupt)).collect()
}

fn read_encoder(r: &mut impl Read) -> Result<EncoderNetwork> {
    let n = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let n_in = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let n_out = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let activation = match r.read_u8().map_err(corrupt)? {
            0 => Activation::Relu,
            1 => Activation::Linear,
            t => return Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
        };
        let weight = Tensor::matrix(n_out, n_in, read_f64s(r, n_out * n_in)?)?;
        let bias = Tensor::vector(read_f64s(r, n_out)?)?;
        layers.push(Layer::new(weight, bias, activation)?);
    }
    EncoderNetwork::new(layers)
}

fn read_header(r: &mut impl Read, expect_kind: u8) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(corrupt)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(corrupt)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = r.read_u8().map_err(corrupt)?;
    if kind != expect_kind {
        return Err(Error::Checkpoint(format!("checkpoint kind {kind}, expected {expect_kind}")));
    }
    Ok(())
}

fn header(kind: u8) -> Vec<u8> {
    let mut buf = MAGIC.to_vec();
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(kind);
    buf
}

pub fn encode_encoder(net: &EncoderNetwork) -> Vec<u8> {
    let mut buf = header(KIND_ENCODER);
    write_encoder(&mut buf, net).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode_encoder(bytes: &[u8]) -> Result<EncoderNetwork> {
    let mut r = Cursor::new(bytes);
    read_header(&mut r, KIND_ENCODER)?;
    read_encoder(&mut r)
}

pub fn encode_model(model: &DetectorModel) -> Vec<u8> {
    let mut buf = header(KIND_MODEL);
    let head = &model.head;
    let w = &mut buf;
    (|| -> std::io::Result<()> {
        w.write_u32::<LittleEndian>(head.k() as u32)?;
        w.write_u32::<LittleEndian>(head.block_width() as u32)?;
        w.write_f64::<LittleEndian>(head.magnitude())?;
        match head.thresholds() {
            Some(tau) => {
                w.write_u8(1)?;
                for &t in tau {
                    w.write_f64::<LittleEndian>(t)?;
                }
            }
            None => w.write_u8(0)?,
        }
        write_encoder(w, &model.encoder)
    })()
    .expect("writing to a Vec cannot fail");
    buf
}

pub fn decode_model(bytes: &[u8]) -> Result<DetectorModel> {
    let mut r = Cursor::new(bytes);
    read_header(&mut r, KIND_MODEL)?;
    let k = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
    let l = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
    let magnitude = r.read_f64::<LittleEndian>().map_err(corrupt)?;
    let mut head = GaussianMixtureHead::build(k, l, magnitude)?;
    if r.read_u8().map_err(corrupt)? == 1 {
        let tau = (0..k)
            .map(|_| r.read_f64::<LittleEndian>().map_err(corrupt))
            .collect::<Result<Vec<_>>>()?;
        head.set_thresholds(tau)?;
    }
    let encoder = read_encoder(&mut r)?;
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    DetectorModel::new(encoder, head)
}

pub fn save_model(model: &DetectorModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DetectorModel> {
    decode_model(&fs::read(path)?)
}
