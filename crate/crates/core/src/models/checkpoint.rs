//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        4 bytes  "WBMC"
//! version      u16      1
//! activation   u8       0 = relu, 1 = tanh
//! head         u8       0 = linear_mse, 1 = softmax_xent
//! reduction    u8       0 = sum, 1 = mean
//! bias flags   u8       bit 0 set when layers after the first carry biases
//! layers+1     u32      number of layer sizes
//! sizes        u32 × (layers+1)
//! seed         u64
//! config_hash  u64
//! weights      f64 × Σ rows·cols, layer by layer, column-major
//! biases       f64 × Σ rows, layers 1.., only when the bias flag is set
//! ```

use std::io::{self, Read, Write};

use nalgebra::{DMatrix, DVector};

use super::{Activation, Mlp};
use crate::loss::{Loss, OutputHead, Reduction};

const MAGIC: &[u8; 4] = b"WBMC";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Mlp,
    pub seed: u64,
    pub config_hash: u64,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Mlp, seed: u64, config_hash: u64) -> io::Result<()> {
    let has_bias = model.biases.iter().skip(1).any(Option::is_some);
    if has_bias && model.biases.iter().skip(1).any(Option::is_none) {
        return Err(invalid("checkpoints require biases on all or none of the deeper layers"));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[
        match model.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        },
        match model.loss.head {
            OutputHead::LinearMse => 0,
            OutputHead::SoftmaxXent => 1,
        },
        match model.loss.reduction {
            Reduction::Sum => 0,
            Reduction::Mean => 1,
        },
        has_bias as u8,
    ])?;
    w.write_all(&(model.sizes.len() as u32).to_le_bytes())?;
    for &s in &model.sizes {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&config_hash.to_le_bytes())?;
    for m in &model.weights {
        for v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for b in model.biases.iter().flatten() {
        for v in b.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f64>> {
    (0..n).map(|_| Ok(f64::from_le_bytes(read_array::<8, _>(r)?))).collect()
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> io::Result<Checkpoint> {
    if &read_array::<4, _>(r)? != MAGIC {
        return Err(invalid("bad checkpoint magic"));
    }
    let version = u16::from_le_bytes(read_array::<2, _>(r)?);
    if version != VERSION {
        return Err(invalid(format!("unsupported checkpoint version {version}")));
    }
    let [act, head, red, flags] = read_array::<4, _>(r)?;
    let activation = match act {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        v => return Err(invalid(format!("unknown activation code {v}"))),
    };
    let head = match head {
        0 => OutputHead::LinearMse,
        1 => OutputHead::SoftmaxXent,
        v => return Err(invalid(format!("unknown head code {v}"))),
    };
    let reduction = match red {
        0 => Reduction::Sum,
        1 => Reduction::Mean,
        v => return Err(invalid(format!("unknown reduction code {v}"))),
    };
    let count = u32::from_le_bytes(read_array::<4, _>(r)?) as usize;
    if !(2..=64).contains(&count) {
        return Err(invalid(format!("implausible layer count {count}")));
    }
    let sizes: Vec<usize> = (0..count)
        .map(|_| Ok(u32::from_le_bytes(read_array::<4, _>(r)?) as usize))
        .collect::<io::Result<_>>()?;
    let seed = u64::from_le_bytes(read_array::<8, _>(r)?);
    let config_hash = u64::from_le_bytes(read_array::<8, _>(r)?);
    let mut weights = Vec::new();
    for pair in sizes.windows(2) {
        let vals = read_f64s(r, pair[0] * pair[1])?;
        weights.push(DMatrix::from_column_slice(pair[1], pair[0], &vals));
    }
    let mut biases = vec![None];
    for &s in &sizes[2..] {
        biases.push(if flags & 1 == 1 {
            Some(DVector::from_vec(read_f64s(r, s)?))
        } else {
            None
        });
    }
    let model = Mlp::from_parts(weights, biases, activation, Loss { head, reduction })
        .map_err(|e| invalid(e.to_string()))?;
    Ok(Checkpoint {
        model,
        seed,
        config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::InitScheme;

    #[test]
    fn round_trip_is_exact() {
        let m = Mlp::init(&[5, 4, 3], InitScheme::FanIn(2.0), 8)
            .unwrap()
            .with_activation(Activation::Tanh)
            .with_loss(Loss::MEAN_XENT)
            .with_deeper_biases();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, 42, 0xfeed).unwrap();
        let c = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(c.model, m);
        assert_eq!((c.seed, c.config_hash), (42, 0xfeed));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&mut &b"XXXX\x01\x00"[..]).is_err());
        let m = Mlp::init(&[2, 2], InitScheme::Constant(1.0), 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, 0, 0).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
