//! Encoder-head checkpoints.
//!
//! ```text
//! "VOPC" | version: u32 = 1 | n_dims: u32 | dims: n_dims × u32 | dropout: f32
//! per layer l: weights dims[l] × dims[l+1] f32 row-major | bias dims[l+1] f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::features::read_f32s;
use super::{atomic_write, read_exact_or_corrupt};
use crate::encoder::{EncoderHead, Layer};
use crate::error::{Result, VopError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VOPC";
const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(head: &EncoderHead, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    atomic_write(path, |f| {
        let mut w = BufWriter::new(f);
        let io = |e| VopError::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        let dims = head.layer_dims();
        w.write_all(&(dims.len() as u32).to_le_bytes()).map_err(io)?;
        for d in &dims {
            w.write_all(&(*d as u32).to_le_bytes()).map_err(io)?;
        }
        w.write_all(&(head.dropout_rate() as f32).to_le_bytes())
            .map_err(io)?;
        for layer in head.layers() {
            for v in layer.weights.iter().chain(layer.bias.iter()) {
                w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<EncoderHead> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| VopError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact_or_corrupt(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(VopError::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    read_exact_or_corrupt(&mut r, &mut word, "version")?;
    if u32::from_le_bytes(word) != CHECKPOINT_VERSION {
        return Err(VopError::Format("unsupported checkpoint version".into()));
    }
    read_exact_or_corrupt(&mut r, &mut word, "dim count")?;
    let n_dims = u32::from_le_bytes(word) as usize;
    if !(2..=64).contains(&n_dims) {
        return Err(VopError::Corruption(format!("implausible layer count {n_dims}")));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        read_exact_or_corrupt(&mut r, &mut word, "layer dims")?;
        dims.push(u32::from_le_bytes(word) as usize);
    }
    read_exact_or_corrupt(&mut r, &mut word, "dropout")?;
    let dropout = f32::from_le_bytes(word) as f64;
    let mut layers = Vec::with_capacity(n_dims - 1);
    for w in dims.windows(2) {
        let weights = read_f32s(&mut r, w[0] * w[1])?;
        let bias = read_f32s(&mut r, w[1])?;
        layers.push(Layer {
            weights: Array2::from_shape_vec((w[0], w[1]), weights)
                .map_err(|e| VopError::Corruption(e.to_string()))?
                .mapv(f64::from),
            bias: Array1::from_vec(bias).mapv(f64::from),
        });
    }
    if r.read(&mut [0u8; 1]).map_err(|e| VopError::io(path, e))? != 0 {
        return Err(VopError::Corruption("trailing checkpoint bytes".into()));
    }
    EncoderHead::from_layers(layers, dropout)
}
