//! Binary model file.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic        4 bytes  "WVTF"
//! version      u32      1
//! layers       u32
//! vocab        u32
//! max_len      u32
//! d_model      u32
//! heads        u32
//! d_head       u32      (= d_k = d_v)
//! d_ff         u32
//! ln_placement u8       0 post, 1 pre
//! positional   u8       0 learned, 1 sinusoidal
//! reserved     u8 x 2   zero
//! final_ln_eps f64
//! per layer:
//!   wavy       u8       0 / 1
//!   variant    u8       0 diffuse, 1 wave, 2 mix_output, 3 mix_velocity
//!   activation u8       0 relu, 1 gelu
//!   reserved   u8       zero
//!   gate_cols  u32      1 (shared) or d_model
//!   tau        f64
//!   ln1_eps    f64
//!   ln2_eps    f64
//! tensors: row-major f64 in ModelParams::tensors() order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{LnPlacement, ModelParams, Positional};
use super::BlockParams;
use crate::attention::{AttentionParams, HeadParams};
use crate::dynamics::{StepConfig, Variant};
use crate::error::{Error, Result};
use crate::norms_ffn::{Activation, FfnParams, LayerNormParams};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"WVTF";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_model(w: &mut impl Write, m: &ModelParams) -> Result<()> {
    m.validate()?;
    if m.head.cols() != m.vocab() {
        return Err(Error::Format("output head must map to the input vocabulary".into()));
    }
    let (heads, d_head, d_ff) = match m.layers.first() {
        Some(l) => (l.attn.heads.len(), l.attn.d_h(), l.ffn.w1.cols()),
        None => (0, 0, 0),
    };
    for l in &m.layers {
        if l.attn.heads.len() != heads
            || l.attn.d_h() != d_head
            || l.attn.d_k() != d_head
            || l.ffn.w1.cols() != d_ff
        {
            return Err(Error::Format("layers must share head count and widths".into()));
        }
    }
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    put_u32(w, m.layers.len())?;
    for v in [m.vocab(), m.max_len(), m.d_model(), heads, d_head, d_ff] {
        put_u32(w, v)?;
    }
    let placement = match m.ln_placement {
        LnPlacement::Post => 0u8,
        LnPlacement::Pre => 1,
    };
    let positional = match m.positional_kind {
        Positional::Learned => 0u8,
        Positional::Sinusoidal => 1,
    };
    w.write_all(&[placement, positional, 0, 0])?;
    put_f64(w, m.final_ln.eps)?;
    for l in &m.layers {
        let variant = Variant::ALL.iter().position(|&v| v == l.step.variant).expect("known variant") as u8;
        let act = match l.ffn.activation {
            Activation::Relu => 0u8,
            Activation::Gelu => 1,
        };
        w.write_all(&[l.wavy as u8, variant, act, 0])?;
        put_u32(w, l.step.theta.cols())?;
        put_f64(w, l.step.tau)?;
        put_f64(w, l.ln1.eps)?;
        put_f64(w, l.ln2.eps)?;
    }
    for (_, t) in m.tensors() {
        for &v in t.data() {
            put_f64(w, v)?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>()?))
    }
}

pub fn read_model(r: impl Read) -> Result<ModelParams> {
    let mut r = Reader { inner: r };
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let layers = r.u32()?;
    let [vocab, max_len, d, heads, d_head, d_ff] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    let [placement, positional, _, _] = r.bytes::<4>()?;
    let ln_placement = match placement {
        0 => LnPlacement::Post,
        1 => LnPlacement::Pre,
        b => return Err(Error::Format(format!("bad ln_placement {b}"))),
    };
    let positional_kind = match positional {
        0 => Positional::Learned,
        1 => Positional::Sinusoidal,
        b => return Err(Error::Format(format!("bad positional kind {b}"))),
    };
    let final_eps = r.f64()?;
    let mut blocks = Vec::with_capacity(layers);
    for _ in 0..layers {
        let [wavy, variant, act, _] = r.bytes::<4>()?;
        let gate_cols = r.u32()?;
        let tau = r.f64()?;
        let eps1 = r.f64()?;
        let eps2 = r.f64()?;
        let variant = *Variant::ALL
            .get(variant as usize)
            .ok_or_else(|| Error::Format(format!("bad variant {variant}")))?;
        let activation = match act {
            0 => Activation::Relu,
            1 => Activation::Gelu,
            b => return Err(Error::Format(format!("bad activation {b}"))),
        };
        let head = || HeadParams {
            wq: Matrix::zeros(d, d_head),
            wk: Matrix::zeros(d, d_head),
            wv: Matrix::zeros(d, d_head),
        };
        blocks.push(BlockParams {
            attn: AttentionParams {
                heads: (0..heads).map(|_| head()).collect(),
                wo: Matrix::zeros(heads * d_head, d),
            },
            ln1: LayerNormParams::identity(d, eps1),
            ln2: LayerNormParams::identity(d, eps2),
            ffn: FfnParams::zeros(d, d_ff, activation),
            step: StepConfig::new(variant, tau).with_theta(Matrix::zeros(1, gate_cols)),
            wavy: wavy != 0,
        });
    }
    let mut m = ModelParams {
        embedding: Matrix::zeros(vocab, d),
        positional: Matrix::zeros(max_len, d),
        positional_kind,
        layers: blocks,
        final_ln: LayerNormParams::identity(d, final_eps),
        head: Matrix::zeros(d, vocab),
        ln_placement,
    };
    for t in m.tensors_mut() {
        for v in t.data_mut() {
            *v = r.f64()?;
        }
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    m.validate()?;
    Ok(m)
}

pub fn save_model(path: impl AsRef<Path>, m: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_model(BufReader::new(File::open(path)?))
}
