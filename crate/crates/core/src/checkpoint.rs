//! Parameter checkpoints: a flat binary container of named arrays with a
//! shape header and the run seeds. Round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::cells::{Activation, CellFamily, CellParameters, Dims, LruCell, LruTensors, TanhCell, TanhTensors};
use crate::error::{Result, TpcError};
use crate::num::Real;

const MAGIC: &[u8; 8] = b"TPCKPT01";

fn bad(msg: impl Into<String>) -> TpcError {
    TpcError::Checkpoint(msg.into())
}

pub fn save<F: Real>(
    path: &Path,
    params: &CellParameters<F>,
    seed_data: u64,
    seed_init: u64,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(std::mem::size_of::<F>() as u8);
    out.push(match params.family() {
        CellFamily::TanhRnn => 0,
        CellFamily::Lru => 1,
    });
    let activation = match params {
        CellParameters::Tanh(c) => match c.activation {
            Activation::Tanh => 0u8,
            Activation::Identity => 1,
        },
        CellParameters::Lru(_) => 0,
    };
    out.push(activation);
    out.push(0); // reserved
    let dims = params.dims();
    for d in [dims.input, dims.recurrent, dims.hidden, dims.output] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&params.dropout_rate().to_f64().to_le_bytes());
    out.extend_from_slice(&seed_data.to_le_bytes());
    out.extend_from_slice(&seed_init.to_le_bytes());

    let mut count = 0u32;
    params.for_each_tensor(&mut |_, _, _| count += 1);
    out.extend_from_slice(&count.to_le_bytes());
    params.for_each_tensor(&mut |name, data, shape| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &s in shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        if std::mem::size_of::<F>() == 4 {
            for &x in data {
                out.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
            }
        } else {
            for &x in data {
                out.extend_from_slice(&x.to_f64().to_le_bytes());
            }
        }
    });
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(bad("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint saved at the same float width as `F`.
pub fn load<F: Real>(path: &Path) -> Result<(CellParameters<F>, (u64, u64))> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let width = r.u8()? as usize;
    if width != std::mem::size_of::<F>() {
        return Err(bad(format!(
            "checkpoint stores {width}-byte floats, requested {}",
            std::mem::size_of::<F>()
        )));
    }
    let family = match r.u8()? {
        0 => CellFamily::TanhRnn,
        1 => CellFamily::Lru,
        other => return Err(bad(format!("unknown family tag {other}"))),
    };
    let activation = match r.u8()? {
        0 => Activation::Tanh,
        1 => Activation::Identity,
        other => return Err(bad(format!("unknown activation tag {other}"))),
    };
    let _reserved = r.u8()?;
    let dims = Dims {
        input: r.u64()? as usize,
        recurrent: r.u64()? as usize,
        hidden: r.u64()? as usize,
        output: r.u64()? as usize,
    };
    let dropout = r.f64()?;
    let seed_data = r.u64()?;
    let seed_init = r.u64()?;

    let mut params: CellParameters<F> = match family {
        CellFamily::TanhRnn => CellParameters::Tanh(TanhCell {
            weights: TanhTensors::zeros(dims),
            activation,
        }),
        CellFamily::Lru => CellParameters::Lru(LruCell {
            weights: LruTensors::zeros(dims),
            dropout_rate: F::f(dropout),
        }),
    };
    let mut expected: Vec<(String, Vec<usize>, usize)> = Vec::new();
    params.for_each_tensor(&mut |name, data, shape| {
        expected.push((name.to_string(), shape.to_vec(), data.len()));
    });

    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(bad(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    let mut flat: Vec<F> = Vec::new();
    for (name, shape, len) in &expected {
        let name_len = r.u32()? as usize;
        let got_name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| bad("tensor name is not utf-8"))?;
        if &got_name != name {
            return Err(bad(format!("expected tensor `{name}`, found `{got_name}`")));
        }
        let ndim = r.u32()? as usize;
        let mut got_shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            got_shape.push(r.u64()? as usize);
        }
        if &got_shape != shape {
            return Err(bad(format!(
                "tensor `{name}` shape {got_shape:?} does not match {shape:?}"
            )));
        }
        let data_len = r.u64()? as usize;
        if data_len != *len {
            return Err(bad(format!("tensor `{name}` length mismatch")));
        }
        if width == 4 {
            for _ in 0..data_len {
                let bits = r.take(4)?;
                flat.push(F::f(f32::from_le_bytes(bits.try_into().unwrap()) as f64));
            }
        } else {
            for _ in 0..data_len {
                let bits = r.take(8)?;
                flat.push(F::f(f64::from_le_bytes(bits.try_into().unwrap())));
            }
        }
    }
    params.assign_from_flat(&flat);
    Ok((params, (seed_data, seed_init)))
}
