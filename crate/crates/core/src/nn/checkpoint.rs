//! Binary checkpoints: little-endian header, config, parameters, Adam moments,
//! step counter and RNG state.
//!
//! Values are stored at the precision named in the config (4 or 8 bytes), so a
//! round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::linalg::Scalar;
use super::optim::OptimizerState;
use super::params::{ModelConfig, Params, Precision};
use super::ModelError;

const MAGIC: &[u8; 4] = b"RMEC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: Params<T>,
    pub optim: OptimizerState<T>,
    pub rng: RngState,
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_vals<T: Scalar>(w: &mut impl Write, xs: &[T], prec: Precision) -> std::io::Result<()> {
    for x in xs {
        match prec {
            Precision::TrainF32 => w.write_all(&(x.f64() as f32).to_le_bytes())?,
            Precision::TestF64 => w.write_all(&x.f64().to_le_bytes())?,
        }
    }
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N], ModelError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| ModelError::Checkpoint(format!("truncated: {e}")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<usize, ModelError> {
    Ok(u32::from_le_bytes(get(r)?) as usize)
}

fn get_vals<T: Scalar>(r: &mut impl Read, n: usize, prec: Precision) -> Result<Vec<T>, ModelError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let v = match prec {
            Precision::TrainF32 => f32::from_le_bytes(get(r)?) as f64,
            Precision::TestF64 => f64::from_le_bytes(get(r)?),
        };
        out.push(T::lit(v));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<(), ModelError> {
    let cfg = &ck.params.cfg;
    let n = ck.params.data.len();
    if ck.optim.m.len() != n || ck.optim.v.len() != n {
        return Err(ModelError::ShapeMismatch { expected: n, got: ck.optim.m.len() });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    for v in [cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_context] {
        put_u32(&mut w, v as u32)?;
    }
    w.write_all(&[match cfg.precision {
        Precision::TestF64 => 0u8,
        Precision::TrainF32 => 1u8,
    }])?;
    w.write_all(&(n as u64).to_le_bytes())?;
    put_vals(&mut w, &ck.params.data, cfg.precision)?;
    put_vals(&mut w, &ck.optim.m, cfg.precision)?;
    put_vals(&mut w, &ck.optim.v, cfg.precision)?;
    w.write_all(&ck.optim.step.to_le_bytes())?;
    w.write_all(&ck.rng.seed)?;
    w.write_all(&ck.rng.stream.to_le_bytes())?;
    w.write_all(&ck.rng.word_pos.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    if &get::<4>(&mut r)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION as usize {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = get_u32(&mut r)?;
    }
    let precision = match get::<1>(&mut r)?[0] {
        0 => Precision::TestF64,
        1 => Precision::TrainF32,
        b => return Err(ModelError::Checkpoint(format!("unknown precision tag {b}"))),
    };
    let cfg = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        d_ff: dims[4],
        max_context: dims[5],
        precision,
    };
    cfg.validate()?;
    let mut params = Params::<T>::zeros(cfg);
    let n = u64::from_le_bytes(get(&mut r)?) as usize;
    if n != params.data.len() {
        return Err(ModelError::ShapeMismatch { expected: params.data.len(), got: n });
    }
    params.data = get_vals(&mut r, n, precision)?;
    let m = get_vals(&mut r, n, precision)?;
    let v = get_vals(&mut r, n, precision)?;
    let step = u64::from_le_bytes(get(&mut r)?);
    let seed = get::<32>(&mut r)?;
    let stream = u64::from_le_bytes(get(&mut r)?);
    let word_pos = u128::from_le_bytes(get(&mut r)?);
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { params, optim: OptimizerState { m, v, step }, rng: RngState { seed, stream, word_pos } })
}
