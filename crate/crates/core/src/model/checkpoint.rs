//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic     "FLOWGAN\0"
//! version   u32
//! length    u64   bytes of payload that follow
//! payload   mode u8, scale f64, vocab, train config, step u64, epochs u64,
//!           rng (seed [u8; 32], stream u64, word_pos u128),
//!           parameters (name, dims, adam step, value, m, v),
//!           batch-norm running buffers
//! ```
//!
//! Gradients are not stored; they are always zeroed before use.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{ConditionMode, ConditionVocab, FlowGan, ModelError, Result, TrainConfig};
use crate::tensor::{AdamConfig, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FLOWGAN\0";
const HEADER_LEN: usize = 8 + 4 + 8;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptFile(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("size overflow"))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid utf-8 string"))
    }
}

fn mode_tag(mode: ConditionMode) -> u8 {
    match mode {
        ConditionMode::Conditional => 0,
        ConditionMode::Unconditional => 1,
    }
}

/// Serializes a model into checkpoint bytes.
pub fn to_bytes(model: &FlowGan) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u8(mode_tag(model.mode));
    w.f64(model.scale);

    w.u32(model.vocab.len() as u32);
    for (label, &n) in model.vocab.labels().iter().zip(model.vocab.sizes()) {
        w.str(label);
        w.u32(n as u32);
    }

    let c = &model.config;
    w.u64(c.epochs as u64);
    w.u64(c.batch_size as u64);
    w.f64s(&[c.adam.lr, c.adam.beta1, c.adam.beta2, c.adam.eps, c.real_label, c.fake_label]);
    w.u64(model.step);
    w.u64(model.epochs_done);

    w.0.extend_from_slice(&model.rng.get_seed());
    w.u64(model.rng.get_stream());
    w.u128(model.rng.get_word_pos());

    w.u32(model.store.len() as u32);
    for (_, p) in model.store.iter() {
        w.str(&p.name);
        w.u32(p.value.shape().len() as u32);
        for &d in p.value.shape() {
            w.u64(d as u64);
        }
        w.u64(p.step);
        w.f64s(p.value.data());
        w.f64s(p.first_moment.data());
        w.f64s(p.second_moment.data());
    }

    let norms: Vec<_> = model.generator.norms.iter().chain(&model.discriminator.norms).collect();
    w.u32(norms.len() as u32);
    for bn in norms {
        w.u32(bn.running_mean.len() as u32);
        w.f64s(&bn.running_mean);
        w.f64s(&bn.running_var);
    }

    let mut out = Vec::with_capacity(HEADER_LEN + w.0.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.0.len() as u64).to_le_bytes());
    out.extend_from_slice(&w.0);
    out
}

/// Parses checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<FlowGan> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).map_err(|_| corrupt("file too short for header"))? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.usize()?;
    if bytes.len() - HEADER_LEN != len {
        return Err(corrupt(format!(
            "payload is {} bytes, header says {len}",
            bytes.len() - HEADER_LEN
        )));
    }

    let mode = match r.u8()? {
        0 => ConditionMode::Conditional,
        1 => ConditionMode::Unconditional,
        t => return Err(corrupt(format!("unknown mode tag {t}"))),
    };
    let scale = r.f64()?;

    let labels = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..labels {
        let label = r.str()?;
        let n = r.u32()? as usize;
        entries.push((label, n));
    }
    let vocab = ConditionVocab::new(entries).map_err(|e| corrupt(format!("vocabulary: {e}")))?;

    let epochs = r.usize()?;
    let batch_size = r.usize()?;
    let f = r.f64s(6)?;
    let config = TrainConfig {
        epochs,
        batch_size,
        adam: AdamConfig {
            lr: f[0],
            beta1: f[1],
            beta2: f[2],
            eps: f[3],
        },
        real_label: f[4],
        fake_label: f[5],
    };
    let step = r.u64()?;
    let epochs_done = r.u64()?;

    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = r.u128()?;

    // Rebuild the architecture, then overwrite its state.
    let mut model = FlowGan::new(vocab, scale, mode, config, 0)
        .map_err(|e| corrupt(format!("invalid stored settings: {e}")))?;
    model.step = step;
    model.epochs_done = epochs_done;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    model.rng = rng;

    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(corrupt(format!("{count} parameters stored, model has {}", model.store.len())));
    }
    for p in model.store.iter_mut() {
        let name = r.str()?;
        if name != p.name {
            return Err(corrupt(format!("parameter {name:?} found where {:?} expected", p.name)));
        }
        let ndims = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndims.min(8));
        for _ in 0..ndims {
            dims.push(r.usize()?);
        }
        if dims != p.value.shape() {
            return Err(corrupt(format!("parameter {name:?} has shape {dims:?}")));
        }
        p.step = r.u64()?;
        let numel = p.value.len();
        for t in [&mut p.value, &mut p.first_moment, &mut p.second_moment] {
            *t = Tensor::new(dims.clone(), r.f64s(numel)?)?;
        }
        p.grad = Tensor::zeros(&dims);
    }

    let norms = r.u32()? as usize;
    let FlowGan {
        generator,
        discriminator,
        ..
    } = &mut model;
    let mut targets: Vec<_> = generator.norms.iter_mut().chain(discriminator.norms.iter_mut()).collect();
    if norms != targets.len() {
        return Err(corrupt(format!("{norms} batch-norm layers stored")));
    }
    for bn in targets.iter_mut() {
        let c = r.u32()? as usize;
        if c != bn.running_mean.len() {
            return Err(corrupt("batch-norm channel count mismatch"));
        }
        bn.running_mean = r.f64s(c)?;
        bn.running_var = r.f64s(c)?;
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes after checkpoint payload"));
    }
    Ok(model)
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(model: &FlowGan, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<FlowGan> {
    from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless it was trained in `mode`.
pub fn load_checkpoint_as(path: &Path, mode: ConditionMode) -> Result<FlowGan> {
    let model = load_checkpoint(path)?;
    if model.mode != mode {
        return Err(ModelError::ModeMismatch {
            expected: mode,
            found: model.mode,
        });
    }
    Ok(model)
}
