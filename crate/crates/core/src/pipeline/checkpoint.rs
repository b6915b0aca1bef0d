//! Binary checkpoint: header, config snapshot, training counters, RNG state,
//! Adam state and named float64 arrays (current and best-validation values).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{build_model, Model};
use super::train::{EpochRecord, Trainer};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numkit::{Adam, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub struct Checkpoint {
    pub config_text: String,
    pub cfg: ModelConfig,
    pub trainer: Trainer,
}

impl Checkpoint {
    /// Model carrying the best-validation parameters.
    pub fn best_model(&self) -> Result<Model> {
        let mut m = self.trainer.model.clone();
        m.load_values(&self.trainer.best)?;
        Ok(m)
    }

    /// Reject a checkpoint whose structure differs from `expected`.
    pub fn check_against(&self, expected: &ModelConfig) -> Result<()> {
        let found = self.cfg.entries();
        let want = expected.entries();
        const STRUCTURAL: &[&str] = &[
            "t", "c", "d_a", "d_v", "h", "w", "d_m", "d_l", "d_p", "d_s", "d_e", "d_i", "d_f", "d_h",
            "background_index", "mode", "escm", "cere", "shared_cere",
        ];
        for key in STRUCTURAL {
            let f = found.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
            let w = want.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
            if f != w {
                return Err(Error::Mismatch {
                    field: key.to_string(),
                    found: f.unwrap_or_default(),
                    expected: w.unwrap_or_default(),
                });
            }
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(t: &Trainer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_str(&mut out, &t.model.cfg.to_text());
    put_u64(&mut out, t.epoch as u64);
    put_u64(&mut out, t.best_epoch as u64);
    put_u64(&mut out, t.since_best as u64);
    put_f64s(&mut out, &[t.best_val]);
    out.extend_from_slice(&t.rng.get_seed());
    put_u64(&mut out, t.rng.get_stream());
    out.extend_from_slice(&t.rng.get_word_pos().to_le_bytes());
    put_u32(&mut out, t.history.len() as u32);
    for r in &t.history {
        put_u64(&mut out, r.epoch as u64);
        put_f64s(&mut out, &[r.train_loss, r.val_acc]);
    }
    let (m, v) = t.adam.moments();
    put_f64s(&mut out, &[t.adam.lr]);
    put_u64(&mut out, t.adam.step_count());
    out.push(u8::from(!m.is_empty()));
    put_u32(&mut out, t.model.store.len() as u32);
    for (id, p) in t.model.store.iter() {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.value.dims().len() as u32);
        for &d in p.value.dims() {
            put_u32(&mut out, d as u32);
        }
        put_f64s(&mut out, p.value.data());
        put_f64s(&mut out, t.best.value(id).data());
        if !m.is_empty() {
            put_f64s(&mut out, &m[id.index()]);
            put_f64s(&mut out, &v[id.index()]);
        }
    }
    out
}

pub fn save_checkpoint(t: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(t))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos as u64;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            msg: format!("{what} is not UTF-8"),
        })
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Mismatch {
            field: "version".into(),
            found: version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let config_text = c.string("config")?;
    let cfg = ModelConfig::from_text(ModelConfig::default(), &config_text)?;
    let epoch = c.u64("epoch")? as usize;
    let best_epoch = c.u64("best epoch")? as usize;
    let since_best = c.u64("patience counter")? as usize;
    let best_val = c.f64s(1, "best accuracy")?[0];
    let seed: [u8; 32] = c.take(32, "rng seed")?.try_into().unwrap();
    let stream = c.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(c.take(16, "rng position")?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let n_hist = c.u32("history length")? as usize;
    let mut history = Vec::with_capacity(n_hist);
    for _ in 0..n_hist {
        let e = c.u64("history epoch")? as usize;
        let v = c.f64s(2, "history record")?;
        history.push(EpochRecord {
            epoch: e,
            train_loss: v[0],
            val_acc: v[1],
        });
    }
    let lr = c.f64s(1, "learning rate")?[0];
    let step = c.u64("optimizer step")?;
    let has_moments = c.take(1, "moment flag")?[0] == 1;

    let mut model = build_model(&cfg)?;
    let mut best = model.store.clone();
    let n = c.u32("parameter count")? as usize;
    if n != model.store.len() {
        return Err(Error::Mismatch {
            field: "parameter count".into(),
            found: n.to_string(),
            expected: model.store.len().to_string(),
        });
    }
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for i in 0..n {
        let name = c.string("parameter name")?;
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32("dims")? as usize);
        }
        let numel = dims.iter().product();
        let id = model.store.find(&name).ok_or_else(|| Error::Mismatch {
            field: name.clone(),
            found: "present".into(),
            expected: "absent from this configuration".into(),
        })?;
        if id.index() != i || model.store.value(id).dims() != dims.as_slice() {
            return Err(Error::Mismatch {
                field: name.clone(),
                found: format!("{dims:?}"),
                expected: format!("{:?}", model.store.value(id).dims()),
            });
        }
        model.store.set_value(id, Tensor::new(dims.clone(), c.f64s(numel, &name)?)?)?;
        best.set_value(id, Tensor::new(dims, c.f64s(numel, &name)?)?)?;
        if has_moments {
            m.push(c.f64s(numel, &name)?);
            v.push(c.f64s(numel, &name)?);
        }
    }
    if c.pos != buf.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            msg: "trailing bytes after checkpoint".into(),
        });
    }
    let trainer = Trainer {
        model,
        adam: Adam::restore(lr, step, m, v),
        rng,
        epoch,
        best_val,
        best_epoch,
        since_best,
        best,
        history,
    };
    Ok(Checkpoint {
        config_text,
        cfg,
        trainer,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
