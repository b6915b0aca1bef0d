//! Little-endian binary pack:
//!
//! ```text
//! header:  "VSCG" | version u32 | n_samples T C d_a d_v H W background_index (u32 each)
//! sample:  id_len u32 | id utf-8 | audio f32[T*d_a] | visual f32[T*H*W*d_v] | labels u8[T*C]
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::sample::{FeatureSample, SampleDims};
use crate::error::{Error, Result};
use crate::numkit::Tensor;

pub const PACK_MAGIC: [u8; 4] = *b"VSCG";
pub const PACK_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PackHeader {
    pub n_samples: usize,
    pub dims: SampleDims,
}

impl PackHeader {
    fn encode(&self) -> Vec<u8> {
        let d = &self.dims;
        let mut out = PACK_MAGIC.to_vec();
        for v in [PACK_VERSION as usize, self.n_samples, d.t, d.c, d.d_a, d.d_v, d.h, d.w, d.background_index] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out
    }
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} = {v} does not fit in u32")))
}

fn push_f32(out: &mut Vec<u8>, t: &Tensor, id: &str) -> Result<()> {
    for &v in t.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Config(format!("sample `{id}`: value {v} overflows f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

/// Serialize samples sharing `dims`. Values are stored as f32.
pub fn write_pack(samples: &[FeatureSample], dims: &SampleDims, path: impl AsRef<Path>) -> Result<()> {
    for s in samples {
        s.validate(dims)?;
    }
    for (v, what) in [
        (samples.len(), "n_samples"),
        (dims.t, "t"),
        (dims.c, "c"),
        (dims.d_a, "d_a"),
        (dims.d_v, "d_v"),
        (dims.h, "h"),
        (dims.w, "w"),
    ] {
        u32_field(v, what)?;
    }
    let header = PackHeader {
        n_samples: samples.len(),
        dims: *dims,
    };
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&header.encode())?;
    let mut buf = Vec::new();
    for s in samples {
        buf.clear();
        let id = s.id.as_bytes();
        buf.extend_from_slice(&u32_field(id.len(), "id length")?.to_le_bytes());
        buf.extend_from_slice(id);
        push_f32(&mut buf, &s.audio, &s.id)?;
        push_f32(&mut buf, &s.visual, &s.id)?;
        buf.extend_from_slice(&s.seg_labels);
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.bytes.len() - self.offset < n {
            return Err(Error::Format {
                offset: self.offset as u64,
                msg: format!("truncated file while reading {} ({} bytes needed, {} left)", what(), n, self.bytes.len() - self.offset),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<Vec<f64>> {
        let start = self.offset;
        let b = self.take(n * 4, what)?;
        let vals: Vec<f64> = b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: (start + 4 * i) as u64,
                msg: format!("non-finite value in {}", what()),
            });
        }
        Ok(vals)
    }
}

pub fn read_pack(path: impl AsRef<Path>) -> Result<(PackHeader, Vec<FeatureSample>)> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, offset: 0 };
    let head = || "header".to_string();
    let magic = cur.take(4, &head)?;
    if magic != PACK_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}, expected \"VSCG\"", String::from_utf8_lossy(magic)),
        });
    }
    let version = cur.u32(&head)?;
    if version != PACK_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}, expected {PACK_VERSION}"),
        });
    }
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = cur.u32(&head)? as usize;
    }
    let [n_samples, t, c, d_a, d_v, h, w, background_index] = f;
    let dims = SampleDims {
        t,
        c,
        d_a,
        d_v,
        h,
        w,
        background_index,
    };
    if [t, c, d_a, d_v, h, w].contains(&0) || background_index >= c {
        return Err(Error::Format {
            offset: 12,
            msg: format!("invalid header dims {dims:?}"),
        });
    }
    debug_assert_eq!(cur.offset, HEADER_LEN);
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let what = |part: &'static str| move || format!("{part} of sample {i}");
        let id_len = cur.u32(&what("id length"))? as usize;
        let id_bytes = cur.take(id_len, &what("id"))?;
        let id = String::from_utf8(id_bytes.to_vec()).map_err(|_| Error::Format {
            offset: (cur.offset - id_len) as u64,
            msg: format!("id of sample {i} is not valid UTF-8"),
        })?;
        let audio = Tensor::new(vec![t, d_a], cur.f32s(t * d_a, &what("audio"))?)?;
        let visual = Tensor::new(vec![t, h, w, d_v], cur.f32s(t * h * w * d_v, &what("visual"))?)?;
        let label_start = cur.offset;
        let seg_labels = cur.take(t * c, &what("labels"))?.to_vec();
        let sample = FeatureSample {
            id,
            audio,
            visual,
            seg_labels,
        };
        sample.validate(&dims).map_err(|e| Error::Format {
            offset: label_start as u64,
            msg: format!("sample {i}: {e}"),
        })?;
        samples.push(sample);
    }
    if cur.offset != bytes.len() {
        return Err(Error::Format {
            offset: cur.offset as u64,
            msg: format!("{} trailing bytes after {n_samples} samples", bytes.len() - cur.offset),
        });
    }
    Ok((PackHeader { n_samples, dims }, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::datapack::synth_dataset;

    fn fixture() -> (Vec<FeatureSample>, SampleDims) {
        let cfg = ModelConfig::tiny();
        (synth_dataset(&cfg, 3, 11).unwrap(), SampleDims::from_config(&cfg))
    }

    #[test]
    fn round_trip_is_exact_after_f32() {
        let (samples, dims) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vscg");
        write_pack(&samples, &dims, &p).unwrap();
        let (h, back) = read_pack(&p).unwrap();
        assert_eq!(h.n_samples, 3);
        assert_eq!(h.dims, dims);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.seg_labels, b.seg_labels);
            for (x, y) in a.audio.data().iter().zip(b.audio.data()) {
                assert_eq!((*x as f32) as f64, *y);
            }
            for (x, y) in a.visual.data().iter().zip(b.visual.data()) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
        // Second round trip is the identity on f32-representable data.
        let p2 = dir.path().join("b.vscg");
        write_pack(&back, &dims, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(read_pack(&p2).unwrap().1, back);
    }

    #[test]
    fn rejects_bad_magic() {
        let (samples, dims) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vscg");
        write_pack(&samples, &dims, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        fs::write(&p, &bytes).unwrap();
        let err = read_pack(&p).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncation_names_sample_and_offset() {
        let (samples, dims) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vscg");
        write_pack(&samples, &dims, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let per_sample = (bytes.len() - HEADER_LEN) / 3;
        fs::write(&p, &bytes[..HEADER_LEN + per_sample + per_sample / 2]).unwrap();
        let err = read_pack(&p).unwrap_err().to_string();
        assert!(err.contains("sample 1"), "{err}");
        assert!(err.contains("at byte"), "{err}");
    }
}
