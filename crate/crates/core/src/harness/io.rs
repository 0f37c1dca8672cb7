//! Binary formats: weights (`MGVE`), projected tokens (`MGVT`) and raw
//! videos (`MGVV`). All integers and floats are little-endian; tensors are
//! stored as `f32`.

use std::fs;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::media::VideoTensor;
use crate::numerics::Tensor;
use crate::projector::ProjectedTokens;
use crate::weights::{EncoderWeights, Params};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MGVE";
pub const WEIGHTS_VERSION: u16 = 1;
pub const TOKENS_MAGIC: &[u8; 4] = b"MGVT";
pub const VIDEO_MAGIC: &[u8; 4] = b"MGVV";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!(
                    "{what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format(format!("{what}: size overflow")))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(Error::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(found)
            )));
        }
        Ok(())
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::OutOfRange(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn weights_to_bytes(w: &EncoderWeights) -> Result<Vec<u8>> {
    w.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let config = w.config.to_kv();
    put_u32(&mut out, config.len(), "config block length")?;
    out.extend_from_slice(config.as_bytes());
    for (name, t) in w.params.named() {
        put_u32(&mut out, name.len(), "name length")?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank(), "rank")?;
        for &d in t.shape() {
            put_u32(&mut out, d, "dimension")?;
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<EncoderWeights> {
    let mut r = Reader::new(bytes);
    r.magic(WEIGHTS_MAGIC)?;
    let version = r.u16("version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config block")?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let config = ModelConfig::from_kv(text)?;
    let layout = Params::shapes(&config);
    let expected = layout.named();
    let mut leaves = Vec::with_capacity(expected.len());
    for (want_name, want_shape) in &expected {
        if r.at_end() {
            return Err(Error::Truncated(format!("missing tensor {want_name}")));
        }
        let name_len = r.u32("name length")? as usize;
        let name = r.take(name_len, "tensor name")?;
        if name != want_name.as_bytes() {
            return Err(Error::Format(format!(
                "expected tensor {want_name}, found {}",
                String::from_utf8_lossy(name)
            )));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| Ok(r.u32("dimension")? as usize))
            .collect::<Result<Vec<_>>>()?;
        if &shape != *want_shape {
            return Err(Error::Format(format!(
                "{want_name}: expected shape {want_shape:?}, found {shape:?}"
            )));
        }
        let count = shape.iter().product();
        leaves.push(Tensor::new(shape, r.f32s(count, want_name)?)?);
    }
    if !r.at_end() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    let w = EncoderWeights {
        config,
        params: layout.with_leaves(leaves)?,
    };
    w.validate()?;
    Ok(w)
}

pub fn save_weights(w: &EncoderWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, weights_to_bytes(w)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<EncoderWeights> {
    weights_from_bytes(&fs::read(path)?)
}

/// `MGVT`, `u32 N`, `u32 d`, `N` u32 chunk ids, `N·d` f32 values.
pub fn tokens_to_bytes(t: &ProjectedTokens) -> Result<Vec<u8>> {
    let (n, d) = (t.len(), t.tokens.cols());
    let mut out = Vec::with_capacity(12 + 4 * n * (d + 1));
    out.extend_from_slice(TOKENS_MAGIC);
    put_u32(&mut out, n, "token count")?;
    put_u32(&mut out, d, "token width")?;
    for &id in &t.chunk_ids {
        put_u32(&mut out, id, "chunk id")?;
    }
    put_f32s(&mut out, t.tokens.data());
    Ok(out)
}

pub fn tokens_from_bytes(bytes: &[u8]) -> Result<ProjectedTokens> {
    let mut r = Reader::new(bytes);
    r.magic(TOKENS_MAGIC)?;
    let n = r.u32("token count")? as usize;
    let d = r.u32("token width")? as usize;
    let chunk_ids = (0..n)
        .map(|_| Ok(r.u32("chunk id")? as usize))
        .collect::<Result<Vec<_>>>()?;
    let tokens = Tensor::new([n, d], r.f32s(n * d, "tokens")?)?;
    if !r.at_end() {
        return Err(Error::Format("trailing bytes after tokens".into()));
    }
    Ok(ProjectedTokens { tokens, chunk_ids })
}

pub fn save_tokens(t: &ProjectedTokens, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, tokens_to_bytes(t)?)?;
    Ok(())
}

pub fn load_tokens(path: impl AsRef<Path>) -> Result<ProjectedTokens> {
    tokens_from_bytes(&fs::read(path)?)
}

/// `MGVV`, `u32 T, H, W`, `f32 fps`, then `T·H·W·3` f32 values.
pub fn video_to_bytes(v: &VideoTensor) -> Result<Vec<u8>> {
    let (h, w) = v.frame_size();
    let mut out = Vec::with_capacity(20 + 4 * v.frames().len());
    out.extend_from_slice(VIDEO_MAGIC);
    put_u32(&mut out, v.len(), "frame count")?;
    put_u32(&mut out, h, "height")?;
    put_u32(&mut out, w, "width")?;
    out.extend_from_slice(&(v.fps() as f32).to_le_bytes());
    put_f32s(&mut out, v.frames().data());
    Ok(out)
}

pub fn video_from_bytes(bytes: &[u8]) -> Result<VideoTensor> {
    let mut r = Reader::new(bytes);
    r.magic(VIDEO_MAGIC)?;
    let t = r.u32("frame count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let fps = r.f32("fps")? as f64;
    let count = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Error::Format("video extents overflow".into()))?;
    let frames = Tensor::new([t, h, w, 3], r.f32s(count, "frames")?)?;
    if !r.at_end() {
        return Err(Error::Format("trailing bytes after frames".into()));
    }
    VideoTensor::from_frames(frames, fps)
}

pub fn save_video(v: &VideoTensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, video_to_bytes(v)?)?;
    Ok(())
}

pub fn load_video(path: impl AsRef<Path>) -> Result<VideoTensor> {
    video_from_bytes(&fs::read(path)?)
}
