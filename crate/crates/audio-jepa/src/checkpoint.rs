//! Training checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "AJEPACKP"
//! version    u32
//! step       u64      completed updates
//! config     u32 length + UTF-8 text (the resolved config echo)
//! count      u32 number of tensor records
//! record     u16 name length + name, u8 dtype (0 = f32), u8 ndim,
//!            ndim × u32 dims, row-major f32 data
//! crc32      u32 over every preceding byte
//! ```
//!
//! Tensors are stored as `ctx.*`, `tgt.*`, `pred.*`, `mask_token`, then the
//! Adam moments as `adam_m.<name>` and `adam_v.<name>` for every trainable
//! tensor. Last-step metrics are not stored.

use std::path::Path;

use ajepa_core::jepa::{JepaModel, TrainState, Trainable};
use ajepa_core::vit::ParameterSet;
use ajepa_core::Tensor;

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::fsutil;

pub const MAGIC: &[u8; 8] = b"AJEPACKP";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// A training state together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState<f32>,
}

impl Checkpoint {
    /// Short identifier: step plus the file checksum.
    pub fn id(&self) -> String {
        let bytes = encode(&self.config, &self.state);
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        format!("step{}-{crc:08x}", self.state.step)
    }
}

fn push_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn named_tensors(state: &TrainState<f32>) -> Vec<(String, &Tensor<f32>)> {
    let model = &state.model;
    let mut out: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (prefix, set) in [("ctx", &model.ctx), ("tgt", &model.tgt), ("pred", &model.pred)] {
        out.extend(set.iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
    }
    out.push(("mask_token".into(), &model.mask_token));
    for (prefix, moments) in [("adam_m", &state.m), ("adam_v", &state.v)] {
        out.extend(moments.named().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
    }
    out
}

pub fn encode(config: &RunConfig, state: &TrainState<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    let text = config.echo();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let tensors = named_tensors(state);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        push_tensor(&mut out, &name, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Write atomically; an existing file at `path` is replaced only once the new
/// one is complete.
pub fn save_checkpoint(path: &Path, config: &RunConfig, state: &TrainState<f32>) -> Result<()> {
    fsutil::write_atomic(path, &encode(config, state))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn corrupt(&self, message: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(format!("unexpected end of data at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt("text is not valid UTF-8"))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u16()? as usize;
        let name = self.string(len)?;
        let dtype = self.u8()?;
        if dtype != DTYPE_F32 {
            return Err(self.corrupt(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.corrupt(format!("tensor `{name}` is too large")))?;
        let raw = self.take(count.checked_mul(4).ok_or_else(|| self.corrupt("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| self.corrupt(e.to_string()))?;
        Ok((name, t))
    }
}

/// Parse a checkpoint image; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(cur.corrupt("not a checkpoint (bad magic)"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < cur.pos + 4 {
        return Err(cur.corrupt("file is truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(cur.corrupt("checksum mismatch (file truncated or damaged)"));
    }
    cur.bytes = body;

    let step = cur.u64()?;
    let text_len = cur.u32()? as usize;
    let text = cur.string(text_len)?;
    let config = RunConfig::parse(&text, &[]).map_err(|e| cur.corrupt(format!("embedded config: {e}")))?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        tensors.push(cur.tensor()?);
    }
    if cur.pos != body.len() {
        return Err(cur.corrupt(format!("{} trailing bytes after the last tensor", body.len() - cur.pos)));
    }
    let state = assemble(&config, step, tensors, path)?;
    Ok(Checkpoint { config, state })
}

const GROUPS: [&str; 7] = ["ctx", "tgt", "pred", "adam_m.ctx", "adam_m.pred", "adam_v.ctx", "adam_v.pred"];
const SINGLES: [&str; 3] = ["mask_token", "adam_m.mask_token", "adam_v.mask_token"];

fn assemble(config: &RunConfig, step: u64, tensors: Vec<(String, Tensor<f32>)>, path: &Path) -> Result<TrainState<f32>> {
    let shape_err = |message: String| Error::ShapeMismatch {
        path: path.to_path_buf(),
        message,
    };
    let mut groups: [Vec<(String, Tensor<f32>)>; 7] = Default::default();
    let mut singles: [Option<Tensor<f32>>; 3] = Default::default();
    for (name, t) in tensors {
        if let Some(i) = SINGLES.iter().position(|s| *s == name) {
            singles[i] = Some(t);
            continue;
        }
        let group = GROUPS.iter().enumerate().find_map(|(i, g)| {
            name.strip_prefix(g)
                .and_then(|r| r.strip_prefix('.'))
                .map(|rest| (i, rest.to_string()))
        });
        match group {
            Some((i, rest)) => groups[i].push((rest, t)),
            None => return Err(shape_err(format!("unexpected tensor `{name}`"))),
        }
    }
    let [token, m_token, v_token] = singles;
    let take = |t: Option<Tensor<f32>>, name: &str| t.ok_or_else(|| shape_err(format!("missing tensor `{name}`")));
    let [ctx, tgt, pred, m_ctx, m_pred, v_ctx, v_pred] = groups.map(ParameterSet::new);
    let model = JepaModel::from_parts(
        config.encoder_config(),
        config.predictor_config(),
        ctx?,
        tgt?,
        pred?,
        take(token, SINGLES[0])?,
    )
    .map_err(|e| shape_err(e.to_string()))?;
    let m = Trainable {
        ctx: m_ctx?,
        pred: m_pred?,
        mask_token: take(m_token, SINGLES[1])?,
    };
    let v = Trainable {
        ctx: v_ctx?,
        pred: v_pred?,
        mask_token: take(v_token, SINGLES[2])?,
    };
    for (which, moments) in [("adam_m", &m), ("adam_v", &v)] {
        moments
            .check_same_layout(&model)
            .map_err(|e| shape_err(format!("{which}: {e}")))?;
    }
    let mut state = TrainState::new(model, config.optimizer_config(), config.mask_bounds(), config.seed)?;
    state.step = step;
    state.m = m;
    state.v = v;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> RunConfig {
        RunConfig::parse(
            "audio.sample_rate = 8000\naudio.duration = 1.0\naudio.n_mels = 16\naudio.n_time_bins = 32\n\
             encoder.embed_dim = 8\nencoder.depth = 1\nencoder.num_heads = 2\n\
             predictor.embed_dim = 8\npredictor.depth = 1\npredictor.num_heads = 2\n\
             train.total_steps = 10\ntrain.warmup_steps = 2\nseed = 3\n",
            &[],
        )
        .unwrap()
    }

    fn state(cfg: &RunConfig) -> TrainState<f32> {
        let model = JepaModel::new(cfg.encoder_config(), cfg.predictor_config(), cfg.seed).unwrap();
        let mut s = TrainState::new(model, cfg.optimizer_config(), cfg.mask_bounds(), cfg.seed).unwrap();
        s.step = 7;
        for (i, t) in s.m.tensors_mut().chain(s.v.tensors_mut()).enumerate() {
            t.data_mut().iter_mut().for_each(|x| *x = i as f32 * 0.25 + 1e-3);
        }
        s.model.tgt.iter_mut().for_each(|(_, t)| t.data_mut()[0] = -2.5);
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = tiny_config();
        let s = state(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&p, &cfg, &s).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.state, s);
        assert_eq!(back.config, cfg);
        let q = dir.path().join("b.ckpt");
        save_checkpoint(&q, &back.config, &back.state).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        assert!(back.id().starts_with("step7-"));
    }

    #[test]
    fn distinct_errors() {
        let cfg = tiny_config();
        let bytes = encode(&cfg, &state(&cfg));
        let p = Path::new("x.ckpt");
        for cut in [3, 12, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut], p), Err(Error::Corrupt { .. })), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(decode(&flipped, p), Err(Error::Corrupt { .. })));

        let mut v2 = bytes.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode(&v2, p),
            Err(Error::VersionMismatch { found: 2, expected: 1, .. })
        ));

        // A config whose encoder is wider than the stored tensors.
        let wide = RunConfig::parse(&cfg.echo(), &["encoder.embed_dim=16".into()]).unwrap();
        let mut bad = encode(&wide, &state(&cfg));
        let n = bad.len() - 4;
        bad.truncate(n);
        let crc = crc32fast::hash(&bad);
        bad.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&bad, p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn atomic_replace_keeps_old_file_on_failure() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &cfg, &state(&cfg)).unwrap();
        let before = std::fs::read(&p).unwrap();
        let blocked = dir.path().join("c.ckpt/inner");
        assert!(save_checkpoint(&blocked, &cfg, &state(&cfg)).is_err());
        assert_eq!(std::fs::read(&p).unwrap(), before);
    }
}
