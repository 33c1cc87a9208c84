//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "GEOFORGE"
//! version      u32       1
//! header_len   u32
//! header       JSON      {model, train, schedule_kind, step, seed, adam_t}
//! T            u32
//! betas        T x f64
//! n_params     u32
//! per param:   u32 name_len, name (UTF-8), u32 ndim, ndim x u64 dims, f64 data
//! adam m       f64 data per param, same order and shapes
//! adam v       f64 data per param
//! n_losses     u64
//! losses       n_losses x f64
//! ```
//!
//! The RNG state is the `(seed, step)` pair in the header: every random draw
//! of a step is derived from it.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ConditionalUnet, ModelConfig};
use super::schedule::{NoiseSchedule, ScheduleKind};
use super::train::{AdamState, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::nn::{ParamGrads, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"GEOFORGE";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    schedule_kind: ScheduleKind,
    step: u64,
    seed: u64,
    adam_t: u64,
}

pub struct Checkpoint {
    pub state: TrainState,
    pub schedule: NoiseSchedule,
    pub schedule_kind: ScheduleKind,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(data.len() * 8);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(state: &TrainState, schedule: &NoiseSchedule, kind: ScheduleKind) -> Result<Vec<u8>> {
    let header = Header {
        model: state.model.config,
        train: state.config,
        schedule_kind: kind,
        step: state.step,
        seed: state.config.seed,
        adam_t: state.adam.t,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);
    put_u32(&mut out, schedule.steps() as u32);
    put_f64s(&mut out, schedule.betas());
    let params = &state.model.params;
    put_u32(&mut out, params.len() as u32);
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for d in t.shape() {
            put_u64(&mut out, *d as u64);
        }
        put_f64s(&mut out, t.data());
    }
    for moments in [&state.adam.m, &state.adam.v] {
        for id in params.ids() {
            put_f64s(&mut out, moments.get(id).data());
        }
    }
    put_u64(&mut out, state.losses.len() as u64);
    put_f64s(&mut out, &state.losses);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)?;
    let t = r.u32()? as usize;
    let schedule = NoiseSchedule::from_betas(r.f64s(t)?)?;
    let n = r.u32()? as usize;
    let mut params = ParamStore::default();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().product();
        params.insert(&name, Tensor::from_vec(&shape, r.f64s(count)?)?);
    }
    let mut m = ParamGrads::zeros_like(&params);
    let mut v = ParamGrads::zeros_like(&params);
    for moments in [&mut m, &mut v] {
        for id in params.ids() {
            let len = params.get(id).len();
            let data = r.f64s(len)?;
            moments.get_mut(id).data_mut().copy_from_slice(&data);
        }
    }
    let nl = r.u64()? as usize;
    let losses = r.f64s(nl)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let model = ConditionalUnet::from_params(header.model, params)?;
    let mut train = header.train;
    train.seed = header.seed;
    let state = TrainState {
        model,
        config: train,
        adam: AdamState { m, v, t: header.adam_t },
        step: header.step,
        losses,
    };
    Ok(Checkpoint {
        state,
        schedule,
        schedule_kind: header.schedule_kind,
    })
}

pub fn save(path: &Path, state: &TrainState, schedule: &NoiseSchedule, kind: ScheduleKind) -> Result<()> {
    let bytes = encode(state, schedule, kind)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;
    use crate::diffusion::train::{train_step, TrainSample};

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            image_channels: 1,
            cond_channels: 2,
            channels: [4, 4, 4],
            cond_width: 8,
            embed_dim: 8,
            text_dim: 8,
            hint_channels: 2,
        }
    }

    fn batch() -> Vec<TrainSample> {
        (0..3)
            .map(|k| TrainSample {
                x0: Tensor::from_vec(&[1, 8, 8], (0..64).map(|i| if (i * k) % 7 < 3 { 1.0 } else { -1.0 }).collect()).unwrap(),
                condition: Tensor::from_vec(&[2, 8, 8], (0..128).map(|i| (i % 3) as f64 / 2.0).collect()).unwrap(),
                caption: vec![0.1 * k as f64; 8],
                coords: Some((10.0, 20.0 + k as f64)),
            })
            .collect()
    }

    #[test]
    fn resume_is_bit_identical() {
        let sched = make_schedule(100, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let cfg = TrainConfig { seed: 12, ..TrainConfig::default() };
        let data = batch();
        let mut straight = TrainState::new(ConditionalUnet::new(tiny(), 4).unwrap(), cfg);
        for _ in 0..5 {
            train_step(&mut straight, &data, &sched).unwrap();
        }
        let bytes = encode(&straight, &sched, ScheduleKind::Linear).unwrap();
        let mut resumed = decode(&bytes).unwrap().state;
        assert_eq!(resumed, straight);
        for _ in 0..10 {
            train_step(&mut straight, &data, &sched).unwrap();
            train_step(&mut resumed, &data, &sched).unwrap();
        }
        assert_eq!(resumed.losses, straight.losses);
        assert_eq!(resumed.model.params, straight.model.params);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let sched = make_schedule(10, 1e-4, 2e-2, ScheduleKind::Linear).unwrap();
        let state = TrainState::new(ConditionalUnet::new(tiny(), 1).unwrap(), TrainConfig::default());
        let bytes = encode(&state, &sched, ScheduleKind::Linear).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
