//! Versioned binary checkpoints of a run.
//!
//! Layout (little-endian): magic `CSCK`, format version `u32`, payload length
//! `u64`, payload, SHA-256 of the payload.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::train::RunState;
use crate::masking::{GateMode, GatePenalty, MaskedGroup, StraightThrough, TemperatureSchedule};
use crate::model::{Model, ModelSpec};
use crate::optim::{GroupConfig, OptimConfig, OptimKind, Optimizer, Slot};
use crate::param::{Param, ParamId, Role};
use crate::search::RewindStore;
use crate::tensor::{Precision, Tensor};

pub const MAGIC: &[u8; 4] = b"CSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: RunState,
    pub rewind: Option<RewindStore>,
}

#[derive(Default)]
pub(crate) struct Enc(pub Vec<u8>);

impl Enc {
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    pub fn bits(&mut self, bits: &[bool]) {
        self.u64(bits.len() as u64);
        let mut packed = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        self.0.extend_from_slice(&packed);
    }
    pub fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for &x in xs {
            self.f64(x);
        }
    }
    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f64s(t.data());
    }
}

pub(crate) struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Dec { buf, pos: 0 }
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity(format!("payload ends at byte {}, needed {n} more", self.buf.len())))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Integrity("length overflows usize".into()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }
    pub fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Integrity("invalid UTF-8 string".into()))
    }
    pub fn bits(&mut self) -> Result<Vec<bool>> {
        let n = self.usize()?;
        let packed = self.take(n.div_ceil(8))?;
        Ok((0..n).map(|i| packed[i / 8] & (1 << (i % 8)) != 0).collect())
    }
    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > self.buf.len() / 8 {
            return Err(Error::Integrity(format!("array of {n} floats exceeds payload")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let data = self.f64s()?;
        Tensor::new(shape, data).map_err(|e| Error::Integrity(format!("bad tensor: {e}")))
    }
    pub fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Integrity(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn role_code(r: Role) -> u8 {
    match r {
        Role::Weight => 0,
        Role::Bias => 1,
        Role::Score => 2,
    }
}

fn role_from(c: u8) -> Result<Role> {
    Ok(match c {
        0 => Role::Weight,
        1 => Role::Bias,
        2 => Role::Score,
        _ => return Err(Error::Integrity(format!("unknown parameter role {c}"))),
    })
}

fn mode_code(m: GateMode) -> u8 {
    match m {
        GateMode::None => 0,
        GateMode::Hard => 1,
        GateMode::SoftDeterministic => 2,
        GateMode::StochasticBernoulli => 3,
    }
}

fn mode_from(c: u8) -> Result<GateMode> {
    Ok(match c {
        0 => GateMode::None,
        1 => GateMode::Hard,
        2 => GateMode::SoftDeterministic,
        3 => GateMode::StochasticBernoulli,
        _ => return Err(Error::Integrity(format!("unknown gate mode {c}"))),
    })
}

fn encode_group(e: &mut Enc, g: &GroupConfig) {
    match g.optimizer {
        OptimKind::Sgd { momentum } => {
            e.u8(0);
            e.f64(momentum);
        }
        OptimKind::Adam { beta1, beta2, eps } => {
            e.u8(1);
            e.f64(beta1);
            e.f64(beta2);
            e.f64(eps);
        }
    }
    e.f64(g.lr);
    e.f64(g.weight_decay);
}

fn decode_group(d: &mut Dec) -> Result<GroupConfig> {
    let optimizer = match d.u8()? {
        0 => OptimKind::Sgd { momentum: d.f64()? },
        1 => OptimKind::Adam {
            beta1: d.f64()?,
            beta2: d.f64()?,
            eps: d.f64()?,
        },
        c => return Err(Error::Integrity(format!("unknown optimizer kind {c}"))),
    };
    Ok(GroupConfig {
        optimizer,
        lr: d.f64()?,
        weight_decay: d.f64()?,
    })
}

fn encode_payload(ck: &Checkpoint) -> Result<Vec<u8>> {
    let st = &ck.state;
    let mut e = Enc::default();
    e.str(&serde_json::to_string(&st.model.spec)?);

    e.u64(st.model.params.len() as u64);
    for p in &st.model.params {
        e.str(&p.name);
        e.u8(role_code(p.role));
        e.u8(p.trainable as u8);
        e.tensor(&p.value);
    }

    e.u64(st.model.groups.len() as u64);
    for g in &st.model.groups {
        e.str(&g.name);
        e.u64(g.layer as u64);
        e.u64(g.weight.0 as u64);
        match g.scores {
            Some(id) => {
                e.u8(1);
                e.u64(id.0 as u64);
            }
            None => e.u8(0),
        }
        e.f64(g.s_init);
        e.u8(mode_code(g.mode));
        e.u8(matches!(g.straight_through, StraightThrough::SigmoidScaled) as u8);
        e.bits(&g.alive);
        match &g.frozen_mask {
            Some(f) => {
                e.u8(1);
                e.bits(f);
            }
            None => e.u8(0),
        }
    }

    encode_group(&mut e, &st.optimizer.config.weights);
    encode_group(&mut e, &st.optimizer.config.scores);
    e.f64(st.optimizer.lr_factor);
    e.u64(st.optimizer.slots().len() as u64);
    for slot in st.optimizer.slots() {
        match slot {
            Slot::Empty => e.u8(0),
            Slot::Momentum(v) => {
                e.u8(1);
                e.f64s(v);
            }
            Slot::Adam { m, v, step } => {
                e.u8(2);
                e.f64s(m);
                e.f64s(v);
                e.u64(*step);
            }
        }
    }

    e.u8(matches!(st.precision, Precision::F32) as u8);
    e.u64(st.batch_size as u64);
    e.u64(st.shuffle_seed);
    e.u64(st.iter);
    e.u64(st.round as u64);
    e.u64(st.round_iter);
    match st.schedule {
        Some(s) => {
            e.u8(1);
            e.f64(s.beta_final);
            e.u64(s.total_iters);
            e.u64(s.current_iter);
        }
        None => e.u8(0),
    }
    e.f64(st.penalty.lambda);
    e.0.extend_from_slice(&st.gate_rng.get_seed());
    e.u64(st.gate_rng.get_stream());
    e.0.extend_from_slice(&st.gate_rng.get_word_pos().to_le_bytes());

    match &ck.rewind {
        Some(r) => {
            e.u8(1);
            encode_rewind(&mut e, r);
        }
        None => e.u8(0),
    }
    Ok(e.0)
}

pub(crate) fn encode_rewind(e: &mut Enc, r: &RewindStore) {
    e.u64(r.k);
    e.u64(r.tensors.len() as u64);
    for (i, t) in &r.tensors {
        e.u64(*i as u64);
        e.tensor(t);
    }
}

pub(crate) fn decode_rewind(d: &mut Dec) -> Result<RewindStore> {
    let k = d.u64()?;
    let n = d.usize()?;
    let mut tensors = Vec::new();
    for _ in 0..n {
        let i = d.usize()?;
        tensors.push((i, d.tensor()?));
    }
    Ok(RewindStore { k, tensors })
}

fn decode_payload(buf: &[u8]) -> Result<Checkpoint> {
    let mut d = Dec::new(buf);
    let spec: ModelSpec = serde_json::from_str(&d.str()?).map_err(|e| Error::Integrity(format!("model spec: {e}")))?;

    let n = d.usize()?;
    let mut params = Vec::new();
    for _ in 0..n {
        let name = d.str()?;
        let role = role_from(d.u8()?)?;
        let trainable = d.u8()? != 0;
        let value = d.tensor()?;
        let mut p = Param::new(name, role, value);
        p.trainable = trainable;
        params.push(p);
    }

    let n = d.usize()?;
    let mut groups = Vec::new();
    for _ in 0..n {
        let name = d.str()?;
        let layer = d.usize()?;
        let weight = ParamId(d.usize()?);
        let scores = match d.u8()? {
            0 => None,
            _ => Some(ParamId(d.usize()?)),
        };
        let s_init = d.f64()?;
        let mode = mode_from(d.u8()?)?;
        let straight_through = if d.u8()? != 0 {
            StraightThrough::SigmoidScaled
        } else {
            StraightThrough::Identity
        };
        let alive = d.bits()?;
        let frozen_mask = match d.u8()? {
            0 => None,
            _ => Some(d.bits()?),
        };
        groups.push(MaskedGroup {
            name,
            layer,
            weight,
            scores,
            s_init,
            mode,
            alive,
            frozen_mask,
            straight_through,
        });
    }
    let model = Model::from_parts(spec, params, groups).map_err(|e| Error::Integrity(e.to_string()))?;

    let config = OptimConfig {
        weights: decode_group(&mut d)?,
        scores: decode_group(&mut d)?,
    };
    let lr_factor = d.f64()?;
    let n = d.usize()?;
    let mut slots = Vec::new();
    for _ in 0..n {
        slots.push(match d.u8()? {
            0 => Slot::Empty,
            1 => Slot::Momentum(d.f64s()?),
            2 => Slot::Adam {
                m: d.f64s()?,
                v: d.f64s()?,
                step: d.u64()?,
            },
            c => return Err(Error::Integrity(format!("unknown optimizer slot {c}"))),
        });
    }

    let precision = if d.u8()? != 0 { Precision::F32 } else { Precision::F64 };
    let mut optimizer = Optimizer::new(config, precision);
    optimizer.lr_factor = lr_factor;
    optimizer.set_slots(slots);
    let batch_size = d.usize()?;
    let shuffle_seed = d.u64()?;
    let iter = d.u64()?;
    let round = d.usize()?;
    let round_iter = d.u64()?;
    let schedule = match d.u8()? {
        0 => None,
        _ => Some(TemperatureSchedule {
            beta_final: d.f64()?,
            total_iters: d.u64()?,
            current_iter: d.u64()?,
        }),
    };
    let penalty = GatePenalty { lambda: d.f64()? };
    let seed: [u8; 32] = d.take(32)?.try_into().expect("32 bytes");
    let stream = d.u64()?;
    let word_pos = u128::from_le_bytes(d.take(16)?.try_into().expect("16 bytes"));
    let mut gate_rng = ChaCha8Rng::from_seed(seed);
    gate_rng.set_stream(stream);
    gate_rng.set_word_pos(word_pos);

    let rewind = match d.u8()? {
        0 => None,
        _ => Some(decode_rewind(&mut d)?),
    };
    d.done()?;
    Ok(Checkpoint {
        state: RunState {
            model,
            optimizer,
            schedule,
            penalty,
            precision,
            batch_size,
            shuffle_seed,
            iter,
            round,
            round_iter,
            gate_rng,
            perm_cache: None,
        },
        rewind,
    })
}

/// Wraps `payload` in the magic / version / length / digest envelope.
pub(crate) fn seal(magic: &[u8; 4], version: u32, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 48);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&Sha256::digest(payload));
    out
}

/// Checks the envelope and returns the payload.
pub(crate) fn unseal<'a>(magic: &[u8; 4], version: u32, bytes: &'a [u8]) -> Result<&'a [u8]> {
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(Error::Integrity("missing or wrong magic header".into()));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if found != version {
        return Err(Error::Version {
            found,
            expected: version,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let expected_total = usize::try_from(len).ok().and_then(|l| l.checked_add(16 + 32));
    if expected_total != Some(bytes.len()) {
        return Err(Error::Integrity(format!(
            "declared payload of {len} bytes does not match file size {}",
            bytes.len()
        )));
    }
    let payload = &bytes[16..bytes.len() - 32];
    if Sha256::digest(payload).as_slice() != &bytes[bytes.len() - 32..] {
        return Err(Error::Integrity("payload digest mismatch".into()));
    }
    Ok(payload)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(seal(MAGIC, VERSION, &encode_payload(self)?))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode_payload(unseal(MAGIC, VERSION, bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub const REWIND_MAGIC: &[u8; 4] = b"CSRW";

pub fn save_rewind(store: &RewindStore, path: &Path) -> Result<()> {
    let mut e = Enc::default();
    encode_rewind(&mut e, store);
    std::fs::write(path, seal(REWIND_MAGIC, VERSION, &e.0)).map_err(|e| Error::io(path, e))
}

pub fn load_rewind(path: &Path) -> Result<RewindStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut d = Dec::new(unseal(REWIND_MAGIC, VERSION, &bytes)?);
    let store = decode_rewind(&mut d)?;
    d.done()?;
    Ok(store)
}
