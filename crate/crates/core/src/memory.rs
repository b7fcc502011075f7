//! Per-entity memory bank, update operators, gate and fusion.

use sha2::{Digest, Sha256};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::backbone::hex;
use crate::data::EntityId;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SNAPSHOT_MAGIC: &[u8; 8] = b"TKGMSNAP";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmaVariant {
    /// One decay logit shared by all entities.
    Shared,
    /// One logit per entity; entities unseen in training fall back to their
    /// cluster's mean logit.
    PerEntity,
    /// One logit per hidden dimension.
    PerDimension,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorKind {
    Ema(EmaVariant),
    Gru,
    Attention,
}

impl OperatorKind {
    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::Ema(EmaVariant::Shared) => "ema",
            OperatorKind::Ema(EmaVariant::PerEntity) => "ema-entity",
            OperatorKind::Ema(EmaVariant::PerDimension) => "ema-dim",
            OperatorKind::Gru => "gru",
            OperatorKind::Attention => "attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "ema" => OperatorKind::Ema(EmaVariant::Shared),
            "ema-entity" => OperatorKind::Ema(EmaVariant::PerEntity),
            "ema-dim" => OperatorKind::Ema(EmaVariant::PerDimension),
            "gru" => OperatorKind::Gru,
            "attention" => OperatorKind::Attention,
            other => return Err(Error::Config(format!("unknown operator `{other}`"))),
        })
    }

    /// Parameter names and shapes for hidden size `d` over `n` entities.
    pub fn param_shapes(self, d: usize, n: usize) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            OperatorKind::Ema(EmaVariant::Shared) => vec![("memory.rho", vec![1])],
            OperatorKind::Ema(EmaVariant::PerEntity) => vec![("memory.rho", vec![n])],
            OperatorKind::Ema(EmaVariant::PerDimension) => vec![("memory.rho", vec![d])],
            OperatorKind::Gru => vec![
                ("memory.gru.w_u", vec![d, d]),
                ("memory.gru.b_u", vec![d]),
                ("memory.gru.w_r", vec![d, d]),
                ("memory.gru.b_r", vec![d]),
                ("memory.gru.w_c", vec![d, d]),
                ("memory.gru.b_c", vec![d]),
            ],
            OperatorKind::Attention => vec![
                ("memory.attn.w_q", vec![d, d]),
                ("memory.attn.w_k", vec![d, d]),
                ("memory.attn.w_v", vec![d, d]),
                ("memory.attn.w_o", vec![d, d]),
            ],
        }
    }
}

/// Operator parameters bound to a tape, in [`OperatorKind::param_shapes`] order.
#[derive(Clone, Debug)]
pub struct OperatorVars {
    pub kind: OperatorKind,
    pub vars: Vec<Var>,
    pub heads: usize,
}

/// Inputs to one memory update.
pub struct UpdateInput<'a> {
    pub entity: EntityId,
    pub prev: Var,
    pub signal: Var,
    /// Static embedding of the entity; the attention query.
    pub query: Option<Var>,
    /// Slot contents before this update (attention only), `None` for empty.
    pub slots: &'a [Option<Vec<f64>>],
    /// Number of updates the entity has received so far.
    pub count: u64,
    /// Decay logit used instead of a per-entity parameter.
    pub rho_fallback: Option<f64>,
    pub detach: bool,
}

/// One memory update on the tape. Returns the new memory.
pub fn update_step(tape: &mut Tape, op: &OperatorVars, inp: UpdateInput<'_>) -> Result<Var> {
    let prev = if inp.detach { tape.detach(inp.prev) } else { inp.prev };
    let x = inp.signal;
    match op.kind {
        OperatorKind::Ema(variant) => {
            let rho = op.vars[0];
            let logit = match (variant, inp.rho_fallback) {
                (EmaVariant::PerEntity, Some(r)) => tape.constant(Tensor::scalar(r)),
                (EmaVariant::PerEntity, None) => tape.slice(rho, inp.entity, inp.entity + 1)?,
                _ => rho,
            };
            let alpha = tape.sigmoid(logit);
            let keep = tape.mul(alpha, prev)?;
            let beta = tape.one_minus(alpha);
            let add = tape.mul(beta, x)?;
            tape.add(keep, add)
        }
        OperatorKind::Gru => {
            let [w_u, b_u, w_r, b_r, w_c, b_c] = op.vars[..] else {
                return Err(Error::contract("gru expects six parameters"));
            };
            let xh = tape.add(x, prev)?;
            let u = tape.matmul(w_u, xh)?;
            let u = tape.add(u, b_u)?;
            let u = tape.sigmoid(u);
            let r = tape.matmul(w_r, xh)?;
            let r = tape.add(r, b_r)?;
            let r = tape.sigmoid(r);
            let rh = tape.mul(r, prev)?;
            let cin = tape.add(x, rh)?;
            let c = tape.matmul(w_c, cin)?;
            let c = tape.add(c, b_c)?;
            let c = tape.tanh(c);
            let keep_w = tape.one_minus(u);
            let keep = tape.mul(keep_w, prev)?;
            let write = tape.mul(u, c)?;
            tape.add(keep, write)
        }
        OperatorKind::Attention => {
            let [w_q, w_k, w_v, w_o] = op.vars[..] else {
                return Err(Error::contract("attention expects four parameters"));
            };
            let query = inp.query.ok_or_else(|| Error::contract("attention update needs a query"))?;
            let k_len = inp.slots.len();
            if k_len == 0 {
                return Err(Error::contract("attention buffer length must be positive"));
            }
            let cursor = (inp.count % k_len as u64) as usize;
            let mut rows = Vec::with_capacity(k_len);
            for (i, s) in inp.slots.iter().enumerate() {
                if i == cursor {
                    rows.push(x);
                } else if let Some(v) = s {
                    rows.push(tape.constant(Tensor::vector(v.clone())));
                }
            }
            let buf = tape.stack(&rows)?;
            let d = tape.value(x).len();
            let heads = op.heads.max(1);
            if d % heads != 0 {
                return Err(Error::contract(format!("{heads} heads do not divide d = {d}")));
            }
            let dh = d / heads;
            let q = tape.matmul(w_q, query)?;
            let keys = tape.matmul_t(buf, w_k)?;
            let vals = tape.matmul_t(buf, w_v)?;
            let mut out: Option<Var> = None;
            for h in 0..heads {
                let qh = tape.slice(q, h * dh, (h + 1) * dh)?;
                let kh = tape.slice(keys, h * dh, (h + 1) * dh)?;
                let vh = tape.slice(vals, h * dh, (h + 1) * dh)?;
                let logits = tape.matmul(kh, qh)?;
                let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
                let w = tape.softmax(logits)?;
                let oh = tape.matmul(w, vh)?;
                out = Some(match out {
                    None => oh,
                    Some(o) => tape.concat(o, oh)?,
                });
            }
            tape.matmul(w_o, out.unwrap())
        }
    }
}

/// `g = σ(W_g [h ‖ m])`.
pub fn gate_var(tape: &mut Tape, w_g: Var, h: Var, m: Var) -> Result<Var> {
    let hm = tape.concat(h, m)?;
    let pre = tape.matmul(w_g, hm)?;
    Ok(tape.sigmoid(pre))
}

/// `z = (1 − g) ⊙ h̃ + g ⊙ m`.
pub fn fuse_var(tape: &mut Tape, h_tilde: Var, m: Var, g: Var) -> Result<Var> {
    let keep = tape.one_minus(g);
    let a = tape.mul(keep, h_tilde)?;
    let b = tape.mul(g, m)?;
    tape.add(a, b)
}

pub fn fuse(h_tilde: &[f64], m: &[f64], g: &[f64]) -> Vec<f64> {
    h_tilde
        .iter()
        .zip(m)
        .zip(g)
        .map(|((h, m), g)| (1.0 - g) * h + g * m)
        .collect()
}

/// Adaptive gate for a row-major `[d, 2d]` weight.
pub fn gate_values(w_g: &Tensor, h: &[f64], m: &[f64]) -> Vec<f64> {
    let d = h.len();
    (0..d)
        .map(|i| {
            let row = w_g.row(i);
            let pre: f64 = row[..d].iter().zip(h).map(|(w, x)| w * x).sum::<f64>()
                + row[d..].iter().zip(m).map(|(w, x)| w * x).sum::<f64>();
            sigmoid(pre)
        })
        .collect()
}

/// Memory state `m_e`, update counter `τ_e` and signal buffer for every entity.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    buffer_len: usize,
    memory: Vec<f64>,
    counts: Vec<u64>,
    buffers: Vec<Option<Vec<f64>>>,
}

impl MemoryBank {
    /// `buffer_len` is zero for operators without a signal buffer.
    pub fn new(entities: usize, dim: usize, buffer_len: usize) -> Self {
        Self {
            dim,
            buffer_len,
            memory: vec![0.0; entities * dim],
            counts: vec![0; entities],
            buffers: vec![None; entities * buffer_len],
        }
    }

    pub fn entities(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer_len
    }

    pub fn reset_all(&mut self) {
        self.memory.fill(0.0);
        self.counts.fill(0);
        self.buffers.fill(None);
    }

    fn check(&self, e: EntityId) -> Result<()> {
        if e >= self.entities() {
            return Err(Error::Index {
                index: e,
                len: self.entities(),
            });
        }
        Ok(())
    }

    pub fn memory(&self, e: EntityId) -> &[f64] {
        &self.memory[e * self.dim..(e + 1) * self.dim]
    }

    pub fn count(&self, e: EntityId) -> u64 {
        self.counts[e]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn slots(&self, e: EntityId) -> &[Option<Vec<f64>>] {
        &self.buffers[e * self.buffer_len..(e + 1) * self.buffer_len]
    }

    /// All memories as an `[|E|, d]` tensor.
    pub fn memory_table(&self) -> Tensor {
        Tensor::matrix(self.entities(), self.dim, self.memory.clone()).expect("bank shape")
    }

    /// Overwrite the state of one entity.
    pub fn set(&mut self, e: EntityId, m: &[f64], count: u64, slots: Option<&[Option<Vec<f64>>]>) -> Result<()> {
        self.check(e)?;
        if m.len() != self.dim {
            return Err(Error::Dimension {
                op: "memory set",
                lhs: vec![self.dim],
                rhs: vec![m.len()],
            });
        }
        self.memory[e * self.dim..(e + 1) * self.dim].copy_from_slice(m);
        self.counts[e] = count;
        if let Some(s) = slots {
            if s.len() != self.buffer_len {
                return Err(Error::contract("slot count does not match buffer length"));
            }
            self.buffers[e * self.buffer_len..(e + 1) * self.buffer_len].clone_from_slice(s);
        }
        Ok(())
    }

    /// Gate for entity `e`; identically zero before its first update.
    pub fn gate(&self, e: EntityId, h: &[f64], w_g: &Tensor) -> Result<Vec<f64>> {
        self.check(e)?;
        if self.counts[e] == 0 {
            return Ok(vec![0.0; self.dim]);
        }
        Ok(gate_values(w_g, h, self.memory(e)))
    }

    /// Apply one update from a detached signal with concrete operator
    /// parameters, outside any training tape.
    pub fn update(&mut self, op: &Operator, e: EntityId, signal: &[f64], query: &[f64], rho_fallback: Option<f64>) -> Result<()> {
        self.check(e)?;
        let mut tape = Tape::new();
        let vars = op.bind_constants(&mut tape);
        let prev = tape.constant(Tensor::vector(self.memory(e).to_vec()));
        let x = tape.constant(Tensor::vector(signal.to_vec()));
        let q = tape.constant(Tensor::vector(query.to_vec()));
        let slots = self.slots(e).to_vec();
        let m = update_step(
            &mut tape,
            &vars,
            UpdateInput {
                entity: e,
                prev,
                signal: x,
                query: Some(q),
                slots: &slots,
                count: self.counts[e],
                rho_fallback,
                detach: true,
            },
        )?;
        let m = tape.value(m).data().to_vec();
        if self.buffer_len > 0 {
            let cursor = (self.counts[e] % self.buffer_len as u64) as usize;
            self.buffers[e * self.buffer_len + cursor] = Some(signal.to_vec());
        }
        let c = self.counts[e] + 1;
        self.set(e, &m, c, None)
    }

    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.buffer_len as u32).to_le_bytes());
        out.extend_from_slice(&(self.entities() as u64).to_le_bytes());
        let live: Vec<usize> = (0..self.entities()).filter(|&e| self.counts[e] > 0).collect();
        out.extend_from_slice(&(live.len() as u64).to_le_bytes());
        for e in live {
            out.extend_from_slice(&(e as u64).to_le_bytes());
            out.extend_from_slice(&self.counts[e].to_le_bytes());
            for v in self.memory(e) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let occupied: Vec<(usize, &Vec<f64>)> = self
                .slots(e)
                .iter()
                .enumerate()
                .filter_map(|(i, s)| s.as_ref().map(|v| (i, v)))
                .collect();
            out.extend_from_slice(&(occupied.len() as u32).to_le_bytes());
            for (i, v) in occupied {
                out.extend_from_slice(&(i as u32).to_le_bytes());
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Restore a snapshot into a bank over `entities` entities. Entities
    /// beyond the snapshot's vocabulary start at zero state.
    pub fn restore(bytes: &[u8], entities: usize) -> Result<Self> {
        let mut r = Reader::new(bytes);
        Self::read_from(&mut r, entities)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>, entities: usize) -> Result<Self> {
        if r.take(8)? != SNAPSHOT_MAGIC {
            return Err(Error::Load("not a memory snapshot".into()));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Load(format!("unsupported snapshot version {version}")));
        }
        let dim = r.u32()? as usize;
        let buffer_len = r.u32()? as usize;
        let stored = r.u64()? as usize;
        if stored > entities {
            return Err(Error::Load(format!("snapshot covers {stored} entities, target has {entities}")));
        }
        let mut bank = MemoryBank::new(entities, dim, buffer_len);
        let live = r.u64()? as usize;
        for _ in 0..live {
            let e = r.u64()? as usize;
            if e >= stored {
                return Err(Error::Load(format!("entity id {e} out of range")));
            }
            let count = r.u64()?;
            let m = r.f64s(dim)?;
            let occupied = r.u32()? as usize;
            let mut slots = vec![None; buffer_len];
            for _ in 0..occupied {
                let i = r.u32()? as usize;
                if i >= buffer_len {
                    return Err(Error::Load(format!("slot {i} out of range")));
                }
                slots[i] = Some(r.f64s(dim)?);
            }
            bank.set(e, &m, count, Some(&slots))?;
        }
        Ok(bank)
    }

    /// SHA-256 of the snapshot encoding.
    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.snapshot()))
    }
}

/// Little-endian cursor over a byte blob.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Load("truncated blob".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Operator with concrete parameter values.
#[derive(Clone, Debug)]
pub struct Operator {
    pub kind: OperatorKind,
    pub params: Vec<Tensor>,
    pub heads: usize,
}

impl Operator {
    pub fn bind_constants(&self, tape: &mut Tape) -> OperatorVars {
        OperatorVars {
            kind: self.kind,
            vars: self.params.iter().map(|p| tape.constant(p.clone())).collect(),
            heads: self.heads,
        }
    }
}
