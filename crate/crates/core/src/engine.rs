//! Per-timestamp forward/backward over the committed stream state.
//!
//! Within one timestamp every query sees the same committed bank, chain
//! store and prototype table. The subject's own memory is updated
//! sequentially in a working copy; all updates, chain pushes and prototype
//! contributions are committed together once the timestamp is done.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::backbone::{
    encode_chain, filter_chain, hex, inductive_prior, interaction_signal, prepare_chain_projections,
    vq_commitment_loss, ChainFact, ChainStore, PrototypeTable,
};
use crate::config::{GateMode, Timing};
use crate::data::{EntityId, Quadruple};
use crate::error::{Error, Result};
use crate::memory::{fuse_var, gate_var, update_step, EmaVariant, MemoryBank, OperatorKind, Reader, UpdateInput};
use crate::model::Model;
use crate::tensor::Tensor;

const STREAM_MAGIC: &[u8; 8] = b"TKGMSTRM";
const STREAM_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReprMode {
    Full,
    /// Gate forced to zero everywhere.
    ZeroGate,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub mode: ReprMode,
    pub score: bool,
    pub grad: bool,
    /// Reported in numeric-abort diagnostics.
    pub step_index: usize,
}

impl StepOptions {
    pub fn train(step_index: usize) -> Self {
        Self {
            mode: ReprMode::Full,
            score: true,
            grad: true,
            step_index,
        }
    }

    pub fn eval(mode: ReprMode) -> Self {
        Self {
            mode,
            score: true,
            grad: false,
            step_index: 0,
        }
    }

    pub fn replay() -> Self {
        Self {
            mode: ReprMode::Full,
            score: false,
            grad: false,
            step_index: 0,
        }
    }
}

/// Everything carried along the stream besides parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub bank: MemoryBank,
    pub chains: ChainStore,
    pub prototypes: PrototypeTable,
    pub assignments: Vec<usize>,
    pub cluster_decay: Vec<f64>,
}

/// State changes produced by one timestamp.
#[derive(Clone, Debug, Default)]
pub struct Commit {
    memory: Vec<(EntityId, Vec<f64>, u64, Vec<Option<Vec<f64>>>)>,
    chain: Vec<(EntityId, ChainFact)>,
    prototypes: Vec<(usize, Vec<f64>)>,
}

impl Commit {
    pub fn updated_entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.memory.iter().map(|m| m.0)
    }
}

#[derive(Clone, Debug)]
pub struct QueryResult {
    pub fact: Quadruple,
    /// Scores over all entities; empty when scoring is off.
    pub scores: Vec<f64>,
    pub loss: f64,
    /// Mean gate over dimensions for the subject; zero when masked.
    pub gate_mean: f64,
    /// Subject's committed update count when the query was scored.
    pub subject_count: u64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub link_loss: f64,
    pub vq_loss: f64,
    /// Gradients aligned with the parameter set; empty without `grad`.
    pub grads: Vec<Tensor>,
    pub queries: Vec<QueryResult>,
    pub commit: Commit,
}

struct Working {
    m: Var,
    count: u64,
    slots: Vec<Option<Vec<f64>>>,
}

impl StreamState {
    pub fn fresh(model: &Model) -> Self {
        let cfg = &model.config;
        let buffer = if cfg.use_memory && cfg.operator == OperatorKind::Attention {
            cfg.buffer
        } else {
            0
        };
        let assignments = model.cluster_assignments();
        Self {
            bank: MemoryBank::new(model.num_entities(), cfg.dim, buffer),
            chains: ChainStore::new(model.num_entities(), cfg.chain_len),
            prototypes: PrototypeTable::new(cfg.clusters, cfg.dim),
            cluster_decay: model.cluster_decay(&assignments),
            assignments,
        }
    }

    pub fn apply(&mut self, commit: Commit) -> Result<()> {
        for (e, m, count, slots) in commit.memory {
            let s = (self.bank.buffer_len() > 0).then_some(&slots[..]);
            self.bank.set(e, &m, count, s)?;
        }
        for (e, f) in commit.chain {
            self.chains.push(e, f);
        }
        for (k, enc) in commit.prototypes {
            self.prototypes.add(k, &enc);
        }
        Ok(())
    }

    /// Memory bank, chain store and prototype table as one blob.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
        let bank = self.bank.snapshot();
        out.extend_from_slice(&(bank.len() as u64).to_le_bytes());
        out.extend_from_slice(&bank);
        out.extend_from_slice(&(self.chains.capacity() as u32).to_le_bytes());
        out.extend_from_slice(&(self.chains.entities() as u64).to_le_bytes());
        for e in 0..self.chains.entities() {
            let c = self.chains.chain(e);
            out.extend_from_slice(&(c.len() as u32).to_le_bytes());
            for f in c {
                out.extend_from_slice(&(f.neighbor as u64).to_le_bytes());
                out.extend_from_slice(&(f.relation as u64).to_le_bytes());
                out.extend_from_slice(&f.time.to_le_bytes());
            }
        }
        let (sums, counts) = self.prototypes.raw();
        out.extend_from_slice(&(counts.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.bank.dim() as u32).to_le_bytes());
        for s in sums {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for c in counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    /// Restore a stream snapshot for `model`; entities beyond the
    /// snapshot's vocabulary start empty.
    pub fn from_bytes(bytes: &[u8], model: &Model) -> Result<Self> {
        let mut fresh = Self::fresh(model);
        let n = model.num_entities();
        let mut r = Reader::new(bytes);
        if r.take(8)? != STREAM_MAGIC {
            return Err(Error::Load("not a stream snapshot".into()));
        }
        if r.u32()? != STREAM_VERSION {
            return Err(Error::Load("unsupported stream snapshot version".into()));
        }
        let blen = r.u64()? as usize;
        let bank = MemoryBank::restore(r.take(blen)?, n)?;
        if bank.dim() != fresh.bank.dim() || bank.buffer_len() != fresh.bank.buffer_len() {
            return Err(Error::Load("memory snapshot does not match model configuration".into()));
        }
        fresh.bank = bank;
        let cap = r.u32()? as usize;
        if cap != fresh.chains.capacity() {
            return Err(Error::Load(format!("chain length {cap} does not match model")));
        }
        let stored = r.u64()? as usize;
        if stored > n {
            return Err(Error::Load(format!("snapshot covers {stored} entities, model has {n}")));
        }
        for e in 0..stored {
            let len = r.u32()? as usize;
            for _ in 0..len {
                let neighbor = r.u64()? as usize;
                let relation = r.u64()? as usize;
                let time = r.u64()?;
                if neighbor >= n || relation >= model.num_relations() {
                    return Err(Error::Load("chain entry out of range".into()));
                }
                fresh.chains.push(e, ChainFact { neighbor, relation, time });
            }
        }
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        if k != fresh.prototypes.clusters() || d != model.dim() {
            return Err(Error::Load("prototype table does not match model".into()));
        }
        let sums = r.f64s(k * d)?;
        let mut counts = Vec::with_capacity(k);
        for _ in 0..k {
            counts.push(r.u64()?);
        }
        if !r.done() {
            return Err(Error::Load("trailing bytes after stream snapshot".into()));
        }
        fresh.prototypes = PrototypeTable::from_raw(d, sums, counts);
        Ok(fresh)
    }

    pub fn checksum(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

/// One timestamp of facts. State is read-only; apply the returned commit to
/// advance it.
pub fn step(model: &Model, state: &StreamState, facts: &[Quadruple], opts: StepOptions) -> Result<StepOutput> {
    let cfg = &model.config;
    let n = model.num_entities();
    let d = model.dim();
    for f in facts {
        if f.subject >= n || f.object >= n {
            return Err(Error::Index {
                index: f.subject.max(f.object),
                len: n,
            });
        }
        if f.relation >= model.num_relations() {
            return Err(Error::Index {
                index: f.relation,
                len: model.num_relations(),
            });
        }
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, opts.grad);
    let table = model.embeddings().table();
    let h_all = tape.constant(table.clone());
    let proj = prepare_chain_projections(&mut tape, &bound.backbone, h_all)?;

    // Chain encodings of each distinct subject; these also feed prototypes.
    let mut enc_full: BTreeMap<EntityId, Var> = BTreeMap::new();
    let mut commit = Commit::default();
    for f in facts {
        if enc_full.contains_key(&f.subject) {
            continue;
        }
        let chain: Vec<ChainFact> = state.chains.chain(f.subject).iter().copied().collect();
        let enc = encode_chain(&mut tape, &bound.backbone, &proj, &chain, cfg.chain_pool)?;
        if !chain.is_empty() {
            commit
                .prototypes
                .push((state.assignments[f.subject], tape.value(enc).data().to_vec()));
        }
        enc_full.insert(f.subject, enc);
    }

    let use_gate = opts.mode == ReprMode::Full && cfg.use_memory;
    let mut candidates: Option<(Var, Var)> = None;
    if opts.score {
        let h_tilde = if cfg.use_prior {
            // committed sums are state; this timestamp's encodings stay on the tape
            let mut fresh: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
            for (s, enc) in &enc_full {
                if !state.chains.chain(*s).is_empty() {
                    fresh.entry(state.assignments[*s]).or_default().push(*enc);
                }
            }
            let protos = &state.prototypes;
            let mut per_cluster = Vec::with_capacity(protos.clusters());
            for k in 0..protos.clusters() {
                let committed = protos.count(k);
                let encs = fresh.get(&k).map(Vec::as_slice).unwrap_or(&[]);
                let total = committed + encs.len() as u64;
                let sum = tape.constant(Tensor::vector(protos.sum(k).to_vec()));
                let mut acc = sum;
                for &e in encs {
                    acc = tape.add(acc, e)?;
                }
                per_cluster.push(if total == 0 { acc } else { tape.scale(acc, 1.0 / total as f64) });
            }
            let table = tape.stack(&per_cluster)?;
            let p = tape.gather(table, &state.assignments)?;
            inductive_prior(&mut tape, &bound.backbone, h_all, p)?.0
        } else {
            h_all
        };
        let live: Vec<bool> = state.bank.counts().iter().map(|&c| c > 0).collect();
        let z = if use_gate && live.iter().any(|&l| l) {
            let m_all = tape.constant(state.bank.memory_table());
            let fused = match (cfg.gate, bound.gate) {
                (GateMode::Adaptive, Some(w_g)) => {
                    let hm = tape.concat(h_all, m_all)?;
                    let pre = tape.matmul_t(hm, w_g)?;
                    let g = tape.sigmoid(pre);
                    fuse_var(&mut tape, h_tilde, m_all, g)?
                }
                _ => {
                    let a = tape.scale(h_tilde, 0.5);
                    let b = tape.scale(m_all, 0.5);
                    tape.add(a, b)?
                }
            };
            tape.select_rows(&live, fused, h_tilde)?
        } else {
            h_tilde
        };
        candidates = Some((h_tilde, z));
    }

    let per_entity_decay = cfg.operator == OperatorKind::Ema(EmaVariant::PerEntity);
    let mut working: BTreeMap<EntityId, Working> = BTreeMap::new();
    let mut order: Vec<EntityId> = Vec::new();
    let mut enc_filtered: BTreeMap<(EntityId, usize), Var> = BTreeMap::new();
    let mut losses: Vec<Var> = Vec::new();
    let mut queries = Vec::with_capacity(facts.len());

    for f in facts {
        let s = f.subject;
        let committed = state.bank.count(s);
        let mut read: Option<Var> = None;
        if let Some(op) = &bound.operator {
            let enc = if cfg.chain_top > 0 && state.chains.chain(s).len() > cfg.chain_top {
                if let Some(v) = enc_filtered.get(&(s, f.relation)) {
                    *v
                } else {
                    let rel_table = tape.value(bound.backbone.relations).clone();
                    let kept = filter_chain(state.chains.chain(s), &rel_table, f.relation, cfg.chain_top);
                    let v = encode_chain(&mut tape, &bound.backbone, &proj, &kept, cfg.chain_pool)?;
                    enc_filtered.insert((s, f.relation), v);
                    v
                }
            } else {
                enc_full[&s]
            };
            let x = interaction_signal(&mut tape, &bound.backbone, enc, f.relation)?;
            let (prev, count, mut slots) = match working.remove(&s) {
                Some(w) => (w.m, w.count, w.slots),
                None => {
                    order.push(s);
                    let m = tape.constant(Tensor::vector(state.bank.memory(s).to_vec()));
                    (m, committed, state.bank.slots(s).to_vec())
                }
            };
            let h_s = tape.row(h_all, s)?;
            let fallback =
                (per_entity_decay && !model.seen_in_training(s)).then(|| state.cluster_decay[state.assignments[s]]);
            let new_m = update_step(
                &mut tape,
                op,
                UpdateInput {
                    entity: s,
                    prev,
                    signal: x,
                    query: Some(h_s),
                    slots: &slots,
                    count,
                    rho_fallback: fallback,
                    detach: cfg.detach,
                },
            )?;
            if !slots.is_empty() {
                let k = slots.len();
                slots[(count % k as u64) as usize] = Some(tape.value(x).data().to_vec());
            }
            read = Some(match cfg.timing {
                Timing::Before => new_m,
                Timing::After => prev,
            });
            working.insert(
                s,
                Working {
                    m: new_m,
                    count: count + 1,
                    slots,
                },
            );
        }

        let mut result = QueryResult {
            fact: *f,
            scores: Vec::new(),
            loss: 0.0,
            gate_mean: 0.0,
            subject_count: committed,
        };
        if let Some((h_tilde, z)) = candidates {
            let ht_s = tape.row(h_tilde, s)?;
            let z_s = match read {
                Some(m) if use_gate && committed > 0 => {
                    let g = match (cfg.gate, bound.gate) {
                        (GateMode::Adaptive, Some(w_g)) => {
                            let h_s = tape.row(h_all, s)?;
                            gate_var(&mut tape, w_g, h_s, m)?
                        }
                        _ => tape.constant(Tensor::full(&[d], 0.5)),
                    };
                    let gv = tape.value(g).data();
                    result.gate_mean = gv.iter().sum::<f64>() / d as f64;
                    fuse_var(&mut tape, ht_s, m, g)?
                }
                _ => ht_s,
            };
            let q = model.decode(&mut tape, &bound, z_s, f.relation)?;
            let scores = tape.matmul(z, q)?;
            let ce = tape.softmax_cross_entropy(scores, f.object)?;
            result.loss = tape.value(ce).item();
            if !result.loss.is_finite() {
                return Err(Error::NumericAbort {
                    step: opts.step_index,
                    query: queries.len(),
                    norms: model.params.norms(),
                });
            }
            result.scores = tape.value(scores).data().to_vec();
            losses.push(ce);
        }
        queries.push(result);
    }

    for s in order {
        let w = &working[&s];
        commit
            .memory
            .push((s, tape.value(w.m).data().to_vec(), w.count, w.slots.clone()));
    }
    for f in facts {
        commit.chain.push((
            f.subject,
            ChainFact {
                neighbor: f.object,
                relation: f.relation,
                time: f.time,
            },
        ));
    }

    let mut out = StepOutput {
        loss: 0.0,
        link_loss: 0.0,
        vq_loss: 0.0,
        grads: Vec::new(),
        queries,
        commit,
    };
    if losses.is_empty() {
        return Ok(out);
    }
    let mut link = losses[0];
    for &l in &losses[1..] {
        link = tape.add(link, l)?;
    }
    let link = tape.scale(link, 1.0 / losses.len() as f64);
    let batch: Vec<(&[f64], usize)> = facts
        .iter()
        .map(|f| (table.row(f.subject), state.assignments[f.subject]))
        .collect();
    let vq = vq_commitment_loss(&mut tape, bound.backbone.codebook, &batch)?;
    let total = if cfg.lambda > 0.0 {
        let weighted = tape.scale(vq, cfg.lambda);
        tape.add(link, weighted)?
    } else {
        link
    };
    out.link_loss = tape.value(link).item();
    out.vq_loss = tape.value(vq).item();
    out.loss = tape.value(total).item();
    if !out.loss.is_finite() {
        return Err(Error::NumericAbort {
            step: opts.step_index,
            query: facts.len(),
            norms: model.params.norms(),
        });
    }
    if opts.grad {
        tape.backward(total)?;
        out.grads = bound
            .vars
            .iter()
            .zip(model.params.values())
            .map(|(v, p)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
    }
    Ok(out)
}

/// Stream `[lo, hi]`, applying every commit. `visit` sees each step output
/// before its commit is applied.
pub fn run_window(
    model: &Model,
    state: &mut StreamState,
    dataset: &crate::data::TkgDataset,
    lo: u64,
    hi: u64,
    opts: StepOptions,
    mut visit: impl FnMut(u64, &StepOutput) -> Result<()>,
) -> Result<()> {
    for (t, facts) in dataset.stream(lo, hi) {
        let out = step(model, state, facts, opts)?;
        visit(t, &out)?;
        state.apply(out.commit)?;
    }
    Ok(())
}
