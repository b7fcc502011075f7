//! Filtered ranking, slice reports and memory analyses.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::FilterMode;
use crate::data::{EntityId, Quadruple, RelationId, SliceTag, Split, Timestamp, TkgDataset};
use crate::engine::{run_window, ReprMode, StepOptions, StreamState};
use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup};

/// Known-true objects per query key.
#[derive(Clone, Debug)]
pub struct FilterIndex {
    mode: FilterMode,
    by_time: HashMap<(EntityId, RelationId, Timestamp), Vec<EntityId>>,
    by_pair: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl FilterIndex {
    pub fn build(dataset: &TkgDataset, mode: FilterMode) -> Self {
        let mut by_time: HashMap<_, Vec<EntityId>> = HashMap::new();
        let mut by_pair: HashMap<_, Vec<EntityId>> = HashMap::new();
        for f in dataset.facts() {
            match mode {
                FilterMode::Timestamp => by_time.entry((f.subject, f.relation, f.time)).or_default().push(f.object),
                FilterMode::Static => by_pair.entry((f.subject, f.relation)).or_default().push(f.object),
            }
        }
        for v in by_time.values_mut().chain(by_pair.values_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        Self { mode, by_time, by_pair }
    }

    pub fn mode(&self) -> FilterMode {
        self.mode
    }

    pub fn get(&self, s: EntityId, r: RelationId, t: Timestamp) -> &[EntityId] {
        let v = match self.mode {
            FilterMode::Timestamp => self.by_time.get(&(s, r, t)),
            FilterMode::Static => self.by_pair.get(&(s, r)),
        };
        v.map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, f: &Quadruple) -> bool {
        self.get(f.subject, f.relation, f.time).binary_search(&f.object).is_ok()
    }
}

/// `1 + #{o ≠ truth, o ∉ filter : score(o) ≥ score(truth)}`; ties count
/// against the true object.
pub fn filtered_rank(scores: &[f64], truth: EntityId, filter: &[EntityId]) -> usize {
    let target = scores[truth];
    let mut rank = 1;
    for (o, &s) in scores.iter().enumerate() {
        if o != truth && s >= target && !filter.contains(&o) {
            rank += 1;
        }
    }
    rank
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryRecord {
    pub query_index: usize,
    pub fact: QuadrupleRecord,
    pub rank: usize,
    pub rr: f64,
    pub emerging: bool,
    pub unknown: bool,
    pub train_depth: usize,
    pub test_updates: u64,
    pub subject_count: u64,
    pub gate_mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct QuadrupleRecord {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
    pub time: Timestamp,
}

impl From<Quadruple> for QuadrupleRecord {
    fn from(q: Quadruple) -> Self {
        Self {
            subject: q.subject,
            relation: q.relation,
            object: q.object,
            time: q.time,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SliceMetrics {
    pub mrr: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub n: usize,
}

impl SliceMetrics {
    pub fn from_ranks(ranks: impl IntoIterator<Item = usize>) -> Self {
        let (mut rr, mut h3, mut h10, mut n) = (0.0, 0.0, 0.0, 0usize);
        for r in ranks {
            rr += 1.0 / r as f64;
            h3 += (r <= 3) as u8 as f64;
            h10 += (r <= 10) as u8 as f64;
            n += 1;
        }
        if n == 0 {
            return Self {
                mrr: f64::NAN,
                hits3: f64::NAN,
                hits10: f64::NAN,
                n,
            };
        }
        let k = n as f64;
        Self {
            mrr: rr / k,
            hits3: h3 / k,
            hits10: h10 / k,
            n,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankReport {
    pub records: Vec<QueryRecord>,
}

impl RankReport {
    pub fn slice(&self, name: &str) -> SliceMetrics {
        let pick = |r: &&QueryRecord| match name {
            "emerging" => r.emerging,
            "unknown" => r.unknown,
            _ => true,
        };
        SliceMetrics::from_ranks(self.records.iter().filter(pick).map(|r| r.rank))
    }

    pub fn aggregates(&self) -> BTreeMap<&'static str, SliceMetrics> {
        ["all", "emerging", "unknown"]
            .into_iter()
            .map(|s| (s, self.slice(s)))
            .collect()
    }

    pub fn mrr(&self) -> f64 {
        self.slice("all").mrr
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(
            w,
            "query_index,subject,relation,object,t,rank,rr,emerging,unknown,train_depth,test_updates,gate_mean"
        )?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{:.17e},{},{},{},{},{:.17e}",
                r.query_index,
                r.fact.subject,
                r.fact.relation,
                r.fact.object,
                r.fact.time,
                r.rank,
                r.rr,
                r.emerging as u8,
                r.unknown as u8,
                r.train_depth,
                r.test_updates,
                r.gate_mean
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let c: Vec<&str> = line.split(',').collect();
            let err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: msg.into(),
            };
            if c.len() != 12 {
                return Err(err("expected 12 columns"));
            }
            let u = |k: usize| c[k].parse::<u64>().map_err(|_| err("bad integer"));
            let f = |k: usize| c[k].parse::<f64>().map_err(|_| err("bad float"));
            records.push(QueryRecord {
                query_index: u(0)? as usize,
                fact: QuadrupleRecord {
                    subject: u(1)? as usize,
                    relation: u(2)? as usize,
                    object: u(3)? as usize,
                    time: u(4)?,
                },
                rank: u(5)? as usize,
                rr: f(6)?,
                emerging: u(7)? == 1,
                unknown: u(8)? == 1,
                train_depth: u(9)? as usize,
                test_updates: u(10)?,
                subject_count: 0,
                gate_mean: f(11)?,
            });
        }
        Ok(Self { records })
    }

    pub fn aggregates_json(&self) -> String {
        serde_json::to_string_pretty(&self.aggregates()).expect("serialisable")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.aggregates_json())?;
        Ok(())
    }
}

/// Per-query context shared by every evaluation over one dataset.
#[derive(Clone, Debug)]
pub struct EvalContext {
    pub filter: FilterIndex,
    pub tags: Vec<SliceTag>,
    pub depth: Vec<usize>,
}

impl EvalContext {
    pub fn new(dataset: &TkgDataset, mode: FilterMode) -> Result<Self> {
        Ok(Self {
            filter: FilterIndex::build(dataset, mode),
            tags: dataset.tag_slices()?,
            depth: dataset.train_depth()?,
        })
    }
}

/// Stream `[lo, hi]` chronologically with online memory updates and rank
/// every query. The state is left positioned after `hi`.
pub fn evaluate_window(
    model: &Model,
    state: &mut StreamState,
    dataset: &TkgDataset,
    ctx: &EvalContext,
    lo: Timestamp,
    hi: Timestamp,
    mode: ReprMode,
) -> Result<RankReport> {
    let start_counts = state.bank.counts().to_vec();
    let mut records = Vec::new();
    run_window(model, state, dataset, lo, hi, StepOptions::eval(mode), |t, out| {
        let base = dataset.fact_offset(t);
        for (i, q) in out.queries.iter().enumerate() {
            let f = q.fact;
            let idx = base + i;
            let rank = filtered_rank(&q.scores, f.object, ctx.filter.get(f.subject, f.relation, f.time));
            records.push(QueryRecord {
                query_index: idx,
                fact: f.into(),
                rank,
                rr: 1.0 / rank as f64,
                emerging: ctx.tags[idx].emerging,
                unknown: ctx.tags[idx].unknown,
                train_depth: ctx.depth[f.subject],
                test_updates: q.subject_count - start_counts[f.subject],
                subject_count: q.subject_count,
                gate_mean: q.gate_mean,
            });
        }
        Ok(())
    })?;
    Ok(RankReport { records })
}

/// Stream state positioned at the start of `split`: a fresh replay of every
/// earlier timestamp without scoring.
pub fn state_before(model: &Model, dataset: &TkgDataset, split: Split) -> Result<StreamState> {
    let mut state = StreamState::fresh(model);
    let (lo, _) = dataset.split_window(split)?;
    if lo > 0 {
        run_window(model, &mut state, dataset, 0, lo - 1, StepOptions::replay(), |_, _| Ok(()))?;
    }
    Ok(state)
}

/// Evaluate one split from a freshly rebuilt stream state.
pub fn evaluate(model: &Model, dataset: &TkgDataset, ctx: &EvalContext, split: Split, mode: ReprMode) -> Result<RankReport> {
    let mut state = state_before(model, dataset, split)?;
    let (lo, hi) = dataset.split_window(split)?;
    evaluate_window(model, &mut state, dataset, ctx, lo, hi, mode)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Bin {
    pub lo: u64,
    /// Exclusive; `None` for the open last bin.
    pub hi: Option<u64>,
    pub mean: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaTable {
    pub per_query: Vec<f64>,
    pub by_depth: Vec<Bin>,
    pub by_updates: Vec<Bin>,
}

pub const DEFAULT_DEPTH_EDGES: &[u64] = &[0, 1, 5, 10, 20, 50];
pub const DEFAULT_UPDATE_EDGES: &[u64] = &[0, 1, 2, 4, 8, 16];

fn bin_by(values: &[(u64, f64)], edges: &[u64]) -> Vec<Bin> {
    (0..edges.len())
        .map(|i| {
            let lo = edges[i];
            let hi = edges.get(i + 1).copied();
            let inside: Vec<f64> = values
                .iter()
                .filter(|(k, _)| *k >= lo && hi.is_none_or(|h| *k < h))
                .map(|(_, v)| *v)
                .collect();
            let mean = if inside.is_empty() {
                f64::NAN
            } else {
                inside.iter().sum::<f64>() / inside.len() as f64
            };
            Bin {
                lo,
                hi,
                mean,
                count: inside.len(),
            }
        })
        .collect()
}

/// `Δ_RR = RR_full − RR_zero` per query, binned by train depth and by
/// test-time updates of the subject. Edges must start at 0 and increase.
pub fn delta_rr(full: &RankReport, zero: &RankReport, depth_edges: &[u64], update_edges: &[u64]) -> Result<DeltaTable> {
    for edges in [depth_edges, update_edges] {
        if edges.first() != Some(&0) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("bin edges must start at 0 and increase"));
        }
    }
    if full.records.len() != zero.records.len() {
        return Err(Error::contract("reports cover different query sets"));
    }
    let mut per_query = Vec::with_capacity(full.records.len());
    let mut depth = Vec::new();
    let mut updates = Vec::new();
    for (a, b) in full.records.iter().zip(&zero.records) {
        if a.query_index != b.query_index || a.fact != b.fact {
            return Err(Error::contract(format!(
                "reports diverge at query {} vs {}",
                a.query_index, b.query_index
            )));
        }
        let d = a.rr - b.rr;
        per_query.push(d);
        depth.push((a.train_depth as u64, d));
        updates.push((a.test_updates, d));
    }
    Ok(DeltaTable {
        per_query,
        by_depth: bin_by(&depth, depth_edges),
        by_updates: bin_by(&updates, update_edges),
    })
}

impl DeltaTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(w, "axis,lo,hi,mean_delta_rr,count")?;
        for (axis, bins) in [("train_depth", &self.by_depth), ("test_updates", &self.by_updates)] {
            for b in bins {
                let hi = b.hi.map(|h| h.to_string()).unwrap_or_else(|| "inf".into());
                writeln!(w, "{axis},{},{hi},{},{}", b.lo, b.mean, b.count)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-query gate statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRow {
    pub query_index: usize,
    pub subject: EntityId,
    pub time: Timestamp,
    pub interactions: u64,
    pub gate_mean: f64,
}

pub fn gate_trace(report: &RankReport) -> Vec<GateRow> {
    report
        .records
        .iter()
        .map(|r| GateRow {
            query_index: r.query_index,
            subject: r.fact.subject,
            time: r.fact.time,
            interactions: r.subject_count,
            gate_mean: r.gate_mean,
        })
        .collect()
}

/// Gate trace CSV; with `entities`, only rows for those subjects.
pub fn write_gate_trace(rows: &[GateRow], dataset: &TkgDataset, entities: Option<&[EntityId]>, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "query_index,subject,t,interactions,gate_mean")?;
    for r in rows {
        if entities.is_some_and(|es| !es.contains(&r.subject)) {
            continue;
        }
        writeln!(
            w,
            "{},{},{},{},{}",
            r.query_index,
            dataset.entities().name(r.subject),
            r.time,
            r.interactions,
            r.gate_mean
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Learnable-scalar counts per parameter group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamAudit {
    pub operator: usize,
    pub gate: usize,
    pub backbone: usize,
    pub decoder: usize,
    pub total: usize,
}

pub fn efficiency_counters(model: &Model) -> ParamAudit {
    let g = model.params.group_counts();
    let get = |k| g.get(&k).copied().unwrap_or(0);
    ParamAudit {
        operator: get(ParamGroup::Operator),
        gate: get(ParamGroup::Gate),
        backbone: get(ParamGroup::Backbone),
        decoder: get(ParamGroup::Decoder),
        total: model.params.total(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(filtered_rank(&[0.1, 0.9, 0.3], 1, &[]), 1);
        // two strictly above, one of them filtered
        assert_eq!(filtered_rank(&[0.9, 0.8, 0.5, 0.1], 2, &[0, 2]), 2);
        // all tied: n − |filtered other than truth|
        assert_eq!(filtered_rank(&[0.5; 6], 0, &[0, 3, 4]), 4);
        assert_eq!(filtered_rank(&[0.5; 6], 0, &[]), 6);
    }

    #[test]
    fn mrr_of_rank_one_and_four() {
        let m = SliceMetrics::from_ranks([1, 4]);
        assert!((m.mrr - 0.625).abs() < 1e-15);
        assert_eq!(m.hits3, 0.5);
        assert_eq!(m.hits10, 1.0);
        assert!(SliceMetrics::from_ranks([]).mrr.is_nan());
    }

    fn rec(i: usize, rank: usize, depth: usize, upd: u64) -> QueryRecord {
        QueryRecord {
            query_index: i,
            fact: QuadrupleRecord {
                subject: 0,
                relation: 0,
                object: 1,
                time: 0,
            },
            rank,
            rr: 1.0 / rank as f64,
            emerging: false,
            unknown: false,
            train_depth: depth,
            test_updates: upd,
            subject_count: 0,
            gate_mean: 0.0,
        }
    }

    #[test]
    fn delta_rr_cases() {
        let a = RankReport {
            records: vec![rec(0, 1, 0, 0), rec(1, 2, 7, 3), rec(2, 3, 60, 40)],
        };
        let t = delta_rr(&a, &a, DEFAULT_DEPTH_EDGES, DEFAULT_UPDATE_EDGES).unwrap();
        assert!(t.per_query.iter().all(|d| *d == 0.0));
        assert_eq!(t.by_depth.iter().map(|b| b.count).sum::<usize>(), 3);
        assert_eq!(t.by_updates.iter().map(|b| b.count).sum::<usize>(), 3);

        let n = 10;
        let full = RankReport { records: vec![rec(0, 1, 0, 0)] };
        let zero = RankReport { records: vec![rec(0, n, 0, 0)] };
        let t = delta_rr(&full, &zero, DEFAULT_DEPTH_EDGES, DEFAULT_UPDATE_EDGES).unwrap();
        assert!((t.per_query[0] - (1.0 - 1.0 / n as f64)).abs() < 1e-15);

        let other = RankReport { records: vec![rec(5, 1, 0, 0)] };
        assert!(delta_rr(&full, &other, DEFAULT_DEPTH_EDGES, DEFAULT_UPDATE_EDGES).is_err());
        assert!(delta_rr(&full, &a, DEFAULT_DEPTH_EDGES, DEFAULT_UPDATE_EDGES).is_err());
        assert!(delta_rr(&full, &full, &[1, 2], DEFAULT_UPDATE_EDGES).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = RankReport {
            records: vec![rec(0, 1, 0, 0), rec(1, 7, 3, 2)],
        };
        let p = dir.path().join("r.csv");
        r.write_csv(&p).unwrap();
        let back = RankReport::read_csv(&p).unwrap();
        assert_eq!(back, r);
    }
}
