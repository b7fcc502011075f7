//! Quadruple streams: loading, vocabularies, chronological splits and slices.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;
pub type Timestamp = u64;

/// One timestamped fact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Quadruple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
    pub time: Timestamp,
}

/// Bijection between names and dense ids, assigned in first-occurrence order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for (i, n) in self.names.iter().enumerate() {
            writeln!(f, "{i}\t{n}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Last timestamp of the training and validation windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitBounds {
    pub train_end: Timestamp,
    pub valid_end: Timestamp,
}

/// Slice membership of a query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SliceTag {
    pub emerging: bool,
    pub unknown: bool,
}

/// Cumulative train and train+valid timestamp counts for `n` distinct
/// timestamps. Each boundary is the count nearest to its target ratio, with
/// exact halves rounded toward the earlier boundary.
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize)> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("invalid split ratios {ratios:?}")));
    }
    if n < 3 {
        return Err(Error::contract(format!(
            "chronological split needs at least 3 distinct timestamps, found {n}"
        )));
    }
    let round_down_half = |x: f64| -> usize {
        let f = x.floor();
        if x - f > 0.5 + 1e-9 {
            f as usize + 1
        } else {
            f as usize
        }
    };
    let b1 = round_down_half(a * n as f64).clamp(1, n - 2);
    let b2 = round_down_half((a + b) * n as f64).clamp(b1 + 1, n - 1);
    Ok((b1, b2))
}

#[derive(Clone, Debug)]
pub struct TkgDataset {
    facts: Vec<Quadruple>,
    entities: Vocab,
    relations: Vocab,
    base_relations: usize,
    augmented: bool,
    bounds: Option<SplitBounds>,
    first_appearance: Vec<Option<Timestamp>>,
    snapshots: Vec<(Timestamp, Range<usize>)>,
}

impl TkgDataset {
    /// Build from id-level facts; facts are stably sorted by timestamp.
    pub fn from_facts(entities: Vocab, relations: Vocab, mut facts: Vec<Quadruple>) -> Result<Self> {
        for f in &facts {
            if f.subject >= entities.len() || f.object >= entities.len() {
                return Err(Error::contract(format!("fact {f:?} references unknown entity")));
            }
            if f.relation >= relations.len() {
                return Err(Error::contract(format!("fact {f:?} references unknown relation")));
            }
        }
        facts.sort_by_key(|f| f.time);
        let base_relations = relations.len();
        let mut d = Self {
            facts,
            entities,
            relations,
            base_relations,
            augmented: false,
            bounds: None,
            first_appearance: vec![],
            snapshots: vec![],
        };
        d.reindex();
        Ok(d)
    }

    /// Build from `(subject, relation, object, time)` name rows.
    pub fn from_named<S: AsRef<str>>(rows: impl IntoIterator<Item = (S, S, S, Timestamp)>) -> Result<Self> {
        let mut ents = Vocab::default();
        let mut rels = Vocab::default();
        let mut facts = vec![];
        for (s, r, o, t) in rows {
            let subject = ents.intern(s.as_ref());
            let relation = rels.intern(r.as_ref());
            let object = ents.intern(o.as_ref());
            facts.push(Quadruple {
                subject,
                relation,
                object,
                time: t,
            });
        }
        Self::from_facts(ents, rels, facts)
    }

    /// Parse a 4-column TSV (`subject \t relation \t object \t timestamp`).
    pub fn load_tsv(path: &Path, has_header: bool) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut rows = vec![];
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            if has_header && i == 0 {
                continue;
            }
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("expected 4 tab-separated fields, found {}", cols.len()),
                });
            }
            let t: Timestamp = cols[3].trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("timestamp `{}` is not a non-negative integer", cols[3]),
            })?;
            rows.push((cols[0].to_string(), cols[1].to_string(), cols[2].to_string(), t));
        }
        Self::from_named(rows)
    }

    fn reindex(&mut self) {
        self.first_appearance = vec![None; self.entities.len()];
        for f in &self.facts {
            for e in [f.subject, f.object] {
                let slot = &mut self.first_appearance[e];
                if slot.is_none_or(|t| f.time < t) {
                    *slot = Some(f.time);
                }
            }
        }
        self.snapshots.clear();
        let mut start = 0;
        for i in 1..=self.facts.len() {
            if i == self.facts.len() || self.facts[i].time != self.facts[start].time {
                self.snapshots.push((self.facts[start].time, start..i));
                start = i;
            }
        }
    }

    /// Append the inverse `(o, r + |R|, s, t)` after each fact.
    pub fn augment_inverse(&self) -> Result<Self> {
        if self.augmented {
            return Err(Error::contract("dataset is already inverse-augmented"));
        }
        let r = self.relations.len();
        let mut relations = self.relations.clone();
        for i in 0..r {
            let name = format!("{}_inv", self.relations.name(i));
            let id = relations.intern(&name);
            if id != i + r {
                return Err(Error::contract(format!("relation name `{name}` collides")));
            }
        }
        let mut facts = Vec::with_capacity(self.facts.len() * 2);
        for f in &self.facts {
            facts.push(*f);
            facts.push(Quadruple {
                subject: f.object,
                relation: f.relation + r,
                object: f.subject,
                time: f.time,
            });
        }
        let mut d = self.clone();
        d.facts = facts;
        d.relations = relations;
        d.base_relations = r;
        d.augmented = true;
        d.reindex();
        Ok(d)
    }

    /// Assign train/valid/test boundaries on distinct timestamps.
    pub fn chronological_split(&self, ratios: (f64, f64, f64)) -> Result<Self> {
        let times = self.timestamps();
        let (b1, b2) = split_counts(times.len(), ratios)?;
        let mut d = self.clone();
        d.bounds = Some(SplitBounds {
            train_end: times[b1 - 1],
            valid_end: times[b2 - 1],
        });
        Ok(d)
    }

    /// Same dataset with explicit boundaries.
    pub fn with_bounds(&self, bounds: SplitBounds) -> Result<Self> {
        let max = self.facts.last().map(|f| f.time).unwrap_or(0);
        if !(bounds.train_end < bounds.valid_end && bounds.valid_end < max) {
            return Err(Error::contract(format!("invalid split bounds {bounds:?}")));
        }
        let mut d = self.clone();
        d.bounds = Some(bounds);
        Ok(d)
    }

    /// Keep only the most recent `pct` percent of training timestamps.
    pub fn truncate_horizon(&self, pct: f64) -> Result<Self> {
        if !(pct > 0.0 && pct <= 100.0) {
            return Err(Error::contract(format!("horizon percent {pct} outside (0, 100]")));
        }
        let bounds = self.require_bounds()?;
        let train_times: Vec<Timestamp> = self
            .timestamps()
            .into_iter()
            .filter(|&t| t <= bounds.train_end)
            .collect();
        let keep = ((pct / 100.0 * train_times.len() as f64) - 1e-9).ceil().max(1.0) as usize;
        let cutoff = train_times[train_times.len() - keep];
        let mut d = self.clone();
        d.facts.retain(|f| f.time > bounds.train_end || f.time >= cutoff);
        d.reindex();
        Ok(d)
    }

    /// Drop every fact later than `t0`; vocabularies and bounds are kept.
    pub fn truncate_after(&self, t0: Timestamp) -> Self {
        let mut d = self.clone();
        d.facts.retain(|f| f.time <= t0);
        d.reindex();
        d
    }

    pub fn facts(&self) -> &[Quadruple] {
        &self.facts
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn base_relations(&self) -> usize {
        self.base_relations
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    pub fn bounds(&self) -> Option<SplitBounds> {
        self.bounds
    }

    pub fn require_bounds(&self) -> Result<SplitBounds> {
        self.bounds
            .ok_or_else(|| Error::contract("dataset has no split boundaries"))
    }

    pub fn first_appearance(&self, e: EntityId) -> Option<Timestamp> {
        self.first_appearance[e]
    }

    /// Distinct timestamps in ascending order.
    pub fn timestamps(&self) -> Vec<Timestamp> {
        self.snapshots.iter().map(|(t, _)| *t).collect()
    }

    pub fn split_of(&self, t: Timestamp) -> Option<Split> {
        let b = self.bounds?;
        Some(if t <= b.train_end {
            Split::Train
        } else if t <= b.valid_end {
            Split::Valid
        } else {
            Split::Test
        })
    }

    /// Inclusive timestamp window covered by a split.
    pub fn split_window(&self, split: Split) -> Result<(Timestamp, Timestamp)> {
        let b = self.require_bounds()?;
        Ok(match split {
            Split::Train => (0, b.train_end),
            Split::Valid => (b.train_end + 1, b.valid_end),
            Split::Test => (b.valid_end + 1, Timestamp::MAX),
        })
    }

    /// Snapshots with `lo <= t <= hi`, ascending.
    pub fn stream(&self, lo: Timestamp, hi: Timestamp) -> impl Iterator<Item = (Timestamp, &[Quadruple])> + '_ {
        self.snapshots
            .iter()
            .filter(move |(t, _)| *t >= lo && *t <= hi)
            .map(move |(t, r)| (*t, &self.facts[r.clone()]))
    }

    pub fn stream_split(&self, split: Split) -> Result<impl Iterator<Item = (Timestamp, &[Quadruple])> + '_> {
        let (lo, hi) = self.split_window(split)?;
        Ok(self.stream(lo, hi))
    }

    /// Offset of the first fact at or after `t`.
    pub fn fact_offset(&self, t: Timestamp) -> usize {
        self.facts.partition_point(|f| f.time < t)
    }

    /// Entities that occur in at least one training fact.
    pub fn train_entities(&self) -> Result<HashSet<EntityId>> {
        let b = self.require_bounds()?;
        let mut s = HashSet::new();
        for f in self.facts.iter().take_while(|f| f.time <= b.train_end) {
            s.insert(f.subject);
            s.insert(f.object);
        }
        Ok(s)
    }

    /// Number of training facts per subject.
    pub fn train_depth(&self) -> Result<Vec<usize>> {
        let b = self.require_bounds()?;
        let mut depth = vec![0; self.num_entities()];
        for f in self.facts.iter().take_while(|f| f.time <= b.train_end) {
            depth[f.subject] += 1;
        }
        Ok(depth)
    }

    /// Slice tag for every fact, aligned with [`Self::facts`].
    ///
    /// Emerging is keyed on the query subject: its first appearance is the
    /// query timestamp, after the training window. Unknown: subject or
    /// object absent from training.
    pub fn tag_slices(&self) -> Result<Vec<SliceTag>> {
        let train = self.train_entities()?;
        let train_end = self.require_bounds()?.train_end;
        Ok(self
            .facts
            .iter()
            .map(|f| SliceTag {
                emerging: f.time > train_end && self.first_appearance[f.subject] == Some(f.time),
                unknown: !train.contains(&f.subject) || !train.contains(&f.object),
            })
            .collect())
    }

    pub fn write_slice_csv(&self, path: &Path) -> Result<()> {
        let tags = self.tag_slices()?;
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "fact_index,is_emerging,is_unknown")?;
        for (i, t) in tags.iter().enumerate() {
            writeln!(f, "{i},{},{}", t.emerging as u8, t.unknown as u8)?;
        }
        Ok(())
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for q in &self.facts {
            if self.augmented && q.relation >= self.base_relations {
                continue;
            }
            writeln!(
                f,
                "{}\t{}\t{}\t{}",
                self.entities.name(q.subject),
                self.relations.name(q.relation),
                self.entities.name(q.object),
                q.time
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn toy(times: &[Timestamp]) -> TkgDataset {
        TkgDataset::from_named(times.iter().enumerate().map(|(i, &t)| {
            (format!("e{}", i % 3), "r".to_string(), format!("e{}", (i + 1) % 3), t)
        }))
        .unwrap()
    }

    #[test]
    fn load_small_file() {
        let f = write("a\tlikes\tb\t0\nb\tlikes\ta\t1\na\tlikes\tb\t2\n");
        let d = TkgDataset::load_tsv(f.path(), false).unwrap();
        assert_eq!(d.num_entities(), 2);
        assert_eq!(d.num_relations(), 1);
        assert_eq!(d.facts().len(), 3);
    }

    #[test]
    fn load_resorts_stably_and_keeps_duplicates() {
        let f = write("h\tx\ty\tt\na\tr\tb\t5\nc\tr\td\t1\nb\tr\ta\t5\na\tr\tb\t5\n");
        let d = TkgDataset::load_tsv(f.path(), true).unwrap();
        let names: Vec<_> = d.facts().iter().map(|q| (d.entities().name(q.subject), q.time)).collect();
        assert_eq!(names, vec![("c", 1), ("a", 5), ("b", 5), ("a", 5)]);
        assert_eq!(d.facts().len(), 4);
        // vocab ids follow first occurrence in the file, not sorted order
        assert_eq!(d.entities().id("a"), Some(0));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let f = write("a\tr\tb\t0\na\tr\tb\n");
        match TkgDataset::load_tsv(f.path(), false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let f = write("a\tr\tb\tnoon\n");
        assert!(matches!(TkgDataset::load_tsv(f.path(), false), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn augmentation_doubles_and_rejects_twice() {
        let d = TkgDataset::from_named([("a", "r", "b", 0)]).unwrap();
        let a = d.augment_inverse().unwrap();
        assert_eq!(a.facts().len(), 2);
        assert_eq!(a.facts()[1].relation, 1);
        assert_eq!(a.num_relations(), 2);
        assert!(matches!(a.augment_inverse(), Err(Error::Contract(_))));
    }

    #[test]
    fn inverse_of_inverse_round_trips() {
        let rows: Vec<_> = (0..10)
            .map(|i| (format!("e{}", i % 4), format!("r{}", i % 3), format!("e{}", (i * 7) % 5), i as u64 / 3))
            .collect();
        let d = TkgDataset::from_named(rows).unwrap();
        let a = d.augment_inverse().unwrap();
        let r = d.num_relations();
        let set: HashSet<_> = a.facts().iter().map(|q| (q.subject, q.relation, q.object, q.time)).collect();
        for q in a.facts() {
            let inv_rel = if q.relation < r { q.relation + r } else { q.relation - r };
            let inv = (q.object, inv_rel, q.subject, q.time);
            assert!(set.contains(&inv));
            let back_rel = if inv_rel < r { inv_rel + r } else { inv_rel - r };
            assert_eq!((inv.2, back_rel, inv.0), (q.subject, q.relation, q.object));
        }
    }

    #[test]
    fn split_ten_timestamps_exact() {
        let d = toy(&(1..=10).collect::<Vec<_>>()).chronological_split((0.5, 0.2, 0.3)).unwrap();
        assert_eq!(d.bounds().unwrap(), SplitBounds { train_end: 5, valid_end: 7 });
        let train_max = d.stream_split(Split::Train).unwrap().map(|(t, _)| t).max().unwrap();
        let valid_min = d.stream_split(Split::Valid).unwrap().map(|(t, _)| t).min().unwrap();
        assert!(train_max < valid_min);
    }

    /// Joint enumeration of all boundary placements.
    fn oracle_split(n: usize, r: (f64, f64, f64)) -> (usize, usize) {
        let (t1, t2) = (r.0 * n as f64, (r.0 + r.1) * n as f64);
        let mut best = (f64::INFINITY, 0, 0);
        for b1 in 1..n - 1 {
            for b2 in b1 + 1..n {
                let cost = (b1 as f64 - t1).abs() + (b2 as f64 - t2).abs();
                if cost < best.0 - 1e-9 {
                    best = (cost, b1, b2);
                }
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn split_matches_enumeration_oracle() {
        for n in 3..40usize {
            for r in [(0.5, 0.2, 0.3), (0.8, 0.1, 0.1), (0.34, 0.33, 0.33), (0.1, 0.1, 0.8)] {
                let times: Vec<Timestamp> = (0..n as u64).collect();
                let d = toy(&times).chronological_split(r).unwrap();
                let b = d.bounds().unwrap();
                let got = (b.train_end as usize + 1, b.valid_end as usize + 1);
                assert_eq!(got, oracle_split(n, r), "n={n} r={r:?}");
            }
        }
        let d = toy(&(0..7).collect::<Vec<_>>()).chronological_split((0.5, 0.2, 0.3)).unwrap();
        assert_eq!(d.bounds().unwrap(), SplitBounds { train_end: 2, valid_end: 4 });
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(toy(&[0, 1]).chronological_split((0.5, 0.2, 0.3)).is_err());
        assert!(toy(&[0, 1, 2, 3]).chronological_split((0.5, 0.2, 0.2)).is_err());
    }

    #[test]
    fn slice_tags_by_hand() {
        // a,b train; c first seen in valid (t=2); d emerges in test (t=3)
        let d = TkgDataset::from_named([
            ("a", "r", "b", 0),
            ("b", "r", "a", 1),
            ("c", "r", "a", 2),
            ("d", "r", "a", 3),
            ("c", "r", "b", 3),
            ("a", "r", "b", 3),
        ])
        .unwrap()
        .with_bounds(SplitBounds { train_end: 1, valid_end: 2 })
        .unwrap();
        let tags = d.tag_slices().unwrap();
        assert_eq!(tags[3], SliceTag { emerging: true, unknown: true });
        assert_eq!(tags[4], SliceTag { emerging: false, unknown: true });
        assert_eq!(tags[5], SliceTag { emerging: false, unknown: false });
        assert_eq!(tags[0], SliceTag { emerging: false, unknown: false });
        assert!(tags.iter().all(|t| !t.emerging || t.unknown));
    }

    #[test]
    fn stream_order_windows_and_concatenation() {
        let d = toy(&[3, 1, 2, 2, 5, 4, 6, 7, 8, 9]).chronological_split((0.5, 0.2, 0.3)).unwrap();
        let all: Vec<_> = d.stream(0, u64::MAX).collect();
        assert!(all.windows(2).all(|w| w[0].0 < w[1].0));
        let win: Vec<_> = d.stream(2, 4).map(|(t, _)| t).collect();
        assert_eq!(win, vec![2, 3, 4]);
        assert_eq!(d.stream(100, 200).count(), 0);
        let mut cat = vec![];
        for s in [Split::Train, Split::Valid, Split::Test] {
            cat.extend(d.stream_split(s).unwrap().flat_map(|(_, f)| f.to_vec()));
        }
        assert_eq!(cat, d.facts().to_vec());
    }

    #[test]
    fn horizon_truncation() {
        let times: Vec<Timestamp> = (1..=16).collect();
        let d = toy(&times).with_bounds(SplitBounds { train_end: 10, valid_end: 13 }).unwrap();
        assert_eq!(d.truncate_horizon(100.0).unwrap().facts(), d.facts());
        let h = d.truncate_horizon(50.0).unwrap();
        let train: Vec<_> = h.stream_split(Split::Train).unwrap().map(|(t, _)| t).collect();
        assert_eq!(train, vec![6, 7, 8, 9, 10]);
        assert_eq!(h.stream_split(Split::Test).unwrap().count(), 3);
        assert!(d.truncate_horizon(0.0).is_err());
        assert!(d.truncate_horizon(101.0).is_err());
    }
}
