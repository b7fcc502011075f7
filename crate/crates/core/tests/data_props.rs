use std::collections::HashMap;
use std::io::Write;

use proptest::prelude::*;
use tkgmem::data::{Quadruple, Split, TkgDataset};
use tkgmem::synth::{generate, SyntheticSpec};
use tkgmem::Error;

type Row = (String, String, String, u64);

fn rows() -> impl Strategy<Value = Vec<Row>> {
    prop::collection::vec((0usize..6, 0usize..3, 0usize..6, 0u64..12), 1..40).prop_map(|v| {
        v.into_iter()
            .map(|(s, r, o, t)| (format!("e{s}"), format!("r{r}"), format!("e{o}"), t))
            .collect()
    })
}

fn load(rows: &[Row]) -> TkgDataset {
    TkgDataset::from_named(rows.iter().map(|(s, r, o, t)| (s.as_str(), r.as_str(), o.as_str(), *t))).unwrap()
}

fn names(d: &TkgDataset, q: &Quadruple) -> Row {
    (
        d.entities().name(q.subject).to_string(),
        d.relations().name(q.relation).to_string(),
        d.entities().name(q.object).to_string(),
        q.time,
    )
}

proptest! {
    #[test]
    fn facts_are_a_stable_time_sort(rows in rows()) {
        let d = load(&rows);
        let mut expect = rows.clone();
        expect.sort_by_key(|r| r.3);
        let got: Vec<Row> = d.facts().iter().map(|q| names(&d, q)).collect();
        prop_assert_eq!(got, expect);
    }

    #[test]
    fn first_appearance_is_min_timestamp(rows in rows()) {
        let d = load(&rows);
        let mut first: HashMap<&str, u64> = HashMap::new();
        for (s, _, o, t) in &rows {
            for e in [s.as_str(), o.as_str()] {
                let v = first.entry(e).or_insert(*t);
                *v = (*v).min(*t);
            }
        }
        for (name, t) in first {
            let id = d.entities().id(name).unwrap();
            prop_assert_eq!(d.first_appearance(id), Some(t));
        }
        for f in d.facts() {
            prop_assert!(d.first_appearance(f.subject).unwrap() <= f.time);
            prop_assert!(d.first_appearance(f.object).unwrap() <= f.time);
        }
    }

    #[test]
    fn inverse_augmentation_doubles_and_mirrors(rows in rows()) {
        let d = load(&rows);
        let a = d.augment_inverse().unwrap();
        let nr = d.num_relations();
        prop_assert_eq!(a.facts().len(), 2 * d.facts().len());
        prop_assert_eq!(a.num_relations(), 2 * nr);
        let mut fwd: Vec<(usize, usize, usize, u64)> = a.facts().iter().filter(|f| f.relation < nr).map(|f| (f.subject, f.relation, f.object, f.time)).collect();
        let mut inv: Vec<(usize, usize, usize, u64)> = a.facts().iter().filter(|f| f.relation >= nr).map(|f| (f.object, f.relation - nr, f.subject, f.time)).collect();
        fwd.sort();
        inv.sort();
        prop_assert_eq!(fwd, inv);
        prop_assert!(matches!(a.augment_inverse(), Err(Error::Contract(_))));
    }

    #[test]
    fn splits_partition_time_and_facts(rows in rows(), a in 0.2f64..0.7, b in 0.05f64..0.25) {
        let d = load(&rows);
        let c = 1.0 - a - b;
        prop_assume!(c > 0.01);
        let times = d.timestamps();
        match d.chronological_split((a, b, c)) {
            Err(_) => prop_assert!(times.len() < 3),
            Ok(s) => {
                let mut per = [0usize; 3];
                for f in s.facts() {
                    let k = match s.split_of(f.time).unwrap() {
                        Split::Train => 0,
                        Split::Valid => 1,
                        Split::Test => 2,
                    };
                    per[k] += 1;
                }
                prop_assert!(per.iter().all(|&n| n > 0));
                prop_assert_eq!(per.iter().sum::<usize>(), s.facts().len());
                let b = s.bounds().unwrap();
                prop_assert!(b.train_end < b.valid_end);
                prop_assert!(s.facts().iter().filter(|f| f.time <= b.train_end).all(|f| s.split_of(f.time) == Some(Split::Train)));
                let mut cat = Vec::new();
                for sp in [Split::Train, Split::Valid, Split::Test] {
                    for (_, facts) in s.stream_split(sp).unwrap() {
                        cat.extend_from_slice(facts);
                    }
                }
                prop_assert_eq!(cat, s.facts().to_vec());
            }
        }
    }

    #[test]
    fn emerging_implies_unknown(rows in rows()) {
        let d = load(&rows).augment_inverse().unwrap();
        prop_assume!(d.timestamps().len() >= 3);
        let s = d.chronological_split((0.5, 0.2, 0.3)).unwrap();
        for t in s.tag_slices().unwrap() {
            prop_assert!(!t.emerging || t.unknown);
        }
    }

    #[test]
    fn streams_ascend_and_respect_windows(rows in rows(), lo in 0u64..12, len in 0u64..6) {
        let d = load(&rows);
        let hi = lo + len;
        let got: Vec<u64> = d.stream(lo, hi).map(|(t, facts)| {
            assert!(facts.iter().all(|f| f.time == t));
            t
        }).collect();
        prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(got.iter().all(|&t| t >= lo && t <= hi));
        let want: Vec<u64> = d.timestamps().into_iter().filter(|&t| t >= lo && t <= hi).collect();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn emerging_slice_grows_as_horizon_shrinks() {
    let spec = SyntheticSpec {
        facts_per_entity: 0.1,
        ..SyntheticSpec::default()
    };
    let g = generate(&spec).unwrap();
    let d = g.dataset.augment_inverse().unwrap().chronological_split((0.8, 0.1, 0.1)).unwrap();
    let count = |k: f64| {
        let h = d.truncate_horizon(k).unwrap();
        h.tag_slices().unwrap().iter().filter(|t| t.emerging).count()
    };
    let sizes: Vec<usize> = [100.0, 75.0, 50.0, 25.0, 10.0].iter().map(|&k| count(k)).collect();
    assert!(sizes.windows(2).all(|w| w[0] <= w[1]), "{sizes:?}");
    assert!(sizes[4] > sizes[0]);
    assert_eq!(d.truncate_horizon(100.0).unwrap().facts(), d.facts());
    assert!(d.truncate_horizon(0.0).is_err());
    assert!(d.truncate_horizon(100.5).is_err());
}

#[test]
fn tsv_duplicates_and_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.tsv");
    let mut f = std::fs::File::create(&p).unwrap();
    writeln!(f, "s\tr\to\tt").unwrap();
    writeln!(f, "a\tlikes\tb\t2").unwrap();
    writeln!(f, "a\tlikes\tb\t2").unwrap();
    writeln!(f, "b\tlikes\ta\t0").unwrap();
    drop(f);
    let d = TkgDataset::load_tsv(&p, true).unwrap();
    assert_eq!(d.facts().len(), 3);
    assert_eq!(d.facts()[0].time, 0);
    assert_eq!((d.num_entities(), d.num_relations()), (2, 1));

    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "a\tr\tb\t1\na\tr\tb\tsoon\n").unwrap();
    match TkgDataset::load_tsv(&bad, false) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
    std::fs::write(&bad, "a\tr\tb\n").unwrap();
    assert!(matches!(TkgDataset::load_tsv(&bad, false), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn six_fact_stream_tags() {
    // a,b train; c first seen in valid; d emerges in test
    let d = TkgDataset::from_named([
        ("a", "r", "b", 0),
        ("b", "r", "a", 1),
        ("a", "r", "b", 2),
        ("c", "r", "a", 3),
        ("c", "r", "b", 4),
        ("d", "r", "a", 4),
    ])
    .unwrap()
    .with_bounds(tkgmem::data::SplitBounds { train_end: 2, valid_end: 3 })
    .unwrap();
    let tags = d.tag_slices().unwrap();
    let get = |s: &str, t: u64| {
        let i = d
            .facts()
            .iter()
            .position(|f| d.entities().name(f.subject) == s && f.time == t)
            .unwrap();
        (tags[i].emerging, tags[i].unknown)
    };
    assert_eq!(get("a", 2), (false, false));
    assert_eq!(get("c", 3), (true, true));
    assert_eq!(get("c", 4), (false, true));
    assert_eq!(get("d", 4), (true, true));
}
