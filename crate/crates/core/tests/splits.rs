use std::collections::{BTreeMap, BTreeSet};

use gaze_core::dataio::{batch_order, split_relaxed, split_strict, DatasetIndex, Part, SubjectInfo, RELAXED_RATIOS};
use gaze_core::GazeError;
use proptest::prelude::*;

/// Index with no frames: `subjects[i] = (complete, provided part)`.
fn index(subjects: &[(bool, Option<Part>)]) -> DatasetIndex {
    let mut ids = BTreeMap::new();
    let mut info = BTreeMap::new();
    for (i, (complete, part)) in subjects.iter().enumerate() {
        let id = format!("{i:05}");
        ids.insert(id.clone(), Vec::new());
        info.insert(
            id,
            SubjectInfo {
                session_complete: *complete,
                provided_split: *part,
            },
        );
    }
    DatasetIndex {
        records: Vec::new(),
        subjects: ids,
        subject_info: info,
        source_root: ".".into(),
    }
}

fn all_parts_disjoint_and_complete(idx: &DatasetIndex, s: &gaze_core::dataio::SplitAssignment) -> bool {
    let union: BTreeSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
    let total = s.train.len() + s.val.len() + s.test.len();
    total == idx.subjects.len() && union.len() == total
}

#[test]
fn strict_moves_incomplete_subjects_out_of_evaluation() {
    use Part::*;
    let idx = index(&[
        (true, Some(Train)),
        (false, Some(Train)),
        (true, Some(Val)),
        (false, Some(Val)),
        (true, Some(Test)),
        (false, Some(Test)),
        (true, Some(Test)),
    ]);
    let s = split_strict(&idx, &idx.provided_labels()).unwrap();
    let ids = |v: &[usize]| v.iter().map(|i| format!("{i:05}")).collect::<BTreeSet<_>>();
    assert_eq!(s.train, ids(&[0, 1, 3, 5]));
    assert_eq!(s.val, ids(&[2]));
    assert_eq!(s.test, ids(&[4, 6]));
    for part in [Val, Test] {
        assert!(s.subjects(part).iter().all(|id| idx.subject_info[id].session_complete));
    }
    assert!(all_parts_disjoint_and_complete(&idx, &s));
}

#[test]
fn strict_requires_a_label_for_every_subject() {
    let idx = index(&[(true, Some(Part::Train)), (true, None)]);
    match split_strict(&idx, &idx.provided_labels()) {
        Err(GazeError::MissingSplitLabels(m)) => assert_eq!(m, vec!["00001".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn relaxed_on_ten_subjects_is_seven_two_one() {
    let idx = index(&vec![(true, None); 10]);
    for seed in 0..20 {
        assert_eq!(split_relaxed(&idx, RELAXED_RATIOS, seed).unwrap().counts(), (7, 2, 1));
    }
}

#[test]
fn relaxed_parts_are_disjoint_over_100_seeds() {
    let idx = index(&vec![(true, None); 37]);
    let mut distinct = BTreeSet::new();
    for seed in 0..100 {
        let s = split_relaxed(&idx, RELAXED_RATIOS, seed).unwrap();
        assert!(all_parts_disjoint_and_complete(&idx, &s), "seed {seed}");
        assert_eq!(s, split_relaxed(&idx, RELAXED_RATIOS, seed).unwrap());
        distinct.insert(s.test.clone());
    }
    assert!(distinct.len() > 50);
}

#[test]
fn bad_ratios_are_rejected() {
    let idx = index(&vec![(true, None); 4]);
    assert!(matches!(split_relaxed(&idx, [0.5, 0.2, 0.2], 0), Err(GazeError::BadRatios(_))));
    assert!(split_relaxed(&idx, [1.2, -0.1, -0.1], 0).is_err());
}

proptest! {
    #[test]
    fn relaxed_counts_follow_the_ratios(n in 1usize..200, seed in any::<u64>()) {
        let idx = index(&vec![(true, None); n]);
        let s = split_relaxed(&idx, RELAXED_RATIOS, seed).unwrap();
        prop_assert!(all_parts_disjoint_and_complete(&idx, &s));
        prop_assert_eq!(s.val.len(), (n as f64 * 0.2 + 1e-9).floor() as usize);
        prop_assert_eq!(s.test.len(), (n as f64 * 0.1 + 1e-9).floor() as usize);
    }

    #[test]
    fn batches_cover_every_index_once(n in 0usize..300, bs in 1usize..40, shuffle: bool, seed in any::<u64>()) {
        let b = batch_order(n, bs, shuffle, seed);
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(b.iter().all(|x| x.len() <= bs));
    }
}
