use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use dtvit_core::datapipe::{balance, eval_transform, split, AugmentConfig, IndexRecord, Split};
use dtvit_core::{ImageTensor, Location, Presence, SplitMix64};

fn records(counts: [usize; 4], patients: usize) -> Vec<IndexRecord> {
    let mut out = Vec::new();
    let mut k = 0;
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let location = Location::from_index(c.wrapping_sub(1));
            out.push(IndexRecord {
                id: format!("r{c}_{i}"),
                path: format!("r{c}_{i}.pgm"),
                presence: if c == 0 { Presence::Normal } else { Presence::Ich },
                location,
                patient: format!("p{}", k % patients.max(1)),
                split: None,
            });
            k += 1;
        }
    }
    out
}

fn class_counts(rs: &[IndexRecord]) -> [usize; 4] {
    let mut c = [0; 4];
    for r in rs {
        c[r.location.map_or(0, |l| l.index() + 1)] += 1;
    }
    c
}

#[test]
fn balancing_the_reference_cohort() {
    let rs = records([4407, 6093, 1656, 495], 1);
    let b = balance(&rs).unwrap();
    let c = class_counts(&b);
    assert_eq!(c, [18_279, 6093, 6093, 6093]);
    assert_eq!(c[0], c[1] + c[2] + c[3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn balance_equalizes_by_replication_only(counts in prop::array::uniform4(1usize..60)) {
        let rs = records(counts, 1);
        let b = balance(&rs).unwrap();
        let c = class_counts(&b);
        prop_assert_eq!(c[1], c[2]);
        prop_assert_eq!(c[2], c[3]);
        prop_assert_eq!(c[0], c[1] + c[2] + c[3]);
        prop_assert_eq!(&b[..rs.len()], &rs[..]);
        let before: BTreeSet<&str> = rs.iter().map(|r| r.id.as_str()).collect();
        let after: BTreeSet<&str> = b.iter().map(|r| r.id.as_str()).collect();
        prop_assert_eq!(before, after);
        // Copies of one image differ by at most one across its class.
        let mut per_id: BTreeMap<(usize, &str), usize> = BTreeMap::new();
        for r in &b {
            *per_id.entry((r.location.map_or(0, |l| l.index() + 1), r.id.as_str())).or_default() += 1;
        }
        for class in 0..4 {
            let n: Vec<usize> = per_id.iter().filter(|((k, _), _)| *k == class).map(|(_, &v)| v).collect();
            prop_assert!(n.iter().max().unwrap() - n.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn eval_transform_is_deterministic(seed in any::<u64>(), side in 32usize..48) {
        let mut rng = SplitMix64::new(seed);
        let px: Vec<u8> = (0..side * side).map(|_| rng.below(256) as u8).collect();
        let img = ImageTensor::from_gray8(side, side, &px).unwrap();
        let cfg = AugmentConfig { crop_size: 32, ..AugmentConfig::default() };
        let a = eval_transform(&img, &cfg).unwrap();
        let b = eval_transform(&img, &cfg).unwrap();
        prop_assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn no_patient_crosses_splits() {
    let rs = records([40, 30, 20, 10], 23);
    for seed in 0..100 {
        let idx = split(&rs, [0.7, 0.15, 0.15], seed).unwrap();
        let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &idx.records {
            let s = r.split.unwrap();
            assert_eq!(*owner.entry(r.patient.as_str()).or_insert(s), s, "seed {seed}");
        }
        assert_eq!(idx.records.len(), rs.len());
        for s in [Split::Train, Split::Val, Split::Test] {
            assert!(!idx.in_split(s).is_empty());
        }
        assert_eq!(split(&rs, [0.7, 0.15, 0.15], seed).unwrap(), idx);
    }
}
