use std::collections::{HashMap, HashSet};

use headsearch::tasks::{generate, make_small, Split, TaskDataset, TaskKind, SMALL_TRAIN};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CLS: u32 = 0;
const PAD: u32 = 1;

fn content(ids: &[u32]) -> Vec<u32> {
    assert_eq!(ids[0], CLS);
    ids[1..].iter().copied().take_while(|&t| t != PAD).collect()
}

/// Written from the task definitions alone, without the library labeler.
fn oracle_label(kind: TaskKind, seq: &[u32], m: &[u32]) -> usize {
    let count = |t: u32| seq.iter().filter(|&&x| x == t).count();
    let first = |t: u32| seq.iter().position(|&x| x == t).unwrap_or(usize::MAX);
    let yes = match kind {
        TaskKind::Keyword => seq.contains(&m[0]),
        TaskKind::Majority => count(m[0]) > count(m[1]),
        TaskKind::Order => first(m[0]) < first(m[1]),
        TaskKind::Trigram => (0..seq.len().saturating_sub(2)).any(|i| seq[i] == m[0] && seq[i + 1] == m[1] && seq[i + 2] == m[2]),
        TaskKind::Parity => count(m[0]) % 2 == 1,
    };
    yes as usize
}

fn splits(t: &TaskDataset) -> [(&'static str, &Split); 3] {
    [("train", &t.train), ("val", &t.val), ("test", &t.test)]
}

#[test]
fn labels_match_independent_oracle() {
    for kind in TaskKind::ALL {
        let t = generate(kind, 3);
        for (name, s) in splits(&t) {
            for (ids, &y) in s.ids.iter().zip(&s.labels) {
                assert_eq!(oracle_label(kind, &content(ids), &t.markers), y, "{kind} {name} {ids:?}");
            }
        }
    }
}

#[test]
fn splits_are_disjoint_and_balanced() {
    for kind in TaskKind::ALL {
        let t = generate(kind, 4);
        let mut seen = HashSet::new();
        for (name, s) in splits(&t) {
            for ids in &s.ids {
                assert!(seen.insert(ids.clone()), "{kind}: duplicate sequence in {name}");
            }
            let ones = s.labels.iter().filter(|&&y| y == 1).count() as f64 / s.len() as f64;
            assert!((ones - 0.5).abs() <= 0.05, "{kind} {name}: {ones}");
        }
    }
}

#[test]
fn order_has_no_positional_shortcut() {
    // The best probe on a one-hot of a single position predicts the
    // majority training label of each token seen there.
    let t = generate(TaskKind::Order, 0);
    for pos in [1, 2, 30] {
        let mut votes: HashMap<u32, [usize; 2]> = HashMap::new();
        for (ids, &y) in t.train.ids.iter().zip(&t.train.labels) {
            votes.entry(ids[pos]).or_default()[y] += 1;
        }
        let correct = t
            .test
            .ids
            .iter()
            .zip(&t.test.labels)
            .filter(|(ids, &y)| {
                let v = votes.get(&ids[pos]).copied().unwrap_or([1, 0]);
                ((v[1] > v[0]) as usize) == y
            })
            .count();
        let acc = correct as f64 / t.test.len() as f64;
        assert!(acc < 0.6, "position {pos}: probe accuracy {acc}");
    }
}

#[test]
fn generation_is_byte_stable() {
    for kind in TaskKind::ALL {
        let a = serde_json::to_vec(&generate(kind, 9)).unwrap();
        let b = serde_json::to_vec(&generate(kind, 9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, serde_json::to_vec(&generate(kind, 10)).unwrap());
    }
}

#[test]
fn small_variant_contract() {
    let t = generate(TaskKind::Majority, 1);
    let s = make_small(&t, SMALL_TRAIN, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(s.train.len(), SMALL_TRAIN);
    assert_eq!(s.val, t.val);
    assert_eq!(s.test, t.test);
    let again = make_small(&t, SMALL_TRAIN, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(again, s);

    let all = make_small(&t, t.train.len(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut a: Vec<_> = all.train.ids.iter().zip(&all.train.labels).collect();
    let mut b: Vec<_> = t.train.ids.iter().zip(&t.train.labels).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
    assert!(make_small(&t, t.train.len() + 1, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
}
