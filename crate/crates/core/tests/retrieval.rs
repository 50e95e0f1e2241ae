use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trialign_core::linalg::normalized;
use trialign_core::retrieval::{build_index, renorm_for_conditioning, Hit, RetrievalIndex};

/// Rows on a coarse grid so exact cosine ties occur.
fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> RetrievalIndex {
    let entries = (0..n)
        .map(|i| {
            let v: Vec<f64> = loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-2i32..=2) as f64).collect();
                if v.iter().any(|&x| x != 0.0) {
                    break v;
                }
            };
            (format!("r{i:05}"), v)
        })
        .collect();
    build_index(entries, BTreeMap::new()).unwrap()
}

fn oracle(index: &RetrievalIndex, score: impl Fn(&[f64]) -> f64, k: usize) -> Vec<Hit> {
    let mut all: Vec<(usize, f64)> = (0..index.len()).map(|i| (i, score(index.row(i)))).collect();
    // Stable sort keeps insertion order among equal scores.
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    all.into_iter()
        .take(k)
        .map(|(i, score)| Hit {
            id: index.ids()[i].clone(),
            score,
        })
        .collect()
}

fn cos(a: &[f64], q: &[f64]) -> f64 {
    a.iter().zip(q).map(|(x, y)| x * y).sum()
}

#[test]
fn ten_thousand_rows_match_oracles_with_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let index = random_index(&mut rng, 10_000, 4);
    for _ in 0..5 {
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-2i32..=2) as f64 + 0.5).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-2i32..=2) as f64 - 0.5).collect();
        let (ua, _) = normalized(&a, "a").unwrap();
        let (ub, _) = normalized(&b, "b").unwrap();
        for k in [1, 10, 250] {
            assert_eq!(index.query(&a, k).unwrap(), oracle(&index, |r| cos(r, &ua), k));
            assert_eq!(
                index.query_joint(&a, &b, k).unwrap(),
                oracle(&index, |r| cos(r, &ua).min(cos(r, &ub)), k)
            );
        }
    }
}

#[test]
fn joint_top_score_bounded_by_single_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let index = random_index(&mut rng, 300, 6);
    for _ in 0..20 {
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let joint = index.query_joint(&a, &b, 1).unwrap()[0].score;
        assert!(joint <= index.query(&a, 1).unwrap()[0].score + 1e-15);
        assert!(joint <= index.query(&b, 1).unwrap()[0].score + 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn queries_match_oracle(seed in any::<u64>(), n in 1usize..300, dim in 1usize..6, k in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let index = random_index(&mut rng, n, dim);
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (ua, _) = normalized(&a, "a").unwrap();
        let (ub, _) = normalized(&b, "b").unwrap();
        prop_assert_eq!(index.query(&a, k).unwrap(), oracle(&index, |r| cos(r, &ua), k));
        prop_assert_eq!(
            index.query_joint(&a, &b, k).unwrap(),
            oracle(&index, |r| cos(r, &ua).min(cos(r, &ub)), k)
        );
    }

    #[test]
    fn persistence_is_byte_exact(seed in any::<u64>(), n in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let index = random_index(&mut rng, n, 3);
        let bytes = index.to_bytes();
        let back = RetrievalIndex::from_bytes(&bytes, std::path::Path::new("p")).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, index);
    }

    #[test]
    fn renorm_hits_target(v in proptest::collection::vec(-100.0f64..100.0, 1..32), t in 0.01f64..1e3) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let out = renorm_for_conditioning(&v, t).unwrap();
        let n: f64 = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - t).abs() <= 1e-9 * t.max(1.0));
    }
}
