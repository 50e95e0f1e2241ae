use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trialign_core::linalg::Matrix;
use trialign_core::mining::{
    build_neighbor_table, build_seeded_batches, false_negative_mask, BatchPlan, MiningConfig, NeighborTable,
};

fn random_unit(rng: &mut impl Rng, n: usize, d: usize, quantize: bool) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            // Quantized coordinates produce many exact similarity ties.
            let v: Vec<f64> = (0..d)
                .map(|_| {
                    if quantize {
                        rng.random_range(-2i32..=2) as f64
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                let mut e = vec![0.0; d];
                e[0] = 1.0;
                e
            } else {
                v.into_iter().map(|x| x / norm).collect()
            }
        })
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

fn shuffled_ids(rng: &mut impl Rng, n: usize) -> Vec<String> {
    let mut ids: Vec<String> = (0..n).map(|i| format!("shape-{i:04}")).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), rng);
    ids
}

/// O(n²) reference: full sort of every other row by (similarity desc, id asc).
fn brute_force(ids: &[String], m: &Matrix, k: usize) -> Vec<Vec<(usize, f64)>> {
    let n = ids.len();
    (0..n)
        .map(|q| {
            let mut all: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != q)
                .map(|j| {
                    let s: f64 = m.row(q).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                    (j, s)
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(ids[a.0].cmp(&ids[b.0])));
            all.truncate(k.min(n - 1));
            all
        })
        .collect()
}

fn as_pairs(t: &NeighborTable, q: usize) -> Vec<(usize, f64)> {
    t.neighbors(q).iter().map(|nb| (nb.index, nb.similarity)).collect()
}

#[test]
fn two_hundred_vectors_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let ids = shuffled_ids(&mut rng, 200);
    let m = random_unit(&mut rng, 200, 16, false);
    let t = build_neighbor_table(&ids, &m, 8).unwrap();
    let oracle = brute_force(&ids, &m, 8);
    for q in 0..200 {
        assert_eq!(as_pairs(&t, q), oracle[q]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn table_equals_oracle_with_ties(seed in any::<u64>(), n in 2usize..=512, k in 1usize..=12, quantize: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = shuffled_ids(&mut rng, n);
        let m = random_unit(&mut rng, n, 3, quantize);
        let t = build_neighbor_table(&ids, &m, k).unwrap();
        let oracle = brute_force(&ids, &m, k);
        for q in 0..n {
            prop_assert_eq!(as_pairs(&t, q), oracle[q].clone());
        }
    }

    #[test]
    fn seeded_batches_are_well_formed(seed in any::<u64>(), s in 1usize..6, m in 1usize..6, extra in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = s * m + extra;
        prop_assume!(n >= 2);
        let ids = shuffled_ids(&mut rng, n);
        let emb = random_unit(&mut rng, n, 4, false);
        let t = build_neighbor_table(&ids, &emb, m.max(2)).unwrap();
        let cfg = MiningConfig { seeds: s, neighbors_per_seed: m, knn_depth: m.max(2), delta: 0.1 };
        for plan in build_seeded_batches(&t, &cfg, &mut rng, 3 * s * m).unwrap() {
            prop_assert_eq!(plan.len(), s * m);
            let distinct: HashSet<_> = plan.indices.iter().collect();
            prop_assert_eq!(distinct.len(), s * m);
            for g in 0..s {
                prop_assert_eq!(plan.seed_of.iter().filter(|&&x| x == g).count(), m);
            }
            check_replay(&t, &plan, m);
        }
    }
}

/// Replays availability group by group: after its seed, every group must be
/// the first free entries of the seed's neighbor list; only once that list is
/// exhausted may other shapes appear.
fn check_replay(t: &NeighborTable, plan: &BatchPlan, m: usize) {
    let mut taken = HashSet::new();
    let mut pos = 0;
    while pos < plan.len() {
        let group = &plan.indices[pos..pos + m];
        let seed = group[0];
        assert!(!taken.contains(&seed), "seed already taken");
        taken.insert(seed);
        let free: Vec<usize> = t
            .neighbors(seed)
            .iter()
            .map(|nb| nb.index)
            .filter(|i| !taken.contains(i))
            .take(m - 1)
            .collect();
        assert_eq!(&group[1..1 + free.len()], free.as_slice());
        for &i in &group[1..] {
            assert!(taken.insert(i), "member reused within batch");
        }
        pos += m;
    }
}

#[test]
fn overlapping_seed_neighborhoods_stay_disjoint() {
    // Ten shapes on a circle; shapes 0..5 are packed tightly so the top
    // neighbors of any two seeds among them overlap.
    let degs = [0.0, 1.0, 2.0, 3.0, 4.0, 90.0, 150.0, 200.0, 250.0, 300.0f64];
    let rows: Vec<Vec<f64>> = degs
        .iter()
        .map(|d| vec![d.to_radians().cos(), d.to_radians().sin()])
        .collect();
    let m = Matrix::from_rows(&rows).unwrap();
    let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
    let t = build_neighbor_table(&ids, &m, 4).unwrap();
    let cfg = MiningConfig {
        seeds: 2,
        neighbors_per_seed: 3,
        knn_depth: 4,
        delta: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut saw_overlap = false;
    for plan in build_seeded_batches(&t, &cfg, &mut rng, 600).unwrap() {
        check_replay(&t, &plan, 3);
        let (a, b) = (plan.indices[0], plan.indices[3]);
        let top = |s: usize| -> HashSet<usize> { t.neighbors(s).iter().take(2).map(|nb| nb.index).collect() };
        if top(a).intersection(&top(b)).next().is_some() || top(a).contains(&b) {
            saw_overlap = true;
        }
    }
    assert!(saw_overlap, "fixture should exercise collisions");
}

#[test]
fn mask_matches_direct_inequality_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let n = 12;
        let ht = random_unit(&mut rng, n, 3, false);
        let hi = random_unit(&mut rng, n, 3, false);
        let plan = BatchPlan {
            indices: (0..n).collect(),
            seed_of: (0..n).map(|i| i / 4).collect(),
        };
        let delta = 0.1;
        let mask = false_negative_mask(&plan, &ht, &hi, delta).unwrap();
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for i in 0..n {
            for j in 0..n {
                let expected = i != j && i / 4 == j / 4 && d(ht.row(j), hi.row(i)) + delta > d(ht.row(i), hi.row(i));
                assert_eq!(mask.is_excluded(i, j), expected, "({i},{j})");
            }
        }
    }
}

#[test]
fn seeded_batches_enrich_same_cluster_pairs() {
    // c tight clusters on the sphere; count same-cluster pairs per batch.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (c, per, d) = (20, 15, 8);
    let centers = random_unit(&mut rng, c, d, false);
    let mut rows = Vec::new();
    let mut cluster = Vec::new();
    for k in 0..c {
        for _ in 0..per {
            let v: Vec<f64> = centers
                .row(k)
                .iter()
                .map(|x| x + rng.random_range(-0.05..0.05))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            rows.push(v.into_iter().map(|x| x / norm).collect::<Vec<_>>());
            cluster.push(k);
        }
    }
    let n = c * per;
    let ids: Vec<String> = (0..n).map(|i| format!("{i:04}")).collect();
    let t = build_neighbor_table(&ids, &Matrix::from_rows(&rows).unwrap(), 8).unwrap();
    let cfg = MiningConfig {
        seeds: 4,
        neighbors_per_seed: 5,
        knn_depth: 8,
        delta: 0.1,
    };
    let pairs = |idx: &[usize]| -> f64 {
        let mut p = 0;
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                if cluster[idx[a]] == cluster[idx[b]] {
                    p += 1;
                }
            }
        }
        p as f64
    };
    let trials = 400;
    let mined: Vec<f64> = build_seeded_batches(&t, &cfg, &mut rng, trials * 20)
        .unwrap()
        .iter()
        .map(|p| pairs(&p.indices))
        .collect();
    let random: Vec<f64> = (0..trials)
        .map(|_| pairs(&rand::seq::index::sample(&mut rng, n, 20).into_vec()))
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let se = (var(&mined) / trials as f64 + var(&random) / trials as f64).sqrt();
    assert!(
        mean(&mined) - mean(&random) > 4.0 * se,
        "mined {} random {}",
        mean(&mined),
        mean(&random)
    );
}
