use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gridmarkov::attack::enumerate_connected_subsets;
use gridmarkov::case_io::{from_canonical_json, to_canonical_json, Branch, Bus, GridCase};
use gridmarkov::cct::{edit_distance, run_cct, witness_matrix, CctConfig, Statistic};
use gridmarkov::detect::{anomaly_scores, detect, localize, run_decentralized};
use gridmarkov::gmrf::{sample_gmrf, Channel, ModelKind, PrecisionModel, SampleMatrix};
use gridmarkov::grid_model::{build_susceptance_matrix, hop_distances, partition_areas, solve_angles, topology_edges};
use gridmarkov::stream_cov::{batch_covariance, CovAccumulator};
use gridmarkov::EdgeSet;

/// Raw branch list of a connected graph on `n` buses: a random spanning tree
/// plus extra edges, parallels allowed.
fn raw_branches(n: usize, max_extra: usize) -> impl Strategy<Value = (u32, Vec<Branch>, u32)> {
    let tree = proptest::collection::vec((any::<prop::sample::Index>(), 0.5f64..20.0), n - 1);
    let extra = proptest::collection::vec((1..=n as u32, 1..=n as u32, 0.5f64..20.0), 0..=max_extra);
    (tree, extra, 1..=n as u32).prop_map(move |(tree, extra, slack)| {
        let mut branches: Vec<Branch> = tree
            .into_iter()
            .enumerate()
            .map(|(k, (parent, b))| Branch { from: parent.index(k + 1) as u32 + 1, to: k as u32 + 2, b })
            .collect();
        branches.extend(extra.into_iter().filter(|(a, c, _)| a != c).map(|(from, to, b)| Branch { from, to, b }));
        (n as u32, branches, slack)
    })
}

fn arb_raw(max_n: usize) -> impl Strategy<Value = (u32, Vec<Branch>, u32)> {
    (3..=max_n).prop_flat_map(|n| raw_branches(n, n))
}

fn make_case(n: u32, branches: &[Branch], slack: u32) -> GridCase {
    GridCase::new(100.0, slack, (1..=n).map(|id| Bus { id, area: 1 }).collect(), branches.to_vec()).unwrap()
}

fn arb_case(max_n: usize) -> impl Strategy<Value = GridCase> {
    arb_raw(max_n).prop_map(|(n, br, s)| make_case(n, &br, s))
}

fn arb_pd(p: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-1.0f64..1.0, p * p).prop_map(move |v| {
        let a = DMatrix::from_vec(p, p, v);
        a.tr_mul(&a) + DMatrix::identity(p, p) * 0.2
    })
}

fn bfs_connected(members: &[usize], adj: &[Vec<usize>]) -> bool {
    let set: BTreeSet<usize> = members.iter().copied().collect();
    let mut seen = BTreeSet::from([members[0]]);
    let mut queue = VecDeque::from([members[0]]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if set.contains(&v) && seen.insert(v) {
                queue.push_back(v);
            }
        }
    }
    seen.len() == set.len()
}

fn chain_precision(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else if i.abs_diff(j) == 1 { -rho } else { 0.0 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonical_json_round_trip(case in arb_case(20)) {
        let text = to_canonical_json(&case);
        let back = from_canonical_json(&text).unwrap();
        prop_assert_eq!(&back, &case);
        prop_assert_eq!(to_canonical_json(&back), text);
    }

    #[test]
    fn parallel_branches_add_up((n, branches, slack) in arb_raw(15)) {
        let b = build_susceptance_matrix(&make_case(n, &branches, slack));
        let mut oracle = DMatrix::<f64>::zeros(n as usize, n as usize);
        for br in &branches {
            let (u, v) = (br.from as usize - 1, br.to as usize - 1);
            oracle[(u, v)] -= br.b;
            oracle[(v, u)] -= br.b;
            oracle[(u, u)] += br.b;
            oracle[(v, v)] += br.b;
        }
        prop_assert!((b.full() - oracle).amax() < 1e-9);
    }

    #[test]
    fn susceptance_rows_sum_to_zero_and_follow_topology(case in arb_case(25)) {
        let b = build_susceptance_matrix(&case);
        let full = b.full();
        let ids = case.bus_ids();
        for i in 0..full.nrows() {
            prop_assert!(full.row(i).sum().abs() < 1e-9);
            for j in 0..full.ncols() {
                if i != j {
                    prop_assert_eq!(full[(i, j)] != 0.0, case.are_adjacent(ids[i], ids[j]));
                }
            }
        }
    }

    #[test]
    fn solved_angles_reproduce_injections(case in arb_case(25), seed in any::<u64>()) {
        let b = build_susceptance_matrix(&case);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DVector::from_fn(case.num_buses(), |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let total = p.sum();
        p[case.slack_index()] -= total;
        let theta = solve_angles(&b, &p).unwrap();
        prop_assert_eq!(theta[case.slack_index()], 0.0);
        prop_assert!((b.full() * &theta - &p).amax() < 1e-8);
    }

    #[test]
    fn hop_distances_form_a_metric(case in arb_case(20)) {
        let d = hop_distances(&case);
        let ids = case.bus_ids();
        let n = ids.len();
        for i in 0..n {
            prop_assert_eq!(d[(i, i)], 0);
            for j in 0..n {
                prop_assert_eq!(d[(i, j)], d[(j, i)]);
                prop_assert_eq!(d[(i, j)] == 1, case.are_adjacent(ids[i], ids[j]));
                for k in 0..n {
                    prop_assert!(d[(i, k)] <= d[(i, j)] + d[(j, k)]);
                }
            }
        }
    }

    #[test]
    fn streaming_matches_batch(rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 4), 2..60)) {
        let data = DMatrix::from_fn(rows.len(), 4, |r, c| rows[r][c]);
        let acc = CovAccumulator::from_rows(vec![1, 2, 3, 4], &data).unwrap();
        let batch = batch_covariance(&data).unwrap();
        let scale = batch.amax().max(1.0);
        prop_assert!((acc.covariance().unwrap() - batch).amax() <= 1e-9 * scale);
    }

    #[test]
    fn edit_distance_is_a_metric(
        a in proptest::collection::btree_set((1u32..8, 1u32..8), 0..12),
        b in proptest::collection::btree_set((1u32..8, 1u32..8), 0..12),
        c in proptest::collection::btree_set((1u32..8, 1u32..8), 0..12),
    ) {
        let mk = |s: BTreeSet<(u32, u32)>| -> EdgeSet { s.into_iter().filter(|(x, y)| x != y).collect() };
        let (a, b, c) = (mk(a), mk(b), mk(c));
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert_eq!(edit_distance(&a, &b) == 0, a == b);
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
    }

    #[test]
    fn anomaly_scores_are_symmetric_and_nonnegative(a in arb_pd(5), b in arb_pd(5)) {
        let ids = [1, 2, 3, 4, 5];
        let (sa, sb) = (a.clone().try_inverse().unwrap(), b.clone().try_inverse().unwrap());
        let ab = anomaly_scores(&ids, &a, &sa, &b, &sb, 0.3).unwrap();
        let ba = anomaly_scores(&ids, &b, &sb, &a, &sa, 0.3).unwrap();
        for (x, y) in ab.scores.iter().zip(&ba.scores) {
            prop_assert!(*x >= -1e-12);
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
        let same = anomaly_scores(&ids, &a, &sa, &a, &sa, 0.3).unwrap();
        prop_assert!(same.scores.iter().all(|s| s.abs() < 1e-9));
    }

    #[test]
    fn localization_shrinks_as_threshold_grows(a in arb_pd(6), b in arb_pd(6), t1 in 0.0f64..2.0, dt in 0.0f64..2.0) {
        let ids = [1, 2, 3, 4, 5, 6];
        let (sa, sb) = (a.clone().try_inverse().unwrap(), b.clone().try_inverse().unwrap());
        let r = anomaly_scores(&ids, &a, &sa, &b, &sb, t1).unwrap();
        let low: BTreeSet<_> = localize(&r, t1).into_iter().collect();
        let high: BTreeSet<_> = localize(&r, t1 + dt).into_iter().collect();
        prop_assert!(high.is_subset(&low));
        prop_assert_eq!(localize(&r, t1), r.flagged.clone());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn correlation_graph_is_scale_invariant(sigma in arb_pd(7), c in 0.01f64..100.0, xi in 0.01f64..0.5) {
        let ids: Vec<u32> = (1..=7).collect();
        let corr = CctConfig::new(xi, 2, Statistic::Correlation).unwrap();
        let g1 = run_cct(&sigma, &ids, &corr).unwrap();
        let g2 = run_cct(&(&sigma * c), &ids, &corr).unwrap();
        prop_assert_eq!(&g1.edges, &g2.edges);
        let cov1 = run_cct(&sigma, &ids, &CctConfig::new(xi, 2, Statistic::Covariance).unwrap()).unwrap();
        let cov2 = run_cct(&(&sigma * c), &ids, &CctConfig::new(xi * c, 2, Statistic::Covariance).unwrap()).unwrap();
        let w1 = witness_matrix(&sigma, 2, Statistic::Covariance, None).unwrap() * c;
        let w2 = witness_matrix(&(&sigma * c), 2, Statistic::Covariance, None).unwrap();
        // Pairs sitting on the threshold may round either way.
        let ambiguous = w1.iter().any(|w| (w - xi * c).abs() < 1e-9 * xi * c);
        prop_assert!((w1 - w2).amax() <= 1e-9 * c * sigma.amax());
        if !ambiguous {
            prop_assert_eq!(cov1.edges, cov2.edges);
        }
    }

    #[test]
    fn graph_is_permutation_invariant(sigma in arb_pd(7), perm in Just((0..7usize).collect::<Vec<_>>()).prop_shuffle(), xi in 0.01f64..0.5) {
        let ids: Vec<u32> = (1..=7).collect();
        let cfg = CctConfig::new(xi, 2, Statistic::Correlation).unwrap();
        let g = run_cct(&sigma, &ids, &cfg).unwrap();
        let permuted = DMatrix::from_fn(7, 7, |a, b| sigma[(perm[a], perm[b])]);
        let pids: Vec<u32> = perm.iter().map(|&k| ids[k]).collect();
        let gp = run_cct(&permuted, &pids, &cfg).unwrap();
        prop_assert_eq!(g.edges, gp.edges);
    }

    #[test]
    fn cct_is_monotone_in_threshold_and_order(sigma in arb_pd(7), xi in 0.01f64..0.5, dxi in 0.0f64..0.5) {
        let ids: Vec<u32> = (1..=7).collect();
        let g = |xi: f64, eta: usize| run_cct(&sigma, &ids, &CctConfig::new(xi, eta, Statistic::Correlation).unwrap()).unwrap().edges;
        prop_assert!(g(xi + dxi, 2).is_subset(&g(xi, 2)));
        prop_assert!(g(xi, 2).is_subset(&g(xi, 1)));
        prop_assert!(g(xi, 1).is_subset(&g(xi, 0)));
        let w1 = witness_matrix(&sigma, 1, Statistic::Correlation, None).unwrap();
        let w2 = witness_matrix(&sigma, 2, Statistic::Correlation, None).unwrap();
        prop_assert!(w2.iter().zip(w1.iter()).all(|(a, b)| a <= b));
    }

    #[test]
    fn connected_subsets_match_brute_force(case in arb_case(10), kmin in 2usize..4, span in 0usize..4) {
        let kmax = kmin + span;
        let got: BTreeSet<Vec<u32>> = enumerate_connected_subsets(&case, kmin, kmax).unwrap().into_iter().collect();
        let ids = case.bus_ids();
        let adj = case.adjacency();
        let slack = case.slack_index();
        let mut want = BTreeSet::new();
        for mask in 1u32..(1 << ids.len()) {
            let members: Vec<usize> = (0..ids.len()).filter(|&v| mask >> v & 1 == 1).collect();
            if members.contains(&slack) || members.len() < kmin || members.len() > kmax {
                continue;
            }
            if bfs_connected(&members, &adj) {
                want.insert(members.iter().map(|&v| ids[v]).collect::<Vec<_>>());
            }
        }
        prop_assert_eq!(got, want);
    }

    #[test]
    fn sample_csv_round_trips(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 2..20), seed in any::<u64>()) {
        let data = DMatrix::from_fn(rows.len(), 3, |r, c| rows[r][c]);
        let mut m = SampleMatrix::new(vec![2, 5, 9], data).unwrap().with_seed(seed);
        m.set_corrupted(rows.len() - 1, true);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = SampleMatrix::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sample_covariance_converges_to_model(case in arb_case(12), seed in any::<u64>()) {
        let b = build_susceptance_matrix(&case);
        let model = PrecisionModel::new(&b, 0.5, ModelKind::FirstNeighbor, Channel::Angle).unwrap();
        let s = sample_gmrf(&model, &b, 40_000, seed, 0.0).unwrap();
        let emp = batch_covariance(s.data()).unwrap();
        let truth = model.covariance();
        // Entrywise standard error of a sample covariance is at most
        // sqrt(2 / n) * max variance, so 8 SE is a comfortable bound.
        let max_var = truth.diagonal().max();
        prop_assert!((emp - truth).amax() <= 8.0 * (2.0f64 / 40_000.0).sqrt() * max_var);
    }
}

#[test]
fn single_area_matches_global_detection() {
    let case = gridmarkov::case_io::ieee14();
    let b = build_susceptance_matrix(&case);
    let model = PrecisionModel::new(&b, 0.03, ModelKind::FirstNeighbor, Channel::Angle).unwrap();
    let s = sample_gmrf(&model, &b, 500, 3, 0.0).unwrap();
    let acc = CovAccumulator::from_rows(b.var_ids(), s.data()).unwrap();
    let cfg = CctConfig::new(0.09, 2, Statistic::Correlation).unwrap();
    let reference = topology_edges(&case);
    let global = detect(&acc, &reference, &cfg, 4).unwrap();
    let areas = partition_areas(&case);
    assert_eq!(areas.len(), 1);
    let local = run_decentralized(&areas, case.slack(), &[acc], &[cfg], &[4]).unwrap();
    assert_eq!(local[0].area_id, Some(areas[0].area_id));
    assert_eq!(local[0].learned, global.learned);
    assert_eq!(local[0].edit_distance, global.edit_distance);
    assert_eq!(local[0].alarm, global.alarm);
}

#[test]
fn attack_inside_one_area_alarms_only_that_area() {
    let base = gridmarkov::case_io::ieee14();
    // West: buses 1-5; east: the rest. Buses 12 and 13 sit deep inside the east.
    let areas_map: BTreeMap<u32, u32> = (1..=14).map(|id| (id, if id <= 5 { 1 } else { 2 })).collect();
    let case = base.with_areas(&areas_map);
    let b = build_susceptance_matrix(&case);
    let model = PrecisionModel::new(&b, 0.03, ModelKind::FirstNeighbor, Channel::Angle).unwrap();
    let areas = partition_areas(&case);
    assert_eq!(areas.len(), 2);
    let slack = case.slack();
    let var_ids = b.var_ids();
    let project = |data: &DMatrix<f64>, vars: &[u32]| {
        let cols: Vec<usize> = vars.iter().map(|id| var_ids.iter().position(|v| v == id).unwrap()).collect();
        CovAccumulator::from_rows(vars.to_vec(), &data.select_columns(&cols)).unwrap()
    };
    let accs = |data: &DMatrix<f64>| -> Vec<CovAccumulator> {
        areas.iter().map(|a| project(data, &a.variables(slack))).collect()
    };

    // Per-area threshold and tolerance from clean windows.
    let cfg = CctConfig::new(0.09, 2, Statistic::Correlation).unwrap();
    let mut worst = vec![0usize; areas.len()];
    for seed in 0..20 {
        let clean = sample_gmrf(&model, &b, 500, 100 + seed, 0.0).unwrap();
        let reports = run_decentralized(&areas, slack, &accs(clean.data()), &[cfg], &[usize::MAX]).unwrap();
        for (w, r) in worst.iter_mut().zip(&reports) {
            *w = (*w).max(r.edit_distance);
        }
    }

    let clean = sample_gmrf(&model, &b, 500, 7, 0.0).unwrap();
    let spec = gridmarkov::attack::build_attack(&b, &[12, 13], 2.1, Default::default(), 500, 7).unwrap();
    let attacked = gridmarkov::attack::corrupt_samples(&clean, &spec).unwrap();
    let before = run_decentralized(&areas, slack, &accs(clean.data()), &[cfg], &worst).unwrap();
    let after = run_decentralized(&areas, slack, &accs(attacked.data()), &[cfg], &worst).unwrap();
    let west = areas.iter().position(|a| a.area_id == 1).unwrap();
    let east = 1 - west;
    assert!(!areas[west].augmented.contains(&12) && !areas[west].augmented.contains(&13));
    assert_eq!(after[west], before[west]);
    assert!(!after[west].alarm);
    assert!(after[east].alarm, "east distance {} vs tolerance {}", after[east].edit_distance, worst[east]);
}

#[test]
fn chain_precision_graph_is_recovered() {
    let j = chain_precision(6, 0.4);
    let sigma = j.try_inverse().unwrap();
    let ids: Vec<u32> = (1..=6).collect();
    let g = run_cct(&sigma, &ids, &CctConfig::new(0.05, 2, Statistic::Correlation).unwrap()).unwrap();
    let want: EdgeSet = (1..6).map(|k| (k, k + 1)).collect();
    assert_eq!(g.edges, want);
}
