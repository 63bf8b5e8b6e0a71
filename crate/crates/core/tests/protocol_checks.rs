use std::collections::HashMap;

use pipret::capacity::{inverse_rate_converse, BoundQuery};
use pipret::field::{compute_table, random_database, Database, Modulus, PairSet};
use pipret::protocol::{
    audit_privacy, binomial, measure_rate, run_many, run_pair_retrieval, run_retrieval, stream_rng, AuditFeature,
    AuditMode, FullDownload, PlaintextRequest, RepeatedPir, RetrievalScheme, VirtualFileSpace, VirtualFiles,
};

fn instances(q: u64, k: usize, nu: usize, seed: u64) -> Vec<Database> {
    (0..nu)
        .map(|s| random_database(q, k, 3, seed * 1000 + s as u64).unwrap())
        .collect()
}

#[test]
fn repeated_pir_decodes_over_seeds() {
    // K = 2 gives T = 3 virtual files; N^T = 8 instances
    for (q, ranks) in [(5u64, vec![1usize]), (2, vec![0, 2]), (3, vec![0, 1, 2])] {
        for seed in 0..100 {
            let dbs = instances(q, 2, 8, seed);
            let pairs = PairSet::from_ranks(2, ranks.iter().copied()).unwrap();
            let t = run_pair_retrieval(&RepeatedPir::new(), &dbs, 2, &pairs, seed).unwrap();
            for (s, db) in dbs.iter().enumerate() {
                let truth = compute_table(db);
                for (r, &rank) in ranks.iter().enumerate() {
                    assert_eq!(t.decoded[r][s], truth.values()[rank]);
                }
            }
        }
    }
}

#[test]
fn full_download_decodes_over_seeds() {
    for seed in 0..100 {
        let dbs = instances(7, 3, 2, seed);
        let pairs = PairSet::from_ranks(3, [0, 4, 5]).unwrap();
        let t = run_pair_retrieval(&FullDownload, &dbs, 3, &pairs, seed).unwrap();
        assert_eq!(t.downloaded, 6 * 2);
    }
}

#[test]
fn decoupled_sizes_decode() {
    for (t, n) in [(1usize, 2usize), (2, 3), (4, 2), (3, 3), (5, 2)] {
        let nu = RepeatedPir::subpacketization(t, n).unwrap();
        let space = VirtualFileSpace::new(t, Modulus::new(101).unwrap(), nu).unwrap();
        let files = VirtualFiles::random(space, t as u64);
        for p in 1..=t {
            let request: Vec<usize> = (0..p).collect();
            let runs = run_many(&RepeatedPir::new(), &files, n, &request, 5, 100).unwrap();
            let expected = RepeatedPir::per_server_download(t, n);
            for run in &runs {
                assert!(run.per_server_download().iter().all(|&d| d == expected * p));
            }
        }
    }
}

/// Every undesired sum is subtracted exactly once by each other server.
#[test]
fn side_information_balances() {
    for (t, n) in [(2usize, 2usize), (3, 2), (3, 3), (4, 2), (4, 3)] {
        let nu = RepeatedPir::subpacketization(t, n).unwrap();
        let space = VirtualFileSpace::new(t, Modulus::new(7).unwrap(), nu).unwrap();
        for desired in 0..t {
            let mut rng = stream_rng(1, desired as u64);
            let plan = RepeatedPir::new().plan(&space, n, &[desired], &mut rng).unwrap();
            let mut uses: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
            for recipe in &plan.recipes[0] {
                if let [(user, _, true), (source, idx, false)] = recipe.terms[..] {
                    uses.entry((source, idx)).or_default().push(user);
                }
            }
            for (server, query) in plan.queries.iter().enumerate() {
                for (idx, sum) in query.sums.iter().enumerate() {
                    let has_desired = sum.files().any(|f| f == desired);
                    let users = uses.get(&(server, idx)).cloned().unwrap_or_default();
                    if has_desired || sum.terms.len() == t {
                        assert!(users.is_empty());
                    } else {
                        let mut sorted = users.clone();
                        sorted.sort_unstable();
                        let others: Vec<usize> = (0..n).filter(|&o| o != server).collect();
                        assert_eq!(sorted, others, "T={t} N={n} server={server} sum={idx}");
                    }
                }
                // per-round counts
                for size in 1..=t {
                    let with = query
                        .sums
                        .iter()
                        .filter(|s| s.terms.len() == size && s.files().any(|f| f == desired))
                        .count();
                    let without = query
                        .sums
                        .iter()
                        .filter(|s| s.terms.len() == size && !s.files().any(|f| f == desired))
                        .count();
                    let w = (n - 1).pow(size as u32 - 1);
                    assert_eq!(with, binomial(t - 1, size - 1) * w);
                    assert_eq!(without, binomial(t - 1, size) * w);
                }
            }
        }
    }
}

#[test]
fn rates_respect_converse() {
    for (t, n) in [(2usize, 2usize), (3, 2), (4, 2), (3, 3), (5, 2)] {
        let nu = RepeatedPir::subpacketization(t, n).unwrap();
        let space = VirtualFileSpace::new(t, Modulus::new(11).unwrap(), nu).unwrap();
        let files = VirtualFiles::random(space, 3);
        for p in 1..=t {
            let request: Vec<usize> = (t - p..t).collect();
            let schemes: [&dyn RetrievalScheme; 2] = [&FullDownload, &RepeatedPir::new()];
            for scheme in schemes {
                let runs = run_many(scheme, &files, n, &request, 9, 8).unwrap();
                let m = measure_rate(&runs).unwrap();
                let converse = inverse_rate_converse(&BoundQuery::new(t, p, n).unwrap());
                assert!(m.inverse_rate >= converse - 1e-9, "{} T={t} P={p} N={n}", scheme.name());
                if p == 1 && scheme.name() == "repeated_pir" {
                    assert!((m.inverse_rate - converse).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn single_server_full_download_is_tight() {
    for t in 1..=6 {
        let space = VirtualFileSpace::new(t, Modulus::new(3).unwrap(), 2).unwrap();
        let files = VirtualFiles::random(space, 0);
        for p in 1..=t {
            let request: Vec<usize> = (0..p).collect();
            let run = run_retrieval(&FullDownload, &files, 1, &request, 0).unwrap();
            let expected = t as f64 / p as f64;
            assert_eq!(run.inverse_rate(), expected);
            assert!((inverse_rate_converse(&BoundQuery::new(t, p, 1).unwrap()) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn measured_rates_for_examples() {
    let space = VirtualFileSpace::new(3, Modulus::new(5).unwrap(), 8).unwrap();
    let files = VirtualFiles::random(space, 0);
    let m = measure_rate(&run_many(&RepeatedPir::new(), &files, 2, &[0], 1, 10).unwrap()).unwrap();
    assert_eq!(m.inverse_rate, 1.75);
    assert!((m.achievable - 1.75).abs() < 1e-12);
    let m = measure_rate(&run_many(&RepeatedPir::new(), &files, 2, &[0, 1], 1, 10).unwrap()).unwrap();
    assert_eq!(m.inverse_rate, 1.75);
    assert!((m.converse - 1.25).abs() < 1e-12);
    assert!((m.gap - 0.5).abs() < 1e-12);
    let space = VirtualFileSpace::new(3, Modulus::new(5).unwrap(), 1).unwrap();
    let files = VirtualFiles::random(space, 0);
    let m = measure_rate(&run_many(&FullDownload, &files, 2, &[0, 1], 1, 10).unwrap()).unwrap();
    assert_eq!(m.inverse_rate, 1.5);
}

#[test]
fn sampled_audit_accepts_repeated_pir() {
    let space = VirtualFileSpace::new(3, Modulus::new(2).unwrap(), 8).unwrap();
    for p in [1, 2] {
        let report = audit_privacy(
            &RepeatedPir::new(),
            &space,
            2,
            p,
            AuditMode::Sampled { samples: 100_000 },
            17,
        )
        .unwrap();
        assert!(report.download_symmetric);
        let worst = report.tests.iter().map(|t| t.p_value).fold(1.0, f64::min);
        assert!(report.passed, "P={p}: smallest p-value {worst}");
        assert!(report
            .tests
            .iter()
            .any(|t| t.feature == AuditFeature::IndexBucket && t.dof == 63));
    }
}

#[test]
fn sampled_audit_rejects_leaks() {
    let space = VirtualFileSpace::new(3, Modulus::new(2).unwrap(), 8).unwrap();
    let leaky = audit_privacy(
        &PlaintextRequest,
        &space,
        2,
        1,
        AuditMode::Sampled { samples: 10_000 },
        17,
    )
    .unwrap();
    assert!(!leaky.passed);
    let unrelabeled = audit_privacy(
        &RepeatedPir::without_relabeling(),
        &space,
        2,
        1,
        AuditMode::Sampled { samples: 10_000 },
        17,
    )
    .unwrap();
    assert!(!unrelabeled.passed);
}

#[test]
fn exact_audit_full_download_grid() {
    for t in 1..=5 {
        for n in 1..=3 {
            for p in 1..=t {
                let space = VirtualFileSpace::new(t, Modulus::new(2).unwrap(), 2).unwrap();
                let r = audit_privacy(&FullDownload, &space, n, p, AuditMode::Exact, 0).unwrap();
                assert_eq!(r.max_tv, Some(0.0));
                assert!(r.passed && r.download_symmetric);
            }
        }
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn decodes_and_downloads_symmetrically(
            t in 2usize..5,
            n in 1usize..4,
            p_frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let p = 1 + ((t as f64 * p_frac) as usize).min(t - 1);
            let modulus = Modulus::new(7).unwrap();
            for scheme in [&FullDownload as &dyn RetrievalScheme, &RepeatedPir::new()] {
                let nu = scheme.native_subpacketization(t, n).unwrap();
                let space = VirtualFileSpace::new(t, modulus, nu).unwrap();
                if scheme.check(&space, n, p).is_err() {
                    continue;
                }
                let files = VirtualFiles::random(space, seed);
                let mut rng = stream_rng(seed, 1);
                let mut request = rand::seq::index::sample(&mut rng, t, p).into_vec();
                request.sort_unstable();
                let tr = run_retrieval(scheme, &files, n, &request, seed).unwrap();
                for (r, &f) in tr.request.iter().enumerate() {
                    prop_assert_eq!(&tr.decoded[r][..], files.file(f));
                }
                let bound = inverse_rate_converse(&BoundQuery::new(t, p, n).unwrap());
                prop_assert!(tr.inverse_rate() >= bound - 1e-9);
                // the download pattern does not depend on which files were asked for
                let other: Vec<usize> = (0..p).collect();
                let tr2 = run_retrieval(scheme, &files, n, &other, seed ^ 1).unwrap();
                prop_assert_eq!(tr.per_server_download(), tr2.per_server_download());
            }
        }
    }
}
