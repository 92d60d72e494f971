//! Randomized invariants: algebra laws, counting identities, rate bounds,
//! and end-to-end decode over parameters the unit tests never pin down.

use mmpc::audit::structural_checks;
use mmpc::coding::cauchy_mds;
use mmpc::combin::binom;
use mmpc::gf::{FieldMatrix, Gf};
use mmpc::model::{build_library, relabel, DemandSet, MessageLibrary, RandomTape};
use mmpc::planner::{
    assign_signs, build_query_plan, dump_plan, min_field_size, plan_summary, shuffle_plan,
    stage_counts,
};
use mmpc::protocol::run_protocol;
use num::{BigRational, One, Zero};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const PRIMES: &[u64] = &[3, 5, 7, 11, 13, 17, 19, 23, 97];

/// Admissible (M, K, P, N) with 1 <= P < K <= M and N in {2, 3}.
fn params() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (3usize..=6)
        .prop_flat_map(|m| (Just(m), 2usize..=m))
        .prop_flat_map(|(m, k)| (Just(m), Just(k), 1usize..k))
        .prop_flat_map(|(m, k, p)| (Just(m), Just(k), Just(p), 2usize..=3))
}

/// Random full-rank dependent rows plus an independent demand, both grown
/// from `seed` by rejection. Tiny fields can in principle exhaust the
/// attempts, hence the Option.
fn random_instance(
    m: usize,
    k: usize,
    p: usize,
    q: u64,
    seed: u64,
) -> Option<(MessageLibrary, Vec<usize>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for _ in 0..60 {
        let rows: Vec<Vec<u64>> = (0..m - k)
            .map(|_| (0..k).map(|_| rng.gen_range(0..q)).collect())
            .collect();
        let Ok(lib) = build_library(m, k, q, &rows) else {
            continue;
        };
        for _ in 0..60 {
            let mut labels: Vec<usize> = (0..m).collect();
            labels.shuffle(&mut rng);
            let mut demand: Vec<usize> = labels[..p].to_vec();
            demand.sort_unstable();
            // Independence is checked by relabel, not by the constructor.
            if let Ok(d) = DemandSet::new(demand.clone(), &lib) {
                if relabel(&lib, &d).is_ok() {
                    return Some((lib, demand));
                }
            }
        }
    }
    None
}

/// Smallest prime >= max(3, floor).
fn next_prime_at_least(floor: u64) -> u64 {
    let mut q = floor.max(3);
    if q % 2 == 0 {
        q += 1;
    }
    while Gf::new(q).is_err() {
        q += 2;
    }
    q
}

fn rat(n: u64, d: u64) -> BigRational {
    BigRational::new(n.into(), d.into())
}

proptest! {
    #[test]
    fn field_axioms(qi in 0usize..PRIMES.len(), a in 0u64..97, b in 0u64..97, c in 0u64..97) {
        let q = PRIMES[qi];
        let gf = Gf::new(q).unwrap();
        let (a, b, c) = (a % q, b % q, c % q);

        prop_assert_eq!(gf.add(a, b), gf.add(b, a));
        prop_assert_eq!(gf.mul(a, b), gf.mul(b, a));
        prop_assert_eq!(gf.add(gf.add(a, b), c), gf.add(a, gf.add(b, c)));
        prop_assert_eq!(gf.mul(gf.mul(a, b), c), gf.mul(a, gf.mul(b, c)));
        prop_assert_eq!(gf.mul(a, gf.add(b, c)), gf.add(gf.mul(a, b), gf.mul(a, c)));
        prop_assert_eq!(gf.sub(a, b), gf.add(a, gf.neg(b)));
        prop_assert_eq!(gf.add(gf.sub(a, b), b), a);
        prop_assert_eq!(gf.from_signed(-1), q - 1);

        if a != 0 {
            prop_assert_eq!(gf.mul(a, gf.inv(a).unwrap()), 1);
        } else {
            prop_assert!(gf.inv(a).is_err());
        }

        let mut acc = 1;
        for e in 0..6u64 {
            prop_assert_eq!(gf.pow(a, e), acc);
            acc = gf.mul(acc, a);
        }
    }

    #[test]
    fn matrix_inverse_roundtrip(qi in 0usize..PRIMES.len(), dim in 1usize..=5, seed in any::<u64>()) {
        let q = PRIMES[qi];
        let gf = Gf::new(q).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let rows: Vec<Vec<u64>> = (0..dim)
            .map(|_| (0..dim).map(|_| rng.gen_range(0..q)).collect())
            .collect();
        let mat = FieldMatrix::from_rows(gf, &rows).unwrap();

        match mat.inverse() {
            Some(inv) => {
                let id = FieldMatrix::identity(gf, dim);
                prop_assert_eq!(&mat.matmul(&inv).unwrap(), &id);
                prop_assert_eq!(&inv.matmul(&mat).unwrap(), &id);
                prop_assert_eq!(mat.rank(), dim);
            }
            None => prop_assert!(mat.rank() < dim),
        }
    }

    #[test]
    fn stage_recursion_balance((m, _k, p, n) in params()) {
        let counts = stage_counts(m, p, n).unwrap();
        let rounds = m - p + 1;
        prop_assert_eq!(counts.alpha.len(), rounds);
        prop_assert!(counts.alpha.iter().all(|&a| a > 0));
        prop_assert_eq!(
            counts.alpha[rounds - 1] as u128,
            counts.scale as u128 * ((n - 1) as u128).pow((m - p) as u32)
        );
        for i in 1..rounds {
            let lhs = (n as u128 - 1) * counts.alpha[i - 1] as u128;
            let rhs: u128 = (1..=p)
                .filter(|j| i + j <= rounds)
                .map(|j| binom(p, j) * counts.alpha[i + j - 1] as u128)
                .sum();
            prop_assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn summary_identities((m, k, p, n) in params()) {
        let s = plan_summary(m, k, p, n).unwrap();
        let rounds = m - p + 1;

        let mut l: u128 = 0;
        let mut d: u128 = 0;
        for i in 1..=rounds {
            let a = s.alpha[i - 1] as u128;
            let r = binom(m - p, i) + p as u128 * binom(m - p, i - 1) - binom(m - k, i);
            prop_assert_eq!(s.r_by_round[i - 1] as u128, r);
            l += a * binom(m - p, i - 1);
            d += a * r;
        }
        prop_assert_eq!(s.l as u128, n as u128 * l);
        prop_assert_eq!(s.d as u128, n as u128 * d);

        let expect = rat(p as u64, 1) * rat(s.l, s.d);
        prop_assert_eq!(&s.r2, &expect);
        prop_assert!(s.r2 > BigRational::zero() && s.r2 <= BigRational::one());
    }

    #[test]
    fn rates_stay_bounded((m, k, p, n) in params()) {
        let pt = mmpc::analytics::rate_point(m, k, p, n).unwrap();
        let (zero, one) = (BigRational::zero(), BigRational::one());

        prop_assert!(pt.c_pc > zero && pt.c_pc <= one);
        prop_assert!(pt.delta >= zero);
        prop_assert!(pt.r1 > zero && pt.r1 <= one);
        prop_assert!(pt.r1 >= &pt.c_pc + &pt.delta);
        if let Some(c_mmp) = &pt.c_mmp {
            prop_assert!(&pt.r1 >= c_mmp);
            prop_assert!(pt.r1 == &pt.c_pc + &pt.delta || &pt.r1 == c_mmp);
        }
        prop_assert!(pt.r2 > zero && pt.r2 <= one);
        prop_assert!(pt.r_upper > zero && pt.r_upper <= one);
        prop_assert!(pt.gap >= one);
        prop_assert!(pt.gap <= rat(2, 1));
    }

    #[test]
    fn cauchy_square_submatrices_invertible(
        r in 1usize..=4,
        c in 1usize..=5,
        qi in 0usize..PRIMES.len(),
        seed in any::<u64>(),
    ) {
        let q = PRIMES[qi];
        prop_assume!(r <= c && q as usize >= r + c);
        let mds = cauchy_mds(r, c, q).unwrap();
        let gf = mds.matrix().gf();
        let s = r.min(c);

        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut rows: Vec<usize> = (0..r).collect();
        let mut cols: Vec<usize> = (0..c).collect();
        rows.shuffle(&mut rng);
        cols.shuffle(&mut rng);

        let sub: Vec<Vec<u64>> = rows[..s]
            .iter()
            .map(|&i| cols[..s].iter().map(|&j| mds.matrix().row(i)[j]).collect())
            .collect();
        let sub = FieldMatrix::from_rows(gf, &sub).unwrap();
        prop_assert_eq!(sub.rank(), s);
        prop_assert!(sub.inverse().is_some());
    }

    #[test]
    fn relabel_is_a_bijection((m, k, p, _n) in params(), seed in any::<u64>()) {
        let q = 97;
        let Some((lib, demand)) = random_instance(m, k, p, q, seed) else {
            return Ok(());
        };
        let demand = DemandSet::new(demand, &lib).unwrap();
        let rlib = relabel(&lib, &demand).unwrap();

        for label in 0..m {
            prop_assert_eq!(rlib.to_relabeled(rlib.to_original(label)), label);
            prop_assert_eq!(rlib.to_original(rlib.to_relabeled(label)), label);
            prop_assert_eq!(rlib.original_row(label), lib.coeff_row(rlib.to_original(label)));
        }
        // Demanded messages land on the first P labels and form the new basis.
        for (pos, &orig) in demand.indices().iter().enumerate() {
            prop_assert_eq!(rlib.to_relabeled(orig), pos);
        }
        let gf = lib.gf();
        let id = FieldMatrix::identity(gf, k);
        prop_assert_eq!(&rlib.basis_change().matmul(rlib.basis_inv()).unwrap(), &id);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn plan_structure_counts((m, k, p, n) in params(), seed in any::<u64>()) {
        let summary = plan_summary(m, k, p, n).unwrap();
        let q = next_prime_at_least(min_field_size(&summary));
        let Some((lib, demand)) = random_instance(m, k, p, q, seed) else {
            return Ok(());
        };
        let demand = DemandSet::new(demand, &lib).unwrap();
        let rlib = relabel(&lib, &demand).unwrap();
        let counts = stage_counts(m, p, n).unwrap();

        let mut plan = build_query_plan(&rlib, &counts, n).unwrap();
        let mut tape = RandomTape::from_seed(seed, summary.l as usize);
        assign_signs(&mut plan, &mut tape);
        shuffle_plan(&mut plan, &mut tape);

        for stage in plan.all_stages() {
            let i = stage.round;
            prop_assert_eq!(stage.queries.len() as u128, binom(m, i));
            prop_assert_eq!(stage.fresh.len() as u128, binom(m - p, i - 1));
            let donor_count: u128 = (1..=p.min(i - 1)).map(|t| binom(p, t)).sum();
            prop_assert_eq!(stage.donors.len() as u128, donor_count);
            for (subset, donor) in &stage.donors {
                prop_assert_eq!(donor.round, i - subset.len());
                prop_assert_ne!(donor.server, stage.server);
                let target = plan.stage(*donor);
                prop_assert_eq!((target.server, target.round), (donor.server, donor.round));
            }
            let mut wire = stage.wire_perm.clone();
            wire.sort_unstable();
            let natural: Vec<usize> = (0..stage.queries.len()).collect();
            prop_assert_eq!(wire, natural);
        }

        for report in structural_checks(&plan, &rlib) {
            prop_assert!(report.pass, "{} failed: {}", report.check, report.detail);
        }

        // Same inputs, same bytes.
        let mut replay = build_query_plan(&rlib, &counts, n).unwrap();
        let mut tape2 = RandomTape::from_seed(seed, summary.l as usize);
        assign_signs(&mut replay, &mut tape2);
        shuffle_plan(&mut replay, &mut tape2);
        prop_assert_eq!(dump_plan(&plan), dump_plan(&replay));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn protocol_decodes_exactly((m, k, p, n) in params(), seed in any::<u64>()) {
        let summary = plan_summary(m, k, p, n).unwrap();
        let q = next_prime_at_least(min_field_size(&summary));
        let Some((lib, demand)) = random_instance(m, k, p, q, seed) else {
            return Ok(());
        };
        let demand = DemandSet::new(demand, &lib).unwrap();

        let run = run_protocol(&lib, &demand, n, q, seed).unwrap();
        prop_assert_eq!(run.transcript.total, run.summary.d);
        prop_assert_eq!(run.decoded.rows(), p);
        prop_assert_eq!(run.decoded.cols(), run.summary.l as usize);

        let replay = run_protocol(&lib, &demand, n, q, seed).unwrap();
        prop_assert_eq!(run.transcript.dump(), replay.transcript.dump());
    }
}
