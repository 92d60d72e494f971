//! MDS compression of stages and extraction of their redundancy structure.
//!
//! A stage of round i holds C(M,i) queries but only C(M,i) − C(M−K,i) of
//! them are linearly independent once the dependent messages are expanded
//! over the file basis, and the useless ones are reconstructable on the
//! client side. Multiplying the stage by an MDS matrix shrinks the download
//! to r rows while keeping the informative content recoverable.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::combin::binom;
use crate::gf::{FieldMatrix, Gf, GfError};
use crate::model::{RandomTape, RelabeledLibrary};
use crate::planner::{QueryClass, QueryPlan, Stage};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodingError {
    #[error(transparent)]
    Field(#[from] GfError),
    #[error("field size {q} too small for a {r}x{c} MDS matrix (needs q >= {})", r + c)]
    FieldTooSmall { q: u64, r: usize, c: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(
        "redundancy violated at server {server} round {round} stage {stage}: \
         query {query} is not spanned by the others"
    )]
    RedundancyViolated {
        server: usize,
        round: usize,
        stage: usize,
        query: usize,
    },
    #[error(
        "no decodable column attribution for server {server} round {round} stage {stage}"
    )]
    Undecodable {
        server: usize,
        round: usize,
        stage: usize,
    },
}

/// Cauchy matrix: every square submatrix is invertible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MdsMatrix {
    mat: FieldMatrix,
}

impl MdsMatrix {
    pub fn r(&self) -> usize {
        self.mat.rows()
    }

    pub fn c(&self) -> usize {
        self.mat.cols()
    }

    pub fn matrix(&self) -> &FieldMatrix {
        &self.mat
    }

    /// Wrap an arbitrary coefficient matrix. Meant for non-MDS test doubles;
    /// the protocol itself always goes through [`cauchy_mds`].
    pub fn from_matrix(mat: FieldMatrix) -> Self {
        MdsMatrix { mat }
    }
}

/// The canonical r×c Cauchy matrix over F_q: entry (i,j) = 1/(x_i − y_j) with
/// x = 0..r and y = r..r+c. Distinct evaluation points need q ≥ r + c.
pub fn cauchy_mds(r: usize, c: usize, q: u64) -> Result<MdsMatrix, CodingError> {
    let gf = Gf::new(q)?;
    if r > c {
        return Err(CodingError::DimensionMismatch(format!(
            "Cauchy construction expects r <= c, got {r}x{c}"
        )));
    }
    if (q as u128) < (r + c) as u128 {
        return Err(CodingError::FieldTooSmall { q, r, c });
    }
    let mut mat = FieldMatrix::zeros(gf, r, c);
    for i in 0..r {
        for j in 0..c {
            let diff = gf.sub(i as u64, (r + j) as u64);
            mat[(i, j)] = gf.inv(diff).expect("x and y points are distinct");
        }
    }
    Ok(MdsMatrix { mat })
}

/// One row of G applied to a stage, fully expanded for the wire: original
/// message labels, permuted symbol indices, signs and σ folded into the
/// coefficients, like terms merged, zero terms dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedQuery {
    pub server: usize,
    pub round: usize,
    pub stage: usize,
    pub row: usize,
    /// (original label, permuted symbol index, coefficient), all 0-based.
    pub terms: Vec<(usize, usize, u64)>,
}

/// Coded downloads per stage of round i.
pub fn round_r(m: usize, k: usize, p: usize, i: usize) -> usize {
    (binom(m - p, i) - binom(m - k, i) + p as u128 * binom(m - p, i - 1)) as usize
}

/// Positions (into the canonical stage order) of the queries a stage is
/// encoded over, column by column: the q-vector is sorted by the query's
/// subset of *original* labels, so column attribution never depends on the
/// demand.
pub fn encode_order(plan: &QueryPlan, stage: &Stage) -> Vec<usize> {
    let mut order: Vec<usize> = (0..stage.queries.len()).collect();
    order.sort_by_cached_key(|&qi| {
        let mut subset: Vec<usize> = stage.queries[qi]
            .subset
            .iter()
            .map(|&l| plan.original_label(l))
            .collect();
        subset.sort_unstable();
        subset
    });
    order
}

/// Compress one stage: q_f = G·q. Term emission order follows the shuffled
/// query and term order of the plan, so the wire leaks the tape's ordering
/// noise rather than the canonical layout.
pub fn encode_stage(
    plan: &QueryPlan,
    stage: &Stage,
    g: &MdsMatrix,
    tape: &RandomTape,
) -> Result<Vec<CodedQuery>, CodingError> {
    let gf = Gf::new(plan.q)?;
    let want_r = round_r(plan.m, plan.k, plan.p, stage.round);
    if g.c() != stage.queries.len() || g.r() != want_r {
        return Err(CodingError::DimensionMismatch(format!(
            "round {} stage takes a {}x{} matrix, got {}x{}",
            stage.round,
            want_r,
            stage.queries.len(),
            g.r(),
            g.c()
        )));
    }
    let order = encode_order(plan, stage);
    let mut col_of = vec![0usize; order.len()];
    for (col, &qi) in order.iter().enumerate() {
        col_of[qi] = col;
    }
    let wire: Vec<usize> = if stage.wire_perm.is_empty() {
        (0..stage.queries.len()).collect()
    } else {
        stage.wire_perm.clone()
    };

    let mut out = Vec::with_capacity(g.r());
    for row in 0..g.r() {
        let mut slot: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut terms: Vec<(usize, usize, u64)> = Vec::new();
        for &qi in &wire {
            let query = &stage.queries[qi];
            let gcoef = g.matrix()[(row, col_of[qi])];
            if gcoef == 0 {
                continue;
            }
            let term_order: Vec<usize> = if query.term_perm.is_empty() {
                (0..query.terms.len()).collect()
            } else {
                query.term_perm.clone()
            };
            for ti in term_order {
                let t = &query.terms[ti];
                let mut coef = gf.mul(gcoef, gf.from_signed(t.sign as i64));
                if tape.sigma(t.index) < 0 {
                    coef = gf.neg(coef);
                }
                let key = (plan.original_label(t.label), tape.pi(t.index));
                match slot.get(&key) {
                    Some(&at) => terms[at].2 = gf.add(terms[at].2, coef),
                    None => {
                        slot.insert(key, terms.len());
                        terms.push((key.0, key.1, coef));
                    }
                }
            }
        }
        terms.retain(|&(_, _, coef)| coef != 0);
        out.push(CodedQuery {
            server: stage.server,
            round: stage.round,
            stage: stage.stage_idx,
            row,
            terms,
        });
    }
    Ok(out)
}

/// The r×r system a decoder must invert for a stage: the G columns of the
/// non-reconstructable queries, with the redundant columns folded through
/// their dependency coefficients. Columns follow the q₁ partition order.
pub fn effective_system(
    plan: &QueryPlan,
    stage: &Stage,
    basis: &RedundancyBasis,
    g: &MdsMatrix,
) -> Result<FieldMatrix, CodingError> {
    let gf = Gf::new(plan.q)?;
    let order = encode_order(plan, stage);
    let mut col_of = vec![0usize; order.len()];
    for (col, &qi) in order.iter().enumerate() {
        col_of[qi] = col;
    }
    let gm = g.matrix();
    let mut m_eff = FieldMatrix::zeros(gf, g.r(), basis.q1.len());
    for row in 0..g.r() {
        for (j, &pos) in basis.q1.iter().enumerate() {
            m_eff[(row, j)] = gm[(row, col_of[pos])];
        }
        for (t3, &pos3) in basis.q3.iter().enumerate() {
            let gc = gm[(row, col_of[pos3])];
            if gc == 0 {
                continue;
            }
            for j in 0..basis.q1.len() {
                m_eff[(row, j)] = gf.add(m_eff[(row, j)], gf.mul(gc, basis.a[(t3, j)]));
            }
        }
    }
    Ok(m_eff)
}

/// The stage's compression matrix: the canonical Cauchy matrix with its
/// columns reattributed by the variant's fixed pseudorandom permutation.
/// Variant 0 is the canonical attribution. Permuting columns keeps the MDS
/// property and the entry multiset; which variant a client needs depends on
/// its own signs, so the family itself carries no demand information.
pub fn stage_mds(r: usize, c: usize, q: u64, variant: u64) -> Result<MdsMatrix, CodingError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let base = cauchy_mds(r, c, q)?;
    if variant == 0 {
        return Ok(base);
    }
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(variant);
    rng.set_stream(0x6d64_73); // keep variant draws apart from protocol streams
    let mut perm: Vec<usize> = (0..c).collect();
    perm.shuffle(&mut rng);
    let gf = base.matrix().gf();
    let mut mat = FieldMatrix::zeros(gf, r, c);
    for i in 0..r {
        for (j, &pj) in perm.iter().enumerate() {
            mat[(i, j)] = base.matrix()[(i, pj)];
        }
    }
    Ok(MdsMatrix { mat })
}

/// Lowest variant whose effective system is invertible for this stage, with
/// its matrix. Walked deterministically, so the same seed always lands on
/// the same matrix. Exhausting the family would mean the stage is
/// undecodable outright; no parameter set has ever needed more than a few
/// steps.
pub const MDS_VARIANTS: u64 = 64;

pub fn choose_stage_mds(
    plan: &QueryPlan,
    stage: &Stage,
    basis: &RedundancyBasis,
) -> Result<(MdsMatrix, u64), CodingError> {
    let r = round_r(plan.m, plan.k, plan.p, stage.round);
    for variant in 0..MDS_VARIANTS {
        let g = stage_mds(r, stage.queries.len(), plan.q, variant)?;
        if effective_system(plan, stage, basis, &g)?.inverse().is_some() {
            return Ok((g, variant));
        }
    }
    Err(CodingError::Undecodable {
        server: stage.server,
        round: stage.round,
        stage: stage.stage_idx,
    })
}

/// The wire record for one coded query, 1-based like the plan dump.
pub fn coded_to_json(cq: &CodedQuery) -> serde_json::Value {
    let terms: Vec<serde_json::Value> = cq
        .terms
        .iter()
        .map(|&(label, index, coef)| serde_json::json!([label + 1, index + 1, coef]))
        .collect();
    serde_json::json!({
        "server": cq.server + 1,
        "round": cq.round,
        "stage": cq.stage + 1,
        "row": cq.row + 1,
        "terms": terms,
    })
}

pub fn dump_coded<'a>(queries: impl IntoIterator<Item = &'a CodedQuery>) -> String {
    let mut out = String::new();
    for cq in queries {
        out.push_str(&coded_to_json(cq).to_string());
        out.push('\n');
    }
    out
}

/// How a stage's value vector splits, with the redundant part expressed over
/// the rest: q₃ = A·q₁ + B·q₂. Positions index the canonical stage order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RedundancyBasis {
    /// Informative queries plus side information touching an independent label.
    pub q1: Vec<usize>,
    /// Useless queries.
    pub q2: Vec<usize>,
    /// Side information over dependent labels only; the redundant rows.
    pub q3: Vec<usize>,
    pub a: FieldMatrix,
    pub b: FieldMatrix,
}

/// Expand every query of a stage to ground coordinates: one column per
/// (basis message, symbol index) pair actually touched by the stage. Signs
/// folded in; σ and π drop out because they act identically on every row.
pub fn stage_ground_matrix(stage: &Stage, rlib: &RelabeledLibrary) -> FieldMatrix {
    let gf = rlib.gf();
    let k = rlib.k();
    let mut idx_col: BTreeMap<usize, usize> = BTreeMap::new();
    for query in &stage.queries {
        for t in &query.terms {
            let next = idx_col.len();
            idx_col.entry(t.index).or_insert(next);
        }
    }
    let width = k * idx_col.len();
    let mut mat = FieldMatrix::zeros(gf, stage.queries.len(), width);
    for (row, query) in stage.queries.iter().enumerate() {
        for t in &query.terms {
            let coeffs = rlib.base().coeff_row(t.label);
            let sign = gf.from_signed(t.sign as i64);
            let base = idx_col[&t.index];
            for (j, &c) in coeffs.iter().enumerate() {
                let col = j * idx_col.len() + base;
                mat[(row, col)] = gf.add(mat[(row, col)], gf.mul(sign, c));
            }
        }
    }
    mat
}

/// Partition a stage into q₁/q₂/q₃ and solve q₃ = A·q₁ + B·q₂ by exact
/// elimination over the ground coordinates. A failure to span is a protocol
/// bug, not a recoverable condition.
pub fn stage_redundancy_basis(
    stage: &Stage,
    rlib: &RelabeledLibrary,
) -> Result<RedundancyBasis, CodingError> {
    let k = rlib.k();
    let (mut q1, mut q2, mut q3) = (Vec::new(), Vec::new(), Vec::new());
    for (pos, query) in stage.queries.iter().enumerate() {
        match query.class {
            QueryClass::Useless => q2.push(pos),
            QueryClass::SideInfo if query.subset.iter().all(|&l| l >= k) => q3.push(pos),
            _ => q1.push(pos),
        }
    }
    debug_assert_eq!(
        q3.len() as u128,
        binom(rlib.m() - k, stage.round),
        "redundant count follows the dependent-label count"
    );

    let ground = stage_ground_matrix(stage, rlib);
    let gf = rlib.gf();
    let pick = |rows: &[usize]| {
        let mut m = FieldMatrix::zeros(gf, 0, ground.cols());
        for &pos in rows {
            m.push_row(ground.row(pos));
        }
        m
    };
    let mut basis = pick(&q1);
    for &pos in &q2 {
        basis.push_row(ground.row(pos));
    }
    let coeffs = pick(&q3)
        .solve_in_rowspan(&basis)
        .map_err(|e| match e {
            GfError::NotInSpan { row } => CodingError::RedundancyViolated {
                server: stage.server,
                round: stage.round,
                stage: stage.stage_idx,
                query: q3[row],
            },
            other => CodingError::Field(other),
        })?;
    let mut a = FieldMatrix::zeros(gf, q3.len(), q1.len());
    let mut b = FieldMatrix::zeros(gf, q3.len(), q2.len());
    for row in 0..q3.len() {
        for (j, _) in q1.iter().enumerate() {
            a[(row, j)] = coeffs[(row, j)];
        }
        for (j, _) in q2.iter().enumerate() {
            b[(row, j)] = coeffs[(row, q1.len() + j)];
        }
    }
    Ok(RedundancyBasis { q1, q2, q3, a, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gf::Gf;
    use crate::model::{build_library, randomize_symbols, relabel, DemandSet, RandomTape};
    use crate::planner::{assign_signs, build_query_plan, shuffle_plan, stage_counts};
    use itertools::Itertools;

    fn golden_setup(seed: Option<u64>) -> (RelabeledLibrary, QueryPlan, RandomTape) {
        let lib = build_library(5, 3, 19, &[vec![1, 1, 0], vec![0, 1, 1]]).unwrap();
        let demand = DemandSet::new(vec![0, 1], &lib).unwrap();
        let rlib = relabel(&lib, &demand).unwrap();
        let counts = stage_counts(5, 2, 2).unwrap();
        let mut plan = build_query_plan(&rlib, &counts, 2).unwrap();
        let mut tape = match seed {
            Some(s) => RandomTape::from_seed(s, plan.l),
            None => RandomTape::identity(plan.l),
        };
        assign_signs(&mut plan, &mut tape);
        if seed.is_some() {
            shuffle_plan(&mut plan, &mut tape);
        }
        (rlib, plan, tape)
    }

    #[test]
    fn cauchy_examples() {
        let g = cauchy_mds(1, 1, 5).unwrap();
        assert_eq!(g.matrix().row(0), &[4]);
        let g = cauchy_mds(2, 3, 7).unwrap();
        let m = g.matrix();
        for cols in (0..3).combinations(2) {
            let f = m.gf();
            let det = f.sub(
                f.mul(m[(0, cols[0])], m[(1, cols[1])]),
                f.mul(m[(0, cols[1])], m[(1, cols[0])]),
            );
            assert_ne!(det, 0, "minor on columns {cols:?}");
        }
        assert!(matches!(
            cauchy_mds(3, 5, 7),
            Err(CodingError::FieldTooSmall { q: 7, r: 3, c: 5 })
        ));
        assert!(matches!(
            cauchy_mds(3, 2, 19),
            Err(CodingError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn every_square_submatrix_invertible() {
        for (r, c, q) in [(3usize, 5usize, 11u64), (8, 10, 19), (2, 5, 7)] {
            let g = cauchy_mds(r, c, q).unwrap();
            let gf = Gf::new(q).unwrap();
            for cols in (0..c).combinations(r) {
                let mut sub = FieldMatrix::zeros(gf, r, r);
                for i in 0..r {
                    for (j, &cc) in cols.iter().enumerate() {
                        sub[(i, j)] = g.matrix()[(i, cc)];
                    }
                }
                assert_eq!(sub.rank(), r, "{r}x{r} submatrix on {cols:?} over F_{q}");
            }
        }
    }

    /// The worked round-2 relation: the tenth query equals
    /// q₃+q₆−q₅−q₈+q₇+q₁+q₄ when both demanded messages sit in front.
    #[test]
    fn golden_round2_redundancy() {
        let (rlib, plan, _) = golden_setup(None);
        let stage = &plan.stages[0][1][0];
        let basis = stage_redundancy_basis(stage, &rlib).unwrap();
        assert_eq!(basis.q1, vec![0, 1, 2, 3, 4, 5, 7, 8]);
        assert_eq!(basis.q2, vec![6]);
        assert_eq!(basis.q3, vec![9]);
        assert_eq!(basis.a.row(0), &[1, 0, 1, 1, 18, 1, 18, 0]);
        assert_eq!(basis.b.row(0), &[1]);
    }

    #[test]
    fn rank_law_holds_per_stage() {
        let (rlib, plan, _) = golden_setup(Some(3));
        for stage in plan.all_stages() {
            let rank = stage_ground_matrix(stage, &rlib).rank();
            let want = binom(5, stage.round) - binom(2, stage.round);
            assert_eq!(rank as u128, want, "round {}", stage.round);
        }
    }

    #[test]
    fn all_independent_library_has_no_redundancy() {
        let lib = build_library(4, 4, 13, &[]).unwrap();
        let demand = DemandSet::new(vec![0, 1], &lib).unwrap();
        let rlib = relabel(&lib, &demand).unwrap();
        let counts = stage_counts(4, 2, 2).unwrap();
        let mut plan = build_query_plan(&rlib, &counts, 2).unwrap();
        let mut tape = RandomTape::identity(plan.l);
        assign_signs(&mut plan, &mut tape);
        for stage in plan.all_stages() {
            let basis = stage_redundancy_basis(stage, &rlib).unwrap();
            assert!(basis.q3.is_empty());
            assert_eq!(basis.a.rows(), 0);
            let rank = stage_ground_matrix(stage, &rlib).rank();
            assert_eq!(rank, stage.queries.len());
        }
    }

    /// The A, B coefficients are not just algebra: evaluated on random file
    /// contents, every redundant query value matches its reconstruction.
    #[test]
    fn reconstruction_matches_evaluation() {
        let lib = build_library(4, 3, 13, &[vec![2, 1, 5]]).unwrap();
        for seed in 0..4u64 {
            let demand = DemandSet::new(vec![1, 2], &lib).unwrap();
            let rlib = relabel(&lib, &demand).unwrap();
            let counts = stage_counts(4, 2, 2).unwrap();
            let mut plan = build_query_plan(&rlib, &counts, 2).unwrap();
            let mut tape = RandomTape::from_seed(seed, plan.l);
            assign_signs(&mut plan, &mut tape);
            shuffle_plan(&mut plan, &mut tape);
            let gf = lib.gf();
            let mut files = FieldMatrix::zeros(gf, 3, plan.l);
            for r in 0..3 {
                for c in 0..plan.l {
                    files[(r, c)] = tape.draw_symbol(gf.q());
                }
            }
            let u = randomize_symbols(&rlib, &files, &tape).unwrap();
            for stage in plan.all_stages() {
                let basis = stage_redundancy_basis(stage, &rlib).unwrap();
                let value = |pos: usize| {
                    let mut acc = 0u64;
                    for t in &stage.queries[pos].terms {
                        let v = u.u(t.label, t.index);
                        acc = if t.sign < 0 {
                            gf.sub(acc, v)
                        } else {
                            gf.add(acc, v)
                        };
                    }
                    acc
                };
                for (row, &pos3) in basis.q3.iter().enumerate() {
                    let mut want = 0u64;
                    for (j, &pos1) in basis.q1.iter().enumerate() {
                        want = gf.add(want, gf.mul(basis.a[(row, j)], value(pos1)));
                    }
                    for (j, &pos2) in basis.q2.iter().enumerate() {
                        want = gf.add(want, gf.mul(basis.b[(row, j)], value(pos2)));
                    }
                    assert_eq!(value(pos3), want);
                }
            }
        }
    }

    /// Coded values on raw stored messages equal G times the plan query
    /// values on alternated symbols: σ, π, and the signs all fold correctly.
    #[test]
    fn encoding_linearity() {
        let (rlib, plan, mut tape) = golden_setup(Some(9));
        let gf = rlib.gf();
        let mut files = FieldMatrix::zeros(gf, 3, plan.l);
        for r in 0..3 {
            for c in 0..plan.l {
                files[(r, c)] = tape.draw_symbol(gf.q());
            }
        }
        // Raw message grid exactly as a server stores it, original labels.
        let lib = build_library(5, 3, 19, &[vec![1, 1, 0], vec![0, 1, 1]]).unwrap();
        let stored = lib.coeffs().matmul(&files).unwrap();
        let u = randomize_symbols(&rlib, &files, &tape).unwrap();
        for stage in plan.all_stages() {
            let r = round_r(5, 3, 2, stage.round);
            let g = cauchy_mds(r, stage.queries.len(), 19).unwrap();
            let coded = encode_stage(&plan, stage, &g, &tape).unwrap();
            let order = encode_order(&plan, stage);
            for (row, cq) in coded.iter().enumerate() {
                let mut wire_val = 0u64;
                for &(label, idx, coef) in &cq.terms {
                    wire_val = gf.add(wire_val, gf.mul(coef, stored[(label, idx)]));
                }
                let mut want = 0u64;
                for (col, &qi) in order.iter().enumerate() {
                    let mut qv = 0u64;
                    for t in &stage.queries[qi].terms {
                        let v = u.u(t.label, t.index);
                        qv = if t.sign < 0 {
                            gf.sub(qv, v)
                        } else {
                            gf.add(qv, v)
                        };
                    }
                    want = gf.add(want, gf.mul(g.matrix()[(row, col)], qv));
                }
                assert_eq!(wire_val, want, "row {row} of round {}", stage.round);
            }
        }
    }

    /// An identity-prefix matrix is not MDS, but encode_stage is agnostic:
    /// row j must reproduce the j-th query in encode order verbatim.
    #[test]
    fn identity_prefix_double_passes_queries_through() {
        let (_, plan, tape) = golden_setup(None);
        let stage = &plan.stages[0][0][0];
        let gf = Gf::new(19).unwrap();
        let mut id3 = FieldMatrix::zeros(gf, 3, 5);
        for i in 0..3 {
            id3[(i, i)] = 1;
        }
        let coded = encode_stage(&plan, stage, &MdsMatrix::from_matrix(id3), &tape).unwrap();
        let order = encode_order(&plan, stage);
        for (row, cq) in coded.iter().enumerate() {
            let query = &stage.queries[order[row]];
            assert_eq!(cq.terms.len(), 1);
            let (label, idx, coef) = cq.terms[0];
            assert_eq!(label, plan.original_label(query.terms[0].label));
            assert_eq!(idx, query.terms[0].index); // identity tape: π = id
            assert_eq!(coef, 1);
        }
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let (_, plan, tape) = golden_setup(None);
        let stage = &plan.stages[0][1][0];
        let g = cauchy_mds(3, 5, 19).unwrap();
        assert!(matches!(
            encode_stage(&plan, stage, &g, &tape),
            Err(CodingError::DimensionMismatch(_))
        ));
    }
}
