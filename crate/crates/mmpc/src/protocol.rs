//! The runtime: servers answering coded queries on stored messages, and the
//! client decoder.
//!
//! Decoding walks rounds in order. Useless-query values are rebuilt from
//! symbols already decoded plus donor-stage values; the redundant queries are
//! eliminated through A and B; the remaining square system is inverted to
//! recover the informative values, each of which yields one fresh demanded
//! symbol once its side information is peeled off. Donor values are usable
//! because a consumer's side block equals the donor's query up to one global
//! sign, recovered by comparing term signs.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::coding::{
    choose_stage_mds, coded_to_json, effective_system, encode_order, encode_stage,
    stage_redundancy_basis, CodedQuery, CodingError, MdsMatrix, RedundancyBasis,
};
use crate::gf::{FieldMatrix, Gf, GfError};
use crate::model::{
    relabel, DemandSet, MessageLibrary, ModelError, RandomTape,
};
use crate::planner::{
    assign_signs, build_query_plan, min_field_size, plan_summary, shuffle_plan, stage_counts,
    PlanError, PlanSummary, QueryClass, QueryPlan, Stage,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error(transparent)]
    Field(#[from] GfError),
    #[error("term (label {label}, index {index}) outside the {m}x{l} message grid")]
    IndexOutOfRange {
        label: usize,
        index: usize,
        m: usize,
        l: usize,
    },
    #[error("decode system singular at server {server} round {round} stage {stage}")]
    SingularSystem {
        server: usize,
        round: usize,
        stage: usize,
    },
    #[error("missing donor value: {detail}")]
    MissingDonor { detail: String },
    #[error("stage (server {server}, round {round}, stage {stage}) decoded twice")]
    StageReplayed {
        server: usize,
        round: usize,
        stage: usize,
    },
    #[error("stage expects {want} answers, got {got}")]
    AnswerCount { got: usize, want: usize },
    #[error("decoded message {label} disagrees with ground truth at column {col}")]
    DecodeMismatch { label: usize, col: usize },
    #[error("downloaded {got} symbols, plan promises {want}")]
    DownloadMismatch { got: u64, want: u64 },
    #[error("malformed transcript: {0}")]
    Malformed(String),
}

/// One simulated server: the full M×L symbol grid, identical on every server.
#[derive(Debug, Clone)]
pub struct ServerState {
    id: usize,
    grid: FieldMatrix,
}

impl ServerState {
    /// Materialize the message grid from the K file rows.
    pub fn new(id: usize, lib: &MessageLibrary, files: &FieldMatrix) -> Result<Self, ProtocolError> {
        let grid = lib.coeffs().matmul(files)?;
        // Dependent rows are combinations of the file rows by construction;
        // the first K rows are the files themselves.
        debug_assert!((0..lib.k()).all(|r| grid.row(r) == files.row(r)));
        Ok(ServerState { id, grid })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn answer(&self, coded: &CodedQuery) -> Result<u64, ProtocolError> {
        server_answer(self, coded)
    }
}

/// Evaluate one coded query on the stored symbols: Σ coef · W_label(index).
pub fn server_answer(state: &ServerState, coded: &CodedQuery) -> Result<u64, ProtocolError> {
    let gf = state.grid.gf();
    let mut acc = 0u64;
    for &(label, index, coef) in &coded.terms {
        if label >= state.grid.rows() || index >= state.grid.cols() {
            return Err(ProtocolError::IndexOutOfRange {
                label,
                index,
                m: state.grid.rows(),
                l: state.grid.cols(),
            });
        }
        acc = gf.add(acc, gf.mul(coef, state.grid[(label, index)]));
    }
    Ok(acc)
}

/// Everything that crossed the wire: per server, coded queries in wire order
/// with their answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<Vec<(CodedQuery, u64)>>,
    pub total: u64,
}

impl Transcript {
    pub fn new(n: usize) -> Self {
        Transcript {
            entries: vec![Vec::new(); n],
            total: 0,
        }
    }

    pub fn push(&mut self, server: usize, coded: CodedQuery, answer: u64) {
        self.entries[server].push((coded, answer));
        self.total += 1;
    }

    /// Answers regrouped for the decoder: (server, round, stage) → values in
    /// row order.
    pub fn answers_by_stage(&self) -> BTreeMap<(usize, usize, usize), Vec<u64>> {
        let mut map: BTreeMap<(usize, usize, usize), Vec<(usize, u64)>> = BTreeMap::new();
        for per_server in &self.entries {
            for (cq, ans) in per_server {
                map.entry((cq.server, cq.round, cq.stage))
                    .or_default()
                    .push((cq.row, *ans));
            }
        }
        map.into_iter()
            .map(|(key, mut rows)| {
                rows.sort_unstable();
                (key, rows.into_iter().map(|(_, v)| v).collect())
            })
            .collect()
    }

    /// JSON-lines: the coded-query wire records plus an `answer` field.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for per_server in &self.entries {
            for (cq, ans) in per_server {
                let mut rec = coded_to_json(cq);
                rec.as_object_mut()
                    .expect("wire records are objects")
                    .insert("answer".into(), serde_json::json!(ans));
                out.push_str(&rec.to_string());
                out.push('\n');
            }
        }
        out
    }
}

/// Inverse of [`Transcript::dump`].
pub fn parse_transcript(text: &str, n: usize) -> Result<Transcript, ProtocolError> {
    let bad = |line: usize, what: &str| ProtocolError::Malformed(format!("line {}: {what}", line + 1));
    let mut t = Transcript::new(n);
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| bad(ln, &e.to_string()))?;
        let field = |name: &str| -> Result<u64, ProtocolError> {
            v.get(name)
                .and_then(|x| x.as_u64())
                .ok_or_else(|| bad(ln, &format!("missing {name}")))
        };
        let server = field("server")? as usize - 1;
        if server >= n {
            return Err(bad(ln, "server out of range"));
        }
        let terms = v
            .get("terms")
            .and_then(|x| x.as_array())
            .ok_or_else(|| bad(ln, "missing terms"))?
            .iter()
            .map(|t| {
                let triple = t.as_array().filter(|a| a.len() == 3)?;
                Some((
                    triple[0].as_u64()? as usize - 1,
                    triple[1].as_u64()? as usize - 1,
                    triple[2].as_u64()?,
                ))
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad(ln, "bad term triple"))?;
        let cq = CodedQuery {
            server,
            round: field("round")? as usize,
            stage: field("stage")? as usize - 1,
            row: field("row")? as usize - 1,
            terms,
        };
        t.push(server, cq, field("answer")?);
    }
    Ok(t)
}

/// Client-side progress: decoded demanded symbols and the query values of
/// every processed stage, kept for donor lookups.
#[derive(Debug, Clone)]
pub struct DecoderState {
    p: usize,
    decoded: Vec<BTreeMap<usize, u64>>,
    stage_values: BTreeMap<(usize, usize, usize), Vec<u64>>,
}

impl DecoderState {
    pub fn new(p: usize) -> Self {
        DecoderState {
            p,
            decoded: vec![BTreeMap::new(); p],
            stage_values: BTreeMap::new(),
        }
    }

    /// Decoded alternated symbols of demanded message θ.
    pub fn demanded(&self, theta: usize) -> &BTreeMap<usize, u64> {
        &self.decoded[theta]
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn decoded_count(&self) -> usize {
        self.decoded.iter().map(|m| m.len()).sum()
    }

    pub fn processed(&self, server: usize, round: usize, stage: usize) -> bool {
        self.stage_values.contains_key(&(server, round, stage))
    }
}

/// Donor-side value of the non-demanded block of `query`: the donor stage
/// asked the same subset with the same indices, so the block equals the
/// stored donor value up to one sign, read off by comparing term signs.
fn side_block(
    dec: &DecoderState,
    plan: &QueryPlan,
    stage: &Stage,
    query: &crate::planner::QuerySpec,
    gf: Gf,
) -> Result<u64, ProtocolError> {
    let t_set: Vec<usize> = query.subset.iter().copied().filter(|&x| x < plan.p).collect();
    let side: Vec<usize> = query.subset.iter().copied().filter(|&x| x >= plan.p).collect();
    if side.is_empty() {
        return Ok(0);
    }
    let donor_ref = stage.donors[&t_set];
    let donor = plan.stage(donor_ref);
    let key = (donor_ref.server, donor_ref.round, donor_ref.stage);
    let donor_vals = dec
        .stage_values
        .get(&key)
        .ok_or_else(|| ProtocolError::MissingDonor {
            detail: format!(
                "stage (server {}, round {}, stage {}) consumed before it was decoded",
                donor_ref.server + 1,
                donor_ref.round,
                donor_ref.stage + 1
            ),
        })?;
    let pos = donor
        .queries
        .iter()
        .position(|q| q.subset == side)
        .expect("a donor stage sweeps every subset of its round");
    let donor_query = &donor.queries[pos];
    let mut eps: i8 = 0;
    for &x in &side {
        let ct = query.terms.iter().find(|t| t.label == x).unwrap();
        let dt = donor_query.terms.iter().find(|t| t.label == x).unwrap();
        debug_assert_eq!(ct.index, dt.index, "donor closure fixes the indices");
        let e = ct.sign * dt.sign;
        assert!(
            eps == 0 || eps == e,
            "sign consistency violated between consumer and donor"
        );
        eps = e;
    }
    let v = donor_vals[pos];
    Ok(if eps < 0 { gf.neg(v) } else { v })
}

/// Process one stage: rebuild the useless values, eliminate the redundant
/// queries, invert the square system for the rest, peel side information off
/// every informative value, and store the full value vector for later donors.
pub fn decode_stage(
    dec: &mut DecoderState,
    answers: &[u64],
    plan: &QueryPlan,
    stage: &Stage,
    basis: &RedundancyBasis,
    g: &MdsMatrix,
) -> Result<(), ProtocolError> {
    let key = (stage.server, stage.round, stage.stage_idx);
    if dec.stage_values.contains_key(&key) {
        return Err(ProtocolError::StageReplayed {
            server: stage.server,
            round: stage.round,
            stage: stage.stage_idx,
        });
    }
    if answers.len() != g.r() {
        return Err(ProtocolError::AnswerCount {
            got: answers.len(),
            want: g.r(),
        });
    }
    assert_eq!(
        basis.q1.len(),
        g.r(),
        "downloads per stage equal the non-reconstructable query count"
    );
    let gf = Gf::new(plan.q)?;
    let mut vals: Vec<Option<u64>> = vec![None; stage.queries.len()];

    // Useless queries: demanded symbols are already decoded, the rest is a
    // donor block.
    for &pos in &basis.q2 {
        let query = &stage.queries[pos];
        let mut acc = side_block(dec, plan, stage, query, gf)?;
        for t in query.terms.iter().filter(|t| t.label < plan.p) {
            let v = dec.decoded[t.label]
                .get(&t.index)
                .copied()
                .ok_or_else(|| ProtocolError::MissingDonor {
                    detail: format!(
                        "demanded symbol (message {}, index {}) read before decode",
                        t.label + 1,
                        t.index + 1
                    ),
                })?;
            acc = if t.sign < 0 {
                gf.sub(acc, v)
            } else {
                gf.add(acc, v)
            };
        }
        vals[pos] = Some(acc);
    }

    // q_f − (G₂ + G₃B)·q₂ = (G₁ + G₃A)·q₁, a square exact system.
    let order = encode_order(plan, stage);
    let mut col_of = vec![0usize; order.len()];
    for (col, &qi) in order.iter().enumerate() {
        col_of[qi] = col;
    }
    let r = g.r();
    let gm = g.matrix();
    let m_eff = effective_system(plan, stage, basis, g)?;
    let mut rhs: Vec<u64> = answers.to_vec();
    for (j2, &pos2) in basis.q2.iter().enumerate() {
        let v2 = vals[pos2].expect("just computed");
        for row in 0..r {
            let mut gc = gm[(row, col_of[pos2])];
            for (t3, &pos3) in basis.q3.iter().enumerate() {
                gc = gf.add(gc, gf.mul(gm[(row, col_of[pos3])], basis.b[(t3, j2)]));
            }
            rhs[row] = gf.sub(rhs[row], gf.mul(gc, v2));
        }
    }
    let inv = m_eff.inverse().ok_or(ProtocolError::SingularSystem {
        server: stage.server,
        round: stage.round,
        stage: stage.stage_idx,
    })?;
    for (j, &pos) in basis.q1.iter().enumerate() {
        let mut v = 0u64;
        for (col, &b) in rhs.iter().enumerate() {
            v = gf.add(v, gf.mul(inv[(j, col)], b));
        }
        vals[pos] = Some(v);
    }
    for (t3, &pos3) in basis.q3.iter().enumerate() {
        let mut v = 0u64;
        for (j, &pos1) in basis.q1.iter().enumerate() {
            v = gf.add(v, gf.mul(basis.a[(t3, j)], vals[pos1].unwrap()));
        }
        for (j, &pos2) in basis.q2.iter().enumerate() {
            v = gf.add(v, gf.mul(basis.b[(t3, j)], vals[pos2].unwrap()));
        }
        vals[pos3] = Some(v);
    }

    // Every informative value minus its side block is one fresh symbol.
    for query in stage.queries.iter().filter(|q| q.class == QueryClass::Informative) {
        let pos = stage
            .queries
            .iter()
            .position(|q| q.subset == query.subset)
            .unwrap();
        let side = side_block(dec, plan, stage, query, gf)?;
        let t = query
            .terms
            .iter()
            .find(|t| t.label < plan.p)
            .expect("informative queries hold one demanded term");
        let mut u = gf.sub(vals[pos].unwrap(), side);
        if t.sign < 0 {
            u = gf.neg(u);
        }
        let prev = dec.decoded[t.label].insert(t.index, u);
        debug_assert!(prev.is_none() || prev == Some(u), "fresh symbols decode once");
    }

    dec.stage_values
        .insert(key, vals.into_iter().map(|v| v.unwrap()).collect());
    Ok(())
}

/// A finished end-to-end run.
#[derive(Debug, Clone)]
pub struct ProtocolRun {
    /// Demanded messages in demand order, original symbol columns.
    pub decoded: FieldMatrix,
    pub transcript: Transcript,
    pub summary: PlanSummary,
    pub plan: QueryPlan,
    pub seed: u64,
}

/// Full pipeline on simulated servers: relabel, plan, sign, shuffle, encode,
/// answer, decode, and verify against ground truth. Random file contents and
/// all client randomness derive from the seed.
pub fn run_protocol(
    lib: &MessageLibrary,
    demand: &DemandSet,
    n: usize,
    q: u64,
    seed: u64,
) -> Result<ProtocolRun, ProtocolError> {
    if q != lib.q() {
        return Err(PlanError::BadParams(format!(
            "field size {q} disagrees with the library's {}",
            lib.q()
        ))
        .into());
    }
    let summary = plan_summary(lib.m(), lib.k(), demand.p(), n)?;
    let need = min_field_size(&summary);
    if q < need {
        return Err(PlanError::BadParams(format!(
            "field size {q} below the widest stage's requirement {need}"
        ))
        .into());
    }
    let rlib = relabel(lib, demand)?;
    let counts = stage_counts(lib.m(), demand.p(), n)?;
    let mut plan = build_query_plan(&rlib, &counts, n)?;
    let mut tape = RandomTape::from_seed(seed, plan.l);
    assign_signs(&mut plan, &mut tape);
    shuffle_plan(&mut plan, &mut tape);

    let gf = lib.gf();
    let mut files = FieldMatrix::zeros(gf, lib.k(), plan.l);
    for r in 0..lib.k() {
        for c in 0..plan.l {
            files[(r, c)] = tape.draw_symbol(q);
        }
    }
    let servers: Vec<ServerState> = (0..n)
        .map(|id| ServerState::new(id, lib, &files))
        .collect::<Result<_, _>>()?;

    // Client-side preparation: every stage's redundancy structure and its
    // compression matrix, the lowest variant that its own signs can invert.
    let rounds = plan.rounds();
    let mut bases: BTreeMap<(usize, usize, usize), RedundancyBasis> = BTreeMap::new();
    let mut mats: BTreeMap<(usize, usize, usize), MdsMatrix> = BTreeMap::new();
    for stage in plan.all_stages() {
        let basis = stage_redundancy_basis(stage, &rlib)?;
        let (g, _) = choose_stage_mds(&plan, stage, &basis)?;
        let key = (stage.server, stage.round, stage.stage_idx);
        bases.insert(key, basis);
        mats.insert(key, g);
    }

    let mut transcript = Transcript::new(n);
    for server in 0..n {
        for &(round0, sidx) in &plan.dump_order[server] {
            let stage = &plan.stages[server][round0][sidx];
            let g = &mats[&(server, round0 + 1, sidx)];
            let coded = encode_stage(&plan, stage, g, &tape)?;
            for cq in coded {
                let ans = servers[server].answer(&cq)?;
                transcript.push(server, cq, ans);
            }
        }
    }
    if transcript.total != summary.d {
        return Err(ProtocolError::DownloadMismatch {
            got: transcript.total,
            want: summary.d,
        });
    }

    let answers = transcript.answers_by_stage();
    let mut dec = DecoderState::new(plan.p);
    for round in 1..=rounds {
        for server in 0..n {
            for stage in &plan.stages[server][round - 1] {
                let key = (server, round, stage.stage_idx);
                let stage_answers = answers
                    .get(&key)
                    .ok_or_else(|| ProtocolError::MissingDonor {
                        detail: format!("no answers for server {server} round {round}"),
                    })?;
                decode_stage(&mut dec, stage_answers, &plan, stage, &bases[&key], &mats[&key])?;
            }
        }
    }

    // Undo σ and π, then compare against the directly computed demand rows.
    let mut decoded = FieldMatrix::zeros(gf, plan.p, plan.l);
    for theta in 0..plan.p {
        for idx in 0..plan.l {
            let u = dec.decoded[theta]
                .get(&idx)
                .copied()
                .ok_or_else(|| ProtocolError::MissingDonor {
                    detail: format!(
                        "demanded message {} never decoded index {}",
                        theta + 1,
                        idx + 1
                    ),
                })?;
            let v = if tape.sigma(idx) < 0 { gf.neg(u) } else { u };
            decoded[(theta, tape.pi(idx))] = v;
        }
    }
    for (t, &orig) in demand.indices().iter().enumerate() {
        let coeffs = lib.coeff_row(orig);
        for col in 0..plan.l {
            let mut truth = 0u64;
            for (j, &c) in coeffs.iter().enumerate() {
                truth = gf.add(truth, gf.mul(c, files[(j, col)]));
            }
            if decoded[(t, col)] != truth {
                return Err(ProtocolError::DecodeMismatch {
                    label: orig,
                    col,
                });
            }
        }
    }

    Ok(ProtocolRun {
        decoded,
        transcript,
        summary,
        plan,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_library;
    use num::{BigInt, BigRational};

    fn golden_lib() -> MessageLibrary {
        build_library(5, 3, 19, &[vec![1, 1, 0], vec![0, 1, 1]]).unwrap()
    }

    #[test]
    fn server_answer_basics() {
        let lib = golden_lib();
        let gf = lib.gf();
        let files = FieldMatrix::zeros(gf, 3, 4);
        let server = ServerState::new(0, &lib, &files).unwrap();
        let cq = CodedQuery {
            server: 0,
            round: 1,
            stage: 0,
            row: 0,
            terms: vec![(0, 1, 5), (4, 2, 7)],
        };
        assert_eq!(server.answer(&cq).unwrap(), 0);

        let mut files = FieldMatrix::zeros(gf, 3, 4);
        files[(1, 2)] = 9;
        let server = ServerState::new(0, &lib, &files).unwrap();
        let single = CodedQuery {
            server: 0,
            round: 1,
            stage: 0,
            row: 0,
            terms: vec![(1, 2, 1)],
        };
        assert_eq!(server.answer(&single).unwrap(), 9);
        // e = b + c has 9 at column 2 too.
        let e = CodedQuery {
            terms: vec![(4, 2, 1)],
            ..single.clone()
        };
        assert_eq!(server.answer(&e).unwrap(), 9);
        let oob = CodedQuery {
            terms: vec![(1, 9, 1)],
            ..single
        };
        assert!(matches!(
            server.answer(&oob),
            Err(ProtocolError::IndexOutOfRange { index: 9, .. })
        ));
    }

    #[test]
    fn answers_scale_with_files() {
        let lib = golden_lib();
        let gf = lib.gf();
        let mut tape = RandomTape::from_seed(5, 10);
        let mut files = FieldMatrix::zeros(gf, 3, 10);
        for r in 0..3 {
            for c in 0..10 {
                files[(r, c)] = tape.draw_symbol(19);
            }
        }
        let mut scaled = files.clone();
        for r in 0..3 {
            for c in 0..10 {
                scaled[(r, c)] = gf.mul(7, files[(r, c)]);
            }
        }
        let s1 = ServerState::new(0, &lib, &files).unwrap();
        let s2 = ServerState::new(0, &lib, &scaled).unwrap();
        let cq = CodedQuery {
            server: 0,
            round: 2,
            stage: 0,
            row: 0,
            terms: vec![(0, 1, 3), (3, 4, 11), (4, 9, 2)],
        };
        assert_eq!(
            s2.answer(&cq).unwrap(),
            gf.mul(7, s1.answer(&cq).unwrap())
        );
    }

    #[test]
    fn golden_run_decodes_exactly() {
        let lib = golden_lib();
        let demand = DemandSet::new(vec![0, 1], &lib).unwrap();
        let run = run_protocol(&lib, &demand, 2, 19, 42).unwrap();
        assert_eq!(run.transcript.total, 184);
        assert_eq!(run.summary.l, 68);
        assert_eq!(
            run.summary.r2,
            BigRational::new(BigInt::from(17), BigInt::from(23))
        );
        assert_eq!(run.decoded.rows(), 2);
        assert_eq!(run.decoded.cols(), 68);
    }

    #[test]
    fn dependent_demand_decodes_exactly() {
        let lib = golden_lib();
        let demand = DemandSet::new(vec![3, 4], &lib).unwrap();
        let run = run_protocol(&lib, &demand, 2, 19, 7).unwrap();
        assert_eq!(run.transcript.total, 184);
        // run_protocol verified the decode internally; spot-check one value
        // against d = a + b recomputed from nothing but the transcript size
        // invariant having held and a fresh run with the same seed.
        let again = run_protocol(&lib, &demand, 2, 19, 7).unwrap();
        assert_eq!(run.decoded, again.decoded);
        assert_eq!(run.transcript, again.transcript);
    }

    #[test]
    fn all_independent_library_runs() {
        let lib = build_library(4, 4, 13, &[]).unwrap();
        let demand = DemandSet::new(vec![1, 3], &lib).unwrap();
        let run = run_protocol(&lib, &demand, 2, 13, 3).unwrap();
        assert_eq!(run.summary.d, 64);
        assert_eq!(run.summary.l, 20);
        assert_eq!(
            run.summary.r2,
            BigRational::new(BigInt::from(5), BigInt::from(8))
        );
    }

    #[test]
    fn field_size_is_validated() {
        let lib = build_library(5, 3, 17, &[vec![1, 1, 0], vec![0, 1, 1]]).unwrap();
        let demand = DemandSet::new(vec![0, 1], &lib).unwrap();
        // Widest stage needs 18 points; F_17 cannot host the round-2 matrix.
        assert!(matches!(
            run_protocol(&lib, &demand, 2, 17, 1),
            Err(ProtocolError::Plan(PlanError::BadParams(_)))
        ));
        assert!(matches!(
            run_protocol(&lib, &demand, 2, 19, 1),
            Err(ProtocolError::Plan(PlanError::BadParams(_)))
        ));
    }

    /// Decode the golden instance step by step with the trivial tape: after
    /// round 1 and the first round-2 stage, the demanded indices 25..27
    /// (1-based) of both messages must be out, matching the worked tables.
    #[test]
    fn stage_stepping_matches_worked_decode() {
        let lib = golden_lib();
        let demand = DemandSet::new(vec![0, 1], &lib).unwrap();
        let rlib = relabel(&lib, &demand).unwrap();
        let counts = stage_counts(5, 2, 2).unwrap();
        let mut plan = build_query_plan(&rlib, &counts, 2).unwrap();
        let mut tape = RandomTape::identity(plan.l);
        assign_signs(&mut plan, &mut tape);
        let gf = lib.gf();
        let mut fill = RandomTape::from_seed(99, plan.l);
        let mut files = FieldMatrix::zeros(gf, 3, plan.l);
        for r in 0..3 {
            for c in 0..plan.l {
                files[(r, c)] = fill.draw_symbol(19);
            }
        }
        let servers: Vec<ServerState> = (0..2)
            .map(|id| ServerState::new(id, &lib, &files))
            .collect::<Result<_, _>>()
            .unwrap();
        let mut dec = DecoderState::new(2);
        let process = |dec: &mut DecoderState, server: usize, round: usize, sidx: usize| {
            let stage = &plan.stages[server][round - 1][sidx];
            let basis = stage_redundancy_basis(stage, &rlib).unwrap();
            let (g, _) = choose_stage_mds(&plan, stage, &basis).unwrap();
            let coded = encode_stage(&plan, stage, &g, &tape).unwrap();
            let answers: Vec<u64> = coded
                .iter()
                .map(|cq| servers[server].answer(cq).unwrap())
                .collect();
            decode_stage(dec, &answers, &plan, stage, &basis, &g)
        };
        for server in 0..2 {
            for sidx in 0..12 {
                process(&mut dec, server, 1, sidx).unwrap();
            }
        }
        assert_eq!(dec.decoded_count(), 2 * 24);
        process(&mut dec, 0, 2, 0).unwrap();
        for theta in 0..2 {
            for idx in 24..27 {
                let got = dec.demanded(theta).get(&idx).copied().unwrap();
                assert_eq!(got, files[(theta, idx)], "identity tape: u = W");
            }
        }
        // Replay is refused.
        assert!(matches!(
            process(&mut dec, 0, 2, 0),
            Err(ProtocolError::StageReplayed { .. })
        ));
        // A stage whose donors were skipped is refused.
        assert!(matches!(
            process(&mut dec, 0, 4, 0),
            Err(ProtocolError::MissingDonor { .. })
        ));
    }

    #[test]
    fn transcript_round_trips() {
        let lib = golden_lib();
        let demand = DemandSet::new(vec![0, 2], &lib).unwrap();
        let run = run_protocol(&lib, &demand, 2, 19, 11).unwrap();
        let text = run.transcript.dump();
        let parsed = parse_transcript(&text, 2).unwrap();
        assert_eq!(parsed, run.transcript);
        assert!(parse_transcript("{\"server\": 1}", 2).is_err());
        assert!(parse_transcript("not json", 2).is_err());
    }
}
