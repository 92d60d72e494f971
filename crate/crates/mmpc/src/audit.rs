//! Machine checks of the structural and distributional privacy claims.
//!
//! Three layers, weakest claim last: exact structural invariants of a plan
//! (subset coverage, shared companion indices, per-server index
//! disjointness, redundancy rank), an explicit sign re-randomization mapping
//! one demand's signed plan onto another's, and a sampling test comparing
//! what each server observes across demands. Privacy is audited, not
//! proven: the mapping is the strongest check, the sampling test only a
//! necessary condition.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::coding::{
    choose_stage_mds, encode_stage, stage_ground_matrix, stage_redundancy_basis, CodedQuery,
    CodingError,
};
use crate::combin::{binom, k_subsets};
use crate::gf::FieldMatrix;
use crate::model::{relabel, DemandSet, MessageLibrary, ModelError, RandomTape, RelabeledLibrary};
use crate::planner::{
    assign_signs, build_query_plan, shuffle_plan, stage_counts, PlanError, QueryPlan, Stage,
};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error("plans do not line up: {0}")]
    PlanMismatch(String),
    #[error("no sign mapping at server {server}, round {round}, stage {stage}: query on labels {subset:?} is inconsistent")]
    NoMapping {
        server: usize,
        round: usize,
        stage: usize,
        /// 1-based original labels of the first query that cannot be matched.
        subset: Vec<usize>,
    },
    #[error("shape test needs at least 1000 samples, got {got}")]
    InsufficientSamples { got: usize },
    #[error("bad audit parameters: {0}")]
    BadParams(String),
}

/// Outcome of one structural check over a whole plan.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub scope: String,
    pub pass: bool,
    pub detail: String,
}

fn plan_scope(plan: &QueryPlan) -> String {
    format!(
        "m={} k={} p={} n={}",
        plan.m, plan.k, plan.p, plan.n
    )
}

fn verdict(check: &str, plan: &QueryPlan, violations: Vec<String>) -> CheckReport {
    let detail = if violations.is_empty() {
        "ok".to_string()
    } else {
        let mut shown: Vec<String> = violations.iter().take(4).cloned().collect();
        if violations.len() > 4 {
            shown.push(format!("+{} more", violations.len() - 4));
        }
        shown.join("; ")
    };
    CheckReport {
        check: check.to_string(),
        scope: plan_scope(plan),
        pass: detail == "ok",
        detail,
    }
}

fn original_subset(plan: &QueryPlan, subset: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = subset.iter().map(|&l| plan.original_label(l)).collect();
    v.sort_unstable();
    v
}

fn show_labels(labels: &[usize]) -> String {
    let inner: Vec<String> = labels.iter().map(|&l| (l + 1).to_string()).collect();
    format!("[{}]", inner.join(","))
}

/// Every stage of round i must query each i-subset of the message set
/// exactly once; this is what makes a stage look the same no matter the
/// demand.
pub fn check_subset_coverage(plan: &QueryPlan) -> CheckReport {
    let universe: Vec<usize> = (0..plan.m).collect();
    let mut violations = Vec::new();
    for stage in plan.all_stages() {
        let mut seen: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for query in &stage.queries {
            *seen
                .entry(original_subset(plan, &query.subset))
                .or_insert(0) += 1;
        }
        for want in k_subsets(&universe, stage.round) {
            let got = seen.remove(&want).unwrap_or(0);
            if got != 1 {
                violations.push(format!(
                    "server {} round {} stage {}: subset {} appears {} times",
                    stage.server + 1,
                    stage.round,
                    stage.stage_idx + 1,
                    show_labels(&want),
                    got
                ));
            }
        }
        for (extra, got) in seen {
            violations.push(format!(
                "server {} round {} stage {}: unexpected subset {} ({}x)",
                stage.server + 1,
                stage.round,
                stage.stage_idx + 1,
                show_labels(&extra),
                got
            ));
        }
    }
    verdict("subset-coverage", plan, violations)
}

/// Within a stage, the symbol index a label carries may depend only on the
/// other labels of its query: for any companion set S and any x, y outside
/// S, the queries on S∪{x} and S∪{y} use one shared index. Servers can
/// therefore not tell which label of a query is the interesting one.
pub fn check_index_structure(plan: &QueryPlan) -> CheckReport {
    let mut violations = Vec::new();
    for stage in plan.all_stages() {
        let mut first: BTreeMap<Vec<usize>, (usize, Vec<usize>)> = BTreeMap::new();
        for query in &stage.queries {
            let subset = original_subset(plan, &query.subset);
            for t in &query.terms {
                let x = plan.original_label(t.label);
                let companions: Vec<usize> =
                    subset.iter().copied().filter(|&l| l != x).collect();
                match first.get(&companions) {
                    Some(&(idx, ref witness)) if idx != t.index => {
                        violations.push(format!(
                            "server {} round {} stage {}: label {} in query {} has index {}, but {} carries index {} for the same companions",
                            stage.server + 1,
                            stage.round,
                            stage.stage_idx + 1,
                            x + 1,
                            show_labels(&subset),
                            t.index + 1,
                            show_labels(witness),
                            idx + 1
                        ));
                    }
                    Some(_) => {}
                    None => {
                        first.insert(companions, (t.index, subset.clone()));
                    }
                }
            }
        }
    }
    verdict("index-structure", plan, violations)
}

/// Per server and per message label, no symbol index may recur across
/// stages; a recurrence would correlate two stages and skew the view away
/// from one-fresh-symbol-per-slot.
pub fn check_stage_index_disjointness(plan: &QueryPlan) -> CheckReport {
    let mut violations = Vec::new();
    for server in 0..plan.n {
        let mut owner: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        for stage in plan.server_stages(server) {
            let mut here: BTreeSet<(usize, usize)> = BTreeSet::new();
            for query in &stage.queries {
                for t in &query.terms {
                    here.insert((plan.original_label(t.label), t.index));
                }
            }
            for key in here {
                match owner.get(&key) {
                    Some(&(round, sidx)) => violations.push(format!(
                        "server {}: label {} index {} appears in round {} stage {} and again in round {} stage {}",
                        server + 1,
                        key.0 + 1,
                        key.1 + 1,
                        round,
                        sidx + 1,
                        stage.round,
                        stage.stage_idx + 1
                    )),
                    None => {
                        owner.insert(key, (stage.round, stage.stage_idx));
                    }
                }
            }
        }
    }
    verdict("index-disjointness", plan, violations)
}

/// Rank law: a stage of round i spans exactly C(M,i) − C(M−K,i) ground
/// dimensions, and the queries that drop out are exactly the side
/// information over dependent labels.
pub fn check_redundancy_rank(plan: &QueryPlan, rlib: &RelabeledLibrary) -> CheckReport {
    let mut violations = Vec::new();
    for stage in plan.all_stages() {
        let i = stage.round;
        let want = (binom(plan.m, i) - binom(plan.m - plan.k, i)) as usize;
        let ground = stage_ground_matrix(stage, rlib);
        let rank = ground.rank();
        let at = format!(
            "server {} round {} stage {}",
            stage.server + 1,
            i,
            stage.stage_idx + 1
        );
        if rank != want {
            violations.push(format!("{at}: rank {rank}, expected {want}"));
        }
        match stage_redundancy_basis(stage, rlib) {
            Err(err) => violations.push(format!("{at}: {err}")),
            Ok(basis) => {
                let dep = binom(plan.m - plan.k, i) as usize;
                if basis.q3.len() != dep {
                    violations.push(format!(
                        "{at}: {} dependent side queries, expected {dep}",
                        basis.q3.len()
                    ));
                }
                let keep: Vec<Vec<u64>> = basis
                    .q1
                    .iter()
                    .chain(basis.q2.iter())
                    .map(|&pos| ground.row(pos).to_vec())
                    .collect();
                match FieldMatrix::from_rows(rlib.gf(), &keep) {
                    Ok(mat) if mat.rank() == keep.len() => {}
                    Ok(mat) => violations.push(format!(
                        "{at}: non-redundant queries have rank {} of {}, so the redundant set is larger than the dependent side queries",
                        mat.rank(),
                        keep.len()
                    )),
                    Err(err) => violations.push(format!("{at}: {err}")),
                }
            }
        }
    }
    verdict("redundancy-rank", plan, violations)
}

/// All four structural checks, in report order.
pub fn structural_checks(plan: &QueryPlan, rlib: &RelabeledLibrary) -> Vec<CheckReport> {
    vec![
        check_subset_coverage(plan),
        check_index_structure(plan),
        check_stage_index_disjointness(plan),
        check_redundancy_rank(plan, rlib),
    ]
}

/// Delete the last query of the last-round stage on server 1. Trips
/// subset coverage.
pub fn mutate_drop_query(plan: &mut QueryPlan) -> String {
    let label_map = plan.label_map.clone();
    let last = plan.rounds() - 1;
    let stage = &mut plan.stages[0][last][0];
    let spec = stage.queries.pop().expect("stage has queries");
    let gone = stage.queries.len();
    stage.wire_perm.retain(|&qi| qi != gone);
    let mut subset: Vec<usize> = spec.subset.iter().map(|&l| label_map[l]).collect();
    subset.sort_unstable();
    format!(
        "dropped query {} from server 1, round {}, stage 1",
        show_labels(&subset),
        last + 1
    )
}

/// Swap the two symbol indices inside one round-2 query on server 1. Trips
/// the companion-index structure.
pub fn mutate_swap_indices(plan: &mut QueryPlan) -> String {
    let stage = &mut plan.stages[0][1][0];
    let query = &mut stage.queries[0];
    let (a, b) = (query.terms[0].index, query.terms[1].index);
    query.terms[0].index = b;
    query.terms[1].index = a;
    format!("swapped indices {} and {} inside one round-2 query on server 1", a + 1, b + 1)
}

/// Reuse a round-1 symbol index of server 1 inside its round 2. Trips
/// per-server index disjointness.
pub fn mutate_dup_donor(plan: &mut QueryPlan) -> String {
    let label_map = plan.label_map.clone();
    let (label, idx) = {
        let q = &plan.stages[0][0][0].queries[0];
        (q.terms[0].label, q.terms[0].index)
    };
    let stage = &mut plan.stages[0][1][0];
    for query in stage.queries.iter_mut() {
        for t in query.terms.iter_mut() {
            if t.label == label {
                let old = t.index;
                t.index = idx;
                return format!(
                    "server 1 now reuses index {} for label {} in round 2 (was {})",
                    idx + 1,
                    label_map[label] + 1,
                    old + 1
                );
            }
        }
    }
    unreachable!("a round-2 stage touches every label");
}

/// Reset every wire ordering to the canonical layout, as if the shuffle
/// step never ran. The structural checks still pass; the distributional
/// test is what catches this.
pub fn mutate_unshuffle(plan: &mut QueryPlan) -> String {
    for server in 0..plan.n {
        plan.dump_order[server] = plan.stages[server]
            .iter()
            .enumerate()
            .flat_map(|(r, v)| (0..v.len()).map(move |s| (r, s)))
            .collect();
        for round0 in 0..plan.stages[server].len() {
            for stage in plan.stages[server][round0].iter_mut() {
                stage.wire_perm.clear();
                for query in stage.queries.iter_mut() {
                    query.term_perm.clear();
                }
            }
        }
    }
    plan.shuffled = false;
    "wire shuffling disabled; canonical order exposed".to_string()
}

/// Per-stage witness that one demand's signed plan explains another's.
#[derive(Debug, Clone)]
pub struct StageSignMapping {
    pub server: usize,
    pub round: usize,
    pub stage: usize,
    /// Second plan's symbol index -> first plan's symbol index.
    pub iota: BTreeMap<usize, usize>,
    /// Second plan's symbol index -> relative alternation sign.
    pub sigma: BTreeMap<usize, i8>,
    /// Query subset (original labels, sorted) -> whole-query flip.
    pub chi: BTreeMap<Vec<usize>, i8>,
    /// Connected components of the constraint graph; the stage has exactly
    /// 2^components satisfying assignments.
    pub components: usize,
}

impl StageSignMapping {
    pub fn solutions(&self) -> Option<u128> {
        1u128.checked_shl(self.components as u32)
    }
}

#[derive(Debug, Clone)]
pub struct SignMapping {
    pub stages: Vec<StageSignMapping>,
}

impl SignMapping {
    /// True when every stage pins its assignment up to one global negation.
    pub fn unique_up_to_negation(&self) -> bool {
        self.stages.iter().all(|s| s.components == 1)
    }
}

/// Query view of one stage keyed by original labels:
/// subset -> label -> (index, folded sign).
type StageView = BTreeMap<Vec<usize>, BTreeMap<usize, (usize, i8)>>;

fn view_stage(plan: &QueryPlan, stage: &Stage) -> Result<StageView, AuditError> {
    let mut out = StageView::new();
    for query in &stage.queries {
        let key = original_subset(plan, &query.subset);
        let mut terms = BTreeMap::new();
        for t in &query.terms {
            terms.insert(plan.original_label(t.label), (t.index, t.sign));
        }
        if out.insert(key.clone(), terms).is_some() {
            return Err(AuditError::PlanMismatch(format!(
                "duplicate query subset {} in a stage",
                show_labels(&key)
            )));
        }
    }
    Ok(out)
}

/// Index of each companion set; errors if a stage breaks the shared-index
/// structure.
fn companion_indices(view: &StageView) -> Result<BTreeMap<Vec<usize>, usize>, String> {
    let mut f = BTreeMap::new();
    for (subset, terms) in view {
        for (&x, &(idx, _)) in terms {
            let companions: Vec<usize> = subset.iter().copied().filter(|&l| l != x).collect();
            match f.get(&companions) {
                Some(&prev) if prev != idx => {
                    return Err(format!(
                        "label {} in query {} has index {}, companions elsewhere use {}",
                        x + 1,
                        show_labels(subset),
                        idx + 1,
                        prev + 1
                    ))
                }
                _ => {
                    f.insert(companions, idx);
                }
            }
        }
    }
    Ok(f)
}

fn no_mapping(stage: &Stage, subset: &[usize]) -> AuditError {
    AuditError::NoMapping {
        server: stage.server + 1,
        round: stage.round,
        stage: stage.stage_idx + 1,
        subset: subset.iter().map(|&l| l + 1).collect(),
    }
}

fn stage_mapping(
    plan1: &QueryPlan,
    st1: &Stage,
    plan2: &QueryPlan,
    st2: &Stage,
) -> Result<StageSignMapping, AuditError> {
    let v1 = view_stage(plan1, st1)?;
    let v2 = view_stage(plan2, st2)?;
    if v1.keys().ne(v2.keys()) {
        return Err(AuditError::PlanMismatch(format!(
            "stage (server {}, round {}, stage {}) covers different subsets in the two plans",
            st1.server + 1,
            st1.round,
            st1.stage_idx + 1
        )));
    }
    let f1 = companion_indices(&v1).map_err(AuditError::PlanMismatch)?;
    let f2 = companion_indices(&v2).map_err(AuditError::PlanMismatch)?;

    // The index relabeling must be a bijection on each side.
    for f in [&f1, &f2] {
        let mut seen: BTreeMap<usize, &Vec<usize>> = BTreeMap::new();
        for (s, &idx) in f {
            if let Some(other) = seen.insert(idx, s) {
                let witness = v2
                    .keys()
                    .find(|subset| s.iter().all(|l| subset.contains(l)))
                    .cloned()
                    .unwrap_or_else(|| other.clone());
                return Err(no_mapping(st1, &witness));
            }
        }
    }
    let iota: BTreeMap<usize, usize> = f2.iter().map(|(s, &idx)| (idx, f1[s])).collect();

    // Constraint graph: chi(query) * sigma(companions) must equal the
    // product of the two plans' folded signs on every term. BFS fixes a
    // seed per component and checks each edge from both endpoints.
    let mut adj_q: BTreeMap<&Vec<usize>, Vec<(Vec<usize>, i8)>> = BTreeMap::new();
    let mut adj_s: BTreeMap<Vec<usize>, Vec<(&Vec<usize>, i8)>> = BTreeMap::new();
    for (subset, terms2) in &v2 {
        let terms1 = &v1[subset];
        for (&x, &(_, sign2)) in terms2 {
            let (_, sign1) = terms1[&x];
            let companions: Vec<usize> = subset.iter().copied().filter(|&l| l != x).collect();
            let d = sign1 * sign2;
            adj_q.entry(subset).or_default().push((companions.clone(), d));
            adj_s.entry(companions).or_default().push((subset, d));
        }
    }

    enum Node<'a> {
        Query(&'a Vec<usize>),
        Companions(Vec<usize>),
    }

    let mut chi: BTreeMap<Vec<usize>, i8> = BTreeMap::new();
    let mut sig: BTreeMap<Vec<usize>, i8> = BTreeMap::new();
    let mut components = 0usize;
    for seed in v2.keys() {
        if chi.contains_key(seed) {
            continue;
        }
        components += 1;
        chi.insert(seed.clone(), 1);
        let mut queue = VecDeque::new();
        queue.push_back(Node::Query(seed));
        while let Some(node) = queue.pop_front() {
            match node {
                Node::Query(subset) => {
                    let cq = chi[subset];
                    for (companions, d) in &adj_q[subset] {
                        let want = cq * d;
                        match sig.get(companions) {
                            Some(&have) if have != want => {
                                return Err(no_mapping(st1, subset))
                            }
                            Some(_) => {}
                            None => {
                                sig.insert(companions.clone(), want);
                                queue.push_back(Node::Companions(companions.clone()));
                            }
                        }
                    }
                }
                Node::Companions(companions) => {
                    let cs = sig[&companions];
                    for &(subset, d) in &adj_s[&companions] {
                        let want = cs * d;
                        match chi.get(subset) {
                            Some(&have) if have != want => {
                                return Err(no_mapping(st1, subset))
                            }
                            Some(_) => {}
                            None => {
                                chi.insert(subset.clone(), want);
                                queue.push_back(Node::Query(subset));
                            }
                        }
                    }
                }
            }
        }
    }

    let sigma: BTreeMap<usize, i8> = f2.iter().map(|(s, &idx)| (idx, sig[s])).collect();
    Ok(StageSignMapping {
        server: st1.server,
        round: st1.round,
        stage: st1.stage_idx,
        iota,
        sigma,
        chi,
        components,
    })
}

/// Search for the re-randomization that turns `plan2`'s signed queries into
/// `plan1`'s: per stage, an index relabeling, a per-index alternation sign,
/// and per-query flips. Success for every demand pair is the operational
/// privacy statement; the error names the first query that cannot be
/// explained.
pub fn find_sign_mapping(
    plan1: &QueryPlan,
    plan2: &QueryPlan,
) -> Result<SignMapping, AuditError> {
    if (plan1.m, plan1.k, plan1.p, plan1.n, plan1.q)
        != (plan2.m, plan2.k, plan2.p, plan2.n, plan2.q)
    {
        return Err(AuditError::PlanMismatch(
            "plans have different parameters".to_string(),
        ));
    }
    let mut stages = Vec::new();
    for server in 0..plan1.n {
        if plan1.stages[server].len() != plan2.stages[server].len() {
            return Err(AuditError::PlanMismatch(format!(
                "server {} has different round counts",
                server + 1
            )));
        }
        for round0 in 0..plan1.stages[server].len() {
            let (a, b) = (
                &plan1.stages[server][round0],
                &plan2.stages[server][round0],
            );
            if a.len() != b.len() {
                return Err(AuditError::PlanMismatch(format!(
                    "server {} round {} has {} stages vs {}",
                    server + 1,
                    round0 + 1,
                    a.len(),
                    b.len()
                )));
            }
            for (st1, st2) in a.iter().zip(b) {
                stages.push(stage_mapping(plan1, st1, plan2, st2)?);
            }
        }
    }
    Ok(SignMapping { stages })
}

/// What one feature of the transcript looks like across demand groups.
#[derive(Debug, Clone, Serialize)]
pub struct FeatureStat {
    /// 1-based server.
    pub server: usize,
    pub feature: String,
    pub bins: usize,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShapeReport {
    pub samples: usize,
    pub groups: usize,
    pub alpha: f64,
    pub threshold: f64,
    pub rejected: bool,
    pub features: Vec<FeatureStat>,
}

#[derive(Debug, Clone)]
pub struct ShapeOptions {
    pub samples: usize,
    pub seed: u64,
    /// Disable to model a client that skips the wire shuffle.
    pub shuffled: bool,
}

pub const SHAPE_FEATURES: [&str; 5] = [
    "term-count",
    "coefficient",
    "stage-width",
    "first-label",
    "label-profile",
];

/// Pearson chi-square over a category table, categories pooled below an
/// expected-count floor. Returns (statistic, degrees of freedom, bins).
fn chi_square_table(table: &BTreeMap<String, Vec<u64>>, groups: usize) -> (f64, usize, usize) {
    let mut kept: Vec<Vec<u64>> = Vec::new();
    let mut rare = vec![0u64; groups];
    let mut has_rare = false;
    for counts in table.values() {
        let pooled: u64 = counts.iter().sum();
        if pooled < 10 {
            for (acc, &c) in rare.iter_mut().zip(counts) {
                *acc += c;
            }
            has_rare = has_rare || pooled > 0;
        } else {
            kept.push(counts.clone());
        }
    }
    if has_rare {
        kept.push(rare);
    }
    let bins = kept.len();
    if bins < 2 || groups < 2 {
        return (0.0, 0, bins);
    }
    let col: Vec<u64> = (0..groups)
        .map(|g| kept.iter().map(|row| row[g]).sum())
        .collect();
    let grand: u64 = col.iter().sum();
    let mut stat = 0.0;
    let mut live_cols = 0usize;
    for &c in &col {
        if c > 0 {
            live_cols += 1;
        }
    }
    for row in &kept {
        let rt: u64 = row.iter().sum();
        for g in 0..groups {
            if col[g] == 0 {
                continue;
            }
            let expected = rt as f64 * col[g] as f64 / grand as f64;
            if expected > 0.0 {
                let observed = row[g] as f64;
                stat += (observed - expected) * (observed - expected) / expected;
            }
        }
    }
    let df = (bins - 1) * live_cols.saturating_sub(1);
    (stat, df, bins)
}

/// Sample transcripts under each demand and compare, per server, what the
/// server can see: term counts, coefficient values, per-stage symbol
/// footprints, wire ordering, and label profiles. One draw per sample and
/// feature keeps the observations independent, so the chi-square reference
/// distribution applies. A rejection falsifies privacy; acceptance is only
/// a necessary condition.
pub fn transcript_shape_test(
    lib: &MessageLibrary,
    n: usize,
    demands: &[Vec<usize>],
    opts: &ShapeOptions,
) -> Result<ShapeReport, AuditError> {
    if opts.samples < 1000 {
        return Err(AuditError::InsufficientSamples { got: opts.samples });
    }
    if demands.len() < 2 {
        return Err(AuditError::BadParams(
            "need at least two demand sets to compare".to_string(),
        ));
    }
    let groups = demands.len();
    let mut tables: BTreeMap<(usize, usize), BTreeMap<String, Vec<u64>>> = BTreeMap::new();
    let mut p_first = None;
    for (gi, wanted) in demands.iter().enumerate() {
        let demand = DemandSet::new(wanted.clone(), lib)?;
        match p_first {
            None => p_first = Some(demand.p()),
            Some(p) if p != demand.p() => {
                return Err(AuditError::BadParams(
                    "demand sets have different sizes".to_string(),
                ))
            }
            Some(_) => {}
        }
        let rlib = relabel(lib, &demand)?;
        let counts = stage_counts(lib.m(), demand.p(), n)?;
        let mut plan = build_query_plan(&rlib, &counts, n)?;
        let mut seeder = ChaCha20Rng::seed_from_u64(opts.seed);
        seeder.set_stream(0x7368_0000 + gi as u64);
        let mut picker = ChaCha20Rng::seed_from_u64(opts.seed);
        picker.set_stream(0x7069_0000 + gi as u64);
        for _ in 0..opts.samples {
            let mut tape = RandomTape::from_seed(seeder.next_u64(), plan.l);
            assign_signs(&mut plan, &mut tape);
            if opts.shuffled {
                shuffle_plan(&mut plan, &mut tape);
            }
            for server in 0..n {
                let mut rows: Vec<CodedQuery> = Vec::new();
                let mut widths: Vec<usize> = Vec::new();
                let mut profiles: Vec<String> = Vec::new();
                for &(round0, si) in &plan.dump_order[server] {
                    let stage = &plan.stages[server][round0][si];
                    let basis = stage_redundancy_basis(stage, &rlib)?;
                    let (g, _) = choose_stage_mds(&plan, stage, &basis)?;
                    let coded = encode_stage(&plan, stage, &g, &tape)?;
                    let mut keys: BTreeSet<(usize, usize)> = BTreeSet::new();
                    let mut by_label: BTreeMap<usize, u64> = BTreeMap::new();
                    for row in &coded {
                        for &(label, idx, _) in &row.terms {
                            keys.insert((label, idx));
                            *by_label.entry(label).or_insert(0) += 1;
                        }
                    }
                    widths.push(keys.len());
                    let mut label_counts: Vec<u64> = by_label.values().copied().collect();
                    label_counts.sort_unstable_by(|a, b| b.cmp(a));
                    let profile: Vec<String> =
                        label_counts.iter().map(|c| c.to_string()).collect();
                    profiles.push(profile.join("-"));
                    rows.extend(coded);
                }
                let term_total: usize = rows.iter().map(|r| r.terms.len()).sum();
                let pick_row = picker.gen_range(0..rows.len());
                let pick_term = picker.gen_range(0..term_total);
                let pick_width = picker.gen_range(0..widths.len());
                let pick_first = picker.gen_range(0..rows.len());
                let pick_profile = picker.gen_range(0..profiles.len());
                let coefficient = {
                    let mut left = pick_term;
                    let mut value = 0u64;
                    for row in &rows {
                        if left < row.terms.len() {
                            value = row.terms[left].2;
                            break;
                        }
                        left -= row.terms.len();
                    }
                    value
                };
                let observations: [String; 5] = [
                    rows[pick_row].terms.len().to_string(),
                    coefficient.to_string(),
                    widths[pick_width].to_string(),
                    rows[pick_first]
                        .terms
                        .first()
                        .map(|t| (t.0 + 1).to_string())
                        .unwrap_or_else(|| "0".to_string()),
                    profiles[pick_profile].clone(),
                ];
                for (fi, obs) in observations.into_iter().enumerate() {
                    let row = tables
                        .entry((server, fi))
                        .or_default()
                        .entry(obs)
                        .or_insert_with(|| vec![0; groups]);
                    row[gi] += 1;
                }
            }
        }
    }

    let threshold = 0.01 / (n * SHAPE_FEATURES.len()) as f64;
    let mut features = Vec::new();
    let mut rejected = false;
    for ((server, fi), table) in &tables {
        let (statistic, df, bins) = chi_square_table(table, groups);
        let p_value = if df == 0 {
            1.0
        } else {
            let dist = ChiSquared::new(df as f64).expect("positive df");
            1.0 - dist.cdf(statistic)
        };
        let reject = p_value < threshold;
        rejected |= reject;
        features.push(FeatureStat {
            server: server + 1,
            feature: SHAPE_FEATURES[*fi].to_string(),
            bins,
            statistic,
            df,
            p_value,
            reject,
        });
    }
    Ok(ShapeReport {
        samples: opts.samples,
        groups,
        alpha: 0.01,
        threshold,
        rejected,
        features,
    })
}
