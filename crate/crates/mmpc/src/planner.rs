//! Query layout: stage counts, donor scheduling, index assignment, signs,
//! and shuffling. Produces the uncoded [`QueryPlan`].
//!
//! Round i puts one query on every i-subset of the M message labels; a stage
//! is one full sweep of those subsets, and round i runs α_i stages per
//! server. Fresh symbol indices enter only through informative queries; every
//! other index is copied from a donor stage at another server, so that within
//! a stage the index attached to a label depends only on the rest of the
//! subset. That closure is what the decoder and the privacy argument lean on.

use std::collections::{BTreeMap, VecDeque};

use num::{BigInt, BigRational, Integer, One, ToPrimitive, Zero};
use thiserror::Error;

use crate::combin::{binom, k_subsets, set_minus};
use crate::model::{RandomTape, RelabeledLibrary};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlanError {
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("donor queue empty for server {server}, round {round}")]
    DonorExhausted { server: usize, round: usize },
    #[error("index clash at server {server} round {round} stage {stage}: {detail}")]
    IndexClash {
        server: usize,
        round: usize,
        stage: usize,
        detail: String,
    },
    #[error("stage counts overflow u64")]
    Overflow,
}

/// Stages per round: α_i stages of round i on every server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageCounts {
    pub m: usize,
    pub p: usize,
    pub n: usize,
    /// alpha[i-1] = α_i for rounds i = 1 ..= M−P+1.
    pub alpha: Vec<u64>,
    /// Multiplier applied if the raw recursion were non-integral; 1 so far on
    /// every parameter set measured.
    pub scale: u64,
}

/// Evaluate the stage recursion top-down, exactly:
/// α_{M−P+1} = (N−1)^{M−P}, then (N−1)·α_i = Σ_m C(P,m)·α_{i+m}.
pub fn stage_counts(m: usize, p: usize, n: usize) -> Result<StageCounts, PlanError> {
    if p == 0 || p >= m || n < 2 {
        return Err(PlanError::BadParams(format!(
            "need 1 <= P <= M-1 and N >= 2, got M={m} P={p} N={n}"
        )));
    }
    let rounds = m - p + 1;
    let nm1 = BigRational::from_integer(BigInt::from(n as u64 - 1));
    let mut rat = vec![BigRational::zero(); rounds];
    rat[rounds - 1] = nm1.pow((m - p) as i32);
    for i in (0..rounds - 1).rev() {
        let mut acc = BigRational::zero();
        for mm in 1..=p {
            if i + mm > rounds - 1 {
                break;
            }
            let c = BigRational::from_integer(BigInt::from(binom(p, mm)));
            acc += c * &rat[i + mm];
        }
        rat[i] = acc / &nm1;
    }
    let mut scale = BigInt::one();
    for r in &rat {
        scale = scale.lcm(r.denom());
    }
    let alpha: Vec<u64> = rat
        .iter()
        .map(|r| {
            (r * BigRational::from_integer(scale.clone()))
                .to_integer()
                .to_u64()
                .ok_or(PlanError::Overflow)
        })
        .collect::<Result<_, _>>()?;
    let counts = StageCounts {
        m,
        p,
        n,
        alpha,
        scale: scale.to_u64().ok_or(PlanError::Overflow)?,
    };
    // Side-information balance: what round j donates is exactly what the
    // higher rounds consume, per server pair.
    for j in 1..=m - p {
        let lhs = (n as u128 - 1) * counts.alpha[j - 1] as u128;
        let rhs: u128 = (1..=p)
            .filter(|mm| j + mm <= rounds)
            .map(|mm| binom(p, mm) * counts.alpha[j + mm - 1] as u128)
            .sum();
        assert_eq!(lhs, rhs, "stage balance must hold after scaling");
    }
    Ok(counts)
}

/// Closed-form plan measurements: subpacketization L, download D, rate R₂.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSummary {
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub n: usize,
    pub alpha: Vec<u64>,
    pub scale: u64,
    /// Symbols per message.
    pub l: u64,
    /// Total symbols downloaded from all servers.
    pub d: u64,
    /// Coded downloads per stage, by round.
    pub r_by_round: Vec<u64>,
    /// Achieved rate P·L/D.
    pub r2: BigRational,
}

pub fn plan_summary(m: usize, k: usize, p: usize, n: usize) -> Result<PlanSummary, PlanError> {
    if !(1 <= p && p < k && k <= m) {
        return Err(PlanError::BadParams(format!(
            "need 1 <= P < K <= M, got M={m} K={k} P={p}"
        )));
    }
    let counts = stage_counts(m, p, n)?;
    let rounds = m - p + 1;
    let mut l: u128 = 0;
    let mut d: u128 = 0;
    let mut r_by_round = Vec::with_capacity(rounds);
    for i in 1..=rounds {
        let a = counts.alpha[i - 1] as u128;
        let fresh = binom(m - p, i - 1);
        let r = binom(m - p, i) - binom(m - k, i) + p as u128 * fresh;
        l += a * fresh;
        d += a * r;
        r_by_round.push(u64::try_from(r).map_err(|_| PlanError::Overflow)?);
    }
    l *= n as u128;
    d *= n as u128;
    let l = u64::try_from(l).map_err(|_| PlanError::Overflow)?;
    let d = u64::try_from(d).map_err(|_| PlanError::Overflow)?;
    let r2 = BigRational::new(BigInt::from(p as u64) * BigInt::from(l), BigInt::from(d));
    Ok(PlanSummary {
        m,
        k,
        p,
        n,
        alpha: counts.alpha,
        scale: counts.scale,
        l,
        d,
        r_by_round,
        r2,
    })
}

/// Smallest field that fits the widest stage's MDS matrix.
pub fn min_field_size(summary: &PlanSummary) -> u64 {
    (1..=summary.m - summary.p + 1)
        .map(|i| summary.r_by_round[i - 1] + binom(summary.m, i) as u64)
        .max()
        .unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum QueryClass {
    Informative,
    SideInfo,
    Useless,
}

impl QueryClass {
    pub fn name(&self) -> &'static str {
        match self {
            QueryClass::Informative => "informative",
            QueryClass::SideInfo => "side_info",
            QueryClass::Useless => "useless",
        }
    }
}

/// One signed symbol inside a query; labels and indices live in the
/// relabeled, unpermuted coordinate system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Term {
    pub label: usize,
    pub index: usize,
    pub sign: i8,
}

/// A query on one subset of message labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySpec {
    pub subset: Vec<usize>,
    pub class: QueryClass,
    pub terms: Vec<Term>,
    /// Whole-query switching sign, already folded into the term signs.
    pub switch: i8,
    /// Wire order of the terms.
    pub term_perm: Vec<usize>,
}

/// Reference to a stage: (server, round, stage-within-round), round 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct StageRef {
    pub server: usize,
    pub round: usize,
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub server: usize,
    pub round: usize,
    pub stage_idx: usize,
    /// Canonical order: informative (demand label asc, companion subset lex),
    /// useless (demanded-part size asc, then lex), side information (lex).
    pub queries: Vec<QuerySpec>,
    /// Fresh symbol indices owned by this stage, one per (i−1)-subset of the
    /// non-demanded labels.
    pub fresh: BTreeMap<Vec<usize>, usize>,
    /// Donor stages at other servers, one per nonempty demanded subset T with
    /// |T| < i: the donor of T has round i−|T|.
    pub donors: BTreeMap<Vec<usize>, StageRef>,
    /// Wire order of the queries.
    pub wire_perm: Vec<usize>,
}

impl Stage {
    pub fn query_on(&self, subset: &[usize]) -> Option<&QuerySpec> {
        self.queries.iter().find(|q| q.subset == subset)
    }

    pub fn r#ref(&self) -> StageRef {
        StageRef {
            server: self.server,
            round: self.round,
            stage: self.stage_idx,
        }
    }
}

/// The complete per-server query layout, before MDS coding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPlan {
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub n: usize,
    pub q: u64,
    pub l: usize,
    pub alpha: Vec<u64>,
    /// relabeled label -> original label
    pub label_map: Vec<usize>,
    /// stages[server][round-1][stage_idx]
    pub stages: Vec<Vec<Vec<Stage>>>,
    /// Per server, the order stage blocks appear on the wire.
    pub dump_order: Vec<Vec<(usize, usize)>>,
    pub signed: bool,
    pub shuffled: bool,
}

impl QueryPlan {
    pub fn rounds(&self) -> usize {
        self.m - self.p + 1
    }

    pub fn stage(&self, r: StageRef) -> &Stage {
        &self.stages[r.server][r.round - 1][r.stage]
    }

    pub fn all_stages(&self) -> impl Iterator<Item = &Stage> {
        self.stages.iter().flatten().flatten()
    }

    pub fn server_stages(&self, server: usize) -> impl Iterator<Item = &Stage> {
        self.stages[server].iter().flatten()
    }

    /// Original wire label of a relabeled label.
    pub fn original_label(&self, label: usize) -> usize {
        self.label_map[label]
    }
}

/// Index of the symbol a query on S∪{x} attaches to x: the stage's own fresh
/// index when S avoids the demand, otherwise the matching donor's fresh index.
fn ext_index(plan: &QueryPlan, stage: &Stage, s_set: &[usize]) -> usize {
    let p = plan.p;
    let t: Vec<usize> = s_set.iter().copied().filter(|&x| x < p).collect();
    if t.is_empty() {
        stage.fresh[s_set]
    } else {
        let donor = plan.stage(stage.donors[&t]);
        donor.fresh[&set_minus(s_set, &t)]
    }
}

/// Build the indexed, unsigned query plan: fresh-index layout, donor
/// scheduling, and the index closure for every subset.
pub fn build_query_plan(
    rlib: &RelabeledLibrary,
    counts: &StageCounts,
    n: usize,
) -> Result<QueryPlan, PlanError> {
    let (m, p) = (counts.m, counts.p);
    if rlib.m() != m || n != counts.n {
        return Err(PlanError::BadParams(
            "stage counts disagree with library or server count".into(),
        ));
    }
    let rounds = m - p + 1;
    let alpha: Vec<usize> = counts
        .alpha
        .iter()
        .map(|&a| usize::try_from(a).map_err(|_| PlanError::Overflow))
        .collect::<Result<_, _>>()?;
    let nondem: Vec<usize> = (p..m).collect();
    let dem: Vec<usize> = (0..p).collect();

    let mut plan = QueryPlan {
        m,
        k: rlib.k(),
        p,
        n,
        q: rlib.gf().q(),
        l: 0,
        alpha: counts.alpha.clone(),
        label_map: (0..m).map(|l| rlib.to_original(l)).collect(),
        stages: (0..n)
            .map(|server| {
                (1..=rounds)
                    .map(|round| {
                        (0..alpha[round - 1])
                            .map(|stage_idx| Stage {
                                server,
                                round,
                                stage_idx,
                                queries: Vec::new(),
                                fresh: BTreeMap::new(),
                                donors: BTreeMap::new(),
                                wire_perm: Vec::new(),
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect(),
        dump_order: Vec::new(),
        signed: false,
        shuffled: false,
    };
    plan.dump_order = (0..n)
        .map(|server| {
            plan.stages[server]
                .iter()
                .enumerate()
                .flat_map(|(r, v)| (0..v.len()).map(move |s| (r, s)))
                .collect()
        })
        .collect();

    // Fresh symbol indices. Round 1 is laid out server-major; higher rounds
    // interleave servers within each stage slot. Both match the worked
    // tables, and nothing downstream depends on the choice beyond them.
    let mut counter = 0usize;
    for server in 0..n {
        for s in 0..alpha[0] {
            plan.stages[server][0][s].fresh.insert(Vec::new(), counter);
            counter += 1;
        }
    }
    for i in 2..=rounds {
        for s in 0..alpha[i - 1] {
            for server in 0..n {
                for slot in k_subsets(&nondem, i - 1) {
                    plan.stages[server][i - 1][s].fresh.insert(slot, counter);
                    counter += 1;
                }
            }
        }
    }
    plan.l = counter;

    // Donor queues: per consumer server and donor round, the other servers'
    // stages interleaved round-robin. The stage balance guarantees exact
    // exhaustion; a miss is a bug.
    let mut queues: Vec<Vec<VecDeque<StageRef>>> = (0..n)
        .map(|server| {
            (1..=rounds)
                .map(|round| {
                    let mut q = VecDeque::new();
                    for t in 0..alpha[round - 1] {
                        for off in 1..n {
                            q.push_back(StageRef {
                                server: (server + off) % n,
                                round,
                                stage: t,
                            });
                        }
                    }
                    q
                })
                .collect()
        })
        .collect();
    for i in 2..=rounds {
        for s in 0..alpha[i - 1] {
            for server in 0..n {
                for mm in 1..=(i - 1).min(p) {
                    for t in k_subsets(&dem, mm) {
                        let donor = queues[server][i - mm - 1].pop_front().ok_or(
                            PlanError::DonorExhausted {
                                server,
                                round: i - mm,
                            },
                        )?;
                        plan.stages[server][i - 1][s].donors.insert(t, donor);
                    }
                }
            }
        }
    }
    for (server, qs) in queues.iter().enumerate() {
        for (round0, q) in qs.iter().enumerate() {
            if round0 + 1 <= m - p && !q.is_empty() {
                return Err(PlanError::IndexClash {
                    server,
                    round: round0 + 1,
                    stage: 0,
                    detail: format!("{} donor stages left unconsumed", q.len()),
                });
            }
        }
    }

    // Queries. Round-1 stages are singleton sweeps; higher rounds follow the
    // canonical class-major order with every index resolved by the closure.
    let mut built: Vec<(StageRef, Vec<QuerySpec>)> = Vec::new();
    for stage in plan.all_stages() {
        let i = stage.round;
        let mut queries = Vec::new();
        if i == 1 {
            let idx = stage.fresh[&Vec::new()];
            for x in 0..m {
                queries.push(QuerySpec {
                    subset: vec![x],
                    class: if x < p {
                        QueryClass::Informative
                    } else {
                        QueryClass::SideInfo
                    },
                    terms: vec![Term {
                        label: x,
                        index: idx,
                        sign: 1,
                    }],
                    switch: 1,
                    term_perm: vec![0],
                });
            }
        } else {
            let push = |subset: Vec<usize>, class: QueryClass, queries: &mut Vec<QuerySpec>| {
                let terms: Vec<Term> = subset
                    .iter()
                    .map(|&x| Term {
                        label: x,
                        index: ext_index(&plan, stage, &set_minus(&subset, &[x])),
                        sign: 1,
                    })
                    .collect();
                let n_terms = terms.len();
                queries.push(QuerySpec {
                    subset,
                    class,
                    terms,
                    switch: 1,
                    term_perm: (0..n_terms).collect(),
                });
            };
            for theta in 0..p {
                for gp in k_subsets(&nondem, i - 1) {
                    let mut subset = vec![theta];
                    subset.extend(&gp);
                    push(subset, QueryClass::Informative, &mut queries);
                }
            }
            for mm in 2..=i.min(p) {
                for t in k_subsets(&dem, mm) {
                    for gp in k_subsets(&nondem, i - mm) {
                        let mut subset = t.clone();
                        subset.extend(&gp);
                        push(subset, QueryClass::Useless, &mut queries);
                    }
                }
            }
            for g in k_subsets(&nondem, i) {
                push(g, QueryClass::SideInfo, &mut queries);
            }
        }
        debug_assert_eq!(queries.len() as u128, binom(m, i));
        built.push((stage.r#ref(), queries));
    }
    for (r, queries) in built {
        plan.stages[r.server][r.round - 1][r.stage].queries = queries;
    }

    // Re-verify the index closure on the finished plan; a clash here means
    // the construction itself is broken and must not be papered over.
    for stage in plan.all_stages() {
        let mut seen: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for query in &stage.queries {
            for term in &query.terms {
                let s = set_minus(&query.subset, &[term.label]);
                match seen.get(&s) {
                    None => {
                        seen.insert(s, term.index);
                    }
                    Some(&idx) if idx == term.index => {}
                    Some(&idx) => {
                        return Err(PlanError::IndexClash {
                            server: stage.server,
                            round: stage.round,
                            stage: stage.stage_idx,
                            detail: format!(
                                "label {} in {:?} got index {} but companion set fixed {}",
                                term.label, query.subset, term.index, idx
                            ),
                        });
                    }
                }
            }
        }
    }
    Ok(plan)
}

/// Intra-block sign alternation plus the round-parity block sign, then the
/// per-query switching sign. Round 1 carries switching signs only.
pub fn assign_signs(plan: &mut QueryPlan, tape: &mut RandomTape) {
    let k = plan.k;
    for server in 0..plan.n {
        for round0 in 0..plan.stages[server].len() {
            for stage in plan.stages[server][round0].iter_mut() {
                let round = stage.round;
                let block_sign: i8 = if round % 2 == 0 { 1 } else { -1 };
                for query in stage.queries.iter_mut() {
                    let sw = tape.draw_switch();
                    query.switch = sw;
                    if round == 1 {
                        for term in query.terms.iter_mut() {
                            term.sign = sw;
                        }
                        continue;
                    }
                    let mut indep = 0usize;
                    let mut dep = 0usize;
                    for term in query.terms.iter_mut() {
                        let (alt, block) = if term.label < k {
                            indep += 1;
                            (indep, 1)
                        } else {
                            dep += 1;
                            (dep, block_sign)
                        };
                        let alt_sign: i8 = if alt % 2 == 1 { 1 } else { -1 };
                        term.sign = alt_sign * block * sw;
                    }
                }
            }
        }
    }
    plan.signed = true;
}

/// Randomize wire ordering: stage blocks per server, queries within a stage,
/// terms within a query. The canonical plan stays intact for the decoder.
pub fn shuffle_plan(plan: &mut QueryPlan, tape: &mut RandomTape) {
    for server in 0..plan.n {
        let blocks: Vec<(usize, usize)> = plan.stages[server]
            .iter()
            .enumerate()
            .flat_map(|(r, v)| (0..v.len()).map(move |s| (r, s)))
            .collect();
        let perm = tape.draw_perm(blocks.len());
        plan.dump_order[server] = perm.iter().map(|&i| blocks[i]).collect();
        for round0 in 0..plan.stages[server].len() {
            for stage in plan.stages[server][round0].iter_mut() {
                stage.wire_perm = tape.draw_perm(stage.queries.len());
                for query in stage.queries.iter_mut() {
                    query.term_perm = tape.draw_perm(query.terms.len());
                }
            }
        }
    }
    plan.shuffled = true;
}

/// JSON-lines rendering of the uncoded plan, in wire order. Labels are the
/// original 1-based message labels; indices are 1-based alternated-symbol
/// positions.
pub fn dump_plan(plan: &QueryPlan) -> String {
    let mut out = String::new();
    for server in 0..plan.n {
        for &(round0, s) in &plan.dump_order[server] {
            let stage = &plan.stages[server][round0][s];
            let order: Box<dyn Iterator<Item = usize>> = if stage.wire_perm.is_empty() {
                Box::new(0..stage.queries.len())
            } else {
                Box::new(stage.wire_perm.iter().copied())
            };
            for qi in order {
                let query = &stage.queries[qi];
                let term_order: Box<dyn Iterator<Item = usize>> = if query.term_perm.is_empty() {
                    Box::new(0..query.terms.len())
                } else {
                    Box::new(query.term_perm.iter().copied())
                };
                let terms: Vec<serde_json::Value> = term_order
                    .map(|ti| {
                        let t = &query.terms[ti];
                        serde_json::json!([
                            plan.original_label(t.label) + 1,
                            t.index + 1,
                            t.sign
                        ])
                    })
                    .collect();
                let rec = serde_json::json!({
                    "server": server + 1,
                    "round": stage.round,
                    "stage": stage.stage_idx + 1,
                    "class": query.class.name(),
                    "terms": terms,
                });
                out.push_str(&rec.to_string());
                out.push('\n');
            }
        }
    }
    out
}
