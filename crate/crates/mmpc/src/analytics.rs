//! Closed-form rates: the replication baseline, the subset scheme's rate,
//! the capacity upper bound, and the multiplicative gap between them. All
//! arithmetic is exact rational; decimals exist only in the CSV rendering.

use num::{BigInt, BigRational, One, Signed, ToPrimitive};
use thiserror::Error;

use crate::planner::{plan_summary, PlanError};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("bad parameters: {0}")]
    BadParams(String),
}

fn rat(v: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

fn npow(n: usize, e: usize) -> BigRational {
    BigRational::from_integer(BigInt::from(n as u64).pow(e as u32))
}

/// Single-message private computation capacity, (1 − 1/N)/(1 − N^{−K}).
pub fn pc_capacity(n: usize, k: usize) -> Result<BigRational, AnalyticsError> {
    if n < 2 || k < 1 {
        return Err(AnalyticsError::BadParams(format!(
            "need N >= 2 and K >= 1, got N={n} K={k}"
        )));
    }
    let one = BigRational::one();
    Ok((&one - &one / rat(n as u64)) / (&one - &one / npow(n, k)))
}

/// What running P single-message schemes side by side achieves.
#[derive(Debug, Clone)]
pub struct BaselineRate {
    pub r1: BigRational,
    /// Rate recovered from symbols the P parallel sessions decode for free.
    pub delta: BigRational,
    /// Closed-form multi-message PIR capacity; only known for P >= M/2.
    pub c_mmp: Option<BigRational>,
}

/// Baseline rate R1: the better of (capacity + free-symbol credit) and the
/// multi-message PIR capacity where the latter has a closed form. For
/// P < M/2 no closed form is available, so R1 falls back to the first term
/// and is a lower bound on the true baseline.
pub fn baseline_rate(
    m: usize,
    k: usize,
    p: usize,
    n: usize,
) -> Result<BaselineRate, AnalyticsError> {
    if !(1 <= p && p <= k && k <= m && n >= 2) {
        return Err(AnalyticsError::BadParams(format!(
            "need 1 <= P <= K <= M and N >= 2, got M={m} K={k} P={p} N={n}"
        )));
    }
    let one = BigRational::one();
    let delta =
        rat((p - 1) as u64) * rat((n - 1) as u64) / (npow(n, m) * (&one - &one / npow(n, k)));
    let first = pc_capacity(n, k)? + &delta;
    let c_mmp = if 2 * p >= m {
        Some(rat((p * n) as u64) / rat((p * n + m - p) as u64))
    } else {
        None
    };
    let r1 = match &c_mmp {
        Some(c) if c > &first => c.clone(),
        _ => first,
    };
    Ok(BaselineRate { r1, delta, c_mmp })
}

#[derive(Debug, Clone)]
pub struct GapCheck {
    pub r_upper: BigRational,
    pub ratio: BigRational,
    pub within2: bool,
}

/// Capacity upper bound and its ratio to an achieved rate. The bound
/// treats the demand as ⌊K/P⌋ super-messages when P is small and joins the
/// multi-message capacity branch at P >= K/2 (1 exactly at P = K).
pub fn gap_check(
    k: usize,
    p: usize,
    n: usize,
    r_achieved: &BigRational,
) -> Result<GapCheck, AnalyticsError> {
    if !(1 <= p && p <= k && n >= 2) {
        return Err(AnalyticsError::BadParams(format!(
            "need 1 <= P <= K and N >= 2, got K={k} P={p} N={n}"
        )));
    }
    if !r_achieved.is_positive() {
        return Err(AnalyticsError::BadParams(
            "achieved rate must be positive".to_string(),
        ));
    }
    let one = BigRational::one();
    let r_upper = if 2 * p <= k {
        (&one - &one / rat(n as u64)) / (&one - &one / npow(n, k / p))
    } else {
        rat((p * n) as u64) / rat((p * n + k - p) as u64)
    };
    let ratio = &r_upper / r_achieved;
    let within2 = ratio <= rat(2);
    Ok(GapCheck { r_upper, within2, ratio })
}

/// Everything the sweep reports about one parameter point.
#[derive(Debug, Clone)]
pub struct RatePoint {
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub n: usize,
    pub r1: BigRational,
    pub r2: BigRational,
    pub c_pc: BigRational,
    pub delta: BigRational,
    pub c_mmp: Option<BigRational>,
    pub r_upper: BigRational,
    /// R_upper over the better of R1 and R2.
    pub gap: BigRational,
}

pub fn rate_point(
    m: usize,
    k: usize,
    p: usize,
    n: usize,
) -> Result<RatePoint, AnalyticsError> {
    let summary = plan_summary(m, k, p, n)?;
    let base = baseline_rate(m, k, p, n)?;
    let c_pc = pc_capacity(n, k)?;
    let best = if summary.r2 > base.r1 {
        summary.r2.clone()
    } else {
        base.r1.clone()
    };
    let gap = gap_check(k, p, n, &best)?;
    Ok(RatePoint {
        m,
        k,
        p,
        n,
        r1: base.r1,
        r2: summary.r2,
        c_pc,
        delta: base.delta,
        c_mmp: base.c_mmp,
        r_upper: gap.r_upper,
        gap: gap.ratio,
    })
}

/// Six-decimal rendering, round half away from zero.
pub fn decimal6(r: &BigRational) -> String {
    let scaled = (r * rat(1_000_000)).round().to_integer();
    let v = scaled.to_i128().expect("rate fits in digits");
    let sign = if v < 0 { "-" } else { "" };
    let v = v.unsigned_abs();
    format!("{sign}{}.{:06}", v / 1_000_000, v % 1_000_000)
}

pub const SWEEP_HEADER: &str = "M,K,P,N,R1,R2,C_pc,Delta,C_mmP,R_upper,gap";

/// One CSV row per grid tuple, header always present.
pub fn sweep(grid: &[(usize, usize, usize, usize)]) -> Result<String, AnalyticsError> {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for &(m, k, p, n) in grid {
        let pt = rate_point(m, k, p, n)?;
        let c_mmp = pt.c_mmp.as_ref().map(decimal6).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            pt.m,
            pt.k,
            pt.p,
            pt.n,
            decimal6(&pt.r1),
            decimal6(&pt.r2),
            decimal6(&pt.c_pc),
            decimal6(&pt.delta),
            c_mmp,
            decimal6(&pt.r_upper),
            decimal6(&pt.gap)
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::Zero;

    fn q(num: i64, den: i64) -> BigRational {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    #[test]
    fn pc_capacity_examples() {
        // one file leaves nothing to hide
        assert_eq!(pc_capacity(2, 1).unwrap(), q(1, 1));
        assert_eq!(pc_capacity(2, 3).unwrap(), q(4, 7));
        assert_eq!(pc_capacity(3, 2).unwrap(), q(3, 4));
        assert!(pc_capacity(1, 3).is_err());
        assert!(pc_capacity(2, 0).is_err());
    }

    #[test]
    fn baseline_golden_instance() {
        let base = baseline_rate(5, 3, 2, 2).unwrap();
        assert_eq!(base.delta, q(1, 28));
        assert_eq!(base.r1, q(17, 28));
        assert!(base.c_mmp.is_none());
    }

    #[test]
    fn baseline_edge_branches() {
        let b = baseline_rate(4, 4, 3, 2).unwrap();
        assert_eq!(b.c_mmp, Some(q(6, 7)));
        let b = baseline_rate(6, 4, 1, 3).unwrap();
        assert!(b.delta.is_zero());
        assert_eq!(b.r1, pc_capacity(3, 4).unwrap());
        assert!(baseline_rate(4, 5, 2, 2).is_err());
    }

    #[test]
    fn gap_check_branches() {
        let g = gap_check(4, 2, 2, &q(1, 2)).unwrap();
        assert_eq!(g.r_upper, q(2, 3));
        let g = gap_check(3, 3, 5, &q(9, 10)).unwrap();
        assert_eq!(g.r_upper, q(1, 1));
        let g = gap_check(3, 2, 2, &q(17, 28)).unwrap();
        assert_eq!(g.r_upper, q(4, 5));
        assert!(g.within2);
        assert!(gap_check(3, 2, 2, &q(0, 1)).is_err());
    }

    #[test]
    fn golden_rate_point() {
        let pt = rate_point(5, 3, 2, 2).unwrap();
        assert_eq!(pt.r1, q(17, 28));
        assert_eq!(pt.r2, q(17, 23));
        assert_eq!(pt.c_pc, q(4, 7));
        assert_eq!(pt.r_upper, q(4, 5));
        assert_eq!(pt.gap, q(4, 5) / q(17, 23));
        assert!(pt.gap <= q(2, 1));
    }

    #[test]
    fn sweep_renders_csv() {
        let csv = sweep(&[(5, 3, 2, 2)]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(SWEEP_HEADER));
        assert_eq!(
            lines.next(),
            Some("5,3,2,2,0.607143,0.739130,0.571429,0.035714,,0.800000,1.082353")
        );
        assert_eq!(lines.next(), None);
        assert_eq!(sweep(&[]).unwrap(), format!("{SWEEP_HEADER}\n"));
    }

    #[test]
    fn large_sweep_orders_schemes() {
        for p in 2..=6 {
            let pt = rate_point(10, 7, p, 2).unwrap();
            if p == 2 {
                assert!(pt.r1 > pt.r2);
            } else {
                assert!(pt.r2 > pt.r1);
            }
            assert!(pt.gap <= q(2, 1));
        }
    }
}
