//! Exact arithmetic and linear algebra over a prime field F_q.
//!
//! Everything downstream (symbols, query coefficients, MDS matrices, rank
//! arguments) runs on these primitives. No floating point anywhere: ranks,
//! solves, and inverses are exact or they are errors.

use std::ops::{Index, IndexMut};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GfError {
    #[error("modulus {0} is not prime")]
    NotPrime(u64),
    #[error("modulus {0} is even; +1 and -1 must be distinct field elements")]
    EvenField(u64),
    #[error("zero has no multiplicative inverse")]
    ZeroInverse,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("target row {row} is not in the row span")]
    NotInSpan { row: usize },
}

/// The field F_q for an odd prime q. Elements are u64 values in [0, q).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gf {
    q: u64,
}

fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    if n % 2 == 0 {
        return n == 2;
    }
    let mut d = 3u64;
    while d.saturating_mul(d) <= n {
        if n % d == 0 {
            return false;
        }
        d += 2;
    }
    true
}

impl Gf {
    pub fn new(q: u64) -> Result<Self, GfError> {
        if q % 2 == 0 {
            return Err(GfError::EvenField(q));
        }
        if !is_prime(q) {
            return Err(GfError::NotPrime(q));
        }
        Ok(Gf { q })
    }

    pub fn q(&self) -> u64 {
        self.q
    }

    pub fn add(&self, a: u64, b: u64) -> u64 {
        let s = a + b;
        if s >= self.q {
            s - self.q
        } else {
            s
        }
    }

    pub fn sub(&self, a: u64, b: u64) -> u64 {
        if a >= b {
            a - b
        } else {
            self.q - (b - a)
        }
    }

    pub fn neg(&self, a: u64) -> u64 {
        if a == 0 {
            0
        } else {
            self.q - a
        }
    }

    pub fn mul(&self, a: u64, b: u64) -> u64 {
        (a as u128 * b as u128 % self.q as u128) as u64
    }

    pub fn pow(&self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1u64;
        base %= self.q;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// Multiplicative inverse; a·inv(a) ≡ 1 (mod q).
    pub fn inv(&self, a: u64) -> Result<u64, GfError> {
        if a % self.q == 0 {
            return Err(GfError::ZeroInverse);
        }
        Ok(self.pow(a, self.q - 2))
    }

    /// Embed a signed integer (signs, small coefficients) into the field.
    pub fn from_signed(&self, v: i64) -> u64 {
        let q = self.q as i64;
        (v.rem_euclid(q)) as u64
    }
}

/// Dense row-major matrix over F_q.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldMatrix {
    rows: usize,
    cols: usize,
    gf: Gf,
    data: Vec<u64>,
}

impl Index<(usize, usize)> for FieldMatrix {
    type Output = u64;
    fn index(&self, (r, c): (usize, usize)) -> &u64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for FieldMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut u64 {
        &mut self.data[r * self.cols + c]
    }
}

impl FieldMatrix {
    pub fn zeros(gf: Gf, rows: usize, cols: usize) -> Self {
        FieldMatrix {
            rows,
            cols,
            gf,
            data: vec![0; rows * cols],
        }
    }

    pub fn identity(gf: Gf, n: usize) -> Self {
        let mut m = Self::zeros(gf, n, n);
        for i in 0..n {
            m[(i, i)] = 1;
        }
        m
    }

    pub fn from_rows(gf: Gf, rows: &[Vec<u64>]) -> Result<Self, GfError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(GfError::DimensionMismatch(
                "ragged rows in matrix literal".into(),
            ));
        }
        let data = rows.iter().flatten().map(|&v| v % gf.q()).collect();
        Ok(FieldMatrix {
            rows: rows.len(),
            cols,
            gf,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn gf(&self) -> Gf {
        self.gf
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[u64]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn matmul(&self, rhs: &FieldMatrix) -> Result<FieldMatrix, GfError> {
        if self.cols != rhs.rows {
            return Err(GfError::DimensionMismatch(format!(
                "{}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let gf = self.gf;
        let mut out = FieldMatrix::zeros(gf, self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] = gf.add(out[(i, j)], gf.mul(a, rhs[(k, j)]));
                }
            }
        }
        Ok(out)
    }

    /// Reduced row echelon form together with the transform T (T·self = rref)
    /// and the pivot column list.
    fn rref_with_transform(&self) -> (FieldMatrix, FieldMatrix, Vec<usize>) {
        let gf = self.gf;
        let mut r = self.clone();
        let mut t = FieldMatrix::identity(gf, self.rows);
        let mut pivots = Vec::new();
        let mut pr = 0usize;
        for pc in 0..self.cols {
            if pr == self.rows {
                break;
            }
            let Some(sel) = (pr..self.rows).find(|&i| r[(i, pc)] != 0) else {
                continue;
            };
            for c in 0..self.cols {
                r.data.swap(sel * self.cols + c, pr * self.cols + c);
            }
            for c in 0..self.rows {
                t.data.swap(sel * self.rows + c, pr * self.rows + c);
            }
            let inv = gf.inv(r[(pr, pc)]).expect("pivot is nonzero");
            for c in 0..self.cols {
                r[(pr, c)] = gf.mul(r[(pr, c)], inv);
            }
            for c in 0..self.rows {
                t[(pr, c)] = gf.mul(t[(pr, c)], inv);
            }
            for i in 0..self.rows {
                if i == pr || r[(i, pc)] == 0 {
                    continue;
                }
                let f = r[(i, pc)];
                for c in 0..self.cols {
                    let sub = gf.mul(f, r[(pr, c)]);
                    r[(i, c)] = gf.sub(r[(i, c)], sub);
                }
                for c in 0..self.rows {
                    let sub = gf.mul(f, t[(pr, c)]);
                    t[(i, c)] = gf.sub(t[(i, c)], sub);
                }
            }
            pivots.push(pc);
            pr += 1;
        }
        (r, t, pivots)
    }

    /// Rank over F_q by exact elimination.
    pub fn rank(&self) -> usize {
        self.rref_with_transform().2.len()
    }

    /// Inverse of a square matrix, or None if singular.
    pub fn inverse(&self) -> Option<FieldMatrix> {
        if self.rows != self.cols {
            return None;
        }
        let (r, t, pivots) = self.rref_with_transform();
        if pivots.len() != self.rows {
            return None;
        }
        debug_assert_eq!(r, FieldMatrix::identity(self.gf, self.rows));
        Some(t)
    }

    /// Coefficients C with C·basis = self, when every row of self lies in the
    /// row span of `basis`. The decision is exact; the first row outside the
    /// span is reported.
    pub fn solve_in_rowspan(&self, basis: &FieldMatrix) -> Result<FieldMatrix, GfError> {
        if self.cols != basis.cols {
            return Err(GfError::DimensionMismatch(format!(
                "targets have {} cols, basis {}",
                self.cols, basis.cols
            )));
        }
        let gf = self.gf;
        let (r, t, pivots) = basis.rref_with_transform();
        let mut coeffs = FieldMatrix::zeros(gf, self.rows, basis.rows);
        for ti in 0..self.rows {
            let mut residue: Vec<u64> = self.row(ti).to_vec();
            let mut c_red = vec![0u64; pivots.len()];
            for (k, &pc) in pivots.iter().enumerate() {
                let f = residue[pc];
                if f == 0 {
                    continue;
                }
                c_red[k] = f;
                for c in 0..self.cols {
                    let sub = gf.mul(f, r[(k, c)]);
                    residue[c] = gf.sub(residue[c], sub);
                }
            }
            if residue.iter().any(|&v| v != 0) {
                return Err(GfError::NotInSpan { row: ti });
            }
            for (k, &ck) in c_red.iter().enumerate() {
                if ck == 0 {
                    continue;
                }
                for j in 0..basis.rows {
                    let add = gf.mul(ck, t[(k, j)]);
                    coeffs[(ti, j)] = gf.add(coeffs[(ti, j)], add);
                }
            }
        }
        Ok(coeffs)
    }
}
