//! Message library, demand sets, relabeling, and protocol randomness.
//!
//! A library holds M messages over K independent files: the first K
//! coefficient rows are the identity (the files themselves), the rest are
//! arbitrary nonzero combinations. Before planning, the library is relabeled
//! so the demanded messages occupy the first P labels and a completed basis
//! occupies the first K; every later step works in that coordinate system and
//! only the wire layer maps back.

use crate::gf::{FieldMatrix, Gf, GfError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error(transparent)]
    Field(#[from] GfError),
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("dependent row {row} is all zeros")]
    ZeroRow { row: usize },
    #[error("coefficient rows {a} and {b} are identical")]
    DuplicateRow { a: usize, b: usize },
    #[error("demand is invalid: {0}")]
    BadDemand(String),
    #[error("demanded coefficient rows are linearly dependent")]
    DependentDemand,
    #[error("symbol grid has {got} columns, tape expects {want}")]
    LengthMismatch { got: usize, want: usize },
}

/// M messages over K files: row m of `coeffs` defines message m.
#[derive(Debug, Clone)]
pub struct MessageLibrary {
    m: usize,
    k: usize,
    gf: Gf,
    coeffs: FieldMatrix,
}

/// Build a library from the M−K dependent coefficient rows; the first K rows
/// are always the identity.
pub fn build_library(
    m: usize,
    k: usize,
    q: u64,
    dependent_rows: &[Vec<u64>],
) -> Result<MessageLibrary, ModelError> {
    let gf = Gf::new(q)?;
    if k == 0 || k > m {
        return Err(ModelError::BadDimensions(format!(
            "need 1 <= K <= M, got K={k} M={m}"
        )));
    }
    if dependent_rows.len() != m - k {
        return Err(ModelError::BadDimensions(format!(
            "expected {} dependent rows, got {}",
            m - k,
            dependent_rows.len()
        )));
    }
    let mut coeffs = FieldMatrix::identity(gf, k);
    for (i, row) in dependent_rows.iter().enumerate() {
        if row.len() != k {
            return Err(ModelError::BadDimensions(format!(
                "dependent row {i} has length {}, expected {k}",
                row.len()
            )));
        }
        let reduced: Vec<u64> = row.iter().map(|&v| v % q).collect();
        if reduced.iter().all(|&v| v == 0) {
            return Err(ModelError::ZeroRow { row: k + i });
        }
        coeffs.push_row(&reduced);
    }
    for a in 0..m {
        for b in a + 1..m {
            if coeffs.row(a) == coeffs.row(b) {
                return Err(ModelError::DuplicateRow { a, b });
            }
        }
    }
    debug_assert_eq!(coeffs.rank(), k);
    Ok(MessageLibrary { m, k, gf, coeffs })
}

impl MessageLibrary {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn q(&self) -> u64 {
        self.gf.q()
    }

    pub fn gf(&self) -> Gf {
        self.gf
    }

    pub fn coeffs(&self) -> &FieldMatrix {
        &self.coeffs
    }

    pub fn coeff_row(&self, m: usize) -> &[u64] {
        self.coeffs.row(m)
    }
}

/// The demanded message labels (0-based, distinct).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemandSet {
    indices: Vec<usize>,
}

impl DemandSet {
    pub fn new(indices: Vec<usize>, lib: &MessageLibrary) -> Result<Self, ModelError> {
        if indices.is_empty() {
            return Err(ModelError::BadDemand("demand set is empty".into()));
        }
        if indices.len() >= lib.k() {
            return Err(ModelError::BadDemand(format!(
                "P={} must be smaller than K={}",
                indices.len(),
                lib.k()
            )));
        }
        let mut seen = vec![false; lib.m()];
        for &i in &indices {
            if i >= lib.m() {
                return Err(ModelError::BadDemand(format!(
                    "label {} out of range for M={}",
                    i + 1,
                    lib.m()
                )));
            }
            if seen[i] {
                return Err(ModelError::BadDemand(format!(
                    "label {} demanded twice",
                    i + 1
                )));
            }
            seen[i] = true;
        }
        Ok(DemandSet { indices })
    }

    pub fn p(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Library rewritten around a demand: labels 0..P are the demanded messages,
/// labels P..K complete a basis from the original files, labels K..M carry
/// the remaining (dependent) messages.
#[derive(Debug, Clone)]
pub struct RelabeledLibrary {
    base: MessageLibrary,
    /// new label -> original label
    label_map: Vec<usize>,
    /// original label -> new label
    inv_label_map: Vec<usize>,
    /// rows = new basis messages expressed over the original files
    basis_change: FieldMatrix,
    basis_inv: FieldMatrix,
}

/// Step one of the scheme: move the demand to the front and complete a basis,
/// greedily, over the original file coordinates in ascending order.
pub fn relabel(lib: &MessageLibrary, demand: &DemandSet) -> Result<RelabeledLibrary, ModelError> {
    let gf = lib.gf();
    let (m, k, p) = (lib.m(), lib.k(), demand.p());

    let mut basis = FieldMatrix::zeros(gf, 0, k);
    for &d in demand.indices() {
        basis.push_row(lib.coeff_row(d));
    }
    if basis.rank() != p {
        return Err(ModelError::DependentDemand);
    }

    let mut order: Vec<usize> = demand.indices().to_vec();
    for file in 0..k {
        if basis.rows() == k {
            break;
        }
        if order.contains(&file) {
            continue;
        }
        let mut candidate = basis.clone();
        candidate.push_row(lib.coeff_row(file));
        if candidate.rank() == basis.rows() + 1 {
            basis = candidate;
            order.push(file);
        }
    }
    debug_assert_eq!(basis.rows(), k, "file rows always complete a basis");
    for label in 0..m {
        if !order.contains(&label) {
            order.push(label);
        }
    }

    let basis_inv = basis.inverse().expect("basis has rank K");
    let mut new_rows = Vec::with_capacity(m);
    for &orig in &order {
        let row = FieldMatrix::from_rows(gf, &[lib.coeff_row(orig).to_vec()])?;
        new_rows.push(row.matmul(&basis_inv)?.row(0).to_vec());
    }
    let coeffs = FieldMatrix::from_rows(gf, &new_rows)?;
    debug_assert_eq!(coeffs.rank(), k);

    let mut inv_label_map = vec![0; m];
    for (new, &orig) in order.iter().enumerate() {
        inv_label_map[orig] = new;
    }
    Ok(RelabeledLibrary {
        base: MessageLibrary {
            m,
            k,
            gf,
            coeffs,
        },
        label_map: order,
        inv_label_map,
        basis_change: basis,
        basis_inv,
    })
}

impl RelabeledLibrary {
    pub fn base(&self) -> &MessageLibrary {
        &self.base
    }

    pub fn m(&self) -> usize {
        self.base.m()
    }

    pub fn k(&self) -> usize {
        self.base.k()
    }

    pub fn gf(&self) -> Gf {
        self.base.gf()
    }

    /// New label -> original label.
    pub fn to_original(&self, label: usize) -> usize {
        self.label_map[label]
    }

    /// Original label -> new label.
    pub fn to_relabeled(&self, label: usize) -> usize {
        self.inv_label_map[label]
    }

    pub fn basis_change(&self) -> &FieldMatrix {
        &self.basis_change
    }

    pub fn basis_inv(&self) -> &FieldMatrix {
        &self.basis_inv
    }

    /// Coefficients of relabeled message `label` over the original files.
    pub fn original_row(&self, label: usize) -> Vec<u64> {
        let row = FieldMatrix::from_rows(self.gf(), &[self.base.coeff_row(label).to_vec()])
            .expect("row literal");
        row.matmul(&self.basis_change).expect("K columns").row(0).to_vec()
    }
}

/// All protocol randomness, reproducible from one seed: the symbol
/// permutation π, per-symbol signs σ, per-query switching signs, shuffle
/// orders, and the simulated file contents.
pub struct RandomTape {
    seed: u64,
    l: usize,
    pi: Vec<usize>,
    sigma: Vec<i8>,
    trivial: bool,
    switch_rng: ChaCha20Rng,
    shuffle_rng: ChaCha20Rng,
    file_rng: ChaCha20Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl RandomTape {
    pub fn from_seed(seed: u64, l: usize) -> Self {
        let mut perm_rng = stream(seed, 0);
        let mut pi: Vec<usize> = (0..l).collect();
        pi.shuffle(&mut perm_rng);
        let sigma = (0..l)
            .map(|_| if perm_rng.gen::<bool>() { 1 } else { -1 })
            .collect();
        RandomTape {
            seed,
            l,
            pi,
            sigma,
            trivial: false,
            switch_rng: stream(seed, 1),
            shuffle_rng: stream(seed, 2),
            file_rng: stream(seed, 3),
        }
    }

    /// Identity permutation, all-plus signs, no switching, no shuffling.
    /// Reproduces the worked tables; never used for a private run.
    pub fn identity(l: usize) -> Self {
        RandomTape {
            seed: 0,
            l,
            pi: (0..l).collect(),
            sigma: vec![1; l],
            trivial: true,
            switch_rng: stream(0, 1),
            shuffle_rng: stream(0, 2),
            file_rng: stream(0, 3),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn pi(&self, idx: usize) -> usize {
        self.pi[idx]
    }

    pub fn sigma(&self, idx: usize) -> i8 {
        self.sigma[idx]
    }

    pub fn draw_switch(&mut self) -> i8 {
        if self.trivial {
            1
        } else if self.switch_rng.gen::<bool>() {
            1
        } else {
            -1
        }
    }

    pub fn draw_perm(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        if !self.trivial {
            p.shuffle(&mut self.shuffle_rng);
        }
        p
    }

    pub fn draw_symbol(&mut self, q: u64) -> u64 {
        self.file_rng.gen_range(0..q)
    }
}

/// Alternated-symbol accessor: u_label(i) = σ_i · (row over files) · W(π(i)).
pub struct Alternated<'a> {
    rlib: &'a RelabeledLibrary,
    files: &'a FieldMatrix,
    tape: &'a RandomTape,
}

/// View the K×L file grid through the permutation, the signs, and the
/// relabeled coefficients.
pub fn randomize_symbols<'a>(
    rlib: &'a RelabeledLibrary,
    files: &'a FieldMatrix,
    tape: &'a RandomTape,
) -> Result<Alternated<'a>, ModelError> {
    if files.cols() != tape.l() {
        return Err(ModelError::LengthMismatch {
            got: files.cols(),
            want: tape.l(),
        });
    }
    if files.rows() != rlib.k() {
        return Err(ModelError::BadDimensions(format!(
            "file grid has {} rows, K={}",
            files.rows(),
            rlib.k()
        )));
    }
    Ok(Alternated { rlib, files, tape })
}

impl Alternated<'_> {
    pub fn u(&self, label: usize, idx: usize) -> u64 {
        let gf = self.rlib.gf();
        let col = self.tape.pi(idx);
        let row = self.rlib.original_row(label);
        let mut acc = 0u64;
        for (j, &c) in row.iter().enumerate() {
            acc = gf.add(acc, gf.mul(c, self.files[(j, col)]));
        }
        if self.tape.sigma(idx) < 0 {
            gf.neg(acc)
        } else {
            acc
        }
    }
}
