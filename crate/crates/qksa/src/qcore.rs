//! Dense quantum kernel: density matrices, unitaries, measurement bases,
//! and the channel operations every other module builds on.
//!
//! Conventions, fixed once here and relied on everywhere else:
//! * qubit 0 is the most significant bit of a computational basis index,
//!   so `kron(a, b)` puts `a` on qubit 0;
//! * measurement outcome bit 0 denotes the +1 eigenvector of the measured
//!   Pauli axis, bit 1 the -1 eigenvector;
//! * a process matrix for an `n`-qubit channel `E` is the state
//!   `(1/2^n) * sum_{i,j} |i><j| (x) E(|i><j|)` on `2n` qubits, with the
//!   reference copy on the first factor and the channel output on the second.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Dense complex matrix carrier used throughout the crate.
pub type CMatrix = DMatrix<Complex64>;

/// Tolerance for state/unitary invariants (Hermiticity, unit trace,
/// positivity, unitarity).
pub const TOLERANCE: f64 = 1e-9;

/// Tolerance for identities that hold exactly up to rounding error.
pub const EXACT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("dimension {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("matrix is not Hermitian (max deviation {0:.3e})")]
    NotHermitian(f64),
    #[error("trace deviates from one by {0:.3e}")]
    NotUnitTrace(f64),
    #[error("matrix is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("matrix is not unitary (max deviation from U\u{2020}U = I is {0:.3e})")]
    NotUnitary(f64),
    #[error("basis string length {got} does not match qubit count {expected}")]
    BasisLength { expected: usize, got: usize },
    #[error("subsystem dims {0}x{1} do not factor dimension {2}")]
    BadFactorization(usize, usize, usize),
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("invalid basis character {0:?} (expected X, Y or Z)")]
    BadBasisChar(char),
}

pub type Result<T> = std::result::Result<T, Error>;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn czero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

/// Largest entrywise modulus of `a - b`; the distance used by most exactness
/// checks in the test suite.
pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

/// Round to `places` decimal digits, applied separately to real and
/// imaginary parts wherever reconstruction precision is truncated.
pub fn round_places(x: f64, places: u32) -> f64 {
    let scale = 10f64.powi(places as i32);
    (x * scale).round() / scale
}

// ---------------------------------------------------------------------------
// measurement bases
// ---------------------------------------------------------------------------

/// One single-qubit measurement axis.  The ordering `X < Y < Z` defines the
/// lexicographic enumeration of multi-qubit measurement settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PauliAxis {
    X,
    Y,
    Z,
}

impl PauliAxis {
    pub const ALL: [PauliAxis; 3] = [PauliAxis::X, PauliAxis::Y, PauliAxis::Z];

    pub fn as_char(self) -> char {
        match self {
            PauliAxis::X => 'X',
            PauliAxis::Y => 'Y',
            PauliAxis::Z => 'Z',
        }
    }

    pub fn from_char(ch: char) -> Result<Self> {
        match ch {
            'X' => Ok(PauliAxis::X),
            'Y' => Ok(PauliAxis::Y),
            'Z' => Ok(PauliAxis::Z),
            other => Err(Error::BadBasisChar(other)),
        }
    }

    /// The 2x2 matrix of this Pauli operator.
    pub fn matrix(self) -> CMatrix {
        match self {
            PauliAxis::X => CMatrix::from_row_slice(2, 2, &[czero(), c(1.0, 0.0), c(1.0, 0.0), czero()]),
            PauliAxis::Y => CMatrix::from_row_slice(2, 2, &[czero(), c(0.0, -1.0), c(0.0, 1.0), czero()]),
            PauliAxis::Z => {
                CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), czero(), czero(), c(-1.0, 0.0)])
            }
        }
    }

    /// Normalized eigenvector for outcome bit 0 (+1) or 1 (-1).
    pub fn eigenvector(self, bit: u8) -> [Complex64; 2] {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        match (self, bit) {
            (PauliAxis::Z, 0) => [c(1.0, 0.0), czero()],
            (PauliAxis::Z, _) => [czero(), c(1.0, 0.0)],
            (PauliAxis::X, 0) => [c(s, 0.0), c(s, 0.0)],
            (PauliAxis::X, _) => [c(s, 0.0), c(-s, 0.0)],
            (PauliAxis::Y, 0) => [c(s, 0.0), c(0.0, s)],
            (PauliAxis::Y, _) => [c(s, 0.0), c(0.0, -s)],
        }
    }
}

/// A measurement setting: one Pauli axis per qubit, e.g. `"ZX"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BasisString(Vec<PauliAxis>);

impl BasisString {
    pub fn new(axes: Vec<PauliAxis>) -> Self {
        BasisString(axes)
    }

    pub fn parse(s: &str) -> Result<Self> {
        s.chars().map(PauliAxis::from_char).collect::<Result<Vec<_>>>().map(BasisString)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn axes(&self) -> &[PauliAxis] {
        &self.0
    }

    /// All `3^k` settings on `k` qubits in lexicographic order (`X < Y < Z`),
    /// so index 0 is `XX..X`.
    pub fn enumerate(k: usize) -> Vec<BasisString> {
        let mut out = Vec::with_capacity(3usize.pow(k as u32));
        let mut digits = vec![0usize; k];
        loop {
            out.push(BasisString(digits.iter().map(|&d| PauliAxis::ALL[d]).collect()));
            let mut pos = k;
            loop {
                if pos == 0 {
                    return out;
                }
                pos -= 1;
                if digits[pos] < 2 {
                    digits[pos] += 1;
                    break;
                }
                digits[pos] = 0;
            }
        }
    }
}

impl std::fmt::Display for BasisString {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for axis in &self.0 {
            write!(f, "{}", axis.as_char())?;
        }
        Ok(())
    }
}

impl std::str::FromStr for BasisString {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BasisString::parse(s)
    }
}

// ---------------------------------------------------------------------------
// states and unitaries
// ---------------------------------------------------------------------------

fn check_square_pow2(m: &CMatrix) -> Result<usize> {
    let d = m.nrows();
    if m.ncols() != d {
        return Err(Error::DimMismatch { expected: d, got: m.ncols() });
    }
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(d));
    }
    Ok(d)
}

/// A valid quantum state: Hermitian, unit trace and positive semidefinite
/// within [`TOLERANCE`], on a power-of-two dimension.
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    mat: CMatrix,
}

impl DensityMatrix {
    /// Validates all state invariants; the only public way to wrap an
    /// arbitrary matrix.
    pub fn new(mat: CMatrix) -> Result<Self> {
        let d = check_square_pow2(&mat)?;
        let herm_dev = max_abs_diff(&mat, &mat.adjoint());
        if herm_dev > TOLERANCE {
            return Err(Error::NotHermitian(herm_dev));
        }
        let trace_dev = (mat.trace() - c(1.0, 0.0)).norm();
        if trace_dev > TOLERANCE {
            return Err(Error::NotUnitTrace(trace_dev));
        }
        let herm = (&mat + mat.adjoint()).scale(0.5);
        let (evals, _) = eigh(&herm);
        let min_eval = evals.iter().copied().fold(f64::INFINITY, f64::min);
        if min_eval < -TOLERANCE {
            return Err(Error::NotPsd(min_eval));
        }
        let _ = d;
        Ok(DensityMatrix { mat })
    }

    /// Wraps a matrix known to be valid by construction.  Callers must have
    /// a mathematical argument, not just optimism; debug builds re-check.
    pub(crate) fn from_valid(mat: CMatrix) -> Self {
        debug_assert!(
            DensityMatrix::new(mat.clone()).is_ok(),
            "from_valid given an invalid state"
        );
        DensityMatrix { mat }
    }

    /// `I / 2^k`, the state of complete ignorance on `k` qubits.
    pub fn maximally_mixed(n_qubits: usize) -> Self {
        let d = 1usize << n_qubits;
        let mat = CMatrix::identity(d, d).scale(1.0 / d as f64);
        DensityMatrix { mat }
    }

    /// `|psi><psi|` for the given amplitudes, normalized first.
    pub fn pure(amplitudes: &[Complex64]) -> Result<Self> {
        let d = amplitudes.len();
        if d == 0 || !d.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(d));
        }
        let norm_sq: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if norm_sq <= 0.0 {
            return Err(Error::ZeroVector);
        }
        let scale = norm_sq.sqrt();
        let mat = CMatrix::from_fn(d, d, |i, j| amplitudes[i] * amplitudes[j].conj() / norm_sq);
        let _ = scale;
        Ok(DensityMatrix { mat })
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn n_qubits(&self) -> usize {
        self.mat.nrows().trailing_zeros() as usize
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }

    pub fn into_matrix(self) -> CMatrix {
        self.mat
    }
}

/// A matrix with `U' U = I` within [`TOLERANCE`], on a power-of-two dimension.
#[derive(Debug, Clone)]
pub struct Unitary {
    mat: CMatrix,
}

impl Unitary {
    pub fn new(mat: CMatrix) -> Result<Self> {
        let d = check_square_pow2(&mat)?;
        let dev = max_abs_diff(&(mat.adjoint() * &mat), &CMatrix::identity(d, d));
        if dev > TOLERANCE {
            return Err(Error::NotUnitary(dev));
        }
        Ok(Unitary { mat })
    }

    pub fn identity(n_qubits: usize) -> Self {
        let d = 1usize << n_qubits;
        Unitary { mat: CMatrix::identity(d, d) }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn n_qubits(&self) -> usize {
        self.mat.nrows().trailing_zeros() as usize
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.mat
    }
}

// ---------------------------------------------------------------------------
// spectral helpers
// ---------------------------------------------------------------------------

/// Eigendecomposition of a Hermitian matrix.  Returns eigenvalues in
/// ascending order with matching eigenvector columns.
pub fn eigh(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let d = m.nrows();
    assert_eq!(d, m.ncols(), "eigh needs a square matrix");
    let se = nalgebra::linalg::SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]));
    let evals: Vec<f64> = order.iter().map(|&i| se.eigenvalues[i]).collect();
    let mut vecs = CMatrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &se.eigenvectors.column(src));
    }
    (evals, vecs)
}

fn recompose(evals: &[f64], vecs: &CMatrix) -> CMatrix {
    let d = vecs.nrows();
    let diag = CMatrix::from_fn(d, d, |i, j| if i == j { c(evals[i], 0.0) } else { czero() });
    vecs * diag * vecs.adjoint()
}

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

/// Kronecker product; `a` occupies the more significant qubits.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// Which tensor factor [`partial_trace`] removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subsystem {
    First,
    Second,
}

fn raw_partial_trace(m: &CMatrix, dims: (usize, usize), traced: Subsystem) -> CMatrix {
    let (d1, d2) = dims;
    match traced {
        Subsystem::First => {
            let mut out = CMatrix::zeros(d2, d2);
            for i in 0..d1 {
                for r in 0..d2 {
                    for s in 0..d2 {
                        out[(r, s)] += m[(i * d2 + r, i * d2 + s)];
                    }
                }
            }
            out
        }
        Subsystem::Second => {
            let mut out = CMatrix::zeros(d1, d1);
            for j in 0..d2 {
                for r in 0..d1 {
                    for s in 0..d1 {
                        out[(r, s)] += m[(r * d2 + j, s * d2 + j)];
                    }
                }
            }
            out
        }
    }
}

/// Trace out one tensor factor of a bipartite state with factor dimensions
/// `dims`.  The result is renormalized only by the trace it inherits, which
/// is already 1 for a valid input.
pub fn partial_trace(
    rho: &DensityMatrix,
    dims: (usize, usize),
    traced: Subsystem,
) -> Result<DensityMatrix> {
    let (d1, d2) = dims;
    if d1 * d2 != rho.dim() {
        return Err(Error::BadFactorization(d1, d2, rho.dim()));
    }
    if !d1.is_power_of_two() || !d2.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(if d1.is_power_of_two() { d2 } else { d1 }));
    }
    let out = raw_partial_trace(rho.matrix(), dims, traced);
    Ok(DensityMatrix::from_valid(out))
}

/// `U rho U'`.
pub fn apply_unitary(rho: &DensityMatrix, u: &Unitary) -> Result<DensityMatrix> {
    if rho.dim() != u.dim() {
        return Err(Error::DimMismatch { expected: u.dim(), got: rho.dim() });
    }
    let out = u.matrix() * rho.matrix() * u.matrix().adjoint();
    Ok(DensityMatrix::from_valid(out))
}

/// Outcome probabilities for measuring every qubit of `rho` along the axes
/// in `basis`.  Index `m` is the outcome bit string read as a binary number
/// with qubit 0 as the most significant bit.  Tiny negative values from
/// rounding are clipped to zero and the vector is renormalized.
pub fn born_probabilities(rho: &DensityMatrix, basis: &BasisString) -> Result<Vec<f64>> {
    let k = rho.n_qubits();
    if basis.len() != k {
        return Err(Error::BasisLength { expected: k, got: basis.len() });
    }
    let d = rho.dim();
    let mut probs = Vec::with_capacity(d);
    let mut ket = vec![czero(); d];
    for m in 0..d {
        // |v_m> = (x)_q eigenvector(axis_q, bit_q), built MSB-first
        ket.clear();
        ket.push(c(1.0, 0.0));
        for (q, axis) in basis.axes().iter().enumerate() {
            let bit = ((m >> (k - 1 - q)) & 1) as u8;
            let e = axis.eigenvector(bit);
            let mut next = vec![czero(); ket.len() * 2];
            for (i, amp) in ket.iter().enumerate() {
                next[2 * i] = amp * e[0];
                next[2 * i + 1] = amp * e[1];
            }
            ket = next;
        }
        // <v| rho |v>
        let mut acc = czero();
        for r in 0..d {
            let mut row = czero();
            for s in 0..d {
                row += rho.matrix()[(r, s)] * ket[s];
            }
            acc += ket[r].conj() * row;
        }
        probs.push(acc.re);
    }
    let mut total = 0.0;
    for p in probs.iter_mut() {
        if *p < 0.0 {
            *p = 0.0;
        }
        total += *p;
    }
    if total > 0.0 {
        for p in probs.iter_mut() {
            *p /= total;
        }
    }
    Ok(probs)
}

/// Process state of the unitary channel `rho -> U rho U'`: the `2n`-qubit
/// pure state `(I (x) U) |omega>` where `|omega>` is the maximally
/// entangled pair of the input register with a reference copy.
pub fn choi_of_unitary(u: &Unitary) -> DensityMatrix {
    let d = u.dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut w = vec![czero(); d * d];
    for i in 0..d {
        for k in 0..d {
            w[i * d + k] = u.matrix()[(k, i)] * c(scale, 0.0);
        }
    }
    let dd = d * d;
    let mat = CMatrix::from_fn(dd, dd, |r, s| w[r] * w[s].conj());
    DensityMatrix::from_valid(mat)
}

/// Push a state through a channel held as a process state:
/// `rho_out = 2^n * Tr_1((rho_in^T (x) I) rho_choi)`.  The `2^n` factor
/// undoes the normalization that makes the process state a density matrix.
pub fn choi_evolve(choi: &DensityMatrix, rho_in: &DensityMatrix) -> Result<DensityMatrix> {
    let d = rho_in.dim();
    if choi.dim() != d * d {
        return Err(Error::DimMismatch { expected: d * d, got: choi.dim() });
    }
    let lifted = kron(&rho_in.matrix().transpose(), &CMatrix::identity(d, d));
    let product = lifted * choi.matrix();
    let out = raw_partial_trace(&product, (d, d), Subsystem::First).scale(d as f64);
    match DensityMatrix::new(out.clone()) {
        Ok(dm) => Ok(dm),
        Err(_) => Ok(project_to_physical(&out)),
    }
}

/// Nearest valid state to an arbitrary matrix: Hermitize, clip negative
/// eigenvalues to zero, renormalize the trace.  If everything clips away,
/// falls back to the maximally mixed state.
pub fn project_to_physical(m: &CMatrix) -> DensityMatrix {
    let d = m.nrows();
    assert_eq!(d, m.ncols(), "project_to_physical needs a square matrix");
    assert!(d.is_power_of_two(), "project_to_physical needs a power-of-two dimension");
    let herm = (m + m.adjoint()).scale(0.5);
    let (evals, vecs) = eigh(&herm);
    let clipped: Vec<f64> = evals.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        return DensityMatrix::maximally_mixed(d.trailing_zeros() as usize);
    }
    let scaled: Vec<f64> = clipped.iter().map(|&v| v / total).collect();
    DensityMatrix::from_valid(recompose(&scaled, &vecs))
}

/// Haar-distributed random unitary on `n_qubits`: QR of a complex Ginibre
/// matrix with the phases of R's diagonal folded back into Q.
pub fn haar_random_unitary(n_qubits: usize, rng: &mut impl Rng) -> Unitary {
    let d = 1usize << n_qubits;
    let normal = StandardNormal;
    let g = CMatrix::from_fn(d, d, |_, _| {
        c(normal.sample(rng), normal.sample(rng))
    });
    let qr = g.qr();
    let q = qr.q();
    let r = qr.r();
    let mut u = q;
    for j in 0..d {
        let rjj: Complex64 = r[(j, j)];
        let phase = if rjj.norm() > 0.0 { rjj / rjj.norm() } else { c(1.0, 0.0) };
        for i in 0..d {
            u[(i, j)] *= phase;
        }
    }
    Unitary { mat: u }
}

/// Random full-rank state: a Haar unitary's columns mixed with random
/// weights.  Handy for randomized identities in tests and benchmarks.
pub fn random_density_matrix(n_qubits: usize, rng: &mut impl Rng) -> DensityMatrix {
    let d = 1usize << n_qubits;
    let u = haar_random_unitary(n_qubits, rng);
    let mut weights: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 1e-6).collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    DensityMatrix::from_valid(recompose(&weights, u.matrix()))
}
