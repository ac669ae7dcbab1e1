//! Distance measures between quantum states.
//!
//! Every measure takes two states of equal dimension.  Trace distance is the
//! default utility functional; the rest are selectable alternatives.

use thiserror::Error;

use crate::qcore::{eigh, DensityMatrix, TOLERANCE};

/// Smoothing floor for the relative-entropy measure.
pub const KL_EPS_DEFAULT: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("operand is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotPsd(f64),
    #[error("unknown distance id {0:?}")]
    UnknownId(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Which distance the agent optimizes.  The process-matrix learner works
/// with any of these; trace distance is the one used by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceId {
    Trace,
    HilbertSchmidt,
    Bures,
    Hamming,
    Kl,
}

impl DistanceId {
    pub fn as_str(self) -> &'static str {
        match self {
            DistanceId::Trace => "trace",
            DistanceId::HilbertSchmidt => "hilbert_schmidt",
            DistanceId::Bures => "bures",
            DistanceId::Hamming => "hamming",
            DistanceId::Kl => "kl",
        }
    }
}

impl std::fmt::Display for DistanceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DistanceId {
    type Err = MetricError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trace" => Ok(DistanceId::Trace),
            "hilbert_schmidt" => Ok(DistanceId::HilbertSchmidt),
            "bures" => Ok(DistanceId::Bures),
            "hamming" => Ok(DistanceId::Hamming),
            "kl" => Ok(DistanceId::Kl),
            other => Err(MetricError::UnknownId(other.to_string())),
        }
    }
}

fn check_dims(a: &DensityMatrix, b: &DensityMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(MetricError::DimMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

/// `(1/2) sum |eig(a - b)|`.
pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    check_dims(a, b)?;
    let diff = a.matrix() - b.matrix();
    let (evals, _) = eigh(&diff);
    Ok(0.5 * evals.iter().map(|v| v.abs()).sum::<f64>())
}

/// Frobenius norm of the difference.
pub fn hilbert_schmidt(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    check_dims(a, b)?;
    let diff = a.matrix() - b.matrix();
    Ok(diff.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt())
}

/// Principal square root of a PSD Hermitian state matrix.  Eigenvalues in
/// `[-TOLERANCE, 0)` count as rounding noise and clip to zero; anything
/// more negative is a domain error.
fn psd_sqrt(a: &DensityMatrix) -> Result<crate::qcore::CMatrix> {
    let (evals, vecs) = eigh(a.matrix());
    let mut roots = Vec::with_capacity(evals.len());
    for &v in &evals {
        if v < -TOLERANCE {
            return Err(MetricError::NotPsd(v));
        }
        roots.push(v.max(0.0).sqrt());
    }
    let d = vecs.nrows();
    let diag = crate::qcore::CMatrix::from_fn(d, d, |i, j| {
        if i == j {
            num_complex::Complex64::new(roots[i], 0.0)
        } else {
            num_complex::Complex64::new(0.0, 0.0)
        }
    });
    Ok(&vecs * diag * vecs.adjoint())
}

/// Uhlmann fidelity `F = (Tr sqrt(sqrt(a) b sqrt(a)))^2`, clamped into
/// `[0, 1]` against rounding overshoot.
pub fn fidelity(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    check_dims(a, b)?;
    let ra = psd_sqrt(a)?;
    let inner = &ra * b.matrix() * &ra;
    let (evals, _) = eigh(&inner);
    let mut tr = 0.0;
    for &v in &evals {
        if v < -TOLERANCE {
            return Err(MetricError::NotPsd(v));
        }
        tr += v.max(0.0).sqrt();
    }
    Ok((tr * tr).clamp(0.0, 1.0))
}

/// `sqrt(2 (1 - sqrt(F)))`.
pub fn bures(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    let f = fidelity(a, b)?;
    Ok((2.0 * (1.0 - f.sqrt())).max(0.0).sqrt())
}

/// Fraction of matrix cells that differ once both operands are rounded to
/// `places` decimals (real and imaginary parts compared separately; a cell
/// differs if either part does).
pub fn hamming(a: &DensityMatrix, b: &DensityMatrix, places: u32) -> Result<f64> {
    check_dims(a, b)?;
    let scale = 10f64.powi(places as i32);
    let rq = |x: f64| (x * scale).round() as i64;
    let mut differing = 0usize;
    let d = a.dim();
    for (x, y) in a.matrix().iter().zip(b.matrix().iter()) {
        if rq(x.re) != rq(y.re) || rq(x.im) != rq(y.im) {
            differing += 1;
        }
    }
    Ok(differing as f64 / (d * d) as f64)
}

/// Relative entropy between the diagonals in bits: both diagonals are
/// clipped to at least `eps`, renormalized, then `sum p log2(p/q)`.
pub fn kl(a: &DensityMatrix, b: &DensityMatrix, eps: f64) -> Result<f64> {
    check_dims(a, b)?;
    let d = a.dim();
    let mut p: Vec<f64> = (0..d).map(|i| a.matrix()[(i, i)].re.max(eps)).collect();
    let mut q: Vec<f64> = (0..d).map(|i| b.matrix()[(i, i)].re.max(eps)).collect();
    let (ps, qs): (f64, f64) = (p.iter().sum(), q.iter().sum());
    for v in p.iter_mut() {
        *v /= ps;
    }
    for v in q.iter_mut() {
        *v /= qs;
    }
    Ok(p.iter().zip(q.iter()).map(|(&pi, &qi)| pi * (pi / qi).log2()).sum())
}

/// Dispatch on a [`DistanceId`].  `places` feeds the cell-rounding measure
/// and is ignored by the others; the relative-entropy measure uses its
/// default smoothing floor.
pub fn distance(id: DistanceId, a: &DensityMatrix, b: &DensityMatrix, places: u32) -> Result<f64> {
    match id {
        DistanceId::Trace => trace_distance(a, b),
        DistanceId::HilbertSchmidt => hilbert_schmidt(a, b),
        DistanceId::Bures => bures(a, b),
        DistanceId::Hamming => hamming(a, b, places),
        DistanceId::Kl => kl(a, b, KL_EPS_DEFAULT),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::{random_density_matrix, DensityMatrix};
    use crate::rng_from_seed;
    use num_complex::Complex64;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn ket0() -> DensityMatrix {
        DensityMatrix::pure(&[c(1.0, 0.0), c(0.0, 0.0)]).unwrap()
    }

    fn ket1() -> DensityMatrix {
        DensityMatrix::pure(&[c(0.0, 0.0), c(1.0, 0.0)]).unwrap()
    }

    fn ket_plus() -> DensityMatrix {
        DensityMatrix::pure(&[c(1.0, 0.0), c(1.0, 0.0)]).unwrap()
    }

    fn mixed1() -> DensityMatrix {
        DensityMatrix::maximally_mixed(1)
    }

    #[test]
    fn trace_distance_analytic_values() {
        // |0><0| vs I/2: eigenvalues of the difference are +1/2 and -1/2.
        let d = trace_distance(&ket0(), &mixed1()).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        // orthogonal pure states are at maximal distance
        let d = trace_distance(&ket0(), &ket1()).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hilbert_schmidt_analytic_value() {
        let d = hilbert_schmidt(&ket0(), &mixed1()).unwrap();
        assert!((d - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn fidelity_and_bures_analytic_values() {
        let f = fidelity(&ket0(), &ket_plus()).unwrap();
        assert!((f - 0.5).abs() < 1e-12);
        let b = bures(&ket0(), &ket_plus()).unwrap();
        assert!((b - (2.0 - 2f64.sqrt()).sqrt()).abs() < 1e-12);
        // orthogonal states: F = 0, Bures = sqrt(2)
        let b = bures(&ket0(), &ket1()).unwrap();
        assert!((b - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hamming_counts_differing_cells() {
        // |0><0| vs |1><1| differ in the two diagonal cells of four.
        let h = hamming(&ket0(), &ket1(), 5).unwrap();
        assert!((h - 0.5).abs() < 1e-12);
        // sub-precision perturbations are invisible
        let h = hamming(&ket0(), &ket0(), 5).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn kl_analytic_value() {
        // diag(1, 0) vs diag(0.5, 0.5) is 1 bit up to the smoothing floor.
        let d = kl(&ket0(), &mixed1(), KL_EPS_DEFAULT).unwrap();
        assert!((d - 1.0).abs() < 1e-7, "kl = {d}");
    }

    #[test]
    fn kl_is_asymmetric_and_nonnegative() {
        let ab = kl(&ket0(), &mixed1(), KL_EPS_DEFAULT).unwrap();
        let ba = kl(&mixed1(), &ket0(), KL_EPS_DEFAULT).unwrap();
        assert!(ab >= 0.0 && ba >= 0.0);
        assert!((ab - ba).abs() > 1e-3);
    }

    #[test]
    fn symmetric_measures_on_random_pairs() {
        let mut rng = rng_from_seed(31);
        for _ in 0..1000 {
            let a = random_density_matrix(1, &mut rng);
            let b = random_density_matrix(1, &mut rng);
            for id in [DistanceId::Trace, DistanceId::HilbertSchmidt, DistanceId::Bures] {
                let ab = distance(id, &a, &b, 5).unwrap();
                let ba = distance(id, &b, &a, 5).unwrap();
                assert!((ab - ba).abs() < 1e-9, "{id} asymmetric: {ab} vs {ba}");
                let aa = distance(id, &a, &a, 5).unwrap();
                assert!(aa.abs() < 1e-6, "{id} self-distance {aa}");
            }
        }
    }

    #[test]
    fn triangle_inequality_on_random_triples() {
        let mut rng = rng_from_seed(37);
        for _ in 0..1000 {
            let a = random_density_matrix(1, &mut rng);
            let b = random_density_matrix(1, &mut rng);
            let c_ = random_density_matrix(1, &mut rng);
            for id in [DistanceId::Trace, DistanceId::HilbertSchmidt, DistanceId::Bures] {
                let ab = distance(id, &a, &b, 5).unwrap();
                let bc = distance(id, &b, &c_, 5).unwrap();
                let ac = distance(id, &a, &c_, 5).unwrap();
                assert!(ac <= ab + bc + 1e-9, "{id} triangle broke: {ac} > {ab} + {bc}");
            }
        }
    }

    #[test]
    fn bures_squared_tracks_fidelity() {
        let mut rng = rng_from_seed(43);
        for _ in 0..1000 {
            let a = random_density_matrix(1, &mut rng);
            let b = random_density_matrix(1, &mut rng);
            let f = fidelity(&a, &b).unwrap();
            let bu = bures(&a, &b).unwrap();
            assert!((bu * bu - 2.0 * (1.0 - f.sqrt())).abs() < 1e-9);
        }
    }

    #[test]
    fn fidelity_stays_in_unit_interval() {
        let mut rng = rng_from_seed(47);
        for _ in 0..200 {
            let a = random_density_matrix(2, &mut rng);
            let b = random_density_matrix(2, &mut rng);
            let f = fidelity(&a, &b).unwrap();
            assert!((0.0..=1.0).contains(&f));
        }
        let f = fidelity(&ket0(), &ket0()).unwrap();
        assert!((f - 1.0).abs() < 1e-9);
    }

    #[test]
    fn trace_distance_rejects_dim_mismatch() {
        let a = DensityMatrix::maximally_mixed(1);
        let b = DensityMatrix::maximally_mixed(2);
        assert!(matches!(trace_distance(&a, &b), Err(MetricError::DimMismatch(2, 4))));
    }

    #[test]
    fn distance_id_string_round_trip() {
        for id in [
            DistanceId::Trace,
            DistanceId::HilbertSchmidt,
            DistanceId::Bures,
            DistanceId::Hamming,
            DistanceId::Kl,
        ] {
            let parsed: DistanceId = id.as_str().parse().unwrap();
            assert_eq!(parsed, id);
        }
        assert!("mahalanobis".parse::<DistanceId>().is_err());
    }
}
