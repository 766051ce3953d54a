//! Dense numerical primitives: truncated SVD, Moore-Penrose pseudoinverse,
//! and eigendecomposition with deterministic ordering and phase conventions.
//!
//! All estimators in this crate reduce to these three operations. Everything
//! is computed in `f64` on owned `nalgebra` matrices.

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KoopmanError, Result};

type C64 = Complex<f64>;

/// How many singular values to keep when factoring or pseudoinverting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruncationRule {
    /// Keep every strictly positive singular value.
    Exact,
    /// Keep at most `r` leading singular values (clamped to the actual rank).
    RankCap(usize),
    /// Discard singular values with `sigma_i < tau * sigma_max`, `tau` in (0, 1).
    RelativeThreshold(f64),
}

impl Default for TruncationRule {
    fn default() -> Self {
        // Near-machine threshold: exact recovery on clean data while guarding
        // rank-deficient snapshot matrices.
        TruncationRule::RelativeThreshold(1e-12)
    }
}

impl TruncationRule {
    fn validate(&self) -> Result<()> {
        match *self {
            TruncationRule::RelativeThreshold(tau) if !(tau > 0.0 && tau < 1.0) => Err(
                KoopmanError::Rule(format!("relative threshold must lie in (0, 1), got {tau}")),
            ),
            TruncationRule::RankCap(0) => Err(KoopmanError::Rule(
                "rank cap must be a positive integer".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Thin SVD factors `M ≈ U diag(S) Vᵀ` after truncation.
///
/// `singular_values` is strictly positive and nonincreasing; the columns of
/// `left_vectors` (m×r) and `right_vectors` (n×r) are orthonormal. Each left
/// vector carries a deterministic sign: its largest-magnitude entry is
/// positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub left_vectors: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub right_vectors: DMatrix<f64>,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `U diag(S) Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = &self.left_vectors * DMatrix::from_diagonal(&self.singular_values);
        scaled * self.right_vectors.transpose()
    }

    /// `V diag(1/S) Uᵀ`; the zero matrix when the rank is zero.
    pub fn pseudoinverse(&self) -> DMatrix<f64> {
        let (m, n) = (self.left_vectors.nrows(), self.right_vectors.nrows());
        if self.rank() == 0 {
            return DMatrix::zeros(n, m);
        }
        let inv = DVector::from_iterator(self.rank(), self.singular_values.iter().map(|s| 1.0 / s));
        &self.right_vectors * DMatrix::from_diagonal(&inv) * self.left_vectors.transpose()
    }
}

/// Eigendecomposition of a real square matrix.
///
/// Eigenvalues are ordered by descending modulus, ties broken by ascending
/// argument in [0, 2π). Column `j` of `right_vectors` satisfies
/// `A v_j = λ_j v_j`; column `j` of `left_vectors` satisfies `w_jᴴ A = λ_j w_jᴴ`.
/// All vectors have unit 2-norm with their largest-modulus entry made real
/// and positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub eigenvalues: DVector<C64>,
    pub right_vectors: DMatrix<C64>,
    pub left_vectors: DMatrix<C64>,
}

/// Truncated SVD of `m` under `rule`.
pub fn svd(m: &DMatrix<f64>, rule: &TruncationRule) -> Result<SvdFactors> {
    if m.is_empty() {
        return Err(KoopmanError::Dimension(
            "cannot factor an empty matrix".into(),
        ));
    }
    rule.validate()?;
    let f = m.clone().svd(true, true);
    let u = f.u.expect("svd computed with vectors");
    let v_t = f.v_t.expect("svd computed with vectors");
    let s = f.singular_values;

    // nalgebra returns singular values sorted descending; drop exact zeros.
    let keep = s.iter().take_while(|&&x| x > 0.0).count();
    let mut left = u.columns(0, keep).into_owned();
    let mut right = v_t.rows(0, keep).transpose().into_owned();
    let values = DVector::from_iterator(keep, s.iter().take(keep).copied());

    for j in 0..keep {
        let col = left.column(j);
        let pivot = col
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |acc, (i, x)| {
                if x.abs() > acc.1 {
                    (i, x.abs())
                } else {
                    acc
                }
            });
        if left[(pivot.0, j)] < 0.0 {
            left.column_mut(j).neg_mut();
            right.column_mut(j).neg_mut();
        }
    }

    truncate(
        SvdFactors {
            left_vectors: left,
            singular_values: values,
            right_vectors: right,
        },
        rule,
    )
}

/// Apply `rule` to already-computed factors. Idempotent: reapplying the same
/// rule returns the factors unchanged.
pub fn truncate(f: SvdFactors, rule: &TruncationRule) -> Result<SvdFactors> {
    rule.validate()?;
    let r = f.rank();
    let keep = match *rule {
        TruncationRule::Exact => r,
        TruncationRule::RankCap(cap) => cap.min(r),
        TruncationRule::RelativeThreshold(tau) => {
            if r == 0 {
                0
            } else {
                let cutoff = tau * f.singular_values[0];
                f.singular_values
                    .iter()
                    .take_while(|&&s| s >= cutoff)
                    .count()
            }
        }
    };
    if keep == r {
        return Ok(f);
    }
    Ok(SvdFactors {
        left_vectors: f.left_vectors.columns(0, keep).into_owned(),
        singular_values: f.singular_values.rows(0, keep).into_owned(),
        right_vectors: f.right_vectors.columns(0, keep).into_owned(),
    })
}

/// Moore-Penrose pseudoinverse of `m` truncated under `rule`.
pub fn pinv(m: &DMatrix<f64>, rule: &TruncationRule) -> Result<DMatrix<f64>> {
    Ok(svd(m, rule)?.pseudoinverse())
}

fn arg_2pi(c: C64) -> f64 {
    let a = c.im.atan2(c.re);
    if a < 0.0 {
        a + 2.0 * std::f64::consts::PI
    } else {
        a
    }
}

/// Sort eigenvalue indices: modulus descending, then (within modulus ties up
/// to a relative 1e-9) argument ascending in [0, 2π).
fn eigen_order(values: &[C64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .norm()
            .partial_cmp(&values[a].norm())
            .expect("finite eigenvalue moduli")
    });
    let mut start = 0;
    while start < idx.len() {
        let head = values[idx[start]].norm();
        let mut end = start + 1;
        while end < idx.len() && (head - values[idx[end]].norm()).abs() <= 1e-9 * head.max(1e-300) {
            end += 1;
        }
        idx[start..end].sort_by(|&a, &b| {
            arg_2pi(values[a])
                .partial_cmp(&arg_2pi(values[b]))
                .expect("finite arguments")
        });
        start = end;
    }
    idx
}

/// Rotate the phase so the largest-modulus entry is real and positive, then
/// normalize to unit 2-norm.
fn normalize_phase(v: &mut DVector<C64>) {
    let norm = v.norm();
    if norm > 0.0 {
        *v /= C64::new(norm, 0.0);
    }
    let mut pivot = 0usize;
    let mut best = 0.0f64;
    for (i, x) in v.iter().enumerate() {
        if x.norm() > best {
            best = x.norm();
            pivot = i;
        }
    }
    if best > 0.0 {
        let phase = v[pivot] / C64::new(best, 0.0);
        let rot = phase.conj();
        for x in v.iter_mut() {
            *x *= rot;
        }
    }
}

/// Orthonormal basis for the (approximate) null space of `b`, taking the
/// `count` right singular vectors with smallest singular values.
fn null_basis(b: &DMatrix<C64>, count: usize, tol: f64) -> (Vec<DVector<C64>>, usize) {
    let f = b.clone().svd(false, true);
    let v_t = f.v_t.expect("svd computed with vectors");
    let s = &f.singular_values;
    let n = v_t.ncols();
    let dim = s.iter().filter(|&&x| x <= tol).count().max(1).min(count);
    let mut basis = Vec::with_capacity(dim);
    for k in 0..dim {
        let row = n.min(v_t.nrows()) - 1 - k;
        basis.push(v_t.row(row).conjugate().transpose());
    }
    (basis, dim)
}

const SCHUR_MAX_ITER: usize = 10_000;

/// Eigenvalues via the real Schur form. The QR iteration can stall on highly
/// structured matrices (permutation cycles, circulants); when it does, a
/// seeded random orthogonal similarity transform breaks the structure without
/// moving the spectrum, and the iteration is retried.
fn complex_eigenvalues_robust(m: &DMatrix<f64>) -> Result<DVector<C64>> {
    if let Some(schur) = m.clone().try_schur(f64::EPSILON, SCHUR_MAX_ITER) {
        return Ok(schur.complex_eigenvalues());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x51C2_95EE_D000);
    for _ in 0..4 {
        let q = DMatrix::from_fn(m.nrows(), m.ncols(), |_, _| rng.random_range(-1.0..1.0))
            .qr()
            .q();
        let b = q.transpose() * m * &q;
        if let Some(schur) = b.try_schur(f64::EPSILON, SCHUR_MAX_ITER) {
            return Ok(schur.complex_eigenvalues());
        }
    }
    Err(KoopmanError::Numerical(
        "eigenvalue iteration failed to converge".into(),
    ))
}

/// Eigendecomposition of a real square matrix, with right and left
/// eigenvectors recovered per eigenvalue cluster from complex null spaces.
pub fn eig(m: &DMatrix<f64>) -> Result<EigenDecomposition> {
    if m.nrows() != m.ncols() {
        return Err(KoopmanError::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.is_empty() {
        return Err(KoopmanError::Dimension(
            "cannot decompose an empty matrix".into(),
        ));
    }
    let n = m.nrows();
    let raw = complex_eigenvalues_robust(m)?;
    let order = eigen_order(raw.as_slice());
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| raw[i]));

    let a: DMatrix<C64> = m.map(|x| C64::new(x, 0.0));
    let a_t = a.transpose();
    let scale = m.norm().max(1.0);
    let cluster_tol = 1e-8 * scale;
    let null_tol = 1e-8 * scale;

    let mut right = DMatrix::<C64>::zeros(n, n);
    let mut left = DMatrix::<C64>::zeros(n, n);

    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (eigenvalues[end] - eigenvalues[start]).norm() <= cluster_tol {
            end += 1;
        }
        let k = end - start;
        let mean = eigenvalues.rows(start, k).sum() / C64::new(k as f64, 0.0);

        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] -= mean;
        }
        let (rv, rdim) = null_basis(&shifted, k, null_tol);

        let mut shifted_t = a_t.clone();
        for i in 0..n {
            shifted_t[(i, i)] -= mean.conj();
        }
        let (lv, ldim) = null_basis(&shifted_t, k, null_tol);

        for j in 0..k {
            // A defective cluster has fewer independent eigenvectors than
            // eigenvalues; reuse the basis cyclically in that case.
            let mut r = rv[j % rdim].clone();
            let mut l = lv[j % ldim].clone();
            normalize_phase(&mut r);
            normalize_phase(&mut l);
            right.set_column(start + j, &r);
            left.set_column(start + j, &l);
        }
        start = end;
    }

    Ok(EigenDecomposition {
        eigenvalues,
        right_vectors: right,
        left_vectors: left,
    })
}
