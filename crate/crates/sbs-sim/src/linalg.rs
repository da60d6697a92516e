//! Dense and sparse complex linear algebra used throughout the crate.
//!
//! Everything here is hand-rolled on top of `ndarray`: a cache-friendly
//! complex matmul, a cyclic Jacobi eigensolver for Hermitian matrices,
//! matrix exponentials (eigendecomposition for Hermitian generators,
//! scaling-and-squaring otherwise) and a small CSR sparse type tuned for
//! applying Hamiltonian terms to dense states.

use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;

pub type CMat = Array2<C64>;
pub type CVec = Array1<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Dense matrix product, row-accumulation (ikj) ordering.
pub fn matmul(a: &CMat, b: &CMat) -> CMat {
    let (n, k) = a.dim();
    let (k2, m) = b.dim();
    assert_eq!(k, k2, "matmul shape mismatch");
    let mut out = CMat::zeros((n, m));
    let bs = b.as_slice().expect("b contiguous");
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i).into_slice().expect("out contiguous");
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == ZERO {
                continue;
            }
            let brow = &bs[kk * m..(kk + 1) * m];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// Conjugate transpose.
pub fn dagger(a: &CMat) -> CMat {
    let (n, m) = a.dim();
    let mut out = CMat::zeros((m, n));
    for i in 0..n {
        for j in 0..m {
            out[[j, i]] = a[[i, j]].conj();
        }
    }
    out
}

pub fn identity(n: usize) -> CMat {
    CMat::from_diag_elem(n, ONE)
}

/// Kronecker product.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = CMat::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[[i, j]];
            if aij == ZERO {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[[i * br + k, j * bc + l]] = aij * b[[k, l]];
                }
            }
        }
    }
    out
}

pub fn max_abs(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

pub fn trace(a: &CMat) -> C64 {
    a.diag().iter().sum()
}

/// Deviation from Hermiticity, max |A - A†|.
pub fn herm_deviation(a: &CMat) -> f64 {
    let n = a.nrows();
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((a[[i, j]] - a[[j, i]].conj()).norm());
        }
    }
    dev
}

/// Eigendecomposition of a Hermitian matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns of a unitary matrix. Adequate for the dimensions used here
/// (≲ a few hundred); tolerance is driven to machine precision.
pub fn eigh(a: &CMat) -> (Array1<f64>, CMat) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eigh requires a square matrix");
    let mut m = a.clone();
    // symmetrize to guard against harmless asymmetry at roundoff level
    for i in 0..n {
        for j in 0..n {
            let s = 0.5 * (m[[i, j]] + m[[j, i]].conj());
            m[[i, j]] = s;
            m[[j, i]] = s.conj();
        }
    }
    let mut v = identity(n);
    let off = |m: &CMat| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m[[i, j]].norm_sqr();
            }
        }
        s.sqrt()
    };
    let scale: f64 = max_abs(&m).max(1e-300);
    let tol = 1e-14 * scale;
    for _sweep in 0..60 {
        if off(&m) <= tol * (n as f64) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.norm() <= tol * 1e-2 {
                    continue;
                }
                let app = m[[p, p]].re;
                let aqq = m[[q, q]].re;
                // phase so the effective off-diagonal element is real
                let phase = apq / apq.norm();
                let abs_apq = apq.norm();
                let tau = (aqq - app) / (2.0 * abs_apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let cth = 1.0 / (1.0 + t * t).sqrt();
                let sth = t * cth;
                let s = phase * c(sth);
                // columns p,q of M (acting from the right with J)
                for i in 0..n {
                    let mip = m[[i, p]];
                    let miq = m[[i, q]];
                    m[[i, p]] = c(cth) * mip - s.conj() * miq;
                    m[[i, q]] = s * mip + c(cth) * miq;
                }
                // rows p,q (acting from the left with J†)
                for j in 0..n {
                    let mpj = m[[p, j]];
                    let mqj = m[[q, j]];
                    m[[p, j]] = c(cth) * mpj - s * mqj;
                    m[[q, j]] = s.conj() * mpj + c(cth) * mqj;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c(cth) * vip - s.conj() * viq;
                    v[[i, q]] = s * vip + c(cth) * viq;
                }
            }
        }
    }
    let mut vals: Vec<(f64, usize)> =
        (0..n).map(|i| (m[[i, i]].re, i)).collect();
    vals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let eigvals = Array1::from_iter(vals.iter().map(|(val, _)| *val));
    let mut vecs = CMat::zeros((n, n));
    for (newcol, (_, oldcol)) in vals.iter().enumerate() {
        for i in 0..n {
            vecs[[i, newcol]] = v[[i, *oldcol]];
        }
    }
    (eigvals, vecs)
}

/// exp(z·G) for Hermitian G, via eigendecomposition: V diag(e^{z λ}) V†.
pub fn expm_herm(g: &CMat, z: C64) -> CMat {
    let (vals, vecs) = eigh(g);
    let n = g.nrows();
    let mut scaled = vecs.clone();
    for (j, &lam) in vals.iter().enumerate() {
        let f = (z * lam).exp();
        for i in 0..n {
            scaled[[i, j]] *= f;
        }
    }
    matmul(&scaled, &dagger(&vecs))
}

/// General matrix exponential via scaling-and-squaring with Padé(13).
pub fn expm(a: &CMat) -> CMat {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let norm = one_norm(a);
    let theta13 = 5.371_920_351_148_152;
    let s = if norm > theta13 {
        (norm / theta13).log2().ceil() as u32
    } else {
        0
    };
    let a_scaled = a.mapv(|x| x / c((1u64 << s) as f64));
    let mut r = pade13(&a_scaled);
    for _ in 0..s {
        r = matmul(&r, &r);
    }
    r
}

fn one_norm(a: &CMat) -> f64 {
    let (n, m) = a.dim();
    let mut best = 0.0f64;
    for j in 0..m {
        let mut s = 0.0;
        for i in 0..n {
            s += a[[i, j]].norm();
        }
        best = best.max(s);
    }
    best
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn pade13(a: &CMat) -> CMat {
    let n = a.nrows();
    let eye = identity(n);
    let a2 = matmul(a, a);
    let a4 = matmul(&a2, &a2);
    let a6 = matmul(&a2, &a4);
    let b = &PADE13;
    let w1 = &a6 * c(b[13]) + &a4 * c(b[11]) + &a2 * c(b[9]);
    let w2 = matmul(&w1, &a6)
        + &a6 * c(b[7])
        + &a4 * c(b[5])
        + &a2 * c(b[3])
        + &eye * c(b[1]);
    let u = matmul(a, &w2);
    let z1 = &a6 * c(b[12]) + &a4 * c(b[10]) + &a2 * c(b[8]);
    let v = matmul(&z1, &a6)
        + &a6 * c(b[6])
        + &a4 * c(b[4])
        + &a2 * c(b[2])
        + &eye * c(b[0]);
    let num = &v + &u;
    let den = &v - &u;
    solve(&den, &num)
}

/// Solve A·X = B by Gaussian elimination with partial pivoting.
pub fn solve(a: &CMat, b: &CMat) -> CMat {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    assert_eq!(n, b.nrows());
    let m = b.ncols();
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let mut piv = col;
        let mut best = lu[[col, col]].norm();
        for row in (col + 1)..n {
            let v = lu[[row, col]].norm();
            if v > best {
                best = v;
                piv = row;
            }
        }
        assert!(best > 1e-300, "singular matrix in solve");
        if piv != col {
            for j in 0..n {
                lu.swap([col, j], [piv, j]);
            }
            for j in 0..m {
                x.swap([col, j], [piv, j]);
            }
        }
        let d = lu[[col, col]];
        for row in (col + 1)..n {
            let f = lu[[row, col]] / d;
            if f == ZERO {
                continue;
            }
            for j in col..n {
                let v = lu[[col, j]];
                lu[[row, j]] -= f * v;
            }
            for j in 0..m {
                let v = x[[col, j]];
                x[[row, j]] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        let d = lu[[col, col]];
        for j in 0..m {
            let mut s = x[[col, j]];
            for k in (col + 1)..n {
                s -= lu[[col, k]] * x[[k, j]];
            }
            x[[col, j]] = s / d;
        }
    }
    x
}

/// Sparse complex matrix in CSR form.
///
/// Tuned for the access patterns of the evolution engines: `H·ρ`
/// accumulates scaled rows of ρ (contiguous), `ρ·H` walks each row of ρ
/// against the entry list (also contiguous per row).
#[derive(Clone, Debug)]
pub struct SparseOp {
    pub dim: usize,
    indptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl SparseOp {
    pub fn from_triplets(dim: usize, mut trip: Vec<(usize, usize, C64)>) -> Self {
        trip.retain(|&(_, _, v)| v != ZERO);
        trip.sort_by_key(|&(r, c, _)| (r, c));
        let mut merged: Vec<(usize, usize, C64)> = Vec::with_capacity(trip.len());
        for (r, c, v) in trip {
            match merged.last_mut() {
                Some((lr, lc, lv)) if *lr == r && *lc == c => *lv += v,
                _ => merged.push((r, c, v)),
            }
        }
        let mut indptr = vec![0usize; dim + 1];
        for &(r, _, _) in &merged {
            indptr[r + 1] += 1;
        }
        for i in 0..dim {
            indptr[i + 1] += indptr[i];
        }
        let cols = merged.iter().map(|&(_, c, _)| c).collect();
        let vals = merged.iter().map(|&(_, _, v)| v).collect();
        SparseOp { dim, indptr, cols, vals }
    }

    pub fn from_dense(a: &CMat, drop_tol: f64) -> Self {
        let n = a.nrows();
        let mut trip = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if a[[i, j]].norm() > drop_tol {
                    trip.push((i, j, a[[i, j]]));
                }
            }
        }
        Self::from_triplets(n, trip)
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Column sums of |A_ij|²; equals diag(A†A) when that is diagonal.
    pub fn column_norms_sqr(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for r in 0..self.dim {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[self.cols[k]] += self.vals[k].norm_sqr();
            }
        }
        out
    }

    pub fn to_dense(&self) -> CMat {
        let mut out = CMat::zeros((self.dim, self.dim));
        for r in 0..self.dim {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[[r, self.cols[k]]] += self.vals[k];
            }
        }
        out
    }

    pub fn dagger(&self) -> SparseOp {
        let mut trip = Vec::with_capacity(self.nnz());
        for r in 0..self.dim {
            for k in self.indptr[r]..self.indptr[r + 1] {
                trip.push((self.cols[k], r, self.vals[k].conj()));
            }
        }
        SparseOp::from_triplets(self.dim, trip)
    }

    pub fn scaled(&self, z: C64) -> SparseOp {
        let mut out = self.clone();
        for v in out.vals.iter_mut() {
            *v *= z;
        }
        out
    }

    /// y += z · A·x
    pub fn apply_vec(&self, z: C64, x: &[C64], y: &mut [C64]) {
        for r in 0..self.dim {
            let mut acc = ZERO;
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[r] += z * acc;
        }
    }

    /// OUT += z · A·R for dense row-major R.
    pub fn left_mul_acc(&self, z: C64, r: &CMat, out: &mut CMat) {
        let n = self.dim;
        let rs = r.as_slice().expect("rho contiguous");
        let os = out.as_slice_mut().expect("out contiguous");
        for row in 0..n {
            let orow = &mut os[row * n..(row + 1) * n];
            for k in self.indptr[row]..self.indptr[row + 1] {
                let v = z * self.vals[k];
                let rrow = &rs[self.cols[k] * n..(self.cols[k] + 1) * n];
                for (o, &x) in orow.iter_mut().zip(rrow) {
                    *o += v * x;
                }
            }
        }
    }

    /// OUT += z · R·A for dense row-major R.
    pub fn right_mul_acc(&self, z: C64, r: &CMat, out: &mut CMat) {
        let n = self.dim;
        let rs = r.as_slice().expect("rho contiguous");
        let os = out.as_slice_mut().expect("out contiguous");
        for row in 0..n {
            let rrow = &rs[row * n..(row + 1) * n];
            let orow = &mut os[row * n..(row + 1) * n];
            for arow in 0..self.dim {
                let rik = rrow[arow];
                if rik == ZERO {
                    continue;
                }
                let f = z * rik;
                for k in self.indptr[arow]..self.indptr[arow + 1] {
                    orow[self.cols[k]] += f * self.vals[k];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randish_herm(n: usize) -> CMat {
        // deterministic pseudo-random Hermitian matrix
        let mut a = CMat::zeros((n, n));
        let mut s = 0.123f64;
        let mut next = move || {
            s = (s * 997.0 + 0.317).fract();
            s - 0.5
        };
        for i in 0..n {
            for j in 0..n {
                a[[i, j]] = C64::new(next(), next());
            }
        }
        let ad = dagger(&a);
        (&a + &ad).mapv(|z| 0.5 * z)
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let a = randish_herm(24);
        let (vals, vecs) = eigh(&a);
        let mut lam = CMat::zeros((24, 24));
        for i in 0..24 {
            lam[[i, i]] = c(vals[i]);
        }
        let rec = matmul(&matmul(&vecs, &lam), &dagger(&vecs));
        assert!(max_abs_diff(&rec, &a) < 1e-11);
        let unit = matmul(&dagger(&vecs), &vecs);
        assert!(max_abs_diff(&unit, &identity(24)) < 1e-12);
    }

    #[test]
    fn expm_matches_eig_route_for_hermitian() {
        let g = randish_herm(12);
        let e1 = expm_herm(&g, I * c(0.7));
        let a = g.mapv(|z| z * I * c(0.7));
        let e2 = expm(&a);
        assert!(max_abs_diff(&e1, &e2) < 1e-11);
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let z = CMat::zeros((5, 5));
        assert!(max_abs_diff(&expm(&z), &identity(5)) < 1e-14);
    }

    #[test]
    fn sparse_matches_dense_products() {
        let a = randish_herm(9);
        let r = randish_herm(9);
        let sp = SparseOp::from_dense(&a, 0.0);
        let mut left = CMat::zeros((9, 9));
        sp.left_mul_acc(ONE, &r, &mut left);
        assert!(max_abs_diff(&left, &matmul(&a, &r)) < 1e-12);
        let mut right = CMat::zeros((9, 9));
        sp.right_mul_acc(ONE, &r, &mut right);
        assert!(max_abs_diff(&right, &matmul(&r, &a)) < 1e-12);
        let mut y = vec![ZERO; 9];
        let x: Vec<C64> = (0..9).map(|i| C64::new(i as f64, -0.5)).collect();
        sp.apply_vec(ONE, &x, &mut y);
        for i in 0..9 {
            let mut acc = ZERO;
            for j in 0..9 {
                acc += a[[i, j]] * x[j];
            }
            assert!((acc - y[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn solve_linear_system() {
        let a = randish_herm(7) + identity(7).mapv(|z| z * c(4.0));
        let b = randish_herm(7);
        let x = solve(&a, &b);
        assert!(max_abs_diff(&matmul(&a, &x), &b) < 1e-10);
    }
}
