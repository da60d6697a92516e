//! Truncated Hilbert-space core: the spin ⊗ mode₁ ⊗ mode₂ ⊗ … space,
//! operator and state constructors, the displaced-joint-parity Wigner
//! transform, and quantum-information functionals.
//!
//! Basis ordering is fixed: spin slowest, then mode 1, then mode 2, …
//! (lexicographic). Spin index 0 is |↓⟩, index 1 is |↑⟩.

use crate::linalg::{
    self, c, dagger, eigh, expm_herm, identity, kron, matmul, CMat, CVec,
    SparseOp, I, ONE, ZERO,
};
use crate::{Error, Result};
use num_complex::Complex64 as C64;

/// Spin states of the hyperfine qubit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spin {
    Down,
    Up,
}

impl Spin {
    pub fn index(self) -> usize {
        match self {
            Spin::Down => 0,
            Spin::Up => 1,
        }
    }
}

/// Parity branch of an entangled coherent state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn sign(self) -> f64 {
        match self {
            Parity::Even => 1.0,
            Parity::Odd => -1.0,
        }
    }
}

/// A tensor factor of the Hilbert space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subsystem {
    Spin,
    Mode(usize),
}

/// Description of the truncated spin ⊗ modes Hilbert space.
///
/// `spin_dim` is always 2 for constructed spaces; partial traces may
/// produce degenerate (dim-1) spin factors for mode-only marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct HilbertSpec {
    pub spin_dim: usize,
    pub mode_dims: Vec<usize>,
    pub lamb_dicke: Vec<f64>,
}

impl HilbertSpec {
    /// Standard two-level-spin space with the given Fock truncations and
    /// Lamb–Dicke parameters per mode.
    pub fn new(mode_dims: Vec<usize>, lamb_dicke: Vec<f64>) -> Result<Self> {
        if mode_dims.len() != lamb_dicke.len() {
            return Err(Error::InvalidSpace(format!(
                "{} mode dims but {} Lamb-Dicke parameters",
                mode_dims.len(),
                lamb_dicke.len()
            )));
        }
        if mode_dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidSpace("mode dims must be >= 2".into()));
        }
        if lamb_dicke.iter().any(|&e| !(0.0..1.0).contains(&e) || e == 0.0) {
            return Err(Error::InvalidSpace(
                "Lamb-Dicke parameters must lie in (0, 1)".into(),
            ));
        }
        Ok(HilbertSpec { spin_dim: 2, mode_dims, lamb_dicke })
    }

    /// Two radial modes with equal truncation, the workhorse configuration.
    pub fn two_modes(dim: usize, eta1: f64, eta2: f64) -> Result<Self> {
        Self::new(vec![dim, dim], vec![eta1, eta2])
    }

    /// Default space: two modes truncated at 20 Fock levels with
    /// η = (0.1, 0.087).
    pub fn default_two_mode() -> Self {
        Self::two_modes(20, 0.1, 0.087).expect("valid default space")
    }

    pub fn n_modes(&self) -> usize {
        self.mode_dims.len()
    }

    pub fn motional_dim(&self) -> usize {
        self.mode_dims.iter().product()
    }

    pub fn total_dim(&self) -> usize {
        self.spin_dim * self.motional_dim()
    }

    /// Strides of [spin, mode 0, mode 1, …] in the flattened index.
    pub fn strides(&self) -> Vec<usize> {
        let m = self.n_modes();
        let mut strides = vec![1usize; m + 1];
        for j in (0..m).rev() {
            strides[j + 1] = if j + 1 < m {
                strides[j + 2] * self.mode_dims[j + 1]
            } else {
                1
            };
        }
        strides[0] = self.motional_dim();
        strides
    }

    pub fn index_of(&self, spin: usize, ns: &[usize]) -> usize {
        let strides = self.strides();
        let mut idx = spin * strides[0];
        for (j, &n) in ns.iter().enumerate() {
            idx += n * strides[j + 1];
        }
        idx
    }

    /// Per-basis-index occupation of mode `j` (lookup table).
    pub fn mode_index_table(&self, j: usize) -> Vec<usize> {
        let strides = self.strides();
        (0..self.total_dim())
            .map(|idx| (idx / strides[j + 1]) % self.mode_dims[j])
            .collect()
    }

    pub fn spin_index_table(&self) -> Vec<usize> {
        let md = self.motional_dim();
        (0..self.total_dim()).map(|idx| idx / md).collect()
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::SpaceMismatch(format!("{:?} vs {:?}", self, other)))
        }
    }
}

/// Dense operator on the full space. Immutable once built.
#[derive(Clone, Debug)]
pub struct Operator {
    pub space: HilbertSpec,
    pub matrix: CMat,
}

impl Operator {
    pub fn new(space: HilbertSpec, matrix: CMat) -> Result<Self> {
        if matrix.nrows() != space.total_dim() || matrix.ncols() != space.total_dim() {
            return Err(Error::SpaceMismatch(format!(
                "matrix {}x{} on space of dim {}",
                matrix.nrows(),
                matrix.ncols(),
                space.total_dim()
            )));
        }
        Ok(Operator { space, matrix })
    }

    pub fn identity(space: &HilbertSpec) -> Self {
        Operator { space: space.clone(), matrix: identity(space.total_dim()) }
    }

    pub fn dagger(&self) -> Self {
        Operator { space: self.space.clone(), matrix: dagger(&self.matrix) }
    }

    pub fn to_sparse(&self) -> SparseOp {
        SparseOp::from_dense(&self.matrix, 0.0)
    }
}

/// Pure state on the full space; unit norm after every constructor.
#[derive(Clone, Debug)]
pub struct StateVector {
    pub space: HilbertSpec,
    pub amplitudes: CVec,
}

impl StateVector {
    pub fn from_amplitudes(space: HilbertSpec, amplitudes: CVec) -> Result<Self> {
        if amplitudes.len() != space.total_dim() {
            return Err(Error::SpaceMismatch("amplitude vector length".into()));
        }
        let norm = amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroNorm(norm));
        }
        Ok(StateVector { space, amplitudes: amplitudes.mapv(|z| z / c(norm)) })
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn inner(&self, other: &StateVector) -> C64 {
        self.amplitudes
            .iter()
            .zip(other.amplitudes.iter())
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn overlap_sqr(&self, other: &StateVector) -> f64 {
        self.inner(other).norm_sqr()
    }

    pub fn to_density(&self) -> DensityMatrix {
        let n = self.amplitudes.len();
        let mut m = CMat::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                m[[i, j]] = self.amplitudes[i] * self.amplitudes[j].conj();
            }
        }
        DensityMatrix { space: self.space.clone(), matrix: m }
    }

    pub fn expectation(&self, op: &Operator) -> C64 {
        let mut acc = ZERO;
        for i in 0..self.amplitudes.len() {
            let mut row = ZERO;
            for j in 0..self.amplitudes.len() {
                row += op.matrix[[i, j]] * self.amplitudes[j];
            }
            acc += self.amplitudes[i].conj() * row;
        }
        acc
    }

    /// ⟨a†a⟩ for one mode.
    pub fn mean_phonons(&self, mode: usize) -> f64 {
        let table = self.space.mode_index_table(mode);
        self.amplitudes
            .iter()
            .enumerate()
            .map(|(idx, z)| table[idx] as f64 * z.norm_sqr())
            .sum()
    }
}

/// Mixed state on the full space.
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    pub space: HilbertSpec,
    pub matrix: CMat,
}

impl DensityMatrix {
    pub fn new(space: HilbertSpec, matrix: CMat) -> Result<Self> {
        let dm = DensityMatrix { space, matrix };
        dm.check_basic()?;
        Ok(dm)
    }

    /// Construct without validity checks (for intermediate channel output
    /// whose invariants are re-established later).
    pub fn from_raw(space: HilbertSpec, matrix: CMat) -> Self {
        DensityMatrix { space, matrix }
    }

    /// Hermiticity and unit-trace checks (cheap; positivity is checked
    /// separately by [`Self::validate_positivity`]).
    pub fn check_basic(&self) -> Result<()> {
        let d = self.space.total_dim();
        if self.matrix.nrows() != d || self.matrix.ncols() != d {
            return Err(Error::InvalidDensity("shape mismatch".into()));
        }
        let herm = linalg::herm_deviation(&self.matrix);
        if herm > 1e-10 {
            return Err(Error::InvalidDensity(format!(
                "Hermiticity deviation {herm:.3e}"
            )));
        }
        let tr = linalg::trace(&self.matrix);
        if (tr - ONE).norm() > 1e-8 {
            return Err(Error::InvalidDensity(format!("trace {tr}")));
        }
        Ok(())
    }

    /// Full positivity check (eigendecomposition; O(d³)).
    pub fn validate_positivity(&self) -> Result<()> {
        let (vals, _) = eigh(&self.matrix);
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -1e-8 {
            return Err(Error::InvalidDensity(format!("eigenvalue {min:.3e}")));
        }
        Ok(())
    }

    pub fn trace(&self) -> C64 {
        linalg::trace(&self.matrix)
    }

    pub fn mean_phonons(&self, mode: usize) -> f64 {
        let table = self.space.mode_index_table(mode);
        self.matrix
            .diag()
            .iter()
            .enumerate()
            .map(|(idx, z)| table[idx] as f64 * z.re)
            .sum()
    }

    pub fn expectation(&self, op: &CMat) -> C64 {
        let d = self.matrix.nrows();
        let mut acc = ZERO;
        for i in 0..d {
            for j in 0..d {
                let r = self.matrix[[i, j]];
                if r != ZERO {
                    acc += r * op[[j, i]];
                }
            }
        }
        acc
    }

    /// ⟨𝒫⟩ over all modes, computed from the diagonal.
    pub fn joint_parity(&self) -> f64 {
        let tables: Vec<Vec<usize>> =
            (0..self.space.n_modes()).map(|j| self.space.mode_index_table(j)).collect();
        self.matrix
            .diag()
            .iter()
            .enumerate()
            .map(|(idx, z)| {
                let total: usize = tables.iter().map(|t| t[idx]).sum();
                if total % 2 == 0 { z.re } else { -z.re }
            })
            .sum()
    }

    /// Population of spin |↑⟩.
    pub fn p_up(&self) -> f64 {
        let spin_table = self.space.spin_index_table();
        self.matrix
            .diag()
            .iter()
            .enumerate()
            .filter(|(idx, _)| spin_table[*idx] == 1)
            .map(|(_, z)| z.re)
            .sum()
    }
}

// ---------------------------------------------------------------------------
// single-mode building blocks
// ---------------------------------------------------------------------------

/// Annihilation operator on a single mode of dimension `dim`.
pub fn mode_annihilation(dim: usize) -> CMat {
    let mut a = CMat::zeros((dim, dim));
    for n in 1..dim {
        a[[n - 1, n]] = c((n as f64).sqrt());
    }
    a
}

/// Exact matrix elements ⟨m|D(γ)|n⟩ of the displacement operator,
/// computed by a stable two-term recurrence seeded with the analytic
/// first row. These are the elements of the *infinite-dimensional*
/// operator compressed to the truncated space, so they stay exact at the
/// truncation boundary (unlike the exponential of a truncated generator).
pub fn displacement_elements(dim: usize, gamma: C64) -> CMat {
    let mut d = CMat::zeros((dim, dim));
    let pref = (-0.5 * gamma.norm_sqr()).exp();
    // first row: <0|D|n> = e^{-|γ|²/2} (-γ*)^n / sqrt(n!)
    let mut v = c(pref);
    d[[0, 0]] = v;
    for n in 1..dim {
        v *= -gamma.conj() / c((n as f64).sqrt());
        d[[0, n]] = v;
    }
    // upward recurrence: sqrt(m+1)<m+1|D|n> = sqrt(n)<m|D|n-1> + γ<m|D|n>
    for m in 0..dim - 1 {
        let rm = c(((m + 1) as f64).sqrt());
        for n in 0..dim {
            let lower = if n > 0 {
                c((n as f64).sqrt()) * d[[m, n - 1]]
            } else {
                ZERO
            };
            d[[m + 1, n]] = (lower + gamma * d[[m, n]]) / rm;
        }
    }
    d
}

/// Single-mode displacement as the exponential of the truncated generator
/// (unitary within the truncated space).
pub fn displacement_unitary(dim: usize, alpha: C64) -> CMat {
    // α a† − α* a = i G with G Hermitian
    let a = mode_annihilation(dim);
    let ad = dagger(&a);
    let gen = &(&ad * alpha) + &(&a * (-alpha.conj()));
    let g = gen.mapv(|z| z * (-I));
    expm_herm(&g, I)
}

/// Embed a single-mode operator into the full space (identity elsewhere).
pub fn embed_mode_op(space: &HilbertSpec, mode: usize, op: &CMat) -> CMat {
    let mut full = identity(space.spin_dim);
    for j in 0..space.n_modes() {
        if j == mode {
            full = kron(&full, op);
        } else {
            full = kron(&full, &identity(space.mode_dims[j]));
        }
    }
    full
}

/// Embed a spin operator into the full space.
pub fn embed_spin_op(space: &HilbertSpec, op: &CMat) -> CMat {
    kron(op, &identity(space.motional_dim()))
}

pub fn sigma_plus() -> CMat {
    let mut m = CMat::zeros((2, 2));
    m[[1, 0]] = ONE; // |↑⟩⟨↓|
    m
}

pub fn sigma_minus() -> CMat {
    dagger(&sigma_plus())
}

pub fn sigma_x() -> CMat {
    &sigma_plus() + &sigma_minus()
}

pub fn sigma_y() -> CMat {
    let mut m = CMat::zeros((2, 2));
    m[[1, 0]] = I;
    m[[0, 1]] = -I;
    m
}

pub fn sigma_z() -> CMat {
    let mut m = CMat::zeros((2, 2));
    m[[0, 0]] = -ONE;
    m[[1, 1]] = ONE;
    m
}

/// σ_φ = σ₊ e^{iφ} + σ₋ e^{-iφ}.
pub fn sigma_phi(phi: f64) -> CMat {
    let e = C64::from_polar(1.0, phi);
    &(&sigma_plus() * e) + &(&sigma_minus() * e.conj())
}

/// Spin rotation exp(−i θ σ_axis / 2) embedded in the full space.
pub fn spin_rotation(space: &HilbertSpec, axis: &CMat, angle: f64) -> CMat {
    let u2 = expm_herm(axis, -I * c(0.5 * angle));
    embed_spin_op(space, &u2)
}

// ---------------------------------------------------------------------------
// state constructors
// ---------------------------------------------------------------------------

/// Product Fock state |spin⟩|n₁⟩|n₂⟩…
pub fn fock_state(space: &HilbertSpec, spin: Spin, ns: &[usize]) -> Result<StateVector> {
    if ns.len() != space.n_modes() {
        return Err(Error::SpaceMismatch("one Fock index per mode required".into()));
    }
    for (mode, (&n, &dim)) in ns.iter().zip(&space.mode_dims).enumerate() {
        if n >= dim {
            return Err(Error::FockOutOfRange { mode, index: n, dim });
        }
    }
    let mut amp = CVec::zeros(space.total_dim());
    amp[space.index_of(spin.index(), ns)] = ONE;
    StateVector::from_amplitudes(space.clone(), amp)
}

/// Truncated coherent amplitudes e^{-|α|²/2} αⁿ/√n! (not renormalized);
/// returns the vector and the weight lost to truncation.
pub fn coherent_amplitudes(dim: usize, alpha: C64) -> (CVec, f64) {
    let mut v = CVec::zeros(dim);
    let mut cur = c((-0.5 * alpha.norm_sqr()).exp());
    v[0] = cur;
    for n in 1..dim {
        cur *= alpha / c((n as f64).sqrt());
        v[n] = cur;
    }
    let kept: f64 = v.iter().map(|z| z.norm_sqr()).sum();
    (v, 1.0 - kept)
}

/// Coherent state |α⟩ in the chosen mode, vacuum elsewhere, spin |↓⟩.
/// Renormalized after truncation.
pub fn coherent_state(space: &HilbertSpec, mode: usize, alpha: C64) -> Result<StateVector> {
    let dim = space.mode_dims[mode];
    if alpha.norm_sqr() > dim as f64 / 4.0 {
        log::warn!(
            "coherent amplitude |α|²={:.3} beyond dim/4={:.1} truncation guard",
            alpha.norm_sqr(),
            dim as f64 / 4.0
        );
    }
    let (amps, lost) = coherent_amplitudes(dim, alpha);
    if lost > 1e-6 {
        log::warn!("coherent state lost weight {lost:.3e} to truncation");
    }
    let mut full = CVec::zeros(space.total_dim());
    let strides = space.strides();
    for (n, &a) in amps.iter().enumerate() {
        full[n * strides[mode + 1]] = a;
    }
    StateVector::from_amplitudes(space.clone(), full)
}

/// Analytic inverse normalization 𝒩± = √(2 ± 2 e^{-2(|α₁|²+|α₂|²)}).
pub fn ecs_norm(alpha1: C64, alpha2: C64, parity: Parity) -> f64 {
    let s = alpha1.norm_sqr() + alpha2.norm_sqr();
    (2.0 + parity.sign() * 2.0 * (-2.0 * s).exp()).sqrt()
}

/// Normalized two-mode entangled coherent state
/// (|α₁⟩|α₂⟩ ± |−α₁⟩|−α₂⟩)/𝒩±, spin |↓⟩.
pub fn ecs_state(
    space: &HilbertSpec,
    alpha1: C64,
    alpha2: C64,
    parity: Parity,
) -> Result<StateVector> {
    if space.n_modes() != 2 {
        return Err(Error::SpaceMismatch("ECS requires exactly two modes".into()));
    }
    if parity == Parity::Odd && ecs_norm(alpha1, alpha2, parity) < 1e-6 {
        return Err(Error::ZeroNorm(ecs_norm(alpha1, alpha2, parity)));
    }
    let (c1p, lost1) = coherent_amplitudes(space.mode_dims[0], alpha1);
    let (c2p, lost2) = coherent_amplitudes(space.mode_dims[1], alpha2);
    if lost1.max(lost2) > 1e-6 {
        log::warn!("ECS truncation lost weight {:.3e}", lost1.max(lost2));
    }
    let (c1m, _) = coherent_amplitudes(space.mode_dims[0], -alpha1);
    let (c2m, _) = coherent_amplitudes(space.mode_dims[1], -alpha2);
    let sgn = c(parity.sign());
    let mut amp = CVec::zeros(space.total_dim());
    let strides = space.strides();
    for n1 in 0..space.mode_dims[0] {
        for n2 in 0..space.mode_dims[1] {
            let idx = n1 * strides[1] + n2 * strides[2];
            amp[idx] = c1p[n1] * c2p[n2] + sgn * c1m[n1] * c2m[n2];
        }
    }
    StateVector::from_amplitudes(space.clone(), amp)
}

/// Two-sided geometric (thermal) occupation for one mode, renormalized
/// under truncation.
pub fn thermal_populations(dim: usize, nbar: f64) -> Vec<f64> {
    if nbar <= 0.0 {
        let mut p = vec![0.0; dim];
        p[0] = 1.0;
        return p;
    }
    let ratio = nbar / (nbar + 1.0);
    let mut p: Vec<f64> = Vec::with_capacity(dim);
    let mut cur = 1.0 / (nbar + 1.0);
    for _ in 0..dim {
        p.push(cur);
        cur *= ratio;
    }
    let total: f64 = p.iter().sum();
    for x in p.iter_mut() {
        *x /= total;
    }
    p
}

/// Spin |↓⟩⟨↓| ⊗ thermal product state with mean occupations `nbar`.
pub fn thermal_density(space: &HilbertSpec, nbar: &[f64]) -> Result<DensityMatrix> {
    if nbar.len() != space.n_modes() {
        return Err(Error::SpaceMismatch("one n̄ per mode required".into()));
    }
    if nbar.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidNoise("n̄ must be >= 0".into()));
    }
    let pops: Vec<Vec<f64>> = nbar
        .iter()
        .zip(&space.mode_dims)
        .map(|(&n, &d)| thermal_populations(d, n))
        .collect();
    let d = space.total_dim();
    let mut m = CMat::zeros((d, d));
    let tables: Vec<Vec<usize>> =
        (0..space.n_modes()).map(|j| space.mode_index_table(j)).collect();
    let spin_table = space.spin_index_table();
    for idx in 0..d {
        if spin_table[idx] != 0 {
            continue;
        }
        let mut p = 1.0;
        for (j, t) in tables.iter().enumerate() {
            p *= pops[j][t[idx]];
        }
        m[[idx, idx]] = c(p);
    }
    DensityMatrix::new(space.clone(), m)
}

// ---------------------------------------------------------------------------
// operator constructors
// ---------------------------------------------------------------------------

/// Displacement operator D(α) = exp(α a† − α* a) on one mode, identity on
/// spin and the other modes. Unitary within the truncation.
pub fn displacement_operator(space: &HilbertSpec, mode: usize, alpha: C64) -> Operator {
    let u = displacement_unitary(space.mode_dims[mode], alpha);
    Operator {
        space: space.clone(),
        matrix: embed_mode_op(space, mode, &u),
    }
}

/// Joint parity over the selected modes: diagonal entries (−1)^{Σ n_j}.
pub fn parity_operator(space: &HilbertSpec, modes: &[usize]) -> Operator {
    let d = space.total_dim();
    let mut m = CMat::zeros((d, d));
    let tables: Vec<Vec<usize>> =
        modes.iter().map(|&j| space.mode_index_table(j)).collect();
    for idx in 0..d {
        let total: usize = tables.iter().map(|t| t[idx]).sum();
        m[[idx, idx]] = if total % 2 == 0 { ONE } else { -ONE };
    }
    Operator { space: space.clone(), matrix: m }
}

/// Phase-space rotation R(φ) = exp(i φ a†a) on one mode.
pub fn rotation_operator(space: &HilbertSpec, mode: usize, phi: f64) -> Operator {
    let d = space.total_dim();
    let mut m = CMat::zeros((d, d));
    let table = space.mode_index_table(mode);
    for idx in 0..d {
        m[[idx, idx]] = C64::from_polar(1.0, phi * table[idx] as f64);
    }
    Operator { space: space.clone(), matrix: m }
}

/// Full-space annihilation operator for one mode, as a sparse operator.
pub fn annihilation_sparse(space: &HilbertSpec, mode: usize) -> SparseOp {
    let strides = space.strides();
    let stride = strides[mode + 1];
    let table = space.mode_index_table(mode);
    let mut trip = Vec::new();
    for idx in 0..space.total_dim() {
        let n = table[idx];
        if n >= 1 {
            // <n-1| a |n> = sqrt(n)
            trip.push((idx - stride, idx, c((n as f64).sqrt())));
        }
    }
    SparseOp::from_triplets(space.total_dim(), trip)
}

/// Full-space number operator diagonal for one mode.
pub fn number_diagonal(space: &HilbertSpec, mode: usize) -> Vec<f64> {
    space.mode_index_table(mode).iter().map(|&n| n as f64).collect()
}

// ---------------------------------------------------------------------------
// Wigner transform
// ---------------------------------------------------------------------------

/// W(β₁,…,β_M) = (2/π)^M · Tr[ρ Π_j D_j(β_j) 𝒫_j D_j(−β_j)].
///
/// The displaced-parity factors D(β)𝒫D(−β) = D(2β)𝒫 are built from the
/// exact matrix elements of the infinite-dimensional displacement
/// operator, so values stay meaningful arbitrarily far from the origin.
///
/// Errors if the displaced state puts more than 1e-4 of its weight on the
/// top Fock level of any mode.
pub fn wigner_point(rho: &DensityMatrix, beta: &[C64]) -> Result<f64> {
    WignerEvaluator::new(rho).value(beta)
}

/// Cached nonzero structure of a density matrix for repeated Wigner
/// evaluations over a grid of phase-space points.
pub struct WignerEvaluator<'a> {
    space: &'a HilbertSpec,
    /// (per-mode row indices, per-mode col indices) packed per entry
    entries: Vec<(Vec<u32>, Vec<u32>, C64)>,
}

impl<'a> WignerEvaluator<'a> {
    pub fn new(rho: &'a DensityMatrix) -> Self {
        let space = &rho.space;
        let tables: Vec<Vec<usize>> =
            (0..space.n_modes()).map(|j| space.mode_index_table(j)).collect();
        let spin_table = space.spin_index_table();
        let d = space.total_dim();
        let mut entries = Vec::new();
        for i in 0..d {
            for j in 0..d {
                let v = rho.matrix[[i, j]];
                if v == ZERO || spin_table[i] != spin_table[j] {
                    continue;
                }
                let rows: Vec<u32> = tables.iter().map(|t| t[i] as u32).collect();
                let cols: Vec<u32> = tables.iter().map(|t| t[j] as u32).collect();
                entries.push((rows, cols, v));
            }
        }
        WignerEvaluator { space, entries }
    }

    /// Tr[ρ (I_spin ⊗ O₁ ⊗ …)] over the cached entries.
    pub fn factored_trace(&self, factors: &[CMat]) -> C64 {
        let mut acc = ZERO;
        for (rows, cols, v) in &self.entries {
            // Tr[ρ O] = Σ_{ij} ρ_ij O_ji
            let mut o = ONE;
            for (k, f) in factors.iter().enumerate() {
                o *= f[[cols[k] as usize, rows[k] as usize]];
                if o == ZERO {
                    break;
                }
            }
            acc += v * o;
        }
        acc
    }

    /// Weight of the displaced state D(−β)ρD(−β)† on the top Fock level,
    /// maximized over modes.
    pub fn top_weight(&self, beta: &[C64]) -> f64 {
        let mut worst = 0.0f64;
        for (mode, &b) in beta.iter().enumerate() {
            let d = self.space.mode_dims[mode];
            let disp = displacement_elements(d, b);
            // rank-1 observable D(β)|top⟩⟨top|D(β)†
            let top: Vec<C64> = (0..d).map(|m| disp[[m, d - 1]]).collect();
            let mut acc = ZERO;
            for (rows, cols, v) in &self.entries {
                let mut keep = *v;
                for k in 0..self.space.n_modes() {
                    if k == mode {
                        // O_{cols[k], rows[k]} = top[cols[k]] * conj(top[rows[k]])
                        keep *= top[cols[k] as usize] * top[rows[k] as usize].conj();
                    } else if rows[k] != cols[k] {
                        keep = ZERO;
                        break;
                    }
                }
                acc += keep;
            }
            worst = worst.max(acc.re);
        }
        worst
    }

    pub fn value(&self, beta: &[C64]) -> Result<f64> {
        if beta.len() != self.space.n_modes() {
            return Err(Error::SpaceMismatch("one β per mode required".into()));
        }
        let guard = self.top_weight(beta);
        if guard > 1e-4 {
            return Err(Error::Truncation(format!(
                "displaced state weight {guard:.3e} on top Fock level"
            )));
        }
        let factors: Vec<CMat> = beta
            .iter()
            .zip(&self.space.mode_dims)
            .map(|(&b, &d)| displaced_parity_elements(d, b))
            .collect();
        let val = self.factored_trace(&factors);
        let m = self.space.n_modes() as i32;
        Ok((2.0 / std::f64::consts::PI).powi(m) * val.re)
    }
}

/// Exact matrix of D(β) 𝒫 D(−β) = D(2β) 𝒫 on one mode.
pub fn displaced_parity_elements(dim: usize, beta: C64) -> CMat {
    let mut m = displacement_elements(dim, 2.0 * beta);
    for n in (1..dim).step_by(2) {
        for r in 0..dim {
            m[[r, n]] = -m[[r, n]];
        }
    }
    m
}

/// Tr[ρ (I_spin ⊗ O₁ ⊗ O₂ ⊗ …)] for per-mode factors O_j.
pub fn factored_mode_trace(rho: &DensityMatrix, factors: &[CMat]) -> C64 {
    let space = &rho.space;
    let tables: Vec<Vec<usize>> =
        (0..space.n_modes()).map(|j| space.mode_index_table(j)).collect();
    let spin_table = space.spin_index_table();
    let d = space.total_dim();
    let mut acc = ZERO;
    for i in 0..d {
        for j in 0..d {
            let r = rho.matrix[[i, j]];
            if r == ZERO {
                continue;
            }
            if spin_table[i] != spin_table[j] {
                continue;
            }
            // Tr[ρ O] = Σ_{ij} ρ_ij O_ji
            let mut o = ONE;
            for (k, f) in factors.iter().enumerate() {
                o *= f[[tables[k][j], tables[k][i]]];
                if o == ZERO {
                    break;
                }
            }
            acc += r * o;
        }
    }
    acc
}

/// Weight of the displaced state D(−β)ρD(−β)† on the top Fock level,
/// maximized over modes.
pub fn displaced_top_weight(rho: &DensityMatrix, beta: &[C64]) -> f64 {
    WignerEvaluator::new(rho).top_weight(beta)
}

// ---------------------------------------------------------------------------
// quantum-information functionals
// ---------------------------------------------------------------------------

/// Uhlmann fidelity F = (Tr √(√ρ₀ ρ √ρ₀))².
pub fn fidelity(rho: &DensityMatrix, rho0: &DensityMatrix) -> Result<f64> {
    rho.space.check_same(&rho0.space)?;
    for (name, m) in [("rho", &rho.matrix), ("rho0", &rho0.matrix)] {
        let (vals, _) = eigh(m);
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -1e-8 {
            return Err(Error::InvalidDensity(format!(
                "{name} has eigenvalue {min:.3e}"
            )));
        }
    }
    let (vals, vecs) = eigh(&rho0.matrix);
    let n = vals.len();
    let mut sqrt0 = vecs.clone();
    for (j, &lam) in vals.iter().enumerate() {
        let f = c(lam.max(0.0).sqrt());
        for i in 0..n {
            sqrt0[[i, j]] *= f;
        }
    }
    let sqrt0 = matmul(&sqrt0, &dagger(&vecs));
    let m = matmul(&matmul(&sqrt0, &rho.matrix), &sqrt0);
    let (mv, _) = eigh(&m);
    let f: f64 = mv.iter().map(|&l| l.max(0.0).sqrt()).sum();
    Ok((f * f).min(1.0))
}

/// Tr ρ².
pub fn purity(rho: &DensityMatrix) -> f64 {
    rho.matrix.iter().map(|z| z.norm_sqr()).sum()
}

/// Partial transpose on one mode; returns the raw matrix (generally not a
/// density matrix).
pub fn partial_transpose(rho: &DensityMatrix, mode: usize) -> CMat {
    let space = &rho.space;
    let d = space.total_dim();
    let strides = space.strides();
    let stride = strides[mode + 1];
    let table = space.mode_index_table(mode);
    let mut out = CMat::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let ni = table[i];
            let nj = table[j];
            let it = i - ni * stride + nj * stride;
            let jt = j - nj * stride + ni * stride;
            out[[it, jt]] = rho.matrix[[i, j]];
        }
    }
    out
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(m: &CMat) -> f64 {
    let (vals, _) = eigh(m);
    vals.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Partial trace keeping the listed subsystems (spin first if kept, then
/// modes in the given order). Tracing out the spin produces a space with
/// a degenerate spin factor of dimension 1.
pub fn partial_trace(rho: &DensityMatrix, keep: &[Subsystem]) -> Result<DensityMatrix> {
    let space = &rho.space;
    let keep_spin = keep.contains(&Subsystem::Spin);
    let keep_modes: Vec<usize> = keep
        .iter()
        .filter_map(|s| match s {
            Subsystem::Mode(j) => Some(*j),
            Subsystem::Spin => None,
        })
        .collect();
    for &j in &keep_modes {
        if j >= space.n_modes() {
            return Err(Error::SpaceMismatch(format!("no mode {j}")));
        }
    }
    let new_space = HilbertSpec {
        spin_dim: if keep_spin { space.spin_dim } else { 1 },
        mode_dims: keep_modes.iter().map(|&j| space.mode_dims[j]).collect(),
        lamb_dicke: keep_modes.iter().map(|&j| space.lamb_dicke[j]).collect(),
    };
    let nd = new_space.total_dim();
    let mut out = CMat::zeros((nd, nd));
    let spin_table = space.spin_index_table();
    let tables: Vec<Vec<usize>> =
        (0..space.n_modes()).map(|j| space.mode_index_table(j)).collect();
    let new_strides = new_space.strides();
    let d = space.total_dim();
    let kept_index = |idx: usize| -> usize {
        let mut out_idx = 0;
        if keep_spin {
            out_idx += spin_table[idx] * new_strides[0];
        }
        for (pos, &j) in keep_modes.iter().enumerate() {
            out_idx += tables[j][idx] * new_strides[pos + 1];
        }
        out_idx
    };
    // traced-out coordinates must match between row and column
    let traced_key = |idx: usize| -> usize {
        let mut key = 0usize;
        let mut mult = 1usize;
        if !keep_spin {
            key += spin_table[idx] * mult;
            mult *= space.spin_dim;
        }
        for j in 0..space.n_modes() {
            if !keep_modes.contains(&j) {
                key += tables[j][idx] * mult;
                mult *= space.mode_dims[j];
            }
        }
        key
    };
    for i in 0..d {
        let ki = kept_index(i);
        let ti = traced_key(i);
        for j in 0..d {
            if traced_key(j) != ti {
                continue;
            }
            out[[ki, kept_index(j)]] += rho.matrix[[i, j]];
        }
    }
    DensityMatrix::new(new_space, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn space() -> HilbertSpec {
        HilbertSpec::default_two_mode()
    }

    #[test]
    fn fock_parities() {
        let sp = space();
        for (ns, want) in [([0, 0], 1.0), ([1, 0], -1.0), ([1, 1], 1.0)] {
            let psi = fock_state(&sp, Spin::Down, &ns).unwrap();
            let p = psi.to_density().joint_parity();
            assert!((p - want).abs() < 1e-12, "{ns:?}: {p}");
        }
    }

    #[test]
    fn fock_out_of_range_errors() {
        let sp = space();
        assert!(fock_state(&sp, Spin::Down, &[20, 0]).is_err());
    }

    #[test]
    fn coherent_mean_phonons_and_vacuum_overlap() {
        let sp = space();
        let alpha = c(1.2);
        let psi = coherent_state(&sp, 0, alpha).unwrap();
        assert!((psi.mean_phonons(0) - 1.44).abs() < 1e-6);
        assert!(psi.mean_phonons(1).abs() < 1e-12);
        let vac = fock_state(&sp, Spin::Down, &[0, 0]).unwrap();
        let overlap = vac.inner(&psi).norm();
        assert!((overlap - (-0.72f64).exp()).abs() < 1e-9);
        assert!((overlap - 0.48675).abs() < 1e-5);
        let zero = coherent_state(&sp, 0, ZERO).unwrap();
        assert!(zero.overlap_sqr(&vac) > 1.0 - 1e-14);
    }

    #[test]
    fn ecs_norm_and_parity() {
        let sp = space();
        let n = ecs_norm(c(1.2), c(1.2), Parity::Even);
        assert!((n - (2.0f64 + 2.0 * (-5.76f64).exp()).sqrt()).abs() < 1e-12);
        assert!((n - 1.41643).abs() < 1e-5);
        let even = ecs_state(&sp, c(1.2), c(1.2), Parity::Even).unwrap();
        let odd = ecs_state(&sp, c(1.2), c(1.2), Parity::Odd).unwrap();
        assert!((even.to_density().joint_parity() - 1.0).abs() < 1e-9);
        assert!((odd.to_density().joint_parity() + 1.0).abs() < 1e-9);
        let vac = ecs_state(&sp, ZERO, ZERO, Parity::Even).unwrap();
        let v0 = fock_state(&sp, Spin::Down, &[0, 0]).unwrap();
        assert!(vac.overlap_sqr(&v0) > 1.0 - 1e-12);
        assert!(ecs_state(&sp, ZERO, ZERO, Parity::Odd).is_err());
    }

    #[test]
    fn thermal_vacuum_population_and_purity() {
        let sp = space();
        let rho = thermal_density(&sp, &[0.0, 0.0]).unwrap();
        let idx0 = sp.index_of(0, &[0, 0]);
        assert!((rho.matrix[[idx0, idx0]].re - 1.0).abs() < 1e-12);
        let rho = thermal_density(&sp, &[0.03, 0.03]).unwrap();
        let p00 = rho.matrix[[idx0, idx0]].re;
        assert!((p00 - 1.0 / (1.03f64 * 1.03)).abs() < 1e-4);
        assert!((p00 - 0.9426).abs() < 1e-4);
        let sp1 = HilbertSpec::new(vec![20], vec![0.1]).unwrap();
        let rho1 = thermal_density(&sp1, &[1.0]).unwrap();
        assert!((purity(&rho1) - 1.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn displacement_identity_and_inverse() {
        let sp = space();
        let d0 = displacement_operator(&sp, 0, ZERO);
        assert!(linalg::max_abs_diff(&d0.matrix, &identity(sp.total_dim())) < 1e-12);
        let dp = displacement_operator(&sp, 0, c(1.2));
        let dm = displacement_operator(&sp, 0, c(-1.2));
        let prod = matmul(&dp.matrix, &dm.matrix);
        assert!(linalg::max_abs_diff(&prod, &identity(sp.total_dim())) < 1e-8);
    }

    #[test]
    fn displacement_matches_coherent_state() {
        let sp = space();
        let dp = displacement_operator(&sp, 0, c(1.2));
        let vac = fock_state(&sp, Spin::Down, &[0, 0]).unwrap();
        let mut out = CVec::zeros(sp.total_dim());
        for i in 0..sp.total_dim() {
            for j in 0..sp.total_dim() {
                out[i] += dp.matrix[[i, j]] * vac.amplitudes[j];
            }
        }
        let displaced = StateVector::from_amplitudes(sp.clone(), out).unwrap();
        let coh = coherent_state(&sp, 0, c(1.2)).unwrap();
        assert!(displaced.overlap_sqr(&coh) > 1.0 - 1e-8);
    }

    #[test]
    fn displacement_elements_match_truncated_unitary_interior() {
        let d = 30;
        let gamma = C64::new(0.9, -0.4);
        let exact = displacement_elements(d, gamma);
        let unit = displacement_unitary(d, gamma);
        let mut worst = 0.0f64;
        for m in 0..12 {
            for n in 0..12 {
                worst = worst.max((exact[[m, n]] - unit[[m, n]]).norm());
            }
        }
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn parity_operator_basics() {
        let sp = space();
        let p = parity_operator(&sp, &[0, 1]);
        let i11 = sp.index_of(0, &[1, 1]);
        let i21 = sp.index_of(0, &[2, 1]);
        assert!((p.matrix[[i11, i11]] - ONE).norm() < 1e-15);
        assert!((p.matrix[[i21, i21]] + ONE).norm() < 1e-15);
        let sq = matmul(&p.matrix, &p.matrix);
        assert!(linalg::max_abs_diff(&sq, &identity(sp.total_dim())) == 0.0);
    }

    #[test]
    fn rotation_operator_basics() {
        let sp = space();
        let r0 = rotation_operator(&sp, 0, 0.0);
        assert!(linalg::max_abs_diff(&r0.matrix, &identity(sp.total_dim())) < 1e-15);
        let rpi = rotation_operator(&sp, 0, PI);
        let p0 = parity_operator(&sp, &[0]);
        assert!(linalg::max_abs_diff(&rpi.matrix, &p0.matrix) < 1e-12);
        let alpha = c(1.1);
        let psi = coherent_state(&sp, 0, alpha).unwrap();
        let r = rotation_operator(&sp, 0, PI / 2.0);
        let mut rot = CVec::zeros(sp.total_dim());
        for i in 0..sp.total_dim() {
            rot[i] = r.matrix[[i, i]] * psi.amplitudes[i];
        }
        let rot = StateVector::from_amplitudes(sp.clone(), rot).unwrap();
        let target = coherent_state(&sp, 0, alpha * I).unwrap();
        assert!(rot.overlap_sqr(&target) > 1.0 - 1e-8);
    }

    #[test]
    fn wigner_values_at_origin() {
        let sp = space();
        let four_pi2 = 4.0 / (PI * PI);
        let vac = fock_state(&sp, Spin::Down, &[0, 0]).unwrap().to_density();
        let w = wigner_point(&vac, &[ZERO, ZERO]).unwrap();
        assert!((w - four_pi2).abs() < 1e-12);
        assert!((w - 0.40528).abs() < 1e-5);
        let f10 = fock_state(&sp, Spin::Down, &[1, 0]).unwrap().to_density();
        let w = wigner_point(&f10, &[ZERO, ZERO]).unwrap();
        assert!((w + four_pi2).abs() < 1e-12);
        let ecs = ecs_state(&sp, c(1.2), c(1.2), Parity::Even).unwrap().to_density();
        let w = wigner_point(&ecs, &[ZERO, ZERO]).unwrap();
        assert!((w - four_pi2).abs() < 1e-6);
    }

    #[test]
    fn wigner_guard_triggers_far_out() {
        let sp = space();
        let vac = fock_state(&sp, Spin::Down, &[0, 0]).unwrap().to_density();
        assert!(wigner_point(&vac, &[c(4.5), ZERO]).is_err());
    }

    #[test]
    fn wigner_parity_decomposition() {
        let sp = HilbertSpec::two_modes(8, 0.1, 0.087).unwrap();
        let mut rho = thermal_density(&sp, &[0.2, 0.3]).unwrap();
        // add coherences; the diagonal (and so the parity) is unchanged
        let ia = sp.index_of(0, &[0, 0]);
        let ib = sp.index_of(0, &[2, 0]);
        rho.matrix[[ia, ib]] = c(0.05);
        rho.matrix[[ib, ia]] = c(0.05);
        let w = wigner_point(&rho, &[ZERO, ZERO]).unwrap();
        let p = rho.joint_parity();
        assert!((w - 4.0 / (PI * PI) * p).abs() < 1e-10);
    }

    #[test]
    fn fidelity_cases() {
        let sp = HilbertSpec::two_modes(12, 0.1, 0.087).unwrap();
        let vac = fock_state(&sp, Spin::Down, &[0, 0]).unwrap().to_density();
        let one = fock_state(&sp, Spin::Down, &[1, 0]).unwrap().to_density();
        assert!((fidelity(&vac, &vac).unwrap() - 1.0).abs() < 1e-8);
        assert!(fidelity(&vac, &one).unwrap() < 1e-10);
        let coh = coherent_state(&sp, 0, ONE).unwrap().to_density();
        let f = fidelity(&vac, &coh).unwrap();
        assert!((f - (-1.0f64).exp()).abs() < 1e-6, "{f}");
        assert!((f - 0.36788).abs() < 1e-5);
    }

    #[test]
    fn partial_transpose_and_entanglement() {
        let sp = HilbertSpec::two_modes(12, 0.1, 0.087).unwrap();
        let prod = coherent_state(&sp, 0, c(0.8)).unwrap().to_density();
        let pt = partial_transpose(&prod, 0);
        assert!(min_eigenvalue(&pt) > -1e-10);
        let ecs = ecs_state(&sp, c(1.2), c(1.2), Parity::Even).unwrap().to_density();
        let pt = partial_transpose(&ecs, 0);
        assert!(min_eigenvalue(&pt) < -0.1);
    }

    /// (|↓⟩(|α₁α₂⟩+|−α₁−α₂⟩) + |↑⟩(|α₁α₂⟩−|−α₁−α₂⟩))/2 — the raw
    /// spin-motion entangled state before heralding.
    fn spin_motion_ecs(sp: &HilbertSpec, a1: C64, a2: C64) -> StateVector {
        let (c1p, _) = coherent_amplitudes(sp.mode_dims[0], a1);
        let (c2p, _) = coherent_amplitudes(sp.mode_dims[1], a2);
        let (c1m, _) = coherent_amplitudes(sp.mode_dims[0], -a1);
        let (c2m, _) = coherent_amplitudes(sp.mode_dims[1], -a2);
        let mut amp = CVec::zeros(sp.total_dim());
        let strides = sp.strides();
        for n1 in 0..sp.mode_dims[0] {
            for n2 in 0..sp.mode_dims[1] {
                let plus = c1p[n1] * c2p[n2];
                let minus = c1m[n1] * c2m[n2];
                amp[n1 * strides[1] + n2 * strides[2]] = 0.5 * (plus + minus);
                amp[strides[0] + n1 * strides[1] + n2 * strides[2]] =
                    0.5 * (plus - minus);
            }
        }
        StateVector::from_amplitudes(sp.clone(), amp).unwrap()
    }

    #[test]
    fn partial_trace_cases() {
        let sp = space();
        let psi = fock_state(&sp, Spin::Down, &[0, 0]).unwrap();
        let spin = partial_trace(&psi.to_density(), &[Subsystem::Spin]).unwrap();
        assert_eq!(spin.matrix.nrows(), 2);
        assert!((spin.matrix[[0, 0]].re - 1.0).abs() < 1e-12);
        let ecs = spin_motion_ecs(&sp, c(1.2), c(1.2));
        let marg = partial_trace(&ecs.to_density(), &[Subsystem::Spin]).unwrap();
        let p_down = marg.matrix[[0, 0]].re;
        let n_plus2 = 2.0 + 2.0 * (-2.0f64 * (1.44 + 1.44)).exp();
        assert!((p_down - n_plus2 / 4.0).abs() < 1e-6, "{p_down}");
        assert!((p_down - 0.50157).abs() < 1e-5);
        let mode1 = partial_trace(&ecs.to_density(), &[Subsystem::Mode(0)]).unwrap();
        assert!(purity(&mode1) < 1.0 - 1e-3);
    }

    #[test]
    fn bosonic_commutator_below_truncation() {
        let sp = space();
        let a = annihilation_sparse(&sp, 0).to_dense();
        let ad = dagger(&a);
        let comm = &matmul(&a, &ad) - &matmul(&ad, &a);
        let table = sp.mode_index_table(0);
        let mut worst = 0.0f64;
        for i in 0..sp.total_dim() {
            if table[i] >= sp.mode_dims[0] - 1 {
                continue;
            }
            for j in 0..sp.total_dim() {
                if table[j] >= sp.mode_dims[0] - 1 {
                    continue;
                }
                let want = if i == j { ONE } else { ZERO };
                worst = worst.max((comm[[i, j]] - want).norm());
            }
        }
        assert!(worst < 1e-12);
    }

    #[test]
    fn wigner_integrates_to_one_for_vacuum() {
        // full 4D product grid at reduced resolution; dims large enough
        // that the far corners stay inside the truncation guard
        let sp = HilbertSpec::two_modes(40, 0.1, 0.087).unwrap();
        let vac = fock_state(&sp, Spin::Down, &[0, 0]).unwrap().to_density();
        let eval = WignerEvaluator::new(&vac);
        let step = 0.5;
        let axis: Vec<f64> = (0..13).map(|k| -3.0 + step * k as f64).collect();
        let mut total = 0.0;
        for &x1 in &axis {
            for &y1 in &axis {
                let b1 = C64::new(x1, y1);
                for &x2 in &axis {
                    for &y2 in &axis {
                        let b2 = C64::new(x2, y2);
                        total += eval.value(&[b1, b2]).unwrap();
                    }
                }
            }
        }
        total *= step.powi(4);
        assert!((total - 1.0).abs() < 0.02, "integral {total}");
    }
}
