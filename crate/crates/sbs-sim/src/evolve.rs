//! Time-evolution engines: adaptive unitary propagation of time-dependent
//! drives, the Lindblad master equation with equal-rate heating collapse
//! operators, Heisenberg-picture (adjoint) observable evolution, noise-phase
//! ensemble averaging, the rotational-smearing channel and the detection
//! error channel.

use crate::hamiltonian::{NoiseDrive, TimedHamiltonian};
use crate::linalg::{c, CMat, CVec, SparseOp, I, ONE, ZERO};
use crate::qstate::{annihilation_sparse, DensityMatrix, HilbertSpec, StateVector};
use crate::{Error, Result};
use num_complex::Complex64 as C64;
use std::collections::BTreeMap;

/// Noise configuration for an experiment.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    /// Initial thermal occupation n̄_j per mode.
    pub nbar_init: Vec<f64>,
    /// Equal-rate heating γ_j in quanta/s per mode; drives both a_j and
    /// a_j† collapse channels at this rate so dn̄/dt = γ_j.
    pub heat_rates: Vec<f64>,
    /// Motional dephasing rates δ_j = 2/τ_{01,j} in 1/s, used by the
    /// rotational-smearing channel.
    pub dephasing_rates: Vec<f64>,
    /// 60-Hz mode-frequency modulation, if present (common mode).
    pub noise_60hz: Option<NoiseDrive>,
    /// P(measure ↑ | true ↑).
    pub detect_up_given_up: f64,
    /// P(measure ↑ | true ↓).
    pub detect_up_given_down: f64,
    /// Shot-to-shot Gaussian mode-frequency spread (rad/s std) per mode;
    /// inhomogeneous noise for Ramsey-style scans.
    pub detuning_spread: Vec<f64>,
    /// Rate of the differential-dephasing collapse operator
    /// (a₁†a₁ − a₂†a₂); the coefficient multiplies the bare operator.
    pub differential_dephasing: Option<f64>,
}

impl NoiseModel {
    /// Noise-free model for two modes with ideal detection.
    pub fn ideal(n_modes: usize) -> Self {
        NoiseModel {
            nbar_init: vec![0.0; n_modes],
            heat_rates: vec![0.0; n_modes],
            dephasing_rates: vec![0.0; n_modes],
            noise_60hz: None,
            detect_up_given_up: 1.0,
            detect_up_given_down: 0.0,
            detuning_spread: vec![0.0; n_modes],
            differential_dephasing: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_rates = self
            .nbar_init
            .iter()
            .chain(&self.heat_rates)
            .chain(&self.dephasing_rates)
            .chain(&self.detuning_spread);
        for &r in all_rates {
            if r < 0.0 || !r.is_finite() {
                return Err(Error::InvalidNoise(format!("negative rate {r}")));
            }
        }
        let (qu, qd) = (self.detect_up_given_up, self.detect_up_given_down);
        if !(0.0..=1.0).contains(&qd) || !(0.0..=1.0).contains(&qu) || qd >= qu {
            return Err(Error::InvalidNoise(format!(
                "detection probabilities must satisfy 0 <= q↓ < q↑ <= 1, got q↑={qu}, q↓={qd}"
            )));
        }
        if let Some(k) = self.differential_dephasing {
            if k < 0.0 {
                return Err(Error::InvalidNoise("differential dephasing < 0".into()));
            }
        }
        Ok(())
    }

    pub fn with_heat_rates(mut self, rates: Vec<f64>) -> Self {
        self.heat_rates = rates;
        self
    }

    pub fn with_nbar(mut self, nbar: Vec<f64>) -> Self {
        self.nbar_init = nbar;
        self
    }

    pub fn with_60hz(mut self, drive: NoiseDrive) -> Self {
        self.noise_60hz = Some(drive);
        self
    }

    pub fn has_heating(&self) -> bool {
        self.heat_rates.iter().any(|&r| r > 0.0)
    }
}

/// Result of a propagation: final state plus named expectation series
/// sampled along the way.
#[derive(Clone, Debug)]
pub struct EvolutionResult<S> {
    pub final_state: S,
    pub sampled_times: Vec<f64>,
    pub expectations: BTreeMap<String, Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Dormand–Prince 5(4) adaptive integrator on flat complex buffers
// ---------------------------------------------------------------------------

const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const DP_C: [f64; 6] = [
    1.0 / 5.0,
    3.0 / 10.0,
    4.0 / 5.0,
    8.0 / 9.0,
    1.0,
    1.0,
];
const DP_E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Integrate dy/dt = f(t, y) from `t0` to `t1`, calling `observe` at each
/// requested sample time (including exactly `t1` if listed).
fn integrate<F, O>(
    y: &mut Vec<C64>,
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
    mut rhs: F,
    samples: &[f64],
    mut observe: O,
) -> Result<()>
where
    F: FnMut(f64, &[C64], &mut [C64]),
    O: FnMut(f64, &[C64]),
{
    let n = y.len();
    let mut k: Vec<Vec<C64>> = (0..7).map(|_| vec![ZERO; n]).collect();
    let mut ytmp = vec![ZERO; n];
    let mut t = t0;
    let span = t1 - t0;
    if span <= 0.0 {
        for &s in samples {
            observe(s, y);
        }
        return Ok(());
    }
    let mut sample_iter = samples.iter().peekable();
    while let Some(&&s) = sample_iter.peek() {
        if s <= t0 + 1e-18 * span.abs().max(1.0) {
            observe(s, y);
            sample_iter.next();
        } else {
            break;
        }
    }
    let mut dt = span / 256.0;
    let mut steps: u64 = 0;
    const MAX_STEPS: u64 = 40_000_000;
    k[0].iter_mut().for_each(|z| *z = ZERO);
    rhs(t, y, &mut k[0]);
    while t < t1 - 1e-15 * span {
        steps += 1;
        if steps > MAX_STEPS {
            return Err(Error::IntegratorFailure(format!(
                "step budget exhausted at t = {t:.6e} of {t1:.6e}"
            )));
        }
        let mut target = t1;
        if let Some(&&s) = sample_iter.peek() {
            target = target.min(s);
        }
        if t + dt > target {
            dt = target - t;
        }
        // stages
        for stage in 1..=6 {
            for (i, yt) in ytmp.iter_mut().enumerate() {
                let mut acc = y[i];
                for (j, kj) in k.iter().enumerate().take(stage) {
                    let a = DP_A[stage - 1][j];
                    if a != 0.0 {
                        acc += c(dt * a) * kj[i];
                    }
                }
                *yt = acc;
            }
            k[stage].iter_mut().for_each(|z| *z = ZERO);
            rhs(t + DP_C[stage - 1] * dt, &ytmp, &mut k[stage]);
        }
        // 5th-order solution is in ytmp already (last stage used b-row)
        // error estimate
        let mut err_sq = 0.0f64;
        for i in 0..n {
            let mut e = ZERO;
            for (j, kj) in k.iter().enumerate() {
                if DP_E[j] != 0.0 {
                    e += c(DP_E[j]) * kj[i];
                }
            }
            let e = (e * c(dt)).norm();
            let scale = atol + rtol * y[i].norm().max(ytmp[i].norm());
            err_sq += (e / scale) * (e / scale);
        }
        let err = (err_sq / n as f64).sqrt();
        if err <= 1.0 {
            t += dt;
            y.copy_from_slice(&ytmp);
            k.swap(0, 6); // FSAL
            while let Some(&&s) = sample_iter.peek() {
                if s <= t + 1e-12 * span {
                    observe(s, y);
                    sample_iter.next();
                } else {
                    break;
                }
            }
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        dt = (dt * factor).min(span);
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::IntegratorFailure("step size collapsed".into()));
        }
    }
    for &s in sample_iter {
        observe(s, y);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// unitary propagation
// ---------------------------------------------------------------------------

/// Propagate a pure state under dψ/dt = −i H(t) ψ with
/// H(t) = Σ_k (Ω_k/2) e^{iφ_k(t)} B_k + h.c.
///
/// `t0` is the absolute clock origin of this segment; phase functions are
/// evaluated on absolute time so 60-Hz phases accrue coherently across a
/// sequence. Records P↑ and per-mode ⟨a†a⟩ at each sample time (relative
/// samples within [0, duration]).
pub fn propagate_unitary(
    terms: &[TimedHamiltonian],
    psi0: &StateVector,
    t0: f64,
    duration: f64,
    sample_times: &[f64],
) -> Result<EvolutionResult<StateVector>> {
    let space = psi0.space.clone();
    for term in terms {
        if term.space != space {
            return Err(Error::SpaceMismatch("Hamiltonian term space".into()));
        }
    }
    let mut y: Vec<C64> = psi0.amplitudes.iter().cloned().collect();
    let abs_samples: Vec<f64> = sample_times.iter().map(|&s| t0 + s).collect();
    let mut rec = Recorder::new(&space, sample_times.to_vec());
    let spin_table = space.spin_index_table();
    let tables: Vec<Vec<usize>> =
        (0..space.n_modes()).map(|j| space.mode_index_table(j)).collect();
    integrate(
        &mut y,
        t0,
        t0 + duration,
        1e-10,
        1e-12,
        |t, y, dy| {
            for term in terms {
                term.accumulate_vec(t, -I, y, dy);
            }
        },
        &abs_samples,
        |_t, y| {
            let norm: f64 = y.iter().map(|z| z.norm_sqr()).sum();
            let p_up: f64 = y
                .iter()
                .enumerate()
                .filter(|(i, _)| spin_table[*i] == 1)
                .map(|(_, z)| z.norm_sqr())
                .sum();
            let mut nbars = vec![0.0; space.n_modes()];
            for (i, z) in y.iter().enumerate() {
                let w = z.norm_sqr();
                for (j, t) in tables.iter().enumerate() {
                    nbars[j] += t[i] as f64 * w;
                }
            }
            rec.push(norm, p_up, &nbars);
        },
    )?;
    let norm: f64 = y.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(Error::IntegratorFailure(format!(
            "norm drifted to {norm:.12}"
        )));
    }
    let final_state = StateVector::from_amplitudes(space, CVec::from_vec(y))?;
    let (sampled_times, expectations) = rec.finish();
    Ok(EvolutionResult { final_state, sampled_times, expectations })
}

struct Recorder {
    times: Vec<f64>,
    norm: Vec<f64>,
    p_up: Vec<f64>,
    nbar: Vec<Vec<f64>>,
    cursor: usize,
}

impl Recorder {
    fn new(space: &HilbertSpec, times: Vec<f64>) -> Self {
        Recorder {
            times,
            norm: Vec::new(),
            p_up: Vec::new(),
            nbar: vec![Vec::new(); space.n_modes()],
            cursor: 0,
        }
    }

    fn push(&mut self, norm: f64, p_up: f64, nbars: &[f64]) {
        self.norm.push(norm);
        self.p_up.push(p_up);
        for (j, &v) in nbars.iter().enumerate() {
            self.nbar[j].push(v);
        }
        self.cursor += 1;
    }

    fn finish(self) -> (Vec<f64>, BTreeMap<String, Vec<f64>>) {
        let mut m = BTreeMap::new();
        m.insert("norm".to_string(), self.norm);
        m.insert("p_up".to_string(), self.p_up);
        for (j, v) in self.nbar.into_iter().enumerate() {
            m.insert(format!("nbar_{j}"), v);
        }
        (self.times, m)
    }
}

// ---------------------------------------------------------------------------
// Lindblad propagation
// ---------------------------------------------------------------------------

/// Collapse channels prepared for a space: equal-rate heating on each mode
/// plus the optional differential-dephasing operator.
pub struct CollapseSet {
    ops: Vec<(SparseOp, SparseOp, Vec<f64>, f64)>, // (C, C†, diag(C†C), rate)
}

impl CollapseSet {
    pub fn from_noise(space: &HilbertSpec, noise: &NoiseModel) -> Self {
        let mut ops = Vec::new();
        for (mode, &rate) in noise.heat_rates.iter().enumerate() {
            if rate <= 0.0 {
                continue;
            }
            let a = annihilation_sparse(space, mode);
            let ad = a.dagger();
            // diag(C†C) must be that of the *truncated* operator or the
            // channel leaks trace at the Fock boundary
            let a_diag = a.column_norms_sqr();
            let ad_diag = ad.column_norms_sqr();
            ops.push((a.clone(), ad.clone(), a_diag, rate));
            ops.push((ad, a, ad_diag, rate));
        }
        if let Some(kappa) = noise.differential_dephasing {
            if kappa > 0.0 && space.n_modes() >= 2 {
                let n1 = crate::qstate::number_diagonal(space, 0);
                let n2 = crate::qstate::number_diagonal(space, 1);
                let diff: Vec<f64> =
                    n1.iter().zip(&n2).map(|(&a, &b)| a - b).collect();
                let trip: Vec<(usize, usize, C64)> = diff
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(i, &v)| (i, i, c(v)))
                    .collect();
                let op = SparseOp::from_triplets(space.total_dim(), trip);
                let sq: Vec<f64> = diff.iter().map(|&v| v * v).collect();
                ops.push((op.clone(), op, sq, kappa));
            }
        }
        CollapseSet { ops }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// dy += Σ_c r (C ρ C† − ½{C†C, ρ})
    fn accumulate(&self, rho: &CMat, scratch: &mut CMat, dy: &mut CMat) {
        let n = rho.nrows();
        for (cop, cdag, diag, rate) in &self.ops {
            scratch.fill(ZERO);
            cop.left_mul_acc(ONE, rho, scratch);
            cdag.right_mul_acc(c(*rate), scratch, dy);
            let half = 0.5 * rate;
            for i in 0..n {
                for j in 0..n {
                    dy[[i, j]] -= c(half * (diag[i] + diag[j])) * rho[[i, j]];
                }
            }
        }
    }

    /// Adjoint (Heisenberg) action: dO += Σ_c r (C† O C − ½{C†C, O})
    fn accumulate_adjoint(&self, o: &CMat, scratch: &mut CMat, dy: &mut CMat) {
        let n = o.nrows();
        for (cop, cdag, diag, rate) in &self.ops {
            scratch.fill(ZERO);
            cdag.left_mul_acc(ONE, o, scratch);
            cop.right_mul_acc(c(*rate), scratch, dy);
            let half = 0.5 * rate;
            for i in 0..n {
                for j in 0..n {
                    dy[[i, j]] -= c(half * (diag[i] + diag[j])) * o[[i, j]];
                }
            }
        }
    }
}

fn as_mat<'a>(y: &'a [C64], d: usize) -> ndarray::ArrayView2<'a, C64> {
    ndarray::ArrayView2::from_shape((d, d), y).expect("square buffer")
}

/// Propagate a density matrix under the Lindblad master equation with the
/// drive terms and the heating channels of `noise`.
pub fn propagate_lindblad(
    terms: &[TimedHamiltonian],
    rho0: &DensityMatrix,
    noise: &NoiseModel,
    t0: f64,
    duration: f64,
    sample_times: &[f64],
) -> Result<EvolutionResult<DensityMatrix>> {
    propagate_lindblad_tol(terms, rho0, noise, t0, duration, sample_times, 1e-9)
}

/// [`propagate_lindblad`] with a caller-chosen relative tolerance, for
/// long staged simulations where the default is unnecessarily tight.
pub fn propagate_lindblad_tol(
    terms: &[TimedHamiltonian],
    rho0: &DensityMatrix,
    noise: &NoiseModel,
    t0: f64,
    duration: f64,
    sample_times: &[f64],
    rtol: f64,
) -> Result<EvolutionResult<DensityMatrix>> {
    noise.validate()?;
    let space = rho0.space.clone();
    let d = space.total_dim();
    let collapses = CollapseSet::from_noise(&space, noise);
    let mut y: Vec<C64> = rho0.matrix.iter().cloned().collect();
    let abs_samples: Vec<f64> = sample_times.iter().map(|&s| t0 + s).collect();
    let mut rec = Recorder::new(&space, sample_times.to_vec());
    let spin_table = space.spin_index_table();
    let tables: Vec<Vec<usize>> =
        (0..space.n_modes()).map(|j| space.mode_index_table(j)).collect();
    let mut scratch = CMat::zeros((d, d));
    let mut rho_buf = CMat::zeros((d, d));
    let mut dy_buf = CMat::zeros((d, d));
    integrate(
        &mut y,
        t0,
        t0 + duration,
        rtol,
        1e-13,
        |t, y, dy| {
            rho_buf
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(y);
            dy_buf.fill(ZERO);
            for term in terms {
                term.accumulate_left(t, -I, &rho_buf, &mut dy_buf);
                term.accumulate_right(t, I, &rho_buf, &mut dy_buf);
            }
            collapses.accumulate(&rho_buf, &mut scratch, &mut dy_buf);
            dy.copy_from_slice(dy_buf.as_slice().unwrap());
        },
        &abs_samples,
        |_t, y| {
            let m = as_mat(y, d);
            let trace: f64 = (0..d).map(|i| m[[i, i]].re).sum();
            let p_up: f64 = (0..d)
                .filter(|&i| spin_table[i] == 1)
                .map(|i| m[[i, i]].re)
                .sum();
            let mut nbars = vec![0.0; space.n_modes()];
            for i in 0..d {
                let w = m[[i, i]].re;
                for (j, t) in tables.iter().enumerate() {
                    nbars[j] += t[i] as f64 * w;
                }
            }
            rec.push(trace, p_up, &nbars);
        },
    )?;
    let mut matrix = CMat::zeros((d, d));
    matrix.as_slice_mut().unwrap().copy_from_slice(&y);
    // symmetrize roundoff drift
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (matrix[[i, j]] + matrix[[j, i]].conj());
            matrix[[i, j]] = s;
            matrix[[j, i]] = s.conj();
        }
    }
    let tr = (0..d).map(|i| matrix[[i, i]].re).sum::<f64>();
    if (tr - 1.0).abs() > 1e-7 {
        return Err(Error::IntegratorFailure(format!("trace drifted to {tr:.10}")));
    }
    let final_state = DensityMatrix::from_raw(space, matrix);
    let (sampled_times, expectations) = rec.finish();
    Ok(EvolutionResult { final_state, sampled_times, expectations })
}

/// Heisenberg-picture evolution of an observable:
/// dO/dt = +i[H, O] + Σ_c r (C† O C − ½{C†C, O}), integrated for
/// `duration`. The returned operator satisfies
/// Tr[O · Λ(ρ)] = Tr[Λ†(O) · ρ] with the *time-reversed* drive phase,
/// so for time-dependent drives the phase functions must be supplied
/// already reversed: φ̃(τ) = φ(t0 + duration − τ).
pub fn evolve_observable_adjoint(
    terms: &[TimedHamiltonian],
    observable: &CMat,
    space: &HilbertSpec,
    noise: &NoiseModel,
    duration: f64,
) -> Result<CMat> {
    evolve_observable_adjoint_tol(terms, observable, space, noise, duration, 1e-8)
}

/// [`evolve_observable_adjoint`] with a caller-chosen relative tolerance.
pub fn evolve_observable_adjoint_tol(
    terms: &[TimedHamiltonian],
    observable: &CMat,
    space: &HilbertSpec,
    noise: &NoiseModel,
    duration: f64,
    rtol: f64,
) -> Result<CMat> {
    noise.validate()?;
    let d = space.total_dim();
    let collapses = CollapseSet::from_noise(space, noise);
    let mut y: Vec<C64> = observable.iter().cloned().collect();
    let mut scratch = CMat::zeros((d, d));
    let mut o_buf = CMat::zeros((d, d));
    let mut dy_buf = CMat::zeros((d, d));
    integrate(
        &mut y,
        0.0,
        duration,
        rtol,
        1e-12,
        |t, y, dy| {
            o_buf.as_slice_mut().unwrap().copy_from_slice(y);
            dy_buf.fill(ZERO);
            for term in terms {
                term.accumulate_left(t, I, &o_buf, &mut dy_buf);
                term.accumulate_right(t, -I, &o_buf, &mut dy_buf);
            }
            collapses.accumulate_adjoint(&o_buf, &mut scratch, &mut dy_buf);
            dy.copy_from_slice(dy_buf.as_slice().unwrap());
        },
        &[],
        |_, _| {},
    )?;
    let mut out = CMat::zeros((d, d));
    out.as_slice_mut().unwrap().copy_from_slice(&y);
    Ok(out)
}

// ---------------------------------------------------------------------------
// ensemble averaging, smearing, detection
// ---------------------------------------------------------------------------

/// Result of an ensemble average over evenly spaced noise phases.
#[derive(Clone, Debug)]
pub struct EnsembleResult<R> {
    pub phases: Vec<f64>,
    pub per_phase: Vec<R>,
}

impl<R> EnsembleResult<R> {
    pub fn mean_f64(&self) -> f64
    where
        R: Copy + Into<f64>,
    {
        self.per_phase.iter().map(|&r| r.into()).sum::<f64>() / self.per_phase.len() as f64
    }
}

impl EnsembleResult<Vec<f64>> {
    pub fn mean_series(&self) -> Vec<f64> {
        let n = self.per_phase[0].len();
        let mut out = vec![0.0; n];
        for series in &self.per_phase {
            for (o, &v) in out.iter_mut().zip(series) {
                *o += v;
            }
        }
        let k = self.per_phase.len() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        out
    }
}

/// Run `experiment` for `n_phases` evenly spaced noise phases
/// φ ∈ {0, 2π/n, …} and retain the per-phase results; reduction is in
/// fixed phase order.
pub fn ensemble_average_60hz<R>(
    n_phases: usize,
    mut experiment: impl FnMut(f64) -> Result<R>,
) -> Result<EnsembleResult<R>> {
    let phases: Vec<f64> = (0..n_phases)
        .map(|k| 2.0 * std::f64::consts::PI * k as f64 / n_phases as f64)
        .collect();
    let mut per_phase = Vec::with_capacity(n_phases);
    for &phi in &phases {
        per_phase.push(experiment(phi)?);
    }
    Ok(EnsembleResult { phases, per_phase })
}

/// Gaussian rotational-smearing channel: a weighted mixture of per-mode
/// phase-space rotations R(φ_j) with φ_j sampled at `n_samples` evenly
/// spaced points of [−4σ_j, 4σ_j] and Gaussian weights renormalized to 1.
///
/// Equivalent to a Hadamard product with a factorized kernel
/// k_j(Δn) = Σ_φ w(φ) e^{−iφΔn}, which keeps the channel exactly trace
/// preserving.
pub fn rotational_smearing(
    rho: &DensityMatrix,
    sigmas: &[f64],
    n_samples: usize,
) -> Result<DensityMatrix> {
    let space = &rho.space;
    if sigmas.len() != space.n_modes() {
        return Err(Error::SpaceMismatch("one σ per mode".into()));
    }
    if sigmas.iter().any(|&s| s < 0.0) {
        return Err(Error::InvalidNoise("σ must be >= 0".into()));
    }
    // per-mode kernels over index differences Δn ∈ [-(d-1), d-1]
    let kernels: Vec<Vec<C64>> = sigmas
        .iter()
        .zip(&space.mode_dims)
        .map(|(&sigma, &d)| {
            let span = 2 * d - 1;
            if sigma == 0.0 {
                return vec![ONE; span];
            }
            let phis: Vec<f64> = (0..n_samples)
                .map(|k| {
                    -4.0 * sigma
                        + 8.0 * sigma * k as f64 / (n_samples.max(2) - 1) as f64
                })
                .collect();
            let mut weights: Vec<f64> = phis
                .iter()
                .map(|&p| (-p * p / (2.0 * sigma * sigma)).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            (0..span)
                .map(|k| {
                    let dn = k as i64 - (d as i64 - 1);
                    phis.iter()
                        .zip(&weights)
                        .map(|(&p, &w)| c(w) * C64::from_polar(1.0, -p * dn as f64))
                        .sum()
                })
                .collect()
        })
        .collect();
    let d = space.total_dim();
    let tables: Vec<Vec<usize>> =
        (0..space.n_modes()).map(|j| space.mode_index_table(j)).collect();
    let mut out = rho.matrix.clone();
    for i in 0..d {
        for j in 0..d {
            let mut f = ONE;
            for (m, t) in tables.iter().enumerate() {
                let dn = t[i] as i64 - t[j] as i64 + (space.mode_dims[m] as i64 - 1);
                f *= kernels[m][dn as usize];
            }
            out[[i, j]] *= f;
        }
    }
    Ok(DensityMatrix::from_raw(space.clone(), out))
}

/// Forward detection channel: P(Y↑) = q↑ P(X↑) + q↓ (1 − P(X↑)).
pub fn detection_channel(p_up_true: f64, q_up: f64, q_down: f64) -> f64 {
    q_up * p_up_true + q_down * (1.0 - p_up_true)
}

/// Inverse detection correction P(X↑) = (P(Y↑) − q↓)/(q↑ − q↓), clamped to
/// [0, 1] with a warning for out-of-range inputs (finite-shot artifact).
pub fn detection_correct(p_measured: f64, q_up: f64, q_down: f64) -> f64 {
    let p = (p_measured - q_down) / (q_up - q_down);
    if !(0.0..=1.0).contains(&p) {
        log::warn!("detection-corrected probability {p:.4} clamped to [0,1]");
    }
    p.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{
        const_phase, ideal_sbs, sbs_pi_time, sbs_strength, DetuningModel,
        DrivePhases,
    };
    use crate::qstate::{
        fock_state, purity, rotation_operator, thermal_density, Spin,
    };
    use std::f64::consts::PI;

    const TWO_PI: f64 = 2.0 * PI;

    #[test]
    fn zero_hamiltonian_is_identity_evolution() {
        let sp = HilbertSpec::two_modes(6, 0.1, 0.087).unwrap();
        let psi = fock_state(&sp, Spin::Down, &[1, 0]).unwrap();
        let res = propagate_unitary(&[], &psi, 0.0, 1e-3, &[0.5e-3]).unwrap();
        assert!(res.final_state.overlap_sqr(&psi) > 1.0 - 1e-12);
        assert_eq!(res.sampled_times.len(), 1);
    }

    #[test]
    fn ideal_sbs_pi_pulse_parity_mapping() {
        // |↓⟩|1⟩|0⟩ → |↑⟩|0⟩|1⟩ with phase i e^{−iφ_M}
        let sp = HilbertSpec::two_modes(8, 0.1, 0.087).unwrap();
        let omega = TWO_PI * 1.0e5;
        let g = sbs_strength(&sp, omega);
        let phi_m = 0.7;
        let h = ideal_sbs(&sp, g, 0.0, const_phase(phi_m)).unwrap();
        let psi = fock_state(&sp, Spin::Down, &[1, 0]).unwrap();
        let t_pi = sbs_pi_time(&sp, omega);
        let res = propagate_unitary(&[h], &psi, 0.0, t_pi, &[]).unwrap();
        let target = fock_state(&sp, Spin::Up, &[0, 1]).unwrap();
        let amp = target.inner(&res.final_state);
        let expect = I * C64::from_polar(1.0, -phi_m);
        assert!((amp - expect).norm() < 1e-8, "amp {amp}, want {expect}");
    }

    #[test]
    fn sbs_population_formula_n1() {
        let sp = HilbertSpec::two_modes(8, 0.1, 0.087).unwrap();
        let omega = TWO_PI * 1.0e5;
        let g = sbs_strength(&sp, omega);
        let h = ideal_sbs(&sp, g, 0.0, const_phase(0.0)).unwrap();
        let psi = fock_state(&sp, Spin::Down, &[1, 0]).unwrap();
        let t_pi = sbs_pi_time(&sp, omega);
        let samples: Vec<f64> = (0..40).map(|k| k as f64 * t_pi / 20.0).collect();
        let res = propagate_unitary(&[h], &psi, 0.0, 2.0 * t_pi, &samples).unwrap();
        let p_up = &res.expectations["p_up"];
        for (k, &t) in res.sampled_times.iter().enumerate() {
            let want = (0.5 * g * t).sin().powi(2);
            assert!((p_up[k] - want).abs() < 1e-7, "t={t}: {} vs {want}", p_up[k]);
        }
    }

    #[test]
    fn heating_law_matches_rate() {
        let sp = HilbertSpec::two_modes(12, 0.1, 0.087).unwrap();
        let rho = thermal_density(&sp, &[0.0, 0.0]).unwrap();
        let noise = NoiseModel::ideal(2).with_heat_rates(vec![39.0, 5.0]);
        let res =
            propagate_lindblad(&[], &rho, &noise, 0.0, 1.0e-3, &[1.0e-3]).unwrap();
        let nbar = res.final_state.mean_phonons(0);
        assert!((nbar - 0.039).abs() < 1e-4, "{nbar}");
        let nbar2 = res.final_state.mean_phonons(1);
        assert!((nbar2 - 0.005).abs() < 1e-4);
    }

    #[test]
    fn lindblad_without_noise_matches_unitary() {
        let sp = HilbertSpec::two_modes(6, 0.1, 0.087).unwrap();
        let omega = TWO_PI * 1.0e5;
        let g = sbs_strength(&sp, omega);
        let h = ideal_sbs(&sp, g, 0.0, const_phase(0.3)).unwrap();
        let psi = fock_state(&sp, Spin::Down, &[1, 1]).unwrap();
        let t = 0.4 * sbs_pi_time(&sp, omega);
        let noise = NoiseModel::ideal(2);
        let uni = propagate_unitary(&[h.clone()], &psi, 0.0, t, &[]).unwrap();
        let lin =
            propagate_lindblad(&[h], &psi.to_density(), &noise, 0.0, t, &[]).unwrap();
        let target = uni.final_state.to_density();
        let f = crate::qstate::fidelity(&lin.final_state, &target).unwrap();
        assert!(f > 1.0 - 1e-8, "{f}");
    }

    #[test]
    fn sbs_with_heating_loses_contrast() {
        let sp = HilbertSpec::two_modes(8, 0.1, 0.087).unwrap();
        let omega = TWO_PI * 1.0e5;
        let g = sbs_strength(&sp, omega);
        let h = ideal_sbs(&sp, g, 0.0, const_phase(0.0)).unwrap();
        let rho = fock_state(&sp, Spin::Down, &[1, 0]).unwrap().to_density();
        let noise = NoiseModel::ideal(2).with_heat_rates(vec![100.0, 300.0]);
        let t_pi = sbs_pi_time(&sp, omega);
        // at 1.5 t_pi the ideal signal returns to P↑ = 1/2; compare the
        // swing at 2 t_pi (ideal: 0) against the noisy value
        let res = propagate_lindblad(
            &[h],
            &rho,
            &noise,
            0.0,
            2.0 * t_pi,
            &[2.0 * t_pi],
        )
        .unwrap();
        let p_up = res.expectations["p_up"][0];
        assert!(p_up > 1e-3, "heating should lift P↑ off zero, got {p_up}");
        assert!((res.final_state.trace().re - 1.0).abs() < 1e-7);
    }

    #[test]
    fn adjoint_consistency_with_forward_evolution() {
        let sp = HilbertSpec::two_modes(4, 0.1, 0.087).unwrap();
        let omega = TWO_PI * 1.0e5;
        let g = sbs_strength(&sp, omega);
        let noise = NoiseModel::ideal(2).with_heat_rates(vec![200.0, 70.0]);
        let duration = 2.0e-4;
        // constant-phase drive: time-reversal of phases is trivial
        let h = ideal_sbs(&sp, g, 0.0, const_phase(0.4)).unwrap();
        let rho = thermal_density(&sp, &[0.2, 0.1]).unwrap();
        let fwd = propagate_lindblad(&[h.clone()], &rho, &noise, 0.0, duration, &[])
            .unwrap();
        // observable: joint parity
        let pobs = crate::qstate::parity_operator(&sp, &[0, 1]).matrix;
        let heis =
            evolve_observable_adjoint(&[h], &pobs, &sp, &noise, duration).unwrap();
        let direct = fwd.final_state.expectation(&pobs).re;
        let via_adjoint = rho.expectation(&heis).re;
        assert!(
            (direct - via_adjoint).abs() < 1e-7,
            "{direct} vs {via_adjoint}"
        );
    }

    #[test]
    fn ensemble_average_delta_zero_identical() {
        let res = ensemble_average_60hz(8, |phi| {
            // Δ = 0: the experiment ignores the phase
            let _ = phi;
            Ok(1.25f64)
        })
        .unwrap();
        assert_eq!(res.per_phase.len(), 8);
        assert!(res.per_phase.iter().all(|&x| x == 1.25));
        // phase grid is invariant under relabeling by 2π/8
        let shifted: Vec<f64> = res
            .phases
            .iter()
            .map(|p| (p + PI / 4.0) % (2.0 * PI))
            .collect();
        for s in shifted {
            assert!(res
                .phases
                .iter()
                .any(|&p| ((p - s + PI) % (2.0 * PI) - PI).abs() < 1e-12));
        }
    }

    #[test]
    fn smearing_identity_and_fixed_point() {
        let sp = HilbertSpec::two_modes(8, 0.1, 0.087).unwrap();
        let ecs = crate::qstate::ecs_state(&sp, c(1.0), c(0.8), crate::qstate::Parity::Even)
            .unwrap()
            .to_density();
        let out = rotational_smearing(&ecs, &[0.0, 0.0], 20).unwrap();
        assert!(crate::linalg::max_abs_diff(&out.matrix, &ecs.matrix) < 1e-14);
        // thermal states are fixed points for any σ
        let th = thermal_density(&sp, &[0.3, 0.1]).unwrap();
        let out = rotational_smearing(&th, &[0.4, 0.7], 20).unwrap();
        assert!(crate::linalg::max_abs_diff(&out.matrix, &th.matrix) < 1e-14);
        // trace is preserved exactly for non-trivial σ
        let out = rotational_smearing(&ecs, &[0.3, 0.2], 20).unwrap();
        assert!((out.trace().re - 1.0).abs() < 1e-12);
        assert!(purity(&out) < purity(&ecs));
        // smearing width example: σ = √(δ T_eff)
        let sigma = (1307.0f64 * 75.0e-6).sqrt();
        assert!((sigma - 0.313).abs() < 1e-3);
    }

    #[test]
    fn smearing_matches_explicit_rotation_sum() {
        let sp = HilbertSpec::two_modes(6, 0.1, 0.087).unwrap();
        let ecs = crate::qstate::ecs_state(&sp, c(0.9), c(0.7), crate::qstate::Parity::Even)
            .unwrap()
            .to_density();
        let sigmas = [0.35, 0.15];
        let n = 20usize;
        let fast = rotational_smearing(&ecs, &sigmas, n).unwrap();
        // explicit double sum over rotation angles
        let mut acc = CMat::zeros((sp.total_dim(), sp.total_dim()));
        let mut wtot = 0.0;
        let grid = |sigma: f64, k: usize| -> f64 {
            -4.0 * sigma + 8.0 * sigma * k as f64 / (n - 1) as f64
        };
        for k1 in 0..n {
            let p1 = grid(sigmas[0], k1);
            let w1 = (-p1 * p1 / (2.0 * sigmas[0] * sigmas[0])).exp();
            for k2 in 0..n {
                let p2 = grid(sigmas[1], k2);
                let w2 = (-p2 * p2 / (2.0 * sigmas[1] * sigmas[1])).exp();
                let r1 = rotation_operator(&sp, 0, p1).matrix;
                let r2 = rotation_operator(&sp, 1, p2).matrix;
                // R†ρR for diagonal rotations is an elementwise phase
                let mut term = ecs.matrix.clone();
                for i in 0..sp.total_dim() {
                    for j in 0..sp.total_dim() {
                        term[[i, j]] *= r1[[i, i]].conj()
                            * r2[[i, i]].conj()
                            * r1[[j, j]]
                            * r2[[j, j]];
                    }
                }
                acc += &term.mapv(|z| z * c(w1 * w2));
                wtot += w1 * w2;
            }
        }
        acc.mapv_inplace(|z| z / c(wtot));
        assert!(crate::linalg::max_abs_diff(&acc, &fast.matrix) < 1e-12);
    }

    #[test]
    fn detection_roundtrip_and_example() {
        assert_eq!(detection_channel(0.3, 1.0, 0.0), 0.3);
        let p = 0.37;
        let fwd = detection_channel(p, 0.94, 0.005);
        let back = detection_correct(fwd, 0.94, 0.005);
        assert!((back - p).abs() < 1e-12);
        let corrected = detection_correct(0.5, 0.95, 0.01);
        assert!((corrected - 0.52128).abs() < 1e-5, "{corrected}");
    }

    #[test]
    fn noise_model_validation() {
        let mut noise = NoiseModel::ideal(2);
        noise.heat_rates[0] = -1.0;
        assert!(noise.validate().is_err());
        let mut noise = NoiseModel::ideal(2);
        noise.detect_up_given_down = 0.97;
        noise.detect_up_given_up = 0.95;
        assert!(noise.validate().is_err());
    }

    #[test]
    fn common_mode_noise_invisible_to_sbs() {
        // identical detuning integrals on both modes leave the exact SBS
        // drive unchanged
        let sp = HilbertSpec::two_modes(8, 0.1, 0.087).unwrap();
        let omega = TWO_PI * 1.0e5;
        let noise = NoiseDrive::mains_60hz(TWO_PI * 200.0, 0.9).unwrap();
        let det = DetuningModel::common_mode(2, noise);
        let phases = DrivePhases::from_spin_motion(0.0, 0.0);
        let terms =
            crate::hamiltonian::sbs_drive(&sp, omega, phases, &det).unwrap();
        let psi = fock_state(&sp, Spin::Down, &[1, 0]).unwrap();
        let t_pi = sbs_pi_time(&sp, omega);
        let noisy = propagate_unitary(&terms, &psi, 0.0, t_pi, &[]).unwrap();
        let clean_terms =
            crate::hamiltonian::sbs_drive(&sp, omega, phases, &DetuningModel::none(2))
                .unwrap();
        let clean = propagate_unitary(&clean_terms, &psi, 0.0, t_pi, &[]).unwrap();
        let overlap = noisy.final_state.overlap_sqr(&clean.final_state);
        assert!(overlap > 1.0 - 1e-8, "{overlap}");
    }

    #[test]
    fn differential_noise_moves_sbs() {
        let sp = HilbertSpec::two_modes(8, 0.1, 0.087).unwrap();
        let omega = TWO_PI * 1.0e5;
        let noise = NoiseDrive::mains_60hz(TWO_PI * 400.0, 0.3).unwrap();
        let det = DetuningModel::differential(noise);
        let phases = DrivePhases::from_spin_motion(0.0, 0.0);
        let terms = crate::hamiltonian::sbs_drive(&sp, omega, phases, &det).unwrap();
        let psi = fock_state(&sp, Spin::Down, &[1, 0]).unwrap();
        let t_pi = sbs_pi_time(&sp, omega);
        // wait 2 ms before driving so the differential phase has drifted
        let noisy = propagate_unitary(&terms, &psi, 2.0e-3, t_pi, &[]).unwrap();
        let clean_terms =
            crate::hamiltonian::sbs_drive(&sp, omega, phases, &DetuningModel::none(2))
                .unwrap();
        let clean = propagate_unitary(&clean_terms, &psi, 2.0e-3, t_pi, &[]).unwrap();
        let overlap = noisy.final_state.overlap_sqr(&clean.final_state);
        assert!(overlap < 1.0 - 1e-4, "{overlap}");
    }

    use crate::linalg::c;
    use crate::qstate::HilbertSpec;
    use num_complex::Complex64 as C64;
    use crate::linalg::I;
}
