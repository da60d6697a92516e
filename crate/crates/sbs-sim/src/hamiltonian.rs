//! Exact time-dependent Raman Hamiltonians for a spin coupled to
//! truncated bosonic modes, with no Lamb–Dicke approximation.
//!
//! Every drive is assembled from "single-beam" terms
//!
//! ```text
//! H^(n₁,n₂)(t; Ω, φ) = (Ω/2) e^{iφ(t)} σ₊ · M₁^(n₁) · M₂^(n₂) + h.c.
//! ```
//!
//! where `M_j^(k)` is the k-th diagonal band of exp(i η_j (a_j† + a_j)):
//! the part of the exact mode kick that raises the phonon number of mode
//! `j` by `k` while the spin flips up. Detunings and mode-frequency noise
//! enter only through the time-dependent phase φ(t); all operators live
//! in the interaction picture.

use crate::linalg::{c, CMat, SparseOp, ZERO};
use crate::qstate::{
    annihilation_sparse, displacement_elements, embed_spin_op, sigma_phi,
    sigma_plus, HilbertSpec,
};
use crate::{Error, Result};
use num_complex::Complex64 as C64;
use std::sync::Arc;

/// Time-dependent drive phase in radians.
pub type PhaseFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

pub fn const_phase(phi: f64) -> PhaseFn {
    Arc::new(move |_| phi)
}

/// Spin/motional phase bookkeeping for a bichromatic drive:
/// φ_S = (φ_b + φ_r)/2 and φ_M = (φ_b − φ_r)/2.
#[derive(Clone, Copy, Debug)]
pub struct DrivePhases {
    pub phi_s: f64,
    pub phi_m: f64,
    pub phi_b: f64,
    pub phi_r: f64,
}

impl DrivePhases {
    pub fn from_tones(phi_b: f64, phi_r: f64) -> Self {
        DrivePhases {
            phi_s: 0.5 * (phi_b + phi_r),
            phi_m: 0.5 * (phi_b - phi_r),
            phi_b,
            phi_r,
        }
    }

    pub fn from_spin_motion(phi_s: f64, phi_m: f64) -> Self {
        DrivePhases { phi_s, phi_m, phi_b: phi_s + phi_m, phi_r: phi_s - phi_m }
    }
}

/// 60-Hz mode-frequency modulation: δ(t) = Δ sin(ω_noise t + φ_noise).
#[derive(Clone, Copy, Debug)]
pub struct NoiseDrive {
    /// Modulation amplitude Δ in rad/s.
    pub delta_amp: f64,
    /// Noise angular frequency, 2π·60 rad/s for mains pickup.
    pub omega_noise: f64,
    /// Noise phase at the sequence clock origin.
    pub phi_noise: f64,
}

impl NoiseDrive {
    pub fn new(delta_amp: f64, omega_noise: f64, phi_noise: f64) -> Result<Self> {
        if delta_amp < 0.0 {
            return Err(Error::InvalidNoise("Δ must be >= 0".into()));
        }
        Ok(NoiseDrive { delta_amp, omega_noise, phi_noise })
    }

    pub fn mains_60hz(delta_amp: f64, phi_noise: f64) -> Result<Self> {
        Self::new(delta_amp, 2.0 * std::f64::consts::PI * 60.0, phi_noise)
    }

    pub fn with_phase(self, phi_noise: f64) -> Self {
        NoiseDrive { phi_noise, ..self }
    }

    /// ∫₀ᵗ δ(τ) dτ = (Δ/ω)(cos φ_noise − cos(ω t + φ_noise)).
    pub fn integral(&self, t: f64) -> f64 {
        if self.delta_amp == 0.0 {
            return 0.0;
        }
        self.delta_amp / self.omega_noise
            * (self.phi_noise.cos() - (self.omega_noise * t + self.phi_noise).cos())
    }
}

/// Per-mode detuning integrals I_j(t) = ∫₀ᵗ δ_j(τ) dτ feeding the drive
/// phases. A tone of sideband orders n⃗ acquires φ(t) = φ₀ − Σ_j n_j I_j(t).
#[derive(Clone)]
pub struct DetuningModel {
    integrals: Vec<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl DetuningModel {
    pub fn none(n_modes: usize) -> Self {
        let zero: Arc<dyn Fn(f64) -> f64 + Send + Sync> = Arc::new(|_| 0.0);
        DetuningModel { integrals: vec![zero; n_modes] }
    }

    /// Identical δ(t) on every mode (in-phase mains pickup).
    pub fn common_mode(n_modes: usize, noise: NoiseDrive) -> Self {
        let f: Arc<dyn Fn(f64) -> f64 + Send + Sync> =
            Arc::new(move |t| noise.integral(t));
        DetuningModel { integrals: vec![f; n_modes] }
    }

    /// Sinusoidal fluctuation of the mode splitting ω₂ − ω₁: applied with
    /// opposite sign to the two modes so only the difference moves.
    pub fn differential(noise: NoiseDrive) -> Self {
        let f1: Arc<dyn Fn(f64) -> f64 + Send + Sync> =
            Arc::new(move |t| -0.5 * noise.integral(t));
        let f2: Arc<dyn Fn(f64) -> f64 + Send + Sync> =
            Arc::new(move |t| 0.5 * noise.integral(t));
        DetuningModel { integrals: vec![f1, f2] }
    }

    /// Constant detunings, one per mode.
    pub fn constant(deltas: Vec<f64>) -> Self {
        DetuningModel {
            integrals: deltas
                .into_iter()
                .map(|d| {
                    let f: Arc<dyn Fn(f64) -> f64 + Send + Sync> =
                        Arc::new(move |t| d * t);
                    f
                })
                .collect(),
        }
    }

    pub fn integral(&self, mode: usize, t: f64) -> f64 {
        (self.integrals[mode])(t)
    }

    /// φ(t) = φ₀ − Σ_j n_j I_j(t) for a tone of sideband orders `orders`.
    pub fn tone_phase(&self, orders: &[i32], phi0: f64) -> PhaseFn {
        let integrals = self.integrals.clone();
        let orders = orders.to_vec();
        Arc::new(move |t| {
            let mut phi = phi0;
            for (j, &n) in orders.iter().enumerate() {
                if n != 0 {
                    phi -= n as f64 * (integrals[j])(t);
                }
            }
            phi
        })
    }
}

/// One conjugate pair of a drive: H(t) = (Ω/2) e^{iφ(t)} B + h.c.
#[derive(Clone)]
pub struct TimedHamiltonian {
    pub space: HilbertSpec,
    /// The e^{iφ}-independent part multiplying σ₊ (or the full raising
    /// half for ideal drives).
    pub base: SparseOp,
    base_dag: SparseOp,
    /// Ω in rad/s.
    pub amplitude: f64,
    pub phase_fn: PhaseFn,
    /// Natural duration of the segment this drive was built for, seconds
    /// (0 when the factory has no natural time scale).
    pub segment_duration: f64,
}

impl TimedHamiltonian {
    pub fn new(
        space: HilbertSpec,
        base: SparseOp,
        amplitude: f64,
        phase_fn: PhaseFn,
    ) -> Self {
        let base_dag = base.dagger();
        TimedHamiltonian {
            space,
            base,
            base_dag,
            amplitude,
            phase_fn,
            segment_duration: 0.0,
        }
    }

    pub fn with_duration(mut self, duration: f64) -> Self {
        self.segment_duration = duration;
        self
    }

    pub fn phase(&self, t: f64) -> f64 {
        (self.phase_fn)(t)
    }

    /// Dense H(t); Hermitian by construction.
    pub fn assemble(&self, t: f64) -> CMat {
        let d = self.space.total_dim();
        let mut m = CMat::zeros((d, d));
        let z = c(0.5 * self.amplitude) * C64::from_polar(1.0, self.phase(t));
        let mut dense = self.base.to_dense();
        dense.mapv_inplace(|x| x * z);
        m += &dense;
        let mut dd = self.base_dag.to_dense();
        dd.mapv_inplace(|x| x * z.conj());
        m += &dd;
        m
    }

    /// y += scale · H(t) · x for a state vector x.
    pub fn accumulate_vec(&self, t: f64, scale: C64, x: &[C64], y: &mut [C64]) {
        let half = c(0.5 * self.amplitude) * C64::from_polar(1.0, self.phase(t));
        self.base.apply_vec(scale * half, x, y);
        self.base_dag.apply_vec(scale * half.conj(), x, y);
    }

    /// out += scale · H(t) · ρ
    pub fn accumulate_left(&self, t: f64, scale: C64, rho: &CMat, out: &mut CMat) {
        let half = c(0.5 * self.amplitude) * C64::from_polar(1.0, self.phase(t));
        self.base.left_mul_acc(scale * half, rho, out);
        self.base_dag.left_mul_acc(scale * half.conj(), rho, out);
    }

    /// out += scale · ρ · H(t)
    pub fn accumulate_right(&self, t: f64, scale: C64, rho: &CMat, out: &mut CMat) {
        let half = c(0.5 * self.amplitude) * C64::from_polar(1.0, self.phase(t));
        self.base.right_mul_acc(scale * half, rho, out);
        self.base_dag.right_mul_acc(scale * half.conj(), rho, out);
    }
}

/// k-th diagonal band of the exact single-mode kick exp(i η (a† + a)):
/// elements with (row − col) = k; k > 0 raises the phonon number.
pub fn mode_kick_band(dim: usize, eta: f64, order: i32) -> CMat {
    let full = displacement_elements(dim, C64::new(0.0, eta));
    let mut out = CMat::zeros((dim, dim));
    for m in 0..dim {
        for n in 0..dim {
            if m as i64 - n as i64 == order as i64 {
                out[[m, n]] = full[[m, n]];
            }
        }
    }
    out
}

/// Single-beam term of arbitrary sideband orders (one per mode):
/// (Ω/2) e^{iφ(t)} σ₊ Π_j diag_{n_j}(e^{i η_j (a_j†+a_j)}) + h.c.
pub fn single_beam_orders(
    space: &HilbertSpec,
    orders: &[i32],
    omega: f64,
    phase_fn: PhaseFn,
) -> Result<TimedHamiltonian> {
    if orders.len() != space.n_modes() {
        return Err(Error::SpaceMismatch("one sideband order per mode".into()));
    }
    for (j, &n) in orders.iter().enumerate() {
        if n.unsigned_abs() as usize >= space.mode_dims[j] {
            return Err(Error::FockOutOfRange {
                mode: j,
                index: n.unsigned_abs() as usize,
                dim: space.mode_dims[j],
            });
        }
    }
    let bands: Vec<CMat> = orders
        .iter()
        .enumerate()
        .map(|(j, &n)| mode_kick_band(space.mode_dims[j], space.lamb_dicke[j], n))
        .collect();
    let strides = space.strides();
    let mut trip = Vec::new();
    // σ₊ ⊗ Π_j band_j : row spin = 1, col spin = 0
    let md = space.motional_dim();
    for col in 0..md {
        // decompose col into mode indices
        let mut ns = vec![0usize; space.n_modes()];
        for j in 0..space.n_modes() {
            ns[j] = (col / strides[j + 1]) % space.mode_dims[j];
        }
        let mut rows_ok = true;
        let mut row = 0usize;
        let mut val = crate::linalg::ONE;
        for j in 0..space.n_modes() {
            let m = ns[j] as i64 + orders[j] as i64;
            if m < 0 || m >= space.mode_dims[j] as i64 {
                rows_ok = false;
                break;
            }
            val *= bands[j][[m as usize, ns[j]]];
            row += m as usize * strides[j + 1];
        }
        if !rows_ok || val == ZERO {
            continue;
        }
        trip.push((strides[0] + row, col, val));
    }
    let base = SparseOp::from_triplets(space.total_dim(), trip);
    Ok(TimedHamiltonian::new(space.clone(), base, omega, phase_fn))
}

/// Two-mode single-beam Hamiltonian of sideband orders (n₁, n₂).
pub fn single_beam(
    space: &HilbertSpec,
    n1: i32,
    n2: i32,
    omega: f64,
    phase_fn: PhaseFn,
) -> Result<TimedHamiltonian> {
    single_beam_orders(space, &[n1, n2], omega, phase_fn)
}

/// Exact spin-dependent beam-splitter drive: the (+1, −1) tone carries
/// phase φ_S + φ_M and the (−1, +1) tone φ_S − φ_M, so that a π-pulse
/// maps |↓⟩|n₁⟩|n₂⟩ to i^{n₁+n₂} e^{−i(n₁−n₂)φ_M}(|+⟩+(−1)^{n₁+n₂}|−⟩)
/// |n₂⟩|n₁⟩/√2 with exactly this φ_M sign. Detunings of the mode
/// splitting enter through `detuning`.
pub fn sbs_drive(
    space: &HilbertSpec,
    omega: f64,
    phases: DrivePhases,
    detuning: &DetuningModel,
) -> Result<Vec<TimedHamiltonian>> {
    let red = single_beam_orders(
        space,
        &[1, -1],
        omega,
        detuning.tone_phase(&[1, -1], phases.phi_s + phases.phi_m),
    )?;
    let blue = single_beam_orders(
        space,
        &[-1, 1],
        omega,
        detuning.tone_phase(&[-1, 1], phases.phi_s - phases.phi_m),
    )?;
    Ok(vec![red, blue])
}

/// Exact spin-dependent force on one mode: tones (±1) with phases
/// φ_b, φ_r and mode-frequency noise through `detuning`.
pub fn sdf_drive(
    space: &HilbertSpec,
    mode: usize,
    omega: f64,
    phases: DrivePhases,
    detuning: &DetuningModel,
) -> Result<Vec<TimedHamiltonian>> {
    let mut up = vec![0i32; space.n_modes()];
    up[mode] = 1;
    let mut dn = vec![0i32; space.n_modes()];
    dn[mode] = -1;
    let blue = single_beam_orders(space, &up, omega, detuning.tone_phase(&up, phases.phi_b))?;
    let red = single_beam_orders(space, &dn, omega, detuning.tone_phase(&dn, phases.phi_r))?;
    Ok(vec![blue, red])
}

/// Off-resonant bichromatic carrier pair: both tones drive the (0,0)
/// transition, detuned by ±δ. Leading order: ℏΩ cos(δt + φ_M) σ_{φ_S}.
pub fn bichromatic_carrier(
    space: &HilbertSpec,
    omega: f64,
    delta: f64,
    phases: DrivePhases,
) -> Result<Vec<TimedHamiltonian>> {
    let zeros = vec![0i32; space.n_modes()];
    let phi_b = phases.phi_b;
    let phi_r = phases.phi_r;
    let blue = single_beam_orders(
        space,
        &zeros,
        omega,
        Arc::new(move |t| delta * t + phi_b),
    )?;
    let red = single_beam_orders(
        space,
        &zeros,
        omega,
        Arc::new(move |t| -delta * t + phi_r),
    )?;
    Ok(vec![blue, red])
}

/// Ideal SBS generator: H = −(g/2)(a₁†a₂ e^{iφ_M} + a₁a₂† e^{−iφ_M}) σ_{φ_S}
/// with g = η₁η₂Ω, the sign convention under which the π-pulse transform
/// U a₁† U† = a₁† cos(θσ_x/2) + i a₂† e^{−iφ_M} sin(θσ_x/2) holds.
///
/// Implemented as the single conjugate pair (g/2)e^{iφ_M}·(−σ_{φ_S} a₁†a₂)
/// + h.c., so a time-dependent φ_M(t) is supported directly.
pub fn ideal_sbs(
    space: &HilbertSpec,
    g: f64,
    phi_s: f64,
    phi_m: PhaseFn,
) -> Result<TimedHamiltonian> {
    if space.n_modes() != 2 {
        return Err(Error::SpaceMismatch("ideal SBS needs two modes".into()));
    }
    let a1 = annihilation_sparse(space, 0).to_dense();
    let a2 = annihilation_sparse(space, 1).to_dense();
    let a1d = crate::linalg::dagger(&a1);
    let hop = crate::linalg::matmul(&a1d, &a2); // a₁† a₂
    let spin = embed_spin_op(space, &sigma_phi(phi_s));
    let mut base = crate::linalg::matmul(&spin, &hop);
    base.mapv_inplace(|z| -z);
    Ok(TimedHamiltonian::new(
        space.clone(),
        SparseOp::from_dense(&base, 1e-300),
        g,
        phi_m,
    ))
}

/// Ideal SDF generator, Eq.-(6) form:
/// H = (ηΩ/2) σ_{φ_S+π/2}(a e^{−iφ_M} + a† e^{iφ_M});
/// duration t displaces by α = −i (ηΩ t/2) e^{iφ_M} on the σ_x = +1 branch.
pub fn ideal_sdf(
    space: &HilbertSpec,
    mode: usize,
    eta_omega: f64,
    phi_s: f64,
    phi_m: PhaseFn,
) -> Result<TimedHamiltonian> {
    let ad = annihilation_sparse(space, mode).to_dense();
    let ad = crate::linalg::dagger(&ad);
    let spin = embed_spin_op(space, &sigma_phi(phi_s + std::f64::consts::FRAC_PI_2));
    let base = crate::linalg::matmul(&spin, &ad);
    Ok(TimedHamiltonian::new(
        space.clone(),
        SparseOp::from_dense(&base, 1e-300),
        eta_omega,
        phi_m,
    ))
}

/// Ideal off-resonant carrier, Appendix-D.1 form
/// H(t) = Ω cos(δt + φ_M) σ_{φ_S} ⊗ I, expressed as two conjugate pairs
/// (tones at ±δ) acting on the spin alone.
pub fn ideal_carrier_pair(
    space: &HilbertSpec,
    omega: f64,
    delta: f64,
    phases: DrivePhases,
) -> Vec<TimedHamiltonian> {
    let base = embed_spin_op(space, &sigma_plus());
    let sp = SparseOp::from_dense(&base, 1e-300);
    let phi_b = phases.phi_b;
    let phi_r = phases.phi_r;
    let t1 = TimedHamiltonian::new(
        space.clone(),
        sp.clone(),
        omega,
        Arc::new(move |t| delta * t + phi_b),
    );
    let t2 = TimedHamiltonian::new(
        space.clone(),
        sp,
        omega,
        Arc::new(move |t| -delta * t + phi_r),
    );
    vec![t1, t2]
}

/// SBS interaction strength g = η₁ η₂ Ω.
pub fn sbs_strength(space: &HilbertSpec, omega: f64) -> f64 {
    space.lamb_dicke[0] * space.lamb_dicke[1] * omega
}

/// SBS π time t_π = π / (η₁ η₂ Ω).
pub fn sbs_pi_time(space: &HilbertSpec, omega: f64) -> f64 {
    std::f64::consts::PI / sbs_strength(space, omega)
}

/// Round an interaction time to the nearest multiple of the carrier
/// beat period t_δ = 2π/δ.
pub fn round_to_carrier_period(t: f64, delta: f64) -> f64 {
    let t_delta = 2.0 * std::f64::consts::PI / delta;
    (t / t_delta + 0.5).floor() * t_delta
}

/// φ_M(t) for a spin-dependent force under 60-Hz mode-frequency noise:
/// φ_M(t) = (Δ/ω)(cos(ωt + φ_noise) − cos φ_noise) + φ_M0.
pub fn noisy_motional_phase(noise: NoiseDrive, phi_m0: f64) -> PhaseFn {
    Arc::new(move |t| phi_m0 - noise.integral(t))
}
