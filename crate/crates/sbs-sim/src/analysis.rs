//! Analytic reference formulas, the model-based density-matrix estimator
//! with bootstrap, CHSH maximization, Fock-population fitting, and the
//! staged error-budget decomposition.

use crate::evolve::{propagate_lindblad_tol, NoiseModel};
use crate::hamiltonian::{sbs_drive, DetuningModel, DrivePhases};
use crate::linalg::{c, dagger, eigh, kron, matmul, CMat, ONE, ZERO};
use crate::protocols::{apply_mode_op, prepare_ecs, Plane, ProtocolConfig, WignerGrid};
use crate::qstate::{
    displaced_parity_elements, displacement_unitary, thermal_populations,
    DensityMatrix, HilbertSpec, Parity, WignerEvaluator,
};
use crate::{Error, Result};
use num_complex::Complex64 as C64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const FOUR_OVER_PI2: f64 = 4.0 / (PI * PI);

// ---------------------------------------------------------------------------
// small numerics: Nelder-Mead, real solver, NNLS
// ---------------------------------------------------------------------------

/// Derivative-free Nelder–Mead simplex minimization.
pub fn nelder_mead(
    cost: &dyn Fn(&[f64]) -> f64,
    start: &[f64],
    steps: &[f64],
    max_iter: usize,
    ftol: f64,
) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += steps[i];
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| cost(p)).collect();
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];
        if (values[worst] - values[best]).abs()
            <= ftol * (values[best].abs() + 1e-30)
        {
            break;
        }
        let mut centroid = vec![0.0; n];
        for &idx in order.iter().take(n) {
            for (cm, &x) in centroid.iter_mut().zip(&simplex[idx]) {
                *cm += x / n as f64;
            }
        }
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&simplex[worst])
            .map(|(&cm, &w)| 2.0 * cm - w)
            .collect();
        let f_reflect = cost(&reflect);
        if f_reflect < values[best] {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&simplex[worst])
                .map(|(&cm, &w)| 3.0 * cm - 2.0 * w)
                .collect();
            let f_expand = cost(&expand);
            if f_expand < f_reflect {
                simplex[worst] = expand;
                values[worst] = f_expand;
            } else {
                simplex[worst] = reflect;
                values[worst] = f_reflect;
            }
        } else if f_reflect < values[second_worst] {
            simplex[worst] = reflect;
            values[worst] = f_reflect;
        } else {
            let contract: Vec<f64> = centroid
                .iter()
                .zip(&simplex[worst])
                .map(|(&cm, &w)| 0.5 * (cm + w))
                .collect();
            let f_contract = cost(&contract);
            if f_contract < values[worst] {
                simplex[worst] = contract;
                values[worst] = f_contract;
            } else {
                // shrink toward the best point
                let anchor = simplex[best].clone();
                for idx in 0..=n {
                    if idx == best {
                        continue;
                    }
                    for (x, &a) in simplex[idx].iter_mut().zip(&anchor) {
                        *x = 0.5 * (*x + a);
                    }
                    values[idx] = cost(&simplex[idx]);
                }
            }
        }
    }
    let mut best_idx = 0;
    for i in 1..=n {
        if values[i] < values[best_idx] {
            best_idx = i;
        }
    }
    (simplex[best_idx].clone(), values[best_idx])
}

/// Solve a small real symmetric positive system A x = b in place.
fn solve_real(a: &mut Vec<Vec<f64>>, b: &mut Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let mut piv = col;
        for row in (col + 1)..n {
            if a[row][col].abs() > a[piv][col].abs() {
                piv = row;
            }
        }
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::IllConditioned(f64::INFINITY));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        for row in (col + 1)..n {
            let f = a[row][col] / d;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in (col + 1)..n {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Ok(x)
}

/// Non-negative least squares by the Lawson–Hanson active-set method.
/// Errors when the basis is ill-conditioned.
pub fn fit_fock_populations(data: &[f64], basis: &[Vec<f64>]) -> Result<Vec<f64>> {
    let m = data.len();
    let n = basis.len();
    for b in basis {
        if b.len() != m {
            return Err(Error::ShapeMismatch("basis slice length".into()));
        }
    }
    // condition check on the Gram matrix
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            gram[i][j] = basis[i].iter().zip(&basis[j]).map(|(&a, &b)| a * b).sum();
        }
    }
    {
        let g = CMat::from_shape_fn((n, n), |(i, j)| c(gram[i][j]));
        let (vals, _) = eigh(&g);
        let max = vals[n - 1].max(1e-300);
        let min = vals[0].max(0.0);
        if min <= 0.0 || max / min > 1e12 {
            return Err(Error::IllConditioned(if min > 0.0 {
                max / min
            } else {
                f64::INFINITY
            }));
        }
    }
    let mut passive = vec![false; n];
    let mut x = vec![0.0; n];
    for _outer in 0..(10 * n + 10) {
        // gradient of ½‖Ax − y‖²: w = Aᵀ(y − Ax)
        let mut resid = data.to_vec();
        for (j, b) in basis.iter().enumerate() {
            for (r, &bk) in resid.iter_mut().zip(b) {
                *r -= x[j] * bk;
            }
        }
        let w: Vec<f64> = basis
            .iter()
            .map(|b| b.iter().zip(&resid).map(|(&bk, &r)| bk * r).sum())
            .collect();
        let mut best = None;
        for j in 0..n {
            if !passive[j] && w[j] > 1e-12 {
                if best.map(|(_, bw)| w[j] > bw).unwrap_or(true) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((enter, _)) = best else { break };
        passive[enter] = true;
        loop {
            // unconstrained LS on the passive set
            let act: Vec<usize> =
                (0..n).filter(|&j| passive[j]).collect();
            let k = act.len();
            let mut a = vec![vec![0.0; k]; k];
            let mut b = vec![0.0; k];
            for (ii, &ai) in act.iter().enumerate() {
                for (jj, &aj) in act.iter().enumerate() {
                    a[ii][jj] = gram[ai][aj];
                }
                b[ii] = basis[ai].iter().zip(data).map(|(&bk, &y)| bk * y).sum();
            }
            let z = solve_real(&mut a, &mut b)?;
            if z.iter().all(|&v| v > 0.0) {
                for (ii, &ai) in act.iter().enumerate() {
                    x[ai] = z[ii];
                }
                break;
            }
            // step toward z until the first passive variable hits zero
            let mut alpha = 1.0f64;
            for (ii, &ai) in act.iter().enumerate() {
                if z[ii] <= 0.0 {
                    let a_step = x[ai] / (x[ai] - z[ii]);
                    alpha = alpha.min(a_step);
                }
            }
            for (ii, &ai) in act.iter().enumerate() {
                x[ai] += alpha * (z[ii] - x[ai]);
                if x[ai] <= 1e-14 {
                    x[ai] = 0.0;
                    passive[ai] = false;
                }
            }
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// analytic reference formulas
// ---------------------------------------------------------------------------

/// Spin-up population under the ideal SBS drive for |n⟩ in one mode and
/// vacuum in the other: Σ_{k odd} C(n,k) cos^{2(n−k)}(gt/2) sin^{2k}(gt/2).
pub fn analytic_parity_population(n: usize, g: f64, t: f64) -> f64 {
    let cos2 = (0.5 * g * t).cos().powi(2);
    let sin2 = (0.5 * g * t).sin().powi(2);
    let mut total = 0.0;
    let mut binom = n as f64; // C(n,1)
    let mut k = 1usize;
    while k <= n {
        total += binom * cos2.powi((n - k) as i32) * sin2.powi(k as i32);
        // next odd k: C(n,k+2) = C(n,k)·(n−k)(n−k−1)/((k+1)(k+2))
        if k + 2 <= n {
            binom *= ((n - k) * (n - k - 1)) as f64 / (((k + 1) * (k + 2)) as f64);
        }
        k += 2;
    }
    total.clamp(0.0, 1.0)
}

/// ⟨γ|D(ξ)|δ⟩ for coherent states.
fn coherent_displacement_element(gamma: C64, delta: C64, xi: C64) -> C64 {
    let phase = 0.5 * (xi * delta.conj() - xi.conj() * delta);
    let shifted = delta + xi;
    (phase - 0.5 * gamma.norm_sqr() - 0.5 * shifted.norm_sqr()
        + gamma.conj() * shifted)
        .exp()
}

/// Closed-form two-mode Wigner function of an ideal ECS
/// (|α₁α₂⟩ ± |−α₁−α₂⟩)/𝒩±, from the four coherent–coherent cross terms.
pub fn ideal_ecs_wigner(
    alpha1: C64,
    alpha2: C64,
    parity: Parity,
    beta1: C64,
    beta2: C64,
) -> f64 {
    let s = parity.sign();
    let n2 = crate::qstate::ecs_norm(alpha1, alpha2, parity).powi(2);
    let term = |u: f64, v: f64| -> C64 {
        // ⟨uα₁, uα₂| D(2β) |vα₁, vα₂⟩
        coherent_displacement_element(u * alpha1, v * alpha1, 2.0 * beta1)
            * coherent_displacement_element(u * alpha2, v * alpha2, 2.0 * beta2)
    };
    // ⟨ψ|D(2β)𝒫|ψ⟩ with 𝒫|±α⃗⟩ = |∓α⃗⟩
    let val = term(1.0, -1.0)
        + c(s) * term(1.0, 1.0)
        + c(s) * term(-1.0, -1.0)
        + term(-1.0, 1.0);
    FOUR_OVER_PI2 * (val / c(n2)).re
}

// ---------------------------------------------------------------------------
// model-based density-matrix estimation (9-parameter forward model)
// ---------------------------------------------------------------------------

/// Parameters of the forward model: cat amplitudes, initial occupations,
/// heating rates, dephasing rates, and the |↓⟩-detection error c.
///
/// `c` is the probability that a true ↑ outcome is recorded as ↓ (the
/// dominant PMT leakage error), which biases measured Wigner values toward
/// +4/π².
#[derive(Clone, Copy, Debug)]
pub struct ModelParams {
    pub alpha: [f64; 2],
    pub nbar: [f64; 2],
    pub heat: [f64; 2],
    pub dephase: [f64; 2],
    pub detect_err_down: f64,
}

impl ModelParams {
    pub fn to_vec(self) -> Vec<f64> {
        vec![
            self.alpha[0],
            self.alpha[1],
            self.nbar[0],
            self.nbar[1],
            self.heat[0],
            self.heat[1],
            self.dephase[0],
            self.dephase[1],
            self.detect_err_down,
        ]
    }

    pub fn from_slice(x: &[f64]) -> Self {
        ModelParams {
            alpha: [x[0], x[1]],
            nbar: [x[2].max(0.0), x[3].max(0.0)],
            heat: [x[4].max(0.0), x[5].max(0.0)],
            dephase: [x[6].max(0.0), x[7].max(0.0)],
            detect_err_down: x[8].clamp(0.0, 0.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.nbar.iter().all(|&v| v >= 0.0)
            && self.heat.iter().all(|&v| v >= 0.0)
            && self.dephase.iter().all(|&v| v >= 0.0)
            && (0.0..=0.1).contains(&self.detect_err_down);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("model parameters out of range".into()))
        }
    }
}

/// Timing constants of the forward channel chain.
#[derive(Clone, Copy, Debug)]
pub struct ModelTimings {
    pub generation: f64,
    pub measurement: f64,
    pub t_eff: f64,
}

impl Default for ModelTimings {
    fn default() -> Self {
        ModelTimings {
            generation: 350.0e-6,
            measurement: 550.0e-6,
            t_eff: 75.0e-6,
        }
    }
}

fn motional_space(n_levels: usize) -> HilbertSpec {
    HilbertSpec {
        spin_dim: 1,
        mode_dims: vec![n_levels, n_levels],
        lamb_dicke: vec![0.1, 0.087],
    }
}

/// Heralded cat from a two-mode thermal state:
/// ρ ∝ (D(α⃗) ± D(−α⃗)) ρ_th (·)†.
fn thermal_cat(
    space: &HilbertSpec,
    alpha: [f64; 2],
    nbar: [f64; 2],
    parity: Parity,
) -> DensityMatrix {
    let d = space.mode_dims[0];
    let d1p = displacement_unitary(d, c(alpha[0]));
    let d2p = displacement_unitary(space.mode_dims[1], c(alpha[1]));
    let d1m = displacement_unitary(d, c(-alpha[0]));
    let d2m = displacement_unitary(space.mode_dims[1], c(-alpha[1]));
    let a_op = &kron(&d1p, &d2p) + &kron(&d1m, &d2m).mapv(|z| z * c(parity.sign()));
    let md = space.motional_dim();
    let mut th = CMat::zeros((md, md));
    let p1 = thermal_populations(space.mode_dims[0], nbar[0]);
    let p2 = thermal_populations(space.mode_dims[1], nbar[1]);
    for n1 in 0..space.mode_dims[0] {
        for n2 in 0..space.mode_dims[1] {
            let k = n1 * space.mode_dims[1] + n2;
            th[[k, k]] = c(p1[n1] * p2[n2]);
        }
    }
    let m = matmul(&matmul(&a_op, &th), &dagger(&a_op));
    let tr: f64 = (0..md).map(|i| m[[i, i]].re).sum();
    DensityMatrix::from_raw(space.clone(), m.mapv(|z| z / c(tr)))
}

/// Push model parameters through the channel chain: thermal cat →
/// heating over the generation window → rotational smearing
/// (σ_j = √(δ_j T_eff)) → heating over the measurement window.
pub fn model_state(
    params: &ModelParams,
    parity: Parity,
    timings: &ModelTimings,
    n_levels: usize,
) -> Result<DensityMatrix> {
    params.validate()?;
    let space = motional_space(n_levels);
    let rho0 = thermal_cat(&space, params.alpha, params.nbar, parity);
    let noise = NoiseModel {
        heat_rates: params.heat.to_vec(),
        ..NoiseModel::ideal(2)
    };
    let rho_g = propagate_lindblad_tol(
        &[],
        &rho0,
        &noise,
        0.0,
        timings.generation,
        &[],
        1e-7,
    )?
    .final_state;
    let sigmas: Vec<f64> = params
        .dephase
        .iter()
        .map(|&d| (d * timings.t_eff).sqrt())
        .collect();
    let smeared = crate::evolve::rotational_smearing(&rho_g, &sigmas, 20)?;
    let rho_m = propagate_lindblad_tol(
        &[],
        &smeared,
        &noise,
        0.0,
        timings.measurement,
        &[],
        1e-7,
    )?
    .final_state;
    Ok(rho_m)
}

/// Grid geometry plus cached displaced-parity observables for fast
/// repeated forward evaluations on fixed slices.
pub struct FitContext {
    pub planes: Vec<(Plane, Vec<f64>, Vec<f64>)>,
    pub parity: Parity,
    pub timings: ModelTimings,
    pub n_levels: usize,
    /// Per plane: flattened observables, one row of length md² per point
    /// (transposed to match row-major ρ).
    observables: Vec<Vec<C64>>,
    points_per_plane: Vec<usize>,
}

impl FitContext {
    pub fn new(
        planes: Vec<(Plane, Vec<f64>, Vec<f64>)>,
        parity: Parity,
        timings: ModelTimings,
        n_levels: usize,
    ) -> Self {
        let space = motional_space(n_levels);
        let md = space.motional_dim();
        let d1 = space.mode_dims[0];
        let d2 = space.mode_dims[1];
        let mut observables = Vec::new();
        let mut points_per_plane = Vec::new();
        for (plane, ax1, ax2) in &planes {
            let mut flat = Vec::with_capacity(ax1.len() * ax2.len() * md * md);
            for &x1 in ax1 {
                for &x2 in ax2 {
                    let (b1, b2) = plane.beta(x1, x2);
                    let o1 = displaced_parity_elements(d1, b1);
                    let o2 = displaced_parity_elements(d2, b2);
                    // O[(m1 m2),(n1 n2)] = o1[m1,n1] o2[m2,n2];
                    // store O^T flattened: entry (row-major over ρ index
                    // pairs (i,j)) = O[j,i]
                    for i in 0..md {
                        let (i1, i2) = (i / d2, i % d2);
                        for j in 0..md {
                            let (j1, j2) = (j / d2, j % d2);
                            flat.push(o1[[j1, i1]] * o2[[j2, i2]]);
                        }
                    }
                }
            }
            observables.push(flat);
            points_per_plane.push(ax1.len() * ax2.len());
        }
        FitContext { planes, parity, timings, n_levels, observables, points_per_plane }
    }

    pub fn n_points(&self) -> usize {
        self.points_per_plane.iter().sum()
    }

    /// Predicted Wigner values (per plane, concatenated) for the params.
    pub fn forward(&self, params: &ModelParams) -> Result<Vec<f64>> {
        let rho = model_state(params, self.parity, &self.timings, self.n_levels)?;
        let md = rho.space.motional_dim();
        let rho_flat = rho.matrix.as_slice().expect("contiguous");
        let mut out = Vec::with_capacity(self.n_points());
        let cdet = params.detect_err_down;
        for (flat, &npts) in self.observables.iter().zip(&self.points_per_plane) {
            for k in 0..npts {
                let block = &flat[k * md * md..(k + 1) * md * md];
                let mut acc = ZERO;
                for (r, o) in rho_flat.iter().zip(block) {
                    acc += r * o;
                }
                let w_true = FOUR_OVER_PI2 * acc.re;
                // detection error: a true ↑ read as ↓ biases toward +4/π²
                out.push((1.0 - cdet) * w_true + cdet * FOUR_OVER_PI2);
            }
        }
        Ok(out)
    }
}

/// Result of the 9-parameter weighted least-squares fit.
pub struct FitResult {
    pub params: ModelParams,
    pub covariance: Vec<Vec<f64>>,
    pub chi2_reduced: f64,
    /// Estimated density matrix at the fitted parameters (motional,
    /// n_max = 7 per mode by default).
    pub rho_est: DensityMatrix,
    /// Parameters that ended on a bound.
    pub flags: Vec<String>,
}

/// Flatten measured grids into (value, variance) with binomial-variance
/// weights floored at (1e−3)².
fn flatten_data(grids: &[&WignerGrid]) -> (Vec<f64>, Vec<f64>) {
    let mut values = Vec::new();
    let mut vars = Vec::new();
    for g in grids {
        for (idx, &w) in g.values.iter().enumerate() {
            values.push(w);
            let se = g.std_errors.as_slice().unwrap()[idx];
            vars.push((se * se).max(1e-6));
        }
    }
    (values, vars)
}

/// Fit the forward model to measured Wigner slices by weighted least
/// squares with a multi-start Nelder–Mead search.
pub fn fit_density_model(
    grids: &[&WignerGrid],
    init: ModelParams,
    parity: Parity,
    timings: ModelTimings,
) -> Result<FitResult> {
    let planes: Vec<(Plane, Vec<f64>, Vec<f64>)> = grids
        .iter()
        .map(|g| (g.plane, g.beta1_axis.clone(), g.beta2_axis.clone()))
        .collect();
    let ctx = FitContext::new(planes, parity, timings, 8);
    let (data, vars) = flatten_data(grids);
    if data.len() != ctx.n_points() {
        return Err(Error::ShapeMismatch("grid/context point count".into()));
    }
    let cost = |x: &[f64]| -> f64 {
        let p = ModelParams::from_slice(x);
        // penalty for out-of-range raw parameters keeps the simplex honest
        let mut pen = 0.0;
        for (i, &v) in x.iter().enumerate() {
            if i >= 2 && v < 0.0 {
                pen += 1e4 * v * v;
            }
        }
        if x[8] < 0.0 {
            pen += 1e4 * x[8] * x[8];
        }
        if x[8] > 0.1 {
            pen += 1e4 * (x[8] - 0.1) * (x[8] - 0.1);
        }
        match ctx.forward(&p) {
            Ok(pred) => {
                pred.iter()
                    .zip(&data)
                    .zip(&vars)
                    .map(|((&m, &y), &v)| (m - y) * (m - y) / v)
                    .sum::<f64>()
                    + pen
            }
            Err(_) => f64::INFINITY,
        }
    };
    let steps = [0.05, 0.05, 0.02, 0.02, 10.0, 10.0, 200.0, 200.0, 0.004];
    let start = init.to_vec();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for attempt in 0..5 {
        let mut s = start.clone();
        if attempt > 0 {
            for (v, &st) in s.iter_mut().zip(&steps) {
                *v += st * 2.0 * (rng.gen::<f64>() - 0.5) * 2.0;
            }
            s[2] = s[2].abs();
            s[3] = s[3].abs();
        }
        let (x, f) = nelder_mead(&cost, &s, &steps, 1600, 1e-10);
        // polish
        let small: Vec<f64> = steps.iter().map(|&v| v * 0.1).collect();
        let (x, f2) = nelder_mead(&cost, &x, &small, 800, 1e-12);
        let f = f.min(f2);
        if best.as_ref().map(|(_, bf)| f < *bf).unwrap_or(true) {
            best = Some((x, f));
        }
    }
    let (x, fval) = best.ok_or(Error::FitFailure("no converged start".into()))?;
    if !fval.is_finite() {
        return Err(Error::FitFailure(format!("cost {fval}")));
    }
    let params = ModelParams::from_slice(&x);
    let dof = (data.len() as f64 - 9.0).max(1.0);
    let chi2_reduced = fval / dof;
    // covariance from a finite-difference Gauss-Newton approximation
    let pred0 = ctx.forward(&params)?;
    let mut jac = vec![vec![0.0; 9]; data.len()];
    for p_idx in 0..9 {
        let h = (steps[p_idx] * 0.02).max(1e-7);
        let mut xp = x.clone();
        xp[p_idx] += h;
        let pp = ctx.forward(&ModelParams::from_slice(&xp))?;
        for (row, (&a, &b)) in jac.iter_mut().zip(pp.iter().zip(&pred0)) {
            row[p_idx] = (a - b) / h;
        }
    }
    let mut jtj = vec![vec![0.0; 9]; 9];
    for i in 0..9 {
        for j in 0..9 {
            jtj[i][j] = jac
                .iter()
                .zip(&vars)
                .map(|(row, &v)| row[i] * row[j] / v)
                .sum();
        }
    }
    let covariance = invert_spd(&jtj)?;
    let rho_est = model_state(&params, parity, &timings, 8)?;
    let mut flags = Vec::new();
    if params.detect_err_down <= 1e-9 || params.detect_err_down >= 0.1 - 1e-9 {
        flags.push("detect_err_down at bound".into());
    }
    for (k, &v) in params.nbar.iter().chain(&params.heat).enumerate() {
        if v <= 0.0 {
            flags.push(format!("parameter {k} at zero bound"));
        }
    }
    Ok(FitResult { params, covariance, chi2_reduced, rho_est, flags })
}

fn invert_spd(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for col in 0..n {
        let mut m: Vec<Vec<f64>> = a.to_vec();
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        let x = solve_real(&mut m, &mut e)?;
        for row in 0..n {
            out[row][col] = x[row];
        }
    }
    Ok(out)
}

/// Generate synthetic real-real and imaginary-imaginary Wigner grids from
/// the forward model with binomial shot noise, as measured data would
/// arrive (no detection correction applied; the model fits `c` itself).
pub fn synthesize_grids(
    params: &ModelParams,
    parity: Parity,
    axis: &[f64],
    shots: u32,
    seed: u64,
) -> Result<[WignerGrid; 2]> {
    let planes = [Plane::RealReal, Plane::ImagImag];
    let ctx = FitContext::new(
        planes
            .iter()
            .map(|&p| (p, axis.to_vec(), axis.to_vec()))
            .collect(),
        parity,
        ModelTimings::default(),
        8,
    );
    let pred = ctx.forward(params)?;
    let n = axis.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grids = Vec::new();
    for (pidx, &plane) in planes.iter().enumerate() {
        let mut values = ndarray::Array2::zeros((n, n));
        let mut stderr = ndarray::Array2::zeros((n, n));
        let mut counts = ndarray::Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let w_model = pred[pidx * n * n + i * n + j];
                let p = ((1.0 - w_model / FOUR_OVER_PI2) / 2.0).clamp(0.0, 1.0);
                let mut k = 0u32;
                for _ in 0..shots {
                    if rng.gen::<f64>() < p {
                        k += 1;
                    }
                }
                let p_hat = k as f64 / shots as f64;
                values[[i, j]] = FOUR_OVER_PI2 * (1.0 - 2.0 * p_hat);
                stderr[[i, j]] =
                    2.0 * FOUR_OVER_PI2 * (p_hat * (1.0 - p_hat) / shots as f64).sqrt();
                counts[[i, j]] = shots as u64;
            }
        }
        grids.push(WignerGrid {
            plane,
            beta1_axis: axis.to_vec(),
            beta2_axis: axis.to_vec(),
            values,
            shot_counts: counts,
            std_errors: stderr,
            pulse_durations: ndarray::Array2::zeros((n, n)),
        });
    }
    let mut it = grids.into_iter();
    Ok([it.next().unwrap(), it.next().unwrap()])
}

/// Lamb–Dicke breakdown study: drive the exact single-mode SDF toward
/// increasing target displacements at truncation 200 and report the
/// achieved mean phonon number and the fidelity to the matched coherent
/// state |√n̄⟩. Durations use the ideal relation t = 2α/(ηΩ), so the
/// shortfall is the breakdown itself.
pub fn lda_displacement_study(
    cfg: &ProtocolConfig,
    targets: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let space = HilbertSpec::new(vec![200], vec![0.1])?;
    let mut rows = Vec::new();
    for &alpha in targets {
        let t = 2.0 * alpha / (space.lamb_dicke[0] * cfg.omega);
        let phases = DrivePhases::from_spin_motion(-PI / 2.0, PI / 2.0);
        let terms = crate::hamiltonian::sdf_drive(
            &space,
            0,
            cfg.omega,
            phases,
            &DetuningModel::none(1),
        )?;
        // |+⟩|0⟩: the exact SDF conserves σ_x, so the + branch stays pure
        let d = space.total_dim();
        let md = space.motional_dim();
        let mut amp = crate::linalg::CVec::zeros(d);
        amp[0] = c(1.0 / 2.0f64.sqrt());
        amp[md] = c(1.0 / 2.0f64.sqrt());
        let psi0 = crate::qstate::StateVector::from_amplitudes(space.clone(), amp)?;
        let res = crate::evolve::propagate_unitary(&terms, &psi0, 0.0, t, &[])?;
        let nbar = res.final_state.mean_phonons(0);
        // motional state of the + branch (spin factors out exactly)
        let motional: Vec<C64> = (0..md)
            .map(|k| res.final_state.amplitudes[k] * c(2.0f64.sqrt()))
            .collect();
        let (coh, _) = crate::qstate::coherent_amplitudes(md, c(nbar.sqrt()));
        let overlap: C64 = coh
            .iter()
            .zip(&motional)
            .map(|(a, b)| a.conj() * b)
            .sum();
        rows.push(vec![alpha, nbar, overlap.norm_sqr()]);
    }
    Ok(rows)
}

/// Functionals tracked per bootstrap resample.
#[derive(Clone, Copy, Debug)]
pub struct BootstrapStats {
    pub fidelity_std: f64,
    pub purity_std: f64,
    pub largest_eig_std: f64,
    pub pt_min_eig_std: f64,
    pub failures: usize,
}

/// Resample the measured grids from their binomial distributions and refit,
/// starting each refit at the primary optimum.
pub fn bootstrap_fit(
    grids: &[&WignerGrid],
    fit: &FitResult,
    target: &DensityMatrix,
    parity: Parity,
    timings: ModelTimings,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapStats> {
    let planes: Vec<(Plane, Vec<f64>, Vec<f64>)> = grids
        .iter()
        .map(|g| (g.plane, g.beta1_axis.clone(), g.beta2_axis.clone()))
        .collect();
    let ctx = FitContext::new(planes, parity, timings, 8);
    let (data0, vars) = flatten_data(grids);
    let shots: Vec<u64> = grids
        .iter()
        .flat_map(|g| g.shot_counts.iter().cloned())
        .collect();
    let steps = [0.03, 0.03, 0.015, 0.015, 8.0, 8.0, 150.0, 150.0, 0.003];
    let x0 = fit.params.to_vec();
    let mut fids = Vec::new();
    let mut purs = Vec::new();
    let mut eigs = Vec::new();
    let mut pts = Vec::new();
    let mut failures = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _res in 0..n_resamples {
        // binomial resampling of each point (infinite-shot grids resample
        // to themselves)
        let data: Vec<f64> = data0
            .iter()
            .zip(&shots)
            .map(|(&w, &n)| {
                if n == 0 {
                    return w;
                }
                let p = ((1.0 - w / FOUR_OVER_PI2) / 2.0).clamp(0.0, 1.0);
                let mut k = 0u64;
                for _ in 0..n {
                    if rng.gen::<f64>() < p {
                        k += 1;
                    }
                }
                FOUR_OVER_PI2 * (1.0 - 2.0 * k as f64 / n as f64)
            })
            .collect();
        let cost = |x: &[f64]| -> f64 {
            let p = ModelParams::from_slice(x);
            match ctx.forward(&p) {
                Ok(pred) => pred
                    .iter()
                    .zip(&data)
                    .zip(&vars)
                    .map(|((&m, &y), &v)| (m - y) * (m - y) / v)
                    .sum(),
                Err(_) => f64::INFINITY,
            }
        };
        let (x, f) = nelder_mead(&cost, &x0, &steps, 700, 1e-10);
        if !f.is_finite() {
            failures += 1;
            continue;
        }
        let params = ModelParams::from_slice(&x);
        match model_state(&params, parity, &timings, 8) {
            Ok(rho) => {
                let fid = crate::qstate::fidelity(&rho, target)?;
                fids.push(fid);
                purs.push(crate::qstate::purity(&rho));
                let (vals, _) = eigh(&rho.matrix);
                eigs.push(vals[vals.len() - 1]);
                let pt = crate::qstate::partial_transpose(&rho, 0);
                pts.push(crate::qstate::min_eigenvalue(&pt));
            }
            Err(_) => failures += 1,
        }
    }
    if failures * 5 > n_resamples {
        return Err(Error::FitFailure(format!(
            "{failures}/{n_resamples} bootstrap refits failed"
        )));
    }
    let std = |v: &[f64]| -> f64 {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        (v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0))
            .sqrt()
    };
    Ok(BootstrapStats {
        fidelity_std: std(&fids),
        purity_std: std(&purs),
        largest_eig_std: std(&eigs),
        pt_min_eig_std: std(&pts),
        failures,
    })
}

/// Largest eigenvalue of a motional density matrix together with the
/// Fock-basis populations of its eigenvector, indexed i = n₁(n_max+1)+n₂.
/// Ties break deterministically toward the lower index.
pub fn dominant_eigenstate(rho: &DensityMatrix) -> (f64, Vec<f64>) {
    let (vals, vecs) = eigh(&rho.matrix);
    let n = vals.len();
    // eigh sorts ascending; the dominant one is last, ties resolved by
    // taking the first of the equal block
    let mut k = n - 1;
    while k > 0 && (vals[k - 1] - vals[k]).abs() < 1e-14 {
        k -= 1;
    }
    let pops: Vec<f64> = (0..n).map(|i| vecs[[i, k]].norm_sqr()).collect();
    (vals[n - 1], pops)
}

// ---------------------------------------------------------------------------
// CHSH
// ---------------------------------------------------------------------------

/// Four displacement settings and the resulting CHSH parameter.
#[derive(Clone, Copy, Debug)]
pub struct ChshResult {
    /// (β₁⁽¹⁾, β₁⁽²⁾, β₂⁽¹⁾, β₂⁽²⁾)
    pub betas: [C64; 4],
    pub s: f64,
}

/// Source of displaced-parity expectation values for the CHSH search.
pub enum WignerSource<'a> {
    /// Analytic or pipeline function W(β₁, β₂).
    Function(&'a dyn Fn(C64, C64) -> f64),
    /// Values sampled on a plane grid; the search is restricted to the
    /// sampled points (no refinement).
    Grid { plane: Plane, axis: &'a [f64], values: &'a ndarray::Array2<f64> },
}

/// Maximize S = ⟨𝒫(β₁⁽¹⁾,β₂⁽¹⁾)⟩ − ⟨𝒫(β₁⁽¹⁾,β₂⁽²⁾)⟩ + ⟨𝒫(β₁⁽²⁾,β₂⁽¹⁾)⟩
/// + ⟨𝒫(β₁⁽²⁾,β₂⁽²⁾)⟩ with ⟨𝒫⟩ = (π²/4)W over settings on one plane,
/// by coarse grid search (step `grid_step` over |x| ≤ `extent`) and, for
/// function sources, local simplex refinement.
///
/// `symmetric` restricts to β₁⁽¹⁾ = β₂⁽²⁾ and β₁⁽²⁾ = β₂⁽¹⁾.
pub fn chsh_maximize(
    source: &WignerSource,
    plane: Plane,
    extent: f64,
    grid_step: f64,
    symmetric: bool,
) -> Result<ChshResult> {
    let eval_p = |x1: f64, x2: f64| -> f64 {
        match source {
            WignerSource::Function(f) => {
                let (b1, b2) = plane.beta(x1, x2);
                PI * PI / 4.0 * f(b1, b2)
            }
            WignerSource::Grid { plane: gp, axis, values } => {
                assert!(*gp == plane, "grid plane mismatch");
                let find = |x: f64| -> usize {
                    let mut best = 0;
                    let mut bd = f64::INFINITY;
                    for (k, &a) in axis.iter().enumerate() {
                        let d = (a - x).abs();
                        if d < bd {
                            bd = d;
                            best = k;
                        }
                    }
                    best
                };
                PI * PI / 4.0 * values[[find(x1), find(x2)]]
            }
        }
    };
    let s_of = |u: f64, v: f64, p: f64, q: f64| -> f64 {
        // β₁⁽¹⁾=u, β₁⁽²⁾=v, β₂⁽¹⁾=p, β₂⁽²⁾=q
        eval_p(u, p) - eval_p(u, q) + eval_p(v, p) + eval_p(v, q)
    };
    let n = (2.0 * extent / grid_step).round() as usize + 1;
    let axis: Vec<f64> = (0..n).map(|k| -extent + grid_step * k as f64).collect();
    let mut best = (f64::NEG_INFINITY, [0.0f64; 4]);
    if symmetric {
        for &u in &axis {
            for &v in &axis {
                let s = s_of(u, v, v, u);
                if s > best.0 {
                    best = (s, [u, v, v, u]);
                }
            }
        }
    } else {
        // cache the P values on the grid to keep the quartic loop cheap
        let mut pv = ndarray::Array2::zeros((n, n));
        for (i, &x1) in axis.iter().enumerate() {
            for (j, &x2) in axis.iter().enumerate() {
                pv[[i, j]] = eval_p(x1, x2);
            }
        }
        for i1 in 0..n {
            for i2 in 0..n {
                for j1 in 0..n {
                    for j2 in 0..n {
                        let s = pv[[i1, j1]] - pv[[i1, j2]]
                            + pv[[i2, j1]]
                            + pv[[i2, j2]];
                        if s > best.0 {
                            best =
                                (s, [axis[i1], axis[i2], axis[j1], axis[j2]]);
                        }
                    }
                }
            }
        }
    }
    let (mut s_best, mut x_best) = best;
    if let WignerSource::Function(_) = source {
        // local refinement on the continuous source
        let cost = |x: &[f64]| -> f64 {
            if symmetric {
                -s_of(x[0], x[1], x[1], x[0])
            } else {
                -s_of(x[0], x[1], x[2], x[3])
            }
        };
        let start = if symmetric {
            vec![x_best[0], x_best[1]]
        } else {
            x_best.to_vec()
        };
        let steps = vec![0.5 * grid_step; start.len()];
        let (x, f) = nelder_mead(&cost, &start, &steps, 400, 1e-12);
        if -f > s_best {
            s_best = -f;
            x_best = if symmetric {
                [x[0], x[1], x[1], x[0]]
            } else {
                [x[0], x[1], x[2], x[3]]
            };
        }
    }
    let to_beta = |x: f64| -> C64 { plane.beta(x, 0.0).0 };
    Ok(ChshResult {
        betas: [
            to_beta(x_best[0]),
            to_beta(x_best[1]),
            to_beta(x_best[2]),
            to_beta(x_best[3]),
        ],
        s: s_best,
    })
}

// ---------------------------------------------------------------------------
// staged error budget (GDM pipeline)
// ---------------------------------------------------------------------------

/// Full noisy Wigner-measurement pipeline for an even ECS, staged as
/// generation (Hamiltonian-level, per noise phase), displacement
/// (channel-level: direction rotation plus heating for the pulse
/// durations) and measurement (Heisenberg-evolved exact-SBS observable
/// with heating).
pub struct GdmPipeline {
    pub space: HilbertSpec,
    pub cfg: ProtocolConfig,
    pub noise: NoiseModel,
    pub alpha: f64,
    phases: Vec<f64>,
    /// Motional density matrix after generation, one per noise phase.
    rho_g: Vec<DensityMatrix>,
    /// Generation SDF pulse centers (absolute clock).
    g_centers: [f64; 2],
    /// ↓↓ block of the Heisenberg-evolved ↑-projector and its heating
    /// derivative (for the displacement-window linearization).
    measure_obs: Option<(CMat, CMat)>,
}

impl GdmPipeline {
    pub fn new(
        space: &HilbertSpec,
        noise: &NoiseModel,
        cfg: &ProtocolConfig,
        alpha: f64,
    ) -> Result<Self> {
        noise.validate()?;
        let phases: Vec<f64> = if noise.noise_60hz.is_some() {
            (0..8).map(|k| 2.0 * PI * k as f64 / 8.0).collect()
        } else {
            vec![0.0]
        };
        let mut rho_g = Vec::new();
        let t1 = cfg.sdf_duration(space, 0, alpha);
        let t2 = cfg.sdf_duration(space, 1, alpha);
        for &phi in &phases {
            let mut n = noise.clone();
            if let Some(drive) = n.noise_60hz {
                n.noise_60hz = Some(drive.with_phase(phi));
            }
            let out = prepare_ecs(
                space,
                c(alpha),
                c(alpha),
                Parity::Even,
                &n,
                cfg,
            )?;
            // spin is pure |↓⟩ after the herald; keep the motional block
            let md = space.motional_dim();
            let block = out.state.matrix.slice(ndarray::s![0..md, 0..md]).to_owned();
            rho_g.push(DensityMatrix::from_raw(
                motional_space_like(space),
                block,
            ));
        }
        Ok(GdmPipeline {
            space: space.clone(),
            cfg: cfg.clone(),
            noise: noise.clone(),
            alpha,
            phases,
            rho_g,
            g_centers: [0.5 * t1, t1 + 0.5 * t2],
            measure_obs: None,
        })
    }

    fn mot_space(&self) -> HilbertSpec {
        motional_space_like(&self.space)
    }

    /// Displacement-pulse durations for a point.
    fn d_durations(&self, b1: C64, b2: C64) -> (f64, f64) {
        (
            self.cfg.sdf_duration(&self.space, 0, b1.norm()),
            self.cfg.sdf_duration(&self.space, 1, b2.norm()),
        )
    }

    /// Per-mode displacement-direction drift between the generation and
    /// displacement pulses for one noise phase.
    fn rotation_drift(&self, phase_idx: usize, t1: f64, t2: f64) -> [f64; 2] {
        let Some(drive) = self.noise.noise_60hz else {
            return [0.0; 2];
        };
        let drive = drive.with_phase(self.phases[phase_idx]);
        let t0 = self.cfg.generation_window;
        let centers_d = [t0 + 0.5 * t1, t0 + t1 + 0.5 * t2];
        let mut out = [0.0; 2];
        for j in 0..2 {
            // φ_M(t) = φ_M0 − ∫δ, so the drift is −(I(t_D) − I(t_G))
            out[j] = -(drive.integral(centers_d[j]) - drive.integral(self.g_centers[j]));
        }
        out
    }

    /// Stage-G Wigner values (direct displaced parity of ρ_G), averaged
    /// over noise phases.
    pub fn wigner_g(&self, points: &[(C64, C64)]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; points.len()];
        for rho in &self.rho_g {
            let eval = WignerEvaluator::new(rho);
            for (a, &(b1, b2)) in acc.iter_mut().zip(points) {
                *a += eval.value(&[b1, b2])?;
            }
        }
        Ok(acc.iter().map(|&v| v / self.rho_g.len() as f64).collect())
    }

    /// Stage-GD Wigner values: channel-level displacement with direction
    /// drift (when enabled) and heating for the pulse window (when
    /// enabled), parity evaluated directly.
    pub fn wigner_gd(
        &self,
        points: &[(C64, C64)],
        with_heating: bool,
        with_rotation: bool,
    ) -> Result<Vec<f64>> {
        let space = self.mot_space();
        let dims = [space.mode_dims[0], space.mode_dims[1]];
        let rates = [self.noise.heat_rates[0], self.noise.heat_rates[1]];
        let mut acc = vec![0.0; points.len()];
        for (pidx, rho) in self.rho_g.iter().enumerate() {
            let eval = WignerEvaluator::new(rho);
            for (a, &(b1, b2)) in acc.iter_mut().zip(points) {
                let (t1, t2) = self.d_durations(b1, b2);
                let drift = if with_rotation {
                    self.rotation_drift(pidx, t1, t2)
                } else {
                    [0.0; 2]
                };
                let bs = [
                    b1 * C64::from_polar(1.0, drift[0]),
                    b2 * C64::from_polar(1.0, drift[1]),
                ];
                let mut val = ONE;
                let mut factors = Vec::with_capacity(2);
                for j in 0..2 {
                    let mut f = displaced_parity_elements(dims[j], bs[j]);
                    if with_heating && rates[j] > 0.0 {
                        f = blur_mode_observable(&f, rates[j], t1 + t2);
                    }
                    factors.push(f);
                }
                val *= eval_factored(&eval, &factors);
                *a += FOUR_OVER_PI2 * val.re;
            }
        }
        Ok(acc.iter().map(|&v| v / self.rho_g.len() as f64).collect())
    }

    /// Build the Heisenberg-evolved measurement observable: the ↓↓ block
    /// of Λ†(|↑⟩⟨↑| ⊗ I) under the exact SBS π-pulse with heating, plus
    /// its heating-generator derivative for the displacement-window
    /// correction.
    fn ensure_measurement_obs(&mut self) -> Result<()> {
        if self.measure_obs.is_some() {
            return Ok(());
        }
        let space = &self.space;
        let t_pi = self.cfg.sbs_duration(space, PI);
        let phases = DrivePhases::from_spin_motion(0.0, 0.0);
        let mut terms =
            sbs_drive(space, self.cfg.omega, phases, &DetuningModel::none(2))?;
        if self.cfg.include_carrier {
            terms.extend(crate::hamiltonian::bichromatic_carrier(
                space,
                self.cfg.omega,
                self.cfg.mode_splitting,
                phases,
            )?);
        }
        let d = space.total_dim();
        let md = space.motional_dim();
        let mut up_proj = CMat::zeros((d, d));
        for k in md..d {
            up_proj[[k, k]] = ONE;
        }
        // drive phases are constant in the measurement stage (no 60-Hz
        // term per the common-mode argument), so the adjoint evolution
        // needs no phase reversal
        let o_m = crate::evolve::evolve_observable_adjoint_tol(
            &terms,
            &up_proj,
            space,
            &self.noise,
            t_pi,
            1e-6,
        )?;
        let block = o_m.slice(ndarray::s![0..md, 0..md]).to_owned();
        // heating-generator adjoint applied once (for the short
        // displacement-window linearization)
        let mot = self.mot_space();
        let collapse_noise = NoiseModel {
            heat_rates: self.noise.heat_rates.clone(),
            ..NoiseModel::ideal(2)
        };
        let lb = adjoint_generator_once(&mot, &collapse_noise, &block);
        self.measure_obs = Some((block, lb));
        Ok(())
    }

    /// Stage-GDM Wigner values: displacement channel followed by the
    /// Heisenberg-evolved exact-SBS readout.
    pub fn wigner_gdm(&mut self, points: &[(C64, C64)]) -> Result<Vec<f64>> {
        self.ensure_measurement_obs()?;
        let (b_obs, lb_obs) = self.measure_obs.as_ref().unwrap();
        let space = self.mot_space();
        let dims = [space.mode_dims[0], space.mode_dims[1]];
        let heating_on = self.noise.has_heating();
        let mut acc = vec![0.0; points.len()];
        for (pidx, rho) in self.rho_g.iter().enumerate() {
            for (a, &(b1, b2)) in acc.iter_mut().zip(points) {
                let (t1, t2) = self.d_durations(b1, b2);
                let drift = self.rotation_drift(pidx, t1, t2);
                let bs = [
                    b1 * C64::from_polar(1.0, drift[0]),
                    b2 * C64::from_polar(1.0, drift[1]),
                ];
                let mut m = rho.matrix.clone();
                for j in 0..2 {
                    if bs[j] != ZERO {
                        let u = displacement_unitary(dims[j], -bs[j]);
                        m = apply_mode_op(&space, j, &u, &m);
                    }
                }
                let mut p_up = trace_product(&m, b_obs);
                if heating_on {
                    p_up += (t1 + t2) * trace_product(&m, lb_obs);
                }
                *a += FOUR_OVER_PI2 * (1.0 - 2.0 * p_up);
            }
        }
        Ok(acc.iter().map(|&v| v / self.rho_g.len() as f64).collect())
    }
}

fn motional_space_like(space: &HilbertSpec) -> HilbertSpec {
    HilbertSpec {
        spin_dim: 1,
        mode_dims: space.mode_dims.clone(),
        lamb_dicke: space.lamb_dicke.clone(),
    }
}

fn eval_factored(eval: &WignerEvaluator, factors: &[CMat]) -> C64 {
    eval.factored_trace(factors)
}

/// Tr[ρ O].re for dense row-major matrices.
fn trace_product(rho: &CMat, o: &CMat) -> f64 {
    let n = rho.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let r = rho[[i, j]];
            if r != ZERO {
                acc += (r * o[[j, i]]).re;
            }
        }
    }
    acc
}

/// Single-mode heating-channel adjoint applied to a mode observable for a
/// short window (one RK4 step; exact to O((γt)⁵)).
fn blur_mode_observable(o: &CMat, rate: f64, t: f64) -> CMat {
    let d = o.nrows();
    let a = crate::qstate::mode_annihilation(d);
    let ad = dagger(&a);
    let gen = |x: &CMat| -> CMat {
        // r(a†Xa − ½{n,X}) + r(aXa† − ½{aa†_trunc,X})
        let mut out = matmul(&matmul(&ad, x), &a);
        out += &matmul(&matmul(&a, x), &ad);
        let n_diag: Vec<f64> = (0..d).map(|k| k as f64).collect();
        let m_diag: Vec<f64> = (0..d)
            .map(|k| if k + 1 < d { (k + 1) as f64 } else { 0.0 })
            .collect();
        for i in 0..d {
            for j in 0..d {
                out[[i, j]] -=
                    c(0.5 * (n_diag[i] + n_diag[j] + m_diag[i] + m_diag[j]))
                        * x[[i, j]];
            }
        }
        out.mapv(|z| z * c(rate))
    };
    // one classical RK4 step
    let k1 = gen(o);
    let k2 = gen(&(o + &k1.mapv(|z| z * c(0.5 * t))));
    let k3 = gen(&(o + &k2.mapv(|z| z * c(0.5 * t))));
    let k4 = gen(&(o + &k3.mapv(|z| z * c(t))));
    o + &(k1 + k2.mapv(|z| z * c(2.0)) + k3.mapv(|z| z * c(2.0)) + k4)
        .mapv(|z| z * c(t / 6.0))
}

/// One application of the adjoint heating generator on a two-mode
/// observable (not exponentiated).
fn adjoint_generator_once(
    space: &HilbertSpec,
    noise: &NoiseModel,
    o: &CMat,
) -> CMat {
    let d = space.total_dim();
    let mut out = CMat::zeros((d, d));
    for (mode, &rate) in noise.heat_rates.iter().enumerate() {
        if rate <= 0.0 {
            continue;
        }
        let a = crate::qstate::annihilation_sparse(space, mode);
        let ad = a.dagger();
        let a_diag = a.column_norms_sqr();
        let ad_diag = ad.column_norms_sqr();
        // r(a†Oa − ½{a†a, O})
        let mut t1 = CMat::zeros((d, d));
        ad.left_mul_acc(ONE, o, &mut t1);
        a.right_mul_acc(c(rate), &t1, &mut out);
        // r(aOa† − ½{aa†, O})
        let mut t2 = CMat::zeros((d, d));
        a.left_mul_acc(ONE, o, &mut t2);
        ad.right_mul_acc(c(rate), &t2, &mut out);
        for i in 0..d {
            for j in 0..d {
                out[[i, j]] -= c(0.5
                    * rate
                    * (a_diag[i] + a_diag[j] + ad_diag[i] + ad_diag[j]))
                    * o[[i, j]];
            }
        }
    }
    out
}

/// Per-stage, per-source contrast losses of the even-ECS Wigner pattern
/// in the imaginary-imaginary plane. The contrast of a noisy pattern is
/// its least-squares amplitude against the ideal pattern over the grid;
/// each loss is the decrement from adding that stage or source, so the
/// per-source entries sum to the stage totals and the stage totals sum
/// to the overall loss.
#[derive(Clone, Copy, Debug)]
pub struct ErrorBudget {
    pub contrast_g: f64,
    pub contrast_gd: f64,
    pub contrast_gdm: f64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_m: f64,
    pub loss_total: f64,
    pub g_temperature: f64,
    pub g_heating: f64,
    pub g_dephasing: f64,
    pub d_heating: f64,
    pub d_dephasing: f64,
    pub m_heating: f64,
}

/// Least-squares amplitude of `noisy` against `ideal` over a grid.
pub fn contrast_against(noisy: &[f64], ideal: &[f64]) -> f64 {
    let num: f64 = noisy.iter().zip(ideal).map(|(&a, &b)| a * b).sum();
    let den: f64 = ideal.iter().map(|&b| b * b).sum();
    num / den
}

/// Run the staged error budget for the even ECS with amplitude `alpha`
/// on the imaginary-imaginary plane sampled at `axis` × `axis`.
pub fn error_budget(
    space: &HilbertSpec,
    noise: &NoiseModel,
    cfg: &ProtocolConfig,
    alpha: f64,
    axis: &[f64],
) -> Result<ErrorBudget> {
    let mut cfg = cfg.clone();
    cfg.lindblad_rtol = cfg.lindblad_rtol.max(3e-7);
    let mut pipe_full = GdmPipeline::new(space, noise, &cfg, alpha)?;
    error_budget_with(&mut pipe_full, axis)
}

/// [`error_budget`] on a prebuilt full-noise [`GdmPipeline`] (lets callers
/// reuse the expensive generation and measurement stages for other
/// analyses on the same state).
pub fn error_budget_with(
    pipe_full: &mut GdmPipeline,
    axis: &[f64],
) -> Result<ErrorBudget> {
    let (space, cfg, noise, alpha) = (
        pipe_full.space.clone(),
        pipe_full.cfg.clone(),
        pipe_full.noise.clone(),
        pipe_full.alpha,
    );
    let points: Vec<(C64, C64)> = axis
        .iter()
        .flat_map(|&x1| {
            axis.iter()
                .map(move |&x2| (C64::new(0.0, x1), C64::new(0.0, x2)))
        })
        .collect();
    let ideal: Vec<f64> = points
        .iter()
        .map(|&(b1, b2)| ideal_ecs_wigner(c(alpha), c(alpha), Parity::Even, b1, b2))
        .collect();
    let contrast = |vals: &[f64]| contrast_against(vals, &ideal);

    let temperature_only = NoiseModel {
        nbar_init: noise.nbar_init.clone(),
        ..NoiseModel::ideal(2)
    };
    let temp_heat = NoiseModel {
        nbar_init: noise.nbar_init.clone(),
        heat_rates: noise.heat_rates.clone(),
        ..NoiseModel::ideal(2)
    };

    let pipe_t = GdmPipeline::new(&space, &temperature_only, &cfg, alpha)?;
    let c_g_t = contrast(&pipe_t.wigner_g(&points)?);
    let pipe_th = GdmPipeline::new(&space, &temp_heat, &cfg, alpha)?;
    let c_g_th = contrast(&pipe_th.wigner_g(&points)?);
    let c_g = contrast(&pipe_full.wigner_g(&points)?);

    let c_gd_heat = contrast(&pipe_full.wigner_gd(&points, true, false)?);
    let c_gd = contrast(&pipe_full.wigner_gd(&points, true, true)?);

    let c_gdm = contrast(&pipe_full.wigner_gdm(&points)?);

    Ok(ErrorBudget {
        contrast_g: c_g,
        contrast_gd: c_gd,
        contrast_gdm: c_gdm,
        loss_g: 1.0 - c_g,
        loss_d: c_g - c_gd,
        loss_m: c_gd - c_gdm,
        loss_total: 1.0 - c_gdm,
        g_temperature: 1.0 - c_g_t,
        g_heating: c_g_t - c_g_th,
        g_dephasing: c_g_th - c_g,
        d_heating: c_g - c_gd_heat,
        d_dephasing: c_gd_heat - c_gd,
        m_heating: c_gd - c_gdm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{const_phase, ideal_sbs, sbs_strength};
    use crate::qstate::{ecs_state, fock_state, wigner_point, Spin};

    #[test]
    fn parity_population_values() {
        assert!((analytic_parity_population(1, 1.0, PI) - 1.0).abs() < 1e-12);
        assert!(analytic_parity_population(2, 1.0, PI).abs() < 1e-12);
        let p3 = analytic_parity_population(3, 1.0, PI / 2.0);
        assert!((p3 - 0.5).abs() < 1e-12, "{p3}");
    }

    #[test]
    fn parity_population_matches_unitary_evolution() {
        let sp = HilbertSpec::two_modes(10, 0.1, 0.087).unwrap();
        let omega = 2.0 * PI * 1.0e5;
        let g = sbs_strength(&sp, omega);
        let t_pi = PI / g;
        for n in 1..=4usize {
            let h = ideal_sbs(&sp, g, 0.0, const_phase(0.0)).unwrap();
            let psi = fock_state(&sp, Spin::Down, &[n, 0]).unwrap();
            let samples: Vec<f64> =
                (0..=50).map(|k| 2.0 * t_pi * k as f64 / 50.0).collect();
            let res = crate::evolve::propagate_unitary(
                &[h], &psi, 0.0, 2.0 * t_pi, &samples,
            )
            .unwrap();
            for (k, &t) in res.sampled_times.iter().enumerate() {
                let want = analytic_parity_population(n, g, t);
                let got = res.expectations["p_up"][k];
                assert!((want - got).abs() < 1e-6, "n={n} t={t}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn ideal_ecs_wigner_matches_operator_route() {
        let sp = HilbertSpec::two_modes(24, 0.1, 0.087).unwrap();
        for parity in [Parity::Even, Parity::Odd] {
            let rho = ecs_state(&sp, c(1.2), c(1.2), parity).unwrap().to_density();
            let w0 = ideal_ecs_wigner(c(1.2), c(1.2), parity, ZERO, ZERO);
            assert!(
                (w0 - parity.sign() * FOUR_OVER_PI2).abs() < 1e-12,
                "origin {w0}"
            );
            for (b1, b2) in [
                (c(1.2), c(1.2)),
                (C64::new(0.0, 0.4), C64::new(0.0, -0.7)),
                (C64::new(0.5, 0.2), C64::new(-0.3, 0.6)),
            ] {
                let closed = ideal_ecs_wigner(c(1.2), c(1.2), parity, b1, b2);
                let direct = wigner_point(&rho, &[b1, b2]).unwrap();
                assert!(
                    (closed - direct).abs() < 1e-6,
                    "{b1} {b2}: {closed} vs {direct}"
                );
            }
        }
    }

    #[test]
    fn forward_model_reduces_to_ideal_without_noise() {
        // channel chain with all rates zero is the identity; compare at a
        // truncation deep enough for the closed form
        let params = ModelParams {
            alpha: [1.2, 1.2],
            nbar: [0.0, 0.0],
            heat: [0.0, 0.0],
            dephase: [0.0, 0.0],
            detect_err_down: 0.0,
        };
        let rho = model_state(&params, Parity::Even, &ModelTimings::default(), 20)
            .unwrap();
        let eval = WignerEvaluator::new(&rho);
        let axis: Vec<f64> = (0..7).map(|k| -1.8 + 0.6 * k as f64).collect();
        for &x1 in &axis {
            for &x2 in &axis {
                let beta = [C64::new(0.0, x1), C64::new(0.0, x2)];
                let got = eval.value(&beta).unwrap();
                let w = ideal_ecs_wigner(c(1.2), c(1.2), Parity::Even, beta[0], beta[1]);
                assert!((got - w).abs() < 1e-6, "({x1},{x2}): {got} vs {w}");
            }
        }
    }

    #[test]
    fn detection_error_shifts_toward_plus() {
        let params = ModelParams {
            alpha: [1.2, 1.2],
            nbar: [0.0, 0.0],
            heat: [0.0, 0.0],
            dephase: [0.0, 0.0],
            detect_err_down: 0.02,
        };
        let axis = vec![0.6];
        let ctx = FitContext::new(
            vec![(Plane::ImagImag, axis.clone(), axis)],
            Parity::Even,
            ModelTimings::default(),
            8,
        );
        let base = {
            let mut p = params;
            p.detect_err_down = 0.0;
            ctx.forward(&p).unwrap()[0]
        };
        let shifted = ctx.forward(&params).unwrap()[0];
        let expect = (1.0 - 0.02) * base + 0.02 * FOUR_OVER_PI2;
        assert!((shifted - expect).abs() < 1e-12);
        assert!(shifted > base);
    }

    #[test]
    fn nnls_recovers_mixture() {
        let b1 = vec![1.0, 0.5, 0.2, 0.0];
        let b2 = vec![0.0, 0.4, 0.9, 1.0];
        let data: Vec<f64> = b1
            .iter()
            .zip(&b2)
            .map(|(&a, &b)| 0.7 * a + 0.25 * b)
            .collect();
        let out = fit_fock_populations(&data, &[b1, b2]).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-10);
        assert!((out[1] - 0.25).abs() < 1e-10);
        // negative-leaning data clamps to zero
        let bb1 = vec![1.0, 0.0];
        let bb2 = vec![0.0, 1.0];
        let out = fit_fock_populations(&[-0.3, 0.5], &[bb1, bb2]).unwrap();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nnls_rejects_degenerate_basis() {
        let b1 = vec![1.0, 1.0, 1.0];
        let b2 = vec![1.0, 1.0, 1.0];
        assert!(matches!(
            fit_fock_populations(&[1.0, 1.0, 1.0], &[b1, b2]),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn dominant_eigenstate_cases() {
        let sp = motional_space(8);
        let pure = {
            let mut m = CMat::zeros((64, 64));
            m[[9, 9]] = ONE; // |1,1⟩ at i = 1·8+1
            DensityMatrix::from_raw(sp.clone(), m)
        };
        let (lam, pops) = dominant_eigenstate(&pure);
        assert!((lam - 1.0).abs() < 1e-12);
        assert!((pops[9] - 1.0).abs() < 1e-12);
        // α = 0 cat on a zero-temperature state is the pure vacuum
        let th = thermal_cat(&sp, [0.0, 0.0], [0.0, 0.0], Parity::Even);
        let (lam, pops) = dominant_eigenstate(&th);
        assert!((lam - 1.0).abs() < 1e-9);
        assert!((pops[0] - 1.0).abs() < 1e-9);
        let mut m = CMat::zeros((64, 64));
        let p1 = thermal_populations(8, 0.03);
        for n1 in 0..8 {
            for n2 in 0..8 {
                m[[n1 * 8 + n2, n1 * 8 + n2]] = c(p1[n1] * p1[n2]);
            }
        }
        let th = DensityMatrix::from_raw(sp, m);
        let (lam, _) = dominant_eigenstate(&th);
        assert!((lam - (1.0f64 / 1.03).powi(2)).abs() < 1e-4);
    }

    #[test]
    fn chsh_ideal_ecs_violates() {
        let f = |b1: C64, b2: C64| {
            ideal_ecs_wigner(c(1.2), c(1.2), Parity::Even, b1, b2)
        };
        let res = chsh_maximize(
            &WignerSource::Function(&f),
            Plane::ImagImag,
            2.0,
            0.1,
            true,
        )
        .unwrap();
        assert!(res.s > 2.0, "S = {}", res.s);
        assert!(res.s <= 4.0 + 1e-9);
        // the symmetric optimum matches the unconstrained one here
        let free = chsh_maximize(
            &WignerSource::Function(&f),
            Plane::ImagImag,
            2.0,
            0.2,
            false,
        )
        .unwrap();
        assert!((free.s - res.s).abs() < 5e-3, "{} vs {}", free.s, res.s);
    }

    #[test]
    fn chsh_vacuum_bounded_by_two() {
        let f = |b1: C64, b2: C64| {
            FOUR_OVER_PI2
                * (-2.0 * (b1.norm_sqr() + b2.norm_sqr())).exp()
        };
        let res = chsh_maximize(
            &WignerSource::Function(&f),
            Plane::ImagImag,
            2.0,
            0.1,
            false,
        )
        .unwrap();
        assert!(res.s <= 2.0 + 1e-6, "separable S = {}", res.s);
    }

    use crate::qstate::thermal_populations;
    use crate::linalg::I as _IM;
}
