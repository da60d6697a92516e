//! Command-line front end: configuration files, seeded experiment
//! execution, and data emission for every figure-class output.
//!
//! Configs are TOML; results are written atomically as one CSV per data
//! table plus a `bundle.json` carrying the config snapshot and
//! provenance. Re-running with an identical config (and seed) reproduces
//! the data tables byte for byte.

use crate::evolve::NoiseModel;
use crate::hamiltonian::NoiseDrive;
use crate::protocols::{
    parity_filter_experiment, scan_wigner, sbs_time_scan, Plane, ProtocolConfig,
    RamseyKind, ShotMode, WignerGrid,
};
use crate::qstate::{ecs_state, fock_state, HilbertSpec, Parity, Spin};
use crate::{Error, Result};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

pub const OUTDIR_ENV: &str = "SBS_SIM_OUTDIR";

/// Which experiment a config runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SbsScan,
    WignerScan,
    EcsTomography,
    EstimateDm,
    Chsh,
    ParityFilter,
    ErrorBudget,
    Ramsey,
    Thermometry,
    LdaStudy,
    MultimodeParity,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhysicsSection {
    #[serde(default = "default_eta")]
    pub eta: Vec<f64>,
    /// Carrier Rabi frequency Ω/2π in Hz.
    #[serde(default = "default_omega_hz")]
    pub omega_hz: f64,
    #[serde(default = "default_dims")]
    pub mode_dims: Vec<usize>,
    #[serde(default = "default_nmax")]
    pub n_max: usize,
    /// Radial mode splitting δ/2π in Hz.
    #[serde(default = "default_splitting_hz")]
    pub mode_splitting_hz: f64,
}

fn default_eta() -> Vec<f64> {
    vec![0.1, 0.087]
}
fn default_omega_hz() -> f64 {
    100.0e3
}
fn default_dims() -> Vec<usize> {
    vec![20, 20]
}
fn default_nmax() -> usize {
    7
}
fn default_splitting_hz() -> f64 {
    360.0e3
}

impl Default for PhysicsSection {
    fn default() -> Self {
        PhysicsSection {
            eta: default_eta(),
            omega_hz: default_omega_hz(),
            mode_dims: default_dims(),
            n_max: default_nmax(),
            mode_splitting_hz: default_splitting_hz(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct NoiseSection {
    #[serde(default)]
    pub nbar_init: Vec<f64>,
    #[serde(default)]
    pub heat_rates: Vec<f64>,
    #[serde(default)]
    pub dephasing_rates: Vec<f64>,
    /// 60-Hz mode-frequency modulation amplitude Δ/2π in Hz.
    #[serde(default)]
    pub noise_60hz_amp_hz: Option<f64>,
    #[serde(default = "one")]
    pub detect_up_given_up: f64,
    #[serde(default)]
    pub detect_up_given_down: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplingSection {
    /// Shots per point when not in infinite-shot mode.
    #[serde(default)]
    pub shots: u32,
    #[serde(default = "yes")]
    pub infinite_shot: bool,
    /// Master seed; mandatory for sampled runs.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_grid_min")]
    pub grid_min: f64,
    #[serde(default = "default_grid_max")]
    pub grid_max: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_plane")]
    pub plane: Plane,
}

fn yes() -> bool {
    true
}
fn default_grid_min() -> f64 {
    -2.0
}
fn default_grid_max() -> f64 {
    2.0
}
fn default_grid_points() -> usize {
    9
}
fn default_plane() -> Plane {
    Plane::RealReal
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            shots: 0,
            infinite_shot: true,
            seed: None,
            grid_min: default_grid_min(),
            grid_max: default_grid_max(),
            grid_points: default_grid_points(),
            plane: default_plane(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OutputSection {
    #[serde(default)]
    pub directory: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
}

fn default_formats() -> Vec<String> {
    vec!["csv".into(), "json".into()]
}

/// Per-experiment parameters; unused fields are ignored by other
/// experiments.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamsSection {
    /// Fock occupations for state preparation.
    #[serde(default)]
    pub fock: Option<Vec<usize>>,
    /// ECS amplitude (real) per mode.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub parity: Option<String>,
    /// Scan time span in seconds (sbs-scan, ramsey).
    #[serde(default)]
    pub t_max: Option<f64>,
    #[serde(default)]
    pub t_points: Option<usize>,
    /// Wait time for the parity filter, seconds.
    #[serde(default)]
    pub t_wait: Option<f64>,
    /// Thermometry true occupation.
    #[serde(default)]
    pub nbar: Option<f64>,
    /// Ramsey flavor: "bsb" or "sbs".
    #[serde(default)]
    pub ramsey_kind: Option<String>,
    /// Shot-to-shot Gaussian detuning spread (rad/s) for Ramsey scans.
    #[serde(default)]
    pub detuning_spread: Option<f64>,
    /// Lamb-Dicke study targets.
    #[serde(default)]
    pub lda_targets: Option<Vec<f64>>,
}

/// A full run configuration; round-trips losslessly through TOML.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub physics: PhysicsSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub params: ParamsSection,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{path:?}: {e}")))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.physics.mode_dims.len();
        if self.physics.eta.len() != n {
            return Err(Error::InvalidConfig(
                "physics.eta and physics.mode_dims lengths differ".into(),
            ));
        }
        HilbertSpec::new(self.physics.mode_dims.clone(), self.physics.eta.clone())?;
        self.noise_model(n)?.validate()?;
        if !self.sampling.infinite_shot {
            if self.sampling.shots == 0 {
                return Err(Error::InvalidConfig(
                    "sampled mode requires sampling.shots > 0".into(),
                ));
            }
            if self.sampling.seed.is_none() {
                return Err(Error::InvalidConfig(
                    "sampled mode requires sampling.seed".into(),
                ));
            }
        }
        if self.sampling.grid_points == 0 {
            return Err(Error::InvalidConfig("grid axes must be non-empty".into()));
        }
        if self.sampling.grid_max <= self.sampling.grid_min
            && self.sampling.grid_points > 1
        {
            return Err(Error::InvalidConfig("grid_max must exceed grid_min".into()));
        }
        for f in &self.output.formats {
            if f != "csv" && f != "json" {
                return Err(Error::InvalidConfig(format!("unknown format {f:?}")));
            }
        }
        Ok(())
    }

    pub fn space(&self) -> Result<HilbertSpec> {
        HilbertSpec::new(self.physics.mode_dims.clone(), self.physics.eta.clone())
    }

    pub fn noise_model(&self, n_modes: usize) -> Result<NoiseModel> {
        let mut noise = NoiseModel::ideal(n_modes);
        let fill = |v: &Vec<f64>, d: &mut Vec<f64>| {
            if !v.is_empty() {
                *d = v.clone();
            }
        };
        fill(&self.noise.nbar_init, &mut noise.nbar_init);
        fill(&self.noise.heat_rates, &mut noise.heat_rates);
        fill(&self.noise.dephasing_rates, &mut noise.dephasing_rates);
        for v in [&noise.nbar_init, &noise.heat_rates, &noise.dephasing_rates] {
            if v.len() != n_modes {
                return Err(Error::InvalidConfig(
                    "noise vectors must have one entry per mode".into(),
                ));
            }
        }
        noise.detect_up_given_up = self.noise.detect_up_given_up;
        noise.detect_up_given_down = self.noise.detect_up_given_down;
        if let Some(amp) = self.noise.noise_60hz_amp_hz {
            noise.noise_60hz = Some(NoiseDrive::mains_60hz(2.0 * PI * amp, 0.0)?);
        }
        Ok(noise)
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            omega: 2.0 * PI * self.physics.omega_hz,
            mode_splitting: 2.0 * PI * self.physics.mode_splitting_hz,
            ..ProtocolConfig::default()
        }
    }

    pub fn shot_mode(&self) -> ShotMode {
        if self.sampling.infinite_shot {
            ShotMode::InfiniteShot
        } else {
            ShotMode::Sampled { shots: self.sampling.shots }
        }
    }

    pub fn grid_axis(&self) -> Vec<f64> {
        let n = self.sampling.grid_points;
        if n == 1 {
            return vec![self.sampling.grid_min];
        }
        (0..n)
            .map(|k| {
                self.sampling.grid_min
                    + (self.sampling.grid_max - self.sampling.grid_min) * k as f64
                        / (n - 1) as f64
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        if let Some(dir) = &self.output.directory {
            return dir.clone();
        }
        if let Ok(dir) = std::env::var(OUTDIR_ENV) {
            return PathBuf::from(dir);
        }
        PathBuf::from("sbs-sim-out")
    }
}

/// One named rectangular table of f64 data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl DataTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> =
                row.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidConfig("empty CSV".into()))?;
        let columns: Vec<String> = header.split(',').map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidConfig(format!("bad float: {e}")))
                })
                .collect::<Result<_>>()?;
            if row.len() != columns.len() {
                return Err(Error::ShapeMismatch("CSV row width".into()));
            }
            rows.push(row);
        }
        Ok(DataTable { name: name.to_string(), columns, rows })
    }
}

/// Serialize a Wigner grid as the canonical point table.
pub fn grid_table(name: &str, grid: &WignerGrid) -> DataTable {
    let mut rows = Vec::new();
    for (i, &x1) in grid.beta1_axis.iter().enumerate() {
        for (j, &x2) in grid.beta2_axis.iter().enumerate() {
            let (b1, b2) = grid.plane.beta(x1, x2);
            rows.push(vec![
                b1.re,
                b1.im,
                b2.re,
                b2.im,
                grid.values[[i, j]],
                grid.std_errors[[i, j]],
                grid.shot_counts[[i, j]] as f64,
            ]);
        }
    }
    DataTable {
        name: name.to_string(),
        columns: vec![
            "beta1_re".into(),
            "beta1_im".into(),
            "beta2_re".into(),
            "beta2_im".into(),
            "W".into(),
            "stderr".into(),
            "shots".into(),
        ],
        rows,
    }
}

/// Everything a run produces.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultBundle {
    pub config: RunConfig,
    pub tables: Vec<DataTable>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub toolkit_version: String,
    pub timestamp_unix: u64,
    pub seed: Option<u64>,
}

fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

impl ResultBundle {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let formats = &self.config.output.formats;
        if formats.iter().any(|f| f == "csv") {
            for table in &self.tables {
                atomic_write(&dir.join(format!("{}.csv", table.name)), &table.to_csv())?;
            }
        }
        if formats.iter().any(|f| f == "json") {
            let json = serde_json::to_string_pretty(self)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            atomic_write(&dir.join("bundle.json"), &json)?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join("bundle.json") } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{file:?}: {e}")))
    }
}

/// Execute a validated config and write its outputs.
pub fn run(config: &RunConfig) -> Result<ResultBundle> {
    config.validate()?;
    let tables = dispatch(config)?;
    let bundle = ResultBundle {
        config: config.clone(),
        tables,
        provenance: Provenance {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            seed: config.sampling.seed,
        },
    };
    bundle.write(&config.out_dir())?;
    Ok(bundle)
}

fn parity_of(params: &ParamsSection) -> Parity {
    match params.parity.as_deref() {
        Some("odd") => Parity::Odd,
        _ => Parity::Even,
    }
}

fn dispatch(config: &RunConfig) -> Result<Vec<DataTable>> {
    let space = config.space()?;
    let noise = config.noise_model(space.n_modes())?;
    let pcfg = config.protocol_config();
    let seed = config.sampling.seed.unwrap_or(0);
    match config.experiment {
        Experiment::WignerScan => {
            let rho = match (&config.params.fock, config.params.alpha) {
                (Some(ns), _) => fock_state(&space, Spin::Down, ns)?.to_density(),
                (None, Some(a)) => {
                    ecs_state(&space, C64::new(a, 0.0), C64::new(a, 0.0), parity_of(&config.params))?
                        .to_density()
                }
                (None, None) => fock_state(&space, Spin::Down, &vec![0; space.n_modes()])?
                    .to_density(),
            };
            let axis = config.grid_axis();
            let grid = scan_wigner(
                &rho,
                config.sampling.plane,
                &axis,
                &axis,
                config.shot_mode(),
                &noise,
                &pcfg,
                seed,
            )?;
            Ok(vec![grid_table("wigner", &grid)])
        }
        Experiment::SbsScan => {
            let ns = config.params.fock.clone().unwrap_or(vec![1, 0]);
            let t_max = config
                .params
                .t_max
                .unwrap_or(2.0 * crate::hamiltonian::sbs_pi_time(&space, pcfg.omega));
            let n = config.params.t_points.unwrap_or(60);
            let t_axis: Vec<f64> =
                (0..n).map(|k| t_max * (k + 1) as f64 / n as f64).collect();
            let p_up = sbs_time_scan(&space, &ns, &t_axis, &noise, &pcfg)?;
            let rows = t_axis
                .iter()
                .zip(&p_up)
                .map(|(&t, &p)| vec![t, p])
                .collect();
            Ok(vec![DataTable {
                name: "sbs_scan".into(),
                columns: vec!["t".into(), "p_up".into()],
                rows,
            }])
        }
        Experiment::EcsTomography => {
            let a = config.params.alpha.unwrap_or(1.2);
            let out = crate::protocols::prepare_ecs(
                &space,
                C64::new(a, 0.0),
                C64::new(a, 0.0),
                parity_of(&config.params),
                &noise,
                &pcfg,
            )?;
            let axis = config.grid_axis();
            let mut tables = Vec::new();
            for (plane, name) in
                [(Plane::RealReal, "wigner_rere"), (Plane::ImagImag, "wigner_imim")]
            {
                let grid = scan_wigner(
                    &out.state,
                    plane,
                    &axis,
                    &axis,
                    config.shot_mode(),
                    &noise,
                    &pcfg,
                    seed,
                )?;
                tables.push(grid_table(name, &grid));
            }
            Ok(tables)
        }
        Experiment::EstimateDm => {
            estimate_dm_tables(config, &noise, seed)
        }
        Experiment::Chsh => {
            let a = config.params.alpha.unwrap_or(1.2);
            let f = move |b1: C64, b2: C64| {
                crate::analysis::ideal_ecs_wigner(
                    C64::new(a, 0.0),
                    C64::new(a, 0.0),
                    Parity::Even,
                    b1,
                    b2,
                )
            };
            let res = crate::analysis::chsh_maximize(
                &crate::analysis::WignerSource::Function(&f),
                Plane::ImagImag,
                2.0,
                0.1,
                true,
            )?;
            Ok(vec![DataTable {
                name: "chsh".into(),
                columns: vec![
                    "beta1_1_im".into(),
                    "beta1_2_im".into(),
                    "beta2_1_im".into(),
                    "beta2_2_im".into(),
                    "S".into(),
                ],
                rows: vec![vec![
                    res.betas[0].im,
                    res.betas[1].im,
                    res.betas[2].im,
                    res.betas[3].im,
                    res.s,
                ]],
            }])
        }
        Experiment::ParityFilter => {
            let t_wait = config.params.t_wait.unwrap_or(10.0e-3);
            let axis = config.grid_axis();
            let res = parity_filter_experiment(&space, &noise, t_wait, &pcfg, &axis)?;
            let mut tables = Vec::new();
            for (k, name) in ["a1", "a2", "a3"].iter().enumerate() {
                let rows = axis
                    .iter()
                    .zip(&res.slices[k])
                    .map(|(&x, &w)| vec![x, w])
                    .collect();
                tables.push(DataTable {
                    name: format!("slice_{name}"),
                    columns: vec!["beta2_re".into(), "W".into()],
                    rows,
                });
            }
            let mut rows = Vec::new();
            for (k, &(n1, n2)) in res.basis_labels.iter().enumerate() {
                rows.push(vec![
                    n1 as f64,
                    n2 as f64,
                    res.populations[0][k],
                    res.populations[1][k],
                    res.populations[2][k],
                ]);
            }
            tables.push(DataTable {
                name: "populations".into(),
                columns: vec![
                    "n1".into(),
                    "n2".into(),
                    "a1".into(),
                    "a2".into(),
                    "a3".into(),
                ],
                rows,
            });
            Ok(tables)
        }
        Experiment::ErrorBudget => {
            let a = config.params.alpha.unwrap_or(1.2);
            let axis = config.grid_axis();
            let budget = crate::analysis::error_budget(&space, &noise, &pcfg, a, &axis)?;
            Ok(vec![DataTable {
                name: "error_budget".into(),
                columns: vec![
                    "loss_g".into(),
                    "loss_d".into(),
                    "loss_m".into(),
                    "loss_total".into(),
                    "g_temperature".into(),
                    "g_heating".into(),
                    "g_dephasing".into(),
                    "d_heating".into(),
                    "d_dephasing".into(),
                    "m_heating".into(),
                ],
                rows: vec![vec![
                    budget.loss_g,
                    budget.loss_d,
                    budget.loss_m,
                    budget.loss_total,
                    budget.g_temperature,
                    budget.g_heating,
                    budget.g_dephasing,
                    budget.d_heating,
                    budget.d_dephasing,
                    budget.m_heating,
                ]],
            }])
        }
        Experiment::Ramsey => {
            let kind = match config.params.ramsey_kind.as_deref() {
                Some("sbs") => RamseyKind::Sbs,
                _ => RamseyKind::Bsb,
            };
            let mut noise = noise;
            if let Some(s) = config.params.detuning_spread {
                noise.detuning_spread = vec![s; space.n_modes()];
            }
            let t_max = config.params.t_max.unwrap_or(3.0e-3);
            let n = config.params.t_points.unwrap_or(7);
            let axis: Vec<f64> =
                (0..n).map(|k| t_max * k as f64 / (n - 1).max(1) as f64).collect();
            let pts = crate::protocols::ramsey_scan(&space, kind, &axis, &noise, &pcfg)?;
            Ok(vec![DataTable {
                name: "ramsey".into(),
                columns: vec!["t_wait".into(), "contrast".into(), "phase".into()],
                rows: pts
                    .iter()
                    .map(|p| vec![p.t_wait, p.contrast, p.phase])
                    .collect(),
            }])
        }
        Experiment::Thermometry => {
            let nbar = config.params.nbar.unwrap_or(0.05);
            let n = config.params.t_points.unwrap_or(40);
            let t_max = config.params.t_max.unwrap_or(1.0e-3);
            let t_axis: Vec<f64> =
                (1..=n).map(|k| t_max * k as f64 / n as f64).collect();
            let shots = if config.sampling.infinite_shot {
                200
            } else {
                config.sampling.shots
            };
            let fit = crate::protocols::sideband_thermometry(
                &space, 0, nbar, &t_axis, shots, &pcfg, seed,
            )?;
            Ok(vec![DataTable {
                name: "thermometry".into(),
                columns: vec![
                    "nbar_true".into(),
                    "nbar_fit".into(),
                    "nbar_err".into(),
                    "omega_fit".into(),
                ],
                rows: vec![vec![nbar, fit.nbar, fit.nbar_err, fit.omega]],
            }])
        }
        Experiment::LdaStudy => {
            let targets = config
                .params
                .lda_targets
                .clone()
                .unwrap_or(vec![2.0, 4.0, 6.0, 8.0]);
            let rows = crate::analysis::lda_displacement_study(&pcfg, &targets)?;
            Ok(vec![DataTable {
                name: "lda_study".into(),
                columns: vec![
                    "alpha_target".into(),
                    "nbar".into(),
                    "fidelity_to_matched_coherent".into(),
                ],
                rows,
            }])
        }
        Experiment::MultimodeParity => {
            let ns = config.params.fock.clone().unwrap_or(vec![1, 0, 1, 0]);
            let dims = vec![4usize; ns.len()];
            let etas = vec![0.1; ns.len()];
            let sp = HilbertSpec::new(dims, etas)?;
            let rho = fock_state(&sp, Spin::Down, &ns)?.to_density();
            let pairing: Vec<(usize, usize)> =
                (0..ns.len() / 2).map(|k| (2 * k, 2 * k + 1)).collect();
            let p_up =
                crate::protocols::multimode_parity(&rho, &pairing, 1 << 22)?;
            Ok(vec![DataTable {
                name: "multimode_parity".into(),
                columns: vec!["p_up".into(), "p_down".into()],
                rows: vec![vec![p_up, 1.0 - p_up]],
            }])
        }
    }
}

/// Synthetic estimate-dm round trip: forward-model grids with binomial
/// noise at the configured shot count, then the 9-parameter fit.
fn estimate_dm_tables(
    config: &RunConfig,
    _noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<DataTable>> {
    use crate::analysis::{
        fit_density_model, synthesize_grids, ModelParams, ModelTimings,
    };
    let truth = ModelParams {
        alpha: [config.params.alpha.unwrap_or(1.31), 1.26],
        nbar: [0.03, 0.05],
        heat: [11.0, 52.0],
        dephase: [1307.0, 378.0],
        detect_err_down: 0.009,
    };
    let shots = if config.sampling.infinite_shot {
        300
    } else {
        config.sampling.shots
    };
    let axis = config.grid_axis();
    let parity = parity_of(&config.params);
    let grids = synthesize_grids(&truth, parity, &axis, shots, seed)?;
    let init = ModelParams {
        alpha: [1.2, 1.2],
        nbar: [0.03, 0.03],
        heat: [6.1, 39.0],
        dephase: [500.0, 500.0],
        detect_err_down: 0.0,
    };
    let fit = fit_density_model(
        &[&grids[0], &grids[1]],
        init,
        parity,
        ModelTimings::default(),
    )?;
    let p = fit.params;
    let mut rows = Vec::new();
    rows.push(vec![
        p.alpha[0],
        p.alpha[1],
        p.nbar[0],
        p.nbar[1],
        p.heat[0],
        p.heat[1],
        p.dephase[0],
        p.dephase[1],
        p.detect_err_down,
        fit.chi2_reduced,
    ]);
    Ok(vec![
        DataTable {
            name: "fit_params".into(),
            columns: vec![
                "alpha1".into(),
                "alpha2".into(),
                "nbar1".into(),
                "nbar2".into(),
                "gamma1".into(),
                "gamma2".into(),
                "delta1".into(),
                "delta2".into(),
                "c".into(),
                "chi2_reduced".into(),
            ],
            rows,
        },
        grid_table("synthetic_rere", &grids[0]),
        grid_table("synthetic_imim", &grids[1]),
    ])
}

/// RMSE comparison of two bundles' congruent tables.
#[derive(Clone, Debug, Serialize)]
pub struct CompareReport {
    pub tables: Vec<(String, f64, f64)>,
}

pub fn compare(a: &ResultBundle, b: &ResultBundle) -> Result<CompareReport> {
    let full_range = 8.0 / (PI * PI);
    let mut out = Vec::new();
    for ta in &a.tables {
        let Some(tb) = b.tables.iter().find(|t| t.name == ta.name) else {
            continue;
        };
        if ta.rows.len() != tb.rows.len() || ta.columns != tb.columns {
            return Err(Error::ShapeMismatch(format!("table {}", ta.name)));
        }
        // compare the value column: "W" when present, else the last column
        let col = ta
            .columns
            .iter()
            .position(|c| c == "W")
            .unwrap_or(ta.columns.len() - 1);
        let mut sq = 0.0;
        for (ra, rb) in ta.rows.iter().zip(&tb.rows) {
            let d = ra[col] - rb[col];
            sq += d * d;
        }
        let rmse = (sq / ta.rows.len() as f64).sqrt();
        out.push((ta.name.clone(), rmse, rmse / full_range));
    }
    if out.is_empty() {
        return Err(Error::ShapeMismatch("no common tables".into()));
    }
    Ok(CompareReport { tables: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> RunConfig {
        RunConfig {
            experiment: Experiment::WignerScan,
            physics: PhysicsSection {
                mode_dims: vec![12, 12],
                ..Default::default()
            },
            noise: NoiseSection::default(),
            sampling: SamplingSection {
                grid_points: 3,
                grid_min: -1.0,
                grid_max: 1.0,
                ..Default::default()
            },
            output: OutputSection::default(),
            params: ParamsSection { fock: Some(vec![1, 1]), ..Default::default() },
        }
    }

    #[test]
    fn config_roundtrip_through_toml() {
        let cfg = base_config();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.experiment, cfg.experiment);
        assert_eq!(back.physics.mode_dims, cfg.physics.mode_dims);
        assert_eq!(back.sampling.grid_points, cfg.sampling.grid_points);
        let text2 = toml::to_string(&back).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = base_config();
        cfg.noise.heat_rates = vec![-1.0, 0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.noise.detect_up_given_down = 0.99;
        cfg.noise.detect_up_given_up = 0.95;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.sampling.infinite_shot = false;
        cfg.sampling.shots = 0;
        cfg.sampling.seed = Some(1);
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.sampling.infinite_shot = false;
        cfg.sampling.shots = 100;
        cfg.sampling.seed = None;
        assert!(cfg.validate().is_err());
        let mut cfg = base_config();
        cfg.sampling.grid_points = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let t = DataTable {
            name: "demo".into(),
            columns: vec!["a".into(), "b".into()],
            rows: vec![
                vec![0.1 + 0.2, -1.0 / 3.0],
                vec![4.0 / (PI * PI), 1.0e-300],
            ],
        };
        let text = t.to_csv();
        let back = DataTable::from_csv("demo", &text).unwrap();
        assert_eq!(t.rows, back.rows);
    }

    #[test]
    fn wigner_scan_matches_oracle_and_is_deterministic() {
        let dir = std::env::temp_dir().join("sbs_sim_cli_test");
        let _ = std::fs::remove_dir_all(&dir);
        let mut cfg = base_config();
        cfg.output.directory = Some(dir.clone());
        let bundle = run(&cfg).unwrap();
        assert_eq!(bundle.tables.len(), 1);
        // single origin-adjacent point check against the direct transform
        let space = cfg.space().unwrap();
        let rho = fock_state(&space, Spin::Down, &[1, 1]).unwrap().to_density();
        for row in &bundle.tables[0].rows {
            let beta = [C64::new(row[0], row[1]), C64::new(row[2], row[3])];
            let w = crate::qstate::wigner_point(&rho, &beta).unwrap();
            assert!((row[4] - w).abs() < 1e-8);
        }
        // determinism: re-run and compare the emitted CSV bytes
        let csv1 = std::fs::read(dir.join("wigner.csv")).unwrap();
        run(&cfg).unwrap();
        let csv2 = std::fs::read(dir.join("wigner.csv")).unwrap();
        assert_eq!(csv1, csv2);
        // bundle round-trips and compares with zero RMSE
        let b = ResultBundle::read(&dir).unwrap();
        let report = compare(&bundle, &b).unwrap();
        assert_eq!(report.tables.len(), 1);
        assert_eq!(report.tables[0].1, 0.0);
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn compare_reports_percent_of_range() {
        let mk = |w: f64| ResultBundle {
            config: base_config(),
            tables: vec![DataTable {
                name: "wigner".into(),
                columns: vec!["W".into()],
                rows: vec![vec![w]],
            }],
            provenance: Provenance {
                toolkit_version: "t".into(),
                timestamp_unix: 0,
                seed: None,
            },
        };
        let report = compare(&mk(0.026), &mk(0.0)).unwrap();
        assert!((report.tables[0].1 - 0.026).abs() < 1e-15);
        assert!((report.tables[0].2 - 0.032).abs() < 2e-4);
    }
}
