//! Experiment harness: loads JSON experiment configs, runs the verification
//! commands (check, converge, fluctuation, moments, averaging), and writes
//! deterministic reports. Every verdict couples a named statistic to an
//! explicit threshold and carries seed-replicate standard errors, so no
//! pass/fail call rests on a bare point estimate.

use crate::engine::{
    simulate_full, simulate_full_observed, simulate_limit, stability_cap, IntegratorConfig,
    LimitCoeffs,
};
use crate::error::{Error, Result};
use crate::homogenize::{
    averaged_map, check_equivalence, grid_provider, oracle_provider, GridProviderConfig,
};
use crate::measure::{w2_distance, EmpiricalMeasure, MeasureSummary, W2Method};
use crate::model::{instantiate, verify_assumptions, CoefficientSet, InitialLaw, LawKind, Model, ModelSpec};
use crate::poisson::{
    check_centering, default_probe_grid, mix_seed, phi_derivatives, poisson_residual,
    regularity_spotcheck, sample_invariant, DerivativeMode,
};
use crate::stats::{linear_fit, mean, standard_error};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Step factor for corrector evaluations inside the check battery.
const CHECK_DT_FACTOR: f64 = 0.02;
/// Monte Carlo paths per corrector probe in the check battery.
const CHECK_CORRECTOR_PATHS: usize = 512;
/// Paths per probe for the regularity spot check.
const CHECK_REGULARITY_PATHS: usize = 256;
/// Dyadic increment levels never go below this many steps per window.
const MAX_DYADIC_LEVELS: u32 = 12;
/// Projection count when terminal W2 needs the sliced surrogate (n >= 2).
const W2_PROJECTIONS: usize = 128;

const SALT_CHECK: u64 = 0x51;
const SALT_PILOT: u64 = 0x52;
const SALT_GRID: u64 = 0x53;
const SALT_FBAR: u64 = 0x54;
const SALT_DOUBLING: u64 = 0x55;

/// Test functional applied to the slow terminal cloud.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Functional {
    /// Coordinatewise mean of x itself.
    Id,
    /// Mean of |x|^2.
    Square,
    /// Mean of cos(<u, x>) with u = ones / sqrt(n).
    Cosine,
}

impl Functional {
    pub fn label(self) -> &'static str {
        match self {
            Functional::Id => "id",
            Functional::Square => "square",
            Functional::Cosine => "cosine",
        }
    }

    /// Cloud average of the functional; `id` keeps all n coordinates.
    pub fn cloud_mean(self, x: &DMatrix<f64>) -> DVector<f64> {
        let (n_p, n) = x.shape();
        let w = 1.0 / n_p as f64;
        match self {
            Functional::Id => DVector::from_fn(n, |j, _| x.column(j).sum() * w),
            Functional::Square => {
                DVector::from_element(1, x.row_iter().map(|r| r.norm_squared()).sum::<f64>() * w)
            }
            Functional::Cosine => {
                let u = 1.0 / (n as f64).sqrt();
                DVector::from_element(
                    1,
                    x.row_iter().map(|r| (r.sum() * u).cos()).sum::<f64>() * w,
                )
            }
        }
    }

    /// Particle-level standard error of each output coordinate.
    fn cloud_se(self, x: &DMatrix<f64>) -> DVector<f64> {
        let (n_p, n) = x.shape();
        match self {
            Functional::Id => DVector::from_fn(n, |j, _| {
                let col: Vec<f64> = (0..n_p).map(|i| x[(i, j)]).collect();
                standard_error(&col)
            }),
            Functional::Square => {
                let vals: Vec<f64> = x.row_iter().map(|r| r.norm_squared()).collect();
                DVector::from_element(1, standard_error(&vals))
            }
            Functional::Cosine => {
                let u = 1.0 / (n as f64).sqrt();
                let vals: Vec<f64> = x.row_iter().map(|r| (r.sum() * u).cos()).collect();
                DVector::from_element(1, standard_error(&vals))
            }
        }
    }
}

fn default_functionals() -> Vec<Functional> {
    vec![Functional::Id, Functional::Square, Functional::Cosine]
}

/// Observable averaged in the first-order averaging experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observable {
    /// F(x, mu, y) = |y|^2; additive centering constants cancel in F - Fbar.
    Square,
    /// F = K, whose invariant average vanishes for admissible models.
    K,
    /// F = 1; the block-frozen gap is identically zero.
    Constant,
}

impl Observable {
    pub fn label(self) -> &'static str {
        match self {
            Observable::Square => "square",
            Observable::K => "k",
            Observable::Constant => "constant",
        }
    }

    fn dim(self, cs: &CoefficientSet) -> usize {
        match self {
            Observable::K => cs.dims.n,
            _ => 1,
        }
    }

    fn eval(
        self,
        cs: &CoefficientSet,
        x: &DVector<f64>,
        mu: &MeasureSummary,
        y: &DVector<f64>,
    ) -> DVector<f64> {
        match self {
            Observable::Square => DVector::from_element(1, y.norm_squared()),
            Observable::K => (cs.k)(x, mu, y),
            Observable::Constant => DVector::from_element(1, 1.0),
        }
    }
}

fn default_observable() -> Observable {
    Observable::Square
}

/// Time-step rule applied per epsilon.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DtRule {
    /// dt = factor * stability cap(epsilon), shrunk so it divides t_end.
    EpsScaled {
        #[serde(default = "default_dt_factor")]
        factor: f64,
    },
}

fn default_dt_factor() -> f64 {
    1.0
}

impl Default for DtRule {
    fn default() -> Self {
        DtRule::EpsScaled { factor: 1.0 }
    }
}

impl DtRule {
    /// Step for this epsilon; always divides t_end to a whole step count.
    pub fn dt(&self, cs: &CoefficientSet, epsilon: f64, t_end: f64) -> f64 {
        let DtRule::EpsScaled { factor } = *self;
        let dt0 = factor * stability_cap(epsilon, cs);
        t_end / (t_end / dt0).ceil()
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("harness-out")
}

fn default_assumption_budget() -> usize {
    20_000
}

fn default_invariant_budget() -> usize {
    200_000
}

fn default_poisson_budget() -> usize {
    6_400
}

fn default_grid_points() -> usize {
    3
}

fn default_grid_invariant_budget() -> usize {
    40_000
}

fn default_grid_poisson_budget() -> usize {
    1_024
}

fn default_delta_factor() -> f64 {
    1.0
}

fn default_limit_dt() -> f64 {
    0.01
}

fn default_pilot_particles() -> usize {
    256
}

/// One experiment: a model, an epsilon grid, particle/horizon sizes, seed
/// replicates, and optional budget overrides. Unknown fields are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    /// Strictly decreasing grid in (0, 1].
    pub epsilons: Vec<f64>,
    #[serde(alias = "N")]
    pub n_particles: usize,
    #[serde(alias = "T")]
    pub t_end: f64,
    #[serde(default)]
    pub dt_rule: DtRule,
    /// Master seeds; one independent replicate per seed.
    pub seeds: Vec<u64>,
    #[serde(default = "default_functionals")]
    pub test_functionals: Vec<Functional>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Observable for the averaging command.
    #[serde(default = "default_observable")]
    pub observable: Observable,
    /// Averaging block length is delta_factor * epsilon^(2/3).
    #[serde(default = "default_delta_factor")]
    pub delta_factor: f64,
    /// Target step of the limit-equation run (shrunk to divide t_end).
    #[serde(default = "default_limit_dt")]
    pub limit_dt: f64,
    #[serde(default = "default_assumption_budget")]
    pub assumption_budget: usize,
    #[serde(default = "default_invariant_budget")]
    pub invariant_budget: usize,
    #[serde(default = "default_poisson_budget")]
    pub poisson_budget: usize,
    /// Nodes per axis of empirical coefficient caches.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_grid_invariant_budget")]
    pub grid_invariant_budget: usize,
    #[serde(default = "default_grid_poisson_budget")]
    pub grid_poisson_budget: usize,
    /// Particles in the range-bracketing pilot run.
    #[serde(default = "default_pilot_particles")]
    pub pilot_particles: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(Error::Config("epsilons must be non-empty".into()));
        }
        for &e in &self.epsilons {
            if !(e.is_finite() && e > 0.0 && e <= 1.0) {
                return Err(Error::Config(format!(
                    "epsilon {e} outside the admissible range (0, 1]"
                )));
            }
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(
                "epsilons must be strictly decreasing".into(),
            ));
        }
        if self.n_particles < 2 {
            return Err(Error::Config("n_particles must be at least 2".into()));
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(Error::Config("t_end must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(
                "seeds must be distinct; replicates assume independent streams".into(),
            ));
        }
        if self.test_functionals.is_empty() {
            return Err(Error::Config(
                "test_functionals must name at least one functional".into(),
            ));
        }
        if !(self.delta_factor.is_finite() && self.delta_factor > 0.0) {
            return Err(Error::Config("delta_factor must be positive".into()));
        }
        if !(self.limit_dt.is_finite() && self.limit_dt > 0.0) {
            return Err(Error::Config("limit_dt must be positive".into()));
        }
        if self.grid_points < 2 {
            return Err(Error::Config("grid_points must be at least 2".into()));
        }
        let DtRule::EpsScaled { factor } = self.dt_rule;
        if !(factor.is_finite() && factor > 0.0 && factor <= 1.0) {
            return Err(Error::Config(
                "dt_rule factor must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the effective scientific inputs. The output directory
    /// is excluded: moving reports must not change the recorded identity.
    pub fn content_hash(&self, command: &str, p: Option<u32>) -> String {
        use sha2::{Digest, Sha256};
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let blob = serde_json::json!({ "command": command, "p": p, "config": c });
        let compact = serde_json::to_string(&blob).expect("config serializes");
        let digest = Sha256::digest(compact.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses and validates an experiment config from a JSON file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// One long-format result row; epsilon is absent for grid-free statistics.
#[derive(Debug, Clone, Serialize)]
pub struct StatRow {
    pub experiment: String,
    pub epsilon: Option<f64>,
    pub statistic: String,
    pub value: f64,
    pub std_err: f64,
}

/// Fitted log-log slope with a 2-SE confidence interval over seed replicates.
#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    pub name: String,
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
}

/// One pass/fail call: the statistic, its value, and the explicit threshold.
#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub name: String,
    pub statistic: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
    pub detail: String,
}

/// Plot-ready series written to plotdata/{name}.csv.
#[derive(Debug, Clone, Serialize)]
pub struct PlotSeries {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub seeds: Vec<u64>,
    pub model_hash: String,
    pub config_hash: String,
    pub version: String,
}

/// Full command output; serialized to summary.json without timestamps so
/// reruns with equal inputs produce byte-identical files.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub rows: Vec<StatRow>,
    pub slopes: Vec<SlopeFit>,
    pub verdicts: Vec<Verdict>,
    pub plots: Vec<PlotSeries>,
    pub provenance: Provenance,
}

impl RunReport {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    fn new(command: &str, cfg: &ExperimentConfig, p: Option<u32>) -> RunReport {
        RunReport {
            command: command.to_string(),
            rows: Vec::new(),
            slopes: Vec::new(),
            verdicts: Vec::new(),
            plots: Vec::new(),
            provenance: Provenance {
                seeds: cfg.seeds.clone(),
                model_hash: cfg.model.content_hash(),
                config_hash: cfg.content_hash(command, p),
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
        }
    }

    fn row(&mut self, epsilon: Option<f64>, statistic: &str, value: f64, std_err: f64) {
        self.rows.push(StatRow {
            experiment: self.command.clone(),
            epsilon,
            statistic: statistic.to_string(),
            value,
            std_err,
        });
    }
}

fn verdict(
    name: &str,
    statistic: &str,
    value: f64,
    threshold: &str,
    pass: bool,
    detail: String,
) -> Verdict {
    Verdict {
        name: name.to_string(),
        statistic: statistic.to_string(),
        value,
        threshold: threshold.to_string(),
        pass,
        detail,
    }
}

/// Failed verdict for a sub-check whose computation itself errored.
fn error_verdict(name: &str, statistic: &str, e: &Error) -> Verdict {
    verdict(
        name,
        statistic,
        f64::NAN,
        "computation must succeed",
        false,
        format!("error: {e}"),
    )
}

/// Writes results.csv, summary.json, and plotdata/*.csv under `dir`.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let csv_path = dir.join("results.csv");
    let mut csv = String::from("experiment,epsilon,statistic,value,std_err\n");
    for r in &report.rows {
        let eps = r.epsilon.map(|e| format!("{e}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.experiment, eps, r.statistic, r.value, r.std_err
        ));
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    let json_path = dir.join("summary.json");
    let mut body = serde_json::to_string_pretty(report).expect("report serializes");
    body.push('\n');
    std::fs::write(&json_path, body).map_err(|e| Error::io(json_path.display().to_string(), e))?;

    let plot_dir = dir.join("plotdata");
    std::fs::create_dir_all(&plot_dir).map_err(|e| Error::io(plot_dir.display().to_string(), e))?;
    for series in &report.plots {
        let path = plot_dir.join(format!("{}.csv", series.name));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "{}", series.columns.join(",")).map_err(|e| Error::io(path.display().to_string(), e))?;
        for row in &series.rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    Ok(())
}

/// Center of a marginal initial law: the point mass or the Gaussian mean.
fn law_center(law: &crate::model::LawSpec, dim: usize) -> DVector<f64> {
    let v = match law.kind {
        LawKind::Point => law.value.as_ref(),
        LawKind::Gaussian => law.mean.as_ref(),
    };
    match v {
        Some(v) => DVector::from_column_slice(v),
        None => DVector::zeros(dim),
    }
}

fn full_config(
    cfg: &ExperimentConfig,
    cs: &CoefficientSet,
    epsilon: f64,
    save_every: usize,
) -> Result<IntegratorConfig> {
    let dt = cfg.dt_rule.dt(cs, epsilon, cfg.t_end);
    IntegratorConfig::new(epsilon, dt, cfg.t_end, cfg.n_particles, save_every, cs)
}

/// Per-particle running integral of `integrand - frozen` over the saved
/// grid (left Riemann sums), returning each particle's sup norm. `frozen`
/// re-evaluates its map at the first grid point of every block of length
/// delta; with no frozen map the subtrahend is exactly zero, so the
/// fluctuation and averaging statistics share one arithmetic path.
fn run_sup_integral(
    cs: &CoefficientSet,
    icfg: &IntegratorConfig,
    initial: &InitialLaw,
    seed: u64,
    q: usize,
    integrand: &(dyn Fn(&DVector<f64>, &MeasureSummary, &DVector<f64>) -> DVector<f64> + Sync),
    frozen: Option<(f64, &(dyn Fn(&DVector<f64>, &MeasureSummary) -> Result<DVector<f64>> + Sync))>,
) -> Result<Vec<f64>> {
    let n_p = icfg.n_particles;
    let mut prev: Option<(f64, DMatrix<f64>, DMatrix<f64>, MeasureSummary)> = None;
    let mut integral: Vec<DVector<f64>> = vec![DVector::zeros(q); n_p];
    let mut sup: Vec<f64> = vec![0.0; n_p];
    let mut frozen_vals: Vec<DVector<f64>> = vec![DVector::zeros(q); n_p];
    let mut cur_block: i64 = -1;
    simulate_full_observed(cs, icfg, initial, seed, &mut |state| {
        if let Some((pt, px, py, pmu)) = prev.take() {
            if let Some((delta, fbar)) = &frozen {
                let blk = (pt / delta + 1e-9).floor() as i64;
                if blk != cur_block {
                    for (i, slot) in frozen_vals.iter_mut().enumerate() {
                        *slot = fbar(&px.row(i).transpose(), &pmu)?;
                    }
                    cur_block = blk;
                }
            }
            let dtau = state.t - pt;
            for i in 0..n_p {
                let f = integrand(&px.row(i).transpose(), &pmu, &py.row(i).transpose());
                integral[i] += (f - &frozen_vals[i]) * dtau;
                let norm = integral[i].norm();
                if norm > sup[i] {
                    sup[i] = norm;
                }
            }
        }
        prev = Some((
            state.t,
            state.x.clone(),
            state.y.clone(),
            state.mu_summary.clone(),
        ));
        Ok(())
    })?;
    Ok(sup)
}

/// Range of slow positions and slow means visited by a cheap pilot run at
/// the largest epsilon; brackets empirical coefficient caches.
fn pilot_range(
    model: &Model,
    cfg: &ExperimentConfig,
) -> Result<((f64, f64), (f64, f64))> {
    let cs = &model.coeffs;
    let eps = cfg.epsilons[0];
    let dt = cfg.dt_rule.dt(cs, eps, cfg.t_end);
    let n_p = cfg.pilot_particles.min(cfg.n_particles).max(2);
    let icfg = IntegratorConfig::new(eps, dt, cfg.t_end, n_p, 1, cs)?;
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut m_lo, mut m_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    simulate_full_observed(
        cs,
        &icfg,
        &model.spec.initial,
        mix_seed(cfg.seeds[0], SALT_PILOT, 0),
        &mut |state| {
            for i in 0..n_p {
                let v = state.x[(i, 0)];
                x_lo = x_lo.min(v);
                x_hi = x_hi.max(v);
            }
            let m = state.mu_summary.mean[0];
            m_lo = m_lo.min(m);
            m_hi = m_hi.max(m);
            Ok(())
        },
    )?;
    Ok(((x_lo, x_hi), (m_lo, m_hi)))
}

/// Closed-form limit coefficients when available, otherwise an empirical
/// grid cache bracketed by the pilot run.
fn build_limit_provider(model: &Model, cfg: &ExperimentConfig) -> Result<LimitCoeffs> {
    if let Some(p) = oracle_provider(model)? {
        return Ok(p);
    }
    let (x_range, m_range) = pilot_range(model, cfg)?;
    let mut gcfg = GridProviderConfig::from_observed_range(
        x_range,
        m_range,
        mix_seed(cfg.seeds[0], SALT_GRID, 0),
    );
    gcfg.x_points = cfg.grid_points;
    gcfg.mean_points = cfg.grid_points;
    gcfg.invariant_budget = cfg.grid_invariant_budget;
    gcfg.poisson_budget = cfg.grid_poisson_budget;
    grid_provider(model, &gcfg)
}

/// Bilinear cache over (x, mean) nodes with clamped extrapolation.
struct BilinearCache {
    xs: Vec<f64>,
    ms: Vec<f64>,
    /// x-major node values.
    vals: Vec<DVector<f64>>,
}

impl BilinearCache {
    fn locate(grid: &[f64], v: f64) -> (usize, f64) {
        let k = grid.len();
        let (lo, hi) = (grid[0], grid[k - 1]);
        let t = if hi > lo {
            ((v - lo) / (hi - lo) * (k - 1) as f64).clamp(0.0, (k - 1) as f64 - 1e-12)
        } else {
            0.0
        };
        let i = t.floor() as usize;
        (i, t - i as f64)
    }

    fn eval(&self, x: f64, m: f64) -> DVector<f64> {
        let (i, s) = Self::locate(&self.xs, x);
        let (j, t) = Self::locate(&self.ms, m);
        let k = self.ms.len();
        let v00 = &self.vals[i * k + j];
        let v01 = &self.vals[i * k + j + 1];
        let v10 = &self.vals[(i + 1) * k + j];
        let v11 = &self.vals[(i + 1) * k + j + 1];
        v00 * ((1.0 - s) * (1.0 - t))
            + v01 * ((1.0 - s) * t)
            + v10 * (s * (1.0 - t))
            + v11 * (s * t)
    }
}

/// Invariant average of the observable on a node grid; slow means enter as
/// point masses, matching the frozen-equation definition of the average.
fn observable_average_cache(
    model: &Model,
    cfg: &ExperimentConfig,
    obs: Observable,
) -> Result<BilinearCache> {
    let cs = &model.coeffs;
    if cs.dims.n != 1 {
        return Err(Error::MethodCap(
            "empirical observable averages support n = 1; supply a model with a closed form otherwise"
                .into(),
        ));
    }
    let (x_range, m_range) = pilot_range(model, cfg)?;
    let pad = |lo: f64, hi: f64| {
        let w = (hi - lo).max(0.2);
        (lo - 0.2 * w, hi + 0.2 * w)
    };
    let (x_lo, x_hi) = pad(x_range.0, x_range.1);
    let (m_lo, m_hi) = pad(m_range.0, m_range.1);
    let k = cfg.grid_points;
    let lin = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (k - 1) as f64;
    let xs: Vec<f64> = (0..k).map(|i| lin(x_lo, x_hi, i)).collect();
    let ms: Vec<f64> = (0..k).map(|i| lin(m_lo, m_hi, i)).collect();
    let seed = mix_seed(cfg.seeds[0], SALT_FBAR, 0);
    let nodes: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .collect();
    let vals: Vec<DVector<f64>> = nodes
        .par_iter()
        .map(|&(i, j)| -> Result<DVector<f64>> {
            let x = DVector::from_element(1, xs[i]);
            let mu = MeasureSummary::dirac(DVector::from_element(1, ms[j]));
            let nu = sample_invariant(
                cs,
                &x,
                &mu,
                cfg.grid_invariant_budget,
                mix_seed(seed, 0x31, (i * k + j) as u64),
            )?;
            Ok(averaged_map(|x, mu, y| obs.eval(cs, x, mu, y), cs, &x, &mu, &nu).value)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BilinearCache { xs, ms, vals })
}

/// Pairwise monotonicity verdict: each step may rise at most 2 combined SE.
fn monotone_verdict(name: &str, statistic: &str, series: &[(f64, f64, f64)]) -> Verdict {
    let mut worst = f64::NEG_INFINITY;
    let mut detail = String::new();
    for w in series.windows(2) {
        let (e0, v0, s0) = w[0];
        let (e1, v1, s1) = w[1];
        let allow = 2.0 * (s0 * s0 + s1 * s1).sqrt();
        let excess = v1 - v0 - allow;
        worst = worst.max(excess);
        detail.push_str(&format!(
            "eps {e0}->{e1}: {v0:.4e}->{v1:.4e} (allow +{allow:.2e}); "
        ));
    }
    verdict(
        name,
        statistic,
        worst,
        "worst pairwise rise minus 2 SE <= 0",
        worst <= 0.0,
        detail,
    )
}

/// Net-decrease verdict: the last value must sit below the first by more
/// than 2 combined SE.
fn net_drop_verdict(name: &str, statistic: &str, series: &[(f64, f64, f64)]) -> Verdict {
    let (e0, v0, s0) = series[0];
    let (e1, v1, s1) = *series.last().expect("series non-empty");
    let allow = 2.0 * (s0 * s0 + s1 * s1).sqrt();
    let drop = v0 - v1;
    verdict(
        name,
        statistic,
        drop,
        &format!("> {allow:.3e} (2 combined SE)"),
        drop > allow,
        format!("value {v0:.4e} at eps {e0} vs {v1:.4e} at eps {e1}"),
    )
}

/// Slope verdict against a band, requiring the 2-SE interval to meet it.
fn slope_verdict(name: &str, statistic: &str, fit: &SlopeFit, lo: f64, hi: f64) -> Verdict {
    let in_band = fit.slope >= lo && fit.slope <= hi;
    let ci_meets = fit.ci_high >= lo && fit.ci_low <= hi;
    verdict(
        name,
        statistic,
        fit.slope,
        &format!("in [{lo}, {hi}]"),
        in_band && ci_meets,
        format!(
            "2-SE interval [{:.3}, {:.3}] over {} grid points",
            fit.ci_low, fit.ci_high, fit.points
        ),
    )
}

/// Mean and 2-SE interval of per-seed regression slopes. A single replicate
/// falls back to the within-fit standard error.
fn seed_slope_fit(name: &str, eps: &[f64], per_seed: &[Vec<f64>]) -> SlopeFit {
    let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let mut slopes = Vec::with_capacity(per_seed.len());
    let mut fit_se = 0.0;
    for series in per_seed {
        let ly: Vec<f64> = series.iter().map(|v| v.ln()).collect();
        let (slope, _, se) = linear_fit(&lx, &ly);
        slopes.push(slope);
        fit_se = se;
    }
    let m = mean(&slopes);
    let se = if slopes.len() > 1 {
        standard_error(&slopes)
    } else {
        fit_se
    };
    SlopeFit {
        name: name.to_string(),
        slope: m,
        ci_low: m - 2.0 * se,
        ci_high: m + 2.0 * se,
        points: eps.len(),
    }
}

/// Model admission battery. Sub-check failures become failed verdicts while
/// the remaining items still run; only configuration errors abort.
pub fn cmd_check(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let model = instantiate(&cfg.model)?;
    let cs = &model.coeffs;
    let seed = cfg.seeds[0];
    let x0 = law_center(&cfg.model.initial.x, cs.dims.n);
    let mu0 = MeasureSummary::dirac(x0.clone());
    let dt = CHECK_DT_FACTOR / cs.gamma;
    let mut report = RunReport::new("check", cfg, None);

    match verify_assumptions(cs, cfg.assumption_budget, mix_seed(seed, SALT_CHECK, 0)) {
        Ok(rep) => {
            // Dissipativity is a lower bound (bigger margin is better), so
            // only the Lipschitz and growth ratios enter the worst ratio.
            let mut worst = 0.0_f64;
            for c in rep.lipschitz.iter().chain(rep.growth.iter()) {
                if c.bound > 0.0 {
                    worst = worst.max(c.observed / c.bound);
                }
            }
            report.verdicts.push(verdict(
                "assumptions",
                "worst observed/declared Lipschitz and growth ratio over probe pairs",
                worst,
                &format!("<= 1 + {} slack, with the dissipativity margin held", rep.slack),
                rep.pass,
                format!(
                    "{} probe pairs; dissipativity observed {:.3} vs declared {:.3}",
                    rep.budget, rep.dissipativity.observed, rep.dissipativity.bound
                ),
            ));
        }
        Err(e) => report
            .verdicts
            .push(error_verdict("assumptions", "probe battery", &e)),
    }

    let nu = match sample_invariant(
        cs,
        &x0,
        &mu0,
        cfg.invariant_budget,
        mix_seed(seed, SALT_CHECK, 1),
    ) {
        Ok(nu) => {
            report.row(None, "invariant-ergodic-gap", nu.ergodic_gap, 0.0);
            report.row(None, "invariant-contraction-rate", nu.fitted_beta, 0.0);
            report.verdicts.push(verdict(
                "invariant-sampler",
                "half-vs-half transport gap of the kept chain",
                nu.ergodic_gap,
                "sampler internal ergodicity tolerance",
                true,
                format!("burn-in {:.2}, thinning {}", nu.burn_in, nu.thinning),
            ));
            Some(nu)
        }
        Err(e) => {
            report.verdicts.push(error_verdict(
                "invariant-sampler",
                "frozen-equation long-run sampler",
                &e,
            ));
            None
        }
    };

    if let Some(nu) = &nu {
        let check = check_centering(cs, &x0, &mu0, nu);
        let worst = check
            .residual
            .iter()
            .zip(&check.std_err)
            .map(|(r, s)| r.abs() / s.max(1e-300))
            .fold(0.0_f64, f64::max);
        report.row(
            None,
            "centering-residual",
            check.residual.iter().map(|r| r.abs()).fold(0.0, f64::max),
            check.std_err.iter().cloned().fold(0.0, f64::max),
        );
        report.verdicts.push(verdict(
            "centering",
            "max |avg K| in standard-error units",
            worst,
            "<= 3 SE per entry",
            check.pass,
            format!("residual {:?}", check.residual),
        ));

        let sigma = nu
            .covariance
            .diagonal()
            .iter()
            .cloned()
            .fold(0.0_f64, f64::max)
            .sqrt();
        let dir = DVector::from_element(cs.dims.m, 1.0 / (cs.dims.m as f64).sqrt());
        let probes = [
            ("nu-mean", nu.mean.clone()),
            ("nu-tail", &nu.mean + dir * (2.0 * sigma)),
        ];
        for (k, (label, y)) in probes.iter().enumerate() {
            let name = format!("corrector-residual[{label}]");
            let out = phi_derivatives(
                cs,
                &x0,
                &mu0,
                y,
                DerivativeMode::Fd,
                CHECK_CORRECTOR_PATHS,
                dt,
                mix_seed(seed, SALT_CHECK, 2 + k as u64),
            )
            .and_then(|eval| poisson_residual(cs, &x0, &mu0, y, &eval));
            match out {
                Ok(rep) => {
                    let worst = rep.residual.iter().map(|r| r.abs()).fold(0.0, f64::max);
                    report.row(None, &format!("{name}-max"), worst, 0.0);
                    report.verdicts.push(verdict(
                        &name,
                        "generator applied to the estimated corrector plus K",
                        worst,
                        "<= 3 SE + finite-difference and Euler allowances",
                        rep.pass,
                        format!(
                            "residual {:?}, bias bound {:.2e}",
                            rep.residual, rep.bias_bound
                        ),
                    ));
                }
                Err(e) => report.verdicts.push(error_verdict(
                    &name,
                    "corrector residual probe",
                    &e,
                )),
            }
        }
    } else {
        report.verdicts.push(verdict(
            "centering",
            "max |avg K| in standard-error units",
            f64::NAN,
            "<= 3 SE per entry",
            false,
            "skipped: invariant sampler failed".into(),
        ));
    }

    match regularity_spotcheck(
        cs,
        &default_probe_grid(cs.dims.m),
        CHECK_REGULARITY_PATHS,
        dt,
        mix_seed(seed, SALT_CHECK, 4),
    ) {
        Ok(rep) => {
            report.row(None, "regularity-ratio-bound", rep.ratio_bound, 0.0);
            report.row(None, "regularity-deriv-bound", rep.deriv_bound, 0.0);
            report.verdicts.push(verdict(
                "regularity",
                "corrector growth ratio and derivative bounds over probe fan",
                rep.ratio_bound.max(rep.deriv_bound),
                "finite, with ratios bounded against 1 + |y|",
                rep.pass,
                format!(
                    "ratio {} dy {} dxy {}",
                    rep.pass_ratio, rep.pass_dy, rep.pass_dxy
                ),
            ));
        }
        Err(e) => report
            .verdicts
            .push(error_verdict("regularity", "corrector growth spot check", &e)),
    }

    if let Some(nu) = &nu {
        match check_equivalence(
            cs,
            &x0,
            &mu0,
            nu,
            cfg.poisson_budget,
            mix_seed(seed, SALT_CHECK, 5),
        ) {
            Ok(rep) => {
                report.row(None, "equivalence-residual", rep.relative_residual, rep.residual_se);
                report.verdicts.push(verdict(
                    "equivalence",
                    "relative Frobenius gap between the two diffusion forms",
                    rep.relative_residual,
                    "identities within 3 SE; residual within 3 SE + Euler allowance",
                    rep.pass,
                    format!(
                        "gram-vs-pair gap {:.3e}, cross-term gap {:.3e}",
                        rep.gram_vs_pair.max_gap,
                        rep.cross_terms.max_gap,
                    ),
                ));
            }
            Err(e) => report.verdicts.push(error_verdict(
                "equivalence",
                "diffusion-form equivalence certificate",
                &e,
            )),
        }
    }

    Ok(report)
}

/// Weak convergence of the slow marginal to the limiting equation: terminal
/// functional gaps and W2 distances along the epsilon grid, plus an
/// N-doubling propagation-of-chaos spot check.
pub fn cmd_converge(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.epsilons.len() < 2 {
        return Err(Error::Config(
            "converge needs at least two epsilons".into(),
        ));
    }
    let model = instantiate(&cfg.model)?;
    let cs = &model.coeffs;
    let n = cs.dims.n;
    let provider = build_limit_provider(&model, cfg)?;
    let mut report = RunReport::new("converge", cfg, None);

    let tasks: Vec<(usize, usize)> = (0..cfg.epsilons.len())
        .flat_map(|k| (0..cfg.seeds.len()).map(move |s| (k, s)))
        .collect();
    let fulls: Vec<DMatrix<f64>> = tasks
        .par_iter()
        .map(|&(k, s)| -> Result<DMatrix<f64>> {
            let eps = cfg.epsilons[k];
            let icfg = full_config(cfg, cs, eps, usize::MAX)?;
            let ens = simulate_full(cs, &icfg, &model.spec.initial, cfg.seeds[s])?;
            Ok(ens.terminal().expect("positive horizon saves a snapshot").x.clone())
        })
        .collect::<Result<Vec<_>>>()?;

    let limit_dt = cfg.t_end / (cfg.t_end / cfg.limit_dt).ceil();
    let limit_cfg = IntegratorConfig {
        epsilon: 1.0,
        dt: limit_dt,
        t_end: cfg.t_end,
        n_particles: cfg.n_particles,
        save_every: usize::MAX,
    };
    let limits: Vec<DMatrix<f64>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> Result<DMatrix<f64>> {
            let ens = simulate_limit(&provider, n, &limit_cfg, &model.spec.initial, seed)?;
            Ok(ens.terminal().expect("positive horizon saves a snapshot").x.clone())
        })
        .collect::<Result<Vec<_>>>()?;

    let cloud = |k: usize, s: usize| &fulls[k * cfg.seeds.len() + s];

    for &f in &cfg.test_functionals {
        let label = f.label();
        let mut series = Vec::with_capacity(cfg.epsilons.len());
        for (k, &eps) in cfg.epsilons.iter().enumerate() {
            let diffs: Vec<DVector<f64>> = (0..cfg.seeds.len())
                .map(|s| f.cloud_mean(cloud(k, s)) - f.cloud_mean(&limits[s]))
                .collect();
            let q = diffs[0].len();
            let mut center = DVector::zeros(q);
            let mut var = 0.0;
            for j in 0..q {
                let coord: Vec<f64> = diffs.iter().map(|d| d[j]).collect();
                center[j] = mean(&coord);
                let se = standard_error(&coord);
                var += se * se;
            }
            let (e, se) = (center.norm(), var.sqrt());
            report.row(Some(eps), &format!("weak-error[{label}]"), e, se);
            series.push((eps, e, se));
        }
        report.plots.push(PlotSeries {
            name: format!("weak-error-{label}"),
            columns: vec!["epsilon".into(), "error".into(), "std_err".into()],
            rows: series.iter().map(|&(e, v, s)| vec![e, v, s]).collect(),
        });
        report.verdicts.push(monotone_verdict(
            &format!("weak-error-monotone[{label}]"),
            "terminal functional gap to the limit equation",
            &series,
        ));
        report.verdicts.push(net_drop_verdict(
            &format!("weak-error-drop[{label}]"),
            "terminal functional gap to the limit equation",
            &series,
        ));
    }

    let method = if n == 1 {
        W2Method::Exact
    } else {
        W2Method::Sliced {
            projections: W2_PROJECTIONS,
            seed: mix_seed(cfg.seeds[0], SALT_GRID, 1),
        }
    };
    let mut series = Vec::with_capacity(cfg.epsilons.len());
    for (k, &eps) in cfg.epsilons.iter().enumerate() {
        let per_seed: Vec<f64> = (0..cfg.seeds.len())
            .map(|s| -> Result<f64> {
                let a = EmpiricalMeasure::from_samples(cloud(k, s).clone())?;
                let b = EmpiricalMeasure::from_samples(limits[s].clone())?;
                w2_distance(&a, &b, method)
            })
            .collect::<Result<Vec<_>>>()?;
        let (v, se) = (mean(&per_seed), standard_error(&per_seed));
        report.row(Some(eps), "w2-terminal", v, se);
        series.push((eps, v, se));
    }
    report.plots.push(PlotSeries {
        name: "w2-terminal".into(),
        columns: vec!["epsilon".into(), "w2".into(), "std_err".into()],
        rows: series.iter().map(|&(e, v, s)| vec![e, v, s]).collect(),
    });
    report.verdicts.push(monotone_verdict(
        "w2-monotone",
        "terminal W2 distance to the limit equation",
        &series,
    ));
    report.verdicts.push(net_drop_verdict(
        "w2-drop",
        "terminal W2 distance to the limit equation",
        &series,
    ));

    // Doubling N at the largest epsilon probes the particle-approximation
    // error; the limit theorems are stated after the particle limit, so this
    // is a diagnostic, not one of the proved claims.
    {
        let eps = cfg.epsilons[0];
        let dt = cfg.dt_rule.dt(cs, eps, cfg.t_end);
        let icfg = IntegratorConfig::new(
            eps,
            dt,
            cfg.t_end,
            2 * cfg.n_particles,
            usize::MAX,
            cs,
        )?;
        let doubled = simulate_full(
            cs,
            &icfg,
            &model.spec.initial,
            mix_seed(cfg.seeds[0], SALT_DOUBLING, 0),
        )?;
        let xd = &doubled.terminal().expect("positive horizon saves a snapshot").x;
        for &f in &cfg.test_functionals {
            let base = f.cloud_mean(cloud(0, 0));
            let base_se = f.cloud_se(cloud(0, 0));
            let dbl = f.cloud_mean(xd);
            let dbl_se = f.cloud_se(xd);
            let gap = (&base - &dbl).norm();
            let allow = 3.0
                * (base_se.norm_squared() + dbl_se.norm_squared()).sqrt();
            report.verdicts.push(verdict(
                &format!("n-doubling[{}]", f.label()),
                "terminal functional shift when N doubles at the largest epsilon",
                gap,
                &format!("<= {allow:.3e} (3 particle-level SE)"),
                gap <= allow,
                "propagation-of-chaos spot check; diagnostic only".into(),
            ));
        }
    }

    Ok(report)
}

fn validate_moment_order(p: u32) -> Result<()> {
    if p < 2 || p % 2 != 0 || p > 12 {
        return Err(Error::Config(format!(
            "moment order p must be an even integer in [2, 12], got {p}"
        )));
    }
    Ok(())
}

/// Pathwise fluctuation scaling: M(eps) = mean_i sup_t |integral of K|^p
/// along the saved grid, fitted against eps in log-log coordinates.
pub fn cmd_fluctuation(cfg: &ExperimentConfig, p: u32) -> Result<RunReport> {
    cfg.validate()?;
    validate_moment_order(p)?;
    if cfg.epsilons.len() < 3 {
        return Err(Error::Config(
            "fluctuation slope regression needs at least three epsilons".into(),
        ));
    }
    let model = instantiate(&cfg.model)?;
    let cs = &model.coeffs;
    let n = cs.dims.n;
    let mut report = RunReport::new("fluctuation", cfg, Some(p));

    let tasks: Vec<(usize, usize)> = (0..cfg.epsilons.len())
        .flat_map(|k| (0..cfg.seeds.len()).map(move |s| (k, s)))
        .collect();
    let integrand = |x: &DVector<f64>, mu: &MeasureSummary, y: &DVector<f64>| (cs.k)(x, mu, y);
    let stats: Vec<f64> = tasks
        .par_iter()
        .map(|&(k, s)| -> Result<f64> {
            let icfg = full_config(cfg, cs, cfg.epsilons[k], 1)?;
            let sups = run_sup_integral(
                cs,
                &icfg,
                &model.spec.initial,
                cfg.seeds[s],
                n,
                &integrand,
                None,
            )?;
            Ok(mean(
                &sups.iter().map(|v| v.powi(p as i32)).collect::<Vec<_>>(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let stat = |k: usize, s: usize| stats[k * cfg.seeds.len() + s];
    let mut series = Vec::with_capacity(cfg.epsilons.len());
    for (k, &eps) in cfg.epsilons.iter().enumerate() {
        let vals: Vec<f64> = (0..cfg.seeds.len()).map(|s| stat(k, s)).collect();
        let (v, se) = (mean(&vals), standard_error(&vals));
        report.row(Some(eps), &format!("sup-integral-p{p}"), v, se);
        series.push((eps, v, se));
    }
    report.plots.push(PlotSeries {
        name: format!("fluctuation-p{p}"),
        columns: vec!["epsilon".into(), "moment".into(), "std_err".into()],
        rows: series.iter().map(|&(e, v, s)| vec![e, v, s]).collect(),
    });

    if stats.iter().all(|&v| v == 0.0) {
        report.verdicts.push(verdict(
            &format!("fluctuation-slope-p{p}"),
            "log-log slope of the sup-integral moment vs epsilon",
            0.0,
            "degenerate: statistic identically zero",
            true,
            "centered coefficient vanishes; nothing to scale".into(),
        ));
        return Ok(report);
    }
    if stats.iter().any(|&v| v <= 0.0) {
        report.verdicts.push(verdict(
            &format!("fluctuation-slope-p{p}"),
            "log-log slope of the sup-integral moment vs epsilon",
            f64::NAN,
            "all replicate moments must be positive for the log fit",
            false,
            "some replicate moments vanished while others did not".into(),
        ));
        return Ok(report);
    }

    let per_seed: Vec<Vec<f64>> = (0..cfg.seeds.len())
        .map(|s| (0..cfg.epsilons.len()).map(|k| stat(k, s)).collect())
        .collect();
    let fit = seed_slope_fit(&format!("fluctuation-p{p}"), &cfg.epsilons, &per_seed);
    let half_p = p as f64 / 2.0;
    report.verdicts.push(slope_verdict(
        &format!("fluctuation-slope-p{p}"),
        "log-log slope of the sup-integral moment vs epsilon",
        &fit,
        0.8 * half_p,
        1.2 * half_p,
    ));
    report.slopes.push(fit);
    Ok(report)
}

struct MomentsOut {
    sup_fast: f64,
    sup_slow: f64,
    /// (h, mean window increment moment) on the dyadic grid.
    increments: Vec<(f64, f64)>,
}

fn run_moments_one(
    model: &Model,
    cfg: &ExperimentConfig,
    eps: f64,
    seed: u64,
    p: u32,
) -> Result<MomentsOut> {
    let cs = &model.coeffs;
    let dt0 = cfg.dt_rule.dt(cs, eps, cfg.t_end);
    // A power-of-two step count makes every dyadic lag h = T / 2^j an exact
    // whole number of steps.
    let steps = ((cfg.t_end / dt0).round() as usize).next_power_of_two();
    let dt = cfg.t_end / steps as f64;
    let icfg = IntegratorConfig::new(eps, dt, cfg.t_end, cfg.n_particles, 1, cs)?;
    let n_p = cfg.n_particles;
    let pi = p as i32;
    let mut xs: Vec<DMatrix<f64>> = Vec::with_capacity(steps + 1);
    let mut sup_fast = 0.0_f64;
    let mut sup_slow = 0.0_f64;
    simulate_full_observed(cs, &icfg, &model.spec.initial, seed, &mut |state| {
        let my = state
            .y
            .row_iter()
            .map(|r| r.norm().powi(pi))
            .sum::<f64>()
            / n_p as f64;
        let mx = state
            .x
            .row_iter()
            .map(|r| r.norm().powi(pi))
            .sum::<f64>()
            / n_p as f64;
        sup_fast = sup_fast.max(my);
        sup_slow = sup_slow.max(mx);
        xs.push(state.x.clone());
        Ok(())
    })?;

    let levels = (steps.trailing_zeros()).min(MAX_DYADIC_LEVELS);
    let mut increments = Vec::with_capacity(levels as usize);
    for j in 1..=levels {
        let h_steps = steps >> j;
        let h = dt * h_steps as f64;
        let windows = steps / h_steps;
        let mut acc = 0.0;
        for w in 0..windows {
            let a = &xs[w * h_steps];
            let b = &xs[(w + 1) * h_steps];
            for i in 0..n_p {
                acc += (b.row(i) - a.row(i)).norm().powi(pi);
            }
        }
        increments.push((h, acc / (windows * n_p) as f64));
    }
    Ok(MomentsOut {
        sup_fast,
        sup_slow,
        increments,
    })
}

/// Least-squares envelope S(h) ~ c1 h^(p/2) + c2 h^p / eps^(p/2) with
/// nonnegative coefficients; returns (c1, c2, relative residual).
fn envelope_fit(incr: &[(f64, f64)], eps: f64, p: u32) -> (f64, f64, f64) {
    let hp = p as f64 / 2.0;
    let phi1: Vec<f64> = incr.iter().map(|&(h, _)| h.powf(hp)).collect();
    let phi2: Vec<f64> = incr
        .iter()
        .map(|&(h, _)| h.powf(p as f64) / eps.powf(hp))
        .collect();
    let s: Vec<f64> = incr.iter().map(|&(_, v)| v).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (a11, a12, a22) = (dot(&phi1, &phi1), dot(&phi1, &phi2), dot(&phi2, &phi2));
    let (b1, b2) = (dot(&phi1, &s), dot(&phi2, &s));
    let det = a11 * a22 - a12 * a12;
    let (mut c1, mut c2) = if det.abs() > 1e-300 {
        ((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det)
    } else {
        (0.0, 0.0)
    };
    let sse = |c1: f64, c2: f64| {
        incr.iter()
            .enumerate()
            .map(|(i, &(_, v))| {
                let f = c1 * phi1[i] + c2 * phi2[i];
                (v - f) * (v - f)
            })
            .sum::<f64>()
    };
    if c1 < 0.0 || c2 < 0.0 {
        let only1 = if a11 > 0.0 { (b1 / a11).max(0.0) } else { 0.0 };
        let only2 = if a22 > 0.0 { (b2 / a22).max(0.0) } else { 0.0 };
        if sse(only1, 0.0) <= sse(0.0, only2) {
            (c1, c2) = (only1, 0.0);
        } else {
            (c1, c2) = (0.0, only2);
        }
    }
    let ss = dot(&s, &s);
    let rel = if ss > 0.0 {
        (sse(c1, c2) / ss).sqrt()
    } else {
        0.0
    };
    (c1, c2, rel)
}

/// Uniform fast-moment bound and slow increment envelope on a dyadic grid.
pub fn cmd_moments(cfg: &ExperimentConfig, p: u32) -> Result<RunReport> {
    cfg.validate()?;
    validate_moment_order(p)?;
    let model = instantiate(&cfg.model)?;
    let mut report = RunReport::new("moments", cfg, Some(p));

    let tasks: Vec<(usize, usize)> = (0..cfg.epsilons.len())
        .flat_map(|k| (0..cfg.seeds.len()).map(move |s| (k, s)))
        .collect();
    let outs: Vec<MomentsOut> = tasks
        .par_iter()
        .map(|&(k, s)| run_moments_one(&model, cfg, cfg.epsilons[k], cfg.seeds[s], p))
        .collect::<Result<Vec<_>>>()?;
    let out = |k: usize, s: usize| &outs[k * cfg.seeds.len() + s];

    let mut fast_stats = Vec::with_capacity(cfg.epsilons.len());
    for (k, &eps) in cfg.epsilons.iter().enumerate() {
        let fast: Vec<f64> = (0..cfg.seeds.len()).map(|s| out(k, s).sup_fast).collect();
        let slow: Vec<f64> = (0..cfg.seeds.len()).map(|s| out(k, s).sup_slow).collect();
        let (fv, fse) = (mean(&fast), standard_error(&fast));
        report.row(Some(eps), &format!("sup-fast-moment-p{p}"), fv, fse);
        report.row(
            Some(eps),
            &format!("sup-slow-moment-p{p}"),
            mean(&slow),
            standard_error(&slow),
        );
        fast_stats.push((eps, fv, fse));

        let n_levels = out(k, 0).increments.len();
        let mut plot_rows = Vec::with_capacity(n_levels);
        let mut incr_mean = Vec::with_capacity(n_levels);
        for j in 0..n_levels {
            let h = out(k, 0).increments[j].0;
            let vals: Vec<f64> = (0..cfg.seeds.len())
                .map(|s| out(k, s).increments[j].1)
                .collect();
            let (v, se) = (mean(&vals), standard_error(&vals));
            report.row(Some(eps), &format!("increment-p{p}-j{}", j + 1), v, se);
            plot_rows.push(vec![h, v, se]);
            incr_mean.push((h, v));
        }
        let (c1, c2, rel) = envelope_fit(&incr_mean, eps, p);
        report.row(Some(eps), &format!("envelope-c1-p{p}"), c1, 0.0);
        report.row(Some(eps), &format!("envelope-c2-p{p}"), c2, 0.0);
        report.row(Some(eps), &format!("envelope-relerr-p{p}"), rel, 0.0);
        report.plots.push(PlotSeries {
            name: format!("increments-p{p}-eps{eps}"),
            columns: vec!["h".into(), "moment".into(), "std_err".into()],
            rows: plot_rows,
        });

        // Small lags isolate the h^(p/2) term of the envelope: keep h below
        // eps / 4, where the burst term is provably subdominant.
        let small: Vec<usize> = (0..n_levels)
            .filter(|&j| out(k, 0).increments[j].0 <= eps / 4.0)
            .collect();
        let name = format!("increment-slope-p{p}[eps={eps}]");
        if small.len() >= 3 {
            let degenerate = (0..cfg.seeds.len())
                .any(|s| small.iter().any(|&j| out(k, s).increments[j].1 <= 0.0));
            if degenerate {
                let all_zero = (0..cfg.seeds.len())
                    .all(|s| small.iter().all(|&j| out(k, s).increments[j].1 == 0.0));
                report.verdicts.push(verdict(
                    &name,
                    "log-log slope of small-lag increment moments",
                    0.0,
                    "degenerate: increment moments vanish",
                    all_zero,
                    "deterministic slow coordinate; increments are exactly zero".into(),
                ));
            } else {
                let hs: Vec<f64> = small
                    .iter()
                    .map(|&j| out(k, 0).increments[j].0)
                    .collect();
                let per_seed: Vec<Vec<f64>> = (0..cfg.seeds.len())
                    .map(|s| small.iter().map(|&j| out(k, s).increments[j].1).collect())
                    .collect();
                let fit = seed_slope_fit(&name, &hs, &per_seed);
                let hp = p as f64 / 2.0;
                report.verdicts.push(slope_verdict(
                    &name,
                    "log-log slope of small-lag increment moments",
                    &fit,
                    0.8 * hp,
                    1.2 * hp,
                ));
                report.slopes.push(fit);
            }
        }
    }

    let max = fast_stats
        .iter()
        .cloned()
        .fold((0.0, 0.0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let min = fast_stats
        .iter()
        .cloned()
        .fold((0.0, f64::INFINITY, 0.0), |a, b| if b.1 < a.1 { b } else { a });
    let (ratio, ratio_se) = if min.1 > 0.0 {
        let r = max.1 / min.1;
        (
            r,
            r * ((max.2 / max.1).powi(2) + (min.2 / min.1).powi(2)).sqrt(),
        )
    } else if max.1 == 0.0 {
        (1.0, 0.0)
    } else {
        (f64::INFINITY, 0.0)
    };
    report.verdicts.push(verdict(
        &format!("fast-moment-uniform-p{p}"),
        "max/min ratio of sup-in-time fast moments across the epsilon grid",
        ratio,
        &format!("<= 1.2 + {:.3e} (2 SE)", 2.0 * ratio_se),
        ratio <= 1.2 + 2.0 * ratio_se,
        format!(
            "max {:.4e} at eps {}, min {:.4e} at eps {}",
            max.1, max.0, min.1, min.0
        ),
    ));
    Ok(report)
}

/// First-order averaging gap: sup over the saved grid of the running
/// integral of F minus its block-frozen invariant average, with block
/// length delta_factor * eps^(2/3).
pub fn cmd_averaging(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.epsilons.len() < 2 {
        return Err(Error::Config(
            "averaging needs at least two epsilons".into(),
        ));
    }
    let model = instantiate(&cfg.model)?;
    let cs = &model.coeffs;
    let obs = cfg.observable;
    let q = obs.dim(cs);
    let mut report = RunReport::new("averaging", cfg, None);

    let cache = match obs {
        Observable::Constant => None,
        _ => Some(observable_average_cache(&model, cfg, obs)?),
    };
    let fbar = move |x: &DVector<f64>, mu: &MeasureSummary| -> Result<DVector<f64>> {
        match &cache {
            // The constant's invariant average is itself; the gap vanishes
            // identically and exercises the zero baseline.
            None => Ok(DVector::from_element(1, 1.0)),
            Some(c) => Ok(c.eval(x[0], mu.mean[0])),
        }
    };
    let integrand = |x: &DVector<f64>, mu: &MeasureSummary, y: &DVector<f64>| obs.eval(cs, x, mu, y);

    let tasks: Vec<(usize, usize)> = (0..cfg.epsilons.len())
        .flat_map(|k| (0..cfg.seeds.len()).map(move |s| (k, s)))
        .collect();
    let stats: Vec<f64> = tasks
        .par_iter()
        .map(|&(k, s)| -> Result<f64> {
            let eps = cfg.epsilons[k];
            let delta = (cfg.delta_factor * eps.powf(2.0 / 3.0)).min(cfg.t_end);
            let icfg = full_config(cfg, cs, eps, 1)?;
            let sups = run_sup_integral(
                cs,
                &icfg,
                &model.spec.initial,
                cfg.seeds[s],
                q,
                &integrand,
                Some((delta, &fbar)),
            )?;
            Ok(mean(&sups))
        })
        .collect::<Result<Vec<_>>>()?;

    let stat = |k: usize, s: usize| stats[k * cfg.seeds.len() + s];
    let mut series = Vec::with_capacity(cfg.epsilons.len());
    for (k, &eps) in cfg.epsilons.iter().enumerate() {
        let vals: Vec<f64> = (0..cfg.seeds.len()).map(|s| stat(k, s)).collect();
        let (v, se) = (mean(&vals), standard_error(&vals));
        report.row(Some(eps), "sup-block-average-gap", v, se);
        series.push((eps, v, se));
    }
    report.plots.push(PlotSeries {
        name: format!("averaging-{}", obs.label()),
        columns: vec!["epsilon".into(), "gap".into(), "std_err".into()],
        rows: series.iter().map(|&(e, v, s)| vec![e, v, s]).collect(),
    });

    if series.iter().all(|&(_, v, _)| v == 0.0) {
        report.verdicts.push(verdict(
            "averaging-monotone",
            "sup block-average gap along the epsilon grid",
            0.0,
            "degenerate: gap identically zero",
            true,
            "observable equals its invariant average".into(),
        ));
        return Ok(report);
    }
    let mono = monotone_verdict(
        "averaging-monotone",
        "sup block-average gap along the epsilon grid",
        &series,
    );
    let net = net_drop_verdict(
        "averaging-drop",
        "sup block-average gap along the epsilon grid",
        &series,
    );
    report.verdicts.push(mono);
    report.verdicts.push(net);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dimensions, Family, InitialLaw, LawSpec};

    fn spec(family: Family, params: serde_json::Value) -> ModelSpec {
        ModelSpec {
            family,
            params,
            dims: Dimensions { n: 1, m: 1, d: 1 },
            initial: InitialLaw {
                x: LawSpec::point(vec![1.0]),
                y: LawSpec::gaussian(vec![0.0], vec![1.0]),
            },
        }
    }

    fn base_config(family: Family, params: serde_json::Value) -> ExperimentConfig {
        ExperimentConfig {
            model: spec(family, params),
            epsilons: vec![0.4, 0.2, 0.1],
            n_particles: 128,
            t_end: 0.5,
            dt_rule: DtRule::default(),
            seeds: vec![11, 12, 13],
            test_functionals: default_functionals(),
            output_dir: PathBuf::from("unused"),
            observable: Observable::Square,
            delta_factor: 1.0,
            limit_dt: 0.01,
            assumption_budget: 2_000,
            invariant_budget: 60_000,
            poisson_budget: 1_600,
            grid_points: 3,
            grid_invariant_budget: 30_000,
            grid_poisson_budget: 768,
            pilot_particles: 128,
        }
    }

    #[test]
    fn config_validation_rejects_bad_grids() {
        let mut cfg = base_config(Family::LinearOu, serde_json::json!({}));
        assert!(cfg.validate().is_ok());
        cfg.epsilons = vec![0.1, 0.2];
        assert!(cfg.validate().is_err());
        cfg.epsilons = vec![1.2, 0.5];
        assert!(cfg.validate().is_err());
        cfg.epsilons = vec![1.0, 0.5];
        assert!(cfg.validate().is_ok());
        cfg.seeds = vec![7, 7];
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![];
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![1, 2];
        cfg.test_functionals = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_hash_ignores_output_dir_only() {
        let a = base_config(Family::LinearOu, serde_json::json!({}));
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.content_hash("converge", None), b.content_hash("converge", None));
        let mut c = a.clone();
        c.n_particles += 1;
        assert_ne!(a.content_hash("converge", None), c.content_hash("converge", None));
        assert_ne!(
            a.content_hash("fluctuation", Some(2)),
            a.content_hash("fluctuation", Some(4))
        );
    }

    #[test]
    fn dt_rule_divides_horizon() {
        let model = instantiate(&spec(Family::LinearOu, serde_json::json!({}))).unwrap();
        let rule = DtRule::default();
        for &(eps, t) in &[(0.3, 0.7), (0.05, 1.0), (0.917, 2.3)] {
            let dt = rule.dt(&model.coeffs, eps, t);
            let steps = t / dt;
            assert!((steps - steps.round()).abs() < 1e-9, "dt must divide t_end");
            assert!(dt <= stability_cap(eps, &model.coeffs) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn report_files_are_byte_identical() {
        let cfg = base_config(Family::LinearOu, serde_json::json!({}));
        let mut report = RunReport::new("converge", &cfg, None);
        report.row(Some(0.1), "weak-error[square]", 0.0123, 0.002);
        report.row(None, "centering-residual", 1e-4, 2e-4);
        report.plots.push(PlotSeries {
            name: "weak-error-square".into(),
            columns: vec!["epsilon".into(), "error".into()],
            rows: vec![vec![0.1, 0.0123]],
        });
        report.verdicts.push(verdict(
            "weak-error-drop[square]",
            "gap",
            0.5,
            "> 0.1",
            true,
            "ok".into(),
        ));
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        write_report(&report, &d1).unwrap();
        write_report(&report, &d2).unwrap();
        for name in ["results.csv", "summary.json", "plotdata/weak-error-square.csv"] {
            let a = std::fs::read(d1.join(name)).unwrap();
            let b = std::fs::read(d2.join(name)).unwrap();
            assert_eq!(a, b, "{name} must be byte-identical across reruns");
        }
    }

    #[test]
    fn check_battery_passes_linear_and_flags_shifted_k() {
        let mut cfg = base_config(Family::LinearOu, serde_json::json!({}));
        cfg.seeds = vec![5];
        let report = cmd_check(&cfg).unwrap();
        assert!(
            report.all_pass(),
            "default linear model must pass the battery: {:?}",
            report
                .verdicts
                .iter()
                .filter(|v| !v.pass)
                .map(|v| (&v.name, &v.detail))
                .collect::<Vec<_>>()
        );
        let names: Vec<&str> = report.verdicts.iter().map(|v| v.name.as_str()).collect();
        for expected in ["assumptions", "centering", "regularity", "equivalence"] {
            assert!(
                names.iter().any(|n| n.starts_with(expected)),
                "battery must report {expected}"
            );
        }

        let mut shifted = base_config(Family::LinearOu, serde_json::json!({ "k_shift": 1.0 }));
        shifted.seeds = vec![5];
        let report = cmd_check(&shifted).unwrap();
        let centering = report
            .verdicts
            .iter()
            .find(|v| v.name == "centering")
            .expect("centering verdict present");
        assert!(!centering.pass, "shifted K must fail centering");
        assert!(
            report.verdicts.iter().any(|v| v.name == "regularity"),
            "battery must keep reporting after a failure"
        );
        assert!(!report.all_pass());
    }

    #[test]
    fn converge_zero_k_matches_exact_limit() {
        let mut cfg = base_config(Family::ZeroK, serde_json::json!({}));
        cfg.epsilons = vec![0.5, 0.25];
        cfg.n_particles = 256;
        cfg.seeds = vec![21, 22];
        cfg.test_functionals = vec![Functional::Id, Functional::Square];
        let report = cmd_converge(&cfg).unwrap();
        // With K = 0 the full slow equation already is the limit equation,
        // so the weak error is pure discretization + Monte Carlo noise.
        for r in report.rows.iter().filter(|r| r.statistic.starts_with("weak-error")) {
            assert!(
                r.value <= 3.0 * r.std_err + 0.05,
                "{} at eps {:?} should be near zero, got {} (se {})",
                r.statistic,
                r.epsilon,
                r.value,
                r.std_err
            );
        }
        assert!(
            report.rows.iter().any(|r| r.statistic == "w2-terminal"),
            "terminal W2 rows present"
        );
        for v in report.verdicts.iter().filter(|v| v.name.starts_with("n-doubling")) {
            assert!(v.pass, "N-doubling diagnostic failed: {}", v.detail);
        }
    }

    #[test]
    fn fluctuation_slope_tracks_p_over_2_and_zero_k_degenerates() {
        let cfg = base_config(Family::LinearOu, serde_json::json!({}));
        let report = cmd_fluctuation(&cfg, 2).unwrap();
        let fit = &report.slopes[0];
        assert!(
            fit.slope > 0.55 && fit.slope < 1.45,
            "p=2 slope should sit near 1, got {} (CI [{}, {}])",
            fit.slope,
            fit.ci_low,
            fit.ci_high
        );
        let rows: Vec<&StatRow> = report
            .rows
            .iter()
            .filter(|r| r.statistic == "sup-integral-p2")
            .collect();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.value > 0.0));
        assert!(
            rows[0].value > rows[2].value,
            "moment must shrink as epsilon does"
        );

        let mut zk = base_config(Family::ZeroK, serde_json::json!({}));
        zk.n_particles = 32;
        zk.seeds = vec![3, 4];
        let report = cmd_fluctuation(&zk, 2).unwrap();
        let v = &report.verdicts[0];
        assert!(v.pass && v.threshold.contains("degenerate"));
        assert!(report.rows.iter().all(|r| r.value == 0.0));
    }

    #[test]
    fn moments_uniform_fast_bound_and_increment_slope() {
        let mut cfg = base_config(Family::LinearOu, serde_json::json!({}));
        cfg.model.initial.y = LawSpec::gaussian(vec![0.0], vec![0.1]);
        cfg.epsilons = vec![0.2, 0.05];
        cfg.seeds = vec![31, 32];
        let report = cmd_moments(&cfg, 4).unwrap();
        let uni = report
            .verdicts
            .iter()
            .find(|v| v.name == "fast-moment-uniform-p4")
            .expect("uniformity verdict present");
        assert!(uni.pass, "fast moments must be uniform in eps: {}", uni.detail);

        let report = cmd_moments(&cfg, 2).unwrap();
        let slope = report
            .verdicts
            .iter()
            .find(|v| v.name.starts_with("increment-slope-p2"))
            .expect("small-lag slope verdict present");
        assert!(
            slope.value > 0.7 && slope.value < 1.3,
            "diffusive small-lag scaling, got slope {}",
            slope.value
        );
    }

    #[test]
    fn moments_frozen_slow_coordinate_has_zero_increments() {
        let params = serde_json::json!({
            "sigma0": 0.0, "lambda": 0.0, "theta": 0.0
        });
        let mut cfg = base_config(Family::ZeroK, params);
        cfg.epsilons = vec![0.2];
        cfg.seeds = vec![41, 42];
        cfg.n_particles = 32;
        let report = cmd_moments(&cfg, 2).unwrap();
        for r in report.rows.iter().filter(|r| r.statistic.starts_with("increment-p2")) {
            assert_eq!(r.value, 0.0, "frozen slow coordinate moves: {}", r.statistic);
        }
        for r in report.rows.iter().filter(|r| r.statistic.starts_with("envelope-c")) {
            assert_eq!(r.value, 0.0);
        }
        if let Some(v) = report
            .verdicts
            .iter()
            .find(|v| v.name.starts_with("increment-slope"))
        {
            assert!(v.pass && v.threshold.contains("degenerate"));
        }
    }

    #[test]
    fn averaging_gap_decreases_and_constant_vanishes() {
        let cfg = base_config(Family::LinearOu, serde_json::json!({}));
        let report = cmd_averaging(&cfg).unwrap();
        let rows: Vec<&StatRow> = report
            .rows
            .iter()
            .filter(|r| r.statistic == "sup-block-average-gap")
            .collect();
        assert_eq!(rows.len(), 3);
        assert!(
            rows[0].value > rows[2].value,
            "gap must shrink with epsilon: {} vs {}",
            rows[0].value,
            rows[2].value
        );
        let mono = report
            .verdicts
            .iter()
            .find(|v| v.name == "averaging-monotone")
            .unwrap();
        assert!(mono.pass, "{}", mono.detail);

        let mut constant = base_config(Family::LinearOu, serde_json::json!({}));
        constant.observable = Observable::Constant;
        constant.epsilons = vec![0.4, 0.2];
        constant.seeds = vec![1, 2];
        constant.n_particles = 16;
        let report = cmd_averaging(&constant).unwrap();
        assert!(report.rows.iter().all(|r| r.value == 0.0));
        assert!(report.verdicts[0].pass);
        assert!(report.verdicts[0].threshold.contains("degenerate"));
    }

    #[test]
    fn averaging_of_k_matches_plain_sup_integral() {
        // With F = K the invariant average is zero up to Monte Carlo error,
        // so the block-frozen gap must reproduce the plain sup integral up
        // to t_end times that error.
        let mut cfg = base_config(Family::LinearOu, serde_json::json!({}));
        cfg.observable = Observable::K;
        cfg.epsilons = vec![0.4, 0.2];
        cfg.seeds = vec![51, 52];
        cfg.n_particles = 64;
        let report = cmd_averaging(&cfg).unwrap();

        let model = instantiate(&cfg.model).unwrap();
        let cs = &model.coeffs;
        for &eps in &cfg.epsilons {
            let mut manual = Vec::new();
            for &seed in &cfg.seeds {
                let icfg = full_config(&cfg, cs, eps, 1).unwrap();
                let sups = run_sup_integral(
                    cs,
                    &icfg,
                    &model.spec.initial,
                    seed,
                    1,
                    &|x: &DVector<f64>, mu: &MeasureSummary, y: &DVector<f64>| (cs.k)(x, mu, y),
                    None,
                )
                .unwrap();
                manual.push(mean(&sups));
            }
            let row = report
                .rows
                .iter()
                .find(|r| r.epsilon == Some(eps))
                .unwrap();
            let gap = (row.value - mean(&manual)).abs();
            assert!(
                gap < 0.05,
                "eps {eps}: frozen-average statistic {} vs plain {} (gap {gap})",
                row.value,
                mean(&manual)
            );
        }
    }
}
