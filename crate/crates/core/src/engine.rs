//! Seeded Euler-Maruyama integrators: the full two-scale interacting
//! particle system, the frozen fast equation (plain, drift-corrected, and
//! first-order tangent flow), and the limiting McKean-Vlasov equation.
//!
//! Every integrator is deterministic in (seed, config, coefficients); noise
//! is addressed by (stream, step) so results do not depend on worker count.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::min_symmetric_eigenvalue;
use crate::measure::{EmpiricalMeasure, MeasureSummary};
use crate::model::{CoefficientSet, InitialLaw, MeasureDependence};
use crate::noise::{NoiseStream, StreamId, StreamPurpose};
use crate::stats::exp_decay_fit;

/// Largest stable step for the stiff fast line: the dt/epsilon drift factor
/// stays at most 0.1 against both the dissipativity rate and the declared
/// fast Lipschitz bound.
pub fn stability_cap(epsilon: f64, cs: &CoefficientSet) -> f64 {
    let lf = if cs.lip_fast > 0.0 { cs.lip_fast } else { cs.gamma };
    epsilon * (0.1 / cs.gamma).min(0.1 / lf)
}

/// Integration plan for one ensemble run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegratorConfig {
    pub epsilon: f64,
    pub dt: f64,
    pub t_end: f64,
    pub n_particles: usize,
    pub save_every: usize,
}

impl IntegratorConfig {
    pub fn new(
        epsilon: f64,
        dt: f64,
        t_end: f64,
        n_particles: usize,
        save_every: usize,
        cs: &CoefficientSet,
    ) -> Result<Self> {
        let cfg = IntegratorConfig {
            epsilon,
            dt,
            t_end,
            n_particles,
            save_every,
        };
        cfg.validate(cs)?;
        Ok(cfg)
    }

    /// Config with dt at the stability cap, shrunk so the horizon is an
    /// exact whole number of steps.
    pub fn at_cap(
        epsilon: f64,
        t_end: f64,
        n_particles: usize,
        save_every: usize,
        cs: &CoefficientSet,
    ) -> Result<Self> {
        let cap = stability_cap(epsilon, cs);
        let dt = if t_end > 0.0 {
            t_end / (t_end / cap).ceil()
        } else {
            cap
        };
        Self::new(epsilon, dt, t_end, n_particles, save_every, cs)
    }

    pub fn validate(&self, cs: &CoefficientSet) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidInput(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidInput(format!(
                "dt must be positive and finite, got {}",
                self.dt
            )));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::InvalidInput(format!(
                "t_end must be nonnegative, got {}",
                self.t_end
            )));
        }
        if self.n_particles < 1 {
            return Err(Error::InvalidInput("n_particles must be >= 1".into()));
        }
        if self.save_every < 1 {
            return Err(Error::InvalidInput("save_every must be >= 1".into()));
        }
        let cap = stability_cap(self.epsilon, cs);
        if self.dt > cap * (1.0 + 1e-12) {
            return Err(Error::StepSizeCap {
                dt: self.dt,
                cap,
                epsilon: self.epsilon,
            });
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        if self.t_end <= 0.0 {
            0
        } else {
            (self.t_end / self.dt - 1e-9).ceil() as u64
        }
    }
}

/// Positions of all particles at one time, with the empirical law of the
/// slow block.
#[derive(Debug, Clone)]
pub struct ParticleSystemState {
    pub t: f64,
    /// N x n slow positions.
    pub x: DMatrix<f64>,
    /// N x m fast positions (zero columns in limit-equation runs).
    pub y: DMatrix<f64>,
    pub mu: EmpiricalMeasure,
    pub mu_summary: MeasureSummary,
}

impl ParticleSystemState {
    /// Builds the state and its empirical law; non-finite coordinates abort
    /// with the offending particle and time.
    pub fn new(t: f64, x: DMatrix<f64>, y: DMatrix<f64>, keep_cloud: bool) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "slow block has {} rows, fast block {}",
                x.nrows(),
                y.nrows()
            )));
        }
        for i in 0..x.nrows() {
            let bad_x = x.row(i).iter().any(|v| !v.is_finite());
            let bad_y = y.row(i).iter().any(|v| !v.is_finite());
            if bad_x || bad_y {
                return Err(Error::BlowUp {
                    particle: i,
                    time: t,
                    detail: format!(
                        "non-finite {} coordinates",
                        if bad_x { "slow" } else { "fast" }
                    ),
                });
            }
        }
        let mu = EmpiricalMeasure::from_samples(x.clone())?;
        let mu_summary = mu.summary(keep_cloud);
        Ok(ParticleSystemState {
            t,
            x,
            y,
            mu,
            mu_summary,
        })
    }
}

/// One saved frame of an ensemble run.
#[derive(Debug, Clone)]
pub struct EnsembleSnapshot {
    pub t: f64,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

/// Saved trajectory of an ensemble run.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub times: Vec<f64>,
    pub snapshots: Vec<EnsembleSnapshot>,
}

/// Provenance sidecar written next to every exported CSV.
#[derive(Debug, Clone, Serialize)]
pub struct RunSidecar {
    pub kind: String,
    pub config: IntegratorConfig,
    pub master_seed: u64,
    pub model_hash: String,
}

impl PathEnsemble {
    /// Long-format CSV: one row per (time, particle), coordinates spread
    /// over x0.. and y0.. columns.
    pub fn to_csv_string(&self) -> String {
        let (n, m) = self
            .snapshots
            .first()
            .map(|s| (s.x.ncols(), s.y.ncols()))
            .unwrap_or((0, 0));
        let mut out = String::from("time,particle");
        for j in 0..n {
            out.push_str(&format!(",x{j}"));
        }
        for j in 0..m {
            out.push_str(&format!(",y{j}"));
        }
        out.push('\n');
        for snap in &self.snapshots {
            for i in 0..snap.x.nrows() {
                out.push_str(&format!("{},{}", snap.t, i));
                for j in 0..n {
                    out.push_str(&format!(",{}", snap.x[(i, j)]));
                }
                for j in 0..m {
                    out.push_str(&format!(",{}", snap.y[(i, j)]));
                }
                out.push('\n');
            }
        }
        out
    }

    /// Writes `<path>` as CSV and `<stem>.meta.json` beside it.
    pub fn export_csv(&self, path: &Path, sidecar: &RunSidecar) -> Result<()> {
        let write = |p: &Path, bytes: &[u8]| -> Result<()> {
            let mut f = std::fs::File::create(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            f.write_all(bytes)
                .map_err(|e| Error::io(p.display().to_string(), e))
        };
        write(path, self.to_csv_string().as_bytes())?;
        let meta = path.with_extension("meta.json");
        let body = serde_json::to_string_pretty(sidecar)?;
        write(&meta, body.as_bytes())
    }

    pub fn terminal(&self) -> Option<&EnsembleSnapshot> {
        self.snapshots.last()
    }
}

const PAR_PARTICLE_MIN: usize = 64;

fn row_vec(mat: &DMatrix<f64>, i: usize) -> DVector<f64> {
    DVector::from_fn(mat.ncols(), |j, _| mat[(i, j)])
}

fn set_row(mat: &mut DMatrix<f64>, i: usize, v: &DVector<f64>) {
    for j in 0..v.len() {
        mat[(i, j)] = v[j];
    }
}

/// One Euler step of the full two-scale system. The same Brownian increment
/// drives the slow and fast lines of each particle; every coefficient reads
/// the pre-step empirical measure.
pub fn step_full(
    state: &ParticleSystemState,
    cs: &CoefficientSet,
    cfg: &IntegratorConfig,
    drive: &[NoiseStream],
    step: u64,
) -> Result<ParticleSystemState> {
    let n_p = state.x.nrows();
    debug_assert_eq!(drive.len(), n_p);
    let d = cs.dims.d;
    let dt = cfg.dt;
    let sdt = dt.sqrt();
    let rse = 1.0 / cfg.epsilon.sqrt();
    let dt_eps = dt / cfg.epsilon;
    let dt_se = dt * rse;
    let mu = &state.mu_summary;

    let advance = |i: usize| -> (DVector<f64>, DVector<f64>) {
        let xi = row_vec(&state.x, i);
        let yi = row_vec(&state.y, i);
        let dw = sdt * drive[i].standard_normals(step, d);
        let xn = &xi
            + dt * (cs.b)(&xi, mu, &yi)
            + dt_se * (cs.k)(&xi, mu, &yi)
            + (cs.sigma)(&xi, mu, &yi) * &dw;
        let yn = &yi
            + dt_eps * (cs.f)(&xi, mu, &yi)
            + dt_se * (cs.h)(&xi, mu, &yi)
            + rse * ((cs.g)(&xi, mu, &yi) * &dw);
        (xn, yn)
    };

    let rows: Vec<(DVector<f64>, DVector<f64>)> = if n_p >= PAR_PARTICLE_MIN {
        (0..n_p).into_par_iter().map(advance).collect()
    } else {
        (0..n_p).map(advance).collect()
    };

    let mut x = DMatrix::zeros(n_p, state.x.ncols());
    let mut y = DMatrix::zeros(n_p, state.y.ncols());
    for (i, (xn, yn)) in rows.iter().enumerate() {
        set_row(&mut x, i, xn);
        set_row(&mut y, i, yn);
    }
    let t_next = (step + 1) as f64 * dt;
    ParticleSystemState::new(
        t_next,
        x,
        y,
        cs.measure_dependence == MeasureDependence::FullCloud,
    )
}

fn initial_state(
    cs_dims: (usize, usize),
    n_particles: usize,
    initial: &InitialLaw,
    seed: u64,
    keep_cloud: bool,
) -> Result<ParticleSystemState> {
    let (n, m) = cs_dims;
    let mut x = DMatrix::zeros(n_particles, n);
    let mut y = DMatrix::zeros(n_particles, m);
    for i in 0..n_particles {
        set_row(&mut x, i, &initial.sample_x(seed, i as u32));
        if m > 0 {
            set_row(&mut y, i, &initial.sample_y(seed, i as u32));
        }
    }
    ParticleSystemState::new(0.0, x, y, keep_cloud)
}

/// Runs the full system, invoking `observe` on the initial state, every
/// `save_every`-th step, and the final state.
pub fn simulate_full_observed(
    cs: &CoefficientSet,
    cfg: &IntegratorConfig,
    initial: &InitialLaw,
    seed: u64,
    observe: &mut dyn FnMut(&ParticleSystemState) -> Result<()>,
) -> Result<()> {
    cfg.validate(cs)?;
    let keep_cloud = cs.measure_dependence == MeasureDependence::FullCloud;
    let mut state = initial_state(
        (cs.dims.n, cs.dims.m),
        cfg.n_particles,
        initial,
        seed,
        keep_cloud,
    )?;
    observe(&state)?;
    let drive: Vec<NoiseStream> = (0..cfg.n_particles)
        .map(|i| NoiseStream::new(seed, StreamId::new(StreamPurpose::Drive, i as u32)))
        .collect();
    let steps = cfg.steps();
    for k in 0..steps {
        state = step_full(&state, cs, cfg, &drive, k)?;
        if (k + 1) % cfg.save_every as u64 == 0 || k + 1 == steps {
            observe(&state)?;
        }
    }
    Ok(())
}

/// As `simulate_full_observed`, collecting every saved frame.
pub fn simulate_full(
    cs: &CoefficientSet,
    cfg: &IntegratorConfig,
    initial: &InitialLaw,
    seed: u64,
) -> Result<PathEnsemble> {
    let mut times = Vec::new();
    let mut snapshots = Vec::new();
    simulate_full_observed(cs, cfg, initial, seed, &mut |state| {
        times.push(state.t);
        snapshots.push(EnsembleSnapshot {
            t: state.t,
            x: state.x.clone(),
            y: state.y.clone(),
        });
        Ok(())
    })?;
    Ok(PathEnsemble { times, snapshots })
}

/// Fast-equation path with x and mu frozen.
#[derive(Debug, Clone)]
pub struct FastPath {
    pub times: Vec<f64>,
    /// (steps+1) x m; row k is the state at times[k].
    pub states: DMatrix<f64>,
}

impl FastPath {
    pub fn state_at(&self, k: usize) -> DVector<f64> {
        row_vec(&self.states, k)
    }

    pub fn terminal(&self) -> DVector<f64> {
        self.state_at(self.times.len() - 1)
    }
}

fn check_frozen_dt(cs: &CoefficientSet, dt: f64) -> Result<()> {
    let cap = 0.1 / cs.gamma;
    if !(dt > 0.0) || dt > cap * (1.0 + 1e-12) {
        return Err(Error::StepSizeCap {
            dt,
            cap,
            epsilon: 1.0,
        });
    }
    Ok(())
}

fn frozen_path_impl(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    y0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    seed: u64,
    sqrt_eps: f64,
) -> Result<FastPath> {
    check_frozen_dt(cs, dt)?;
    if horizon < 0.0 || !horizon.is_finite() {
        return Err(Error::InvalidInput(format!("bad horizon {horizon}")));
    }
    let steps = if horizon > 0.0 {
        (horizon / dt - 1e-9).ceil() as u64
    } else {
        0
    };
    let m = cs.dims.m;
    let d = cs.dims.d;
    let sdt = dt.sqrt();
    let stream = NoiseStream::new(seed, StreamId::new(StreamPurpose::Frozen, 0));
    let mut states = DMatrix::zeros(steps as usize + 1, m);
    let mut times = Vec::with_capacity(steps as usize + 1);
    let mut y = y0.clone();
    set_row(&mut states, 0, &y);
    times.push(0.0);
    for k in 0..steps {
        let dw = sdt * stream.standard_normals(k, d);
        let mut drift = (cs.f)(x, mu, &y);
        if sqrt_eps != 0.0 {
            drift += sqrt_eps * (cs.h)(x, mu, &y);
        }
        y = &y + dt * drift + (cs.g)(x, mu, &y) * dw;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                particle: 0,
                time: (k + 1) as f64 * dt,
                detail: "frozen fast path left the finite domain".into(),
            });
        }
        times.push((k + 1) as f64 * dt);
        set_row(&mut states, k as usize + 1, &y);
    }
    Ok(FastPath { times, states })
}

/// Euler path of the frozen fast equation dY = f dt + g dW at fixed (x, mu).
pub fn simulate_frozen(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    y0: &DVector<f64>,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<FastPath> {
    frozen_path_impl(cs, x, mu, y0, horizon, dt, seed, 0.0)
}

/// Frozen path with the scale-corrected drift f + sqrt(epsilon) h. At
/// epsilon = 0 (or h = 0) this reproduces `simulate_frozen` exactly under
/// the same seed.
pub fn simulate_frozen_corrected(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    y0: &DVector<f64>,
    epsilon: f64,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<FastPath> {
    if epsilon < 0.0 {
        return Err(Error::InvalidInput(format!("bad epsilon {epsilon}")));
    }
    frozen_path_impl(cs, x, mu, y0, horizon, dt, seed, epsilon.sqrt())
}

/// A frozen base path together with the directional tangent flow along it.
#[derive(Debug, Clone)]
pub struct TangentPath {
    pub times: Vec<f64>,
    pub base: DMatrix<f64>,
    pub flow: DMatrix<f64>,
}

/// Euler path of the first-order variational equation along a frozen base
/// path sharing the same noise. Jacobian-vector products use central finite
/// differences with step 1e-5 (1 + |y|); linear coefficients make them
/// exact.
pub fn simulate_tangent_flow(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    y0: &DVector<f64>,
    direction: &DVector<f64>,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<TangentPath> {
    check_frozen_dt(cs, dt)?;
    if direction.len() != cs.dims.m {
        return Err(Error::DimensionMismatch(format!(
            "direction has length {}, fast dimension is {}",
            direction.len(),
            cs.dims.m
        )));
    }
    let steps = if horizon > 0.0 {
        (horizon / dt - 1e-9).ceil() as u64
    } else {
        0
    };
    let (m, d) = (cs.dims.m, cs.dims.d);
    let sdt = dt.sqrt();
    let stream = NoiseStream::new(seed, StreamId::new(StreamPurpose::Frozen, 0));
    let mut base = DMatrix::zeros(steps as usize + 1, m);
    let mut flow = DMatrix::zeros(steps as usize + 1, m);
    let mut times = Vec::with_capacity(steps as usize + 1);
    let mut y = y0.clone();
    let mut v = direction.clone();
    set_row(&mut base, 0, &y);
    set_row(&mut flow, 0, &v);
    times.push(0.0);
    for k in 0..steps {
        let dw = sdt * stream.standard_normals(k, d);
        let vnorm = v.norm();
        let (jf_v, jg_v_dw) = if vnorm > 0.0 {
            let delta = 1e-5 * (1.0 + y.norm());
            let unit = &v / vnorm;
            let yp = &y + delta * &unit;
            let ym = &y - delta * &unit;
            let jf = ((cs.f)(x, mu, &yp) - (cs.f)(x, mu, &ym)) * (vnorm / (2.0 * delta));
            let jg = ((cs.g)(x, mu, &yp) - (cs.g)(x, mu, &ym)) * (vnorm / (2.0 * delta));
            (jf, jg * &dw)
        } else {
            (DVector::zeros(m), DVector::zeros(m))
        };
        v = &v + dt * jf_v + jg_v_dw;
        y = &y + dt * (cs.f)(x, mu, &y) + (cs.g)(x, mu, &y) * &dw;
        if y.iter().chain(v.iter()).any(|u| !u.is_finite()) {
            return Err(Error::BlowUp {
                particle: 0,
                time: (k + 1) as f64 * dt,
                detail: "tangent flow left the finite domain".into(),
            });
        }
        times.push((k + 1) as f64 * dt);
        set_row(&mut base, k as usize + 1, &y);
        set_row(&mut flow, k as usize + 1, &v);
    }
    Ok(TangentPath { times, base, flow })
}

/// Limiting drift and diffusion at one (x, law) point: (Theta, Sigma-tilde).
pub type LimitCoeffs = std::sync::Arc<
    dyn Fn(&DVector<f64>, &MeasureSummary) -> Result<(DVector<f64>, DMatrix<f64>)> + Send + Sync,
>;

/// Interacting-particle Euler scheme for the limiting equation
/// dX = Theta dt + Sigma-tilde dW with fresh n-dimensional noise streams.
pub fn simulate_limit(
    provider: &LimitCoeffs,
    n_dim: usize,
    cfg: &IntegratorConfig,
    initial: &InitialLaw,
    seed: u64,
) -> Result<PathEnsemble> {
    if cfg.n_particles < 1 || !(cfg.dt > 0.0) || cfg.t_end < 0.0 || cfg.save_every < 1 {
        return Err(Error::InvalidInput("invalid limit-equation config".into()));
    }
    let n_p = cfg.n_particles;
    let dt = cfg.dt;
    let sdt = dt.sqrt();
    let steps = cfg.steps();
    let mut x = DMatrix::zeros(n_p, n_dim);
    for i in 0..n_p {
        set_row(&mut x, i, &initial.sample_x(seed, i as u32));
    }
    let streams: Vec<NoiseStream> = (0..n_p)
        .map(|i| NoiseStream::new(seed, StreamId::new(StreamPurpose::Limit, i as u32)))
        .collect();
    let empty_y = DMatrix::<f64>::zeros(n_p, 0);
    let mut times = vec![0.0];
    let mut snapshots = vec![EnsembleSnapshot {
        t: 0.0,
        x: x.clone(),
        y: empty_y.clone(),
    }];
    for k in 0..steps {
        let mu = EmpiricalMeasure::from_samples(x.clone())?.summary(false);
        let advance = |i: usize| -> Result<DVector<f64>> {
            let xi = row_vec(&x, i);
            let (theta, sigma) = provider(&xi, &mu)?;
            if theta.len() != n_dim || sigma.shape() != (n_dim, n_dim) {
                return Err(Error::Provider(format!(
                    "provider returned shapes {}x1 and {:?}, expected {n_dim}",
                    theta.len(),
                    sigma.shape()
                )));
            }
            let min_eig = min_symmetric_eigenvalue(&sigma).map_err(|_| {
                Error::Provider(format!(
                    "limit diffusion not symmetric at x = {:?}, law mean = {:?}",
                    xi.as_slice(),
                    mu.mean.as_slice()
                ))
            })?;
            if min_eig < -1e-9 {
                return Err(Error::Provider(format!(
                    "limit diffusion not PSD (min eigenvalue {min_eig:.3e}) at x = {:?}, law mean = {:?}",
                    xi.as_slice(),
                    mu.mean.as_slice()
                )));
            }
            let dw = sdt * streams[i].standard_normals(k, n_dim);
            Ok(xi + dt * theta + sigma * dw)
        };
        let rows: Vec<Result<DVector<f64>>> = if n_p >= PAR_PARTICLE_MIN {
            (0..n_p).into_par_iter().map(advance).collect()
        } else {
            (0..n_p).map(advance).collect()
        };
        let t_next = (k + 1) as f64 * dt;
        for (i, r) in rows.into_iter().enumerate() {
            let xn = r?;
            if xn.iter().any(|v| !v.is_finite()) {
                return Err(Error::BlowUp {
                    particle: i,
                    time: t_next,
                    detail: "limit path left the finite domain".into(),
                });
            }
            set_row(&mut x, i, &xn);
        }
        if (k + 1) % cfg.save_every as u64 == 0 || k + 1 == steps {
            times.push(t_next);
            snapshots.push(EnsembleSnapshot {
                t: t_next,
                x: x.clone(),
                y: empty_y.clone(),
            });
        }
    }
    Ok(PathEnsemble { times, snapshots })
}

/// Fitted exponential decay of |Y1 - Y2|^2 for two frozen paths driven by
/// the same noise: the gap behaves like exp(-rate * t). The rate is an
/// observed quantity; no sharper constant is claimed.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ContractionFit {
    pub rate: f64,
    pub log_intercept: f64,
    pub points_used: usize,
}

pub fn coupled_contraction_rate(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    y1: &DVector<f64>,
    y2: &DVector<f64>,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<ContractionFit> {
    check_frozen_dt(cs, dt)?;
    let steps = (horizon / dt - 1e-9).ceil() as u64;
    if steps < 4 {
        return Err(Error::InvalidInput(
            "contraction fit needs at least 4 steps".into(),
        ));
    }
    let d = cs.dims.d;
    let sdt = dt.sqrt();
    let stream = NoiseStream::new(seed, StreamId::new(StreamPurpose::Frozen, 0));
    let mut a = y1.clone();
    let mut b = y2.clone();
    let mut times = Vec::with_capacity(steps as usize + 1);
    let mut gaps = Vec::with_capacity(steps as usize + 1);
    times.push(0.0);
    gaps.push((&a - &b).norm_squared());
    for k in 0..steps {
        let dw = sdt * stream.standard_normals(k, d);
        let an = &a + dt * (cs.f)(x, mu, &a) + (cs.g)(x, mu, &a) * &dw;
        let bn = &b + dt * (cs.f)(x, mu, &b) + (cs.g)(x, mu, &b) * &dw;
        a = an;
        b = bn;
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                particle: 0,
                time: (k + 1) as f64 * dt,
                detail: "coupled pair left the finite domain".into(),
            });
        }
        times.push((k + 1) as f64 * dt);
        gaps.push((&a - &b).norm_squared());
    }
    let (slope, log_intercept, points_used) = exp_decay_fit(&times, &gaps, 1e-280);
    if !slope.is_finite() {
        return Err(Error::InvalidInput(
            "coupled gap collapsed too fast to fit a rate".into(),
        ));
    }
    Ok(ContractionFit {
        rate: -slope,
        log_intercept,
        points_used,
    })
}
