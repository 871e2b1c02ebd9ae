//! Monte-Carlo solution of the frozen Poisson equation via the time-integral
//! representation: invariant-measure sampling, centering verification, the
//! corrector and its derivatives, residual checks and regularity spot
//! checks. The measure argument stays frozen throughout; no derivatives in
//! the measure are computed.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{coupled_contraction_rate, simulate_tangent_flow};
use crate::error::{Error, Result};
use crate::measure::{w2_distance, EmpiricalMeasure, MeasureSummary, W2Method};
use crate::model::{CoefficientSet, ASSUMPTION_SLACK};
use crate::noise::{NoiseStream, StreamId, StreamPurpose};
use crate::stats::{batch_means, linear_fit, mean, pairwise_sum, sample_variance};

/// Relative tolerance on the first-half/second-half distance of the
/// invariant sampler.
pub const ERGODIC_REL_TOL: f64 = 0.1;
/// Absolute tolerance driving the corrector tail truncation.
pub const PHI_TAIL_TOL: f64 = 1e-3;
/// Relative step for first finite-difference derivatives.
pub const FD_STEP_FIRST: f64 = 1e-3;
/// Relative step for second (mixed and repeated) finite differences.
pub const FD_STEP_SECOND: f64 = 3e-2;

const INVARIANT_DT_FACTOR: f64 = 0.02;
/// Relative tail admitted on derivative integrals, which decay with the
/// tangent flow even where the value integrand sits at the noise floor.
const DERIV_TAIL_TOL: f64 = 1e-3;
const T_CAP_FACTOR: f64 = 150.0;
const MIN_BLOCKS: usize = 6;
const SALT_INVARIANT: u64 = 0x11;
const SALT_PHI: u64 = 0x22;
const SALT_CONTRACTION: u64 = 0x33;

/// Deterministic per-purpose, per-path master seeds (splitmix-style hash).
pub(crate) fn mix_seed(seed: u64, salt: u64, index: u64) -> u64 {
    let mut z = seed
        ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Thinned long-run sample of the frozen fast equation's invariant law.
#[derive(Debug, Clone)]
pub struct InvariantMeasureEstimate {
    pub samples: EmpiricalMeasure,
    /// Time discarded before sampling.
    pub burn_in: f64,
    /// Steps between kept samples.
    pub thinning: usize,
    /// Worst per-coordinate half-vs-half transport distance, relative to
    /// 1 + coordinate spread.
    pub ergodic_gap: f64,
    /// Decay rate fitted to the squared gap of a synchronously coupled pair.
    pub fitted_beta: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Raw sixth absolute moment E |y|^6.
    pub sixth_moment: f64,
}

/// Long-run frozen-equation sampler. The burn-in is at least 10 over the
/// fitted contraction rate; construction fails if the first and second half
/// of the kept samples disagree beyond `ERGODIC_REL_TOL`.
pub fn sample_invariant(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    budget: usize,
    seed: u64,
) -> Result<InvariantMeasureEstimate> {
    let m = cs.dims.m;
    let dt = INVARIANT_DT_FACTOR / cs.gamma;

    let spread = 2.0 / (m as f64).sqrt();
    let fit = coupled_contraction_rate(
        cs,
        x,
        mu,
        &DVector::from_element(m, spread),
        &DVector::from_element(m, -spread),
        8.0 / cs.gamma,
        dt,
        mix_seed(seed, SALT_CONTRACTION, 0),
    )?;
    if !(fit.rate > 0.0) {
        return Err(Error::InvalidInput(format!(
            "coupled frozen paths do not contract (fitted rate {:.3e})",
            fit.rate
        )));
    }
    let burn_in = 10.0 / fit.rate;
    let burn_steps = (burn_in / dt).ceil() as usize;
    let thinning = ((0.5 / (cs.gamma * dt)).round() as usize).max(1);
    if budget < burn_steps + 100 * thinning {
        return Err(Error::InvalidInput(format!(
            "budget {budget} too small: burn-in needs {burn_steps} steps plus \
             100 thinned samples ({} steps)",
            100 * thinning
        )));
    }
    let keep_steps = budget - burn_steps;
    let kept_n = (keep_steps / thinning).min(500_000);

    let d = cs.dims.d;
    let sdt = dt.sqrt();
    let stream = NoiseStream::new(
        mix_seed(seed, SALT_INVARIANT, 0),
        StreamId::new(StreamPurpose::Frozen, 0),
    );
    let mut y = DVector::zeros(m);
    let mut kept = DMatrix::zeros(kept_n, m);
    let mut row = 0usize;
    let total = burn_steps + kept_n * thinning;
    for k in 0..total {
        let dw = sdt * stream.standard_normals(k as u64, d);
        y = &y + dt * (cs.f)(x, mu, &y) + (cs.g)(x, mu, &y) * dw;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                particle: 0,
                time: (k + 1) as f64 * dt,
                detail: "invariant sampler path left the finite domain".into(),
            });
        }
        if k + 1 > burn_steps {
            let kept_idx = k + 1 - burn_steps;
            if kept_idx % thinning == 0 && row < kept_n {
                for j in 0..m {
                    kept[(row, j)] = y[j];
                }
                row += 1;
            }
        }
    }
    debug_assert_eq!(row, kept_n);

    let mean_vec = DVector::from_fn(m, |j, _| {
        pairwise_sum(&(0..kept_n).map(|i| kept[(i, j)]).collect::<Vec<_>>()) / kept_n as f64
    });
    let covariance = DMatrix::from_fn(m, m, |a, b| {
        let vals: Vec<f64> = (0..kept_n)
            .map(|i| (kept[(i, a)] - mean_vec[a]) * (kept[(i, b)] - mean_vec[b]))
            .collect();
        pairwise_sum(&vals) / (kept_n - 1) as f64
    });
    let sixth = {
        let vals: Vec<f64> = (0..kept_n)
            .map(|i| {
                let r2: f64 = (0..m).map(|j| kept[(i, j)] * kept[(i, j)]).sum();
                r2.powi(3)
            })
            .collect();
        pairwise_sum(&vals) / kept_n as f64
    };

    let half = kept_n / 2;
    let mut ergodic_gap = 0.0f64;
    for j in 0..m {
        let first = DMatrix::from_fn(half, 1, |i, _| kept[(i, j)]);
        let second = DMatrix::from_fn(half, 1, |i, _| kept[(half + i, j)]);
        let w2 = w2_distance(
            &EmpiricalMeasure::from_samples(first)?,
            &EmpiricalMeasure::from_samples(second)?,
            W2Method::Exact,
        )?;
        let scale = 1.0 + covariance[(j, j)].max(0.0).sqrt();
        ergodic_gap = ergodic_gap.max(w2 / scale);
    }
    if ergodic_gap > ERGODIC_REL_TOL {
        return Err(Error::Ergodicity {
            gap: ergodic_gap,
            tol: ERGODIC_REL_TOL,
            budget,
        });
    }

    Ok(InvariantMeasureEstimate {
        samples: EmpiricalMeasure::from_samples(kept)?,
        burn_in,
        thinning,
        ergodic_gap,
        fitted_beta: fit.rate,
        mean: mean_vec,
        covariance,
        sixth_moment: sixth,
    })
}

/// Result of the centering test: per-entry absolute sample average of K
/// under the invariant estimate, with autocorrelation-aware errors.
#[derive(Debug, Clone, Serialize)]
pub struct CenteringCheck {
    pub residual: Vec<f64>,
    pub std_err: Vec<f64>,
    pub pass: bool,
}

/// Averages K over the invariant sample; passes iff every entry is within
/// three standard errors of zero.
pub fn check_centering(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    nu_hat: &InvariantMeasureEstimate,
) -> CenteringCheck {
    let n = cs.dims.n;
    let pts = nu_hat.samples.points();
    let count = pts.nrows();
    let mut per_entry: Vec<Vec<f64>> = vec![Vec::with_capacity(count); n];
    for i in 0..count {
        let y = DVector::from_fn(pts.ncols(), |j, _| pts[(i, j)]);
        let k = (cs.k)(x, mu, &y);
        for j in 0..n {
            per_entry[j].push(k[j]);
        }
    }
    let mut residual = Vec::with_capacity(n);
    let mut std_err = Vec::with_capacity(n);
    for vals in &per_entry {
        let (m, se) = batch_means(vals, 16);
        residual.push(m.abs());
        std_err.push(se);
    }
    let pass = residual
        .iter()
        .zip(&std_err)
        .all(|(r, se)| *r <= 3.0 * se + 1e-12);
    CenteringCheck {
        residual,
        std_err,
        pass,
    }
}

/// Corrector value and derivative estimates at one (x, mu, y) point.
#[derive(Debug, Clone)]
pub struct PoissonEval {
    pub phi: DVector<f64>,
    pub phi_se: DVector<f64>,
    /// d phi_i / d x_j, n x n.
    pub d_phi_dx: Option<DMatrix<f64>>,
    pub d_phi_dx_se: Option<DMatrix<f64>>,
    /// d phi_i / d y_k, n x m.
    pub d_phi_dy: Option<DMatrix<f64>>,
    pub d_phi_dy_se: Option<DMatrix<f64>>,
    /// Slice k holds d2 phi_i / dx_j dy_k as an n x n matrix.
    pub d2_phi_dxdy: Option<Vec<DMatrix<f64>>>,
    pub d2_phi_dxdy_se: Option<Vec<DMatrix<f64>>>,
    /// Slice i holds d2 phi_i / dy_k dy_l as an m x m matrix.
    pub d2_phi_dyy: Option<Vec<DMatrix<f64>>>,
    pub d2_phi_dyy_se: Option<Vec<DMatrix<f64>>>,
    /// Step-halving estimate of the finite-difference bias (per entry).
    pub fd_bias: f64,
    /// Integrator step used along the frozen paths.
    pub dt: f64,
    pub truncation_t: f64,
    pub fitted_beta: f64,
    /// Bound on the dropped tail of the time integral.
    pub tail_bound: f64,
    pub paths: usize,
}

fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl PoissonEval {
    pub fn to_json(&self) -> serde_json::Value {
        let slices = |v: &Option<Vec<DMatrix<f64>>>| {
            v.as_ref()
                .map(|s| s.iter().map(mat_rows).collect::<Vec<_>>())
        };
        serde_json::json!({
            "phi": self.phi.as_slice(),
            "phi_se": self.phi_se.as_slice(),
            "d_phi_dx": self.d_phi_dx.as_ref().map(mat_rows),
            "d_phi_dx_se": self.d_phi_dx_se.as_ref().map(mat_rows),
            "d_phi_dy": self.d_phi_dy.as_ref().map(mat_rows),
            "d_phi_dy_se": self.d_phi_dy_se.as_ref().map(mat_rows),
            "d2_phi_dxdy": slices(&self.d2_phi_dxdy),
            "d2_phi_dxdy_se": slices(&self.d2_phi_dxdy_se),
            "d2_phi_dyy": slices(&self.d2_phi_dyy),
            "d2_phi_dyy_se": slices(&self.d2_phi_dyy_se),
            "fd_bias": self.fd_bias,
            "dt": self.dt,
            "truncation_t": self.truncation_t,
            "fitted_beta": self.fitted_beta,
            "tail_bound": self.tail_bound,
            "paths": self.paths,
        })
    }
}

enum Horizon {
    /// Grow until the fitted envelope drops below PHI_TAIL_TOL / 10.
    Adaptive,
    Fixed(f64),
}

struct KIntegrals {
    /// Per-path trapezoidal integrals of K along frozen trajectories.
    per_path: Vec<DVector<f64>>,
    truncation_t: f64,
    fitted_beta: Option<f64>,
    tail_bound: f64,
}

impl KIntegrals {
    fn mean_and_se(&self, n: usize) -> (DVector<f64>, DVector<f64>) {
        let m_paths = self.per_path.len();
        let mut mv = DVector::zeros(n);
        let mut se = DVector::zeros(n);
        for j in 0..n {
            let col: Vec<f64> = self.per_path.iter().map(|v| v[j]).collect();
            mv[j] = mean(&col);
            se[j] = (sample_variance(&col) / m_paths as f64).sqrt();
        }
        (mv, se)
    }
}

struct PathCursor {
    y: DVector<f64>,
    k_prev: DVector<f64>,
    integral: DVector<f64>,
}

/// Advances frozen paths block by block, accumulating trapezoidal integrals
/// of K and per-block integrand statistics used for the tail envelope.
fn integrate_k(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    y: &DVector<f64>,
    m_paths: usize,
    dt: f64,
    seed: u64,
    horizon: Horizon,
) -> Result<KIntegrals> {
    if m_paths < 2 {
        return Err(Error::InvalidInput("need at least 2 paths".into()));
    }
    if !(dt > 0.0) || dt > 0.1 / cs.gamma * (1.0 + 1e-12) {
        return Err(Error::StepSizeCap {
            dt,
            cap: 0.1 / cs.gamma,
            epsilon: 1.0,
        });
    }
    let (n, d) = (cs.dims.n, cs.dims.d);
    let sdt = dt.sqrt();
    let block_steps = ((0.5 / (cs.gamma * dt)).round() as usize).max(4);
    let t_cap = T_CAP_FACTOR / cs.gamma;
    let fixed_steps = match horizon {
        Horizon::Adaptive => None,
        Horizon::Fixed(t) => {
            if !(t > 0.0) {
                return Err(Error::InvalidInput(format!("bad horizon {t}")));
            }
            Some((t / dt - 1e-9).ceil() as usize)
        }
    };

    let k0 = (cs.k)(x, mu, y);
    let streams: Vec<NoiseStream> = (0..m_paths)
        .map(|p| {
            NoiseStream::new(
                mix_seed(seed, SALT_PHI, p as u64),
                StreamId::new(StreamPurpose::Frozen, 0),
            )
        })
        .collect();
    let mut cursors: Vec<PathCursor> = (0..m_paths)
        .map(|_| PathCursor {
            y: y.clone(),
            k_prev: k0.clone(),
            integral: DVector::zeros(n),
        })
        .collect();

    let envelope_scale = 1.0 + y.norm().powi(3);
    let mut steps_done = 0usize;
    let mut block_t_mid: Vec<f64> = Vec::new();
    let mut block_mag: Vec<f64> = Vec::new();
    let mut quiet_blocks = 0usize;
    let mut fitted: Option<(f64, f64)> = None; // (decay rate, log amplitude)

    loop {
        let remaining = fixed_steps.map(|t| t - steps_done);
        if remaining == Some(0) {
            break;
        }
        let this_block = match remaining {
            Some(r) => r.min(block_steps),
            None => block_steps,
        };

        let advanced: Vec<Result<(PathCursor, DVector<f64>)>> = cursors
            .par_iter()
            .enumerate()
            .map(|(p, cur)| {
                let mut yv = cur.y.clone();
                let mut kp = cur.k_prev.clone();
                let mut integral = cur.integral.clone();
                let mut ksum = DVector::zeros(n);
                for i in 0..this_block {
                    let step = (steps_done + i) as u64;
                    let dw = sdt * streams[p].standard_normals(step, d);
                    yv = &yv + dt * (cs.f)(x, mu, &yv) + (cs.g)(x, mu, &yv) * dw;
                    if yv.iter().any(|v| !v.is_finite()) {
                        return Err(Error::BlowUp {
                            particle: p,
                            time: (step + 1) as f64 * dt,
                            detail: "corrector path left the finite domain".into(),
                        });
                    }
                    let kn = (cs.k)(x, mu, &yv);
                    integral += (dt * 0.5) * (&kp + &kn);
                    ksum += &kn;
                    kp = kn;
                }
                Ok((
                    PathCursor {
                        y: yv,
                        k_prev: kp,
                        integral,
                    },
                    ksum / this_block as f64,
                ))
            })
            .collect();

        let mut block_means: Vec<DVector<f64>> = Vec::with_capacity(m_paths);
        let mut next: Vec<PathCursor> = Vec::with_capacity(m_paths);
        for r in advanced {
            let (cur, bm) = r?;
            next.push(cur);
            block_means.push(bm);
        }
        cursors = next;

        let t_mid = (steps_done as f64 + 0.5 * this_block as f64) * dt;
        steps_done += this_block;
        let t_now = steps_done as f64 * dt;

        let mut signal = false;
        let mut sq = 0.0;
        for j in 0..n {
            let col: Vec<f64> = block_means.iter().map(|v| v[j]).collect();
            let mj = mean(&col);
            let sej = (sample_variance(&col) / m_paths as f64).sqrt();
            sq += mj * mj;
            if mj.abs() > 3.0 * sej && mj.abs() > 1e-300 {
                signal = true;
            }
        }
        let mag = sq.sqrt();
        if signal {
            quiet_blocks = 0;
            block_t_mid.push(t_mid);
            block_mag.push(mag.ln());
        } else {
            quiet_blocks += 1;
        }

        if block_t_mid.len() >= 3 {
            let (slope, intercept, _) = linear_fit(&block_t_mid, &block_mag);
            // fits flattened by late noise blocks are discarded; genuine
            // decay of the frozen fast process cannot be slower than this
            if slope < -0.25 * cs.gamma {
                fitted = Some((-slope, intercept));
            } else {
                fitted = None;
            }
        }

        if fixed_steps.is_none() {
            if let Some((rate, log_c)) = fitted {
                let envelope = log_c.exp() * (-rate * t_now).exp() * envelope_scale;
                if envelope < PHI_TAIL_TOL / 10.0 {
                    return Ok(KIntegrals {
                        per_path: cursors.into_iter().map(|c| c.integral).collect(),
                        truncation_t: t_now,
                        fitted_beta: Some(2.0 * rate),
                        tail_bound: envelope / rate,
                    });
                }
            } else if quiet_blocks >= MIN_BLOCKS {
                // integrand indistinguishable from zero for a full
                // relaxation window and no usable envelope fit: the tail
                // is bounded by the noise level over one relaxation window
                let se_scale: f64 = (0..n)
                    .map(|j| {
                        let col: Vec<f64> = block_means.iter().map(|v| v[j]).collect();
                        sample_variance(&col) / m_paths as f64
                    })
                    .sum::<f64>()
                    .sqrt();
                return Ok(KIntegrals {
                    per_path: cursors.into_iter().map(|c| c.integral).collect(),
                    truncation_t: t_now,
                    fitted_beta: None,
                    tail_bound: 3.0 * se_scale * 2.0 / cs.gamma,
                });
            }
            if t_now >= t_cap {
                let last = mag;
                return Err(Error::TailDivergence {
                    cap: t_cap,
                    detail: format!(
                        "integrand magnitude {last:.3e} at t = {t_now:.2}; fitted decay {:?}",
                        fitted.map(|f| f.0)
                    ),
                });
            }
        }
    }

    // fixed horizon: report the envelope fit if one emerged
    let (fitted_beta, tail_bound) = match fitted {
        Some((rate, log_c)) => {
            let t_now = steps_done as f64 * dt;
            (
                Some(2.0 * rate),
                log_c.exp() * (-rate * t_now).exp() * envelope_scale / rate,
            )
        }
        None => (None, 0.0),
    };
    Ok(KIntegrals {
        per_path: cursors.into_iter().map(|c| c.integral).collect(),
        truncation_t: steps_done as f64 * dt,
        fitted_beta,
        tail_bound,
    })
}

fn eval_from_integrals(
    cs: &CoefficientSet,
    ki: KIntegrals,
    m_paths: usize,
    dt: f64,
) -> PoissonEval {
    let (phi, phi_se) = ki.mean_and_se(cs.dims.n);
    PoissonEval {
        phi,
        phi_se,
        d_phi_dx: None,
        d_phi_dx_se: None,
        d_phi_dy: None,
        d_phi_dy_se: None,
        d2_phi_dxdy: None,
        d2_phi_dxdy_se: None,
        d2_phi_dyy: None,
        d2_phi_dyy_se: None,
        fd_bias: 0.0,
        dt,
        truncation_t: ki.truncation_t,
        fitted_beta: ki.fitted_beta.unwrap_or(2.0 * cs.gamma),
        tail_bound: ki.tail_bound,
        paths: m_paths,
    }
}

/// Corrector value by the truncated time integral of the expected K along
/// frozen paths. Requires centering at this (x, mu): an uncentered K makes
/// the integral diverge, which surfaces as a tail-divergence error.
pub fn phi(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    y: &DVector<f64>,
    m_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<PoissonEval> {
    let ki = integrate_k(cs, x, mu, y, m_paths, dt, seed, Horizon::Adaptive)?;
    Ok(eval_from_integrals(cs, ki, m_paths, dt))
}

/// Corrector value truncated at a caller-chosen horizon (same streams as
/// `phi`, so two horizons share every increment on the common window).
pub fn phi_fixed_horizon(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    y: &DVector<f64>,
    horizon: f64,
    m_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<PoissonEval> {
    let ki = integrate_k(cs, x, mu, y, m_paths, dt, seed, Horizon::Fixed(horizon))?;
    Ok(eval_from_integrals(cs, ki, m_paths, dt))
}

/// Derivative estimation route.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeMode {
    /// Central finite differences of the corrector with common random
    /// numbers across all perturbed evaluations.
    Fd,
    /// First-order tangent flows for the y-derivative only.
    Tangent,
}

pub(crate) struct FdParts {
    pub(crate) dx: bool,
    pub(crate) dy: bool,
    pub(crate) dxdy: bool,
    pub(crate) dyy: bool,
    pub(crate) bias: bool,
}

fn per_path_combine(
    terms: &[(&KIntegrals, f64)],
    m_paths: usize,
    n: usize,
) -> (DVector<f64>, DVector<f64>) {
    let mut mv = DVector::zeros(n);
    let mut se = DVector::zeros(n);
    for j in 0..n {
        let col: Vec<f64> = (0..m_paths)
            .map(|p| terms.iter().map(|(ki, w)| w * ki.per_path[p][j]).sum())
            .collect();
        mv[j] = mean(&col);
        se[j] = (sample_variance(&col) / m_paths as f64).sqrt();
    }
    (mv, se)
}

pub(crate) fn phi_derivatives_impl(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    y: &DVector<f64>,
    mode: DerivativeMode,
    m_paths: usize,
    dt: f64,
    seed: u64,
    parts: FdParts,
) -> Result<PoissonEval> {
    let (n, m) = (cs.dims.n, cs.dims.m);
    let base = integrate_k(cs, x, mu, y, m_paths, dt, seed, Horizon::Adaptive)?;
    let t_star = base
        .truncation_t
        .max((1.0 / DERIV_TAIL_TOL).ln() / cs.gamma);
    // derivative integrands decay with the tangent flow, not the envelope
    // of K itself, so when the floor extends the horizon the value is
    // recomputed there too: one horizon for phi and all its derivatives
    let mut eval = if t_star > base.truncation_t * (1.0 + 1e-12) {
        let base_tail = base.tail_bound;
        let base_beta = base.fitted_beta;
        let fixed = integrate_k(cs, x, mu, y, m_paths, dt, seed, Horizon::Fixed(t_star))?;
        let mut e = eval_from_integrals(cs, fixed, m_paths, dt);
        if !(e.tail_bound > 0.0 && e.tail_bound < base_tail) {
            e.tail_bound = base_tail;
        }
        if let Some(bb) = base_beta {
            e.fitted_beta = bb;
        }
        e
    } else {
        eval_from_integrals(cs, base, m_paths, dt)
    };
    eval.truncation_t = t_star;

    if mode == DerivativeMode::Tangent {
        // d_y phi column by column from the variational flow; the base path
        // and the flow share each path's noise stream.
        let mut dmat = DMatrix::zeros(n, m);
        let mut dse = DMatrix::zeros(n, m);
        for k in 0..m {
            let dir = DVector::from_fn(m, |i, _| if i == k { 1.0 } else { 0.0 });
            let cols: Vec<Result<DVector<f64>>> = (0..m_paths)
                .into_par_iter()
                .map(|p| {
                    let out = simulate_tangent_flow(
                        cs,
                        x,
                        mu,
                        y,
                        &dir,
                        t_star,
                        dt,
                        mix_seed(seed, SALT_PHI, p as u64),
                    )?;
                    let steps = out.times.len();
                    let mut integral = DVector::zeros(n);
                    let mut prev: Option<DVector<f64>> = None;
                    for s in 0..steps {
                        let yv = DVector::from_fn(m, |j, _| out.base[(s, j)]);
                        let v = DVector::from_fn(m, |j, _| out.flow[(s, j)]);
                        let vn = v.norm();
                        let dk = if vn > 0.0 {
                            let delta = 1e-5 * (1.0 + yv.norm());
                            let u = &v / vn;
                            ((cs.k)(x, mu, &(&yv + delta * &u))
                                - (cs.k)(x, mu, &(&yv - delta * &u)))
                                * (vn / (2.0 * delta))
                        } else {
                            DVector::zeros(n)
                        };
                        if let Some(pv) = prev {
                            integral += (dt * 0.5) * (&pv + &dk);
                        }
                        prev = Some(dk);
                    }
                    Ok(integral)
                })
                .collect();
            let mut per_path = Vec::with_capacity(m_paths);
            for c in cols {
                per_path.push(c?);
            }
            for i in 0..n {
                let col: Vec<f64> = per_path.iter().map(|v| v[i]).collect();
                dmat[(i, k)] = mean(&col);
                dse[(i, k)] = (sample_variance(&col) / m_paths as f64).sqrt();
            }
        }
        eval.d_phi_dy = Some(dmat);
        eval.d_phi_dy_se = Some(dse);
        return Ok(eval);
    }

    let run = |xq: &DVector<f64>, yq: &DVector<f64>| -> Result<KIntegrals> {
        integrate_k(cs, xq, mu, yq, m_paths, dt, seed, Horizon::Fixed(t_star))
    };
    let unit = |len: usize, k: usize| DVector::from_fn(len, |i, _| f64::from(i == k));
    let d1 = FD_STEP_FIRST * (1.0 + y.norm());
    let d2 = FD_STEP_SECOND * (1.0 + y.norm());
    let mut fd_bias = 0.0f64;

    let first_diff = |plus: &KIntegrals, minus: &KIntegrals, delta: f64| {
        per_path_combine(&[(plus, 1.0 / (2.0 * delta)), (minus, -1.0 / (2.0 * delta))], m_paths, n)
    };

    if parts.dy {
        let mut dmat = DMatrix::zeros(n, m);
        let mut dse = DMatrix::zeros(n, m);
        for k in 0..m {
            let e = unit(m, k);
            let plus = run(x, &(y + d1 * &e))?;
            let minus = run(x, &(y - d1 * &e))?;
            let (col, col_se) = first_diff(&plus, &minus, d1);
            for i in 0..n {
                dmat[(i, k)] = col[i];
                dse[(i, k)] = col_se[i];
            }
            if parts.bias && k == 0 {
                let h = d1 / 2.0;
                let p2 = run(x, &(y + h * &e))?;
                let m2 = run(x, &(y - h * &e))?;
                let (col2, _) = first_diff(&p2, &m2, h);
                fd_bias = fd_bias.max((&col - &col2).amax() * 4.0 / 3.0);
            }
        }
        eval.d_phi_dy = Some(dmat);
        eval.d_phi_dy_se = Some(dse);
    }

    if parts.dx {
        let mut dmat = DMatrix::zeros(n, n);
        let mut dse = DMatrix::zeros(n, n);
        for j in 0..n {
            let e = unit(n, j);
            let plus = run(&(x + d1 * &e), y)?;
            let minus = run(&(x - d1 * &e), y)?;
            let (col, col_se) = first_diff(&plus, &minus, d1);
            for i in 0..n {
                dmat[(i, j)] = col[i];
                dse[(i, j)] = col_se[i];
            }
            if parts.bias && j == 0 {
                let h = d1 / 2.0;
                let p2 = run(&(x + h * &e), y)?;
                let m2 = run(&(x - h * &e), y)?;
                let (col2, _) = first_diff(&p2, &m2, h);
                fd_bias = fd_bias.max((&col - &col2).amax() * 4.0 / 3.0);
            }
        }
        eval.d_phi_dx = Some(dmat);
        eval.d_phi_dx_se = Some(dse);
    }

    if parts.dxdy {
        let mut slices = vec![DMatrix::zeros(n, n); m];
        let mut slices_se = vec![DMatrix::zeros(n, n); m];
        for k in 0..m {
            let ey = unit(m, k);
            for j in 0..n {
                let ex = unit(n, j);
                let pp = run(&(x + d2 * &ex), &(y + d2 * &ey))?;
                let pm = run(&(x + d2 * &ex), &(y - d2 * &ey))?;
                let mp = run(&(x - d2 * &ex), &(y + d2 * &ey))?;
                let mm = run(&(x - d2 * &ex), &(y - d2 * &ey))?;
                let w = 1.0 / (4.0 * d2 * d2);
                let (v, v_se) = per_path_combine(
                    &[(&pp, w), (&pm, -w), (&mp, -w), (&mm, w)],
                    m_paths,
                    n,
                );
                for i in 0..n {
                    slices[k][(i, j)] = v[i];
                    slices_se[k][(i, j)] = v_se[i];
                }
                if parts.bias && j == 0 && k == 0 {
                    let h = d2 / 2.0;
                    let w2 = 1.0 / (4.0 * h * h);
                    let pp2 = run(&(x + h * &ex), &(y + h * &ey))?;
                    let pm2 = run(&(x + h * &ex), &(y - h * &ey))?;
                    let mp2 = run(&(x - h * &ex), &(y + h * &ey))?;
                    let mm2 = run(&(x - h * &ex), &(y - h * &ey))?;
                    let (v2, _) = per_path_combine(
                        &[(&pp2, w2), (&pm2, -w2), (&mp2, -w2), (&mm2, w2)],
                        m_paths,
                        n,
                    );
                    fd_bias = fd_bias.max((&v - &v2).amax() * 4.0 / 3.0);
                }
            }
        }
        eval.d2_phi_dxdy = Some(slices);
        eval.d2_phi_dxdy_se = Some(slices_se);
    }

    if parts.dyy {
        // repeated second differences reuse the adaptive base as the center
        let center = run(x, y)?;
        let mut slices = vec![DMatrix::zeros(m, m); n];
        let mut slices_se = vec![DMatrix::zeros(m, m); n];
        for k in 0..m {
            let ek = unit(m, k);
            let plus = run(x, &(y + d2 * &ek))?;
            let minus = run(x, &(y - d2 * &ek))?;
            let w = 1.0 / (d2 * d2);
            let (v, v_se) =
                per_path_combine(&[(&plus, w), (&center, -2.0 * w), (&minus, w)], m_paths, n);
            for i in 0..n {
                slices[i][(k, k)] = v[i];
                slices_se[i][(k, k)] = v_se[i];
            }
            for l in (k + 1)..m {
                let el = unit(m, l);
                let pp = run(x, &(y + d2 * (&ek + &el)))?;
                let pm = run(x, &(y + d2 * (&ek - &el)))?;
                let mp = run(x, &(y - d2 * (&ek - &el)))?;
                let mm = run(x, &(y - d2 * (&ek + &el)))?;
                let w4 = 1.0 / (4.0 * d2 * d2);
                let (v, v_se) = per_path_combine(
                    &[(&pp, w4), (&pm, -w4), (&mp, -w4), (&mm, w4)],
                    m_paths,
                    n,
                );
                for i in 0..n {
                    slices[i][(k, l)] = v[i];
                    slices[i][(l, k)] = v[i];
                    slices_se[i][(k, l)] = v_se[i];
                    slices_se[i][(l, k)] = v_se[i];
                }
            }
        }
        eval.d2_phi_dyy = Some(slices);
        eval.d2_phi_dyy_se = Some(slices_se);
    }

    eval.fd_bias = fd_bias;
    Ok(eval)
}

/// Corrector derivatives. Fd mode fills every derivative field (first x/y
/// derivatives, the mixed x-y second derivative, and the repeated y second
/// derivative); tangent mode fills only the y-derivative.
pub fn phi_derivatives(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    y: &DVector<f64>,
    mode: DerivativeMode,
    m_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<PoissonEval> {
    phi_derivatives_impl(
        cs,
        x,
        mu,
        y,
        mode,
        m_paths,
        dt,
        seed,
        FdParts {
            dx: true,
            dy: true,
            dxdy: true,
            dyy: true,
            bias: true,
        },
    )
}

/// Residual of the Poisson identity at one point: the generator applied to
/// the estimated corrector plus K, which vanishes for the exact solution.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub residual: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Finite-difference bias propagated through the generator weights.
    pub bias_bound: f64,
    /// First-order Euler bias of the time integral, per entry.
    pub discretization_bound: Vec<f64>,
    pub pass: bool,
}

pub fn poisson_residual(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    y: &DVector<f64>,
    eval: &PoissonEval,
) -> Result<ResidualReport> {
    let (n, m) = (cs.dims.n, cs.dims.m);
    let (Some(dy), Some(dy_se)) = (&eval.d_phi_dy, &eval.d_phi_dy_se) else {
        return Err(Error::InvalidInput(
            "residual needs the y-derivative estimate".into(),
        ));
    };
    let (Some(dyy), Some(dyy_se)) = (&eval.d2_phi_dyy, &eval.d2_phi_dyy_se) else {
        return Err(Error::InvalidInput(
            "residual needs the repeated y second derivative".into(),
        ));
    };
    let fv = (cs.f)(x, mu, y);
    let gm = (cs.g)(x, mu, y);
    let kv = (cs.k)(x, mu, y);
    let gg = &gm * gm.transpose();

    let mut residual = Vec::with_capacity(n);
    let mut std_err = Vec::with_capacity(n);
    let mut disc = Vec::with_capacity(n);
    let weight_sum: f64 = fv.iter().map(|v| v.abs()).sum::<f64>()
        + 0.5 * gg.iter().map(|v| v.abs()).sum::<f64>();
    for i in 0..n {
        let mut r = kv[i];
        let mut se = 0.0;
        let mut scale = kv[i].abs();
        for k in 0..m {
            r += fv[k] * dy[(i, k)];
            se += fv[k].abs() * dy_se[(i, k)];
            scale += (fv[k] * dy[(i, k)]).abs();
            for l in 0..m {
                r += 0.5 * gg[(k, l)] * dyy[i][(k, l)];
                se += 0.5 * gg[(k, l)].abs() * dyy_se[i][(k, l)];
                scale += (0.5 * gg[(k, l)] * dyy[i][(k, l)]).abs();
            }
        }
        residual.push(r);
        std_err.push(se);
        // the frozen-path integral carries an O(gamma dt) weak Euler error,
        // which dominates once common random numbers kill the statistical SE
        disc.push(cs.gamma * eval.dt * scale);
    }
    let bias_bound = eval.fd_bias * weight_sum;
    let pass = residual
        .iter()
        .zip(std_err.iter().zip(&disc))
        .all(|(r, (se, db))| r.abs() <= 3.0 * (se + bias_bound) + db + 1e-9);
    Ok(ResidualReport {
        residual,
        std_err,
        bias_bound,
        discretization_bound: disc,
        pass,
    })
}

/// One probe row of the regularity report.
#[derive(Debug, Clone, Serialize)]
pub struct RegularityProbe {
    pub y: Vec<f64>,
    pub radius: f64,
    /// max_i |phi_i| / (1 + |y|).
    pub phi_ratio: f64,
    pub phi_se: f64,
    pub dy_max: f64,
    pub dy_se: f64,
    pub dxy_max: f64,
    pub dxy_se: f64,
}

/// Boundedness spot check of the corrector over a radial probe grid.
#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub probes: Vec<RegularityProbe>,
    pub ratio_bound: f64,
    pub deriv_bound: f64,
    pub pass_ratio: bool,
    pub pass_dy: bool,
    pub pass_dxy: bool,
    pub pass: bool,
}

/// Radial probe points out to |y| = 10 in both signs of the diagonal
/// direction.
pub fn default_probe_grid(m: usize) -> Vec<DVector<f64>> {
    let dir = DVector::from_element(m, 1.0 / (m as f64).sqrt());
    let mut grid = Vec::new();
    for r in [0.5, 1.0, 2.0, 4.0, 7.0, 10.0] {
        grid.push(r * &dir);
        grid.push(-r * &dir);
    }
    grid
}

/// Checks growth of the corrector against 1 + |y| and flatness of its first
/// and mixed derivatives over the probe grid, at x = 0 and a point law.
/// Thresholds derive from the family's declared constants with the standard
/// slack; failures are reported, never raised.
pub fn regularity_spotcheck(
    cs: &CoefficientSet,
    probes: &[DVector<f64>],
    m_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<RegularityReport> {
    let x = DVector::zeros(cs.dims.n);
    let mu = MeasureSummary::dirac(DVector::zeros(cs.dims.n));
    let mut rows = Vec::with_capacity(probes.len());
    for (idx, y) in probes.iter().enumerate() {
        let eval = phi_derivatives_impl(
            cs,
            &x,
            &mu,
            y,
            DerivativeMode::Fd,
            m_paths,
            dt,
            mix_seed(seed, 0x5C, idx as u64),
            FdParts {
                dx: false,
                dy: true,
                dxdy: true,
                dyy: false,
                bias: false,
            },
        )?;
        let env = 1.0 + y.norm();
        let dy = eval.d_phi_dy.as_ref().unwrap();
        let dy_se = eval.d_phi_dy_se.as_ref().unwrap();
        let dxy = eval.d2_phi_dxdy.as_ref().unwrap();
        let dxy_se = eval.d2_phi_dxdy_se.as_ref().unwrap();
        rows.push(RegularityProbe {
            y: y.as_slice().to_vec(),
            radius: y.norm(),
            phi_ratio: eval.phi.amax() / env,
            phi_se: eval.phi_se.amax() / env,
            dy_max: dy.amax(),
            dy_se: dy_se.amax(),
            dxy_max: dxy.iter().map(|s| s.amax()).fold(0.0, f64::max),
            dxy_se: dxy_se.iter().map(|s| s.amax()).fold(0.0, f64::max),
        });
    }
    let ratio_bound = cs.declared.growth[0] / cs.gamma * (1.0 + ASSUMPTION_SLACK);
    let deriv_bound = cs.declared.lipschitz[1] / cs.gamma * (1.0 + ASSUMPTION_SLACK);
    let pass_ratio = rows
        .iter()
        .all(|r| r.phi_ratio <= ratio_bound + 3.0 * r.phi_se + 1e-9);
    let pass_dy = rows
        .iter()
        .all(|r| r.dy_max <= deriv_bound + 3.0 * r.dy_se + 1e-9);
    let pass_dxy = rows
        .iter()
        .all(|r| r.dxy_max <= deriv_bound + 3.0 * r.dxy_se + 1e-9);
    Ok(RegularityReport {
        probes: rows,
        ratio_bound,
        deriv_bound,
        pass_ratio,
        pass_dy,
        pass_dxy,
        pass: pass_ratio && pass_dy && pass_dxy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{instantiate, Dimensions, Family, InitialLaw, LawSpec, ModelSpec};

    fn model(family: Family, params: serde_json::Value) -> crate::model::Model {
        instantiate(&ModelSpec {
            family,
            params,
            dims: Dimensions { n: 1, m: 1, d: 1 },
            initial: InitialLaw {
                x: LawSpec::point(vec![0.0]),
                y: LawSpec::gaussian(vec![0.0], vec![1.0]),
            },
        })
        .unwrap()
    }

    fn dirac0(n: usize) -> MeasureSummary {
        MeasureSummary::dirac(DVector::zeros(n))
    }

    fn x0() -> DVector<f64> {
        DVector::zeros(1)
    }

    #[test]
    fn invariant_sampler_matches_reference_moments() {
        let m = model(Family::LinearOu, serde_json::json!({}));
        let nu = sample_invariant(&m.coeffs, &x0(), &dirac0(1), 400_000, 7).unwrap();
        assert!((nu.fitted_beta - 4.0).abs() < 0.2, "beta {}", nu.fitted_beta);
        assert!(nu.mean[0].abs() < 0.03, "mean {}", nu.mean[0]);
        assert!(
            (nu.covariance[(0, 0)] - 0.25).abs() < 0.035,
            "var {}",
            nu.covariance[(0, 0)]
        );
        // Gaussian sixth moment 15 sigma^6 = 15 / 4^3
        assert!((nu.sixth_moment - 15.0 * 0.25f64.powi(3)).abs() < 0.08);
        assert!(nu.ergodic_gap <= ERGODIC_REL_TOL);
    }

    #[test]
    fn tiny_noise_concentrates_at_attractor() {
        let m = model(Family::LinearOu, serde_json::json!({"g0": 1e-4}));
        let nu = sample_invariant(&m.coeffs, &x0(), &dirac0(1), 300_000, 3).unwrap();
        assert!(nu.mean[0].abs() < 1e-3);
        assert!(nu.covariance[(0, 0)] < 1e-6);
    }

    #[test]
    fn disjoint_seeds_agree() {
        let m = model(Family::LinearOu, serde_json::json!({}));
        let a = sample_invariant(&m.coeffs, &x0(), &dirac0(1), 300_000, 100).unwrap();
        let b = sample_invariant(&m.coeffs, &x0(), &dirac0(1), 300_000, 200).unwrap();
        assert!((a.mean[0] - b.mean[0]).abs() < 0.04);
    }

    #[test]
    fn budget_too_small_is_rejected() {
        let m = model(Family::LinearOu, serde_json::json!({}));
        assert!(sample_invariant(&m.coeffs, &x0(), &dirac0(1), 500, 1).is_err());
    }

    #[test]
    fn centering_verdicts_across_families() {
        let mu = dirac0(1);
        let lin = model(Family::LinearOu, serde_json::json!({}));
        let nu = sample_invariant(&lin.coeffs, &x0(), &mu, 300_000, 11).unwrap();
        let check = check_centering(&lin.coeffs, &x0(), &mu, &nu);
        assert!(check.pass, "residual {:?} se {:?}", check.residual, check.std_err);

        let zk = model(Family::ZeroK, serde_json::json!({}));
        let nu_z = sample_invariant(&zk.coeffs, &x0(), &mu, 300_000, 11).unwrap();
        let check_z = check_centering(&zk.coeffs, &x0(), &mu, &nu_z);
        assert_eq!(check_z.residual[0], 0.0);
        assert!(check_z.pass);

        let shifted = model(Family::LinearOu, serde_json::json!({"k_shift": 1.0}));
        let check_s = check_centering(&shifted.coeffs, &x0(), &mu, &nu);
        assert!(!check_s.pass);
        assert!((check_s.residual[0] - 1.0).abs() < 0.05);
    }

    #[test]
    fn phi_matches_linear_oracle() {
        let m = model(Family::LinearOu, serde_json::json!({}));
        let y = DVector::from_vec(vec![2.0]);
        let eval = phi(&m.coeffs, &x0(), &dirac0(1), &y, 2000, 0.01, 5).unwrap();
        let err = (eval.phi[0] - 1.0).abs();
        let tol = (3.0 * eval.phi_se[0]).max(0.03);
        assert!(err < tol, "phi {} se {}", eval.phi[0], eval.phi_se[0]);
        assert!((eval.fitted_beta - 4.0).abs() < 1.0, "beta {}", eval.fitted_beta);
        assert!(eval.tail_bound < PHI_TAIL_TOL);
    }

    #[test]
    fn phi_zero_cases() {
        let zk = model(Family::ZeroK, serde_json::json!({}));
        let y = DVector::from_vec(vec![1.5]);
        let eval = phi(&zk.coeffs, &x0(), &dirac0(1), &y, 100, 0.02, 1).unwrap();
        assert_eq!(eval.phi[0], 0.0);
        assert_eq!(eval.phi_se[0], 0.0);

        // starting at the invariant mean the integrand has zero expectation
        let lin = model(Family::LinearOu, serde_json::json!({}));
        let eval =
            phi(&lin.coeffs, &x0(), &dirac0(1), &DVector::zeros(1), 3000, 0.01, 2).unwrap();
        assert!(
            eval.phi[0].abs() <= 3.0 * eval.phi_se[0] + 1e-6,
            "phi {} se {}",
            eval.phi[0],
            eval.phi_se[0]
        );
    }

    #[test]
    fn uncentered_k_diverges() {
        let m = model(Family::LinearOu, serde_json::json!({"k_shift": 1.0}));
        let y = DVector::from_vec(vec![2.0]);
        let err = phi(&m.coeffs, &x0(), &dirac0(1), &y, 100, 0.02, 3).unwrap_err();
        assert!(matches!(err, Error::TailDivergence { .. }), "{err}");
    }

    #[test]
    fn doubling_horizon_stays_within_tail_bound() {
        let m = model(Family::LinearOu, serde_json::json!({}));
        let y = DVector::from_vec(vec![2.0]);
        let base = phi(&m.coeffs, &x0(), &dirac0(1), &y, 500, 0.01, 9).unwrap();
        let double = phi_fixed_horizon(
            &m.coeffs,
            &x0(),
            &dirac0(1),
            &y,
            2.0 * base.truncation_t,
            500,
            0.01,
            9,
        )
        .unwrap();
        let shift = (double.phi[0] - base.phi[0]).abs();
        let se = (base.phi_se[0].powi(2) + double.phi_se[0].powi(2)).sqrt();
        assert!(
            shift <= base.tail_bound + 3.0 * se,
            "shift {shift}, tail bound {}",
            base.tail_bound
        );
    }

    #[test]
    fn derivatives_match_linear_oracle() {
        let m = model(Family::LinearOu, serde_json::json!({"a": 1.0}));
        let y = DVector::from_vec(vec![1.0]);
        let x = DVector::from_vec(vec![0.3]);
        let eval = phi_derivatives(
            &m.coeffs,
            &x,
            &dirac0(1),
            &y,
            DerivativeMode::Fd,
            800,
            0.01,
            4,
        )
        .unwrap();
        let dy = eval.d_phi_dy.as_ref().unwrap()[(0, 0)];
        let dy_se = eval.d_phi_dy_se.as_ref().unwrap()[(0, 0)];
        assert!((dy - 0.5).abs() < (3.0 * dy_se).max(0.015), "dy {dy}");
        let dx = eval.d_phi_dx.as_ref().unwrap()[(0, 0)];
        let dx_se = eval.d_phi_dx_se.as_ref().unwrap()[(0, 0)];
        assert!((dx + 0.5).abs() < (3.0 * dx_se).max(0.015), "dx {dx}");
        let dxy = eval.d2_phi_dxdy.as_ref().unwrap()[0][(0, 0)];
        let dxy_se = eval.d2_phi_dxdy_se.as_ref().unwrap()[0][(0, 0)];
        assert!(dxy.abs() <= 3.0 * dxy_se + 1e-6, "dxy {dxy}");
        assert!(eval.fd_bias < 1e-6, "bias {}", eval.fd_bias);
    }

    #[test]
    fn tangent_and_fd_derivatives_agree() {
        let m = model(Family::LinearOu, serde_json::json!({}));
        let y = DVector::from_vec(vec![1.2]);
        let fd = phi_derivatives(
            &m.coeffs,
            &x0(),
            &dirac0(1),
            &y,
            DerivativeMode::Fd,
            400,
            0.01,
            6,
        )
        .unwrap();
        let tg = phi_derivatives(
            &m.coeffs,
            &x0(),
            &dirac0(1),
            &y,
            DerivativeMode::Tangent,
            400,
            0.01,
            6,
        )
        .unwrap();
        let a = fd.d_phi_dy.as_ref().unwrap()[(0, 0)];
        let b = tg.d_phi_dy.as_ref().unwrap()[(0, 0)];
        let se = (fd.d_phi_dy_se.as_ref().unwrap()[(0, 0)].powi(2)
            + tg.d_phi_dy_se.as_ref().unwrap()[(0, 0)].powi(2))
        .sqrt();
        assert!((a - b).abs() <= 3.0 * se + 1e-3, "fd {a} tangent {b}");
        assert!(tg.d_phi_dx.is_none());
    }

    #[test]
    fn residual_cancels_for_linear_family() {
        let m = model(Family::LinearOu, serde_json::json!({}));
        let y = DVector::from_vec(vec![1.0]);
        let eval = phi_derivatives(
            &m.coeffs,
            &x0(),
            &dirac0(1),
            &y,
            DerivativeMode::Fd,
            600,
            0.01,
            8,
        )
        .unwrap();
        let report = poisson_residual(&m.coeffs, &x0(), &dirac0(1), &y, &eval).unwrap();
        assert!(report.pass, "residual {:?}", report.residual);

        // an artificially inflated corrector leaves a detectable defect
        let mut bad = eval.clone();
        bad.phi *= 1.1;
        if let Some(d) = bad.d_phi_dy.as_mut() {
            *d *= 1.1;
        }
        if let Some(s) = bad.d2_phi_dyy.as_mut() {
            for m in s.iter_mut() {
                *m *= 1.1;
            }
        }
        let report = poisson_residual(&m.coeffs, &x0(), &dirac0(1), &y, &bad).unwrap();
        assert!(!report.pass);
        // residual = -0.1 K(y) = -0.1 at y = 1
        assert!((report.residual[0] + 0.1).abs() < 0.03, "{:?}", report.residual);
    }

    #[test]
    fn zero_k_residual_is_exactly_zero() {
        let zk = model(Family::ZeroK, serde_json::json!({}));
        let y = DVector::from_vec(vec![0.7]);
        let eval = phi_derivatives(
            &zk.coeffs,
            &x0(),
            &dirac0(1),
            &y,
            DerivativeMode::Fd,
            50,
            0.02,
            1,
        )
        .unwrap();
        let report = poisson_residual(&zk.coeffs, &x0(), &dirac0(1), &y, &eval).unwrap();
        assert_eq!(report.residual[0], 0.0);
        assert!(report.pass);
    }

    #[test]
    fn regularity_bounds_hold_for_linear_family() {
        let m = model(Family::LinearOu, serde_json::json!({}));
        let grid = default_probe_grid(1);
        let report = regularity_spotcheck(&m.coeffs, &grid, 250, 0.01, 12).unwrap();
        assert!(report.pass, "{report:?}");
        for row in &report.probes {
            assert!(row.phi_ratio <= 0.5 + 3.0 * row.phi_se + 0.01, "{row:?}");
        }
        // the y-derivative is flat in |y| for the linear family
        let spread = report
            .probes
            .iter()
            .map(|r| r.dy_max)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        assert!(spread.1 - spread.0 < 0.05, "{spread:?}");
    }

    #[test]
    fn regularity_all_zero_for_zero_k() {
        let zk = model(Family::ZeroK, serde_json::json!({}));
        let grid = default_probe_grid(1);
        let report = regularity_spotcheck(&zk.coeffs, &grid, 60, 0.02, 2).unwrap();
        assert!(report.pass);
        for row in &report.probes {
            assert_eq!(row.phi_ratio, 0.0);
            assert_eq!(row.dy_max, 0.0);
            assert_eq!(row.dxy_max, 0.0);
        }
    }

    #[test]
    fn poisson_eval_serializes() {
        let m = model(Family::LinearOu, serde_json::json!({}));
        let y = DVector::from_vec(vec![1.0]);
        let eval = phi(&m.coeffs, &x0(), &dirac0(1), &y, 100, 0.02, 1).unwrap();
        let v = eval.to_json();
        assert!(v["phi"][0].is_f64());
        assert!(v["truncation_t"].as_f64().unwrap() > 0.0);
        assert!(v["d_phi_dy"].is_null());
    }
}
