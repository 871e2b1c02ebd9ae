//! Assembly of the limiting drift and diffusion coefficients from invariant
//! samples and corrector evaluations: averaged maps, the drift Theta, both
//! diffusion forms with the principal PSD square root, the numerical
//! certificate that the two forms agree, and coefficient providers for the
//! limit-equation integrator.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::engine::LimitCoeffs;
use crate::error::{Error, Result};
pub use crate::linalg::{psd_sqrt, psd_sqrt_clamped};
use crate::linalg::{min_symmetric_eigenvalue, symmetrize};
use crate::measure::MeasureSummary;
use crate::model::{oracle_reference, CoefficientSet, Model};
use crate::poisson::{
    mix_seed, phi_derivatives_impl, sample_invariant, DerivativeMode, FdParts,
    InvariantMeasureEstimate,
};
use crate::stats::batch_means;

/// Step-size factor for inner corrector paths, in units of 1/gamma.
pub const CORRECTOR_DT_FACTOR: f64 = 0.02;
/// Cap on the number of invariant samples that receive corrector solves.
pub const MAX_EVAL_SAMPLES: usize = 200;
/// Sample cap for the equivalence certificate, whose residual noise floor
/// is set by the invariant-sample count rather than per-sample precision.
pub const MAX_EQUIVALENCE_SAMPLES: usize = 1600;
const MIN_PATHS_PER_SAMPLE: usize = 16;
const MIN_PATHS_EQUIVALENCE: usize = 8;
const SALT_THETA: u64 = 0x41;
const SALT_DIFFUSION: u64 = 0x42;

/// Sample average of a coefficient-like map over an invariant estimate.
#[derive(Debug, Clone)]
pub struct AveragedValue {
    pub value: DVector<f64>,
    pub std_err: DVector<f64>,
}

/// Weighted average of F over the invariant samples. Standard errors come
/// from batch means over the kept chain, so autocorrelation between thinned
/// samples is priced in.
pub fn averaged_map<F>(
    f: F,
    _cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    nu_hat: &InvariantMeasureEstimate,
) -> AveragedValue
where
    F: Fn(&DVector<f64>, &MeasureSummary, &DVector<f64>) -> DVector<f64>,
{
    let pts = nu_hat.samples.points();
    let count = pts.nrows();
    let first = f(x, mu, &nu_hat.samples.point(0));
    let out_dim = first.len();
    let mut per_entry: Vec<Vec<f64>> = vec![Vec::with_capacity(count); out_dim];
    for i in 0..count {
        let v = if i == 0 {
            first.clone()
        } else {
            f(x, mu, &nu_hat.samples.point(i))
        };
        for j in 0..out_dim {
            per_entry[j].push(v[j]);
        }
    }
    let mut value = DVector::zeros(out_dim);
    let mut std_err = DVector::zeros(out_dim);
    for j in 0..out_dim {
        let (m, se) = batch_means(&per_entry[j], 16);
        value[j] = m;
        std_err[j] = se;
    }
    AveragedValue { value, std_err }
}

/// How a corrector budget is split over invariant samples.
#[derive(Debug, Clone, Copy)]
struct BudgetSplit {
    eval_samples: usize,
    paths: usize,
}

fn split_budget(
    nu_len: usize,
    poisson_budget: usize,
    max_samples: usize,
    min_paths: usize,
) -> Result<BudgetSplit> {
    if poisson_budget < 4 * min_paths {
        return Err(Error::InvalidInput(format!(
            "poisson budget {poisson_budget} cannot fund corrector solves"
        )));
    }
    let eval_samples = max_samples.min(nu_len).min(poisson_budget / min_paths);
    let paths = (poisson_budget / eval_samples).max(min_paths);
    Ok(BudgetSplit {
        eval_samples,
        paths,
    })
}

/// Evenly spaced sample indices, deterministic in the chain order.
fn sample_indices(nu_len: usize, take: usize) -> Vec<usize> {
    (0..take).map(|i| i * nu_len / take).collect()
}

struct SampleEval {
    y: DVector<f64>,
    eval: crate::poisson::PoissonEval,
}

fn corrector_evals(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    nu_hat: &InvariantMeasureEstimate,
    split: BudgetSplit,
    seed: u64,
    salt: u64,
    parts: fn() -> FdParts,
) -> Result<Vec<SampleEval>> {
    let dt = CORRECTOR_DT_FACTOR / cs.gamma;
    let idx = sample_indices(nu_hat.samples.len(), split.eval_samples);
    let evals: Vec<Result<SampleEval>> = idx
        .par_iter()
        .enumerate()
        .map(|(j, &i)| {
            let y = nu_hat.samples.point(i);
            let eval = phi_derivatives_impl(
                cs,
                x,
                mu,
                &y,
                DerivativeMode::Fd,
                split.paths,
                dt,
                mix_seed(seed, salt, j as u64),
                parts(),
            )?;
            Ok(SampleEval { y, eval })
        })
        .collect();
    let mut out = Vec::with_capacity(evals.len());
    for e in evals {
        out.push(e?);
    }
    Ok(out)
}

fn mean_se_vectors(samples: &[DVector<f64>], dim: usize) -> (DVector<f64>, DVector<f64>) {
    let count = samples.len();
    let mut mv = DVector::zeros(dim);
    let mut se = DVector::zeros(dim);
    for j in 0..dim {
        let col: Vec<f64> = samples.iter().map(|v| v[j]).collect();
        mv[j] = crate::stats::mean(&col);
        se[j] = (crate::stats::sample_variance(&col) / count as f64).sqrt();
    }
    (mv, se)
}

fn mean_se_matrices(samples: &[DMatrix<f64>], n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let count = samples.len();
    let mut mv = DMatrix::zeros(n, n);
    let mut se = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let col: Vec<f64> = samples.iter().map(|m| m[(i, j)]).collect();
            mv[(i, j)] = crate::stats::mean(&col);
            se[(i, j)] = (crate::stats::sample_variance(&col) / count as f64).sqrt();
        }
    }
    (mv, se)
}

/// Limiting drift: the average of b plus the corrector terms
/// (d_x Phi) K + (d_y Phi) h + Tr[(sigma g*) d2_xy Phi]. The b term averages
/// over the full invariant sample; the corrector terms average over the
/// funded subset, so a vanishing corrector leaves exactly the averaged b.
pub fn theta(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    nu_hat: &InvariantMeasureEstimate,
    poisson_budget: usize,
    seed: u64,
) -> Result<AveragedValue> {
    let n = cs.dims.n;
    let split = split_budget(nu_hat.samples.len(), poisson_budget, MAX_EVAL_SAMPLES, MIN_PATHS_PER_SAMPLE)?;
    let b_avg = averaged_map(|x, mu, y| (cs.b)(x, mu, y), cs, x, mu, nu_hat);

    let evals = corrector_evals(cs, x, mu, nu_hat, split, seed, SALT_THETA, || FdParts {
        dx: true,
        dy: true,
        dxdy: true,
        dyy: false,
        bias: false,
    })?;
    let terms: Vec<DVector<f64>> = evals
        .iter()
        .map(|se| {
            let y = &se.y;
            let kv = (cs.k)(x, mu, y);
            let hv = (cs.h)(x, mu, y);
            let sg = (cs.sigma)(x, mu, y) * (cs.g)(x, mu, y).transpose();
            let dx = se.eval.d_phi_dx.as_ref().unwrap();
            let dy = se.eval.d_phi_dy.as_ref().unwrap();
            let dxy = se.eval.d2_phi_dxdy.as_ref().unwrap();
            let mut v = dx * &kv + dy * &hv;
            for i in 0..n {
                let mut tr = 0.0;
                for k in 0..cs.dims.m {
                    for j in 0..n {
                        tr += sg[(j, k)] * dxy[k][(i, j)];
                    }
                }
                v[i] += tr;
            }
            v
        })
        .collect();
    let (corr, corr_se) = mean_se_vectors(&terms, n);
    Ok(AveragedValue {
        value: b_avg.value + corr,
        std_err: DVector::from_fn(n, |i, _| {
            (b_avg.std_err[i].powi(2) + corr_se[i].powi(2)).sqrt()
        }),
    })
}

/// Limiting coefficients in both forms, partially populated by each
/// operation below.
#[derive(Debug, Clone, Default)]
pub struct AveragedCoefficients {
    pub theta: Option<DVector<f64>>,
    pub theta_se: Option<DVector<f64>>,
    /// Gram form: avg[(d_y Phi g + sigma)(d_y Phi g + sigma)*].
    pub a_tilde: Option<DMatrix<f64>>,
    pub a_tilde_se: Option<DMatrix<f64>>,
    /// Corrector-pair form: avg[(K x Phi) + (K x Phi)* + (sigma g*) d_y Phi
    /// + transpose + sigma sigma*].
    pub a_mp: Option<DMatrix<f64>>,
    pub a_mp_se: Option<DMatrix<f64>>,
    /// Principal PSD root of a_tilde.
    pub sigma_tilde: Option<DMatrix<f64>>,
    /// Principal PSD root of a_mp, when the clamp admits one.
    pub sigma_mp: Option<DMatrix<f64>>,
    /// Minimum eigenvalue of a_mp before clamping.
    pub a_mp_min_eig: Option<f64>,
    /// Frobenius gap between the two forms relative to a_tilde.
    pub equivalence_residual: Option<f64>,
    pub eval_samples: usize,
    pub paths_per_sample: usize,
}

impl AveragedCoefficients {
    /// Folds the populated fields of `other` into `self`.
    pub fn merge(mut self, other: AveragedCoefficients) -> AveragedCoefficients {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            theta,
            theta_se,
            a_tilde,
            a_tilde_se,
            a_mp,
            a_mp_se,
            sigma_tilde,
            sigma_mp,
            a_mp_min_eig,
            equivalence_residual
        );
        self.eval_samples = self.eval_samples.max(other.eval_samples);
        self.paths_per_sample = self.paths_per_sample.max(other.paths_per_sample);
        self
    }

    pub fn to_json(&self) -> serde_json::Value {
        let vec = |v: &Option<DVector<f64>>| v.as_ref().map(|v| v.as_slice().to_vec());
        let mat = |m: &Option<DMatrix<f64>>| {
            m.as_ref().map(|m| {
                (0..m.nrows())
                    .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>())
                    .collect::<Vec<_>>()
            })
        };
        serde_json::json!({
            "theta": vec(&self.theta),
            "theta_se": vec(&self.theta_se),
            "a_tilde": mat(&self.a_tilde),
            "a_tilde_se": mat(&self.a_tilde_se),
            "a_mp": mat(&self.a_mp),
            "a_mp_se": mat(&self.a_mp_se),
            "sigma_tilde": mat(&self.sigma_tilde),
            "sigma_mp": mat(&self.sigma_mp),
            "a_mp_min_eig": self.a_mp_min_eig,
            "equivalence_residual": self.equivalence_residual,
            "eval_samples": self.eval_samples,
            "paths_per_sample": self.paths_per_sample,
        })
    }
}

/// Per-sample Gram integrand of the a_tilde form.
fn gram_integrand(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    se: &SampleEval,
) -> DMatrix<f64> {
    let t = se.eval.d_phi_dy.as_ref().unwrap() * (cs.g)(x, mu, &se.y)
        + (cs.sigma)(x, mu, &se.y);
    &t * t.transpose()
}

/// Gram-form diffusion: every integrand sample is PSD, so the average must
/// be PSD up to rounding; that is asserted before the clamped square root.
pub fn diffusion_tilde(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    nu_hat: &InvariantMeasureEstimate,
    poisson_budget: usize,
    seed: u64,
) -> Result<AveragedCoefficients> {
    let split = split_budget(nu_hat.samples.len(), poisson_budget, MAX_EVAL_SAMPLES, MIN_PATHS_PER_SAMPLE)?;
    let evals = corrector_evals(cs, x, mu, nu_hat, split, seed, SALT_DIFFUSION, || FdParts {
        dx: false,
        dy: true,
        dxdy: false,
        dyy: false,
        bias: false,
    })?;
    let grams: Vec<DMatrix<f64>> = evals.iter().map(|e| gram_integrand(cs, x, mu, e)).collect();
    let (a_raw, a_se) = mean_se_matrices(&grams, cs.dims.n);
    let min_eig = min_symmetric_eigenvalue(&a_raw)?;
    if min_eig < -1e-12 {
        return Err(Error::NotPsd {
            eigenvalue: min_eig,
            tol: 1e-12,
            eigenvector: vec![],
        });
    }
    let a_tilde = symmetrize(&a_raw);
    let sigma_tilde = psd_sqrt(&a_tilde)?;
    Ok(AveragedCoefficients {
        a_tilde: Some(a_tilde),
        a_tilde_se: Some(a_se),
        sigma_tilde: Some(sigma_tilde),
        eval_samples: split.eval_samples,
        paths_per_sample: split.paths,
        ..Default::default()
    })
}

/// Per-sample integrand of the a_mp form, from one corrector eval so the
/// terms share their random numbers.
fn pair_integrand(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    se: &SampleEval,
) -> DMatrix<f64> {
    let kv = (cs.k)(x, mu, &se.y);
    let phi = &se.eval.phi;
    let sigma = (cs.sigma)(x, mu, &se.y);
    let sg = &sigma * (cs.g)(x, mu, &se.y).transpose();
    let dy = se.eval.d_phi_dy.as_ref().unwrap();
    let kphi = &kv * phi.transpose();
    let cross = &sg * dy.transpose();
    &kphi + kphi.transpose() + &cross + cross.transpose() + &sigma * sigma.transpose()
}

/// Corrector-pair diffusion. The minimum eigenvalue is surfaced as data;
/// it is an error only below -(3 SE + clamp tolerance), which would flag an
/// estimator defect since the two forms provably agree.
pub fn diffusion_mp(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    nu_hat: &InvariantMeasureEstimate,
    poisson_budget: usize,
    seed: u64,
) -> Result<AveragedCoefficients> {
    let split = split_budget(nu_hat.samples.len(), poisson_budget, MAX_EVAL_SAMPLES, MIN_PATHS_PER_SAMPLE)?;
    let evals = corrector_evals(cs, x, mu, nu_hat, split, seed, SALT_DIFFUSION, || FdParts {
        dx: false,
        dy: true,
        dxdy: false,
        dyy: false,
        bias: false,
    })?;
    let terms: Vec<DMatrix<f64>> = evals.iter().map(|e| pair_integrand(cs, x, mu, e)).collect();
    let (a_raw, a_se) = mean_se_matrices(&terms, cs.dims.n);
    let a_mp = symmetrize(&a_raw);
    let min_eig = min_symmetric_eigenvalue(&a_mp)?;
    let se_scale = a_se.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sigma_mp = psd_sqrt_clamped(&a_mp, 3.0 * se_scale)?;
    Ok(AveragedCoefficients {
        a_mp: Some(a_mp),
        a_mp_se: Some(a_se),
        sigma_mp: Some(sigma_mp),
        a_mp_min_eig: Some(min_eig),
        eval_samples: split.eval_samples,
        paths_per_sample: split.paths,
        ..Default::default()
    })
}

/// Entrywise comparison of one equivalence identity.
#[derive(Debug, Clone)]
pub struct IdentityCheck {
    pub lhs: DMatrix<f64>,
    pub rhs: DMatrix<f64>,
    /// SE of the coupled per-sample difference.
    pub diff_se: DMatrix<f64>,
    pub max_gap: f64,
    pub pass: bool,
}

/// Certificate that the Gram and corrector-pair diffusion forms agree.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    /// avg[(d_y Phi g)(d_y Phi g)*] vs avg[(K x Phi) + (K x Phi)*].
    pub gram_vs_pair: IdentityCheck,
    /// avg[(d_y Phi g) sigma* + transpose] vs avg[(sigma g*) d_y Phi + transpose].
    pub cross_terms: IdentityCheck,
    pub a_tilde: DMatrix<f64>,
    pub a_mp: DMatrix<f64>,
    /// ||a_tilde - a_mp||_F / ||a_tilde||_F from the same coupled evals.
    pub relative_residual: f64,
    /// SE of the residual numerator, relative to ||a_tilde||_F.
    pub residual_se: f64,
    pub pass: bool,
}

impl EquivalenceReport {
    pub fn to_json(&self) -> serde_json::Value {
        let mat = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        let check = |c: &IdentityCheck| {
            serde_json::json!({
                "lhs": mat(&c.lhs), "rhs": mat(&c.rhs), "diff_se": mat(&c.diff_se),
                "max_gap": c.max_gap, "pass": c.pass,
            })
        };
        serde_json::json!({
            "gram_vs_pair": check(&self.gram_vs_pair),
            "cross_terms": check(&self.cross_terms),
            "a_tilde": mat(&self.a_tilde),
            "a_mp": mat(&self.a_mp),
            "relative_residual": self.relative_residual,
            "residual_se": self.residual_se,
            "pass": self.pass,
        })
    }
}

fn identity_check(
    lhs_samples: &[DMatrix<f64>],
    rhs_samples: &[DMatrix<f64>],
    n: usize,
    dt_bias_scale: f64,
) -> IdentityCheck {
    let (lhs, _) = mean_se_matrices(lhs_samples, n);
    let (rhs, _) = mean_se_matrices(rhs_samples, n);
    let diffs: Vec<DMatrix<f64>> = lhs_samples
        .iter()
        .zip(rhs_samples)
        .map(|(a, b)| a - b)
        .collect();
    let (gap, diff_se) = mean_se_matrices(&diffs, n);
    let mut pass = true;
    let mut max_gap = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let g = gap[(i, j)].abs();
            max_gap = max_gap.max(g);
            let allow = 3.0 * diff_se[(i, j)]
                + dt_bias_scale * (lhs[(i, j)].abs() + rhs[(i, j)].abs())
                + 1e-9;
            if g > allow {
                pass = false;
            }
        }
    }
    IdentityCheck {
        lhs,
        rhs,
        diff_se,
        max_gap,
        pass,
    }
}

/// Computes both sides of the two diffusion-equivalence identities as
/// averages over shared corrector evals, so the gaps measure identity error
/// rather than independent sampling noise.
pub fn check_equivalence(
    cs: &CoefficientSet,
    x: &DVector<f64>,
    mu: &MeasureSummary,
    nu_hat: &InvariantMeasureEstimate,
    poisson_budget: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    let n = cs.dims.n;
    let split = split_budget(nu_hat.samples.len(), poisson_budget, MAX_EQUIVALENCE_SAMPLES, MIN_PATHS_EQUIVALENCE)?;
    let evals = corrector_evals(cs, x, mu, nu_hat, split, seed, SALT_DIFFUSION, || FdParts {
        dx: false,
        dy: true,
        dxdy: false,
        dyy: false,
        bias: false,
    })?;
    let dt = CORRECTOR_DT_FACTOR / cs.gamma;
    let dt_bias_scale = cs.gamma * dt;

    let mut lhs_29 = Vec::with_capacity(evals.len());
    let mut rhs_29 = Vec::with_capacity(evals.len());
    let mut lhs_210 = Vec::with_capacity(evals.len());
    let mut rhs_210 = Vec::with_capacity(evals.len());
    let mut a_tilde_samples = Vec::with_capacity(evals.len());
    let mut a_mp_samples = Vec::with_capacity(evals.len());
    for se in &evals {
        let y = &se.y;
        let kv = (cs.k)(x, mu, y);
        let sigma = (cs.sigma)(x, mu, y);
        let g = (cs.g)(x, mu, y);
        let dy = se.eval.d_phi_dy.as_ref().unwrap();
        let dyg = dy * &g;
        let kphi = &kv * se.eval.phi.transpose();
        let cross_gram = &dyg * sigma.transpose();
        let cross_pair = (&sigma * g.transpose()) * dy.transpose();
        let sigma2 = &sigma * sigma.transpose();

        lhs_29.push(&dyg * dyg.transpose());
        rhs_29.push(&kphi + kphi.transpose());
        lhs_210.push(&cross_gram + cross_gram.transpose());
        rhs_210.push(&cross_pair + cross_pair.transpose());
        a_tilde_samples.push(lhs_29.last().unwrap() + lhs_210.last().unwrap() + &sigma2);
        a_mp_samples.push(rhs_29.last().unwrap() + rhs_210.last().unwrap() + &sigma2);
    }

    let gram_vs_pair = identity_check(&lhs_29, &rhs_29, n, dt_bias_scale);
    let cross_terms = identity_check(&lhs_210, &rhs_210, n, dt_bias_scale);
    let (a_tilde, _) = mean_se_matrices(&a_tilde_samples, n);
    let (a_mp, _) = mean_se_matrices(&a_mp_samples, n);
    let diffs: Vec<DMatrix<f64>> = a_tilde_samples
        .iter()
        .zip(&a_mp_samples)
        .map(|(a, b)| a - b)
        .collect();
    let (gap, gap_se) = mean_se_matrices(&diffs, n);
    let denom = a_tilde.norm().max(1e-300);
    let relative_residual = gap.norm() / denom;
    let residual_se = gap_se.norm() / denom;
    let pass = gram_vs_pair.pass
        && cross_terms.pass
        && relative_residual <= 3.0 * residual_se + dt_bias_scale + 1e-9;
    Ok(EquivalenceReport {
        gram_vs_pair,
        cross_terms,
        a_tilde,
        a_mp,
        relative_residual,
        residual_se,
        pass,
    })
}

/// Closed-form limit-equation provider when the model carries an oracle.
pub fn oracle_provider(model: &Model) -> Result<Option<LimitCoeffs>> {
    let Some(oracle) = oracle_reference(&model.spec)? else {
        return Ok(None);
    };
    let theta = oracle.theta.clone();
    let sigma = oracle.sigma_tilde.clone();
    Ok(Some(Arc::new(move |x, mu| {
        Ok((theta(x, mu), sigma.clone()))
    })))
}

/// Grid bounds and budgets for the empirical limit-coefficient cache.
#[derive(Debug, Clone)]
pub struct GridProviderConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub mean_min: f64,
    pub mean_max: f64,
    pub x_points: usize,
    pub mean_points: usize,
    pub invariant_budget: usize,
    pub poisson_budget: usize,
    pub seed: u64,
}

impl GridProviderConfig {
    /// Bounds from an observed slow range, padded 20 percent each side.
    pub fn from_observed_range(
        x_range: (f64, f64),
        mean_range: (f64, f64),
        seed: u64,
    ) -> GridProviderConfig {
        let pad = |lo: f64, hi: f64| {
            let w = (hi - lo).max(0.2);
            (lo - 0.2 * w, hi + 0.2 * w)
        };
        let (x_min, x_max) = pad(x_range.0, x_range.1);
        let (mean_min, mean_max) = pad(mean_range.0, mean_range.1);
        GridProviderConfig {
            x_min,
            x_max,
            mean_min,
            mean_max,
            x_points: 5,
            mean_points: 5,
            invariant_budget: 60_000,
            poisson_budget: 2_048,
            seed,
        }
    }
}

/// Precomputed limit coefficients on an (x, mean) grid with bilinear
/// interpolation, for scalar slow dimension. Queries outside the grid clamp
/// to the boundary. Built-in families read the measure through its mean
/// only, which is what makes the two-axis cache exact in distribution.
pub fn grid_provider(model: &Model, cfg: &GridProviderConfig) -> Result<LimitCoeffs> {
    let cs = &model.coeffs;
    if cs.dims.n != 1 {
        return Err(Error::MethodCap(
            "grid limit provider supports scalar slow dimension only".into(),
        ));
    }
    if cfg.x_points < 2 || cfg.mean_points < 2 || !(cfg.x_max > cfg.x_min)
        || !(cfg.mean_max > cfg.mean_min)
    {
        return Err(Error::InvalidInput("degenerate coefficient grid".into()));
    }
    let xs: Vec<f64> = (0..cfg.x_points)
        .map(|i| cfg.x_min + (cfg.x_max - cfg.x_min) * i as f64 / (cfg.x_points - 1) as f64)
        .collect();
    let ms: Vec<f64> = (0..cfg.mean_points)
        .map(|i| cfg.mean_min + (cfg.mean_max - cfg.mean_min) * i as f64 / (cfg.mean_points - 1) as f64)
        .collect();

    let mut theta_grid = vec![vec![0.0; ms.len()]; xs.len()];
    let mut sigma_grid = vec![vec![0.0; ms.len()]; xs.len()];
    for (i, &xv) in xs.iter().enumerate() {
        for (j, &mv) in ms.iter().enumerate() {
            let x = DVector::from_vec(vec![xv]);
            let mu = MeasureSummary {
                mean: DVector::from_vec(vec![mv]),
                second_moment: mv * mv,
                cloud: None,
            };
            let node_seed = mix_seed(cfg.seed, 0x77, (i * ms.len() + j) as u64);
            let nu = sample_invariant(cs, &x, &mu, cfg.invariant_budget, node_seed)?;
            let th = theta(cs, &x, &mu, &nu, cfg.poisson_budget, node_seed)?;
            let diff = diffusion_tilde(cs, &x, &mu, &nu, cfg.poisson_budget, node_seed)?;
            theta_grid[i][j] = th.value[0];
            sigma_grid[i][j] = diff.sigma_tilde.as_ref().unwrap()[(0, 0)];
        }
    }

    let (x_min, x_max) = (cfg.x_min, cfg.x_max);
    let (m_min, m_max) = (cfg.mean_min, cfg.mean_max);
    let (nx, nm) = (xs.len(), ms.len());
    Ok(Arc::new(move |x, mu| {
        let locate = |v: f64, lo: f64, hi: f64, count: usize| {
            let t = ((v - lo) / (hi - lo) * (count - 1) as f64)
                .clamp(0.0, (count - 1) as f64 - 1e-12);
            let i = t.floor() as usize;
            (i, t - i as f64)
        };
        let (i, tx) = locate(x[0], x_min, x_max, nx);
        let (j, tm) = locate(mu.mean[0], m_min, m_max, nm);
        let lerp2 = |grid: &Vec<Vec<f64>>| {
            let a = grid[i][j] * (1.0 - tx) * (1.0 - tm)
                + grid[i + 1][j] * tx * (1.0 - tm)
                + grid[i][j + 1] * (1.0 - tx) * tm
                + grid[i + 1][j + 1] * tx * tm;
            a
        };
        Ok((
            DVector::from_vec(vec![lerp2(&theta_grid)]),
            DMatrix::from_element(1, 1, lerp2(&sigma_grid)),
        ))
    }))
}

/// Oracle provider when available, otherwise the empirical grid cache.
pub fn limit_provider(model: &Model, cfg: &GridProviderConfig) -> Result<LimitCoeffs> {
    match oracle_provider(model)? {
        Some(p) => Ok(p),
        None => grid_provider(model, cfg),
    }
}
