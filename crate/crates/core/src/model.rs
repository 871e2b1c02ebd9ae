//! Built-in slow-fast model families, their JSON specification language,
//! runtime assumption spot checks, and the closed-form reference solution for
//! the linear Ornstein-Uhlenbeck family.
//!
//! Every family fixes six coefficient maps (b, K, sigma) for the slow line
//! and (f, h, g) for the fast line, all functions of (x, mu, y). Families are
//! defined coordinatewise so any combination of dimensions is admissible;
//! index maps tile between the slow and fast coordinate counts.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::psd_sqrt;
use crate::measure::{w2_distance, EmpiricalMeasure, MeasureSummary, W2Method};
use crate::noise::{NoiseStream, StreamId, StreamPurpose};

/// Slow (n), fast (m), and Brownian (d) dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimensions {
    pub n: usize,
    pub m: usize,
    pub d: usize,
}

impl Dimensions {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.m < 1 || self.d < 1 {
            return Err(Error::InadmissibleParams(format!(
                "dimensions must all be >= 1, got n={} m={} d={}",
                self.n, self.m, self.d
            )));
        }
        Ok(())
    }
}

/// Which measure statistics the coefficient maps actually read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureDependence {
    MeanOnly,
    MeanAndSecondMoment,
    FullCloud,
}

pub type VecMap =
    Arc<dyn Fn(&DVector<f64>, &MeasureSummary, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatMap =
    Arc<dyn Fn(&DVector<f64>, &MeasureSummary, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type MeanMap = Arc<dyn Fn(&DVector<f64>, &MeasureSummary) -> DVector<f64> + Send + Sync>;

/// Names of the six coefficient maps, in reporting order.
pub const COEF_NAMES: [&str; 6] = ["b", "K", "sigma", "f", "h", "g"];

/// The six coefficient maps of one model instance plus declared constants.
#[derive(Clone)]
pub struct CoefficientSet {
    pub dims: Dimensions,
    pub b: VecMap,
    pub k: VecMap,
    pub sigma: MatMap,
    pub f: VecMap,
    pub h: VecMap,
    pub g: MatMap,
    /// Declared dissipativity rate of the fast drift.
    pub gamma: f64,
    /// Declared sublinearity exponent of g, in (0,1).
    pub varsigma: f64,
    /// Declared Lipschitz constant of f in y (drives the step-size cap).
    pub lip_fast: f64,
    pub measure_dependence: MeasureDependence,
    pub declared: DeclaredBounds,
}

/// Constants the family claims for its coefficients; spot checks compare
/// observed probe ratios against these with a fixed slack.
#[derive(Debug, Clone)]
pub struct DeclaredBounds {
    /// Lipschitz bounds in the order of `COEF_NAMES`.
    pub lipschitz: [f64; 6],
    /// Growth bounds for K, f, h, sigma (linear envelope) and g (sublinear).
    pub growth: [f64; 5],
}

pub const GROWTH_NAMES: [&str; 5] = ["K", "f", "h", "sigma", "g"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    LinearOu,
    NonlinearTest,
    ZeroK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LawKind {
    Point,
    Gaussian,
}

/// One marginal initial law: a deterministic point or a diagonal Gaussian.
/// Both have finite moments of every order, as the limit theorems require.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawSpec {
    #[serde(rename = "type")]
    pub kind: LawKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<Vec<f64>>,
}

impl LawSpec {
    pub fn point(value: Vec<f64>) -> Self {
        LawSpec {
            kind: LawKind::Point,
            value: Some(value),
            mean: None,
            std: None,
        }
    }

    pub fn gaussian(mean: Vec<f64>, std: Vec<f64>) -> Self {
        LawSpec {
            kind: LawKind::Gaussian,
            value: None,
            mean: Some(mean),
            std: Some(std),
        }
    }

    fn validate(&self, dim: usize, label: &str) -> Result<()> {
        let check_len = |v: &Option<Vec<f64>>, name: &str| -> Result<()> {
            match v {
                Some(v) if v.len() == dim && v.iter().all(|x| x.is_finite()) => Ok(()),
                Some(v) => Err(Error::Config(format!(
                    "initial.{label}.{name} must hold {dim} finite entries, got {}",
                    v.len()
                ))),
                None => Err(Error::Config(format!(
                    "initial.{label} ({:?}) requires field {name}",
                    self.kind
                ))),
            }
        };
        match self.kind {
            LawKind::Point => {
                check_len(&self.value, "value")?;
                if self.mean.is_some() || self.std.is_some() {
                    return Err(Error::Config(format!(
                        "initial.{label}: point law takes only `value`"
                    )));
                }
            }
            LawKind::Gaussian => {
                check_len(&self.mean, "mean")?;
                check_len(&self.std, "std")?;
                if self.value.is_some() {
                    return Err(Error::Config(format!(
                        "initial.{label}: gaussian law takes `mean` and `std`, not `value`"
                    )));
                }
                if self.std.as_ref().unwrap().iter().any(|s| *s < 0.0) {
                    return Err(Error::Config(format!(
                        "initial.{label}.std entries must be >= 0"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Seeded sample; each particle index addresses an independent stream.
    pub fn sample(&self, master_seed: u64, purpose: StreamPurpose, particle: u32) -> DVector<f64> {
        match self.kind {
            LawKind::Point => DVector::from_vec(self.value.clone().expect("validated")),
            LawKind::Gaussian => {
                let mean = self.mean.as_ref().expect("validated");
                let std = self.std.as_ref().expect("validated");
                let stream = NoiseStream::new(master_seed, StreamId::new(purpose, particle));
                let xi = stream.standard_normals(0, mean.len());
                DVector::from_fn(mean.len(), |i, _| mean[i] + std[i] * xi[i])
            }
        }
    }
}

/// Initial laws for the slow (x) and fast (y) components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialLaw {
    pub x: LawSpec,
    pub y: LawSpec,
}

impl InitialLaw {
    pub fn validate(&self, dims: &Dimensions) -> Result<()> {
        self.x.validate(dims.n, "x")?;
        self.y.validate(dims.m, "y")
    }

    pub fn sample_x(&self, master_seed: u64, particle: u32) -> DVector<f64> {
        self.x.sample(master_seed, StreamPurpose::InitSlow, particle)
    }

    pub fn sample_y(&self, master_seed: u64, particle: u32) -> DVector<f64> {
        self.y.sample(master_seed, StreamPurpose::InitFast, particle)
    }
}

/// JSON model document: {"family", "params", "dims", "initial"}.
/// Unknown fields are rejected, both here and inside `params`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    #[serde(default)]
    pub params: serde_json::Value,
    pub dims: Dimensions,
    pub initial: InitialLaw,
}

impl ModelSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    /// Hex SHA-256 of the compact JSON form; field order is fixed by the
    /// struct definitions, so equal specs hash equally.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let compact = serde_json::to_string(self).expect("model spec serializes");
        let digest = Sha256::digest(compact.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Linear Ornstein-Uhlenbeck family. With c = a*x + b1*mean(mu) (tiled to
/// the fast dimension):
///   f = -gamma*(y - c),    g = g0 * I,
///   K = kappa*(y - c) + k_shift,   h = eta * 1,
///   b = -lambda*x + theta*mean(mu),   sigma = sigma0 * I.
/// `k_shift` deliberately breaks the centering condition when nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearOuParams {
    pub gamma: f64,
    pub a: f64,
    pub b1: f64,
    pub kappa: f64,
    pub g0: f64,
    pub sigma0: f64,
    pub eta: f64,
    pub lambda: f64,
    pub theta: f64,
    pub k_shift: f64,
}

impl Default for LinearOuParams {
    fn default() -> Self {
        LinearOuParams {
            gamma: 2.0,
            a: 0.0,
            b1: 0.0,
            kappa: 1.0,
            g0: 1.0,
            sigma0: 0.5,
            eta: 0.4,
            lambda: 1.0,
            theta: 0.5,
            k_shift: 0.0,
        }
    }
}

/// Linear family plus bounded smooth perturbations in z = y - c:
///   f = -gamma*z + amp_f*sin(z) + amp_f2*cos(z)
///   g = (g0 + amp_g*cos(z)) * I
///   c = a*x + b1*mean + amp_c*sin(x + mean)   (tiled coordinatewise)
///   b = -lambda*x + theta*mean + amp_b*sin(x)
///   K = kappa*(z - offset)
/// where `offset` is the invariant mean of the scalar z-dynamics, calibrated
/// numerically once and stored back into the spec so K is centered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearTestParams {
    pub gamma: f64,
    pub a: f64,
    pub b1: f64,
    pub kappa: f64,
    pub g0: f64,
    pub sigma0: f64,
    pub eta: f64,
    pub lambda: f64,
    pub theta: f64,
    pub amp_f: f64,
    pub amp_f2: f64,
    pub amp_b: f64,
    pub amp_c: f64,
    pub amp_g: f64,
    pub centering_offset: Option<f64>,
}

impl Default for NonlinearTestParams {
    fn default() -> Self {
        NonlinearTestParams {
            gamma: 2.0,
            a: 0.0,
            b1: 0.0,
            kappa: 1.0,
            g0: 1.0,
            sigma0: 0.5,
            eta: 0.4,
            lambda: 1.0,
            theta: 0.5,
            amp_f: 0.2,
            amp_f2: 0.3,
            amp_b: 0.2,
            amp_c: 0.3,
            amp_g: 0.2,
            centering_offset: None,
        }
    }
}

/// Degenerate control family: K and h identically zero, so the corrector
/// vanishes and the limit reduces to plain averaging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZeroKParams {
    pub gamma: f64,
    pub a: f64,
    pub b1: f64,
    pub g0: f64,
    pub sigma0: f64,
    pub lambda: f64,
    pub theta: f64,
}

impl Default for ZeroKParams {
    fn default() -> Self {
        ZeroKParams {
            gamma: 2.0,
            a: 0.0,
            b1: 0.0,
            g0: 1.0,
            sigma0: 0.5,
            lambda: 1.0,
            theta: 0.5,
        }
    }
}

/// An instantiated model: the coefficient maps plus the resolved spec
/// (family defaults filled in, centering offset calibrated).
#[derive(Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub coeffs: CoefficientSet,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("spec", &self.spec).finish()
    }
}

fn parse_params<T: serde::de::DeserializeOwned + Default>(v: &serde_json::Value) -> Result<T> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("invalid params: {e}")))
}

fn tile(v: &DVector<f64>, len: usize) -> DVector<f64> {
    let src = v.len();
    DVector::from_fn(len, |i, _| v[i % src])
}

fn eye_pattern(rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |i, j| if i == j { scale } else { 0.0 })
}

/// sqrt(ceil(out/in)): norm inflation of the coordinate tiling map.
fn tile_factor(out_dim: usize, in_dim: usize) -> f64 {
    (out_dim.div_ceil(in_dim) as f64).sqrt()
}

/// Envelope radius for the Gaussian probe distribution, used only to size
/// declared growth constants for measure/x-dependent terms.
const PROBE_RADIUS: f64 = 6.0;

fn linear_c(p: &LinearOuParams, m: usize, x: &DVector<f64>, mean: &DVector<f64>) -> DVector<f64> {
    let xt = tile(x, m);
    let mt = tile(mean, m);
    DVector::from_fn(m, |i, _| p.a * xt[i] + p.b1 * mt[i])
}

fn linear_ou_coeffs(p: &LinearOuParams, dims: Dimensions) -> CoefficientSet {
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let pr = *p;
    let b: VecMap = Arc::new(move |x, mu, _y| -pr.lambda * x + pr.theta * &mu.mean);
    let k: VecMap = Arc::new(move |x, mu, y| {
        let c = linear_c(&pr, m, x, &mu.mean);
        DVector::from_fn(n, |j, _| pr.kappa * (y[j % m] - c[j % m]) + pr.k_shift)
    });
    let sigma: MatMap = Arc::new(move |_x, _mu, _y| eye_pattern(n, d, pr.sigma0));
    let f: VecMap = Arc::new(move |x, mu, y| {
        let c = linear_c(&pr, m, x, &mu.mean);
        DVector::from_fn(m, |i, _| -pr.gamma * (y[i] - c[i]))
    });
    let h: VecMap = Arc::new(move |_x, _mu, _y| DVector::from_element(m, pr.eta));
    let g: MatMap = Arc::new(move |_x, _mu, _y| eye_pattern(m, d, pr.g0));

    let t_nm = tile_factor(n, m);
    let t_mn = tile_factor(m, n);
    let c_slope = (p.a.abs() * t_mn).max(p.b1.abs() * t_mn);
    let lip_k = p.kappa.abs() * t_nm * 1f64.max(c_slope);
    let lip_f = p.gamma * 1f64.max(c_slope);
    let mf = (m as f64).sqrt();
    let grow_k = (p.kappa.abs() * t_nm).max(
        p.kappa.abs() * t_nm * (p.a.abs() + p.b1.abs()) * t_mn * PROBE_RADIUS
            + p.k_shift.abs() * (n as f64).sqrt(),
    );
    let grow_f = p.gamma * 1f64.max((p.a.abs() + p.b1.abs()) * t_mn * PROBE_RADIUS);
    CoefficientSet {
        dims,
        b,
        k,
        sigma,
        f,
        h,
        g,
        gamma: p.gamma,
        varsigma: 0.5,
        lip_fast: p.gamma,
        measure_dependence: MeasureDependence::MeanOnly,
        declared: DeclaredBounds {
            lipschitz: [p.lambda.abs().max(p.theta.abs()), lip_k, 0.0, lip_f, 0.0, 0.0],
            growth: [
                grow_k,
                grow_f,
                p.eta.abs() * mf,
                p.sigma0.abs() * (n.min(d) as f64).sqrt(),
                p.g0.abs() * (m.min(d) as f64).sqrt(),
            ],
        },
    }
}

fn nonlinear_c(
    p: &NonlinearTestParams,
    m: usize,
    x: &DVector<f64>,
    mean: &DVector<f64>,
) -> DVector<f64> {
    let xt = tile(x, m);
    let mt = tile(mean, m);
    DVector::from_fn(m, |i, _| {
        p.a * xt[i] + p.b1 * mt[i] + p.amp_c * (xt[i] + mt[i]).sin()
    })
}

fn nonlinear_coeffs(p: &NonlinearTestParams, dims: Dimensions, offset: f64) -> CoefficientSet {
    let (n, m, d) = (dims.n, dims.m, dims.d);
    let pr = *p;
    let b: VecMap = Arc::new(move |x, mu, _y| {
        DVector::from_fn(n, |j, _| {
            -pr.lambda * x[j] + pr.theta * mu.mean[j] + pr.amp_b * x[j].sin()
        })
    });
    let k: VecMap = Arc::new(move |x, mu, y| {
        let c = nonlinear_c(&pr, m, x, &mu.mean);
        DVector::from_fn(n, |j, _| pr.kappa * (y[j % m] - c[j % m] - offset))
    });
    let sigma: MatMap = Arc::new(move |_x, _mu, _y| eye_pattern(n, d, pr.sigma0));
    let f: VecMap = Arc::new(move |x, mu, y| {
        let c = nonlinear_c(&pr, m, x, &mu.mean);
        DVector::from_fn(m, |i, _| {
            let z = y[i] - c[i];
            -pr.gamma * z + pr.amp_f * z.sin() + pr.amp_f2 * z.cos()
        })
    });
    let h: VecMap = Arc::new(move |_x, _mu, _y| DVector::from_element(m, pr.eta));
    let g: MatMap = Arc::new(move |x, mu, y| {
        let c = nonlinear_c(&pr, m, x, &mu.mean);
        DMatrix::from_fn(m, d, |i, j| {
            if i == j {
                pr.g0 + pr.amp_g * (y[i] - c[i]).cos()
            } else {
                0.0
            }
        })
    });

    let t_nm = tile_factor(n, m);
    let t_mn = tile_factor(m, n);
    let c_slope = ((p.a.abs() + p.amp_c) * t_mn).max((p.b1.abs() + p.amp_c) * t_mn);
    let fast_slope = p.gamma + p.amp_f + p.amp_f2;
    let mf = (m as f64).sqrt();
    let c_add = (p.a.abs() + p.b1.abs()) * t_mn * PROBE_RADIUS + p.amp_c * mf;
    let grow_k = (p.kappa.abs() * t_nm).max(p.kappa.abs() * t_nm * (c_add + offset.abs() * mf));
    let grow_f = fast_slope.max(p.gamma * c_add + (p.amp_f + p.amp_f2) * mf);
    CoefficientSet {
        dims,
        b,
        k,
        sigma,
        f,
        h,
        g,
        gamma: p.gamma,
        varsigma: 0.5,
        lip_fast: fast_slope,
        measure_dependence: MeasureDependence::MeanOnly,
        declared: DeclaredBounds {
            lipschitz: [
                (p.lambda.abs() + p.amp_b).max(p.theta.abs()),
                p.kappa.abs() * t_nm * 1f64.max(c_slope),
                0.0,
                fast_slope * 1f64.max(c_slope),
                0.0,
                p.amp_g * 1f64.max(c_slope),
            ],
            growth: [
                grow_k,
                grow_f,
                p.eta.abs() * mf,
                p.sigma0.abs() * (n.min(d) as f64).sqrt(),
                (p.g0.abs() + p.amp_g) * (m.min(d) as f64).sqrt(),
            ],
        },
    }
}

fn zero_k_coeffs(p: &ZeroKParams, dims: Dimensions) -> CoefficientSet {
    let base = LinearOuParams {
        gamma: p.gamma,
        a: p.a,
        b1: p.b1,
        kappa: 0.0,
        g0: p.g0,
        sigma0: p.sigma0,
        eta: 0.0,
        lambda: p.lambda,
        theta: p.theta,
        k_shift: 0.0,
    };
    linear_ou_coeffs(&base, dims)
}

/// Invariant mean of the scalar perturbed z-dynamics
///   dz = (-gamma z + amp_f sin z + amp_f2 cos z) dt + (g0 + amp_g cos z) dW,
/// estimated by a long antithetic Euler time average with a fixed internal
/// seed. All fast coordinates are iid copies of this scalar process (the
/// family requires m <= d), so one offset centers K exactly.
fn calibrate_centering_offset(p: &NonlinearTestParams) -> f64 {
    let key = [
        p.gamma.to_bits(),
        p.amp_f.to_bits(),
        p.amp_f2.to_bits(),
        p.amp_g.to_bits(),
        p.g0.to_bits(),
    ];
    static CACHE: OnceLock<Mutex<HashMap<[u64; 5], f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().unwrap().get(&key) {
        return *v;
    }

    const CALIB_SEED: u64 = 0x6d76_5f63_616c_6962;
    const BLOCK: usize = 1024;
    let dt = 5.0e-4 / p.gamma;
    let sdt = dt.sqrt();
    let burn_steps = (30.0 / (p.gamma * dt)).ceil() as usize;
    let keep_steps = 6_000_000usize;
    let drift = |z: f64| -p.gamma * z + p.amp_f * z.sin() + p.amp_f2 * z.cos();
    let diff = |z: f64| p.g0 + p.amp_g * z.cos();

    let mut rep_means = Vec::new();
    for rep in 0..2u32 {
        let stream = NoiseStream::new(CALIB_SEED, StreamId::new(StreamPurpose::Probe, rep));
        let (mut zp, mut zm) = (0.0f64, 0.0f64);
        let mut block_sums: Vec<f64> = Vec::with_capacity(keep_steps / BLOCK + 1);
        let mut acc = 0.0f64;
        let mut in_block = 0usize;
        let total = burn_steps + keep_steps;
        let mut block_idx = 0u64;
        let mut draws = stream.standard_normals(block_idx, BLOCK);
        let mut pos = 0usize;
        for step in 0..total {
            if pos == BLOCK {
                block_idx += 1;
                draws = stream.standard_normals(block_idx, BLOCK);
                pos = 0;
            }
            let xi = draws[pos];
            pos += 1;
            zp += drift(zp) * dt + diff(zp) * sdt * xi;
            zm += drift(zm) * dt - diff(zm) * sdt * xi;
            if step >= burn_steps {
                acc += zp + zm;
                in_block += 1;
                if in_block == BLOCK {
                    block_sums.push(acc);
                    acc = 0.0;
                    in_block = 0;
                }
            }
        }
        if in_block > 0 {
            block_sums.push(acc);
        }
        rep_means.push(crate::stats::pairwise_sum(&block_sums) / (2 * keep_steps) as f64);
    }
    let offset = crate::stats::mean(&rep_means);
    cache.lock().unwrap().insert(key, offset);
    offset
}

/// Builds the coefficient maps for a model document, checking family
/// admissibility and resolving the nonlinear centering offset.
pub fn instantiate(spec: &ModelSpec) -> Result<Model> {
    spec.dims.validate()?;
    spec.initial.validate(&spec.dims)?;
    let mut resolved = spec.clone();
    let coeffs = match spec.family {
        Family::LinearOu => {
            let p: LinearOuParams = parse_params(&spec.params)?;
            if p.gamma <= 0.0 {
                return Err(Error::InadmissibleParams("gamma must be positive".into()));
            }
            if p.g0 == 0.0 {
                return Err(Error::InadmissibleParams("g0 must be nonzero".into()));
            }
            resolved.params = serde_json::to_value(p).expect("params serialize");
            linear_ou_coeffs(&p, spec.dims)
        }
        Family::NonlinearTest => {
            let mut p: NonlinearTestParams = parse_params(&spec.params)?;
            if p.gamma <= 0.0 {
                return Err(Error::InadmissibleParams("gamma must be positive".into()));
            }
            if p.g0 == 0.0 {
                return Err(Error::InadmissibleParams("g0 must be nonzero".into()));
            }
            for (name, v) in [
                ("amp_f", p.amp_f),
                ("amp_f2", p.amp_f2),
                ("amp_b", p.amp_b),
                ("amp_c", p.amp_c),
                ("amp_g", p.amp_g),
            ] {
                if v < 0.0 {
                    return Err(Error::InadmissibleParams(format!(
                        "{name} must be nonnegative"
                    )));
                }
            }
            if spec.dims.m > spec.dims.d {
                return Err(Error::InadmissibleParams(
                    "nonlinear-test requires m <= d (every fast coordinate needs noise)".into(),
                ));
            }
            let offset = match p.centering_offset {
                Some(v) => v,
                None => calibrate_centering_offset(&p),
            };
            p.centering_offset = Some(offset);
            resolved.params = serde_json::to_value(p).expect("params serialize");
            nonlinear_coeffs(&p, spec.dims, offset)
        }
        Family::ZeroK => {
            let p: ZeroKParams = parse_params(&spec.params)?;
            if p.gamma <= 0.0 {
                return Err(Error::InadmissibleParams("gamma must be positive".into()));
            }
            if p.g0 == 0.0 {
                return Err(Error::InadmissibleParams("g0 must be nonzero".into()));
            }
            resolved.params = serde_json::to_value(p).expect("params serialize");
            zero_k_coeffs(&p, spec.dims)
        }
    };
    Ok(Model {
        spec: resolved,
        coeffs,
    })
}

/// Closed forms for the linear family: invariant law, corrector, limiting
/// drift and both limiting diffusion matrices.
#[derive(Clone)]
pub struct OracleData {
    pub invariant_mean: MeanMap,
    /// Covariance of the invariant law of the frozen fast process (m x m).
    pub invariant_cov: DMatrix<f64>,
    pub phi: VecMap,
    pub theta: MeanMap,
    /// Limiting diffusion coefficient (n x n), principal PSD root.
    pub sigma_tilde: DMatrix<f64>,
    /// Matrix under the root in the corrector-pair form.
    pub sigma_mp_matrix: DMatrix<f64>,
    /// Its three terms: corrector pair, mixed cross term, direct slow noise.
    pub sigma_mp_parts: [DMatrix<f64>; 3],
    /// Matrix under the root in the Gram form; equals sigma_mp_matrix here.
    pub a_tilde_matrix: DMatrix<f64>,
}

/// Closed-form reference data. Only the linear family (with centered K,
/// i.e. k_shift = 0) has one; other families return None.
pub fn oracle_reference(spec: &ModelSpec) -> Result<Option<OracleData>> {
    if spec.family != Family::LinearOu {
        return Ok(None);
    }
    let p: LinearOuParams = parse_params(&spec.params)?;
    if p.gamma <= 0.0 || p.g0 == 0.0 {
        return Err(Error::InadmissibleParams(
            "oracle needs gamma > 0 and g0 != 0".into(),
        ));
    }
    if p.k_shift != 0.0 {
        return Ok(None); // centering broken: no corrector exists
    }
    let (n, m, d) = (spec.dims.n, spec.dims.m, spec.dims.d);
    let p_map = DMatrix::from_fn(n, m, |j, i| if i == j % m { 1.0 } else { 0.0 });
    let cov = DMatrix::from_fn(m, m, |i, j| {
        if i == j && i < d {
            p.g0 * p.g0 / (2.0 * p.gamma)
        } else {
            0.0
        }
    });
    let pr = p;
    let mdim = m;
    let invariant_mean: MeanMap = Arc::new(move |x, mu| linear_c(&pr, mdim, x, &mu.mean));
    let phi: VecMap = {
        let p_map = p_map.clone();
        Arc::new(move |x, mu, y| {
            let c = linear_c(&pr, mdim, x, &mu.mean);
            (pr.kappa / pr.gamma) * (&p_map * (y - c))
        })
    };
    let theta: MeanMap = Arc::new(move |x, mu| {
        -pr.lambda * x
            + pr.theta * &mu.mean
            + DVector::from_element(x.len(), pr.kappa * pr.eta / pr.gamma)
    });

    let sig = eye_pattern(n, d, p.sigma0);
    let gmat = eye_pattern(m, d, p.g0);
    let d_phi_dy = (p.kappa / p.gamma) * &p_map;
    let part_corr = 2.0 * (p.kappa * p.kappa / p.gamma) * &p_map * &cov * p_map.transpose();
    let sg = &sig * gmat.transpose();
    let part_cross = &sg * d_phi_dy.transpose() + &d_phi_dy * sg.transpose();
    let part_direct = &sig * sig.transpose();
    let sigma_mp_matrix = &part_corr + &part_cross + &part_direct;
    let t = &d_phi_dy * &gmat + &sig;
    let a_tilde_matrix = &t * t.transpose();
    let sigma_tilde = psd_sqrt(&a_tilde_matrix)?;
    Ok(Some(OracleData {
        invariant_mean,
        invariant_cov: cov,
        phi,
        theta,
        sigma_tilde,
        sigma_mp_matrix,
        sigma_mp_parts: [part_corr, part_cross, part_direct],
        a_tilde_matrix,
    }))
}

/// One spot-check statistic with the threshold it was judged against.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeCheck {
    pub name: String,
    pub observed: f64,
    pub bound: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<PairWitness>,
}

/// The probe pair realizing the worst statistic of a failed check.
#[derive(Debug, Clone, Serialize)]
pub struct PairWitness {
    pub x1: Vec<f64>,
    pub mu1_mean: Vec<f64>,
    pub y1: Vec<f64>,
    pub x2: Vec<f64>,
    pub mu2_mean: Vec<f64>,
    pub y2: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub budget: usize,
    pub slack: f64,
    pub lipschitz: Vec<ProbeCheck>,
    pub dissipativity: ProbeCheck,
    pub growth: Vec<ProbeCheck>,
    pub pass: bool,
}

/// Fraction by which observed ratios may exceed declared constants (and by
/// which the dissipativity margin is relaxed) before a check fails.
pub const ASSUMPTION_SLACK: f64 = 0.5;

const PROBE_CLOUD: usize = 32;

struct ProbeMax {
    value: f64,
    witness: Option<PairWitness>,
}

impl ProbeMax {
    fn new() -> Self {
        ProbeMax {
            value: f64::NEG_INFINITY,
            witness: None,
        }
    }

    fn update(&mut self, v: f64, w: impl Fn() -> PairWitness) {
        if v > self.value {
            self.value = v;
            self.witness = Some(w());
        }
    }

    fn into_check(self, name: &str, bound: f64, upper: bool) -> ProbeCheck {
        let observed = if self.value.is_finite() { self.value } else { 0.0 };
        let pass = if upper {
            observed <= bound + 1e-9
        } else {
            observed <= bound
        };
        ProbeCheck {
            name: name.to_string(),
            observed,
            bound,
            pass,
            witness: if pass { None } else { self.witness },
        }
    }
}

/// Monte-Carlo spot check of the standing assumptions on random probe
/// points: per-function Lipschitz ratios, the fast-drift dissipativity
/// statistic, and linear/sublinear growth ratios. A failed check is a
/// reported result, not an error.
pub fn verify_assumptions(
    cs: &CoefficientSet,
    budget: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    if budget < 100 {
        return Err(Error::InvalidInput(format!(
            "probe budget must be >= 100, got {budget}"
        )));
    }
    let (n, m) = (cs.dims.n, cs.dims.m);
    let keep_cloud = cs.measure_dependence == MeasureDependence::FullCloud;
    let block_dim = 2 * n + 2 * m + 2 * PROBE_CLOUD * n;
    let stream = NoiseStream::new(seed, StreamId::new(StreamPurpose::Probe, 0));

    let mut lip: Vec<ProbeMax> = (0..6).map(|_| ProbeMax::new()).collect();
    let mut dissip = ProbeMax::new();
    let mut growth: Vec<ProbeMax> = (0..5).map(|_| ProbeMax::new()).collect();

    for s in 0..budget {
        let blk = stream.standard_normals(s as u64, block_dim);
        let mut off = 0;
        let mut take = |len: usize| {
            let v = DVector::from_fn(len, |i, _| blk[off + i]);
            off += len;
            v
        };
        let x1 = take(n);
        let x2r = take(n);
        let y1 = take(m);
        let y2r = take(m);
        let c1 = take(PROBE_CLOUD * n);
        let c2r = take(PROBE_CLOUD * n);

        let close = s % 2 == 1;
        let scale = if close { 0.01 } else { 1.0 };
        let x2 = if close { &x1 + scale * &x2r } else { x2r };
        let y2 = if close { &y1 + scale * &y2r } else { y2r };
        let pts1 = DMatrix::from_fn(PROBE_CLOUD, n, |r, c| c1[r * n + c]);
        let pts2 = if close {
            DMatrix::from_fn(PROBE_CLOUD, n, |r, c| c1[r * n + c] + scale * c2r[r * n + c])
        } else {
            DMatrix::from_fn(PROBE_CLOUD, n, |r, c| c2r[r * n + c])
        };
        let mu1 = EmpiricalMeasure::from_samples(pts1)?;
        let mu2 = EmpiricalMeasure::from_samples(pts2)?;
        let s1 = mu1.summary(keep_cloud);
        let s2 = mu2.summary(keep_cloud);

        let witness = |ya: &DVector<f64>, yb: &DVector<f64>| {
            let (x1, x2, s1m, s2m) = (x1.clone(), x2.clone(), s1.mean.clone(), s2.mean.clone());
            let (ya, yb) = (ya.clone(), yb.clone());
            move || PairWitness {
                x1: x1.as_slice().to_vec(),
                mu1_mean: s1m.as_slice().to_vec(),
                y1: ya.as_slice().to_vec(),
                x2: x2.as_slice().to_vec(),
                mu2_mean: s2m.as_slice().to_vec(),
                y2: yb.as_slice().to_vec(),
            }
        };

        let w2 = w2_distance(&mu1, &mu2, W2Method::Exact)?;
        let dist = (&x1 - &x2).norm() + w2 + (&y1 - &y2).norm();

        let v1 = [
            (cs.b)(&x1, &s1, &y1),
            (cs.k)(&x1, &s1, &y1),
            (cs.f)(&x1, &s1, &y1),
            (cs.h)(&x1, &s1, &y1),
        ];
        let m1 = [(cs.sigma)(&x1, &s1, &y1), (cs.g)(&x1, &s1, &y1)];

        if dist > 1e-9 {
            let v2 = [
                (cs.b)(&x2, &s2, &y2),
                (cs.k)(&x2, &s2, &y2),
                (cs.f)(&x2, &s2, &y2),
                (cs.h)(&x2, &s2, &y2),
            ];
            let m2 = [(cs.sigma)(&x2, &s2, &y2), (cs.g)(&x2, &s2, &y2)];
            // reporting order b, K, sigma, f, h, g
            let diffs = [
                (&v1[0] - &v2[0]).norm(),
                (&v1[1] - &v2[1]).norm(),
                (&m1[0] - &m2[0]).norm(),
                (&v1[2] - &v2[2]).norm(),
                (&v1[3] - &v2[3]).norm(),
                (&m1[1] - &m2[1]).norm(),
            ];
            for (i, dv) in diffs.iter().enumerate() {
                lip[i].update(dv / dist, witness(&y1, &y2));
            }
        }

        let dy = &y1 - &y2;
        let dy2 = dy.norm_squared();
        if dy2 > 1e-18 {
            let f2 = (cs.f)(&x1, &s1, &y2);
            let g2 = (cs.g)(&x1, &s1, &y2);
            let stat = (2.0 * (&v1[2] - &f2).dot(&dy) + (&m1[1] - &g2).norm_squared()) / dy2;
            dissip.update(stat, witness(&y1, &y2));
        }

        let lin_env = 1.0 + y1.norm();
        let sub_env = 1.0 + y1.norm().powf(cs.varsigma);
        let ratios = [
            v1[1].norm() / lin_env,
            v1[2].norm() / lin_env,
            v1[3].norm() / lin_env,
            m1[0].norm() / lin_env,
            m1[1].norm() / sub_env,
        ];
        for (i, r) in ratios.iter().enumerate() {
            growth[i].update(*r, witness(&y1, &y1));
        }
    }

    let lipschitz: Vec<ProbeCheck> = lip
        .into_iter()
        .zip(COEF_NAMES)
        .map(|(pm, name)| {
            let idx = COEF_NAMES.iter().position(|n| *n == name).unwrap();
            pm.into_check(
                &format!("lipschitz {name}"),
                cs.declared.lipschitz[idx] * (1.0 + ASSUMPTION_SLACK),
                true,
            )
        })
        .collect();
    let dissipativity = dissip.into_check(
        "dissipativity",
        -cs.gamma * (1.0 - ASSUMPTION_SLACK),
        false,
    );
    let growth_checks: Vec<ProbeCheck> = growth
        .into_iter()
        .zip(GROWTH_NAMES)
        .enumerate()
        .map(|(i, (pm, name))| {
            pm.into_check(
                &format!("growth {name}"),
                cs.declared.growth[i] * (1.0 + ASSUMPTION_SLACK),
                true,
            )
        })
        .collect();
    let pass = lipschitz.iter().all(|c| c.pass)
        && dissipativity.pass
        && growth_checks.iter().all(|c| c.pass);
    Ok(AssumptionReport {
        budget,
        slack: ASSUMPTION_SLACK,
        lipschitz,
        dissipativity,
        growth: growth_checks,
        pass,
    })
}
