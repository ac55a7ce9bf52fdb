//! Parameter extraction: coherence times and lifetimes from decay datasets,
//! spin-Hamiltonian tensors from line-position lists.
//!
//! Pure-exponential decays are fit linearly in log intensity (the slope is
//! exact for noiseless data); a Levenberg–Marquardt refinement runs only when
//! the stretch exponent is free. Parameter variances come from the linearized
//! normal equations at the optimum — no bootstrap.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::levels::solve_at;
use crate::spin::{FieldVec, SpinParams, SpinSystem};

/// Result of a T₂ decay fit. `residual_norm` is the L2 norm of the residuals
/// in log intensity (the domain the fit runs in).
#[derive(Clone, Debug)]
pub struct DecayFit {
    pub t2_us: f64,
    pub amplitude: f64,
    /// Fitted stretch exponent; `None` when it was held at 1.
    pub stretch: Option<f64>,
    pub residual_norm: f64,
    pub t2_variance: f64,
    pub amplitude_variance: f64,
    pub stretch_variance: Option<f64>,
    pub converged: bool,
    pub diagnostic: Option<String>,
}

/// Two-pulse echo intensity vs τ: I(τ) = A·exp(−2(2τ/T₂)^x).
/// With x fixed at 1 this is the linear log fit ln I = ln A − 4τ/T₂.
pub fn fit_t2_two_pulse(data: &[(f64, f64)], allow_stretch: bool) -> Result<DecayFit> {
    fit_echo_decay(data, 4.0, 2.0, allow_stretch)
}

/// CPMG echo intensity vs total time T: I(T) = A·exp(−2(T/T₂)^x), so the
/// x = 1 log slope is −2/T₂.
pub fn fit_t2_cpmg(data: &[(f64, f64)], allow_stretch: bool) -> Result<DecayFit> {
    fit_echo_decay(data, 2.0, 1.0, allow_stretch)
}

/// Shared echo-decay fit. `lin_k`: |log slope|·T₂ for x = 1 (4 for two-pulse,
/// 2 for CPMG). `u_c`: time prefactor in the stretched form 2(u_c·t/T₂)^x.
fn fit_echo_decay(
    data: &[(f64, f64)],
    lin_k: f64,
    u_c: f64,
    allow_stretch: bool,
) -> Result<DecayFit> {
    let needed = if allow_stretch { 4 } else { 3 };
    let (times, logs) = log_domain(data, needed)?;
    let lin = linear_fit(&times, &logs)?;

    if lin.slope >= 0.0 {
        return Ok(DecayFit {
            t2_us: f64::INFINITY,
            amplitude: lin.intercept.exp(),
            stretch: None,
            residual_norm: lin.rss.sqrt(),
            t2_variance: f64::INFINITY,
            amplitude_variance: lin.intercept.exp().powi(2) * lin.var_intercept,
            stretch_variance: None,
            converged: false,
            diagnostic: Some(
                "non-decaying data: log slope ≥ 0, T2 is unbounded".to_string(),
            ),
        });
    }

    let t2_lin = -lin_k / lin.slope;
    if !allow_stretch {
        let amplitude = lin.intercept.exp();
        return Ok(DecayFit {
            t2_us: t2_lin,
            amplitude,
            stretch: None,
            residual_norm: lin.rss.sqrt(),
            t2_variance: (lin_k / (lin.slope * lin.slope)).powi(2) * lin.var_slope,
            amplitude_variance: amplitude * amplitude * lin.var_intercept,
            stretch_variance: None,
            converged: true,
            diagnostic: None,
        });
    }

    // Stretch free: LM on θ = (ln A, ln T2, x) against the log data. The log
    // parameterization keeps T2 positive without constraints.
    let y = DVector::from_vec(logs.clone());
    let residuals = |theta: &DVector<f64>| -> Option<DVector<f64>> {
        let (ln_a, ln_t2, x) = (theta[0], theta[1], theta[2]);
        if !(0.1..=10.0).contains(&x) {
            return None; // keep the exponent in a physical range
        }
        let t2 = ln_t2.exp();
        let r = DVector::from_iterator(
            times.len(),
            times.iter().zip(y.iter()).map(|(&t, &yi)| {
                let u = u_c * t / t2;
                yi - (ln_a - 2.0 * u.powf(x))
            }),
        );
        r.iter().all(|v| v.is_finite()).then_some(r)
    };
    let theta0 = DVector::from_vec(vec![lin.intercept, t2_lin.ln(), 1.0]);
    let lm = levenberg_marquardt(&residuals, theta0, 200, 1e-10);

    let t2 = lm.x[1].exp();
    let amplitude = lm.x[0].exp();
    let x = lm.x[2];
    // Delta-method variances from the final Jacobian: cov(θ) = σ²(JᵀJ)⁻¹.
    let dof = times.len().saturating_sub(3).max(1) as f64;
    let sigma2 = lm.cost * 2.0 / dof;
    let var = lm
        .covariance_scale
        .as_ref()
        .map(|c| (c[0] * sigma2, c[1] * sigma2, c[2] * sigma2));
    let (var_lna, var_lnt2, var_x) = var.unwrap_or((f64::NAN, f64::NAN, f64::NAN));
    Ok(DecayFit {
        t2_us: t2,
        amplitude,
        stretch: Some(x),
        residual_norm: (lm.cost * 2.0).sqrt(),
        t2_variance: t2 * t2 * var_lnt2,
        amplitude_variance: amplitude * amplitude * var_lna,
        stretch_variance: Some(var_x),
        converged: lm.converged,
        diagnostic: (!lm.converged).then(|| {
            format!("stretched fit stopped after {} iterations", lm.iterations)
        }),
    })
}

fn log_domain(data: &[(f64, f64)], needed: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if data.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            got: data.len(),
        });
    }
    for (index, &(t, i)) in data.iter().enumerate() {
        if !t.is_finite() || !i.is_finite() {
            return Err(Error::InvalidInput(format!(
                "data point {index} is not finite: ({t}, {i})"
            )));
        }
        if i <= 0.0 {
            return Err(Error::NonPositiveIntensity { index, value: i });
        }
    }
    Ok(data.iter().map(|&(t, _)| t).collect::<Vec<_>>())
        .map(|times| (times, data.iter().map(|&(_, i)| i.ln()).collect()))
}

struct LinearFit {
    intercept: f64,
    slope: f64,
    var_intercept: f64,
    var_slope: f64,
    rss: f64,
}

/// Ordinary least squares y = a + b·t with variances from σ² = RSS/(n−2).
fn linear_fit(t: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = t.len() as f64;
    let st: f64 = t.iter().sum();
    let sy: f64 = y.iter().sum();
    let stt: f64 = t.iter().map(|v| v * v).sum();
    let sty: f64 = t.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = n * stt - st * st;
    let scale = stt.max(1.0);
    if det <= 1e-12 * n * scale {
        return Err(Error::SingularFit(
            "time values do not span a fittable range".to_string(),
        ));
    }
    let slope = (n * sty - st * sy) / det;
    let intercept = (sy - slope * st) / n;
    let rss: f64 = t
        .iter()
        .zip(y)
        .map(|(&ti, &yi)| (yi - intercept - slope * ti).powi(2))
        .sum();
    let sigma2 = if t.len() > 2 { rss / (n - 2.0) } else { 0.0 };
    Ok(LinearFit {
        intercept,
        slope,
        var_intercept: sigma2 * stt / det,
        var_slope: sigma2 * n / det,
        rss,
    })
}

// ---------------------------------------------------------------------------
// Lifetime classification
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LifetimeClass {
    /// Decay consistent with relaxation through the short-lived plane.
    ExcitedLike,
    /// Persistence beyond the configured floor: ground-plane storage.
    GroundLike,
    Unclassified,
}

/// Classification bands for [`fit_lifetime`].
#[derive(Clone, Copy, Debug)]
pub struct LifetimeConfig {
    /// Reference excited-plane lifetime, ms.
    pub excited_reference_ms: f64,
    /// Accept T₁ within this factor of the reference as excited-like.
    pub excited_factor: f64,
    /// Ground-like when the 1σ lower bound of T₁ exceeds this floor, ms.
    pub ground_min_ms: f64,
}

impl Default for LifetimeConfig {
    fn default() -> Self {
        LifetimeConfig {
            excited_reference_ms: 11.0,
            excited_factor: 3.0,
            ground_min_ms: 60.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LifetimeFit {
    pub t1_ms: f64,
    pub t1_sigma_ms: f64,
    pub amplitude: f64,
    pub class: LifetimeClass,
    pub residual_norm: f64,
    pub diagnostic: Option<String>,
}

/// Single-exponential lifetime fit I(τ_d) = A·exp(−τ_d/T₁) on (dark time ms,
/// intensity) data, with a band classification of the recovered T₁.
pub fn fit_lifetime(data: &[(f64, f64)], cfg: &LifetimeConfig) -> Result<LifetimeFit> {
    let (times, logs) = log_domain(data, 3)?;
    let lin = linear_fit(&times, &logs)?;
    let (t1, sigma, diagnostic) = if lin.slope >= 0.0 {
        (
            f64::INFINITY,
            0.0,
            Some("non-decaying data: T1 unbounded from below the floor".to_string()),
        )
    } else {
        let t1 = -1.0 / lin.slope;
        (t1, (lin.var_slope).sqrt() * t1 * t1, None)
    };
    let class = if t1 - sigma > cfg.ground_min_ms {
        LifetimeClass::GroundLike
    } else if t1 >= cfg.excited_reference_ms / cfg.excited_factor
        && t1 <= cfg.excited_reference_ms * cfg.excited_factor
    {
        LifetimeClass::ExcitedLike
    } else {
        LifetimeClass::Unclassified
    };
    Ok(LifetimeFit {
        t1_ms: t1,
        t1_sigma_ms: sigma,
        amplitude: lin.intercept.exp(),
        class,
        residual_norm: lin.rss.sqrt(),
        diagnostic,
    })
}

// ---------------------------------------------------------------------------
// Spin-Hamiltonian parameter fits
// ---------------------------------------------------------------------------

/// One measured line: a field point and an observed transition frequency,
/// optionally pinned to a level pair (sorted-index convention). Without the
/// hint the observation is re-matched to the nearest model line at every
/// residual evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Observation {
    pub field: FieldVec,
    pub freq_mhz: f64,
    pub pair: Option<(usize, usize)>,
}

/// Which tensor components may vary. Q entries follow the symmetric traceless
/// convention: freeing an off-diagonal component frees its mirror, and free
/// diagonal components carry the trace constraint (so freeing exactly one is
/// rejected, and freeing d of them yields d − 1 degrees of freedom).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FreeMask {
    pub g: [[bool; 3]; 3],
    pub a: [[bool; 3]; 3],
    pub q: [[bool; 3]; 3],
    pub nuclear_g: bool,
}

impl FreeMask {
    pub fn none() -> Self {
        FreeMask::default()
    }

    pub fn all_g() -> Self {
        FreeMask {
            g: [[true; 3]; 3],
            ..Default::default()
        }
    }

    pub fn all_a() -> Self {
        FreeMask {
            a: [[true; 3]; 3],
            ..Default::default()
        }
    }

    pub fn with_g(mut self, row: usize, col: usize) -> Self {
        self.g[row][col] = true;
        self
    }

    pub fn with_a(mut self, row: usize, col: usize) -> Self {
        self.a[row][col] = true;
        self
    }

    pub fn with_q(mut self, row: usize, col: usize) -> Self {
        self.q[row][col] = true;
        self
    }

    pub fn with_nuclear_g(mut self) -> Self {
        self.nuclear_g = true;
        self
    }

    pub fn is_empty(&self) -> bool {
        !self.nuclear_g
            && self
                .g
                .iter()
                .chain(&self.a)
                .chain(&self.q)
                .flatten()
                .all(|&f| !f)
    }
}

#[derive(Clone, Copy, Debug)]
enum Dof {
    G(usize, usize),
    A(usize, usize),
    /// Mirrored off-diagonal Q component (row < col).
    QOff(usize, usize),
    /// Leading free Q diagonal; the dependent one absorbs the trace.
    QDiag(usize),
    NuclearG,
}

/// Compiled free-parameter layout: ordered dofs, display names, and the
/// dependent Q diagonal (if any) that enforces the traceless convention.
struct Packing {
    dofs: Vec<Dof>,
    names: Vec<String>,
    q_dependent: Option<usize>,
}

impl Packing {
    fn compile(mask: &FreeMask) -> Result<Packing> {
        let mut dofs = Vec::new();
        let mut names = Vec::new();
        for r in 0..3 {
            for c in 0..3 {
                if mask.g[r][c] {
                    dofs.push(Dof::G(r, c));
                    names.push(format!("g[{r},{c}]"));
                }
            }
        }
        for r in 0..3 {
            for c in 0..3 {
                if mask.a[r][c] {
                    dofs.push(Dof::A(r, c));
                    names.push(format!("A[{r},{c}]"));
                }
            }
        }
        for r in 0..3 {
            for c in (r + 1)..3 {
                if mask.q[r][c] || mask.q[c][r] {
                    dofs.push(Dof::QOff(r, c));
                    names.push(format!("Q[{r},{c}]"));
                }
            }
        }
        let diag: Vec<usize> = (0..3).filter(|&i| mask.q[i][i]).collect();
        let q_dependent = match diag.len() {
            0 => None,
            1 => {
                return Err(Error::InvalidParams(format!(
                    "freeing only Q[{0},{0}] conflicts with the traceless convention; \
                     free at least two diagonal components",
                    diag[0]
                )))
            }
            d => {
                for &i in &diag[..d - 1] {
                    dofs.push(Dof::QDiag(i));
                    names.push(format!("Q[{i},{i}]"));
                }
                Some(diag[d - 1])
            }
        };
        if mask.nuclear_g {
            dofs.push(Dof::NuclearG);
            names.push("nuclear_g".to_string());
        }
        Ok(Packing {
            dofs,
            names,
            q_dependent,
        })
    }

    fn read(&self, params: &SpinParams) -> DVector<f64> {
        DVector::from_iterator(
            self.dofs.len(),
            self.dofs.iter().map(|dof| match *dof {
                Dof::G(r, c) => params.g[(r, c)],
                Dof::A(r, c) => params.a_mhz[(r, c)],
                Dof::QOff(r, c) => params.q_mhz[(r, c)],
                Dof::QDiag(i) => params.q_mhz[(i, i)],
                Dof::NuclearG => params.nuclear_g,
            }),
        )
    }

    fn apply(&self, base: &SpinParams, values: &DVector<f64>) -> SpinParams {
        let mut params = base.clone();
        for (dof, &v) in self.dofs.iter().zip(values.iter()) {
            match *dof {
                Dof::G(r, c) => params.g[(r, c)] = v,
                Dof::A(r, c) => params.a_mhz[(r, c)] = v,
                Dof::QOff(r, c) => {
                    params.q_mhz[(r, c)] = v;
                    params.q_mhz[(c, r)] = v;
                }
                Dof::QDiag(i) => params.q_mhz[(i, i)] = v,
                Dof::NuclearG => params.nuclear_g = v,
            }
        }
        if let Some(dep) = self.q_dependent {
            let others: f64 = (0..3)
                .filter(|&i| i != dep)
                .map(|i| params.q_mhz[(i, i)])
                .sum();
            params.q_mhz[(dep, dep)] = -others;
        }
        params
    }
}

#[derive(Clone, Debug)]
pub struct HamFitConfig {
    pub max_iterations: usize,
    /// Convergence: ‖Jᵀr‖∞ below this (MHz per parameter unit).
    pub gradient_tolerance: f64,
    /// Relative spread of the seeded multi-start perturbations.
    pub start_spread: f64,
    /// Two model lines within this of a matched observation flag it ambiguous.
    pub ambiguity_linewidth_mhz: f64,
}

impl Default for HamFitConfig {
    fn default() -> Self {
        HamFitConfig {
            max_iterations: 200,
            gradient_tolerance: 1e-8,
            start_spread: 0.1,
            ambiguity_linewidth_mhz: 5.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HamFitResult {
    pub params: SpinParams,
    pub per_datum_residuals_mhz: Vec<f64>,
    pub residual_norm_mhz: f64,
    pub converged: bool,
    pub start_index: usize,
    /// Observation indices where ≥ 2 model lines fall within the ambiguity
    /// linewidth — the assignment there is not trustworthy.
    pub ambiguous: Vec<usize>,
}

/// Fit the masked spin-Hamiltonian components to observed line positions by
/// seeded multi-start Levenberg–Marquardt. Start 0 is the initial guess
/// itself; the rest perturb the free components. Results are sorted by
/// residual norm.
pub fn fit_hamiltonian_params(
    observations: &[Observation],
    initial: &SpinParams,
    mask: &FreeMask,
    n_starts: usize,
    seed: u64,
    cfg: &HamFitConfig,
) -> Result<Vec<HamFitResult>> {
    initial.validate()?;
    if observations.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let dim = initial.dimension();
    for (i, obs) in observations.iter().enumerate() {
        if !obs.freq_mhz.is_finite() || !obs.field.as_vector().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!("observation {i} is not finite")));
        }
        if let Some((lo, hi)) = obs.pair {
            if lo >= hi || hi >= dim {
                return Err(Error::InvalidInput(format!(
                    "observation {i}: pair ({lo}, {hi}) out of range for {dim} levels"
                )));
            }
        }
    }
    if n_starts == 0 {
        return Err(Error::InvalidInput("need at least one start".to_string()));
    }

    let packing = Packing::compile(mask)?;
    let theta0 = packing.read(initial);

    if packing.dofs.is_empty() {
        // No-op fit: report the initial parameters and their residuals.
        let r = residual_vector(observations, initial, &packing, &theta0)
            .ok_or_else(|| Error::SingularFit("initial parameters are unsolvable".into()))?;
        return Ok(vec![finish_result(
            observations,
            initial,
            &packing,
            &theta0,
            &r,
            true,
            0,
            cfg,
        )]);
    }
    if observations.len() < packing.dofs.len() {
        return Err(Error::Underdetermined {
            points: observations.len(),
            dof: packing.dofs.len(),
            names: packing.names.join(", "),
        });
    }

    // Independent starts in parallel; ordered collect + stable sort keep the
    // output identical for any thread count.
    let mut results: Vec<HamFitResult> = (0..n_starts)
        .into_par_iter()
        .map(|start_index| {
            let theta_start = if start_index == 0 {
                theta0.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(start_index as u64);
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                DVector::from_iterator(
                    theta0.len(),
                    theta0.iter().map(|&v| {
                        v + cfg.start_spread * v.abs().max(1.0) * normal.sample(&mut rng)
                    }),
                )
            };
            let f = |theta: &DVector<f64>| residual_vector(observations, initial, &packing, theta);
            let lm = levenberg_marquardt(&f, theta_start, cfg.max_iterations, cfg.gradient_tolerance);
            let r = residual_vector(observations, initial, &packing, &lm.x)
                .unwrap_or_else(|| DVector::from_element(observations.len(), f64::INFINITY));
            finish_result(
                observations,
                initial,
                &packing,
                &lm.x,
                &r,
                lm.converged,
                start_index,
                cfg,
            )
        })
        .collect();
    results.sort_by(|a, b| {
        a.residual_norm_mhz
            .total_cmp(&b.residual_norm_mhz)
            .then(a.start_index.cmp(&b.start_index))
    });
    Ok(results)
}

/// Model-minus-observed frequencies at the given free-parameter values.
/// `None` when the parameters fail validation or a solve fails, which LM
/// treats as an infinitely bad step.
fn residual_vector(
    observations: &[Observation],
    base: &SpinParams,
    packing: &Packing,
    theta: &DVector<f64>,
) -> Option<DVector<f64>> {
    let params = packing.apply(base, theta);
    let sys = SpinSystem::new(&params).ok()?;
    let mut r = DVector::zeros(observations.len());
    for (i, obs) in observations.iter().enumerate() {
        let levels = solve_at(&sys, obs.field).ok()?;
        let f_model = match obs.pair {
            Some((lo, hi)) => levels.energies[hi] - levels.energies[lo],
            None => nearest_line(&levels.energies, obs.freq_mhz)?,
        };
        r[i] = f_model - obs.freq_mhz;
    }
    Some(r)
}

/// The model transition frequency closest to `target` over all level pairs.
fn nearest_line(energies: &DVector<f64>, target: f64) -> Option<f64> {
    let n = energies.len();
    let mut best: Option<f64> = None;
    for lo in 0..n {
        for hi in (lo + 1)..n {
            let f = energies[hi] - energies[lo];
            if best.is_none_or(|b: f64| (f - target).abs() < (b - target).abs()) {
                best = Some(f);
            }
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn finish_result(
    observations: &[Observation],
    base: &SpinParams,
    packing: &Packing,
    theta: &DVector<f64>,
    residuals: &DVector<f64>,
    converged: bool,
    start_index: usize,
    cfg: &HamFitConfig,
) -> HamFitResult {
    let params = packing.apply(base, theta);
    let ambiguous = flag_ambiguous(observations, &params, cfg.ambiguity_linewidth_mhz);
    HamFitResult {
        params,
        per_datum_residuals_mhz: residuals.iter().copied().collect(),
        residual_norm_mhz: residuals.norm(),
        converged: converged && residuals.iter().all(|v| v.is_finite()),
        start_index,
        ambiguous,
    }
}

/// Observation indices where at least two model lines sit within the
/// linewidth of the observed frequency.
fn flag_ambiguous(observations: &[Observation], params: &SpinParams, linewidth: f64) -> Vec<usize> {
    let Ok(sys) = SpinSystem::new(params) else {
        return Vec::new();
    };
    let mut flags = Vec::new();
    for (i, obs) in observations.iter().enumerate() {
        let Ok(levels) = solve_at(&sys, obs.field) else {
            continue;
        };
        let n = levels.dim();
        let mut close = 0usize;
        for lo in 0..n {
            for hi in (lo + 1)..n {
                let f = levels.energies[hi] - levels.energies[lo];
                if (f - obs.freq_mhz).abs() <= linewidth {
                    close += 1;
                }
            }
        }
        if close >= 2 {
            flags.push(i);
        }
    }
    flags
}

// ---------------------------------------------------------------------------
// Levenberg–Marquardt core (finite-difference Jacobian)
// ---------------------------------------------------------------------------

struct LmOutcome {
    x: DVector<f64>,
    /// 0.5·‖r‖² at the solution.
    cost: f64,
    converged: bool,
    iterations: usize,
    /// Diagonal of (JᵀJ)⁻¹ at the solution (None when singular).
    covariance_scale: Option<Vec<f64>>,
}

/// Damped least squares with central-difference Jacobians. The residual
/// closure may return `None` for unevaluable parameter sets; such steps are
/// rejected.
fn levenberg_marquardt<F>(
    f: &F,
    x0: DVector<f64>,
    max_iterations: usize,
    gradient_tolerance: f64,
) -> LmOutcome
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>> + Sync,
{
    let n = x0.len();
    let mut x = x0;
    let Some(mut r) = f(&x) else {
        return LmOutcome {
            x,
            cost: f64::INFINITY,
            converged: false,
            iterations: 0,
            covariance_scale: None,
        };
    };
    let mut cost = 0.5 * r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let mut jtj_final: Option<DMatrix<f64>> = None;

    for iter in 0..max_iterations {
        iterations = iter + 1;
        let Some(jac) = fd_jacobian(f, &x, &r) else {
            break;
        };
        let jtr = jac.transpose() * &r;
        let jtj = jac.transpose() * &jac;
        jtj_final = Some(jtj.clone());
        if jtr.amax() < gradient_tolerance {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..12 {
            // Marquardt scaling: damp along the curvature diagonal.
            let mut damped = jtj.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = &x + &step;
            if let Some(rc) = f(&candidate) {
                let new_cost = 0.5 * rc.norm_squared();
                if new_cost < cost {
                    let rel_drop = (cost - new_cost) / cost.max(1e-300);
                    x = candidate;
                    r = rc;
                    cost = new_cost;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    if rel_drop < 1e-14 {
                        converged = true;
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No downhill step found at any damping: treat the current point
            // as the (possibly non-converged) optimum.
            converged = converged || jtr.amax() < gradient_tolerance.max(1e-6);
            break;
        }
        if converged {
            break;
        }
    }

    let covariance_scale = jtj_final.and_then(|jtj| {
        jtj.try_inverse()
            .map(|inv| (0..n).map(|i| inv[(i, i)]).collect())
    });
    LmOutcome {
        x,
        cost,
        converged,
        iterations,
        covariance_scale,
    }
}

fn fd_jacobian<F>(f: &F, x: &DVector<f64>, r0: &DVector<f64>) -> Option<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    let (m, n) = (r0.len(), x.len());
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        let mut xp = x.clone();
        xp[j] += h;
        let mut xm = x.clone();
        xm[j] -= h;
        match (f(&xp), f(&xm)) {
            (Some(rp), Some(rm)) => {
                for i in 0..m {
                    jac[(i, j)] = (rp[i] - rm[i]) / (2.0 * h);
                }
            }
            // Fall back to one-sided differences at the edge of validity.
            (Some(rp), None) => {
                for i in 0..m {
                    jac[(i, j)] = (rp[i] - r0[i]) / h;
                }
            }
            (None, Some(rm)) => {
                for i in 0..m {
                    jac[(i, j)] = (r0[i] - rm[i]) / h;
                }
            }
            (None, None) => return None,
        }
    }
    Some(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{decay_curve, DecayModel};
    use crate::spin::HalfSpin;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3 as M3;

    fn tau_grid(max: f64, n: usize) -> Vec<f64> {
        (1..=n).map(|k| max * k as f64 / n as f64).collect()
    }

    #[test]
    fn two_pulse_fit_is_exact_on_noiseless_data() {
        for &t2 in &[67.0, 300.0] {
            let data =
                decay_curve(DecayModel::TwoPulse, t2, &tau_grid(t2, 12), 1.0, 0.0, 0).unwrap();
            let fit = fit_t2_two_pulse(&data, false).unwrap();
            assert_relative_eq!(fit.t2_us, t2, max_relative = 1e-9);
            assert!(fit.converged);
            assert!(fit.residual_norm < 1e-9);
            assert!(fit.t2_variance < 1e-12);
            assert_relative_eq!(fit.amplitude, 1.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn cpmg_fit_is_exact_on_noiseless_data() {
        for &t2 in &[370.0, 380.0, 1370.0, 1450.0] {
            let data =
                decay_curve(DecayModel::Cpmg, t2, &tau_grid(2.0 * t2, 10), 1.0, 0.0, 0).unwrap();
            let fit = fit_t2_cpmg(&data, false).unwrap();
            assert_relative_eq!(fit.t2_us, t2, max_relative = 1e-9);
        }
    }

    #[test]
    fn noisy_fits_stay_within_five_percent() {
        let data =
            decay_curve(DecayModel::TwoPulse, 300.0, &tau_grid(300.0, 10), 1.0, 0.05, 21).unwrap();
        let fit = fit_t2_two_pulse(&data, false).unwrap();
        assert!(
            (fit.t2_us - 300.0).abs() / 300.0 < 0.05,
            "recovered {} µs",
            fit.t2_us
        );
        let data =
            decay_curve(DecayModel::Cpmg, 370.0, &tau_grid(740.0, 12), 1.0, 0.05, 22).unwrap();
        let fit = fit_t2_cpmg(&data, false).unwrap();
        assert!(
            (fit.t2_us - 370.0).abs() / 370.0 < 0.05,
            "recovered {} µs",
            fit.t2_us
        );
    }

    #[test]
    fn stretched_fit_recovers_exponent_and_t2() {
        let data =
            decay_curve(DecayModel::TwoPulse, 500.0, &tau_grid(600.0, 14), 1.8, 0.0, 0).unwrap();
        let fit = fit_t2_two_pulse(&data, true).unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.t2_us, 500.0, max_relative = 1e-6);
        assert_relative_eq!(fit.stretch.unwrap(), 1.8, max_relative = 1e-6);
        assert!(fit.residual_norm < 1e-8);
    }

    #[test]
    fn point_count_preconditions() {
        let two = [(10.0, 0.5), (20.0, 0.25)];
        assert!(matches!(
            fit_t2_two_pulse(&two, false),
            Err(Error::InsufficientData { needed: 3, got: 2 })
        ));
        let three = [(10.0, 0.5), (20.0, 0.25), (30.0, 0.125)];
        assert!(matches!(
            fit_t2_two_pulse(&three, true),
            Err(Error::InsufficientData { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn non_positive_intensity_is_rejected_with_location() {
        let data = [(10.0, 0.5), (20.0, 0.0), (30.0, 0.1)];
        match fit_t2_two_pulse(&data, false) {
            Err(Error::NonPositiveIntensity { index, value }) => {
                assert_eq!(index, 1);
                assert_eq!(value, 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn constant_data_reports_unbounded_t2() {
        let data: Vec<(f64, f64)> = (1..=6).map(|k| (10.0 * k as f64, 0.7)).collect();
        let fit = fit_t2_two_pulse(&data, false).unwrap();
        assert!(fit.t2_us.is_infinite());
        assert!(!fit.converged);
        assert!(fit.diagnostic.unwrap().contains("unbounded"));
    }

    #[test]
    fn degenerate_time_axis_is_singular() {
        let data = [(10.0, 0.5), (10.0, 0.4), (10.0, 0.3)];
        assert!(matches!(
            fit_t2_two_pulse(&data, false),
            Err(Error::SingularFit(_))
        ));
    }

    #[test]
    fn lifetime_bands_classify_as_specified() {
        let cfg = LifetimeConfig::default();
        let synth = |t1: f64| -> Vec<(f64, f64)> {
            (0..8).map(|k| {
                let t = 2.0 * k as f64;
                (t, (-t / t1).exp())
            }).collect()
        };
        let fit = fit_lifetime(&synth(11.0), &cfg).unwrap();
        assert_eq!(fit.class, LifetimeClass::ExcitedLike);
        assert_relative_eq!(fit.t1_ms, 11.0, max_relative = 1e-9);

        let flat: Vec<(f64, f64)> = (0..7).map(|k| (10.0 * k as f64, 0.9)).collect();
        let fit = fit_lifetime(&flat, &cfg).unwrap();
        assert_eq!(fit.class, LifetimeClass::GroundLike);
        assert!(fit.t1_ms.is_infinite());

        let fit = fit_lifetime(&synth(1.0), &cfg).unwrap();
        assert_eq!(fit.class, LifetimeClass::Unclassified);
        assert_relative_eq!(fit.t1_ms, 1.0, max_relative = 1e-9);
    }

    // --- Hamiltonian fits -------------------------------------------------

    fn er_like_params() -> SpinParams {
        SpinParams {
            electron_spin: HalfSpin::new(0.5).unwrap(),
            nuclear_spin: HalfSpin::new(3.5).unwrap(),
            g: M3::new(3.1, -2.5, 1.9, -2.5, 5.8, -1.2, 1.9, -1.2, 10.3),
            a_mhz: M3::new(120.0, -60.0, 45.0, -60.0, 210.0, -30.0, 45.0, -30.0, -480.0),
            q_mhz: M3::new(25.0, 10.0, -5.0, 10.0, -12.0, 8.0, -5.0, 8.0, -13.0),
            nuclear_g: -0.1618,
            nuclear_zeeman: true,
            label: "er_like".into(),
        }
    }

    /// Zero-field + low-field line positions with pair hints, from the lowest
    /// few transitions of the true system.
    fn synthetic_observations(params: &SpinParams) -> Vec<Observation> {
        let sys = SpinSystem::new(params).unwrap();
        let fields = [
            FieldVec::zero(),
            FieldVec::new(0.0, 0.0, 2e-3),
            FieldVec::new(1.5e-3, 0.0, 0.0),
            FieldVec::new(0.0, 1e-3, 1e-3),
        ];
        let mut obs = Vec::new();
        for field in fields {
            let levels = solve_at(&sys, field).unwrap();
            for lo in 0..4 {
                obs.push(Observation {
                    field,
                    freq_mhz: levels.energies[lo + 1] - levels.energies[lo],
                    pair: Some((lo, lo + 1)),
                });
            }
        }
        obs
    }

    #[test]
    fn forty_five_mhz_perturbation_is_removed() {
        let truth = er_like_params();
        let obs = synthetic_observations(&truth);
        let mut start = truth.clone();
        start.a_mhz[(2, 2)] += 45.0;
        let mask = FreeMask::none().with_a(2, 2);
        let results =
            fit_hamiltonian_params(&obs, &start, &mask, 1, 5, &HamFitConfig::default()).unwrap();
        let best = &results[0];
        assert!(best.converged);
        assert!(best.residual_norm_mhz < 1e-5, "norm {}", best.residual_norm_mhz);
        assert_relative_eq!(best.params.a_mhz[(2, 2)], -480.0, epsilon = 1e-4);
    }

    #[test]
    fn nearest_line_matching_works_without_hints() {
        let truth = er_like_params();
        let mut obs = synthetic_observations(&truth);
        for o in &mut obs {
            o.pair = None;
        }
        let mut start = truth.clone();
        start.a_mhz[(2, 2)] += 45.0;
        let mask = FreeMask::none().with_a(2, 2);
        let results =
            fit_hamiltonian_params(&obs, &start, &mask, 4, 5, &HamFitConfig::default()).unwrap();
        let best = &results[0];
        assert!(best.residual_norm_mhz < 1e-5, "norm {}", best.residual_norm_mhz);
        assert_relative_eq!(best.params.a_mhz[(2, 2)], -480.0, epsilon = 1e-3);
    }

    #[test]
    fn empty_mask_is_a_no_op_with_residuals() {
        let truth = er_like_params();
        let mut obs = synthetic_observations(&truth);
        for o in &mut obs {
            o.freq_mhz += 1.0; // systematic offset → nonzero residuals
        }
        let results = fit_hamiltonian_params(
            &obs,
            &truth,
            &FreeMask::none(),
            8,
            0,
            &HamFitConfig::default(),
        )
        .unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].params.a_mhz, truth.a_mhz);
        assert!(results[0].residual_norm_mhz > 0.5);
        assert_eq!(results[0].per_datum_residuals_mhz.len(), obs.len());
    }

    #[test]
    fn underdetermined_fit_names_the_free_directions() {
        let truth = er_like_params();
        let obs = &synthetic_observations(&truth)[..3];
        let err = fit_hamiltonian_params(
            obs,
            &truth,
            &FreeMask::all_a(),
            1,
            0,
            &HamFitConfig::default(),
        )
        .unwrap_err();
        match err {
            Error::Underdetermined { points, dof, names } => {
                assert_eq!(points, 3);
                assert_eq!(dof, 9);
                assert!(names.contains("A[2,2]"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_free_q_diagonal_is_rejected() {
        let truth = er_like_params();
        let obs = synthetic_observations(&truth);
        let err = fit_hamiltonian_params(
            &obs,
            &truth,
            &FreeMask::none().with_q(1, 1),
            1,
            0,
            &HamFitConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidParams(_)));
    }

    #[test]
    fn q_diagonal_packing_preserves_the_traceless_convention() {
        let truth = er_like_params();
        let mask = FreeMask::none().with_q(0, 0).with_q(1, 1).with_q(2, 2);
        let packing = Packing::compile(&mask).unwrap();
        assert_eq!(packing.dofs.len(), 2);
        let mut theta = packing.read(&truth);
        theta[0] += 7.0;
        let params = packing.apply(&truth, &theta);
        let trace = params.q_mhz[(0, 0)] + params.q_mhz[(1, 1)] + params.q_mhz[(2, 2)];
        assert!(trace.abs() < 1e-9);
        assert_relative_eq!(params.q_mhz[(0, 0)], 32.0);
        assert!(params.validate().is_ok());
    }

    #[test]
    fn q_off_diagonal_stays_mirrored() {
        let truth = er_like_params();
        let mask = FreeMask::none().with_q(0, 1);
        let packing = Packing::compile(&mask).unwrap();
        let mut theta = packing.read(&truth);
        theta[0] = -4.5;
        let params = packing.apply(&truth, &theta);
        assert_eq!(params.q_mhz[(0, 1)], -4.5);
        assert_eq!(params.q_mhz[(1, 0)], -4.5);
        assert!(params.validate().is_ok());
    }

    #[test]
    fn multistart_results_are_seed_deterministic_and_sorted() {
        let truth = er_like_params();
        let obs = synthetic_observations(&truth);
        let mut start = truth.clone();
        start.a_mhz[(2, 2)] += 30.0;
        let mask = FreeMask::none().with_a(2, 2);
        let run = || {
            fit_hamiltonian_params(&obs, &start, &mask, 6, 123, &HamFitConfig::default()).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.residual_norm_mhz.to_bits(), y.residual_norm_mhz.to_bits());
            assert_eq!(x.start_index, y.start_index);
        }
        for w in a.windows(2) {
            assert!(w[0].residual_norm_mhz <= w[1].residual_norm_mhz);
        }
    }

    #[test]
    fn adding_noiseless_points_does_not_worsen_the_best_fit() {
        let truth = er_like_params();
        let obs = synthetic_observations(&truth);
        let mut start = truth.clone();
        start.a_mhz[(2, 2)] += 20.0;
        let mask = FreeMask::none().with_a(2, 2);
        let cfg = HamFitConfig::default();
        let few = fit_hamiltonian_params(&obs[..6], &start, &mask, 2, 9, &cfg).unwrap();
        let many = fit_hamiltonian_params(&obs, &start, &mask, 2, 9, &cfg).unwrap();
        assert!(many[0].residual_norm_mhz <= few[0].residual_norm_mhz + 1e-6);
    }

    #[test]
    fn overlapping_lines_are_flagged_ambiguous() {
        // At zero field the dense hyperfine stack has many near-coincident
        // lines; a wide ambiguity radius must flag them.
        let truth = er_like_params();
        let sys = SpinSystem::new(&truth).unwrap();
        let levels = solve_at(&sys, FieldVec::zero()).unwrap();
        let obs = [Observation {
            field: FieldVec::zero(),
            freq_mhz: levels.energies[1] - levels.energies[0],
            pair: None,
        }];
        let cfg = HamFitConfig {
            ambiguity_linewidth_mhz: 200.0,
            ..Default::default()
        };
        let results =
            fit_hamiltonian_params(&obs, &truth, &FreeMask::none(), 1, 0, &cfg).unwrap();
        assert_eq!(results[0].ambiguous, vec![0]);
    }
}
