//! ZEFOZ search: fields where a transition's first-order Zeeman sensitivity
//! vanishes, so magnetic noise decoheres it only at second order.
//!
//! The objective is ‖∇f‖² (MHz²/T²) for the chosen level pair, minimized by a
//! seeded multi-start Nelder–Mead restricted to a field box. Level indices
//! refer to energy-sorted order at each evaluated field — the same convention
//! as the transition table. Inside a degenerate cluster the gradient is not
//! single-valued, so the objective returns a large finite penalty instead of
//! pretending; converged points therefore sit on non-degenerate transitions.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::levels::{solve_at, DEGENERACY_THRESHOLD_MHZ};
use crate::spin::{FieldModel, FieldVec};
use crate::transitions::{freq_curvature, freq_gradient, TransitionConfig, CURVATURE_STEP_T};

/// Convergence bar on the re-evaluated gradient norm, MHz/T.
pub const GRADIENT_TOLERANCE_MHZ_PER_T: f64 = 1e-3;
/// Converged points closer than this merge into one, tesla.
pub const MERGE_RADIUS_T: f64 = 1e-4;
/// Default number of random starts.
pub const DEFAULT_STARTS: usize = 32;
/// Objective value reported inside degenerate clusters, MHz²/T². Large enough
/// to dominate any physical ‖∇f‖² (electron slopes are ~1e4 MHz/T, squared
/// ~1e8), finite so the simplex can still rank vertices and walk out.
pub const DEGENERACY_PENALTY: f64 = 1e12;

/// Axis-aligned search region, tesla.
#[derive(Clone, Copy, Debug)]
pub struct SearchBox {
    pub min: FieldVec,
    pub max: FieldVec,
}

impl SearchBox {
    /// A cube of half-width `r` centered on `center`.
    pub fn centered(center: FieldVec, r: f64) -> Self {
        SearchBox {
            min: center - FieldVec::new(r, r, r),
            max: center + FieldVec::new(r, r, r),
        }
    }

    fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if !(self.min[k].is_finite() && self.max[k].is_finite() && self.min[k] <= self.max[k])
            {
                return Err(Error::InvalidInput(format!(
                    "search box axis {k} must be finite with min ≤ max, got {}..{}",
                    self.min[k], self.max[k]
                )));
            }
        }
        Ok(())
    }

    fn clamp(&self, x: Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            x[0].clamp(self.min[0], self.max[0]),
            x[1].clamp(self.min[1], self.max[1]),
            x[2].clamp(self.min[2], self.max[2]),
        )
    }

    fn extent(&self) -> Vector3<f64> {
        Vector3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ZefozConfig {
    pub gradient_tolerance_mhz_per_t: f64,
    pub merge_radius_t: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub degeneracy_threshold_mhz: f64,
    pub curvature_step_t: f64,
    /// Nelder–Mead iteration cap per start.
    pub max_iterations: usize,
}

impl Default for ZefozConfig {
    fn default() -> Self {
        ZefozConfig {
            gradient_tolerance_mhz_per_t: GRADIENT_TOLERANCE_MHZ_PER_T,
            merge_radius_t: MERGE_RADIUS_T,
            n_starts: DEFAULT_STARTS,
            seed: 0,
            degeneracy_threshold_mhz: DEGENERACY_THRESHOLD_MHZ,
            curvature_step_t: CURVATURE_STEP_T,
            max_iterations: 400,
        }
    }
}

/// A converged, characterized ZEFOZ candidate.
#[derive(Clone, Debug)]
pub struct ZefozPoint {
    pub field: FieldVec,
    pub low: usize,
    pub high: usize,
    pub frequency_mhz: f64,
    /// S1 = ‖∇f‖ re-evaluated at `field`, MHz/T.
    pub gradient_norm_mhz_per_t: f64,
    /// S2 = spectral norm of the frequency Hessian, MHz/T².
    pub curvature_norm_mhz_per_t2: f64,
    /// Which random start found it first (after dedup), for reproducibility digs.
    pub start_index: usize,
}

/// Search outcome with enough diagnostics to debug an empty result.
#[derive(Clone, Debug)]
pub struct ZefozSearch {
    /// Distinct converged points, sorted by curvature norm (flattest first).
    pub points: Vec<ZefozPoint>,
    pub attempted_starts: usize,
    pub converged_starts: usize,
    /// Best gradient norm seen across all starts, converged or not, MHz/T.
    pub best_gradient_norm_mhz_per_t: f64,
}

/// ‖∇f‖² in MHz²/T² for the (low, high) transition at `field`;
/// [`DEGENERACY_PENALTY`] when either endpoint sits in a degenerate cluster.
pub fn objective(
    model: &impl FieldModel,
    field: FieldVec,
    low: usize,
    high: usize,
    cfg: &ZefozConfig,
) -> Result<f64> {
    let levels = solve_at(model, field)?;
    let g = freq_gradient(&levels, model, low, high, cfg.degeneracy_threshold_mhz)?;
    if g.degenerate_low || g.degenerate_high {
        return Ok(DEGENERACY_PENALTY);
    }
    let n = g.norm();
    Ok(n * n)
}

/// S1/S2 characterization of a candidate operating point.
#[derive(Clone, Copy, Debug)]
pub struct Characterization {
    pub frequency_mhz: f64,
    /// First-order sensitivity ‖∇f‖, MHz/T.
    pub s1_mhz_per_t: f64,
    /// Second-order sensitivity: spectral norm of the Hessian, MHz/T².
    pub s2_mhz_per_t2: f64,
    pub degenerate_low: bool,
    pub degenerate_high: bool,
}

pub fn characterize(
    model: &impl FieldModel,
    field: FieldVec,
    low: usize,
    high: usize,
    cfg: &ZefozConfig,
) -> Result<Characterization> {
    let levels = solve_at(model, field)?;
    let g = freq_gradient(&levels, model, low, high, cfg.degeneracy_threshold_mhz)?;
    let tcfg = TransitionConfig {
        degeneracy_threshold_mhz: cfg.degeneracy_threshold_mhz,
        curvature_step_t: cfg.curvature_step_t,
    };
    let hessian = freq_curvature(model, field, low, high, &tcfg)?;
    let s2 = hessian
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, &e| m.max(e.abs()));
    Ok(Characterization {
        frequency_mhz: levels.transition_frequency(low, high),
        s1_mhz_per_t: g.norm(),
        s2_mhz_per_t2: s2,
        degenerate_low: g.degenerate_low,
        degenerate_high: g.degenerate_high,
    })
}

/// Multi-start ZEFOZ search for the (low, high) transition inside `bounds`.
///
/// Deterministic for a fixed seed: starts are drawn from ChaCha, each start's
/// simplex walk is exact arithmetic on those draws, starts are evaluated
/// independently (rayon order never affects values), and results are merged
/// and sorted by a total order. No convergence from any start is not an
/// error — the diagnostics say how close the best attempt came.
pub fn find_zefoz(
    model: &(impl FieldModel + Sync),
    low: usize,
    high: usize,
    bounds: SearchBox,
    cfg: &ZefozConfig,
) -> Result<ZefozSearch> {
    bounds.validate()?;
    if low >= high {
        return Err(Error::InvalidInput(format!(
            "transition needs low < high, got ({low}, {high})"
        )));
    }
    if cfg.n_starts == 0 {
        return Err(Error::InvalidInput("n_starts must be at least 1".into()));
    }
    // Fail fast on models that can't even be solved at the box center.
    let center = FieldVec((bounds.min.0 + bounds.max.0) / 2.0);
    let probe = solve_at(model, center)?;
    if high >= probe.dim() {
        return Err(Error::InvalidInput(format!(
            "level index {high} out of range for {} levels",
            probe.dim()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let starts: Vec<Vector3<f64>> = (0..cfg.n_starts)
        .map(|_| {
            Vector3::new(
                rng.random_range(bounds.min[0]..=bounds.max[0]),
                rng.random_range(bounds.min[1]..=bounds.max[1]),
                rng.random_range(bounds.min[2]..=bounds.max[2]),
            )
        })
        .collect();

    let f = |x: &Vector3<f64>| -> f64 {
        let clamped = bounds.clamp(*x);
        objective(model, FieldVec(clamped), low, high, cfg).unwrap_or(f64::INFINITY)
    };

    // Each start runs independently; collect() preserves start order, so the
    // thread count cannot change the outcome.
    let outcomes: Vec<(Vector3<f64>, f64)> = starts
        .par_iter()
        .map(|x0| nelder_mead(&f, *x0, &bounds, cfg.max_iterations))
        .collect();

    let mut converged: Vec<(usize, FieldVec, f64)> = Vec::new(); // (start, field, S1)
    let mut best_gradient_norm = f64::INFINITY;
    for (start_index, (x, _fval)) in outcomes.iter().enumerate() {
        let field = FieldVec(bounds.clamp(*x));
        let levels = solve_at(model, field)?;
        let g = freq_gradient(&levels, model, low, high, cfg.degeneracy_threshold_mhz)?;
        let degenerate = g.degenerate_low || g.degenerate_high;
        let norm = g.norm();
        if !degenerate {
            best_gradient_norm = best_gradient_norm.min(norm);
        }
        if !degenerate && norm < cfg.gradient_tolerance_mhz_per_t {
            converged.push((start_index, field, norm));
        }
    }
    let converged_starts = converged.len();

    // Deduplicate: first point (in start order) inside the merge radius wins.
    let mut reps: Vec<(usize, FieldVec, f64)> = Vec::new();
    for (start, field, norm) in converged {
        let dup = reps
            .iter()
            .any(|(_, rf, _)| (field - *rf).norm() < cfg.merge_radius_t);
        if !dup {
            reps.push((start, field, norm));
        }
    }

    let mut points = Vec::with_capacity(reps.len());
    for (start_index, field, norm) in reps {
        let c = characterize(model, field, low, high, cfg)?;
        points.push(ZefozPoint {
            field,
            low,
            high,
            frequency_mhz: c.frequency_mhz,
            gradient_norm_mhz_per_t: norm,
            curvature_norm_mhz_per_t2: c.s2_mhz_per_t2,
            start_index,
        });
    }
    points.sort_by(|a, b| {
        a.curvature_norm_mhz_per_t2
            .total_cmp(&b.curvature_norm_mhz_per_t2)
            .then(a.field[0].total_cmp(&b.field[0]))
            .then(a.field[1].total_cmp(&b.field[1]))
            .then(a.field[2].total_cmp(&b.field[2]))
    });

    Ok(ZefozSearch {
        points,
        attempted_starts: cfg.n_starts,
        converged_starts,
        best_gradient_norm_mhz_per_t: best_gradient_norm,
    })
}

/// Plain Nelder–Mead on a 3D box (reflection 1, expansion 2, contraction 1/2,
/// shrink 1/2). Proposals are clamped into the box. Deterministic: vertex
/// ordering breaks value ties by insertion order (stable sort).
fn nelder_mead(
    f: &impl Fn(&Vector3<f64>) -> f64,
    x0: Vector3<f64>,
    bounds: &SearchBox,
    max_iterations: usize,
) -> (Vector3<f64>, f64) {
    let extent = bounds.extent();
    let mut simplex: Vec<(Vector3<f64>, f64)> = Vec::with_capacity(4);
    simplex.push((x0, f(&x0)));
    for k in 0..3 {
        let mut x = x0;
        // 5% of the box per axis; nudge inward when the axis is flat.
        let step = if extent[k] > 0.0 { 0.05 * extent[k] } else { 1e-6 };
        x[k] = (x[k] + step).clamp(bounds.min[k], bounds.max[k]);
        if x[k] == x0[k] {
            x[k] = (x0[k] - step).clamp(bounds.min[k], bounds.max[k]);
        }
        simplex.push((x, f(&x)));
    }

    for _ in 0..max_iterations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let diameter = simplex[1..]
            .iter()
            .map(|(x, _)| (x - simplex[0].0).norm())
            .fold(0.0f64, f64::max);
        if diameter < 1e-9 {
            break;
        }
        let centroid: Vector3<f64> =
            (simplex[0].0 + simplex[1].0 + simplex[2].0) / 3.0;
        let worst = simplex[3];
        let reflected = bounds.clamp(centroid + (centroid - worst.0));
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = bounds.clamp(centroid + (centroid - worst.0) * 2.0);
            let fe = f(&expanded);
            simplex[3] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (reflected, fr);
        } else {
            let contract_base = if fr < worst.1 { reflected } else { worst.0 };
            let contracted = bounds.clamp(centroid + (contract_base - centroid) * 0.5);
            let fc = f(&contracted);
            if fc < worst.1.min(fr) {
                simplex[3] = (contracted, fc);
            } else {
                // Shrink toward the best vertex.
                for i in 1..4 {
                    let x = bounds.clamp(simplex[0].0 + (simplex[i].0 - simplex[0].0) * 0.5);
                    simplex[i] = (x, f(&x));
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}
