//! Field × frequency intensity maps: synthesis from the spin model, CSV
//! ingest/export, and cross-correlation comparison.
//!
//! The intensity model is deliberately a proxy: strength² × population
//! difference × lineshape × resonator response, normalized to unit maximum.
//! It reproduces line *positions* and qualitative brightness; it does not
//! model the optical detection chain, so comparisons score normalized maps
//! and care about geometry, not absolute amplitude.

use nalgebra::Vector3;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::levels::solve_at;
use crate::spin::{FieldVec, SpinSystem};

/// Default lineshape width, MHz (typical observed linewidth scale).
pub const DEFAULT_FWHM_MHZ: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LineshapeKind {
    Lorentzian,
    Gaussian,
}

/// Unit-peak lineshape with a full width at half maximum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lineshape {
    pub kind: LineshapeKind,
    pub fwhm_mhz: f64,
}

impl Lineshape {
    pub fn lorentzian(fwhm_mhz: f64) -> Self {
        Lineshape {
            kind: LineshapeKind::Lorentzian,
            fwhm_mhz,
        }
    }

    pub fn gaussian(fwhm_mhz: f64) -> Self {
        Lineshape {
            kind: LineshapeKind::Gaussian,
            fwhm_mhz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fwhm_mhz > 0.0 && self.fwhm_mhz.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "lineshape FWHM must be positive and finite, got {} MHz",
                self.fwhm_mhz
            )));
        }
        Ok(())
    }

    /// Response at `detuning_mhz` from line center; 1 at the peak.
    pub fn evaluate(&self, detuning_mhz: f64) -> f64 {
        let x = detuning_mhz / self.fwhm_mhz;
        match self.kind {
            LineshapeKind::Lorentzian => 1.0 / (1.0 + 4.0 * x * x),
            LineshapeKind::Gaussian => (-4.0 * std::f64::consts::LN_2 * x * x).exp(),
        }
    }
}

impl Default for Lineshape {
    fn default() -> Self {
        Lineshape::lorentzian(DEFAULT_FWHM_MHZ)
    }
}

/// Lorentzian resonator response in drive frequency, unit peak.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResonatorSpec {
    pub center_mhz: f64,
    pub fwhm_mhz: f64,
}

impl ResonatorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.center_mhz.is_finite() && self.fwhm_mhz > 0.0 && self.fwhm_mhz.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "resonator spec must be finite with positive width, got center {} MHz, fwhm {} MHz",
                self.center_mhz, self.fwhm_mhz
            )));
        }
        Ok(())
    }

    pub fn evaluate(&self, freq_mhz: f64) -> f64 {
        let x = (freq_mhz - self.center_mhz) / self.fwhm_mhz;
        1.0 / (1.0 + 4.0 * x * x)
    }
}

/// How line weights depend on level occupation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PopulationModel {
    /// Thermal populations of the solved levels at T kelvin; line weight uses
    /// p_low − p_high.
    Boltzmann { temperature_k: f64 },
    /// Override for optically pumped (excited-plane) maps: literal equal
    /// populations would zero every difference, so "uniform" sets the
    /// population-difference factor to exactly 1 and weights lines by
    /// strength² alone.
    Uniform,
}

/// Everything about a map that isn't the numbers: annotation and provenance.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GridMeta {
    pub label: String,
    /// Unit vector of the sweep direction in (D1, D2, b), when known.
    pub direction: Option<Vector3<f64>>,
    pub temperature_k: Option<f64>,
    /// Laser frequency annotation only; the optical chain is not modeled.
    pub laser_ghz: Option<f64>,
    pub resonator: Option<ResonatorSpec>,
    pub lineshape: Option<Lineshape>,
    /// False when the raw map was identically zero and unit normalization
    /// was impossible (degenerate normalization).
    pub normalized: bool,
}

/// 2D intensity map on a field × frequency grid.
///
/// Canonical orientation: both axes strictly increasing (constructors flip
/// decreasing inputs). `intensity[i][j]` belongs to `(field_t[i], freq_mhz[j])`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumGrid {
    /// Signed field magnitudes along the sweep direction, tesla.
    pub field_t: Vec<f64>,
    pub freq_mhz: Vec<f64>,
    pub intensity: Vec<Vec<f64>>,
    pub meta: GridMeta,
}

impl SpectrumGrid {
    /// Validate and canonicalize a grid (axes strictly monotone → increasing;
    /// intensities finite and non-negative; dimensions consistent).
    pub fn new(
        mut field_t: Vec<f64>,
        mut freq_mhz: Vec<f64>,
        mut intensity: Vec<Vec<f64>>,
        meta: GridMeta,
    ) -> Result<Self> {
        if field_t.is_empty() || freq_mhz.is_empty() {
            return Err(Error::InvalidInput("grid axes must be non-empty".into()));
        }
        if intensity.len() != field_t.len()
            || intensity.iter().any(|row| row.len() != freq_mhz.len())
        {
            return Err(Error::InvalidInput(format!(
                "intensity must be {}×{} to match the axes",
                field_t.len(),
                freq_mhz.len()
            )));
        }
        if intensity
            .iter()
            .flatten()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::InvalidInput(
                "intensities must be finite and non-negative".into(),
            ));
        }
        match monotonicity("field", &field_t)? {
            Direction::Decreasing => {
                field_t.reverse();
                intensity.reverse();
            }
            Direction::Increasing => {}
        }
        match monotonicity("frequency", &freq_mhz)? {
            Direction::Decreasing => {
                freq_mhz.reverse();
                for row in &mut intensity {
                    row.reverse();
                }
            }
            Direction::Increasing => {}
        }
        Ok(SpectrumGrid {
            field_t,
            freq_mhz,
            intensity,
            meta,
        })
    }

    pub fn n_fields(&self) -> usize {
        self.field_t.len()
    }

    pub fn n_freqs(&self) -> usize {
        self.freq_mhz.len()
    }

    pub fn max_intensity(&self) -> f64 {
        self.intensity
            .iter()
            .flatten()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// Bilinear sample at (field, freq); inputs must lie within the axes.
    fn sample(&self, field: f64, freq: f64) -> f64 {
        let (i0, i1, tb) = bracket(&self.field_t, field);
        let (j0, j1, tf) = bracket(&self.freq_mhz, freq);
        let a = self.intensity[i0][j0] * (1.0 - tf) + self.intensity[i0][j1] * tf;
        let b = self.intensity[i1][j0] * (1.0 - tf) + self.intensity[i1][j1] * tf;
        a * (1.0 - tb) + b * tb
    }
}

enum Direction {
    Increasing,
    Decreasing,
}

fn monotonicity(name: &str, axis: &[f64]) -> Result<Direction> {
    if axis.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "{name} axis has a non-finite value"
        )));
    }
    if axis.len() == 1 {
        return Ok(Direction::Increasing);
    }
    if axis.windows(2).all(|w| w[1] > w[0]) {
        Ok(Direction::Increasing)
    } else if axis.windows(2).all(|w| w[1] < w[0]) {
        Ok(Direction::Decreasing)
    } else {
        Err(Error::InvalidInput(format!(
            "{name} axis must be strictly monotone"
        )))
    }
}

/// Indices and fraction for linear interpolation on an ascending axis.
fn bracket(axis: &[f64], x: f64) -> (usize, usize, f64) {
    if axis.len() == 1 {
        return (0, 0, 0.0);
    }
    let hi = axis.partition_point(|&v| v < x).clamp(1, axis.len() - 1);
    let lo = hi - 1;
    let span = axis[hi] - axis[lo];
    let t = if span > 0.0 {
        ((x - axis[lo]) / span).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (lo, hi, t)
}

/// Synthesize a map over a colinear field sweep.
///
/// Per field step: intensity(f) = Σ_lines strength² × Δp × lineshape(f − f_line)
/// × resonator(f), then global normalization to unit maximum. A map that is
/// identically zero before normalization (e.g. T → ∞ population differences)
/// is returned as-is with `meta.normalized = false`.
pub fn synthesize_map(
    sys: &SpinSystem,
    sweep: &[FieldVec],
    freq_axis_mhz: &[f64],
    rf_direction: &Vector3<f64>,
    lineshape: &Lineshape,
    population: &PopulationModel,
    resonator: Option<&ResonatorSpec>,
) -> Result<SpectrumGrid> {
    if sweep.is_empty() {
        return Err(Error::InvalidInput("sweep must be non-empty".into()));
    }
    lineshape.validate()?;
    if let Some(r) = resonator {
        r.validate()?;
    }
    if let PopulationModel::Boltzmann { temperature_k } = population {
        if *temperature_k <= 0.0 || temperature_k.is_nan() {
            return Err(Error::InvalidInput(format!(
                "temperature must be positive, got {temperature_k} K"
            )));
        }
    }
    match monotonicity("frequency", freq_axis_mhz)? {
        Direction::Increasing => {}
        Direction::Decreasing => {
            return Err(Error::InvalidInput(
                "frequency axis must be increasing".into(),
            ))
        }
    }

    let (direction, field_t) = sweep_direction(sweep)?;
    let rf_op = sys.rf_operator(rf_direction)?;
    let resonator_response: Vec<f64> = freq_axis_mhz
        .iter()
        .map(|&f| resonator.map_or(1.0, |r| r.evaluate(f)))
        .collect();

    // Field steps are independent; collect() keeps sweep order, so the rayon
    // thread count cannot change a single output byte.
    let rows: Result<Vec<Vec<f64>>> = sweep
        .par_iter()
        .map(|&field| -> Result<Vec<f64>> {
            let levels = solve_at(sys, field)?;
            let n = levels.dim();
            let populations = match population {
                PopulationModel::Boltzmann { temperature_k } => {
                    Some(levels.populations(*temperature_k)?)
                }
                PopulationModel::Uniform => None,
            };
            let mut row = vec![0.0f64; freq_axis_mhz.len()];
            for low in 0..n {
                for high in (low + 1)..n {
                    let strength = levels
                        .states
                        .column(low)
                        .dotc(&(&rf_op * levels.states.column(high)))
                        .norm();
                    let dp = populations.as_ref().map_or(1.0, |p| p[low] - p[high]);
                    let weight = strength * strength * dp;
                    if weight == 0.0 {
                        continue;
                    }
                    let f_line = levels.energies[high] - levels.energies[low];
                    for (j, &f) in freq_axis_mhz.iter().enumerate() {
                        row[j] += weight * lineshape.evaluate(f - f_line) * resonator_response[j];
                    }
                }
            }
            Ok(row)
        })
        .collect();
    let mut intensity = rows?;

    let max = intensity
        .iter()
        .flatten()
        .fold(0.0f64, |m, &v| m.max(v));
    let normalized = max > 0.0;
    if normalized {
        for row in &mut intensity {
            for v in row.iter_mut() {
                *v /= max;
            }
        }
    }

    let meta = GridMeta {
        label: sys.params().label.clone(),
        direction: Some(direction),
        temperature_k: match population {
            PopulationModel::Boltzmann { temperature_k } => Some(*temperature_k),
            PopulationModel::Uniform => None,
        },
        laser_ghz: None,
        resonator: resonator.copied(),
        lineshape: Some(*lineshape),
        normalized,
    };
    SpectrumGrid::new(field_t, freq_axis_mhz.to_vec(), intensity, meta)
}

/// Common unit direction and signed magnitudes of a colinear sweep.
fn sweep_direction(sweep: &[FieldVec]) -> Result<(Vector3<f64>, Vec<f64>)> {
    let mut reference = Vector3::zeros();
    let mut best = 0.0;
    for b in sweep {
        if b.norm() > best {
            best = b.norm();
            reference = *b.as_vector();
        }
    }
    if best == 0.0 {
        // All-zero sweep: direction is arbitrary; use b̂ by convention.
        return Ok((Vector3::z(), vec![0.0; sweep.len()]));
    }
    let unit = reference / best;
    let mut field_t = Vec::with_capacity(sweep.len());
    for (index, b) in sweep.iter().enumerate() {
        let t = b.as_vector().dot(&unit);
        let residual = (b.as_vector() - unit * t).norm();
        if residual > 1e-9 * best.max(1e-12) {
            return Err(Error::SweepNotColinear {
                index,
                deviation: residual,
            });
        }
        field_t.push(t);
    }
    Ok((unit, field_t))
}

// ---------------------------------------------------------------------------
// CSV grid + sidecar metadata serialization
// ---------------------------------------------------------------------------

/// Grid as CSV text: first row = frequency axis, first column = field
/// magnitudes, corner cell is a fixed header tag. Numbers use shortest
/// round-trip formatting, so ingesting the output reproduces the grid bitwise.
pub fn grid_to_csv_string(grid: &SpectrumGrid) -> String {
    let mut out = String::new();
    let header: Vec<String> = std::iter::once("field_T/freq_MHz".to_string())
        .chain(grid.freq_mhz.iter().map(f64::to_string))
        .collect();
    let _ = writeln!(out, "{}", header.join(","));
    for (i, &b) in grid.field_t.iter().enumerate() {
        let row: Vec<String> = std::iter::once(b.to_string())
            .chain(grid.intensity[i].iter().map(f64::to_string))
            .collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn write_grid_csv(grid: &SpectrumGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, grid_to_csv_string(grid)).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parse a grid from CSV text (see [`grid_to_csv_string`] for the layout).
/// `source` names the input in errors. The metadata stays at defaults; use
/// [`ingest_measured_map`] to pick up a sidecar automatically.
pub fn parse_grid_csv(text: &str, source: &str) -> Result<SpectrumGrid> {
    let fail = |message: String| Error::GridFormat {
        path: source.to_string(),
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let (_, header) = lines
        .next()
        .ok_or_else(|| fail("empty grid file".into()))?;
    let header_cells: Vec<&str> = header.split(',').collect();
    if header_cells.len() < 2 {
        return Err(fail("header row needs at least one frequency column".into()));
    }
    let freq_mhz: Vec<f64> = header_cells[1..]
        .iter()
        .enumerate()
        .map(|(j, cell)| parse_cell(cell, 1, j + 2, source))
        .collect::<Result<_>>()?;

    let mut field_t = Vec::new();
    let mut intensity = Vec::new();
    for (idx, line) in lines {
        let rowno = idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header_cells.len() {
            return Err(fail(format!(
                "row {rowno} has {} cells, expected {}",
                cells.len(),
                header_cells.len()
            )));
        }
        field_t.push(parse_cell(cells[0], rowno, 1, source)?);
        let row: Vec<f64> = cells[1..]
            .iter()
            .enumerate()
            .map(|(j, cell)| parse_cell(cell, rowno, j + 2, source))
            .collect::<Result<_>>()?;
        intensity.push(row);
    }
    if field_t.is_empty() {
        return Err(fail("grid has no data rows".into()));
    }
    SpectrumGrid::new(field_t, freq_mhz, intensity, GridMeta::default()).map_err(|e| match e {
        Error::InvalidInput(m) => fail(m),
        other => other,
    })
}

fn parse_cell(cell: &str, row: usize, col: usize, source: &str) -> Result<f64> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::GridFormat {
        path: source.to_string(),
        message: format!("row {row}, column {col}: invalid number `{}`", cell.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::GridFormat {
            path: source.to_string(),
            message: format!("row {row}, column {col}: non-finite value `{}`", cell.trim()),
        });
    }
    Ok(v)
}

/// Read a grid CSV; if `<path>.meta` exists, its key-value pairs populate the
/// metadata (a missing sidecar just leaves defaults).
pub fn ingest_measured_map(path: impl AsRef<Path>) -> Result<SpectrumGrid> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut grid = parse_grid_csv(&text, &path.display().to_string())?;
    let meta_path = sidecar_path(path);
    if meta_path.exists() {
        let meta_text = fs::read_to_string(&meta_path).map_err(|source| Error::Io {
            path: meta_path.display().to_string(),
            source,
        })?;
        grid.meta = parse_meta(&meta_text, &meta_path.display().to_string())?;
    }
    Ok(grid)
}

/// `<file>.csv` → `<file>.csv.meta`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta");
    std::path::PathBuf::from(os)
}

pub fn meta_to_string(meta: &GridMeta) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "label = {}", meta.label);
    if let Some(d) = meta.direction {
        let _ = writeln!(out, "direction = {} {} {}", d[0], d[1], d[2]);
    }
    if let Some(t) = meta.temperature_k {
        let _ = writeln!(out, "temperature_K = {t}");
    }
    if let Some(l) = meta.laser_ghz {
        let _ = writeln!(out, "laser_GHz = {l}");
    }
    if let Some(r) = meta.resonator {
        let _ = writeln!(out, "resonator_center_MHz = {}", r.center_mhz);
        let _ = writeln!(out, "resonator_fwhm_MHz = {}", r.fwhm_mhz);
    }
    if let Some(l) = meta.lineshape {
        let kind = match l.kind {
            LineshapeKind::Lorentzian => "lorentzian",
            LineshapeKind::Gaussian => "gaussian",
        };
        let _ = writeln!(out, "lineshape = {kind}");
        let _ = writeln!(out, "lineshape_fwhm_MHz = {}", l.fwhm_mhz);
    }
    let _ = writeln!(out, "normalized = {}", meta.normalized);
    out
}

pub fn write_meta_sidecar(grid: &SpectrumGrid, csv_path: impl AsRef<Path>) -> Result<()> {
    let path = sidecar_path(csv_path.as_ref());
    fs::write(&path, meta_to_string(&grid.meta)).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_meta(text: &str, source: &str) -> Result<GridMeta> {
    let fail = |line: usize, message: String| Error::ParamFile {
        path: source.to_string(),
        line,
        message,
    };
    let mut meta = GridMeta::default();
    let mut resonator_center = None;
    let mut resonator_fwhm = None;
    let mut lineshape_kind = None;
    let mut lineshape_fwhm = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(lineno, format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| fail(lineno, format!("invalid number `{v}`")))
        };
        match key {
            "label" => meta.label = value.to_string(),
            "direction" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(fail(lineno, "direction needs 3 components".into()));
                }
                meta.direction = Some(Vector3::new(
                    num(parts[0])?,
                    num(parts[1])?,
                    num(parts[2])?,
                ));
            }
            "temperature_K" => meta.temperature_k = Some(num(value)?),
            "laser_GHz" => meta.laser_ghz = Some(num(value)?),
            "resonator_center_MHz" => resonator_center = Some(num(value)?),
            "resonator_fwhm_MHz" => resonator_fwhm = Some(num(value)?),
            "lineshape" => {
                lineshape_kind = Some(match value {
                    "lorentzian" => LineshapeKind::Lorentzian,
                    "gaussian" => LineshapeKind::Gaussian,
                    other => {
                        return Err(fail(
                            lineno,
                            format!("lineshape must be lorentzian or gaussian, got `{other}`"),
                        ))
                    }
                })
            }
            "lineshape_fwhm_MHz" => lineshape_fwhm = Some(num(value)?),
            "normalized" => {
                meta.normalized = match value {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(fail(
                            lineno,
                            format!("normalized must be true or false, got `{other}`"),
                        ))
                    }
                }
            }
            other => return Err(fail(lineno, format!("unknown key `{other}`"))),
        }
    }
    if let (Some(center_mhz), Some(fwhm_mhz)) = (resonator_center, resonator_fwhm) {
        meta.resonator = Some(ResonatorSpec {
            center_mhz,
            fwhm_mhz,
        });
    }
    if let (Some(kind), Some(fwhm_mhz)) = (lineshape_kind, lineshape_fwhm) {
        meta.lineshape = Some(Lineshape { kind, fwhm_mhz });
    }
    Ok(meta)
}

// ---------------------------------------------------------------------------
// Map comparison
// ---------------------------------------------------------------------------

/// Frequency-offset scan for [`compare_maps`]: offsets −max..+max in `step`
/// increments (inclusive, symmetric).
#[derive(Clone, Copy, Debug)]
pub struct OffsetScan {
    pub max_offset_mhz: f64,
    pub step_mhz: f64,
}

impl OffsetScan {
    pub fn none() -> Self {
        OffsetScan {
            max_offset_mhz: 0.0,
            step_mhz: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MapComparison {
    /// Pearson cross-correlation of the two maps at the best offset, in [−1, 1].
    pub score: f64,
    /// Offset added to the model's frequencies for the best alignment, MHz.
    pub freq_offset_mhz: f64,
}

/// Cross-correlate `model` against `data`, scanning a frequency offset.
///
/// Both maps are resampled onto the coarser of the two grids over the
/// overlapping field range and a frequency window that stays valid across
/// the whole offset scan (optionally intersected with `mask`). The reported
/// offset is the shift applied to the model that maximizes the Pearson score;
/// ties pick the smallest |offset|.
pub fn compare_maps(
    model: &SpectrumGrid,
    data: &SpectrumGrid,
    mask: Option<(f64, f64)>,
    scan: &OffsetScan,
) -> Result<MapComparison> {
    if !(scan.max_offset_mhz >= 0.0
        && scan.max_offset_mhz.is_finite()
        && scan.step_mhz > 0.0
        && scan.step_mhz.is_finite())
    {
        return Err(Error::InvalidInput(format!(
            "offset scan needs max ≥ 0 and step > 0, got max {} MHz, step {} MHz",
            scan.max_offset_mhz, scan.step_mhz
        )));
    }

    let b_lo = model.field_t[0].max(data.field_t[0]);
    let b_hi = model.field_t[model.n_fields() - 1].min(data.field_t[data.n_fields() - 1]);
    if b_lo > b_hi {
        return Err(Error::DisjointGrids { axis: "field" });
    }

    // Frequency window that keeps model(f + δ) in range for every scanned δ.
    let mut f_lo = (model.freq_mhz[0] + scan.max_offset_mhz).max(data.freq_mhz[0]);
    let mut f_hi =
        (model.freq_mhz[model.n_freqs() - 1] - scan.max_offset_mhz).min(data.freq_mhz[data.n_freqs() - 1]);
    if let Some((m_lo, m_hi)) = mask {
        if !(m_lo.is_finite() && m_hi.is_finite() && m_lo <= m_hi) {
            return Err(Error::InvalidInput(format!(
                "mask must be finite with min ≤ max, got {m_lo}..{m_hi} MHz"
            )));
        }
        f_lo = f_lo.max(m_lo);
        f_hi = f_hi.min(m_hi);
    }
    if f_lo > f_hi {
        return Err(Error::DisjointGrids { axis: "frequency" });
    }

    // The coarser grid donates each target axis.
    let restrict = |axis: &[f64], lo: f64, hi: f64| -> Vec<f64> {
        axis.iter().copied().filter(|&v| v >= lo && v <= hi).collect()
    };
    let fields_m = restrict(&model.field_t, b_lo, b_hi);
    let fields_d = restrict(&data.field_t, b_lo, b_hi);
    let target_fields = if fields_m.len() <= fields_d.len() { fields_m } else { fields_d };
    let freqs_m = restrict(&model.freq_mhz, f_lo, f_hi);
    let freqs_d = restrict(&data.freq_mhz, f_lo, f_hi);
    let target_freqs = if freqs_m.len() <= freqs_d.len() { freqs_m } else { freqs_d };
    if target_fields.is_empty() {
        return Err(Error::DisjointGrids { axis: "field" });
    }
    if target_freqs.is_empty() {
        return Err(Error::DisjointGrids { axis: "frequency" });
    }

    let data_samples: Vec<f64> = target_fields
        .iter()
        .flat_map(|&b| target_freqs.iter().map(move |&f| data.sample(b, f)))
        .collect();

    let n_offsets = (scan.max_offset_mhz / scan.step_mhz).floor() as i64;
    let mut best: Option<MapComparison> = None;
    for k in -n_offsets..=n_offsets {
        let delta = k as f64 * scan.step_mhz;
        // Aligned model: shift model frequencies by +δ ⇒ sample at f − δ.
        let model_samples: Vec<f64> = target_fields
            .iter()
            .flat_map(|&b| target_freqs.iter().map(move |&f| model.sample(b, f - delta)))
            .collect();
        let score = match pearson(&model_samples, &data_samples) {
            Some(r) => r,
            None => continue, // no variance at this offset
        };
        let better = match &best {
            None => true,
            Some(b) => {
                score > b.score + 1e-15
                    || ((score - b.score).abs() <= 1e-15
                        && delta.abs() < b.freq_offset_mhz.abs())
            }
        };
        if better {
            best = Some(MapComparison {
                score,
                freq_offset_mhz: delta,
            });
        }
    }
    best.ok_or_else(|| {
        Error::InvalidInput("maps have no variance in the comparison window".into())
    })
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}
