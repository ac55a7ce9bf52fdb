//! One function per subcommand. Each builds its provenance header, reads and
//! digests its inputs, runs the corresponding library call, and writes a
//! headered table (`tables`) or one of the library's own text formats.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use nalgebra::Matrix3;

use kramers::dynamics::{
    echo_envelope, parse_sequence, simulate_sequence, trace_to_csv_string, EnsembleSpec,
    SpectralLine,
};
use kramers::fitting::{
    fit_hamiltonian_params, fit_lifetime, fit_t2_cpmg, fit_t2_two_pulse, FreeMask, HamFitConfig,
    LifetimeClass, LifetimeConfig, Observation,
};
use kramers::levels::{solve_at, track_levels, LevelSet};
use kramers::params_file::{params_to_string, parse_params};
use kramers::spectrum::{
    grid_to_csv_string, synthesize_map, write_meta_sidecar, Lineshape, LineshapeKind,
    PopulationModel, ResonatorSpec,
};
use kramers::transitions::{transition_table, TransitionConfig};
use kramers::zefoz::{find_zefoz, SearchBox, ZefozConfig};
use kramers::{SpinParams, SpinSystem};

use crate::fail::Failure;
use crate::meta::Meta;
use crate::sweep::{
    parse_band, parse_box, parse_colon_pair, parse_direction, parse_field, resolve_field_path,
    FIELD_COLUMNS,
};
use crate::tables::{fmt, parse_table, parse_xy, quote};

fn load_params(path: &Path, meta: &mut Meta) -> Result<SpinParams, Failure> {
    let text = meta.read_input(path)?;
    Ok(parse_params(&text, &path.display().to_string())?)
}

fn spectral_norm(m: &Matrix3<f64>) -> f64 {
    m.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
}

// ---------------------------------------------------------------- levels --

#[derive(Args)]
#[command(group = clap::ArgGroup::new("fieldpath")
    .required(true)
    .multiple(false)
    .args(["sweep", "sweep_file", "field"]))]
pub struct LevelsArgs {
    /// Spin-parameter file
    #[arg(long)]
    params: PathBuf,
    /// Inline sweep, e.g. "axis=b from=-0.01 to=0.01 steps=201"
    #[arg(long)]
    sweep: Option<String>,
    /// CSV whose B_D1_T,B_D2_T,B_b_T columns give the field path
    #[arg(long)]
    sweep_file: Option<PathBuf>,
    /// Single field point "D1,D2,b" in tesla (repeatable)
    #[arg(long, allow_hyphen_values = true)]
    field: Vec<String>,
    /// Order columns by adiabatic branch (eigenvector continuity) instead of
    /// by sorted energy
    #[arg(long)]
    track: bool,
    #[arg(long)]
    output: PathBuf,
}

pub fn levels(args: &LevelsArgs, seed: u64) -> Result<(), Failure> {
    let mut meta = Meta::new(seed);
    let params = load_params(&args.params, &mut meta)?;
    let sys = SpinSystem::new(&params)?;
    let fields = resolve_field_path(
        args.sweep.as_deref(),
        args.sweep_file.as_deref(),
        &args.field,
        &mut meta,
    )?;
    let steps = fields
        .iter()
        .map(|&f| solve_at(&sys, f))
        .collect::<kramers::Result<Vec<LevelSet>>>()?;
    let n = steps[0].dim();

    let energy_rows: Vec<Vec<f64>> = if args.track {
        let tracked = track_levels(steps)?;
        for tie in &tracked.ties {
            meta.note(format!(
                "warning: near-tie connecting step {} branch {} (overlap margin {:.3e})",
                tie.step, tie.branch, tie.margin
            ));
        }
        for flag in &tracked.low_overlap {
            meta.note(format!(
                "warning: low overlap {:.3} at step {} branch {}; refine the sweep",
                flag.overlap, flag.step, flag.branch
            ));
        }
        (0..tracked.n_steps())
            .map(|s| (0..n).map(|b| tracked.energy(s, b)).collect())
            .collect()
    } else {
        steps
            .iter()
            .map(|set| set.energies.iter().copied().collect())
            .collect()
    };

    let prefix = if args.track { "branch" } else { "E" };
    let mut body = FIELD_COLUMNS.join(",");
    for i in 0..n {
        let _ = write!(body, ",{prefix}_{i}_MHz");
    }
    body.push('\n');
    for (field, row) in fields.iter().zip(&energy_rows) {
        let cells: Vec<String> = (0..3)
            .map(|k| fmt(field.0[k]))
            .chain(row.iter().map(|&e| fmt(e)))
            .collect();
        body.push_str(&cells.join(","));
        body.push('\n');
    }
    meta.write_output(&args.output, &body)?;
    println!(
        "wrote {} field points × {n} levels to {}",
        fields.len(),
        args.output.display()
    );
    Ok(())
}

// ----------------------------------------------------------- transitions --

#[derive(Args)]
pub struct TransitionsArgs {
    #[arg(long)]
    params: PathBuf,
    /// Field point "D1,D2,b" in tesla
    #[arg(long, allow_hyphen_values = true)]
    field: String,
    /// RF drive direction "D1,D2,b" (any scale, direction only)
    #[arg(long, default_value = "1,0,0", allow_hyphen_values = true)]
    rf_direction: String,
    /// Keep lines with frequency inside "lo:hi" MHz
    #[arg(long, default_value = "0:1e9", allow_hyphen_values = true)]
    band: String,
    /// Levels closer than this form one degenerate group, MHz
    #[arg(long)]
    degeneracy_threshold: Option<f64>,
    /// Central-difference step for curvatures, tesla
    #[arg(long)]
    curvature_step: Option<f64>,
    #[arg(long)]
    output: PathBuf,
}

pub fn transitions(args: &TransitionsArgs, seed: u64) -> Result<(), Failure> {
    let mut meta = Meta::new(seed);
    let params = load_params(&args.params, &mut meta)?;
    let sys = SpinSystem::new(&params)?;
    let field = parse_field(&args.field)?;
    let rf = parse_direction(&args.rf_direction)?;
    let band = parse_band(&args.band)?;
    let mut cfg = TransitionConfig::default();
    if let Some(v) = args.degeneracy_threshold {
        cfg.degeneracy_threshold_mhz = v;
    }
    if let Some(v) = args.curvature_step {
        cfg.curvature_step_t = v;
    }

    let levels = solve_at(&sys, field)?;
    let table = transition_table(&sys, &levels, &rf, band, &cfg)?;

    let mut body = String::from(
        "low,high,frequency_MHz,strength_MHz_per_T,\
         grad_D1_MHz_per_T,grad_D2_MHz_per_T,grad_b_MHz_per_T,grad_norm_MHz_per_T,\
         curv_D1D1_MHz_per_T2,curv_D1D2_MHz_per_T2,curv_D1b_MHz_per_T2,\
         curv_D2D2_MHz_per_T2,curv_D2b_MHz_per_T2,curv_bb_MHz_per_T2,\
         curvature_norm_MHz_per_T2,degenerate_low,degenerate_high,label\n",
    );
    for t in &table {
        let g = t.gradient_mhz_per_t;
        let c = t.curvature_mhz_per_t2;
        let cells = [
            t.low.to_string(),
            t.high.to_string(),
            fmt(t.frequency_mhz),
            fmt(t.strength_mhz_per_t),
            fmt(g[0]),
            fmt(g[1]),
            fmt(g[2]),
            fmt(g.norm()),
            fmt(c[(0, 0)]),
            fmt(c[(0, 1)]),
            fmt(c[(0, 2)]),
            fmt(c[(1, 1)]),
            fmt(c[(1, 2)]),
            fmt(c[(2, 2)]),
            fmt(spectral_norm(&c)),
            t.degenerate_low.to_string(),
            t.degenerate_high.to_string(),
            t.label.clone(),
        ];
        body.push_str(&cells.join(","));
        body.push('\n');
    }
    meta.write_output(&args.output, &body)?;
    println!(
        "wrote {} transitions in [{}, {}] MHz to {}",
        table.len(),
        band.0,
        band.1,
        args.output.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- map --

#[derive(Args)]
#[command(group = clap::ArgGroup::new("fieldpath")
    .required(true)
    .multiple(false)
    .args(["sweep", "sweep_file"]))]
pub struct MapArgs {
    #[arg(long)]
    params: PathBuf,
    /// Inline sweep (must be colinear; the grid stores signed magnitudes)
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    sweep_file: Option<PathBuf>,
    /// Frequency band "lo:hi" in MHz
    #[arg(long, allow_hyphen_values = true)]
    band: String,
    /// Number of frequency samples across the band
    #[arg(long, default_value_t = 501)]
    bins: usize,
    #[arg(long, default_value = "1,0,0", allow_hyphen_values = true)]
    rf_direction: String,
    /// "lorentzian:FWHM_MHz" or "gaussian:FWHM_MHz"
    #[arg(long, default_value = "lorentzian:5")]
    lineshape: String,
    /// Boltzmann temperature for level populations, kelvin
    #[arg(long, default_value_t = 4.3)]
    temperature_k: f64,
    /// Weight all levels equally instead of thermally
    #[arg(long, conflicts_with = "temperature_k")]
    uniform_populations: bool,
    /// Resonator response "center_MHz:FWHM_MHz" multiplying the map
    #[arg(long)]
    resonator: Option<String>,
    #[arg(long)]
    output: PathBuf,
}

fn parse_lineshape(s: &str) -> Result<Lineshape, Failure> {
    let (kind, fwhm) = s.split_once(':').ok_or_else(|| {
        Failure::invalid(format!("lineshape must be 'lorentzian:FWHM' or 'gaussian:FWHM', got '{s}'"))
    })?;
    let fwhm_mhz: f64 = fwhm
        .trim()
        .parse()
        .map_err(|_| Failure::invalid(format!("lineshape FWHM: unparseable number '{fwhm}'")))?;
    let kind = match kind {
        "lorentzian" => LineshapeKind::Lorentzian,
        "gaussian" => LineshapeKind::Gaussian,
        other => {
            return Err(Failure::invalid(format!(
                "lineshape kind must be lorentzian or gaussian, got '{other}'"
            )))
        }
    };
    Ok(Lineshape { kind, fwhm_mhz })
}

pub fn map(args: &MapArgs, seed: u64) -> Result<(), Failure> {
    let mut meta = Meta::new(seed);
    let params = load_params(&args.params, &mut meta)?;
    let sys = SpinSystem::new(&params)?;
    let fields = resolve_field_path(args.sweep.as_deref(), args.sweep_file.as_deref(), &[], &mut meta)?;
    let (lo, hi) = parse_band(&args.band)?;
    if args.bins < 2 {
        return Err(Failure::invalid(format!(
            "need at least 2 frequency bins, got {}",
            args.bins
        )));
    }
    let mut freqs: Vec<f64> = (0..args.bins)
        .map(|j| lo + (hi - lo) * j as f64 / (args.bins - 1) as f64)
        .collect();
    *freqs.last_mut().unwrap() = hi;
    let rf = parse_direction(&args.rf_direction)?;
    let lineshape = parse_lineshape(&args.lineshape)?;
    let population = if args.uniform_populations {
        PopulationModel::Uniform
    } else {
        PopulationModel::Boltzmann {
            temperature_k: args.temperature_k,
        }
    };
    let resonator = args
        .resonator
        .as_deref()
        .map(|s| -> Result<ResonatorSpec, Failure> {
            let (center_mhz, fwhm_mhz) = parse_colon_pair(s, "resonator", "center_MHz:FWHM_MHz")?;
            Ok(ResonatorSpec { center_mhz, fwhm_mhz })
        })
        .transpose()?;

    let grid = synthesize_map(&sys, &fields, &freqs, &rf, &lineshape, &population, resonator.as_ref())?;
    if !grid.meta.normalized {
        meta.note("warning: zero intensity everywhere (no population contrast); left unnormalized");
    }
    meta.write_output(&args.output, &grid_to_csv_string(&grid))?;
    write_meta_sidecar(&grid, &args.output)?;
    println!(
        "wrote {} field steps × {} frequency bins to {} (+ .meta sidecar)",
        grid.field_t.len(),
        grid.freq_mhz.len(),
        args.output.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- zefoz --

#[derive(Args)]
pub struct ZefozArgs {
    #[arg(long)]
    params: PathBuf,
    /// Sorted index of the lower level at the search fields
    #[arg(long)]
    low: usize,
    /// Sorted index of the upper level
    #[arg(long)]
    high: usize,
    /// Search box "minD1,minD2,minb:maxD1,maxD2,maxb" in tesla
    #[arg(long = "box", allow_hyphen_values = true)]
    bounds: String,
    /// Seeded descent starts
    #[arg(long)]
    starts: Option<usize>,
    /// Accept |∇f| below this, MHz/T
    #[arg(long)]
    gradient_tolerance: Option<f64>,
    /// Converged points closer than this merge, tesla
    #[arg(long)]
    merge_radius: Option<f64>,
    #[arg(long)]
    degeneracy_threshold: Option<f64>,
    #[arg(long)]
    curvature_step: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    output: PathBuf,
}

pub fn zefoz(args: &ZefozArgs, seed: u64) -> Result<(), Failure> {
    let mut meta = Meta::new(seed);
    let params = load_params(&args.params, &mut meta)?;
    let sys = SpinSystem::new(&params)?;
    let (min, max) = parse_box(&args.bounds)?;
    let mut cfg = ZefozConfig {
        seed,
        ..Default::default()
    };
    if let Some(v) = args.starts {
        cfg.n_starts = v;
    }
    if let Some(v) = args.gradient_tolerance {
        cfg.gradient_tolerance_mhz_per_t = v;
    }
    if let Some(v) = args.merge_radius {
        cfg.merge_radius_t = v;
    }
    if let Some(v) = args.degeneracy_threshold {
        cfg.degeneracy_threshold_mhz = v;
    }
    if let Some(v) = args.curvature_step {
        cfg.curvature_step_t = v;
    }
    if let Some(v) = args.max_iterations {
        cfg.max_iterations = v;
    }

    let search = find_zefoz(&sys, args.low, args.high, SearchBox { min, max }, &cfg)?;
    meta.note(format!(
        "starts: attempted={} converged={}",
        search.attempted_starts, search.converged_starts
    ));
    meta.note(format!(
        "best_gradient_norm_MHz_per_T: {}",
        fmt(search.best_gradient_norm_mhz_per_t)
    ));

    let mut body = String::from(
        "B_D1_T,B_D2_T,B_b_T,low,high,frequency_MHz,\
         gradient_norm_MHz_per_T,curvature_norm_MHz_per_T2,start_index\n",
    );
    for p in &search.points {
        let cells = [
            fmt(p.field.0[0]),
            fmt(p.field.0[1]),
            fmt(p.field.0[2]),
            p.low.to_string(),
            p.high.to_string(),
            fmt(p.frequency_mhz),
            fmt(p.gradient_norm_mhz_per_t),
            fmt(p.curvature_norm_mhz_per_t2),
            p.start_index.to_string(),
        ];
        body.push_str(&cells.join(","));
        body.push('\n');
    }
    meta.write_output(&args.output, &body)?;
    println!(
        "{} of {} starts converged; {} distinct candidate(s) written to {}",
        search.converged_starts,
        search.attempted_starts,
        search.points.len(),
        args.output.display()
    );
    Ok(())
}

// -------------------------------------------------------------- echo-sim --

#[derive(Args)]
pub struct EchoSimArgs {
    /// Pulse-sequence description file (key = value lines)
    #[arg(long)]
    sequence: PathBuf,
    /// Spectral line "freq_MHz:weight:T2_us"; repeat per line, T2 may be inf
    #[arg(long, required = true, allow_hyphen_values = true)]
    line: Vec<String>,
    /// Inhomogeneous FWHM around each line, MHz
    #[arg(long, default_value_t = 0.0)]
    inhom_fwhm: f64,
    /// Isochromats drawn per line
    #[arg(long, default_value_t = 1)]
    spins: usize,
    /// Detection sample rate, MHz
    #[arg(long)]
    sample_rate: f64,
    #[arg(long)]
    output: PathBuf,
    /// Integrate |A|² in a window of this width (µs) around each echo
    #[arg(long, requires = "envelope_output")]
    envelope_window: Option<f64>,
    /// Where the per-echo envelope table goes
    #[arg(long, requires = "envelope_window")]
    envelope_output: Option<PathBuf>,
}

fn parse_line_spec(s: &str) -> Result<SpectralLine, Failure> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(Failure::invalid(format!(
            "line must be 'freq_MHz:weight:T2_us', got '{s}'"
        )));
    }
    let num = |part: &str, what: &str| -> Result<f64, Failure> {
        part.trim()
            .parse()
            .map_err(|_| Failure::invalid(format!("line {what}: unparseable number '{part}'")))
    };
    Ok(SpectralLine {
        freq_mhz: num(parts[0], "frequency")?,
        weight: num(parts[1], "weight")?,
        t2_us: num(parts[2], "T2")?,
    })
}

pub fn echo_sim(args: &EchoSimArgs, seed: u64) -> Result<(), Failure> {
    let mut meta = Meta::new(seed);
    let seq_text = meta.read_input(&args.sequence)?;
    let seq = parse_sequence(&seq_text, &args.sequence.display().to_string())?;
    let lines = args
        .line
        .iter()
        .map(|s| parse_line_spec(s))
        .collect::<Result<Vec<_>, _>>()?;
    let ens = EnsembleSpec {
        lines,
        inhom_fwhm_mhz: args.inhom_fwhm,
        n_spins: args.spins,
        seed,
    };
    let trace = simulate_sequence(&seq, &ens, args.sample_rate)?;
    meta.note(format!(
        "echo_centers_us: {}",
        trace
            .echo_centers_us
            .iter()
            .map(|&t| fmt(t))
            .collect::<Vec<_>>()
            .join(" ")
    ));
    meta.write_output(&args.output, &trace_to_csv_string(&trace))?;
    let mut summary = format!(
        "wrote {} samples covering {} µs to {}",
        trace.n_samples(),
        fmt(trace.end_us()),
        args.output.display()
    );

    if let (Some(window), Some(env_path)) = (args.envelope_window, &args.envelope_output) {
        let envelope = echo_envelope(&trace, window)?;
        let mut body = String::from("echo_center_us,intensity\n");
        for (center, intensity) in &envelope {
            body.push_str(&format!("{},{}\n", fmt(*center), fmt(*intensity)));
        }
        meta.write_output(env_path, &body)?;
        let _ = write!(
            summary,
            "; {} echo intensities to {}",
            envelope.len(),
            env_path.display()
        );
    }
    println!("{summary}");
    Ok(())
}

// ---------------------------------------------------------------- fit-t2 --

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum EchoModel {
    /// Two-pulse (Hahn) decay sampled against the pulse delay τ
    TwoPulse,
    /// Multi-pulse train decay sampled against the total evolution time
    Cpmg,
}

#[derive(Args)]
pub struct FitT2Args {
    /// Decay table: first column time (µs), second column echo intensity
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    model: EchoModel,
    /// Also fit a stretch exponent (otherwise held at 1)
    #[arg(long)]
    stretch: bool,
    #[arg(long)]
    output: PathBuf,
}

pub fn fit_t2(args: &FitT2Args, seed: u64) -> Result<(), Failure> {
    let mut meta = Meta::new(seed);
    let text = meta.read_input(&args.input)?;
    let data = parse_xy(&text, &args.input.display().to_string())?;
    let fit = match args.model {
        EchoModel::TwoPulse => fit_t2_two_pulse(&data, args.stretch)?,
        EchoModel::Cpmg => fit_t2_cpmg(&data, args.stretch)?,
    };

    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    let body = format!(
        "t2_us,t2_sigma_us,amplitude,amplitude_sigma,stretch,stretch_sigma,residual_norm,converged,diagnostic\n{},{},{},{},{},{},{},{},{}\n",
        fmt(fit.t2_us),
        fmt(fit.t2_variance.sqrt()),
        fmt(fit.amplitude),
        fmt(fit.amplitude_variance.sqrt()),
        opt(fit.stretch),
        opt(fit.stretch_variance.map(f64::sqrt)),
        fmt(fit.residual_norm),
        fit.converged,
        fit.diagnostic.as_deref().map(quote).unwrap_or_default(),
    );
    meta.write_output(&args.output, &body)?;
    println!(
        "T2 = {} µs (converged: {}); wrote {}",
        fmt(fit.t2_us),
        fit.converged,
        args.output.display()
    );
    Ok(())
}

// ---------------------------------------------------------- fit-lifetime --

#[derive(Args)]
pub struct FitLifetimeArgs {
    /// Recovery table: first column delay (ms), second column signal
    #[arg(long)]
    input: PathBuf,
    /// Reference excited-state lifetime, ms
    #[arg(long)]
    excited_reference: Option<f64>,
    /// Accept T1 within this factor of the reference as excited-like
    #[arg(long)]
    excited_factor: Option<f64>,
    /// Ground-like when T1 − σ exceeds this floor, ms
    #[arg(long)]
    ground_min: Option<f64>,
    #[arg(long)]
    output: PathBuf,
}

pub fn fit_lifetime_cmd(args: &FitLifetimeArgs, seed: u64) -> Result<(), Failure> {
    let mut meta = Meta::new(seed);
    let text = meta.read_input(&args.input)?;
    let data = parse_xy(&text, &args.input.display().to_string())?;
    let mut cfg = LifetimeConfig::default();
    if let Some(v) = args.excited_reference {
        cfg.excited_reference_ms = v;
    }
    if let Some(v) = args.excited_factor {
        cfg.excited_factor = v;
    }
    if let Some(v) = args.ground_min {
        cfg.ground_min_ms = v;
    }
    let fit = fit_lifetime(&data, &cfg)?;
    let class = match fit.class {
        LifetimeClass::ExcitedLike => "excited-like",
        LifetimeClass::GroundLike => "ground-like",
        LifetimeClass::Unclassified => "unclassified",
    };
    let body = format!(
        "t1_ms,t1_sigma_ms,amplitude,class,residual_norm,diagnostic\n{},{},{},{},{},{}\n",
        fmt(fit.t1_ms),
        fmt(fit.t1_sigma_ms),
        fmt(fit.amplitude),
        class,
        fmt(fit.residual_norm),
        fit.diagnostic.as_deref().map(quote).unwrap_or_default(),
    );
    meta.write_output(&args.output, &body)?;
    println!(
        "T1 = {} ms ({class}); wrote {}",
        fmt(fit.t1_ms),
        args.output.display()
    );
    Ok(())
}

// --------------------------------------------------------------- fit-ham --

#[derive(Args)]
pub struct FitHamArgs {
    /// Starting parameter set (also fixes everything not in --free)
    #[arg(long)]
    params: PathBuf,
    /// Observed lines: B_D1_T,B_D2_T,B_b_T,freq_MHz[,low,high]
    #[arg(long)]
    observations: PathBuf,
    /// Components to vary, e.g. "A22,g01,Q00,gn" (row/col digits 0–2)
    #[arg(long)]
    free: String,
    #[arg(long, default_value_t = 1)]
    starts: usize,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    gradient_tolerance: Option<f64>,
    /// Relative spread of the seeded multi-start perturbations
    #[arg(long)]
    start_spread: Option<f64>,
    /// Flag observations with ≥ 2 model lines within this, MHz
    #[arg(long)]
    ambiguity_linewidth: Option<f64>,
    /// Refined parameter file (re-loadable)
    #[arg(long)]
    output: PathBuf,
}

fn parse_free_list(spec: &str) -> Result<FreeMask, Failure> {
    let mut mask = FreeMask::none();
    for entry in spec.split(',') {
        let entry = entry.trim();
        if entry == "gn" {
            mask = mask.with_nuclear_g();
            continue;
        }
        let bad = || {
            Failure::invalid(format!(
                "free component '{entry}' not understood; use g/A/Q + row + col (e.g. A22) or gn"
            ))
        };
        let mut chars = entry.chars();
        let tensor = chars.next().ok_or_else(bad)?;
        let row = chars.next().and_then(|c| c.to_digit(10)).ok_or_else(bad)? as usize;
        let col = chars.next().and_then(|c| c.to_digit(10)).ok_or_else(bad)? as usize;
        if chars.next().is_some() || row > 2 || col > 2 {
            return Err(bad());
        }
        mask = match tensor {
            'g' => mask.with_g(row, col),
            'A' => mask.with_a(row, col),
            'Q' => mask.with_q(row, col),
            _ => return Err(bad()),
        };
    }
    Ok(mask)
}

fn parse_observations(text: &str, source: &str) -> Result<Vec<Observation>, Failure> {
    let table = parse_table(text, source)?;
    let b = [
        table.column("B_D1_T")?,
        table.column("B_D2_T")?,
        table.column("B_b_T")?,
    ];
    let freq = table.column("freq_MHz")?;
    let pair_cols = if table.has_column("low") || table.has_column("high") {
        Some((table.column("low")?, table.column("high")?))
    } else {
        None
    };

    let index = |row: usize, col: usize| -> Result<usize, Failure> {
        let v = table.num(row, col)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Failure::invalid(format!(
                "{source} line {}: level index must be a non-negative integer, got {v}",
                table.row_lines[row]
            )));
        }
        Ok(v as usize)
    };

    (0..table.rows.len())
        .map(|r| {
            let field = kramers::FieldVec::new(
                table.num(r, b[0])?,
                table.num(r, b[1])?,
                table.num(r, b[2])?,
            );
            let pair = match pair_cols {
                Some((lo, hi)) => match (table.rows[r][lo], table.rows[r][hi]) {
                    (None, None) => None,
                    (Some(_), Some(_)) => Some((index(r, lo)?, index(r, hi)?)),
                    _ => {
                        return Err(Failure::invalid(format!(
                            "{source} line {}: give both of low/high or neither",
                            table.row_lines[r]
                        )))
                    }
                },
                None => None,
            };
            Ok(Observation {
                field,
                freq_mhz: table.num(r, freq)?,
                pair,
            })
        })
        .collect()
}

pub fn fit_ham(args: &FitHamArgs, seed: u64) -> Result<(), Failure> {
    let mut meta = Meta::new(seed);
    let initial = load_params(&args.params, &mut meta)?;
    let obs_text = meta.read_input(&args.observations)?;
    let observations = parse_observations(&obs_text, &args.observations.display().to_string())?;
    let mask = parse_free_list(&args.free)?;
    let mut cfg = HamFitConfig::default();
    if let Some(v) = args.max_iterations {
        cfg.max_iterations = v;
    }
    if let Some(v) = args.gradient_tolerance {
        cfg.gradient_tolerance = v;
    }
    if let Some(v) = args.start_spread {
        cfg.start_spread = v;
    }
    if let Some(v) = args.ambiguity_linewidth {
        cfg.ambiguity_linewidth_mhz = v;
    }

    let results = fit_hamiltonian_params(&observations, &initial, &mask, args.starts, seed, &cfg)?;
    let best = &results[0];
    meta.note(format!("residual_norm_MHz: {}", fmt(best.residual_norm_mhz)));
    meta.note(format!("converged: {}", best.converged));
    meta.note(format!("best_start_index: {}", best.start_index));
    meta.note(format!(
        "per_datum_residuals_MHz: {}",
        best.per_datum_residuals_mhz
            .iter()
            .map(|&r| fmt(r))
            .collect::<Vec<_>>()
            .join(" ")
    ));
    if !best.ambiguous.is_empty() {
        meta.note(format!(
            "warning: ambiguous line assignment for observation(s) {}",
            best.ambiguous
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
    }
    meta.write_output(&args.output, &params_to_string(&best.params))?;
    println!(
        "residual norm {} MHz over {} observations (converged: {}); wrote {}",
        fmt(best.residual_norm_mhz),
        observations.len(),
        best.converged,
        args.output.display()
    );
    Ok(())
}

