//! Time-domain echo simulation: two-pulse and CPMG sequences on an ensemble
//! of independent two-level isochromats.
//!
//! Each spectral line is reduced to a rotating-frame two-level system with a
//! detuning δ = line − drive and a phenomenological coherence time; the full
//! multi-level density matrix is deliberately out of scope. Flip-flop and
//! other microscopic decoherence channels enter only through the per-line T₂.
//!
//! Timeline convention: the trace starts at t = 0, the end of the π/2 pulse.
//! Refocusing π pulses are centered at (2k−1)τ and echoes form at 2kτ, i.e.
//! τ after the final π pulse. Finite-width pulses are centered on their
//! nominal times and evolve the Bloch vector about the tilted axis
//! (ω₁·â + δ·ẑ); decay is neglected for the duration of a pulse.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Required oversampling of the fastest beat in the ensemble.
pub const OVERSAMPLING_FACTOR: f64 = 10.0;

/// Isochromats per parallel accumulation chunk. The chunking (not the rayon
/// thread count) fixes the floating-point summation order, so traces are
/// bitwise identical however many threads run.
const ACCUMULATION_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceKind {
    TwoPulse,
    Cpmg,
}

/// Echo sequence description. `b1_t` and `laser_gate_windows_us` are carried
/// as annotations for provenance (Rabi calibration and optical gating are not
/// simulated).
#[derive(Clone, Debug, PartialEq)]
pub struct PulseSequence {
    pub kind: SequenceKind,
    /// Rotating-frame reference (drive) frequency, MHz.
    pub drive_freq_mhz: f64,
    pub t_pi_half_us: f64,
    pub t_pi_us: f64,
    /// Inter-pulse delay τ, µs.
    pub tau_us: f64,
    /// Number of refocusing π pulses; a two-pulse sequence has exactly one.
    pub n_pulses: usize,
    pub b1_t: Option<f64>,
    pub laser_gate_windows_us: Vec<(f64, f64)>,
}

impl PulseSequence {
    /// Ideal (zero-width) two-pulse echo sequence.
    pub fn two_pulse(drive_freq_mhz: f64, tau_us: f64) -> Self {
        PulseSequence {
            kind: SequenceKind::TwoPulse,
            drive_freq_mhz,
            t_pi_half_us: 0.0,
            t_pi_us: 0.0,
            tau_us,
            n_pulses: 1,
            b1_t: None,
            laser_gate_windows_us: Vec::new(),
        }
    }

    /// Ideal CPMG sequence with `n_pulses` refocusing pulses.
    pub fn cpmg(drive_freq_mhz: f64, tau_us: f64, n_pulses: usize) -> Self {
        PulseSequence {
            kind: SequenceKind::Cpmg,
            n_pulses,
            ..PulseSequence::two_pulse(drive_freq_mhz, tau_us)
        }
    }

    pub fn with_pulse_widths(mut self, t_pi_half_us: f64, t_pi_us: f64) -> Self {
        self.t_pi_half_us = t_pi_half_us;
        self.t_pi_us = t_pi_us;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSequence(m));
        if !(self.tau_us > 0.0 && self.tau_us.is_finite()) {
            return bad(format!("tau must be positive and finite, got {} µs", self.tau_us));
        }
        if !(self.t_pi_half_us >= 0.0 && self.t_pi_us >= 0.0)
            || !self.t_pi_half_us.is_finite()
            || !self.t_pi_us.is_finite()
        {
            return bad("pulse widths must be finite and non-negative".into());
        }
        if self.t_pi_us >= self.tau_us {
            return bad(format!(
                "tau ({} µs) must exceed the π pulse width ({} µs)",
                self.tau_us, self.t_pi_us
            ));
        }
        if self.n_pulses == 0 {
            return bad("at least one refocusing pulse is required".into());
        }
        if self.kind == SequenceKind::TwoPulse && self.n_pulses != 1 {
            return bad(format!(
                "a two-pulse sequence has exactly one π pulse, got {}",
                self.n_pulses
            ));
        }
        if !self.drive_freq_mhz.is_finite() {
            return bad("drive frequency must be finite".into());
        }
        Ok(())
    }

    /// Echo centers, µs after the π/2 pulse: 2kτ for k = 1..=N.
    pub fn echo_centers_us(&self) -> Vec<f64> {
        (1..=self.n_pulses).map(|k| 2.0 * k as f64 * self.tau_us).collect()
    }

    /// Total evolution time 2Nτ from the π/2 pulse to the final echo.
    pub fn total_time_us(&self) -> f64 {
        2.0 * self.n_pulses as f64 * self.tau_us
    }
}

/// One homogeneous spectral component of the ensemble.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralLine {
    pub freq_mhz: f64,
    pub weight: f64,
    pub t2_us: f64,
}

/// Ensemble: spectral lines, each inhomogeneously broadened by a Gaussian of
/// the given FWHM, sampled with `n_spins` seeded draws per line.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    pub lines: Vec<SpectralLine>,
    pub inhom_fwhm_mhz: f64,
    pub n_spins: usize,
    pub seed: u64,
}

impl EnsembleSpec {
    /// A single narrow line with unit weight.
    pub fn single_line(freq_mhz: f64, t2_us: f64) -> Self {
        EnsembleSpec {
            lines: vec![SpectralLine {
                freq_mhz,
                weight: 1.0,
                t2_us,
            }],
            inhom_fwhm_mhz: 0.0,
            n_spins: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSequence(m));
        if self.lines.is_empty() {
            return bad("ensemble needs at least one spectral line".into());
        }
        for (i, l) in self.lines.iter().enumerate() {
            if !(l.weight > 0.0 && l.weight.is_finite()) {
                return bad(format!("line {i}: weight must be positive, got {}", l.weight));
            }
            if l.t2_us <= 0.0 || l.t2_us.is_nan() {
                return bad(format!("line {i}: T2 must be positive, got {} µs", l.t2_us));
            }
            if !l.freq_mhz.is_finite() {
                return bad(format!("line {i}: frequency must be finite"));
            }
        }
        if !(self.inhom_fwhm_mhz >= 0.0 && self.inhom_fwhm_mhz.is_finite()) {
            return bad(format!(
                "inhomogeneous width must be non-negative, got {} MHz",
                self.inhom_fwhm_mhz
            ));
        }
        if self.n_spins == 0 {
            return bad("nSpins must be at least 1".into());
        }
        Ok(())
    }
}

/// Uniformly sampled complex echo trace starting at the end of the π/2 pulse.
#[derive(Clone, Debug, PartialEq)]
pub struct EchoTrace {
    pub t0_us: f64,
    pub dt_us: f64,
    pub amplitude: Vec<Complex64>,
    pub echo_centers_us: Vec<f64>,
}

impl EchoTrace {
    pub fn n_samples(&self) -> usize {
        self.amplitude.len()
    }

    pub fn time_at(&self, index: usize) -> f64 {
        self.t0_us + index as f64 * self.dt_us
    }

    pub fn end_us(&self) -> f64 {
        self.time_at(self.n_samples().saturating_sub(1))
    }

    /// Index of the largest |amplitude| within [lo, hi] µs.
    pub fn argmax_abs_in(&self, lo_us: f64, hi_us: f64) -> Option<usize> {
        (0..self.n_samples())
            .filter(|&j| {
                let t = self.time_at(j);
                t >= lo_us && t <= hi_us
            })
            .max_by(|&a, &b| self.amplitude[a].norm().total_cmp(&self.amplitude[b].norm()))
    }
}

/// One isochromat: detuning, weight, decay rate, Bloch vector.
#[derive(Clone, Copy)]
struct Isochromat {
    delta_mhz: f64,
    weight: f64,
    /// 1/T2 in µs⁻¹ (0 for T2 = ∞).
    gamma: f64,
    m_perp: Complex64,
    mz: f64,
}

impl Isochromat {
    /// Free precession + decay for `dt` µs: M⊥ → M⊥ e^{−i2πδ·dt} e^{−dt/T2}.
    fn free(&self, dt: f64) -> (Complex64, f64) {
        let phase = -2.0 * PI * self.delta_mhz * dt;
        let m = self.m_perp
            * Complex64::from_polar((-self.gamma * dt).exp(), phase);
        (m, self.mz)
    }

    fn advance_free(&mut self, dt: f64) {
        let (m, mz) = self.free(dt);
        self.m_perp = m;
        self.mz = mz;
    }

    /// Rotate the Bloch vector by `angle` about the unit axis `n` (Rodrigues).
    fn rotate(&mut self, n: [f64; 3], angle: f64) {
        let v = [self.m_perp.re, self.m_perp.im, self.mz];
        let (s, c) = angle.sin_cos();
        let ndotv = n[0] * v[0] + n[1] * v[1] + n[2] * v[2];
        let cross = [
            n[1] * v[2] - n[2] * v[1],
            n[2] * v[0] - n[0] * v[2],
            n[0] * v[1] - n[1] * v[0],
        ];
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = v[a] * c + cross[a] * s + n[a] * ndotv * (1.0 - c);
        }
        self.m_perp = Complex64::new(out[0], out[1]);
        self.mz = out[2];
    }

    /// Pulse of nominal `angle` about the in-plane axis (x̂ or ŷ), including
    /// the detuning tilt when the width is finite.
    fn pulse(&mut self, axis: PulseAxis, angle: f64, width_us: f64, partial_us: Option<f64>) {
        let inplane = match axis {
            PulseAxis::X => [1.0, 0.0],
            PulseAxis::Y => [0.0, 1.0],
        };
        if width_us == 0.0 {
            self.rotate([inplane[0], inplane[1], 0.0], angle);
            return;
        }
        let w1 = angle / width_us; // rad/µs
        let wz = -2.0 * PI * self.delta_mhz; // matches the free-precession sign
        let omega = (w1 * w1 + wz * wz).sqrt();
        let n = [inplane[0] * w1 / omega, inplane[1] * w1 / omega, wz / omega];
        let t = partial_us.unwrap_or(width_us);
        self.rotate(n, omega * t);
    }
}

#[derive(Clone, Copy)]
enum PulseAxis {
    X,
    Y,
}

/// Draw the isochromat list for an ensemble. Gaussian inhomogeneous offsets
/// use σ = FWHM / √(8 ln 2); draws are ChaCha-seeded and line-ordered, so the
/// ensemble is reproducible by construction.
fn draw_isochromats(ens: &EnsembleSpec, drive_freq_mhz: f64) -> Vec<Isochromat> {
    let mut rng = ChaCha8Rng::seed_from_u64(ens.seed);
    let sigma = ens.inhom_fwhm_mhz / (8.0 * std::f64::consts::LN_2).sqrt();
    let normal = Normal::new(0.0, sigma).expect("validated width");
    let total_weight: f64 = ens.lines.iter().map(|l| l.weight).sum();
    let mut isos = Vec::with_capacity(ens.lines.len() * ens.n_spins);
    for line in &ens.lines {
        let weight = line.weight / (total_weight * ens.n_spins as f64);
        let gamma = if line.t2_us.is_infinite() { 0.0 } else { 1.0 / line.t2_us };
        for _ in 0..ens.n_spins {
            let offset = if ens.inhom_fwhm_mhz > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            isos.push(Isochromat {
                delta_mhz: line.freq_mhz - drive_freq_mhz + offset,
                weight,
                gamma,
                m_perp: Complex64::new(0.0, 0.0),
                mz: 1.0,
            });
        }
    }
    isos
}

/// Simulate a pulse sequence on an ensemble, sampling the summed transverse
/// amplitude at `sample_rate_mhz` from the end of the π/2 pulse to τ past the
/// final echo. Amplitudes are normalized to unit total weight, so a lossless
/// refocused ensemble reaches |amplitude| = 1 at the echo.
pub fn simulate_sequence(
    seq: &PulseSequence,
    ens: &EnsembleSpec,
    sample_rate_mhz: f64,
) -> Result<EchoTrace> {
    seq.validate()?;
    ens.validate()?;
    if !(sample_rate_mhz > 0.0 && sample_rate_mhz.is_finite()) {
        return Err(Error::InvalidSequence(format!(
            "sample rate must be positive, got {sample_rate_mhz} MHz"
        )));
    }

    let isos = draw_isochromats(ens, seq.drive_freq_mhz);
    let max_detuning = isos
        .iter()
        .map(|i| i.delta_mhz.abs())
        .fold(0.0f64, f64::max);
    let required = OVERSAMPLING_FACTOR * max_detuning;
    if sample_rate_mhz < required {
        return Err(Error::Undersampled {
            given_mhz: sample_rate_mhz,
            max_detuning_mhz: max_detuning,
            required_mhz: required,
        });
    }

    let dt = 1.0 / sample_rate_mhz;
    let t_end = seq.total_time_us() + seq.tau_us;
    let n_samples = (t_end / dt).floor() as usize + 1;
    if n_samples > 20_000_000 {
        return Err(Error::InvalidSequence(format!(
            "trace would hold {n_samples} samples; lower the rate or shorten the sequence"
        )));
    }

    // Fixed-size isochromat chunks, accumulated in chunk order: the summation
    // order (hence every output bit) is independent of the rayon thread count.
    let chunk_traces: Vec<Vec<Complex64>> = isos
        .par_chunks(ACCUMULATION_CHUNK)
        .map(|chunk| {
            let mut buf = vec![Complex64::new(0.0, 0.0); n_samples];
            for iso in chunk {
                accumulate_isochromat(*iso, seq, dt, &mut buf);
            }
            buf
        })
        .collect();
    let mut amplitude = vec![Complex64::new(0.0, 0.0); n_samples];
    for buf in chunk_traces {
        for (a, b) in amplitude.iter_mut().zip(buf) {
            *a += b;
        }
    }

    Ok(EchoTrace {
        t0_us: 0.0,
        dt_us: dt,
        amplitude,
        echo_centers_us: seq.echo_centers_us(),
    })
}

/// March one isochromat through the sequence, adding its weighted transverse
/// amplitude into `buf` at every sample.
fn accumulate_isochromat(
    mut iso: Isochromat,
    seq: &PulseSequence,
    dt: f64,
    buf: &mut [Complex64],
) {
    // π/2 about x̂ ends exactly at t = 0 (its interval is not recorded).
    iso.pulse(PulseAxis::X, PI / 2.0, seq.t_pi_half_us, None);

    let n = buf.len();
    let mut cursor = 0.0f64; // current state time
    let mut next = 0usize; // first unwritten sample index

    fn emit_free_until(
        iso: &mut Isochromat,
        next: &mut usize,
        cursor: &mut f64,
        until: f64,
        dt: f64,
        buf: &mut [Complex64],
    ) {
        while *next < buf.len() {
            let t = *next as f64 * dt;
            if t >= until {
                break;
            }
            let (m, _) = iso.free(t - *cursor);
            buf[*next] += m * iso.weight;
            *next += 1;
        }
        iso.advance_free(until - *cursor);
        *cursor = until;
    }

    for k in 1..=seq.n_pulses {
        let center = (2 * k - 1) as f64 * seq.tau_us;
        let p0 = center - seq.t_pi_us / 2.0;
        let p1 = center + seq.t_pi_us / 2.0;
        emit_free_until(&mut iso, &mut next, &mut cursor, p0, dt, buf);
        if seq.t_pi_us > 0.0 {
            // Samples inside the pulse: partial tilted-axis rotation from the
            // pulse start (decay neglected for the pulse duration).
            while next < n {
                let t = next as f64 * dt;
                if t >= p1 {
                    break;
                }
                let mut partial = iso;
                partial.pulse(PulseAxis::Y, PI, seq.t_pi_us, Some(t - p0));
                buf[next] += partial.m_perp * iso.weight;
                next += 1;
            }
        }
        iso.pulse(PulseAxis::Y, PI, seq.t_pi_us, None);
        cursor = p1;
    }
    let t_last = (n - 1) as f64 * dt;
    emit_free_until(&mut iso, &mut next, &mut cursor, t_last + dt, dt, buf);
}

/// Integrated |amplitude|² (trapezoidal rule) over a window of `window_us`
/// centered on each echo. Windows must fit inside the trace and must not
/// overlap each other.
pub fn echo_envelope(trace: &EchoTrace, window_us: f64) -> Result<Vec<(f64, f64)>> {
    if !(window_us > 0.0 && window_us.is_finite()) {
        return Err(Error::InvalidSequence(format!(
            "window must be positive, got {window_us} µs"
        )));
    }
    let mut prev_hi = f64::NEG_INFINITY;
    let mut out = Vec::with_capacity(trace.echo_centers_us.len());
    for &center in &trace.echo_centers_us {
        let lo = center - window_us / 2.0;
        let hi = center + window_us / 2.0;
        if lo < prev_hi {
            return Err(Error::InvalidSequence(format!(
                "echo windows overlap near {center} µs; shrink the window below the echo spacing"
            )));
        }
        // Half-sample slack: a window that ends exactly at the final sample
        // should not be rejected for floating-point reasons.
        if lo < trace.t0_us - 0.5 * trace.dt_us || hi > trace.end_us() + 0.5 * trace.dt_us {
            return Err(Error::InvalidSequence(format!(
                "echo window [{lo}, {hi}] µs extends past the trace span [{}, {}] µs",
                trace.t0_us,
                trace.end_us()
            )));
        }
        prev_hi = hi;

        let mut acc = 0.0;
        let mut prev: Option<f64> = None;
        for j in 0..trace.n_samples() {
            let t = trace.time_at(j);
            if t < lo || t > hi {
                if prev.is_some() && t > hi {
                    break;
                }
                continue;
            }
            let v = trace.amplitude[j].norm_sqr();
            if let Some(p) = prev {
                acc += 0.5 * (p + v) * trace.dt_us;
            }
            prev = Some(v);
        }
        out.push((center, acc));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic decay datasets
// ---------------------------------------------------------------------------

/// Which decay family a dataset follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayModel {
    /// Two-pulse echo intensity vs τ: I(τ) = exp(−2(2τ/T₂)^x).
    TwoPulse,
    /// CPMG echo intensity vs total time T = 2Nτ: I(T) = exp(−2(T/T₂)^x).
    Cpmg,
}

/// Synthesize a decay dataset with multiplicative Gaussian noise
/// I → I·(1 + σ·N(0,1)), seeded. `stretch` is the amplitude-exponent power x
/// (1 = pure exponential), accepted in [1, 3].
pub fn decay_curve(
    model: DecayModel,
    t2_us: f64,
    times_us: &[f64],
    stretch: f64,
    noise_rel_sigma: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if t2_us <= 0.0 || t2_us.is_nan() {
        return Err(Error::InvalidInput(format!("T2 must be positive, got {t2_us} µs")));
    }
    if !(1.0..=3.0).contains(&stretch) {
        return Err(Error::InvalidInput(format!(
            "stretch exponent must lie in [1, 3], got {stretch}"
        )));
    }
    if !(noise_rel_sigma >= 0.0 && noise_rel_sigma.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "noise sigma must be non-negative, got {noise_rel_sigma}"
        )));
    }
    if times_us.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidInput("times must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let curve = times_us
        .iter()
        .map(|&t| {
            let arg = match model {
                DecayModel::TwoPulse => 2.0 * t / t2_us,
                DecayModel::Cpmg => t / t2_us,
            };
            let mut intensity = (-2.0 * arg.powf(stretch)).exp();
            if noise_rel_sigma > 0.0 {
                intensity *= 1.0 + noise_rel_sigma * normal.sample(&mut rng);
            }
            (t, intensity)
        })
        .collect();
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Text interfaces: sequence key-value block, trace/dataset CSV
// ---------------------------------------------------------------------------

pub fn sequence_to_string(seq: &PulseSequence) -> String {
    let mut out = String::new();
    let kind = match seq.kind {
        SequenceKind::TwoPulse => "twoPulse",
        SequenceKind::Cpmg => "cpmg",
    };
    let _ = writeln!(out, "kind = {kind}");
    let _ = writeln!(out, "drive_MHz = {}", seq.drive_freq_mhz);
    let _ = writeln!(out, "t_pi_half_us = {}", seq.t_pi_half_us);
    let _ = writeln!(out, "t_pi_us = {}", seq.t_pi_us);
    let _ = writeln!(out, "tau_us = {}", seq.tau_us);
    let _ = writeln!(out, "n_pulses = {}", seq.n_pulses);
    if let Some(b1) = seq.b1_t {
        let _ = writeln!(out, "b1_T = {b1}");
    }
    if !seq.laser_gate_windows_us.is_empty() {
        let gates: Vec<String> = seq
            .laser_gate_windows_us
            .iter()
            .map(|(a, b)| format!("{a}:{b}"))
            .collect();
        let _ = writeln!(out, "laser_gate_us = {}", gates.join(", "));
    }
    out
}

pub fn parse_sequence(text: &str, source: &str) -> Result<PulseSequence> {
    let fail = |line: usize, message: String| Error::ParamFile {
        path: source.to_string(),
        line,
        message,
    };
    let mut kind = None;
    let mut drive = None;
    let mut t_pi_half = 0.0;
    let mut t_pi = 0.0;
    let mut tau = None;
    let mut n_pulses = 1usize;
    let mut b1 = None;
    let mut gates = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
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
            let parsed: f64 = v
                .parse()
                .map_err(|_| fail(lineno, format!("invalid number `{v}`")))?;
            if parsed.is_nan() {
                return Err(fail(lineno, format!("invalid number `{v}`")));
            }
            Ok(parsed)
        };
        match key {
            "kind" => {
                kind = Some(match value {
                    "twoPulse" => SequenceKind::TwoPulse,
                    "cpmg" => SequenceKind::Cpmg,
                    other => {
                        return Err(fail(
                            lineno,
                            format!("kind must be twoPulse or cpmg, got `{other}`"),
                        ))
                    }
                })
            }
            "drive_MHz" => drive = Some(num(value)?),
            "t_pi_half_us" => t_pi_half = num(value)?,
            "t_pi_us" => t_pi = num(value)?,
            "tau_us" => tau = Some(num(value)?),
            "n_pulses" => {
                n_pulses = value
                    .parse()
                    .map_err(|_| fail(lineno, format!("invalid integer `{value}`")))?
            }
            "b1_T" => b1 = Some(num(value)?),
            "laser_gate_us" => {
                for part in value.split(',') {
                    let (a, b) = part
                        .trim()
                        .split_once(':')
                        .ok_or_else(|| fail(lineno, format!("expected start:end, got `{part}`")))?;
                    gates.push((num(a.trim())?, num(b.trim())?));
                }
            }
            other => return Err(fail(lineno, format!("unknown key `{other}`"))),
        }
    }
    let kind = kind.ok_or_else(|| fail(0, "missing required key `kind`".into()))?;
    let drive_freq_mhz = drive.ok_or_else(|| fail(0, "missing required key `drive_MHz`".into()))?;
    let tau_us = tau.ok_or_else(|| fail(0, "missing required key `tau_us`".into()))?;
    let seq = PulseSequence {
        kind,
        drive_freq_mhz,
        t_pi_half_us: t_pi_half,
        t_pi_us: t_pi,
        tau_us,
        n_pulses,
        b1_t: b1,
        laser_gate_windows_us: gates,
    };
    seq.validate()?;
    Ok(seq)
}

/// Trace as CSV: time, re, im, |amplitude| per sample.
pub fn trace_to_csv_string(trace: &EchoTrace) -> String {
    let mut out = String::from("time_us,re,im,abs\n");
    for j in 0..trace.n_samples() {
        let a = trace.amplitude[j];
        let _ = writeln!(out, "{},{},{},{}", trace.time_at(j), a.re, a.im, a.norm());
    }
    out
}

/// Decay dataset as CSV: time, intensity.
pub fn decay_to_csv_string(points: &[(f64, f64)], time_label: &str) -> String {
    let mut out = format!("{time_label},intensity\n");
    for (t, i) in points {
        let _ = writeln!(out, "{t},{i}");
    }
    out
}
