//! Plain-text spin-parameter files.
//!
//! Format: one `key = value` pair per line, `#` starts a comment, blank lines
//! are ignored. Required keys: `electron_spin`, `nuclear_spin` (half-integers,
//! written `7/2` or `3.5`), `g`, `A_MHz`, `Q_MHz` (nine numbers, row-major),
//! `nuclear_g` (number) and `nuclear_zeeman` (`true`/`false`). `label` is
//! optional free text. Unknown and duplicate keys are rejected.
//!
//! Parse errors carry the 1-based line number; errors about the file as a
//! whole (missing keys, tensor constraints) point at the line that defined
//! the offending key, or line 0 when no single line is to blame.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::spin::{HalfSpin, SpinParams};

const REQUIRED_KEYS: [&str; 7] = [
    "electron_spin",
    "nuclear_spin",
    "g",
    "A_MHz",
    "Q_MHz",
    "nuclear_g",
    "nuclear_zeeman",
];

/// Load and validate spin parameters from `path`.
pub fn load_params(path: impl AsRef<Path>) -> Result<SpinParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_params(&text, &path.display().to_string())
}

/// Parse spin parameters from an in-memory string; `source` names it in errors.
pub fn parse_params(text: &str, source: &str) -> Result<SpinParams> {
    let fail = |line: usize, message: String| Error::ParamFile {
        path: source.to_string(),
        line,
        message,
    };

    let mut electron_spin = None;
    let mut nuclear_spin = None;
    let mut g = None;
    let mut a_mhz = None;
    let mut q_mhz = None;
    let mut nuclear_g = None;
    let mut nuclear_zeeman = None;
    let mut label = String::new();
    let mut seen: Vec<(&str, usize)> = Vec::new();

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
        if let Some((_, first)) = seen.iter().find(|(k, _)| *k == key) {
            return Err(fail(
                lineno,
                format!("duplicate key `{key}` (first defined on line {first})"),
            ));
        }
        match key {
            "electron_spin" => {
                electron_spin = Some(parse_half_spin(value).map_err(|m| fail(lineno, m))?);
                seen.push(("electron_spin", lineno));
            }
            "nuclear_spin" => {
                nuclear_spin = Some(parse_half_spin(value).map_err(|m| fail(lineno, m))?);
                seen.push(("nuclear_spin", lineno));
            }
            "g" => {
                g = Some(parse_matrix(value).map_err(|m| fail(lineno, m))?);
                seen.push(("g", lineno));
            }
            "A_MHz" => {
                a_mhz = Some(parse_matrix(value).map_err(|m| fail(lineno, m))?);
                seen.push(("A_MHz", lineno));
            }
            "Q_MHz" => {
                q_mhz = Some(parse_matrix(value).map_err(|m| fail(lineno, m))?);
                seen.push(("Q_MHz", lineno));
            }
            "nuclear_g" => {
                nuclear_g = Some(parse_number(value).map_err(|m| fail(lineno, m))?);
                seen.push(("nuclear_g", lineno));
            }
            "nuclear_zeeman" => {
                nuclear_zeeman = Some(match value {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(fail(
                            lineno,
                            format!("nuclear_zeeman must be `true` or `false`, got `{other}`"),
                        ))
                    }
                });
                seen.push(("nuclear_zeeman", lineno));
            }
            "label" => {
                label = value.to_string();
                seen.push(("label", lineno));
            }
            other => {
                return Err(fail(
                    lineno,
                    format!(
                        "unknown key `{other}`; expected one of {}, label",
                        REQUIRED_KEYS.join(", ")
                    ),
                ))
            }
        }
    }

    for key in REQUIRED_KEYS {
        if !seen.iter().any(|(k, _)| *k == key) {
            return Err(fail(0, format!("missing required key `{key}`")));
        }
    }

    let params = SpinParams {
        electron_spin: electron_spin.unwrap(),
        nuclear_spin: nuclear_spin.unwrap(),
        g: g.unwrap(),
        a_mhz: a_mhz.unwrap(),
        q_mhz: q_mhz.unwrap(),
        nuclear_g: nuclear_g.unwrap(),
        nuclear_zeeman: nuclear_zeeman.unwrap(),
        label,
    };

    params.validate().map_err(|e| match e {
        // Point tensor/spin complaints at the line that defined the key.
        Error::InvalidParams(message) => {
            let key = ["Q_MHz", "A_MHz", "nuclear_g", "electron_spin", "nuclear_spin", "g"]
                .into_iter()
                .find(|k| message.starts_with(*k) || message.contains(&format!("{k} ")));
            let line = key
                .and_then(|k| seen.iter().find(|(s, _)| *s == k))
                .map_or(0, |(_, l)| *l);
            fail(line, message)
        }
        other => other,
    })?;
    Ok(params)
}

/// Render `params` in the same `key = value` format `load_params` reads.
///
/// Numbers use Rust's shortest round-trip formatting, so save → load is exact.
pub fn params_to_string(params: &SpinParams) -> String {
    let mut out = String::new();
    if !params.label.is_empty() {
        let _ = writeln!(out, "label = {}", params.label);
    }
    let _ = writeln!(out, "electron_spin = {}", params.electron_spin);
    let _ = writeln!(out, "nuclear_spin = {}", params.nuclear_spin);
    let _ = writeln!(out, "g = {}", matrix_row_major(&params.g));
    let _ = writeln!(out, "A_MHz = {}", matrix_row_major(&params.a_mhz));
    let _ = writeln!(out, "Q_MHz = {}", matrix_row_major(&params.q_mhz));
    let _ = writeln!(out, "nuclear_g = {}", params.nuclear_g);
    let _ = writeln!(out, "nuclear_zeeman = {}", params.nuclear_zeeman);
    out
}

/// Write `params` to `path` in the loadable text format.
pub fn save_params(params: &SpinParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, params_to_string(params)).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn matrix_row_major(m: &Matrix3<f64>) -> String {
    (0..3)
        .flat_map(|r| (0..3).map(move |c| (r, c)))
        .map(|(r, c)| m[(r, c)].to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_half_spin(s: &str) -> std::result::Result<HalfSpin, String> {
    if let Some((num, den)) = s.split_once('/') {
        if den.trim() != "2" {
            return Err(format!("half-integer spins are written `n/2` or as decimals, got `{s}`"));
        }
        let n: u32 = num
            .trim()
            .parse()
            .map_err(|_| format!("invalid spin numerator `{}`", num.trim()))?;
        return Ok(HalfSpin::from_twice(n));
    }
    let v = parse_number(s)?;
    HalfSpin::new(v).map_err(|e| e.to_string())
}

fn parse_number(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s
        .parse()
        .map_err(|_| format!("invalid number `{s}`"))?;
    if !v.is_finite() {
        return Err(format!("number `{s}` is not finite"));
    }
    Ok(v)
}

fn parse_matrix(s: &str) -> std::result::Result<Matrix3<f64>, String> {
    let parts: Vec<&str> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|p| !p.is_empty())
        .collect();
    if parts.len() != 9 {
        return Err(format!(
            "tensor needs 9 numbers (row-major), got {}",
            parts.len()
        ));
    }
    let mut v = [0.0; 9];
    for (i, p) in parts.iter().enumerate() {
        v[i] = parse_number(p)?;
    }
    Ok(Matrix3::from_row_slice(&v))
}
