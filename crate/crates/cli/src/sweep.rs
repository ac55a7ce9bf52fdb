//! Field-path inputs: the inline sweep grammar, vector-list files, and the
//! small `a,b,c` / `lo:hi` flag-value parsers shared by several commands.
//!
//! Inline grammar: whitespace-separated `key=value` tokens with exactly the
//! keys `axis` (D1, D2 or b), `from`, `to` (tesla) and `steps` (≥ 2).
//! Single points come in through `--field`; a sweep of fewer than two steps
//! or with `from == to` is rejected rather than silently degenerated.

use std::path::Path;

use kramers::FieldVec;
use nalgebra::Vector3;

use crate::fail::Failure;
use crate::meta::Meta;
use crate::tables;

/// Column names under which every tabular output emits its field path; a
/// file holding them (e.g. a previous `levels` output) is a valid
/// `--sweep-file`.
pub const FIELD_COLUMNS: [&str; 3] = ["B_D1_T", "B_D2_T", "B_b_T"];

pub fn parse_sweep(spec: &str) -> Result<Vec<FieldVec>, Failure> {
    let mut axis: Option<usize> = None;
    let mut from: Option<f64> = None;
    let mut to: Option<f64> = None;
    let mut steps: Option<usize> = None;

    for token in spec.split_whitespace() {
        let (key, value) = token.split_once('=').ok_or_else(|| {
            Failure::invalid(format!("sweep token '{token}' is not key=value"))
        })?;
        match key {
            "axis" => {
                let i = match value {
                    "D1" => 0,
                    "D2" => 1,
                    "b" => 2,
                    other => {
                        return Err(Failure::invalid(format!(
                            "sweep axis must be D1, D2 or b, got '{other}'"
                        )))
                    }
                };
                set_once(&mut axis, "axis", i)?;
            }
            "from" => set_once(&mut from, "from", tesla(value, "from")?)?,
            "to" => set_once(&mut to, "to", tesla(value, "to")?)?,
            "steps" => {
                let n: usize = value.parse().map_err(|_| {
                    Failure::invalid(format!("sweep steps must be an integer, got '{value}'"))
                })?;
                set_once(&mut steps, "steps", n)?;
            }
            other => {
                return Err(Failure::invalid(format!(
                    "unknown sweep key '{other}' (expected axis, from, to, steps)"
                )))
            }
        }
    }

    let missing = |name: &str| Failure::invalid(format!("sweep is missing '{name}='"));
    let axis = axis.ok_or_else(|| missing("axis"))?;
    let from = from.ok_or_else(|| missing("from"))?;
    let to = to.ok_or_else(|| missing("to"))?;
    let steps = steps.ok_or_else(|| missing("steps"))?;

    if steps < 2 {
        return Err(Failure::invalid(format!(
            "a sweep needs steps ≥ 2, got {steps}; use --field for a single point"
        )));
    }
    if from == to {
        return Err(Failure::invalid(format!(
            "sweep from and to coincide at {from} T; use --field for a single point"
        )));
    }

    Ok((0..steps)
        .map(|i| {
            let t = from + (to - from) * i as f64 / (steps - 1) as f64;
            let mut v = [0.0; 3];
            v[axis] = t;
            FieldVec::new(v[0], v[1], v[2])
        })
        .collect())
}

/// Field path from a vector-list file (by the `B_*_T` header columns).
pub fn parse_sweep_table(text: &str, source: &str) -> Result<Vec<FieldVec>, Failure> {
    let table = tables::parse_table(text, source)?;
    let mut cols = [0usize; 3];
    for (k, name) in FIELD_COLUMNS.iter().enumerate() {
        cols[k] = table.column(name)?;
    }
    if table.rows.is_empty() {
        return Err(Failure::invalid(format!("{source}: no field points")));
    }
    (0..table.rows.len())
        .map(|r| {
            Ok(FieldVec::new(
                table.num(r, cols[0])?,
                table.num(r, cols[1])?,
                table.num(r, cols[2])?,
            ))
        })
        .collect()
}

/// Resolve `--sweep` / `--sweep-file` / repeated `--field` into one path.
/// The argument parser guarantees at most one source; emptiness of `field`
/// signals "not given".
pub fn resolve_field_path(
    sweep: Option<&str>,
    sweep_file: Option<&Path>,
    field: &[String],
    meta: &mut Meta,
) -> Result<Vec<FieldVec>, Failure> {
    if let Some(spec) = sweep {
        return parse_sweep(spec);
    }
    if let Some(path) = sweep_file {
        let text = meta.read_input(path)?;
        return parse_sweep_table(&text, &path.display().to_string());
    }
    field.iter().map(|s| parse_field(s)).collect()
}

pub fn parse_field(s: &str) -> Result<FieldVec, Failure> {
    let [d1, d2, b] = parse_triple(s, "field")?;
    Ok(FieldVec::new(d1, d2, b))
}

pub fn parse_direction(s: &str) -> Result<Vector3<f64>, Failure> {
    let [x, y, z] = parse_triple(s, "direction")?;
    let v = Vector3::new(x, y, z);
    if v.norm() == 0.0 {
        return Err(Failure::invalid("direction must be a nonzero vector"));
    }
    Ok(v)
}

/// `"lo:hi"` in MHz.
pub fn parse_band(s: &str) -> Result<(f64, f64), Failure> {
    let (lo, hi) = split_colon_pair(s, "band", "lo:hi in MHz")?;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Failure::invalid(format!(
            "band must be finite with lo ≤ hi, got '{s}'"
        )));
    }
    Ok((lo, hi))
}

/// `"min_D1,min_D2,min_b:max_D1,max_D2,max_b"` in tesla.
pub fn parse_box(s: &str) -> Result<(FieldVec, FieldVec), Failure> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| {
        Failure::invalid(format!(
            "box must be 'minD1,minD2,minb:maxD1,maxD2,maxb' in tesla, got '{s}'"
        ))
    })?;
    let min = parse_triple(lo, "box corner")?;
    let max = parse_triple(hi, "box corner")?;
    Ok((
        FieldVec::new(min[0], min[1], min[2]),
        FieldVec::new(max[0], max[1], max[2]),
    ))
}

pub fn parse_colon_pair(s: &str, what: &str, shape: &str) -> Result<(f64, f64), Failure> {
    split_colon_pair(s, what, shape)
}

fn split_colon_pair(s: &str, what: &str, shape: &str) -> Result<(f64, f64), Failure> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 {
        return Err(Failure::invalid(format!("{what} must be '{shape}', got '{s}'")));
    }
    let a: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| Failure::invalid(format!("{what}: unparseable number '{}'", parts[0])))?;
    let b: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| Failure::invalid(format!("{what}: unparseable number '{}'", parts[1])))?;
    Ok((a, b))
}

fn parse_triple(s: &str, what: &str) -> Result<[f64; 3], Failure> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Failure::invalid(format!(
            "{what} must be three comma-separated numbers, got '{s}'"
        )));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        let v: f64 = part
            .trim()
            .parse()
            .map_err(|_| Failure::invalid(format!("{what}: unparseable number '{part}'")))?;
        if !v.is_finite() {
            return Err(Failure::invalid(format!("{what}: component {v} not finite")));
        }
        *slot = v;
    }
    Ok(out)
}

fn set_once<T>(slot: &mut Option<T>, key: &str, value: T) -> Result<(), Failure> {
    if slot.is_some() {
        return Err(Failure::invalid(format!("sweep key '{key}' given twice")));
    }
    *slot = Some(value);
    Ok(())
}

fn tesla(value: &str, key: &str) -> Result<f64, Failure> {
    let v: f64 = value.parse().map_err(|_| {
        Failure::invalid(format!("sweep {key} must be a number in tesla, got '{value}'"))
    })?;
    if !v.is_finite() {
        return Err(Failure::invalid(format!("sweep {key} must be finite")));
    }
    Ok(v)
}
