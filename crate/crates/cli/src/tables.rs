//! Reading and writing the small headered CSV tables the commands exchange.
//!
//! Layout shared by all of them: any number of `#`-prefixed metadata lines,
//! one header row naming the columns, then numeric rows. `.`-decimal only,
//! and numbers are rendered with Rust's shortest round-trip formatting so a
//! written table re-reads to identical floats.

use crate::fail::Failure;

/// Non-comment, non-blank lines with their 1-based line numbers.
pub fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

#[derive(Debug)]
pub struct Table {
    pub header: Vec<String>,
    /// Cell values; `None` marks an empty cell.
    pub rows: Vec<Vec<Option<f64>>>,
    /// 1-based source line of each row, for error messages.
    pub row_lines: Vec<usize>,
    pub source: String,
}

impl Table {
    /// Column index by exact header name.
    pub fn column(&self, name: &str) -> Result<usize, Failure> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| {
                Failure::invalid(format!(
                    "{}: missing column '{name}' (header has: {})",
                    self.source,
                    self.header.join(", ")
                ))
            })
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.header.iter().any(|h| h == name)
    }

    /// Required finite cell.
    pub fn num(&self, row: usize, col: usize) -> Result<f64, Failure> {
        match self.rows[row][col] {
            Some(v) if v.is_finite() => Ok(v),
            Some(v) => Err(Failure::invalid(format!(
                "{} line {}: column '{}' is {v}, expected a finite number",
                self.source, self.row_lines[row], self.header[col]
            ))),
            None => Err(Failure::invalid(format!(
                "{} line {}: column '{}' is empty",
                self.source, self.row_lines[row], self.header[col]
            ))),
        }
    }
}

/// Parse a headered numeric CSV (comments already allowed anywhere).
pub fn parse_table(text: &str, source: &str) -> Result<Table, Failure> {
    let mut lines = content_lines(text);
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Failure::invalid(format!("{source}: no header row")))?;
    let header: Vec<String> = header_line.split(',').map(|h| h.trim().to_string()).collect();

    let mut rows = Vec::new();
    let mut row_lines = Vec::new();
    for (line_no, line) in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Failure::invalid(format!(
                "{source} line {line_no}: {} cells, header has {}",
                cells.len(),
                header.len()
            )));
        }
        let mut row = Vec::with_capacity(cells.len());
        for (col, cell) in cells.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                row.push(None);
                continue;
            }
            let value: f64 = cell.parse().map_err(|_| {
                Failure::invalid(format!(
                    "{source} line {line_no}: column '{}' has unparseable value '{cell}'",
                    header[col]
                ))
            })?;
            row.push(Some(value));
        }
        rows.push(row);
        row_lines.push(line_no);
    }
    Ok(Table {
        header,
        rows,
        row_lines,
        source: source.to_string(),
    })
}

/// Time/intensity pairs from the first two columns.
pub fn parse_xy(text: &str, source: &str) -> Result<Vec<(f64, f64)>, Failure> {
    let table = parse_table(text, source)?;
    if table.header.len() < 2 {
        return Err(Failure::invalid(format!(
            "{source}: need at least two columns, got {}",
            table.header.len()
        )));
    }
    (0..table.rows.len())
        .map(|r| Ok((table.num(r, 0)?, table.num(r, 1)?)))
        .collect()
}

/// Shortest round-trip rendering, matching the library's CSV writers.
pub fn fmt(x: f64) -> String {
    x.to_string()
}

/// CSV-quote free text (used for fit diagnostics, which may contain commas).
pub fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}
