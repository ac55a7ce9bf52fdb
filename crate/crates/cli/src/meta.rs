//! The `#`-prefixed provenance header carried by every output file.
//!
//! The header records the tool version, the generating command line, the
//! seed, and a SHA-256 digest of each input file, so any artifact can be
//! traced back to exactly what produced it. The output path and thread count
//! are deliberately left out of the recorded command: renaming a target or
//! changing parallelism never alters file contents, which keeps
//! "same inputs, same seed → same bytes" checkable with `cmp`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::fail::Failure;

pub struct Meta {
    lines: Vec<String>,
}

impl Meta {
    pub fn new(seed: u64) -> Meta {
        Meta {
            lines: vec![
                format!("kramers {}", env!("CARGO_PKG_VERSION")),
                format!("command: {}", sanitized_command_line()),
                format!("seed: {seed}"),
            ],
        }
    }

    /// Read an input file, record its digest, and hand back the text.
    pub fn read_input(&mut self, path: &Path) -> Result<String, Failure> {
        let bytes = fs::read(path).map_err(|err| Failure::io(path, err))?;
        let digest = Sha256::digest(&bytes);
        self.lines
            .push(format!("input: sha256={digest:x} {}", path.display()));
        String::from_utf8(bytes)
            .map_err(|_| Failure::invalid(format!("{}: not valid UTF-8", path.display())))
    }

    /// Add one free-form `# key: value` line.
    pub fn note(&mut self, text: impl Into<String>) {
        self.lines.push(text.into());
    }

    pub fn render(&self) -> String {
        self.lines
            .iter()
            .map(|l| format!("# {l}\n"))
            .collect::<String>()
    }

    /// Write `body` prefixed by this header.
    pub fn write_output(&self, path: &Path, body: &str) -> Result<(), Failure> {
        let mut text = self.render();
        text.push_str(body);
        fs::write(path, text).map_err(|err| Failure::io(path, err))
    }
}

/// argv with the binary path normalized and result-neutral flags removed.
fn sanitized_command_line() -> String {
    sanitize(std::env::args().skip(1))
}

fn sanitize(args: impl Iterator<Item = String>) -> String {
    const NEUTRAL: [&str; 3] = ["--output", "--envelope-output", "--threads"];
    let mut out = vec!["kramers".to_string()];
    let mut args = args.peekable();
    while let Some(arg) = args.next() {
        if NEUTRAL.contains(&arg.as_str()) {
            args.next();
            continue;
        }
        if NEUTRAL
            .iter()
            .any(|flag| arg.starts_with(&format!("{flag}=")))
        {
            continue;
        }
        out.push(arg);
    }
    out.join(" ")
}
