use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hyperkernel::Candidate;
use crate::mixedop::{DerivedOp, EdgeKind, Form};
use crate::searchspace::NetworkTemplate;

/// One cell of an architecture matrix, holding 0-based candidate codes.
///
/// For serial forms the first digit is the operation applied first. For
/// the parallel form it is `1-D/depthwise`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchEntry {
    Single(usize),
    Serial(usize, usize),
    Parallel(usize, usize),
}

impl fmt::Display for ArchEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ArchEntry::Single(a) => write!(f, "{a}"),
            ArchEntry::Serial(a, b) => write!(f, "{a}{b}"),
            ArchEntry::Parallel(a, b) => write!(f, "{a}/{b}"),
        }
    }
}

fn digit(c: char) -> Option<usize> {
    c.to_digit(10).map(|d| d as usize)
}

impl FromStr for ArchEntry {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let chars: Vec<char> = s.chars().collect();
        let entry = match chars.as_slice() {
            [a] => digit(*a).map(ArchEntry::Single),
            [a, b] => digit(*a).zip(digit(*b)).map(|(a, b)| ArchEntry::Serial(a, b)),
            [a, '/', b] => digit(*a).zip(digit(*b)).map(|(a, b)| ArchEntry::Parallel(a, b)),
            _ => None,
        };
        entry.ok_or_else(|| format!("malformed entry {s:?}"))
    }
}

impl ArchEntry {
    /// Cell for a derived edge, using the order conventions above.
    pub fn from_derived(op: &DerivedOp) -> Result<Self> {
        let codes: Vec<usize> = op.ops.iter().map(|c| c.code()).collect();
        Ok(match (op.kind, codes.as_slice()) {
            (EdgeKind::Spectral | EdgeKind::Cube(Form::Conv3d), &[a]) => ArchEntry::Single(a),
            (EdgeKind::Cube(Form::Serial1dThen2dDw), &[spec, dw]) => ArchEntry::Serial(spec, dw),
            (EdgeKind::Cube(Form::Serial2dDwThen1d), &[spec, dw]) => ArchEntry::Serial(dw, spec),
            (EdgeKind::Cube(Form::Parallel1d2dDw), &[spec, dw]) => ArchEntry::Parallel(spec, dw),
            _ => return Err(Error::invalid(format!("malformed derived op {op:?}"))),
        })
    }

    /// Decodes this cell for an edge of `kind` with `candidates` choices per kernel.
    pub fn to_derived(self, kind: EdgeKind, candidates: usize) -> std::result::Result<DerivedOp, String> {
        let codes = match (kind, self) {
            (EdgeKind::Spectral | EdgeKind::Cube(Form::Conv3d), ArchEntry::Single(a)) => vec![a],
            (EdgeKind::Cube(Form::Serial1dThen2dDw), ArchEntry::Serial(spec, dw)) => vec![spec, dw],
            (EdgeKind::Cube(Form::Serial2dDwThen1d), ArchEntry::Serial(dw, spec)) => vec![spec, dw],
            (EdgeKind::Cube(Form::Parallel1d2dDw), ArchEntry::Parallel(spec, dw)) => vec![spec, dw],
            _ => return Err(format!("entry {self} does not fit a {} edge", edge_name(kind))),
        };
        if let Some(bad) = codes.iter().find(|&&c| c >= candidates) {
            return Err(format!("code {bad} in {self} out of range 0..={}", candidates - 1));
        }
        let ops = codes.into_iter().map(Candidate::from_code).collect();
        DerivedOp::new(kind, ops).map_err(|e| e.to_string())
    }
}

fn edge_name(kind: EdgeKind) -> &'static str {
    match kind {
        EdgeKind::Spectral => "1-D",
        EdgeKind::Cube(f) => f.name(),
    }
}

/// Selected codes of a whole network, one row per block and one column per layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchitectureMatrix {
    pub rows: Vec<Vec<ArchEntry>>,
}

impl ArchitectureMatrix {
    pub fn new(rows: Vec<Vec<ArchEntry>>) -> Self {
        ArchitectureMatrix { rows }
    }

    /// Parses the text form: rows on lines, entries separated by whitespace.
    /// Blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .enumerate()
                .map(|(col, tok)| {
                    tok.parse::<ArchEntry>()
                        .map_err(|e| Error::Config(format!("architecture line {}, column {}: {e}", ln + 1, col + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Config("architecture matrix is empty".into()));
        }
        Ok(ArchitectureMatrix { rows })
    }

    pub fn encode(&self) -> String {
        self.to_string()
    }

    /// Decodes every cell against `template`; the first failing cell is
    /// named by 1-based block and layer.
    pub fn to_derived(&self, template: &NetworkTemplate) -> Result<Vec<Vec<DerivedOp>>> {
        if self.rows.len() != template.blocks {
            return Err(Error::Config(format!(
                "architecture has {} rows but the template has {} blocks",
                self.rows.len(),
                template.blocks
            )));
        }
        let kind = template.edge_kind();
        let candidates = template.hyper_size / 2;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                if row.len() != template.layers {
                    return Err(Error::Config(format!(
                        "architecture row {} has {} entries but blocks have {} layers",
                        i + 1,
                        row.len(),
                        template.layers
                    )));
                }
                row.iter()
                    .enumerate()
                    .map(|(j, e)| {
                        e.to_derived(kind, candidates)
                            .map_err(|m| Error::Config(format!("architecture row {}, column {}: {m}", i + 1, j + 1)))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn from_derived(ops: &[Vec<DerivedOp>]) -> Result<Self> {
        let rows = ops
            .iter()
            .map(|row| row.iter().map(ArchEntry::from_derived).collect())
            .collect::<Result<Vec<_>>>()?;
        Ok(ArchitectureMatrix { rows })
    }
}

impl fmt::Display for ArchitectureMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

impl FromStr for ArchitectureMatrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
