//! The coarse-to-fine correlation matrix: the bridge between box-supervised
//! coarse classes and image-label-only fine classes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::taxonomy::ClassId;

/// Column-sum tolerance for soft (column-stochastic) matrices.
pub const SOFT_COLUMN_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrelationKind {
    /// One-hot rows from taxonomy hyponym closures.
    SemanticOnehot,
    /// 0/1 entries from thresholded embedding distances.
    VisualHard,
    /// Column-stochastic softmax weights over embedding distances.
    VisualSoft,
}

impl CorrelationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CorrelationKind::SemanticOnehot => "semantic-onehot",
            CorrelationKind::VisualHard => "visual-hard",
            CorrelationKind::VisualSoft => "visual-soft",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "semantic-onehot" => Some(CorrelationKind::SemanticOnehot),
            "visual-hard" => Some(CorrelationKind::VisualHard),
            "visual-soft" => Some(CorrelationKind::VisualSoft),
            _ => None,
        }
    }
}

/// Rows are coarse (or super-) classes, columns are fine classes. Hard kinds
/// hold exact 0/1 entries; the soft kind is column-stochastic: Eq-style
/// normalization runs over rows for a fixed column.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    kind: CorrelationKind,
    row_ids: Vec<ClassId>,
    col_ids: Vec<ClassId>,
    values: Grid,
}

impl CorrelationMatrix {
    pub fn new(
        kind: CorrelationKind,
        row_ids: Vec<ClassId>,
        col_ids: Vec<ClassId>,
        values: Grid,
    ) -> Result<Self> {
        if values.rows() != row_ids.len() || values.cols() != col_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} grid with {} row ids and {} col ids",
                values.rows(),
                values.cols(),
                row_ids.len(),
                col_ids.len()
            )));
        }
        let m = CorrelationMatrix {
            kind,
            row_ids,
            col_ids,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.values.is_finite() {
            return Err(Error::NonFinite("correlation matrix"));
        }
        for v in self.values.data() {
            if *v < 0.0 {
                return Err(Error::invalid("correlation", format!("negative entry {v}")));
            }
        }
        match self.kind {
            CorrelationKind::SemanticOnehot | CorrelationKind::VisualHard => {
                for v in self.values.data() {
                    if *v != 0.0 && *v != 1.0 {
                        return Err(Error::invalid(
                            "correlation",
                            format!("hard matrix entry {v} is not 0 or 1"),
                        ));
                    }
                }
            }
            CorrelationKind::VisualSoft => {
                for (j, s) in self.values.col_sums().iter().enumerate() {
                    if (s - 1.0).abs() > SOFT_COLUMN_TOL {
                        return Err(Error::invalid(
                            "correlation",
                            format!("soft column {j} sums to {s}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> CorrelationKind {
        self.kind
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn row_ids(&self) -> &[ClassId] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[ClassId] {
        &self.col_ids
    }

    pub fn values(&self) -> &Grid {
        &self.values
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.values.col_sums()
    }

    /// Header `CORR <kind> <rows> <cols>`, then the ordered row/column id
    /// lists, then one decimal text line per row.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "CORR {} {} {}\n",
            self.kind.as_str(),
            self.rows(),
            self.cols()
        );
        out.push_str("rows");
        for id in &self.row_ids {
            let _ = write!(out, " {id}");
        }
        out.push('\n');
        out.push_str("cols");
        for id in &self.col_ids {
            let _ = write!(out, " {id}");
        }
        out.push('\n');
        for r in 0..self.rows() {
            let row = self.values.row(r);
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn parse_correlation(text: &str) -> Result<CorrelationMatrix> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty correlation file"))?;
    let mut tok = header.split_whitespace();
    if tok.next() != Some("CORR") {
        return Err(Error::parse(1, "expected `CORR` header"));
    }
    let kind = tok
        .next()
        .and_then(CorrelationKind::parse)
        .ok_or_else(|| Error::parse(1, "missing or unknown correlation kind"))?;
    let rows: usize = tok
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(1, "bad row count"))?;
    let cols: usize = tok
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(1, "bad column count"))?;
    if tok.next().is_some() {
        return Err(Error::parse(1, "trailing tokens in header"));
    }

    let parse_ids = |line: Option<(usize, &str)>, tag: &str, want: usize| -> Result<Vec<ClassId>> {
        let (n, l) = line.ok_or_else(|| Error::parse(0, format!("missing `{tag}` line")))?;
        let mut it = l.split_whitespace();
        if it.next() != Some(tag) {
            return Err(Error::parse(n + 1, format!("expected `{tag}` line")));
        }
        let ids: Vec<ClassId> = it.map(str::to_string).collect();
        if ids.len() != want {
            return Err(Error::parse(
                n + 1,
                format!("expected {want} ids on `{tag}` line, got {}", ids.len()),
            ));
        }
        Ok(ids)
    };
    let row_ids = parse_ids(lines.next(), "rows", rows)?;
    let col_ids = parse_ids(lines.next(), "cols", cols)?;

    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (n, l) = lines
            .next()
            .ok_or_else(|| Error::parse(3 + r, "missing matrix row"))?;
        for tok in l.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(n + 1, format!("bad number `{tok}`")))?;
            data.push(v);
        }
        if data.len() != (r + 1) * cols {
            return Err(Error::parse(
                n + 1,
                format!("expected {cols} values in row {r}"),
            ));
        }
    }
    CorrelationMatrix::new(kind, row_ids, col_ids, Grid::from_flat(rows, cols, data)?)
}
