//! Soft-attention proposal re-ranking: per-proposal class softmax over the
//! coarse score map, per-class normalization over proposals, mapping the
//! coarse attention to fine classes through the correlation matrix, and the
//! element-wise re-ranking of the fine score map. Also houses the image-level
//! pooling reductions.

use std::fmt::Write as _;

use crate::correlation::CorrelationMatrix;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::numeric;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Logits,
    Probabilities,
}

impl Scale {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scale::Logits => "logits",
            Scale::Probabilities => "probabilities",
        }
    }
}

/// P x C proposal-score grid. The coarse detector map carries a trailing
/// background column; the fine map does not.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    values: Grid,
    scale: Scale,
}

impl ScoreMap {
    pub fn new(values: Grid, scale: Scale) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite("score map"));
        }
        Ok(ScoreMap { values, scale })
    }

    pub fn proposals(&self) -> usize {
        self.values.rows()
    }

    pub fn classes(&self) -> usize {
        self.values.cols()
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn values(&self) -> &Grid {
        &self.values
    }

    /// For probability maps: every row sums to 1 within `tol`.
    pub fn check_rows_normalized(&self, tol: f64) -> Result<()> {
        for r in 0..self.values.rows() {
            let s: f64 = self.values.row(r).iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::NotDistribution(format!("row {r} sums to {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionLevel {
    Coarse,
    Fine,
}

/// P x C non-negative attention grid. Coarse-level columns each sum to 1
/// over proposals; fine-level columns are bounded by the correlation column
/// mass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    values: Grid,
    level: AttentionLevel,
}

impl AttentionMap {
    pub fn new(values: Grid, level: AttentionLevel) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite("attention map"));
        }
        if values.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("attention", "negative attention weight"));
        }
        Ok(AttentionMap { values, level })
    }

    pub fn proposals(&self) -> usize {
        self.values.rows()
    }

    pub fn classes(&self) -> usize {
        self.values.cols()
    }

    pub fn level(&self) -> AttentionLevel {
        self.level
    }

    pub fn values(&self) -> &Grid {
        &self.values
    }
}

/// Whether the per-proposal class softmax denominator includes the background
/// column. The written form sums over foreground only; the alternative is
/// kept behind this switch for ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackgroundMode {
    #[default]
    ExcludeFromDenominator,
    IncludeInDenominator,
}

/// Per-proposal softmax over the foreground columns of a coarse score map
/// with a trailing background column; the background column is dropped from
/// the output.
pub fn class_softmax(s: &ScoreMap) -> Result<ScoreMap> {
    class_softmax_with(s, BackgroundMode::ExcludeFromDenominator)
}

pub fn class_softmax_with(s: &ScoreMap, mode: BackgroundMode) -> Result<ScoreMap> {
    if s.classes() < 2 {
        return Err(Error::ShapeMismatch(
            "coarse map needs at least one foreground class plus background".into(),
        ));
    }
    if !s.values().is_finite() {
        return Err(Error::NonFinite("score map"));
    }
    let fg = s.classes() - 1;
    let mut out = Grid::zeros(s.proposals(), fg);
    for p in 0..s.proposals() {
        let row = s.values().row(p);
        let denom_range = match mode {
            BackgroundMode::ExcludeFromDenominator => &row[..fg],
            BackgroundMode::IncludeInDenominator => row,
        };
        let m = denom_range
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = denom_range.iter().map(|x| (x - m).exp()).sum();
        for c in 0..fg {
            out.set(p, c, (row[c] - m).exp() / z);
        }
    }
    ScoreMap::new(out, Scale::Probabilities)
}

/// Per-class softmax over proposals (the WSDDN-style ranking direction);
/// every output column sums to 1.
pub fn proposal_normalize(shat: &ScoreMap) -> Result<AttentionMap> {
    if shat.proposals() == 0 {
        return Err(Error::EmptyInput("proposals"));
    }
    let mut out = Grid::zeros(shat.proposals(), shat.classes());
    for c in 0..shat.classes() {
        let col = shat.values().col(c);
        let soft = numeric::softmax(&col);
        for (p, v) in soft.into_iter().enumerate() {
            out.set(p, c, v);
        }
    }
    AttentionMap::new(out, AttentionLevel::Coarse)
}

/// Maps coarse attention to fine classes: `A^w = A^f * M`.
pub fn coarse_to_fine_attention(
    af: &AttentionMap,
    m: &CorrelationMatrix,
) -> Result<AttentionMap> {
    if m.rows() != af.classes() {
        return Err(Error::ShapeMismatch(format!(
            "attention has {} coarse classes, correlation has {} rows",
            af.classes(),
            m.rows()
        )));
    }
    let fine = af.values().matmul(m.values())?;
    AttentionMap::new(fine, AttentionLevel::Fine)
}

/// Element-wise re-ranking `S^w ⊙ A^w`.
pub fn rerank(sw: &ScoreMap, aw: &AttentionMap) -> Result<ScoreMap> {
    if sw.proposals() != aw.proposals() || sw.classes() != aw.classes() {
        return Err(Error::ShapeMismatch(format!(
            "score map {}x{} vs attention map {}x{}",
            sw.proposals(),
            sw.classes(),
            aw.proposals(),
            aw.classes()
        )));
    }
    ScoreMap::new(sw.values().hadamard(aw.values())?, sw.scale())
}

/// Image-level pooling reduction over proposals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Max,
    Average,
    /// Mean of the k largest entries; falls back to a plain average when
    /// fewer than k proposals exist.
    TopKAverage(usize),
    /// Softmax of the column used as weights on the column itself.
    WeightedAverage,
    Sum,
}

impl Pooling {
    fn validate(&self) -> Result<()> {
        if let Pooling::TopKAverage(k) = self {
            if *k == 0 {
                return Err(Error::invalid("k", "top-k pooling needs k >= 1"));
            }
        }
        Ok(())
    }
}

/// Indices of the k largest column entries, ties resolved to the lowest
/// proposal index; returns all indices when `P <= k`.
pub fn top_k_indices(column: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..column.len()).collect();
    idx.sort_by(|&a, &b| {
        column[b]
            .partial_cmp(&column[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(column.len()));
    idx
}

/// Pools a score map into an image-level vector, one entry per class.
pub fn pool(sm: &ScoreMap, spec: Pooling) -> Result<Vec<f64>> {
    spec.validate()?;
    if sm.proposals() == 0 {
        return Err(Error::EmptyInput("proposals"));
    }
    let p = sm.proposals() as f64;
    let mut out = Vec::with_capacity(sm.classes());
    for c in 0..sm.classes() {
        let col = sm.values().col(c);
        let v = match spec {
            Pooling::Max => col.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            Pooling::Average => col.iter().sum::<f64>() / p,
            Pooling::Sum => col.iter().sum::<f64>(),
            Pooling::TopKAverage(k) => {
                let idx = top_k_indices(&col, k);
                idx.iter().map(|&i| col[i]).sum::<f64>() / idx.len() as f64
            }
            Pooling::WeightedAverage => {
                let w = numeric::softmax(&col);
                w.iter().zip(&col).map(|(wi, xi)| wi * xi).sum()
            }
        };
        out.push(v);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Serialization: `MAP <P> <C> <scale>` header + row-major decimal text.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum ParsedMap {
    Score(ScoreMap),
    Attention(AttentionMap),
}

fn scale_token(map: &ParsedMap) -> &'static str {
    match map {
        ParsedMap::Score(s) => s.scale().as_str(),
        ParsedMap::Attention(a) => match a.level() {
            AttentionLevel::Coarse => "attention-coarse",
            AttentionLevel::Fine => "attention-fine",
        },
    }
}

fn grid_text(g: &Grid) -> String {
    let mut out = String::new();
    for r in 0..g.rows() {
        for (i, v) in g.row(r).iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

impl ScoreMap {
    pub fn to_text(&self) -> String {
        let header = format!(
            "MAP {} {} {}\n",
            self.proposals(),
            self.classes(),
            self.scale.as_str()
        );
        header + &grid_text(&self.values)
    }
}

impl AttentionMap {
    pub fn to_text(&self) -> String {
        let tok = match self.level {
            AttentionLevel::Coarse => "attention-coarse",
            AttentionLevel::Fine => "attention-fine",
        };
        let header = format!("MAP {} {} {}\n", self.proposals(), self.classes(), tok);
        header + &grid_text(&self.values)
    }
}

impl ParsedMap {
    pub fn to_text(&self) -> String {
        match self {
            ParsedMap::Score(s) => s.to_text(),
            ParsedMap::Attention(a) => a.to_text(),
        }
    }

    pub fn kind_token(&self) -> &'static str {
        scale_token(self)
    }
}

pub fn parse_map(text: &str) -> Result<ParsedMap> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty map file"))?;
    let mut tok = header.split_whitespace();
    if tok.next() != Some("MAP") {
        return Err(Error::parse(1, "expected `MAP` header"));
    }
    let rows: usize = tok
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(1, "bad proposal count"))?;
    let cols: usize = tok
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(1, "bad class count"))?;
    let kind = tok
        .next()
        .ok_or_else(|| Error::parse(1, "missing scale token"))?
        .to_string();
    if tok.next().is_some() {
        return Err(Error::parse(1, "trailing tokens in header"));
    }

    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (n, l) = lines
            .next()
            .ok_or_else(|| Error::parse(r + 2, "missing map row"))?;
        for t in l.split_whitespace() {
            let v: f64 = t
                .parse()
                .map_err(|_| Error::parse(n + 1, format!("bad number `{t}`")))?;
            data.push(v);
        }
        if data.len() != (r + 1) * cols {
            return Err(Error::parse(
                n + 1,
                format!("expected {cols} values in row {r}"),
            ));
        }
    }
    let grid = Grid::from_flat(rows, cols, data)?;
    match kind.as_str() {
        "logits" => Ok(ParsedMap::Score(ScoreMap::new(grid, Scale::Logits)?)),
        "probabilities" => Ok(ParsedMap::Score(ScoreMap::new(grid, Scale::Probabilities)?)),
        "attention-coarse" => Ok(ParsedMap::Attention(AttentionMap::new(
            grid,
            AttentionLevel::Coarse,
        )?)),
        "attention-fine" => Ok(ParsedMap::Attention(AttentionMap::new(
            grid,
            AttentionLevel::Fine,
        )?)),
        other => Err(Error::parse(1, format!("unknown map kind `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::CorrelationKind;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn score(rows: Vec<Vec<f64>>, scale: Scale) -> ScoreMap {
        ScoreMap::new(Grid::from_rows(rows).unwrap(), scale).unwrap()
    }

    #[test]
    fn class_softmax_uniform() {
        // 4 foreground classes + background; uniform logits.
        let s = score(vec![vec![1.0; 5], vec![1.0; 5]], Scale::Logits);
        let out = class_softmax(&s).unwrap();
        assert_eq!(out.classes(), 4);
        for p in 0..2 {
            for c in 0..4 {
                assert_abs_diff_eq!(out.values().get(p, c), 0.25, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn class_softmax_hand_values() {
        // logits [ln 3, 0] over 2 foreground classes -> [0.75, 0.25]
        let s = score(vec![vec![3f64.ln(), 0.0, -10.0]], Scale::Logits);
        let out = class_softmax(&s).unwrap();
        assert_abs_diff_eq!(out.values().get(0, 0), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(out.values().get(0, 1), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn class_softmax_row_shift_invariance() {
        let a = score(vec![vec![0.3, -1.2, 0.9, 4.0]], Scale::Logits);
        let b = score(vec![vec![0.3 + 7.0, -1.2 + 7.0, 0.9 + 7.0, 4.0 + 7.0]], Scale::Logits);
        let oa = class_softmax(&a).unwrap();
        let ob = class_softmax(&b).unwrap();
        for c in 0..3 {
            assert_abs_diff_eq!(oa.values().get(0, c), ob.values().get(0, c), epsilon = 1e-12);
        }
    }

    #[test]
    fn class_softmax_background_mode_changes_mass() {
        let s = score(vec![vec![1.0, 2.0, 5.0]], Scale::Logits);
        let excl = class_softmax(&s).unwrap();
        let incl = class_softmax_with(&s, BackgroundMode::IncludeInDenominator).unwrap();
        let sum_excl: f64 = excl.values().row(0).iter().sum();
        let sum_incl: f64 = incl.values().row(0).iter().sum();
        assert_abs_diff_eq!(sum_excl, 1.0, epsilon = 1e-12);
        assert!(sum_incl < 1.0);
    }

    #[test]
    fn class_softmax_rejects_non_finite() {
        let g = Grid::from_rows(vec![vec![1.0, f64::NAN, 0.0]]).unwrap();
        let s = ScoreMap { values: g, scale: Scale::Logits };
        assert!(class_softmax(&s).is_err());
    }

    #[test]
    fn proposal_normalize_single_proposal_is_one() {
        let s = score(vec![vec![0.4, 0.6]], Scale::Probabilities);
        let a = proposal_normalize(&s).unwrap();
        assert_eq!(a.values().get(0, 0), 1.0);
        assert_eq!(a.values().get(0, 1), 1.0);
    }

    #[test]
    fn proposal_normalize_identical_scores_uniform() {
        let s = score(vec![vec![0.5], vec![0.5], vec![0.5], vec![0.5]], Scale::Probabilities);
        let a = proposal_normalize(&s).unwrap();
        for p in 0..4 {
            assert_abs_diff_eq!(a.values().get(p, 0), 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn proposal_normalize_hand_values() {
        let s = score(vec![vec![1.0], vec![0.0]], Scale::Probabilities);
        let a = proposal_normalize(&s).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(a.values().get(0, 0), e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(a.values().get(1, 0), 1.0 / (e + 1.0), epsilon = 1e-12);
    }

    #[test]
    fn proposal_normalize_empty_errors() {
        let s = ScoreMap::new(Grid::zeros(0, 3), Scale::Probabilities).unwrap();
        assert!(proposal_normalize(&s).is_err());
    }

    fn onehot_m() -> CorrelationMatrix {
        // dog -> {labrador, chihuahua}, cat -> {persian}
        CorrelationMatrix::new(
            CorrelationKind::SemanticOnehot,
            vec!["dog".into(), "cat".into()],
            vec!["labrador".into(), "chihuahua".into(), "persian".into()],
            Grid::from_rows(vec![vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn attention_identity_mapping() {
        let m = CorrelationMatrix::new(
            CorrelationKind::SemanticOnehot,
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into()],
            Grid::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let af = AttentionMap::new(
            Grid::from_rows(vec![vec![0.7, 0.2], vec![0.3, 0.8]]).unwrap(),
            AttentionLevel::Coarse,
        )
        .unwrap();
        let aw = coarse_to_fine_attention(&af, &m).unwrap();
        assert_eq!(aw.values(), af.values());
        assert_eq!(aw.level(), AttentionLevel::Fine);
    }

    #[test]
    fn attention_onehot_duplicates_columns() {
        let af = AttentionMap::new(
            Grid::from_rows(vec![vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap(),
            AttentionLevel::Coarse,
        )
        .unwrap();
        let aw = coarse_to_fine_attention(&af, &onehot_m()).unwrap();
        for p in 0..2 {
            assert_eq!(aw.values().get(p, 0), af.values().get(p, 0));
            assert_eq!(aw.values().get(p, 1), af.values().get(p, 0));
            assert_eq!(aw.values().get(p, 2), af.values().get(p, 1));
        }
    }

    #[test]
    fn attention_matches_triple_loop_oracle() {
        let mut rng_state = 0x9E3779B97F4A7C15u64;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 11) as f64 / (1u64 << 53) as f64).abs()
        };
        let af_rows: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| next()).collect()).collect();
        let mut m_rows: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| next()).collect()).collect();
        // Column-normalize to a valid soft matrix.
        for j in 0..6 {
            let s: f64 = (0..4).map(|i| m_rows[i][j]).sum();
            for row in m_rows.iter_mut() {
                row[j] /= s;
            }
        }
        let af = AttentionMap::new(Grid::from_rows(af_rows.clone()).unwrap(), AttentionLevel::Coarse)
            .unwrap();
        let m = CorrelationMatrix::new(
            CorrelationKind::VisualSoft,
            (0..4).map(|i| format!("c{i}")).collect(),
            (0..6).map(|j| format!("f{j}")).collect(),
            Grid::from_rows(m_rows.clone()).unwrap(),
        )
        .unwrap();
        let aw = coarse_to_fine_attention(&af, &m).unwrap();
        for p in 0..5 {
            for j in 0..6 {
                let mut want = 0.0;
                for c in 0..4 {
                    want += af_rows[p][c] * m_rows[c][j];
                }
                assert_abs_diff_eq!(aw.values().get(p, j), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rerank_identity_and_zero() {
        let sw = score(vec![vec![0.3, 0.6], vec![0.1, 0.2]], Scale::Logits);
        let ones = AttentionMap::new(
            Grid::from_rows(vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            AttentionLevel::Fine,
        )
        .unwrap();
        assert_eq!(rerank(&sw, &ones).unwrap().values(), sw.values());
        let zeros =
            AttentionMap::new(Grid::zeros(2, 2), AttentionLevel::Fine).unwrap();
        assert!(rerank(&sw, &zeros)
            .unwrap()
            .values()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn rerank_matches_loop_oracle() {
        let sw_rows: Vec<Vec<f64>> = (0..5)
            .map(|p| (0..3).map(|c| (p * 3 + c) as f64 * 0.37 - 1.0).collect())
            .collect();
        let aw_rows: Vec<Vec<f64>> = (0..5)
            .map(|p| (0..3).map(|c| ((p + c) % 4) as f64 * 0.25).collect())
            .collect();
        let sw = score(sw_rows.clone(), Scale::Logits);
        let aw = AttentionMap::new(Grid::from_rows(aw_rows.clone()).unwrap(), AttentionLevel::Fine)
            .unwrap();
        let out = rerank(&sw, &aw).unwrap();
        for p in 0..5 {
            for c in 0..3 {
                assert_eq!(out.values().get(p, c), sw_rows[p][c] * aw_rows[p][c]);
            }
        }
    }

    #[test]
    fn pooling_examples() {
        let sm = score(vec![vec![1.0], vec![2.0], vec![3.0]], Scale::Logits);
        assert_eq!(pool(&sm, Pooling::TopKAverage(2)).unwrap(), vec![2.5]);
        assert_eq!(pool(&sm, Pooling::Sum).unwrap(), vec![6.0]);
        // P=3 < k=5 falls back to the plain average.
        assert_eq!(pool(&sm, Pooling::TopKAverage(5)).unwrap(), vec![2.0]);
        assert_eq!(pool(&sm, Pooling::Max).unwrap(), vec![3.0]);
        assert_eq!(pool(&sm, Pooling::Average).unwrap(), vec![2.0]);
        assert!(pool(&sm, Pooling::TopKAverage(0)).is_err());
    }

    #[test]
    fn weighted_average_is_softmax_weighted() {
        let sm = score(vec![vec![1.0], vec![0.0]], Scale::Logits);
        let w = numeric::softmax(&[1.0, 0.0]);
        let want = w[0] * 1.0 + w[1] * 0.0;
        assert_abs_diff_eq!(
            pool(&sm, Pooling::WeightedAverage).unwrap()[0],
            want,
            epsilon = 1e-12
        );
    }

    #[test]
    fn top_k_tie_breaks_to_lowest_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[2.0, 2.0, 2.0], 2), vec![0, 1]);
    }

    #[test]
    fn map_text_roundtrip() {
        let sm = score(vec![vec![0.25, -1.5], vec![3.0, 0.125]], Scale::Logits);
        let parsed = parse_map(&sm.to_text()).unwrap();
        assert_eq!(parsed, ParsedMap::Score(sm));
        let am = AttentionMap::new(
            Grid::from_rows(vec![vec![0.5, 0.5]]).unwrap(),
            AttentionLevel::Fine,
        )
        .unwrap();
        let parsed = parse_map(&am.to_text()).unwrap();
        assert_eq!(parsed, ParsedMap::Attention(am));
        assert!(parse_map("MAP 1 1 bogus\n0\n").is_err());
        assert!(parse_map("").is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_and_columns_normalize(
            raw in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..12)
        ) {
            let s = score(raw, Scale::Logits);
            let shat = class_softmax(&s).unwrap();
            shat.check_rows_normalized(1e-9).unwrap();
            for v in shat.values().data() {
                prop_assert!(*v > 0.0 && *v < 1.0);
            }
            let af = proposal_normalize(&shat).unwrap();
            for c in 0..af.classes() {
                let s: f64 = af.values().col(c).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn column_shift_leaves_attention_unchanged(
            raw in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..8),
            shift in -3.0f64..3.0,
        ) {
            let base = score(raw.clone(), Scale::Probabilities);
            let shifted_rows: Vec<Vec<f64>> = raw
                .iter()
                .map(|r| r.iter().enumerate().map(|(c, v)| if c == 1 { v + shift } else { *v }).collect())
                .collect();
            let shifted = score(shifted_rows, Scale::Probabilities);
            let a = proposal_normalize(&base).unwrap();
            let b = proposal_normalize(&shifted).unwrap();
            // Adding one constant to a whole column preserves that column's
            // softmax over proposals, hence the per-class top proposal.
            for p in 0..a.proposals() {
                prop_assert!((a.values().get(p, 1) - b.values().get(p, 1)).abs() < 1e-9);
            }
        }

        #[test]
        fn rerank_preserves_zeros(
            raw in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 1..6),
        ) {
            let mut zeroed = raw.clone();
            zeroed[0][0] = 0.0;
            let sw = score(zeroed.clone(), Scale::Probabilities);
            let aw = AttentionMap::new(Grid::from_rows(raw).unwrap(), AttentionLevel::Fine).unwrap();
            let out = rerank(&sw, &aw).unwrap();
            prop_assert_eq!(out.values().get(0, 0), 0.0);
        }
    }
}
