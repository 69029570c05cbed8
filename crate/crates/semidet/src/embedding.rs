//! Per-class embedding tables: averaged class representations and the
//! embedding file format.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

use crate::taxonomy::ClassId;

/// Ordered class-id → vector table. Insertion order is preserved and defines
/// matrix row/column indices for visual correlations.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingTable {
    dim: usize,
    ids: Vec<ClassId>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<ClassId, usize>,
}

impl ClassEmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "embedding dimension must be positive"));
        }
        Ok(ClassEmbeddingTable {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn insert(&mut self, id: impl Into<ClassId>, vector: Vec<f64>) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vector"));
        }
        if self.index.contains_key(&id) {
            return Err(Error::invalid("embedding", format!("duplicate class `{id}`")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ClassId] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.vectors[i].as_slice())
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClassId, &[f64])> {
        self.ids
            .iter()
            .zip(self.vectors.iter().map(Vec::as_slice))
    }

    /// New table holding `ids` in the given order; errors on a missing class.
    pub fn subset(&self, ids: &[ClassId]) -> Result<Self> {
        let mut out = ClassEmbeddingTable::new(self.dim)?;
        for id in ids {
            let v = self
                .get(id)
                .ok_or_else(|| Error::UnknownClass(id.clone()))?;
            out.insert(id.clone(), v.to_vec())?;
        }
        Ok(out)
    }

    /// `D <dim>` header, then `class_id v1 … vD` per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("D {}\n", self.dim);
        for (id, v) in self.iter() {
            let _ = write!(out, "{id}");
            for x in v {
                let _ = write!(out, " {x}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn parse_embeddings(text: &str) -> Result<ClassEmbeddingTable> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty embedding file"))?;
    let mut tok = header.split_whitespace();
    if tok.next() != Some("D") {
        return Err(Error::parse(1, "expected `D <dim>` header"));
    }
    let dim: usize = tok
        .next()
        .and_then(|s| s.parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::parse(1, "bad dimension"))?;
    if tok.next().is_some() {
        return Err(Error::parse(1, "trailing tokens in header"));
    }
    let mut table = ClassEmbeddingTable::new(dim)?;
    for (idx, raw) in lines {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tok = trimmed.split_whitespace();
        let id = tok.next().expect("non-empty line has a first token");
        let mut v = Vec::with_capacity(dim);
        for t in tok {
            let x: f64 = t
                .parse()
                .map_err(|_| Error::parse(line, format!("bad number `{t}`")))?;
            if !x.is_finite() {
                return Err(Error::parse(line, format!("non-finite component `{t}`")));
            }
            v.push(x);
        }
        if v.len() != dim {
            return Err(Error::parse(
                line,
                format!("expected {dim} components, got {}", v.len()),
            ));
        }
        table
            .insert(id, v)
            .map_err(|e| Error::parse(line, e.to_string()))?;
    }
    Ok(table)
}

/// Component-wise mean of a non-empty, dimension-uniform sample list.
pub fn class_representation(samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = samples.first().ok_or(Error::EmptyInput("sample list"))?;
    let dim = first.len();
    let mut mean = vec![0.0; dim];
    for s in samples {
        if s.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: s.len(),
            });
        }
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    let n = samples.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    Ok(mean)
}

/// Euclidean distance between two representations.
pub fn pairwise_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    crate::numeric::l2_distance(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn representation_mean() {
        let m = class_representation(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m, vec![2.0, 3.0]);
    }

    #[test]
    fn representation_single_sample_identity() {
        let m = class_representation(&[vec![5.0, -1.0]]).unwrap();
        assert_eq!(m, vec![5.0, -1.0]);
    }

    #[test]
    fn representation_matches_summation_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let samples: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let got = class_representation(&samples).unwrap();
        // Independent oracle: per-component sum then divide.
        for d in 0..8 {
            let mut sum = 0.0;
            for s in &samples {
                sum += s[d];
            }
            assert_abs_diff_eq!(got[d], sum / 100.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn representation_errors() {
        assert!(class_representation(&[]).is_err());
        assert!(class_representation(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn distance_cases() {
        assert_eq!(pairwise_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            pairwise_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(),
            5.0,
            epsilon = 1e-15
        );
        assert!(pairwise_distance(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn distance_symmetry() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert_eq!(
                pairwise_distance(&x, &y).unwrap(),
                pairwise_distance(&y, &x).unwrap()
            );
        }
    }

    #[test]
    fn table_roundtrip_and_subset() {
        let mut t = ClassEmbeddingTable::new(2).unwrap();
        t.insert("b", vec![1.0, 2.0]).unwrap();
        t.insert("a", vec![-0.5, 0.25]).unwrap();
        let re = parse_embeddings(&t.to_text()).unwrap();
        assert_eq!(t, re);
        let sub = t.subset(&["a".to_string()]).unwrap();
        assert_eq!(sub.ids(), &["a".to_string()]);
        assert!(t.subset(&["zz".to_string()]).is_err());
    }

    #[test]
    fn parse_rejects_malformed() {
        assert!(parse_embeddings("").is_err());
        assert!(parse_embeddings("D 0\n").is_err());
        assert!(parse_embeddings("D 2\na 1.0\n").is_err());
        assert!(parse_embeddings("D 2\na 1.0 x\n").is_err());
        assert!(parse_embeddings("D 2\na 1 2\na 3 4\n").is_err());
    }
}
