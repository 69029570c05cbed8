//! Visual correlation encodings: hard (thresholded distance) and soft
//! (temperature softmax over distances) assignment matrices.

use crate::correlation::{CorrelationKind, CorrelationMatrix};
use crate::embedding::{pairwise_distance, ClassEmbeddingTable};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::numeric;

/// Per-coarse-class threshold selection for hard assignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdRule {
    /// Same threshold for every coarse class.
    Fixed(f64),
    /// `theta_i = factor * min_j d_i^j` per coarse class.
    ScaledNearest { factor: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardAssignConfig {
    pub rule: ThresholdRule,
    /// When set, every fine class additionally gets a 1 at its nearest coarse
    /// class so the attention mapping never produces an orphan column.
    pub augment_nearest: bool,
}

impl Default for HardAssignConfig {
    fn default() -> Self {
        HardAssignConfig {
            rule: ThresholdRule::ScaledNearest { factor: 1.2 },
            augment_nearest: true,
        }
    }
}

fn distance_grid(
    coarse: &ClassEmbeddingTable,
    fine: &ClassEmbeddingTable,
) -> Result<Grid> {
    if coarse.is_empty() || fine.is_empty() {
        return Err(Error::EmptyInput("embedding table"));
    }
    if coarse.dim() != fine.dim() {
        return Err(Error::DimMismatch {
            expected: coarse.dim(),
            got: fine.dim(),
        });
    }
    let mut d = Grid::zeros(coarse.len(), fine.len());
    for i in 0..coarse.len() {
        for j in 0..fine.len() {
            d.set(i, j, pairwise_distance(coarse.vector(i), fine.vector(j))?);
        }
    }
    Ok(d)
}

/// Hard assignment: entry (i, j) = 1 iff `d_i^j < theta_i`, optionally
/// augmented with a 1 at every fine class's nearest coarse class.
pub fn hard_assign(
    coarse: &ClassEmbeddingTable,
    fine: &ClassEmbeddingTable,
    config: HardAssignConfig,
) -> Result<CorrelationMatrix> {
    let d = distance_grid(coarse, fine)?;
    let mut m = Grid::zeros(d.rows(), d.cols());
    for i in 0..d.rows() {
        let theta = match config.rule {
            ThresholdRule::Fixed(t) => t,
            ThresholdRule::ScaledNearest { factor } => {
                let nearest = d
                    .row(i)
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min);
                factor * nearest
            }
        };
        for j in 0..d.cols() {
            if d.get(i, j) < theta {
                m.set(i, j, 1.0);
            }
        }
    }
    if config.augment_nearest {
        for j in 0..d.cols() {
            let mut best = 0usize;
            for i in 1..d.rows() {
                if d.get(i, j) < d.get(best, j) {
                    best = i;
                }
            }
            m.set(best, j, 1.0);
        }
    }
    CorrelationMatrix::new(
        CorrelationKind::VisualHard,
        coarse.ids().to_vec(),
        fine.ids().to_vec(),
        m,
    )
}

/// Soft assignment: column j is the softmax over coarse classes of
/// `-beta * d_i^j`, computed with max subtraction.
pub fn soft_assign(
    coarse: &ClassEmbeddingTable,
    fine: &ClassEmbeddingTable,
    beta: f64,
) -> Result<CorrelationMatrix> {
    if !(beta > 0.0) {
        return Err(Error::invalid("beta", format!("must be positive, got {beta}")));
    }
    let d = distance_grid(coarse, fine)?;
    let mut m = Grid::zeros(d.rows(), d.cols());
    for j in 0..d.cols() {
        let neg: Vec<f64> = (0..d.rows()).map(|i| -beta * d.get(i, j)).collect();
        let col = numeric::softmax(&neg);
        for (i, v) in col.into_iter().enumerate() {
            m.set(i, j, v);
        }
    }
    CorrelationMatrix::new(
        CorrelationKind::VisualSoft,
        coarse.ids().to_vec(),
        fine.ids().to_vec(),
        m,
    )
}

/// Scale-free default temperature: the reciprocal of the median coarse-fine
/// distance (1.0 when the median is zero).
pub fn default_beta(
    coarse: &ClassEmbeddingTable,
    fine: &ClassEmbeddingTable,
) -> Result<f64> {
    let d = distance_grid(coarse, fine)?;
    let med = numeric::median(d.data()).expect("non-empty distance grid");
    if med > 0.0 {
        Ok(1.0 / med)
    } else {
        Ok(1.0)
    }
}
