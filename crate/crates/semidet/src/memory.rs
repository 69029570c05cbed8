//! Dual-level prototype memory: a proposal-level bank over coarse classes and
//! an image-level bank over fine classes. Each class slot holds an EMA
//! feature prototype (key), an EMA probability distribution (value) and an
//! update counter; predictions are a distance softmax over mature prototypes.
//! Foreground-attention pooling bridges proposal-level features/predictions
//! to image level by summing exactly the proposals whose argmax class matches
//! the target class.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::losses::{memory_loss_image, memory_loss_proposal};
use crate::numeric::{argmax, check_distribution, softmax, squared_distance};

pub const DEFAULT_MOMENTUM: f64 = 0.5;

/// Sharpness of the distance softmax used by predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sharpness {
    /// `1 / mean squared distance` between distinct mature keys; falls back
    /// to 1 when fewer than two prototypes are mature.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    classes: usize,
    dim: usize,
    momentum: f64,
    sharpness: Sharpness,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    counts: Vec<u64>,
}

impl MemoryBank {
    pub fn new(classes: usize, dim: usize, momentum: f64, sharpness: Sharpness) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::invalid("memory", "needs at least one class and dim >= 1"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(
                "momentum",
                format!("must be in [0, 1], got {momentum}"),
            ));
        }
        if let Sharpness::Fixed(g) = sharpness {
            if !(g > 0.0) {
                return Err(Error::invalid("gamma", format!("must be positive, got {g}")));
            }
        }
        Ok(MemoryBank {
            classes,
            dim,
            momentum,
            sharpness,
            keys: vec![vec![0.0; dim]; classes],
            values: vec![vec![1.0 / classes as f64; classes]; classes],
            counts: vec![0; classes],
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn sharpness(&self) -> Sharpness {
        self.sharpness
    }

    pub fn count(&self, class: usize) -> u64 {
        self.counts[class]
    }

    pub fn key(&self, class: usize) -> &[f64] {
        &self.keys[class]
    }

    pub fn value(&self, class: usize) -> &[f64] {
        &self.values[class]
    }

    pub fn mature_classes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.classes).filter(|&c| self.counts[c] > 0)
    }

    pub fn has_mature(&self) -> bool {
        self.counts.iter().any(|&c| c > 0)
    }

    /// Effective sharpness for the current bank state.
    pub fn gamma(&self) -> f64 {
        match self.sharpness {
            Sharpness::Fixed(g) => g,
            Sharpness::Auto => {
                let mature: Vec<usize> = self.mature_classes().collect();
                if mature.len() < 2 {
                    return 1.0;
                }
                let mut sum = 0.0;
                let mut n = 0usize;
                for (a, &i) in mature.iter().enumerate() {
                    for &j in &mature[a + 1..] {
                        sum += squared_distance(&self.keys[i], &self.keys[j]);
                        n += 1;
                    }
                }
                let mean = sum / n as f64;
                if mean > 0.0 {
                    1.0 / mean
                } else {
                    1.0
                }
            }
        }
    }

    /// Distance-softmax prediction over mature classes: softmax of
    /// `-gamma * ||x - key_c||^2`; immature classes get probability zero.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let mature: Vec<usize> = self.mature_classes().collect();
        if mature.is_empty() {
            return Err(Error::EmptyInput("memory bank has no mature class"));
        }
        let gamma = self.gamma();
        let scores: Vec<f64> = mature
            .iter()
            .map(|&c| -gamma * squared_distance(x, &self.keys[c]))
            .collect();
        let probs = softmax(&scores);
        let mut out = vec![0.0; self.classes];
        for (&c, p) in mature.iter().zip(probs) {
            out[c] = p;
        }
        Ok(out)
    }

    /// Restores raw slot state, one `(count, key, value)` row per class in
    /// order. Mature rows must carry a valid distribution.
    pub fn restore(&mut self, rows: &[(u64, Vec<f64>, Vec<f64>)]) -> Result<()> {
        if rows.len() != self.classes {
            return Err(Error::DimMismatch {
                expected: self.classes,
                got: rows.len(),
            });
        }
        for (c, (count, key, value)) in rows.iter().enumerate() {
            if key.len() != self.dim {
                return Err(Error::DimMismatch {
                    expected: self.dim,
                    got: key.len(),
                });
            }
            if value.len() != self.classes {
                return Err(Error::DimMismatch {
                    expected: self.classes,
                    got: value.len(),
                });
            }
            if key.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("memory key"));
            }
            if *count > 0 {
                check_distribution(value)?;
            }
            self.counts[c] = *count;
            self.keys[c] = key.clone();
            self.values[c] = value.clone();
        }
        Ok(())
    }

    /// EMA update of the target class slot. The target is the label hint when
    /// supplied, otherwise the argmax of `p`. The first update of a class sets
    /// the key/value directly.
    pub fn update(&mut self, x: &[f64], p: &[f64], class_hint: Option<usize>) -> Result<usize> {
        if x.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if p.len() != self.classes {
            return Err(Error::DimMismatch {
                expected: self.classes,
                got: p.len(),
            });
        }
        check_distribution(p)?;
        let target = match class_hint {
            Some(c) if c < self.classes => c,
            Some(c) => {
                return Err(Error::invalid(
                    "class_hint",
                    format!("class {c} out of range 0..{}", self.classes),
                ))
            }
            None => argmax(p).expect("non-empty distribution"),
        };
        if self.counts[target] == 0 {
            self.keys[target] = x.to_vec();
            self.values[target] = p.to_vec();
        } else {
            let m = self.momentum;
            for (k, xi) in self.keys[target].iter_mut().zip(x) {
                *k = m * *k + (1.0 - m) * xi;
            }
            let mut sum = 0.0;
            for (v, pi) in self.values[target].iter_mut().zip(p) {
                *v = m * *v + (1.0 - m) * pi;
                sum += *v;
            }
            // Renormalize so value rows stay exact distributions.
            for v in &mut self.values[target] {
                *v /= sum;
            }
        }
        self.counts[target] += 1;
        Ok(target)
    }
}

// ---------------------------------------------------------------------------
// Foreground-attention pooling
// ---------------------------------------------------------------------------

/// Pooled image-level entry for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct FaEntry {
    /// Sum of the selected proposals' features.
    pub feature: Vec<f64>,
    /// Renormalized sum of the selected proposals' score distributions.
    pub prediction: Vec<f64>,
    pub contributing: usize,
}

/// Sums features and predictions over exactly the proposals whose argmax
/// class equals `target_class` (ties to the lowest class index). Returns
/// `None` when no proposal selects the class.
pub fn fa_pool(features: &Grid, scores: &Grid, target_class: usize) -> Option<FaEntry> {
    debug_assert_eq!(features.rows(), scores.rows());
    let selected: Vec<usize> = (0..scores.rows())
        .filter(|&p| argmax(scores.row(p)) == Some(target_class))
        .collect();
    if selected.is_empty() {
        return None;
    }
    let mut feature = vec![0.0; features.cols()];
    let mut prediction = vec![0.0; scores.cols()];
    for &p in &selected {
        for (f, x) in feature.iter_mut().zip(features.row(p)) {
            *f += x;
        }
        for (s, x) in prediction.iter_mut().zip(scores.row(p)) {
            *s += x;
        }
    }
    let total: f64 = prediction.iter().sum();
    if total > 0.0 {
        for v in &mut prediction {
            *v /= total;
        }
    }
    Some(FaEntry {
        feature,
        prediction,
        contributing: selected.len(),
    })
}

/// Classes that at least one proposal argmaxes to, ascending.
pub fn argmax_present_classes(scores: &Grid) -> Vec<usize> {
    let mut present = vec![false; scores.cols()];
    for p in 0..scores.rows() {
        if let Some(c) = argmax(scores.row(p)) {
            present[c] = true;
        }
    }
    present
        .into_iter()
        .enumerate()
        .filter(|(_, v)| *v)
        .map(|(c, _)| c)
        .collect()
}

// ---------------------------------------------------------------------------
// Dual-level step
// ---------------------------------------------------------------------------

/// One proposal-level observation: labelled entries come from detection data
/// (the label is the ground-truth coarse class) and update the coarse bank;
/// unlabelled entries come from classification data and contribute the
/// proposal-level memory loss.
#[derive(Clone, Debug)]
pub struct ProposalObs {
    pub feature: Vec<f64>,
    pub prediction: Vec<f64>,
    pub label: Option<usize>,
}

/// One image-level observation (already FA-pooled): labelled entries come
/// from classification data and update the fine bank; unlabelled entries come
/// from detection data and contribute the image-level memory loss.
#[derive(Clone, Debug)]
pub struct ImageObs {
    pub feature: Vec<f64>,
    pub prediction: Vec<f64>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct MemoryBatch {
    pub proposals: Vec<ProposalObs>,
    pub images: Vec<ImageObs>,
}

/// Result of a dual-level step. Loss terms record which batch entries
/// contributed and the memory prediction they were scored against, so a
/// caller can push gradients through the corresponding network outputs.
#[derive(Clone, Debug, Default)]
pub struct MemoryStepResult {
    pub l_m_w: f64,
    pub l_m_f: f64,
    pub proposal_terms: Vec<(usize, Vec<f64>)>,
    pub image_terms: Vec<(usize, Vec<f64>)>,
}

/// Runs one dual-level memory step: losses for all unlabelled entries are
/// computed against the bank state at entry (entries are skipped while the
/// relevant bank has no mature class), then labelled entries update the
/// banks. Losses are means over contributing entries; an empty batch yields
/// zero losses and unchanged banks.
pub fn dual_memory_step(
    coarse_bank: &mut MemoryBank,
    fine_bank: &mut MemoryBank,
    batch: &MemoryBatch,
) -> Result<MemoryStepResult> {
    let mut result = MemoryStepResult::default();

    let mut w_sum = 0.0;
    for (i, obs) in batch.proposals.iter().enumerate() {
        if obs.label.is_none() && coarse_bank.has_mature() {
            let phat = coarse_bank.predict(&obs.feature)?;
            w_sum += memory_loss_proposal(&obs.prediction, &phat)?;
            result.proposal_terms.push((i, phat));
        }
    }
    if !result.proposal_terms.is_empty() {
        result.l_m_w = w_sum / result.proposal_terms.len() as f64;
    }

    let mut f_sum = 0.0;
    for (i, obs) in batch.images.iter().enumerate() {
        if obs.label.is_none() && fine_bank.has_mature() {
            let ihat = fine_bank.predict(&obs.feature)?;
            f_sum += memory_loss_image(&obs.prediction, &ihat)?;
            result.image_terms.push((i, ihat));
        }
    }
    if !result.image_terms.is_empty() {
        result.l_m_f = f_sum / result.image_terms.len() as f64;
    }

    for obs in &batch.proposals {
        if let Some(label) = obs.label {
            coarse_bank.update(&obs.feature, &obs.prediction, Some(label))?;
        }
    }
    for obs in &batch.images {
        if let Some(label) = obs.label {
            fine_bank.update(&obs.feature, &obs.prediction, Some(label))?;
        }
    }
    Ok(result)
}
