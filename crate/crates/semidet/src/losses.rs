//! Training objectives and their hand-derived gradients through the linear
//! heads: the detection loss (classification + box regression), the two-term
//! weakly-supervised loss over pooled score maps, and the entropy+KL memory
//! losses. A central-difference gradient checker validates all of them.

use crate::attention::{top_k_indices, AttentionMap, ScoreMap};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::numeric::{check_distribution, log_sum_exp, softmax, PROB_EPS};

/// Trade-off multiplier on the box regression term.
pub const REG_TRADEOFF: f64 = 0.5;
/// Default weight of the attention-pooled term in the weakly loss.
pub const DEFAULT_LAMBDA: f64 = 0.1;
/// Default weight of the memory loss in the total objective.
pub const DEFAULT_MU: f64 = 0.1;
/// Top-k used by the global pooling branch.
pub const DEFAULT_TOP_K: usize = 5;

/// Per-component loss values for one training step or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_cg_cls: f64,
    pub l_cg_reg: f64,
    pub l_cg: f64,
    pub l_fg_global: f64,
    pub l_fg_attention: f64,
    pub l_fg: f64,
    pub l_m_w: f64,
    pub l_m_f: f64,
    pub l_m: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn finalize(&mut self, mu: f64) {
        self.l_cg = REG_TRADEOFF * self.l_cg_reg + self.l_cg_cls;
        self.l_fg = self.l_fg_global + self.l_fg_attention;
        self.l_m = self.l_m_w + self.l_m_f;
        self.total = self.l_cg + self.l_fg + mu * self.l_m;
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_cg_cls,
            self.l_cg_reg,
            self.l_fg_global,
            self.l_fg_attention,
            self.l_m_w,
            self.l_m_f,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Linear head parameters: coarse classifier (with background column), fine
/// classifier, and the class-agnostic box regressor.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParameters {
    pub coarse_w: Grid, // D x (C_f + 1)
    pub coarse_b: Vec<f64>,
    pub fine_w: Grid, // D x C_w
    pub fine_b: Vec<f64>,
    pub box_w: Grid, // D x 4
    pub box_b: Vec<f64>,
}

impl HeadParameters {
    pub fn zeros(dim: usize, coarse: usize, fine: usize) -> Self {
        HeadParameters {
            coarse_w: Grid::zeros(dim, coarse + 1),
            coarse_b: vec![0.0; coarse + 1],
            fine_w: Grid::zeros(dim, fine),
            fine_b: vec![0.0; fine],
            box_w: Grid::zeros(dim, 4),
            box_b: vec![0.0; 4],
        }
    }

    pub fn dim(&self) -> usize {
        self.coarse_w.rows()
    }

    pub fn coarse_classes(&self) -> usize {
        self.coarse_w.cols() - 1
    }

    pub fn fine_classes(&self) -> usize {
        self.fine_w.cols()
    }

    /// `features (P x D) * W + b -> P x C`
    pub fn linear(features: &Grid, w: &Grid, b: &[f64]) -> Result<Grid> {
        let mut out = features.matmul(w)?;
        for p in 0..out.rows() {
            for (c, bias) in b.iter().enumerate() {
                let v = out.get(p, c) + bias;
                out.set(p, c, v);
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Detection loss (coarse stream)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DetectionLoss {
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub grad_logits: Grid,
    pub grad_box: Vec<[f64; 4]>,
}

fn smooth_l1(r: f64) -> f64 {
    let a = r.abs();
    if a < 1.0 {
        0.5 * r * r
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(r: f64) -> f64 {
    if r.abs() < 1.0 {
        r
    } else {
        r.signum()
    }
}

/// `0.5 * smooth-L1(box) + softmax cross-entropy(cls)`.
///
/// Labels are 0-based with the background at index `C` (the last logit
/// column). The classification term is the mean over all proposals; the
/// regression term is the mean over the positive proposals, whose box
/// predictions/targets are supplied in proposal order.
pub fn detection_loss(
    cls_logits: &Grid,
    cls_labels: &[usize],
    box_pred: &[[f64; 4]],
    box_targets: &[[f64; 4]],
) -> Result<DetectionLoss> {
    let n = cls_logits.rows();
    if cls_labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} logit rows but {} labels",
            cls_labels.len()
        )));
    }
    if !cls_logits.is_finite() {
        return Err(Error::NonFinite("classification logits"));
    }
    let classes = cls_logits.cols();
    for &l in cls_labels {
        if l >= classes {
            return Err(Error::invalid(
                "label",
                format!("label {l} out of range 0..{classes}"),
            ));
        }
    }
    if box_pred.len() != box_targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} box predictions vs {} targets",
            box_pred.len(),
            box_targets.len()
        )));
    }

    let mut cls = 0.0;
    let mut grad_logits = Grid::zeros(n, classes);
    if n > 0 {
        let inv_n = 1.0 / n as f64;
        for (p, &label) in cls_labels.iter().enumerate() {
            let row = cls_logits.row(p);
            let lse = log_sum_exp(row);
            cls += (lse - row[label]) * inv_n;
            let probs = softmax(row);
            for (c, pr) in probs.into_iter().enumerate() {
                let y = if c == label { 1.0 } else { 0.0 };
                grad_logits.set(p, c, (pr - y) * inv_n);
            }
        }
    }

    let mut reg = 0.0;
    let mut grad_box = vec![[0.0; 4]; box_pred.len()];
    if !box_pred.is_empty() {
        let inv_pos = 1.0 / box_pred.len() as f64;
        for (i, (pred, target)) in box_pred.iter().zip(box_targets).enumerate() {
            for k in 0..4 {
                let r = pred[k] - target[k];
                reg += smooth_l1(r) * inv_pos;
                grad_box[i][k] = REG_TRADEOFF * smooth_l1_grad(r) * inv_pos;
            }
        }
    }

    let loss = REG_TRADEOFF * reg + cls;
    if !loss.is_finite() {
        return Err(Error::NonFinite("detection loss"));
    }
    Ok(DetectionLoss {
        loss,
        cls,
        reg,
        grad_logits,
        grad_box,
    })
}

// ---------------------------------------------------------------------------
// Weakly-supervised loss (fine stream)
// ---------------------------------------------------------------------------

/// Normalized multi-label softmax loss over pooled logits: per-positive
/// softmax cross-entropy averaged over the positive classes. Returns the loss
/// and its gradient w.r.t. the pooled logits; both are zero when the image
/// has no positive label.
pub fn nce(pooled: &[f64], positives: &[bool]) -> Result<(f64, Vec<f64>)> {
    if pooled.len() != positives.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} pooled logits vs {} labels",
            pooled.len(),
            positives.len()
        )));
    }
    let pos: Vec<usize> = positives
        .iter()
        .enumerate()
        .filter(|(_, &y)| y)
        .map(|(c, _)| c)
        .collect();
    if pos.is_empty() {
        return Ok((0.0, vec![0.0; pooled.len()]));
    }
    let lse = log_sum_exp(pooled);
    let probs = softmax(pooled);
    let inv = 1.0 / pos.len() as f64;
    let mut loss = 0.0;
    let mut grad: Vec<f64> = probs.clone();
    for &c in &pos {
        loss += (lse - pooled[c]) * inv;
    }
    for (c, g) in grad.iter_mut().enumerate() {
        let y = if positives[c] { inv } else { 0.0 };
        *g -= y;
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug)]
pub struct WeaklyLoss {
    pub loss: f64,
    pub global: f64,
    pub attention: f64,
    pub grad_scores: Grid,
}

/// Two-branch weakly-supervised objective: top-k average pooling on the raw
/// fine score map plus `lambda` times sum pooling on the attention re-ranked
/// map. The attention map is a constant: no gradient flows through it.
pub fn weakly_loss(
    sw: &ScoreMap,
    aw: &AttentionMap,
    labels: &[bool],
    lambda: f64,
) -> Result<WeaklyLoss> {
    weakly_loss_top_k(sw, aw, labels, lambda, DEFAULT_TOP_K)
}

pub fn weakly_loss_top_k(
    sw: &ScoreMap,
    aw: &AttentionMap,
    labels: &[bool],
    lambda: f64,
    top_k: usize,
) -> Result<WeaklyLoss> {
    if sw.proposals() != aw.proposals() || sw.classes() != aw.classes() {
        return Err(Error::ShapeMismatch(format!(
            "score map {}x{} vs attention map {}x{}",
            sw.proposals(),
            sw.classes(),
            aw.proposals(),
            aw.classes()
        )));
    }
    if labels.len() != sw.classes() {
        return Err(Error::ShapeMismatch(format!(
            "{} classes but {} labels",
            sw.classes(),
            labels.len()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::invalid("lambda", "must be non-negative"));
    }
    if top_k == 0 {
        return Err(Error::invalid("top_k", "must be >= 1"));
    }
    let p = sw.proposals();
    let c = sw.classes();
    let mut grad = Grid::zeros(p, c);
    if !labels.iter().any(|&y| y) || p == 0 {
        return Ok(WeaklyLoss {
            loss: 0.0,
            global: 0.0,
            attention: 0.0,
            grad_scores: grad,
        });
    }

    // Global branch: top-k average pooling on S^w.
    let mut pooled_global = Vec::with_capacity(c);
    let mut selections: Vec<Vec<usize>> = Vec::with_capacity(c);
    for j in 0..c {
        let col = sw.values().col(j);
        let idx = top_k_indices(&col, top_k);
        pooled_global.push(idx.iter().map(|&i| col[i]).sum::<f64>() / idx.len() as f64);
        selections.push(idx);
    }
    let (global, g_global) = nce(&pooled_global, labels)?;
    for (j, idx) in selections.iter().enumerate() {
        let share = g_global[j] / idx.len() as f64;
        for &i in idx {
            grad.set(i, j, grad.get(i, j) + share);
        }
    }

    // Attention branch: sum pooling on S^w ⊙ A^w.
    let mut attention = 0.0;
    if lambda > 0.0 {
        let mut pooled_attn = vec![0.0; c];
        for j in 0..c {
            for i in 0..p {
                pooled_attn[j] += sw.values().get(i, j) * aw.values().get(i, j);
            }
        }
        let (attn_loss, g_attn) = nce(&pooled_attn, labels)?;
        attention = lambda * attn_loss;
        for j in 0..c {
            for i in 0..p {
                let v = grad.get(i, j) + lambda * g_attn[j] * aw.values().get(i, j);
                grad.set(i, j, v);
            }
        }
    }

    let loss = global + attention;
    if !loss.is_finite() {
        return Err(Error::NonFinite("weakly loss"));
    }
    Ok(WeaklyLoss {
        loss,
        global,
        attention,
        grad_scores: grad,
    })
}

// ---------------------------------------------------------------------------
// Entropy, KL divergence, memory losses
// ---------------------------------------------------------------------------

/// Shannon entropy with the 0·ln 0 := 0 convention.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(p.iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum())
}

/// KL(p || q); q components are clamped to at least [`PROB_EPS`].
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    check_distribution(q)?;
    if p.len() != q.len() {
        return Err(Error::DimMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi > 0.0 {
                pi * (pi / qi.max(PROB_EPS)).ln()
            } else {
                0.0
            }
        })
        .sum())
}

/// Proposal-level memory loss: `H(p̂) + KL(p || p̂)` — the entropy of the
/// memory prediction plus the divergence of the network prediction from it.
pub fn memory_loss_proposal(p: &[f64], phat: &[f64]) -> Result<f64> {
    Ok(entropy(phat)? + kl_div(p, phat)?)
}

/// Image-level memory loss; identical contract applied to image-level
/// distributions.
pub fn memory_loss_image(i: &[f64], ihat: &[f64]) -> Result<f64> {
    memory_loss_proposal(i, ihat)
}

pub fn total_memory_loss(l_w: f64, l_f: f64) -> f64 {
    l_w + l_f
}

/// Memory loss with `p = softmax(z)`; returns the loss and its gradient
/// w.r.t. the logits `z`. The memory prediction is a constant.
pub fn memory_loss_grad_logits(z: &[f64], phat: &[f64]) -> Result<(f64, Vec<f64>)> {
    if z.len() != phat.len() {
        return Err(Error::DimMismatch {
            expected: phat.len(),
            got: z.len(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("memory loss logits"));
    }
    let p = softmax(z);
    let loss = memory_loss_proposal(&p, phat)?;
    // dL/dp_c = ln(p_c / p̂_c) + 1, pushed through the softmax Jacobian.
    let g: Vec<f64> = p
        .iter()
        .zip(phat)
        .map(|(&pc, &hc)| (pc.max(PROB_EPS) / hc.max(PROB_EPS)).ln() + 1.0)
        .collect();
    let dot: f64 = p.iter().zip(&g).map(|(pi, gi)| pi * gi).sum();
    let grad = p
        .iter()
        .zip(&g)
        .map(|(pi, gi)| pi * (gi - dot))
        .collect();
    Ok((loss, grad))
}

/// Image-level memory loss with gradients: the image prediction is the
/// renormalized sum of per-proposal softmax distributions over the selected
/// (foreground-attention pooled) rows. Returns the loss and gradients w.r.t.
/// each selected row of logits.
pub fn memory_loss_image_grad_logits(
    selected_logits: &[Vec<f64>],
    ihat: &[f64],
) -> Result<(f64, Vec<Vec<f64>>)> {
    if selected_logits.is_empty() {
        return Err(Error::EmptyInput("selected proposal logits"));
    }
    let c = ihat.len();
    let mut rows = Vec::with_capacity(selected_logits.len());
    let mut sum = vec![0.0; c];
    for z in selected_logits {
        if z.len() != c {
            return Err(Error::DimMismatch {
                expected: c,
                got: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("memory loss logits"));
        }
        let p = softmax(z);
        for (s, pi) in sum.iter_mut().zip(&p) {
            *s += pi;
        }
        rows.push(p);
    }
    let total: f64 = sum.iter().sum();
    let image_pred: Vec<f64> = sum.iter().map(|s| s / total).collect();
    let loss = memory_loss_image(&image_pred, ihat)?;

    // dL/dI_c = ln(I_c / Î_c) + 1; back through the renormalization and each
    // row's softmax.
    let g_i: Vec<f64> = image_pred
        .iter()
        .zip(ihat)
        .map(|(&ic, &hc)| (ic.max(PROB_EPS) / hc.max(PROB_EPS)).ln() + 1.0)
        .collect();
    let gi_dot_i: f64 = g_i.iter().zip(&image_pred).map(|(g, i)| g * i).sum();
    let g_sum: Vec<f64> = g_i.iter().map(|g| (g - gi_dot_i) / total).collect();
    let grads = rows
        .iter()
        .map(|p| {
            let dot: f64 = p.iter().zip(&g_sum).map(|(pi, gi)| pi * gi).sum();
            p.iter().zip(&g_sum).map(|(pi, gi)| pi * (gi - dot)).collect()
        })
        .collect();
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Central-difference check of an analytic gradient. Returns the maximum
/// relative error `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// over all coordinates.
pub fn grad_check<F>(loss_fn: F, analytic: &[f64], params: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(
            "eps",
            format!("must be in [1e-7, 1e-3], got {eps}"),
        ));
    }
    if analytic.len() != params.len() {
        return Err(Error::DimMismatch {
            expected: params.len(),
            got: analytic.len(),
        });
    }
    let mut max_err: f64 = 0.0;
    let mut x = params.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = loss_fn(&x);
        x[i] = orig - eps;
        let fm = loss_fn(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("loss during gradient check"));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
