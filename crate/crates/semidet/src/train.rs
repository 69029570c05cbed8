//! End-to-end training over the synthetic harness: three streams (coarse
//! detection, weakly-supervised fine classification, dual-level memory)
//! driving linear heads with plain mini-batch gradient descent, plus
//! checkpointing, inference with soft-NMS, and metric evaluation.
//!
//! Each training step consumes one detection scene and one classification
//! scene (strict 1:1 balance). The coarse stream trains on detection data
//! only; the weakly-supervised loss trains the fine head on classification
//! data; memory losses regularize across the two streams. The attention map
//! is always treated as a constant: the weakly loss never backpropagates into
//! the coarse head through it.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    class_softmax_with, coarse_to_fine_attention, proposal_normalize, rerank, AttentionMap,
    BackgroundMode, Scale, ScoreMap,
};
use crate::correlation::{parse_correlation, CorrelationKind, CorrelationMatrix};
use crate::error::{Error, Result};
use crate::eval::{
    ap_per_class, corloc, mean_ap, map_5095_thresholds, soft_nms, BBox, CorlocPair, Detection,
    EpochLoss, GroundTruthBox, Interpolation, MetricsReport, DEFAULT_SCORE_FLOOR,
    DEFAULT_SOFT_NMS_SIGMA, IOU_MATCH_THRESHOLD,
};
use crate::grid::Grid;
use crate::losses::{
    detection_loss, memory_loss_grad_logits, memory_loss_image_grad_logits, weakly_loss_top_k,
    HeadParameters, LossBreakdown, DEFAULT_LAMBDA, DEFAULT_MU, DEFAULT_TOP_K,
};
use crate::memory::{
    dual_memory_step, fa_pool, argmax_present_classes, ImageObs, MemoryBank, MemoryBatch,
    ProposalObs, Sharpness, DEFAULT_MOMENTUM,
};
use crate::numeric::softmax;
use crate::sim::{Dataset, SyntheticScene};
use crate::taxonomy::build_semantic_correlation;
use crate::visual::{default_beta, hard_assign, soft_assign, HardAssignConfig, ThresholdRule};

/// Ablation ladder. Every rung includes the rungs below it, mirroring the
/// naive → +attention → +memory progression.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Detection stream only; no fine supervision at all.
    CoarseOnly,
    /// Detection stream plus the global-pooling branch of the fine stream.
    Naive,
    /// Adds the attention-pooled term and attention re-ranking at inference.
    Attention,
    /// Adds the proposal-level coarse memory loss.
    CgMemory,
    /// Full dual-level memory with foreground-attention pooling.
    DlmFa,
}

impl Ablation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::CoarseOnly => "coarse-only",
            Ablation::Naive => "naive",
            Ablation::Attention => "attention",
            Ablation::CgMemory => "cg-memory",
            Ablation::DlmFa => "dlm-fa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "coarse-only" => Some(Ablation::CoarseOnly),
            "naive" => Some(Ablation::Naive),
            "attention" => Some(Ablation::Attention),
            "cg-memory" => Some(Ablation::CgMemory),
            "dlm-fa" => Some(Ablation::DlmFa),
            _ => None,
        }
    }

    /// All rungs in ladder order, including the coarse-only baseline.
    pub fn ladder() -> [Ablation; 5] {
        [
            Ablation::CoarseOnly,
            Ablation::Naive,
            Ablation::Attention,
            Ablation::CgMemory,
            Ablation::DlmFa,
        ]
    }

    pub fn uses_fine_stream(&self) -> bool {
        !matches!(self, Ablation::CoarseOnly)
    }

    pub fn uses_attention(&self) -> bool {
        matches!(self, Ablation::Attention | Ablation::CgMemory | Ablation::DlmFa)
    }

    pub fn uses_proposal_memory(&self) -> bool {
        matches!(self, Ablation::CgMemory | Ablation::DlmFa)
    }

    pub fn uses_image_memory(&self) -> bool {
        matches!(self, Ablation::DlmFa)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub ablation: Ablation,
    pub correlation: CorrelationKind,
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub mu: f64,
    /// Memory EMA momentum.
    pub momentum: f64,
    /// Memory prediction sharpness; `None` selects the scale-free automatic
    /// value.
    pub gamma: Option<f64>,
    pub top_k: usize,
    pub background_mode: BackgroundMode,
    /// Soft-assignment temperature; `None` selects the median-distance
    /// default.
    pub beta: Option<f64>,
    pub theta_factor: f64,
    pub augment_nearest: bool,
    pub init_scale: f64,
    pub iou_positive: f64,
    pub soft_nms_sigma: f64,
    pub score_floor: f64,
    pub interpolation: Interpolation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ablation: Ablation::Attention,
            correlation: CorrelationKind::SemanticOnehot,
            epochs: 6,
            lr: 0.02,
            lambda: DEFAULT_LAMBDA,
            mu: DEFAULT_MU,
            momentum: DEFAULT_MOMENTUM,
            gamma: None,
            top_k: DEFAULT_TOP_K,
            background_mode: BackgroundMode::ExcludeFromDenominator,
            beta: None,
            theta_factor: 1.2,
            augment_nearest: true,
            init_scale: 0.01,
            iou_positive: 0.5,
            soft_nms_sigma: DEFAULT_SOFT_NMS_SIGMA,
            score_floor: DEFAULT_SCORE_FLOOR,
            interpolation: Interpolation::AllPoint,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::invalid("lr", "must be a non-negative finite number"));
        }
        if self.lambda < 0.0 {
            return Err(Error::invalid("lambda", "must be non-negative"));
        }
        if self.mu < 0.0 {
            return Err(Error::invalid("mu", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must be in [0, 1]"));
        }
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return Err(Error::invalid("beta", "must be positive"));
            }
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) {
                return Err(Error::invalid("gamma", "must be positive"));
            }
        }
        if self.top_k == 0 {
            return Err(Error::invalid("top_k", "must be >= 1"));
        }
        if !(self.soft_nms_sigma > 0.0) {
            return Err(Error::invalid("sigma", "must be positive"));
        }
        Ok(())
    }

    fn sharpness(&self) -> Sharpness {
        match self.gamma {
            Some(g) => Sharpness::Fixed(g),
            None => Sharpness::Auto,
        }
    }

    /// Learning rate for an epoch: dropped by 0.1 every ceil(epochs/3)
    /// epochs.
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        let period = self.epochs.div_ceil(3).max(1);
        self.lr * 0.1f64.powi((epoch / period) as i32)
    }
}

/// Everything needed to run inference: head parameters, both memory banks,
/// the correlation matrix used for attention, class orderings and the
/// training configuration echo.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub coarse_ids: Vec<String>,
    pub fine_ids: Vec<String>,
    pub heads: HeadParameters,
    pub coarse_bank: MemoryBank,
    pub fine_bank: MemoryBank,
    pub correlation: CorrelationMatrix,
}

/// Builds the coarse→fine correlation matrix the configured way.
pub fn build_correlation(dataset: &Dataset, config: &TrainConfig) -> Result<CorrelationMatrix> {
    match config.correlation {
        CorrelationKind::SemanticOnehot => {
            build_semantic_correlation(&dataset.taxonomy, &dataset.partition)
        }
        CorrelationKind::VisualHard => {
            let coarse = dataset.embeddings.subset(dataset.partition.coarse())?;
            let fine = dataset.embeddings.subset(dataset.partition.fine())?;
            hard_assign(
                &coarse,
                &fine,
                HardAssignConfig {
                    rule: ThresholdRule::ScaledNearest {
                        factor: config.theta_factor,
                    },
                    augment_nearest: config.augment_nearest,
                },
            )
        }
        CorrelationKind::VisualSoft => {
            let coarse = dataset.embeddings.subset(dataset.partition.coarse())?;
            let fine = dataset.embeddings.subset(dataset.partition.fine())?;
            let beta = match config.beta {
                Some(b) => b,
                None => default_beta(&coarse, &fine)?,
            };
            soft_assign(&coarse, &fine, beta)
        }
    }
}

fn init_heads(dim: usize, coarse: usize, fine: usize, scale: f64, seed: u64) -> HeadParameters {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x68656164);
    let normal = Normal::new(0.0, scale).expect("valid init scale");
    let mut heads = HeadParameters::zeros(dim, coarse, fine);
    let fill = |g: &mut Grid, rng: &mut ChaCha20Rng| {
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                g.set(r, c, normal.sample(rng));
            }
        }
    };
    fill(&mut heads.coarse_w, &mut rng);
    fill(&mut heads.fine_w, &mut rng);
    fill(&mut heads.box_w, &mut rng);
    heads
}

/// R-CNN-style box deltas from a proposal to its target box.
fn box_deltas(proposal: &BBox, target: &BBox) -> [f64; 4] {
    let (pcx, pcy) = proposal.center();
    let (gcx, gcy) = target.center();
    [
        (gcx - pcx) / proposal.width(),
        (gcy - pcy) / proposal.height(),
        (target.width() / proposal.width()).ln(),
        (target.height() / proposal.height()).ln(),
    ]
}

fn apply_deltas(proposal: &BBox, deltas: &[f64], extent: (f64, f64)) -> BBox {
    let (pcx, pcy) = proposal.center();
    // Clamp the log-scale deltas so a wild regressor cannot overflow.
    let dw = deltas[2].clamp(-4.0, 4.0);
    let dh = deltas[3].clamp(-4.0, 4.0);
    let cx = pcx + deltas[0].clamp(-4.0, 4.0) * proposal.width();
    let cy = pcy + deltas[1].clamp(-4.0, 4.0) * proposal.height();
    let w = proposal.width() * dw.exp();
    let h = proposal.height() * dh.exp();
    let x1 = (cx - w / 2.0).clamp(0.0, extent.0 - 1e-6);
    let y1 = (cy - h / 2.0).clamp(0.0, extent.1 - 1e-6);
    let x2 = (cx + w / 2.0).clamp(x1 + 1e-6, extent.0);
    let y2 = (cy + h / 2.0).clamp(y1 + 1e-6, extent.1);
    BBox::new(x1, y1, x2, y2).expect("clamped box is valid")
}

fn softmax_foreground(row: &[f64], coarse: usize) -> Vec<f64> {
    softmax(&row[..coarse])
}

struct GradientBuffers {
    coarse_w: Grid,
    coarse_b: Vec<f64>,
    fine_w: Grid,
    fine_b: Vec<f64>,
    box_w: Grid,
    box_b: Vec<f64>,
}

impl GradientBuffers {
    fn zeros(heads: &HeadParameters) -> Self {
        GradientBuffers {
            coarse_w: Grid::zeros(heads.coarse_w.rows(), heads.coarse_w.cols()),
            coarse_b: vec![0.0; heads.coarse_b.len()],
            fine_w: Grid::zeros(heads.fine_w.rows(), heads.fine_w.cols()),
            fine_b: vec![0.0; heads.fine_b.len()],
            box_w: Grid::zeros(heads.box_w.rows(), heads.box_w.cols()),
            box_b: vec![0.0; heads.box_b.len()],
        }
    }

    /// Accumulates `features^T * grad_rows` into a weight gradient and the
    /// column sums into the bias gradient.
    fn accumulate(
        w: &mut Grid,
        b: &mut [f64],
        features: &Grid,
        grad_rows: &Grid,
        scale: f64,
    ) -> Result<()> {
        let mut gw = features.matmul_t_left(grad_rows)?;
        gw.scale(scale);
        w.add_scaled(&gw, 1.0);
        for c in 0..grad_rows.cols() {
            let mut s = 0.0;
            for r in 0..grad_rows.rows() {
                s += grad_rows.get(r, c);
            }
            b[c] += scale * s;
        }
        Ok(())
    }

    fn apply(&self, heads: &mut HeadParameters, lr: f64) {
        heads.coarse_w.add_scaled(&self.coarse_w, -lr);
        heads.fine_w.add_scaled(&self.fine_w, -lr);
        heads.box_w.add_scaled(&self.box_w, -lr);
        for (p, g) in heads.coarse_b.iter_mut().zip(&self.coarse_b) {
            *p -= lr * g;
        }
        for (p, g) in heads.fine_b.iter_mut().zip(&self.fine_b) {
            *p -= lr * g;
        }
        for (p, g) in heads.box_b.iter_mut().zip(&self.box_b) {
            *p -= lr * g;
        }
    }
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: MetricsReport,
}

/// Trains head parameters on the dataset's train split and evaluates on its
/// test split. Deterministic under (dataset, config): identical runs produce
/// identical checkpoints and metrics.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let dim = dataset.config.dim;
    let c_f = dataset.partition.coarse().len();
    let c_w = dataset.partition.fine().len();
    let correlation = build_correlation(dataset, config)?;

    let mut heads = init_heads(dim, c_f, c_w, config.init_scale, config.seed);
    let mut coarse_bank = MemoryBank::new(c_f, dim, config.momentum, config.sharpness())?;
    let mut fine_bank = MemoryBank::new(c_w, dim, config.momentum, config.sharpness())?;

    let det_scenes = dataset.train_detection();
    let cls_scenes = dataset.train_classification();
    if det_scenes.is_empty() {
        return Err(Error::invalid("dataset", "no detection training scenes"));
    }
    if config.ablation.uses_fine_stream() && cls_scenes.is_empty() {
        return Err(Error::invalid("dataset", "no classification training scenes"));
    }

    let mut order_rng = ChaCha20Rng::seed_from_u64(config.seed ^ 0x6f72646572);
    let mut trace: Vec<EpochLoss> = Vec::with_capacity(config.epochs);
    let mut last_good: Option<Checkpoint> = None;

    for epoch in 0..config.epochs {
        let lr = config.epoch_lr(epoch);
        let mut det_order: Vec<usize> = (0..det_scenes.len()).collect();
        det_order.shuffle(&mut order_rng);
        let mut cls_order: Vec<usize> = (0..cls_scenes.len()).collect();
        cls_order.shuffle(&mut order_rng);
        let steps = if config.ablation.uses_fine_stream() {
            det_order.len().max(cls_order.len())
        } else {
            det_order.len()
        };

        let mut epoch_sum = LossBreakdown::default();
        for step in 0..steps {
            let det = det_scenes[det_order[step % det_order.len()]];
            let cls = config
                .ablation
                .uses_fine_stream()
                .then(|| cls_scenes[cls_order[step % cls_order.len()]]);

            let breakdown = train_step(
                det,
                cls,
                config,
                &correlation,
                &mut heads,
                &mut coarse_bank,
                &mut fine_bank,
                lr,
            )?;
            if !breakdown.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("non-finite loss: {breakdown:?}"),
                    last_good: last_good.map(Box::new),
                });
            }
            epoch_sum.l_cg_cls += breakdown.l_cg_cls;
            epoch_sum.l_cg_reg += breakdown.l_cg_reg;
            epoch_sum.l_fg_global += breakdown.l_fg_global;
            epoch_sum.l_fg_attention += breakdown.l_fg_attention;
            epoch_sum.l_m_w += breakdown.l_m_w;
            epoch_sum.l_m_f += breakdown.l_m_f;
        }
        let inv = 1.0 / steps as f64;
        epoch_sum.l_cg_cls *= inv;
        epoch_sum.l_cg_reg *= inv;
        epoch_sum.l_fg_global *= inv;
        epoch_sum.l_fg_attention *= inv;
        epoch_sum.l_m_w *= inv;
        epoch_sum.l_m_f *= inv;
        epoch_sum.finalize(config.mu);
        trace.push(EpochLoss {
            epoch,
            l_cg_cls: epoch_sum.l_cg_cls,
            l_cg_reg: epoch_sum.l_cg_reg,
            l_cg: epoch_sum.l_cg,
            l_fg_global: epoch_sum.l_fg_global,
            l_fg_attention: epoch_sum.l_fg_attention,
            l_fg: epoch_sum.l_fg,
            l_m_w: epoch_sum.l_m_w,
            l_m_f: epoch_sum.l_m_f,
            l_m: epoch_sum.l_m,
            total: epoch_sum.total,
        });

        last_good = Some(Checkpoint {
            config: config.clone(),
            coarse_ids: dataset.partition.coarse().to_vec(),
            fine_ids: dataset.partition.fine().to_vec(),
            heads: heads.clone(),
            coarse_bank: coarse_bank.clone(),
            fine_bank: fine_bank.clone(),
            correlation: correlation.clone(),
        });
    }

    let checkpoint = last_good.expect("at least one epoch ran");
    let mut metrics = evaluate_checkpoint(&checkpoint, &dataset.test())?;
    metrics.ablation = config.ablation.as_str().to_string();
    metrics.seed = config.seed;
    metrics.loss_trace = trace;
    Ok(TrainOutput { checkpoint, metrics })
}

/// One balanced step: a detection scene (always) and a classification scene
/// (when the ablation has a fine stream). Memory losses are evaluated against
/// the bank state at step entry; labelled updates land afterwards.
#[allow(clippy::too_many_arguments)]
fn train_step(
    det: &SyntheticScene,
    cls: Option<&SyntheticScene>,
    config: &TrainConfig,
    correlation: &CorrelationMatrix,
    heads: &mut HeadParameters,
    coarse_bank: &mut MemoryBank,
    fine_bank: &mut MemoryBank,
    lr: f64,
) -> Result<LossBreakdown> {
    let c_f = heads.coarse_classes();
    let mut grads = GradientBuffers::zeros(heads);
    let mut breakdown = LossBreakdown::default();
    let mut batch = MemoryBatch::default();

    // ---- detection scene: coarse classification + box regression ----
    let det_features = det.feature_grid();
    let det_coarse_logits =
        HeadParameters::linear(&det_features, &heads.coarse_w, &heads.coarse_b)?;
    let mut labels = Vec::with_capacity(det.proposals.len());
    let mut positive_rows = Vec::new();
    let mut box_targets = Vec::new();
    for p in 0..det.proposals.len() {
        match det.proposal_gt_match(p, config.iou_positive) {
            Some(gi) => {
                labels.push(det.gts[gi].coarse);
                positive_rows.push(p);
                box_targets.push(box_deltas(&det.proposals[p].bbox, &det.gts[gi].bbox));
            }
            None => labels.push(c_f),
        }
    }
    let box_logits = HeadParameters::linear(&det_features, &heads.box_w, &heads.box_b)?;
    let box_pred: Vec<[f64; 4]> = positive_rows
        .iter()
        .map(|&p| {
            let r = box_logits.row(p);
            [r[0], r[1], r[2], r[3]]
        })
        .collect();
    let det_loss = detection_loss(&det_coarse_logits, &labels, &box_pred, &box_targets)?;
    breakdown.l_cg_cls = det_loss.cls;
    breakdown.l_cg_reg = det_loss.reg;
    GradientBuffers::accumulate(
        &mut grads.coarse_w,
        &mut grads.coarse_b,
        &det_features,
        &det_loss.grad_logits,
        1.0,
    )?;
    if !positive_rows.is_empty() {
        let mut box_grad_rows = Grid::zeros(det.proposals.len(), 4);
        for (i, &p) in positive_rows.iter().enumerate() {
            for k in 0..4 {
                box_grad_rows.set(p, k, det_loss.grad_box[i][k]);
            }
        }
        GradientBuffers::accumulate(
            &mut grads.box_w,
            &mut grads.box_b,
            &det_features,
            &box_grad_rows,
            1.0,
        )?;
    }

    // Labelled proposal observations for the coarse bank (foreground only).
    if config.ablation.uses_proposal_memory() {
        for &p in &positive_rows {
            batch.proposals.push(ProposalObs {
                feature: det.proposals[p].feature.clone(),
                prediction: softmax_foreground(det_coarse_logits.row(p), c_f),
                label: Some(labels[p]),
            });
        }
    }

    // Unlabelled image observation for the fine bank: FA-pooled fine
    // predictions on the detection scene.
    let mut det_fine_logits = None;
    let mut det_image_entries: Vec<(Vec<usize>, usize)> = Vec::new(); // (selected rows, batch index)
    if config.ablation.uses_image_memory() {
        let logits = HeadParameters::linear(&det_features, &heads.fine_w, &heads.fine_b)?;
        let mut probs = Grid::zeros(logits.rows(), logits.cols());
        for p in 0..logits.rows() {
            for (c, v) in softmax(logits.row(p)).into_iter().enumerate() {
                probs.set(p, c, v);
            }
        }
        for class in argmax_present_classes(&probs) {
            if let Some(entry) = fa_pool(&det_features, &probs, class) {
                let selected: Vec<usize> = (0..probs.rows())
                    .filter(|&p| crate::numeric::argmax(probs.row(p)) == Some(class))
                    .collect();
                det_image_entries.push((selected, batch.images.len()));
                batch.images.push(ImageObs {
                    feature: entry.feature,
                    prediction: entry.prediction,
                    label: None,
                });
            }
        }
        det_fine_logits = Some(logits);
    }

    // ---- classification scene: weakly-supervised fine stream ----
    let mut cls_data = None;
    if let Some(cls) = cls {
        let features = cls.feature_grid();
        let fine_logits = HeadParameters::linear(&features, &heads.fine_w, &heads.fine_b)?;
        let sw = ScoreMap::new(fine_logits.clone(), Scale::Logits)?;
        let present = cls.fine_labels();
        let labels_multi: Vec<bool> = (0..heads.fine_classes())
            .map(|j| present.contains(&j))
            .collect();

        let coarse_logits = HeadParameters::linear(&features, &heads.coarse_w, &heads.coarse_b)?;
        let (aw, lambda_eff) = if config.ablation.uses_attention() {
            let shat = class_softmax_with(
                &ScoreMap::new(coarse_logits.clone(), Scale::Logits)?,
                config.background_mode,
            )?;
            let af = proposal_normalize(&shat)?;
            (coarse_to_fine_attention(&af, correlation)?, config.lambda)
        } else {
            (
                AttentionMap::new(
                    Grid::from_flat(
                        features.rows(),
                        heads.fine_classes(),
                        vec![1.0; features.rows() * heads.fine_classes()],
                    )?,
                    crate::attention::AttentionLevel::Fine,
                )?,
                0.0,
            )
        };
        let weakly = weakly_loss_top_k(&sw, &aw, &labels_multi, lambda_eff, config.top_k)?;
        breakdown.l_fg_global = weakly.global;
        breakdown.l_fg_attention = weakly.attention;
        GradientBuffers::accumulate(
            &mut grads.fine_w,
            &mut grads.fine_b,
            &features,
            &weakly.grad_scores,
            1.0,
        )?;

        // Unlabelled proposal observations for the coarse bank.
        if config.ablation.uses_proposal_memory() {
            for p in 0..cls.proposals.len() {
                batch.proposals.push(ProposalObs {
                    feature: cls.proposals[p].feature.clone(),
                    prediction: softmax_foreground(coarse_logits.row(p), c_f),
                    label: None,
                });
            }
        }

        // Labelled image observations for the fine bank: FA pooling per
        // positive image label.
        if config.ablation.uses_image_memory() {
            let mut probs = Grid::zeros(fine_logits.rows(), fine_logits.cols());
            for p in 0..fine_logits.rows() {
                for (c, v) in softmax(fine_logits.row(p)).into_iter().enumerate() {
                    probs.set(p, c, v);
                }
            }
            for &class in &present {
                if let Some(entry) = fa_pool(&features, &probs, class) {
                    batch.images.push(ImageObs {
                        feature: entry.feature,
                        prediction: entry.prediction,
                        label: Some(class),
                    });
                }
            }
        }
        cls_data = Some((features, coarse_logits));
    }

    // ---- dual-level memory ----
    if config.ablation.uses_proposal_memory() || config.ablation.uses_image_memory() {
        let n_labeled_proposals = batch
            .proposals
            .iter()
            .take_while(|o| o.label.is_some())
            .count();
        let outcome = dual_memory_step(coarse_bank, fine_bank, &batch)?;
        breakdown.l_m_w = outcome.l_m_w;
        breakdown.l_m_f = outcome.l_m_f;

        // Gradients of the proposal-level loss flow into the coarse head
        // through the foreground softmax on the classification scene.
        if !outcome.proposal_terms.is_empty() {
            let (features, coarse_logits) = cls_data
                .as_ref()
                .expect("unlabelled proposals come from the classification scene");
            let share = config.mu / outcome.proposal_terms.len() as f64;
            let mut rows = Grid::zeros(features.rows(), heads.coarse_w.cols());
            for (idx, phat) in &outcome.proposal_terms {
                let row = idx - n_labeled_proposals;
                let z: Vec<f64> = coarse_logits.row(row)[..c_f].to_vec();
                let (_, g) = memory_loss_grad_logits(&z, phat)?;
                for (c, gv) in g.into_iter().enumerate() {
                    rows.set(row, c, gv);
                }
            }
            GradientBuffers::accumulate(
                &mut grads.coarse_w,
                &mut grads.coarse_b,
                features,
                &rows,
                share,
            )?;
        }

        // Gradients of the image-level loss flow into the fine head through
        // the FA-pooled softmax rows on the detection scene.
        if !outcome.image_terms.is_empty() {
            let logits = det_fine_logits
                .as_ref()
                .expect("image memory requires detection fine logits");
            let share = config.mu / outcome.image_terms.len() as f64;
            let mut rows = Grid::zeros(det_features.rows(), heads.fine_w.cols());
            for (idx, ihat) in &outcome.image_terms {
                let (selected, _) = det_image_entries
                    .iter()
                    .find(|(_, bi)| bi == idx)
                    .expect("image term indexes a detection entry");
                let sel_logits: Vec<Vec<f64>> =
                    selected.iter().map(|&p| logits.row(p).to_vec()).collect();
                let (_, gs) = memory_loss_image_grad_logits(&sel_logits, ihat)?;
                for (&p, g) in selected.iter().zip(gs) {
                    for (c, gv) in g.into_iter().enumerate() {
                        let v = rows.get(p, c) + gv;
                        rows.set(p, c, v);
                    }
                }
            }
            GradientBuffers::accumulate(
                &mut grads.fine_w,
                &mut grads.fine_b,
                &det_features,
                &rows,
                share,
            )?;
        }
    }

    breakdown.finalize(config.mu);
    grads.apply(heads, lr);
    Ok(breakdown)
}

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

pub struct SceneDetections {
    pub coarse: Vec<Detection>,
    pub fine: Vec<Detection>,
}

struct ScoredScene {
    /// Full-softmax coarse probabilities (foreground columns only).
    coarse_probs: Grid,
    /// Re-ranked (when the ablation uses attention) fine probabilities.
    fine_scores: Grid,
    decoded_boxes: Vec<BBox>,
    proposal_boxes: Vec<BBox>,
}

fn score_scene(checkpoint: &Checkpoint, scene: &SyntheticScene) -> Result<ScoredScene> {
    let c_f = checkpoint.heads.coarse_classes();
    if scene
        .proposals
        .first()
        .is_some_and(|p| p.feature.len() != checkpoint.heads.dim())
    {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint dim {} vs scene feature dim {}",
            checkpoint.heads.dim(),
            scene.proposals[0].feature.len()
        )));
    }
    let features = scene.feature_grid();
    let coarse_logits =
        HeadParameters::linear(&features, &checkpoint.heads.coarse_w, &checkpoint.heads.coarse_b)?;
    let fine_logits =
        HeadParameters::linear(&features, &checkpoint.heads.fine_w, &checkpoint.heads.fine_b)?;
    let box_logits =
        HeadParameters::linear(&features, &checkpoint.heads.box_w, &checkpoint.heads.box_b)?;

    let n = scene.proposals.len();
    let mut coarse_probs = Grid::zeros(n, c_f);
    for p in 0..n {
        let full = softmax(coarse_logits.row(p));
        for c in 0..c_f {
            coarse_probs.set(p, c, full[c]);
        }
    }
    let mut fine_probs = Grid::zeros(n, checkpoint.heads.fine_classes());
    for p in 0..n {
        for (c, v) in softmax(fine_logits.row(p)).into_iter().enumerate() {
            fine_probs.set(p, c, v);
        }
    }
    let fine_scores = if checkpoint.config.ablation.uses_attention() && n > 0 {
        let shat = class_softmax_with(
            &ScoreMap::new(coarse_logits.clone(), Scale::Logits)?,
            checkpoint.config.background_mode,
        )?;
        let af = proposal_normalize(&shat)?;
        let aw = coarse_to_fine_attention(&af, &checkpoint.correlation)?;
        rerank(&ScoreMap::new(fine_probs, Scale::Probabilities)?, &aw)?
            .values()
            .clone()
    } else {
        fine_probs
    };

    let decoded_boxes: Vec<BBox> = (0..n)
        .map(|p| {
            apply_deltas(
                &scene.proposals[p].bbox,
                box_logits.row(p),
                (scene.width, scene.height),
            )
        })
        .collect();
    Ok(ScoredScene {
        coarse_probs,
        fine_scores,
        decoded_boxes,
        proposal_boxes: scene.proposals.iter().map(|p| p.bbox).collect(),
    })
}

/// Inference for one scene: coarse detections use regressed boxes, fine
/// detections reuse the proposal boxes (the fine stream has no box head);
/// both lists pass through soft-NMS.
pub fn infer(checkpoint: &Checkpoint, scene: &SyntheticScene) -> Result<SceneDetections> {
    if scene.proposals.is_empty() {
        return Ok(SceneDetections {
            coarse: Vec::new(),
            fine: Vec::new(),
        });
    }
    let scored = score_scene(checkpoint, scene)?;
    let floor = checkpoint.config.score_floor;
    let mut coarse = Vec::new();
    for p in 0..scored.coarse_probs.rows() {
        for c in 0..scored.coarse_probs.cols() {
            let s = scored.coarse_probs.get(p, c);
            if s >= floor {
                coarse.push(Detection::new(scored.decoded_boxes[p], c, s.min(1.0))?);
            }
        }
    }
    let mut fine = Vec::new();
    for p in 0..scored.fine_scores.rows() {
        for c in 0..scored.fine_scores.cols() {
            let s = scored.fine_scores.get(p, c).clamp(0.0, 1.0);
            if s >= floor {
                fine.push(Detection::new(scored.proposal_boxes[p], c, s)?);
            }
        }
    }
    Ok(SceneDetections {
        coarse: soft_nms(&coarse, checkpoint.config.soft_nms_sigma, floor)?,
        fine: soft_nms(&fine, checkpoint.config.soft_nms_sigma, floor)?,
    })
}

/// Runs inference over the scenes and assembles mAP@0.5, mAP@0.5:0.95 and
/// CorLoc at both levels. Loss trace, ablation tag and seed are left for the
/// caller to fill.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    scenes: &[&SyntheticScene],
) -> Result<MetricsReport> {
    let c_f = checkpoint.heads.coarse_classes();
    let c_w = checkpoint.heads.fine_classes();
    let mut coarse_dets: Vec<Vec<Detection>> = Vec::with_capacity(scenes.len());
    let mut fine_dets: Vec<Vec<Detection>> = Vec::with_capacity(scenes.len());
    let mut coarse_gts: Vec<Vec<GroundTruthBox>> = Vec::with_capacity(scenes.len());
    let mut fine_gts: Vec<Vec<GroundTruthBox>> = Vec::with_capacity(scenes.len());
    let mut coarse_pairs: Vec<CorlocPair> = Vec::new();
    let mut fine_pairs: Vec<CorlocPair> = Vec::new();

    for (img, scene) in scenes.iter().enumerate() {
        let dets = infer(checkpoint, scene)?;
        coarse_dets.push(dets.coarse);
        fine_dets.push(dets.fine);
        coarse_gts.push(
            scene
                .gts
                .iter()
                .map(|g| GroundTruthBox {
                    bbox: g.bbox,
                    class: g.coarse,
                })
                .collect(),
        );
        fine_gts.push(
            scene
                .gts
                .iter()
                .map(|g| GroundTruthBox {
                    bbox: g.bbox,
                    class: g.fine,
                })
                .collect(),
        );

        // CorLoc uses the raw (pre-NMS) per-class top proposal.
        if !scene.proposals.is_empty() {
            let scored = score_scene(checkpoint, scene)?;
            let coarse_present: std::collections::BTreeSet<usize> =
                scene.gts.iter().map(|g| g.coarse).collect();
            for &class in &coarse_present {
                let col = scored.coarse_probs.col(class);
                let top = crate::numeric::argmax(&col).map(|p| scored.proposal_boxes[p]);
                coarse_pairs.push(CorlocPair {
                    image: img,
                    class,
                    top_box: top,
                });
            }
            for &class in &scene.fine_labels() {
                let col = scored.fine_scores.col(class);
                let top = crate::numeric::argmax(&col).map(|p| scored.proposal_boxes[p]);
                fine_pairs.push(CorlocPair {
                    image: img,
                    class,
                    top_box: top,
                });
            }
        } else {
            for g in &scene.gts {
                coarse_pairs.push(CorlocPair { image: img, class: g.coarse, top_box: None });
                fine_pairs.push(CorlocPair { image: img, class: g.fine, top_box: None });
            }
        }
    }

    let interp = checkpoint.config.interpolation;
    let ap50_cg = ap_per_class(&coarse_dets, &coarse_gts, c_f, IOU_MATCH_THRESHOLD, interp)?;
    let ap50_fg = ap_per_class(&fine_dets, &fine_gts, c_w, IOU_MATCH_THRESHOLD, interp)?;
    let mut map5095_cg = 0.0;
    let mut map5095_fg = 0.0;
    let thresholds = map_5095_thresholds();
    for &t in &thresholds {
        map5095_cg += mean_ap(&ap_per_class(&coarse_dets, &coarse_gts, c_f, t, interp)?);
        map5095_fg += mean_ap(&ap_per_class(&fine_dets, &fine_gts, c_w, t, interp)?);
    }
    map5095_cg /= thresholds.len() as f64;
    map5095_fg /= thresholds.len() as f64;

    Ok(MetricsReport {
        ablation: checkpoint.config.ablation.as_str().to_string(),
        seed: checkpoint.config.seed,
        map50_cg: mean_ap(&ap50_cg),
        map50_fg: mean_ap(&ap50_fg),
        map5095_cg,
        map5095_fg,
        corloc_cg: corloc(&coarse_pairs, &coarse_gts),
        corloc_fg: corloc(&fine_pairs, &fine_gts),
        ap50_cg: checkpoint
            .coarse_ids
            .iter()
            .cloned()
            .zip(ap50_cg)
            .collect(),
        ap50_fg: checkpoint.fine_ids.iter().cloned().zip(ap50_fg).collect(),
        loss_trace: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

fn write_floats(out: &mut String, prefix: &str, values: &[f64]) {
    out.push_str(prefix);
    for v in values {
        let _ = write!(out, " {v}");
    }
    out.push('\n');
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let cfg = &self.config;
        let mut out = String::from("CKPT 1\n[train]\n");
        let _ = writeln!(out, "ablation = {}", cfg.ablation.as_str());
        let _ = writeln!(out, "correlation = {}", cfg.correlation.as_str());
        let _ = writeln!(out, "epochs = {}", cfg.epochs);
        let _ = writeln!(out, "lr = {}", cfg.lr);
        let _ = writeln!(out, "lambda = {}", cfg.lambda);
        let _ = writeln!(out, "mu = {}", cfg.mu);
        let _ = writeln!(out, "momentum = {}", cfg.momentum);
        let _ = writeln!(
            out,
            "gamma = {}",
            cfg.gamma.map_or("auto".to_string(), |g| g.to_string())
        );
        let _ = writeln!(out, "top_k = {}", cfg.top_k);
        let _ = writeln!(
            out,
            "attention_background = {}",
            match cfg.background_mode {
                BackgroundMode::ExcludeFromDenominator => "exclude",
                BackgroundMode::IncludeInDenominator => "include",
            }
        );
        let _ = writeln!(
            out,
            "beta = {}",
            cfg.beta.map_or("auto".to_string(), |b| b.to_string())
        );
        let _ = writeln!(out, "theta_factor = {}", cfg.theta_factor);
        let _ = writeln!(out, "augment_nearest = {}", cfg.augment_nearest);
        let _ = writeln!(out, "init_scale = {}", cfg.init_scale);
        let _ = writeln!(out, "iou_positive = {}", cfg.iou_positive);
        let _ = writeln!(out, "soft_nms_sigma = {}", cfg.soft_nms_sigma);
        let _ = writeln!(out, "score_floor = {}", cfg.score_floor);
        let _ = writeln!(
            out,
            "map_interpolation = {}",
            match cfg.interpolation {
                Interpolation::AllPoint => "all-point",
                Interpolation::ElevenPoint => "11-point",
            }
        );
        let _ = writeln!(out, "seed = {}", cfg.seed);

        out.push_str("[classes]\n");
        out.push_str("coarse");
        for id in &self.coarse_ids {
            let _ = write!(out, " {id}");
        }
        out.push_str("\nfine");
        for id in &self.fine_ids {
            let _ = write!(out, " {id}");
        }
        out.push('\n');

        out.push_str("[correlation]\n");
        out.push_str(&self.correlation.to_text());

        for (name, w, b) in [
            ("coarse", &self.heads.coarse_w, &self.heads.coarse_b),
            ("fine", &self.heads.fine_w, &self.heads.fine_b),
            ("box", &self.heads.box_w, &self.heads.box_b),
        ] {
            let _ = writeln!(out, "[head.{name}]");
            for r in 0..w.rows() {
                write_floats(&mut out, "w", w.row(r));
            }
            write_floats(&mut out, "b", b);
        }

        for (name, bank) in [("coarse", &self.coarse_bank), ("fine", &self.fine_bank)] {
            let _ = writeln!(out, "[memory.{name}]");
            let _ = writeln!(out, "momentum = {}", bank.momentum());
            let _ = writeln!(
                out,
                "sharpness = {}",
                match bank.sharpness() {
                    Sharpness::Auto => "auto".to_string(),
                    Sharpness::Fixed(g) => g.to_string(),
                }
            );
            for c in 0..bank.classes() {
                let mut line = format!("class {c} {}", bank.count(c));
                for v in bank.key(c) {
                    let _ = write!(line, " {v}");
                }
                line.push_str(" |");
                for v in bank.value(c) {
                    let _ = write!(line, " {v}");
                }
                out.push_str(&line);
                out.push('\n');
            }
        }
        out
    }
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines().enumerate().peekable();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty checkpoint"))?;
    if header.trim() != "CKPT 1" {
        return Err(Error::parse(1, "expected `CKPT 1` header"));
    }

    let mut config = TrainConfig::default();
    let mut coarse_ids = Vec::new();
    let mut fine_ids = Vec::new();
    let mut correlation_text = String::new();
    let mut head_rows: std::collections::BTreeMap<&'static str, (Vec<Vec<f64>>, Vec<f64>)> =
        Default::default();
    let mut bank_data: std::collections::BTreeMap<
        &'static str,
        (f64, Sharpness, Vec<(u64, Vec<f64>, Vec<f64>)>),
    > = Default::default();

    let mut section = String::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('[') {
            section = trimmed.to_string();
            match section.as_str() {
                "[train]" | "[classes]" | "[correlation]" | "[head.coarse]" | "[head.fine]"
                | "[head.box]" | "[memory.coarse]" | "[memory.fine]" => continue,
                other => return Err(Error::parse(line, format!("unknown section `{other}`"))),
            }
        }
        match section.as_str() {
            "[train]" => {
                let (k, v) = trimmed
                    .split_once('=')
                    .ok_or_else(|| Error::parse(line, "expected `key = value`"))?;
                let (k, v) = (k.trim(), v.trim());
                parse_train_kv(&mut config, k, v, line)?;
            }
            "[classes]" => {
                let mut tok = trimmed.split_whitespace();
                match tok.next() {
                    Some("coarse") => coarse_ids = tok.map(str::to_string).collect(),
                    Some("fine") => fine_ids = tok.map(str::to_string).collect(),
                    other => {
                        return Err(Error::parse(line, format!("unknown class list {other:?}")))
                    }
                }
            }
            "[correlation]" => {
                correlation_text.push_str(trimmed);
                correlation_text.push('\n');
            }
            "[head.coarse]" | "[head.fine]" | "[head.box]" => {
                let key: &'static str = match section.as_str() {
                    "[head.coarse]" => "coarse",
                    "[head.fine]" => "fine",
                    _ => "box",
                };
                let entry = head_rows.entry(key).or_default();
                let mut tok = trimmed.split_whitespace();
                let tag = tok.next();
                let vals: Vec<f64> = tok
                    .map(|t| {
                        t.parse()
                            .map_err(|_| Error::parse(line, format!("bad number `{t}`")))
                    })
                    .collect::<Result<_>>()?;
                match tag {
                    Some("w") => entry.0.push(vals),
                    Some("b") => entry.1 = vals,
                    other => return Err(Error::parse(line, format!("unknown head row {other:?}"))),
                }
            }
            "[memory.coarse]" | "[memory.fine]" => {
                let key: &'static str = if section == "[memory.coarse]" {
                    "coarse"
                } else {
                    "fine"
                };
                let entry = bank_data
                    .entry(key)
                    .or_insert((DEFAULT_MOMENTUM, Sharpness::Auto, Vec::new()));
                if let Some((k, v)) = trimmed.split_once('=') {
                    match k.trim() {
                        "momentum" => {
                            entry.0 = v
                                .trim()
                                .parse()
                                .map_err(|_| Error::parse(line, "bad momentum"))?
                        }
                        "sharpness" => {
                            entry.1 = if v.trim() == "auto" {
                                Sharpness::Auto
                            } else {
                                Sharpness::Fixed(
                                    v.trim()
                                        .parse()
                                        .map_err(|_| Error::parse(line, "bad sharpness"))?,
                                )
                            }
                        }
                        other => {
                            return Err(Error::parse(line, format!("unknown bank key `{other}`")))
                        }
                    }
                    continue;
                }
                let (head, tail) = trimmed
                    .split_once('|')
                    .ok_or_else(|| Error::parse(line, "bank class line needs `|`"))?;
                let mut tok = head.split_whitespace();
                if tok.next() != Some("class") {
                    return Err(Error::parse(line, "expected `class` line"));
                }
                let _index: usize = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::parse(line, "bad class index"))?;
                let count: u64 = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::parse(line, "bad count"))?;
                let key_vals: Vec<f64> = tok
                    .map(|t| {
                        t.parse()
                            .map_err(|_| Error::parse(line, format!("bad number `{t}`")))
                    })
                    .collect::<Result<_>>()?;
                let value_vals: Vec<f64> = tail
                    .split_whitespace()
                    .map(|t| {
                        t.parse()
                            .map_err(|_| Error::parse(line, format!("bad number `{t}`")))
                    })
                    .collect::<Result<_>>()?;
                entry.2.push((count, key_vals, value_vals));
            }
            _ => return Err(Error::parse(line, "content before any section")),
        }
    }

    let correlation = parse_correlation(&correlation_text)?;
    let build_grid = |rows: Vec<Vec<f64>>| -> Result<Grid> { Grid::from_rows(rows) };
    let (cw_rows, cb) = head_rows
        .remove("coarse")
        .ok_or_else(|| Error::parse(0, "missing [head.coarse]"))?;
    let (fw_rows, fb) = head_rows
        .remove("fine")
        .ok_or_else(|| Error::parse(0, "missing [head.fine]"))?;
    let (bw_rows, bb) = head_rows
        .remove("box")
        .ok_or_else(|| Error::parse(0, "missing [head.box]"))?;
    let heads = HeadParameters {
        coarse_w: build_grid(cw_rows)?,
        coarse_b: cb,
        fine_w: build_grid(fw_rows)?,
        fine_b: fb,
        box_w: build_grid(bw_rows)?,
        box_b: bb,
    };

    let rebuild_bank = |data: Option<(f64, Sharpness, Vec<(u64, Vec<f64>, Vec<f64>)>)>,
                        name: &str|
     -> Result<MemoryBank> {
        let (momentum, sharpness, rows) =
            data.ok_or_else(|| Error::parse(0, format!("missing [memory.{name}]")))?;
        if rows.is_empty() {
            return Err(Error::parse(0, format!("[memory.{name}] has no classes")));
        }
        let dim = rows[0].1.len();
        let mut bank = MemoryBank::new(rows.len(), dim, momentum, sharpness)?;
        bank.restore(&rows)?;
        Ok(bank)
    };
    let coarse_bank = rebuild_bank(bank_data.remove("coarse"), "coarse")?;
    let fine_bank = rebuild_bank(bank_data.remove("fine"), "fine")?;

    if heads.coarse_classes() != coarse_ids.len() || heads.fine_classes() != fine_ids.len() {
        return Err(Error::CheckpointMismatch(
            "head shapes do not match class lists".into(),
        ));
    }
    Ok(Checkpoint {
        config,
        coarse_ids,
        fine_ids,
        heads,
        coarse_bank,
        fine_bank,
        correlation,
    })
}

fn parse_train_kv(config: &mut TrainConfig, k: &str, v: &str, line: usize) -> Result<()> {
    fn num<T: std::str::FromStr>(v: &str, line: usize) -> Result<T> {
        v.parse()
            .map_err(|_| Error::parse(line, format!("bad value `{v}`")))
    }
    match k {
        "ablation" => {
            config.ablation = Ablation::parse(v)
                .ok_or_else(|| Error::parse(line, format!("unknown ablation `{v}`")))?
        }
        "correlation" => {
            config.correlation = CorrelationKind::parse(v)
                .ok_or_else(|| Error::parse(line, format!("unknown correlation kind `{v}`")))?
        }
        "epochs" => config.epochs = num(v, line)?,
        "lr" => config.lr = num(v, line)?,
        "lambda" => config.lambda = num(v, line)?,
        "mu" => config.mu = num(v, line)?,
        "momentum" => config.momentum = num(v, line)?,
        "gamma" => config.gamma = if v == "auto" { None } else { Some(num(v, line)?) },
        "top_k" => config.top_k = num(v, line)?,
        "attention_background" => {
            config.background_mode = match v {
                "exclude" => BackgroundMode::ExcludeFromDenominator,
                "include" => BackgroundMode::IncludeInDenominator,
                other => {
                    return Err(Error::parse(line, format!("unknown background mode `{other}`")))
                }
            }
        }
        "beta" => config.beta = if v == "auto" { None } else { Some(num(v, line)?) },
        "theta_factor" => config.theta_factor = num(v, line)?,
        "augment_nearest" => config.augment_nearest = num(v, line)?,
        "init_scale" => config.init_scale = num(v, line)?,
        "iou_positive" => config.iou_positive = num(v, line)?,
        "soft_nms_sigma" => config.soft_nms_sigma = num(v, line)?,
        "score_floor" => config.score_floor = num(v, line)?,
        "map_interpolation" => {
            config.interpolation = match v {
                "all-point" => Interpolation::AllPoint,
                "11-point" => Interpolation::ElevenPoint,
                other => {
                    return Err(Error::parse(line, format!("unknown interpolation `{other}`")))
                }
            }
        }
        "seed" => config.seed = num(v, line)?,
        other => return Err(Error::parse(line, format!("unknown train key `{other}`"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, GeneratorConfig};

    fn tiny_dataset() -> Dataset {
        let cfg = GeneratorConfig {
            coarse_classes: 2,
            fine_per_coarse: 2,
            dim: 8,
            train_detection_scenes: 12,
            train_classification_scenes: 12,
            test_scenes: 6,
            ..GeneratorConfig::default()
        };
        generate_dataset(&cfg, 5).unwrap()
    }

    fn tiny_train_config(ablation: Ablation) -> TrainConfig {
        TrainConfig {
            ablation,
            epochs: 2,
            lr: 0.02,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_at_init() {
        let dataset = tiny_dataset();
        let mut config = tiny_train_config(Ablation::Attention);
        config.lr = 0.0;
        let out = train(&dataset, &config).unwrap();
        let init = init_heads(
            dataset.config.dim,
            dataset.partition.coarse().len(),
            dataset.partition.fine().len(),
            config.init_scale,
            config.seed,
        );
        assert_eq!(out.checkpoint.heads, init);
        // Metrics equal a fresh evaluation of the untouched initial heads.
        let fresh = evaluate_checkpoint(&out.checkpoint, &dataset.test()).unwrap();
        assert_eq!(out.metrics.map50_fg, fresh.map50_fg);
        assert_eq!(out.metrics.map50_cg, fresh.map50_cg);
    }

    #[test]
    fn training_is_deterministic() {
        let dataset = tiny_dataset();
        let config = tiny_train_config(Ablation::DlmFa);
        let a = train(&dataset, &config).unwrap();
        let b = train(&dataset, &config).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn all_ablations_run_and_losses_are_finite() {
        let dataset = tiny_dataset();
        for ablation in Ablation::ladder() {
            let out = train(&dataset, &tiny_train_config(ablation)).unwrap();
            for e in &out.metrics.loss_trace {
                assert!(e.total.is_finite(), "{ablation:?} produced {e:?}");
            }
            if !ablation.uses_fine_stream() {
                assert!(out.metrics.loss_trace.iter().all(|e| e.l_fg == 0.0));
            }
            if !ablation.uses_proposal_memory() {
                assert!(out.metrics.loss_trace.iter().all(|e| e.l_m_w == 0.0));
            }
            if !ablation.uses_image_memory() {
                assert!(out.metrics.loss_trace.iter().all(|e| e.l_m_f == 0.0));
            }
        }
    }

    #[test]
    fn naive_loss_is_non_increasing_on_clean_data() {
        let cfg = GeneratorConfig {
            coarse_classes: 2,
            fine_per_coarse: 2,
            dim: 8,
            train_detection_scenes: 30,
            train_classification_scenes: 30,
            test_scenes: 4,
            jitter: 0.0,
            feature_noise: 0.0,
            ..GeneratorConfig::default()
        };
        let dataset = generate_dataset(&cfg, 9).unwrap();
        let config = TrainConfig {
            ablation: Ablation::Naive,
            epochs: 4,
            lr: 0.02,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&dataset, &config).unwrap();
        let totals: Vec<f64> = out.metrics.loss_trace.iter().map(|e| e.total).collect();
        for w in totals.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "loss increased: {totals:?}");
        }
    }

    #[test]
    fn infer_empty_scene_is_empty() {
        let dataset = tiny_dataset();
        let out = train(&dataset, &tiny_train_config(Ablation::Attention)).unwrap();
        let empty = SyntheticScene {
            width: 512.0,
            height: 512.0,
            split: crate::sim::Split::Test,
            source: crate::sim::SourceTag::Detection,
            gts: Vec::new(),
            proposals: Vec::new(),
        };
        let dets = infer(&out.checkpoint, &empty).unwrap();
        assert!(dets.coarse.is_empty());
        assert!(dets.fine.is_empty());
    }

    #[test]
    fn checkpoint_text_roundtrip() {
        let dataset = tiny_dataset();
        let out = train(&dataset, &tiny_train_config(Ablation::DlmFa)).unwrap();
        let text = out.checkpoint.to_text();
        let re = parse_checkpoint(&text).unwrap();
        assert_eq!(out.checkpoint, re);
        assert_eq!(re.to_text(), text);
    }

    #[test]
    fn checkpoint_parse_rejects_garbage() {
        assert!(parse_checkpoint("").is_err());
        assert!(parse_checkpoint("CKPT 2\n").is_err());
        assert!(parse_checkpoint("CKPT 1\n[bogus]\n").is_err());
    }

    #[test]
    fn checkpoint_dim_mismatch_detected() {
        let dataset = tiny_dataset();
        let out = train(&dataset, &tiny_train_config(Ablation::Naive)).unwrap();
        let other = generate_dataset(
            &GeneratorConfig {
                coarse_classes: 2,
                fine_per_coarse: 2,
                dim: 16,
                train_detection_scenes: 1,
                train_classification_scenes: 1,
                test_scenes: 1,
                ..GeneratorConfig::default()
            },
            1,
        )
        .unwrap();
        let scene = other.test()[0];
        assert!(matches!(
            infer(&out.checkpoint, scene),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn epoch_lr_schedule() {
        let config = TrainConfig {
            epochs: 9,
            lr: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(config.epoch_lr(0), 0.1);
        assert_eq!(config.epoch_lr(2), 0.1);
        assert!((config.epoch_lr(3) - 0.01).abs() < 1e-15);
        assert!((config.epoch_lr(6) - 0.001).abs() < 1e-15);
    }
}
