//! Detection evaluation: IoU, per-class soft-NMS with Gaussian score decay,
//! average precision over interpolated precision-recall curves, and CorLoc.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default Gaussian decay parameter for soft-NMS.
pub const DEFAULT_SOFT_NMS_SIGMA: f64 = 0.55;
/// Detections decayed below this score are dropped.
pub const DEFAULT_SCORE_FLOOR: f64 = 1e-3;
/// IoU threshold shared by mAP@0.5 and CorLoc.
pub const IOU_MATCH_THRESHOLD: f64 = 0.5;

/// Axis-aligned box, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(
                "bbox",
                format!("degenerate box ({x1}, {y1}, {x2}, {y2})"),
            ));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class: usize, score: f64) -> Result<Self> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid("score", format!("must be in [0, 1], got {score}")));
        }
        Ok(Detection { bbox, class, score })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub class: usize,
}

/// Per-class iterative soft-NMS: repeatedly select the highest-scoring
/// remaining box (ties to the lowest input index), emit it, decay every other
/// remaining score of the same class by `exp(-iou^2 / sigma)`, and drop boxes
/// whose score falls below `score_floor`. Output is ordered by class, then by
/// selection order.
pub fn soft_nms(dets: &[Detection], sigma: f64, score_floor: f64) -> Result<Vec<Detection>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma", format!("must be positive, got {sigma}")));
    }
    let mut classes: Vec<usize> = dets.iter().map(|d| d.class).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut out = Vec::with_capacity(dets.len());
    for class in classes {
        let mut remaining: Vec<(usize, Detection)> = dets
            .iter()
            .enumerate()
            .filter(|(_, d)| d.class == class)
            .map(|(i, d)| (i, *d))
            .collect();
        while !remaining.is_empty() {
            let mut best = 0usize;
            for i in 1..remaining.len() {
                if remaining[i].1.score > remaining[best].1.score {
                    best = i;
                }
            }
            let (_, selected) = remaining.remove(best);
            if selected.score < score_floor {
                break;
            }
            out.push(selected);
            for (_, d) in remaining.iter_mut() {
                let o = iou(&selected.bbox, &d.bbox);
                d.score *= (-(o * o) / sigma).exp();
            }
            remaining.retain(|(_, d)| d.score >= score_floor);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    /// Area under the full precision envelope.
    #[default]
    AllPoint,
    /// Classic 11-point interpolation at recall 0, 0.1, …, 1.
    ElevenPoint,
}

/// Average precision per class at one IoU threshold; `None` for classes
/// without ground truth. Detections are collated across images, sorted by
/// score (deterministic tie-breaks on image index and geometry), and
/// greedy-matched to the unmatched ground-truth box of the same class with
/// the highest IoU at or above the threshold.
pub fn ap_per_class(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<GroundTruthBox>],
    num_classes: usize,
    iou_threshold: f64,
    interpolation: Interpolation,
) -> Result<Vec<Option<f64>>> {
    if dets_per_image.len() != gts_per_image.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} detection images vs {} ground-truth images",
            dets_per_image.len(),
            gts_per_image.len()
        )));
    }
    let mut gt_counts = vec![0usize; num_classes];
    for gts in gts_per_image {
        for g in gts {
            gt_counts[g.class] += 1;
        }
    }

    let mut result = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        if gt_counts[class] == 0 {
            result.push(None);
            continue;
        }
        // Collate and sort detections of this class; the ordering key is
        // independent of the caller's list order.
        let mut flat: Vec<(usize, Detection)> = Vec::new();
        for (img, dets) in dets_per_image.iter().enumerate() {
            for d in dets.iter().filter(|d| d.class == class) {
                flat.push((img, *d));
            }
        }
        flat.sort_by(|(ia, a), (ib, b)| {
            b.score
                .partial_cmp(&a.score)
                .expect("finite scores")
                .then(ia.cmp(ib))
                .then(a.bbox.x1.partial_cmp(&b.bbox.x1).expect("finite"))
                .then(a.bbox.y1.partial_cmp(&b.bbox.y1).expect("finite"))
                .then(a.bbox.x2.partial_cmp(&b.bbox.x2).expect("finite"))
                .then(a.bbox.y2.partial_cmp(&b.bbox.y2).expect("finite"))
        });

        let mut matched: Vec<Vec<bool>> = gts_per_image
            .iter()
            .map(|gts| vec![false; gts.len()])
            .collect();
        let mut tp = Vec::with_capacity(flat.len());
        for (img, d) in &flat {
            let gts = &gts_per_image[*img];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if g.class != class || matched[*img][gi] {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= iou_threshold {
                    match best {
                        Some((_, bo)) if o <= bo => {}
                        _ => best = Some((gi, o)),
                    }
                }
            }
            match best {
                Some((gi, _)) => {
                    matched[*img][gi] = true;
                    tp.push(true);
                }
                None => tp.push(false),
            }
        }

        let n_gt = gt_counts[class] as f64;
        let mut cum_tp = 0usize;
        let mut precisions = Vec::with_capacity(tp.len());
        let mut recalls = Vec::with_capacity(tp.len());
        for (i, &hit) in tp.iter().enumerate() {
            if hit {
                cum_tp += 1;
            }
            precisions.push(cum_tp as f64 / (i + 1) as f64);
            recalls.push(cum_tp as f64 / n_gt);
        }
        result.push(Some(average_precision(
            &precisions,
            &recalls,
            interpolation,
        )));
    }
    Ok(result)
}

fn average_precision(precisions: &[f64], recalls: &[f64], interp: Interpolation) -> f64 {
    if precisions.is_empty() {
        return 0.0;
    }
    match interp {
        Interpolation::AllPoint => {
            // Precision envelope from the right, integrated over recall steps.
            let n = precisions.len();
            let mut envelope = precisions.to_vec();
            for i in (0..n - 1).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for i in 0..n {
                if recalls[i] > prev_recall {
                    ap += (recalls[i] - prev_recall) * envelope[i];
                    prev_recall = recalls[i];
                }
            }
            ap
        }
        Interpolation::ElevenPoint => {
            let mut ap = 0.0;
            for step in 0..=10 {
                let r = step as f64 / 10.0;
                let p = precisions
                    .iter()
                    .zip(recalls)
                    .filter(|(_, &rec)| rec >= r)
                    .map(|(&p, _)| p)
                    .fold(0.0, f64::max);
                ap += p / 11.0;
            }
            ap
        }
    }
}

/// Mean of the per-class APs over classes that have ground truth.
pub fn mean_ap(aps: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = aps.iter().filter_map(|a| *a).collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

/// CorLoc input: for each (image, present class) pair, the top-scoring
/// proposal box for that class (or `None` when the image has no proposals).
pub struct CorlocPair {
    pub image: usize,
    pub class: usize,
    pub top_box: Option<BBox>,
}

/// Fraction of (image, present-class) pairs whose top-scoring proposal
/// reaches IoU >= 0.5 with some ground-truth box of that class.
pub fn corloc(pairs: &[CorlocPair], gts_per_image: &[Vec<GroundTruthBox>]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .filter(|p| {
            p.top_box.map_or(false, |b| {
                gts_per_image[p.image]
                    .iter()
                    .any(|g| g.class == p.class && iou(&b, &g.bbox) >= IOU_MATCH_THRESHOLD)
            })
        })
        .count();
    hits as f64 / pairs.len() as f64
}

/// The ten COCO-style thresholds 0.5, 0.55, …, 0.95.
pub fn map_5095_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

// ---------------------------------------------------------------------------
// Metrics report
// ---------------------------------------------------------------------------

/// Per-epoch loss components recorded by the training loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
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

/// Evaluation summary for one trained model. All metric values are fractions
/// in [0, 1]; comparison tables print them as percentage points.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ablation: String,
    pub seed: u64,
    pub map50_cg: f64,
    pub map50_fg: f64,
    pub map5095_cg: f64,
    pub map5095_fg: f64,
    pub corloc_cg: f64,
    pub corloc_fg: f64,
    pub ap50_cg: Vec<(String, Option<f64>)>,
    pub ap50_fg: Vec<(String, Option<f64>)>,
    pub loss_trace: Vec<EpochLoss>,
}

/// Top-level metrics document: JSON plus a flat CSV projection.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub schema: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    pub runs: Vec<MetricsReport>,
}

impl MetricsDocument {
    pub fn new(runs: Vec<MetricsReport>, timestamp: Option<String>) -> Self {
        MetricsDocument {
            schema: 1,
            timestamp,
            runs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::parse(e.line(), format!("metrics json: {e}")))
    }

    /// One `ablation,metric,value` row per scalar metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ablation,metric,value\n");
        for r in &self.runs {
            let rows = [
                ("map50_cg", r.map50_cg),
                ("map50_fg", r.map50_fg),
                ("map5095_cg", r.map5095_cg),
                ("map5095_fg", r.map5095_fg),
                ("corloc_cg", r.corloc_cg),
                ("corloc_fg", r.corloc_fg),
            ];
            for (name, v) in rows {
                out.push_str(&format!("{},{},{}\n", r.ablation, name, v));
            }
        }
        out
    }

    /// Paper-style comparison table in percentage points.
    pub fn comparison_table(&self) -> String {
        let mut out = String::from(
            "ablation        mAP50-CG  mAP50-FG  CorLoc-FG  mAP50:95-FG\n",
        );
        for r in &self.runs {
            out.push_str(&format!(
                "{:<15} {:>8.1} {:>9.1} {:>10.1} {:>12.1}\n",
                r.ablation,
                100.0 * r.map50_cg,
                100.0 * r.map50_fg,
                100.0 * r.corloc_fg,
                100.0 * r.map5095_fg,
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BBox, class: usize, score: f64) -> Detection {
        Detection::new(b, class, score).unwrap()
    }

    // ---- IoU ----

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        // Half-overlapping rectangles: 50 / 150 = 1/3.
        assert_abs_diff_eq!(
            iou(&a, &bx(5.0, 0.0, 15.0, 10.0)),
            1.0 / 3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn bbox_rejects_degenerate() {
        assert!(BBox::new(1.0, 0.0, 1.0, 5.0).is_err());
        assert!(BBox::new(2.0, 0.0, 1.0, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 5.0).is_err());
    }

    // ---- soft-NMS ----

    #[test]
    fn soft_nms_disjoint_scores_unchanged() {
        let dets = vec![
            det(bx(0.0, 0.0, 10.0, 10.0), 0, 0.9),
            det(bx(50.0, 50.0, 60.0, 60.0), 0, 0.8),
        ];
        let out = soft_nms(&dets, DEFAULT_SOFT_NMS_SIGMA, DEFAULT_SCORE_FLOOR).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[1].score, 0.8);
    }

    #[test]
    fn soft_nms_identical_boxes_gaussian_decay() {
        // Second box: 0.8 * exp(-1 / 0.55) ≈ 0.1299.
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let dets = vec![det(b, 0, 0.9), det(b, 0, 0.8)];
        let out = soft_nms(&dets, 0.55, DEFAULT_SCORE_FLOOR).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert_abs_diff_eq!(out[1].score, 0.8 * (-1.0f64 / 0.55).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(out[1].score, 0.1299, epsilon = 1e-4);
    }

    #[test]
    fn soft_nms_sigma_to_zero_recovers_hard_nms() {
        let dets = vec![
            det(bx(0.0, 0.0, 10.0, 10.0), 0, 0.9),
            det(bx(1.0, 0.0, 11.0, 10.0), 0, 0.8),
            det(bx(50.0, 0.0, 60.0, 10.0), 0, 0.7),
        ];
        let out = soft_nms(&dets, 1e-6, DEFAULT_SCORE_FLOOR).unwrap();
        // Any overlap decays below the floor; only disjoint boxes survive.
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        assert_eq!(out[1].score, 0.7);
    }

    #[test]
    fn soft_nms_respects_classes_and_rejects_bad_sigma() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        let dets = vec![det(b, 0, 0.9), det(b, 1, 0.8)];
        let out = soft_nms(&dets, 0.55, 1e-3).unwrap();
        // Different classes never suppress each other.
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].score, 0.8);
        assert!(soft_nms(&dets, 0.0, 1e-3).is_err());
    }

    /// Independent step-replay oracle: same procedure, written straight-line.
    fn soft_nms_oracle(dets: &[Detection], sigma: f64, floor: f64) -> Vec<Detection> {
        let mut classes: Vec<usize> = dets.iter().map(|d| d.class).collect();
        classes.sort_unstable();
        classes.dedup();
        let mut out = Vec::new();
        for class in classes {
            let mut pool: Vec<Detection> =
                dets.iter().filter(|d| d.class == class).copied().collect();
            loop {
                if pool.is_empty() {
                    break;
                }
                let mut best = 0;
                for i in 1..pool.len() {
                    if pool[i].score > pool[best].score {
                        best = i;
                    }
                }
                let sel = pool.remove(best);
                if sel.score < floor {
                    break;
                }
                out.push(sel);
                let mut kept = Vec::new();
                for mut d in pool {
                    let ix = (sel.bbox.x2.min(d.bbox.x2) - sel.bbox.x1.max(d.bbox.x1)).max(0.0);
                    let iy = (sel.bbox.y2.min(d.bbox.y2) - sel.bbox.y1.max(d.bbox.y1)).max(0.0);
                    let inter = ix * iy;
                    let o = if inter <= 0.0 {
                        0.0
                    } else {
                        inter / (sel.bbox.area() + d.bbox.area() - inter)
                    };
                    d.score *= (-(o * o) / sigma).exp();
                    if d.score >= floor {
                        kept.push(d);
                    }
                }
                pool = kept;
            }
        }
        out
    }

    #[test]
    fn soft_nms_matches_replay_oracle_bitwise() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rng.gen_range(1..=10);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let x1 = rng.gen_range(0.0..80.0);
                    let y1 = rng.gen_range(0.0..80.0);
                    let w = rng.gen_range(5.0..20.0);
                    let h = rng.gen_range(5.0..20.0);
                    det(
                        bx(x1, y1, x1 + w, y1 + h),
                        rng.gen_range(0..3),
                        rng.gen_range(0.05..1.0),
                    )
                })
                .collect();
            let got = soft_nms(&dets, 0.55, 1e-3).unwrap();
            let want = soft_nms_oracle(&dets, 0.55, 1e-3);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(g.score.to_bits(), w.score.to_bits());
                assert_eq!(g.bbox, w.bbox);
                assert_eq!(g.class, w.class);
            }
        }
    }

    // ---- AP / mAP ----

    #[test]
    fn ap_single_perfect_detection() {
        let gt = vec![vec![GroundTruthBox { bbox: bx(0.0, 0.0, 10.0, 10.0), class: 0 }]];
        let dets = vec![vec![det(bx(0.0, 0.0, 10.0, 10.0), 0, 0.9)]];
        let aps = ap_per_class(&dets, &gt, 1, 0.5, Interpolation::AllPoint).unwrap();
        assert_eq!(aps[0], Some(1.0));
    }

    #[test]
    fn ap_single_missed_detection() {
        let gt = vec![vec![GroundTruthBox { bbox: bx(0.0, 0.0, 10.0, 10.0), class: 0 }]];
        let dets = vec![vec![det(bx(50.0, 50.0, 60.0, 60.0), 0, 0.9)]];
        let aps = ap_per_class(&dets, &gt, 1, 0.5, Interpolation::AllPoint).unwrap();
        assert_eq!(aps[0], Some(0.0));
    }

    #[test]
    fn ap_matches_hand_executed_pr_curves() {
        // Three images, two classes, hand-walked precision/recall curves:
        // class 0 detections in score order: FP, TP, FP, TP, FP -> AP = 0.5;
        // class 1 detections: TP, FP, TP -> AP = 0.5 * 1 + 0.5 * 2/3 = 5/6.
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(20.0, 20.0, 30.0, 30.0);
        let far = bx(50.0, 50.0, 60.0, 60.0);
        let gts = vec![
            vec![
                GroundTruthBox { bbox: a, class: 0 },
                GroundTruthBox { bbox: b, class: 1 },
            ],
            vec![GroundTruthBox { bbox: a, class: 0 }],
            vec![GroundTruthBox { bbox: a, class: 1 }],
        ];
        let dets = vec![
            vec![det(a, 0, 0.9), det(a, 0, 0.8), det(b, 1, 0.7)],
            vec![det(far, 0, 0.95), det(a, 0, 0.6)],
            vec![det(a, 0, 0.5), det(bx(5.0, 0.0, 15.0, 10.0), 1, 0.65), det(a, 1, 0.3)],
        ];
        let aps = ap_per_class(&dets, &gts, 2, 0.5, Interpolation::AllPoint).unwrap();
        assert_abs_diff_eq!(aps[0].unwrap(), 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(aps[1].unwrap(), 5.0 / 6.0, epsilon = 1e-9);
        assert_abs_diff_eq!(mean_ap(&aps), 2.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn ap_class_without_gt_is_none() {
        let gts = vec![vec![GroundTruthBox { bbox: bx(0.0, 0.0, 1.0, 1.0), class: 0 }]];
        let dets = vec![vec![]];
        let aps = ap_per_class(&dets, &gts, 2, 0.5, Interpolation::AllPoint).unwrap();
        assert_eq!(aps[1], None);
        assert_eq!(aps[0], Some(0.0));
    }

    #[test]
    fn ap_invariant_to_detection_order() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let gts = vec![vec![
            GroundTruthBox { bbox: a, class: 0 },
            GroundTruthBox { bbox: bx(30.0, 30.0, 40.0, 40.0), class: 0 },
        ]];
        let mut dets: Vec<Detection> = (0..8)
            .map(|i| {
                let off = i as f64;
                det(
                    bx(off, 0.0, off + 10.0, 10.0),
                    0,
                    rng.gen_range(0.1..1.0),
                )
            })
            .collect();
        let base = ap_per_class(
            &[dets.clone()],
            &gts,
            1,
            0.5,
            Interpolation::AllPoint,
        )
        .unwrap();
        dets.reverse();
        let rev = ap_per_class(&[dets], &gts, 1, 0.5, Interpolation::AllPoint).unwrap();
        assert_eq!(base, rev);
    }

    #[test]
    fn eleven_point_on_perfect_curve() {
        let gt = vec![vec![GroundTruthBox { bbox: bx(0.0, 0.0, 10.0, 10.0), class: 0 }]];
        let dets = vec![vec![det(bx(0.0, 0.0, 10.0, 10.0), 0, 0.9)]];
        let aps = ap_per_class(&dets, &gt, 1, 0.5, Interpolation::ElevenPoint).unwrap();
        assert_abs_diff_eq!(aps[0].unwrap(), 1.0, epsilon = 1e-12);
    }

    // ---- CorLoc ----

    #[test]
    fn corloc_cases() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let gts = vec![
            vec![GroundTruthBox { bbox: a, class: 0 }],
            vec![GroundTruthBox { bbox: a, class: 1 }],
        ];
        // Perfect localization.
        let perfect = vec![
            CorlocPair { image: 0, class: 0, top_box: Some(a) },
            CorlocPair { image: 1, class: 1, top_box: Some(a) },
        ];
        assert_eq!(corloc(&perfect, &gts), 1.0);
        // Nothing overlaps.
        let far = bx(50.0, 50.0, 60.0, 60.0);
        let misses = vec![
            CorlocPair { image: 0, class: 0, top_box: Some(far) },
            CorlocPair { image: 1, class: 1, top_box: None },
        ];
        assert_eq!(corloc(&misses, &gts), 0.0);
        // Mixed 4-pair fixture: two hits out of four.
        let mixed = vec![
            CorlocPair { image: 0, class: 0, top_box: Some(a) },
            CorlocPair { image: 0, class: 0, top_box: Some(far) },
            CorlocPair { image: 1, class: 1, top_box: Some(a) },
            CorlocPair { image: 1, class: 1, top_box: Some(far) },
        ];
        assert_eq!(corloc(&mixed, &gts), 0.5);
    }

    #[test]
    fn metrics_document_roundtrip_and_csv() {
        let doc = MetricsDocument::new(
            vec![MetricsReport {
                ablation: "naive".into(),
                seed: 42,
                map50_cg: 0.5,
                map50_fg: 0.25,
                ..Default::default()
            }],
            None,
        );
        let re = MetricsDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(doc, re);
        let csv = doc.to_csv();
        assert!(csv.contains("naive,map50_cg,0.5"));
        assert!(csv.lines().count() == 7);
    }
}
