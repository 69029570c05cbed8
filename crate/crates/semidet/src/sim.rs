//! Synthetic scene generation: stands in for the backbone + RPN so the
//! correlation, attention and memory mechanisms can be trained and measured
//! in isolation.
//!
//! Feature model: every fine class is a Gaussian cluster whose mean is its
//! coarse parent's mean plus a class offset. Each ground-truth object emits
//! "good" proposals (jittered copies of the box, IoU >= 0.5) with features
//! from the class cluster, and "context" proposals (shifted boxes, IoU < 0.5)
//! whose features sit at the class mean plus one global context offset —
//! class-informative but non-localizing, so image-level supervision alone
//! cannot rank them below the good boxes. Background proposals draw from a
//! separate background cluster. Everything is deterministic under
//! (seed, scene index).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::attention::{Scale, ScoreMap};
use crate::embedding::ClassEmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::{iou, BBox};
use crate::grid::Grid;
use crate::taxonomy::{ClassPartition, TaxonomyGraph};

/// Logit magnitude of the peak class in emulated coarse score maps.
pub const EMULATED_PEAK: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub coarse_classes: usize,
    pub fine_per_coarse: usize,
    pub dim: usize,
    pub train_detection_scenes: usize,
    pub train_classification_scenes: usize,
    pub test_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub good_per_object: usize,
    pub context_per_object: usize,
    pub background_per_scene: usize,
    /// Relative box perturbation of good proposals; 0 reproduces the
    /// ground-truth boxes exactly.
    pub jitter: f64,
    /// Standard deviation of the per-proposal feature noise.
    pub feature_noise: f64,
    /// Norm of the coarse class means.
    pub coarse_scale: f64,
    /// Norm of the fine-class offset from the coarse parent mean.
    pub fine_scale: f64,
    /// Norm of the global context-cluster offset.
    pub context_scale: f64,
    pub extent: f64,
    pub min_object_size: f64,
    pub max_object_size: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            coarse_classes: 8,
            fine_per_coarse: 4,
            dim: 32,
            train_detection_scenes: 1000,
            train_classification_scenes: 1000,
            test_scenes: 400,
            min_objects: 1,
            max_objects: 3,
            good_per_object: 2,
            context_per_object: 2,
            background_per_scene: 3,
            jitter: 0.15,
            feature_noise: 0.5,
            coarse_scale: 6.0,
            fine_scale: 1.5,
            context_scale: 4.0,
            extent: 512.0,
            min_object_size: 60.0,
            max_object_size: 160.0,
        }
    }
}

impl GeneratorConfig {
    pub fn fine_classes(&self) -> usize {
        self.coarse_classes * self.fine_per_coarse
    }

    pub fn total_scenes(&self) -> usize {
        self.train_detection_scenes + self.train_classification_scenes + self.test_scenes
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_classes == 0 || self.fine_per_coarse == 0 {
            return Err(Error::invalid("generator", "needs at least one class per level"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("generator", "dim must be >= 1"));
        }
        if self.min_objects == 0 || self.max_objects < self.min_objects {
            return Err(Error::invalid("generator", "object count range is empty"));
        }
        if self.good_per_object == 0 {
            return Err(Error::invalid("generator", "needs at least one good proposal per object"));
        }
        if self.jitter < 0.0 || self.feature_noise < 0.0 {
            return Err(Error::invalid("generator", "jitter and noise must be non-negative"));
        }
        if !(self.min_object_size > 0.0)
            || self.max_object_size < self.min_object_size
            || self.extent <= self.max_object_size
        {
            return Err(Error::invalid("generator", "object sizes must fit the extent"));
        }
        Ok(())
    }

    /// Flat key=value listing; shared with the run-config format.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("coarse_classes", self.coarse_classes.to_string()),
            ("fine_per_coarse", self.fine_per_coarse.to_string()),
            ("dim", self.dim.to_string()),
            ("train_detection_scenes", self.train_detection_scenes.to_string()),
            ("train_classification_scenes", self.train_classification_scenes.to_string()),
            ("test_scenes", self.test_scenes.to_string()),
            ("min_objects", self.min_objects.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("good_per_object", self.good_per_object.to_string()),
            ("context_per_object", self.context_per_object.to_string()),
            ("background_per_scene", self.background_per_scene.to_string()),
            ("jitter", self.jitter.to_string()),
            ("feature_noise", self.feature_noise.to_string()),
            ("coarse_scale", self.coarse_scale.to_string()),
            ("fine_scale", self.fine_scale.to_string()),
            ("context_scale", self.context_scale.to_string()),
            ("extent", self.extent.to_string()),
            ("min_object_size", self.min_object_size.to_string()),
            ("max_object_size", self.max_object_size.to_string()),
        ]
    }

    pub fn set_pair(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        fn num<T: std::str::FromStr>(v: &str, line: usize) -> Result<T> {
            v.parse()
                .map_err(|_| Error::parse(line, format!("bad value `{v}`")))
        }
        match key {
            "coarse_classes" => self.coarse_classes = num(value, line)?,
            "fine_per_coarse" => self.fine_per_coarse = num(value, line)?,
            "dim" => self.dim = num(value, line)?,
            "train_detection_scenes" => self.train_detection_scenes = num(value, line)?,
            "train_classification_scenes" => {
                self.train_classification_scenes = num(value, line)?
            }
            "test_scenes" => self.test_scenes = num(value, line)?,
            "min_objects" => self.min_objects = num(value, line)?,
            "max_objects" => self.max_objects = num(value, line)?,
            "good_per_object" => self.good_per_object = num(value, line)?,
            "context_per_object" => self.context_per_object = num(value, line)?,
            "background_per_scene" => self.background_per_scene = num(value, line)?,
            "jitter" => self.jitter = num(value, line)?,
            "feature_noise" => self.feature_noise = num(value, line)?,
            "coarse_scale" => self.coarse_scale = num(value, line)?,
            "fine_scale" => self.fine_scale = num(value, line)?,
            "context_scale" => self.context_scale = num(value, line)?,
            "extent" => self.extent = num(value, line)?,
            "min_object_size" => self.min_object_size = num(value, line)?,
            "max_object_size" => self.max_object_size = num(value, line)?,
            other => return Err(Error::parse(line, format!("unknown generator key `{other}`"))),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceTag {
    /// Full box supervision with coarse labels.
    Detection,
    /// Image-level fine labels only.
    Classification,
}

impl SourceTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceTag::Detection => "detection",
            SourceTag::Classification => "classification",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtObject {
    pub bbox: BBox,
    /// Index into the partition's fine list.
    pub fine: usize,
    /// Index into the partition's coarse list; always the fine class's parent.
    pub coarse: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub width: f64,
    pub height: f64,
    pub split: Split,
    pub source: SourceTag,
    pub gts: Vec<GtObject>,
    pub proposals: Vec<Proposal>,
}

impl SyntheticScene {
    pub fn validate(&self, dim: usize, fine_classes: usize, coarse_classes: usize) -> Result<()> {
        for g in &self.gts {
            if g.bbox.x1 < 0.0 || g.bbox.y1 < 0.0 || g.bbox.x2 > self.width || g.bbox.y2 > self.height
            {
                return Err(Error::invalid("scene", "ground-truth box outside extent"));
            }
            if g.fine >= fine_classes || g.coarse >= coarse_classes {
                return Err(Error::invalid("scene", "class index out of range"));
            }
        }
        for p in &self.proposals {
            if p.bbox.x1 < 0.0 || p.bbox.y1 < 0.0 || p.bbox.x2 > self.width || p.bbox.y2 > self.height
            {
                return Err(Error::invalid("scene", "proposal box outside extent"));
            }
            if p.feature.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: p.feature.len(),
                });
            }
        }
        Ok(())
    }

    /// Image-level fine labels (the only supervision classification scenes
    /// expose).
    pub fn fine_labels(&self) -> BTreeSet<usize> {
        self.gts.iter().map(|g| g.fine).collect()
    }

    pub fn feature_grid(&self) -> Grid {
        let dim = self.proposals.first().map_or(0, |p| p.feature.len());
        let mut g = Grid::zeros(self.proposals.len(), dim);
        for (i, p) in self.proposals.iter().enumerate() {
            for (j, &v) in p.feature.iter().enumerate() {
                g.set(i, j, v);
            }
        }
        g
    }

    /// Coarse label a detector would assign the proposal: the coarse class of
    /// the best-overlapping ground truth at IoU >= `threshold`, else `None`
    /// (background).
    pub fn proposal_coarse_label(&self, proposal: usize, threshold: f64) -> Option<usize> {
        let b = &self.proposals[proposal].bbox;
        let mut best: Option<(usize, f64)> = None;
        for g in &self.gts {
            let o = iou(b, &g.bbox);
            if o >= threshold {
                match best {
                    Some((_, bo)) if o <= bo => {}
                    _ => best = Some((g.coarse, o)),
                }
            }
        }
        best.map(|(c, _)| c)
    }

    /// Like [`Self::proposal_coarse_label`] but returning the matched
    /// ground-truth index.
    pub fn proposal_gt_match(&self, proposal: usize, threshold: f64) -> Option<usize> {
        let b = &self.proposals[proposal].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in self.gts.iter().enumerate() {
            let o = iou(b, &g.bbox);
            if o >= threshold {
                match best {
                    Some((_, bo)) if o <= bo => {}
                    _ => best = Some((gi, o)),
                }
            }
        }
        best.map(|(gi, _)| gi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub taxonomy: TaxonomyGraph,
    pub partition: ClassPartition,
    /// True cluster means for every coarse and fine class.
    pub embeddings: ClassEmbeddingTable,
    pub scenes: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn train_detection(&self) -> Vec<&SyntheticScene> {
        self.scenes
            .iter()
            .filter(|s| s.split == Split::Train && s.source == SourceTag::Detection)
            .collect()
    }

    pub fn train_classification(&self) -> Vec<&SyntheticScene> {
        self.scenes
            .iter()
            .filter(|s| s.split == Split::Train && s.source == SourceTag::Classification)
            .collect()
    }

    pub fn test(&self) -> Vec<&SyntheticScene> {
        self.scenes.iter().filter(|s| s.split == Split::Test).collect()
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn stream_rng(seed: u64, index: u64, tag: u64) -> ChaCha20Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&index.to_le_bytes());
    bytes[16..24].copy_from_slice(&tag.to_le_bytes());
    ChaCha20Rng::from_seed(bytes)
}

fn random_direction(rng: &mut ChaCha20Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

struct FeatureModel {
    coarse_means: Vec<Vec<f64>>,
    fine_means: Vec<Vec<f64>>,
    background_mean: Vec<f64>,
    context_offset: Vec<f64>,
}

impl FeatureModel {
    fn build(config: &GeneratorConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0, 0);
        let coarse_means: Vec<Vec<f64>> = (0..config.coarse_classes)
            .map(|_| {
                random_direction(&mut rng, config.dim)
                    .into_iter()
                    .map(|x| x * config.coarse_scale)
                    .collect()
            })
            .collect();
        let fine_means: Vec<Vec<f64>> = (0..config.fine_classes())
            .map(|j| {
                let parent = &coarse_means[j / config.fine_per_coarse];
                let offset = random_direction(&mut rng, config.dim);
                parent
                    .iter()
                    .zip(offset)
                    .map(|(p, o)| p + o * config.fine_scale)
                    .collect()
            })
            .collect();
        let background_mean = vec![0.0; config.dim];
        let context_offset: Vec<f64> = random_direction(&mut rng, config.dim)
            .into_iter()
            .map(|x| x * config.context_scale)
            .collect();
        FeatureModel {
            coarse_means,
            fine_means,
            background_mean,
            context_offset,
        }
    }

    fn sample(&self, mean: &[f64], noise: f64, rng: &mut ChaCha20Rng) -> Vec<f64> {
        if noise == 0.0 {
            return mean.to_vec();
        }
        let normal = Normal::new(0.0, noise).expect("valid noise");
        mean.iter().map(|m| m + normal.sample(rng)).collect()
    }
}

fn clamp_box(x1: f64, y1: f64, x2: f64, y2: f64, extent: f64) -> Option<BBox> {
    let x1 = x1.max(0.0);
    let y1 = y1.max(0.0);
    let x2 = x2.min(extent);
    let y2 = y2.min(extent);
    BBox::new(x1, y1, x2, y2).ok()
}

fn sample_box(rng: &mut ChaCha20Rng, config: &GeneratorConfig) -> BBox {
    let w = rng.gen_range(config.min_object_size..=config.max_object_size);
    let h = rng.gen_range(config.min_object_size..=config.max_object_size);
    let x1 = rng.gen_range(0.0..(config.extent - w));
    let y1 = rng.gen_range(0.0..(config.extent - h));
    BBox::new(x1, y1, x1 + w, y1 + h).expect("sampled box is valid")
}

fn jittered_box(rng: &mut ChaCha20Rng, gt: &BBox, jitter: f64, extent: f64) -> Option<BBox> {
    if jitter == 0.0 {
        return Some(*gt);
    }
    let normal = Normal::new(0.0, jitter).expect("valid jitter");
    let (cx, cy) = gt.center();
    let w = gt.width() * (normal.sample(rng) as f64).exp();
    let h = gt.height() * (normal.sample(rng) as f64).exp();
    let cx = cx + gt.width() * normal.sample(rng);
    let cy = cy + gt.height() * normal.sample(rng);
    clamp_box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, extent)
}

fn context_box(rng: &mut ChaCha20Rng, gt: &BBox, extent: f64) -> Option<BBox> {
    let (cx, cy) = gt.center();
    let dir = rng.gen_range(0..4);
    let dist = rng.gen_range(0.8..1.4);
    let (dx, dy) = match dir {
        0 => (dist * gt.width(), 0.0),
        1 => (-dist * gt.width(), 0.0),
        2 => (0.0, dist * gt.height()),
        _ => (0.0, -dist * gt.height()),
    };
    let scale = rng.gen_range(0.9..1.3);
    let w = gt.width() * scale;
    let h = gt.height() * scale;
    clamp_box(
        cx + dx - w / 2.0,
        cy + dy - h / 2.0,
        cx + dx + w / 2.0,
        cy + dy + h / 2.0,
        extent,
    )
}

fn generate_scene(
    config: &GeneratorConfig,
    model: &FeatureModel,
    seed: u64,
    index: u64,
    split: Split,
    source: SourceTag,
) -> SyntheticScene {
    let mut rng = stream_rng(seed, index, 1);
    let n_objects = rng.gen_range(config.min_objects..=config.max_objects);

    let mut gts: Vec<GtObject> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let fine = rng.gen_range(0..config.fine_classes());
        let mut bbox = sample_box(&mut rng, config);
        for _ in 0..20 {
            if gts.iter().all(|g| iou(&bbox, &g.bbox) < 0.5) {
                break;
            }
            bbox = sample_box(&mut rng, config);
        }
        gts.push(GtObject {
            bbox,
            fine,
            coarse: fine / config.fine_per_coarse,
        });
    }

    let mut proposals = Vec::new();
    for g in &gts {
        for _ in 0..config.good_per_object {
            let mut chosen = *&g.bbox;
            for _ in 0..20 {
                if let Some(b) = jittered_box(&mut rng, &g.bbox, config.jitter, config.extent) {
                    if iou(&b, &g.bbox) >= 0.5 {
                        chosen = b;
                        break;
                    }
                }
            }
            let feature =
                model.sample(&model.fine_means[g.fine], config.feature_noise, &mut rng);
            proposals.push(Proposal { bbox: chosen, feature });
        }
        for _ in 0..config.context_per_object {
            let mut chosen = None;
            for _ in 0..20 {
                if let Some(b) = context_box(&mut rng, &g.bbox, config.extent) {
                    if iou(&b, &g.bbox) < 0.5 && gts.iter().all(|o| iou(&b, &o.bbox) < 0.5) {
                        chosen = Some(b);
                        break;
                    }
                }
            }
            let Some(bbox) = chosen else { continue };
            let mean: Vec<f64> = model.fine_means[g.fine]
                .iter()
                .zip(&model.context_offset)
                .map(|(m, o)| m + o)
                .collect();
            let feature = model.sample(&mean, config.feature_noise, &mut rng);
            proposals.push(Proposal { bbox, feature });
        }
    }
    for _ in 0..config.background_per_scene {
        let mut bbox = sample_box(&mut rng, config);
        for _ in 0..20 {
            if gts.iter().all(|g| iou(&bbox, &g.bbox) < 0.3) {
                break;
            }
            bbox = sample_box(&mut rng, config);
        }
        let feature = model.sample(&model.background_mean, config.feature_noise, &mut rng);
        proposals.push(Proposal { bbox, feature });
    }

    SyntheticScene {
        width: config.extent,
        height: config.extent,
        split,
        source,
        gts,
        proposals,
    }
}

fn class_name(prefix: &str, i: usize) -> String {
    format!("{prefix}{i:02}")
}

/// Builds the synthetic taxonomy (`c<i> > f<j>` blocks), the partition, the
/// true class-mean embedding table and all scenes. Byte-identical output for
/// identical (config, seed).
pub fn generate_dataset(config: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let model = FeatureModel::build(config, seed);

    let coarse_ids: Vec<String> = (0..config.coarse_classes)
        .map(|i| class_name("c", i))
        .collect();
    let fine_ids: Vec<String> = (0..config.fine_classes())
        .map(|j| class_name("f", j))
        .collect();
    let edges: Vec<(String, String)> = (0..config.fine_classes())
        .map(|j| {
            (
                coarse_ids[j / config.fine_per_coarse].clone(),
                fine_ids[j].clone(),
            )
        })
        .collect();
    let taxonomy = TaxonomyGraph::from_edges(edges)?;
    let partition = ClassPartition::new(coarse_ids.clone(), fine_ids.clone())?;

    let mut embeddings = ClassEmbeddingTable::new(config.dim)?;
    for (i, id) in coarse_ids.iter().enumerate() {
        embeddings.insert(id.clone(), model.coarse_means[i].clone())?;
    }
    for (j, id) in fine_ids.iter().enumerate() {
        embeddings.insert(id.clone(), model.fine_means[j].clone())?;
    }

    let mut scenes = Vec::with_capacity(config.total_scenes());
    let mut index = 0u64;
    for _ in 0..config.train_detection_scenes {
        scenes.push(generate_scene(
            config,
            &model,
            seed,
            index,
            Split::Train,
            SourceTag::Detection,
        ));
        index += 1;
    }
    for _ in 0..config.train_classification_scenes {
        scenes.push(generate_scene(
            config,
            &model,
            seed,
            index,
            Split::Train,
            SourceTag::Classification,
        ));
        index += 1;
    }
    for _ in 0..config.test_scenes {
        scenes.push(generate_scene(
            config,
            &model,
            seed,
            index,
            Split::Test,
            SourceTag::Detection,
        ));
        index += 1;
    }

    Ok(Dataset {
        config: config.clone(),
        seed,
        taxonomy,
        partition,
        embeddings,
        scenes,
    })
}

/// Emulated coarse detector output for a scene: logits peaked at each
/// proposal's true coarse class (background when no ground truth reaches
/// IoU 0.5) plus Gaussian noise. Deterministic under `seed`.
pub fn emulate_coarse_scores(
    scene: &SyntheticScene,
    coarse_classes: usize,
    noise: f64,
    seed: u64,
) -> Result<ScoreMap> {
    let mut rng = stream_rng(seed, 0, 2);
    let cols = coarse_classes + 1;
    let mut grid = Grid::zeros(scene.proposals.len(), cols);
    let normal = if noise > 0.0 {
        Some(Normal::new(0.0, noise).map_err(|_| Error::invalid("noise", "must be finite"))?)
    } else {
        None
    };
    for p in 0..scene.proposals.len() {
        let label = scene
            .proposal_coarse_label(p, 0.5)
            .unwrap_or(coarse_classes);
        for c in 0..cols {
            let base = if c == label { EMULATED_PEAK } else { 0.0 };
            let n = normal.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            grid.set(p, c, base + n);
        }
    }
    ScoreMap::new(grid, Scale::Logits)
}

// ---------------------------------------------------------------------------
// Dataset file format
// ---------------------------------------------------------------------------

impl Dataset {
    /// Self-describing text container: header, generator config echo,
    /// taxonomy, partition, embeddings, then one block per scene.
    pub fn to_text(&self) -> String {
        let mut out = String::from("SIMDATA 1\n");
        out.push_str("[config]\n");
        let _ = writeln!(out, "seed = {}", self.seed);
        for (k, v) in self.config.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out.push_str("[taxonomy]\n");
        out.push_str(&self.taxonomy.to_text());
        out.push_str("[partition]\n");
        out.push_str(&self.partition.to_text());
        out.push_str("[embeddings]\n");
        out.push_str(&self.embeddings.to_text());
        out.push_str("[scenes]\n");
        for s in &self.scenes {
            let _ = writeln!(
                out,
                "scene {} {} {} {}",
                s.split.as_str(),
                s.source.as_str(),
                s.width,
                s.height
            );
            for g in &s.gts {
                let _ = writeln!(
                    out,
                    "gt {} {} {} {} {} {}",
                    g.bbox.x1,
                    g.bbox.y1,
                    g.bbox.x2,
                    g.bbox.y2,
                    self.partition.fine()[g.fine],
                    self.partition.coarse()[g.coarse],
                );
            }
            for p in &s.proposals {
                let mut line = format!(
                    "prop {} {} {} {}",
                    p.bbox.x1, p.bbox.y1, p.bbox.x2, p.bbox.y2
                );
                for v in &p.feature {
                    let _ = write!(line, " {v}");
                }
                out.push_str(&line);
                out.push('\n');
            }
        }
        out
    }
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().peekable();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty dataset"))?;
    if header.trim() != "SIMDATA 1" {
        return Err(Error::parse(1, "expected `SIMDATA 1` header"));
    }

    // Collect section bodies by name, preserving order inside each.
    let mut section = String::new();
    let mut config_lines: Vec<(usize, String)> = Vec::new();
    let mut taxonomy_text = String::new();
    let mut partition_text = String::new();
    let mut embedding_text = String::new();
    let mut scene_lines: Vec<(usize, String)> = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        match trimmed {
            "[config]" | "[taxonomy]" | "[partition]" | "[embeddings]" | "[scenes]" => {
                section = trimmed.to_string();
                continue;
            }
            _ => {}
        }
        match section.as_str() {
            "[config]" => config_lines.push((line, trimmed.to_string())),
            "[taxonomy]" => {
                taxonomy_text.push_str(trimmed);
                taxonomy_text.push('\n');
            }
            "[partition]" => {
                partition_text.push_str(trimmed);
                partition_text.push('\n');
            }
            "[embeddings]" => {
                embedding_text.push_str(trimmed);
                embedding_text.push('\n');
            }
            "[scenes]" => scene_lines.push((line, trimmed.to_string())),
            _ => return Err(Error::parse(line, "content before any section")),
        }
    }

    let mut config = GeneratorConfig::default();
    let mut seed = 0u64;
    for (line, l) in &config_lines {
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::parse(*line, "expected `key = value`"))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "seed" {
            seed = v
                .parse()
                .map_err(|_| Error::parse(*line, format!("bad seed `{v}`")))?;
        } else {
            config.set_pair(k, v, *line)?;
        }
    }
    config.validate()?;
    let taxonomy = crate::taxonomy::parse_taxonomy(&taxonomy_text)?;
    let partition = crate::taxonomy::parse_partition(&partition_text)?;
    partition.validate_against(&taxonomy)?;
    let embeddings = crate::embedding::parse_embeddings(&embedding_text)?;

    let mut scenes: Vec<SyntheticScene> = Vec::new();
    for (line, l) in scene_lines {
        let mut tok = l.split_whitespace();
        match tok.next() {
            Some("scene") => {
                let split = match tok.next() {
                    Some("train") => Split::Train,
                    Some("test") => Split::Test,
                    other => return Err(Error::parse(line, format!("bad split {other:?}"))),
                };
                let source = match tok.next() {
                    Some("detection") => SourceTag::Detection,
                    Some("classification") => SourceTag::Classification,
                    other => return Err(Error::parse(line, format!("bad source {other:?}"))),
                };
                let mut dims = [0.0f64; 2];
                for d in dims.iter_mut() {
                    *d = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::parse(line, "bad scene extent"))?;
                }
                scenes.push(SyntheticScene {
                    width: dims[0],
                    height: dims[1],
                    split,
                    source,
                    gts: Vec::new(),
                    proposals: Vec::new(),
                });
            }
            Some("gt") => {
                let scene = scenes
                    .last_mut()
                    .ok_or_else(|| Error::parse(line, "gt before scene"))?;
                let mut vals = [0.0f64; 4];
                for v in vals.iter_mut() {
                    *v = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::parse(line, "bad gt coordinates"))?;
                }
                let fine_id = tok.next().ok_or_else(|| Error::parse(line, "missing fine id"))?;
                let coarse_id = tok
                    .next()
                    .ok_or_else(|| Error::parse(line, "missing coarse id"))?;
                let fine = partition
                    .fine_index(fine_id)
                    .ok_or_else(|| Error::UnknownClass(fine_id.to_string()))?;
                let coarse = partition
                    .coarse_index(coarse_id)
                    .ok_or_else(|| Error::UnknownClass(coarse_id.to_string()))?;
                // Consistency with the taxonomy: the coarse label must be an
                // ancestor of the fine label.
                let ancestors = taxonomy.hypernym_closure(fine_id)?;
                if !ancestors.contains(coarse_id) {
                    return Err(Error::parse(
                        line,
                        format!("coarse `{coarse_id}` is not an ancestor of `{fine_id}`"),
                    ));
                }
                scene.gts.push(GtObject {
                    bbox: BBox::new(vals[0], vals[1], vals[2], vals[3])
                        .map_err(|e| Error::parse(line, e.to_string()))?,
                    fine,
                    coarse,
                });
            }
            Some("prop") => {
                let scene = scenes
                    .last_mut()
                    .ok_or_else(|| Error::parse(line, "prop before scene"))?;
                let mut vals = [0.0f64; 4];
                for v in vals.iter_mut() {
                    *v = tok
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::parse(line, "bad proposal coordinates"))?;
                }
                let mut feature = Vec::with_capacity(config.dim);
                for t in tok {
                    feature.push(
                        t.parse::<f64>()
                            .map_err(|_| Error::parse(line, format!("bad number `{t}`")))?,
                    );
                }
                if feature.len() != config.dim {
                    return Err(Error::parse(
                        line,
                        format!("expected {} feature values, got {}", config.dim, feature.len()),
                    ));
                }
                scene.proposals.push(Proposal {
                    bbox: BBox::new(vals[0], vals[1], vals[2], vals[3])
                        .map_err(|e| Error::parse(line, e.to_string()))?,
                    feature,
                });
            }
            other => return Err(Error::parse(line, format!("unknown scene token {other:?}"))),
        }
    }
    for s in &scenes {
        s.validate(config.dim, config.fine_classes(), config.coarse_classes)?;
    }
    Ok(Dataset {
        config,
        seed,
        taxonomy,
        partition,
        embeddings,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::argmax;

    fn small_config() -> GeneratorConfig {
        GeneratorConfig {
            coarse_classes: 3,
            fine_per_coarse: 2,
            dim: 8,
            train_detection_scenes: 6,
            train_classification_scenes: 6,
            test_scenes: 4,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config();
        let a = generate_dataset(&cfg, 42).unwrap();
        let b = generate_dataset(&cfg, 42).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let c = generate_dataset(&cfg, 43).unwrap();
        assert_ne!(a.to_text(), c.to_text());
    }

    #[test]
    fn scene_counts_match_config() {
        let cfg = small_config();
        let d = generate_dataset(&cfg, 1).unwrap();
        assert_eq!(d.train_detection().len(), 6);
        assert_eq!(d.train_classification().len(), 6);
        assert_eq!(d.test().len(), 4);
        assert_eq!(d.partition.coarse().len(), 3);
        assert_eq!(d.partition.fine().len(), 6);
    }

    #[test]
    fn zero_jitter_good_proposals_are_exact() {
        let cfg = GeneratorConfig {
            jitter: 0.0,
            feature_noise: 0.0,
            ..small_config()
        };
        let d = generate_dataset(&cfg, 5).unwrap();
        for s in &d.scenes {
            for g in &s.gts {
                let exact = s
                    .proposals
                    .iter()
                    .filter(|p| iou(&p.bbox, &g.bbox) == 1.0)
                    .count();
                assert!(
                    exact >= cfg.good_per_object,
                    "expected {} exact proposals",
                    cfg.good_per_object
                );
            }
        }
    }

    #[test]
    fn separated_clusters_classify_cleanly() {
        // 10-sigma separation between fine means.
        let cfg = GeneratorConfig {
            feature_noise: 0.2,
            fine_scale: 2.0,
            coarse_scale: 6.0,
            train_detection_scenes: 40,
            train_classification_scenes: 0,
            test_scenes: 0,
            ..small_config()
        };
        let d = generate_dataset(&cfg, 7).unwrap();
        let mut total = 0usize;
        let mut correct = 0usize;
        for s in &d.scenes {
            for (pi, p) in s.proposals.iter().enumerate() {
                // Restrict to good proposals (those matching a ground truth).
                let Some(gi) = s.proposal_gt_match(pi, 0.5) else { continue };
                let fine = s.gts[gi].fine;
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (j, id) in d.partition.fine().iter().enumerate() {
                    let m = d.embeddings.get(id).unwrap();
                    let dist = crate::numeric::squared_distance(&p.feature, m);
                    if dist < best_d {
                        best_d = dist;
                        best = j;
                    }
                }
                total += 1;
                if best == fine {
                    correct += 1;
                }
            }
        }
        assert!(total > 100);
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.99, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn scenes_have_context_and_background_proposals() {
        let cfg = small_config();
        let d = generate_dataset(&cfg, 11).unwrap();
        let s = &d.scenes[0];
        // At least one proposal does not reach IoU 0.5 with any ground truth.
        let non_localizing = (0..s.proposals.len())
            .filter(|&p| s.proposal_coarse_label(p, 0.5).is_none())
            .count();
        assert!(non_localizing > 0);
    }

    #[test]
    fn emulate_zero_noise_peaks_at_true_class() {
        let cfg = small_config();
        let d = generate_dataset(&cfg, 3).unwrap();
        let s = &d.scenes[0];
        let sm = emulate_coarse_scores(s, cfg.coarse_classes, 0.0, 1).unwrap();
        for p in 0..s.proposals.len() {
            let want = s.proposal_coarse_label(p, 0.5).unwrap_or(cfg.coarse_classes);
            assert_eq!(argmax(sm.values().row(p)), Some(want));
        }
    }

    #[test]
    fn emulate_reproducible_under_seed() {
        let cfg = small_config();
        let d = generate_dataset(&cfg, 3).unwrap();
        let s = &d.scenes[1];
        let a = emulate_coarse_scores(s, cfg.coarse_classes, 0.7, 9).unwrap();
        let b = emulate_coarse_scores(s, cfg.coarse_classes, 0.7, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn emulate_huge_noise_is_uniform_argmax() {
        // Monte-Carlo over ~1e4 proposal rows: accuracy approaches
        // 1 / (C_f + 1).
        let cfg = GeneratorConfig {
            train_detection_scenes: 1000,
            train_classification_scenes: 0,
            test_scenes: 0,
            ..small_config()
        };
        let d = generate_dataset(&cfg, 13).unwrap();
        let mut total = 0usize;
        let mut hits = 0usize;
        for (i, s) in d.scenes.iter().enumerate() {
            let sm = emulate_coarse_scores(s, cfg.coarse_classes, 1e3, i as u64).unwrap();
            for p in 0..s.proposals.len() {
                let want = s.proposal_coarse_label(p, 0.5).unwrap_or(cfg.coarse_classes);
                total += 1;
                if argmax(sm.values().row(p)) == Some(want) {
                    hits += 1;
                }
            }
        }
        assert!(total > 8000, "need a large sample, got {total}");
        let acc = hits as f64 / total as f64;
        let uniform = 1.0 / (cfg.coarse_classes + 1) as f64;
        assert!((acc - uniform).abs() < 0.02, "accuracy {acc} vs uniform {uniform}");
    }

    #[test]
    fn dataset_text_roundtrip() {
        let cfg = GeneratorConfig {
            train_detection_scenes: 2,
            train_classification_scenes: 2,
            test_scenes: 1,
            ..small_config()
        };
        let d = generate_dataset(&cfg, 21).unwrap();
        let text = d.to_text();
        let re = parse_dataset(&text).unwrap();
        assert_eq!(d, re);
        assert_eq!(re.to_text(), text);
    }

    #[test]
    fn dataset_parse_rejects_garbage() {
        assert!(parse_dataset("").is_err());
        assert!(parse_dataset("SIMDATA 2\n").is_err());
        assert!(parse_dataset("SIMDATA 1\n[scenes]\ngt 0 0 1 1 f00 c00\n").is_err());
        // Inconsistent coarse parent.
        let cfg = GeneratorConfig {
            train_detection_scenes: 1,
            train_classification_scenes: 0,
            test_scenes: 0,
            ..small_config()
        };
        let d = generate_dataset(&cfg, 2).unwrap();
        let text = d.to_text();
        let broken = text.replace("gt ", "gt_bad ");
        assert!(parse_dataset(&broken).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = GeneratorConfig::default();
        cfg.max_objects = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = GeneratorConfig::default();
        cfg.extent = 10.0;
        assert!(cfg.validate().is_err());
        let mut cfg = GeneratorConfig::default();
        cfg.fine_per_coarse = 0;
        assert!(cfg.validate().is_err());
    }
}
