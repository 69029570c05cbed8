//! Lloyd's K-means with k-means++ seeding. Used to build super-classes over
//! large coarse sets; a per-point weight hook is exposed for weighted
//! clustering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::correlation::{CorrelationKind, CorrelationMatrix};
use crate::embedding::ClassEmbeddingTable;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::numeric::squared_distance;
use crate::taxonomy::ClassId;
use crate::visual::soft_assign;

pub const MAX_ITERS: usize = 100;
pub const SHIFT_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct KmeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of (weighted) squared distances to the assigned centroid, one
    /// entry per completed iteration.
    pub objective_trace: Vec<f64>,
}

/// Super-class clustering of the coarse set plus the two encodings
/// super→coarse (hard nearest-centroid) and super→fine (soft).
#[derive(Clone, Debug)]
pub struct SuperClassModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub coarse_assignment: CorrelationMatrix,
    pub fine_assignment: CorrelationMatrix,
}

fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// k-means++ seeding: first centroid uniform, then proportional to the
/// weighted squared distance to the nearest chosen centroid.
fn seed_plus_plus(
    points: &[Vec<f64>],
    weights: &[f64],
    k: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().zip(weights).map(|(d, w)| d * w).sum();
        let idx = if total > 0.0 && total.is_finite() {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, (d, w)) in d2.iter().zip(weights).enumerate() {
                target -= d * w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with a centroid; duplicate one at random.
            rng.gen_range(0..n)
        };
        centroids.push(points[idx].clone());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, centroids.last().expect("just pushed"));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

pub fn lloyd(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KmeansResult> {
    let weights = vec![1.0; points.len()];
    lloyd_weighted(points, &weights, k, seed)
}

/// Weighted Lloyd iteration: assignment ties go to the lowest centroid index,
/// empty clusters are repaired by stealing the globally farthest point.
pub fn lloyd_weighted(
    points: &[Vec<f64>],
    weights: &[f64],
    k: usize,
    seed: u64,
) -> Result<KmeansResult> {
    if points.is_empty() {
        return Err(Error::EmptyInput("k-means points"));
    }
    if k == 0 || k > points.len() {
        return Err(Error::invalid(
            "k",
            format!("must be in 1..={}, got {k}", points.len()),
        ));
    }
    if weights.len() != points.len() {
        return Err(Error::DimMismatch {
            expected: points.len(),
            got: weights.len(),
        });
    }
    let dim = points[0].len();
    for p in points {
        if p.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: p.len(),
            });
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(points, weights, k, &mut rng);
    let mut assignments = vec![0usize; points.len()];
    let mut trace = Vec::new();

    for _ in 0..MAX_ITERS {
        for (i, p) in points.iter().enumerate() {
            assignments[i] = nearest_centroid(p, &centroids);
        }
        // Empty-cluster repair: steal the farthest point, but only from
        // clusters that keep at least one member, so each move strictly
        // reduces the number of empty clusters.
        loop {
            let mut counts = vec![0usize; k];
            for &a in &assignments {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let farthest = (0..points.len())
                .filter(|&i| counts[assignments[i]] >= 2)
                .max_by(|&a, &b| {
                    let da = squared_distance(&points[a], &centroids[assignments[a]]);
                    let db = squared_distance(&points[b], &centroids[assignments[b]]);
                    da.partial_cmp(&db)
                        .expect("finite distances")
                        .then(b.cmp(&a)) // tie -> lowest index
                });
            match farthest {
                Some(i) => assignments[i] = empty,
                // Fewer distinct points than clusters; the stale centroid
                // stays as a duplicate.
                None => break,
            }
        }

        let objective: f64 = points
            .iter()
            .zip(&assignments)
            .zip(weights)
            .map(|((p, &a), w)| w * squared_distance(p, &centroids[a]))
            .sum();
        trace.push(objective);

        let mut next = vec![vec![0.0; dim]; k];
        let mut mass = vec![0.0; k];
        for ((p, &a), &w) in points.iter().zip(&assignments).zip(weights) {
            mass[a] += w;
            for (acc, x) in next[a].iter_mut().zip(p) {
                *acc += w * x;
            }
        }
        let mut shift: f64 = 0.0;
        for (c, (acc, m)) in centroids.iter_mut().zip(next.iter().zip(&mass)) {
            if *m > 0.0 {
                let moved: Vec<f64> = acc.iter().map(|x| x / m).collect();
                shift = shift.max(squared_distance(c, &moved).sqrt());
                *c = moved;
            }
        }
        if shift < SHIFT_TOL {
            break;
        }
    }
    // Final assignment against the converged centroids.
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest_centroid(p, &centroids);
    }
    Ok(KmeansResult {
        centroids,
        assignments,
        objective_trace: trace,
    })
}

/// Clusters the coarse representations into `k` super-classes and derives the
/// two encodings: hard nearest-centroid for super→coarse and a soft
/// assignment for super→fine.
pub fn kmeans_superclasses(
    coarse: &ClassEmbeddingTable,
    k: usize,
    seed: u64,
    fine: &ClassEmbeddingTable,
    beta: f64,
) -> Result<SuperClassModel> {
    if coarse.is_empty() || fine.is_empty() {
        return Err(Error::EmptyInput("embedding table"));
    }
    if k == 0 || k > coarse.len() {
        return Err(Error::invalid(
            "k",
            format!("must be in 1..={}, got {k}", coarse.len()),
        ));
    }
    let points: Vec<Vec<f64>> = (0..coarse.len()).map(|i| coarse.vector(i).to_vec()).collect();
    let km = lloyd(&points, k, seed)?;

    let super_ids: Vec<ClassId> = (0..k).map(|s| format!("s{s}")).collect();
    let mut hard = Grid::zeros(k, coarse.len());
    for (i, &s) in km.assignments.iter().enumerate() {
        hard.set(s, i, 1.0);
    }
    let coarse_assignment = CorrelationMatrix::new(
        CorrelationKind::VisualHard,
        super_ids.clone(),
        coarse.ids().to_vec(),
        hard,
    )?;

    let mut centroid_table = ClassEmbeddingTable::new(coarse.dim())?;
    for (s, c) in km.centroids.iter().enumerate() {
        centroid_table.insert(super_ids[s].clone(), c.clone())?;
    }
    let fine_assignment = soft_assign(&centroid_table, fine, beta)?;

    Ok(SuperClassModel {
        k,
        centroids: km.centroids,
        coarse_assignment,
        fine_assignment,
    })
}
