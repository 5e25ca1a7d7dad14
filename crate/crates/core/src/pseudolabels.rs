//! Multi-granularity pseudo-labels from k-means over frozen features.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, DType};
use crate::error::{GrappaError, Result};

pub const PSEUDOLABEL_KIND: &str = "pseudolabels";

/// Features of the unlabeled pool under one model.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub features: Array2<f64>,
    pub ids: Vec<usize>,
    pub model_fingerprint: String,
}

impl FeatureStore {
    pub fn new(features: Array2<f64>, ids: Vec<usize>, model_fingerprint: String) -> Result<Self> {
        if features.nrows() != ids.len() {
            return Err(GrappaError::Shape(format!(
                "{} feature rows for {} ids",
                features.nrows(),
                ids.len()
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(GrappaError::Data("feature matrix has non-finite entries".into()));
        }
        let unique: HashSet<_> = ids.iter().collect();
        if unique.len() != ids.len() {
            return Err(GrappaError::Data("duplicate image ids in feature store".into()));
        }
        Ok(Self {
            features,
            ids,
            model_fingerprint,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iters: usize,
    /// Stop once the largest centroid displacement falls below this.
    pub tol: f64,
    /// L2-normalize features before clustering.
    pub normalize: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-4,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub granularity: usize,
    pub k: usize,
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step, first to last.
    pub inertia_history: Vec<f64>,
    pub seed: u64,
    pub model_fingerprint: String,
    pub normalized: bool,
}

impl PseudoLabelSet {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "granularity": self.granularity,
            "k": self.k,
            "inertia": self.inertia,
            "inertia_history": self.inertia_history,
            "seed": self.seed,
            "model_fingerprint": self.model_fingerprint,
            "normalized": self.normalized,
        });
        let mut ck = Checkpoint::new(PSEUDOLABEL_KIND, meta);
        ck.push_float("centroids", DType::F64, self.centroids.clone());
        ck.push_index(
            "assignments",
            self.assignments.iter().map(|&a| a as u32).collect(),
        );
        ck.save(stem)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let ck = Checkpoint::load(stem)?;
        if ck.kind != PSEUDOLABEL_KIND {
            return Err(GrappaError::Checkpoint(format!(
                "expected pseudo-labels, found `{}`",
                ck.kind
            )));
        }
        let meta = &ck.meta;
        let field = |name: &str| {
            meta.get(name)
                .cloned()
                .ok_or_else(|| GrappaError::Checkpoint(format!("pseudo-label meta missing `{name}`")))
        };
        let k: usize = serde_json::from_value(field("k")?)?;
        let assignments: Vec<usize> = ck.index("assignments")?.into_iter().map(|a| a as usize).collect();
        let centroids = ck.float_unshaped("centroids")?;
        if centroids.nrows() != k {
            return Err(GrappaError::Shape(format!(
                "{} centroids stored for k = {k}",
                centroids.nrows()
            )));
        }
        let set = Self {
            granularity: serde_json::from_value(field("granularity")?)?,
            k,
            centroids,
            assignments,
            inertia: serde_json::from_value(field("inertia")?)?,
            inertia_history: serde_json::from_value(field("inertia_history")?)?,
            seed: serde_json::from_value(field("seed")?)?,
            model_fingerprint: serde_json::from_value(field("model_fingerprint")?)?,
            normalized: serde_json::from_value(field("normalized")?)?,
        };
        if set.assignments.iter().any(|&a| a >= k) {
            return Err(GrappaError::Checkpoint("assignment out of range".into()));
        }
        Ok(set)
    }
}

#[inline]
fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lowest index.
fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_with_distances(z: &Array2<f64>, centroids: &Array2<f64>) -> Vec<(usize, f64)> {
    z.axis_iter(Axis(0))
        .into_par_iter()
        .map(|row| nearest(row, centroids))
        .collect()
}

/// `P(x) = argmin_c ||z - c||` with ties broken by the lowest index.
pub fn assign(z: &Array2<f64>, centroids: &Array2<f64>) -> Result<Vec<usize>> {
    if z.ncols() != centroids.ncols() {
        return Err(GrappaError::Shape(format!(
            "features have dim {}, centroids dim {}",
            z.ncols(),
            centroids.ncols()
        )));
    }
    if centroids.nrows() == 0 {
        return Err(GrappaError::Shape("no centroids".into()));
    }
    Ok(assign_with_distances(z, centroids)
        .into_iter()
        .map(|(j, _)| j)
        .collect())
}

fn l2_normalized(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance to the nearest chosen center.
fn kmeans_plus_plus(z: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = z.nrows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));
    let mut dist: Vec<f64> = z
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|r| sq_dist(r, z.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a positive entry")
        } else {
            // Every remaining point coincides with a center; take any unused index.
            let used: HashSet<usize> = chosen.iter().copied().collect();
            let free: Vec<usize> = (0..n).filter(|i| !used.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        let c = z.row(next);
        dist.par_iter_mut()
            .zip(z.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(d, r)| *d = d.min(sq_dist(r, c)));
    }
    z.select(Axis(0), &chosen)
}

/// Lloyd's algorithm from k-means++ seeds.
///
/// Empty clusters are re-seeded with the point farthest from its current
/// centroid, so exactly `k` clusters survive every iteration.
pub fn kmeans_fit(
    z: &Array2<f64>,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<PseudoLabelSet> {
    let n = z.nrows();
    if k == 0 {
        return Err(GrappaError::Config("k must be positive".into()));
    }
    if k > n {
        return Err(GrappaError::Config(format!("k = {k} exceeds {n} points")));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(GrappaError::Data("features contain non-finite values".into()));
    }
    let dim = z.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(z, k, &mut rng);
    let mut history = Vec::new();
    let mut converged = false;
    let mut iter = 0;
    loop {
        let assigned = assign_with_distances(z, &centroids);
        let inertia: f64 = assigned.iter().map(|&(_, d)| d).sum();
        history.push(inertia);
        if converged || iter >= max_iters {
            return Ok(PseudoLabelSet {
                granularity: 0,
                k,
                centroids,
                assignments: assigned.into_iter().map(|(j, _)| j).collect(),
                inertia,
                inertia_history: history,
                seed,
                model_fingerprint: String::new(),
                normalized: false,
            });
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (row, &(j, _)) in z.axis_iter(Axis(0)).zip(&assigned) {
            let mut s = sums.row_mut(j);
            s += &row;
            counts[j] += 1;
        }
        let mut next = centroids.clone();
        let mut taken = HashSet::new();
        let mut by_distance: Vec<usize> = (0..n).collect();
        by_distance.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
        let mut far = by_distance.into_iter();
        for j in 0..k {
            if counts[j] > 0 {
                let mean = &sums.row(j) / counts[j] as f64;
                next.row_mut(j).assign(&mean);
            } else {
                let p = far
                    .by_ref()
                    .find(|i| !taken.contains(i))
                    .expect("k <= n leaves a point to re-seed from");
                taken.insert(p);
                next.row_mut(j).assign(&z.row(p));
            }
        }
        let shift = next
            .axis_iter(Axis(0))
            .zip(centroids.axis_iter(Axis(0)))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        converged = shift < tol;
        iter += 1;
    }
}

/// One independent k-means run per granularity, with strictly increasing `ks`.
/// Run `i` uses seed `seed + i`.
pub fn build_granularities(
    store: &FeatureStore,
    ks: &[usize],
    seed: u64,
    config: &KMeansConfig,
) -> Result<Vec<PseudoLabelSet>> {
    if ks.is_empty() {
        return Err(GrappaError::Config("empty granularity list".into()));
    }
    if ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(GrappaError::Config(format!(
            "granularities must be strictly increasing, got {ks:?}"
        )));
    }
    let z = if config.normalize {
        l2_normalized(&store.features)
    } else {
        store.features.clone()
    };
    ks.iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut set = kmeans_fit(&z, k, seed.wrapping_add(i as u64), config.max_iters, config.tol)?;
            set.granularity = i;
            set.model_fingerprint = store.model_fingerprint.clone();
            set.normalized = config.normalize;
            Ok(set)
        })
        .collect()
}

/// Cluster counts used for the full-scale benchmark.
pub const FULL_SCALE_GRANULARITIES: [usize; 8] = [256, 1024, 4096, 8192, 16384, 32768, 65536, 131072];
