//! Exact k-nearest-neighbor graphs and training-pair sampling.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment_with, AugmentPolicy, Image};
use crate::error::{GrappaError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    /// `neighbors[i]` lists the `k` nearest other ids, nearest first.
    pub neighbors: Vec<Vec<usize>>,
    pub k: usize,
    pub epoch: usize,
}

fn squared_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact Euclidean k-NN without self; equal distances go to the lower id.
pub fn build_knn_graph(features: &Array2<f64>, k: usize, epoch: usize) -> Result<NeighborGraph> {
    let n = features.nrows();
    if k == 0 || k >= n {
        return Err(GrappaError::Config(format!(
            "k_nn = {k} must lie in [1, {n}) for {n} points"
        )));
    }
    let neighbors = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = features.row(i);
            let mut cands: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(row, features.row(j)), j))
                .collect();
            cands.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cands.truncate(k);
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cands.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(NeighborGraph { neighbors, k, epoch })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairVariant {
    /// Two augmentations of one image.
    Tc,
    /// An image and a uniformly drawn feature-space neighbor.
    Ac,
}

/// Ids of the partner images for `anchors` under the AC scheme.
pub fn sample_neighbor_ids<R: Rng>(anchors: &[usize], graph: &NeighborGraph, rng: &mut R) -> Vec<usize> {
    anchors
        .iter()
        .map(|&i| {
            let list = &graph.neighbors[i];
            list[rng.random_range(0..list.len())]
        })
        .collect()
}

/// Builds the two views of a batch of anchor ids.
pub fn sample_pairs<R: Rng>(
    variant: PairVariant,
    images: &[Image],
    anchors: &[usize],
    graph: Option<&NeighborGraph>,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(Vec<Image>, Vec<Image>)> {
    match variant {
        PairVariant::Tc => {
            let mut a = Vec::with_capacity(anchors.len());
            let mut b = Vec::with_capacity(anchors.len());
            for &i in anchors {
                a.push(augment_with(&images[i], policy, rng));
                b.push(augment_with(&images[i], policy, rng));
            }
            Ok((a, b))
        }
        PairVariant::Ac => {
            let graph = graph.ok_or_else(|| {
                GrappaError::Config("neighbor pairs need a current neighbor graph".into())
            })?;
            if graph.neighbors.len() != images.len() {
                return Err(GrappaError::Shape(format!(
                    "neighbor graph covers {} images, pool has {}",
                    graph.neighbors.len(),
                    images.len()
                )));
            }
            let partners = sample_neighbor_ids(anchors, graph, rng);
            Ok((
                anchors.iter().map(|&i| images[i].clone()).collect(),
                partners.iter().map(|&j| images[j].clone()).collect(),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn collinear_points() {
        let f = array![[0.0], [1.0], [10.0]];
        let g = build_knn_graph(&f, 1, 0).unwrap();
        assert_eq!(g.neighbors, vec![vec![1], vec![0], vec![1]]);
        assert!(build_knn_graph(&f, 3, 0).is_err());
    }

    #[test]
    fn ties_prefer_lower_id() {
        let f = array![[0.0], [-1.0], [1.0]];
        let g = build_knn_graph(&f, 1, 0).unwrap();
        assert_eq!(g.neighbors[0], vec![1]);
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = crate::nn::trunc_normal(100, 6, 1.0, &mut rng);
        let g = build_knn_graph(&f, 5, 0).unwrap();
        for i in 0..100 {
            let mut all: Vec<(f64, usize)> = (0..100)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = (0..6).map(|c| (f[[i, c]] - f[[j, c]]).powi(2)).sum();
                    (d, j)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = all[..5].iter().map(|p| p.1).collect();
            assert_eq!(g.neighbors[i], expect);
            assert!(!g.neighbors[i].contains(&i));
        }
    }

    #[test]
    fn pairs_by_variant() {
        let images: Vec<Image> = (0..3)
            .map(|i| Image::new(2, 2, 1, vec![i as f32 / 3.0; 4]).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = sample_pairs(PairVariant::Tc, &images, &[0, 2], None, &AugmentPolicy::identity(), &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(sample_pairs(PairVariant::Ac, &images, &[0], None, &AugmentPolicy::identity(), &mut rng).is_err());
        let f = array![[0.0], [1.0], [10.0]];
        let g = build_knn_graph(&f, 1, 0).unwrap();
        for _ in 0..10 {
            let (a, b) = sample_pairs(PairVariant::Ac, &images, &[2], Some(&g), &AugmentPolicy::identity(), &mut rng).unwrap();
            assert_eq!(a[0], images[2]);
            assert_eq!(b[0], images[1]);
        }
    }

    #[test]
    fn neighbor_draws_are_uniform() {
        let graph = NeighborGraph {
            neighbors: vec![vec![3, 1, 4, 7, 9]],
            k: 5,
            epoch: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 20_000;
        let ids = sample_neighbor_ids(&vec![0; draws], &graph, &mut rng);
        let expected = draws as f64 / 5.0;
        let chi2: f64 = graph.neighbors[0]
            .iter()
            .map(|n| {
                let c = ids.iter().filter(|&&x| x == *n).count() as f64;
                (c - expected).powi(2) / expected
            })
            .sum();
        // 99.9th percentile of chi-squared with 4 degrees of freedom.
        assert!(chi2 < 18.467, "chi2 = {chi2}");
    }
}
