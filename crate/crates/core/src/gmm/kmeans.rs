use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;

use super::{GmmParams, DEFAULT_EPSILON};
use crate::error::{FvError, Result};
use crate::matrix::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy)]
pub struct KmeansOptions {
    pub max_iter: usize,
    /// Stop once the relative inertia change drops below this.
    pub tol: f64,
    pub epsilon: f64,
}

impl Default for KmeansOptions {
    fn default() -> Self {
        KmeansOptions { max_iter: 100, tol: 1e-6, epsilon: DEFAULT_EPSILON }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn count_distinct(points: &Matrix) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter_rows()
        .map(|r| r.iter().map(|v| if *v == 0.0 { 0 } else { v.to_bits() }).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// k-means++ seeding followed by Lloyd iterations; the clusters become the
/// initial mixture (centroids, per-coordinate variances floored at `ε`,
/// cluster fractions as weights).
pub fn kmeans_init(points: &Matrix, k: usize, seed: u64, opts: &KmeansOptions) -> Result<GmmParams> {
    let (n, dim) = (points.rows(), points.cols());
    if k == 0 {
        return Err(FvError::InvalidParameter("k must be positive".into()));
    }
    if n == 0 || dim == 0 {
        return Err(FvError::Initialization("no points to cluster".into()));
    }
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(FvError::Initialization(format!("{distinct} distinct points cannot seed {k} clusters")));
    }

    let mut rng = rng::seeded(seed, rng::stream::KMEANS);
    let mut centroids = Matrix::zeros(k, dim);
    centroids.row_mut(0).copy_from_slice(points.row(rng.random_range(0..n)));
    let mut closest: Vec<f64> = points.iter_rows().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&closest) {
            Ok(dist) => dist.sample(&mut rng),
            // every remaining weight is zero only if fewer distinct points than k
            Err(_) => return Err(FvError::Initialization("degenerate k-means++ weights".into())),
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            closest[i] = closest[i].min(sq_dist(p, centroids.row(c)));
        }
    }

    let mut assignment = vec![0usize; n];
    let mut previous = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let mut inertia = 0.0;
        for (i, p) in points.iter_rows().enumerate() {
            let (best, d) = (0..k)
                .map(|c| (c, sq_dist(p, centroids.row(c))))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assignment[i] = best;
            inertia += d;
        }

        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter_rows().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums.row_mut(assignment[i]).iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Move an empty centroid onto the point farthest from its own.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(points.row(a), centroids.row(assignment[a]))
                            .total_cmp(&sq_dist(points.row(b), centroids.row(assignment[b])))
                    })
                    .unwrap();
                centroids.row_mut(c).copy_from_slice(points.row(far));
                assignment[far] = c;
                previous = f64::INFINITY;
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }

        let converged = previous.is_finite() && (previous - inertia).abs() <= opts.tol * previous.max(f64::MIN_POSITIVE);
        previous = inertia;
        if converged {
            break;
        }
    }

    // Final assignment against the final centroids.
    for (i, p) in points.iter_rows().enumerate() {
        assignment[i] = (0..k)
            .min_by(|&a, &b| sq_dist(p, centroids.row(a)).total_cmp(&sq_dist(p, centroids.row(b))))
            .unwrap();
    }
    let mut counts = vec![0usize; k];
    let mut means = Matrix::zeros(k, dim);
    for (i, p) in points.iter_rows().enumerate() {
        counts[assignment[i]] += 1;
        for (s, v) in means.row_mut(assignment[i]).iter_mut().zip(p) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            means.row_mut(c).copy_from_slice(centroids.row(c));
        } else {
            let inv = 1.0 / counts[c] as f64;
            means.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }
    let mut variances = Matrix::zeros(k, dim);
    for (i, p) in points.iter_rows().enumerate() {
        let c = assignment[i];
        for d in 0..dim {
            let diff = p[d] - means[(c, d)];
            variances[(c, d)] += diff * diff;
        }
    }
    for c in 0..k {
        let inv = if counts[c] > 0 { 1.0 / counts[c] as f64 } else { 0.0 };
        for v in variances.row_mut(c) {
            *v = (*v * inv).max(opts.epsilon);
        }
    }
    // Every cluster keeps a nonzero share so the mixture stays valid.
    let raw: Vec<f64> = counts.iter().map(|&c| (c as f64).max(0.5)).collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|c| c / total).collect();
    let drift = 1.0 - weights.iter().sum::<f64>();
    let heaviest = (0..k).max_by(|&a, &b| weights[a].total_cmp(&weights[b])).unwrap();
    weights[heaviest] += drift;

    GmmParams::new(weights, means, variances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn cloud(center: [f64; 2], n: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
        let noise = Normal::new(0.0, 0.3).unwrap();
        (0..n).map(|_| vec![center[0] + noise.sample(rng), center[1] + noise.sample(rng)]).collect()
    }

    #[test]
    fn single_cluster_is_data_moments() {
        let pts = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let p = kmeans_init(&pts, 1, 0, &KmeansOptions::default()).unwrap();
        assert_eq!(p.weights, vec![1.0]);
        assert!((p.means[(0, 0)] - 2.0).abs() < 1e-15 && (p.means[(0, 1)] - 2.0).abs() < 1e-15);
        assert!((p.variances[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.variances[(0, 1)] - 8.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn separated_clouds_recover_cloud_means() {
        let mut r = rng::seeded(3, 99);
        let a = cloud([-10.0, 0.0], 60, &mut r);
        let b = cloud([10.0, 5.0], 40, &mut r);
        let mean = |rows: &[Vec<f64>]| -> Vec<f64> {
            (0..2).map(|d| rows.iter().map(|p| p[d]).sum::<f64>() / rows.len() as f64).collect()
        };
        // Brute-force oracle: the only sensible 2-partition is the cloud split.
        let (ma, mb) = (mean(&a), mean(&b));
        let pts = Matrix::from_rows(&[a, b].concat()).unwrap();
        let p = kmeans_init(&pts, 2, 17, &KmeansOptions::default()).unwrap();
        let (ia, ib) = if p.means[(0, 0)] < 0.0 { (0, 1) } else { (1, 0) };
        for d in 0..2 {
            assert!((p.means[(ia, d)] - ma[d]).abs() < 1e-9);
            assert!((p.means[(ib, d)] - mb[d]).abs() < 1e-9);
        }
        assert!((p.weights[ia] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut r = rng::seeded(4, 0);
        let pts = Matrix::from_rows(&cloud([0.0, 0.0], 200, &mut r)).unwrap();
        let a = kmeans_init(&pts, 5, 42, &KmeansOptions::default()).unwrap();
        let b = kmeans_init(&pts, 5, 42, &KmeansOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_distinct_points() {
        let pts = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(kmeans_init(&pts, 3, 0, &KmeansOptions::default()), Err(FvError::Initialization(_))));
    }
}
